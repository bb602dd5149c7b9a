use adtext_core::eval::{
    generate_pairs, pair_count, pair_statistics, secr, CoMoments, PredictionRecord, SimilarityFlags, Subgroup,
};
use adtext_core::system::Split;
use adtext_core::tensor::{softmax, Axis, Tensor};
use adtext_core::tokenizer::{build_vocab, decode, dynamic_mask, encode};
use proptest::prelude::*;

const SMILES: [&str; 4] = ["CO", "OH", "NH3", "N"];
const BULKS: [&str; 4] = ["Pt", "Cu3Au", "VCr3", "Ni"];

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0..4usize, 0..4usize, -3.0..3.0f64, -1.0..1.0f64, 0..3usize), 2..24).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (a, b, label, err, split))| {
                let split = [Split::Id, Split::OodAds, Split::OodCat][split];
                PredictionRecord::new(format!("r{i:03}"), split, SMILES[a], BULKS[b], label, label + err)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        vals in prop::collection::vec(-30.0..30.0f64, 12),
        shift in -500.0..500.0f64,
    ) {
        let x = Tensor::new(3, 4, vals.clone()).unwrap();
        let y = Tensor::new(3, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
        let a = softmax(&x, Axis::Rows);
        let b = softmax(&y, Axis::Rows);
        for r in 0..3 {
            let s: f64 = a.row_slice(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec("[A-Z][a-z]?[0-9]?|\\[|\\]|\\(|\\)|[0-9]", 1..20)) {
        let text = words.join(" ");
        let vocab = build_vocab([text.as_str()], 1).unwrap();
        let seq = encode(&text, &vocab, 64);
        prop_assert_eq!(seq.ids.len(), 64);
        prop_assert_eq!(decode(&seq, &vocab), text);
    }

    #[test]
    fn masking_skips_specials_and_padding(seed in any::<u64>(), rate in 0.05..0.6f64) {
        let text = "<s>NH3</s>VCr3 (2 1 0)</s>[N Cr Cr bridge [Cr Cr Cr Cr V V V N]]</s>";
        let vocab = build_vocab([text], 1).unwrap();
        let seq = encode(text, &vocab, 48);
        let (masked, labels) = dynamic_mask(&seq, &vocab, rate, seed).unwrap();
        for (pos, (&orig, &m)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
            if m == 0 || vocab.is_special(orig) {
                prop_assert_eq!(masked.ids[pos], orig);
                prop_assert!(!labels.positions.contains(&pos));
            }
        }
        for (&pos, &orig) in labels.positions.iter().zip(&labels.original_ids) {
            prop_assert_eq!(seq.ids[pos], orig);
        }
    }

    #[test]
    fn pair_error_identity_and_counts(recs in records()) {
        let pairs = generate_pairs(&recs, true).unwrap();
        let mut expected = 0;
        for split in [Split::Id, Split::OodAds, Split::OodCat] {
            expected += pair_count(recs.iter().filter(|r| r.split == split).count() as u64);
        }
        prop_assert_eq!(pairs.len() as u64, expected);
        let by_id = |id: &str| recs.iter().find(|r| r.system_id == id).unwrap();
        for p in &pairs {
            let (a, b) = (by_id(&p.id_i), by_id(&p.id_j));
            prop_assert!(((p.prediction_diff - p.label_diff) - (a.error - b.error)).abs() < 1e-12);
            prop_assert_eq!(p.error, a.error - b.error);
        }
    }

    #[test]
    fn subgroup_relations(recs in records()) {
        for p in generate_pairs(&recs, false).unwrap() {
            let f = p.flags();
            prop_assert!(f.in_subgroup(Subgroup::Total));
            prop_assert!(!(f.in_subgroup(Subgroup::SharingOne) && f.in_subgroup(Subgroup::SharingTwo)));
            if f.in_subgroup(Subgroup::SharingTwo) {
                prop_assert!(f.in_subgroup(Subgroup::ChemicallySimilar));
            }
        }
        let a = &recs[0];
        prop_assert!(SimilarityFlags::of(a, a).in_subgroup(Subgroup::SharingTwo));
    }

    #[test]
    fn secr_is_sign_flip_invariant(recs in records()) {
        let flipped: Vec<PredictionRecord> = recs
            .iter()
            .map(|r| PredictionRecord::new(&r.system_id, r.split, &r.adsorbate_smiles, &r.bulk_formula, r.label, r.label - r.error))
            .collect();
        let pa = generate_pairs(&recs, false).unwrap();
        let pb = generate_pairs(&flipped, false).unwrap();
        for g in Subgroup::ALL {
            match (secr(&pa, g), secr(&pb, g)) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9, "{g:?}: {x} vs {y}"),
                (x, y) => prop_assert_eq!(x.is_some(), y.is_some()),
            }
        }
        if let Some(s) = secr(&pa, Subgroup::Total) {
            prop_assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn streaming_matches_materialized(recs in records()) {
        let stats = pair_statistics(&recs, false).unwrap();
        let pairs = generate_pairs(&recs, false).unwrap();
        let (_, s) = stats.iter().next().unwrap();
        for g in Subgroup::ALL {
            let errs: Vec<f64> = pairs.iter().filter(|p| p.flags().in_subgroup(g)).map(|p| p.error).collect();
            prop_assert_eq!(s.get(g).count, errs.len() as u64);
            if !errs.is_empty() {
                let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
                prop_assert!((s.get(g).rmse().unwrap() - rmse).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn comoments_match_two_pass(xy in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..50)) {
        let mut m = CoMoments::default();
        for &(x, y) in &xy {
            m.push(x, y);
        }
        let n = xy.len() as f64;
        let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
        let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
        let vx = xy.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
        let cov = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / n;
        prop_assert!((m.var_x() - vx).abs() < 1e-10);
        prop_assert!((m.cov() - cov).abs() < 1e-10);
    }
}
