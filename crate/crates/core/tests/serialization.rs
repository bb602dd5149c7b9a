use std::path::Path;

use adtext_core::featurize::{detect_configuration, featurize, SiteType, TextFormat, DEFAULT_CUTOFF_TOLERANCE};
use adtext_core::system::{load_dataset, AtomicSystem, Tag};

const S1: &str = "<s>NH3</s>VCr3 (2 1 0)</s>";
const S2: &str = "<s>NH3</s>VCr3 (2 1 0)</s>[N, Cr, Cr, bridge]</s>";
const S3: &str = "<s>NH3</s>VCr3 (2 1 0)</s>[N, Cr, Cr, bridge]</s>[H, 1, 1.01, 1, 4.51, 2.2, 0.75][N, 7, 14.01, 2, 7.6, 3.04, -1.4][Cr, 24, 52.0, 4, 78.4, 1.66, 0.67][V, 23, 50.94, 4, 97.34, 1.63, 0.52]</s>";
const S4: &str =
    "<s>NH3</s>VCr3 (2 1 0)</s>[N Cr Cr bridge [Cr Cr Cr Cr V V V N] [Cr Cr Cr Cr V V V N]]</s>";
const S5: &str = "<s>NH3</s>VCr3 (2 1 0)</s>[N (Cr 2.1) (Cr 2.1) bridge [Cr Cr Cr Cr V V V N] [Cr Cr Cr Cr V V V N]]</s>";
const DESC: &str = "Adsorbate NH3 is adsorbed on the catalytic surface VCr3 with a Miller Index of (2, 1, 0). The N atom of the adsorbate is placed on the bridge site and is binding to the catalytic surface atoms Cr, Cr.";

fn fixture() -> AtomicSystem {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/nh3_vcr3.jsonl");
    load_dataset(path).unwrap().remove(0)
}

#[test]
fn every_format_matches_the_reference_table() {
    let sys = fixture();
    for (format, want) in [
        (TextFormat::S1, S1),
        (TextFormat::S2, S2),
        (TextFormat::S3, S3),
        (TextFormat::S4, S4),
        (TextFormat::S5, S5),
        (TextFormat::Desc, DESC),
    ] {
        let got = featurize(&sys, format, DEFAULT_CUTOFF_TOLERANCE, false).unwrap();
        assert_eq!(got.text, want, "{format:?}");
        assert_eq!(got.energy_ev, sys.energy_ev);
    }
}

#[test]
fn fixture_tags_match_an_independent_count() {
    let sys = fixture();
    // Count tags straight from the raw JSON rather than through the loader.
    let raw: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/nh3_vcr3.jsonl")).unwrap(),
    )
    .unwrap();
    let mut ads: Vec<String> = raw["atoms"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["tag"] == 2)
        .map(|a| a["element"].as_str().unwrap().to_string())
        .collect();
    ads.sort();
    assert_eq!(ads, ["H", "H", "H", "N"]);
    assert_eq!(sys.atoms.iter().filter(|a| a.tag == Tag::Adsorbate).count(), 4);
}

#[test]
fn fixture_configuration() {
    let cfg = detect_configuration(&fixture(), DEFAULT_CUTOFF_TOLERANCE).unwrap();
    assert_eq!(cfg.site_type, SiteType::Bridge);
    assert_eq!(cfg.binding_atom.element, "N");
    assert_eq!(cfg.primary_surface_atoms.len(), 2);
    for c in &cfg.primary_surface_atoms {
        assert_eq!(c.element, "Cr");
        assert!((c.distance - 2.1).abs() < 0.05, "{}", c.distance);
    }
    assert_eq!(cfg.secondary_lists.len(), 2);
}
