use adtext_core::encoder::{EncoderConfig, EncoderModel, HeadActivation, NormPlacement, Span};
use adtext_core::featurize::{featurize, TextFormat, DEFAULT_CUTOFF_TOLERANCE};
use adtext_core::synth::{generate, SynthConfig};
use adtext_core::tensor::Tape;
use adtext_core::tokenizer::{build_vocab, encode, TokenSequence};
use adtext_core::train::{mlm_accuracy, pretrain_mlm, regression_loss_and_grads, Objective, TrainRunConfig};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

const TEXTS: [&str; 3] = [
    "<s>NH3</s>VCr3 (2 1 0)</s>[N Cr Cr bridge [Cr Cr V N] [Cr V V N]]</s>",
    "<s>CO</s>Pt (1 1 1)</s>[C Pt ontop [Pt Pt Pt C]]</s>",
    "<s>OH</s>Cu3Au (1 0 0)</s>[O Cu Cu Au hollow]</s>",
];

fn small_model(norm: NormPlacement, head: HeadActivation) -> (EncoderModel, Vec<(TokenSequence, f64)>) {
    let vocab = build_vocab(TEXTS, 1).unwrap();
    let config = EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        hidden_size: 16,
        ffn_size: 32,
        max_positions: 24,
        vocab_size: vocab.len(),
        dropout_rate: 0.1,
        head_activation: head,
        norm,
        gelu: "tanh".into(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = EncoderModel::new(config, &mut rng).unwrap();
    // Move away from the near-uniform attention of a fresh init so that
    // every gradient is well above finite-difference noise.
    let jitter = Normal::new(0.0, 0.3).unwrap();
    for t in model.weights.values_mut() {
        for v in t.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let batch = TEXTS
        .iter()
        .zip([0.7, -1.3, 2.1])
        .map(|(t, y)| (encode(t, &vocab, 24), y))
        .collect();
    (model, batch)
}

struct GradCheck {
    agreeing: usize,
    total: usize,
    /// Worst relative error among gradients of magnitude at least 1e-6,
    /// well above the resolution of a central difference with h = 1e-5.
    worst_resolvable: f64,
}

fn gradient_check(mut model: EncoderModel, batch: &[(TokenSequence, f64)]) -> GradCheck {
    let (_, grads) = regression_loss_and_grads(&model, batch, None).unwrap();
    let h = 1e-5;
    let mut out = GradCheck {
        agreeing: 0,
        total: 0,
        worst_resolvable: 0.0,
    };
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = model.weights.values_mut()[k].data()[j];
            model.weights.values_mut()[k].data_mut()[j] = orig + h;
            let up = regression_loss_and_grads(&model, batch, None).unwrap().0;
            model.weights.values_mut()[k].data_mut()[j] = orig - h;
            let down = regression_loss_and_grads(&model, batch, None).unwrap().0;
            model.weights.values_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = g[j].abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (g[j] - numeric).abs() / scale };
            out.agreeing += usize::from(rel < 1e-4);
            out.total += 1;
            if scale >= 1e-6 {
                out.worst_resolvable = out.worst_resolvable.max(rel);
            }
        }
    }
    out
}

#[test]
fn pre_norm_gelu_head_gradients_match_finite_differences() {
    let (model, batch) = small_model(NormPlacement::Pre, HeadActivation::Gelu);
    let check = gradient_check(model, &batch);
    assert!(check.worst_resolvable < 1e-4, "worst relative error {}", check.worst_resolvable);
    assert!(check.agreeing as f64 >= 0.99 * check.total as f64, "{} of {}", check.agreeing, check.total);
}

#[test]
fn padded_positions_receive_no_gradient() {
    let (model, batch) = small_model(NormPlacement::Post, HeadActivation::Tanh);
    let seq = &batch[1].0;
    let real = seq.real_len();
    assert!(real < seq.len());

    let mut tape = Tape::new();
    let w = model.bind(&mut tape);
    let full = model.forward_on_tape(&mut tape, &w, seq, Span::Full, false, None).unwrap();
    tape.backward(full.energy).unwrap();
    let pos_grad = tape.grad(w.pos_emb).unwrap();
    let h = model.config.hidden_size;
    assert!(pos_grad[..real * h].iter().any(|g| *g != 0.0));
    assert!(pos_grad[real * h..].iter().all(|g| *g == 0.0));

    let energy = tape.value(full.energy).item();
    assert!((energy - model.predict(seq).unwrap()).abs() < 1e-12);
}

#[test]
fn mlm_beats_majority_guess() {
    let systems = generate(&SynthConfig {
        n_systems: 160,
        ..Default::default()
    })
    .unwrap();
    let texts: Vec<String> = systems
        .iter()
        .map(|s| featurize(s, TextFormat::S4, DEFAULT_CUTOFF_TOLERANCE, false).unwrap().text)
        .collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), 1).unwrap();
    let corpus: Vec<TokenSequence> = texts.iter().map(|t| encode(t, &vocab, 64)).collect();
    let mut config = EncoderConfig::desk(vocab.len());
    config.n_layers = 2;
    config.hidden_size = 32;
    config.ffn_size = 64;
    config.n_heads = 2;
    config.max_positions = 64;
    let model = EncoderModel::new(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let run = TrainRunConfig {
        objective: Objective::Mlm,
        base_lr: 2e-3,
        batch_size: 16,
        max_epochs: 12,
        ..Default::default()
    };
    let out = pretrain_mlm(&model, &corpus, &vocab, &run).unwrap();
    let acc = mlm_accuracy(&out.model, &out.head, &corpus, &vocab, 0.15, 99, 0).unwrap();
    assert!(acc.n_masked > 100);
    assert!(
        acc.accuracy > acc.majority_baseline,
        "accuracy {} vs majority {}",
        acc.accuracy,
        acc.majority_baseline
    );
}

