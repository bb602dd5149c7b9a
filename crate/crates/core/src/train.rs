//! Regression fine-tuning with early stopping and masked-token pretraining.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Span, Weights};
use crate::error::{Error, Result};
use crate::featurize::SerializedSample;
use crate::optim::{adamw_step, clip_global_norm, AdamWConfig, LrGroupPlan, OptimizerState, DEFAULT_BASE_LR};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{dynamic_mask, encode, TokenSequence, Vocabulary, DEFAULT_MASK_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    RegressionMae,
    Mlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub objective: Objective,
    pub base_lr: f64,
    pub group_factors: [f64; 3],
    pub adamw: AdamWConfig,
    /// Global-norm gradient clipping; off when `None`.
    pub grad_clip: Option<f64>,
    pub mask_rate: f64,
    /// MLM output projection shares the token embedding table.
    pub tied_projection: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            max_epochs: 100,
            early_stopping_patience: 5,
            warmup_steps: 0,
            seed: 0,
            objective: Objective::RegressionMae,
            base_lr: DEFAULT_BASE_LR,
            group_factors: crate::optim::GROUP_FACTORS,
            adamw: AdamWConfig::default(),
            grad_clip: None,
            mask_rate: DEFAULT_MASK_RATE,
            tied_projection: true,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stopping_patience == 0 {
            return Err(Error::Config("early_stopping_patience must be at least 1".into()));
        }
        if self.warmup_steps != 0 {
            return Err(Error::Config("warmup schedules are not supported; use 0".into()));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

fn record(history: &mut Vec<HistoryRecord>, epoch: usize, split: &str, metric: &str, value: f64) {
    history.push(HistoryRecord {
        epoch,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
    });
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in history {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Gradients of the bound weights, zero-filled where a weight took no part.
fn collect_grads(tape: &Tape, w: &Weights<Var>) -> Vec<Vec<f64>> {
    w.named()
        .into_iter()
        .map(|(_, v)| match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(*v).data().len()],
        })
        .collect()
}

fn param_names(model: &EncoderModel) -> Vec<String> {
    model.weights.named().into_iter().map(|(n, _)| n).collect()
}

/// Mean absolute error of a batch and the gradient of every parameter.
pub fn regression_loss_and_grads(
    model: &EncoderModel,
    batch: &[(TokenSequence, f64)],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let mut tape = Tape::new();
    let w = model.bind(&mut tape);
    let mut rng = dropout_rng;
    let mut energies = Vec::with_capacity(batch.len());
    for (seq, _) in batch {
        let out = model.forward_on_tape(&mut tape, &w, seq, Span::Real, false, rng.as_deref_mut())?;
        energies.push(out.energy);
    }
    let preds = tape.concat_rows(&energies)?;
    let labels: Vec<f64> = batch.iter().map(|(_, y)| *y).collect();
    let loss = tape.l1_loss(preds, &labels)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), collect_grads(&tape, &w)))
}

pub fn mean_absolute_error(pred: &[f64], labels: &[f64]) -> f64 {
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64
}

pub fn predict_all(model: &EncoderModel, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    seqs.iter().map(|s| model.predict(s)).collect()
}

fn evaluate_mae(model: &EncoderModel, data: &[(TokenSequence, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (seq, y) in data {
        total += (model.predict(seq)? - y).abs();
    }
    Ok(total / data.len() as f64)
}

fn apply_update(
    model: &mut EncoderModel,
    grads: &mut [Vec<f64>],
    extra: &mut [&mut Tensor],
    names: &[String],
    state: &mut OptimizerState,
    plan: &LrGroupPlan,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max) = clip {
        clip_global_norm(grads, max);
    }
    let mut params: Vec<&mut [f64]> = model
        .weights
        .values_mut()
        .into_iter()
        .map(|t| t.data_mut())
        .collect();
    params.extend(extra.iter_mut().map(|t| t.data_mut()));
    adamw_step(&mut params, grads, names, state, plan)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MAE.
    pub best_model: EncoderModel,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub steps: u64,
    pub history: Vec<HistoryRecord>,
}

/// Encode labelled samples; every sample must carry an energy.
pub fn encode_labelled(
    samples: &[SerializedSample],
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<Vec<(TokenSequence, f64)>> {
    samples
        .iter()
        .map(|s| {
            let y = s.energy_ev.ok_or_else(|| {
                Error::Training(format!("sample {} has no energy label", s.system_id))
            })?;
            Ok((encode(&s.text, vocab, max_positions), y))
        })
        .collect()
}

pub fn train_regression(
    model: &EncoderModel,
    train: &[SerializedSample],
    val: &[SerializedSample],
    vocab: &Vocabulary,
    config: &TrainRunConfig,
) -> Result<TrainOutcome> {
    let max = model.config.max_positions;
    let train = encode_labelled(train, vocab, max)?;
    let val = encode_labelled(val, vocab, max)?;
    train_regression_encoded(model, &train, &val, config)
}

/// Fine-tune on MAE loss. Each epoch shuffles with the run seed, steps
/// through batches, then scores the validation set; training stops once
/// `early_stopping_patience` epochs pass without a strictly lower
/// validation MAE.
pub fn train_regression_encoded(
    model: &EncoderModel,
    train: &[(TokenSequence, f64)],
    val: &[(TokenSequence, f64)],
    config: &TrainRunConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(format!(
            "{} training and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let mut model = model.clone();
    let names = param_names(&model);
    let plan = LrGroupPlan::with_factors(
        config.base_lr,
        config.group_factors,
        &names,
        model.config.n_layers,
    )?;
    let sizes: Vec<usize> = model.weights.named().iter().map(|(_, t)| t.data().len()).collect();
    let mut state = OptimizerState::new(config.adamw, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    let mut best_model = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(TokenSequence, f64)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut grads) = regression_loss_and_grads(&model, &batch, Some(&mut rng))?;
            abs_sum += loss * batch.len() as f64;
            apply_update(&mut model, &mut grads, &mut [], &names, &mut state, &plan, config.grad_clip)?;
        }
        let train_mae = abs_sum / train.len() as f64;
        let val_mae = evaluate_mae(&model, val)?;
        epochs_run = epoch;

        record(&mut history, epoch, "train", "mae", train_mae);
        record(&mut history, epoch, "val", "mae", val_mae);
        for (g, lr) in plan.group_lrs().iter().enumerate() {
            record(&mut history, epoch, "train", &format!("lr_group{}", g + 1), *lr);
        }
        log::info!(
            "epoch {epoch}: train MAE {train_mae:.4} eV, val MAE {val_mae:.4} eV ({:.1} s)",
            started.elapsed().as_secs_f64()
        );

        if !val_mae.is_finite() {
            return Err(Error::Training(format!("validation MAE became {val_mae} at epoch {epoch}")));
        }
        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_model = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stopping_patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best_model,
        best_epoch,
        best_val_mae: best_val,
        epochs_run,
        steps: state.step,
        history,
    })
}

/// Vocabulary projection used during masked-token pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    /// hidden x vocab; `None` when tied to the token embedding table.
    pub weight: Option<Tensor>,
    /// 1 x vocab.
    pub bias: Tensor,
}

impl MlmHead {
    pub fn new(model: &EncoderModel, tied: bool, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let (h, v) = (model.config.hidden_size, model.config.vocab_size);
        let weight = (!tied).then(|| {
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            Tensor::new(h, v, (0..h * v).map(|_| normal.sample(rng)).collect()).expect("shape")
        });
        Self {
            weight,
            bias: Tensor::zeros(1, v),
        }
    }

    fn names(&self) -> Vec<String> {
        let mut n = vec!["mlm.bias".to_string()];
        if self.weight.is_some() {
            n.push("mlm.weight".to_string());
        }
        n
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.bias];
        if let Some(w) = &mut self.weight {
            out.push(w);
        }
        out
    }
}

struct MlmGraph {
    loss: Var,
    logits: Var,
}

fn mlm_graph(
    tape: &mut Tape,
    model: &EncoderModel,
    w: &Weights<Var>,
    head_vars: &[Var],
    masked: &TokenSequence,
    positions: &[usize],
    targets: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<MlmGraph> {
    let out = model.forward_on_tape(tape, w, masked, Span::Real, false, dropout_rng)?;
    let picked = tape.select_rows(out.hidden, positions)?;
    let logits = match head_vars.get(1) {
        Some(&proj) => tape.matmul(picked, proj)?,
        None => tape.matmul_scaled(picked, w.token_emb, true, 1.0)?,
    };
    let logits = tape.add_row(logits, head_vars[0])?;
    let loss = tape.cross_entropy(logits, targets)?;
    Ok(MlmGraph { loss, logits })
}

/// Seed of the masking draw for one sequence in one epoch.
pub fn mask_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone)]
pub struct MlmOutcome {
    pub model: EncoderModel,
    pub head: MlmHead,
    pub history: Vec<HistoryRecord>,
    pub final_loss: f64,
    pub steps: u64,
    pub skipped_batches: usize,
}

/// Masked-token pretraining. Loss is the mean cross-entropy over masked
/// positions of a batch; masks are redrawn every epoch.
pub fn pretrain_mlm(
    model: &EncoderModel,
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    config: &TrainRunConfig,
) -> Result<MlmOutcome> {
    config.validate()?;
    if corpus.len() < config.batch_size {
        return Err(Error::Training(format!(
            "corpus of {} sequences is shorter than one batch of {}",
            corpus.len(),
            config.batch_size
        )));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} for a model built for {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = MlmHead::new(&model, config.tied_projection, &mut rng);
    let mut names = param_names(&model);
    names.extend(head.names());
    let plan = LrGroupPlan::with_factors(
        config.base_lr,
        config.group_factors,
        &names,
        model.config.n_layers,
    )?;
    let mut sizes: Vec<usize> = model.weights.named().iter().map(|(_, t)| t.data().len()).collect();
    sizes.extend(head.tensors_mut().iter().map(|t| t.data().len()));
    let mut state = OptimizerState::new(config.adamw, &sizes);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();
    let mut final_loss = f64::NAN;
    let mut skipped = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let w = model.bind(&mut tape);
            let head_vars: Vec<Var> = head
                .tensors_mut()
                .into_iter()
                .map(|t| tape.param(t.clone()))
                .collect();
            let mut losses = Vec::new();
            let mut counts = Vec::new();
            for &i in chunk {
                let (masked, labels) =
                    dynamic_mask(&corpus[i], vocab, config.mask_rate, mask_seed(config.seed, epoch, i))?;
                if labels.is_empty() {
                    continue;
                }
                let targets: Vec<usize> = labels.original_ids.iter().map(|&t| t as usize).collect();
                let g = mlm_graph(
                    &mut tape,
                    &model,
                    &w,
                    &head_vars,
                    &masked,
                    &labels.positions,
                    &targets,
                    Some(&mut rng),
                )?;
                losses.push(g.loss);
                counts.push(targets.len());
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                log::warn!("epoch {epoch}: no masked positions in batch, skipped");
                skipped += 1;
                continue;
            }
            // per-sequence means reweighted into one mean over all masked positions
            let mut weighted = Vec::with_capacity(losses.len());
            for (l, c) in losses.iter().zip(&counts) {
                weighted.push(tape.scale(*l, *c as f64 / total as f64));
            }
            let stacked = tape.concat_rows(&weighted)?;
            let loss = tape.sum(stacked);
            tape.backward(loss)?;
            loss_sum += tape.value(loss).item();
            loss_batches += 1;
            let mut grads = collect_grads(&tape, &w);
            grads.extend(head_vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()));
            for (g, size) in grads.iter_mut().zip(&sizes) {
                if g.is_empty() {
                    g.resize(*size, 0.0);
                }
            }
            let mut extra = head.tensors_mut();
            apply_update(&mut model, &mut grads, &mut extra, &names, &mut state, &plan, config.grad_clip)?;
        }
        if loss_batches > 0 {
            final_loss = loss_sum / loss_batches as f64;
            record(&mut history, epoch, "train", "mlm_loss", final_loss);
            log::info!("epoch {epoch}: masked-token loss {final_loss:.4}");
        }
    }
    Ok(MlmOutcome {
        model,
        head,
        history,
        final_loss,
        steps: state.step,
        skipped_batches: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmAccuracy {
    pub accuracy: f64,
    /// Accuracy of always guessing the most frequent masked token.
    pub majority_baseline: f64,
    pub n_masked: usize,
}

/// Top-1 accuracy on masked positions, with the same mask draw as
/// epoch `epoch` of a run seeded `seed`.
pub fn mlm_accuracy(
    model: &EncoderModel,
    head: &MlmHead,
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
    epoch: usize,
) -> Result<MlmAccuracy> {
    let mut correct = 0;
    let mut total = 0;
    let mut freq: HashMap<u32, usize> = HashMap::new();
    for (i, seq) in corpus.iter().enumerate() {
        let (masked, labels) = dynamic_mask(seq, vocab, mask_rate, mask_seed(seed, epoch, i))?;
        if labels.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let w = model.bind_constant(&mut tape);
        let mut hv = vec![tape.constant(head.bias.clone())];
        if let Some(wt) = &head.weight {
            hv.push(tape.constant(wt.clone()));
        }
        let targets: Vec<usize> = labels.original_ids.iter().map(|&t| t as usize).collect();
        let g = mlm_graph(&mut tape, model, &w, &hv, &masked, &labels.positions, &targets, None)?;
        let logits = tape.value(g.logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row_slice(r);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            correct += usize::from(best == t);
            *freq.entry(t as u32).or_default() += 1;
        }
        total += targets.len();
    }
    if total == 0 {
        return Err(Error::Training("no masked positions to score".into()));
    }
    let majority = freq.values().copied().max().unwrap_or(0);
    Ok(MlmAccuracy {
        accuracy: correct as f64 / total as f64,
        majority_baseline: majority as f64 / total as f64,
        n_masked: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny_model(vocab: usize) -> EncoderModel {
        let cfg = EncoderConfig {
            n_layers: 1,
            n_heads: 1,
            hidden_size: 4,
            ffn_size: 8,
            max_positions: 8,
            dropout_rate: 0.0,
            ..EncoderConfig::desk(vocab)
        };
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        let mut all = ids.to_vec();
        let mut mask = vec![1u8; ids.len()];
        all.resize(8, 1);
        mask.resize(8, 0);
        TokenSequence {
            leading: vec![String::new(); ids.len()],
            ids: all,
            attention_mask: mask,
            added_bos: false,
            added_eos: false,
        }
    }

    #[test]
    fn frozen_learning_rate_stops_after_patience_plus_one() {
        let m = tiny_model(8);
        let data: Vec<_> = (0..6).map(|i| (seq(&[0, 5 + (i % 3), 2]), i as f64 * 0.1)).collect();
        let cfg = TrainRunConfig {
            base_lr: 0.0,
            batch_size: 4,
            early_stopping_patience: 5,
            ..Default::default()
        };
        let out = train_regression_encoded(&m, &data, &data, &cfg).unwrap();
        assert_eq!(out.epochs_run, 6);
        assert_eq!(out.best_epoch, 1);
        let vals: Vec<f64> = out
            .history
            .iter()
            .filter(|r| r.split == "val" && r.metric == "mae")
            .map(|r| r.value)
            .collect();
        assert_eq!(vals.len(), 6);
        assert!(vals.iter().all(|v| *v == vals[0]));
        assert_eq!(out.best_model, m);
    }

    #[test]
    fn mae_of_exact_predictions_is_zero() {
        assert_eq!(mean_absolute_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert!((mean_absolute_error(&[1.0, 0.0], &[0.0, 0.5]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_and_bad_config() {
        let m = tiny_model(8);
        let data = vec![(seq(&[0, 5, 2]), 0.0)];
        assert!(train_regression_encoded(&m, &[], &data, &TrainRunConfig::default()).is_err());
        let cfg = TrainRunConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train_regression_encoded(&m, &data, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        let h = vec![HistoryRecord {
            epoch: 1,
            split: "val".into(),
            metric: "mae".into(),
            value: 0.25,
        }];
        write_history(&p, &h).unwrap();
        assert_eq!(read_history(&p).unwrap(), h);
    }

    #[test]
    fn mask_seeds_differ_by_epoch_and_index() {
        assert_ne!(mask_seed(1, 1, 0), mask_seed(1, 2, 0));
        assert_ne!(mask_seed(1, 1, 0), mask_seed(1, 1, 1));
    }
}
