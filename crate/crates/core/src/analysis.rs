//! Attention profiles per token and per word, heatmap export, and export of
//! first-token embeddings.
//!
//! A token's score is the attention it *receives*: the head-averaged
//! attention matrix is averaged over query positions, giving one column mean
//! per key position.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composition::{atom_count, unique_elements};
use crate::encoder::{AttentionRecord, EncoderModel};
use crate::error::{Error, Result};
use crate::system::AtomicSystem;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Received attention of every position of `layer`: the mean over heads
/// and query positions of `A[i][j]`.
pub fn token_attention(record: Option<&AttentionRecord>, layer: usize) -> Result<Vec<f64>> {
    let record = record.ok_or(Error::AttentionNotCaptured)?;
    let heads = record.layer(layer)?;
    let n = record.seq_len;
    let mut mean = vec![0.0; n * n];
    for a in heads {
        for (m, v) in mean.iter_mut().zip(a.data()) {
            *m += v;
        }
    }
    let h = heads.len() as f64;
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            scores[j] += mean[i * n + j] / h;
        }
    }
    scores.iter_mut().for_each(|s| *s /= n as f64);
    Ok(scores)
}

/// One word: a maximal run of non-special tokens with no whitespace between
/// them in the source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub text: String,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialToken {
    pub text: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WordAlignment {
    pub words: Vec<AlignedWord>,
    pub specials: Vec<SpecialToken>,
}

fn is_marker(vocab: &Vocabulary, id: u32) -> bool {
    id == vocab.bos_id() || id == vocab.eos_id() || id == vocab.pad_id() || id == vocab.mask_id()
}

/// Group the real positions of `seq` into words and special tokens.
pub fn align_words(seq: &TokenSequence, vocab: &Vocabulary) -> WordAlignment {
    let mut out = WordAlignment::default();
    let mut open = false;
    for (k, pos) in seq.real_positions().into_iter().enumerate() {
        let id = seq.ids[pos];
        let text = vocab.token(id).unwrap_or(crate::tokenizer::UNK).to_string();
        if is_marker(vocab, id) {
            out.specials.push(SpecialToken { text, position: pos });
            open = false;
            continue;
        }
        let spaced = seq.leading.get(k).is_some_and(|ws| !ws.is_empty());
        match out.words.last_mut() {
            Some(w) if open && !spaced => {
                w.text.push_str(&text);
                w.tokens.push(pos);
            }
            _ => out.words.push(AlignedWord {
                text,
                tokens: vec![pos],
            }),
        }
        open = true;
    }
    out
}

/// Word alignment where every real position is its own word (specials
/// still separate).
pub fn identity_alignment(seq: &TokenSequence, vocab: &Vocabulary) -> WordAlignment {
    let mut out = WordAlignment::default();
    for pos in seq.real_positions() {
        let id = seq.ids[pos];
        let text = vocab.token(id).unwrap_or(crate::tokenizer::UNK).to_string();
        if is_marker(vocab, id) {
            out.specials.push(SpecialToken { text, position: pos });
        } else {
            out.words.push(AlignedWord {
                text,
                tokens: vec![pos],
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordMerge {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttentionProfile {
    pub layer: usize,
    pub words: Vec<WordScore>,
    /// (token, position, score) of every special token.
    pub specials: Vec<(String, usize, f64)>,
}

impl TokenAttentionProfile {
    /// Word scores plus special-token scores.
    pub fn total(&self) -> f64 {
        self.words.iter().map(|w| w.score).sum::<f64>() + self.specials.iter().map(|s| s.2).sum::<f64>()
    }
}

/// Combine per-token scores into per-word scores.
pub fn merge_per_word(
    scores: &[f64],
    alignment: &WordAlignment,
    layer: usize,
    merge: WordMerge,
) -> Result<TokenAttentionProfile> {
    let mut assigned = vec![false; scores.len()];
    let mut take = |pos: usize| -> Result<f64> {
        let s = *scores
            .get(pos)
            .ok_or_else(|| Error::Shape(format!("position {pos} beyond {} scores", scores.len())))?;
        assigned[pos] = true;
        Ok(s)
    };
    let mut words = Vec::with_capacity(alignment.words.len());
    for w in &alignment.words {
        let mut total = 0.0;
        for &p in &w.tokens {
            total += take(p)?;
        }
        let score = match merge {
            WordMerge::Sum => total,
            WordMerge::Mean => total / w.tokens.len().max(1) as f64,
        };
        words.push(WordScore {
            word: w.text.clone(),
            tokens: w.tokens.clone(),
            score,
        });
    }
    let mut specials = Vec::with_capacity(alignment.specials.len());
    for s in &alignment.specials {
        specials.push((s.text.clone(), s.position, take(s.position)?));
    }
    if let Some(p) = assigned.iter().position(|a| !a) {
        return Err(Error::UnassignedToken(p));
    }
    Ok(TokenAttentionProfile {
        layer,
        words,
        specials,
    })
}

/// Profile of one sequence at one layer, word-aligned.
pub fn attention_profile(
    model: &EncoderModel,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    layer: usize,
    merge: WordMerge,
) -> Result<TokenAttentionProfile> {
    let out = model.forward(seq, true)?;
    let scores = token_attention(out.attention.as_ref(), layer)?;
    merge_per_word(&scores, &align_words(seq, vocab), layer, merge)
}

/// One line of a heatmap file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub system_id: String,
    pub layer: usize,
    /// Index of the word within the text.
    pub position: usize,
    pub word: String,
    pub score: f64,
    /// Score divided by the largest word score of the layer.
    pub intensity: f64,
}

pub fn heatmap_rows(system_id: &str, profile: &TokenAttentionProfile) -> Vec<HeatmapRow> {
    let max = profile.words.iter().map(|w| w.score).fold(0.0, f64::max);
    profile
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| HeatmapRow {
            system_id: system_id.to_string(),
            layer: profile.layer,
            position: i,
            word: w.word.clone(),
            score: w.score,
            intensity: if max > 0.0 { w.score / max } else { 0.0 },
        })
        .collect()
}

/// Write heatmap rows for several (system id, profile) pairs as JSON lines.
pub fn export_heatmap(path: impl AsRef<Path>, profiles: &[(String, TokenAttentionProfile)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, p) in profiles {
        for row in heatmap_rows(id, p) {
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Vec<HeatmapRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Fewer than 3 atoms is small, more than 5 large.
    pub fn of_atom_count(n: usize) -> Self {
        if n < 3 {
            SizeClass::Small
        } else if n > 5 {
            SizeClass::Large
        } else {
            SizeClass::Medium
        }
    }
}

/// One row of an embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub system_id: String,
    pub split: String,
    pub adsorbate_smiles: String,
    pub bulk_formula: String,
    pub adsorbate_atoms: usize,
    pub size_class: SizeClass,
    /// Bulk elements joined with `;`, for element-presence colorings.
    pub bulk_elements: String,
    pub vector: Vec<f64>,
}

/// First-token hidden state of every system.
pub fn compute_embeddings(
    model: &EncoderModel,
    items: &[(&AtomicSystem, &TokenSequence)],
) -> Result<Vec<EmbeddingRow>> {
    items
        .iter()
        .map(|(system, seq)| {
            let n = atom_count(&system.adsorbate_smiles)?;
            Ok(EmbeddingRow {
                system_id: system.id.clone(),
                split: system.split.to_string(),
                adsorbate_smiles: system.adsorbate_smiles.clone(),
                bulk_formula: system.bulk_formula.clone(),
                adsorbate_atoms: n,
                size_class: SizeClass::of_atom_count(n),
                bulk_elements: unique_elements(&system.bulk_formula)?.join(";"),
                vector: model.forward(seq, false)?.pooled,
            })
        })
        .collect()
}

const EMBED_META: [&str; 7] = [
    "system_id",
    "split",
    "adsorbate_smiles",
    "bulk_formula",
    "adsorbate_atoms",
    "size_class",
    "bulk_elements",
];

fn size_class_str(c: SizeClass) -> &'static str {
    match c {
        SizeClass::Small => "small",
        SizeClass::Medium => "medium",
        SizeClass::Large => "large",
    }
}

/// Tab-separated table with a header; vector columns are `e0`, `e1`, ...
pub fn export_embeddings(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    let width = rows.first().map_or(0, |r| r.vector.len());
    if rows.iter().any(|r| r.vector.len() != width) {
        return Err(Error::Shape("embedding rows of differing width".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = EMBED_META.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.system_id.clone(),
            r.split.clone(),
            r.adsorbate_smiles.clone(),
            r.bulk_formula.clone(),
            r.adsorbate_atoms.to_string(),
            size_class_str(r.size_class).to_string(),
            r.bulk_elements.clone(),
        ];
        rec.extend(r.vector.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < EMBED_META.len() || header.iter().zip(EMBED_META).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected embedding header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let bad = |m: String| Error::Parse { line, message: m };
        let size_class = match &rec[5] {
            "small" => SizeClass::Small,
            "medium" => SizeClass::Medium,
            "large" => SizeClass::Large,
            other => return Err(bad(format!("size class {other:?}"))),
        };
        let vector = rec
            .iter()
            .skip(EMBED_META.len())
            .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            system_id: rec[0].to_string(),
            split: rec[1].to_string(),
            adsorbate_smiles: rec[2].to_string(),
            bulk_formula: rec[3].to_string(),
            adsorbate_atoms: rec[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            size_class,
            bulk_elements: rec[6].to_string(),
            vector,
        });
    }
    Ok(rows)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tokenizer::{build_vocab, encode};

    fn record(mats: Vec<Vec<Vec<f64>>>) -> AttentionRecord {
        let n = mats[0].len();
        AttentionRecord {
            seq_len: n,
            layers: vec![mats
                .into_iter()
                .map(|m| Tensor::new(n, n, m.concat()).unwrap())
                .collect()],
        }
    }

    #[test]
    fn uniform_and_delta() {
        let r = record(vec![vec![vec![0.25; 4]; 4]]);
        assert_eq!(token_attention(Some(&r), 0).unwrap(), vec![0.25; 4]);
        let r = record(vec![vec![vec![1.0, 0.0, 0.0]; 3]]);
        assert_eq!(token_attention(Some(&r), 0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(token_attention(None, 0), Err(Error::AttentionNotCaptured)));
        assert!(matches!(token_attention(Some(&r), 1), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn words_follow_whitespace() {
        let text = "<s>NH3</s>VCr3 (2 1 0)</s>";
        let vocab = build_vocab([text], 1).unwrap();
        let seq = encode(text, &vocab, 32);
        let a = align_words(&seq, &vocab);
        let words: Vec<&str> = a.words.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(words, ["NH3", "VCr3", "(2", "1", "0)"]);
        assert_eq!(a.specials.len(), 3);
        assert_eq!(a.words[2].tokens.len(), 2);
    }

    #[test]
    fn merge_sums_and_conserves() {
        let al = WordAlignment {
            words: vec![
                AlignedWord {
                    text: "ab".into(),
                    tokens: vec![1, 2],
                },
                AlignedWord {
                    text: "c".into(),
                    tokens: vec![3],
                },
            ],
            specials: vec![SpecialToken {
                text: "<s>".into(),
                position: 0,
            }],
        };
        let scores = [0.4, 0.1, 0.2, 0.3];
        let p = merge_per_word(&scores, &al, 0, WordMerge::Sum).unwrap();
        assert!((p.words[0].score - 0.3).abs() < 1e-15);
        assert!((p.total() - 1.0).abs() < 1e-12);
        let m = merge_per_word(&scores, &al, 0, WordMerge::Mean).unwrap();
        assert!((m.words[0].score - 0.15).abs() < 1e-15);
        let short = WordAlignment {
            words: al.words[..1].to_vec(),
            specials: al.specials.clone(),
        };
        assert!(matches!(
            merge_per_word(&scores, &short, 0, WordMerge::Sum),
            Err(Error::UnassignedToken(3))
        ));
    }

    #[test]
    fn heatmap_intensity() {
        let p = TokenAttentionProfile {
            layer: 0,
            words: ["a", "b"]
                .iter()
                .map(|w| WordScore {
                    word: w.to_string(),
                    tokens: vec![],
                    score: 0.2,
                })
                .collect(),
            specials: vec![],
        };
        assert!(heatmap_rows("x", &p).iter().all(|r| r.intensity == 1.0));
    }

    #[test]
    fn size_classes() {
        assert_eq!(SizeClass::of_atom_count(2), SizeClass::Small);
        assert_eq!(SizeClass::of_atom_count(3), SizeClass::Medium);
        assert_eq!(SizeClass::of_atom_count(5), SizeClass::Medium);
        assert_eq!(SizeClass::of_atom_count(6), SizeClass::Large);
    }
}
