//! Word-level tokenizer with isolated punctuation, and dynamic masking.
//!
//! Text is split on whitespace; inside each chunk the markers `<s>` and
//! `</s>` and the characters `[ ] ( ) ,` are cut out as standalone tokens.
//! The whitespace that preceded every token is kept alongside the ids so
//! that decoding reproduces the source text exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = [BOS, PAD, EOS, UNK, MASK];

pub const DEFAULT_MAX_POSITIONS: usize = 512;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

const VOCAB_HEADER: &str = "# adtext-vocab v1";
const PUNCTUATION: [char; 5] = ['[', ']', '(', ')', ','];

/// One token of source text with the whitespace in front of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece<'a> {
    pub text: &'a str,
    pub leading: &'a str,
}

/// Split text into tokens, recording preceding whitespace.
pub fn tokenize(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut ws_start = 0;
    let mut word_start: Option<usize> = None;

    // flush the pending word ending at `end`
    fn flush<'a>(
        text: &'a str,
        pieces: &mut Vec<Piece<'a>>,
        word_start: &mut Option<usize>,
        ws_start: &mut usize,
        end: usize,
    ) {
        if let Some(start) = word_start.take() {
            pieces.push(Piece {
                text: &text[start..end],
                leading: &text[*ws_start..start],
            });
            *ws_start = end;
        }
    }

    while i < bytes.len() {
        let rest = &text[i..];
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            flush(text, &mut pieces, &mut word_start, &mut ws_start, i);
            i += c.len_utf8();
            continue;
        }
        let marker = if rest.starts_with(BOS) {
            Some(BOS.len())
        } else if rest.starts_with(EOS) {
            Some(EOS.len())
        } else if PUNCTUATION.contains(&c) {
            Some(1)
        } else {
            None
        };
        match marker {
            Some(len) => {
                flush(text, &mut pieces, &mut word_start, &mut ws_start, i);
                pieces.push(Piece {
                    text: &text[i..i + len],
                    leading: &text[ws_start..i],
                });
                i += len;
                ws_start = i;
            }
            None => {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                i += c.len_utf8();
            }
        }
    }
    flush(text, &mut pieces, &mut word_start, &mut ws_start, bytes.len());
    pieces
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn bos_id(&self) -> u32 {
        0
    }
    pub fn pad_id(&self) -> u32 {
        1
    }
    pub fn eos_id(&self) -> u32 {
        2
    }
    pub fn unk_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Vocab(format!("id {i} must be {special}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// File format: a header line naming the specials, then one token per
    /// line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "{VOCAB_HEADER} bos={BOS} pad={PAD} eos={EOS} unk={UNK} mask={MASK}\n"
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Vocab("empty file".into()))?;
        if !header.starts_with(VOCAB_HEADER) {
            return Err(Error::Vocab(format!("unrecognized header {header:?}")));
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

/// Build a vocabulary from a corpus. Tokens seen fewer than `min_freq` times
/// are left out (and later encode as `<unk>`).
pub fn build_vocab<I, S>(corpus: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_freq < 1 {
        return Err(Error::Vocab("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for piece in tokenize(line.as_ref()) {
            if SPECIALS.contains(&piece.text) {
                continue;
            }
            *counts.entry(piece.text.to_string()).or_default() += 1;
        }
    }
    if lines == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Whitespace before each real token of the source text.
    pub leading: Vec<String>,
    /// Whether the first and last real tokens were added by `encode` rather
    /// than present in the text.
    pub added_bos: bool,
    pub added_eos: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions with attention_mask = 1.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Positions that attention may look at, in order.
    pub fn real_positions(&self) -> Vec<usize> {
        self.attention_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Encode text as `<s> body </s>`, truncated and padded to `max_positions`.
/// Leading `<s>` / trailing `</s>` already in the text are reused rather
/// than doubled.
pub fn encode(text: &str, vocab: &Vocabulary, max_positions: usize) -> TokenSequence {
    assert!(max_positions >= 2, "max_positions must leave room for <s> and </s>");
    let pieces = tokenize(text);
    let mut ids = Vec::with_capacity(max_positions);
    let mut leading = Vec::with_capacity(max_positions);

    let added_bos = pieces.first().map(|p| p.text) != Some(BOS);
    let added_eos = pieces.last().map(|p| p.text) != Some(EOS);
    let body_start = usize::from(!added_bos);
    let body_end = pieces.len() - usize::from(!added_eos);

    ids.push(vocab.bos_id());
    leading.push(if added_bos { String::new() } else { pieces[0].leading.to_string() });
    for p in &pieces[body_start..body_end] {
        if ids.len() == max_positions - 1 {
            break;
        }
        ids.push(vocab.id(p.text));
        leading.push(p.leading.to_string());
    }
    ids.push(vocab.eos_id());
    leading.push(if added_eos {
        String::new()
    } else {
        pieces[pieces.len() - 1].leading.to_string()
    });

    let real = ids.len();
    ids.resize(max_positions, vocab.pad_id());
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_positions, 0);
    TokenSequence {
        ids,
        attention_mask,
        leading,
        added_bos,
        added_eos,
    }
}

/// Reverse of [`encode`] for sequences that were not truncated.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let real: Vec<usize> = seq.real_positions();
    let mut out = String::new();
    for (k, &pos) in real.iter().enumerate() {
        let skip = (k == 0 && seq.added_bos) || (k + 1 == real.len() && seq.added_eos);
        if skip {
            continue;
        }
        if let Some(ws) = seq.leading.get(k) {
            out.push_str(ws);
        } else if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(vocab.token(seq.ids[pos]).unwrap_or(UNK));
    }
    out
}

/// Positions selected by [`dynamic_mask`] with the ids they originally held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLabels {
    pub positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

impl MaskLabels {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// BERT-style masking: every non-special real position is selected with
/// probability `rate`; selected positions become `<mask>` 80% of the time, a
/// random non-special token 10% and stay unchanged 10%.
pub fn dynamic_mask(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    rate: f64,
    seed: u64,
) -> Result<(TokenSequence, MaskLabels)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::MaskRate(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = seq.clone();
    let mut labels = MaskLabels {
        positions: Vec::new(),
        original_ids: Vec::new(),
    };
    let n_special = SPECIALS.len() as u32;
    let n_vocab = vocab.len() as u32;
    for (pos, (&id, &m)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
        if m == 0 || vocab.is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        labels.positions.push(pos);
        labels.original_ids.push(id);
        let roll: f64 = rng.random();
        masked.ids[pos] = if roll < 0.8 {
            vocab.mask_id()
        } else if roll < 0.9 && n_vocab > n_special {
            rng.random_range(n_special..n_vocab)
        } else {
            id
        };
    }
    Ok((masked, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRING4: &str = "<s>NH3</s>VCr3 (2 1 0)</s>[N Cr Cr bridge [Cr Cr Cr Cr V V V N] [Cr Cr Cr Cr V V V N]]</s>";

    fn texts(pieces: &[Piece<'_>]) -> Vec<String> {
        pieces.iter().map(|p| p.text.to_string()).collect()
    }

    #[test]
    fn tokenize_isolates_markers_and_punctuation() {
        assert_eq!(texts(&tokenize("<s>NH3</s>")), ["<s>", "NH3", "</s>"]);
        assert_eq!(
            texts(&tokenize("VCr3 (2 1 0)</s>")),
            ["VCr3", "(", "2", "1", "0", ")", "</s>"]
        );
        assert_eq!(
            texts(&tokenize("[H, 1, 1.01]")),
            ["[", "H", ",", "1", ",", "1.01", "]"]
        );
        assert_eq!(texts(&tokenize("(2, 1, 0).")), ["(", "2", ",", "1", ",", "0", ")", "."]);
        assert!(tokenize("  \n ").is_empty());
    }

    #[test]
    fn one_token_corpus() {
        let vocab = build_vocab(["<s>NH3</s>"], 1).unwrap();
        assert_eq!(vocab.tokens(), ["<s>", "<pad>", "</s>", "<unk>", "<mask>", "NH3"]);
    }

    #[test]
    fn min_freq_threshold_maps_to_unk() {
        let vocab = build_vocab(["a a b"], 2).unwrap();
        assert_eq!(vocab.get("a"), Some(5));
        assert_eq!(vocab.get("b"), None);
        let seq = encode("b a", &vocab, 8);
        assert_eq!(&seq.ids[..4], &[0, vocab.unk_id(), 5, 2]);
        assert!(build_vocab(["a"], 0).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocab(Vec::<String>::new(), 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn string4_vocabulary_contents() {
        let vocab = build_vocab([STRING4], 1).unwrap();
        for t in ["NH3", "VCr3", "(", "2", "1", "0", ")", "[", "N", "Cr", "bridge", "V", "]"] {
            assert!(vocab.get(t).is_some(), "missing {t}");
        }
        // Cr is the most frequent word
        assert_eq!(vocab.token(5), Some("Cr"));
    }

    #[test]
    fn order_insensitive() {
        let a = build_vocab(["x y y", "z z z", "w"], 1).unwrap();
        let b = build_vocab(["w", "z z z", "x y y"], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[5..], ["z", "y", "w", "x"]);
    }

    #[test]
    fn encode_empty_and_lengths() {
        let vocab = build_vocab(["a"], 1).unwrap();
        let seq = encode("", &vocab, 6);
        assert_eq!(seq.ids, [0, 2, 1, 1, 1, 1]);
        assert_eq!(seq.attention_mask, [1, 1, 0, 0, 0, 0]);
        assert_eq!(decode(&seq, &vocab), "");
    }

    #[test]
    fn encode_truncates_keeping_markers() {
        let text = vec!["w"; 600].join(" ");
        let vocab = build_vocab([text.as_str()], 1).unwrap();
        let seq = encode(&text, &vocab, 512);
        assert_eq!(seq.ids.len(), 512);
        assert_eq!(seq.ids[0], vocab.bos_id());
        assert_eq!(seq.ids[511], vocab.eos_id());
        assert_eq!(seq.real_len(), 512);
    }

    #[test]
    fn existing_markers_are_not_doubled() {
        let vocab = build_vocab([STRING4], 1).unwrap();
        let seq = encode(STRING4, &vocab, 64);
        assert_eq!(seq.ids[0], vocab.bos_id());
        assert_ne!(seq.ids[1], vocab.bos_id());
        assert!(!seq.added_bos && !seq.added_eos);
        assert_eq!(decode(&seq, &vocab), STRING4);
        let prose = "Adsorbate NH3 is adsorbed.\n\nSecond paragraph (2, 1, 0).";
        let vocab = build_vocab([prose], 1).unwrap();
        let seq = encode(prose, &vocab, 64);
        assert!(seq.added_bos && seq.added_eos);
        assert_eq!(decode(&seq, &vocab), prose);
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = build_vocab([STRING4], 1).unwrap();
        let text = vocab.to_file_string();
        assert!(text.starts_with("# adtext-vocab v1 bos=<s>"));
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.hash(), vocab.hash());
        assert!(Vocabulary::from_file_string("nonsense\n<s>\n").is_err());
        let swapped = text.replace("<pad>\n</s>", "</s>\n<pad>");
        assert!(Vocabulary::from_file_string(&swapped).is_err());
    }

    #[test]
    fn mask_rate_validation_and_determinism() {
        let vocab = build_vocab([STRING4], 1).unwrap();
        let seq = encode(STRING4, &vocab, 64);
        assert!(matches!(dynamic_mask(&seq, &vocab, 0.0, 1), Err(Error::MaskRate(_))));
        assert!(matches!(dynamic_mask(&seq, &vocab, 1.0, 1), Err(Error::MaskRate(_))));
        let a = dynamic_mask(&seq, &vocab, 0.15, 7).unwrap();
        let b = dynamic_mask(&seq, &vocab, 0.15, 7).unwrap();
        assert_eq!(a, b);
        let (_, tiny) = dynamic_mask(&seq, &vocab, 1e-9, 3).unwrap();
        assert!(tiny.is_empty());
    }

    #[test]
    fn masking_never_touches_specials_or_padding() {
        let vocab = build_vocab([STRING4], 1).unwrap();
        let seq = encode(STRING4, &vocab, 64);
        for seed in 0..200 {
            let (masked, labels) = dynamic_mask(&seq, &vocab, 0.5, seed).unwrap();
            for (pos, &id) in seq.ids.iter().enumerate() {
                if vocab.is_special(id) || seq.attention_mask[pos] == 0 {
                    assert_eq!(masked.ids[pos], id);
                    assert!(!labels.positions.contains(&pos));
                }
            }
            for (&pos, &orig) in labels.positions.iter().zip(&labels.original_ids) {
                assert_eq!(seq.ids[pos], orig);
            }
        }
    }
}
