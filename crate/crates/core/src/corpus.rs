//! Context/next-line pairs, the vocabulary, and the on-disk dataset format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexer::{LexedFile, SyntaxType};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const LENGTH: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TEXT: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<eos>", "<length>"];

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const VOCAB_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_MAX_CONTEXT: usize = 128;
pub const DEFAULT_MAX_TARGET: usize = 32;
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary max_size must exceed {NUM_SPECIALS}, got {0}")]
    VocabTooSmall(usize),
    #[error("dataset format version mismatch: expected {expected}, found {found}")]
    FormatVersionMismatch { expected: u32, found: String },
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub context: Vec<String>,
    pub target: Vec<String>,
    pub target_types: Vec<SyntaxType>,
}

/// Emit one pair per target line: the `window` preceding lines form the
/// context. Stride is one line; files never leak into each other.
pub fn build_pairs(file: &LexedFile, window: usize) -> Vec<ExamplePair> {
    assert!(window >= 1, "window must be at least 1");
    let lines = &file.lines;
    if lines.len() <= window {
        return Vec::new();
    }
    (0..lines.len() - window)
        .map(|k| {
            let context = lines[k..k + window]
                .iter()
                .flatten()
                .map(|t| t.text.clone())
                .collect();
            let target_line = &lines[k + window];
            ExamplePair {
                context,
                target: target_line.iter().map(|t| t.text.clone()).collect(),
                target_types: target_line.iter().map(|t| t.stype).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: SpecialIds,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "UPPERCASE")]
struct SpecialIds {
    pad: u32,
    unk: u32,
    eos: u32,
    length: u32,
}

const SPECIALS: SpecialIds = SpecialIds { pad: PAD, unk: UNK, eos: EOS, length: LENGTH };

/// Token frequencies, mergeable across files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenCounts(HashMap<String, u64>);

impl TokenCounts {
    pub fn add_pair(&mut self, pair: &ExamplePair) {
        for tok in pair.context.iter().chain(&pair.target) {
            *self.0.entry(tok.clone()).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: TokenCounts) {
        for (tok, n) in other.0 {
            *self.0.entry(tok).or_insert(0) += n;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Most frequent lexemes fill the slots after the specials; equal counts
/// are ordered lexicographically so the result is order-independent.
pub fn build_vocabulary<'a, I>(pairs: I, max_size: usize) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = &'a ExamplePair>,
{
    let mut counts = TokenCounts::default();
    for p in pairs {
        counts.add_pair(p);
    }
    Vocabulary::from_counts(counts, max_size)
}

impl Vocabulary {
    pub fn from_counts(counts: TokenCounts, max_size: usize) -> Result<Self, CorpusError> {
        if max_size <= NUM_SPECIALS {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts
            .0
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TEXT.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TEXT
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - NUM_SPECIALS).map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(SPECIAL_TEXT[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Space-joined surface text for a sequence of ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let texts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        crate::lexer::join_tokens(&texts)
    }

    /// SHA-256 over the id-ordered token list; binds checkpoints to vocabularies.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: SPECIALS,
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(CorpusError::FormatVersionMismatch {
                expected: VOCAB_FORMAT_VERSION,
                found: file.version.to_string(),
            });
        }
        let specials_ok = file.specials == SPECIALS
            && file.tokens.len() >= NUM_SPECIALS
            && file.tokens[..NUM_SPECIALS].iter().zip(SPECIAL_TEXT).all(|(a, b)| a == b);
        if !specials_ok {
            return Err(CorpusError::Malformed {
                line: 1,
                message: "special token ids do not match".into(),
            });
        }
        Ok(Self::from_tokens(file.tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    #[serde(rename = "ctx")]
    pub context_ids: Vec<u32>,
    #[serde(rename = "tgt")]
    pub target_ids: Vec<u32>,
    #[serde(rename = "typ")]
    pub target_types: Vec<SyntaxType>,
    #[serde(rename = "len")]
    pub true_length: usize,
}

impl EncodedPair {
    /// Context without the leading LENGTH id.
    pub fn raw_context(&self) -> &[u32] {
        &self.context_ids[1..]
    }

    /// Teacher-forcing target for the autoregressive baseline.
    pub fn with_eos(&self) -> Vec<u32> {
        let mut t = self.target_ids.clone();
        if t.last() != Some(&EOS) {
            t.push(EOS);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncodingMode {
    /// Length is predicted; no terminator.
    #[default]
    NonAutoregressive,
    /// EOS appended to the target.
    Autoregressive,
}

/// Left-truncate the context to `max_context` and prepend LENGTH. Returns
/// `None` (skipped) when the target exceeds `max_target`.
pub fn encode_pair(
    pair: &ExamplePair,
    vocab: &Vocabulary,
    max_context: usize,
    max_target: usize,
    mode: EncodingMode,
) -> Option<EncodedPair> {
    if pair.target.is_empty() || pair.target.len() > max_target {
        return None;
    }
    let keep = pair.context.len().min(max_context);
    let mut context_ids = Vec::with_capacity(keep + 1);
    context_ids.push(LENGTH);
    context_ids.extend(vocab.encode(&pair.context[pair.context.len() - keep..]));
    let mut target_ids = vocab.encode(&pair.target);
    let mut target_types = pair.target_types.clone();
    if mode == EncodingMode::Autoregressive {
        target_ids.push(EOS);
        target_types.push(SyntaxType::Other);
    }
    Some(EncodedPair {
        true_length: target_ids.len(),
        context_ids,
        target_ids,
        target_types,
    })
}

/// Encode a raw token context for inference (same truncation as training).
pub fn encode_context<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_context: usize) -> Vec<u32> {
    let keep = tokens.len().min(max_context);
    std::iter::once(LENGTH)
        .chain(vocab.encode(&tokens[tokens.len() - keep..]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub window: usize,
}

pub fn write_dataset(path: &Path, window: usize, pairs: &[EncodedPair]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &DatasetHeader { format_version: DATASET_FORMAT_VERSION, window },
    )?;
    w.write_all(b"\n")?;
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<EncodedPair>), CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().transpose()?.unwrap_or_default();
    let header: DatasetHeader = match serde_json::from_str::<serde_json::Value>(&header_line) {
        Ok(v) => match v.get("format_version").and_then(|x| x.as_u64()) {
            Some(n) if n == DATASET_FORMAT_VERSION as u64 => serde_json::from_value(v)?,
            Some(n) => {
                return Err(CorpusError::FormatVersionMismatch {
                    expected: DATASET_FORMAT_VERSION,
                    found: n.to_string(),
                })
            }
            None => {
                return Err(CorpusError::FormatVersionMismatch {
                    expected: DATASET_FORMAT_VERSION,
                    found: "missing".into(),
                })
            }
        },
        Err(_) => {
            return Err(CorpusError::FormatVersionMismatch {
                expected: DATASET_FORMAT_VERSION,
                found: "unreadable header".into(),
            })
        }
    };
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: EncodedPair = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?;
        let consistent = pair.target_ids.len() == pair.true_length
            && pair.target_types.len() == pair.true_length
            && pair.true_length >= 1
            && pair.context_ids.first() == Some(&LENGTH);
        if !consistent {
            return Err(CorpusError::Malformed {
                line: i + 2,
                message: "inconsistent lengths or missing LENGTH prefix".into(),
            });
        }
        pairs.push(pair);
    }
    Ok((header, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::{lex, Language, Token};

    fn file_with_lines(n: usize) -> LexedFile {
        LexedFile {
            language: Language::Python,
            lines: (0..n)
                .map(|i| {
                    vec![Token { text: format!("x{i}"), stype: SyntaxType::Identifier, line_no: i + 1 }]
                })
                .collect(),
        }
    }

    fn pair(ctx: &[&str], tgt: &[&str]) -> ExamplePair {
        ExamplePair {
            context: ctx.iter().map(|s| s.to_string()).collect(),
            target: tgt.iter().map(|s| s.to_string()).collect(),
            target_types: vec![SyntaxType::Identifier; tgt.len()],
        }
    }

    #[test]
    fn pair_counts() {
        assert_eq!(build_pairs(&file_with_lines(11), 10).len(), 1);
        assert_eq!(build_pairs(&file_with_lines(10), 10).len(), 0);
        let pairs = build_pairs(&file_with_lines(25), 10);
        assert_eq!(pairs.len(), 15);
        assert_eq!(pairs[0].context.first().unwrap(), "x0");
        assert_eq!(pairs[0].context.last().unwrap(), "x9");
        assert_eq!(pairs[0].target, ["x10"]);
        assert_eq!(pairs[14].target, ["x24"]);
    }

    #[test]
    fn pairs_carry_target_types() {
        let src = (0..3).map(|i| format!("v{i} = {i}\n")).collect::<String>() + "return v0 + v1\n";
        let f = lex(&src, Language::Python).unwrap();
        let pairs = build_pairs(&f, 3);
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            pairs[0].target_types,
            [SyntaxType::Keyword, SyntaxType::Identifier, SyntaxType::Operator, SyntaxType::Identifier]
        );
    }

    #[test]
    fn vocabulary_all_fit() {
        let pairs = [pair(&["a", "a"], &["a", "b"])];
        let v = build_vocabulary(&pairs, 6).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "<eos>", "<length>", "a", "b"]);
    }

    #[test]
    fn vocabulary_tie_break_is_lexicographic() {
        let pairs = [pair(&["a", "a", "c"], &["a", "b"])];
        let v = build_vocabulary(&pairs, 5).unwrap();
        assert_eq!(v.tokens()[4..], ["a"]);
        let pairs = [pair(&["a", "a", "c"], &["b", "a"])];
        let v = build_vocabulary(&pairs, 6).unwrap();
        assert_eq!(v.tokens()[4..], ["a", "b"]);
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn vocabulary_errors() {
        let empty: [ExamplePair; 0] = [];
        assert!(matches!(build_vocabulary(&empty, 10), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(
            build_vocabulary(&[pair(&["a"], &["b"])], 4),
            Err(CorpusError::VocabTooSmall(4))
        ));
    }

    #[test]
    fn vocabulary_ids_round_trip() {
        let v = build_vocabulary(&[pair(&["x", "y"], &["z"])], 100).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id)), id);
        }
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn encode_truncates_left() {
        let v = build_vocabulary(&[pair(&["a", "b", "c"], &["d"])], 100).unwrap();
        let short = pair(&["a"; 5], &["d"]);
        let e = encode_pair(&short, &v, 8, 32, EncodingMode::NonAutoregressive).unwrap();
        assert_eq!(e.context_ids.len(), 6);
        assert_eq!(e.context_ids[0], LENGTH);
        assert_eq!(e.true_length, 1);

        let ctx: Vec<&str> = ["b"; 4].into_iter().chain(["c"; 8]).collect();
        let long = pair(&ctx, &["d"]);
        let e = encode_pair(&long, &v, 8, 32, EncodingMode::NonAutoregressive).unwrap();
        assert_eq!(e.context_ids.len(), 9);
        assert!(e.context_ids[1..].iter().all(|&i| i == v.id("c")));
    }

    #[test]
    fn encode_skips_long_targets_and_appends_eos_for_ar() {
        let v = build_vocabulary(&[pair(&["a"], &["b"])], 100).unwrap();
        assert!(encode_pair(&pair(&["a"], &["b"; 33]), &v, 8, 32, EncodingMode::NonAutoregressive).is_none());
        let e = encode_pair(&pair(&["a"], &["b", "b"]), &v, 8, 32, EncodingMode::Autoregressive).unwrap();
        assert_eq!(e.target_ids.last(), Some(&EOS));
        assert_eq!(e.true_length, 3);
        let e = encode_pair(&pair(&["a"], &["b", "b"]), &v, 8, 32, EncodingMode::NonAutoregressive).unwrap();
        assert!(!e.target_ids.contains(&EOS));
        assert_eq!(e.with_eos().len(), 3);
    }

    #[test]
    fn dataset_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, 10, &[]).unwrap();
        let (h, pairs) = read_dataset(&path).unwrap();
        assert_eq!(h.window, 10);
        assert!(pairs.is_empty());

        std::fs::write(&path, "{\"format_version\": 7, \"window\": 10}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(CorpusError::FormatVersionMismatch { .. })));
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(CorpusError::FormatVersionMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn lines() -> impl Strategy<Value = Vec<Vec<String>>> {
            proptest::collection::vec(proptest::collection::vec("[a-e]{1,2}", 0..5), 0..20)
        }

        fn file_from(lines: &[Vec<String>]) -> LexedFile {
            LexedFile {
                language: Language::Python,
                lines: lines
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        l.iter()
                            .map(|t| Token { text: t.clone(), stype: SyntaxType::Identifier, line_no: i + 1 })
                            .collect()
                    })
                    .collect(),
            }
        }

        proptest! {
            #[test]
            fn pair_count_law(files in proptest::collection::vec(lines(), 1..4), window in 1usize..6) {
                let total: usize = files.iter().map(|f| build_pairs(&file_from(f), window).len()).sum();
                let expected: usize = files.iter().map(|f| f.len().saturating_sub(window)).sum();
                prop_assert_eq!(total, expected);
            }

            #[test]
            fn vocabulary_is_order_independent(
                f in lines().prop_filter("needs pairs", |l| l.len() > 2),
                seed in any::<u64>(),
                max_size in 5usize..40,
            ) {
                use rand::{seq::SliceRandom, SeedableRng};
                let pairs = build_pairs(&file_from(&f), 2);
                prop_assume!(pairs.iter().any(|p| !p.context.is_empty() || !p.target.is_empty()));
                let mut shuffled = pairs.clone();
                shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
                let a = build_vocabulary(&pairs, max_size).unwrap();
                let b = build_vocabulary(&shuffled, max_size).unwrap();
                prop_assert_eq!(a.tokens(), b.tokens());
            }

            #[test]
            fn targets_never_hold_pad_or_length(f in lines(), ar in any::<bool>()) {
                let pairs = build_pairs(&file_from(&f), 1);
                prop_assume!(pairs.iter().any(|p| !p.context.is_empty() || !p.target.is_empty()));
                let vocab = build_vocabulary(&pairs, 8).unwrap();
                let mode = if ar { EncodingMode::Autoregressive } else { EncodingMode::NonAutoregressive };
                for p in &pairs {
                    if let Some(e) = encode_pair(p, &vocab, 6, 4, mode) {
                        prop_assert!(!e.target_ids.contains(&PAD));
                        prop_assert!(!e.target_ids.contains(&LENGTH));
                        prop_assert_eq!(e.context_ids[0], LENGTH);
                        prop_assert!(e.context_ids.len() <= 7);
                        prop_assert_eq!(e.true_length, e.target_ids.len());
                    }
                }
            }
        }
    }
}
