//! Corpus ingestion: tokenization, vocabulary construction and the
//! (sentence, next-N-words) training pair stream, batched and padded.
//!
//! Corpus files are UTF-8 plain text, one sentence per line. Vocabulary
//! files are one token per line with the line number as id; ids 0..=2 are
//! the reserved specials.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_TOKEN: &str = "<sos>";

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Lowercased whitespace tokens with punctuation split off as standalone
/// tokens. Deterministic; empty text yields an empty sequence.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut word = String::new();
        for ch in lower.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Bidirectional token <-> id map with frequency ordering and the three
/// reserved specials at ids 0..=2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
            counts: Vec::new(),
        };
        for s in [PAD_TOKEN, UNK_TOKEN, SOS_TOKEN] {
            v.push(s.to_string(), 0);
        }
        v
    }

    fn push(&mut self, token: String, count: u64) {
        let id = self.tokens.len();
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        self.counts.push(count);
    }

    /// Specials plus the `max_size` most frequent tokens, ties broken
    /// lexicographically. Tokens equal to a special string are skipped.
    pub fn build(stream: impl IntoIterator<Item = String>, max_size: usize) -> Result<Self> {
        if max_size < 1 {
            return Err(Error::Config("vocabulary max_size must be >= 1".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in stream {
            if tok == PAD_TOKEN || tok == UNK_TOKEN || tok == SOS_TOKEN {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        let mut v = Vocabulary::with_specials();
        for (tok, n) in ranked {
            v.push(tok, n);
        }
        Ok(v)
    }

    /// Vocabulary over an explicit token list in id order (after the
    /// specials); used by synthetic corpora and checkpoint loading.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocabulary::with_specials();
        for tok in tokens {
            if v.ids.contains_key(&tok) {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
            v.push(tok, 0);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Index(format!("id {id} out of vocabulary")))
            })
            .collect()
    }

    /// Appends a token at the next id; used by vocabulary expansion.
    pub fn append(&mut self, token: String) -> Result<usize> {
        if self.ids.contains_key(&token) {
            return Err(Error::Config(format!("token {token:?} already present")));
        }
        let id = self.tokens.len();
        self.push(token, 0);
        Ok(id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for tok in &self.tokens {
            text.push_str(tok);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3
            || lines[0] != PAD_TOKEN
            || lines[1] != UNK_TOKEN
            || lines[2] != SOS_TOKEN
        {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN}, {SOS_TOKEN}",
                path.display()
            )));
        }
        Vocabulary::from_tokens(lines[3..].iter().map(|s| s.to_string()))
    }
}

/// Source sentence ids plus the N token ids that follow it in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One pair per sentence whose flattened continuation holds at least N
/// tokens. Sources are truncated to `max_src_len`; targets are the N ids
/// following the full sentence and may cross sentence boundaries.
pub fn make_pairs(
    sentences: &[Vec<String>],
    vocab: &Vocabulary,
    n: usize,
    max_src_len: usize,
) -> Result<Vec<TrainingPair>> {
    if n < 1 {
        return Err(Error::Config("target length N must be >= 1".into()));
    }
    if max_src_len < 1 {
        return Err(Error::Config("max_src_len must be >= 1".into()));
    }
    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| vocab.encode(s))
        .collect();
    let flat: Vec<usize> = encoded.iter().flatten().copied().collect();
    let mut pairs = Vec::new();
    let mut end = 0usize;
    for ids in &encoded {
        end += ids.len();
        if flat.len() - end >= n {
            let mut source = ids.clone();
            source.truncate(max_src_len);
            pairs.push(TrainingPair {
                source,
                target: flat[end..end + n].to_vec(),
            });
        }
    }
    Ok(pairs)
}

/// Padded batch: B source rows (PAD-filled to the widest source in the
/// batch), true lengths and a B x N target matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    source: Vec<usize>,
    width: usize,
    lengths: Vec<usize>,
    targets: Vec<usize>,
    n: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[&TrainingPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("batch must hold at least one pair".into()));
        }
        let n = pairs[0].target.len();
        let width = pairs.iter().map(|p| p.source.len()).max().unwrap();
        let mut source = vec![PAD; pairs.len() * width];
        let mut lengths = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len() * n);
        for (i, p) in pairs.iter().enumerate() {
            if p.source.is_empty() {
                return Err(Error::EmptySentence(format!("pair {i} has empty source")));
            }
            if p.target.len() != n {
                return Err(Error::Shape(format!(
                    "pair {i}: target length {} != {n}",
                    p.target.len()
                )));
            }
            if p.target.contains(&PAD) {
                return Err(Error::Config(format!("pair {i}: PAD id in target")));
            }
            source[i * width..i * width + p.source.len()].copy_from_slice(&p.source);
            lengths.push(p.source.len());
            targets.extend_from_slice(&p.target);
        }
        Ok(Batch {
            source,
            width,
            lengths,
            targets,
            n,
        })
    }

    /// Encode-only batch: sources without targets (n = 0).
    pub fn from_sources(sources: &[Vec<usize>]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("batch must hold at least one sentence".into()));
        }
        let width = sources.iter().map(Vec::len).max().unwrap();
        let mut source = vec![PAD; sources.len() * width];
        let mut lengths = Vec::with_capacity(sources.len());
        for (i, s) in sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptySentence(format!("sentence {i} has no tokens")));
            }
            source[i * width..i * width + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(Batch {
            source,
            width,
            lengths,
            targets: Vec::new(),
            n: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Row-major B x width source ids.
    pub fn source(&self) -> &[usize] {
        &self.source
    }

    /// Row-major B x N target ids.
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn source_id(&self, b: usize, t: usize) -> usize {
        self.source[b * self.width + t]
    }

    pub fn target_id(&self, b: usize, p: usize) -> usize {
        self.targets[b * self.n + p]
    }

    /// Target ids at position `p` across the batch.
    pub fn target_column(&self, p: usize) -> Vec<usize> {
        (0..self.size()).map(|b| self.target_id(b, p)).collect()
    }

    pub fn check_ids(&self, vocab_size: usize) -> Result<()> {
        let all = self.source.iter().chain(self.targets.iter());
        for &id in all {
            if id >= vocab_size {
                return Err(Error::Index(format!(
                    "token id {id} out of vocabulary ({vocab_size})"
                )));
            }
        }
        Ok(())
    }
}

/// One epoch of batches: pairs shuffled once with the seeded generator,
/// chunked, final partial batch kept. Batch order is a pure function of
/// (pairs, batch_size, seed).
pub fn batchify(pairs: &[TrainingPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs)
        })
        .collect()
}

/// Sentences of a one-sentence-per-line corpus file, tokenized. Blank
/// lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A dog."), toks(&["a", "dog", "."]));
        assert_eq!(tokenize("don't stop"), toks(&["don", "'", "t", "stop"]));
        assert_eq!(
            tokenize("  Hello,  WORLD! (ok)"),
            toks(&["hello", ",", "world", "!", "(", "ok", ")"])
        );
    }

    #[test]
    fn build_vocab_ordering_and_ties() {
        let v = Vocabulary::build(Vec::<String>::new(), 5).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));
        assert_eq!(v.token(SOS), Some(SOS_TOKEN));

        let stream = toks(&["a", "a", "b", "c"]);
        let v = Vocabulary::build(stream, 2).unwrap();
        assert_eq!(v.tokens()[3..], toks(&["a", "b"])[..]);

        let stream = toks(&["x", "y", "x", "y"]);
        let v = Vocabulary::build(stream, 5).unwrap();
        assert_eq!(v.tokens()[3..], toks(&["x", "y"])[..]);
    }

    #[test]
    fn vocab_round_trip_is_identity_for_known_tokens() {
        let v = Vocabulary::build(toks(&["cat", "dog", "cat"]), 10).unwrap();
        for tok in v.tokens() {
            let id = v.id(tok).unwrap();
            assert_eq!(v.token(id), Some(tok.as_str()));
        }
        let ids = v.encode(&toks(&["dog", "cat", "emu"]));
        assert_eq!(ids[2], UNK);
        let back = v.decode(&ids[..2]).unwrap();
        assert_eq!(back, toks(&["dog", "cat"]));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(toks(&["b", "a", "b"]), 10).unwrap();
        v.write(&path).unwrap();
        let loaded = Vocabulary::read(&path).unwrap();
        assert_eq!(loaded.tokens(), v.tokens());

        std::fs::write(&path, "nope\n").unwrap();
        assert!(Vocabulary::read(&path).is_err());
    }

    #[test]
    fn make_pairs_boundaries() {
        let v = Vocabulary::build(toks(&["a", "b", "c", "d", "e", "f"]), 10).unwrap();
        // single sentence: no continuation, no pairs
        let pairs = make_pairs(&[toks(&["a", "b"])], &v, 3, 30).unwrap();
        assert!(pairs.is_empty());

        let sents = vec![toks(&["a", "b"]), toks(&["c", "d", "e", "f"])];
        let pairs = make_pairs(&sents, &v, 3, 30).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source, v.encode(&toks(&["a", "b"])));
        assert_eq!(pairs[0].target, v.encode(&toks(&["c", "d", "e"])));

        // targets cross sentence boundaries
        let sents = vec![toks(&["a", "b"]), toks(&["c"]), toks(&["d", "e", "f"])];
        let pairs = make_pairs(&sents, &v, 3, 30).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].target, v.encode(&toks(&["c", "d", "e"])));
        assert_eq!(pairs[1].source, v.encode(&toks(&["c"])));
        assert_eq!(pairs[1].target, v.encode(&toks(&["d", "e", "f"])));
    }

    #[test]
    fn make_pairs_counts_truncates_and_maps_unk() {
        let v = Vocabulary::build(toks(&["a", "b", "c", "d"]), 10).unwrap();
        let sents = vec![
            toks(&["a", "b", "c", "d"]),
            toks(&["zzz", "b"]),
            toks(&["c", "d", "a"]),
        ];
        let pairs = make_pairs(&sents, &v, 2, 3).unwrap();
        // continuation lengths: 5 and 3 tokens -> sentences 0 and 1 qualify
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].source.len(), 3, "source truncated to max_src_len");
        assert_eq!(pairs[1].source[0], UNK);
        for p in &pairs {
            assert_eq!(p.target.len(), 2);
            assert!(!p.target.contains(&PAD));
        }
    }

    #[test]
    fn batchify_sizes_padding_and_determinism() {
        let v = Vocabulary::build(toks(&["a", "b", "c", "d", "e", "f", "g", "h"]), 10).unwrap();
        let mk = |src: &[&str], tgt: &[&str]| TrainingPair {
            source: v.encode(&toks(src)),
            target: v.encode(&toks(tgt)),
        };
        let pairs = vec![
            mk(&["a", "b"], &["c"]),
            mk(&["c", "d", "e", "f"], &["a"]),
            mk(&["g"], &["b"]),
            mk(&["h", "a"], &["d"]),
            mk(&["b"], &["e"]),
        ];
        let batches = batchify(&pairs, 2, 42).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let again = batchify(&pairs, 2, 42).unwrap();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.source(), b.source());
            assert_eq!(a.targets(), b.targets());
            assert_eq!(a.lengths(), b.lengths());
        }

        // widths track the longest source in each batch
        let wide = Batch::from_pairs(&[&pairs[0], &pairs[1]]).unwrap();
        assert_eq!(wide.width(), 4);
        assert_eq!(wide.lengths(), &[2, 4]);
        assert_eq!(wide.source_id(0, 2), PAD);
        assert_eq!(wide.source_id(0, 3), PAD);
    }

    proptest::proptest! {
        /// Decoding any known id through the vocabulary and re-encoding it
        /// is the identity; unknown tokens land on UNK.
        #[test]
        fn vocab_round_trip(words in proptest::collection::vec("[a-z]{1,5}", 1..30), max in 1usize..12) {
            let v = Vocabulary::build(words.clone(), max).unwrap();
            for tok in v.tokens() {
                let id = v.id(tok).unwrap();
                proptest::prop_assert_eq!(v.token(id), Some(tok.as_str()));
            }
            for ids in v.encode(&words) {
                proptest::prop_assert!(ids < v.len());
            }
        }

        /// One epoch of batches holds exactly the input pairs, whatever the
        /// seed and batch size: shuffling is a permutation, targets keep
        /// exactly N ids and no PAD.
        #[test]
        fn batchify_is_a_permutation(
            seed in proptest::prelude::any::<u64>(),
            n_pairs in 1usize..25,
            batch_size in 1usize..8,
            n in 1usize..4,
        ) {
            let pairs: Vec<TrainingPair> = (0..n_pairs)
                .map(|i| TrainingPair {
                    source: vec![3 + (i % 5); 1 + i % 3],
                    target: (0..n).map(|p| 3 + ((i + p) % 5)).collect(),
                })
                .collect();
            let batches = batchify(&pairs, batch_size, seed).unwrap();
            let mut seen: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
            for b in &batches {
                for i in 0..b.size() {
                    let src: Vec<usize> = (0..b.lengths()[i]).map(|t| b.source_id(i, t)).collect();
                    let tgt: Vec<usize> = (0..b.n()).map(|p| b.target_id(i, p)).collect();
                    proptest::prop_assert_eq!(tgt.len(), n);
                    proptest::prop_assert!(!tgt.contains(&PAD));
                    seen.push((src, tgt));
                }
            }
            let mut want: Vec<(Vec<usize>, Vec<usize>)> = pairs
                .iter()
                .map(|p| (p.source.clone(), p.target.clone()))
                .collect();
            seen.sort();
            want.sort();
            proptest::prop_assert_eq!(seen, want);
        }
    }
}
