//! Teacher language models used to measure sentence difficulty.
//!
//! The built-in teacher is an interpolated Kneser–Ney n-gram model over BPE
//! token ids. The highest order uses raw counts; every lower order uses
//! continuation counts (the number of distinct left extensions), and the
//! recursion bottoms out in a uniform distribution over the non-special
//! tokens. Sequences are left-padded with `order - 1` begin-of-sequence ids so
//! every token has a full-length context.
//!
//! Surprisal is reported in bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use rustc_hash::FxHashMap;

use crate::corpus::SentenceId;
use crate::error::{Error, Result};
use crate::tokenizer::{is_special, TokenId, TokenSequence, BOS_ID, NUM_SPECIAL};

pub const DEFAULT_ORDER: usize = 4;

const MAGIC: &[u8; 8] = b"NGRAMKN\0";
const FORMAT_VERSION: u32 = 1;

/// Anything that can assign per-token surprisal to a token sequence.
pub trait SurprisalModel: Sync {
    /// Surprisal in bits of every token of `ids`, each conditioned on the
    /// tokens before it in the same sequence.
    fn surprisals(&self, ids: &[TokenId]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiscountConfig {
    /// Per-order `n1 / (n1 + 2 n2)` from the count-of-counts.
    Estimated,
    /// One discount per order, lowest order first. Zero disables smoothing.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub order: usize,
    pub discounts: DiscountConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            discounts: DiscountConfig::Estimated,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ContextStat {
    total: u64,
    types: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Level {
    /// Raw counts at the top order, continuation counts below it.
    counts: FxHashMap<Box<[TokenId]>, u32>,
    contexts: FxHashMap<Box<[TokenId]>, ContextStat>,
}

impl Level {
    fn rebuild_contexts(&mut self) {
        self.contexts.clear();
        for (g, &c) in &self.counts {
            let st = self.contexts.entry(g[..g.len() - 1].into()).or_default();
            st.total += c as u64;
            st.types += 1;
        }
    }

    fn estimate_discount(&self) -> f64 {
        let n1 = self.counts.values().filter(|&&c| c == 1).count() as f64;
        let n2 = self.counts.values().filter(|&&c| c == 2).count() as f64;
        if n1 + 2.0 * n2 == 0.0 {
            return 0.5;
        }
        (n1 / (n1 + 2.0 * n2)).clamp(0.05, 0.95)
    }
}

/// Interpolated Kneser–Ney n-gram model.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramTeacher {
    order: usize,
    vocab_size: usize,
    discounts: Vec<f64>,
    levels: Vec<Level>,
    vocab_ref: String,
    metaset_id: Option<usize>,
}

impl NGramTeacher {
    /// Counts n-grams over `sequences` and fixes the discounts.
    ///
    /// `vocab_size` includes the special tokens; probabilities are spread over
    /// the `vocab_size - NUM_SPECIAL` ordinary tokens.
    pub fn train(sequences: &[TokenSequence], vocab_size: usize, config: &TeacherConfig) -> Result<Self> {
        Self::train_ids(sequences.iter().map(|s| s.ids.as_slice()), vocab_size, config)
    }

    pub fn train_ids<'a>(
        sequences: impl IntoIterator<Item = &'a [TokenId]>,
        vocab_size: usize,
        config: &TeacherConfig,
    ) -> Result<Self> {
        let order = config.order;
        if order < 1 {
            return Err(Error::Config(format!("n-gram order must be at least 1, got {order}")));
        }
        if vocab_size <= NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} leaves no ordinary tokens"
            )));
        }
        if let DiscountConfig::Fixed(d) = &config.discounts {
            if d.len() != order {
                return Err(Error::Config(format!("expected {order} discounts, got {}", d.len())));
            }
            if let Some(bad) = d.iter().find(|&&x| !(0.0..1.0).contains(&x)) {
                return Err(Error::Config(format!("discount {bad} outside [0, 1)")));
            }
        }

        let mut levels = vec![Level::default(); order];
        let mut padded = Vec::new();
        let mut seen_any = false;
        for ids in sequences {
            if ids.is_empty() {
                continue;
            }
            seen_any = true;
            padded.clear();
            padded.resize(order - 1, BOS_ID);
            padded.extend_from_slice(ids);
            let top = &mut levels[order - 1].counts;
            for g in padded.windows(order) {
                if let Some(c) = top.get_mut(g) {
                    *c += 1;
                } else {
                    top.insert(g.into(), 1);
                }
            }
        }
        if !seen_any {
            return Err(Error::Data("cannot train a teacher on an empty training set".into()));
        }
        // Continuation counts: each distinct (k+1)-gram adds one to its k-suffix.
        for k in (1..order).rev() {
            let (lower, upper) = levels.split_at_mut(k);
            let lower = &mut lower[k - 1].counts;
            for g in upper[0].counts.keys() {
                *lower.entry(g[1..].into()).or_default() += 1;
            }
        }
        for level in &mut levels {
            level.rebuild_contexts();
        }
        let discounts = match &config.discounts {
            DiscountConfig::Fixed(d) => d.clone(),
            DiscountConfig::Estimated => levels.iter().map(Level::estimate_discount).collect(),
        };
        Ok(Self {
            order,
            vocab_size,
            discounts,
            levels,
            vocab_ref: String::new(),
            metaset_id: None,
        })
    }

    pub fn with_vocab_ref(mut self, vocab_ref: impl Into<String>) -> Self {
        self.vocab_ref = vocab_ref.into();
        self
    }

    pub fn with_metaset(mut self, metaset: usize) -> Self {
        self.metaset_id = Some(metaset);
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    pub fn vocab_ref(&self) -> &str {
        &self.vocab_ref
    }

    pub fn metaset_id(&self) -> Option<usize> {
        self.metaset_id
    }

    /// Raw (top order) or continuation (lower orders) count of an n-gram.
    pub fn count(&self, ngram: &[TokenId]) -> u32 {
        if ngram.is_empty() || ngram.len() > self.order {
            return 0;
        }
        self.levels[ngram.len() - 1].counts.get(ngram).copied().unwrap_or(0)
    }

    fn support(&self) -> usize {
        self.vocab_size - NUM_SPECIAL
    }

    /// Probability of the last id of `window` given the ones before it.
    /// `window` must hold exactly `order` ids (context already padded).
    fn prob_window(&self, window: &[TokenId]) -> f64 {
        debug_assert_eq!(window.len(), self.order);
        let w = window[self.order - 1];
        if is_special(w) || w as usize >= self.vocab_size {
            return 0.0;
        }
        let mut p = 1.0 / self.support() as f64;
        for k in 1..=self.order {
            let ngram = &window[self.order - k..];
            let level = &self.levels[k - 1];
            let Some(st) = level.contexts.get(&ngram[..k - 1]) else {
                continue;
            };
            let d = self.discounts[k - 1];
            let c = level.counts.get(ngram).copied().unwrap_or(0) as f64;
            p = ((c - d).max(0.0) + d * st.types as f64 * p) / st.total as f64;
        }
        p
    }

    /// `P(token | context)`, using at most the last `order - 1` context ids
    /// and begin-padding shorter contexts.
    pub fn probability(&self, context: &[TokenId], token: TokenId) -> f64 {
        let keep = self.order - 1;
        let mut window = Vec::with_capacity(self.order);
        let tail = &context[context.len().saturating_sub(keep)..];
        window.resize(keep - tail.len(), BOS_ID);
        window.extend_from_slice(tail);
        window.push(token);
        self.prob_window(&window)
    }

    /// `-log2 P(token | context)`.
    pub fn token_surprisal(&self, context: &[TokenId], token: TokenId) -> f64 {
        -self.probability(context, token).log2()
    }

    /// Mean surprisal of the sentence's tokens in bits per token.
    pub fn sentence_difficulty(&self, ids: &[TokenId]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let s = self.surprisals(ids);
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Writes the binary count file and its text sidecar.
    pub fn save(&self, bin_path: &Path, meta_path: &Path) -> Result<()> {
        let file = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        self.write_counts(BufWriter::new(file))?;
        let mut meta = fs::File::create(meta_path).map_err(|e| Error::io(meta_path, e))?;
        meta.write_all(self.sidecar().as_bytes())?;
        Ok(())
    }

    pub fn sidecar(&self) -> String {
        let discounts: Vec<String> = self.discounts.iter().map(|d| format!("{d:?}")).collect();
        let metaset = self.metaset_id.map_or_else(|| "external".to_owned(), |m| m.to_string());
        format!(
            "format=ngram-kn\nversion={FORMAT_VERSION}\norder={}\nvocab_size={}\ndiscounts={}\nvocab_hash={}\nmetaset={metaset}\n",
            self.order,
            self.vocab_size,
            discounts.join(","),
            self.vocab_ref
        )
    }

    pub fn write_counts<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.order as u32)?;
        w.write_u32::<LittleEndian>(self.vocab_size as u32)?;
        for &d in &self.discounts {
            w.write_f64::<LittleEndian>(d)?;
        }
        for level in &self.levels {
            let mut entries: Vec<(&Box<[TokenId]>, &u32)> = level.counts.iter().collect();
            entries.sort_unstable();
            w.write_u64::<LittleEndian>(entries.len() as u64)?;
            for (g, &c) in entries {
                for &t in g.iter() {
                    w.write_u32::<LittleEndian>(t)?;
                }
                w.write_u32::<LittleEndian>(c)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(bin_path: &Path, meta_path: &Path) -> Result<Self> {
        let file = fs::File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut teacher = Self::read_counts(std::io::BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: {e}", bin_path.display())))?;
        let meta = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
        for (i, line) in meta.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let mismatch = || Error::parse(meta_path, i + 1, format!("{k} does not match count file"));
            match k {
                "order" if v.parse::<usize>().ok() != Some(teacher.order) => return Err(mismatch()),
                "vocab_size" if v.parse::<usize>().ok() != Some(teacher.vocab_size) => return Err(mismatch()),
                "discounts" => {
                    let d: Vec<f64> = v.split(',').filter_map(|x| x.parse().ok()).collect();
                    if d != teacher.discounts {
                        return Err(mismatch());
                    }
                }
                "vocab_hash" => teacher.vocab_ref = v.to_owned(),
                "metaset" => teacher.metaset_id = v.parse().ok(),
                _ => {}
            }
        }
        Ok(teacher)
    }

    pub fn read_counts<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not an n-gram count file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported count file version {version}")));
        }
        let order = r.read_u32::<LittleEndian>()? as usize;
        let vocab_size = r.read_u32::<LittleEndian>()? as usize;
        if order == 0 || order > 64 {
            return Err(Error::Data(format!("implausible order {order}")));
        }
        let discounts = (0..order)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut levels = Vec::with_capacity(order);
        for k in 1..=order {
            let n = r.read_u64::<LittleEndian>()?;
            let mut level = Level::default();
            let mut g = vec![0 as TokenId; k];
            for _ in 0..n {
                for t in g.iter_mut() {
                    *t = r.read_u32::<LittleEndian>()?;
                }
                let c = r.read_u32::<LittleEndian>()?;
                level.counts.insert(g.as_slice().into(), c);
            }
            level.rebuild_contexts();
            levels.push(level);
        }
        Ok(Self {
            order,
            vocab_size,
            discounts,
            levels,
            vocab_ref: String::new(),
            metaset_id: None,
        })
    }
}

impl SurprisalModel for NGramTeacher {
    fn surprisals(&self, ids: &[TokenId]) -> Vec<f64> {
        let mut padded = Vec::with_capacity(ids.len() + self.order - 1);
        padded.resize(self.order - 1, BOS_ID);
        padded.extend_from_slice(ids);
        padded
            .windows(self.order)
            .map(|w| -self.prob_window(w).log2())
            .collect()
    }
}

/// Mean-surprisal scores computed outside this toolkit for one teacher.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalScoreTable {
    pub label: String,
    pub scores: BTreeMap<SentenceId, f64>,
}

impl ExternalScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: SentenceId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    /// Ids in `0..n` without a score.
    pub fn missing_ids(&self, n: usize) -> Vec<SentenceId> {
        (0..n as SentenceId)
            .filter(|id| !self.scores.contains_key(id))
            .collect()
    }
}

/// Reads `sentence_id<TAB>score` rows; the header's second column names the teacher.
pub fn load_external_scores(path: &Path) -> Result<ExternalScoreTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing header")),
    };
    let label = match header.split_once('\t') {
        Some(("sentence_id", label)) if !label.trim().is_empty() => label.trim().to_owned(),
        _ => return Err(Error::parse(path, 1, "header must be `sentence_id<TAB><teacher>`")),
    };
    let mut table = ExternalScoreTable {
        label,
        scores: BTreeMap::new(),
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected 2 columns"))?;
        let id: SentenceId = id
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad sentence id {id:?}")))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("non-numeric score {score:?}")))?;
        if !score.is_finite() || score < 0.0 {
            return Err(Error::parse(
                path,
                line_no,
                format!("score {score} must be finite and non-negative"),
            ));
        }
        if table.scores.insert(id, score).is_some() {
            return Err(Error::parse(path, line_no, format!("duplicate sentence id {id}")));
        }
    }
    if table.is_empty() {
        warn!("{}: no scores after the header", path.display());
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BASE_VOCAB_SIZE;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const A: TokenId = 10;
    const B: TokenId = 11;
    const C: TokenId = 12;

    fn fixed(order: usize, d: f64) -> TeacherConfig {
        TeacherConfig {
            order,
            discounts: DiscountConfig::Fixed(vec![d; order]),
        }
    }

    #[test]
    fn unsmoothed_unigram_is_relative_frequency() {
        let seqs: Vec<Vec<TokenId>> = vec![vec![A, B, A, C]];
        let t = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 20, &fixed(1, 0.0)).unwrap();
        assert_abs_diff_eq!(t.probability(&[], A), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t.token_surprisal(&[B], A), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.token_surprisal(&[], B), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bigram_alternation_is_nearly_deterministic() {
        // Hand count: after `a` the only continuation ever seen is `b` (3 of 3).
        let seq = vec![A, B, A, B, A, B];
        let t = NGramTeacher::train_ids([seq.as_slice()], BASE_VOCAB_SIZE, &fixed(2, 0.1)).unwrap();
        assert!(
            (t.probability(&[A], B) - 1.0).abs() < 0.05,
            "{}",
            t.probability(&[A], B)
        );
    }

    #[test]
    fn empty_training_set_and_bad_order_fail() {
        let empty: Vec<&[TokenId]> = vec![];
        assert!(NGramTeacher::train_ids(empty, 20, &TeacherConfig::default()).is_err());
        let seq = [A];
        assert!(NGramTeacher::train_ids([&seq[..]], 20, &fixed(0, 0.1)).is_err());
        assert!(matches!(
            NGramTeacher::train_ids([&seq[..]], 20, &fixed(0, 0.1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let seqs: Vec<Vec<TokenId>> = (0..50).map(|i| vec![A + (i % 3), B, C + (i % 2), A]).collect();
        let a = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 30, &TeacherConfig::default()).unwrap();
        let b = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 30, &TeacherConfig::default()).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_counts(&mut x).unwrap();
        b.write_counts(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn uniform_unigram_gives_eight_bits() {
        // Every ordinary token once; V - specials = 256.
        let seq: Vec<TokenId> = (NUM_SPECIAL as TokenId..BASE_VOCAB_SIZE as TokenId).collect();
        let t = NGramTeacher::train_ids([seq.as_slice()], BASE_VOCAB_SIZE, &fixed(1, 0.0)).unwrap();
        assert_abs_diff_eq!(t.token_surprisal(&[], 100), 8.0, epsilon = 1e-12);
        let sentence: Vec<TokenId> = (20..30).collect();
        assert_abs_diff_eq!(t.sentence_difficulty(&sentence).unwrap(), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_continuation_is_zero_bits() {
        let seq = vec![A, B, C];
        let t = NGramTeacher::train_ids([seq.as_slice()], 20, &fixed(3, 0.0)).unwrap();
        assert_eq!(t.token_surprisal(&[A], B), 0.0);
        assert_eq!(t.sentence_difficulty(&seq).unwrap(), 0.0);
    }

    #[test]
    fn quarter_probability_is_two_bits() {
        // Unsmoothed bigram: after `a`, b once and c three times.
        let seqs: Vec<Vec<TokenId>> = vec![vec![A, B], vec![A, C], vec![A, C], vec![A, C]];
        let t = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 20, &fixed(2, 0.0)).unwrap();
        assert_abs_diff_eq!(t.token_surprisal(&[A], B), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_sentence_errors() {
        let t = NGramTeacher::train_ids([&[A][..]], 20, &fixed(1, 0.5)).unwrap();
        assert!(matches!(t.sentence_difficulty(&[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn count_file_round_trip() {
        let seqs: Vec<Vec<TokenId>> = vec![vec![A, B, C, A], vec![C, C]];
        let t = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 40, &TeacherConfig::default())
            .unwrap()
            .with_vocab_ref("abc123")
            .with_metaset(3);
        let dir = tempfile::tempdir().unwrap();
        let (bin, meta) = (dir.path().join("t.bin"), dir.path().join("t.meta"));
        t.save(&bin, &meta).unwrap();
        assert_eq!(NGramTeacher::load(&bin, &meta).unwrap(), t);
    }

    #[test]
    fn external_scores_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        fs::write(&p, "sentence_id\tlstm-0\n0\t5.5\n1\t3.25\n").unwrap();
        let t = load_external_scores(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.label, "lstm-0");
        assert_eq!(t.missing_ids(3), vec![2]);

        fs::write(&p, "sentence_id\tlstm-0\n").unwrap();
        assert!(load_external_scores(&p).unwrap().is_empty());

        fs::write(&p, "sentence_id\tlstm-0\n0\t1.0\n7\t-1.0\n").unwrap();
        match load_external_scores(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "sentence_id\tlstm-0\n0\tabc\n").unwrap();
        assert!(matches!(load_external_scores(&p), Err(Error::Parse { line: 2, .. })));
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
        proptest::collection::vec(proptest::collection::vec(3u32..9, 1..8), 1..6)
    }

    proptest! {
        #[test]
        fn distributions_normalize(seqs in corpus_strategy(), ctx in proptest::collection::vec(2u32..10, 0..4)) {
            let t = NGramTeacher::train_ids(seqs.iter().map(Vec::as_slice), 12, &TeacherConfig::default()).unwrap();
            let total: f64 = (NUM_SPECIAL as TokenId..12).map(|w| t.probability(&ctx, w)).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
        }

        #[test]
        fn seen_ngrams_keep_their_discounted_mass(
            seqs in corpus_strategy(),
            ngram in proptest::collection::vec(3u32..9, 3),
            extra in 1usize..4,
        ) {
            let cfg = fixed(3, 0.6);
            let mut more = seqs.clone();
            for _ in 0..extra {
                more.push(ngram.clone());
            }
            let t = NGramTeacher::train_ids(more.iter().map(Vec::as_slice), 12, &cfg).unwrap();
            let (ctx, w) = (&ngram[..2], ngram[2]);
            let total: u32 = (0..12).map(|v| t.count(&[ctx[0], ctx[1], v])).sum();
            let floor = (t.count(&ngram) as f64 - 0.6) / total as f64;
            prop_assert!(t.probability(ctx, w) >= floor - 1e-12);
        }
    }
}
