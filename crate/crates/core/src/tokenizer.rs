//! Byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values plus three special tokens; no
//! normalization or pre-tokenization is applied, so merges may span
//! whitespace. Training picks the most frequent adjacent pair at each step and
//! breaks ties by the lexicographic order of the pair's byte strings.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rustc_hash::FxHashMap;
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, SentenceId, SentenceRecord};
use crate::error::{Error, Result};
use crate::text::{escape_token, unescape_token};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const NUM_SPECIAL: usize = 3;
/// Names of the special tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<s>"];
/// Smallest vocabulary: specials plus every byte.
pub const BASE_VOCAB_SIZE: usize = NUM_SPECIAL + 256;

pub const DEFAULT_VOCAB_SIZE: usize = 50272;
pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

#[inline]
pub fn byte_token(b: u8) -> TokenId {
    NUM_SPECIAL as TokenId + b as TokenId
}

#[inline]
pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
}

/// A trained byte-level BPE vocabulary. Immutable once built.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    merges: Vec<Merge>,
    /// Byte string of every non-special token, indexed by id.
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    ranks: FxHashMap<(TokenId, TokenId), (u32, TokenId)>,
    requested_size: usize,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.tokens == other.tokens
    }
}

impl BpeVocab {
    fn base(requested_size: usize) -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_TOKENS.iter().map(|_| Vec::new()).collect();
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], tokens.len() as TokenId);
            tokens.push(vec![b]);
        }
        Self {
            merges: Vec::new(),
            tokens,
            token_to_id,
            ranks: FxHashMap::default(),
            requested_size,
        }
    }

    /// Registers a merge, reusing the id if its byte string already exists.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.token_to_id.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as TokenId;
                self.token_to_id.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        let rank = self.merges.len() as u32;
        self.ranks.entry((left, right)).or_insert((rank, result));
        self.merges.push(Merge { left, right, result });
        result
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Size asked for at training time.
    pub fn requested_size(&self) -> usize {
        self.requested_size
    }

    /// True when training ran out of pairs before reaching the requested size.
    pub fn is_short(&self) -> bool {
        self.vocab_size() < self.requested_size
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        if is_special(id) {
            return None;
        }
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    /// Encodes arbitrary bytes; never emits special or unknown tokens.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        if bytes.len() < 2 || self.merges.is_empty() {
            return bytes.iter().map(|&b| byte_token(b)).collect();
        }
        #[derive(Clone, Copy)]
        struct Sym {
            id: TokenId,
            prev: usize,
            next: usize,
            alive: bool,
        }
        const NONE: usize = usize::MAX;
        let n = bytes.len();
        let mut syms: Vec<Sym> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| Sym {
                id: byte_token(b),
                prev: if i == 0 { NONE } else { i - 1 },
                next: if i + 1 == n { NONE } else { i + 1 },
                alive: true,
            })
            .collect();
        // Min-heap on (rank, position).
        let mut heap: BinaryHeap<std::cmp::Reverse<(u32, usize, TokenId)>> = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<_>, syms: &[Sym], pos: usize| {
            let next = syms[pos].next;
            if next == NONE {
                return;
            }
            if let Some(&(rank, result)) = self.ranks.get(&(syms[pos].id, syms[next].id)) {
                heap.push(std::cmp::Reverse((rank, pos, result)));
            }
        };
        for i in 0..n - 1 {
            push(&mut heap, &syms, i);
        }
        while let Some(std::cmp::Reverse((rank, pos, result))) = heap.pop() {
            let s = syms[pos];
            if !s.alive || s.next == NONE {
                continue;
            }
            let next = s.next;
            match self.ranks.get(&(s.id, syms[next].id)) {
                Some(&(r, _)) if r == rank => {}
                _ => continue,
            }
            syms[pos].id = result;
            syms[next].alive = false;
            let after = syms[next].next;
            syms[pos].next = after;
            if after != NONE {
                syms[after].prev = pos;
            }
            if s.prev != NONE {
                push(&mut heap, &syms, s.prev);
            }
            push(&mut heap, &syms, pos);
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i != NONE {
            out.push(syms[i].id);
            i = syms[i].next;
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            let bytes = self.token_bytes(id).ok_or(Error::InvalidToken {
                id,
                position,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|e| Error::Data(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Encodes a sentence and cuts it into segments of at most `max_seq_len`
    /// tokens, recording the total token count on the sentence.
    pub fn chunk_encode(&self, sentence: &mut SentenceRecord, max_seq_len: usize) -> Vec<TokenSequence> {
        let ids = self.encode(&sentence.text);
        sentence.token_count = ids.len();
        chunk_ids(&ids, sentence.id, max_seq_len)
    }

    /// Hex digest identifying this vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.merges {
            h.update(self.tokens[m.left as usize].len().to_le_bytes());
            h.update(&self.tokens[m.left as usize]);
            h.update(self.tokens[m.right as usize].len().to_le_bytes());
            h.update(&self.tokens[m.right as usize]);
        }
        hex::encode(h.finalize())
    }

    /// `merges.txt`: one `left right` line per merge, tokens escaped.
    pub fn write_merges<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.merges {
            writeln!(
                w,
                "{} {}",
                escape_token(&self.tokens[m.left as usize]),
                escape_token(&self.tokens[m.right as usize])
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// `vocab.tsv`: `token_escaped<TAB>id`, specials written as `\<name>`.
    pub fn write_vocab<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, bytes) in self.tokens.iter().enumerate() {
            if id < NUM_SPECIAL {
                writeln!(w, "\\{}\t{id}", SPECIAL_TOKENS[id])?;
            } else {
                writeln!(w, "{}\t{id}", escape_token(bytes))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a vocabulary from `merges.txt` and checks it against `vocab.tsv`.
    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let mut vocab = Self::base(0);
        let file = fs::File::open(merges_path).map_err(|e| Error::io(merges_path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(merges_path, e))?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let bad = || Error::parse(merges_path, i + 1, format!("malformed merge {line:?}"));
            let (l, r) = line.split_once(' ').ok_or_else(bad)?;
            let l = unescape_token(l).and_then(|b| vocab.token_id(&b)).ok_or_else(bad)?;
            let r = unescape_token(r).and_then(|b| vocab.token_id(&b)).ok_or_else(bad)?;
            vocab.push_merge(l, r);
        }
        let file = fs::File::open(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let mut seen = 0usize;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(vocab_path, e))?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(vocab_path, i + 1, msg.to_owned());
            let (tok, id) = line.split_once('\t').ok_or_else(|| bad("expected 2 columns"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            let ok = if id < NUM_SPECIAL {
                tok.strip_prefix('\\') == Some(SPECIAL_TOKENS[id])
            } else {
                unescape_token(tok).is_some_and(|b| vocab.tokens.get(id) == Some(&b))
            };
            if !ok {
                return Err(bad("token does not match the merge list"));
            }
            seen += 1;
        }
        if seen != vocab.vocab_size() {
            return Err(Error::Data(format!(
                "{} lists {seen} tokens, merges define {}",
                vocab_path.display(),
                vocab.vocab_size()
            )));
        }
        vocab.requested_size = vocab.vocab_size();
        Ok(vocab)
    }
}

/// One model input: a full sentence encoding or one overflow segment of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub origin_sentence_id: SentenceId,
    pub segment_index: usize,
}

/// Splits an encoding into consecutive segments of at most `max_seq_len` ids.
pub fn chunk_ids(ids: &[TokenId], origin: SentenceId, max_seq_len: usize) -> Vec<TokenSequence> {
    assert!(max_seq_len >= 1, "max_seq_len must be positive");
    ids.chunks(max_seq_len)
        .enumerate()
        .map(|(segment_index, c)| TokenSequence {
            ids: c.to_vec(),
            origin_sentence_id: origin,
            segment_index,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher count first, then lexicographically smaller pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Trains a vocabulary of (at most) `vocab_size` tokens on the corpus text.
///
/// Fewer tokens are produced when the corpus runs out of adjacent pairs; the
/// result then reports [`BpeVocab::is_short`].
pub fn train_bpe(corpus: &Corpus, vocab_size: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    train_bpe_from_texts(corpus.sentences().iter().map(|s| s.text.as_str()), vocab_size)
}

pub fn train_bpe_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<BpeVocab> {
    if vocab_size < BASE_VOCAB_SIZE {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} is below the base alphabet size {BASE_VOCAB_SIZE}"
        )));
    }
    let mut vocab = BpeVocab::base(vocab_size);

    let mut uniq: HashMap<&str, i64> = HashMap::new();
    for t in texts {
        *uniq.entry(t).or_default() += 1;
    }
    let mut uniq: Vec<(&str, i64)> = uniq.into_iter().collect();
    uniq.sort_unstable();
    let weights: Vec<i64> = uniq.iter().map(|&(_, w)| w).collect();
    let mut words: Vec<Vec<TokenId>> = uniq.iter().map(|(t, _)| t.bytes().map(byte_token).collect()).collect();

    let mut counts: FxHashMap<(TokenId, TokenId), i64> = FxHashMap::default();
    let mut locations: FxHashMap<(TokenId, TokenId), Vec<u32>> = FxHashMap::default();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += weights[wi];
            let loc = locations.entry(pair).or_default();
            if loc.last() != Some(&(wi as u32)) {
                loc.push(wi as u32);
            }
        }
    }

    let candidate = |vocab: &BpeVocab, pair: (TokenId, TokenId), count: i64| Candidate {
        count,
        left: vocab.tokens[pair.0 as usize].clone(),
        right: vocab.tokens[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts.iter().map(|(&pair, &c)| candidate(&vocab, pair, c)).collect();

    let mut delta: FxHashMap<(TokenId, TokenId), i64> = FxHashMap::default();
    while vocab.vocab_size() < vocab_size {
        let Some(top) = heap.pop() else { break };
        if counts.get(&top.pair).copied().unwrap_or(0) != top.count || top.count <= 0 {
            continue;
        }
        let (a, b) = top.pair;
        let new_id = vocab.push_merge(a, b);

        let mut lines = locations.remove(&top.pair).unwrap_or_default();
        lines.dedup();
        delta.clear();
        for &wi in &lines {
            let w = &mut words[wi as usize];
            if !w.windows(2).any(|p| p[0] == a && p[1] == b) {
                continue;
            }
            let weight = weights[wi as usize];
            for p in w.windows(2) {
                *delta.entry((p[0], p[1])).or_default() -= weight;
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            *w = merged;
            for p in w.windows(2) {
                let pair = (p[0], p[1]);
                *delta.entry(pair).or_default() += weight;
                if p[0] == new_id || p[1] == new_id {
                    let loc = locations.entry(pair).or_default();
                    if loc.last() != Some(&wi) {
                        loc.push(wi);
                    }
                }
            }
        }
        let mut changed: Vec<_> = delta.iter().filter(|(_, &d)| d != 0).map(|(&p, &d)| (p, d)).collect();
        changed.sort_unstable();
        for (pair, d) in changed {
            let c = counts.entry(pair).or_default();
            *c += d;
            let c = *c;
            if c <= 0 {
                counts.remove(&pair);
            } else {
                heap.push(candidate(&vocab, pair, c));
            }
        }
    }
    if vocab.is_short() {
        warn!(
            "BPE training stopped at {} tokens (requested {vocab_size}): no pairs left",
            vocab.vocab_size()
        );
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force count of adjacent pairs, weighted by occurrence.
    fn pair_counts(texts: &[&str]) -> Vec<((u8, u8), usize)> {
        let mut m: std::collections::BTreeMap<(u8, u8), usize> = Default::default();
        for t in texts {
            for w in t.as_bytes().windows(2) {
                *m.entry((w[0], w[1])).or_default() += 1;
            }
        }
        m.into_iter().collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let texts = ["aaab aaab"];
        let counts = pair_counts(&texts);
        let best = counts.iter().max_by_key(|(p, c)| (*c, std::cmp::Reverse(*p))).unwrap();
        assert_eq!(best.0, (b'a', b'a'));
        let v = train_bpe_from_texts(texts, BASE_VOCAB_SIZE + 1).unwrap();
        assert_eq!(v.merges().len(), 1);
        let m = v.merges()[0];
        assert_eq!((m.left, m.right), (byte_token(b'a'), byte_token(b'a')));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice.
        let v = train_bpe_from_texts(["cdab", "abcd"], BASE_VOCAB_SIZE + 1).unwrap();
        assert_eq!(v.token_bytes(v.merges()[0].result), Some(&b"ab"[..]));
    }

    #[test]
    fn base_size_means_no_merges() {
        let v = train_bpe_from_texts(["hello world"], BASE_VOCAB_SIZE).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.vocab_size(), BASE_VOCAB_SIZE);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(train_bpe_from_texts(["x"], BASE_VOCAB_SIZE - 1).is_err());
    }

    #[test]
    fn short_corpus_flags_unreachable_size() {
        let v = train_bpe_from_texts(["abc"], 1000).unwrap();
        assert!(v.is_short());
        assert_eq!(v.vocab_size(), BASE_VOCAB_SIZE + 2);
    }

    #[test]
    fn encode_after_single_merge() {
        let v = train_bpe_from_texts(["aaab aaab"], BASE_VOCAB_SIZE + 1).unwrap();
        let ids = v.encode("aaab");
        let toks: Vec<&[u8]> = ids.iter().map(|&i| v.token_bytes(i).unwrap()).collect();
        assert_eq!(toks, vec![&b"aa"[..], b"a", b"b"]);
    }

    #[test]
    fn empty_round_trip() {
        let v = train_bpe_from_texts(["abc abc"], 300).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_bad_ids() {
        let v = train_bpe_from_texts(["abc abc"], 300).unwrap();
        let size = v.vocab_size() as TokenId;
        match v.decode(&[byte_token(b'a'), size]) {
            Err(Error::InvalidToken { position, .. }) => assert_eq!(position, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            v.decode(&[BOS_ID]),
            Err(Error::InvalidToken { position: 0, .. })
        ));
    }

    #[test]
    fn retraining_is_identical() {
        let texts = ["the cat sat on the mat", "the dog sat", "a cat and a dog"];
        let a = train_bpe_from_texts(texts, 320).unwrap();
        let b = train_bpe_from_texts(texts, 320).unwrap();
        assert_eq!(a, b);
        let mut ma = Vec::new();
        let mut mb = Vec::new();
        a.write_merges(&mut ma).unwrap();
        b.write_merges(&mut mb).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn chunking_splits_overflow() {
        let ids: Vec<TokenId> = (0..130).map(|i| 10 + i).collect();
        let segs = chunk_ids(&ids, 7, 128);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].ids.len(), 128);
        assert_eq!(segs[1].ids.len(), 2);
        assert_eq!(segs[1].segment_index, 1);
        assert_eq!(segs[1].origin_sentence_id, 7);
        let short = chunk_ids(&ids[..5], 0, 128);
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].segment_index, 0);
    }

    #[test]
    fn chunk_encode_records_token_count() {
        let v = train_bpe_from_texts(["hello hello"], 270).unwrap();
        let mut s = SentenceRecord {
            id: 3,
            text: "hello there".into(),
            source: "x".into(),
            token_count: 0,
        };
        let segs = v.chunk_encode(&mut s, 2);
        let total: usize = segs.iter().map(|s| s.ids.len()).sum();
        assert_eq!(total, s.token_count);
        assert_eq!(total, v.encode("hello there").len());
    }

    #[test]
    fn persisted_vocab_reloads() {
        let v = train_bpe_from_texts(["a b\tc #d \\e é", "a b c"], 290).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("merges.txt");
        let vp = dir.path().join("vocab.tsv");
        v.write_merges(fs::File::create(&mp).unwrap()).unwrap();
        v.write_vocab(fs::File::create(&vp).unwrap()).unwrap();
        let back = BpeVocab::load(&mp, &vp).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    proptest! {
        #[test]
        fn round_trip_identity(text in "\\PC{0,60}", train in proptest::collection::vec("[a-e ]{1,12}", 1..8)) {
            let v = train_bpe_from_texts(train.iter().map(String::as_str), 300).unwrap();
            let ids = v.encode(&text);
            prop_assert!(ids.iter().all(|&i| !is_special(i) && (i as usize) < v.vocab_size()));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }

        #[test]
        fn encoding_matches_sequential_merge_replay(text in "[a-e ]{0,40}", train in proptest::collection::vec("[a-e ]{1,12}", 1..8)) {
            let v = train_bpe_from_texts(train.iter().map(String::as_str), 300).unwrap();
            // Replay merges in order over the byte sequence.
            let mut seq: Vec<TokenId> = text.bytes().map(byte_token).collect();
            for m in v.merges() {
                let mut out = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
                        out.push(m.result);
                        i += 2;
                    } else {
                        out.push(seq[i]);
                        i += 1;
                    }
                }
                seq = out;
            }
            prop_assert_eq!(v.encode(&text), seq);
        }
    }
}
