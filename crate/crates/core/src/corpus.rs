//! Multi-source corpus ingestion, per-source summaries and balanced metaset splits.
//!
//! A sentence is one physical line of an input file. Lines that contain only
//! whitespace are dropped at ingestion; everything else is kept verbatim.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::text::{escape_field, unescape_field};

pub type SentenceId = u32;

/// Default relative tolerance for metaset balance.
pub const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub id: SentenceId,
    pub text: String,
    pub source: String,
    /// Zero until the corpus has been tokenized.
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub sentences: usize,
    pub tokens: usize,
}

/// Immutable sentence inventory with per-source totals.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sentences: Vec<SentenceRecord>,
    source_summary: BTreeMap<String, SourceStats>,
}

impl Corpus {
    /// Builds a corpus from records, checking id contiguity and non-blank text.
    pub fn from_records(sentences: Vec<SentenceRecord>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.id as usize != i {
                return Err(Error::Data(format!(
                    "sentence ids must be contiguous from 0: found {} at position {}",
                    s.id, i
                )));
            }
            if s.text.trim().is_empty() {
                return Err(Error::Data(format!("sentence {} is blank", s.id)));
            }
            if s.source.is_empty() {
                return Err(Error::Data(format!("sentence {} has an empty source tag", s.id)));
            }
        }
        let source_summary = summarize_sources(&sentences);
        Ok(Self {
            sentences,
            source_summary,
        })
    }

    pub fn sentences(&self) -> &[SentenceRecord] {
        &self.sentences
    }

    pub fn get(&self, id: SentenceId) -> Option<&SentenceRecord> {
        self.sentences.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn source_summary(&self) -> &BTreeMap<String, SourceStats> {
        &self.source_summary
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.source_summary.keys().map(String::as_str)
    }

    pub fn total_tokens(&self) -> usize {
        self.source_summary.values().map(|s| s.tokens).sum()
    }

    /// Replaces every sentence's token count, indexed by sentence id.
    pub fn set_token_counts(&mut self, counts: &[usize]) -> Result<()> {
        if counts.len() != self.sentences.len() {
            return Err(Error::Data(format!(
                "expected {} token counts, got {}",
                self.sentences.len(),
                counts.len()
            )));
        }
        for (s, &c) in self.sentences.iter_mut().zip(counts) {
            s.token_count = c;
        }
        self.source_summary = summarize_sources(&self.sentences);
        Ok(())
    }

    /// Writes `id<TAB>source<TAB>text` rows with tabs and backslashes escaped.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id\tsource\ttext")?;
        for s in &self.sentences {
            writeln!(w, "{}\t{}\t{}", s.id, escape_field(&s.source), escape_field(&s.text))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut saw_header = false;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.starts_with('#') {
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(source), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, i + 1, "expected 3 columns"));
            };
            let id = id
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad sentence id {id:?}")))?;
            records.push(SentenceRecord {
                id,
                text: unescape_field(text),
                source: unescape_field(source),
                token_count: 0,
            });
        }
        Self::from_records(records)
    }
}

fn summarize_sources(sentences: &[SentenceRecord]) -> BTreeMap<String, SourceStats> {
    let mut map: BTreeMap<String, SourceStats> = BTreeMap::new();
    for s in sentences {
        let e = map.entry(s.source.clone()).or_default();
        e.sentences += 1;
        e.tokens += s.token_count;
    }
    map
}

/// Line accounting for one ingested file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileReport {
    pub path: PathBuf,
    pub source: String,
    pub total_lines: usize,
    pub retained: usize,
    pub excluded_blank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub files: Vec<FileReport>,
}

impl IngestReport {
    /// Files that contributed no sentences.
    pub fn empty_files(&self) -> impl Iterator<Item = &FileReport> {
        self.files.iter().filter(|f| f.retained == 0)
    }
}

/// Reads every `(path, source tag)` entry and builds a corpus in manifest order.
///
/// Files are read in parallel; ids are assigned sequentially afterwards so the
/// result does not depend on scheduling.
pub fn ingest(manifest: &[(PathBuf, String)]) -> Result<(Corpus, IngestReport)> {
    for (path, tag) in manifest {
        if tag.trim().is_empty() {
            return Err(Error::Config(format!("empty source tag for {}", path.display())));
        }
    }
    let contents: Vec<Result<String>> = manifest
        .par_iter()
        .map(|(path, _)| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            String::from_utf8(bytes).map_err(|e| {
                Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::InvalidData, e.utf8_error()),
                )
            })
        })
        .collect();

    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for ((path, tag), text) in manifest.iter().zip(contents) {
        let text = text?;
        let mut file = FileReport {
            path: path.clone(),
            source: tag.clone(),
            total_lines: 0,
            retained: 0,
            excluded_blank: 0,
        };
        for line in text.lines() {
            file.total_lines += 1;
            if line.trim().is_empty() {
                file.excluded_blank += 1;
                continue;
            }
            file.retained += 1;
            records.push(SentenceRecord {
                id: records.len() as SentenceId,
                text: line.to_owned(),
                source: tag.clone(),
                token_count: 0,
            });
        }
        if file.retained == 0 {
            warn!("{} ({}) contributed no sentences", path.display(), tag);
        }
        report.files.push(file);
    }
    Ok((Corpus::from_records(records)?, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub source: String,
    pub tokens: usize,
    /// Absent when the corpus has not been tokenized.
    pub token_prop: Option<f64>,
    pub sentences: usize,
    pub sent_prop: f64,
}

/// Per-source shares of tokens and sentences; the last row is the total.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total: SummaryRow,
}

impl Summary {
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "source\ttokens\ttoken_prop\tsentences\tsent_prop")?;
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let tp = r.token_prop.map_or_else(|| "NA".to_owned(), |p| format!("{p:.6}"));
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{:.6}",
                r.source, r.tokens, tp, r.sentences, r.sent_prop
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn summarize(corpus: &Corpus) -> Result<Summary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.len() as f64;
    let tokens = corpus.total_tokens();
    let rows = corpus
        .source_summary()
        .iter()
        .map(|(source, st)| SummaryRow {
            source: source.clone(),
            tokens: st.tokens,
            token_prop: (tokens > 0).then(|| st.tokens as f64 / tokens as f64),
            sentences: st.sentences,
            sent_prop: st.sentences as f64 / n,
        })
        .collect();
    Ok(Summary {
        rows,
        total: SummaryRow {
            source: "total".to_owned(),
            tokens,
            token_prop: (tokens > 0).then_some(1.0),
            sentences: corpus.len(),
            sent_prop: 1.0,
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetasetStats {
    pub sentences: usize,
    pub tokens: usize,
}

/// Partition of a corpus into `num_metasets` roughly equal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetasetAssignment {
    num_metasets: usize,
    /// Metaset index of each sentence, indexed by sentence id.
    assignment: Vec<usize>,
    per_metaset: Vec<MetasetStats>,
}

impl MetasetAssignment {
    /// Rebuilds an assignment from a dense id → metaset vector.
    pub fn from_assignment(num_metasets: usize, assignment: Vec<usize>, corpus: &Corpus) -> Result<Self> {
        if assignment.len() != corpus.len() {
            return Err(Error::Data(format!(
                "assignment covers {} sentences, corpus has {}",
                assignment.len(),
                corpus.len()
            )));
        }
        let mut per_metaset = vec![MetasetStats::default(); num_metasets];
        for (s, &k) in corpus.sentences().iter().zip(&assignment) {
            let Some(st) = per_metaset.get_mut(k) else {
                return Err(Error::Data(format!(
                    "sentence {} assigned to metaset {k} of {num_metasets}",
                    s.id
                )));
            };
            st.sentences += 1;
            st.tokens += s.token_count;
        }
        Ok(Self {
            num_metasets,
            assignment,
            per_metaset,
        })
    }

    pub fn num_metasets(&self) -> usize {
        self.num_metasets
    }

    pub fn metaset_of(&self, id: SentenceId) -> usize {
        self.assignment[id as usize]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn per_metaset(&self) -> &[MetasetStats] {
        &self.per_metaset
    }

    pub fn members(&self, metaset: usize) -> impl Iterator<Item = SentenceId> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &k)| k == metaset)
            .map(|(i, _)| i as SentenceId)
    }

    /// Largest relative deviation of sentence and token counts from the even split.
    pub fn max_deviation(&self) -> (f64, f64) {
        let m = self.num_metasets as f64;
        let n: usize = self.per_metaset.iter().map(|s| s.sentences).sum();
        let t: usize = self.per_metaset.iter().map(|s| s.tokens).sum();
        let dev = |x: usize, total: usize| {
            if total == 0 {
                0.0
            } else {
                let even = total as f64 / m;
                (x as f64 - even).abs() / even
            }
        };
        let sd = self.per_metaset.iter().map(|s| dev(s.sentences, n)).fold(0.0, f64::max);
        let td = self.per_metaset.iter().map(|s| dev(s.tokens, t)).fold(0.0, f64::max);
        (sd, td)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sentence_id\tmetaset")?;
        for (i, k) in self.assignment.iter().enumerate() {
            writeln!(w, "{i}\t{k}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path, num_metasets: usize, corpus: &Corpus) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut assignment = vec![usize::MAX; corpus.len()];
        let mut saw_header = false;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.starts_with('#') {
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let (id, k) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected 2 columns"))?;
            let id: usize = id.parse().map_err(|_| Error::parse(path, i + 1, "bad sentence id"))?;
            let k: usize = k.parse().map_err(|_| Error::parse(path, i + 1, "bad metaset"))?;
            if id >= corpus.len() {
                return Err(Error::parse(path, i + 1, format!("sentence id {id} out of range")));
            }
            assignment[id] = k;
        }
        if let Some(missing) = assignment.iter().position(|&k| k == usize::MAX) {
            return Err(Error::Data(format!(
                "{}: sentence {missing} not assigned",
                path.display()
            )));
        }
        Self::from_assignment(num_metasets, assignment, corpus)
    }
}

/// Splits the corpus into `m` metasets balanced by both sentence and token counts.
///
/// Sentences are shuffled within each source, dealt round-robin (so the
/// sentence counts differ by at most one and each source is spread evenly),
/// then token loads are evened out by swapping pairs of sentences between the
/// heaviest and lightest metasets, preferring swaps within one source.
///
/// A metaset satisfies the sentence constraint if it is within `tolerance` of
/// `N/m` or within the one-sentence rounding of the even split.
pub fn split_metasets(corpus: &Corpus, m: usize, seed: u64, tolerance: f64) -> Result<MetasetAssignment> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 metasets, got {m}")));
    }
    if corpus.len() < m {
        return Err(Error::Config(format!(
            "cannot split {} sentences into {m} metasets",
            corpus.len()
        )));
    }
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Config(format!("invalid tolerance {tolerance}")));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut by_source: BTreeMap<&str, Vec<SentenceId>> = BTreeMap::new();
    for s in corpus.sentences() {
        by_source.entry(&s.source).or_default().push(s.id);
    }
    let mut assignment = vec![0usize; corpus.len()];
    let mut dealt = 0usize;
    for ids in by_source.values_mut() {
        ids.shuffle(&mut rng);
        for &id in ids.iter() {
            assignment[id as usize] = dealt % m;
            dealt += 1;
        }
    }

    let tokens: Vec<usize> = corpus.sentences().iter().map(|s| s.token_count).collect();
    let total_tokens: usize = tokens.iter().sum();
    let mut members: Vec<Vec<SentenceId>> = vec![Vec::new(); m];
    for (id, &k) in assignment.iter().enumerate() {
        members[k].push(id as SentenceId);
    }
    let mut loads: Vec<usize> = members
        .iter()
        .map(|ids| ids.iter().map(|&i| tokens[i as usize]).sum())
        .collect();

    let even = total_tokens as f64 / m as f64;
    let token_dev = |loads: &[usize]| -> f64 {
        if total_tokens == 0 {
            return 0.0;
        }
        loads
            .iter()
            .map(|&l| (l as f64 - even).abs() / even)
            .fold(0.0, f64::max)
    };

    // Aim well inside the tolerance; each swap strictly shrinks the spread
    // between the two extremes.
    let target = tolerance / 4.0;
    let max_rounds = 4 * corpus.len() + 16;
    for _ in 0..max_rounds {
        if token_dev(&loads) <= target {
            break;
        }
        let heavy = (0..m).max_by_key(|&k| (loads[k], std::cmp::Reverse(k))).unwrap();
        let light = (0..m).min_by_key(|&k| (loads[k], k)).unwrap();
        let gap = loads[heavy] - loads[light];
        let swap = best_swap(corpus, &tokens, &members[heavy], &members[light], gap, true)
            .or_else(|| best_swap(corpus, &tokens, &members[heavy], &members[light], gap, false));
        let Some((hi, li)) = swap else { break };
        let a = members[heavy][hi];
        let b = members[light][li];
        members[heavy][hi] = b;
        members[light][li] = a;
        assignment[a as usize] = light;
        assignment[b as usize] = heavy;
        loads[heavy] = loads[heavy] - tokens[a as usize] + tokens[b as usize];
        loads[light] = loads[light] - tokens[b as usize] + tokens[a as usize];
    }

    let result = MetasetAssignment::from_assignment(m, assignment, corpus)?;
    let (sent_dev, tok_dev) = result.max_deviation();
    let sentence_slack = 1.0 / (corpus.len() as f64 / m as f64);
    if tok_dev > tolerance || sent_dev > tolerance.max(sentence_slack) {
        return Err(Error::Unbalanced {
            tolerance,
            sentence_deviation: sent_dev,
            token_deviation: tok_dev,
        });
    }
    Ok(result)
}

/// Finds the swap (index into `heavy`, index into `light`) whose token
/// difference is closest to half the gap while staying strictly inside it.
fn best_swap(
    corpus: &Corpus,
    tokens: &[usize],
    heavy: &[SentenceId],
    light: &[SentenceId],
    gap: usize,
    same_source: bool,
) -> Option<(usize, usize)> {
    let mut pool: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (li, &id) in light.iter().enumerate() {
        let key = if same_source {
            corpus.sentences()[id as usize].source.as_str()
        } else {
            ""
        };
        pool.entry(key).or_default().push((tokens[id as usize], li));
    }
    for v in pool.values_mut() {
        v.sort_unstable();
    }
    let half = gap as f64 / 2.0;
    let mut best: Option<(f64, usize, usize)> = None;
    for (hi, &id) in heavy.iter().enumerate() {
        let key = if same_source {
            corpus.sentences()[id as usize].source.as_str()
        } else {
            ""
        };
        let Some(cands) = pool.get(key) else { continue };
        let ta = tokens[id as usize];
        // Ideal partner has ta - half tokens.
        let ideal = ta as f64 - half;
        let pos = cands.partition_point(|&(tb, _)| (tb as f64) < ideal);
        for j in [pos.wrapping_sub(1), pos] {
            let Some(&(tb, li)) = cands.get(j) else { continue };
            if tb >= ta || ta - tb >= gap {
                continue;
            }
            let score = ((ta - tb) as f64 - half).abs();
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, hi, li));
            }
        }
    }
    best.map(|(_, hi, li)| (hi, li))
}
