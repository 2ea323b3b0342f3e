//! Cross-review difficulty scoring.
//!
//! One teacher is trained per metaset. Every sentence is scored by each
//! teacher that did not see it in training, and its difficulty is the mean of
//! those `M - 1` scores.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{MetasetAssignment, SentenceId};
use crate::error::{Error, Result};
use crate::stats::{mean, sample_std, spearman};
use crate::teacher::{ExternalScoreTable, NGramTeacher, SurprisalModel, TeacherConfig};
use crate::tokenizer::{chunk_ids, TokenId, DEFAULT_MAX_SEQ_LEN};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sentence_id: SentenceId,
    pub home_metaset: usize,
    /// `(teacher, bits per token)` for every teacher except the home one, in teacher order.
    pub scores: Vec<(usize, f64)>,
    pub difficulty: f64,
}

impl ScoreRow {
    pub fn new(sentence_id: SentenceId, home_metaset: usize, scores: Vec<(usize, f64)>) -> Self {
        let difficulty = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
        Self {
            sentence_id,
            home_metaset,
            scores,
            difficulty,
        }
    }

    pub fn score(&self, teacher: usize) -> Option<f64> {
        self.scores.iter().find(|s| s.0 == teacher).map(|s| s.1)
    }
}

/// Per-sentence held-out teacher scores and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyTable {
    num_teachers: usize,
    rows: Vec<ScoreRow>,
}

impl DifficultyTable {
    /// Builds a table, enforcing the held-out structure of every row.
    pub fn from_rows(num_teachers: usize, mut rows: Vec<ScoreRow>) -> Result<Self> {
        rows.sort_by_key(|r| r.sentence_id);
        let table = Self { num_teachers, rows };
        table.validate()?;
        Ok(table)
    }

    /// Checks home exclusion, the `M - 1` score count and the stored mean.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[0].sentence_id == w[1].sentence_id {
                return Err(Error::Data(format!("sentence {} scored twice", w[0].sentence_id)));
            }
        }
        for r in &self.rows {
            if r.home_metaset >= self.num_teachers {
                return Err(Error::Data(format!(
                    "sentence {}: home metaset {} out of range",
                    r.sentence_id, r.home_metaset
                )));
            }
            if r.scores.len() != self.num_teachers - 1 {
                return Err(Error::Data(format!(
                    "sentence {}: expected {} scores, found {}",
                    r.sentence_id,
                    self.num_teachers - 1,
                    r.scores.len()
                )));
            }
            let mut seen = vec![false; self.num_teachers];
            for &(t, s) in &r.scores {
                if t == r.home_metaset || t >= self.num_teachers || std::mem::replace(&mut seen[t], true) {
                    return Err(Error::Data(format!(
                        "sentence {}: invalid score from teacher {t}",
                        r.sentence_id
                    )));
                }
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::Data(format!(
                        "sentence {}: score {s} from teacher {t}",
                        r.sentence_id
                    )));
                }
            }
            let recomputed = r.scores.iter().map(|s| s.1).sum::<f64>() / r.scores.len() as f64;
            if (recomputed - r.difficulty).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "sentence {}: difficulty {} differs from mean {recomputed}",
                    r.sentence_id, r.difficulty
                )));
            }
        }
        Ok(())
    }

    pub fn num_teachers(&self) -> usize {
        self.num_teachers
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: SentenceId) -> Option<&ScoreRow> {
        self.rows
            .binary_search_by_key(&id, |r| r.sentence_id)
            .ok()
            .map(|i| &self.rows[i])
    }

    /// `sentence_id home_metaset score_t0 .. score_t{M-1} difficulty`, home cell empty.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "sentence_id\thome_metaset")?;
        for t in 0..self.num_teachers {
            write!(w, "\tscore_t{t}")?;
        }
        writeln!(w, "\tdifficulty")?;
        for r in &self.rows {
            write!(w, "{}\t{}", r.sentence_id, r.home_metaset)?;
            for t in 0..self.num_teachers {
                match r.score(t) {
                    Some(s) => write!(w, "\t{s:?}")?,
                    None => write!(w, "\t")?,
                }
            }
            writeln!(w, "\t{:?}", r.difficulty)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut num_teachers = None;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let Some(m) = num_teachers else {
                if cols.len() < 4 || cols[0] != "sentence_id" {
                    return Err(Error::parse(path, line_no, "bad difficulty table header"));
                }
                num_teachers = Some(cols.len() - 3);
                continue;
            };
            if cols.len() != m + 3 {
                return Err(Error::parse(path, line_no, format!("expected {} columns", m + 3)));
            }
            let bad = |what: &str| Error::parse(path, line_no, format!("bad {what}"));
            let id: SentenceId = cols[0].parse().map_err(|_| bad("sentence id"))?;
            let home: usize = cols[1].parse().map_err(|_| bad("home metaset"))?;
            let mut scores = Vec::with_capacity(m - 1);
            for (t, c) in cols[2..2 + m].iter().enumerate() {
                if c.is_empty() {
                    continue;
                }
                scores.push((t, c.parse::<f64>().map_err(|_| bad("score"))?));
            }
            let difficulty: f64 = cols[m + 2].parse().map_err(|_| bad("difficulty"))?;
            rows.push(ScoreRow {
                sentence_id: id,
                home_metaset: home,
                scores,
                difficulty,
            });
        }
        let m = num_teachers.ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        Self::from_rows(m, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossReviewConfig {
    pub teacher: TeacherConfig,
    /// Teachers are trained on segments of at most this many tokens.
    pub max_seq_len: usize,
}

impl Default for CrossReviewConfig {
    fn default() -> Self {
        Self {
            teacher: TeacherConfig::default(),
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

/// Trains one teacher per metaset on that metaset's sentences.
pub fn train_teachers(
    encoded: &[Vec<TokenId>],
    assignment: &MetasetAssignment,
    vocab_size: usize,
    vocab_ref: &str,
    config: &CrossReviewConfig,
) -> Result<Vec<NGramTeacher>> {
    if assignment.num_metasets() < 2 {
        return Err(Error::Config("cross-review needs at least 2 metasets".into()));
    }
    if encoded.len() != assignment.assignment().len() {
        return Err(Error::Data(format!(
            "{} encoded sentences but the assignment covers {}",
            encoded.len(),
            assignment.assignment().len()
        )));
    }
    (0..assignment.num_metasets())
        .into_par_iter()
        .map(|k| {
            let segments: Vec<_> = assignment
                .members(k)
                .flat_map(|id| chunk_ids(&encoded[id as usize], id, config.max_seq_len))
                .collect();
            if segments.iter().all(|s| s.ids.is_empty()) {
                return Err(Error::MetasetTooSmall(k));
            }
            Ok(NGramTeacher::train(&segments, vocab_size, &config.teacher)?
                .with_vocab_ref(vocab_ref)
                .with_metaset(k))
        })
        .collect()
}

/// Scores every sentence with all teachers except the one trained on its metaset.
pub fn score_held_out<M: SurprisalModel>(
    teachers: &[M],
    encoded: &[Vec<TokenId>],
    assignment: &MetasetAssignment,
) -> Result<DifficultyTable> {
    let m = assignment.num_metasets();
    if teachers.len() != m {
        return Err(Error::Config(format!("{} teachers for {m} metasets", teachers.len())));
    }
    let rows: Vec<ScoreRow> = encoded
        .par_iter()
        .enumerate()
        .map(|(id, ids)| {
            if ids.is_empty() {
                return Err(Error::EmptySequence);
            }
            let home = assignment.assignment()[id];
            let scores = teachers
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != home)
                .map(|(t, teacher)| (t, mean(&teacher.surprisals(ids))))
                .collect();
            Ok(ScoreRow::new(id as SentenceId, home, scores))
        })
        .collect::<Result<_>>()?;
    DifficultyTable::from_rows(m, rows)
}

/// Trains the metaset teachers and scores the corpus with them.
pub fn run_cross_review(
    encoded: &[Vec<TokenId>],
    assignment: &MetasetAssignment,
    vocab_size: usize,
    vocab_ref: &str,
    config: &CrossReviewConfig,
) -> Result<(DifficultyTable, Vec<NGramTeacher>)> {
    let teachers = train_teachers(encoded, assignment, vocab_size, vocab_ref, config)?;
    let table = score_held_out(&teachers, encoded, assignment)?;
    Ok((table, teachers))
}

/// Builds a difficulty table from externally computed scores; `tables[k]`
/// comes from the teacher trained on metaset `k`.
pub fn table_from_external(tables: &[ExternalScoreTable], assignment: &MetasetAssignment) -> Result<DifficultyTable> {
    let m = assignment.num_metasets();
    if tables.len() != m {
        return Err(Error::Config(format!(
            "{} external score tables for {m} metasets",
            tables.len()
        )));
    }
    let mut missing = Vec::new();
    let mut rows = Vec::with_capacity(assignment.assignment().len());
    for (id, &home) in assignment.assignment().iter().enumerate() {
        let id = id as SentenceId;
        let mut scores = Vec::with_capacity(m - 1);
        for (t, table) in tables.iter().enumerate() {
            if t == home {
                continue;
            }
            match table.get(id) {
                Some(s) => scores.push((t, s)),
                None => missing.push(id),
            }
        }
        rows.push(ScoreRow::new(id, home, scores));
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::MissingSentences(missing));
    }
    DifficultyTable::from_rows(m, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAgreement {
    pub teachers: (usize, usize),
    pub shared: usize,
    /// Absent when either teacher's scores are constant over the shared sentences.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub pairs: Vec<PairAgreement>,
    /// Absent with fewer than three teachers.
    pub mean_pairwise_spearman: Option<f64>,
    /// Mean over sentences of the sample standard deviation of their scores;
    /// absent when each sentence has a single score.
    pub mean_score_std: Option<f64>,
}

/// How consistently the teachers order the sentences they all held out.
pub fn teacher_agreement(table: &DifficultyTable) -> Agreement {
    let m = table.num_teachers();
    let mut pairs = Vec::new();
    if m >= 3 {
        for a in 0..m {
            for b in a + 1..m {
                let (xs, ys): (Vec<f64>, Vec<f64>) = table
                    .rows()
                    .iter()
                    .filter_map(|r| Some((r.score(a)?, r.score(b)?)))
                    .unzip();
                pairs.push(PairAgreement {
                    teachers: (a, b),
                    shared: xs.len(),
                    spearman: spearman(&xs, &ys).ok(),
                });
            }
        }
    }
    let rhos: Vec<f64> = pairs.iter().filter_map(|p| p.spearman).collect();
    let stds: Vec<f64> = table
        .rows()
        .iter()
        .filter_map(|r| sample_std(&r.scores.iter().map(|s| s.1).collect::<Vec<_>>()))
        .collect();
    Agreement {
        pairs,
        mean_pairwise_spearman: (!rhos.is_empty()).then(|| mean(&rhos)),
        mean_score_std: (!stds.is_empty()).then(|| mean(&stds)),
    }
}

/// Sentence ids from easiest to hardest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking(Vec<SentenceId>);

impl Ranking {
    /// Wraps an order after checking it is a permutation of `0..len`.
    pub fn from_order(order: Vec<SentenceId>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &id in &order {
            match seen.get_mut(id as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::Data(format!("ranking is not a permutation (id {id})"))),
            }
        }
        Ok(Self(order))
    }

    pub fn order(&self) -> &[SentenceId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of every sentence in the ranking, indexed by sentence id.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (r, &id) in self.0.iter().enumerate() {
            pos[id as usize] = r;
        }
        pos
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for id in &self.0 {
            writeln!(w, "{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut order = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            order.push(
                line.trim()
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, "bad sentence id"))?,
            );
        }
        Self::from_order(order)
    }
}

/// Orders sentences by ascending difficulty, ties by ascending id.
pub fn rank_sentences(table: &DifficultyTable, num_sentences: usize) -> Result<Ranking> {
    let missing: Vec<SentenceId> = (0..num_sentences as SentenceId)
        .filter(|&id| table.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSentences(missing));
    }
    if table.len() != num_sentences {
        return Err(Error::Data(format!(
            "difficulty table has {} rows for {num_sentences} sentences",
            table.len()
        )));
    }
    let mut order: Vec<(f64, SentenceId)> = table.rows().iter().map(|r| (r.difficulty, r.sentence_id)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ranking::from_order(order.into_iter().map(|p| p.1).collect())
}
