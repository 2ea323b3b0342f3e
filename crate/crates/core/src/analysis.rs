//! Curriculum diagnostics: which sources the schedule draws from over time,
//! how often each sentence is seen, and what simple predictors explain the
//! difficulty scores.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;

use crate::corpus::Corpus;
use crate::cross_review::DifficultyTable;
use crate::error::{Error, Result};
use crate::scheduler::BatchManifest;
use crate::tokenizer::TokenId;

pub use crate::stats::{ols_fit, pearson, spearman, OlsFit};

/// Steps per epoch of an unordered baseline with 32-sentence batches.
pub const DEFAULT_WINDOW_SIZE: u64 = 28_937;

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub first_step: u64,
    pub last_step: u64,
    pub slots: usize,
    pub proportions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub window_size: u64,
    pub windows: Vec<Window>,
    /// Whole-corpus sentence proportions per source.
    pub reference: BTreeMap<String, f64>,
    /// Set when the window was larger than the manifest.
    pub single_window: bool,
}

impl WindowReport {
    /// CSV with one row per (window, source); the reference rows use window `corpus`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "window,first_step,last_step,source,proportion")?;
        for win in &self.windows {
            for (src, p) in &win.proportions {
                writeln!(
                    w,
                    "{},{},{},{},{p:.6}",
                    win.index,
                    win.first_step,
                    win.last_step,
                    csv_field(src)
                )?;
            }
        }
        for (src, p) in &self.reference {
            writeln!(w, "corpus,,,{},{p:.6}", csv_field(src))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Total variation distance between two distributions over sources.
pub fn total_variation(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Share of sampled sentence slots per source in consecutive step windows.
/// Every slot counts, so repeated sentences count each time they appear.
pub fn domain_proportions(manifest: &BatchManifest, corpus: &Corpus, window_size: u64) -> Result<WindowReport> {
    if window_size == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    let sources: Vec<&String> = corpus.source_summary().keys().collect();
    let source_index: BTreeMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let sentence_source: Vec<usize> = corpus
        .sentences()
        .iter()
        .map(|s| source_index[s.source.as_str()])
        .collect();

    let steps = manifest.batches.iter().map(|b| b.step + 1).max().unwrap_or(0);
    let single_window = window_size > steps;
    if single_window {
        warn!("window size {window_size} exceeds the {steps} manifest steps; reporting one window");
    }
    let effective = if single_window { steps.max(1) } else { window_size };
    let num_windows = steps.div_ceil(effective) as usize;
    let mut counts = vec![vec![0usize; sources.len()]; num_windows];
    for b in &manifest.batches {
        let w = (b.step / effective) as usize;
        for &id in &b.ids {
            let src = *sentence_source
                .get(id as usize)
                .ok_or_else(|| Error::Data(format!("manifest step {} names unknown sentence {id}", b.step)))?;
            counts[w][src] += 1;
        }
    }
    let windows = counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.iter().sum::<usize>() > 0)
        .map(|(i, c)| {
            let slots: usize = c.iter().sum();
            Window {
                index: i,
                first_step: i as u64 * effective,
                last_step: ((i as u64 + 1) * effective).min(steps) - 1,
                slots,
                proportions: sources
                    .iter()
                    .zip(&c)
                    .map(|(s, &k)| ((*s).clone(), k as f64 / slots as f64))
                    .collect(),
            }
        })
        .collect();
    let n = corpus.len() as f64;
    let reference = corpus
        .source_summary()
        .iter()
        .map(|(s, st)| (s.clone(), st.sentences as f64 / n))
        .collect();
    Ok(WindowReport {
        window_size,
        windows,
        reference,
        single_window,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSummary {
    pub sentences: usize,
    pub never_seen: usize,
    pub max_exposures: usize,
    pub mean_exposures: f64,
}

/// Number of times each sentence appears in the manifest, indexed by id.
pub fn exposure_counts(manifest: &BatchManifest, num_sentences: usize) -> Vec<usize> {
    let mut counts = vec![0; num_sentences];
    for b in &manifest.batches {
        for &id in &b.ids {
            if let Some(c) = counts.get_mut(id as usize) {
                *c += 1;
            }
        }
    }
    counts
}

pub fn exposure_summary(counts: &[usize]) -> ExposureSummary {
    ExposureSummary {
        sentences: counts.len(),
        never_seen: counts.iter().filter(|&&c| c == 0).count(),
        max_exposures: counts.iter().copied().max().unwrap_or(0),
        mean_exposures: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
    }
}

/// Token frequencies of a training corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnigramCounts {
    counts: BTreeMap<TokenId, u64>,
    total: u64,
}

impl UnigramCounts {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let mut u = Self::default();
        for s in seqs {
            for &t in s {
                *u.counts.entry(t).or_default() += 1;
                u.total += 1;
            }
        }
        u
    }

    pub fn count(&self, t: TokenId) -> u64 {
        self.counts.get(&t).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Mean of `log2(count / total)` over the tokens; `None` if any token is unseen.
    pub fn mean_log_frequency(&self, ids: &[TokenId]) -> Option<f64> {
        if ids.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for &t in ids {
            let c = self.count(t);
            if c == 0 {
                return None;
            }
            sum += (c as f64 / self.total as f64).log2();
        }
        Some(sum / ids.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatesReport {
    pub observations: usize,
    /// Spearman rho of difficulty against token count.
    pub spearman_length: Option<f64>,
    /// Spearman rho of difficulty against mean log2 unigram frequency.
    pub spearman_freq: Option<f64>,
    /// `difficulty ~ 1 + length + frequency`; coefficients in that order.
    pub ols: Option<OlsFit>,
}

impl CorrelatesReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"));
        writeln!(w, "measure,value")?;
        writeln!(w, "observations,{}", self.observations)?;
        writeln!(w, "spearman_length,{}", opt(self.spearman_length))?;
        writeln!(w, "spearman_freq,{}", opt(self.spearman_freq))?;
        let ols = self.ols.as_ref();
        writeln!(w, "ols_intercept,{}", opt(ols.map(|f| f.intercept)))?;
        writeln!(w, "ols_length,{}", opt(ols.map(|f| f.coefficients[0])))?;
        writeln!(w, "ols_freq,{}", opt(ols.map(|f| f.coefficients[1])))?;
        writeln!(w, "ols_r_squared,{}", opt(ols.map(|f| f.r_squared)))?;
        writeln!(w, "ols_adj_r_squared,{}", opt(ols.map(|f| f.adj_r_squared)))?;
        w.flush()?;
        Ok(())
    }
}

/// Relates difficulty to sentence length and unigram frequency.
///
/// `encoded[id]` is the token sequence of sentence `id`. Sentences containing
/// a token absent from `unigrams` are skipped.
pub fn difficulty_correlates(
    table: &DifficultyTable,
    corpus: &Corpus,
    encoded: &[Vec<TokenId>],
    unigrams: &UnigramCounts,
) -> Result<CorrelatesReport> {
    let mut difficulty = Vec::with_capacity(table.len());
    let mut length = Vec::with_capacity(table.len());
    let mut freq = Vec::with_capacity(table.len());
    for row in table.rows() {
        let id = row.sentence_id as usize;
        let s = corpus
            .sentences()
            .get(id)
            .ok_or_else(|| Error::Data(format!("difficulty table names unknown sentence {id}")))?;
        let ids = encoded
            .get(id)
            .ok_or_else(|| Error::Data(format!("no encoding for sentence {id}")))?;
        let Some(f) = unigrams.mean_log_frequency(ids) else {
            continue;
        };
        difficulty.push(row.difficulty);
        length.push(s.token_count as f64);
        freq.push(f);
    }
    let predictors: Vec<Vec<f64>> = length.iter().zip(&freq).map(|(&l, &f)| vec![l, f]).collect();
    Ok(CorrelatesReport {
        observations: difficulty.len(),
        spearman_length: spearman(&difficulty, &length).ok(),
        spearman_freq: spearman(&difficulty, &freq).ok(),
        ols: ols_fit(&predictors, &difficulty).ok(),
    })
}
