//! Pipeline stages, their artifacts and the fingerprints that tie them together.
//!
//! Every artifact starts with a `#fingerprint=<hex>` line. A stage's
//! fingerprint hashes its own settings together with the fingerprints of the
//! stages it reads from (and, for ingestion, the bytes of the input files), so
//! a change anywhere upstream invalidates everything downstream.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use curriculum_core::analysis::{
    difficulty_correlates, domain_proportions, exposure_counts, exposure_summary, UnigramCounts,
};
use curriculum_core::corpus::{ingest, split_metasets, summarize, Corpus, MetasetAssignment};
use curriculum_core::cross_review::{
    rank_sentences, run_cross_review, table_from_external, teacher_agreement, CrossReviewConfig, DifficultyTable,
    Ranking,
};
use curriculum_core::eval::{aggregate_effects, minimal_pair_accuracy, read_pairs, read_sap_items, surprisal_effect};
use curriculum_core::scheduler::{competence, emit_manifest_tagged, BatchManifest};
use curriculum_core::teacher::{load_external_scores, DiscountConfig, NGramTeacher};
use curriculum_core::tokenizer::{chunk_ids, train_bpe, BpeVocab, TokenId};
use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{EvalTeacher, PipelineConfig};
use crate::error::CliError;

pub const CORPUS: &str = "corpus.tsv";
pub const INGEST_REPORT: &str = "ingest_report.tsv";
pub const MERGES: &str = "merges.txt";
pub const VOCAB: &str = "vocab.tsv";
pub const ENCODED: &str = "encoded.tsv";
pub const SUMMARY: &str = "corpus_summary.tsv";
pub const TOKENIZE_REPORT: &str = "tokenize_report.tsv";
pub const METASETS: &str = "metasets.tsv";
pub const METASET_REPORT: &str = "metaset_report.tsv";
pub const DIFFICULTY: &str = "difficulty.tsv";
pub const TEACHER_DIR: &str = "teachers";
pub const RANKING: &str = "ranking.txt";
pub const MANIFEST: &str = "manifest.tsv";
pub const SCHEDULE_REPORT: &str = "schedule_report.tsv";
pub const WINDOWS: &str = "domain_proportions.csv";
pub const CORRELATES: &str = "correlates.csv";
pub const AGREEMENT: &str = "agreement.csv";
pub const EXPOSURE: &str = "exposure.csv";
pub const EVAL_PAIRS: &str = "eval_pairs.csv";
pub const EVAL_SAP: &str = "eval_sap.csv";
pub const EVAL_SAP_ITEMS: &str = "eval_sap_items.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Tokenize,
    Split,
    CrossReview,
    Rank,
    Schedule,
    Analyze,
    EvalPairs,
    EvalSap,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Ingest,
        Stage::Tokenize,
        Stage::Split,
        Stage::CrossReview,
        Stage::Rank,
        Stage::Schedule,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Tokenize => "tokenize",
            Stage::Split => "split",
            Stage::CrossReview => "cross-review",
            Stage::Rank => "rank",
            Stage::Schedule => "schedule",
            Stage::Analyze => "analyze",
            Stage::EvalPairs => "eval-pairs",
            Stage::EvalSap => "eval-sap",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

struct Hasher(Sha256);

impl Hasher {
    fn new(stage: Stage) -> Self {
        let mut h = Sha256::new();
        h.update(b"curriculum-pipeline/v1\0");
        h.update(stage.name().as_bytes());
        Hasher(h)
    }

    fn field(mut self, name: &str, value: impl fmt::Display) -> Self {
        self.0.update(format!("\0{name}={value}").as_bytes());
        self
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(|e| curriculum_core::Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn discounts_key(d: &DiscountConfig) -> String {
    match d {
        DiscountConfig::Estimated => "estimated".into(),
        DiscountConfig::Fixed(v) => v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
    }
}

/// Expected fingerprint of every stage under a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprints {
    pub ingest: String,
    pub tokenize: String,
    pub split: String,
    pub cross_review: String,
    pub rank: String,
    pub schedule: String,
    pub analyze: String,
    pub eval_pairs: Option<String>,
    pub eval_sap: Option<String>,
}

impl Fingerprints {
    pub fn compute(cfg: &PipelineConfig) -> Result<Self, CliError> {
        let mut h = Hasher::new(Stage::Ingest);
        for (tag, files) in &cfg.sources {
            for f in files {
                h = h.field("source", tag).field("file", file_digest(f)?);
            }
        }
        let ingest = h.finish();
        let tokenize = Hasher::new(Stage::Tokenize)
            .field("up", &ingest)
            .field("vocab_size", cfg.vocab_size)
            .field("max_seq_len", cfg.max_seq_len)
            .finish();
        let split = Hasher::new(Stage::Split)
            .field("up", &tokenize)
            .field("metasets", cfg.metasets)
            .field("tolerance", format!("{:?}", cfg.tolerance))
            .field("seed", cfg.stage_seed("split"))
            .finish();
        let mut h = Hasher::new(Stage::CrossReview).field("up", &split);
        if cfg.external_scores.is_empty() {
            h = h
                .field("order", cfg.teacher.order)
                .field("discounts", discounts_key(&cfg.teacher.discounts))
                .field("max_seq_len", cfg.max_seq_len);
        } else {
            for (k, p) in &cfg.external_scores {
                h = h.field("external", k).field("file", file_digest(p)?);
            }
        }
        let cross_review = h.finish();
        let rank = Hasher::new(Stage::Rank).field("up", &cross_review).finish();
        let s = &cfg.schedule;
        let schedule = Hasher::new(Stage::Schedule)
            .field("up", &rank)
            .field("c0", format!("{:?}", s.initial_competence))
            .field("p", format!("{:?}", s.root))
            .field("T", s.max_steps)
            .field("B", s.batch_size)
            .field("steps", s.emit_steps)
            .field("seed", s.seed)
            .finish();
        let analyze = Hasher::new(Stage::Analyze)
            .field("up", &schedule)
            .field("window", cfg.window_size)
            .finish();
        let eval = |stage: Stage, file: &Option<PathBuf>| -> Result<Option<String>, CliError> {
            let Some(f) = file else { return Ok(None) };
            let mut h = Hasher::new(stage).field("items", file_digest(f)?);
            h = match cfg.eval_teacher {
                EvalTeacher::Full => h
                    .field("up", &tokenize)
                    .field("teacher", "full")
                    .field("order", cfg.teacher.order)
                    .field("discounts", discounts_key(&cfg.teacher.discounts)),
                EvalTeacher::Metaset(k) => h.field("up", &cross_review).field("teacher", k),
            };
            Ok(Some(h.finish()))
        };
        Ok(Fingerprints {
            eval_pairs: eval(Stage::EvalPairs, &cfg.eval_pairs)?,
            eval_sap: eval(Stage::EvalSap, &cfg.eval_sap)?,
            ingest,
            tokenize,
            split,
            cross_review,
            rank,
            schedule,
            analyze,
        })
    }
}

/// Fingerprint recorded in the first line of an artifact, if any.
pub fn read_fingerprint(path: &Path) -> Option<String> {
    let f = File::open(path).ok()?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).ok()?;
    line.trim_end().strip_prefix("#fingerprint=").map(str::to_owned)
}

/// Writes `path` through a temporary file and a rename, headed by the fingerprint.
fn write_artifact(
    path: &Path,
    fingerprint: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    write_atomic(path, |w| {
        writeln!(w, "#fingerprint={fingerprint}")?;
        body(w)
    })
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let io_err = |p: &Path, e| {
        CliError::Core(curriculum_core::Error::Io {
            path: p.to_owned(),
            source: e,
        })
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub fps: Fingerprints,
    /// Re-run stages even when their outputs are current.
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, CliError> {
        let fps = Fingerprints::compute(&cfg)?;
        Ok(Pipeline { cfg, fps, force: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn teacher_paths(&self, k: usize) -> (PathBuf, PathBuf) {
        let dir = self.cfg.output_dir.join(TEACHER_DIR);
        (
            dir.join(format!("teacher_{k}.bin")),
            dir.join(format!("teacher_{k}.meta")),
        )
    }

    fn fingerprint(&self, stage: Stage) -> Result<&str, CliError> {
        let missing = |what: &str| CliError::Config(format!("`{stage}` needs {what} in the config"));
        Ok(match stage {
            Stage::Ingest => &self.fps.ingest,
            Stage::Tokenize => &self.fps.tokenize,
            Stage::Split => &self.fps.split,
            Stage::CrossReview => &self.fps.cross_review,
            Stage::Rank => &self.fps.rank,
            Stage::Schedule => &self.fps.schedule,
            Stage::Analyze => &self.fps.analyze,
            Stage::EvalPairs => self.fps.eval_pairs.as_deref().ok_or_else(|| missing("eval.pairs"))?,
            Stage::EvalSap => self.fps.eval_sap.as_deref().ok_or_else(|| missing("eval.sap"))?,
        })
    }

    /// Files a stage writes; all carry the stage's fingerprint.
    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let names: &[&str] = match stage {
            Stage::Ingest => &[CORPUS, INGEST_REPORT],
            Stage::Tokenize => &[MERGES, VOCAB, ENCODED, SUMMARY, TOKENIZE_REPORT],
            Stage::Split => &[METASETS, METASET_REPORT],
            Stage::CrossReview => &[DIFFICULTY],
            Stage::Rank => &[RANKING],
            Stage::Schedule => &[MANIFEST, SCHEDULE_REPORT],
            Stage::Analyze => &[WINDOWS, CORRELATES, AGREEMENT, EXPOSURE],
            Stage::EvalPairs => &[EVAL_PAIRS],
            Stage::EvalSap => &[EVAL_SAP, EVAL_SAP_ITEMS],
        };
        let mut out: Vec<PathBuf> = names.iter().map(|n| self.path(n)).collect();
        if stage == Stage::CrossReview && self.cfg.external_scores.is_empty() {
            out.extend((0..self.cfg.metasets).map(|k| self.teacher_paths(k).1));
        }
        out
    }

    fn is_current(&self, stage: Stage) -> Result<bool, CliError> {
        let fp = self.fingerprint(stage)?;
        Ok(self
            .outputs(stage)
            .iter()
            .all(|p| read_fingerprint(p).as_deref() == Some(fp)))
    }

    /// Fails unless `name` exists and was produced under the current config.
    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        self.require_path(&path, stage)?;
        Ok(path)
    }

    fn require_path(&self, path: &Path, stage: Stage) -> Result<(), CliError> {
        let stage_name = stage.name();
        if !path.exists() {
            return Err(CliError::Missing {
                path: path.to_owned(),
                stage: stage_name,
            });
        }
        if read_fingerprint(path).as_deref() != Some(self.fingerprint(stage)?) {
            return Err(CliError::Stale {
                path: path.to_owned(),
                stage: stage_name,
            });
        }
        Ok(())
    }

    /// Runs one stage unless its outputs are already current.
    pub fn run(&self, stage: Stage) -> Result<Outcome, CliError> {
        if !self.force && self.is_current(stage)? {
            println!("{stage}: up to date");
            return Ok(Outcome::UpToDate);
        }
        let detail = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Tokenize => self.tokenize()?,
            Stage::Split => self.split()?,
            Stage::CrossReview => self.cross_review()?,
            Stage::Rank => self.rank()?,
            Stage::Schedule => self.schedule()?,
            Stage::Analyze => self.analyze()?,
            Stage::EvalPairs => self.eval_pairs()?,
            Stage::EvalSap => self.eval_sap()?,
        };
        println!("{stage}: {detail}");
        Ok(Outcome::Ran)
    }

    /// Every pipeline stage in dependency order, then any configured evaluations.
    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>, CliError> {
        let mut stages = Stage::PIPELINE.to_vec();
        if self.cfg.eval_pairs.is_some() {
            stages.push(Stage::EvalPairs);
        }
        if self.cfg.eval_sap.is_some() {
            stages.push(Stage::EvalSap);
        }
        stages.into_iter().map(|s| Ok((s, self.run(s)?))).collect()
    }

    fn load_corpus(&self) -> Result<Corpus, CliError> {
        Ok(Corpus::read_tsv(&self.require(CORPUS, Stage::Ingest)?)?)
    }

    /// Corpus with token counts filled in from the encoded sentences.
    fn load_tokenized(&self) -> Result<(Corpus, Vec<Vec<TokenId>>), CliError> {
        let mut corpus = self.load_corpus()?;
        let encoded = read_encoded(&self.require(ENCODED, Stage::Tokenize)?)?;
        if encoded.len() != corpus.len() {
            return Err(curriculum_core::Error::Data(format!(
                "{} encoded sentences for a corpus of {}",
                encoded.len(),
                corpus.len()
            ))
            .into());
        }
        let counts: Vec<usize> = encoded.iter().map(Vec::len).collect();
        corpus.set_token_counts(&counts)?;
        Ok((corpus, encoded))
    }

    fn load_vocab(&self) -> Result<BpeVocab, CliError> {
        let merges = self.require(MERGES, Stage::Tokenize)?;
        let vocab = self.require(VOCAB, Stage::Tokenize)?;
        Ok(BpeVocab::load(&merges, &vocab)?)
    }

    fn ingest(&self) -> Result<String, CliError> {
        let manifest: Vec<(PathBuf, String)> = self
            .cfg
            .sources
            .iter()
            .flat_map(|(tag, files)| files.iter().map(move |f| (f.clone(), tag.clone())))
            .collect();
        let (corpus, report) = ingest(&manifest)?;
        let fp = self.fingerprint(Stage::Ingest)?;
        write_artifact(&self.path(CORPUS), fp, |w| Ok(corpus.write_tsv(w)?))?;
        write_artifact(&self.path(INGEST_REPORT), fp, |w| {
            writeln!(w, "path\tsource\ttotal_lines\tretained\texcluded_blank")?;
            for f in &report.files {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    f.path.display(),
                    f.source,
                    f.total_lines,
                    f.retained,
                    f.excluded_blank
                )?;
            }
            Ok(())
        })?;
        Ok(format!("{} sentences from {} files", corpus.len(), report.files.len()))
    }

    fn tokenize(&self) -> Result<String, CliError> {
        let mut corpus = self.load_corpus()?;
        let vocab = train_bpe(&corpus, self.cfg.vocab_size)?;
        if vocab.is_short() {
            warn!(
                "corpus supports only {} of the requested {} vocabulary entries",
                vocab.vocab_size(),
                vocab.requested_size()
            );
        }
        let encoded: Vec<Vec<TokenId>> = corpus.sentences().par_iter().map(|s| vocab.encode(&s.text)).collect();
        let counts: Vec<usize> = encoded.iter().map(Vec::len).collect();
        corpus.set_token_counts(&counts)?;
        let max = self.cfg.max_seq_len;
        let truncated = counts.iter().filter(|&&c| c > max).count();
        let segments: usize = counts.iter().map(|&c| c.div_ceil(max).max(1)).sum();
        let fp = self.fingerprint(Stage::Tokenize)?;
        write_artifact(&self.path(MERGES), fp, |w| Ok(vocab.write_merges(w)?))?;
        write_artifact(&self.path(VOCAB), fp, |w| Ok(vocab.write_vocab(w)?))?;
        write_artifact(&self.path(ENCODED), fp, |w| write_encoded(w, &encoded))?;
        write_artifact(&self.path(SUMMARY), fp, |w| Ok(summarize(&corpus)?.write_tsv(w)?))?;
        let fraction = truncated as f64 / corpus.len() as f64;
        write_artifact(&self.path(TOKENIZE_REPORT), fp, |w| {
            writeln!(w, "key\tvalue")?;
            writeln!(w, "vocab_size\t{}", vocab.vocab_size())?;
            writeln!(w, "requested_vocab_size\t{}", vocab.requested_size())?;
            writeln!(w, "vocab_fingerprint\t{}", vocab.fingerprint())?;
            writeln!(w, "sentences\t{}", corpus.len())?;
            writeln!(w, "tokens\t{}", corpus.total_tokens())?;
            writeln!(w, "max_seq_len\t{max}")?;
            writeln!(w, "truncated_sentences\t{truncated}")?;
            writeln!(w, "truncated_fraction\t{fraction:.6}")?;
            writeln!(w, "segments\t{segments}")?;
            Ok(())
        })?;
        Ok(format!(
            "{} tokens, vocab {}, {:.2}% of sentences over {max} tokens",
            corpus.total_tokens(),
            vocab.vocab_size(),
            100.0 * fraction
        ))
    }

    fn split(&self) -> Result<String, CliError> {
        let (corpus, _) = self.load_tokenized()?;
        let asg = split_metasets(
            &corpus,
            self.cfg.metasets,
            self.cfg.stage_seed("split"),
            self.cfg.tolerance,
        )?;
        let fp = self.fingerprint(Stage::Split)?;
        write_artifact(&self.path(METASETS), fp, |w| Ok(asg.write_tsv(w)?))?;
        let (sd, td) = asg.max_deviation();
        write_artifact(&self.path(METASET_REPORT), fp, |w| {
            writeln!(w, "metaset\tsentences\ttokens")?;
            for (k, st) in asg.per_metaset().iter().enumerate() {
                writeln!(w, "{k}\t{}\t{}", st.sentences, st.tokens)?;
            }
            writeln!(w, "# max_sentence_deviation={sd:.6} max_token_deviation={td:.6}")?;
            Ok(())
        })?;
        Ok(format!(
            "{} metasets, max deviation {:.2}% sentences / {:.2}% tokens",
            self.cfg.metasets,
            100.0 * sd,
            100.0 * td
        ))
    }

    fn load_assignment(&self, corpus: &Corpus) -> Result<MetasetAssignment, CliError> {
        let path = self.require(METASETS, Stage::Split)?;
        Ok(MetasetAssignment::read_tsv(&path, self.cfg.metasets, corpus)?)
    }

    fn cross_review(&self) -> Result<String, CliError> {
        let (corpus, encoded) = self.load_tokenized()?;
        let asg = self.load_assignment(&corpus)?;
        let fp = self.fingerprint(Stage::CrossReview)?;
        let table = if self.cfg.external_scores.is_empty() {
            let vocab = self.load_vocab()?;
            let xr = CrossReviewConfig {
                teacher: self.cfg.teacher.clone(),
                max_seq_len: self.cfg.max_seq_len,
            };
            let (table, teachers) = run_cross_review(&encoded, &asg, vocab.vocab_size(), &vocab.fingerprint(), &xr)?;
            for (k, t) in teachers.iter().enumerate() {
                let (bin, meta) = self.teacher_paths(k);
                write_atomic(&bin, |w| Ok(t.write_counts(w)?))?;
                write_artifact(&meta, fp, |w| Ok(w.write_all(t.sidecar().as_bytes())?))?;
            }
            table
        } else {
            let tables = self
                .cfg
                .external_scores
                .values()
                .map(|p| load_external_scores(p))
                .collect::<Result<Vec<_>, _>>()?;
            table_from_external(&tables, &asg)?
        };
        write_artifact(&self.path(DIFFICULTY), fp, |w| Ok(table.write_tsv(w)?))?;
        Ok(format!(
            "scored {} sentences with {} teachers",
            table.len(),
            self.cfg.metasets
        ))
    }

    fn load_difficulty(&self) -> Result<DifficultyTable, CliError> {
        Ok(DifficultyTable::read_tsv(
            &self.require(DIFFICULTY, Stage::CrossReview)?,
        )?)
    }

    fn rank(&self) -> Result<String, CliError> {
        let table = self.load_difficulty()?;
        let corpus = self.load_corpus()?;
        let ranking = rank_sentences(&table, corpus.len())?;
        write_artifact(&self.path(RANKING), self.fingerprint(Stage::Rank)?, |w| {
            Ok(ranking.write(w)?)
        })?;
        Ok(format!("ranked {} sentences", ranking.len()))
    }

    fn schedule(&self) -> Result<String, CliError> {
        let ranking = Ranking::read(&self.require(RANKING, Stage::Rank)?)?;
        let fp = self.fingerprint(Stage::Schedule)?;
        let mut summary = None;
        // The manifest writer emits the fingerprint line itself.
        write_atomic(&self.path(MANIFEST), |w| {
            summary = Some(emit_manifest_tagged(&ranking, &self.cfg.schedule, fp, w)?);
            Ok(())
        })?;
        let summary = summary.expect("manifest written");
        let s = &self.cfg.schedule;
        write_artifact(&self.path(SCHEDULE_REPORT), fp, |w| {
            writeln!(w, "key\tvalue")?;
            writeln!(w, "sentences\t{}", ranking.len())?;
            writeln!(w, "steps\t{}", summary.steps)?;
            writeln!(w, "degenerate_steps\t{}", summary.degenerate_steps)?;
            writeln!(w, "initial_competence\t{}", competence(0, s))?;
            writeln!(w, "seed\t{}", s.seed)?;
            Ok(())
        })?;
        if summary.degenerate_steps > 0 {
            warn!(
                "{} steps had fewer eligible sentences than the batch size and sampled with replacement",
                summary.degenerate_steps
            );
        }
        Ok(format!("{} batches of {}", summary.steps, s.batch_size))
    }

    fn analyze(&self) -> Result<String, CliError> {
        let manifest_path = self.require(MANIFEST, Stage::Schedule)?;
        let manifest = BatchManifest::read(&manifest_path)?;
        let (corpus, encoded) = self.load_tokenized()?;
        let table = self.load_difficulty()?;
        let fp = self.fingerprint(Stage::Analyze)?;

        let windows = domain_proportions(&manifest, &corpus, self.cfg.window_size)?;
        write_artifact(&self.path(WINDOWS), fp, |w| Ok(windows.write_csv(w)?))?;

        let unigrams = UnigramCounts::from_sequences(encoded.iter().map(Vec::as_slice));
        let correlates = difficulty_correlates(&table, &corpus, &encoded, &unigrams)?;
        write_artifact(&self.path(CORRELATES), fp, |w| Ok(correlates.write_csv(w)?))?;

        let agreement = teacher_agreement(&table);
        write_artifact(&self.path(AGREEMENT), fp, |w| {
            writeln!(w, "teacher_a,teacher_b,shared,spearman")?;
            for p in &agreement.pairs {
                let rho = p.spearman.map_or_else(|| "NA".to_owned(), |r| format!("{r:.6}"));
                writeln!(w, "{},{},{},{rho}", p.teachers.0, p.teachers.1, p.shared)?;
            }
            let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"));
            writeln!(w, "mean_pairwise,,,{}", opt(agreement.mean_pairwise_spearman))?;
            writeln!(w, "# mean_score_std_bits={}", opt(agreement.mean_score_std))?;
            Ok(())
        })?;

        let counts = exposure_counts(&manifest, corpus.len());
        let ex = exposure_summary(&counts);
        write_artifact(&self.path(EXPOSURE), fp, |w| {
            writeln!(w, "sentences,never_seen,max_exposures,mean_exposures")?;
            writeln!(
                w,
                "{},{},{},{:.6}",
                ex.sentences, ex.never_seen, ex.max_exposures, ex.mean_exposures
            )?;
            Ok(())
        })?;
        let rho = correlates
            .spearman_length
            .map_or_else(|| "NA".to_owned(), |r| format!("{r:.3}"));
        Ok(format!(
            "{} windows, difficulty-length rho {rho}",
            windows.windows.len()
        ))
    }

    fn eval_model(&self) -> Result<(BpeVocab, NGramTeacher), CliError> {
        let vocab = self.load_vocab()?;
        let teacher = match self.cfg.eval_teacher {
            EvalTeacher::Full => {
                let (_, encoded) = self.load_tokenized()?;
                let segments: Vec<_> = encoded
                    .iter()
                    .enumerate()
                    .flat_map(|(i, ids)| chunk_ids(ids, i as u32, self.cfg.max_seq_len))
                    .collect();
                info!("training a full-corpus teacher for evaluation");
                NGramTeacher::train(&segments, vocab.vocab_size(), &self.cfg.teacher)?
            }
            EvalTeacher::Metaset(k) => {
                if !self.cfg.external_scores.is_empty() {
                    return Err(CliError::Config(
                        "eval.teacher names a metaset teacher, but cross-review used external scores".into(),
                    ));
                }
                let (bin, meta) = self.teacher_paths(k);
                // The count file has no text header; its sidecar carries the fingerprint.
                self.require_path(&meta, Stage::CrossReview)?;
                let loaded = NGramTeacher::load(&bin, &meta)?;
                if loaded.vocab_ref() != vocab.fingerprint() {
                    return Err(CliError::Stale {
                        path: meta,
                        stage: Stage::CrossReview.name(),
                    });
                }
                loaded
            }
        };
        Ok((vocab, teacher))
    }

    fn eval_pairs(&self) -> Result<String, CliError> {
        let path = self
            .cfg
            .eval_pairs
            .as_ref()
            .ok_or_else(|| CliError::Config("eval.pairs is not set".into()))?;
        let fp = self.fingerprint(Stage::EvalPairs)?.to_owned();
        let pairs = read_pairs(path)?;
        let (vocab, teacher) = self.eval_model()?;
        let report = minimal_pair_accuracy(&teacher, &vocab, &pairs)?;
        write_artifact(&self.path(EVAL_PAIRS), &fp, |w| Ok(report.write_csv(w)?))?;
        Ok(format!(
            "{}/{} pairs correct ({:.1}%)",
            report.overall.correct,
            report.overall.total,
            100.0 * report.overall.accuracy()
        ))
    }

    fn eval_sap(&self) -> Result<String, CliError> {
        let path = self
            .cfg
            .eval_sap
            .as_ref()
            .ok_or_else(|| CliError::Config("eval.sap is not set".into()))?;
        let fp = self.fingerprint(Stage::EvalSap)?.to_owned();
        let items = read_sap_items(path)?;
        if items.is_empty() {
            return Err(curriculum_core::Error::Data(format!("{} holds no items", path.display())).into());
        }
        let (vocab, teacher) = self.eval_model()?;
        let effects = items
            .iter()
            .map(|it| Ok((it.construction.clone(), surprisal_effect(&teacher, &vocab, it)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        write_artifact(&self.path(EVAL_SAP_ITEMS), &fp, |w| {
            writeln!(w, "item,construction,effect_bits")?;
            for (i, (c, e)) in effects.iter().enumerate() {
                writeln!(w, "{i},{},{e:.6}", csv_escape(c))?;
            }
            Ok(())
        })?;
        let report = aggregate_effects(&effects);
        write_artifact(&self.path(EVAL_SAP), &fp, |w| Ok(report.write_csv(w)?))?;
        Ok(format!(
            "{} items in {} constructions",
            effects.len(),
            report.constructions.len()
        ))
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// `sentence_id<TAB>id id ...`, one line per sentence in id order.
fn write_encoded<W: Write>(w: &mut W, encoded: &[Vec<TokenId>]) -> Result<(), CliError> {
    writeln!(w, "sentence_id\ttoken_ids")?;
    let mut line = String::new();
    for (i, ids) in encoded.iter().enumerate() {
        line.clear();
        use std::fmt::Write as _;
        write!(line, "{i}\t").unwrap();
        for (j, t) in ids.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            write!(line, "{t}").unwrap();
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_encoded(path: &Path) -> Result<Vec<Vec<TokenId>>, CliError> {
    let f = File::open(path).map_err(|e| curriculum_core::Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("sentence_id\t") || line.is_empty() {
            continue;
        }
        let bad = |m: &str| {
            CliError::Core(curriculum_core::Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: m.to_owned(),
            })
        };
        let (id, ids) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected sentence_id and token ids"))?;
        if id.parse::<usize>().ok() != Some(out.len()) {
            return Err(bad("sentence ids must be consecutive from 0"));
        }
        let ids = ids
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|t| t.parse().map_err(|_| bad("bad token id")))
            .collect::<Result<Vec<TokenId>, _>>()?;
        out.push(ids);
    }
    Ok(out)
}
