//! `key = value` pipeline configuration with dotted keys and `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use curriculum_core::corpus::DEFAULT_TOLERANCE;
use curriculum_core::scheduler::ScheduleConfig;
use curriculum_core::teacher::{DiscountConfig, TeacherConfig};
use curriculum_core::tokenizer::{BASE_VOCAB_SIZE, DEFAULT_MAX_SEQ_LEN, DEFAULT_VOCAB_SIZE};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const DEFAULT_METASETS: usize = 5;
pub const DEFAULT_WINDOW_SIZE: u64 = curriculum_core::analysis::DEFAULT_WINDOW_SIZE;

/// Which model scores the evaluation items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalTeacher {
    /// A teacher trained on the whole tokenized corpus.
    Full,
    /// The cross-review teacher of one metaset.
    Metaset(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// `(tag, files)` in tag order.
    pub sources: Vec<(String, Vec<PathBuf>)>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub metasets: usize,
    pub tolerance: f64,
    pub teacher: TeacherConfig,
    /// Externally computed score tables, by metaset.
    pub external_scores: BTreeMap<usize, PathBuf>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub window_size: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub eval_pairs: Option<PathBuf>,
    pub eval_sap: Option<PathBuf>,
    pub eval_teacher: EvalTeacher,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sources: Vec::new(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            metasets: DEFAULT_METASETS,
            tolerance: DEFAULT_TOLERANCE,
            teacher: TeacherConfig::default(),
            external_scores: BTreeMap::new(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            window_size: DEFAULT_WINDOW_SIZE,
            output_dir: PathBuf::from("out"),
            threads: 0,
            eval_pairs: None,
            eval_sap: None,
            eval_teacher: EvalTeacher::Full,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}")))
}

/// Splits `key = value` text into ordered pairs. Duplicate keys are an error.
fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once(" #").map_or(raw, |(a, _)| a).trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(CliError::Config(format!(
                "{origin}:{}: duplicate key {k} (first set on line {prev})",
                i + 1
            )));
        }
        out.push((k, v));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Reads a config file and applies `overrides` (`key=value`) on top.
    /// Relative paths are resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut pairs = parse_lines(&text, &path.display().to_string())?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            match pairs.iter_mut().find(|(pk, _)| pk == k) {
                Some(p) => p.1 = v.to_owned(),
                None => pairs.push((k.to_owned(), v.to_owned())),
            }
        }
        let cfg = Self::from_pairs(&pairs, &base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_pairs(pairs: &[(String, String)], base: &Path) -> Result<Self, CliError> {
        let mut cfg = PipelineConfig::default();
        let mut sources = BTreeMap::new();
        let mut discounts = None;
        let mut steps = None;
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (k, v) in pairs {
            let k = k.as_str();
            match k {
                "vocab_size" => cfg.vocab_size = parse_num(k, v)?,
                "max_seq_len" => cfg.max_seq_len = parse_num(k, v)?,
                "metasets" => cfg.metasets = parse_num(k, v)?,
                "tolerance" => cfg.tolerance = parse_num(k, v)?,
                "ngram.order" => cfg.teacher.order = parse_num(k, v)?,
                "ngram.discounts" => discounts = Some(v.clone()),
                "schedule.c0" => cfg.schedule.initial_competence = parse_num(k, v)?,
                "schedule.p" => cfg.schedule.root = parse_num(k, v)?,
                "schedule.T" => cfg.schedule.max_steps = parse_num(k, v)?,
                "schedule.batch_size" => cfg.schedule.batch_size = parse_num(k, v)?,
                "schedule.steps" => steps = Some(parse_num(k, v)?),
                "seed" => cfg.seed = parse_num(k, v)?,
                "window_size" => cfg.window_size = parse_num(k, v)?,
                "output_dir" => cfg.output_dir = resolve(v),
                "threads" => cfg.threads = parse_num(k, v)?,
                "eval.pairs" => cfg.eval_pairs = Some(resolve(v)),
                "eval.sap" => cfg.eval_sap = Some(resolve(v)),
                "eval.teacher" => {
                    cfg.eval_teacher = if v == "full" {
                        EvalTeacher::Full
                    } else {
                        EvalTeacher::Metaset(parse_num(k, v)?)
                    }
                }
                _ => {
                    if let Some(tag) = k.strip_prefix("source.") {
                        if tag.is_empty() || tag.contains(char::is_whitespace) {
                            return Err(CliError::Config(format!("invalid source tag in key {k}")));
                        }
                        let files = v
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(resolve)
                            .collect();
                        sources.insert(tag.to_owned(), files);
                    } else if let Some(idx) = k.strip_prefix("teacher.external.") {
                        cfg.external_scores.insert(parse_num(k, idx)?, resolve(v));
                    } else {
                        return Err(CliError::Config(format!("unknown config key {k}")));
                    }
                }
            }
        }
        cfg.sources = sources.into_iter().collect();
        cfg.teacher.discounts = match discounts.as_deref() {
            None | Some("estimated") => DiscountConfig::Estimated,
            Some(list) => DiscountConfig::Fixed(
                list.split(',')
                    .map(|x| parse_num("ngram.discounts", x.trim()))
                    .collect::<Result<_, _>>()?,
            ),
        };
        cfg.schedule.emit_steps = steps.unwrap_or(cfg.schedule.max_steps);
        cfg.schedule.seed = cfg.stage_seed("schedule");
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.sources.is_empty() {
            return err("no sources configured (add source.<tag> = <path>)".into());
        }
        for (tag, files) in &self.sources {
            if files.is_empty() {
                return err(format!("source.{tag} lists no files"));
            }
            for f in files {
                if !f.is_file() {
                    return err(format!("source.{tag}: file {} does not exist", f.display()));
                }
            }
        }
        for p in self
            .external_scores
            .values()
            .chain(&self.eval_pairs)
            .chain(&self.eval_sap)
        {
            if !p.is_file() {
                return err(format!("file {} does not exist", p.display()));
            }
        }
        if !self.external_scores.is_empty() {
            let want: Vec<usize> = (0..self.metasets).collect();
            let got: Vec<usize> = self.external_scores.keys().copied().collect();
            if got != want {
                return err(format!(
                    "teacher.external.* must cover metasets 0..{} exactly, got {got:?}",
                    self.metasets
                ));
            }
        }
        if self.vocab_size < BASE_VOCAB_SIZE {
            return err(format!("vocab_size must be at least {BASE_VOCAB_SIZE}"));
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be positive".into());
        }
        if self.metasets < 2 {
            return err("metasets must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return err(format!("tolerance {} outside [0, 1)", self.tolerance));
        }
        if self.teacher.order == 0 {
            return err("ngram.order must be at least 1".into());
        }
        if let DiscountConfig::Fixed(d) = &self.teacher.discounts {
            if d.len() != self.teacher.order {
                return err(format!(
                    "ngram.discounts needs {} values, got {}",
                    self.teacher.order,
                    d.len()
                ));
            }
            if d.iter().any(|x| !(0.0..1.0).contains(x)) {
                return err("ngram.discounts must lie in [0, 1)".into());
            }
        }
        if self.window_size == 0 {
            return err("window_size must be positive".into());
        }
        if let EvalTeacher::Metaset(k) = self.eval_teacher {
            if k >= self.metasets {
                return err(format!("eval.teacher {k} is not a metaset index"));
            }
        }
        self.schedule.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seed for one stage, derived from the global seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

pub const DEFAULTS_SUMMARY: &str = concat!(
    "Config keys (key = value, # comments):\n",
    "  source.<tag> = path[,path...]   input text, one sentence per line (required)\n",
    "  vocab_size = 50272              BPE vocabulary size incl. 3 specials and 256 bytes\n",
    "  max_seq_len = 128               segment length for teacher training\n",
    "  metasets = 5                    number of cross-review metasets\n",
    "  tolerance = 0.02                allowed relative imbalance between metasets\n",
    "  ngram.order = 4                 teacher n-gram order\n",
    "  ngram.discounts = estimated     or one value per order, lowest first\n",
    "  teacher.external.<k> = path     score table for metaset k (replaces n-gram teachers)\n",
    "  schedule.c0 = 0.01  schedule.p = 10  schedule.T = 150001  schedule.batch_size = 32\n",
    "  schedule.steps = T              number of batches to write\n",
    "  seed = 0                        all randomness derives from this\n",
    "  window_size = 28937             steps per analysis window\n",
    "  output_dir = out                relative to the config file\n",
    "  threads = 0                     0 uses every core\n",
    "  eval.pairs = path  eval.sap = path  eval.teacher = full|<metaset>\n",
);

#[cfg(test)]
mod tests {
    use super::*;
    use curriculum_core::scheduler::{DEFAULT_INITIAL_COMPETENCE, DEFAULT_ROOT};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_keys_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "x\n");
        let conf = write(
            dir.path(),
            "c.conf",
            "# demo\nsource.kids = a.txt\nvocab_size = 300  # small\nngram.discounts = 0.5,0.6,0.7,0.8\nschedule.T = 10\n",
        );
        let cfg = PipelineConfig::load(&conf, &["seed=7".into(), "schedule.steps = 3".into()]).unwrap();
        assert_eq!(cfg.sources[0].0, "kids");
        assert_eq!(cfg.sources[0].1[0], dir.path().join("a.txt"));
        assert_eq!(cfg.vocab_size, 300);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.max_steps, 10);
        assert_eq!(cfg.schedule.emit_steps, 3);
        assert_eq!(cfg.schedule.root, DEFAULT_ROOT);
        assert_eq!(cfg.schedule.initial_competence, DEFAULT_INITIAL_COMPETENCE);
        assert_eq!(cfg.teacher.discounts, DiscountConfig::Fixed(vec![0.5, 0.6, 0.7, 0.8]));
        assert_eq!(cfg.schedule.seed, cfg.stage_seed("schedule"));
        assert_ne!(cfg.stage_seed("split"), cfg.stage_seed("schedule"));
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "x\n");
        let conf = write(dir.path(), "c.conf", "source.a = a.txt\nvocab_sise = 300\n");
        let err = PipelineConfig::load(&conf, &[]).unwrap_err();
        assert!(err.to_string().contains("vocab_sise"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_source_file_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let conf = write(dir.path(), "c.conf", "source.a = nope.txt\n");
        assert_eq!(PipelineConfig::load(&conf, &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "x\n");
        let conf = write(dir.path(), "c.conf", "source.a = a.txt\nseed = 1\nseed = 2\n");
        assert!(PipelineConfig::load(&conf, &[]).is_err());
    }
}
