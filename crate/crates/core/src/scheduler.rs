//! Root-p competence schedule and competence-gated batch sampling.
//!
//! At step `t` the learner may see the easiest `ceil(c(t) * N)` sentences,
//! where `c(t) = min(1, (t * (1 - c0^p) / T + c0^p)^(1/p))`. Each batch is an
//! independent uniform draw (without replacement inside the batch) from that
//! prefix of the ranking. The generator for step `t` is ChaCha12 keyed by the
//! seed with stream `t`, so any step can be regenerated on its own.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::SentenceId;
use crate::cross_review::Ranking;
use crate::error::{Error, Result};

pub const DEFAULT_INITIAL_COMPETENCE: f64 = 0.01;
pub const DEFAULT_ROOT: f64 = 10.0;
pub const DEFAULT_MAX_STEPS: u64 = 150_001;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Steps generated per parallel work unit when emitting a manifest.
const EMIT_CHUNK: u64 = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    /// Fraction of the ranking available at step 0 (`c0`).
    pub initial_competence: f64,
    /// Root value `p`.
    pub root: f64,
    /// Step `T` at which competence reaches 1.
    pub max_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of batches to write; may exceed `max_steps`.
    pub emit_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_competence: DEFAULT_INITIAL_COMPETENCE,
            root: DEFAULT_ROOT,
            max_steps: DEFAULT_MAX_STEPS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            emit_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let c0 = self.initial_competence;
        if !(c0 > 0.0 && c0 <= 1.0) {
            return Err(Error::Config(format!("initial competence {c0} must be in (0, 1]")));
        }
        if self.root.is_nan() || self.root < 1.0 || !self.root.is_finite() {
            return Err(Error::Config(format!("root {} must be >= 1", self.root)));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max steps must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.emit_steps < 1 {
            return Err(Error::Config("number of steps to emit must be positive".into()));
        }
        Ok(())
    }
}

/// Root-p competence at step `t`: exactly `c0` at 0 and exactly 1 from `T` on.
pub fn competence(t: u64, cfg: &ScheduleConfig) -> f64 {
    let c0 = cfg.initial_competence;
    if t == 0 {
        return c0;
    }
    if t >= cfg.max_steps {
        return 1.0;
    }
    let c0p = c0.powf(cfg.root);
    let inner = t as f64 * (1.0 - c0p) / cfg.max_steps as f64 + c0p;
    inner.powf(1.0 / cfg.root).clamp(c0, 1.0)
}

/// Size of the eligible ranking prefix: `ceil(c(t) * n)` clamped to `[1, n]`.
pub fn eligible_count(t: u64, cfg: &ScheduleConfig, n: usize) -> usize {
    ((competence(t, cfg) * n as f64).ceil() as usize).clamp(1, n.max(1))
}

fn step_rng(seed: u64, t: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub step: u64,
    pub ids: Vec<SentenceId>,
    /// Set when the eligible prefix was smaller than the batch, forcing repeats.
    pub with_replacement: bool,
}

/// Draws the batch for step `t` from the eligible prefix of the ranking.
pub fn sample_batch(t: u64, ranking: &Ranking, cfg: &ScheduleConfig) -> Batch {
    let eligible = eligible_count(t, cfg, ranking.len());
    let order = ranking.order();
    let mut rng = step_rng(cfg.seed, t);
    if eligible < cfg.batch_size {
        let ids = (0..cfg.batch_size)
            .map(|_| order[rng.random_range(0..eligible)])
            .collect();
        return Batch {
            step: t,
            ids,
            with_replacement: true,
        };
    }
    let ids = rand::seq::index::sample(&mut rng, eligible, cfg.batch_size)
        .into_iter()
        .map(|i| order[i])
        .collect();
    Batch {
        step: t,
        ids,
        with_replacement: false,
    }
}

/// Hex digest of the schedule parameters and the ranking they apply to.
pub fn schedule_fingerprint(ranking: &Ranking, cfg: &ScheduleConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"root-p-schedule/v1");
    h.update(cfg.initial_competence.to_le_bytes());
    h.update(cfg.root.to_le_bytes());
    h.update(cfg.max_steps.to_le_bytes());
    h.update((cfg.batch_size as u64).to_le_bytes());
    h.update(cfg.seed.to_le_bytes());
    h.update(cfg.emit_steps.to_le_bytes());
    for id in ranking.order() {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitSummary {
    pub fingerprint: String,
    pub steps: u64,
    /// Steps whose batch had to be drawn with replacement.
    pub degenerate_steps: u64,
}

/// Streams the manifest for `cfg.emit_steps` steps to `w`.
///
/// Steps are generated in parallel chunks and written in order, so memory use
/// does not grow with the number of steps.
pub fn emit_manifest<W: Write>(ranking: &Ranking, cfg: &ScheduleConfig, w: W) -> Result<EmitSummary> {
    emit_manifest_tagged(ranking, cfg, &schedule_fingerprint(ranking, cfg), w)
}

/// As [`emit_manifest`], with a caller-chosen fingerprint in the header.
pub fn emit_manifest_tagged<W: Write>(
    ranking: &Ranking,
    cfg: &ScheduleConfig,
    fingerprint: &str,
    mut w: W,
) -> Result<EmitSummary> {
    cfg.validate()?;
    if ranking.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let fingerprint = fingerprint.to_owned();
    writeln!(w, "#fingerprint={fingerprint}")?;
    let threads = rayon::current_num_threads() as u64;
    let mut degenerate_steps = 0;
    let mut start = 0;
    while start < cfg.emit_steps {
        let end = (start + EMIT_CHUNK * threads).min(cfg.emit_steps);
        let chunks: Vec<(u64, u64)> = (start..end)
            .step_by(EMIT_CHUNK as usize)
            .map(|s| (s, (s + EMIT_CHUNK).min(end)))
            .collect();
        let rendered: Vec<(String, u64)> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut buf = String::new();
                let mut degenerate = 0;
                for t in s..e {
                    let batch = sample_batch(t, ranking, cfg);
                    degenerate += batch.with_replacement as u64;
                    write!(buf, "{t}\t").unwrap();
                    for (i, id) in batch.ids.iter().enumerate() {
                        if i > 0 {
                            buf.push(' ');
                        }
                        write!(buf, "{id}").unwrap();
                    }
                    buf.push('\n');
                }
                (buf, degenerate)
            })
            .collect();
        for (i, (buf, degenerate)) in rendered.into_iter().enumerate() {
            w.write_all(buf.as_bytes())
                .map_err(|e| Error::Data(format!("writing manifest at step {}: {e}", chunks[i].0)))?;
            degenerate_steps += degenerate;
        }
        start = end;
    }
    w.flush()?;
    Ok(EmitSummary {
        fingerprint,
        steps: cfg.emit_steps,
        degenerate_steps,
    })
}

/// A manifest held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchManifest {
    pub fingerprint: String,
    pub batches: Vec<Batch>,
}

impl BatchManifest {
    pub fn generate(ranking: &Ranking, cfg: &ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        let batches = (0..cfg.emit_steps)
            .into_par_iter()
            .map(|t| sample_batch(t, ranking, cfg))
            .collect();
        Ok(Self {
            fingerprint: schedule_fingerprint(ranking, cfg),
            batches,
        })
    }

    /// Parses a manifest file. `with_replacement` is not stored on disk and
    /// is reported as `false`.
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut fingerprint = String::new();
        let mut batches = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(fp) = line.strip_prefix("#fingerprint=") {
                fingerprint = fp.to_owned();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::parse(path, i + 1, "malformed manifest line");
            let (t, ids) = line.split_once('\t').ok_or_else(bad)?;
            let step = t.parse().map_err(|_| bad())?;
            let ids = ids
                .split(' ')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<Vec<SentenceId>>>()?;
            batches.push(Batch {
                step,
                ids,
                with_replacement: false,
            });
        }
        Ok(Self { fingerprint, batches })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: u64,
    pub sentence_id: SentenceId,
    pub rank: Option<usize>,
    pub eligible: usize,
}

/// Checks every manifest entry against the eligible prefix of its step and
/// the configured batch size. Returns all offending entries.
pub fn validate_manifest(manifest: &BatchManifest, ranking: &Ranking, cfg: &ScheduleConfig) -> Vec<Violation> {
    let positions = ranking.positions();
    let positions = &positions;
    let n = ranking.len();
    manifest
        .batches
        .par_iter()
        .flat_map_iter(|b| {
            let eligible = eligible_count(b.step, cfg, n);
            let size_violation = (b.ids.len() != cfg.batch_size).then_some(Violation {
                step: b.step,
                sentence_id: SentenceId::MAX,
                rank: None,
                eligible,
            });
            b.ids
                .iter()
                .filter_map(move |&id| {
                    let rank = positions.get(id as usize).copied();
                    match rank {
                        Some(r) if r < eligible => None,
                        _ => Some(Violation {
                            step: b.step,
                            sentence_id: id,
                            rank,
                            eligible,
                        }),
                    }
                })
                .chain(size_violation)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(n: u32) -> Ranking {
        Ranking::from_order((0..n).rev().collect()).unwrap()
    }

    #[test]
    fn competence_boundaries() {
        let cfg = ScheduleConfig::default();
        assert_eq!(competence(0, &cfg), 0.01);
        assert_eq!(competence(cfg.max_steps, &cfg), 1.0);
        assert_eq!(competence(cfg.max_steps * 3, &cfg), 1.0);
    }

    #[test]
    fn competence_midpoint() {
        // 40-digit evaluation of (0.5 (1 - 1e-20) + 1e-20)^0.1 at t = T/2.
        let cfg = ScheduleConfig {
            max_steps: 150_000,
            ..Default::default()
        };
        assert!((competence(75_000, &cfg) - 0.933_032_991_536_807_4).abs() < 1e-12);
    }

    #[test]
    fn eligible_counts() {
        let cfg = ScheduleConfig::default();
        assert_eq!(eligible_count(0, &cfg, 918_980), 9190);
        assert_eq!(eligible_count(cfg.max_steps, &cfg, 918_980), 918_980);
        for t in [0, 10, 1000, 200_000] {
            assert_eq!(eligible_count(t, &cfg, 1), 1);
        }
    }

    #[test]
    fn full_prefix_batch_is_the_prefix() {
        let r = ranking(3200);
        let cfg = ScheduleConfig::default();
        let b = sample_batch(0, &r, &cfg);
        assert!(!b.with_replacement);
        let mut got = b.ids.clone();
        got.sort_unstable();
        let mut want: Vec<u32> = r.order()[..32].to_vec();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn small_prefix_samples_with_replacement() {
        let r = ranking(100);
        let b = sample_batch(0, &r, &ScheduleConfig::default());
        assert!(b.with_replacement);
        assert_eq!(b.ids.len(), 32);
        assert!(b.ids.iter().all(|&id| id == 99));
    }

    #[test]
    fn single_step_manifest() {
        let r = ranking(5000);
        let cfg = ScheduleConfig {
            emit_steps: 1,
            ..Default::default()
        };
        let mut out = Vec::new();
        let summary = emit_manifest(&r, &cfg, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], format!("#fingerprint={}", summary.fingerprint));
        let ids: Vec<u32> = lines[1]
            .split_once('\t')
            .unwrap()
            .1
            .split(' ')
            .map(|x| x.parse().unwrap())
            .collect();
        assert_eq!(ids.len(), 32);
        let positions = r.positions();
        assert!(ids.iter().all(|&id| positions[id as usize] < 50));
    }

    #[test]
    fn streaming_and_in_memory_agree() {
        let r = ranking(777);
        let cfg = ScheduleConfig {
            max_steps: 300,
            emit_steps: 5000,
            batch_size: 8,
            seed: 9,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        emit_manifest(&r, &cfg, fs::File::create(&p).unwrap()).unwrap();
        let read = BatchManifest::read(&p).unwrap();
        let mut mem = BatchManifest::generate(&r, &cfg).unwrap();
        for b in &mut mem.batches {
            b.with_replacement = false;
        }
        assert_eq!(read, mem);
        assert!(validate_manifest(&read, &r, &cfg).is_empty());
    }

    #[test]
    fn validator_flags_ineligible_ids() {
        let r = ranking(1000);
        let cfg = ScheduleConfig {
            batch_size: 2,
            ..Default::default()
        };
        let m = BatchManifest {
            fingerprint: String::new(),
            batches: vec![Batch {
                step: 0,
                ids: vec![999, 0],
                with_replacement: false,
            }],
        };
        let v = validate_manifest(&m, &r, &cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].sentence_id, 0);
        assert_eq!(v[0].rank, Some(999));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ScheduleConfig {
                initial_competence: 0.0,
                ..Default::default()
            },
            ScheduleConfig {
                initial_competence: 1.5,
                ..Default::default()
            },
            ScheduleConfig {
                root: 0.5,
                ..Default::default()
            },
            ScheduleConfig {
                max_steps: 0,
                ..Default::default()
            },
            ScheduleConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    proptest! {
        #[test]
        fn competence_is_monotone(
            c0 in 0.001f64..1.0,
            p in 1.0f64..20.0,
            max_steps in 1u64..1_000_000,
            a in 0u64..2_000_000,
            b in 0u64..2_000_000,
        ) {
            let cfg = ScheduleConfig { initial_competence: c0, root: p, max_steps, ..Default::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(competence(lo, &cfg) <= competence(hi, &cfg));
            prop_assert!(eligible_count(lo, &cfg, 1000) <= eligible_count(hi, &cfg, 1000));
        }

        #[test]
        fn batches_are_deterministic_and_eligible(seed in any::<u64>(), t in 0u64..200_000) {
            let r = ranking(20_000);
            let cfg = ScheduleConfig { seed, ..Default::default() };
            let a = sample_batch(t, &r, &cfg);
            prop_assert_eq!(&a, &sample_batch(t, &r, &cfg));
            let eligible = eligible_count(t, &cfg, r.len());
            let pos = r.positions();
            prop_assert!(a.ids.iter().all(|&id| pos[id as usize] < eligible));
            let mut uniq = a.ids.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), a.ids.len());
        }
    }
}
