//! Surprisal-based evaluation: minimal-pair accuracy and target-region
//! surprisal effects for ambiguous versus unambiguous sentences.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::analysis::csv_field;
use crate::error::{Error, Result};
use crate::stats::{mean, sample_std};
use crate::teacher::SurprisalModel;
use crate::tokenizer::BpeVocab;

pub const DEFAULT_SPILLOVER: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub phenomenon: String,
    pub good: String,
    pub bad: String,
}

/// Total log2-probability of a text, i.e. minus its summed surprisal.
pub fn log_probability<M: SurprisalModel + ?Sized>(model: &M, vocab: &BpeVocab, text: &str) -> f64 {
    -model.surprisals(&vocab.encode(text)).iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub per_phenomenon: BTreeMap<String, Tally>,
    pub overall: Tally,
    /// Whether each input pair was scored correct, in input order.
    pub outcomes: Vec<bool>,
}

impl AccuracyReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "phenomenon,correct,total,accuracy")?;
        for (p, t) in &self.per_phenomenon {
            writeln!(w, "{},{},{},{:.6}", csv_field(p), t.correct, t.total, t.accuracy())?;
        }
        let t = self.overall;
        writeln!(w, "overall,{},{},{:.6}", t.correct, t.total, t.accuracy())?;
        w.flush()?;
        Ok(())
    }
}

/// A pair is correct when the grammatical text has strictly higher total
/// log-probability; ties count as wrong.
pub fn minimal_pair_accuracy<M: SurprisalModel + ?Sized>(
    model: &M,
    vocab: &BpeVocab,
    pairs: &[MinimalPair],
) -> Result<AccuracyReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no minimal pairs to score".into()));
    }
    let mut per_phenomenon: BTreeMap<String, Tally> = BTreeMap::new();
    let mut overall = Tally::default();
    let mut outcomes = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ok = log_probability(model, vocab, &p.good) > log_probability(model, vocab, &p.bad);
        let t = per_phenomenon.entry(p.phenomenon.clone()).or_default();
        t.total += 1;
        t.correct += ok as usize;
        overall.total += 1;
        overall.correct += ok as usize;
        outcomes.push(ok);
    }
    Ok(AccuracyReport {
        per_phenomenon,
        overall,
        outcomes,
    })
}

fn data_lines(path: &Path, header: &str) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(i, l)| !(l.trim().is_empty() || l.starts_with('#') || (*i == 0 && *l == header)))
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

/// Reads a `phenomenon<TAB>good<TAB>bad` file (header optional).
pub fn read_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    data_lines(path, "phenomenon\tgood\tbad")?
        .into_iter()
        .map(|(line, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 3 || cols[1].trim().is_empty() || cols[2].trim().is_empty() {
                return Err(Error::parse(path, line, "expected phenomenon, good and bad texts"));
            }
            Ok(MinimalPair {
                phenomenon: cols[0].to_owned(),
                good: cols[1].to_owned(),
                bad: cols[2].to_owned(),
            })
        })
        .collect()
}

/// A sentence with the character span of its target word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetedText {
    pub text: String,
    /// Character (not byte) offsets of the target word.
    pub target: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SapItem {
    pub construction: String,
    pub ambiguous: TargetedText,
    pub unambiguous: TargetedText,
    /// Whitespace-delimited words after the target included in the region.
    pub spillover: usize,
}

fn char_to_byte(text: &str, c: usize) -> Option<usize> {
    if c == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(c).map(|(b, _)| b)
}

/// Byte range covering the target and the next `spillover` words.
fn region_bytes(t: &TargetedText, spillover: usize) -> std::result::Result<Range<usize>, String> {
    if t.target.start >= t.target.end {
        return Err(format!("empty target span {:?}", t.target));
    }
    let start =
        char_to_byte(&t.text, t.target.start).ok_or_else(|| format!("target start {} beyond text", t.target.start))?;
    let end = char_to_byte(&t.text, t.target.end).ok_or_else(|| format!("target end {} beyond text", t.target.end))?;
    if spillover == 0 {
        return Ok(start..end);
    }
    // End offsets of the whitespace-delimited words after the target.
    let rest = &t.text[end..];
    let mut word_ends = Vec::new();
    let mut in_word = false;
    for (i, ch) in rest.char_indices() {
        if ch.is_whitespace() {
            if in_word {
                word_ends.push(end + i);
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    if in_word {
        word_ends.push(t.text.len());
    }
    match word_ends.get(spillover - 1) {
        Some(&e) => Ok(start..e),
        None => Err(format!(
            "only {} words follow the target, need {spillover}",
            word_ends.len()
        )),
    }
}

/// Token index range covering the byte range, given the tokens' byte spans.
///
/// A token that crosses a boundary is attributed to whichever side holds all
/// of its non-whitespace bytes; if both sides do, the boundary is ambiguous.
fn region_tokens(
    bytes: &[u8],
    spans: &[Range<usize>],
    region: &Range<usize>,
) -> std::result::Result<Range<usize>, String> {
    let has_text = |r: Range<usize>| bytes[r].iter().any(|b| !b.is_ascii_whitespace());
    let mut first = None;
    let mut last = None;
    for (i, s) in spans.iter().enumerate() {
        if s.end <= region.start || s.start >= region.end {
            continue;
        }
        let inside = s.start.max(region.start)..s.end.min(region.end);
        let before = s.start..s.start.max(region.start);
        let after = s.end.min(region.end)..s.end;
        let outside_text = has_text(before.clone()) || has_text(after.clone());
        if outside_text && has_text(inside.clone()) {
            return Err(format!(
                "token {i} spans the region boundary at bytes {}..{}",
                s.start, s.end
            ));
        }
        if outside_text {
            continue;
        }
        first.get_or_insert(i);
        last = Some(i);
    }
    match (first, last) {
        (Some(a), Some(b)) => Ok(a..b + 1),
        _ => Err("region covers no tokens".to_owned()),
    }
}

/// Summed surprisal (bits) over the target-plus-spillover tokens of one text.
pub fn region_surprisal<M: SurprisalModel + ?Sized>(
    model: &M,
    vocab: &BpeVocab,
    text: &TargetedText,
    spillover: usize,
) -> std::result::Result<f64, String> {
    let region = region_bytes(text, spillover)?;
    let ids = vocab.encode(&text.text);
    let mut spans = Vec::with_capacity(ids.len());
    let mut pos = 0;
    for &id in &ids {
        let len = vocab.token_bytes(id).map_or(0, <[u8]>::len);
        spans.push(pos..pos + len);
        pos += len;
    }
    let toks = region_tokens(text.text.as_bytes(), &spans, &region)?;
    let s = model.surprisals(&ids);
    Ok(s[toks].iter().sum())
}

/// Region surprisal in the ambiguous text minus that in the unambiguous one.
pub fn surprisal_effect<M: SurprisalModel + ?Sized>(model: &M, vocab: &BpeVocab, item: &SapItem) -> Result<f64> {
    let err = |which: &str, message: String| Error::Item {
        item: format!("{} ({which})", item.construction),
        message,
    };
    let amb = region_surprisal(model, vocab, &item.ambiguous, item.spillover).map_err(|m| err("ambiguous", m))?;
    let unamb = region_surprisal(model, vocab, &item.unambiguous, item.spillover).map_err(|m| err("unambiguous", m))?;
    Ok(amb - unamb)
}

/// Reads `construction ambiguous unambiguous target_char_start target_char_end spillover`.
///
/// Offsets may be a single number used for both texts or `amb,unamb`.
pub fn read_sap_items(path: &Path) -> Result<Vec<SapItem>> {
    let header = "construction\tambiguous\tunambiguous\ttarget_char_start\ttarget_char_end\tspillover";
    data_lines(path, header)?
        .into_iter()
        .map(|(line, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            let bad = |m: &str| Error::parse(path, line, m.to_owned());
            if cols.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let offsets = |s: &str| -> Result<(usize, usize)> {
                let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| bad("bad character offset"));
                match s.split_once(',') {
                    Some((a, u)) => Ok((parse(a)?, parse(u)?)),
                    None => parse(s).map(|v| (v, v)),
                }
            };
            let (sa, su) = offsets(cols[3])?;
            let (ea, eu) = offsets(cols[4])?;
            let spillover = cols[5].trim().parse().map_err(|_| bad("bad spillover"))?;
            Ok(SapItem {
                construction: cols[0].to_owned(),
                ambiguous: TargetedText {
                    text: cols[1].to_owned(),
                    target: sa..ea,
                },
                unambiguous: TargetedText {
                    text: cols[2].to_owned(),
                    target: su..eu,
                },
                spillover,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionEffect {
    pub construction: String,
    pub mean: f64,
    /// Sample standard deviation over √n; absent for a single item.
    pub standard_error: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectReport {
    pub constructions: Vec<ConstructionEffect>,
}

impl EffectReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "construction,mean_bits,standard_error,count")?;
        for c in &self.constructions {
            let se = c.standard_error.map_or_else(|| "NA".to_owned(), |s| format!("{s:.6}"));
            writeln!(w, "{},{:.6},{se},{}", csv_field(&c.construction), c.mean, c.count)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and standard error of the effects of each construction, ordered by tag.
pub fn aggregate_effects(effects: &[(String, f64)]) -> EffectReport {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (c, v) in effects {
        groups.entry(c).or_default().push(*v);
    }
    EffectReport {
        constructions: groups
            .into_iter()
            .map(|(c, vs)| ConstructionEffect {
                construction: c.to_owned(),
                mean: mean(&vs),
                standard_error: sample_std(&vs).map(|s| s / (vs.len() as f64).sqrt()),
                count: vs.len(),
            })
            .collect(),
    }
}
