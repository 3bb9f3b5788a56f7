//! Answer metrics (Hits@1, F1, retrieval time) and retrieval-bias
//! diagnostics: shortcut ratio, long-tail ratio and their union over the
//! error set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{signature_of_serialized, Signature};
use crate::similarity::SimilarityModel;

/// Lowercase, trim whitespace and strip leading/trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
}

fn normalized_set(xs: &[String]) -> BTreeSet<String> {
    xs.iter()
        .map(|s| normalize_answer(s))
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub qid: String,
    pub question: String,
    /// Ranked predictions; the first is the top-ranked one.
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub top1_path: String,
    pub retrieval_secs: f64,
    pub correct: bool,
}

impl EvalRecord {
    pub fn new(
        qid: &str,
        question: &str,
        predicted: Vec<String>,
        gold: Vec<String>,
        top1_path: &str,
        retrieval_secs: f64,
    ) -> Self {
        let gold_set = normalized_set(&gold);
        let correct = predicted
            .first()
            .map(|p| gold_set.contains(&normalize_answer(p)))
            .unwrap_or(false);
        EvalRecord {
            qid: qid.to_string(),
            question: question.to_string(),
            predicted,
            gold,
            top1_path: top1_path.to_string(),
            retrieval_secs,
            correct,
        }
    }
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    Ok(())
}

/// Percentage of records whose top-ranked prediction is a gold answer.
pub fn hits_at_1(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(100.0 * records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Per-query F1 over normalized answer sets (both empty → 1, one empty → 0).
pub fn answer_f1(predicted: &[String], gold: &[String]) -> f64 {
    let (p, g) = (normalized_set(predicted), normalized_set(gold));
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = p.intersection(&g).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (hit / p.len() as f64, hit / g.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

/// Macro-averaged F1, as a percentage.
pub fn f1(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(100.0
        * records
            .iter()
            .map(|r| answer_f1(&r.predicted, &r.gold))
            .sum::<f64>()
        / records.len() as f64)
}

/// Mean retrieval seconds per record.
pub fn retrieval_time(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    if let Some(r) = records
        .iter()
        .find(|r| r.retrieval_secs.is_nan() || r.retrieval_secs < 0.0)
    {
        return Err(Error::invalid(format!(
            "negative retrieval time for {}",
            r.qid
        )));
    }
    Ok(records.iter().map(|r| r.retrieval_secs).sum::<f64>() / records.len() as f64)
}

/// A percentage per correctness subset; `None` when the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetRatios {
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
}

fn subset_ratios(records: &[EvalRecord], flags: &[bool]) -> SubsetRatios {
    let ratio = |want: bool| {
        let (mut hit, mut n) = (0usize, 0usize);
        for (r, f) in records.iter().zip(flags) {
            if r.correct == want {
                n += 1;
                hit += usize::from(*f);
            }
        }
        (n > 0).then(|| 100.0 * hit as f64 / n as f64)
    };
    SubsetRatios {
        correct: ratio(true),
        incorrect: ratio(false),
    }
}

pub fn shortcut_flags(
    records: &[EvalRecord],
    m: &dyn SimilarityModel,
    threshold: f64,
) -> Result<Vec<bool>> {
    records
        .iter()
        .map(|r| Ok(m.sim(&r.question, &r.top1_path)? > threshold))
        .collect()
}

/// Share of each subset whose top-1 path is more similar to the query than
/// `threshold`.
pub fn shortcut_ratio(
    records: &[EvalRecord],
    m: &dyn SimilarityModel,
    threshold: f64,
) -> Result<SubsetRatios> {
    Ok(subset_ratios(
        records,
        &shortcut_flags(records, m, threshold)?,
    ))
}

/// The `⌈fraction · #signatures⌉` least frequent signatures (ties broken by
/// signature order).
pub fn tail_signatures(
    counts: &BTreeMap<Signature, usize>,
    fraction: f64,
) -> Result<BTreeSet<Signature>> {
    if counts.is_empty() {
        return Err(Error::invalid("training counts are empty"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("tail fraction must lie in [0, 1]"));
    }
    let n = (fraction * counts.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut by_freq: Vec<(&Signature, usize)> = counts.iter().map(|(s, c)| (s, *c)).collect();
    by_freq.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(by_freq
        .into_iter()
        .take(n)
        .map(|(s, _)| s.clone())
        .collect())
}

/// Whether each record's top-1 path is a tail path; unseen signatures count
/// as tail.
pub fn tail_flags(
    records: &[EvalRecord],
    counts: &BTreeMap<Signature, usize>,
    fraction: f64,
) -> Result<Vec<bool>> {
    let tail = tail_signatures(counts, fraction)?;
    Ok(records
        .iter()
        .map(|r| {
            let sig = signature_of_serialized(&r.top1_path);
            tail.contains(&sig) || !counts.contains_key(&sig)
        })
        .collect())
}

pub fn long_tail_ratio(
    records: &[EvalRecord],
    counts: &BTreeMap<Signature, usize>,
    fraction: f64,
) -> Result<SubsetRatios> {
    Ok(subset_ratios(
        records,
        &tail_flags(records, counts, fraction)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub shortcut_threshold: f64,
    pub tail_fraction: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            shortcut_threshold: 0.95,
            tail_fraction: 0.20,
        }
    }
}

/// Errors attributed to a bias: percentage of all records and share of the
/// errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorShare {
    pub of_all: f64,
    pub of_errors: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub shortcut: ErrorShare,
    pub long_tail: ErrorShare,
    pub union: ErrorShare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub records: usize,
    pub hits_at_1: f64,
    pub error: f64,
    pub shortcut: SubsetRatios,
    pub long_tail: SubsetRatios,
    pub union: SubsetRatios,
    /// Absent when there are no errors.
    pub errors: Option<ErrorBreakdown>,
}

pub fn bias_report(
    records: &[EvalRecord],
    m: &dyn SimilarityModel,
    counts: &BTreeMap<Signature, usize>,
    cfg: &DiagnosticsConfig,
) -> Result<BiasReport> {
    let hits = hits_at_1(records)?;
    let shortcut = shortcut_flags(records, m, cfg.shortcut_threshold)?;
    let tail = tail_flags(records, counts, cfg.tail_fraction)?;
    Ok(assemble_report(records, &shortcut, &tail, hits))
}

/// Builds the report from precomputed per-record bias flags.
pub fn assemble_report(
    records: &[EvalRecord],
    shortcut: &[bool],
    tail: &[bool],
    hits_at_1: f64,
) -> BiasReport {
    let either: Vec<bool> = shortcut.iter().zip(tail).map(|(a, b)| *a || *b).collect();
    let n = records.len() as f64;
    let wrong: Vec<usize> = (0..records.len())
        .filter(|i| !records[*i].correct)
        .collect();
    let share = |flags: &[bool]| {
        let c = wrong.iter().filter(|i| flags[**i]).count() as f64;
        ErrorShare {
            of_all: 100.0 * c / n,
            of_errors: 100.0 * c / wrong.len() as f64,
        }
    };
    let errors = (!wrong.is_empty()).then(|| ErrorBreakdown {
        shortcut: share(shortcut),
        long_tail: share(tail),
        union: share(&either),
    });
    BiasReport {
        records: records.len(),
        hits_at_1,
        error: 100.0 - hits_at_1,
        shortcut: subset_ratios(records, shortcut),
        long_tail: subset_ratios(records, tail),
        union: subset_ratios(records, &either),
        errors,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad number `{s}`")))
}

impl BiasReport {
    /// Plain-text tables: per-subset bias ratios, then the error breakdown
    /// (percent of all records, share of errors in parentheses).
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# retrieval bias report");
        let _ = writeln!(out, "records {}", self.records);
        let _ = writeln!(out, "hits@1 {}", self.hits_at_1);
        let _ = writeln!(out, "error {}", self.error);
        let _ = writeln!(out);
        let _ = writeln!(out, "subset shortcut long_tail union");
        for (name, pick) in [("correct", true), ("incorrect", false)] {
            let get = |r: &SubsetRatios| if pick { r.correct } else { r.incorrect };
            let _ = writeln!(
                out,
                "{name} {} {} {}",
                fmt_opt(get(&self.shortcut)),
                fmt_opt(get(&self.long_tail)),
                fmt_opt(get(&self.union))
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "errors of_all (of_errors)");
        match &self.errors {
            None => {
                let _ = writeln!(out, "none");
            }
            Some(b) => {
                for (name, s) in [
                    ("shortcut", b.shortcut),
                    ("long_tail", b.long_tail),
                    ("union", b.union),
                ] {
                    let _ = writeln!(out, "{name} {} ({})", s.of_all, s.of_errors);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let bad = || Error::invalid("malformed bias report");
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .map(str::trim)
                .ok_or_else(bad)
        };
        let records = field(1, "records ")?.parse().map_err(|_| bad())?;
        let hits_at_1 = field(2, "hits@1 ")?.parse().map_err(|_| bad())?;
        let error = field(3, "error ")?.parse().map_err(|_| bad())?;
        let row = |i: usize, name: &str| -> Result<[Option<f64>; 3]> {
            let parts: Vec<&str> = field(i, name)?.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok([
                parse_opt(parts[0])?,
                parse_opt(parts[1])?,
                parse_opt(parts[2])?,
            ])
        };
        let c = row(5, "correct ")?;
        let w = row(6, "incorrect ")?;
        let ratios = |k: usize| SubsetRatios {
            correct: c[k],
            incorrect: w[k],
        };
        let errors = if lines.get(8).map(|l| l.trim()) == Some("none") {
            None
        } else {
            let share = |i: usize, name: &str| -> Result<ErrorShare> {
                let rest = field(i, name)?;
                let (a, b) = rest.split_once(' ').ok_or_else(bad)?;
                let b = b.trim().trim_start_matches('(').trim_end_matches(')');
                Ok(ErrorShare {
                    of_all: a.parse().map_err(|_| bad())?,
                    of_errors: b.parse().map_err(|_| bad())?,
                })
            };
            Some(ErrorBreakdown {
                shortcut: share(8, "shortcut ")?,
                long_tail: share(9, "long_tail ")?,
                union: share(10, "union ")?,
            })
        };
        Ok(BiasReport {
            records,
            hits_at_1,
            error,
            shortcut: ratios(0),
            long_tail: ratios(1),
            union: ratios(2),
            errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::HashedBagOfWords;

    fn rec(qid: &str, pred: &[&str], gold: &[&str]) -> EvalRecord {
        EvalRecord::new(
            qid,
            "question",
            pred.iter().map(|s| s.to_string()).collect(),
            gold.iter().map(|s| s.to_string()).collect(),
            "t [SEP] r",
            1.0,
        )
    }

    fn sig(xs: &[&str]) -> Signature {
        Signature(xs.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn hits_cases() {
        let all = vec![
            rec("a", &["France"], &["france"]),
            rec("b", &[" Paris. "], &["paris"]),
        ];
        assert_eq!(hits_at_1(&all).unwrap(), 100.0);
        let two_of_three = vec![
            rec("a", &["x"], &["x"]),
            rec("b", &["y"], &["y"]),
            rec("c", &["y"], &["z"]),
        ];
        assert!((hits_at_1(&two_of_three).unwrap() - 66.67).abs() < 0.01);
        assert!(hits_at_1(&[]).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(answer_f1(&["a".into()], &["a".into()]), 1.0);
        assert_eq!(
            answer_f1(&["a".into(), "b".into()], &["b".into(), "c".into()]),
            0.5
        );
        assert_eq!(answer_f1(&[], &["a".into()]), 0.0);
        assert_eq!(answer_f1(&[], &[]), 1.0);
        let recs = vec![rec("a", &["a", "b"], &["b", "c"])];
        assert_eq!(f1(&recs).unwrap(), 50.0);
        assert!(f1(&[]).is_err());
    }

    #[test]
    fn retrieval_time_cases() {
        let mut a = rec("a", &["x"], &["x"]);
        let mut b = rec("b", &["x"], &["x"]);
        a.retrieval_secs = 0.5;
        b.retrieval_secs = 1.5;
        assert_eq!(retrieval_time(&[a.clone(), b.clone()]).unwrap(), 1.0);
        b.retrieval_secs = -0.1;
        assert!(retrieval_time(&[a, b]).is_err());
    }

    #[test]
    fn verbatim_paths_are_shortcuts() {
        let m = HashedBagOfWords::default();
        let mut r = rec("a", &["x"], &["y"]);
        r.top1_path = r.question.clone();
        let ratios = shortcut_ratio(&[r], &m, 0.95).unwrap();
        assert_eq!(ratios.incorrect, Some(100.0));
        assert_eq!(ratios.correct, None);
    }

    #[test]
    fn tail_set_size_is_ceiling() {
        let counts: BTreeMap<Signature, usize> =
            (0..10).map(|i| (sig(&[&format!("r{i}")]), i + 1)).collect();
        let tail = tail_signatures(&counts, 0.2).unwrap();
        assert_eq!(tail.len(), 2);
        assert!(tail.contains(&sig(&["r0"])) && tail.contains(&sig(&["r1"])));
        assert_eq!(tail_signatures(&counts, 0.25).unwrap().len(), 3);
        assert!(tail_signatures(&BTreeMap::new(), 0.2).is_err());
    }

    #[test]
    fn most_frequent_is_not_tail() {
        let counts: BTreeMap<Signature, usize> =
            [(sig(&["r"]), 9), (sig(&["s"]), 1), (sig(&["u"]), 2)].into();
        let mut a = rec("a", &["x"], &["x"]);
        a.top1_path = "t [SEP] r [SEP] [EOP]".into();
        let mut b = rec("b", &["x"], &["y"]);
        b.top1_path = "t [SEP] r".into();
        let ratios = long_tail_ratio(&[a.clone(), b.clone()], &counts, 0.2).unwrap();
        assert_eq!(ratios.correct, Some(0.0));
        assert_eq!(ratios.incorrect, Some(0.0));
        b.top1_path = "t [SEP] never_seen".into();
        let ratios = long_tail_ratio(&[a, b], &counts, 0.2).unwrap();
        assert_eq!(ratios.incorrect, Some(100.0));
    }

    #[test]
    fn four_error_fixture() {
        // 10 records, 4 wrong: two shortcut-only, one tail-only, one both
        let mut recs: Vec<EvalRecord> = (0..6)
            .map(|i| rec(&format!("c{i}"), &["x"], &["x"]))
            .collect();
        recs.extend((0..4).map(|i| rec(&format!("w{i}"), &["x"], &["y"])));
        let shortcut = [
            false, false, false, false, false, false, true, true, false, true,
        ];
        let tail = [
            false, false, false, false, false, false, false, false, true, true,
        ];
        let r = assemble_report(&recs, &shortcut, &tail, hits_at_1(&recs).unwrap());
        assert_eq!(r.hits_at_1, 60.0);
        assert_eq!(r.error, 40.0);
        let e = r.errors.unwrap();
        assert_eq!((e.shortcut.of_all, e.shortcut.of_errors), (30.0, 75.0));
        assert_eq!((e.long_tail.of_all, e.long_tail.of_errors), (20.0, 50.0));
        assert_eq!((e.union.of_all, e.union.of_errors), (40.0, 100.0));
        assert_eq!(r.shortcut.incorrect, Some(75.0));
        assert_eq!(r.shortcut.correct, Some(0.0));
    }

    #[test]
    fn zero_error_report_and_round_trip() {
        let recs = vec![rec("a", &["x"], &["x"]), rec("b", &["y"], &["y"])];
        let r = assemble_report(&recs, &[true, false], &[false, false], 100.0);
        assert_eq!(r.error, 0.0);
        assert!(r.errors.is_none());
        assert_eq!(r.shortcut.incorrect, None);
        assert_eq!(BiasReport::parse(&r.render()).unwrap(), r);

        let recs = vec![
            rec("a", &["x"], &["x"]),
            rec("b", &["y"], &["z"]),
            rec("c", &["y"], &["z"]),
        ];
        let r = assemble_report(
            &recs,
            &[true, false, true],
            &[false, true, false],
            100.0 / 3.0,
        );
        assert_eq!(BiasReport::parse(&r.render()).unwrap(), r);
    }
}
