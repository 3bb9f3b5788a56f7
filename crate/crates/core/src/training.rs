//! Frequency-aware path weights, the contrastive objectives and the training
//! loop for [`CrossAttentiveScorer`].
//!
//! Each relation signature gets a raw weight `N_class / n_i` (its inverse
//! occurrence count scaled by the size of its class), and the raw weights of
//! a class are affinely mapped onto `[w_min, w_max]`. The weighted objective
//! for one instance is
//!
//! ```text
//! -ln( w_pos·e^{s_pos} / (w_pos·e^{s_pos} + Σ_j w_j·e^{s_j}) )
//! ```
//!
//! over the `k` negatives the current model scores highest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{signature_of_serialized, Signature};
use crate::mining::InstanceRecord;
use crate::scorer::{CrossAttentiveScorer, Forward, PathScorer};
use crate::tensor::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathClass {
    Positive,
    Negative,
}

/// Occurrence counts per relation signature, per class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceCounts {
    pub positive: BTreeMap<Signature, usize>,
    pub negative: BTreeMap<Signature, usize>,
}

impl OccurrenceCounts {
    pub fn class(&self, c: PathClass) -> &BTreeMap<Signature, usize> {
        match c {
            PathClass::Positive => &self.positive,
            PathClass::Negative => &self.negative,
        }
    }

    pub fn n_pos(&self) -> usize {
        self.positive.values().sum()
    }

    pub fn n_neg(&self) -> usize {
        self.negative.values().sum()
    }
}

/// Counts signatures over a corpus. A positive path is counted once per
/// query no matter how many of its hops were perturbed; every negative is
/// counted where it occurs.
pub fn count_occurrences(records: &[InstanceRecord]) -> Result<OccurrenceCounts> {
    if records.is_empty() {
        return Err(Error::invalid(
            "cannot count occurrences over an empty corpus",
        ));
    }
    let mut counts = OccurrenceCounts::default();
    let mut seen_pos: HashSet<(&str, &str)> = HashSet::new();
    for r in records {
        if seen_pos.insert((&r.qid, &r.positive)) {
            *counts.positive.entry(r.positive_signature()).or_default() += 1;
        }
        for n in r.negatives() {
            *counts
                .negative
                .entry(signature_of_serialized(n))
                .or_default() += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub signature: Signature,
    pub class: PathClass,
    pub count: usize,
    pub raw: f64,
    pub weight: f64,
}

/// Rescaled weight per signature and class. Unknown signatures get 1.0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathWeights {
    pub samples: Vec<WeightedSample>,
    #[serde(skip)]
    index: BTreeMap<(PathClass, Signature), f64>,
}

impl PathWeights {
    fn from_samples(samples: Vec<WeightedSample>) -> Self {
        let index = samples
            .iter()
            .map(|s| ((s.class, s.signature.clone()), s.weight))
            .collect();
        PathWeights { samples, index }
    }

    pub fn get(&self, class: PathClass, sig: &Signature) -> f64 {
        self.index
            .get(&(class, sig.clone()))
            .copied()
            .unwrap_or(1.0)
    }

    pub fn uniform() -> Self {
        PathWeights::default()
    }
}

/// Weight bounds `[w_min, w_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightBounds {
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for WeightBounds {
    fn default() -> Self {
        WeightBounds {
            w_min: 0.5,
            w_max: 3.0,
        }
    }
}

/// `raw = N_class / n_i`, then a per-class min–max map onto the bounds. A
/// class whose raw weights are all equal gets weight 1.0 throughout.
pub fn compute_weights(counts: &OccurrenceCounts, bounds: WeightBounds) -> Result<PathWeights> {
    if !(bounds.w_min > 0.0 && bounds.w_min <= bounds.w_max) {
        return Err(Error::invalid("weight bounds need 0 < w_min <= w_max"));
    }
    let mut samples = Vec::new();
    for class in [PathClass::Positive, PathClass::Negative] {
        let by_sig = counts.class(class);
        let total: usize = by_sig.values().sum();
        if total == 0 {
            continue;
        }
        let raws: Vec<f64> = by_sig.values().map(|n| total as f64 / *n as f64).collect();
        let lo = raws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for ((sig, n), raw) in by_sig.iter().zip(raws) {
            let weight = if hi > lo {
                let t = (raw - lo) / (hi - lo);
                (bounds.w_min + (bounds.w_max - bounds.w_min) * t).clamp(bounds.w_min, bounds.w_max)
            } else {
                1.0
            };
            samples.push(WeightedSample {
                signature: sig.clone(),
                class,
                count: *n,
                raw,
                weight,
            });
        }
    }
    Ok(PathWeights::from_samples(samples))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of the positive against `{positive} ∪ negatives`.
pub fn contrastive_loss(s_pos: f64, negatives: &[f64]) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(s_pos);
    all.extend_from_slice(negatives);
    (log_sum_exp(&all) - s_pos).max(0.0)
}

fn weighted_logits(s_pos: f64, w_pos: f64, negatives: &[(f64, f64)]) -> Result<Vec<f64>> {
    if w_pos <= 0.0 || negatives.iter().any(|(_, w)| *w <= 0.0) {
        return Err(Error::invalid("path weights must be positive"));
    }
    let mut z = Vec::with_capacity(negatives.len() + 1);
    z.push(w_pos.ln() + s_pos);
    z.extend(negatives.iter().map(|(s, w)| w.ln() + s));
    Ok(z)
}

/// Weighted contrastive loss; equals [`contrastive_loss`] when every weight is 1.
pub fn weighted_contrastive_loss(s_pos: f64, w_pos: f64, negatives: &[(f64, f64)]) -> Result<f64> {
    let z = weighted_logits(s_pos, w_pos, negatives)?;
    if negatives.is_empty() {
        return Ok(0.0);
    }
    Ok((log_sum_exp(&z) - z[0]).max(0.0))
}

/// Loss plus its derivatives with respect to `s_pos` and each negative score.
pub fn weighted_loss_with_grad(
    s_pos: f64,
    w_pos: f64,
    negatives: &[(f64, f64)],
) -> Result<(f64, f64, Vec<f64>)> {
    let z = weighted_logits(s_pos, w_pos, negatives)?;
    if negatives.is_empty() {
        return Ok((0.0, 0.0, Vec::new()));
    }
    let lse = log_sum_exp(&z);
    let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    Ok((lse - z[0], probs[0] - 1.0, probs[1..].to_vec()))
}

/// The `k` highest-scoring negatives; ties break on the serialization.
pub fn select_topk_negatives(
    scorer: &dyn PathScorer,
    query: &str,
    negatives: &[&str],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if negatives.is_empty() {
        return Ok(Vec::new());
    }
    let owned: Vec<String> = negatives.iter().map(|s| s.to_string()).collect();
    let scores = scorer.score_paths(query, &owned)?;
    Ok(top_k_scored(owned.into_iter().zip(scores).collect(), k))
}

pub(crate) fn top_k_scored(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Which scorer output enters the loss as `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// The sigmoid output in `(0, 1)`.
    Probability,
    /// The pre-sigmoid value; ranks identically and does not saturate.
    #[default]
    Logit,
}

impl ScoreSpace {
    fn output(self, f: &Forward) -> Var {
        match self {
            ScoreSpace::Probability => f.score,
            ScoreSpace::Logit => f.logit,
        }
    }

    pub fn eval(self, scorer: &CrossAttentiveScorer, query: &str, path: &str) -> Result<f64> {
        match self {
            ScoreSpace::Probability => scorer.score(query, path),
            ScoreSpace::Logit => scorer.logit(query, path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Negatives per instance in the loss (`N_K`).
    pub k_negatives: usize,
    pub bounds: WeightBounds,
    /// When false every weight is 1 (unweighted objective).
    pub weighted: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub train_ratio: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub score_space: ScoreSpace,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            k_negatives: 15,
            bounds: WeightBounds::default(),
            weighted: true,
            learning_rate: 3e-5,
            epochs: 50,
            train_ratio: 0.9,
            seed: 0,
            batch_size: 16,
            score_space: ScoreSpace::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::invalid("train_ratio must lie in (0, 1)"));
        }
        if self.bounds.w_min > self.bounds.w_max {
            return Err(Error::invalid("w_min must not exceed w_max"));
        }
        if self.k_negatives == 0 || self.batch_size == 0 {
            return Err(Error::invalid("k_negatives and batch_size must be >= 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// An instance with its negatives already chosen and weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub query: String,
    pub positive: String,
    pub w_pos: f64,
    pub negatives: Vec<(String, f64)>,
}

/// Mean weighted loss over `batch` and its gradient with respect to every
/// scorer parameter.
pub fn loss_and_gradient(
    scorer: &CrossAttentiveScorer,
    batch: &[PreparedInstance],
    space: ScoreSpace,
) -> Result<(f64, Vec<Mat>)> {
    let mut grads = scorer.params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for inst in batch {
        let mut tapes = Vec::with_capacity(inst.negatives.len() + 1);
        for text in std::iter::once(&inst.positive).chain(inst.negatives.iter().map(|(t, _)| t)) {
            let seq = scorer.build_input_sequence(&inst.query, text)?;
            let mut tape = Tape::new(&scorer.params.tensors);
            let out = space.output(&scorer.forward(&mut tape, &seq));
            tapes.push((tape, out));
        }
        let s: Vec<f64> = tapes.iter().map(|(t, v)| t.value(*v).data[0]).collect();
        let negs: Vec<(f64, f64)> = s[1..]
            .iter()
            .zip(&inst.negatives)
            .map(|(sv, (_, w))| (*sv, *w))
            .collect();
        let (loss, d_pos, d_negs) = weighted_loss_with_grad(s[0], inst.w_pos, &negs)?;
        total += loss * scale;
        for ((tape, out), d) in tapes.iter().zip(std::iter::once(d_pos).chain(d_negs)) {
            if d != 0.0 {
                tape.backward(*out, Mat::from_vec(1, 1, vec![d * scale]), &mut grads);
            }
        }
    }
    Ok((total, grads))
}

/// Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, like: &[Mat]) -> Self {
        let zeros: Vec<Mat> = like.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                if gi == 0.0 && m.data[i] == 0.0 {
                    continue;
                }
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_instances: usize,
    pub val_instances: usize,
    pub weights: PathWeights,
}

/// Splits records by query id: the first `ratio` share of shuffled qids train.
pub fn split_by_query(
    records: &[InstanceRecord],
    ratio: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let qids: BTreeSet<&str> = records.iter().map(|r| r.qid.as_str()).collect();
    let mut qids: Vec<&str> = qids.into_iter().collect();
    qids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train =
        ((qids.len() as f64 * ratio).round() as usize).clamp(1.min(qids.len()), qids.len());
    let train_q: HashSet<&str> = qids[..n_train].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if train_q.contains(r.qid.as_str()) {
            tr.push(i);
        } else {
            va.push(i);
        }
    }
    (tr, va)
}

struct Prepared<'a> {
    record: &'a InstanceRecord,
    positive: String,
    w_pos: f64,
    negatives: Vec<(&'a str, f64)>,
}

fn prepare<'a>(
    records: &'a [InstanceRecord],
    idx: &[usize],
    weights: &PathWeights,
) -> Vec<Prepared<'a>> {
    idx.iter()
        .map(|i| {
            let r = &records[*i];
            Prepared {
                record: r,
                positive: r.positive_target(),
                w_pos: weights.get(PathClass::Positive, &r.positive_signature()),
                negatives: r
                    .negatives()
                    .into_iter()
                    .map(|n| {
                        (
                            n,
                            weights.get(PathClass::Negative, &signature_of_serialized(n)),
                        )
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Chooses `N_K` with the current model. Returns the instance and its loss at
/// the current parameters.
fn select(
    scorer: &CrossAttentiveScorer,
    p: &Prepared<'_>,
    k: usize,
    space: ScoreSpace,
) -> Result<(PreparedInstance, f64)> {
    let q = &p.record.question;
    let s_pos = space.eval(scorer, q, &p.positive)?;
    let mut scored = Vec::with_capacity(p.negatives.len());
    for (text, w) in &p.negatives {
        scored.push(((*text).to_string(), space.eval(scorer, q, text)?, *w));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    let loss = weighted_contrastive_loss(
        s_pos,
        p.w_pos,
        &scored.iter().map(|(_, s, w)| (*s, *w)).collect::<Vec<_>>(),
    )?;
    Ok((
        PreparedInstance {
            query: q.clone(),
            positive: p.positive.clone(),
            w_pos: p.w_pos,
            negatives: scored.into_iter().map(|(t, _, w)| (t, w)).collect(),
        },
        loss,
    ))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Minimizes the mean weighted loss. `N_K` is re-selected with the current
/// model at the start of every epoch; the parameters with the lowest
/// validation loss (epoch 0 included) are left in `scorer`.
pub fn train(
    records: &[InstanceRecord],
    cfg: &TrainingConfig,
    scorer: &mut CrossAttentiveScorer,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let (train_idx, val_idx) = split_by_query(records, cfg.train_ratio, cfg.seed);
    let weights = if cfg.weighted {
        let train_records: Vec<InstanceRecord> =
            train_idx.iter().map(|i| records[*i].clone()).collect();
        compute_weights(&count_occurrences(&train_records)?, cfg.bounds)?
    } else {
        PathWeights::uniform()
    };
    let train_set = prepare(records, &train_idx, &weights);
    let val_set = prepare(records, &val_idx, &weights);

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.learning_rate, &scorer.params.tensors);
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut best = (0usize, f64::INFINITY, scorer.params.tensors.clone());

    let mut train_loss = f64::NAN;
    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            let mut selected = train_set
                .iter()
                .map(|p| select(scorer, p, cfg.k_negatives, cfg.score_space).map(|(inst, _)| inst))
                .collect::<Result<Vec<_>>>()?;
            selected.shuffle(&mut rng);
            let mut batch_losses = Vec::new();
            for batch in selected.chunks(cfg.batch_size) {
                let (loss, grads) = loss_and_gradient(scorer, batch, cfg.score_space)?;
                if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("batch loss {loss}"),
                    });
                }
                batch_losses.push(loss);
                adam.update(&mut scorer.params.tensors, &grads);
            }
            train_loss = mean(&batch_losses);
        }
        let val_source = if val_set.is_empty() {
            &train_set
        } else {
            &val_set
        };
        let val_loss = mean(
            &val_source
                .iter()
                .map(|p| select(scorer, p, cfg.k_negatives, cfg.score_space).map(|(_, l)| l))
                .collect::<Result<Vec<f64>>>()?,
        );
        if epoch == 0 {
            // the untrained model's loss on the training split
            train_loss = mean(
                &train_set
                    .iter()
                    .map(|p| select(scorer, p, cfg.k_negatives, cfg.score_space).map(|(_, l)| l))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        if val_loss < best.1 {
            best = (epoch, val_loss, scorer.params.tensors.clone());
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    scorer.params.tensors = best.2;
    Ok(TrainingReport {
        log,
        best_epoch: best.0,
        best_val_loss: best.1,
        train_instances: train_set.len(),
        val_instances: val_set.len(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(xs: &[&str]) -> Signature {
        Signature(xs.iter().map(|s| s.to_string()).collect())
    }

    fn record(qid: &str, positive: &str, hop: usize, negs: &[&str]) -> InstanceRecord {
        InstanceRecord {
            qid: qid.into(),
            question: "q".into(),
            positive: positive.into(),
            hop,
            hard: negs.iter().map(|s| s.to_string()).collect(),
            normal: Vec::new(),
        }
    }

    #[test]
    fn counts_positive_once_per_query() {
        let recs = vec![
            record("a", "t [SEP] r1 [SEP] r2", 1, &["t [SEP] x"]),
            record("a", "t [SEP] r1 [SEP] r2", 2, &["t [SEP] r1 [SEP] y"]),
            record("b", "u [SEP] r1 [SEP] r2", 1, &["u [SEP] x"]),
            record("c", "u [SEP] r1 [SEP] r2 [SEP] [EOP]", 1, &[]),
        ];
        let c = count_occurrences(&recs).unwrap();
        assert_eq!(c.positive[&sig(&["r1", "r2"])], 3);
        assert_eq!(c.n_pos(), 3);
        assert_eq!(c.negative[&sig(&["x"])], 2);
        assert_eq!(c.n_neg(), 3);
        assert!(count_occurrences(&[]).is_err());
    }

    #[test]
    fn hand_derived_weights() {
        // counts {1, 2, 4, 8}: N = 15, raw = {15, 7.5, 3.75, 1.875}
        // w = 0.5 + 2.5 (raw - 1.875) / 13.125 = {3, 11/7, 6/7, 0.5}
        let mut c = OccurrenceCounts::default();
        for (s, n) in [("a", 1), ("b", 2), ("c", 4), ("d", 8)] {
            c.positive.insert(sig(&[s]), n);
        }
        let w = compute_weights(&c, WeightBounds::default()).unwrap();
        let get = |s: &str| w.get(PathClass::Positive, &sig(&[s]));
        assert_eq!(get("a"), 3.0);
        assert!((get("b") - 11.0 / 7.0).abs() < 1e-15);
        assert!((get("c") - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(get("d"), 0.5);
    }

    #[test]
    fn equal_frequencies_are_neutral() {
        let mut c = OccurrenceCounts::default();
        c.positive.insert(sig(&["a"]), 2);
        c.positive.insert(sig(&["b"]), 2);
        let w = compute_weights(&c, WeightBounds::default()).unwrap();
        assert_eq!(w.get(PathClass::Positive, &sig(&["a"])), 1.0);
        // negative class empty: nothing computed, lookups neutral
        assert!(w.samples.iter().all(|s| s.class == PathClass::Positive));
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(contrastive_loss(0.3, &[]), 0.0);
        assert!((contrastive_loss(0.4, &[0.4]) - 2f64.ln()).abs() < 1e-9);
        let l = weighted_contrastive_loss(0.7, 3.0, &[(0.7, 0.5)]).unwrap();
        assert!((l + (3.0f64 / 3.5).ln()).abs() < 1e-9);
        assert!(weighted_contrastive_loss(0.1, 0.0, &[(0.2, 1.0)]).is_err());
        assert!(weighted_contrastive_loss(0.1, 1.0, &[(0.2, -1.0)]).is_err());
    }

    #[test]
    fn loss_monotone_in_positive_score_and_weight() {
        let negs = [0.2, 0.5, 0.9];
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let l = contrastive_loss(i as f64 * 0.5, &negs);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-9);
        let wn: Vec<(f64, f64)> = negs.iter().map(|s| (*s, 1.0)).collect();
        let mut prev = f64::INFINITY;
        for i in 1..30 {
            let l = weighted_contrastive_loss(0.5, i as f64 * 0.25, &wn).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn analytic_loss_gradient_matches_differences() {
        let negs = [(0.1, 0.5), (0.8, 2.0), (0.4, 1.0)];
        let (_, dp, dn) = weighted_loss_with_grad(0.3, 1.5, &negs).unwrap();
        let h = 1e-6;
        let f = |sp: f64, n: &[(f64, f64)]| weighted_contrastive_loss(sp, 1.5, n).unwrap();
        assert!(((f(0.3 + h, &negs) - f(0.3 - h, &negs)) / (2.0 * h) - dp).abs() < 1e-8);
        for j in 0..3 {
            let mut up = negs;
            let mut dn_ = negs;
            up[j].0 += h;
            dn_[j].0 -= h;
            assert!(((f(0.3, &up) - f(0.3, &dn_)) / (2.0 * h) - dn[j]).abs() < 1e-8);
        }
    }

    struct Fixed(BTreeMap<String, f64>);

    impl PathScorer for Fixed {
        fn score_paths(&self, _q: &str, paths: &[String]) -> Result<Vec<f64>> {
            Ok(paths.iter().map(|p| self.0[p]).collect())
        }
    }

    #[test]
    fn topk_negative_selection() {
        let scores: BTreeMap<String, f64> = [("a", 0.1), ("b", 0.9), ("c", 0.5), ("d", 0.5)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let s = Fixed(scores);
        let negs = ["a", "b", "c", "d"];
        let top = select_topk_negatives(&s, "q", &negs, 3).unwrap();
        let names: Vec<&str> = top.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["b", "c", "d"]);
        assert_eq!(select_topk_negatives(&s, "q", &negs, 10).unwrap().len(), 4);
        let tied = Fixed(negs.iter().map(|n| (n.to_string(), 0.5)).collect());
        let top = select_topk_negatives(&tied, "q", &["d", "c", "b", "a"], 2).unwrap();
        assert_eq!(
            top.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            vec!["a", "b"]
        );
    }

    #[test]
    fn split_keeps_queries_together() {
        let recs: Vec<InstanceRecord> = (0..20)
            .flat_map(|q| {
                (1..=2).map(move |h| record(&format!("q{q}"), "t [SEP] r", h, &["t [SEP] x"]))
            })
            .collect();
        let (tr, va) = split_by_query(&recs, 0.9, 4);
        assert_eq!(tr.len(), 36);
        assert_eq!(va.len(), 4);
        let tq: HashSet<&str> = tr.iter().map(|i| recs[*i].qid.as_str()).collect();
        assert!(va.iter().all(|i| !tq.contains(recs[*i].qid.as_str())));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainingConfig {
            train_ratio: 1.0,
            ..TrainingConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
