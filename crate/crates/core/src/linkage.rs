//! Candidate pairs, Dice scoring, threshold and logistic classifiers, and
//! per-group evaluation.
//!
//! Classifiers only ever see the Dice score. Dummy flags and entity ids are
//! read in [`evaluate`] alone.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;

use crate::analytics::{fairness_loss, LabeledScore};
use crate::blocking::BinnedDataset;
use crate::encoding::{dice_bits, BloomFilter};
use crate::records::GroundTruth;
use crate::{rng, Error, GroupId, Result};

/// Which members of a shared bin are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingScope {
    /// Every A member against every B member.
    #[default]
    CrossProduct,
    /// Only members of the same protected group.
    WithinGroup,
}

/// Group a pair is counted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupAttribution {
    /// The party-A record's group.
    #[default]
    Left,
    /// Both sides' groups when they differ.
    BothSides,
}

#[derive(Debug, Clone, Copy)]
pub struct CandidatePair<'a> {
    pub left: &'a BloomFilter,
    pub right: &'a BloomFilter,
    pub dice_score: f64,
    pub involves_dummy: bool,
    pub group_left: GroupId,
    pub group_right: GroupId,
}

impl<'a> CandidatePair<'a> {
    pub fn new(left: &'a BloomFilter, right: &'a BloomFilter) -> Result<Self> {
        Ok(CandidatePair {
            left,
            right,
            dice_score: dice_bits(&left.bits, &right.bits)?,
            involves_dummy: left.is_dummy || right.is_dummy,
            group_left: left.group,
            group_right: right.group,
        })
    }
}

/// Identity blocking over shared labels, full cross product per bin.
pub fn candidate_pairs<'a>(a: &'a BinnedDataset, b: &'a BinnedDataset) -> Result<Vec<CandidatePair<'a>>> {
    candidate_pairs_scoped(a, b, PairingScope::CrossProduct)
}

pub fn candidate_pairs_scoped<'a>(a: &'a BinnedDataset, b: &'a BinnedDataset, scope: PairingScope) -> Result<Vec<CandidatePair<'a>>> {
    if a.n_l != b.n_l {
        return Err(Error::Dimension { expected: a.n_l, found: b.n_l });
    }
    let shared: Vec<_> = a.bins().filter_map(|ba| b.bin(&ba.label).map(|bb| (ba, bb))).collect();
    let per_bin = shared
        .par_iter()
        .map(|(ba, bb)| {
            let mut out = Vec::new();
            for l in ba.iter() {
                for r in bb.iter() {
                    if scope == PairingScope::WithinGroup && l.group != r.group {
                        continue;
                    }
                    out.push(CandidatePair::new(l, r)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_bin.into_iter().flatten().collect())
}

/// Match iff `dice > threshold`.
pub fn classify_threshold(pairs: &[CandidatePair], threshold: f64) -> Vec<bool> {
    pairs.iter().map(|p| p.dice_score > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { learning_rate: 0.5, max_epochs: 20_000, tolerance: 1e-7 }
    }
}

/// `P(match) = sigmoid(weight * dice + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogisticModel {
    pub weight: f64,
    pub bias: f64,
    pub config: TrainingConfig,
    pub epochs_run: usize,
}

impl LogisticModel {
    pub fn probability(&self, dice: f64) -> f64 {
        sigmoid(self.weight * dice + self.bias)
    }

    /// Dice value where the probability crosses one half.
    pub fn boundary(&self) -> Option<f64> {
        (self.weight != 0.0).then(|| -self.bias / self.weight)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on mean log-loss over the standardised Dice
/// score, starting from zero weights.
pub fn train_logistic(sample: &[(f64, bool)], config: TrainingConfig) -> Result<LogisticModel> {
    let positives = sample.iter().filter(|s| s.1).count();
    if positives == 0 || positives == sample.len() {
        return Err(Error::Training("training sample needs both classes".into()));
    }
    let n = sample.len() as f64;
    let mean = sample.iter().map(|s| s.0).sum::<f64>() / n;
    let sd = (sample.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let (mut w, mut b) = (0.0f64, 0.0f64);
    let mut epochs = 0;
    while epochs < config.max_epochs {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(x, y) in sample {
            let z = (x - mean) / sd;
            let err = sigmoid(w * z + b) - if y { 1.0 } else { 0.0 };
            gw += err * z;
            gb += err;
        }
        gw /= n;
        gb /= n;
        epochs += 1;
        if (gw * gw + gb * gb).sqrt() < config.tolerance {
            break;
        }
        w -= config.learning_rate * gw;
        b -= config.learning_rate * gb;
    }
    let model = LogisticModel { weight: w / sd, bias: b - w * mean / sd, config, epochs_run: epochs };
    if !(model.weight.is_finite() && model.bias.is_finite()) {
        return Err(Error::Training("weights diverged".into()));
    }
    Ok(model)
}

/// Match iff predicted probability `> 0.5`.
pub fn classify_logistic(pairs: &[CandidatePair], model: &LogisticModel) -> Vec<bool> {
    pairs.iter().map(|p| model.probability(p.dice_score) > 0.5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Classifier {
    Threshold { threshold: f64 },
    Logistic { model: LogisticModel },
}

impl Classifier {
    pub fn classify(&self, pairs: &[CandidatePair]) -> Vec<bool> {
        match self {
            Classifier::Threshold { threshold } => classify_threshold(pairs, *threshold),
            Classifier::Logistic { model } => classify_logistic(pairs, model),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Classifier::Threshold { .. } => "threshold",
            Classifier::Logistic { .. } => "logistic",
        }
    }
}

/// Ground-truth label: dummies match nothing.
pub fn true_label(pair: &CandidatePair, truth: &GroundTruth) -> Result<bool> {
    if pair.involves_dummy {
        return Ok(false);
    }
    match (&pair.left.source_entity_id, &pair.right.source_entity_id) {
        (Some(l), Some(r)) => Ok(truth.is_match(l, r)),
        _ => Err(Error::Integrity("original record without an entity id".into())),
    }
}

/// Class-balanced training sample: all sampled matches plus an equal number
/// of non-matches, both drawn uniformly under `seed`.
pub fn training_sample(pairs: &[CandidatePair], truth: &GroundTruth, per_class: usize, seed: u64) -> Result<Vec<(f64, bool)>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in pairs {
        if true_label(p, truth)? {
            pos.push(p.dice_score);
        } else {
            neg.push(p.dice_score);
        }
    }
    let take = per_class.min(pos.len()).min(neg.len());
    let mut r = rng::stream(seed, "linkage/training-sample", &[]);
    let mut pick = |v: &[f64], label: bool| -> Vec<(f64, bool)> {
        let mut idx = index::sample(&mut r, v.len(), take).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| (v[i], label)).collect()
    };
    let mut out = pick(&pos, true);
    out.extend(pick(&neg, false));
    Ok(out)
}

/// Original-only pairs with labels, as input to base-rate estimation.
pub fn labeled_scores(pairs: &[CandidatePair], truth: &GroundTruth) -> Result<Vec<LabeledScore>> {
    pairs
        .iter()
        .filter(|p| !p.involves_dummy)
        .map(|p| Ok(LabeledScore { group: p.group_left, dice: p.dice_score, is_match: true_label(p, truth)? }))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TP / (TP + FP + FN)`.
    pub fn f_star(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GroupReport {
    pub group: GroupId,
    pub confusion: Confusion,
    /// Pairs attributed to the group.
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LinkageReport {
    pub groups: Vec<GroupReport>,
    pub overall: Confusion,
    /// Max FPR/FNR gap across groups with defined rates.
    pub fairness_loss: f64,
    pub fairness: f64,
    /// Number of pairs scored.
    pub cost: u64,
}

impl LinkageReport {
    pub fn group(&self, g: GroupId) -> Option<&GroupReport> {
        self.groups.iter().find(|r| r.group == g)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub attribution: GroupAttribution,
    /// Group count; groups without pairs still get a row.
    pub groups: usize,
    /// Entity ids present in party A and B; original records outside them are an integrity error.
    pub known_ids: Option<(&'a HashSet<&'a str>, &'a HashSet<&'a str>)>,
}

pub fn evaluate(predictions: &[bool], truth: &GroundTruth, pairs: &[CandidatePair], opts: &EvalOptions) -> Result<LinkageReport> {
    if predictions.len() != pairs.len() {
        return Err(Error::Dimension { expected: pairs.len(), found: predictions.len() });
    }
    let max_group = pairs.iter().flat_map(|p| [p.group_left, p.group_right]).map(GroupId::index).max().map_or(0, |m| m + 1);
    let groups = opts.groups.max(max_group);
    let mut per = vec![Confusion::default(); groups];
    let mut overall = Confusion::default();
    for (pair, &pred) in pairs.iter().zip(predictions) {
        if let (Some((ids_a, ids_b)), false) = (opts.known_ids, pair.involves_dummy) {
            for (side, ids) in [(pair.left, ids_a), (pair.right, ids_b)] {
                let id = side.source_entity_id.as_deref().unwrap_or("");
                if !ids.contains(id) {
                    return Err(Error::Integrity(format!("pair references unknown entity {id:?}")));
                }
            }
        }
        let actual = true_label(pair, truth)?;
        overall.add(pred, actual);
        per[pair.group_left.index()].add(pred, actual);
        if opts.attribution == GroupAttribution::BothSides && pair.group_right != pair.group_left {
            per[pair.group_right.index()].add(pred, actual);
        }
    }
    let fprs: Vec<f64> = per.iter().filter_map(Confusion::fpr).collect();
    let fnrs: Vec<f64> = per.iter().filter_map(Confusion::fnr).collect();
    let loss = fairness_loss(&fprs, &fnrs);
    Ok(LinkageReport {
        groups: per.into_iter().enumerate().map(|(i, c)| GroupReport { group: GroupId::from_index(i), cost: c.total(), confusion: c }).collect(),
        overall,
        fairness_loss: loss,
        fairness: 1.0 - loss,
        cost: pairs.len() as u64,
    })
}

/// Run parameters written alongside a report.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReportContext {
    pub scenario: String,
    pub overall_eps: f64,
    pub per_group_eps: Vec<f64>,
    pub per_group_flip: Vec<f64>,
    pub classifier: String,
}

pub const REPORT_COLUMNS: [&str; 19] = [
    "scenario", "overall_eps", "per_group_eps", "per_group_flip", "classifier", "group", "tp", "fp", "tn", "fn", "precision",
    "recall", "f_star", "fpr", "fnr", "fairness_loss", "fairness", "cost", "group_cost",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

/// One row per group plus an `overall` row, in [`REPORT_COLUMNS`] order.
pub fn report_rows(ctx: &ReportContext, report: &LinkageReport) -> Vec<Vec<String>> {
    let row = |group: String, c: &Confusion, group_cost: u64| {
        vec![
            ctx.scenario.clone(),
            format!("{}", ctx.overall_eps),
            join(&ctx.per_group_eps),
            join(&ctx.per_group_flip),
            ctx.classifier.clone(),
            group,
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            fmt_opt(c.precision()),
            fmt_opt(c.recall()),
            fmt_opt(c.f_star()),
            fmt_opt(c.fpr()),
            fmt_opt(c.fnr()),
            format!("{:.6}", report.fairness_loss),
            format!("{:.6}", report.fairness),
            report.cost.to_string(),
            group_cost.to_string(),
        ]
    };
    let mut rows: Vec<Vec<String>> = report.groups.iter().map(|g| row(g.group.to_string(), &g.confusion, g.cost)).collect();
    rows.push(row("overall".into(), &report.overall, report.cost));
    rows
}

pub fn write_report_csv(path: &Path, ctx: &ReportContext, report: &LinkageReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in report_rows(ctx, report) {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_text(ctx: &ReportContext, report: &LinkageReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scenario {}  eps {}  group eps [{}]  flips [{}]  classifier {}",
        ctx.scenario,
        ctx.overall_eps,
        join(&ctx.per_group_eps),
        join(&ctx.per_group_flip),
        ctx.classifier
    );
    let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}", "group", "tp", "fp", "tn", "fn", "precision", "recall", "f*", "fpr", "fnr");
    let line = |s: &mut String, name: &str, c: &Confusion| {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            "{name:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            f(c.precision()),
            f(c.recall()),
            f(c.f_star()),
            f(c.fpr()),
            f(c.fnr())
        );
    };
    for g in &report.groups {
        line(&mut s, &g.group.to_string(), &g.confusion);
    }
    line(&mut s, "overall", &report.overall);
    let _ = writeln!(s, "fairness loss {:.4}  fairness {:.4}  cost {}", report.fairness_loss, report.fairness, report.cost);
    s
}
