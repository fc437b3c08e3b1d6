//! Closed-form models: dummy/progenitor Dice, false-positive probability of a
//! dummy pair, predicted per-group FPR, expected pair cost and the model
//! fairness loss the optimizers minimise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;

use crate::blocking::BinnedDataset;
use crate::{rng, Error, GroupId, Result};

/// Model constants. `mu` and `sigma_bit` are derived from `p`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnalyticsParams {
    pub n_l: usize,
    pub threshold: f64,
    /// Per-bit fill probability.
    pub p: f64,
    pub delta_b: f64,
}

impl Default for AnalyticsParams {
    fn default() -> Self {
        AnalyticsParams { n_l: 300, threshold: 0.8, p: 0.5, delta_b: 1.0 }
    }
}

impl AnalyticsParams {
    pub fn new(n_l: usize, threshold: f64, p: f64, delta_b: f64) -> Result<Self> {
        let params = AnalyticsParams { n_l, threshold, p, delta_b };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 {
            return Err(Error::Domain("filter length must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Domain(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Domain(format!("fill probability {} outside (0,1)", self.p)));
        }
        if !(self.delta_b > 0.0 && self.delta_b.is_finite()) {
            return Err(Error::Domain(format!("sensitivity {} must be positive", self.delta_b)));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.p
    }

    pub fn sigma_bit(&self) -> f64 {
        (self.p * (1.0 - self.p)).sqrt()
    }
}

/// `(flip n_l / (2 (1 - flip) n_1) + 1)^-1`.
pub fn dummy_dice_expected(flip: f64, n_l: usize, n_1: usize) -> Result<f64> {
    if n_1 == 0 || n_1 > n_l {
        return Err(Error::Domain(format!("popcount {n_1} outside (0, {n_l}]")));
    }
    check_flip(flip)?;
    if flip >= 1.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (flip * n_l as f64 / (2.0 * (1.0 - flip) * n_1 as f64) + 1.0))
}

fn check_flip(flip: f64) -> Result<()> {
    if (0.0..=1.0).contains(&flip) {
        Ok(())
    } else {
        Err(Error::Domain(format!("flip probability {flip} outside [0,1]")))
    }
}

/// Probability that a dummy and its progenitor score above the threshold,
/// using the normal approximation of the progenitor popcount.
pub fn fp_probability(flip: f64, params: &AnalyticsParams) -> Result<f64> {
    params.validate()?;
    check_flip(flip)?;
    if flip == 0.0 {
        // An unflipped copy has Dice 1 > T.
        return Ok(1.0);
    }
    if flip >= 1.0 {
        return Ok(0.0);
    }
    let (t, n) = (params.threshold, params.n_l as f64);
    let sigma = params.sigma_bit();
    let arg = n.sqrt() * t * flip / (2.0 * std::f64::consts::SQRT_2 * sigma * (1.0 - t) * (1.0 - flip))
        - n.sqrt() * params.mu() / (sigma * std::f64::consts::SQRT_2);
    Ok((0.5 * (1.0 - libm::erf(arg))).clamp(0.0, 1.0))
}

/// Original-record quantities for one group that feed the cost model. Only
/// bins holding group members on both sides contribute, since a bin with
/// no group-`g` originals receives no group-`g` dummies.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostInputs {
    pub n_a: f64,
    pub n_b: f64,
    pub n_bins: f64,
    /// `sum_b N_{b,g}^A N_{b,g}^B` over shared bins.
    pub base_pairs: f64,
}

/// Per-group cost inputs from two binned parties (originals only).
pub fn cost_inputs(a: &BinnedDataset, b: &BinnedDataset, groups: usize) -> Vec<CostInputs> {
    let mut out = vec![CostInputs::default(); groups];
    for bin_a in a.bins() {
        let Some(bin_b) = b.bin(&bin_a.label) else { continue };
        for (gi, c) in out.iter_mut().enumerate() {
            let g = GroupId::from_index(gi);
            let (na, nb) = (bin_a.original_count(g) as f64, bin_b.original_count(g) as f64);
            if na > 0.0 && nb > 0.0 {
                c.n_a += na;
                c.n_b += nb;
                c.n_bins += 1.0;
                c.base_pairs += na * nb;
            }
        }
    }
    out
}

/// Expected dummy-involving pairs for one group:
/// `(N_A + N_B) dB / (2 eps) + N_bins dB^2 / (4 eps^2)`.
pub fn expected_dummy_pairs(n_a: f64, n_b: f64, eps: f64, delta_b: f64, n_bins: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("privacy budget must be positive, got {eps}")));
    }
    if [n_a, n_b, n_bins, delta_b].iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("cost inputs must be non-negative".into()));
    }
    if eps.is_infinite() {
        return Ok(0.0);
    }
    Ok((n_a + n_b) * delta_b / (2.0 * eps) + n_bins * delta_b * delta_b / (4.0 * eps * eps))
}

/// Expected candidate pairs for one group: base pairs plus dummy pairs.
pub fn expected_pair_cost(n_a: f64, n_b: f64, eps: f64, delta_b: f64, n_bins: f64, base_pairs: f64) -> Result<f64> {
    Ok(base_pairs + expected_dummy_pairs(n_a, n_b, eps, delta_b, n_bins)?)
}

/// Confusion counts on original-record pairs for one group, plus its cost inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupBase {
    pub tp_ori: f64,
    pub fp_ori: f64,
    pub tn_ori: f64,
    pub fn_ori: f64,
    pub cost: CostInputs,
}

impl GroupBase {
    pub fn fnr(&self) -> Result<f64> {
        let d = self.fn_ori + self.tp_ori;
        if d > 0.0 {
            Ok(self.fn_ori / d)
        } else {
            Err(Error::UndefinedRate("no true matches for FNR".into()))
        }
    }

    pub fn expected_dummy_pairs(&self, eps: f64, delta_b: f64) -> Result<f64> {
        expected_dummy_pairs(self.cost.n_a, self.cost.n_b, eps, delta_b, self.cost.n_bins)
    }

    pub fn expected_pair_cost(&self, eps: f64, delta_b: f64) -> Result<f64> {
        Ok(self.cost.base_pairs + self.expected_dummy_pairs(eps, delta_b)?)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaseRates {
    pub groups: Vec<GroupBase>,
}

impl BaseRates {
    pub fn group(&self, g: GroupId) -> Result<&GroupBase> {
        self.groups
            .get(g.index())
            .ok_or_else(|| Error::Dimension { expected: g.index() + 1, found: self.groups.len() })
    }
}

/// `(P C_dum + FP_ori) / (C_dum + FP_ori + TN_ori)`: every dummy-involving
/// pair is a false positive with the dummy probability and otherwise a true
/// negative.
pub fn predicted_fpr(group: GroupId, eps_g: f64, flip_g: f64, base: &BaseRates, params: &AnalyticsParams) -> Result<f64> {
    let gb = base.group(group)?;
    let c_dum = gb.expected_dummy_pairs(eps_g, params.delta_b)?;
    let p_fp = fp_probability(flip_g, params)?;
    let denom = c_dum + gb.fp_ori + gb.tn_ori;
    if !(denom > 0.0) {
        return Err(Error::UndefinedRate(format!("no negatives for group {group}")));
    }
    Ok(((p_fp * c_dum + gb.fp_ori) / denom).clamp(0.0, 1.0))
}

/// Equalized-odds loss: the larger of the widest FPR gap and widest FNR gap.
pub fn fairness_loss(fprs: &[f64], fnrs: &[f64]) -> f64 {
    let spread = |v: &[f64]| {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        if v.is_empty() {
            0.0
        } else {
            max - min
        }
    };
    spread(fprs).max(spread(fnrs))
}

/// Fairness loss predicted by the model for given per-group flips and budgets.
pub fn model_fairness_loss(flips: &[f64], eps: &[f64], base: &BaseRates, params: &AnalyticsParams) -> Result<f64> {
    let g = base.groups.len();
    if g < 2 {
        return Err(Error::Domain("fairness loss needs at least two groups".into()));
    }
    if flips.len() != g {
        return Err(Error::Dimension { expected: g, found: flips.len() });
    }
    if eps.len() != g {
        return Err(Error::Dimension { expected: g, found: eps.len() });
    }
    let mut fprs = Vec::with_capacity(g);
    let mut fnrs = Vec::with_capacity(g);
    for (i, gb) in base.groups.iter().enumerate() {
        fprs.push(predicted_fpr(GroupId::from_index(i), eps[i], flips[i], base, params)?);
        fnrs.push(gb.fnr()?);
    }
    Ok(fairness_loss(&fprs, &fnrs))
}

/// One scored original-record pair with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub group: GroupId,
    pub dice: f64,
    pub is_match: bool,
}

/// Threshold-classifies a uniform per-group sample of original pairs and
/// scales the counts to the group's population. With `sample_size` at or
/// above a group's population the counts are exact.
pub fn estimate_base_rates(
    scores: &[LabeledScore],
    cost: Vec<CostInputs>,
    threshold: f64,
    sample_size: usize,
    seed: u64,
) -> Result<BaseRates> {
    if sample_size < 100 {
        return Err(Error::InsufficientSample(format!("sample size {sample_size} below 100 pairs per group")));
    }
    let mut by_group: BTreeMap<GroupId, Vec<&LabeledScore>> = BTreeMap::new();
    for s in scores {
        by_group.entry(s.group).or_default().push(s);
    }
    let mut groups = Vec::with_capacity(cost.len());
    for (gi, c) in cost.into_iter().enumerate() {
        let g = GroupId::from_index(gi);
        let population = by_group.get(&g).map(Vec::as_slice).unwrap_or(&[]);
        if population.is_empty() {
            return Err(Error::InsufficientSample(format!("group {g} has no candidate pairs")));
        }
        let mut gb = GroupBase { cost: c, ..GroupBase::default() };
        let picked: Vec<&LabeledScore> = if sample_size >= population.len() {
            population.to_vec()
        } else {
            let mut r = rng::stream(seed, "analytics/base-sample", &[u64::from(g.0)]);
            let mut idx = index::sample(&mut r, population.len(), sample_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| population[i]).collect()
        };
        let scale = population.len() as f64 / picked.len() as f64;
        for s in picked {
            let slot = match (s.is_match, s.dice > threshold) {
                (true, true) => &mut gb.tp_ori,
                (false, true) => &mut gb.fp_ori,
                (false, false) => &mut gb.tn_ori,
                (true, false) => &mut gb.fn_ori,
            };
            *slot += scale;
        }
        groups.push(gb);
    }
    Ok(BaseRates { groups })
}

/// Writes `(x, predicted, simulated)` rows as CSV.
pub fn write_curve(path: &Path, x_name: &str, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([x_name, "predicted", "simulated"])?;
    for (x, p, s) in rows {
        w.write_record([x.to_string(), p.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{BloomFilter, Bits, EncodingConfig};
    use rand::Rng;
    use rand_distr_free::binomial;

    /// Binomial draws by summing Bernoulli trials, to keep the oracle free of
    /// the code under test.
    mod rand_distr_free {
        use rand::Rng;
        pub fn binomial<R: Rng>(n: usize, p: f64, r: &mut R) -> usize {
            (0..n).filter(|_| r.random::<f64>() < p).count()
        }
    }

    fn base2(fp: [f64; 2], tn: [f64; 2], fnr: [f64; 2]) -> BaseRates {
        let cost = CostInputs { n_a: 500.0, n_b: 500.0, n_bins: 100.0, base_pairs: 2000.0 };
        BaseRates {
            groups: (0..2)
                .map(|i| GroupBase { tp_ori: 100.0 * (1.0 - fnr[i]), fn_ori: 100.0 * fnr[i], fp_ori: fp[i], tn_ori: tn[i], cost })
                .collect(),
        }
    }

    #[test]
    fn dummy_dice_examples() {
        assert_eq!(dummy_dice_expected(0.0, 300, 150).unwrap(), 1.0);
        assert!((dummy_dice_expected(0.5, 300, 150).unwrap() - 0.5).abs() < 1e-15);
        assert!(dummy_dice_expected(0.999_999, 300, 150).unwrap() < 1e-5);
        assert_eq!(dummy_dice_expected(1.0, 300, 150).unwrap(), 0.0);
        assert!(dummy_dice_expected(0.3, 300, 0).is_err());
        let mut prev = 1.0;
        for i in 1..100 {
            let d = dummy_dice_expected(i as f64 / 100.0, 300, 120).unwrap();
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn fp_probability_endpoints_and_extinction() {
        let p = AnalyticsParams::default();
        assert_eq!(fp_probability(0.0, &p).unwrap(), 1.0);
        assert_eq!(fp_probability(1.0, &p).unwrap(), 0.0);
        for i in 30..=99 {
            assert!(fp_probability(i as f64 / 100.0, &p).unwrap() < 1e-3);
        }
        // Transition centre: n_l T f / (2 (1-T)(1-f)) = n_l p at f = 0.2.
        assert!((fp_probability(0.2, &p).unwrap() - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = fp_probability(i as f64 / 100.0, &p).unwrap();
            assert!(v <= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
        assert!(fp_probability(-0.1, &p).is_err());
    }

    #[test]
    fn fp_probability_matches_clt_step() {
        // Oracle for the modelled event: n_1 ~ Binomial(n_l, p) and the
        // expected dummy Dice exceeds T. Differences come only from the
        // normal approximation (no continuity correction).
        let params = AnalyticsParams::default();
        let mut r = rng::stream(11, "test/clt", &[]);
        let trials = 20_000;
        for flip in [0.1, 0.16, 0.18, 0.2, 0.22, 0.24, 0.3] {
            let hits = (0..trials)
                .filter(|_| {
                    let n1 = binomial(params.n_l, params.p, &mut r).max(1);
                    dummy_dice_expected(flip, params.n_l, n1).unwrap() > params.threshold
                })
                .count();
            let sim = hits as f64 / trials as f64;
            let model = fp_probability(flip, &params).unwrap();
            assert!((sim - model).abs() < 0.04, "flip {flip}: sim {sim} model {model}");
        }
    }

    #[test]
    fn cost_examples() {
        assert_eq!(expected_pair_cost(100.0, 100.0, 1.0, 1.0, 10.0, 0.0).unwrap(), 102.5);
        assert_eq!(expected_pair_cost(100.0, 100.0, f64::INFINITY, 1.0, 10.0, 7.0).unwrap(), 7.0);
        assert!(expected_pair_cost(1.0, 1.0, 0.0, 1.0, 1.0, 0.0).is_err());
        // Strictly decreasing in eps and convex in 1/eps.
        let c = |inv: f64| expected_dummy_pairs(300.0, 200.0, 1.0 / inv, 1.0, 40.0).unwrap();
        let grid: Vec<f64> = (1..200).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(3) {
            assert!(c(w[1]) > c(w[0]));
            assert!(c(w[0]) + c(w[2]) - 2.0 * c(w[1]) >= -1e-9);
        }
    }

    #[test]
    fn predicted_fpr_limits_and_monotonicity() {
        let params = AnalyticsParams::default();
        let base = base2([30.0, 10.0], [70.0, 90.0], [0.1, 0.1]);
        let far = predicted_fpr(GroupId(1), 1e12, 0.5, &base, &params).unwrap();
        assert!((far - 0.3).abs() < 1e-9);
        let mut prev = 0.0;
        for i in 1..=60 {
            let eps = 0.05 * i as f64;
            let v = predicted_fpr(GroupId(1), eps, 0.5, &base, &params).unwrap();
            assert!(v > prev, "eps {eps}");
            prev = v;
        }
        let empty = BaseRates { groups: vec![GroupBase::default(); 2] };
        assert!(matches!(predicted_fpr(GroupId(1), 1e300, 0.5, &empty, &params), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn fairness_loss_examples() {
        assert!((fairness_loss(&[0.1, 0.3], &[0.2, 0.25]) - 0.2).abs() < 1e-15);
        assert_eq!(fairness_loss(&[0.1, 0.1, 0.1], &[0.4, 0.4, 0.4]), 0.0);
        let params = AnalyticsParams::default();
        let sym = base2([20.0, 20.0], [80.0, 80.0], [0.1, 0.1]);
        assert_eq!(model_fairness_loss(&[0.3, 0.3], &[1.0, 1.0], &sym, &params).unwrap(), 0.0);
    }

    #[test]
    fn model_loss_matches_recomputation() {
        let params = AnalyticsParams::default();
        let base = base2([30.0, 10.0], [70.0, 90.0], [0.1, 0.3]);
        let (flips, eps) = ([0.1, 0.25], [0.7, 3.0]);
        let mut fprs = vec![];
        for i in 0..2 {
            let gb = &base.groups[i];
            let c = (gb.cost.n_a + gb.cost.n_b) / (2.0 * eps[i]) + gb.cost.n_bins / (4.0 * eps[i] * eps[i]);
            let arg = (300f64).sqrt() * 0.8 * flips[i] / (2.0 * 2f64.sqrt() * 0.5 * 0.2 * (1.0 - flips[i]))
                - (300f64).sqrt() * 0.5 / (0.5 * 2f64.sqrt());
            let p = 0.5 * (1.0 - libm::erf(arg));
            fprs.push((p * c + gb.fp_ori) / (c + gb.fp_ori + gb.tn_ori));
        }
        let want = (fprs[0] - fprs[1]).abs().max(0.2);
        let got = model_fairness_loss(&flips, &eps, &base, &params).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(model_fairness_loss(&[0.1], &[1.0, 1.0], &base, &params).is_err());
    }

    fn scores(n: usize, seed: u64) -> Vec<LabeledScore> {
        let mut r = rng::stream(seed, "test/scores", &[]);
        (0..n)
            .map(|i| {
                let is_match = r.random::<f64>() < 0.2;
                let dice = if is_match { 0.7 + 0.3 * r.random::<f64>() } else { 0.9 * r.random::<f64>() };
                LabeledScore { group: GroupId(1 + (i % 2) as u16), dice, is_match }
            })
            .collect()
    }

    #[test]
    fn base_rates_exhaustive_and_sampled() {
        let all = scores(20_000, 1);
        let cost = vec![CostInputs::default(); 2];
        let exact = estimate_base_rates(&all, cost.clone(), 0.8, usize::MAX, 0).unwrap();
        let direct_fp = all.iter().filter(|s| s.group == GroupId(1) && !s.is_match && s.dice > 0.8).count() as f64;
        assert_eq!(exact.groups[0].fp_ori, direct_fp);
        let total: f64 = exact.groups.iter().map(|g| g.tp_ori + g.fp_ori + g.tn_ori + g.fn_ori).sum();
        assert_eq!(total, 20_000.0);

        let sampled = estimate_base_rates(&all, cost.clone(), 0.8, 1000, 3).unwrap();
        for (e, s) in exact.groups.iter().zip(&sampled.groups) {
            let fpr = |g: &GroupBase| g.fp_ori / (g.fp_ori + g.tn_ori);
            assert!((fpr(e) - fpr(s)).abs() < 0.05);
            assert!((e.fnr().unwrap() - s.fnr().unwrap()).abs() < 0.05);
        }
        assert_eq!(sampled, estimate_base_rates(&all, cost.clone(), 0.8, 1000, 3).unwrap());
        assert!(matches!(estimate_base_rates(&all, cost.clone(), 0.8, 50, 3), Err(Error::InsufficientSample(_))));
        let one_group: Vec<_> = all.iter().copied().filter(|s| s.group == GroupId(1)).collect();
        assert!(matches!(estimate_base_rates(&one_group, cost, 0.8, 1000, 3), Err(Error::InsufficientSample(_))));
    }

    #[test]
    fn separable_sample_has_no_errors() {
        let s: Vec<LabeledScore> = (0..400)
            .map(|i| LabeledScore { group: GroupId(1 + (i % 2) as u16), dice: if i % 3 == 0 { 0.95 } else { 0.3 }, is_match: i % 3 == 0 })
            .collect();
        let b = estimate_base_rates(&s, vec![CostInputs::default(); 2], 0.8, 100, 1).unwrap();
        assert!(b.groups.iter().all(|g| g.fp_ori == 0.0 && g.fn_ori == 0.0));
    }

    #[test]
    fn cost_inputs_use_shared_bins_only() {
        let cfg = EncodingConfig::new(4, 1, 2, 1, 0).unwrap().with_label_positions(vec![0]).unwrap();
        let f = |b0: bool, g: u16, id: &str| BloomFilter::original(Bits::from_bools(&[b0, true, false, true]), GroupId(g), id);
        let a = crate::blocking::block_dataset(&[f(true, 1, "a1"), f(true, 1, "a2"), f(true, 2, "a3"), f(false, 1, "a4")], &cfg).unwrap();
        let b = crate::blocking::block_dataset(&[f(true, 1, "b1"), f(true, 1, "b2"), f(true, 1, "b3")], &cfg).unwrap();
        let c = cost_inputs(&a, &b, 2);
        assert_eq!(c[0], CostInputs { n_a: 2.0, n_b: 3.0, n_bins: 1.0, base_pairs: 6.0 });
        assert_eq!(c[1], CostInputs::default());
    }
}
