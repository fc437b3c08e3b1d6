//! End-to-end checks across modules on small seeded instances.

use std::collections::{BTreeMap, HashSet};

use pprl_core::analytics::{self, cost_inputs, estimate_base_rates, AnalyticsParams};
use pprl_core::blocking::{apply_feature_level_dp, block_dataset, BinnedDataset, Scenario, ScenarioConfig};
use pprl_core::dp::PrivacyBudget;
use pprl_core::encoding::{encode_record, BloomFilter, EncodingConfig};
use pprl_core::linkage::{self, candidate_pairs, candidate_pairs_scoped, EvalOptions, PairingScope};
use pprl_core::records::{self, CorruptionConfig, Dataset, GroundTruth};
use pprl_core::{GroupId, Result};

fn encode(ds: &Dataset, cfg: &EncodingConfig) -> Vec<BloomFilter> {
    ds.records.iter().map(|r| encode_record(r, cfg).filter).collect()
}

struct Small {
    truth: GroundTruth,
    a: BinnedDataset,
    b: BinnedDataset,
}

fn small_instance(n: usize, n_b: usize, seed: u64) -> Small {
    let (da, db, truth) = records::generate_synthetic(n, 0.5, &[0.5, 0.5], seed).unwrap();
    let db = records::corrupt_dataset(&db, &CorruptionConfig { rate: 0.2, ..Default::default() }, seed + 1).unwrap();
    let cfg = EncodingConfig::new(300, 30, 2, n_b, 0x5eed).unwrap();
    Small { truth, a: block_dataset(&encode(&da, &cfg), &cfg).unwrap(), b: block_dataset(&encode(&db, &cfg), &cfg).unwrap() }
}

fn baseline2(eps: f64, flip: f64) -> (ScenarioConfig, PrivacyBudget) {
    let sc = ScenarioConfig {
        scenario: Scenario::Baseline2,
        per_group_eps: vec![2.0 * eps; 2],
        per_group_flip: vec![flip; 2],
        overall_eps: eps,
        threshold: 0.8,
        seed: 0,
    };
    let budget = PrivacyBudget::new(sc.per_group_eps.clone(), 1.0).unwrap();
    (sc, budget)
}

#[test]
fn pair_count_matches_bin_size_products() {
    let inst = small_instance(60, 3, 7);
    let (sc, budget) = baseline2(0.3, 0.5);
    let pa = apply_feature_level_dp(&inst.a, &sc, &budget, 1).unwrap();
    let pb = apply_feature_level_dp(&inst.b, &sc, &budget, 2).unwrap();
    assert!(pa.dummy_total() + pb.dummy_total() > 0);
    // Independent count: tally bin sizes per label from the flat filter lists.
    let sizes = |d: &BinnedDataset| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for bin in d.bins() {
            *m.entry(bin.label.to_string()).or_default() += bin.iter().count();
        }
        m
    };
    let (sa, sb) = (sizes(&pa), sizes(&pb));
    let expected: usize = sa.iter().filter_map(|(l, n)| sb.get(l).map(|m| n * m)).sum();
    assert_eq!(candidate_pairs(&pa, &pb).unwrap().len(), expected);
}

#[test]
fn dummy_pairs_never_count_as_matches() {
    let inst = small_instance(80, 3, 9);
    let (sc, budget) = baseline2(0.2, 0.0);
    let pa = apply_feature_level_dp(&inst.a, &sc, &budget, 3).unwrap();
    let pb = apply_feature_level_dp(&inst.b, &sc, &budget, 4).unwrap();
    let pairs = candidate_pairs(&pa, &pb).unwrap();
    // Zero-flip dummies are exact copies, so they score like their progenitors.
    let preds = linkage::classify_threshold(&pairs, 0.8);
    let report = linkage::evaluate(&preds, &inst.truth, &pairs, &EvalOptions { groups: 2, ..Default::default() }).unwrap();
    let dummy_positive = pairs.iter().zip(&preds).filter(|(p, &m)| p.involves_dummy && m).count() as u64;
    assert!(dummy_positive > 0);
    let originals_tp = pairs
        .iter()
        .zip(&preds)
        .filter(|(p, &m)| m && !p.involves_dummy && linkage::true_label(p, &inst.truth).unwrap())
        .count() as u64;
    assert_eq!(report.overall.tp, originals_tp);
    let total: u64 = report.groups.iter().map(|g| g.confusion.total()).sum();
    assert_eq!(total, pairs.len() as u64);
}

#[test]
fn empirical_cost_matches_model_on_small_instance() {
    let inst = small_instance(50, 2, 11);
    let eps = 1.0;
    let (sc, budget) = baseline2(eps, 0.5);
    let cost = cost_inputs(&inst.a, &inst.b, 2);
    let runs = 200;
    let mut totals = [0.0f64; 2];
    for seed in 0..runs {
        let pa = apply_feature_level_dp(&inst.a, &sc, &budget, 2 * seed).unwrap();
        let pb = apply_feature_level_dp(&inst.b, &sc, &budget, 2 * seed + 1).unwrap();
        for p in candidate_pairs_scoped(&pa, &pb, PairingScope::WithinGroup).unwrap() {
            totals[p.group_left.index()] += 1.0;
        }
    }
    for (g, c) in cost.iter().enumerate() {
        let predicted = analytics::expected_pair_cost(c.n_a, c.n_b, 2.0 * eps, 1.0, c.n_bins, c.base_pairs).unwrap();
        let mean = totals[g] / runs as f64;
        assert!((mean - predicted).abs() <= 0.1 * predicted, "group {}: {mean} vs {predicted}", g + 1);
    }
}

#[test]
fn predicted_fpr_matches_small_end_to_end() -> Result<()> {
    let inst = small_instance(50, 2, 13);
    let pairs = candidate_pairs_scoped(&inst.a, &inst.b, PairingScope::WithinGroup)?;
    let scores = linkage::labeled_scores(&pairs, &inst.truth)?;
    let base = estimate_base_rates(&scores, cost_inputs(&inst.a, &inst.b, 2), 0.8, usize::MAX, 0)?;
    let params = AnalyticsParams::default();
    let eps = 1.0;
    let (sc, budget) = baseline2(eps, 0.5);
    let runs = 200;
    let mut fpr_sum = [0.0f64; 2];
    let mut fpr_n = [0usize; 2];
    for seed in 0..runs {
        let pa = apply_feature_level_dp(&inst.a, &sc, &budget, 2 * seed)?;
        let pb = apply_feature_level_dp(&inst.b, &sc, &budget, 2 * seed + 1)?;
        let pairs = candidate_pairs_scoped(&pa, &pb, PairingScope::WithinGroup)?;
        let preds = linkage::classify_threshold(&pairs, 0.8);
        let r = linkage::evaluate(&preds, &inst.truth, &pairs, &EvalOptions { groups: 2, ..Default::default() })?;
        for g in &r.groups {
            if let Some(f) = g.confusion.fpr() {
                fpr_sum[g.group.index()] += f;
                fpr_n[g.group.index()] += 1;
            }
        }
    }
    for g in 0..2 {
        let predicted = analytics::predicted_fpr(GroupId::from_index(g), 2.0 * eps, 0.5, &base, &params)?;
        let simulated = fpr_sum[g] / fpr_n[g] as f64;
        assert!((predicted - simulated).abs() <= 0.05, "group {}: predicted {predicted} simulated {simulated}", g + 1);
    }
    Ok(())
}

#[test]
fn sampled_base_rates_track_full_enumeration() -> Result<()> {
    let inst = small_instance(500, 6, 17);
    let pairs = candidate_pairs_scoped(&inst.a, &inst.b, PairingScope::WithinGroup)?;
    let scores = linkage::labeled_scores(&pairs, &inst.truth)?;
    let cost = cost_inputs(&inst.a, &inst.b, 2);
    let full = estimate_base_rates(&scores, cost.clone(), 0.8, usize::MAX, 0)?;
    let per_group = scores.len() / 20;
    let sampled = estimate_base_rates(&scores, cost, 0.8, per_group.max(100), 5)?;
    for (f, s) in full.groups.iter().zip(&sampled.groups) {
        let fpr = |g: &analytics::GroupBase| g.fp_ori / (g.fp_ori + g.tn_ori);
        assert!((fpr(f) - fpr(s)).abs() <= 0.05);
        if f.tp_ori + f.fn_ori > 0.0 && s.tp_ori + s.fn_ori > 0.0 {
            assert!((f.fnr()? - s.fnr()?).abs() <= 0.05);
        }
    }
    Ok(())
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn edit_distance_rises_with_corruption_rate() {
    let (a, _, _) = records::generate_synthetic(400, 0.5, &[0.5, 0.5], 3).unwrap();
    let mean_distance = |rate: f64| {
        let c = records::corrupt_dataset(&a, &CorruptionConfig { rate, ..Default::default() }, 4).unwrap();
        let mut total = 0.0;
        for (orig, noisy) in a.records.iter().zip(&c.records) {
            for ((_, x), (_, y)) in orig.attributes.iter().zip(&noisy.attributes) {
                total += levenshtein(x, y) as f64 / x.chars().count().max(y.chars().count()).max(1) as f64;
            }
        }
        total / a.len() as f64
    };
    let rates = [0.0, 0.2, 0.5, 0.8, 1.0];
    let d: Vec<f64> = rates.iter().map(|&r| mean_distance(r)).collect();
    assert_eq!(d[0], 0.0);
    assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
}

#[test]
fn released_view_hides_provenance() {
    let inst = small_instance(40, 3, 21);
    let (sc, budget) = baseline2(0.5, 0.5);
    let pa = apply_feature_level_dp(&inst.a, &sc, &budget, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (rel, side) = (dir.path().join("a.csv"), dir.path().join("a.sidecar.csv"));
    pprl_core::blocking::write_released(&rel, &side, &pa, 9).unwrap();
    let text = std::fs::read_to_string(&rel).unwrap();
    let entity_ids: HashSet<String> = pa.filters().filter_map(|f| f.source_entity_id.clone()).collect();
    assert!(entity_ids.iter().all(|id| !text.contains(id.as_str())));
    let back = pprl_core::blocking::read_released(&rel, &side).unwrap();
    assert_eq!(back.dummy_total(), pa.dummy_total());
    assert_eq!(back.len(), pa.len());
}
