//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use pprl_core::analytics::{fp_probability, model_fairness_loss, AnalyticsParams, BaseRates, CostInputs, GroupBase};
use pprl_core::blocking::{apply_feature_level_dp, block_dataset, Scenario, ScenarioConfig};
use pprl_core::dp::{compose_budget, laplace_sample, LaplaceScale, PrivacyBudget};
use pprl_core::encoding::{Bits, BloomFilter, EncodingConfig};
use pprl_core::experiment::{self, build_instance, oracle_fp_curve, oracle_fpr_curve, run_sweep, ExperimentConfig, RunRecord};
use pprl_core::linkage::{evaluate, CandidatePair, EvalOptions};
use pprl_core::optimize::{method_a_search, method_b_allocate};
use pprl_core::records::GroundTruth;
use pprl_core::GroupId;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// The linkage instance shared by criteria 4 and 5.
fn model_instance() -> ExperimentConfig {
    ExperimentConfig {
        records: 500,
        overlap: 0.5,
        k: 30,
        n_b: 6,
        flip: 0.5,
        threshold: 0.8,
        ..Default::default()
    }
}

fn crit1() -> Verdict {
    let params = AnalyticsParams::default();
    let at_zero = fp_probability(0.0, &params).unwrap();
    let tail_max = (30..=100).map(|i| fp_probability(i as f64 / 100.0, &params).unwrap()).fold(0.0, f64::max);
    let flips: Vec<f64> = (0..=25).map(|i| i as f64 * 0.02).collect();
    let curve = oracle_fp_curve(&params, &flips, 10_000, 1).unwrap();
    let (gap, at) = curve.iter().map(|&(f, m, s)| ((m - s).abs(), f)).fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    verdict(
        at_zero == 1.0 && tail_max < 1e-3 && gap <= 0.05,
        format!("P(0)={at_zero}, max P(flip>=0.3)={tail_max:.2e}, max |model-MC|={gap:.4} at flip {at:.2}"),
    )
}

fn crit2() -> Verdict {
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for sigma in [0.5, 1.0, 5.0] {
        let scale = LaplaceScale::new(sigma).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| laplace_sample(scale, &mut rng).max(0.0)).sum::<f64>() / n as f64;
        worst = worst.max((mean / (sigma / 2.0) - 1.0).abs());
    }
    verdict(worst <= 0.02, format!("max relative error of E[max(X,0)] vs sigma/2 = {:.4}", worst))
}

fn crit3() -> Verdict {
    let mut rng = StdRng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = rng.random_range(1..=8);
        let eps: Vec<f64> = (0..g).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let got = compose_budget(&eps).unwrap();
        // Composition identity: 1/eps_l = sum_g 1/eps_g.
        let recip: f64 = eps.iter().map(|e| e.recip()).sum();
        worst = worst.max((got * recip - 1.0).abs());
    }
    for g in 1..=8 {
        for overall in [0.1, 1.0, 10.0] {
            let got = compose_budget(&vec![g as f64 * overall; g]).unwrap();
            worst = worst.max((got / overall - 1.0).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max relative error {worst:.2e} over 1000 random vectors and uniform splits"))
}

fn crit4() -> Verdict {
    let budgets = [0.1, 1.0, 10.0];
    let points = oracle_fpr_curve(&model_instance(), &budgets, 50).unwrap();
    let gap = points.iter().map(|p| (p.predicted - p.simulated).abs()).fold(0.0, f64::max);
    let mut monotone = true;
    let mut groups_seen = 0;
    for g in 0..2 {
        let sims: Vec<f64> = points.iter().filter(|p| p.group.index() == g).map(|p| p.simulated).collect();
        groups_seen += usize::from(sims.len() == budgets.len());
        monotone &= sims.windows(2).all(|w| w[1] >= w[0]);
    }
    let table: Vec<String> =
        points.iter().map(|p| format!("eps {} {}: {:.3}/{:.3}", p.overall_eps, p.group, p.predicted, p.simulated)).collect();
    verdict(
        gap <= 0.05 && monotone && groups_seen == 2,
        format!("max |predicted-simulated|={gap:.4}, monotone={monotone} [{}]", table.join(", ")),
    )
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn records_by<'a>(runs: &'a [experiment::RunOutcome], scenario: Scenario, eps: f64) -> Vec<&'a RunRecord> {
    runs.iter().filter(|o| o.scenario == scenario && o.overall_eps == eps).filter_map(|o| o.result.as_ref().ok()).collect()
}

fn crit5() -> Verdict {
    let mut cfg = model_instance();
    cfg.scenarios = vec![Scenario::Baseline2, Scenario::MethodB];
    cfg.repetitions = 200;
    let inst = build_instance(&cfg).unwrap();
    let runs = run_sweep(&cfg, &inst);
    let failed = runs.iter().filter(|o| o.result.is_err()).count();
    let mut worst = 0.0f64;
    let mut shift_ok = true;
    let mut eps_ok = true;
    let mut notes = Vec::new();
    for &eps in &cfg.budgets {
        for scenario in [Scenario::Baseline2, Scenario::MethodB] {
            for r in records_by(&runs, scenario, eps) {
                eps_ok &= r.overall_eps == eps && (compose_budget(&r.per_group_eps).unwrap() - eps).abs() <= 1e-9;
            }
        }
        let mut costs = BTreeMap::new();
        for scenario in [Scenario::Baseline2, Scenario::MethodB] {
            let recs = records_by(&runs, scenario, eps);
            for g in 0..2 {
                let emp = mean(recs.iter().map(|r| r.groups[g].cost as f64));
                let pred = mean(recs.iter().map(|r| r.groups[g].predicted_cost));
                worst = worst.max((emp - pred).abs() / pred);
                costs.insert((scenario, g), emp);
            }
        }
        let d: Vec<f64> = (0..2).map(|g| costs[&(Scenario::MethodB, g)] - costs[&(Scenario::Baseline2, g)]).collect();
        notes.push(format!("eps {eps}: delta g1 {:+.0} g2 {:+.0}", d[0], d[1]));
        // A zero-dummy baseline group cannot get cheaper, so the shift is required where dummies exist.
        if eps < 10.0 {
            shift_ok &= d[0] * d[1] < 0.0;
        }
    }
    verdict(
        failed == 0 && worst <= 0.10 && shift_ok && eps_ok,
        format!("max relative cost error {worst:.4}, opposite-sign shift={shift_ok}, equal overall eps={eps_ok} [{}]", notes.join(", ")),
    )
}

fn crit6() -> Verdict {
    let cfg = ExperimentConfig {
        scenarios: vec![Scenario::Baseline2, Scenario::MethodA, Scenario::MethodB],
        repetitions: 20,
        corruption_rate: 0.3,
        group_corruption_rates: vec![0.3, 0.6],
        ops_per_record: 2,
        ..model_instance()
    };
    let inst = build_instance(&cfg).unwrap();
    let runs = run_sweep(&cfg, &inst);
    let mut ok = runs.iter().all(|o| o.result.is_ok());
    let mut notes = Vec::new();
    for &eps in &cfg.budgets {
        let f = |s| mean(records_by(&runs, s, eps).iter().map(|r| r.fairness));
        let (b2, a, b) = (f(Scenario::Baseline2), f(Scenario::MethodA), f(Scenario::MethodB));
        ok &= a >= b2 && b >= b2;
        notes.push(format!("eps {eps}: B2 {b2:.4} A {a:.4} B {b:.4}"));
    }
    verdict(ok, format!("mean fairness [{}]", notes.join(", ")))
}

fn synthetic_base() -> BaseRates {
    let group = |fp: f64, tn: f64, fnr: f64, n: f64| GroupBase {
        tp_ori: 100.0 * (1.0 - fnr),
        fn_ori: 100.0 * fnr,
        fp_ori: fp,
        tn_ori: tn,
        cost: CostInputs { n_a: n, n_b: n, n_bins: n / 4.0, base_pairs: fp + tn + 100.0 },
    };
    BaseRates { groups: vec![group(60.0, 340.0, 0.1, 300.0), group(20.0, 380.0, 0.12, 200.0)] }
}

fn brute_force_a(eps: &[f64], base: &BaseRates, params: &AnalyticsParams) -> (f64, Vec<f64>) {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..=100 {
        for j in 0..=100 {
            let f = vec![i as f64 / 100.0, j as f64 / 100.0];
            let l = model_fairness_loss(&f, eps, base, params).unwrap();
            let key = |l: f64, f: &[f64]| (l, -(f[0] + f[1]), -f[0]);
            let better = best.as_ref().is_none_or(|(bl, bf)| {
                let (x, y) = (key(l, &f), key(*bl, bf));
                x.partial_cmp(&y) == Some(std::cmp::Ordering::Less)
            });
            if better {
                best = Some((l, f));
            }
        }
    }
    best.unwrap()
}

fn log_grid_b(overall: f64, flips: &[f64], base: &BaseRates, params: &AnalyticsParams) -> f64 {
    let (lo, hi) = ((1.001 * overall).ln(), (1000.0 * overall).ln());
    (0..10_000)
        .map(|i| {
            let e1 = (lo + (hi - lo) * i as f64 / 9999.0).exp();
            let e2 = 1.0 / (1.0 / overall - 1.0 / e1);
            model_fairness_loss(flips, &[e1, e2], base, params).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

fn crit7() -> Verdict {
    let params = AnalyticsParams::default();
    let mut bases = vec![("synthetic", synthetic_base(), params)];
    let inst = build_instance(&model_instance()).unwrap();
    bases.push(("instance", inst.base.clone(), inst.params));
    let mut a_ok = true;
    let mut b_gap = f64::NEG_INFINITY;
    let mut constraint = 0.0f64;
    for (_, base, params) in &bases {
        for overall in [0.1, 1.0, 10.0] {
            let eps = [2.0 * overall, 2.0 * overall];
            let got = method_a_search(&eps, base, params, 0.01).unwrap();
            let (bl, bf) = brute_force_a(&eps, base, params);
            a_ok &= got.achieved_loss == bl && got.per_group_values == bf;
            let flips = [0.5, 0.5];
            let r = method_b_allocate(overall, &flips, base, params, 1e-6).unwrap();
            b_gap = b_gap.max(r.achieved_loss - log_grid_b(overall, &flips, base, params));
            constraint = constraint.max((compose_budget(&r.per_group_values).unwrap() - overall).abs());
        }
    }
    verdict(
        a_ok && b_gap <= 1e-6 && constraint <= 1e-9,
        format!("method A equals brute force={a_ok}, method B minus 1e4-point oracle={b_gap:.2e}, constraint error={constraint:.2e}"),
    )
}

/// Per-group (tp, fp, tn, fn) counts realised as explicit pairs.
fn fixture_counts(i: usize) -> [[u64; 4]; 2] {
    let mut rng = StdRng::seed_from_u64(800 + i as u64);
    let mut c = [[0u64; 4]; 2];
    for g in &mut c {
        for v in g.iter_mut() {
            *v = rng.random_range(0..12);
        }
        // Keep every rate defined.
        g[0] += 1;
        g[2] += 1;
    }
    c
}

fn crit8() -> Verdict {
    let mut fixtures: Vec<[[u64; 4]; 2]> = (0..22).map(fixture_counts).collect();
    // TP=8, FP=2, FN=2 gives F*=2/3; FPRs 0.1/0.3 and FNRs 0.2/0.25 give loss 0.2.
    fixtures.push([[8, 2, 18, 2], [3, 3, 7, 1]]);
    let mut mismatches = Vec::new();
    let mut literal_ok = true;
    for (fi, counts) in fixtures.iter().enumerate() {
        let one = BloomFilter::original(Bits::from_bools(&[true, false]), GroupId(1), "x");
        let mut filters: Vec<(BloomFilter, BloomFilter, bool)> = Vec::new();
        let mut truth = Vec::new();
        for (g, &[tp, fp, tn, fn_]) in counts.iter().enumerate() {
            let gid = GroupId(g as u16 + 1);
            let mut n = 0;
            let mut push = |matched: bool, pred: bool, dummy: bool, count: u64| {
                for _ in 0..count {
                    n += 1;
                    let (a, b) = (format!("a{g}_{n}"), format!("b{g}_{n}"));
                    if matched {
                        truth.push((a.clone(), b.clone()));
                    }
                    let mut left = BloomFilter::original(one.bits.clone(), gid, a);
                    let right = BloomFilter::original(one.bits.clone(), gid, b);
                    if dummy {
                        left.is_dummy = true;
                        left.source_entity_id = None;
                    }
                    filters.push((left, right, pred));
                }
            };
            push(true, true, false, tp);
            push(true, false, false, fn_);
            // Half the negatives involve a dummy.
            push(false, true, false, fp / 2);
            push(false, true, true, fp - fp / 2);
            push(false, false, false, tn / 2);
            push(false, false, true, tn - tn / 2);
        }
        let truth = GroundTruth::new(truth).unwrap();
        let pairs: Vec<CandidatePair> = filters.iter().map(|(l, r, _)| CandidatePair::new(l, r).unwrap()).collect();
        let preds: Vec<bool> = filters.iter().map(|f| f.2).collect();
        let report = evaluate(&preds, &truth, &pairs, &EvalOptions { groups: 2, ..Default::default() }).unwrap();

        let tot: Vec<u64> = (0..4).map(|k| counts[0][k] + counts[1][k]).collect();
        let f_star = tot[0] as f64 / (tot[0] + tot[1] + tot[3]) as f64;
        let fpr: Vec<f64> = counts.iter().map(|c| c[1] as f64 / (c[1] + c[2]) as f64).collect();
        let fnr: Vec<f64> = counts.iter().map(|c| c[3] as f64 / (c[3] + c[0]) as f64).collect();
        let loss = (fpr[0] - fpr[1]).abs().max((fnr[0] - fnr[1]).abs());

        let got: Vec<[u64; 4]> = report.groups.iter().map(|g| [g.confusion.tp, g.confusion.fp, g.confusion.tn, g.confusion.fn_]).collect();
        if got != counts.to_vec()
            || report.overall.f_star() != Some(f_star)
            || report.fairness_loss != loss
            || report.fairness != 1.0 - loss
            || report.cost != pairs.len() as u64
        {
            mismatches.push(fi);
        }
        if fi == fixtures.len() - 1 {
            literal_ok = (report.fairness_loss - 0.2).abs() < 1e-12;
            let g1 = report.groups[0].confusion;
            literal_ok &= g1.f_star().is_some_and(|f| (f - 2.0 / 3.0).abs() < 1e-12);
        }
    }
    verdict(
        mismatches.is_empty() && literal_ok,
        format!("{} fixtures, mismatches {:?}, worked example exact={literal_ok}", fixtures.len(), mismatches),
    )
}

/// Distribution of released group-1 size in a single bin holding `n` originals.
fn released_sizes(n: usize, seeds: u64) -> BTreeMap<usize, u64> {
    let cfg = EncodingConfig::new(8, 1, 2, 1, 0).unwrap().with_label_positions(vec![0]).unwrap();
    let filters: Vec<BloomFilter> = (0..n)
        .map(|i| BloomFilter::original(Bits::from_bools(&[true, i % 2 == 0, false, true, false, false, true, false]), GroupId(1), format!("r{i}")))
        .collect();
    let binned = block_dataset(&filters, &cfg).unwrap();
    let sc = ScenarioConfig {
        scenario: Scenario::Baseline2,
        per_group_eps: vec![1.0, 1.0],
        per_group_flip: vec![0.5, 0.5],
        overall_eps: 0.5,
        threshold: 0.8,
        seed: 0,
    };
    let budget = PrivacyBudget::new(vec![1.0, 1.0], 1.0).unwrap();
    let mut hist = BTreeMap::new();
    for seed in 0..seeds {
        let out = apply_feature_level_dp(&binned, &sc, &budget, seed).unwrap();
        let size = out.bins().map(|b| b.members(GroupId(1)).len()).sum::<usize>();
        *hist.entry(size).or_default() += 1;
    }
    hist
}

fn crit9() -> Verdict {
    let seeds = 100_000u64;
    let (p, q) = (released_sizes(5, seeds), released_sizes(6, seeds));
    let bound = 1f64.exp();
    let support: HashSet<usize> = p.keys().chain(q.keys()).copied().collect();
    let mut support: Vec<usize> = support.into_iter().collect();
    support.sort_unstable();
    let mut violations = Vec::new();
    let nf = seeds as f64;
    for s in support {
        let (ps, qs) = (*p.get(&s).unwrap_or(&0) as f64 / nf, *q.get(&s).unwrap_or(&0) as f64 / nf);
        for (x, y, dir) in [(ps, qs, "N/N+1"), (qs, ps, "N+1/N")] {
            let se = (x * (1.0 - x) / nf + bound * bound * y * (1.0 - y) / nf).sqrt();
            if x > bound * y + 3.0 * se {
                violations.push(format!("size {s} {dir}: {x:.4} vs {y:.4}"));
            }
        }
    }
    let shown: Vec<&String> = violations.iter().take(3).collect();
    verdict(violations.is_empty(), format!("{} ratio violations beyond 3 SE (first: {:?})", violations.len(), shown))
}

fn crit10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        records: 200,
        n_b: 6,
        repetitions: 3,
        classifier: experiment::ClassifierKind::Logistic,
        training_pairs_per_class: 200,
        ..Default::default()
    };
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let cfg = ExperimentConfig { out: dir.path().join(name), ..base.clone() };
        let outcome = experiment::run_experiment(&cfg).unwrap();
        let files: Vec<(String, Vec<u8>)> = outcome
            .files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    let bytes: usize = outputs[0].iter().map(|(_, b)| b.len()).sum();
    verdict(same && bytes > 0, format!("{} files, {bytes} bytes, byte-identical={same}", outputs[0].len()))
}

fn main() {
    // Wall-clock caps per criterion; criteria without one use ten minutes.
    let criteria: [(u8, &str, fn() -> Verdict, u64); 10] = [
        (1, "dummy false-positive probability", crit1, 60),
        (2, "expected dummy count", crit2, 600),
        (3, "budget composition", crit3, 600),
        (4, "predicted vs simulated FPR", crit4, 300),
        (5, "cost model and cost shift", crit5, 300),
        (6, "fairness does not degrade", crit6, 600),
        (7, "optimizers match oracles", crit7, 600),
        (8, "evaluation metrics", crit8, 600),
        (9, "released group-size privacy ratio", crit9, 600),
        (10, "run determinism", crit10, 600),
    ];
    let mut failed = 0;
    for (n, name, f, cap) in criteria {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        let pass = v.pass && took <= Duration::from_secs(cap);
        failed += usize::from(!pass);
        println!("{} criterion {n} ({name}): {} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, v.detail, took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
