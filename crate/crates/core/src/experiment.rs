//! Scenario sweeps: data, encoding, blocking, DP perturbation, linkage and
//! evaluation for every (scenario, budget, repetition), plus the
//! model-versus-simulation curves.
//!
//! The dataset is fixed by `data_seed`; repetitions vary only the DP noise.
//! Noise streams are keyed by (repetition, budget, party) and not by
//! scenario, so scenarios at the same budget see the same dummy counts
//! wherever their per-group budgets agree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, cost_inputs, estimate_base_rates, AnalyticsParams, BaseRates};
use crate::blocking::{apply_feature_level_dp, block_dataset, make_dummy, BinnedDataset, Scenario, ScenarioConfig};
use crate::dp::PrivacyBudget;
use crate::encoding::{dice, encode_record, mean_fill_rate, BloomFilter, Bits, EncodingConfig};
use crate::linkage::{
    candidate_pairs_scoped, evaluate, labeled_scores, train_logistic, training_sample, Classifier, Confusion, EvalOptions,
    GroupAttribution, LinkageReport, PairingScope, TrainingConfig,
};
use crate::optimize::{method_a_search, method_b_allocate_with};
use crate::records::{self, CorruptionConfig, Dataset, EditOp, GroundTruth, Schema};
use crate::{rng, Error, GroupId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Threshold,
    Logistic,
}

/// Fill probability fed to the analytical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillMode {
    /// Use `fill_p`.
    Assumed,
    /// Use the mean fill of the encoded originals.
    Measured,
}

/// Flat key/value configuration; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seed of the dataset; defaults to `seed` when absent.
    pub data_seed: Option<u64>,
    pub out: PathBuf,

    /// External data; when all three are set synthetic generation is skipped.
    pub dataset_a: Option<PathBuf>,
    pub dataset_b: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub qids: Vec<String>,
    pub protected: String,
    pub group_labels: Vec<String>,

    pub records: usize,
    pub overlap: f64,
    pub group_proportions: Vec<f64>,
    pub corruption_rate: f64,
    /// Per-group corruption rates; empty means `corruption_rate` for all.
    pub group_corruption_rates: Vec<f64>,
    pub edit_ops: Vec<String>,
    pub ops_per_record: usize,

    pub n_l: usize,
    pub k: usize,
    pub q: usize,
    pub n_b: usize,
    pub hash_seed: u64,

    pub scenarios: Vec<Scenario>,
    pub budgets: Vec<f64>,
    pub flip: f64,
    pub threshold: f64,
    pub classifier: ClassifierKind,
    pub repetitions: usize,
    pub pairing: PairingScope,
    pub attribution: GroupAttribution,
    pub sensitivity: f64,

    pub fill_mode: FillMode,
    pub fill_p: f64,
    pub base_sample: usize,
    pub grid_step: f64,
    pub log_grid_points: usize,
    pub tol: f64,
    pub training_pairs_per_class: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            data_seed: None,
            out: PathBuf::from("out"),
            dataset_a: None,
            dataset_b: None,
            ground_truth: None,
            qids: Schema::synthetic(2).qids,
            protected: "gender".into(),
            group_labels: vec!["m".into(), "f".into()],
            records: 1000,
            overlap: 0.5,
            group_proportions: vec![0.5, 0.5],
            corruption_rate: 0.2,
            group_corruption_rates: Vec::new(),
            edit_ops: vec!["insert".into(), "delete".into(), "substitute".into(), "transpose".into()],
            ops_per_record: 1,
            n_l: 300,
            k: 30,
            q: 2,
            n_b: 30,
            hash_seed: 0x5eed,
            scenarios: Scenario::ALL.to_vec(),
            budgets: vec![0.1, 1.0, 10.0],
            flip: 0.5,
            threshold: 0.8,
            classifier: ClassifierKind::Threshold,
            repetitions: 10,
            pairing: PairingScope::WithinGroup,
            attribution: GroupAttribution::Left,
            sensitivity: 1.0,
            fill_mode: FillMode::Assumed,
            fill_p: 0.5,
            base_sample: usize::MAX,
            grid_step: 0.01,
            log_grid_points: 200,
            tol: 1e-6,
            training_pairs_per_class: 500,
            learning_rate: 0.5,
            max_epochs: 20_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.budgets.is_empty() || self.budgets.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("budget grid must be non-empty and positive".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        if !(0.0..=1.0).contains(&self.flip) {
            return Err(Error::Config(format!("flip {} outside [0,1]", self.flip)));
        }
        if self.group_labels.len() < 2 {
            return Err(Error::Config("at least two protected groups are required".into()));
        }
        if self.group_proportions.len() != self.group_labels.len() {
            return Err(Error::Config("group_proportions and group_labels differ in length".into()));
        }
        if !self.group_corruption_rates.is_empty() && self.group_corruption_rates.len() != self.group_labels.len() {
            return Err(Error::Config("group_corruption_rates and group_labels differ in length".into()));
        }
        let external = [&self.dataset_a, &self.dataset_b, &self.ground_truth].iter().filter(|p| p.is_some()).count();
        if external != 0 && external != 3 {
            return Err(Error::Config("dataset_a, dataset_b and ground_truth must be given together".into()));
        }
        self.encoding()?;
        self.analytics_params(0.5)?;
        self.corruption()?;
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(self.qids.clone(), self.protected.clone(), self.group_labels.clone())
    }

    pub fn encoding(&self) -> Result<EncodingConfig> {
        EncodingConfig::new(self.n_l, self.k, self.q, self.n_b, self.hash_seed)
    }

    pub fn corruption(&self) -> Result<CorruptionConfig> {
        let edit_ops = self.edit_ops.iter().map(|s| s.parse::<EditOp>()).collect::<Result<Vec<_>>>()?;
        let cfg = CorruptionConfig {
            rate: self.corruption_rate,
            group_rates: (!self.group_corruption_rates.is_empty()).then(|| self.group_corruption_rates.clone()),
            edit_ops,
            ops_per_record: self.ops_per_record,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn analytics_params(&self, measured_fill: f64) -> Result<AnalyticsParams> {
        let p = match self.fill_mode {
            FillMode::Assumed => self.fill_p,
            FillMode::Measured => measured_fill,
        };
        AnalyticsParams::new(self.n_l, self.threshold, p, self.sensitivity)
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig { learning_rate: self.learning_rate, max_epochs: self.max_epochs, ..TrainingConfig::default() }
    }
}

/// Encoded and binned originals of both parties, with the model inputs
/// derived from their unperturbed candidate pairs.
#[derive(Debug, Clone)]
pub struct Instance {
    pub dataset_a: Dataset,
    pub dataset_b: Dataset,
    pub truth: GroundTruth,
    pub binned_a: BinnedDataset,
    pub binned_b: BinnedDataset,
    pub base: BaseRates,
    pub params: AnalyticsParams,
    pub measured_fill: f64,
}

fn encode_all(ds: &Dataset, cfg: &EncodingConfig) -> Vec<BloomFilter> {
    ds.records.par_iter().map(|r| encode_record(r, cfg).filter).collect()
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, GroundTruth)> {
    if let (Some(a), Some(b), Some(t)) = (&cfg.dataset_a, &cfg.dataset_b, &cfg.ground_truth) {
        let schema = cfg.schema()?;
        return Ok((records::load_dataset(a, &schema)?, records::load_dataset(b, &schema)?, records::load_ground_truth(t)?));
    }
    let seed = cfg.data_seed();
    let (a, b, truth) = records::generate_synthetic(cfg.records, cfg.overlap, &cfg.group_proportions, seed)?;
    let b = records::corrupt_dataset(&b, &cfg.corruption()?, rng::derive_seed(seed, "experiment/corrupt", &[]))?;
    Ok((a, b, truth))
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    cfg.validate()?;
    let enc = cfg.encoding()?;
    let (dataset_a, dataset_b, truth) = load_or_generate(cfg)?;
    let fa = encode_all(&dataset_a, &enc);
    let fb = encode_all(&dataset_b, &enc);
    let measured_fill = mean_fill_rate(fa.iter().chain(&fb)).unwrap_or(0.5);
    let binned_a = block_dataset(&fa, &enc)?;
    let binned_b = block_dataset(&fb, &enc)?;
    let pairs = candidate_pairs_scoped(&binned_a, &binned_b, cfg.pairing)?;
    let scores = labeled_scores(&pairs, &truth)?;
    let base = estimate_base_rates(
        &scores,
        cost_inputs(&binned_a, &binned_b, cfg.groups()),
        cfg.threshold,
        cfg.base_sample.max(100),
        rng::derive_seed(cfg.data_seed(), "experiment/base-sample", &[]),
    )?;
    let params = cfg.analytics_params(measured_fill)?;
    Ok(Instance { dataset_a, dataset_b, truth, binned_a, binned_b, base, params, measured_fill })
}

/// Per-group budgets and flips for one scenario at overall budget `eps`.
pub fn scenario_config(cfg: &ExperimentConfig, inst: &Instance, scenario: Scenario, eps: f64, seed: u64) -> Result<ScenarioConfig> {
    let g = cfg.groups();
    let uniform_eps = vec![g as f64 * eps; g];
    let flips = vec![cfg.flip; g];
    let (per_group_eps, per_group_flip) = match scenario {
        Scenario::Baseline1 | Scenario::Baseline2 => (uniform_eps, flips),
        Scenario::MethodA => {
            let r = method_a_search(&uniform_eps, &inst.base, &inst.params, cfg.grid_step)?;
            (uniform_eps, r.per_group_values)
        }
        Scenario::MethodB => {
            let r = method_b_allocate_with(eps, &flips, &inst.base, &inst.params, cfg.tol, cfg.log_grid_points)?;
            (r.per_group_values, flips)
        }
    };
    let sc = ScenarioConfig { scenario, per_group_eps, per_group_flip, overall_eps: eps, threshold: cfg.threshold, seed };
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRun {
    pub confusion: Confusion,
    pub cost: u64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub predicted_fpr: Option<f64>,
    pub predicted_cost: f64,
    pub dummies_a: usize,
    pub dummies_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub overall_eps: f64,
    pub repetition: usize,
    pub per_group_eps: Vec<f64>,
    pub per_group_flip: Vec<f64>,
    pub classifier: String,
    pub overall: Confusion,
    pub fairness_loss: f64,
    pub fairness: f64,
    pub cost: u64,
    pub groups: Vec<GroupRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub overall_eps: f64,
    pub repetition: usize,
    pub result: std::result::Result<RunRecord, String>,
}

/// Seed of the DP noise for one party in one (repetition, budget) cell.
pub fn party_seed(master: u64, repetition: usize, eps_index: usize, party: u64) -> u64 {
    rng::derive_seed(master, "experiment/party", &[repetition as u64, eps_index as u64, party])
}

fn count_dummies(b: &BinnedDataset, g: GroupId) -> usize {
    b.bins().map(|bin| bin.dummy_count(g)).sum()
}

/// One end-to-end run.
pub fn run_once(cfg: &ExperimentConfig, inst: &Instance, sc: &ScenarioConfig, repetition: usize, eps_index: usize) -> Result<RunRecord> {
    let budget = PrivacyBudget::new(sc.per_group_eps.clone(), cfg.sensitivity)?;
    let pa = apply_feature_level_dp(&inst.binned_a, sc, &budget, party_seed(cfg.seed, repetition, eps_index, 0))?;
    let pb = apply_feature_level_dp(&inst.binned_b, sc, &budget, party_seed(cfg.seed, repetition, eps_index, 1))?;
    let pairs = candidate_pairs_scoped(&pa, &pb, cfg.pairing)?;
    let classifier = match cfg.classifier {
        ClassifierKind::Threshold => Classifier::Threshold { threshold: cfg.threshold },
        ClassifierKind::Logistic => {
            let seed = rng::derive_seed(cfg.seed, "experiment/training", &[repetition as u64, eps_index as u64]);
            let sample = training_sample(&pairs, &inst.truth, cfg.training_pairs_per_class, seed)?;
            Classifier::Logistic { model: train_logistic(&sample, cfg.training_config())? }
        }
    };
    let predictions = classifier.classify(&pairs);
    let ids_a = inst.dataset_a.ids();
    let ids_b = inst.dataset_b.ids();
    let opts = EvalOptions { attribution: cfg.attribution, groups: cfg.groups(), known_ids: Some((&ids_a, &ids_b)) };
    let report: LinkageReport = evaluate(&predictions, &inst.truth, &pairs, &opts)?;
    let groups = report
        .groups
        .iter()
        .map(|gr| {
            let gi = gr.group.index();
            let noisy = sc.scenario != Scenario::Baseline1;
            let predicted_fpr = if noisy {
                analytics::predicted_fpr(gr.group, sc.per_group_eps[gi], sc.per_group_flip[gi], &inst.base, &inst.params).ok()
            } else {
                let b = &inst.base.groups[gi];
                (b.fp_ori + b.tn_ori > 0.0).then(|| b.fp_ori / (b.fp_ori + b.tn_ori))
            };
            let gb = &inst.base.groups[gi];
            let predicted_cost =
                if noisy { gb.expected_pair_cost(sc.per_group_eps[gi], cfg.sensitivity)? } else { gb.cost.base_pairs };
            Ok(GroupRun {
                confusion: gr.confusion,
                cost: gr.cost,
                fpr: gr.confusion.fpr(),
                fnr: gr.confusion.fnr(),
                predicted_fpr,
                predicted_cost,
                dummies_a: count_dummies(&pa, gr.group),
                dummies_b: count_dummies(&pb, gr.group),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        scenario: sc.scenario,
        overall_eps: sc.overall_eps,
        repetition,
        per_group_eps: sc.per_group_eps.clone(),
        per_group_flip: sc.per_group_flip.clone(),
        classifier: classifier.name().to_string(),
        overall: report.overall,
        fairness_loss: report.fairness_loss,
        fairness: report.fairness,
        cost: report.cost,
        groups,
    })
}

/// Runs every (scenario, budget, repetition) in a fixed order. Failed runs
/// are reported in place and do not stop the sweep.
pub fn run_sweep(cfg: &ExperimentConfig, inst: &Instance) -> Vec<RunOutcome> {
    let mut cells = Vec::new();
    for (ei, &eps) in cfg.budgets.iter().enumerate() {
        for &scenario in &cfg.scenarios {
            cells.push((ei, eps, scenario, scenario_config(cfg, inst, scenario, eps, cfg.seed)));
        }
    }
    let jobs: Vec<_> = cells
        .iter()
        .flat_map(|(ei, eps, scenario, sc)| (0..cfg.repetitions).map(move |rep| (*ei, *eps, *scenario, sc, rep)))
        .collect();
    jobs.par_iter()
        .map(|&(ei, eps, scenario, sc, rep)| {
            let result = match sc {
                Ok(sc) => run_once(cfg, inst, sc, rep, ei).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            if let Err(e) = &result {
                log::error!("run {scenario} eps={eps} rep={rep} failed: {e}");
            }
            RunOutcome { scenario, overall_eps: eps, repetition: rep, result }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn runs_csv(groups: usize, outcomes: &[RunOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "scenario", "overall_eps", "repetition", "per_group_eps", "per_group_flip", "classifier", "tp", "fp", "tn", "fn",
        "precision", "recall", "f_star", "fpr", "fnr", "fairness_loss", "fairness", "cost",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for g in 1..=groups {
        for col in ["tp", "fp", "tn", "fn", "fpr", "fnr", "cost", "predicted_fpr", "predicted_cost", "dummies_a", "dummies_b"] {
            header.push(format!("g{g}_{col}"));
        }
    }
    w.write_record(&header)?;
    for o in outcomes {
        let Ok(r) = &o.result else { continue };
        let c = &r.overall;
        let mut row = vec![
            r.scenario.to_string(),
            r.overall_eps.to_string(),
            r.repetition.to_string(),
            join(&r.per_group_eps),
            join(&r.per_group_flip),
            r.classifier.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            opt(c.precision()),
            opt(c.recall()),
            opt(c.f_star()),
            opt(c.fpr()),
            opt(c.fnr()),
            r.fairness_loss.to_string(),
            r.fairness.to_string(),
            r.cost.to_string(),
        ];
        for g in &r.groups {
            let gc = &g.confusion;
            row.extend([
                gc.tp.to_string(),
                gc.fp.to_string(),
                gc.tn.to_string(),
                gc.fn_.to_string(),
                opt(g.fpr),
                opt(g.fnr),
                g.cost.to_string(),
                opt(g.predicted_fpr),
                g.predicted_cost.to_string(),
                g.dummies_a.to_string(),
                g.dummies_b.to_string(),
            ]);
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Mean and standard deviation per (scenario, budget) over succeeded runs.
pub fn aggregate(outcomes: &[RunOutcome]) -> BTreeMap<(Scenario, u64), Vec<(String, f64, f64)>> {
    let mut cells: BTreeMap<(Scenario, u64), Vec<&RunRecord>> = BTreeMap::new();
    for o in outcomes {
        if let Ok(r) = &o.result {
            cells.entry((o.scenario, o.overall_eps.to_bits())).or_default().push(r);
        }
    }
    cells
        .into_iter()
        .map(|(key, runs)| {
            let mut metrics: Vec<(String, Vec<f64>)> = vec![
                ("f_star".into(), runs.iter().filter_map(|r| r.overall.f_star()).collect()),
                ("precision".into(), runs.iter().filter_map(|r| r.overall.precision()).collect()),
                ("recall".into(), runs.iter().filter_map(|r| r.overall.recall()).collect()),
                ("fairness_loss".into(), runs.iter().map(|r| r.fairness_loss).collect()),
                ("fairness".into(), runs.iter().map(|r| r.fairness).collect()),
                ("cost".into(), runs.iter().map(|r| r.cost as f64).collect()),
            ];
            let groups = runs[0].groups.len();
            for g in 0..groups {
                metrics.push((format!("g{}_fpr", g + 1), runs.iter().filter_map(|r| r.groups[g].fpr).collect()));
                metrics.push((format!("g{}_fnr", g + 1), runs.iter().filter_map(|r| r.groups[g].fnr).collect()));
                metrics.push((format!("g{}_cost", g + 1), runs.iter().map(|r| r.groups[g].cost as f64).collect()));
                metrics.push((format!("g{}_predicted_fpr", g + 1), runs.iter().filter_map(|r| r.groups[g].predicted_fpr).collect()));
                metrics.push((format!("g{}_predicted_cost", g + 1), runs.iter().map(|r| r.groups[g].predicted_cost).collect()));
            }
            let stats = metrics
                .into_iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(name, v)| {
                    let (m, s) = mean_std(&v);
                    (name, m, s)
                })
                .collect();
            (key, stats)
        })
        .collect()
}

fn aggregates_csv(outcomes: &[RunOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "overall_eps", "runs", "metric", "mean", "std"])?;
    let mut counts: BTreeMap<(Scenario, u64), usize> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.result.is_ok()) {
        *counts.entry((o.scenario, o.overall_eps.to_bits())).or_default() += 1;
    }
    for ((scenario, eps_bits), stats) in aggregate(outcomes) {
        let n = counts[&(scenario, eps_bits)].to_string();
        for (name, m, s) in stats {
            w.write_record([scenario.to_string(), f64::from_bits(eps_bits).to_string(), n.clone(), name, m.to_string(), s.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn manifest_csv(outcomes: &[RunOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "overall_eps", "repetition", "status", "error"])?;
    for o in outcomes {
        let (status, err) = match &o.result {
            Ok(_) => ("succeeded", String::new()),
            Err(e) => ("failed", e.clone()),
        };
        w.write_record([o.scenario.to_string(), o.overall_eps.to_string(), o.repetition.to_string(), status.into(), err])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub outcomes: Vec<RunOutcome>,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

/// Full sweep writing `runs.csv`, `aggregates.csv`, `manifest.csv` and
/// `instance.txt` into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let inst = build_instance(cfg)?;
    let outcomes = run_sweep(cfg, &inst);
    std::fs::create_dir_all(&cfg.out)?;
    let files = vec![
        (cfg.out.join("runs.csv"), runs_csv(cfg.groups(), &outcomes)?),
        (cfg.out.join("aggregates.csv"), aggregates_csv(&outcomes)?),
        (cfg.out.join("manifest.csv"), manifest_csv(&outcomes)?),
        (cfg.out.join("instance.txt"), instance_summary(cfg, &inst).into_bytes()),
    ];
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    Ok(ExperimentOutcome { outcomes, files: files.into_iter().map(|(p, _)| p).collect() })
}

pub fn instance_summary(cfg: &ExperimentConfig, inst: &Instance) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "records_a {}", inst.dataset_a.len());
    let _ = writeln!(s, "records_b {}", inst.dataset_b.len());
    let _ = writeln!(s, "true_matches {}", inst.truth.len());
    let _ = writeln!(s, "bins_a {}", inst.binned_a.bin_count());
    let _ = writeln!(s, "bins_b {}", inst.binned_b.bin_count());
    let _ = writeln!(s, "measured_fill {}", inst.measured_fill);
    let _ = writeln!(s, "model_fill {}", inst.params.p);
    for (i, g) in inst.base.groups.iter().enumerate() {
        let _ = writeln!(
            s,
            "group {} ({}) tp {} fp {} tn {} fn {} n_a {} n_b {} n_bins {} base_pairs {}",
            i + 1,
            cfg.group_labels[i],
            g.tp_ori,
            g.fp_ori,
            g.tn_ori,
            g.fn_ori,
            g.cost.n_a,
            g.cost.n_b,
            g.cost.n_bins,
            g.cost.base_pairs
        );
    }
    s
}

/// Model and Monte-Carlo probability that a dummy beats the threshold
/// against its progenitor. Progenitors have independent `Bernoulli(p)` bits.
pub fn oracle_fp_curve(params: &AnalyticsParams, flips: &[f64], trials: usize, seed: u64) -> Result<Vec<(f64, f64, f64)>> {
    if trials < 1000 {
        return Err(Error::Config(format!("at least 1000 trials required, got {trials}")));
    }
    flips
        .par_iter()
        .enumerate()
        .map(|(i, &flip)| {
            let mut r = rng::stream(seed, "experiment/oracle-fp", &[i as u64]);
            let mut hits = 0usize;
            for _ in 0..trials {
                let bools: Vec<bool> = (0..params.n_l).map(|_| r.random::<f64>() < params.p).collect();
                let progenitor = BloomFilter::original(Bits::from_bools(&bools), GroupId(1), "p");
                let dummy = make_dummy(&progenitor, flip, &mut r);
                if dice(&dummy, &progenitor)? > params.threshold {
                    hits += 1;
                }
            }
            Ok((flip, analytics::fp_probability(flip, params)?, hits as f64 / trials as f64))
        })
        .collect()
}

/// Per (budget, group): mean predicted FPR and mean simulated FPR over
/// `repetitions` Baseline-2 runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FprCurvePoint {
    pub overall_eps: f64,
    pub group: GroupId,
    pub predicted: f64,
    pub simulated: f64,
    pub simulated_std: f64,
    pub runs: usize,
}

pub fn oracle_fpr_curve(cfg: &ExperimentConfig, budgets: &[f64], repetitions: usize) -> Result<Vec<FprCurvePoint>> {
    if repetitions < 50 {
        return Err(Error::Config(format!("at least 50 repetitions required, got {repetitions}")));
    }
    let mut c = cfg.clone();
    c.scenarios = vec![Scenario::Baseline2];
    c.budgets = budgets.to_vec();
    c.repetitions = repetitions;
    c.classifier = ClassifierKind::Threshold;
    let inst = build_instance(&c)?;
    let outcomes = run_sweep(&c, &inst);
    if let Some(e) = outcomes.iter().find_map(|o| o.result.as_ref().err()) {
        return Err(Error::Config(format!("simulation run failed: {e}")));
    }
    let mut out = Vec::new();
    for &eps in budgets {
        let runs: Vec<&RunRecord> =
            outcomes.iter().filter(|o| o.overall_eps == eps).filter_map(|o| o.result.as_ref().ok()).collect();
        for g in 0..c.groups() {
            let sim: Vec<f64> = runs.iter().filter_map(|r| r.groups[g].fpr).collect();
            let pred: Vec<f64> = runs.iter().filter_map(|r| r.groups[g].predicted_fpr).collect();
            if sim.is_empty() || pred.is_empty() {
                continue;
            }
            let (sm, ss) = mean_std(&sim);
            out.push(FprCurvePoint {
                overall_eps: eps,
                group: GroupId::from_index(g),
                predicted: mean_std(&pred).0,
                simulated: sm,
                simulated_std: ss,
                runs: sim.len(),
            });
        }
    }
    Ok(out)
}

pub fn write_fpr_curve(path: &Path, points: &[FprCurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["eps", "group", "predicted", "simulated", "simulated_std", "runs"])?;
    for p in points {
        w.write_record([
            p.overall_eps.to_string(),
            p.group.to_string(),
            p.predicted.to_string(),
            p.simulated.to_string(),
            p.simulated_std.to_string(),
            p.runs.to_string(),
        ])?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}
