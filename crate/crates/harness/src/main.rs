//! `pprl`: command-line driver for the linkage toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use pprl_core::blocking::{self, Scenario, ScenarioConfig};
use pprl_core::dp::PrivacyBudget;
use pprl_core::encoding::{self, BloomFilter};
use pprl_core::experiment::{self, ClassifierKind, ExperimentConfig};
use pprl_core::linkage::{self, Classifier, EvalOptions, ReportContext};
use pprl_core::{analytics, optimize, records};

#[derive(Parser)]
#[command(name = "pprl", version, about = "Privacy-preserving record linkage with fairness-aware DP blocking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
    /// Overall privacy budget.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Flip probability; one value or one per group, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    flip: Option<Vec<f64>>,
    #[arg(long, global = true, value_parser = parse_classifier)]
    classifier: Option<ClassifierKind>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

fn parse_classifier(s: &str) -> Result<ClassifierKind, String> {
    match s {
        "threshold" => Ok(ClassifierKind::Threshold),
        "logistic" => Ok(ClassifierKind::Logistic),
        other => Err(format!("unknown classifier {other:?} (threshold or logistic)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate two synthetic parties and their ground truth.
    GenData,
    /// Encode a dataset CSV into Bloom filters.
    Encode {
        #[arg(long)]
        input: PathBuf,
    },
    /// Bin encoded filters and add DP dummies; writes the released view and a sidecar.
    Block {
        #[arg(long)]
        input: PathBuf,
        /// Per-group budgets (Method B); defaults to the uniform split of --eps.
        #[arg(long, value_delimiter = ',')]
        group_eps: Option<Vec<f64>>,
    },
    /// Link two released views and evaluate against ground truth.
    Link {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run the configured scenario sweep.
    Experiment,
    /// Dummy false-positive probability: model against Monte Carlo.
    OracleFp {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0.02)]
        step: f64,
        #[arg(long, default_value_t = 0.5)]
        max_flip: f64,
    },
    /// Predicted against simulated FPR over the budget grid.
    OracleFpr {
        #[arg(long, default_value_t = 50)]
        repetitions: usize,
    },
    /// Fairness-optimal flips at fixed uniform budgets.
    OptimizeA,
    /// Fairness-optimal per-group budgets under the overall budget.
    OptimizeB,
}

fn config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(s) = common.scenario {
        cfg.scenarios = vec![s];
    }
    if let Some(e) = common.eps {
        cfg.budgets = vec![e];
    }
    if let Some(f) = &common.flip {
        cfg.flip = f[0];
    }
    if let Some(c) = common.classifier {
        cfg.classifier = c;
    }
    if let Some(t) = common.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn per_group(values: &[f64], groups: usize, what: &str) -> anyhow::Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; groups]),
        n if n == groups => Ok(values.to_vec()),
        n => bail!("{what}: expected 1 or {groups} values, got {n}"),
    }
}

fn sidecar_of(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("released");
    path.with_file_name(format!("{stem}.sidecar.csv"))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData => {
            let cfg = config(common)?;
            let dir = out_path(common, "data");
            std::fs::create_dir_all(&dir)?;
            let (a, b, truth) = experiment::load_or_generate(&cfg)?;
            records::write_dataset(&dir.join("dataset_a.csv"), &a)?;
            records::write_dataset(&dir.join("dataset_b.csv"), &b)?;
            records::write_ground_truth(&dir.join("ground_truth.csv"), &truth)?;
            println!("wrote {} + {} records and {} true matches to {}", a.len(), b.len(), truth.len(), dir.display());
        }
        Command::Encode { input } => {
            let cfg = config(common)?;
            let enc = cfg.encoding()?;
            let ds = records::load_dataset(input, &cfg.schema()?)?;
            let mut empty = 0;
            let filters: Vec<BloomFilter> = ds
                .records
                .iter()
                .map(|r| {
                    let e = encoding::encode_record(r, &enc);
                    empty += usize::from(e.warning.is_some());
                    e.filter
                })
                .collect();
            let out = out_path(common, "filters.csv");
            encoding::write_filters(&out, &filters, enc.n_l)?;
            println!("encoded {} records ({} empty) to {}", filters.len(), empty, out.display());
        }
        Command::Block { input, group_eps } => {
            let cfg = config(common)?;
            let g = cfg.groups();
            let scenario = common.scenario.unwrap_or(Scenario::Baseline2);
            let eps = cfg.budgets[0];
            let flips = per_group(common.flip.as_deref().unwrap_or(&[cfg.flip]), g, "--flip")?;
            let per_group_eps = match group_eps {
                Some(v) => per_group(v, g, "--group-eps")?,
                None => vec![g as f64 * eps; g],
            };
            let sc = ScenarioConfig { scenario, per_group_eps, per_group_flip: flips, overall_eps: eps, threshold: cfg.threshold, seed: cfg.seed };
            sc.validate()?;
            let filters = encoding::read_filters(input)?;
            let binned = blocking::block_dataset(&filters, &cfg.encoding()?)?;
            let budget = PrivacyBudget::new(sc.per_group_eps.clone(), cfg.sensitivity)?;
            let perturbed = blocking::apply_feature_level_dp(&binned, &sc, &budget, cfg.seed)?;
            let out = out_path(common, "released.csv");
            blocking::write_released(&out, &sidecar_of(&out), &perturbed, cfg.seed)?;
            println!(
                "{} bins, {} originals, {} dummies -> {} (sidecar {})",
                perturbed.bin_count(),
                binned.len(),
                perturbed.dummy_total(),
                out.display(),
                sidecar_of(&out).display()
            );
        }
        Command::Link { a, b, truth } => {
            let cfg = config(common)?;
            let ra = blocking::read_released(a, &sidecar_of(a))?;
            let rb = blocking::read_released(b, &sidecar_of(b))?;
            let truth = records::load_ground_truth(truth)?;
            let pairs = linkage::candidate_pairs_scoped(&ra, &rb, cfg.pairing)?;
            let classifier = match cfg.classifier {
                ClassifierKind::Threshold => Classifier::Threshold { threshold: cfg.threshold },
                ClassifierKind::Logistic => {
                    let sample = linkage::training_sample(&pairs, &truth, cfg.training_pairs_per_class, cfg.seed)?;
                    Classifier::Logistic { model: linkage::train_logistic(&sample, cfg.training_config())? }
                }
            };
            let predictions = classifier.classify(&pairs);
            let opts = EvalOptions { attribution: cfg.attribution, groups: cfg.groups(), known_ids: None };
            let report = linkage::evaluate(&predictions, &truth, &pairs, &opts)?;
            let ctx = ReportContext {
                scenario: common.scenario.map_or("unspecified".into(), |s| s.to_string()),
                overall_eps: common.eps.unwrap_or(f64::NAN),
                per_group_eps: Vec::new(),
                per_group_flip: common.flip.clone().unwrap_or_default(),
                classifier: classifier.name().into(),
            };
            let out = out_path(common, "report.csv");
            linkage::write_report_csv(&out, &ctx, &report)?;
            print!("{}", linkage::report_text(&ctx, &report));
        }
        Command::Experiment => {
            let cfg = config(common)?;
            let outcome = experiment::run_experiment(&cfg)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            let failed = outcome.failures();
            println!("{} runs, {} failed", outcome.outcomes.len(), failed);
            return Ok(failed == 0);
        }
        Command::OracleFp { trials, step, max_flip } => {
            let cfg = config(common)?;
            let params = cfg.analytics_params(cfg.fill_p)?;
            let n = (max_flip / step).round() as usize;
            let flips: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
            let rows = experiment::oracle_fp_curve(&params, &flips, *trials, cfg.seed)?;
            let out = out_path(common, "oracle_fp.csv");
            analytics::write_curve(&out, "flip", &rows)?;
            let gap = rows.iter().map(|r| (r.1 - r.2).abs()).fold(0.0, f64::max);
            println!("max |predicted - simulated| = {gap:.4}; wrote {}", out.display());
        }
        Command::OracleFpr { repetitions } => {
            let cfg = config(common)?;
            let points = experiment::oracle_fpr_curve(&cfg, &cfg.budgets, *repetitions)?;
            let out = out_path(common, "oracle_fpr.csv");
            experiment::write_fpr_curve(&out, &points)?;
            for p in &points {
                println!("eps {:>6} group {} predicted {:.4} simulated {:.4}", p.overall_eps, p.group, p.predicted, p.simulated);
            }
        }
        Command::OptimizeA | Command::OptimizeB => {
            let cfg = config(common)?;
            let inst = experiment::build_instance(&cfg)?;
            let eps = cfg.budgets[0];
            let g = cfg.groups();
            let (scenario, result, other) = if matches!(cli.command, Command::OptimizeA) {
                let fixed = vec![g as f64 * eps; g];
                (Scenario::MethodA, optimize::method_a_search(&fixed, &inst.base, &inst.params, cfg.grid_step)?, fixed)
            } else {
                let flips = per_group(common.flip.as_deref().unwrap_or(&[cfg.flip]), g, "--flip")?;
                (Scenario::MethodB, optimize::method_b_allocate_with(eps, &flips, &inst.base, &inst.params, cfg.tol, cfg.log_grid_points)?, flips)
            };
            let sc = optimize::to_scenario(&result, scenario, &other, eps, cfg.threshold, cfg.seed)?;
            let fragment = optimize::scenario_fragment(&sc)?;
            let out = out_path(common, "scenario.toml");
            std::fs::write(&out, &fragment)?;
            println!("loss {:.6} values {:?}", result.achieved_loss, result.per_group_values);
            if let Some(u) = result.diagnostics.uniform_loss {
                println!("uniform loss {u:.6}");
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
