//! Method A: grid search over per-group flip probabilities at fixed budgets.
//! Method B: per-group budgets on the harmonic constraint surface at fixed flips.
//!
//! The model loss saturates wherever the dummy false-positive probability
//! does, so both searches are derivative-free and return the first-found
//! optimum under a fixed tie-break.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::analytics::{fairness_loss, predicted_fpr, AnalyticsParams, BaseRates};
use crate::blocking::{Scenario, ScenarioConfig};
use crate::dp::compose_budget;
use crate::{Error, GroupId, Result};

pub const DEFAULT_GRID_STEP: f64 = 0.01;
pub const DEFAULT_LOG_GRID_POINTS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;
const MAX_SWEEPS: usize = 100;
const GOLDEN_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TracePoint {
    pub values: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct Diagnostics {
    pub evaluations: usize,
    pub iterations: usize,
    /// Loss at the uniform point (equal flips for A is not defined, so only B sets it).
    pub uniform_loss: Option<f64>,
    /// Coarse-grid losses (Method B, two groups).
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OptimizationResult {
    /// Flips for Method A, budgets for Method B.
    pub per_group_values: Vec<f64>,
    pub achieved_loss: f64,
    pub diagnostics: Diagnostics,
}

/// Per-group FNRs and an FPR function; the loss only couples groups through
/// the final max, so per-group FPRs can be tabulated.
struct Objective<'a> {
    base: &'a BaseRates,
    params: &'a AnalyticsParams,
    fnrs: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(base: &'a BaseRates, params: &'a AnalyticsParams) -> Result<Self> {
        if base.groups.len() < 2 {
            return Err(Error::Domain("optimisation needs at least two groups".into()));
        }
        params.validate()?;
        let fnrs = base.groups.iter().map(|g| g.fnr()).collect::<Result<Vec<_>>>()?;
        Ok(Objective { base, params, fnrs })
    }

    fn groups(&self) -> usize {
        self.fnrs.len()
    }

    fn fpr(&self, gi: usize, eps: f64, flip: f64) -> Result<f64> {
        predicted_fpr(GroupId::from_index(gi), eps, flip, self.base, self.params)
    }

    fn loss_from_fprs(&self, fprs: &[f64]) -> f64 {
        fairness_loss(fprs, &self.fnrs)
    }

    fn loss(&self, eps: &[f64], flips: &[f64]) -> Result<f64> {
        let fprs = (0..self.groups()).map(|i| self.fpr(i, eps[i], flips[i])).collect::<Result<Vec<_>>>()?;
        Ok(self.loss_from_fprs(&fprs))
    }
}

fn check_all_equal(v: &[f64], what: &str) -> Result<()> {
    if v.windows(2).all(|w| w[0] == w[1]) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be equal across groups")))
    }
}

/// Points `0, step, 2 step, ..., 1`.
pub fn flip_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.1) {
        return Err(Error::Domain(format!("grid step {step} outside (0, 0.1]")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| (i as f64 * step).min(1.0)).collect())
}

/// Orders candidates: lower loss first, then larger flip sum, then
/// lexicographically larger flips.
fn method_a_order(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| {
            let (sa, sb): (f64, f64) = (a.1.iter().sum(), b.1.iter().sum());
            sb.total_cmp(&sa)
        })
        .then_with(|| {
            for (x, y) in a.1.iter().zip(&b.1) {
                match y.total_cmp(x) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            Ordering::Equal
        })
}

fn unravel(mut idx: usize, radix: usize, dims: usize) -> Vec<usize> {
    let mut out = vec![0; dims];
    for d in (0..dims).rev() {
        out[d] = idx % radix;
        idx /= radix;
    }
    out
}

/// Exhaustive search over `[0,1]^G` at `grid_step` with budgets held fixed.
pub fn method_a_search(fixed_eps: &[f64], base: &BaseRates, params: &AnalyticsParams, grid_step: f64) -> Result<OptimizationResult> {
    let obj = Objective::new(base, params)?;
    let g = obj.groups();
    if fixed_eps.len() != g {
        return Err(Error::Dimension { expected: g, found: fixed_eps.len() });
    }
    check_all_equal(fixed_eps, "method-a budgets")?;
    let grid = flip_grid(grid_step)?;
    let table: Vec<Vec<f64>> = (0..g)
        .map(|gi| grid.iter().map(|&f| obj.fpr(gi, fixed_eps[gi], f)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let radix = grid.len();
    let total = radix.checked_pow(g as u32).ok_or_else(|| Error::Domain("grid too large".into()))?;
    let best = (0..total)
        .into_par_iter()
        .map(|idx| {
            let pos = unravel(idx, radix, g);
            let fprs: Vec<f64> = pos.iter().enumerate().map(|(gi, &p)| table[gi][p]).collect();
            (obj.loss_from_fprs(&fprs), pos.iter().map(|&p| grid[p]).collect::<Vec<f64>>())
        })
        .min_by(method_a_order)
        .expect("non-empty grid");
    Ok(OptimizationResult {
        per_group_values: best.1,
        achieved_loss: best.0,
        diagnostics: Diagnostics { evaluations: total, iterations: 1, ..Diagnostics::default() },
    })
}

/// `n` log-spaced points strictly inside `(lo, hi)` endpoints included.
fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Golden-section minimisation of `f` on `[a, b]`; returns the best point
/// seen (including the endpoints) and the iteration count.
fn golden_section(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol_x: f64) -> Result<(f64, f64, usize)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut best = (a, f(a)?);
    let fb = f(b)?;
    if fb < best.1 {
        best = (b, fb);
    }
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    let mut it = 0;
    while (b - a).abs() > tol_x && it < GOLDEN_ITERATIONS {
        for (x, fx) in [(c, fc), (d, fd)] {
            if fx < best.1 {
                best = (x, fx);
            }
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
        it += 1;
    }
    for (x, fx) in [(c, fc), (d, fd)] {
        if fx < best.1 {
            best = (x, fx);
        }
    }
    Ok((best.0, best.1, it))
}

/// Searches a 1-D parameter in log space: coarse grid, then golden-section
/// refinement between the neighbours of the best grid point.
fn search_1d(f: &(dyn Fn(f64) -> Result<f64> + Sync), lo: f64, hi: f64, points: usize, trace: bool) -> Result<(f64, f64, usize, Vec<(f64, f64)>)> {
    let grid = log_grid(lo, hi, points);
    let values = grid.par_iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .expect("non-empty grid");
    let (l, r) = (grid[bi.saturating_sub(1)].ln(), grid[(bi + 1).min(points - 1)].ln());
    let g = |t: f64| f(t.exp());
    let (t, fx, it) = golden_section(&g, l, r, 1e-12)?;
    let (x, fx) = if values[bi] <= fx { (grid[bi], values[bi]) } else { (t.exp(), fx) };
    let trace = if trace { grid.into_iter().zip(values).collect() } else { Vec::new() };
    Ok((x, fx, points + it + 3, trace))
}

/// Budgets minimising the model loss subject to `sum 1/eps_g = 1/overall`.
pub fn method_b_allocate(overall_eps: f64, fixed_flip: &[f64], base: &BaseRates, params: &AnalyticsParams, tol: f64) -> Result<OptimizationResult> {
    method_b_allocate_with(overall_eps, fixed_flip, base, params, tol, DEFAULT_LOG_GRID_POINTS)
}

pub fn method_b_allocate_with(
    overall_eps: f64,
    fixed_flip: &[f64],
    base: &BaseRates,
    params: &AnalyticsParams,
    tol: f64,
    grid_points: usize,
) -> Result<OptimizationResult> {
    let obj = Objective::new(base, params)?;
    let g = obj.groups();
    if !(overall_eps > 0.0 && overall_eps.is_finite()) {
        return Err(Error::Domain(format!("overall budget must be positive, got {overall_eps}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if grid_points < 3 {
        return Err(Error::Domain("log grid needs at least 3 points".into()));
    }
    if fixed_flip.len() != g {
        return Err(Error::Dimension { expected: g, found: fixed_flip.len() });
    }
    check_all_equal(fixed_flip, "method-b flips")?;

    let uniform = vec![g as f64 * overall_eps; g];
    let uniform_loss = obj.loss(&uniform, fixed_flip)?;
    let mut diag = Diagnostics { uniform_loss: Some(uniform_loss), ..Diagnostics::default() };

    let (eps, loss) = if g == 2 {
        let inv = 1.0 / overall_eps;
        let f = |e1: f64| obj.loss(&[e1, 1.0 / (inv - 1.0 / e1)], fixed_flip);
        let (e1, loss, evals, trace) = search_1d(&f, 1.001 * overall_eps, 1000.0 * overall_eps, grid_points, true)?;
        diag.evaluations = evals + 1;
        diag.iterations = 1;
        diag.trace = trace.into_iter().map(|(x, l)| TracePoint { values: vec![x, 1.0 / (inv - 1.0 / x)], loss: l }).collect();
        (vec![e1, 1.0 / (inv - 1.0 / e1)], loss)
    } else {
        coordinate_descent(&obj, overall_eps, fixed_flip, uniform.clone(), uniform_loss, tol, grid_points, &mut diag)?
    };

    let (per_group_values, achieved_loss) = if uniform_loss <= loss { (uniform, uniform_loss) } else { (eps, loss) };
    let composed = compose_budget(&per_group_values)?;
    if (composed - overall_eps).abs() > 1e-9 * overall_eps.max(1.0) {
        return Err(Error::Convergence { iterations: diag.iterations, detail: format!("budgets compose to {composed}, not {overall_eps}") });
    }
    Ok(OptimizationResult { per_group_values, achieved_loss, diagnostics: diag })
}

/// Cyclic pairwise moves: for each pair (i, j) the reciprocal sum
/// `1/eps_i + 1/eps_j` is held fixed and split by a 1-D search.
#[allow(clippy::too_many_arguments)]
fn coordinate_descent(
    obj: &Objective,
    overall_eps: f64,
    flips: &[f64],
    mut eps: Vec<f64>,
    mut loss: f64,
    tol: f64,
    grid_points: usize,
    diag: &mut Diagnostics,
) -> Result<(Vec<f64>, f64)> {
    let g = eps.len();
    for sweep in 1..=MAX_SWEEPS {
        let start = loss;
        for i in 0..g {
            for j in i + 1..g {
                let s = 1.0 / eps[i] + 1.0 / eps[j];
                let eval = |share: f64| {
                    let mut e = eps.clone();
                    e[i] = 1.0 / (share * s);
                    e[j] = 1.0 / ((1.0 - share) * s);
                    obj.loss(&e, flips)
                };
                let (share, l, evals, _) = search_1d(&eval, 1e-3, 1.0 - 1e-3, grid_points, false)?;
                diag.evaluations += evals;
                if l < loss {
                    eps[i] = 1.0 / (share * s);
                    eps[j] = 1.0 / ((1.0 - share) * s);
                    // Re-project so rounding cannot drift off the constraint.
                    let scale = compose_budget(&eps)? / overall_eps;
                    eps.iter_mut().for_each(|e| *e /= scale);
                    loss = obj.loss(&eps, flips)?;
                }
            }
        }
        diag.iterations = sweep;
        if start - loss <= tol {
            return Ok((eps, loss));
        }
    }
    Err(Error::Convergence { iterations: MAX_SWEEPS, detail: format!("loss still improving by more than {tol}") })
}

/// Scenario config carrying an optimizer's output, for the blocking stage.
pub fn to_scenario(result: &OptimizationResult, scenario: Scenario, other: &[f64], overall_eps: f64, threshold: f64, seed: u64) -> Result<ScenarioConfig> {
    let (per_group_eps, per_group_flip) = match scenario {
        Scenario::MethodA => (other.to_vec(), result.per_group_values.clone()),
        Scenario::MethodB => (result.per_group_values.clone(), other.to_vec()),
        s => return Err(Error::Config(format!("{s} is not an optimised scenario"))),
    };
    let cfg = ScenarioConfig { scenario, per_group_eps, per_group_flip, overall_eps, threshold, seed };
    cfg.validate()?;
    Ok(cfg)
}

/// TOML fragment with `scenario`, `per_group_eps` and `per_group_flip`.
pub fn scenario_fragment(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}
