//! Time-inconsistent cost functionals and the spike-variation equilibrium check.
//!
//! A cost is evaluated as
//!
//! ```text
//! J(t, x, u) = E[ integral of h(s, X, E[X], u) ds + g(X(T), E[X(T)]) ] + G(E[X(T)])
//! ```
//!
//! where the additive `G` term depends on the terminal mean only (variance
//! costs live there, e.g. `-gamma/2 (E[X(T)])^2`). Monte Carlo estimates use
//! the ensemble mean as the `E[X]` proxy; the `G` and mean arguments are
//! treated as exact given the ensemble, which introduces an O(1/M) bias that
//! is documented and negligible against the standard error at default path
//! counts.
//!
//! A strategy is accepted as a sub-game perfect equilibrium when the
//! spike-variation limit
//!
//! ```text
//! lim_{eps -> 0} (J(t, x, base) - J(t, x, u^eps)) / eps <= 0
//! ```
//!
//! holds for every tested deviation, estimated by common-random-number
//! paired differences over a decreasing epsilon sequence and extrapolated
//! to zero by a weighted linear fit.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::sde::{
    resample_with_same_noise, simulate, CoefficientFn, FeedbackStrategy, MeanFieldDynamics,
    PathEnsemble, SpikeOverride, SpikeStrategy, Strategy,
};

/// Running + terminal cost, split into a pathwise part and an additive term
/// depending only on the terminal mean.
#[derive(Clone)]
pub struct CostFunctional {
    running: Arc<CoefficientFn>,
    terminal: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    mean_adjust: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    context: Option<(f64, f64)>,
}

impl CostFunctional {
    pub fn new<H, G>(running: H, terminal: G) -> Self
    where
        H: Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            running: Arc::new(running),
            terminal: Arc::new(terminal),
            mean_adjust: Arc::new(|_| 0.0),
            context: None,
        }
    }

    /// Additive terminal term `G(E[X(T)])`.
    pub fn with_mean_adjust<A>(mut self, adjust: A) -> Self
    where
        A: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.mean_adjust = Arc::new(adjust);
        self
    }

    /// Record the `(t, x)` evaluation point for costs that depend on it
    /// (moving-target costs); evaluation then insists the ensemble starts at `t`.
    pub fn with_context(mut self, t: f64, x: f64) -> Self {
        self.context = Some((t, x));
        self
    }

    #[inline]
    pub fn running(&self, s: f64, y: f64, z: f64, v: f64) -> f64 {
        (self.running)(s, y, z, v)
    }

    #[inline]
    pub fn terminal(&self, y: f64, z: f64) -> f64 {
        (self.terminal)(y, z)
    }

    #[inline]
    pub fn mean_adjust(&self, z: f64) -> f64 {
        (self.mean_adjust)(z)
    }

    pub fn context(&self) -> Option<(f64, f64)> {
        self.context
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    /// Standard error of the pathwise part; mean-dependent terms are treated
    /// as deterministic given the ensemble.
    pub std_error: f64,
    pub n_paths: usize,
    pub paired: bool,
    /// Seed of the (common) noise, recorded for reproducibility.
    pub seed: Option<u64>,
}

fn effective_control<S: Strategy + ?Sized>(
    dynamics: &MeanFieldDynamics,
    strategy: &S,
    s: f64,
    y: f64,
) -> f64 {
    let u = strategy.control(s, y);
    match dynamics.control_set() {
        Some((lo, hi)) => u.clamp(lo, hi),
        None => u,
    }
}

/// Pathwise cost samples: `sum_k h(s_k, X_k, mbar_k, u_k) dt + g(X_T, mbar_T)`.
///
/// Controls are recomputed with the same clamping the simulator applied.
pub fn per_path_costs<S>(
    ensemble: &PathEnsemble,
    cost: &CostFunctional,
    dynamics: &MeanFieldDynamics,
    strategy: &S,
) -> Result<Vec<f64>>
where
    S: Strategy + ?Sized,
{
    if let Some((t, _)) = cost.context() {
        if ensemble.grid().t0() != t {
            return Err(Error::Grid {
                reason: format!(
                    "cost context starts at t = {t} but ensemble grid starts at {}",
                    ensemble.grid().t0()
                ),
            });
        }
    }
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mean_t = ensemble.mean_at(n);
    let out = (0..ensemble.n_paths())
        .map(|m| {
            let path = ensemble.path(m);
            let mut acc = 0.0;
            for k in 0..n {
                let s = grid.point(k);
                let y = path[k];
                let u = effective_control(dynamics, strategy, s, y);
                acc += cost.running(s, y, ensemble.mean_at(k), u) * dt;
            }
            acc + cost.terminal(path[n], mean_t)
        })
        .collect();
    Ok(out)
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo value of the cost functional on a simulated ensemble.
pub fn evaluate_cost<S>(
    ensemble: &PathEnsemble,
    cost: &CostFunctional,
    dynamics: &MeanFieldDynamics,
    strategy: &S,
) -> Result<CostEstimate>
where
    S: Strategy + ?Sized,
{
    let pathwise = per_path_costs(ensemble, cost, dynamics, strategy)?;
    let (mean, se) = mean_and_se(&pathwise);
    let adjust = cost.mean_adjust(ensemble.mean_at(ensemble.grid().n_steps()));
    Ok(CostEstimate {
        value: mean + adjust,
        std_error: se,
        n_paths: ensemble.n_paths(),
        paired: false,
        seed: Some(ensemble.seed()),
    })
}

fn validate_window(t: f64, epsilon: f64, grid: &TimeGrid) -> Result<()> {
    let dt = grid.dt();
    if epsilon < dt {
        return Err(Error::Window {
            reason: format!("epsilon = {epsilon} is below the grid step {dt}"),
        });
    }
    if t + epsilon > grid.t_end() + 1e-9 * dt {
        return Err(Error::Window {
            reason: format!("window [{t}, {}] exceeds the horizon {}", t + epsilon, grid.t_end()),
        });
    }
    Ok(())
}

/// Build the spike deviation of `base` used throughout: the control is
/// shifted by `nu = v - base(t, x)` on `[t, t + epsilon)`, so `v` is the
/// control actually applied at the evaluation point and `v = base(t, x)`
/// reproduces the base strategy exactly.
fn spike_of(base: &FeedbackStrategy, v: f64, t: f64, x: f64, epsilon: f64) -> Result<SpikeStrategy> {
    let nu = v - base.value(t, x);
    SpikeStrategy::new(base.clone(), SpikeOverride::Shift(nu), t, epsilon)
}

struct PairedBase {
    ensemble: PathEnsemble,
    pathwise: Vec<f64>,
}

fn paired_base(
    dynamics: &MeanFieldDynamics,
    cost: &CostFunctional,
    base: &FeedbackStrategy,
    t: f64,
    x: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PairedBase> {
    let ensemble = simulate(dynamics, base, t, x, grid, n_paths, seed)?;
    let pathwise = per_path_costs(&ensemble, cost, dynamics, base)?;
    Ok(PairedBase { ensemble, pathwise })
}

fn ratio_against_base(
    base: &PairedBase,
    dynamics: &MeanFieldDynamics,
    cost: &CostFunctional,
    base_strategy: &FeedbackStrategy,
    v: f64,
    t: f64,
    x: f64,
    epsilon: f64,
) -> Result<CostEstimate> {
    let grid = *base.ensemble.grid();
    validate_window(t, epsilon, &grid)?;
    let spike = spike_of(base_strategy, v, t, x, epsilon)?;
    let seed = base.ensemble.seed();
    let n_paths = base.ensemble.n_paths();
    let spiked = resample_with_same_noise(&base.ensemble, dynamics, &spike, t, x, &grid, n_paths, seed)?;
    let spiked_pathwise = per_path_costs(&spiked, cost, dynamics, &spike)?;

    let diffs: Vec<f64> = base
        .pathwise
        .iter()
        .zip(spiked_pathwise.iter())
        .map(|(a, b)| a - b)
        .collect();
    let (mean_diff, se_diff) = mean_and_se(&diffs);
    let n = grid.n_steps();
    let adjust_diff = cost.mean_adjust(base.ensemble.mean_at(n)) - cost.mean_adjust(spiked.mean_at(n));
    Ok(CostEstimate {
        value: (mean_diff + adjust_diff) / epsilon,
        std_error: se_diff / epsilon,
        n_paths,
        paired: true,
        seed: Some(seed),
    })
}

/// Paired estimate of `(J(t,x,base) - J(t,x,u^eps)) / eps` for the constant
/// deviation `v` applied on `[t, t + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn spike_cost_ratio(
    dynamics: &MeanFieldDynamics,
    cost: &CostFunctional,
    base: &FeedbackStrategy,
    v: f64,
    t: f64,
    x: f64,
    epsilon: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    validate_window(t, epsilon, grid)?;
    let paired = paired_base(dynamics, cost, base, t, x, grid, n_paths, seed)?;
    ratio_against_base(&paired, dynamics, cost, base, v, t, x, epsilon)
}

/// One per-epsilon ratio estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub epsilon: f64,
    pub value: f64,
    pub std_error: f64,
}

/// Spike-limit evidence for one `(t, x, v)` cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeLimitReport {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub epsilons: Vec<f64>,
    pub ratios: Vec<RatioEstimate>,
    pub extrapolated_limit: f64,
    pub extrapolated_se: f64,
    /// Analytic limit from the adjoint oracle, when one is available.
    pub analytic_limit: Option<f64>,
    /// The epsilon-extrapolation order is a heuristic; a non-monotone ratio
    /// sequence is flagged rather than trusted silently.
    pub non_monotone: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail => write!(f, "fail"),
        }
    }
}

/// Result of a full equilibrium verification at one `(t, x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumCheck {
    pub reports: Vec<SpikeLimitReport>,
    pub verdict: Verdict,
    pub tol_se: f64,
}

/// Analytic spike limits supplied by a solved equilibrium (the variational
/// identity evaluated through the adjoint processes).
pub trait SpikeLimitOracle {
    fn analytic_spike_limit(&self, t: f64, x: f64, v: f64) -> f64;
}

/// Weighted least-squares line through `(xs, ys)` with per-point standard
/// errors; returns the intercept at zero and its standard error.
fn weighted_intercept_at_zero(xs: &[f64], ys: &[f64], ses: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 1 {
        return (ys[0], ses[0]);
    }
    let scale = ys.iter().fold(0.0f64, |a, y| a.max(y.abs())).max(1e-300);
    let se_eff: Vec<f64> = ses.iter().map(|&s| s.max(1e-12 * scale)).collect();
    let se_ref = se_eff.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = se_eff.iter().map(|&s| (se_ref / s) * (se_ref / s)).collect();

    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let swxx: f64 = w.iter().zip(xs).map(|(w, x)| w * x * x).sum();
    let swy: f64 = w.iter().zip(ys).map(|(w, y)| w * y).sum();
    let swxy: f64 = w.iter().zip(xs.iter().zip(ys)).map(|(w, (x, y))| w * x * y).sum();
    let delta = sw * swxx - swx * swx;
    if !(delta > 0.0) || !delta.is_finite() {
        // Degenerate abscissas: fall back to the weighted mean.
        return (swy / sw, (se_ref * se_ref / sw).sqrt());
    }
    let intercept = (swxx * swy - swx * swxy) / delta;
    let var = se_ref * se_ref * swxx / delta;
    (intercept, var.max(0.0).sqrt())
}

fn is_monotone(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0]) || values.windows(2).all(|w| w[1] <= w[0])
}

/// Verify the equilibrium condition at `(t, x)`: for every deviation the
/// extrapolated spike limit must not exceed `tol_se` standard errors above
/// zero. Ratios for all `(v, epsilon)` cells share one base ensemble, so the
/// whole sweep is common-random-number paired.
#[allow(clippy::too_many_arguments)]
pub fn verify_equilibrium(
    dynamics: &MeanFieldDynamics,
    cost: &CostFunctional,
    strategy: &FeedbackStrategy,
    t: f64,
    x: f64,
    deviations: &[f64],
    epsilons: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    tol_se: f64,
    oracle: Option<&dyn SpikeLimitOracle>,
) -> Result<EquilibriumCheck> {
    if deviations.is_empty() {
        return Err(Error::parameter("deviation list must be nonempty"));
    }
    if epsilons.is_empty() {
        return Err(Error::parameter("epsilon list must be nonempty"));
    }
    if !epsilons.windows(2).all(|w| w[1] < w[0]) {
        return Err(Error::parameter("epsilons must be strictly decreasing"));
    }
    for &eps in epsilons {
        validate_window(t, eps, grid)?;
    }

    let base = paired_base(dynamics, cost, strategy, t, x, grid, n_paths, seed)?;
    let mut reports = Vec::with_capacity(deviations.len());
    for &v in deviations {
        let mut ratios = Vec::with_capacity(epsilons.len());
        for &eps in epsilons {
            let est = ratio_against_base(&base, dynamics, cost, strategy, v, t, x, eps)?;
            ratios.push(RatioEstimate {
                epsilon: eps,
                value: est.value,
                std_error: est.std_error,
            });
        }
        let xs: Vec<f64> = ratios.iter().map(|r| r.epsilon).collect();
        let ys: Vec<f64> = ratios.iter().map(|r| r.value).collect();
        let ses: Vec<f64> = ratios.iter().map(|r| r.std_error).collect();
        let (limit, limit_se) = weighted_intercept_at_zero(&xs, &ys, &ses);
        reports.push(SpikeLimitReport {
            t,
            x,
            v,
            epsilons: epsilons.to_vec(),
            non_monotone: !is_monotone(&ys),
            ratios,
            extrapolated_limit: limit,
            extrapolated_se: limit_se,
            analytic_limit: oracle.map(|o| o.analytic_spike_limit(t, x, v)),
        });
    }

    let verdict = if reports
        .iter()
        .all(|r| r.extrapolated_limit <= tol_se * r.extrapolated_se)
    {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(EquilibriumCheck {
        reports,
        verdict,
        tol_se,
    })
}

/// The maximum-principle test function
///
/// ```text
/// Hfun(t, x, v) = H(t, x, v, p, q) - 1/2 P sigma(t,x,x,u_hat)^2
///                 + 1/2 P (sigma(t,x,x,v) - sigma(t,x,x,u_hat))^2
/// ```
///
/// with `H = b p + sigma q - h`. Equilibrium strategies maximize it in `v`;
/// when the diffusion carries no control, its argmax coincides with the
/// argmax of `H` alone.
#[allow(clippy::too_many_arguments)]
pub fn h_function(
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    q: f64,
    big_p: f64,
    u_hat: f64,
    dynamics: &MeanFieldDynamics,
    cost: &CostFunctional,
) -> f64 {
    let hamiltonian = |u: f64| {
        dynamics.drift(t, x, x, u) * p + dynamics.diffusion(t, x, x, u) * q - cost.running(t, x, x, u)
    };
    let sigma_hat = dynamics.diffusion(t, x, x, u_hat);
    let delta_sigma = dynamics.diffusion(t, x, x, v) - sigma_hat;
    hamiltonian(v) - 0.5 * big_p * sigma_hat * sigma_hat + 0.5 * big_p * delta_sigma * delta_sigma
}

/// CSV export of spike reports: one row per `(t, x, v, epsilon)`.
pub fn spike_reports_csv(reports: &[SpikeLimitReport]) -> String {
    let mut out = String::from("t,x,v,epsilon,ratio,ratio_se,extrapolated_limit,extrapolated_se,analytic_limit\n");
    for r in reports {
        for e in &r.ratios {
            let analytic = r.analytic_limit.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.t, r.x, r.v, e.epsilon, e.value, e.std_error, r.extrapolated_limit, r.extrapolated_se, analytic
            ));
        }
    }
    out
}
