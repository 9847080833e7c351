//! The three closed-form linear-quadratic equilibria.
//!
//! Each family reduces its backward adjoint equation to deterministic
//! coefficient ODEs through a linear ansatz, solved here both numerically
//! (fourth-order Runge–Kutta, backward from the exact terminal conditions)
//! and in closed form where one exists:
//!
//! * `mv_constant` — mean-variance with constant risk aversion:
//!   `dX = (rX + (alpha - r)u) ds + sigma u dW`,
//!   cost `gamma/2 Var(X_T) - E[X_T]`. Coefficients
//!   `A_s = gamma e^{2r(T-s)}`, `C_s = e^{r(T-s)}`, equilibrium
//!   `phi(s) = (alpha - r)/sigma^2 * C_s/A_s`, second-order adjoint
//!   `P(s) = -gamma e^{2r(T-s)}`.
//!
//! * `mv_state_dep` — risk aversion `gamma(x) = gamma/x`; same dynamics,
//!   normalized cost `1/2 Var(X_T) - (x/gamma) E[X_T]`. System
//!   `A' + 2rA + kappa C = 0`, `C' + rC = 0`, `A_T = C_T = 1` with
//!   `kappa = (alpha-r)^2/(gamma sigma^2)`; equilibrium
//!   `phi(s, y) = (alpha-r)/(gamma sigma^2) * C_s/A_s * y`.
//!
//! * `lqr` — moving-target regulator: `dX = (aX + bu) ds + sigma dW`,
//!   cost `1/2 E int u^2 + gamma/2 E (X_T - x)^2`. Coefficients
//!   `beta_s = gamma e^{a(T-s)}` and a Riccati `alpha_s` solved through its
//!   `(v, w)` linearization with `alpha = v/w`; equilibrium
//!   `phi(s, y) = b (beta_s - alpha_s) y`.
//!
//! The solved equilibrium also evaluates the analytic spike limit
//! `deltaH + 1/2 P (delta sigma)^2` used as the oracle for the Monte Carlo
//! verifier.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::cost::{h_function, CostFunctional, SpikeLimitOracle};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::ode::{rk4_solve, rk4_solve_system, Direction};
use crate::sde::{FeedbackStrategy, MeanFieldDynamics, Strategy};

/// Denominator floor for the Riccati `(v, w)` linearization.
pub const W_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Constant,
    InverseState,
}

/// Mean-variance model parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MVParams {
    pub r: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub t_end: f64,
    pub gamma_mode: GammaMode,
}

impl MVParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0.0 || !self.sigma.is_finite() {
            return Err(Error::parameter("mean-variance model needs sigma != 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::parameter("risk aversion gamma must be positive"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::parameter("horizon must be positive"));
        }
        for (name, v) in [("r", self.r), ("alpha", self.alpha)] {
            if !v.is_finite() {
                return Err(Error::parameter(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Moving-target regulator parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LQRParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub t_end: f64,
}

impl LQRParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::parameter("gamma must be positive"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::parameter("horizon must be positive"));
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("sigma", self.sigma)] {
            if !v.is_finite() {
                return Err(Error::parameter(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
enum Family {
    MvConstant(MVParams),
    MvStateDep(MVParams),
    Lqr(LQRParams),
}

/// A solved equilibrium: coefficient functions on an ODE grid, the induced
/// feedback map, the (deterministic) second-order adjoint, and closed-form
/// evaluators where the family has them.
#[derive(Clone)]
pub struct LQEquilibrium {
    family: Family,
    grid: TimeGrid,
    /// `A_s` (mean-variance) or `alpha_s` (regulator).
    a_vals: Arc<Vec<f64>>,
    /// `C_s` (mean-variance) or `beta_s` (regulator).
    c_vals: Arc<Vec<f64>>,
}

impl LQEquilibrium {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a_vals
    }

    pub fn c_values(&self) -> &[f64] {
        &self.c_vals
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::MvConstant(_) => "mv_constant",
            Family::MvStateDep(_) => "mv_state_dep",
            Family::Lqr(_) => "lqr",
        }
    }

    fn t_end(&self) -> f64 {
        self.grid.t_end()
    }

    /// Closed-form first coefficient, where the family has one.
    pub fn a_closed(&self, s: f64) -> Option<f64> {
        let tau = self.t_end() - s;
        match self.family {
            Family::MvConstant(p) => Some(p.gamma * (2.0 * p.r * tau).exp()),
            Family::MvStateDep(p) => {
                let kappa = (p.alpha - p.r) * (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma);
                if p.r == 0.0 {
                    Some(1.0 + kappa * tau)
                } else {
                    // e^{2r tau} + kappa (e^{2r tau} - e^{r tau}) / r, written
                    // through expm1 so the removable singularity at r = 0
                    // stays well conditioned.
                    let ert = (p.r * tau).exp();
                    Some(ert * ert + kappa * ert * (p.r * tau).exp_m1() / p.r)
                }
            }
            Family::Lqr(_) => None,
        }
    }

    /// Closed-form second coefficient (`C_s`, or `beta_s` for the regulator).
    pub fn c_closed(&self, s: f64) -> Option<f64> {
        let tau = self.t_end() - s;
        match self.family {
            Family::MvConstant(p) | Family::MvStateDep(p) => Some((p.r * tau).exp()),
            Family::Lqr(p) => Some(p.gamma * (p.a * tau).exp()),
        }
    }

    pub fn a_at(&self, s: f64) -> f64 {
        match self.a_closed(s) {
            Some(v) => v,
            None => self.grid.lerp(&self.a_vals, s),
        }
    }

    pub fn c_at(&self, s: f64) -> f64 {
        match self.c_closed(s) {
            Some(v) => v,
            None => self.grid.lerp(&self.c_vals, s),
        }
    }

    /// Equilibrium feedback value.
    pub fn phi_value(&self, s: f64, y: f64) -> f64 {
        match self.family {
            Family::MvConstant(p) => (p.alpha - p.r) / (p.sigma * p.sigma) * self.c_at(s) / self.a_at(s),
            Family::MvStateDep(p) => {
                (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma) * self.c_at(s) / self.a_at(s) * y
            }
            Family::Lqr(p) => p.b * (self.c_at(s) - self.a_at(s)) * y,
        }
    }

    /// The equilibrium feedback as a strategy object.
    pub fn strategy(&self) -> FeedbackStrategy {
        let eq = self.clone();
        FeedbackStrategy::new(move |s, y| eq.phi_value(s, y))
    }

    /// Deterministic second-order adjoint `P(s)`; its martingale part is
    /// identically zero in all three families.
    pub fn second_order_p(&self, s: f64) -> f64 {
        let tau = self.t_end() - s;
        match self.family {
            Family::MvConstant(p) => -p.gamma * (2.0 * p.r * tau).exp(),
            Family::MvStateDep(p) => -(2.0 * p.r * tau).exp(),
            Family::Lqr(p) => -p.gamma * (2.0 * p.a * tau).exp(),
        }
    }

    /// First-order adjoint pair `(p, q)` at the diagonal `s = t`, state `x`.
    pub fn adjoint_at(&self, t: f64, x: f64) -> (f64, f64) {
        match self.family {
            Family::MvConstant(p) => {
                let pt = self.c_at(t);
                let qt = -self.a_at(t) * p.sigma * self.phi_value(t, x);
                (pt, qt)
            }
            Family::MvStateDep(p) => {
                let pt = self.c_at(t) * x / p.gamma;
                let qt = -self.a_at(t) * p.sigma * self.phi_value(t, x);
                (pt, qt)
            }
            Family::Lqr(p) => {
                let pt = (self.c_at(t) - self.a_at(t)) * x;
                let qt = -p.sigma * self.a_at(t);
                (pt, qt)
            }
        }
    }

    /// The model dynamics this equilibrium was solved for.
    pub fn dynamics(&self) -> MeanFieldDynamics {
        match self.family {
            Family::MvConstant(p) | Family::MvStateDep(p) => MeanFieldDynamics::new(
                move |_, y, _, v| p.r * y + (p.alpha - p.r) * v,
                move |_, _, _, v| p.sigma * v,
            ),
            Family::Lqr(p) => MeanFieldDynamics::new(
                move |_, y, _, v| p.a * y + p.b * v,
                move |_, _, _, _| p.sigma,
            ),
        }
    }

    /// The cost functional evaluated from `(t, x)`.
    ///
    /// For the state-dependent family this is the normalized cost
    /// `1/2 Var - (x/gamma) E`, whose equilibria coincide with the
    /// `gamma/x`-weighted original; it requires `x > 0`.
    pub fn cost_at(&self, t: f64, x: f64) -> Result<CostFunctional> {
        match self.family {
            Family::MvConstant(p) => {
                let gamma = p.gamma;
                Ok(
                    CostFunctional::new(|_, _, _, _| 0.0, move |y, _| 0.5 * gamma * y * y - y)
                        .with_mean_adjust(move |z| -0.5 * gamma * z * z),
                )
            }
            Family::MvStateDep(p) => {
                if !(x > 0.0) {
                    return Err(Error::parameter(format!(
                        "state-dependent risk aversion gamma/x needs x > 0, got x = {x}"
                    )));
                }
                let w = x / p.gamma;
                Ok(
                    CostFunctional::new(|_, _, _, _| 0.0, move |y, _| 0.5 * y * y - w * y)
                        .with_mean_adjust(|z| -0.5 * z * z)
                        .with_context(t, x),
                )
            }
            Family::Lqr(p) => {
                let gamma = p.gamma;
                Ok(CostFunctional::new(
                    |_, _, _, v| 0.5 * v * v,
                    move |y, _| 0.5 * gamma * (y - x) * (y - x),
                )
                .with_context(t, x))
            }
        }
    }

    /// Analytic spike-variation limit at `(t, x)` for deviation `v`:
    /// the increment of the maximum-principle test function between `v`
    /// and the equilibrium control.
    pub fn spike_limit(&self, t: f64, x: f64, v: f64) -> f64 {
        let u_hat = self.phi_value(t, x);
        let (p, q) = self.adjoint_at(t, x);
        let big_p = self.second_order_p(t);
        let dynamics = self.dynamics();
        // The running cost is all that the H-function reads from the cost;
        // it never touches the terminal parts, so x's role as target is moot.
        let cost = match self.family {
            Family::Lqr(_) => CostFunctional::new(|_, _, _, u| 0.5 * u * u, |_, _| 0.0),
            _ => CostFunctional::new(|_, _, _, _| 0.0, |_, _| 0.0),
        };
        h_function(t, x, v, p, q, big_p, u_hat, &dynamics, &cost)
            - h_function(t, x, u_hat, p, q, big_p, u_hat, &dynamics, &cost)
    }

    /// Full JSON form: family tag, parameters, grid and sampled coefficients.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "family": self.family_name(),
            "params": match self.family {
                Family::MvConstant(p) | Family::MvStateDep(p) => serde_json::to_value(p).unwrap(),
                Family::Lqr(p) => serde_json::to_value(p).unwrap(),
            },
            "grid": self.grid,
            "a": self.a_vals.as_ref(),
            "c": self.c_vals.as_ref(),
        })
    }
}

impl SpikeLimitOracle for LQEquilibrium {
    fn analytic_spike_limit(&self, t: f64, x: f64, v: f64) -> f64 {
        self.spike_limit(t, x, v)
    }
}

/// Mean-variance equilibrium with constant risk aversion.
pub fn solve_mv_constant(p: &MVParams, grid: &TimeGrid) -> Result<LQEquilibrium> {
    p.validate()?;
    check_horizon(p.t_end, grid)?;
    let r = p.r;
    let a_vals = rk4_solve(|_, a| -2.0 * r * a, p.gamma, grid, Direction::Backward)?;
    let c_vals = rk4_solve(|_, c| -r * c, 1.0, grid, Direction::Backward)?;
    Ok(LQEquilibrium {
        family: Family::MvConstant(*p),
        grid: *grid,
        a_vals: Arc::new(a_vals),
        c_vals: Arc::new(c_vals),
    })
}

/// Mean-variance equilibrium with state-dependent risk aversion `gamma/x`.
pub fn solve_mv_state_dep(p: &MVParams, grid: &TimeGrid) -> Result<LQEquilibrium> {
    p.validate()?;
    check_horizon(p.t_end, grid)?;
    let r = p.r;
    let kappa = (p.alpha - p.r) * (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma);
    let sol = rk4_solve_system(
        |_, [a, c]: [f64; 2]| [-2.0 * r * a - kappa * c, -r * c],
        [1.0, 1.0],
        grid,
        Direction::Backward,
    )?;
    let (a_vals, c_vals): (Vec<f64>, Vec<f64>) = sol.into_iter().map(|[a, c]| (a, c)).unzip();
    Ok(LQEquilibrium {
        family: Family::MvStateDep(*p),
        grid: *grid,
        a_vals: Arc::new(a_vals),
        c_vals: Arc::new(c_vals),
    })
}

/// Time-inconsistent regulator equilibrium. The Riccati coefficient is
/// solved through its linear `(v, w)` system with `alpha = v/w`.
pub fn solve_lqr(p: &LQRParams, grid: &TimeGrid) -> Result<LQEquilibrium> {
    p.validate()?;
    check_horizon(p.t_end, grid)?;
    let (a, b, gamma, t_end) = (p.a, p.b, p.gamma, p.t_end);
    let beta = move |s: f64| gamma * (a * (t_end - s)).exp();

    let c_vals = rk4_solve(|_, be| -a * be, gamma, grid, Direction::Backward)?;
    let vw = rk4_solve_system(
        move |s, [v, w]: [f64; 2]| [-2.0 * a * v, -b * b * v + b * b * beta(s) * w],
        [gamma, 1.0],
        grid,
        Direction::Backward,
    )?;
    let a_vals = riccati_from_linearization(&vw, grid)?;
    Ok(LQEquilibrium {
        family: Family::Lqr(*p),
        grid: *grid,
        a_vals: Arc::new(a_vals),
        c_vals: Arc::new(c_vals),
    })
}

fn check_horizon(t_end: f64, grid: &TimeGrid) -> Result<()> {
    if (grid.t_end() - t_end).abs() > 1e-9 * grid.dt().max(1.0) {
        return Err(Error::Grid {
            reason: format!("grid horizon {} does not match model horizon {t_end}", grid.t_end()),
        });
    }
    Ok(())
}

/// `alpha = v/w` with a floor on `|w|`; integration runs backward from `T`,
/// so the first offending grid point scanning down from `T` is reported.
fn riccati_from_linearization(vw: &[[f64; 2]], grid: &TimeGrid) -> Result<Vec<f64>> {
    for k in (0..vw.len()).rev() {
        if vw[k][1].abs() < W_FLOOR {
            return Err(Error::RiccatiBlowup {
                time: grid.point(k),
                floor: W_FLOOR,
            });
        }
    }
    Ok(vw.iter().map(|[v, w]| v / w).collect())
}

/// Outcome of the adjoint-equation consistency check.
#[derive(Debug, Clone, Serialize)]
pub struct AdjointResidualReport {
    /// Largest Monte Carlo drift residual `|E[dp + rate p dt]| / dt` over
    /// all grid steps and slices.
    pub max_drift_residual: f64,
    /// Largest residual in units of its own acceptance bound.
    pub max_drift_ratio: f64,
    /// Largest violation of the algebraic first-order condition at `s = t`.
    pub first_order_residual: f64,
    pub drift_pass: bool,
    pub first_order_pass: bool,
    pub passed: bool,
}

/// Simulate the closed loop, rebuild `p(s)` through the ansatz, and check
/// that (i) its sample drift matches the adjoint equation within
/// `3 SE + check_tol` (the absolute term covers the deterministic Euler
/// truncation of order dt) and (ii) the algebraic first-order condition
/// holds at `s = t` to roundoff.
pub fn adjoint_residual_check(
    eq: &LQEquilibrium,
    sim_dt: f64,
    n_paths: usize,
    seed: u64,
    check_tol: f64,
) -> Result<AdjointResidualReport> {
    let t_end = eq.t_end();
    let dynamics = eq.dynamics();
    let strategy = eq.strategy();
    let first_order_tol = 1e-10;

    let mut max_drift = 0.0f64;
    let mut max_ratio = 0.0f64;
    let mut max_first_order = 0.0f64;

    let (rate, x_slices): (f64, [f64; 2]) = match eq.family {
        Family::MvConstant(p) | Family::MvStateDep(p) => (p.r, [0.5, 1.0]),
        Family::Lqr(p) => (p.a, [0.5, 1.0]),
    };

    for t0 in [0.0, 0.5 * t_end] {
        let grid = TimeGrid::from_step(t0, t_end, sim_dt)?;
        for &x in &x_slices {
            let ens = crate::sde::simulate(&dynamics, &strategy, t0, x, &grid, n_paths, seed)?;
            let n = grid.n_steps();
            let dt = grid.dt();

            // p(s) by the ansatz along every path.
            let p_of = |k: usize, m: usize| -> f64 {
                let s = grid.point(k);
                let state = ens.state(m, k);
                match eq.family {
                    Family::MvConstant(_) => eq.c_at(s) - eq.a_at(s) * (state - ens.mean_at(k)),
                    Family::MvStateDep(p) => {
                        eq.c_at(s) * x / p.gamma - eq.a_at(s) * (state - ens.mean_at(k))
                    }
                    Family::Lqr(_) => eq.c_at(s) * x - eq.a_at(s) * state,
                }
            };

            for k in 0..n {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for m in 0..n_paths {
                    let inc = (p_of(k + 1, m) - p_of(k, m) + rate * p_of(k, m) * dt) / dt;
                    sum += inc;
                    sumsq += inc * inc;
                }
                let mean = sum / n_paths as f64;
                let var = (sumsq / n_paths as f64 - mean * mean).max(0.0);
                let se = (var / n_paths as f64).sqrt();
                let bound = 3.0 * se + check_tol;
                max_drift = max_drift.max(mean.abs());
                max_ratio = max_ratio.max(mean.abs() / bound);
            }

            // Algebraic first-order condition at the diagonal.
            let res = match eq.family {
                Family::MvConstant(p) | Family::MvStateDep(p) => {
                    let (pt, qt) = eq.adjoint_at(t0, x);
                    ((p.alpha - p.r) * pt + p.sigma * qt).abs()
                }
                Family::Lqr(p) => {
                    let (pt, _) = eq.adjoint_at(t0, x);
                    (eq.phi_value(t0, x) - p.b * pt).abs()
                }
            };
            max_first_order = max_first_order.max(res);
        }
    }

    let drift_pass = max_ratio <= 1.0;
    let first_order_pass = max_first_order <= first_order_tol;
    Ok(AdjointResidualReport {
        max_drift_residual: max_drift,
        max_drift_ratio: max_ratio,
        first_order_residual: max_first_order,
        drift_pass,
        first_order_pass,
        passed: drift_pass && first_order_pass,
    })
}

/// Equilibrium feedback re-expressed as a plain strategy for a model's
/// spike verification, with the matching dynamics and cost.
pub struct LqModel {
    pub equilibrium: LQEquilibrium,
    pub dynamics: MeanFieldDynamics,
}

impl LqModel {
    pub fn new(equilibrium: LQEquilibrium) -> Self {
        let dynamics = equilibrium.dynamics();
        Self { equilibrium, dynamics }
    }

    pub fn strategy(&self) -> FeedbackStrategy {
        self.equilibrium.strategy()
    }

    /// The equilibrium strategy shifted pointwise by `offset` — a
    /// deliberately wrong strategy for negative controls in verification.
    pub fn perturbed_strategy(&self, offset: f64) -> FeedbackStrategy {
        let base = self.equilibrium.strategy();
        FeedbackStrategy::new(move |s, y| base.control(s, y) + offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mv_params() -> MVParams {
        MVParams {
            r: 0.05,
            alpha: 0.1,
            sigma: 0.2,
            gamma: 2.0,
            t_end: 1.0,
            gamma_mode: GammaMode::Constant,
        }
    }

    fn ode_grid() -> TimeGrid {
        TimeGrid::from_step(0.0, 1.0, 1e-3).unwrap()
    }

    #[test]
    fn mv_constant_with_zero_rate_is_flat() {
        let p = MVParams { r: 0.0, ..mv_params() };
        let eq = solve_mv_constant(&p, &ode_grid()).unwrap();
        assert!(eq.a_values().iter().all(|&v| v == p.gamma));
        assert!(eq.c_values().iter().all(|&v| v == 1.0));
        let expected = p.alpha / (p.gamma * p.sigma * p.sigma);
        for s in [0.0, 0.37, 1.0] {
            assert_abs_diff_eq!(eq.phi_value(s, 3.0), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn mv_constant_matches_closed_forms() {
        let p = mv_params();
        let grid = ode_grid();
        let eq = solve_mv_constant(&p, &grid).unwrap();
        let mut max_a = 0.0f64;
        let mut max_c = 0.0f64;
        for (k, s) in grid.points().enumerate() {
            max_a = max_a.max((eq.a_values()[k] - eq.a_closed(s).unwrap()).abs());
            max_c = max_c.max((eq.c_values()[k] - eq.c_closed(s).unwrap()).abs());
        }
        assert!(max_a <= 1e-8, "max A error {max_a}");
        assert!(max_c <= 1e-8, "max C error {max_c}");
        // phi(0) = (1/gamma) (alpha-r)/sigma^2 e^{-rT}
        let expected = (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma) * (-p.r * p.t_end).exp();
        assert_abs_diff_eq!(eq.phi_value(0.0, 1.0), expected, epsilon = 1e-12);
        // phi(T) = (alpha - r) / (gamma sigma^2)
        assert_abs_diff_eq!(
            eq.phi_value(p.t_end, 1.0),
            (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma),
            epsilon = 1e-12
        );
    }

    #[test]
    fn doubling_gamma_halves_the_mv_feedback() {
        let p = mv_params();
        let doubled = MVParams { gamma: 2.0 * p.gamma, ..p };
        let grid = ode_grid();
        let eq1 = solve_mv_constant(&p, &grid).unwrap();
        let eq2 = solve_mv_constant(&doubled, &grid).unwrap();
        for s in [0.0, 0.25, 0.8, 1.0] {
            assert_abs_diff_eq!(eq1.phi_value(s, 1.0), 2.0 * eq2.phi_value(s, 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn state_dep_terminal_conditions_are_exact() {
        let p = MVParams { gamma_mode: GammaMode::InverseState, ..mv_params() };
        let grid = ode_grid();
        let eq = solve_mv_state_dep(&p, &grid).unwrap();
        let n = grid.n_steps();
        assert_eq!(eq.a_values()[n], 1.0);
        assert_eq!(eq.c_values()[n], 1.0);
        let expected = (p.alpha - p.r) / (p.gamma * p.sigma * p.sigma);
        assert_abs_diff_eq!(eq.phi_value(p.t_end, 2.0), 2.0 * expected, epsilon = 1e-12);
    }

    #[test]
    fn state_dep_with_no_excess_return_has_zero_control() {
        let p = MVParams {
            alpha: 0.05,
            r: 0.05,
            gamma_mode: GammaMode::InverseState,
            ..mv_params()
        };
        let grid = ode_grid();
        let eq = solve_mv_state_dep(&p, &grid).unwrap();
        for s in [0.0, 0.4, 1.0] {
            assert_eq!(eq.phi_value(s, 1.5), 0.0);
            assert_abs_diff_eq!(eq.a_closed(s).unwrap(), (2.0 * p.r * (1.0 - s)).exp(), epsilon = 1e-14);
        }
    }

    #[test]
    fn state_dep_numeric_matches_closed_form() {
        for r in [0.05, 0.0] {
            let p = MVParams { r, gamma_mode: GammaMode::InverseState, ..mv_params() };
            let grid = ode_grid();
            let eq = solve_mv_state_dep(&p, &grid).unwrap();
            let mut max_a = 0.0f64;
            for (k, s) in grid.points().enumerate() {
                max_a = max_a.max((eq.a_values()[k] - eq.a_closed(s).unwrap()).abs());
            }
            assert!(max_a <= 1e-8, "r = {r}: max A error {max_a}");
        }
    }

    #[test]
    fn state_dep_cost_requires_positive_state() {
        let p = MVParams { gamma_mode: GammaMode::InverseState, ..mv_params() };
        let eq = solve_mv_state_dep(&p, &ode_grid()).unwrap();
        assert!(eq.cost_at(0.0, 1.0).is_ok());
        assert!(eq.cost_at(0.0, -1.0).is_err());
    }

    #[test]
    fn lqr_with_zero_mean_reversion_is_stationary() {
        let p = LQRParams { a: 0.0, b: 0.5, sigma: 0.3, gamma: 2.0, t_end: 1.0 };
        let eq = solve_lqr(&p, &ode_grid()).unwrap();
        assert!(eq.a_values().iter().all(|&v| v == p.gamma), "alpha must stay at gamma");
        assert!(eq.c_values().iter().all(|&v| v == p.gamma), "beta must stay at gamma");
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(eq.phi_value(s, 2.0), 0.0);
        }
    }

    #[test]
    fn lqr_without_control_authority_decouples() {
        let p = LQRParams { a: 0.3, b: 0.0, sigma: 0.3, gamma: 1.5, t_end: 1.0 };
        let grid = ode_grid();
        let eq = solve_lqr(&p, &grid).unwrap();
        for (k, s) in grid.points().enumerate() {
            assert_eq!(eq.phi_value(s, 1.0), 0.0);
            let expected = p.gamma * (2.0 * p.a * (p.t_end - s)).exp();
            assert!((eq.a_values()[k] - expected).abs() <= 1e-8);
        }
    }

    #[test]
    fn lqr_linearization_agrees_with_direct_riccati() {
        let p = LQRParams { a: 0.2, b: 0.5, sigma: 0.3, gamma: 1.0, t_end: 1.0 };
        let grid = ode_grid();
        let eq = solve_lqr(&p, &grid).unwrap();
        let beta = |s: f64| p.gamma * (p.a * (p.t_end - s)).exp();
        let direct = rk4_solve(
            |s, al| -(2.0 * p.a + p.b * p.b * beta(s)) * al + p.b * p.b * al * al,
            p.gamma,
            &grid,
            Direction::Backward,
        )
        .unwrap();
        let max_err = eq
            .a_values()
            .iter()
            .zip(direct.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-7, "routes disagree by {max_err}");
    }

    #[test]
    fn lqr_feedback_slope_identity_holds_on_the_grid() {
        let p = LQRParams { a: 0.2, b: 0.5, sigma: 0.3, gamma: 1.0, t_end: 1.0 };
        let grid = ode_grid();
        let eq = solve_lqr(&p, &grid).unwrap();
        for s in grid.points().step_by(100) {
            let slope = p.b * (eq.c_at(s) - eq.a_at(s));
            assert_abs_diff_eq!(eq.phi_value(s, 2.0) / 2.0, slope, epsilon = 1e-14);
        }
    }

    #[test]
    fn vanishing_linearization_denominator_is_detected() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let vw = vec![[1.0, 1.0], [1.0, 0.5], [1.0, 1e-13], [1.0, 1.0], [1.0, 1.0]];
        let res = riccati_from_linearization(&vw, &grid);
        match res {
            Err(Error::RiccatiBlowup { time, .. }) => assert_abs_diff_eq!(time, 0.5, epsilon = 1e-12),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn mv_spike_limit_matches_literal_formula() {
        let p = mv_params();
        let eq = solve_mv_constant(&p, &ode_grid()).unwrap();
        for (t, x, v) in [(0.0, 1.0, 0.2), (0.3, 0.5, 1.4), (0.6, 1.5, -0.7)] {
            let u_hat = eq.phi_value(t, x);
            let literal = -(p.gamma / 2.0)
                * (2.0 * p.r * (p.t_end - t)).exp()
                * p.sigma
                * p.sigma
                * (v - u_hat)
                * (v - u_hat);
            assert_abs_diff_eq!(eq.spike_limit(t, x, v), literal, epsilon = 1e-12);
        }
    }

    #[test]
    fn lqr_spike_limit_is_quadratic_in_the_deviation() {
        let p = LQRParams { a: 0.2, b: 0.5, sigma: 0.3, gamma: 1.0, t_end: 1.0 };
        let eq = solve_lqr(&p, &ode_grid()).unwrap();
        for (t, x, v) in [(0.0, 1.0, 0.5), (0.4, -0.5, -1.0)] {
            let u_hat = eq.phi_value(t, x);
            assert_abs_diff_eq!(eq.spike_limit(t, x, v), -0.5 * (v - u_hat) * (v - u_hat), epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_residuals_pass_for_all_families() {
        let grid = TimeGrid::from_step(0.0, 1.0, 1e-3).unwrap();
        let mv = solve_mv_constant(&mv_params(), &grid).unwrap();
        let sd = solve_mv_state_dep(
            &MVParams { gamma_mode: GammaMode::InverseState, ..mv_params() },
            &grid,
        )
        .unwrap();
        let lqr = solve_lqr(&LQRParams { a: 0.2, b: 0.5, sigma: 0.3, gamma: 1.0, t_end: 1.0 }, &grid).unwrap();
        for (name, eq) in [("mv", &mv), ("sd", &sd), ("lqr", &lqr)] {
            let rep = adjoint_residual_check(eq, 0.01, 4000, 11, 0.05).unwrap();
            assert!(rep.passed, "{name}: {rep:?}");
        }
    }

    #[test]
    fn noise_free_lqr_residual_is_deterministic_truncation() {
        let p = LQRParams { a: 0.2, b: 0.5, sigma: 0.0, gamma: 1.0, t_end: 1.0 };
        let grid = TimeGrid::from_step(0.0, 1.0, 1e-3).unwrap();
        let eq = solve_lqr(&p, &grid).unwrap();
        let rep = adjoint_residual_check(&eq, 0.01, 16, 3, 0.05).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.first_order_residual <= 1e-12);
        // With no noise the drift residual is pure Euler truncation, O(dt).
        assert!(rep.max_drift_residual <= 0.05, "residual {}", rep.max_drift_residual);
    }
}
