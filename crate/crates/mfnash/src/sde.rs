//! Interacting-particle simulation of one-dimensional mean-field SDEs.
//!
//! The state dynamics
//!
//! ```text
//! dX(s) = b(s, X(s), E[X(s)], u(s)) ds + sigma(s, X(s), E[X(s)], u(s)) dW(s)
//! ```
//!
//! is discretized by Euler–Maruyama on a uniform grid, with the expectation
//! replaced by the synchronous ensemble mean over all simulated paths
//! (a McKean–Vlasov particle system):
//!
//! ```text
//! X[m, k+1] = X[m, k] + b(s_k, X[m, k], mbar_k, u_k) dt
//!                     + sigma(s_k, X[m, k], mbar_k, u_k) sqrt(dt) Z[m, k]
//! ```
//!
//! where `mbar_k` is the mean of column `k` formed before any path advances,
//! and `Z[m, k]` comes from path `m`'s own noise stream. Paths advance in
//! parallel but the column mean is always reduced in path order, so results
//! are bitwise identical at any thread count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::NoiseStreams;

/// States beyond this magnitude abort the simulation.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Coefficient signature `(s, y, z, v) -> value`, where `z` slots `E[X(s)]`.
pub type CoefficientFn = dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync;

/// Drift/diffusion pair of a controlled mean-field SDE, with an optional
/// admissible control interval.
#[derive(Clone)]
pub struct MeanFieldDynamics {
    drift: Arc<CoefficientFn>,
    diffusion: Arc<CoefficientFn>,
    control_set: Option<(f64, f64)>,
}

impl MeanFieldDynamics {
    pub fn new<B, S>(drift: B, diffusion: S) -> Self
    where
        B: Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            control_set: None,
        }
    }

    /// Restrict controls to `[lo, hi]`; strategy outputs outside the interval
    /// are clamped and counted, not rejected.
    pub fn with_control_set(mut self, lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "control interval must satisfy lo <= hi");
        self.control_set = Some((lo, hi));
        self
    }

    #[inline]
    pub fn drift(&self, s: f64, y: f64, z: f64, v: f64) -> f64 {
        (self.drift)(s, y, z, v)
    }

    #[inline]
    pub fn diffusion(&self, s: f64, y: f64, z: f64, v: f64) -> f64 {
        (self.diffusion)(s, y, z, v)
    }

    pub fn control_set(&self) -> Option<(f64, f64)> {
        self.control_set
    }
}

/// Deterministic feedback map `phi(s, y) -> control`.
#[derive(Clone)]
pub struct FeedbackStrategy {
    phi: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl FeedbackStrategy {
    pub fn new<F>(phi: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self { phi: Arc::new(phi) }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(move |_, _| v)
    }

    #[inline]
    pub fn value(&self, s: f64, y: f64) -> f64 {
        (self.phi)(s, y)
    }
}

/// What a spike strategy applies inside its window.
#[derive(Clone)]
pub enum SpikeOverride {
    /// Constant control `v` on the window.
    Constant(f64),
    /// Pointwise shift `base(s, y) + nu` on the window; `nu = 0` reproduces
    /// the base strategy exactly, which keeps paired estimators at bitwise
    /// zero for null deviations.
    Shift(f64),
    /// Arbitrary replacement feedback on the window.
    Feedback(FeedbackStrategy),
}

/// A base strategy overridden on the half-open window `[start, start + width)`.
///
/// The window is applied to grid points `s_k` with `start <= s_k < start + width`;
/// widths below the simulation step vanish silently, so callers should use
/// `width >= dt` or exactly `0`.
#[derive(Clone)]
pub struct SpikeStrategy {
    base: FeedbackStrategy,
    patch: SpikeOverride,
    start: f64,
    width: f64,
}

impl SpikeStrategy {
    pub fn new(base: FeedbackStrategy, patch: SpikeOverride, start: f64, width: f64) -> Result<Self> {
        if !start.is_finite() || !width.is_finite() || width < 0.0 {
            return Err(Error::Window {
                reason: format!("window [start, start+width) with start = {start}, width = {width}"),
            });
        }
        Ok(Self { base, patch, start, width })
    }

    pub fn window(&self) -> (f64, f64) {
        (self.start, self.start + self.width)
    }

    #[inline]
    fn in_window(&self, s: f64) -> bool {
        self.start <= s && s < self.start + self.width
    }
}

/// Control laws the simulator can drive. Implementations read only the
/// current `(s, y)`, so every strategy is decentralized by construction.
pub trait Strategy: Send + Sync {
    fn control(&self, s: f64, y: f64) -> f64;
}

impl Strategy for FeedbackStrategy {
    #[inline]
    fn control(&self, s: f64, y: f64) -> f64 {
        self.value(s, y)
    }
}

impl Strategy for SpikeStrategy {
    #[inline]
    fn control(&self, s: f64, y: f64) -> f64 {
        if self.in_window(s) {
            match &self.patch {
                SpikeOverride::Constant(v) => *v,
                SpikeOverride::Shift(nu) => self.base.value(s, y) + nu,
                SpikeOverride::Feedback(f) => f.value(s, y),
            }
        } else {
            self.base.value(s, y)
        }
    }
}

impl<T: Strategy + ?Sized> Strategy for &T {
    #[inline]
    fn control(&self, s: f64, y: f64) -> f64 {
        (**self).control(s, y)
    }
}

/// `M` simulated paths on a shared grid, plus the per-step ensemble mean
/// used as the `E[X(s)]` proxy during the simulation.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    /// Row-major `n_paths x (n_steps + 1)`.
    paths: Vec<f64>,
    ensemble_mean: Vec<f64>,
    clamped_controls: u64,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// States of path `m` at every grid point.
    pub fn path(&self, m: usize) -> &[f64] {
        let stride = self.grid.n_points();
        &self.paths[m * stride..(m + 1) * stride]
    }

    pub fn state(&self, m: usize, k: usize) -> f64 {
        self.paths[m * self.grid.n_points() + k]
    }

    pub fn ensemble_mean(&self) -> &[f64] {
        &self.ensemble_mean
    }

    pub fn mean_at(&self, k: usize) -> f64 {
        self.ensemble_mean[k]
    }

    pub fn initial_state(&self) -> f64 {
        self.paths[0]
    }

    /// Number of strategy outputs clamped into the control set; nonzero
    /// counts are a warning, not an error.
    pub fn clamped_controls(&self) -> u64 {
        self.clamped_controls
    }
}

/// Simulate `n_paths` interacting particles from state `x` at time `t`.
///
/// `grid` must start at `t`; the seed fixes every noise stream, so identical
/// arguments reproduce the ensemble bitwise regardless of parallelism.
pub fn simulate<S>(
    dynamics: &MeanFieldDynamics,
    strategy: &S,
    t: f64,
    x: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble>
where
    S: Strategy + ?Sized,
{
    if grid.t0() != t {
        return Err(Error::Grid {
            reason: format!("simulation start t = {t} does not match grid origin {}", grid.t0()),
        });
    }
    if n_paths < 2 {
        return Err(Error::parameter(format!("need at least 2 paths, got {n_paths}")));
    }
    if !x.is_finite() {
        return Err(Error::parameter(format!("initial state must be finite, got {x}")));
    }

    let n = grid.n_steps();
    let stride = n + 1;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let streams = NoiseStreams::new(seed);
    let mut rngs: Vec<_> = (0..n_paths).map(|m| streams.stream(m as u64)).collect();
    let mut states = vec![x; n_paths];
    let mut paths = vec![0.0; n_paths * stride];
    let mut ensemble_mean = Vec::with_capacity(stride);
    let clamp_count = AtomicU64::new(0);

    for m in 0..n_paths {
        paths[m * stride] = x;
    }

    for k in 0..n {
        let s = grid.point(k);
        // Column mean before any path advances; summed in path order so the
        // value is independent of how the advance below is scheduled.
        let mean_k = states.iter().sum::<f64>() / n_paths as f64;
        ensemble_mean.push(mean_k);

        let control_set = dynamics.control_set;
        states
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .try_for_each(|(y, rng)| -> Result<()> {
                let z = rng.standard_normal();
                let mut u = strategy.control(s, *y);
                if !u.is_finite() {
                    return Err(Error::Coefficient { step: k, time: s });
                }
                if let Some((lo, hi)) = control_set {
                    let clamped = u.clamp(lo, hi);
                    if clamped != u {
                        clamp_count.fetch_add(1, Ordering::Relaxed);
                        u = clamped;
                    }
                }
                let b = dynamics.drift(s, *y, mean_k, u);
                let g = dynamics.diffusion(s, *y, mean_k, u);
                if !b.is_finite() || !g.is_finite() {
                    return Err(Error::Coefficient { step: k, time: s });
                }
                let next = *y + b * dt + g * sqrt_dt * z;
                if !(next.abs() <= DIVERGENCE_GUARD) {
                    return Err(Error::Divergence {
                        step: k + 1,
                        time: grid.point(k + 1),
                        guard: DIVERGENCE_GUARD,
                    });
                }
                *y = next;
                Ok(())
            })?;

        for (m, &state) in states.iter().enumerate() {
            paths[m * stride + k + 1] = state;
        }
    }
    ensemble_mean.push(states.iter().sum::<f64>() / n_paths as f64);

    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        seed,
        paths,
        ensemble_mean,
        clamped_controls: clamp_count.into_inner(),
    })
}

/// Re-simulate with a different strategy under bitwise-identical noise.
///
/// The grid, path count and seed must match the previous ensemble; only the
/// strategy may differ. This is what makes cost-difference estimators
/// common-random-number paired.
pub fn resample_with_same_noise<S>(
    prev: &PathEnsemble,
    dynamics: &MeanFieldDynamics,
    alt_strategy: &S,
    t: f64,
    x: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble>
where
    S: Strategy + ?Sized,
{
    if grid != prev.grid() {
        return Err(Error::Pairing {
            reason: "grid differs from the paired ensemble".into(),
        });
    }
    if n_paths != prev.n_paths() {
        return Err(Error::Pairing {
            reason: format!("path count {} differs from paired {}", n_paths, prev.n_paths()),
        });
    }
    if seed != prev.seed() {
        return Err(Error::Pairing {
            reason: format!("seed {} differs from paired {}", seed, prev.seed()),
        });
    }
    simulate(dynamics, alt_strategy, t, x, grid, n_paths, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_dynamics() -> MeanFieldDynamics {
        MeanFieldDynamics::new(|_, _, _, _| 0.0, |_, _, _, _| 0.0)
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn zero_dynamics_keeps_every_path_at_x() {
        let ens = simulate(&zero_dynamics(), &FeedbackStrategy::constant(0.0), 0.0, 1.0, &grid(20), 8, 7).unwrap();
        for m in 0..8 {
            assert!(ens.path(m).iter().all(|&v| v == 1.0));
        }
        assert!(ens.ensemble_mean().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_drift_tracks_exponential_within_euler_bias() {
        // b = a y, sigma = 0: every path equals the deterministic Euler
        // recursion; bias against e^{a s} is O(dt).
        let a = 0.3;
        let dyn_ = MeanFieldDynamics::new(move |_, y, _, _| a * y, |_, _, _, _| 0.0);
        let g = grid(100);
        let ens = simulate(&dyn_, &FeedbackStrategy::constant(0.0), 0.0, 1.0, &g, 4, 1).unwrap();
        let dt = g.dt();
        for k in 0..=100 {
            let s = g.point(k);
            let err = (ens.state(0, k) - (a * s).exp()).abs();
            assert!(err <= 2.0 * a * a * (a * s).exp() * dt, "step {k}: err {err}");
        }
        for k in 0..=100 {
            assert_eq!(ens.mean_at(k), ens.state(0, k));
        }
    }

    #[test]
    fn identical_inputs_reproduce_bitwise() {
        let dyn_ = MeanFieldDynamics::new(|_, y, z, v| 0.2 * y - 0.1 * z + v, |_, y, _, _| 0.3 + 0.05 * y);
        let strat = FeedbackStrategy::new(|s, y| 0.1 * s - 0.02 * y);
        let a = simulate(&dyn_, &strat, 0.0, 1.0, &grid(50), 64, 99).unwrap();
        let b = simulate(&dyn_, &strat, 0.0, 1.0, &grid(50), 64, 99).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.ensemble_mean, b.ensemble_mean);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let dyn_ = MeanFieldDynamics::new(|_, y, z, _| 0.1 * y + 0.2 * z, |_, _, _, _| 0.25);
        let strat = FeedbackStrategy::constant(0.0);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate(&dyn_, &strat, 0.0, 1.0, &grid(40), 128, 5).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.paths, four.paths);
        assert_eq!(one.ensemble_mean, four.ensemble_mean);
    }

    #[test]
    fn no_mean_coupling_matches_smaller_ensemble_streams() {
        // Without z-dependence the particles are independent, so the first
        // paths of a larger ensemble coincide bitwise with a smaller one.
        let dyn_ = MeanFieldDynamics::new(|_, y, _, _| 0.2 * y, |_, _, _, _| 0.4);
        let strat = FeedbackStrategy::constant(0.0);
        let big = simulate(&dyn_, &strat, 0.0, 1.0, &grid(30), 8, 3).unwrap();
        let small = simulate(&dyn_, &strat, 0.0, 1.0, &grid(30), 4, 3).unwrap();
        for m in 0..4 {
            assert_eq!(big.path(m), small.path(m));
        }
    }

    #[test]
    fn spike_with_zero_width_is_the_base_strategy() {
        let dyn_ = MeanFieldDynamics::new(|_, y, _, v| 0.1 * y + v, |_, _, _, v| 0.2 * v);
        let base = FeedbackStrategy::new(|s, _| 0.5 + 0.1 * s);
        let spike = SpikeStrategy::new(base.clone(), SpikeOverride::Constant(3.0), 0.4, 0.0).unwrap();
        let a = simulate(&dyn_, &base, 0.0, 1.0, &grid(25), 16, 11).unwrap();
        let b = simulate(&dyn_, &spike, 0.0, 1.0, &grid(25), 16, 11).unwrap();
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn spike_leaves_prewindow_steps_bitwise_unchanged() {
        let dyn_ = MeanFieldDynamics::new(|_, y, _, v| 0.1 * y + v, |_, _, _, v| 0.1 + 0.2 * v);
        let base = FeedbackStrategy::constant(0.2);
        let t_spike = 0.5;
        let spike = SpikeStrategy::new(base.clone(), SpikeOverride::Constant(2.0), t_spike, 0.2).unwrap();
        let g = grid(20);
        let a = simulate(&dyn_, &base, 0.0, 1.0, &g, 12, 13).unwrap();
        let b = simulate(&dyn_, &spike, 0.0, 1.0, &g, 12, 13).unwrap();
        for k in 0..=g.n_steps() {
            if g.point(k) <= t_spike {
                for m in 0..12 {
                    assert_eq!(a.state(m, k).to_bits(), b.state(m, k).to_bits(), "m={m} k={k}");
                }
            }
        }
        assert_ne!(a.paths, b.paths, "spike must change post-window states");
    }

    #[test]
    fn resample_with_same_strategy_is_identity() {
        let dyn_ = MeanFieldDynamics::new(|_, y, z, _| 0.1 * (z - y), |_, _, _, _| 0.3);
        let strat = FeedbackStrategy::constant(1.0);
        let g = grid(30);
        let a = simulate(&dyn_, &strat, 0.0, 1.0, &g, 32, 21).unwrap();
        let b = resample_with_same_noise(&a, &dyn_, &strat, 0.0, 1.0, &g, 32, 21).unwrap();
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn resample_rejects_mismatched_pairing_keys() {
        let dyn_ = zero_dynamics();
        let strat = FeedbackStrategy::constant(0.0);
        let g = grid(10);
        let a = simulate(&dyn_, &strat, 0.0, 1.0, &g, 8, 1).unwrap();
        let bad_seed = resample_with_same_noise(&a, &dyn_, &strat, 0.0, 1.0, &g, 8, 2);
        assert!(matches!(bad_seed, Err(Error::Pairing { .. })));
        let bad_m = resample_with_same_noise(&a, &dyn_, &strat, 0.0, 1.0, &g, 16, 1);
        assert!(matches!(bad_m, Err(Error::Pairing { .. })));
        let g2 = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let bad_grid = resample_with_same_noise(&a, &dyn_, &strat, 0.0, 1.0, &g2, 8, 1);
        assert!(matches!(bad_grid, Err(Error::Pairing { .. })));
    }

    #[test]
    fn weak_error_halves_with_the_step() {
        // b = a y, sigma const: E X(T) = x e^{aT}, and the Euler mean bias
        // shrinks by ~2 when dt is halved (weak order 1). The ensemble mean
        // carries O(sigma/sqrt(M)) sampling noise on top, kept small here.
        let a = 0.5;
        let sigma = 0.1;
        let dyn_ = MeanFieldDynamics::new(move |_, y, _, _| a * y, move |_, _, _, _| sigma);
        let strat = FeedbackStrategy::constant(0.0);
        let exact = (a * 1.0f64).exp();
        let mut biases = Vec::new();
        for n in [10usize, 20, 40] {
            let g = TimeGrid::new(0.0, 1.0, n).unwrap();
            let ens = simulate(&dyn_, &strat, 0.0, 1.0, &g, 200_000, 17).unwrap();
            biases.push((ens.mean_at(n) - exact).abs());
        }
        for w in biases.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.7..=2.3).contains(&ratio), "weak-order ratio {ratio}, biases {biases:?}");
        }
    }

    #[test]
    fn out_of_set_controls_are_clamped_and_counted() {
        let dyn_ = MeanFieldDynamics::new(|_, _, _, v| v, |_, _, _, _| 0.0).with_control_set(-1.0, 1.0);
        let strat = FeedbackStrategy::constant(5.0);
        let g = grid(10);
        let ens = simulate(&dyn_, &strat, 0.0, 0.0, &g, 4, 1).unwrap();
        assert_eq!(ens.clamped_controls(), 4 * 10);
        // drift clamped to 1.0 => terminal state 1.0
        assert!((ens.state(0, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported_with_the_step() {
        let dyn_ = MeanFieldDynamics::new(|_, y, _, _| y * y, |_, _, _, _| 0.0);
        let res = simulate(&dyn_, &FeedbackStrategy::constant(0.0), 0.0, 1e7, &grid(10), 4, 1);
        match res {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_coefficient_is_an_error() {
        let dyn_ = MeanFieldDynamics::new(|_, _, _, _| f64::NAN, |_, _, _, _| 0.0);
        let res = simulate(&dyn_, &FeedbackStrategy::constant(0.0), 0.0, 1.0, &grid(10), 4, 1);
        assert!(matches!(res, Err(Error::Coefficient { step: 0, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ensemble_mean_is_the_column_mean(
            seed in 0u64..1_000,
            a in -0.5f64..0.5,
            sig in 0.0f64..0.5,
            x in -2.0f64..2.0,
        ) {
            let dyn_ = MeanFieldDynamics::new(move |_, y, z, _| a * (z - y), move |_, _, _, _| sig);
            let g = TimeGrid::new(0.0, 0.5, 16).unwrap();
            let ens = simulate(&dyn_, &FeedbackStrategy::constant(0.0), 0.0, x, &g, 24, seed).unwrap();
            for k in 0..=16 {
                let col = (0..24).map(|m| ens.state(m, k)).sum::<f64>() / 24.0;
                prop_assert_eq!(col.to_bits(), ens.mean_at(k).to_bits());
            }
            for m in 0..24 {
                prop_assert_eq!(ens.state(m, 0), x);
            }
        }
    }
}
