//! Classical fourth-order Runge–Kutta integration on uniform grids.
//!
//! Terminal-value problems (the adjoint coefficient ODEs are all stated
//! backward from `T`) are integrated with a negative step, so stage times
//! land exactly on grid points and midpoints in either direction.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `boundary_value` is the value at `grid.t0()`.
    Forward,
    /// `boundary_value` is the value at `grid.t_end()`.
    Backward,
}

/// Solve the scalar ODE `y' = f(s, y)` on the grid.
///
/// Returns one value per grid point, indexed like the grid regardless of
/// direction; the boundary value is stored exactly, never re-integrated.
pub fn rk4_solve<F>(f: F, boundary_value: f64, grid: &TimeGrid, direction: Direction) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> f64,
{
    let sys = |s: f64, y: [f64; 1]| [f(s, y[0])];
    let out = rk4_solve_system(sys, [boundary_value], grid, direction)?;
    Ok(out.into_iter().map(|y| y[0]).collect())
}

/// Solve the system `y' = f(s, y)` of `N` scalar equations on the grid.
pub fn rk4_solve_system<const N: usize, F>(
    f: F,
    boundary_value: [f64; N],
    grid: &TimeGrid,
    direction: Direction,
) -> Result<Vec<[f64; N]>>
where
    F: Fn(f64, [f64; N]) -> [f64; N],
{
    let n = grid.n_steps();
    let mut out = vec![[0.0; N]; n + 1];
    let h = match direction {
        Direction::Forward => grid.dt(),
        Direction::Backward => -grid.dt(),
    };

    let step = |s: f64, y: [f64; N]| -> [f64; N] {
        let k1 = f(s, y);
        let k2 = f(s + 0.5 * h, add_scaled(y, k1, 0.5 * h));
        let k3 = f(s + 0.5 * h, add_scaled(y, k2, 0.5 * h));
        let k4 = f(s + h, add_scaled(y, k3, h));
        let mut next = y;
        for i in 0..N {
            next[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        next
    };

    match direction {
        Direction::Forward => {
            out[0] = boundary_value;
            for k in 0..n {
                let s = grid.point(k);
                let next = step(s, out[k]);
                check_finite(&next, grid.point(k + 1))?;
                out[k + 1] = next;
            }
        }
        Direction::Backward => {
            out[n] = boundary_value;
            for k in (1..=n).rev() {
                let s = grid.point(k);
                let next = step(s, out[k]);
                check_finite(&next, grid.point(k - 1))?;
                out[k - 1] = next;
            }
        }
    }
    Ok(out)
}

fn add_scaled<const N: usize>(y: [f64; N], k: [f64; N], c: f64) -> [f64; N] {
    let mut out = y;
    for i in 0..N {
        out[i] += c * k[i];
    }
    out
}

fn check_finite<const N: usize>(y: &[f64; N], time: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Ode {
            time,
            reason: "vector field produced a non-finite state".into(),
        })
    }
}
