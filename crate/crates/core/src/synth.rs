//! Control synthesis.
//!
//! On the full domain the control glues the free forward evolution of `y0`
//! to the free backward evolution of `y1` with a time cut-off `η`. For a
//! general `ω`, a refined set `ω̂ ⊂⊂ ω` is chosen, each complement component
//! of `closure(ω̂)` is steered by boundary controls, and the pieces are glued
//! to the full-domain solution with a space cut-off `ξ` that only varies
//! inside `ω`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::model::{complement_components, ControlDomain, Interval, SystemSpec};
use crate::pde::{
    boundary_transport, cfl_dt, forward_transport, solve_backward, solve_boundary_forward, solve_forward, BoundaryControls,
    ControlField, Drive, EndRule, Grid, StateField, TimeGrid,
};
use crate::times::{couplings_invertible, minimal_control_time, refine_omegahat, ControlTime};
use crate::{Error, Result};

/// Regularization weight of the least-squares boundary control problem.
pub const HUM_REGULARIZATION: f64 = 1e-8;
/// Relative tolerance for conjugate gradients.
pub const CG_TOLERANCE: f64 = 1e-10;

/// `3s² - 2s³` clamped to `[0, 1]`.
fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn smoothstep_derivative(s: f64) -> f64 {
    if !(0.0..=1.0).contains(&s) {
        return 0.0;
    }
    6.0 * s * (1.0 - s)
}

/// `η(t) = 1 - smoothstep(t/T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffEta {
    pub horizon: f64,
}

impl CutoffEta {
    pub fn value(&self, t: f64) -> f64 {
        1.0 - smoothstep(t / self.horizon)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        -smoothstep_derivative(t / self.horizon) / self.horizon
    }
}

/// One transition band of `ξ`: `ξ = 0` on `[zero_lo, zero_hi]`, rising to 1
/// on `[outer_lo, zero_lo]` and `[zero_hi, outer_hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XiBand {
    pub outer_lo: f64,
    pub zero_lo: f64,
    pub zero_hi: f64,
    pub outer_hi: f64,
}

/// `ξ = 0` on the hull of the `ω̂` pieces inside each component of `ω`, 1
/// outside `ω₁`, with smoothstep transitions across half of each gap.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffXi {
    pub omega_hat: ControlDomain,
    pub omega_one: Vec<Interval>,
    pub bands: Vec<XiBand>,
}

impl CutoffXi {
    pub fn new(omega: &ControlDomain, omega_hat: &ControlDomain) -> Result<Self> {
        let mut bands = Vec::new();
        for part in omega.intervals() {
            let inside: Vec<&Interval> = omega_hat
                .intervals()
                .iter()
                .filter(|h| h.lo >= part.lo && h.hi <= part.hi)
                .collect();
            let (Some(first), Some(last)) = (inside.first(), inside.last()) else {
                continue;
            };
            let (alpha, beta) = (first.lo, last.hi);
            if !(alpha > part.lo && beta < part.hi) {
                return Err(Error::Precondition(format!(
                    "omega-hat piece ({alpha}, {beta}) not compactly inside ({}, {})",
                    part.lo, part.hi
                )));
            }
            bands.push(XiBand {
                outer_lo: 0.5 * (part.lo + alpha),
                zero_lo: alpha,
                zero_hi: beta,
                outer_hi: 0.5 * (beta + part.hi),
            });
        }
        let omega_one = bands
            .iter()
            .map(|b| Interval {
                lo: b.outer_lo,
                hi: b.outer_hi,
            })
            .collect();
        Ok(Self {
            omega_hat: omega_hat.clone(),
            omega_one,
            bands,
        })
    }

    fn band(&self, x: f64) -> Option<&XiBand> {
        self.bands.iter().find(|b| x > b.outer_lo && x < b.outer_hi)
    }

    pub fn value(&self, x: f64) -> f64 {
        match self.band(x) {
            None => 1.0,
            Some(b) if x < b.zero_lo => 1.0 - smoothstep((x - b.outer_lo) / (b.zero_lo - b.outer_lo)),
            Some(b) if x > b.zero_hi => smoothstep((x - b.zero_hi) / (b.outer_hi - b.zero_hi)),
            Some(_) => 0.0,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self.band(x) {
            Some(b) if x < b.zero_lo => {
                let w = b.zero_lo - b.outer_lo;
                -smoothstep_derivative((x - b.outer_lo) / w) / w
            }
            Some(b) if x > b.zero_hi => {
                let w = b.outer_hi - b.zero_hi;
                smoothstep_derivative((x - b.zero_hi) / w) / w
            }
            _ => 0.0,
        }
    }

    /// Whether `ξ` vanishes on all of `interval`.
    pub fn vanishes_on(&self, interval: &Interval) -> bool {
        self.bands
            .iter()
            .any(|b| b.zero_lo <= interval.lo && interval.hi <= b.zero_hi)
    }
}

/// Boundary control found for one complement component.
#[derive(Clone, Debug)]
pub struct HumResult {
    pub interval: Interval,
    /// first cell of the subgrid in the global grid
    pub first_cell: usize,
    pub grid: Grid,
    pub controls: BoundaryControls,
    /// `‖y(T) - y¹‖` over the interval after re-simulation
    pub residual: f64,
    pub iterations: usize,
    /// States at `t_0..t_K` on the subgrid.
    pub trajectory: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthesisReport {
    pub control: ControlField,
    /// `‖y(T) - y¹‖` after re-simulating with `control`.
    pub achieved_error: f64,
    pub final_state: StateField,
    pub time: TimeGrid,
    pub omega_hat: Vec<Interval>,
    pub omega_one: Vec<Interval>,
    pub residuals: Vec<(Interval, f64)>,
}

/// Forward and backward free evolutions and the glued control, without the
/// re-simulation.
struct Gluing {
    forward: Vec<DMatrix<f64>>,
    backward: Vec<DMatrix<f64>>,
    eta: CutoffEta,
}

impl Gluing {
    fn new(spec: &SystemSpec, y0: &StateField, y1: &StateField, time: TimeGrid) -> Result<Self> {
        let forward = solve_forward(spec, y0, None, time)?.trajectory;
        let backward = solve_backward(spec, y1, time)?;
        Ok(Self {
            forward,
            backward,
            eta: CutoffEta {
                horizon: time.horizon(),
            },
        })
    }

    fn state(&self, k: usize, time: TimeGrid) -> DMatrix<f64> {
        let e = self.eta.value(time.time(k));
        &self.forward[k] * e + &self.backward[k] * (1.0 - e)
    }

    fn control(&self, k: usize, time: TimeGrid) -> DMatrix<f64> {
        (&self.forward[k] - &self.backward[k]) * self.eta.derivative(time.time(k))
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Precondition(format!("horizon must be finite and > 0, got {horizon}")));
    }
    Ok(())
}

fn check_pair(y0: &StateField, y1: &StateField) -> Result<()> {
    if y0.grid != y1.grid || y0.values.shape() != y1.values.shape() {
        return Err(Error::Precondition("initial and target states live on different grids".into()));
    }
    Ok(())
}

/// `ξ` at the cell centres, raised to 1 on every cell of `ω` next to a cell
/// outside it. The upwind stencil of an uncontrolled cell must only see
/// boundary-controlled values, which matters when the cutoff band is narrower
/// than a cell.
fn discrete_xi(xi: &CutoffXi, grid: &Grid, mask: &[bool]) -> Vec<f64> {
    let mut v: Vec<f64> = grid.centers().into_iter().map(|x| xi.value(x)).collect();
    for i in 0..grid.cells {
        if mask[i] {
            continue;
        }
        for j in [i.wrapping_sub(1), i + 1] {
            if j < grid.cells && mask[j] {
                v[j] = 1.0;
            }
        }
    }
    v
}

/// Extends a restricted subgrid by the neighbouring cells where the discrete
/// cutoff is still positive.
fn widen(grid: &Grid, first: usize, sub: Grid, xi_cells: &[f64]) -> (usize, Grid) {
    let mut lo = first;
    let mut hi = first + sub.cells;
    while lo > 0 && xi_cells[lo - 1] > 0.0 {
        lo -= 1;
    }
    while hi < grid.cells && xi_cells[hi] > 0.0 {
        hi += 1;
    }
    if (lo, hi) == (first, first + sub.cells) {
        return (first, sub);
    }
    let dx = grid.dx();
    let left = if lo == 0 { grid.lo } else { grid.lo + lo as f64 * dx };
    let right = if hi == grid.cells { grid.hi } else { grid.lo + hi as f64 * dx };
    (lo, Grid { lo: left, hi: right, cells: hi - lo })
}

/// Steers `y0` to `y1` with a control acting on the whole domain, ignoring
/// `spec.omega`.
pub fn synthesize_full_domain(
    spec: &SystemSpec,
    y0: &StateField,
    y1: &StateField,
    horizon: f64,
    cfl: f64,
) -> Result<SynthesisReport> {
    check_horizon(horizon)?;
    check_pair(y0, y1)?;
    if !couplings_invertible(spec) {
        return Err(Error::NotInvertible);
    }
    let grid = y0.grid;
    let time = cfl_dt(spec, &grid, cfl, horizon)?;
    let gluing = Gluing::new(spec, y0, y1, time)?;
    let slices = (0..time.steps).map(|k| gluing.control(k, time)).collect();
    let control = ControlField::new(slices, vec![true; grid.cells])?;
    finish(spec, y0, y1, control, time, Vec::new(), Vec::new(), Vec::new())
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &SystemSpec,
    y0: &StateField,
    y1: &StateField,
    control: ControlField,
    time: TimeGrid,
    omega_hat: Vec<Interval>,
    omega_one: Vec<Interval>,
    residuals: Vec<(Interval, f64)>,
) -> Result<SynthesisReport> {
    let sol = solve_forward(spec, y0, Some(&control), time)?;
    let achieved_error = crate::pde::l2_norm(&(&sol.final_state.values - &y1.values), y0.grid.dx());
    Ok(SynthesisReport {
        control,
        achieved_error,
        final_state: sol.final_state,
        time,
        omega_hat,
        omega_one,
        residuals,
    })
}

/// Largest number of unknowns in one boundary control problem.
pub const MAX_HUM_UNKNOWNS: usize = 8000;

/// Conjugate gradients on the dense SPD system `n x = rhs` starting from `x`,
/// until `‖rhs - n x‖ ≤ CG_TOLERANCE ‖rhs‖` or `10·dim` iterations.
fn conjugate_gradients(n: &DMatrix<f64>, rhs: &DVector<f64>, mut x: DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let target = CG_TOLERANCE * rhs.norm();
    let mut r = rhs - n * &x;
    let mut rr = r.norm_squared();
    if rr.sqrt() <= target {
        return Ok((x, 0));
    }
    let mut p = r.clone();
    let limit = 10 * rhs.len().max(1);
    for it in 1..=limit {
        let np = n * &p;
        let alpha = rr / p.dot(&np);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &np, 1.0);
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= target {
            return Ok((x, it));
        }
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    Err(Error::CgNotConverged {
        iterations: limit,
        residual: rr.sqrt() / rhs.norm(),
    })
}

/// Finds boundary controls at the ends of `y0.grid` that do not touch 0 or 1,
/// steering `y0` towards `y1` over `time`.
///
/// Minimizes `Δx‖A U + b - y¹‖² + ε Δt‖U‖²` where `A` maps the control
/// series to the final state and `b` is the free evolution of `y0`. The
/// columns of `A` come from one impulse response per control component. No
/// horizon check is made: below the boundary control time the residual simply
/// stays large.
pub fn hum_boundary_control(spec: &SystemSpec, y0: &StateField, y1: &StateField, time: TimeGrid) -> Result<HumResult> {
    check_pair(y0, y1)?;
    let grid = y0.grid;
    let interval = Interval::new(grid.lo, grid.hi)?;
    let transport = boundary_transport(spec, grid)?;
    let left_len = match transport.left_rule() {
        EndRule::Control => transport.incoming_left().len(),
        EndRule::Coupling(_) => 0,
    };
    let right_len = match transport.right_rule() {
        EndRule::Control => transport.incoming_right().len(),
        EndRule::Coupling(_) => 0,
    };
    let steps = time.steps;
    let width = left_len + right_len;
    let rows = y0.values.len();
    let zero_series = |len: usize| (len > 0).then(|| vec![DVector::zeros(len); steps]);

    // impulse responses: responses[c][j] is the state j steps after a unit
    // pulse in control component c at step 0
    let responses: Vec<Vec<DVector<f64>>> = (0..width)
        .into_par_iter()
        .map(|c| {
            let mut left = zero_series(left_len);
            let mut right = zero_series(right_len);
            if steps > 0 {
                if c < left_len {
                    left.as_mut().unwrap()[0][c] = 1.0;
                } else {
                    right.as_mut().unwrap()[0][c - left_len] = 1.0;
                }
            }
            let drive = Drive {
                left: left.as_deref(),
                right: right.as_deref(),
                interior: None,
            };
            let mut states = Vec::with_capacity(steps + 1);
            transport
                .run(&DMatrix::zeros(y0.values.nrows(), grid.cells), time, drive, |_, y| {
                    states.push(DVector::from_column_slice(y.as_slice()))
                })
                .map(|_| states)
        })
        .collect::<Result<_>>()?;

    let free = {
        let controls = BoundaryControls {
            left: zero_series(left_len),
            right: zero_series(right_len),
        };
        solve_boundary_forward(spec, y0, &controls, time)?.final_state.values
    };
    let target = DVector::from_column_slice(y1.values.as_slice()) - DVector::from_column_slice(free.as_slice());

    // unknown index: k * width + c; column k·width + c is the response
    // to a pulse at step k, i.e. K - k steps after a pulse at step 0
    let dim = steps * width;
    if dim > MAX_HUM_UNKNOWNS {
        return Err(Error::TooLarge {
            size: dim,
            limit: MAX_HUM_UNKNOWNS,
        });
    }
    let dx = grid.dx();
    let reg = HUM_REGULARIZATION * time.dt;
    let a = DMatrix::from_fn(rows, dim, |r, idx| responses[idx % width][steps - idx / width][r]);
    let mut normal = a.tr_mul(&a) * dx;
    for i in 0..dim {
        normal[(i, i)] += reg;
    }
    let rhs = a.tr_mul(&target) * dx;
    // The pulse responses are smoothed by the scheme, so the normal matrix
    // has condition ~ |A|²/reg; a Cholesky solve gives the start and CG only
    // has to confirm or polish it.
    let start = normal
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(dim));
    let (u, iterations) = conjugate_gradients(&normal, &rhs, start)?;

    let series = |offset: usize, len: usize| {
        (len > 0).then(|| {
            (0..steps)
                .map(|k| DVector::from_fn(len, |c, _| u[k * width + offset + c]))
                .collect::<Vec<_>>()
        })
    };
    let controls = BoundaryControls {
        left: series(0, left_len),
        right: series(left_len, right_len),
    };
    let sol = solve_boundary_forward(spec, y0, &controls, time)?;
    let residual = crate::pde::l2_norm(&(&sol.final_state.values - &y1.values), dx);
    Ok(HumResult {
        interval,
        first_cell: 0,
        grid,
        controls,
        residual,
        iterations,
        trajectory: sol.trajectory,
    })
}

/// Steers `y0` to `y1` with a control supported in `spec.omega`.
///
/// Requires `horizon ≥ T_inf + margin_steps·Δt`. Delegates to
/// [`synthesize_full_domain`] when `closure(ω) = [0, 1]`.
pub fn assemble_internal_control(
    spec: &SystemSpec,
    y0: &StateField,
    y1: &StateField,
    horizon: f64,
    cfl: f64,
    margin_steps: usize,
) -> Result<SynthesisReport> {
    check_horizon(horizon)?;
    check_pair(y0, y1)?;
    if !couplings_invertible(spec) {
        return Err(Error::NotInvertible);
    }
    let grid = y0.grid;
    let time = cfl_dt(spec, &grid, cfl, horizon)?;
    let t_inf = match minimal_control_time(spec)?.value {
        ControlTime::Finite(v) => v,
        ControlTime::Infinite => return Err(Error::NotInvertible),
    };
    let margin = margin_steps as f64 * time.dt;
    if !(horizon >= t_inf + margin) || horizon <= t_inf {
        return Err(Error::BelowThreshold {
            horizon,
            t_inf,
            margin,
        });
    }
    if spec.omega.closure_is_full() {
        return synthesize_full_domain(spec, y0, y1, horizon, cfl);
    }

    let refined = refine_omegahat(spec, 0.5 * (horizon - t_inf))?;
    let xi = CutoffXi::new(&spec.omega, &refined.omega_hat)?;
    let gluing = Gluing::new(spec, y0, y1, time)?;

    let n = spec.n();
    let mask = grid.mask(&spec.omega);
    let xi_cells = discrete_xi(&xi, &grid, &mask);

    // boundary-controlled pieces where ξ does not vanish identically
    let pieces: Vec<(usize, Grid)> = complement_components(&refined.omega_hat)
        .iter()
        .filter(|c| !xi.vanishes_on(c))
        .filter_map(|c| grid.restrict(c))
        .map(|(first, sub)| widen(&grid, first, sub, &xi_cells))
        .collect();
    let hums = pieces
        .par_iter()
        .map(|&(first, sub)| {
            let mut r = hum_boundary_control(spec, &y0.restrict(first, sub), &y1.restrict(first, sub), time)?;
            r.first_cell = first;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let xi_val = DMatrix::from_fn(n, grid.cells, |_, i| xi_cells[i]);
    let one_minus_xi = xi_val.map(|v| 1.0 - v);
    let stepper = forward_transport(spec, grid)?;
    let step = |y: &DMatrix<f64>| stepper.step(y, time.dt, None, None, None);

    let glued_state = |k: usize, y_in: &DMatrix<f64>| {
        let mut y_out = DMatrix::zeros(n, grid.cells);
        for h in &hums {
            y_out
                .columns_mut(h.first_cell, h.grid.cells)
                .copy_from(&h.trajectory[k]);
        }
        xi_val.component_mul(&y_out) + one_minus_xi.component_mul(y_in)
    };
    // u = ξ'Λ(y_out - y_in) + (1 - ξ) u_in, with the ξ' term taken as the
    // residual of the glued state in the scheme itself. Transitions of ξ
    // narrower than a cell then still carry their full jump.
    let slices = (0..time.steps)
        .map(|k| {
            let (in_now, in_next) = (gluing.state(k, time), gluing.state(k + 1, time));
            let glued_residual = (glued_state(k + 1, &in_next) - step(&glued_state(k, &in_now))) / time.dt;
            let in_residual = (&in_next - step(&in_now)) / time.dt;
            let mut u = glued_residual + one_minus_xi.component_mul(&(gluing.control(k, time) - in_residual));
            for (i, &inside) in mask.iter().enumerate() {
                if !inside {
                    u.column_mut(i).fill(0.0);
                }
            }
            u
        })
        .collect();
    let control = ControlField::new(slices, mask)?;
    let residuals = hums.iter().map(|h| (h.interval, h.residual)).collect();
    finish(
        spec,
        y0,
        y1,
        control,
        time,
        refined.omega_hat.intervals().to_vec(),
        xi.omega_one.clone(),
        residuals,
    )
}
