//! Explicit first-order upwind solvers.
//!
//! All four solvers (forward, backward in time, boundary controlled on a
//! subinterval, adjoint) share one transport engine, [`Transport`]. Backward
//! and adjoint problems are run in reversed time `s = T - t`, which flips the
//! sign of every speed. At an end of the domain the incoming components are
//! either coupled to the outgoing trace through a matrix or prescribed by a
//! control series. The outgoing trace is the value of the boundary cell.
//!
//! [`CharacteristicsOracle`] gives exact solutions for constant speeds and
//! `M = 0` and is used as a reference in tests.

use nalgebra::{DMatrix, DVector};

use crate::model::{ControlDomain, Interval, SourceTerm, SystemSpec};
use crate::{Error, Result};

/// Default Courant factor.
pub const DEFAULT_CFL: f64 = 0.9;

/// Uniform cell-centred grid on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Grid {
    pub const MIN_CELLS: usize = 8;

    pub fn new(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if cells < Self::MIN_CELLS {
            return Err(Error::Precondition(format!(
                "grid needs at least {} cells, got {cells}",
                Self::MIN_CELLS
            )));
        }
        if !(lo < hi) {
            return Err(Error::Precondition(format!("empty grid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, cells })
    }

    pub fn unit(cells: usize) -> Result<Self> {
        Self::new(0.0, 1.0, cells)
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Cells whose centres lie in `omega`.
    pub fn mask(&self, omega: &ControlDomain) -> Vec<bool> {
        (0..self.cells).map(|i| omega.contains(self.center(i))).collect()
    }

    /// The run of cells whose centres lie in `interval`, as `(first, count)`,
    /// together with the grid they span. Endpoints at 0 or 1 stay exact.
    pub fn restrict(&self, interval: &Interval) -> Option<(usize, Grid)> {
        let dx = self.dx();
        let first = (0..self.cells).find(|&i| interval.contains(self.center(i)))?;
        let count = (first..self.cells)
            .take_while(|&i| interval.contains(self.center(i)))
            .count();
        let lo = if first == 0 { self.lo } else { self.lo + first as f64 * dx };
        let end = first + count;
        let hi = if end == self.cells { self.hi } else { self.lo + end as f64 * dx };
        Some((first, Grid { lo, hi, cells: count }))
    }
}

/// `steps` steps of size `dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }
}

/// `Δt = cfl · Δx / max |λ|`, shrunk so that `horizon / Δt` is an integer.
pub fn cfl_dt(spec: &SystemSpec, grid: &Grid, cfl: f64, horizon: f64) -> Result<TimeGrid> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::Precondition(format!("CFL factor must be in (0, 1], got {cfl}")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::Precondition(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    let dt = cfl * grid.dx() / spec.speeds.max_abs();
    if horizon == 0.0 {
        return Ok(TimeGrid { dt, steps: 0 });
    }
    // guard against 0.3 / 0.003 = 100.00000000000001
    let ratio = horizon / dt;
    let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio {
        ratio.round()
    } else {
        ratio.ceil()
    } as usize;
    Ok(TimeGrid {
        dt: horizon / steps as f64,
        steps,
    })
}

/// `y(t, ·)` sampled at cell centres: one row per component.
#[derive(Clone, Debug, PartialEq)]
pub struct StateField {
    pub values: DMatrix<f64>,
    pub grid: Grid,
    pub t: f64,
}

impl StateField {
    pub fn zeros(n: usize, grid: Grid) -> Self {
        Self {
            values: DMatrix::zeros(n, grid.cells),
            grid,
            t: 0.0,
        }
    }

    /// Samples `f(k, x)` at the cell centres.
    pub fn from_fn(n: usize, grid: Grid, f: impl Fn(usize, f64) -> f64) -> Self {
        let centers = grid.centers();
        Self {
            values: DMatrix::from_fn(n, grid.cells, |k, i| f(k, centers[i])),
            grid,
            t: 0.0,
        }
    }

    /// Restriction to `count` cells starting at `first`, on `sub`.
    pub fn restrict(&self, first: usize, sub: Grid) -> StateField {
        StateField {
            values: self.values.columns(first, sub.cells).into_owned(),
            grid: sub,
            t: self.t,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values, self.grid.dx())
    }
}

/// `(Δx Σ |y|²)^{1/2}`.
pub fn l2_norm(values: &DMatrix<f64>, dx: f64) -> f64 {
    (dx * values.norm_squared()).sqrt()
}

/// Interior control, one `n × N` slice per time step; zero off the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField {
    pub slices: Vec<DMatrix<f64>>,
    pub mask: Vec<bool>,
}

impl ControlField {
    pub fn zeros(n: usize, cells: usize, steps: usize, mask: Vec<bool>) -> Self {
        Self {
            slices: vec![DMatrix::zeros(n, cells); steps],
            mask,
        }
    }

    /// Wraps `slices`, rejecting nonzero or non-finite values off the mask.
    pub fn new(slices: Vec<DMatrix<f64>>, mask: Vec<bool>) -> Result<Self> {
        for (k, s) in slices.iter().enumerate() {
            if s.ncols() != mask.len() {
                return Err(Error::Precondition(format!(
                    "control slice {k} has {} cells, mask has {}",
                    s.ncols(),
                    mask.len()
                )));
            }
            for (i, col) in s.column_iter().enumerate() {
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: k,
                        component: 0,
                        cell: i,
                    });
                }
                if !mask[i] && col.iter().any(|&v| v != 0.0) {
                    return Err(Error::Precondition(format!(
                        "control slice {k} is nonzero at cell {i} outside omega"
                    )));
                }
            }
        }
        Ok(Self { slices, mask })
    }

    /// Sets every value off the mask to exactly zero.
    pub fn apply_mask(&mut self) {
        for s in &mut self.slices {
            for (i, &inside) in self.mask.iter().enumerate() {
                if !inside {
                    s.column_mut(i).fill(0.0);
                }
            }
        }
    }

    pub fn steps(&self) -> usize {
        self.slices.len()
    }
}

/// Boundary values at the two ends of the grid on every time level.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TraceRecord {
    pub left: Vec<DVector<f64>>,
    pub right: Vec<DVector<f64>>,
}

/// How the incoming components are fixed at one end.
#[derive(Clone, Debug, PartialEq)]
pub enum EndRule {
    /// incoming = matrix · outgoing trace
    Coupling(DMatrix<f64>),
    /// incoming given by a control series
    Control,
}

/// Data driving a [`Transport`] run. Boundary series hold one vector per step
/// (of incoming values in component order); the interior field one slice per step.
#[derive(Clone, Copy, Debug, Default)]
pub struct Drive<'a> {
    pub left: Option<&'a [DVector<f64>]>,
    pub right: Option<&'a [DVector<f64>]>,
    pub interior: Option<&'a ControlField>,
}

/// A linear transport system `∂t w + A(x) ∂x w = S(x) w + f` with diagonal
/// `A` of fixed sign per component, discretized by upwinding.
#[derive(Clone, Debug)]
pub struct Transport {
    grid: Grid,
    speed: DMatrix<f64>,
    source: Option<Vec<DMatrix<f64>>>,
    /// components entering at the left end (positive speed)
    incoming_left: Vec<usize>,
    /// components entering at the right end (negative speed)
    incoming_right: Vec<usize>,
    left: EndRule,
    right: EndRule,
}

impl Transport {
    /// `speed(k, x)` and `source(x)` are sampled at the cell centres.
    pub fn new(
        grid: Grid,
        n: usize,
        speed: impl Fn(usize, f64) -> f64,
        source: impl Fn(f64) -> DMatrix<f64>,
        left: EndRule,
        right: EndRule,
    ) -> Result<Self> {
        let centers = grid.centers();
        let speed = DMatrix::from_fn(n, grid.cells, |k, i| speed(k, centers[i]));
        let mut incoming_left = Vec::new();
        let mut incoming_right = Vec::new();
        for k in 0..n {
            let row = speed.row(k);
            if row.iter().all(|&a| a > 0.0) {
                incoming_left.push(k);
            } else if row.iter().all(|&a| a < 0.0) {
                incoming_right.push(k);
            } else {
                return Err(Error::InvalidSpec(format!("speed {} changes sign or vanishes", k + 1)));
            }
        }
        let per_cell: Vec<DMatrix<f64>> = centers.iter().map(|&x| source(x)).collect();
        let source = per_cell
            .iter()
            .any(|m| m.iter().any(|&a| a != 0.0))
            .then_some(per_cell);
        if let EndRule::Coupling(c) = &left {
            if c.shape() != (incoming_left.len(), incoming_right.len()) {
                return Err(Error::InvalidSpec(format!("left coupling has shape {:?}", c.shape())));
            }
        }
        if let EndRule::Coupling(c) = &right {
            if c.shape() != (incoming_right.len(), incoming_left.len()) {
                return Err(Error::InvalidSpec(format!("right coupling has shape {:?}", c.shape())));
            }
        }
        Ok(Self {
            grid,
            speed,
            source,
            incoming_left,
            incoming_right,
            left,
            right,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.speed.nrows()
    }

    pub fn incoming_left(&self) -> &[usize] {
        &self.incoming_left
    }

    pub fn incoming_right(&self) -> &[usize] {
        &self.incoming_right
    }

    pub fn left_rule(&self) -> &EndRule {
        &self.left
    }

    pub fn right_rule(&self) -> &EndRule {
        &self.right
    }

    pub fn courant(&self, dt: f64) -> f64 {
        self.speed.amax() * dt / self.grid.dx()
    }

    fn ghost_left(&self, y: &DMatrix<f64>, control: Option<&DVector<f64>>) -> DVector<f64> {
        match &self.left {
            EndRule::Coupling(c) => {
                let out = DVector::from_iterator(
                    self.incoming_right.len(),
                    self.incoming_right.iter().map(|&k| y[(k, 0)]),
                );
                c * out
            }
            EndRule::Control => control.cloned().unwrap_or_else(|| DVector::zeros(self.incoming_left.len())),
        }
    }

    fn ghost_right(&self, y: &DMatrix<f64>, control: Option<&DVector<f64>>) -> DVector<f64> {
        let last = self.grid.cells - 1;
        match &self.right {
            EndRule::Coupling(c) => {
                let out = DVector::from_iterator(
                    self.incoming_left.len(),
                    self.incoming_left.iter().map(|&k| y[(k, last)]),
                );
                c * out
            }
            EndRule::Control => control.cloned().unwrap_or_else(|| DVector::zeros(self.incoming_right.len())),
        }
    }

    /// Values at both ends, in component order: outgoing components read from
    /// the boundary cell, incoming ones from the boundary data.
    fn traces(&self, y: &DMatrix<f64>, gl: &DVector<f64>, gr: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let last = self.grid.cells - 1;
        let mut left = y.column(0).into_owned();
        let mut right = y.column(last).into_owned();
        for (j, &k) in self.incoming_left.iter().enumerate() {
            left[k] = gl[j];
        }
        for (j, &k) in self.incoming_right.iter().enumerate() {
            right[k] = gr[j];
        }
        (left, right)
    }

    /// One step from `y`; `u` is added as an explicit source.
    pub fn step(
        &self,
        y: &DMatrix<f64>,
        dt: f64,
        left_control: Option<&DVector<f64>>,
        right_control: Option<&DVector<f64>>,
        u: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let gl = self.ghost_left(y, left_control);
        let gr = self.ghost_right(y, right_control);
        self.step_with_ghosts(y, dt, &gl, &gr, u)
    }

    fn step_with_ghosts(
        &self,
        y: &DMatrix<f64>,
        dt: f64,
        gl: &DVector<f64>,
        gr: &DVector<f64>,
        u: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let cells = self.grid.cells;
        let r = dt / self.grid.dx();
        let mut next = y.clone();
        for (j, &k) in self.incoming_left.iter().enumerate() {
            let mut prev = gl[j];
            for i in 0..cells {
                let cur = y[(k, i)];
                next[(k, i)] = cur - r * self.speed[(k, i)] * (cur - prev);
                prev = cur;
            }
        }
        for (j, &k) in self.incoming_right.iter().enumerate() {
            let mut prev = gr[j];
            for i in (0..cells).rev() {
                let cur = y[(k, i)];
                next[(k, i)] = cur - r * self.speed[(k, i)] * (prev - cur);
                prev = cur;
            }
        }
        if let Some(source) = &self.source {
            for i in 0..cells {
                let sy = &source[i] * y.column(i);
                for k in 0..y.nrows() {
                    next[(k, i)] += dt * sy[k];
                }
            }
        }
        if let Some(u) = u {
            next += u * dt;
        }
        next
    }

    /// Advances `y0` over `time`, calling `observe(k, y_k)` for `k = 0..=steps`.
    /// Returns the final state and the boundary traces.
    pub fn run(
        &self,
        y0: &DMatrix<f64>,
        time: TimeGrid,
        drive: Drive<'_>,
        mut observe: impl FnMut(usize, &DMatrix<f64>),
    ) -> Result<(DMatrix<f64>, TraceRecord)> {
        if y0.shape() != (self.n(), self.grid.cells) {
            return Err(Error::Precondition(format!(
                "state has shape {:?}, expected {:?}",
                y0.shape(),
                (self.n(), self.grid.cells)
            )));
        }
        let courant = self.courant(time.dt);
        if time.steps > 0 && courant > 1.0 + 1e-12 {
            return Err(Error::Cfl { courant });
        }
        let steps = time.steps;
        let series = |rule: &EndRule, data: Option<&[DVector<f64>]>, side: &'static str, len: usize| {
            match (rule, data) {
                (EndRule::Control, None) if steps > 0 => Err(Error::MissingControl(side)),
                (EndRule::Control, Some(d)) if d.len() != steps => Err(Error::ControlLength {
                    got: d.len(),
                    expected: steps,
                }),
                (EndRule::Control, Some(d)) if d.iter().any(|v| v.len() != len) => Err(Error::Precondition(
                    format!("{side} control vectors must have length {len}"),
                )),
                _ => Ok(()),
            }
        };
        series(&self.left, drive.left, "left", self.incoming_left.len())?;
        series(&self.right, drive.right, "right", self.incoming_right.len())?;
        if let Some(u) = drive.interior {
            if u.steps() != steps {
                return Err(Error::ControlLength {
                    got: u.steps(),
                    expected: steps,
                });
            }
        }

        let mut traces = TraceRecord::default();
        let mut y = y0.clone();
        for k in 0..=steps {
            observe(k, &y);
            let gl = self.ghost_left(&y, control_at(drive.left, k));
            let gr = self.ghost_right(&y, control_at(drive.right, k));
            let (tl, tr) = self.traces(&y, &gl, &gr);
            traces.left.push(tl);
            traces.right.push(tr);
            if k == steps {
                break;
            }
            let u = drive.interior.map(|f| &f.slices[k]);
            y = self.step_with_ghosts(&y, time.dt, &gl, &gr, u);
            if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: k + 1,
                    component: pos % self.n(),
                    cell: pos / self.n(),
                });
            }
        }
        Ok((y, traces))
    }

    /// Sparse matrix of one uncontrolled step, as `(row, col, value)` triplets
    /// over the column-major flattening `k + n·i`.
    pub fn step_matrix(&self, dt: f64) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let dim = n * self.grid.cells;
        let mut triplets = Vec::new();
        let mut e = DMatrix::zeros(n, self.grid.cells);
        for col in 0..dim {
            e[(col % n, col / n)] = 1.0;
            let out = self.step(&e, dt, None, None, None);
            for (row, &v) in out.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((row, col, v));
                }
            }
            e[(col % n, col / n)] = 0.0;
        }
        triplets
    }
}

/// Entry `k` of a control series; the last entry stands in at `k = len`.
fn control_at(data: Option<&[DVector<f64>]>, k: usize) -> Option<&DVector<f64>> {
    data.and_then(|d| d.get(k.min(d.len().saturating_sub(1))))
}

/// Output of a forward-in-time solve.
#[derive(Clone, Debug)]
pub struct Solution {
    pub final_state: StateField,
    /// States at `t_0, …, t_K`.
    pub trajectory: Vec<DMatrix<f64>>,
    pub traces: TraceRecord,
    pub time: TimeGrid,
}

fn source_fn(source: &SourceTerm, sign: f64) -> impl Fn(f64) -> DMatrix<f64> + '_ {
    move |x| source.at(x) * sign
}

/// Forward system on `[0, 1]` with the physical coupling conditions.
pub fn forward_transport(spec: &SystemSpec, grid: Grid) -> Result<Transport> {
    let speeds = spec.speeds.speeds();
    Transport::new(
        grid,
        spec.n(),
        |k, x| speeds[k].value(x),
        source_fn(&spec.source, 1.0),
        EndRule::Coupling(spec.couplings.q0.clone()),
        EndRule::Coupling(spec.couplings.q1.clone()),
    )
}

/// Time-reversed uncontrolled system: speeds negated, source `-M`, couplings
/// `Q0⁻¹` at `x = 0` for `y₋` and `Q1⁻¹` at `x = 1` for `y₊`.
pub fn backward_transport(spec: &SystemSpec, grid: Grid) -> Result<Transport> {
    let q0_inv = spec
        .couplings
        .q0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Q0".into()))?;
    let q1_inv = spec
        .couplings
        .q1
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Q1".into()))?;
    let speeds = spec.speeds.speeds();
    Transport::new(
        grid,
        spec.n(),
        |k, x| -speeds[k].value(x),
        source_fn(&spec.source, -1.0),
        EndRule::Coupling(q0_inv),
        EndRule::Coupling(q1_inv),
    )
}

/// Forward system on the cells of a subinterval; ends away from 0 and 1 are
/// controlled.
pub fn boundary_transport(spec: &SystemSpec, sub: Grid) -> Result<Transport> {
    let speeds = spec.speeds.speeds();
    let left = if sub.lo == 0.0 {
        EndRule::Coupling(spec.couplings.q0.clone())
    } else {
        EndRule::Control
    };
    let right = if sub.hi == 1.0 {
        EndRule::Coupling(spec.couplings.q1.clone())
    } else {
        EndRule::Control
    };
    Transport::new(
        sub,
        spec.n(),
        |k, x| speeds[k].value(x),
        source_fn(&spec.source, 1.0),
        left,
        right,
    )
}

/// `R0 = -Λ₊(0) Q0 Λ₋(0)⁻¹` and `R1 = -Λ₋(1) Q1 Λ₊(1)⁻¹`.
pub fn adjoint_couplings(spec: &SystemSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, p) = (spec.m, spec.p());
    let s = spec.speeds.speeds();
    let r0 = DMatrix::from_fn(p, m, |i, j| {
        -s[m + i].value(0.0) * spec.couplings.q0[(i, j)] / s[j].value(0.0)
    });
    let r1 = DMatrix::from_fn(m, p, |i, j| {
        -s[i].value(1.0) * spec.couplings.q1[(i, j)] / s[m + j].value(1.0)
    });
    (r0, r1)
}

/// Adjoint system `∂t z + Λ ∂x z = -(Λ' + Mᵀ) z`, `z₋(0) = R0ᵀ z₊(0)`,
/// `z₊(1) = R1ᵀ z₋(1)`, in reversed time. `source` replaces `M` when given.
pub fn adjoint_transport(spec: &SystemSpec, grid: Grid, source: Option<&SourceTerm>) -> Result<Transport> {
    let (r0, r1) = adjoint_couplings(spec);
    let speeds = spec.speeds.speeds();
    let m_term = source.unwrap_or(&spec.source);
    let n = spec.n();
    Transport::new(
        grid,
        n,
        |k, x| -speeds[k].value(x),
        |x| {
            let mut s = m_term.at(x).transpose();
            for k in 0..n {
                s[(k, k)] += speeds[k].derivative(x);
            }
            s
        },
        EndRule::Coupling(r0.transpose()),
        EndRule::Coupling(r1.transpose()),
    )
}

fn collect_run(
    transport: &Transport,
    y0: &DMatrix<f64>,
    time: TimeGrid,
    drive: Drive<'_>,
) -> Result<(Vec<DMatrix<f64>>, TraceRecord)> {
    let mut trajectory = Vec::with_capacity(time.steps + 1);
    let (_, traces) = transport.run(y0, time, drive, |_, y| trajectory.push(y.clone()))?;
    Ok((trajectory, traces))
}

/// Solves the controlled forward system from `y0` over `time`.
pub fn solve_forward(
    spec: &SystemSpec,
    y0: &StateField,
    u: Option<&ControlField>,
    time: TimeGrid,
) -> Result<Solution> {
    let transport = forward_transport(spec, y0.grid)?;
    let drive = Drive {
        interior: u,
        ..Drive::default()
    };
    let (trajectory, traces) = collect_run(&transport, &y0.values, time, drive)?;
    Ok(Solution {
        final_state: StateField {
            values: trajectory.last().unwrap().clone(),
            grid: y0.grid,
            t: time.horizon(),
        },
        trajectory,
        traces,
        time,
    })
}

/// Solves the uncontrolled system backward from `y(T) = y1`; the returned
/// trajectory is indexed by forward time, so its last entry is `y1`.
pub fn solve_backward(spec: &SystemSpec, y1: &StateField, time: TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let transport = backward_transport(spec, y1.grid)?;
    let (mut trajectory, _) = collect_run(&transport, &y1.values, time, Drive::default())?;
    trajectory.reverse();
    Ok(trajectory)
}

/// Boundary data for [`solve_boundary_forward`]: `left` feeds `y₊` at the
/// left end, `right` feeds `y₋` at the right end.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryControls {
    pub left: Option<Vec<DVector<f64>>>,
    pub right: Option<Vec<DVector<f64>>>,
}

/// Solves the system restricted to the grid of `y0` (a subinterval of
/// `[0, 1]`) with controls at the ends that do not touch 0 or 1.
pub fn solve_boundary_forward(
    spec: &SystemSpec,
    y0: &StateField,
    controls: &BoundaryControls,
    time: TimeGrid,
) -> Result<Solution> {
    let transport = boundary_transport(spec, y0.grid)?;
    let drive = Drive {
        left: controls.left.as_deref(),
        right: controls.right.as_deref(),
        interior: None,
    };
    let (trajectory, traces) = collect_run(&transport, &y0.values, time, drive)?;
    Ok(Solution {
        final_state: StateField {
            values: trajectory.last().unwrap().clone(),
            grid: y0.grid,
            t: time.horizon(),
        },
        trajectory,
        traces,
        time,
    })
}

/// Solves the adjoint backward from `z(T) = z1`; indexed by forward time.
pub fn solve_adjoint(
    spec: &SystemSpec,
    z1: &StateField,
    time: TimeGrid,
    source: Option<&SourceTerm>,
) -> Result<Vec<DMatrix<f64>>> {
    let transport = adjoint_transport(spec, z1.grid, source)?;
    let (mut trajectory, _) = collect_run(&transport, &z1.values, time, Drive::default())?;
    trajectory.reverse();
    Ok(trajectory)
}

/// Boundary behaviour for [`CharacteristicsOracle`].
pub enum OracleEnd<'a> {
    Coupling(DMatrix<f64>),
    /// Incoming values as a function of time.
    Control(Box<dyn Fn(f64) -> DVector<f64> + 'a>),
}

/// Exact solution for constant speeds and `M = 0` by tracing characteristics
/// back to `t = 0` through every boundary reflection.
pub struct CharacteristicsOracle<'a> {
    speeds: Vec<f64>,
    m: usize,
    lo: f64,
    hi: f64,
    left: OracleEnd<'a>,
    right: OracleEnd<'a>,
    initial: Box<dyn Fn(usize, f64) -> f64 + 'a>,
}

impl<'a> CharacteristicsOracle<'a> {
    pub const MAX_DEPTH: usize = 10_000;

    pub fn new(
        spec: &SystemSpec,
        lo: f64,
        hi: f64,
        left: OracleEnd<'a>,
        right: OracleEnd<'a>,
        initial: impl Fn(usize, f64) -> f64 + 'a,
    ) -> Result<Self> {
        if !spec.speeds.is_constant() {
            return Err(Error::Precondition("characteristics oracle needs constant speeds".into()));
        }
        if !spec.source.is_zero() {
            return Err(Error::Precondition("characteristics oracle needs M = 0".into()));
        }
        Ok(Self {
            speeds: spec.speeds.speeds().iter().map(|s| s.value(0.0)).collect(),
            m: spec.m,
            lo,
            hi,
            left,
            right,
            initial: Box::new(initial),
        })
    }

    /// The physical problem on `[0, 1]`.
    pub fn physical(spec: &SystemSpec, initial: impl Fn(usize, f64) -> f64 + 'a) -> Result<Self> {
        Self::new(
            spec,
            0.0,
            1.0,
            OracleEnd::Coupling(spec.couplings.q0.clone()),
            OracleEnd::Coupling(spec.couplings.q1.clone()),
            initial,
        )
    }

    /// Rejects horizons needing more than [`Self::MAX_DEPTH`] reflections.
    pub fn check_horizon(&self, t: f64) -> Result<()> {
        let len = self.hi - self.lo;
        let fastest = self.speeds.iter().fold(0.0_f64, |a, s| a.max(s.abs()));
        let depth = (t * fastest / len).ceil() as usize;
        if depth > Self::MAX_DEPTH {
            return Err(Error::DepthExceeded {
                depth,
                limit: Self::MAX_DEPTH,
            });
        }
        Ok(())
    }

    /// `y_k(t, x)` for a 0-based component `k`.
    pub fn value(&self, k: usize, t: f64, x: f64) -> Result<f64> {
        self.check_horizon(t)?;
        self.trace(k, t, x, 0)
    }

    fn trace(&self, k: usize, t: f64, x: f64, depth: usize) -> Result<f64> {
        if depth > Self::MAX_DEPTH {
            return Err(Error::DepthExceeded {
                depth,
                limit: Self::MAX_DEPTH,
            });
        }
        let lambda = self.speeds[k];
        let foot = x - lambda * t;
        if foot >= self.lo && foot <= self.hi {
            return Ok((self.initial)(k, foot));
        }
        if lambda > 0.0 {
            let t_hit = t - (x - self.lo) / lambda;
            match &self.left {
                OracleEnd::Control(f) => Ok(f(t_hit)[k - self.m]),
                OracleEnd::Coupling(q0) => {
                    let mut acc = 0.0;
                    for i in 0..self.m {
                        let c = q0[(k - self.m, i)];
                        if c != 0.0 {
                            acc += c * self.trace(i, t_hit, self.lo, depth + 1)?;
                        }
                    }
                    Ok(acc)
                }
            }
        } else {
            let t_hit = t - (self.hi - x) / -lambda;
            match &self.right {
                OracleEnd::Control(f) => Ok(f(t_hit)[k]),
                OracleEnd::Coupling(q1) => {
                    let mut acc = 0.0;
                    for j in 0..self.speeds.len() - self.m {
                        let c = q1[(k, j)];
                        if c != 0.0 {
                            acc += c * self.trace(self.m + j, t_hit, self.hi, depth + 1)?;
                        }
                    }
                    Ok(acc)
                }
            }
        }
    }

    /// All components at the given points: an `n × points` matrix.
    pub fn sample(&self, t: f64, points: &[f64]) -> Result<DMatrix<f64>> {
        self.check_horizon(t)?;
        let n = self.speeds.len();
        let mut out = DMatrix::zeros(n, points.len());
        for (j, &x) in points.iter().enumerate() {
            for k in 0..n {
                out[(k, j)] = self.trace(k, t, x, 0)?;
            }
        }
        Ok(out)
    }
}

/// Exact solution of the physical system (constant speeds, `M = 0`, no
/// control) at time `t` and the given points.
pub fn characteristics_oracle(
    spec: &SystemSpec,
    y0: impl Fn(usize, f64) -> f64,
    t: f64,
    points: &[f64],
) -> Result<DMatrix<f64>> {
    CharacteristicsOracle::physical(spec, y0)?.sample(t, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, SpeedProfile};
    use std::f64::consts::PI;

    fn spec(speeds: &[f64], q0: f64, q1: f64) -> SystemSpec {
        SystemSpec {
            m: 1,
            speeds: SpeedProfile::constant(speeds),
            source: SourceTerm::zero(2),
            couplings: CouplingSpec {
                q0: DMatrix::from_element(1, 1, q0),
                q1: DMatrix::from_element(1, 1, q1),
            },
            omega: ControlDomain::new(&[(0.25, 0.75)]).unwrap(),
        }
    }

    #[test]
    fn cfl_snapping() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(100).unwrap();
        let t = cfl_dt(&s, &g, 0.9, 1.0).unwrap();
        assert_eq!(t.steps, 112);
        assert!((t.dt - 1.0 / 112.0).abs() < 1e-15);
        let s2 = spec(&[-2.0, 1.0], 1.0, 1.0);
        let t2 = cfl_dt(&s2, &g, 0.9, 1.0).unwrap();
        assert!(t2.dt <= 0.9 * 0.01 / 2.0);
        assert!(cfl_dt(&s, &g, 1.5, 1.0).is_err());
        let t0 = cfl_dt(&s, &g, 0.9, 0.0).unwrap();
        assert_eq!(t0.steps, 0);
    }

    #[test]
    fn bump_translates_exactly_at_unit_courant() {
        let s = spec(&[-1.0, 1.0], 0.0, 0.0);
        let g = Grid::unit(100).unwrap();
        let y0 = StateField::from_fn(2, g, |_, x| if (0.4..0.5).contains(&x) { 1.0 } else { 0.0 });
        let time = cfl_dt(&s, &g, 1.0, 0.2).unwrap();
        assert_eq!(time.steps, 20);
        let sol = solve_forward(&s, &y0, None, time).unwrap();
        for i in 0..100 {
            let left = if (20..30).contains(&i) { 1.0 } else { 0.0 };
            let right = if (60..70).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(sol.final_state.values[(0, i)], left);
            assert_eq!(sol.final_state.values[(1, i)], right);
        }
    }

    #[test]
    fn zero_horizon_returns_initial() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(16).unwrap();
        let y0 = StateField::from_fn(2, g, |k, x| (k as f64 + 1.0) * x);
        let time = cfl_dt(&s, &g, 0.9, 0.0).unwrap();
        let sol = solve_forward(&s, &y0, None, time).unwrap();
        assert_eq!(sol.final_state.values, y0.values);
        assert_eq!(sol.trajectory.len(), 1);
        let back = solve_backward(&s, &y0, time).unwrap();
        assert_eq!(back, vec![y0.values.clone()]);
    }

    #[test]
    fn matches_oracle_after_reflection() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(400).unwrap();
        // vanishes at both ends, so compatible with the couplings
        let f = |k: usize, x: f64| (PI * (k as f64 + 1.0) * x).sin();
        let y0 = StateField::from_fn(2, g, f);
        let time = cfl_dt(&s, &g, 0.9, 0.7).unwrap();
        let sol = solve_forward(&s, &y0, None, time).unwrap();
        let exact = characteristics_oracle(&s, f, time.horizon(), &g.centers()).unwrap();
        let err = (&sol.final_state.values - &exact).amax();
        assert!(err < 20.0 * g.dx(), "err = {err}");
    }

    #[test]
    fn oracle_reflection_by_hand() {
        // λ = (-1, 1), Q0 = Q1 = 1, y0 = (0, g): the positive component hits
        // x = 1 and comes back on the negative one.
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = |x: f64| x * x;
        let oracle = CharacteristicsOracle::physical(&s, |k, x| if k == 1 { g(x) } else { 0.0 }).unwrap();
        // y_1(0.5, 0.9) traces to x = 1 at t = 0.4, then y_2 foot 1 - 0.4 = 0.6
        assert!((oracle.value(0, 0.5, 0.9).unwrap() - g(0.6)).abs() < 1e-15);
        assert_eq!(oracle.value(1, 0.0, 0.3).unwrap(), g(0.3));
        assert!((oracle.value(1, 0.1, 0.3).unwrap() - g(0.2)).abs() < 1e-15);
    }

    #[test]
    fn oracle_depth_limit() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let oracle = CharacteristicsOracle::physical(&s, |_, _| 1.0).unwrap();
        assert!(matches!(oracle.value(0, 2e4, 0.5), Err(Error::DepthExceeded { .. })));
    }

    #[test]
    fn backward_singular_coupling() {
        let s = spec(&[-1.0, 1.0], 1.0, 0.0);
        let g = Grid::unit(16).unwrap();
        let time = cfl_dt(&s, &g, 0.9, 0.5).unwrap();
        assert!(matches!(
            solve_backward(&s, &StateField::zeros(2, g), time),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn backward_undoes_forward_at_unit_courant() {
        let s = spec(&[-1.0, 1.0], 2.0, 0.5);
        let g = Grid::unit(64).unwrap();
        let y0 = StateField::from_fn(2, g, |k, x| (PI * (k as f64 + 1.0) * x).sin());
        let time = cfl_dt(&s, &g, 1.0, 0.75).unwrap();
        let fwd = solve_forward(&s, &y0, None, time).unwrap();
        let back = solve_backward(&s, &fwd.final_state, time).unwrap();
        assert!((&back[0] - &y0.values).amax() < 1e-12);
    }

    #[test]
    fn boundary_solve_zero_data() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(64).unwrap();
        let (first, sub) = g.restrict(&Interval::new(0.0, 0.25).unwrap()).unwrap();
        assert_eq!((first, sub.cells), (0, 16));
        let time = cfl_dt(&s, &g, 0.9, 0.3).unwrap();
        let controls = BoundaryControls {
            left: None,
            right: Some(vec![DVector::zeros(1); time.steps]),
        };
        let sol = solve_boundary_forward(&s, &StateField::zeros(2, sub), &controls, time).unwrap();
        assert_eq!(sol.final_state.values.amax(), 0.0);
    }

    #[test]
    fn boundary_solve_rejects_bad_series() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(64).unwrap();
        let (_, sub) = g.restrict(&Interval::new(0.0, 0.25).unwrap()).unwrap();
        let time = cfl_dt(&s, &g, 0.9, 0.3).unwrap();
        let y0 = StateField::zeros(2, sub);
        let short = BoundaryControls {
            left: None,
            right: Some(vec![DVector::zeros(1); time.steps - 1]),
        };
        assert!(matches!(
            solve_boundary_forward(&s, &y0, &short, time),
            Err(Error::ControlLength { .. })
        ));
        assert!(matches!(
            solve_boundary_forward(&s, &y0, &BoundaryControls::default(), time),
            Err(Error::MissingControl("right"))
        ));
    }

    #[test]
    fn boundary_solve_matches_oracle() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(800).unwrap();
        let interval = Interval::new(0.0, 0.25).unwrap();
        let (_, sub) = g.restrict(&interval).unwrap();
        let f = |k: usize, x: f64| if k == 0 { (4.0 * PI * x).sin() } else { x };
        let y0 = StateField::from_fn(2, sub, f);
        let time = cfl_dt(&s, &g, 0.9, 0.6).unwrap();
        let controls = BoundaryControls {
            left: None,
            right: Some(vec![DVector::from_element(1, 0.5); time.steps]),
        };
        let sol = solve_boundary_forward(&s, &y0, &controls, time).unwrap();
        let oracle = CharacteristicsOracle::new(
            &s,
            sub.lo,
            sub.hi,
            OracleEnd::Coupling(s.couplings.q0.clone()),
            OracleEnd::Control(Box::new(|_| DVector::from_element(1, 0.5))),
            f,
        )
        .unwrap();
        // compare away from the travelling jump created by the constant control
        let exact = oracle.sample(time.horizon(), &sub.centers()).unwrap();
        let err = (&sol.final_state.values - &exact).amax();
        assert!(err < 0.05, "err = {err}");
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(32).unwrap();
        let time = cfl_dt(&s, &g, 0.9, 0.5).unwrap();
        let z = solve_adjoint(&s, &StateField::zeros(2, g), time, None).unwrap();
        assert!(z.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn adjoint_negative_part_stays_zero_when_q0_vanishes() {
        let s = spec(&[-1.0, 1.0], 0.0, 1.0);
        let g = Grid::unit(200).unwrap();
        let z1 = StateField::from_fn(2, g, |k, x| if k == 1 { (PI * x).sin() + 0.3 } else { 0.0 });
        let time = cfl_dt(&s, &g, 1.0, 2.0).unwrap();
        let z = solve_adjoint(&s, &z1, time, None).unwrap();
        let worst = z.iter().map(|m| m.row(0).amax()).fold(0.0, f64::max);
        assert!(worst <= 1e-12);
    }

    #[test]
    fn interior_control_respects_causality() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(50).unwrap();
        let time = cfl_dt(&s, &g, 0.9, 0.5).unwrap();
        let mask = g.mask(&s.omega);
        let k0 = time.steps / 2;
        let slices = (0..time.steps)
            .map(|k| {
                DMatrix::from_fn(2, 50, |_, i| if mask[i] && k >= k0 { 1.0 } else { 0.0 })
            })
            .collect();
        let u = ControlField::new(slices, mask).unwrap();
        let sol = solve_forward(&s, &StateField::zeros(2, g), Some(&u), time).unwrap();
        for y in &sol.trajectory[..=k0] {
            assert_eq!(y.amax(), 0.0);
        }
        assert!(sol.trajectory[k0 + 1].amax() > 0.0);
    }

    #[test]
    fn control_field_rejects_support_outside_mask() {
        let slices = vec![DMatrix::from_element(1, 3, 1.0)];
        assert!(ControlField::new(slices, vec![true, false, true]).is_err());
    }

    #[test]
    fn cfl_violation_is_reported() {
        let s = spec(&[-1.0, 1.0], 1.0, 1.0);
        let g = Grid::unit(16).unwrap();
        let bad = TimeGrid { dt: 0.1, steps: 3 };
        assert!(matches!(
            solve_forward(&s, &StateField::zeros(2, g), None, bad),
            Err(Error::Cfl { .. })
        ));
    }
}
