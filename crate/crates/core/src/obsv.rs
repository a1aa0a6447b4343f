//! Observability of the adjoint system.
//!
//! The discrete Gramian is the quadratic form
//! `z¹ ↦ Σ_{t_1..t_K} Δt Σ_{cells in ω} Δx |z(t)|²` where `z` solves the
//! adjoint backward from `z(T) = z¹`. Its smallest eigenvalue relative to the
//! `Δx`-weighted norm measures how well `ω` observes the system over `[0, T]`.
//!
//! When `Q0` is rank deficient a family of final data concentrated near
//! `x = 0` makes the ratio `‖z¹‖² / ∫‖z‖²` unbounded, so no observability
//! inequality can hold ([`necessity_witness`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::canon::null_vector;
use crate::model::{ControlDomain, SourceTerm, SystemSpec};
use crate::pde::{adjoint_couplings, adjoint_transport, cfl_dt, Drive, Grid, StateField, TimeGrid};
use crate::times::{inverse_travel_time, speed_travel_time};
use crate::{Error, Result};

/// Largest `n·N` for which a dense Gramian is assembled.
pub const MAX_GRAMIAN_DIM: usize = 4000;

/// Relative level used by [`detect_threshold`].
pub const THRESHOLD_RATIO: f64 = 1e-3;

/// Assembles the Gramian for `omega` over `time` on `grid`.
///
/// Uses `G_1 = ΔtΔx P` and `G_{j+1} = ΔtΔx P + Aᵀ G_j A`, where `A` is one
/// adjoint step and `P` the projection on cells in `omega`; this equals the
/// sum over basis final data of the observed adjoint energy.
pub fn gramian(spec: &SystemSpec, grid: Grid, time: TimeGrid, omega: &ControlDomain) -> Result<DMatrix<f64>> {
    let n = spec.n();
    let dim = n * grid.cells;
    if dim > MAX_GRAMIAN_DIM {
        return Err(Error::TooLarge {
            size: dim,
            limit: MAX_GRAMIAN_DIM,
        });
    }
    let transport = adjoint_transport(spec, grid, None)?;
    let courant = transport.courant(time.dt);
    if courant > 1.0 + 1e-12 {
        return Err(Error::Cfl { courant });
    }
    let weight = time.dt * grid.dx();
    let mask = grid.mask(omega);
    let observed: Vec<f64> = (0..dim).map(|r| if mask[r / n] { weight } else { 0.0 }).collect();

    // column lists of the sparse step matrix
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
    for (row, col, v) in transport.step_matrix(time.dt) {
        columns[col].push((row, v));
    }

    let mut g = DMatrix::from_diagonal(&DVector::from_vec(observed.clone()));
    if time.steps == 0 {
        return Ok(DMatrix::zeros(dim, dim));
    }
    let mut ga = DMatrix::zeros(dim, dim);
    for _ in 1..time.steps {
        // ga = G A
        for (c, entries) in columns.iter().enumerate() {
            let mut col = ga.column_mut(c);
            col.fill(0.0);
            for &(r, v) in entries {
                col.axpy(v, &g.column(r), 1.0);
            }
        }
        // G = Aᵀ (G A) + W
        for (c, entries) in columns.iter().enumerate() {
            for j in 0..dim {
                let mut acc = 0.0;
                for &(r, v) in entries {
                    acc += v * ga[(r, j)];
                }
                g[(c, j)] = acc;
            }
        }
        for (i, &w) in observed.iter().enumerate() {
            g[(i, i)] += w;
        }
    }
    let sym = (&g + g.transpose()) * 0.5;
    Ok(sym)
}

/// `Σ_{t_1..t_K} Δt Δx Σ_{cells in ω} |z(t)|²` from one adjoint solve.
pub fn observed_energy(
    spec: &SystemSpec,
    z1: &StateField,
    time: TimeGrid,
    omega: &ControlDomain,
    source: Option<&SourceTerm>,
) -> Result<f64> {
    let grid = z1.grid;
    let mask = grid.mask(omega);
    let transport = adjoint_transport(spec, grid, source)?;
    let mut total = 0.0;
    transport.run(&z1.values, time, Drive::default(), |k, z| {
        if k < time.steps {
            let mut e = 0.0;
            for (i, col) in z.column_iter().enumerate() {
                if mask[i] {
                    e += col.norm_squared();
                }
            }
            total += e;
        }
    })?;
    Ok(total * time.dt * grid.dx())
}

/// Smallest eigenvalue of `G` relative to the `Δx`-weighted norm.
pub fn sigma_min(g: &DMatrix<f64>, dx: f64) -> f64 {
    if g.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(g.clone());
    eig.eigenvalues.min() / dx
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramianSweepResult {
    /// `(T, σ_min)` in the order requested.
    pub points: Vec<(f64, f64)>,
    pub grid: Grid,
    pub cfl: f64,
    pub omega: ControlDomain,
}

/// `σ_min` for each horizon in `horizons` (ascending), each on its own
/// CFL-snapped time grid. Horizons are evaluated in parallel.
pub fn sigma_min_sweep(
    spec: &SystemSpec,
    grid: Grid,
    cfl: f64,
    horizons: &[f64],
    omega: &ControlDomain,
) -> Result<GramianSweepResult> {
    if horizons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("horizons must be sorted ascending".into()));
    }
    if let Some(&t) = horizons.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Precondition(format!("horizon must be > 0, got {t}")));
    }
    let points = horizons
        .par_iter()
        .map(|&t| {
            let time = cfl_dt(spec, &grid, cfl, t)?;
            let g = gramian(spec, grid, time, omega)?;
            Ok((t, sigma_min(&g, grid.dx())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GramianSweepResult {
        points,
        grid,
        cfl,
        omega: omega.clone(),
    })
}

/// Largest swept horizon with `σ_min < THRESHOLD_RATIO · σ_min(T_max)`, or
/// `None` if every horizon is above that level.
pub fn detect_threshold(sweep: &GramianSweepResult) -> Option<f64> {
    let &(_, top) = sweep.points.last()?;
    sweep
        .points
        .iter()
        .rev()
        .find(|&&(_, s)| s < THRESHOLD_RATIO * top)
        .map(|&(t, _)| t)
}

/// A unit vector `η ∈ R^p` with `R0ᵀ η = 0`, or `None` if `R0` has rank `p`.
pub fn kernel_vector(spec: &SystemSpec) -> Option<DVector<f64>> {
    let (r0, _) = adjoint_couplings(spec);
    null_vector(&r0.transpose())
}

#[derive(Clone, Debug)]
pub struct NecessityWitness {
    pub nu: f64,
    pub eta: DVector<f64>,
    pub z1: StateField,
    pub ratio: f64,
    /// Largest `|z₋|` seen over the adjoint run.
    pub max_negative: f64,
    pub time: TimeGrid,
}

fn check_neg_derivative(spec: &SystemSpec, grid: &Grid) -> Result<()> {
    let expected = SourceTerm::neg_speed_derivative(&spec.speeds);
    for x in grid.centers() {
        if (spec.source.at(x) - expected.at(x)).amax() > 1e-12 {
            return Err(Error::Precondition("witness requires M = -Λ'".into()));
        }
    }
    Ok(())
}

/// Builds `z^{1,ν}` on `grid`, runs the adjoint over `[0, horizon]` and
/// returns `R(ν) = ‖z¹‖² / Σ Δt ‖z(t)‖²` over the whole domain.
pub fn necessity_witness(spec: &SystemSpec, grid: Grid, cfl: f64, nu: f64, horizon: f64) -> Result<NecessityWitness> {
    if !(nu >= 1.0) {
        return Err(Error::Precondition(format!("nu must be >= 1, got {nu}")));
    }
    check_neg_derivative(spec, &grid)?;
    let eta = kernel_vector(spec)
        .ok_or_else(|| Error::Precondition("Q0 has full rank p: no witness exists".into()))?;
    let (m, n) = (spec.m, spec.n());
    let speeds = spec.speeds.speeds();
    let full_time = |k: usize| speed_travel_time(&speeds[k], 0.0, 1.0);
    let t_n = full_time(n - 1);
    let needed = full_time(0).max(t_n);
    if horizon < needed {
        return Err(Error::Precondition(format!(
            "horizon {horizon} below max(T_1, T_n) = {needed}"
        )));
    }

    let support: Vec<usize> = (0..eta.len()).filter(|&j| eta[j] != 0.0).collect();
    // Σ_{j∈J} η_j² λ_{m+j}(φ_{m+j}⁻¹(s))
    let weight = |s: f64| -> f64 {
        support
            .iter()
            .map(|&j| eta[j] * eta[j] * speeds[m + j].value(inverse_travel_time(&speeds[m + j], s)))
            .sum()
    };
    // g² = -f'/weight, f(s) = ((T_n - s)/T_n)^ν
    let g = |s: f64| -> f64 {
        if !(s > 0.0 && s < t_n) {
            return 0.0;
        }
        let df = -nu / t_n * ((t_n - s) / t_n).powf(nu - 1.0);
        (-df / weight(s)).sqrt()
    };
    let z1 = StateField::from_fn(n, grid, |k, x| {
        if k < m {
            return 0.0;
        }
        let j = k - m;
        let phi = speed_travel_time(&speeds[k], 0.0, x);
        if phi < t_n {
            g(phi) * eta[j]
        } else {
            0.0
        }
    });

    let time = cfl_dt(spec, &grid, cfl, horizon)?;
    let transport = adjoint_transport(spec, grid, None)?;
    let mut energy = 0.0;
    let mut max_negative = 0.0_f64;
    transport.run(&z1.values, time, Drive::default(), |k, z| {
        if k < time.steps {
            energy += z.norm_squared();
        }
        for row in 0..m {
            max_negative = max_negative.max(z.row(row).amax());
        }
    })?;
    let dx = grid.dx();
    let ratio = dx * z1.values.norm_squared() / (time.dt * dx * energy);
    Ok(NecessityWitness {
        nu,
        eta,
        z1,
        ratio,
        max_negative,
        time,
    })
}

/// `R(ν)` for each `ν`, evaluated in parallel.
pub fn necessity_sweep(spec: &SystemSpec, grid: Grid, cfl: f64, nus: &[f64], horizon: f64) -> Result<Vec<(f64, f64)>> {
    nus.par_iter()
        .map(|&nu| necessity_witness(spec, grid, cfl, nu, horizon).map(|w| (nu, w.ratio)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, SpeedProfile};
    use std::f64::consts::PI;

    fn spec(q0: f64, omega: &[(f64, f64)]) -> SystemSpec {
        SystemSpec {
            m: 1,
            speeds: SpeedProfile::constant(&[-1.0, 1.0]),
            source: SourceTerm::zero(2),
            couplings: CouplingSpec {
                q0: DMatrix::from_element(1, 1, q0),
                q1: DMatrix::from_element(1, 1, 1.0),
            },
            omega: ControlDomain::new(omega).unwrap(),
        }
    }

    #[test]
    fn gramian_matches_direct_adjoint_solves() {
        let s = spec(0.5, &[(0.25, 0.75)]);
        let grid = Grid::unit(16).unwrap();
        let time = cfl_dt(&s, &grid, 0.9, 0.7).unwrap();
        let g = gramian(&s, grid, time, &s.omega).unwrap();
        for idx in [0, 5, 17, 31] {
            let mut z1 = StateField::zeros(2, grid);
            z1.values[(idx % 2, idx / 2)] = 1.0;
            let e = observed_energy(&s, &z1, time, &s.omega, None).unwrap();
            assert!((e - g[(idx, idx)]).abs() <= 1e-12, "{e} vs {}", g[(idx, idx)]);
        }
        let z1 = StateField::from_fn(2, grid, |k, x| (PI * x).sin() + k as f64 * x);
        let v = DVector::from_column_slice(z1.values.as_slice());
        let form = (v.transpose() * &g * &v)[(0, 0)];
        let e = observed_energy(&s, &z1, time, &s.omega, None).unwrap();
        assert!((form - e).abs() <= 1e-12 * e.max(1.0));
    }

    #[test]
    fn gramian_vanishes_for_short_windows() {
        let s = spec(1.0, &[(0.0, 1.0)]);
        let grid = Grid::unit(16).unwrap();
        let time = TimeGrid { dt: 1e-4, steps: 1 };
        let g = gramian(&s, grid, time, &s.omega).unwrap();
        assert!(g.amax() <= time.dt * grid.dx());
    }

    #[test]
    fn gramian_size_guard() {
        let s = spec(1.0, &[(0.0, 1.0)]);
        let grid = Grid::unit(2001).unwrap();
        let time = cfl_dt(&s, &grid, 0.9, 0.1).unwrap();
        assert!(matches!(gramian(&s, grid, time, &s.omega), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn full_domain_is_observable() {
        let s = spec(1.0, &[(0.0, 1.0)]);
        let grid = Grid::unit(20).unwrap();
        let sweep = sigma_min_sweep(&s, grid, 1.0, &[0.1, 0.3, 0.6], &s.omega).unwrap();
        for &(_, sig) in &sweep.points {
            assert!(sig > 1e-3);
        }
        for w in sweep.points.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-10);
        }
    }

    #[test]
    fn kernel_vectors() {
        assert_eq!(kernel_vector(&spec(0.0, &[(0.0, 1.0)])).unwrap()[0].abs(), 1.0);
        assert!(kernel_vector(&spec(1.0, &[(0.0, 1.0)])).is_none());
        let s = SystemSpec {
            m: 1,
            speeds: SpeedProfile::constant(&[-1.0, 1.0, 2.0]),
            source: SourceTerm::zero(3),
            couplings: CouplingSpec {
                q0: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
                q1: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            },
            omega: ControlDomain::full(),
        };
        let eta = kernel_vector(&s).unwrap();
        let (r0, _) = adjoint_couplings(&s);
        assert!((r0.transpose() * &eta).amax() <= 1e-12);
        assert!((eta.norm() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn witness_preconditions() {
        let grid = Grid::unit(50).unwrap();
        let s = spec(0.0, &[(0.0, 1.0)]);
        assert!(necessity_witness(&s, grid, 0.9, 0.0, 2.0).is_err());
        assert!(necessity_witness(&s, grid, 0.9, 1.0, 0.5).is_err());
        assert!(necessity_witness(&spec(1.0, &[(0.0, 1.0)]), grid, 0.9, 1.0, 2.0).is_err());
    }

    #[test]
    fn witness_support_and_ratio() {
        let grid = Grid::unit(400).unwrap();
        let s = spec(0.0, &[(0.0, 1.0)]);
        let w = necessity_witness(&s, grid, 1.0, 2.0, 2.0).unwrap();
        assert_eq!(w.max_negative, 0.0);
        assert!(w.z1.values.row(0).iter().all(|&v| v == 0.0));
        assert!((w.ratio - 3.0).abs() < 0.15, "ratio {}", w.ratio);
    }
}
