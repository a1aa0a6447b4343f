//! Problem data for the hyperbolic system and the set algebra on the control
//! region.
//!
//! Speeds are either constant or piecewise linear, the source `M` is constant
//! or piecewise constant in `x`, and the control region is a finite union of
//! open intervals of `(0, 1)`.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Absolute tolerance used to decide whether two speeds coincide at a breakpoint.
pub const SPEED_EQ_TOL: f64 = 1e-12;

/// One diagonal entry `λ_k(x)` of `Λ`.
#[derive(Clone, Debug, PartialEq)]
pub enum Speed {
    Constant(f64),
    /// Linear interpolation of `v` over the strictly increasing breakpoints `x`,
    /// which must start at 0 and end at 1.
    PiecewiseLinear { x: Vec<f64>, v: Vec<f64> },
}

/// A linear piece `[x0, x1]` of a speed with end values `v0`, `v1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub x0: f64,
    pub x1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Segment {
    pub fn slope(&self) -> f64 {
        (self.v1 - self.v0) / (self.x1 - self.x0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.x0 {
            return self.v0;
        }
        if x >= self.x1 {
            return self.v1;
        }
        let s = (x - self.x0) / (self.x1 - self.x0);
        self.v0 + s * (self.v1 - self.v0)
    }
}

impl Speed {
    pub fn constant(v: f64) -> Self {
        Speed::Constant(v)
    }

    pub fn piecewise_linear(x: Vec<f64>, v: Vec<f64>) -> Self {
        Speed::PiecewiseLinear { x, v }
    }

    /// Checks the breakpoint layout only; sign and ordering are checked by
    /// [`validate`].
    fn check_shape(&self) -> std::result::Result<(), String> {
        match self {
            Speed::Constant(v) => {
                if !v.is_finite() {
                    return Err("speed value must be finite".into());
                }
            }
            Speed::PiecewiseLinear { x, v } => {
                if x.len() < 2 || x.len() != v.len() {
                    return Err(format!(
                        "piecewise-linear speed needs matching x and v with at least 2 points (got {} and {})",
                        x.len(),
                        v.len()
                    ));
                }
                if x[0] != 0.0 || *x.last().unwrap() != 1.0 {
                    return Err("piecewise-linear breakpoints must start at 0 and end at 1".into());
                }
                if x.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err("piecewise-linear breakpoints must be strictly increasing".into());
                }
                if v.iter().chain(x.iter()).any(|a| !a.is_finite()) {
                    return Err("piecewise-linear speed data must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<Segment> {
        match self {
            Speed::Constant(v) => vec![Segment {
                x0: 0.0,
                x1: 1.0,
                v0: *v,
                v1: *v,
            }],
            Speed::PiecewiseLinear { x, v } => x
                .windows(2)
                .zip(v.windows(2))
                .map(|(xs, vs)| Segment {
                    x0: xs[0],
                    x1: xs[1],
                    v0: vs[0],
                    v1: vs[1],
                })
                .collect(),
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Speed::Constant(_) => vec![0.0, 1.0],
            Speed::PiecewiseLinear { x, .. } => x.clone(),
        }
    }

    /// Value at `x`, which is assumed to lie in `[0, 1]`.
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Speed::Constant(v) => *v,
            Speed::PiecewiseLinear { x: xs, v } => {
                let i = segment_index(xs, x);
                Segment {
                    x0: xs[i],
                    x1: xs[i + 1],
                    v0: v[i],
                    v1: v[i + 1],
                }
                .eval(x)
            }
        }
    }

    /// Derivative at `x`; at a breakpoint the slope of the segment to the right
    /// is used (left segment at `x = 1`).
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Speed::Constant(_) => 0.0,
            Speed::PiecewiseLinear { x: xs, v } => {
                let i = segment_index(xs, x);
                (v[i + 1] - v[i]) / (xs[i + 1] - xs[i])
            }
        }
    }

    /// Largest `|λ|` over `[0, 1]` (attained at a breakpoint).
    pub fn sup_abs(&self) -> f64 {
        match self {
            Speed::Constant(v) => v.abs(),
            Speed::PiecewiseLinear { v, .. } => v.iter().fold(0.0_f64, |a, b| a.max(b.abs())),
        }
    }

    /// Smallest `|λ|` over `[0, 1]`; for a speed of constant sign this is
    /// attained at a breakpoint.
    pub fn inf_abs(&self) -> f64 {
        match self {
            Speed::Constant(v) => v.abs(),
            Speed::PiecewiseLinear { v, .. } => v.iter().fold(f64::INFINITY, |a, b| a.min(b.abs())),
        }
    }

    fn values_at_breakpoints(&self) -> Vec<f64> {
        match self {
            Speed::Constant(v) => vec![*v, *v],
            Speed::PiecewiseLinear { v, .. } => v.clone(),
        }
    }
}

/// Index `i` of the segment `[xs[i], xs[i+1]]` containing `x` (right-closed
/// only for the last segment).
fn segment_index(xs: &[f64], x: f64) -> usize {
    let last = xs.len() - 2;
    match xs[1..=last].iter().position(|&b| x < b) {
        Some(i) => i,
        None => last,
    }
}

/// The diagonal speed matrix `Λ(x) = diag(λ_1, …, λ_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedProfile {
    speeds: Vec<Speed>,
}

impl SpeedProfile {
    pub fn new(speeds: Vec<Speed>) -> Self {
        Self { speeds }
    }

    pub fn constant(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| Speed::Constant(v)).collect())
    }

    pub fn n(&self) -> usize {
        self.speeds.len()
    }

    pub fn speeds(&self) -> &[Speed] {
        &self.speeds
    }

    pub fn speed(&self, k: usize) -> Result<&Speed> {
        self.speeds.get(k).ok_or(Error::ComponentOutOfRange {
            index: k,
            n: self.speeds.len(),
        })
    }

    pub fn is_constant(&self) -> bool {
        self.speeds.iter().all(|s| match s {
            Speed::Constant(_) => true,
            Speed::PiecewiseLinear { v, .. } => v.iter().all(|&a| a == v[0]),
        })
    }

    /// Sorted union of all breakpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.speeds.iter().flat_map(|s| s.breakpoints()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// `max_k sup_x |λ_k(x)|`.
    pub fn max_abs(&self) -> f64 {
        self.speeds.iter().fold(0.0_f64, |a, s| a.max(s.sup_abs()))
    }

    /// `max_k sup_x 1/|λ_k(x)|`.
    pub fn max_slowness(&self) -> f64 {
        self.speeds.iter().fold(0.0_f64, |a, s| a.max(1.0 / s.inf_abs()))
    }
}

/// Evaluates `λ_k(x)` (0-based `k`).
pub fn eval_speed(profile: &SpeedProfile, k: usize, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::PositionOutOfRange(x));
    }
    Ok(profile.speed(k)?.value(x))
}

/// The interior coupling matrix `M(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceTerm {
    Constant(DMatrix<f64>),
    /// `values[i]` holds on `[breaks[i], breaks[i+1])`; `breaks` runs from 0 to 1.
    PiecewiseConstant {
        breaks: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl SourceTerm {
    pub fn zero(n: usize) -> Self {
        SourceTerm::Constant(DMatrix::zeros(n, n))
    }

    /// `M = -Λ'`, the choice that makes the adjoint system source free.
    pub fn neg_speed_derivative(speeds: &SpeedProfile) -> Self {
        let n = speeds.n();
        let breaks = speeds.breakpoints();
        let values = breaks
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        -speeds.speeds[i].derivative(mid)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        SourceTerm::PiecewiseConstant { breaks, values }
    }

    pub fn at(&self, x: f64) -> &DMatrix<f64> {
        match self {
            SourceTerm::Constant(m) => m,
            SourceTerm::PiecewiseConstant { breaks, values } => &values[segment_index(breaks, x)],
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            SourceTerm::Constant(m) => m.iter().all(|&a| a == 0.0),
            SourceTerm::PiecewiseConstant { values, .. } => {
                values.iter().all(|m| m.iter().all(|&a| a == 0.0))
            }
        }
    }

    fn check_shape(&self, n: usize) -> std::result::Result<(), String> {
        let check = |m: &DMatrix<f64>| {
            if m.nrows() != n || m.ncols() != n {
                Err(format!("M must be {n}x{n}, got {}x{}", m.nrows(), m.ncols()))
            } else if m.iter().any(|a| !a.is_finite()) {
                Err("M entries must be finite".to_string())
            } else {
                Ok(())
            }
        };
        match self {
            SourceTerm::Constant(m) => check(m),
            SourceTerm::PiecewiseConstant { breaks, values } => {
                if breaks.len() < 2 || values.len() + 1 != breaks.len() {
                    return Err("piecewise-constant M needs one matrix per break interval".into());
                }
                if breaks[0] != 0.0 || *breaks.last().unwrap() != 1.0 {
                    return Err("M breakpoints must start at 0 and end at 1".into());
                }
                if breaks.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err("M breakpoints must be strictly increasing".into());
                }
                values.iter().try_for_each(check)
            }
        }
    }
}

/// Boundary coupling matrices: `Q0` is `p×m`, `Q1` is `m×p`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSpec {
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
}

/// Where an interval sits inside `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionTag {
    TouchesLeft,
    TouchesRight,
    Interior,
    Full,
}

impl PositionTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PositionTag::TouchesLeft => "touches_left",
            PositionTag::TouchesRight => "touches_right",
            PositionTag::Interior => "interior",
            PositionTag::Full => "full",
        }
    }
}

/// An open interval `(lo, hi)` with `0 <= lo < hi <= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || !(lo < hi) {
            return Err(Error::InvalidSpec(format!(
                "interval ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn tag(&self) -> PositionTag {
        match (self.lo == 0.0, self.hi == 1.0) {
            (true, true) => PositionTag::Full,
            (true, false) => PositionTag::TouchesLeft,
            (false, true) => PositionTag::TouchesRight,
            (false, false) => PositionTag::Interior,
        }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo < self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    pub fn contains_closed(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// The control region `ω`, a finite union of disjoint open intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlDomain {
    intervals: Vec<Interval>,
}

impl ControlDomain {
    /// Builds `ω` from sorted, non-overlapping `(a, b)` pairs.
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidSpec("omega must be nonempty".into()));
        }
        let intervals = pairs
            .iter()
            .map(|&(a, b)| Interval::new(a, b))
            .collect::<Result<Vec<_>>>()?;
        if let Some(w) = intervals.windows(2).find(|w| w[0].hi > w[1].lo) {
            return Err(Error::InvalidSpec(format!(
                "omega intervals must be sorted and disjoint: ({}, {}) then ({}, {})",
                w[0].lo, w[0].hi, w[1].lo, w[1].hi
            )));
        }
        Ok(Self { intervals })
    }

    pub fn full() -> Self {
        Self {
            intervals: vec![Interval { lo: 0.0, hi: 1.0 }],
        }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(x))
    }

    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(Interval::len).sum()
    }

    /// Maximal closed intervals of `closure(ω)`: intervals whose closures
    /// touch are merged.
    pub fn closure_parts(&self) -> Vec<(f64, f64)> {
        let mut parts: Vec<(f64, f64)> = Vec::with_capacity(self.intervals.len());
        for i in &self.intervals {
            match parts.last_mut() {
                Some(last) if i.lo <= last.1 => last.1 = last.1.max(i.hi),
                _ => parts.push((i.lo, i.hi)),
            }
        }
        parts
    }

    pub fn closure_is_full(&self) -> bool {
        let parts = self.closure_parts();
        parts.len() == 1 && parts[0] == (0.0, 1.0)
    }

    /// Open pieces of `ω ∩ (lo, hi)`, in order.
    pub fn intersect(&self, lo: f64, hi: f64) -> Vec<Interval> {
        self.intervals
            .iter()
            .filter_map(|i| {
                let a = i.lo.max(lo);
                let b = i.hi.min(hi);
                (a < b).then_some(Interval { lo: a, hi: b })
            })
            .collect()
    }

    /// True when `[lo, hi]` lies inside a single interval of `ω`.
    pub fn contains_closed_interval(&self, lo: f64, hi: f64) -> bool {
        self.intervals.iter().any(|i| i.lo < lo && hi < i.hi)
    }
}

/// Connected components of `(0, 1) \ closure(ω)`, sorted; empty exactly when
/// `closure(ω) = [0, 1]`.
pub fn complement_components(omega: &ControlDomain) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut cursor = 0.0;
    for (a, b) in omega.closure_parts() {
        if a > cursor {
            out.push(Interval { lo: cursor, hi: a });
        }
        cursor = b;
    }
    if cursor < 1.0 {
        out.push(Interval { lo: cursor, hi: 1.0 });
    }
    out
}

/// The full problem datum.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    /// Number of negative speeds.
    pub m: usize,
    pub speeds: SpeedProfile,
    pub source: SourceTerm,
    pub couplings: CouplingSpec,
    pub omega: ControlDomain,
}

impl SystemSpec {
    pub fn n(&self) -> usize {
        self.speeds.n()
    }

    /// Number of positive speeds.
    pub fn p(&self) -> usize {
        self.n().saturating_sub(self.m)
    }

    pub fn with_omega(&self, omega: ControlDomain) -> Self {
        Self {
            omega,
            ..self.clone()
        }
    }

    /// Returns an error naming the first failed hypothesis.
    pub fn ensure_valid(&self) -> Result<()> {
        validate(self).into_result()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisCheck {
    pub name: &'static str,
    pub passed: bool,
    pub message: Option<String>,
}

/// Pass/fail status of each standing hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .filter_map(|c| c.message.as_deref())
            .collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(self.failures().join("; ")))
        }
    }
}

/// Checks the standing hypotheses on a [`SystemSpec`]. Never fails; the
/// report lists every violated hypothesis.
pub fn validate(spec: &SystemSpec) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, result: std::result::Result<(), String>| {
        checks.push(HypothesisCheck {
            name,
            passed: result.is_ok(),
            message: result.err(),
        })
    };

    let n = spec.n();
    let m = spec.m;
    let shape_ok = (|| {
        if n < 2 {
            return Err(format!("need n >= 2 states, got {n}"));
        }
        if m < 1 || m >= n {
            return Err(format!("need 1 <= m < n, got m = {m}, n = {n}"));
        }
        for s in spec.speeds.speeds() {
            s.check_shape()?;
        }
        Ok(())
    })();
    let speeds_usable = shape_ok.is_ok();
    push("shape", shape_ok);

    if speeds_usable {
        let p = n - m;
        let speeds = spec.speeds.speeds();
        push(
            "negative speeds",
            speeds[..m]
                .iter()
                .all(|s| s.values_at_breakpoints().iter().all(|&v| v < 0.0))
                .then_some(())
                .ok_or_else(|| "negative speeds must be < 0".to_string()),
        );
        push(
            "positive speeds",
            speeds[m..]
                .iter()
                .all(|s| s.values_at_breakpoints().iter().all(|&v| v > 0.0))
                .then_some(())
                .ok_or_else(|| "positive speeds must be > 0".to_string()),
        );

        let grid = spec.speeds.breakpoints();
        let table: Vec<Vec<f64>> = speeds
            .iter()
            .map(|s| grid.iter().map(|&x| s.value(x)).collect())
            .collect();
        let ordered = (0..n - 1).all(|k| {
            // No order is imposed between λ_m and λ_{m+1} beyond the sign checks.
            k + 1 == m || (0..grid.len()).all(|i| table[k][i] <= table[k + 1][i])
        });
        push(
            "ordering",
            ordered
                .then_some(())
                .ok_or_else(|| "speeds must satisfy λ_1 <= … <= λ_m < 0 < λ_{m+1} <= … <= λ_n".to_string()),
        );

        let mut equal_ok = Ok(());
        'pairs: for k in 0..n {
            for l in k + 1..n {
                let equal: Vec<bool> = (0..grid.len())
                    .map(|i| (table[k][i] - table[l][i]).abs() <= SPEED_EQ_TOL)
                    .collect();
                if equal.iter().any(|&e| e) && !equal.iter().all(|&e| e) {
                    equal_ok = Err(format!(
                        "equal somewhere implies equal everywhere (speeds {} and {})",
                        k + 1,
                        l + 1
                    ));
                    break 'pairs;
                }
            }
        }
        push("equal somewhere implies equal everywhere", equal_ok);

        let q = &spec.couplings;
        push(
            "coupling shapes",
            if q.q0.shape() != (p, m) {
                Err(format!("Q0 must be {p}x{m}, got {}x{}", q.q0.nrows(), q.q0.ncols()))
            } else if q.q1.shape() != (m, p) {
                Err(format!("Q1 must be {m}x{p}, got {}x{}", q.q1.nrows(), q.q1.ncols()))
            } else if q.q0.iter().chain(q.q1.iter()).any(|a| !a.is_finite()) {
                Err("coupling entries must be finite".to_string())
            } else {
                Ok(())
            },
        );
        push("source", spec.source.check_shape(n));
    }

    ValidationReport { checks }
}
