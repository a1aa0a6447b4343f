//! Travel times and minimal control times.
//!
//! `T_k^I = ∫_I 1/|λ_k|` is integrated in closed form on each linear speed
//! segment. The boundary control times of a subinterval `I` depend on which
//! ends of `[0, 1]` it touches:
//!
//! * `I = (0, a)`: `τ₋ = max_j { T_{m+j} + T_{c_j}, T_m }`, finite iff `rank Q0 = p`,
//!   with `c_j` the canonical pivot columns of `Q0`;
//! * `I = (b, 1)`: `τ₊ = max_i { T_{m+1-i} + T_{n+1-c_i}, T_{m+1} }`, finite iff
//!   `rank Q1 = m`, with `c_i` taken from the reversed matrix `Q̌₀`;
//! * `I = (c, d)`: `τ₋₊ = max { T_m, T_{m+1} }`.
//!
//! The minimal control time of the internal problem is the largest of these
//! over the connected components of `(0,1) \ closure(ω)`, and 0 when the
//! closure of `ω` is `[0, 1]`.

use crate::canon::{canonical_form, reversed_for_q1};
use crate::model::{complement_components, ControlDomain, Interval, PositionTag, Speed, SystemSpec};
use crate::{Error, Result};

/// Either a finite time or `+∞`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlTime {
    Finite(f64),
    Infinite,
}

impl ControlTime {
    pub fn finite(&self) -> Option<f64> {
        match self {
            ControlTime::Finite(t) => Some(*t),
            ControlTime::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, ControlTime::Infinite)
    }
}

impl std::fmt::Display for ControlTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlTime::Finite(t) => write!(f, "{t}"),
            ControlTime::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseTag {
    TauMinus,
    TauPlus,
    TauTwoSided,
}

impl CaseTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseTag::TauMinus => "tau_minus",
            CaseTag::TauPlus => "tau_plus",
            CaseTag::TauTwoSided => "tau_two_sided",
        }
    }
}

/// One candidate inside a max formula: the sum of the travel times of the
/// listed components (1-based, as in the formulas).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeTerm {
    pub components: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTimeResult {
    pub value: ControlTime,
    pub case: CaseTag,
    pub terms: Vec<TimeTerm>,
    /// Positions in `terms` attaining the maximum (all ties).
    pub argmax: Vec<usize>,
}

impl BoundaryTimeResult {
    fn from_terms(case: CaseTag, terms: Vec<TimeTerm>) -> Self {
        let max = terms.iter().fold(f64::NEG_INFINITY, |a, t| a.max(t.value));
        let argmax = terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.value == max)
            .map(|(i, _)| i)
            .collect();
        Self {
            value: ControlTime::Finite(max),
            case,
            terms,
            argmax,
        }
    }

    fn infinite(case: CaseTag) -> Self {
        Self {
            value: ControlTime::Infinite,
            case,
            terms: Vec::new(),
            argmax: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimalTimeResult {
    pub value: ControlTime,
    pub per_component: Vec<(Interval, BoundaryTimeResult)>,
    pub covers_all: bool,
    /// Set when the value is infinite.
    pub reason: Option<String>,
}

/// `∫_lo^hi dx / |λ(x)|` on one speed of constant sign.
pub fn speed_travel_time(speed: &Speed, lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return 0.0;
    }
    speed
        .segments()
        .iter()
        .filter_map(|seg| {
            let a = seg.x0.max(lo);
            let b = seg.x1.min(hi);
            (a < b).then(|| segment_integral(seg.eval(a).abs(), seg.eval(b).abs(), b - a))
        })
        .sum()
}

/// `∫ dx/λ` over a piece of length `len` on which `λ > 0` is linear from `va` to `vb`.
fn segment_integral(va: f64, vb: f64, len: f64) -> f64 {
    // len · ln(vb/va) / (vb - va), written around the constant limit
    let r = (vb - va) / va;
    let factor = if r.abs() < 1e-8 {
        1.0 - r / 2.0 + r * r / 3.0
    } else {
        r.ln_1p() / r
    };
    len / va * factor
}

/// Inverse of `x ↦ ∫_0^x dξ/|λ(ξ)|`; times beyond the total travel time map to 1.
pub fn inverse_travel_time(speed: &Speed, time: f64) -> f64 {
    if time <= 0.0 {
        return 0.0;
    }
    let mut elapsed = 0.0;
    for seg in speed.segments() {
        let va = seg.v0.abs();
        let vb = seg.v1.abs();
        let span = segment_integral(va, vb, seg.x1 - seg.x0);
        if elapsed + span >= time {
            let tau = time - elapsed;
            // |λ| = va + b (x - x0), so x - x0 = va (exp(b τ) - 1) / b
            let b = (vb - va) / (seg.x1 - seg.x0);
            let z = b * tau;
            let dx = if z.abs() < 1e-12 {
                va * tau * (1.0 + z / 2.0)
            } else {
                va * z.exp_m1() / b
            };
            return (seg.x0 + dx).min(seg.x1);
        }
        elapsed += span;
    }
    1.0
}

/// `T_k^I` for a 0-based component `k`.
pub fn travel_time(spec: &SystemSpec, k: usize, interval: &Interval) -> Result<f64> {
    let speed = spec.speeds.speed(k)?;
    Ok(speed_travel_time(speed, interval.lo, interval.hi))
}

fn travel_times(spec: &SystemSpec, interval: &Interval) -> Vec<f64> {
    spec.speeds
        .speeds()
        .iter()
        .map(|s| speed_travel_time(s, interval.lo, interval.hi))
        .collect()
}

/// Time for a left-anchored interval `(0, a)` controlled at `x = a`.
pub fn tau_minus(spec: &SystemSpec, interval: &Interval) -> BoundaryTimeResult {
    let (m, p) = (spec.m, spec.p());
    let canon = canonical_form(&spec.couplings.q0);
    if canon.rank() < p {
        return BoundaryTimeResult::infinite(CaseTag::TauMinus);
    }
    let t = travel_times(spec, interval);
    // full row rank: pivot j sits in row j
    let mut terms: Vec<TimeTerm> = canon
        .pivot_columns()
        .iter()
        .enumerate()
        .map(|(j, &c)| TimeTerm {
            components: vec![m + j + 1, c + 1],
            value: t[m + j] + t[c],
        })
        .collect();
    terms.push(TimeTerm {
        components: vec![m],
        value: t[m - 1],
    });
    BoundaryTimeResult::from_terms(CaseTag::TauMinus, terms)
}

/// Time for a right-anchored interval `(b, 1)` controlled at `x = b`.
pub fn tau_plus(spec: &SystemSpec, interval: &Interval) -> BoundaryTimeResult {
    let (m, n) = (spec.m, spec.n());
    let canon = canonical_form(&reversed_for_q1(&spec.couplings.q1));
    if canon.rank() < m {
        return BoundaryTimeResult::infinite(CaseTag::TauPlus);
    }
    let t = travel_times(spec, interval);
    // 1-based: T_{m+1-i} + T_{n+1-c_i}
    let mut terms: Vec<TimeTerm> = canon
        .pivot_columns()
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let a = m - i;
            let b = n - c;
            TimeTerm {
                components: vec![a, b],
                value: t[a - 1] + t[b - 1],
            }
        })
        .collect();
    terms.push(TimeTerm {
        components: vec![m + 1],
        value: t[m],
    });
    BoundaryTimeResult::from_terms(CaseTag::TauPlus, terms)
}

/// Time for an interval controlled at both ends.
pub fn tau_two_sided(spec: &SystemSpec, interval: &Interval) -> BoundaryTimeResult {
    let m = spec.m;
    let t = travel_times(spec, interval);
    BoundaryTimeResult::from_terms(
        CaseTag::TauTwoSided,
        vec![
            TimeTerm {
                components: vec![m],
                value: t[m - 1],
            },
            TimeTerm {
                components: vec![m + 1],
                value: t[m],
            },
        ],
    )
}

/// Boundary control time of a complement component, dispatched on its position.
pub fn t_inf_bc(spec: &SystemSpec, interval: &Interval) -> Result<BoundaryTimeResult> {
    match interval.tag() {
        PositionTag::TouchesLeft => Ok(tau_minus(spec, interval)),
        PositionTag::TouchesRight => Ok(tau_plus(spec, interval)),
        PositionTag::Interior => Ok(tau_two_sided(spec, interval)),
        PositionTag::Full => Err(Error::Precondition(
            "the whole interval (0, 1) has no boundary control time".into(),
        )),
    }
}

/// True when `Q0` and `Q1` are square and invertible.
pub fn couplings_invertible(spec: &SystemSpec) -> bool {
    let (m, p) = (spec.m, spec.p());
    m == p
        && canonical_form(&spec.couplings.q0).rank() == p
        && canonical_form(&spec.couplings.q1).rank() == m
}

/// Minimal control time for control region `omega` (usually `spec.omega`).
pub fn minimal_control_time_for(spec: &SystemSpec, omega: &ControlDomain) -> Result<MinimalTimeResult> {
    if !couplings_invertible(spec) {
        return Ok(MinimalTimeResult {
            value: ControlTime::Infinite,
            per_component: Vec::new(),
            covers_all: omega.closure_is_full(),
            reason: Some("coupling matrices must be invertible".into()),
        });
    }
    let components = complement_components(omega);
    if components.is_empty() {
        return Ok(MinimalTimeResult {
            value: ControlTime::Finite(0.0),
            per_component: Vec::new(),
            covers_all: true,
            reason: None,
        });
    }
    let per_component = components
        .into_iter()
        .map(|i| t_inf_bc(spec, &i).map(|r| (i, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut value = 0.0_f64;
    for (_, r) in &per_component {
        // invertible couplings make every boundary time finite
        value = value.max(r.value.finite().unwrap_or(f64::INFINITY));
    }
    Ok(MinimalTimeResult {
        value: ControlTime::Finite(value),
        per_component,
        covers_all: false,
        reason: None,
    })
}

pub fn minimal_control_time(spec: &SystemSpec) -> Result<MinimalTimeResult> {
    minimal_control_time_for(spec, &spec.omega)
}

/// `C = 2 max_k sup_x 1/|λ_k(x)|`, so that every boundary time of `I` is at most `C |I|`.
pub fn linear_bound_constant(spec: &SystemSpec) -> f64 {
    2.0 * spec.speeds.max_slowness()
}

/// Maximal number of halvings in the δ search.
pub const MAX_HALVINGS: usize = 60;

/// Fraction of each candidate piece trimmed on both sides to keep it
/// compactly inside `ω`.
const SHRINK: f64 = 0.25;

/// A partition cell meeting `ω`, with the extreme points of `ω` inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub cell: usize,
    pub a_plus: f64,
    pub a_minus: f64,
    pub j_plus: Interval,
    pub j_minus: Interval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OmegaHatResult {
    pub omega_hat: ControlDomain,
    /// Largest boundary time over the complement components of `closure(ω̂)`.
    pub achieved_bound: f64,
    pub tau_max: f64,
    pub epsilon: f64,
    pub partition: Vec<f64>,
    pub clusters: Vec<Cluster>,
    pub delta: f64,
    pub halvings: usize,
}

fn bc_time(spec: &SystemSpec, lo: f64, hi: f64) -> Result<f64> {
    let r = t_inf_bc(spec, &Interval { lo, hi })?;
    Ok(r.value.finite().unwrap_or(f64::INFINITY))
}

/// Finds a finite union of intervals `ω̂`, compactly inside `ω`, whose
/// complement components all have boundary time at most `τ_max + ε`.
pub fn refine_omegahat(spec: &SystemSpec, epsilon: f64) -> Result<OmegaHatResult> {
    if !(epsilon > 0.0) {
        return Err(Error::Precondition("epsilon must be positive".into()));
    }
    let omega = &spec.omega;
    if omega.closure_is_full() {
        return Err(Error::Precondition("closure of omega is [0, 1]; no refinement needed".into()));
    }
    if !couplings_invertible(spec) {
        return Err(Error::NotInvertible);
    }
    let tau_max = minimal_control_time(spec)?.value.finite().ok_or(Error::NotInvertible)?;
    let tau_half = tau_max + epsilon / 2.0;
    let target = tau_half + epsilon / 2.0;

    // (1) uniform partition with cells of boundary time <= tau_half
    let c = linear_bound_constant(spec);
    let cells = (c / tau_half).ceil().max(1.0) as usize;
    let partition: Vec<f64> = (0..=cells).map(|k| k as f64 / cells as f64).collect();

    // (2) cells meeting omega and the extreme points of omega inside them
    let mut extremes = Vec::new();
    for k in 0..cells {
        let pieces = omega.intersect(partition[k], partition[k + 1]);
        if let (Some(first), Some(last)) = (pieces.first(), pieces.last()) {
            extremes.push((k, first.lo, last.hi));
        }
    }
    if extremes.is_empty() {
        return Err(Error::Precondition("omega is empty".into()));
    }

    // (3) largest delta of the form delta0 / 2^h satisfying the enlarged estimates
    let first = extremes[0];
    let last = *extremes.last().unwrap();
    let estimates_hold = |delta: f64| -> Result<bool> {
        if first.1 > 0.0 && bc_time(spec, 0.0, first.1 + delta)? > target {
            return Ok(false);
        }
        if last.2 < 1.0 && bc_time(spec, last.2 - delta, 1.0)? > target {
            return Ok(false);
        }
        for w in extremes.windows(2) {
            let (gap_lo, gap_hi) = (w[0].2, w[1].1);
            if gap_lo < gap_hi && bc_time(spec, gap_lo - delta, gap_hi + delta)? > target {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let mut delta = extremes
        .iter()
        .map(|&(_, a, b)| (b - a) / 2.0)
        .fold(f64::INFINITY, f64::min);
    let mut halvings = 0;
    while !estimates_hold(delta)? {
        if halvings == MAX_HALVINGS {
            return Err(Error::SearchExhausted { halvings });
        }
        delta /= 2.0;
        halvings += 1;
    }

    // (4) pieces of omega hugging each extreme point
    let shrink = |i: Interval| {
        let w = i.len();
        Interval {
            lo: i.lo + SHRINK * w,
            hi: i.hi - SHRINK * w,
        }
    };
    let mut clusters = Vec::with_capacity(extremes.len());
    for &(cell, a_plus, a_minus) in &extremes {
        let right = omega.intersect(a_plus, a_plus + delta);
        let left = omega.intersect(a_minus - delta, a_minus);
        let (Some(&jp), Some(&jm)) = (right.first(), left.last()) else {
            return Err(Error::Precondition("omega has no mass near a cluster endpoint".into()));
        };
        clusters.push(Cluster {
            cell,
            a_plus,
            a_minus,
            j_plus: shrink(jp),
            j_minus: shrink(jm),
        });
    }

    // (5) assemble and verify directly
    let mut pieces: Vec<(f64, f64)> = clusters
        .iter()
        .flat_map(|c| [(c.j_plus.lo, c.j_plus.hi), (c.j_minus.lo, c.j_minus.hi)])
        .collect();
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
    pieces.dedup();
    let omega_hat = ControlDomain::new(&pieces)?;
    if !omega_hat
        .intervals()
        .iter()
        .all(|j| omega.contains_closed_interval(j.lo, j.hi))
    {
        return Err(Error::Precondition("refined set is not compactly inside omega".into()));
    }
    let achieved_bound = minimal_control_time_for(spec, &omega_hat)?
        .value
        .finite()
        .ok_or(Error::NotInvertible)?;
    if achieved_bound > tau_max + epsilon {
        return Err(Error::Precondition(format!(
            "refined set reaches {achieved_bound}, above {tau_max} + {epsilon}"
        )));
    }

    Ok(OmegaHatResult {
        omega_hat,
        achieved_bound,
        tau_max,
        epsilon,
        partition,
        clusters,
        delta,
        halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, SourceTerm, SpeedProfile};
    use nalgebra::DMatrix;

    fn spec(speeds: &[f64], q0: DMatrix<f64>, q1: DMatrix<f64>, omega: &[(f64, f64)]) -> SystemSpec {
        let n = speeds.len();
        SystemSpec {
            m: speeds.iter().filter(|&&v| v < 0.0).count(),
            speeds: SpeedProfile::constant(speeds),
            source: SourceTerm::zero(n),
            couplings: CouplingSpec { q0, q1 },
            omega: ControlDomain::new(omega).unwrap(),
        }
    }

    fn example_one() -> SystemSpec {
        spec(&[-1.0, 1.0], DMatrix::identity(1, 1), DMatrix::identity(1, 1), &[(0.25, 0.75)])
    }

    fn four_state() -> SystemSpec {
        spec(
            &[-2.0, -1.0, 1.0, 3.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            &[(0.3, 0.8)],
        )
    }

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn constant_travel_time() {
        let s = spec(&[-1.0, 2.0], DMatrix::identity(1, 1), DMatrix::identity(1, 1), &[(0.1, 0.2)]);
        assert!((travel_time(&s, 1, &iv(0.2, 0.5)).unwrap() - 0.15).abs() < 1e-15);
        assert!(travel_time(&s, 2, &iv(0.2, 0.5)).is_err());
    }

    #[test]
    fn linear_travel_time_is_log() {
        let speed = Speed::piecewise_linear(vec![0.0, 1.0], vec![1.0, 2.0]);
        assert!((speed_travel_time(&speed, 0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(speed_travel_time(&speed, 0.3, 0.3), 0.0);
    }

    #[test]
    fn inverse_travel_time_roundtrip() {
        let speed = Speed::piecewise_linear(vec![0.0, 0.4, 1.0], vec![1.0, 3.0, 0.5]);
        for &x in &[0.0, 0.1, 0.4, 0.55, 0.99, 1.0] {
            let t = speed_travel_time(&speed, 0.0, x);
            assert!((inverse_travel_time(&speed, t) - x).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn tau_minus_examples() {
        let r = tau_minus(&example_one(), &iv(0.0, 0.25));
        assert_eq!(r.value, ControlTime::Finite(0.5));
        assert_eq!(r.case, CaseTag::TauMinus);

        let r = tau_minus(&four_state(), &iv(0.0, 0.3));
        assert!((r.value.finite().unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(r.argmax, vec![0]);

        let mut s = example_one();
        s.couplings.q0 = DMatrix::zeros(1, 1);
        assert!(tau_minus(&s, &iv(0.0, 0.25)).value.is_infinite());
    }

    #[test]
    fn tau_plus_examples() {
        let r = tau_plus(&example_one(), &iv(0.75, 1.0));
        assert_eq!(r.value, ControlTime::Finite(0.5));

        let r = tau_plus(&four_state(), &iv(0.8, 1.0));
        assert!((r.value.finite().unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(r.terms[0].components, vec![2, 4]);
        assert_eq!(r.terms[1].components, vec![1, 3]);

        let mut s = four_state();
        s.couplings.q1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(tau_plus(&s, &iv(0.8, 1.0)).value.is_infinite());
    }

    #[test]
    fn tau_two_sided_examples() {
        let r = tau_two_sided(&example_one(), &iv(0.2, 0.4));
        assert!((r.value.finite().unwrap() - 0.2).abs() < 1e-15);
        let r = tau_two_sided(&four_state(), &iv(0.2, 0.4));
        assert!((r.value.finite().unwrap() - 0.2).abs() < 1e-15);
        // both terms tie
        assert_eq!(r.argmax.len(), 2);
        let r = tau_two_sided(&four_state(), &iv(0.2, 0.2 + 1e-12));
        assert!(r.value.finite().unwrap() < 1e-11);
    }

    #[test]
    fn dispatch() {
        let s = example_one();
        assert_eq!(t_inf_bc(&s, &iv(0.0, 0.25)).unwrap().case, CaseTag::TauMinus);
        assert_eq!(t_inf_bc(&s, &iv(0.2, 0.4)).unwrap().case, CaseTag::TauTwoSided);
        assert_eq!(t_inf_bc(&s, &iv(0.75, 1.0)).unwrap().case, CaseTag::TauPlus);
        assert!(t_inf_bc(&s, &iv(0.0, 1.0)).is_err());
    }

    #[test]
    fn minimal_time_examples() {
        let r = minimal_control_time(&example_one()).unwrap();
        assert_eq!(r.value, ControlTime::Finite(0.5));
        assert_eq!(r.per_component.len(), 2);

        let s = example_one().with_omega(ControlDomain::new(&[(0.0, 0.5), (0.5, 1.0)]).unwrap());
        let r = minimal_control_time(&s).unwrap();
        assert_eq!(r.value, ControlTime::Finite(0.0));
        assert!(r.covers_all);

        let r = minimal_control_time(&four_state()).unwrap();
        assert!((r.value.finite().unwrap() - 0.45).abs() < 1e-15);
    }

    #[test]
    fn singular_couplings_are_infinite() {
        let mut s = example_one();
        s.couplings.q1 = DMatrix::zeros(1, 1);
        let r = minimal_control_time(&s).unwrap();
        assert!(r.value.is_infinite());
        assert_eq!(r.reason.as_deref(), Some("coupling matrices must be invertible"));

        let s = spec(
            &[-1.0, 1.0, 2.0],
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            &[(0.25, 0.75)],
        );
        assert!(minimal_control_time(&s).unwrap().value.is_infinite());
    }

    #[test]
    fn omegahat_single_interval() {
        let r = refine_omegahat(&example_one(), 0.1).unwrap();
        assert!(r.achieved_bound <= 0.6);
        assert!(r.omega_hat.intervals().len() >= 2);
        let first = r.omega_hat.intervals()[0];
        let last = *r.omega_hat.intervals().last().unwrap();
        assert!(first.lo > 0.25 && first.hi < 0.3);
        assert!(last.hi < 0.75 && last.lo > 0.7);
    }

    #[test]
    fn omegahat_rejects_full_domain() {
        let s = example_one().with_omega(ControlDomain::full());
        assert!(matches!(refine_omegahat(&s, 0.1), Err(Error::Precondition(_))));
        assert!(refine_omegahat(&example_one(), 0.0).is_err());
    }

    #[test]
    fn omegahat_two_components() {
        let s = example_one().with_omega(ControlDomain::new(&[(0.1, 0.3), (0.6, 0.7)]).unwrap());
        let r = refine_omegahat(&s, 0.05).unwrap();
        assert!(r.omega_hat.intervals().len() >= 2);
        assert!(r.achieved_bound <= r.tau_max + 0.05);
    }
}
