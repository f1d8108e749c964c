//! Brockett's nonholonomic integrator `ẋ = (u₁, u₂, x₁u₂ − x₂u₁)` on the unit
//! disk, with target the origin, and its two restraint functions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{Potential, Subgradient};
use crate::sampling;
use crate::system::{ControlSet, ControlSystem, SystemBounds, Target};

/// Constant `c` in `min_u ⟨∇W1, f⟩ = −c·√V` off the nonsmooth set, as found
/// by direct computation and the disk-grid oracle.
pub const W1_INNER_CONSTANT: f64 = 2.0;

const AXIS_TOL: f64 = 1e-12;
const SWITCH_TOL: f64 = 1e-9;
const AXIS_BRANCHES: usize = 16;

pub fn rho(x: &[f64]) -> f64 {
    x[0].hypot(x[1])
}

pub fn dynamics(x: &[f64], u: &[f64]) -> Vec<f64> {
    vec![u[0], u[1], x[0] * u[1] - x[1] * u[0]]
}

pub fn w1(x: &[f64]) -> f64 {
    let r = rho(x);
    let a = r - x[2].abs();
    a * a + x[2] * x[2]
}

pub fn v(x: &[f64]) -> f64 {
    let r = rho(x);
    let a = r - x[2].abs();
    let b = (r - 2.0 * x[2].abs()) * r;
    a * a + b * b
}

pub fn w2(x: &[f64]) -> f64 {
    let r = rho(x);
    r.max(x[2].abs() - r)
}

/// `min_{|u| ≤ 1} ⟨p, f(x,u)⟩` in closed form, with its minimizer.
pub fn min_inner(x: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let a = p[0] - p[2] * x[1];
    let b = p[1] + p[2] * x[0];
    let n = a.hypot(b);
    if n == 0.0 {
        (0.0, vec![0.0, 0.0])
    } else {
        (-n, vec![-a / n, -b / n])
    }
}

/// Running cost variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NhiLagrangian {
    /// `l ≡ m_l`.
    Constant { m_l: f64 },
    /// `l(x,u) = c·√V(x)`.
    SqrtVScaled { c: f64 },
    /// `l(x,u) = m_l·|u|²`, bounded by `m_l` on the disk.
    Bounded { m_l: f64 },
}

impl NhiLagrangian {
    fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match *self {
            NhiLagrangian::Constant { m_l } => m_l,
            NhiLagrangian::SqrtVScaled { c } => c * v(x).sqrt(),
            NhiLagrangian::Bounded { m_l } => m_l * (u[0] * u[0] + u[1] * u[1]),
        }
    }

    fn bound(&self, big_r: f64) -> f64 {
        match *self {
            NhiLagrangian::Constant { m_l } | NhiLagrangian::Bounded { m_l } => m_l,
            NhiLagrangian::SqrtVScaled { c } => c * (4.0 * big_r * big_r + 9.0 * big_r.powi(4)).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NhiConfig {
    pub lagrangian: NhiLagrangian,
    pub p0: f64,
}

impl NhiConfig {
    /// Checks the admissible window for `p0`. For `c·√V` the window is
    /// `p0 < W1_INNER_CONSTANT / c`, i.e. measured against the true inner
    /// minimum of `W1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 >= 0.0) {
            return Err(Error::invalid(format!("p0 must be nonnegative, got {}", self.p0)));
        }
        let limit = match self.lagrangian {
            NhiLagrangian::Constant { m_l } | NhiLagrangian::Bounded { m_l } => {
                if !(m_l > 0.0) {
                    return Err(Error::invalid("m_l must be positive"));
                }
                1.0 / m_l
            }
            NhiLagrangian::SqrtVScaled { c } => {
                if !(c > 0.0) {
                    return Err(Error::invalid("c must be positive"));
                }
                W1_INNER_CONSTANT / c
            }
        };
        if self.p0 >= limit {
            return Err(Error::OutOfRange { value: self.p0, lo: 0.0, hi: limit });
        }
        Ok(())
    }
}

pub const SYSTEM_NAME: &str = "nhi";

pub fn system(lagrangian: NhiLagrangian) -> ControlSystem {
    let lag = lagrangian;
    ControlSystem::new(
        SYSTEM_NAME,
        3,
        dynamics,
        move |x, u| lag.eval(x, u),
        ControlSet::Ball { dim: 2, radius: 1.0 },
        Target::Point { center: vec![0.0; 3] },
        SystemBounds::new(
            move |r| {
                let l = lagrangian.bound(r);
                (1.0 + r * r + l * l).sqrt()
            },
            |r| (1.0 + r * r).sqrt(),
        ),
    )
    .expect("static system")
}

/// Probe points in the half-plane `{x₂ = 0, x₁ ≥ 0}`, which meets every orbit
/// of the rotations about the `x₃` axis (both functions are invariant).
fn half_plane_points(lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    let count = count.max(2);
    (0..count)
        .map(|i| {
            let psi = PI * i as f64 / (count - 1) as f64;
            let r = if i % 2 == 0 { lo } else { lo + (hi - lo) * sampling::radical_inverse(i as u64 + 1, 3) };
            vec![r * psi.sin(), 0.0, r * psi.cos()]
        })
        .collect()
}

fn sign(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `W1(x) = (ρ − |x₃|)² + x₃²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct W1;

impl W1 {
    fn branch(x: &[f64], s: f64, e: (f64, f64)) -> Vec<f64> {
        let r = rho(x);
        let a = r - x[2].abs();
        vec![2.0 * a * e.0, 2.0 * a * e.1, -2.0 * s * a + 2.0 * x[2]]
    }
}

impl Potential for W1 {
    fn name(&self) -> String {
        "w1".into()
    }

    fn dim(&self) -> usize {
        3
    }

    fn value(&self, x: &[f64]) -> f64 {
        w1(x)
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        (5.0 * level.max(0.0)).sqrt()
    }

    fn selection(&self, x: &[f64]) -> Vec<f64> {
        let r = rho(x);
        let e = if r > 0.0 { (x[0] / r, x[1] / r) } else { (1.0, 0.0) };
        W1::branch(x, sign(x[2]), e)
    }

    fn declared_subgradient(&self, x: &[f64]) -> Option<Subgradient> {
        let r = rho(x);
        let scale = sampling::norm(x).max(1.0);
        if r <= AXIS_TOL * scale {
            // Every horizontal unit direction is a limit of gradients.
            let s = sign(x[2]);
            return Some(Subgradient::Branches(
                (0..AXIS_BRANCHES)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / AXIS_BRANCHES as f64;
                        W1::branch(x, s, (t.cos(), t.sin()))
                    })
                    .collect(),
            ));
        }
        let e = (x[0] / r, x[1] / r);
        if x[2].abs() <= AXIS_TOL * scale {
            let mut y = x.to_vec();
            y[2] = 0.0;
            return Some(Subgradient::Branches(vec![W1::branch(&y, 1.0, e), W1::branch(&y, -1.0, e)]));
        }
        Some(Subgradient::Smooth(W1::branch(x, sign(x[2]), e)))
    }

    fn representatives(&self, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
        half_plane_points(lo, hi, count)
    }
}

/// `W2(x) = max{ρ, |x₃| − ρ}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct W2;

impl W2 {
    fn radial(x: &[f64]) -> Vec<f64> {
        let r = rho(x);
        vec![x[0] / r, x[1] / r, 0.0]
    }

    fn vertical(x: &[f64]) -> Vec<f64> {
        let r = rho(x);
        let (e0, e1) = if r > 0.0 { (x[0] / r, x[1] / r) } else { (1.0, 0.0) };
        vec![-e0, -e1, sign(x[2])]
    }

    /// Whether `x` lies on `S = {x₃² = 4ρ²}` (off the axis).
    pub fn on_switching_set(x: &[f64]) -> bool {
        let r = rho(x);
        (r - (x[2].abs() - r)).abs() <= SWITCH_TOL * sampling::norm(x).max(1.0)
    }
}

impl Potential for W2 {
    fn name(&self) -> String {
        "w2".into()
    }

    fn dim(&self) -> usize {
        3
    }

    fn value(&self, x: &[f64]) -> f64 {
        w2(x)
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        5f64.sqrt() * level.max(0.0)
    }

    fn selection(&self, x: &[f64]) -> Vec<f64> {
        let r = rho(x);
        if r > 0.0 && r >= x[2].abs() - r {
            W2::radial(x)
        } else {
            W2::vertical(x)
        }
    }

    fn declared_subgradient(&self, x: &[f64]) -> Option<Subgradient> {
        let r = rho(x);
        if r <= AXIS_TOL * sampling::norm(x).max(1.0) {
            return Some(Subgradient::Empty);
        }
        if W2::on_switching_set(x) {
            return Some(Subgradient::Branches(vec![W2::radial(x), W2::vertical(x)]));
        }
        Some(Subgradient::Smooth(self.selection(x)))
    }

    fn representatives(&self, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
        half_plane_points(lo, hi, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_examples() {
        assert_eq!(dynamics(&[1.0, 0.0, 0.0], &[0.0, 1.0]), vec![0.0, 1.0, 1.0]);
        assert_eq!(dynamics(&[0.3, -2.0, 1.0], &[0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(dynamics(&[0.0, 1.0, 0.0], &[1.0, 0.0]), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn potential_values() {
        assert_eq!(w1(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(v(&[1.0, 0.0, 0.0]), 2.0);
        assert_eq!(w1(&[0.0, 0.0, 1.0]), 2.0);
        assert_eq!(w1(&[0.0; 3]), 0.0);
        assert_eq!(v(&[0.0; 3]), 0.0);
        assert_eq!(w2(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(w2(&[0.0, 0.0, 2.0]), 2.0);
        assert_eq!(w2(&[1.0, 0.0, 2.0]), 1.0);
        assert!(W2::on_switching_set(&[1.0, 0.0, 2.0]));
    }

    #[test]
    fn inner_min_examples() {
        let (val, u) = min_inner(&[1.0, 0.0, 0.0], &[2.0, 0.0, -2.0]);
        assert!((val + 8f64.sqrt()).abs() < 1e-14);
        let s = 0.5f64.sqrt();
        assert!((u[0] + s).abs() < 1e-14 && (u[1] - s).abs() < 1e-14);
        assert_eq!(min_inner(&[1.0, 2.0, 3.0], &[0.0; 3]), (0.0, vec![0.0, 0.0]));
        let (val, u) = min_inner(&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]);
        assert_eq!(val, -1.0);
        assert_eq!(u, vec![-1.0, 0.0]);
    }

    #[test]
    fn w2_axis_has_empty_proximal_set() {
        assert_eq!(W2.declared_subgradient(&[0.0, 0.0, 1.0]), Some(Subgradient::Empty));
        match W2.declared_subgradient(&[1.0, 0.0, -2.0]).unwrap() {
            Subgradient::Branches(b) => assert_eq!(b.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn w1_branches_at_equator_and_axis() {
        match W1.declared_subgradient(&[1.0, 0.0, 0.0]).unwrap() {
            Subgradient::Branches(b) => {
                assert_eq!(b, vec![vec![2.0, 0.0, -2.0], vec![2.0, 0.0, 2.0]]);
            }
            other => panic!("{other:?}"),
        }
        match W1.declared_subgradient(&[0.0, 0.0, 0.5]).unwrap() {
            Subgradient::Branches(b) => {
                assert_eq!(b.len(), AXIS_BRANCHES);
                for p in &b {
                    let (val, _) = min_inner(&[0.0, 0.0, 0.5], p);
                    assert!((val + W1_INNER_CONSTANT * v(&[0.0, 0.0, 0.5]).sqrt()).abs() < 1e-12);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_windows() {
        let ok = NhiConfig { lagrangian: NhiLagrangian::Constant { m_l: 1.0 }, p0: 0.5 };
        assert!(ok.validate().is_ok());
        let bad = NhiConfig { lagrangian: NhiLagrangian::Constant { m_l: 1.0 }, p0: 1.0 };
        assert!(bad.validate().is_err());
        let sv = NhiConfig { lagrangian: NhiLagrangian::SqrtVScaled { c: 2.0 }, p0: 0.49 };
        assert!(sv.validate().is_ok());
    }
}
