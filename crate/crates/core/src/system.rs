//! Control system description: dynamics, running cost, control set, target.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{self, norm};

pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type LagrangianFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type BoundFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const MEMBERSHIP_TOL: f64 = 1e-12;

/// The control set `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Ball {
        dim: usize,
        radius: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Finite {
        points: Vec<Vec<f64>>,
    },
    /// All of `R^dim`; only its intersections with balls are ever gridded.
    Unbounded {
        dim: usize,
    },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Ball { dim, .. } | ControlSet::Unbounded { dim } => *dim,
            ControlSet::Box { lo, .. } => lo.len(),
            ControlSet::Finite { points } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            ControlSet::Ball { radius, .. } => norm(u) <= radius * (1.0 + MEMBERSHIP_TOL),
            ControlSet::Box { lo, hi } => {
                u.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| *c >= l - MEMBERSHIP_TOL && *c <= h + MEMBERSHIP_TOL)
            }
            ControlSet::Finite { points } => points.iter().any(|p| sampling::dist(p, u) <= MEMBERSHIP_TOL),
            ControlSet::Unbounded { .. } => true,
        }
    }

    /// Radius of a ball around 0 containing the whole set, if bounded.
    pub fn radius_bound(&self) -> Option<f64> {
        match self {
            ControlSet::Ball { radius, .. } => Some(*radius),
            ControlSet::Box { lo, hi } => {
                Some(lo.iter().zip(hi).map(|(l, h)| l.abs().max(h.abs()).powi(2)).sum::<f64>().sqrt())
            }
            ControlSet::Finite { points } => Some(points.iter().map(|p| norm(p)).fold(0.0, f64::max)),
            ControlSet::Unbounded { .. } => None,
        }
    }

    /// Radial projection onto the closed ball `B(0, n)`.
    pub fn project_ball(&self, u: &[f64], n: f64) -> Vec<f64> {
        let r = norm(u);
        if r <= n {
            u.to_vec()
        } else {
            u.iter().map(|c| c * n / r).collect()
        }
    }

    /// Pull `u` back into `U ∩ B(0,n)` where a cheap retraction exists.
    pub(crate) fn retract(&self, u: &[f64], n: f64) -> Option<Vec<f64>> {
        let v = match self {
            ControlSet::Ball { radius, .. } => self.project_ball(u, radius.min(n)),
            ControlSet::Unbounded { .. } => self.project_ball(u, n),
            ControlSet::Box { lo, hi } => {
                let c: Vec<f64> = u.iter().zip(lo.iter().zip(hi)).map(|(c, (l, h))| c.clamp(*l, *h)).collect();
                self.project_ball(&c, n)
            }
            ControlSet::Finite { .. } => return None,
        };
        (self.contains(&v) && norm(&v) <= n * (1.0 + MEMBERSHIP_TOL)).then_some(v)
    }

    /// Deterministic grid of `U ∩ B(0, n)` at resolution `h`, in lexicographic
    /// lattice order followed by boundary points.
    pub fn grid(&self, n: f64, h: f64) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Ball { dim, radius } => ball_grid(*dim, radius.min(n), h),
            ControlSet::Unbounded { dim } => ball_grid(*dim, n, h),
            ControlSet::Box { lo, hi } => {
                let axes: Option<Vec<Vec<f64>>> = lo
                    .iter()
                    .zip(hi)
                    .map(|(l, u)| {
                        let a = l.max(-n);
                        let b = u.min(n);
                        (a <= b).then(|| axis_points(a, b, h))
                    })
                    .collect();
                let Some(axes) = axes else { return Vec::new() };
                cartesian(&axes).into_iter().filter(|u| norm(u) <= n * (1.0 + MEMBERSHIP_TOL)).collect()
            }
            ControlSet::Finite { points } => {
                points.iter().filter(|p| norm(p) <= n * (1.0 + MEMBERSHIP_TOL)).cloned().collect()
            }
        }
    }
}

fn axis_points(a: f64, b: f64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let steps = ((b - a) / h).floor() as usize;
    for k in 0..=steps {
        out.push(a + k as f64 * h);
    }
    if b - out[out.len() - 1] > 1e-12 * (1.0 + b.abs()) {
        out.push(b);
    }
    out
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(*c);
                    p
                })
            })
            .collect();
    }
    out
}

fn ball_grid(dim: usize, r: f64, h: f64) -> Vec<Vec<f64>> {
    if r <= 0.0 {
        return vec![vec![0.0; dim]];
    }
    let k = (r / h).floor() as i64;
    let axis: Vec<f64> = (-k..=k).map(|i| i as f64 * h).collect();
    let axes = vec![axis; dim];
    let mut pts: Vec<Vec<f64>> =
        cartesian(&axes).into_iter().filter(|u| norm(u) <= r * (1.0 + MEMBERSHIP_TOL)).collect();
    match dim {
        1 => {
            if (r - k as f64 * h).abs() > 1e-12 {
                pts.push(vec![-r]);
                pts.push(vec![r]);
            }
        }
        2 => {
            let ring = ((2.0 * std::f64::consts::PI * r / h).ceil() as usize).max(8);
            for j in 0..ring {
                let a = 2.0 * std::f64::consts::PI * j as f64 / ring as f64;
                pts.push(vec![r * a.cos(), r * a.sin()]);
            }
        }
        _ => {
            for i in 0..dim {
                for s in [-1.0, 1.0] {
                    let mut e = vec![0.0; dim];
                    e[i] = s * r;
                    pts.push(e);
                }
            }
        }
    }
    pts
}

/// The target set `C`. Only sets with closed-form distance are supported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Point { center: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Target {
    pub fn center(&self) -> &[f64] {
        match self {
            Target::Point { center } | Target::Ball { center, .. } => center,
        }
    }

    /// Euclidean distance from `x` to the target.
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Target::Point { center } => sampling::dist(x, center),
            Target::Ball { center, radius } => (sampling::dist(x, center) - radius).max(0.0),
        }
    }

    /// Whether `x` lies in the interior of the target.
    pub fn interior_contains(&self, x: &[f64]) -> bool {
        match self {
            Target::Point { .. } => false,
            Target::Ball { center, radius } => sampling::dist(x, center) < *radius,
        }
    }

    /// Points on the target boundary.
    pub fn boundary_points(&self, count: usize) -> Vec<Vec<f64>> {
        match self {
            Target::Point { center } => vec![center.clone()],
            Target::Ball { center, radius } => {
                sampling::shell_points(center, *radius, *radius, 2 * count).into_iter().step_by(2).collect()
            }
        }
    }

    /// Radius of the smallest ball around the center containing `B_r(C)`.
    pub fn enclosing_radius(&self, r: f64) -> f64 {
        match self {
            Target::Point { .. } => r,
            Target::Ball { radius, .. } => radius + r,
        }
    }
}

/// Growth bounds on the data.
#[derive(Clone)]
pub struct SystemBounds {
    /// `R ↦ M(R)`, a bound on `|(f, l)|` over `(B_R(C) \ C) × U`.
    pub pair: BoundFn,
    /// `R ↦ M̃(R)`, a bound on `|f|` alone.
    pub velocity: BoundFn,
}

impl SystemBounds {
    pub fn new(
        pair: impl Fn(f64) -> f64 + Send + Sync + 'static,
        velocity: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SystemBounds { pair: Arc::new(pair), velocity: Arc::new(velocity) }
    }

    pub fn pair_bound(&self, r: f64) -> f64 {
        (self.pair)(r)
    }

    pub fn velocity_bound(&self, r: f64) -> f64 {
        (self.velocity)(r)
    }
}

impl fmt::Debug for SystemBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemBounds")
            .field("M(1)", &self.pair_bound(1.0))
            .field("M~(1)", &self.velocity_bound(1.0))
            .finish()
    }
}

/// A control system `ẋ = f(x,u)`, `u ∈ U`, with running cost `l` and target `C`.
#[derive(Clone)]
pub struct ControlSystem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    dynamics: DynamicsFn,
    lagrangian: LagrangianFn,
    pub control_set: ControlSet,
    pub target: Target,
    pub bounds: SystemBounds,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("control_set", &self.control_set)
            .field("target", &self.target)
            .finish_non_exhaustive()
    }
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        dynamics: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        lagrangian: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        control_set: ControlSet,
        target: Target,
        bounds: SystemBounds,
    ) -> Result<Self> {
        if target.center().len() != state_dim {
            return Err(Error::invalid(format!(
                "target lives in R^{} but the state is in R^{state_dim}",
                target.center().len()
            )));
        }
        Ok(ControlSystem {
            name: name.into(),
            state_dim,
            control_dim: control_set.dim(),
            dynamics: Arc::new(dynamics),
            lagrangian: Arc::new(lagrangian),
            control_set,
            target,
            bounds,
        })
    }

    pub fn velocity(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.dynamics)(x, u)
    }

    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.lagrangian)(x, u)
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        self.target.distance(x)
    }

    /// Replace the running cost, keeping everything else.
    pub fn with_lagrangian(
        &self,
        lagrangian: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        bounds: SystemBounds,
    ) -> Self {
        ControlSystem { lagrangian: Arc::new(lagrangian), bounds, ..self.clone() }
    }

    /// Spot-check the data invariants on a sample of `B_R(C) \ C` against a
    /// control grid of resolution `h` inside `B(0, n)`: returns the largest
    /// excess of `|f|`, `l` over `M(R)` and the most negative `l` seen.
    pub fn spot_check(&self, big_r: f64, n: f64, h: f64, states: usize) -> BoundsCheck {
        let controls = self.control_set.grid(n, h);
        let radius = self.target.enclosing_radius(big_r);
        let mut out = BoundsCheck::default();
        for x in sampling::ball_points(self.target.center(), radius, states) {
            let d = self.distance(&x);
            if d <= 0.0 || d > big_r {
                continue;
            }
            for u in &controls {
                let f = norm(&self.velocity(&x, u));
                let l = self.running_cost(&x, u);
                let m = self.bounds.pair_bound(big_r);
                out.max_excess = out.max_excess.max(f - m).max(l - m);
                out.min_lagrangian = out.min_lagrangian.min(l);
                out.max_velocity = out.max_velocity.max(f);
                out.samples += 1;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundsCheck {
    pub samples: usize,
    pub max_excess: f64,
    pub min_lagrangian: f64,
    pub max_velocity: f64,
}

impl Default for BoundsCheck {
    fn default() -> Self {
        BoundsCheck { samples: 0, max_excess: f64::NEG_INFINITY, min_lagrangian: f64::INFINITY, max_velocity: 0.0 }
    }
}

/// Distance from `x` to the target of `sys`.
pub fn distance_to_target(sys: &ControlSystem, x: &[f64]) -> f64 {
    sys.distance(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_target_distance() {
        let t = Target::Point { center: vec![0.0; 3] };
        assert_eq!(t.distance(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(t.distance(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn ball_target_boundary_is_distance_zero() {
        let t = Target::Ball { center: vec![0.0; 3], radius: 1.0 };
        assert_eq!(t.distance(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(t.distance(&[0.0, 0.5, 0.0]), 0.0);
        assert!((t.distance(&[0.0, 0.0, 3.0]) - 2.0).abs() < 1e-15);
        for p in t.boundary_points(16) {
            assert!(t.distance(&p) < 1e-12);
        }
    }

    #[test]
    fn distance_is_one_lipschitz() {
        let t = Target::Ball { center: vec![0.2, -0.1], radius: 0.5 };
        let pts = sampling::cube_points(&[0.0, 0.0], 2.0, 300);
        for w in pts.windows(2) {
            let lhs = (t.distance(&w[0]) - t.distance(&w[1])).abs();
            assert!(lhs <= sampling::dist(&w[0], &w[1]) + 1e-12);
        }
    }

    #[test]
    fn grids_stay_in_set_and_ball() {
        let sets = [
            ControlSet::Ball { dim: 2, radius: 1.0 },
            ControlSet::Box { lo: vec![-1.0, -0.5], hi: vec![0.3, 2.0] },
            ControlSet::Unbounded { dim: 2 },
            ControlSet::Finite { points: vec![vec![0.0, 0.0], vec![3.0, 0.0]] },
        ];
        for set in &sets {
            for n in [0.5, 1.0, 4.0] {
                let g = set.grid(n, n / 16.0);
                assert!(!g.is_empty());
                for u in &g {
                    assert!(set.contains(u), "{set:?} {u:?}");
                    assert!(norm(u) <= n * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn box_grid_contains_endpoints() {
        let set = ControlSet::Box { lo: vec![-1.0], hi: vec![1.0] };
        let g = set.grid(1.0, 0.3);
        assert_eq!(g.first().unwrap(), &vec![-1.0]);
        assert_eq!(g.last().unwrap(), &vec![1.0]);
    }

    #[test]
    fn projection_lands_in_ball() {
        let set = ControlSet::Unbounded { dim: 3 };
        let p = set.project_ball(&[3.0, 4.0, 0.0], 2.0);
        assert!((norm(&p) - 2.0).abs() < 1e-12);
        assert_eq!(set.project_ball(&[0.1, 0.0, 0.0], 2.0), vec![0.1, 0.0, 0.0]);
    }

    #[test]
    fn empty_intersection_yields_empty_grid() {
        let set = ControlSet::Box { lo: vec![2.0], hi: vec![3.0] };
        assert!(set.grid(1.0, 0.1).is_empty());
    }
}
