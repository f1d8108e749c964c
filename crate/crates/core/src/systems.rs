//! Small reference systems on the line, used by the CLI and the test suites.

use crate::mrf::{FnPotential, Potential, Subgradient};
use crate::system::{ControlSet, ControlSystem, SystemBounds, Target};

fn origin_line() -> Target {
    Target::Point { center: vec![0.0] }
}

/// `ẋ = u`, `U = [-1, 1]`, target `{0}`; running cost `1` or `0`.
pub fn unit_speed_line(with_cost: bool) -> ControlSystem {
    let cost = if with_cost { 1.0 } else { 0.0 };
    let pair = (1.0f64 + cost * cost).sqrt();
    ControlSystem::new(
        if with_cost { "unit_speed_line" } else { "unit_speed_line_free" },
        1,
        |_x, u| vec![u[0]],
        move |_x, _u| cost,
        ControlSet::Box { lo: vec![-1.0], hi: vec![1.0] },
        origin_line(),
        SystemBounds::new(move |_| pair, |_| 1.0),
    )
    .expect("static system")
}

/// `ẋ = -x` with the trivial control set `{0}`.
pub fn decay_line(cost: f64) -> ControlSystem {
    ControlSystem::new(
        "decay_line",
        1,
        |x, _u| vec![-x[0]],
        move |_x, _u| cost,
        ControlSet::Finite { points: vec![vec![0.0]] },
        origin_line(),
        SystemBounds::new(move |r| (r * r + cost * cost).sqrt(), |r| r),
    )
    .expect("static system")
}

/// `ẋ = u`, `U = R`, `l = u²`.
pub fn lq_line() -> ControlSystem {
    ControlSystem::new(
        "lq_line",
        1,
        |_x, u| vec![u[0]],
        |_x, u| u[0] * u[0],
        ControlSet::Unbounded { dim: 1 },
        origin_line(),
        SystemBounds::new(|_| f64::INFINITY, |_| f64::INFINITY),
    )
    .expect("static system")
}

/// `ẋ = u` with `U = [2, 3]`, which misses the unit ball entirely.
pub fn offset_box_line() -> ControlSystem {
    ControlSystem::new(
        "offset_box_line",
        1,
        |_x, u| vec![u[0]],
        |_x, _u| 1.0,
        ControlSet::Box { lo: vec![2.0], hi: vec![3.0] },
        origin_line(),
        SystemBounds::new(|_| 10f64.sqrt(), |_| 3.0),
    )
    .expect("static system")
}

/// `W(x) = scale·|x|` on the line, with both one-sided slopes declared at 0.
pub struct ScaledAbs {
    pub scale: f64,
}

impl Potential for ScaledAbs {
    fn name(&self) -> String {
        format!("{}|x|", self.scale)
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.scale * x[0].abs()
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        level.max(0.0) / self.scale
    }

    fn selection(&self, x: &[f64]) -> Vec<f64> {
        vec![if x[0] >= 0.0 { self.scale } else { -self.scale }]
    }

    fn declared_subgradient(&self, x: &[f64]) -> Option<Subgradient> {
        Some(if x[0] == 0.0 {
            Subgradient::Branches(vec![vec![self.scale], vec![-self.scale]])
        } else {
            Subgradient::Smooth(self.selection(x))
        })
    }
}

/// `W(x) = x²` on the line.
pub fn square_potential() -> FnPotential {
    FnPotential::new("x^2", 1, |x| x[0] * x[0], |level| level.max(0.0).sqrt()).with_gradient(|x| vec![2.0 * x[0]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_hold_on_samples() {
        for sys in [unit_speed_line(true), decay_line(1.0), offset_box_line()] {
            let chk = sys.spot_check(2.0, 4.0, 0.05, 64);
            assert!(chk.samples > 0);
            assert!(chk.max_excess <= 1e-12, "{}: {chk:?}", sys.name);
            assert!(chk.min_lagrangian >= 0.0);
        }
    }

    #[test]
    fn scaled_abs_branches_at_kink() {
        let w = ScaledAbs { scale: 2.0 };
        assert_eq!(w.value(&[-0.5]), 1.0);
        match w.declared_subgradient(&[0.0]).unwrap() {
            Subgradient::Branches(b) => assert_eq!(b.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
