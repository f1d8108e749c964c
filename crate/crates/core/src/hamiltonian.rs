//! Compactified Hamiltonian `min_{u ∈ U ∩ B(0,N)} ⟨p, f(x,u)⟩ + p0 l(x,u)`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::sampling::dot;
use crate::system::{ControlSet, ControlSystem};

/// Golden-section iterations per coordinate in the refinement pass.
const REFINE_ITERS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    pub control: Vec<f64>,
}

/// Default grid resolution for a compactification radius `n`.
pub fn default_resolution(n: f64) -> f64 {
    n / 64.0
}

fn objective(sys: &ControlSystem, x: &[f64], p0: f64, p: &[f64], u: &[f64]) -> f64 {
    let mut v = dot(p, &sys.velocity(x, u));
    if p0 != 0.0 {
        v += p0 * sys.running_cost(x, u);
    }
    v
}

type GridKey = (ControlSet, u64, u64);
type Grid = Rc<Vec<Vec<f64>>>;

thread_local! {
    // Feedback evaluation hits the same (U, N, h) over and over.
    static LAST_GRID: RefCell<Option<(GridKey, Grid)>> = const { RefCell::new(None) };
}

fn control_grid(set: &ControlSet, n: f64, h: f64) -> Grid {
    LAST_GRID.with(|cell| {
        let mut slot = cell.borrow_mut();
        if let Some((key, grid)) = slot.as_ref() {
            if key.1 == n.to_bits() && key.2 == h.to_bits() && key.0 == *set {
                return grid.clone();
            }
        }
        let grid = Rc::new(set.grid(n, h));
        *slot = Some(((set.clone(), n.to_bits(), h.to_bits()), grid.clone()));
        grid
    })
}

/// Minimum over the grid of `U ∩ B(0,n)` at resolution `h`, followed by a
/// single coordinate-descent pass. Ties keep the earliest grid point.
pub fn hamiltonian(sys: &ControlSystem, x: &[f64], p0: f64, p: &[f64], n: f64, h: f64) -> Result<HamiltonianValue> {
    if !(n > 0.0) || !(h > 0.0) {
        return Err(Error::invalid(format!("need N > 0 and h > 0, got N={n}, h={h}")));
    }
    let grid = control_grid(&sys.control_set, n, h);
    let mut best: Option<(f64, &Vec<f64>)> = None;
    for u in grid.iter() {
        let v = objective(sys, x, p0, p, u);
        match best {
            Some((bv, _)) if v >= bv => {}
            _ => best = Some((v, u)),
        }
    }
    let Some((mut value, u)) = best else {
        return Err(Error::InfeasibleCompactification { radius: n });
    };
    let mut control = u.clone();

    for i in 0..control.len() {
        let (lo, hi) = (control[i] - h, control[i] + h);
        let eval = |t: f64, base: &[f64]| -> Option<(f64, Vec<f64>)> {
            let mut c = base.to_vec();
            c[i] = t;
            let c = sys.control_set.retract(&c, n)?;
            Some((objective(sys, x, p0, p, &c), c))
        };
        let (mut a, mut b) = (lo, hi);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..REFINE_ITERS {
            let c1 = b - g * (b - a);
            let c2 = a + g * (b - a);
            let f1 = eval(c1, &control).map_or(f64::INFINITY, |r| r.0);
            let f2 = eval(c2, &control).map_or(f64::INFINITY, |r| r.0);
            if f1 <= f2 {
                b = c2;
            } else {
                a = c1;
            }
        }
        if let Some((v, c)) = eval(0.5 * (a + b), &control) {
            if v < value {
                value = v;
                control = c;
            }
        }
    }
    Ok(HamiltonianValue { value, control })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;

    #[test]
    fn zero_covector_zero_cost_gives_zero() {
        let sys = systems::unit_speed_line(false);
        let hv = hamiltonian(&sys, &[0.5], 1.0, &[0.0], 1.0, 1.0 / 64.0).unwrap();
        assert_eq!(hv.value, 0.0);
    }

    #[test]
    fn unit_speed_line_value() {
        // min over u in [-1,1] of 2u + 1.
        let sys = systems::unit_speed_line(true);
        let hv = hamiltonian(&sys, &[0.5], 1.0, &[2.0], 1.0, 1.0 / 64.0).unwrap();
        assert!((hv.value + 1.0).abs() < 1e-12);
        assert_eq!(hv.control, vec![-1.0]);
    }

    #[test]
    fn infeasible_compactification() {
        let sys = systems::offset_box_line();
        let err = hamiltonian(&sys, &[1.0], 0.0, &[1.0], 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleCompactification { .. }));
    }

    #[test]
    fn nonincreasing_in_radius() {
        let sys = systems::lq_line();
        let mut prev = f64::INFINITY;
        for n in [0.125, 0.25, 0.5, 1.0, 2.0, 4.0] {
            let v = hamiltonian(&sys, &[1.5], 1.0, &[3.0], n, n / 64.0).unwrap().value;
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }
}
