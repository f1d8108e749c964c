//! The W-feedback: at each state, a minimizer of the compactified
//! Hamiltonian along the selected gradient.

use std::collections::HashMap;
use std::sync::RwLock;

use crate::certify::RadiusTable;
use crate::error::Result;
use crate::hamiltonian::hamiltonian;
use crate::mrf::{CandidateMrf, Potential};
use crate::sampling::dot;
use crate::system::ControlSystem;

/// States are snapped to cells of this size before evaluating the feedback.
pub const CACHE_CELL: f64 = 1.0 / (1u64 << 20) as f64;

/// Anything that maps a state to a control.
pub trait Controller: Send + Sync {
    fn control(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// A constant control, mostly for tests and open-loop comparisons.
#[derive(Clone, Debug)]
pub struct ConstantControl(pub Vec<f64>);

impl Controller for ConstantControl {
    fn control(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

pub struct Feedback {
    sys: ControlSystem,
    mrf: CandidateMrf,
    p0: f64,
    n_table: RadiusTable,
    h_factor: f64,
    cache: RwLock<HashMap<Vec<i64>, Vec<f64>>>,
}

impl std::fmt::Debug for Feedback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Feedback")
            .field("system", &self.sys.name)
            .field("mrf", &self.mrf.name())
            .field("p0", &self.p0)
            .field("n_table", &self.n_table)
            .finish_non_exhaustive()
    }
}

/// Builds `K(x) ∈ argmin_{u ∈ U ∩ B(0, N(W(x)))} ⟨p(x), f(x,u)⟩ + p0 l(x,u)`
/// with grid resolution `h_factor · N`.
pub fn synthesize_feedback(
    sys: &ControlSystem,
    mrf: &CandidateMrf,
    p0: f64,
    n_table: RadiusTable,
    h_factor: f64,
) -> Feedback {
    Feedback { sys: sys.clone(), mrf: mrf.clone(), p0, n_table, h_factor, cache: RwLock::new(HashMap::new()) }
}

impl Feedback {
    pub fn mrf(&self) -> &CandidateMrf {
        &self.mrf
    }

    pub fn potential(&self) -> &dyn Potential {
        self.mrf.potential.as_ref()
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn n_table(&self) -> &RadiusTable {
        &self.n_table
    }

    pub fn system(&self) -> &ControlSystem {
        &self.sys
    }

    /// The cell representative the feedback is actually evaluated at.
    pub fn quantize(x: &[f64]) -> (Vec<i64>, Vec<f64>) {
        let key: Vec<i64> = x.iter().map(|c| (c / CACHE_CELL).round() as i64).collect();
        let rep = key.iter().map(|k| *k as f64 * CACHE_CELL).collect();
        (key, rep)
    }

    /// Uncached evaluation at exactly `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_table.eval(self.mrf.value(x));
        let p = self.mrf.selection(x);
        Ok(hamiltonian(&self.sys, x, self.p0, &p, n, n * self.h_factor)?.control)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }
}

impl Controller for Feedback {
    fn control(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (key, rep) = Feedback::quantize(x);
        if let Some(u) = self.cache.read().ok().and_then(|c| c.get(&key).cloned()) {
            return Ok(u);
        }
        let u = self.evaluate(&rep)?;
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, u.clone());
        }
        Ok(u)
    }
}

/// `−(⟨p(x), f(x,K(x))⟩ + p0 l(x,K(x))) − γ(W(x))`; positive means the
/// feedback decreases `W` at rate `γ` at `x`. Without a rate, `γ ≡ 0`.
pub fn feedback_margin(sys: &ControlSystem, k: &Feedback, x: &[f64]) -> Result<f64> {
    let u = k.control(x)?;
    let p = k.mrf.selection(x);
    let h = dot(&p, &sys.velocity(x, &u)) + k.p0 * sys.running_cost(x, &u);
    let g = k.mrf.rate.as_ref().map_or(0.0, |r| r.eval(k.mrf.value(x)));
    Ok(-h - g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrf::{RateFunction, Regularity};
    use crate::nhi;
    use crate::systems::{self, ScaledAbs};

    fn line_feedback() -> (ControlSystem, Feedback) {
        let sys = systems::unit_speed_line(true);
        let mrf = CandidateMrf::new(ScaledAbs { scale: 2.0 }, Regularity::Lipschitz)
            .with_rate(RateFunction::analytic("w/(2(1+w))", |w| w / (2.0 * (1.0 + w))));
        let k = synthesize_feedback(&sys, &mrf, 1.0, RadiusTable::constant(1.0), 1.0 / 64.0);
        (sys, k)
    }

    #[test]
    fn line_feedback_is_minus_sign() {
        let (_, k) = line_feedback();
        for x in [0.5, 1.0, 3.25, 1e-3] {
            assert_eq!(k.control(&[x]).unwrap(), vec![-1.0]);
            assert_eq!(k.control(&[-x]).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn line_margin() {
        let (sys, k) = line_feedback();
        assert!((feedback_margin(&sys, &k, &[0.5]).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn nhi_w1_feedback_matches_closed_form() {
        let sys = nhi::system(nhi::NhiLagrangian::Constant { m_l: 1.0 });
        let mrf = CandidateMrf::new(nhi::W1, Regularity::Semiconcave);
        let k = synthesize_feedback(&sys, &mrf, 0.0, RadiusTable::constant(1.0), 1.0 / 64.0);
        let u = k.control(&[1.0, 0.0, 0.0]).unwrap();
        let s = 0.5f64.sqrt();
        assert!((u[0] + s).abs() < 1e-5 && (u[1] - s).abs() < 1e-5, "{u:?}");
        assert!(u[0].hypot(u[1]) <= 1.0 + 1e-12);
    }

    #[test]
    fn heavy_cost_pulls_control_inward() {
        // min over u of p·u + p0 u² is at u = −p/(2 p0).
        let sys = systems::lq_line();
        let mrf = CandidateMrf::new(systems::square_potential(), Regularity::Semiconcave);
        let k = synthesize_feedback(&sys, &mrf, 100.0, RadiusTable::constant(4.0), 1.0 / 64.0);
        let u = k.control(&[1.0]).unwrap()[0];
        assert!((u + 0.01).abs() < 1e-5, "{u}");
    }

    #[test]
    fn cached_and_fresh_agree() {
        let (_, k) = line_feedback();
        let x = [0.123456789];
        let first = k.control(&x).unwrap();
        let again = k.control(&[0.123456789 + 1e-8]).unwrap();
        assert_eq!(first, again);
        assert_eq!(k.cache_len(), 1);
    }
}
