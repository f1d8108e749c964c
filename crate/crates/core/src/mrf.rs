//! Candidate minimum restraint functions, their gradient candidates, and rate
//! functions `γ`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{self, norm};

/// Relative tolerance for comparing selections with finite differences.
pub const GRADIENT_REL_TOL: f64 = 1e-4;
const FD_OFFSETS: usize = 8;

/// What is known about the (limiting / proximal) subdifferential at a point.
#[derive(Clone, Debug, PartialEq)]
pub enum Subgradient {
    Smooth(Vec<f64>),
    /// Finitely many limiting-gradient candidates; the decrease condition
    /// must hold for every one.
    Branches(Vec<Vec<f64>>),
    /// Empty proximal subdifferential: the decrease condition is vacuous.
    Empty,
}

impl Subgradient {
    pub fn candidates(&self) -> Vec<Vec<f64>> {
        match self {
            Subgradient::Smooth(g) => vec![g.clone()],
            Subgradient::Branches(gs) => gs.clone(),
            Subgradient::Empty => Vec::new(),
        }
    }
}

/// A scalar function on the state space that can serve as `W` (or as a
/// comparison function such as the target distance).
pub trait Potential: Send + Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Centre of the sublevel sets (the target centre).
    fn center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Radius `R` with `{W <= level} ⊆ B(center, R)`.
    fn sublevel_radius(&self, level: f64) -> f64;

    /// A selection `p(x)` from the limiting gradients.
    fn selection(&self, x: &[f64]) -> Vec<f64> {
        central_difference(&|y| self.value(y), x)
    }

    /// Analytically declared subdifferential, if the implementation knows it.
    fn declared_subgradient(&self, _x: &[f64]) -> Option<Subgradient> {
        None
    }

    /// Extra probe points in the shell `lo <= |x - center| <= hi` that cover
    /// the function's symmetry classes.
    fn representatives(&self, _lo: f64, _hi: f64, _count: usize) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

/// Central-difference gradient with a step scaled to `|x|`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6 * norm(x).max(1.0);
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Gradient candidates at `x`: declared ones if available, otherwise
/// finite-difference probes at eight nearby offsets. When the offset
/// gradients disagree by more than ten times the tolerance, each of them is
/// returned as a separate candidate.
pub fn subgradient_at(w: &dyn Potential, x: &[f64]) -> Subgradient {
    if let Some(s) = w.declared_subgradient(x) {
        return s;
    }
    finite_difference_subgradient(&|y| w.value(y), x)
}

pub fn finite_difference_subgradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Subgradient {
    let g0 = central_difference(f, x);
    let scale = norm(x).max(1.0);
    let offset = 1e-4 * scale;
    let probes: Vec<Vec<f64>> = (0..FD_OFFSETS)
        .map(|k| {
            let d = sampling::direction(k, x.len());
            let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + offset * b).collect();
            central_difference(f, &y)
        })
        .collect();
    let denom = norm(&g0).max(1.0);
    let dispersion = probes.iter().map(|g| sampling::dist(g, &g0) / denom).fold(0.0, f64::max);
    if dispersion > 10.0 * GRADIENT_REL_TOL {
        Subgradient::Branches(probes)
    } else {
        Subgradient::Smooth(g0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Semiconcave,
    Lipschitz,
}

/// `W` together with its declared regularity and optional rate `γ`.
#[derive(Clone)]
pub struct CandidateMrf {
    pub potential: Arc<dyn Potential>,
    pub regularity: Regularity,
    pub rate: Option<RateFunction>,
}

impl fmt::Debug for CandidateMrf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CandidateMrf")
            .field("name", &self.potential.name())
            .field("regularity", &self.regularity)
            .field("rate", &self.rate)
            .finish()
    }
}

impl CandidateMrf {
    pub fn new(potential: impl Potential + 'static, regularity: Regularity) -> Self {
        CandidateMrf { potential: Arc::new(potential), regularity, rate: None }
    }

    pub fn from_arc(potential: Arc<dyn Potential>, regularity: Regularity) -> Self {
        CandidateMrf { potential, regularity, rate: None }
    }

    pub fn with_rate(mut self, rate: RateFunction) -> Self {
        self.rate = Some(rate);
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.potential.value(x)
    }

    pub fn selection(&self, x: &[f64]) -> Vec<f64> {
        self.potential.selection(x)
    }

    pub fn subgradient(&self, x: &[f64]) -> Subgradient {
        subgradient_at(self.potential.as_ref(), x)
    }

    pub fn name(&self) -> String {
        self.potential.name()
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A potential assembled from closures; handy for ad hoc systems and tests.
#[derive(Clone)]
pub struct FnPotential {
    name: String,
    dim: usize,
    value: ScalarFn,
    gradient: Option<VectorFn>,
    sublevel: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl FnPotential {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        sublevel: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnPotential { name: name.into(), dim, value: Arc::new(value), gradient: None, sublevel: Arc::new(sublevel) }
    }

    /// Attach an analytic gradient (used as selection and as the single
    /// candidate wherever it is finite).
    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }
}

impl Potential for FnPotential {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        (self.sublevel)(level)
    }

    fn selection(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => central_difference(&|y| self.value(y), x),
        }
    }

    fn declared_subgradient(&self, x: &[f64]) -> Option<Subgradient> {
        let g = self.gradient.as_ref()?(x);
        g.iter().all(|c| c.is_finite()).then_some(Subgradient::Smooth(g))
    }
}

/// The distance to a target, viewed as a potential (the comparison `W₁ = 𝐝`).
pub struct DistancePotential {
    pub target: crate::system::Target,
}

impl Potential for DistancePotential {
    fn name(&self) -> String {
        "distance".into()
    }

    fn dim(&self) -> usize {
        self.target.center().len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.target.distance(x)
    }

    fn center(&self) -> Vec<f64> {
        self.target.center().to_vec()
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        self.target.enclosing_radius(level)
    }
}

/// A continuous, strictly increasing `γ : (0, ∞) → (0, ∞)`.
#[derive(Clone)]
pub struct RateFunction {
    kind: RateKind,
    /// `Some(σ)` when the rate is only valid on `W^{-1}((0, σ])`.
    pub sigma_local: Option<f64>,
}

#[derive(Clone)]
enum RateKind {
    Table { w: Vec<f64>, gamma: Vec<f64> },
    Analytic { name: String, f: Arc<dyn Fn(f64) -> f64 + Send + Sync> },
}

impl fmt::Debug for RateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RateKind::Table { w, .. } => write!(f, "RateFunction(table, {} nodes)", w.len()),
            RateKind::Analytic { name, .. } => write!(f, "RateFunction({name})"),
        }
    }
}

/// Serialized form of a rate function (always a table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma_local: Option<f64>,
}

impl RateFunction {
    pub fn from_table(w: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.len() != gamma.len() {
            return Err(Error::invalid("rate table needs matching, nonempty columns"));
        }
        if w[0] <= 0.0 || gamma[0] <= 0.0 {
            return Err(Error::invalid("rate table must start at positive w with positive γ"));
        }
        for i in 1..w.len() {
            if !(w[i] > w[i - 1]) || !(gamma[i] > gamma[i - 1]) {
                return Err(Error::invalid(format!("rate table not strictly increasing at node {i}")));
            }
        }
        Ok(RateFunction { kind: RateKind::Table { w, gamma }, sigma_local: None })
    }

    pub fn analytic(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        RateFunction { kind: RateKind::Analytic { name: name.into(), f: Arc::new(f) }, sigma_local: None }
    }

    pub fn identity() -> Self {
        Self::analytic("identity", |w| w)
    }

    /// `γ(w) = slope · w`.
    pub fn linear(slope: f64) -> Self {
        Self::analytic(format!("linear({slope})"), move |w| slope * w)
    }

    pub fn eval(&self, w: f64) -> f64 {
        match &self.kind {
            RateKind::Analytic { f, .. } => f(w),
            RateKind::Table { w: ws, gamma } => {
                let n = ws.len();
                if w <= ws[0] {
                    return gamma[0] * (w.max(0.0) / ws[0]);
                }
                if w >= ws[n - 1] {
                    let slope =
                        if n >= 2 { (gamma[n - 1] - gamma[n - 2]) / (ws[n - 1] - ws[n - 2]) } else { gamma[0] / ws[0] };
                    return gamma[n - 1] + slope * (w - ws[n - 1]);
                }
                let k = ws.partition_point(|v| *v <= w);
                let (w0, w1) = (ws[k - 1], ws[k]);
                let s = (w - w0) / (w1 - w0);
                gamma[k - 1] + s * (gamma[k] - gamma[k - 1])
            }
        }
    }

    /// Nodes of a table rate, or `None` for an analytic one.
    pub fn nodes(&self) -> Option<(&[f64], &[f64])> {
        match &self.kind {
            RateKind::Table { w, gamma } => Some((w, gamma)),
            RateKind::Analytic { .. } => None,
        }
    }

    /// Table form; analytic rates are sampled at `samples` geometric nodes on `[lo, hi]`.
    pub fn to_table(&self, lo: f64, hi: f64, samples: usize) -> RateTable {
        let (w, gamma) = match &self.kind {
            RateKind::Table { w, gamma } => (w.clone(), gamma.clone()),
            RateKind::Analytic { .. } => {
                let samples = samples.max(2);
                let w: Vec<f64> = (0..samples).map(|i| lo * (hi / lo).powf(i as f64 / (samples - 1) as f64)).collect();
                let gamma = w.iter().map(|v| self.eval(*v)).collect();
                (w, gamma)
            }
        };
        RateTable { w, gamma, sigma_local: self.sigma_local }
    }

    pub fn from_rate_table(t: RateTable) -> Result<Self> {
        let mut r = Self::from_table(t.w, t.gamma)?;
        r.sigma_local = t.sigma_local;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rate_interpolates_and_extends() {
        let r = RateFunction::from_table(vec![1.0, 2.0, 4.0], vec![0.5, 1.0, 1.5]).unwrap();
        assert_eq!(r.eval(1.0), 0.5);
        assert_eq!(r.eval(3.0), 1.25);
        assert_eq!(r.eval(0.5), 0.25);
        assert!((r.eval(6.0) - 2.0).abs() < 1e-15);
        assert!(r.eval(1e-9) > 0.0);
    }

    #[test]
    fn table_rate_rejects_non_increasing() {
        assert!(RateFunction::from_table(vec![1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(RateFunction::from_table(vec![1.0, 1.0], vec![1.0, 2.0]).is_err());
        assert!(RateFunction::from_table(vec![], vec![]).is_err());
    }

    #[test]
    fn fd_detects_kink() {
        let f = |x: &[f64]| x[0].abs() + x[1] * x[1];
        match finite_difference_subgradient(&f, &[0.0, 1.0]) {
            Subgradient::Branches(gs) => {
                assert!(gs.iter().any(|g| g[0] > 0.9));
                assert!(gs.iter().any(|g| g[0] < -0.9));
            }
            other => panic!("expected branches, got {other:?}"),
        }
        match finite_difference_subgradient(&f, &[1.0, 1.0]) {
            Subgradient::Smooth(g) => {
                assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
            }
            other => panic!("expected smooth, got {other:?}"),
        }
    }

    #[test]
    fn rate_table_round_trip() {
        let r = RateFunction::identity();
        let t = r.to_table(0.1, 10.0, 5);
        let back = RateFunction::from_rate_table(t.clone()).unwrap();
        assert_eq!(back.to_table(0.0, 0.0, 0), t);
        assert!((back.eval(1.0) - 1.0).abs() < 1e-12);
    }
}
