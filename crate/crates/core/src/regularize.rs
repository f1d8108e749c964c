//! Semiconcave regularization of a Lipschitz MRF: inf-convolutions
//! `W_α`, reshaping maps `Ψ_n`, and the min-construction `W̄`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certify_distance_rate, level_probes, CertReport, ProbeOptions, Region};
use crate::error::{Error, Result};
use crate::mrf::{subgradient_at, Potential, RateFunction, Subgradient};
use crate::sampling::{self, norm};
use crate::system::{ControlSystem, Target};

const COARSE_PER_AXIS: usize = 11;
const STEP_FLOOR_REL: f64 = 1e-11;
const TIE_REL: f64 = 1e-9;
/// Accepted moves per step size before the step is halved anyway; keeps
/// the search bounded along nonsmooth ridges.
const MOVES_PER_STEP: usize = 32;
const SPHERE_DIRECTIONS: usize = 64;
/// Fraction of the transition interval spent ramping in and out of
/// the plateau of `Ψ_n'`.
const PSI_RAMP: f64 = 0.2;

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfConvolution {
    pub value: f64,
    pub argmin: Vec<f64>,
    /// `2α(x − ȳ)`.
    pub gradient: Vec<f64>,
}

fn coarse_points(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let d = lo.len();
    let axis = |i: usize| -> Vec<f64> {
        (0..COARSE_PER_AXIS).map(|k| lo[i] + (hi[i] - lo[i]) * k as f64 / (COARSE_PER_AXIS - 1) as f64).collect()
    };
    if d > 3 {
        let count = COARSE_PER_AXIS.pow(3);
        return (0..count)
            .map(|k| sampling::halton(k, d).iter().enumerate().map(|(i, h)| lo[i] + (hi[i] - lo[i]) * h).collect())
            .collect();
    }
    let mut out = vec![Vec::new()];
    for i in 0..d {
        let a = axis(i);
        out = out
            .into_iter()
            .flat_map(|p| {
                a.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Lattice directions plus quasi-uniform unit directions, so the search
/// can follow ridges that are not axis-aligned.
fn pattern_directions(d: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = if d > 3 {
        (0..2 * d)
            .map(|k| {
                let mut e = vec![0.0; d];
                e[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
                e
            })
            .collect()
    } else {
        let total = 3usize.pow(d as u32);
        (0..total)
            .filter(|&k| k != (total - 1) / 2)
            .map(|mut k| {
                (0..d)
                    .map(|_| {
                        let v = (k % 3) as f64 - 1.0;
                        k /= 3;
                        v
                    })
                    .collect()
            })
            .collect()
    };
    if d > 1 {
        dirs.extend((0..SPHERE_DIRECTIONS).map(|i| sampling::direction(i, d)));
    }
    dirs
}

fn clamp(y: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..y.len() {
        y[i] = y[i].clamp(lo[i], hi[i]);
    }
}

/// Minimizes `W(y) + α|y − x|²` over `box`, assuming the minimizer lies in it.
fn search_min(
    w: &dyn Fn(&[f64]) -> f64,
    alpha: f64,
    x: &[f64],
    lo: &[f64],
    hi: &[f64],
    extra: &[Vec<f64>],
) -> (f64, Vec<f64>) {
    let obj = |y: &[f64]| w(y) + alpha * sampling::dist(y, x).powi(2);
    let mut starts: Vec<(f64, Vec<f64>)> = coarse_points(lo, hi)
        .into_iter()
        .chain(std::iter::once(x.to_vec()))
        .chain(extra.iter().cloned())
        .map(|mut y| {
            clamp(&mut y, lo, hi);
            (obj(&y), y)
        })
        .collect();
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    starts.truncate(4);
    let dirs = pattern_directions(x.len());
    let width = lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max);
    let floor = STEP_FLOOR_REL * width.max(1e-300);
    let mut best = starts[0].clone();
    for (mut fy, mut y) in starts {
        let mut step = width / (COARSE_PER_AXIS - 1) as f64;
        let mut moves = 0;
        while step > floor {
            let mut improved = None;
            for d in &dirs {
                let mut cand: Vec<f64> = y.iter().zip(d).map(|(a, b)| a + step * b).collect();
                clamp(&mut cand, lo, hi);
                let fc = obj(&cand);
                if fc < improved.as_ref().map_or(fy, |(f, _)| *f) {
                    improved = Some((fc, cand));
                }
            }
            match improved {
                Some((f, c)) if moves < MOVES_PER_STEP => {
                    fy = f;
                    y = c;
                    moves += 1;
                }
                Some((f, c)) => {
                    fy = f;
                    y = c;
                    moves = 0;
                    step /= 2.0;
                }
                None => {
                    moves = 0;
                    step /= 2.0;
                }
            }
        }
        if fy < best.0 {
            best = (fy, y);
        }
    }
    best
}

/// `W_α(x) = inf_y {W(y) + α|y − x|²}` with its minimizer `ȳ`. The search
/// covers the ball `|y − x| <= sqrt(W(x)/α)`, intersected with `search_box`
/// when one is given; a minimizer on a face of `search_box` that cuts the
/// ball is reported as [`Error::BoxTooSmall`].
pub fn inf_convolution(
    w: &dyn Fn(&[f64]) -> f64,
    alpha: f64,
    x: &[f64],
    search_box: Option<&SearchBox>,
    extra_starts: &[Vec<f64>],
) -> Result<InfConvolution> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("α must be positive"));
    }
    let wx = w(x);
    if !(wx >= 0.0) {
        return Err(Error::invalid(format!("W must be nonnegative, got {wx}")));
    }
    let reach = (wx / alpha).sqrt();
    if reach == 0.0 {
        return Ok(InfConvolution { value: 0.0, argmin: x.to_vec(), gradient: vec![0.0; x.len()] });
    }
    let mut lo: Vec<f64> = x.iter().map(|c| c - reach).collect();
    let mut hi: Vec<f64> = x.iter().map(|c| c + reach).collect();
    let mut cut_lo = vec![false; x.len()];
    let mut cut_hi = vec![false; x.len()];
    if let Some(b) = search_box {
        if b.lo.len() != x.len() || b.hi.len() != x.len() {
            return Err(Error::invalid("search box dimension mismatch"));
        }
        for i in 0..x.len() {
            if b.lo[i] > lo[i] {
                lo[i] = b.lo[i];
                cut_lo[i] = true;
            }
            if b.hi[i] < hi[i] {
                hi[i] = b.hi[i];
                cut_hi[i] = true;
            }
            if lo[i] > hi[i] {
                return Err(Error::BoxTooSmall(x.to_vec()));
            }
        }
    }
    let (value, argmin) = search_min(w, alpha, x, &lo, &hi, extra_starts);
    for i in 0..x.len() {
        let tol = 1e-9 * (hi[i] - lo[i]).max(1e-300);
        if (cut_lo[i] && argmin[i] - lo[i] <= tol) || (cut_hi[i] && hi[i] - argmin[i] <= tol) {
            return Err(Error::BoxTooSmall(argmin));
        }
    }
    let gradient = x.iter().zip(&argmin).map(|(a, b)| 2.0 * alpha * (a - b)).collect();
    Ok(InfConvolution { value: value.min(wx), argmin, gradient })
}

/// `W` extended by 0 on the interior of the target.
fn extended<'a>(w: &'a dyn Potential, target: &Target) -> impl Fn(&[f64]) -> f64 + Sync + 'a {
    let target = target.clone();
    move |y: &[f64]| if target.interior_contains(y) { 0.0 } else { w.value(y) }
}

/// `max{8n L_W² + 1, 2 L_W (1 + L_W L_f + p0 L_l)/m_n + 1, 11n}`.
pub fn alpha_schedule(l_w: f64, l_f: f64, l_l: f64, m_n: f64, p0: f64, n: usize) -> Result<f64> {
    if !(m_n > 0.0) {
        return Err(Error::EstimatesDegenerate(format!("m_{n} = {m_n} must be positive")));
    }
    let n = n as f64;
    let a = 8.0 * n * l_w * l_w + 1.0;
    let b = 2.0 * l_w * (1.0 + l_w * l_f + p0 * l_l) / m_n + 1.0;
    Ok(a.max(b).max(11.0 * n))
}

/// `γ̄(t) = inf_s {γ̃(s) + |t − s|}`, evaluated from below on a grid.
#[derive(Clone, Debug)]
pub struct GammaBar {
    pub gamma_tilde: RateFunction,
    pub grid: usize,
}

impl GammaBar {
    pub fn new(gamma_tilde: RateFunction) -> Self {
        GammaBar { gamma_tilde, grid: 256 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        // Increasing γ̃ means only s <= t matters; on each cell [s_k, s_{k+1}]
        // the infimum is at least γ̃(s_k) + t − s_{k+1}.
        let k = self.grid;
        let mut best = self.gamma_tilde.eval(t);
        for i in 0..k {
            let s0 = t * i as f64 / k as f64;
            let s1 = t * (i + 1) as f64 / k as f64;
            best = best.min(self.gamma_tilde.eval(s0) + t - s1);
        }
        best.max(0.0)
    }
}

/// `Ψ_n`: `t + 1/(8n)` on `[0, 1/(2n)]`, a C¹ descent to the identity on
/// `[1/(2n), 7/(8n)]`, the identity on `[7/(8n), 10n]`, then a quadratic
/// ramp up to `11n − 1/(8n)` continued linearly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub n: usize,
    pub ramp: f64,
}

impl Psi {
    fn a(&self) -> f64 {
        1.0 / (2.0 * self.n as f64)
    }

    pub fn b(&self) -> f64 {
        7.0 / (8.0 * self.n as f64)
    }

    fn shift(&self) -> f64 {
        1.0 / (8.0 * self.n as f64)
    }

    pub fn t2(&self) -> f64 {
        10.0 * self.n as f64
    }

    pub fn t3(&self) -> f64 {
        11.0 * self.n as f64 - self.shift()
    }

    /// Depth of the dip in `Ψ'` on the transition interval.
    fn depth(&self) -> f64 {
        self.shift() / ((1.0 - PSI_RAMP) * (self.b() - self.a()))
    }

    /// Trapezoid profile on `[0, 1]` and its integral.
    fn profile(tau: f64) -> (f64, f64) {
        let q = PSI_RAMP;
        if tau <= q {
            (tau / q, tau * tau / (2.0 * q))
        } else if tau <= 1.0 - q {
            (1.0, q / 2.0 + (tau - q))
        } else {
            let r = 1.0 - tau;
            (r / q, (1.0 - q) - r * r / (2.0 * q))
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (a, b) = (self.a(), self.b());
        if t <= a {
            t + self.shift()
        } else if t < b {
            let len = b - a;
            let (_, integral) = Psi::profile((t - a) / len);
            t + self.shift() - self.depth() * len * integral
        } else if t <= self.t2() {
            t
        } else if t <= self.t3() {
            t + self.ramp * (t - self.t2()).powi(2)
        } else {
            let w = self.t3() - self.t2();
            self.t3() + self.ramp * w * w + (1.0 + 2.0 * self.ramp * w) * (t - self.t3())
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let (a, b) = (self.a(), self.b());
        if t <= a {
            1.0
        } else if t < b {
            1.0 - self.depth() * Psi::profile((t - a) / (b - a)).0
        } else if t <= self.t2() {
            1.0
        } else if t <= self.t3() {
            1.0 + 2.0 * self.ramp * (t - self.t2())
        } else {
            1.0 + 2.0 * self.ramp * (self.t3() - self.t2())
        }
    }

    /// Smallest `Ψ'`.
    pub fn min_slope(&self) -> f64 {
        1.0 - self.depth()
    }
}

/// Builds `Ψ_n` so that `Ψ_n(t) >= 11n + headroom·(t + gap)` for
/// `t >= 11n − 1/(8n)`, where `gap` bounds `W − W_{α_n}`.
pub fn build_psi(n: usize, gap: f64, headroom: f64) -> Result<Psi> {
    if n == 0 {
        return Err(Error::invalid("levels start at n = 1"));
    }
    if !(gap >= 0.0 && gap.is_finite()) || !(headroom >= 1.0) {
        return Err(Error::InfeasiblePsi { n, reason: format!("gap {gap}, headroom {headroom}") });
    }
    let proto = Psi { n, ramp: 0.0 };
    let (t2, t3) = (proto.t2(), proto.t3());
    let w = t3 - t2;
    let required = 11.0 * n as f64 + headroom * (t3 + gap) - t3;
    let ramp = headroom * (required / (w * w)).max((headroom - 1.0) / (2.0 * w)).max(0.0);
    let psi = Psi { n, ramp };
    if !(psi.min_slope() >= 0.5) || !ramp.is_finite() {
        return Err(Error::InfeasiblePsi { n, reason: format!("slope {} below 1/2", psi.min_slope()) });
    }
    Ok(psi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiClauseCheck {
    /// `max |Ψ(t) − t − 1/(8n)|` on `[0, 1/(2n)]`.
    pub shift_error: f64,
    /// `max |Ψ(t) − t|` on `[7/(8n), 10n]`.
    pub identity_error: f64,
    /// Smallest forward-difference slope over the samples.
    pub min_slope: f64,
    /// Smallest `Ψ(t) − 11n − (t + gap)` for `t >= 11n − 1/(8n)`.
    pub growth_margin: f64,
    pub pass: bool,
}

/// Samples `Ψ_n` at `samples` points of each clause range.
pub fn check_psi_clauses(psi: &Psi, gap: f64, samples: usize) -> PsiClauseCheck {
    let n = psi.n as f64;
    let lin = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (samples - 1).max(1) as f64;
    let shift_error =
        (0..samples).map(|i| lin(0.0, psi.a(), i)).map(|t| (psi.eval(t) - t - psi.shift()).abs()).fold(0.0, f64::max);
    let identity_error =
        (0..samples).map(|i| lin(psi.b(), psi.t2(), i)).map(|t| (psi.eval(t) - t).abs()).fold(0.0, f64::max);
    let top = 2.0 * psi.t3();
    let ts: Vec<f64> = (0..samples).map(|i| lin(0.0, top, i)).collect();
    let min_slope =
        ts.windows(2).map(|p| (psi.eval(p[1]) - psi.eval(p[0])) / (p[1] - p[0])).fold(f64::INFINITY, f64::min);
    let growth_margin = (0..samples)
        .map(|i| lin(psi.t3(), 4.0 * psi.t3(), i))
        .map(|t| psi.eval(t) - 11.0 * n - (t + gap))
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * top;
    PsiClauseCheck {
        shift_error,
        identity_error,
        min_slope,
        growth_margin,
        pass: shift_error <= tol && identity_error <= tol && min_slope >= 0.5 && growth_margin >= 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizeOptions {
    pub n_max: usize,
    /// Sample points per estimate.
    pub budget: usize,
    /// Multiplier applied to sampled constants (and its inverse to `m_n`).
    pub inflation: f64,
    /// Headroom on the growth clause of `Ψ_n`.
    pub headroom: f64,
    /// Cap on the control radius used for estimates over unbounded sets.
    pub control_radius: f64,
}

impl Default for RegularizeOptions {
    fn default() -> Self {
        RegularizeOptions { n_max: 4, budget: 512, inflation: 1.1, headroom: 1.1, control_radius: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimates {
    pub n: usize,
    /// `M_n`, from the ball of radius `R(11n) + 1` around the centre.
    pub big_m: f64,
    pub m_n: f64,
    pub l_w: f64,
    pub l_f: f64,
    pub l_l: f64,
    pub alpha: f64,
    /// Sampled bound on `W − W_{α_n}`.
    pub gap: f64,
    pub methods: Vec<String>,
}

fn max_gradient(w: &dyn Potential, probes: &[Vec<f64>]) -> f64 {
    probes
        .par_iter()
        .map(|x| subgradient_at(w, x).candidates().iter().map(|p| norm(p)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
}

/// Frobenius bounds of the state Jacobians of `f` and `l` over states and
/// controls, by forward differences.
fn data_lipschitz(sys: &ControlSystem, states: &[Vec<f64>], controls: &[Vec<f64>]) -> (f64, f64) {
    states
        .par_iter()
        .map(|x| {
            let h = 1e-6 * norm(x).max(1.0);
            let mut lf = 0.0f64;
            let mut ll = 0.0f64;
            for u in controls {
                let f0 = sys.velocity(x, u);
                let l0 = sys.running_cost(x, u);
                let (mut sf, mut sl) = (0.0, 0.0);
                for i in 0..x.len() {
                    let mut y = x.clone();
                    y[i] += h;
                    let df = sampling::dist(&sys.velocity(&y, u), &f0) / h;
                    let dl = (sys.running_cost(&y, u) - l0) / h;
                    sf += df * df;
                    sl += dl * dl;
                }
                lf = lf.max(sf.sqrt());
                ll = ll.max(sl.sqrt());
            }
            (lf, ll)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Estimates the per-level constants and `α_n`.
pub fn estimate_level(
    sys: &ControlSystem,
    w: &dyn Potential,
    gamma_bar: &GammaBar,
    p0: f64,
    n: usize,
    opts: &RegularizeOptions,
) -> Result<LevelEstimates> {
    let nf = n as f64;
    let center = w.center();
    let infl = opts.inflation;
    let reach = w.sublevel_radius(11.0 * nf) + 1.0;
    let big_m = sampling::ball_points(&center, reach, opts.budget)
        .iter()
        .chain(&w.representatives(0.0, reach, opts.budget / 4))
        .map(|x| w.value(x))
        .fold(0.0, f64::max)
        * infl;

    let sub = level_probes(w, 0.0, big_m, opts.budget)?;
    let l_w = (max_gradient(w, &sub) * infl).max(1.0);

    let u_radius = sys.control_set.radius_bound().unwrap_or(opts.control_radius);
    let controls = sys.control_set.grid(u_radius, u_radius / 4.0);
    let states = sampling::ball_points(&center, w.sublevel_radius(big_m), opts.budget / 4);
    let (lf, ll) = data_lipschitz(sys, &states, &controls);
    let l_f = (lf * infl).max(1.0);
    let l_l = (ll * infl).max(1.0);

    let annulus = level_probes(w, 1.0 / (2.0 * nf), 11.0 * nf, opts.budget)?;
    let d_min = annulus.iter().map(|x| sys.distance(x)).fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return Err(Error::EstimatesDegenerate(format!("no probes in W^-1([1/{}, {}])", 2 * n, 11 * n)));
    }
    let m_n = gamma_bar.eval(d_min / infl) / infl;
    let alpha = alpha_schedule(l_w, l_f, l_l, m_n, p0, n)?;

    let wext = extended(w, &sys.target);
    let starts = [sys.target.center().to_vec()];
    let gap_probes = level_probes(w, 0.0, big_m, opts.budget / 4)?;
    let gap = gap_probes
        .par_iter()
        .map(|x| inf_convolution(&wext, alpha, x, None, &starts).map(|c| wext(x) - c.value))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(1.0 / (8.0 * nf), f64::max)
        * infl;

    Ok(LevelEstimates {
        n,
        big_m,
        m_n,
        l_w,
        l_f,
        l_l,
        alpha,
        gap,
        methods: vec![
            "M_n: max over ball samples of radius R(11n)+1".into(),
            "L_W: max gradient-candidate norm over sublevel probes".into(),
            "L_f, L_l: forward-difference Jacobian norms over state/control samples".into(),
            "m_n: γ̄ at the deflated minimum probe distance".into(),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReshapedLevel {
    pub estimates: LevelEstimates,
    pub psi: Psi,
}

/// Serializable recipe for [`RegularizedMrf`]; rebuilding from it needs the
/// base potential and the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizedSpec {
    pub base: String,
    pub target: Target,
    pub p0: f64,
    pub levels: Vec<ReshapedLevel>,
    pub failure: Option<String>,
}

/// `W̄ = min_n Ψ_n ∘ W_{α_n}`.
pub struct RegularizedMrf {
    base: Arc<dyn Potential>,
    pub spec: RegularizedSpec,
    pub gamma_bar: GammaBar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelValue {
    pub n: usize,
    pub inner: f64,
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl RegularizedMrf {
    pub fn from_spec(base: Arc<dyn Potential>, spec: RegularizedSpec, gamma_bar: GammaBar) -> Result<Self> {
        if spec.levels.is_empty() {
            return Err(Error::invalid("regularized MRF needs at least one level"));
        }
        Ok(RegularizedMrf { base, spec, gamma_bar })
    }

    pub fn base(&self) -> &dyn Potential {
        self.base.as_ref()
    }

    pub fn levels(&self) -> &[ReshapedLevel] {
        &self.spec.levels
    }

    pub fn achieved_n(&self) -> usize {
        self.spec.levels.len()
    }

    /// `W_{α_k}(x)` with its minimizer for the `k`-th level.
    pub fn convolution(&self, k: usize, x: &[f64]) -> InfConvolution {
        let wext = extended(self.base.as_ref(), &self.spec.target);
        let alpha = self.spec.levels[k].estimates.alpha;
        inf_convolution(&wext, alpha, x, None, &[self.spec.target.center().to_vec()])
            .expect("unbounded search cannot hit a box face")
    }

    fn level_value(&self, k: usize, x: &[f64]) -> LevelValue {
        let c = self.convolution(k, x);
        let psi = &self.spec.levels[k].psi;
        let slope = psi.derivative(c.value);
        LevelValue {
            n: psi.n,
            inner: c.value,
            value: psi.eval(c.value),
            gradient: c.gradient.iter().map(|g| slope * g).collect(),
        }
    }

    /// Every level, in order.
    pub fn all_level_values(&self, x: &[f64]) -> Vec<LevelValue> {
        (0..self.spec.levels.len()).map(|k| self.level_value(k, x)).collect()
    }

    /// Levels in order, stopping once no later level can go lower: with
    /// `α` nondecreasing and `Ψ(t) >= t`, every later level is at least
    /// `W_{α_k}(x)`, which equals level `k` where `Ψ_k` is the identity.
    pub fn level_values(&self, x: &[f64]) -> Vec<LevelValue> {
        let levels = &self.spec.levels;
        let mut out = Vec::with_capacity(levels.len());
        for k in 0..levels.len() {
            let lv = self.level_value(k, x);
            let psi = &levels[k].psi;
            let identity = lv.inner >= psi.b() && lv.inner <= psi.t2();
            let rest_monotone = levels[k..].windows(2).all(|w| w[1].estimates.alpha >= w[0].estimates.alpha);
            out.push(lv);
            if identity && rest_monotone {
                break;
            }
        }
        out
    }

    /// Levels attaining the minimum (up to a relative tie tolerance).
    pub fn active(&self, x: &[f64]) -> Vec<LevelValue> {
        let all = self.level_values(x);
        let best = all.iter().map(|l| l.value).fold(f64::INFINITY, f64::min);
        let tol = TIE_REL * best.abs().max(1.0);
        all.into_iter().filter(|l| l.value <= best + tol).collect()
    }

    /// `𝒲(x) = γ̄(𝐝(x))`.
    pub fn decrease_rate(&self, x: &[f64]) -> f64 {
        self.gamma_bar.eval(self.spec.target.distance(x))
    }
}

impl Potential for RegularizedMrf {
    fn name(&self) -> String {
        format!("regularized({})", self.spec.base)
    }

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        if self.spec.target.distance(x) == 0.0 {
            return 0.0;
        }
        self.level_values(x).iter().map(|l| l.value).fold(f64::INFINITY, f64::min)
    }

    fn center(&self) -> Vec<f64> {
        self.base.center()
    }

    fn sublevel_radius(&self, level: f64) -> f64 {
        let gap = self.spec.levels.iter().map(|l| l.estimates.gap).fold(0.0, f64::max);
        self.base.sublevel_radius(level + gap)
    }

    fn selection(&self, x: &[f64]) -> Vec<f64> {
        self.active(x).swap_remove(0).gradient
    }

    fn declared_subgradient(&self, x: &[f64]) -> Option<Subgradient> {
        let mut active = self.active(x);
        Some(if active.len() == 1 {
            Subgradient::Smooth(active.swap_remove(0).gradient)
        } else {
            Subgradient::Branches(active.into_iter().map(|l| l.gradient).collect())
        })
    }

    fn representatives(&self, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
        self.base.representatives(lo, hi, count)
    }
}

/// Builds `W̄` from levels `1..=n_max`. A level that fails stops the
/// construction; the earlier levels are kept and the reason recorded.
/// The first level must succeed.
pub fn build_semiconcave_mrf(
    sys: &ControlSystem,
    w: Arc<dyn Potential>,
    p0: f64,
    gamma_tilde: &RateFunction,
    opts: &RegularizeOptions,
) -> Result<RegularizedMrf> {
    if opts.n_max == 0 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    let gamma_bar = GammaBar::new(gamma_tilde.clone());
    let built: Vec<Result<ReshapedLevel>> = (1..=opts.n_max)
        .into_par_iter()
        .map(|n| {
            let estimates = estimate_level(sys, w.as_ref(), &gamma_bar, p0, n, opts)?;
            let psi = build_psi(n, estimates.gap, opts.headroom)?;
            Ok(ReshapedLevel { estimates, psi })
        })
        .collect();
    let mut levels = Vec::new();
    let mut failure = None;
    for b in built {
        match b {
            Ok(l) => levels.push(l),
            Err(e) => {
                if levels.is_empty() {
                    return Err(e);
                }
                failure = Some(e.to_string());
                break;
            }
        }
    }
    let spec = RegularizedSpec { base: w.name(), target: sys.target.clone(), p0, levels, failure };
    RegularizedMrf::from_spec(w, spec, gamma_bar)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichCheck {
    pub probes: usize,
    pub violations: usize,
    /// Largest `W_α − W` (should be `<= 0`).
    pub above: f64,
    /// Largest `W − 1/(8n) − W_α` (should be `<= 0`).
    pub below: f64,
}

/// `W − 1/(8n) <= W_{α_n} <= W` at the given probes.
pub fn check_level_sandwich(mrf: &RegularizedMrf, k: usize, probes: &[Vec<f64>]) -> SandwichCheck {
    let n = mrf.spec.levels[k].psi.n as f64;
    let wext = extended(mrf.base(), &mrf.spec.target);
    let (above, below) = probes
        .par_iter()
        .map(|x| {
            let c = mrf.convolution(k, x);
            let wx = wext(x);
            (c.value - wx, wx - 1.0 / (8.0 * n) - c.value)
        })
        .reduce(|| (f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let violations = probes
        .par_iter()
        .filter(|x| {
            let c = mrf.convolution(k, x);
            let wx = wext(x);
            c.value > wx + 1e-12 || c.value < wx - 1.0 / (8.0 * n) - 1e-12
        })
        .count();
    SandwichCheck { probes: probes.len(), violations, above, below }
}

/// Certifies `H(x, p0/2, p) <= −𝒲(x)/4` for `p` in the gradient
/// candidates of `W̄` over `region`.
pub fn check_halved_decrease(
    sys: &ControlSystem,
    w_bar: &RegularizedMrf,
    p0: f64,
    region: Region,
    opts: &ProbeOptions,
) -> Result<CertReport> {
    let gb = w_bar.gamma_bar.clone();
    let quarter = RateFunction::analytic("γ̄/4", move |d| gb.eval(d) / 4.0);
    certify_distance_rate(sys, w_bar, p0 / 2.0, region, &quarter, None, opts)
}

/// Outcome of the whole regularization pipeline on a distance annulus.
pub struct RegularizationCheck {
    pub w_bar: RegularizedMrf,
    pub gamma_tilde: RateFunction,
    /// Per level: sandwich and `Ψ` clause checks.
    pub levels: Vec<(SandwichCheck, PsiClauseCheck)>,
    pub probes: usize,
    /// Probes where `W̄ > W`.
    pub above_base: usize,
    pub decrease: CertReport,
}

impl RegularizationCheck {
    pub fn pass(&self) -> bool {
        self.levels.iter().all(|(s, p)| s.violations == 0 && p.pass)
            && self.above_base == 0
            && self.decrease.certified
            && self.decrease.min_margin > 0.0
    }
}

/// Fits `γ̃` on `[lo/2, 2hi]`, builds `W̄` and checks it on `lo <= 𝐝 <= hi`
/// with `probes` points (and as many `Ψ` samples).
#[allow(clippy::too_many_arguments)]
pub fn check_regularization(
    sys: &ControlSystem,
    w: Arc<dyn Potential>,
    p0: f64,
    lo: f64,
    hi: f64,
    probes: usize,
    opts: &RegularizeOptions,
    popts: &ProbeOptions,
) -> Result<RegularizationCheck> {
    let fit_region = Region::Distance { lo: lo / 2.0, hi: 2.0 * hi };
    let gamma_tilde = crate::certify::fit_rate_gamma(sys, w.as_ref(), p0, fit_region, None, popts)?;
    let w_bar = build_semiconcave_mrf(sys, w.clone(), p0, &gamma_tilde, opts)?;
    let points = crate::certify::distance_probes(sys, w.as_ref(), lo, hi, probes);
    let levels = w_bar
        .levels()
        .iter()
        .enumerate()
        .map(|(k, level)| {
            (check_level_sandwich(&w_bar, k, &points), check_psi_clauses(&level.psi, level.estimates.gap, probes))
        })
        .collect();
    let above_base = points.par_iter().filter(|x| w_bar.value(x) > w.value(x) + 1e-12).count();
    let decrease = check_halved_decrease(sys, &w_bar, p0, Region::Distance { lo, hi }, popts)?;
    Ok(RegularizationCheck { w_bar, gamma_tilde, levels, probes: points.len(), above_base, decrease })
}

/// A potential sampled on a regular grid and read back by multilinear
/// interpolation (clamped to the grid box).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub name: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Points per axis (at least 2).
    pub shape: Vec<usize>,
    /// Row-major values, last axis fastest.
    pub values: Vec<f64>,
}

impl GridTable {
    pub fn sample(w: &dyn Potential, lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if lo.len() != w.dim() || hi.len() != w.dim() || shape.len() != w.dim() {
            return Err(Error::invalid("grid dimension mismatch"));
        }
        if shape.iter().any(|s| *s < 2) || lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::invalid("grid needs lo < hi and at least 2 points per axis"));
        }
        let total: usize = shape.iter().product();
        let values = (0..total)
            .into_par_iter()
            .map(|flat| {
                let mut rest = flat;
                let mut x = vec![0.0; shape.len()];
                for i in (0..shape.len()).rev() {
                    let k = rest % shape[i];
                    rest /= shape[i];
                    x[i] = lo[i] + (hi[i] - lo[i]) * k as f64 / (shape[i] - 1) as f64;
                }
                w.value(&x)
            })
            .collect();
        Ok(GridTable { name: w.name(), lo, hi, shape, values })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.shape.len();
        let total: usize = self.shape.iter().product();
        if d == 0 || self.lo.len() != d || self.hi.len() != d || self.values.len() != total {
            return Err(Error::invalid("grid table has inconsistent sizes"));
        }
        if self.shape.iter().any(|s| *s < 2) || self.lo.iter().zip(&self.hi).any(|(a, b)| !(b > a)) {
            return Err(Error::invalid("grid needs lo < hi and at least 2 points per axis"));
        }
        Ok(())
    }
}

impl Potential for GridTable {
    fn name(&self) -> String {
        format!("table({})", self.name)
    }

    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.shape.len();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let cells = (self.shape[i] - 1) as f64;
            let s = ((x[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) * cells).clamp(0.0, cells);
            let k = (s.floor() as usize).min(self.shape[i] - 2);
            base[i] = k;
            frac[i] = s - k as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0;
            for i in 0..d {
                let bit = (corner >> i) & 1;
                weight *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * self.shape[i] + base[i] + bit;
            }
            if weight > 0.0 {
                acc += weight * self.values[flat];
            }
        }
        acc
    }

    fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// The whole grid box: values outside it are clamped, so no smaller
    /// ball is guaranteed.
    fn sublevel_radius(&self, _level: f64) -> f64 {
        0.5 * sampling::dist(&self.lo, &self.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abs1(y: &[f64]) -> f64 {
        y[0].abs()
    }

    #[test]
    fn abs_convolution_values() {
        let c = inf_convolution(&abs1, 1.0, &[1.0], None, &[]).unwrap();
        assert!((c.value - 0.75).abs() < 1e-12 && (c.argmin[0] - 0.5).abs() < 1e-9);
        let c = inf_convolution(&abs1, 1.0, &[0.25], None, &[]).unwrap();
        assert!((c.value - 0.0625).abs() < 1e-12 && c.argmin[0].abs() < 1e-9);
        let c = inf_convolution(&abs1, 1.0, &[0.0], None, &[]).unwrap();
        assert_eq!((c.value, c.argmin[0]), (0.0, 0.0));
    }

    #[test]
    fn box_face_minimizer_is_rejected() {
        let b = SearchBox { lo: vec![0.8], hi: vec![2.0] };
        assert!(matches!(inf_convolution(&abs1, 1.0, &[1.0], Some(&b), &[]), Err(Error::BoxTooSmall(_))));
        let b = SearchBox { lo: vec![0.0], hi: vec![2.0] };
        assert!(inf_convolution(&abs1, 1.0, &[1.0], Some(&b), &[]).is_ok());
    }

    #[test]
    fn convolution_in_two_dims() {
        let cone = |y: &[f64]| norm(y);
        let c = inf_convolution(&cone, 2.0, &[0.6, 0.8], None, &[]).unwrap();
        // Minimizer moves 1/(2α) towards the origin.
        assert!((c.value - (1.0 - 1.0 / 8.0)).abs() < 1e-10, "{}", c.value);
        assert!((norm(&c.gradient) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_example() {
        assert_eq!(alpha_schedule(2.0, 1.0, 1.0, 0.5, 1.0, 1).unwrap(), 33.0);
        assert!(alpha_schedule(1.0, 1.0, 1.0, 0.0, 1.0, 1).is_err());
        assert!(
            alpha_schedule(1.0, 1.0, 1.0, 0.5, 2.0, 1).unwrap() >= alpha_schedule(1.0, 1.0, 1.0, 0.5, 1.0, 1).unwrap()
        );
    }

    #[test]
    fn psi_clauses() {
        for n in 1..=4 {
            let psi = build_psi(n, 0.3, 1.1).unwrap();
            let nf = n as f64;
            assert_eq!(psi.eval(1.0 / (4.0 * nf)), 1.0 / (4.0 * nf) + 1.0 / (8.0 * nf));
            assert_eq!(psi.eval(nf), nf);
            let chk = check_psi_clauses(&psi, 0.3, 1000);
            assert!(chk.pass, "{chk:?}");
            assert!(psi.min_slope() > 0.58);
        }
    }

    #[test]
    fn psi_never_below_identity() {
        for n in 1..=6 {
            let psi = build_psi(n, 0.2, 1.1).unwrap();
            for i in 0..20000 {
                let t = i as f64 * 1e-3 * n as f64;
                assert!(psi.eval(t) >= t, "n = {n}, t = {t}");
            }
        }
    }

    #[test]
    fn psi_is_c1() {
        let psi = build_psi(2, 0.1, 1.1).unwrap();
        for t in [0.25, 7.0 / 16.0, 20.0, psi.t3()] {
            let h = 1e-7;
            let fd = (psi.eval(t + h) - psi.eval(t - h)) / (2.0 * h);
            assert!((fd - psi.derivative(t)).abs() < 1e-5, "{t}");
            assert!((psi.derivative(t - 1e-9) - psi.derivative(t + 1e-9)).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_table_is_exact_on_multilinear_data() {
        let f = crate::mrf::FnPotential::new("plane", 2, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1], |l| l);
        let g = GridTable::sample(&f, vec![-1.0, -1.0], vec![1.0, 2.0], vec![5, 7]).unwrap();
        for x in [[0.3, 0.2], [-0.77, 1.9], [1.0, 2.0]] {
            assert!((g.value(&x) - f.value(&x)).abs() < 1e-12);
        }
        let back: GridTable = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn gamma_bar_is_lower_and_lipschitz() {
        let g = GammaBar::new(RateFunction::linear(3.0));
        for i in 1..50 {
            let t = i as f64 * 0.1;
            assert!(g.eval(t) <= 3.0 * t + 1e-12);
            assert!((g.eval(t) - t).abs() < 0.02, "{}", g.eval(t));
            assert!((g.eval(t + 0.1) - g.eval(t)).abs() <= 0.1 + 1e-9);
        }
    }
}
