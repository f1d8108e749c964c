//! Level-set bridges between `W` and the target distance, and the sampling
//! schedules `μ̂(r)`, `σ(R)`, `δ(r,R)` and `r(δ)` derived from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{level_probes, RadiusTable};
use crate::error::{Error, Result};
use crate::feedback::synthesize_feedback;
use crate::mrf::{subgradient_at, CandidateMrf, Potential};
use crate::partition::{make_partition, PartitionMode};
use crate::sampling::{self, norm};
use crate::simulate::{sampling_trajectory_watched, settling_time_bound, Sample, SimOptions};
use crate::system::{ControlSystem, Target};

const STRICT_TILT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeOptions {
    /// Points per shell or ball.
    pub budget: usize,
    /// Relative shell thickness `s`; table nodes are spaced by `1 + s`.
    pub shell: f64,
    pub eps_safe: f64,
    /// Initial states per trial sampling diameter.
    pub probe_runs: usize,
    pub delta_max: f64,
    /// Number of halvings tried below `delta_max`.
    pub dyadic_steps: u32,
    /// Cap on the horizon of a single probe run.
    pub horizon_cap: f64,
    pub lipschitz_inflation: f64,
    pub h_factor: f64,
    pub sim: SimOptions,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        BridgeOptions {
            budget: 4096,
            shell: 0.05,
            eps_safe: 0.05,
            probe_runs: 64,
            delta_max: 1.0,
            dyadic_steps: 12,
            horizon_cap: 200.0,
            lipschitz_inflation: 1.1,
            h_factor: 1.0 / 64.0,
            sim: SimOptions::default(),
        }
    }
}

fn shell_sample(w: &dyn Potential, target: &Target, r_lo: f64, r_hi: f64, count: usize) -> Vec<Vec<f64>> {
    let (a, b) = (target.enclosing_radius(r_lo), target.enclosing_radius(r_hi));
    let center = target.center();
    w.representatives(a, b, count)
        .into_iter()
        .chain(sampling::shell_points(center, a, b, count))
        .filter(|x| {
            let d = target.distance(x);
            d >= r_lo * (1.0 - 1e-12) && d <= r_hi * (1.0 + 1e-12)
        })
        .collect()
}

fn ball_sample(w: &dyn Potential, target: &Target, r: f64, count: usize) -> Vec<Vec<f64>> {
    let a = target.enclosing_radius(r);
    let center = target.center();
    w.representatives(0.0, a, count)
        .into_iter()
        .chain(sampling::ball_points(center, a, count))
        .chain(target.boundary_points(16))
        .filter(|x| target.distance(x) <= r * (1.0 + 1e-12))
        .collect()
}

/// Raw minimum of `W` over the distance shell `[r, r(1+s)]`.
fn shell_min(w: &dyn Potential, target: &Target, r: f64, opts: &BridgeOptions) -> Result<f64> {
    let pts = shell_sample(w, target, r, r * (1.0 + opts.shell), opts.budget);
    if pts.is_empty() {
        return Err(Error::ResolutionTooCoarse(format!("empty shell sample at r={r}")));
    }
    Ok(pts.iter().map(|x| w.value(x)).fold(f64::INFINITY, f64::min))
}

/// Raw maximum of `W` over `{d <= r}`.
fn ball_max(w: &dyn Potential, target: &Target, r: f64, opts: &BridgeOptions) -> Result<f64> {
    let pts = ball_sample(w, target, r, opts.budget);
    if pts.is_empty() {
        return Err(Error::ResolutionTooCoarse(format!("empty ball sample at r={r}")));
    }
    Ok(pts.iter().map(|x| w.value(x)).fold(0.0, f64::max))
}

/// Lower approximation of `sup{α : {W <= α} ⊆ {d < r}}`.
pub fn bridge_under(w: &dyn Potential, target: &Target, r: f64, opts: &BridgeOptions) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invalid("r must be positive"));
    }
    Ok(shell_min(w, target, r, opts)? * (1.0 - opts.eps_safe))
}

/// Upper approximation of `inf{α : {W <= α} ⊇ {d <= r}}`.
pub fn bridge_over(w: &dyn Potential, target: &Target, r: f64, opts: &BridgeOptions) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invalid("r must be positive"));
    }
    Ok(ball_max(w, target, r, opts)? * (1.0 + opts.eps_safe))
}

/// Monotone bridge tables on geometric radius nodes `r_k = r_min (1+s)^k`.
///
/// `under[k]` bounds `W` from below on the shell `[r_k, r_{k+1}]` and
/// `over[k]` bounds it from above on the ball `{d <= r_k}`; both already
/// include the safety factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeTables {
    pub radii: Vec<f64>,
    pub under: Vec<f64>,
    pub over: Vec<f64>,
    pub eps_safe: f64,
    pub shell: f64,
}

impl BridgeTables {
    pub fn build(w: &dyn Potential, target: &Target, r_min: f64, r_max: f64, opts: &BridgeOptions) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min) {
            return Err(Error::invalid(format!("need 0 < r_min < r_max, got {r_min}, {r_max}")));
        }
        let ratio = 1.0 + opts.shell;
        let count = ((r_max / r_min).ln() / ratio.ln()).ceil() as usize;
        let radii: Vec<f64> = (0..=count).map(|k| r_min * ratio.powi(k as i32)).collect();
        let mut under = radii[..count]
            .par_iter()
            .map(|r| Ok(shell_min(w, target, *r, opts)? * (1.0 - opts.eps_safe)))
            .collect::<Result<Vec<f64>>>()?;
        let mut over = radii
            .par_iter()
            .map(|r| Ok(ball_max(w, target, *r, opts)? * (1.0 + opts.eps_safe)))
            .collect::<Result<Vec<f64>>>()?;
        for k in (0..under.len().saturating_sub(1)).rev() {
            under[k] = under[k].min(under[k + 1]);
        }
        for k in 1..over.len() {
            over[k] = over[k].max(over[k - 1]);
        }
        Ok(BridgeTables { radii, under, over, eps_safe: opts.eps_safe, shell: opts.shell })
    }

    pub fn r_min(&self) -> f64 {
        self.radii[0]
    }

    pub fn r_max(&self) -> f64 {
        self.radii[self.radii.len() - 1]
    }

    /// Lower bridge `g_under(d)`; 0 below the first node.
    pub fn g_under(&self, d: f64) -> f64 {
        let r = &self.radii;
        let u = &self.under;
        if d < r[0] {
            return 0.0;
        }
        if d <= r[1] {
            return u[0] * (d - r[0]) / (r[1] - r[0]);
        }
        // Value under[k] sits at the top of its shell, r_{k+1}.
        let k = r.partition_point(|x| *x < d);
        if k >= r.len() {
            return u[u.len() - 1];
        }
        let (x0, x1) = (r[k - 1], r[k]);
        let (y0, y1) = (u[k - 2], u[k - 1]);
        y0 + (d - x0) / (x1 - x0) * (y1 - y0)
    }

    /// Upper bridge `g_over(d)`; infinite beyond the last node.
    pub fn g_over(&self, d: f64) -> f64 {
        let r = &self.radii;
        let o = &self.over;
        if d <= r[0] {
            return o[0];
        }
        let k = r.partition_point(|x| *x < d);
        if k >= r.len() {
            return f64::INFINITY;
        }
        // On (r_{k-1}, r_k] interpolate over[k] .. over[k+1] (or hold over[k]).
        let hi = if k + 1 < o.len() { o[k + 1] } else { o[k] };
        let (x0, x1) = (r[k - 1], r[k]);
        o[k] + (d - x0) / (x1 - x0) * (hi - o[k])
    }

    pub fn mu_hat(&self, r: f64) -> f64 {
        self.g_under(r)
    }

    pub fn sigma(&self, big_r: f64) -> f64 {
        self.g_over(big_r)
    }

    /// `inf{r : μ̂(r) >= α}`; infinite if the table never reaches `α`.
    pub fn rho_inv(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 0.0;
        }
        let r = &self.radii;
        let u = &self.under;
        if alpha <= u[0] {
            return r[0] + alpha / u[0] * (r[1] - r[0]);
        }
        for k in 1..u.len() {
            if u[k] >= alpha {
                let (x0, x1) = (r[k], r[k + 1]);
                let (y0, y1) = (u[k - 1], u[k]);
                if y1 == y0 {
                    return x0;
                }
                return x0 + (alpha - y0) / (y1 - y0) * (x1 - x0);
            }
        }
        f64::INFINITY
    }
}

/// Constants entering the Lipschitz branch of the diameter schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaConstants {
    /// Lipschitz bound of `W` on `W^{-1}([μ̂/4, 2σ])`.
    pub lipschitz: f64,
    /// Bound on `|(f, l)|` over `W^{-1}((0, 2σ]) × U`.
    pub m: f64,
}

/// `μ̂ / (4 L m)`.
pub fn lipschitz_delta(mu_hat: f64, c: &DeltaConstants) -> f64 {
    mu_hat / (4.0 * c.lipschitz * c.m)
}

/// Largest gradient-candidate norm over level probes in `[lo, hi]`, inflated.
pub fn estimate_lipschitz(w: &dyn Potential, lo: f64, hi: f64, count: usize, inflation: f64) -> Result<f64> {
    let probes = level_probes(w, lo, hi, count)?;
    let l = probes.iter().flat_map(|x| subgradient_at(w, x).candidates()).map(|p| norm(&p)).fold(0.0, f64::max);
    Ok(l * inflation)
}

pub fn estimate_delta_constants(
    sys: &ControlSystem,
    w: &dyn Potential,
    mu_hat: f64,
    sigma: f64,
    opts: &BridgeOptions,
) -> Result<DeltaConstants> {
    let lipschitz = estimate_lipschitz(w, mu_hat / 4.0, 2.0 * sigma, opts.budget / 4, opts.lipschitz_inflation)?;
    let reach = w.sublevel_radius(2.0 * sigma);
    let m = sys.bounds.pair_bound(reach);
    Ok(DeltaConstants { lipschitz, m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub r: f64,
    pub big_r: f64,
    pub mu_hat: f64,
    pub sigma: f64,
    /// Largest trial diameter whose probe runs all decreased `W`.
    pub delta_hat: f64,
    pub lipschitz_term: f64,
    pub delta: f64,
    pub constants: DeltaConstants,
    /// Always set: `δ̂` comes from probe runs rather than a formula.
    pub empirically_certified: bool,
}

/// Per-interval decrease with `ε = 1` on the samples of one interval.
fn interval_decreases(samples: &[Sample], p0: f64, gamma: &dyn Fn(f64) -> f64) -> bool {
    let a = &samples[0];
    let g = gamma(a.w);
    samples[1..].iter().all(|s| {
        let lhs = s.w - a.w + p0 * (s.cost - a.cost);
        lhs <= -g / 2.0 * (s.t - a.t) + 1e-12
    })
}

/// `δ(r, R) = min{δ̂(μ̂(r)/4, 2σ(R)), μ̂(r)/(4 L m)}`, with `δ̂` found by
/// halving trial diameters until every probe run satisfies the
/// per-interval decrease down to the level `μ̂/4`.
#[allow(clippy::too_many_arguments)]
pub fn schedule_delta(
    sys: &ControlSystem,
    mrf: &CandidateMrf,
    p0: f64,
    r: f64,
    big_r: f64,
    tables: &BridgeTables,
    n_table: &RadiusTable,
    constants: Option<DeltaConstants>,
    opts: &BridgeOptions,
) -> Result<DeltaSchedule> {
    if !(r > 0.0 && r < big_r) {
        return Err(Error::invalid(format!("need 0 < r < R, got r={r}, R={big_r}")));
    }
    let gamma = mrf.rate.as_ref().ok_or_else(|| Error::invalid("schedule_delta needs a rate function"))?;
    let w = mrf.potential.as_ref();
    let mu_hat = tables.mu_hat(r);
    let sigma = tables.sigma(big_r);
    if !(mu_hat > 0.0) || !sigma.is_finite() || mu_hat >= sigma {
        return Err(Error::EstimatesDegenerate(format!("bridge tables give μ̂({r})={mu_hat}, σ({big_r})={sigma}")));
    }
    let constants = match constants {
        Some(c) => c,
        None => estimate_delta_constants(sys, w, mu_hat, sigma, opts)?,
    };
    let lipschitz_term = lipschitz_delta(mu_hat, &constants);

    let level = mu_hat / 4.0;
    let mut starts = level_probes(w, level, 2.0 * sigma, opts.probe_runs)?;
    starts.retain(|x| w.value(x) > level && sys.distance(x) > 0.0);
    if starts.is_empty() {
        return Err(Error::ResolutionTooCoarse("no probe states between μ̂/4 and 2σ".into()));
    }
    let k = synthesize_feedback(sys, mrf, p0, n_table.clone(), opts.h_factor);
    let sim = SimOptions { stop_level: Some(level), ..opts.sim };
    let g = |v: f64| gamma.eval(v);

    let mut last_violation = None;
    let mut delta_hat = None;
    let mut trial = opts.delta_max;
    for step in 0..=opts.dyadic_steps {
        if step > 0 {
            trial /= 2.0;
        }
        let pi = make_partition(trial, PartitionMode::Uniform)?;
        let outcomes = starts
            .par_iter()
            .map(|z| {
                let horizon = (settling_time_bound(w.value(z), gamma, mu_hat) + trial).min(opts.horizon_cap);
                let watch = |s: &[Sample]| !interval_decreases(s, p0, &g);
                let run = sampling_trajectory_watched(sys, &k, w, &pi, z, horizon, &sim, &watch)?;
                Ok(match run.termination {
                    crate::simulate::Termination::Aborted => Some(z.clone()),
                    _ => None,
                })
            })
            .collect::<Result<Vec<Option<Vec<f64>>>>>()?;
        match outcomes.into_iter().flatten().next() {
            Some(bad) => last_violation = Some(bad),
            None => {
                delta_hat = Some(trial);
                break;
            }
        }
    }
    let Some(delta_hat) = delta_hat else {
        return Err(Error::NotCertifiable { delta: trial, state: last_violation.unwrap_or_default() });
    };
    Ok(DeltaSchedule {
        r,
        big_r,
        mu_hat,
        sigma,
        delta_hat,
        lipschitz_term,
        delta: delta_hat.min(lipschitz_term),
        constants,
        empirically_certified: true,
    })
}

/// `r ↦ δ(r, R)` on nodes, made nondecreasing (by lowering values, which
/// is always safe) and strictly increasing, with its inverse `r(δ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub big_r: f64,
    pub r_nodes: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl DeltaTable {
    /// Builds the table from per-node schedules; the last node must be `R`
    /// itself (evaluated just below it).
    pub fn from_schedules(big_r: f64, rows: &[(f64, f64)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty δ table"));
        }
        let mut r_nodes: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut deltas: Vec<f64> = rows.iter().map(|r| r.1).collect();
        if r_nodes.windows(2).any(|p| p[1] <= p[0]) || deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("δ table nodes must be increasing with positive values"));
        }
        let n = deltas.len();
        for i in (0..n.saturating_sub(1)).rev() {
            deltas[i] = deltas[i].min(deltas[i + 1]);
        }
        for (i, d) in deltas.iter_mut().enumerate() {
            *d *= 1.0 - STRICT_TILT * (n - 1 - i) as f64 / n as f64;
        }
        r_nodes.insert(0, 0.0);
        deltas.insert(0, 0.0);
        Ok(DeltaTable { big_r, r_nodes, deltas })
    }

    /// `δ(R) = lim_{r→R⁻} δ(r, R)`.
    pub fn delta_at_big_r(&self) -> f64 {
        self.deltas[self.deltas.len() - 1]
    }

    pub fn delta(&self, r: f64) -> f64 {
        interp(&self.r_nodes, &self.deltas, r)
    }

    /// Inverse of `r ↦ δ(r, R)`.
    pub fn r_of_delta(&self, delta: f64) -> Result<f64> {
        let top = self.delta_at_big_r();
        if !(delta > 0.0) || delta > top * (1.0 + 1e-12) {
            return Err(Error::OutOfRange { value: delta, lo: 0.0, hi: top });
        }
        Ok(interp(&self.deltas, &self.r_nodes, delta.min(top)))
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|v| *v < x);
    if k == 0 {
        return ys[0];
    }
    if k >= xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (x - x0) / (x1 - x0) * (ys[k] - ys[k - 1])
}

/// Computes `δ(r_k, R)` at each node via [`schedule_delta`] and tabulates it.
#[allow(clippy::too_many_arguments)]
pub fn delta_table(
    sys: &ControlSystem,
    mrf: &CandidateMrf,
    p0: f64,
    big_r: f64,
    r_nodes: &[f64],
    tables: &BridgeTables,
    n_table: &RadiusTable,
    opts: &BridgeOptions,
) -> Result<DeltaTable> {
    let mut rows = Vec::with_capacity(r_nodes.len());
    for &r in r_nodes {
        let r_eval = if r >= big_r { big_r * (1.0 - 1e-9) } else { r };
        let s = schedule_delta(sys, mrf, p0, r_eval, big_r, tables, n_table, None, opts)?;
        rows.push((r, s.delta));
    }
    DeltaTable::from_schedules(big_r, &rows)
}
