//! Euler trajectories and costs as locally uniform limits of sampling runs
//! over refining partitions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::Controller;
use crate::kl::KlBound;
use crate::mrf::Potential;
use crate::partition::{make_partition, PartitionMode};
use crate::sampling::dist;
use crate::simulate::{sampling_trajectory, SamplingRun, SimOptions};
use crate::system::ControlSystem;

/// Gaps at or below this are treated as zero when judging monotonicity.
const GAP_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerOptions {
    pub horizon: f64,
    /// Acceptance tolerance on the last sup-norm gap of every window.
    pub tol: f64,
    /// Intervals of the common time grid.
    pub grid: usize,
    pub mode: PartitionMode,
    pub sim: SimOptions,
}

impl Default for EulerOptions {
    fn default() -> Self {
        EulerOptions { horizon: 5.0, tol: 1e-3, grid: 2000, mode: PartitionMode::Uniform, sim: SimOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowGaps {
    pub window: f64,
    /// `sup_{t <= window} |x_i(t) − x_{i+1}(t)|` for consecutive refinements.
    pub state: Vec<f64>,
    /// Same for the running costs.
    pub cost: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerLimit {
    pub diameters: Vec<f64>,
    pub runs: Vec<SamplingRun>,
    pub times: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub cost: Vec<f64>,
    pub gaps: Vec<WindowGaps>,
    pub accepted: bool,
    /// Gaps weakly decrease with refinement on every window.
    pub monotone: bool,
    pub initial: Vec<f64>,
    pub d_initial: f64,
    /// `T_𝒳`: the finest run's exit time or the first grid time with
    /// `𝐝(𝒳) <= tol`, whichever comes first (infinite if neither happens).
    pub exit_time: f64,
    /// `m` with `𝐝(z)/m <= T_𝒳`.
    pub m: f64,
    /// Stable-entry times `T̄ᵢ` of the runs at the supplied radii.
    pub entry_times: Vec<f64>,
    /// `T̄ᵢ` is nonincreasing in `i` once finite.
    pub entry_times_monotone: bool,
}

impl EulerLimit {
    pub fn exit_lower_bound(&self) -> f64 {
        self.d_initial / self.m
    }

    /// `𝒳(t)` by linear interpolation on the common grid.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        let k = self.times.partition_point(|s| *s < t);
        if k == 0 {
            return self.trajectory[0].clone();
        }
        if k >= self.times.len() {
            return self.trajectory[self.times.len() - 1].clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let lam = (t - t0) / (t1 - t0);
        let (a, b) = (&self.trajectory[k - 1], &self.trajectory[k]);
        a.iter().zip(b).map(|(p, q)| p + lam * (q - p)).collect()
    }

    /// Largest difference quotient of `𝒳` on the grid.
    pub fn lipschitz(&self) -> f64 {
        self.trajectory
            .windows(2)
            .zip(self.times.windows(2))
            .map(|(x, t)| dist(&x[1], &x[0]) / (t[1] - t[0]))
            .fold(0.0, f64::max)
    }
}

fn windows(horizon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut w = 1.0;
    while w < horizon {
        out.push(w);
        w *= 2.0;
    }
    out.push(horizon);
    out
}

/// Runs the sampling solution for every diameter (coarse to fine) and
/// assembles the limit on a common grid. `entry_radius(δ)` gives the ball
/// radius used for the stable-entry time of the run at diameter `δ`; when
/// absent, the runs' exit times are reported instead.
#[allow(clippy::too_many_arguments)]
pub fn euler_limit(
    sys: &ControlSystem,
    k: &dyn Controller,
    w: &dyn Potential,
    z: &[f64],
    diameters: &[f64],
    entry_radius: Option<&(dyn Fn(f64) -> f64 + Sync)>,
    opts: &EulerOptions,
) -> Result<EulerLimit> {
    let d0 = sys.distance(z);
    if !(d0 > 0.0) {
        return Err(Error::invalid("initial state must lie off the target"));
    }
    if diameters.len() < 2 || diameters.windows(2).any(|p| !(p[1] < p[0])) || !(diameters[diameters.len() - 1] > 0.0) {
        return Err(Error::invalid("need at least two strictly decreasing positive diameters"));
    }
    if !(opts.horizon > 0.0 && opts.tol > 0.0 && opts.grid > 0) {
        return Err(Error::invalid("horizon, tol and grid must be positive"));
    }
    let runs = diameters
        .par_iter()
        .map(|&d| {
            let p = make_partition(d, opts.mode)?;
            sampling_trajectory(sys, k, w, &p, z, opts.horizon, &opts.sim)
        })
        .collect::<Result<Vec<SamplingRun>>>()?;

    let times: Vec<f64> = (0..=opts.grid).map(|i| opts.horizon * i as f64 / opts.grid as f64).collect();
    let on_grid: Vec<Vec<(Vec<f64>, f64)>> =
        runs.iter().map(|r| times.iter().map(|t| r.state_at(*t)).collect()).collect();

    let mut gaps: Vec<WindowGaps> =
        windows(opts.horizon).into_iter().map(|w| WindowGaps { window: w, state: vec![], cost: vec![] }).collect();
    for pair in on_grid.windows(2) {
        for g in &mut gaps {
            let (mut gs, mut gc) = (0.0f64, 0.0f64);
            for (i, t) in times.iter().enumerate() {
                if *t > g.window * (1.0 + 1e-12) {
                    break;
                }
                gs = gs.max(dist(&pair[0][i].0, &pair[1][i].0));
                gc = gc.max((pair[0][i].1 - pair[1][i].1).abs());
            }
            g.state.push(gs);
            g.cost.push(gc);
        }
    }
    let accepted = gaps
        .iter()
        .all(|g| g.state.last().is_some_and(|v| *v < opts.tol) && g.cost.last().is_some_and(|v| *v < opts.tol));
    let weakly_decreasing = |v: &[f64]| v.windows(2).all(|p| p[1] <= p[0] || p[1] <= GAP_FLOOR);
    let monotone = gaps.iter().all(|g| weakly_decreasing(&g.state) && weakly_decreasing(&g.cost));

    let finest = &on_grid[on_grid.len() - 1];
    let trajectory: Vec<Vec<f64>> = finest.iter().map(|p| p.0.clone()).collect();
    // The limit is only known up to `tol`, so it counts as arrived once it
    // is that close to the target.
    let limit_arrival =
        times.iter().zip(&trajectory).find(|(_, x)| sys.distance(x) <= opts.tol).map_or(f64::INFINITY, |(t, _)| *t);
    let exit_time = runs[runs.len() - 1].exit_time.min(limit_arrival);
    let cost = finest.iter().map(|p| p.1).collect();

    let reach = runs.iter().flat_map(|r| r.samples.iter().map(|s| s.dist)).fold(d0, f64::max);
    let m = sys.bounds.pair_bound(reach);

    let entry_times: Vec<f64> = runs
        .iter()
        .zip(diameters)
        .map(|(r, d)| match entry_radius {
            Some(f) => r.stable_entry_time(f(*d)),
            None => r.exit_time,
        })
        .collect();
    let finite: Vec<f64> = entry_times.iter().copied().filter(|t| t.is_finite()).collect();
    let entry_times_monotone = finite.windows(2).all(|p| p[1] <= p[0] + 1e-9);

    Ok(EulerLimit {
        diameters: diameters.to_vec(),
        exit_time,
        runs,
        times,
        trajectory,
        cost,
        gaps,
        accepted,
        monotone,
        initial: z.to_vec(),
        d_initial: d0,
        m,
        entry_times,
        entry_times_monotone,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerStabilityCheck {
    pub pass: bool,
    /// Largest `𝐝(𝒳(t)) − β(𝐝(z), t)` on the grid.
    pub max_violation: f64,
}

/// `𝐝(𝒳(t)) <= β(𝐝(z), t)` on the common grid.
pub fn check_euler_stability(sys: &ControlSystem, el: &EulerLimit, beta: &KlBound) -> EulerStabilityCheck {
    let max_violation = el
        .times
        .iter()
        .zip(&el.trajectory)
        .map(|(t, x)| sys.distance(x) - beta.eval(el.d_initial, *t))
        .fold(f64::NEG_INFINITY, f64::max);
    EulerStabilityCheck { pass: el.accepted && max_violation <= 1e-9, max_violation }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerCostCheck {
    pub pass: bool,
    pub slack: f64,
    pub sup_cost: f64,
    pub bound: f64,
    /// `𝐝(z)/m <= T_𝒳`.
    pub exit_lower_ok: bool,
}

/// `sup_{t < T_𝒳} 𝒳⁰(t) <= W(z)/p0 + tol` together with `𝐝(z)/m <= T_𝒳`.
pub fn check_euler_cost(el: &EulerLimit, w_z: f64, p0: f64, tol: f64) -> Result<EulerCostCheck> {
    if !(p0 > 0.0) {
        return Err(Error::invalid("p0 must be positive"));
    }
    let bound = w_z / p0;
    let sup_cost =
        el.times.iter().zip(&el.cost).filter(|(t, _)| **t <= el.exit_time).map(|(_, c)| *c).fold(0.0, f64::max);
    let exit_lower_ok = el.exit_time >= el.exit_lower_bound() * (1.0 - 1e-9);
    let slack = bound + tol - sup_cost;
    Ok(EulerCostCheck { pass: el.accepted && slack >= 0.0 && exit_lower_ok, slack, sup_cost, bound, exit_lower_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::ConstantControl;
    use crate::mrf::DistancePotential;
    use crate::systems;
    use std::sync::Arc;

    fn dyadic(n: i32) -> Vec<f64> {
        (1..=n).map(|i| 2f64.powi(-i)).collect()
    }

    #[test]
    fn decay_limit_matches_exponential() {
        let sys = systems::decay_line(0.0);
        let w = DistancePotential { target: sys.target.clone() };
        let el = euler_limit(&sys, &ConstantControl(vec![0.0]), &w, &[1.0], &dyadic(6), None, &EulerOptions::default())
            .unwrap();
        assert!(el.accepted);
        assert!((el.state_at(1.0)[0] - (-1f64).exp()).abs() < 1e-4);
        assert!(el.cost.windows(2).all(|c| c[1] >= c[0]));
        let beta = KlBound::Custom(Arc::new(|r, t| r * (-t / 2.0f64).exp()));
        assert!(check_euler_stability(&sys, &el, &beta).pass);
        assert!(!check_euler_stability(&sys, &el, &KlBound::Zero).pass);
    }

    #[test]
    fn unit_cost_equals_time() {
        let sys = systems::unit_speed_line(true);
        let w = DistancePotential { target: sys.target.clone() };
        let opts = EulerOptions { horizon: 2.0, ..Default::default() };
        let el = euler_limit(&sys, &ConstantControl(vec![-1.0]), &w, &[1.0], &dyadic(4), None, &opts).unwrap();
        assert!((el.exit_time - 1.0).abs() < 1e-9);
        for (t, c) in el.times.iter().zip(&el.cost) {
            assert!((c - t.min(1.0)).abs() < 1e-9);
        }
        let chk = check_euler_cost(&el, 1.0, 0.25, 1e-6).unwrap();
        assert!(chk.pass && chk.exit_lower_ok);
        assert!(!check_euler_cost(&el, 1.0, 2.0, 1e-6).unwrap().pass);
    }

    #[test]
    fn rejects_target_start() {
        let sys = systems::decay_line(0.0);
        let w = DistancePotential { target: sys.target.clone() };
        let r = euler_limit(&sys, &ConstantControl(vec![0.0]), &w, &[0.0], &dyadic(3), None, &EulerOptions::default());
        assert!(r.is_err());
    }
}
