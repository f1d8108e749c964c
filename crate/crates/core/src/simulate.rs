//! π-sampling trajectories under a feedback, their running cost, and the
//! quantitative checks that sampling solutions are expected to satisfy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::Controller;
use crate::kl::KlBound;
use crate::mrf::{Potential, RateFunction};
use crate::partition::Partition;
use crate::sampling::{self, norm};
use crate::system::ControlSystem;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Upper bound on the RK4 sub-step.
    pub h_ode: f64,
    /// Target contact threshold relative to `d(z)`.
    pub d_tol_rel: f64,
    /// Blow-up guard as a multiple of `|z|`.
    pub blowup_factor: f64,
    /// Stop at the first interval start where `W <= stop_level`.
    #[serde(default)]
    pub stop_level: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { h_ode: 1e-2, d_tol_rel: 1e-6, blowup_factor: 1e3, stop_level: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub state: Vec<f64>,
    /// Control active on the sub-step ending at `t` (the first interval's
    /// control for the initial sample).
    pub control: Vec<f64>,
    pub cost: f64,
    pub dist: f64,
    pub w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    TargetReached,
    BlowUpGuard,
    /// `W` dropped below the requested stop level.
    LevelReached,
    /// An interval watcher asked to stop.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRun {
    pub partition: Partition,
    pub initial: Vec<f64>,
    pub horizon: f64,
    pub samples: Vec<Sample>,
    /// Sample index at the start of each partition interval.
    pub interval_starts: Vec<usize>,
    /// `T_x`, infinite if the target was not reached.
    pub exit_time: f64,
    pub termination: Termination,
}

impl SamplingRun {
    pub fn w_initial(&self) -> f64 {
        self.samples[0].w
    }

    pub fn d_initial(&self) -> f64 {
        self.samples[0].dist
    }

    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("runs always hold the initial sample")
    }

    pub fn stable_entry_time(&self, r: f64) -> f64 {
        stable_entry_time(self, r)
    }

    /// Largest `|Δx|/Δt` over consecutive samples.
    pub fn max_speed(&self) -> f64 {
        self.samples
            .windows(2)
            .filter(|s| s[1].t > s[0].t)
            .map(|s| sampling::dist(&s[1].state, &s[0].state) / (s[1].t - s[0].t))
            .fold(0.0, f64::max)
    }

    /// Recorded state at time `t`, linearly interpolated and held constant
    /// after the last sample.
    pub fn state_at(&self, t: f64) -> (Vec<f64>, f64) {
        let s = &self.samples;
        if t <= s[0].t {
            return (s[0].state.clone(), s[0].cost);
        }
        let k = s.partition_point(|q| q.t < t);
        if k >= s.len() {
            let last = &s[s.len() - 1];
            return (last.state.clone(), last.cost);
        }
        let (a, b) = (&s[k - 1], &s[k]);
        let lam = (t - a.t) / (b.t - a.t);
        let x = a.state.iter().zip(&b.state).map(|(p, q)| p + lam * (q - p)).collect();
        (x, a.cost + lam * (b.cost - a.cost))
    }
}

fn rk4_step(sys: &ControlSystem, x: &[f64], u: &[f64], dt: f64) -> (Vec<f64>, f64) {
    let deriv = |y: &[f64]| -> (Vec<f64>, f64) { (sys.velocity(y, u), sys.running_cost(y, u)) };
    let shift = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let (k1, c1) = deriv(x);
    let (k2, c2) = deriv(&shift(&k1, dt / 2.0));
    let (k3, c3) = deriv(&shift(&k2, dt / 2.0));
    let (k4, c4) = deriv(&shift(&k3, dt));
    let next = (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    (next, dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4))
}

/// Golden-section iterations when locating a target contact inside a sub-step.
const CONTACT_ITERS: usize = 60;

/// Looks for a target contact within the sub-step `x → rk4(x, dt)`; only
/// searched when the step is long enough to reach the target. Returns the
/// partial step length and its end point.
fn locate_contact(
    sys: &ControlSystem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    end: &[f64],
    d_tol: f64,
) -> Option<(f64, (Vec<f64>, f64))> {
    if sampling::dist(x, end) < sys.distance(end) {
        return None;
    }
    let d_at = |s: f64| sys.distance(&rk4_step(sys, x, u, s).0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, dt);
    let (mut c, mut e) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fe) = (d_at(c), d_at(e));
    for _ in 0..CONTACT_ITERS {
        if fc <= fe {
            b = e;
            (e, fe) = (c, fc);
            c = b - g * (b - a);
            fc = d_at(c);
        } else {
            a = c;
            (c, fc) = (e, fe);
            e = a + g * (b - a);
            fe = d_at(e);
        }
    }
    let s = if fc <= fe { c } else { e };
    let step = rk4_step(sys, x, u, s);
    (sys.distance(&step.0) <= d_tol).then_some((s, step))
}

/// Runs the π-sampling solution from `z`: the control is frozen at
/// `K(x(tʲ⁻¹))` on each interval and the flow plus running cost are
/// integrated with RK4.
pub fn sampling_trajectory(
    sys: &ControlSystem,
    k: &dyn Controller,
    w: &dyn Potential,
    partition: &Partition,
    z: &[f64],
    horizon: f64,
    opts: &SimOptions,
) -> Result<SamplingRun> {
    sampling_trajectory_watched(sys, k, w, partition, z, horizon, opts, &|_| false)
}

/// As [`sampling_trajectory`], calling `watch` with the samples of every
/// completed interval (start sample included); returning `true` stops the run.
#[allow(clippy::too_many_arguments)]
pub fn sampling_trajectory_watched(
    sys: &ControlSystem,
    k: &dyn Controller,
    w: &dyn Potential,
    partition: &Partition,
    z: &[f64],
    horizon: f64,
    opts: &SimOptions,
    watch: &dyn Fn(&[Sample]) -> bool,
) -> Result<SamplingRun> {
    let d0 = sys.distance(z);
    if !(d0 > 0.0) {
        return Err(Error::invalid("initial state must lie off the target"));
    }
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let d_tol = opts.d_tol_rel * d0;
    let x_max = opts.blowup_factor * if norm(z) > 0.0 { norm(z) } else { 1.0 };
    let max_sub = (partition.diameter() / 16.0).min(opts.h_ode);

    let mut x = z.to_vec();
    let mut cost = 0.0;
    let mut u = k.control(&x)?;
    let mut samples = vec![Sample { t: 0.0, state: x.clone(), control: u.clone(), cost, dist: d0, w: w.value(&x) }];
    let mut interval_starts = Vec::new();
    let mut termination = Termination::Horizon;
    let mut exit_time = f64::INFINITY;

    let mut times = partition.times();
    let mut t_prev = times.next().expect("partition starts at 0");
    'outer: for t_next in times {
        let t_end = t_next.min(horizon);
        let start = samples.len() - 1;
        if opts.stop_level.is_some_and(|l| samples[start].w <= l) {
            termination = Termination::LevelReached;
            break;
        }
        interval_starts.push(start);
        if samples.len() > 1 {
            u = k.control(&x)?;
        }
        let span = t_end - t_prev;
        let steps = ((span / max_sub).ceil() as usize).max(1);
        let dt = span / steps as f64;
        for i in 1..=steps {
            let (mut nx, mut dc) = rk4_step(sys, &x, &u, dt);
            let mut t = if i == steps { t_end } else { t_prev + i as f64 * dt };
            if sys.distance(&nx) > d_tol {
                if let Some((s, step)) = locate_contact(sys, &x, &u, dt, &nx, d_tol) {
                    (nx, dc) = step;
                    t = t_prev + (i - 1) as f64 * dt + s;
                }
            }
            x = nx;
            cost += dc.max(0.0);
            let d = sys.distance(&x);
            samples.push(Sample { t, state: x.clone(), control: u.clone(), cost, dist: d, w: w.value(&x) });
            if d <= d_tol {
                termination = Termination::TargetReached;
                exit_time = t;
                break 'outer;
            }
            if !x.iter().all(|c| c.is_finite()) || norm(&x) > x_max {
                termination = Termination::BlowUpGuard;
                break 'outer;
            }
        }
        if watch(&samples[start..]) {
            termination = Termination::Aborted;
            break;
        }
        if t_end >= horizon {
            break;
        }
        t_prev = t_next;
    }
    Ok(SamplingRun {
        partition: *partition,
        initial: z.to_vec(),
        horizon,
        samples,
        interval_starts,
        exit_time,
        termination,
    })
}

/// Smallest recorded `t` after which every recorded distance is `<= r`;
/// infinite if the final sample is still farther than `r` (or the run was
/// cut by the blow-up guard).
pub fn stable_entry_time(run: &SamplingRun, r: f64) -> f64 {
    if run.termination == Termination::BlowUpGuard {
        return f64::INFINITY;
    }
    match run.samples.iter().rposition(|s| s.dist > r) {
        None => 0.0,
        Some(i) if i + 1 == run.samples.len() => f64::INFINITY,
        Some(i) => run.samples[i + 1].t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub pass: bool,
    /// Largest `d(x(t)) − max{β(R,t), r}` over samples.
    pub max_violation: f64,
}

/// `d(x(t)) <= max{β(R,t), r}` at every sample.
pub fn check_rr_stability(run: &SamplingRun, beta: &KlBound, r: f64, big_r: f64) -> StabilityCheck {
    let max_violation =
        run.samples.iter().map(|s| s.dist - beta.eval(big_r, s.t).max(r)).fold(f64::NEG_INFINITY, f64::max);
    StabilityCheck { pass: max_violation <= 1e-9, max_violation }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCheck {
    pub pass: bool,
    pub slack: f64,
    pub bar_t: f64,
    pub cost_at_bar_t: f64,
    pub bound: f64,
    /// `T̄ = 0`: no cost is incurred before entering the ball.
    pub vacuous: bool,
}

/// `x⁰(T̄ₓʳ) <= W(z)/p0 + quad_tol`. Fails if `T̄ₓʳ` is infinite.
pub fn check_cost_bound(run: &SamplingRun, w_z: f64, p0: f64, r: f64, quad_tol: f64) -> CostCheck {
    let bound = w_z / p0;
    let bar_t = stable_entry_time(run, r);
    if !bar_t.is_finite() {
        return CostCheck {
            pass: false,
            slack: f64::NEG_INFINITY,
            bar_t,
            cost_at_bar_t: f64::NAN,
            bound,
            vacuous: false,
        };
    }
    let cost = run.state_at(bar_t).1;
    let slack = bound + quad_tol - cost;
    CostCheck { pass: slack >= 0.0, slack, bar_t, cost_at_bar_t: cost, bound, vacuous: bar_t == 0.0 }
}

/// `2(W(z) − μ̂/4)/γ(μ̂/4)`.
pub fn settling_time_bound(w_z: f64, gamma: &RateFunction, mu_hat: f64) -> f64 {
    let level = mu_hat / 4.0;
    (2.0 * (w_z - level) / gamma.eval(level)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeCheck {
    pub pass: bool,
    pub bar_t: f64,
    pub bound: f64,
}

pub fn check_time_bound(run: &SamplingRun, w_z: f64, gamma: &RateFunction, mu_hat: f64, r: f64) -> TimeCheck {
    let bar_t = stable_entry_time(run, r);
    let bound = settling_time_bound(w_z, gamma, mu_hat);
    TimeCheck { pass: bar_t <= bound, bar_t, bound }
}

/// `T_ε = (d(z) − ε)/M̃(R)`.
pub fn min_transit_time(sys: &ControlSystem, z: &[f64], eps: f64, big_r: f64) -> Result<f64> {
    let d = sys.distance(z);
    if !(eps > 0.0 && eps < d && d <= big_r) {
        return Err(Error::invalid(format!("need 0 < ε < d(z) <= R, got ε={eps}, d={d}, R={big_r}")));
    }
    Ok((d - eps) / sys.bounds.velocity_bound(big_r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitCheck {
    pub pass: bool,
    /// `(ε, T_ε, first recorded time with d < ε)` per queried `ε`.
    pub entries: Vec<(f64, f64, f64)>,
    /// `d(z)/M̃(R)`, compared with the exit time when the target was reached.
    pub exit_lower_bound: f64,
}

/// No sample with `d < ε` before `T_ε`, and `T_x >= d(z)/M̃(R)`.
pub fn check_transit(run: &SamplingRun, sys: &ControlSystem, big_r: f64, eps: &[f64]) -> Result<TransitCheck> {
    let z = &run.initial;
    let mut pass = true;
    let mut entries = Vec::new();
    for &e in eps {
        let t_eps = min_transit_time(sys, z, e, big_r)?;
        let first = run.samples.iter().find(|s| s.dist < e).map_or(f64::INFINITY, |s| s.t);
        pass &= first >= t_eps;
        entries.push((e, t_eps, first));
    }
    let exit_lower_bound = sys.distance(z) / sys.bounds.velocity_bound(big_r);
    if run.exit_time.is_finite() {
        pass &= run.exit_time >= exit_lower_bound * (1.0 - 1e-12);
    }
    Ok(TransitCheck { pass, entries, exit_lower_bound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalCheck {
    pub pass: bool,
    /// `rhs − lhs` at the end of each checked interval.
    pub margins: Vec<f64>,
    /// Smallest `rhs − lhs` over all checked sub-steps.
    pub min_substep_margin: f64,
    /// Time up to which intervals were checked.
    pub t_bar: f64,
    /// `Σ_j [W(x(tʲ)) − W(x(tʲ⁻¹)) + p0 (x⁰(tʲ) − x⁰(tʲ⁻¹))]` over checked intervals.
    pub telescoped: f64,
    /// `W(x(t̄)) − W(z) + p0 x⁰(t̄)`.
    pub direct: f64,
    /// `−γ(W at the last checked interval start)/2 · t̄`.
    pub estt_rhs: f64,
    /// The first sample index where the decrease failed.
    pub first_violation: Option<usize>,
}

/// `W(x(t)) − W(x(tʲ⁻¹)) + p0 ∫ l <= −γ(W(x(tʲ⁻¹)))/2 · (t − tʲ⁻¹)` at every
/// recorded sub-step of every interval starting above `stop_level`.
pub fn check_interval_decrease(
    run: &SamplingRun,
    p0: f64,
    gamma: &RateFunction,
    stop_level: Option<f64>,
) -> IntervalCheck {
    let s = &run.samples;
    let stop = stop_level.unwrap_or(0.0);
    let mut out = IntervalCheck {
        pass: true,
        margins: Vec::new(),
        min_substep_margin: f64::INFINITY,
        t_bar: 0.0,
        telescoped: 0.0,
        direct: 0.0,
        estt_rhs: 0.0,
        first_violation: None,
    };
    let mut last_index = 0;
    let mut min_gamma = f64::INFINITY;
    for (j, &a) in run.interval_starts.iter().enumerate() {
        if s[a].w <= stop {
            break;
        }
        let b = run.interval_starts.get(j + 1).copied().unwrap_or(s.len() - 1);
        if b <= a {
            break;
        }
        let g = gamma.eval(s[a].w);
        min_gamma = min_gamma.min(g);
        let mut m = f64::INFINITY;
        for k in a + 1..=b {
            let lhs = s[k].w - s[a].w + p0 * (s[k].cost - s[a].cost);
            let rhs = -g / 2.0 * (s[k].t - s[a].t);
            m = rhs - lhs;
            out.min_substep_margin = out.min_substep_margin.min(m);
            if m < -1e-12 && out.first_violation.is_none() {
                out.first_violation = Some(k);
                out.pass = false;
            }
        }
        out.margins.push(m);
        out.telescoped += s[b].w - s[a].w + p0 * (s[b].cost - s[a].cost);
        last_index = b;
    }
    out.t_bar = s[last_index].t;
    out.direct = s[last_index].w - s[0].w + p0 * s[last_index].cost;
    out.estt_rhs = if min_gamma.is_finite() { -min_gamma / 2.0 * out.t_bar } else { 0.0 };
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::ConstantControl;
    use crate::partition::{make_partition, PartitionMode};
    use crate::systems::{self, ScaledAbs};

    fn run_from(sys: &ControlSystem, z: f64, u: f64, diam: f64, horizon: f64) -> SamplingRun {
        let p = make_partition(diam, PartitionMode::Uniform).unwrap();
        sampling_trajectory(
            sys,
            &ConstantControl(vec![u]),
            &ScaledAbs { scale: 2.0 },
            &p,
            &[z],
            horizon,
            &SimOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn contact_inside_a_substep_ends_the_run() {
        let sys = systems::unit_speed_line(true);
        let run = run_from(&sys, 0.33, -1.0, 0.1, 2.0);
        assert_eq!(run.termination, Termination::TargetReached);
        assert!((run.exit_time - 0.33).abs() < 1e-9, "{}", run.exit_time);
        assert!((run.final_sample().cost - 0.33).abs() < 1e-9);
        assert!(run.samples.iter().all(|s| s.state[0] >= -1e-9));
    }

    #[test]
    fn constant_speed_transit() {
        let sys = systems::unit_speed_line(true);
        let run = run_from(&sys, 1.0, -1.0, 0.5, 5.0);
        let at_half = run.samples.iter().find(|s| s.t == 0.5).unwrap();
        assert!((at_half.state[0] - 0.5).abs() < 1e-12);
        assert!((at_half.cost - 0.5).abs() < 1e-12);
        assert!((run.exit_time - 1.0).abs() < 1e-12);
        assert_eq!(run.termination, Termination::TargetReached);
        assert!((run.final_sample().cost - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decay_matches_exponential() {
        let sys = systems::decay_line(0.0);
        let run = run_from(&sys, 1.0, 0.0, 0.5, 2.0);
        let x1 = run.samples.iter().find(|s| s.t == 1.0).unwrap().state[0];
        assert!((x1 - (-1f64).exp()).abs() < 1e-6);
        assert!(run.samples.iter().all(|s| s.cost == 0.0));
    }

    fn synthetic(dists: &[f64]) -> SamplingRun {
        let p = make_partition(1.0, PartitionMode::Uniform).unwrap();
        SamplingRun {
            partition: p,
            initial: vec![dists[0]],
            horizon: dists.len() as f64,
            samples: dists
                .iter()
                .enumerate()
                .map(|(i, d)| Sample { t: i as f64, state: vec![*d], control: vec![0.0], cost: 0.0, dist: *d, w: *d })
                .collect(),
            interval_starts: (0..dists.len() - 1).collect(),
            exit_time: f64::INFINITY,
            termination: Termination::Horizon,
        }
    }

    #[test]
    fn stable_entry_examples() {
        let run = synthetic(&[2.0, 1.0, 0.5, 0.4, 0.6, 0.4, 0.3, 0.2, 0.1]);
        assert_eq!(stable_entry_time(&run, 0.5), 5.0);
        assert_eq!(stable_entry_time(&synthetic(&[0.3, 0.2, 0.25]), 0.5), 0.0);
        assert_eq!(stable_entry_time(&synthetic(&[2.0, 1.0, 0.9]), 0.5), f64::INFINITY);
    }

    #[test]
    fn stability_with_zero_beta() {
        let zero = KlBound::Zero;
        assert!(check_rr_stability(&synthetic(&[0.3, 0.2]), &zero, 0.5, 1.0).pass);
        assert!(!check_rr_stability(&synthetic(&[0.7, 0.2]), &zero, 0.5, 1.0).pass);
    }

    #[test]
    fn transit_bounds() {
        let sys = systems::unit_speed_line(true);
        assert!((min_transit_time(&sys, &[1.0], 0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let run = run_from(&sys, 1.0, -1.0, 0.5, 5.0);
        let chk = check_transit(&run, &sys, 1.0, &[0.25, 0.5]).unwrap();
        assert!(chk.pass);
        assert!((run.exit_time - chk.exit_lower_bound).abs() <= 1e-6);
    }

    #[test]
    fn cost_and_time_bounds() {
        let g = RateFunction::identity();
        assert!((settling_time_bound(2.0, &g, 0.4) - 38.0).abs() < 1e-12);
        assert_eq!(settling_time_bound(0.1, &g, 0.4), 0.0);
        let vac = check_cost_bound(&synthetic(&[0.3, 0.2]), 1.0, 0.5, 0.5, 1e-3);
        assert!(vac.pass && vac.vacuous && vac.cost_at_bar_t == 0.0);
        assert_eq!(vac.bound, 2.0);
    }

    #[test]
    fn recorded_motion_is_lipschitz() {
        let sys = systems::unit_speed_line(true);
        let run = run_from(&sys, 1.0, -1.0, 0.1, 3.0);
        assert!(run.max_speed() <= 1.0 + 1e-9);
        assert!(run.samples.windows(2).all(|s| s[1].cost >= s[0].cost));
    }
}
