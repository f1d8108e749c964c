use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{resolve_mrf, RegularizedFile, ResolvedMrf, RunConfig};
use super::report::{emit_trajectory_csv, Margins, Num, Report};
use crate::bridge::{schedule_delta, BridgeOptions, BridgeTables, DeltaSchedule};
use crate::certify::{
    certify_decrease, compact_radius_table, distance_probes, fit_rate_gamma, CertReport, ProbeOptions, RadiusTable,
    Region,
};
use crate::error::{Error, Result};
use crate::euler::{check_euler_cost, check_euler_stability, euler_limit, EulerOptions};
use crate::feedback::{synthesize_feedback, Controller, Feedback};
use crate::kl::KlBound;
use crate::mrf::{CandidateMrf, Potential, RateFunction, RateTable};
use crate::partition::{make_partition, Partition};
use crate::regularize::check_regularization;
use crate::simulate::{
    check_cost_bound, check_interval_decrease, check_rr_stability, check_time_bound, check_transit,
    sampling_trajectory, settling_time_bound, Sample, SamplingRun, SimOptions, Termination,
};
use crate::system::ControlSystem;

/// Longest default horizon for a sampling run.
const HORIZON_CAP: f64 = 200.0;
/// Violations copied into the report notes.
const NOTED_VIOLATIONS: usize = 16;
const SANDWICH_PROBES: usize = 10_000;
const REGULARIZE_PROBES: usize = 1000;

/// What a command produced besides its report.
pub enum Artifact {
    None,
    Json(String),
    Csv(Vec<(PathBuf, SamplingRun)>),
}

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    pub out: Option<&'a Path>,
    pub verbose: bool,
}

impl Context<'_> {
    fn log(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("regstab: {}", msg());
        }
    }

    fn sim(&self) -> SimOptions {
        let t = &self.cfg.tolerances;
        SimOptions { h_ode: t.h_ode, d_tol_rel: t.d_tol, ..SimOptions::default() }
    }

    fn bridge_options(&self) -> BridgeOptions {
        BridgeOptions {
            budget: self.cfg.budgets.bridge,
            probe_runs: self.cfg.budgets.schedule_runs,
            eps_safe: self.cfg.tolerances.eps_safe,
            sim: self.sim(),
            ..BridgeOptions::default()
        }
    }

    fn probe_options(&self) -> ProbeOptions {
        ProbeOptions { budget: self.cfg.budgets.probe, eta: self.cfg.tolerances.eta, ..ProbeOptions::default() }
    }
}

struct Setup {
    sys: ControlSystem,
    mrf: ResolvedMrf,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let sys = cfg.system.build();
    let mrf = resolve_mrf(&cfg.mrf, &sys)?;
    Ok(Setup { sys, mrf })
}

struct Prepared {
    tables: BridgeTables,
    gamma: RateFunction,
    n_table: RadiusTable,
    candidate: CandidateMrf,
    mu_hat: f64,
    schedule: Option<DeltaSchedule>,
    delta: Option<f64>,
    beta: KlBound,
}

fn note_cert(report: &mut Report, cert: &CertReport) {
    report.margins = Margins { min: Num(cert.min_margin), mean: Num(cert.mean_margin) };
    report.skipped_nonsmooth = cert.skipped_nonsmooth;
    report.check(cert.certified, || {
        format!("decrease not certified: {} of {} probes violate", cert.violation_count, cert.probes)
    });
    for v in cert.violations.iter().take(NOTED_VIOLATIONS) {
        report.notes.push(format!("violation at x={:?}: H={} bound={}", v.state, v.hamiltonian, v.bound));
    }
}

/// Dyadic levels covering `[lo, hi]`.
fn dyadic_levels(lo: f64, hi: f64) -> Vec<f64> {
    let mut k = lo.log2().floor() as i32;
    let mut out = Vec::new();
    loop {
        let l = 2f64.powi(k);
        out.push(l);
        if l >= hi {
            return out;
        }
        k += 1;
    }
}

struct Certified {
    tables: BridgeTables,
    gamma: RateFunction,
    region: Region,
    cert: CertReport,
    mu_hat: f64,
}

/// Fitted rate, or the zero rate (with a note) when no positive rate fits.
fn fit_or_zero(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    region: Region,
    popts: &ProbeOptions,
    report: &mut Report,
) -> Result<RateFunction> {
    match fit_rate_gamma(sys, w, p0, region, None, popts) {
        Ok(g) => Ok(g),
        Err(Error::NotAnMrf { witnesses }) => {
            report.notes.push(format!("no positive rate: {} states without decrease", witnesses.len()));
            Ok(RateFunction::analytic("zero", |_| 0.0))
        }
        Err(e) => Err(e),
    }
}

/// Bridge tables, the rate fitted on the level region and its certification.
fn certify_stage(ctx: &Context, s: &Setup, report: &mut Report) -> Result<Certified> {
    let cfg = ctx.cfg;
    let (r, big_r) = cfg.radii()?;
    report.r = Num(r);
    report.big_r = Num(big_r);
    let w = s.mrf.potential.as_ref();
    let popts = ctx.probe_options();

    ctx.log(|| format!("bridge tables on [{}, {}]", r / 8.0, 2.0 * big_r));
    let tables = BridgeTables::build(w, &s.sys.target, r / 8.0, 2.0 * big_r, &ctx.bridge_options())?;
    let mu_hat = tables.mu_hat(r);
    let sigma = tables.sigma(big_r);
    let region = match cfg.region {
        Some(Region::Distance { .. }) => {
            return Err(Error::Config("this command needs a level region (by = \"level\")".into()));
        }
        Some(reg) => reg,
        None => Region::Level { lo: mu_hat / 4.0, hi: 2.0 * sigma },
    };
    let (lo, hi) = region.bounds();

    ctx.log(|| format!("fitting γ on W in [{lo}, {hi}]"));
    let gamma = fit_or_zero(&s.sys, w, cfg.p0, region, &popts, report)?;
    let cert = certify_decrease(&s.sys, w, cfg.p0, region, &gamma, None, &popts)?;
    note_cert(report, &cert);
    Ok(Certified { tables, gamma, region, cert, mu_hat })
}

/// Everything after a successful certification: radius table, sampling
/// diameter (scheduled when asked and not fixed) and the KL bound. `None`
/// when the certification failed; the report then says why.
fn prepare(ctx: &Context, s: &Setup, report: &mut Report, with_delta: bool) -> Result<Option<Prepared>> {
    let cfg = ctx.cfg;
    let c = certify_stage(ctx, s, report)?;
    if !c.cert.certified {
        return Ok(None);
    }
    let (r, big_r) = cfg.radii()?;
    let (lo, hi) = c.region.bounds();
    let w = s.mrf.potential.as_ref();
    let n_table = compact_radius_table(&s.sys, w, cfg.p0, &c.gamma, &dyadic_levels(lo, hi), &ctx.probe_options())?;
    let candidate = CandidateMrf::from_arc(s.mrf.potential.clone(), s.mrf.regularity).with_rate(c.gamma.clone());

    let (schedule, delta) = match (with_delta, cfg.partition.diameter) {
        (_, Some(d)) => (None, Some(d)),
        (false, None) => (None, None),
        (true, None) => {
            ctx.log(|| "scheduling the sampling diameter".into());
            let bopts = ctx.bridge_options();
            let sch = schedule_delta(&s.sys, &candidate, cfg.p0, r, big_r, &c.tables, &n_table, None, &bopts)?;
            let d = sch.delta;
            (Some(sch), Some(d))
        }
    };
    if let Some(d) = delta {
        report.delta = Num(d);
    }
    let beta = KlBound::comparison(&c.gamma, c.tables.clone())?;
    Ok(Some(Prepared { tables: c.tables, gamma: c.gamma, n_table, candidate, mu_hat: c.mu_hat, schedule, delta, beta }))
}

fn feedback(s: &Setup, p: &Prepared, cfg: &RunConfig) -> Feedback {
    synthesize_feedback(&s.sys, &p.candidate, cfg.p0, p.n_table.clone(), ProbeOptions::default().h_factor)
}

fn states(ctx: &Context, sys: &ControlSystem) -> Result<Vec<Vec<f64>>> {
    let z = ctx.cfg.initial_states(sys, ctx.seed);
    if z.is_empty() {
        return Err(Error::Config("no initial states given".into()));
    }
    Ok(z)
}

/// `<stem>_<i>.<ext>` next to `out`.
fn indexed_path(out: &Path, i: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{i}"),
    };
    out.with_file_name(name)
}

#[derive(Clone, Debug)]
struct RunSummary {
    stable: bool,
    bar_t: f64,
    cost: f64,
    bound: f64,
    slack: f64,
    time_bound: f64,
    kl_violation: f64,
    notes: Vec<String>,
}

fn check_run(ctx: &Context, s: &Setup, p: &Prepared, run: &SamplingRun, index: usize) -> Result<RunSummary> {
    let cfg = ctx.cfg;
    let (r, big_r) = cfg.radii()?;
    let w_z = run.w_initial();
    let mut notes = Vec::new();
    let mut stable = true;
    let mut flag = |pass: bool, msg: String| {
        if !pass {
            stable = false;
            notes.push(format!("run {index}: {msg}"));
        }
    };

    let kl = check_rr_stability(run, &p.beta, r, big_r);
    flag(kl.pass, format!("(r,R)-stability exceeded by {}", kl.max_violation));
    let cost = check_cost_bound(run, w_z, cfg.cost_weight(), r, cfg.tolerances.quad_tol);
    flag(cost.pass, format!("cost {} above bound {}", cost.cost_at_bar_t, cost.bound));
    let time = check_time_bound(run, w_z, &p.gamma, p.mu_hat, r);
    flag(time.pass, format!("settling time {} above bound {}", time.bar_t, time.bound));
    let decrease = check_interval_decrease(run, cfg.p0, &p.gamma, Some(p.mu_hat / 4.0));
    flag(decrease.pass, format!("interval decrease fails, margin {}", decrease.min_substep_margin));
    let d = run.d_initial();
    if d > 0.0 && d <= big_r {
        let transit = check_transit(run, &s.sys, big_r, &[0.25 * d, 0.5 * d])?;
        flag(transit.pass, "entered an ε-ball before the transit bound".into());
    } else if d > big_r {
        notes.push(format!("run {index}: d(z)={d} exceeds R, transit check skipped"));
    }
    if cost.vacuous {
        notes.push(format!("run {index}: vacuous cost bound"));
    }
    Ok(RunSummary {
        stable,
        bar_t: cost.bar_t,
        cost: cost.cost_at_bar_t,
        bound: cost.bound,
        slack: cost.slack,
        time_bound: time.bound,
        kl_violation: kl.max_violation,
        notes,
    })
}

/// A run that starts on the target: one sample, exit at time 0.
fn resting_run(s: &Setup, k: &Feedback, pi: &Partition, z: &[f64], horizon: f64) -> Result<SamplingRun> {
    let sample =
        Sample { t: 0.0, state: z.to_vec(), control: k.control(z)?, cost: 0.0, dist: 0.0, w: s.mrf.potential.value(z) };
    Ok(SamplingRun {
        partition: *pi,
        initial: z.to_vec(),
        horizon,
        samples: vec![sample],
        interval_starts: Vec::new(),
        exit_time: 0.0,
        termination: Termination::TargetReached,
    })
}

fn simulate_states(ctx: &Context, report: &mut Report, states: &[Vec<f64>], with_files: bool) -> Result<Artifact> {
    let cfg = ctx.cfg;
    let s = setup(cfg)?;
    let Some(p) = prepare(ctx, &s, report, true)? else {
        return Ok(Artifact::None);
    };
    let delta = p.delta.expect("diameter is set when requested");
    let k = feedback(&s, &p, cfg);
    let pi = make_partition(delta, cfg.partition.partition_mode(ctx.seed))?;
    let sim = ctx.sim();
    ctx.log(|| format!("{} run(s) at δ={delta}", states.len()));

    let results: Vec<(SamplingRun, RunSummary)> = states
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let horizon = match cfg.horizon {
                Some(h) => h,
                None => {
                    let bound = settling_time_bound(s.mrf.potential.value(z), &p.gamma, p.mu_hat);
                    (2.0 * bound.max(1.0) + delta).min(HORIZON_CAP)
                }
            };
            let run = if s.sys.distance(z) > 0.0 {
                sampling_trajectory(&s.sys, &k, s.mrf.potential.as_ref(), &pi, z, horizon, &sim)?
            } else {
                resting_run(&s, &k, &pi, z, horizon)?
            };
            let summary = check_run(ctx, &s, &p, &run, i)?;
            Ok((run, summary))
        })
        .collect::<Result<_>>()?;

    let binding = results.iter().map(|(_, r)| r).min_by(|a, b| a.slack.total_cmp(&b.slack)).expect("at least one run");
    report.bar_t_r = Num(binding.bar_t);
    report.cost_at_bar_t = Num(binding.cost);
    report.bound_w_over_p0 = Num(binding.bound);
    report.time_bound = Num(binding.time_bound);
    report.kl_violation_max = Num(results.iter().map(|(_, r)| r.kl_violation).fold(f64::NEG_INFINITY, f64::max));
    for (_, r) in &results {
        report.stable &= r.stable;
        report.notes.extend(r.notes.iter().cloned());
    }
    if let Some(sch) = &p.schedule {
        report.notes.push(format!(
            "δ = min(δ̂={}, μ̂/(4Lm)={}) with μ̂={}, σ={}",
            sch.delta_hat, sch.lipschitz_term, sch.mu_hat, sch.sigma
        ));
    }

    let artifact = match ctx.out {
        Some(out) => {
            let files = results
                .into_iter()
                .enumerate()
                .map(|(i, (run, _))| (if with_files { indexed_path(out, i) } else { out.to_path_buf() }, run))
                .collect();
            Artifact::Csv(files)
        }
        None => Artifact::None,
    };
    Ok(artifact)
}

pub fn simulate(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let sys = ctx.cfg.system.build();
    let z = states(ctx, &sys)?;
    simulate_states(ctx, report, &z[..1], false)
}

pub fn sweep(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let sys = ctx.cfg.system.build();
    let z = states(ctx, &sys)?;
    simulate_states(ctx, report, &z, true)
}

pub fn certify(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let cfg = ctx.cfg;
    let s = setup(cfg)?;
    let cert = match (cfg.region, cfg.radii()) {
        // An explicit region needs no bridge tables.
        (Some(region), Err(_)) => {
            let w = s.mrf.potential.as_ref();
            let popts = ctx.probe_options();
            let (lo, hi) = region.bounds();
            ctx.log(|| format!("fitting γ on [{lo}, {hi}]"));
            let gamma = fit_or_zero(&s.sys, w, cfg.p0, region, &popts, report)?;
            let cert = certify_decrease(&s.sys, w, cfg.p0, region, &gamma, None, &popts)?;
            note_cert(report, &cert);
            cert
        }
        _ => certify_stage(ctx, &s, report)?.cert,
    };
    Ok(Artifact::Json(to_json(&cert)))
}

pub fn bridge(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let cfg = ctx.cfg;
    let s = setup(cfg)?;
    let (r, big_r) = cfg.radii()?;
    report.r = Num(r);
    report.big_r = Num(big_r);
    let (lo, hi) = (r / 8.0, 2.0 * big_r);
    let w = s.mrf.potential.as_ref();
    let tables = BridgeTables::build(w, &s.sys.target, lo, hi, &ctx.bridge_options())?;
    let probes = distance_probes(&s.sys, w, lo, hi, SANDWICH_PROBES);
    let bad = probes
        .iter()
        .filter(|x| {
            let (d, v) = (s.sys.distance(x), w.value(x));
            v < tables.g_under(d) || v > tables.g_over(d)
        })
        .count();
    report.check(bad == 0, || format!("bridge sandwich fails at {bad} of {} probes", probes.len()));
    report.notes.push(format!("μ̂(r)={}, σ(R)={}", tables.mu_hat(r), tables.sigma(big_r)));
    Ok(Artifact::Json(to_json(&tables)))
}

#[derive(Serialize)]
struct Synthesis {
    gamma: RateTable,
    n_table: RadiusTable,
    delta: f64,
    mu_hat: f64,
    schedule: Option<DeltaSchedule>,
}

pub fn synthesize(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let s = setup(ctx.cfg)?;
    let Some(p) = prepare(ctx, &s, report, true)? else {
        return Ok(Artifact::None);
    };
    let (lo, hi) = (p.tables.under[0], p.tables.over[p.tables.over.len() - 1]);
    let out = Synthesis {
        gamma: p.gamma.to_table(lo.max(f64::MIN_POSITIVE), hi, 64),
        n_table: p.n_table,
        delta: p.delta.expect("diameter is set when requested"),
        mu_hat: p.mu_hat,
        schedule: p.schedule,
    };
    Ok(Artifact::Json(to_json(&out)))
}

pub fn euler(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let cfg = ctx.cfg;
    let diameters =
        cfg.partition.sequence.clone().ok_or_else(|| Error::Config("euler needs partition.sequence".into()))?;
    let s = setup(cfg)?;
    let z = states(ctx, &s.sys)?.swap_remove(0);
    let Some(p) = prepare(ctx, &s, report, false)? else {
        return Ok(Artifact::None);
    };
    let (r, _) = cfg.radii()?;
    let k = feedback(&s, &p, cfg);
    let opts = EulerOptions {
        horizon: cfg.horizon.unwrap_or(EulerOptions::default().horizon),
        tol: cfg.tolerances.tol_euler,
        mode: cfg.partition.partition_mode(ctx.seed),
        sim: ctx.sim(),
        ..EulerOptions::default()
    };
    let entry = move |_: f64| r;
    ctx.log(|| format!("Euler limit over {} diameters", diameters.len()));
    let el = euler_limit(&s.sys, &k, s.mrf.potential.as_ref(), &z, &diameters, Some(&entry), &opts)?;
    report.delta = Num(diameters[diameters.len() - 1]);
    report.accepted_euler = el.accepted;
    report.check(el.accepted, || "Euler limit not accepted: last gaps above tolerance".into());
    report.check(el.monotone, || "Euler gaps do not decrease with refinement".into());
    let stab = check_euler_stability(&s.sys, &el, &p.beta);
    report.kl_violation_max = Num(stab.max_violation);
    report.check(stab.pass, || format!("Euler limit exceeds β by {}", stab.max_violation));
    let cost = check_euler_cost(&el, s.mrf.potential.value(&z), cfg.cost_weight(), cfg.tolerances.tol_euler)?;
    report.cost_at_bar_t = Num(cost.sup_cost);
    report.bound_w_over_p0 = Num(cost.bound);
    report.check(cost.pass, || format!("Euler cost {} above bound {}", cost.sup_cost, cost.bound));
    let artifact = match ctx.out {
        Some(out) => Artifact::Csv(vec![(out.to_path_buf(), el.runs[el.runs.len() - 1].clone())]),
        None => Artifact::None,
    };
    Ok(artifact)
}

pub fn regularize(ctx: &Context, report: &mut Report) -> Result<Artifact> {
    let cfg = ctx.cfg;
    let s = setup(cfg)?;
    let (lo, hi) = match (cfg.region, cfg.r, cfg.big_r) {
        (Some(Region::Distance { lo, hi }), _, _) => (lo, hi),
        (None, Some(r), Some(big_r)) => (r, big_r),
        _ => return Err(Error::Config("regularize needs a distance region or both r and R".into())),
    };
    report.r = Num(lo);
    report.big_r = Num(hi);
    let ropts = cfg.regularize.unwrap_or_default();
    ctx.log(|| format!("fitting γ̃ on d in [{}, {}], then levels 1..={}", lo / 2.0, 2.0 * hi, ropts.n_max));
    let chk = check_regularization(
        &s.sys,
        s.mrf.potential.clone(),
        cfg.p0,
        lo,
        hi,
        REGULARIZE_PROBES,
        &ropts,
        &ctx.probe_options(),
    )?;
    let w_bar = &chk.w_bar;
    if let Some(f) = &w_bar.spec.failure {
        report.notes.push(format!("stopped after level {}: {f}", w_bar.achieved_n()));
    }
    for (level, (sw, psi)) in w_bar.levels().iter().zip(&chk.levels) {
        report.check(sw.violations == 0, || {
            format!("level {} sandwich fails at {} of {} probes", level.psi.n, sw.violations, sw.probes)
        });
        report.check(psi.pass, || format!("level {} Ψ clauses fail: {psi:?}", level.psi.n));
    }
    report.check(chk.above_base == 0, || format!("W̄ exceeds W at {} probes", chk.above_base));
    note_cert(report, &chk.decrease);

    let file = RegularizedFile {
        base_id: cfg.mrf.clone(),
        gamma_tilde: chk.gamma_tilde.to_table(lo / 2.0, 2.0 * hi, 64),
        spec: w_bar.spec.clone(),
        options: ropts,
    };
    Ok(Artifact::Json(to_json(&file)))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn write_artifact(artifact: &Artifact, out: Option<&Path>) -> Result<()> {
    match (artifact, out) {
        (Artifact::Json(text), Some(path)) => std::fs::write(path, text)?,
        (Artifact::Csv(files), _) => {
            for (path, run) in files {
                emit_trajectory_csv(run, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn dispatch(name: &str, ctx: &Context, report: &mut Report) -> Result<Artifact> {
    match name {
        "certify" => certify(ctx, report),
        "bridge" => bridge(ctx, report),
        "synthesize" => synthesize(ctx, report),
        "simulate" => simulate(ctx, report),
        "euler" => euler(ctx, report),
        "regularize" => regularize(ctx, report),
        "sweep" => sweep(ctx, report),
        other => Err(Error::UnknownId { kind: "command", id: other.to_string() }),
    }
}
