//! Numerical certification of Hamiltonian decrease conditions on sampled
//! regions, fitting of rate functions, and the compactification radius table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::hamiltonian;
use crate::mrf::{subgradient_at, Potential, RateFunction, Subgradient, GRADIENT_REL_TOL};
use crate::sampling;
use crate::system::ControlSystem;

const MAX_LISTED_VIOLATIONS: usize = 64;
const RATE_TILT: f64 = 1e-3;
const LEVEL_BAND: f64 = 0.05;

/// Where to probe: an annulus in `W`-values or in target distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum Region {
    Level { lo: f64, hi: f64 },
    Distance { lo: f64, hi: f64 },
}

impl Region {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Region::Level { lo, hi } | Region::Distance { lo, hi } => (lo, hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds();
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::InvalidRegion(format!("need 0 < lo <= hi < inf, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertMode {
    Mrf,
    DistanceRate,
    OmrfLocal { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Probe points per region.
    pub budget: usize,
    /// Control-grid resolution as a fraction of the compactification radius.
    pub h_factor: f64,
    /// Safety margin of fitted rates.
    pub eta: f64,
    /// Number of geometric buckets the region is stratified into.
    pub buckets: usize,
    /// Largest dyadic radius tried by the compactification table.
    pub n_max: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { budget: 2048, h_factor: 1.0 / 64.0, eta: 0.1, buckets: 16, n_max: 4096.0 }
    }
}

/// `r ↦ N(r)` as a nondecreasing step table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusTable {
    pub levels: Vec<f64>,
    pub radii: Vec<f64>,
}

impl RadiusTable {
    pub fn constant(n: f64) -> Self {
        RadiusTable { levels: vec![0.0], radii: vec![n] }
    }

    /// Radius for level `w`: the entry of the smallest tabulated level
    /// `>= w`, clamped to the table ends.
    pub fn eval(&self, w: f64) -> f64 {
        let k = self.levels.partition_point(|l| *l < w);
        self.radii[k.min(self.radii.len() - 1)]
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

/// A state where the decrease condition failed, with the offending covector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: Vec<f64>,
    pub gradient: Vec<f64>,
    pub hamiltonian: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub mode: CertMode,
    pub region: Region,
    pub p0: f64,
    pub probes: usize,
    pub gradients_evaluated: usize,
    pub skipped_nonsmooth: usize,
    /// Minimum over probes and candidates of `−H − γ`.
    pub min_margin: f64,
    /// Mean over probes of the per-probe worst margin.
    pub mean_margin: f64,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
    pub certified: bool,
}

/// Outcome at a single probe: the worst candidate margin, or `None` when
/// the subdifferential is empty there.
#[derive(Clone, Debug)]
pub(crate) struct ProbeOutcome {
    pub x: Vec<f64>,
    pub candidates: usize,
    pub worst: Option<Violation>,
    /// Smallest `−H` over the candidates.
    pub neg_h: f64,
}

impl ProbeOutcome {
    fn margin(&self) -> Option<f64> {
        self.worst.as_ref().map(|v| -v.hamiltonian - v.bound)
    }
}

/// Deterministic probes in `{lo <= W <= hi}`: Halton points in the bounding
/// cube of the `hi` sublevel set plus the potential's representatives.
pub fn level_probes(w: &dyn Potential, lo: f64, hi: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    let radius = w.sublevel_radius(hi);
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidRegion(format!("no bounding box for level {hi} (radius {radius})")));
    }
    let center = w.center();
    let inside = |x: &Vec<f64>| {
        let v = w.value(x);
        v >= lo && v <= hi
    };
    let mut out: Vec<Vec<f64>> =
        w.representatives(0.0, radius, count).into_iter().filter(|x| inside(x)).take(count / 2).collect();
    let want = count.saturating_sub(out.len());
    let mut start = 0;
    let mut found = 0;
    let batch = 4 * count.max(16);
    while found < want && start < 256 * count.max(16) {
        let pts: Vec<Vec<f64>> = (start..start + batch)
            .map(|i| {
                sampling::halton(i, center.len())
                    .iter()
                    .zip(&center)
                    .map(|(h, c)| c + radius * (2.0 * h - 1.0))
                    .collect()
            })
            .collect();
        for p in pts {
            if found < want && inside(&p) {
                out.push(p);
                found += 1;
            }
        }
        start += batch;
    }
    Ok(out)
}

/// Deterministic probes in `{lo <= d <= hi}` (annulus around the target).
pub fn distance_probes(sys: &ControlSystem, w: &dyn Potential, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    let center = sys.target.center();
    let (rl, rh) = (sys.target.enclosing_radius(lo), sys.target.enclosing_radius(hi));
    let mut out: Vec<Vec<f64>> = w
        .representatives(rl, rh, count / 4)
        .into_iter()
        .chain(sampling::shell_points(center, rl, rh, count))
        .filter(|x| {
            let d = sys.distance(x);
            d >= lo * (1.0 - 1e-12) && d <= hi * (1.0 + 1e-12)
        })
        .collect();
    out.truncate(count.max(1));
    out
}

/// Geometric bucket edges `lo = b_0 < … < b_k = hi`.
fn bucket_edges(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let k = k.max(1);
    if hi <= lo {
        return vec![lo, hi];
    }
    (0..=k).map(|i| if i == k { hi } else { lo * (hi / lo).powf(i as f64 / k as f64) }).collect()
}

fn stratified_probes(
    sys: &ControlSystem,
    w: &dyn Potential,
    region: Region,
    opts: &ProbeOptions,
) -> Result<Vec<Vec<Vec<f64>>>> {
    region.validate()?;
    let (lo, hi) = region.bounds();
    let edges = bucket_edges(lo, hi, opts.buckets);
    let per = (opts.budget / (edges.len() - 1)).max(4);
    edges
        .windows(2)
        .map(|e| match region {
            Region::Level { .. } => level_probes(w, e[0], e[1], per),
            Region::Distance { .. } => Ok(distance_probes(sys, w, e[0], e[1], per)),
        })
        .collect()
}

/// Evaluates the decrease condition at each probe against `bound(x, W(x))`.
pub(crate) fn probe_decrease(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    probes: &[Vec<f64>],
    radius: &(dyn Fn(f64) -> f64 + Sync),
    bound: &(dyn Fn(&[f64], f64) -> f64 + Sync),
    h_factor: f64,
) -> Result<Vec<ProbeOutcome>> {
    probes
        .par_iter()
        .map(|x| {
            let wx = w.value(x);
            let candidates = subgradient_at(w, x).candidates();
            let n = radius(wx);
            let b = bound(x, wx);
            let mut worst: Option<Violation> = None;
            let mut neg_h = f64::INFINITY;
            for p in &candidates {
                let hv = hamiltonian(sys, x, p0, p, n, n * h_factor)?;
                neg_h = neg_h.min(-hv.value);
                let is_worse = worst.as_ref().is_none_or(|v| hv.value > v.hamiltonian);
                if is_worse {
                    worst = Some(Violation { state: x.clone(), gradient: p.clone(), hamiltonian: hv.value, bound: b });
                }
            }
            Ok(ProbeOutcome { x: x.clone(), candidates: candidates.len(), worst, neg_h })
        })
        .collect()
}

fn assemble_report(mode: CertMode, region: Region, p0: f64, outcomes: &[ProbeOutcome]) -> CertReport {
    let mut report = CertReport {
        mode,
        region,
        p0,
        probes: outcomes.len(),
        gradients_evaluated: 0,
        skipped_nonsmooth: 0,
        min_margin: f64::INFINITY,
        mean_margin: 0.0,
        violation_count: 0,
        violations: Vec::new(),
        certified: false,
    };
    let mut sum = 0.0;
    let mut counted = 0usize;
    for o in outcomes {
        report.gradients_evaluated += o.candidates;
        let Some(m) = o.margin() else {
            report.skipped_nonsmooth += 1;
            continue;
        };
        sum += m;
        counted += 1;
        report.min_margin = report.min_margin.min(m);
        if !(m > 0.0) {
            report.violation_count += 1;
            if report.violations.len() < MAX_LISTED_VIOLATIONS {
                report.violations.push(o.worst.clone().expect("margin implies candidate"));
            }
        }
    }
    report.mean_margin = if counted > 0 { sum / counted as f64 } else { f64::NAN };
    report.certified = counted > 0 && report.min_margin > 0.0 && report.violation_count == 0;
    report
}

fn default_radius<'a>(sys: &ControlSystem, n_table: Option<&'a RadiusTable>) -> impl Fn(f64) -> f64 + Sync + 'a {
    let fallback = sys.control_set.radius_bound().unwrap_or(16.0);
    move |w| n_table.map_or(fallback, |t| t.eval(w))
}

/// Checks `H_{N(W(x))}(x, p0, p) <= −γ(W(x))` for every gradient candidate
/// `p` at probes of `region` (which must be a level region).
pub fn certify_decrease(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    region: Region,
    gamma: &RateFunction,
    n_table: Option<&RadiusTable>,
    opts: &ProbeOptions,
) -> Result<CertReport> {
    let probes: Vec<Vec<f64>> = stratified_probes(sys, w, region, opts)?.concat();
    if probes.is_empty() {
        return Err(Error::InvalidRegion("no probe points found in region".into()));
    }
    let radius = default_radius(sys, n_table);
    let outcomes = probe_decrease(sys, w, p0, &probes, &radius, &|_, wx| gamma.eval(wx), opts.h_factor)?;
    let mode = match gamma.sigma_local {
        Some(sigma) => CertMode::OmrfLocal { sigma },
        None => CertMode::Mrf,
    };
    Ok(assemble_report(mode, region, p0, &outcomes))
}

/// Checks `H(x, p0, p) <= −γ̃(d(x))` for every candidate `p`.
pub fn certify_distance_rate(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    region: Region,
    gamma_tilde: &RateFunction,
    n_table: Option<&RadiusTable>,
    opts: &ProbeOptions,
) -> Result<CertReport> {
    let probes: Vec<Vec<f64>> = stratified_probes(sys, w, region, opts)?.concat();
    if probes.is_empty() {
        return Err(Error::InvalidRegion("no probe points found in region".into()));
    }
    let radius = default_radius(sys, n_table);
    let outcomes =
        probe_decrease(sys, w, p0, &probes, &radius, &|x, _| gamma_tilde.eval(sys.distance(x)), opts.h_factor)?;
    Ok(assemble_report(CertMode::DistanceRate, region, p0, &outcomes))
}

/// Fits a strictly increasing rate below the observed `−H` per bucket of the
/// region's measure (`W` for level regions, `d` for distance regions). With
/// `sigma`, the region is cut to `W <= σ` and the rate is flagged σ-local.
pub fn fit_rate_gamma(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    region: Region,
    sigma: Option<f64>,
    opts: &ProbeOptions,
) -> Result<RateFunction> {
    let region = match (region, sigma) {
        (Region::Level { lo, hi }, Some(s)) => Region::Level { lo, hi: hi.min(s) },
        (Region::Distance { .. }, Some(_)) => {
            return Err(Error::invalid("σ-local fitting needs a level region"));
        }
        (r, None) => r,
    };
    region.validate()?;
    let (lo, hi) = region.bounds();
    let edges = bucket_edges(lo, hi, opts.buckets);
    let buckets = stratified_probes(sys, w, region, opts)?;
    let radius = default_radius(sys, None);

    let mut mins = Vec::with_capacity(buckets.len());
    let mut witnesses = Vec::new();
    for probes in &buckets {
        let outcomes = probe_decrease(sys, w, p0, probes, &radius, &|_, _| 0.0, opts.h_factor)?;
        let m = outcomes.iter().filter(|o| o.candidates > 0).map(|o| o.neg_h).fold(f64::INFINITY, f64::min);
        if !m.is_finite() {
            return Err(Error::InsufficientData(format!("no usable probe in a bucket of region [{lo}, {hi}]")));
        }
        if m <= 0.0 {
            witnesses
                .extend(outcomes.iter().filter(|o| o.candidates > 0 && o.neg_h <= 0.0).take(8).map(|o| o.x.clone()));
        }
        mins.push(m);
    }
    if !witnesses.is_empty() {
        return Err(Error::NotAnMrf { witnesses });
    }

    let k = mins.len();
    let mut gamma: Vec<f64> = mins.iter().map(|m| (1.0 - opts.eta) * m).collect();
    for i in (0..k.saturating_sub(1)).rev() {
        gamma[i] = gamma[i].min(gamma[i + 1]);
    }
    for (i, g) in gamma.iter_mut().enumerate() {
        *g *= 1.0 - RATE_TILT * (k - i) as f64 / k as f64;
    }
    // Node i sits at the top edge of bucket i, so interpolation inside a
    // bucket never exceeds that bucket's value.
    let mut rate = RateFunction::from_table(edges[1..].to_vec(), gamma)?;
    rate.sigma_local = sigma;
    Ok(rate)
}

/// Smallest dyadic radius (capped at the control set's radius) at which the
/// gridded minimum already reaches `−γ(r)` on `{W ≈ r}`, made nondecreasing.
pub fn compact_radius_table(
    sys: &ControlSystem,
    w: &dyn Potential,
    p0: f64,
    gamma: &RateFunction,
    levels: &[f64],
    opts: &ProbeOptions,
) -> Result<RadiusTable> {
    let cap = sys.control_set.radius_bound();
    let per = (opts.budget / 8).max(16);
    let mut radii = Vec::with_capacity(levels.len());
    for &r in levels {
        let probes = level_probes(w, r, r * (1.0 + LEVEL_BAND), per)?;
        if probes.is_empty() {
            return Err(Error::InvalidRegion(format!("no probes found on level {r}")));
        }
        let target = -gamma.eval(r);
        let mut chosen = None;
        let mut k = -10i32;
        loop {
            let mut n = 2f64.powi(k);
            let capped = cap.is_some_and(|c| n >= c);
            if let Some(c) = cap {
                n = n.min(c);
            }
            if n > opts.n_max {
                break;
            }
            let ok = match probe_decrease(sys, w, p0, &probes, &|_| n, &|_, _| -target, opts.h_factor) {
                Ok(outcomes) => outcomes.iter().all(|o| o.worst.as_ref().is_none_or(|v| v.hamiltonian <= target)),
                Err(Error::InfeasibleCompactification { .. }) => false,
                Err(e) => return Err(e),
            };
            if ok {
                chosen = Some(n);
                break;
            }
            if capped {
                break;
            }
            k += 1;
        }
        let Some(n) = chosen else {
            return Err(Error::CoercivityFailure { level: r, n_max: opts.n_max });
        };
        radii.push(n);
    }
    for i in 1..radii.len() {
        radii[i] = radii[i].max(radii[i - 1]);
    }
    Ok(RadiusTable { levels: levels.to_vec(), radii })
}

/// Agreement between the selection and finite differences at probes where
/// the declared subdifferential is a single gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCheck {
    pub smooth_probes: usize,
    pub max_rel_error: f64,
    pub flagged: Vec<Vec<f64>>,
}

pub fn check_selection(w: &dyn Potential, probes: &[Vec<f64>]) -> SelectionCheck {
    let mut out = SelectionCheck { smooth_probes: 0, max_rel_error: 0.0, flagged: Vec::new() };
    for x in probes {
        let Subgradient::Smooth(g) = subgradient_at(w, x) else { continue };
        let fd = crate::mrf::central_difference(&|y| w.value(y), x);
        let err = sampling::dist(&g, &fd) / sampling::norm(&fd).max(1.0);
        out.smooth_probes += 1;
        out.max_rel_error = out.max_rel_error.max(err);
        if err > GRADIENT_REL_TOL {
            out.flagged.push(x.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nhi;
    use crate::systems::{self, ScaledAbs};

    fn line_rate() -> RateFunction {
        RateFunction::analytic("w/(2(1+w))", |w| w / (2.0 * (1.0 + w)))
    }

    fn small() -> ProbeOptions {
        ProbeOptions { budget: 256, ..ProbeOptions::default() }
    }

    #[test]
    fn unit_speed_line_certifies() {
        let sys = systems::unit_speed_line(true);
        let w = ScaledAbs { scale: 2.0 };
        let region = Region::Level { lo: 0.1, hi: 10.0 };
        let rep = certify_decrease(&sys, &w, 1.0, region, &line_rate(), None, &small()).unwrap();
        assert!(rep.certified);
        let floor = 1.0 - line_rate().eval(10.0);
        assert!(rep.min_margin >= floor - 1e-12 && rep.min_margin > 0.5);
    }

    #[test]
    fn zero_selection_is_a_violation() {
        let sys = systems::unit_speed_line(true);
        let w = crate::mrf::FnPotential::new("flat-gradient", 1, |x| 2.0 * x[0].abs(), |l| l / 2.0)
            .with_gradient(|_| vec![0.0]);
        let rep =
            certify_decrease(&sys, &w, 1.0, Region::Level { lo: 0.1, hi: 1.0 }, &line_rate(), None, &small()).unwrap();
        assert!(!rep.certified);
        assert_eq!(rep.violation_count, rep.probes);
    }

    #[test]
    fn fit_gives_near_constant_rate() {
        let sys = systems::unit_speed_line(true);
        let w = ScaledAbs { scale: 2.0 };
        let region = Region::Level { lo: 0.1, hi: 10.0 };
        let rate = fit_rate_gamma(&sys, &w, 1.0, region, None, &small()).unwrap();
        let (ws, gs) = rate.nodes().unwrap();
        for g in gs {
            assert!((g - 0.9).abs() < 0.9 * 1.1e-3, "{g}");
        }
        assert!(gs.windows(2).all(|p| p[1] > p[0]));
        assert!((ws.last().unwrap() - 10.0).abs() < 1e-12);
        let rep = certify_decrease(&sys, &w, 1.0, region, &rate, None, &small()).unwrap();
        assert!(rep.certified);
        assert!(rep.min_margin >= 0.1 * 1.0 - 1e-12);
    }

    #[test]
    fn fit_rejects_non_mrf() {
        // The wrong-signed linear cost makes H = +1 - 0 > 0 for the free line.
        let sys = systems::unit_speed_line(false);
        let w = crate::mrf::FnPotential::new("bad", 1, |x| x[0].abs(), |l| l).with_gradient(|_| vec![0.0]);
        let err = fit_rate_gamma(&sys, &w, 1.0, Region::Level { lo: 0.1, hi: 1.0 }, None, &small());
        assert!(matches!(err, Err(Error::NotAnMrf { .. })));
    }

    #[test]
    fn empty_region_is_rejected() {
        let sys = systems::unit_speed_line(true);
        let w = ScaledAbs { scale: 2.0 };
        assert!(fit_rate_gamma(&sys, &w, 1.0, Region::Level { lo: 2.0, hi: 1.0 }, None, &small()).is_err());
        assert!(fit_rate_gamma(&sys, &w, 1.0, Region::Level { lo: 0.0, hi: 1.0 }, None, &small()).is_err());
    }

    #[test]
    fn radius_table_for_bounded_set_is_its_radius() {
        let sys = nhi::system(nhi::NhiLagrangian::Constant { m_l: 1.0 });
        let w = nhi::W1;
        let region = Region::Level { lo: 0.1, hi: 4.0 };
        let rate = fit_rate_gamma(&sys, &w, 0.0, region, None, &small()).unwrap();
        let table = compact_radius_table(&sys, &w, 0.0, &rate, &[0.1, 0.5, 1.0, 2.0], &small()).unwrap();
        assert_eq!(table.radii, vec![1.0; 4]);
    }

    #[test]
    fn radius_table_lq_tracks_sqrt_level() {
        let sys = systems::lq_line();
        let w = systems::square_potential();
        let rate = RateFunction::linear(0.9);
        let levels = [0.0625, 0.25, 1.0, 4.0];
        let table = compact_radius_table(&sys, &w, 1.0, &rate, &levels, &small()).unwrap();
        for (r, n) in levels.iter().zip(&table.radii) {
            assert!(*n >= 0.5 * r.sqrt() && *n <= 2.0 * r.sqrt() * 1.05f64.sqrt(), "N({r}) = {n}");
        }
        assert!(table.radii.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn distance_rate_margin_at_nhi_point() {
        let sys = nhi::system(nhi::NhiLagrangian::Constant { m_l: 1.0 });
        let probes = vec![vec![1.0, 0.0, 0.0]];
        let out = probe_decrease(&sys, &nhi::W2, 0.5, &probes, &|_| 1.0, &|_, _| 0.0, 1.0 / 64.0).unwrap();
        let h = out[0].worst.as_ref().unwrap().hamiltonian;
        assert!((h + 0.5).abs() < 1e-9, "{h}");
    }

    #[test]
    fn selection_matches_fd_for_w1() {
        let pts = level_probes(&nhi::W1, 0.2, 2.0, 200).unwrap();
        let chk = check_selection(&nhi::W1, &pts);
        assert!(chk.smooth_probes > 100);
        assert!(chk.flagged.is_empty(), "{:?}", chk.max_rel_error);
    }

    #[test]
    fn radius_table_steps_upward() {
        let t = RadiusTable { levels: vec![0.5, 1.0, 2.0], radii: vec![1.0, 2.0, 4.0] };
        assert_eq!(t.eval(0.1), 1.0);
        assert_eq!(t.eval(0.75), 2.0);
        assert_eq!(t.eval(2.0), 4.0);
        assert_eq!(t.eval(9.0), 4.0);
    }
}
