//! Class-KL envelopes `β(R, t)` for `(r, R)`-stability checks.

use std::fmt;
use std::sync::Arc;

use crate::bridge::BridgeTables;
use crate::error::{Error, Result};
use crate::mrf::RateFunction;
use crate::simulate::SamplingRun;

const LEVEL_NODES: usize = 4000;
/// Decades of `w` below the smallest tabulated over-bridge value covered
/// by the comparison-level table.
const LEVEL_DECADES: f64 = 12.0;

/// Solution of `ẇ = −γ(w)/2` tabulated through `τ(w) = ∫_w^{w_hi} 2/γ`.
#[derive(Clone, Debug)]
pub struct ComparisonLevel {
    /// `ln w` at the nodes, decreasing.
    log_w: Vec<f64>,
    /// `τ` at the nodes, increasing.
    tau: Vec<f64>,
}

impl ComparisonLevel {
    pub fn new(gamma: &RateFunction, w_lo: f64, w_hi: f64) -> Result<Self> {
        if !(w_lo > 0.0 && w_hi > w_lo && w_hi.is_finite()) {
            return Err(Error::invalid(format!("bad level range [{w_lo}, {w_hi}]")));
        }
        let (a, b) = (w_hi.ln(), w_lo.ln());
        let step = (a - b) / (LEVEL_NODES - 1) as f64;
        let integrand = |u: f64| {
            let w = u.exp();
            2.0 * w / gamma.eval(w)
        };
        let mut log_w = Vec::with_capacity(LEVEL_NODES);
        let mut tau = Vec::with_capacity(LEVEL_NODES);
        let mut acc = 0.0;
        let mut prev = integrand(a);
        log_w.push(a);
        tau.push(0.0);
        for i in 1..LEVEL_NODES {
            let u = a - step * i as f64;
            let cur = integrand(u);
            if !(cur.is_finite() && cur > 0.0) {
                return Err(Error::invalid(format!("γ must be positive and finite, fails at w={}", u.exp())));
            }
            // Simpson on each cell keeps non-identity rates accurate.
            let mid = integrand(u + step / 2.0);
            acc += step / 6.0 * (prev + 4.0 * mid + cur);
            log_w.push(u);
            tau.push(acc);
            prev = cur;
        }
        Ok(ComparisonLevel { log_w, tau })
    }

    fn tau_of(&self, w: f64) -> f64 {
        let u = w.ln();
        let n = self.log_w.len();
        let slope_at = |i: usize| (self.tau[i + 1] - self.tau[i]) / (self.log_w[i] - self.log_w[i + 1]);
        if u >= self.log_w[0] {
            return -(u - self.log_w[0]) * slope_at(0);
        }
        if u <= self.log_w[n - 1] {
            return self.tau[n - 1] + (self.log_w[n - 1] - u) * slope_at(n - 2);
        }
        let k = self.log_w.partition_point(|v| *v > u);
        let (u0, u1) = (self.log_w[k - 1], self.log_w[k]);
        self.tau[k - 1] + (u0 - u) / (u0 - u1) * (self.tau[k] - self.tau[k - 1])
    }

    /// `w(t)` with `w(0) = w0`.
    pub fn level(&self, w0: f64, t: f64) -> f64 {
        if w0 <= 0.0 {
            return 0.0;
        }
        if !w0.is_finite() {
            return f64::INFINITY;
        }
        let target = self.tau_of(w0) + t.max(0.0);
        let n = self.tau.len();
        let slope_at = |i: usize| (self.tau[i + 1] - self.tau[i]) / (self.log_w[i] - self.log_w[i + 1]);
        let u = if target <= self.tau[0] {
            self.log_w[0] - target / slope_at(0)
        } else if target >= self.tau[n - 1] {
            self.log_w[n - 1] - (target - self.tau[n - 1]) / slope_at(n - 2)
        } else {
            let k = self.tau.partition_point(|v| *v < target);
            let (t0, t1) = (self.tau[k - 1], self.tau[k]);
            self.log_w[k - 1] - (target - t0) / (t1 - t0) * (self.log_w[k - 1] - self.log_w[k])
        };
        u.exp()
    }
}

/// `β(R, t)`.
#[derive(Clone)]
pub enum KlBound {
    Zero,
    /// `ρ_inv(w(t; σ(R)))` with `ẇ = −γ(w)/2`. Decays to the first table
    /// radius rather than to 0.
    Comparison {
        tables: BridgeTables,
        level: ComparisonLevel,
    },
    /// `c R e^{−λt}`.
    Empirical {
        c: f64,
        lambda: f64,
    },
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for KlBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KlBound::Zero => f.write_str("Zero"),
            KlBound::Comparison { tables, .. } => f
                .debug_struct("Comparison")
                .field("r_min", &tables.r_min())
                .field("r_max", &tables.r_max())
                .finish_non_exhaustive(),
            KlBound::Empirical { c, lambda } => {
                f.debug_struct("Empirical").field("c", c).field("lambda", lambda).finish()
            }
            KlBound::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl KlBound {
    pub fn comparison(gamma: &RateFunction, tables: BridgeTables) -> Result<Self> {
        let w_hi = tables.over.iter().copied().fold(0.0, f64::max);
        let w_lo = tables.over[0].min(tables.under[0]).max(f64::MIN_POSITIVE) * 10f64.powf(-LEVEL_DECADES);
        let level = ComparisonLevel::new(gamma, w_lo, w_hi)?;
        Ok(KlBound::Comparison { tables, level })
    }

    pub fn eval(&self, big_r: f64, t: f64) -> f64 {
        match self {
            KlBound::Zero => 0.0,
            KlBound::Comparison { tables, level } => tables.rho_inv(level.level(tables.sigma(big_r), t)),
            KlBound::Empirical { c, lambda } => c * big_r * (-lambda * t).exp(),
            KlBound::Custom(f) => f(big_r, t),
        }
    }
}

#[derive(Clone, Debug)]
pub enum KlFit {
    Comparison { gamma: RateFunction, tables: BridgeTables },
    Empirical,
}

/// Decay ratios below this are treated as having reached the target.
const RATIO_FLOOR: f64 = 1e-9;

/// Comparison mode ignores `runs`. Empirical mode fits `c R e^{−λt}` above
/// the tail envelope `sup_{s >= t} 𝐝(x(s))/𝐝(z)` of every run.
pub fn fit_kl_beta(runs: &[SamplingRun], mode: KlFit) -> Result<KlBound> {
    match mode {
        KlFit::Comparison { gamma, tables } => KlBound::comparison(&gamma, tables),
        KlFit::Empirical => {
            let usable: Vec<&SamplingRun> = runs.iter().filter(|r| r.d_initial() > 0.0).collect();
            if usable.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "empirical β needs at least 2 runs off the target, got {}",
                    usable.len()
                )));
            }
            let envelopes: Vec<Vec<(f64, f64)>> = usable
                .iter()
                .map(|run| {
                    let d0 = run.d_initial();
                    let mut tail = 0.0f64;
                    let mut env: Vec<(f64, f64)> = run
                        .samples
                        .iter()
                        .rev()
                        .map(|s| {
                            tail = tail.max(s.dist / d0);
                            (s.t, tail)
                        })
                        .collect();
                    env.reverse();
                    env
                })
                .collect();
            let c = envelopes.iter().map(|e| e[0].1).fold(1.0, f64::max);
            let lambda = envelopes
                .iter()
                .flatten()
                .filter(|(t, e)| *t > 0.0 && *e > RATIO_FLOOR)
                .map(|(t, e)| (c / e).ln() / t)
                .fold(f64::INFINITY, f64::min);
            let lambda = if lambda.is_finite() { 0.9 * lambda.max(0.0) } else { 0.0 };
            Ok(KlBound::Empirical { c, lambda })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeOptions;
    use crate::mrf::DistancePotential;
    use crate::system::Target;

    #[test]
    fn identity_level_is_exponential() {
        let lv = ComparisonLevel::new(&RateFunction::identity(), 1e-8, 10.0).unwrap();
        for (w0, t) in [(1.0, 0.0), (1.0, 2.0), (3.7, 5.5), (0.2, 30.0)] {
            let exact = w0 * (-t / 2.0f64).exp();
            assert!((lv.level(w0, t) - exact).abs() <= 1e-9 * exact.max(1e-300), "{w0} {t}");
        }
    }

    #[test]
    fn linear_rate_level() {
        let lv = ComparisonLevel::new(&RateFunction::linear(0.5), 1e-6, 4.0).unwrap();
        let exact = 2.0 * (-0.25f64 * 3.0).exp();
        assert!((lv.level(2.0, 3.0) - exact).abs() < 1e-9);
    }

    #[test]
    fn comparison_beta_shape() {
        let t = Target::Point { center: vec![0.0, 0.0] };
        let w = DistancePotential { target: t.clone() };
        let tab = BridgeTables::build(&w, &t, 0.01, 4.0, &BridgeOptions { budget: 64, ..Default::default() }).unwrap();
        let b = KlBound::comparison(&RateFunction::identity(), tab).unwrap();
        for r in [0.5, 1.0, 2.0] {
            assert!(b.eval(r, 0.0) >= r);
            let mut prev = f64::INFINITY;
            for i in 0..50 {
                let v = b.eval(r, i as f64);
                assert!(v <= prev);
                prev = v;
            }
            // The tables carry no information below their first radius.
            assert!(prev <= 0.0105, "{prev}");
        }
        assert!(b.eval(1.0, 1.0) <= b.eval(2.0, 1.0));
    }

    #[test]
    fn empirical_needs_two_runs() {
        assert!(matches!(fit_kl_beta(&[], KlFit::Empirical), Err(Error::InsufficientData(_))));
    }
}
