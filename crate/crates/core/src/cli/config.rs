use std::path::Path;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::Region;
use crate::error::{Error, Result};
use crate::mrf::{Potential, RateFunction, RateTable, Regularity};
use crate::nhi::{self, NhiConfig, NhiLagrangian};
use crate::partition::PartitionMode;
use crate::regularize::{GammaBar, GridTable, RegularizeOptions, RegularizedMrf, RegularizedSpec};
use crate::sampling;
use crate::system::ControlSystem;
use crate::systems;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Nhi { lagrangian: NhiLagrangian },
    UnitSpeedLine { with_cost: bool },
    DecayLine { cost: f64 },
    LqLine,
}

impl SystemSpec {
    pub fn build(&self) -> ControlSystem {
        match *self {
            SystemSpec::Nhi { lagrangian } => nhi::system(lagrangian),
            SystemSpec::UnitSpeedLine { with_cost } => systems::unit_speed_line(with_cost),
            SystemSpec::DecayLine { cost } => systems::decay_line(cost),
            SystemSpec::LqLine => systems::lq_line(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    /// Fixed sampling diameter; scheduled from `(r, R)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter: Option<f64>,
    /// Refining diameters for the Euler limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<Vec<f64>>,
    #[serde(default)]
    pub mode: ModeName,
    /// Seed of the gap stream for `jittered`; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Uniform,
    Jittered,
}

impl PartitionSpec {
    pub fn partition_mode(&self, run_seed: u64) -> PartitionMode {
        match self.mode {
            ModeName::Uniform => PartitionMode::Uniform,
            ModeName::Jittered => PartitionMode::Jittered { seed: self.jitter_seed.unwrap_or(run_seed) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomStates {
    pub count: usize,
    pub d_lo: f64,
    pub d_hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStates {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<Vec<f64>>,
    /// Extra states drawn from the seeded stream with `𝐝(z) ∈ [d_lo, d_hi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomStates>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub h_ode: f64,
    pub d_tol: f64,
    pub tol_euler: f64,
    pub eps_safe: f64,
    pub eta: f64,
    pub quad_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { h_ode: 1e-2, d_tol: 1e-6, tol_euler: 1e-3, eps_safe: 0.05, eta: 0.1, quad_tol: 1e-3 }
    }
}

/// Sample counts for the probing stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Points per shell or ball in the bridge tables.
    pub bridge: usize,
    /// Probe points per certified region.
    pub probe: usize,
    /// Initial states per trial diameter in the δ schedule.
    pub schedule_runs: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { bridge: 4096, probe: 2048, schedule_runs: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// `w1`, `w2`, `abs:<scale>`, `square`, `regularized:<path>` or `table:<path>`.
    pub mrf: String,
    pub p0: f64,
    /// Weight in the cost bound `W(z)/p0`; defaults to `p0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub big_r: Option<f64>,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub initial: InitialStates,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularize: Option<RegularizeOptions>,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub seed: u64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn emit(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        for (name, v) in [
            ("h_ode", t.h_ode),
            ("d_tol", t.d_tol),
            ("tol_euler", t.tol_euler),
            ("eps_safe", t.eps_safe),
            ("eta", t.eta),
            ("quad_tol", t.quad_tol),
        ] {
            positive(name, v)?;
        }
        if t.eps_safe >= 1.0 || t.eta >= 1.0 {
            return Err(Error::Config("eps_safe and eta must be below 1".into()));
        }
        if !(self.p0 >= 0.0 && self.p0.is_finite()) {
            return Err(Error::Config(format!("p0 must be nonnegative, got {}", self.p0)));
        }
        if let Some(c) = self.cost_p0 {
            positive("cost_p0", c)?;
        }
        if let Some(r) = self.r {
            positive("r", r)?;
        }
        if let Some(big_r) = self.big_r {
            positive("R", big_r)?;
        }
        if let (Some(r), Some(big_r)) = (self.r, self.big_r) {
            if r >= big_r {
                return Err(Error::Config(format!("need r < R, got r={r}, R={big_r}")));
            }
        }
        if let Some(d) = self.partition.diameter {
            positive("partition.diameter", d)?;
        }
        if let Some(seq) = &self.partition.sequence {
            if seq.len() < 2 || seq.windows(2).any(|p| !(p[1] < p[0])) || seq.iter().any(|d| !(*d > 0.0)) {
                return Err(Error::Config("partition.sequence must be strictly decreasing and positive".into()));
            }
        }
        if let Some(h) = self.horizon {
            positive("horizon", h)?;
        }
        if let Some(rs) = &self.initial.random {
            positive("initial.random.d_lo", rs.d_lo)?;
            if !(rs.d_hi >= rs.d_lo) {
                return Err(Error::Config("initial.random needs d_lo <= d_hi".into()));
            }
        }
        let b = &self.budgets;
        if b.bridge == 0 || b.probe == 0 || b.schedule_runs == 0 {
            return Err(Error::Config("budgets must be positive".into()));
        }
        if let Some(reg) = &self.regularize {
            if reg.n_max == 0 || reg.budget == 0 {
                return Err(Error::Config("regularize.n_max and budget must be positive".into()));
            }
        }
        if let SystemSpec::Nhi { lagrangian } = self.system {
            NhiConfig { lagrangian, p0: self.p0 }.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let dim = self.system.build().state_dim;
        if let Some(z) = self.initial.states.iter().find(|z| z.len() != dim) {
            return Err(Error::Config(format!("initial state {z:?} has wrong dimension (expected {dim})")));
        }
        Ok(())
    }

    pub fn radii(&self) -> Result<(f64, f64)> {
        match (self.r, self.big_r) {
            (Some(r), Some(big_r)) => Ok((r, big_r)),
            _ => Err(Error::Config("this command needs both r and R".into())),
        }
    }

    pub fn cost_weight(&self) -> f64 {
        self.cost_p0.unwrap_or(self.p0)
    }

    /// Explicit states followed by the seeded random ones.
    pub fn initial_states(&self, sys: &ControlSystem, seed: u64) -> Vec<Vec<f64>> {
        let mut out = self.initial.states.clone();
        if let Some(rs) = &self.initial.random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let center = sys.target.center();
            for _ in 0..rs.count {
                let dir: Vec<f64> = loop {
                    let v: Vec<f64> = (0..center.len()).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                    let n = sampling::norm(&v);
                    if n > 1e-3 && n <= 1.0 {
                        break v.iter().map(|c| c / n).collect();
                    }
                };
                let d = rs.d_lo + (rs.d_hi - rs.d_lo) * rng.random::<f64>();
                let radius = sys.target.enclosing_radius(d);
                out.push(center.iter().zip(&dir).map(|(c, u)| c + radius * u).collect());
            }
        }
        out
    }
}

/// On-disk form of a regularized MRF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizedFile {
    /// MRF id of the potential that was regularized.
    pub base_id: String,
    pub gamma_tilde: RateTable,
    pub spec: RegularizedSpec,
    pub options: RegularizeOptions,
}

pub struct ResolvedMrf {
    pub potential: Arc<dyn Potential>,
    pub regularity: Regularity,
}

/// Maps an MRF id to a potential for `sys`.
pub fn resolve_mrf(id: &str, sys: &ControlSystem) -> Result<ResolvedMrf> {
    let unknown = || Error::UnknownId { kind: "mrf", id: id.to_string() };
    let is_nhi = sys.name == nhi::SYSTEM_NAME;
    let resolved = match id {
        "w1" if is_nhi => ResolvedMrf { potential: Arc::new(nhi::W1), regularity: Regularity::Semiconcave },
        "w2" if is_nhi => ResolvedMrf { potential: Arc::new(nhi::W2), regularity: Regularity::Lipschitz },
        "square" if sys.state_dim == 1 => {
            ResolvedMrf { potential: Arc::new(systems::square_potential()), regularity: Regularity::Semiconcave }
        }
        _ => {
            if let Some(scale) = id.strip_prefix("abs:") {
                let scale: f64 = scale.parse().map_err(|_| unknown())?;
                if sys.state_dim != 1 || !(scale > 0.0) {
                    return Err(unknown());
                }
                ResolvedMrf { potential: Arc::new(systems::ScaledAbs { scale }), regularity: Regularity::Lipschitz }
            } else if let Some(path) = id.strip_prefix("table:") {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read table {path}: {e}")))?;
                let table: GridTable = serde_json::from_str(&text)?;
                table.validate()?;
                if table.shape.len() != sys.state_dim {
                    return Err(Error::Config(format!("table {path} has the wrong dimension")));
                }
                ResolvedMrf { potential: Arc::new(table), regularity: Regularity::Lipschitz }
            } else if let Some(path) = id.strip_prefix("regularized:") {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))?;
                let file: RegularizedFile = serde_json::from_str(&text)?;
                let base = resolve_mrf(&file.base_id, sys)?;
                let gamma = RateFunction::from_rate_table(file.gamma_tilde)?;
                let mrf = RegularizedMrf::from_spec(base.potential, file.spec, GammaBar::new(gamma))?;
                ResolvedMrf { potential: Arc::new(mrf), regularity: Regularity::Semiconcave }
            } else {
                return Err(unknown());
            }
        }
    };
    if resolved.potential.dim() != sys.state_dim {
        return Err(unknown());
    }
    Ok(resolved)
}
