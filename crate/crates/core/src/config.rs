//! TOML experiment files.
//!
//! ```toml
//! version = 1
//!
//! [plant]
//! c = [1.0, 3.0]              # output row; its length fixes n
//! phi = "cbrt"                # cbrt | square | tanh | sin | identity | zero
//! psi = "square"
//! lipschitz = 1.0             # used only by the LMI check
//! initial_state = [0.0, 0.0]  # constant history for t <= 0 (default zero)
//!
//! [[plant.slot]]
//! delay = 0.0
//! a = [[0.0, 1.0], [-2.0, -4.0]]
//! g = [[0.0], [-2.0]]         # n×m; omitted blocks are zero
//! b = [0.0, 1.0]
//!
//! [grid]                      # optional; estimate on these delays instead
//! delays = [0.0, 1.0, 1.7, 2.3]
//! term_counts = [4, 4, 4, 4]  # optional reduced model (A, D, G, B)
//!
//! [identifier]
//! t0 = [0.0, 1.0]
//! gamma = 400.0               # Γ = γ·I everywhere, or per-slot [[identifier.gains]]
//!
//! [[identifier.known]]        # known parts per delay; omitted ones are zero
//! delay = 0.0
//! a = [[0.0, 1.0], [0.0, 0.0]]
//!
//! [[identifier.injection]]    # k = column gain (output injection) or y = n×n
//! delay = 0.0
//! k = [0.0, 2.0]
//!
//! [[input.sines]]
//! amplitude = 1.0
//! omega = 2.3
//!
//! [input.pulse]
//! amplitude = 1.0
//! period = 1.0
//! duty = 0.5
//!
//! [sim]
//! h = 0.001
//! t_end = 3000.0
//! record_stride = 100
//!
//! [lmi]
//! mode = "derived"            # or "verbatim"
//! [lmi.search]
//! max_iters = 20000
//!
//! [pe]
//! window = 1000.0
//!
//! [output]
//! dir = "out"
//! plots = true
//! ```
//!
//! Every table rejects unknown keys. Per-delay entries are matched against
//! the estimation delays (the grid if present, the plant delays otherwise).

use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::dde::{InitialHistory, SimConfig};
use crate::error::{Error, Result};
use crate::identifier::{IdentifierConfig, Injection, SlotGains};
use crate::lmi::{AssemblyMode, PsiProblem, SearchOptions};
use crate::model::{extend_to_grid, DelayGrid, Nonlinearity, PlantModel, SlotKappa, SlotMatrices, DELAY_MATCH_TOL};
use crate::signals::InputSignal;

pub const SCHEMA_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub plant: PlantSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identifier: Option<IdentifierSection>,
    #[serde(default)]
    pub input: InputSignal,
    pub sim: SimConfig,
    #[serde(default)]
    pub lmi: LmiSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pe: Option<PeSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub c: Vec<f64>,
    #[serde(default = "zero_name")]
    pub phi: String,
    /// Output dimension `l` of φ; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_dim: Option<usize>,
    #[serde(default = "zero_name")]
    pub psi: String,
    /// Output dimension `m` of ψ; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_dim: Option<usize>,
    #[serde(default = "unit")]
    pub lipschitz: f64,
    #[serde(default)]
    pub lipschitz_local_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(rename = "slot")]
    pub slots: Vec<SlotSection>,
}

fn zero_name() -> String {
    "zero".into()
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSection {
    pub delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub delays: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term_counts: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifierSection {
    pub t0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gains: Vec<GainSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub known: Vec<SlotSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injection: Vec<InjectionSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial: Vec<KappaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat_init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub delay: f64,
    pub a: Rows,
    pub d: Rows,
    pub g: Rows,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSection {
    pub delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaSection {
    pub delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmiSection {
    #[serde(default)]
    pub mode: AssemblyMode,
    #[serde(default)]
    pub search: SearchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeSection {
    /// Window length `C` (s).
    pub window: f64,
    /// Quadrature step; defaults to the recorded sample spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_stride: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub plots: bool,
}

/// A parsed and validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// The plant as written.
    pub plant: PlantModel,
    /// The plant on the estimation delays (grid-extended when a grid is given).
    pub model: PlantModel,
    pub init: InitialHistory,
    pub input: InputSignal,
    pub sim: SimConfig,
    pub identifier: Option<IdentifierConfig>,
    pub lmi: LmiSection,
    pub pe: Option<PeSection>,
    pub output: OutputSection,
}

impl Experiment {
    /// The identifier, or a config error naming the missing section.
    pub fn identifier(&self) -> Result<&IdentifierConfig> {
        self.identifier
            .as_ref()
            .ok_or_else(|| Error::Config("missing [identifier] section".into()))
    }

    /// `Ψ` data for the estimation model with the configured injection.
    pub fn psi_problem(&self) -> Result<PsiProblem> {
        let id = self.identifier()?;
        let y = id.injection.y_matrices(self.model.c());
        PsiProblem::from_plant(&self.model, y, id.t0.clone(), self.lmi.mode)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build(&self) -> Result<Experiment> {
        let p = &self.plant;
        let n = p.c.len();
        if n == 0 {
            return Err(Error::Config("plant.c must not be empty".into()));
        }
        let l = p.phi_dim.unwrap_or(n);
        let m = p.psi_dim.unwrap_or(1);
        let phi = Nonlinearity::builtin(&p.phi, n, l)?;
        let psi = Nonlinearity::builtin(&p.psi, 1, m)?;

        let mut slots: Vec<&SlotSection> = p.slots.iter().collect();
        slots.sort_by(|a, b| a.delay.total_cmp(&b.delay));
        let delays: Vec<f64> = slots.iter().map(|s| s.delay).collect();
        let matrices = slots
            .iter()
            .map(|s| slot_matrices(s, n, l, m, "plant.slot"))
            .collect::<Result<Vec<_>>>()?;
        let plant = PlantModel::new(delays, matrices, RowDVector::from_row_slice(&p.c), phi, psi, p.lipschitz)?
            .with_local_lipschitz(p.lipschitz_local_only);

        let (model, term_counts) = match &self.grid {
            Some(g) => {
                let mut grid = DelayGrid::new(g.delays.clone())?;
                if let Some(c) = g.term_counts {
                    grid = grid.with_term_counts(c)?;
                }
                (extend_to_grid(&plant, &grid)?, grid.term_counts())
            }
            None => (plant.clone(), None),
        };

        let init = match &p.initial_state {
            Some(x0) if x0.len() != n => {
                return Err(Error::Config(format!("plant.initial_state has {} entries, expected {n}", x0.len())))
            }
            Some(x0) => InitialHistory::constant(x0.clone()),
            None => InitialHistory::zero(n),
        };

        self.input.validate()?;
        self.sim.validate(model.delays())?;

        let identifier = match &self.identifier {
            Some(s) => Some(build_identifier(s, &model, term_counts)?),
            None => None,
        };

        Ok(Experiment {
            plant,
            model,
            init,
            input: self.input.clone(),
            sim: self.sim.clone(),
            identifier,
            lmi: self.lmi.clone(),
            pe: self.pe.clone(),
            output: self.output.clone(),
        })
    }
}

fn build_identifier(s: &IdentifierSection, model: &PlantModel, term_counts: Option<[usize; 4]>) -> Result<IdentifierConfig> {
    let (n, l, m) = (model.n(), model.l(), model.m());
    let delays = model.delays();
    let k = delays.len();
    if s.t0.len() != n {
        return Err(Error::Config(format!("identifier.t0 has {} entries, expected {n}", s.t0.len())));
    }

    let mut known = vec![SlotMatrices::zeros(n, l, m); k];
    for entry in &s.known {
        let i = slot_of(delays, entry.delay, "identifier.known")?;
        known[i] = slot_matrices(entry, n, l, m, "identifier.known")?;
    }

    let mut gains: Vec<Option<SlotGains>> = vec![s.gamma.map(|g| SlotGains::uniform(n, l, m, g)); k];
    for entry in &s.gains {
        let i = slot_of(delays, entry.delay, "identifier.gains")?;
        let ctx = format!("identifier.gains (delay {})", entry.delay);
        gains[i] = Some(SlotGains {
            a: matrix(&entry.a, n, n, &format!("{ctx}.a"))?,
            d: matrix(&entry.d, l, l, &format!("{ctx}.d"))?,
            g: matrix(&entry.g, m, m, &format!("{ctx}.g"))?,
            b: entry.b,
        });
    }
    let gains = gains
        .into_iter()
        .zip(delays)
        .map(|(g, d)| {
            g.ok_or_else(|| Error::Config(format!("missing gain entry for delay {d} (set identifier.gamma or add [[identifier.gains]])")))
        })
        .collect::<Result<Vec<_>>>()?;

    let full_state = s.injection.iter().any(|e| e.y.is_some());
    let injection = if full_state {
        let mut ys = vec![DMatrix::zeros(n, n); k];
        for e in &s.injection {
            let i = slot_of(delays, e.delay, "identifier.injection")?;
            match (&e.k, &e.y) {
                (None, Some(y)) => ys[i] = matrix(y, n, n, "identifier.injection.y")?,
                _ => return Err(Error::Config("identifier.injection entries must all use `k` or all use `y`".into())),
            }
        }
        Injection::FullState(ys)
    } else {
        let mut ks = vec![DVector::zeros(n); k];
        for e in &s.injection {
            let i = slot_of(delays, e.delay, "identifier.injection")?;
            let kv = e
                .k
                .as_ref()
                .ok_or_else(|| Error::Config(format!("identifier.injection (delay {}) needs `k` or `y`", e.delay)))?;
            ks[i] = vector(kv, n, "identifier.injection.k")?;
        }
        Injection::Output(ks)
    };

    let initial_kappa = if s.initial.is_empty() {
        None
    } else {
        let mut kappa = vec![SlotKappa::zeros(n, l, m); k];
        for e in &s.initial {
            let i = slot_of(delays, e.delay, "identifier.initial")?;
            let kk = &mut kappa[i];
            if let Some(a) = &e.a {
                kk.a = RowDVector::from_row_slice(vector(a, n, "identifier.initial.a")?.as_slice());
            }
            if let Some(d) = &e.d {
                kk.d = RowDVector::from_row_slice(vector(d, l, "identifier.initial.d")?.as_slice());
            }
            if let Some(g) = &e.g {
                kk.g = RowDVector::from_row_slice(vector(g, m, "identifier.initial.g")?.as_slice());
            }
            if let Some(b) = e.b {
                kk.b = b;
            }
        }
        Some(kappa)
    };

    if let Some(x) = &s.xhat_init {
        vector(x, n, "identifier.xhat_init")?;
    }

    Ok(IdentifierConfig {
        known,
        t0: DVector::from_column_slice(&s.t0),
        gains,
        injection,
        initial_kappa,
        xhat_init: s.xhat_init.clone(),
        term_counts,
    })
}

fn slot_of(delays: &[f64], delay: f64, ctx: &str) -> Result<usize> {
    delays
        .iter()
        .position(|d| (d - delay).abs() <= DELAY_MATCH_TOL)
        .ok_or_else(|| Error::Config(format!("{ctx}: delay {delay} is not one of the estimation delays {delays:?}")))
}

fn slot_matrices(s: &SlotSection, n: usize, l: usize, m: usize, ctx: &str) -> Result<SlotMatrices> {
    let ctx = format!("{ctx} (delay {})", s.delay);
    let mut out = SlotMatrices::zeros(n, l, m);
    if let Some(a) = &s.a {
        out.a = matrix(a, n, n, &format!("{ctx}.a"))?;
    }
    if let Some(d) = &s.d {
        out.d = matrix(d, n, l, &format!("{ctx}.d"))?;
    }
    if let Some(g) = &s.g {
        out.g = matrix(g, n, m, &format!("{ctx}.g"))?;
    }
    if let Some(b) = &s.b {
        out.b = vector(b, n, &format!("{ctx}.b"))?;
    }
    Ok(out)
}

fn matrix(rows: &Rows, nrows: usize, ncols: usize, ctx: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{ctx}: expected a {nrows}×{ncols} matrix given as a list of rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(v: &[f64], len: usize, ctx: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Config(format!("{ctx}: expected {len} entries, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

/// Converts matrix rows back to the list-of-rows form used in config files.
pub fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
