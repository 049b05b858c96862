//! Run configuration: one JSON object, unknown keys rejected, defaults filled.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nelson_core::effective::Scheme;
use nelson_core::fock::{self, FockBasis, ModeGrid};
use nelson_core::grid::SpatialGrid;
use nelson_core::C64;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Largest microscopic dimension `n_x^(dN) · dim F` a run may allocate.
pub const MICRO_BUDGET: u128 = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Effective,
    Microscopic,
    Sweep,
    Check,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Effective => "effective",
            Kind::Microscopic => "microscopic",
            Kind::Sweep => "sweep",
            Kind::Check => "check",
        }
    }
}

/// A scalar broadcast to every axis, or one value per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coord<T> {
    Scalar(T),
    Vector(Vec<T>),
}

impl<T: Copy> Coord<T> {
    fn resolve(&self, d: usize, what: &str) -> Result<Vec<T>> {
        match self {
            Coord::Scalar(v) => Ok(vec![*v; d]),
            Coord::Vector(v) if v.len() == d => Ok(v.clone()),
            Coord::Vector(v) => Err(HarnessError::Config(format!(
                "{what} has {} components, expected {d}",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    /// Centre defaults to the middle of the box.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Coord<f64>>,
        width: f64,
        #[serde(default = "zero_coord")]
        momentum: Coord<f64>,
    },
    /// `e^{ik·x}/√(L^d)` with `k = 2πj/L`.
    PlaneWave { k: Coord<i64> },
    /// JSON array of `[re, im]` grid values, renormalized on load.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSpec {
    Zero,
    /// Amplitude on the mode with lattice index `j` (`k = 2πj/L`), zero elsewhere.
    SingleMode { j: Coord<i64>, amplitude: [f64; 2] },
    /// JSON array of `[re, im]` per mode, in mode-grid order.
    File { path: PathBuf },
}

fn zero_coord() -> Coord<f64> {
    Coord::Scalar(0.0)
}

fn default_phi() -> PhiSpec {
    PhiSpec::Gaussian {
        center: None,
        width: 0.8,
        momentum: Coord::Scalar(1.0),
    }
}

fn default_alpha() -> AlphaSpec {
    AlphaSpec::Zero
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(rename = "L", default = "defaults::box_len")]
    pub box_len: f64,
    #[serde(default = "defaults::n_x")]
    pub n_x: usize,
    #[serde(rename = "Lambda", alias = "Λ", default = "defaults::cutoff")]
    pub cutoff: f64,
    /// Sweep only; replaces `Lambda` when present.
    #[serde(rename = "Lambda_list", default, skip_serializing_if = "Option::is_none")]
    pub cutoff_list: Option<Vec<f64>>,
    #[serde(default = "defaults::m_b")]
    pub m_b: f64,
    /// Auto-sized from the largest `N Σ|α₀|²` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(rename = "N_list", default, skip_serializing_if = "Option::is_none")]
    pub particle_list: Option<Vec<usize>>,
    /// Effective (SKG) step.
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    /// Outer Lanczos step of the microscopic propagation.
    #[serde(default = "defaults::micro_dt")]
    pub micro_dt: f64,
    #[serde(default = "defaults::t_final")]
    pub t_final: f64,
    #[serde(default = "defaults::snapshot_interval")]
    pub snapshot_interval: f64,
    /// Time at which the sweep compares trace distances across `N`.
    #[serde(default = "defaults::trend_time")]
    pub trend_time: f64,
    #[serde(default = "default_phi")]
    pub phi0: PhiSpec,
    #[serde(default = "default_alpha")]
    pub alpha0: AlphaSpec,
    #[serde(default = "defaults::krylov_dim")]
    pub krylov_dim: usize,
    #[serde(default = "defaults::tol")]
    pub tol: f64,
    #[serde(default = "defaults::truncation_tol")]
    pub truncation_tol: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "defaults::yes")]
    pub coupling: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Fill the `walltime_s` column; off gives byte-reproducible output.
    #[serde(default = "defaults::yes")]
    pub record_walltime: bool,
}

mod defaults {
    use super::PI;

    pub fn d() -> usize {
        1
    }
    pub fn box_len() -> f64 {
        2.0 * PI
    }
    pub fn n_x() -> usize {
        8
    }
    pub fn cutoff() -> f64 {
        1.5
    }
    pub fn m_b() -> f64 {
        1.0
    }
    pub fn dt() -> f64 {
        1e-3
    }
    pub fn micro_dt() -> f64 {
        0.01
    }
    pub fn t_final() -> f64 {
        1.0
    }
    pub fn snapshot_interval() -> f64 {
        0.1
    }
    pub fn trend_time() -> f64 {
        0.5
    }
    pub fn krylov_dim() -> usize {
        24
    }
    pub fn tol() -> f64 {
        1e-9
    }
    pub fn truncation_tol() -> f64 {
        1e-8
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Number of whole `step`s in `span`, or `None` if `step` does not divide it.
pub fn whole_steps(span: f64, step: f64) -> Option<usize> {
    let r = span / step;
    let n = r.round();
    ((r - n).abs() <= 1e-9 * n.max(1.0)).then_some(n as usize)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be > 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> Kind {
        self.kind.unwrap_or(Kind::Check)
    }

    /// Particle numbers of the run: `N_list` if given, else `[N]`.
    pub fn particle_numbers(&self) -> Vec<usize> {
        match (&self.particle_list, self.particles) {
            (Some(list), _) => list.clone(),
            (None, Some(n)) => vec![n],
            (None, None) => Vec::new(),
        }
    }

    pub fn cutoffs(&self) -> Vec<f64> {
        self.cutoff_list.clone().unwrap_or_else(|| vec![self.cutoff])
    }

    pub fn snapshots(&self) -> usize {
        whole_steps(self.t_final, self.snapshot_interval).unwrap_or(0)
    }

    /// Static checks that need no grids.
    pub fn validate(&self) -> Result<()> {
        if self.d != 1 && self.d != 3 {
            return Err(HarnessError::Config(format!("d must be 1 or 3, got {}", self.d)));
        }
        if self.n_x < 2 {
            return Err(HarnessError::Config("n_x must be ≥ 2".into()));
        }
        positive("L", self.box_len)?;
        for c in self.cutoffs() {
            positive("Lambda", c)?;
        }
        if !(self.m_b >= 0.0 && self.m_b.is_finite()) {
            return Err(HarnessError::Config(format!("m_b must be ≥ 0, got {}", self.m_b)));
        }
        positive("dt", self.dt)?;
        positive("micro_dt", self.micro_dt)?;
        positive("t_final", self.t_final)?;
        positive("snapshot_interval", self.snapshot_interval)?;
        positive("tol", self.tol)?;
        positive("truncation_tol", self.truncation_tol)?;
        if self.krylov_dim < 4 {
            return Err(HarnessError::Config(format!(
                "krylov_dim must be ≥ 4, got {}",
                self.krylov_dim
            )));
        }
        if self.workers == Some(0) {
            return Err(HarnessError::Config("workers must be ≥ 1".into()));
        }
        if self.particles == Some(0) || self.particle_list.iter().flatten().any(|&n| n == 0) {
            return Err(HarnessError::Config("N must be ≥ 1".into()));
        }
        if let PhiSpec::Gaussian { width, .. } = &self.phi0 {
            positive("phi0.width", *width)?;
        }
        let kind = self.kind();
        if kind == Kind::Check {
            return Ok(());
        }
        if whole_steps(self.t_final, self.snapshot_interval).is_none() {
            return Err(HarnessError::Config(format!(
                "snapshot_interval {} does not divide t_final {}",
                self.snapshot_interval, self.t_final
            )));
        }
        if whole_steps(self.snapshot_interval, self.dt).is_none() {
            return Err(HarnessError::Config(format!(
                "dt {} does not divide snapshot_interval {}",
                self.dt, self.snapshot_interval
            )));
        }
        if kind == Kind::Effective {
            return Ok(());
        }
        if whole_steps(self.snapshot_interval, self.micro_dt).is_none() {
            return Err(HarnessError::Config(format!(
                "micro_dt {} does not divide snapshot_interval {}",
                self.micro_dt, self.snapshot_interval
            )));
        }
        let ns = self.particle_numbers();
        match kind {
            Kind::Sweep if ns.is_empty() => {
                return Err(HarnessError::Config("sweeps need a nonempty N_list (or N)".into()))
            }
            Kind::Microscopic if ns.len() != 1 => {
                return Err(HarnessError::Config("microscopic runs need exactly one N".into()))
            }
            _ => {}
        }
        if kind == Kind::Sweep && self.snapshots() < 2 {
            return Err(HarnessError::Config(
                "sweeps need at least 3 snapshots (t_final / snapshot_interval ≥ 2)".into(),
            ));
        }
        Ok(())
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.d, self.box_len, self.n_x).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn mode_grid(&self, cutoff: f64) -> Result<ModeGrid> {
        let modes =
            ModeGrid::new(self.d, self.box_len, cutoff, self.m_b).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(if self.coupling { modes } else { modes.decoupled() })
    }

    pub fn initial_orbital(&self, grid: &SpatialGrid) -> Result<Vec<C64>> {
        match &self.phi0 {
            PhiSpec::Gaussian {
                center,
                width,
                momentum,
            } => {
                let center = match center {
                    Some(c) => c.resolve(self.d, "phi0.center")?,
                    None => vec![self.box_len / 2.0; self.d],
                };
                let momentum = momentum.resolve(self.d, "phi0.momentum")?;
                Ok(grid.gaussian(&center, *width, &momentum))
            }
            PhiSpec::PlaneWave { k } => Ok(grid.plane_wave(&k.resolve(self.d, "phi0.k")?)),
            PhiSpec::File { path } => {
                let mut f = read_complex(path)?;
                if f.len() != grid.nodes() {
                    return Err(HarnessError::Config(format!(
                        "{}: {} values for a grid of {} nodes",
                        path.display(),
                        f.len(),
                        grid.nodes()
                    )));
                }
                if grid.l2_norm_sq(&f) == 0.0 {
                    return Err(HarnessError::Config(format!("{}: orbital is zero", path.display())));
                }
                grid.normalize(&mut f);
                Ok(f)
            }
        }
    }

    pub fn initial_amplitudes(&self, modes: &ModeGrid) -> Result<Vec<C64>> {
        let mut alpha = vec![C64::new(0.0, 0.0); modes.len()];
        match &self.alpha0 {
            AlphaSpec::Zero => {}
            AlphaSpec::SingleMode { j, amplitude } => {
                let j = j.resolve(self.d, "alpha0.j")?;
                let mut lattice = [0i64; 3];
                lattice[..self.d].copy_from_slice(&j);
                let idx = modes.modes().iter().position(|m| m.lattice == lattice).ok_or_else(|| {
                    HarnessError::Config(format!(
                        "alpha0.j = {j:?} is not a mode of the grid with Lambda = {}",
                        modes.cutoff()
                    ))
                })?;
                alpha[idx] = C64::new(amplitude[0], amplitude[1]);
            }
            AlphaSpec::File { path } => {
                alpha = read_complex(path)?;
                if alpha.len() != modes.len() {
                    return Err(HarnessError::Config(format!(
                        "{}: {} amplitudes for {} modes",
                        path.display(),
                        alpha.len(),
                        modes.len()
                    )));
                }
            }
        }
        Ok(alpha)
    }
}

fn read_complex(path: &Path) -> Result<Vec<C64>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    Ok(pairs.into_iter().map(|[re, im]| C64::new(re, im)).collect())
}

/// Grids, initial data and truncation for one cutoff.
#[derive(Clone, Debug)]
pub struct Setup {
    pub cutoff: f64,
    pub grid: SpatialGrid,
    pub modes: ModeGrid,
    pub basis: FockBasis,
    pub phi0: Vec<C64>,
    pub alpha0: Vec<C64>,
}

/// Resolves grids and `n_max` for every cutoff and enforces the microscopic
/// budget. Returns the config with `n_max` filled in.
pub fn resolve(cfg: &RunConfig) -> Result<(RunConfig, Vec<Setup>)> {
    let grid = cfg.spatial_grid()?;
    let phi0 = cfg.initial_orbital(&grid)?;
    let max_n = cfg.particle_numbers().into_iter().max().unwrap_or(1);
    let mut staged = Vec::new();
    let mut n_max = cfg.n_max.unwrap_or(0);
    for cutoff in cfg.cutoffs() {
        let modes = cfg.mode_grid(cutoff)?;
        let alpha0 = cfg.initial_amplitudes(&modes)?;
        let mean: f64 = max_n as f64 * alpha0.iter().map(|a| a.norm_sqr()).sum::<f64>();
        if cfg.n_max.is_none() {
            n_max = n_max.max(fock::required_n_max(mean));
        }
        staged.push((cutoff, modes, alpha0));
    }
    let mut setups = Vec::new();
    for (cutoff, modes, alpha0) in staged {
        let basis = FockBasis::new(modes.len(), n_max).map_err(|e| HarnessError::Config(e.to_string()))?;
        if matches!(cfg.kind(), Kind::Microscopic | Kind::Sweep) {
            let dim = (grid.nodes() as u128).pow(max_n as u32) * basis.len() as u128;
            if dim > MICRO_BUDGET {
                return Err(HarnessError::Config(format!(
                    "microscopic dimension {dim} (N = {max_n}, Lambda = {cutoff}, n_max = {n_max}) exceeds the budget {MICRO_BUDGET}"
                )));
            }
        }
        setups.push(Setup {
            cutoff,
            grid: grid.clone(),
            modes,
            basis,
            phi0: phi0.clone(),
            alpha0,
        });
    }
    let mut resolved = cfg.clone();
    resolved.n_max = Some(n_max);
    Ok((resolved, setups))
}
