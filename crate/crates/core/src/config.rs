//! Run configuration: a single JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instanton::GmamSettings;
use crate::model::{ModelParams, DEFAULT_N_CAP};
use crate::qjmc::SwitchingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PhaseDiagram,
    Spectrum,
    Metastable,
    Ld,
    Trajectories,
    Instanton,
    Compare,
    All,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PhaseDiagram => "phase-diagram",
            Task::Spectrum => "spectrum",
            Task::Metastable => "metastable",
            Task::Ld => "ld",
            Task::Trajectories => "trajectories",
            Task::Instanton => "instanton",
            Task::Compare => "compare",
            Task::All => "all",
        }
    }
}

/// Model constants shared by every run; N and delta come from the sweep.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub rabi: f64,
    pub interaction: f64,
    pub decay: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ModelParams::standard(1, 0.0);
        Self { rabi: p.rabi, interaction: p.interaction, decay: p.decay }
    }
}

impl ModelSection {
    pub fn params(&self, n_atoms: usize, detuning: f64) -> ModelParams {
        ModelParams { n_atoms, rabi: self.rabi, detuning, interaction: self.interaction, decay: self.decay }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub n_list: Vec<usize>,
    pub delta_list: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self { n_list: vec![8, 12, 16, 20, 24], delta_list: vec![3.2, 3.4, 3.6, 3.8] }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseDiagramOptions {
    pub delta_min: f64,
    pub delta_max: f64,
    pub points: usize,
}

impl Default for PhaseDiagramOptions {
    fn default() -> Self {
        Self { delta_min: 2.0, delta_max: 5.0, points: 301 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetastableOptions {
    /// Bin half-width of the n_e histograms.
    pub half_width: f64,
}

impl Default for MetastableOptions {
    fn default() -> Self {
        Self { half_width: 0.01 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdOptions {
    /// Sizes for the counting statistics; the sweep sizes when empty.
    pub n_list: Vec<usize>,
    /// Detunings; the sweep detunings when empty.
    pub delta_list: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    pub points: usize,
    pub refine: usize,
}

impl Default for LdOptions {
    fn default() -> Self {
        Self { n_list: vec![24], delta_list: vec![2.4, 3.4], s_min: -1.0, s_max: 1.0, points: 201, refine: 5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryOptions {
    pub switching: SwitchingConfig,
    /// Length of the sample trajectory written per cell; zero disables them.
    pub sample_t_final: f64,
    /// Sampling interval of the sample trajectories.
    pub sample_every: f64,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            switching: SwitchingConfig { max_time: 2.0e5, target_waits: 20, ..Default::default() },
            sample_t_final: 500.0,
            sample_every: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstantonOptions {
    pub gmam: GmamSettings,
    /// Detunings for the barrier sweep; the sweep detunings when empty.
    pub delta_list: Vec<f64>,
}

impl Default for InstantonOptions {
    fn default() -> Self {
        Self { gmam: GmamSettings::default(), delta_list: vec![] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sweep: Sweep,
    /// Ignored by the command line, where the verb selects the task.
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub n_cap: usize,
    #[serde(default)]
    pub phase_diagram: PhaseDiagramOptions,
    #[serde(default)]
    pub metastable: MetastableOptions,
    #[serde(default)]
    pub ld: LdOptions,
    #[serde(default)]
    pub trajectories: TrajectoryOptions,
    #[serde(default)]
    pub instanton: InstantonOptions,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_cap() -> usize {
    DEFAULT_N_CAP
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            sweep: Sweep::default(),
            task: None,
            output_dir: default_out(),
            seed: 0,
            n_cap: DEFAULT_N_CAP,
            phase_diagram: PhaseDiagramOptions::default(),
            metastable: MetastableOptions::default(),
            ld: LdOptions::default(),
            trajectories: TrajectoryOptions::default(),
            instanton: InstantonOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.n_list.is_empty() || self.sweep.delta_list.is_empty() {
            return Err(Error::Config("sweep.n_list and sweep.delta_list must be nonempty".into()));
        }
        self.model.params(1, 0.0).validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(&n) = self.sweep.n_list.iter().chain(&self.ld.n_list).find(|&&n| n < 1 || n > self.n_cap) {
            return Err(Error::Config(format!("N = {n} outside [1, {}]", self.n_cap)));
        }
        if self.sweep.delta_list.iter().chain(&self.ld.delta_list).chain(&self.instanton.delta_list).any(|d| !d.is_finite()) {
            return Err(Error::Config("detunings must be finite".into()));
        }
        let pd = &self.phase_diagram;
        if pd.points < 2 || !(pd.delta_min < pd.delta_max) {
            return Err(Error::Config("phase_diagram needs delta_min < delta_max and >= 2 points".into()));
        }
        if self.ld.points < 5 || !(self.ld.s_min < 0.0 && self.ld.s_max > 0.0) {
            return Err(Error::Config("ld needs >= 5 points and s_min < 0 < s_max".into()));
        }
        let sw = &self.trajectories.switching;
        if !(sw.dt > 0.0) || sw.record_stride == 0 || !(sw.max_time > 0.0) || sw.walkers == 0 || !(sw.chunk > 0.0) {
            return Err(Error::Config("trajectories.switching: dt, max_time, chunk > 0 and walkers, record_stride >= 1".into()));
        }
        if !(self.trajectories.sample_t_final >= 0.0) || !(self.trajectories.sample_every > 0.0) {
            return Err(Error::Config("trajectories: sample_t_final >= 0 and sample_every > 0".into()));
        }
        let g = &self.instanton.gmam;
        if g.k_points < 3 || !(g.epsilon > 0.0) || g.max_iters == 0 {
            return Err(Error::Config("instanton.gmam: k_points >= 3, epsilon > 0, max_iters >= 1".into()));
        }
        Ok(())
    }

    /// Drop sizes above `max_n` from every list.
    pub fn cap_sizes(&mut self, max_n: usize) -> Result<()> {
        self.sweep.n_list.retain(|&n| n <= max_n);
        self.ld.n_list.retain(|&n| n <= max_n);
        if self.sweep.n_list.is_empty() {
            return Err(Error::Config(format!("no sweep sizes at or below --max-n {max_n}")));
        }
        Ok(())
    }

    pub fn ld_sizes(&self) -> &[usize] {
        if self.ld.n_list.is_empty() { &self.sweep.n_list } else { &self.ld.n_list }
    }

    pub fn ld_deltas(&self) -> &[f64] {
        if self.ld.delta_list.is_empty() { &self.sweep.delta_list } else { &self.ld.delta_list }
    }

    pub fn instanton_deltas(&self) -> &[f64] {
        if self.instanton.delta_list.is_empty() { &self.sweep.delta_list } else { &self.instanton.delta_list }
    }
}
