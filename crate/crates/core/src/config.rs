//! Pipeline configuration and stage fingerprints.
//!
//! One JSON file holds a block per stage. Each stage's fingerprint hashes its
//! own block together with the upstream fingerprint, so changing anything
//! upstream invalidates every artifact downstream of it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationMethod, ResidualScope};
use crate::error::{Error, Result};
use crate::geometry::{AtomSet, DEFAULT_ATOM_LATERAL, DEFAULT_ATOM_LONGITUDINAL, DEFAULT_DT, DEFAULT_EPSILON, DEFAULT_HORIZON};
use crate::planner::{FieldConfig, MpcConfig};
use crate::predictor::{LossConfig, TrainConfig};
use crate::scene::CoveragePolicy;
use crate::sim::TrialConfig;
use crate::synth::SyntheticConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub atom_longitudinal: f64,
    pub atom_lateral: f64,
    pub epsilon: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            atom_longitudinal: DEFAULT_ATOM_LONGITUDINAL,
            atom_lateral: DEFAULT_ATOM_LATERAL,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl GeometryConfig {
    pub fn atoms(&self) -> Result<AtomSet> {
        AtomSet::uniform(self.horizon, self.atom_longitudinal, self.atom_lateral)
    }
}

/// Where samples come from. Synthetic draws are the default; file inputs use
/// the documented CSV schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// Corpus CSV for sparsification instead of synthetic draws.
    pub corpus: Option<PathBuf>,
    /// Scene + trajectory CSVs for labelling instead of synthetic draws.
    pub scenes: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub corpus_size: usize,
    pub n1: usize,
    pub n2: usize,
    pub n_test: usize,
    pub coverage: CoveragePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            corpus: None,
            scenes: None,
            trajectories: None,
            corpus_size: 2000,
            n1: 10_000,
            n2: 5_000,
            n_test: 20_000,
            coverage: CoveragePolicy::Nearest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: (usize, usize),
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: (64, 64),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub method: CalibrationMethod,
    /// Confidence of the post-bloating bound.
    pub confidence: f64,
    /// Miscoverage level of the conformal route.
    pub epsilon: f64,
    pub scope: ResidualScope,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            method: CalibrationMethod::PostBloat,
            confidence: 0.99,
            epsilon: 0.1,
            scope: ResidualScope::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub mpc: MpcConfig,
    pub field: FieldConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            field: FieldConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub trials: usize,
    /// Inclusive range of uncontrolled vehicle counts, cycled over trials.
    pub n_uncontrolled: (usize, usize),
    pub duration: f64,
    pub replan_period: f64,
    pub ignore_rear: bool,
    pub trap_margin: f64,
    pub record_traces: bool,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            n_uncontrolled: (3, 7),
            duration: 20.0,
            replan_period: 1.0,
            ignore_rear: true,
            trap_margin: 10.0,
            record_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub planner: PlannerConfig,
    pub simulator: SimulatorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sparsify,
    Label,
    Train,
    Calibrate,
    Simulate,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Sparsify => "sparsify",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Simulate => "simulate",
        }
    }
}

fn digest<T: Serialize>(parts: &T) -> String {
    let bytes = serde_json::to_vec(parts).expect("config blocks serialise");
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Artifact(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field consistency checks.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(g.dt > 0.0 && g.horizon > 0 && g.epsilon > 0.0) {
            return Err(Error::Contract("geometry needs positive dt, T and epsilon".into()));
        }
        g.atoms()?;
        if (self.planner.mpc.dt - g.dt).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "planner dt {} differs from basis dt {}",
                self.planner.mpc.dt, g.dt
            )));
        }
        if (self.data.synthetic.dt - g.dt).abs() > 1e-12 || self.data.synthetic.horizon != g.horizon {
            return Err(Error::Contract("synthetic generator dt/T must match the geometry block".into()));
        }
        self.model.loss.validate()?;
        self.planner.mpc.validate()?;
        let c = &self.calibration;
        if !(c.confidence > 0.0 && c.confidence < 1.0 && c.epsilon > 0.0 && c.epsilon < 1.0) {
            return Err(Error::Contract("calibration confidence and epsilon must lie in (0, 1)".into()));
        }
        let s = &self.simulator;
        if s.n_uncontrolled.0 > s.n_uncontrolled.1 {
            return Err(Error::Contract("simulator vehicle range is empty".into()));
        }
        Ok(())
    }

    /// Seed of a stage, derived from the master seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let h = Sha256::digest(format!("{}:{}", stage.tag(), self.seed).as_bytes());
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    pub fn fingerprint(&self, stage: Stage) -> String {
        match stage {
            Stage::Sparsify => digest(&(stage.tag(), self.seed, &self.geometry, &self.data.synthetic, &self.data.corpus, self.data.corpus_size)),
            Stage::Label => digest(&(
                stage.tag(),
                self.fingerprint(Stage::Sparsify),
                &self.data,
            )),
            Stage::Train => digest(&(stage.tag(), self.fingerprint(Stage::Label), &self.model)),
            Stage::Calibrate => digest(&(stage.tag(), self.fingerprint(Stage::Train), &self.calibration)),
            Stage::Simulate => digest(&(
                stage.tag(),
                self.fingerprint(Stage::Calibrate),
                &self.planner,
                &self.simulator,
            )),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Trial configuration for trial `index`.
    pub fn trial_config(&self, index: usize) -> TrialConfig {
        let (lo, hi) = self.simulator.n_uncontrolled;
        let s = &self.simulator;
        TrialConfig {
            n_uncontrolled: lo + index % (hi - lo + 1),
            duration: s.duration,
            dt: self.planner.mpc.dt,
            replan_period: s.replan_period,
            ignore_rear: s.ignore_rear,
            seed: crate::sim::trial_seed(self.stage_seed(Stage::Simulate), index as u64),
            sampler: self.data.synthetic.sampler,
            field: FieldConfig {
                inflation: self.geometry.epsilon,
                ..self.planner.field
            },
            mpc: self.planner.mpc,
            record_trace: s.record_traces,
            trap_margin: s.trap_margin,
        }
    }
}

/// Fails unless `found` equals the fingerprint the current config expects.
pub fn check_fingerprint(what: &str, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Artifact(format!(
            "{what} was produced under a different configuration (fingerprint {found}, expected {expected}); rerun the upstream stage"
        )))
    }
}
