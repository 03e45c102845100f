//! Command-line pipeline: sparsify → label → train → calibrate → evaluate →
//! simulate → report. Each stage reads the config and the upstream artifacts
//! from the output directory, writes its own, and prints one JSON line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibration::{
    conformal_calibrate, evaluate_fnr, post_bloat, rcp_epsilon, CalibratedPredictor, CalibrationMethod, CalibrationReport,
    FnrRow,
};
use crate::config::{check_fingerprint, PipelineConfig, Stage};
use crate::error::{Error, Result};
use crate::geometry::{deviation_encode, greedy_sparsify, Trajectory};
use crate::io::{
    create, ingest_corpus, open, read_corpus, read_dataset, read_json, write_dataset, write_json, BasisArtifact,
    CalibrationArtifact, ModelArtifact,
};
use crate::predictor::{train, TrainConfig};
use crate::scene::{dataset_build, Dataset, Scene};
use crate::sim::{aggregate, run_trial, SimModel, SimulationReport, TrialOutcome};
use crate::synth::generate_synthetic;

#[derive(Debug, Parser)]
#[command(name = "setpred", version, about = "Set-valued trajectory prediction and planning pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    #[value(name = "post_bloat", alias = "post-bloat")]
    PostBloat,
    Conformal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the trajectory basis.
    Sparsify(Common),
    /// Label training, calibration and test sets against the basis.
    Label(Common),
    /// Train the scoring network.
    Train(Common),
    /// Calibrate thresholds on the calibration set.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        confidence: Option<f64>,
        /// Miscoverage level of the conformal route.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Held-out false-negative rate of the calibrated predictor.
    Evaluate(Common),
    /// Closed-loop trials.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Summary of every artifact present.
    Report(Common),
}

const BASIS: &str = "basis.json";
const TRAIN_SET: &str = "train.csv";
const CAL_SET: &str = "calibration.csv";
const TEST_SET: &str = "test.csv";
const DATASETS: &str = "datasets.json";
const MODEL: &str = "model.json";
const CALIBRATION: &str = "calibration_report.json";
const EVALUATION: &str = "evaluation.json";
const SIMULATION: &str = "simulation.json";
const SIM_COUNTS: &str = "simulation_counts.csv";
const REPORT: &str = "report.json";

/// Sidecar describing the labelled splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetsManifest {
    pub n1: usize,
    pub n2: usize,
    pub n_test: usize,
    pub m: usize,
    pub basis_fingerprint: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub fnr: FnrRow,
    pub misses: usize,
    pub mean_set_size: f64,
    pub calibration_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub report: SimulationReport,
    pub outcomes: Vec<TrialOutcome>,
    pub calibration_fingerprint: String,
    pub fingerprint: String,
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &common.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        let out = cfg.out_dir();
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn basis(&self) -> Result<(BasisArtifact, crate::geometry::TrajectoryBasis)> {
        let art: BasisArtifact = read_json(&self.path(BASIS))?;
        check_fingerprint(BASIS, &art.fingerprint, &self.cfg.fingerprint(Stage::Sparsify))?;
        let basis = art.to_basis()?;
        Ok((art, basis))
    }

    fn dataset(&self, name: &str) -> Result<Dataset> {
        let manifest: DatasetsManifest = read_json(&self.path(DATASETS))?;
        check_fingerprint(DATASETS, &manifest.fingerprint, &self.cfg.fingerprint(Stage::Label))?;
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Artifact(format!("missing artifact: expected {}", path.display())));
        }
        read_dataset(open(&path)?)
    }

    fn model(&self) -> Result<ModelArtifact> {
        let art: ModelArtifact = read_json(&self.path(MODEL))?;
        check_fingerprint(MODEL, &art.fingerprint, &self.cfg.fingerprint(Stage::Train))?;
        Ok(art)
    }

    /// Calibration settings may be overridden on the command line, so the
    /// artifact is checked against the model it was calibrated from.
    fn calibration(&self) -> Result<CalibrationArtifact> {
        let art: CalibrationArtifact = read_json(&self.path(CALIBRATION))?;
        check_fingerprint(CALIBRATION, &art.model_fingerprint, &self.cfg.fingerprint(Stage::Train))?;
        Ok(art)
    }
}

fn sparsify(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let corpus: Vec<Trajectory> = match &cfg.data.corpus {
        Some(p) => read_corpus(open(p)?, cfg.geometry.dt)?
            .iter()
            .map(|raw| deviation_encode(raw, raw.v0()))
            .collect::<Result<_>>()?,
        None => generate_synthetic(&cfg.data.synthetic, cfg.data.corpus_size, cfg.stage_seed(Stage::Sparsify))?
            .map(|s| s.observed)
            .collect(),
    };
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    if corpus[0].len() != cfg.geometry.horizon {
        return Err(Error::Data(format!(
            "corpus trajectories have {} samples but T = {}",
            corpus[0].len(),
            cfg.geometry.horizon
        )));
    }
    let basis = greedy_sparsify(&corpus, cfg.geometry.epsilon, &cfg.geometry.atoms()?)?;
    let fp = cfg.fingerprint(Stage::Sparsify);
    let path = ctx.path(BASIS);
    write_json(&path, &BasisArtifact::from_basis(&basis, corpus.len(), fp.clone()))?;
    Ok(json!({"stage": "sparsify", "corpus": corpus.len(), "m": basis.len(), "out": path, "fingerprint": fp}))
}

fn label(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let (basis_art, basis) = ctx.basis()?;
    let d = &cfg.data;
    let pairs: Vec<(Scene, Trajectory)> = match (&d.scenes, &d.trajectories) {
        (Some(s), Some(t)) => ingest_corpus(s, t, &d.synthetic.sampler.lanes(), cfg.geometry.dt)?,
        (None, None) => generate_synthetic(&d.synthetic, d.n1 + d.n2 + d.n_test, cfg.stage_seed(Stage::Label))?
            .map(|s| (s.scene, s.observed))
            .collect(),
        _ => return Err(Error::Contract("scene and trajectory files must be given together".into())),
    };
    let all = dataset_build(pairs, &basis, d.coverage)?;
    let n1 = d.n1.min(all.len());
    let (train_set, rest) = all.split_at(n1);
    let n2 = d.n2.min(rest.len());
    let (cal_set, test_set) = rest.split_at(n2);
    for (name, set) in [(TRAIN_SET, &train_set), (CAL_SET, &cal_set), (TEST_SET, &test_set)] {
        write_dataset(create(&ctx.path(name))?, set)?;
    }
    let fp = cfg.fingerprint(Stage::Label);
    let manifest = DatasetsManifest {
        n1: train_set.len(),
        n2: cal_set.len(),
        n_test: test_set.len(),
        m: basis.len(),
        basis_fingerprint: basis_art.fingerprint,
        fingerprint: fp.clone(),
    };
    write_json(&ctx.path(DATASETS), &manifest)?;
    Ok(json!({
        "stage": "label", "n1": manifest.n1, "n2": manifest.n2, "n_test": manifest.n_test,
        "counts": all.counts, "out": ctx.out, "fingerprint": fp
    }))
}

fn train_stage(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let data = ctx.dataset(TRAIN_SET)?;
    let tc = TrainConfig {
        seed: cfg.stage_seed(Stage::Train),
        ..cfg.model.train
    };
    let outcome = train(&data, cfg.model.hidden, &cfg.model.loss, &tc)?;
    let fp = cfg.fingerprint(Stage::Train);
    let final_loss = outcome.loss_history.last().copied();
    let art = ModelArtifact {
        params: outcome.params,
        loss: cfg.model.loss,
        train: tc,
        n1: data.len(),
        loss_history: outcome.loss_history,
        basis_fingerprint: cfg.fingerprint(Stage::Sparsify),
        fingerprint: fp.clone(),
    };
    let path = ctx.path(MODEL);
    write_json(&path, &art)?;
    Ok(json!({"stage": "train", "n1": art.n1, "final_loss": final_loss, "out": path, "fingerprint": fp}))
}

fn calibrate(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let cal = ctx.dataset(CAL_SET)?;
    let m = model.params.output_dim();
    let c = &cfg.calibration;
    let report = match c.method {
        CalibrationMethod::PostBloat => {
            let pb = post_bloat(&model.params, &cal, model.loss.gamma1)?;
            let bound = rcp_epsilon(c.confidence, m, cal.len())?;
            CalibrationReport {
                method: c.method,
                thresholds: pb.thresholds,
                d: None,
                weighted_d: None,
                epsilon: bound.epsilon,
                confidence: c.confidence,
                n1: model.n1,
                n2: cal.len(),
                m,
                positive_counts: pb.positive_counts,
                fnr_table: Vec::new(),
            }
        }
        CalibrationMethod::Conformal => {
            let cc = conformal_calibrate(&model.params, &cal, c.epsilon, c.scope)?;
            let positive_counts = (0..m)
                .map(|i| cal.samples.iter().filter(|s| s.positive_index() == i).count())
                .collect();
            CalibrationReport {
                method: c.method,
                thresholds: cc.thresholds(),
                d: Some(cc.d.clone()),
                weighted_d: Some(cc.weighted_d),
                epsilon: c.epsilon,
                confidence: 1.0,
                n1: model.n1,
                n2: cal.len(),
                m,
                positive_counts,
                fnr_table: Vec::new(),
            }
        }
    };
    let fp = cfg.fingerprint(Stage::Calibrate);
    let path = ctx.path(CALIBRATION);
    let summary = json!({
        "stage": "calibrate", "method": report.method, "epsilon": report.epsilon,
        "confidence": report.confidence, "n2": report.n2, "m": m, "out": path, "fingerprint": fp
    });
    write_json(
        &path,
        &CalibrationArtifact {
            report,
            model_fingerprint: model.fingerprint,
            fingerprint: fp,
        },
    )?;
    Ok(summary)
}

fn evaluate(ctx: &Ctx) -> Result<serde_json::Value> {
    let model = ctx.model()?;
    let cal = ctx.calibration()?;
    let test = ctx.dataset(TEST_SET)?;
    let est = evaluate_fnr(&model.params, &cal.report.thresholds, &test)?;
    let predictor = CalibratedPredictor::new(model.params, cal.report.thresholds.clone())?;
    let mut total = 0usize;
    for s in &test.samples {
        total += predictor.predict_set(&s.affordance.to_array())?.len();
    }
    let art = EvaluationArtifact {
        fnr: FnrRow {
            n2: cal.report.n2,
            epsilon_bound: cal.report.epsilon,
            empirical_fnr: est.rate,
        },
        misses: est.misses,
        mean_set_size: if test.is_empty() { 0.0 } else { total as f64 / test.len() as f64 },
        calibration_fingerprint: cal.fingerprint,
    };
    let path = ctx.path(EVALUATION);
    write_json(&path, &art)?;
    Ok(json!({
        "stage": "evaluate", "samples": est.samples, "fnr": est.rate, "epsilon_bound": art.fnr.epsilon_bound,
        "mean_set_size": art.mean_set_size, "out": path
    }))
}

fn simulate(ctx: &Ctx, trials: Option<usize>) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let (_, basis) = ctx.basis()?;
    let model = ctx.model()?;
    let cal = ctx.calibration()?;
    let predictor = CalibratedPredictor::new(model.params, cal.report.thresholds.clone())?;
    let sim_model = SimModel {
        predictor: &predictor,
        basis: &basis,
    };
    let n = trials.unwrap_or(cfg.simulator.trials);
    if n == 0 {
        return Err(Error::Contract("at least one trial is required".into()));
    }
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        let tc = cfg.trial_config(i);
        let o = run_trial(&tc, &sim_model)?;
        if cfg.simulator.record_traces {
            o.write_trace_csv(create(&ctx.path(&format!("traces/trial_{i:04}.csv")))?)?;
        }
        log::info!("trial {i}: {} events, completed={}", o.events.len(), o.completed);
        outcomes.push(o);
    }
    let report = aggregate(&outcomes)?;
    report.write_counts_csv(create(&ctx.path(SIM_COUNTS))?)?;
    let fp = cfg.fingerprint(Stage::Simulate);
    let summary = json!({
        "stage": "simulate", "trials": n, "frontal_side": report.frontal_side, "rear_end": report.rear_end,
        "traps": report.traps, "incomplete": report.incomplete, "out": ctx.path(SIMULATION), "fingerprint": fp
    });
    for o in &mut outcomes {
        o.trace.clear();
    }
    write_json(
        &ctx.path(SIMULATION),
        &SimulationArtifact {
            report,
            outcomes,
            calibration_fingerprint: cal.fingerprint,
            fingerprint: fp,
        },
    )?;
    Ok(summary)
}

fn report(ctx: &Ctx) -> Result<serde_json::Value> {
    fn maybe<T: serde::de::DeserializeOwned>(p: &Path) -> Result<Option<T>> {
        if p.exists() {
            read_json(p).map(Some)
        } else {
            Ok(None)
        }
    }
    let basis: Option<BasisArtifact> = maybe(&ctx.path(BASIS))?;
    let datasets: Option<DatasetsManifest> = maybe(&ctx.path(DATASETS))?;
    let model: Option<ModelArtifact> = maybe(&ctx.path(MODEL))?;
    let cal: Option<CalibrationArtifact> = maybe(&ctx.path(CALIBRATION))?;
    let eval: Option<EvaluationArtifact> = maybe(&ctx.path(EVALUATION))?;
    let sim: Option<SimulationArtifact> = maybe(&ctx.path(SIMULATION))?;
    if basis.is_none() && datasets.is_none() && model.is_none() && cal.is_none() && eval.is_none() && sim.is_none() {
        return Err(Error::Artifact(format!("no artifacts found in {}", ctx.out.display())));
    }
    let summary = json!({
        "stage": "report",
        "m": basis.as_ref().map(|b| b.bases.len()),
        "splits": datasets.as_ref().map(|d| (d.n1, d.n2, d.n_test)),
        "final_loss": model.as_ref().and_then(|m| m.loss_history.last().copied()),
        "calibration": cal.as_ref().map(|c| json!({
            "method": c.report.method, "epsilon": c.report.epsilon, "confidence": c.report.confidence, "n2": c.report.n2
        })),
        "fnr": eval.as_ref().map(|e| e.fnr),
        "simulation": sim.as_ref().map(|s| json!({
            "trials": s.report.trials, "frontal_side": s.report.frontal_side,
            "rear_end": s.report.rear_end, "traps": s.report.traps
        })),
    });
    write_json(&ctx.path(REPORT), &summary)?;
    Ok(summary)
}

fn dispatch(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Sparsify(c) => sparsify(&Ctx::new(&c)?),
        Command::Label(c) => label(&Ctx::new(&c)?),
        Command::Train(c) => train_stage(&Ctx::new(&c)?),
        Command::Calibrate {
            common,
            method,
            confidence,
            epsilon,
        } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(m) = method {
                ctx.cfg.calibration.method = match m {
                    MethodArg::PostBloat => CalibrationMethod::PostBloat,
                    MethodArg::Conformal => CalibrationMethod::Conformal,
                };
            }
            if let Some(c) = confidence {
                ctx.cfg.calibration.confidence = c;
            }
            if let Some(e) = epsilon {
                ctx.cfg.calibration.epsilon = e;
            }
            ctx.cfg.validate()?;
            calibrate(&ctx)
        }
        Command::Evaluate(c) => evaluate(&Ctx::new(&c)?),
        Command::Simulate { common, trials } => simulate(&Ctx::new(&common)?, trials),
        Command::Report(c) => report(&Ctx::new(&c)?),
    }
}

/// Runs the CLI and returns the process exit status: 0 on success, 1 on
/// invalid input or missing artifacts, 2 on runtime failure.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
