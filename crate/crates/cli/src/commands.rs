use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rmbil::datastore::{
    load_checkpoint, load_dataset, load_json, save_checkpoint, save_dataset, save_json, write_atomic, Checkpoint,
    DataError, Dataset, ModelKind,
};
use rmbil::evalkit::{
    ndi_match_check, robustness_sweep, rollout as run_rollout, EvalError, Policy, NdiMatchReport, ReferenceSource, Sweep,
};
use rmbil::models::{BcPolicy, CtrlModel, CvaeModel, DynModel, DynStructure, ModelError, Normalizer};
use rmbil::plants::{gen_demos as simulate, ExpertConfig, PlantKind, PlantSpec};
use rmbil::train::{self, EpochRecord, TrainError, TrainReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::{CliError, Common, Training};

pub const DATA: &str = "demos.rmbil-data.json";
pub const DYN: &str = "dynamics.rmbil-ckpt";
pub const CTRL: &str = "controller.rmbil-ckpt";
pub const ROBUST: &str = "robust.rmbil-ckpt";
pub const CVAE: &str = "cvae.rmbil-ckpt";
pub const BC: &str = "bc.rmbil-ckpt";
pub const TRACE: &str = "rollout.csv";
pub const EVAL: &str = "evaluate.rmbil-report.json";
pub const FIG3: &str = "fig3.csv";
pub const FIG4: &str = "fig4.csv";

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::new("data", e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::new("model", e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::new("eval", e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::PhaseOrder(_) => "phase-order",
            TrainError::Config(_) => "usage",
            TrainError::Diverged { .. } => "diverged",
            _ => "train",
        };
        CliError::new(kind, e.to_string())
    }
}

fn plant_of(data: &Dataset) -> Result<(PlantKind, PlantSpec), CliError> {
    let kind: PlantKind = data.manifest.plant.parse().map_err(|e: rmbil::plants::PlantError| CliError::new("data", e.to_string()))?;
    Ok((kind, PlantSpec::of(kind)))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))
}

fn load_data(out: &Path) -> Result<Dataset, CliError> {
    let path = out.join(DATA);
    if !path.exists() {
        return Err(CliError::new("missing-input", format!("{} not found; run gen-demos first", path.display())));
    }
    Ok(load_dataset(&path)?)
}

fn load_ckpt(out: &Path, name: &str, kind: ModelKind, producer: &str) -> Result<Checkpoint, CliError> {
    let path = out.join(name);
    if !path.exists() {
        return Err(CliError::new(
            "phase-order",
            format!("{} not found; run {producer} first", path.display()),
        ));
    }
    Ok(load_checkpoint(&path, Some(kind))?)
}

fn optional_ckpt(out: &Path, name: &str, kind: ModelKind) -> Result<Option<Checkpoint>, CliError> {
    let path = out.join(name);
    if path.exists() {
        Ok(Some(load_checkpoint(&path, Some(kind))?))
    } else {
        Ok(None)
    }
}

/// Config for a command that reads the dataset in `--out`.
fn config_for(command: &str, common: &Common, data: &Dataset) -> Result<(RunConfig, PlantSpec), CliError> {
    let (kind, spec) = plant_of(data)?;
    let cfg = RunConfig::new(command, kind, &common.preset, common.seed, data.manifest.expert.clone(), &common.set)?;
    Ok((cfg, spec))
}

fn training_data(a: &Training, command: &str) -> Result<(Dataset, RunConfig), CliError> {
    prepare_out(&a.common.out)?;
    let full = load_data(&a.common.out)?;
    let (mut cfg, _) = config_for(command, &a.common, &full)?;
    cfg.subset = a.subset;
    let data = match a.subset {
        Some(k) => full.subset(k)?,
        None => full,
    };
    Ok((data, cfg))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::io(e.to_string())
}

/// CSV text whose first line is `# config: <json>`.
fn csv_with_config(config: &Value, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut bytes = format!("# config: {}\n", serde_json::to_string(config).expect("json")).into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    bytes.extend(w.into_inner().map_err(|e| CliError::io(e.to_string()))?);
    Ok(bytes)
}

/// Writes a CSV artifact and reads it back.
fn write_csv(path: &Path, bytes: &[u8], rows: usize) -> Result<(), CliError> {
    write_atomic(path, bytes)?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let read = r.records().collect::<Result<Vec<_>, _>>().map_err(csv_err)?.len();
    if read != rows {
        return Err(CliError::io(format!("{}: wrote {rows} rows, read back {read}", path.display())));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_loss(out: &Path, name: &str, config: &Value, history: &[EpochRecord]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.phase.name().to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
                opt(r.reconstruction),
                opt(r.kl),
            ]
        })
        .collect();
    let n = rows.len();
    let bytes = csv_with_config(config, &["epoch", "phase", "loss", "lr", "reconstruction", "kl"], rows)?;
    write_csv(&out.join(format!("{name}_loss.csv")), &bytes, n)
}

fn write_ckpt(out: &Path, name: &str, ckpt: &Checkpoint) -> Result<(), CliError> {
    let path = out.join(name);
    save_checkpoint(&path, ckpt)?;
    let back = load_checkpoint(&path, Some(ckpt.header.kind))?;
    if &back != ckpt {
        return Err(CliError::io(format!("{}: read-back differs", path.display())));
    }
    Ok(())
}

fn summarize(what: &str, r: &TrainReport) {
    println!(
        "{what}: epochs {} final {} held-out {} converged {}",
        r.history.len(),
        opt(r.final_loss()),
        opt(r.heldout_loss),
        r.converged
    );
}

pub fn gen_demos(common: &Common, plant: &str, n: usize, t: usize) -> Result<(), CliError> {
    prepare_out(&common.out)?;
    let kind: PlantKind = plant.parse().map_err(|e: rmbil::plants::PlantError| CliError::usage(e.to_string()))?;
    let cfg = RunConfig::new("gen-demos", kind, &common.preset, common.seed, ExpertConfig::for_plant(kind), &common.set)?;
    let mut data = simulate(&PlantSpec::of(kind), &cfg.expert, n, t, common.seed)
        .map_err(|e| CliError::new("plant", e.to_string()))?;
    data.manifest.config = cfg.echo();
    let path = common.out.join(DATA);
    save_dataset(&path, &data)?;
    if load_dataset(&path)? != data {
        return Err(CliError::io(format!("{}: read-back differs", path.display())));
    }
    println!(
        "{}: {} trajectories x {} samples, expert rms {:.5}, redrawn {}",
        path.display(),
        n,
        t,
        data.manifest.expert_rms,
        data.manifest.regenerated
    );
    Ok(())
}

pub fn train_dynamics(a: &Training) -> Result<(), CliError> {
    let (data, cfg) = training_data(a, "train-dynamics")?;
    let mut dm = DynModel::new(
        DynStructure::Affine,
        Normalizer::from_dataset(&data),
        &cfg.train.dyn_hidden,
        cfg.train.seed,
    )?;
    let rep = train::train_dynamics(&mut dm, &data, &cfg.train)?;
    let echo = cfg.echo();
    write_ckpt(&a.common.out, DYN, &dm.to_checkpoint(echo.clone()))?;
    write_loss(&a.common.out, "dynamics", &echo, &rep.history)?;
    summarize("dynamics", &rep);
    Ok(())
}

pub fn train_controller(a: &Training) -> Result<(), CliError> {
    let (data, cfg) = training_data(a, "train-controller")?;
    let dm = DynModel::from_checkpoint(&load_ckpt(&a.common.out, DYN, ModelKind::Dyn, "train-dynamics")?)?;
    let mut cm = CtrlModel::new(dm.norm.clone(), &cfg.train.ctrl_hidden, cfg.train.train_gain, cfg.train.seed + 1)?;
    let rep = train::train_controller(&dm, &mut cm, &data, &cfg.train)?;
    let echo = cfg.echo();
    write_ckpt(&a.common.out, CTRL, &cm.to_checkpoint(echo.clone()))?;
    write_loss(&a.common.out, "controller", &echo, &rep.history)?;
    summarize("controller", &rep);
    Ok(())
}

pub fn refine_robust(a: &Training) -> Result<(), CliError> {
    let (data, cfg) = training_data(a, "refine-robust")?;
    let dm = DynModel::from_checkpoint(&load_ckpt(&a.common.out, DYN, ModelKind::Dyn, "train-dynamics")?)?;
    let mut cm = CtrlModel::from_checkpoint(&load_ckpt(&a.common.out, CTRL, ModelKind::Ctrl, "train-controller")?)?;
    let rep = train::refine_robust(&dm, &mut cm, &data, &cfg.train)?;
    let echo = cfg.echo();
    write_ckpt(&a.common.out, ROBUST, &cm.to_checkpoint(echo.clone()))?;
    write_loss(&a.common.out, "robust", &echo, &rep.history)?;
    summarize("robust", &rep);
    Ok(())
}

pub fn train_cvae(a: &Training) -> Result<(), CliError> {
    let (data, cfg) = training_data(a, "train-cvae")?;
    let mut cv = CvaeModel::new(
        Normalizer::from_dataset(&data),
        &cfg.train.cvae_hidden,
        cfg.train.latent_dim,
        cfg.train.seed + 2,
    )?;
    let rep = train::train_cvae(&mut cv, &data, &cfg.train)?;
    let echo = cfg.echo();
    write_ckpt(&a.common.out, CVAE, &cv.to_checkpoint(echo.clone()))?;
    write_loss(&a.common.out, "cvae", &echo, &rep.history)?;
    summarize("cvae", &rep);
    Ok(())
}

fn reference_source(name: Option<&str>, default: ReferenceSource) -> Result<ReferenceSource, CliError> {
    match name {
        None => Ok(default),
        Some("replay") => Ok(ReferenceSource::Replay),
        Some("cvae") => Ok(ReferenceSource::Cvae),
        Some(other) => Err(CliError::usage(format!("unknown reference {other:?} (replay, cvae)"))),
    }
}

/// Models available in `--out` for evaluation.
struct Trained {
    dm: DynModel,
    cm: CtrlModel,
    robust: Option<CtrlModel>,
    cv: Option<CvaeModel>,
    bc: Option<BcPolicy>,
    /// Demonstrations the controller was trained on.
    demos: usize,
}

fn load_trained(out: &Path, data: &Dataset) -> Result<Trained, CliError> {
    let dm = DynModel::from_checkpoint(&load_ckpt(out, DYN, ModelKind::Dyn, "train-dynamics")?)?;
    let ckpt = load_ckpt(out, CTRL, ModelKind::Ctrl, "train-controller")?;
    let demos = ckpt.header.config["subset"].as_u64().map(|k| k as usize).unwrap_or(data.trajectories.len());
    let cm = CtrlModel::from_checkpoint(&ckpt)?;
    let robust = optional_ckpt(out, ROBUST, ModelKind::Ctrl)?.map(|c| CtrlModel::from_checkpoint(&c)).transpose()?;
    let cv = optional_ckpt(out, CVAE, ModelKind::Cvae)?.map(|c| CvaeModel::from_checkpoint(&c)).transpose()?;
    let bc = optional_ckpt(out, BC, ModelKind::Bc)?.map(|c| BcPolicy::from_checkpoint(&c)).transpose()?;
    Ok(Trained {
        dm,
        cm,
        robust,
        cv,
        bc,
        demos,
    })
}

pub fn rollout(
    common: &Common,
    controller: &str,
    reference: Option<&str>,
    gain: Option<f64>,
    disturbance: &str,
) -> Result<(), CliError> {
    prepare_out(&common.out)?;
    let data = load_data(&common.out)?;
    let (mut cfg, spec) = config_for("rollout", common, &data)?;
    cfg.rollout.reference = reference_source(reference, cfg.rollout.reference)?;
    cfg.rollout.gain = gain.unwrap_or(cfg.rollout.gain);
    cfg.rollout.disturbance = cfg.disturbances.get(disturbance, spec.m)?;
    cfg.rollout.validate()?;
    let needs_models = !matches!(controller, "oracle" | "expert" | "random");
    let models = if needs_models || cfg.rollout.reference == ReferenceSource::Cvae {
        Some(load_trained(&common.out, &data)?)
    } else {
        None
    };
    let m = models.as_ref();
    let policy = match controller {
        "oracle" => Policy::Oracle,
        "expert" => Policy::Expert,
        "random" => Policy::Random,
        "learned" => Policy::Learned(&m.expect("loaded").cm),
        "model-ndi" | "model_ndi" => Policy::ModelNdi(&m.expect("loaded").dm),
        "robust" => Policy::Learned(
            m.and_then(|t| t.robust.as_ref())
                .ok_or_else(|| CliError::new("phase-order", format!("{ROBUST} not found; run refine-robust first")))?,
        ),
        "bc" => Policy::Bc(
            m.and_then(|t| t.bc.as_ref())
                .ok_or_else(|| CliError::new("phase-order", format!("{BC} not found; run evaluate first")))?,
        ),
        other => return Err(CliError::usage(format!("unknown controller {other:?}"))),
    };
    let cv = m.and_then(|t| t.cv.as_ref());
    if cfg.rollout.reference == ReferenceSource::Cvae && cv.is_none() {
        return Err(CliError::new("phase-order", format!("{CVAE} not found; run train-cvae first")));
    }
    let r = run_rollout(&spec, &data, policy, cv, &cfg.rollout)?;
    let text = r.trace_csv()?;
    let mut bytes = format!("# config: {}\n", serde_json::to_string(&cfg.echo()).expect("json")).into_bytes();
    bytes.extend(text.into_bytes());
    write_csv(&common.out.join(TRACE), &bytes, r.completed() + 1)?;
    println!(
        "{controller}: reward {:.3} over {} steps, rms {:.5}, terminated {}",
        r.total_reward(),
        r.completed(),
        r.rms(),
        r.terminated
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub config: RunConfig,
    pub demos: usize,
    pub sweep: Sweep,
    pub ndi_match: BTreeMap<String, NdiMatchReport>,
}

pub fn evaluate(
    common: &Common,
    gains: &[f64],
    episodes: Option<usize>,
    disturbances: &[String],
    reference: Option<&str>,
) -> Result<(), CliError> {
    prepare_out(&common.out)?;
    let data = load_data(&common.out)?;
    let (mut cfg, spec) = config_for("evaluate", common, &data)?;
    cfg.rollout.reference = reference_source(reference, cfg.rollout.reference)?;
    cfg.rollout.episodes = episodes.unwrap_or(cfg.rollout.episodes);
    cfg.rollout.validate()?;
    if gains.is_empty() || disturbances.is_empty() {
        return Err(CliError::usage("need at least one gain and one disturbance"));
    }
    let mut t = load_trained(&common.out, &data)?;
    if cfg.rollout.reference == ReferenceSource::Cvae && t.cv.is_none() {
        return Err(CliError::new("phase-order", format!("{CVAE} not found; run train-cvae first")));
    }
    if t.bc.is_none() {
        let bc_data = data.subset(t.demos)?;
        let mut bc = BcPolicy::new(Normalizer::from_dataset(&bc_data), &cfg.train.ctrl_hidden, cfg.train.seed + 3)?;
        let rep = train::train_bc(&mut bc, &bc_data, &cfg.train)?;
        let echo = RunConfig {
            subset: Some(t.demos),
            ..cfg.clone()
        }
        .echo();
        write_ckpt(&common.out, BC, &bc.to_checkpoint(echo.clone()))?;
        write_loss(&common.out, "bc", &echo, &rep.history)?;
        summarize("bc", &rep);
        t.bc = Some(bc);
    }
    let mut ctrls = vec![("nominal".to_string(), Policy::Learned(&t.cm))];
    if let Some(r) = &t.robust {
        ctrls.push(("robust".to_string(), Policy::Learned(r)));
    }
    ctrls.push(("bc".to_string(), Policy::Bc(t.bc.as_ref().expect("trained above"))));
    ctrls.push(("oracle".to_string(), Policy::Oracle));
    ctrls.push(("model_ndi".to_string(), Policy::ModelNdi(&t.dm)));
    let dists = disturbances
        .iter()
        .map(|d| Ok((d.clone(), cfg.disturbances.get(d, spec.m)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let sweep = robustness_sweep(&spec, &data, &ctrls, t.cv.as_ref(), &dists, gains, &cfg.rollout)?;
    let mut ndi_match = BTreeMap::new();
    ndi_match.insert(
        "nominal".to_string(),
        ndi_match_check(Policy::Learned(&t.cm), Some(&t.dm), &spec, &data, 1000, cfg.seed)?,
    );
    if let Some(r) = &t.robust {
        ndi_match.insert(
            "robust".to_string(),
            ndi_match_check(Policy::Learned(r), Some(&t.dm), &spec, &data, 1000, cfg.seed)?,
        );
    }
    for c in &sweep.cells {
        match &c.report {
            Some(r) => println!(
                "{:<12} K={:<6} {:<10} score {:.3} ± {:.3} [{:.3}, {:.3}] rms median {:.5}",
                c.disturbance, c.gain, c.controller, r.score.mean, r.score.std, r.score.min, r.score.max, r.rms.median
            ),
            None => println!(
                "{:<12} K={:<6} {:<10} failed: {}",
                c.disturbance,
                c.gain,
                c.controller,
                c.error.as_deref().unwrap_or("")
            ),
        }
    }
    let report = EvaluateReport {
        config: cfg,
        demos: t.demos,
        sweep,
        ndi_match,
    };
    let path = common.out.join(EVAL);
    save_json(&path, &report)?;
    let back: EvaluateReport = load_json(&path)?;
    if serde_json::to_value(&back).ok() != serde_json::to_value(&report).ok() {
        return Err(CliError::io(format!("{}: read-back differs", path.display())));
    }
    Ok(())
}

pub fn report(common: &Common, runs: &[PathBuf]) -> Result<(), CliError> {
    prepare_out(&common.out)?;
    let dirs: Vec<PathBuf> = if runs.is_empty() { vec![common.out.clone()] } else { runs.to_vec() };
    let mut reports = Vec::new();
    for d in &dirs {
        let path = d.join(EVAL);
        if !path.exists() {
            return Err(CliError::new("missing-input", format!("{} not found; run evaluate first", path.display())));
        }
        let r: EvaluateReport = load_json(&path)?;
        reports.push(r);
    }
    reports.sort_by_key(|r| r.demos);
    let echo = serde_json::json!({
        "command": "report",
        "runs": runs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
        "configs": reports.iter().map(|r| serde_json::to_value(&r.config).expect("json")).collect::<Vec<_>>(),
    });
    let mut fig3 = Vec::new();
    let mut fig4 = Vec::new();
    for r in &reports {
        for c in &r.sweep.cells {
            let Some(e) = &c.report else { continue };
            let s = &e.score;
            let base = vec![r.sweep.plant.clone(), r.demos.to_string(), c.disturbance.clone(), c.gain.to_string(), c.controller.clone()];
            let stats = [s.mean, s.std, s.min, s.max, s.median].map(|v| v.to_string());
            fig3.push(base.iter().cloned().chain(stats.iter().cloned()).collect::<Vec<_>>());
            let mut row: Vec<String> = base.into_iter().chain(stats).collect();
            row.push(e.rms.median.to_string());
            row.push(e.terminated.to_string());
            fig4.push(row);
        }
    }
    let (n3, n4) = (fig3.len(), fig4.len());
    let head = ["plant", "demos", "disturbance", "gain", "controller", "mean", "std", "min", "max", "median"];
    write_csv(&common.out.join(FIG3), &csv_with_config(&echo, &head, fig3)?, n3)?;
    let mut head4 = head.to_vec();
    head4.extend(["rms_median", "terminated"]);
    write_csv(&common.out.join(FIG4), &csv_with_config(&echo, &head4, fig4)?, n4)?;
    println!("{} runs, {} cells", reports.len(), n4);
    Ok(())
}
