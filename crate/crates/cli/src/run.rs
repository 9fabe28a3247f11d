//! Training, evaluation, and learning-curve commands.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use absa_core::baselines::{subsample_curve, BaselineError, MetricsRecord};
use absa_core::finetune::{
    evaluate_checkpoint, run_stage, sha256_json, Checkpoint, ProvenanceEntry, StageData, StageKind,
    StageMetrics, StagePlan, FORMAT_VERSION,
};
use absa_core::model::HeadSpec;
use absa_core::text::{AspectHierarchy, InputField};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, Target};
use crate::data::{self, hash_file, InputFile};
use crate::error::{finetune_code, CliError, CliResult};

pub fn artifact_version() -> String {
    format!(
        "absa {} (checkpoint format {FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainCommand {
    Pretrain,
    FinetuneLm,
    FinetuneAux,
    TrainClassifier,
    TrainRegressor,
}

impl TrainCommand {
    pub fn cli_name(self) -> &'static str {
        match self {
            TrainCommand::Pretrain => "pretrain",
            TrainCommand::FinetuneLm => "finetune-lm",
            TrainCommand::FinetuneAux => "finetune-aux",
            TrainCommand::TrainClassifier => "train-classifier",
            TrainCommand::TrainRegressor => "train-regressor",
        }
    }

    fn kind(self) -> StageKind {
        match self {
            TrainCommand::Pretrain => StageKind::LmPretrain,
            TrainCommand::FinetuneLm => StageKind::LmFinetune,
            TrainCommand::FinetuneAux => StageKind::AuxClassify,
            TrainCommand::TrainClassifier => StageKind::TargetClassify,
            TrainCommand::TrainRegressor => StageKind::TargetRegress,
        }
    }
}

fn default_target(kind: StageKind) -> Option<Target> {
    match kind {
        StageKind::LmPretrain | StageKind::LmFinetune => None,
        StageKind::AuxClassify => Some(Target::Position),
        StageKind::TargetClassify => Some(Target::AspectL2),
        StageKind::TargetRegress => Some(Target::Sentiment),
    }
}

/// The configured target, checked against what the stage kind can learn.
fn task_target(cfg: &RunConfig, kind: StageKind) -> CliResult<Option<Target>> {
    let Some(default) = default_target(kind) else {
        if let Some(t) = cfg.data.target {
            log::warn!(
                "data.target = {} is ignored by a language-model stage",
                t.name()
            );
        }
        return Ok(None);
    };
    let target = cfg.data.target.unwrap_or(default);
    if target.is_regression() != (kind == StageKind::TargetRegress) {
        return Err(CliError::config(format!(
            "target {} cannot be learned by a {} stage",
            target.name(),
            kind.name()
        )));
    }
    Ok(Some(target))
}

fn plan_for(cfg: &RunConfig, kind: StageKind, target: Option<Target>) -> StagePlan {
    let name = cfg.name.clone().unwrap_or_else(|| match kind {
        StageKind::LmPretrain => "pretrain".into(),
        StageKind::LmFinetune => "lm_finetune".into(),
        _ => target.map_or("task", Target::name).into(),
    });
    StagePlan {
        name,
        kind,
        seed: cfg.seed,
        head: cfg.head.clone(),
        encoder: cfg.encoder.clone(),
        vocab: cfg.vocab.clone(),
        train: cfg.train.clone(),
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| {
        CliError::data(
            anyhow::Error::new(e).context(format!("cannot load checkpoint {}", path.display())),
        )
    })
}

fn input_checkpoint(cfg: &RunConfig) -> CliResult<Option<(Checkpoint, InputFile)>> {
    cfg.input_checkpoint
        .as_deref()
        .map(|p| {
            let cp = load_checkpoint(p)?;
            Ok((cp, hash_file("input_checkpoint", p)?))
        })
        .transpose()
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| {
            CliError::internal(anyhow::Error::new(e).context(format!("writing {}", path.display())))
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::internal)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::internal(anyhow::Error::new(e).context(format!("creating {}", dir.display())))
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Audit record for one command, written before the work starts and
/// rewritten when it ends.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub status: RunStatus,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<StagePlan>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<InputFile>,
    /// Lineage of the written checkpoint, oldest stage first.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<ProvenanceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    fn new(
        command: &str,
        cfg: &RunConfig,
        plan: Option<StagePlan>,
        inputs: Vec<InputFile>,
    ) -> Self {
        Self {
            artifact_version: artifact_version(),
            command: command.to_string(),
            status: RunStatus::Running,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            plan,
            inputs,
            outputs: Vec::new(),
            provenance: Vec::new(),
            wall_clock_secs: None,
            steps: None,
            error: None,
        }
    }

    fn path(cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join("manifest.json")
    }

    fn write(&self) -> CliResult<()> {
        write_json(&Self::path(&self.config), self)
    }

    fn fail(mut self, err: &CliError, started: Instant) -> CliResult<()> {
        self.status = RunStatus::Failed;
        self.error = Some(err.to_string());
        self.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        self.write()
    }
}

/// `{task, metrics, n_examples, checkpoint_hash, config_hash}` plus the
/// artifact version and, for training runs, the per-epoch history.
fn metrics_payload(metrics: &StageMetrics, checkpoint_hash: &str, config_hash: &str) -> Value {
    let (task, body, n) = match &metrics.task {
        Some(m) => (
            serde_json::to_value(m.task).expect("serializable"),
            serde_json::to_value(m).expect("serializable"),
            m.n_examples,
        ),
        None => (
            Value::from("language_model"),
            json!({
                "valid_loss": metrics.valid_loss,
                "valid_perplexity": metrics.valid_perplexity,
            }),
            0,
        ),
    };
    json!({
        "task": task,
        "metrics": body,
        "n_examples": n,
        "checkpoint_hash": checkpoint_hash,
        "config_hash": config_hash,
        "artifact_version": artifact_version(),
        "stage": metrics,
    })
}

pub fn train(command: TrainCommand, cfg: &RunConfig) -> CliResult<Value> {
    let kind = command.kind();
    let target = task_target(cfg, kind)?;
    let plan = plan_for(cfg, kind, target);
    plan.validate()?;

    let input = input_checkpoint(cfg)?;
    if input.is_none() && kind != StageKind::LmPretrain {
        log::warn!(
            "{} without input_checkpoint starts from a randomly initialized encoder",
            command.cli_name()
        );
    }
    let (data, mut inputs, n_valid) = match target {
        None => {
            let l = data::load_lm(&cfg.data, cfg.seed)?;
            let n = match &l.data {
                StageData::Lm { valid, .. } => valid.len(),
                StageData::Task { valid, .. } => valid.len(),
            };
            (l.data, l.inputs, n)
        }
        Some(t) => {
            let s = data::load_task(&cfg.data, t, cfg.seed)?;
            (s.stage_data(), s.inputs.clone(), s.valid.len())
        }
    };
    if let Some((_, f)) = &input {
        inputs.push(f.clone());
    }
    log::info!(
        "{}: stage {:?} ({}), {} validation items",
        command.cli_name(),
        plan.name,
        kind.name(),
        n_valid
    );

    create_out_dir(&cfg.out_dir)?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(command.cli_name(), cfg, Some(plan.clone()), inputs);
    manifest.write()?;

    let result = run_stage(&plan, input.as_ref().map(|(cp, _)| cp), &data);
    let (mut cp, metrics) = match result {
        Ok(r) => r,
        Err(e) => {
            let err = CliError::from(e);
            manifest.fail(&err, started)?;
            return Err(err);
        }
    };
    let config_hash = cfg.hash();
    if let Value::Object(m) = &mut cp.metrics {
        m.insert("artifact_version".into(), Value::from(artifact_version()));
        m.insert("config_hash".into(), Value::from(config_hash.clone()));
    }

    let cp_path = cfg.out_dir.join("checkpoint.ckpt");
    cp.save(&cp_path)?;
    let checkpoint_hash = cp.content_hash()?;
    let payload = metrics_payload(&metrics, &checkpoint_hash, &config_hash);
    let metrics_path = cfg.out_dir.join("metrics.json");
    write_json(&metrics_path, &payload)?;

    manifest.status = RunStatus::Complete;
    manifest.outputs = vec![
        hash_file("checkpoint", &cp_path)?,
        hash_file("metrics", &metrics_path)?,
    ];
    manifest.provenance = cp.provenance.clone();
    manifest.steps = Some(metrics.steps);
    manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    manifest.write()?;
    log::info!(
        "{}: done in {:.1}s, checkpoint {}",
        command.cli_name(),
        started.elapsed().as_secs_f64(),
        cp_path.display()
    );
    Ok(payload)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTask {
    Classify,
    Regress,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub task: EvalTask,
    pub target: Option<Target>,
    pub hierarchy: Option<PathBuf>,
    pub field: Option<InputField>,
    pub batch_size: usize,
}

/// The classification target a checkpoint was trained on, from its labels.
fn infer_target(cp: &Checkpoint, hierarchy: Option<&Path>) -> CliResult<Target> {
    let labels = cp.labels.clone().unwrap_or_default();
    if labels == ["long", "short"] {
        return Ok(Target::Position);
    }
    if let Some(h) = hierarchy {
        let h = AspectHierarchy::load(h)?;
        if labels == h.level1_labels() {
            return Ok(Target::AspectL1);
        }
        if labels == h.level2_labels() {
            return Ok(Target::AspectL2);
        }
    }
    Err(CliError::config(
        "cannot tell which labels the checkpoint predicts; pass --target",
    ))
}

pub fn evaluate(args: &EvalArgs, cfg: &RunConfig) -> CliResult<Value> {
    let cp = load_checkpoint(&args.checkpoint)?;
    let head_ok = matches!(
        (args.task, &cp.head),
        (EvalTask::Classify, HeadSpec::Classifier { .. })
            | (EvalTask::Regress, HeadSpec::Regressor { .. })
    );
    if !head_ok {
        return Err(CliError::config(format!(
            "a {} checkpoint cannot be evaluated on a {:?} task",
            cp.head.kind_name(),
            args.task
        )));
    }
    let mut data_cfg = cfg.data.clone();
    if let Some(h) = &args.hierarchy {
        data_cfg.hierarchy = Some(h.clone());
    }
    if let Some(f) = args.field {
        data_cfg.field = f;
    }
    let target = match (args.task, args.target) {
        (EvalTask::Regress, None) => Target::Sentiment,
        (EvalTask::Classify, None) => infer_target(&cp, data_cfg.hierarchy.as_deref())?,
        (_, Some(t)) => t,
    };
    if target.is_regression() != (args.task == EvalTask::Regress) {
        return Err(CliError::config(format!(
            "target {} does not fit a {:?} task",
            target.name(),
            args.task
        )));
    }
    let (examples, _, _) = data::task_examples(&data_cfg, target, &args.data)?;
    let record = evaluate_checkpoint(&cp, &examples, args.batch_size)?;
    let settings = json!({
        "data": hash_file("data", &args.data)?,
        "target": target,
        "field": data_cfg.field,
        "batch_size": args.batch_size,
    });
    Ok(json!({
        "task": record.task,
        "metrics": record,
        "n_examples": examples.len(),
        "checkpoint_hash": cp.content_hash()?,
        "config_hash": sha256_json(&settings),
        "artifact_version": artifact_version(),
    }))
}

pub fn curve(cfg: &RunConfig) -> CliResult<PathBuf> {
    let kind = cfg.curve.kind;
    if kind.is_lm() {
        return Err(CliError::config(
            "curve.kind must be a task stage (aux_classify, target_classify, target_regress)",
        ));
    }
    let target = task_target(cfg, kind)?.expect("task stage has a target");
    let base_plan = plan_for(cfg, kind, Some(target));
    base_plan.validate()?;
    let input = input_checkpoint(cfg)?;
    let split = data::load_task(&cfg.data, target, cfg.seed)?;
    let mut inputs = split.inputs.clone();
    if let Some((_, f)) = &input {
        inputs.push(f.clone());
    }
    let n_classes = split.labels.as_ref().map_or(1, |l| l.len());

    create_out_dir(&cfg.out_dir)?;
    let started = Instant::now();
    let mut manifest = RunManifest::new("curve", cfg, Some(base_plan.clone()), inputs);
    manifest.write()?;

    let first_code: Mutex<Option<u8>> = Mutex::new(None);
    let runner = |idx: &[usize], seed: u64| -> Result<MetricsRecord, String> {
        let mut plan = base_plan.clone();
        plan.seed = seed;
        let data = StageData::Task {
            train: idx.iter().map(|&i| split.train[i].clone()).collect(),
            valid: split.valid.clone(),
            labels: split.labels.clone(),
        };
        match run_stage(&plan, input.as_ref().map(|(cp, _)| cp), &data) {
            Ok((_, m)) => m
                .task
                .ok_or_else(|| "stage produced no task metrics".into()),
            Err(e) => {
                first_code
                    .lock()
                    .expect("lock")
                    .get_or_insert(finetune_code(&e));
                Err(e.to_string())
            }
        }
    };
    let table = subsample_curve(
        split.train.len(),
        n_classes,
        &cfg.curve.fractions,
        &cfg.curve.seeds,
        &runner,
    );
    let table = match table {
        Ok(t) => t,
        Err(e) => {
            let err = match (&e, *first_code.lock().expect("lock")) {
                (BaselineError::Run(_), Some(code)) => CliError::new(code, e),
                (BaselineError::InvalidArgument(_), _) => CliError::config(e),
                _ => CliError::from(e),
            };
            manifest.fail(&err, started)?;
            return Err(err);
        }
    };
    let path = cfg.out_dir.join("curve.csv");
    write_file(&path, table.to_csv_string()?.as_bytes())?;
    manifest.status = RunStatus::Complete;
    manifest.outputs = vec![hash_file("curve", &path)?];
    manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    manifest.write()?;
    Ok(path)
}
