use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    all_at_once_plan, chain_thaw_plan, convergence_check, discriminative_lrs,
    gradual_unfreeze_plan, Checkpoint, FinetuneError, Phase, ProvenanceEntry, Schedule, StopRule,
    UnfreezePlan, UnfreezeStrategy,
};
use crate::autodiff::{
    clip_grad_norm, Graph, NodeId, OptimizerKind, OptimizerState, TensorError, DEFAULT_CLIP_NORM,
};
use crate::baselines::{compute_metrics, MetricsRecord};
use crate::model::{
    DropoutMasks, EncoderConfig, EncoderState, HeadSpec, ModelError, SequenceModel,
};
use crate::text::{
    classification_batches, lm_batches, transfer_embeddings, DataError, LabelSet, PadPolicy,
    TargetValue, TaskExample, TaskTarget, Vocabulary,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    LmPretrain,
    LmFinetune,
    AuxClassify,
    TargetClassify,
    TargetRegress,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::LmPretrain => "lm_pretrain",
            StageKind::LmFinetune => "lm_finetune",
            StageKind::AuxClassify => "aux_classify",
            StageKind::TargetClassify => "target_classify",
            StageKind::TargetRegress => "target_regress",
        }
    }

    pub fn is_lm(self) -> bool {
        matches!(self, StageKind::LmPretrain | StageKind::LmFinetune)
    }

    fn default_head(self, n_labels: usize) -> HeadSpec {
        match self {
            StageKind::LmPretrain | StageKind::LmFinetune => HeadSpec::LmDecoder,
            StageKind::AuxClassify | StageKind::TargetClassify => HeadSpec::classifier(n_labels),
            StageKind::TargetRegress => HeadSpec::regressor(),
        }
    }

    fn check_head(self, head: &HeadSpec) -> Result<(), FinetuneError> {
        let ok = match self {
            StageKind::LmPretrain | StageKind::LmFinetune => *head == HeadSpec::LmDecoder,
            StageKind::AuxClassify | StageKind::TargetClassify => {
                matches!(head, HeadSpec::Classifier { .. })
            }
            StageKind::TargetRegress => matches!(head, HeadSpec::Regressor { .. }),
        };
        if ok {
            Ok(())
        } else {
            Err(FinetuneError::Config(format!(
                "a {} head cannot be trained in a {} stage",
                head.kind_name(),
                self.name()
            )))
        }
    }
}

/// Encoder sizes for a fresh model and dropout rates for any model. Sizes
/// are ignored when the stage starts from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub weight_drop_p: f64,
    pub embed_drop_p: f64,
    pub variational_drop_p: f64,
    pub tie_weights: bool,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::new(1);
        Self {
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            weight_drop_p: c.weight_drop_p,
            embed_drop_p: c.embed_drop_p,
            variational_drop_p: c.variational_drop_p,
            tie_weights: c.tie_weights,
        }
    }
}

impl EncoderSettings {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            weight_drop_p: self.weight_drop_p,
            embed_drop_p: self.embed_drop_p,
            variational_drop_p: self.variational_drop_p,
            tie_weights: self.tie_weights,
        }
    }

    fn with_dropout_of(&self, mut base: EncoderConfig) -> EncoderConfig {
        base.weight_drop_p = self.weight_drop_p;
        base.embed_drop_p = self.embed_drop_p;
        base.variational_drop_p = self.variational_drop_p;
        base
    }
}

/// Whether a stage keeps the incoming vocabulary or builds its own from the
/// stage data and re-indexes the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Inherit,
    Rebuild,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Unset: rebuild for LM stages, inherit for task stages.
    pub mode: Option<VocabMode>,
    pub max_size: usize,
    pub min_freq: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            mode: None,
            max_size: 30_000,
            min_freq: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for fixed-length strategies; gradual unfreezing runs one
    /// phase per epoch.
    pub epochs: usize,
    pub batch_size: usize,
    /// Window length for language-model batches.
    pub bptt: usize,
    /// Classification sequences longer than this only backpropagate
    /// through their last `class_bptt` steps. 0 disables the cut.
    pub class_bptt: usize,
    pub optimizer: OptimizerKind,
    pub lr_max: f64,
    pub schedule: Schedule,
    /// Discriminative decay between adjacent groups. Unset: 1 for
    /// pretraining from scratch, 2.6 for every fine-tuning stage.
    pub decay: Option<f64>,
    pub clip: f64,
    /// Unset: all at once for LM stages, gradual for task stages.
    pub unfreeze: Option<UnfreezeStrategy>,
    pub patience: usize,
    pub min_delta: f64,
    /// Cap for phases that run until convergence. Unset: `epochs`.
    pub max_phase_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            bptt: 20,
            class_bptt: 70,
            optimizer: OptimizerKind::default(),
            lr_max: 0.005,
            schedule: Schedule::default(),
            decay: None,
            clip: DEFAULT_CLIP_NORM,
            unfreeze: None,
            patience: 3,
            min_delta: 1e-4,
            max_phase_epochs: None,
        }
    }
}

/// Everything that defines one stage besides its data and input weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub kind: StageKind,
    #[serde(default)]
    pub seed: u64,
    /// Unset: the natural head for `kind`.
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl StagePlan {
    pub fn new(name: impl Into<String>, kind: StageKind) -> Self {
        Self {
            name: name.into(),
            kind,
            seed: 0,
            head: None,
            encoder: EncoderSettings::default(),
            vocab: VocabConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Copy with every kind-dependent default filled in.
    pub fn resolved(&self, n_labels: usize, has_input: bool) -> StagePlan {
        let mut p = self.clone();
        p.head
            .get_or_insert_with(|| self.kind.default_head(n_labels));
        let mode = if has_input && !self.kind.is_lm() {
            VocabMode::Inherit
        } else {
            VocabMode::Rebuild
        };
        p.vocab.mode.get_or_insert(mode);
        p.train.unfreeze.get_or_insert(if self.kind.is_lm() {
            UnfreezeStrategy::AllAtOnce
        } else {
            UnfreezeStrategy::Gradual
        });
        p.train.max_phase_epochs.get_or_insert(self.train.epochs);
        p.train
            .decay
            .get_or_insert(if self.kind == StageKind::LmPretrain {
                1.0
            } else {
                2.6
            });
        p
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let t = &self.train;
        if self.name.trim().is_empty() {
            return Err(FinetuneError::Config("stage name is empty".into()));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.bptt == 0 {
            return Err(FinetuneError::Config(
                "epochs, batch_size and bptt must be positive".into(),
            ));
        }
        if !(t.lr_max.is_finite() && t.lr_max > 0.0) {
            return Err(FinetuneError::Config(format!(
                "lr_max {} must be positive",
                t.lr_max
            )));
        }
        if let Some(d) = t.decay.filter(|d| d.is_nan() || *d < 1.0) {
            return Err(FinetuneError::Config(format!("decay {d} below 1")));
        }
        if t.clip.is_nan() || t.clip < 0.0 {
            return Err(FinetuneError::Config(format!(
                "clip {} is negative",
                t.clip
            )));
        }
        if t.max_phase_epochs == Some(0) {
            return Err(FinetuneError::Config(
                "max_phase_epochs must be positive".into(),
            ));
        }
        t.schedule.validate()
    }

    fn unfreeze_plan(&self, n_groups: usize) -> Result<UnfreezePlan, FinetuneError> {
        let t = &self.train;
        let converge = StopRule::Converge {
            patience: t.patience.max(1),
            min_delta: t.min_delta,
            max_epochs: t.max_phase_epochs.unwrap_or(t.epochs),
        };
        match t.unfreeze.clone().unwrap_or_default() {
            UnfreezeStrategy::Gradual => gradual_unfreeze_plan(n_groups, t.epochs),
            UnfreezeStrategy::ChainThawFull => chain_thaw_plan(n_groups, None, converge),
            UnfreezeStrategy::ChainThawPartial { k } => {
                chain_thaw_plan(n_groups, Some(k), converge)
            }
            UnfreezeStrategy::AllAtOnce => {
                all_at_once_plan(n_groups, StopRule::FixedEpochs { epochs: t.epochs })
            }
        }
    }
}

/// Stage input. LM documents are token lists joined with `<eos>`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageData {
    Lm {
        train: Vec<Vec<String>>,
        valid: Vec<Vec<String>>,
    },
    Task {
        train: Vec<TaskExample>,
        valid: Vec<TaskExample>,
        labels: Option<LabelSet>,
    },
}

impl StageData {
    fn train_streams(&self) -> Vec<&[String]> {
        match self {
            StageData::Lm { train, .. } => train.iter().map(Vec::as_slice).collect(),
            StageData::Task { train, .. } => train.iter().map(|e| e.tokens.as_slice()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub trainable: Vec<String>,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Learning rate of the top group at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub kind: StageKind,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub valid_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<MetricsRecord>,
    pub vocab_size: usize,
}

/// Hex SHA-256 of a value's JSON form.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn lm_stream(docs: &[Vec<String>], vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = Vec::new();
    for d in docs {
        ids.extend(vocab.numericalize(d));
        ids.push(vocab.eos_id());
    }
    ids
}

/// Loads `input` into a model for this stage: re-indexes token tables if the
/// vocabulary is rebuilt and swaps the head when it does not fit.
fn prepare_model(
    plan: &StagePlan,
    input: Option<&Checkpoint>,
    data: &StageData,
    head: &HeadSpec,
    labels: Option<&LabelSet>,
    init_seed: u64,
) -> Result<(SequenceModel, Vocabulary), FinetuneError> {
    let build_vocab = || {
        Vocabulary::build(
            data.train_streams(),
            plan.vocab.max_size,
            plan.vocab.min_freq,
        )
    };
    let Some(cp) = input else {
        let vocab = build_vocab()?;
        let model = SequenceModel::new(plan.encoder.config(vocab.len()), head.clone(), init_seed)?;
        return Ok((model, vocab));
    };
    let mut cfg = plan.encoder.with_dropout_of(cp.encoder.clone());
    let (mut model, vocab) = match plan.vocab.mode {
        Some(VocabMode::Inherit) => {
            let m = SequenceModel::from_tensors(cfg, cp.head.clone(), &cp.tensors)?;
            (m, cp.vocab.clone())
        }
        _ => {
            let vocab = build_vocab()?;
            let lm_head = cp.head == HeadSpec::LmDecoder;
            let mut tensors = Vec::with_capacity(cp.tensors.len());
            for (name, t) in &cp.tensors {
                let per_token = name == "embedding.weight"
                    || (lm_head && (name == "head.bias" || name == "head.weight"));
                let t = if per_token {
                    transfer_embeddings(&cp.vocab, t, &vocab)?
                } else {
                    t.clone()
                };
                tensors.push((name.clone(), t));
            }
            cfg.vocab_size = vocab.len();
            let m = SequenceModel::from_tensors(cfg, cp.head.clone(), &tensors)?;
            (m, vocab)
        }
    };
    let same_labels = cp.labels.as_deref() == labels.map(LabelSet::names);
    if model.head() != head || !same_labels {
        log::info!(
            "stage {}: replacing {} head with {}",
            plan.name,
            model.head().kind_name(),
            head.kind_name()
        );
        model.swap_head(head.clone(), init_seed)?;
    }
    Ok((model, vocab))
}

enum Prepared {
    Lm {
        train: Vec<usize>,
        valid: Vec<usize>,
    },
    Task {
        train: Vec<TaskExample>,
        valid: Vec<TaskExample>,
        labels: Option<LabelSet>,
    },
}

type Evaluated = (f64, Option<(Vec<TargetValue>, Vec<TargetValue>)>);

struct Trainer<'a> {
    plan: &'a StagePlan,
    model: SequenceModel,
    vocab: Vocabulary,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer<'_> {
    fn steps_per_epoch(&self, data: &Prepared) -> Result<usize, FinetuneError> {
        let t = &self.plan.train;
        Ok(match data {
            Prepared::Lm { train, .. } => lm_batches(train, t.batch_size, t.bptt)?.num_batches(),
            Prepared::Task { train, .. } => train.len().div_ceil(t.batch_size),
        })
    }

    /// One optimizer step on the loss built by `forward`; returns the loss.
    fn step<F>(&mut self, lrs: &[f64], at: (usize, usize), forward: F) -> Result<f64, FinetuneError>
    where
        F: FnOnce(&SequenceModel, &mut Graph, &mut ChaCha8Rng) -> Result<NodeId, FinetuneError>,
    {
        let mut g = Graph::new();
        let diag = |loss: f64, grad_norm: f64| FinetuneError::NonFinite {
            stage: self.plan.name.clone(),
            phase: at.0 + 1,
            epoch: at.1 + 1,
            step: self.steps,
            loss,
            lr: lrs.last().copied().unwrap_or(0.0),
            grad_norm,
        };
        let loss = match forward(&self.model, &mut g, &mut self.rng) {
            Err(
                FinetuneError::Tensor(TensorError::NonFinite { .. })
                | FinetuneError::Model(ModelError::Tensor(TensorError::NonFinite { .. })),
            ) => return Err(diag(f64::NAN, f64::NAN)),
            other => other?,
        };
        let value = g.value(loss).item();
        let non_finite = |grad_norm: f64| diag(value, grad_norm);
        if !value.is_finite() {
            return Err(non_finite(f64::NAN));
        }
        g.backward(loss)?;
        self.model.zero_grad();
        self.model.collect_grads(&g)?;
        let norm = clip_grad_norm(self.model.groups_mut(), self.plan.train.clip);
        if !norm.is_finite() {
            return Err(non_finite(norm));
        }
        self.opt
            .step(self.model.groups_mut(), lrs)
            .map_err(|e| match e {
                TensorError::NonFinite { .. } => non_finite(norm),
                e => e.into(),
            })?;
        self.steps += 1;
        Ok(value)
    }

    /// Returns the mean training loss, the next schedule step, and the last
    /// top-group learning rate.
    fn train_epoch(
        &mut self,
        data: &Prepared,
        lr_at: &dyn Fn(usize) -> Result<Vec<f64>, FinetuneError>,
        mut t: usize,
        at: (usize, usize),
    ) -> Result<(f64, usize, f64), FinetuneError> {
        let tc = self.plan.train.clone();
        let cfg = self.model.config().clone();
        let (mut total, mut count, mut last_lr) = (0.0, 0usize, 0.0);
        match data {
            Prepared::Lm { train, .. } => {
                let mut state = EncoderState::zeros(&cfg, tc.batch_size);
                for batch in lm_batches(train, tc.batch_size, tc.bptt)? {
                    let lrs = lr_at(t)?;
                    let mut next = None;
                    let loss = self.step(&lrs, at, |m, g, rng| {
                        let masks = DropoutMasks::sample(&cfg, tc.batch_size, rng);
                        let bound = m.bind(g);
                        let out = m.encode(g, &bound, &batch.input, None, &state, &masks)?;
                        next = Some(out.state_values(g));
                        Ok(m.lm_loss(g, &bound, &out, &batch.target)?)
                    })?;
                    state = next.expect("forward ran");
                    let n = batch.target.rows() * batch.target.cols();
                    total += loss * n as f64;
                    count += n;
                    last_lr = lrs.last().copied().unwrap_or(0.0);
                    t += 1;
                }
            }
            Prepared::Task { train, labels, .. } => {
                let batches = classification_batches(
                    train,
                    &self.vocab,
                    labels.as_ref(),
                    tc.batch_size,
                    PadPolicy::Left,
                    Some(&mut self.rng),
                )?;
                for b in &batches {
                    let lrs = lr_at(t)?;
                    let valid = b.valid_mask();
                    let loss = self.step(&lrs, at, |m, g, rng| {
                        let masks = DropoutMasks::sample(&cfg, b.ids.rows(), rng);
                        let bound = m.bind(g);
                        let out =
                            m.task_output(g, &bound, &b.ids, &valid, &masks, tc.class_bptt)?;
                        Ok(m.task_loss(g, out, &b.targets)?)
                    })?;
                    total += loss * b.ids.rows() as f64;
                    count += b.ids.rows();
                    last_lr = lrs.last().copied().unwrap_or(0.0);
                    t += 1;
                }
            }
        }
        Ok((total / count.max(1) as f64, t, last_lr))
    }

    /// Validation loss with dropout off. Task stages also return predictions
    /// and truths in input order.
    fn evaluate(&self, data: &Prepared) -> Result<Evaluated, FinetuneError> {
        let m = &self.model;
        let cfg = m.config();
        let none = DropoutMasks::none(cfg.num_layers);
        match data {
            Prepared::Lm { valid, .. } => {
                let mut state = EncoderState::zeros(cfg, 1);
                let (mut total, mut count) = (0.0, 0usize);
                for batch in lm_batches(valid, 1, self.plan.train.bptt)? {
                    let mut g = Graph::new();
                    let bound = m.bind_frozen(&mut g);
                    let out = m.encode(&mut g, &bound, &batch.input, None, &state, &none)?;
                    let loss = m.lm_loss(&mut g, &bound, &out, &batch.target)?;
                    state = out.state_values(&g);
                    let n = batch.target.cols();
                    total += g.value(loss).item() * n as f64;
                    count += n;
                }
                Ok((total / count.max(1) as f64, None))
            }
            Prepared::Task { valid, labels, .. } => {
                let (loss, preds, truths) = task_predictions(
                    m,
                    &self.vocab,
                    valid,
                    labels.as_ref(),
                    self.plan.train.batch_size,
                )?;
                Ok((loss, Some((preds, truths))))
            }
        }
    }
}

type Predictions = (f64, Vec<TargetValue>, Vec<TargetValue>);

/// Mean loss, predictions, and encoded truths over `examples`, without
/// dropout.
fn task_predictions(
    m: &SequenceModel,
    vocab: &Vocabulary,
    examples: &[TaskExample],
    labels: Option<&LabelSet>,
    batch_size: usize,
) -> Result<Predictions, FinetuneError> {
    let none = DropoutMasks::none(m.config().num_layers);
    let batches = classification_batches::<ChaCha8Rng>(
        examples,
        vocab,
        labels,
        batch_size,
        PadPolicy::Left,
        None,
    )?;
    let (mut total, mut count) = (0.0, 0usize);
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for b in &batches {
        let mut g = Graph::new();
        let bound = m.bind_frozen(&mut g);
        let out = m.task_output(&mut g, &bound, &b.ids, &b.valid_mask(), &none, 0)?;
        let loss = m.task_loss(&mut g, out, &b.targets)?;
        total += g.value(loss).item() * b.ids.rows() as f64;
        count += b.ids.rows();
        let v = g.value(out);
        for r in 0..v.rows() {
            preds.push(match m.head() {
                HeadSpec::Regressor { .. } => TargetValue::Score(v.at(r, 0)),
                _ => TargetValue::Class(argmax(v.row(r))),
            });
        }
        truths.extend_from_slice(&b.targets);
    }
    Ok((total / count.max(1) as f64, preds, truths))
}

/// Scores a task checkpoint on labelled examples. Class targets need a
/// classifier head and score targets a regressor head.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    examples: &[TaskExample],
    batch_size: usize,
) -> Result<MetricsRecord, FinetuneError> {
    let wants_scores = match examples.first() {
        None => {
            return Err(DataError::InvalidArgument("evaluation set is empty".into()).into());
        }
        Some(ex) => matches!(ex.target, TaskTarget::Score(_)),
    };
    let head_ok = match checkpoint.head {
        HeadSpec::Classifier { .. } => !wants_scores,
        HeadSpec::Regressor { .. } => wants_scores,
        HeadSpec::LmDecoder => false,
    };
    if !head_ok {
        return Err(FinetuneError::Config(format!(
            "a {} checkpoint cannot score {} targets",
            checkpoint.head.kind_name(),
            if wants_scores { "regression" } else { "class" }
        )));
    }
    let labels = match &checkpoint.labels {
        Some(names) => Some(LabelSet::new(names.iter().cloned())?),
        None if wants_scores => None,
        None => {
            return Err(FinetuneError::Config(
                "classifier checkpoint carries no label names".into(),
            ))
        }
    };
    let model = checkpoint.model()?;
    let (_, preds, truths) = task_predictions(
        &model,
        &checkpoint.vocab,
        examples,
        labels.as_ref(),
        batch_size.max(1),
    )?;
    let names = labels.as_ref().map(LabelSet::names);
    Ok(compute_metrics(&preds, &truths, names)?)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

fn empty(what: &str) -> FinetuneError {
    FinetuneError::Data(DataError::InvalidArgument(format!("{what} is empty")))
}

/// Trains one stage and returns the new checkpoint with its metrics.
///
/// Starting from `input`, the vocabulary is kept or rebuilt (token tables are
/// re-indexed, unseen tokens get the mean row), the head is replaced when its
/// spec or label set differs, and the unfreezing plan runs phase by phase.
/// The learning-rate schedule restarts in every phase and spans that phase's
/// maximum length. All randomness comes from `plan.seed`, so the same plan,
/// input and data give a byte-identical checkpoint.
pub fn run_stage(
    plan: &StagePlan,
    input: Option<&Checkpoint>,
    data: &StageData,
) -> Result<(Checkpoint, StageMetrics), FinetuneError> {
    run_stage_observed(plan, input, data, &mut |_| {})
}

/// Where a [`PhaseEvent`] fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseBoundary {
    Start,
    End,
}

/// Model state at the edge of an unfreezing phase.
pub struct PhaseEvent<'a> {
    /// 0-based phase index.
    pub index: usize,
    pub boundary: PhaseBoundary,
    pub phase: &'a Phase,
    pub model: &'a SequenceModel,
}

/// [`run_stage`] with a callback at the start and end of every phase.
pub fn run_stage_observed(
    plan: &StagePlan,
    input: Option<&Checkpoint>,
    data: &StageData,
    observer: &mut dyn FnMut(PhaseEvent<'_>),
) -> Result<(Checkpoint, StageMetrics), FinetuneError> {
    plan.validate()?;
    let labels = match (plan.kind, data) {
        (StageKind::LmPretrain | StageKind::LmFinetune, StageData::Lm { train, valid }) => {
            if train.iter().all(Vec::is_empty) {
                return Err(empty("LM training corpus"));
            }
            if valid.iter().all(Vec::is_empty) {
                return Err(empty("LM validation corpus"));
            }
            None
        }
        (
            k,
            StageData::Task {
                train,
                valid,
                labels,
            },
        ) if !k.is_lm() => {
            if train.is_empty() {
                return Err(empty("training set"));
            }
            if valid.is_empty() {
                return Err(empty("validation set"));
            }
            match k {
                StageKind::TargetRegress => None,
                _ => Some(labels.clone().ok_or_else(|| {
                    FinetuneError::Config(format!("{} stage needs a label set", k.name()))
                })?),
            }
        }
        (k, _) => {
            return Err(FinetuneError::Config(format!(
                "{} stage given data of the wrong kind",
                k.name()
            )))
        }
    };
    let n_labels = labels.as_ref().map_or(0, LabelSet::len);
    let plan = plan.resolved(n_labels, input.is_some());
    let head = plan.head.clone().expect("resolved");
    plan.kind.check_head(&head)?;
    if let HeadSpec::Classifier { n_classes, .. } = head {
        if n_classes != n_labels {
            return Err(FinetuneError::Config(format!(
                "classifier head has {n_classes} outputs for {n_labels} labels"
            )));
        }
    }
    let config_hash = sha256_json(&plan);
    let data_hash = sha256_json(data);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let init_seed: u64 = rng.gen();
    let (model, vocab) = prepare_model(&plan, input, data, &head, labels.as_ref(), init_seed)?;
    let prepared = match data {
        StageData::Lm { train, valid } => Prepared::Lm {
            train: lm_stream(train, &vocab),
            valid: lm_stream(valid, &vocab),
        },
        StageData::Task { train, valid, .. } => Prepared::Task {
            train: train.clone(),
            valid: valid.clone(),
            labels: labels.clone(),
        },
    };
    let names = model.group_names();
    let uplan = plan.unfreeze_plan(names.len())?;
    log::info!(
        "stage {} ({}): {} parameters, vocab {}, {} phase(s)",
        plan.name,
        plan.kind.name(),
        model.num_parameters(),
        vocab.len(),
        uplan.phases.len()
    );
    let disc = discriminative_lrs(1.0, names.len(), plan.train.decay.unwrap_or(2.6))?;
    let mut tr = Trainer {
        plan: &plan,
        model,
        vocab,
        opt: OptimizerState::new(plan.train.optimizer),
        rng,
        steps: 0,
    };
    let per_epoch = tr.steps_per_epoch(&prepared)?;
    let mut epochs = Vec::new();
    for (pi, phase) in uplan.phases.iter().enumerate() {
        tr.model.set_trainable(&phase.trainable);
        observer(PhaseEvent {
            index: pi,
            boundary: PhaseBoundary::Start,
            phase,
            model: &tr.model,
        });
        let trainable: Vec<String> = phase.trainable.iter().map(|&g| names[g].clone()).collect();
        let max_epochs = phase.stop.max_epochs();
        let total = max_epochs * per_epoch;
        let lr_at = |t: usize| -> Result<Vec<f64>, FinetuneError> {
            let lr = plan.train.schedule.lr(t, total, plan.train.lr_max)?;
            Ok(disc.iter().map(|d| d * lr).collect())
        };
        let mut t = 0;
        let mut losses = Vec::new();
        for e in 0..max_epochs {
            let (train_loss, next_t, lr) = tr.train_epoch(&prepared, &lr_at, t, (pi, e))?;
            t = next_t;
            let (valid_loss, _) = tr.evaluate(&prepared)?;
            log::info!(
                "stage {} phase {} [{}] epoch {}: train {train_loss:.5}, valid {valid_loss:.5}",
                plan.name,
                pi + 1,
                trainable.join(","),
                e + 1
            );
            epochs.push(EpochRecord {
                phase: pi + 1,
                epoch: e + 1,
                trainable: trainable.clone(),
                train_loss,
                valid_loss,
                lr,
            });
            losses.push(valid_loss);
            if let StopRule::Converge {
                patience,
                min_delta,
                ..
            } = phase.stop
            {
                if convergence_check(&losses, patience, min_delta) {
                    log::info!(
                        "stage {} phase {} converged after {} epoch(s)",
                        plan.name,
                        pi + 1,
                        e + 1
                    );
                    break;
                }
            }
        }
        observer(PhaseEvent {
            index: pi,
            boundary: PhaseBoundary::End,
            phase,
            model: &tr.model,
        });
    }

    let (valid_loss, preds) = tr.evaluate(&prepared)?;
    let task = match preds {
        Some((p, truth)) => Some(compute_metrics(
            &p,
            &truth,
            labels.as_ref().map(LabelSet::names),
        )?),
        None => None,
    };
    let metrics = StageMetrics {
        stage: plan.name.clone(),
        kind: plan.kind,
        steps: tr.steps,
        epochs,
        valid_loss,
        valid_perplexity: plan.kind.is_lm().then(|| valid_loss.exp()),
        task,
        vocab_size: tr.vocab.len(),
    };
    let mut provenance = input.map(|c| c.provenance.clone()).unwrap_or_default();
    provenance.push(ProvenanceEntry {
        name: plan.name.clone(),
        kind: plan.kind,
        data_hash,
        config_hash,
        seed: plan.seed,
    });
    let snapshot = serde_json::to_value(&metrics)
        .map_err(|e| FinetuneError::Config(format!("metrics snapshot: {e}")))?;
    let cp = Checkpoint::from_model(
        &tr.model,
        tr.vocab,
        labels.map(|l| l.names().to_vec()),
        provenance,
        snapshot,
    );
    Ok((cp, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{memorizable_corpus, transfer_task};

    fn tiny() -> EncoderSettings {
        EncoderSettings {
            embed_dim: 6,
            hidden_dim: 8,
            num_layers: 2,
            ..EncoderSettings::default()
        }
    }

    fn lm_plan(kind: StageKind, name: &str) -> StagePlan {
        let mut p = StagePlan::new(name, kind);
        p.seed = 4;
        p.encoder = tiny();
        p.train.epochs = 2;
        p.train.batch_size = 2;
        p.train.bptt = 6;
        p
    }

    fn lm_data(n: usize, seed: u64) -> StageData {
        let docs = memorizable_corpus(n, seed);
        StageData::Lm {
            valid: docs[..3].to_vec(),
            train: docs,
        }
    }

    fn task_data() -> StageData {
        let t = transfer_task(2, 16, 8);
        StageData::Task {
            train: t.train,
            valid: t.valid,
            labels: Some(t.labels),
        }
    }

    #[test]
    fn same_inputs_same_bytes() {
        let plan = lm_plan(StageKind::LmPretrain, "pretrain");
        let data = lm_data(120, 1);
        let (a, _) = run_stage(&plan, None, &data).unwrap();
        let (b, _) = run_stage(&plan, None, &data).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let mut other = plan.clone();
        other.seed = 5;
        let (c, _) = run_stage(&other, None, &data).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn provenance_follows_the_chain() {
        let (cp, _) = run_stage(
            &lm_plan(StageKind::LmPretrain, "pretrain"),
            None,
            &lm_data(120, 1),
        )
        .unwrap();
        let (cp, _) = run_stage(
            &lm_plan(StageKind::LmFinetune, "lm_finetune"),
            Some(&cp),
            &lm_data(100, 2),
        )
        .unwrap();
        let mut cls = lm_plan(StageKind::TargetClassify, "topic");
        cls.train.epochs = 3;
        let (cp, m) = run_stage(&cls, Some(&cp), &task_data()).unwrap();
        let names: Vec<&str> = cp.provenance.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["pretrain", "lm_finetune", "topic"]);
        assert_eq!(cp.head, HeadSpec::classifier(4));
        assert_eq!(m.epochs.len(), 3);
        assert!(m.task.is_some());
    }

    #[test]
    fn head_and_kind_must_agree() {
        let mut p = lm_plan(StageKind::LmPretrain, "x");
        p.head = Some(HeadSpec::classifier(3));
        assert!(matches!(
            run_stage(&p, None, &lm_data(120, 1)),
            Err(FinetuneError::Config(_))
        ));
        let mut p = lm_plan(StageKind::TargetClassify, "x");
        p.head = Some(HeadSpec::classifier(3));
        assert!(matches!(
            run_stage(&p, None, &task_data()),
            Err(FinetuneError::Config(_))
        ));
        let p = lm_plan(StageKind::TargetRegress, "x");
        assert!(matches!(
            run_stage(&p, None, &lm_data(120, 1)),
            Err(FinetuneError::Config(_))
        ));
    }

    #[test]
    fn diverging_run_aborts() {
        let mut p = lm_plan(StageKind::LmPretrain, "boom");
        p.train.optimizer = OptimizerKind::SgdMomentum { momentum: 0.9 };
        p.train.lr_max = 1e300;
        p.train.clip = 0.0;
        match run_stage(&p, None, &lm_data(120, 1)) {
            Err(FinetuneError::NonFinite { stage, .. }) => assert_eq!(stage, "boom"),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn rebuilt_vocab_keeps_shared_rows() {
        let (cp, _) = run_stage(
            &lm_plan(StageKind::LmPretrain, "pretrain"),
            None,
            &lm_data(120, 1),
        )
        .unwrap();
        let extra = vec![vec!["start0".to_string(), "brandnew".to_string()]];
        let data = StageData::Lm {
            train: extra.clone(),
            valid: extra,
        };
        let plan = lm_plan(StageKind::LmFinetune, "ft").resolved(0, true);
        let (model, vocab) =
            prepare_model(&plan, Some(&cp), &data, &HeadSpec::LmDecoder, None, 0).unwrap();
        let old = cp.model().unwrap();
        let (src, dst) = (
            old.tensor("embedding.weight").unwrap(),
            model.tensor("embedding.weight").unwrap(),
        );
        let e = src.cols();
        let shared = cp.vocab.id("start0");
        assert_eq!(dst.row(vocab.id("start0")), src.row(shared));
        let fresh = dst.row(vocab.id("brandnew"));
        for (c, v) in fresh.iter().enumerate().take(e) {
            let mean = (4..src.rows()).map(|r| src.at(r, c)).sum::<f64>() / (src.rows() - 4) as f64;
            assert!((v - mean).abs() < 1e-12);
        }
        assert_eq!(model.encoder_fingerprint().len(), 64);
        assert_eq!(vocab.len(), 6);
    }
}
