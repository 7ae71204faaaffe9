//! Continual training loop, evaluation, ablation modes and ACC/FT metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Fixture, TaskData};
use crate::dual_lora::{
    collect_features, project_rows_out, update_feature_memory,
    AdapterSet, FeatureMemory, LayerMemory,
};
use crate::error::{Error, Result};
use crate::linalg::{project_into, project_out, Basis, Mat};
use crate::rng::{Stream, STREAM_ADAPTERS, STREAM_BATCHES, STREAM_PRETRAIN};
use crate::task_identity::{compute_signature, predict_task, scale_logits, SignatureSet};
use crate::vit::{Backbone, EncoderConfig, ForwardMode, Gradients, Head, VitMini};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lora,
    LoraO,
    LoraOR,
    Duallora,
    DualloraPlus,
    OracleId,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Lora, Mode::LoraO, Mode::LoraOR, Mode::Duallora, Mode::DualloraPlus, Mode::OracleId];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lora => "lora",
            Mode::LoraO => "lora_o",
            Mode::LoraOR => "lora_o_r",
            Mode::Duallora => "duallora",
            Mode::DualloraPlus => "duallora_plus",
            Mode::OracleId => "oracle_id",
        }
    }

    /// Orthogonal projection of the key/value adapters during training.
    pub fn projects(self) -> bool {
        self != Mode::Lora
    }

    /// Residual adapter present.
    pub fn residual(self) -> bool {
        !matches!(self, Mode::Lora | Mode::LoraO)
    }

    /// Dynamic-memory modulation at evaluation.
    pub fn dynamic_memory(self) -> bool {
        matches!(self, Mode::Duallora | Mode::DualloraPlus | Mode::OracleId)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CLConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rank: usize,
    pub epsilon: f64,
    /// Feature samples `m` per task.
    pub samples: usize,
    pub lambda: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for CLConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Duallora,
            epochs: 5,
            batch: 16,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rank: 10,
            epsilon: 0.95,
            samples: 200,
            lambda: crate::task_identity::DEFAULT_LAMBDA,
            seed: 0,
            pretrain_epochs: 10,
            pretrain_lr: 1e-3,
        }
    }
}

impl CLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.samples == 0 {
            return Err(Error::Config("epochs, batch and samples must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy restricted to `logits[range]`; returns the loss and
/// its gradient over the full logit vector.
pub fn cross_entropy(logits: &[f64], range: std::ops::Range<usize>, target: usize) -> (f64, Vec<f64>) {
    let z = &logits[range.clone()];
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad = vec![0.0; logits.len()];
    for (i, v) in z.iter().enumerate() {
        grad[range.start + i] = (v - lse).exp();
    }
    grad[range.start + target] -= 1.0;
    (lse - z[target], grad)
}

/// Feasible set of one trainable tensor.
#[derive(Clone, Debug)]
pub enum Constraint {
    Free,
    /// Rows orthogonal to the basis: `M(I − ΦᵀΦ)`.
    RowsOut(Basis),
    /// Columns orthogonal to the basis: `(I − ΦᵀΦ)M`.
    ColsOut(Basis),
    /// Columns inside the basis: `ΨᵀΨM`.
    ColsInto(Basis),
    Frozen,
}

impl Constraint {
    pub fn apply(&self, m: &Mat) -> Result<Mat> {
        match self {
            Constraint::Free => Ok(m.clone()),
            Constraint::RowsOut(b) => project_rows_out(m, b),
            Constraint::ColsOut(b) => project_out(m, b),
            Constraint::ColsInto(b) => project_into(m, b),
            Constraint::Frozen => Ok(Mat::zeros(m.rows(), m.cols())),
        }
    }
}

/// Constraints for one layer's factors in [`LayerAdapterGrads`] order
/// (`A_k, B_k, A_v, B_v, A_r, B_r`).
///
/// [`LayerAdapterGrads`]: crate::dual_lora::LayerAdapterGrads
pub fn layer_constraints(mode: Mode, mem: &LayerMemory) -> [Constraint; 6] {
    let (a_k, b_v) = if mode.projects() {
        (Constraint::RowsOut(mem.phi_k.clone()), Constraint::ColsOut(mem.phi_v.clone()))
    } else {
        (Constraint::Free, Constraint::Free)
    };
    let psi = mem.latest_psi();
    let (a_r, b_r) = if !mode.residual() || psi.is_empty() {
        (Constraint::Frozen, Constraint::Frozen)
    } else {
        (Constraint::Free, Constraint::ColsInto(psi))
    };
    [a_k, Constraint::Free, Constraint::Free, b_v, a_r, b_r]
}

/// Adam with per-slot moments.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Advances the step counter; call once per optimiser step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected direction `m̂/(√v̂ + ε)` for slot `i`.
    pub fn direction(&mut self, i: usize, g: &Mat) -> Mat {
        while self.m.len() <= i {
            self.m.push(Mat::zeros(g.rows(), g.cols()));
            self.v.push(Mat::zeros(g.rows(), g.cols()));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let m = self.m[i].as_mut_slice();
        let v = self.v[i].as_mut_slice();
        let mut out = Mat::zeros(g.rows(), g.cols());
        for (k, (&gk, o)) in g.as_slice().iter().zip(out.as_mut_slice()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            *o = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
        }
        out
    }
}

/// One optimiser step on adapters and head `head`. Each gradient is
/// projected onto its feasible set before entering the moments, and the
/// resulting Adam step is projected again because the element-wise moment
/// scaling does not preserve subspaces.
pub fn apply_step(
    model: &mut VitMini,
    grads: &Gradients,
    constraints: &[[Constraint; 6]],
    head: usize,
    adam: &mut Adam,
    lr: f64,
) -> Result<()> {
    adam.tick();
    let mut slot = 0;
    for (l, (ad, g)) in model.adapters.layers.iter_mut().zip(&grads.adapters).enumerate() {
        let params = [&mut ad.a_k, &mut ad.b_k, &mut ad.a_v, &mut ad.b_v, &mut ad.a_r, &mut ad.b_r];
        for ((p, g), c) in params.into_iter().zip(g.tensors()).zip(&constraints[l]) {
            if !matches!(c, Constraint::Frozen) {
                let step = c.apply(&adam.direction(slot, &c.apply(g)?))?;
                p.axpy(-lr, &step);
            }
            slot += 1;
        }
    }
    let (h, g) = (&mut model.heads.heads[head], &grads.heads[head]);
    h.weight.axpy(-lr, &adam.direction(slot, &g.weight));
    h.bias.axpy(-lr, &adam.direction(slot + 1, &g.bias));
    Ok(())
}

/// Mean gradient and loss of a mini-batch under cross-entropy on `head`.
pub fn batch_gradients(
    model: &VitMini,
    data: &Dataset,
    idx: &[usize],
    head: usize,
    first_class: usize,
) -> Result<(Gradients, f64)> {
    let range = model.heads.range(head);
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for &i in idx {
        let fwd = model.forward(&data.images[i], ForwardMode::Train)?;
        let (l, dl) = cross_entropy(&fwd.logits, range.clone(), data.labels[i] - first_class);
        loss += l;
        total.accumulate(&model.backward(&fwd, &dl)?);
    }
    let s = 1.0 / idx.len() as f64;
    total.scale(s);
    Ok((total, loss * s))
}

/// Trains a fresh backbone with a temporary head on the pretext classes,
/// then freezes it.
pub fn pretrain_backbone(
    config: &EncoderConfig,
    pretext: &Dataset,
    classes: usize,
    cl: &CLConfig,
) -> Result<Backbone> {
    let mut model = VitMini::new(config.clone(), cl.seed)?;
    if classes > 0 && !pretext.is_empty() && cl.pretrain_epochs > 0 {
        model.heads.push(Head::zeros(config.embed_dim, classes));
        let mut rng = Stream::new(cl.seed, STREAM_PRETRAIN);
        let mut adam = Adam::new(cl.beta1, cl.beta2, cl.adam_eps);
        let mut order: Vec<usize> = (0..pretext.len()).collect();
        for epoch in 0..cl.pretrain_epochs {
            rng.shuffle(&mut order);
            let mut sum = 0.0;
            for chunk in order.chunks(cl.batch) {
                let (grads, loss) = batch_gradients(&model, pretext, chunk, 0, 0)?;
                sum += loss * chunk.len() as f64;
                adam.tick();
                let bb = grads.backbone.as_ref().expect("backbone is trainable");
                for (k, (p, g)) in model.backbone.tensors_mut().into_iter().zip(bb.tensors()).enumerate() {
                    p.axpy(-cl.pretrain_lr, &adam.direction(k, g));
                }
                let n = bb.tensors().len();
                let head = &mut model.heads.heads[0];
                head.weight.axpy(-cl.pretrain_lr, &adam.direction(n, &grads.heads[0].weight));
                head.bias.axpy(-cl.pretrain_lr, &adam.direction(n + 1, &grads.heads[0].bias));
            }
            debug!("pretext epoch {epoch}: loss {:.4}", sum / pretext.len() as f64);
        }
    }
    model.backbone.freeze();
    Ok(model.backbone)
}

/// Accuracies (percent) after each task: `rows[T][τ] = acc_{τ,T}` for
/// `τ ≤ T`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccMatrix {
    pub fn push(&mut self, column: Vec<f64>) -> Result<()> {
        if column.len() != self.rows.len() + 1 {
            return Err(Error::Dimension(format!(
                "evaluation after task {} must cover {} tasks",
                self.rows.len() + 1,
                self.rows.len() + 1
            )));
        }
        if column.iter().any(|a| !(0.0..=100.0).contains(a)) {
            return Err(Error::Parameter("accuracy outside [0, 100]".into()));
        }
        self.rows.push(column);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    /// CSV with one row per finished task; unevaluated cells are empty.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut s = String::from("after_task");
        for j in 0..t {
            s.push_str(&format!(",task_{}", j + 1));
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&(i + 1).to_string());
            for j in 0..t {
                s.push(',');
                if let Some(v) = row.get(j) {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of [`AccMatrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "accuracy matrix", detail };
        let mut m = AccMatrix::default();
        for (i, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
            let row = line
                .split(',')
                .skip(1)
                .take(i + 1)
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2))))
                .collect::<Result<Vec<_>>>()?;
            m.push(row)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub ft: f64,
    /// False when `T = 1` and forgetting is undefined (reported as 0).
    pub ft_defined: bool,
}

/// `ACC = (1/T)Σ acc_{τ,T}` and `FT = (1/(T−1))Σ_{τ<T} (acc_{τ,best} − acc_{τ,T})`.
pub fn compute_metrics(m: &AccMatrix) -> Result<Metrics> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::State("empty accuracy matrix".into()));
    }
    let last = &m.rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    if t == 1 {
        return Ok(Metrics { acc, ft: 0.0, ft_defined: false });
    }
    let mut ft = 0.0;
    for tau in 0..t - 1 {
        let best = (tau..t).map(|after| m.rows[after][tau]).fold(f64::NEG_INFINITY, f64::max);
        ft += best - last[tau];
    }
    Ok(Metrics { acc, ft: ft / (t - 1) as f64, ft_defined: true })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracies: Vec<f64>,
    /// Fraction of test samples whose task was identified correctly, for
    /// modes that predict identity.
    pub task_id_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub epoch_losses: Vec<f64>,
    /// Ranks of the new residual basis per layer.
    pub psi_ranks: Vec<usize>,
    pub signature: Vec<f64>,
    pub degenerate_signature: bool,
}

/// Continual learner state: model, feature memory and signatures.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: VitMini,
    pub memory: FeatureMemory,
    pub signatures: SignatureSet,
    pub config: CLConfig,
    adapter_rng: Stream,
    batch_rng: Stream,
}

impl Learner {
    pub fn new(encoder: EncoderConfig, backbone: Backbone, config: CLConfig) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::State("continual learning needs a frozen backbone".into()));
        }
        let (l, d) = (encoder.layers, encoder.embed_dim);
        let adapters = AdapterSet::new(l, d, config.rank, config.mode.residual())?;
        let model = VitMini { config: encoder, backbone, adapters, heads: Default::default() };
        Ok(Self {
            model,
            memory: FeatureMemory::new(l, d),
            signatures: SignatureSet::new(config.lambda),
            adapter_rng: Stream::new(config.seed, STREAM_ADAPTERS),
            batch_rng: Stream::new(config.seed, STREAM_BATCHES),
            config,
        })
    }

    /// Reassembles a learner from persisted parts.
    pub fn from_parts(
        model: VitMini,
        memory: FeatureMemory,
        signatures: SignatureSet,
        config: CLConfig,
    ) -> Self {
        Self {
            adapter_rng: Stream::new(config.seed, STREAM_ADAPTERS),
            batch_rng: Stream::new(config.seed, STREAM_BATCHES),
            model,
            memory,
            signatures,
            config,
        }
    }

    pub fn tasks_seen(&self) -> usize {
        self.model.heads.len()
    }

    /// Constraints for training the next task.
    pub fn constraints(&self) -> Vec<[Constraint; 6]> {
        self.memory.layers.iter().map(|m| layer_constraints(self.config.mode, m)).collect()
    }

    /// Trains adapters and a new head on `task`; returns mean loss per epoch.
    pub fn train_task(&mut self, task: &TaskData) -> Result<Vec<f64>> {
        if task.train.is_empty() {
            return Err(Error::Parameter("task has no training data".into()));
        }
        let cfg = self.config.clone();
        let head = self.model.heads.len();
        self.model.adapters.begin_task(&mut self.adapter_rng, cfg.mode.projects().then_some(&self.memory))?;
        self.model.heads.push(Head::zeros(self.model.embed_dim(), task.classes));
        let constraints = self.constraints();
        let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            self.batch_rng.shuffle(&mut order);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let (grads, loss) =
                    batch_gradients(&self.model, &task.train, chunk, head, task.first_class)?;
                sum += loss * chunk.len() as f64;
                apply_step(&mut self.model, &grads, &constraints, head, &mut adam, cfg.lr)?;
            }
            losses.push(sum / task.train.len() as f64);
        }
        Ok(losses)
    }

    /// Post-task bookkeeping: feature memory growth and the task signature.
    pub fn consolidate(&mut self, task: &TaskData) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let t = self.tasks_seen();
        let mut m = self.config.samples;
        if m > task.train.len() {
            warn!("task {t}: sampling {} features instead of {m}", task.train.len());
            m = task.train.len();
        }
        let seed = self.config.seed.wrapping_add(t as u64);
        let feats = collect_features(&self.model, &task.train.images, m, seed)?;
        let ranks = update_feature_memory(&mut self.memory, &feats, self.config.epsilon)?;
        let (pi, degenerate) = compute_signature(&feats.mean_final, self.memory.last_layer()?);
        if degenerate {
            warn!("task {t}: all residual bases are empty, signature is zero");
        }
        self.signatures.push(pi.clone());
        Ok((ranks, pi, degenerate))
    }

    pub fn learn_task(&mut self, task: &TaskData) -> Result<TaskOutcome> {
        let epoch_losses = self.train_task(task)?;
        let (psi_ranks, signature, degenerate_signature) = self.consolidate(task)?;
        Ok(TaskOutcome { epoch_losses, psi_ranks, signature, degenerate_signature })
    }

    /// `π*` of a final-layer feature against the stored residual bases.
    pub fn query_signature(&self, s_final: &[f64]) -> Result<Vec<f64>> {
        Ok(compute_signature(s_final, self.memory.last_layer()?).0)
    }

    fn forward_mode(&self) -> ForwardMode<'_> {
        if self.config.mode.dynamic_memory() && self.model.adapters.residual_enabled() {
            ForwardMode::InferDm(&self.memory)
        } else {
            ForwardMode::Infer
        }
    }

    /// Accuracy on each of `tasks` (the first `tasks.len()` tasks seen).
    pub fn evaluate(&self, tasks: &[TaskData]) -> Result<Evaluation> {
        let mode = self.config.mode;
        let ranges = self.model.heads.ranges();
        let predicts = matches!(mode, Mode::Duallora | Mode::DualloraPlus);
        let (mut id_hits, mut id_total) = (0usize, 0usize);
        let mut accuracies = Vec::with_capacity(tasks.len());
        for (t, task) in tasks.iter().enumerate() {
            let outs = task
                .test
                .images
                .iter()
                .map(|img| self.model.forward(img, self.forward_mode()))
                .collect::<Result<Vec<_>>>()?;
            let group = if mode == Mode::DualloraPlus { self.config.batch } else { 1 };
            let mut correct = 0usize;
            for (chunk_idx, chunk) in outs.chunks(group).enumerate() {
                let prediction = if predicts {
                    let d = self.model.embed_dim();
                    let mut mean = vec![0.0; d];
                    for o in chunk {
                        for (m, v) in mean.iter_mut().zip(o.s_class.last().expect("layers")) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= chunk.len() as f64);
                    let pi = self.query_signature(&mean)?;
                    predict_task(&pi, &self.signatures)?
                } else {
                    None
                };
                for (j, o) in chunk.iter().enumerate() {
                    let mut logits = o.logits.clone();
                    if let Some(p) = prediction {
                        scale_logits(&mut logits, &ranges, p.task, p.confidence)?;
                    }
                    if predicts {
                        id_total += 1;
                        id_hits += (prediction.map(|p| p.task) == Some(t)) as usize;
                    }
                    let window = if mode == Mode::OracleId { ranges[t].clone() } else { 0..logits.len() };
                    let pred = window.start + argmax(&logits[window]);
                    let label = task.test.labels[chunk_idx * group + j];
                    correct += (pred == label) as usize;
                }
            }
            accuracies.push(100.0 * correct as f64 / task.test.len().max(1) as f64);
        }
        let task_id_accuracy = (id_total > 0).then(|| id_hits as f64 / id_total as f64);
        Ok(Evaluation { accuracies, task_id_accuracy })
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub acc_matrix: AccMatrix,
    pub acc: f64,
    pub ft: f64,
    pub ft_defined: bool,
    /// `ACC_t` after every task.
    pub acc_per_step: Vec<f64>,
    /// Mean of `acc_per_step`.
    pub avg_acc: f64,
    pub task_id_accuracy: Vec<Option<f64>>,
    pub outcomes: Vec<TaskOutcome>,
    pub wall_seconds: f64,
    /// Set when a component failed; the report then covers finished tasks.
    pub aborted: Option<String>,
}

/// Pretrains (or reuses) a backbone and runs the full continual sequence.
pub fn run_continual(fixture: &Fixture, encoder: &EncoderConfig, config: &CLConfig) -> Result<(RunReport, Learner)> {
    let backbone = pretrain_backbone(encoder, &fixture.pretext, fixture.pretext_classes, config)?;
    run_continual_with(fixture, encoder, backbone, config)
}

pub fn run_continual_with(
    fixture: &Fixture,
    encoder: &EncoderConfig,
    backbone: Backbone,
    config: &CLConfig,
) -> Result<(RunReport, Learner)> {
    if fixture.tasks.is_empty() {
        return Err(Error::Config("fixture has no tasks".into()));
    }
    let start = Instant::now();
    let mut learner = Learner::new(encoder.clone(), backbone, config.clone())?;
    let mut matrix = AccMatrix::default();
    let mut outcomes = Vec::new();
    let mut id_acc = Vec::new();
    let mut aborted = None;
    for (t, task) in fixture.tasks.iter().enumerate() {
        let step = learner
            .learn_task(task)
            .and_then(|o| learner.evaluate(&fixture.tasks[..=t]).map(|e| (o, e)));
        match step {
            Ok((outcome, eval)) => {
                info!(
                    "[{}] task {}: loss {:.4} -> accuracies {:?}",
                    config.mode,
                    t + 1,
                    outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    eval.accuracies
                );
                outcomes.push(outcome);
                id_acc.push(eval.task_id_accuracy);
                matrix.push(eval.accuracies)?;
            }
            Err(e) => {
                warn!("run aborted at task {}: {e}", t + 1);
                aborted = Some(format!("task {}: {e}", t + 1));
                break;
            }
        }
    }
    if matrix.tasks() == 0 {
        return Err(Error::State(aborted.unwrap_or_default()));
    }
    let metrics = compute_metrics(&matrix)?;
    let acc_per_step: Vec<f64> = (0..matrix.tasks())
        .map(|t| matrix.rows[t].iter().sum::<f64>() / (t + 1) as f64)
        .collect();
    let avg_acc = acc_per_step.iter().sum::<f64>() / acc_per_step.len() as f64;
    let report = RunReport {
        mode: config.mode,
        seed: config.seed,
        acc: metrics.acc,
        ft: metrics.ft,
        ft_defined: metrics.ft_defined,
        acc_matrix: matrix,
        acc_per_step,
        avg_acc,
        task_id_accuracy: id_acc,
        outcomes,
        wall_seconds: start.elapsed().as_secs_f64(),
        aborted,
    };
    Ok((report, learner))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccMatrix {
        let mut m = AccMatrix::default();
        for r in rows {
            m.push(r.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn metrics_hand_examples() {
        let m = compute_metrics(&matrix(&[&[90.0], &[80.0, 85.0]])).unwrap();
        assert_eq!((m.acc, m.ft), (82.5, 10.0));
        let m = compute_metrics(&matrix(&[&[70.0], &[70.0, 70.0]])).unwrap();
        assert_eq!((m.acc, m.ft), (70.0, 0.0));
        let m = compute_metrics(&matrix(&[&[60.0], &[70.0, 80.0]])).unwrap();
        assert_eq!(m.ft, 0.0);
        let m = compute_metrics(&matrix(&[&[55.0]])).unwrap();
        assert!(!m.ft_defined && m.ft == 0.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (l, g) = cross_entropy(&[0.3, 1.0, -2.0, 0.5], 1..4, 1);
        assert!(l > 0.0);
        assert_eq!(g[0], 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }
}
