//! AdamW, the learning-rate schedule, synthetic desk-scale tasks, the
//! training loop, and the multi-phase continual-adaptation runner.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{ParamId, SharedParamStore, TapeBinding};
use crate::error::{Error, Result};
use crate::model::{Batch, TinyTransformer, TokenBatch};
use crate::tensor::Tape;

// ── optimizer ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment arrays, one entry per trainable parameter (shared
/// parameters appear once because the store holds a single entry).
#[derive(Default)]
pub struct OptimizerState {
    pub m: BTreeMap<ParamId, Vec<f64>>,
    pub v: BTreeMap<ParamId, Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> usize {
        self.m.len()
    }
}

/// One decoupled-weight-decay Adam step over the harvested gradients.
pub fn adamw_step(
    store: &mut SharedParamStore,
    grads: &BTreeMap<ParamId, Vec<f64>>,
    state: &mut OptimizerState,
    hyper: &AdamWHyper,
    lr: f64,
) -> Result<()> {
    for (pid, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: store.param(*pid).name.clone(),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (pid, g) in grads {
        let n = g.len();
        let m = state.m.entry(*pid).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(*pid).or_insert_with(|| vec![0.0; n]);
        let p = &mut store.param_mut(*pid).data;
        for i in 0..n {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Linear ramp to `base_lr` over the warmup fraction, then linear decay to 0.
pub fn linear_warmup_schedule(step: u64, warmup_ratio: f64, total_steps: u64, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    let warmup = (warmup_ratio * total_steps as f64).round() as u64;
    if warmup > 0 && step <= warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps > warmup {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    } else {
        base_lr
    }
}

// ── tasks ───────────────────────────────────────────────────────────

/// Left-padding filler for variable-length examples.
pub const PAD_TOKEN: usize = 0;
/// Separator / equals / CLS marker token; task symbols start at 2.
pub const MARKER_TOKEN: usize = 1;
pub const SYMBOL_BASE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// Reproduce a symbol sequence after a separator.
    CopyLm { copy_len: usize, alphabet: usize },
    /// Predict (a + b) mod p from unary-coded operands:
    /// `pad* U^a MARKER U^b MARKER -> answer`. Held-out (a, b) pairs share
    /// totals with training pairs, so the task is solvable by attention
    /// counting rather than pair memorization.
    ModularArithmeticLm { modulus: usize },
    /// Predict a class token from a bag of feature tokens; the class is the
    /// count of the zero feature modulo n_classes.
    SyntheticClassification { seq_len: usize, alphabet: usize, n_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default)]
    pub train_seed: u64,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
}

fn default_eval_seed() -> u64 {
    1
}

fn default_eval_size() -> usize {
    64
}

impl TaskSpec {
    pub fn copy_lm(copy_len: usize, alphabet: usize) -> Self {
        TaskSpec {
            kind: TaskKind::CopyLm { copy_len, alphabet },
            train_seed: 0,
            eval_seed: 1,
            eval_size: 64,
        }
    }

    pub fn modular(modulus: usize) -> Self {
        TaskSpec {
            kind: TaskKind::ModularArithmeticLm { modulus },
            train_seed: 0,
            eval_seed: 1,
            eval_size: 64,
        }
    }

    pub fn classification(seq_len: usize, alphabet: usize, n_classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::SyntheticClassification { seq_len, alphabet, n_classes },
            train_seed: 0,
            eval_seed: 1,
            eval_size: 64,
        }
    }

    /// Largest token id this task emits.
    pub fn max_token(&self) -> usize {
        match self.kind {
            TaskKind::CopyLm { alphabet, .. } => SYMBOL_BASE + alphabet - 1,
            // Answer tokens are SYMBOL_BASE..SYMBOL_BASE+p; the unary mark
            // sits one past them.
            TaskKind::ModularArithmeticLm { modulus } => SYMBOL_BASE + modulus,
            TaskKind::SyntheticClassification { alphabet, n_classes, .. } => {
                SYMBOL_BASE + alphabet.max(n_classes) - 1
            }
        }
    }

    /// Model input length (one less than the generated sequence).
    pub fn input_len(&self) -> usize {
        match self.kind {
            TaskKind::CopyLm { copy_len, .. } => 2 * copy_len,
            TaskKind::ModularArithmeticLm { modulus } => 2 * modulus,
            TaskKind::SyntheticClassification { seq_len, .. } => seq_len + 1,
        }
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        let ok = match self.kind {
            TaskKind::CopyLm { copy_len, alphabet } => copy_len >= 1 && alphabet >= 2,
            TaskKind::ModularArithmeticLm { modulus } => modulus >= 2,
            TaskKind::SyntheticClassification { seq_len, alphabet, n_classes } => {
                seq_len >= 1 && alphabet >= 2 && n_classes >= 2
            }
        };
        if !ok {
            return Err(Error::Config(format!("degenerate task parameters: {:?}", self.kind)));
        }
        if self.max_token() >= vocab_size {
            return Err(Error::Config(format!(
                "task needs token id {} but vocab is {vocab_size}",
                self.max_token()
            )));
        }
        if self.input_len() > max_seq_len {
            return Err(Error::Config(format!(
                "task input length {} exceeds max_seq_len {max_seq_len}",
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Full token sequence of one example (inputs plus the trailing target).
    fn sample_sequence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.kind {
            TaskKind::CopyLm { copy_len, alphabet } => {
                let payload: Vec<usize> =
                    (0..copy_len).map(|_| SYMBOL_BASE + rng.gen_range(0..alphabet)).collect();
                let mut seq = payload.clone();
                seq.push(MARKER_TOKEN);
                seq.extend_from_slice(&payload);
                seq
            }
            TaskKind::ModularArithmeticLm { modulus } => {
                let a = rng.gen_range(0..modulus);
                let b = rng.gen_range(0..modulus);
                let unary = SYMBOL_BASE + modulus;
                let total = 2 * modulus + 1;
                let mut seq = vec![PAD_TOKEN; total - (a + b + 3)];
                seq.extend(std::iter::repeat(unary).take(a));
                seq.push(MARKER_TOKEN);
                seq.extend(std::iter::repeat(unary).take(b));
                seq.push(MARKER_TOKEN);
                seq.push(SYMBOL_BASE + (a + b) % modulus);
                seq
            }
            TaskKind::SyntheticClassification { seq_len, alphabet, n_classes } => {
                let feats: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..alphabet)).collect();
                let class = feats.iter().filter(|&&f| f == 0).count() % n_classes;
                let mut seq: Vec<usize> = feats.iter().map(|&f| SYMBOL_BASE + f).collect();
                seq.push(MARKER_TOKEN);
                seq.push(SYMBOL_BASE + class);
                seq
            }
        }
    }

    /// Deterministic bucket split keeps the eval set disjoint from training
    /// samples by construction: an example belongs to eval iff its content
    /// hash lands in bucket 0 of 8.
    fn is_eval_sample(&self, seq: &[usize]) -> bool {
        let mut h: u64 = 0x243f_6a88_85a3_08d3;
        for &t in seq {
            h = splitmix64(h ^ t as u64);
        }
        h % 8 == 0
    }

    fn sample_train_sequence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        loop {
            let seq = self.sample_sequence(rng);
            if !self.is_eval_sample(&seq) {
                return seq;
            }
        }
    }

    /// Fixed held-out set: distinct eval-bucket examples drawn from the eval
    /// seed. Small discrete tasks may exhaust their eval bucket early.
    pub fn eval_set(&self) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed ^ 0x5851_f42d_4c95_7f2d);
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut attempts = 0usize;
        let cap = self.eval_size * 10_000;
        while out.len() < self.eval_size && attempts < cap {
            attempts += 1;
            let seq = self.sample_sequence(&mut rng);
            if self.is_eval_sample(&seq) && seen.insert(seq.clone()) {
                out.push(seq);
            }
        }
        out
    }

    /// Positions of the model input that contribute to the loss.
    fn loss_mask(&self, input_len: usize) -> Vec<bool> {
        match self.kind {
            TaskKind::CopyLm { copy_len, .. } => {
                (0..input_len).map(|t| t >= copy_len).collect()
            }
            _ => {
                let mut m = vec![false; input_len];
                m[input_len - 1] = true;
                m
            }
        }
    }

    fn to_batch(&self, sequences: &[Vec<usize>]) -> Result<Batch> {
        let b = sequences.len();
        let t = self.input_len();
        let mut tokens = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        let row_mask = self.loss_mask(t);
        for seq in sequences {
            debug_assert_eq!(seq.len(), t + 1);
            tokens.extend_from_slice(&seq[..t]);
            targets.extend_from_slice(&seq[1..]);
            mask.extend_from_slice(&row_mask);
        }
        Ok(Batch {
            inputs: TokenBatch::new(tokens, b, t)?,
            targets,
            mask,
        })
    }

    pub fn train_batch(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch> {
        let seqs: Vec<Vec<usize>> = (0..batch_size).map(|_| self.sample_train_sequence(rng)).collect();
        self.to_batch(&seqs)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

// ── metrics ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsEntry {
    pub step: u64,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub entries: Vec<MetricsEntry>,
}

impl MetricsLog {
    fn push(&mut self, step: u64, split: &'static str, metric: &'static str, value: f64) {
        self.entries.push(MetricsEntry { step, split, metric, value });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.step, e.split, e.metric, e.value));
        }
        out
    }

    /// Eval-loss series in step order.
    pub fn eval_losses(&self) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.split == "eval" && e.metric == "loss")
            .map(|e| (e.step, e.value))
            .collect()
    }
}

// ── training loop ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    #[serde(default)]
    pub adamw: AdamWHyper,
    pub eval_every: u64,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

fn default_divergence() -> f64 {
    1e4
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            steps: 500,
            batch_size: 16,
            lr: 2e-2,
            warmup_ratio: 0.06,
            adamw: AdamWHyper::default(),
            eval_every: 50,
            divergence_threshold: 1e4,
        }
    }
}

pub struct TrainOutcome {
    pub log: MetricsLog,
    /// Parameter snapshot at the best eval loss.
    pub best: BTreeMap<String, Vec<f64>>,
    pub best_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
    pub optimizer_entries: usize,
}

/// Mean loss and token accuracy over a fixed evaluation set.
pub fn evaluate(model: &TinyTransformer, task: &TaskSpec, eval_set: &[Vec<usize>]) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut rows = 0usize;
    for chunk in eval_set.chunks(32) {
        let batch = task.to_batch(chunk)?;
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let logits = model.forward(&mut tape, &mut bind, &batch.inputs)?;
        let loss = tape.cross_entropy_masked(logits, &batch.targets, &batch.mask)?;
        let masked_rows = batch.mask.iter().filter(|&&m| m).count();
        total_loss += tape.data(loss)[0] * masked_rows as f64;
        rows += masked_rows;
        let vocab = model.spec.vocab_size;
        let data = tape.data(logits);
        for (i, (&target, &m)) in batch.targets.iter().zip(&batch.mask).enumerate() {
            if !m {
                continue;
            }
            let row = &data[i * vocab..(i + 1) * vocab];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if argmax == target {
                correct += 1;
            }
            counted += 1;
        }
    }
    Ok((total_loss / rows as f64, correct as f64 / counted as f64))
}

/// Deterministic training run: fixed (seed, config) reproduces the metrics
/// log byte for byte. The best checkpoint is selected by eval loss.
pub fn run_training(model: &mut TinyTransformer, task: &TaskSpec, hyper: &Hyper, seed: u64) -> Result<TrainOutcome> {
    task.validate(model.spec.vocab_size, model.spec.max_seq_len)?;
    let eval_set = task.eval_set();
    if eval_set.is_empty() {
        return Err(Error::Config("task eval bucket is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ task.train_seed));
    let mut opt = OptimizerState::new();
    let mut log = MetricsLog::default();
    let mut best = model.store.snapshot();
    let mut best_eval_loss = f64::INFINITY;
    let mut final_eval = (f64::INFINITY, 0.0);

    let (l0, a0) = evaluate(model, task, &eval_set)?;
    log.push(0, "eval", "loss", l0);
    log.push(0, "eval", "accuracy", a0);
    if l0 < best_eval_loss {
        best_eval_loss = l0;
        final_eval = (l0, a0);
    }

    for step in 1..=hyper.steps {
        let batch = task.train_batch(&mut rng, hyper.batch_size)?;
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let loss = model.loss(&mut tape, &mut bind, &batch)?;
        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() || loss_val > hyper.divergence_threshold {
            return Err(Error::Divergence { step, loss: loss_val });
        }
        log.push(step, "train", "loss", loss_val);
        tape.backward(loss)?;
        let grads = bind.harvest(&tape, &model.store);
        let lr = linear_warmup_schedule(step, hyper.warmup_ratio, hyper.steps, hyper.lr);
        adamw_step(&mut model.store, &grads, &mut opt, &hyper.adamw, lr)?;

        if step % hyper.eval_every == 0 || step == hyper.steps {
            let (l, a) = evaluate(model, task, &eval_set)?;
            log.push(step, "eval", "loss", l);
            log.push(step, "eval", "accuracy", a);
            if l < best_eval_loss {
                best_eval_loss = l;
                best = model.store.snapshot();
            }
            final_eval = (l, a);
        }
    }

    Ok(TrainOutcome {
        log,
        best,
        best_eval_loss,
        final_eval_loss: final_eval.0,
        final_eval_accuracy: final_eval.1,
        optimizer_entries: opt.entries(),
    })
}

// ── continual adaptation ────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub task: TaskSpec,
    pub steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    /// Ordered phases; phase p > 1 warm-starts from phase p-1's best checkpoint.
    pub phases: Vec<Phase>,
    /// Tasks evaluated after every phase (name, task).
    pub eval_tasks: Vec<NamedTask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTask {
    pub name: String,
    pub task: TaskSpec,
}

/// `loss[p][t]` / `accuracy[p][t]`: metric on eval task t after phase p.
#[derive(Clone, Debug, Serialize)]
pub struct RetentionMatrix {
    pub schema_version: u32,
    pub scheme: String,
    pub seed: u64,
    pub phase_names: Vec<String>,
    pub task_names: Vec<String>,
    pub loss: Vec<Vec<f64>>,
    pub accuracy: Vec<Vec<f64>>,
    /// accuracy[last][t] - accuracy[own phase of t][t]; None for tasks that
    /// were never a training phase.
    pub backward_transfer: Vec<Option<f64>>,
}

pub struct ContinualOutcome {
    pub retention: RetentionMatrix,
    pub phase_logs: Vec<MetricsLog>,
}

pub fn run_continual(
    model: &mut TinyTransformer,
    plan: &PhasePlan,
    hyper: &Hyper,
    seed: u64,
) -> Result<ContinualOutcome> {
    if plan.phases.len() < 2 {
        return Err(Error::Contract("a phase plan needs at least 2 phases".into()));
    }
    for nt in &plan.eval_tasks {
        nt.task.validate(model.spec.vocab_size, model.spec.max_seq_len)?;
    }
    let eval_sets: Vec<Vec<Vec<usize>>> = plan.eval_tasks.iter().map(|nt| nt.task.eval_set()).collect();

    let mut loss_rows = Vec::new();
    let mut acc_rows = Vec::new();
    let mut phase_logs = Vec::new();
    for (p, phase) in plan.phases.iter().enumerate() {
        let mut phase_hyper = hyper.clone();
        phase_hyper.steps = phase.steps;
        let outcome = run_training(model, &phase.task, &phase_hyper, splitmix64(seed).wrapping_add(p as u64))?;
        // Continue (and evaluate) from the best checkpoint of this phase.
        model.store.restore(&outcome.best)?;
        phase_logs.push(outcome.log);

        let mut lrow = Vec::new();
        let mut arow = Vec::new();
        for (nt, es) in plan.eval_tasks.iter().zip(&eval_sets) {
            let (l, a) = evaluate(model, &nt.task, es)?;
            lrow.push(l);
            arow.push(a);
        }
        loss_rows.push(lrow);
        acc_rows.push(arow);
    }

    let last = plan.phases.len() - 1;
    let backward_transfer = plan
        .eval_tasks
        .iter()
        .enumerate()
        .map(|(t, nt)| {
            plan.phases
                .iter()
                .rposition(|ph| ph.name == nt.name)
                .map(|own| acc_rows[last][t] - acc_rows[own][t])
        })
        .collect();

    Ok(ContinualOutcome {
        retention: RetentionMatrix {
            schema_version: 1,
            scheme: model.scheme.label(),
            seed,
            phase_names: plan.phases.iter().map(|p| p.name.clone()).collect(),
            task_names: plan.eval_tasks.iter().map(|t| t.name.clone()).collect(),
            loss: loss_rows,
            accuracy: acc_rows,
            backward_transfer,
        },
        phase_logs,
    })
}
