//! Training loop shared by baseline training and self-distillation
//! fine-tuning of compressed models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compress::{CompressedVit, CompressionPlan};
use crate::data::{epoch_batches, Dataset};
use crate::error::{contract, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{argmax_rows, Vit};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Weight of the KL term; 0 disables distillation.
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    /// First epoch in which the merge / reconstruct matrices are frozen.
    pub freeze_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random ±2 pixel shifts with zero padding.
    pub random_crop: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            temperature: 1.0,
            epochs: 3,
            freeze_epoch: 2,
            lr: 1e-4,
            weight_decay: 0.001,
            batch_size: 32,
            seed: 0,
            random_crop: false,
        }
    }
}

impl DistillConfig {
    /// Settings for training the uncompressed model from scratch.
    pub fn baseline() -> Self {
        Self { alpha: 0.0, epochs: 8, freeze_epoch: 8, lr: 3e-3, weight_decay: 0.01, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be >= 0, got {}", self.alpha);
        contract!(self.temperature > 0.0, "temperature must be > 0, got {}", self.temperature);
        contract!(self.lr > 0.0 && self.weight_decay >= 0.0, "lr must be > 0 and weight decay >= 0");
        contract!(self.batch_size > 0, "batch size must be positive");
        contract!(
            self.epochs == 0 || (self.freeze_epoch > 0 && self.freeze_epoch <= self.epochs),
            "freeze epoch must be in 1..={}, got {}",
            self.epochs,
            self.freeze_epoch
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Loss sums over the steps of the current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningLoss {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    /// Whether the freeze-time row renormalisation has been applied.
    pub frozen: bool,
    pub moments: BTreeMap<String, Moments>,
    pub running: RunningLoss,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub lr: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,ce,kl,lr,val_acc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let acc = r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.8},{:.8},{:.8},{:.8e},{}\n", r.epoch, r.step, r.loss, r.ce, r.kl, r.lr, acc));
    }
    out
}

/// Cross-entropy plus `alpha`·KL(teacher ‖ student). Returns (loss, ce, kl).
pub fn self_distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let ce = tape.cross_entropy(student_logits, labels)?;
    match teacher_logits {
        Some(t) if alpha != 0.0 => {
            let kl = tape.kl_divergence(student_logits, t, temperature)?;
            let weighted = tape.scale(kl, alpha)?;
            Ok((tape.add(ce, weighted)?, ce, Some(kl)))
        }
        _ => Ok((ce, ce, None)),
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One decoupled-weight-decay Adam update of `param`.
fn adamw(moments: &mut Moments, param: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64, t: usize) {
    if moments.m.len() != param.len() {
        *moments = Moments { m: vec![0.0; param.len()], v: vec![0.0; param.len()] };
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let update = (moments.m[i] / bc1) / ((moments.v[i] / bc2).sqrt() + ADAM_EPS);
        param[i] -= lr * (update + weight_decay * param[i]);
    }
}

/// Shifts each image by up to ±2 pixels, filling with zeros.
fn random_shift(images: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; images.numel()];
    for bi in 0..b {
        let dy = rng.gen_range(-2i64..=2);
        let dx = rng.gen_range(-2i64..=2);
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        out[base + (y as usize) * w + x as usize] = images.data()[base + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Rescales each merge-matrix row to sum to one.
fn renormalize_rows(plan: &mut CompressionPlan) {
    for (_, e) in plan.entries_mut() {
        let n = e.merge.tokens();
        for row in e.merge.matrix.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s.abs() > 1e-12 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &CompressedVit, data: &Dataset, batch_size: usize) -> Result<f64> {
    contract!(!data.is_empty(), "evaluation set is empty");
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let pred = argmax_rows(&model.logits_fast(&images)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate_vit(model: &Vit, data: &Dataset, batch_size: usize) -> Result<f64> {
    let wrapped = CompressedVit { model: model.clone(), plan: CompressionPlan::exempt(model.config.depth) };
    evaluate(&wrapped, data, batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepLoss {
    loss: f64,
    ce: f64,
    kl: f64,
}

fn train_step(
    student: &mut CompressedVit,
    teacher: Option<&Vit>,
    images: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
    train_matrices: bool,
    lr: f64,
    state: &mut TrainState,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let (bound, entries, logits) = student.forward(&mut tape, images, true, train_matrices, None)?;
    let teacher_logits = match teacher {
        Some(t) if cfg.alpha != 0.0 => Some(t.logits(images)?),
        _ => None,
    };
    let (loss, ce, kl) = self_distill_loss(&mut tape, logits, teacher_logits.as_ref(), labels, cfg.alpha, cfg.temperature)?;
    let out = StepLoss {
        loss: tape.value(loss).item(),
        ce: tape.value(ce).item(),
        kl: kl.map_or(0.0, |k| tape.value(k).item()),
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: state.epoch, step: state.step, state: Box::new(state.clone()) });
    }
    tape.backward(loss)?;

    let t = state.step + 1;
    let mut vars = Vec::new();
    bound.for_each(&mut |_, v| vars.push(*v));
    let mut i = 0;
    student.model.params.for_each_mut(&mut |name, p| {
        if let Some(g) = tape.grad(vars[i]) {
            // Biases and norm parameters are not decayed.
            let wd = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = state.moments.entry(name.to_string()).or_default();
            adamw(m, p.data_mut(), g, lr, wd, t);
        }
        i += 1;
    });

    if train_matrices {
        for (l, e) in student.plan.entries_mut() {
            let Some(b) = entries[l] else { continue };
            let (n, m) = (e.tokens(), e.kept());
            if let Some(g) = tape.grad(b.merge) {
                let mut g = g.to_vec();
                for r in 0..m {
                    for j in (0..n).filter(|&j| e.mask.is_pruned(j)) {
                        g[r * n + j] = 0.0;
                    }
                }
                let mom = state.moments.entry(format!("plan.{l}.merge")).or_default();
                adamw(mom, e.merge.matrix.data_mut(), &g, lr, 0.0, t);
            }
            if let Some(g) = tape.grad(b.reconstruct) {
                let mut g = g.to_vec();
                for j in (0..n).filter(|&j| e.mask.is_pruned(j)) {
                    g[j * m..(j + 1) * m].fill(0.0);
                }
                let mom = state.moments.entry(format!("plan.{l}.reconstruct")).or_default();
                adamw(mom, e.reconstruct.matrix.data_mut(), &g, lr, 0.0, t);
            }
        }
    }
    Ok(out)
}

/// Runs (or resumes) training from `state` until `cfg.epochs` are done or
/// `max_steps` further steps have been taken. Returns one metrics row per
/// completed epoch.
pub fn train(
    student: &mut CompressedVit,
    teacher: Option<&Vit>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &DistillConfig,
    state: &mut TrainState,
    max_steps: Option<usize>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    contract!(train_set.len() >= cfg.batch_size, "training set has {} samples, batch size is {}", train_set.len(), cfg.batch_size);
    contract!(cfg.alpha == 0.0 || teacher.is_some(), "distillation with alpha > 0 needs a teacher");
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut budget = max_steps.unwrap_or(usize::MAX);
    let mut rows = Vec::new();

    while state.epoch < cfg.epochs {
        let train_matrices = state.epoch < cfg.freeze_epoch;
        if !train_matrices && !state.frozen {
            renormalize_rows(&mut student.plan);
            state.frozen = true;
        }
        let batches = epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, state.epoch);
        let first = state.step - state.epoch * per_epoch;
        for batch in &batches[first..] {
            if budget == 0 {
                return Ok(rows);
            }
            let (mut images, labels) = train_set.batch(batch)?;
            if cfg.random_crop {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                images = random_shift(&images, &mut rng);
            }
            let lr = cosine_lr(cfg.lr, state.step, total);
            let s = train_step(student, teacher, &images, &labels, cfg, train_matrices, lr, state)?;
            state.running.loss += s.loss;
            state.running.ce += s.ce;
            state.running.kl += s.kl;
            state.running.count += 1;
            state.step += 1;
            budget -= 1;
        }
        let r = state.running;
        let c = r.count.max(1) as f64;
        let val_acc = val_set.map(|v| evaluate(student, v, 256)).transpose()?;
        rows.push(MetricsRow {
            epoch: state.epoch,
            step: state.step,
            loss: r.loss / c,
            ce: r.ce / c,
            kl: r.kl / c,
            lr: cosine_lr(cfg.lr, state.step, total),
            val_acc,
        });
        state.running = RunningLoss::default();
        state.epoch += 1;
    }
    Ok(rows)
}

/// Trains an uncompressed model from scratch.
pub fn train_baseline(
    model: &mut Vit,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<Vec<MetricsRow>> {
    let mut wrapped = CompressedVit { model: model.clone(), plan: CompressionPlan::exempt(model.config.depth) };
    let mut state = TrainState::new(cfg.seed);
    let cfg = DistillConfig { alpha: 0.0, ..cfg.clone() };
    let rows = train(&mut wrapped, None, train_set, val_set, &cfg, &mut state, None)?;
    *model = wrapped.model;
    Ok(rows)
}

/// Fine-tunes `student` against the frozen `teacher`.
pub fn finetune(
    student: &mut CompressedVit,
    teacher: &Vit,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<(Vec<MetricsRow>, TrainState)> {
    let mut state = TrainState::new(cfg.seed);
    let rows = train(student, Some(teacher), train_set, val_set, cfg, &mut state, None)?;
    Ok((rows, state))
}
