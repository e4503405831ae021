//! Loss functions, optimizers, and the epoch/batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchInput, BatchOutput, NetworkGraph, OutputGrads};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    Mae,
    CategoricalCe,
    BinaryCe,
    Hinge,
}

fn check_probabilities<S: Scalar>(pred: &Tensor<S>) -> Result<()> {
    let tol = 1e-6;
    for &p in pred.data() {
        let v = p.to_f64();
        if !(-tol..=1.0 + tol).contains(&v) {
            return Err(Error::Domain(format!(
                "probability {v} outside [0, 1] beyond tolerance {tol}"
            )));
        }
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Loss value and gradient w.r.t. the predictions.
///
/// MSE/MAE/BCE/hinge average over every element; categorical cross-entropy
/// treats a rank-1 input as one distribution and a rank-2 input as a batch
/// of rows, averaging over rows. Cross-entropy targets are one-hot tensors
/// (see [`one_hot`]); hinge targets are -1/+1 margins.
pub fn loss<S: Scalar>(kind: LossKind, pred: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape_mismatch(pred.shape(), target.shape(), "loss"));
    }
    let n = pred.len() as f64;
    match kind {
        LossKind::Mse => {
            let mut acc = 0.0f64;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.data().iter().zip(target.data()) {
                let d = p.to_f64() - y.to_f64();
                acc += d * d;
                grad.push(S::from_f64(2.0 * d / n));
            }
            Ok((S::from_f64(acc / n), Tensor::new(pred.shape().to_vec(), grad)?))
        }
        LossKind::Mae => {
            let mut acc = 0.0f64;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.data().iter().zip(target.data()) {
                let d = p.to_f64() - y.to_f64();
                acc += d.abs();
                grad.push(S::from_f64(d.signum() / n));
            }
            Ok((S::from_f64(acc / n), Tensor::new(pred.shape().to_vec(), grad)?))
        }
        LossKind::CategoricalCe => {
            check_probabilities(pred)?;
            let rows = if pred.rank() == 2 { pred.shape()[0] } else { 1 };
            let mut acc = 0.0f64;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.data().iter().zip(target.data()) {
                let pv = p.to_f64();
                let c = clamp_prob(pv);
                acc -= y.to_f64() * c.ln();
                // the clamp is part of the forward; outside it the slope is zero
                let g = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                    -y.to_f64() / c / rows as f64
                } else {
                    0.0
                };
                grad.push(S::from_f64(g));
            }
            Ok((
                S::from_f64(acc / rows as f64),
                Tensor::new(pred.shape().to_vec(), grad)?,
            ))
        }
        LossKind::BinaryCe => {
            check_probabilities(pred)?;
            let mut acc = 0.0f64;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.data().iter().zip(target.data()) {
                let pv = p.to_f64();
                let c = clamp_prob(pv);
                let yv = y.to_f64();
                acc -= yv * c.ln() + (1.0 - yv) * (1.0 - c).ln();
                let g = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                    (-yv / c + (1.0 - yv) / (1.0 - c)) / n
                } else {
                    0.0
                };
                grad.push(S::from_f64(g));
            }
            Ok((S::from_f64(acc / n), Tensor::new(pred.shape().to_vec(), grad)?))
        }
        LossKind::Hinge => {
            let mut acc = 0.0f64;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.data().iter().zip(target.data()) {
                let margin = 1.0 - y.to_f64() * p.to_f64();
                if margin > 0.0 {
                    acc += margin;
                    grad.push(S::from_f64(-y.to_f64() / n));
                } else {
                    grad.push(S::ZERO);
                }
            }
            Ok((S::from_f64(acc / n), Tensor::new(pred.shape().to_vec(), grad)?))
        }
    }
}

/// One-hot target row for categorical cross-entropy.
pub fn one_hot<S: Scalar>(class: usize, classes: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[class] = S::ONE;
    t
}

/// Multi-task detector loss: `MSE(objectness) + gamma * CE(classes)`, both
/// averaged over the batch. Returns the scalar and per-sample gradients for
/// each head.
#[allow(clippy::type_complexity)]
pub fn multitask_loss<S: Scalar>(
    pred_obj: &[Tensor<S>],
    target_obj: &[f32],
    pred_cls: &[Tensor<S>],
    target_cls: &[usize],
    gamma: f64,
) -> Result<(S, Vec<Tensor<S>>, Vec<Tensor<S>>)> {
    if gamma < 0.0 {
        return Err(Error::Domain("multi-task weight gamma must be >= 0".into()));
    }
    let n = pred_obj.len();
    if n != target_obj.len() || n != pred_cls.len() || n != target_cls.len() {
        return Err(Error::Config("multitask batch lengths disagree".into()));
    }
    let mut total = 0.0f64;
    let mut grads_obj = Vec::with_capacity(n);
    let mut grads_cls = Vec::with_capacity(n);
    for i in 0..n {
        let t = Tensor::<S>::from_vec(vec![S::from_f64(target_obj[i] as f64)]);
        let (l, g) = loss(LossKind::Mse, &pred_obj[i], &t)?;
        total += l.to_f64() / n as f64;
        grads_obj.push(scale(&g, 1.0 / n as f64));

        let classes = pred_cls[i].len();
        let t = one_hot::<S>(target_cls[i], classes);
        let (l, g) = loss(LossKind::CategoricalCe, &pred_cls[i], &t)?;
        total += gamma * l.to_f64() / n as f64;
        grads_cls.push(scale(&g, gamma / n as f64));
    }
    Ok((S::from_f64(total), grads_obj, grads_cls))
}

fn scale<S: Scalar>(t: &Tensor<S>, by: f64) -> Tensor<S> {
    t.map(|v| v * S::from_f64(by))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    AdaGrad { eps: f32 },
    RmsProp { rho: f32, eps: f32 },
    Adam { rho1: f32, rho2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adagrad() -> Self {
        OptimizerKind::AdaGrad { eps: 1e-8 }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp { rho: 0.9, eps: 1e-8 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            rho1: 0.9,
            rho2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state: squared-gradient history `r`, first
/// moment `s` (Adam only), and the step counter.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    r: Vec<Tensor>,
    s: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer {
            kind,
            lr,
            r: Vec::new(),
            s: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// In-place parameter update. Non-finite gradients abort the step.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Domain(format!(
                    "non-finite gradient for parameter {i}; aborting optimizer step"
                )));
            }
        }
        if self.r.is_empty() {
            self.r = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.s = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::AdaGrad { eps } => {
                for ((p, g), r) in params.iter_mut().zip(grads).zip(&mut self.r) {
                    for ((pv, &gv), rv) in p.data_mut().iter_mut().zip(g.data()).zip(r.data_mut()) {
                        *rv += gv * gv;
                        *pv -= lr * gv / (eps + rv.sqrt());
                    }
                }
            }
            OptimizerKind::RmsProp { rho, eps } => {
                for ((p, g), r) in params.iter_mut().zip(grads).zip(&mut self.r) {
                    for ((pv, &gv), rv) in p.data_mut().iter_mut().zip(g.data()).zip(r.data_mut()) {
                        *rv = rho * *rv + (1.0 - rho) * gv * gv;
                        *pv -= lr * gv / (eps + *rv).sqrt();
                    }
                }
            }
            OptimizerKind::Adam { rho1, rho2, eps } => {
                // standard bias-corrected form
                let c1 = 1.0 - rho1.powi(self.step as i32);
                let c2 = 1.0 - rho2.powi(self.step as i32);
                for (((p, g), r), s) in params.iter_mut().zip(grads).zip(&mut self.r).zip(&mut self.s) {
                    for (((pv, &gv), rv), sv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(r.data_mut())
                        .zip(s.data_mut())
                    {
                        *sv = rho1 * *sv + (1.0 - rho1) * gv;
                        *rv = rho2 * *rv + (1.0 - rho2) * gv * gv;
                        let s_hat = *sv / c1;
                        let r_hat = *rv / c2;
                        *pv -= lr * s_hat / (r_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    /// Multi-task weight between objectness regression and classification
    /// (dual-head detector only).
    pub gamma: f32,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, loss: LossKind) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            seed: 0,
            loss,
            learning_rate: 0.01,
            optimizer: OptimizerKind::adam(),
            gamma: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lr(mut self, lr: f32) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_optimizer(mut self, kind: OptimizerKind) -> Self {
        self.optimizer = kind;
        self
    }

    pub fn with_gamma(mut self, gamma: f32) -> Self {
        self.gamma = gamma;
        self
    }
}

#[derive(Debug, Clone)]
pub enum SampleInput {
    Single(Tensor),
    Pair(Tensor, Tensor),
}

#[derive(Debug, Clone, Copy)]
pub enum Target {
    Class(usize),
    Score(f32),
    Dual { objectness: f32, class: usize },
}

/// A labeled dataset ready for the training loop.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub inputs: Vec<SampleInput>,
    pub targets: Vec<Target>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: SampleInput, target: Target) {
        self.inputs.push(input);
        self.targets.push(target);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,val_metric")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6}",
                row.epoch, row.train_loss, row.val_loss, row.val_metric
            )?;
        }
        Ok(())
    }
}

/// A shuffled visit order for one epoch: always a permutation of `0..n`.
fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Batch boundaries over a sample count. The last batch may be smaller and
/// is trained, not dropped; a lone trailing sample is folded into the
/// previous batch because batch normalization needs at least two samples.
fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        ranges.push((start, end));
        start = end;
    }
    if ranges.len() >= 2 {
        let last = ranges[ranges.len() - 1];
        if last.1 - last.0 == 1 {
            let prev = ranges.len() - 2;
            ranges[prev].1 = last.1;
            ranges.pop();
        }
    }
    ranges
}

fn gather_batch(set: &TrainSet, order: &[usize]) -> (Vec<Tensor>, Vec<(Tensor, Tensor)>, Vec<Target>) {
    let mut singles = Vec::new();
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for &i in order {
        match &set.inputs[i] {
            SampleInput::Single(t) => singles.push(t.clone()),
            SampleInput::Pair(a, b) => pairs.push((a.clone(), b.clone())),
        }
        targets.push(set.targets[i]);
    }
    (singles, pairs, targets)
}

/// Loss and per-sample output gradients for one batch under the configured
/// loss kind, already scaled for the batch mean.
fn batch_loss_and_grads(
    kind: LossKind,
    gamma: f32,
    outputs: &BatchOutput,
    targets: &[Target],
) -> Result<(f64, OutputGrads)> {
    match outputs {
        BatchOutput::Single(preds) => {
            let n = preds.len() as f64;
            let mut total = 0.0f64;
            let mut grads = Vec::with_capacity(preds.len());
            for (pred, target) in preds.iter().zip(targets) {
                let target_tensor = match *target {
                    Target::Class(c) => one_hot::<f32>(c, pred.len()),
                    Target::Score(v) => Tensor::filled(pred.shape(), v),
                    Target::Dual { .. } => {
                        return Err(Error::Config("dual target fed to single-output network".into()))
                    }
                };
                let (l, g) = loss(kind, pred, &target_tensor)?;
                total += l as f64 / n;
                grads.push(scale(&g, 1.0 / n));
            }
            Ok((total, OutputGrads::Single(grads)))
        }
        BatchOutput::Dual { objectness, classes } => {
            let mut t_obj = Vec::with_capacity(targets.len());
            let mut t_cls = Vec::with_capacity(targets.len());
            for target in targets {
                match *target {
                    Target::Dual { objectness: o, class: c } => {
                        t_obj.push(o);
                        t_cls.push(c);
                    }
                    _ => return Err(Error::Config("dual-head network needs dual targets".into())),
                }
            }
            let (l, gobj, gcls) = multitask_loss(objectness, &t_obj, classes, &t_cls, gamma as f64)?;
            Ok((
                l as f64,
                OutputGrads::Dual {
                    objectness: gobj,
                    classes: gcls,
                },
            ))
        }
    }
}

/// Validation loss plus a task metric: classification accuracy for class
/// outputs, root-mean-square error for score outputs.
pub fn evaluate(net: &NetworkGraph, set: &TrainSet, kind: LossKind, gamma: f32) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..set.len()).collect();
    let (singles, pairs, targets) = gather_batch(set, &order);
    let input = if pairs.is_empty() {
        BatchInput::Single(&singles)
    } else {
        BatchInput::Pair(&pairs)
    };
    let outputs = net.infer_batch(&input)?;
    let (loss_value, _) = batch_loss_and_grads(kind, gamma, &outputs, &targets)?;

    let metric = match &outputs {
        BatchOutput::Single(preds) => {
            let mut correct = 0usize;
            let mut sq = 0.0f64;
            let mut classify = false;
            for (pred, target) in preds.iter().zip(&targets) {
                match *target {
                    Target::Class(c) => {
                        classify = true;
                        if crate::tensor::argmax_all(pred) == c {
                            correct += 1;
                        }
                    }
                    Target::Score(v) => {
                        let d = pred.data()[0] as f64 - v as f64;
                        sq += d * d;
                    }
                    Target::Dual { .. } => unreachable!("rejected above"),
                }
            }
            if classify {
                correct as f64 / preds.len() as f64
            } else {
                (sq / preds.len() as f64).sqrt()
            }
        }
        BatchOutput::Dual { classes, .. } => {
            let mut correct = 0usize;
            for (pred, target) in classes.iter().zip(&targets) {
                if let Target::Dual { class, .. } = *target {
                    if crate::tensor::argmax_all(pred) == class {
                        correct += 1;
                    }
                }
            }
            correct as f64 / classes.len() as f64
        }
    };
    Ok((loss_value, metric))
}

/// Mini-batch gradient descent over the configured number of epochs.
/// Deterministic given the config seed. A non-finite loss aborts with a
/// divergence error carrying the epoch index.
pub fn train(
    net: &mut NetworkGraph,
    train_set: &TrainSet,
    val_set: Option<&TrainSet>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_set.len(), &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (start, end) in batch_ranges(train_set.len(), cfg.batch_size) {
            let (singles, pairs, targets) = gather_batch(train_set, &order[start..end]);
            let input = if pairs.is_empty() {
                BatchInput::Single(&singles)
            } else {
                BatchInput::Pair(&pairs)
            };
            let (outputs, tape) = net.forward_train(&input, &mut dropout_rng)?;
            let (batch_loss, out_grads) = batch_loss_and_grads(cfg.loss, cfg.gamma, &outputs, &targets)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            batches += 1;
            let grads = net.backward(&tape, out_grads)?;
            optimizer.apply(net.params.values_mut(), &grads)?;
        }
        let train_loss = epoch_loss / batches as f64;
        let (val_loss, val_metric) = match val_set {
            Some(vs) if !vs.is_empty() => evaluate(net, vs, cfg.loss, cfg.gamma)?,
            _ => (f64::NAN, f64::NAN),
        };
        log.rows.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            val_metric,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_rel_err, FD_STEP};
    use rand::Rng;

    #[test]
    fn mse_of_equal_is_zero() {
        let y = Tensor::from_vec(vec![0.3f32, -0.5]);
        let (l, g) = loss(LossKind::Mse, &y, &y).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bce_half_is_ln_two() {
        let p = Tensor::from_vec(vec![0.5f32]);
        let y = Tensor::from_vec(vec![1.0f32]);
        let (l, _) = loss(LossKind::BinaryCe, &p, &y).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6, "{l}");
    }

    #[test]
    fn bce_rejects_out_of_range_probability() {
        let p = Tensor::from_vec(vec![1.5f32]);
        let y = Tensor::from_vec(vec![1.0f32]);
        assert!(loss(LossKind::BinaryCe, &p, &y).is_err());
    }

    #[test]
    fn cce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let target = one_hot::<f64>(rng.gen_range(0..k), k);
            let pred = Tensor::from_vec(probs.clone());
            let (_, g) = loss(LossKind::CategoricalCe, &pred, &target).unwrap();
            let numeric = fd_gradient(
                &mut |x| {
                    let p = Tensor::from_vec(x.to_vec());
                    loss(LossKind::CategoricalCe, &p, &target).unwrap().0
                },
                &probs,
                FD_STEP,
            );
            let analytic: Vec<f64> = g.data().to_vec();
            assert!(max_rel_err(&analytic, &numeric, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn multitask_loss_examples() {
        // perfect predictions give zero loss
        let obj = vec![Tensor::from_vec(vec![0.7f32])];
        let cls = vec![Tensor::from_vec(vec![0.0f32, 1.0])];
        let (l, _, _) = multitask_loss(&obj, &[0.7], &cls, &[1], 3.0).unwrap();
        // CE of a clamped 1.0 prediction is -ln(1 - 1e-7), effectively zero
        assert!(l.abs() < 1e-5, "{l}");

        // gamma = 0 reduces to the MSE term alone
        let cls_bad = vec![Tensor::from_vec(vec![0.9f32, 0.1])];
        let (l0, _, gcls) = multitask_loss(&obj, &[0.2], &cls_bad, &[1], 0.0).unwrap();
        assert!((l0 - 0.25).abs() < 1e-6, "{l0}");
        assert!(gcls[0].data().iter().all(|&v| v == 0.0));

        assert!(multitask_loss(&obj, &[0.2], &cls_bad, &[1], -1.0).is_err());
    }

    #[test]
    fn sgd_single_step() {
        let mut params = vec![Tensor::from_vec(vec![1.0f32])];
        let grads = vec![Tensor::from_vec(vec![0.5f32])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.apply(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // hand-computed: s_hat = g, r_hat = g^2, so the first update is
        // -lr * g / (|g| + eps) = -lr * sign(g)
        let mut params = vec![Tensor::from_vec(vec![0.0f32])];
        let grads = vec![Tensor::from_vec(vec![0.5f32])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01);
        opt.apply(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] + 0.01).abs() < 1e-6, "{}", params[0].data()[0]);
    }

    #[test]
    fn adagrad_updates_shrink() {
        let mut params = vec![Tensor::from_vec(vec![1.0f32])];
        let grads = vec![Tensor::from_vec(vec![0.5f32])];
        let mut opt = Optimizer::new(OptimizerKind::adagrad(), 0.1);
        let before = params[0].data()[0];
        opt.apply(&mut params, &grads).unwrap();
        let first = (before - params[0].data()[0]).abs();
        let mid = params[0].data()[0];
        opt.apply(&mut params, &grads).unwrap();
        let second = (mid - params[0].data()[0]).abs();
        assert!(second < first);
    }

    #[test]
    fn optimizer_rejects_non_finite_gradients() {
        let mut params = vec![Tensor::from_vec(vec![1.0f32])];
        let grads = vec![Tensor::from_vec(vec![f32::NAN])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(opt.apply(&mut params, &grads).is_err());
    }

    #[test]
    fn sgd_converges_monotonically_on_quadratic() {
        // f(t) = (t - 3)^2
        let mut theta = vec![Tensor::from_vec(vec![0.0f32])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut last = (theta[0].data()[0] - 3.0).abs();
        for _ in 0..50 {
            let g = vec![Tensor::from_vec(vec![2.0 * (theta[0].data()[0] - 3.0)])];
            opt.apply(&mut theta, &g).unwrap();
            let now = (theta[0].data()[0] - 3.0).abs();
            assert!(now <= last + 1e-7);
            last = now;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut theta = vec![Tensor::from_vec(vec![0.0f32])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05);
        for _ in 0..1000 {
            let g = vec![Tensor::from_vec(vec![2.0 * (theta[0].data()[0] - 3.0)])];
            opt.apply(&mut theta, &g).unwrap();
        }
        assert!((theta[0].data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn epoch_order_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2, 7, 64] {
            let order = epoch_order(n, &mut rng);
            let mut seen = vec![false; n];
            for &i in &order {
                assert!(!seen[i]);
                seen[i] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn lone_trailing_sample_folds_into_previous_batch() {
        assert_eq!(batch_ranges(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(batch_ranges(8, 4), vec![(0, 4), (4, 8)]);
        assert_eq!(batch_ranges(3, 4), vec![(0, 3)]);
        assert_eq!(batch_ranges(1, 4), vec![(0, 1)]);
    }
}
