//! The outer training loop: TRADES-with-augmentation loss, Nesterov SGD
//! with weight decay, the two-phase learning-rate schedule with linear
//! scaling, EMA weight averaging, and early-stopping bookmarks.
//!
//! Per step: sample a batch, run the augmentation pipeline, attack the
//! augmented batch, take one SGD step on
//! ce(f(x'), y') + beta * KL(f(x'+d') || f(x')), and fold the new
//! weights into the exponential moving average. At the evaluation
//! cadence both the live and the averaged weights are scored on the
//! validation split (clean and 40-step robust accuracy).

use crate::attack::{self, AttackConfig, AttackObjective};
use crate::augment::{pipeline, AugmentCtx, AugmentSpec, ImageBatch};
use crate::data::{Dataset, RngStream, Split};
use crate::error::{Error, Result};
use crate::model::{self, ArchSpec, ModelParams};
use crate::tensor::{Graph, Tensor};

/// Which divergence the inner attack maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerObjective {
    /// KL(y' || f(x'+delta)): divergence from the (mixed) label.
    KlLabel,
    /// KL(f(x') || f(x'+delta)): divergence from the clean prediction.
    KlClean,
}

impl InnerObjective {
    pub fn name(&self) -> &'static str {
        match self {
            InnerObjective::KlLabel => "kl_label",
            InnerObjective::KlClean => "kl_clean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kl_label" => Ok(InnerObjective::KlLabel),
            "kl_clean" => Ok(InnerObjective::KlClean),
            other => Err(Error::Validation(format!("unknown inner objective `{other}`"))),
        }
    }

    fn to_attack(self) -> AttackObjective {
        match self {
            InnerObjective::KlLabel => AttackObjective::KlToLabel,
            InnerObjective::KlClean => AttackObjective::KlToClean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning-rate drop point as an exact fraction num/den of the
    /// total step count.
    pub lr_drop_num: u32,
    pub lr_drop_den: u32,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// TRADES balance weight; no default on purpose so every experiment
    /// states it explicitly.
    pub trades_beta: f64,
    pub ema_decay: f64,
    /// Augmentation pipeline; empty means train on the raw batch.
    pub augment: Vec<AugmentSpec>,
    /// Inner-maximization attack on the augmented batch.
    pub attack: AttackConfig,
    /// Validation attack (the 40-step Adam ascent by convention).
    pub eval_attack: AttackConfig,
    /// Evaluate every this many steps; 0 picks total/60 (at least 1).
    pub eval_every: usize,
    /// Steps at which to keep parameter snapshots (final step always).
    pub checkpoint_steps: Vec<usize>,
    pub inner_objective: InnerObjective,
    pub seed: u64,
    /// Record wall-clock seconds in the log. Off by default so reruns
    /// are byte-identical.
    pub timing: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        if self.lr_drop_den == 0 || self.lr_drop_num >= self.lr_drop_den {
            return Err(Error::Validation(
                "lr drop fraction must be a proper fraction".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Validation("ema decay must be in [0,1]".into()));
        }
        if self.trades_beta < 0.0 {
            return Err(Error::Validation("trades beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Linear scaling rule: effective LR = max(LR * batch/256, LR).
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    (base_lr * batch_size as f64 / 256.0).max(base_lr)
}

/// Canonical schedule: lr0 until step floor(2T/3), then lr0/10.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> f64 {
    lr_at_with(step, total_steps, lr0, 2, 3, 10.0)
}

/// Generalized schedule with an exact rational drop point.
pub fn lr_at_with(
    step: usize,
    total_steps: usize,
    lr0: f64,
    drop_num: u32,
    drop_den: u32,
    factor: f64,
) -> f64 {
    let drop = total_steps * drop_num as usize / drop_den as usize;
    if step < drop {
        lr0
    } else {
        lr0 / factor
    }
}

/// Exponential moving average of the parameters, initialized to the
/// starting weights.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub params: ModelParams,
    pub decay: f64,
    pub count: u64,
}

impl EmaState {
    pub fn new(params: ModelParams, decay: f64) -> Self {
        EmaState {
            params,
            decay,
            count: 0,
        }
    }

    /// theta' <- tau * theta' + (1 - tau) * theta
    pub fn update(&mut self, params: &ModelParams) -> Result<()> {
        if !self.params.same_layout(params) {
            return Err(Error::Validation("ema/params layout mismatch".into()));
        }
        let tau = self.decay;
        for (avg, live) in self.params.tensors_mut().zip(params.tensors()) {
            for (a, &l) in avg.data_mut().iter_mut().zip(live.data()) {
                *a = tau * *a + (1.0 - tau) * l;
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// Per-parameter velocity buffers for Nesterov momentum.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One Nesterov step: g <- grad + wd*theta; v <- m*v + g;
/// theta <- theta - lr*(g + m*v). Weight decay applies to every
/// parameter, biases included.
pub fn sgd_nesterov_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Validation("sgd: layout mismatch".into()));
    }
    for ((tensor, grad), vel) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        if grad.len() != tensor.numel() {
            return Err(Error::Validation("sgd: gradient shape mismatch".into()));
        }
        for ((theta, &g0), v) in tensor.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
            let g = g0 + weight_decay * *theta;
            *v = momentum * *v + g;
            *theta -= lr * (g + momentum * *v);
        }
    }
    Ok(())
}

/// TRADES-with-augmentation loss on one batch:
/// ce(f(x'), y') + beta * KL(f(x'+d') || f(x')), with the clean branch
/// kept differentiable (no detach).
pub fn trades_loss_and_grads(
    params: &ModelParams,
    spec: &ArchSpec,
    batch: &ImageBatch,
    deltas: &[Vec<f64>],
    beta: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (c, h, w) = batch.dims();
    let b = batch.len();
    if deltas.len() != b {
        return Err(Error::Dimension("one delta per example required".into()));
    }
    let per = batch.example_len();
    let mut adv = batch.images.clone();
    for (i, d) in deltas.iter().enumerate() {
        if d.len() != per {
            return Err(Error::Dimension("delta length mismatch".into()));
        }
        for (a, &dv) in adv[i * per..(i + 1) * per].iter_mut().zip(d) {
            *a += dv;
        }
    }
    let mut g = Graph::new();
    let bound = model::bind(&mut g, params, true)?;
    let clean = g.constant(Tensor::new(vec![b, c, h, w], batch.images.clone())?)?;
    let advx = g.constant(Tensor::new(vec![b, c, h, w], adv)?)?;
    let labels = g.constant(Tensor::new(vec![b, batch.classes], batch.labels.clone())?)?;
    let clean_logits = model::forward(&mut g, spec, &bound, clean)?;
    let adv_logits = model::forward(&mut g, spec, &bound, advx)?;
    let ce = g.softmax_cross_entropy(clean_logits, labels)?;
    // calibration-only escape hatch, to be removed
    let kl = if std::env::var("ROBUSTAUG_KL_FLIP").is_ok() {
        g.kl_divergence(clean_logits, adv_logits)?
    } else {
        g.kl_divergence(adv_logits, clean_logits)?
    };
    let kl_term = g.scale(kl, beta)?;
    let loss = g.add(ce, kl_term)?;
    g.backward(loss)?;
    Ok((g.value(loss).item()?, bound.grads(&g)))
}

/// Loss value only (the gradient-free view of the same objective).
pub fn trades_loss(
    params: &ModelParams,
    spec: &ArchSpec,
    batch: &ImageBatch,
    deltas: &[Vec<f64>],
    beta: f64,
) -> Result<f64> {
    trades_loss_and_grads(params, spec, batch, deltas, beta).map(|(l, _)| l)
}

/// One evaluation row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_val: f64,
    pub robust_val: f64,
    pub clean_val_ema: f64,
    pub robust_val_ema: f64,
    pub wallclock_s: f64,
}

/// Parameter snapshot kept during training.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub params: ModelParams,
    pub ema: ModelParams,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub snapshots: Vec<Snapshot>,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,lr,train_loss,clean_val,robust_val_pgd40,clean_val_ema,robust_val_ema,wallclock_s";

impl TrainLog {
    /// Step of the best recorded validation robust accuracy (live
    /// weights), the early-stopping bookmark.
    pub fn best_robust_step(&self) -> Option<usize> {
        self.records
            .iter()
            .max_by(|a, b| a.robust_val.partial_cmp(&b.robust_val).unwrap())
            .map(|r| r.step)
    }

    /// Same bookmark for the averaged weights.
    pub fn best_robust_ema_step(&self) -> Option<usize> {
        self.records
            .iter()
            .max_by(|a, b| a.robust_val_ema.partial_cmp(&b.robust_val_ema).unwrap())
            .map(|r| r.step)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.lr,
                r.train_loss,
                r.clean_val,
                r.robust_val,
                r.clean_val_ema,
                r.robust_val_ema,
                r.wallclock_s
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: ModelParams,
    pub ema: EmaState,
}

/// Run the full training loop. Deterministic given (config, dataset,
/// split): identical seeds give bit-identical logs and weights.
pub fn train(
    config: &TrainConfig,
    arch: &ArchSpec,
    ds: &Dataset,
    split: &Split,
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    let mut params = model::init_model(arch, config.seed)?;
    let mut ema = EmaState::new(params.clone(), config.ema_decay);
    let mut sgd = SgdState::new(&params);
    let streams = RngStream::new(config.seed);

    let steps_per_epoch = split.train.len() / config.batch_size;
    let total_steps = config.epochs * steps_per_epoch;
    if config.epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Validation(format!(
            "batch size {} exceeds training pool {}",
            config.batch_size,
            split.train.len()
        )));
    }
    let eval_every = if config.eval_every > 0 {
        config.eval_every
    } else {
        (total_steps / 60).max(1)
    };

    let val_batch = if split.val.is_empty() {
        None
    } else {
        Some(ImageBatch::from_dataset(ds, &split.val)?)
    };

    let lr0 = effective_lr(config.base_lr, config.batch_size);
    let start = std::time::Instant::now();
    let mut log = TrainLog::default();
    let mut loss_accum = 0.0;
    let mut loss_count = 0usize;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order = split.train.clone();
        let mut rng = streams.stream("shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks_exact(config.batch_size) {
            let batch = ImageBatch::from_dataset(ds, chunk)?;
            let augmented = if config.augment.is_empty() {
                batch
            } else {
                let ctx = AugmentCtx::new(streams.derive("augment", step as u64));
                pipeline(&batch, &config.augment, &ctx)?
            };

            let attack_config = AttackConfig {
                objective: config.inner_objective.to_attack(),
                ..config.attack.clone()
            };
            let attack_seed = streams.derive("inner-attack", step as u64);
            let result =
                attack::run_attack(&params, arch, &augmented, &attack_config, attack_seed, None)
                    .map_err(|e| Error::Numerical(format!("inner attack at step {step}: {e}")))?;

            let (loss, grads) = trades_loss_and_grads(
                &params,
                arch,
                &augmented,
                &result.deltas,
                config.trades_beta,
            )
            .map_err(|e| Error::Numerical(format!("loss at step {step}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            loss_accum += loss;
            loss_count += 1;

            let lr = lr_at_with(
                step,
                total_steps,
                lr0,
                config.lr_drop_num,
                config.lr_drop_den,
                config.lr_drop_factor,
            );
            sgd_nesterov_step(
                &mut params,
                &grads,
                lr,
                config.momentum,
                config.weight_decay,
                &mut sgd,
            )?;
            ema.update(&params)?;
            step += 1;

            let is_eval = step % eval_every == 0 || step == total_steps;
            if is_eval {
                // same attack seed for live and averaged weights, so
                // tau = 0 gives identical rows for the two columns
                let eval_seed = streams.derive("eval-attack", step as u64);
                let (clean_val, robust_val, clean_ema, robust_ema) = match &val_batch {
                    Some(vb) => {
                        let clean = attack::clean_accuracy(&params, arch, vb)?;
                        let (robust, _) =
                            attack::robust_accuracy(&params, arch, vb, &config.eval_attack, eval_seed)?;
                        let clean_e = attack::clean_accuracy(&ema.params, arch, vb)?;
                        let (robust_e, _) = attack::robust_accuracy(
                            &ema.params,
                            arch,
                            vb,
                            &config.eval_attack,
                            eval_seed,
                        )?;
                        (clean, robust, clean_e, robust_e)
                    }
                    None => (0.0, 0.0, 0.0, 0.0),
                };
                log.records.push(EvalRecord {
                    step,
                    lr,
                    train_loss: loss_accum / loss_count.max(1) as f64,
                    clean_val,
                    robust_val,
                    clean_val_ema: clean_ema,
                    robust_val_ema: robust_ema,
                    wallclock_s: if config.timing {
                        start.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                });
                loss_accum = 0.0;
                loss_count = 0;
            }
            if config.checkpoint_steps.contains(&step) || step == total_steps {
                log.snapshots.push(Snapshot {
                    step,
                    params: params.clone(),
                    ema: ema.params.clone(),
                });
            }
        }
    }

    Ok(TrainOutcome { log, params, ema })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackInit, AttackOptimizer, PerturbationBall};
    use crate::data::{make_split, synthetic_dataset, SyntheticKind};
    use crate::tensor::{finite_difference_gradient, max_rel_err};

    fn demo_batch(n: usize, classes: usize, seed: u64) -> ImageBatch {
        let ds = synthetic_dataset(
            SyntheticKind::GaussianBlobs {
                separation: 0.3,
                noise: 0.1,
            },
            n,
            classes,
            seed,
        )
        .unwrap();
        ImageBatch::from_dataset(&ds, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn effective_lr_examples() {
        assert_eq!(effective_lr(0.1, 512), 0.2);
        assert_eq!(effective_lr(0.1, 256), 0.1);
        assert_eq!(effective_lr(0.1, 64), 0.1);
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 300, 0.2), 0.2);
        assert_eq!(lr_at(200, 300, 0.2), 0.2 / 10.0);
        assert_eq!(lr_at(199, 300, 0.2), 0.2);
    }

    #[test]
    fn lr_drop_point_is_exact_for_all_small_totals() {
        for total in 3..=300 {
            let drop = total * 2 / 3;
            for step in 0..total {
                let lr = lr_at(step, total, 0.1);
                if step < drop {
                    assert_eq!(lr, 0.1, "step {step} total {total}");
                } else {
                    assert_eq!(lr, 0.01, "step {step} total {total}");
                }
            }
        }
    }

    #[test]
    fn sgd_matches_scalar_recurrence() {
        // constant gradient, two steps, nesterov form
        let spec = ArchSpec::linear((1, 1, 1), 2);
        let mut p = model::init_model(&spec, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let g = 0.5;
        let grads: Vec<Vec<f64>> = p.tensors().map(|t| vec![g; t.numel()]).collect();
        let mut state = SgdState::new(&p);
        let (lr, m) = (0.1, 0.9);
        sgd_nesterov_step(&mut p, &grads, lr, m, 0.0, &mut state).unwrap();
        sgd_nesterov_step(&mut p, &grads, lr, m, 0.0, &mut state).unwrap();
        // scalar oracle: v1 = g, d1 = lr*g*(1+m); v2 = m*g+g, d2 = lr*(g+m*v2)
        let d1 = lr * g * (1.0 + m);
        let v2 = m * g + g;
        let d2 = lr * (g + m * v2);
        let want = 1.0 - d1 - d2;
        for t in p.tensors() {
            for &v in t.data() {
                assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            }
        }
    }

    #[test]
    fn weight_decay_only_shrinks_by_expected_factor() {
        let spec = ArchSpec::linear((1, 1, 1), 2);
        let mut p = model::init_model(&spec, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        let grads: Vec<Vec<f64>> = p.tensors().map(|t| vec![0.0; t.numel()]).collect();
        let mut state = SgdState::new(&p);
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        sgd_nesterov_step(&mut p, &grads, lr, m, wd, &mut state).unwrap();
        let want = 2.0 * (1.0 - lr * wd * (1.0 + m));
        for t in p.tensors() {
            for &v in t.data() {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_zero_is_plain_gradient_step() {
        let spec = ArchSpec::linear((1, 1, 1), 2);
        let mut p = model::init_model(&spec, 1).unwrap();
        let before: Vec<f64> = p.tensors().flat_map(|t| t.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> = p.tensors().map(|t| vec![0.25; t.numel()]).collect();
        let mut state = SgdState::new(&p);
        sgd_nesterov_step(&mut p, &grads, 0.1, 0.0, 0.0, &mut state).unwrap();
        let after: Vec<f64> = p.tensors().flat_map(|t| t.data().to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - 0.025 - a).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_closed_form_and_edges() {
        let spec = ArchSpec::linear((1, 2, 2), 2);
        let mut start = model::init_model(&spec, 3).unwrap();
        for t in start.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut target = start.clone();
        for t in target.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 3.0);
        }
        let tau = 0.999;
        let mut ema = EmaState::new(start.clone(), tau);
        for _ in 0..100 {
            ema.update(&target).unwrap();
        }
        let tn = tau.powi(100);
        let want = tn * 1.0 + (1.0 - tn) * 3.0;
        for t in ema.params.tensors() {
            for &v in t.data() {
                assert!((v - want).abs() < 1e-12);
            }
        }
        assert_eq!(ema.count, 100);

        let mut ema0 = EmaState::new(start.clone(), 0.0);
        ema0.update(&target).unwrap();
        assert_eq!(ema0.params, target);

        let mut ema1 = EmaState::new(start.clone(), 1.0);
        for _ in 0..5 {
            ema1.update(&target).unwrap();
        }
        assert_eq!(ema1.params, start);
    }

    #[test]
    fn trades_with_zero_delta_is_clean_cross_entropy() {
        let spec = ArchSpec::mlp((3, 16, 16), 2, vec![6]);
        let params = model::init_model(&spec, 4).unwrap();
        let batch = demo_batch(4, 2, 9);
        let zeros = vec![vec![0.0; batch.example_len()]; batch.len()];
        let loss = trades_loss(&params, &spec, &batch, &zeros, 6.0).unwrap();

        let mut g = Graph::new();
        let bound = model::bind(&mut g, &params, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![4, 3, 16, 16], batch.images.clone()).unwrap())
            .unwrap();
        let y = g
            .constant(Tensor::new(vec![4, 2], batch.labels.clone()).unwrap())
            .unwrap();
        let logits = model::forward(&mut g, &spec, &bound, x).unwrap();
        let ce = g.softmax_cross_entropy(logits, y).unwrap();
        assert_eq!(loss, g.value(ce).item().unwrap());

        // beta = 0 likewise reduces to the clean term
        let l0 = trades_loss(&params, &spec, &batch, &zeros, 0.0).unwrap();
        assert_eq!(l0, g.value(ce).item().unwrap());
    }

    #[test]
    fn trades_gradient_matches_finite_differences() {
        let spec = ArchSpec::mlp((1, 3, 3), 2, vec![4]);
        let params = model::init_model(&spec, 6).unwrap();
        let ds = synthetic_dataset(
            SyntheticKind::GaussianBlobs {
                separation: 0.3,
                noise: 0.1,
            },
            4,
            2,
            11,
        )
        .unwrap();
        // shrink images to 1x3x3 by hand
        let images: Vec<f64> = (0..4)
            .flat_map(|i| ds.image(i)[..9].to_vec())
            .collect();
        let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let batch = ImageBatch::new((1, 3, 3), 2, images, labels, vec![0, 1, 2, 3]).unwrap();
        let deltas: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..9).map(|j| 0.01 * ((i + j) % 3) as f64).collect())
            .collect();

        let (_, grads) = trades_loss_and_grads(&params, &spec, &batch, &deltas, 6.0).unwrap();

        let tensors: Vec<Tensor> = params.tensors().cloned().collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let fd = finite_difference_gradient(
            |ts| {
                let entries: Vec<(String, Tensor)> = names
                    .iter()
                    .cloned()
                    .zip(ts.iter().cloned())
                    .collect();
                let p = ModelParams::new(entries)?;
                trades_loss(&p, &spec, &batch, &deltas, 6.0)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        for (ad, fd) in grads.iter().zip(&fd) {
            assert!(max_rel_err(ad, fd) < 1e-4);
        }
    }

    fn tiny_config(seed: u64, epochs: usize) -> TrainConfig {
        let eps = 8.0 / 255.0;
        TrainConfig {
            epochs,
            batch_size: 16,
            base_lr: 0.05,
            lr_drop_num: 2,
            lr_drop_den: 3,
            lr_drop_factor: 10.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            trades_beta: 6.0,
            ema_decay: 0.99,
            augment: vec![],
            attack: AttackConfig {
                ball: PerturbationBall::linf(eps),
                steps: 2,
                step_size: None,
                restarts: 1,
                init: AttackInit::UniformRandom,
                objective: AttackObjective::KlToLabel,
                optimizer: AttackOptimizer::Adam,
            },
            eval_attack: AttackConfig {
                ball: PerturbationBall::linf(eps),
                steps: 3,
                step_size: None,
                restarts: 1,
                init: AttackInit::UniformRandom,
                objective: AttackObjective::Ce,
                optimizer: AttackOptimizer::Adam,
            },
            eval_every: 0,
            checkpoint_steps: vec![],
            inner_objective: InnerObjective::KlLabel,
            seed,
            timing: false,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_empty_log() {
        let ds = synthetic_dataset(
            SyntheticKind::GaussianBlobs {
                separation: 0.4,
                noise: 0.05,
            },
            40,
            2,
            5,
        )
        .unwrap();
        let split = make_split(&ds, 8, 0, 1).unwrap();
        let arch = ArchSpec::linear((3, 16, 16), 2);
        let config = tiny_config(7, 0);
        let out = train(&config, &arch, &ds, &split).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.params, model::init_model(&arch, 7).unwrap());
        assert_eq!(out.ema.count, 0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = synthetic_dataset(
            SyntheticKind::GaussianBlobs {
                separation: 0.4,
                noise: 0.05,
            },
            48,
            2,
            5,
        )
        .unwrap();
        let split = make_split(&ds, 8, 0, 1).unwrap();
        let arch = ArchSpec::linear((3, 16, 16), 2);
        let mut config = tiny_config(3, 2);
        config.augment = vec![AugmentSpec::PadCrop { pad: 2, flip: true }];
        let a = train(&config, &arch, &ds, &split).unwrap();
        let b = train(&config, &arch, &ds, &split).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema.params, b.ema.params);
    }

    #[test]
    fn plain_supervised_training_fits_separable_data() {
        // beta = 0, eps = 0, no augmentation: reduces to ordinary
        // supervised training, which must fit a separable synthetic set
        let ds = synthetic_dataset(
            SyntheticKind::GaussianBlobs {
                separation: 0.5,
                noise: 0.03,
            },
            64,
            2,
            9,
        )
        .unwrap();
        let split = make_split(&ds, 0, 0, 2).unwrap();
        let arch = ArchSpec::linear((3, 16, 16), 2);
        let mut config = tiny_config(11, 40);
        config.trades_beta = 0.0;
        config.attack.ball = PerturbationBall::linf(0.0);
        config.attack.steps = 1;
        config.eval_attack.ball = PerturbationBall::linf(0.0);
        let out = train(&config, &arch, &ds, &split).unwrap();
        let train_batch = ImageBatch::from_dataset(&ds, &split.train).unwrap();
        let acc = attack::clean_accuracy(&out.params, &arch, &train_batch).unwrap();
        assert_eq!(acc, 1.0, "train accuracy {acc}");
    }

    #[test]
    fn single_step_descends_by_lr_times_grad_norm() {
        // beta = 0, delta = 0, momentum 0, wd 0: one step changes the
        // loss by -lr * ||grad||^2 up to O(lr^2)
        let spec = ArchSpec::mlp((3, 16, 16), 2, vec![6]);
        let mut params = model::init_model(&spec, 13).unwrap();
        let batch = demo_batch(8, 2, 21);
        let zeros = vec![vec![0.0; batch.example_len()]; batch.len()];
        let (l0, grads) = trades_loss_and_grads(&params, &spec, &batch, &zeros, 0.0).unwrap();
        let gnorm2: f64 = grads.iter().flat_map(|g| g.iter().map(|v| v * v)).sum();
        let lr = 1e-3;
        let mut state = SgdState::new(&params);
        sgd_nesterov_step(&mut params, &grads, lr, 0.0, 0.0, &mut state).unwrap();
        let l1 = trades_loss(&params, &spec, &batch, &zeros, 0.0).unwrap();
        let predicted = -lr * gnorm2;
        let actual = l1 - l0;
        assert!(
            (actual - predicted).abs() <= 0.1 * predicted.abs(),
            "actual {actual} predicted {predicted}"
        );
    }

    #[test]
    fn bookmark_is_argmax_of_recorded_robust_accuracy() {
        let mut log = TrainLog::default();
        for (step, rv, re) in [(1, 0.2, 0.1), (2, 0.5, 0.3), (3, 0.4, 0.6), (4, 0.5, 0.2)] {
            log.records.push(EvalRecord {
                step,
                lr: 0.1,
                train_loss: 1.0,
                clean_val: 0.9,
                robust_val: rv,
                clean_val_ema: 0.9,
                robust_val_ema: re,
                wallclock_s: 0.0,
            });
        }
        // ties keep the later step (max_by returns the last maximum)
        assert_eq!(log.best_robust_step(), Some(4));
        assert_eq!(log.best_robust_ema_step(), Some(3));
    }
}
