//! Two-stage decoupled training, evaluation, and the ablation driver.
//!
//! Stage 1 runs SGD over instance-uniform batches of the long-tailed data,
//! optimizing the combined objective. Stage 2 freezes everything except the
//! final linear classifier and finetunes it under class-balanced resampling.

use std::collections::HashMap;
use std::path::Path;

use crate::aug::{self, AugStrategy};
use crate::config::{ExperimentConfig, LrSchedule};
use crate::data::{resample_class_balanced, split_classes, LongTailDataset, Splits};
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::isda::AugSchedule;
use crate::metrics::{EpochRow, EvalRow, MetricsLog, MetricsReport, MetricsRow};
use crate::model::{Model, Trainable};
use crate::pool;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// SGD with momentum, non-bias weight decay, and an optional cosine decay of
/// the learning rate over a fixed horizon.
#[derive(Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    schedule: LrSchedule,
    total_steps: usize,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
        total_steps: usize,
    ) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            schedule,
            total_steps,
            velocity: HashMap::new(),
        }
    }

    /// Learning rate at 0-based `step`; cosine decays from the base rate to 0
    /// across the horizon.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// One update over every parameter that received a gradient:
    /// `v <- momentum*v + (g + wd*p)`, `p <- p - lr*v`. Biases are exempt
    /// from weight decay.
    pub fn step(&mut self, model: &mut Model, named: &[(String, Var)], grads: &Grads, lr: f64) {
        let by_name: HashMap<&str, &[f64]> =
            named.iter().filter_map(|(n, v)| grads.get(*v).map(|g| (n.as_str(), g))).collect();
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_tensors_mut(|name, tensor| {
            let Some(grad) = by_name.get(name) else { return };
            let decay = if name.ends_with("_bias") { 0.0 } else { wd };
            let vel =
                velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; tensor.data().len()]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + decay * data[i];
                vel[i] = momentum * vel[i] + g;
                data[i] -= lr * vel[i];
            }
        });
    }
}

/// Weighted total objective: `gamma*class + alpha*aug + beta*recon`.
/// Absent or zero-weighted components contribute exactly nothing (they are
/// skipped, not multiplied by zero).
pub fn combined_loss(
    g: &mut Graph,
    class_loss: Var,
    recon_loss: Option<Var>,
    aug_loss: Option<Var>,
    cfg: &ExperimentConfig,
) -> Result<Var> {
    let mut total = g.scale(class_loss, cfg.gamma);
    if let Some(aug) = aug_loss {
        if cfg.alpha > 0.0 {
            let w = g.scale(aug, cfg.alpha);
            total = g.add(total, w)?;
        }
    }
    if let Some(recon) = recon_loss {
        if cfg.beta > 0.0 {
            let w = g.scale(recon, cfg.beta);
            total = g.add(total, w)?;
        }
    }
    Ok(total)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let sum = g.sum_all(acc);
    Ok(g.scale(sum, 1.0 / terms.len() as f64))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Everything one optimization step needs from the forward pass.
struct BatchGraph {
    g: Graph,
    named: Vec<(String, Var)>,
    loss: Var,
    class_value: f64,
    recon_value: f64,
    aug_value: f64,
    predictions: Vec<usize>,
    pooled: Vec<Var>,
}

/// Forward one batch through the model and assemble the combined objective.
/// The classification term is plain batch cross-entropy unless the strategy
/// overrides it per item; the latent and reconstruction terms are gated by
/// the ablation flags.
fn batch_forward(
    model: &Model,
    cfg: &ExperimentConfig,
    strategy: &mut dyn AugStrategy,
    ds: &LongTailDataset,
    batch: &[usize],
    lambda: f64,
    trainable: Trainable,
) -> Result<BatchGraph> {
    let mut g = Graph::new();
    let (vars, named) = model.leaves(&mut g, trainable);

    let mut recon_terms = Vec::new();
    let mut override_terms = Vec::new();
    let mut logit_rows: Option<Var> = None;
    let mut targets = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    let mut pooled_vars = Vec::with_capacity(batch.len());

    for &idx in batch {
        let (image, label) = &ds.samples[idx];
        let (features, _, _) = model.forward_features(&mut g, &vars, image)?;
        let pooled = if model.use_latent {
            let (_, f_hat) = model.forward_latent(&mut g, &vars, features)?;
            if cfg.use_recon_loss {
                recon_terms.push(pool::recon_loss(&mut g, f_hat, features)?);
            }
            pool::fuse_pooled(&mut g, features, f_hat, &vars.dec)?
        } else {
            g.mean_cols(features)?
        };
        pooled_vars.push(pooled);

        let logits =
            pool::apply_classifier(&mut g, pooled, vars.dec.cls_weight, vars.dec.cls_bias)?;
        predictions.push(argmax(g.value(logits)));

        if let Some(term) = strategy.class_term(&mut g, pooled, &vars.dec, *label, lambda)? {
            override_terms.push(term);
        } else {
            let row = g.transpose(logits)?; // [1, C]
            logit_rows = Some(match logit_rows {
                Some(acc) => g.concat_rows(acc, row)?,
                None => row,
            });
            targets.push(*label);
        }
    }

    let class_loss = if override_terms.is_empty() {
        let rows = logit_rows.expect("batch is non-empty");
        let ce = g.cross_entropy_rows(rows, targets)?;
        g.mean_all(ce)
    } else {
        mean_of(&mut g, &override_terms)?
    };

    let aug_loss = if cfg.use_latent && cfg.use_aug_loss {
        strategy.latent_term(&mut g, &vars.pool, lambda)?
    } else {
        None
    };
    let recon_loss =
        if recon_terms.is_empty() { None } else { Some(mean_of(&mut g, &recon_terms)?) };

    let loss = combined_loss(&mut g, class_loss, recon_loss, aug_loss, cfg)?;
    Ok(BatchGraph {
        class_value: g.value(class_loss)[0],
        recon_value: recon_loss.map_or(0.0, |v| g.value(v)[0]),
        aug_value: aug_loss.map_or(0.0, |v| g.value(v)[0]),
        g,
        named,
        loss,
        predictions,
        pooled: pooled_vars,
    })
}

/// Turn mid-step numeric failures into a divergence report at `step`.
fn diverged_at(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteLogits => Error::Diverged { step },
        other => other,
    }
}

struct EpochAccumulator {
    loss_sum: f64,
    class_sum: f64,
    recon_sum: f64,
    aug_sum: f64,
    steps: usize,
    correct: Vec<u64>,
    totals: Vec<u64>,
    lambda: f64,
    learning_rate: f64,
}

impl EpochAccumulator {
    fn new(classes: usize) -> Self {
        Self {
            loss_sum: 0.0,
            class_sum: 0.0,
            recon_sum: 0.0,
            aug_sum: 0.0,
            steps: 0,
            correct: vec![0; classes],
            totals: vec![0; classes],
            lambda: 0.0,
            learning_rate: 0.0,
        }
    }

    fn row(&self, stage: u8, epoch: usize, splits: &Splits) -> Result<EpochRow> {
        let n = self.steps.max(1) as f64;
        Ok(EpochRow {
            stage,
            epoch,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            total_loss: self.loss_sum / n,
            class_loss: self.class_sum / n,
            recon_loss: self.recon_sum / n,
            aug_loss: self.aug_sum / n,
            accuracy: MetricsReport::from_counts(&self.correct, &self.totals, splits)?,
        })
    }
}

/// Run one optimization step and fold its outcome into the accumulator.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    cfg: &ExperimentConfig,
    strategy: &mut dyn AugStrategy,
    ds: &LongTailDataset,
    batch: &[usize],
    lambda: f64,
    trainable: Trainable,
    sgd: &mut Sgd,
    step: u64,
    lr_step: usize,
    acc: &mut EpochAccumulator,
) -> Result<()> {
    let bf = batch_forward(model, cfg, strategy, ds, batch, lambda, trainable)
        .map_err(diverged_at(step))?;
    let loss_value = bf.g.scalar_value(bf.loss)?;
    if !loss_value.is_finite() {
        return Err(Error::Diverged { step });
    }
    let grads = bf.g.backward(bf.loss).map_err(diverged_at(step))?;
    let lr = sgd.lr_at(lr_step);
    sgd.step(model, &bf.named, &grads, lr);

    if cfg.use_latent {
        strategy.observe_latents(&model.pool.latents, batch.len() as u64)?;
    }
    for (&idx, &pooled) in batch.iter().zip(&bf.pooled) {
        strategy.observe_feature(bf.g.value(pooled), ds.samples[idx].1)?;
    }

    acc.loss_sum += loss_value;
    acc.class_sum += bf.class_value;
    acc.recon_sum += bf.recon_value;
    acc.aug_sum += bf.aug_value;
    acc.steps += 1;
    acc.lambda = lambda;
    acc.learning_rate = lr;
    for (&idx, &pred) in batch.iter().zip(&bf.predictions) {
        let label = ds.samples[idx].1;
        acc.totals[label] += 1;
        if pred == label {
            acc.correct[label] += 1;
        }
    }
    Ok(())
}

/// Stage 1: instance-uniform SGD over the full long-tailed dataset with the
/// combined objective. Appends one metrics row per epoch. The augmentation
/// strength ramps linearly so it reaches its configured value on the final
/// stage-1 iteration.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    ds: &LongTailDataset,
    model: &mut Model,
    strategy: &mut dyn AugStrategy,
    rows: &mut Vec<MetricsRow>,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".to_string()));
    }
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.stage1_epochs * steps_per_epoch;
    let schedule = AugSchedule::new(cfg.lambda0, total_steps.max(1))?;
    let mut sgd =
        Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.lr_schedule, total_steps);
    let splits = split_classes(&ds.class_counts);
    let classes = ds.class_counts.len();

    let mut step: u64 = 0;
    for epoch in 0..cfg.stage1_epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut order);
        let mut acc = EpochAccumulator::new(classes);
        for batch in order.chunks(cfg.batch_size) {
            // 1-based position so the ramp ends exactly at lambda0.
            let lambda = schedule.lambda_at(step as usize + 1);
            train_step(
                model,
                cfg,
                strategy,
                ds,
                batch,
                lambda,
                Trainable::All,
                &mut sgd,
                step,
                step as usize,
                &mut acc,
            )?;
            step += 1;
        }
        rows.push(MetricsRow::Epoch(acc.row(1, epoch, &splits)?));
    }
    Ok(())
}

/// Stage 2: freeze everything but the final classifier and finetune it under
/// class-balanced resampling with plain cross-entropy. Runs at a tenth of the
/// stage-1 learning rate. Epoch numbering continues after stage 1.
pub fn train_stage2(
    cfg: &ExperimentConfig,
    ds: &LongTailDataset,
    model: &mut Model,
    rows: &mut Vec<MetricsRow>,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    if cfg.stage2_epochs == 0 {
        return Ok(());
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".to_string()));
    }
    // Plain cross-entropy: no latent augmentation or reconstruction terms.
    let mut stage_cfg = cfg.clone();
    stage_cfg.use_aug_loss = false;
    stage_cfg.use_recon_loss = false;
    let mut strategy = aug::NoAug;

    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.stage2_epochs * steps_per_epoch;
    let mut sgd = Sgd::new(
        cfg.learning_rate * 0.1,
        cfg.momentum,
        cfg.weight_decay,
        cfg.lr_schedule,
        total_steps,
    );
    let splits = split_classes(&ds.class_counts);
    let classes = ds.class_counts.len();
    let mut sampler = resample_class_balanced(ds, rng.fork())?;

    let mut step: u64 = 0;
    for epoch in 0..cfg.stage2_epochs {
        let mut acc = EpochAccumulator::new(classes);
        for _ in 0..steps_per_epoch {
            let batch: Vec<usize> =
                (0..cfg.batch_size).map(|_| sampler.next().expect("sampler is infinite")).collect();
            train_step(
                model,
                &stage_cfg,
                &mut strategy,
                ds,
                &batch,
                0.0,
                Trainable::ClassifierOnly,
                &mut sgd,
                step,
                step as usize,
                &mut acc,
            )?;
            step += 1;
        }
        rows.push(MetricsRow::Epoch(acc.row(2, cfg.stage1_epochs + epoch, &splits)?));
    }
    Ok(())
}

/// Top-1 accuracy of `model` on `ds`, overall and per cardinality split.
/// `splits` must partition the model's classes.
pub fn evaluate(model: &Model, ds: &LongTailDataset, splits: &Splits) -> Result<MetricsReport> {
    let classes = model.num_classes();
    let mut seen = vec![false; classes];
    for &c in splits.many.iter().chain(&splits.medium).chain(&splits.few) {
        if c >= classes || seen[c] {
            return Err(Error::InvalidArgument(format!(
                "splits must partition the {classes} classes (class {c} repeated or out of range)"
            )));
        }
        seen[c] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidArgument(format!(
            "splits must partition the {classes} classes (class {missing} missing)"
        )));
    }

    let mut correct = vec![0u64; classes];
    let mut totals = vec![0u64; classes];
    for (image, label) in &ds.samples {
        let logits = model.classify(image)?;
        totals[*label] += 1;
        if argmax(&logits) == *label {
            correct[*label] += 1;
        }
    }
    MetricsReport::from_counts(&correct, &totals, splits)
}

/// Spatially averaged latent-category weights for one image — the latent
/// weight histogram. Sums to 1.
pub fn export_histogram(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    model.latent_weights(image)
}

/// The strategy actually in force: the master augmentation switch off means
/// no strategy regardless of the configured name.
fn effective_strategy(cfg: &ExperimentConfig) -> &str {
    if cfg.use_aug_loss {
        &cfg.aug_strategy
    } else {
        "none"
    }
}

/// Canonical name for the flag combination, used in summaries and ablation
/// tables.
pub fn arm_name(cfg: &ExperimentConfig) -> &'static str {
    let aug = effective_strategy(cfg);
    match (cfg.use_latent, aug, cfg.use_recon_loss) {
        (false, "none", false) => "baseline",
        (false, "raw_isda", false) => "raw_isda",
        (true, "none", false) => "latent_only",
        (true, "none", true) => "latent_recon",
        (true, "latent", false) => "latent_aug",
        (true, "latent", true) => "full",
        _ => "custom",
    }
}

/// Ablation arms in reporting order: the component grid plus the
/// raw-feature augmentation contrast.
pub const ABLATION_ARMS: [&str; 6] =
    ["baseline", "latent_only", "latent_recon", "latent_aug", "full", "raw_isda"];

/// Configuration for a named ablation arm, sharing everything with `base`
/// except the component flags (and the seed).
pub fn arm_config(base: &ExperimentConfig, arm: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let (latent, strategy, recon) = match arm {
        "baseline" => (false, "none", false),
        "latent_only" => (true, "none", false),
        "latent_recon" => (true, "none", true),
        "latent_aug" => (true, "latent", false),
        "full" => (true, "latent", true),
        "raw_isda" => (false, "raw_isda", false),
        other => {
            return Err(Error::UnknownStrategy {
                name: other.to_string(),
                known: ABLATION_ARMS.to_vec(),
            })
        }
    };
    cfg.use_latent = latent;
    cfg.aug_strategy = strategy.to_string();
    cfg.use_aug_loss = strategy != "none";
    cfg.use_recon_loss = recon;
    cfg.validate()?;
    Ok(cfg)
}

/// A finished training run: the model, its held-out evaluation, and the
/// metrics rows (per-epoch records plus the final evaluation).
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    pub rows: Vec<MetricsRow>,
    pub steps: u64,
}

/// Run the full two-stage pipeline on a train/test pair. When `out_dir` is
/// given, writes `metrics.jsonl`, `summary.csv`, and a final `checkpoint/`
/// directory there.
pub fn train_full(
    cfg: &ExperimentConfig,
    train_ds: &LongTailDataset,
    test_ds: &LongTailDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::InvalidArgument("train and test sets must be non-empty".to_string()));
    }
    let classes = train_ds.spec.num_classes;
    if test_ds.spec.num_classes != classes {
        return Err(Error::InvalidArgument(format!(
            "train has {classes} classes but test has {}",
            test_ds.spec.num_classes
        )));
    }
    let input_channels = train_ds.samples[0].0.shape()[0];

    let mut rng = Rng::seeded(cfg.seed);
    let mut init_rng = rng.fork();
    let mut stage1_rng = rng.fork();
    let mut stage2_rng = rng.fork();

    let mut model = Model::init(cfg, input_channels, classes, &mut init_rng)?;
    let mut strategy =
        aug::make_strategy(effective_strategy(cfg), classes, cfg.latent_count, cfg.feature_dim)?;

    let mut rows = Vec::new();
    train_stage1(cfg, train_ds, &mut model, strategy.as_mut(), &mut rows, &mut stage1_rng)?;
    train_stage2(cfg, train_ds, &mut model, &mut rows, &mut stage2_rng)?;

    let splits = split_classes(&train_ds.class_counts);
    let report = evaluate(&model, test_ds, &splits)?;
    rows.push(MetricsRow::Eval(EvalRow { report: report.clone() }));

    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size) as u64;
    let steps = (cfg.stage1_epochs + cfg.stage2_epochs) as u64 * steps_per_epoch;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
        for row in &rows {
            log.write(row)?;
        }
        log.finish()?;
        crate::metrics::write_summary(
            &dir.join("summary.csv"),
            &[(arm_name(cfg).to_string(), cfg.seed, report.clone())],
        )?;
        model.save(&dir.join("checkpoint"), steps, strategy.stats())?;
    }
    Ok(TrainOutcome { model, report, rows, steps })
}

/// Train every (arm, seed) combination on the same data and collect the final
/// evaluations, arm-major. All arms share the seed list, so per-seed
/// differences between arms are paired.
pub fn run_ablation(
    base: &ExperimentConfig,
    train_ds: &LongTailDataset,
    test_ds: &LongTailDataset,
    arms: &[&str],
    seeds: &[u64],
) -> Result<Vec<(String, u64, MetricsReport)>> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs >= 1 arm and seed".to_string()));
    }
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for &arm in arms {
        for &seed in seeds {
            let cfg = arm_config(base, arm, seed)?;
            let outcome = train_full(&cfg, train_ds, test_ds, None)?;
            out.push((arm.to_string(), seed, outcome.report));
        }
    }
    Ok(out)
}

/// Randomized end-to-end gradient check of the full objective — encoder
/// conv stack, similarity/normalization, reconstruction loss, fused head,
/// and the augmented-loss quadratic (statistics are warmed so the covariance
/// term is active). Compares analytic gradients against central finite
/// differences on sampled entries of every parameter tensor and returns the
/// maximum relative error.
pub fn gradient_check(seed: u64) -> Result<f64> {
    let cfg = ExperimentConfig {
        latent_count: 3,
        feature_dim: 5,
        encoder_channels: vec![4],
        batch_size: 4,
        seed,
        ..ExperimentConfig::default()
    };

    let mut data_rng = Rng::seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let bank = crate::data::PartBank::default_bank(5, &mut data_rng)?;
    let spec = crate::data::LongTailSpec { num_classes: 5, n_max: 2, imbalance_factor: 1.0, seed };
    let ds = crate::data::synth_with_counts(&spec, &bank, &[2; 5], 0.2, &mut data_rng)?;

    let mut model_rng = Rng::seeded(seed);
    let mut model = Model::init(&cfg, 1, 5, &mut model_rng)?;
    // Two observations of different embeddings give every latent category a
    // non-zero covariance, activating the quadratic term of the bound.
    let mut strategy = aug::make_strategy("latent", 5, cfg.latent_count, cfg.feature_dim)?;
    strategy.observe_latents(&model.pool.latents, 4)?;
    let jitter = model_rng.normal_vec(model.pool.latents.data().len());
    for (v, j) in model.pool.latents.data_mut().iter_mut().zip(&jitter) {
        *v += 0.05 * j;
    }
    strategy.observe_latents(&model.pool.latents, 4)?;

    let batch: Vec<usize> = (0..cfg.batch_size).collect();
    let lambda = 0.7;

    let bf = batch_forward(&model, &cfg, strategy.as_mut(), &ds, &batch, lambda, Trainable::All)?;
    // One backward pass, reused for every parameter.
    let grads = bf.g.backward(bf.loss)?;

    let mut max_rel: f64 = 0.0;
    let mut pick = Rng::seeded(seed.wrapping_add(1));
    let h = 1e-5;
    for (name, var) in &bf.named {
        let grad = grads
            .get(*var)
            .ok_or_else(|| Error::NonFinite(format!("no gradient reached {name}")))?
            .to_vec();
        let len = grad.len();
        let probes = len.min(4);
        for _ in 0..probes {
            let idx = pick.below(len);
            let mut loss_at = |delta: f64| -> Result<f64> {
                model.visit_tensors_mut(|n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                });
                let bf = batch_forward(
                    &model,
                    &cfg,
                    strategy.as_mut(),
                    &ds,
                    &batch,
                    lambda,
                    Trainable::All,
                )?;
                let v = bf.g.scalar_value(bf.loss)?;
                model.visit_tensors_mut(|n, t| {
                    if n == name {
                        t.data_mut()[idx] -= delta;
                    }
                });
                Ok(v)
            };
            let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// One-sided sign-test p-value for the hypothesis "diffs are positive":
/// probability of at least the observed number of positive signs among n
/// fair coin flips. Zero differences count against the hypothesis.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    let positives = diffs.iter().filter(|&&d| d > 0.0).count();
    let mut binom = vec![1.0f64; n + 1];
    for k in 1..=n {
        binom[k] = binom[k - 1] * (n - k + 1) as f64 / k as f64;
    }
    binom[positives..=n].iter().sum::<f64>() / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_with_counts, LongTailSpec, PartBank};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            latent_count: 4,
            feature_dim: 6,
            encoder_channels: vec![5],
            batch_size: 8,
            stage1_epochs: 2,
            stage2_epochs: 1,
            learning_rate: 0.05,
            ..ExperimentConfig::default()
        }
    }

    fn balanced_dataset(per_class: usize, seed: u64) -> LongTailDataset {
        let mut rng = Rng::seeded(seed);
        let bank = PartBank::default_bank(4, &mut rng).unwrap();
        let spec = LongTailSpec { num_classes: 4, n_max: per_class, imbalance_factor: 1.0, seed };
        synth_with_counts(&spec, &bank, &[per_class; 4], 0.1, &mut rng).unwrap()
    }

    #[test]
    fn combined_loss_is_the_weighted_sum() {
        let mut cfg = ExperimentConfig::default(); // alpha 0.1, beta 0.1, gamma 1.0
        let mut g = Graph::new();
        let aug = g.constant(vec![], vec![2.0]).unwrap();
        let recon = g.constant(vec![], vec![1.0]).unwrap();
        let class = g.constant(vec![], vec![0.5]).unwrap();
        let total = combined_loss(&mut g, class, Some(recon), Some(aug), &cfg).unwrap();
        assert!((g.scalar_value(total).unwrap() - 0.8).abs() < 1e-12);

        // alpha = beta = 0 reduces to the plain classification baseline.
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        let total = combined_loss(&mut g, class, Some(recon), Some(aug), &cfg).unwrap();
        assert_eq!(g.scalar_value(total).unwrap(), 0.5);

        // All components zero -> zero.
        let zero = g.constant(vec![], vec![0.0]).unwrap();
        let cfg = ExperimentConfig::default();
        let total = combined_loss(&mut g, zero, Some(zero), Some(zero), &cfg).unwrap();
        assert_eq!(g.scalar_value(total).unwrap(), 0.0);
    }

    #[test]
    fn sgd_matches_hand_computed_momentum_updates() {
        let mut cfg = tiny_config();
        cfg.encoder_channels = vec![];
        let mut rng = Rng::seeded(100);
        let mut model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        let name = "cls_weight".to_string();
        let start = model.cls_weight.data().to_vec();

        let mut g = Graph::new();
        let (_, named) = model.leaves(&mut g, Trainable::All);
        let var = named.iter().find(|(n, _)| n == &name).unwrap().1;
        let bias_var = named.iter().find(|(n, _)| n == "cls_bias").unwrap().1;
        let sum_w = g.sum_all(var);
        let sum_b = g.sum_all(bias_var);
        let total = g.add(sum_w, sum_b).unwrap();
        let grads = g.backward(total).unwrap(); // gradient of sum = all ones

        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut sgd = Sgd::new(lr, mu, wd, LrSchedule::Constant, 10);
        sgd.step(&mut model, &named, &grads, lr);
        sgd.step(&mut model, &named, &grads, lr);

        for (i, &got) in model.cls_weight.data().iter().enumerate() {
            // Replay the two updates by hand.
            let mut p = start[i];
            let mut v = 0.0;
            for _ in 0..2 {
                v = mu * v + (1.0 + wd * p);
                p -= lr * v;
            }
            assert!((got - p).abs() < 1e-12, "index {i}: {got} vs {p}");
        }
        // Bias receives the same gradient but no decay: v1=1, v2=1.9.
        assert!(model.cls_bias.data().iter().all(|&b| (b - (-0.1 - 0.19)).abs() < 1e-12));
        // Parameters outside the loss (no gradient) stay untouched.
        assert_eq!(model.fuse_weight.data(), {
            let mut rng = Rng::seeded(100);
            Model::init(&cfg, 1, 4, &mut rng).unwrap().fuse_weight.data().to_vec()
        });
    }

    #[test]
    fn cosine_schedule_hits_its_endpoints() {
        let sgd = Sgd::new(0.4, 0.9, 0.0, LrSchedule::Cosine, 100);
        assert!((sgd.lr_at(0) - 0.4).abs() < 1e-15);
        assert!((sgd.lr_at(50) - 0.2).abs() < 1e-12);
        assert!(sgd.lr_at(100) < 1e-15);
        let flat = Sgd::new(0.4, 0.9, 0.0, LrSchedule::Constant, 100);
        assert_eq!(flat.lr_at(0), 0.4);
        assert_eq!(flat.lr_at(99), 0.4);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let max_rel = gradient_check(42).unwrap();
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn sign_test_reference_values() {
        assert!((sign_test_p(&[1.0, 0.5, 2.0, 0.1, 3.0]) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_p(&[1.0, 0.5, 2.0, 0.1, -3.0]) - 6.0 / 32.0).abs() < 1e-15);
        // A tie is not a win.
        assert!((sign_test_p(&[1.0, 0.5, 2.0, 0.1, 0.0]) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p(&[]), 1.0);
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let mut cfg = tiny_config();
        cfg.stage1_epochs = 0;
        cfg.stage2_epochs = 0;
        let ds = balanced_dataset(4, 11);
        let mut rng = Rng::seeded(12);
        let mut model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        let before: Vec<Vec<f64>> =
            model.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();

        let mut strategy = aug::make_strategy("latent", 4, 4, 6).unwrap();
        let mut rows = Vec::new();
        train_stage1(&cfg, &ds, &mut model, strategy.as_mut(), &mut rows, &mut rng).unwrap();
        train_stage2(&cfg, &ds, &mut model, &mut rows, &mut rng).unwrap();

        assert!(rows.is_empty());
        for ((_, t), orig) in model.named_tensors().iter().zip(&before) {
            assert_eq!(t.data(), orig.as_slice());
        }
    }

    #[test]
    fn stage2_touches_only_the_classifier() {
        let cfg = tiny_config();
        let ds = balanced_dataset(6, 13);
        let mut rng = Rng::seeded(14);
        let mut model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        let before: Vec<(String, Vec<f64>)> =
            model.named_tensors().iter().map(|(n, t)| (n.clone(), t.data().to_vec())).collect();

        let mut rows = Vec::new();
        train_stage2(&cfg, &ds, &mut model, &mut rows, &mut rng).unwrap();
        assert_eq!(rows.len(), cfg.stage2_epochs);

        let mut classifier_changed = false;
        for ((name, t), (_, orig)) in model.named_tensors().iter().zip(&before) {
            if name.starts_with("cls_") {
                classifier_changed |= t.data() != orig.as_slice();
            } else {
                assert_eq!(t.data(), orig.as_slice(), "{name} must stay frozen");
            }
        }
        assert!(classifier_changed);
    }

    #[test]
    fn constant_classifier_scores_the_prior() {
        let cfg = tiny_config();
        let ds = balanced_dataset(5, 15);
        let mut rng = Rng::seeded(16);
        let mut model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        // Zero every parameter, then bias the classifier toward class 2: the
        // prediction is constant regardless of input.
        model.visit_tensors_mut(|_, t| t.data_mut().fill(0.0));
        model.cls_bias.data_mut()[2] = 1.0;
        let splits = split_classes(&ds.class_counts);
        let report = evaluate(&model, &ds, &splits).unwrap();
        assert!((report.overall_top1 - 25.0).abs() < 1e-12);
        assert_eq!(report.per_class_top1, vec![0.0, 0.0, 100.0, 0.0]);
    }

    #[test]
    fn evaluate_rejects_non_partitions() {
        let cfg = tiny_config();
        let ds = balanced_dataset(2, 17);
        let mut rng = Rng::seeded(18);
        let model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        // Missing class 3.
        let splits = Splits { many: vec![0, 1], medium: vec![2], few: vec![] };
        assert!(evaluate(&model, &ds, &splits).is_err());
        // Class repeated across splits.
        let splits = Splits { many: vec![0, 1], medium: vec![2, 2], few: vec![3] };
        assert!(evaluate(&model, &ds, &splits).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_the_metrics_rows() {
        let cfg = tiny_config();
        let train = balanced_dataset(6, 19);
        let test = balanced_dataset(2, 20);
        let a = train_full(&cfg, &train, &test, None).unwrap();
        let b = train_full(&cfg, &train, &test, None).unwrap();
        assert_eq!(a.rows, b.rows);
        assert!(!a.rows.is_empty());
        // Loss components never undershoot the weighted classification term.
        for row in &a.rows {
            if let MetricsRow::Epoch(e) = row {
                assert!(e.total_loss >= cfg.gamma * e.class_loss - 1e-12);
            }
        }
    }

    #[test]
    fn training_reduces_the_reconstruction_loss() {
        // Scaled-down long-tail run (C=10, IF=100), median over 5 seeds: the
        // final epoch's reconstruction loss must come in under epoch 1's.
        use crate::data::synth_dataset;
        let mut deltas = Vec::new();
        for seed in 0..5u64 {
            let cfg = ExperimentConfig {
                seed,
                latent_count: 6,
                feature_dim: 8,
                encoder_channels: vec![6],
                batch_size: 16,
                stage1_epochs: 8,
                stage2_epochs: 0,
                ..ExperimentConfig::default()
            };
            let spec = LongTailSpec { num_classes: 10, n_max: 120, imbalance_factor: 100.0, seed };
            let mut data_rng = Rng::seeded(1000 + seed);
            let bank = PartBank::default_bank(10, &mut data_rng).unwrap();
            let train = synth_dataset(&spec, &bank, 0.3, &mut data_rng).unwrap();

            let mut rng = Rng::seeded(cfg.seed);
            let mut init_rng = rng.fork();
            let mut stage_rng = rng.fork();
            let mut model = Model::init(&cfg, 1, 10, &mut init_rng).unwrap();
            let mut strategy = aug::make_strategy("latent", 10, 6, 8).unwrap();
            let mut rows = Vec::new();
            train_stage1(&cfg, &train, &mut model, strategy.as_mut(), &mut rows, &mut stage_rng)
                .unwrap();
            let recon = |row: &MetricsRow| match row {
                MetricsRow::Epoch(e) => e.recon_loss,
                MetricsRow::Eval(_) => unreachable!(),
            };
            deltas.push(recon(rows.first().unwrap()) - recon(rows.last().unwrap()));
        }
        deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(deltas[2] > 0.0, "median recon improvement {deltas:?}");
    }

    #[test]
    fn divergent_runs_abort_with_the_step_index() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 1e12;
        cfg.lr_schedule = LrSchedule::Constant;
        cfg.stage1_epochs = 5;
        let ds = balanced_dataset(6, 22);
        let mut rng = Rng::seeded(23);
        let mut model = Model::init(&cfg, 1, 4, &mut rng).unwrap();
        let mut strategy = aug::make_strategy("latent", 4, 4, 6).unwrap();
        let mut rows = Vec::new();
        match train_stage1(&cfg, &ds, &mut model, strategy.as_mut(), &mut rows, &mut rng) {
            Err(Error::Diverged { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn arm_configs_cover_the_component_grid() {
        let base = tiny_config();
        for arm in ABLATION_ARMS {
            let cfg = arm_config(&base, arm, 5).unwrap();
            assert_eq!(arm_name(&cfg), arm, "round-trip through flags");
            assert_eq!(cfg.seed, 5);
        }
        let baseline = arm_config(&base, "baseline", 0).unwrap();
        assert!(!baseline.use_latent && !baseline.use_aug_loss && !baseline.use_recon_loss);
        assert!(arm_config(&base, "mixup", 0).is_err());
    }

    #[test]
    fn ablation_grid_of_one_gives_one_row() {
        let mut cfg = tiny_config();
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 0;
        let train = balanced_dataset(4, 24);
        let test = balanced_dataset(2, 25);
        let rows = run_ablation(&cfg, &train, &test, &["baseline"], &[7]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, "baseline");
        assert_eq!(rows[0].1, 7);
    }

    #[test]
    fn baseline_arm_gets_no_latent_gradient() {
        // With use_latent=false the latent parameters must stay exactly at
        // initialization through a full run: the system is the plain
        // encoder + classifier.
        let mut cfg = arm_config(&tiny_config(), "baseline", 3).unwrap();
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 0;
        let train = balanced_dataset(6, 26);
        let test = balanced_dataset(2, 27);
        let outcome = train_full(&cfg, &train, &test, None).unwrap();

        let mut rng = Rng::seeded(cfg.seed);
        let mut init_rng = rng.fork();
        let reference = Model::init(&cfg, 1, 4, &mut init_rng).unwrap();
        for name in ["latents", "proj_weight", "head_weight", "fuse_weight"] {
            let trained = outcome
                .model
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data()
                .to_vec();
            let initial = reference
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data()
                .to_vec();
            assert_eq!(trained, initial, "{name} must not move in the baseline arm");
        }
        // The classifier itself must have moved.
        let moved = outcome.model.cls_weight.data() != reference.cls_weight.data();
        assert!(moved);
    }

    #[test]
    fn train_full_writes_the_metrics_files() {
        let mut cfg = tiny_config();
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 1;
        let train = balanced_dataset(5, 28);
        let test = balanced_dataset(2, 29);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train_full(&cfg, &train, &test, Some(dir.path())).unwrap();

        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 3); // 2 epochs + final eval
        assert!(metrics.lines().last().unwrap().contains("\"event\":\"eval\""));
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.lines().nth(1).unwrap().starts_with("full,0,"));
        let (loaded, stats, steps) = Model::load(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(steps, outcome.steps);
        assert!(stats.is_some(), "latent strategy statistics are persisted");
        assert_eq!(loaded.num_classes(), 4);
    }
}
