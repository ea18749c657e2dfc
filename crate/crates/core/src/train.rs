//! Two-stage training driver: batch assembly, the optimizer, the learning
//! rate schedule and the ablation matrix.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::{stage1_loss, stage2_loss, ContrastiveConfig, DEFAULT_TAU};
use crate::dataset::{Benchmark, PairRecord, TripletRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{default_low_rank_targets, embed, Binder, Component, Grads, Model, ModelConfig};
use crate::real::Real;
use crate::retrieval::{evaluate, EvalReport};
use crate::rng::{streams, substream};
use crate::templates::{format_caption, format_modification, stage1_image_prompt, TemplateBook, STAGE1_CAPTION};
use crate::tensor::{Shape, Tensor};
use crate::world::{render_image, scene_for_id, ImageGrid};

/// Learning rate of the paper-faithful preset.
pub const PAPER_LR: f64 = 2e-5;
/// Default learning rate for randomly initialized toy models.
pub const TOY_LR: f64 = 3e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub seed: u64,
    pub tau: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub use_low_rank: bool,
    pub lora_r: usize,
    pub lora_alpha: f64,
    /// Weights wrapped by the low-rank deltas; empty means every attention
    /// projection of the language model.
    pub lora_targets: Vec<String>,
    /// Stage-2 hard negative: the original caption of each triplet.
    pub hard_negatives: bool,
    /// Stage-1 hard negative: the near-miss caption stored with each pair.
    pub stage1_hard_negatives: bool,
    pub templates: TemplateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: TOY_LR,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
            epochs_stage1: 1,
            epochs_stage2: 1,
            batch_stage1: 32,
            batch_stage2: 32,
            seed: 0,
            tau: DEFAULT_TAU,
            clip_norm: 1.0,
            use_low_rank: false,
            lora_r: 64,
            lora_alpha: 16.0,
            lora_targets: Vec::new(),
            hard_negatives: true,
            stage1_hard_negatives: false,
            templates: TemplateMode::Random,
        }
    }
}

impl TrainConfig {
    /// Longer schedule the randomly initialized toy model needs before the
    /// ablation arms separate; one epoch per stage leaves it near chance.
    pub fn toy_recipe() -> Self {
        Self {
            lr: 1e-3,
            epochs_stage1: 10,
            epochs_stage2: 10,
            batch_stage1: 16,
            batch_stage2: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be nonnegative");
        }
        if self.batch_stage1 < 2 || self.batch_stage2 < 2 {
            return bad("contrastive batches need at least 2 rows");
        }
        if self.use_low_rank && (self.lora_r == 0 || self.lora_alpha <= 0.0) {
            return bad("low-rank r and alpha must be positive");
        }
        self.contrastive().validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig { tau: self.tau }
    }

    pub fn template_book(&self, custom: Option<&TemplateBook>) -> TemplateBook {
        match self.templates {
            TemplateMode::Fixed => TemplateBook::fixed(),
            TemplateMode::Random => custom.cloned().unwrap_or_default(),
        }
    }

    fn low_rank_targets(&self, cfg: &ModelConfig) -> Vec<String> {
        if self.lora_targets.is_empty() {
            default_low_rank_targets(cfg)
        } else {
            self.lora_targets.clone()
        }
    }
}

/// Linear warmup over `ceil(warmup_ratio * total)` steps, then cosine decay
/// to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(total);
    let warm = libm::ceil(cfg.warmup_ratio * total as f64) as usize;
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if total == warm {
        return cfg.lr;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments per parameter name, with decoupled weight decay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, model: &mut Model, grads: &Grads<f32>, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(BETA1, t as f64);
        let c2 = 1.0 - libm::pow(BETA2, t as f64);
        for (name, g) in grads {
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::Contract(format!("gradient for {name} has the wrong length")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let step = *mi / c1 / (libm::sqrt(*vi / c2) + ADAM_EPS) + weight_decay * *w as f64;
                *w = (*w as f64 - lr * step) as f32;
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &Grads<f32>) -> f64 {
    libm::sqrt(grads.values().flatten().map(|&g| g as f64 * g as f64).sum::<f64>())
}

/// Scales `grads` down to norm `max` when above it; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut Grads<f32>, max: f64) -> f64 {
    let n = global_norm(grads);
    if max > 0.0 && n > max {
        let s = (max / n) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    n
}

/// One sequence to embed: optional image plus prompt text.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqJob {
    pub image: Option<ImageGrid>,
    pub prompt: String,
}

/// Which objective a batch feeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Groups: images, captions.
    Stage1,
    /// Groups: composed queries, modified captions, and optionally the
    /// original captions as hard negatives.
    Stage2,
}

fn apply_objective<T: Real>(tape: &mut Tape<T>, obj: Objective, groups: &[Var], cfg: &ContrastiveConfig) -> Result<Var> {
    match (obj, groups) {
        (Objective::Stage1, [i, c]) => stage1_loss(tape, *i, *c, None, cfg),
        (Objective::Stage1, [i, c, h]) => stage1_loss(tape, *i, *c, Some(*h), cfg),
        (Objective::Stage2, [q, m]) => stage2_loss(tape, *q, *m, None, cfg),
        (Objective::Stage2, [q, m, o]) => stage2_loss(tape, *q, *m, Some(*o), cfg),
        _ => Err(Error::Contract(format!("{} sequence groups do not fit {obj:?}", groups.len()))),
    }
}

fn check_groups(groups: &[Vec<SeqJob>]) -> Result<usize> {
    let n = groups.first().map_or(0, Vec::len);
    if n < 2 || groups.iter().any(|g| g.len() != n) {
        return Err(Error::DegenerateBatch(format!(
            "groups must share one length of at least 2, got {:?}",
            groups.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(n)
}

/// Builds the whole batch loss on one tape. Used for gradient checks; the
/// training loop uses [`batch_gradients`], which yields the same gradients
/// with one tape per sequence.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    obj: Objective,
    groups: &[Vec<SeqJob>],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    check_groups(groups)?;
    let mut stacked = Vec::with_capacity(groups.len());
    for g in groups {
        let mut rows = Vec::with_capacity(g.len());
        for job in g {
            rows.push(embed(tape, binder, job.image.as_ref(), &job.prompt)?.h);
        }
        stacked.push(tape.concat_rows(&rows)?);
    }
    apply_objective(tape, obj, &stacked, cfg)
}

/// Loss value and parameter gradients of one batch. Each sequence gets its
/// own tape (mapped through `exec`); the loss is built over the stacked
/// embeddings and its row gradients are pushed back into every sequence.
pub fn batch_gradients<E: Exec>(
    model: &Model,
    obj: Objective,
    groups: &[Vec<SeqJob>],
    cfg: &ContrastiveConfig,
    exec: &E,
) -> Result<(f64, Grads<f32>)> {
    let n = check_groups(groups)?;
    let jobs: Vec<&SeqJob> = groups.iter().flatten().collect();
    let forward = exec.map(jobs, |job| -> Result<_> {
        let mut tape = Tape::new();
        let mut b = Binder::new(model);
        let e = embed(&mut tape, &mut b, job.image.as_ref(), &job.prompt)?;
        Ok((tape, b, e.h))
    });
    let forward: Vec<_> = forward.into_iter().collect::<Result<_>>()?;
    let d = model.config.d_model;

    let mut loss_tape = Tape::<f32>::new();
    let mut leaves = Vec::with_capacity(groups.len());
    for chunk in forward.chunks(n) {
        let data: Vec<f32> = chunk.iter().flat_map(|(t, _, h)| t.value(*h).iter().copied()).collect();
        let t = Tensor::new(Shape::matrix(n, d), data)?.with_grad();
        leaves.push(loss_tape.leaf(&t));
    }
    let loss = apply_objective(&mut loss_tape, obj, &leaves, cfg)?;
    let value = loss_tape.value(loss)[0] as f64;
    loss_tape.backward(loss)?;
    let mut seeds: Vec<Vec<f32>> = Vec::with_capacity(forward.len());
    for &leaf in &leaves {
        let g = loss_tape.grad(leaf).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n * d]);
        seeds.extend(g.chunks(d).map(<[f32]>::to_vec));
    }

    let per_seq = exec.map(forward.into_iter().zip(seeds).collect(), |((mut tape, b, h), seed)| -> Result<Grads<f32>> {
        tape.backward_seeded(h, &seed)?;
        let mut g = Grads::new();
        b.collect_grads(&tape, &mut g);
        Ok(g)
    });
    let mut grads = Grads::new();
    for g in per_seq {
        for (name, v) in g? {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b): (&mut f32, &f32)| *a += *b),
                None => {
                    grads.insert(name, v);
                }
            }
        }
    }
    Ok((value, grads))
}

fn render_scene(model: &Model, scene_id: u64) -> Result<ImageGrid> {
    render_image(&scene_for_id(scene_id), model.config.image_size, model.config.patch_size)
}

/// Image, caption and (with `hard_negatives`) near-miss caption sequences
/// for a batch of pairs.
pub fn stage1_groups(model: &Model, pairs: &[&PairRecord], hard_negatives: bool) -> Result<Vec<Vec<SeqJob>>> {
    let image_prompt = stage1_image_prompt();
    let mut images = Vec::with_capacity(pairs.len());
    let mut captions = Vec::with_capacity(pairs.len());
    let mut near = Vec::with_capacity(pairs.len());
    for p in pairs {
        if hard_negatives {
            let h = p.hard_negative.as_ref().ok_or_else(|| {
                Error::Config(format!("pair {} has no hard-negative caption", p.scene_id))
            })?;
            near.push(SeqJob {
                image: None,
                prompt: format_caption(h, STAGE1_CAPTION),
            });
        }
        images.push(SeqJob {
            image: Some(render_scene(model, p.scene_id)?),
            prompt: image_prompt.clone(),
        });
        captions.push(SeqJob {
            image: None,
            prompt: format_caption(&p.caption, STAGE1_CAPTION),
        });
    }
    let mut groups = vec![images, captions];
    if hard_negatives {
        groups.push(near);
    }
    Ok(groups)
}

/// Composed, modified-caption and (with `hard_negatives`) original-caption
/// sequences for a batch of triplets. Templates are drawn from `rng`, one
/// modification and one summary template per triplet; the original
/// caption shares the summary template of its modified caption.
pub fn stage2_groups<R: Rng + ?Sized>(
    model: &Model,
    triplets: &[&TripletRecord],
    book: &TemplateBook,
    hard_negatives: bool,
    rng: &mut R,
) -> Result<Vec<Vec<SeqJob>>> {
    let mut composed = Vec::with_capacity(triplets.len());
    let mut modified = Vec::with_capacity(triplets.len());
    let mut original = Vec::with_capacity(triplets.len());
    for t in triplets {
        let tpl = book.image_modification.sample(rng)?;
        let summary = book.caption_summary.sample(rng)?;
        composed.push(SeqJob {
            image: Some(render_scene(model, t.scene_id)?),
            prompt: format_modification(tpl, &t.instruction)?,
        });
        modified.push(SeqJob {
            image: None,
            prompt: format_caption(&t.modified_caption, summary),
        });
        original.push(SeqJob {
            image: None,
            prompt: format_caption(&t.original_caption, summary),
        });
    }
    let mut groups = vec![composed, modified];
    if hard_negatives {
        groups.push(original);
    }
    Ok(groups)
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub model: Model,
    pub curve: Vec<LossRow>,
}

impl StageOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|r| r.loss)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (!self.curve.is_empty()).then(|| self.curve.iter().map(|r| r.loss).sum::<f64>() / self.curve.len() as f64)
    }
}

/// Shuffled batches of indices over `epochs` passes. A trailing batch with
/// fewer than 2 rows is dropped.
pub fn epoch_batches(n: usize, batch: usize, epochs: usize, seed: u64, stream: &str) -> Vec<Vec<usize>> {
    let mut rng = substream(seed, stream);
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        out.extend(order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
    }
    out
}

fn optimize<E, F>(mut model: Model, batches: &[Vec<usize>], cfg: &TrainConfig, exec: &E, obj: Objective, mut build: F) -> Result<StageOutcome>
where
    E: Exec,
    F: FnMut(&Model, &[usize]) -> Result<Vec<Vec<SeqJob>>>,
{
    let total = batches.len();
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(total);
    let ccfg = cfg.contrastive();
    for (step, idx) in batches.iter().enumerate() {
        let groups = build(&model, idx)?;
        let (loss, mut grads) = batch_gradients(&model, obj, &groups, &ccfg, exec)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, value: loss });
        }
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged { step, value: norm });
        }
        let lr = lr_at(step, total, cfg);
        adam.update(&mut model, &grads, lr, cfg.weight_decay)?;
        curve.push(LossRow { step, lr, loss });
    }
    if !model.all_finite() {
        return Err(Error::Diverged {
            step: total,
            value: f64::NAN,
        });
    }
    Ok(StageOutcome { model, curve })
}

/// Stage 1: every component trainable, symmetric image/caption loss.
pub fn run_stage1<E: Exec>(mut model: Model, pairs: &[PairRecord], cfg: &TrainConfig, exec: &E) -> Result<StageOutcome> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Config("stage 1 needs at least 2 pairs".into()));
    }
    model.set_trainable(&[Component::Visual, Component::Adapter, Component::Llm, Component::LowRank]);
    let batches = epoch_batches(pairs.len(), cfg.batch_stage1, cfg.epochs_stage1, cfg.seed, "shuffle-stage1");
    let mut out = optimize(model, &batches, cfg, exec, Objective::Stage1, |m, idx| {
        let batch: Vec<&PairRecord> = idx.iter().map(|&i| &pairs[i]).collect();
        stage1_groups(m, &batch, cfg.stage1_hard_negatives)
    })?;
    out.model.set_trainable(&[]);
    Ok(out)
}

/// Stage 2: visual encoder and adapter frozen; either the language model or
/// only the low-rank deltas are trained on the composed-to-caption loss.
pub fn run_stage2<E: Exec>(
    mut model: Model,
    triplets: &[TripletRecord],
    cfg: &TrainConfig,
    book: &TemplateBook,
    exec: &E,
) -> Result<StageOutcome> {
    cfg.validate()?;
    book.validate()?;
    if triplets.len() < 2 {
        return Err(Error::Config("stage 2 needs at least 2 triplets".into()));
    }
    if cfg.use_low_rank {
        if model.low_rank().is_none() {
            let targets = cfg.low_rank_targets(&model.config);
            let mut rng = substream(cfg.seed, "low-rank-init");
            model.attach_low_rank(&targets, cfg.lora_r, cfg.lora_alpha, &mut rng)?;
        }
        model.set_trainable(&[Component::LowRank]);
    } else {
        model.set_trainable(&[Component::Llm]);
    }
    let batches = epoch_batches(triplets.len(), cfg.batch_stage2, cfg.epochs_stage2, cfg.seed, "shuffle-stage2");
    let mut rng = substream(cfg.seed, "templates-stage2");
    let mut out = optimize(model, &batches, cfg, exec, Objective::Stage2, |m, idx| {
        let batch: Vec<&TripletRecord> = idx.iter().map(|&i| &triplets[i]).collect();
        stage2_groups(m, &batch, book, cfg.hard_negatives, &mut rng)
    })?;
    out.model.set_trainable(&[]);
    Ok(out)
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, crate::model::default_vocab(), &mut substream(seed, streams::INIT))
}

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub stage1: bool,
    pub stage2: bool,
    pub hard_negatives: bool,
    pub templates: TemplateMode,
}

impl ArmSpec {
    pub fn new(name: &str, stage1: bool, stage2: bool, hard_negatives: bool, templates: TemplateMode) -> Self {
        Self {
            name: name.to_string(),
            stage1,
            stage2,
            hard_negatives,
            templates,
        }
    }
}

/// The untrained baseline, each stage alone, and the two-stage recipe
/// crossed with hard negatives and template strategy.
pub fn default_arms() -> Vec<ArmSpec> {
    use TemplateMode::{Fixed, Random};
    vec![
        ArmSpec::new("random-init", false, false, false, Random),
        ArmSpec::new("stage1-only", true, false, false, Random),
        ArmSpec::new("stage2-only", false, true, true, Random),
        ArmSpec::new("stage1+stage2", true, true, true, Random),
        ArmSpec::new("stage1+stage2/no-hard-neg", true, true, false, Random),
        ArmSpec::new("stage1+stage2/fixed-template", true, true, true, Fixed),
        ArmSpec::new("stage1+stage2/no-hard-neg/fixed-template", true, true, false, Fixed),
    ]
}

/// Trains and evaluates one arm for one seed. `stage1` may carry a cached
/// stage-1 model for this seed.
pub fn run_arm<E: Exec>(
    arm: &ArmSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[PairRecord],
    triplets: &[TripletRecord],
    stage1: Option<&Model>,
    bench: &Benchmark,
    ks: &[usize],
    exec: &E,
) -> Result<(Option<Model>, EvalReport)> {
    let mut cfg = cfg.clone();
    cfg.hard_negatives = arm.hard_negatives;
    cfg.templates = arm.templates;
    let mut model = init_model(model_cfg.clone(), cfg.seed)?;
    let mut after_stage1 = None;
    if arm.stage1 {
        model = match stage1 {
            Some(m) => m.clone(),
            None => run_stage1(model, pairs, &cfg, exec)?.model,
        };
        after_stage1 = Some(model.clone());
    }
    if arm.stage2 {
        let book = cfg.template_book(None);
        model = run_stage2(model, triplets, &cfg, &book, exec)?.model;
    }
    if model.low_rank().is_some() {
        model = model.merge_low_rank();
    }
    Ok((after_stage1, evaluate(&model, bench, ks, exec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: ArmSpec,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    /// Seed-averaged recall, aligned with the report's `ks`.
    pub mean_recall: Vec<f64>,
    pub mean_map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm.name == arm)
    }

    pub fn mean_recall_at(&self, arm: &str, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        self.row(arm).map(|r| r.mean_recall[i])
    }
}

/// Runs every arm for every seed, reusing the stage-1 model of a seed
/// across the arms that start from it.
pub fn ablation_matrix<E: Exec>(
    arms: &[ArmSpec],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[PairRecord],
    triplets: &[TripletRecord],
    bench: &Benchmark,
    ks: &[usize],
    exec: &E,
) -> Result<AblationReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and one seed".into()));
    }
    let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); arms.len()];
    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let mut cached: Option<Model> = None;
        for (a, arm) in arms.iter().enumerate() {
            let (s1, report) = run_arm(arm, model_cfg, &cfg, pairs, triplets, cached.as_ref(), bench, ks, exec)?;
            if cached.is_none() {
                cached = s1;
            }
            reports[a].push(report);
        }
    }
    let n = seeds.len() as f64;
    let rows = arms
        .iter()
        .zip(reports)
        .map(|(arm, reports)| {
            let mean = |f: &dyn Fn(&EvalReport, usize) -> f64| -> Vec<f64> {
                (0..ks.len()).map(|i| reports.iter().map(|r| f(r, i)).sum::<f64>() / n).collect()
            };
            AblationRow {
                arm: arm.clone(),
                seeds: seeds.to_vec(),
                mean_recall: mean(&|r, i| r.rows[i].recall),
                mean_map: mean(&|r, i| r.rows[i].map),
                reports,
            }
        })
        .collect();
    Ok(AblationReport { ks: ks.to_vec(), rows })
}

#[cfg(test)]
mod tests;
