//! Adversarial training: alternating hinge-GAN discriminator and generator
//! steps, with L1 reconstruction and style-ranking terms on the generator.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Dtype, ModelCheckpoint, ModelConfig};
use crate::dataprep::{augment_sketch, Dataset, DEFAULT_K};
use crate::error::{RegoError, Result};
use crate::generator::{outpaint, Generator};
use crate::nn::{apply_stat_updates, Adam, Ctx, NormMode, ParamStore};
use crate::styleloss::{style_rank_loss, style_rank_total, FeaturePlugin, RandomConvPyramid};
use crate::tensor::Tensor;

const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub style_weight: f64,
    pub recon_weight: f64,
    pub adv_weight: f64,
    pub seed: u64,
    pub k_neighbors: usize,
    /// Periodic checkpoint interval in iterations.
    pub checkpoint_every: usize,
    /// Randomly drop whole sketch strokes during training.
    pub sketch_augment: bool,
    /// Per-stroke drop probability when `sketch_augment` is on.
    pub sketch_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            batch_size: 1,
            lr_g: 2e-4,
            lr_d: 2e-4,
            style_weight: 0.5,
            recon_weight: 1.0,
            adv_weight: 0.1,
            seed: 0,
            k_neighbors: DEFAULT_K,
            checkpoint_every: 100,
            sketch_augment: false,
            sketch_dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("style_weight", self.style_weight),
            ("recon_weight", self.recon_weight),
            ("adv_weight", self.adv_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(RegoError::Config(format!("{name} = {w} must be a finite value >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(RegoError::Config("batch_size must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(RegoError::Config("k_neighbors must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sketch_dropout) {
            return Err(RegoError::Config("sketch_dropout must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One line of the NDJSON training log. Loss components are already weighted.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub total_g: f64,
    pub recon: f64,
    pub adv: f64,
    pub style: f64,
    pub d_loss: f64,
    pub hinge_active_frac: f64,
}

/// A stacked training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub left_sketch: Tensor,
    pub sketch_right: Tensor,
    pub reference_right: Tensor,
    pub groundtruth: Tensor,
    pub reference_ids: Vec<String>,
}

/// Weighted generator loss terms; `total` carries the graph.
pub struct GeneratorLoss<'t> {
    pub total: Var<'t>,
    pub recon: f64,
    pub adv: f64,
    pub style: f64,
    pub hinge_active_frac: f64,
}

fn scalar(v: &Var<'_>) -> f64 {
    v.value().data()[0]
}

fn divergence(iteration: usize, what: &str, v: f64) -> RegoError {
    RegoError::Divergence {
        iteration,
        detail: format!("{what} = {v}"),
    }
}

/// Hinge loss: `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn discriminator_loss<'t>(real_logits: &Var<'t>, fake_logits: &Var<'t>) -> Var<'t> {
    let real = real_logits.scale(-1.0).add_scalar(1.0).relu().mean();
    let fake = fake_logits.add_scalar(1.0).relu().mean();
    // both means are scalars on the same tape
    real.add(&fake).expect("scalar shapes agree")
}

/// `recon_weight·L1(Î, I) + adv_weight·(−mean D(composite)) + style_weight·style`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'t>(
    generated: &Var<'t>,
    groundtruth: &Var<'t>,
    fake_logits: &Var<'t>,
    left: &Var<'t>,
    reference_right: &Var<'t>,
    extractor: &dyn FeaturePlugin,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss<'t>> {
    let half = model.generator.half_width();
    let recon = generated.sub(groundtruth)?.abs().mean().scale(cfg.recon_weight);
    let adv = fake_logits.mean().scale(-cfg.adv_weight);
    let style = style_rank_loss(&generated.slice_width(half, half)?, left, reference_right, extractor, &model.style)?;
    let style_w = style.loss.scale(cfg.style_weight);
    let total = recon.add(&adv)?.add(&style_w)?;
    Ok(GeneratorLoss {
        recon: scalar(&recon),
        adv: scalar(&adv),
        style: scalar(&style_w),
        hinge_active_frac: style.active_fraction,
        total,
    })
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub best: ModelCheckpoint,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn best_recon(&self) -> f64 {
        self.log.iter().map(|r| r.recon).fold(f64::INFINITY, f64::min)
    }
}

fn split_store(all: &ParamStore) -> (ParamStore, ParamStore) {
    let mut g = ParamStore::new();
    let mut d = ParamStore::new();
    for (name, p) in all.iter() {
        let target = if name.starts_with(DISC_PREFIX) { &mut d } else { &mut g };
        target.insert(name.clone(), p.value.clone(), p.kind);
    }
    (g, d)
}

fn join_store(g: &ParamStore, d: &ParamStore) -> ParamStore {
    let mut all = g.clone();
    all.merge_prefixed(d, DISC_PREFIX);
    all
}

/// Samples a batch, drawing each reference among the first `k` stored neighbors.
pub fn sample_batch(
    dataset: &Dataset,
    generator: &Generator,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut parts: [Vec<Tensor>; 5] = Default::default();
    let mut reference_ids = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let i = rng.gen_range(0..dataset.len());
        let sample = &dataset.samples()[i];
        let neighbors = dataset.index().neighbors(&sample.id)?;
        let k = cfg.k_neighbors.min(neighbors.len());
        let pick = neighbors[rng.gen_range(0..k)];
        let reference = dataset
            .get(pick)
            .ok_or_else(|| RegoError::NotFound(format!("reference image `{pick}`")))?;
        let mut sketch = dataset.sketch(i).right_half()?;
        if cfg.sketch_augment {
            sketch = augment_sketch(&sketch, cfg.sketch_dropout, rng);
        }
        parts[0].push(sample.left_half()?);
        parts[1].push(sketch.mask().clone());
        parts[2].push(reference.right_half()?);
        parts[3].push(sample.pixels().clone());
        reference_ids.push(pick.to_string());
    }
    let left = Tensor::concat_batch(&parts[0])?;
    Ok(Batch {
        left_sketch: generator.left_sketch(&left)?,
        left,
        sketch_right: Tensor::concat_batch(&parts[1])?,
        reference_right: Tensor::concat_batch(&parts[2])?,
        groundtruth: Tensor::concat_batch(&parts[3])?,
        reference_ids,
    })
}

struct LogSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
    path: PathBuf,
}

impl LogSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(LogSink { file: None, path: PathBuf::new() });
        };
        std::fs::create_dir_all(dir).map_err(|e| RegoError::io(dir, e))?;
        let path = dir.join("train_log.ndjson");
        let f = std::fs::File::create(&path).map_err(|e| RegoError::io(&path, e))?;
        Ok(LogSink { file: Some(std::io::BufWriter::new(f)), path })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| RegoError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains from scratch. With `out_dir`, writes `train_log.ndjson`,
/// `iter_NNNNNN.ckpt` every `checkpoint_every` iterations, `best.ckpt` and
/// `final.ckpt`. On divergence the parameters from before the failing step
/// are saved as `last_good.ckpt` and the error is returned.
pub fn train(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.style.validate()?;
    if dataset.is_empty() {
        return Err(RegoError::Config("training dataset is empty".into()));
    }
    let (h, w) = dataset.resolution().expect("non-empty dataset");
    if (h, w) != (model.generator.height, model.generator.width) {
        return Err(RegoError::Config(format!(
            "dataset is {h}x{w} but the model expects {}x{}",
            model.generator.height, model.generator.width
        )));
    }
    let generator = Generator::new(&model.generator)?;
    let extractor = RandomConvPyramid::from_id(&model.style.extractor)?;
    let (mut store_g, mut store_d) = split_store(&generator.init_params()?);
    let mut adam_g = Adam::new(cfg.lr_g, 0.5, 0.999);
    let mut adam_d = Adam::new(cfg.lr_d, 0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sink = LogSink::open(out_dir)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let snapshot = |g: &ParamStore, d: &ParamStore, iteration: usize, rng: &ChaCha8Rng| -> Result<ModelCheckpoint> {
        let mut c = ModelCheckpoint::new(model.clone(), join_store(g, d));
        c.iteration = iteration as u64;
        c.rng_state = serde_json::to_value(rng)?;
        Ok(c)
    };
    let save = |c: &ModelCheckpoint, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => c.save(&dir.join(name), Dtype::F32),
            None => Ok(()),
        }
    };
    let mut best = snapshot(&store_g, &store_d, 0, &rng)?;
    let mut best_recon = f64::INFINITY;
    let half = model.generator.half_width();

    for iter in 1..=cfg.iterations {
        let batch = sample_batch(dataset, &generator, cfg, &mut rng)?;
        let tape = Tape::new();
        let ctx_g = Ctx::new(&tape, &store_g, NormMode::Batch);
        let generated = generator.generate(
            &ctx_g,
            &tape.constant(batch.left.clone()),
            &tape.constant(batch.left_sketch.clone()),
            &tape.constant(batch.sketch_right.clone()),
            &tape.constant(batch.reference_right.clone()),
        )?;
        let left = tape.constant(batch.left.clone());
        let composite = left.concat_width(&generated.slice_width(half, half)?)?;

        // discriminator step on detached composites
        let d_loss = {
            let dtape = Tape::new();
            let ctx_d = Ctx::new(&dtape, &store_d, NormMode::Batch);
            let real = generator.discriminate(&ctx_d, &dtape.constant(batch.groundtruth.clone()))?;
            let fake = generator.discriminate(&ctx_d, &dtape.constant(composite.value().clone()))?;
            let loss = discriminator_loss(&real, &fake);
            let v = scalar(&loss);
            if !v.is_finite() {
                save(&snapshot(&store_g, &store_d, iter - 1, &rng)?, "last_good.ckpt")?;
                return Err(divergence(iter, "d_loss", v));
            }
            let grads = ctx_d.param_grads(&dtape.backward(loss)?);
            adam_d.step(&mut store_d, &grads)?;
            v
        };

        // generator step against the updated discriminator
        let ctx_d = Ctx::new(&tape, &store_d, NormMode::Batch).frozen();
        let fake_logits = generator.discriminate(&ctx_d, &composite)?;
        let parts = generator_loss(
            &generated,
            &tape.constant(batch.groundtruth.clone()),
            &fake_logits,
            &left,
            &tape.constant(batch.reference_right.clone()),
            &extractor,
            model,
            cfg,
        )?;
        let rec = LogRecord {
            iter,
            total_g: scalar(&parts.total),
            recon: parts.recon,
            adv: parts.adv,
            style: parts.style,
            d_loss,
            hinge_active_frac: parts.hinge_active_frac,
        };
        for (what, v) in [("total_g", rec.total_g), ("recon", rec.recon), ("adv", rec.adv), ("style", rec.style)] {
            if !v.is_finite() {
                save(&snapshot(&store_g, &store_d, iter - 1, &rng)?, "last_good.ckpt")?;
                return Err(divergence(iter, what, v));
            }
        }
        let grads = ctx_g.param_grads(&tape.backward(parts.total)?);
        let stats = ctx_g.take_stat_updates();
        drop(ctx_d);
        drop(ctx_g);
        adam_g.step(&mut store_g, &grads)?;
        apply_stat_updates(&mut store_g, &stats)?;

        sink.write(&rec)?;
        progress(&rec);
        if rec.recon < best_recon {
            best_recon = rec.recon;
            best = snapshot(&store_g, &store_d, iter, &rng)?;
        }
        log.push(rec);
        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
            save(&snapshot(&store_g, &store_d, iter, &rng)?, &format!("iter_{iter:06}.ckpt"))?;
            save(&best, "best.ckpt")?;
        }
    }
    let checkpoint = snapshot(&store_g, &store_d, cfg.iterations, &rng)?;
    save(&checkpoint, "final.ckpt")?;
    save(&best, "best.ckpt")?;
    Ok(TrainOutcome { checkpoint, best, log })
}

/// Mean unweighted L1 reconstruction and style-ranking loss of inference-mode
/// outputs over a dataset, using each sample's own sketch and top-1 neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeldOutLosses {
    pub recon: f64,
    pub style: f64,
}

impl HeldOutLosses {
    pub fn combined(&self) -> f64 {
        self.recon + self.style
    }
}

pub fn held_out_losses(checkpoint: &ModelCheckpoint, dataset: &Dataset) -> Result<HeldOutLosses> {
    if dataset.is_empty() {
        return Err(RegoError::Config("evaluation dataset is empty".into()));
    }
    let generator = checkpoint.generator()?;
    let extractor = RandomConvPyramid::from_id(&checkpoint.config.style.extractor)?;
    let half = checkpoint.config.generator.half_width();
    let (mut recon, mut style) = (0.0, 0.0);
    for (i, sample) in dataset.samples().iter().enumerate() {
        let neighbor = dataset.index().neighbors(&sample.id)?[0];
        let reference = dataset
            .get(neighbor)
            .ok_or_else(|| RegoError::NotFound(format!("reference image `{neighbor}`")))?
            .right_half()?;
        let left = sample.left_half()?;
        let sketch = dataset.sketch(i).right_half()?;
        let out = outpaint(&generator, &checkpoint.params, &left, Some(&sketch), Some(&reference))?;
        recon += out.raw.zip_map(sample.pixels(), |a, b| (a - b).abs()).mean();
        style += style_rank_total(&out.raw.slice_width(half, half), &left, &reference, &extractor, &checkpoint.config.style)?;
    }
    let n = dataset.len() as f64;
    Ok(HeldOutLosses { recon: recon / n, style: style / n })
}
