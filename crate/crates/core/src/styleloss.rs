//! Gram-matrix style statistics and the hinge style-ranking loss.
//!
//! For every selected extractor layer `d` the generated half `R`, the left
//! input `L` and the reference `G` are summarized by Gram matrices and scored
//! with `[α − cos(R, L) + cos(R, G)]₊`. The layer terms are combined with
//! weights `w_d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acs::FeatureMap;
use crate::autograd::{cosine_parts, ConvGeom, Tape, Var};
use crate::error::{RegoError, Result};
use crate::nn::{Conv2d, Ctx, NormMode, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_LAYER_WEIGHT: f64 = 0.2;
pub const DEFAULT_LAYERS: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    pub alpha: f64,
    /// Extractor layers used, by index.
    pub layers: Vec<usize>,
    pub layer_weights: Vec<f64>,
    pub extractor: String,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            alpha: DEFAULT_ALPHA,
            layers: (0..DEFAULT_LAYERS).collect(),
            layer_weights: vec![DEFAULT_LAYER_WEIGHT; DEFAULT_LAYERS],
            extractor: RandomConvPyramid::DEFAULT_ID.to_string(),
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(RegoError::Config(format!("style.alpha = {} must be >= 0", self.alpha)));
        }
        if self.layers.len() != self.layer_weights.len() {
            return Err(RegoError::Config(format!(
                "{} style layers but {} weights",
                self.layers.len(),
                self.layer_weights.len()
            )));
        }
        if self.layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(RegoError::Config("style layer weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Multi-layer activations for style statistics.
pub trait FeaturePlugin: Send + Sync {
    fn id(&self) -> String;
    fn num_layers(&self) -> usize;
    /// Activations of every layer for a `[n, 3, H, W]` batch in `[0, 1]`.
    fn features<'t>(&self, images: &Var<'t>) -> Result<Vec<Var<'t>>>;
}

/// A frozen stack of seeded random 3×3 stride-2 convolutions with rectifiers.
pub struct RandomConvPyramid {
    seed: u64,
    convs: Vec<Conv2d>,
    store: ParamStore,
}

impl RandomConvPyramid {
    pub const DEFAULT_ID: &'static str = "randconv5-s7";
    const CHANNELS: [usize; 5] = [8, 16, 32, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(format!("stage{i}"), cin, c, ConvGeom::square(3, 2, 1)));
            cin = c;
        }
        let mut specs: Vec<ParamSpec> = Vec::new();
        convs.iter().for_each(|c| c.specs(&mut specs));
        // He-style scale keeps activations from vanishing through the stack
        let mut store = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(seed)).expect("unique names");
        for (_, p) in store.iter_mut() {
            p.value = p.value.scale(6f64.sqrt());
        }
        RandomConvPyramid { seed, convs, store }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        id.strip_prefix("randconv5-s")
            .and_then(|s| s.parse().ok())
            .map(Self::new)
            .ok_or_else(|| RegoError::Config(format!("unknown style extractor `{id}`")))
    }
}

impl FeaturePlugin for RandomConvPyramid {
    fn id(&self) -> String {
        format!("randconv5-s{}", self.seed)
    }

    fn num_layers(&self) -> usize {
        self.convs.len()
    }

    fn features<'t>(&self, images: &Var<'t>) -> Result<Vec<Var<'t>>> {
        if images.shape()[1] != 3 {
            return Err(RegoError::Shape(format!("extractor expects RGB input, got {:?}", images.shape())));
        }
        let ctx = Ctx::new(images.tape(), &self.store, NormMode::Running).frozen();
        let mut x = images.scale(2.0).add_scalar(-1.0);
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = conv.forward(&ctx, &x)?.relu();
            out.push(x);
        }
        Ok(out)
    }
}

/// Gram matrix of one layer's activations.
#[derive(Clone, Debug, PartialEq)]
pub struct GramStyle {
    matrix: Tensor,
    pub layer: usize,
}

impl GramStyle {
    pub fn from_matrix(n: usize, data: Vec<f64>, layer: usize) -> Result<Self> {
        Ok(GramStyle {
            matrix: Tensor::from_vec([1, 1, n, n], data)?,
            layer,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.h()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(0, 0, i, j)
    }

    pub fn data(&self) -> &[f64] {
        self.matrix.data()
    }
}

/// `R[i,j] = Σ_k M[i,k]·M[j,k] / (h·w)` with `M` the channel-major flattening.
pub fn gram_matrix(feat: &FeatureMap, layer: usize) -> GramStyle {
    GramStyle {
        matrix: crate::autograd::gram(feat.tensor()),
        layer,
    }
}

/// Cosine similarity of the flattened matrices and whether either one was all zeros.
pub fn style_similarity_flagged(a: &GramStyle, b: &GramStyle) -> Result<(f64, bool)> {
    if a.dim() != b.dim() {
        return Err(RegoError::Shape(format!(
            "Gram matrices of size {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (dot, na, nb) = cosine_parts(a.data(), b.data());
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok((dot / (na * nb), false))
}

pub fn style_similarity(a: &GramStyle, b: &GramStyle) -> Result<f64> {
    let (s, degenerate) = style_similarity_flagged(a, b)?;
    if degenerate {
        log::warn!("style similarity of an all-zero Gram matrix taken as 0");
    }
    Ok(s)
}

pub fn style_rank_layer(gen: &GramStyle, left: &GramStyle, reference: &GramStyle, alpha: f64) -> Result<f64> {
    let pos = style_similarity(gen, left)?;
    let neg = style_similarity(gen, reference)?;
    Ok((alpha - pos + neg).max(0.0))
}

fn check_layers(extractor: &dyn FeaturePlugin, cfg: &StyleConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(&bad) = cfg.layers.iter().find(|&&d| d >= extractor.num_layers()) {
        return Err(RegoError::Config(format!(
            "style layer {bad} requested but extractor `{}` has {} layers",
            extractor.id(),
            extractor.num_layers()
        )));
    }
    Ok(())
}

/// Weighted style-ranking loss for a batch, averaged over the batch.
pub struct StyleLoss<'t> {
    pub loss: Var<'t>,
    /// Fraction of (layer, sample) hinge terms with a positive argument.
    pub active_fraction: f64,
}

/// Differentiable loss for `[n, 3, H, W/2]` batches of generated, left and reference halves.
pub fn style_rank_loss<'t>(
    generated: &Var<'t>,
    left: &Var<'t>,
    reference: &Var<'t>,
    extractor: &dyn FeaturePlugin,
    cfg: &StyleConfig,
) -> Result<StyleLoss<'t>> {
    check_layers(extractor, cfg)?;
    if generated.shape() != left.shape() || generated.shape() != reference.shape() {
        return Err(RegoError::Shape(format!(
            "style inputs differ: {:?}, {:?}, {:?}",
            generated.shape(),
            left.shape(),
            reference.shape()
        )));
    }
    let fg = extractor.features(generated)?;
    let fl = extractor.features(left)?;
    let fr = extractor.features(reference)?;
    let tape = generated.tape();
    let mut total: Option<Var<'t>> = None;
    let mut active = 0usize;
    let mut terms = 0usize;
    for (&d, &w) in cfg.layers.iter().zip(&cfg.layer_weights) {
        let rg = fg[d].gram();
        let lg = fl[d].gram();
        let gg = fr[d].gram();
        let arg = rg.cosine(&gg)?.sub(&rg.cosine(&lg)?)?.add_scalar(cfg.alpha);
        for &v in arg.value().data() {
            terms += 1;
            if v > 0.0 {
                active += 1;
            }
        }
        let term = arg.relu().mean().scale(w);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let loss = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(StyleLoss {
        loss,
        active_fraction: if terms == 0 { 0.0 } else { active as f64 / terms as f64 },
    })
}

/// Eager loss for single `[1, 3, H, W/2]` images.
pub fn style_rank_total(
    generated: &Tensor,
    left: &Tensor,
    reference: &Tensor,
    extractor: &dyn FeaturePlugin,
    cfg: &StyleConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let out = style_rank_loss(
        &tape.constant(generated.clone()),
        &tape.constant(left.clone()),
        &tape.constant(reference.clone()),
        extractor,
        cfg,
    )?;
    let v = out.loss.value().data()[0];
    Ok(v)
}

/// Per-layer Gram matrices of one image, for inspection and tests.
pub fn layer_grams(image: &Tensor, extractor: &dyn FeaturePlugin) -> Result<Vec<GramStyle>> {
    let tape = Tape::new();
    let feats = extractor.features(&tape.constant(image.clone()))?;
    Ok(feats
        .iter()
        .enumerate()
        .map(|(d, f)| GramStyle {
            matrix: crate::autograd::gram(&f.value()),
            layer: d,
        })
        .collect())
}
