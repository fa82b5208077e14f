//! Encoder–decoder generator with ACS blocks, reference and sketch encoders,
//! and the patch discriminator used in training.
//!
//! Geometry for `decoder_layers = L`: the left half (`H × W/2`) is encoded by
//! `L` stride-2 convolutions down to level `L`; a 1×1 expansion produces twice
//! the channels, which are laid side by side to form `F = [F_L | F_R]` at full
//! width. Decoder layer `i` upsamples to level `L-1-i`, and ACS `i` (if
//! enabled) follows it. Level `j` has `min(base·2^(j-1), max_channels)`
//! channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acs::AcsBlock;
use crate::autograd::{ConvGeom, Tape, Var};
use crate::dataprep::{binarize, EdgePlugin, GradientEdges, DEFAULT_THRESHOLD};
use crate::error::{RegoError, Result};
use crate::imageio::Sketch;
use crate::nn::{Conv2d, Ctx, NormMode, ParamSpec, ParamStore};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub decoder_layers: usize,
    /// One flag per decoder layer; the last layer never carries an ACS.
    pub acs_enabled: Vec<bool>,
    /// Binarization threshold for the sketch of the known left half.
    pub sketch_threshold: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::new(64, 128, 32, 4)
    }
}

impl GeneratorConfig {
    /// ACS after every decoder layer but the last.
    pub fn new(height: usize, width: usize, base_channels: usize, decoder_layers: usize) -> Self {
        let mut acs_enabled = vec![true; decoder_layers];
        if let Some(last) = acs_enabled.last_mut() {
            *last = false;
        }
        GeneratorConfig {
            height,
            width,
            base_channels,
            max_channels: 2 * base_channels,
            decoder_layers,
            acs_enabled,
            sketch_threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }

    pub fn without_acs(mut self) -> Self {
        self.acs_enabled.iter_mut().for_each(|f| *f = false);
        self
    }

    pub fn half_width(&self) -> usize {
        self.width / 2
    }

    pub fn channels_at(&self, level: usize) -> usize {
        if level == 0 {
            return 3;
        }
        (self.base_channels << (level - 1)).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 8 && v.is_power_of_two();
        if !pow2(self.height) || !pow2(self.width) {
            return Err(RegoError::Config(format!(
                "resolution {}x{} must be powers of two >= 8",
                self.height, self.width
            )));
        }
        if self.height > 128 || self.width > 256 {
            return Err(RegoError::Config("resolutions above 128x256 are not supported".into()));
        }
        if self.decoder_layers < 2 {
            return Err(RegoError::Config("decoder_layers must be >= 2".into()));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(RegoError::Config("channel widths must be positive with max >= base".into()));
        }
        let l = self.decoder_layers;
        if self.height >> l == 0 || self.half_width() >> l == 0 {
            return Err(RegoError::Config(format!(
                "{l} stride-2 levels do not fit {}x{}",
                self.height,
                self.half_width()
            )));
        }
        if self.acs_enabled.len() != l {
            return Err(RegoError::Config(format!(
                "acs_enabled has {} flags for {l} decoder layers",
                self.acs_enabled.len()
            )));
        }
        if self.acs_enabled[l - 1] {
            return Err(RegoError::Config("the last decoder layer cannot carry an ACS".into()));
        }
        if !(self.sketch_threshold > 0.0 && self.sketch_threshold < 1.0) {
            return Err(RegoError::Config("sketch_threshold must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Per-decoder-layer feature pyramid; `None` where no ACS consumes it.
pub type Pyramid<'t> = Vec<Option<Var<'t>>>;

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<Conv2d>,
    expand: Conv2d,
    decoder: Vec<Conv2d>,
    acs: Vec<Option<AcsBlock>>,
    ref_encoder: Vec<Conv2d>,
    sketch_encoder: Vec<Conv2d>,
    discriminator: Vec<Conv2d>,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.decoder_layers;
        let s2 = ConvGeom::square(3, 2, 1);
        let c3 = ConvGeom::square(3, 1, 1);
        let encoder = (1..=l)
            .map(|j| {
                let cin = if j == 1 { 4 } else { cfg.channels_at(j - 1) };
                Conv2d::new(format!("enc.{}", j - 1), cin, cfg.channels_at(j), s2)
            })
            .collect();
        let bottleneck = cfg.channels_at(l);
        let expand = Conv2d::new("expand", bottleneck, 2 * bottleneck, ConvGeom::square(1, 1, 0));
        let decoder = (0..l)
            .map(|i| Conv2d::new(format!("dec.{i}"), cfg.channels_at(l - i), cfg.channels_at(l - 1 - i), c3))
            .collect();
        let mut acs = Vec::with_capacity(l);
        for i in 0..l {
            if cfg.acs_enabled[i] {
                let level = l - 1 - i;
                acs.push(Some(AcsBlock::new(
                    i,
                    cfg.channels_at(level),
                    cfg.height >> level,
                    cfg.half_width() >> level,
                )?));
            } else {
                acs.push(None);
            }
        }
        // side encoders only go as deep as the deepest ACS level
        let deepest = (0..l)
            .filter(|&i| cfg.acs_enabled[i])
            .map(|i| l - 1 - i)
            .max()
            .unwrap_or(0);
        let side = |prefix: &str, cin: usize| -> Vec<Conv2d> {
            (1..=deepest)
                .map(|j| {
                    let cin = if j == 1 { cin } else { cfg.channels_at(j - 1) };
                    Conv2d::new(format!("{prefix}.{}", j - 1), cin, cfg.channels_at(j), s2)
                })
                .collect()
        };
        let dc = |k: usize| (cfg.base_channels << k).min(cfg.max_channels);
        let discriminator = vec![
            Conv2d::new("disc.0", 3, dc(0), s2),
            Conv2d::new("disc.1", dc(0), dc(1), s2),
            Conv2d::new("disc.2", dc(1), dc(2), s2),
            Conv2d::new("disc.3", dc(2), 1, c3),
        ];
        Ok(Generator {
            cfg: cfg.clone(),
            encoder,
            expand,
            decoder,
            acs,
            ref_encoder: side("ref_enc", 3),
            sketch_encoder: side("sketch_enc", 1),
            discriminator,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn acs_count(&self) -> usize {
        self.acs.iter().filter(|a| a.is_some()).count()
    }

    pub fn acs_blocks(&self) -> impl Iterator<Item = &AcsBlock> {
        self.acs.iter().flatten()
    }

    /// Every tensor of the model, in initialization order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for c in &self.encoder {
            c.specs(&mut out);
        }
        self.expand.specs(&mut out);
        for (i, c) in self.decoder.iter().enumerate() {
            c.specs(&mut out);
            if let Some(a) = &self.acs[i] {
                a.specs(&mut out);
            }
        }
        for c in self.ref_encoder.iter().chain(&self.sketch_encoder).chain(&self.discriminator) {
            c.specs(&mut out);
        }
        out
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        ParamStore::from_specs(&self.specs(), &mut ChaCha8Rng::seed_from_u64(self.cfg.seed))
    }

    fn half_shape(&self, n: usize, c: usize) -> [usize; 4] {
        [n, c, self.cfg.height, self.cfg.half_width()]
    }

    fn check_half(&self, v: &Var<'_>, c: usize, what: &str) -> Result<usize> {
        let s = v.shape();
        if s[1..] != self.half_shape(s[0], c)[1..] {
            return Err(RegoError::Shape(format!(
                "{what}: got {s:?}, expected [n, {c}, {}, {}]",
                self.cfg.height,
                self.cfg.half_width()
            )));
        }
        Ok(s[0])
    }

    /// Hidden features `F` spanning the full output width at the bottleneck.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, left: &Var<'t>, left_sketch: &Var<'t>) -> Result<Var<'t>> {
        let n = self.check_half(left, 3, "left image")?;
        if self.check_half(left_sketch, 1, "left sketch")? != n {
            return Err(RegoError::Shape("left image and sketch batch sizes differ".into()));
        }
        let mut x = Var::concat_channels(&[*left, *left_sketch])?;
        for conv in &self.encoder {
            x = conv.forward(ctx, &x)?.leaky_relu(LEAK);
        }
        let c = self.cfg.channels_at(self.cfg.decoder_layers);
        let both = self.expand.forward(ctx, &x)?;
        both.slice_channels(0, c)?.concat_width(&both.slice_channels(c, c)?)
    }

    fn side_pyramid<'t>(&self, ctx: &Ctx<'t, '_>, convs: &[Conv2d], input: &Var<'t>) -> Result<Pyramid<'t>> {
        let l = self.cfg.decoder_layers;
        let mut levels = Vec::with_capacity(convs.len());
        let mut x = *input;
        for conv in convs {
            x = conv.forward(ctx, &x)?.relu();
            levels.push(x);
        }
        Ok((0..l)
            .map(|i| self.acs[i].as_ref().map(|_| levels[l - 2 - i]))
            .collect())
    }

    pub fn encode_reference<'t>(&self, ctx: &Ctx<'t, '_>, reference_right: &Var<'t>) -> Result<Pyramid<'t>> {
        self.check_half(reference_right, 3, "reference")?;
        self.side_pyramid(ctx, &self.ref_encoder, reference_right)
    }

    pub fn encode_sketch<'t>(&self, ctx: &Ctx<'t, '_>, sketch_right: &Var<'t>) -> Result<Pyramid<'t>> {
        self.check_half(sketch_right, 1, "sketch")?;
        self.side_pyramid(ctx, &self.sketch_encoder, sketch_right)
    }

    /// Rebuilds the full `H × W` image in `[0, 1]`.
    pub fn decode<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        feat: &Var<'t>,
        refs: &Pyramid<'t>,
        sketches: &Pyramid<'t>,
    ) -> Result<Var<'t>> {
        let l = self.cfg.decoder_layers;
        if refs.len() != l || sketches.len() != l {
            return Err(RegoError::Shape(format!(
                "pyramids have {} and {} levels, decoder has {l}",
                refs.len(),
                sketches.len()
            )));
        }
        let mut x = *feat;
        for (i, conv) in self.decoder.iter().enumerate() {
            x = conv.forward(ctx, &x.upsample2x())?;
            if i == l - 1 {
                return Ok(x.tanh().scale(0.5).add_scalar(0.5));
            }
            x = x.relu();
            if let Some(block) = &self.acs[i] {
                let (r, s) = match (&refs[i], &sketches[i]) {
                    (Some(r), Some(s)) => (r, s),
                    _ => {
                        return Err(RegoError::Shape(format!("missing pyramid level for ACS {i}")));
                    }
                };
                x = block.forward(ctx, &x, r, s)?;
            }
        }
        unreachable!("decoder has at least two layers")
    }

    /// Full generator pass.
    pub fn generate<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        left: &Var<'t>,
        left_sketch: &Var<'t>,
        sketch_right: &Var<'t>,
        reference_right: &Var<'t>,
    ) -> Result<Var<'t>> {
        let feat = self.encode(ctx, left, left_sketch)?;
        let refs = self.encode_reference(ctx, reference_right)?;
        let sketches = self.encode_sketch(ctx, sketch_right)?;
        self.decode(ctx, &feat, &refs, &sketches)
    }

    /// Patch logits for `[n, 3, H, W]` images.
    pub fn discriminate<'t>(&self, ctx: &Ctx<'t, '_>, images: &Var<'t>) -> Result<Var<'t>> {
        let last = self.discriminator.len() - 1;
        let mut x = *images;
        for (i, conv) in self.discriminator.iter().enumerate() {
            x = conv.forward(ctx, &x)?;
            if i != last {
                x = x.leaky_relu(LEAK);
            }
        }
        Ok(x)
    }

    /// Binary sketch of a batch of left halves, as the encoder's fourth input channel.
    pub fn left_sketch(&self, left: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(left.n());
        for b in 0..left.n() {
            let edges = GradientEdges.detect(&left.select_sample(b))?;
            parts.push(binarize(&edges, self.cfg.sketch_threshold)?.mask().clone());
        }
        Tensor::concat_batch(&parts)
    }
}

/// Output of [`outpaint`].
#[derive(Clone, Debug, PartialEq)]
pub struct Outpainting {
    /// Generated right half, `[1, 3, H, W/2]`.
    pub right: Tensor,
    /// Input left half followed by the generated right half.
    pub composite: Tensor,
    /// The raw generator output before pasting.
    pub raw: Tensor,
}

/// Inference with stored normalization statistics. A missing sketch means
/// random outpainting (all-zero sketch); a missing reference is all zeros.
pub fn outpaint(
    generator: &Generator,
    params: &ParamStore,
    left: &Tensor,
    sketch_right: Option<&Sketch>,
    reference_right: Option<&Tensor>,
) -> Result<Outpainting> {
    let cfg = generator.config();
    let (h, hw) = (cfg.height, cfg.half_width());
    if left.shape() != [1, 3, h, hw] {
        return Err(RegoError::Config(format!(
            "left image {:?} does not match the model's {h}x{hw} half",
            left.shape()
        )));
    }
    let sketch = match sketch_right {
        Some(s) if s.height() != h || s.width() != hw => {
            return Err(RegoError::Config(format!(
                "sketch {}x{} does not match the model's {h}x{hw} half",
                s.height(),
                s.width()
            )))
        }
        Some(s) => s.mask().clone(),
        None => Tensor::zeros([1, 1, h, hw]),
    };
    let reference = match reference_right {
        Some(r) if r.shape() != [1, 3, h, hw] => {
            return Err(RegoError::Config(format!(
                "reference {:?} does not match the model's {h}x{hw} half",
                r.shape()
            )))
        }
        Some(r) => r.clone(),
        None => Tensor::zeros([1, 3, h, hw]),
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, NormMode::Running).frozen();
    let out = generator.generate(
        &ctx,
        &tape.constant(left.clone()),
        &tape.constant(generator.left_sketch(left)?),
        &tape.constant(sketch),
        &tape.constant(reference),
    )?;
    let raw = out.value().clone();
    let right = raw.slice_width(hw, hw);
    let composite = Tensor::concat_width(left, &right)?;
    Ok(Outpainting { right, composite, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> GeneratorConfig {
        let mut cfg = GeneratorConfig::new(16, 32, 4, 3);
        cfg.seed = 3;
        cfg
    }

    fn rand_tensor(seed: u64, shape: [usize; 4]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_config_places_acs_on_all_but_last() {
        let cfg = GeneratorConfig::default();
        assert_eq!((cfg.height, cfg.width, cfg.base_channels, cfg.decoder_layers), (64, 128, 32, 4));
        let g = Generator::new(&cfg).unwrap();
        assert_eq!(g.acs_count(), cfg.decoder_layers - 1);
        assert!(g.specs().iter().any(|s| s.name.starts_with("acs.2.")));
        assert!(!g.specs().iter().any(|s| s.name.starts_with("acs.3.")));
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.height = 24;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.decoder_layers = 1;
        c.acs_enabled = vec![false];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.acs_enabled = vec![true, true, true];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.decoder_layers = 5; // 16 >> 5 == 0
        c.acs_enabled = vec![false; 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_doubles_width() {
        let g = Generator::new(&small_cfg()).unwrap();
        let params = g.init_params().unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, NormMode::Running);
        let left = tape.constant(rand_tensor(1, [2, 3, 16, 16]));
        let sketch = tape.constant(Tensor::zeros([2, 1, 16, 16]));
        let f = g.encode(&ctx, &left, &sketch).unwrap();
        assert_eq!(f.shape(), [2, 8, 2, 4]);
        let bad = tape.constant(Tensor::zeros([2, 3, 16, 8]));
        assert!(matches!(g.encode(&ctx, &bad, &sketch), Err(RegoError::Shape(_))));
    }

    #[test]
    fn side_pyramids_match_acs_levels() {
        let g = Generator::new(&small_cfg()).unwrap();
        let params = g.init_params().unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, NormMode::Running);
        let refs = g.encode_reference(&ctx, &tape.constant(rand_tensor(2, [1, 3, 16, 16]))).unwrap();
        let shapes: Vec<Option<[usize; 4]>> = refs.iter().map(|r| r.map(|v| v.shape())).collect();
        assert_eq!(shapes, vec![Some([1, 8, 4, 4]), Some([1, 4, 8, 8]), None]);
        let zero = g.encode_reference(&ctx, &tape.constant(Tensor::zeros([1, 3, 16, 16]))).unwrap();
        for v in zero.iter().flatten() {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
        let sk = g.encode_sketch(&ctx, &tape.constant(Tensor::zeros([1, 1, 16, 16]))).unwrap();
        assert_eq!(sk.iter().flatten().count(), 2);
    }

    #[test]
    fn outpaint_contract() {
        let g = Generator::new(&small_cfg()).unwrap();
        let params = g.init_params().unwrap();
        let left = rand_tensor(5, [1, 3, 16, 16]);
        let a = outpaint(&g, &params, &left, None, None).unwrap();
        assert_eq!(a.composite.shape(), [1, 3, 16, 32]);
        assert_eq!(a.composite.slice_width(0, 16), left);
        assert!(a.raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = outpaint(&g, &params, &left, None, None).unwrap();
        assert_eq!(a, b);
        let wrong = rand_tensor(5, [1, 3, 8, 16]);
        assert!(matches!(outpaint(&g, &params, &wrong, None, None), Err(RegoError::Config(_))));
    }

    #[test]
    fn discriminator_emits_patches() {
        let g = Generator::new(&small_cfg()).unwrap();
        let params = g.init_params().unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, NormMode::Running);
        let logits = g.discriminate(&ctx, &tape.constant(rand_tensor(9, [2, 3, 16, 32]))).unwrap();
        assert_eq!(logits.shape(), [2, 1, 2, 4]);
    }
}
