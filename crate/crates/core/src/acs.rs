//! Adaptive content selection: reference distillation through an image-guided
//! dynamic convolution, sketch fusion and boundary seaming.
//!
//! One [`AcsBlock`] sits after each equipped decoder layer. It receives the
//! full-width decoder features `F = [F_L | F_R]`, the reference features `F^G`
//! and the sketch features `F^s` (both at half width) and returns features of
//! the same shape as `F`.
//!
//! The parameter-free stages are exposed twice: as graph functions on
//! [`Var`]s for training, and as eager functions on [`FeatureMap`]s.

use crate::autograd::{ConvGeom, Tape, Var};
use crate::error::{RegoError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, NormMode, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Kernel size of the dynamic filters.
pub const KERNEL_SIZE: usize = 3;

/// A single feature map of `h × w × c` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap(Tensor::zeros([1, c, h, w]))
    }

    /// Builds a map from `f(y, x, channel)`.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        FeatureMap(Tensor::from_fn([1, c, h, w], |_, ch, y, x| f(y, x, ch)))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.n() != 1 {
            return Err(RegoError::Shape(format!("feature map needs batch 1, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(RegoError::InvalidValue("feature map contains NaN or Inf".into()));
        }
        Ok(FeatureMap(t))
    }

    pub fn h(&self) -> usize {
        self.0.h()
    }
    pub fn w(&self) -> usize {
        self.0.w()
    }
    pub fn c(&self) -> usize {
        self.0.c()
    }
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.0.at(0, ch, y, x)
    }
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mirror along the width axis.
    pub fn flip(&self) -> Self {
        FeatureMap(crate::autograd::flip_width(&self.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// A `3 × 3 × c` filter bank produced per input pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernel {
    /// Stored channel-major as `[1, c, 3, 3]`.
    weights: Tensor,
    normalized: bool,
}

impl DynamicKernel {
    pub fn from_fn(c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        DynamicKernel {
            weights: Tensor::from_fn([1, c, KERNEL_SIZE, KERNEL_SIZE], |_, ch, i, j| f(i, j, ch)),
            normalized: false,
        }
    }

    pub fn from_tensor(weights: Tensor, normalized: bool) -> Result<Self> {
        let [n, _, kh, kw] = weights.shape();
        if n != 1 || kh != KERNEL_SIZE || kw != KERNEL_SIZE {
            return Err(RegoError::Shape(format!("kernel must be [1,c,3,3], got {:?}", weights.shape())));
        }
        Ok(DynamicKernel { weights, normalized })
    }

    pub fn channels(&self) -> usize {
        self.weights.c()
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.weights.at(0, ch, i, j)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }
}

// ---- graph functions -------------------------------------------------------

/// Softmax of a `[n, c, 3, 3]` kernel along channels at each of the nine taps.
pub fn kernel_softmax<'t>(kernel: &Var<'t>) -> Result<Var<'t>> {
    kernel.softmax_channels()
}

/// Filters the reference features with the normalized kernel. Output channel
/// `i` convolves every input channel with tap slice `i`, so it reduces to
/// convolving the channel sum of the input.
pub fn distill<'t>(ref_feat: &Var<'t>, kernel: &Var<'t>) -> Result<Var<'t>> {
    let (rs, ks) = (ref_feat.shape(), kernel.shape());
    if rs[1] != ks[1] || rs[0] != ks[0] {
        return Err(RegoError::Shape(format!(
            "reference features {rs:?} do not match kernel {ks:?}"
        )));
    }
    ref_feat.sum_channels().dynamic_conv(kernel)
}

/// `F_R + F̃^G + F_L ⊙ σ(flip(F_L) ⊙ F_R)`.
pub fn compensate_graph<'t>(pred: &Var<'t>, distilled: &Var<'t>, left: &Var<'t>) -> Result<Var<'t>> {
    let gate = left.flip_width().mul(pred)?.sigmoid();
    pred.add(distilled)?.add(&left.mul(&gate)?)
}

// ---- eager functions -------------------------------------------------------

pub fn normalize_kernel(kernel: &DynamicKernel) -> Result<DynamicKernel> {
    if !kernel.weights.is_finite() {
        return Err(RegoError::InvalidValue("kernel contains NaN or Inf".into()));
    }
    Ok(DynamicKernel {
        weights: crate::autograd::softmax_channels(&kernel.weights),
        normalized: true,
    })
}

pub fn distill_reference(ref_feat: &FeatureMap, kernel: &DynamicKernel) -> Result<FeatureMap> {
    if !kernel.normalized {
        return Err(RegoError::Contract("distillation requires a normalized kernel".into()));
    }
    if kernel.channels() != ref_feat.c() {
        return Err(RegoError::Shape(format!(
            "kernel has {} channels, features have {}",
            kernel.channels(),
            ref_feat.c()
        )));
    }
    let tape = Tape::new();
    let out = distill(&tape.constant(ref_feat.0.clone()), &tape.constant(kernel.weights.clone()))?;
    let t = out.value().clone();
    FeatureMap::from_tensor(t)
}

pub fn compensate(pred: &FeatureMap, distilled: &FeatureMap, left: &FeatureMap) -> Result<FeatureMap> {
    let tape = Tape::new();
    let out = compensate_graph(
        &tape.constant(pred.0.clone()),
        &tape.constant(distilled.0.clone()),
        &tape.constant(left.0.clone()),
    )?;
    let t = out.value().clone();
    FeatureMap::from_tensor(t)
}

// ---- the learned module ----------------------------------------------------

#[derive(Clone, Debug)]
struct PsiStage {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Parameters and geometry of one ACS instance.
#[derive(Clone, Debug)]
pub struct AcsBlock {
    prefix: String,
    channels: usize,
    half_h: usize,
    half_w: usize,
    psi: Vec<PsiStage>,
    psi_proj: Conv2d,
    fuse_proj: Conv2d,
    fuse_conv1: Conv2d,
    fuse_conv2: Conv2d,
    grb: Vec<(Conv2d, Conv2d)>,
    res_conv1: Conv2d,
    res_conv2: Conv2d,
}

impl AcsBlock {
    /// An ACS for half-width features of `half_h × half_w × channels`.
    pub fn new(index: usize, channels: usize, half_h: usize, half_w: usize) -> Result<Self> {
        if half_h < KERNEL_SIZE || half_w < KERNEL_SIZE {
            return Err(RegoError::Config(format!(
                "ACS {index}: spatial size {half_h}x{half_w} is below the {KERNEL_SIZE}x{KERNEL_SIZE} kernel"
            )));
        }
        if channels == 0 {
            return Err(RegoError::Config(format!("ACS {index}: zero channels")));
        }
        let prefix = format!("acs.{index}");
        let c = channels;
        // stride-2 stages until both dims are <= 6; at least one stage
        let mut psi = Vec::new();
        let (mut h, mut w) = (half_h, half_w);
        let mut cin = 2 * c;
        loop {
            let stride = if h > 6 || w > 6 { 2 } else { 1 };
            if stride == 1 && !psi.is_empty() {
                break;
            }
            let b = psi.len();
            psi.push(PsiStage {
                conv: Conv2d::new(format!("{prefix}.psi.{b}.conv"), cin, c, ConvGeom::square(3, stride, 1)),
                bn: BatchNorm2d::new(format!("{prefix}.psi.{b}.bn"), c),
            });
            cin = c;
            if stride == 1 {
                break;
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let c3 = ConvGeom::square(3, 1, 1);
        Ok(AcsBlock {
            psi,
            psi_proj: Conv2d::new(format!("{prefix}.psi.proj"), c, c, ConvGeom::square(1, 1, 0)).zero_init(),
            fuse_proj: Conv2d::new(format!("{prefix}.fuse.proj"), 2 * c, c, ConvGeom::square(1, 1, 0)),
            fuse_conv1: Conv2d::new(format!("{prefix}.fuse.conv1"), c, c, c3),
            fuse_conv2: Conv2d::new(format!("{prefix}.fuse.conv2"), c, c, c3),
            grb: (0..2)
                .map(|j| {
                    (
                        Conv2d::new(
                            format!("{prefix}.seam.grb{j}.conv1x3"),
                            c,
                            c,
                            ConvGeom { kh: 1, kw: 3, stride: 1, ph: 0, pw: 1 },
                        ),
                        Conv2d::new(
                            format!("{prefix}.seam.grb{j}.conv7x1"),
                            c,
                            c,
                            ConvGeom { kh: 7, kw: 1, stride: 1, ph: 3, pw: 0 },
                        ),
                    )
                })
                .collect(),
            res_conv1: Conv2d::new(format!("{prefix}.seam.res.conv1"), c, c, c3),
            res_conv2: Conv2d::new(format!("{prefix}.seam.res.conv2"), c, c, c3),
            prefix,
            channels,
            half_h,
            half_w,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn half_size(&self) -> (usize, usize) {
        (self.half_h, self.half_w)
    }

    /// Number of stages in the kernel-generating network.
    pub fn psi_depth(&self) -> usize {
        self.psi.len()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for stage in &self.psi {
            stage.conv.specs(out);
            stage.bn.specs(out);
        }
        self.psi_proj.specs(out);
        for conv in [&self.fuse_proj, &self.fuse_conv1, &self.fuse_conv2] {
            conv.specs(out);
        }
        for (a, b) in &self.grb {
            a.specs(out);
            b.specs(out);
        }
        self.res_conv1.specs(out);
        self.res_conv2.specs(out);
    }

    fn check_half<'t>(&self, v: &Var<'t>, what: &str) -> Result<()> {
        let s = v.shape();
        if s[1] != self.channels || s[2] != self.half_h || s[3] != self.half_w {
            return Err(RegoError::Shape(format!(
                "{}: {what} has shape {s:?}, expected [_, {}, {}, {}]",
                self.prefix, self.channels, self.half_h, self.half_w
            )));
        }
        Ok(())
    }

    /// Unnormalized `[n, c, 3, 3]` kernel from the reference and left features.
    pub fn dynamic_kernel<'t>(&self, ctx: &Ctx<'t, '_>, ref_feat: &Var<'t>, left: &Var<'t>) -> Result<Var<'t>> {
        if ref_feat.shape() != left.shape() {
            return Err(RegoError::Shape(format!(
                "reference {:?} and left {:?} features differ",
                ref_feat.shape(),
                left.shape()
            )));
        }
        self.check_half(ref_feat, "reference features")?;
        let mut x = Var::concat_channels(&[*ref_feat, *left])?;
        let last = self.psi.len() - 1;
        for (i, stage) in self.psi.iter().enumerate() {
            x = stage.bn.forward(ctx, &stage.conv.forward(ctx, &x)?)?;
            if i != last {
                x = x.relu();
            }
        }
        let pooled = x.adaptive_avg_pool(KERNEL_SIZE, KERNEL_SIZE)?;
        self.psi_proj.forward(ctx, &pooled)
    }

    pub fn sketch_fuse<'t>(&self, ctx: &Ctx<'t, '_>, comp: &Var<'t>, sketch_feat: &Var<'t>) -> Result<Var<'t>> {
        self.check_half(comp, "compensated features")?;
        self.check_half(sketch_feat, "sketch features")?;
        let cat = Var::concat_channels(&[*comp, *sketch_feat])?;
        let h = self.fuse_proj.forward(ctx, &cat)?;
        let h = self.fuse_conv1.forward(ctx, &h)?.relu();
        let h = self.fuse_conv2.forward(ctx, &h)?;
        comp.add(&h)
    }

    pub fn seam<'t>(&self, ctx: &Ctx<'t, '_>, left: &Var<'t>, fused: &Var<'t>) -> Result<Var<'t>> {
        self.check_half(left, "left features")?;
        self.check_half(fused, "fused features")?;
        let mut x = left.concat_width(fused)?;
        for (a, b) in &self.grb {
            let h = a.forward(ctx, &x)?.relu();
            let h = b.forward(ctx, &h)?;
            x = x.add(&h)?;
        }
        let h = self.res_conv1.forward(ctx, &x)?.relu();
        let h = self.res_conv2.forward(ctx, &h)?;
        x.add(&h)
    }

    /// Full module: kernel → softmax → distill → compensate → fuse → seam.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        feat: &Var<'t>,
        ref_feat: &Var<'t>,
        sketch_feat: &Var<'t>,
    ) -> Result<Var<'t>> {
        let s = feat.shape();
        if s[3] != 2 * self.half_w {
            return Err(RegoError::Shape(format!(
                "{}: features {s:?} are not twice the half width {}",
                self.prefix, self.half_w
            )));
        }
        let left = feat.slice_width(0, self.half_w)?;
        let pred = feat.slice_width(self.half_w, self.half_w)?;
        let kernel = kernel_softmax(&self.dynamic_kernel(ctx, ref_feat, &left)?)?;
        let distilled = distill(ref_feat, &kernel)?;
        let comp = compensate_graph(&pred, &distilled, &left)?;
        let fused = self.sketch_fuse(ctx, &comp, sketch_feat)?;
        self.seam(ctx, &left, &fused)
    }

    /// Eager kernel computation with stored normalization statistics.
    pub fn compute_dynamic_kernel(
        &self,
        store: &ParamStore,
        ref_feat: &FeatureMap,
        left: &FeatureMap,
    ) -> Result<DynamicKernel> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, NormMode::Running).frozen();
        let k = self.dynamic_kernel(&ctx, &tape.constant(ref_feat.0.clone()), &tape.constant(left.0.clone()))?;
        let t = k.value().clone();
        DynamicKernel::from_tensor(t, false)
    }

    /// Eager full forward pass with stored normalization statistics.
    pub fn apply(
        &self,
        store: &ParamStore,
        feat: &FeatureMap,
        ref_feat: &FeatureMap,
        sketch_feat: &FeatureMap,
    ) -> Result<FeatureMap> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, NormMode::Running).frozen();
        let out = self.forward(
            &ctx,
            &tape.constant(feat.0.clone()),
            &tape.constant(ref_feat.0.clone()),
            &tape.constant(sketch_feat.0.clone()),
        )?;
        let t = out.value().clone();
        FeatureMap::from_tensor(t)
    }
}
