//! Inception Score and Fréchet distance over generated sets.
//!
//! Both metrics take a pluggable [`MetricBackend`]. The default backend is a
//! small seeded convolutional classifier, so absolute values are only
//! meaningful relative to each other under the same backend.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Tape};
use crate::checkpoint::ModelCheckpoint;
use crate::dataprep::{Dataset, EmbeddingPlugin, RandomProjection};
use crate::error::{RegoError, Result};
use crate::generator::outpaint;
use crate::nn::{Conv2d, Ctx, NormMode, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Tolerance on probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-6;
/// Negative eigenvalues below this magnitude are clamped silently.
pub const CLAMP_WARN: f64 = 1e-6;

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean: Vec<f64>,
    /// Row-major `m × m`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl DistributionStats {
    /// Two-pass mean and unbiased covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(RegoError::InvalidValue(format!("need at least 2 samples for statistics, got {n}")));
        }
        let m = features[0].len();
        if m == 0 || features.iter().any(|f| f.len() != m) {
            return Err(RegoError::Shape("feature vectors must share a positive dimension".into()));
        }
        let mut mean = vec![0.0; m];
        for f in features {
            for (a, v) in mean.iter_mut().zip(f) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut cov = vec![0.0; m * m];
        for f in features {
            for i in 0..m {
                let di = f[i] - mean[i];
                for j in i..m {
                    cov[i * m + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cov[i * m + j] / (n - 1) as f64;
                cov[i * m + j] = v;
                cov[j * m + i] = v;
            }
        }
        Ok(DistributionStats { mean, cov, n })
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let m = mean.len();
        if cov.len() != m * m {
            return Err(RegoError::Shape(format!("covariance has {} entries for dimension {m}", cov.len())));
        }
        if n < 2 {
            return Err(RegoError::InvalidValue("sample count must be >= 2".into()));
        }
        for i in 0..m {
            for j in 0..i {
                if (cov[i * m + j] - cov[j * m + i]).abs() > 1e-9 {
                    return Err(RegoError::InvalidValue(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(DistributionStats { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_row_slice(m, m, &self.cov)
    }
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` with `p(y)` the mean prediction.
pub fn inception_score(predictions: &[Vec<f64>]) -> Result<f64> {
    let first = predictions
        .first()
        .ok_or_else(|| RegoError::InvalidValue("no predictions".into()))?;
    let c = first.len();
    for (i, p) in predictions.iter().enumerate() {
        if p.len() != c {
            return Err(RegoError::Shape(format!("prediction {i} has {} classes, expected {c}", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
            return Err(RegoError::InvalidValue(format!("prediction {i} is not a probability vector (sum {sum})")));
        }
    }
    // mean taken as an offset from the first row so identical rows give an exact marginal
    let n = predictions.len() as f64;
    let marginal: Vec<f64> = (0..c)
        .map(|k| first[k] + predictions.iter().map(|p| p[k] - first[k]).sum::<f64>() / n)
        .collect();
    let mut kl_sum = 0.0;
    for p in predictions {
        for (pk, qk) in p.iter().zip(&marginal) {
            if *pk > 0.0 {
                kl_sum += pk * (pk / qk).ln();
            }
        }
    }
    Ok((kl_sum / n).max(0.0).exp())
}

fn sqrt_psd(m: DMatrix<f64>, worst: &mut f64) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *worst = worst.min(*v);
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance plus the most negative eigenvalue met while taking roots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidResult {
    pub value: f64,
    pub min_eigenvalue: f64,
}

pub fn fid_detailed(real: &DistributionStats, fake: &DistributionStats) -> Result<FidResult> {
    let m = real.dim();
    if fake.dim() != m {
        return Err(RegoError::Shape(format!("FID dimensions differ: {m} vs {}", fake.dim())));
    }
    let mean_term: f64 = real.mean.iter().zip(&fake.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let sr = real.matrix();
    let sf = fake.matrix();
    let mut worst = 0.0f64;
    // tr((Σ_r Σ_f)^½) = tr((Σ_r^½ Σ_f Σ_r^½)^½)
    let root_r = sqrt_psd(sr.clone(), &mut worst);
    let inner = &root_r * &sf * &root_r;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut tr_root = 0.0;
    for &v in eig.eigenvalues.iter() {
        worst = worst.min(v);
        tr_root += v.max(0.0).sqrt();
    }
    if worst < -CLAMP_WARN {
        log::warn!("FID: clamped negative eigenvalue {worst:.3e}; covariance is not PSD within tolerance");
    }
    let value = (mean_term + sr.trace() + sf.trace() - 2.0 * tr_root).max(0.0);
    Ok(FidResult { value, min_eigenvalue: worst })
}

pub fn fid(real: &DistributionStats, fake: &DistributionStats) -> Result<f64> {
    fid_detailed(real, fake).map(|r| r.value)
}

/// Feature extractor and classifier used by the metrics.
pub trait MetricBackend: Send + Sync {
    fn id(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Feature vector and class probabilities of one `[1, 3, H, W]` image.
    fn analyze(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// A fixed random conv net: three stride-2 stages, global pooling to 64
/// features, then a linear head over 10 classes.
pub struct SeededConvClassifier {
    seed: u64,
    convs: Vec<Conv2d>,
    head: Conv2d,
    store: ParamStore,
}

impl SeededConvClassifier {
    pub const PREFIX: &'static str = "convnet10-f64-s";
    const CHANNELS: [usize; 3] = [16, 32, 64];
    const CLASSES: usize = 10;
    /// Logit sharpening so that random predictions are not all near uniform.
    const LOGIT_SCALE: f64 = 8.0;

    pub fn new(seed: u64) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(format!("cls.{i}"), cin, c, ConvGeom::square(3, 2, 1)));
            cin = c;
        }
        let head = Conv2d::new("cls.head", cin, Self::CLASSES, ConvGeom::square(1, 1, 0));
        let mut specs: Vec<ParamSpec> = Vec::new();
        for c in convs.iter().chain(std::iter::once(&head)) {
            c.specs(&mut specs);
        }
        let store = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(seed))
            .expect("static classifier specs are valid");
        SeededConvClassifier { seed, convs, head, store }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        id.strip_prefix(Self::PREFIX)
            .and_then(|s| s.parse().ok())
            .map(Self::new)
            .ok_or_else(|| RegoError::Config(format!("unknown metric backend `{id}` (expected {}<seed>)", Self::PREFIX)))
    }
}

impl Default for SeededConvClassifier {
    fn default() -> Self {
        Self::new(0)
    }
}

impl MetricBackend for SeededConvClassifier {
    fn id(&self) -> String {
        format!("{}{}", Self::PREFIX, self.seed)
    }

    fn feature_dim(&self) -> usize {
        Self::CHANNELS[Self::CHANNELS.len() - 1]
    }

    fn num_classes(&self) -> usize {
        Self::CLASSES
    }

    fn analyze(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if image.n() != 1 || image.c() != 3 {
            return Err(RegoError::Shape(format!("metric backend expects [1,3,H,W], got {:?}", image.shape())));
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, NormMode::Running).frozen();
        let mut x = tape.constant(image.map(|v| 2.0 * v - 1.0));
        for conv in &self.convs {
            x = conv.forward(&ctx, &x)?.relu();
        }
        let pooled = x.adaptive_avg_pool(1, 1)?;
        let logits = self.head.forward(&ctx, &pooled)?.scale(Self::LOGIT_SCALE);
        let probs = logits.softmax_channels()?;
        let features = pooled.value().data().to_vec();
        let probs = probs.value().data().to_vec();
        Ok((features, probs))
    }
}

/// Backend by id; the empty string selects the default.
pub fn backend_from_id(id: &str) -> Result<Box<dyn MetricBackend>> {
    if id.is_empty() || id == "default" {
        return Ok(Box::new(SeededConvClassifier::default()));
    }
    Ok(Box::new(SeededConvClassifier::from_id(id)?))
}

fn analyze_all(images: &[Tensor], backend: &dyn MetricBackend) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let results: Vec<(Vec<f64>, Vec<f64>)> = images
        .par_iter()
        .map(|img| backend.analyze(img))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// FID between two image sets under `backend`.
pub fn fid_of_images(real: &[Tensor], fake: &[Tensor], backend: &dyn MetricBackend) -> Result<f64> {
    let (fr, _) = analyze_all(real, backend)?;
    let (ff, _) = analyze_all(fake, backend)?;
    fid(&DistributionStats::from_features(&fr)?, &DistributionStats::from_features(&ff)?)
}

/// IS of an image set under `backend`.
pub fn inception_score_of_images(images: &[Tensor], backend: &dyn MetricBackend) -> Result<f64> {
    let (_, probs) = analyze_all(images, backend)?;
    inception_score(&probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub is: f64,
    pub fid: f64,
    pub n_samples: usize,
    pub backend_id: String,
}

/// Rebuilds every test image from its own sketch and a top-1 reference, then
/// scores the composites against the ground truth. References come from
/// `references` (normally the training split) by embedding the left half;
/// without it, each test image's stored nearest neighbor is used.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    test_set: &Dataset,
    references: Option<&Dataset>,
    backend: &dyn MetricBackend,
) -> Result<EvalReport> {
    if test_set.len() < 2 {
        return Err(RegoError::Config(format!(
            "evaluation needs at least 2 images, the test set has {}",
            test_set.len()
        )));
    }
    let generator = checkpoint.generator()?;
    let embedder = match references {
        Some(r) => Some(RandomProjection::from_id(r.index().embedder_id())?),
        None => None,
    };
    let composites: Vec<Tensor> = (0..test_set.len())
        .into_par_iter()
        .map(|i| {
            let sample = &test_set.samples()[i];
            let left = sample.left_half()?;
            let reference = match (references, &embedder) {
                (Some(refs), Some(emb)) => {
                    let (id, _) = refs.index().query_embedding(&emb.embed(&left)?, 1)?.remove(0);
                    refs.get(&id)
                        .ok_or_else(|| RegoError::NotFound(format!("reference image `{id}`")))?
                        .right_half()?
                }
                _ => {
                    let neighbor = test_set.index().neighbors(&sample.id)?[0];
                    test_set
                        .get(neighbor)
                        .ok_or_else(|| RegoError::NotFound(format!("reference image `{neighbor}`")))?
                        .right_half()?
                }
            };
            let sketch = test_set.sketch(i).right_half()?;
            let out = outpaint(&generator, &checkpoint.params, &left, Some(&sketch), Some(&reference))?;
            Ok(out.composite)
        })
        .collect::<Result<_>>()?;
    let real: Vec<Tensor> = test_set.samples().iter().map(|s| s.pixels().clone()).collect();
    let (real_feats, _) = analyze_all(&real, backend)?;
    let (fake_feats, fake_probs) = analyze_all(&composites, backend)?;
    Ok(EvalReport {
        is: inception_score(&fake_probs)?,
        fid: fid(
            &DistributionStats::from_features(&real_feats)?,
            &DistributionStats::from_features(&fake_feats)?,
        )?,
        n_samples: test_set.len(),
        backend_id: backend.id(),
    })
}
