//! Oracles and fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rego::acs::{AcsBlock, DynamicKernel, FeatureMap};
use rego::autograd::{Tape, Var};
use rego::dataprep::{prepare_dataset, toy, Dataset, PrepareConfig};
use rego::generator::{Generator, GeneratorConfig};
use rego::nn::{Ctx, NormMode, ParamKind, ParamStore};
use rego::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Perturbs every trainable tensor and spreads the running statistics so no
/// parameter sits at a degenerate value (zero projections, unit variances).
pub fn jitter_store(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for (name, p) in store.iter_mut() {
        let var_buffer = name.ends_with("running_var");
        for v in p.value.data_mut() {
            match p.kind {
                ParamKind::Trainable => *v += rng.gen_range(-amount..amount),
                ParamKind::Buffer if var_buffer => *v = rng.gen_range(0.5..1.5),
                ParamKind::Buffer => *v = rng.gen_range(-0.3..0.3),
            }
        }
    }
}

/// Fixed pseudo-random weights so that every output coordinate reaches the loss.
fn readout_weights(shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |b, c, y, x| ((b * 7 + c * 5 + y * 3 + x) % 11) as f64 / 11.0 - 0.4)
}

fn readout<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    let shape = out.shape();
    let n = shape.iter().product::<usize>() as f64;
    out.mul(&tape.constant(readout_weights(shape))).expect("same shape").mean().scale(n)
}

/// Largest analytic-vs-numeric discrepancy found by [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub coordinates: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, a: f64, n: f64) {
        self.coordinates += 1;
        let r = rel_err(a, n);
        if r > self.max_rel {
            self.max_rel = r;
            self.worst = format!("{} (analytic {a:.6e}, numeric {n:.6e})", what());
        }
    }
}

/// Central differences over every input coordinate and every trainable
/// parameter touched by `f`, with stored normalization statistics.
pub fn check_gradients<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> GradReport
where
    F: for<'t, 's> Fn(&Ctx<'t, 's>, &[Var<'t>]) -> rego::Result<Var<'t>>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, NormMode::Running).frozen();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&ctx, &vars).expect("forward pass");
        let v = readout(&tape, out).value().data()[0];
        v
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, NormMode::Running);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&ctx, &vars).expect("forward pass");
    let grads = tape.backward(readout(&tape, out)).expect("backward pass");
    let param_grads = ctx.param_grads(&grads);

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        for j in 0..input.len() {
            work[i].data_mut()[j] = input.data()[j] + FD_STEP;
            let plus = eval(store, &work);
            work[i].data_mut()[j] = input.data()[j] - FD_STEP;
            let minus = eval(store, &work);
            work[i].data_mut()[j] = input.data()[j];
            report.record(|| format!("input {i}[{j}]"), analytic.data()[j], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    let mut probe = store.clone();
    for (name, analytic) in &param_grads {
        let original = store.tensor(name).expect("touched parameter").clone();
        for j in 0..original.len() {
            probe.get_mut(name).unwrap().value.data_mut()[j] = original.data()[j] + FD_STEP;
            let plus = eval(&probe, inputs);
            probe.get_mut(name).unwrap().value.data_mut()[j] = original.data()[j] - FD_STEP;
            let minus = eval(&probe, inputs);
            probe.get_mut(name).unwrap().value.data_mut()[j] = original.data()[j];
            report.record(|| format!("{name}[{j}]"), analytic.data()[j], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Distillation by six nested loops: output channel `i` convolves every input
/// channel with the `i`-th spatial slice of the kernel, zero padding 1.
pub fn naive_distill(feat: &FeatureMap, kernel: &DynamicKernel) -> Vec<f64> {
    let (h, w, c) = (feat.h(), feat.w(), feat.c());
    let mut out = vec![0.0; c * h * w];
    for i in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += feat.get(sy as usize, sx as usize, ch) * kernel.get(ky, kx, i);
                        }
                    }
                }
                out[(i * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// A random symmetric positive semi-definite matrix of rank `rank`.
pub fn random_psd(rng: &mut ChaCha8Rng, m: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, rank, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose()
}

/// Principal square root by the Denman–Beavers iteration, applied to the raw
/// (non-symmetric) product. Independent of the eigen route used in the library.
pub fn denman_beavers_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + &zi) * 0.5;
        let nz = (&z + &yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        z = nz;
        if delta < 1e-15 * y.norm() {
            break;
        }
    }
    y
}

/// FID computed straight from its definition with the iterative root.
pub fn fid_oracle(mu_r: &[f64], cov_r: &DMatrix<f64>, mu_f: &[f64], cov_f: &DMatrix<f64>) -> f64 {
    let mean: f64 = mu_r.iter().zip(mu_f).map(|(a, b)| (a - b).powi(2)).sum();
    let root = denman_beavers_sqrt(&(cov_r * cov_f));
    mean + cov_r.trace() + cov_f.trace() - 2.0 * root.trace()
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Writes `count` toy scenes and prepares them into `dir/prepared`.
pub fn toy_dataset(dir: &Path, count: usize, height: usize, width: usize, k: usize) -> Dataset {
    toy_dataset_seeded(dir, count, 1, height, width, k)
}

/// Like [`toy_dataset`] with an explicit scene seed, so disjoint sets can be drawn.
pub fn toy_dataset_seeded(dir: &Path, count: usize, seed: u64, height: usize, width: usize, k: usize) -> Dataset {
    let images = dir.join("images_src");
    toy::write_scenery_set(&images, count, seed, height, width).expect("toy images");
    let cfg = PrepareConfig {
        k,
        height,
        width,
        ..PrepareConfig::default()
    };
    prepare_dataset(&images, &dir.join("prepared"), &cfg).expect("prepared dataset")
}

/// One ACS block with jittered parameters, ready for gradient checks.
pub fn block_and_store(c: usize, h: usize, w: usize, seed: u64) -> (AcsBlock, ParamStore) {
    let block = AcsBlock::new(0, c, h, w).unwrap();
    let mut specs = Vec::new();
    block.specs(&mut specs);
    let mut store = ParamStore::from_specs(&specs, &mut rng(seed)).unwrap();
    jitter_store(&mut store, &mut rng(seed + 1), 0.3);
    (block, store)
}

/// An 8x16 generator with two decoder layers and jittered parameters.
pub fn tiny_generator(seed: u64) -> (Generator, ParamStore) {
    let cfg = GeneratorConfig::new(8, 16, 4, 2);
    let generator = Generator::new(&cfg).unwrap();
    let mut store = generator.init_params().unwrap();
    jitter_store(&mut store, &mut rng(seed), 0.2);
    (generator, store)
}

/// Input shapes for a decode check: the bottleneck and the pyramid level read by the single ACS.
pub fn decode_shapes(generator: &Generator, store: &ParamStore) -> ([usize; 4], [usize; 4]) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, NormMode::Running).frozen();
    let f = generator
        .encode(&ctx, &tape.constant(Tensor::zeros([1, 3, 8, 8])), &tape.constant(Tensor::zeros([1, 1, 8, 8])))
        .unwrap();
    let p = generator.encode_reference(&ctx, &tape.constant(Tensor::zeros([1, 3, 8, 8]))).unwrap();
    let level = p[0].expect("first decoder layer carries an ACS").shape();
    (f.shape(), level)
}
