//! Analytic gradients against central finite differences (step 1e-5, 64-bit,
//! stored normalization statistics) for every learned stage.

mod common;

use common::{block_and_store, check_gradients, decode_shapes, rand_tensor, rng, tiny_generator, GradReport};
use rego::acs::{compensate_graph, distill, kernel_softmax};
use rego::autograd::{Tape, Var};
use rego::generator::Pyramid;
use rego::nn::ParamStore;
use rego::styleloss::{style_rank_loss, RandomConvPyramid, StyleConfig};
use rego::tensor::Tensor;

const TOL: f64 = 1e-4;
const DECODE_TOL: f64 = 1e-3;

fn assert_within(what: &str, report: &GradReport, tol: f64) {
    assert!(report.coordinates > 0, "{what}: nothing was checked");
    assert!(
        report.max_rel < tol,
        "{what}: max relative error {:.3e} at {} over {} coordinates",
        report.max_rel,
        report.worst,
        report.coordinates
    );
}

#[test]
fn dynamic_kernel_two_stage() {
    // 14 → 7 → 4 gives two strided stages with a rectifier between them
    let (block, store) = block_and_store(3, 14, 14, 1);
    assert_eq!(block.psi_depth(), 2);
    let mut r = rng(2);
    let inputs = vec![rand_tensor(&mut r, [1, 3, 14, 14], -1.0, 1.0), rand_tensor(&mut r, [1, 3, 14, 14], -1.0, 1.0)];
    let report = check_gradients(&store, &inputs, |ctx, v| block.dynamic_kernel(ctx, &v[0], &v[1]));
    assert_within("compute_dynamic_kernel", &report, TOL);
}

#[test]
fn normalized_distillation_chain() {
    let (block, store) = block_and_store(3, 5, 6, 3);
    let mut r = rng(4);
    let inputs = vec![rand_tensor(&mut r, [1, 3, 5, 6], -1.0, 1.0), rand_tensor(&mut r, [1, 3, 5, 6], -1.0, 1.0)];
    let report = check_gradients(&store, &inputs, |ctx, v| {
        let k = kernel_softmax(&block.dynamic_kernel(ctx, &v[0], &v[1])?)?;
        distill(&v[0], &k)
    });
    assert_within("kernel softmax and distillation", &report, TOL);
}

#[test]
fn compensation() {
    let mut r = rng(5);
    let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, [1, 3, 4, 4], -1.5, 1.5)).collect();
    let report = check_gradients(&ParamStore::new(), &inputs, |_, v| compensate_graph(&v[0], &v[1], &v[2]));
    assert_within("compensate", &report, TOL);
}

#[test]
fn sketch_fusion() {
    let (block, store) = block_and_store(3, 4, 4, 6);
    let mut r = rng(7);
    let inputs = vec![rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0), rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0)];
    let report = check_gradients(&store, &inputs, |ctx, v| block.sketch_fuse(ctx, &v[0], &v[1]));
    assert_within("sketch_fuse", &report, TOL);
}

#[test]
fn seaming() {
    let (block, store) = block_and_store(3, 4, 4, 8);
    let mut r = rng(9);
    let inputs = vec![rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0), rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0)];
    let report = check_gradients(&store, &inputs, |ctx, v| block.seam(ctx, &v[0], &v[1]));
    assert_within("seam", &report, TOL);
}

#[test]
fn whole_acs_block_on_4x8x3() {
    let (block, store) = block_and_store(3, 4, 4, 10);
    let mut r = rng(11);
    let inputs = vec![
        rand_tensor(&mut r, [1, 3, 4, 8], -1.0, 1.0),
        rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0),
        rand_tensor(&mut r, [1, 3, 4, 4], -1.0, 1.0),
    ];
    let report = check_gradients(&store, &inputs, |ctx, v| block.forward(ctx, &v[0], &v[1], &v[2]));
    assert_within("acs_forward", &report, TOL);
}

fn hinge_arguments(imgs: &[Tensor], extractor: &RandomConvPyramid, cfg: &StyleConfig) -> Vec<f64> {
    use rego::styleloss::{layer_grams, style_similarity};
    let grams: Vec<_> = imgs.iter().map(|t| layer_grams(t, extractor).unwrap()).collect();
    cfg.layers
        .iter()
        .map(|&d| {
            cfg.alpha - style_similarity(&grams[0][d], &grams[1][d]).unwrap()
                + style_similarity(&grams[0][d], &grams[2][d]).unwrap()
        })
        .collect()
}

#[test]
fn style_ranking_away_from_the_kink() {
    let extractor = RandomConvPyramid::new(7);
    let mut r = rng(12);
    let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, [1, 3, 16, 16], 0.0, 1.0)).collect();
    for alpha in [0.0, 0.1, 2.5] {
        let cfg = StyleConfig { alpha, ..StyleConfig::default() };
        let args = hinge_arguments(&inputs, &extractor, &cfg);
        assert!(args.iter().all(|a| a.abs() > 1e-3), "alpha {alpha}: a hinge sits at its kink: {args:?}");
        let report = check_gradients(&ParamStore::new(), &inputs, |_, v| {
            Ok(style_rank_loss(&v[0], &v[1], &v[2], &extractor, &cfg)?.loss)
        });
        assert_within(&format!("style_rank_total (alpha {alpha})"), &report, TOL);
    }
}

fn pyramid_sum<'t>(tape: &'t Tape, levels: Pyramid<'t>) -> rego::Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for v in levels.into_iter().flatten() {
        let n = v.shape().iter().product::<usize>() as f64;
        let w = Tensor::from_fn(v.shape(), |_, c, y, x| ((c * 3 + y * 5 + x) % 7) as f64 / 7.0 - 0.3);
        total = total.add(&v.mul(&tape.constant(w))?.mean().scale(n))?;
    }
    Ok(total)
}

#[test]
fn generator_encoders() {
    let (generator, store) = tiny_generator(13);
    let mut r = rng(14);
    let left = rand_tensor(&mut r, [1, 3, 8, 8], 0.0, 1.0);
    let sketch = rand_tensor(&mut r, [1, 1, 8, 8], 0.0, 1.0);
    let reference = rand_tensor(&mut r, [1, 3, 8, 8], 0.0, 1.0);

    let report = check_gradients(&store, &[left, sketch.clone()], |ctx, v| generator.encode(ctx, &v[0], &v[1]));
    assert_within("encode", &report, TOL);

    let report = check_gradients(&store, &[reference], |ctx, v| {
        pyramid_sum(ctx.tape(), generator.encode_reference(ctx, &v[0])?)
    });
    assert_within("encode_reference", &report, TOL);

    let report = check_gradients(&store, &[sketch], |ctx, v| {
        pyramid_sum(ctx.tape(), generator.encode_sketch(ctx, &v[0])?)
    });
    assert_within("encode_sketch", &report, TOL);
}

#[test]
fn decoder_at_8x16() {
    let (generator, store) = tiny_generator(15);
    let mut r = rng(16);
    let (feat, level) = decode_shapes(&generator, &store);
    let inputs = vec![
        rand_tensor(&mut r, feat, -1.0, 1.0),
        rand_tensor(&mut r, level, 0.0, 1.0),
        rand_tensor(&mut r, level, 0.0, 1.0),
    ];
    let report = check_gradients(&store, &inputs, |ctx, v| {
        generator.decode(ctx, &v[0], &vec![Some(v[1]), None], &vec![Some(v[2]), None])
    });
    assert_within("decode", &report, DECODE_TOL);
}
