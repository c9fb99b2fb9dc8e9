//! Finite-difference checks of the full LoftUp backward pass under both
//! training losses.

use loftup_core::loftup::{LoftUp, LoftUpConfig, LowresPe};
use loftup_core::losses::{stage1_loss, stage1_loss_grad, stage2_loss, stage2_loss_grad};
use loftup_core::params::ParamSet;
use loftup_core::{CropBox, FeatureMap, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny(pe: LowresPe) -> LoftUp {
    LoftUp::new(LoftUpConfig {
        channels: 8,
        num_blocks: 1,
        heads: Some(1),
        pe_freqs: 2,
        lowres_pe: pe,
        lowres_grid: (pe == LowresPe::Learnable).then_some([2, 2]),
        ..LoftUpConfig::default()
    })
    .unwrap()
}

/// Initial parameters with every tensor jittered, so zero-initialized
/// projections do not hide gradients upstream of them.
fn jittered(model: &LoftUp, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = model.init_params(7);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.2 * (rng.random::<f64>() - 0.5);
        }
    }
    p
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random::<f64>() * 2.0 - 1.0).unwrap()
}

/// Largest relative error between the analytic gradient and central differences
/// over every element of every parameter.
fn max_rel_err(model: &LoftUp, params: &ParamSet, loss: impl Fn(&FeatureMap) -> f64, dloss: impl Fn(&FeatureMap) -> FeatureMap, img: &ImageTensor, lowres: &FeatureMap) -> (f64, String) {
    let (out, tape) = model.forward_train(params, img, lowres, 8, 8).unwrap();
    let grads = model.backward(params, &tape, &dloss(&out)).unwrap();
    let f = |p: &ParamSet| loss(&model.forward(p, img, lowres, 8, 8).unwrap());
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = p.get(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
            let up = f(&p);
            p.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
            let down = f(&p);
            p.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(&name).unwrap().data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

fn inputs(rng: &mut ChaCha8Rng) -> (ImageTensor, FeatureMap) {
    let img = ImageTensor::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    let lowres = random_map(8, 2, 2, rng);
    (img, lowres)
}

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    for pe in [LowresPe::Sine, LowresPe::Learnable, LowresPe::None] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = tiny(pe);
        let params = jittered(&model, &mut rng);
        let (img, lowres) = inputs(&mut rng);
        let target = random_map(8, 8, 8, &mut rng);
        let (err, at) = max_rel_err(
            &model,
            &params,
            |o| stage1_loss(o, &target).unwrap(),
            |o| stage1_loss_grad(o, &target).unwrap().1,
            &img,
            &lowres,
        );
        assert!(err < TOL, "{pe:?}: rel err {err:e} at {at}");
    }
}

#[test]
fn stage2_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = tiny(LowresPe::Sine);
    let params = jittered(&model, &mut rng);
    let (img, lowres) = inputs(&mut rng);
    for b in [CropBox::new(2, 1, 4, 4), CropBox::new(0, 0, 8, 8), CropBox::new(5, 3, 3, 2)] {
        let target = random_map(8, b.h, b.w, &mut rng);
        let (err, at) = max_rel_err(
            &model,
            &params,
            |o| stage2_loss(o, &target, &b).unwrap(),
            |o| stage2_loss_grad(o, &target, &b).unwrap().1,
            &img,
            &lowres,
        );
        assert!(err < TOL, "{b:?}: rel err {err:e} at {at}");
    }
}
