use cubing_core::nn::{architecture, loss_and_grad, DropoutMasks, Loss, NetParams};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest relative discrepancy between backprop and central differences,
/// with the denominator floored at 1e-3 so near-zero entries compare absolutely.
fn max_rel_error(loss: Loss, weight_decay: f64, seed: u64, masked: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = architecture(5, loss.heads());
    let mut params = NetParams::<f64>::he_init(arch, &mut rng);
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()).chain(params.b3.iter_mut()) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *b = 0.1 * z;
    }
    let x = Array2::from_shape_simple_fn((12, 5), || StandardNormal.sample(&mut rng));
    let y = Array1::from_shape_simple_fn(12, || StandardNormal.sample(&mut rng));
    let masks = masked.then(|| DropoutMasks::sample(0.3, 12, &arch, &mut rng));

    let (_, grad) = loss_and_grad(&params, x.view(), y.view(), masks.as_ref(), loss, weight_decay).unwrap();
    let analytic = grad.to_flat();
    let theta = params.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        probe.set_flat(&t).unwrap();
        let up = loss_and_grad(&probe, x.view(), y.view(), masks.as_ref(), loss, weight_decay).unwrap().0;
        t[i] = theta[i] - h;
        probe.set_flat(&t).unwrap();
        let down = loss_and_grad(&probe, x.view(), y.view(), masks.as_ref(), loss, weight_decay).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    for loss in [Loss::Mse, Loss::GaussianNll] {
        for decay in [0.0, 1e-2] {
            for seed in [1, 2, 3] {
                let e = max_rel_error(loss, decay, seed, false);
                assert!(e < 1e-5, "{loss:?} decay {decay} seed {seed}: {e}");
            }
        }
    }
}

#[test]
fn gradients_through_dropout_masks() {
    for loss in [Loss::Mse, Loss::GaussianNll] {
        let e = max_rel_error(loss, 1e-3, 7, true);
        assert!(e < 1e-5, "{loss:?}: {e}");
    }
}
