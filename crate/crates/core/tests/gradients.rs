//! Finite-difference checks of every differentiable op and of a full
//! reduced-depth network.

use std::cell::RefCell;

use foilnet_core::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use foilnet_core::tensor::{
    add, batch_norm, concat_channels, conv2d, dropout, l1_loss, leaky_relu, mul, relu, scale, slice_channels, sum,
    upsample2x, BatchNormStats, Mode, Padding, Tensor, TensorError, UpsampleMode,
};
use foilnet_core::unet::{UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, param: bool) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if param {
        Tensor::parameter(shape, v).unwrap()
    } else {
        Tensor::from_vec(shape, v).unwrap()
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct upstream gradient.
fn project(out: Tensor<f64>, seed: u64) -> Result<Tensor<f64>, TensorError> {
    let r = random(out.shape(), seed, false);
    Ok(sum(&mul(&out, &r)?))
}

fn assert_all_pass(name: &str, report: GradCheckReport) {
    let worst = report.worst().copied();
    assert!(report.probes.len() > 0, "{name}: no probes");
    assert_eq!(report.pass_fraction(), 1.0, "{name}: worst probe {worst:?}");
}

#[test]
fn conv2d_gradients() {
    for (i, (shape, k, stride, pad)) in [
        ([2, 3, 6, 6], 3, 1, Padding::uniform(1)),
        ([1, 2, 8, 8], 4, 2, Padding::uniform(1)),
        ([2, 4, 4, 4], 2, 2, Padding::NONE),
        ([1, 3, 5, 5], 4, 1, Padding::new(2, 1, 2, 1)),
        ([2, 3, 4, 4], 1, 1, Padding::NONE),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = 10 * i as u64;
        let x = random(&shape, seed, true);
        let w = random(&[3, shape[1], k, k], seed + 1, true);
        let b = random(&[3], seed + 2, true);
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let report = check_gradients(
            &[x, w, b],
            || project(conv2d(&xc, &wc, Some(&bc), stride, pad)?, seed + 3),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_all_pass("conv2d", report);
    }
}

#[test]
fn upsample_gradients() {
    for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
        let x = random(&[2, 2, 3, 4], 1, true);
        let xc = x.clone();
        let report = check_gradients(&[x], || project(upsample2x(&xc, mode)?, 2), GradCheckConfig::default()).unwrap();
        assert_all_pass("upsample2x", report);
    }
}

#[test]
fn batch_norm_gradients() {
    for mode in [Mode::Train, Mode::Eval] {
        let x = random(&[3, 2, 3, 3], 5, true);
        let gamma = random(&[2], 6, true);
        let beta = random(&[2], 7, true);
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        let stats = RefCell::new(BatchNormStats { mean: vec![0.1, -0.2], var: vec![0.8, 1.3] });
        let report = check_gradients(
            &[x, gamma, beta],
            || {
                // Running statistics must not drift between evaluations.
                let mut s = stats.borrow().clone();
                project(batch_norm(&xc, &gc, &bc, &mut s, mode, 0.1, 1e-5)?, 8)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_all_pass("batch_norm", report);
    }
}

#[test]
fn pointwise_gradients() {
    let x = random(&[2, 3, 4, 4], 11, true);
    let y = random(&[2, 3, 4, 4], 12, true);
    let (xc, yc) = (x.clone(), y.clone());
    let cfg = GradCheckConfig::default();
    assert_all_pass("leaky_relu", check_gradients(&[x.clone()], || project(leaky_relu(&xc, 0.2), 1), cfg).unwrap());
    assert_all_pass("relu", check_gradients(&[x.clone()], || project(relu(&xc), 2), cfg).unwrap());
    assert_all_pass("scale", check_gradients(&[x.clone()], || project(scale(&xc, -1.7), 3), cfg).unwrap());
    assert_all_pass("add", check_gradients(&[x.clone(), y.clone()], || project(add(&xc, &yc)?, 4), cfg).unwrap());
    assert_all_pass("mul", check_gradients(&[x.clone(), y.clone()], || project(mul(&xc, &yc)?, 5), cfg).unwrap());
    assert_all_pass(
        "dropout",
        check_gradients(
            &[x.clone()],
            || project(dropout(&xc, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)), 6),
            cfg,
        )
        .unwrap(),
    );
    assert_all_pass("l1_loss", check_gradients(&[x, y], || l1_loss(&xc, &yc), cfg).unwrap());
}

#[test]
fn channel_plumbing_gradients() {
    let a = random(&[2, 2, 3, 3], 21, true);
    let b = random(&[2, 3, 3, 3], 22, true);
    let (ac, bc) = (a.clone(), b.clone());
    let cfg = GradCheckConfig::default();
    assert_all_pass("concat", check_gradients(&[a, b.clone()], || project(concat_channels(&ac, &bc)?, 23), cfg).unwrap());
    assert_all_pass("slice", check_gradients(&[b], || project(slice_channels(&bc, 1, 2)?, 24), cfg).unwrap());
}

#[test]
fn full_network_gradients_on_reduced_probe() {
    let cfg = UNetConfig { resolution: 32, ..UNetConfig::new(3) };
    let net = RefCell::new(UNet::<f64>::build(cfg, 3).unwrap());
    let input = random(&[1, 3, 32, 32], 30, false);
    let target = random(&[1, 3, 32, 32], 31, false);
    let params = net.borrow().parameters();
    let report = check_gradients(
        &params,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let out = net.borrow_mut().forward(&input, Mode::Train, &mut rng)?;
            l1_loss(&out, &target)
        },
        GradCheckConfig { samples: Some(400), seed: 33, ..Default::default() },
    )
    .unwrap();
    let worst = report.worst().copied();
    assert!(report.probes.len() >= 390, "only {} usable probes", report.probes.len());
    assert!(report.pass_fraction() >= 0.99, "pass fraction {} (worst {worst:?})", report.pass_fraction());
}
