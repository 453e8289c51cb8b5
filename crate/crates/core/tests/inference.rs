use std::time::Instant;

use foilnet_core::evaluation::bench_inference;
use foilnet_core::{Tensor, UNet, UNetConfig};

// One test so no other test thread competes for the core while timing.
#[test]
fn inference_latency() {
    let net = UNet::<f32>::build(UNetConfig::new(3), 0).unwrap();
    let x = Tensor::zeros(&[1, 3, 128, 128]);
    net.infer(&x).unwrap();
    let t = Instant::now();
    net.infer(&x).unwrap();
    let dt = t.elapsed();
    assert!(dt.as_secs_f64() < 2.0, "single 128² inference took {dt:?}");

    // Batching must not make the per-sample time worse.
    let rows = bench_inference(&net, &[1, 8], 20).unwrap();
    let (one, eight) = (rows[0].per_sample.median, rows[1].per_sample.median);
    assert!(eight.as_secs_f64() <= 1.1 * one.as_secs_f64(), "batch 8 {eight:?}/sample vs batch 1 {one:?}");
}
