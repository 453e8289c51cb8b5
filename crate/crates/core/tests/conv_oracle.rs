use foilnet_core::tensor::{conv2d, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct definition: out[n][o][y][x] = b[o] + Σ_{c,i,j} w[o][c][i][j] · x_pad[n][c][y·s+i][x·s+j].
#[allow(clippy::too_many_arguments)]
fn reference(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f32],
    (co, kh, kw): (usize, usize, usize),
    b: &[f32],
    stride: usize,
    pad: Padding,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + pad.top + pad.bottom - kh) / stride + 1;
    let wo = (w + pad.left + pad.right - kw) / stride + 1;
    let mut out = vec![0.0f64; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b[o] as f64;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad.top as isize;
                                let ix = (xo * stride + j) as isize - pad.left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + ci) * h + iy as usize) * w + ix as usize] as f64;
                                acc += k[((o * c + ci) * kh + i) * kw + j] as f64 * xv;
                            }
                        }
                    }
                    out[((s * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv2d_matches_direct_summation_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let co = rng.gen_range(1..=5);
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let pad = Padding::new(rng.gen_range(0..=2), rng.gen_range(0..=2), rng.gen_range(0..=2), rng.gen_range(0..=2));
        if h + pad.top + pad.bottom < k || w + pad.left + pad.right < k {
            continue;
        }
        let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let xv = draw(n * c * h * w);
        let kv = draw(co * c * k * k);
        let bv = draw(co);
        let x = Tensor::from_vec(&[n, c, h, w], xv.clone()).unwrap();
        let kt = Tensor::from_vec(&[co, c, k, k], kv.clone()).unwrap();
        let bt = Tensor::from_vec(&[co], bv.clone()).unwrap();
        let got = conv2d(&x, &kt, Some(&bt), stride, pad).unwrap();
        let (want, ho, wo) = reference(&xv, (n, c, h, w), &kv, (co, k, k), &bv, stride, pad);
        assert_eq!(got.shape(), [n, co, ho, wo]);
        for (g, r) in got.to_vec().iter().zip(&want) {
            assert!((*g as f64 - r).abs() <= 1e-5 * r.abs().max(1.0), "case {checked}: {g} vs {r}");
        }
        checked += 1;
    }
}
