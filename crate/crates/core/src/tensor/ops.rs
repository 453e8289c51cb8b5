use std::ops::Range;

use rand::Rng;

use super::{mismatch, Scalar, Tensor, TensorError};

/// Whether layers use batch statistics and stochastic masks (`Train`) or
/// their frozen counterparts (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Zero padding added around the spatial dims before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn uniform(p: usize) -> Self {
        Padding { top: p, bottom: p, left: p, right: p }
    }

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding { top, bottom, left, right }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Interprets a rank-3 (`C×H×W`) or rank-4 (`N×C×H×W`) shape.
fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(mismatch(op, format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn with_spatial(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    match shape.len() {
        3 => vec![c, h, w],
        _ => vec![shape[0], c, h, w],
    }
}

/// Target size of one im2col band, in elements.
const BAND_ELEMS: usize = 1 << 17;

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, unpadded: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::NONE
    }

    /// Output columns `ox` whose input column `ox·s + kx − pad_left` lies
    /// inside the image, as a half-open range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, pl) = (self.stride, self.pad.left);
        let lo = if kx >= pl { 0 } else { (pl - kx).div_ceil(s) };
        // ox·s + kx − pl ≤ w − 1  ⇔  ox ≤ (w − 1 + pl − kx) / s
        let hi = if self.w + pl > kx { ((self.w - 1 + pl - kx) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Output rows per band so that a band's column matrix stays cache-sized.
    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.kdim() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Column matrix (`kdim × band positions`) for output rows `rows`.
    fn im2col<T: Scalar>(&self, x: &[T], rows: Range<usize>, cols: &mut [T]) {
        let p = rows.len() * self.wo;
        let s = self.stride;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let (lo, hi) = self.valid_cols(kx);
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - self.pad.top as isize;
                        let dst = &mut cols[row + r * self.wo..row + (r + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo * s + kx - self.pad.left;
                            if s == 1 {
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (d, v) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a band's column matrix back onto the input image.
    fn col2im<T: Scalar>(&self, cols: &[T], rows: Range<usize>, x: &mut [T]) {
        let p = rows.len() * self.wo;
        let s = self.stride;
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * s + kx - self.pad.left;
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * s + ky) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + r * self.wo + lo..row + r * self.wo + hi];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if s == 1 {
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(src) {
                                *d = *d + *v;
                            }
                        } else {
                            for (d, v) in dst[start..].iter_mut().step_by(s).zip(src) {
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with per-output-channel bias.
///
/// `x` is `C_in×H×W` or `N×C_in×H×W`, `weight` is `C_out×C_in×k_h×k_w`,
/// `bias` is `C_out`. Output spatial size is `⌊(H + pad_v − k)/s⌋ + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>, TensorError> {
    let (n, cin, h, w) = nchw("conv2d", x.shape())?;
    let [cout, wcin, kh, kw] = *weight.shape() else {
        return Err(mismatch("conv2d", format!("kernel must be rank 4, got {:?}", weight.shape())));
    };
    if wcin != cin {
        return Err(mismatch("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(mismatch("conv2d", format!("bias shape {:?}, expected [{cout}]", b.shape())));
        }
    }
    if stride == 0 {
        return Err(mismatch("conv2d", "stride must be positive"));
    }
    let hp = h + pad.top + pad.bottom;
    let wp = w + pad.left + pad.right;
    if hp < kh || wp < kw {
        return Err(mismatch("conv2d", format!("padded input {hp}×{wp} smaller than kernel {kh}×{kw}")));
    }
    let g = ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (hp - kh) / stride + 1,
        wo: (wp - kw) / stride + 1,
    };
    let (kdim, p) = (g.kdim(), g.positions());
    let in_plane = cin * h * w;

    let mut out = vec![T::zero(); n * cout * p];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.data());
        let band = g.band_rows();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * band * g.wo] };
        for s in 0..n {
            let xs = &xd[s * in_plane..(s + 1) * in_plane];
            let os = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(bd) = &bd {
                for (co, row) in os.chunks_mut(p).enumerate() {
                    row.fill(bd[co]);
                }
            }
            let beta = if bd.is_some() { T::one() } else { T::zero() };
            if g.is_pointwise() {
                T::gemm(cout, kdim, p, T::one(), &wd, kdim as isize, 1, xs, p as isize, 1, beta, os, p as isize, 1);
                continue;
            }
            for r0 in (0..g.ho).step_by(band) {
                let rows = r0..(r0 + band).min(g.ho);
                let bp = rows.len() * g.wo;
                g.im2col(xs, rows, &mut cols);
                let dst = &mut os[r0 * g.wo..];
                T::gemm(cout, kdim, bp, T::one(), &wd, kdim as isize, 1, &cols, bp as isize, 1, beta, dst, p as isize, 1);
            }
        }
    }

    let xc = x.clone();
    let wc = weight.clone();
    let want_x = x.requires_grad();
    let want_w = weight.requires_grad();
    let want_b = bias.map(|b| b.requires_grad()).unwrap_or(false);
    let has_bias = bias.is_some();
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let shape = with_spatial(x.shape(), cout, g.ho, g.wo);
    Ok(Tensor::from_op("conv2d", shape, out, parents, move |gy| {
        let xd = xc.data();
        let wd = wc.data();
        let mut gx = want_x.then(|| vec![T::zero(); n * in_plane]);
        let mut gw = want_w.then(|| vec![T::zero(); cout * kdim]);
        let mut gb = want_b.then(|| vec![T::zero(); cout]);
        let band = g.band_rows();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * band * g.wo] };
        for s in 0..n {
            let gys = &gy[s * cout * p..(s + 1) * cout * p];
            if let Some(gb) = gb.as_mut() {
                for (co, row) in gys.chunks(p).enumerate() {
                    gb[co] = gb[co] + row.iter().copied().sum::<T>();
                }
            }
            let xs = &xd[s * in_plane..(s + 1) * in_plane];
            if g.is_pointwise() {
                if let Some(gw) = gw.as_mut() {
                    T::gemm(cout, p, kdim, T::one(), gys, p as isize, 1, xs, 1, p as isize, T::one(), gw, kdim as isize, 1);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxs = &mut gx[s * in_plane..(s + 1) * in_plane];
                    T::gemm(kdim, cout, p, T::one(), &wd, 1, kdim as isize, gys, p as isize, 1, T::zero(), gxs, p as isize, 1);
                }
                continue;
            }
            for r0 in (0..g.ho).step_by(band) {
                let rows = r0..(r0 + band).min(g.ho);
                let bp = rows.len() * g.wo;
                let gyb = &gys[r0 * g.wo..];
                if let Some(gw) = gw.as_mut() {
                    g.im2col(xs, rows.clone(), &mut cols);
                    // gW += gY · colsᵀ
                    T::gemm(cout, bp, kdim, T::one(), gyb, p as isize, 1, &cols, 1, bp as isize, T::one(), gw, kdim as isize, 1);
                }
                if let Some(gx) = gx.as_mut() {
                    // gCols = Wᵀ · gY, scattered back onto the input.
                    T::gemm(kdim, cout, bp, T::one(), &wd, 1, kdim as isize, gyb, p as isize, 1, T::zero(), &mut cols, bp as isize, 1);
                    g.col2im(&cols, rows, &mut gx[s * in_plane..(s + 1) * in_plane]);
                }
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(gb);
        }
        grads
    }))
}

/// Interpolation taps along one axis for a ×2 resize.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<f64>,
    w_hi: Vec<f64>,
}

impl Taps {
    fn new(len: usize, mode: UpsampleMode) -> Self {
        let mut t = Taps { lo: vec![], hi: vec![], w_lo: vec![], w_hi: vec![] };
        for o in 0..2 * len {
            match mode {
                UpsampleMode::Nearest => {
                    t.lo.push(o / 2);
                    t.hi.push(o / 2);
                    t.w_lo.push(1.0);
                    t.w_hi.push(0.0);
                }
                UpsampleMode::Bilinear => {
                    // Cell-center alignment: output center o maps to input coordinate (o + ½)/2 − ½.
                    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                    let lo = (src.floor() as usize).min(len - 1);
                    let hi = (lo + 1).min(len - 1);
                    let frac = src - lo as f64;
                    t.lo.push(lo);
                    t.hi.push(hi);
                    t.w_lo.push(1.0 - frac);
                    t.w_hi.push(frac);
                }
            }
        }
        t
    }
}

/// Doubles both spatial dims by bilinear (cell-center aligned) or nearest
/// interpolation.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("upsample2x", x.shape())?;
    let (h2, w2) = (2 * h, 2 * w);
    let ty = Taps::new(h, mode);
    let tx = Taps::new(w, mode);
    let planes = n * c;
    let wy: Vec<(T, T)> = (0..h2).map(|o| (T::of(ty.w_lo[o]), T::of(ty.w_hi[o]))).collect();
    let wx: Vec<(T, T)> = (0..w2).map(|o| (T::of(tx.w_lo[o]), T::of(tx.w_hi[o]))).collect();
    // Separable: horizontal taps into `rows` (h × w2), then vertical blend.
    let mut out = vec![T::zero(); planes * h2 * w2];
    {
        let xd = x.data();
        let mut rows = vec![T::zero(); h * w2];
        for pl in 0..planes {
            let src = &xd[pl * h * w..(pl + 1) * h * w];
            for (y, row) in rows.chunks_mut(w2).enumerate() {
                let s = &src[y * w..(y + 1) * w];
                for (ox, v) in row.iter_mut().enumerate() {
                    let (cl, cr) = wx[ox];
                    *v = cl * s[tx.lo[ox]] + cr * s[tx.hi[ox]];
                }
            }
            let dst = &mut out[pl * h2 * w2..(pl + 1) * h2 * w2];
            for (oy, d) in dst.chunks_mut(w2).enumerate() {
                let r0 = &rows[ty.lo[oy] * w2..(ty.lo[oy] + 1) * w2];
                let r1 = &rows[ty.hi[oy] * w2..(ty.hi[oy] + 1) * w2];
                let (a, b) = wy[oy];
                for ((d, &u), &v) in d.iter_mut().zip(r0).zip(r1) {
                    *d = a * u + b * v;
                }
            }
        }
    }
    let shape = with_spatial(x.shape(), c, h2, w2);
    Ok(Tensor::from_op("upsample2x", shape, out, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); planes * h * w];
        let mut rows = vec![T::zero(); h * w2];
        for pl in 0..planes {
            let gs = &g[pl * h2 * w2..(pl + 1) * h2 * w2];
            rows.fill(T::zero());
            for (oy, gr) in gs.chunks(w2).enumerate() {
                let (a, b) = wy[oy];
                let (lo, hi) = (ty.lo[oy] * w2, ty.hi[oy] * w2);
                for (ox, &v) in gr.iter().enumerate() {
                    rows[lo + ox] = rows[lo + ox] + a * v;
                }
                for (ox, &v) in gr.iter().enumerate() {
                    rows[hi + ox] = rows[hi + ox] + b * v;
                }
            }
            let gd = &mut gx[pl * h * w..(pl + 1) * h * w];
            for (y, row) in rows.chunks(w2).enumerate() {
                let d = &mut gd[y * w..(y + 1) * w];
                for (ox, &v) in row.iter().enumerate() {
                    let (cl, cr) = wx[ox];
                    d[tx.lo[ox]] = d[tx.lo[ox]] + cl * v;
                    d[tx.hi[ox]] = d[tx.hi[ox]] + cr * v;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Per-channel batch normalization over `(N, H, W)`.
///
/// In `Train` mode the batch statistics normalize the input and the running
/// statistics are blended towards them with `momentum` (the running
/// variance uses the unbiased estimate). `Eval` mode normalizes with the
/// running statistics and leaves them untouched.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let [n, c, h, w] = *x.shape() else {
        return Err(mismatch("batch_norm", format!("expected N×C×H×W, got {:?}", x.shape())));
    };
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return Err(mismatch("batch_norm", format!("affine/statistics size must be {c}")));
    }
    let hw = h * w;
    let m = n * hw;
    if mode == Mode::Train && m < 2 {
        return Err(mismatch("batch_norm", format!("train mode needs ≥ 2 values per channel, got {m}")));
    }

    let xd = x.data();
    let gd = gamma.to_vec();
    let bd = beta.to_vec();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![0.0f64; c];
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mean = s / m as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v.to_f64().unwrap() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = ss / m as f64;
                let unbiased = ss / (m - 1) as f64;
                stats.mean[ch] = T::of((1.0 - momentum) * stats.mean[ch].to_f64().unwrap() + momentum * mean);
                stats.var[ch] = T::of((1.0 - momentum) * stats.var[ch].to_f64().unwrap() + momentum * unbiased);
                (mean, var)
            }
            Mode::Eval => (stats.mean[ch].to_f64().unwrap(), stats.var[ch].to_f64().unwrap()),
        };
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[ch] = inv;
        let (mean_t, inv_t) = (T::of(mean), T::of(inv));
        for b in 0..n {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (o, &v) in xhat[range.clone()].iter_mut().zip(&xd[range]) {
                *o = (v - mean_t) * inv_t;
            }
        }
    }
    drop(xd);
    let mut out = xhat.clone();
    for b in 0..n {
        for ch in 0..c {
            for o in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *o = gd[ch] * *o + bd[ch];
            }
        }
    }

    let shape = x.shape().to_vec();
    let parents = vec![x.clone(), gamma.clone(), beta.clone()];
    Ok(Tensor::from_op("batch_norm", shape, out, parents, move |g| {
        let mut gsum = vec![0.0f64; c];
        let mut gxhat = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (&gv, &xv) in g[range.clone()].iter().zip(&xhat[range]) {
                    let gv = gv.to_f64().unwrap();
                    gsum[ch] += gv;
                    gxhat[ch] += gv * xv.to_f64().unwrap();
                }
            }
        }
        let mut gx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let gam = gd[ch].to_f64().unwrap();
            let inv = inv_std[ch];
            for b in 0..n {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((o, &gv), &xv) in gx[range.clone()].iter_mut().zip(&g[range.clone()]).zip(&xhat[range]) {
                    let gv = gv.to_f64().unwrap();
                    *o = T::of(match mode {
                        Mode::Train => {
                            gam * inv / m as f64 * (m as f64 * gv - gsum[ch] - xv.to_f64().unwrap() * gxhat[ch])
                        }
                        Mode::Eval => gam * inv * gv,
                    });
                }
            }
        }
        let ggamma = gxhat.iter().map(|&v| T::of(v)).collect();
        let gbeta = gsum.iter().map(|&v| T::of(v)).collect();
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }))
}

/// `max(x, slope·x)` elementwise (for `0 ≤ slope ≤ 1`).
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    let xd = x.data();
    let positive: Vec<bool> = xd.iter().map(|&v| v > T::zero()).collect();
    let out = xd.iter().zip(&positive).map(|(&v, &p)| if p { v } else { s * v }).collect();
    drop(xd);
    Tensor::from_op("leaky_relu", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(g.iter().zip(&positive).map(|(&gv, &p)| if p { gv } else { s * gv }).collect())]
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, 0.0)
}

/// Inverted dropout: in `Train` mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1/(1−rate)`. The mask is
/// kept for the backward pass. `Eval` mode and `rate == 0` are identities.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut R) -> Tensor<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if mode == Mode::Eval || rate == 0.0 {
        return x.clone();
    }
    let keep_scale = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::from_op("dropout", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect())]
    })
}

/// Concatenates `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (na, ca, ha, wa) = nchw("concat_channels", a.shape())?;
    let (nb, cb, hb, wb) = nchw("concat_channels", b.shape())?;
    if a.shape().len() != b.shape().len() || na != nb || ha != hb || wa != wb {
        return Err(mismatch("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (sa, sb) = (ca * ha * wa, cb * ha * wa);
    let mut out = Vec::with_capacity(na * (sa + sb));
    {
        let (ad, bd) = (a.data(), b.data());
        for s in 0..na {
            out.extend_from_slice(&ad[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&bd[s * sb..(s + 1) * sb]);
        }
    }
    let shape = with_spatial(a.shape(), ca + cb, ha, wa);
    Ok(Tensor::from_op("concat_channels", shape, out, vec![a.clone(), b.clone()], move |g| {
        let mut ga = Vec::with_capacity(na * sa);
        let mut gb = Vec::with_capacity(na * sb);
        for s in 0..na {
            let chunk = &g[s * (sa + sb)..(s + 1) * (sa + sb)];
            ga.extend_from_slice(&chunk[..sa]);
            gb.extend_from_slice(&chunk[sa..]);
        }
        vec![Some(ga), Some(gb)]
    }))
}

/// Channels `start..start+len` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("slice_channels", x.shape())?;
    if start + len > c {
        return Err(mismatch("slice_channels", format!("channels {start}..{} of {c}", start + len)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    {
        let xd = x.data();
        for s in 0..n {
            out.extend_from_slice(&xd[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
    }
    let total = x.numel();
    let shape = with_spatial(x.shape(), len, h, w);
    Ok(Tensor::from_op("slice_channels", shape, out, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); total];
        for s in 0..n {
            gx[(s * c + start) * plane..(s * c + start + len) * plane]
                .copy_from_slice(&g[s * len * plane..(s + 1) * len * plane]);
        }
        vec![Some(gx)]
    }))
}

/// Mean absolute difference. The gradient with respect to `out` is
/// `sign(out − target)/count`, zero at exact ties.
pub fn l1_loss<T: Scalar>(out: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if out.shape() != target.shape() {
        return Err(mismatch("l1_loss", format!("{:?} vs {:?}", out.shape(), target.shape())));
    }
    let count = out.numel();
    let diff: Vec<T> = out.data().iter().zip(target.data().iter()).map(|(&a, &b)| a - b).collect();
    let total: f64 = diff.iter().map(|d| d.abs().to_f64().unwrap()).sum();
    let value = T::of(total / count as f64);
    Ok(Tensor::from_op("l1_loss", Vec::new(), vec![value], vec![out.clone(), target.clone()], move |g| {
        let k = g[0] / T::of(count as f64);
        let sign: Vec<T> = diff
            .iter()
            .map(|&d| if d > T::zero() { k } else if d < T::zero() { -k } else { T::zero() })
            .collect();
        let neg = sign.iter().map(|&v| -v).collect();
        vec![Some(sign), Some(neg)]
    }))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op("add", a.shape().to_vec(), out, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op("mul", a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        let ga = g.iter().zip(bc.data().iter()).map(|(&gv, &y)| gv * y).collect();
        let gb = g.iter().zip(ac.data().iter()).map(|(&gv, &x)| gv * x).collect();
        vec![Some(ga), Some(gb)]
    }))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::of(factor);
    let out = x.data().iter().map(|&v| v * f).collect();
    Tensor::from_op("scale", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|&v| v * f).collect())]
    })
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().sum::<T>();
    let n = x.numel();
    Tensor::from_op("sum", Vec::new(), vec![total], vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}
