//! Dense kernels with hand-written backward passes. Activations are NHWC
//! `f64`; every reduction runs in a fixed order so results are bit-stable.

use rayon::prelude::*;

/// `C = A * B + beta * C` for row-major operands. `a_t`/`b_t` mean the
/// operand is stored transposed (`k x m` for A, `n x k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c` as checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// NHWC activation block.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_data(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "activation buffer size");
        Self { n, h, w, c, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.h, self.w, self.c)
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.h * self.w * self.c;
        &self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &Act, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw(x.h, x.w);
    let plen = g.patch_len();
    let per_sample = ho * wo * plen;
    let mut cols = vec![0.0; x.n * per_sample];
    cols.par_chunks_mut(per_sample).enumerate().for_each(|(n, out)| {
        let xs = x.sample(n);
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let dst = &mut row[(ky * g.k + kx) * g.cin..(ky * g.k + kx + 1) * g.cin];
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                            let src = ((iy as usize) * x.w + ix as usize) * x.c;
                            dst.copy_from_slice(&xs[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[f64], n: usize, h: usize, w: usize, g: &ConvGeom) -> Act {
    let (ho, wo) = g.out_hw(h, w);
    let plen = g.patch_len();
    let mut dx = Act::zeros(n, h, w, g.cin);
    let per_in = h * w * g.cin;
    dx.data.par_chunks_mut(per_in).enumerate().for_each(|(s, dxs)| {
        let cs = &cols[s * ho * wo * plen..(s + 1) * ho * wo * plen];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cs[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * g.cin;
                        let src = &row[(ky * g.k + kx) * g.cin..(ky * g.k + kx + 1) * g.cin];
                        dxs[dst..dst + g.cin].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    });
    dx
}

/// Weights are `cout x (k * k * cin)` in `(ky, kx, cin)` order.
pub fn conv2d(x: &Act, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Act {
    debug_assert_eq!(x.c, g.cin);
    let (ho, wo) = g.out_hw(x.h, x.w);
    let m = x.n * ho * wo;
    let mut out = Act::zeros(x.n, ho, wo, g.cout);
    if g.is_pointwise() {
        gemm(m, g.cin, g.cout, &x.data, false, weight, true, &mut out.data, 0.0);
    } else {
        let cols = im2col(x, g);
        gemm(m, g.patch_len(), g.cout, &cols, false, weight, true, &mut out.data, 0.0);
    }
    if let Some(b) = bias {
        out.data.chunks_exact_mut(g.cout).for_each(|row| row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb));
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Act,
    weight: &[f64],
    has_bias: bool,
    g: &ConvGeom,
    dy: &Act,
    need_dx: bool,
) -> (Option<Act>, Vec<f64>, Option<Vec<f64>>) {
    let m = dy.rows();
    let plen = g.patch_len();
    let mut dw = vec![0.0; g.cout * plen];
    let dx = if g.is_pointwise() {
        gemm(g.cout, m, plen, &dy.data, true, &x.data, false, &mut dw, 0.0);
        need_dx.then(|| {
            let mut dx = x.zeros_like();
            gemm(m, g.cout, plen, &dy.data, false, weight, false, &mut dx.data, 0.0);
            dx
        })
    } else {
        let cols = im2col(x, g);
        gemm(g.cout, m, plen, &dy.data, true, &cols, false, &mut dw, 0.0);
        drop(cols);
        need_dx.then(|| {
            let mut dcols = vec![0.0; m * plen];
            gemm(m, g.cout, plen, &dy.data, false, weight, false, &mut dcols, 0.0);
            col2im(&dcols, x.n, x.h, x.w, g)
        })
    };
    let db = has_bias.then(|| column_sums(&dy.data, g.cout));
    (dx, dw, db)
}

pub fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

/// Per-channel batch statistics gathered in training mode.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub invstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub fn batchnorm_train(x: &Act, gamma: &[f64], beta: &[f64], eps: f64) -> (Act, BnCache) {
    let c = x.c;
    let m = x.rows() as f64;
    let mean: Vec<f64> = column_sums(&x.data, c).into_iter().map(|s| s / m).collect();
    let mut var = vec![0.0; c];
    for row in x.data.chunks_exact(c) {
        for ch in 0..c {
            let d = row[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    let var_unbiased = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + eps).sqrt()).collect();
    let mut xhat = x.data.clone();
    let mut out = x.zeros_like();
    for (xr, or) in xhat.chunks_exact_mut(c).zip(out.data.chunks_exact_mut(c)) {
        for ch in 0..c {
            xr[ch] = (xr[ch] - mean[ch]) * invstd[ch];
            or[ch] = gamma[ch] * xr[ch] + beta[ch];
        }
    }
    (
        out,
        BnCache {
            xhat,
            invstd,
            mean,
            var_unbiased,
        },
    )
}

pub fn batchnorm_eval(x: &Act, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Act {
    let c = x.c;
    let scale: Vec<f64> = (0..c).map(|ch| gamma[ch] / (var[ch] + eps).sqrt()).collect();
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - mean[ch]) * scale[ch] + beta[ch];
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], dy: &Act) -> (Act, Vec<f64>, Vec<f64>) {
    let c = dy.c;
    let m = dy.rows() as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dr, xr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += dr[ch];
            dgamma[ch] += dr[ch] * xr[ch];
        }
    }
    let mut dx = dy.zeros_like();
    for ((dxr, dr), xr) in dx.data.chunks_exact_mut(c).zip(dy.data.chunks_exact(c)).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dxr[ch] = gamma[ch] * cache.invstd[ch] / m * (m * dr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &Act, dy: &mut Act) {
    dy.data.iter_mut().zip(&y.data).for_each(|(d, v)| {
        if *v <= 0.0 {
            *d = 0.0
        }
    });
}

/// 3x3 stride-2 max pooling with padding 1; returns argmax positions.
pub fn maxpool3s2(x: &Act) -> (Act, Vec<usize>) {
    let ho = (x.h + 2 - 3) / 2 + 1;
    let wo = (x.w + 2 - 3) / 2 + 1;
    let mut out = Act::zeros(x.n, ho, wo, x.c);
    let mut arg = vec![0usize; out.data.len()];
    for n in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..x.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy as usize >= x.h || ix as usize >= x.w {
                                continue;
                            }
                            let i = ((n * x.h + iy as usize) * x.w + ix as usize) * x.c + ch;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((n * ho + oy) * wo + ox) * x.c + ch;
                    out.data[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_shape: (usize, usize, usize, usize), arg: &[usize], dy: &Act) -> Act {
    let (n, h, w, c) = input_shape;
    let mut dx = Act::zeros(n, h, w, c);
    for (d, &i) in dy.data.iter().zip(arg) {
        dx.data[i] += d;
    }
    dx
}

pub fn upsample2(x: &Act) -> Act {
    let mut out = Act::zeros(x.n, x.h * 2, x.w * 2, x.c);
    for n in 0..x.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let src = ((n * x.h + y / 2) * x.w + xx / 2) * x.c;
                let dst = ((n * out.h + y) * out.w + xx) * x.c;
                out.data[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Act) -> Act {
    let mut dx = Act::zeros(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for n in 0..dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let src = ((n * dy.h + y) * dy.w + xx) * dy.c;
                let dst = ((n * dx.h + y / 2) * dx.w + xx / 2) * dy.c;
                for ch in 0..dy.c {
                    dx.data[dst + ch] += dy.data[src + ch];
                }
            }
        }
    }
    dx
}

/// Global average pool: `n x c` row-major.
pub fn global_avg_pool(x: &Act) -> Vec<f64> {
    let hw = (x.h * x.w) as f64;
    let mut out = vec![0.0; x.n * x.c];
    for n in 0..x.n {
        let o = &mut out[n * x.c..(n + 1) * x.c];
        for px in x.sample(n).chunks_exact(x.c) {
            o.iter_mut().zip(px).for_each(|(a, b)| *a += b);
        }
        o.iter_mut().for_each(|v| *v /= hw);
    }
    out
}

pub fn global_avg_pool_backward(dy: &[f64], n: usize, h: usize, w: usize, c: usize) -> Act {
    let hw = (h * w) as f64;
    let mut dx = Act::zeros(n, h, w, c);
    for s in 0..n {
        let g = &dy[s * c..(s + 1) * c];
        for px in dx.data[s * h * w * c..(s + 1) * h * w * c].chunks_exact_mut(c) {
            px.iter_mut().zip(g).for_each(|(a, b)| *a = b / hw);
        }
    }
    dx
}

/// `y = x W^T + b` with `W` stored `dout x din`.
pub fn linear(x: &[f64], rows: usize, weight: &[f64], bias: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    gemm(rows, din, dout, x, false, weight, true, &mut y, 0.0);
    y.chunks_exact_mut(dout).for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v += b));
    y
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward(x: &[f64], rows: usize, weight: &[f64], din: usize, dout: usize, dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * din];
    let mut dw = vec![0.0; dout * din];
    gemm(rows, dout, din, dy, false, weight, false, &mut dx, 0.0);
    gemm(dout, rows, din, dy, true, x, false, &mut dw, 0.0);
    (dx, dw, column_sums(dy, dout))
}

/// Row-wise L2 normalisation; returns the normalised rows and the norms.
pub fn l2_normalize(v: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = v.to_vec();
    let mut norms = Vec::with_capacity(v.len() / dim.max(1));
    for row in out.chunks_exact_mut(dim) {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|a| *a /= n);
        norms.push(n);
    }
    (out, norms)
}

pub fn l2_normalize_backward(z: &[f64], norms: &[f64], dz: &[f64], dim: usize) -> Vec<f64> {
    let mut dv = vec![0.0; z.len()];
    for (i, n) in norms.iter().enumerate() {
        let zr = &z[i * dim..(i + 1) * dim];
        let dr = &dz[i * dim..(i + 1) * dim];
        let proj: f64 = zr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for d in 0..dim {
            dv[i * dim + d] = (dr[d] - zr[d] * proj) / n;
        }
    }
    dv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_vec(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(seed)).collect()
    }

    /// Central finite difference of `f` at `x[i]`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
        let mut p = x.to_vec();
        p[i] += eps;
        let up = f(&p);
        p[i] -= 2.0 * eps;
        (up - f(&p)) / (2.0 * eps)
    }

    fn assert_grad(analytic: &[f64], f: &dyn Fn(&[f64]) -> f64, x: &[f64]) {
        for i in 0..x.len() {
            let num = fd(f, x, i, 1e-5);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-5, "component {i}: fd {num} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn gemm_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // a stored 3x2
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // b stored 2x3
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 1.0);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut s = 7u64;
        for g in [
            ConvGeom { cin: 2, cout: 3, k: 3, stride: 2, pad: 1 },
            ConvGeom { cin: 3, cout: 2, k: 1, stride: 1, pad: 0 },
            ConvGeom { cin: 2, cout: 2, k: 3, stride: 1, pad: 1 },
        ] {
            let x = Act::from_data(2, 5, 4, g.cin, rand_vec(2 * 5 * 4 * g.cin, &mut s));
            let w = rand_vec(g.cout * g.patch_len(), &mut s);
            let b = rand_vec(g.cout, &mut s);
            let y0 = conv2d(&x, &w, Some(&b), &g);
            let proj = rand_vec(y0.data.len(), &mut s);
            let loss = |y: &Act| y.data.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>();
            let dy = Act::from_data(y0.n, y0.h, y0.w, y0.c, proj.clone());
            let (dx, dw, db) = conv2d_backward(&x, &w, true, &g, &dy, true);
            let fx = |xd: &[f64]| loss(&conv2d(&Act::from_data(2, 5, 4, g.cin, xd.to_vec()), &w, Some(&b), &g));
            assert_grad(&dx.unwrap().data, &fx, &x.data);
            let fw = |wd: &[f64]| loss(&conv2d(&x, wd, Some(&b), &g));
            assert_grad(&dw, &fw, &w);
            let fb = |bd: &[f64]| loss(&conv2d(&x, &w, Some(bd), &g));
            assert_grad(&db.unwrap(), &fb, &b);
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut s = 3u64;
        let x = Act::from_data(3, 2, 2, 3, rand_vec(36, &mut s));
        let gamma = rand_vec(3, &mut s);
        let beta = rand_vec(3, &mut s);
        let proj = rand_vec(36, &mut s);
        let loss = |y: &Act| y.data.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = batchnorm_train(&x, &gamma, &beta, 1e-5);
        let (dx, dg, db) = batchnorm_backward(&cache, &gamma, &Act::from_data(3, 2, 2, 3, proj.clone()));
        let fx = |xd: &[f64]| loss(&batchnorm_train(&Act::from_data(3, 2, 2, 3, xd.to_vec()), &gamma, &beta, 1e-5).0);
        assert_grad(&dx.data, &fx, &x.data);
        let fg = |gd: &[f64]| loss(&batchnorm_train(&x, gd, &beta, 1e-5).0);
        assert_grad(&dg, &fg, &gamma);
        let fb = |bd: &[f64]| loss(&batchnorm_train(&x, &gamma, bd, 1e-5).0);
        assert_grad(&db, &fb, &beta);
    }

    #[test]
    fn linear_normalize_pool_upsample_gradients() {
        let mut s = 11u64;
        let (rows, din, dout) = (3, 4, 5);
        let x = rand_vec(rows * din, &mut s);
        let w = rand_vec(dout * din, &mut s);
        let b = rand_vec(dout, &mut s);
        let proj = rand_vec(rows * dout, &mut s);
        let loss = |y: &[f64]| {
            let (z, _) = l2_normalize(y, dout);
            z.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let y = linear(&x, rows, &w, &b, din, dout);
        let (z, norms) = l2_normalize(&y, dout);
        let dy = l2_normalize_backward(&z, &norms, &proj, dout);
        let (dx, dw, db) = linear_backward(&x, rows, &w, din, dout, &dy);
        assert_grad(&dx, &|xd| loss(&linear(xd, rows, &w, &b, din, dout)), &x);
        assert_grad(&dw, &|wd| loss(&linear(&x, rows, wd, &b, din, dout)), &w);
        assert_grad(&db, &|bd| loss(&linear(&x, rows, &w, bd, din, dout)), &b);

        let a = Act::from_data(2, 2, 3, 2, rand_vec(24, &mut s));
        let up = upsample2(&a);
        let p2 = rand_vec(up.data.len(), &mut s);
        let dx = upsample2_backward(&Act::from_data(2, 4, 6, 2, p2.clone()));
        let f = |d: &[f64]| {
            upsample2(&Act::from_data(2, 2, 3, 2, d.to_vec())).data.iter().zip(&p2).map(|(a, b)| a * b).sum::<f64>()
        };
        assert_grad(&dx.data, &f, &a.data);

        let gp = global_avg_pool(&a);
        let p3 = rand_vec(gp.len(), &mut s);
        let dx = global_avg_pool_backward(&p3, 2, 2, 3, 2);
        let f = |d: &[f64]| global_avg_pool(&Act::from_data(2, 2, 3, 2, d.to_vec())).iter().zip(&p3).map(|(a, b)| a * b).sum::<f64>();
        assert_grad(&dx.data, &f, &a.data);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Act::from_data(1, 4, 4, 1, (0..16).map(|v| v as f64).collect());
        let (y, arg) = maxpool3s2(&x);
        assert_eq!((y.h, y.w), (2, 2));
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = maxpool_backward((1, 4, 4, 1), &arg, &Act::from_data(1, 2, 2, 1, vec![1.0; 4]));
        assert_eq!(dx.data.iter().sum::<f64>(), 4.0);
        assert_eq!(dx.data[5], 1.0);
    }
}
