//! Pyramid level assignment and RoIAlign expressed as a fixed list of
//! bilinear taps per output cell, so forward and backward share weights.

use crate::geometry::BBox;

use super::ops::Act;

/// Canonical FPN assignment: `clamp(floor(4 + log2(sqrt(w h) / 224)), 2, 5)`.
pub fn assign_level(b: &BBox) -> usize {
    let k = (4.0 + (b.area().sqrt() / 224.0).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

/// Bilinear taps `(pixel index, weight)` for one sample point, following the
/// usual RoIAlign border rules.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, hy * hx * scale));
    out.push((y0 * w + x1, hy * lx * scale));
    out.push((y1 * w + x0, ly * hx * scale));
    out.push((y1 * w + x1, ly * lx * scale));
}

/// Taps for each of the `out x out` cells of a box given in input pixels,
/// pooled from a map of size `h x w` at `stride`. Two samples per bin axis,
/// half-pixel aligned.
pub fn roi_taps(b: &BBox, stride: f64, h: usize, w: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let (x0, y0) = (b.x / stride - 0.5, b.y / stride - 0.5);
    let (bw, bh) = (b.w / stride / out as f64, b.h / stride / out as f64);
    let mut cells = Vec::with_capacity(out * out);
    for i in 0..out {
        for j in 0..out {
            let mut taps = Vec::with_capacity(16);
            for a in 0..2 {
                let y = y0 + (i as f64 + (a as f64 + 0.5) / 2.0) * bh;
                for c in 0..2 {
                    let x = x0 + (j as f64 + (c as f64 + 0.5) / 2.0) * bw;
                    bilinear_taps(y, x, h, w, 0.25, &mut taps);
                }
            }
            cells.push(taps);
        }
    }
    cells
}

/// Pooled `out x out x C` patch of sample `n` of `features`.
pub fn roi_align(features: &Act, n: usize, b: &BBox, stride: f64, out: usize) -> Vec<f64> {
    let c = features.c;
    let fs = features.sample(n);
    let mut patch = vec![0.0; out * out * c];
    for (cell, taps) in roi_taps(b, stride, features.h, features.w, out).iter().enumerate() {
        let dst = &mut patch[cell * c..(cell + 1) * c];
        for &(pix, wt) in taps {
            dst.iter_mut().zip(&fs[pix * c..(pix + 1) * c]).for_each(|(d, f)| *d += wt * f);
        }
    }
    patch
}

/// Accumulates the gradient of [`roi_align`] into `dfeatures`.
pub fn roi_align_backward(dfeatures: &mut Act, n: usize, b: &BBox, stride: f64, out: usize, dpatch: &[f64]) {
    let c = dfeatures.c;
    let taps = roi_taps(b, stride, dfeatures.h, dfeatures.w, out);
    let (h, w) = (dfeatures.h, dfeatures.w);
    let ds = &mut dfeatures.data[n * h * w * c..(n + 1) * h * w * c];
    for (cell, taps) in taps.iter().enumerate() {
        let g = &dpatch[cell * c..(cell + 1) * c];
        for &(pix, wt) in taps {
            ds[pix * c..(pix + 1) * c].iter_mut().zip(g).for_each(|(d, gv)| *d += wt * gv);
        }
    }
}

/// RoIAlign followed by the spatial mean, collapsed into one tap list.
pub fn pooled_taps(b: &BBox, stride: f64, h: usize, w: usize, out: usize) -> Vec<(usize, f64)> {
    let inv = 1.0 / (out * out) as f64;
    roi_taps(b, stride, h, w, out)
        .into_iter()
        .flatten()
        .map(|(p, wt)| (p, wt * inv))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_examples() {
        assert_eq!(assign_level(&BBox::new(0.0, 0.0, 224.0, 224.0)), 4);
        assert_eq!(assign_level(&BBox::new(0.0, 0.0, 56.0, 56.0)), 2);
        assert_eq!(assign_level(&BBox::new(0.0, 0.0, 500.0, 500.0)), 5);
        assert_eq!(assign_level(&BBox::new(0.0, 0.0, 112.0, 112.0)), 3);
    }

    #[test]
    fn constant_map_gives_constant_patch() {
        let f = Act::from_data(1, 6, 5, 2, vec![1.75; 60]);
        for b in [BBox::new(0.0, 0.0, 20.0, 24.0), BBox::new(3.3, 7.1, 5.2, 9.9), BBox::new(10.0, 12.0, 9.0, 11.9)] {
            for v in roi_align(&f, 0, &b, 4.0, 7) {
                assert!((v - 1.75).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn one_hot_reproduces_bilinear_weights() {
        // 1x1 output over a box spanning map cells [1, 3) x [1, 3) at stride 1:
        // samples land at 1.5/2.5 (minus the half-pixel offset: 1.0 and 2.0).
        let mut f = Act::zeros(1, 4, 4, 1);
        f.data[4 + 1] = 1.0; // (y=1, x=1)
        let v = roi_align(&f, 0, &BBox::new(1.0, 1.0, 2.0, 2.0), 1.0, 1);
        // sample (1.0, 1.0) hits the pixel with weight 1, the other three miss it
        assert!((v[0] - 0.25).abs() < 1e-12);
        // shifted by a quarter cell: weights 0.75 * 0.75 at sample (1.25, 1.25)
        let v = roi_align(&f, 0, &BBox::new(1.25, 1.25, 2.0, 2.0), 1.0, 1);
        let expect = 0.25 * (0.75 * 0.75 + 0.75 * 0.0 + 0.0 + 0.0);
        assert!((v[0] - expect).abs() < 1e-12, "{} vs {expect}", v[0]);
    }

    #[test]
    fn pooled_taps_match_patch_mean() {
        let data: Vec<f64> = (0..2 * 8 * 8 * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let f = Act::from_data(2, 8, 8, 3, data);
        let b = BBox::new(4.5, 2.0, 17.0, 21.5);
        let patch = roi_align(&f, 1, &b, 4.0, 7);
        let mut mean = vec![0.0; 3];
        for cell in patch.chunks_exact(3) {
            mean.iter_mut().zip(cell).for_each(|(m, v)| *m += v / 49.0);
        }
        let mut pooled = vec![0.0; 3];
        for (p, w) in pooled_taps(&b, 4.0, 8, 8, 7) {
            for ch in 0..3 {
                pooled[ch] += w * f.sample(1)[p * 3 + ch];
            }
        }
        for (a, b) in mean.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
