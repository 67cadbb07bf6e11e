//! Axis-aligned box arithmetic shared by the proposal, augmentation,
//! curriculum and network code.
//!
//! Boxes are `(x, y, w, h)` with `(x, y)` the top-left corner, in real-valued
//! pixel units. Nothing here rounds; rounding happens only when proposals are
//! written to disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Checked constructor enforcing positive, finite extents.
    pub fn try_new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(x, y, w, h);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("degenerate box {b:?}")))
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x.max(other.x);
        let ih = self.y1().min(other.y1()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.x1().max(other.x1()),
            self.y1().max(other.y1()),
        )
    }

    /// Intersection with the rectangle `[0, view_w] x [0, view_h]`, or `None`
    /// when nothing of the box is visible.
    pub fn clip_to(&self, view_w: f64, view_h: f64) -> Option<BBox> {
        if self.within(view_w, view_h) {
            return Some(*self);
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.x1().min(view_w);
        let y1 = self.y1().min(view_h);
        if x1 > x0 && y1 > y0 {
            Some(BBox::from_corners(x0, y0, x1, y1))
        } else {
            None
        }
    }

    pub fn within(&self, view_w: f64, view_h: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x1() <= view_w && self.y1() <= view_h
    }
}

/// Per-coordinate jitter coefficients. Each is drawn from `(-zeta, zeta)`
/// by the curriculum sampler.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JitterNoise {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_w: f64,
    pub sigma_h: f64,
}

impl JitterNoise {
    pub const fn new(sigma_x: f64, sigma_y: f64, sigma_w: f64, sigma_h: f64) -> Self {
        Self {
            sigma_x,
            sigma_y,
            sigma_w,
            sigma_h,
        }
    }
}

/// Intersection over union. Returns 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Shifts the box by a fraction of its own size and rescales its extents
/// log-uniformly: `x' = sx*w + x`, `y' = sy*h + y`, `w' = w*e^sw`, `h' = h*e^sh`.
pub fn jitter_box(b: &BBox, n: &JitterNoise) -> BBox {
    BBox::new(
        n.sigma_x * b.w + b.x,
        n.sigma_y * b.h + b.y,
        b.w * n.sigma_w.exp(),
        b.h * n.sigma_h.exp(),
    )
}

/// Maps a box from original-image coordinates into a view produced by
/// cropping `crop` and resizing it to `out_w x out_h`, mirroring afterwards
/// when `hflip` is set. The result is not clipped.
pub fn transform_box(b: &BBox, crop: &BBox, out_w: f64, out_h: f64, hflip: bool) -> BBox {
    let sx = out_w / crop.w;
    let sy = out_h / crop.h;
    let mut out = BBox::new((b.x - crop.x) * sx, (b.y - crop.y) * sy, b.w * sx, b.h * sy);
    if hflip {
        out.x = out_w - out.x - out.w;
    }
    out
}

/// Fraction of the box area that falls outside the view rectangle.
pub fn clipped_fraction(b: &BBox, view_w: f64, view_h: f64) -> f64 {
    let view = BBox::new(0.0, 0.0, view_w, view_h);
    let visible = b.intersection_area(&view);
    (1.0 - visible / b.area()).clamp(0.0, 1.0)
}

pub const DEFAULT_MIN_AREA: f64 = 144.0;
pub const DEFAULT_RATIO_LO: f64 = 0.33;
pub const DEFAULT_RATIO_HI: f64 = 3.0;
pub const DEFAULT_MERGE_IOU: f64 = 0.5;

/// Area and aspect filter. Aspect bounds are exclusive.
pub fn passes_filter(b: &BBox, min_area: f64, ratio_lo: f64, ratio_hi: f64) -> bool {
    let r = b.aspect();
    b.area() >= min_area && r > ratio_lo && r < ratio_hi
}

/// Keeps boxes passing [`passes_filter`], preserving order.
pub fn filter_boxes(boxes: &[BBox], min_area: f64, ratio_lo: f64, ratio_hi: f64) -> Vec<BBox> {
    boxes
        .iter()
        .copied()
        .filter(|b| passes_filter(b, min_area, ratio_lo, ratio_hi))
        .collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Replaces every connected component of the "IoU above threshold" graph by
/// its enclosing box, repeating until no pair exceeds the threshold.
///
/// The output is sorted by `(x, y, w, h)` so the result does not depend on
/// input order.
pub fn merge_boxes(boxes: &[BBox], iou_thresh: f64) -> Vec<BBox> {
    let mut current: Vec<BBox> = boxes.to_vec();
    loop {
        let n = current.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut merged_any = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if iou(&current[i], &current[j]) > iou_thresh {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                    merged_any = true;
                }
            }
        }
        if !merged_any {
            break;
        }
        let mut hulls: Vec<Option<BBox>> = vec![None; n];
        for i in 0..n {
            let r = find(&mut parent, i);
            hulls[r] = Some(match hulls[r] {
                Some(h) => h.union_hull(&current[i]),
                None => current[i],
            });
        }
        current = hulls.into_iter().flatten().collect();
    }
    current.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.w.total_cmp(&b.w))
            .then(a.h.total_cmp(&b.h))
    });
    current
}
