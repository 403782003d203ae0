//! Box geometry: center-format boxes, IoU and generalized IoU, in scalar and tensor form.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center format `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn to_xyxy(&self) -> [f32; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Positive extent and corners within the unit square (with float slack).
    pub fn is_valid(&self) -> bool {
        const EPS: f32 = 1e-5;
        let [x0, y0, x1, y1] = self.to_xyxy();
        self.w > 0.0
            && self.h > 0.0
            && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && x0 >= -EPS
            && y0 >= -EPS
            && x1 <= 1.0 + EPS
            && y1 <= 1.0 + EPS
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    fn xyxy64(&self) -> [f64; 4] {
        let (cx, cy, w, h) = (self.cx as f64, self.cy as f64, self.w as f64, self.h as f64);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union, _) = overlap_terms(self.xyxy64(), other.xyxy64());
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

fn overlap_terms(a: [f64; 4], b: [f64; 4]) -> (f64, f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    (inter, union, hull)
}

/// Generalized IoU in `(-1, 1]`: IoU minus the fraction of the enclosing box
/// not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, hull) = overlap_terms(a.xyxy64(), b.xyxy64());
    inter / union - (hull - union) / hull
}

/// `(cx, cy, w, h)` -> `(x0, y0, x1, y1)` along the last dimension.
pub fn cxcywh_to_xyxy(boxes: &Tensor) -> candle_core::Result<Tensor> {
    let cx = boxes.narrow(D::Minus1, 0, 1)?;
    let cy = boxes.narrow(D::Minus1, 1, 1)?;
    let hw = (boxes.narrow(D::Minus1, 2, 1)? * 0.5)?;
    let hh = (boxes.narrow(D::Minus1, 3, 1)? * 0.5)?;
    Tensor::cat(&[(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?], D::Minus1)
}

/// Elementwise generalized IoU between two `(K, 4)` center-format box tensors.
/// Differentiable with respect to both arguments.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let a = cxcywh_to_xyxy(a)?;
    let b = cxcywh_to_xyxy(b)?;
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (ax0, ay0, ax1, ay1) = (col(&a, 0)?, col(&a, 1)?, col(&a, 2)?, col(&a, 3)?);
    let (bx0, by0, bx1, by1) = (col(&b, 0)?, col(&b, 1)?, col(&b, 2)?, col(&b, 3)?);
    let area_a = ((&ax1 - &ax0)? * (&ay1 - &ay0)?)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hw = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let hh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let hull = (hw * hh)?;
    let iou = (inter / &union)?;
    let slack = ((&hull - &union)? / &hull)?;
    (iou - slack)?.squeeze(D::Minus1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Area-enumeration oracle on an integer grid: boxes with integer corners in
    /// `[0, G]`, areas computed by counting unit cells.
    fn grid_giou(a: [i64; 4], b: [i64; 4]) -> f64 {
        let cells = |pred: &dyn Fn(i64, i64) -> bool, x0: i64, y0: i64, x1: i64, y1: i64| {
            let mut n = 0i64;
            for y in y0..y1 {
                for x in x0..x1 {
                    if pred(x, y) {
                        n += 1;
                    }
                }
            }
            n
        };
        let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let hx0 = a[0].min(b[0]);
        let hy0 = a[1].min(b[1]);
        let hx1 = a[2].max(b[2]);
        let hy1 = a[3].max(b[3]);
        let inter = cells(&|x, y| inside(a, x, y) && inside(b, x, y), hx0, hy0, hx1, hy1);
        let union = cells(&|x, y| inside(a, x, y) || inside(b, x, y), hx0, hy0, hx1, hy1);
        let hull = cells(&|_, _| true, hx0, hy0, hx1, hy1);
        inter as f64 / union as f64 - (hull - union) as f64 / hull as f64
    }

    fn to_bbox(r: [i64; 4], g: f32) -> BBox {
        BBox::from_xyxy(r[0] as f32 / g, r[1] as f32 / g, r[2] as f32 / g, r[3] as f32 / g)
    }

    #[test]
    fn giou_identical_is_one() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_far_apart_approaches_minus_one() {
        let a = BBox::new(0.001, 0.001, 0.002, 0.002);
        let b = BBox::new(0.999, 0.999, 0.002, 0.002);
        let g = giou(&a, &b);
        assert!(g < -0.99 && g > -1.0, "{g}");
    }

    #[test]
    fn giou_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // A power-of-two grid keeps every corner exact in f32.
        let g = 32i64;
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x0 = rng.random_range(0..g - 1);
            let y0 = rng.random_range(0..g - 1);
            let x1 = rng.random_range(x0 + 1..=g);
            let y1 = rng.random_range(y0 + 1..=g);
            [x0, y0, x1, y1]
        };
        for _ in 0..300 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let expect = grid_giou(a, b);
            let got = giou(&to_bbox(a, g as f32), &to_bbox(b, g as f32));
            assert!((got - expect).abs() < 1e-6, "{a:?} {b:?}: {got} vs {expect}");
            let sym = giou(&to_bbox(b, g as f32), &to_bbox(a, g as f32));
            assert!((got - sym).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_giou_agrees_with_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                )
            };
            let (x, y) = (mk(&mut rng), mk(&mut rng));
            a.extend(x.to_array().map(f64::from));
            b.extend(y.to_array().map(f64::from));
            boxes.push((x, y));
        }
        let ta = Tensor::from_vec(a, (50, 4), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b, (50, 4), &Device::Cpu).unwrap();
        let g = giou_tensor(&ta, &tb).unwrap().to_dtype(DType::F64).unwrap();
        for (got, (x, y)) in g.to_vec1::<f64>().unwrap().iter().zip(&boxes) {
            assert!((got - giou(x, y)).abs() < 1e-9);
        }
    }
}
