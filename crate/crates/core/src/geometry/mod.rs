//! Axis-aligned boxes, points and binary masks.
//!
//! Boxes are continuous pixel coordinates; IoU between boxes uses continuous
//! area. Masks are run-length encoded and only used for evaluation.

mod mask;

pub use mask::{mask_iou, rasterize_box, Mask, MaskIou};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(c: [f64; 4]) -> Self {
        BoundingBox::normalized(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    /// Builds a box, swapping corners so that `x1 <= x2` and `y1 <= y2`.
    /// Fails on non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::normalized(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidInput(format!(
                "non-finite box coordinates {c:?}"
            )));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(GeometryError::InvalidInput(format!(
                "box is not normalized {c:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(c: [f64; 2]) -> Self {
        Point { x: c[0], y: c[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::InvalidInput(format!(
                "non-finite point ({x}, {y})"
            )));
        }
        Ok(Point { x, y })
    }
}

/// The answer payload: one box plus optional points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricAnswer {
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Point>,
}

impl GeometricAnswer {
    pub fn from_box(bbox: BoundingBox) -> Self {
        GeometricAnswer {
            bbox,
            points: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        for p in &self.points {
            Point::new(p.x, p.y)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

/// Continuous-area IoU. Zero when the union is empty.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Aggregation {
    /// Mean absolute difference per coordinate.
    #[default]
    Mean,
    /// Sum of absolute differences.
    Sum,
}

/// How predicted and reference points are matched when their counts differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointPairing {
    /// Counts must match.
    Strict,
    /// The first `min(n, m)` pairs are compared positionally; each unmatched
    /// point is scored as if both of its coordinates were off by this many
    /// pixels.
    Penalize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Options {
    pub aggregation: L1Aggregation,
    pub include_points: bool,
    pub pairing: PointPairing,
}

impl L1Options {
    /// Mean over all coordinates; a missing point costs the image diagonal.
    pub fn for_image(image: ImageSize) -> Self {
        L1Options {
            aggregation: L1Aggregation::Mean,
            include_points: true,
            pairing: PointPairing::Penalize(image.diagonal()),
        }
    }
}

impl Default for L1Options {
    fn default() -> Self {
        L1Options {
            aggregation: L1Aggregation::Mean,
            include_points: true,
            pairing: PointPairing::Strict,
        }
    }
}

/// L1 distance between geometric prompts: box corners plus paired points.
pub fn prompt_l1(pred: &GeometricAnswer, gt: &GeometricAnswer, opts: &L1Options) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let mut total = 0.0;
    let mut coords = 0usize;
    for (p, g) in pred.bbox.coords().iter().zip(gt.bbox.coords().iter()) {
        total += (p - g).abs();
        coords += 1;
    }
    if opts.include_points {
        let (n, m) = (pred.points.len(), gt.points.len());
        if n != m {
            match opts.pairing {
                PointPairing::Strict => {
                    return Err(GeometryError::InvalidInput(format!(
                        "point count mismatch: predicted {n}, reference {m}"
                    )))
                }
                PointPairing::Penalize(penalty) => {
                    if !penalty.is_finite() || penalty < 0.0 {
                        return Err(GeometryError::InvalidInput(format!(
                            "missing-point penalty must be finite and non-negative, got {penalty}"
                        )));
                    }
                    let missing = n.abs_diff(m);
                    total += 2.0 * penalty * missing as f64;
                    coords += 2 * missing;
                }
            }
        }
        for (p, g) in pred.points.iter().zip(gt.points.iter()) {
            total += (p.x - g.x).abs() + (p.y - g.y).abs();
            coords += 2;
        }
    }
    Ok(match opts.aggregation {
        L1Aggregation::Mean => total / coords as f64,
        L1Aggregation::Sum => total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(box_iou(&a, &bx(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let third = box_iou(&a, &bx(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_non_finite() {
        let bad = BoundingBox {
            x1: f64::NAN,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        let ok = bx(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(box_iou(&bad, &ok), Err(GeometryError::InvalidInput(_))));
        assert!(BoundingBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        let line = bx(0.0, 0.0, 0.0, 10.0);
        assert_eq!(box_iou(&line, &line).unwrap(), 0.0);
        assert_eq!(box_iou(&line, &bx(0.0, 0.0, 5.0, 5.0)).unwrap(), 0.0);
    }

    #[test]
    fn new_swaps_corners() {
        let b = bx(10.0, 20.0, 0.0, 5.0);
        assert_eq!(b.coords(), [0.0, 5.0, 10.0, 20.0]);
    }

    #[test]
    fn l1_examples() {
        let gt = GeometricAnswer::from_box(bx(0.0, 0.0, 10.0, 10.0));
        let opts = L1Options::default();
        assert_eq!(prompt_l1(&gt, &gt, &opts).unwrap(), 0.0);

        let shifted = GeometricAnswer::from_box(bx(4.0, 0.0, 14.0, 10.0));
        assert_eq!(prompt_l1(&shifted, &gt, &opts).unwrap(), 2.0);

        let gt_pt = GeometricAnswer {
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            points: vec![Point { x: 5.0, y: 5.0 }],
        };
        let pred_pt = GeometricAnswer {
            bbox: bx(1.0, 1.0, 11.0, 11.0),
            points: vec![Point { x: 7.0, y: 7.0 }],
        };
        // per-coordinate: 1,1,1,1 on the box and 2,2 on the point
        let oracle = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0].iter().sum::<f64>() / 6.0;
        assert!((prompt_l1(&pred_pt, &gt_pt, &opts).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l1_point_pairing_rules() {
        let gt = GeometricAnswer {
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            points: vec![Point { x: 1.0, y: 1.0 }, Point { x: 2.0, y: 2.0 }],
        };
        let pred = GeometricAnswer {
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            points: vec![Point { x: 1.0, y: 1.0 }],
        };
        assert!(prompt_l1(&pred, &gt, &L1Options::default()).is_err());

        let image = ImageSize::new(30, 40).unwrap();
        let opts = L1Options::for_image(image);
        // 4 box coords + 2 matched + 2 unmatched, unmatched each off by 50
        let got = prompt_l1(&pred, &gt, &opts).unwrap();
        assert!((got - 100.0 / 8.0).abs() < 1e-12);

        let sum = L1Options {
            aggregation: L1Aggregation::Sum,
            ..opts
        };
        assert_eq!(prompt_l1(&pred, &gt, &sum).unwrap(), 100.0);

        let box_only = L1Options {
            include_points: false,
            ..L1Options::default()
        };
        assert_eq!(prompt_l1(&pred, &gt, &box_only).unwrap(), 0.0);
    }

    #[test]
    fn boxes_deserialize_from_arrays() {
        let b: BoundingBox = serde_json::from_str("[3, 4, 1, 2]").unwrap();
        assert_eq!(b.coords(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    fn arb_answer(points: usize) -> impl Strategy<Value = GeometricAnswer> {
        (
            arb_box(),
            proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64), points),
        )
            .prop_map(|(bbox, pts)| GeometricAnswer {
                bbox,
                points: pts.into_iter().map(|(x, y)| Point { x, y }).collect(),
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b).unwrap();
            let ba = box_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn l1_is_a_metric(a in arb_answer(2), b in arb_answer(2), c in arb_answer(2)) {
            let o = L1Options::default();
            prop_assert_eq!(prompt_l1(&a, &a, &o).unwrap(), 0.0);
            let ab = prompt_l1(&a, &b, &o).unwrap();
            let bc = prompt_l1(&b, &c, &o).unwrap();
            let ac = prompt_l1(&a, &c, &o).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
