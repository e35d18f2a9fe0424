//! Axis-aligned boxes in normalized image coordinates. Nothing here clips to
//! the unit square.

use crate::error::{Error, Result};

/// Center/size box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box with `x0 ≤ x1` and `y0 ≤ y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCXCYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite box ({cx}, {cy}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Domain(format!("box extent must be positive, got w={w} h={h}")));
        }
        Ok(BoxCXCYWH { cx, cy, w, h })
    }

    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) || x0 > x1 || y0 > y1 {
            return Err(Error::Domain(format!("invalid corner box ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(BoxXYXY { x0, y0, x1, y1 })
    }

    pub fn to_cxcywh(&self) -> BoxCXCYWH {
        BoxCXCYWH {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn intersection(&self, other: &BoxXYXY) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    fn hull(&self, other: &BoxXYXY) -> f64 {
        (self.x1.max(other.x1) - self.x0.min(other.x0)) * (self.y1.max(other.y1) - self.y0.min(other.y0))
    }
}

pub fn to_xyxy(b: BoxCXCYWH) -> BoxXYXY {
    b.to_xyxy()
}

pub fn to_cxcywh(b: BoxXYXY) -> BoxCXCYWH {
    b.to_cxcywh()
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou − (hull − union)/hull`. Two coincident points give 0.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b);
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}

pub fn l1_box(a: &BoxCXCYWH, b: &BoxCXCYWH) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xy(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXYXY {
        BoxXYXY::new(x0, y0, x1, y1).unwrap()
    }

    fn cw(cx: f64, cy: f64, w: f64, h: f64) -> BoxCXCYWH {
        BoxCXCYWH::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn conversions() {
        assert_eq!(cw(0.5, 0.5, 1.0, 1.0).to_xyxy(), xy(0.0, 0.0, 1.0, 1.0));
        assert_eq!(cw(0.25, 0.25, 0.5, 0.5).to_xyxy(), xy(0.0, 0.0, 0.5, 0.5));
        let b = cw(0.31, 0.77, 0.12, 0.4);
        let back = b.to_xyxy().to_cxcywh();
        for (x, y) in b.as_array().iter().zip(back.as_array()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn validation() {
        assert!(BoxCXCYWH::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoxCXCYWH::new(0.5, f64::NAN, 0.1, 0.1).is_err());
        assert!(BoxXYXY::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = xy(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &xy(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert_eq!(iou(&xy(0.0, 0.0, 2.0, 2.0), &xy(1.0, 1.0, 2.0, 2.0)), 0.25);
    }

    #[test]
    fn giou_examples() {
        let a = xy(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &xy(1.0, 1.0, 2.0, 2.0)) + 0.5).abs() < 1e-15);
        assert!((giou(&a, &xy(2.0, 2.0, 3.0, 3.0)) + 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let p = xy(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
        let q = xy(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&p, &q), 0.0);
        assert!((giou(&p, &q) + 1.0).abs() < 1e-15);
        let unit = xy(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &q), 0.0);
        assert!(giou(&unit, &q).is_finite());
    }

    #[test]
    fn l1_examples() {
        let a = cw(0.5, 0.5, 0.2, 0.2);
        let b = cw(0.6, 0.5, 0.2, 0.2);
        assert_eq!(l1_box(&a, &a), 0.0);
        assert!((l1_box(&a, &b) - 0.1).abs() < 1e-15);
        assert_eq!(l1_box(&a, &b), l1_box(&b, &a));
    }
}
