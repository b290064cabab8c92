//! Axis-aligned boxes with IoU and center/log-size deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixels, `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x_min, r.y_min, r.x_max, r.y_max]
    }
}

impl Rect {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression target `(dx, dy, dw, dh)` taking `proposal` onto `target`.
pub fn encode_deltas(proposal: &Rect, target: &Rect) -> Result<[f64; 4]> {
    for (name, r) in [("proposal", proposal), ("target", target)] {
        if !r.is_valid() {
            return Err(Error::contract(format!("degenerate {name} box {r:?}")));
        }
    }
    let (px, py) = proposal.center();
    let (gx, gy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    Ok([
        (gx - px) / pw,
        (gy - py) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ])
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(proposal: &Rect, deltas: [f64; 4]) -> Rect {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * deltas[2].exp();
    let h = ph * deltas[3].exp();
    Rect::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = Rect::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        let b = Rect::new(10.0, 0.0, 20.0, 10.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn deltas_round_trip() {
        let p = Rect::new(10.0, 20.0, 50.0, 60.0);
        let g = Rect::new(12.0, 18.0, 58.0, 70.0);
        let d = encode_deltas(&p, &g).unwrap();
        let back = decode_deltas(&p, d);
        for (x, y) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(g).iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(encode_deltas(&p, &p).unwrap(), [0.0; 4]);
    }

    #[test]
    fn zero_area_target_rejected() {
        let p = Rect::new(0.0, 0.0, 1.0, 1.0);
        assert!(encode_deltas(&p, &Rect::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }
}
