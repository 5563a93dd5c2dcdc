use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self([x1, y1, x2, y2])
    }

    /// Fails unless all coordinates are finite and `x1 < x2`, `y1 < y2`.
    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.0;
        if !self.0.iter().all(|v| v.is_finite()) || x1 >= x2 || y1 >= y2 {
            return Err(input_err(format!("malformed box {:?}", self.0)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.0;
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.0[2].min(other.0[2]) - self.0[0].max(other.0[0]);
        let h = self.0[3].min(other.0[3]) - self.0[1].max(other.0[1]);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Strictly inside, not on the border.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.0;
        x > x1 && x < x2 && y > y1 && y < y2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).validate().is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).validate().is_err());
        assert!(a.contains(1.0, 1.0) && !a.contains(0.0, 1.0));
    }
}
