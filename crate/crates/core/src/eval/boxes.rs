use std::collections::VecDeque;
use std::fmt;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Axis-aligned box in half-open pixel coordinates: it covers columns
/// `x0..x1` and rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 < x1 && y0 < y1 {
            Ok(BBox { x0, y0, x1, y1 })
        } else {
            Err(Error::Contract(format!("degenerate box ({x0},{y0},{x1},{y1})")))
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Tight box around the `true` cells of a `width`-wide mask.
    pub fn bounding(mask: &[bool], width: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            b = Some(match b {
                None => BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
        b
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Intersection over union with pixel-area semantics; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Default binarization fraction for [`extract_box`].
pub const DEFAULT_THETA: f64 = 0.45;

/// Box around the largest 4-connected region of `heatmap >= theta * max`.
///
/// Size ties go to the region found first in raster order. `heatmap` is a
/// single plane shaped `[H,W]`, `[1,H,W]` or `[1,1,H,W]`.
pub fn extract_box(heatmap: &Tensor, theta: f64) -> Result<BBox> {
    let (h, w) = match heatmap.shape() {
        &[h, w] | &[1, h, w] | &[1, 1, h, w] => (h, w),
        s => return Err(Error::Dimension(format!("extract_box needs a single plane, got {s:?}"))),
    };
    let max = heatmap.max();
    if !(max > 0.0) {
        return Err(Error::Contract("extract_box: heatmap has no positive value".into()));
    }
    let cut = theta * max;
    let mask: Vec<bool> = heatmap.data().iter().map(|&v| v >= cut).collect();
    largest_component(&mask, w, h)
        .ok_or_else(|| Error::Contract(format!("extract_box: nothing survives theta = {theta}")))
}

/// Bounding box of the largest 4-connected `true` region of a `w`×`h` mask.
pub fn largest_component(mask: &[bool], w: usize, h: usize) -> Option<BBox> {
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let mut best: Option<(usize, BBox)> = None;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.as_ref().is_none_or(|(s, _)| size > *s) {
            best = Some((size, BBox { x0, y0, x1, y1 }));
        }
    }
    best.map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5, 5, 15, 15)), 25.0 / 175.0);
        assert_eq!(iou(&a, &bx(10, 0, 12, 10)), 0.0);
        assert_eq!(iou(&a, &bx(20, 20, 30, 30)), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 4, 2, 1).is_err());
    }

    fn plane(h: usize, w: usize, cells: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros([1, h, w]);
        for &(x, y) in cells {
            t.data_mut()[y * w + x] = 1.0;
        }
        t
    }

    #[test]
    fn extract_box_examples() {
        let mut t = Tensor::zeros([1, 8, 10]);
        for y in 2..5 {
            for x in 3..9 {
                t.data_mut()[y * 10 + x] = 1.0;
            }
        }
        assert_eq!(extract_box(&t, 0.5).unwrap(), bx(3, 2, 9, 5));

        // a 4-cell block first in raster order, then a 9-cell block
        let mut cells = vec![(0, 0), (1, 0), (0, 1), (1, 1)];
        for y in 4..7 {
            for x in 4..7 {
                cells.push((x, y));
            }
        }
        assert_eq!(extract_box(&plane(8, 8, &cells), 0.5).unwrap(), bx(4, 4, 7, 7));

        let c = Tensor::full([1, 5, 7], 0.3);
        assert_eq!(extract_box(&c, 0.45).unwrap(), bx(0, 0, 7, 5));
        assert_eq!(extract_box(&c, 1.0).unwrap(), bx(0, 0, 7, 5));
    }

    #[test]
    fn ties_go_to_first_component_in_raster_order() {
        let t = plane(4, 6, &[(4, 0), (5, 0), (0, 3), (1, 3)]);
        assert_eq!(extract_box(&t, 0.5).unwrap(), bx(4, 0, 6, 1));
    }

    #[test]
    fn diagonal_cells_are_not_connected() {
        let t = plane(3, 3, &[(0, 0), (1, 1), (2, 2), (2, 1)]);
        assert_eq!(extract_box(&t, 0.5).unwrap(), bx(1, 1, 3, 3));
    }

    #[test]
    fn empty_binarization_is_an_error() {
        let t = plane(3, 3, &[(1, 1)]);
        assert!(matches!(extract_box(&t, 1.5), Err(Error::Contract(_))));
        assert!(matches!(extract_box(&Tensor::zeros([1, 3, 3]), 0.5), Err(Error::Contract(_))));
    }
}
