//! Brute-force reference implementations shared by the property and
//! acceptance suites. Each one recomputes a library result by a different
//! route.
#![allow(dead_code)]

use wsol::eval::BBox;

/// IoU by counting the pixels each box covers on a `size`×`size` grid.
pub fn raster_iou(a: &BBox, b: &BBox, size: usize) -> f64 {
    let inside = |bx: &BBox, x: usize, y: usize| x >= bx.x0 && x < bx.x1 && y >= bx.y0 && y < bx.y1;
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Largest 4-connected component by union-find. Ties go to the component
/// whose earliest cell comes first in raster order.
pub fn union_find_box(mask: &[bool], w: usize, h: usize) -> Option<BBox> {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut size = vec![0usize; mask.len()];
    for (i, &on) in mask.iter().enumerate() {
        if on {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    // the root is always the smallest index of its component
    let mut best: Option<usize> = None;
    for r in 0..mask.len() {
        if size[r] > 0 && best.is_none_or(|b| size[r] > size[b]) {
            best = Some(r);
        }
    }
    let root = best?;
    let cells: Vec<bool> = (0..mask.len()).map(|i| mask[i] && find(&mut parent, i) == root).collect();
    BBox::bounding(&cells, w)
}

/// Per-cell reading of the binary erase rule.
pub fn erase_binary_cell(f: f64, t1: f64) -> f64 {
    if f >= t1 { 0.0 } else { 1.0 }
}

/// Per-cell reading of the soft erase rule.
pub fn erase_soft_cell(f: f64, t2: f64) -> f64 {
    if f >= t2 { 0.0 } else { f }
}

/// Per-cell pseudo labels: (foreground, background).
pub fn pseudo_cell(f: f64, t3: f64, t4: f64) -> (bool, bool) {
    (f >= t3, f <= t4)
}
