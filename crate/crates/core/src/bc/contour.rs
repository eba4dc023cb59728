//! Outer boundary of the dominant blob.

use crate::grid::Grid;

/// Cells strictly above this value are foreground.
pub const BINARIZE_THRESHOLD: f64 = 0.2;

/// Closed boundary as `[x, y]` pixel centers in clockwise order
/// (image coordinates, y pointing down). The closing segment back to the
/// first point is implicit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Contour {
    pub points: Vec<[f64; 2]>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Length of the closed polyline.
    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                (b[0] - a[0]).hypot(b[1] - a[1])
            })
            .sum()
    }
}

// Clockwise starting from west: W, NW, N, NE, E, SE, S, SW as (dy, dx).
const DIRS: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

fn dir_index(dy: isize, dx: isize) -> usize {
    DIRS.iter().position(|&d| d == (dy, dx)).expect("offset is a unit neighbor")
}

/// Labels of the largest 8-connected foreground component (no wrap-around).
/// Ties go to the component found first in raster order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<Vec<bool>> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut stack = Vec::new();
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in DIRS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    best.map(|(id, _)| label.iter().map(|&l| l == id).collect())
}

/// Binarizes at [`BINARIZE_THRESHOLD`], keeps the largest component and
/// traces its outer boundary with Moore-neighbor tracing.
pub fn extract_contour(o: &Grid) -> Contour {
    let (h, w) = o.shape();
    let mask: Vec<bool> = o.values().iter().map(|&v| v > BINARIZE_THRESHOLD).collect();
    let Some(blob) = largest_component(&mask, h, w) else {
        return Contour::default();
    };
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && blob[y as usize * w + x as usize]
    };
    let first = blob.iter().position(|&b| b).expect("component is non-empty");
    let start = ((first / w) as isize, (first % w) as isize);

    let mut points = vec![start];
    let mut current = start;
    // Direction from the current pixel to the background pixel we entered from.
    let mut back = 0usize;
    let limit = 4 * h * w + 8;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let cand = (current.0 + DIRS[d].0, current.1 + DIRS[d].1);
            if inside(cand.0, cand.1) {
                let prev = (back + k - 1) % 8;
                let prev_px = (current.0 + DIRS[prev].0, current.1 + DIRS[prev].1);
                found = Some((cand, dir_index(prev_px.0 - cand.0, prev_px.1 - cand.1)));
                break;
            }
        }
        let Some((next, next_back)) = found else {
            break; // isolated pixel
        };
        if current == start && points.len() > 1 && next == points[1] {
            break;
        }
        points.push(next);
        current = next;
        back = next_back;
    }
    if points.len() > 1 && points.last() == Some(&start) {
        points.pop();
    }
    Contour { points: points.into_iter().map(|(y, x)| [x as f64, y as f64]).collect() }
}
