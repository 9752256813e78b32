//! Synthetic scenes: coloured rectangles painted over a background grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Knobs for [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneKnobs {
    pub height: usize,
    pub width: usize,
    /// Palette size including the background id 0.
    pub palette: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        Self { height: 8, width: 8, palette: 6, min_objects: 1, max_objects: 4, min_side: 2, max_side: 5 }
    }
}

impl SceneKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("data.height", "grid extents must be positive"));
        }
        if self.palette < 2 {
            return Err(Error::config("data.palette", "need background plus at least one colour"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("data.min_objects", "exceeds data.max_objects"));
        }
        if self.max_objects > self.palette - 1 {
            return Err(Error::config("data.max_objects", "objects use distinct colours; at most palette - 1"));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.height.max(self.width) {
            return Err(Error::config("data.min_side", "side range must satisfy 1 <= min <= max <= grid extent"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Axis-aligned rectangle with inclusive corners `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub top_left: (usize, usize),
    pub bottom_right: (usize, usize),
}

impl SceneObject {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top_left.0 && r <= self.bottom_right.0 && c >= self.top_left.1 && c <= self.bottom_right.1
    }

    pub fn area(&self) -> usize {
        (self.bottom_right.0 - self.top_left.0 + 1) * (self.bottom_right.1 - self.top_left.1 + 1)
    }
}

/// Intersection-over-union of two inclusive rectangles.
pub fn iou(a: ((usize, usize), (usize, usize)), b: ((usize, usize), (usize, usize))) -> f64 {
    let r0 = a.0 .0.max(b.0 .0);
    let c0 = a.0 .1.max(b.0 .1);
    let r1 = a.1 .0.min(b.1 .0);
    let c1 = a.1 .1.min(b.1 .1);
    let inter = if r0 <= r1 && c0 <= c1 { (r1 - r0 + 1) * (c1 - c0 + 1) } else { 0 };
    let area = |x: ((usize, usize), (usize, usize))| (x.1 .0 - x.0 .0 + 1) * (x.1 .1 - x.0 .1 + 1);
    let union = area(a) + area(b) - inter;
    inter as f64 / union as f64
}

/// Latent scene from which the image and every condition are derived.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub palette: usize,
    /// Row-major palette ids.
    pub grid: Vec<usize>,
    /// Painted in order; later objects overwrite earlier ones.
    pub objects: Vec<SceneObject>,
    /// Most frequent non-background palette id (ties to the lowest id), 0 if none.
    pub global_attribute: usize,
}

impl SceneSpec {
    pub fn from_objects(height: usize, width: usize, palette: usize, objects: Vec<SceneObject>) -> Result<Self> {
        for o in &objects {
            if o.category == 0 || o.category >= palette {
                return Err(Error::Index { what: "object category".into(), index: o.category, size: palette });
            }
            if o.top_left.0 > o.bottom_right.0
                || o.top_left.1 > o.bottom_right.1
                || o.bottom_right.0 >= height
                || o.bottom_right.1 >= width
            {
                return Err(Error::contract(format!("object {o:?} outside {height}x{width} grid")));
            }
        }
        let grid = render(height, width, &objects);
        let global_attribute = dominant_colour(&grid, palette);
        Ok(Self { height, width, palette, grid, objects, global_attribute })
    }

    pub fn cell(&self, r: usize, c: usize) -> usize {
        self.grid[r * self.width + c]
    }
}

/// Background plus ordered objects.
pub fn render(height: usize, width: usize, objects: &[SceneObject]) -> Vec<usize> {
    let mut grid = vec![0; height * width];
    for o in objects {
        for r in o.top_left.0..=o.bottom_right.0 {
            for c in o.top_left.1..=o.bottom_right.1 {
                grid[r * width + c] = o.category;
            }
        }
    }
    grid
}

pub fn dominant_colour(grid: &[usize], palette: usize) -> usize {
    let mut counts = vec![0usize; palette];
    for &v in grid {
        counts[v] += 1;
    }
    let mut best = 0;
    for (id, &n) in counts.iter().enumerate().skip(1) {
        if n > 0 && (best == 0 || n > counts[best]) {
            best = id;
        }
    }
    best
}

/// Cells of `colour` reachable from `start` through 4-neighbours.
pub fn component(grid: &[usize], height: usize, width: usize, start: usize) -> Vec<usize> {
    let colour = grid[start];
    let mut seen = vec![false; grid.len()];
    let mut stack = vec![start];
    let mut out = Vec::new();
    seen[start] = true;
    while let Some(i) = stack.pop() {
        out.push(i);
        let (r, c) = (i / width, i % width);
        let mut push = |j: usize| {
            if !seen[j] && grid[j] == colour {
                seen[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            push(i - width);
        }
        if r + 1 < height {
            push(i + width);
        }
        if c > 0 {
            push(i - 1);
        }
        if c + 1 < width {
            push(i + 1);
        }
    }
    out
}

/// Inclusive bounding box of a set of cell indices.
pub fn bounding_box(cells: &[usize], width: usize) -> ((usize, usize), (usize, usize)) {
    let mut tl = (usize::MAX, usize::MAX);
    let mut br = (0, 0);
    for &i in cells {
        let (r, c) = (i / width, i % width);
        tl = (tl.0.min(r), tl.1.min(c));
        br = (br.0.max(r), br.1.max(c));
    }
    (tl, br)
}

/// Every object's visible cells form one 4-connected region whose bounding
/// box overlaps the object's rectangle with IoU >= 0.5.
fn objects_legible(height: usize, width: usize, objects: &[SceneObject]) -> bool {
    let grid = render(height, width, objects);
    objects.iter().all(|o| {
        let visible: Vec<usize> = (0..grid.len())
            .filter(|&i| grid[i] == o.category && o.contains(i / width, i % width))
            .collect();
        let Some(&first) = visible.first() else { return false };
        let comp = component(&grid, height, width, first);
        comp.len() == visible.len() && iou(bounding_box(&comp, width), (o.top_left, o.bottom_right)) >= 0.5
    })
}

const PLACEMENT_ATTEMPTS: usize = 24;

/// Draws a scene with distinct object colours; placements that would make an
/// earlier object illegible are resampled, and dropped after repeated failure.
pub fn generate_scene(rng: &mut RngState, knobs: &SceneKnobs) -> Result<SceneSpec> {
    knobs.validate()?;
    let n = rng.range_inclusive(knobs.min_objects, knobs.max_objects);
    let mut colours: Vec<usize> = (1..knobs.palette).collect();
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let category = colours.swap_remove(rng.below(colours.len()));
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = rng.range_inclusive(knobs.min_side, knobs.max_side.min(knobs.height));
            let w = rng.range_inclusive(knobs.min_side, knobs.max_side.min(knobs.width));
            let r = rng.below(knobs.height - h + 1);
            let c = rng.below(knobs.width - w + 1);
            let obj = SceneObject { category, top_left: (r, c), bottom_right: (r + h - 1, c + w - 1) };
            objects.push(obj);
            if objects_legible(knobs.height, knobs.width, &objects) {
                break;
            }
            objects.pop();
        }
    }
    SceneSpec::from_objects(knobs.height, knobs.width, knobs.palette, objects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_is_uniform_background() {
        let knobs = SceneKnobs { min_objects: 0, max_objects: 0, ..Default::default() };
        let s = generate_scene(&mut RngState::new(1), &knobs).unwrap();
        assert!(s.grid.iter().all(|&v| v == 0));
        assert_eq!(s.global_attribute, 0);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let knobs = SceneKnobs::default();
        let a = generate_scene(&mut RngState::new(99), &knobs).unwrap();
        let b = generate_scene(&mut RngState::new(99), &knobs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_reconstructs_from_objects() {
        let knobs = SceneKnobs::default();
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let s = generate_scene(&mut rng, &knobs).unwrap();
            assert_eq!(render(s.height, s.width, &s.objects), s.grid);
            assert!(objects_legible(s.height, s.width, &s.objects));
            for o in &s.objects {
                assert!(o.bottom_right.0 < s.height && o.bottom_right.1 < s.width);
            }
        }
    }

    #[test]
    fn later_objects_overwrite() {
        let objs = vec![
            SceneObject { category: 1, top_left: (0, 0), bottom_right: (3, 3) },
            SceneObject { category: 2, top_left: (2, 2), bottom_right: (4, 4) },
        ];
        let s = SceneSpec::from_objects(5, 5, 3, objs).unwrap();
        assert_eq!(s.cell(2, 2), 2);
        assert_eq!(s.cell(0, 0), 1);
        assert_eq!(s.global_attribute, 1);
    }

    #[test]
    fn every_colour_is_dominant_often_enough() {
        let knobs = SceneKnobs::default();
        let mut rng = RngState::new(2024);
        let mut counts = vec![0usize; knobs.palette];
        let n = 10_000;
        for _ in 0..n {
            counts[generate_scene(&mut rng, &knobs).unwrap().global_attribute] += 1;
        }
        for (id, &c) in counts.iter().enumerate().skip(1) {
            assert!(c as f64 / n as f64 >= 0.02, "colour {id} dominant in only {c} of {n}");
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(((0, 0), (1, 1)), ((0, 0), (1, 1))), 1.0);
        assert_eq!(iou(((0, 0), (0, 0)), ((1, 1), (1, 1))), 0.0);
        assert!((iou(((0, 0), (1, 1)), ((0, 0), (1, 3))) - 0.5).abs() < 1e-12);
    }
}
