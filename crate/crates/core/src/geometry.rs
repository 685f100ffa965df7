//! Equirectangular viewport geometry: periodic distances, tile grids,
//! viewport masks and the IoU accuracy metric.
//!
//! The horizontal axis wraps at the frame width. The vertical axis is
//! clamped at the poles when building tile masks, while [`wrap_distance`]
//! keeps the periodic form on both axes because the training loss is
//! defined that way.

use serde::{Deserialize, Serialize};

use crate::Error;

/// Centre of a viewport in pixel coordinates of the equirectangular frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportPoint {
    pub x: f64,
    pub y: f64,
}

impl ViewportPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Builds a point from `[0, 1)` normalised coordinates.
    pub fn from_normalized(xn: f64, yn: f64, grid: &TileGrid) -> Self {
        Self {
            x: xn * grid.video_width,
            y: yn * grid.video_height,
        }
    }

    pub fn normalized(&self, grid: &TileGrid) -> (f64, f64) {
        (self.x / grid.video_width, self.y / grid.video_height)
    }

    pub fn is_valid(&self, grid: &TileGrid) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && (0.0..grid.video_width).contains(&self.x)
            && (0.0..grid.video_height).contains(&self.y)
    }

    /// Reduces `x` modulo the frame width and clamps `y` into the frame.
    pub fn reduced(&self, grid: &TileGrid) -> Self {
        let mut x = self.x.rem_euclid(grid.video_width);
        if x >= grid.video_width {
            x = 0.0;
        }
        let y = self.y.clamp(0.0, prev_float(grid.video_height));
        Self { x, y }
    }
}

fn prev_float(v: f64) -> f64 {
    f64::from_bits(v.to_bits() - 1)
}

/// Ordered viewport samples at a fixed sampling interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<ViewportPoint>,
    pub timestep: f64,
}

impl Trajectory {
    pub fn new(points: Vec<ViewportPoint>, timestep: f64) -> Result<Self, Error> {
        if points.is_empty() {
            return Err(Error::InvalidInput("trajectory must not be empty".into()));
        }
        Ok(Self { points, timestep })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Spatial tiling of the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub video_width: f64,
    pub video_height: f64,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            video_width: 3840.0,
            video_height: 1920.0,
        }
    }
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize, video_width: f64, video_height: f64) -> Result<Self, Error> {
        if rows == 0 || cols == 0 || video_width <= 0.0 || video_height <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid tile grid {rows}x{cols} over {video_width}x{video_height}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            video_width,
            video_height,
        })
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tile_width(&self) -> f64 {
        self.video_width / self.cols as f64
    }

    pub fn tile_height(&self) -> f64 {
        self.video_height / self.rows as f64
    }

    pub fn tile_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.tile_width(),
            (row as f64 + 0.5) * self.tile_height(),
        )
    }

    /// `(row, col)` of the cell containing a point (after reduction).
    pub fn cell_of(&self, p: &ViewportPoint) -> (usize, usize) {
        let p = p.reduced(self);
        let col = ((p.x / self.tile_width()) as usize).min(self.cols - 1);
        let row = ((p.y / self.tile_height()) as usize).min(self.rows - 1);
        (row, col)
    }

    fn same_shape(&self, other: &TileGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Angular extent of the headset view as a fraction of the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub width_fraction: f64,
    pub height_fraction: f64,
}

impl Default for FieldOfView {
    fn default() -> Self {
        Self {
            width_fraction: 0.33,
            height_fraction: 0.33,
        }
    }
}

impl FieldOfView {
    pub fn new(width_fraction: f64, height_fraction: f64) -> Result<Self, Error> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(width_fraction) || !ok(height_fraction) {
            return Err(Error::InvalidInput(format!(
                "field of view fractions must lie in (0, 1], got ({width_fraction}, {height_fraction})"
            )));
        }
        Ok(Self {
            width_fraction,
            height_fraction,
        })
    }
}

/// Row-major boolean mask over the tiles of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMask {
    grid: TileGrid,
    bits: Vec<bool>,
}

impl TileMask {
    pub fn empty(grid: TileGrid) -> Self {
        Self {
            grid,
            bits: vec![false; grid.tile_count()],
        }
    }

    pub fn full(grid: TileGrid) -> Self {
        Self {
            grid,
            bits: vec![true; grid.tile_count()],
        }
    }

    pub fn from_bits(grid: TileGrid, bits: Vec<bool>) -> Result<Self, Error> {
        if bits.len() != grid.tile_count() {
            return Err(Error::Shape(format!(
                "mask has {} bits for a {}x{} grid",
                bits.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.grid.cols + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &TileMask) -> Result<(), Error> {
        check_same_grid(self, other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn check_same_grid(a: &TileMask, b: &TileMask) -> Result<(), Error> {
    if !a.grid.same_shape(&b.grid) {
        return Err(Error::GridMismatch {
            left: (a.grid.rows, a.grid.cols),
            right: (b.grid.rows, b.grid.cols),
        });
    }
    Ok(())
}

/// Smallest of `|a − b|`, `|a + period − b|`, `|a − period − b|`.
pub fn axis_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = a - b;
    d.abs().min((d + period).abs()).min((d - period).abs())
}

/// Periodic squared distance between a predicted and a true viewport:
/// `(dx² + dy²) / 2` with per-axis wrap-around.
pub fn wrap_distance(v: &ViewportPoint, v_hat: &ViewportPoint, grid: &TileGrid) -> f64 {
    let dx = axis_distance(v.x, v_hat.x, grid.video_width);
    let dy = axis_distance(v.y, v_hat.y, grid.video_height);
    (dx * dx + dy * dy) / 2.0
}

/// Tiles whose centre lies inside the field-of-view rectangle around
/// `center`. The rectangle wraps horizontally and is shifted back inside
/// the frame vertically. The tile containing `center` is always included.
pub fn viewport_tile_mask(center: &ViewportPoint, fov: &FieldOfView, grid: &TileGrid) -> TileMask {
    let c = center.reduced(grid);
    let half_w = fov.width_fraction * grid.video_width / 2.0;
    let span_h = fov.height_fraction * grid.video_height;
    let mut top = c.y - span_h / 2.0;
    let mut bottom = c.y + span_h / 2.0;
    if top < 0.0 {
        top = 0.0;
        bottom = span_h;
    } else if bottom > grid.video_height {
        bottom = grid.video_height;
        top = grid.video_height - span_h;
    }

    let mut mask = TileMask::empty(*grid);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (cx, cy) = grid.tile_center(row, col);
            let dx = axis_distance(cx, c.x, grid.video_width);
            if dx <= half_w && cy >= top && cy <= bottom {
                mask.set(row, col, true);
            }
        }
    }
    let (row, col) = grid.cell_of(&c);
    mask.set(row, col, true);
    mask
}

/// Intersection over union of two masks; 1 when both are empty.
pub fn iou(a: &TileMask, b: &TileMask) -> Result<f64, Error> {
    check_same_grid(a, b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: f64, h: f64) -> TileGrid {
        TileGrid::new(8, 8, w, h).unwrap()
    }

    #[test]
    fn wrap_distance_hand_cases() {
        let g = grid(100.0, 50.0);
        let p = ViewportPoint::new(10.0, 25.0);
        assert_eq!(wrap_distance(&p, &p, &g), 0.0);
        assert_eq!(wrap_distance(&p, &ViewportPoint::new(90.0, 25.0), &g), 200.0);
        let a = ViewportPoint::new(10.0, 5.0);
        let b = ViewportPoint::new(90.0, 45.0);
        assert_eq!(wrap_distance(&a, &b, &g), 250.0);
    }

    #[test]
    fn full_fov_marks_every_tile() {
        let g = TileGrid::default();
        let fov = FieldOfView::new(1.0, 1.0).unwrap();
        for &(x, y) in &[(0.0, 0.0), (1000.0, 1900.0), (3839.0, 960.0)] {
            let m = viewport_tile_mask(&ViewportPoint::new(x, y), &fov, &g);
            assert_eq!(m.count(), 64);
        }
    }

    #[test]
    fn degenerate_fov_marks_only_the_containing_cell() {
        let g = grid(800.0, 800.0);
        let fov = FieldOfView::new(1e-9, 1e-9).unwrap();
        let m = viewport_tile_mask(&ViewportPoint::new(333.0, 712.0), &fov, &g);
        assert_eq!(m.count(), 1);
        assert!(m.get(7, 3));
    }

    #[test]
    fn quarter_fov_at_center_is_a_two_by_two_block() {
        let g = grid(800.0, 800.0);
        let fov = FieldOfView::new(0.25, 0.25).unwrap();
        let m = viewport_tile_mask(&ViewportPoint::new(400.0, 400.0), &fov, &g);
        let on: Vec<(usize, usize)> = (0..8)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c))
            .collect();
        assert_eq!(on, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
    }

    #[test]
    fn iou_hand_cases() {
        let g = grid(800.0, 800.0);
        let mk = |idx: &[usize]| {
            let mut bits = vec![false; 64];
            for &i in idx {
                bits[i] = true;
            }
            TileMask::from_bits(g, bits).unwrap()
        };
        let a = mk(&[0, 1, 2, 3]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mk(&[10, 11])).unwrap(), 0.0);
        let b = mk(&[2, 3, 4, 5]);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(iou(&mk(&[]), &mk(&[])).unwrap(), 1.0);
    }

    #[test]
    fn iou_rejects_mismatched_grids() {
        let a = TileMask::empty(TileGrid::new(8, 8, 100.0, 100.0).unwrap());
        let b = TileMask::empty(TileGrid::new(4, 8, 100.0, 100.0).unwrap());
        assert!(matches!(iou(&a, &b), Err(Error::GridMismatch { .. })));
    }

    fn point() -> impl Strategy<Value = ViewportPoint> {
        (0.0..100.0f64, 0.0..50.0f64).prop_map(|(x, y)| ViewportPoint::new(x, y))
    }

    proptest! {
        #[test]
        fn wrap_distance_is_symmetric_and_bounded(u in point(), v in point()) {
            let g = grid(100.0, 50.0);
            prop_assert_eq!(wrap_distance(&u, &v, &g), wrap_distance(&v, &u, &g));
            prop_assert!(axis_distance(u.x, v.x, 100.0) <= 50.0);
            prop_assert!(axis_distance(u.y, v.y, 50.0) <= 25.0);
            prop_assert_eq!(wrap_distance(&u, &v, &g) == 0.0, u == v);
        }

        #[test]
        fn mask_is_invariant_to_a_full_horizontal_turn(
            x in 0.0..3840.0f64, y in 0.0..1920.0f64,
            fw in 0.05..1.0f64, fh in 0.05..1.0f64,
        ) {
            let g = TileGrid::default();
            let fov = FieldOfView::new(fw, fh).unwrap();
            let a = viewport_tile_mask(&ViewportPoint::new(x, y), &fov, &g);
            // Rounding in x + W can only matter exactly on a rectangle edge.
            let b = viewport_tile_mask(&ViewportPoint::new(x + 3840.0, y), &fov, &g);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 64),
                                        b in prop::collection::vec(any::<bool>(), 64)) {
            let g = TileGrid::default();
            let ma = TileMask::from_bits(g, a).unwrap();
            let mb = TileMask::from_bits(g, b).unwrap();
            let ab = iou(&ma, &mb).unwrap();
            prop_assert_eq!(ab, iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, ma == mb);
        }
    }
}
