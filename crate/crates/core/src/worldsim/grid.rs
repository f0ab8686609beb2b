use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::sim::AGENT_RADIUS;
use super::world::{Rect, WallSegment, WorldError};

/// Occupancy cell edge length in meters.
pub const GRID_RESOLUTION: f64 = 0.05;

/// Path cost on the grid as exact move counts: `axis` straight moves plus
/// `diag` diagonal moves, i.e. a length of `(axis + diag·√2) · resolution`.
///
/// Comparing costs through the counts instead of accumulated floats makes
/// Dijkstra's result independent of visit order: two different
/// implementations must agree bit-for-bit on the final distance because they
/// must agree on the (unique) minimal count pair — `a + b√2 = c + d√2` forces
/// `a = c, b = d` for integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCost {
    pub axis: u32,
    pub diag: u32,
}

impl GridCost {
    pub const ZERO: GridCost = GridCost { axis: 0, diag: 0 };

    pub fn step_axis(self) -> Self {
        Self { axis: self.axis + 1, diag: self.diag }
    }

    pub fn step_diag(self) -> Self {
        Self { axis: self.axis, diag: self.diag + 1 }
    }

    /// Exact value comparison of `axis + diag·√2` without floats.
    fn cmp_exact(&self, other: &Self) -> Ordering {
        let da = self.axis as i128 - other.axis as i128;
        let db = self.diag as i128 - other.diag as i128;
        // sign of da + db·√2
        match (da.signum(), db.signum()) {
            (0, 0) => Ordering::Equal,
            (a, b) if a >= 0 && b >= 0 => Ordering::Greater, // not both zero here
            (a, b) if a <= 0 && b <= 0 => Ordering::Less,
            _ => {
                // opposite signs: compare da² vs 2·db², carrying da's sign
                let lhs = da * da;
                let rhs = 2 * db * db;
                if da > 0 {
                    lhs.cmp(&rhs) // da vs −db·√2 with both positive
                } else {
                    rhs.cmp(&lhs)
                }
            }
        }
    }

    /// Metric length in meters. This expression is the documented rounding
    /// rule: a single fused conversion from exact counts.
    pub fn meters(&self) -> f64 {
        self.axis as f64 * GRID_RESOLUTION
            + self.diag as f64 * (std::f64::consts::SQRT_2 * GRID_RESOLUTION)
    }
}

impl PartialOrd for GridCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GridCost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_exact(other)
    }
}

/// Boolean occupancy over the world bounds at [`GRID_RESOLUTION`].
///
/// A cell is occupied exactly when its square lies within [`AGENT_RADIUS`] of
/// some wall segment, so "free cell" means an agent disc centered anywhere in
/// the cell interior cannot overlap that wall by more than a cell diagonal.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    min_x: f64,
    min_y: f64,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn build(bounds: &Rect, walls: &[WallSegment]) -> Self {
        let width = (bounds.width() / GRID_RESOLUTION).round() as usize;
        let height = (bounds.height() / GRID_RESOLUTION).round() as usize;
        let mut occupied = vec![false; width * height];
        for cy in 0..height {
            for cx in 0..width {
                let x0 = bounds.min_x + cx as f64 * GRID_RESOLUTION;
                let y0 = bounds.min_y + cy as f64 * GRID_RESOLUTION;
                let x1 = x0 + GRID_RESOLUTION;
                let y1 = y0 + GRID_RESOLUTION;
                let near = walls
                    .iter()
                    .any(|w| segment_aabb_distance(w, x0, y0, x1, y1) <= AGENT_RADIUS);
                if near {
                    occupied[cy * width + cx] = true;
                }
            }
        }
        Self { width, height, min_x: bounds.min_x, min_y: bounds.min_y, occupied }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_occupied(&self, cx: usize, cy: usize) -> bool {
        self.occupied[cy * self.width + cx]
    }

    /// Cell index of a point, clamped onto the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x - self.min_x) / GRID_RESOLUTION).floor() as isize;
        let cy = ((y - self.min_y) / GRID_RESOLUTION).floor() as isize;
        (
            cx.clamp(0, self.width as isize - 1) as usize,
            cy.clamp(0, self.height as isize - 1) as usize,
        )
    }

    pub fn cell_is_free_at(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.cell_of(x, y);
        !self.is_occupied(cx, cy)
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        (
            self.min_x + (cx as f64 + 0.5) * GRID_RESOLUTION,
            self.min_y + (cy as f64 + 0.5) * GRID_RESOLUTION,
        )
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |cy| {
            (0..self.width).filter_map(move |cx| (!self.is_occupied(cx, cy)).then_some((cx, cy)))
        })
    }

    /// All free cells form one 4-connected component.
    pub fn free_space_connected(&self) -> bool {
        let total_free = self.occupied.iter().filter(|&&o| !o).count();
        if total_free == 0 {
            return false;
        }
        let start = match self.free_cells().next() {
            Some(c) => c,
            None => return false,
        };
        let mut seen = vec![false; self.width * self.height];
        let mut stack = vec![start];
        seen[start.1 * self.width + start.0] = true;
        let mut count = 0;
        while let Some((cx, cy)) = stack.pop() {
            count += 1;
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let nx = cx as i64 + dx;
                let ny = cy as i64 + dy;
                if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let idx = ny * self.width + nx;
                if !seen[idx] && !self.occupied[idx] {
                    seen[idx] = true;
                    stack.push((nx, ny));
                }
            }
        }
        count == total_free
    }

    /// Exact-cost Dijkstra between the cells containing the two points.
    ///
    /// Moves are 8-connected with straight cost `resolution` and diagonal
    /// cost `resolution·√2`; a diagonal move requires both adjacent straight
    /// cells to be free (no corner cutting). Returns `f64::INFINITY` when the
    /// endpoints are in different components.
    pub fn geodesic(&self, ax: f64, ay: f64, bx: f64, by: f64) -> Result<f64, WorldError> {
        Ok(self.geodesic_cost(ax, ay, bx, by)?.map_or(f64::INFINITY, |c| c.meters()))
    }

    /// Like [`OccupancyGrid::geodesic`] but exposing the exact count pair.
    pub fn geodesic_cost(
        &self,
        ax: f64,
        ay: f64,
        bx: f64,
        by: f64,
    ) -> Result<Option<GridCost>, WorldError> {
        let start = self.cell_of(ax, ay);
        let goal = self.cell_of(bx, by);
        if self.is_occupied(start.0, start.1) {
            return Err(WorldError::PointInWall(ax, ay));
        }
        if self.is_occupied(goal.0, goal.1) {
            return Err(WorldError::PointInWall(bx, by));
        }
        if start == goal {
            return Ok(Some(GridCost::ZERO));
        }

        #[derive(PartialEq, Eq)]
        struct Entry {
            cost: GridCost,
            cell: (usize, usize),
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                // min-heap by cost; cell index breaks ties deterministically
                other
                    .cost
                    .cmp(&self.cost)
                    .then_with(|| other.cell.cmp(&self.cell))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let idx = |c: (usize, usize)| c.1 * self.width + c.0;
        let mut best: Vec<Option<GridCost>> = vec![None; self.width * self.height];
        let mut heap = BinaryHeap::new();
        best[idx(start)] = Some(GridCost::ZERO);
        heap.push(Entry { cost: GridCost::ZERO, cell: start });

        while let Some(Entry { cost, cell }) = heap.pop() {
            if cell == goal {
                return Ok(Some(cost));
            }
            if best[idx(cell)].map_or(false, |b| b < cost) {
                continue;
            }
            let (cx, cy) = (cell.0 as i64, cell.1 as i64);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (cx + dx, cy + dy);
                    if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
                        continue;
                    }
                    let ncell = (nx as usize, ny as usize);
                    if self.is_occupied(ncell.0, ncell.1) {
                        continue;
                    }
                    let diagonal = dx != 0 && dy != 0;
                    if diagonal {
                        // both orthogonal neighbors must be free
                        let side_a = ((cx + dx) as usize, cy as usize);
                        let side_b = (cx as usize, (cy + dy) as usize);
                        if self.is_occupied(side_a.0, side_a.1) || self.is_occupied(side_b.0, side_b.1)
                        {
                            continue;
                        }
                    }
                    let ncost = if diagonal { cost.step_diag() } else { cost.step_axis() };
                    let slot = &mut best[idx(ncell)];
                    if slot.map_or(true, |b| ncost < b) {
                        *slot = Some(ncost);
                        heap.push(Entry { cost: ncost, cell: ncell });
                    }
                }
            }
        }
        Ok(None)
    }
}

/// Distance between an axis-aligned segment and an axis-aligned box.
fn segment_aabb_distance(w: &WallSegment, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (sx0, sx1) = (w.ax.min(w.bx), w.ax.max(w.bx));
    let (sy0, sy1) = (w.ay.min(w.by), w.ay.max(w.by));
    // gap along each axis between the segment's extent and the box's extent
    let dx = (sx0 - x1).max(x0 - sx1).max(0.0);
    let dy = (sy0 - y1).max(y0 - sy1).max(0.0);
    dx.hypot(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::world::{generate_world, GenParams};

    fn empty_room() -> crate::worldsim::WorldMap {
        generate_world(1, &GenParams { rooms: 1, ..GenParams::default() }).unwrap()
    }

    #[test]
    fn cost_comparison_is_exact() {
        // 5 axis ≈ 3.535 diag·√2... specifically: 3 diag (4.2426) > 4 axis
        let a = GridCost { axis: 4, diag: 0 };
        let b = GridCost { axis: 0, diag: 3 };
        assert!(a < b);
        // 7 axis vs 5 diag: 7 < 7.071
        assert!(GridCost { axis: 7, diag: 0 } < GridCost { axis: 0, diag: 5 });
        // equality only for identical pairs
        assert_eq!(GridCost { axis: 2, diag: 3 }, GridCost { axis: 2, diag: 3 });
        assert_ne!(GridCost { axis: 3, diag: 2 }, GridCost { axis: 2, diag: 3 });
        // mixed signs both ways
        assert!(GridCost { axis: 10, diag: 0 } > GridCost { axis: 0, diag: 7 });
        assert!(GridCost { axis: 0, diag: 7 } < GridCost { axis: 10, diag: 0 });
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let w = empty_room();
        let d = w.geodesic_distance(3.0, 3.0, 3.0, 3.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn straight_line_close_to_euclidean() {
        let w = empty_room();
        // 3-4-5 triangle: grid metric overshoots Euclidean by at most 8.3%
        let d = w.geodesic_distance(1.0, 1.0, 4.0, 5.0).unwrap();
        assert!(d >= 5.0 - 1e-9, "{d}");
        assert!(d <= 5.0 * 1.083, "{d}");
    }

    #[test]
    fn point_in_wall_is_reported() {
        let w = empty_room();
        let err = w.geodesic_distance(0.01, 4.0, 3.0, 3.0).unwrap_err();
        assert!(err.to_string().contains("0.01"));
    }

    #[test]
    fn wall_detour_is_longer_than_euclidean() {
        // multi-room world: crossing a splitter forces a detour through a door
        let w = generate_world(5, &GenParams::default()).unwrap();
        let occ = w.occupancy();
        // pick two distant free cells
        let mut cells = occ.free_cells();
        let (ax, ay) = cells.next().map(|(cx, cy)| occ.cell_center(cx, cy)).unwrap();
        let (bx, by) = occ
            .free_cells()
            .last()
            .map(|(cx, cy)| occ.cell_center(cx, cy))
            .unwrap();
        let d = w.geodesic_distance(ax, ay, bx, by).unwrap();
        let euclid = (ax - bx).hypot(ay - by);
        assert!(d.is_finite());
        assert!(d >= euclid - 1e-9);
    }

    #[test]
    fn connectivity_holds_for_generated_worlds() {
        for seed in 0..30 {
            let w = generate_world(seed, &GenParams::default()).unwrap();
            assert!(w.occupancy().free_space_connected(), "seed {seed}");
        }
    }

    #[test]
    fn boundary_cells_are_occupied() {
        let w = empty_room();
        let occ = w.occupancy();
        // cells along the boundary (dilated by agent radius) are blocked
        assert!(occ.is_occupied(0, 0));
        assert!(occ.is_occupied(occ.width() - 1, occ.height() - 1));
        // two cells = 0.10m from the wall is exactly the dilation edge;
        // the third cell (0.10..0.15m band) must be free
        assert!(!occ.is_occupied(3, occ.height() / 2));
    }
}
