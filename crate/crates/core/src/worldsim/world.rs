use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grid::OccupancyGrid;

/// Walls are extruded to this height; the renderer and the camera-height
/// config both assume it.
pub const WALL_HEIGHT: f64 = 2.5;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("wall segment ({0:.2},{1:.2})-({2:.2},{3:.2}) is not axis-aligned")]
    NotAxisAligned(f64, f64, f64, f64),
    #[error("wall segment ({0:.2},{1:.2})-({2:.2},{3:.2}) extends outside bounds")]
    WallOutsideBounds(f64, f64, f64, f64),
    #[error("free space is disconnected (seed {seed})")]
    Disconnected { seed: u64 },
    #[error("generation failed after {attempts} attempts (seed {seed})")]
    GenerationFailed { seed: u64, attempts: u32 },
    #[error("point ({0:.3}, {1:.3}) is inside a wall")]
    PointInWall(f64, f64),
    #[error("invalid world file: {0}")]
    BadFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

/// Axis-aligned wall segment with zero thickness; collision dilates it by
/// the agent radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
    pub color: Rgb,
}

impl WallSegment {
    pub fn new(ax: f64, ay: f64, bx: f64, by: f64, color: Rgb) -> Self {
        Self { ax, ay, bx, by, color }
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.ax == self.bx || self.ay == self.by
    }

    /// Euclidean distance from a point to this segment.
    pub fn distance_to_point(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.bx - self.ax, self.by - self.ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - self.ax) * dx + (y - self.ay) * dy) / len2).clamp(0.0, 1.0)
        };
        let (px, py) = (self.ax + t * dx, self.ay + t * dy);
        (x - px).hypot(y - py)
    }
}

/// The navigation target: a colored ball resting on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub x: f64,
    pub y: f64,
    /// Render radius of the ball in meters.
    pub radius: f64,
    pub color: Rgb,
}

impl TargetSpec {
    pub fn new(x: f64, y: f64, color: Rgb) -> Self {
        Self { x, y, radius: 0.15, color }
    }
}

/// Everything that parameterizes the observation function: where the camera
/// sits and what the target looks like. Two agents in the same world with
/// different configs see systematically different images of the same state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub camera_height: f64,
    pub target_color: Rgb,
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal field of view in radians.
    pub hfov: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            camera_height: 1.25,
            target_color: [220, 30, 30],
            image_width: 64,
            image_height: 48,
            hfov: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let ok = self.camera_height > 0.0
            && self.camera_height < WALL_HEIGHT
            && self.image_width >= 16
            && self.image_height >= 16
            && self.hfov > 0.0
            && self.hfov < std::f64::consts::PI;
        if ok {
            Ok(())
        } else {
            Err(WorldError::BadFile(format!("invalid observation config: {self:?}")))
        }
    }
}

/// Immutable world: bounds, walls, colors, and the derived occupancy grid.
#[derive(Debug, Clone)]
pub struct WorldMap {
    pub bounds: Rect,
    pub walls: Vec<WallSegment>,
    pub floor_color: Rgb,
    pub ceiling_color: Rgb,
    pub seed: u64,
    occupancy: OccupancyGrid,
}

impl WorldMap {
    /// Validate the wall list and derive the occupancy grid.
    pub fn new(
        bounds: Rect,
        walls: Vec<WallSegment>,
        floor_color: Rgb,
        ceiling_color: Rgb,
        seed: u64,
    ) -> Result<Self, WorldError> {
        for w in &walls {
            if !w.is_axis_aligned() {
                return Err(WorldError::NotAxisAligned(w.ax, w.ay, w.bx, w.by));
            }
            let inside = bounds.contains(w.ax, w.ay) && bounds.contains(w.bx, w.by);
            if !inside {
                return Err(WorldError::WallOutsideBounds(w.ax, w.ay, w.bx, w.by));
            }
        }
        let occupancy = OccupancyGrid::build(&bounds, &walls);
        if !occupancy.free_space_connected() {
            return Err(WorldError::Disconnected { seed });
        }
        Ok(Self { bounds, walls, floor_color, ceiling_color, seed, occupancy })
    }

    pub fn occupancy(&self) -> &OccupancyGrid {
        &self.occupancy
    }

    /// Exact distance from a point to the nearest wall segment.
    pub fn wall_distance(&self, x: f64, y: f64) -> f64 {
        self.walls
            .iter()
            .map(|w| w.distance_to_point(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    /// A point is free when an agent disc centered there touches no wall and
    /// its occupancy cell is clear (the grid is the conservative authority).
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        self.bounds.contains(x, y)
            && self.occupancy.cell_is_free_at(x, y)
            && self.wall_distance(x, y) > super::sim::AGENT_RADIUS
    }

    /// Shortest-path distance on the occupancy grid (8-connected). Returns
    /// `f64::INFINITY` when the endpoints are not connected.
    pub fn geodesic_distance(&self, ax: f64, ay: f64, bx: f64, by: f64) -> Result<f64, WorldError> {
        self.occupancy.geodesic(ax, ay, bx, by)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), WorldError> {
        let file = WorldFile {
            version: WORLD_FILE_VERSION,
            bounds: self.bounds,
            walls: self.walls.clone(),
            floor_color: self.floor_color,
            ceiling_color: self.ceiling_color,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)?;
        let file: WorldFile = serde_json::from_str(&text)?;
        if file.version != WORLD_FILE_VERSION {
            return Err(WorldError::BadFile(format!(
                "world file version {} (supported: {WORLD_FILE_VERSION})",
                file.version
            )));
        }
        Self::new(file.bounds, file.walls, file.floor_color, file.ceiling_color, file.seed)
    }

    /// Structural fingerprint for inequality checks in tests and manifests.
    pub fn structural_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for w in &self.walls {
            w.ax.to_bits().hash(&mut h);
            w.ay.to_bits().hash(&mut h);
            w.bx.to_bits().hash(&mut h);
            w.by.to_bits().hash(&mut h);
            w.color.hash(&mut h);
        }
        self.bounds.min_x.to_bits().hash(&mut h);
        self.bounds.max_x.to_bits().hash(&mut h);
        self.bounds.min_y.to_bits().hash(&mut h);
        self.bounds.max_y.to_bits().hash(&mut h);
        h.finish()
    }
}

const WORLD_FILE_VERSION: u32 = 1;

/// On-disk form: geometry only, occupancy is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    bounds: Rect,
    walls: Vec<WallSegment>,
    floor_color: Rgb,
    ceiling_color: Rgb,
    seed: u64,
}

/// Floor-plan generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub width: f64,
    pub height: f64,
    /// Number of rooms (1 = empty rectangle). Interior walls = rooms − 1.
    pub rooms: u32,
    /// Minimum door gap width in meters.
    pub min_door: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { width: 8.0, height: 8.0, rooms: 3, min_door: 0.8 }
    }
}

/// Deterministic multi-room floor plan: `rooms − 1` alternating splitter
/// walls, each pierced by one door gap, so free space stays connected by
/// construction. Connectivity is still verified; a failing layout retries
/// with a derived seed.
pub fn generate_world(seed: u64, params: &GenParams) -> Result<WorldMap, WorldError> {
    const MAX_ATTEMPTS: u32 = 32;
    for attempt in 0..MAX_ATTEMPTS {
        let attempt_seed = seed.wrapping_add((attempt as u64) << 32);
        match try_generate(seed, attempt_seed, params) {
            Ok(world) => return Ok(world),
            Err(WorldError::Disconnected { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(WorldError::GenerationFailed { seed, attempts: MAX_ATTEMPTS })
}

fn try_generate(seed: u64, attempt_seed: u64, params: &GenParams) -> Result<WorldMap, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed ^ 0x5742_4c44_u64);
    let bounds = Rect { min_x: 0.0, min_y: 0.0, max_x: params.width, max_y: params.height };

    let mut walls = Vec::new();
    let boundary_color = gray(&mut rng, 150, 40);
    walls.push(WallSegment::new(bounds.min_x, bounds.min_y, bounds.max_x, bounds.min_y, boundary_color));
    walls.push(WallSegment::new(bounds.max_x, bounds.min_y, bounds.max_x, bounds.max_y, boundary_color));
    walls.push(WallSegment::new(bounds.max_x, bounds.max_y, bounds.min_x, bounds.max_y, boundary_color));
    walls.push(WallSegment::new(bounds.min_x, bounds.max_y, bounds.min_x, bounds.min_y, boundary_color));

    // Recursive splitting: each interior wall divides one existing room and
    // spans only that room, so splitters never cross and every split leaves
    // the two halves joined through the door gap. A room must be roomy
    // enough to split on both axes; if nothing qualifies the plan simply
    // ends with fewer rooms.
    let mut rooms: Vec<Rect> = vec![bounds];
    let interior = params.rooms.saturating_sub(1);
    for _ in 0..interior {
        let splittable = |r: &Rect| {
            r.width().max(r.height()) >= 2.0
                && r.width().min(r.height()) >= params.min_door + 0.8
        };
        let Some(idx) = rooms
            .iter()
            .enumerate()
            .filter(|(_, r)| splittable(r))
            .max_by(|a, b| {
                (a.1.width() * a.1.height())
                    .partial_cmp(&(b.1.width() * b.1.height()))
                    .unwrap()
            })
            .map(|(i, _)| i)
        else {
            break;
        };
        let room = rooms.swap_remove(idx);
        let vertical = room.width() >= room.height();
        let color = gray(&mut rng, 120, 50);
        let frac = 0.3 + 0.4 * rng.gen::<f64>();
        let door_w = params.min_door + rng.gen::<f64>() * 0.6;
        if vertical {
            let x = room.min_x + frac * room.width();
            let span = (room.height() - door_w).max(0.0);
            let door_lo = room.min_y + rng.gen::<f64>() * span;
            push_split_wall(&mut walls, true, x, room.min_y, room.max_y, door_lo, door_w, color);
            rooms.push(Rect { max_x: x, ..room });
            rooms.push(Rect { min_x: x, ..room });
        } else {
            let y = room.min_y + frac * room.height();
            let span = (room.width() - door_w).max(0.0);
            let door_lo = room.min_x + rng.gen::<f64>() * span;
            push_split_wall(&mut walls, false, y, room.min_x, room.max_x, door_lo, door_w, color);
            rooms.push(Rect { max_y: y, ..room });
            rooms.push(Rect { min_y: y, ..room });
        }
    }

    let floor = gray(&mut rng, 70, 25);
    let ceiling = gray(&mut rng, 210, 25);
    WorldMap::new(bounds, walls, floor, ceiling, seed)
}

/// One splitter wall with a door gap, emitted as up to two segments.
#[allow(clippy::too_many_arguments)]
fn push_split_wall(
    walls: &mut Vec<WallSegment>,
    vertical: bool,
    at: f64,
    lo: f64,
    hi: f64,
    door_lo: f64,
    door_w: f64,
    color: Rgb,
) {
    let door_hi = door_lo + door_w;
    let min_piece = 0.05;
    if door_lo - lo > min_piece {
        if vertical {
            walls.push(WallSegment::new(at, lo, at, door_lo, color));
        } else {
            walls.push(WallSegment::new(lo, at, door_lo, at, color));
        }
    }
    if hi - door_hi > min_piece {
        if vertical {
            walls.push(WallSegment::new(at, door_hi, at, hi, color));
        } else {
            walls.push(WallSegment::new(door_hi, at, hi, at, color));
        }
    }
}

fn gray(rng: &mut ChaCha8Rng, base: i32, spread: i32) -> Rgb {
    let v = (base + rng.gen_range(-spread..=spread)).clamp(0, 255) as u8;
    // a slight warm tint keeps walls distinguishable from pure-gray floors
    let r = v.saturating_add(rng.gen_range(0..12));
    [r, v, v]
}
