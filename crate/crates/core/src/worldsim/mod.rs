//! Navigable 2D worlds and their observation machinery.
//!
//! A world is a rectangle of free space partitioned by axis-aligned wall
//! segments into rooms connected through door gaps. Everything downstream —
//! collision, rendering, geodesic distance — is a pure function of the
//! immutable [`WorldMap`], so worlds can be shared freely across rollout
//! workers.

mod grid;
mod render;
mod sim;
mod world;

pub use grid::{GridCost, OccupancyGrid, GRID_RESOLUTION};
pub use render::{render, render_target_card, target_visibility, Image};
pub use sim::{
    reward, sample_episode, step, Action, Episode, EpisodeSpec, Pose, RewardConfig, StepOutcome,
    AGENT_RADIUS, MOVE_STEP, TURN_ANGLE,
};
pub use world::{
    generate_world, GenParams, ObservationConfig, Rect, Rgb, TargetSpec, WallSegment, WorldError,
    WorldMap, WALL_HEIGHT,
};
