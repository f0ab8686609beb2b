use super::sim::Pose;
use super::world::{ObservationConfig, TargetSpec, WorldMap, WALL_HEIGHT};

/// Row-major RGB8 frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// CHW float tensor data in [0, 1] — the policy input layout.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0f32; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.pixels[p * 3 + c] as f32 / 255.0;
            }
        }
        out
    }

    /// Binary PPM (P6) encoding: header then raw RGB — bit-exact by design.
    pub fn ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.ppm_bytes())
    }

    /// Parses the binary PPM (P6) subset written by [`Image::ppm_bytes`]:
    /// whitespace-separated header tokens, maxval 255, no comments.
    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, super::world::WorldError> {
        use super::world::WorldError;
        let bad = |msg: &str| WorldError::BadFile(format!("ppm: {msg}"));
        let mut pos = 0usize;
        let mut token = || -> Result<&[u8], WorldError> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(&bytes[start..pos])
        };
        if token()? != b"P6" {
            return Err(bad("not a P6 file"));
        }
        let parse = |t: &[u8]| -> Result<usize, WorldError> {
            std::str::from_utf8(t)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad("bad header number"))
        };
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        if parse(token()?)? != 255 {
            return Err(bad("maxval must be 255"));
        }
        // Exactly one whitespace byte separates the header from the pixels.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(bad("missing pixel separator"));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let data = &bytes[pos..];
        if data.len() != need {
            return Err(bad(&format!("expected {need} pixel bytes, found {}", data.len())));
        }
        Ok(Image { width, height, pixels: data.to_vec() })
    }

    pub fn read_ppm(path: &std::path::Path) -> Result<Self, super::world::WorldError> {
        Self::from_ppm_bytes(&std::fs::read(path)?)
    }
}

/// Egocentric RGB render of the world from `pose`.
///
/// Conventions (fixed; these are the documented rounding rules):
/// * Pixel centers sit at half-integer coordinates: column `px` is sampled
///   at `px + 0.5`, row `r` covers centers in `[r, r+1)`.
/// * Focal length `f = (width/2) / tan(hfov/2)` in pixels.
/// * Per column, one ray `forward + u·right` with
///   `u = (px + 0.5 − width/2) / f`; the ray parameter of a hit equals the
///   perpendicular (forward-axis) depth `t`, so there is no fisheye.
/// * Wall band rows: centers within
///   `[h/2 − f·(wall_height − cam)/t, h/2 + f·cam/t)`; ceiling above, floor
///   below. Raising the camera shifts the whole band (and the horizon) down.
/// * Walls shade with distance by `1/(1 + 0.15·t)`, quantized with
///   `f64::round`. The target disc is drawn unshaded so its color is exact.
/// * The target is a billboard disc of the configured color standing on the
///   floor (center height = its radius), depth-tested per column against the
///   wall it might hide behind.
pub fn render(world: &WorldMap, pose: Pose, target: &TargetSpec, obs: &ObservationConfig) -> Image {
    render_impl(world, pose, target, obs).0
}

/// Number of target-disc pixels visible from `pose` (drawn after the depth
/// test). Zero means the target is fully occluded, behind the camera, or out
/// of frame.
pub fn target_visibility(
    world: &WorldMap,
    pose: Pose,
    target: &TargetSpec,
    obs: &ObservationConfig,
) -> usize {
    render_impl(world, pose, target, obs).1
}

fn render_impl(
    world: &WorldMap,
    pose: Pose,
    target: &TargetSpec,
    obs: &ObservationConfig,
) -> (Image, usize) {
    let (w, h) = (obs.image_width, obs.image_height);
    let mut img = Image::filled(w, h, world.ceiling_color);
    let f = (w as f64 / 2.0) / (obs.hfov / 2.0).tan();
    let (fx, fy) = pose.forward();
    let (rx, ry) = pose.right();
    let half_h = h as f64 / 2.0;

    // Per-column perpendicular wall depth, for target occlusion.
    let mut depth = vec![f64::INFINITY; w];

    for px in 0..w {
        let u = (px as f64 + 0.5 - w as f64 / 2.0) / f;
        let (dx, dy) = (fx + u * rx, fy + u * ry);
        let mut t_hit = f64::INFINITY;
        let mut hit_color = [0u8; 3];
        for wall in &world.walls {
            if let Some(t) = ray_segment(pose.x, pose.y, dx, dy, wall.ax, wall.ay, wall.bx, wall.by)
            {
                if t < t_hit {
                    t_hit = t;
                    hit_color = wall.color;
                }
            }
        }
        depth[px] = t_hit;

        // Wall band rows from the pinhole projection at depth t.
        let (row_top, row_bot) = if t_hit.is_finite() {
            let y_top = half_h - f * (WALL_HEIGHT - obs.camera_height) / t_hit;
            let y_bot = half_h + f * obs.camera_height / t_hit;
            (ceil_row(y_top), ceil_row(y_bot))
        } else {
            // open ray (cannot happen with closed bounds): horizon split
            let hor = ceil_row(half_h);
            (hor, hor)
        };

        let shade = 1.0 / (1.0 + 0.15 * t_hit.min(1e12));
        let wall_rgb = shade_color(hit_color, shade);
        for r in 0..h {
            let r_i = r as i64;
            if r_i < row_top {
                img.put(px, r, world.ceiling_color);
            } else if r_i < row_bot {
                img.put(px, r, wall_rgb);
            } else {
                img.put(px, r, world.floor_color);
            }
        }
    }

    // Target billboard disc, depth-tested per column.
    let mut visible = 0usize;
    let relx = target.x - pose.x;
    let rely = target.y - pose.y;
    let tz = relx * fx + rely * fy; // forward depth
    if tz > 0.05 {
        let lx = relx * rx + rely * ry;
        let cx_f = w as f64 / 2.0 + f * lx / tz;
        let cy_f = half_h + f * (obs.camera_height - target.radius) / tz;
        let rad_px = f * target.radius / tz;

        let px_lo = ceil_row(cx_f - rad_px).max(0);
        let px_hi = ceil_row(cx_f + rad_px).min(w as i64);
        for px in px_lo..px_hi {
            if tz >= depth[px as usize] {
                continue; // behind the wall in this column
            }
            let off = (px as f64 + 0.5) - cx_f;
            let chord = rad_px * rad_px - off * off;
            if chord <= 0.0 {
                continue;
            }
            let half = chord.sqrt();
            let r_lo = ceil_row(cy_f - half).max(0);
            let r_hi = ceil_row(cy_f + half).min(h as i64);
            for r in r_lo..r_hi {
                img.put(px as usize, r as usize, obs.target_color);
                visible += 1;
            }
        }
    }

    (img, visible)
}

/// First row whose center `r + 0.5` is ≥ y, i.e. `ceil(y − 0.5)`.
fn ceil_row(y: f64) -> i64 {
    (y - 0.5).ceil() as i64
}

fn shade_color(c: [u8; 3], shade: f64) -> [u8; 3] {
    [
        (c[0] as f64 * shade).round() as u8,
        (c[1] as f64 * shade).round() as u8,
        (c[2] as f64 * shade).round() as u8,
    ]
}

/// Ray/segment intersection parameter along the ray, or None.
#[allow(clippy::too_many_arguments)]
fn ray_segment(px: f64, py: f64, dx: f64, dy: f64, ax: f64, ay: f64, bx: f64, by: f64) -> Option<f64> {
    let (ux, uy) = (bx - ax, by - ay);
    let det = dx * uy - dy * ux;
    if det.abs() < 1e-15 {
        return None; // parallel
    }
    // Solve p + t·d = a + s·u by Cramer's rule on
    //   t·dx − s·ux = wx,  t·dy − s·uy = wy.
    let (wx, wy) = (ax - px, ay - py);
    let t = (wx * uy - wy * ux) / det; // along ray
    let s = (wx * dy - wy * dx) / det; // along segment
    if t > 1e-9 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

/// Fixed-geometry "card" image of the target's appearance: the configured
/// target color as a centered disc over a neutral background. Used to give a
/// policy an explicit embedding of what it is looking for.
pub fn render_target_card(obs: &ObservationConfig) -> Image {
    let (w, h) = (obs.image_width, obs.image_height);
    let mut img = Image::filled(w, h, [128, 128, 128]);
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let rad = (w.min(h) as f64) / 4.0;
    for px in 0..w {
        for r in 0..h {
            let ox = (px as f64 + 0.5) - cx;
            let oy = (r as f64 + 0.5) - cy;
            if ox * ox + oy * oy <= rad * rad {
                img.put(px, r, obs.target_color);
            }
        }
    }
    img
}
