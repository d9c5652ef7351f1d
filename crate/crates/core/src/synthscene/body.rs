use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::camera::{CameraModel, RigidTransform};
use crate::{Error, Result};

/// Motion below this (element-wise on `R - I` and `t`) counts as identity.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Planar primitive in the body's local plane coordinates (world units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Disc { radius: f64 },
    Rectangle { half_w: f64, half_h: f64, angle: f64 },
    Triangle { vertices: [[f64; 2]; 3] },
}

impl Primitive {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Primitive::Disc { radius } => u * u + v * v <= radius * radius,
            Primitive::Rectangle { half_w, half_h, angle } => {
                let (s, c) = angle.sin_cos();
                let lu = c * u + s * v;
                let lv = -s * u + c * v;
                lu.abs() <= half_w && lv.abs() <= half_h
            }
            Primitive::Triangle { vertices: [a, b, c] } => {
                let edge = |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]);
                let (d0, d1, d2) = (edge(a, b), edge(b, c), edge(c, a));
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Disc { radius } => radius > 0.0,
            Primitive::Rectangle { half_w, half_h, .. } => half_w > 0.0 && half_h > 0.0,
            Primitive::Triangle { vertices: [a, b, c] } => {
                ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("degenerate primitive {self:?}")))
        }
    }
}

/// Extra part of a composite body. Its motion is about the body centroid and
/// replaces (does not compose with) the body motion for the limb's pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limb {
    pub primitive: Primitive,
    /// Offset of the limb frame from the body centre, world units.
    pub offset: [f64; 2],
    pub motion: RigidTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub core: Primitive,
    #[serde(default)]
    pub limbs: Vec<Limb>,
}

impl Shape {
    pub fn simple(core: Primitive) -> Self {
        Self { core, limbs: Vec::new() }
    }

    pub fn kind(&self) -> ShapeKind {
        if !self.limbs.is_empty() {
            return ShapeKind::Composite;
        }
        match self.core {
            Primitive::Disc { .. } => ShapeKind::Disc,
            Primitive::Rectangle { .. } => ShapeKind::Rectangle,
            Primitive::Triangle { .. } => ShapeKind::Triangle,
        }
    }
}

/// A planar, fronto-parallel (in frame 1) textured body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    /// Instance id, `>= 1`; 0 is background.
    pub id: u16,
    pub shape: Shape,
    pub texture_seed: u64,
    /// Frame-1 depth of the body plane.
    pub depth: f64,
    /// Frame-1 pixel position of the body centre.
    pub center_px: [f64; 2],
    /// Motion of the core part about the body centroid, world frame.
    pub motion: RigidTransform,
    /// Semantic class could move.
    pub movable: bool,
    /// Some part's motion is non-identity.
    pub moving: bool,
    #[serde(default)]
    pub group_id: Option<u32>,
}

impl RigidBody {
    pub fn centroid(&self, camera: &CameraModel) -> Point3<f64> {
        camera.back_project(self.center_px[0], self.center_px[1], self.depth)
    }

    /// Number of rigid parts: the core plus every limb.
    pub fn n_parts(&self) -> usize {
        1 + self.shape.limbs.len()
    }

    /// Motion of part `part` (0 = core).
    pub fn part_motion(&self, part: usize) -> &RigidTransform {
        if part == 0 {
            &self.motion
        } else {
            &self.shape.limbs[part - 1].motion
        }
    }

    pub fn part_primitive(&self, part: usize) -> (&Primitive, [f64; 2]) {
        if part == 0 {
            (&self.shape.core, [0.0, 0.0])
        } else {
            let limb = &self.shape.limbs[part - 1];
            (&limb.primitive, limb.offset)
        }
    }

    /// True when any part's motion differs from identity.
    pub fn has_motion(&self) -> bool {
        (0..self.n_parts()).any(|p| !self.part_motion(p).is_identity(IDENTITY_TOL))
    }

    /// Only some of the parts move.
    pub fn is_part_motion(&self) -> bool {
        let moving_parts = (0..self.n_parts()).filter(|&p| !self.part_motion(p).is_identity(IDENTITY_TOL)).count();
        moving_parts > 0 && moving_parts < self.n_parts()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id == 0 {
            return Err(Error::InvalidSpec("body id 0 is reserved for background".into()));
        }
        if !(self.depth > 0.0) || !self.depth.is_finite() {
            return Err(Error::InvalidSpec(format!("body {} has non-positive depth {}", self.id, self.depth)));
        }
        self.shape.core.validate()?;
        for limb in &self.shape.limbs {
            limb.primitive.validate()?;
        }
        for p in 0..self.n_parts() {
            if !self.part_motion(p).is_proper_rotation(1e-6) {
                return Err(Error::InvalidSpec(format!("body {} part {p} rotation is not proper", self.id)));
            }
        }
        if self.moving != self.has_motion() {
            return Err(Error::InvalidSpec(format!(
                "body {} moving flag {} disagrees with its motion",
                self.id, self.moving
            )));
        }
        if self.moving && !self.movable {
            return Err(Error::InvalidSpec(format!("body {} moves but is not movable", self.id)));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Two-octave bilinear value noise in `[0, 1]`.
pub fn value_noise(seed: u64, u: f64, v: f64, cell: f64) -> f64 {
    let octave = |s: u64, scale: f64| {
        let (x, y) = (u / scale, v / scale);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = lattice(s, ix, iy);
        let b = lattice(s, ix + 1, iy);
        let c = lattice(s, ix, iy + 1);
        let d = lattice(s, ix + 1, iy + 1);
        let top = a + (b - a) * sx;
        let bot = c + (d - c) * sx;
        top + (bot - top) * sy
    };
    (0.65 * octave(seed, cell) + 0.35 * octave(splitmix(seed), cell * 0.5)).clamp(0.0, 1.0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Surface appearance for one textured region.
#[derive(Clone, Copy, Debug)]
pub struct Palette {
    seed: u64,
    base: [f64; 3],
    accent: [f64; 3],
    cell: f64,
}

impl Palette {
    /// Movable classes get saturated warm hues, static structures desaturated
    /// cool ones; the appearance stream can learn the split from colour alone.
    pub fn for_body(body: &RigidBody) -> Self {
        let seed = body.texture_seed;
        let r = |k: u64| lattice(seed, k as i64, 7);
        let (base, accent) = if body.movable {
            let hue = -0.08 + 0.22 * r(1);
            (hsv(hue, 0.75 + 0.2 * r(2), 0.75 + 0.2 * r(3)), hsv(hue + 0.05, 0.9, 0.35 + 0.2 * r(4)))
        } else {
            let hue = 0.5 + 0.15 * r(1);
            (hsv(hue, 0.1 + 0.15 * r(2), 0.45 + 0.2 * r(3)), hsv(hue, 0.2, 0.2 + 0.15 * r(4)))
        };
        Self { seed, base, accent, cell: body.depth * 0.04 }
    }

    pub fn background(seed: u64) -> Self {
        Self { seed, base: [0.42, 0.5, 0.36], accent: [0.2, 0.24, 0.18], cell: 0.6 }
    }

    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let n = value_noise(self.seed, u, v, self.cell);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.base[c] * (1.0 - n) + self.accent[c] * n).clamp(0.0, 1.0);
        }
        out
    }
}
