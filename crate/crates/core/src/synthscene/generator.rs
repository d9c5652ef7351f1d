use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Point3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::body::{Limb, Palette, Primitive, RigidBody, Shape, IDENTITY_TOL};
use super::camera::{CameraModel, RigidTransform, MIN_DEPTH};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyTag {
    Colinear,
    StaticMovable,
    GroupMotion,
    PartMotion,
    None,
}

impl DegeneracyTag {
    pub const ALL: [DegeneracyTag; 5] = [
        DegeneracyTag::Colinear,
        DegeneracyTag::StaticMovable,
        DegeneracyTag::GroupMotion,
        DegeneracyTag::PartMotion,
        DegeneracyTag::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegeneracyTag::Colinear => "colinear",
            DegeneracyTag::StaticMovable => "static_movable",
            DegeneracyTag::GroupMotion => "group_motion",
            DegeneracyTag::PartMotion => "part_motion",
            DegeneracyTag::None => "none",
        }
    }
}

/// Background plane `Z = depth + slope * Y` in frame-1 camera coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub depth: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub texture_seed: Option<u64>,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self { depth: 20.0, slope: 0.0, texture_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraMotion {
    Static,
    Fixed {
        pose: RigidTransform,
    },
    /// Translation magnitude drawn from `translation`, direction uniform on
    /// the sphere with the z component scaled by `forward_weight`; yaw/pitch
    /// rotation up to `max_rotation_deg`.
    Random {
        translation: [f64; 2],
        forward_weight: f64,
        max_rotation_deg: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomLayout {
    /// Movable bodies, inclusive range.
    pub movers: [usize; 2],
    /// Static, non-movable structures, inclusive range.
    pub structures: [usize; 2],
    pub depth: [f64; 2],
    pub radius_px: [f64; 2],
    pub p_moving: f64,
    pub speed_px: [f64; 2],
    pub max_body_rotation_deg: f64,
    /// Per-sample chance of one mover translating along the camera translation.
    pub p_colinear: f64,
    pub p_group: f64,
    pub p_part: f64,
    pub require_static_movable: bool,
}

impl Default for RandomLayout {
    fn default() -> Self {
        Self {
            movers: [1, 4],
            structures: [0, 2],
            depth: [4.0, 12.0],
            radius_px: [7.0, 15.0],
            p_moving: 0.7,
            speed_px: [3.0, 9.0],
            max_body_rotation_deg: 8.0,
            p_colinear: 0.0,
            p_group: 0.0,
            p_part: 0.0,
            require_static_movable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Explicit { bodies: Vec<RigidBody> },
    Random(RandomLayout),
}

/// Everything `generate_scene` needs besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    #[serde(default)]
    pub background: BackgroundSpec,
    pub camera: CameraMotion,
    pub layout: Layout,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            focal: 96.0,
            background: BackgroundSpec::default(),
            camera: CameraMotion::Random { translation: [0.2, 0.8], forward_weight: 0.5, max_rotation_deg: 1.0 },
            layout: Layout::Random(RandomLayout::default()),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidSpec(format!("resolution {}x{} below 32x32", self.height, self.width)));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidSpec(format!("focal must be > 0, got {}", self.focal)));
        }
        if !(self.background.depth > 0.0) {
            return Err(Error::InvalidSpec(format!("background depth must be > 0, got {}", self.background.depth)));
        }
        let max_ray_y = (self.height as f64) / 2.0 / self.focal;
        if self.background.slope.abs() * max_ray_y >= 0.9 {
            return Err(Error::InvalidSpec("background slope makes the plane graze the camera".into()));
        }
        match &self.layout {
            Layout::Explicit { bodies } => {
                let mut ids = BTreeSet::new();
                for b in bodies {
                    b.validate()?;
                    if !ids.insert(b.id) {
                        return Err(Error::InvalidSpec(format!("duplicate body id {}", b.id)));
                    }
                }
            }
            Layout::Random(r) => {
                if r.movers[0] > r.movers[1] || r.structures[0] > r.structures[1] {
                    return Err(Error::InvalidSpec("body count range is inverted".into()));
                }
                if !(r.depth[0] > 0.0) || r.depth[0] > r.depth[1] {
                    return Err(Error::InvalidSpec(format!("bad depth range {:?}", r.depth)));
                }
                if !(r.radius_px[0] > 1.0) || r.radius_px[0] > r.radius_px[1] {
                    return Err(Error::InvalidSpec(format!("bad radius range {:?}", r.radius_px)));
                }
                for (name, p) in [
                    ("p_moving", r.p_moving),
                    ("p_colinear", r.p_colinear),
                    ("p_group", r.p_group),
                    ("p_part", r.p_part),
                ] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidSpec(format!("{name} = {p} outside [0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One two-frame observation with exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// Frames 1 and 2, `H x W x 3` in `[0, 1]`.
    pub frames: [Array3<f32>; 2],
    /// Forward flow frame 1 -> 2, `H x W x 2` pixels.
    pub flow_fwd: Array3<f32>,
    /// False where the moved point falls behind camera 2.
    pub flow_valid: Array2<bool>,
    /// Depth maps of frames 1 and 2.
    pub depth: [Array2<f32>; 2],
    /// Per-pixel rigid motion `(axis-angle, translation)` about the owning
    /// body's centroid, world frame; zero on static geometry.
    pub scene_flow: Array3<f32>,
    /// Instance ids, 0 = background.
    pub instance_masks: Array2<u16>,
    pub motion_labels: BTreeMap<u16, bool>,
    /// Semantic movability of each visible id.
    pub movable: BTreeMap<u16, bool>,
    pub degeneracy_tags: BTreeSet<DegeneracyTag>,
    pub camera: CameraModel,
    pub bodies: Vec<RigidBody>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.instance_masks.nrows()
    }

    pub fn width(&self) -> usize {
        self.instance_masks.ncols()
    }

    /// Binary masks of every instance whose label satisfies `keep`.
    pub fn masks_where(&self, keep: impl Fn(u16) -> bool) -> Vec<(u16, Array2<bool>)> {
        self.motion_labels
            .keys()
            .copied()
            .filter(|&id| keep(id))
            .map(|id| (id, self.instance_masks.mapv(|v| v == id)))
            .collect()
    }

    pub fn moving_masks(&self) -> Vec<(u16, Array2<bool>)> {
        self.masks_where(|id| self.motion_labels[&id])
    }

    pub fn movable_masks(&self) -> Vec<(u16, Array2<bool>)> {
        self.masks_where(|id| self.movable.get(&id).copied().unwrap_or(false))
    }
}

/// Generates a deterministic scene for `(spec, seed)`.
pub fn generate_scene(spec: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera_base = CameraModel::centered(spec.focal, spec.height, spec.width);
    let pose = match &spec.camera {
        CameraMotion::Static => RigidTransform::identity(),
        CameraMotion::Fixed { pose } => pose.clone(),
        CameraMotion::Random { translation, forward_weight, max_rotation_deg } => {
            random_camera_pose(&mut rng, *translation, *forward_weight, *max_rotation_deg)
        }
    };
    let camera = camera_base.with_pose(pose);
    camera.validate()?;
    let bg_seed = spec.background.texture_seed.unwrap_or_else(|| rng.random());

    match &spec.layout {
        Layout::Explicit { bodies } => {
            let sample = render(spec, &camera, bodies.clone(), bg_seed)?;
            check_connected(&sample.instance_masks)?;
            Ok(sample)
        }
        Layout::Random(layout) => {
            const ATTEMPTS: usize = 16;
            for _ in 0..ATTEMPTS {
                let bodies = random_bodies(&mut rng, spec, layout, &camera);
                let sample = render(spec, &camera, bodies, bg_seed)?;
                if check_connected(&sample.instance_masks).is_ok() {
                    return Ok(sample);
                }
            }
            Err(Error::InvalidSpec(format!("no connected layout after {ATTEMPTS} attempts")))
        }
    }
}

fn random_camera_pose(
    rng: &mut ChaCha8Rng,
    translation: [f64; 2],
    forward_weight: f64,
    max_rot_deg: f64,
) -> RigidTransform {
    let mag = rng.random_range(translation[0]..=translation[1]);
    let dir = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break Vector3::new(v.x, v.y, v.z * forward_weight);
        }
    };
    let dir = if dir.norm() > 1e-9 { dir.normalize() } else { Vector3::x() };
    let max_rot = max_rot_deg.to_radians();
    let rot = [rng.random_range(-1.0..=1.0) * max_rot, rng.random_range(-1.0..=1.0) * max_rot, 0.0];
    let t = dir * mag;
    RigidTransform::from_axis_angle(rot, [t.x, t.y, t.z])
}

struct Slot {
    center: [f64; 2],
    radius_px: f64,
}

fn random_bodies(
    rng: &mut ChaCha8Rng,
    spec: &GeneratorConfig,
    layout: &RandomLayout,
    camera: &CameraModel,
) -> Vec<RigidBody> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let n_mov = rng.random_range(layout.movers[0]..=layout.movers[1]);
    let n_struct = rng.random_range(layout.structures[0]..=layout.structures[1]);
    let mut slots: Vec<Slot> = Vec::new();
    let mut bodies: Vec<RigidBody> = Vec::new();

    let place = |rng: &mut ChaCha8Rng, slots: &mut Vec<Slot>| -> Option<Slot> {
        for _ in 0..60 {
            let r = rng.random_range(layout.radius_px[0]..=layout.radius_px[1]);
            if 2.0 * r + 4.0 >= w.min(h) {
                continue;
            }
            let cx = rng.random_range(r + 1.0..w - r - 2.0);
            let cy = rng.random_range(r + 1.0..h - r - 2.0);
            if slots
                .iter()
                .all(|s| ((s.center[0] - cx).powi(2) + (s.center[1] - cy).powi(2)).sqrt() >= s.radius_px + r + 2.0)
            {
                let slot = Slot { center: [cx, cy], radius_px: r };
                slots.push(Slot { center: slot.center, radius_px: slot.radius_px });
                return Some(slot);
            }
        }
        None
    };

    let mut next_id = 1u16;
    let make_body = |rng: &mut ChaCha8Rng, slot: &Slot, movable: bool, next_id: &mut u16| -> RigidBody {
        let depth = rng.random_range(layout.depth[0]..=layout.depth[1]);
        let r_w = slot.radius_px * depth / spec.focal;
        let core = match rng.random_range(0..3) {
            0 => Primitive::Disc { radius: 0.95 * r_w },
            1 => Primitive::Rectangle {
                half_w: rng.random_range(0.5..0.7) * r_w,
                half_h: rng.random_range(0.4..0.65) * r_w,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            _ => {
                let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let vertex = |k: f64| {
                    let a = a0 + k * std::f64::consts::TAU / 3.0;
                    [0.95 * r_w * a.cos(), 0.95 * r_w * a.sin()]
                };
                Primitive::Triangle { vertices: [vertex(0.0), vertex(1.0), vertex(2.0)] }
            }
        };
        let id = *next_id;
        *next_id += 1;
        RigidBody {
            id,
            shape: Shape::simple(core),
            texture_seed: rng.random(),
            depth,
            center_px: slot.center,
            motion: RigidTransform::identity(),
            movable,
            moving: false,
            group_id: None,
        }
    };

    for k in 0..n_mov + n_struct {
        if let Some(slot) = place(rng, &mut slots) {
            bodies.push(make_body(rng, &slot, k < n_mov, &mut next_id));
        }
    }

    let generic_motion = |rng: &mut ChaCha8Rng, depth: f64| -> RigidTransform {
        let speed = rng.random_range(layout.speed_px[0]..=layout.speed_px[1]);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let s = speed * depth / spec.focal;
        let tz = rng.random_range(-0.1..=0.1) * s;
        let rz = rng.random_range(-1.0..=1.0) * layout.max_body_rotation_deg.to_radians();
        RigidTransform::from_axis_angle([0.0, 0.0, rz], [s * phi.cos(), s * phi.sin(), tz])
    };

    // Which movers move at all.
    let mut moving: Vec<bool> = bodies.iter().map(|b| b.movable && rng.random_bool(layout.p_moving)).collect();
    let mut assigned = vec![false; bodies.len()];
    let movable_idx: Vec<usize> = (0..bodies.len()).filter(|&i| bodies[i].movable).collect();
    let cam_t = camera.pose_delta.translation;

    if rng.random_bool(layout.p_colinear) && cam_t.norm() > 1e-9 && !movable_idx.is_empty() {
        let i = movable_idx[rng.random_range(0..movable_idx.len())];
        let z = bodies[i].depth;
        let alpha_max = (1.0 - z / spec.background.depth - 0.05).min(0.7).max(0.25);
        let alpha = rng.random_range(0.2..alpha_max);
        let t = cam_t * alpha;
        bodies[i].motion = RigidTransform::translation([t.x, t.y, t.z]);
        moving[i] = true;
        assigned[i] = true;
    }

    if rng.random_bool(layout.p_group) {
        let free: Vec<usize> = movable_idx.iter().copied().filter(|&i| !assigned[i]).collect();
        if free.len() >= 2 {
            let n = if free.len() >= 3 && rng.random_bool(0.5) { 3 } else { 2 };
            let depth = free.iter().take(n).map(|&i| bodies[i].depth).sum::<f64>() / n as f64;
            let mut m = generic_motion(rng, depth);
            // Pure translation keeps "identical motion" unambiguous for every member.
            m.rotation = nalgebra::Matrix3::identity();
            for &i in free.iter().take(n) {
                bodies[i].motion = m.clone();
                bodies[i].group_id = Some(1);
                moving[i] = true;
                assigned[i] = true;
            }
        }
    }

    if rng.random_bool(layout.p_part) {
        let free: Vec<usize> = movable_idx.iter().copied().filter(|&i| !assigned[i]).collect();
        if !free.is_empty() {
            let i = free[rng.random_range(0..free.len())];
            let b = &mut bodies[i];
            let r_w = slots_radius(&slots, b.center_px) * b.depth / spec.focal;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let limb_motion = {
                let speed = rng.random_range(layout.speed_px[0]..=layout.speed_px[1]);
                let d = speed * b.depth / spec.focal;
                // Swing around the body centre plus a push along the limb.
                let swing = (d / (0.55 * r_w)).min(0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                RigidTransform::from_axis_angle([0.0, 0.0, swing], [0.3 * d * c, 0.3 * d * s, 0.0])
            };
            b.shape = Shape {
                core: Primitive::Disc { radius: 0.6 * r_w },
                limbs: vec![Limb {
                    primitive: Primitive::Rectangle { half_w: 0.32 * r_w, half_h: 0.16 * r_w, angle: theta },
                    offset: [0.55 * r_w * c, 0.55 * r_w * s],
                    motion: limb_motion,
                }],
            };
            b.motion = RigidTransform::identity();
            moving[i] = true;
            assigned[i] = true;
        }
    }

    for i in 0..bodies.len() {
        if moving[i] && !assigned[i] {
            bodies[i].motion = generic_motion(rng, bodies[i].depth);
        }
    }

    if layout.require_static_movable && !bodies.iter().zip(&moving).any(|(b, &m)| b.movable && !m) {
        if let Some(slot) = place(rng, &mut slots) {
            bodies.push(make_body(rng, &slot, true, &mut next_id));
            moving.push(false);
        } else if let Some(i) = (0..bodies.len()).find(|&i| bodies[i].movable && !assigned[i]) {
            bodies[i].motion = RigidTransform::identity();
            moving[i] = false;
        }
    }

    for (b, &m) in bodies.iter_mut().zip(&moving) {
        b.moving = m && b.has_motion();
    }
    bodies
}

fn slots_radius(slots: &[Slot], center: [f64; 2]) -> f64 {
    slots.iter().find(|s| s.center == center).map(|s| s.radius_px).unwrap_or(8.0)
}

/// Frame-1 ownership of a pixel: body index and part, or background.
#[derive(Clone, Copy)]
struct Hit {
    body: usize,
    part: usize,
    depth: f64,
}

fn background_depth(bg: &BackgroundSpec, ray: &Vector3<f64>) -> f64 {
    bg.depth / (1.0 - bg.slope * ray.y)
}

fn render(spec: &GeneratorConfig, camera: &CameraModel, bodies: Vec<RigidBody>, bg_seed: u64) -> Result<SceneSample> {
    let (h, w) = (spec.height, spec.width);
    let bg = &spec.background;
    let bg_palette = Palette::background(bg_seed);
    let palettes: Vec<Palette> = bodies.iter().map(Palette::for_body).collect();
    let centroids: Vec<Point3<f64>> = bodies.iter().map(|b| b.centroid(camera)).collect();

    let mut frame1 = Array3::<f32>::zeros((h, w, 3));
    let mut frame2 = Array3::<f32>::zeros((h, w, 3));
    let mut depth1 = Array2::<f32>::zeros((h, w));
    let mut depth2 = Array2::<f32>::zeros((h, w));
    let mut masks = Array2::<u16>::zeros((h, w));
    let mut parts = Array2::<u8>::zeros((h, w));

    for y in 0..h {
        for x in 0..w {
            let ray = camera.ray(x as f64, y as f64);
            let mut best: Option<Hit> = None;
            for (bi, body) in bodies.iter().enumerate() {
                let c = &centroids[bi];
                for part in 0..body.n_parts() {
                    let (prim, off) = body.part_primitive(part);
                    let p = ray * body.depth;
                    if prim.contains(p.x - c.x - off[0], p.y - c.y - off[1]) {
                        let better = match best {
                            None => true,
                            Some(b) => body.depth < b.depth || (body.depth == b.depth && b.body == bi && part > b.part),
                        };
                        if better {
                            best = Some(Hit { body: bi, part, depth: body.depth });
                        }
                    }
                }
            }
            let (color, z) = match best {
                Some(hit) => {
                    let p = ray * hit.depth;
                    let c = &centroids[hit.body];
                    masks[[y, x]] = bodies[hit.body].id;
                    parts[[y, x]] = hit.part as u8;
                    (palettes[hit.body].color(p.x - c.x, p.y - c.y), hit.depth)
                }
                None => {
                    let z = background_depth(bg, &ray);
                    let p = ray * z;
                    (bg_palette.color(p.x, p.y), z)
                }
            };
            depth1[[y, x]] = z as f32;
            for ch in 0..3 {
                frame1[[y, x, ch]] = color[ch] as f32;
            }

            // Frame 2: cast the camera-2 ray into the moved scene.
            let origin = Point3::from(camera.pose_delta.translation);
            let dir = camera.pose_delta.rotation * camera.ray(x as f64, y as f64);
            let mut best2: Option<(f64, [f64; 3])> = None;
            for (bi, body) in bodies.iter().enumerate() {
                let c = &centroids[bi];
                for part in 0..body.n_parts() {
                    let (prim, off) = body.part_primitive(part);
                    let m = body.part_motion(part);
                    let a = m.invert_about(&origin, c);
                    let b = m.rotation.transpose() * dir;
                    if b.z.abs() < 1e-12 {
                        continue;
                    }
                    let s = (body.depth - a.z) / b.z;
                    if s <= MIN_DEPTH {
                        continue;
                    }
                    let p = a + b * s;
                    let (u, v) = (p.x - c.x - off[0], p.y - c.y - off[1]);
                    if prim.contains(u, v) && best2.is_none_or(|(d, _)| s < d) {
                        best2 = Some((s, palettes[bi].color(p.x - c.x, p.y - c.y)));
                    }
                }
            }
            let (z2, color2) = match best2 {
                Some(hit) => hit,
                None => {
                    let n = Vector3::new(0.0, -bg.slope, 1.0);
                    let s = (bg.depth - n.dot(&origin.coords)) / n.dot(&dir);
                    let p = origin + dir * s;
                    (s, bg_palette.color(p.x, p.y))
                }
            };
            depth2[[y, x]] = z2 as f32;
            for ch in 0..3 {
                frame2[[y, x, ch]] = color2[ch] as f32;
            }
        }
    }

    let visible: BTreeSet<u16> = masks.iter().copied().filter(|&v| v != 0).collect();
    let bodies: Vec<RigidBody> = bodies.into_iter().filter(|b| visible.contains(&b.id)).collect();
    let (flow, valid) = project_flow_f32(&depth1, camera, &bodies, &masks, &parts)?;

    let mut scene_flow = Array3::<f32>::zeros((h, w, 6));
    let index: BTreeMap<u16, &RigidBody> = bodies.iter().map(|b| (b.id, b)).collect();
    for y in 0..h {
        for x in 0..w {
            let id = masks[[y, x]];
            if id == 0 {
                continue;
            }
            let m = index[&id].part_motion(parts[[y, x]] as usize);
            let aa = m.axis_angle();
            let vals = [aa.x, aa.y, aa.z, m.translation.x, m.translation.y, m.translation.z];
            for (k, v) in vals.iter().enumerate() {
                scene_flow[[y, x, k]] = *v as f32;
            }
        }
    }

    let motion_labels: BTreeMap<u16, bool> = bodies.iter().map(|b| (b.id, b.moving)).collect();
    let movable: BTreeMap<u16, bool> = bodies.iter().map(|b| (b.id, b.movable)).collect();
    let degeneracy_tags = degeneracy_tags(camera, &bodies);

    Ok(SceneSample {
        frames: [frame1, frame2],
        flow_fwd: flow,
        flow_valid: valid,
        depth: [depth1, depth2],
        scene_flow,
        instance_masks: masks,
        motion_labels,
        movable,
        degeneracy_tags,
        camera: camera.clone(),
        bodies,
    })
}

/// Tags derived purely from scene geometry.
pub fn degeneracy_tags(camera: &CameraModel, bodies: &[RigidBody]) -> BTreeSet<DegeneracyTag> {
    let mut tags = BTreeSet::new();
    let cam_t = camera.pose_delta.translation;
    for b in bodies {
        if b.movable && !b.moving {
            tags.insert(DegeneracyTag::StaticMovable);
        }
        if b.moving && b.is_part_motion() {
            tags.insert(DegeneracyTag::PartMotion);
        }
        if b.moving && b.shape.limbs.is_empty() && cam_t.norm() > 1e-9 {
            let m = &b.motion;
            let pure = (m.rotation - nalgebra::Matrix3::identity()).abs().max() <= IDENTITY_TOL;
            let t = m.translation;
            if pure && t.norm() > 1e-12 && t.cross(&cam_t).norm() <= 1e-9 * t.norm() * cam_t.norm() {
                tags.insert(DegeneracyTag::Colinear);
            }
        }
    }
    let mut groups: BTreeMap<u32, usize> = BTreeMap::new();
    for b in bodies.iter().filter(|b| b.moving) {
        if let Some(g) = b.group_id {
            *groups.entry(g).or_default() += 1;
        }
    }
    if groups.values().any(|&n| n >= 2) {
        tags.insert(DegeneracyTag::GroupMotion);
    }
    if tags.is_empty() {
        tags.insert(DegeneracyTag::None);
    }
    tags
}

fn project_flow_f32(
    depth: &Array2<f32>,
    camera: &CameraModel,
    bodies: &[RigidBody],
    masks: &Array2<u16>,
    parts: &Array2<u8>,
) -> Result<(Array3<f32>, Array2<bool>)> {
    project_flow(&depth.mapv(f64::from), camera, bodies, masks, parts)
}

/// Forward flow of every pixel: back-project with its frame-1 depth, apply the
/// owning part's motion about the body centroid, move into camera 2 and
/// project. Pixels that land behind camera 2 get zero flow and `valid = false`.
///
/// `parts` selects the body part per pixel (0 = core, k = limb k-1).
pub fn project_flow(
    depth: &Array2<f64>,
    camera: &CameraModel,
    bodies: &[RigidBody],
    masks: &Array2<u16>,
    parts: &Array2<u8>,
) -> Result<(Array3<f32>, Array2<bool>)> {
    let (h, w) = depth.dim();
    if masks.dim() != (h, w) || parts.dim() != (h, w) {
        return Err(Error::Shape(format!("depth {:?}, masks {:?}, parts {:?}", depth.dim(), masks.dim(), parts.dim())));
    }
    let index: BTreeMap<u16, (&RigidBody, Point3<f64>)> =
        bodies.iter().map(|b| (b.id, (b, b.centroid(camera)))).collect();
    let mut flow = Array3::<f32>::zeros((h, w, 2));
    let mut valid = Array2::<bool>::from_elem((h, w), true);
    for y in 0..h {
        for x in 0..w {
            let z = depth[[y, x]];
            if !(z > 0.0) {
                return Err(Error::InvalidSpec(format!("non-positive depth {z} at ({y}, {x})")));
            }
            let p = camera.back_project(x as f64, y as f64, z);
            let moved = match masks[[y, x]] {
                0 => p,
                id => {
                    let (body, pivot) =
                        index.get(&id).ok_or_else(|| Error::InvalidSpec(format!("mask id {id} has no body")))?;
                    let part = parts[[y, x]] as usize;
                    if part >= body.n_parts() {
                        return Err(Error::InvalidSpec(format!("body {id} has no part {part}")));
                    }
                    body.part_motion(part).apply_about(&p, pivot)
                }
            };
            // Differencing two projections keeps static pixels exactly zero.
            match (camera.project(&camera.to_second(&moved)), camera.project(&p)) {
                (Some(q), Some(q0)) => {
                    flow[[y, x, 0]] = (q[0] - q0[0]) as f32;
                    flow[[y, x, 1]] = (q[1] - q0[1]) as f32;
                }
                _ => valid[[y, x]] = false,
            }
        }
    }
    Ok((flow, valid))
}

/// Errors unless every instance id forms one 4-connected component.
pub fn check_connected(masks: &Array2<u16>) -> Result<()> {
    let (h, w) = masks.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut started = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let id = masks[[y, x]];
            if id == 0 || seen[[y, x]] {
                continue;
            }
            if !started.insert(id) {
                return Err(Error::InvalidSpec(format!("instance {id} is not 4-connected")));
            }
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                let nbrs = [(cy.wrapping_sub(1), cx), (cy + 1, cx), (cy, cx.wrapping_sub(1)), (cy, cx + 1)];
                for (ny, nx) in nbrs {
                    if ny < h && nx < w && !seen[[ny, nx]] && masks[[ny, nx]] == id {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    Ok(())
}
