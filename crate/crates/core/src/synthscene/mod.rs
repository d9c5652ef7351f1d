//! Deterministic two-frame scene generator.
//!
//! Scenes are planar textured bodies in front of a background plane, seen by
//! a pinhole camera that moves between the two frames. Flow, scene flow and
//! depth are exact; motion labels follow from the body motions, and
//! degeneracy tags (colinear motion, static movable distractors, group and
//! part motion) are derived from the geometry.

mod body;
mod camera;
mod generator;
pub mod io;
mod mix;

pub use body::{value_noise, Limb, Palette, Primitive, RigidBody, Shape, ShapeKind, IDENTITY_TOL};
pub use camera::{CameraModel, RigidTransform, MIN_DEPTH};
pub use generator::{
    check_connected, degeneracy_tags, generate_scene, project_flow, BackgroundSpec, CameraMotion, DegeneracyTag,
    GeneratorConfig, Layout, RandomLayout, SceneSample,
};
pub use mix::{sample_mix, DatasetMix, MixSource};
