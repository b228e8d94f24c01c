//! Differentiable hand model with the MANO parameter interface: shape
//! blendshapes, axis-angle rotations, forward kinematics over a 16-joint
//! tree and linear blend skinning, on a procedurally generated rig.

mod kinematics;
mod lbs;
mod rig;
mod rotation;

pub use kinematics::{forward_kinematics, Kinematics};
pub use lbs::{lbs, shaped_template, HandOutput, HandParams};
pub use rig::{
    make_default_rig, HandRig, RigFile, DEFAULT_VERTICES, NUM_EVAL_JOINTS, NUM_JOINTS, NUM_SHAPES, PARENTS,
    POSE_FEATURES,
};
pub use rotation::{rodrigues, rodrigues_batch, SMALL_ANGLE};

/// Index of the wrist, used for root alignment.
pub const ROOT_JOINT: usize = 0;
