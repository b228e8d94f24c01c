use super::kinematics::forward_kinematics;
use super::rig::{HandRig, NUM_JOINTS, NUM_SHAPES, POSE_FEATURES};
use crate::error::{shape_err, Result};
use crate::tensor::{ReduceOp, Tensor};

/// MANO-interface pose and shape.
#[derive(Clone, Debug)]
pub struct HandParams {
    /// `[16, 3]` axis-angle, radians.
    pub theta: Tensor,
    /// `[10]`.
    pub beta: Tensor,
}

impl HandParams {
    pub fn zeros() -> Self {
        Self {
            theta: Tensor::zeros(&[NUM_JOINTS, 3]),
            beta: Tensor::zeros(&[NUM_SHAPES]),
        }
    }

    pub fn new(theta: Tensor, beta: Tensor) -> Result<Self> {
        if theta.shape() != [NUM_JOINTS, 3] {
            return Err(shape_err("hand theta", theta.shape(), &[NUM_JOINTS, 3]));
        }
        if beta.shape() != [NUM_SHAPES] {
            return Err(shape_err("hand beta", beta.shape(), &[NUM_SHAPES]));
        }
        Ok(Self { theta, beta })
    }
}

#[derive(Clone, Debug)]
pub struct HandOutput {
    /// `[V, 3]`, millimeters.
    pub vertices: Tensor,
    /// `[21, 3]`, millimeters.
    pub joints: Tensor,
}

/// Shaped template `T(β) = template + Σ_s β_s·S_s`, `[V, 3]`.
pub fn shaped_template(rig: &HandRig, beta: &Tensor) -> Result<Tensor> {
    if beta.shape() != [NUM_SHAPES] {
        return Err(shape_err("lbs beta", beta.shape(), &[NUM_SHAPES]));
    }
    let v = rig.num_vertices();
    let offsets = rig
        .shape_dirs
        .reshape(&[v * 3, NUM_SHAPES])?
        .matmul(&beta.reshape(&[NUM_SHAPES, 1])?)?
        .reshape(&[v, 3])?;
    rig.template.add(&offsets)
}

/// Linear blend skinning of the shaped (and optionally pose-corrected)
/// template by the relative joint transforms; joints are regressed from the
/// posed vertices.
pub fn lbs(rig: &HandRig, params: &HandParams) -> Result<HandOutput> {
    let v = rig.num_vertices();
    let fk = forward_kinematics(rig, &params.theta)?;
    let mut rest = shaped_template(rig, &params.beta)?;
    if let Some(pose_dirs) = &rig.pose_dirs {
        let eye = Tensor::eye(3).reshape(&[1, 3, 3])?;
        let feat = fk
            .rotations
            .narrow(0, 1, NUM_JOINTS - 1)?
            .sub(&eye)?
            .reshape(&[POSE_FEATURES, 1])?;
        let corr = pose_dirs
            .reshape(&[v * 3, POSE_FEATURES])?
            .matmul(&feat)?
            .reshape(&[v, 3])?;
        rest = rest.add(&corr)?;
    }
    let blended = rig
        .weights
        .matmul(&fk.relative.reshape(&[NUM_JOINTS, 12])?)?
        .reshape(&[v, 3, 4])?;
    let homog = Tensor::concat(&[rest, Tensor::ones(&[v, 1])], 1)?.reshape(&[v, 1, 4])?;
    let vertices = blended.mul(&homog)?.reduce(ReduceOp::Sum, &[2])?;
    let joints = rig.regressor.matmul(&vertices)?;
    Ok(HandOutput { vertices, joints })
}
