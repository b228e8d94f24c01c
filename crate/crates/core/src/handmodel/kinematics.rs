use super::rig::{HandRig, NUM_JOINTS};
use super::rotation::rodrigues_batch;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Posed skeleton.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Local joint rotations `[16, 3, 3]`.
    pub rotations: Tensor,
    /// World transforms `[16, 4, 4]`.
    pub world: Tensor,
    /// World transform composed with the inverse rest transform, top three rows `[16, 3, 4]`.
    pub relative: Tensor,
    /// Posed joint positions `[16, 3]`.
    pub joints: Tensor,
}

/// Walks the joint tree from the root: the root rotates about its rest
/// position, each child applies its local rotation at its rest offset from
/// the parent.
pub fn forward_kinematics(rig: &HandRig, theta: &Tensor) -> Result<Kinematics> {
    if theta.shape() != [NUM_JOINTS, 3] {
        return Err(shape_err("forward_kinematics", theta.shape(), &[NUM_JOINTS, 3]));
    }
    let rotations = rodrigues_batch(theta)?;
    let rest = rig.rest_joints.to_vec();
    let rest_col = |k: usize| Tensor::new(rest[3 * k..3 * k + 3].to_vec(), &[3, 1]);

    let mut rot: Vec<Tensor> = Vec::with_capacity(NUM_JOINTS);
    let mut pos: Vec<Tensor> = Vec::with_capacity(NUM_JOINTS);
    for k in 0..NUM_JOINTS {
        let local = rotations.narrow(0, k, 1)?.reshape(&[3, 3])?;
        match rig.parents[k] {
            None => {
                rot.push(local);
                pos.push(rest_col(k)?);
            }
            Some(p) => {
                let offset: Vec<f64> = (0..3).map(|c| rest[3 * k + c] - rest[3 * p + c]).collect();
                let offset = Tensor::new(offset, &[3, 1])?;
                pos.push(rot[p].matmul(&offset)?.add(&pos[p])?);
                rot.push(rot[p].matmul(&local)?);
            }
        }
    }

    let bottom = Tensor::new(vec![0.0, 0.0, 0.0, 1.0], &[1, 4])?;
    let mut world = Vec::with_capacity(NUM_JOINTS);
    let mut relative = Vec::with_capacity(NUM_JOINTS);
    for k in 0..NUM_JOINTS {
        let top = Tensor::concat(&[rot[k].clone(), pos[k].clone()], 1)?;
        world.push(Tensor::concat(&[top, bottom.clone()], 0)?.reshape(&[1, 4, 4])?);
        let t = pos[k].sub(&rot[k].matmul(&rest_col(k)?)?)?;
        relative.push(Tensor::concat(&[rot[k].clone(), t], 1)?.reshape(&[1, 3, 4])?);
    }
    let joints = Tensor::concat(&pos, 1)?.t()?;
    Ok(Kinematics {
        rotations,
        world: Tensor::concat(&world, 0)?,
        relative: Tensor::concat(&relative, 0)?,
        joints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::make_default_rig;
    use crate::rng::SeededRng;

    type M4 = [[f64; 4]; 4];

    fn mat_mul(a: &M4, b: &M4) -> M4 {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    /// Unit quaternion to rotation matrix, independent of the Rodrigues path.
    fn quat_rotation(aa: &[f64]) -> [[f64; 3]; 3] {
        let th = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
        let (w, x, y, z) = if th == 0.0 {
            (1.0, 0.0, 0.0, 0.0)
        } else {
            let s = (th / 2.0).sin() / th;
            ((th / 2.0).cos(), aa[0] * s, aa[1] * s, aa[2] * s)
        };
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Scene graph: world_k = world_parent · [R_k | rest_k - rest_parent].
    fn chain_oracle(rig: &HandRig, theta: &[f64]) -> Vec<M4> {
        let rest = rig.rest_joints.to_vec();
        let mut world: Vec<M4> = Vec::new();
        for k in 0..NUM_JOINTS {
            let r = quat_rotation(&theta[3 * k..3 * k + 3]);
            let mut local = [[0.0; 4]; 4];
            for i in 0..3 {
                local[i][..3].copy_from_slice(&r[i]);
                local[i][3] = rest[3 * k + i] - rig.parents[k].map_or(0.0, |p| rest[3 * p + i]);
            }
            local[3][3] = 1.0;
            world.push(match rig.parents[k] {
                None => local,
                Some(p) => mat_mul(&world[p], &local),
            });
        }
        world
    }

    #[test]
    fn zero_pose_gives_identity_relatives() {
        let rig = make_default_rig(0, 64).unwrap();
        let fk = forward_kinematics(&rig, &Tensor::zeros(&[16, 3])).unwrap();
        let rel = fk.relative.to_vec();
        for k in 0..NUM_JOINTS {
            for i in 0..3 {
                for j in 0..4 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((rel[k * 12 + i * 4 + j] - expect).abs() < 1e-12);
                }
            }
        }
        let joints = fk.joints.to_vec();
        for (a, b) in joints.iter().zip(rig.rest_joints.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn root_rotation_moves_joints_rigidly() {
        let rig = make_default_rig(1, 64).unwrap();
        let mut th = vec![0.0; 48];
        th[..3].copy_from_slice(&[0.3, -0.7, 0.4]);
        let r = quat_rotation(&th[..3]);
        let fk = forward_kinematics(&rig, &Tensor::new(th, &[16, 3]).unwrap()).unwrap();
        let rest = rig.rest_joints.to_vec();
        let root = &rest[..3];
        let joints = fk.joints.to_vec();
        for k in 0..NUM_JOINTS {
            for i in 0..3 {
                let expect = root[i] + (0..3).map(|j| r[i][j] * (rest[3 * k + j] - root[j])).sum::<f64>();
                assert!((joints[3 * k + i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matches_matrix_chain_oracle() {
        let rig = make_default_rig(2, 64).unwrap();
        let mut rng = SeededRng::new(9);
        for _ in 0..20 {
            let th = rng.normal_vec(48, 0.0, 0.8);
            let fk = forward_kinematics(&rig, &Tensor::new(th.clone(), &[16, 3]).unwrap()).unwrap();
            let world = fk.world.to_vec();
            for (k, m) in chain_oracle(&rig, &th).iter().enumerate() {
                for i in 0..4 {
                    for j in 0..4 {
                        assert!((world[k * 16 + i * 4 + j] - m[i][j]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_theta_shape() {
        let rig = make_default_rig(0, 64).unwrap();
        assert!(forward_kinematics(&rig, &Tensor::zeros(&[15, 3])).is_err());
    }
}
