use crate::error::{shape_err, Result};
use crate::handmodel::{HandParams, NUM_JOINTS, NUM_SHAPES};
use crate::nn::{grid_sample, Builder, Conv2d, Linear};
use crate::tensor::{BackwardCtx, ReduceOp, Tensor};

/// Per-joint spatial logits plus per-joint depth-bin logits.
#[derive(Clone, Debug)]
pub struct Heatmap2p5D {
    /// `[J, h, w]`.
    pub spatial: Tensor,
    /// `[J, D]`.
    pub depth: Tensor,
}

/// Continuous joint locations in heatmap pixels and depth bins.
#[derive(Clone, Debug)]
pub struct JointCoords {
    /// `[J, 2]` as `(x, y)`; also the grid-sampling positions.
    pub xy: Tensor,
    /// `[J]`.
    pub z: Tensor,
}

impl JointCoords {
    /// `[J, 3]` as `(x, y, z)`.
    pub fn xyz(&self) -> Result<Tensor> {
        let j = self.z.dim(0);
        Tensor::concat(&[self.xy.clone(), self.z.reshape(&[j, 1])?], 1)
    }
}

#[derive(Clone, Debug)]
pub struct JointFeatures {
    /// `[J, c]`.
    pub data: Tensor,
    /// Set once the features have passed the joint VMBlocks.
    pub refined: bool,
}

/// Clamps each column into `[lo_k, hi_k]`, absorbing rounding overshoot of a
/// convex combination; the gradient passes through unchanged.
fn clamp_columns(x: &Tensor, lo: Vec<f64>, hi: Vec<f64>) -> Tensor {
    let k = lo.len();
    let data: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.clamp(lo[i % k], hi[i % k]))
        .collect();
    Tensor::from_op(
        "hull_clamp",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad_out.to_vec())]),
    )
}

/// Expected position under `softmax(logits)` along the last axis:
/// `logits [J, P]`, `positions [P, k]` → `[J, k]`. Results lie inside the
/// bounding box of the positions.
pub fn soft_argmax(logits: &Tensor, positions: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 || positions.ndim() != 2 || logits.dim(1) != positions.dim(0) || positions.dim(0) == 0 {
        return Err(shape_err("soft_argmax", logits.shape(), positions.shape()));
    }
    let k = positions.dim(1);
    let (mut lo, mut hi) = (vec![f64::INFINITY; k], vec![f64::NEG_INFINITY; k]);
    for row in positions.data().chunks(k) {
        for (c, v) in row.iter().enumerate() {
            lo[c] = lo[c].min(*v);
            hi[c] = hi[c].max(*v);
        }
    }
    let expect = logits.softmax(1)?.matmul(positions)?;
    Ok(clamp_columns(&expect, lo, hi))
}

/// `(x, y)` of each cell of an `h × w` grid in row-major order, `[h·w, 2]`.
pub fn pixel_grid(h: usize, w: usize) -> Tensor {
    let data = (0..h)
        .flat_map(|y| (0..w).flat_map(move |x| [x as f64, y as f64]))
        .collect();
    Tensor::new(data, &[h * w, 2]).expect("grid shape")
}

/// Depth-bin centers `0..D` as `[D, 1]`.
pub fn depth_bins(d: usize) -> Tensor {
    Tensor::new((0..d).map(|i| i as f64).collect(), &[d, 1]).expect("bins shape")
}

/// Global average pool of `[c, h, w]` to `[1, c]`.
pub fn avgpool(f: &Tensor) -> Result<Tensor> {
    if f.ndim() != 3 {
        return Err(shape_err("avgpool", f.shape(), &[]));
    }
    let c = f.dim(0);
    f.reshape(&[c, f.dim(1) * f.dim(2)])?
        .reduce(ReduceOp::Mean, &[1])?
        .reshape(&[1, c])
}

/// Hand joint feature extractor: heatmap conv, depth head, soft-argmax and
/// grid sampling.
pub struct Hjfe {
    pub heatmap: Conv2d,
    pub depth: Linear,
    joints: usize,
    bins: usize,
}

impl Hjfe {
    pub fn new(b: &mut Builder, c: usize, joints: usize, bins: usize) -> Result<Self> {
        Ok(Self {
            heatmap: Conv2d::new(&mut b.sub("heatmap"), c, joints, 1, 1, 0)?,
            depth: Linear::new(&mut b.sub("depth"), c, joints * bins),
            joints,
            bins,
        })
    }

    pub fn heatmap(&self, f: &Tensor) -> Result<Heatmap2p5D> {
        Ok(Heatmap2p5D {
            spatial: self.heatmap.forward(f)?,
            depth: self.depth.forward(&avgpool(f)?)?.reshape(&[self.joints, self.bins])?,
        })
    }

    pub fn locate(&self, hm: &Heatmap2p5D) -> Result<JointCoords> {
        let (j, h, w) = (hm.spatial.dim(0), hm.spatial.dim(1), hm.spatial.dim(2));
        let xy = soft_argmax(&hm.spatial.reshape(&[j, h * w])?, &pixel_grid(h, w))?;
        let z = soft_argmax(&hm.depth, &depth_bins(hm.depth.dim(1)))?.reshape(&[j])?;
        Ok(JointCoords { xy, z })
    }

    pub fn forward(&self, f: &Tensor) -> Result<(Heatmap2p5D, JointCoords, JointFeatures)> {
        let hm = self.heatmap(f)?;
        let coords = self.locate(&hm)?;
        let feats = JointFeatures {
            data: grid_sample(f, &coords.xy)?,
            refined: false,
        };
        Ok((hm, coords, feats))
    }
}

/// Dual hand parameter regressor.
pub struct Dhpr {
    pub theta_l: Linear,
    pub theta_r: Linear,
    pub beta_l: Linear,
    pub beta_r: Linear,
    pub trel: Linear,
    translation_scale: f64,
}

impl Dhpr {
    pub fn new(b: &mut Builder, c: usize, joints: usize, translation_scale: f64) -> Self {
        let pose_in = joints * (c + 3);
        Self {
            theta_l: Linear::new(&mut b.sub("theta_l"), pose_in, NUM_JOINTS * 3),
            theta_r: Linear::new(&mut b.sub("theta_r"), pose_in, NUM_JOINTS * 3),
            beta_l: Linear::new(&mut b.sub("beta_l"), c, NUM_SHAPES),
            beta_r: Linear::new(&mut b.sub("beta_r"), c, NUM_SHAPES),
            trel: Linear::new(&mut b.sub("trel"), 2 * c, 3),
            translation_scale,
        }
    }

    fn hand(theta: &Linear, beta: &Linear, feats: &JointFeatures, coords: &JointCoords) -> Result<HandParams> {
        let (j, c) = (feats.data.dim(0), feats.data.dim(1));
        let pose_in = Tensor::concat(&[feats.data.clone(), coords.xyz()?], 1)?.reshape(&[1, j * (c + 3)])?;
        let th = theta.forward(&pose_in)?.reshape(&[NUM_JOINTS, 3])?;
        let pooled = feats.data.reduce(ReduceOp::Mean, &[0])?.reshape(&[1, c])?;
        let be = beta.forward(&pooled)?.reshape(&[NUM_SHAPES])?;
        HandParams::new(th, be)
    }

    /// Returns left params, right params and the relative translation in millimeters.
    pub fn forward(
        &self,
        refined: [&JointFeatures; 2],
        coords: [&JointCoords; 2],
        star: [&Tensor; 2],
    ) -> Result<(HandParams, HandParams, Tensor)> {
        let left = Self::hand(&self.theta_l, &self.beta_l, refined[0], coords[0])?;
        let right = Self::hand(&self.theta_r, &self.beta_r, refined[1], coords[1])?;
        let pooled = Tensor::concat(&[avgpool(star[0])?, avgpool(star[1])?], 1)?;
        let t_rel = self
            .trel
            .forward(&pooled)?
            .mul_scalar(self.translation_scale)
            .reshape(&[3])?;
        Ok((left, right, t_rel))
    }
}
