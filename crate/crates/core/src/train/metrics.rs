use super::data::TrainingSample;
use crate::error::{contract, shape_err, Result};
use crate::handmodel::ROOT_JOINT;
use crate::pipeline::VmBhiNet;
use crate::tensor::Tensor;

fn points(t: &Tensor, op: &'static str, other: &Tensor) -> Result<Vec<f64>> {
    if t.shape() != other.shape() || t.ndim() != 2 || t.dim(1) != 3 || t.dim(0) == 0 {
        return Err(shape_err(op, t.shape(), other.shape()));
    }
    Ok(t.to_vec())
}

fn mean_aligned_distance(p: &[f64], g: &[f64], p_root: [f64; 3], g_root: [f64; 3]) -> f64 {
    let n = p.len() / 3;
    let total: f64 = (0..n)
        .map(|i| {
            (0..3)
                .map(|c| {
                    let d = (p[3 * i + c] - p_root[c]) - (g[3 * i + c] - g_root[c]);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / n as f64
}

/// Mean per-joint position error after translating both sets so their root
/// joints coincide.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root_index: usize) -> Result<f64> {
    let p = points(pred, "mpjpe", gt)?;
    let g = points(gt, "mpjpe", pred)?;
    if root_index >= pred.dim(0) {
        return Err(contract(format!(
            "root index {root_index} out of range for {} joints",
            pred.dim(0)
        )));
    }
    let r = root_index * 3;
    Ok(mean_aligned_distance(
        &p,
        &g,
        [p[r], p[r + 1], p[r + 2]],
        [g[r], g[r + 1], g[r + 2]],
    ))
}

/// Mean per-vertex position error, root-aligned through the regressed root joint.
pub fn mpvpe(pred: &Tensor, gt: &Tensor, regressor: &Tensor, root_index: usize) -> Result<f64> {
    let p = points(pred, "mpvpe", gt)?;
    let g = points(gt, "mpvpe", pred)?;
    let v = pred.dim(0);
    if regressor.ndim() != 2 || regressor.dim(1) != v || root_index >= regressor.dim(0) {
        return Err(shape_err("mpvpe regressor", regressor.shape(), pred.shape()));
    }
    let row = &regressor.data()[root_index * v..(root_index + 1) * v];
    let root = |x: &[f64]| -> [f64; 3] { std::array::from_fn(|c| (0..v).map(|i| row[i] * x[3 * i + c]).sum()) };
    Ok(mean_aligned_distance(&p, &g, root(&p), root(&g)))
}

/// Errors in millimeters by split; a split without samples is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mpjpe: [Option<f64>; 3],
    pub mpvpe: [Option<f64>; 3],
    pub counts: [usize; 3],
}

pub const METRICS_HEADER: &str = "split,mpjpe_single,mpjpe_two,mpjpe_all,mpvpe_single,mpvpe_two,mpvpe_all";

impl Metrics {
    pub fn mpjpe_all(&self) -> f64 {
        self.mpjpe[2].expect("all split is never empty")
    }

    pub fn mpvpe_all(&self) -> f64 {
        self.mpvpe[2].expect("all split is never empty")
    }

    pub fn csv_row(&self, split: &str) -> String {
        let f = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let cols: Vec<String> = self.mpjpe.iter().chain(&self.mpvpe).map(f).collect();
        format!("{split},{}", cols.join(","))
    }
}

/// Per-sample errors averaged over both hands, then over the samples of
/// each split ("two" when the hands' boxes overlap, "single" otherwise).
pub fn evaluate(net: &VmBhiNet, data: &[TrainingSample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on an empty dataset"));
    }
    let mut sums = [[0.0; 3]; 2];
    let mut counts = [0usize; 3];
    for s in data {
        let out = net.forward(&s.image)?;
        let j = 0.5 * (mpjpe(&out.joints_l, &s.joints_l, ROOT_JOINT)? + mpjpe(&out.joints_r, &s.joints_r, ROOT_JOINT)?);
        let reg = &net.rig.regressor;
        let v = 0.5
            * (mpvpe(&out.vertices_l, &s.vertices_l, reg, ROOT_JOINT)?
                + mpvpe(&out.vertices_r, &s.vertices_r, reg, ROOT_JOINT)?);
        for split in [usize::from(s.two_hands), 2] {
            sums[0][split] += j;
            sums[1][split] += v;
            counts[split] += 1;
        }
    }
    let avg = |k: usize| -> [Option<f64>; 3] {
        std::array::from_fn(|i| (counts[i] > 0).then(|| sums[k][i] / counts[i] as f64))
    };
    Ok(Metrics {
        mpjpe: avg(0),
        mpvpe: avg(1),
        counts,
    })
}
