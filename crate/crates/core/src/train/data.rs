use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::handmodel::{lbs, HandParams, HandRig, NUM_EVAL_JOINTS, NUM_JOINTS, NUM_SHAPES};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One synthetic two-hand example. Joints and vertices are in the rig frame
/// of their own hand; `t_rel` places the right root relative to the left.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `[3, H, W]`: left blobs, right blobs, their sum.
    pub image: Tensor,
    pub theta_l: Tensor,
    pub theta_r: Tensor,
    pub beta_l: Tensor,
    pub beta_r: Tensor,
    pub joints_l: Tensor,
    pub joints_r: Tensor,
    pub vertices_l: Tensor,
    pub vertices_r: Tensor,
    pub t_rel: Tensor,
    /// Projected hand bounding boxes overlap.
    pub two_hands: bool,
}

impl TrainingSample {
    /// Ground truth in loss-term order.
    pub fn targets(&self) -> [&Tensor; 9] {
        [
            &self.theta_l,
            &self.theta_r,
            &self.beta_l,
            &self.beta_r,
            &self.joints_l,
            &self.joints_r,
            &self.vertices_l,
            &self.vertices_r,
            &self.t_rel,
        ]
    }

    /// Largest deviation between stored joints/vertices and those regenerated
    /// from the stored parameters.
    pub fn regeneration_error(&self, rig: &HandRig) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (th, be, j, v) in [
            (&self.theta_l, &self.beta_l, &self.joints_l, &self.vertices_l),
            (&self.theta_r, &self.beta_r, &self.joints_r, &self.vertices_r),
        ] {
            let out = lbs(rig, &HandParams::new(th.clone(), be.clone())?)?;
            for (a, b) in out
                .joints
                .to_vec()
                .iter()
                .zip(j.to_vec())
                .chain(out.vertices.to_vec().iter().zip(v.to_vec()))
            {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl StoredTensor {
    fn of(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredSample {
    /// image, theta_l, theta_r, beta_l, beta_r, joints_l, joints_r, vertices_l, vertices_r, t_rel
    tensors: Vec<StoredTensor>,
    two_hands: bool,
}

/// Writes samples as JSON.
pub fn save_dataset(data: &[TrainingSample], path: &Path) -> Result<()> {
    let stored: Vec<StoredSample> = data
        .iter()
        .map(|s| StoredSample {
            tensors: std::iter::once(&s.image)
                .chain(s.targets())
                .map(StoredTensor::of)
                .collect(),
            two_hands: s.two_hands,
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&stored)?)?;
    Ok(())
}

/// Reads samples written by [`save_dataset`], checking every tensor against
/// the shape its role requires.
pub fn load_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let stored: Vec<StoredSample> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    stored
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.tensors.len();
            let [image, theta_l, theta_r, beta_l, beta_r, joints_l, joints_r, vertices_l, vertices_r, t_rel]: [Tensor;
                10] = s
                .tensors
                .into_iter()
                .map(|t| Tensor::new(t.data, &t.shape))
                .collect::<Result<Vec<_>>>()?
                .try_into()
                .map_err(|_| contract(format!("sample {i}: expected 10 tensors, found {n}")))?;
            let expect: [(&Tensor, &[usize]); 9] = [
                (&theta_l, &[NUM_JOINTS, 3]),
                (&theta_r, &[NUM_JOINTS, 3]),
                (&beta_l, &[NUM_SHAPES]),
                (&beta_r, &[NUM_SHAPES]),
                (&joints_l, &[NUM_EVAL_JOINTS, 3]),
                (&joints_r, &[NUM_EVAL_JOINTS, 3]),
                (&vertices_l, &[vertices_l.dim(0), 3]),
                (&vertices_r, &[vertices_l.dim(0), 3]),
                (&t_rel, &[3]),
            ];
            if image.ndim() != 3 || image.dim(0) != 3 || expect.iter().any(|(t, s)| t.shape() != *s) {
                return Err(contract(format!(
                    "sample {i}: tensor shapes do not match a two-hand sample"
                )));
            }
            Ok(TrainingSample {
                image,
                theta_l,
                theta_r,
                beta_l,
                beta_r,
                joints_l,
                joints_r,
                vertices_l,
                vertices_r,
                t_rel,
                two_hands: s.two_hands,
            })
        })
        .collect()
}

/// Sampling and rendering settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub mm_per_px: f64,
    pub blob_sigma_px: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub theta_std: f64,
    pub beta_std: f64,
    /// Center of the relative-translation box, millimeters.
    pub trel_center: [f64; 3],
    pub trel_half_extent: f64,
    /// Left root position relative to the image center, millimeters.
    pub left_root: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_image(64, 64)
    }
}

impl SynthConfig {
    /// 320 mm field of view across the image width.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mm_per_px: 320.0 / width as f64,
            blob_sigma_px: 2.0,
            noise: 0.0,
            theta_std: 0.2,
            beta_std: 1.0,
            trel_center: [130.0, 0.0, 0.0],
            trel_half_extent: 30.0,
            left_root: [-41.0, -87.0],
        }
    }

    /// Pixel `(u, v)` of a point given in millimeters from the image center.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0 + x / self.mm_per_px,
            (self.height as f64 - 1.0) / 2.0 + y / self.mm_per_px,
        )
    }
}

/// Sum of isotropic Gaussian blobs (peak 1) at pixel positions, `[h·w]` row-major.
pub fn render_blobs(points: &[(f64, f64)], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &(pu, pv) in points {
        for v in 0..h {
            let dv = v as f64 - pv;
            for u in 0..w {
                let du = u as f64 - pu;
                img[v * w + u] += (-(du * du + dv * dv) * inv).exp();
            }
        }
    }
    img
}

fn bbox(points: &[(f64, f64)]) -> [f64; 4] {
    points.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, &(u, v)| [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)],
    )
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

fn projected(cfg: &SynthConfig, pts: &[f64], offset: [f64; 2]) -> Vec<(f64, f64)> {
    pts.chunks(3)
        .map(|p| cfg.project(p[0] + offset[0], p[1] + offset[1]))
        .collect()
}

/// `n` samples with poses `θ ~ N(0, theta_std)`, shapes `β ~ N(0, beta_std)`
/// and `T_rel` uniform in a box; deterministic per seed.
pub fn synth_dataset(rig: &HandRig, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<TrainingSample>> {
    if n == 0 {
        return Err(contract("synthetic dataset needs at least one sample"));
    }
    let mut rng = SeededRng::new(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let hand = |rng: &mut SeededRng| -> Result<(HandParams, Tensor, Tensor)> {
            let p = HandParams::new(
                Tensor::new(rng.normal_vec(NUM_JOINTS * 3, 0.0, cfg.theta_std), &[NUM_JOINTS, 3])?,
                Tensor::new(rng.normal_vec(NUM_SHAPES, 0.0, cfg.beta_std), &[NUM_SHAPES])?,
            )?;
            let o = lbs(rig, &p)?;
            Ok((p, o.joints.detach(), o.vertices.detach()))
        };
        let (pl, jl, vl) = hand(&mut rng)?;
        let (pr, jr, vr) = hand(&mut rng)?;
        let t: Vec<f64> = cfg
            .trel_center
            .iter()
            .map(|c| c + rng.uniform(-cfg.trel_half_extent, cfg.trel_half_extent))
            .collect();
        let off_l = cfg.left_root;
        let off_r = [off_l[0] + t[0], off_l[1] + t[1]];
        let (jl_v, jr_v) = (jl.to_vec(), jr.to_vec());
        let left_px = projected(cfg, &jl_v, off_l);
        let right_px = projected(cfg, &jr_v, off_r);
        let two_hands = overlap(
            bbox(&projected(cfg, &vl.to_vec(), off_l)),
            bbox(&projected(cfg, &vr.to_vec(), off_r)),
        );

        let left = render_blobs(&left_px, h, w, cfg.blob_sigma_px);
        let right = render_blobs(&right_px, h, w, cfg.blob_sigma_px);
        let sum: Vec<f64> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
        let mut pixels = [left, right, sum].concat();
        if cfg.noise > 0.0 {
            for p in pixels.iter_mut() {
                *p += rng.normal(0.0, cfg.noise);
            }
        }
        out.push(TrainingSample {
            image: Tensor::new(pixels, &[3, h, w])?,
            theta_l: pl.theta,
            theta_r: pr.theta,
            beta_l: pl.beta,
            beta_r: pr.beta,
            joints_l: jl,
            joints_r: jr,
            vertices_l: vl,
            vertices_r: vr,
            t_rel: Tensor::new(t, &[3])?,
            two_hands,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::make_default_rig;

    #[test]
    fn ground_truth_regenerates_from_params() {
        let rig = make_default_rig(0, 100).unwrap();
        for s in synth_dataset(&rig, 4, 3, &SynthConfig::default()).unwrap() {
            assert!(s.regeneration_error(&rig).unwrap() <= 1e-9);
            assert!(!s.theta_l.requires_grad() && s.joints_l.is_leaf());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let rig = make_default_rig(0, 60).unwrap();
        let cfg = SynthConfig {
            noise: 0.05,
            ..SynthConfig::default()
        };
        let a = synth_dataset(&rig, 3, 11, &cfg).unwrap();
        let b = synth_dataset(&rig, 3, 11, &cfg).unwrap();
        let c = synth_dataset(&rig, 3, 12, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.to_vec(), y.image.to_vec());
            assert_eq!(x.t_rel.to_vec(), y.t_rel.to_vec());
        }
        assert_ne!(a[0].image.to_vec(), c[0].image.to_vec());
    }

    #[test]
    fn blob_peak_near_projected_joint() {
        let rig = make_default_rig(0, 100).unwrap();
        let cfg = SynthConfig::default();
        for s in synth_dataset(&rig, 5, 1, &cfg).unwrap() {
            let j = s.joints_l.to_vec();
            let (pu, pv) = cfg.project(j[0] + cfg.left_root[0], j[1] + cfg.left_root[1]);
            let img = s.image.to_vec();
            let (mut best, mut at) = (f64::NEG_INFINITY, (0usize, 0usize));
            for v in 0..cfg.height {
                for u in 0..cfg.width {
                    let near = (u as f64 - pu).abs() <= 3.0 && (v as f64 - pv).abs() <= 3.0;
                    if near && img[v * cfg.width + u] > best {
                        best = img[v * cfg.width + u];
                        at = (u, v);
                    }
                }
            }
            assert!(
                ((at.0 as f64 - pu).powi(2) + (at.1 as f64 - pv).powi(2)).sqrt() <= 1.0,
                "{at:?} vs {pu},{pv}"
            );
        }
    }

    #[test]
    fn single_blob_peaks_at_nearest_pixel() {
        let img = render_blobs(&[(3.3, 5.8)], 10, 10, 2.0);
        let arg = img.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!((arg % 10, arg / 10), (3, 6));
    }

    #[test]
    fn both_splits_occur() {
        let rig = make_default_rig(0, 252).unwrap();
        let data = synth_dataset(&rig, 40, 0, &SynthConfig::default()).unwrap();
        let two = data.iter().filter(|s| s.two_hands).count();
        assert!(two > 0 && two < data.len(), "{two} of {}", data.len());
    }

    #[test]
    fn dataset_file_round_trip() {
        let rig = make_default_rig(0, 40).unwrap();
        let data = synth_dataset(&rig, 2, 5, &SynthConfig::for_image(16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.image.to_vec(), b.image.to_vec());
            assert_eq!(a.vertices_r.to_vec(), b.vertices_r.to_vec());
            assert_eq!(a.two_hands, b.two_hands);
        }
        std::fs::write(&path, r#"[{"tensors":[],"two_hands":false}]"#).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn empty_request_is_error() {
        let rig = make_default_rig(0, 60).unwrap();
        assert!(synth_dataset(&rig, 0, 0, &SynthConfig::default()).is_err());
    }
}
