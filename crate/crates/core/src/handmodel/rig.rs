use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 16;
pub const NUM_SHAPES: usize = 10;
/// Evaluation joints: wrist plus four per finger (three articulations and the tip).
pub const NUM_EVAL_JOINTS: usize = 21;
pub const DEFAULT_VERTICES: usize = 252;
/// Per-joint rotation features feeding optional pose blendshapes (joints 1..16, 3×3 each).
pub const POSE_FEATURES: usize = (NUM_JOINTS - 1) * 9;

/// Kinematic parent of each joint; the wrist is the root. Fingers are ordered
/// index, middle, pinky, ring, thumb with three joints each.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Immutable hand rig with the MANO parameter interface.
#[derive(Clone, Debug)]
pub struct HandRig {
    /// `[V, 3]`, millimeters.
    pub template: Tensor,
    pub faces: Vec<[usize; 3]>,
    pub parents: Vec<Option<usize>>,
    /// `[16, 3]` rest joint positions.
    pub rest_joints: Tensor,
    /// `[V, 16]`, rows are convex combinations.
    pub weights: Tensor,
    /// `[V, 3, 10]`.
    pub shape_dirs: Tensor,
    /// `[21, V]`, rows sum to one.
    pub regressor: Tensor,
    /// Optional `[V, 3, 135]` pose correctives; absent means zero.
    pub pose_dirs: Option<Tensor>,
}

impl HandRig {
    pub fn num_vertices(&self) -> usize {
        self.template.dim(0)
    }

    /// Checks every structural invariant, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRig(m));
        let v = self.num_vertices();
        if self.template.shape() != [v, 3] {
            return bad(format!("template must be [V,3], got {:?}", self.template.shape()));
        }
        if self.parents.len() != NUM_JOINTS {
            return bad(format!(
                "joint tree must have {NUM_JOINTS} joints, got {}",
                self.parents.len()
            ));
        }
        for (k, p) in self.parents.iter().enumerate() {
            match (k, p) {
                (0, None) => {}
                (0, Some(_)) => return bad("joint tree: joint 0 must be the root".into()),
                (_, None) => return bad(format!("joint tree: joint {k} has no parent")),
                (_, Some(p)) if *p >= k => {
                    return bad(format!(
                        "joint tree: parent {p} of joint {k} is not earlier (topological order)"
                    ))
                }
                _ => {}
            }
        }
        if self.rest_joints.shape() != [NUM_JOINTS, 3] {
            return bad(format!(
                "rest joints must be [16,3], got {:?}",
                self.rest_joints.shape()
            ));
        }
        if self.weights.shape() != [v, NUM_JOINTS] {
            return bad(format!(
                "skinning weights must be [V,16], got {:?}",
                self.weights.shape()
            ));
        }
        for (i, row) in self.weights.data().chunks(NUM_JOINTS).enumerate() {
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return bad(format!("skinning weights: row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("skinning weights: row {i} sums to {s}, not 1"));
            }
        }
        if self.shape_dirs.shape() != [v, 3, NUM_SHAPES] {
            return bad(format!(
                "shape blendshapes must be [V,3,10], got {:?}",
                self.shape_dirs.shape()
            ));
        }
        if self.regressor.shape() != [NUM_EVAL_JOINTS, v] {
            return bad(format!(
                "joint regressor must be [21,V], got {:?}",
                self.regressor.shape()
            ));
        }
        for (j, row) in self.regressor.data().chunks(v).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("joint regressor: row {j} sums to {s}, not 1"));
            }
        }
        if let Some(pd) = &self.pose_dirs {
            if pd.shape() != [v, 3, POSE_FEATURES] {
                return bad(format!("pose blendshapes must be [V,3,135], got {:?}", pd.shape()));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= v)) {
            return bad(format!("faces: {f:?} references a vertex beyond {v}"));
        }
        let finite = [&self.template, &self.rest_joints, &self.shape_dirs, &self.regressor]
            .iter()
            .all(|t| t.data().iter().all(|x| x.is_finite()));
        if !finite {
            return bad("rig arrays contain non-finite values".into());
        }
        Ok(())
    }

    pub fn to_file(&self) -> RigFile {
        let rows = |t: &Tensor, w: usize| t.data().chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let cube = |t: &Tensor, depth: usize| {
            t.data()
                .chunks(3 * depth)
                .map(|v| v.chunks(depth).map(<[f64]>::to_vec).collect())
                .collect()
        };
        RigFile {
            template: rows(&self.template, 3),
            faces: self.faces.clone(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            rest_joints: rows(&self.rest_joints, 3),
            weights: rows(&self.weights, NUM_JOINTS),
            shape_blendshapes: cube(&self.shape_dirs, NUM_SHAPES),
            regressor: rows(&self.regressor, self.num_vertices()),
            pose_blendshapes: self.pose_dirs.as_ref().map(|p| cube(p, POSE_FEATURES)),
        }
    }

    pub fn from_file(f: RigFile) -> Result<Self> {
        let bad = |m: &str| Error::InvalidRig(m.to_owned());
        let v = f.template.len();
        if v == 0 {
            return Err(bad("template: no vertices"));
        }
        let flat2 = |rows: &[Vec<f64>], w: usize, what: &str| -> Result<Tensor> {
            if rows.is_empty() || rows.iter().any(|r| r.len() != w) {
                return Err(Error::InvalidRig(format!("{what}: every row must have {w} entries")));
            }
            Tensor::new(rows.concat(), &[rows.len(), w])
        };
        let flat3 = |c: &[Vec<Vec<f64>>], d: usize, what: &str| -> Result<Tensor> {
            if c.len() != v || c.iter().any(|m| m.len() != 3 || m.iter().any(|r| r.len() != d)) {
                return Err(Error::InvalidRig(format!("{what}: expected [{v}][3][{d}] nesting")));
            }
            Tensor::new(c.iter().flat_map(|m| m.concat()).collect(), &[v, 3, d])
        };
        let parents = f
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                _ => Err(bad("joint tree: parent indices must be -1 or nonnegative")),
            })
            .collect::<Result<Vec<_>>>()?;
        let rig = HandRig {
            template: flat2(&f.template, 3, "template")?,
            faces: f.faces,
            parents,
            rest_joints: flat2(&f.rest_joints, 3, "rest joints")?,
            weights: flat2(&f.weights, NUM_JOINTS, "skinning weights")?,
            shape_dirs: flat3(&f.shape_blendshapes, NUM_SHAPES, "shape blendshapes")?,
            regressor: flat2(&f.regressor, v, "joint regressor")?,
            pose_dirs: f
                .pose_blendshapes
                .as_ref()
                .map(|p| flat3(p, POSE_FEATURES, "pose blendshapes"))
                .transpose()?,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f: RigFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(f)
    }
}

/// On-disk rig layout: nested arrays, parents use -1 for the root.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub template: Vec<Vec<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub parents: Vec<i64>,
    pub rest_joints: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub shape_blendshapes: Vec<Vec<Vec<f64>>>,
    pub regressor: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_blendshapes: Option<Vec<Vec<Vec<f64>>>>,
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / norm(a))
}

fn point_segment_distance(p: V3, a: V3, b: V3) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    norm(sub(p, add(a, scale(ab, t))))
}

/// A bone-aligned elliptic cylinder that hosts part of the surface.
struct Segment {
    start: V3,
    end: V3,
    radius: (f64, f64),
}

struct Skeleton {
    joints: Vec<V3>,
    tips: Vec<V3>,
    segments: Vec<Segment>,
}

/// Finger layout (base position, direction, phalanx lengths, radius) in MANO finger order.
fn skeleton(rng: &mut SeededRng) -> Skeleton {
    let fingers: [(V3, V3, [f64; 3], f64); 5] = [
        ([-27.0, 78.0, 0.0], [-0.12, 1.0, 0.0], [40.0, 24.0, 19.0], 8.5), // index
        ([-8.0, 82.0, 0.0], [0.0, 1.0, 0.0], [44.0, 27.0, 21.0], 9.0),    // middle
        ([30.0, 70.0, 0.0], [0.2, 1.0, 0.0], [32.0, 19.0, 17.0], 7.5),    // pinky
        ([12.0, 78.0, 0.0], [0.1, 1.0, 0.0], [41.0, 26.0, 20.0], 8.5),    // ring
        ([-28.0, 22.0, 8.0], [-0.8, 0.7, 0.25], [34.0, 29.0, 24.0], 10.0), // thumb
    ];
    let mut joints = vec![[0.0; 3]];
    let mut tips = Vec::new();
    let mut segments = vec![Segment {
        start: [0.0, 0.0, 0.0],
        end: [0.0, 72.0, 0.0],
        radius: (36.0, 12.0),
    }];
    for (base, dir, lens, radius) in fingers {
        let jitter = [rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0];
        let d = unit(dir);
        let mut p = add(base, jitter);
        for (i, len) in lens.iter().enumerate() {
            let len = len * rng.uniform(0.97, 1.03);
            joints.push(p);
            let q = add(p, scale(d, len));
            let r = radius * (1.0 - 0.12 * i as f64);
            segments.push(Segment {
                start: p,
                end: q,
                radius: (r, r),
            });
            p = q;
        }
        tips.push(p);
    }
    Skeleton { joints, tips, segments }
}

/// Procedural five-finger rig: 16 joints, `n_vertices` surface points on
/// bone-aligned cylinders, Gaussian distance skinning, smooth shape
/// blendshapes and a nearest-vertex joint regressor. Deterministic per seed.
pub fn make_default_rig(seed: u64, n_vertices: usize) -> Result<HandRig> {
    const RING: usize = 6;
    const SKIN_SIGMA: f64 = 12.0;
    if n_vertices < 2 * NUM_JOINTS {
        return Err(Error::InvalidRig(format!(
            "at least {} vertices are needed, got {n_vertices}",
            2 * NUM_JOINTS
        )));
    }
    let mut rng = SeededRng::new(seed);
    let sk = skeleton(&mut rng);

    // Palm gets four shares, every phalanx one.
    let shares: Vec<usize> = (0..NUM_JOINTS).map(|k| if k == 0 { 4 } else { 1 }).collect();
    let total: usize = shares.iter().sum();
    let mut counts: Vec<usize> = shares.iter().map(|s| n_vertices * s / total).collect();
    let mut k = 0;
    while counts.iter().sum::<usize>() < n_vertices {
        counts[k % NUM_JOINTS] += 1;
        k += 1;
    }

    let mut verts: Vec<V3> = Vec::with_capacity(n_vertices);
    let mut faces = Vec::new();
    for (seg, &m) in sk.segments.iter().zip(&counts) {
        let axis = sub(seg.end, seg.start);
        let a = unit(axis);
        let helper = if a[2].abs() < 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        // u spans the palm width direction when the axis lies in the palm plane
        let v_dir = unit(cross(a, helper));
        let u_dir = cross(v_dir, a);
        let rings = m.div_ceil(RING);
        let base = verts.len();
        let phase = rng.uniform(0.0, PI / RING as f64);
        for j in 0..m {
            let (ring, slot) = (j / RING, j % RING);
            let t = (ring as f64 + 0.5) / rings as f64;
            let ang = phase + 2.0 * PI * slot as f64 / RING as f64 + if ring % 2 == 1 { PI / RING as f64 } else { 0.0 };
            let offset = add(
                scale(v_dir, seg.radius.0 * ang.cos()),
                scale(u_dir, seg.radius.1 * ang.sin()),
            );
            verts.push(add(add(seg.start, scale(axis, t)), offset));
        }
        for ring in 0..rings.saturating_sub(1) {
            for slot in 0..RING {
                let i00 = ring * RING + slot;
                let i01 = ring * RING + (slot + 1) % RING;
                let i10 = i00 + RING;
                let i11 = i01 + RING;
                if i11.max(i10) < m {
                    faces.push([base + i00, base + i01, base + i10]);
                    faces.push([base + i01, base + i11, base + i10]);
                }
            }
        }
    }

    let mut weights = Vec::with_capacity(n_vertices * NUM_JOINTS);
    for &p in &verts {
        let raw: Vec<f64> = sk
            .segments
            .iter()
            .map(|s| {
                let d = point_segment_distance(p, s.start, s.end);
                (-d * d / (2.0 * SKIN_SIGMA * SKIN_SIGMA)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / z));
    }

    // Shape directions: 0 uniform scale, 1 palm width, 2 depth, rest are
    // smooth per-bone offsets blended through the skinning weights.
    let bone_offsets: Vec<Vec<V3>> = (0..NUM_SHAPES)
        .map(|_| {
            (0..NUM_JOINTS)
                .map(|_| [rng.normal(0.0, 3.0), rng.normal(0.0, 3.0), rng.normal(0.0, 1.5)])
                .collect()
        })
        .collect();
    let mut shape_dirs = vec![0.0; n_vertices * 3 * NUM_SHAPES];
    for (i, &p) in verts.iter().enumerate() {
        for s in 0..NUM_SHAPES {
            let d: V3 = match s {
                0 => scale(p, 0.05),
                1 => [0.06 * p[0], 0.0, 0.0],
                2 => [0.0, 0.0, 0.08 * p[2]],
                _ => (0..NUM_JOINTS).fold([0.0; 3], |acc, k| {
                    add(acc, scale(bone_offsets[s][k], weights[i * NUM_JOINTS + k]))
                }),
            };
            for c in 0..3 {
                shape_dirs[(i * 3 + c) * NUM_SHAPES + s] = d[c];
            }
        }
    }

    // Evaluation joints: wrist, then per finger its three joints and the tip.
    let mut targets = vec![sk.joints[0]];
    for f in 0..5 {
        targets.extend_from_slice(&sk.joints[1 + 3 * f..4 + 3 * f]);
        targets.push(sk.tips[f]);
    }
    const NEAREST: usize = 6;
    let mut regressor = vec![0.0; NUM_EVAL_JOINTS * n_vertices];
    for (j, &t) in targets.iter().enumerate() {
        let mut by_dist: Vec<(f64, usize)> = verts.iter().enumerate().map(|(i, &p)| (norm(sub(p, t)), i)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let chosen = &by_dist[..NEAREST];
        let inv: Vec<f64> = chosen.iter().map(|(d, _)| 1.0 / (d + 1.0)).collect();
        let z: f64 = inv.iter().sum();
        for ((_, i), w) in chosen.iter().zip(&inv) {
            regressor[j * n_vertices + i] = w / z;
        }
    }

    let rig = HandRig {
        template: Tensor::new(verts.concat(), &[n_vertices, 3])?,
        faces,
        parents: PARENTS.to_vec(),
        rest_joints: Tensor::new(sk.joints.concat(), &[NUM_JOINTS, 3])?,
        weights: Tensor::new(weights, &[n_vertices, NUM_JOINTS])?,
        shape_dirs: Tensor::new(shape_dirs, &[n_vertices, 3, NUM_SHAPES])?,
        regressor: Tensor::new(regressor, &[NUM_EVAL_JOINTS, n_vertices])?,
        pose_dirs: None,
    };
    rig.validate()?;
    Ok(rig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_is_valid_and_sized() {
        let rig = make_default_rig(0, DEFAULT_VERTICES).unwrap();
        rig.validate().unwrap();
        assert_eq!(rig.num_vertices(), DEFAULT_VERTICES);
        assert!(!rig.faces.is_empty());
        for v in [40, 100, 778] {
            assert_eq!(make_default_rig(3, v).unwrap().num_vertices(), v);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_default_rig(5, 120).unwrap();
        let b = make_default_rig(5, 120).unwrap();
        let c = make_default_rig(6, 120).unwrap();
        assert_eq!(a.to_file(), b.to_file());
        assert_ne!(a.template.to_vec(), c.template.to_vec());
    }

    #[test]
    fn validation_names_violated_invariant() {
        let rig = make_default_rig(0, 64).unwrap();
        let mut f = rig.to_file();
        f.weights[3][0] += 0.5;
        let msg = HandRig::from_file(f).unwrap_err().to_string();
        assert!(msg.contains("skinning weights: row 3"), "{msg}");

        let mut f = rig.to_file();
        f.parents[5] = 9;
        let msg = HandRig::from_file(f).unwrap_err().to_string();
        assert!(msg.contains("joint tree"), "{msg}");

        let mut f = rig.to_file();
        f.regressor[2][0] += 0.1;
        let msg = HandRig::from_file(f).unwrap_err().to_string();
        assert!(msg.contains("joint regressor: row 2"), "{msg}");
    }

    #[test]
    fn too_few_vertices() {
        assert!(make_default_rig(0, 10).is_err());
    }
}
