//! Finite-difference gradient suite over every differentiable operation and
//! the full network, plus the scan-vs-dense cost benchmark.

use std::time::Instant;

use crate::error::Result;
use crate::handmodel::{lbs, make_default_rig, rodrigues_batch, HandParams};
use crate::nn::{conv2d, grid_sample, layer_norm, softmax, Builder, Mlp, NonLocal, ParamStore};
use crate::pipeline::{pixel_grid, soft_argmax, FullOutput, PipelineConfig, VmBhiNet};
use crate::rng::SeededRng;
use crate::ssm::{dense_scan_apply, selective_scan, VmBlock};
use crate::tensor::{flops, gradcheck, GradCheckConfig, GradCheckReport, Tensor};
use crate::train::{loss_terms, prediction_terms, LossWeights};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

/// Names reported by [`gradient_suite`], in order.
pub const SUITE_OPS: [&str; 13] = [
    "conv2d",
    "layernorm",
    "softmax",
    "grid_sample",
    "non_local",
    "mlp",
    "selective_scan",
    "vmblock",
    "soft_argmax",
    "rodrigues",
    "lbs",
    "loss",
    "end_to_end",
];

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

fn leaf(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::param(rng.uniform_vec(shape.iter().product(), lo, hi), shape)
}

fn weights(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(rng.normal_vec(shape.iter().product(), 0.0, 1.0), shape)
}

fn projected(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum_all())
}

/// Fixed random linear functional of every network output, scaled per output
/// so the total stays small enough for central differences to resolve.
pub fn network_probe_weights(reference: &FullOutput, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = SeededRng::new(seed);
    prediction_terms(reference)
        .iter()
        .map(|p| {
            let rms = (p.data().iter().map(|v| v * v).sum::<f64>() / p.numel() as f64).sqrt();
            Tensor::new(rng.normal_vec(p.numel(), 0.0, 0.02 / rms.max(1.0)), p.shape())
        })
        .collect()
}

pub fn network_probe(out: &FullOutput, weights: &[Tensor]) -> Result<Tensor> {
    let mut acc = Tensor::scalar(0.0);
    for (p, w) in prediction_terms(out).iter().zip(weights) {
        acc = acc.add(&p.mul(w)?.sum_all())?;
    }
    Ok(acc)
}

/// Runs one check per entry of [`SUITE_OPS`]. Per-op checks cover every
/// coordinate of small random inputs; the end-to-end check samples
/// `e2e_coords` coordinates of every parameter tensor of a network built
/// from `net_cfg`.
pub fn gradient_suite(seed: u64, net_cfg: &PipelineConfig, e2e_coords: usize) -> Result<Vec<OpCheck>> {
    let gc = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    let mut push = |op: &'static str, report: GradCheckReport| {
        out.push(OpCheck {
            op,
            tolerance: OP_TOLERANCE,
            report,
        })
    };

    let (x, w, b) = (
        leaf(&mut rng, &[2, 5, 5], -1.0, 1.0)?,
        leaf(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)?,
        leaf(&mut rng, &[3], -1.0, 1.0)?,
    );
    let p = weights(&mut rng, &[3, 3, 3])?;
    push(
        "conv2d",
        gradcheck(
            || projected(&conv2d(&x, &w, Some(&b), 2, 1)?, &p),
            &[x.clone(), w.clone(), b.clone()],
            &gc,
        )?,
    );

    let (x, g, b) = (
        leaf(&mut rng, &[3, 4], -2.0, 2.0)?,
        leaf(&mut rng, &[4], -2.0, 2.0)?,
        leaf(&mut rng, &[4], -2.0, 2.0)?,
    );
    let p = weights(&mut rng, &[3, 4])?;
    push(
        "layernorm",
        gradcheck(
            || projected(&layer_norm(&x, &g, &b, 1e-5)?, &p),
            &[x.clone(), g.clone(), b.clone()],
            &gc,
        )?,
    );

    let x = leaf(&mut rng, &[3, 5], -2.0, 2.0)?;
    let p = weights(&mut rng, &[3, 5])?;
    push(
        "softmax",
        gradcheck(|| projected(&softmax(&x, 1)?, &p), std::slice::from_ref(&x), &gc)?,
    );

    let f = leaf(&mut rng, &[3, 4, 5], -2.0, 2.0)?;
    // sample points kept off the integer grid lines where bilinear weights kink
    let pts: Vec<f64> = (0..6)
        .flat_map(|_| [rng.uniform(0.1, 3.9), rng.uniform(0.1, 2.9)])
        .map(|v| if (v - v.round()).abs() < 1e-3 { v + 0.01 } else { v })
        .collect();
    let pts = Tensor::param(pts, &[6, 2])?;
    let p = weights(&mut rng, &[6, 3])?;
    push(
        "grid_sample",
        gradcheck(
            || projected(&grid_sample(&f, &pts)?, &p),
            &[f.clone(), pts.clone()],
            &gc,
        )?,
    );

    let mut store = ParamStore::new();
    let mut brng = rng.fork();
    let nl = NonLocal::new(&mut Builder::new(&mut store, &mut brng), 4)?;
    // the output projection starts at zero; open it so every branch is exercised
    nl.z.weight.set_data(rng.uniform_vec(nl.z.weight.numel(), -0.5, 0.5))?;
    let (x, ctx) = (
        leaf(&mut rng, &[4, 2, 3], -2.0, 2.0)?,
        leaf(&mut rng, &[4, 2, 3], -2.0, 2.0)?,
    );
    let p = weights(&mut rng, &[4, 2, 3])?;
    let mut inputs = store.tensors();
    inputs.extend([x.clone(), ctx.clone()]);
    push(
        "non_local",
        gradcheck(|| projected(&nl.forward(&x, &ctx)?, &p), &inputs, &gc)?,
    );

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut Builder::new(&mut store, &mut brng), 4, 2);
    let x = leaf(&mut rng, &[3, 4], -2.0, 2.0)?;
    let p = weights(&mut rng, &[3, 4])?;
    let mut inputs = store.tensors();
    inputs.push(x.clone());
    push("mlp", gradcheck(|| projected(&mlp.forward(&x)?, &p), &inputs, &gc)?);

    let (seq, ch, st) = (6, 3, 4);
    let scan_in = [
        leaf(&mut rng, &[seq, ch], -1.0, 1.0)?,
        leaf(&mut rng, &[seq, ch], 0.05, 1.0)?,
        leaf(&mut rng, &[ch, st], -2.0, -0.2)?,
        leaf(&mut rng, &[seq, st], -1.0, 1.0)?,
        leaf(&mut rng, &[seq, st], -1.0, 1.0)?,
        leaf(&mut rng, &[ch], -1.0, 1.0)?,
    ];
    let p = weights(&mut rng, &[seq, ch])?;
    let [sx, sd, sa, sb, sc, sk] = &scan_in;
    push(
        "selective_scan",
        gradcheck(
            || projected(&selective_scan(sx, sd, sa, sb, sc, sk)?, &p),
            &scan_in,
            &gc,
        )?,
    );

    let mut store = ParamStore::new();
    let blk = VmBlock::new(&mut Builder::new(&mut store, &mut brng), 8, &Default::default());
    let x = leaf(&mut rng, &[4, 8], -2.0, 2.0)?;
    let p = weights(&mut rng, &[4, 8])?.mul_scalar(0.1);
    let mut inputs = store.tensors();
    inputs.push(x.clone());
    push("vmblock", gradcheck(|| projected(&blk.forward(&x)?, &p), &inputs, &gc)?);

    let logits = Tensor::param(rng.normal_vec(3 * 12, 0.0, 1.0), &[3, 12])?;
    let grid = pixel_grid(3, 4);
    let p = weights(&mut rng, &[3, 2])?;
    push(
        "soft_argmax",
        gradcheck(
            || projected(&soft_argmax(&logits, &grid)?, &p),
            std::slice::from_ref(&logits),
            &gc,
        )?,
    );

    let mut rows = rng.uniform_vec(9, -2.0, 2.0);
    // rows on the small-angle branch and inside the series region
    rows.extend([1e-5, -2e-5, 3e-6, 0.0, 0.0, 0.0, 5e-3, 1e-3, -4e-3]);
    let aa = Tensor::param(rows, &[6, 3])?;
    let p = weights(&mut rng, &[6, 3, 3])?;
    push(
        "rodrigues",
        gradcheck(|| projected(&rodrigues_batch(&aa)?, &p), std::slice::from_ref(&aa), &gc)?,
    );

    let rig = make_default_rig(seed, 48)?;
    let mut th = rng.normal_vec(48, 0.0, 0.4);
    th[3..6].fill(0.0);
    let hp = HandParams::new(
        Tensor::param(th, &[16, 3])?,
        Tensor::param(rng.normal_vec(10, 0.0, 0.5), &[10])?,
    )?;
    let p = weights(&mut rng, &[48, 3])?.mul_scalar(1e-3);
    push(
        "lbs",
        gradcheck(
            || projected(&lbs(&rig, &hp)?.vertices, &p),
            &[hp.theta.clone(), hp.beta.clone()],
            &gc,
        )?,
    );

    let shapes: [&[usize]; 9] = [
        &[16, 3],
        &[16, 3],
        &[10],
        &[10],
        &[21, 3],
        &[21, 3],
        &[30, 3],
        &[30, 3],
        &[3],
    ];
    let pred: Vec<Tensor> = shapes
        .iter()
        .map(|s| leaf(&mut rng, s, -1.0, 1.0))
        .collect::<Result<_>>()?;
    let gt: Vec<Tensor> = shapes.iter().map(|s| weights(&mut rng, s)).collect::<Result<_>>()?;
    let lw = LossWeights::from_array(std::array::from_fn(|i| 0.3 + 0.1 * i as f64));
    let refs = |v: &[Tensor]| -> [Tensor; 9] { std::array::from_fn(|i| v[i].clone()) };
    let (pa, ga) = (refs(&pred), refs(&gt));
    push(
        "loss",
        gradcheck(|| Ok(loss_terms(pa.each_ref(), ga.each_ref(), &lw)?.total), &pred, &gc)?,
    );

    let net = VmBhiNet::new(net_cfg)?;
    let n = 3 * net_cfg.image_height * net_cfg.image_width;
    let img = Tensor::new(
        rng.uniform_vec(n, 0.0, 1.0),
        &[3, net_cfg.image_height, net_cfg.image_width],
    )?;
    let probe_w = network_probe_weights(&net.forward(&img)?, seed)?;
    let e2e = GradCheckConfig {
        max_coords_per_input: Some(e2e_coords),
        ..gc
    };
    let report = gradcheck(
        || network_probe(&net.forward(&img)?, &probe_w),
        &net.params.tensors(),
        &e2e,
    )?;
    out.push(OpCheck {
        op: "end_to_end",
        tolerance: END_TO_END_TOLERANCE,
        report,
    });
    Ok(out)
}

/// One row of the scan cost comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanBenchRow {
    pub seq: usize,
    pub scan_flops: u64,
    pub dense_flops: u64,
    pub scan_secs: f64,
    pub dense_secs: f64,
}

pub const SCAN_BENCH_HEADER: &str = "seq,scan_flops,dense_flops,scan_seconds,dense_seconds";

impl ScanBenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.seq, self.scan_flops, self.dense_flops, self.scan_secs, self.dense_secs
        )
    }
}

/// Counted FLOPs and wall time of the recurrent scan and of the materialized
/// quadratic operator on the same random inputs, per sequence length.
pub fn scan_bench(seq_lengths: &[usize], channels: usize, state: usize, seed: u64) -> Result<Vec<ScanBenchRow>> {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::with_capacity(seq_lengths.len());
    for &seq in seq_lengths {
        let x = rng.uniform_vec(seq * channels, -1.0, 1.0);
        let delta = rng.uniform_vec(seq * channels, 0.01, 0.1);
        let a: Vec<f64> = (0..channels * state).map(|i| -((i % state) as f64 + 1.0)).collect();
        let b = rng.uniform_vec(seq * state, -1.0, 1.0);
        let c = rng.uniform_vec(seq * state, -1.0, 1.0);
        let d = rng.uniform_vec(channels, -1.0, 1.0);

        let tensors = (
            Tensor::new(x.clone(), &[seq, channels])?,
            Tensor::new(delta.clone(), &[seq, channels])?,
            Tensor::new(a.clone(), &[channels, state])?,
            Tensor::new(b.clone(), &[seq, state])?,
            Tensor::new(c.clone(), &[seq, state])?,
            Tensor::new(d.clone(), &[channels])?,
        );
        let start = Instant::now();
        let (y, scan_flops) = flops::measure(|| {
            let (x, dt, a, b, c, d) = &tensors;
            selective_scan(x, dt, a, b, c, d)
        });
        y?;
        let scan_secs = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let (_, dense_flops) = flops::measure(|| dense_scan_apply(&x, &delta, &a, &b, &c, &d, seq, channels, state));
        let dense_secs = start.elapsed().as_secs_f64();
        rows.push(ScanBenchRow {
            seq,
            scan_flops,
            dense_flops,
            scan_secs,
            dense_secs,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::HandModelConfig;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            image_height: 16,
            image_width: 16,
            backbone_channels: 16,
            backbone_stages: 2,
            joints: 5,
            depth_bins: 4,
            ife_depth: 1,
            jvm_depth: 1,
            hand_model: HandModelConfig::Procedural { vertices: 40, seed: 1 },
            ..PipelineConfig::toy()
        }
    }

    #[test]
    fn suite_lists_every_op_once_and_passes() {
        let checks = gradient_suite(0, &tiny(), 1).unwrap();
        let names: Vec<&str> = checks.iter().map(|c| c.op).collect();
        assert_eq!(names, SUITE_OPS);
        for c in &checks {
            assert!(c.passed(), "{} {:?}", c.op, c.report);
        }
    }

    #[test]
    fn corrupted_rule_is_detected_and_named() {
        crate::tensor::set_corrupt_grad_op(Some("layernorm"));
        let checks = gradient_suite(0, &tiny(), 1);
        crate::tensor::set_corrupt_grad_op(None);
        let failed: Vec<&str> = checks.unwrap().iter().filter(|c| !c.passed()).map(|c| c.op).collect();
        assert!(failed.contains(&"layernorm"), "{failed:?}");
        assert!(!failed.contains(&"rodrigues"));
    }

    #[test]
    fn bench_ratios_and_length_one() {
        let rows = scan_bench(&[1, 64, 128], 2, 4, 0).unwrap();
        assert_eq!(rows[0].seq, 1);
        assert_eq!(rows[2].scan_flops, 2 * rows[1].scan_flops);
        let dense = rows[2].dense_flops as f64 / rows[1].dense_flops as f64;
        assert!((3.8..=4.2).contains(&dense), "{dense}");
        assert_eq!(
            SCAN_BENCH_HEADER.split(',').count(),
            rows[0].csv_row().split(',').count()
        );
    }
}
