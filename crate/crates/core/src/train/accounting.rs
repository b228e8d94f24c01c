//! Closed-form parameter and FLOP totals for a network configuration.
//!
//! FLOPs cover the kernels that record into [`crate::tensor::flops`]: dense
//! products, convolutions, scans and bilinear sampling.

use crate::error::Result;
use crate::handmodel::{HandRig, NUM_EVAL_JOINTS, NUM_JOINTS, NUM_SHAPES, POSE_FEATURES};
use crate::nn::NonLocal;
use crate::pipeline::PipelineConfig;
use crate::ssm::VmBlockConfig;
use crate::tensor::flops;

/// Reported totals of the full-size model.
pub const PAPER_PARAMS_M: f64 = 36.99;
pub const PAPER_GFLOPS: f64 = 12.97;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(it: I) -> Cost {
        it.fold(Cost::default(), |a, b| a + b)
    }
}

/// Per-component breakdown.
#[derive(Clone, Debug)]
pub struct ModelCost {
    pub parts: Vec<(&'static str, Cost)>,
}

impl ModelCost {
    pub fn total(&self) -> Cost {
        self.parts.iter().map(|p| p.1).sum()
    }
}

fn linear(rows: usize, d_in: usize, d_out: usize) -> Cost {
    Cost {
        params: (d_in * d_out + d_out) as u64,
        flops: flops::matmul(rows, d_in, d_out),
    }
}

fn conv(k: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> Cost {
    Cost {
        params: (k * k * c_in * c_out + c_out) as u64,
        flops: flops::conv2d(k, c_in, c_out, h, w, true),
    }
}

fn norm(width: usize) -> Cost {
    Cost {
        params: 2 * width as u64,
        flops: 0,
    }
}

/// One VMBlock of `width` applied to a length-`seq` sequence.
pub fn vmblock(seq: usize, width: usize, cfg: &VmBlockConfig) -> Cost {
    let inner = width * cfg.expansion;
    let n = cfg.state_dim;
    let r = VmBlockConfig::dt_rank(width);
    let k = cfg.conv_width;
    let hidden = width * cfg.mlp_ratio.max(1);
    let dwconv = Cost {
        params: (inner * k + inner) as u64,
        flops: flops::depthwise_conv1d(seq, inner, k),
    };
    let scan = Cost {
        params: (inner * n + inner) as u64,
        flops: flops::selective_scan(seq, inner, n),
    };
    norm(width)
        + linear(seq, width, inner)
        + linear(seq, width, inner)
        + dwconv
        + linear(seq, inner, r + 2 * n)
        + linear(seq, r, inner)
        + scan
        + linear(seq, inner, width)
        + norm(width)
        + linear(seq, width, hidden)
        + linear(seq, hidden, width)
}

fn hand_model(rig_vertices: usize, pose_blendshapes: bool) -> Cost {
    let v = rig_vertices;
    let parents = NUM_JOINTS - 1;
    let mut f = flops::matmul(3 * v, NUM_SHAPES, 1)
        + parents as u64 * (flops::matmul(3, 3, 1) + flops::matmul(3, 3, 3))
        + NUM_JOINTS as u64 * flops::matmul(3, 3, 1)
        + flops::matmul(v, NUM_JOINTS, 12)
        + flops::matmul(NUM_EVAL_JOINTS, v, 3);
    if pose_blendshapes {
        f += flops::matmul(3 * v, POSE_FEATURES, 1);
    }
    Cost { params: 0, flops: f }
}

/// Trainable parameters and per-image forward FLOPs, by component.
pub fn model_cost(cfg: &PipelineConfig, rig_vertices: usize, pose_blendshapes: bool) -> ModelCost {
    let c = cfg.hand_channels();
    let (h, w) = cfg.feature_size();
    let hw = h * w;
    let (j, d) = (cfg.joints, cfg.depth_bins);

    let mut backbone = Cost::default();
    let (mut c_in, mut size) = (3usize, (cfg.image_height, cfg.image_width));
    for i in 0..cfg.backbone_stages {
        let c_out = cfg.stage_channels(i);
        size = (size.0 / 2, size.1 / 2);
        backbone = backbone + conv(3, c_in, c_out, size.0, size.1) + norm(c_out);
        c_in = c_out;
    }
    for _ in 0..2 {
        backbone = backbone + conv(1, c_in, c, h, w) + norm(c);
    }

    let ci = NonLocal::inner_channels(c);
    let nonlocal_params = Cost {
        params: (3 * (c * ci + ci) + ci * c + c) as u64,
        flops: 0,
    };
    let nonlocal_apply = Cost {
        params: 0,
        flops: 3 * flops::conv2d(1, c, ci, h, w, true)
            + flops::matmul(hw, ci, hw)
            + flops::matmul(ci, hw, hw)
            + flops::conv2d(1, ci, c, h, w, true),
    };
    let fuse = conv(1, 2 * c, c, h, w);
    let ife = conv(1, 2 * c, 2 * c, h, w)
        + (0..cfg.ife_depth)
            .map(|_| vmblock(hw, 2 * c, &cfg.vmblock))
            .sum::<Cost>()
        + nonlocal_params
        + nonlocal_apply
        + nonlocal_apply
        + fuse
        + Cost {
            params: 0,
            flops: fuse.flops,
        };

    let head = conv(1, c, j, h, w) + linear(1, c, j * d);
    let locate = Cost {
        params: 0,
        flops: flops::matmul(j, hw, 2) + flops::matmul(j, d, 1) + flops::grid_sample(j, c),
    };
    let hjfe = if cfg.share_hjfe {
        head + Cost {
            params: 0,
            flops: head.flops,
        }
    } else {
        head + head
    } + locate
        + locate;

    let block = vmblock(j, c, &cfg.vmblock);
    let jvm = (0..cfg.jvm_depth)
        .map(|_| Cost {
            params: block.params,
            flops: 2 * block.flops,
        })
        .sum::<Cost>();

    let pose_in = j * (c + 3);
    let dhpr = linear(1, pose_in, NUM_JOINTS * 3)
        + linear(1, pose_in, NUM_JOINTS * 3)
        + linear(1, c, NUM_SHAPES)
        + linear(1, c, NUM_SHAPES)
        + linear(1, 2 * c, 3);

    let mano = hand_model(rig_vertices, pose_blendshapes);
    ModelCost {
        parts: vec![
            ("backbone", backbone),
            ("vm_ifeblock", ife),
            ("hjfe", hjfe),
            ("jvmblock", jvm),
            ("dhpr", dhpr),
            ("hand_model", mano + mano),
        ],
    }
}

/// `(parameters, forward FLOPs)` for a configuration, with the rig it names.
pub fn count_params_flops(cfg: &PipelineConfig) -> Result<(u64, u64)> {
    let rig: HandRig = cfg.hand_model.build()?;
    let total = model_cost(cfg, rig.num_vertices(), rig.pose_dirs.is_some()).total();
    Ok((total.params, total.flops))
}

/// Human-readable comparison with the reported full-size totals.
pub fn report(cfg: &PipelineConfig, cost: &ModelCost) -> String {
    let total = cost.total();
    let params_m = total.params as f64 / 1e6;
    let gflops = total.flops as f64 / 1e9;
    let mut s = format!(
        "profile: {}x{} input, C={}, feature map {:?}, ife_depth={}, jvm_depth={}\n",
        cfg.image_height,
        cfg.image_width,
        cfg.backbone_channels,
        cfg.feature_size(),
        cfg.ife_depth,
        cfg.jvm_depth
    );
    for (name, c) in &cost.parts {
        s += &format!("  {name:<12} params {:>12}  flops {:>15}\n", c.params, c.flops);
    }
    s += &format!(
        "params  {params_m:.3} M   (reported {PAPER_PARAMS_M} M, deviation {:+.1}%)\n",
        100.0 * (params_m / PAPER_PARAMS_M - 1.0)
    );
    s += &format!(
        "GFLOPs  {gflops:.3}     (reported {PAPER_GFLOPS}, deviation {:+.1}%)\n",
        100.0 * (gflops / PAPER_GFLOPS - 1.0)
    );
    s
}
