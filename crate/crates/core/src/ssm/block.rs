use super::scan::selective_scan;
use crate::error::{shape_err, Result};
use crate::nn::{Builder, Init, LayerNorm, Linear, Mlp};
use crate::tensor::{flops, BackwardCtx, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmBlockConfig {
    pub state_dim: usize,
    pub expansion: usize,
    pub conv_width: usize,
    pub mlp_ratio: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for VmBlockConfig {
    fn default() -> Self {
        Self {
            state_dim: 8,
            expansion: 2,
            conv_width: 4,
            mlp_ratio: 2,
            dt_min: 0.01,
            dt_max: 0.1,
        }
    }
}

impl VmBlockConfig {
    pub fn dt_rank(width: usize) -> usize {
        width.div_ceil(16)
    }
}

/// Causal depthwise convolution along the sequence axis of `[seq, ch]`:
/// `y_td = bias_d + Σ_j w_dj · x_{t-k+1+j, d}` with zero left padding.
pub fn depthwise_conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || weight.ndim() != 2 || weight.dim(0) != x.dim(1) || bias.shape() != [x.dim(1)] {
        return Err(shape_err("depthwise_conv1d", x.shape(), weight.shape()));
    }
    let (seq, ch, k) = (x.dim(0), x.dim(1), weight.dim(1));
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut y = vec![0.0; seq * ch];
    for t in 0..seq {
        for d in 0..ch {
            let mut acc = bd[d];
            for j in 0..k {
                if let Some(src) = (t + j + 1).checked_sub(k) {
                    acc += wd[d * k + j] * xd[src * ch + d];
                }
            }
            y[t * ch + d] = acc;
        }
    }
    drop((xd, wd, bd));
    flops::record(flops::depthwise_conv1d(seq, ch, k));
    Ok(Tensor::from_op(
        "depthwise_conv1d",
        vec![seq, ch],
        y,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx.grad_out;
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let mut gx = vec![0.0; seq * ch];
            let mut gw = vec![0.0; ch * k];
            let mut gb = vec![0.0; ch];
            for t in 0..seq {
                for d in 0..ch {
                    let go = g[t * ch + d];
                    gb[d] += go;
                    for j in 0..k {
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            gw[d * k + j] += go * xd[src * ch + d];
                            gx[src * ch + d] += go * wd[d * k + j];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    ))
}

/// State-space parameters plus the input-dependent projections producing Δ, B, C.
pub struct Ssm {
    /// `A = -exp(a_log)`, shape `[ch, state]`.
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub state_dim: usize,
    pub dt_rank: usize,
}

impl Ssm {
    pub fn new(b: &mut Builder, ch: usize, width: usize, cfg: &VmBlockConfig) -> Self {
        let n = cfg.state_dim;
        let dt_rank = VmBlockConfig::dt_rank(width);
        let a_log: Vec<f64> = (0..ch).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();
        let a_log = b.param("a_log", &[ch, n], Init::Values(a_log));
        let d_skip = b.param("d_skip", &[ch], Init::Const(1.0));
        let x_proj = Linear::new(&mut b.sub("x_proj"), ch, dt_rank + 2 * n);
        // Δ bias uniform between the inverse softplus of dt_min and dt_max
        let inv_softplus = |y: f64| (y.exp() - 1.0).ln();
        let dt_bias = b
            .rng()
            .uniform_vec(ch, inv_softplus(cfg.dt_min), inv_softplus(cfg.dt_max));
        let std = (dt_rank as f64).powf(-0.5);
        let dt_proj = Linear::with_init(
            &mut b.sub("dt_proj"),
            dt_rank,
            ch,
            Init::Uniform(-std, std),
            Init::Values(dt_bias),
        );
        Self {
            a_log,
            d_skip,
            x_proj,
            dt_proj,
            state_dim: n,
            dt_rank,
        }
    }

    /// Continuous-time diagonal `A = -exp(a_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.exp().neg()
    }

    /// Input-dependent `(Δ, B, C)` for a `[seq, ch]` input.
    pub fn project(&self, u: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let proj = self.x_proj.forward(u)?;
        let n = self.state_dim;
        let dt_in = proj.narrow(1, 0, self.dt_rank)?;
        let b = proj.narrow(1, self.dt_rank, n)?;
        let c = proj.narrow(1, self.dt_rank + n, n)?;
        let delta = self.dt_proj.forward(&dt_in)?.softplus();
        Ok((delta, b, c))
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let (delta, b, c) = self.project(u)?;
        selective_scan(u, &delta, &self.a(), &b, &c, &self.d_skip)
    }
}

/// Mamba-style block with an MLP sub-block:
/// `x' = x + Out(SiLU(Gate(LN(x))) ⊙ Scan(SiLU(DwConv(In(LN(x))))))`,
/// `y = x' + MLP(LN(x'))`.
pub struct VmBlock {
    pub norm1: LayerNorm,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub ssm: Ssm,
    pub out_proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    width: usize,
}

impl VmBlock {
    pub fn new(b: &mut Builder, width: usize, cfg: &VmBlockConfig) -> Self {
        let inner = width * cfg.expansion;
        let k = cfg.conv_width;
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), width),
            in_proj: Linear::new(&mut b.sub("in_proj"), width, inner),
            gate_proj: Linear::new(&mut b.sub("gate_proj"), width, inner),
            conv_weight: b.param("conv.weight", &[inner, k], Init::Uniform(-bound, bound)),
            conv_bias: b.param("conv.bias", &[inner], Init::Uniform(-bound, bound)),
            ssm: Ssm::new(&mut b.sub("ssm"), inner, width, cfg),
            out_proj: Linear::new(&mut b.sub("out_proj"), inner, width),
            norm2: LayerNorm::new(&mut b.sub("norm2"), width),
            mlp: Mlp::new(&mut b.sub("mlp"), width, cfg.mlp_ratio),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Zeroes the two residual-branch output layers; the block becomes the identity.
    pub fn zero_output_projections(&self) {
        self.out_proj.zero_();
        self.mlp.fc2.zero_();
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.dim(1) != self.width {
            return Err(shape_err("vmblock", x.shape(), &[self.width]));
        }
        let h = self.norm1.forward(x)?;
        let u = depthwise_conv1d(&self.in_proj.forward(&h)?, &self.conv_weight, &self.conv_bias)?.silu();
        let s = self.ssm.forward(&u)?;
        let gate = self.gate_proj.forward(&h)?.silu();
        let x1 = x.add(&self.out_proj.forward(&s.mul(&gate)?)?)?;
        x1.add(&self.mlp.forward(&self.norm2.forward(&x1)?)?)
    }
}

/// Sequential stack of blocks.
pub struct VmStack {
    pub blocks: Vec<VmBlock>,
}

impl VmStack {
    pub fn new(b: &mut Builder, depth: usize, width: usize, cfg: &VmBlockConfig) -> Self {
        let blocks = (0..depth)
            .map(|i| VmBlock::new(&mut b.sub(&format!("block{i}")), width, cfg))
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |acc, blk| blk.forward(&acc))
    }

    pub fn zero_output_projections(&self) {
        self.blocks.iter().for_each(VmBlock::zero_output_projections);
    }
}
