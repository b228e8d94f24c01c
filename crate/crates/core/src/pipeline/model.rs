use super::config::PipelineConfig;
use super::heads::{Dhpr, Heatmap2p5D, Hjfe, JointCoords, JointFeatures};
use crate::error::{shape_err, Result};
use crate::handmodel::{lbs, HandOutput, HandParams, HandRig};
use crate::nn::{Builder, Conv2d, LayerNorm, NonLocal, ParamStore};
use crate::rng::SeededRng;
use crate::ssm::{featuremap_to_sequence, sequence_to_featuremap, ScanOrder, VmStack};
use crate::tensor::Tensor;

/// Layer norm over the channels of every pixel of a `[c, h, w]` map.
fn channel_norm(norm: &LayerNorm, x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let rows = x.reshape(&[c, h * w])?.t()?;
    norm.forward(&rows)?.t()?.reshape(&[c, h, w])
}

/// Conv → channel norm → ReLU.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl ConvBlock {
    fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.sub("conv"), c_in, c_out, k, stride, k / 2)?,
            norm: LayerNorm::new(&mut b.sub("norm"), c_out),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(channel_norm(&self.norm, &self.conv.forward(x)?)?.relu())
    }
}

/// Strided conv trunk followed by separate left and right 1×1 branches.
pub struct Backbone {
    pub stages: Vec<ConvBlock>,
    pub left: ConvBlock,
    pub right: ConvBlock,
    input: [usize; 3],
}

impl Backbone {
    pub fn new(b: &mut Builder, cfg: &PipelineConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.backbone_stages);
        let mut c_in = 3;
        for i in 0..cfg.backbone_stages {
            let c_out = cfg.stage_channels(i);
            stages.push(ConvBlock::new(&mut b.sub(&format!("stage{i}")), c_in, c_out, 3, 2)?);
            c_in = c_out;
        }
        let c = cfg.hand_channels();
        Ok(Self {
            stages,
            left: ConvBlock::new(&mut b.sub("left"), c_in, c, 1, 1)?,
            right: ConvBlock::new(&mut b.sub("right"), c_in, c, 1, 1)?,
            input: [3, cfg.image_height, cfg.image_width],
        })
    }

    /// Shared trunk output `F`.
    pub fn trunk(&self, img: &Tensor) -> Result<Tensor> {
        if img.shape() != self.input {
            return Err(shape_err("backbone", img.shape(), &self.input));
        }
        self.stages.iter().try_fold(img.clone(), |x, s| s.forward(&x))
    }

    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.trunk(img)?;
        Ok((self.left.forward(&f)?, self.right.forward(&f)?))
    }
}

/// Intermediate maps of the interaction block, each `[c, h, w]`.
#[derive(Clone, Debug)]
pub struct IfeOutput {
    pub f_enh_l: Tensor,
    pub f_enh_r: Tensor,
    pub f_inter_l: Tensor,
    pub f_inter_r: Tensor,
    pub f_enh_l_star: Tensor,
    pub f_enh_r_star: Tensor,
}

/// Concatenate hands → 1×1 conv → VMBlocks over the flattened map → chunk
/// back into hands → cross non-local interaction → 1×1 fusion.
/// The interaction and fusion layers are shared by both hands.
pub struct VmIfeBlock {
    pub reduce: Conv2d,
    pub vm: VmStack,
    pub ifem: NonLocal,
    pub fuse: Conv2d,
    order: ScanOrder,
    c: usize,
}

impl VmIfeBlock {
    pub fn new(b: &mut Builder, cfg: &PipelineConfig) -> Result<Self> {
        let c = cfg.hand_channels();
        Ok(Self {
            reduce: Conv2d::new(&mut b.sub("reduce"), 2 * c, 2 * c, 1, 1, 0)?,
            vm: VmStack::new(&mut b.sub("vm"), cfg.ife_depth, 2 * c, &cfg.vmblock),
            ifem: NonLocal::new(&mut b.sub("ifem"), c)?,
            fuse: Conv2d::new(&mut b.sub("fuse"), 2 * c, c, 1, 1, 0)?,
            order: cfg.scan_order,
            c,
        })
    }

    /// `F_enh` before the chunk step, `[2c, h, w]`.
    pub fn enhance(&self, f_l: &Tensor, f_r: &Tensor) -> Result<Tensor> {
        if f_l.shape() != f_r.shape() || f_l.ndim() != 3 || f_l.dim(0) != self.c {
            return Err(shape_err("vm_ifeblock", f_l.shape(), f_r.shape()));
        }
        let (h, w) = (f_l.dim(1), f_l.dim(2));
        let concat = self.reduce.forward(&Tensor::concat(&[f_l.clone(), f_r.clone()], 0)?)?;
        let seq = self.vm.forward(&featuremap_to_sequence(&concat, self.order)?)?;
        sequence_to_featuremap(&seq, self.order, h, w)
    }

    /// Cross-hand interaction and fusion for one hand, with the other hand as context.
    pub fn interact(&self, own: &Tensor, other: &Tensor) -> Result<(Tensor, Tensor)> {
        let inter = self.ifem.forward(own, other)?;
        let star = self.fuse.forward(&Tensor::concat(&[own.clone(), inter.clone()], 0)?)?;
        Ok((inter, star))
    }

    pub fn forward(&self, f_l: &Tensor, f_r: &Tensor) -> Result<IfeOutput> {
        let enh = self.enhance(f_l, f_r)?;
        let f_enh_l = enh.narrow(0, 0, self.c)?;
        let f_enh_r = enh.narrow(0, self.c, self.c)?;
        let (f_inter_l, f_enh_l_star) = self.interact(&f_enh_l, &f_enh_r)?;
        let (f_inter_r, f_enh_r_star) = self.interact(&f_enh_r, &f_enh_l)?;
        Ok(IfeOutput {
            f_enh_l,
            f_enh_r,
            f_inter_l,
            f_inter_r,
            f_enh_l_star,
            f_enh_r_star,
        })
    }

    /// Sets every sub-layer to pass its input through: identity reduction,
    /// zeroed VMBlock and non-local residual branches, fusion selecting the
    /// enhanced map.
    pub fn make_pass_through(&self) {
        let c = self.c;
        let eye = |n: usize, cols: usize| -> Vec<f64> {
            (0..n * cols)
                .map(|i| if i / cols == i % cols { 1.0 } else { 0.0 })
                .collect()
        };
        self.reduce.weight.set_data(eye(2 * c, 2 * c)).expect("leaf");
        self.reduce.bias.set_data(vec![0.0; 2 * c]).expect("leaf");
        self.vm.zero_output_projections();
        let z = &self.ifem.z;
        z.weight.set_data(vec![0.0; z.weight.numel()]).expect("leaf");
        z.bias.set_data(vec![0.0; z.bias.numel()]).expect("leaf");
        self.fuse.weight.set_data(eye(c, 2 * c)).expect("leaf");
        self.fuse.bias.set_data(vec![0.0; c]).expect("leaf");
    }
}

/// Joint-feature refinement shared by both hands; each hand is a length-`J` sequence.
pub struct JvmBlock {
    pub vm: VmStack,
}

impl JvmBlock {
    pub fn forward(&self, f_jl: &JointFeatures, f_jr: &JointFeatures) -> Result<(JointFeatures, JointFeatures)> {
        if f_jl.data.shape() != f_jr.data.shape() {
            return Err(shape_err("jvmblock", f_jl.data.shape(), f_jr.data.shape()));
        }
        let refine = |f: &JointFeatures| -> Result<JointFeatures> {
            Ok(JointFeatures {
                data: self.vm.forward(&f.data)?,
                refined: true,
            })
        };
        Ok((refine(f_jl)?, refine(f_jr)?))
    }
}

/// Everything computed between the image and the hand parameters.
#[derive(Clone, Debug)]
pub struct Intermediates {
    pub f_l: Tensor,
    pub f_r: Tensor,
    pub ife: IfeOutput,
    pub heatmap_l: Heatmap2p5D,
    pub heatmap_r: Heatmap2p5D,
    pub coords_l: JointCoords,
    pub coords_r: JointCoords,
    pub f_jl: JointFeatures,
    pub f_jr: JointFeatures,
    pub f_jl_refined: JointFeatures,
    pub f_jr_refined: JointFeatures,
}

/// Network outputs; joints and vertices are rig-frame millimeters.
#[derive(Clone, Debug)]
pub struct FullOutput {
    pub theta_l: Tensor,
    pub theta_r: Tensor,
    pub beta_l: Tensor,
    pub beta_r: Tensor,
    /// `[21, 3]`.
    pub joints_l: Tensor,
    pub joints_r: Tensor,
    /// `[V, 3]`.
    pub vertices_l: Tensor,
    pub vertices_r: Tensor,
    /// `[3]`, millimeters.
    pub t_rel: Tensor,
    pub intermediates: Intermediates,
}

pub struct VmBhiNet {
    pub config: PipelineConfig,
    pub params: ParamStore,
    pub rig: HandRig,
    pub backbone: Backbone,
    pub ife: VmIfeBlock,
    pub hjfe_l: Hjfe,
    /// Present only when the hands use separate joint heads.
    pub hjfe_r: Option<Hjfe>,
    pub jvm: JvmBlock,
    pub dhpr: Dhpr,
}

impl VmBhiNet {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        let rig = config.hand_model.build()?;
        Self::with_rig(config, rig)
    }

    pub fn with_rig(config: &PipelineConfig, rig: HandRig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SeededRng::new(config.seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let c = config.hand_channels();
        let (j, d) = (config.joints, config.depth_bins);
        let backbone = Backbone::new(&mut b.sub("backbone"), config)?;
        let ife = VmIfeBlock::new(&mut b.sub("ife"), config)?;
        let (hjfe_l, hjfe_r) = if config.share_hjfe {
            (Hjfe::new(&mut b.sub("hjfe"), c, j, d)?, None)
        } else {
            (
                Hjfe::new(&mut b.sub("hjfe_l"), c, j, d)?,
                Some(Hjfe::new(&mut b.sub("hjfe_r"), c, j, d)?),
            )
        };
        let jvm = JvmBlock {
            vm: VmStack::new(&mut b.sub("jvm"), config.jvm_depth, c, &config.vmblock),
        };
        let dhpr = Dhpr::new(&mut b.sub("dhpr"), c, j, config.translation_scale);
        Ok(Self {
            config: config.clone(),
            params,
            rig,
            backbone,
            ife,
            hjfe_l,
            hjfe_r,
            jvm,
            dhpr,
        })
    }

    pub fn hjfe_right(&self) -> &Hjfe {
        self.hjfe_r.as_ref().unwrap_or(&self.hjfe_l)
    }

    /// Hand parameters and intermediates, without the mesh layer.
    pub fn regress(&self, img: &Tensor) -> Result<(HandParams, HandParams, Tensor, Intermediates)> {
        let (f_l, f_r) = self.backbone.forward(img)?;
        let ife = self.ife.forward(&f_l, &f_r)?;
        let (heatmap_l, coords_l, f_jl) = self.hjfe_l.forward(&ife.f_enh_l_star)?;
        let (heatmap_r, coords_r, f_jr) = self.hjfe_right().forward(&ife.f_enh_r_star)?;
        let (f_jl_refined, f_jr_refined) = self.jvm.forward(&f_jl, &f_jr)?;
        let (left, right, t_rel) = self.dhpr.forward(
            [&f_jl_refined, &f_jr_refined],
            [&coords_l, &coords_r],
            [&ife.f_enh_l_star, &ife.f_enh_r_star],
        )?;
        let inter = Intermediates {
            f_l,
            f_r,
            ife,
            heatmap_l,
            heatmap_r,
            coords_l,
            coords_r,
            f_jl,
            f_jr,
            f_jl_refined,
            f_jr_refined,
        };
        Ok((left, right, t_rel, inter))
    }

    /// `[3, H, W]` image to both hand meshes and their relative translation.
    pub fn forward(&self, img: &Tensor) -> Result<FullOutput> {
        let (left, right, t_rel, intermediates) = self.regress(img)?;
        let HandOutput {
            vertices: vertices_l,
            joints: joints_l,
        } = lbs(&self.rig, &left)?;
        let HandOutput {
            vertices: vertices_r,
            joints: joints_r,
        } = lbs(&self.rig, &right)?;
        Ok(FullOutput {
            theta_l: left.theta,
            theta_r: right.theta,
            beta_l: left.beta,
            beta_r: right.beta,
            joints_l,
            joints_r,
            vertices_l,
            vertices_r,
            t_rel,
            intermediates,
        })
    }
}
