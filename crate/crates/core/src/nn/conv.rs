use std::rc::Rc;

use super::params::{Builder, Init};
use crate::error::{contract, shape_err, Result};
use crate::tensor::{flops, BackwardCtx, Tensor};
use crate::tensor::{matmul_grad_a, matmul_grad_b, matmul_raw};

/// 2-D convolution over a single `[c, h, w]` feature map.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(contract(format!("kernel size {k} unsupported (1 or 3)")));
        }
        if stride == 0 {
            return Err(contract("stride must be positive"));
        }
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: b.param("weight", &[c_out, c_in, k, k], Init::Uniform(-bound, bound)),
            bias: b.param("bias", &[c_out], Init::Uniform(-bound, bound)),
            stride,
            padding,
        })
    }

    /// 1×1 convolution with explicit initial values.
    pub fn pointwise_with(b: &mut Builder, c_in: usize, c_out: usize, weight: Init, bias: Init) -> Self {
        Self {
            weight: b.param("weight", &[c_out, c_in, 1, 1], weight),
            bias: b.param("bias", &[c_out], bias),
            stride: 1,
            padding: 0,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    /// Input coordinate feeding output (oy, ox) through kernel tap (ky, kx).
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.h_out * self.w_out;
        let mut cols = vec![0.0; self.c_in * self.k * self.k * p];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                cols[row * p + oy * self.w_out + ox] = x[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.h_out * self.w_out;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                x[(c * self.h + y) * self.w + xx] += cols[row * p + oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn is_identity_layout(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Cross-correlation of `x[c_in,h,w]` with `weight[c_out,c_in,k,k]` plus bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
        return Err(shape_err("conv2d", xs, ws));
    }
    let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err("conv2d bias", b.shape(), &[c_out]));
        }
    }
    let (h, w) = (xs[1], xs[2]);
    let (Some(h_out), Some(w_out)) = (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) else {
        return Err(shape_err("conv2d spatial", xs, ws));
    };
    let geo = Rc::new(Geometry {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    });
    let p = h_out * w_out;
    let kk = c_in * k * k;
    let cols: Rc<Vec<f64>> = Rc::new(if geo.is_identity_layout() {
        x.to_vec()
    } else {
        geo.im2col(&x.data())
    });
    let mut out = matmul_raw(&weight.data(), &cols, c_out, kk, p);
    if let Some(b) = bias {
        let bd = b.data();
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bd[o]);
        }
    }
    flops::record(flops::conv2d(k, c_in, c_out, h_out, w_out, bias.is_some()));

    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![c_out, h_out, w_out],
        out,
        inputs,
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx.grad_out;
            let gx = ctx.needs(0).then(|| {
                let dcols = matmul_grad_b(&ctx.inputs[1].data(), g, c_out, kk, p);
                if geo.is_identity_layout() {
                    dcols
                } else {
                    geo.col2im(&dcols)
                }
            });
            let gw = ctx.needs(1).then(|| matmul_grad_a(g, &cols, c_out, kk, p));
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs(2).then(|| g.chunks(p).map(|c| c.iter().sum()).collect()));
            }
            res
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;
    use crate::tensor::{gradcheck, GradCheckConfig};

    fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(rng.uniform_vec(n, -2.0, 2.0), shape).unwrap()
    }

    #[test]
    fn one_by_one_identity_and_channel_sum() {
        let x = Tensor::from_fn(&[1, 3, 2], |i| i as f64 * 0.5 - 1.0);
        let w = Tensor::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap().to_vec(), x.to_vec());

        let x2 = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let w2 = Tensor::new(vec![1.0, 1.0], &[1, 2, 1, 1]).unwrap();
        let y = conv2d(&x2, &w2, None, 1, 0).unwrap().to_vec();
        assert_eq!(y, vec![4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn three_by_three_matches_naive_loops() {
        let mut rng = SeededRng::new(4);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let (ci, co, h, w) = (3, 4, 7, 6);
            let x = random(&mut rng, &[ci, h, w]);
            let wt = random(&mut rng, &[co, ci, 3, 3]);
            let b = random(&mut rng, &[co]);
            let y = conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
            let (ho, wo) = (y.dim(1), y.dim(2));
            assert_eq!(ho, (h + 2 * pad - 3) / stride + 1);
            let (xd, wd, bd, yd) = (x.to_vec(), wt.to_vec(), b.to_vec(), y.to_vec());
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wd[((o * ci + c) * 3 + ky) * 3 + kx]
                                            * xd[(c * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((acc - yd[(o * ho + oy) * wo + ox]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_conv_equals_per_pixel_matmul() {
        let mut rng = SeededRng::new(8);
        let x = random(&mut rng, &[5, 3, 4]);
        let w = random(&mut rng, &[6, 5, 1, 1]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        let via_matmul = w
            .reshape(&[6, 5])
            .unwrap()
            .matmul(&x.reshape(&[5, 12]).unwrap())
            .unwrap();
        for (a, b) in y.to_vec().iter().zip(via_matmul.to_vec()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn layer_rejects_unsupported_kernel() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng);
        assert!(Conv2d::new(&mut b, 1, 1, 5, 1, 0).is_err());
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = SeededRng::new(12);
        let x = random(&mut rng, &[2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let proj = Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.71).sin());
        let report = gradcheck(
            || Ok(conv2d(&x, &w, Some(&b), 2, 1)?.mul(&proj)?.sum_all()),
            &[x.clone(), w.clone(), b.clone()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
