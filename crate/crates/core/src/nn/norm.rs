use super::params::{Builder, Init};
use crate::error::{shape_err, Result};
use crate::tensor::{BackwardCtx, Tensor};

/// Normalization over the trailing feature axis with learned affine.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, features: usize) -> Self {
        Self {
            gamma: b.param("gamma", &[features], Init::Const(1.0)),
            beta: b.param("beta", &[features], Init::Zeros),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let f = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("layernorm", x.shape(), gamma.shape()))?;
    if gamma.shape() != [f] || beta.shape() != [f] {
        return Err(shape_err("layernorm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / f;
    let xd = x.data();
    let (g, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * f..(r + 1) * f];
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..f {
            let h = (row[j] - mean) * inv;
            xhat[r * f + j] = h;
            out[r * f + j] = h * g[j] + bt[j];
        }
    }
    drop((xd, g, bt));
    Ok(Tensor::from_op(
        "layernorm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let dy = ctx.grad_out;
            let g = ctx.inputs[1].data();
            let mut dx = ctx.needs(0).then(|| vec![0.0; dy.len()]);
            let mut dg = vec![0.0; f];
            let mut db = vec![0.0; f];
            for r in 0..rows {
                let dyr = &dy[r * f..(r + 1) * f];
                let hr = &xhat[r * f..(r + 1) * f];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..f {
                    dg[j] += dyr[j] * hr[j];
                    db[j] += dyr[j];
                    let dh = dyr[j] * g[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let scale = inv_std[r] / f as f64;
                    for j in 0..f {
                        let dh = dyr[j] * g[j];
                        dx[r * f + j] = scale * (f as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
            vec![dx, Some(dg), Some(db)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{gradcheck, GradCheckConfig};

    #[test]
    fn constant_row_normalizes_to_zero() {
        let x = Tensor::new(vec![5.0, 5.0, 5.0], &[1, 3]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_variance_pair() {
        let x = Tensor::new(vec![1.0, -1.0], &[2]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-14)
            .unwrap()
            .to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn moments_of_normalized_rows() {
        let mut rng = SeededRng::new(21);
        let x = Tensor::new(rng.uniform_vec(40, -3.0, 3.0), &[5, 8]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-12)
            .unwrap()
            .to_vec();
        for row in y.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }

    #[test]
    fn wrong_feature_width() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).is_err());
    }

    #[test]
    fn layernorm_gradcheck() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::param(rng.uniform_vec(12, -2.0, 2.0), &[3, 4]).unwrap();
        let g = Tensor::param(rng.uniform_vec(4, -2.0, 2.0), &[4]).unwrap();
        let b = Tensor::param(rng.uniform_vec(4, -2.0, 2.0), &[4]).unwrap();
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).cos());
        let report = gradcheck(
            || Ok(layer_norm(&x, &g, &b, 1e-5)?.mul(&w)?.sum_all()),
            &[x.clone(), g.clone(), b.clone()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
