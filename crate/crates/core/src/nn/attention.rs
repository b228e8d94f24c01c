use super::conv::Conv2d;
use super::params::{Builder, Init};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Embedded-Gaussian non-local block in cross-attention form.
///
/// Queries come from `x`, keys and values from `context`:
/// `y_i = Σ_j softmax_j(θ(x)_i · φ(ctx)_j) g(ctx)_j`, output `z(y) + x`.
/// The `z` projection starts at zero, so a fresh block is the identity.
pub struct NonLocal {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub z: Conv2d,
}

impl NonLocal {
    pub fn inner_channels(c: usize) -> usize {
        (c / 2).max(1)
    }

    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        let ci = Self::inner_channels(c);
        Ok(Self {
            theta: Conv2d::new(&mut b.sub("theta"), c, ci, 1, 1, 0)?,
            phi: Conv2d::new(&mut b.sub("phi"), c, ci, 1, 1, 0)?,
            g: Conv2d::new(&mut b.sub("g"), c, ci, 1, 1, 0)?,
            z: Conv2d::pointwise_with(&mut b.sub("z"), ci, c, Init::Zeros, Init::Zeros),
        })
    }

    /// Attention weights `[n_query, n_key]` over flattened positions.
    pub fn attention(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        if x.shape() != context.shape() || x.ndim() != 3 {
            return Err(shape_err("non_local", x.shape(), context.shape()));
        }
        let n = x.dim(1) * x.dim(2);
        let ci = self.theta.c_out();
        let q = self.theta.forward(x)?.reshape(&[ci, n])?;
        let k = self.phi.forward(context)?.reshape(&[ci, n])?;
        q.t()?.matmul(&k)?.softmax(1)
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let attn = self.attention(x, context)?;
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let ci = self.g.c_out();
        let v = self.g.forward(context)?.reshape(&[ci, h * w])?;
        // [ci, n_key] · [n_key, n_query] = y laid out channel-major
        let y = v.matmul(&attn.t()?)?.reshape(&[ci, h, w])?;
        let out = self.z.forward(&y)?;
        debug_assert_eq!(out.dim(0), c);
        out.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;
    use crate::tensor::{gradcheck, GradCheckConfig};

    fn block(seed: u64, c: usize) -> (ParamStore, NonLocal) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let nl = NonLocal::new(&mut Builder::new(&mut store, &mut rng), c).unwrap();
        let z = rng.uniform_vec(nl.z.weight.numel(), -0.5, 0.5);
        nl.z.weight.set_data(z).unwrap();
        let zb = rng.uniform_vec(c, -0.5, 0.5);
        nl.z.bias.set_data(zb).unwrap();
        (store, nl)
    }

    fn map(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(rng.uniform_vec(c * h * w, -2.0, 2.0), &[c, h, w]).unwrap()
    }

    #[test]
    fn inner_width_is_half_with_floor_one() {
        assert_eq!(NonLocal::inner_channels(16), 8);
        assert_eq!(NonLocal::inner_channels(5), 2);
        assert_eq!(NonLocal::inner_channels(1), 1);
    }

    #[test]
    fn zero_z_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(2);
        let nl = NonLocal::new(&mut Builder::new(&mut store, &mut rng), 4).unwrap();
        let x = map(&mut rng, 4, 3, 2);
        let ctx = map(&mut rng, 4, 3, 2);
        assert_eq!(nl.forward(&x, &ctx).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn single_position_passes_projected_value() {
        let (_s, nl) = block(3, 3);
        let mut rng = SeededRng::new(30);
        let x = map(&mut rng, 3, 1, 1);
        let ctx = map(&mut rng, 3, 1, 1);
        let expect = nl.z.forward(&nl.g.forward(&ctx).unwrap()).unwrap().add(&x).unwrap();
        assert_eq!(nl.attention(&x, &ctx).unwrap().to_vec(), vec![1.0]);
        let got = nl.forward(&x, &ctx).unwrap().to_vec();
        for (a, b) in got.iter().zip(expect.to_vec()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (_s, nl) = block(4, 6);
        let mut rng = SeededRng::new(40);
        let x = map(&mut rng, 6, 3, 3);
        let ctx = map(&mut rng, 6, 3, 3);
        let a = nl.attention(&x, &ctx).unwrap().to_vec();
        for row in a.chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (_s, nl) = block(4, 2);
        assert!(nl
            .forward(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[2, 2, 3]))
            .is_err());
    }

    #[test]
    fn non_local_gradcheck() {
        let (store, nl) = block(9, 4);
        let mut rng = SeededRng::new(90);
        let x = Tensor::param(rng.uniform_vec(4 * 2 * 3, -2.0, 2.0), &[4, 2, 3]).unwrap();
        let ctx = Tensor::param(rng.uniform_vec(4 * 2 * 3, -2.0, 2.0), &[4, 2, 3]).unwrap();
        let proj = Tensor::from_fn(&[4, 2, 3], |i| (i as f64 * 0.3).sin());
        let mut inputs = store.tensors();
        inputs.extend([x.clone(), ctx.clone()]);
        let report = gradcheck(
            || Ok(nl.forward(&x, &ctx)?.mul(&proj)?.sum_all()),
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
