use super::params::{Builder, Init};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `y = x·W + b` on `[rows, in]` inputs; `W` is stored `[in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: b.param("weight", &[d_in, d_out], Init::Uniform(-bound, bound)),
            bias: b.param("bias", &[d_out], Init::Uniform(-bound, bound)),
        }
    }

    pub fn with_init(b: &mut Builder, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Self {
        Self {
            weight: b.param("weight", &[d_in, d_out], weight),
            bias: b.param("bias", &[d_out], bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.dim(1) != self.d_in() {
            return Err(shape_err("linear", x.shape(), self.weight.shape()));
        }
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn zero_(&self) {
        self.weight.set_data(vec![0.0; self.weight.numel()]).expect("leaf");
        self.bias.set_data(vec![0.0; self.bias.numel()]).expect("leaf");
    }
}

/// Linear → ReLU → Linear, preserving feature width.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, width: usize, ratio: usize) -> Self {
        let hidden = width * ratio.max(1);
        Self {
            fc1: Linear::new(&mut b.sub("fc1"), width, hidden),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, width),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;
    use crate::tensor::{gradcheck, GradCheckConfig};

    fn mlp(seed: u64, width: usize) -> (ParamStore, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let m = Mlp::new(&mut Builder::new(&mut store, &mut rng), width, 2);
        (store, m)
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        Linear::new(&mut Builder::new(&mut store, &mut rng), 4, 3);
        assert_eq!(store.num_scalars(), 15);
    }

    #[test]
    fn zero_weights_give_second_bias() {
        let (_s, m) = mlp(1, 3);
        m.fc1.zero_();
        m.fc2.weight.set_data(vec![0.0; m.fc2.weight.numel()]).unwrap();
        m.fc2.bias.set_data(vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(m.forward(&x).unwrap().to_vec(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_weights_pass_positive_input() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let eye = Tensor::eye(3).to_vec();
        let m = Mlp {
            fc1: Linear::with_init(&mut b.sub("fc1"), 3, 3, Init::Values(eye.clone()), Init::Zeros),
            fc2: Linear::with_init(&mut b.sub("fc2"), 3, 3, Init::Values(eye), Init::Zeros),
        };
        let x = Tensor::new(vec![0.5, 1.0, 3.0], &[1, 3]).unwrap();
        assert_eq!(m.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn width_mismatch() {
        let (_s, m) = mlp(1, 3);
        assert!(m.forward(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn mlp_gradcheck() {
        let (store, m) = mlp(7, 4);
        let mut rng = SeededRng::new(70);
        let x = Tensor::param(rng.uniform_vec(12, -2.0, 2.0), &[3, 4]).unwrap();
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).sin());
        let mut inputs = store.tensors();
        inputs.push(x.clone());
        let report = gradcheck(
            || Ok(m.forward(&x)?.mul(&w)?.sum_all()),
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
