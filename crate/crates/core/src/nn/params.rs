use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Ordered registry of named trainable tensors.
///
/// Layers hold clones of the same `Tensor` handles, so in-place updates
/// through the store (optimizer steps, checkpoint loads) are seen by the
/// model without rebuilding it.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    Values(Vec<f64>),
}

/// Hierarchical parameter factory: `b.sub("block0").param("w", ..)`
/// registers `block0.w`.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(lo, hi) => self.rng.uniform_vec(n, lo, hi),
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {name}");
                v
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let t = Tensor::param(data, shape).expect("parameter shape");
        self.store.insert(full, t.clone());
        t
    }
}
