use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Uniform `±1/√fan_in` initialization for weights and biases.
pub(crate) fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// A stack of fully connected layers with ReLU between them.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    /// `(weight [in × out], bias [out])` parameter indices.
    layers: Vec<(usize, usize)>,
    /// Apply ReLU after the last layer as well (trunk mode).
    relu_last: bool,
}

impl Dense {
    /// Output head: no activation after the final layer.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        Self::build(store, prefix, dims, rng, false)
    }

    pub fn init_trunk<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        Self::build(store, prefix, dims, rng, true)
    }

    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R, relu_last: bool) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wi = store.add(
                    format!("{prefix}.{i}.w"),
                    uniform_tensor(rng, &[w[0], w[1]], w[0]),
                    true,
                );
                let bi = store.add(format!("{prefix}.{i}.b"), uniform_tensor(rng, &[w[1]], w[0]), false);
                (wi, bi)
            })
            .collect();
        Self { layers, relu_last }
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = g.matmul(x, params[w])?;
            x = g.add_row(x, params[b])?;
            if i + 1 < n || self.relu_last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}
