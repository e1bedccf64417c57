//! Small building blocks shared by the generator and prediction heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Result, Var};

/// Fully connected stack: ReLU after every hidden layer, linear output.
/// Weights are stored `in x out` so a batch of rows multiplies on the left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
    pub widths: Vec<usize>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes. Weights and biases are
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn init(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (k, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let weight = uniform(rng, w[0], w[1], bound);
            let bias = uniform(rng, 1, w[1], bound);
            let wid = store.add(format!("{name}.w{k}"), weight);
            let bid = store.add(format!("{name}.b{k}"), bias);
            layers.push((wid, bid));
        }
        Self {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if k < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&mut store, "m", &[2, 2, 1], &mut rng);
        *store.value_mut(mlp.layers[0].0) = ndarray::array![[1.0, -1.0], [0.5, 2.0]];
        *store.value_mut(mlp.layers[0].1) = ndarray::array![[0.1, -0.2]];
        *store.value_mut(mlp.layers[1].0) = ndarray::array![[3.0], [-1.5]];
        *store.value_mut(mlp.layers[1].1) = ndarray::array![[0.25]];

        let mut g = Graph::new();
        let x = g.constant(ndarray::array![[2.0, 1.0], [-1.0, 0.5]]);
        let y = mlp.forward(&mut g, &store, x).unwrap();
        // row 0: h = relu([2.5+0.1, 0-0.2]) = [2.6, 0]; y = 7.8 + 0.25
        // row 1: h = relu([-0.75+0.1, 2.0-0.2]) = [0, 1.8]; y = -2.7 + 0.25
        let v = g.value(y);
        assert!((v[[0, 0]] - 8.05).abs() < 1e-12);
        assert!((v[[1, 0]] + 2.45).abs() < 1e-12);
    }

    #[test]
    fn init_bounds_and_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&mut store, "gen", &[400, 200, 100, 100], &mut rng);
        assert_eq!(mlp.layers.len(), 3);
        assert_eq!(store.get(mlp.layers[0].0).name, "gen.w0");
        assert_eq!(store.value(mlp.layers[0].0).dim(), (400, 200));
        assert!(store.value(mlp.layers[0].0).iter().all(|x| x.abs() <= 0.05));
    }
}
