//! AdamW with decoupled weight decay.

use super::{Matrix, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamWState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.raw_dim()))
                .collect()
        };
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: AdamWState::for_store(store),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let step = self.state.step + 1;
        for (_, p) in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    name: p.name.clone(),
                    step,
                });
            }
        }
        self.state.step = step;

        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            let m = &mut self.state.first[k];
            let v = &mut self.state.second[k];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *w -= lr * weight_decay * *w;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
            for &r in &p.frozen_rows {
                p.value.row_mut(r).fill(0.0);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(value: f64, grad: f64, wd: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("p", array![[value]]);
        store.accumulate(id, &array![[grad]]).unwrap();
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store).unwrap();
        store.value(id)[[0, 0]] - value
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2 => delta = -lr * 1 / (1 + eps)
        let delta = single(0.5, 1.0, 0.0);
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        assert!((delta + 9.99999e-5).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_no_move() {
        assert_eq!(single(0.7, 0.0, 0.0), 0.0);
    }

    #[test]
    fn decoupled_decay_only() {
        let delta = single(1.0, 0.0, 1e-5);
        assert!((delta + 1e-9).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn non_finite_gradient_reports_param_and_step() {
        let mut store = ParamStore::new();
        let id = store.add("gen.w1", array![[1.0]]);
        store.accumulate(id, &array![[f64::NAN]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-finite gradient in parameter `gen.w1` at step 1"
        );
        assert_eq!(store.value(id)[[0, 0]], 1.0);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("p", array![[0.3, -0.2], [1.1, 0.0]]);
            let mut opt = AdamW::new(AdamWConfig::default(), &store);
            for s in 0..5 {
                store.zero_grad();
                let g = array![[0.1 * s as f64, -0.7], [0.33, 1e-3]];
                store.accumulate(id, &g).unwrap();
                opt.step(&mut store).unwrap();
            }
            store.value(id).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_rows_stay_zero() {
        let mut store = ParamStore::new();
        let id = store.add("emb", array![[0.5, 0.5], [0.25, 0.25]]);
        store.freeze_rows(id, &[0]);
        store.accumulate(id, &array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).row(0).to_vec(), vec![0.0, 0.0]);
        assert!(store.value(id)[[1, 0]] < 0.25);
    }
}
