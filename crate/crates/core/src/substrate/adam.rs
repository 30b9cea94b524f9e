use super::ParamStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            ..Default::default()
        }
    }

    /// Apply one update to every parameter of `store` from its accumulated
    /// gradients. A non-finite gradient rejects the whole step before any
    /// parameter is touched.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        for p in store.params_mut() {
            p.t += 1;
            let t = p.t as i32;
            let c1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
            let c2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
            let (b1, b2) = (self.beta1, self.beta2);
            let value = p.value.data_mut();
            let (m, v, g) = (p.m.data_mut(), p.v.data_mut(), p.grad.data());
            for i in 0..value.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{Init, RngState};
    use crate::tensor::Shape;

    fn scalar_store(value: f32) -> (ParamStore, crate::substrate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Shape::scalar(), Init::Constant(value), &mut RngState::new(0));
        (store, id)
    }

    #[test]
    fn zero_gradient_is_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("w", Shape::new(2, 3, 4, 4), Init::Normal(0.5), &mut RngState::new(9));
        let before = store.get(id).value.clone();
        Adam::default().step(&mut store).unwrap();
        assert_eq!(store.get(id).value.data(), before.data());
        assert_eq!(store.get(id).t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(0.0);
        store.get_mut(id).grad.fill(0.5);
        Adam::default().step(&mut store).unwrap();
        let w = store.get(id).value.item();
        assert!((w + 0.001).abs() < 1e-9, "{w}");
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (mut store, id) = scalar_store(0.0);
        let adam = Adam::default();
        let g = 0.3f64;
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3f64, 1e-8f64);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            store.get_mut(id).grad.fill(g as f32);
            adam.step(&mut store).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let got = store.get(id).value.item() as f64;
        assert!((got - w).abs() < 1e-7, "{got} vs {w}");
        assert_eq!(store.get(id).t, 2);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad.fill(f32::NAN);
        assert!(matches!(Adam::default().step(&mut store), Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).value.item(), 1.0);
        assert_eq!(store.get(id).t, 0);
    }
}
