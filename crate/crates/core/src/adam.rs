//! Bias-corrected Adam over a named subset of a [`ParameterStore`].

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::ParameterStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Gradients keyed by parameter name.
pub type Gradients = IndexMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments for every trainable parameter accepted by `select`.
    pub fn new(store: &ParameterStore, select: impl Fn(&str) -> bool) -> Self {
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for (name, entry) in store.iter() {
            if entry.trainable && select(name) {
                first.insert(name.to_string(), vec![0.0; entry.tensor.len()]);
                second.insert(name.to_string(), vec![0.0; entry.tensor.len()]);
            }
        }
        AdamState {
            first,
            second,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }
}

/// One Adam update of every parameter tracked by `state`. A tracked
/// parameter with no gradient entry is treated as having zero gradient.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !state.first.contains_key(name) {
            continue;
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite gradient in parameter {name} at index {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (name, m) in state.first.iter_mut() {
        let v = state.second.get_mut(name).expect("moments share keys");
        let entry = params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("optimizer tracks unknown parameter {name}")))?;
        let p = entry.tensor.data_mut();
        if p.len() != m.len() {
            return Err(Error::InvalidShape(format!("parameter {name} changed size")));
        }
        let Some(g) = grads.get(name) else {
            // zero gradient: moments decay, update stays proportional to them
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi *= b1;
                *vi *= b2;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
            continue;
        };
        if g.len() != p.len() {
            return Err(Error::InvalidShape(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParameterStore;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new("test");
        s.insert("w", Tensor::scalar(v), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.25);
        let mut st = AdamState::new(&store, |_| true);
        let mut g = Gradients::new();
        g.insert("w".into(), vec![0.0]);
        adam_step(&mut store, &g, &mut st, 0.1).unwrap();
        assert_eq!(store.tensor("w").unwrap().data()[0], 0.25);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(1.0);
        let mut st = AdamState::new(&store, |_| true);
        let mut g = Gradients::new();
        g.insert("w".into(), vec![1.0]);
        adam_step(&mut store, &g, &mut st, 0.1).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.tensor("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((store.tensor("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_identical_results() {
        let run = || {
            let mut store = ParameterStore::new("test");
            store.insert("a", Tensor::from_vec(vec![0.3, -0.2, 0.9]), true);
            let mut st = AdamState::new(&store, |_| true);
            for k in 0..5 {
                let mut g = Gradients::new();
                g.insert("a".into(), vec![0.1 * k as f64, -0.7, 1e-3]);
                adam_step(&mut store, &g, &mut st, 0.01).unwrap();
            }
            store.tensor("a").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(1.0);
        let mut st = AdamState::new(&store, |_| true);
        let mut g = Gradients::new();
        g.insert("w".into(), vec![f64::NAN]);
        let err = adam_step(&mut store, &g, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn selection_restricts_updates() {
        let mut store = ParameterStore::new("test");
        store.insert("reg.a", Tensor::scalar(1.0), true);
        store.insert("disc.a", Tensor::scalar(1.0), true);
        let mut st = AdamState::new(&store, |n| n.starts_with("reg."));
        let mut g = Gradients::new();
        g.insert("reg.a".into(), vec![1.0]);
        g.insert("disc.a".into(), vec![1.0]);
        adam_step(&mut store, &g, &mut st, 0.5).unwrap();
        assert!(store.tensor("reg.a").unwrap().data()[0] < 1.0);
        assert_eq!(store.tensor("disc.a").unwrap().data()[0], 1.0);
    }
}
