use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

/// Ordered collection of parameters. Iteration order is insertion order,
/// which is also the order the optimizer updates them in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter in store order. A missing
    /// gradient counts as zero, so moments still decay and step counters stay
    /// in lockstep.
    pub fn step(&self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        for (i, p) in store.params.iter().enumerate() {
            if let Some(Some(g)) = grads.get(i) {
                if g.shape() != p.value.shape() {
                    return Err(mismatch("adam_step", p.value.shape(), g.shape()));
                }
            }
        }
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = grads.get(i).and_then(|g| g.as_ref());
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let value = p.value.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for k in 0..value.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![value]));
        (store, id)
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let (mut store, id) = one(1.0);
        let adam = Adam::new(0.01);
        adam.step(&mut store, &[Some(Tensor::vector(vec![0.3]))])
            .unwrap();
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_value_and_decays_moments() {
        let (mut store, id) = one(2.0);
        let adam = Adam::new(0.1);
        adam.step(&mut store, &[None]).unwrap();
        assert_eq!(store.value(id).data()[0], 2.0);
        assert_eq!(store.get(id).first_moment.data()[0], 0.0);
        assert_eq!(store.get(id).step, 1);
    }

    #[test]
    fn two_constant_steps_match_recurrence() {
        let (mut store, id) = one(0.0);
        let adam = Adam::new(0.001);
        let g = 0.5;
        adam.step(&mut store, &[Some(Tensor::vector(vec![g]))])
            .unwrap();
        adam.step(&mut store, &[Some(Tensor::vector(vec![g]))])
            .unwrap();
        // m1 = 0.1 g, m2 = 0.9*0.1 g + 0.1 g = 0.19 g
        // v1 = 0.001 g^2, v2 = 0.999*0.001 g^2 + 0.001 g^2 = 0.001999 g^2
        let p = store.get(id);
        assert!((p.first_moment.data()[0] - 0.19 * g).abs() < 1e-15);
        assert!((p.second_moment.data()[0] - 0.001999 * g * g).abs() < 1e-15);
        // Bias correction makes both steps exactly -lr * g/(|g| + eps).
        let step = 0.001 * g / (g + 1e-8);
        let m_hat = 0.19 * g / (1.0 - 0.81);
        let v_hat = 0.001999 * g * g / (1.0 - 0.998001);
        let second = 0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.value.data()[0] + step + second).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, _) = one(0.0);
        let err = Adam::new(0.1).step(&mut store, &[Some(Tensor::vector(vec![1.0, 2.0]))]);
        assert!(err.is_err());
    }
}
