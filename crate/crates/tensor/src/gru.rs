use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameters of a gated recurrent unit over `[n, input]` / `[n, hidden]`
/// batches.
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// h~ = tanh(x Wh + (r * h) Uh + bh)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

/// Input-side gate pre-activations `x W + b`, reusable across steps when the
/// input does not change.
#[derive(Clone, Copy, Debug)]
pub struct GateInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

impl GateInputs {
    /// Adds another set of input contributions (for inputs split in parts).
    pub fn add(&self, g: &mut Graph, other: &GateInputs) -> Result<GateInputs> {
        Ok(GateInputs {
            z: g.add(self.z, other.z)?,
            r: g.add(self.r, other.r)?,
            h: g.add(self.h, other.h)?,
        })
    }
}

impl GruCell {
    /// Registers `prefix.{w,u,b}_{z,r,h}` in `store`, initialised by `init`
    /// (called with parameter shape and fan-in).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        mut init: impl FnMut(&[usize], usize) -> Tensor,
    ) -> Self {
        let gates = ["z", "r", "h"];
        let fan_in = input + hidden;
        let w = gates.map(|k| store.add(format!("{prefix}.w_{k}"), init(&[input, hidden], fan_in)));
        let u =
            gates.map(|k| store.add(format!("{prefix}.u_{k}"), init(&[hidden, hidden], fan_in)));
        let b = gates.map(|k| store.add(format!("{prefix}.b_{k}"), init(&[hidden], fan_in)));
        Self {
            input,
            hidden,
            w,
            u,
            b,
        }
    }

    pub fn bias_ids(&self) -> [ParamId; 3] {
        self.b
    }

    pub fn input_gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<GateInputs> {
        let mut out = [x; 3];
        for k in 0..3 {
            let w = g.param(store, self.w[k]);
            let b = g.param(store, self.b[k]);
            let xw = g.matmul(x, w)?;
            out[k] = g.add(xw, b)?;
        }
        Ok(GateInputs {
            z: out[0],
            r: out[1],
            h: out[2],
        })
    }

    pub fn step_with_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        gates: &GateInputs,
    ) -> Result<Var> {
        let uz = g.param(store, self.u[0]);
        let ur = g.param(store, self.u[1]);
        let uh = g.param(store, self.u[2]);

        let hz = g.matmul(h, uz)?;
        let z_pre = g.add(gates.z, hz)?;
        let z = g.sigmoid(z_pre);

        let hr = g.matmul(h, ur)?;
        let r_pre = g.add(gates.r, hr)?;
        let r = g.sigmoid(r_pre);

        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, uh)?;
        let cand_pre = g.add(gates.h, rhu)?;
        let cand = g.tanh(cand_pre);

        // h + z * (h~ - h)
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let gates = self.input_gates(g, store, x)?;
        self.step_with_gates(g, store, h, &gates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_cell(store: &mut ParamStore) -> GruCell {
        GruCell::new(store, "gru", 2, 3, |s, _| Tensor::zeros(s))
    }

    #[test]
    fn zero_params_halve_state() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let out = cell.step(&mut g, &store, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn closed_update_gate_keeps_zero_state() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store);
        *store.value_mut(cell.bias_ids()[0]) = Tensor::full(&[3], -1e3);
        *store.value_mut(cell.bias_ids()[2]) = Tensor::full(&[3], 5.0);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 3]));
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let out = cell.step(&mut g, &store, h, x).unwrap();
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-300));
    }
}
