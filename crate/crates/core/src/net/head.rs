//! Per-modality GRU flow head: iterative refinement of per-point flow from
//! cell embeddings, fused features of both frames and point offsets.

use raliflow_tensor::{GateInputs, Graph, GruCell, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::rng::SplitMix64;

/// Per-point geometric inputs of a head: in-grid points only.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInput {
    /// Distinct cells touched by the points, ascending.
    pub cells: Vec<usize>,
    /// Index into `cells` per in-grid point.
    pub point_slot: Vec<usize>,
    /// `[m, 3]`: offsets to the cell center in cell units and z.
    pub offsets: Tensor,
}

impl HeadInput {
    /// `rows` holds one `(cell, [dx, dy, z])` per in-grid point; `None` when
    /// there is none.
    pub fn new(rows: &[(usize, [f64; 3])]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let mut cells: Vec<usize> = rows.iter().map(|r| r.0).collect();
        cells.sort_unstable();
        cells.dedup();
        let point_slot = rows
            .iter()
            .map(|r| cells.binary_search(&r.0).expect("cell listed"))
            .collect();
        let offsets =
            Tensor::new(&[rows.len(), 3], rows.iter().flat_map(|r| r.1).collect()).ok()?;
        Some(Self {
            cells,
            point_slot,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.point_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_slot.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FlowHead {
    gru: GruCell,
    point_gates: [ParamId; 3],
    flow_gates: [ParamId; 3],
    init_cell: ParamId,
    init_point: ParamId,
    init_bias: ParamId,
    /// Zero-initialised so an untrained head predicts zero flow.
    delta: ParamId,
    pub cell_width: usize,
    pub hidden: usize,
    pub iterations: usize,
}

impl FlowHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cell_width: usize,
        hidden: usize,
        iterations: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        // fan-in of the full recurrent input [cell, offsets, flow, hidden]
        let fan = cell_width + 6 + hidden;
        let gru = GruCell::new(
            store,
            &format!("{prefix}.gru"),
            cell_width,
            hidden,
            |s, _| rng.uniform_tensor(s, fan),
        );
        let gates = ["z", "r", "h"];
        let point_gates = gates.map(|k| {
            store.add(
                format!("{prefix}.gru.p_{k}"),
                rng.uniform_tensor(&[3, hidden], fan),
            )
        });
        let flow_gates = gates.map(|k| {
            store.add(
                format!("{prefix}.gru.v_{k}"),
                rng.uniform_tensor(&[3, hidden], fan),
            )
        });
        let init_fan = cell_width + 3;
        let init_cell = store.add(
            format!("{prefix}.init.cell"),
            rng.uniform_tensor(&[cell_width, hidden], init_fan),
        );
        let init_point = store.add(
            format!("{prefix}.init.point"),
            rng.uniform_tensor(&[3, hidden], init_fan),
        );
        let init_bias = store.add(
            format!("{prefix}.init.bias"),
            rng.uniform_tensor(&[hidden], init_fan),
        );
        let delta = store.add(format!("{prefix}.delta"), Tensor::zeros(&[hidden, 3]));
        Self {
            gru,
            point_gates,
            flow_gates,
            init_cell,
            init_point,
            init_bias,
            delta,
            cell_width,
            hidden,
            iterations,
        }
    }

    fn project(
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ids: &[ParamId; 3],
    ) -> Result<GateInputs> {
        let mut out = [x; 3];
        for (o, id) in out.iter_mut().zip(ids) {
            let w = g.param(store, *id);
            *o = g.matmul(x, w)?;
        }
        Ok(GateInputs {
            z: out[0],
            r: out[1],
            h: out[2],
        })
    }

    fn gather(g: &mut Graph, gates: &GateInputs, idx: &[usize]) -> Result<GateInputs> {
        Ok(GateInputs {
            z: g.gather_rows(gates.z, idx)?,
            r: g.gather_rows(gates.r, idx)?,
            h: g.gather_rows(gates.h, idx)?,
        })
    }

    /// `cell_features` is `[cells, cell_width]` over the whole grid. Returns
    /// `[m, 3]` flows, one per in-grid point.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cell_features: Var,
        input: &HeadInput,
    ) -> Result<Var> {
        let xc = g.gather_rows(cell_features, &input.cells)?;
        let offsets = g.constant(input.offsets.clone());

        let cell_gates = self.gru.input_gates(g, store, xc)?;
        let cell_gates = Self::gather(g, &cell_gates, &input.point_slot)?;
        let point_gates = Self::project(g, store, offsets, &self.point_gates)?;
        let gates = cell_gates.add(g, &point_gates)?;

        let wc = g.param(store, self.init_cell);
        let wp = g.param(store, self.init_point);
        let b = g.param(store, self.init_bias);
        let hc = g.matmul(xc, wc)?;
        let hc = g.gather_rows(hc, &input.point_slot)?;
        let hp = g.matmul(offsets, wp)?;
        let h0 = g.add(hc, hp)?;
        let h0 = g.add(h0, b)?;
        let mut h = g.tanh(h0);

        let delta = g.param(store, self.delta);
        let mut flow: Option<Var> = None;
        for _ in 0..self.iterations {
            let step_gates = match flow {
                // the first step sees v = 0, whose projection vanishes
                None => gates,
                Some(v) => {
                    let vg = Self::project(g, store, v, &self.flow_gates)?;
                    gates.add(g, &vg)?
                }
            };
            h = self.gru.step_with_gates(g, store, h, &step_gates)?;
            let inc = g.matmul(h, delta)?;
            flow = Some(match flow {
                None => inc,
                Some(v) => g.add(v, inc)?,
            });
        }
        Ok(flow.unwrap_or_else(|| g.constant(Tensor::zeros(&[input.len(), 3]))))
    }
}
