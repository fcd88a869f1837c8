//! Finite-difference fixtures for every differentiable graph op. Each entry
//! builds one seeded probe point and checks it; callers run ten seeds.

use raliflow_tensor::{
    grad_check, grad_check_params, GradCheckReport, Graph, GruCell, ParamStore, Result, Tensor, Var,
};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.next()).collect()).unwrap()
    }
}

/// Projects an arbitrary tensor to a scalar with fixed random weights so
/// every output element gets a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Lcg(seed ^ 0x9e37).tensor(g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn unary(
    seed: u64,
    shape: &[usize],
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> GradCheckReport {
    let at = Lcg(seed + 1).tensor(shape);
    grad_check(
        |g, x| {
            let y = f(g, x)?;
            weighted_sum(g, y, seed)
        },
        &at,
        H,
        TOL,
    )
    .unwrap()
}

fn binary(seed: u64, which: usize) -> GradCheckReport {
    let mut rng = Lcg(seed + 100);
    let b = rng.tensor(&[4]);
    let at = rng.tensor(&[3, 4]);
    grad_check(
        |g, x| {
            let bv = g.input(b.clone());
            let y = match which {
                0 => g.add(x, bv)?,
                1 => g.sub(x, bv)?,
                2 => g.mul(x, bv)?,
                _ => {
                    let d = g.add_scalar(bv, 3.0);
                    g.div(x, d)?
                }
            };
            weighted_sum(g, y, seed)
        },
        &at,
        H,
        TOL,
    )
    .unwrap()
}

/// Gradient flowing into the broadcast operand of every binary op.
fn broadcast_operand(seed: u64) -> GradCheckReport {
    let mut rng = Lcg(seed + 100);
    let b = rng.tensor(&[4]);
    let x = rng.tensor(&[3, 4]);
    grad_check(
        |g, bv| {
            let xv = g.constant(x.clone());
            let d = g.add_scalar(bv, 3.0);
            let y = g.div(xv, d)?;
            let z = g.mul(y, d)?;
            let s = g.sub(z, d)?;
            let w = g.add(s, bv)?;
            weighted_sum(g, w, seed)
        },
        &b,
        H,
        TOL,
    )
    .unwrap()
}

fn matmul(seed: u64, left: bool) -> GradCheckReport {
    let mut rng = Lcg(seed + 7);
    let a = rng.tensor(&[3, 5]);
    let b = rng.tensor(&[5, 2]);
    let (at, other) = if left { (a, b) } else { (b, a) };
    grad_check(
        |g, x| {
            let o = g.constant(other.clone());
            let y = if left {
                g.matmul(x, o)?
            } else {
                g.matmul(o, x)?
            };
            weighted_sum(g, y, seed)
        },
        &at,
        H,
        TOL,
    )
    .unwrap()
}

fn conv(seed: u64, wrt_kernel: bool) -> GradCheckReport {
    let mut rng = Lcg(seed + 31);
    let input = rng.tensor(&[8, 8, 2]);
    let kernel = rng.tensor(&[3, 3, 2, 3]);
    if wrt_kernel {
        grad_check(
            |g, kv| {
                let x = g.constant(input.clone());
                let y = g.conv2d(x, kv, 2)?;
                weighted_sum(g, y, seed)
            },
            &kernel,
            H,
            TOL,
        )
        .unwrap()
    } else {
        grad_check(
            |g, x| {
                let kv = g.constant(kernel.clone());
                let y = g.conv2d(x, kv, 1)?;
                weighted_sum(g, y, seed)
            },
            &input,
            H,
            TOL,
        )
        .unwrap()
    }
}

fn gru(seed: u64) -> GradCheckReport {
    let mut rng = Lcg(seed + 55);
    let mut store = ParamStore::new();
    let mut init_rng = Lcg(seed + 99);
    let cell = GruCell::new(&mut store, "gru", 3, 4, |s, fan| {
        let mut t = init_rng.tensor(s);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v /= (fan as f64).sqrt());
        t
    });
    let x = rng.tensor(&[2, 3]);
    let h0 = rng.tensor(&[2, 4]);
    let loss = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let xv = g.constant(x.clone());
        let mut h = g.constant(h0.clone());
        for _ in 0..4 {
            h = cell.step(g, store, h, xv)?;
        }
        weighted_sum(g, h, seed)
    };
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| {
            (0..store.value(id).numel())
                .step_by(3)
                .map(move |c| (id, c))
        })
        .collect();
    grad_check_params(loss, &store, &coords, H, TOL).unwrap()
}

pub type Check = fn(u64) -> GradCheckReport;

/// Every op paired with a fixture builder.
pub fn catalogue() -> Vec<(&'static str, Check)> {
    vec![
        ("exp", |s| unary(s, &[3, 4], |g, x| Ok(g.exp(x)))),
        ("tanh", |s| unary(s, &[3, 4], |g, x| Ok(g.tanh(x)))),
        ("sigmoid", |s| unary(s, &[3, 4], |g, x| Ok(g.sigmoid(x)))),
        ("relu", |s| unary(s, &[3, 4], |g, x| Ok(g.relu(x)))),
        ("neg", |s| unary(s, &[3, 4], |g, x| Ok(g.neg(x)))),
        ("scale", |s| unary(s, &[3, 4], |g, x| Ok(g.scale(x, -2.5)))),
        ("sqrt", |s| {
            unary(s, &[3, 4], |g, x| {
                let sq = g.mul(x, x)?;
                let shifted = g.add_scalar(sq, 0.5);
                Ok(g.sqrt(shifted))
            })
        }),
        ("add", |s| binary(s, 0)),
        ("sub", |s| binary(s, 1)),
        ("mul", |s| binary(s, 2)),
        ("div", |s| binary(s, 3)),
        ("broadcast operand", broadcast_operand),
        ("matmul lhs", |s| matmul(s, true)),
        ("matmul rhs", |s| matmul(s, false)),
        ("gather/scatter_add rows", |s| {
            unary(s, &[4, 3], |g, x| {
                let y = g.gather_rows(x, &[3, 0, 0, 2])?;
                g.scatter_add_rows(y, &[1, 1, 0, 4], 5)
            })
        }),
        ("scatter_max rows", |s| {
            unary(s, &[5, 3], |g, x| {
                g.scatter_max_rows(x, &[0, 2, 0, 2, 1], 4)
            })
        }),
        ("sum axis", |s| unary(s, &[2, 3, 4], |g, x| g.sum(x, 1))),
        ("mean axis", |s| unary(s, &[2, 3, 4], |g, x| g.mean(x, 2))),
        ("mean_all", |s| {
            unary(s, &[2, 3, 4], |g, x| Ok(g.mean_all(x)))
        }),
        ("reshape", |s| {
            unary(s, &[2, 3, 4], |g, x| g.reshape(x, &[6, 4]))
        }),
        ("concat cols", |s| {
            unary(s, &[2, 3], |g, x| {
                let e = g.exp(x);
                g.concat(&[x, e, x], 1)
            })
        }),
        ("concat rows", |s| {
            unary(s, &[2, 3], |g, x| {
                let t = g.tanh(x);
                g.concat(&[t, x], 0)
            })
        }),
        ("l2_norm rows", |s| {
            unary(s, &[4, 3], |g, x| g.l2_norm_rows(x))
        }),
        ("mul_rows", |s| {
            unary(s, &[4, 3], |g, x| {
                let r = g.sum(x, 1)?;
                g.mul_rows(x, r)
            })
        }),
        ("softmax rows", |s| {
            unary(s, &[3, 4], |g, x| g.softmax(x, 1))
        }),
        ("softmax cols", |s| {
            unary(s, &[3, 4], |g, x| g.softmax(x, 0))
        }),
        ("segment_softmax", |s| {
            unary(s, &[7], |g, x| {
                g.segment_softmax(x, &[0, 1, 0, 2, 1, 0, 2], 3)
            })
        }),
        ("conv2d input", |s| conv(s, false)),
        ("conv2d kernel", |s| conv(s, true)),
        ("upsample2x", |s| {
            unary(s, &[3, 4, 2], |g, x| g.upsample2x(x))
        }),
        ("gru chain", gru),
    ]
}
