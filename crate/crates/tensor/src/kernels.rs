//! Raw numeric kernels shared by the forward and backward passes.

/// `c += a * b` for row-major strided views; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    gemm_strided(m, k, n, a, b, (c, n as isize, 1), beta);
}

fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: (&mut [f64], isize, isize),
    beta: f64,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: every view covers its full extent inside the borrowed slices,
    // which the callers guarantee through the shape checks in `Graph`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), c, 1.0);
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    gemm(m, n, k, (g, n as isize, 1), (b, 1, n as isize), c, 1.0);
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    gemm(k, m, n, (a, 1, k as isize), (g, n as isize, 1), c, 1.0);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h / self.stride
    }
    pub fn out_w(&self) -> usize {
        self.w / self.stride
    }
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple inside the
    /// zero-padded support.
    #[cfg(test)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad();
        for oy in 0..self.out_h() {
            for ox in 0..self.out_w() {
                let out_idx = oy * self.out_w() + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let in_idx = iy as usize * self.w + ix as usize;
                        f(out_idx, ky * self.k + kx, in_idx);
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// For kernel tap `(ky, kx)` and output row `oy`: the valid output
    /// columns `ox0..ox1` and the flat input pixel of `ox0`. Input pixels of
    /// consecutive output columns are `stride` apart.
    fn tap_rows(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad();
        let s = self.stride as isize;
        let ow = self.out_w() as isize;
        // smallest ox with ix = ox*s + kx - pad >= 0, and first ox with ix >= w
        let lo = ((pad - kx as isize).max(0) + s - 1) / s;
        let hi = ((self.w as isize - kx as isize + pad + s - 1) / s).min(ow);
        if lo >= hi {
            return;
        }
        for oy in 0..self.out_h() {
            let iy = (oy * self.stride) as isize + ky as isize - pad;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let ix0 = lo * s + kx as isize - pad;
            f(
                oy * self.out_w() + lo as usize,
                (hi - lo) as usize,
                iy as usize * self.w + ix0 as usize,
            );
        }
    }
}

/// Cross-correlation of an `[h, w, cin]` input with `[k, k, cin, cout]` weights.
pub(crate) fn conv2d_forward(geom: ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (cin, cout, st) = (geom.cin, geom.cout, geom.stride);
    let mut out = vec![0.0; geom.out_h() * geom.out_w() * cout];
    for ky in 0..geom.k {
        for kx in 0..geom.k {
            let tap = ky * geom.k + kx;
            let wt = &weight[tap * cin * cout..(tap + 1) * cin * cout];
            geom.tap_rows(ky, kx, |o, len, i| {
                gemm_strided(
                    len,
                    cin,
                    cout,
                    (&input[i * cin..], (st * cin) as isize, 1),
                    (wt, cout as isize, 1),
                    (&mut out[o * cout..], cout as isize, 1),
                    1.0,
                );
            });
        }
    }
    out
}

/// Accumulates input and weight gradients of [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    geom: ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    let (cin, cout, st) = (geom.cin, geom.cout, geom.stride);
    for ky in 0..geom.k {
        for kx in 0..geom.k {
            let tap = ky * geom.k + kx;
            let range = tap * cin * cout..(tap + 1) * cin * cout;
            geom.tap_rows(ky, kx, |o, len, i| {
                let g = (&grad_out[o * cout..], cout as isize, 1);
                if let Some(gw) = grad_w.as_deref_mut() {
                    // gw[tap] += x_rows^T g_rows
                    gemm_strided(
                        cin,
                        len,
                        cout,
                        (&input[i * cin..], 1, (st * cin) as isize),
                        g,
                        (&mut gw[range.clone()], cout as isize, 1),
                        1.0,
                    );
                }
                if let Some(gi) = grad_in.as_deref_mut() {
                    // gi_rows += g_rows w[tap]^T
                    gemm_strided(
                        len,
                        cout,
                        cin,
                        g,
                        (&weight[range.clone()], 1, cout as isize),
                        (&mut gi[i * cin..], (st * cin) as isize, 1),
                        1.0,
                    );
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(geom: ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (cin, cout) = (geom.cin, geom.cout);
        let mut out = vec![0.0; geom.out_h() * geom.out_w() * cout];
        geom.for_each_tap(|o, tap, i| {
            for c in 0..cin {
                for d in 0..cout {
                    out[o * cout + d] += input[i * cin + c] * weight[(tap * cin + c) * cout + d];
                }
            }
        });
        out
    }

    fn values(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (h, w, k, stride) in [(6, 8, 3, 1), (8, 8, 3, 2), (4, 6, 1, 1), (5, 7, 3, 1)] {
            let geom = ConvGeom {
                h,
                w,
                cin: 3,
                cout: 2,
                k,
                stride,
            };
            let x = values(h * w * 3, 1);
            let wt = values(k * k * 6, 2);
            let fast = conv2d_forward(geom, &x, &wt);
            let slow = naive_forward(geom, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} k{k} s{stride}");
            }
            // the adjoint identity <conv(x), g> = <x, conv^T(g)> fixes grad_in;
            // linearity in the weights fixes grad_w
            let g = values(fast.len(), 3);
            let mut gi = vec![0.0; x.len()];
            let mut gw = vec![0.0; wt.len()];
            conv2d_backward(geom, &x, &wt, &g, Some(&mut gi), Some(&mut gw));
            let lhs: f64 = fast.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs_x: f64 = x.iter().zip(&gi).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = wt.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-10 && (lhs - rhs_w).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_products() {
        let (m, k, n) = (3, 4, 5);
        let a = values(m * k, 4);
        let b = values(k * n, 5);
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        let mut ga = vec![0.0; m * k];
        matmul_bt_acc(&c, &b, &mut ga, m, k, n);
        let mut gb = vec![0.0; k * n];
        matmul_at_acc(&a, &c, &mut gb, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let e: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((ga[i * k + p] - e).abs() < 1e-12);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let e: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((gb[p * n + j] - e).abs() < 1e-12);
            }
        }
    }
}
