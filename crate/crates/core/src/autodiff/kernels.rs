//! Dense numeric kernels behind the graph ops: GEMM and im2col convolution.
//!
//! Convolutions are cross-correlations with "same" spatial zero padding and
//! causal temporal padding (output step `t` sees input steps `t-kt+1..=t`).
//! A 2-D convolution is the `t = kt = 1` case.

use rayon::prelude::*;

/// Items per fixed reduction group; weight gradients are summed per group and
/// then across groups in index order, so results do not depend on threads.
const REDUCE_GROUP: usize = 8;

/// `c = a * b + beta * c` with optional transposes. `a` is logically
/// `[m, k]`, `b` is `[k, n]`, `c` is `[m, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays in
    // bounds, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a batch of `items`, each `[t, h, w, cin]`, against
/// a kernel `[kt, k, k, cin, cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub items: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub k: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.t * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.kt * self.k * self.k * self.cin
    }

    fn in_item(&self) -> usize {
        self.rows() * self.cin
    }

    fn out_item(&self) -> usize {
        self.rows() * self.cout
    }

    pub fn weight_len(&self) -> usize {
        self.patch() * self.cout
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        let mut row = 0;
        for t in 0..self.t {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let dst_row = &mut col[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for dt in 0..self.kt {
                        let ti = t as isize + dt as isize - (self.kt as isize - 1);
                        for dy in 0..self.k {
                            let yi = y as isize + dy as isize - pad;
                            for dx in 0..self.k {
                                let xi = xx as isize + dx as isize - pad;
                                let dst = &mut dst_row[off..off + self.cin];
                                if ti < 0 || yi < 0 || xi < 0 || yi >= self.h as isize || xi >= self.w as isize {
                                    dst.fill(0.0);
                                } else {
                                    let src = ((ti as usize * self.h + yi as usize) * self.w + xi as usize) * self.cin;
                                    dst.copy_from_slice(&x[src..src + self.cin]);
                                }
                                off += self.cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        let mut row = 0;
        for t in 0..self.t {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let src_row = &col[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for dt in 0..self.kt {
                        let ti = t as isize + dt as isize - (self.kt as isize - 1);
                        for dy in 0..self.k {
                            let yi = y as isize + dy as isize - pad;
                            for dxk in 0..self.k {
                                let xi = xx as isize + dxk as isize - pad;
                                if ti >= 0 && yi >= 0 && xi >= 0 && yi < self.h as isize && xi < self.w as isize {
                                    let dst = ((ti as usize * self.h + yi as usize) * self.w + xi as usize) * self.cin;
                                    for (d, s) in dx[dst..dst + self.cin].iter_mut().zip(&src_row[off..off + self.cin])
                                    {
                                        *d += s;
                                    }
                                }
                                off += self.cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.items * g.out_item()];
    if g.items == 0 {
        return out;
    }
    out.par_chunks_mut(g.out_item())
        .zip(x.par_chunks(g.in_item()))
        .for_each_init(
            || vec![0.0; g.rows() * g.patch()],
            |col, (o, xi)| {
                g.im2col(xi, col);
                gemm(g.rows(), g.patch(), g.cout, col, false, w, false, 0.0, o);
                if let Some(b) = bias {
                    for row in o.chunks_mut(g.cout) {
                        for (v, bb) in row.iter_mut().zip(b) {
                            *v += bb;
                        }
                    }
                }
            },
        );
    out
}

pub(crate) fn conv_grad_input(g: &ConvGeom, dout: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.items * g.in_item()];
    if g.items == 0 {
        return dx;
    }
    dx.par_chunks_mut(g.in_item())
        .zip(dout.par_chunks(g.out_item()))
        .for_each_init(
            || vec![0.0; g.rows() * g.patch()],
            |dcol, (dxi, doi)| {
                gemm(g.rows(), g.cout, g.patch(), doi, false, w, true, 0.0, dcol);
                g.col2im(dcol, dxi);
            },
        );
    dx
}

pub(crate) fn conv_grad_weight(g: &ConvGeom, x: &[f64], dout: &[f64]) -> Vec<f64> {
    let groups: Vec<Vec<f64>> = (0..g.items.div_ceil(REDUCE_GROUP))
        .into_par_iter()
        .map(|grp| {
            let mut acc = vec![0.0; g.weight_len()];
            let mut col = vec![0.0; g.rows() * g.patch()];
            let end = ((grp + 1) * REDUCE_GROUP).min(g.items);
            for item in grp * REDUCE_GROUP..end {
                g.im2col(&x[item * g.in_item()..(item + 1) * g.in_item()], &mut col);
                let d = &dout[item * g.out_item()..(item + 1) * g.out_item()];
                gemm(g.patch(), g.rows(), g.cout, &col, true, d, false, 1.0, &mut acc);
            }
            acc
        })
        .collect();
    sum_ordered(groups, g.weight_len())
}

/// Column sums of a `[rows, width]` matrix.
pub(crate) fn column_sums(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in data.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn sum_ordered(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn causal_time_padding() {
        // single pixel, kt = 2, kernel weights [w_prev, w_now] = [10, 1]
        let g = ConvGeom {
            items: 1,
            t: 3,
            h: 1,
            w: 1,
            cin: 1,
            cout: 1,
            kt: 2,
            k: 1,
        };
        let out = conv_forward(&g, &[1.0, 2.0, 3.0], &[10.0, 1.0], None);
        assert_eq!(out, vec![1.0, 12.0, 23.0]);
    }
}
