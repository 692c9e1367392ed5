//! Dense layer kernels on feature-major batches (`x[k * b + n]`).
//!
//! Every output element accumulates `bias + sum_k w[j][k] * x[k][n]` in
//! increasing `k`, whatever the batch size, so a batch of one and a large
//! batch give bitwise-identical rows.

/// `y = W x + b` for `b` samples; `W` is `out x inp` row-major.
pub fn dense_forward(w: &[f64], bias: &[f64], inp: usize, x: &[f64], y: &mut [f64], b: usize) {
    let out = bias.len();
    debug_assert_eq!(w.len(), out * inp);
    debug_assert_eq!(x.len(), inp * b);
    debug_assert_eq!(y.len(), out * b);
    const NB: usize = 8;
    let mut j = 0;
    while j + 4 <= out {
        let mut n = 0;
        while n + NB <= b {
            let mut acc = [[0.0f64; NB]; 4];
            for (jj, row) in acc.iter_mut().enumerate() {
                *row = [bias[j + jj]; NB];
            }
            for k in 0..inp {
                let xs: &[f64; NB] = x[k * b + n..k * b + n + NB].try_into().unwrap();
                for (jj, row) in acc.iter_mut().enumerate() {
                    let wk = w[(j + jj) * inp + k];
                    for nn in 0..NB {
                        row[nn] += wk * xs[nn];
                    }
                }
            }
            for (jj, row) in acc.iter().enumerate() {
                y[(j + jj) * b + n..(j + jj) * b + n + NB].copy_from_slice(row);
            }
            n += NB;
        }
        for n in n..b {
            for jj in 0..4 {
                y[(j + jj) * b + n] = dot_column(&w[(j + jj) * inp..(j + jj + 1) * inp], bias[j + jj], x, b, n);
            }
        }
        j += 4;
    }
    for j in j..out {
        for n in 0..b {
            y[j * b + n] = dot_column(&w[j * inp..(j + 1) * inp], bias[j], x, b, n);
        }
    }
}

#[inline]
fn dot_column(wrow: &[f64], bias: f64, x: &[f64], b: usize, n: usize) -> f64 {
    let mut acc = bias;
    for (k, wk) in wrow.iter().enumerate() {
        acc += wk * x[k * b + n];
    }
    acc
}

/// Backward of `y = W x + b`: accumulates `gw += gy x^T`, `gb += sum gy`,
/// and writes `gx = W^T gy` when requested.
pub fn dense_backward(
    w: &[f64],
    inp: usize,
    x: &[f64],
    gy: &[f64],
    b: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let out = gb.len();
    for j in 0..out {
        let g = &gy[j * b..(j + 1) * b];
        gb[j] += g.iter().sum::<f64>();
        let gwrow = &mut gw[j * inp..(j + 1) * inp];
        for (k, gwk) in gwrow.iter_mut().enumerate() {
            let xs = &x[k * b..(k + 1) * b];
            let mut acc = 0.0;
            for n in 0..b {
                acc += g[n] * xs[n];
            }
            *gwk += acc;
        }
    }
    if let Some(gx) = gx {
        gx.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..out {
            let g = &gy[j * b..(j + 1) * b];
            let wrow = &w[j * inp..(j + 1) * inp];
            for (k, wk) in wrow.iter().enumerate() {
                let gxs = &mut gx[k * b..(k + 1) * b];
                for n in 0..b {
                    gxs[n] += wk * g[n];
                }
            }
        }
    }
}

pub fn tanh_in_place(y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = v.tanh());
}

/// `g *= 1 - y^2` for `y = tanh(pre)`.
pub fn tanh_backward(y: &[f64], g: &mut [f64]) {
    for (gi, yi) in g.iter_mut().zip(y) {
        *gi *= 1.0 - yi * yi;
    }
}
