//! Dense kernels. Every reduction runs sequentially by index so results are
//! bit-reproducible.

/// `out[m,n] = a[m,k] · b[k,n]`, overwriting `out`.
///
/// Each output element accumulates its `k` products in increasing `k` order.
/// The register tiling below only changes which elements are in flight
/// together, never the order of any single element's sum.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const R: usize = 2;
    const C: usize = 8;
    let n_main = n - n % C;
    let m_main = m - m % R;
    let mut i = 0;
    while i < m_main {
        let mut j = 0;
        while j < n_main {
            let mut acc = [[0.0f64; C]; R];
            for kk in 0..k {
                let b_row: &[f64; C] = b[kk * n + j..kk * n + j + C].try_into().unwrap();
                for r in 0..R {
                    let aik = a[(i + r) * k + kk];
                    for c in 0..C {
                        acc[r][c] += aik * b_row[c];
                    }
                }
            }
            for r in 0..R {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(&acc[r]);
            }
            j += C;
        }
        if n_main < n {
            for r in i..i + R {
                row_tail(a, b, k, n, r, n_main, out);
            }
        }
        i += R;
    }
    for r in m_main..m {
        row_tail(a, b, k, n, r, 0, out);
    }
}

fn row_tail(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, j0: usize, out: &mut [f64]) {
    let row = &mut out[i * n + j0..(i + 1) * n];
    row.fill(0.0);
    for kk in 0..k {
        let aik = a[i * k + kk];
        let b_row = &b[kk * n + j0..(kk + 1) * n];
        for (c, &bv) in row.iter_mut().zip(b_row) {
            *c += aik * bv;
        }
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `x` (with `shape`) into the layout whose axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Copy + Default>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::default(); x.len()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
