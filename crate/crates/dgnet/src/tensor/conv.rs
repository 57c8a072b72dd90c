//! Convolution kernels: im2col + matmul forward, col2im backward.
//!
//! Summation orders are fixed, so outputs are bit-deterministic for
//! identical inputs.

use super::array::Element;

/// Resolved convolution geometry; recorded on the tape so backward can
/// rebuild the column matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn output_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        (extent + 2 * padding).checked_sub(k).map(|d| d / stride + 1)
    }
}

/// C[m,n] += A[m,p] * B[p,n], row-major.
fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..p {
            let av = a[i * p + l];
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// C[m,n] += A^T[m,p] * B[p,n] where A is stored as [p,m].
fn matmul_at_b_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, n: usize) {
    for l in 0..p {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// Unfolds one sample into a [c_in*k*k, h_out*w_out] column matrix.
fn im2col<E: Element>(x: &[E], d: &ConvDims, cols: &mut [E]) {
    let ohw = d.h_out * d.w_out;
    cols.fill(E::zero());
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = ((ci * d.k + kh) * d.k + kw) * ohw;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let src = ih as usize * d.w;
                    let dst = row + oh * d.w_out;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            cols[dst + ow] = plane[src + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto one input sample (accumulating).
fn col2im<E: Element>(cols: &[E], d: &ConvDims, x: &mut [E]) {
    let ohw = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = ((ci * d.k + kh) * d.k + kw) * ohw;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = ih as usize * d.w;
                    let src = row + oh * d.w_out;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            let i = dst + iw as usize;
                            plane[i] = plane[i] + cols[src + ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<E: Element>(x: &[E], kernel: &[E], bias: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let ohw = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let mut out = vec![E::zero(); d.batch * d.c_out * ohw];
    let mut cols = vec![E::zero(); ckk * ohw];
    for b in 0..d.batch {
        im2col(&x[b * d.c_in * d.h * d.w..], d, &mut cols);
        let o = &mut out[b * d.c_out * ohw..(b + 1) * d.c_out * ohw];
        if let Some(bias) = bias {
            for co in 0..d.c_out {
                o[co * ohw..(co + 1) * ohw].fill(bias[co]);
            }
        }
        matmul_acc(kernel, &cols, o, d.c_out, ckk, ohw);
    }
    out
}

/// Gradients w.r.t. input, kernel and bias given the output gradient.
pub fn backward<E: Element>(
    x: &[E],
    kernel: &[E],
    grad_out: &[E],
    d: &ConvDims,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let ohw = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let mut dx = vec![E::zero(); d.batch * d.c_in * d.h * d.w];
    let mut dk = vec![E::zero(); d.c_out * ckk];
    let mut db = vec![E::zero(); d.c_out];
    let mut cols = vec![E::zero(); ckk * ohw];
    let mut dcols = vec![E::zero(); ckk * ohw];
    for b in 0..d.batch {
        let g = &grad_out[b * d.c_out * ohw..(b + 1) * d.c_out * ohw];
        // dK += g @ cols^T  (arranged as dK[co, l] += sum_j g[co,j]*cols[l,j])
        im2col(&x[b * d.c_in * d.h * d.w..], d, &mut cols);
        for co in 0..d.c_out {
            let g_row = &g[co * ohw..(co + 1) * ohw];
            let dk_row = &mut dk[co * ckk..(co + 1) * ckk];
            for l in 0..ckk {
                let c_row = &cols[l * ohw..(l + 1) * ohw];
                let mut s = E::zero();
                for j in 0..ohw {
                    s = s + g_row[j] * c_row[j];
                }
                dk_row[l] = dk_row[l] + s;
            }
            db[co] = db[co] + g_row.iter().copied().sum();
        }
        // dcols = K^T @ g, then scatter back to the input sample
        dcols.fill(E::zero());
        matmul_at_b_acc(kernel, g, &mut dcols, ckk, d.c_out, ohw);
        col2im(&dcols, d, &mut dx[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w]);
    }
    (dx, dk, db)
}
