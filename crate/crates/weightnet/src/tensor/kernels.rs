//! Raw numeric loops behind the differentiable ops.
//!
//! Each driver exists in a sequential flavor ([`seq`]) and, with the
//! `parallel` feature, a rayon flavor ([`par`]); the crate-level re-exports
//! pick one at compile time. The parallel versions only split over disjoint
//! output regions and keep every element's summation order identical to the
//! sequential code, so the two flavors are bitwise-equal. `benches/kernels.rs`
//! compares them head to head.

use super::Scalar;

/// Geometry of one grouped 2-D convolution, NCHW.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn c_in_per_group(&self) -> usize {
        self.c_in / self.groups
    }
    pub fn c_out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
    /// Number of spatial output positions.
    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }
    /// im2col row count: channels-per-group times kernel area.
    pub fn col_rows(&self) -> usize {
        self.c_in_per_group() * self.kh * self.kw
    }
}

/// Row `i` of `out = a(m×k) · b(k×n)`, overwrite. t ascending fixes the
/// summation order per element.
fn matmul_row<T: Scalar>(a: &[T], b: &[T], row: &mut [T], i: usize, k: usize, n: usize) {
    row.fill(T::ZERO);
    for t in 0..k {
        let av = a[i * k + t];
        let brow = &b[t * n..(t + 1) * n];
        for (r, &bv) in row.iter_mut().zip(brow) {
            *r += av * bv;
        }
    }
}

/// Row `i` of `out(m×k) += a(m×n) · b(k×n)^T`.
fn matmul_nt_row<T: Scalar>(a: &[T], b: &[T], row: &mut [T], i: usize, n: usize, k: usize) {
    let arow = &a[i * n..(i + 1) * n];
    for (t, r) in row.iter_mut().enumerate().take(k) {
        let brow = &b[t * n..(t + 1) * n];
        let mut s = T::ZERO;
        for j in 0..n {
            s += arow[j] * brow[j];
        }
        *r += s;
    }
}

/// Row `t` of `out(k×n) += a(m×k)^T · g(m×n)`.
fn matmul_tn_row<T: Scalar>(a: &[T], g: &[T], row: &mut [T], t: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let av = a[i * k + t];
        let grow = &g[i * n..(i + 1) * n];
        for (r, &gv) in row.iter_mut().zip(grow) {
            *r += av * gv;
        }
    }
}

/// Unfold one sample-group image block into `cols` (col_rows × positions).
pub fn im2col<T: Scalar>(
    x: &[T], // c × h × w
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    cols: &mut [T],
) {
    let positions = g.out_positions();
    debug_assert_eq!(cols.len(), c * g.kh * g.kw * positions);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[p] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            T::ZERO
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `cols` back, accumulating into the image block (inverse scatter of
/// [`im2col`]).
pub fn col2im_acc<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    x: &mut [T],
) {
    let positions = g.out_positions();
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward for one (sample, group) task: `out_chunk` is the c_out/g × h'·w'
/// slab of the output.
fn conv_fwd_task<T: Scalar>(x: &[T], weight: &[T], out_chunk: &mut [T], g: &ConvGeom, task: usize) {
    let (b, gi) = (task / g.groups, task % g.groups);
    let cg = g.c_in_per_group();
    let og = g.c_out_per_group();
    let ckk = g.col_rows();
    let l = g.out_positions();
    let mut cols = vec![T::ZERO; ckk * l];
    let x_block = &x[(b * g.c_in + gi * cg) * g.h * g.w..(b * g.c_in + (gi + 1) * cg) * g.h * g.w];
    im2col(x_block, cg, g.h, g.w, g, &mut cols);
    let w_block = &weight[gi * og * ckk..(gi + 1) * og * ckk];
    for i in 0..og {
        matmul_row(w_block, &cols, &mut out_chunk[i * l..(i + 1) * l], i, ckk, l);
    }
}

/// Input-gradient for one (sample, group) task: writes the matching slab of
/// `dx` (slab starts zeroed).
fn conv_dx_task<T: Scalar>(weight: &[T], gout: &[T], dx_chunk: &mut [T], g: &ConvGeom, task: usize) {
    let (b, gi) = (task / g.groups, task % g.groups);
    let cg = g.c_in_per_group();
    let og = g.c_out_per_group();
    let ckk = g.col_rows();
    let l = g.out_positions();
    let w_block = &weight[gi * og * ckk..(gi + 1) * og * ckk];
    let go_block = &gout[(b * g.c_out + gi * og) * l..(b * g.c_out + (gi + 1) * og) * l];
    let mut dcols = vec![T::ZERO; ckk * l];
    for t in 0..ckk {
        matmul_tn_row(w_block, go_block, &mut dcols[t * l..(t + 1) * l], t, og, ckk, l);
    }
    col2im_acc(&dcols, cg, g.h, g.w, g, dx_chunk);
}

/// Weight-gradient for one group: accumulates over the batch in ascending
/// sample order (the same order the sequential path uses).
fn conv_dw_task<T: Scalar>(x: &[T], gout: &[T], dw_chunk: &mut [T], g: &ConvGeom, gi: usize) {
    let cg = g.c_in_per_group();
    let og = g.c_out_per_group();
    let ckk = g.col_rows();
    let l = g.out_positions();
    let mut cols = vec![T::ZERO; ckk * l];
    for b in 0..g.batch {
        let x_block =
            &x[(b * g.c_in + gi * cg) * g.h * g.w..(b * g.c_in + (gi + 1) * cg) * g.h * g.w];
        im2col(x_block, cg, g.h, g.w, g, &mut cols);
        let go_block = &gout[(b * g.c_out + gi * og) * l..(b * g.c_out + (gi + 1) * og) * l];
        for i in 0..og {
            matmul_nt_row(go_block, &cols, &mut dw_chunk[i * ckk..(i + 1) * ckk], i, l, ckk);
        }
    }
}

macro_rules! kernel_drivers {
    ($each_chunk:ident) => {
        use super::*;

        /// `out = a(m×k) · b(k×n)`, overwrite.
        pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], _m: usize, k: usize, n: usize) {
            $each_chunk(out, n, |i, row| matmul_row(a, b, row, i, k, n));
        }

        /// `out(m×k) += a(m×n) · b(k×n)^T`.
        pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], _m: usize, n: usize, k: usize) {
            $each_chunk(out, k, |i, row| matmul_nt_row(a, b, row, i, n, k));
        }

        /// `out(k×n) += a(m×k)^T · g(m×n)`.
        pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
            $each_chunk(out, n, |t, row| matmul_tn_row(a, g, row, t, m, k, n));
        }

        /// Grouped conv forward; `out` is batch × c_out × h' × w', overwrite.
        pub fn conv2d_into<T: Scalar>(x: &[T], weight: &[T], out: &mut [T], g: &ConvGeom) {
            let chunk = g.c_out_per_group() * g.out_positions();
            $each_chunk(out, chunk, |task, slab| conv_fwd_task(x, weight, slab, g, task));
        }

        /// Grouped conv input gradient, accumulating into `dx`.
        pub fn conv2d_dx_acc<T: Scalar>(weight: &[T], gout: &[T], dx: &mut [T], g: &ConvGeom) {
            let chunk = g.c_in_per_group() * g.h * g.w;
            $each_chunk(dx, chunk, |task, slab| conv_dx_task(weight, gout, slab, g, task));
        }

        /// Grouped conv weight gradient, accumulating into `dw`.
        pub fn conv2d_dw_acc<T: Scalar>(x: &[T], gout: &[T], dw: &mut [T], g: &ConvGeom) {
            let chunk = g.c_out_per_group() * g.col_rows();
            $each_chunk(dw, chunk, |gi, slab| conv_dw_task(x, gout, slab, g, gi));
        }
    };
}

pub mod seq {
    use super::Scalar;

    fn each_chunk<T: Scalar>(buf: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    kernel_drivers!(each_chunk);
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::Scalar;
    use rayon::prelude::*;

    /// Below this many output elements the rayon dispatch costs more than
    /// it buys; fall through to the sequential loop (same arithmetic, same
    /// result).
    const PAR_MIN_ELEMS: usize = 8192;

    fn each_chunk<T: Scalar>(buf: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
        if buf.len() < PAR_MIN_ELEMS || buf.len() == chunk {
            buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        } else {
            buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }

    kernel_drivers!(each_chunk);
}

#[cfg(feature = "parallel")]
pub use par::{conv2d_dw_acc, conv2d_dx_acc, conv2d_into, matmul_into, matmul_nt_acc, matmul_tn_acc};
#[cfg(not(feature = "parallel"))]
pub use seq::{conv2d_dw_acc, conv2d_dx_acc, conv2d_into, matmul_into, matmul_nt_acc, matmul_tn_acc};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_then_col2im_restores_multiplicity() {
        // Every input pixel is visited once per kernel position that covers
        // it; with a 1x1 kernel and stride 1 that multiplicity is exactly 1.
        let g = ConvGeom {
            batch: 1,
            c_in: 2,
            h: 3,
            w: 3,
            c_out: 2,
            kh: 1,
            kw: 1,
            groups: 1,
            stride: 1,
            pad: 0,
            h_out: 3,
            w_out: 3,
        };
        let x: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let mut cols = vec![0.0; 2 * 9];
        im2col(&x, 2, 3, 3, &g, &mut cols);
        assert_eq!(cols, x);
        let mut back = vec![0.0; 18];
        col2im_acc(&cols, 2, 3, 3, &g, &mut back);
        assert_eq!(back, x);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_matches_seq_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // Big enough to cross the parallel threshold.
        let (m, k, n) = (130, 71, 97);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out_s = vec![0.0f32; m * n];
        let mut out_p = vec![0.0f32; m * n];
        seq::matmul_into(&a, &b, &mut out_s, m, k, n);
        par::matmul_into(&a, &b, &mut out_p, m, k, n);
        assert_eq!(out_s, out_p);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_conv_matches_seq_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeom {
            batch: 6,
            c_in: 8,
            h: 14,
            w: 14,
            c_out: 8,
            kh: 3,
            kw: 3,
            groups: 2,
            stride: 1,
            pad: 1,
            h_out: 14,
            w_out: 14,
        };
        let x: Vec<f32> = (0..6 * 8 * 196).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..8 * 4 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out_s = vec![0.0f32; 6 * 8 * 196];
        let mut out_p = out_s.clone();
        seq::conv2d_into(&x, &w, &mut out_s, &g);
        par::conv2d_into(&x, &w, &mut out_p, &g);
        assert_eq!(out_s, out_p);

        let gout: Vec<f32> = (0..6 * 8 * 196).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dw_s = vec![0.0f32; 8 * 4 * 9];
        let mut dw_p = dw_s.clone();
        seq::conv2d_dw_acc(&x, &gout, &mut dw_s, &g);
        par::conv2d_dw_acc(&x, &gout, &mut dw_p, &g);
        assert_eq!(dw_s, dw_p);

        let mut dx_s = vec![0.0f32; 6 * 8 * 196];
        let mut dx_p = dx_s.clone();
        seq::conv2d_dx_acc(&w, &gout, &mut dx_s, &g);
        par::conv2d_dx_acc(&w, &gout, &mut dx_p, &g);
        assert_eq!(dx_s, dx_p);
    }
}
