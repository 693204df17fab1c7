//! Dense compute kernels behind the graph ops.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so results are bit-identical whether rayon splits the outer loop across
//! threads or not. `set_sequential(true)` disables the thread pool entirely.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the calling thread (strict mode).
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential() -> bool {
    SEQUENTIAL.load(Ordering::Relaxed)
}

const PAR_THRESHOLD: usize = 1 << 16;

fn run_rows<F: Fn(usize, &mut [f32]) + Sync>(out: &mut [f32], rows: usize, row_len: usize, work: usize, f: F) {
    debug_assert_eq!(out.len(), rows * row_len);
    if sequential() || work < PAR_THRESHOLD {
        for (i, chunk) in out.chunks_mut(row_len).enumerate() {
            f(i, chunk);
        }
    } else {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    run_rows(&mut out, m, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// C[m,r] = A[m,k] * B[r,k]^T  (rows of both operands are contiguous)
pub fn mm_abt(a: &[f32], b: &[f32], m: usize, k: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * r];
    run_rows(&mut out, m, r, m * k * r, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *o = s;
        }
    });
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn mm_atb(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    run_rows(&mut out, k, n, m * k * n, |j, row| {
        for p in 0..m {
            let av = a[p * k + j];
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn new(
        batch: usize,
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < kernel || eff_w < kernel {
            return None;
        }
        Some(ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            pad,
            out_h: (eff_h - kernel) / stride + 1,
            out_w: (eff_w - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Lay out every receptive field as a row: [batch*out_h*out_w, in_ch*k*k].
pub fn im2col(input: &[f32], d: &ConvDims) -> Vec<f32> {
    let patch = d.patch_len();
    let mut cols = vec![0.0f32; d.out_positions() * patch];
    let plane = d.in_h * d.in_w;
    for n in 0..d.batch {
        let base_in = n * d.in_ch * plane;
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let row = ((n * d.out_h + oh) * d.out_w + ow) * patch;
                let mut c = row;
                for ci in 0..d.in_ch {
                    let ch_base = base_in + ci * plane;
                    for dy in 0..d.kernel {
                        let y = (oh * d.stride + dy) as isize - d.pad as isize;
                        for dx in 0..d.kernel {
                            let x = (ow * d.stride + dx) as isize - d.pad as isize;
                            if y >= 0 && (y as usize) < d.in_h && x >= 0 && (x as usize) < d.in_w {
                                cols[c] = input[ch_base + y as usize * d.in_w + x as usize];
                            }
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the padded input layout.
pub fn col2im(cols: &[f32], d: &ConvDims) -> Vec<f32> {
    let patch = d.patch_len();
    let plane = d.in_h * d.in_w;
    let mut input = vec![0.0f32; d.batch * d.in_ch * plane];
    for n in 0..d.batch {
        let base_in = n * d.in_ch * plane;
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let row = ((n * d.out_h + oh) * d.out_w + ow) * patch;
                let mut c = row;
                for ci in 0..d.in_ch {
                    let ch_base = base_in + ci * plane;
                    for dy in 0..d.kernel {
                        let y = (oh * d.stride + dy) as isize - d.pad as isize;
                        for dx in 0..d.kernel {
                            let x = (ow * d.stride + dx) as isize - d.pad as isize;
                            if y >= 0 && (y as usize) < d.in_h && x >= 0 && (x as usize) < d.in_w {
                                input[ch_base + y as usize * d.in_w + x as usize] += cols[c];
                            }
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    input
}

/// Reorder conv GEMM output [positions, out_ch] into NCHW.
pub fn positions_to_nchw(pos_major: &[f32], d: &ConvDims) -> Vec<f32> {
    let hw = d.out_h * d.out_w;
    let mut out = vec![0.0f32; d.batch * d.out_ch * hw];
    for n in 0..d.batch {
        for p in 0..hw {
            let row = (n * hw + p) * d.out_ch;
            for co in 0..d.out_ch {
                out[(n * d.out_ch + co) * hw + p] = pos_major[row + co];
            }
        }
    }
    out
}

/// Inverse of `positions_to_nchw`.
pub fn nchw_to_positions(nchw: &[f32], d: &ConvDims) -> Vec<f32> {
    let hw = d.out_h * d.out_w;
    let mut out = vec![0.0f32; d.batch * hw * d.out_ch];
    for n in 0..d.batch {
        for p in 0..hw {
            let row = (n * hw + p) * d.out_ch;
            for co in 0..d.out_ch {
                out[row + co] = nchw[(n * d.out_ch + co) * hw + p];
            }
        }
    }
    out
}
