//! f64 reference implementations and finite-difference helpers.
//!
//! These mirror the engine's primitives independently (direct formula
//! evaluation in f64) so analytic gradients can be checked against central
//! finite differences without f32 rounding noise drowning the comparison.

#![allow(dead_code)]

pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            hi[i] += eps;
            let mut lo = x.to_vec();
            lo[i] -= eps;
            (f(&hi) - f(&lo)) / (2.0 * eps)
        })
        .collect()
}

/// Norm-relative error between an f32 gradient and its f64 reference.
pub fn rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---- reference ops ---------------------------------------------------------

pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[derive(Clone, Copy)]
pub struct ConvRef {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvRef {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Direct-summation convolution.
pub fn conv2d_ref(input: &[f64], weight: &[f64], bias: Option<&[f64]>, d: ConvRef) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.out_ch * oh * ow];
    for n in 0..d.batch {
        for co in 0..d.out_ch {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                    for ci in 0..d.in_ch {
                        for dy in 0..d.kernel {
                            for dx in 0..d.kernel {
                                let sy = (y * d.stride + dy) as isize - d.pad as isize;
                                let sx = (x * d.stride + dx) as isize - d.pad as isize;
                                if sy >= 0 && (sy as usize) < d.in_h && sx >= 0 && (sx as usize) < d.in_w {
                                    let iv = input[((n * d.in_ch + ci) * d.in_h + sy as usize) * d.in_w + sx as usize];
                                    let wv = weight[((co * d.in_ch + ci) * d.kernel + dy) * d.kernel + dx];
                                    acc += iv * wv;
                                }
                            }
                        }
                    }
                    out[((n * d.out_ch + co) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

pub fn softmax_ref(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / width {
        let row = &x[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (o, e) in out[r * width..(r + 1) * width].iter_mut().zip(exps) {
            *o = e / denom;
        }
    }
    out
}

pub fn log_softmax_ref(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / width {
        let row = &x[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_denom = denom.ln();
        for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = v - m - log_denom;
        }
    }
    out
}

pub fn cross_entropy_ref(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += denom.ln() + m - row[y];
    }
    loss / labels.len() as f64
}

pub fn avg_pool_ref(x: &[f64], n: usize, c: usize, h: usize, w: usize, kernel: usize, stride: usize) -> Vec<f64> {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for img in 0..n * c {
        for y in 0..oh {
            for x0 in 0..ow {
                let mut acc = 0.0;
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        acc += x[img * h * w + (y * stride + dy) * w + x0 * stride + dx];
                    }
                }
                out[img * oh * ow + y * ow + x0] = acc / (kernel * kernel) as f64;
            }
        }
    }
    out
}

/// Gumbel-Softmax joint probabilities from raw logits (Eq. 4 reference):
/// softmax((log_softmax(pi) + g) / tau).
pub fn gumbel_softmax_ref(pi: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let logp = log_softmax_ref(pi, pi.len());
    let z: Vec<f64> = logp.iter().zip(g).map(|(&lp, &gv)| (lp + gv) / tau).collect();
    softmax_ref(&z, z.len())
}
