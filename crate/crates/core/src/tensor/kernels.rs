// Forward and backward kernels for the graph ops. All kernels work on
// contiguous row-major buffers; shape validation happens in `graph`.

use super::{channel_layout, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match x {
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be (N,C,H,W), got {x:?}"),
                ))
            }
        };
        let (o, ci, kh, kw) = match wt {
            &[o, ci, kh, kw] => (o, ci, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be (O,C,kH,kW), got {wt:?}"),
                ))
            }
        };
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} vs kernel {wt:?}"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(
                "conv2d",
                format!("unsupported stride {stride}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {wt:?} larger than padded input {x:?}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        if self.w + self.pad <= kx {
            return (0, 0);
        }
        let hi = ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unfold one image into a `(C·kH·kW, Ho·Wo)` column matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane_out = g.ho * g.wo;
    for c in 0..g.c {
        let ip = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.in_row(oy, ky) else {
                        orow.fill(0.0);
                        continue;
                    };
                    let irow = &ip[iy * g.w..(iy + 1) * g.w];
                    orow[..lo].fill(0.0);
                    orow[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        orow[lo..hi].copy_from_slice(&irow[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            orow[ox] = irow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into an image gradient.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane_out = g.ho * g.wo;
    for c in 0..g.c {
        let ip = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let orow = &row[oy * g.wo..(oy + 1) * g.wo];
                    let irow = &mut ip[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        for (d, v) in irow[start..start + hi - lo].iter_mut().zip(&orow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            irow[ox * g.stride + kx - g.pad] += orow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C (m×n) = beta·C + A (m×k) · B (k×n)` on row-major buffers, with
/// optional transposition of `A` or `B` as stored.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) buffers whose lengths were checked.
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

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable per-thread buffer of `len` values (contents unspecified).
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let r = f(&mut buf[..len]);
        s.replace(buf);
        r
    })
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let ckk = g.c * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.o * plane_out];
    with_scratch(ckk * plane_out, |cols| {
        for n in 0..g.n {
            im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], cols);
            let on = &mut out[n * g.o * plane_out..(n + 1) * g.o * plane_out];
            if let Some(b) = bias {
                for (o, chunk) in on.chunks_mut(plane_out).enumerate() {
                    chunk.fill(b[o]);
                }
            }
            gemm(
                g.o,
                ckk,
                plane_out,
                wt,
                false,
                cols,
                false,
                if bias.is_some() { 1.0 } else { 0.0 },
                on,
            );
        }
    });
    out
}

/// Returns `(dx, dw, dbias)`; each is only computed when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let ckk = g.c * g.kh * g.kw;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; wt.len()]);
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.o];
        for n in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dout[(n * g.o + o) * plane_out..(n * g.o + o + 1) * plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return (dx, dw, db);
    }
    with_scratch(ckk * plane_out, |cols| {
        for n in 0..g.n {
            let dn = &dout[n * g.o * plane_out..(n + 1) * g.o * plane_out];
            if let Some(dw) = dw.as_mut() {
                im2col(g, &x[n * g.c * plane_in..(n + 1) * g.c * plane_in], cols);
                gemm(g.o, plane_out, ckk, dn, false, cols, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ckk, g.o, plane_out, wt, true, dn, false, 0.0, cols);
                col2im(
                    g,
                    cols,
                    &mut dx[n * g.c * plane_in..(n + 1) * g.c * plane_in],
                );
            }
        }
    });
    (dx, dw, db)
}

pub(crate) fn linear_forward(
    x: &[f64],
    n: usize,
    i: usize,
    wt: &[f64],
    o: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let xr = &x[r * i..(r + 1) * i];
        for k in 0..o {
            let wr = &wt[k * i..(k + 1) * i];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            out[r * o + k] = dot + bias.map_or(0.0, |b| b[k]);
        }
    }
    out
}

/// Bilinear sampling plan: for every output pixel, up to four source taps.
///
/// Grid coordinates are normalized to `[-1, 1]` with corner alignment, so
/// `-1` and `1` address the centers of the first and last source pixels.
/// A sample is valid iff it lies inside the source extent; invalid samples
/// have all-zero weights.
#[derive(Clone, Debug)]
pub(crate) struct SamplePlan {
    pub n: usize,
    pub c: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub idx: Vec<[u32; 4]>,
    pub wts: Vec<[f64; 4]>,
    pub mask: Vec<f64>,
}

const GRID_TOL: f64 = 1e-9;

impl SamplePlan {
    pub fn new(input: &[usize], grid: &[usize], grid_data: &[f64]) -> Result<Self> {
        let (n, c, h_in, w_in) = match input {
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "bilinear_sample",
                    format!("feature must be (N,C,H,W), got {input:?}"),
                ))
            }
        };
        let (gn, h_out, w_out) = match grid {
            &[gn, ho, wo, 2] => (gn, ho, wo),
            _ => {
                return Err(Error::shape(
                    "bilinear_sample",
                    format!("grid must be (N,Ho,Wo,2), got {grid:?}"),
                ))
            }
        };
        if gn != n {
            return Err(Error::shape(
                "bilinear_sample",
                format!("feature {input:?} vs grid {grid:?}"),
            ));
        }
        let total = n * h_out * w_out;
        let mut idx = Vec::with_capacity(total);
        let mut wts = Vec::with_capacity(total);
        let mut mask = Vec::with_capacity(total);
        let sx = (w_in as f64 - 1.0) * 0.5;
        let sy = (h_in as f64 - 1.0) * 0.5;
        for p in 0..total {
            let gx = grid_data[2 * p];
            let gy = grid_data[2 * p + 1];
            let px = (gx + 1.0) * sx;
            let py = (gy + 1.0) * sy;
            let inside = px.is_finite()
                && py.is_finite()
                && px >= -GRID_TOL
                && py >= -GRID_TOL
                && px <= (w_in - 1) as f64 + GRID_TOL
                && py <= (h_in - 1) as f64 + GRID_TOL;
            if !inside {
                idx.push([0; 4]);
                wts.push([0.0; 4]);
                mask.push(0.0);
                continue;
            }
            let px = px.clamp(0.0, (w_in - 1) as f64);
            let py = py.clamp(0.0, (h_in - 1) as f64);
            let x0 = (px.floor() as usize).min(w_in - 1);
            let y0 = (py.floor() as usize).min(h_in - 1);
            let x1 = (x0 + 1).min(w_in - 1);
            let y1 = (y0 + 1).min(h_in - 1);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            idx.push([
                (y0 * w_in + x0) as u32,
                (y0 * w_in + x1) as u32,
                (y1 * w_in + x0) as u32,
                (y1 * w_in + x1) as u32,
            ]);
            wts.push([
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ]);
            mask.push(1.0);
        }
        Ok(Self {
            n,
            c,
            h_in,
            w_in,
            h_out,
            w_out,
            idx,
            wts,
            mask,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let po = self.h_out * self.w_out;
        let pi = self.h_in * self.w_in;
        let mut out = vec![0.0; self.n * self.c * po];
        for n in 0..self.n {
            let taps = n * po..(n + 1) * po;
            for c in 0..self.c {
                let src = &x[(n * self.c + c) * pi..(n * self.c + c + 1) * pi];
                let dst = &mut out[(n * self.c + c) * po..(n * self.c + c + 1) * po];
                for (d, (ix, w)) in dst
                    .iter_mut()
                    .zip(self.idx[taps.clone()].iter().zip(&self.wts[taps.clone()]))
                {
                    *d = w[0] * src[ix[0] as usize]
                        + w[1] * src[ix[1] as usize]
                        + w[2] * src[ix[2] as usize]
                        + w[3] * src[ix[3] as usize];
                }
            }
        }
        out
    }

    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let po = self.h_out * self.w_out;
        let pi = self.h_in * self.w_in;
        let mut dx = vec![0.0; self.n * self.c * pi];
        for n in 0..self.n {
            for c in 0..self.c {
                let d_in = &mut dx[(n * self.c + c) * pi..(n * self.c + c + 1) * pi];
                let d_out = &dout[(n * self.c + c) * po..(n * self.c + c + 1) * po];
                for (p, &g) in d_out.iter().enumerate() {
                    let ix = &self.idx[n * po + p];
                    let w = &self.wts[n * po + p];
                    for k in 0..4 {
                        d_in[ix[k] as usize] += w[k] * g;
                    }
                }
            }
        }
        dx
    }

    pub fn mask_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.n, 1, self.h_out, self.w_out],
            data: self.mask.clone(),
        }
    }
}

/// Result of sampling a plain tensor outside any graph.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub output: Tensor,
    pub mask: Tensor,
}

pub(crate) fn softmax_channel(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (outer, c, inner) = channel_layout(shape);
    let mut out = vec![0.0; x.len()];
    for n in 0..outer {
        for p in 0..inner {
            let at = |k: usize| (n * c + k) * inner + p;
            let m = (0..c).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[at(k)] /= z;
            }
        }
    }
    out
}

pub(crate) fn flip_w(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let w = *shape.last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w.max(1)) {
        out.extend(row.iter().rev());
    }
    out
}
