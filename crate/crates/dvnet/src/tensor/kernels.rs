//! Raw forward and adjoint kernels for every network operation.
//!
//! Convolutions run as blocked im2col + GEMM. Within one GEMM call each
//! output element accumulates its k-panel in a fixed order, and all rayon
//! splits here are over disjoint output rows or fixed column blocks, so
//! kernel results are identical for any worker count.
//!
//! Layout conventions:
//! - activations `[batch, channels, spatial...]`, row-major, last axis fastest
//! - convolution kernels `[c_out, c_in, k...]`
//! - transposed-convolution kernels `[c_in, c_out, k...]`, which makes a
//!   convolution kernel usable as its own adjoint without copying

use rayon::prelude::*;

use super::elem::Element;
use super::gemm_strided::{gemm_strided, MatMut, MatRef};
use super::Shape;
use crate::error::{Error, Result};

/// Column block length for blocked im2col. Fixed so results cannot depend on
/// the thread count; sized to keep the column buffer in the tens of MB.
const COL_CHUNK: usize = 2048;

// ---------------------------------------------------------------------------
// shape arithmetic
// ---------------------------------------------------------------------------

pub fn conv_out_shape(xs: &Shape, ws: &Shape, stride: usize, pad: usize) -> Result<Shape> {
    let op = "conv";
    if ws.spatial_rank() != xs.spatial_rank() {
        return Err(Error::shape(
            op,
            format!(
                "kernel spatial rank {} does not match input spatial rank {}",
                ws.spatial_rank(),
                xs.spatial_rank()
            ),
        ));
    }
    if ws.channels() != xs.channels() {
        return Err(Error::shape(
            op,
            format!(
                "channel axis: kernel expects {} input channels, input has {}",
                ws.channels(),
                xs.channels()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(xs.spatial_rank());
    for (ax, (&n, &k)) in xs.spatial().iter().zip(ws.spatial()).enumerate() {
        if k > n + 2 * pad {
            return Err(Error::shape(
                op,
                format!("spatial axis {ax}: kernel extent {k} exceeds padded input {}", n + 2 * pad),
            ));
        }
        out.push((n + 2 * pad - k) / stride + 1);
    }
    Ok(Shape::act(xs.batch(), ws.batch(), &out))
}

pub fn conv_transpose_out_shape(
    xs: &Shape,
    ws: &Shape,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Shape> {
    let op = "conv_transpose";
    if ws.spatial_rank() != xs.spatial_rank() {
        return Err(Error::shape(
            op,
            format!(
                "kernel spatial rank {} does not match input spatial rank {}",
                ws.spatial_rank(),
                xs.spatial_rank()
            ),
        ));
    }
    if ws.batch() != xs.channels() {
        return Err(Error::shape(
            op,
            format!(
                "channel axis: kernel expects {} input channels, input has {}",
                ws.batch(),
                xs.channels()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1".to_string()));
    }
    if out_pad >= stride && !(out_pad == 0 && stride == 1) {
        return Err(Error::shape(
            op,
            format!("output padding {out_pad} must be smaller than stride {stride}"),
        ));
    }
    let mut out = Vec::with_capacity(xs.spatial_rank());
    for (ax, (&n, &k)) in xs.spatial().iter().zip(ws.spatial()).enumerate() {
        let ext = (stride * (n - 1) + k + out_pad) as isize - 2 * pad as isize;
        if ext < 1 {
            return Err(Error::shape(
                op,
                format!("spatial axis {ax}: output extent {ext} is not positive"),
            ));
        }
        out.push(ext as usize);
    }
    Ok(Shape::act(xs.batch(), ws.channels(), &out))
}

fn spatial_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for ax in (0..dims.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * dims[ax + 1];
    }
    s
}

fn decode(mut lin: usize, dims: &[usize], out: &mut [usize]) {
    for ax in (0..dims.len()).rev() {
        out[ax] = lin % dims[ax];
        lin /= dims[ax];
    }
}

// ---------------------------------------------------------------------------
// im2col
// ---------------------------------------------------------------------------

/// Fill `cols` (`c_in * kvol` rows by `col_range` columns, row-major) with
/// input samples taken at `grid_voxel * stride + k_offset - pad`. Out-of-range
/// samples are zero. Every entry of `cols[..rows*len]` is written.
#[allow(clippy::too_many_arguments)]
#[doc(hidden)]
pub fn im2col<T: Element>(
    x: &[T],
    in_spatial: &[usize],
    c_in: usize,
    k_spatial: &[usize],
    stride: usize,
    pad: usize,
    grid: &[usize],
    col_start: usize,
    ncols: usize,
    cols: &mut [T],
) {
    let rank = in_spatial.len();
    let kvol: usize = k_spatial.iter().product();
    let v_in: usize = in_spatial.iter().product();
    let in_strides = spatial_strides(in_spatial);
    let nx_out = grid[rank - 1];
    let nx_in = in_spatial[rank - 1];
    let ipad = pad as isize;

    cols[..c_in * kvol * ncols]
        .par_chunks_mut(ncols)
        .enumerate()
        .for_each(|(r, row)| {
            let ci = r / kvol;
            let mut d = [0usize; 3];
            decode(r % kvol, k_spatial, &mut d[..rank]);
            let dx = d[rank - 1] as isize - ipad;
            let mut filled = 0usize;
            let mut col = col_start;
            while filled < ncols {
                let line = col / nx_out;
                let ox0 = col % nx_out;
                let line_len = (nx_out - ox0).min(ncols - filled);
                // outer-axis input offset for this line
                let mut base = ci * v_in;
                let mut in_bounds = true;
                let mut l = line;
                for ax in (0..rank - 1).rev() {
                    let o = l % grid[ax];
                    l /= grid[ax];
                    let i = (o * stride) as isize + d[ax] as isize - ipad;
                    if i < 0 || i >= in_spatial[ax] as isize {
                        in_bounds = false;
                        break;
                    }
                    base += i as usize * in_strides[ax];
                }
                let dst = &mut row[filled..filled + line_len];
                if !in_bounds {
                    dst.fill(T::zero());
                } else if stride == 1 {
                    // i_x = o_x + dx, valid while 0 <= i_x < nx_in
                    let lo = (-dx).max(ox0 as isize) as usize;
                    let hi_excl = (nx_in as isize - dx)
                        .clamp(lo as isize, (ox0 + line_len) as isize)
                        as usize;
                    let lo = lo.min(ox0 + line_len);
                    dst[..lo - ox0].fill(T::zero());
                    if hi_excl > lo {
                        let src0 = (lo as isize + dx) as usize;
                        dst[lo - ox0..hi_excl - ox0]
                            .copy_from_slice(&x[base + src0..base + src0 + (hi_excl - lo)]);
                    }
                    dst[hi_excl - ox0..].fill(T::zero());
                } else {
                    for (j, ox) in (ox0..ox0 + line_len).enumerate() {
                        let ix = (ox * stride) as isize + dx;
                        dst[j] = if ix >= 0 && ix < nx_in as isize {
                            x[base + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                filled += line_len;
                col += line_len;
            }
        });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn chunk_ranges(total: usize, chunk: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(total.div_ceil(chunk.max(1)));
    let mut start = 0;
    while start < total {
        let len = chunk.min(total - start);
        v.push((start, len));
        start += len;
    }
    v
}

/// Cross-correlation (no kernel flip).
///
/// Column chunks run in parallel, each as one full-height GEMM into a local
/// buffer that is copied back in chunk order; per-element summation order is
/// therefore independent of the worker count.
pub fn conv_fwd<T: Element>(
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Shape)> {
    let os = conv_out_shape(xs, ws, stride, pad)?;
    let (batch, c_in, c_out) = (xs.batch(), xs.channels(), ws.batch());
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let kvol: usize = ws.spatial().iter().product();
    let kdim = c_in * kvol;
    let mut out = vec![T::zero(); os.numel()];
    let pointwise = kvol == 1 && stride == 1 && pad == 0;
    let ranges = chunk_ranges(v_out, COL_CHUNK);

    for b in 0..batch {
        let x_b = &x[b * c_in * v_in..(b + 1) * c_in * v_in];
        let chunks: Vec<(usize, usize, Vec<T>)> = ranges
            .par_iter()
            .map_init(Vec::new, |scratch: &mut Vec<T>, &(col0, len)| {
                let mut cbuf = vec![T::zero(); c_out * len];
                if pointwise {
                    gemm_strided(
                        c_out, c_in, len,
                        MatRef::dense(w, kdim),
                        MatRef { buf: x_b, offset: col0, ld: v_in, trans: false },
                        MatMut::dense(&mut cbuf, len),
                        false,
                    );
                } else {
                    scratch.resize(kdim * len, T::zero());
                    im2col(
                        x_b, xs.spatial(), c_in, ws.spatial(), stride, pad,
                        os.spatial(), col0, len, scratch,
                    );
                    gemm_strided(
                        c_out, kdim, len,
                        MatRef::dense(w, kdim),
                        MatRef::dense(&scratch[..kdim * len], len),
                        MatMut::dense(&mut cbuf, len),
                        false,
                    );
                }
                (col0, len, cbuf)
            })
            .collect();
        let out_b = &mut out[b * c_out * v_out..(b + 1) * c_out * v_out];
        for (col0, len, cbuf) in chunks {
            for co in 0..c_out {
                out_b[co * v_out + col0..co * v_out + col0 + len]
                    .copy_from_slice(&cbuf[co * len..(co + 1) * len]);
            }
        }
    }
    Ok((out, os))
}

/// Gradient of conv w.r.t. the kernel: `dw[co, ci, d] = sum dy[co,o] * x[ci, o*s+d-p]`.
///
/// Chunks produce partial `dw` matrices in parallel; partials are summed in
/// chunk order.
pub fn conv_grad_kernel<T: Element>(
    dy: &[T],
    os: &Shape,
    x: &[T],
    xs: &Shape,
    ws: &Shape,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (batch, c_in, c_out) = (xs.batch(), xs.channels(), ws.batch());
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let kvol: usize = ws.spatial().iter().product();
    let kdim = c_in * kvol;
    let mut dw = vec![T::zero(); c_out * kdim];
    let pointwise = kvol == 1 && stride == 1 && pad == 0;
    let ranges = chunk_ranges(v_out, COL_CHUNK);

    for b in 0..batch {
        let x_b = &x[b * c_in * v_in..(b + 1) * c_in * v_in];
        let dy_b = &dy[b * c_out * v_out..(b + 1) * c_out * v_out];
        let partials: Vec<Vec<T>> = ranges
            .par_iter()
            .map_init(Vec::new, |scratch: &mut Vec<T>, &(col0, len)| {
                let mut part = vec![T::zero(); c_out * kdim];
                if pointwise {
                    gemm_strided(
                        c_out, len, kdim,
                        MatRef { buf: dy_b, offset: col0, ld: v_out, trans: false },
                        MatRef { buf: x_b, offset: col0, ld: v_in, trans: true },
                        MatMut::dense(&mut part, kdim),
                        false,
                    );
                } else {
                    scratch.resize(kdim * len, T::zero());
                    im2col(
                        x_b, xs.spatial(), c_in, ws.spatial(), stride, pad,
                        os.spatial(), col0, len, scratch,
                    );
                    gemm_strided(
                        c_out, len, kdim,
                        MatRef { buf: dy_b, offset: col0, ld: v_out, trans: false },
                        MatRef { buf: &scratch[..kdim * len], offset: 0, ld: len, trans: true },
                        MatMut::dense(&mut part, kdim),
                        false,
                    );
                }
                part
            })
            .collect();
        for part in partials {
            for (d, p) in dw.iter_mut().zip(&part) {
                *d += *p;
            }
        }
    }
    dw
}

/// Gradient of conv w.r.t. the input. Stride-1 uniform kernels reduce to a
/// convolution of `dy` with the flipped, channel-transposed kernel; other
/// cases fall back to a direct scatter (used only by small op-level tests).
pub fn conv_grad_input<T: Element>(
    dy: &[T],
    os: &Shape,
    w: &[T],
    ws: &Shape,
    xs: &Shape,
    stride: usize,
    pad: usize,
) -> Result<Vec<T>> {
    let uniform_k = ws.spatial().windows(2).all(|p| p[0] == p[1]);
    if stride == 1 && uniform_k {
        let k = ws.spatial()[0];
        let (c_out, c_in) = (ws.batch(), ws.channels());
        let kvol: usize = ws.spatial().iter().product();
        // wft[ci, co, d] = w[co, ci, flip(d)]
        let mut wft = vec![T::zero(); w.len()];
        for co in 0..c_out {
            for ci in 0..c_in {
                for d in 0..kvol {
                    wft[(ci * c_out + co) * kvol + (kvol - 1 - d)] = w[(co * c_in + ci) * kvol + d];
                }
            }
        }
        let wft_shape = Shape::act(c_in, c_out, ws.spatial());
        let (dx, dxs) = conv_fwd(dy, os, &wft, &wft_shape, 1, k - 1 - pad)?;
        debug_assert_eq!(dxs.dims, xs.dims);
        return Ok(dx);
    }

    // Direct scatter fallback.
    let (batch, c_in, c_out) = (xs.batch(), xs.channels(), ws.batch());
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let rank = xs.spatial_rank();
    let kvol: usize = ws.spatial().iter().product();
    let in_strides = spatial_strides(xs.spatial());
    let mut dx = vec![T::zero(); xs.numel()];
    let mut o = [0usize; 3];
    let mut d = [0usize; 3];
    for b in 0..batch {
        for co in 0..c_out {
            for ov in 0..v_out {
                decode(ov, os.spatial(), &mut o[..rank]);
                let g = dy[(b * c_out + co) * v_out + ov];
                for dk in 0..kvol {
                    decode(dk, ws.spatial(), &mut d[..rank]);
                    let mut base = 0usize;
                    let mut ok = true;
                    for ax in 0..rank {
                        let i = (o[ax] * stride + d[ax]) as isize - pad as isize;
                        if i < 0 || i >= xs.spatial()[ax] as isize {
                            ok = false;
                            break;
                        }
                        base += i as usize * in_strides[ax];
                    }
                    if !ok {
                        continue;
                    }
                    for ci in 0..c_in {
                        dx[(b * c_in + ci) * v_in + base] +=
                            g * w[(co * c_in + ci) * kvol + dk];
                    }
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// transposed convolution
// ---------------------------------------------------------------------------

/// Transposed convolution (adjoint of [`conv_fwd`] when `out_pad == 0`).
/// Kernel layout `[c_in, c_out, k...]`.
pub fn conv_transpose_fwd<T: Element>(
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<(Vec<T>, Shape)> {
    let os = conv_transpose_out_shape(xs, ws, stride, pad, out_pad)?;
    let (batch, c_in, c_out) = (xs.batch(), xs.channels(), ws.channels());
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let rank = xs.spatial_rank();
    let kvol: usize = ws.spatial().iter().product();
    let m = c_out * kvol;
    let out_strides = spatial_strides(os.spatial());
    let mut out = vec![T::zero(); os.numel()];
    let ranges = chunk_ranges(v_in, COL_CHUNK);

    for b in 0..batch {
        let x_b = &x[b * c_in * v_in..(b + 1) * c_in * v_in];
        // cols[(co*kvol + d), j] = sum_ci w[ci, co, d] * x[ci, col0 + j]
        let chunks: Vec<(usize, usize, Vec<T>)> = ranges
            .par_iter()
            .map(|&(col0, len)| {
                let mut cols = vec![T::zero(); m * len];
                gemm_strided(
                    m, c_in, len,
                    MatRef { buf: w, offset: 0, ld: m, trans: true },
                    MatRef { buf: x_b, offset: col0, ld: v_in, trans: false },
                    MatMut::dense(&mut cols, len),
                    false,
                );
                (col0, len, cols)
            })
            .collect();
        // scatter: out[co, i*s + d - p] += cols[(co,d), j], chunks in order;
        // parallel over c_out, each task owning one output channel slab
        let out_b = &mut out[b * c_out * v_out..(b + 1) * c_out * v_out];
        out_b.par_chunks_mut(v_out).enumerate().for_each(|(co, orow)| {
            let mut d = [0usize; 3];
            let mut i = [0usize; 3];
            for (col0, len, cols) in &chunks {
                for dk in 0..kvol {
                    decode(dk, ws.spatial(), &mut d[..rank]);
                    let crow = &cols[(co * kvol + dk) * len..(co * kvol + dk + 1) * len];
                    for (j, &v) in crow.iter().enumerate() {
                        decode(col0 + j, xs.spatial(), &mut i[..rank]);
                        let mut base = 0usize;
                        let mut ok = true;
                        for ax in 0..rank {
                            let o = (i[ax] * stride + d[ax]) as isize - pad as isize;
                            if o < 0 || o >= os.spatial()[ax] as isize {
                                ok = false;
                                break;
                            }
                            base += o as usize * out_strides[ax];
                        }
                        if ok {
                            orow[base] += v;
                        }
                    }
                }
            }
        });
    }
    Ok((out, os))
}

/// Gradient of conv_transpose w.r.t. its input: a strided convolution of `dy`
/// with the same kernel (layout already matches).
pub fn conv_transpose_grad_input<T: Element>(
    dy: &[T],
    os: &Shape,
    w: &[T],
    ws: &Shape,
    xs: &Shape,
    stride: usize,
    pad: usize,
) -> Result<Vec<T>> {
    let (dx, got) = conv_fwd(dy, os, w, ws, stride, pad)?;
    if got.dims != xs.dims {
        return Err(Error::shape(
            "conv_transpose",
            format!("adjoint produced {} for input {}", got, xs),
        ));
    }
    Ok(dx)
}

/// Gradient of conv_transpose w.r.t. the kernel:
/// `dw[ci, co, d] = sum x[ci, i] * dy[co, i*s + d - p]`.
pub fn conv_transpose_grad_kernel<T: Element>(
    dy: &[T],
    os: &Shape,
    x: &[T],
    xs: &Shape,
    ws: &Shape,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (batch, c_in, c_out) = (xs.batch(), xs.channels(), ws.channels());
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let kvol: usize = ws.spatial().iter().product();
    let kdim = c_out * kvol;
    let mut dw = vec![T::zero(); c_in * kdim];
    let ranges = chunk_ranges(v_in, COL_CHUNK);

    for b in 0..batch {
        let x_b = &x[b * c_in * v_in..(b + 1) * c_in * v_in];
        let dy_b = &dy[b * c_out * v_out..(b + 1) * c_out * v_out];
        let partials: Vec<Vec<T>> = ranges
            .par_iter()
            .map_init(Vec::new, |scratch: &mut Vec<T>, &(col0, len)| {
                // columns iterate the *input* grid; samples come from dy
                scratch.resize(kdim * len, T::zero());
                im2col(
                    dy_b, os.spatial(), c_out, ws.spatial(), stride, pad,
                    xs.spatial(), col0, len, scratch,
                );
                let mut part = vec![T::zero(); c_in * kdim];
                gemm_strided(
                    c_in, len, kdim,
                    MatRef { buf: x_b, offset: col0, ld: v_in, trans: false },
                    MatRef { buf: &scratch[..kdim * len], offset: 0, ld: len, trans: true },
                    MatMut::dense(&mut part, kdim),
                    false,
                );
                part
            })
            .collect();
        for part in partials {
            for (d, p) in dw.iter_mut().zip(&part) {
                *d += *p;
            }
        }
    }
    dw
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub fn avg_pool_out_shape(xs: &Shape, window: usize, stride: usize) -> Result<Shape> {
    let op = "avg_pool";
    if window == 0 || stride == 0 {
        return Err(Error::shape(op, "window and stride must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(xs.spatial_rank());
    for (ax, &n) in xs.spatial().iter().enumerate() {
        if window > n {
            return Err(Error::shape(
                op,
                format!("spatial axis {ax}: window {window} exceeds extent {n}"),
            ));
        }
        if n % stride != 0 {
            return Err(Error::shape(
                op,
                format!("spatial axis {ax}: extent {n} not divisible by stride {stride}"),
            ));
        }
        if (n - window) % stride != 0 {
            return Err(Error::shape(
                op,
                format!("spatial axis {ax}: extent {n} incompatible with window {window}, stride {stride}"),
            ));
        }
        out.push((n - window) / stride + 1);
    }
    Ok(Shape::act(xs.batch(), xs.channels(), &out))
}

fn window_offsets(in_spatial: &[usize], window: usize) -> Vec<usize> {
    let rank = in_spatial.len();
    let strides = spatial_strides(in_spatial);
    let wvol = window.pow(rank as u32);
    let wdims = vec![window; rank];
    let mut offs = Vec::with_capacity(wvol);
    let mut t = [0usize; 3];
    for wv in 0..wvol {
        decode(wv, &wdims, &mut t[..rank]);
        offs.push((0..rank).map(|ax| t[ax] * strides[ax]).sum());
    }
    offs
}

pub fn avg_pool_fwd<T: Element>(
    x: &[T],
    xs: &Shape,
    window: usize,
    stride: usize,
) -> Result<(Vec<T>, Shape)> {
    let os = avg_pool_out_shape(xs, window, stride)?;
    let rank = xs.spatial_rank();
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let in_strides = spatial_strides(xs.spatial());
    let offs = window_offsets(xs.spatial(), window);
    let inv = T::from_f64(1.0 / offs.len() as f64);
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(v_out).enumerate().for_each(|(row, orow)| {
        let xrow = &x[row * v_in..(row + 1) * v_in];
        let mut o = [0usize; 3];
        for (ov, dst) in orow.iter_mut().enumerate() {
            decode(ov, os.spatial(), &mut o[..rank]);
            let base: usize = (0..rank).map(|ax| o[ax] * stride * in_strides[ax]).sum();
            let mut acc = T::zero();
            for &off in &offs {
                acc += xrow[base + off];
            }
            *dst = acc * inv;
        }
    });
    Ok((out, os))
}

pub fn avg_pool_bwd<T: Element>(
    dy: &[T],
    os: &Shape,
    xs: &Shape,
    window: usize,
    stride: usize,
) -> Vec<T> {
    let rank = xs.spatial_rank();
    let (v_in, v_out) = (xs.spatial_len(), os.spatial_len());
    let in_strides = spatial_strides(xs.spatial());
    let offs = window_offsets(xs.spatial(), window);
    let inv = T::from_f64(1.0 / offs.len() as f64);
    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(v_in).enumerate().for_each(|(row, xrow)| {
        let dyrow = &dy[row * v_out..(row + 1) * v_out];
        let mut o = [0usize; 3];
        for (ov, &g) in dyrow.iter().enumerate() {
            decode(ov, os.spatial(), &mut o[..rank]);
            let base: usize = (0..rank).map(|ax| o[ax] * stride * in_strides[ax]).sum();
            let gi = g * inv;
            for &off in &offs {
                xrow[base + off] += gi;
            }
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

pub struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Train-mode batch norm over batch and spatial axes, per channel, with
/// biased variance. Returns everything the backward pass needs.
pub fn bn_train_fwd<T: Element>(
    x: &[T],
    xs: &Shape,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> BnForward<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let count = T::from_f64((batch * v) as f64);
    let stats: Vec<(T, T)> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut s = T::zero();
            for b in 0..batch {
                let row = &x[(b * ch + c) * v..(b * ch + c + 1) * v];
                for &xv in row {
                    s += xv;
                }
            }
            let mean = s / count;
            let mut q = T::zero();
            for b in 0..batch {
                let row = &x[(b * ch + c) * v..(b * ch + c + 1) * v];
                for &xv in row {
                    let d = xv - mean;
                    q += d * d;
                }
            }
            (mean, q / count)
        })
        .collect();
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let var: Vec<T> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> =
        var.iter().map(|&q| T::one() / (q + T::from_f64(eps)).sqrt()).collect();

    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    y.par_chunks_mut(v)
        .zip(xhat.par_chunks_mut(v))
        .enumerate()
        .for_each(|(row, (yrow, hrow))| {
            let c = row % ch;
            let xrow = &x[row * v..(row + 1) * v];
            let (m, is, sc, sh) = (mean[c], inv_std[c], scale[c], shift[c]);
            for i in 0..v {
                let h = (xrow[i] - m) * is;
                hrow[i] = h;
                yrow[i] = sc * h + sh;
            }
        });
    BnForward { y, xhat, mean, var, inv_std }
}

pub fn bn_eval_fwd<T: Element>(
    x: &[T],
    xs: &Shape,
    scale: &[T],
    shift: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Vec<T> {
    let (ch, v) = (xs.channels(), xs.spatial_len());
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(v).enumerate().for_each(|(row, yrow)| {
        let c = row % ch;
        let is = T::one() / (running_var[c] + T::from_f64(eps)).sqrt();
        let (m, sc, sh) = (running_mean[c], scale[c], shift[c]);
        let xrow = &x[row * v..(row + 1) * v];
        for i in 0..v {
            yrow[i] = sc * (xrow[i] - m) * is + sh;
        }
    });
    y
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dscale: Vec<T>,
    pub dshift: Vec<T>,
}

pub fn bn_bwd<T: Element>(
    dy: &[T],
    xs: &Shape,
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
) -> BnGrads<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let count = T::from_f64((batch * v) as f64);
    let sums: Vec<(T, T)> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for b in 0..batch {
                let base = (b * ch + c) * v;
                for i in 0..v {
                    let g = dy[base + i];
                    s1 += g;
                    s2 += g * xhat[base + i];
                }
            }
            (s1, s2)
        })
        .collect();
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(v).enumerate().for_each(|(row, xrow)| {
        let c = row % ch;
        let (s1, s2) = sums[c];
        let k = scale[c] * inv_std[c];
        let m1 = s1 / count;
        let m2 = s2 / count;
        let base = row * v;
        for i in 0..v {
            xrow[i] = k * (dy[base + i] - m1 - xhat[base + i] * m2);
        }
    });
    BnGrads {
        dx,
        dscale: sums.iter().map(|s| s.1).collect(),
        dshift: sums.iter().map(|s| s.0).collect(),
    }
}

// ---------------------------------------------------------------------------
// elementwise and channel ops
// ---------------------------------------------------------------------------

/// Add one bias value per channel.
pub fn bias_add_fwd<T: Element>(x: &[T], xs: &Shape, bias: &[T]) -> Vec<T> {
    let (ch, v) = (xs.channels(), xs.spatial_len());
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(v).enumerate().for_each(|(row, yrow)| {
        let b = bias[row % ch];
        let xrow = &x[row * v..(row + 1) * v];
        for i in 0..v {
            yrow[i] = xrow[i] + b;
        }
    });
    y
}

/// Per-channel sums of `dy` over batch and spatial axes.
pub fn bias_grad<T: Element>(dy: &[T], xs: &Shape) -> Vec<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut s = T::zero();
            for b in 0..batch {
                let base = (b * ch + c) * v;
                for i in 0..v {
                    s += dy[base + i];
                }
            }
            s
        })
        .collect()
}

pub fn relu_fwd<T: Element>(x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(crate::exec::REDUCE_CHUNK)
        .zip(x.par_chunks(crate::exec::REDUCE_CHUNK))
        .for_each(|(yc, xc)| {
            for (o, &v) in yc.iter_mut().zip(xc) {
                *o = v.max(T::zero());
            }
        });
    y
}

pub fn relu_bwd<T: Element>(dy: &[T], y: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(crate::exec::REDUCE_CHUNK)
        .enumerate()
        .for_each(|(ci, c)| {
            let base = ci * crate::exec::REDUCE_CHUNK;
            for (i, o) in c.iter_mut().enumerate() {
                if y[base + i] > T::zero() {
                    *o = dy[base + i];
                }
            }
        });
    dx
}

pub fn mul_mask<T: Element>(x: &[T], mask: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(crate::exec::REDUCE_CHUNK)
        .enumerate()
        .for_each(|(ci, c)| {
            let base = ci * crate::exec::REDUCE_CHUNK;
            for (i, o) in c.iter_mut().enumerate() {
                *o = x[base + i] * mask[base + i];
            }
        });
    y
}

pub fn concat_check(a: &Shape, b: &Shape) -> Result<Shape> {
    let op = "concat";
    if a.spatial_rank() != b.spatial_rank() {
        return Err(Error::shape(
            op,
            format!("spatial rank {} vs {}", a.spatial_rank(), b.spatial_rank()),
        ));
    }
    if a.batch() != b.batch() {
        return Err(Error::shape(op, format!("batch axis: {} vs {}", a.batch(), b.batch())));
    }
    for (ax, (&ea, &eb)) in a.spatial().iter().zip(b.spatial()).enumerate() {
        if ea != eb {
            return Err(Error::shape(op, format!("spatial axis {ax}: {ea} vs {eb}")));
        }
    }
    Ok(Shape::act(a.batch(), a.channels() + b.channels(), a.spatial()))
}

/// Channel concatenation: a's channels precede b's.
pub fn concat_fwd<T: Element>(a: &[T], ash: &Shape, b: &[T], bsh: &Shape) -> Result<(Vec<T>, Shape)> {
    let os = concat_check(ash, bsh)?;
    let v = ash.spatial_len();
    let (ca, cb) = (ash.channels(), bsh.channels());
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(v).enumerate().for_each(|(row, orow)| {
        let bt = row / (ca + cb);
        let c = row % (ca + cb);
        let src = if c < ca {
            &a[(bt * ca + c) * v..(bt * ca + c + 1) * v]
        } else {
            &b[(bt * cb + (c - ca)) * v..(bt * cb + (c - ca) + 1) * v]
        };
        orow.copy_from_slice(src);
    });
    Ok((out, os))
}

/// Split the gradient of a concat back into the two inputs.
pub fn concat_bwd<T: Element>(dy: &[T], ash: &Shape, bsh: &Shape) -> (Vec<T>, Vec<T>) {
    let v = ash.spatial_len();
    let (ca, cb) = (ash.channels(), bsh.channels());
    let mut da = vec![T::zero(); ash.numel()];
    let mut db = vec![T::zero(); bsh.numel()];
    da.par_chunks_mut(v).enumerate().for_each(|(row, drow)| {
        let bt = row / ca;
        let c = row % ca;
        drow.copy_from_slice(&dy[((bt * (ca + cb)) + c) * v..((bt * (ca + cb)) + c + 1) * v]);
    });
    db.par_chunks_mut(v).enumerate().for_each(|(row, drow)| {
        let bt = row / cb;
        let c = row % cb;
        drow.copy_from_slice(&dy[((bt * (ca + cb)) + ca + c) * v..((bt * (ca + cb)) + ca + c + 1) * v]);
    });
    (da, db)
}

/// Channel softmax with max subtraction, per voxel.
pub fn softmax_fwd<T: Element>(x: &[T], xs: &Shape) -> Vec<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        let xb = &x[b * ch * v..(b + 1) * ch * v];
        let yb = &mut y[b * ch * v..(b + 1) * ch * v];
        let mut mx = vec![T::zero(); v];
        mx.par_chunks_mut(1024).enumerate().for_each(|(ci, mc)| {
            let base = ci * 1024;
            for (i, m) in mc.iter_mut().enumerate() {
                let mut best = xb[base + i];
                for c in 1..ch {
                    best = best.max(xb[c * v + base + i]);
                }
                *m = best;
            }
        });
        yb.par_chunks_mut(v).enumerate().for_each(|(c, yrow)| {
            for i in 0..v {
                yrow[i] = (xb[c * v + i] - mx[i]).exp();
            }
        });
        let mut sum = vec![T::zero(); v];
        {
            let yb: &[T] = yb;
            sum.par_chunks_mut(1024).enumerate().for_each(|(ci, sc)| {
                let base = ci * 1024;
                for (i, s) in sc.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for c in 0..ch {
                        acc += yb[c * v + base + i];
                    }
                    *s = acc;
                }
            });
        }
        yb.par_chunks_mut(v).for_each(|yrow| {
            for i in 0..v {
                yrow[i] /= sum[i];
            }
        });
    }
    y
}

/// `da_c = y_c * (dy_c - sum_k dy_k * y_k)` per voxel.
pub fn softmax_bwd<T: Element>(dy: &[T], y: &[T], xs: &Shape) -> Vec<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        let yb = &y[b * ch * v..(b + 1) * ch * v];
        let dyb = &dy[b * ch * v..(b + 1) * ch * v];
        let dxb = &mut dx[b * ch * v..(b + 1) * ch * v];
        let mut dot = vec![T::zero(); v];
        dot.par_chunks_mut(1024).enumerate().for_each(|(ci, dc)| {
            let base = ci * 1024;
            for (i, d) in dc.iter_mut().enumerate() {
                let mut acc = T::zero();
                for c in 0..ch {
                    acc += dyb[c * v + base + i] * yb[c * v + base + i];
                }
                *d = acc;
            }
        });
        dxb.par_chunks_mut(v).enumerate().for_each(|(c, xrow)| {
            for i in 0..v {
                xrow[i] = yb[c * v + i] * (dyb[c * v + i] - dot[i]);
            }
        });
    }
    dx
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

pub struct DiceSaved<T> {
    /// Per class: (intersection, sum_pred + sum_truth).
    pub per_class: Vec<(T, T)>,
    pub smooth: T,
}

/// Soft dice loss averaged over classes:
/// `1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)` per class.
pub fn dice_fwd<T: Element>(p: &[T], g: &[T], xs: &Shape, smooth: f64) -> (T, DiceSaved<T>) {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let sm = T::from_f64(smooth);
    let per_class: Vec<(T, T)> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut inter = T::zero();
            let mut sums = T::zero();
            for b in 0..batch {
                let base = (b * ch + c) * v;
                for i in 0..v {
                    inter += p[base + i] * g[base + i];
                    sums += p[base + i] + g[base + i];
                }
            }
            (inter, sums)
        })
        .collect();
    let mut loss = T::zero();
    for &(inter, sums) in &per_class {
        loss += T::one() - (T::from_f64(2.0) * inter + sm) / (sums + sm);
    }
    loss /= T::from_f64(ch as f64);
    (loss, DiceSaved { per_class, smooth: sm })
}

pub fn dice_bwd<T: Element>(gout: T, saved: &DiceSaved<T>, g: &[T], xs: &Shape) -> Vec<T> {
    let (ch, v) = (xs.channels(), xs.spatial_len());
    let two = T::from_f64(2.0);
    let inv_c = T::one() / T::from_f64(ch as f64);
    let mut dp = vec![T::zero(); g.len()];
    dp.par_chunks_mut(v).enumerate().for_each(|(row, drow)| {
        let c = row % ch;
        let (inter, sums) = saved.per_class[c];
        let denom = sums + saved.smooth;
        let num = two * inter + saved.smooth;
        let base = row * v;
        for i in 0..v {
            // d/dp of (1 - num/denom) with num += 2g dp, denom += dp
            drow[i] = gout * inv_c * (num - two * g[base + i] * denom) / (denom * denom);
        }
    });
    dp
}

pub const CE_CLAMP: f64 = 1e-7;

/// Mean over voxels of `-sum_c w_c * g_c * ln(clamp(p_c))`.
pub fn cross_entropy_fwd<T: Element>(p: &[T], g: &[T], xs: &Shape, weights: &[T]) -> T {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let lo = T::from_f64(CE_CLAMP);
    let mut total = T::zero();
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * v;
            let row_sum = crate::exec::sum_zip(&p[base..base + v], &g[base..base + v], |pv, gv| {
                if gv == T::zero() {
                    T::zero()
                } else {
                    gv * pv.max(lo).min(T::one()).ln()
                }
            });
            total += weights[c] * row_sum;
        }
    }
    -total / T::from_f64((batch * v) as f64)
}

pub fn cross_entropy_bwd<T: Element>(gout: T, p: &[T], g: &[T], xs: &Shape, weights: &[T]) -> Vec<T> {
    let (batch, ch, v) = (xs.batch(), xs.channels(), xs.spatial_len());
    let lo = T::from_f64(CE_CLAMP);
    let scale = gout / T::from_f64((batch * v) as f64);
    let mut dp = vec![T::zero(); p.len()];
    dp.par_chunks_mut(v).enumerate().for_each(|(row, drow)| {
        let c = row % ch;
        let w = weights[c];
        let base = row * v;
        for i in 0..v {
            let pv = p[base + i];
            // clamped regions have zero derivative
            if g[base + i] != T::zero() && pv > lo && pv <= T::one() {
                drow[i] = -scale * w * g[base + i] / pv;
            }
        }
    });
    dp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(v: Vec<f64>, sp: &[usize]) -> (Vec<f64>, Shape) {
        let s = Shape::act(1, 1, sp);
        assert_eq!(s.numel(), v.len());
        (v, s)
    }

    #[test]
    fn conv1d_hand_example() {
        // input [1,2,3], kernel [1,0,-1], stride 1, padding 1 -> [-2,-2,2]
        let (x, xs) = t3(vec![1.0, 2.0, 3.0], &[3]);
        let w = vec![1.0, 0.0, -1.0];
        let ws = Shape::act(1, 1, &[3]);
        let (y, os) = conv_fwd(&x, &xs, &w, &ws, 1, 1).unwrap();
        assert_eq!(os.spatial(), &[3]);
        assert_eq!(y, vec![-2.0, -2.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let (x, xs) = t3((0..27).map(|i| i as f64).collect(), &[3, 3, 3]);
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // center of a 3x3x3 kernel
        let ws = Shape::act(1, 1, &[3, 3, 3]);
        let (y, _) = conv_fwd(&x, &xs, &w, &ws, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let xs = Shape::act(1, 2, &[4]);
        let ws = Shape::act(1, 3, &[1]);
        let err = conv_out_shape(&xs, &ws, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
    }

    #[test]
    fn conv_transpose_single_placement() {
        // input [5] (length 1), kernel [1,2,3], stride 2, padding 0 -> [5,10,15]
        let (x, xs) = t3(vec![5.0], &[1]);
        let w = vec![1.0, 2.0, 3.0];
        let ws = Shape::act(1, 1, &[3]);
        let (y, os) = conv_transpose_fwd(&x, &xs, &w, &ws, 2, 0, 0).unwrap();
        assert_eq!(os.spatial(), &[3]);
        assert_eq!(y, vec![5.0, 10.0, 15.0]);
    }

    #[test]
    fn conv_transpose_identity() {
        let (x, xs) = t3(vec![1.0, -2.0, 0.5, 4.0], &[4]);
        let w = vec![1.0];
        let ws = Shape::act(1, 1, &[1]);
        let (y, _) = conv_transpose_fwd(&x, &xs, &w, &ws, 1, 0, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_transpose_doubles_extent_with_tu_rule() {
        // extent 8, kernel 3, stride 2, padding 1 + output padding 1 -> 16
        let xs = Shape::act(1, 1, &[8]);
        let ws = Shape::act(1, 1, &[3]);
        let os = conv_transpose_out_shape(&xs, &ws, 2, 1, 1).unwrap();
        assert_eq!(os.spatial(), &[16]);
    }

    #[test]
    fn adjoint_identity_conv_vs_transpose() {
        // <conv(x,k), y> == <x, conv_transpose(y,k)> for random data.
        // Extents chosen so the conv drops no trailing columns and the
        // adjoint maps back to the exact input shape.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (stride, pad, sp) in [(1usize, 1usize, [5usize, 6]), (1, 0, [5, 6]), (2, 1, [5, 7])] {
            let xs = Shape::act(2, 3, &sp);
            let ws = Shape::act(4, 3, &[3, 3]);
            let x: Vec<f64> = (0..xs.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..ws.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (cx, os) = conv_fwd(&x, &xs, &w, &ws, stride, pad).unwrap();
            let y: Vec<f64> = (0..os.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (ty, ts) = conv_transpose_fwd(&y, &os, &w, &ws, stride, pad, 0).unwrap();
            assert_eq!(ts.dims, xs.dims);
            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-6, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn avg_pool_means() {
        let (x, xs) = t3(vec![1.0, 3.0, 5.0, 7.0], &[4]);
        let (y, os) = avg_pool_fwd(&x, &xs, 2, 2).unwrap();
        assert_eq!(os.spatial(), &[2]);
        assert_eq!(y, vec![2.0, 6.0]);
    }

    #[test]
    fn avg_pool_rejects_indivisible_extent() {
        let xs = Shape::act(1, 1, &[5]);
        let err = avg_pool_out_shape(&xs, 2, 2).unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let xs = Shape::act(1, 3, &[4]);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let y = softmax_fwd(&x, &xs);
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| y[c * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        let y2 = softmax_fwd(&shifted, &xs);
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // logits (0, ln 3) -> (0.25, 0.75)
        let xs = Shape::act(1, 2, &[1]);
        let y = softmax_fwd(&[0.0, 3.0f64.ln()], &xs);
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let ash = Shape::act(2, 2, &[3]);
        let bsh = Shape::act(2, 1, &[3]);
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b: Vec<f64> = (100..106).map(|i| i as f64).collect();
        let (y, os) = concat_fwd(&a, &ash, &b, &bsh).unwrap();
        assert_eq!(os.channels(), 3);
        let (ra, rb) = concat_bwd(&y, &ash, &bsh);
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let ash = Shape::act(1, 1, &[3]);
        let bsh = Shape::act(1, 1, &[4]);
        let err = concat_check(&ash, &bsh).unwrap_err();
        assert!(err.to_string().contains("spatial axis 0"), "{err}");
    }

    #[test]
    fn dice_exact_values() {
        // |P|=|G|=4, |P∩G|=2 -> 0.5 without smoothing
        let xs = Shape::act(1, 1, &[8]);
        let p = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let g = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let (loss, _) = dice_fwd(&p, &g, &xs, 0.0);
        assert!((loss - 0.5f64).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_prediction() {
        // uniform over C=3 -> ln 3
        let xs = Shape::act(1, 3, &[2]);
        let p = vec![1.0f64 / 3.0; 6];
        let g = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let w = vec![1.0; 3];
        let loss = cross_entropy_fwd(&p, &g, &xs, &w);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }
}
