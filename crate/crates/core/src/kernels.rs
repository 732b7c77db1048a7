//! Numeric kernels shared by the eager API and the differentiation tape.
//!
//! All multi-channel buffers are planar with `x` fastest:
//! `index = ((c * nz + k) * ny + j) * nx + i`. Reductions accumulate in f64.

use rayon::prelude::*;

use crate::volume::Dims;

/// Coordinates within this many voxels of a grid node are snapped onto it,
/// so f32-rounded identity coordinates interpolate exactly.
const SNAP_VOXELS: f64 = 1e-4;

#[inline]
pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub(crate) fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (k * dims[1] + j) * dims[0] + i
}

/// Interpolation support of a normalized coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisWeights {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
    /// d(continuous index)/d(normalized coordinate); zero when clamped.
    pub dscale: f64,
}

#[inline]
pub(crate) fn axis_weights(p: f64, n: usize) -> AxisWeights {
    if n < 2 {
        return AxisWeights { i0: 0, i1: 0, t: 0.0, dscale: 0.0 };
    }
    let last = (n - 1) as f64;
    let mut u = p * last;
    let clamped = !(0.0..=1.0).contains(&p);
    u = u.clamp(0.0, last);
    let r = u.round();
    if (u - r).abs() < SNAP_VOXELS {
        u = r;
    }
    let i0 = (u.floor() as usize).min(n - 2);
    AxisWeights { i0, i1: i0 + 1, t: u - i0 as f64, dscale: if clamped { 0.0 } else { last } }
}

/// Trilinear value of one channel plane at the given axis supports.
#[inline]
pub(crate) fn interp(plane: &[f32], dims: Dims, w: &[AxisWeights; 3]) -> f64 {
    let [wx, wy, wz] = w;
    let at = |i: usize, j: usize, k: usize| plane[linear_index(dims, i, j, k)] as f64;
    let lerp = |a: f64, b: f64, t: f64| (1.0 - t) * a + t * b;
    let c00 = lerp(at(wx.i0, wy.i0, wz.i0), at(wx.i1, wy.i0, wz.i0), wx.t);
    let c10 = lerp(at(wx.i0, wy.i1, wz.i0), at(wx.i1, wy.i1, wz.i0), wx.t);
    let c01 = lerp(at(wx.i0, wy.i0, wz.i1), at(wx.i1, wy.i0, wz.i1), wx.t);
    let c11 = lerp(at(wx.i0, wy.i1, wz.i1), at(wx.i1, wy.i1, wz.i1), wx.t);
    lerp(lerp(c00, c10, wy.t), lerp(c01, c11, wy.t), wz.t)
}

/// Gradient of [`interp`] with respect to the normalized coordinate.
#[inline]
fn interp_grad(plane: &[f32], dims: Dims, w: &[AxisWeights; 3]) -> [f64; 3] {
    let [wx, wy, wz] = w;
    let at = |i: usize, j: usize, k: usize| plane[linear_index(dims, i, j, k)] as f64;
    let mut g = [0.0; 3];
    let xs = [(wx.i0, 1.0 - wx.t), (wx.i1, wx.t)];
    let ys = [(wy.i0, 1.0 - wy.t), (wy.i1, wy.t)];
    let zs = [(wz.i0, 1.0 - wz.t), (wz.i1, wz.t)];
    if wx.dscale != 0.0 {
        let mut s = 0.0;
        for &(j, ay) in &ys {
            for &(k, az) in &zs {
                s += ay * az * (at(wx.i1, j, k) - at(wx.i0, j, k));
            }
        }
        g[0] = s * wx.dscale;
    }
    if wy.dscale != 0.0 {
        let mut s = 0.0;
        for &(i, ax) in &xs {
            for &(k, az) in &zs {
                s += ax * az * (at(i, wy.i1, k) - at(i, wy.i0, k));
            }
        }
        g[1] = s * wy.dscale;
    }
    if wz.dscale != 0.0 {
        let mut s = 0.0;
        for &(i, ax) in &xs {
            for &(j, ay) in &ys {
                s += ax * ay * (at(i, j, wz.i1) - at(i, j, wz.i0));
            }
        }
        g[2] = s * wz.dscale;
    }
    g
}

#[inline]
fn support(dims: Dims, p: [f64; 3]) -> [AxisWeights; 3] {
    [axis_weights(p[0], dims[0]), axis_weights(p[1], dims[1]), axis_weights(p[2], dims[2])]
}

/// Trilinear sample of a single plane at a normalized coordinate.
pub(crate) fn sample_point(plane: &[f32], dims: Dims, p: [f64; 3]) -> f64 {
    interp(plane, dims, &support(dims, p))
}

#[inline]
fn map_coord(map: &[f32], n: usize, v: usize) -> [f64; 3] {
    [map[v] as f64, map[n + v] as f64, map[2 * n + v] as f64]
}

/// Samples every channel of `field` at the coordinates held by a 3-channel
/// `map`. The result lives on the map's grid.
pub(crate) fn sample_field(field: &[f32], channels: usize, fdims: Dims, map: &[f32], mdims: Dims) -> Vec<f32> {
    let nf = voxel_count(fdims);
    let nm = voxel_count(mdims);
    let mut out = vec![0.0f32; channels * nm];
    for v in 0..nm {
        let w = support(fdims, map_coord(map, nm, v));
        for c in 0..channels {
            out[c * nm + v] = interp(&field[c * nf..(c + 1) * nf], fdims, &w) as f32;
        }
    }
    out
}

/// Vector-Jacobian products of [`sample_field`].
pub(crate) fn sample_field_backward(
    field: &[f32],
    channels: usize,
    fdims: Dims,
    map: &[f32],
    mdims: Dims,
    grad_out: &[f32],
    want_field: bool,
    want_map: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let nf = voxel_count(fdims);
    let nm = voxel_count(mdims);
    let mut gfield = want_field.then(|| vec![0.0f64; channels * nf]);
    let mut gmap = want_map.then(|| vec![0.0f32; 3 * nm]);
    for v in 0..nm {
        let w = support(fdims, map_coord(map, nm, v));
        if let Some(gf) = gfield.as_mut() {
            let [wx, wy, wz] = &w;
            for c in 0..channels {
                let g = grad_out[c * nm + v] as f64;
                if g == 0.0 {
                    continue;
                }
                let plane = &mut gf[c * nf..(c + 1) * nf];
                for &(k, az) in &[(wz.i0, 1.0 - wz.t), (wz.i1, wz.t)] {
                    for &(j, ay) in &[(wy.i0, 1.0 - wy.t), (wy.i1, wy.t)] {
                        for &(i, ax) in &[(wx.i0, 1.0 - wx.t), (wx.i1, wx.t)] {
                            plane[linear_index(fdims, i, j, k)] += g * ax * ay * az;
                        }
                    }
                }
            }
        }
        if let Some(gm) = gmap.as_mut() {
            let mut acc = [0.0f64; 3];
            for c in 0..channels {
                let g = grad_out[c * nm + v] as f64;
                if g == 0.0 {
                    continue;
                }
                let d = interp_grad(&field[c * nf..(c + 1) * nf], fdims, &w);
                for a in 0..3 {
                    acc[a] += g * d[a];
                }
            }
            for a in 0..3 {
                gm[a * nm + v] = acc[a] as f32;
            }
        }
    }
    (gfield.map(|g| g.into_iter().map(|x| x as f32).collect()), gmap)
}

/// One output tap of a separable 1D linear operator.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Linear interpolation from `n_in` to `n_out` nodes under the `i/(n-1)`
/// convention. Positions are computed in integer arithmetic so shared nodes
/// are reproduced exactly.
pub(crate) fn resample_plan(n_in: usize, n_out: usize) -> Vec<Tap> {
    if n_in == 1 || n_out == 1 {
        return vec![Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 }; n_out];
    }
    let den = n_out - 1;
    (0..n_out)
        .map(|i| {
            let q = i * (n_in - 1);
            let mut i0 = q / den;
            let mut t = (q % den) as f64 / den as f64;
            if i0 == n_in - 1 {
                i0 = n_in - 2;
                t = 1.0;
            }
            Tap { i0, i1: i0 + 1, w0: 1.0 - t, w1: t }
        })
        .collect()
}

/// 2x average pooling with floor; a singleton axis is passed through.
pub(crate) fn pool_plan(n_in: usize) -> Vec<Tap> {
    if n_in == 1 {
        return vec![Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 }];
    }
    (0..n_in / 2).map(|i| Tap { i0: 2 * i, i1: 2 * i + 1, w0: 0.5, w1: 0.5 }).collect()
}

pub(crate) fn pooled_dims(dims: Dims) -> Dims {
    dims.map(|n| if n == 1 { 1 } else { n / 2 })
}

fn axis_layout(channels: usize, dims: Dims, axis: usize) -> (usize, usize, usize) {
    let inner: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product::<usize>() * channels;
    (inner, dims[axis], outer)
}

fn apply_axis(src: &[f64], channels: usize, dims: Dims, axis: usize, plan: &[Tap]) -> Vec<f64> {
    let (inner, n, outer) = axis_layout(channels, dims, axis);
    let n_out = plan.len();
    let mut dst = vec![0.0f64; outer * n_out * inner];
    for o in 0..outer {
        for (a, tap) in plan.iter().enumerate() {
            let d = &mut dst[(o * n_out + a) * inner..(o * n_out + a + 1) * inner];
            let s0 = &src[(o * n + tap.i0) * inner..(o * n + tap.i0 + 1) * inner];
            let s1 = &src[(o * n + tap.i1) * inner..(o * n + tap.i1 + 1) * inner];
            for r in 0..inner {
                d[r] = tap.w0 * s0[r] + tap.w1 * s1[r];
            }
        }
    }
    dst
}

fn apply_axis_adjoint(grad: &[f64], channels: usize, dims_in: Dims, axis: usize, plan: &[Tap]) -> Vec<f64> {
    let (inner, n, outer) = axis_layout(channels, dims_in, axis);
    let n_out = plan.len();
    let mut dst = vec![0.0f64; outer * n * inner];
    for o in 0..outer {
        for (a, tap) in plan.iter().enumerate() {
            let g = &grad[(o * n_out + a) * inner..(o * n_out + a + 1) * inner];
            for r in 0..inner {
                dst[(o * n + tap.i0) * inner + r] += tap.w0 * g[r];
                dst[(o * n + tap.i1) * inner + r] += tap.w1 * g[r];
            }
        }
    }
    dst
}

fn separable(src: &[f32], channels: usize, dims: Dims, plans: &[Vec<Tap>; 3]) -> Vec<f32> {
    let mut buf: Vec<f64> = src.iter().map(|&x| x as f64).collect();
    let mut cur = dims;
    for axis in 0..3 {
        buf = apply_axis(&buf, channels, cur, axis, &plans[axis]);
        cur[axis] = plans[axis].len();
    }
    buf.into_iter().map(|x| x as f32).collect()
}

fn separable_adjoint(grad: &[f32], channels: usize, dims_in: Dims, plans: &[Vec<Tap>; 3]) -> Vec<f32> {
    let mut shapes = [dims_in; 4];
    for axis in 0..3 {
        shapes[axis + 1] = shapes[axis];
        shapes[axis + 1][axis] = plans[axis].len();
    }
    let mut buf: Vec<f64> = grad.iter().map(|&x| x as f64).collect();
    for axis in (0..3).rev() {
        buf = apply_axis_adjoint(&buf, channels, shapes[axis], axis, &plans[axis]);
    }
    buf.into_iter().map(|x| x as f32).collect()
}

fn resample_plans(dims_in: Dims, dims_out: Dims) -> [Vec<Tap>; 3] {
    [
        resample_plan(dims_in[0], dims_out[0]),
        resample_plan(dims_in[1], dims_out[1]),
        resample_plan(dims_in[2], dims_out[2]),
    ]
}

pub(crate) fn resample(src: &[f32], channels: usize, dims_in: Dims, dims_out: Dims) -> Vec<f32> {
    separable(src, channels, dims_in, &resample_plans(dims_in, dims_out))
}

pub(crate) fn resample_adjoint(grad: &[f32], channels: usize, dims_in: Dims, dims_out: Dims) -> Vec<f32> {
    separable_adjoint(grad, channels, dims_in, &resample_plans(dims_in, dims_out))
}

pub(crate) fn avg_pool(src: &[f32], channels: usize, dims: Dims) -> Vec<f32> {
    separable(src, channels, dims, &dims.map(pool_plan))
}

pub(crate) fn avg_pool_adjoint(grad: &[f32], channels: usize, dims_in: Dims) -> Vec<f32> {
    separable_adjoint(grad, channels, dims_in, &dims_in.map(pool_plan))
}

/// Valid output range along one axis for a kernel offset `d` in {-1,0,1}:
/// output positions `o` with `o + d` inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> std::ops::Range<usize> {
    match d {
        -1 => 1.min(n)..n,
        0 => 0..n,
        _ => 0..n.saturating_sub(1),
    }
}

#[inline]
fn axpy_shifted(out: &mut [f32], src: &[f32], w: f32, dx: isize) {
    let n = out.len();
    match dx {
        -1 if n > 1 => {
            for (o, s) in out[1..].iter_mut().zip(&src[..n - 1]) {
                *o += w * s;
            }
        }
        0 => {
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        1 if n > 1 => {
            for (o, s) in out[..n - 1].iter_mut().zip(&src[1..]) {
                *o += w * s;
            }
        }
        _ => {}
    }
}

const OFFSETS: [isize; 3] = [-1, 0, 1];

/// Columns per im2col slab are limited to keep the buffer near this many
/// floats.
const SLAB_FLOATS: usize = 1 << 20;

/// Whole z-planes per slab for a layer with `c_in` input channels.
fn slab_planes(c_in: usize, dims: Dims) -> usize {
    let plane = dims[0] * dims[1];
    (SLAB_FLOATS / (c_in * 27 * plane).max(1)).clamp(1, dims[2].max(1))
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread buffer of at least `len` floats whose
/// contents are unspecified.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f32]) -> T) -> T {
    SCRATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut buf) => {
            if buf.len() < len {
                buf.resize(len, 0.0);
            }
            f(&mut buf[..len])
        }
        // re-entered through rayon work stealing
        Err(_) => f(&mut vec![0.0; len]),
    })
}

/// Fills `col` (`[c_in*27][planes*nx*ny]`, `c_in` implied by its length) with the zero-padded 3x3x3
/// neighbourhoods of output planes `z0..z0+planes`.
fn im2col(input: &[f32], dims: Dims, z0: usize, planes: usize, col: &mut [f32]) {
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let plane = nx * ny;
    let cols = planes * plane;
    col.par_chunks_mut(cols).enumerate().for_each(|(row, dst)| {
        let (ci, tap) = (row / 27, row % 27);
        let (dz, dy, dx) = (OFFSETS[tap / 9], OFFSETS[(tap / 3) % 3], OFFSETS[tap % 3]);
        let src = &input[ci * n..(ci + 1) * n];
        for (p, dst_plane) in dst.chunks_mut(plane).enumerate() {
            let zs = (z0 + p) as isize + dz;
            if zs < 0 || zs >= nz as isize {
                dst_plane.fill(0.0);
                continue;
            }
            let src_plane = &src[zs as usize * plane..(zs as usize + 1) * plane];
            for (y, d) in dst_plane.chunks_mut(nx).enumerate() {
                let ys = y as isize + dy;
                if ys < 0 || ys >= ny as isize {
                    d.fill(0.0);
                    continue;
                }
                let s = &src_plane[ys as usize * nx..(ys as usize + 1) * nx];
                match dx {
                    -1 => {
                        d[0] = 0.0;
                        d[1..].copy_from_slice(&s[..nx - 1]);
                    }
                    0 => d.copy_from_slice(s),
                    _ => {
                        d[..nx - 1].copy_from_slice(&s[1..]);
                        d[nx - 1] = 0.0;
                    }
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters `col` back onto `grad_in`.
fn col2im(col: &[f32], dims: Dims, z0: usize, planes: usize, grad_in: &mut [f32]) {
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let plane = nx * ny;
    let cols = planes * plane;
    grad_in.par_chunks_mut(n).enumerate().for_each(|(ci, dst)| {
        for tap in 0..27 {
            let (dz, dy, dx) = (OFFSETS[tap / 9], OFFSETS[(tap / 3) % 3], OFFSETS[tap % 3]);
            let src = &col[(ci * 27 + tap) * cols..(ci * 27 + tap + 1) * cols];
            for p in 0..planes {
                let zs = (z0 + p) as isize + dz;
                if zs < 0 || zs >= nz as isize {
                    continue;
                }
                let dst_plane = &mut dst[zs as usize * plane..(zs as usize + 1) * plane];
                for y in valid_range(ny, dy) {
                    let ys = (y as isize + dy) as usize;
                    let g = &src[p * plane + y * nx..p * plane + (y + 1) * nx];
                    axpy_shifted(&mut dst_plane[ys * nx..(ys + 1) * nx], g, 1.0, -dx);
                }
            }
        }
    });
}

/// `c = a * b + beta * c` for row-major operands given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    assert!(b.len() >= k.saturating_sub(1) * rsb + (n - 1) * csb + usize::from(k > 0));
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// 3x3x3 convolution, stride 1, zero "same" padding.
/// `weight` is `[c_out][c_in][kz][ky][kx]`.
pub(crate) fn conv3d(input: &[f32], c_in: usize, dims: Dims, weight: &[f32], bias: &[f32], c_out: usize) -> Vec<f32> {
    let n = voxel_count(dims);
    let plane = dims[0] * dims[1];
    let k = c_in * 27;
    let mut out = vec![0.0f32; c_out * n];
    for (co, o) in out.chunks_mut(n.max(1)).enumerate() {
        o.fill(bias[co]);
    }
    let step = slab_planes(c_in, dims);
    with_scratch(k * step * plane, |col| {
        for z0 in (0..dims[2]).step_by(step) {
            let planes = step.min(dims[2] - z0);
            let cols = planes * plane;
            im2col(input, dims, z0, planes, &mut col[..k * cols]);
            gemm(c_out, k, cols, weight, (k, 1), &col[..k * cols], (cols, 1), 1.0, &mut out[z0 * plane..], (n, 1));
        }
    });
    out
}

/// Gradient of [`conv3d`] with respect to its input.
pub(crate) fn conv3d_backward_input(
    grad_out: &[f32],
    c_out: usize,
    dims: Dims,
    weight: &[f32],
    c_in: usize,
) -> Vec<f32> {
    let n = voxel_count(dims);
    let plane = dims[0] * dims[1];
    let k = c_in * 27;
    let mut gin = vec![0.0f32; c_in * n];
    let step = slab_planes(c_in, dims);
    with_scratch(k * step * plane, |col| {
        for z0 in (0..dims[2]).step_by(step) {
            let planes = step.min(dims[2] - z0);
            let cols = planes * plane;
            gemm(k, c_out, cols, weight, (1, k), &grad_out[z0 * plane..], (n, 1), 0.0, &mut col[..k * cols], (cols, 1));
            col2im(&col[..k * cols], dims, z0, planes, &mut gin);
        }
    });
    gin
}

/// Gradients of [`conv3d`] with respect to weight and bias.
pub(crate) fn conv3d_backward_params(
    grad_out: &[f32],
    c_out: usize,
    dims: Dims,
    input: &[f32],
    c_in: usize,
) -> (Vec<f32>, Vec<f32>) {
    let n = voxel_count(dims);
    let plane = dims[0] * dims[1];
    let k = c_in * 27;
    let mut gw = vec![0.0f32; c_out * k];
    let step = slab_planes(c_in, dims);
    with_scratch(k * step * plane, |col| {
        for z0 in (0..dims[2]).step_by(step) {
            let planes = step.min(dims[2] - z0);
            let cols = planes * plane;
            im2col(input, dims, z0, planes, &mut col[..k * cols]);
            gemm(c_out, cols, k, &grad_out[z0 * plane..], (n, 1), &col[..k * cols], (1, cols), 1.0, &mut gw, (k, 1));
        }
    });
    let gb =
        (0..c_out).map(|co| grad_out[co * n..(co + 1) * n].iter().map(|&x| x as f64).sum::<f64>() as f32).collect();
    (gw, gb)
}

/// Sum over the clipped box `[i-r, i+r]` along one axis.
fn box_sum_axis(src: &[f64], dims: Dims, axis: usize, r: usize) -> Vec<f64> {
    let (inner, n, outer) = axis_layout(1, dims, axis);
    let mut dst = vec![0.0f64; src.len()];
    let mut prefix = vec![0.0f64; n + 1];
    for o in 0..outer {
        for ri in 0..inner {
            let at = |a: usize| (o * n + a) * inner + ri;
            for a in 0..n {
                prefix[a + 1] = prefix[a] + src[at(a)];
            }
            for a in 0..n {
                let lo = a.saturating_sub(r);
                let hi = (a + r + 1).min(n);
                dst[at(a)] = prefix[hi] - prefix[lo];
            }
        }
    }
    dst
}

pub(crate) fn box_sum(src: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let a = box_sum_axis(src, dims, 0, r);
    let b = box_sum_axis(&a, dims, 1, r);
    box_sum_axis(&b, dims, 2, r)
}

fn window_counts(dims: Dims, r: usize) -> [Vec<f64>; 3] {
    dims.map(|n| (0..n).map(|a| ((a + r + 1).min(n) - a.saturating_sub(r)) as f64).collect())
}

struct WindowStats {
    sa: Vec<f64>,
    sb: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
    counts: [Vec<f64>; 3],
}

fn window_stats(a: &[f32], b: &[f32], dims: Dims, r: usize) -> WindowStats {
    let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    let aa: Vec<f64> = af.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bf.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();
    WindowStats {
        sa: box_sum(&af, dims, r),
        sb: box_sum(&bf, dims, r),
        saa: box_sum(&aa, dims, r),
        sbb: box_sum(&bb, dims, r),
        sab: box_sum(&ab, dims, r),
        counts: window_counts(dims, r),
    }
}

/// Per-window correlation terms and their partial derivatives with respect
/// to the five window sums.
#[derive(Default)]
struct WindowNcc {
    ncc: f64,
    d_sa: f64,
    d_sb: f64,
    d_saa: f64,
    d_sbb: f64,
    d_sab: f64,
}

#[inline]
fn window_ncc(s: &WindowStats, v: usize, n: f64, eps: f64, with_grad: bool) -> WindowNcc {
    let mu_a = s.sa[v] / n;
    let mu_b = s.sb[v] / n;
    let var_a = s.saa[v] / n - mu_a * mu_a;
    let var_b = s.sbb[v] / n - mu_b * mu_b;
    if var_a < eps && var_b < eps {
        return WindowNcc::default();
    }
    let cov = s.sab[v] / n - mu_a * mu_b;
    let va = var_a + eps;
    let vb = var_b + eps;
    let r = 1.0 / (va * vb).sqrt();
    let ncc = cov * r;
    if !with_grad {
        return WindowNcc { ncc, ..Default::default() };
    }
    let d_cov = r;
    let d_va = -0.5 * ncc / va;
    let d_vb = -0.5 * ncc / vb;
    WindowNcc {
        ncc,
        d_sab: d_cov / n,
        d_saa: d_va / n,
        d_sbb: d_vb / n,
        d_sa: (-d_cov * mu_b - 2.0 * d_va * mu_a) / n,
        d_sb: (-d_cov * mu_a - 2.0 * d_vb * mu_b) / n,
    }
}

/// `1 - mean(windowed NCC)` over a clipped box window of radius `r`.
pub(crate) fn lncc_loss(a: &[f32], b: &[f32], dims: Dims, r: usize, eps: f64) -> f64 {
    let s = window_stats(a, b, dims, r);
    let mut total = 0.0f64;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let n = s.counts[0][i] * s.counts[1][j] * s.counts[2][k];
                total += window_ncc(&s, linear_index(dims, i, j, k), n, eps, false).ncc;
            }
        }
    }
    1.0 - total / voxel_count(dims) as f64
}

/// Gradients of [`lncc_loss`] with respect to `a` and `b`, scaled by `seed`.
pub(crate) fn lncc_backward(a: &[f32], b: &[f32], dims: Dims, r: usize, eps: f64, seed: f64) -> (Vec<f32>, Vec<f32>) {
    let s = window_stats(a, b, dims, r);
    let nv = voxel_count(dims);
    let scale = -seed / nv as f64;
    let mut g = [vec![0.0; nv], vec![0.0; nv], vec![0.0; nv], vec![0.0; nv], vec![0.0; nv]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let v = linear_index(dims, i, j, k);
                let n = s.counts[0][i] * s.counts[1][j] * s.counts[2][k];
                let w = window_ncc(&s, v, n, eps, true);
                g[0][v] = scale * w.d_sa;
                g[1][v] = scale * w.d_sb;
                g[2][v] = scale * w.d_saa;
                g[3][v] = scale * w.d_sbb;
                g[4][v] = scale * w.d_sab;
            }
        }
    }
    // The clipped-box relation is symmetric, so the adjoint of a box sum is
    // the same box sum.
    let [ga, gb, gaa, gbb, gab] = g.map(|x| box_sum(&x, dims, r));
    let mut out_a = vec![0.0f32; nv];
    let mut out_b = vec![0.0f32; nv];
    for v in 0..nv {
        let (av, bv) = (a[v] as f64, b[v] as f64);
        out_a[v] = (ga[v] + 2.0 * av * gaa[v] + bv * gab[v]) as f32;
        out_b[v] = (gb[v] + 2.0 * bv * gbb[v] + av * gab[v]) as f32;
    }
    (out_a, out_b)
}

/// Mean over interior nodes of `||J - I||_F^2`, with `J` taken by forward
/// differences of a 3-channel map in normalized units.
pub(crate) fn jacobian_penalty(map: &[f32], dims: Dims) -> f64 {
    let n = voxel_count(dims);
    let steps = dims.map(|d| (d - 1) as f64);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let v = linear_index(dims, i, j, k);
                for c in 0..3 {
                    let base = map[c * n + v] as f64;
                    for d in 0..3 {
                        let fwd = map[c * n + v + strides[d]] as f64;
                        let jac = (fwd - base) * steps[d];
                        let e = jac - if c == d { 1.0 } else { 0.0 };
                        total += e * e;
                    }
                }
                count += 1;
            }
        }
    }
    total / count as f64
}

pub(crate) fn jacobian_penalty_backward(map: &[f32], dims: Dims, seed: f64) -> Vec<f32> {
    let n = voxel_count(dims);
    let steps = dims.map(|d| (d - 1) as f64);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let count = (dims[0] - 2) * (dims[1] - 2) * (dims[2] - 2);
    let scale = 2.0 * seed / count as f64;
    let mut g = vec![0.0f64; 3 * n];
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let v = linear_index(dims, i, j, k);
                for c in 0..3 {
                    let base = map[c * n + v] as f64;
                    for d in 0..3 {
                        let fwd = map[c * n + v + strides[d]] as f64;
                        let e = (fwd - base) * steps[d] - if c == d { 1.0 } else { 0.0 };
                        let ge = scale * e * steps[d];
                        g[c * n + v + strides[d]] += ge;
                        g[c * n + v] -= ge;
                    }
                }
            }
        }
    }
    g.into_iter().map(|x| x as f32).collect()
}
