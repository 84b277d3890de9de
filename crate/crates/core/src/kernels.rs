//! Forward/backward kernels for the tape ops. All activations are single-sample
//! `[C, Z, Y, X]` buffers in row-major order.

use crate::tensor::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn cube(k: usize) -> Self {
        Self { kernel: [k; 3], stride: [1; 3], pad: [k / 2; 3] }
    }

    pub fn output(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Unfolds `[C, Z, Y, X]` into `[C·kz·ky·kx, Oz·Oy·Ox]`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, dims: [usize; 3], g: &ConvGeometry) -> Vec<T> {
    let o = g.output(dims);
    let n_out = o[0] * o[1] * o[2];
    let mut cols = vec![T::zero(); c * g.taps() * n_out];
    let [dz, dy, dx] = dims;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * dz * dy * dx..(ci + 1) * dz * dy * dx];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..o[0] {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= dz as isize {
                            continue;
                        }
                        for oy in 0..o[1] {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= dy as isize {
                                continue;
                            }
                            let src_row = (iz as usize * dy + iy as usize) * dx;
                            let dst_row = (oz * o[1] + oy) * o[2];
                            for ox in 0..o[2] {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < dx as isize {
                                    dst[dst_row + ox] = plane[src_row + ix as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, dims: [usize; 3], g: &ConvGeometry) -> Vec<T> {
    let o = g.output(dims);
    let n_out = o[0] * o[1] * o[2];
    let [dz, dy, dx] = dims;
    let mut x = vec![T::zero(); c * dz * dy * dx];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * dz * dy * dx..(ci + 1) * dz * dy * dx];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..o[0] {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= dz as isize {
                            continue;
                        }
                        for oy in 0..o[1] {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= dy as isize {
                                continue;
                            }
                            let dst_row = (iz as usize * dy + iy as usize) * dx;
                            let src_row = (oz * o[1] + oy) * o[2];
                            for ox in 0..o[2] {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < dx as isize {
                                    plane[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let o = g.output(dims);
    let n_out = o[0] * o[1] * o[2];
    let k = cin * g.taps();
    let mut out = vec![T::zero(); cout * n_out];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n_out).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        gemm(false, false, cout, n_out, k, T::one(), w, x, beta, &mut out);
    } else {
        let cols = im2col(x, cin, dims, g);
        gemm(false, false, cout, n_out, k, T::one(), w, &cols, beta, &mut out);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    w: &[T],
    cout: usize,
    dout: &[T],
    g: &ConvGeometry,
    need_dx: bool,
) -> ConvGrads<T> {
    let o = g.output(dims);
    let n_out = o[0] * o[1] * o[2];
    let k = cin * g.taps();
    let pointwise = g.is_pointwise();
    let cols_owned;
    let cols: &[T] = if pointwise {
        x
    } else {
        cols_owned = im2col(x, cin, dims, g);
        &cols_owned
    };
    let mut dw = vec![T::zero(); cout * k];
    gemm(false, true, cout, k, n_out, T::one(), dout, cols, T::zero(), &mut dw);
    let db = dout.chunks(n_out).map(|r| r.iter().copied().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); k * n_out];
        gemm(true, false, k, n_out, cout, T::one(), w, dout, T::zero(), &mut dcols);
        if pointwise {
            dcols
        } else {
            col2im(&dcols, cin, dims, g)
        }
    });
    ConvGrads { dx, dw, db }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-group `(mean, inv_std)` for a `[C, S]` buffer.
pub fn group_stats<T: Scalar>(x: &[T], c: usize, groups: usize) -> Vec<(T, T)> {
    let s = x.len() / c;
    let cpg = c / groups;
    (0..groups)
        .map(|gi| {
            let chunk = &x[gi * cpg * s..(gi + 1) * cpg * s];
            let n = chunk.len() as f64;
            let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            (T::from_f64(mean), T::from_f64(1.0 / (var + GROUP_NORM_EPS).sqrt()))
        })
        .collect()
}

pub fn group_norm_forward<T: Scalar>(x: &[T], c: usize, groups: usize, gamma: &[T], beta: &[T]) -> Vec<T> {
    let s = x.len() / c;
    let cpg = c / groups;
    let stats = group_stats(x, c, groups);
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (mean, inv) = stats[ch / cpg];
        for i in ch * s..(ch + 1) * s {
            out[i] = (x[i] - mean) * inv * gamma[ch] + beta[ch];
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    c: usize,
    groups: usize,
    gamma: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.len() / c;
    let cpg = c / groups;
    let stats = group_stats(x, c, groups);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for gi in 0..groups {
        let (mean, inv) = stats[gi];
        let n = T::from_f64((cpg * s) as f64);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ch in gi * cpg..(gi + 1) * cpg {
            for i in ch * s..(ch + 1) * s {
                let xhat = (x[i] - mean) * inv;
                let dxhat = dout[i] * gamma[ch];
                dgamma[ch] += dout[i] * xhat;
                dbeta[ch] += dout[i];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for ch in gi * cpg..(gi + 1) * cpg {
            for i in ch * s..(ch + 1) * s {
                let xhat = (x[i] - mean) * inv;
                let dxhat = dout[i] * gamma[ch];
                dx[i] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn avg_pool2<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [dz, dy, dx] = dims;
    let (oz, oy, ox) = (dz / 2, dy / 2, dx / 2);
    let mut out = vec![T::zero(); c * oz * oy * ox];
    let eighth = T::from_f64(0.125);
    for ch in 0..c {
        let src = &x[ch * dz * dy * dx..];
        let dst = &mut out[ch * oz * oy * ox..(ch + 1) * oz * oy * ox];
        for z in 0..dz {
            for y in 0..dy {
                for xx in 0..dx {
                    dst[((z / 2) * oy + y / 2) * ox + xx / 2] += src[(z * dy + y) * dx + xx] * eighth;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dout: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [dz, dy, dx] = dims;
    let (oy, ox) = (dy / 2, dx / 2);
    let oz = dz / 2;
    let eighth = T::from_f64(0.125);
    let mut out = vec![T::zero(); c * dz * dy * dx];
    for ch in 0..c {
        let src = &dout[ch * oz * oy * ox..];
        let dst = &mut out[ch * dz * dy * dx..(ch + 1) * dz * dy * dx];
        for z in 0..dz {
            for y in 0..dy {
                for xx in 0..dx {
                    dst[(z * dy + y) * dx + xx] = src[((z / 2) * oy + y / 2) * ox + xx / 2] * eighth;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling; `dims` is the *input* extent.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [dz, dy, dx] = dims;
    let (uz, uy, ux) = (dz * 2, dy * 2, dx * 2);
    let mut out = vec![T::zero(); c * uz * uy * ux];
    for ch in 0..c {
        let src = &x[ch * dz * dy * dx..];
        let dst = &mut out[ch * uz * uy * ux..(ch + 1) * uz * uy * ux];
        for z in 0..uz {
            for y in 0..uy {
                for xx in 0..ux {
                    dst[(z * uy + y) * ux + xx] = src[((z / 2) * dy + y / 2) * dx + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [dz, dy, dx] = dims;
    let (uz, uy, ux) = (dz * 2, dy * 2, dx * 2);
    let mut out = vec![T::zero(); c * dz * dy * dx];
    for ch in 0..c {
        let src = &dout[ch * uz * uy * ux..];
        let dst = &mut out[ch * dz * dy * dx..(ch + 1) * dz * dy * dx];
        for z in 0..uz {
            for y in 0..uy {
                for xx in 0..ux {
                    dst[((z / 2) * dy + y / 2) * dx + xx / 2] += src[(z * uy + y) * ux + xx];
                }
            }
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
