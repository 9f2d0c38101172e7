//! 3D cross-correlation kernels.
//!
//! Two implementations share one geometry: a direct per-output-voxel loop used
//! as the reference, and a blocked variant that walks one kernel tap at a time
//! and streams whole output rows. Both are generic over the float type so the
//! same code serves the f64 training path and the f32 inference path.

use num_traits::Float;

use crate::error::{shape_err, Result};

/// Which conv3d implementation a [`crate::Graph`] dispatches to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvImpl {
    Reference,
    #[default]
    Blocked,
}

/// Shape bookkeeping for one conv3d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Validates `x: [N, Cin, D, H, W]` against `k: [Cout, Cin, kd, kh, kw]`.
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || k_shape.len() != 5 {
            return shape_err(
                "conv3d",
                format!("expected rank-5 input and kernel, got {x_shape:?} and {k_shape:?}"),
            );
        }
        if x_shape[1] != k_shape[1] {
            return shape_err(
                "conv3d",
                format!("input has {} channels, kernel expects {}", x_shape[1], k_shape[1]),
            );
        }
        if stride == 0 {
            return shape_err("conv3d", "stride must be positive");
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x_shape[2 + a] + 2 * pad;
            let k = k_shape[2 + a];
            if padded < k {
                return shape_err(
                    "conv3d",
                    format!("kernel {k_shape:?} larger than padded input {x_shape:?}"),
                );
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(Self {
            batch: x_shape[0],
            in_channels: x_shape[1],
            out_channels: k_shape[0],
            input: [x_shape[2], x_shape[3], x_shape[4]],
            kernel: [k_shape[2], k_shape[3], k_shape[4]],
            output,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input coordinate for output index `o` and kernel tap `t` along one axis.
    #[inline]
    fn src(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Output range along the last axis whose source column stays inside the input.
    #[inline]
    fn row_range(&self, t: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = t as isize - self.pad as isize;
        let w = self.input[2] as isize;
        // ow*s + shift in [0, w)
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = if w - 1 - shift < 0 {
            -1
        } else {
            ((w - 1 - shift) / s).min(self.output[2] as isize - 1)
        };
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

pub fn conv3d_forward<T: Float>(imp: ConvImpl, geo: &ConvGeometry, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    match imp {
        ConvImpl::Reference => forward_reference(geo, x, k, bias),
        ConvImpl::Blocked => forward_blocked(geo, x, k, bias),
    }
}

/// Gradients with respect to input, kernel and bias.
pub fn conv3d_backward<T: Float>(
    imp: ConvImpl,
    geo: &ConvGeometry,
    x: &[T],
    k: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    match imp {
        ConvImpl::Reference => backward_reference(geo, x, k, gout),
        ConvImpl::Blocked => backward_blocked(geo, x, k, gout),
    }
}

fn forward_reference<T: Float>(geo: &ConvGeometry, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let [od, oh, ow] = geo.output;
    let [kd, kh, kw] = geo.kernel;
    let [_, ih, iw] = geo.input;
    let mut out = vec![T::zero(); geo.batch * geo.out_channels * geo.out_vol()];
    let mut idx = 0;
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(T::zero(), |b| b[co]);
                        for ci in 0..geo.in_channels {
                            let xbase = (n * geo.in_channels + ci) * geo.in_vol();
                            let kbase = (co * geo.in_channels + ci) * geo.k_vol();
                            for a in 0..kd {
                                let Some(sz) = geo.src(z, a, 0) else { continue };
                                for b in 0..kh {
                                    let Some(sy) = geo.src(y, b, 1) else { continue };
                                    for c in 0..kw {
                                        let Some(sx) = geo.src(xo, c, 2) else { continue };
                                        acc = acc
                                            + x[xbase + (sz * ih + sy) * iw + sx] * k[kbase + (a * kh + b) * kw + c];
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

fn backward_reference<T: Float>(geo: &ConvGeometry, x: &[T], k: &[T], gout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [od, oh, ow] = geo.output;
    let [kd, kh, kw] = geo.kernel;
    let [_, ih, iw] = geo.input;
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); geo.out_channels];
    let mut idx = 0;
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let g = gout[idx];
                        idx += 1;
                        gb[co] = gb[co] + g;
                        for ci in 0..geo.in_channels {
                            let xbase = (n * geo.in_channels + ci) * geo.in_vol();
                            let kbase = (co * geo.in_channels + ci) * geo.k_vol();
                            for a in 0..kd {
                                let Some(sz) = geo.src(z, a, 0) else { continue };
                                for b in 0..kh {
                                    let Some(sy) = geo.src(y, b, 1) else { continue };
                                    for c in 0..kw {
                                        let Some(sx) = geo.src(xo, c, 2) else { continue };
                                        let xi = xbase + (sz * ih + sy) * iw + sx;
                                        let ki = kbase + (a * kh + b) * kw + c;
                                        gx[xi] = gx[xi] + g * k[ki];
                                        gk[ki] = gk[ki] + g * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Calls `f(out_row_offset, in_row_offset, lo, hi, src_col0)` for every
/// (kernel tap, output row) pair that touches the input.
#[inline]
fn for_each_row(
    geo: &ConvGeometry,
    a: usize,
    b: usize,
    c: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [od, oh, ow] = geo.output;
    let [_, ih, iw] = geo.input;
    let (lo, hi) = geo.row_range(c);
    if lo >= hi {
        return;
    }
    let col0 = lo * geo.stride + c - geo.pad;
    for z in 0..od {
        let Some(sz) = geo.src(z, a, 0) else { continue };
        for y in 0..oh {
            let Some(sy) = geo.src(y, b, 1) else { continue };
            f((z * oh + y) * ow, (sz * ih + sy) * iw, lo, hi, col0);
        }
    }
}

fn forward_blocked<T: Float>(geo: &ConvGeometry, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let [kd, kh, kw] = geo.kernel;
    let ov = geo.out_vol();
    let s = geo.stride;
    let mut out = vec![T::zero(); geo.batch * geo.out_channels * ov];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let plane = &mut out[(n * geo.out_channels + co) * ov..][..ov];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..geo.in_channels {
                let xin = &x[(n * geo.in_channels + ci) * geo.in_vol()..][..geo.in_vol()];
                let kbase = (co * geo.in_channels + ci) * geo.k_vol();
                for a in 0..kd {
                    for b in 0..kh {
                        for c in 0..kw {
                            let kv = k[kbase + (a * kh + b) * kw + c];
                            if kv == T::zero() {
                                continue;
                            }
                            for_each_row(geo, a, b, c, |orow, irow, lo, hi, col0| {
                                let dst = &mut plane[orow + lo..orow + hi];
                                if s == 1 {
                                    let src = &xin[irow + col0..irow + col0 + (hi - lo)];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d = *d + kv * v;
                                    }
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        *d = *d + kv * xin[irow + col0 + j * s];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_blocked<T: Float>(geo: &ConvGeometry, x: &[T], k: &[T], gout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [kd, kh, kw] = geo.kernel;
    let ov = geo.out_vol();
    let iv = geo.in_vol();
    let s = geo.stride;
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); geo.out_channels];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let gplane = &gout[(n * geo.out_channels + co) * ov..][..ov];
            gb[co] = gplane.iter().fold(gb[co], |acc, &v| acc + v);
            for ci in 0..geo.in_channels {
                let xoff = (n * geo.in_channels + ci) * iv;
                let xin = &x[xoff..xoff + iv];
                let gxin = &mut gx[xoff..xoff + iv];
                let kbase = (co * geo.in_channels + ci) * geo.k_vol();
                for a in 0..kd {
                    for b in 0..kh {
                        for c in 0..kw {
                            let ki = kbase + (a * kh + b) * kw + c;
                            let kv = k[ki];
                            let mut acc = T::zero();
                            for_each_row(geo, a, b, c, |orow, irow, lo, hi, col0| {
                                let g = &gplane[orow + lo..orow + hi];
                                for (j, &gv) in g.iter().enumerate() {
                                    let xi = irow + col0 + j * s;
                                    acc = acc + gv * xin[xi];
                                    gxin[xi] = gxin[xi] + gv * kv;
                                }
                            });
                            gk[ki] = gk[ki] + acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn output_dims_follow_floor_formula() {
        let g = ConvGeometry::new(&[1, 1, 32, 32, 32], &[4, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [16, 16, 16]);
        let g = ConvGeometry::new(&[1, 1, 7, 6, 5], &[1, 1, 3, 3, 3], 2, 0).unwrap();
        assert_eq!(g.output, [3, 2, 2]);
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 4, 4], &[1, 1, 3, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn row_range_matches_brute_force() {
        for (w, kw, s, p) in [(5, 3, 1, 1), (8, 3, 2, 1), (7, 5, 3, 2), (4, 1, 2, 0), (3, 3, 1, 0)] {
            let g = ConvGeometry::new(&[1, 1, 1, 1, w], &[1, 1, 1, 1, kw], s, p).unwrap();
            for c in 0..kw {
                let valid: Vec<usize> = (0..g.output[2]).filter(|&o| g.src(o, c, 2).is_some()).collect();
                let (lo, hi) = g.row_range(c);
                assert_eq!(valid, (lo..hi).collect::<Vec<_>>(), "w={w} kw={kw} s={s} p={p} c={c}");
            }
        }
    }

    #[test]
    fn blocked_matches_reference() {
        for (xs, ks, s, p) in [
            ([2, 3, 5, 6, 7], [4, 3, 3, 3, 3], 1, 1),
            ([1, 2, 8, 8, 8], [3, 2, 3, 3, 3], 2, 1),
            ([2, 1, 6, 5, 4], [2, 1, 2, 3, 1], 3, 2),
        ] {
            let g = ConvGeometry::new(&xs, &ks, s, p).unwrap();
            let x = lcg(1, xs.iter().product());
            let k = lcg(2, ks.iter().product());
            let bias = lcg(3, ks[0]);
            let r = conv3d_forward(ConvImpl::Reference, &g, &x, &k, Some(&bias));
            let b = conv3d_forward(ConvImpl::Blocked, &g, &x, &k, Some(&bias));
            let max = r.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max < 1e-12, "forward diff {max}");

            let gout = lcg(4, r.len());
            let (rx, rk, rb) = conv3d_backward(ConvImpl::Reference, &g, &x, &k, &gout);
            let (bx, bk, bb) = conv3d_backward(ConvImpl::Blocked, &g, &x, &k, &gout);
            for (u, v) in [(&rx, &bx), (&rk, &bk), (&rb, &bb)] {
                let max = u.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(max < 1e-12, "backward diff {max}");
            }
        }
    }
}
