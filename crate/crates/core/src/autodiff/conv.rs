//! Direct-loop 3D cross-correlation and nearest-neighbour upsampling kernels.
//!
//! Every reduction runs in a fixed loop order, so results are bit-reproducible.

use crate::error::{bail, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        bail!(Shape, "kernel {} larger than padded extent {}", k, padded);
    }
    if (padded - k) % stride != 0 {
        bail!(
            Shape,
            "output extent ({} + 2*{} - {})/{} + 1 is not integral",
            extent,
            pad,
            k,
            stride
        );
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            bail!(
                Dimension,
                "conv3d expects 5-d input and weight, got {:?} and {:?}",
                input,
                weight
            );
        }
        if stride == 0 {
            bail!(Shape, "conv3d stride must be positive");
        }
        if weight[1] != input[1] {
            bail!(
                Dimension,
                "conv3d weight expects {} input channels, input has {}",
                weight[1],
                input[1]
            );
        }
        let kernel = [weight[2], weight[3], weight[4]];
        if pad > 0 && kernel.iter().any(|k| k % 2 == 0) {
            bail!(Shape, "padded conv3d needs odd kernel extents, got {:?}", kernel);
        }
        let dims = [input[2], input[3], input[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_extent(dims[a], kernel[a], stride, pad)?;
        }
        Ok(Self {
            batch: input[0],
            cin: input[1],
            cout: weight[0],
            input: dims,
            kernel,
            output,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
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

    /// For kernel offset `k` along axis `a`: the half-open range of output
    /// positions whose source index `o*stride + k - pad` is in bounds.
    fn valid_range(&self, a: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let n = self.input[a];
        if n + p <= k {
            return (0, 0);
        }
        let hi = ((n - 1 + p - k) / s + 1).min(self.output[a]);
        (lo.min(hi), hi)
    }

    fn ranges(&self) -> [Vec<(usize, usize)>; 3] {
        [0, 1, 2].map(|a| (0..self.kernel[a]).map(|k| self.valid_range(a, k)).collect())
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Rows of the column matrix, one per (input channel, kernel tap).
    fn col_rows(&self) -> usize {
        self.cin * self.k_vol()
    }

    /// Visits every in-bounds (column index, input index) pair of one sample,
    /// where column index `j * out_vol + o` is output position `o` read
    /// through row `j = ci * k_vol + tap`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ranges = self.ranges();
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let (s, p) = (self.stride, self.pad);
        let ovol = self.out_vol();
        for ci in 0..self.cin {
            let ibase = ci * self.in_vol();
            for kz in 0..kd {
                let (zlo, zhi) = ranges[0][kz];
                for ky in 0..kh {
                    let (ylo, yhi) = ranges[1][ky];
                    for kx in 0..kw {
                        let (xlo, xhi) = ranges[2][kx];
                        if xlo >= xhi {
                            continue;
                        }
                        let j = ((ci * kd + kz) * kh + ky) * kw + kx;
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - p;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let irow = ibase + (iz * ih + iy) * iw;
                                let crow = j * ovol + (oz * oh + oy) * ow;
                                // one row of output positions, handed over as a run
                                f(crow + xlo, irow + xlo * s + kx - p, xhi - xlo);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix `[cin * k_vol, out_vol]` of one sample `x: [cin, in_vol]`;
    /// taps that fall into the padding read zero.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.col_rows() * self.out_vol()];
        let s = self.stride;
        self.for_each_tap(|c, i, n| {
            if s == 1 {
                col[c..c + n].copy_from_slice(&x[i..i + n]);
            } else {
                for t in 0..n {
                    col[c + t] = x[i + t * s];
                }
            }
        });
        col
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds column entries back onto the input.
    fn col2im<T: Scalar>(&self, col: &[T], gin: &mut [T]) {
        let s = self.stride;
        self.for_each_tap(|c, i, n| {
            for t in 0..n {
                gin[i + t * s] += col[c + t];
            }
        });
    }

    fn columns<'a, T: Scalar>(&self, x: &'a [T], b: usize) -> std::borrow::Cow<'a, [T]> {
        let sample = &x[b * self.cin * self.in_vol()..(b + 1) * self.cin * self.in_vol()];
        if self.pointwise() {
            std::borrow::Cow::Borrowed(sample)
        } else {
            std::borrow::Cow::Owned(self.im2col(sample))
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (ovol, k) = (self.out_vol(), self.col_rows());
        let mut out = vec![T::zero(); self.batch * self.cout * ovol];
        for b in 0..self.batch {
            let col = self.columns(x, b);
            for co in 0..self.cout {
                let dst = &mut out[(b * self.cout + co) * ovol..][..ovol];
                if let Some(bias) = bias {
                    dst.fill(bias[co]);
                }
                for j in 0..k {
                    axpy(dst, w[co * k + j], &col[j * ovol..(j + 1) * ovol]);
                }
            }
        }
        out
    }

    pub fn backward_input<T: Scalar>(&self, gout: &[T], w: &[T]) -> Vec<T> {
        let (ovol, k, ivol) = (self.out_vol(), self.col_rows(), self.in_vol());
        let mut gin = vec![T::zero(); self.batch * self.cin * ivol];
        for b in 0..self.batch {
            let mut gcol = vec![T::zero(); k * ovol];
            for co in 0..self.cout {
                let g = &gout[(b * self.cout + co) * ovol..][..ovol];
                for j in 0..k {
                    axpy(&mut gcol[j * ovol..(j + 1) * ovol], w[co * k + j], g);
                }
            }
            let dst = &mut gin[b * self.cin * ivol..(b + 1) * self.cin * ivol];
            if self.pointwise() {
                dst.copy_from_slice(&gcol);
            } else {
                self.col2im(&gcol, dst);
            }
        }
        gin
    }

    pub fn backward_weight<T: Scalar>(&self, gout: &[T], x: &[T]) -> Vec<T> {
        let (ovol, k) = (self.out_vol(), self.col_rows());
        let mut gw = vec![T::zero(); self.cout * k];
        for b in 0..self.batch {
            let col = self.columns(x, b);
            for co in 0..self.cout {
                let g = &gout[(b * self.cout + co) * ovol..][..ovol];
                for j in 0..k {
                    gw[co * k + j] += dot(g, &col[j * ovol..(j + 1) * ovol]);
                }
            }
        }
        gw
    }

    pub fn backward_bias<T: Scalar>(&self, gout: &[T]) -> Vec<T> {
        let ovol = self.out_vol();
        let mut gb = vec![T::zero(); self.cout];
        for (i, plane) in gout.chunks(ovol).enumerate() {
            gb[i % self.cout] += plane.iter().copied().sum::<T>();
        }
        gb
    }
}

/// `dst += a * src`.
#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += a * v;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Nearest-neighbour upsampling of the three trailing axes of a 5-d tensor.
pub(crate) fn upsample_forward<T: Scalar>(x: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (planes, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * d * h * w..(pl + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let row = &src[((z / factor) * h + y / factor) * w..][..w];
                for &v in row {
                    for _ in 0..factor {
                        out.push(v);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(g: &[T], in_shape: &[usize], factor: usize) -> Vec<T> {
    let (planes, d, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut gin = vec![T::zero(); planes * d * h * w];
    for pl in 0..planes {
        let dst = &mut gin[pl * d * h * w..(pl + 1) * d * h * w];
        let src = &g[pl * od * oh * ow..(pl + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let orow = &src[(z * oh + y) * ow..][..ow];
                let irow = ((z / factor) * h + y / factor) * w;
                for (x, &v) in orow.iter().enumerate() {
                    dst[irow + x / factor] += v;
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference cross-correlation with explicit bounds checks on every tap.
    fn naive(geom: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = geom.input;
        let [od, oh, ow] = geom.output;
        let [kd, kh, kw] = geom.kernel;
        let mut out = vec![0.0; geom.batch * geom.cout * od * oh * ow];
        for b in 0..geom.batch {
            for co in 0..geom.cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..geom.cin {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iz = (oz * geom.stride + kz) as isize - geom.pad as isize;
                                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= id || iy >= ih || ix >= iw {
                                                continue;
                                            }
                                            let xi = (((b * geom.cin + ci) * id + iz) * ih + iy) * iw + ix;
                                            let wi = (((co * geom.cin + ci) * kd + kz) * kh + ky) * kw + kx;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * geom.cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            (vec![2, 2, 5, 4, 3], vec![3, 2, 3, 3, 3], 1, 1),
            (vec![1, 3, 6, 6, 6], vec![2, 3, 3, 3, 3], 1, 0),
            (vec![1, 2, 7, 5, 5], vec![2, 2, 3, 3, 3], 2, 1),
            (vec![1, 1, 8, 8, 8], vec![4, 1, 4, 4, 4], 4, 0),
            (vec![1, 2, 4, 4, 4], vec![3, 2, 2, 2, 2], 2, 0),
        ];
        for (xs, ws, s, p) in cases {
            let geom = ConvGeom::new(&xs, &ws, s, p).unwrap();
            let nx: usize = xs.iter().product();
            let nw: usize = ws.iter().product();
            let x: Vec<f64> = (0..nx).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..nw).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            assert_eq!(geom.forward(&x, &w, None), naive(&geom, &x, &w), "{xs:?} {ws:?}");
        }
    }

    /// `<conv(x), g> = <x, backward_input(g)> = <w, backward_weight(g, x)>`,
    /// exact on small integers.
    #[test]
    fn backward_kernels_are_adjoint() {
        let cases = [
            (vec![2, 2, 5, 4, 3], vec![3, 2, 3, 3, 3], 1, 1),
            (vec![1, 2, 7, 5, 5], vec![2, 2, 3, 3, 3], 2, 1),
            (vec![2, 1, 8, 8, 8], vec![4, 1, 4, 4, 4], 4, 0),
            (vec![1, 3, 4, 4, 4], vec![2, 3, 1, 1, 1], 1, 0),
        ];
        for (xs, ws, s, p) in cases {
            let geom = ConvGeom::new(&xs, &ws, s, p).unwrap();
            let nx: usize = xs.iter().product();
            let nw: usize = ws.iter().product();
            let no: usize = geom.output_shape().iter().product();
            let x: Vec<f64> = (0..nx).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..nw).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let g: Vec<f64> = (0..no).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
            let ip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let lhs = ip(&geom.forward(&x, &w, None), &g);
            assert_eq!(lhs, ip(&x, &geom.backward_input(&g, &w)), "{xs:?}");
            assert_eq!(lhs, ip(&w, &geom.backward_weight(&g, &x)), "{xs:?}");
        }
    }

    #[test]
    fn rejects_fractional_output() {
        assert!(ConvGeom::new(&[1, 1, 8, 8, 8], &[1, 1, 3, 3, 3], 2, 1).is_err());
        assert!(ConvGeom::new(&[1, 1, 8, 8, 8], &[1, 1, 2, 2, 2], 2, 0).is_ok());
        assert!(ConvGeom::new(&[1, 2, 8, 8, 8], &[1, 1, 3, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = [1.0f64, 2.0];
        let out = upsample_forward(&x, &[1, 1, 1, 1, 2], 2);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample_backward(&vec![1.0f64; 16], &[1, 1, 1, 1, 2], 2);
        assert_eq!(g, vec![8.0, 8.0]);
    }
}
