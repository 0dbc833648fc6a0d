//! Forward and backward kernels over NCHW slices.
//!
//! Convolutions lower to a matrix product through an im2col buffer; every
//! spatial operator uses `kernel / 2` zero padding so stride 1 preserves the
//! spatial size.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Geometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Input coordinate read by output `(oy, ox)` at kernel offset `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad() as isize;
        let x = (ox * self.stride + kx) as isize - self.pad() as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every slice covers the full extent addressed by its strides,
    // checked by the callers' shape bookkeeping.
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

fn im2col(x: &[f64], geo: &Geometry, col: &mut [f64]) {
    let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
    let op = oh * ow;
    for c in 0..geo.channels {
        let plane = &x[c * geo.plane()..(c + 1) * geo.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * op..][..op];
                for oy in 0..oh {
                    for ox in 0..ow {
                        row[oy * ow + ox] = geo.source(oy, ox, ky, kx).map_or(0.0, |i| plane[i]);
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], geo: &Geometry, dx: &mut [f64]) {
    let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
    let op = oh * ow;
    for c in 0..geo.channels {
        let plane = &mut dx[c * geo.plane()..(c + 1) * geo.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * op..][..op];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some(i) = geo.source(oy, ox, ky, kx) {
                            plane[i] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(geo: &Geometry) -> bool {
    geo.kernel == 1 && geo.stride == 1
}

/// `weight` is `[out_channels, channels, kernel, kernel]`; `out` receives
/// `batch × out_channels × out_plane` values.
pub fn conv_forward(x: &[f64], batch: usize, geo: &Geometry, weight: &[f64], out_channels: usize, out: &mut [f64]) {
    let patch = geo.channels * geo.kernel * geo.kernel;
    let op = geo.out_plane();
    let mut col = if is_pointwise(geo) { Vec::new() } else { vec![0.0; patch * op] };
    for s in 0..batch {
        let xs = &x[s * geo.channels * geo.plane()..][..geo.channels * geo.plane()];
        let ys = &mut out[s * out_channels * op..][..out_channels * op];
        let cols: &[f64] = if is_pointwise(geo) {
            xs
        } else {
            im2col(xs, geo, &mut col);
            &col
        };
        gemm(out_channels, patch, op, weight, (patch as isize, 1), cols, (op as isize, 1), 0.0, ys);
    }
}

/// Accumulates into `dweight` and `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    batch: usize,
    geo: &Geometry,
    weight: &[f64],
    out_channels: usize,
    dy: &[f64],
    dweight: &mut [f64],
    dx: &mut [f64],
) {
    let patch = geo.channels * geo.kernel * geo.kernel;
    let op = geo.out_plane();
    let in_len = geo.channels * geo.plane();
    let mut col = vec![0.0; patch * op];
    let mut dcol = vec![0.0; patch * op];
    for s in 0..batch {
        let xs = &x[s * in_len..][..in_len];
        let dys = &dy[s * out_channels * op..][..out_channels * op];
        let cols: &[f64] = if is_pointwise(geo) {
            xs
        } else {
            im2col(xs, geo, &mut col);
            &col
        };
        // dW[out, patch] += dY[out, op] · colᵀ[op, patch]
        gemm(out_channels, op, patch, dys, (op as isize, 1), cols, (1, op as isize), 1.0, dweight);
        let dxs = &mut dx[s * in_len..][..in_len];
        if is_pointwise(geo) {
            // dX[patch, op] += Wᵀ[patch, out] · dY[out, op]
            gemm(patch, out_channels, op, weight, (1, patch as isize), dys, (op as isize, 1), 1.0, dxs);
        } else {
            gemm(patch, out_channels, op, weight, (1, patch as isize), dys, (op as isize, 1), 0.0, &mut dcol);
            col2im(&dcol, geo, dxs);
        }
    }
}

/// 3×3 average pooling; padded positions are excluded from the divisor.
pub fn avg_pool_forward(x: &[f64], batch: usize, geo: &Geometry, out: &mut [f64]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    for plane_idx in 0..batch * geo.channels {
        let plane = &x[plane_idx * geo.plane()..][..geo.plane()];
        let ys = &mut out[plane_idx * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut sum, mut count) = (0.0, 0usize);
                for ky in 0..geo.kernel {
                    for kx in 0..geo.kernel {
                        if let Some(i) = geo.source(oy, ox, ky, kx) {
                            sum += plane[i];
                            count += 1;
                        }
                    }
                }
                ys[oy * ow + ox] = sum / count as f64;
            }
        }
    }
}

pub fn avg_pool_backward(batch: usize, geo: &Geometry, dy: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    for plane_idx in 0..batch * geo.channels {
        let dplane = &mut dx[plane_idx * geo.plane()..][..geo.plane()];
        let dys = &dy[plane_idx * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let sources: Vec<usize> = (0..geo.kernel)
                    .flat_map(|ky| (0..geo.kernel).filter_map(move |kx| geo.source(oy, ox, ky, kx)))
                    .collect();
                let share = dys[oy * ow + ox] / sources.len() as f64;
                for i in sources {
                    dplane[i] += share;
                }
            }
        }
    }
}

/// 3×3 max pooling. `argmax` receives, per output, the index of the winning
/// input within its plane (first maximum on ties).
pub fn max_pool_forward(x: &[f64], batch: usize, geo: &Geometry, out: &mut [f64], argmax: &mut [u32]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    for plane_idx in 0..batch * geo.channels {
        let plane = &x[plane_idx * geo.plane()..][..geo.plane()];
        let base = plane_idx * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for ky in 0..geo.kernel {
                    for kx in 0..geo.kernel {
                        if let Some(i) = geo.source(oy, ox, ky, kx) {
                            if plane[i] > best.0 || best.1 == usize::MAX {
                                best = (plane[i], i);
                            }
                        }
                    }
                }
                out[base + oy * ow + ox] = best.0;
                argmax[base + oy * ow + ox] = best.1 as u32;
            }
        }
    }
}

pub fn max_pool_backward(batch: usize, geo: &Geometry, argmax: &[u32], dy: &[f64], dx: &mut [f64]) {
    let op = geo.out_plane();
    for plane_idx in 0..batch * geo.channels {
        let dplane = &mut dx[plane_idx * geo.plane()..][..geo.plane()];
        for o in 0..op {
            dplane[argmax[plane_idx * op + o] as usize] += dy[plane_idx * op + o];
        }
    }
}

/// Packed activation pattern of a ReLU layer: one bit per unit, per sample,
/// set when the unit is active (input strictly positive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMask {
    pub samples: usize,
    pub units: usize,
    pub words: Vec<u64>,
}

impl PackedMask {
    pub fn words_per_sample(&self) -> usize {
        self.units.div_ceil(64)
    }

    pub fn sample(&self, s: usize) -> &[u64] {
        let w = self.words_per_sample();
        &self.words[s * w..(s + 1) * w]
    }

    #[inline]
    pub fn get(&self, s: usize, unit: usize) -> bool {
        let word = self.words[s * self.words_per_sample() + unit / 64];
        word >> (unit % 64) & 1 == 1
    }
}

pub fn relu_forward(x: &[f64], samples: usize, out: &mut [f64]) -> PackedMask {
    let units = x.len() / samples.max(1);
    let per = units.div_ceil(64);
    let mut words = vec![0u64; per * samples];
    for s in 0..samples {
        let xs = &x[s * units..(s + 1) * units];
        let ys = &mut out[s * units..(s + 1) * units];
        let ws = &mut words[s * per..(s + 1) * per];
        for (u, (&v, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
            if v > 0.0 {
                *y = v;
                ws[u / 64] |= 1 << (u % 64);
            } else {
                *y = 0.0;
            }
        }
    }
    PackedMask { samples, units, words }
}

pub fn relu_backward(mask: &PackedMask, dy: &[f64], dx: &mut [f64]) {
    for s in 0..mask.samples {
        let base = s * mask.units;
        for u in 0..mask.units {
            if mask.get(s, u) {
                dx[base + u] += dy[base + u];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &[f64], geo: &Geometry, w: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
        let pad = geo.pad() as isize;
        let mut y = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..geo.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - pad;
                                let ix = (ox * geo.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < geo.height && (ix as usize) < geo.width {
                                    acc += x[(c * geo.height + iy as usize) * geo.width + ix as usize]
                                        * w[((o * geo.channels + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, stride) in &[(1, 1), (3, 1), (3, 2), (1, 2)] {
            let geo = Geometry { channels: 3, height: 7, width: 6, kernel: k, stride };
            let x = pseudo(3 * 42, 1);
            let w = pseudo(4 * 3 * k * k, 2);
            let mut y = vec![0.0; 4 * geo.out_height() * geo.out_width()];
            conv_forward(&x, 1, &geo, &w, 4, &mut y);
            let reference = naive_conv(&x, &geo, &w, 4);
            for (a, b) in y.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let geo = Geometry { channels: 1, height: 2, width: 2, kernel: 3, stride: 1 };
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut y = [0.0; 4];
        avg_pool_forward(&x, 1, &geo, &mut y);
        assert_eq!(y, [2.5; 4]);
    }

    #[test]
    fn relu_mask_packs_signs() {
        let x = [1.0, -1.0, 0.0, 2.0, 3.0, -0.5];
        let mut y = [0.0; 6];
        let mask = relu_forward(&x, 2, &mut y);
        assert_eq!(y, [1.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
        assert_eq!(mask.words, vec![0b001, 0b011]);
    }
}
