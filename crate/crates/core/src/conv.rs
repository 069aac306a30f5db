//! Batched 3d convolution over volumetric channel data, evaluated through
//! the convolution theorem.
//!
//! Circular padding is a plain product in Fourier space; "same" zero padding
//! embeds each volume in an `N + k - 1` working grid, runs the circular
//! path, and crops. Gradients come from the same identities: the input
//! gradient convolves the upstream gradient with the kernel, and the weight
//! gradient is a windowed cross-correlation of input and upstream spectra.
//! Kernel spectra are computed once per call, so batching amortizes them.

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::grid::{fft3_inplace, Dims3};
use crate::tensor::Scalar;

/// Boundary handling for [`conv3d_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    /// Periodic wrap; output dims equal input dims.
    Circular,
    /// "Same" zero padding; output dims equal input dims.
    Zero,
}

/// Convolution layer shape: cubic kernel of odd edge `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: PadMode,
}

/// Kernel weights `[out][in][k^3]` and per-output biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F> {
    pub w: Vec<F>,
    pub b: Vec<F>,
}

impl<F: Scalar> ConvParams<F> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        let taps = spec.k * spec.k * spec.k;
        Self {
            w: vec![F::zero(); spec.out_ch * spec.in_ch * taps],
            b: vec![F::zero(); spec.out_ch],
        }
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init(spec: &ConvSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let taps = spec.k * spec.k * spec.k;
        let fan_in = spec.in_ch * taps;
        let std = F::from_f64_lossy(1.0 / (fan_in as f64).sqrt());
        let w = (0..spec.out_ch * spec.in_ch * taps)
            .map(|_| crate::tensor::randn::<F>(rng) * std)
            .collect();
        Self {
            w,
            b: vec![F::zero(); spec.out_ch],
        }
    }
}

/// Batch of multi-channel volumes, laid out `[example][channel][voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub n: usize,
    pub ch: usize,
    pub dims: Dims3,
    pub data: Vec<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn zeros(n: usize, ch: usize, dims: Dims3) -> Self {
        let vox = dims.0 * dims.1 * dims.2;
        Self {
            n,
            ch,
            dims,
            data: vec![F::zero(); n * ch * vox],
        }
    }

    #[inline]
    pub fn vox(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn slice(&self, b: usize, c: usize) -> &[F] {
        let vox = self.vox();
        let base = (b * self.ch + c) * vox;
        &self.data[base..base + vox]
    }

    #[inline]
    pub fn slice_mut(&mut self, b: usize, c: usize) -> &mut [F] {
        let vox = self.vox();
        let base = (b * self.ch + c) * vox;
        &mut self.data[base..base + vox]
    }
}

struct WorkGeometry {
    work: Dims3,
    off: usize,
}

fn geometry(dims: Dims3, spec: &ConvSpec) -> WorkGeometry {
    assert!(spec.k % 2 == 1, "kernel edge must be odd");
    let p = spec.k / 2;
    match spec.pad {
        PadMode::Circular => WorkGeometry { work: dims, off: 0 },
        PadMode::Zero => WorkGeometry {
            work: (dims.0 + 2 * p, dims.1 + 2 * p, dims.2 + 2 * p),
            off: p,
        },
    }
}

fn embed<F: Scalar>(src: &[F], dims: Dims3, geo: &WorkGeometry) -> Vec<Complex<F>> {
    let (n1, n2, n3) = dims;
    let (m1, m2, m3) = geo.work;
    let mut out = vec![Complex::new(F::zero(), F::zero()); m1 * m2 * m3];
    for i in 0..n1 {
        for j in 0..n2 {
            let s = (i * n2 + j) * n3;
            let d = ((i + geo.off) * m2 + (j + geo.off)) * m3 + geo.off;
            for k in 0..n3 {
                out[d + k].re = src[s + k];
            }
        }
    }
    out
}

fn crop_accumulate<F: Scalar>(
    src: &[Complex<F>],
    geo: &WorkGeometry,
    dims: Dims3,
    scale: F,
    bias: F,
    dst: &mut [F],
) {
    let (n1, n2, n3) = dims;
    let (_, m2, m3) = geo.work;
    for i in 0..n1 {
        for j in 0..n2 {
            let s = ((i + geo.off) * m2 + (j + geo.off)) * m3 + geo.off;
            let d = (i * n2 + j) * n3;
            for k in 0..n3 {
                dst[d + k] = src[s + k].re * scale + bias;
            }
        }
    }
}

/// Spectrum of one `k^3` tap block centered on the origin of the work grid.
fn kernel_spectrum<F: Scalar>(
    taps: &[F],
    k: usize,
    work: Dims3,
    planner: &mut FftPlanner<F>,
) -> Vec<Complex<F>> {
    let (m1, m2, m3) = work;
    let p = (k / 2) as i64;
    let mut grid = vec![Complex::new(F::zero(), F::zero()); m1 * m2 * m3];
    for t1 in 0..k {
        let w1 = (t1 as i64 - p).rem_euclid(m1 as i64) as usize;
        for t2 in 0..k {
            let w2 = (t2 as i64 - p).rem_euclid(m2 as i64) as usize;
            for t3 in 0..k {
                let w3 = (t3 as i64 - p).rem_euclid(m3 as i64) as usize;
                // Accumulate: taps collide when the kernel exceeds the grid.
                grid[(w1 * m2 + w2) * m3 + w3].re += taps[(t1 * k + t2) * k + t3];
            }
        }
    }
    fft3_inplace(&mut grid, work, FftDirection::Forward, planner);
    grid
}

#[inline]
fn mul_acc_conj<F: Scalar>(acc: &mut [Complex<F>], x: &[Complex<F>], k: &[Complex<F>]) {
    // acc += x * conj(k)
    for ((a, &xv), &kv) in acc.iter_mut().zip(x).zip(k) {
        a.re += xv.re * kv.re + xv.im * kv.im;
        a.im += xv.im * kv.re - xv.re * kv.im;
    }
}

#[inline]
fn mul_acc<F: Scalar>(acc: &mut [Complex<F>], x: &[Complex<F>], k: &[Complex<F>]) {
    // acc += x * k
    for ((a, &xv), &kv) in acc.iter_mut().zip(x).zip(k) {
        a.re += xv.re * kv.re - xv.im * kv.im;
        a.im += xv.re * kv.im + xv.im * kv.re;
    }
}

fn forward_spectra<F: Scalar>(
    x: &Batch<F>,
    geo: &WorkGeometry,
    planner: &mut FftPlanner<F>,
) -> Vec<Vec<Complex<F>>> {
    let mut out = Vec::with_capacity(x.n * x.ch);
    for b in 0..x.n {
        for c in 0..x.ch {
            let mut e = embed(x.slice(b, c), x.dims, geo);
            fft3_inplace(&mut e, geo.work, FftDirection::Forward, planner);
            out.push(e);
        }
    }
    out
}

/// Cross-correlation of the batch with the kernel bank plus bias, dims
/// preserved under either padding mode.
pub fn conv3d_forward<F: Scalar>(
    x: &Batch<F>,
    spec: &ConvSpec,
    params: &ConvParams<F>,
) -> Batch<F> {
    assert_eq!(x.ch, spec.in_ch, "input channel mismatch");
    let geo = geometry(x.dims, spec);
    let mut planner = FftPlanner::new();
    let xf = forward_spectra(x, &geo, &mut planner);

    let wvox = geo.work.0 * geo.work.1 * geo.work.2;
    let taps = spec.k * spec.k * spec.k;
    let scale = F::from_f64_lossy(1.0 / wvox as f64);
    let mut y = Batch::zeros(x.n, spec.out_ch, x.dims);
    let mut acc = vec![vec![Complex::new(F::zero(), F::zero()); wvox]; x.n];

    for o in 0..spec.out_ch {
        for a in &mut acc {
            a.iter_mut()
                .for_each(|c| *c = Complex::new(F::zero(), F::zero()));
        }
        for i in 0..spec.in_ch {
            let kf = kernel_spectrum(
                &params.w[(o * spec.in_ch + i) * taps..(o * spec.in_ch + i + 1) * taps],
                spec.k,
                geo.work,
                &mut planner,
            );
            for b in 0..x.n {
                mul_acc_conj(&mut acc[b], &xf[b * spec.in_ch + i], &kf);
            }
        }
        for (b, a) in acc.iter_mut().enumerate() {
            fft3_inplace(a, geo.work, FftDirection::Inverse, &mut planner);
            crop_accumulate(a, &geo, x.dims, scale, params.b[o], y.slice_mut(b, o));
        }
    }
    y
}

/// Gradients of a scalar loss through [`conv3d_forward`]: input gradient and
/// parameter gradients, given upstream `dy`.
pub fn conv3d_backward<F: Scalar>(
    x: &Batch<F>,
    dy: &Batch<F>,
    spec: &ConvSpec,
    params: &ConvParams<F>,
) -> (Batch<F>, ConvParams<F>) {
    assert_eq!(x.ch, spec.in_ch);
    assert_eq!(dy.ch, spec.out_ch);
    assert_eq!(x.dims, dy.dims);
    let geo = geometry(x.dims, spec);
    let mut planner = FftPlanner::new();
    let xf = forward_spectra(x, &geo, &mut planner);
    let dyf = forward_spectra(dy, &geo, &mut planner);

    let wvox = geo.work.0 * geo.work.1 * geo.work.2;
    let taps = spec.k * spec.k * spec.k;
    let scale = F::from_f64_lossy(1.0 / wvox as f64);
    let p = (spec.k / 2) as i64;
    let (m1, m2, m3) = geo.work;

    let mut grads = ConvParams::zeros(spec);
    let mut dxf = vec![vec![Complex::new(F::zero(), F::zero()); wvox]; x.n * spec.in_ch];
    let mut gsum = vec![Complex::new(F::zero(), F::zero()); wvox];

    for o in 0..spec.out_ch {
        for i in 0..spec.in_ch {
            let kf = kernel_spectrum(
                &params.w[(o * spec.in_ch + i) * taps..(o * spec.in_ch + i + 1) * taps],
                spec.k,
                geo.work,
                &mut planner,
            );
            gsum.iter_mut()
                .for_each(|c| *c = Complex::new(F::zero(), F::zero()));
            for b in 0..x.n {
                // dX spectrum accumulates dY (X) K; dW correlates X with dY.
                mul_acc(&mut dxf[b * spec.in_ch + i], &dyf[b * spec.out_ch + o], &kf);
                mul_acc_conj(
                    &mut gsum,
                    &xf[b * spec.in_ch + i],
                    &dyf[b * spec.out_ch + o],
                );
            }
            fft3_inplace(&mut gsum, geo.work, FftDirection::Inverse, &mut planner);
            let dst = &mut grads.w[(o * spec.in_ch + i) * taps..(o * spec.in_ch + i + 1) * taps];
            for t1 in 0..spec.k {
                let w1 = (t1 as i64 - p).rem_euclid(m1 as i64) as usize;
                for t2 in 0..spec.k {
                    let w2 = (t2 as i64 - p).rem_euclid(m2 as i64) as usize;
                    for t3 in 0..spec.k {
                        let w3 = (t3 as i64 - p).rem_euclid(m3 as i64) as usize;
                        dst[(t1 * spec.k + t2) * spec.k + t3] =
                            gsum[(w1 * m2 + w2) * m3 + w3].re * scale;
                    }
                }
            }
        }
        let mut db = F::zero();
        for b in 0..dy.n {
            db += dy.slice(b, o).iter().cloned().sum::<F>();
        }
        grads.b[o] = db;
    }

    let mut dx = Batch::zeros(x.n, spec.in_ch, x.dims);
    for b in 0..x.n {
        for i in 0..spec.in_ch {
            let buf = &mut dxf[b * spec.in_ch + i];
            fft3_inplace(buf, geo.work, FftDirection::Inverse, &mut planner);
            crop_accumulate(buf, &geo, x.dims, scale, F::zero(), dx.slice_mut(b, i));
        }
    }
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, ch: usize, dims: Dims3, seed: u64) -> Batch<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Batch::zeros(n, ch, dims);
        for v in &mut b.data {
            *v = rng.random_range(-1.0..1.0);
        }
        b
    }

    /// Direct nested-loop reference convolution.
    fn reference_conv(x: &Batch<f64>, spec: &ConvSpec, params: &ConvParams<f64>) -> Batch<f64> {
        let (n1, n2, n3) = x.dims;
        let k = spec.k as i64;
        let p = k / 2;
        let taps = spec.k * spec.k * spec.k;
        let mut y = Batch::zeros(x.n, spec.out_ch, x.dims);
        for b in 0..x.n {
            for o in 0..spec.out_ch {
                for i1 in 0..n1 as i64 {
                    for i2 in 0..n2 as i64 {
                        for i3 in 0..n3 as i64 {
                            let mut acc = params.b[o];
                            for ic in 0..spec.in_ch {
                                let xs = x.slice(b, ic);
                                let w = &params.w[(o * spec.in_ch + ic) * taps..];
                                for t1 in 0..k {
                                    for t2 in 0..k {
                                        for t3 in 0..k {
                                            let (j1, j2, j3) =
                                                (i1 + t1 - p, i2 + t2 - p, i3 + t3 - p);
                                            let xv = match spec.pad {
                                                PadMode::Circular => {
                                                    let j1 = j1.rem_euclid(n1 as i64) as usize;
                                                    let j2 = j2.rem_euclid(n2 as i64) as usize;
                                                    let j3 = j3.rem_euclid(n3 as i64) as usize;
                                                    xs[(j1 * n2 + j2) * n3 + j3]
                                                }
                                                PadMode::Zero => {
                                                    if j1 < 0
                                                        || j2 < 0
                                                        || j3 < 0
                                                        || j1 >= n1 as i64
                                                        || j2 >= n2 as i64
                                                        || j3 >= n3 as i64
                                                    {
                                                        0.0
                                                    } else {
                                                        xs[(j1 as usize * n2 + j2 as usize) * n3
                                                            + j3 as usize]
                                                    }
                                                }
                                            };
                                            acc += xv * w[((t1 * k + t2) * k + t3) as usize];
                                        }
                                    }
                                }
                            }
                            let yi = ((i1 as usize) * n2 + i2 as usize) * n3 + i3 as usize;
                            y.slice_mut(b, o)[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn check_forward(pad: PadMode, seed: u64) {
        let spec = ConvSpec {
            in_ch: 2,
            out_ch: 3,
            k: 3,
            pad,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ConvParams::<f64>::init(&spec, &mut rng);
        for (i, b) in params.b.iter_mut().enumerate() {
            *b = 0.1 * (i as f64 - 1.0);
        }
        let x = random_batch(2, 2, (5, 4, 6), seed + 1);
        let fast = conv3d_forward(&x, &spec, &params);
        let slow = reference_conv(&x, &spec, &params);
        let diff = fast
            .data
            .iter()
            .zip(&slow.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-10, "{pad:?} forward differs by {diff}");
    }

    #[test]
    fn fft_conv_matches_direct_reference_circular() {
        check_forward(PadMode::Circular, 7);
    }

    #[test]
    fn fft_conv_matches_direct_reference_zero() {
        check_forward(PadMode::Zero, 8);
    }

    fn check_gradients(pad: PadMode, seed: u64) {
        let spec = ConvSpec {
            in_ch: 2,
            out_ch: 2,
            k: 3,
            pad,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ConvParams::<f64>::init(&spec, &mut rng);
        let x = random_batch(2, 2, (4, 3, 5), seed + 1);
        // Loss = sum(y .* r) for fixed random r makes dL/dy = r.
        let r = random_batch(2, 2, (4, 3, 5), seed + 2);
        let loss = |params: &ConvParams<f64>, x: &Batch<f64>| -> f64 {
            let y = conv3d_forward(x, &spec, params);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let (dx, grads) = conv3d_backward(&x, &r, &spec, &params);

        let h = 1e-6;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!(
                (fd - dx.data[idx]).abs() < 1e-6,
                "{pad:?} dx[{idx}]: fd {fd} vs {}",
                dx.data[idx]
            );
        }
        for idx in (0..params.w.len()).step_by(11) {
            let mut pp = params.clone();
            pp.w[idx] += h;
            let mut pm = params.clone();
            pm.w[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!(
                (fd - grads.w[idx]).abs() < 1e-6,
                "{pad:?} dw[{idx}]: fd {fd} vs {}",
                grads.w[idx]
            );
        }
        for idx in 0..params.b.len() {
            let mut pp = params.clone();
            pp.b[idx] += h;
            let mut pm = params.clone();
            pm.b[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads.b[idx]).abs() < 1e-6, "{pad:?} db[{idx}]");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences_circular() {
        check_gradients(PadMode::Circular, 21);
    }

    #[test]
    fn conv_gradients_match_finite_differences_zero() {
        check_gradients(PadMode::Zero, 22);
    }

    #[test]
    fn circular_conv_commutes_with_translation() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 2,
            k: 3,
            pad: PadMode::Circular,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let params = ConvParams::<f64>::init(&spec, &mut rng);
        let x = random_batch(1, 1, (6, 6, 6), 31);

        // Shift input by one voxel along axis 0.
        let (n1, n2, n3) = x.dims;
        let mut shifted = Batch::zeros(1, 1, x.dims);
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    shifted.slice_mut(0, 0)[(((i + 1) % n1) * n2 + j) * n3 + k] =
                        x.slice(0, 0)[(i * n2 + j) * n3 + k];
                }
            }
        }
        let y = conv3d_forward(&x, &spec, &params);
        let ys = conv3d_forward(&shifted, &spec, &params);
        for o in 0..2 {
            for i in 0..n1 {
                for j in 0..n2 {
                    for k in 0..n3 {
                        let a = y.slice(0, o)[(i * n2 + j) * n3 + k];
                        let b = ys.slice(0, o)[(((i + 1) % n1) * n2 + j) * n3 + k];
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
