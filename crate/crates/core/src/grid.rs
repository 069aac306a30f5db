//! 3d grid containers, Fourier transforms, the inverse-shift operator,
//! normalization, and resolution geometry shared by the rest of the crate.
//!
//! Maps are stored as dense row-major `f32` arrays with index order
//! `(i, j, k) -> i*N2*N3 + j*N3 + k`, so the third axis is contiguous.
//! The forward transform is unnormalized; the inverse divides by `N1*N2*N3`.

use num_complex::Complex;
use rustfft::{FftDirection, FftNum, FftPlanner};
use thiserror::Error;

/// Grid dimensions `(N1, N2, N3)`.
pub type Dims3 = (usize, usize, usize);

#[derive(Debug, Error)]
pub enum GridError {
    #[error("data length {got} does not match dims {dims:?}")]
    DimsMismatch { dims: Dims3, got: usize },
    #[error("grid dims must be positive, got {0:?}")]
    EmptyDims(Dims3),
    #[error("reference DFT accepts at most {max} per axis, got {got:?}")]
    OracleTooLarge { max: usize, got: Dims3 },
    #[error("d-spacing is undefined for (0,0,0)")]
    ZeroMillerIndex,
    #[error("unit cell edges must be positive, got ({0}, {1}, {2})")]
    BadCell(f64, f64, f64),
}

/// Real-valued 3d grid over a unit cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    dims: Dims3,
    data: Vec<f32>,
}

impl Grid3 {
    pub fn new(dims: Dims3, data: Vec<f32>) -> Result<Self, GridError> {
        let (n1, n2, n3) = dims;
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(GridError::EmptyDims(dims));
        }
        if data.len() != n1 * n2 * n3 {
            return Err(GridError::DimsMismatch {
                dims,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims3) -> Self {
        let (n1, n2, n3) = dims;
        Self {
            dims,
            data: vec![0.0; n1 * n2 * n3],
        }
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let (n1, n2, n3) = dims;
        let mut data = Vec::with_capacity(n1 * n2 * n3);
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let (_, n2, n3) = self.dims;
        (i * n2 + j) * n3 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Grid index of the entry with the largest value.
    pub fn argmax(&self) -> (usize, usize, usize) {
        let (_, n2, n3) = self.dims;
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        (best / (n2 * n3), (best / n3) % n2, best % n3)
    }
}

/// Complex-valued 3d grid, same layout as [`Grid3`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid3 {
    dims: Dims3,
    data: Vec<Complex<f32>>,
}

impl ComplexGrid3 {
    pub fn new(dims: Dims3, data: Vec<Complex<f32>>) -> Result<Self, GridError> {
        let (n1, n2, n3) = dims;
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(GridError::EmptyDims(dims));
        }
        if data.len() != n1 * n2 * n3 {
            return Err(GridError::DimsMismatch {
                dims,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims3) -> Self {
        let (n1, n2, n3) = dims;
        Self {
            dims,
            data: vec![Complex::new(0.0, 0.0); n1 * n2 * n3],
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let (_, n2, n3) = self.dims;
        (i * n2 + j) * n3 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex<f32> {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn data(&self) -> &[Complex<f32>] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Complex<f32>] {
        &mut self.data
    }

    /// Real part as a [`Grid3`].
    pub fn real(&self) -> Grid3 {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    /// Largest |imaginary part| over the grid; near zero for transforms of
    /// Hermitian-symmetric spectra.
    pub fn max_abs_imag(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, c| m.max(c.im.abs()))
    }

    /// Checks `F[h] == conj(F[-h])` with periodic index wrap.
    pub fn is_hermitian(&self, tol: f32) -> bool {
        let (n1, n2, n3) = self.dims;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let a = self.get(i, j, k);
                    let b = self.get((n1 - i) % n1, (n2 - j) % n2, (n3 - k) % n3);
                    if (a - b.conj()).norm() > tol {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Orthorhombic unit cell; edge lengths in Angstroms, angles fixed at 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitCell {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl UnitCell {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, GridError> {
        if a > 0.0 && b > 0.0 && c > 0.0 {
            Ok(Self { a, b, c })
        } else {
            Err(GridError::BadCell(a, b, c))
        }
    }

    pub fn volume(&self) -> f64 {
        self.a * self.b * self.c
    }

    pub fn edge(&self, axis: usize) -> f64 {
        [self.a, self.b, self.c][axis]
    }
}

/// Resolution of the `(h, k, l)` reflection in Angstroms:
/// `1/d^2 = h^2/a^2 + k^2/b^2 + l^2/c^2`.
pub fn d_spacing(h: i32, k: i32, l: i32, cell: &UnitCell) -> Result<f64, GridError> {
    if h == 0 && k == 0 && l == 0 {
        return Err(GridError::ZeroMillerIndex);
    }
    let q = (h as f64 / cell.a).powi(2) + (k as f64 / cell.b).powi(2) + (l as f64 / cell.c).powi(2);
    Ok(1.0 / q.sqrt())
}

/// In-place 3d FFT over a complex buffer in row-major layout. Forward is
/// unnormalized; callers handle any scaling.
pub(crate) fn fft3_inplace<T: FftNum>(
    data: &mut [Complex<T>],
    dims: Dims3,
    direction: FftDirection,
    planner: &mut FftPlanner<T>,
) {
    let (n1, n2, n3) = dims;
    assert_eq!(data.len(), n1 * n2 * n3);

    // Axis 2 is contiguous: one multi-FFT call over the whole buffer.
    let fft_3 = planner.plan_fft(n3, direction);
    fft_3.process(data);

    // Axis 1: gather lanes into a contiguous scratch, transform, scatter back.
    let fft_2 = planner.plan_fft(n2, direction);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); n2 * n3];
    for i in 0..n1 {
        let base = i * n2 * n3;
        for k in 0..n3 {
            for j in 0..n2 {
                scratch[k * n2 + j] = data[base + j * n3 + k];
            }
        }
        fft_2.process(&mut scratch);
        for k in 0..n3 {
            for j in 0..n2 {
                data[base + j * n3 + k] = scratch[k * n2 + j];
            }
        }
    }

    // Axis 0.
    let fft_1 = planner.plan_fft(n1, direction);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); n1 * n2 * n3];
    for j in 0..n2 {
        for k in 0..n3 {
            let lane = (j * n3 + k) * n1;
            for i in 0..n1 {
                scratch[lane + i] = data[(i * n2 + j) * n3 + k];
            }
        }
    }
    fft_1.process(&mut scratch);
    for j in 0..n2 {
        for k in 0..n3 {
            let lane = (j * n3 + k) * n1;
            for i in 0..n1 {
                data[(i * n2 + j) * n3 + k] = scratch[lane + i];
            }
        }
    }
}

/// Forward 3d FFT of a real grid (unnormalized).
pub fn fft3(g: &Grid3) -> ComplexGrid3 {
    let mut data: Vec<Complex<f32>> = g.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft3_inplace(&mut data, g.dims, FftDirection::Forward, &mut planner);
    ComplexGrid3 { dims: g.dims, data }
}

/// Forward 3d FFT of a complex grid (unnormalized).
pub fn fft3_complex(g: &ComplexGrid3) -> ComplexGrid3 {
    let mut data = g.data.clone();
    let mut planner = FftPlanner::new();
    fft3_inplace(&mut data, g.dims, FftDirection::Forward, &mut planner);
    ComplexGrid3 { dims: g.dims, data }
}

/// Inverse 3d FFT; divides by `N1*N2*N3` so `ifft3(fft3(g))` returns `g`.
pub fn ifft3(g: &ComplexGrid3) -> ComplexGrid3 {
    let mut data = g.data.clone();
    let mut planner = FftPlanner::new();
    fft3_inplace(&mut data, g.dims, FftDirection::Inverse, &mut planner);
    let scale = 1.0 / data.len() as f32;
    for c in &mut data {
        *c *= scale;
    }
    ComplexGrid3 { dims: g.dims, data }
}

/// Maximum grid edge accepted by [`dft3_reference`].
pub const DFT_REFERENCE_MAX_AXIS: usize = 16;

/// Brute-force triple-sum DFT with `f64` accumulation, same convention as
/// [`fft3`]. Test oracle only; rejects grids above 16 per axis.
pub fn dft3_reference(g: &Grid3) -> Result<ComplexGrid3, GridError> {
    let (n1, n2, n3) = g.dims;
    if n1 > DFT_REFERENCE_MAX_AXIS || n2 > DFT_REFERENCE_MAX_AXIS || n3 > DFT_REFERENCE_MAX_AXIS {
        return Err(GridError::OracleTooLarge {
            max: DFT_REFERENCE_MAX_AXIS,
            got: g.dims,
        });
    }
    let twiddle = |n: usize| -> Vec<Complex<f64>> {
        (0..n * n)
            .map(|hn| {
                let (h, i) = (hn / n, hn % n);
                let phi = -2.0 * std::f64::consts::PI * (h * i % n) as f64 / n as f64;
                Complex::new(phi.cos(), phi.sin())
            })
            .collect()
    };
    let (t1, t2, t3) = (twiddle(n1), twiddle(n2), twiddle(n3));
    let mut out = Vec::with_capacity(g.len());
    for h in 0..n1 {
        for k in 0..n2 {
            for l in 0..n3 {
                let mut acc = Complex::new(0.0f64, 0.0);
                for i in 0..n1 {
                    let w1 = t1[h * n1 + i];
                    for j in 0..n2 {
                        let w12 = w1 * t2[k * n2 + j];
                        for m in 0..n3 {
                            let v = g.data[(i * n2 + j) * n3 + m] as f64;
                            acc += w12 * t3[l * n3 + m] * v;
                        }
                    }
                }
                out.push(Complex::new(acc.re as f32, acc.im as f32));
            }
        }
    }
    Ok(ComplexGrid3 {
        dims: g.dims,
        data: out,
    })
}

/// `out[i,j,k] = g[(N1-i)%N1, (N2-j)%N2, (N3-k)%N3]`; an involution.
pub fn inverse_shift(g: &Grid3) -> Grid3 {
    let (n1, n2, n3) = g.dims;
    Grid3::from_fn(g.dims, |i, j, k| {
        g.data[(((n1 - i) % n1) * n2 + (n2 - j) % n2) * n3 + (n3 - k) % n3]
    })
}

/// Scale by `1/max(|g|)` so values land in `[-1, 1]`; zero grids pass through.
pub fn normalize_unit_range(g: &Grid3) -> Grid3 {
    let m = g.max_abs();
    if m == 0.0 {
        return g.clone();
    }
    Grid3 {
        dims: g.dims,
        data: g.data.iter().map(|&v| v / m).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: Dims3, seed: u64) -> Grid3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n1, n2, n3) = dims;
        Grid3::new(
            dims,
            (0..n1 * n2 * n3)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn rel_err(a: &ComplexGrid3, b: &ComplexGrid3) -> f32 {
        let scale = b.data().iter().fold(0.0f32, |m, c| m.max(c.norm()));
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0f32, |m, (x, y)| m.max((x - y).norm()));
        diff / scale.max(1e-30)
    }

    #[test]
    fn fft_constant_grid_is_dc_only() {
        let g = Grid3::new((4, 4, 4), vec![1.0; 64]).unwrap();
        let f = fft3(&g);
        assert!((f.get(0, 0, 0) - Complex::new(64.0, 0.0)).norm() < 1e-4);
        for (i, c) in f.data().iter().enumerate() {
            if i != 0 {
                assert!(c.norm() < 1e-4, "entry {i} = {c}");
            }
        }
    }

    #[test]
    fn fft_delta_is_flat() {
        let mut g = Grid3::zeros((4, 4, 4));
        g.data_mut()[0] = 1.0;
        let f = fft3(&g);
        for c in f.data() {
            assert!((c - Complex::new(1.0, 0.0)).norm() < 1e-5);
        }
    }

    #[test]
    fn fft_matches_reference_dft_on_random_8cube() {
        let g = random_grid((8, 8, 8), 17);
        let fast = fft3(&g);
        let slow = dft3_reference(&g).unwrap();
        assert!(rel_err(&fast, &slow) <= 1e-5);
    }

    #[test]
    fn reference_dft_delta_and_constant() {
        let mut delta = Grid3::zeros((2, 2, 2));
        delta.data_mut()[0] = 1.0;
        let f = dft3_reference(&delta).unwrap();
        for c in f.data() {
            assert!((c - Complex::new(1.0, 0.0)).norm() < 1e-6);
        }

        let ones = Grid3::new((2, 2, 2), vec![1.0; 8]).unwrap();
        let f = dft3_reference(&ones).unwrap();
        assert!((f.get(0, 0, 0) - Complex::new(8.0, 0.0)).norm() < 1e-6);
        for (i, c) in f.data().iter().enumerate() {
            if i != 0 {
                assert!(c.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn reference_dft_cross_checks_both_directions() {
        let g = random_grid((4, 4, 4), 3);
        let slow = dft3_reference(&g).unwrap();
        let fast = fft3(&g);
        assert!(rel_err(&fast, &slow) <= 1e-6);
        // Inverse direction: ifft of the reference spectrum recovers the grid.
        let back = ifft3(&slow);
        for (x, &v) in back.data().iter().zip(g.data()) {
            assert!((x.re - v).abs() < 1e-5 && x.im.abs() < 1e-5);
        }
    }

    #[test]
    fn reference_dft_rejects_large_grids() {
        let g = Grid3::zeros((17, 2, 2));
        assert!(matches!(
            dft3_reference(&g),
            Err(GridError::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn inverse_shift_small_cases() {
        // 2x2x2: every index is its own mirror.
        let g = random_grid((2, 2, 2), 5);
        assert_eq!(inverse_shift(&g), g);

        let g = Grid3::new((3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(inverse_shift(&g).data(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn inverse_shift_is_involution() {
        let g = random_grid((4, 4, 4), 11);
        assert_eq!(inverse_shift(&inverse_shift(&g)), g);
    }

    #[test]
    fn normalize_scales_by_max_abs() {
        let g = Grid3::new((2, 1, 1), vec![2.0, -4.0]).unwrap();
        assert_eq!(normalize_unit_range(&g).data(), &[0.5, -1.0]);

        let z = Grid3::zeros((3, 3, 3));
        assert_eq!(normalize_unit_range(&z), z);
    }

    #[test]
    fn d_spacing_examples() {
        let cell = UnitCell::new(10.0, 10.0, 10.0).unwrap();
        assert!((d_spacing(1, 0, 0, &cell).unwrap() - 10.0).abs() < 1e-12);
        assert!((d_spacing(2, 0, 0, &cell).unwrap() - 5.0).abs() < 1e-12);
        let d111 = d_spacing(1, 1, 1, &cell).unwrap();
        assert!((d111 - 10.0 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            d_spacing(0, 0, 0, &cell),
            Err(GridError::ZeroMillerIndex)
        ));
    }

    #[test]
    fn grid_constructor_validates_dims() {
        assert!(Grid3::new((2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Grid3::new((0, 2, 2), vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn roundtrip_ifft_fft(seed in 0u64..1000, n1 in 1usize..7, n2 in 1usize..7, n3 in 1usize..7) {
            let g = random_grid((n1, n2, n3), seed);
            let back = ifft3(&fft3(&g));
            let scale = g.max_abs().max(1e-6);
            for (c, &v) in back.data().iter().zip(g.data()) {
                prop_assert!((c.re - v).abs() / scale <= 1e-5);
                prop_assert!(c.im.abs() / scale <= 1e-5);
            }
        }

        #[test]
        fn fft_of_real_grid_is_hermitian(seed in 0u64..1000, n1 in 1usize..7, n2 in 1usize..7, n3 in 1usize..7) {
            let g = random_grid((n1, n2, n3), seed);
            let f = fft3(&g);
            let tol = 1e-4 * (g.len() as f32).max(1.0);
            prop_assert!(f.is_hermitian(tol));
        }

        #[test]
        fn fft_matches_reference_on_small_grids(seed in 0u64..1000, n1 in 1usize..9, n2 in 1usize..9, n3 in 1usize..9) {
            let g = random_grid((n1, n2, n3), seed);
            let fast = fft3(&g);
            let slow = dft3_reference(&g).unwrap();
            prop_assert!(rel_err(&fast, &slow) <= 1e-5);
        }

        #[test]
        fn inverse_shift_preserves_value_multiset(seed in 0u64..1000, n in 1usize..6) {
            let g = random_grid((n, n, n), seed);
            let s = inverse_shift(&g);
            let mut a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = s.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalized_values_lie_in_unit_range(seed in 0u64..1000, n in 1usize..6) {
            let g = random_grid((n, n, n), seed);
            let out = normalize_unit_range(&g);
            for &v in out.data() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
