//! Crystallography core: structure factors from atoms, electron-density and
//! Patterson-map synthesis, and the two equivalent Patterson paths.
//!
//! Atoms are point scatterers with `f_j` equal to the electron count, damped
//! by the isotropic factor `exp(-B s^2 / 4)` with `s = 1/d`. Synthesis places
//! coefficients on a wrapped frequency grid and evaluates the Fourier sum in
//! `f64` before narrowing to map precision.

use std::collections::BTreeMap;

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use thiserror::Error;

use crate::grid::{self, d_spacing, Dims3, Grid3, GridError, UnitCell};

#[derive(Debug, Error)]
pub enum XtalError {
    #[error("molecule has no atoms")]
    EmptyMolecule,
    #[error("resolution cutoff must be positive, got {0}")]
    BadResolution(f64),
    #[error("dims {dims:?} too small for reflections up to |h|=({0}, {1}, {2})", .hmax.0, .hmax.1, .hmax.2)]
    DimsTooSmall { dims: Dims3, hmax: (i32, i32, i32) },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Chemical elements supported by the toy scattering model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Element {
    C,
    N,
    O,
    S,
}

impl Element {
    /// Electron count, used directly as the scattering factor.
    pub fn electron_count(self) -> f64 {
        match self {
            Element::C => 6.0,
            Element::N => 7.0,
            Element::O => 8.0,
            Element::S => 16.0,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Element::C => 'C',
            Element::N => 'N',
            Element::O => 'O',
            Element::S => 'S',
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Element::C),
            1 => Some(Element::N),
            2 => Some(Element::O),
            3 => Some(Element::S),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Element::C => 0,
            Element::N => 1,
            Element::O => 2,
            Element::S => 3,
        }
    }
}

/// Default isotropic temperature factor in square Angstroms.
pub const DEFAULT_B_ISO: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    /// Fractional coordinates in `[0, 1)`.
    pub frac: [f64; 3],
    pub b_iso: f64,
}

/// Half-open span of atoms belonging to one residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidueSpan {
    pub template_id: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub residue_spans: Vec<ResidueSpan>,
}

impl Molecule {
    /// Fractional translation of every atom, wrapped back into `[0, 1)`.
    pub fn translated(&self, t: [f64; 3]) -> Molecule {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                element: a.element,
                frac: [
                    (a.frac[0] + t[0]).rem_euclid(1.0),
                    (a.frac[1] + t[1]).rem_euclid(1.0),
                    (a.frac[2] + t[2]).rem_euclid(1.0),
                ],
                b_iso: a.b_iso,
            })
            .collect();
        Molecule {
            atoms,
            residue_spans: self.residue_spans.clone(),
        }
    }

    /// Centrosymmetric image: `frac -> 1 - frac` (wrapped).
    pub fn mirrored(&self) -> Molecule {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                element: a.element,
                frac: [
                    (1.0 - a.frac[0]).rem_euclid(1.0),
                    (1.0 - a.frac[1]).rem_euclid(1.0),
                    (1.0 - a.frac[2]).rem_euclid(1.0),
                ],
                b_iso: a.b_iso,
            })
            .collect();
        Molecule {
            atoms,
            residue_spans: self.residue_spans.clone(),
        }
    }

    /// Sum of electron counts.
    pub fn total_electrons(&self) -> f64 {
        self.atoms.iter().map(|a| a.element.electron_count()).sum()
    }
}

/// Complex structure factors within a resolution cutoff, Hermitian by
/// construction.
#[derive(Debug, Clone)]
pub struct StructureFactorSet {
    pub cell: UnitCell,
    pub d_min: f64,
    entries: BTreeMap<(i32, i32, i32), Complex<f64>>,
}

impl StructureFactorSet {
    pub fn get(&self, h: i32, k: i32, l: i32) -> Option<Complex<f64>> {
        self.entries.get(&(h, k, l)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(i32, i32, i32), &Complex<f64>)> {
        self.entries.iter()
    }

    /// Largest |h|, |k|, |l| in the set.
    pub fn max_index(&self) -> (i32, i32, i32) {
        let mut m = (0, 0, 0);
        for &(h, k, l) in self.entries.keys() {
            m.0 = m.0.max(h.abs());
            m.1 = m.1.max(k.abs());
            m.2 = m.2.max(l.abs());
        }
        m
    }
}

/// Reflection indices kept for a cell and cutoff: the rectangular box
/// `|h| <= floor(a/d_min)` (etc.) culled to `d >= d_min`, plus `(0,0,0)`.
/// Only the canonical half is returned; mates follow by Hermitian symmetry.
fn half_space_indices(cell: &UnitCell, d_min: f64) -> Vec<(i32, i32, i32)> {
    let hmax = (cell.a / d_min).floor() as i32;
    let kmax = (cell.b / d_min).floor() as i32;
    let lmax = (cell.c / d_min).floor() as i32;
    let mut out = Vec::new();
    for h in -hmax..=hmax {
        for k in -kmax..=kmax {
            for l in -lmax..=lmax {
                if (h, k, l) <= (0, 0, 0) {
                    continue; // keep one of each Hermitian pair; skip DC
                }
                let d = d_spacing(h, k, l, cell).expect("nonzero index");
                if d >= d_min {
                    out.push((h, k, l));
                }
            }
        }
    }
    out
}

/// `F(h,k,l) = sum_j f_j exp(-B_j s^2/4) exp(2 pi i (h x_j + k y_j + l z_j))`.
pub fn structure_factors(
    mol: &Molecule,
    cell: &UnitCell,
    d_min: f64,
) -> Result<StructureFactorSet, XtalError> {
    if mol.atoms.is_empty() {
        return Err(XtalError::EmptyMolecule);
    }
    if d_min <= 0.0 {
        return Err(XtalError::BadResolution(d_min));
    }
    let mut entries = BTreeMap::new();

    let f000: f64 = mol.atoms.iter().map(|a| a.element.electron_count()).sum();
    entries.insert((0, 0, 0), Complex::new(f000, 0.0));

    for (h, k, l) in half_space_indices(cell, d_min) {
        let d = d_spacing(h, k, l, cell).expect("nonzero index");
        let s2 = 1.0 / (d * d);
        let mut f = Complex::new(0.0f64, 0.0);
        for a in &mol.atoms {
            let amp = a.element.electron_count() * (-a.b_iso * s2 / 4.0).exp();
            let phase = 2.0
                * std::f64::consts::PI
                * (h as f64 * a.frac[0] + k as f64 * a.frac[1] + l as f64 * a.frac[2]);
            f += Complex::new(amp * phase.cos(), amp * phase.sin());
        }
        entries.insert((h, k, l), f);
        entries.insert((-h, -k, -l), f.conj());
    }

    Ok(StructureFactorSet {
        cell: *cell,
        d_min,
        entries,
    })
}

fn wrap(h: i32, n: usize) -> usize {
    (h.rem_euclid(n as i32)) as usize
}

fn check_fit(dims: Dims3, hmax: (i32, i32, i32)) -> Result<(), XtalError> {
    let fits = |h: i32, n: usize| 2 * (h as usize) < n;
    if fits(hmax.0, dims.0) && fits(hmax.1, dims.1) && fits(hmax.2, dims.2) {
        Ok(())
    } else {
        Err(XtalError::DimsTooSmall { dims, hmax })
    }
}

/// Evaluates `(1/V) sum_hkl coeff(h,k,l) exp(-2 pi i (h x + k y + l z))` on
/// the grid via an f64 FFT of the placed coefficients.
fn synthesize(
    coeffs: impl Iterator<Item = ((i32, i32, i32), Complex<f64>)>,
    dims: Dims3,
    volume: f64,
) -> Grid3 {
    let (n1, n2, n3) = dims;
    let mut placed = vec![Complex::new(0.0f64, 0.0); n1 * n2 * n3];
    for ((h, k, l), c) in coeffs {
        placed[(wrap(h, n1) * n2 + wrap(k, n2)) * n3 + wrap(l, n3)] += c;
    }
    let mut planner = FftPlanner::new();
    grid::fft3_inplace(&mut placed, dims, FftDirection::Forward, &mut planner);
    let inv_v = 1.0 / volume;
    Grid3::new(dims, placed.iter().map(|c| (c.re * inv_v) as f32).collect())
        .expect("dims match placement")
}

/// Electron density over the cell from complex structure factors. The result
/// is real up to numerical tolerance because the input set is Hermitian.
pub fn density_from_sf(sf: &StructureFactorSet, dims: Dims3) -> Result<Grid3, XtalError> {
    check_fit(dims, sf.max_index())?;
    Ok(synthesize(
        sf.iter().map(|(&hkl, &f)| (hkl, f)),
        dims,
        sf.cell.volume(),
    ))
}

/// Patterson map: synthesis with squared amplitudes and zero phases. Output
/// is real and centrosymmetric.
pub fn patterson_from_sf(sf: &StructureFactorSet, dims: Dims3) -> Result<Grid3, XtalError> {
    check_fit(dims, sf.max_index())?;
    Ok(synthesize(
        sf.iter()
            .map(|(&hkl, &f)| (hkl, Complex::new(f.norm_sqr(), 0.0))),
        dims,
        sf.cell.volume(),
    ))
}

/// Patterson map as the circular autocorrelation of a density grid:
/// `Re(ifft3(fft3(e) .* fft3(inverse_shift(e))))`.
pub fn patterson_from_density(e: &Grid3) -> Grid3 {
    let fe = grid::fft3(e);
    let fe_shift = grid::fft3(&grid::inverse_shift(e));
    let mut prod = crate::grid::ComplexGrid3::zeros(e.dims());
    for ((p, a), b) in prod
        .data_mut()
        .iter_mut()
        .zip(fe.data())
        .zip(fe_shift.data())
    {
        *p = a * b;
    }
    grid::ifft3(&prod).real()
}

/// Map dims for a cell at the given cutoff and oversampling: spacing is
/// `d_min / oversampling`, each axis rounded up to a multiple of 4.
pub fn grid_dims_for(cell: &UnitCell, d_min: f64, oversampling: f64) -> Dims3 {
    let spacing = d_min / oversampling;
    let round4 = |x: f64| -> usize {
        let n = (x / spacing).ceil() as usize;
        n.div_ceil(4).max(1) * 4
    };
    (round4(cell.a), round4(cell.b), round4(cell.c))
}
