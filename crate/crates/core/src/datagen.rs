//! Procedural dataset generation: sample toy multi-residue molecules from a
//! fixed template library, fit/center/reindex unit cells, render Patterson,
//! density, and per-residue partial-structure maps, and store shape-binned
//! dataset files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{normalize_unit_range, Dims3, Grid3, UnitCell};
use crate::io::{FieldReader, FieldWriter, IoError};
use crate::util::{fnv1a64, par_map_indexed, substream_rng};
use crate::xtal::{
    density_from_sf, grid_dims_for, patterson_from_sf, structure_factors, Atom, Element, Molecule,
    ResidueSpan, XtalError,
};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("placement retry budget exhausted after {0} attempts")]
    RetryBudget(usize),
    #[error("unknown residue template id {0}")]
    UnknownTemplate(u32),
    #[error("fixed cell violates the {min_contact} A contact constraint (min {got:.3} A)")]
    FixedCellContact { min_contact: f64, got: f64 },
    #[error("residue count must be at least 1")]
    ZeroResidues,
    #[error("template library is empty")]
    NoTemplates,
    #[error("examples in one dataset must share residue count")]
    MixedResidueCount,
    #[error(transparent)]
    Xtal(#[from] XtalError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Rigid residue template: element and Angstrom offsets from the centroid,
/// in a fixed standardized conformation.
#[derive(Debug, Clone)]
pub struct ResidueTemplate {
    pub id: u32,
    pub atoms: Vec<(Element, [f64; 3])>,
}

impl ResidueTemplate {
    fn new(id: u32, atoms: Vec<(Element, [f64; 3])>) -> Self {
        // Re-center so the stored offsets have an exactly-zero mean.
        let n = atoms.len() as f64;
        let mut c = [0.0f64; 3];
        for (_, p) in &atoms {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        let atoms = atoms
            .into_iter()
            .map(|(e, p)| (e, [p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
            .collect();
        Self { id, atoms }
    }

    /// Largest distance from the centroid to any atom.
    pub fn radius(&self) -> f64 {
        self.atoms
            .iter()
            .map(|(_, p)| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// The eight toy residues shipped with the crate. Each is a small rigid
/// arrangement of C/N/O/S sites with internal spacing comfortably above the
/// molecule-level 2.0 A contact floor.
pub fn builtin_templates() -> &'static [ResidueTemplate] {
    static TEMPLATES: OnceLock<Vec<ResidueTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        use Element::{C, N, O, S};
        let t = 0.8839; // tetrahedron vertex scale for a 2.5 A edge
        vec![
            // Planar triangle.
            ResidueTemplate::new(
                0,
                vec![
                    (C, [-1.2, -0.7, 0.0]),
                    (N, [1.2, -0.7, 0.0]),
                    (O, [0.0, 1.4, 0.0]),
                ],
            ),
            // Tetrahedron.
            ResidueTemplate::new(
                1,
                vec![
                    (C, [t, t, t]),
                    (C, [t, -t, -t]),
                    (N, [-t, t, -t]),
                    (O, [-t, -t, t]),
                ],
            ),
            // Planar square.
            ResidueTemplate::new(
                2,
                vec![
                    (C, [1.2, 1.2, 0.0]),
                    (N, [1.2, -1.2, 0.0]),
                    (C, [-1.2, 1.2, 0.0]),
                    (O, [-1.2, -1.2, 0.0]),
                ],
            ),
            // Square pyramid.
            ResidueTemplate::new(
                3,
                vec![
                    (C, [1.15, 1.15, -0.5]),
                    (C, [1.15, -1.15, -0.5]),
                    (C, [-1.15, 1.15, -0.5]),
                    (N, [-1.15, -1.15, -0.5]),
                    (S, [0.0, 0.0, 2.0]),
                ],
            ),
            // Trigonal bipyramid.
            ResidueTemplate::new(
                4,
                vec![
                    (N, [1.5, 0.0, 0.0]),
                    (C, [-0.75, 1.3, 0.0]),
                    (C, [-0.75, -1.3, 0.0]),
                    (O, [0.0, 0.0, 1.9]),
                    (S, [0.0, 0.0, -1.9]),
                ],
            ),
            // Octahedron.
            ResidueTemplate::new(
                5,
                vec![
                    (C, [1.6, 0.0, 0.0]),
                    (C, [-1.6, 0.0, 0.0]),
                    (N, [0.0, 1.6, 0.0]),
                    (N, [0.0, -1.6, 0.0]),
                    (O, [0.0, 0.0, 1.6]),
                    (S, [0.0, 0.0, -1.6]),
                ],
            ),
            // Triangular prism.
            ResidueTemplate::new(
                6,
                vec![
                    (C, [1.35, 0.0, 1.1]),
                    (C, [-0.675, 1.169, 1.1]),
                    (C, [-0.675, -1.169, 1.1]),
                    (N, [1.35, 0.0, -1.1]),
                    (O, [-0.675, 1.169, -1.1]),
                    (O, [-0.675, -1.169, -1.1]),
                ],
            ),
            // Centered octahedron.
            ResidueTemplate::new(
                7,
                vec![
                    (C, [0.0, 0.0, 0.0]),
                    (C, [2.3, 0.0, 0.0]),
                    (C, [-2.3, 0.0, 0.0]),
                    (N, [0.0, 2.3, 0.0]),
                    (O, [0.0, -2.3, 0.0]),
                    (O, [0.0, 0.0, 2.3]),
                    (S, [0.0, 0.0, -2.3]),
                ],
            ),
        ]
    })
}

/// Molecule in Cartesian Angstrom coordinates, before a unit cell exists.
#[derive(Debug, Clone)]
pub struct CartMolecule {
    pub atoms: Vec<(Element, [f64; 3])>,
    pub residue_spans: Vec<ResidueSpan>,
}

/// Hard floor on any intra-molecule atom pair distance.
pub const MIN_INTRA_DISTANCE: f64 = 2.0;
/// Consecutive residue centroid spacing range in Angstroms.
pub const CHAIN_SPACING: (f64, f64) = (3.0, 4.5);
const PLACEMENT_RETRIES: usize = 100;

fn rotation_from_rng(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Uniform rotation via a uniform unit quaternion.
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn unit_vector_from_rng(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn rotate(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Samples a `j`-residue chain: templates picked uniformly, consecutive
/// centroids spaced 3.0-4.5 A in random directions, one random rotation per
/// residue. Placements with any atom pair below 2.0 A are re-drawn, up to
/// 100 attempts.
pub fn sample_molecule(
    rng: &mut ChaCha8Rng,
    templates: &[ResidueTemplate],
    j: usize,
) -> Result<CartMolecule, DatagenError> {
    if j == 0 {
        return Err(DatagenError::ZeroResidues);
    }
    if templates.is_empty() {
        return Err(DatagenError::NoTemplates);
    }
    'attempt: for _ in 0..PLACEMENT_RETRIES {
        let mut atoms: Vec<(Element, [f64; 3])> = Vec::new();
        let mut spans = Vec::with_capacity(j);
        let mut centroid = [0.0f64; 3];
        for r in 0..j {
            let t = &templates[rng.random_range(0..templates.len())];
            let rot = rotation_from_rng(rng);
            if r > 0 {
                let dir = unit_vector_from_rng(rng);
                let step: f64 = rng.random_range(CHAIN_SPACING.0..CHAIN_SPACING.1);
                for a in 0..3 {
                    centroid[a] += dir[a] * step;
                }
            }
            let start = atoms.len();
            for &(el, off) in &t.atoms {
                let p = rotate(&rot, off);
                atoms.push((
                    el,
                    [p[0] + centroid[0], p[1] + centroid[1], p[2] + centroid[2]],
                ));
            }
            spans.push(ResidueSpan {
                template_id: t.id,
                start,
                end: atoms.len(),
            });
        }
        for i in 0..atoms.len() {
            for k in (i + 1)..atoms.len() {
                if dist2(atoms[i].1, atoms[k].1) < MIN_INTRA_DISTANCE * MIN_INTRA_DISTANCE {
                    continue 'attempt;
                }
            }
        }
        return Ok(CartMolecule {
            atoms,
            residue_spans: spans,
        });
    }
    Err(DatagenError::RetryBudget(PLACEMENT_RETRIES))
}

/// Minimum distance between any atom and any periodic image of any atom over
/// the 27-neighbor shell. In-cell pairs (zero shift) are intra-molecular and
/// not counted. Self images make every cell edge a contact, so a finite
/// answer always exists.
pub fn min_image_contact(atoms: &[[f64; 3]], cell: &UnitCell) -> f64 {
    let edges = [cell.a, cell.b, cell.c];
    let mut best = edges.iter().cloned().fold(f64::INFINITY, f64::min);
    for i in 0..atoms.len() {
        for j in i..atoms.len() {
            for sx in -1i32..=1 {
                for sy in -1i32..=1 {
                    for sz in -1i32..=1 {
                        if sx == 0 && sy == 0 && sz == 0 {
                            continue;
                        }
                        let shifted = [
                            atoms[j][0] + sx as f64 * edges[0],
                            atoms[j][1] + sy as f64 * edges[1],
                            atoms[j][2] + sz as f64 * edges[2],
                        ];
                        best = best.min(dist2(atoms[i], shifted).sqrt());
                    }
                }
            }
        }
    }
    best
}

/// Expansion step for cell fitting, matching the output grid spacing.
pub const CELL_STEP: f64 = 0.5;

/// Per-axis lower bound on the cell so the molecule both fits and can have
/// its electron-weighted centroid moved to the cell center without wrapping
/// across a face: twice the largest reach from the centroid.
fn centering_floor(mol: &CartMolecule, lo: &[f64; 3], hi: &[f64; 3]) -> [f64; 3] {
    let total: f64 = mol.atoms.iter().map(|(el, _)| el.electron_count()).sum();
    let mut centroid = [0.0f64; 3];
    for (el, p) in &mol.atoms {
        let w = el.electron_count() / total;
        for a in 0..3 {
            centroid[a] += w * p[a];
        }
    }
    let mut floor = [0.0f64; 3];
    for a in 0..3 {
        floor[a] = 2.0 * (centroid[a] - lo[a]).max(hi[a] - centroid[a]);
    }
    floor
}

/// Fits a minimal orthorhombic cell: start from the per-axis coordinate
/// ranges (widened where needed so later mass-centering cannot wrap the
/// molecule) and adjust in 0.5 A steps until the smallest periodic-image
/// contact reaches `min_contact`, then shrink each axis to its own minimum.
/// Atoms come back in fractional coordinates of the final cell.
pub fn fit_unit_cell(mol: &CartMolecule, min_contact: f64) -> (Molecule, UnitCell) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, p) in &mol.atoms {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let anchored: Vec<[f64; 3]> = mol
        .atoms
        .iter()
        .map(|(_, p)| [p[0] - lo[0], p[1] - lo[1], p[2] - lo[2]])
        .collect();
    let floor = centering_floor(mol, &lo, &hi);

    let contact_ok = |edges: &[f64; 3]| -> bool {
        let cell = UnitCell {
            a: edges[0],
            b: edges[1],
            c: edges[2],
        };
        min_image_contact(&anchored, &cell) >= min_contact
    };

    // Grow all axes together until the contact constraint holds, then walk
    // each axis back down; shrinking one axis never relaxes the others, so
    // the result is minimal per axis on the `floor + k*step` lattice.
    let mut edges = [
        floor[0].max(CELL_STEP),
        floor[1].max(CELL_STEP),
        floor[2].max(CELL_STEP),
    ];
    while !contact_ok(&edges) {
        for e in &mut edges {
            *e += CELL_STEP;
        }
    }
    for a in 0..3 {
        loop {
            let shrunk = edges[a] - CELL_STEP;
            if shrunk < floor[a] || shrunk < CELL_STEP * 0.5 {
                break;
            }
            let mut candidate = edges;
            candidate[a] = shrunk;
            if !contact_ok(&candidate) {
                break;
            }
            edges = candidate;
        }
    }

    let cell = UnitCell {
        a: edges[0],
        b: edges[1],
        c: edges[2],
    };
    // The corner atom can land on frac 1.0 exactly when an edge equals the
    // extent; clamp just below so coordinates stay contiguous in [0, 1).
    let top = 1.0 - f64::EPSILON;
    let atoms = mol
        .atoms
        .iter()
        .zip(&anchored)
        .map(|((el, _), p)| Atom {
            element: *el,
            frac: [
                (p[0] / cell.a).clamp(0.0, top),
                (p[1] / cell.b).clamp(0.0, top),
                (p[2] / cell.c).clamp(0.0, top),
            ],
            b_iso: crate::xtal::DEFAULT_B_ISO,
        })
        .collect();
    (
        Molecule {
            atoms,
            residue_spans: mol.residue_spans.clone(),
        },
        cell,
    )
}

/// Centers the electron-count-weighted centroid at fractional
/// `(0.5, 0.5, 0.5)` and reorders axes so `a >= b >= c`. Coordinates are
/// permuted consistently; a no-op input comes back bit-identical.
pub fn canonicalize(mol: &Molecule, cell: &UnitCell) -> (Molecule, UnitCell) {
    let mut order = [0usize, 1, 2];
    let edges = [cell.a, cell.b, cell.c];
    order.sort_by(|&x, &y| edges[y].partial_cmp(&edges[x]).unwrap().then(x.cmp(&y)));

    let permute = order != [0, 1, 2];
    let new_cell = UnitCell {
        a: edges[order[0]],
        b: edges[order[1]],
        c: edges[order[2]],
    };

    let mut atoms: Vec<Atom> = mol
        .atoms
        .iter()
        .map(|at| {
            let frac = if permute {
                [at.frac[order[0]], at.frac[order[1]], at.frac[order[2]]]
            } else {
                at.frac
            };
            Atom {
                element: at.element,
                frac,
                b_iso: at.b_iso,
            }
        })
        .collect();

    let total: f64 = atoms.iter().map(|a| a.element.electron_count()).sum();
    let mut centroid = [0.0f64; 3];
    for at in &atoms {
        let w = at.element.electron_count() / total;
        for a in 0..3 {
            centroid[a] += w * at.frac[a];
        }
    }
    let shift = [0.5 - centroid[0], 0.5 - centroid[1], 0.5 - centroid[2]];
    if shift.iter().any(|s| s.abs() > 1e-12) {
        for at in &mut atoms {
            for a in 0..3 {
                at.frac[a] = (at.frac[a] + shift[a]).rem_euclid(1.0);
            }
        }
    }
    (
        Molecule {
            atoms,
            residue_spans: mol.residue_spans.clone(),
        },
        new_cell,
    )
}

/// Standalone density map of one template: standardized orientation,
/// centroid at the cell center, synthesized to `d_min` and normalized.
pub fn render_partial(
    template_id: u32,
    templates: &[ResidueTemplate],
    cell: &UnitCell,
    dims: Dims3,
    d_min: f64,
) -> Result<Grid3, DatagenError> {
    let t = templates
        .iter()
        .find(|t| t.id == template_id)
        .ok_or(DatagenError::UnknownTemplate(template_id))?;
    let atoms = t
        .atoms
        .iter()
        .map(|&(el, off)| Atom {
            element: el,
            frac: [
                (0.5 + off[0] / cell.a).rem_euclid(1.0),
                (0.5 + off[1] / cell.b).rem_euclid(1.0),
                (0.5 + off[2] / cell.c).rem_euclid(1.0),
            ],
            b_iso: crate::xtal::DEFAULT_B_ISO,
        })
        .collect();
    let mol = Molecule {
        atoms,
        residue_spans: vec![ResidueSpan {
            template_id,
            start: 0,
            end: t.atoms.len(),
        }],
    };
    let sf = structure_factors(&mol, cell, d_min)?;
    Ok(normalize_unit_range(&density_from_sf(&sf, dims)?))
}

/// One training record: Patterson input, density target, J partial maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub patterson: Grid3,
    pub density: Grid3,
    pub partials: Vec<Grid3>,
    pub cell: UnitCell,
    pub template_ids: Vec<u32>,
}

impl Example {
    pub fn dims(&self) -> Dims3 {
        self.patterson.dims()
    }
}

/// Generation hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenParams {
    pub residues: usize,
    pub d_min: f64,
    pub min_contact: f64,
    pub oversampling: f64,
    pub fixed_cell: Option<(f64, f64, f64)>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            residues: 2,
            d_min: 1.5,
            min_contact: 2.75,
            oversampling: 3.0,
            fixed_cell: None,
        }
    }
}

/// Builds one example from its own seed: sample, fit or adopt a cell,
/// canonicalize, synthesize all maps, normalize. Contact failures surface as
/// errors; callers skip the example.
pub fn build_example(seed: u64, id: String, params: &GenParams) -> Result<Example, DatagenError> {
    let templates = builtin_templates();
    let mut rng = substream_rng(seed, "molecule", 0);
    let cart = sample_molecule(&mut rng, templates, params.residues)?;

    let (mol, cell) = match params.fixed_cell {
        None => fit_unit_cell(&cart, params.min_contact),
        Some((a, b, c)) => {
            let cell = UnitCell { a, b, c };
            // Packing check on contiguous coordinates: wrapping scrambles
            // which (pair, shift) combination is intra-molecular, so the
            // image oracle only means crystal contact before any wrap.
            let contiguous: Vec<[f64; 3]> = cart.atoms.iter().map(|&(_, p)| p).collect();
            let got = min_image_contact(&contiguous, &cell);
            if got < params.min_contact {
                return Err(DatagenError::FixedCellContact {
                    min_contact: params.min_contact,
                    got,
                });
            }
            let atoms = cart
                .atoms
                .iter()
                .map(|&(el, p)| Atom {
                    element: el,
                    frac: [
                        (p[0] / cell.a).rem_euclid(1.0),
                        (p[1] / cell.b).rem_euclid(1.0),
                        (p[2] / cell.c).rem_euclid(1.0),
                    ],
                    b_iso: crate::xtal::DEFAULT_B_ISO,
                })
                .collect();
            (
                Molecule {
                    atoms,
                    residue_spans: cart.residue_spans.clone(),
                },
                cell,
            )
        }
    };
    let (mol, cell) = canonicalize(&mol, &cell);

    let dims = grid_dims_for(&cell, params.d_min, params.oversampling);
    let sf = structure_factors(&mol, &cell, params.d_min)?;
    let density = normalize_unit_range(&density_from_sf(&sf, dims)?);
    let patterson = normalize_unit_range(&patterson_from_sf(&sf, dims)?);

    let template_ids: Vec<u32> = mol.residue_spans.iter().map(|s| s.template_id).collect();
    let partials = template_ids
        .iter()
        .map(|&tid| render_partial(tid, templates, &cell, dims, params.d_min))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Example {
        id,
        patterson,
        density,
        partials,
        cell,
        template_ids,
    })
}

/// Generates `n` examples from a root seed, skipping contact failures. The
/// result is a pure function of `(seed, params, n)` regardless of the worker
/// count.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    params: &GenParams,
) -> Result<Vec<Example>, DatagenError> {
    let mut out = Vec::with_capacity(n);
    let mut next_index = 0u64;
    while out.len() < n {
        let chunk = (n - out.len()).max(8) + (n - out.len()) / 4;
        let results = par_map_indexed(chunk, |i| {
            let idx = next_index + i as u64;
            let ex_seed = crate::util::substream_seed(seed, "datagen", idx);
            build_example(ex_seed, format!("ex{idx:06}"), params)
        });
        for r in results {
            match r {
                Ok(ex) => {
                    if out.len() < n {
                        out.push(ex);
                    }
                }
                Err(DatagenError::RetryBudget(_)) | Err(DatagenError::FixedCellContact { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        next_index += chunk as u64;
        if next_index > 64 * n as u64 + 1024 {
            return Err(DatagenError::RetryBudget(next_index as usize));
        }
    }
    Ok(out)
}

/// Dataset directory manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub d_min: f64,
    pub oversampling: f64,
    pub min_contact: f64,
    pub seed: u64,
    pub bins: Vec<BinEntry>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinEntry {
    pub dims: [usize; 3],
    pub count: usize,
    pub path: String,
}

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 4] = b"CRYS";

/// In-memory dataset: manifest plus examples in bin order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub residues: usize,
    pub examples: Vec<Example>,
}

fn write_bin(
    path: &Path,
    dims: Dims3,
    residues: usize,
    examples: &[&Example],
) -> Result<(), IoError> {
    let mut w = FieldWriter::create(path)?;
    w.magic(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.u32(dims.0 as u32)?;
    w.u32(dims.1 as u32)?;
    w.u32(dims.2 as u32)?;
    w.u32(residues as u32)?;
    w.u32(examples.len() as u32)?;
    for ex in examples {
        w.str(&ex.id)?;
        for &tid in &ex.template_ids {
            w.u32(tid)?;
        }
        w.f64(ex.cell.a)?;
        w.f64(ex.cell.b)?;
        w.f64(ex.cell.c)?;
        w.f32_slice(ex.patterson.data())?;
        w.f32_slice(ex.density.data())?;
        for p in &ex.partials {
            w.f32_slice(p.data())?;
        }
    }
    w.finish()
}

fn read_map(
    r: &mut FieldReader<std::io::BufReader<std::fs::File>>,
    dims: Dims3,
    field: &str,
) -> Result<Grid3, IoError> {
    let n = dims.0 * dims.1 * dims.2;
    let data = r.f32_vec(n, field)?;
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(IoError::parse(
                r.file(),
                field,
                format!("value {v} at offset {i} outside [-1, 1]"),
            ));
        }
    }
    Grid3::new(dims, data).map_err(|e| IoError::parse(r.file(), field, e.to_string()))
}

fn read_bin(path: &Path, expect_dims: Dims3) -> Result<(usize, Vec<Example>), IoError> {
    let mut r = FieldReader::open(path)?;
    r.magic(DATASET_MAGIC, "magic")?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(IoError::parse(
            r.file(),
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let dims = (
        r.u32("dims[0]")? as usize,
        r.u32("dims[1]")? as usize,
        r.u32("dims[2]")? as usize,
    );
    if dims != expect_dims {
        return Err(IoError::parse(
            r.file(),
            "dims",
            format!("file dims {dims:?} do not match manifest {expect_dims:?}"),
        ));
    }
    if dims.0 % 4 != 0 || dims.1 % 4 != 0 || dims.2 % 4 != 0 {
        return Err(IoError::parse(
            r.file(),
            "dims",
            "dims must be multiples of 4",
        ));
    }
    let residues = r.u32("residues")? as usize;
    if residues == 0 {
        return Err(IoError::parse(r.file(), "residues", "must be at least 1"));
    }
    let count = r.u32("count")? as usize;
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let id = r.str(&format!("example[{i}].id"), 4096)?;
        let mut template_ids = Vec::with_capacity(residues);
        for j in 0..residues {
            template_ids.push(r.u32(&format!("example[{i}].template_ids[{j}]"))?);
        }
        let a = r.f64(&format!("example[{i}].cell.a"))?;
        let b = r.f64(&format!("example[{i}].cell.b"))?;
        let c = r.f64(&format!("example[{i}].cell.c"))?;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(IoError::parse(
                r.file(),
                &format!("example[{i}].cell"),
                "non-positive edge",
            ));
        }
        let patterson = read_map(&mut r, dims, &format!("example[{i}].patterson"))?;
        let density = read_map(&mut r, dims, &format!("example[{i}].density"))?;
        let mut partials = Vec::with_capacity(residues);
        for j in 0..residues {
            partials.push(read_map(
                &mut r,
                dims,
                &format!("example[{i}].partials[{j}]"),
            )?);
        }
        examples.push(Example {
            id,
            patterson,
            density,
            partials,
            cell: UnitCell { a, b, c },
            template_ids,
        });
    }
    r.expect_eof("eof")?;
    Ok((residues, examples))
}

/// Groups examples by dims into bins, drops bins smaller than `min_batch`,
/// and writes one `bin_<N1>x<N2>x<N3>.crys` per kept bin plus
/// `manifest.json`.
pub fn write_dataset(
    examples: &[Example],
    dir: &Path,
    seed: u64,
    params: &GenParams,
    min_batch: usize,
) -> Result<DatasetManifest, DatagenError> {
    let residues = params.residues;
    if examples
        .iter()
        .any(|e| e.template_ids.len() != residues || e.partials.len() != residues)
    {
        return Err(DatagenError::MixedResidueCount);
    }
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;

    let mut bins: BTreeMap<Dims3, Vec<&Example>> = BTreeMap::new();
    for ex in examples {
        bins.entry(ex.dims()).or_default().push(ex);
    }
    bins.retain(|_, v| v.len() >= min_batch.max(1));

    let mut entries = Vec::new();
    for (dims, members) in &bins {
        let name = format!("bin_{}x{}x{}.crys", dims.0, dims.1, dims.2);
        write_bin(&dir.join(&name), *dims, residues, members)?;
        entries.push(BinEntry {
            dims: [dims.0, dims.1, dims.2],
            count: members.len(),
            path: name,
        });
    }

    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        d_min: params.d_min,
        oversampling: params.oversampling,
        min_contact: params.min_contact,
        seed,
        bins: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, json.as_bytes()).map_err(|e| IoError::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatagenError> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| IoError::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| IoError::parse(&mpath.display().to_string(), "manifest", e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DatagenError::Io(IoError::parse(
            &mpath.display().to_string(),
            "version",
            format!("unsupported version {}", manifest.version),
        )));
    }
    let mut residues: Option<usize> = None;
    let mut examples = Vec::new();
    for bin in &manifest.bins {
        let (j, mut exs) = read_bin(
            &dir.join(&bin.path),
            (bin.dims[0], bin.dims[1], bin.dims[2]),
        )?;
        if exs.len() != bin.count {
            return Err(DatagenError::Io(IoError::parse(
                &bin.path,
                "count",
                format!(
                    "manifest lists {} examples, file holds {}",
                    bin.count,
                    exs.len()
                ),
            )));
        }
        match residues {
            None => residues = Some(j),
            Some(prev) if prev != j => return Err(DatagenError::MixedResidueCount),
            _ => {}
        }
        examples.append(&mut exs);
    }
    Ok(Dataset {
        manifest,
        residues: residues.unwrap_or(0),
        examples,
    })
}

/// 90/10 train/test split by stable id hash, so membership never depends on
/// dataset ordering.
pub fn train_test_split(examples: &[Example]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if fnv1a64(ex.id.as_bytes()) % 10 < 9 {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

/// Dataset path helper used by the CLI and tests.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
