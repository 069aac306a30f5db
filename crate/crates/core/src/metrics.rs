//! Pearson correlation, amplitude-weighted mean phase error, and
//! resolution-shell summaries.
//!
//! Phase comparison transforms both maps, keeps reflections with
//! `d >= d_min` minus the DC term and one of each Hermitian pair, and
//! weights each angular difference by the reference amplitude. No origin
//! search is performed: the dataset pins the origin by centering every
//! density at the cell center.

use thiserror::Error;

use crate::grid::{d_spacing, fft3, Dims3, Grid3, UnitCell};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grids have different dims: {0:?} vs {1:?}")]
    DimsMismatch(Dims3, Dims3),
    #[error("no reflections at or above d_min = {0}")]
    EmptyReflectionSet(f64),
    #[error("reference map has no amplitude above the cutoff")]
    DegenerateReference,
    #[error("shells must descend and stay positive: {0:?}")]
    BadShellLayout(Vec<(f64, f64)>),
    #[error("reports use different shell layouts")]
    ShellLayoutMismatch,
    #[error("no reports to aggregate")]
    NoReports,
}

const EPSILON: f64 = 1e-8;

/// Sample Pearson correlation over voxels, with a small epsilon under each
/// square root guarding the all-constant case.
pub fn pearson(a: &Grid3, b: &Grid3) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimsMismatch(a.dims(), b.dims()));
    }
    let n = a.len() as f64;
    let mean_a = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let dx = x as f64 - mean_a;
        let dy = y as f64 - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    Ok((cov / ((var_a + EPSILON).sqrt() * (var_b + EPSILON).sqrt())).clamp(-1.0, 1.0))
}

/// Signed frequency for a wrapped FFT index.
fn signed_freq(i: usize, n: usize) -> i32 {
    if i <= n / 2 {
        i as i32
    } else {
        i as i32 - n as i32
    }
}

/// One kept reflection: canonical index, resolution, reference amplitude,
/// absolute phase difference in radians.
struct Reflection {
    d: f64,
    weight: f64,
    delta: f64,
}

fn reflections(
    e_true: &Grid3,
    e_pred: &Grid3,
    cell: &UnitCell,
    d_min: f64,
) -> Result<Vec<Reflection>, MetricsError> {
    if e_true.dims() != e_pred.dims() {
        return Err(MetricsError::DimsMismatch(e_true.dims(), e_pred.dims()));
    }
    let f_true = fft3(e_true);
    let f_pred = fft3(e_pred);
    let (n1, n2, n3) = e_true.dims();
    let mut out = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                // Keep one member of each Hermitian pair; self-conjugate
                // indices compare equal and stay in.
                let mate = ((n1 - i) % n1, (n2 - j) % n2, (n3 - k) % n3);
                if (i, j, k) > mate {
                    continue;
                }
                let (h, kk, l) = (signed_freq(i, n1), signed_freq(j, n2), signed_freq(k, n3));
                let d = d_spacing(h, kk, l, cell).expect("nonzero index");
                if d < d_min * (1.0 - 1e-9) {
                    continue;
                }
                let ft = f_true.get(i, j, k);
                let fp = f_pred.get(i, j, k);
                let mut delta =
                    (fp.im as f64).atan2(fp.re as f64) - (ft.im as f64).atan2(ft.re as f64);
                delta -= std::f64::consts::TAU * (delta / std::f64::consts::TAU).round();
                out.push(Reflection {
                    d,
                    weight: ft.norm() as f64,
                    delta: delta.abs(),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(MetricsError::EmptyReflectionSet(d_min));
    }
    Ok(out)
}

/// Weighted and unweighted mean phase error in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStats {
    pub weighted_deg: f64,
    pub unweighted_deg: f64,
    pub reflections: usize,
}

pub fn phase_stats(
    e_true: &Grid3,
    e_pred: &Grid3,
    cell: &UnitCell,
    d_min: f64,
) -> Result<PhaseStats, MetricsError> {
    let refl = reflections(e_true, e_pred, cell, d_min)?;
    let w_sum: f64 = refl.iter().map(|r| r.weight).sum();
    if w_sum <= 0.0 {
        return Err(MetricsError::DegenerateReference);
    }
    let weighted: f64 = refl.iter().map(|r| r.weight * r.delta).sum::<f64>() / w_sum;
    let unweighted: f64 = refl.iter().map(|r| r.delta).sum::<f64>() / refl.len() as f64;
    Ok(PhaseStats {
        weighted_deg: weighted.to_degrees(),
        unweighted_deg: unweighted.to_degrees(),
        reflections: refl.len(),
    })
}

/// Amplitude-weighted mean phase error in degrees over reflections with
/// `d >= d_min`.
pub fn mean_phase_error(
    e_true: &Grid3,
    e_pred: &Grid3,
    cell: &UnitCell,
    d_min: f64,
) -> Result<f64, MetricsError> {
    Ok(phase_stats(e_true, e_pred, cell, d_min)?.weighted_deg)
}

/// Resolution shell `(d_lo, d_hi]` in Angstroms; `d_hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shell {
    pub d_hi: f64,
    pub d_lo: f64,
}

/// Canonical shell edges down to `d_min`, resembling the usual
/// coarse-to-fine layout: inf, 4, 3, 2.5, 2, 1.75, then `d_min`.
pub fn default_shells(d_min: f64) -> Vec<Shell> {
    let candidates = [4.0, 3.0, 2.5, 2.0, 1.75];
    let mut edges = vec![f64::INFINITY];
    for &e in &candidates {
        if e > d_min {
            edges.push(e);
        }
    }
    edges.push(d_min);
    edges
        .windows(2)
        .map(|w| Shell {
            d_hi: w[0],
            d_lo: w[1],
        })
        .collect()
}

fn validate_shells(shells: &[Shell]) -> Result<(), MetricsError> {
    let bad = || MetricsError::BadShellLayout(shells.iter().map(|s| (s.d_hi, s.d_lo)).collect());
    if shells.is_empty() {
        return Err(bad());
    }
    for s in shells {
        if !(s.d_lo > 0.0 && s.d_hi > s.d_lo) {
            return Err(bad());
        }
    }
    for w in shells.windows(2) {
        if (w[0].d_lo - w[1].d_hi).abs() > 1e-9 {
            return Err(bad());
        }
    }
    Ok(())
}

/// Per-shell phase error statistics for one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellStat {
    pub shell: Shell,
    /// Amplitude-weighted mean error in degrees; `None` for an empty shell.
    pub mean_error_deg: Option<f64>,
    pub weight: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseErrorReport {
    pub shells: Vec<ShellStat>,
    /// Amplitude-weighted mean over every kept reflection, in degrees.
    pub overall_deg: f64,
}

/// Groups reflections by resolution shell. Recombining the shells with
/// their weights reproduces [`mean_phase_error`] over the same range.
pub fn phase_error_by_shell(
    e_true: &Grid3,
    e_pred: &Grid3,
    cell: &UnitCell,
    shells: &[Shell],
) -> Result<PhaseErrorReport, MetricsError> {
    validate_shells(shells)?;
    let d_min = shells.last().unwrap().d_lo;
    let refl = reflections(e_true, e_pred, cell, d_min)?;

    let mut weight = vec![0.0f64; shells.len()];
    let mut sum = vec![0.0f64; shells.len()];
    let mut count = vec![0usize; shells.len()];
    for r in &refl {
        let idx = shells
            .iter()
            .position(|s| r.d > s.d_lo * (1.0 - 1e-12) && r.d <= s.d_hi)
            .unwrap_or(shells.len() - 1);
        weight[idx] += r.weight;
        sum[idx] += r.weight * r.delta;
        count[idx] += 1;
    }

    let total_w: f64 = weight.iter().sum();
    if total_w <= 0.0 {
        return Err(MetricsError::DegenerateReference);
    }
    let total_sum: f64 = sum.iter().sum();
    let stats = shells
        .iter()
        .enumerate()
        .map(|(i, &shell)| ShellStat {
            shell,
            mean_error_deg: if count[i] > 0 {
                Some((sum[i] / weight[i].max(EPSILON)).to_degrees())
            } else {
                None
            },
            weight: weight[i],
            count: count[i],
        })
        .collect();
    Ok(PhaseErrorReport {
        shells: stats,
        overall_deg: (total_sum / total_w).to_degrees(),
    })
}

/// Per-shell fraction of reports whose shell mean error falls below the
/// threshold. Reports with an empty shell drop out of that shell's
/// denominator; a shell empty everywhere yields `None`.
pub fn fraction_below(
    reports: &[PhaseErrorReport],
    threshold_deg: f64,
) -> Result<Vec<Option<f64>>, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let layout: Vec<Shell> = first.shells.iter().map(|s| s.shell).collect();
    for r in reports {
        let this: Vec<Shell> = r.shells.iter().map(|s| s.shell).collect();
        if this != layout {
            return Err(MetricsError::ShellLayoutMismatch);
        }
    }
    Ok((0..layout.len())
        .map(|i| {
            let mut hits = 0usize;
            let mut total = 0usize;
            for r in reports {
                if let Some(err) = r.shells[i].mean_error_deg {
                    total += 1;
                    if err < threshold_deg {
                        hits += 1;
                    }
                }
            }
            (total > 0).then(|| hits as f64 / total as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize_unit_range;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: Dims3, seed: u64) -> Grid3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid3::from_fn(dims, |_, _, _| rng.random_range(-1.0f32..1.0))
    }

    fn negate(g: &Grid3) -> Grid3 {
        Grid3::new(g.dims(), g.data().iter().map(|v| -v).collect()).unwrap()
    }

    #[test]
    fn pearson_identity_negation_affine() {
        let g = random_grid((6, 6, 6), 1);
        assert!((pearson(&g, &g).unwrap() - 1.0).abs() < 1e-9);
        assert!((pearson(&g, &negate(&g)).unwrap() + 1.0).abs() < 1e-9);
        let affine =
            Grid3::new(g.dims(), g.data().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        assert!((pearson(&g, &affine).unwrap() - 1.0).abs() < 1e-6);
        // Symmetry.
        let h = random_grid((6, 6, 6), 2);
        assert!((pearson(&g, &h).unwrap() - pearson(&h, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_normalized_grid_is_one() {
        let g = random_grid((5, 4, 6), 3);
        assert!((pearson(&g, &normalize_unit_range(&g)).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_of_constant_prediction_is_zero() {
        let g = random_grid((6, 6, 6), 4);
        let zero = Grid3::zeros(g.dims());
        assert!(pearson(&g, &zero).unwrap().abs() < 1e-9);
    }

    #[test]
    fn pearson_rejects_dims_mismatch() {
        let a = Grid3::zeros((4, 4, 4));
        let b = Grid3::zeros((4, 4, 8));
        assert!(matches!(
            pearson(&a, &b),
            Err(MetricsError::DimsMismatch(..))
        ));
    }

    #[test]
    fn phase_error_zero_for_identity_and_pi_for_negation() {
        let g = random_grid((12, 12, 12), 5);
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let same = mean_phase_error(&g, &g, &cell, 1.5).unwrap();
        assert!(same.abs() < 1e-3, "identity error {same}");
        let flipped = mean_phase_error(&g, &negate(&g), &cell, 1.5).unwrap();
        assert!((flipped - 180.0).abs() < 1e-3, "negation error {flipped}");
    }

    #[test]
    fn phase_error_invariant_under_positive_scaling() {
        let g = random_grid((10, 10, 10), 6);
        let pred = random_grid((10, 10, 10), 7);
        let cell = UnitCell {
            a: 7.0,
            b: 7.0,
            c: 7.0,
        };
        let base = mean_phase_error(&g, &pred, &cell, 1.5).unwrap();
        let scaled =
            Grid3::new(pred.dims(), pred.data().iter().map(|v| 3.5 * v).collect()).unwrap();
        let scaled_err = mean_phase_error(&g, &scaled, &cell, 1.5).unwrap();
        assert!((base - scaled_err).abs() < 1e-6);
        assert!((0.0..=180.0).contains(&base));
    }

    #[test]
    fn random_noise_phase_error_is_near_ninety() {
        let truth = random_grid((12, 12, 12), 8);
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let mut total = 0.0;
        let draws = 100;
        for s in 0..draws {
            let noise = random_grid((12, 12, 12), 1000 + s);
            total += mean_phase_error(&truth, &noise, &cell, 1.5).unwrap();
        }
        let mean = total / draws as f64;
        assert!(
            (mean - 90.0).abs() <= 5.0,
            "mean over {draws} draws: {mean}"
        );
    }

    #[test]
    fn shell_report_zero_for_identity() {
        let g = random_grid((12, 12, 12), 9);
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let report = phase_error_by_shell(&g, &g, &cell, &default_shells(1.5)).unwrap();
        for s in &report.shells {
            if let Some(err) = s.mean_error_deg {
                assert!(err.abs() < 1e-3);
            }
        }
        assert!(report.overall_deg.abs() < 1e-3);
    }

    #[test]
    fn shell_recombination_matches_overall_error() {
        let truth = random_grid((12, 12, 12), 10);
        let pred = random_grid((12, 12, 12), 11);
        let cell = UnitCell {
            a: 8.5,
            b: 8.0,
            c: 7.5,
        };
        let shells = default_shells(1.5);
        let report = phase_error_by_shell(&truth, &pred, &cell, &shells).unwrap();
        let w_sum: f64 = report.shells.iter().map(|s| s.weight).sum();
        let recombined: f64 = report
            .shells
            .iter()
            .filter_map(|s| s.mean_error_deg.map(|e| e * s.weight))
            .sum::<f64>()
            / w_sum;
        let direct = mean_phase_error(&truth, &pred, &cell, 1.5).unwrap();
        assert!((recombined - direct).abs() / direct.max(1e-9) < 1e-6);
        assert!((report.overall_deg - direct).abs() / direct.max(1e-9) < 1e-6);
        let total: usize = report.shells.iter().map(|s| s.count).sum();
        assert_eq!(
            total,
            phase_stats(&truth, &pred, &cell, 1.5).unwrap().reflections
        );
    }

    #[test]
    fn perturbing_high_frequencies_touches_only_the_finest_shell() {
        // Start from a band-limited map and flip the phase of one reflection
        // inside the finest shell, keeping Hermitian symmetry.
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let dims = (16, 16, 16);
        let truth = {
            let mol = crate::xtal::Molecule {
                atoms: vec![
                    crate::xtal::Atom {
                        element: crate::xtal::Element::C,
                        frac: [0.4, 0.5, 0.55],
                        b_iso: 20.0,
                    },
                    crate::xtal::Atom {
                        element: crate::xtal::Element::O,
                        frac: [0.6, 0.45, 0.5],
                        b_iso: 20.0,
                    },
                ],
                residue_spans: vec![crate::xtal::ResidueSpan {
                    template_id: 0,
                    start: 0,
                    end: 2,
                }],
            };
            let sf = crate::xtal::structure_factors(&mol, &cell, 1.5).unwrap();
            crate::xtal::density_from_sf(&sf, dims).unwrap()
        };

        // (5,1,0) on an 8 A cell: d = 8/sqrt(26) = 1.569 A, inside (1.5, 1.75].
        let mut spectrum = crate::grid::fft3(&truth);
        let rot = num_complex::Complex::new(0.0f32, 1.0); // 90 degree phase turn
        let at = spectrum.idx(5, 1, 0);
        let mate = spectrum.idx(16 - 5, 16 - 1, 0);
        let v = spectrum.data()[at];
        spectrum.data_mut()[at] = v * rot;
        let vm = spectrum.data()[mate];
        spectrum.data_mut()[mate] = vm * rot.conj();
        let pred = crate::grid::ifft3(&spectrum).real();

        let shells = default_shells(1.5);
        let report = phase_error_by_shell(&truth, &pred, &cell, &shells).unwrap();
        let last = shells.len() - 1;
        for (i, s) in report.shells.iter().enumerate() {
            let err = s.mean_error_deg.unwrap_or(0.0);
            if i == last {
                assert!(err > 0.5, "finest shell should move, got {err}");
            } else {
                assert!(err < 0.05, "shell {i} moved by {err}");
            }
        }
    }

    #[test]
    fn fraction_below_counts_perfect_and_negated_predictions() {
        let g = random_grid((12, 12, 12), 12);
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let shells = default_shells(1.5);
        let perfect = phase_error_by_shell(&g, &g, &cell, &shells).unwrap();
        let negated = phase_error_by_shell(&g, &negate(&g), &cell, &shells).unwrap();

        let all_perfect = fraction_below(&[perfect.clone(), perfect.clone()], 60.0).unwrap();
        for f in &all_perfect {
            assert_eq!(*f, Some(1.0));
        }
        let all_negated = fraction_below(&[negated.clone(), negated.clone()], 60.0).unwrap();
        for f in &all_negated {
            assert_eq!(*f, Some(0.0));
        }
        // k perfect, m negated -> k/(k+m).
        let mixed =
            fraction_below(&[perfect.clone(), perfect.clone(), perfect, negated], 60.0).unwrap();
        for f in &mixed {
            assert_eq!(*f, Some(0.75));
        }
    }

    #[test]
    fn fraction_below_rejects_layout_mismatch() {
        let g = random_grid((12, 12, 12), 13);
        let cell = UnitCell {
            a: 8.0,
            b: 8.0,
            c: 8.0,
        };
        let a = phase_error_by_shell(&g, &g, &cell, &default_shells(1.5)).unwrap();
        let b = phase_error_by_shell(&g, &g, &cell, &default_shells(2.0)).unwrap();
        assert!(matches!(
            fraction_below(&[a, b], 60.0),
            Err(MetricsError::ShellLayoutMismatch)
        ));
    }

    #[test]
    fn default_shells_cover_down_to_d_min() {
        let shells = default_shells(1.5);
        assert_eq!(shells.first().unwrap().d_hi, f64::INFINITY);
        assert_eq!(shells.last().unwrap().d_lo, 1.5);
        validate_shells(&shells).unwrap();
        let coarse = default_shells(3.2);
        assert_eq!(coarse.last().unwrap().d_lo, 3.2);
        validate_shells(&coarse).unwrap();
    }
}
