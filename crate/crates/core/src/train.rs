//! Loss, Adam optimization over shape-binned batches, the refining
//! procedure, and the evaluation sweep shared by both architectures.
//!
//! Every batch is drawn from a single shape bin so tensors in a step share
//! dims; bins are visited round-robin with a fresh in-bin shuffle each
//! epoch. All randomness flows from the run seed through named sub-streams,
//! making a run a pure function of `(seed, config, dataset)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::conv::Batch;
use crate::datagen::Example;
use crate::grid::{Dims3, Grid3};
use crate::metrics::{self, MetricsError, PhaseErrorReport, Shell};
use crate::model::{CrysFormer, ModelConfig, ModelError, ModelInput};
use crate::tensor::{Scalar, TensorEntryMut};
use crate::unet::{Mode, Unet, UnetConfig, UnetError};
use crate::util::substream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty after binning")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("grids have different dims: {0:?} vs {1:?}")]
    DimsMismatch(Dims3, Dims3),
    #[error("prior predictions missing: expected {want}, got {got}")]
    PriorCount { want: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

/// Mean over voxels of the squared difference.
pub fn mse_loss(pred: &Grid3, target: &Grid3) -> Result<f64, TrainError> {
    if pred.dims() != target.dims() {
        return Err(TrainError::DimsMismatch(pred.dims(), target.dims()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Which network a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModelKind {
    CrysFormer,
    Unet,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    /// Stack partial-structure channels into the U-Net input (+PS).
    pub ps: bool,
    /// Stack a prior-prediction channel (+R); requires prior predictions.
    pub refine: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Record zero seconds per epoch so history files are byte-stable.
    pub deterministic_timing: bool,
    /// Stop once the eval mean Pearson reaches this value.
    pub target_pearson: Option<f64>,
    /// Global index of the first epoch; shuffles key off it, so resumed
    /// runs continue the same stream.
    pub epoch_offset: usize,
    /// Architecture override for small tests; derived from the dataset
    /// when absent.
    pub crys_cfg: Option<ModelConfig>,
    pub unet_cfg: Option<UnetConfig>,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ps: false,
            refine: false,
            epochs: 50,
            batch_size: 8,
            lr: 3e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            deterministic_timing: true,
            target_pearson: None,
            epoch_offset: 0,
            crys_cfg: None,
            unet_cfg: None,
        }
    }

    /// Row label used in reports, mirroring the method naming scheme.
    pub fn label(&self) -> String {
        let mut s = match self.kind {
            ModelKind::CrysFormer => "crysformer".to_string(),
            ModelKind::Unet => "unet".to_string(),
        };
        if self.ps {
            s.push_str("+ps");
        }
        if self.refine {
            s.push_str("+r");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_pearson: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub rows: Vec<EpochRow>,
    /// Total optimizer steps taken.
    pub updates: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_pearson,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.3}\n",
                r.epoch, r.train_loss, r.test_pearson, r.seconds
            ));
        }
        out
    }

    pub fn final_pearson(&self) -> f64 {
        self.rows.last().map(|r| r.test_pearson).unwrap_or(f64::NAN)
    }
}

/// A trained network of either kind plus the input-assembly flags it was
/// trained with.
pub enum TrainedModel<F: Scalar> {
    CrysFormer(CrysFormer<F>),
    Unet(Unet<F>),
}

impl<F: Scalar> TrainedModel<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::CrysFormer(_) => ModelKind::CrysFormer,
            TrainedModel::Unet(_) => ModelKind::Unet,
        }
    }

    /// Whether a prior channel is part of the input.
    pub fn wants_prior(&self) -> bool {
        match self {
            TrainedModel::CrysFormer(m) => m.cfg.in_channels > 1,
            TrainedModel::Unet(u) => u.cfg.refine,
        }
    }

    /// Evaluation-mode prediction for one example.
    pub fn predict(&self, ex: &Example, prior: Option<&Grid3>) -> Result<Grid3, TrainError> {
        let dims = ex.dims();
        match self {
            TrainedModel::CrysFormer(m) => {
                let input = crys_input::<F>(m, ex, prior)?;
                let y = m.forward(&input)?;
                Ok(
                    Grid3::new(dims, y.iter().map(|v| v.to_f64_lossy() as f32).collect())
                        .expect("model preserves dims"),
                )
            }
            TrainedModel::Unet(u) => {
                let prior_refs: Option<Vec<&Grid3>> = prior.map(|p| vec![p]);
                let x = unet_input_batch::<F>(u, std::slice::from_ref(&ex), prior_refs.as_deref())?;
                let (y, _) = u.forward(&x, Mode::Eval)?;
                Ok(Grid3::new(
                    dims,
                    y.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                )
                .expect("unet preserves dims"))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::io::IoError> {
        match self {
            TrainedModel::CrysFormer(m) => m.save(path),
            TrainedModel::Unet(u) => u.save(path),
        }
    }

    /// Loads either checkpoint flavor, dispatching on the magic bytes.
    pub fn load(path: &Path) -> Result<Self, crate::io::IoError> {
        let bytes = std::fs::read(path).map_err(|e| crate::io::IoError::io(path, e))?;
        match bytes.get(..4) {
            Some(m) if m == crate::model::CHECKPOINT_MAGIC => {
                Ok(TrainedModel::CrysFormer(CrysFormer::load(path)?))
            }
            Some(m) if m == crate::unet::CHECKPOINT_MAGIC => {
                Ok(TrainedModel::Unet(Unet::load(path)?))
            }
            _ => Err(crate::io::IoError::parse(
                &path.display().to_string(),
                "magic",
                "not a model checkpoint",
            )),
        }
    }
}

fn grid_to_scalar<F: Scalar>(g: &Grid3) -> Vec<F> {
    g.data()
        .iter()
        .map(|&v| F::from_f64_lossy(v as f64))
        .collect()
}

fn crys_input<F: Scalar>(
    m: &CrysFormer<F>,
    ex: &Example,
    prior: Option<&Grid3>,
) -> Result<ModelInput<F>, TrainError> {
    let dims = ex.dims();
    let partials: Vec<Vec<F>> = ex.partials.iter().map(grid_to_scalar::<F>).collect();
    let mut input = ModelInput::new(grid_to_scalar::<F>(&ex.patterson), partials, dims);
    if m.cfg.in_channels > 1 {
        let p = prior.ok_or(TrainError::PriorCount { want: 1, got: 0 })?;
        input = input.with_prior(grid_to_scalar::<F>(p));
    }
    Ok(input)
}

fn unet_input_batch<F: Scalar>(
    u: &Unet<F>,
    examples: &[&Example],
    priors: Option<&[&Grid3]>,
) -> Result<Batch<F>, TrainError> {
    let dims = examples[0].dims();
    let vox = dims.0 * dims.1 * dims.2;
    let ch = u.cfg.in_channels;
    let mut x = Batch::zeros(examples.len(), ch, dims);
    for (b, ex) in examples.iter().enumerate() {
        let mut c = 0usize;
        let write = |src: &Grid3, c: usize, x: &mut Batch<F>| {
            for (dst, &v) in x.slice_mut(b, c).iter_mut().zip(src.data()) {
                *dst = F::from_f64_lossy(v as f64);
            }
        };
        write(&ex.patterson, c, &mut x);
        c += 1;
        if u.cfg.ps_channels > 0 {
            if ex.partials.len() != u.cfg.ps_channels {
                return Err(TrainError::Unet(UnetError::ChannelMismatch {
                    got: 1 + ex.partials.len(),
                    want: ch,
                }));
            }
            for p in &ex.partials {
                write(p, c, &mut x);
                c += 1;
            }
        }
        if u.cfg.refine {
            let ps = priors.ok_or(TrainError::PriorCount {
                want: examples.len(),
                got: 0,
            })?;
            write(ps[b], c, &mut x);
            c += 1;
        }
        debug_assert_eq!(c, ch);
        let _ = vox;
    }
    Ok(x)
}

/// First-moment/second-moment state mirroring the parameter layout.
struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: usize,
}

impl<F: Scalar> Adam<F> {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: Vec<TensorEntryMut<'_, F>>,
        grads: Vec<crate::tensor::TensorEntry<'_, F>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let b1 = F::from_f64_lossy(beta1);
        let b2 = F::from_f64_lossy(beta2);
        let one = F::one();
        let bc1 = F::from_f64_lossy(1.0 - beta1.powi(self.t as i32));
        let bc2 = F::from_f64_lossy(1.0 - beta2.powi(self.t as i32));
        let lr = F::from_f64_lossy(lr);
        let eps = F::from_f64_lossy(eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.data.len(), g.data.len());
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

type TrainSlices<'a> = (&'a [&'a Example], &'a [&'a Example]);

/// Shape bins over the training indices; order is dims-sorted and stable.
fn bin_indices(examples: &[&Example]) -> BTreeMap<Dims3, Vec<usize>> {
    let mut bins: BTreeMap<Dims3, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        bins.entry(ex.dims()).or_default().push(i);
    }
    bins
}

/// In-bin shuffle then round-robin interleave across bins; each batch stays
/// inside one bin.
fn batch_plan(
    bins: &BTreeMap<Dims3, Vec<usize>>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut rng = substream_rng(seed, "shuffle", epoch as u64);
    let mut per_bin: Vec<Vec<Vec<usize>>> = Vec::new();
    for members in bins.values() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        per_bin.push(
            order
                .chunks(batch_size.max(1))
                .map(|c| c.to_vec())
                .collect(),
        );
    }
    let rounds = per_bin.iter().map(|b| b.len()).max().unwrap_or(0);
    let mut plan = Vec::new();
    for r in 0..rounds {
        for b in &per_bin {
            if r < b.len() {
                plan.push(b[r].clone());
            }
        }
    }
    plan
}

fn mean_pearson<F: Scalar>(
    model: &TrainedModel<F>,
    examples: &[&Example],
    priors: Option<&[Grid3]>,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let pred = model.predict(ex, priors.map(|p| &p[i]))?;
        total += metrics::pearson(&ex.density, &pred)?;
    }
    Ok(total / examples.len() as f64)
}

/// Prior predictions for every example, in order.
pub fn predict_all<F: Scalar>(
    model: &TrainedModel<F>,
    examples: &[&Example],
    priors: Option<&[Grid3]>,
) -> Result<Vec<Grid3>, TrainError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| model.predict(ex, priors.map(|p| &p[i])))
        .collect()
}

fn build_model<F: Scalar>(
    cfg: &TrainConfig,
    train_set: &[&Example],
) -> Result<TrainedModel<F>, TrainError> {
    let mut rng = substream_rng(cfg.seed, "init", 0);
    let j = train_set.first().map(|e| e.partials.len()).unwrap_or(0);
    match cfg.kind {
        ModelKind::CrysFormer => {
            let mut mc = cfg.crys_cfg.clone().unwrap_or_default();
            mc.in_channels = 1 + usize::from(cfg.refine);
            mc.j_max = mc.j_max.max(j);
            let mut s_needed = 0;
            for ex in train_set {
                let d = ex.dims();
                let pv = mc.patch.0 * mc.patch.1 * mc.patch.2;
                s_needed = s_needed.max(d.0 * d.1 * d.2 / pv);
            }
            mc.s_max = mc.s_max.max(s_needed);
            Ok(TrainedModel::CrysFormer(CrysFormer::new(mc, &mut rng)?))
        }
        ModelKind::Unet => {
            let mut uc = cfg.unet_cfg.clone().unwrap_or_default();
            uc.ps_channels = if cfg.ps { j } else { 0 };
            uc.refine = cfg.refine;
            uc.in_channels = 1 + uc.ps_channels + usize::from(uc.refine);
            Ok(TrainedModel::Unet(Unet::new(uc, &mut rng)?))
        }
    }
}

fn adam_sizes<F: Scalar>(model: &TrainedModel<F>) -> Vec<usize> {
    match model {
        TrainedModel::CrysFormer(m) => m.params.flatten().iter().map(|e| e.data.len()).collect(),
        TrainedModel::Unet(u) => u.params.flatten().iter().map(|e| e.data.len()).collect(),
    }
}

/// Trains a fresh model. `priors` carries one frozen prior prediction per
/// train/eval example and is required exactly when `cfg.refine` is set.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    train_set: &[&Example],
    eval_set: &[&Example],
    priors: Option<(&[Grid3], &[Grid3])>,
) -> Result<(TrainedModel<F>, History), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.refine {
        let (pt, pe) = priors.ok_or(TrainError::PriorCount {
            want: train_set.len(),
            got: 0,
        })?;
        if pt.len() != train_set.len() {
            return Err(TrainError::PriorCount {
                want: train_set.len(),
                got: pt.len(),
            });
        }
        if pe.len() != eval_set.len() {
            return Err(TrainError::PriorCount {
                want: eval_set.len(),
                got: pe.len(),
            });
        }
    }
    let mut model = build_model::<F>(cfg, train_set)?;
    let mut adam = Adam::<F>::new(&adam_sizes(&model));
    let bins = bin_indices(train_set);
    let mut history = History::default();

    for e in 0..cfg.epochs {
        let epoch = cfg.epoch_offset + e;
        let started = Instant::now();
        let plan = batch_plan(&bins, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;

        for (step, batch) in plan.iter().enumerate() {
            let batch_loss = match &mut model {
                TrainedModel::CrysFormer(m) => {
                    let mut grads = m.params.zeros_like();
                    let mut loss = 0.0f64;
                    for &bi in batch {
                        let ex = train_set[bi];
                        let prior = priors.map(|(pt, _)| &pt[bi]);
                        let input = crys_input::<F>(m, ex, prior)?;
                        let (y, cache) = m.forward_cached(&input)?;
                        let target = grid_to_scalar::<F>(&ex.density);
                        let n = y.len() as f64;
                        let b = batch.len() as f64;
                        let mut d_out = vec![F::zero(); y.len()];
                        let mut ex_loss = 0.0f64;
                        for i in 0..y.len() {
                            let diff = y[i] - target[i];
                            ex_loss += diff.to_f64_lossy() * diff.to_f64_lossy();
                            d_out[i] = F::from_f64_lossy(2.0) * diff / F::from_f64_lossy(n * b);
                        }
                        loss += ex_loss / (n * b);
                        let g = m.backward(&cache, &d_out);
                        grads.add_scaled(&g, F::one());
                    }
                    adam.step(
                        m.params.flatten_mut(),
                        grads.flatten(),
                        cfg.lr,
                        cfg.beta1,
                        cfg.beta2,
                        cfg.adam_eps,
                    );
                    loss
                }
                TrainedModel::Unet(u) => {
                    let exs: Vec<&Example> = batch.iter().map(|&bi| train_set[bi]).collect();
                    let prior_refs: Option<Vec<&Grid3>> =
                        priors.map(|(pt, _)| batch.iter().map(|&bi| &pt[bi]).collect());
                    let x = unet_input_batch::<F>(u, &exs, prior_refs.as_deref())?;
                    let (y, cache) = u.forward(&x, Mode::Train)?;
                    let cache = cache.expect("train cache");
                    let n_total = y.data.len() as f64;
                    let mut d_out = y.clone();
                    let mut loss = 0.0f64;
                    for (b, ex) in exs.iter().enumerate() {
                        let target = grid_to_scalar::<F>(&ex.density);
                        let dst = d_out.slice_mut(b, 0);
                        let src = y.slice(b, 0);
                        for i in 0..src.len() {
                            let diff = src[i] - target[i];
                            loss += diff.to_f64_lossy() * diff.to_f64_lossy();
                            dst[i] = F::from_f64_lossy(2.0) * diff / F::from_f64_lossy(n_total);
                        }
                    }
                    loss /= n_total;
                    let grads = u.backward(&cache, &d_out);
                    u.update_running_stats(&cache);
                    adam.step(
                        u.params.flatten_mut(),
                        grads.flatten(),
                        cfg.lr,
                        cfg.beta1,
                        cfg.beta2,
                        cfg.adam_eps,
                    );
                    loss
                }
            };
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            loss_sum += batch_loss * batch.len() as f64;
            loss_n += batch.len();
            history.updates += 1;
        }

        let eval_priors = priors.map(|(_, pe)| pe);
        let pearson = mean_pearson(&model, eval_set, eval_priors)?;
        let seconds = if cfg.deterministic_timing {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        history.rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            test_pearson: pearson,
            seconds,
        });
        if let Some(target) = cfg.target_pearson {
            if pearson >= target {
                break;
            }
        }
    }
    Ok((model, history))
}

/// Refining run: freezes the prior model, computes its predictions for
/// every example, and trains a fresh model with one extra input channel
/// carrying them.
pub fn refine<F: Scalar>(
    cfg: &TrainConfig,
    (train_set, eval_set): TrainSlices<'_>,
    prior: &TrainedModel<F>,
) -> Result<(TrainedModel<F>, History), TrainError> {
    let prior_train = predict_all(prior, train_set, None)?;
    let prior_eval = predict_all(prior, eval_set, None)?;
    refine_with_predictions(cfg, (train_set, eval_set), (prior_train, prior_eval))
}

/// Refining run with externally supplied prior predictions; test hook for
/// injecting ground truth as a perfect prior.
pub fn refine_with_predictions<F: Scalar>(
    cfg: &TrainConfig,
    (train_set, eval_set): TrainSlices<'_>,
    (prior_train, prior_eval): (Vec<Grid3>, Vec<Grid3>),
) -> Result<(TrainedModel<F>, History), TrainError> {
    let mut cfg = cfg.clone();
    cfg.refine = true;
    train(&cfg, train_set, eval_set, Some((&prior_train, &prior_eval)))
}

/// One evaluated example.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub pearson: f64,
    pub phase_error_deg: f64,
    pub phase_error_unweighted_deg: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub reports: Vec<PhaseErrorReport>,
    pub shells: Vec<Shell>,
    pub mean_pearson: f64,
    pub mean_phase_error_deg: f64,
}

/// Per-example Pearson and phase error plus per-shell reports over a set.
pub fn evaluate<F: Scalar>(
    model: &TrainedModel<F>,
    examples: &[&Example],
    priors: Option<&[Grid3]>,
    d_min: f64,
) -> Result<EvalSummary, TrainError> {
    let shells = metrics::default_shells(d_min);
    let mut rows = Vec::with_capacity(examples.len());
    let mut reports = Vec::with_capacity(examples.len());
    let mut p_sum = 0.0;
    let mut e_sum = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let pred = model.predict(ex, priors.map(|p| &p[i]))?;
        let pearson = metrics::pearson(&ex.density, &pred)?;
        let stats = metrics::phase_stats(&ex.density, &pred, &ex.cell, d_min)?;
        let report = metrics::phase_error_by_shell(&ex.density, &pred, &ex.cell, &shells)?;
        p_sum += pearson;
        e_sum += stats.weighted_deg;
        rows.push(EvalRow {
            id: ex.id.clone(),
            pearson,
            phase_error_deg: stats.weighted_deg,
            phase_error_unweighted_deg: stats.unweighted_deg,
        });
        reports.push(report);
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalSummary {
        rows,
        reports,
        shells,
        mean_pearson: p_sum / n,
        mean_phase_error_deg: e_sum / n,
    })
}
