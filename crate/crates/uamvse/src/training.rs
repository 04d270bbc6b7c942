//! Hand-derived reverse-mode gradients for the full forward pipeline,
//! central-difference verification against the same piecewise-smooth branch,
//! Adam optimization with a step-decay schedule, and a deterministic
//! training loop with per-epoch checkpointing.
//!
//! Subgradient conventions: ReLU and hinge take 0 at 0; argmax and max-pool
//! ties resolve to the lowest index. Uncertainty weights are constants of
//! the forward pass. The finite-difference path freezes the whole active
//! set (hardest-negative indices, hinge activity, pooling selections,
//! weights) at the unperturbed point so both evaluations sit on one branch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset, Split};
use crate::loss::{
    global_nll_loss, uncertainty_weights_with, weighted_triplet_loss, SimilarityTensor,
    TripletActiveSet, TripletConfig, UncertaintyWeights, WeightStat,
};
use crate::model::{
    forward_image, forward_text, init_params, l2_norm_backward, pool_backward, save_checkpoint,
    ImageTrace, ModelConfig, ModelParams, PoolSel, TextTrace,
};
use crate::numerics::Mat;
use crate::{Error, Result};

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Triplet,
    GlobalNll,
}

/// Optimizer selection; plain SGD exists for debugging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Everything the per-batch objective needs besides the parameters.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub margin: f64,
    pub weighting: bool,
    pub weight_stat: WeightStat,
}

/// Training loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; multiplied by 0.9 every 10 epochs.
    pub lr0: f64,
    pub loss: LossKind,
    pub weighting: bool,
    pub weight_stat: WeightStat,
    pub margin: f64,
    pub optimizer: OptimizerKind,
    /// Global L2 gradient clip; `null` disables.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr0: 5e-4,
            loss: LossKind::Triplet,
            weighting: true,
            weight_stat: WeightStat::Std,
            margin: 0.2,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(2.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self, model: &ModelConfig) -> ObjectiveConfig {
        ObjectiveConfig {
            model: *model,
            loss: self.loss,
            margin: self.margin,
            weighting: self.weighting,
            weight_stat: self.weight_stat,
        }
    }
}

/// One gradient tensor per parameter tensor, same shapes and flatten order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub wt: Mat,
    pub bt: Vec<f64>,
    pub pool_img: Vec<f64>,
    pub pool_txt: Vec<f64>,
}

impl Gradients {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            w1: Mat::zeros(cfg.hidden, cfg.d1),
            b1: vec![0.0; cfg.hidden],
            w2: Mat::zeros(cfg.k * cfg.d_emb, cfg.hidden),
            b2: vec![0.0; cfg.k * cfg.d_emb],
            wt: Mat::zeros(cfg.d_emb, cfg.d2),
            bt: vec![0.0; cfg.d_emb],
            pool_img: vec![0.0; cfg.gpo_p],
            pool_txt: vec![0.0; cfg.gpo_p],
        }
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(self.wt.data());
        out.extend_from_slice(&self.bt);
        out.extend_from_slice(&self.pool_img);
        out.extend_from_slice(&self.pool_txt);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

struct BatchForward {
    img_traces: Vec<ImageTrace>,
    txt_traces: Vec<TextTrace>,
    sim: SimilarityTensor,
    weights: UncertaintyWeights,
    loss: f64,
    triplet_active: Option<TripletActiveSet>,
}

fn batch_forward(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    frozen: Option<&FrozenState>,
) -> Result<BatchForward> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArg {
            op: "forward_backward",
            msg: format!("batch must hold at least 2 pairs, got {b}"),
        });
    }
    let mut img_traces = Vec::with_capacity(b);
    let mut txt_traces = Vec::with_capacity(b);
    for (slot, &(img, cap)) in batch.pairs.iter().enumerate() {
        let img_frozen = frozen.map(|f| f.img_sel[slot].as_slice());
        img_traces.push(forward_image(&ds.images[img], params, &cfg.model, img_frozen)?);
        let txt_frozen = frozen.map(|f| &f.txt_sel[slot]);
        txt_traces.push(forward_text(&ds.captions[cap], params, &cfg.model, txt_frozen)?);
    }
    let view_embs: Vec<Mat> = img_traces.iter().map(|t| t.out.clone()).collect();
    let text_rows: Vec<Vec<f64>> = txt_traces.iter().map(|t| t.out.clone()).collect();
    let text_mat = Mat::from_rows(&text_rows)?;
    let sim = SimilarityTensor::from_embeddings(&view_embs, &text_mat)?;

    let weights = match frozen {
        Some(f) => f.weights.clone(),
        None => {
            if cfg.weighting {
                uncertainty_weights_with(&sim, cfg.weight_stat)?
            } else {
                UncertaintyWeights::ones(b, cfg.model.k)
            }
        }
    };

    let (loss, triplet_active) = match (cfg.loss, frozen) {
        (LossKind::Triplet, None) => {
            let tcfg = TripletConfig {
                margin: cfg.margin,
                weighting: cfg.weighting,
            };
            let (loss, active) = weighted_triplet_loss(&sim, &weights, &tcfg)?;
            (loss, Some(active))
        }
        (LossKind::Triplet, Some(f)) => {
            // Frozen branch: active terms stay active with their recorded
            // hardest negatives and weights, without re-clamping.
            let active = f
                .triplet
                .as_ref()
                .expect("frozen state for a triplet objective carries its active set");
            let k = cfg.model.k;
            let mut i2t = 0.0;
            for view in 0..k {
                for anchor in 0..b {
                    let rec = &active.i2t[view * b + anchor];
                    if rec.active {
                        i2t += rec.weight
                            * (cfg.margin - sim.score(view, anchor, anchor)
                                + sim.score(view, anchor, rec.hardest));
                    }
                }
            }
            let mut t2i = 0.0;
            for view in 0..k {
                for anchor in 0..b {
                    let rec = &active.t2i[view * b + anchor];
                    if rec.active {
                        t2i += rec.weight
                            * (cfg.margin - sim.score(view, anchor, anchor)
                                + sim.score(view, rec.hardest, anchor));
                    }
                }
            }
            ((i2t + t2i) / b as f64, None)
        }
        (LossKind::GlobalNll, _) => (global_nll_loss(&sim, &weights)?, None),
    };

    Ok(BatchForward {
        img_traces,
        txt_traces,
        sim,
        weights,
        loss,
        triplet_active,
    })
}

/// Gradient of the loss with respect to every score, already divided by B.
fn score_gradients(
    cfg: &ObjectiveConfig,
    sim: &SimilarityTensor,
    weights: &UncertaintyWeights,
    triplet_active: Option<&TripletActiveSet>,
) -> Vec<f64> {
    let b = sim.n_images();
    let k = sim.views();
    let inv_b = 1.0 / b as f64;
    let mut g = vec![0.0; k * b * b];
    let at = |view: usize, i: usize, j: usize| (view * b + i) * b + j;
    match cfg.loss {
        LossKind::Triplet => {
            let active = triplet_active.expect("triplet backward needs the active set");
            for view in 0..k {
                for anchor in 0..b {
                    let rec = &active.i2t[view * b + anchor];
                    if rec.active {
                        g[at(view, anchor, anchor)] -= rec.weight * inv_b;
                        g[at(view, anchor, rec.hardest)] += rec.weight * inv_b;
                    }
                }
            }
            for view in 0..k {
                for anchor in 0..b {
                    let rec = &active.t2i[view * b + anchor];
                    if rec.active {
                        g[at(view, anchor, anchor)] -= rec.weight * inv_b;
                        g[at(view, rec.hardest, anchor)] += rec.weight * inv_b;
                    }
                }
            }
        }
        LossKind::GlobalNll => {
            for view in 0..k {
                let slice = sim.view_slice(view);
                let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = slice.iter().map(|&s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let combined: Vec<f64> = (0..b)
                    .map(|a| weights.img_to_txt.get(a, view) + weights.txt_to_img.get(a, view))
                    .collect();
                let total: f64 = combined.iter().sum();
                for i in 0..b {
                    for j in 0..b {
                        let mut v = total * exps[i * b + j] / z;
                        if i == j {
                            v -= combined[i];
                        }
                        g[at(view, i, j)] = v * inv_b;
                    }
                }
            }
        }
    }
    g
}

fn image_backward(
    trace: &ImageTrace,
    regions: &Mat,
    d_out: &Mat,
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &mut Gradients,
) {
    let n = regions.rows();
    let d = cfg.d_emb;
    let mut d_views_raw = Mat::zeros(n, cfg.k * d);
    for k in 0..cfg.k {
        let d_pooled = l2_norm_backward(trace.out.row(k), trace.norms[k], d_out.row(k));
        let mut slice = Mat::zeros(n, d);
        for r in 0..n {
            slice
                .row_mut(r)
                .copy_from_slice(&trace.views_raw.row(r)[k * d..(k + 1) * d]);
        }
        let mut d_slice = Mat::zeros(n, d);
        pool_backward(
            &slice,
            trace.pooled.row(k),
            &d_pooled,
            cfg.pooling,
            Some(&params.pool_img),
            &trace.sel[k],
            &mut d_slice,
            Some(&mut grads.pool_img),
        );
        for r in 0..n {
            d_views_raw.row_mut(r)[k * d..(k + 1) * d].copy_from_slice(d_slice.row(r));
        }
    }
    // Through the second layer: u = W2 h + b2.
    for r in 0..n {
        let du = d_views_raw.row(r);
        let h = trace.hidden.row(r);
        for (out_i, &g) in du.iter().enumerate() {
            if g != 0.0 {
                grads.b2[out_i] += g;
                let wrow = grads.w2.row_mut(out_i);
                for (w, &hv) in wrow.iter_mut().zip(h) {
                    *w += g * hv;
                }
            }
        }
    }
    // dL/dh = W2^T du, masked by ReLU activity, then through the first layer.
    let d_hidden = d_views_raw.matmul(&params.w2).expect("shapes fixed by config");
    for r in 0..n {
        let h = trace.hidden.row(r);
        let x = regions.row(r);
        let dh = d_hidden.row(r);
        for (j, (&g, &hv)) in dh.iter().zip(h).enumerate() {
            if hv > 0.0 && g != 0.0 {
                grads.b1[j] += g;
                let wrow = grads.w1.row_mut(j);
                for (w, &xv) in wrow.iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
    }
}

fn text_backward(
    trace: &TextTrace,
    tokens: &Mat,
    d_out: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &mut Gradients,
) {
    let d_pooled = l2_norm_backward(&trace.out, trace.norm, d_out);
    let m = tokens.rows();
    let mut d_proj = Mat::zeros(m, cfg.d_emb);
    pool_backward(
        &trace.proj,
        &trace.pooled,
        &d_pooled,
        cfg.pooling,
        Some(&params.pool_txt),
        &trace.sel,
        &mut d_proj,
        Some(&mut grads.pool_txt),
    );
    for r in 0..m {
        let dp = d_proj.row(r);
        let x = tokens.row(r);
        for (out_i, &g) in dp.iter().enumerate() {
            if g != 0.0 {
                grads.bt[out_i] += g;
                let wrow = grads.wt.row_mut(out_i);
                for (w, &xv) in wrow.iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
    }
}

/// Forward plus exact analytic gradients for one batch. The loss value is
/// bit-identical to composing the loss module's own forward on this batch.
pub fn forward_backward(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Gradients)> {
    let fw = batch_forward(ds, batch, params, cfg, None)?;
    let b = batch.len();
    let k = cfg.model.k;
    let d = cfg.model.d_emb;
    let g_scores = score_gradients(cfg, &fw.sim, &fw.weights, fw.triplet_active.as_ref());

    // Scores into embedding gradients.
    let mut d_views: Vec<Mat> = (0..b).map(|_| Mat::zeros(k, d)).collect();
    let mut d_texts = Mat::zeros(b, d);
    for view in 0..k {
        for i in 0..b {
            let v = fw.img_traces[i].out.row(view);
            for j in 0..b {
                let g = g_scores[(view * b + i) * b + j];
                if g != 0.0 {
                    let t = fw.txt_traces[j].out.as_slice();
                    let dv = d_views[i].row_mut(view);
                    for (o, &tv) in dv.iter_mut().zip(t) {
                        *o += g * tv;
                    }
                    let dt = d_texts.row_mut(j);
                    for (o, &vv) in dt.iter_mut().zip(v) {
                        *o += g * vv;
                    }
                }
            }
        }
    }

    // Accumulate per sample in ascending slot order for bitwise determinism.
    let mut grads = Gradients::zeros(&cfg.model);
    for (slot, &(img, _)) in batch.pairs.iter().enumerate() {
        image_backward(
            &fw.img_traces[slot],
            &ds.images[img],
            &d_views[slot],
            params,
            &cfg.model,
            &mut grads,
        );
    }
    for (slot, &(_, cap)) in batch.pairs.iter().enumerate() {
        text_backward(
            &fw.txt_traces[slot],
            &ds.captions[cap],
            d_texts.row(slot),
            params,
            &cfg.model,
            &mut grads,
        );
    }
    Ok((fw.loss, grads))
}

/// The frozen choices captured at the unperturbed point.
pub struct FrozenState {
    img_sel: Vec<Vec<PoolSel>>,
    txt_sel: Vec<PoolSel>,
    weights: UncertaintyWeights,
    triplet: Option<TripletActiveSet>,
}

/// Runs the real forward once and captures the active set for replay.
pub fn capture_frozen_state(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
) -> Result<(f64, FrozenState)> {
    let fw = batch_forward(ds, batch, params, cfg, None)?;
    Ok((
        fw.loss,
        FrozenState {
            img_sel: fw.img_traces.into_iter().map(|t| t.sel).collect(),
            txt_sel: fw.txt_traces.into_iter().map(|t| t.sel).collect(),
            weights: fw.weights,
            triplet: fw.triplet_active,
        },
    ))
}

/// Loss at `params` with every discrete choice replayed from `frozen`.
pub fn frozen_loss(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    frozen: &FrozenState,
) -> Result<f64> {
    batch_forward(ds, batch, params, cfg, Some(frozen)).map(|fw| fw.loss)
}

/// Plain central difference of an arbitrary scalar function; the test hook
/// behind [`finite_diff_gradient`].
pub fn central_difference<F>(mut f: F, x: &[f64], index: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if index >= x.len() {
        return Err(Error::IndexOutOfRange {
            op: "central_difference",
            index,
            len: x.len(),
        });
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArg {
            op: "central_difference",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut xs = x.to_vec();
    xs[index] = x[index] + h;
    let plus = f(&xs)?;
    xs[index] = x[index] - h;
    let minus = f(&xs)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Central-difference derivative of the batch loss along one parameter,
/// with the active set held fixed at the unperturbed point so both
/// evaluations sit on the same piecewise-smooth branch.
pub fn finite_diff_gradient(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    param_index: usize,
    h: f64,
) -> Result<f64> {
    let flat = params.to_flat();
    if param_index >= flat.len() {
        return Err(Error::IndexOutOfRange {
            op: "finite_diff_gradient",
            index: param_index,
            len: flat.len(),
        });
    }
    let (_, frozen) = capture_frozen_state(ds, batch, params, cfg)?;
    central_difference(
        |xs| {
            let p = ModelParams::from_flat(&cfg.model, xs)?;
            frozen_loss(ds, batch, &p, cfg, &frozen)
        },
        &flat,
        param_index,
        h,
    )
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Relative error `|analytic - fd| / max(1e-8, |analytic| + |fd|)` over the
/// given parameter indices.
pub fn gradient_check(
    ds: &Dataset,
    batch: &Batch,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = forward_backward(ds, batch, params, cfg)?;
    let flat_g = grads.to_flat();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &idx in indices {
        let fd = finite_diff_gradient(ds, batch, params, cfg, idx, h)?;
        let analytic = flat_g[idx];
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = idx;
        }
    }
    Ok(GradCheckReport {
        checks: indices.len(),
        max_rel_err,
        worst_index,
    })
}

/// Adam moment estimates; flat layout matching [`ModelParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update; pure in (params, grads, state).
pub fn adam_step(
    cfg: &ModelConfig,
    params: &ModelParams,
    grads: &Gradients,
    state: &AdamState,
    lr: f64,
) -> Result<(ModelParams, AdamState)> {
    let mut flat = params.to_flat();
    let g = grads.to_flat();
    if g.len() != flat.len() || state.m.len() != flat.len() {
        return Err(Error::InvalidArg {
            op: "adam_step",
            msg: format!(
                "shape mismatch: {} params, {} grads, {} moments",
                flat.len(),
                g.len(),
                state.m.len()
            ),
        });
    }
    let t = state.t + 1;
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..flat.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok((ModelParams::from_flat(cfg, &flat)?, AdamState { m, v, t }))
}

/// Plain gradient descent step.
pub fn sgd_step(
    cfg: &ModelConfig,
    params: &ModelParams,
    grads: &Gradients,
    lr: f64,
) -> Result<ModelParams> {
    let mut flat = params.to_flat();
    let g = grads.to_flat();
    if g.len() != flat.len() {
        return Err(Error::InvalidArg {
            op: "sgd_step",
            msg: format!("shape mismatch: {} params, {} grads", flat.len(), g.len()),
        });
    }
    for (p, gv) in flat.iter_mut().zip(&g) {
        *p -= lr * gv;
    }
    ModelParams::from_flat(cfg, &flat)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let flat = grads.to_flat();
    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for m in [&mut grads.w1, &mut grads.w2, &mut grads.wt] {
            for v in m.data_mut() {
                *v *= scale;
            }
        }
        for vec in [
            &mut grads.b1,
            &mut grads.b2,
            &mut grads.bt,
            &mut grads.pool_img,
            &mut grads.pool_txt,
        ] {
            for v in vec.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Step-decay schedule: `lr0 * 0.9^(epoch / 10)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.9f64.powi((epoch / 10) as i32)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rsum: f64,
}

/// Runs the full loop: per epoch, deterministic batches through
/// `forward_backward` and the optimizer, then a raw-similarity validation
/// RSUM. Returns the parameters with the best validation RSUM (the final
/// parameters when the validation split is empty) and the per-epoch log.
/// With `run_dir` set, writes `ckpt_epoch_NNN.uamp` and `log.jsonl`.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut params = init_params(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(model_cfg.param_count());
    let objective = cfg.objective(model_cfg);
    let mut log = Vec::new();

    if cfg.epochs > 0 {
        let n_train = ds.splits.train.len();
        if n_train == 0 {
            return Err(Error::InvalidArg {
                op: "train",
                msg: "train split is empty".to_string(),
            });
        }
        if n_train < cfg.batch_size {
            return Err(Error::InvalidArg {
                op: "train",
                msg: format!(
                    "train split ({n_train} images) is smaller than batch_size {}",
                    cfg.batch_size
                ),
            });
        }
    }

    let mut log_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            let path = dir.join("log.jsonl");
            Some(std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
            ))
        }
        None => None,
    };

    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let epoch_batches = batches(ds, Split::Train, cfg.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for batch in &epoch_batches {
            let (loss, mut grads) = forward_backward(ds, batch, &params, &objective)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric {
                    msg: format!("non-finite loss or gradient at epoch {epoch}"),
                });
            }
            loss_sum += loss;
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            match cfg.optimizer {
                OptimizerKind::Adam => {
                    let (p, s) = adam_step(model_cfg, &params, &grads, &adam, lr)?;
                    params = p;
                    adam = s;
                }
                OptimizerKind::Sgd => {
                    params = sgd_step(model_cfg, &params, &grads, lr)?;
                }
            }
        }
        let train_loss = loss_sum / epoch_batches.len() as f64;

        let val_rsum = if ds.splits.val.is_empty() {
            0.0
        } else {
            let scored = crate::pipeline::score_split(ds, Split::Val, &params, model_cfg)?;
            crate::eval::report(&scored.matrix.values, &scored.caption_to_image)?.rsum
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_rsum,
        };
        if let Some(w) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: "log.jsonl".to_string(),
                source: e,
            })?;
        }
        log.push(record);
        if let Some(dir) = run_dir {
            let path = dir.join(format!("ckpt_epoch_{epoch:03}.uamp"));
            save_checkpoint(&path, model_cfg, &params)?;
        }
        let better = match &best {
            Some((rsum, _)) => val_rsum > *rsum,
            None => true,
        };
        if ds.splits.val.is_empty() || better {
            best = Some((val_rsum, params.clone()));
        }
    }
    if let Some(w) = log_file.as_mut() {
        w.flush().map_err(|e| Error::Io {
            path: "log.jsonl".to_string(),
            source: e,
        })?;
    }
    let final_params = best.map(|(_, p)| p).unwrap_or(params);
    Ok((final_params, log))
}
