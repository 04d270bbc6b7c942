//! The dual-branch encoder: a shared two-layer MLP maps each image region to
//! K view slices, a linear projection maps each caption token, and each
//! branch pools across its vectors and L2-normalizes. The image side yields
//! K unit-norm view embeddings per image; the text side one unit-norm
//! embedding per caption.
//!
//! Checkpoint layout (little-endian): magic `UAMP`, version `u32` = 1, the
//! config counts (`d1,d2,d_emb,k,hidden` as `u32`, pooling as `u8`, `gpo_p`
//! as `u32`), then every parameter tensor as `f64` in flatten order
//! `w1, b1, w2, b2, wt, bt, pool_img, pool_txt` (matrices row-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{l2_norm, Mat, Rng};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"UAMP";
const CHECKPOINT_VERSION: u32 = 1;

/// Norm guard: pooled vectors are divided by `max(|v|, NORM_EPS)`.
pub(crate) const NORM_EPS: f64 = 1e-12;

/// Aggregation over a branch's vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Max,
    /// Learnable coefficients over sorted per-dimension values: the length-P
    /// coefficient vector is linearly interpolated to the input length and
    /// normalized to sum to one, so the uniform vector reproduces mean
    /// pooling and a leading one-hot reproduces max pooling (for n <= P).
    GpoLite,
}

/// Encoder shape configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d1: usize,
    pub d2: usize,
    pub d_emb: usize,
    pub k: usize,
    pub hidden: usize,
    pub pooling: Pooling,
    /// Length of the learnable gpo-lite coefficient vectors.
    pub gpo_p: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d1: 32,
            d2: 24,
            d_emb: 32,
            k: 4,
            hidden: 64,
            pooling: Pooling::GpoLite,
            gpo_p: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("d_emb", self.d_emb),
            ("k", self.k),
            ("hidden", self.hidden),
            ("gpo_p", self.gpo_p),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg {
                    op: "ModelConfig",
                    msg: format!("{name} must be at least 1"),
                });
            }
        }
        Ok(())
    }

    /// Total number of learnable scalars, in flatten order.
    pub fn param_count(&self) -> usize {
        self.hidden * self.d1
            + self.hidden
            + self.k * self.d_emb * self.hidden
            + self.k * self.d_emb
            + self.d_emb * self.d2
            + self.d_emb
            + 2 * self.gpo_p
    }
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// hidden x d1
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// (k * d_emb) x hidden
    pub w2: Mat,
    pub b2: Vec<f64>,
    /// d_emb x d2
    pub wt: Mat,
    pub bt: Vec<f64>,
    pub pool_img: Vec<f64>,
    pub pool_txt: Vec<f64>,
}

impl ModelParams {
    /// Flattens every tensor into one vector in the documented order.
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

    /// Rebuilds params from a flat vector laid out by [`ModelParams::to_flat`].
    pub fn from_flat(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != cfg.param_count() {
            return Err(Error::InvalidArg {
                op: "ModelParams::from_flat",
                msg: format!(
                    "expected {} values for this config, got {}",
                    cfg.param_count(),
                    flat.len()
                ),
            });
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        Ok(Self {
            w1: Mat::new(cfg.hidden, cfg.d1, take(cfg.hidden * cfg.d1))?,
            b1: take(cfg.hidden),
            w2: Mat::new(cfg.k * cfg.d_emb, cfg.hidden, take(cfg.k * cfg.d_emb * cfg.hidden))?,
            b2: take(cfg.k * cfg.d_emb),
            wt: Mat::new(cfg.d_emb, cfg.d2, take(cfg.d_emb * cfg.d2))?,
            bt: take(cfg.d_emb),
            pool_img: take(cfg.gpo_p),
            pool_txt: take(cfg.gpo_p),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Xavier-uniform weights, zero biases, uniform (mean-pooling) gpo-lite
/// coefficients; deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Rng::from_seed(seed);
    let mut xavier = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| -> Mat {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.uniform(-limit, limit));
            }
        }
        m
    };
    let w1 = xavier(cfg.hidden, cfg.d1, cfg.d1, cfg.hidden);
    let w2 = xavier(cfg.k * cfg.d_emb, cfg.hidden, cfg.hidden, cfg.k * cfg.d_emb);
    let wt = xavier(cfg.d_emb, cfg.d2, cfg.d2, cfg.d_emb);
    Ok(ModelParams {
        w1,
        b1: vec![0.0; cfg.hidden],
        w2,
        b2: vec![0.0; cfg.k * cfg.d_emb],
        wt,
        bt: vec![0.0; cfg.d_emb],
        pool_img: vec![1.0 / cfg.gpo_p as f64; cfg.gpo_p],
        pool_txt: vec![1.0 / cfg.gpo_p as f64; cfg.gpo_p],
    })
}

/// Pooling choice record for one pooled vector; the backward pass and the
/// frozen finite-difference forward replay exactly these selections.
#[derive(Debug, Clone)]
pub enum PoolSel {
    Mean,
    /// Per output dimension, the row index that held the maximum.
    Max(Vec<usize>),
    /// Per output dimension, the row indices in descending-value order.
    Gpo(Vec<Vec<usize>>),
}

/// Interpolated, sum-normalized gpo-lite coefficients for `n` rows, plus
/// what the backward pass needs to differentiate through the normalization.
pub(crate) struct GpoInterp {
    /// Per rank: (lo index, hi index, hi fraction) into the raw coefficients.
    pub pos: Vec<(usize, usize, f64)>,
    /// Normalized per-rank weights.
    pub weights: Vec<f64>,
    /// Guarded coefficient sum.
    pub sum: f64,
    /// True when the guard replaced a near-zero sum (sum treated constant).
    pub clamped: bool,
}

pub(crate) fn gpo_interp(coeffs: &[f64], n: usize) -> GpoInterp {
    let p = coeffs.len();
    let mut pos = Vec::with_capacity(n);
    for r in 0..n {
        let x = if n == 1 {
            0.0
        } else {
            r as f64 * (p - 1) as f64 / (n - 1) as f64
        };
        let lo = (x.floor() as usize).min(p - 1);
        let hi = (lo + 1).min(p - 1);
        pos.push((lo, hi, x - lo as f64));
    }
    let raw: Vec<f64> = pos
        .iter()
        .map(|&(lo, hi, frac)| coeffs[lo] * (1.0 - frac) + coeffs[hi] * frac)
        .collect();
    let raw_sum: f64 = raw.iter().sum();
    let clamped = raw_sum.abs() < NORM_EPS;
    let sum = if clamped {
        if raw_sum.is_sign_negative() {
            -NORM_EPS
        } else {
            NORM_EPS
        }
    } else {
        raw_sum
    };
    let weights = raw.iter().map(|w| w / sum).collect();
    GpoInterp {
        pos,
        weights,
        sum,
        clamped,
    }
}

/// Pools the rows of `values` down to one vector. `coeffs` is required for
/// gpo-lite. When `frozen` is given, max indices / sort orders are taken
/// from it instead of being recomputed.
pub(crate) fn pool_with_sel(
    values: &Mat,
    kind: Pooling,
    coeffs: Option<&[f64]>,
    frozen: Option<&PoolSel>,
) -> Result<(Vec<f64>, PoolSel)> {
    let n = values.rows();
    let d = values.cols();
    if n == 0 {
        return Err(Error::EmptyInput { op: "pool" });
    }
    match kind {
        Pooling::Mean => {
            let mut out = vec![0.0; d];
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(values.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= n as f64;
            }
            Ok((out, PoolSel::Mean))
        }
        Pooling::Max => {
            let sel: Vec<usize> = match frozen {
                Some(PoolSel::Max(s)) => s.clone(),
                _ => (0..d)
                    .map(|c| {
                        let mut best = 0;
                        for r in 1..n {
                            if values.get(r, c) > values.get(best, c) {
                                best = r;
                            }
                        }
                        best
                    })
                    .collect(),
            };
            let out = (0..d).map(|c| values.get(sel[c], c)).collect();
            Ok((out, PoolSel::Max(sel)))
        }
        Pooling::GpoLite => {
            let coeffs = coeffs.ok_or_else(|| Error::InvalidArg {
                op: "pool",
                msg: "gpo-lite pooling requires a coefficient vector".to_string(),
            })?;
            if coeffs.is_empty() {
                return Err(Error::InvalidArg {
                    op: "pool",
                    msg: "gpo-lite coefficient vector is empty".to_string(),
                });
            }
            let interp = gpo_interp(coeffs, n);
            let order: Vec<Vec<usize>> = match frozen {
                Some(PoolSel::Gpo(o)) => o.clone(),
                _ => (0..d)
                    .map(|c| {
                        let mut idx: Vec<usize> = (0..n).collect();
                        // Descending by value, ties by ascending row index.
                        idx.sort_by(|&a, &b| {
                            values
                                .get(b, c)
                                .partial_cmp(&values.get(a, c))
                                .unwrap_or(std::cmp::Ordering::Equal)
                                .then(a.cmp(&b))
                        });
                        idx
                    })
                    .collect(),
            };
            let mut out = vec![0.0; d];
            for (c, o) in out.iter_mut().enumerate() {
                for (rank, &row) in order[c].iter().enumerate() {
                    *o += interp.weights[rank] * values.get(row, c);
                }
            }
            Ok((out, PoolSel::Gpo(order)))
        }
    }
}

/// Accumulates pooling gradients: `g` is dL/d(pooled), `d_values` receives
/// dL/d(values), and for gpo-lite `d_coeffs` receives dL/d(coefficients).
pub(crate) fn pool_backward(
    values: &Mat,
    pooled: &[f64],
    g: &[f64],
    kind: Pooling,
    coeffs: Option<&[f64]>,
    sel: &PoolSel,
    d_values: &mut Mat,
    mut d_coeffs: Option<&mut [f64]>,
) {
    let n = values.rows();
    let d = values.cols();
    match (kind, sel) {
        (Pooling::Mean, _) => {
            let inv = 1.0 / n as f64;
            for r in 0..n {
                for c in 0..d {
                    d_values.add_at(r, c, g[c] * inv);
                }
            }
        }
        (Pooling::Max, PoolSel::Max(sel)) => {
            for c in 0..d {
                d_values.add_at(sel[c], c, g[c]);
            }
        }
        (Pooling::GpoLite, PoolSel::Gpo(order)) => {
            let coeffs = coeffs.expect("gpo-lite backward requires coefficients");
            let interp = gpo_interp(coeffs, n);
            // dL/d(values): each row receives its rank's weight.
            for c in 0..d {
                for (rank, &row) in order[c].iter().enumerate() {
                    d_values.add_at(row, c, interp.weights[rank] * g[c]);
                }
            }
            if let Some(dc) = d_coeffs.as_deref_mut() {
                // Per rank r: w_r = sum_d g_d * sorted_value(r, d); the
                // normalization couples ranks through gy = sum_d g_d * out_d.
                let gy: f64 = g.iter().zip(pooled).map(|(a, b)| a * b).sum();
                for (rank, &(lo, hi, frac)) in interp.pos.iter().enumerate() {
                    let mut w_r = 0.0;
                    for c in 0..d {
                        w_r += g[c] * values.get(order[c][rank], c);
                    }
                    let adj = if interp.clamped { w_r } else { w_r - gy };
                    dc[lo] += (1.0 - frac) * adj / interp.sum;
                    dc[hi] += frac * adj / interp.sum;
                }
            }
        }
        _ => unreachable!("pooling kind and selection record disagree"),
    }
}

/// Public pooling operation: column means, column maxima, or the
/// interpolated-coefficient weighted sum over sorted values.
pub fn pool(features: &Mat, kind: Pooling, coeffs: Option<&[f64]>) -> Result<Vec<f64>> {
    pool_with_sel(features, kind, coeffs, None).map(|(out, _)| out)
}

pub(crate) fn l2_normalize_guarded(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = l2_norm(v).max(NORM_EPS);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Backward through `out = v / max(|v|, eps)`.
pub(crate) fn l2_norm_backward(out: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    if norm <= NORM_EPS {
        // Guard active: the divisor is constant.
        return g.iter().map(|x| x / norm).collect();
    }
    let proj: f64 = out.iter().zip(g).map(|(o, x)| o * x).sum();
    out.iter()
        .zip(g)
        .map(|(o, x)| (x - o * proj) / norm)
        .collect()
}

/// `x` (n x in) through `w` (out x in) plus bias, row-wise.
pub(crate) fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (o, (wr, bias)) in or.iter_mut().zip((0..w.rows()).map(|i| w.row(i)).zip(b)) {
            *o = crate::numerics::dot(xr, wr) + bias;
        }
    }
    out
}

/// Forward intermediates for one image, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ImageTrace {
    /// N x hidden, post-ReLU.
    pub hidden: Mat,
    /// N x (k * d_emb), the per-region view slices before pooling.
    pub views_raw: Mat,
    /// k x d_emb, pooled per view, before normalization.
    pub pooled: Mat,
    /// Guarded norms per view.
    pub norms: Vec<f64>,
    /// k x d_emb, unit rows.
    pub out: Mat,
    pub sel: Vec<PoolSel>,
}

/// Forward intermediates for one caption.
#[derive(Debug, Clone)]
pub(crate) struct TextTrace {
    /// M x d_emb projected tokens.
    pub proj: Mat,
    pub pooled: Vec<f64>,
    pub norm: f64,
    pub out: Vec<f64>,
    pub sel: PoolSel,
}

pub(crate) fn forward_image(
    regions: &Mat,
    params: &ModelParams,
    cfg: &ModelConfig,
    frozen: Option<&[PoolSel]>,
) -> Result<ImageTrace> {
    if regions.rows() == 0 {
        return Err(Error::EmptyInput { op: "encode_image" });
    }
    if regions.cols() != cfg.d1 {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            left: (regions.rows(), regions.cols()),
            right: (regions.rows(), cfg.d1),
        });
    }
    let mut hidden = affine(regions, &params.w1, &params.b1);
    for v in hidden.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let views_raw = affine(&hidden, &params.w2, &params.b2);
    let n = regions.rows();
    let mut pooled = Mat::zeros(cfg.k, cfg.d_emb);
    let mut out = Mat::zeros(cfg.k, cfg.d_emb);
    let mut norms = Vec::with_capacity(cfg.k);
    let mut sels = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let mut slice = Mat::zeros(n, cfg.d_emb);
        for r in 0..n {
            let src = &views_raw.row(r)[k * cfg.d_emb..(k + 1) * cfg.d_emb];
            slice.row_mut(r).copy_from_slice(src);
        }
        let (p, sel) = pool_with_sel(
            &slice,
            cfg.pooling,
            Some(&params.pool_img),
            frozen.map(|f| &f[k]),
        )?;
        let (normed, norm) = l2_normalize_guarded(&p);
        pooled.row_mut(k).copy_from_slice(&p);
        out.row_mut(k).copy_from_slice(&normed);
        norms.push(norm);
        sels.push(sel);
    }
    Ok(ImageTrace {
        hidden,
        views_raw,
        pooled,
        norms,
        out,
        sel: sels,
    })
}

pub(crate) fn forward_text(
    tokens: &Mat,
    params: &ModelParams,
    cfg: &ModelConfig,
    frozen: Option<&PoolSel>,
) -> Result<TextTrace> {
    if tokens.rows() == 0 {
        return Err(Error::EmptyInput { op: "encode_text" });
    }
    if tokens.cols() != cfg.d2 {
        return Err(Error::ShapeMismatch {
            op: "encode_text",
            left: (tokens.rows(), tokens.cols()),
            right: (tokens.rows(), cfg.d2),
        });
    }
    let proj = affine(tokens, &params.wt, &params.bt);
    let (pooled, sel) = pool_with_sel(&proj, cfg.pooling, Some(&params.pool_txt), frozen)?;
    let (out, norm) = l2_normalize_guarded(&pooled);
    Ok(TextTrace {
        proj,
        pooled,
        norm,
        out,
        sel,
    })
}

/// Encodes one image's region features into K unit-norm view embeddings
/// (one row per view).
pub fn encode_image(regions: &Mat, params: &ModelParams, cfg: &ModelConfig) -> Result<Mat> {
    forward_image(regions, params, cfg, None).map(|t| t.out)
}

/// Encodes one caption's token features into a unit-norm embedding.
pub fn encode_text(tokens: &Mat, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    forward_text(tokens, params, cfg, None).map(|t| t.out)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn pooling_byte(p: Pooling) -> u8 {
    match p {
        Pooling::Mean => 0,
        Pooling::Max => 1,
        Pooling::GpoLite => 2,
    }
}

fn pooling_from_byte(b: u8) -> Option<Pooling> {
    match b {
        0 => Some(Pooling::Mean),
        1 => Some(Pooling::Max),
        2 => Some(Pooling::GpoLite),
        _ => None,
    }
}

/// Writes a checkpoint containing the config and all parameters.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<()> { w.write_all(bytes).map_err(|e| io_err(path, e)) };
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [cfg.d1, cfg.d2, cfg.d_emb, cfg.k, cfg.hidden] {
        write(&(v as u32).to_le_bytes())?;
    }
    write(&[pooling_byte(cfg.pooling)])?;
    write(&(cfg.gpo_p as u32).to_le_bytes())?;
    for v in params.to_flat() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct CheckpointReader {
    inner: BufReader<File>,
    offset: u64,
    path: String,
}

impl CheckpointReader {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: self.path.clone(),
                    offset: at,
                    msg: format!("truncated checkpoint, needed {} more bytes", buf.len()),
                }
            } else {
                Error::Io {
                    path: self.path.clone(),
                    source: e,
                }
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn bad(&self, offset: u64, msg: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            msg,
        }
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = CheckpointReader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(r.bad(0, format!("bad magic {magic:02x?}, expected \"UAMP\"")));
    }
    let mut b4 = [0u8; 4];
    r.take(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(4, format!("unsupported version {version}")));
    }
    let mut counts = [0usize; 5];
    for c in &mut counts {
        r.take(&mut b4)?;
        *c = u32::from_le_bytes(b4) as usize;
    }
    let mut b1 = [0u8; 1];
    r.take(&mut b1)?;
    let pooling = pooling_from_byte(b1[0])
        .ok_or_else(|| r.bad(r.offset - 1, format!("unknown pooling kind {}", b1[0])))?;
    r.take(&mut b4)?;
    let gpo_p = u32::from_le_bytes(b4) as usize;
    let cfg = ModelConfig {
        d1: counts[0],
        d2: counts[1],
        d_emb: counts[2],
        k: counts[3],
        hidden: counts[4],
        pooling,
        gpo_p,
    };
    cfg.validate()?;
    let mut flat = vec![0.0; cfg.param_count()];
    let mut b8 = [0u8; 8];
    for v in &mut flat {
        take(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    let params = ModelParams::from_flat(&cfg, &flat)?;
    Ok((cfg, params))
}
