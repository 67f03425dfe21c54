//! Pre-layer-norm decoder-only transformer in `f64`, with an explicit
//! backward pass.
//!
//! Per block: `x += Wo · attn(LN1(x)) + bo`, then
//! `x += W2 · gelu(W1 · LN2(x) + b1) + b2`. Learned absolute positions,
//! untied output head. Every matrix is stored `[out, in]` row-major, so the
//! attention output projection consumes the head-major concatenation of
//! head outputs through its columns.

use std::collections::BTreeMap;
use std::path::Path;

use omniweights_core::surgery::{ArchitectureSpec, HeadMaskSpec, OutputLayout};
use omniweights_core::{DType, Metadata, TensorArchive, TensorEntry, WriteOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ToyConfig;
use crate::error::{LabError, Result};
use crate::tasks::Sample;

const LN_EPS: f64 = 1e-5;
const CONFIG_KEY: &str = "toy_config";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_w: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_w: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_w: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub lm_head: Vec<f64>,
}

/// Role of a parameter tensor, for sampling gradient checks per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorClass {
    Embedding,
    Position,
    NormWeight,
    NormBias,
    AttnWeight,
    AttnBias,
    AttnOutWeight,
    MlpWeight,
    MlpBias,
    Head,
}

/// Names and shapes of every parameter tensor, in canonical order.
pub fn tensor_layout(cfg: &ToyConfig) -> Vec<(String, Vec<usize>, TensorClass)> {
    use TensorClass::*;
    let (d, f, v) = (cfg.hidden_dim, cfg.mlp_dim, cfg.vocab);
    let mut out = vec![
        ("tok_emb.weight".to_string(), vec![v, d], Embedding),
        ("pos_emb.weight".to_string(), vec![cfg.context, d], Position),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.weight"), vec![d], NormWeight),
            (p("ln1.bias"), vec![d], NormBias),
            (p("attn.q.weight"), vec![d, d], AttnWeight),
            (p("attn.q.bias"), vec![d], AttnBias),
            (p("attn.k.weight"), vec![d, d], AttnWeight),
            (p("attn.k.bias"), vec![d], AttnBias),
            (p("attn.v.weight"), vec![d, d], AttnWeight),
            (p("attn.v.bias"), vec![d], AttnBias),
            (p("attn.o.weight"), vec![d, d], AttnOutWeight),
            (p("attn.o.bias"), vec![d], AttnBias),
            (p("ln2.weight"), vec![d], NormWeight),
            (p("ln2.bias"), vec![d], NormBias),
            (p("mlp.fc.weight"), vec![f, d], MlpWeight),
            (p("mlp.fc.bias"), vec![f], MlpBias),
            (p("mlp.proj.weight"), vec![d, f], MlpWeight),
            (p("mlp.proj.bias"), vec![d], MlpBias),
        ]);
    }
    out.extend([
        ("ln_f.weight".to_string(), vec![d], NormWeight),
        ("ln_f.bias".to_string(), vec![d], NormBias),
        ("lm_head.weight".to_string(), vec![v, d], Head),
    ]);
    out
}

/// Head-surgery description of the toy layout.
pub fn architecture_spec(cfg: &ToyConfig) -> ArchitectureSpec {
    ArchitectureSpec {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        n_kv_heads: None,
        head_dim: cfg.head_dim,
        hidden_dim: cfg.hidden_dim,
        query: "blocks.{layer}.attn.q.weight".into(),
        key: "blocks.{layer}.attn.k.weight".into(),
        value: "blocks.{layer}.attn.v.weight".into(),
        output: "blocks.{layer}.attn.o.weight".into(),
        layout: OutputLayout::OutIn,
    }
}

impl Block {
    fn tensors(&self) -> [&Vec<f64>; 16] {
        [
            &self.ln1_w, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_w, &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 16] {
        [
            &mut self.ln1_w, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_w, &mut self.ln2_b, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

impl Params {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let (d, f) = (cfg.hidden_dim, cfg.mlp_dim);
        let block = || Block {
            ln1_w: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_w: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_fc: vec![0.0; f * d],
            b_fc: vec![0.0; f],
            w_proj: vec![0.0; d * f],
            b_proj: vec![0.0; d],
        };
        Params {
            tok_emb: vec![0.0; cfg.vocab * d],
            pos_emb: vec![0.0; cfg.context * d],
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            lnf_w: vec![0.0; d],
            lnf_b: vec![0.0; d],
            lm_head: vec![0.0; cfg.vocab * d],
        }
    }

    /// All tensors in `tensor_layout` order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_w, &self.lnf_b, &self.lm_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_w, &mut self.lnf_b, &mut self.lm_head]);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of every tensor in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ToyConfig,
    pub params: Params,
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[m x n] = x[m x k] * w[n x k]^T + bias`.
fn linear(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    gemm(m, k, n, x, (k, 1), w, (1, k), 1.0, &mut y);
    y
}

/// Accumulate the weight/bias gradients of `linear` and return `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    m: usize,
    k: usize,
    n: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    // dw[n x k] += dy^T[n x m] * x[m x k]
    gemm(n, m, k, dy, (1, n), x, (k, 1), 1.0, dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(n) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    // dx[m x k] = dy[m x n] * w[n x k]
    let mut dx = vec![0.0; m * k];
    gemm(m, n, k, dy, (n, 1), w, (k, 1), 0.0, &mut dx);
    dx
}

struct NormCache {
    out: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64], d: usize) -> NormCache {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            out[r * d + i] = h * w[i] + b[i];
        }
    }
    NormCache { out, xhat, rstd }
}

fn layer_norm_backward(cache: &NormCache, w: &[f64], dy: &[f64], d: usize, dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = &dy[r * d..(r + 1) * d];
        let h = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gh = 0.0;
        for i in 0..d {
            dw[i] += g[i] * h[i];
            db[i] += g[i];
            dxhat[i] = g[i] * w[i];
            mean_g += dxhat[i];
            mean_gh += dxhat[i] * h[i];
        }
        mean_g /= d as f64;
        mean_gh /= d as f64;
        let s = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = s * (dxhat[i] - mean_g - h[i] * mean_gh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// forward / backward

struct LayerCache {
    ln1: NormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[batch, head, query, key]` attention probabilities.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

struct ForwardCache {
    batch: usize,
    len: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
}

impl ToyModel {
    pub fn new(cfg: ToyConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let layout = tensor_layout(&cfg);
        for ((name, shape, _), t) in layout.iter().zip(params.tensors()) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(LabError::Input(format!("parameter {name} has {} values for shape {shape:?}", t.len())));
            }
        }
        Ok(ToyModel { cfg, params })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every
    /// matrix (fan_in = row length); zero biases, unit norm weights.
    pub fn init(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(cfg);
        let layout = tensor_layout(cfg);
        for ((_, shape, class), t) in layout.iter().zip(params.tensors_mut()) {
            match class {
                TensorClass::NormWeight => t.fill(1.0),
                TensorClass::NormBias | TensorClass::AttnBias | TensorClass::MlpBias => {}
                _ => {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    for x in t.iter_mut() {
                        *x = rng.gen_range(-bound..bound);
                    }
                }
            }
        }
        Ok(ToyModel { cfg: cfg.clone(), params })
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        architecture_spec(&self.cfg)
    }

    /// Write every parameter as an F64 tensor, with the config in metadata.
    pub fn save(&self, path: impl AsRef<Path>, extra: Option<&Metadata>) -> Result<TensorArchive> {
        let entries: Vec<TensorEntry> = tensor_layout(&self.cfg)
            .into_iter()
            .zip(self.params.tensors())
            .map(|((name, shape, _), t)| TensorEntry::new(name, DType::F64, shape, t.clone()))
            .collect();
        let mut meta = extra.cloned().unwrap_or_default();
        meta.insert(CONFIG_KEY.into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        Ok(omniweights_core::write_archive(&entries, path, Some(&meta), WriteOptions::default())?)
    }

    /// Load a model; the config comes from `cfg` or else the archive metadata.
    pub fn load(archive: &TensorArchive, cfg: Option<&ToyConfig>) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c.clone(),
            None => {
                let raw = archive
                    .metadata()
                    .and_then(|m| m.get(CONFIG_KEY))
                    .ok_or_else(|| LabError::Input(format!("{}: no {CONFIG_KEY} metadata", archive.path().display())))?;
                serde_json::from_str(raw).map_err(|e| LabError::Input(format!("{CONFIG_KEY}: {e}")))?
            }
        };
        cfg.validate()?;
        let mut params = Params::zeros(&cfg);
        for ((name, shape, _), t) in tensor_layout(&cfg).iter().zip(params.tensors_mut()) {
            let tensor = archive.read_tensor(name)?;
            if &tensor.shape != shape {
                return Err(LabError::Input(format!("{name}: shape {:?}, expected {shape:?}", tensor.shape)));
            }
            *t = tensor.values;
        }
        Ok(ToyModel { cfg, params })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let archive = TensorArchive::open(path)?;
        Self::load(&archive, None)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(LabError::Input("empty sequence".into()));
        }
        if tokens.len() > self.cfg.context {
            return Err(LabError::Input(format!(
                "sequence of {} tokens exceeds the {}-token context",
                tokens.len(),
                self.cfg.context
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.cfg.vocab) {
            return Err(LabError::Input(format!("token {t} outside the {}-token vocabulary", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Run the blocks over `batch` sequences of `len` tokens each.
    fn forward_hidden(&self, tokens: &[u32], batch: usize, len: usize, ablate: Option<HeadMaskSpec>) -> ForwardCache {
        let cfg = &self.cfg;
        let (d, f, nh, hd) = (cfg.hidden_dim, cfg.mlp_dim, cfg.n_heads, cfg.head_dim);
        let rows = batch * len;
        let p = &self.params;
        let mut x = vec![0.0; rows * d];
        for (r, &tok) in tokens.iter().enumerate() {
            let pos = r % len;
            let te = &p.tok_emb[tok as usize * d..(tok as usize + 1) * d];
            let pe = &p.pos_emb[pos * d..(pos + 1) * d];
            for i in 0..d {
                x[r * d + i] = te[i] + pe[i];
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, blk) in p.blocks.iter().enumerate() {
            let ln1 = layer_norm(&x, &blk.ln1_w, &blk.ln1_b, d);
            let q = linear(&ln1.out, &blk.wq, Some(&blk.bq), rows, d, d);
            let k = linear(&ln1.out, &blk.wk, Some(&blk.bk), rows, d, d);
            let v = linear(&ln1.out, &blk.wv, Some(&blk.bv), rows, d, d);
            let mut probs = vec![0.0; batch * nh * len * len];
            let mut attn = vec![0.0; rows * d];
            let mut scores = vec![0.0; len];
            for b in 0..batch {
                for h in 0..nh {
                    let ablated = ablate == Some(HeadMaskSpec { layer: l, head: h });
                    let pbase = (b * nh + h) * len * len;
                    for i in 0..len {
                        let qi = &q[(b * len + i) * d + h * hd..][..hd];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..=i {
                            let kj = &k[(b * len + j) * d + h * hd..][..hd];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                        let mut sum = 0.0;
                        for s in scores[..=i].iter_mut() {
                            *s = (*s - max).exp();
                            sum += *s;
                        }
                        let prow = &mut probs[pbase + i * len..][..len];
                        for j in 0..=i {
                            prow[j] = scores[j] / sum;
                        }
                        if ablated {
                            continue;
                        }
                        let out = &mut attn[(b * len + i) * d + h * hd..][..hd];
                        for j in 0..=i {
                            let vj = &v[(b * len + j) * d + h * hd..][..hd];
                            let pij = prow[j];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += pij * vv;
                            }
                        }
                    }
                }
            }
            let proj = linear(&attn, &blk.wo, Some(&blk.bo), rows, d, d);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let ln2 = layer_norm(&x, &blk.ln2_w, &blk.ln2_b, d);
            let fc_pre = linear(&ln2.out, &blk.w_fc, Some(&blk.b_fc), rows, d, f);
            let fc_act: Vec<f64> = fc_pre.iter().map(|v| gelu(*v)).collect();
            let mlp = linear(&fc_act, &blk.w_proj, Some(&blk.b_proj), rows, f, d);
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }
            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                fc_pre,
                fc_act,
            });
        }
        let lnf = layer_norm(&x, &p.lnf_w, &p.lnf_b, d);
        ForwardCache {
            batch,
            len,
            tokens: tokens.to_vec(),
            layers,
            lnf,
        }
    }

    fn head_logits(&self, cache: &ForwardCache, rows: &[usize]) -> Vec<f64> {
        let d = self.cfg.hidden_dim;
        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            gathered.extend_from_slice(&cache.lnf.out[r * d..(r + 1) * d]);
        }
        linear(&gathered, &self.params.lm_head, None, rows.len(), d, self.cfg.vocab)
    }

    /// Next-token logits at every position of one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.forward_ablated(tokens, None)
    }

    /// Forward pass with one head's attention output replaced by zeros at
    /// run time.
    pub fn forward_ablated(&self, tokens: &[u32], ablate: Option<HeadMaskSpec>) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let cache = self.forward_hidden(tokens, 1, tokens.len(), ablate);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = self.head_logits(&cache, &rows);
        Ok(logits.chunks_exact(self.cfg.vocab).map(<[f64]>::to_vec).collect())
    }

    /// Logits at one position of each sequence. Sequences of equal length
    /// are batched together; results come back in input order.
    pub fn logits_at(&self, queries: &[(&[u32], usize)], ablate: Option<HeadMaskSpec>) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); queries.len()];
        for (len, members) in group_by_len(queries.iter().map(|(t, _)| t.len())) {
            let mut tokens = Vec::with_capacity(members.len() * len);
            let mut rows = Vec::with_capacity(members.len());
            for (slot, &i) in members.iter().enumerate() {
                let (t, pos) = queries[i];
                self.check_tokens(t)?;
                if pos >= len {
                    return Err(LabError::Input(format!("position {pos} outside a {len}-token sequence")));
                }
                tokens.extend_from_slice(t);
                rows.push(slot * len + pos);
            }
            let cache = self.forward_hidden(&tokens, members.len(), len, ablate);
            let logits = self.head_logits(&cache, &rows);
            for (&i, row) in members.iter().zip(logits.chunks_exact(self.cfg.vocab)) {
                out[i] = row.to_vec();
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy over every supervised position of the batch.
    pub fn loss(&self, batch: &[Sample], ablate: Option<HeadMaskSpec>) -> Result<f64> {
        let n_targets = count_targets(batch)?;
        let mut total = 0.0;
        for (len, members) in group_by_len(batch.iter().map(|s| s.tokens.len())) {
            let (tokens, targets) = self.pack(batch, &members, len)?;
            let cache = self.forward_hidden(&tokens, members.len(), len, ablate);
            let rows: Vec<usize> = targets.iter().map(|(r, _)| *r).collect();
            let logits = self.head_logits(&cache, &rows);
            for ((_, target), row) in targets.iter().zip(logits.chunks_exact(self.cfg.vocab)) {
                total += cross_entropy(row, *target as usize).0;
            }
        }
        Ok(total / n_targets as f64)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &[Sample], ablate: Option<HeadMaskSpec>) -> Result<(f64, Params)> {
        let n_targets = count_targets(batch)?;
        let mut grads = Params::zeros(&self.cfg);
        let mut total = 0.0;
        for (len, members) in group_by_len(batch.iter().map(|s| s.tokens.len())) {
            let (tokens, targets) = self.pack(batch, &members, len)?;
            let cache = self.forward_hidden(&tokens, members.len(), len, ablate);
            let rows: Vec<usize> = targets.iter().map(|(r, _)| *r).collect();
            let logits = self.head_logits(&cache, &rows);
            let mut dlogits = Vec::with_capacity(logits.len());
            for ((_, target), row) in targets.iter().zip(logits.chunks_exact(self.cfg.vocab)) {
                let (loss, grad) = cross_entropy(row, *target as usize);
                total += loss;
                dlogits.extend(grad.into_iter().map(|g| g / n_targets as f64));
            }
            self.backward(&cache, &rows, &dlogits, ablate, &mut grads);
        }
        Ok((total / n_targets as f64, grads))
    }

    fn pack(&self, batch: &[Sample], members: &[usize], len: usize) -> Result<(Vec<u32>, Vec<(usize, u32)>)> {
        let mut tokens = Vec::with_capacity(members.len() * len);
        let mut targets = Vec::new();
        for (slot, &i) in members.iter().enumerate() {
            let s = &batch[i];
            self.check_tokens(&s.tokens)?;
            tokens.extend_from_slice(&s.tokens);
            for &(pos, t) in &s.targets {
                if pos >= len || t as usize >= self.cfg.vocab {
                    return Err(LabError::Input(format!("target ({pos}, {t}) out of range")));
                }
                targets.push((slot * len + pos, t));
            }
        }
        Ok((tokens, targets))
    }

    fn backward(&self, cache: &ForwardCache, rows: &[usize], dlogits: &[f64], ablate: Option<HeadMaskSpec>, g: &mut Params) {
        let cfg = &self.cfg;
        let (d, f, nh, hd, v) = (cfg.hidden_dim, cfg.mlp_dim, cfg.n_heads, cfg.head_dim, cfg.vocab);
        let (batch, len) = (cache.batch, cache.len);
        let n_rows = batch * len;
        let p = &self.params;

        // output head on the gathered rows
        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            gathered.extend_from_slice(&cache.lnf.out[r * d..(r + 1) * d]);
        }
        let dgathered = linear_backward(&gathered, &p.lm_head, dlogits, rows.len(), d, v, &mut g.lm_head, None);
        let mut dlnf = vec![0.0; n_rows * d];
        for (k, &r) in rows.iter().enumerate() {
            for i in 0..d {
                dlnf[r * d + i] += dgathered[k * d + i];
            }
        }
        let mut dx = layer_norm_backward(&cache.lnf, &p.lnf_w, &dlnf, d, &mut g.lnf_w, &mut g.lnf_b);

        let scale = 1.0 / (hd as f64).sqrt();
        for l in (0..cfg.n_layers).rev() {
            let blk = &p.blocks[l];
            let c = &cache.layers[l];
            let gb = &mut g.blocks[l];

            // MLP
            let dact = linear_backward(&c.fc_act, &blk.w_proj, &dx, n_rows, f, d, &mut gb.w_proj, Some(&mut gb.b_proj));
            let dpre: Vec<f64> = dact.iter().zip(&c.fc_pre).map(|(g, x)| g * gelu_grad(*x)).collect();
            let dln2 = linear_backward(&c.ln2.out, &blk.w_fc, &dpre, n_rows, d, f, &mut gb.w_fc, Some(&mut gb.b_fc));
            let dmid = layer_norm_backward(&c.ln2, &blk.ln2_w, &dln2, d, &mut gb.ln2_w, &mut gb.ln2_b);
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // attention
            let mut dattn = linear_backward(&c.attn, &blk.wo, &dx, n_rows, d, d, &mut gb.wo, Some(&mut gb.bo));
            let mut dq = vec![0.0; n_rows * d];
            let mut dk = vec![0.0; n_rows * d];
            let mut dv = vec![0.0; n_rows * d];
            let mut dp = vec![0.0; len];
            for b in 0..batch {
                for h in 0..nh {
                    if ablate == Some(HeadMaskSpec { layer: l, head: h }) {
                        // the head's output is a constant zero
                        for i in 0..len {
                            dattn[(b * len + i) * d + h * hd..][..hd].fill(0.0);
                        }
                        continue;
                    }
                    let pbase = (b * nh + h) * len * len;
                    for i in 0..len {
                        let dout = &dattn[(b * len + i) * d + h * hd..][..hd];
                        let prow = &c.probs[pbase + i * len..][..len];
                        let mut weighted = 0.0;
                        for j in 0..=i {
                            let vj = &c.v[(b * len + j) * d + h * hd..][..hd];
                            dp[j] = dot(dout, vj);
                            weighted += prow[j] * dp[j];
                            let dvj = &mut dv[(b * len + j) * d + h * hd..][..hd];
                            for (a, o) in dvj.iter_mut().zip(dout) {
                                *a += prow[j] * o;
                            }
                        }
                        let qi = &c.q[(b * len + i) * d + h * hd..][..hd];
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &c.k[(b * len + j) * d + h * hd..][..hd];
                            let dqi = &mut dq[(b * len + i) * d + h * hd..][..hd];
                            for (a, kk) in dqi.iter_mut().zip(kj) {
                                *a += ds * kk;
                            }
                            let dkj = &mut dk[(b * len + j) * d + h * hd..][..hd];
                            for (a, qq) in dkj.iter_mut().zip(qi) {
                                *a += ds * qq;
                            }
                        }
                    }
                }
            }
            let mut dln1 = linear_backward(&c.ln1.out, &blk.wq, &dq, n_rows, d, d, &mut gb.wq, Some(&mut gb.bq));
            let dk_in = linear_backward(&c.ln1.out, &blk.wk, &dk, n_rows, d, d, &mut gb.wk, Some(&mut gb.bk));
            let dv_in = linear_backward(&c.ln1.out, &blk.wv, &dv, n_rows, d, d, &mut gb.wv, Some(&mut gb.bv));
            for ((a, b), c2) in dln1.iter_mut().zip(&dk_in).zip(&dv_in) {
                *a += b + c2;
            }
            let din = layer_norm_backward(&c.ln1, &blk.ln1_w, &dln1, d, &mut gb.ln1_w, &mut gb.ln1_b);
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        for (r, &tok) in cache.tokens.iter().enumerate() {
            let pos = r % len;
            let row = &dx[r * d..(r + 1) * d];
            for (a, b) in g.tok_emb[tok as usize * d..][..d].iter_mut().zip(row) {
                *a += b;
            }
            for (a, b) in g.pos_emb[pos * d..][..d].iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss and gradient of softmax cross-entropy for one row of logits.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

fn count_targets(batch: &[Sample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(LabError::Input("empty batch".into()));
    }
    let n: usize = batch.iter().map(|s| s.targets.len()).sum();
    if n == 0 {
        return Err(LabError::Input("batch has no supervised positions".into()));
    }
    Ok(n)
}

/// Indices grouped by sequence length, groups in ascending length order.
fn group_by_len(lens: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, len) in lens.enumerate() {
        groups.entry(len).or_default().push(i);
    }
    groups
}
