use std::path::Path;

use serde::{Deserialize, Serialize};
use tilestream_nn::{uniform, Graph, LayerNorm, Linear, Matrix, ParamId, ParamStore, Var};

use crate::geometry::{wrap_distance, TileGrid, ViewportPoint};
use crate::Error;

/// Additive attention-mask value for disallowed positions.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Input/output head count `M`.
    pub heads: usize,
    pub d_model: usize,
    pub attn_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub blocks: usize,
    pub history: usize,
    pub horizon: usize,
    pub ffn_width: usize,
    pub video_width: f64,
    pub video_height: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            heads: 3,
            d_model: 512,
            attn_heads: 8,
            d_k: 64,
            d_v: 64,
            blocks: 2,
            history: 5,
            horizon: 5,
            ffn_width: 2048,
            video_width: 3840.0,
            video_height: 1920.0,
        }
    }
}

impl PredictorConfig {
    /// Reduced widths for CPU-scale experiments.
    pub fn small() -> Self {
        Self {
            d_model: 64,
            attn_heads: 4,
            d_k: 16,
            d_v: 16,
            blocks: 1,
            ffn_width: 256,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> TileGrid {
        TileGrid {
            rows: 8,
            cols: 8,
            video_width: self.video_width,
            video_height: self.video_height,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("attn_heads", self.attn_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("blocks", self.blocks),
            ("history", self.history),
            ("horizon", self.horizon),
            ("ffn_width", self.ffn_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("predictor {name} must be positive")));
            }
        }
        if !(self.video_width > 0.0 && self.video_height > 0.0) {
            return Err(Error::Config("frame size must be positive".into()));
        }
        Ok(())
    }

    fn distilled_len(&self) -> usize {
        if self.history == 1 {
            1
        } else {
            self.history.div_ceil(2)
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Glorot-uniform with the given fan sizes from a dedicated stream.
    Glorot { fan_in: usize, fan_out: usize, stream: u64 },
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

/// Shared layers draw from stream 1; head `i` draws its input and output
/// projections from streams `100 + i` and `200 + i` so that heads start
/// independently.
fn layout(cfg: &PredictorConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = cfg.d_model;
    let mut add = |name: String, rows: usize, cols: usize, init: Init| out.push(ParamSpec { name, rows, cols, init });
    let glorot = |r: usize, c: usize| Init::Glorot {
        fan_in: r,
        fan_out: c,
        stream: 1,
    };
    let m2 = 2 * cfg.heads;
    for prefix in ["enc_in", "dec_in"] {
        for i in 0..cfg.heads {
            add(
                format!("{prefix}.{i}.w"),
                2,
                d,
                Init::Glorot {
                    fan_in: m2,
                    fan_out: d,
                    stream: 100 + i as u64 + if prefix == "dec_in" { 50 } else { 0 },
                },
            );
        }
        add(format!("{prefix}.b"), 1, d, Init::Zeros);
    }
    let attn = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        let qk = cfg.attn_heads * cfg.d_k;
        let v = cfg.attn_heads * cfg.d_v;
        add(format!("{p}.wq.w"), d, qk, glorot(d, qk));
        add(format!("{p}.wk.w"), d, qk, glorot(d, qk));
        add(format!("{p}.wv.w"), d, v, glorot(d, v));
        add(format!("{p}.wo.w"), v, d, glorot(v, d));
    };
    let norm = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        add(format!("{p}.gain"), 1, d, Init::Ones);
        add(format!("{p}.shift"), 1, d, Init::Zeros);
    };
    let ffn = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        add(format!("{p}.ff1.w"), d, cfg.ffn_width, glorot(d, cfg.ffn_width));
        add(format!("{p}.ff1.b"), 1, cfg.ffn_width, Init::Zeros);
        add(format!("{p}.ff2.w"), cfg.ffn_width, d, glorot(cfg.ffn_width, d));
        add(format!("{p}.ff2.b"), 1, d, Init::Zeros);
    };
    for l in 0..cfg.blocks {
        let p = format!("enc.{l}");
        attn(&mut add, &format!("{p}.attn"));
        norm(&mut add, &format!("{p}.ln1"));
        ffn(&mut add, &p);
        norm(&mut add, &format!("{p}.ln2"));
    }
    add("distill.w".into(), 3 * d, d, glorot(3 * d, d));
    add("distill.b".into(), 1, d, Init::Zeros);
    for l in 0..cfg.blocks {
        let p = format!("dec.{l}");
        attn(&mut add, &format!("{p}.self"));
        norm(&mut add, &format!("{p}.ln1"));
        attn(&mut add, &format!("{p}.cross"));
        norm(&mut add, &format!("{p}.ln2"));
        ffn(&mut add, &p);
        norm(&mut add, &format!("{p}.ln3"));
    }
    for i in 0..cfg.heads {
        add(
            format!("out.{i}.w"),
            d,
            2,
            Init::Glorot {
                fan_in: d,
                fan_out: 2,
                stream: 200 + i as u64,
            },
        );
        add(format!("out.{i}.b"), 1, 2, Init::Zeros);
    }
    out
}

/// Projection handles of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    fn lookup(store: &ParamStore, p: &str) -> Self {
        let id = |s: &str| store.id(&format!("{p}.{s}.w")).expect("attention parameter");
        Self {
            wq: id("wq"),
            wk: id("wk"),
            wv: id("wv"),
            wo: id("wo"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    fn lookup(store: &ParamStore, p: &str) -> Self {
        Self {
            l1: Linear::lookup(store, &format!("{p}.ff1")).unwrap(),
            l2: Linear::lookup(store, &format!("{p}.ff2")).unwrap(),
        }
    }

    fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

fn norm_lookup(store: &ParamStore, p: &str) -> LayerNorm {
    LayerNorm {
        gain: store.id(&format!("{p}.gain")).unwrap(),
        shift: store.id(&format!("{p}.shift")).unwrap(),
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: AttentionParams,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: AttentionParams,
    ln1: LayerNorm,
    cross: AttentionParams,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct Handles {
    enc_in: Vec<ParamId>,
    enc_in_b: ParamId,
    dec_in: Vec<ParamId>,
    dec_in_b: ParamId,
    encoder: Vec<EncoderBlock>,
    distill: Linear,
    decoder: Vec<DecoderBlock>,
    out: Vec<Linear>,
}

impl Handles {
    fn lookup(cfg: &PredictorConfig, s: &ParamStore) -> Self {
        let id = |n: String| s.id(&n).unwrap_or_else(|| panic!("missing parameter {n}"));
        Self {
            enc_in: (0..cfg.heads).map(|i| id(format!("enc_in.{i}.w"))).collect(),
            enc_in_b: id("enc_in.b".into()),
            dec_in: (0..cfg.heads).map(|i| id(format!("dec_in.{i}.w"))).collect(),
            dec_in_b: id("dec_in.b".into()),
            encoder: (0..cfg.blocks)
                .map(|l| {
                    let p = format!("enc.{l}");
                    EncoderBlock {
                        attn: AttentionParams::lookup(s, &format!("{p}.attn")),
                        ln1: norm_lookup(s, &format!("{p}.ln1")),
                        ffn: FeedForward::lookup(s, &p),
                        ln2: norm_lookup(s, &format!("{p}.ln2")),
                    }
                })
                .collect(),
            distill: Linear::lookup(s, "distill").unwrap(),
            decoder: (0..cfg.blocks)
                .map(|l| {
                    let p = format!("dec.{l}");
                    DecoderBlock {
                        self_attn: AttentionParams::lookup(s, &format!("{p}.self")),
                        ln1: norm_lookup(s, &format!("{p}.ln1")),
                        cross: AttentionParams::lookup(s, &format!("{p}.cross")),
                        ln2: norm_lookup(s, &format!("{p}.ln2")),
                        ffn: FeedForward::lookup(s, &p),
                        ln3: norm_lookup(s, &format!("{p}.ln3")),
                    }
                })
                .collect(),
            out: (0..cfg.heads)
                .map(|i| Linear::lookup(s, &format!("out.{i}")).unwrap())
                .collect(),
        }
    }
}

/// `softmax(Q·Kᵀ / √d_k + mask) · V`.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<&Matrix>) -> Result<Var, Error> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs.1 != ks.1 || ks.0 != vs.0 {
        return Err(Error::Shape(format!("attention with Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    let scores = g.matmul_t(q, k);
    let mut scores = g.scale(scores, 1.0 / (qs.1 as f64).sqrt());
    if let Some(m) = mask {
        if m.shape() != (qs.0, ks.0) {
            return Err(Error::Shape(format!("mask {:?} for scores {:?}", m.shape(), (qs.0, ks.0))));
        }
        scores = g.add_const(scores, m);
    }
    let weights = g.softmax_rows(scores);
    Ok(g.matmul(weights, v))
}

/// Multi-head attention: per-head projections are column blocks of the
/// packed `W^Q`, `W^K`, `W^V`; head outputs are concatenated and projected
/// by `W^O`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    p: &AttentionParams,
    attn_heads: usize,
    d_k: usize,
    d_v: usize,
    x_q: Var,
    x_kv: Var,
    mask: Option<&Matrix>,
) -> Result<Var, Error> {
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wo = g.param(store, p.wo);
    let q = g.matmul(x_q, wq);
    let k = g.matmul(x_kv, wk);
    let v = g.matmul(x_kv, wv);
    let mut heads = Vec::with_capacity(attn_heads);
    for j in 0..attn_heads {
        let qj = g.slice_cols(q, j * d_k, d_k);
        let kj = g.slice_cols(k, j * d_k, d_k);
        let vj = g.slice_cols(v, j * d_v, d_v);
        heads.push(attention(g, qj, kj, vj, mask)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    Ok(g.matmul(cat, wo))
}

fn elementwise_max(g: &mut Graph<'_>, a: Var, b: Var) -> Var {
    let na = g.scale(a, -1.0);
    let nb = g.scale(b, -1.0);
    let m = g.minimum(na, nb);
    g.scale(m, -1.0)
}

/// Fixed sinusoidal position code for `len` positions.
pub fn positional_encoding(len: usize, width: usize) -> Matrix {
    Matrix::from_fn(len, width, |pos, i| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let a = pos as f64 / rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Mask letting row `r` attend only to columns `c` with `c % batch == r % batch`.
fn same_sample_mask(rows: usize, cols: usize, batch: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| if r % batch == c % batch { 0.0 } else { MASKED })
}

/// Replaces a step's fed-back prediction (normalized coordinates,
/// `batch × 2M`) before it becomes the next decoder input.
pub type DecodeHook<'h> = &'h mut dyn FnMut(usize, &mut Matrix);

/// M predicted trajectories, one per output head, each `horizon` long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub heads: Vec<Vec<ViewportPoint>>,
}

/// Sum over heads and steps of the periodic distance.
pub fn mtio_loss(pred: &PredictionSet, truth: &[Vec<ViewportPoint>], grid: &TileGrid) -> Result<f64, Error> {
    if pred.heads.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted heads vs {} truths", pred.heads.len(), truth.len())));
    }
    let mut total = 0.0;
    for (p, t) in pred.heads.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Shape(format!("horizon {} vs truth {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| wrap_distance(a, b, grid)).sum::<f64>();
    }
    Ok(total)
}

/// Plain per-step mean of the head predictions, then reduced into the frame.
pub fn ensemble(pred: &PredictionSet, grid: &TileGrid) -> Vec<ViewportPoint> {
    let m = pred.heads.len() as f64;
    let steps = pred.heads.first().map_or(0, Vec::len);
    (0..steps)
        .map(|j| {
            let x = pred.heads.iter().map(|h| h[j].x).sum::<f64>() / m;
            let y = pred.heads.iter().map(|h| h[j].y).sum::<f64>() / m;
            ViewportPoint::new(x, y).reduced(grid)
        })
        .collect()
}

/// Batched inputs in time-major layout: row `t · batch + b` holds sample
/// `b` at step `t`, columns `2i, 2i+1` the normalized point of head `i`.
#[derive(Clone, Debug)]
pub struct VpBatch {
    pub batch: usize,
    pub histories: Matrix,
}

impl VpBatch {
    /// `samples[b][i]` is the history of head `i` for sample `b`.
    pub fn from_points(samples: &[Vec<&[ViewportPoint]>], cfg: &PredictorConfig) -> Result<Self, Error> {
        let batch = samples.len();
        if batch == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut h = Matrix::zeros(cfg.history * batch, 2 * cfg.heads);
        for (b, heads) in samples.iter().enumerate() {
            if heads.len() != cfg.heads {
                return Err(Error::Shape(format!("{} histories for {} heads", heads.len(), cfg.heads)));
            }
            for (i, hist) in heads.iter().enumerate() {
                if hist.len() != cfg.history {
                    return Err(Error::Shape(format!(
                        "history of length {} (expected {})",
                        hist.len(),
                        cfg.history
                    )));
                }
                for (t, p) in hist.iter().enumerate() {
                    h.set(t * batch + b, 2 * i, p.x / cfg.video_width);
                    h.set(t * batch + b, 2 * i + 1, p.y / cfg.video_height);
                }
            }
        }
        Ok(Self { batch, histories: h })
    }

    fn last_step(&self, history: usize) -> Matrix {
        let cols = self.histories.cols();
        let start = (history - 1) * self.batch;
        Matrix::from_fn(self.batch, cols, |b, c| self.histories.get(start + b, c))
    }
}

/// The multi-head-input, multi-head-output attention encoder–decoder.
#[derive(Clone, Debug)]
pub struct MtioTransformer {
    pub config: PredictorConfig,
    pub seed: u64,
    pub store: ParamStore,
    handles: Handles,
}

impl MtioTransformer {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut streams: std::collections::HashMap<u64, crate::Rng> = Default::default();
        for spec in layout(&config) {
            let value = match spec.init {
                Init::Zeros => Matrix::zeros(spec.rows, spec.cols),
                Init::Ones => Matrix::filled(spec.rows, spec.cols, 1.0),
                Init::Glorot {
                    fan_in,
                    fan_out,
                    stream,
                } => {
                    let rng = streams.entry(stream).or_insert_with(|| crate::rng_for(seed, stream));
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    uniform(rng, spec.rows, spec.cols, limit)
                }
            };
            store.insert(spec.name, value);
        }
        let handles = Handles::lookup(&config, &store);
        Ok(Self {
            config,
            seed,
            store,
            handles,
        })
    }

    /// Rebuilds a model around saved parameters.
    pub fn from_store(config: PredictorConfig, seed: u64, store: ParamStore) -> Result<Self, Error> {
        let mut model = Self::new(config, seed)?;
        model.store.load_from(&store)?;
        Ok(model)
    }

    pub fn attention_params(&self, block: usize, which: &str) -> Option<AttentionParams> {
        let p = match which {
            "enc" => format!("enc.{block}.attn"),
            "self" => format!("dec.{block}.self"),
            "cross" => format!("dec.{block}.cross"),
            _ => return None,
        };
        self.store.id(&format!("{p}.wq.w"))?;
        Some(AttentionParams::lookup(&self.store, &p))
    }

    #[allow(clippy::too_many_arguments)]
    fn mha<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        p: &AttentionParams,
        xq: Var,
        xkv: Var,
        mask: &Matrix,
    ) -> Var {
        let c = &self.config;
        multi_head_attention(g, store, p, c.attn_heads, c.d_k, c.d_v, xq, xkv, Some(mask))
            .expect("shapes are fixed by the configuration")
    }

    /// Convolution (kernel 3, stride 1, zero padding 1) followed by ELU and
    /// max-pooling (kernel 3, stride 2, padding 1) along time. Works on
    /// time-major batches; length-1 sequences pass through.
    pub fn distill<'p>(&'p self, g: &mut Graph<'p>, x: Var, len: usize, batch: usize) -> Var {
        self.distill_on(g, &self.store, x, len, batch)
    }

    pub fn distill_on<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var, len: usize, batch: usize) -> Var {
        if len <= 1 {
            return x;
        }
        let d = g.value(x).cols();
        let zeros = g.leaf(Matrix::zeros(batch, d));
        let head = g.slice_rows(x, 0, (len - 1) * batch);
        let prev = g.concat_rows(&[zeros, head]);
        let tail = g.slice_rows(x, batch, (len - 1) * batch);
        let next = g.concat_rows(&[tail, zeros]);
        let taps = g.concat_cols(&[prev, x, next]);
        let c = self.handles.distill.forward(g, store, taps);
        let c = g.elu(c);
        let out_len = len.div_ceil(2);
        let mut pooled = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let mut best: Option<Var> = None;
            for t in [2 * o as isize - 1, 2 * o as isize, 2 * o as isize + 1] {
                if t < 0 || t as usize >= len {
                    continue;
                }
                let s = g.slice_rows(c, t as usize * batch, batch);
                best = Some(match best {
                    None => s,
                    Some(b) => elementwise_max(g, b, s),
                });
            }
            pooled.push(best.unwrap());
        }
        g.concat_rows(&pooled)
    }

    fn embed<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var, weights: &[ParamId], bias: ParamId) -> Var {
        let parts: Vec<Var> = weights.iter().map(|&w| g.param(store, w)).collect();
        let w = g.concat_rows(&parts);
        let e = g.matmul(x, w);
        let b = g.param(store, bias);
        g.add_row(e, b)
    }

    /// Runs encoder, distillation and `horizon` autoregressive decoder steps.
    /// Returns one `batch × 2M` node of normalized predictions per step.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, input: &VpBatch, hook: Option<DecodeHook<'_>>) -> Vec<Var> {
        self.forward_on(g, &self.store, input, hook)
    }

    /// [`Self::forward`] against any store with this model's layout.
    pub fn forward_on<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        input: &VpBatch,
        mut hook: Option<DecodeHook<'_>>,
    ) -> Vec<Var> {
        let c = &self.config;
        let batch = input.batch;
        let len = c.history;
        let pe = positional_encoding(len.max(c.horizon), c.d_model);

        let x = g.leaf(input.histories.clone());
        let e = self.embed(g, store, x, &self.handles.enc_in, self.handles.enc_in_b);
        let pe_rows = Matrix::from_fn(len * batch, c.d_model, |r, k| pe.get(r / batch, k));
        let mut h = g.add_const(e, &pe_rows);
        let enc_mask = same_sample_mask(len * batch, len * batch, batch);
        for blk in &self.handles.encoder {
            let a = self.mha(g, store, &blk.attn, h, h, &enc_mask);
            let r = g.add(h, a);
            h = blk.ln1.forward(g, store, r);
            let f = blk.ffn.forward(g, store, h);
            let r = g.add(h, f);
            h = blk.ln2.forward(g, store, r);
        }
        let memory = self.distill_on(g, store, h, len, batch);
        let mem_len = c.distilled_len();
        let cross_mask = same_sample_mask(batch, mem_len * batch, batch);

        let mut token = g.leaf(input.last_step(len));
        let mut layer_inputs: Vec<Vec<Var>> = vec![Vec::new(); self.handles.decoder.len()];
        let mut outputs = Vec::with_capacity(c.horizon);
        for step in 0..c.horizon {
            let e = self.embed(g, store, token, &self.handles.dec_in, self.handles.dec_in_b);
            let pe_row = Matrix::from_fn(batch, c.d_model, |_, k| pe.get(step, k));
            let mut h = g.add_const(e, &pe_row);
            let self_mask = same_sample_mask(batch, (step + 1) * batch, batch);
            for (blk, inputs) in self.handles.decoder.iter().zip(layer_inputs.iter_mut()) {
                inputs.push(h);
                let kv = if inputs.len() == 1 { h } else { g.concat_rows(inputs) };
                let a = self.mha(g, store, &blk.self_attn, h, kv, &self_mask);
                let r = g.add(h, a);
                h = blk.ln1.forward(g, store, r);
                let a = self.mha(g, store, &blk.cross, h, memory, &cross_mask);
                let r = g.add(h, a);
                h = blk.ln2.forward(g, store, r);
                let f = blk.ffn.forward(g, store, h);
                let r = g.add(h, f);
                h = blk.ln3.forward(g, store, r);
            }
            let heads: Vec<Var> = self
                .handles
                .out
                .iter()
                .map(|o| {
                    let z = o.forward(g, store, h);
                    g.sigmoid(z)
                })
                .collect();
            let mut pred = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            if let Some(hk) = hook.as_mut() {
                let mut m = g.value(pred).clone();
                hk(step, &mut m);
                if &m != g.value(pred) {
                    pred = g.leaf(m);
                }
            }
            outputs.push(pred);
            token = pred;
        }
        outputs
    }

    /// Mean over the batch of the summed periodic distance, in pixels.
    /// `truth[j]` is the `batch × 2M` matrix of true pixel coordinates at step `j`.
    pub fn loss(&self, g: &mut Graph<'_>, preds: &[Var], truth: &[Matrix]) -> Var {
        let c = &self.config;
        let periods: Vec<f64> = (0..c.heads).flat_map(|_| [c.video_width, c.video_height]).collect();
        let scale = g.leaf(Matrix::row_vector(&periods));
        let mut terms = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(truth) {
            let px = g.mul_row(*p, scale);
            let d = g.wrap_diff(px, t, &periods);
            let sq = g.square(d);
            terms.push(g.sum(sq));
        }
        let all = g.concat_cols(&terms);
        let total = g.sum(all);
        let batch = g.value(preds[0]).rows() as f64;
        g.scale(total, 0.5 / batch)
    }

    /// Predicts `horizon` points for each head from `M` histories.
    pub fn predict(&self, histories: &[&[ViewportPoint]]) -> Result<PredictionSet, Error> {
        Ok(self.predict_batch(&[histories.to_vec()])?.remove(0))
    }

    pub fn predict_batch(&self, samples: &[Vec<&[ViewportPoint]>]) -> Result<Vec<PredictionSet>, Error> {
        self.predict_with_hook(samples, None)
    }

    pub fn predict_with_hook(
        &self,
        samples: &[Vec<&[ViewportPoint]>],
        hook: Option<DecodeHook<'_>>,
    ) -> Result<Vec<PredictionSet>, Error> {
        let input = VpBatch::from_points(samples, &self.config)?;
        let mut g = Graph::new();
        let steps = self.forward(&mut g, &input, hook);
        let c = &self.config;
        Ok((0..input.batch)
            .map(|b| PredictionSet {
                heads: (0..c.heads)
                    .map(|i| {
                        steps
                            .iter()
                            .map(|&s| {
                                let m = g.value(s);
                                ViewportPoint::new(m.get(b, 2 * i) * c.video_width, m.get(b, 2 * i + 1) * c.video_height)
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect())
    }

    /// Duplicates one history across all input heads and averages the heads.
    pub fn predict_ensembled(&self, history: &[ViewportPoint]) -> Result<Vec<ViewportPoint>, Error> {
        let dup = vec![history; self.config.heads];
        let set = self.predict(&dup)?;
        Ok(ensemble(&set, &self.config.grid()))
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let ckpt = VpCheckpoint {
            kind: VpCheckpoint::KIND.into(),
            config: self.config.clone(),
            seed: self.seed,
            params: self.store.clone(),
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: VpCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.kind != VpCheckpoint::KIND {
            return Err(Error::InvalidInput(format!("{} is a {} checkpoint", path.display(), ckpt.kind)));
        }
        Self::from_store(ckpt.config, ckpt.seed, ckpt.params)
    }
}

#[derive(Serialize, Deserialize)]
struct VpCheckpoint {
    kind: String,
    config: PredictorConfig,
    seed: u64,
    params: ParamStore,
}

impl VpCheckpoint {
    const KIND: &'static str = "mtio-transformer";
}

/// Parameter count and per-inference FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub params: u64,
    pub flops: u64,
}

/// Parameters are summed from the same layout the model is built from.
///
/// FLOPs count one inference on a single sample:
/// * dense `n×a · a×b`: `2nab`, plus `nb` for a bias;
/// * attention per head over `q` queries and `k` keys: `2qk·d_k` scores,
///   `3qk` softmax, `2qk·d_v` mixing;
/// * layer norm `5` per element, residual add, ReLU, ELU and sigmoid `1`
///   per element, max-pool `2` comparisons per output element;
/// * the decoder runs incrementally, so step `j` attends over `j + 1`
///   decoder positions and the distilled memory.
pub fn count_params_flops(cfg: &PredictorConfig) -> ModelCost {
    let params = layout(cfg).iter().map(|s| (s.rows * s.cols) as u64).sum();
    let d = cfg.d_model as u64;
    let ff = cfg.ffn_width as u64;
    let m2 = 2 * cfg.heads as u64;
    let nah = cfg.attn_heads as u64;
    let (dk, dv) = (cfg.d_k as u64, cfg.d_v as u64);
    let dense = |n: u64, a: u64, b: u64, bias: bool| 2 * n * a * b + if bias { n * b } else { 0 };
    let mha = |q: u64, k: u64| {
        dense(q, d, nah * dk, false)
            + dense(k, d, nah * dk, false)
            + dense(k, d, nah * dv, false)
            + nah * (2 * q * k * dk + 3 * q * k + 2 * q * k * dv)
            + dense(q, nah * dv, d, false)
    };
    let ffn = |n: u64| dense(n, d, ff, true) + n * ff + dense(n, ff, d, true);
    let norm_res = |n: u64| 5 * n * d + n * d;
    let l = cfg.history as u64;
    let lm = cfg.distilled_len() as u64;

    let mut flops = dense(l, m2, d, true) + l * d;
    for _ in 0..cfg.blocks {
        flops += mha(l, l) + norm_res(l) + ffn(l) + norm_res(l);
    }
    if l > 1 {
        flops += dense(l, 3 * d, d, true) + l * d + 2 * lm * d;
    }
    for step in 0..cfg.horizon as u64 {
        flops += dense(1, m2, d, true) + d;
        for _ in 0..cfg.blocks {
            // Keys and values of earlier positions are recomputed each step.
            flops += mha(1, step + 1) + norm_res(1) + mha(1, lm) + norm_res(1) + ffn(1) + norm_res(1);
        }
        flops += cfg.heads as u64 * (dense(1, d, 2, true) + 2);
    }
    ModelCost { params, flops }
}
