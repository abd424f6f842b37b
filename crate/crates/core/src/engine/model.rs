//! A small decoder-only attention model with seeded weights.
//!
//! Every layer is pre-norm: `x += Wo · attn(rms(x))`, then
//! `x += W2 · relu(W1 · rms(x))`. Keys and values are stored in the shared
//! [`KvStore`] as bfloat16 and every attention read decodes them again, so a
//! corrupted element is observed by whichever request reads it next.
//! Positions enter only through an additive per-position offset table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_pool::{BlockId, TokenId};
use crate::kvstore::{KvSide, KvStore};
use crate::num::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub weight_seed: u64,
    pub max_new_tokens: usize,
    /// Length of the positional offset table; prompt plus generation must fit.
    pub max_positions: usize,
    /// Multiplier on `q·k / sqrt(head_dim)`; larger values sharpen attention.
    pub attention_gain: f64,
    /// Scale of the attention output projection relative to its fan-in
    /// initializer; sets how much of the residual stream attention writes.
    pub output_gain: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_layers: 2,
            n_kv_heads: 2,
            head_dim: 16,
            hidden_dim: 64,
            weight_seed: 1,
            max_new_tokens: 128,
            max_positions: 512,
            attention_gain: 3.0,
            output_gain: 3.0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err("vocab_size must be at least 2".into());
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        for (name, g) in [
            ("attention_gain", self.attention_gain),
            ("output_gain", self.output_gain),
        ] {
            if !(g.is_finite() && g > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn attn_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Row-major `rows x cols` matrix applied as `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| lit::<S>(rng.gen_range(-bound..bound)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = x · W`, accumulated row by row in a fixed order.
    pub fn apply(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(S::zero());
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
    }

    /// `out += x · W`.
    pub fn apply_add(&self, x: &[S], out: &mut [S]) {
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, w| m.max(w.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub w1: Matrix<S>,
    pub w2: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    cfg: ToyModelConfig,
    pub embed: Matrix<S>,
    pub positions: Matrix<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub unembed: Matrix<S>,
}

/// Attention weights and output of one head for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<S> {
    pub weights: Vec<S>,
    pub output: Vec<S>,
}

/// Bounds of the uniform initializers, as multiples of `sqrt(3 / fan_in)`.
const PROJECTION_GAIN: f64 = 1.0;
const EMBED_BOUND: f64 = 1.0;
const POSITION_BOUND: f64 = 0.5;

fn bound(fan_in: usize) -> f64 {
    PROJECTION_GAIN * (3.0 / fan_in as f64).sqrt()
}

impl<S: Scalar> Model<S> {
    /// Draw every weight from one ChaCha8 stream keyed by `weight_seed`.
    pub fn build(cfg: &ToyModelConfig) -> Result<Self, String> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.weight_seed);
        let (d, a, f) = (cfg.hidden_dim, cfg.attn_dim(), cfg.ffn_dim());
        let embed = Matrix::random(&mut rng, cfg.vocab_size, d, EMBED_BOUND);
        let positions = Matrix::random(&mut rng, cfg.max_positions, d, POSITION_BOUND);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random(&mut rng, d, a, bound(d)),
                wk: Matrix::random(&mut rng, d, a, bound(d)),
                wv: Matrix::random(&mut rng, d, a, bound(d)),
                wo: Matrix::random(&mut rng, a, d, bound(a) * cfg.output_gain),
                w1: Matrix::random(&mut rng, d, f, bound(d)),
                w2: Matrix::random(&mut rng, f, d, bound(f)),
            })
            .collect();
        let unembed = Matrix::random(&mut rng, d, cfg.vocab_size, bound(d));
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            positions,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Largest bound any initializer used.
    pub fn init_scale(&self) -> f64 {
        let c = &self.cfg;
        [
            EMBED_BOUND,
            POSITION_BOUND,
            bound(c.hidden_dim),
            bound(c.attn_dim()) * c.output_gain.max(1.0),
            bound(c.ffn_dim()),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn all_weights(&self) -> impl Iterator<Item = &Matrix<S>> {
        [&self.embed, &self.positions, &self.unembed]
            .into_iter()
            .chain(
                self.layers
                    .iter()
                    .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2]),
            )
    }

    fn scale(&self) -> S {
        lit::<S>(self.cfg.attention_gain / (self.cfg.head_dim as f64).sqrt())
    }

    /// Attention of `query` for one head over positions `0..n_ctx`, reading
    /// keys and values from the store through the request's block table.
    pub fn attend_cached(
        &self,
        store: &KvStore,
        table: &[BlockId],
        layer: usize,
        head: usize,
        n_ctx: usize,
        query: &[S],
    ) -> AttentionOutput<S> {
        let mut weights = Vec::with_capacity(n_ctx);
        let mut output = vec![S::zero(); self.cfg.head_dim];
        self.attend_into(
            store,
            table,
            layer,
            head,
            n_ctx,
            query,
            &mut weights,
            &mut output,
        );
        AttentionOutput { weights, output }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_into(
        &self,
        store: &KvStore,
        table: &[BlockId],
        layer: usize,
        head: usize,
        n_ctx: usize,
        query: &[S],
        weights: &mut Vec<S>,
        out: &mut [S],
    ) {
        let bs = store.geometry().block_size;
        let hd = self.cfg.head_dim;
        let off = head * hd;
        let scale = self.scale();
        weights.clear();
        let mut max = S::neg_infinity();
        for j in 0..n_ctx {
            let k = &store.token(layer, KvSide::Key, table[j / bs], j % bs)[off..off + hd];
            let mut s = S::zero();
            for (&qc, &kc) in query.iter().zip(k) {
                s += qc * S::from_bf16(kc);
            }
            s *= scale;
            if s > max {
                max = s;
            }
            weights.push(s);
        }
        let mut sum = S::zero();
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        out.fill(S::zero());
        for (j, &a) in weights.iter().enumerate() {
            let v = &store.token(layer, KvSide::Value, table[j / bs], j % bs)[off..off + hd];
            for (o, &vc) in out.iter_mut().zip(v) {
                *o += a * S::from_bf16(vc);
            }
        }
    }

    /// Run one token at `pos`: store its keys and values in every layer and,
    /// when asked, return next-token logits.
    pub fn forward_token(
        &self,
        store: &mut KvStore,
        table: &[BlockId],
        pos: usize,
        token: TokenId,
        want_logits: bool,
    ) -> Option<Vec<S>> {
        let c = &self.cfg;
        let bs = store.geometry().block_size;
        let (block, slot) = (table[pos / bs], pos % bs);
        let mut x: Vec<S> = self
            .embed
            .row(token as usize)
            .iter()
            .zip(self.positions.row(pos))
            .map(|(&e, &p)| e + p)
            .collect();
        let mut h = vec![S::zero(); c.hidden_dim];
        let mut q = vec![S::zero(); c.attn_dim()];
        let mut kv = vec![S::zero(); c.attn_dim()];
        let mut attn = vec![S::zero(); c.attn_dim()];
        let mut ffn = vec![S::zero(); c.ffn_dim()];
        let mut weights = Vec::with_capacity(pos + 1);
        for (l, lw) in self.layers.iter().enumerate() {
            rms_norm(&x, &mut h);
            lw.wk.apply(&h, &mut kv);
            for (dst, &v) in store
                .token_mut(l, KvSide::Key, block, slot)
                .iter_mut()
                .zip(&kv)
            {
                *dst = v.to_bf16();
            }
            lw.wv.apply(&h, &mut kv);
            for (dst, &v) in store
                .token_mut(l, KvSide::Value, block, slot)
                .iter_mut()
                .zip(&kv)
            {
                *dst = v.to_bf16();
            }
            if l + 1 == self.layers.len() && !want_logits {
                return None;
            }
            lw.wq.apply(&h, &mut q);
            for head in 0..c.n_kv_heads {
                let r = head * c.head_dim..(head + 1) * c.head_dim;
                self.attend_into(
                    store,
                    table,
                    l,
                    head,
                    pos + 1,
                    &q[r.clone()],
                    &mut weights,
                    &mut attn[r],
                );
            }
            lw.wo.apply_add(&attn, &mut x);
            rms_norm(&x, &mut h);
            lw.w1.apply(&h, &mut ffn);
            for v in ffn.iter_mut() {
                *v = v.max(S::zero());
            }
            lw.w2.apply_add(&ffn, &mut x);
        }
        rms_norm(&x, &mut h);
        let mut logits = vec![S::zero(); c.vocab_size];
        self.unembed.apply(&h, &mut logits);
        Some(logits)
    }
}

/// `x / sqrt(mean(x^2) + eps)`. Overflowing inputs propagate as NaN or zero.
pub fn rms_norm<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut ms = S::zero();
    for &v in x {
        ms += v * v;
    }
    ms /= S::from_count(x.len());
    let inv = (ms + lit::<S>(1e-6)).sqrt().recip();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

/// Index of the largest logit, lowest id on ties. `None` when any logit is
/// NaN or infinite.
pub fn argmax<S: Scalar>(logits: &[S]) -> Option<TokenId> {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if !v.is_finite() {
            return None;
        }
        if v > logits[best] {
            best = i;
        }
    }
    Some(best as TokenId)
}
