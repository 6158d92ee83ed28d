//! Stage 3: supervised transformer over extracted feature vectors.
//!
//! A vector becomes a token sequence by cutting its channels into fixed-size
//! groups, projecting each group to the embedding width, and prepending a
//! learned class token. Encoder blocks are pre-norm attention plus
//! feed-forward pairs. When cross-layer fusion is on, every even-indexed
//! block from the second pair onward blends in the representation from two
//! blocks earlier through a per-channel sigmoid gate. The class token row,
//! normalized and pushed through a small MLP, gives the logits.
//!
//! Training follows the same determinism contract as the noise-prediction
//! stage: every random draw sits on a labeled stream derived from one seed,
//! per-sample gradients come back in sample order, and sums run
//! sequentially, so results do not depend on worker count.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRepository;
use crate::nn::adam::Adam;
use crate::nn::layout::ParamLayout;
use crate::nn::ops::{self, LayerNormCache};
use crate::pretrain::CHECKPOINT_SCHEMA;
use crate::store::{self, derive_seed, NpzReader, NpzWriter};

fn default_group() -> usize {
    16
}
fn default_embed() -> usize {
    64
}
fn default_depth() -> usize {
    5
}
fn default_heads() -> usize {
    4
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_dropout() -> f64 {
    0.1
}
fn default_pos() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipFusion {
    Off,
    #[default]
    CrossLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Channels per token; the last group is zero-padded to this width.
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// Encoder blocks.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward width as a multiple of embed_dim.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub n_classes: usize,
    #[serde(default)]
    pub skip_fusion: SkipFusion,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Learned positional embedding on content tokens. On by default; the
    /// switch exists so order sensitivity can be measured directly.
    #[serde(default = "default_pos")]
    pub pos_embed: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ClassifierConfig {
    /// Stock settings with the class count filled in.
    pub fn with_classes(n_classes: usize) -> Self {
        Self {
            group_size: default_group(),
            embed_dim: default_embed(),
            depth: default_depth(),
            heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
            n_classes,
            skip_fusion: SkipFusion::default(),
            dropout: default_dropout(),
            pos_embed: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.heads == 0 {
            return Err(Error::invalid("heads must be at least 1"));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::invalid(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Class token at row 0, one row per channel group after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }
}

fn ffn_width(cfg: &ClassifierConfig) -> usize {
    ((cfg.embed_dim as f64) * cfg.mlp_ratio).round().max(1.0) as usize
}

fn uses_gate(cfg: &ClassifierConfig, block: usize) -> bool {
    cfg.skip_fusion == SkipFusion::CrossLayer && block >= 2 && block % 2 == 0
}

fn bname(i: usize, tail: &str) -> String {
    format!("blk{i}.{tail}")
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tensor names and offsets for a classifier of this shape. Pure in both
/// arguments, which is what keeps checkpoints loadable by name.
pub fn classifier_layout(cfg: &ClassifierConfig, feature_dim: usize) -> ParamLayout {
    let d = cfg.embed_dim;
    let ng = feature_dim.div_ceil(cfg.group_size);
    let h = ffn_width(cfg);
    let mut b = ParamLayout::builder();
    b.add("proj.w", &[d, cfg.group_size]).add("proj.b", &[d]);
    b.add("pos", &[ng, d]);
    b.add("cls", &[d]);
    for i in 0..cfg.depth {
        b.add(bname(i, "ln1.g"), &[d]).add(bname(i, "ln1.b"), &[d]);
        b.add(bname(i, "attn.wq"), &[d, d]).add(bname(i, "attn.bq"), &[d]);
        b.add(bname(i, "attn.wk"), &[d, d]).add(bname(i, "attn.bk"), &[d]);
        b.add(bname(i, "attn.wv"), &[d, d]).add(bname(i, "attn.bv"), &[d]);
        b.add(bname(i, "attn.wo"), &[d, d]).add(bname(i, "attn.bo"), &[d]);
        b.add(bname(i, "ln2.g"), &[d]).add(bname(i, "ln2.b"), &[d]);
        b.add(bname(i, "ffn.w1"), &[h, d]).add(bname(i, "ffn.b1"), &[h]);
        b.add(bname(i, "ffn.w2"), &[d, h]).add(bname(i, "ffn.b2"), &[d]);
        if uses_gate(cfg, i) {
            b.add(bname(i, "gate"), &[d]);
        }
    }
    b.add("norm.g", &[d]).add("norm.b", &[d]);
    b.add("head.w1", &[d, d]).add("head.b1", &[d]);
    b.add("head.w2", &[cfg.n_classes, d]).add("head.b2", &[cfg.n_classes]);
    b.build()
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub feature_dim: usize,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

/// Fresh classifier for vectors of the given width. Matrix weights draw
/// normal values scaled by 1/sqrt(fan_in), the positional table and class
/// token start small, normalization gains start at one, and biases and
/// fusion gates start at zero, so every gate opens halfway.
pub fn build_classifier(cfg: &ClassifierConfig, feature_dim: usize) -> Result<Classifier> {
    cfg.validate()?;
    if feature_dim == 0 {
        return Err(Error::invalid("feature_dim must be at least 1"));
    }
    let layout = classifier_layout(cfg, feature_dim);
    let mut params = vec![0.0; layout.total()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for spec in layout.specs() {
        let dst = &mut params[spec.offset..spec.offset + spec.len()];
        match spec.name.as_str() {
            "pos" | "cls" => {
                for v in dst.iter_mut() {
                    *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            _ if spec.shape.len() == 2 => {
                let std = (1.0 / spec.shape[1] as f64).sqrt();
                for v in dst.iter_mut() {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            name if name.ends_with(".g") => dst.fill(1.0),
            _ => {}
        }
    }
    Ok(Classifier {
        cfg: cfg.clone(),
        feature_dim,
        layout,
        params,
    })
}

struct BlockTrace {
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-softmax attention matrix per head.
    attn: Vec<Array2<f64>>,
    merged: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

struct EncodeTrace {
    blocks: Vec<BlockTrace>,
    /// Stream value after each block, fusion applied.
    fused: Vec<Array2<f64>>,
    cls_ln: LayerNormCache,
    normed: Array2<f64>,
    head_pre: Array2<f64>,
}

impl Classifier {
    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn n_groups(&self) -> usize {
        self.feature_dim.div_ceil(self.cfg.group_size)
    }

    fn check_width(&self, vector: &[f64]) -> Result<()> {
        if vector.is_empty() {
            return Err(Error::invalid("cannot tokenize an empty feature vector"));
        }
        if vector.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "feature vector has {} channels, model expects {}",
                vector.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn group_matrix(&self, vector: &[f64]) -> Array2<f64> {
        let g = self.cfg.group_size;
        let mut m = Array2::zeros((self.n_groups(), g));
        for (i, &v) in vector.iter().enumerate() {
            m[[i / g, i % g]] = v;
        }
        m
    }

    fn tokens_from_groups(&self, groups: &Array2<f64>) -> Array2<f64> {
        let d = self.cfg.embed_dim;
        let ng = groups.nrows();
        let content = ops::linear2_forward(
            groups,
            self.layout.slice(&self.params, "proj.w"),
            self.layout.slice(&self.params, "proj.b"),
            d,
        );
        let cls = self.layout.slice(&self.params, "cls");
        let pos = self.layout.slice(&self.params, "pos");
        let mut tokens = Array2::zeros((ng + 1, d));
        for c in 0..d {
            tokens[[0, c]] = cls[c];
        }
        for i in 0..ng {
            for c in 0..d {
                let p = if self.cfg.pos_embed { pos[i * d + c] } else { 0.0 };
                tokens[[i + 1, c]] = content[[i, c]] + p;
            }
        }
        tokens
    }

    pub fn tokenize(&self, vector: &[f64]) -> Result<TokenSequence> {
        self.check_width(vector)?;
        let groups = self.group_matrix(vector);
        Ok(TokenSequence {
            tokens: self.tokens_from_groups(&groups),
        })
    }

    fn maybe_dropout(
        &self,
        x: &Array2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => {
                let (y, m) = ops::dropout_forward(x, self.cfg.dropout, r);
                (y, Some(m))
            }
            _ => (x.clone(), None),
        }
    }

    fn block_forward(
        &self,
        i: usize,
        x: &Array2<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, BlockTrace) {
        let p = &self.params;
        let l = &self.layout;
        let d = self.cfg.embed_dim;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x.nrows();

        let (ln1_out, ln1) =
            ops::layernorm_forward(x, l.slice(p, &bname(i, "ln1.g")), l.slice(p, &bname(i, "ln1.b")));
        let q = ops::linear2_forward(
            &ln1_out,
            l.slice(p, &bname(i, "attn.wq")),
            l.slice(p, &bname(i, "attn.bq")),
            d,
        );
        let k = ops::linear2_forward(
            &ln1_out,
            l.slice(p, &bname(i, "attn.wk")),
            l.slice(p, &bname(i, "attn.bk")),
            d,
        );
        let v = ops::linear2_forward(
            &ln1_out,
            l.slice(p, &bname(i, "attn.wv")),
            l.slice(p, &bname(i, "attn.bv")),
            d,
        );

        let mut merged = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let c0 = h * dh;
            let qh = q.slice(s![.., c0..c0 + dh]);
            let kh = k.slice(s![.., c0..c0 + dh]);
            let vh = v.slice(s![.., c0..c0 + dh]);
            let scores = qh.dot(&kh.t()) * scale;
            let mut am = Array2::zeros((n, n));
            for r in 0..n {
                let sm = ops::softmax(scores.row(r).as_slice().expect("contiguous score row"));
                for c in 0..n {
                    am[[r, c]] = sm[c];
                }
            }
            merged.slice_mut(s![.., c0..c0 + dh]).assign(&am.dot(&vh));
            attn.push(am);
        }
        let attn_out = ops::linear2_forward(
            &merged,
            l.slice(p, &bname(i, "attn.wo")),
            l.slice(p, &bname(i, "attn.bo")),
            d,
        );
        let (attn_drop, attn_mask) = self.maybe_dropout(&attn_out, rng.as_mut().map(|r| &mut **r));
        let a = x + &attn_drop;

        let (ln2_out, ln2) = ops::layernorm_forward(
            &a,
            l.slice(p, &bname(i, "ln2.g")),
            l.slice(p, &bname(i, "ln2.b")),
        );
        let ffn_pre = ops::linear2_forward(
            &ln2_out,
            l.slice(p, &bname(i, "ffn.w1")),
            l.slice(p, &bname(i, "ffn.b1")),
            ffn_width(&self.cfg),
        );
        let ffn_act = ops::silu_forward(&ffn_pre);
        let ffn_out = ops::linear2_forward(
            &ffn_act,
            l.slice(p, &bname(i, "ffn.w2")),
            l.slice(p, &bname(i, "ffn.b2")),
            d,
        );
        let (ffn_drop, ffn_mask) = self.maybe_dropout(&ffn_out, rng);
        let y = &a + &ffn_drop;

        (
            y,
            BlockTrace {
                ln1,
                ln1_out,
                q,
                k,
                v,
                attn,
                merged,
                attn_mask,
                ln2,
                ln2_out,
                ffn_pre,
                ffn_mask,
            },
        )
    }

    fn encode(&self, tokens: &Array2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, EncodeTrace) {
        let depth = self.cfg.depth;
        let mut blocks = Vec::with_capacity(depth);
        let mut fused: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let mut stream = tokens.clone();
        for i in 0..depth {
            let (y, tr) = self.block_forward(i, &stream, rng.as_mut().map(|r| &mut **r));
            blocks.push(tr);
            let f = if uses_gate(&self.cfg, i) {
                let gate = self.layout.slice(&self.params, &bname(i, "gate"));
                let skip = &fused[i - 2];
                let mut f = y;
                for r in 0..f.nrows() {
                    for (c, &gv) in gate.iter().enumerate() {
                        f[[r, c]] += sigmoid(gv) * skip[[r, c]];
                    }
                }
                f
            } else {
                y
            };
            fused.push(f.clone());
            stream = f;
        }

        let cls_row = stream.slice(s![0..1, ..]).to_owned();
        let (normed, cls_ln) = ops::layernorm_forward(
            &cls_row,
            self.layout.slice(&self.params, "norm.g"),
            self.layout.slice(&self.params, "norm.b"),
        );
        let head_pre = ops::linear2_forward(
            &normed,
            self.layout.slice(&self.params, "head.w1"),
            self.layout.slice(&self.params, "head.b1"),
            self.cfg.embed_dim,
        );
        let head_act = ops::silu_forward(&head_pre);
        let out = ops::linear2_forward(
            &head_act,
            self.layout.slice(&self.params, "head.w2"),
            self.layout.slice(&self.params, "head.b2"),
            self.cfg.n_classes,
        );
        let logits = out.row(0).to_vec();
        (
            logits,
            EncodeTrace {
                blocks,
                fused,
                cls_ln,
                normed,
                head_pre,
            },
        )
    }

    /// Logits for a prepared token sequence, dropout off.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let (n, w) = seq.tokens.dim();
        let want = (self.n_groups() + 1, self.cfg.embed_dim);
        if (n, w) != want {
            return Err(Error::shape(format!(
                "token matrix is {n}x{w}, model expects {}x{}",
                want.0, want.1
            )));
        }
        let (logits, _) = self.encode(&seq.tokens, None);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("classifier logits are not finite".into()));
        }
        Ok(logits)
    }

    pub fn logits(&self, vector: &[f64]) -> Result<Vec<f64>> {
        let seq = self.tokenize(vector)?;
        self.forward(&seq)
    }

    fn block_backward(
        &self,
        i: usize,
        tr: &BlockTrace,
        dy: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let p = &self.params;
        let l = &self.layout;
        let d = self.cfg.embed_dim;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = dy.nrows();

        let d_ffn_out = match &tr.ffn_mask {
            Some(m) => ops::dropout_backward(dy, m),
            None => dy.clone(),
        };
        let ffn_act = ops::silu_forward(&tr.ffn_pre);
        let d_act = {
            let w = l.slice(p, &bname(i, "ffn.w2"));
            let (dw, db) = l.two_mut(grads, &bname(i, "ffn.w2"), &bname(i, "ffn.b2"));
            ops::linear2_backward(&ffn_act, &d_ffn_out, w, dw, db)
        };
        let d_ffn_pre = ops::silu_backward(&tr.ffn_pre, &d_act);
        let d_ln2_out = {
            let w = l.slice(p, &bname(i, "ffn.w1"));
            let (dw, db) = l.two_mut(grads, &bname(i, "ffn.w1"), &bname(i, "ffn.b1"));
            ops::linear2_backward(&tr.ln2_out, &d_ffn_pre, w, dw, db)
        };
        let d_a_ln = {
            let g = l.slice(p, &bname(i, "ln2.g"));
            let (dg, db) = l.two_mut(grads, &bname(i, "ln2.g"), &bname(i, "ln2.b"));
            ops::layernorm_backward(&d_ln2_out, &tr.ln2, g, dg, db)
        };
        let d_a = dy + &d_a_ln;

        let d_attn_out = match &tr.attn_mask {
            Some(m) => ops::dropout_backward(&d_a, m),
            None => d_a.clone(),
        };
        let d_merged = {
            let w = l.slice(p, &bname(i, "attn.wo"));
            let (dw, db) = l.two_mut(grads, &bname(i, "attn.wo"), &bname(i, "attn.bo"));
            ops::linear2_backward(&tr.merged, &d_attn_out, w, dw, db)
        };

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.cfg.heads {
            let c0 = h * dh;
            let am = &tr.attn[h];
            let qh = tr.q.slice(s![.., c0..c0 + dh]);
            let kh = tr.k.slice(s![.., c0..c0 + dh]);
            let vh = tr.v.slice(s![.., c0..c0 + dh]);
            let dmh = d_merged.slice(s![.., c0..c0 + dh]);
            let da = dmh.dot(&vh.t());
            dv.slice_mut(s![.., c0..c0 + dh]).assign(&am.t().dot(&dmh));
            let mut ds = Array2::zeros((n, n));
            for r in 0..n {
                let row = ops::softmax_backward_row(
                    am.row(r).as_slice().expect("contiguous attention row"),
                    da.row(r).as_slice().expect("contiguous grad row"),
                );
                for c in 0..n {
                    ds[[r, c]] = row[c];
                }
            }
            dq.slice_mut(s![.., c0..c0 + dh]).assign(&(ds.dot(&kh) * scale));
            dk.slice_mut(s![.., c0..c0 + dh]).assign(&(ds.t().dot(&qh) * scale));
        }

        let mut d_ln1_out = {
            let w = l.slice(p, &bname(i, "attn.wq"));
            let (dw, db) = l.two_mut(grads, &bname(i, "attn.wq"), &bname(i, "attn.bq"));
            ops::linear2_backward(&tr.ln1_out, &dq, w, dw, db)
        };
        d_ln1_out += &{
            let w = l.slice(p, &bname(i, "attn.wk"));
            let (dw, db) = l.two_mut(grads, &bname(i, "attn.wk"), &bname(i, "attn.bk"));
            ops::linear2_backward(&tr.ln1_out, &dk, w, dw, db)
        };
        d_ln1_out += &{
            let w = l.slice(p, &bname(i, "attn.wv"));
            let (dw, db) = l.two_mut(grads, &bname(i, "attn.wv"), &bname(i, "attn.bv"));
            ops::linear2_backward(&tr.ln1_out, &dv, w, dw, db)
        };
        let d_x_ln = {
            let g = l.slice(p, &bname(i, "ln1.g"));
            let (dg, db) = l.two_mut(grads, &bname(i, "ln1.g"), &bname(i, "ln1.b"));
            ops::layernorm_backward(&d_ln1_out, &tr.ln1, g, dg, db)
        };
        &d_a + &d_x_ln
    }

    fn encode_backward(&self, trace: &EncodeTrace, d_logits: &[f64], grads: &mut [f64]) -> Array2<f64> {
        let d = self.cfg.embed_dim;
        let depth = self.cfg.depth;

        let head_act = ops::silu_forward(&trace.head_pre);
        let d_out = Array2::from_shape_vec((1, d_logits.len()), d_logits.to_vec())
            .expect("logit grad shape");
        let d_head_act = {
            let w = self.layout.slice(&self.params, "head.w2");
            let (dw, db) = self.layout.two_mut(grads, "head.w2", "head.b2");
            ops::linear2_backward(&head_act, &d_out, w, dw, db)
        };
        let d_head_pre = ops::silu_backward(&trace.head_pre, &d_head_act);
        let d_normed = {
            let w = self.layout.slice(&self.params, "head.w1");
            let (dw, db) = self.layout.two_mut(grads, "head.w1", "head.b1");
            ops::linear2_backward(&trace.normed, &d_head_pre, w, dw, db)
        };
        let d_cls = {
            let g = self.layout.slice(&self.params, "norm.g");
            let (dg, db) = self.layout.two_mut(grads, "norm.g", "norm.b");
            ops::layernorm_backward(&d_normed, &trace.cls_ln, g, dg, db)
        };

        let n = trace.fused[0].nrows();
        let mut d_stream = Array2::zeros((n, d));
        d_stream.slice_mut(s![0..1, ..]).assign(&d_cls);

        // Skip gradients wait here until the walk reaches their source block.
        let mut pending: Vec<Option<Array2<f64>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let mut d_f = d_stream;
            if let Some(e) = pending[i].take() {
                d_f += &e;
            }
            if uses_gate(&self.cfg, i) {
                let skip = &trace.fused[i - 2];
                let gate = self.layout.slice(&self.params, &bname(i, "gate"));
                let mut add = Array2::zeros(d_f.dim());
                {
                    let dgate = self.layout.slice_mut(grads, &bname(i, "gate"));
                    for (c, &gv) in gate.iter().enumerate() {
                        let sg = sigmoid(gv);
                        let mut acc = 0.0;
                        for r in 0..n {
                            acc += d_f[[r, c]] * skip[[r, c]];
                            add[[r, c]] = sg * d_f[[r, c]];
                        }
                        dgate[c] += acc * sg * (1.0 - sg);
                    }
                }
                let merged = match pending[i - 2].take() {
                    Some(mut e) => {
                        e += &add;
                        e
                    }
                    None => add,
                };
                pending[i - 2] = Some(merged);
            }
            d_stream = self.block_backward(i, &trace.blocks[i], &d_f, grads);
        }
        d_stream
    }

    fn tokenize_backward(&self, groups: &Array2<f64>, d_tokens: &Array2<f64>, grads: &mut [f64]) {
        let d = self.cfg.embed_dim;
        let ng = groups.nrows();
        {
            let dcls = self.layout.slice_mut(grads, "cls");
            for c in 0..d {
                dcls[c] += d_tokens[[0, c]];
            }
        }
        let d_content = d_tokens.slice(s![1.., ..]).to_owned();
        if self.cfg.pos_embed {
            let dpos = self.layout.slice_mut(grads, "pos");
            for i in 0..ng {
                for c in 0..d {
                    dpos[i * d + c] += d_content[[i, c]];
                }
            }
        }
        let w = self.layout.slice(&self.params, "proj.w");
        let (dw, db) = self.layout.two_mut(grads, "proj.w", "proj.b");
        ops::linear2_backward(groups, &d_content, w, dw, db);
    }

    /// Cross-entropy loss, full parameter gradient, and the argmax class for
    /// one labeled vector. Dropout is active only when an rng is handed in.
    pub fn loss_and_grad(
        &self,
        vector: &[f64],
        label: u32,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>, u32)> {
        let k = self.cfg.n_classes;
        if label < 1 || label as usize > k {
            return Err(Error::invalid(format!("label {label} outside 1..={k}")));
        }
        self.check_width(vector)?;
        let groups = self.group_matrix(vector);
        let tokens = self.tokens_from_groups(&groups);
        let (logits, trace) = self.encode(&tokens, rng);
        let (loss, d_logits) = ops::cross_entropy(&logits, (label - 1) as usize);
        let pred = argmax_class(&logits);
        let mut grads = vec![0.0; self.layout.total()];
        let d_tokens = self.encode_backward(&trace, &d_logits, &mut grads);
        self.tokenize_backward(&groups, &d_tokens, &mut grads);
        Ok((loss, grads, pred))
    }
}

/// 1-based argmax; ties go to the smaller class index.
pub fn argmax_class(logits: &[f64]) -> u32 {
    debug_assert!(!logits.is_empty());
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    (best + 1) as u32
}

fn default_epochs() -> usize {
    300
}
fn default_train_batch() -> usize {
    128
}
fn default_train_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_train_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_train_batch(),
            learning_rate: default_train_lr(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss and accuracy are measured on the training pass itself, dropout
/// included, so they trail a clean evaluation slightly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Epoch trace as `epoch,loss,accuracy` lines.
pub fn stats_text(stats: &[EpochStat]) -> String {
    let mut out = String::with_capacity(stats.len() * 32);
    for s in stats {
        out.push_str(&format!("{},{},{}\n", s.epoch, s.loss, s.accuracy));
    }
    out
}

/// Fit a classifier to the repository's training rows. Shuffle order is
/// keyed by epoch and dropout by (epoch, dataset row), so the draw a sample
/// sees does not depend on where the shuffle placed it. epochs=0 returns
/// the untrained model with an empty trace.
pub fn train_classifier(
    repo: &FeatureRepository,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
) -> Result<(Classifier, Vec<EpochStat>)> {
    cfg.validate()?;
    tcfg.validate()?;
    let n = repo.n_train;
    if n == 0 {
        return Err(Error::invalid("repository has no training rows"));
    }
    let labels = repo.train_labels();
    for (idx, &lab) in labels.iter().enumerate() {
        if lab < 1 || lab as usize > cfg.n_classes {
            return Err(Error::invalid(format!(
                "training sample {idx} has label {lab}, expected 1..={}",
                cfg.n_classes
            )));
        }
    }
    let mut model = build_classifier(cfg, repo.feature_dim())?;
    let mut opt = Adam::new(tcfg.learning_rate, model.layout.total());
    let train = repo.train_vectors();
    let mut stats = Vec::with_capacity(tcfg.epochs);

    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &format!("shuffle:{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let results: Vec<(f64, Vec<f64>, u32)> = batch
                .par_iter()
                .map(|&row| {
                    let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(
                        tcfg.seed,
                        &format!("dropout:{epoch}:{row}"),
                    ));
                    let x = train.row(row).to_vec();
                    model.loss_and_grad(&x, labels[row], Some(&mut drng))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut gsum = vec![0.0; model.layout.total()];
            let mut batch_loss = 0.0;
            for ((loss, g, pred), &row) in results.iter().zip(batch.iter()) {
                batch_loss += loss;
                if *pred == labels[row] {
                    correct += 1;
                }
                for (a, b) in gsum.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss diverged at epoch {epoch}"
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            for v in gsum.iter_mut() {
                *v *= inv;
            }
            opt.step(&mut model.params, &gsum);
            epoch_loss += batch_loss;
        }
        stats.push(EpochStat {
            epoch,
            loss: epoch_loss / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok((model, stats))
}

/// Argmax class for every repository row, train rows first.
pub fn predict(model: &Classifier, repo: &FeatureRepository) -> Result<Vec<u32>> {
    if repo.feature_dim() != model.feature_dim {
        return Err(Error::shape(format!(
            "repository vectors have {} channels, classifier expects {}",
            repo.feature_dim(),
            model.feature_dim
        )));
    }
    (0..repo.n_samples())
        .into_par_iter()
        .map(|r| {
            let logits = model.logits(&repo.vectors.row(r).to_vec())?;
            Ok(argmax_class(&logits))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub schema_version: u32,
    pub kind: String,
    pub classifier: ClassifierConfig,
    pub feature_dim: usize,
    pub epochs: u64,
    pub train_seed: u64,
}

/// Same container as the denoiser checkpoint: `manifest.json` plus one named
/// array per tensor, tagged with its own kind.
pub fn save_classifier(model: &Classifier, epochs: u64, train_seed: u64, path: &Path) -> Result<()> {
    let manifest = ClassifierManifest {
        schema_version: CHECKPOINT_SCHEMA,
        kind: "classifier".into(),
        classifier: model.cfg.clone(),
        feature_dim: model.feature_dim,
        epochs,
        train_seed,
    };
    let mut w = NpzWriter::create(path)?;
    w.add_raw("manifest.json", store::to_json_text(&manifest)?.as_bytes())?;
    for spec in model.layout.specs() {
        w.add_f64(
            &spec.name,
            &spec.shape,
            &model.params[spec.offset..spec.offset + spec.len()],
        )?;
    }
    w.finish()
}

#[derive(Deserialize)]
struct ManifestProbe {
    schema_version: u32,
    kind: String,
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, ClassifierManifest)> {
    let mut r = NpzReader::open(path)?;
    let raw = r.raw("manifest.json")?;
    // Kind is checked before the full parse so a denoiser checkpoint is
    // reported as the wrong kind, not as a malformed manifest.
    let probe: ManifestProbe = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("manifest does not parse: {e}")))?;
    if probe.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema version {} unsupported; this build reads version {}",
            probe.schema_version, CHECKPOINT_SCHEMA
        )));
    }
    if probe.kind != "classifier" {
        return Err(Error::Checkpoint(format!(
            "expected a classifier checkpoint, found kind \"{}\"",
            probe.kind
        )));
    }
    let manifest: ClassifierManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("manifest does not parse: {e}")))?;
    manifest.classifier.validate()?;
    let layout = classifier_layout(&manifest.classifier, manifest.feature_dim);
    let mut params = vec![0.0; layout.total()];
    for spec in layout.specs() {
        let (shape, data) = r.f64(&spec.name)?;
        if shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, manifest config implies {:?}",
                spec.name, shape, spec.shape
            )));
        }
        params[spec.offset..spec.offset + spec.len()].copy_from_slice(&data);
    }
    let expected: std::collections::BTreeSet<String> = layout
        .specs()
        .iter()
        .map(|s| s.name.clone())
        .chain(std::iter::once("manifest.json".to_string()))
        .collect();
    let extra: Vec<String> = r
        .names()
        .into_iter()
        .filter(|n| !expected.contains(n))
        .collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds tensors the manifest config does not name: {extra:?}"
        )));
    }
    let model = Classifier {
        cfg: manifest.classifier.clone(),
        feature_dim: manifest.feature_dim,
        layout,
        params,
    };
    Ok((model, manifest))
}
