//! Self-attention infilling decoder.
//!
//! Decoder inputs (`<bob>` plus the tokens generated so far for one blank)
//! pass through pre-norm blocks of causal self-attention, template-decoder
//! attention whose keys and values are the embedded template, and a ReLU
//! feed-forward layer. Template and decoder tokens share the word embedding
//! table and the segment-aware positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{dropout, xavier, Batch, InfillModel, ModelKind};
use crate::params::ParamStore;
use crate::position::PositionConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub position: PositionConfig,
}

impl ModelConfig {
    /// Published defaults: 6 blocks, 8 heads, 400-d embeddings, 10% dropout.
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 400,
            num_blocks: 6,
            num_heads: 8,
            ffn_dim: 1600,
            dropout: 0.1,
            vocab_size,
            position: PositionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Config("vocab_size, ffn_dim and num_blocks must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("model.kind".into(), ModelKind::SelfAttn.as_str().into()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.num_blocks".into(), self.num_blocks.to_string()),
            ("model.num_heads".into(), self.num_heads.to_string()),
            ("model.ffn_dim".into(), self.ffn_dim.to_string()),
            ("model.dropout".into(), self.dropout.to_string()),
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("position.base".into(), self.position.base.to_string()),
            ("position.kind".into(), self.position.kind.as_str().into()),
            ("position.max_segments".into(), self.position.max_segments.to_string()),
        ]
    }
}

/// Parameter handles of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnParams {
    fn load<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| g.param_named(&format!("{prefix}.{s}"));
        Ok(AttnParams {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

pub struct AttnOutput {
    pub output: Var,
    /// Post-softmax weights, `[groups * heads, rows, cols]`.
    pub weights: Var,
}

/// `[groups*len × d]` → `[groups*heads × len × d/heads]`.
fn split_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, groups: usize, len: usize, heads: usize) -> Result<Var> {
    let d = g.value(x).cols();
    let dk = d / heads;
    let mut idx = Vec::with_capacity(groups * len * d);
    for gr in 0..groups {
        for h in 0..heads {
            for l in 0..len {
                for c in 0..dk {
                    idx.push((gr * len + l) * d + h * dk + c);
                }
            }
        }
    }
    g.gather(x, idx, &[groups * heads, len, dk])
}

/// Inverse of [`split_heads`].
fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, groups: usize, len: usize, heads: usize) -> Result<Var> {
    let dk = g.value(x).cols();
    let d = dk * heads;
    let mut idx = Vec::with_capacity(groups * len * d);
    for gr in 0..groups {
        for l in 0..len {
            for h in 0..heads {
                for c in 0..dk {
                    idx.push(((gr * heads + h) * len + l) * dk + c);
                }
            }
        }
    }
    g.gather(x, idx, &[groups * len, d])
}

/// Multi-head scaled dot-product attention.
///
/// `queries` is `[groups*rows × d]` and `keys_values` is `[groups*cols × d]`
/// where `rows × cols` is the mask slice shape. Per head the output is
/// `softmax(QKᵀ/√d_k)·V`; heads are concatenated and projected by `wo`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    queries: Var,
    keys_values: Var,
    p: &AttnParams,
    num_heads: usize,
    mask: &AttnMask,
    attn_dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<AttnOutput> {
    let d = g.value(queries).cols();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Shape(format!("d_model {d} not divisible by {num_heads} heads")));
    }
    let (groups, rows, cols) = (mask.groups, mask.rows, mask.cols);
    if g.value(queries).rows() != groups * rows || g.value(keys_values).rows() != groups * cols {
        return Err(Error::Shape(format!(
            "attention inputs {:?}/{:?} do not match mask {groups}x{rows}x{cols}",
            g.shape(queries),
            g.shape(keys_values)
        )));
    }
    let q = g.linear(queries, p.wq, p.bq)?;
    let k = g.linear(keys_values, p.wk, p.bk)?;
    let v = g.linear(keys_values, p.wv, p.bv)?;
    let qh = split_heads(g, q, groups, rows, num_heads)?;
    let kh = split_heads(g, k, groups, cols, num_heads)?;
    let vh = split_heads(g, v, groups, cols, num_heads)?;
    let scores = g.batch_matmul(qh, kh, true)?;
    let dk = (d / num_heads) as f64;
    let scores = g.scale(scores, T::lit(1.0 / dk.sqrt()));
    let head_mask = mask.clone().with_heads(num_heads);
    let weights = g.masked_softmax(scores, Some(&head_mask))?;
    let dropped = dropout(g, weights, attn_dropout, rng)?;
    let ctx = g.batch_matmul(dropped, vh, false)?;
    let merged = merge_heads(g, ctx, groups, rows, num_heads)?;
    let output = g.linear(merged, p.wo, p.bo)?;
    Ok(AttnOutput { output, weights })
}

pub struct InfillTransformer<T: Scalar> {
    pub config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> InfillTransformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab_size);
        let mut s = ParamStore::new();
        s.add("emb", Tensor::randn(&[v, d], 1.0, &mut rng))?;
        config.position.init_params("pos", d, &mut s, &mut rng)?;
        for b in 0..config.num_blocks {
            for ln in ["ln1", "ln2", "ln3"] {
                s.add(&format!("block{b}.{ln}.g"), Tensor::full(&[d], T::one()))?;
                s.add(&format!("block{b}.{ln}.b"), Tensor::zeros(&[d]))?;
            }
            for att in ["self", "cross"] {
                for w in ["q", "k", "v", "o"] {
                    s.add(&format!("block{b}.{att}.w{w}"), xavier(d, d, &mut rng))?;
                    s.add(&format!("block{b}.{att}.b{w}"), Tensor::zeros(&[d]))?;
                }
            }
            s.add(&format!("block{b}.ffn.w1"), xavier(d, f, &mut rng))?;
            s.add(&format!("block{b}.ffn.b1"), Tensor::zeros(&[f]))?;
            s.add(&format!("block{b}.ffn.w2"), xavier(f, d, &mut rng))?;
            s.add(&format!("block{b}.ffn.b2"), Tensor::zeros(&[d]))?;
        }
        s.add("final_ln.g", Tensor::full(&[d], T::one()))?;
        s.add("final_ln.b", Tensor::zeros(&[d]))?;
        s.add("out.w", xavier(d, v, &mut rng))?;
        s.add("out.b", Tensor::zeros(&[v]))?;
        Ok(InfillTransformer { config, params: s })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config.clone(), 0)?;
        crate::checkpoint::check_params_match(fresh.params(), &params)?;
        Ok(InfillTransformer { config, params })
    }

    fn layer_norm(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = g.param_named(&format!("{prefix}.g"))?;
        let beta = g.param_named(&format!("{prefix}.b"))?;
        g.layer_norm(x, gamma, beta, 1e-6)
    }
}

impl<T: Scalar> InfillModel<T> for InfillTransformer<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::SelfAttn
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn base(&self) -> usize {
        self.config.position.base
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn config_entries(&self) -> Vec<(String, String)> {
        self.config.entries()
    }

    fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let cfg = &self.config;
        let mut rng = rng;
        let p = cfg.dropout;
        let (b, len, mem) = (batch.size, batch.dec_len, batch.mem_len);
        let emb = g.param_named("emb")?;

        let x = cfg.position.encode_sequence(g, emb, "pos", &batch.dec_ids, &batch.dec_pos)?;
        let mut x = dropout(g, x, p, rng.as_deref_mut())?;
        let memory = cfg.position.encode_sequence(g, emb, "pos", &batch.mem_ids, &batch.mem_pos)?;
        let memory = dropout(g, memory, p, rng.as_deref_mut())?;

        let mut self_mask = AttnMask::causal(b, len);
        let mut cross_mask = AttnMask::all_visible(b, len, mem);
        for i in 0..b {
            for c in batch.dec_lens[i]..len {
                self_mask.hide_key(i, c);
            }
            for c in batch.mem_lens[i]..mem {
                cross_mask.hide_key(i, c);
            }
        }

        for blk in 0..cfg.num_blocks {
            let h = self.layer_norm(g, x, &format!("block{blk}.ln1"))?;
            let ap = AttnParams::load(g, &format!("block{blk}.self"))?;
            let a = multi_head_attention(g, h, h, &ap, cfg.num_heads, &self_mask, p, rng.as_deref_mut())?;
            let a = dropout(g, a.output, p, rng.as_deref_mut())?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, x, &format!("block{blk}.ln2"))?;
            let ap = AttnParams::load(g, &format!("block{blk}.cross"))?;
            let a = multi_head_attention(g, h, memory, &ap, cfg.num_heads, &cross_mask, p, rng.as_deref_mut())?;
            let a = dropout(g, a.output, p, rng.as_deref_mut())?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, x, &format!("block{blk}.ln3"))?;
            let w1 = g.param_named(&format!("block{blk}.ffn.w1"))?;
            let b1 = g.param_named(&format!("block{blk}.ffn.b1"))?;
            let w2 = g.param_named(&format!("block{blk}.ffn.w2"))?;
            let b2 = g.param_named(&format!("block{blk}.ffn.b2"))?;
            let f = g.linear(h, w1, b1)?;
            let f = g.relu(f);
            let f = g.linear(f, w2, b2)?;
            let f = dropout(g, f, p, rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        let x = self.layer_norm(g, x, "final_ln")?;
        let w = g.param_named("out.w")?;
        let bias = g.param_named("out.b")?;
        g.linear(x, w, bias)
    }
}

