//! Attentional LSTM encoder-decoder baseline.
//!
//! The encoder reads the position-encoded template left to right. The
//! decoder starts from the encoder's final state and at each step scores the
//! memory with Luong's multiplicative attention (`h · W_m · m_j`), then mixes
//! the context into `tanh(W_h h + W_c ctx + b)` before the output layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{dropout, xavier, Batch, InfillModel, ModelKind};
use crate::params::ParamStore;
use crate::position::{PositionConfig, PositionIndex};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqConfig {
    pub embedding_size: usize,
    pub num_units: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub position: PositionConfig,
}

impl Seq2SeqConfig {
    /// Published defaults: 400-d embeddings, 1600 LSTM units, 10% dropout.
    pub fn with_vocab(vocab_size: usize) -> Self {
        Seq2SeqConfig {
            embedding_size: 400,
            num_units: 1600,
            dropout: 0.1,
            vocab_size,
            position: PositionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_units == 0 {
            return Err(Error::Config("num_units must be positive".into()));
        }
        if self.embedding_size == 0 || self.embedding_size % 2 != 0 {
            return Err(Error::Config(format!("embedding size must be even, got {}", self.embedding_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("model.kind".into(), ModelKind::Seq2Seq.as_str().into()),
            ("model.d_model".into(), self.embedding_size.to_string()),
            ("model.num_units".into(), self.num_units.to_string()),
            ("model.dropout".into(), self.dropout.to_string()),
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("position.base".into(), self.position.base.to_string()),
            ("position.kind".into(), self.position.kind.as_str().into()),
            ("position.max_segments".into(), self.position.max_segments.to_string()),
        ]
    }
}

/// Hidden and cell vectors, each `[batch × units]`.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

/// Gate weights packed as `[input | forget | candidate | output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// One gated recurrence step; returns the new state (its `h` is the output).
pub fn lstm_step<T: Scalar>(g: &mut Graph<'_, T>, x: Var, state: RecurrentState, p: &LstmParams) -> Result<RecurrentState> {
    let units = g.value(state.h).cols();
    let xw = g.matmul(x, p.wx)?;
    let hw = g.matmul(state.h, p.wh)?;
    let z = g.add(xw, hw)?;
    let z = g.add_row(z, p.b)?;
    let i = g.slice_cols(z, 0, units)?;
    let i = g.sigmoid(i);
    let f = g.slice_cols(z, units, units)?;
    let f = g.sigmoid(f);
    let cand = g.slice_cols(z, 2 * units, units)?;
    let cand = g.tanh(cand);
    let o = g.slice_cols(z, 3 * units, units)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(RecurrentState { h, c })
}

/// Rows `t, t + len, ...` of a `[batch*len × d]` tensor laid out batch-major.
fn time_slice<T: Scalar>(g: &mut Graph<'_, T>, x: Var, batch: usize, len: usize, t: usize) -> Result<Var> {
    let d = g.value(x).cols();
    let idx = (0..batch).flat_map(|b| (b * len + t) * d..(b * len + t + 1) * d).collect();
    g.gather(x, idx, &[batch, d])
}

/// Stack per-step `[batch × d]` tensors into batch-major `[batch*len × d]`.
fn stack_time<T: Scalar>(g: &mut Graph<'_, T>, steps: &[Var], batch: usize) -> Result<Var> {
    let len = steps.len();
    let d = g.value(steps[0]).cols();
    let cat = g.concat_rows(steps)?;
    let idx = (0..batch)
        .flat_map(|b| (0..len).flat_map(move |t| (t * batch + b) * d..(t * batch + b + 1) * d))
        .collect();
    g.gather(cat, idx, &[batch * len, d])
}

/// `new` where `keep[b]`, else `old`; exact for 0/1 factors.
fn blend<T: Scalar>(g: &mut Graph<'_, T>, new: Var, old: Var, keep: &[bool]) -> Result<Var> {
    let units = g.value(new).cols();
    let on: Vec<T> = keep.iter().flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, units)).collect();
    let off: Vec<T> = on.iter().map(|&x| T::one() - x).collect();
    let a = g.mul_const(new, on)?;
    let b = g.mul_const(old, off)?;
    g.add(a, b)
}

pub struct Seq2Seq<T: Scalar> {
    pub config: Seq2SeqConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, u, v) = (config.embedding_size, config.num_units, config.vocab_size);
        let mut s = ParamStore::new();
        s.add("emb", Tensor::randn(&[v, e], 1.0, &mut rng))?;
        config.position.init_params("pos", e, &mut s, &mut rng)?;
        for side in ["enc", "dec"] {
            s.add(&format!("{side}.wx"), xavier(e, 4 * u, &mut rng))?;
            s.add(&format!("{side}.wh"), xavier(u, 4 * u, &mut rng))?;
            let mut bias = Tensor::zeros(&[4 * u]);
            for x in &mut bias.data_mut()[u..2 * u] {
                *x = T::one();
            }
            s.add(&format!("{side}.b"), bias)?;
        }
        s.add("attn.wm", xavier(u, u, &mut rng))?;
        s.add("comb.wh", xavier(u, u, &mut rng))?;
        s.add("comb.wc", xavier(u, u, &mut rng))?;
        s.add("comb.b", Tensor::zeros(&[u]))?;
        s.add("out.w", xavier(u, v, &mut rng))?;
        s.add("out.b", Tensor::zeros(&[v]))?;
        Ok(Seq2Seq { config, params: s })
    }

    pub fn from_params(config: Seq2SeqConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config.clone(), 0)?;
        crate::checkpoint::check_params_match(fresh.params(), &params)?;
        Ok(Seq2Seq { config, params })
    }

    fn cell(g: &mut Graph<'_, T>, side: &str) -> Result<LstmParams> {
        Ok(LstmParams {
            wx: g.param_named(&format!("{side}.wx"))?,
            wh: g.param_named(&format!("{side}.wh"))?,
            b: g.param_named(&format!("{side}.b"))?,
        })
    }

    /// Encoder states for every template position (`[batch*len × units]`,
    /// batch-major) and the final state of each sequence.
    pub fn encode_template(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        positions: &[PositionIndex],
        lens: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, RecurrentState)> {
        let batch = lens.len();
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::Shape(format!("{} template ids for batch of {batch}", ids.len())));
        }
        let len = ids.len() / batch;
        let units = self.config.num_units;
        let emb = g.param_named("emb")?;
        let x = self.config.position.encode_sequence(g, emb, "pos", ids, positions)?;
        let x = dropout(g, x, self.config.dropout, rng)?;
        let cell = Self::cell(g, "enc")?;
        let zero = g.input(Tensor::zeros(&[batch, units]));
        let mut state = RecurrentState { h: zero, c: zero };
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = time_slice(g, x, batch, len, t)?;
            let next = lstm_step(g, xt, state, &cell)?;
            let live: Vec<bool> = lens.iter().map(|&l| t < l).collect();
            state = if live.iter().all(|&b| b) {
                next
            } else {
                RecurrentState { h: blend(g, next.h, state.h, &live)?, c: blend(g, next.c, state.c, &live)? }
            };
            outs.push(state.h);
        }
        let memory = stack_time(g, &outs, batch)?;
        Ok((memory, state))
    }
}

impl<T: Scalar> InfillModel<T> for Seq2Seq<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Seq2Seq
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
        self.forward_traced(g, batch, rng).map(|(logits, _)| logits)
    }
}

impl<T: Scalar> Seq2Seq<T> {
    /// Logits plus the memory attention weights (`[batch, 1, mem_len]`) of
    /// every decoder step.
    fn forward_traced(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut rng = rng;
        let p = self.config.dropout;
        let (b, len, mem) = (batch.size, batch.dec_len, batch.mem_len);
        let (memory, enc_state) =
            self.encode_template(g, &batch.mem_ids, &batch.mem_pos, &batch.mem_lens, rng.as_deref_mut())?;
        let units = self.config.num_units;
        let wm = g.param_named("attn.wm")?;
        let keys = g.matmul(memory, wm)?;
        let keys = g.reshape(keys, &[b, mem, units])?;
        let values = g.reshape(memory, &[b, mem, units])?;
        let mut mask = AttnMask::all_visible(b, 1, mem);
        for i in 0..b {
            for c in batch.mem_lens[i]..mem {
                mask.hide_key(i, c);
            }
        }

        let emb = g.param_named("emb")?;
        let x = self.config.position.encode_sequence(g, emb, "pos", &batch.dec_ids, &batch.dec_pos)?;
        let x = dropout(g, x, p, rng.as_deref_mut())?;
        let cell = Self::cell(g, "dec")?;
        let wh = g.param_named("comb.wh")?;
        let wc = g.param_named("comb.wc")?;
        let cb = g.param_named("comb.b")?;
        let mut state = enc_state;
        let mut outs = Vec::with_capacity(len);
        let mut traces = Vec::with_capacity(len);
        for t in 0..len {
            let xt = time_slice(g, x, b, len, t)?;
            state = lstm_step(g, xt, state, &cell)?;
            let q = g.reshape(state.h, &[b, 1, units])?;
            let scores = g.batch_matmul(q, keys, true)?;
            let weights = g.masked_softmax(scores, Some(&mask))?;
            let ctx = g.batch_matmul(weights, values, false)?;
            let ctx = g.reshape(ctx, &[b, units])?;
            let hh = g.matmul(state.h, wh)?;
            let cc = g.matmul(ctx, wc)?;
            let mix = g.add(hh, cc)?;
            let mix = g.add_row(mix, cb)?;
            let mix = g.tanh(mix);
            outs.push(mix);
            traces.push(weights);
        }
        let out = stack_time(g, &outs, b)?;
        let out = dropout(g, out, p, rng.as_deref_mut())?;
        let w = g.param_named("out.w")?;
        let bias = g.param_named("out.b")?;
        let logits = g.linear(out, w, bias)?;
        Ok((logits, traces))
    }

    /// Memory attention weights of each decoder step in evaluation mode.
    pub fn attention_weights(&self, batch: &Batch) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::with_params(&self.params);
        let (_, traces) = self.forward_traced(&mut g, batch, None)?;
        Ok(traces.into_iter().map(|w| g.value(w).clone()).collect())
    }
}

