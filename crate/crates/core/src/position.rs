//! Segment-aware positions.
//!
//! A token is addressed by `(seg_id, offset_id)` and flattened to
//! `pos = seg_id * base + offset_id`. With `1 <= offset_id <= base` the
//! flattening is injective, so tokens generated into one blank keep the same
//! positions no matter how long the other blanks turn out to be.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::template::{SegmentKind, Template};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{Vocab, BOS, EOS, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionIndex {
    pub seg_id: usize,
    pub offset_id: usize,
}

impl PositionIndex {
    pub fn new(seg_id: usize, offset_id: usize) -> Self {
        PositionIndex { seg_id, offset_id }
    }

    pub fn flatten(self, base: usize) -> Result<usize> {
        position_index(self.seg_id, self.offset_id, base)
    }
}

pub fn position_index(seg_id: usize, offset_id: usize, base: usize) -> Result<usize> {
    if base == 0 {
        return Err(Error::Config("position base must be positive".into()));
    }
    if offset_id == 0 {
        return Err(Error::Contract("offset_id is 1-based".into()));
    }
    if offset_id > base {
        return Err(Error::PositionOverflow { seg_id, offset_id, base });
    }
    Ok(seg_id * base + offset_id)
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("d_model must be even and positive, got {d_model}")));
    }
    let mut pe = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    Ok(pe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Sinusoidal,
    /// Summed learned embeddings of `seg_id` and `offset_id`.
    Learned,
}

impl PositionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(PositionKind::Sinusoidal),
            "learned" => Ok(PositionKind::Learned),
            other => Err(Error::Config(format!("position.kind '{other}' (expected sinusoidal|learned)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PositionKind::Sinusoidal => "sinusoidal",
            PositionKind::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionConfig {
    pub base: usize,
    pub kind: PositionKind,
    /// Rows of the learned segment table; segment ids above this are rejected.
    pub max_segments: usize,
}

impl Default for PositionConfig {
    fn default() -> Self {
        PositionConfig { base: 64, kind: PositionKind::Sinusoidal, max_segments: 64 }
    }
}

impl PositionConfig {
    /// Registers the learned tables (no-op for sinusoidal).
    pub fn init_params<T: Scalar, R: rand::Rng + ?Sized>(
        &self,
        prefix: &str,
        d_model: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        if self.kind == PositionKind::Learned {
            store.add(&format!("{prefix}.seg"), Tensor::randn(&[self.max_segments + 2, d_model], 0.5, rng))?;
            store.add(&format!("{prefix}.offset"), Tensor::randn(&[self.base + 1, d_model], 0.5, rng))?;
        }
        Ok(())
    }

    /// Word embedding plus positional embedding for each token, `[n × d_model]`.
    pub fn encode_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        table: Var,
        prefix: &str,
        ids: &[usize],
        positions: &[PositionIndex],
    ) -> Result<Var> {
        if ids.len() != positions.len() {
            return Err(Error::Shape(format!("{} tokens but {} positions", ids.len(), positions.len())));
        }
        let d = g.shape(table)[1];
        let words = g.embedding(table, ids)?;
        let pe = match self.kind {
            PositionKind::Sinusoidal => {
                let mut data = Vec::with_capacity(ids.len() * d);
                for p in positions {
                    let pos = p.flatten(self.base)?;
                    data.extend(positional_encoding(pos, d)?.into_iter().map(T::lit));
                }
                g.input(Tensor::new(&[ids.len(), d], data)?)
            }
            PositionKind::Learned => {
                let mut segs = Vec::with_capacity(positions.len());
                let mut offs = Vec::with_capacity(positions.len());
                for p in positions {
                    p.flatten(self.base)?;
                    if p.seg_id > self.max_segments + 1 {
                        return Err(Error::Index(format!(
                            "segment {} exceeds position.max_segments = {}",
                            p.seg_id, self.max_segments
                        )));
                    }
                    segs.push(p.seg_id);
                    offs.push(p.offset_id);
                }
                let st = g.param_named(&format!("{prefix}.seg"))?;
                let ot = g.param_named(&format!("{prefix}.offset"))?;
                let s = g.embedding(st, &segs)?;
                let o = g.embedding(ot, &offs)?;
                g.add(s, o)?
            }
        };
        g.add(words, pe)
    }
}

/// Token ids and positions of a template as the models read it.
///
/// `<bos>` sits at `(0, 1)` and `<eos>` at `(n + 1, 1)`; an open blank is a
/// single `<mask>` at `(seg_id, 1)`; known and filled tokens run through
/// offsets `1..=len` of their segment.
pub fn layout_template(t: &Template, vocab: &Vocab, base: usize) -> Result<(Vec<usize>, Vec<PositionIndex>)> {
    let mut ids = vec![BOS];
    let mut pos = vec![PositionIndex::new(0, 1)];
    for s in t.segments() {
        match s.kind {
            SegmentKind::Blank => {
                ids.push(MASK);
                pos.push(PositionIndex::new(s.seg_id, 1));
            }
            SegmentKind::Known | SegmentKind::Filled => {
                for (j, tok) in s.tokens.iter().enumerate() {
                    position_index(s.seg_id, j + 1, base)?;
                    ids.push(vocab.id(tok));
                    pos.push(PositionIndex::new(s.seg_id, j + 1));
                }
            }
        }
    }
    ids.push(EOS);
    pos.push(PositionIndex::new(t.segments().len() + 1, 1));
    Ok((ids, pos))
}

/// Positions of the decoder inputs for blank `seg_id`: input `j` (0-based,
/// `<bob>` first) sits at `(seg_id, j + 1)`, the slot of the token it predicts.
pub fn layout_blank(seg_id: usize, len: usize, base: usize) -> Result<Vec<PositionIndex>> {
    (0..len)
        .map(|j| {
            position_index(seg_id, j + 1, base)?;
            Ok(PositionIndex::new(seg_id, j + 1))
        })
        .collect()
}
