//! Shared model plumbing: teacher-forced blank instances, padded batches,
//! the [`InfillModel`] trait, and the per-example loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::position::{layout_blank, layout_template, PositionIndex};
use crate::seq2seq::Seq2Seq;
use crate::template::{InfillExample, Template};
use crate::tensor::Scalar;
use crate::transformer::InfillTransformer;
use crate::vocab::{Vocab, BOB, EOB, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SelfAttn,
    Seq2Seq,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self_attn" => Ok(ModelKind::SelfAttn),
            "seq2seq" => Ok(ModelKind::Seq2Seq),
            other => Err(Error::Config(format!("model.kind '{other}' (expected self_attn|seq2seq)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SelfAttn => "self_attn",
            ModelKind::Seq2Seq => "seq2seq",
        }
    }
}

/// Everything needed to score one blank: the template it attends to and the
/// teacher-forced decoder inputs/targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlankInstance {
    pub mem_ids: Vec<usize>,
    pub mem_pos: Vec<PositionIndex>,
    pub seg_id: usize,
    /// `<bob>` followed by the fill.
    pub inputs: Vec<usize>,
    /// The fill followed by `<eob>`.
    pub targets: Vec<usize>,
}

impl BlankInstance {
    pub fn new(template: &Template, seg_id: usize, fill: &[usize], vocab: &Vocab, base: usize) -> Result<Self> {
        if !template.blank_set().contains(&seg_id) {
            return Err(Error::Contract(format!("segment {seg_id} is not a blank of the template")));
        }
        let (mem_ids, mem_pos) = layout_template(template, vocab, base)?;
        let mut inputs = Vec::with_capacity(fill.len() + 1);
        inputs.push(BOB);
        inputs.extend_from_slice(fill);
        let mut targets = fill.to_vec();
        targets.push(EOB);
        layout_blank(seg_id, inputs.len(), base)?;
        Ok(BlankInstance { mem_ids, mem_pos, seg_id, inputs, targets })
    }

    pub fn dec_positions(&self, base: usize) -> Result<Vec<PositionIndex>> {
        layout_blank(self.seg_id, self.inputs.len(), base)
    }
}

/// One instance per blank in ascending seg_id order; earlier blanks carry
/// their golden fills.
pub fn example_instances(ex: &InfillExample, vocab: &Vocab, base: usize) -> Result<Vec<BlankInstance>> {
    ex.template
        .blank_set()
        .into_iter()
        .map(|id| {
            let t = ex.template_for_blank(id)?;
            let fill = vocab.encode(&ex.golden[&id]);
            BlankInstance::new(&t, id, &fill, vocab, base)
        })
        .collect()
}

/// Right-padded batch of blank instances, flattened row-major as
/// `[size × mem_len]` and `[size × dec_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub mem_len: usize,
    pub dec_len: usize,
    pub mem_ids: Vec<usize>,
    pub mem_pos: Vec<PositionIndex>,
    pub mem_lens: Vec<usize>,
    pub dec_ids: Vec<usize>,
    pub dec_pos: Vec<PositionIndex>,
    pub dec_lens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn collate(items: &[BlankInstance], base: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("cannot collate an empty batch".into()));
        }
        let size = items.len();
        let mem_len = items.iter().map(|b| b.mem_ids.len()).max().unwrap_or(0);
        let dec_len = items.iter().map(|b| b.inputs.len()).max().unwrap_or(0);
        let pad_pos = PositionIndex::new(0, 1);
        let mut batch = Batch {
            size,
            mem_len,
            dec_len,
            mem_ids: Vec::with_capacity(size * mem_len),
            mem_pos: Vec::with_capacity(size * mem_len),
            mem_lens: Vec::with_capacity(size),
            dec_ids: Vec::with_capacity(size * dec_len),
            dec_pos: Vec::with_capacity(size * dec_len),
            dec_lens: Vec::with_capacity(size),
            targets: Vec::with_capacity(size * dec_len),
            loss_mask: Vec::with_capacity(size * dec_len),
        };
        for it in items {
            let m = it.mem_ids.len();
            batch.mem_ids.extend(it.mem_ids.iter().copied().chain(std::iter::repeat_n(PAD, mem_len - m)));
            batch.mem_pos.extend(it.mem_pos.iter().copied().chain(std::iter::repeat_n(pad_pos, mem_len - m)));
            batch.mem_lens.push(m);
            let d = it.inputs.len();
            let pos = it.dec_positions(base)?;
            batch.dec_ids.extend(it.inputs.iter().copied().chain(std::iter::repeat_n(PAD, dec_len - d)));
            batch.dec_pos.extend(pos.into_iter().chain(std::iter::repeat_n(pad_pos, dec_len - d)));
            batch.targets.extend(it.targets.iter().copied().chain(std::iter::repeat_n(PAD, dec_len - d)));
            batch.loss_mask.extend((0..dec_len).map(|j| j < d));
            batch.dec_lens.push(d);
        }
        Ok(batch)
    }

    pub fn scored_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// A model that scores blank fills given their template.
pub trait InfillModel<T: Scalar>: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn base(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Key/value description of the architecture, stored in checkpoints.
    fn config_entries(&self) -> Vec<(String, String)>;

    /// Logits `[size * dec_len × vocab]` for a batch. Dropout is applied only
    /// when `rng` is given (training mode).
    fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;

    /// Summed cross-entropy over the batch's scored positions.
    fn batch_loss(&self, g: &mut Graph<'_, T>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let logits = self.forward(g, batch, rng)?;
        g.cross_entropy(logits, &batch.targets, &batch.loss_mask)
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub(crate) fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let factor = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    g.mul_const(x, factor)
}

/// Either architecture, selected at runtime from config or checkpoint.
pub enum AnyModel<T: Scalar> {
    SelfAttn(InfillTransformer<T>),
    Seq2Seq(Seq2Seq<T>),
}

impl<T: Scalar> AnyModel<T> {
    fn inner(&self) -> &dyn InfillModel<T> {
        match self {
            AnyModel::SelfAttn(m) => m,
            AnyModel::Seq2Seq(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn InfillModel<T> {
        match self {
            AnyModel::SelfAttn(m) => m,
            AnyModel::Seq2Seq(m) => m,
        }
    }
}

impl<T: Scalar> InfillModel<T> for AnyModel<T> {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn params(&self) -> &ParamStore<T> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.inner_mut().params_mut()
    }

    fn base(&self) -> usize {
        self.inner().base()
    }

    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }

    fn config_entries(&self) -> Vec<(String, String)> {
        self.inner().config_entries()
    }

    fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.inner().forward(g, batch, rng)
    }
}

/// Logits `[teacher.len() + 1 × vocab]` for filling blank `seg_id` of
/// `template` with decoder inputs `<bob> teacher...` (evaluation mode).
pub fn decoder_forward<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    template: &Template,
    seg_id: usize,
    teacher: &[usize],
    vocab: &Vocab,
) -> Result<crate::tensor::Tensor<T>> {
    let inst = BlankInstance::new(template, seg_id, teacher, vocab, model.base())?;
    let batch = Batch::collate(std::slice::from_ref(&inst), model.base())?;
    let mut g = Graph::with_params(model.params());
    let logits = model.forward(&mut g, &batch, None)?;
    Ok(g.value(logits).clone())
}

/// Σ over blanks (ascending) of the teacher-forced cross-entropy, each blank
/// conditioned on a template holding the golden fills of earlier blanks.
/// Returns the graph's loss node so callers can differentiate it.
pub fn infill_loss<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<'_, T>,
    ex: &InfillExample,
    vocab: &Vocab,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut rng = rng;
    let mut total: Option<Var> = None;
    for inst in example_instances(ex, vocab, model.base())? {
        let batch = Batch::collate(std::slice::from_ref(&inst), model.base())?;
        let l = model.batch_loss(g, &batch, rng.as_deref_mut())?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.input(crate::tensor::Tensor::scalar(T::zero()))),
    }
}

/// Deterministic Xavier-uniform weight matrix.
pub(crate) fn xavier<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> crate::tensor::Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    crate::tensor::Tensor::uniform(&[rows, cols], bound, rng)
}
