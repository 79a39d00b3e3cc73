//! Blank-by-blank decoding, teacher-forced scoring, perplexity, and the
//! evaluation report.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bleu::bleu;
use crate::error::{Error, Result};
use crate::model::{decoder_forward, InfillModel};
use crate::template::{InfillExample, Template};
use crate::tensor::Scalar;
use crate::vocab::{Vocab, BOB, BOS, EOB, EOS, MASK, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub max_blank_len: usize,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { mode: DecodeMode::Greedy, max_blank_len: 20, seed: 0 }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_blank_len == 0 {
            return Err(Error::Config("decode.max_blank_len must be at least 1".into()));
        }
        if let DecodeMode::Sample { temperature } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("decode.temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// Tokens the decoder may never emit inside a blank. `<unk>` is excluded
/// because a template cannot hold reserved tokens.
fn forbidden(id: usize) -> bool {
    matches!(id, PAD | UNK | BOS | EOS | BOB | MASK)
}

/// Log-softmax of one logit row, computed in f64.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledBlank {
    pub seg_id: usize,
    pub tokens: Vec<String>,
    /// Log-probability of each emitted token, then of `<eob>` if it was emitted.
    pub logprobs: Vec<f64>,
    /// Generation hit `max_blank_len` before `<eob>`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillOutput {
    pub template: Template,
    pub blanks: Vec<FilledBlank>,
}

impl FillOutput {
    pub fn sentence(&self) -> Result<Vec<String>> {
        self.template.reconstruct()
    }

    pub fn truncated_blanks(&self) -> usize {
        self.blanks.iter().filter(|b| b.truncated).count()
    }
}

fn choose(logp: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => {
            let mut best: Option<usize> = None;
            for (id, &lp) in logp.iter().enumerate() {
                if !forbidden(id) && best.is_none_or(|b| lp > logp[b]) {
                    best = Some(id);
                }
            }
            best.ok_or_else(|| Error::Contract("vocabulary has no emittable token".into()))
        }
        DecodeMode::Sample { temperature } => {
            let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(id, &lp)| if forbidden(id) { 0.0 } else { ((lp - max) / temperature).exp() })
                .collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Fills the blanks of `template` in ascending order. Each blank is decoded
/// from `<bob>` until `<eob>` or `max_blank_len` tokens, then written back
/// before the next blank is decoded.
pub fn fill_template<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    template: &Template,
    vocab: &Vocab,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<FillOutput> {
    opts.validate()?;
    let mut current = template.clone();
    let mut blanks = Vec::new();
    for seg_id in template.blank_set() {
        let mut ids: Vec<usize> = Vec::new();
        let mut logprobs = Vec::new();
        let mut truncated = true;
        while ids.len() < opts.max_blank_len {
            let logits = decoder_forward(model, &current, seg_id, &ids, vocab)?;
            let logp = log_softmax(logits.row(ids.len()));
            let next = choose(&logp, opts.mode, rng)?;
            logprobs.push(logp[next]);
            if next == EOB {
                truncated = false;
                break;
            }
            ids.push(next);
        }
        let tokens = vocab.decode(&ids);
        current = current.update(seg_id, tokens.clone())?;
        blanks.push(FilledBlank { seg_id, tokens, logprobs, truncated });
    }
    Ok(FillOutput { template: current, blanks })
}

/// Fills many templates in parallel. Template `i` samples from stream `i`
/// of the seeded generator, so results do not depend on scheduling.
pub fn fill_all<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    templates: &[Template],
    vocab: &Vocab,
    opts: &DecodeOptions,
) -> Vec<Result<FillOutput>> {
    templates
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            fill_template(model, t, vocab, opts, &mut rng)
        })
        .collect()
}

/// Teacher-forced log-probabilities of every golden blank token plus the
/// closing `<eob>`, one vector per blank in ascending order.
pub fn example_logprobs<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    ex: &InfillExample,
    vocab: &Vocab,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for seg_id in ex.template.blank_set() {
        let t = ex.template_for_blank(seg_id)?;
        let fill = vocab.encode(&ex.golden[&seg_id]);
        let logits = decoder_forward(model, &t, seg_id, &fill, vocab)?;
        let targets = fill.iter().copied().chain(std::iter::once(EOB));
        out.push(targets.enumerate().map(|(j, y)| log_softmax(logits.row(j))[y]).collect());
    }
    Ok(out)
}

/// `exp(-Σ logp / count)` with the sum taken in the given order.
pub fn perplexity_from_logprobs<'a, I>(logprobs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Vec<Vec<f64>>>,
{
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in logprobs {
        for blank in ex {
            for &lp in blank {
                sum += lp;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("perplexity over zero scored tokens".into()));
    }
    Ok((-sum / count as f64).exp())
}

pub fn perplexity<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    examples: &[InfillExample],
    vocab: &Vocab,
) -> Result<f64> {
    let lps = examples
        .par_iter()
        .map(|ex| example_logprobs(model, ex, vocab))
        .collect::<Result<Vec<_>>>()?;
    perplexity_from_logprobs(&lps)
}

/// Perplexity of an add-one smoothed unigram model of blank tokens (each
/// blank also contributes one `<eob>`), fitted on `train` and scored on
/// `test` with the same token accounting as [`perplexity`].
pub fn unigram_perplexity(train: &[InfillExample], test: &[InfillExample], vocab: &Vocab) -> Result<f64> {
    let mut counts = vec![1.0f64; vocab.len()];
    let fills = |exs: &[InfillExample]| -> Vec<usize> {
        exs.iter()
            .flat_map(|ex| ex.golden.values())
            .flat_map(|fill| vocab.encode(fill).into_iter().chain(std::iter::once(EOB)))
            .collect()
    };
    for id in fills(train) {
        counts[id] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let lp: Vec<f64> = fills(test).into_iter().map(|id| (counts[id] / total).ln()).collect();
    perplexity_from_logprobs(&[vec![lp]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    /// BLEU of the templates with blanks dropped.
    pub template_bleu: f64,
    pub ppl: f64,
    pub nll_sum: f64,
    pub token_count: usize,
    pub sentences: usize,
    pub skipped: usize,
    pub truncated_blanks: usize,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        format!(
            "bleu = {}\ntemplate_bleu = {}\nppl = {}\nnll_sum = {}\ntoken_count = {}\nsentences = {}\nskipped = {}\ntruncated_blanks = {}\n",
            self.bleu,
            self.template_bleu,
            self.ppl,
            self.nll_sum,
            self.token_count,
            self.sentences,
            self.skipped,
            self.truncated_blanks
        )
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("BLEU (filled)", format!("{:.3}", self.bleu)),
            ("BLEU (template only)", format!("{:.3}", self.template_bleu)),
            ("Perplexity", format!("{:.3}", self.ppl)),
            ("Scored tokens", self.token_count.to_string()),
            ("Sentences", self.sentences.to_string()),
            ("Skipped", self.skipped.to_string()),
            ("Truncated blanks", self.truncated_blanks.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<22}{v:>12}\n"));
        }
        out
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    /// `None` for skipped examples.
    pub fills: Vec<Option<FillOutput>>,
    pub logprobs: Vec<Option<Vec<Vec<f64>>>>,
}

impl Evaluation {
    /// One reconstructed sentence per line; skipped examples give an empty line.
    pub fn fills_text(&self) -> Result<String> {
        let mut out = String::new();
        for f in &self.fills {
            if let Some(f) = f {
                out.push_str(&f.sentence()?.join(" "));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// `example<TAB>blank<TAB>index<TAB>logprob` rows in summation order;
    /// `blank` counts the example's blanks from 0.
    pub fn logprob_dump(&self) -> String {
        let mut out = String::from("example\tblank\tindex\tlogprob\n");
        for (i, ex) in self.logprobs.iter().enumerate() {
            for (b, blank) in ex.iter().flatten().enumerate() {
                for (j, lp) in blank.iter().enumerate() {
                    out.push_str(&format!("{i}\t{b}\t{j}\t{lp}\n"));
                }
            }
        }
        out
    }
}

/// Fills every template, scores golden fills, and aggregates the report.
/// Examples whose positions overflow the model's base are counted as skipped.
pub fn evaluate<T: Scalar, M: InfillModel<T> + ?Sized>(
    model: &M,
    examples: &[InfillExample],
    vocab: &Vocab,
    opts: &DecodeOptions,
) -> Result<Evaluation> {
    opts.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let per_example: Vec<Result<Option<(FillOutput, Vec<Vec<f64>>)>>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let mut run = || -> Result<(FillOutput, Vec<Vec<f64>>)> {
                Ok((fill_template(model, &ex.template, vocab, opts, &mut rng)?, example_logprobs(model, ex, vocab)?))
            };
            match run() {
                Ok(r) => Ok(Some(r)),
                Err(Error::PositionOverflow { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut fills = Vec::with_capacity(examples.len());
    let mut logprobs = Vec::with_capacity(examples.len());
    let (mut cands, mut tmpl, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut nll_sum, mut token_count, mut skipped, mut truncated) = (0.0, 0usize, 0usize, 0usize);
    for (ex, r) in examples.iter().zip(per_example) {
        match r? {
            Some((fill, lp)) => {
                cands.push(fill.sentence()?);
                tmpl.push(ex.template.visible_tokens());
                refs.push(ex.original.clone());
                truncated += fill.truncated_blanks();
                for &x in lp.iter().flatten() {
                    nll_sum -= x;
                    token_count += 1;
                }
                fills.push(Some(fill));
                logprobs.push(Some(lp));
            }
            None => {
                skipped += 1;
                fills.push(None);
                logprobs.push(None);
            }
        }
    }
    if cands.is_empty() {
        return Err(Error::Data("every evaluation example was skipped".into()));
    }
    let ppl = perplexity_from_logprobs(logprobs.iter().flatten())?;
    let report = EvalReport {
        bleu: bleu(&cands, &refs, 4)?,
        template_bleu: bleu(&tmpl, &refs, 4)?,
        ppl,
        nll_sum,
        token_count,
        sentences: cands.len(),
        skipped,
        truncated_blanks: truncated,
    };
    Ok(Evaluation { report, fills, logprobs })
}
