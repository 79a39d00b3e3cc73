//! Corpus ingestion, masking strategies, corpus statistics, and splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::template::InfillExample;
use crate::vocab::{tokenize, BLANK_MARKER};

const SENTENCE_END: [&str; 3] = [".", "!", "?"];
const CLAUSE_BREAK: [&str; 3] = [",", ";", ":"];

/// Prepositions and articles masked by the closed-class strategy.
pub const CLOSED_CLASS_WORDS: &[&str] = &[
    "a", "an", "the", "about", "above", "across", "after", "against", "along", "among", "around", "at",
    "before", "behind", "below", "beneath", "beside", "between", "beyond", "by", "down", "during",
    "except", "for", "from", "in", "inside", "into", "like", "near", "of", "off", "on", "onto", "out",
    "outside", "over", "past", "since", "through", "throughout", "to", "toward", "towards", "under",
    "underneath", "until", "up", "upon", "with", "within", "without",
];

/// Splits one tokenized line into sentences ending at `.`, `!` or `?`.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        cur.push(t.clone());
        if SENTENCE_END.contains(&t.as_str()) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Recursively breaks a sentence longer than `max_len` after the clause
/// punctuation nearest its midpoint. Pieces without such punctuation are
/// returned whole.
pub fn split_clauses(tokens: &[String], max_len: usize) -> Vec<Vec<String>> {
    if tokens.len() <= max_len {
        return vec![tokens.to_vec()];
    }
    let mid = tokens.len() as f64 / 2.0;
    let cut = (0..tokens.len() - 1)
        .filter(|&i| CLAUSE_BREAK.contains(&tokens[i].as_str()))
        .min_by(|&a, &b| {
            let da = ((a + 1) as f64 - mid).abs();
            let db = ((b + 1) as f64 - mid).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
    match cut {
        None => vec![tokens.to_vec()],
        Some(i) => {
            let mut out = split_clauses(&tokens[..=i], max_len);
            out.extend(split_clauses(&tokens[i + 1..], max_len));
            out
        }
    }
}

/// Sentences of `text` after clause splitting, kept when their length lies
/// in `[min_len, max_len]`.
pub fn ingest_text(text: &str, min_len: usize, max_len: usize, lowercase: bool) -> Result<Vec<Vec<String>>> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("invalid length bounds [{min_len}, {max_len}]")));
    }
    let mut out = Vec::new();
    for line in text.lines() {
        for sentence in split_sentences(&tokenize(line, lowercase)) {
            for clause in split_clauses(&sentence, max_len) {
                let ok = (min_len..=max_len).contains(&clause.len()) && !clause.iter().any(|t| t == BLANK_MARKER);
                if ok {
                    out.push(clause);
                }
            }
        }
    }
    Ok(out)
}

pub fn ingest_corpus(path: &Path, min_len: usize, max_len: usize, lowercase: bool) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    ingest_text(&text, min_len, max_len, lowercase)
}

/// Masked token budget: `round(rate * len)`, at least one token per blank.
pub fn mask_budget(len: usize, rate: f64, blanks: usize) -> usize {
    ((rate * len as f64).round() as usize).max(blanks)
}

fn check_rate(rate: f64, blanks: usize) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate must lie in (0, 1), got {rate}")));
    }
    if blanks == 0 {
        return Err(Error::Config("number of blanks must be at least 1".into()));
    }
    Ok(())
}

/// Masks `round(rate * len)` tokens split into `blanks` non-adjacent spans.
/// Span lengths are a uniformly random composition of the budget; the spans'
/// placement is uniform over all non-adjacent arrangements. Returns `None`
/// when the sentence is too short to hold them.
pub fn mask_random<R: Rng + ?Sized>(
    tokens: &[String],
    rate: f64,
    blanks: usize,
    rng: &mut R,
) -> Result<Option<InfillExample>> {
    check_rate(rate, blanks)?;
    let n = tokens.len();
    let budget = mask_budget(n, rate, blanks);
    if budget + blanks - 1 > n {
        return Ok(None);
    }
    let mut cuts: Vec<usize> = sample(rng, budget - 1, blanks - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut lens = Vec::with_capacity(blanks);
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&budget)) {
        lens.push(c - prev);
        prev = c;
    }
    // Place blanks into the gaps around the `n - budget` known tokens, at
    // most one blank per gap, which keeps blanks apart.
    let known = n - budget;
    let mut gaps: Vec<usize> = sample(rng, known + 1, blanks).into_iter().collect();
    gaps.sort_unstable();
    let mut spans = Vec::with_capacity(blanks);
    let mut masked_before = 0;
    for (g, len) in gaps.into_iter().zip(lens) {
        spans.push((g + masked_before, len));
        masked_before += len;
    }
    InfillExample::from_spans(tokens, &spans).map(Some)
}

/// How the anchor strategy picks among entity-style tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityPick {
    First,
    Random,
    None,
}

impl EntityPick {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(EntityPick::First),
            "random" => Ok(EntityPick::Random),
            "none" => Ok(EntityPick::None),
            other => Err(Error::Config(format!("mask.keep_entity '{other}' (expected first|random|none)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityPick::First => "first",
            EntityPick::Random => "random",
            EntityPick::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRules {
    pub keep_numbers: bool,
    pub entity: EntityPick,
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[0-9]+$").expect("static regex"));

/// Capitalized, underscore-joined names such as `Toronto_Raptors`.
static ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z][A-Za-z0-9]*(_[A-Za-z0-9]+)+$").expect("static regex"));

/// Indices kept visible by the anchor rules, plus any annotated indices.
pub fn anchor_indices<R: Rng + ?Sized>(
    tokens: &[String],
    rules: &AnchorRules,
    annotated: Option<&[usize]>,
    rng: &mut R,
) -> Result<BTreeSet<usize>> {
    let mut keep = BTreeSet::new();
    if let Some(idx) = annotated {
        for &i in idx {
            if i >= tokens.len() {
                return Err(Error::Data(format!("annotation index {i} outside {} tokens", tokens.len())));
            }
            keep.insert(i);
        }
    }
    if rules.keep_numbers {
        let is_num = |i: usize| NUMBER.is_match(&tokens[i]);
        for i in 0..tokens.len() {
            let dash = tokens[i] == "-" && i > 0 && i + 1 < tokens.len() && is_num(i - 1) && is_num(i + 1);
            if is_num(i) || dash {
                keep.insert(i);
            }
        }
    }
    let entities: Vec<usize> = (0..tokens.len()).filter(|&i| ENTITY.is_match(&tokens[i])).collect();
    match rules.entity {
        EntityPick::First => keep.extend(entities.first()),
        EntityPick::Random => keep.extend(entities.choose(rng)),
        EntityPick::None => {}
    }
    Ok(keep)
}

/// Masks every token except the anchors; runs of masked tokens collapse
/// into single blanks. `None` when nothing or everything is anchored.
pub fn mask_anchor<R: Rng + ?Sized>(
    tokens: &[String],
    rules: &AnchorRules,
    annotated: Option<&[usize]>,
    rng: &mut R,
) -> Result<Option<InfillExample>> {
    let keep = anchor_indices(tokens, rules, annotated, rng)?;
    if keep.is_empty() || keep.len() == tokens.len() {
        return Ok(None);
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if keep.contains(&i) {
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && !keep.contains(&i) {
            i += 1;
        }
        spans.push((start, i - start));
    }
    InfillExample::from_spans(tokens, &spans).map(Some)
}

/// Masks up to `blanks` single closed-class tokens (random non-adjacent
/// choice) and tops up with empty masks at random boundaries that do not
/// touch an existing blank.
pub fn mask_closed_class<R: Rng + ?Sized>(
    tokens: &[String],
    words: &HashSet<String>,
    blanks: usize,
    rng: &mut R,
) -> Result<InfillExample> {
    if blanks == 0 {
        return Err(Error::Config("number of blanks must be at least 1".into()));
    }
    let n = tokens.len();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| words.contains(&tokens[i].to_lowercase())).collect();
    candidates.shuffle(rng);
    let mut picked: Vec<usize> = Vec::new();
    for c in candidates {
        if picked.len() == blanks {
            break;
        }
        if picked.iter().all(|&p| p.abs_diff(c) >= 2) {
            picked.push(c);
        }
    }
    let mut spans: Vec<(usize, usize)> = picked.iter().map(|&i| (i, 1)).collect();
    while spans.len() < blanks {
        let free: Vec<usize> = (0..=n)
            .filter(|&b| {
                spans.iter().all(|&(s, l)| if l == 0 { s != b } else { b != s && b != s + 1 })
            })
            .collect();
        match free.choose(rng) {
            Some(&b) => spans.push((b, 0)),
            None => break,
        }
    }
    spans.sort_unstable();
    InfillExample::from_spans(tokens, &spans)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskStrategy {
    Random { rate: f64, blanks: usize },
    Anchor { rules: AnchorRules, annotations: Option<Vec<Vec<usize>>> },
    ClosedClass { words: HashSet<String>, blanks: usize },
}

impl MaskStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Random { .. } => "random",
            MaskStrategy::Anchor { .. } => "anchor",
            MaskStrategy::ClosedClass { .. } => "closed_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub seed: u64,
}

/// Annotation file: one line per sentence, space-separated 0-based indices.
pub fn parse_annotations(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(ln, line)| {
            line.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Data(format!("annotation line {}: bad index '{t}'", ln + 1))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub examples: usize,
    pub skipped: usize,
    pub vocab_size: usize,
    pub total_tokens: usize,
    pub masked_tokens: usize,
    /// Masked tokens over tokens of the emitted examples.
    pub realized_mask_rate: f64,
    pub blanks_per_sentence: f64,
    /// Number of examples having each blank count.
    pub blank_histogram: BTreeMap<usize, usize>,
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialise") + "\n"
    }
}

fn sentence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Masks every sentence with its own generator (run seed, stream = index),
/// so output is independent of thread scheduling.
pub fn mask_corpus(sentences: &[Vec<String>], spec: &MaskSpec) -> Result<(Vec<InfillExample>, CorpusStats)> {
    if let MaskStrategy::Anchor { annotations: Some(a), .. } = &spec.strategy {
        if a.len() != sentences.len() {
            return Err(Error::Data(format!(
                "{} annotation lines for {} sentences",
                a.len(),
                sentences.len()
            )));
        }
    }
    let results: Vec<Option<InfillExample>> = sentences
        .par_iter()
        .enumerate()
        .map(|(i, toks)| {
            let mut rng = sentence_rng(spec.seed, i);
            match &spec.strategy {
                MaskStrategy::Random { rate, blanks } => mask_random(toks, *rate, *blanks, &mut rng),
                MaskStrategy::Anchor { rules, annotations } => {
                    let ann = annotations.as_ref().map(|a| a[i].as_slice());
                    mask_anchor(toks, rules, ann, &mut rng)
                }
                MaskStrategy::ClosedClass { words, blanks } => mask_closed_class(toks, words, *blanks, &mut rng).map(Some),
            }
        })
        .collect::<Result<_>>()?;

    let vocab: HashSet<&String> = sentences.iter().flatten().collect();
    let examples: Vec<InfillExample> = results.into_iter().flatten().collect();
    let total_tokens: usize = examples.iter().map(|e| e.original.len()).sum();
    let masked_tokens: usize = examples.iter().map(|e| e.masked_token_count()).sum();
    let mut hist = BTreeMap::new();
    for e in &examples {
        *hist.entry(e.template.num_blanks()).or_insert(0) += 1;
    }
    let blanks: usize = examples.iter().map(|e| e.template.num_blanks()).sum();
    let stats = CorpusStats {
        sentences: sentences.len(),
        examples: examples.len(),
        skipped: sentences.len() - examples.len(),
        vocab_size: vocab.len(),
        total_tokens,
        masked_tokens,
        realized_mask_rate: if total_tokens == 0 { 0.0 } else { masked_tokens as f64 / total_tokens as f64 },
        blanks_per_sentence: if examples.is_empty() { 0.0 } else { blanks as f64 / examples.len() as f64 },
        blank_histogram: hist,
    };
    Ok((examples, stats))
}

/// Seeded shuffle, then test and validation are cut from the front.
pub fn split_dataset<T: Clone>(
    items: &[T],
    valid_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&valid_fraction) || !(0.0..1.0).contains(&test_fraction) || valid_fraction + test_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions valid={valid_fraction} test={test_fraction} must be in [0,1) and sum below 1"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (items.len() as f64 * test_fraction).round() as usize;
    let n_valid = (items.len() as f64 * valid_fraction).round() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    let test = pick(&order[..n_test]);
    let valid = pick(&order[n_test..n_test + n_valid]);
    let train = pick(&order[n_test + n_valid..]);
    Ok((train, valid, test))
}

/// Pair file: one `template<TAB>original` line per example.
pub fn pairs_text(examples: &[InfillExample]) -> String {
    examples.iter().map(|e| e.to_pair_line() + "\n").collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<InfillExample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            InfillExample::from_pair_line(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
