#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textinfill::autodiff::{AttnMask, Graph, Var};
use textinfill::data::{ingest_text, mask_random};
use textinfill::model::{decoder_forward, example_instances, infill_loss, Batch, BlankInstance, InfillModel};
use textinfill::position::{PositionConfig, PositionKind};
use textinfill::seq2seq::{lstm_step, LstmParams, RecurrentState, Seq2Seq, Seq2SeqConfig};
use textinfill::synth::{gen_synth, Preset};
use textinfill::template::InfillExample;
use textinfill::transformer::{multi_head_attention, AttnParams, InfillTransformer, ModelConfig};
use textinfill::vocab::Vocab;
use textinfill::Tensor;

pub const KERNEL_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const KERNEL_TRIALS: usize = 20;
pub const MODEL_TRIALS: usize = 20;
const KERNEL_STEP: f64 = 1e-5;
const MODEL_STEP: f64 = 1e-6;
const MODEL_COORDS: usize = 30;

/// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub type KernelFn = Box<dyn for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Var>;

pub struct KernelCase {
    pub inputs: Vec<Tensor<f64>>,
    pub f: KernelFn,
}

fn weighted_loss(case: &KernelCase, inputs: &[Tensor<f64>], weights: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.f)(&mut g, &vars);
    let w = g.mul_const(out, weights.to_vec()).unwrap();
    let s = g.sum(w);
    g.value(s).item()
}

/// Analytic versus central-difference gradient of `Σ R ⊙ f(inputs)` for a
/// random fixed `R`, over every input element.
pub fn kernel_trial(case: &KernelCase, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.f)(&mut g, &vars);
    let weights: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.mul_const(out, weights.clone()).unwrap();
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.wrt(*v).data());
        for k in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += KERNEL_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= KERNEL_STEP;
            let d = weighted_loss(case, &plus, &weights) - weighted_loss(case, &minus, &weights);
            numeric.push(d / (2.0 * KERNEL_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

fn rand_mat(rng: &mut ChaCha8Rng, extra_cols: usize) -> Tensor<f64> {
    let s = [dim(rng), dim(rng) + extra_cols];
    rand_tensor(rng, &s)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn random_mask(rng: &mut ChaCha8Rng, groups: usize, rows: usize, cols: usize) -> AttnMask {
    let mut allowed: Vec<bool> = (0..groups * rows * cols).map(|_| rng.random_bool(0.7)).collect();
    // Keep one fully masked row to exercise the all-hidden case.
    for c in 0..cols {
        allowed[c] = false;
    }
    AttnMask::new(groups, rows, cols, allowed).unwrap()
}

/// Names of every differentiable kernel with a random case generator.
pub fn kernel_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> KernelCase)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])],
                f: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            }
        }),
        ("batch_matmul", |r| {
            let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[b, m, k]), rand_tensor(r, &[b, k, n])],
                f: Box::new(|g, v| g.batch_matmul(v[0], v[1], false).unwrap()),
            }
        }),
        ("batch_matmul_trans_b", |r| {
            let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[b, m, k]), rand_tensor(r, &[b, n, k])],
                f: Box::new(|g, v| g.batch_matmul(v[0], v[1], true).unwrap()),
            }
        }),
        ("add", |r| {
            let s = [dim(r), dim(r)];
            KernelCase {
                inputs: vec![rand_tensor(r, &s), rand_tensor(r, &s)],
                f: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            }
        }),
        ("mul", |r| {
            let s = [dim(r), dim(r)];
            KernelCase {
                inputs: vec![rand_tensor(r, &s), rand_tensor(r, &s)],
                f: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            }
        }),
        ("mul_const", |r| {
            let s = [dim(r), dim(r)];
            let factor: Vec<f64> = (0..s[0] * s[1]).map(|_| r.random_range(-2.0..2.0)).collect();
            KernelCase {
                inputs: vec![rand_tensor(r, &s)],
                f: Box::new(move |g, v| g.mul_const(v[0], factor.clone()).unwrap()),
            }
        }),
        ("scale", |r| {
            let s = r.random_range(-2.0..2.0);
            KernelCase { inputs: vec![rand_mat(r, 0)], f: Box::new(move |g, v| g.scale(v[0], s)) }
        }),
        ("add_row", |r| {
            let (m, n) = (dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])],
                f: Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
            }
        }),
        ("linear", |r| {
            let (m, i, o) = (dim(r), dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, i]), rand_tensor(r, &[i, o]), rand_tensor(r, &[o])],
                f: Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()),
            }
        }),
        ("relu", |r| KernelCase { inputs: vec![{ let s = [dim(r), dim(r)]; away_from_zero(r, &s) }], f: Box::new(|g, v| g.relu(v[0])) }),
        ("tanh", |r| KernelCase { inputs: vec![rand_mat(r, 0)], f: Box::new(|g, v| g.tanh(v[0])) }),
        ("sigmoid", |r| KernelCase { inputs: vec![rand_mat(r, 0)], f: Box::new(|g, v| g.sigmoid(v[0])) }),
        ("softmax", |r| {
            KernelCase { inputs: vec![rand_mat(r, 1)], f: Box::new(|g, v| g.softmax(v[0])) }
        }),
        ("masked_softmax", |r| {
            let (groups, heads, rows, cols) = (dim(r), dim(r), dim(r), dim(r) + 1);
            let mask = random_mask(r, groups, rows, cols).with_heads(heads);
            KernelCase {
                inputs: vec![rand_tensor(r, &[groups * heads, rows, cols])],
                f: Box::new(move |g, v| g.masked_softmax(v[0], Some(&mask)).unwrap()),
            }
        }),
        ("layer_norm", |r| {
            let (m, n) = (dim(r), dim(r) + 2);
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n]), rand_tensor(r, &[n])],
                f: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()),
            }
        }),
        ("embedding", |r| {
            let (vsz, d) = (dim(r) + 1, dim(r));
            let ids: Vec<usize> = (0..dim(r) + 2).map(|_| r.random_range(0..vsz)).collect();
            KernelCase {
                inputs: vec![rand_tensor(r, &[vsz, d])],
                f: Box::new(move |g, v| g.embedding(v[0], &ids).unwrap()),
            }
        }),
        ("cross_entropy", |r| {
            let (m, vsz) = (dim(r) + 1, dim(r) + 1);
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..vsz)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
            mask[0] = true;
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, vsz])],
                f: Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap()),
            }
        }),
        ("gather", |r| {
            let n = dim(r) * dim(r);
            let out = dim(r) + 3;
            let idx: Vec<usize> = (0..out).map(|_| r.random_range(0..n)).collect();
            KernelCase {
                inputs: vec![rand_tensor(r, &[n])],
                f: Box::new(move |g, v| g.gather(v[0], idx.clone(), &[out]).unwrap()),
            }
        }),
        ("slice_cols", |r| {
            let (m, n) = (dim(r), dim(r) + 2);
            let start = r.random_range(0..n);
            let width = r.random_range(1..=n - start);
            KernelCase {
                inputs: vec![rand_tensor(r, &[m, n])],
                f: Box::new(move |g, v| g.slice_cols(v[0], start, width).unwrap()),
            }
        }),
        ("concat_rows", |r| {
            let n = dim(r);
            KernelCase {
                inputs: vec![{ let m = dim(r); rand_tensor(r, &[m, n]) }, { let m = dim(r); rand_tensor(r, &[m, n]) }, rand_tensor(r, &[1, n])],
                f: Box::new(|g, v| g.concat_rows(v).unwrap()),
            }
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r), dim(r));
            KernelCase {
                inputs: vec![rand_tensor(r, &[a, b])],
                f: Box::new(move |g, v| {
                    let x = g.reshape(v[0], &[b, a]).unwrap();
                    let y = g.tanh(x);
                    g.reshape(y, &[a * b]).unwrap()
                }),
            }
        }),
        ("sum", |r| {
            KernelCase {
                inputs: vec![rand_mat(r, 0)],
                f: Box::new(|g, v| {
                    let t = g.tanh(v[0]);
                    g.sum(t)
                }),
            }
        }),
        ("multi_head_attention", |r| {
            let heads = r.random_range(1..=2);
            let d = 2 * heads;
            let (groups, rows, cols) = (dim(r), dim(r), dim(r) + 1);
            let mask = random_mask(r, groups, rows, cols);
            let mut inputs = vec![rand_tensor(r, &[groups * rows, d]), rand_tensor(r, &[groups * cols, d])];
            for _ in 0..4 {
                inputs.push(rand_tensor(r, &[d, d]));
                inputs.push(rand_tensor(r, &[d]));
            }
            KernelCase {
                inputs,
                f: Box::new(move |g, v| {
                    let p = AttnParams { wq: v[2], bq: v[3], wk: v[4], bk: v[5], wv: v[6], bv: v[7], wo: v[8], bo: v[9] };
                    multi_head_attention(g, v[0], v[1], &p, heads, &mask, 0.0, None).unwrap().output
                }),
            }
        }),
        ("lstm_step", |r| {
            let (b, e, u) = (dim(r), dim(r), dim(r));
            KernelCase {
                inputs: vec![
                    rand_tensor(r, &[b, e]),
                    rand_tensor(r, &[b, u]),
                    rand_tensor(r, &[b, u]),
                    rand_tensor(r, &[e, 4 * u]),
                    rand_tensor(r, &[u, 4 * u]),
                    rand_tensor(r, &[4 * u]),
                ],
                f: Box::new(|g, v| {
                    let st = lstm_step(g, v[0], RecurrentState { h: v[1], c: v[2] }, &LstmParams { wx: v[3], wh: v[4], b: v[5] })
                        .unwrap();
                    g.concat_rows(&[st.h, st.c]).unwrap()
                }),
            }
        }),
    ]
}

/// Worst relative error of `trials` random cases of one kernel.
pub fn kernel_worst(gen: fn(&mut ChaCha8Rng) -> KernelCase, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| kernel_trial(&gen(&mut rng), &mut rng)).fold(0.0, f64::max)
}

/// Vocabulary `w0 .. w{n-1}` plus the reserved tokens.
pub fn word_vocab(n: usize) -> Vocab {
    let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    Vocab::build(vec![words], n + 7, 1).unwrap()
}

/// Random sentence over `vocab`'s ordinary words, masked into 1–2 blanks.
pub fn random_example(rng: &mut ChaCha8Rng, vocab: &Vocab, len: std::ops::RangeInclusive<usize>) -> InfillExample {
    let words = vocab.words();
    loop {
        let n = rng.random_range(len.clone());
        let toks: Vec<String> = (0..n).map(|_| words.choose(rng).unwrap().clone()).collect();
        let blanks = rng.random_range(1..=2);
        if let Some(ex) = mask_random(&toks, rng.random_range(0.2..0.6), blanks, rng).unwrap() {
            return ex;
        }
    }
}

pub fn tiny_position(kind: PositionKind) -> PositionConfig {
    PositionConfig { base: 16, kind, max_segments: 8 }
}

pub fn tiny_transformer(vocab_size: usize, kind: PositionKind, dropout: f64, seed: u64) -> InfillTransformer<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        num_blocks: 2,
        num_heads: 2,
        ffn_dim: 12,
        dropout,
        vocab_size,
        position: tiny_position(kind),
    };
    InfillTransformer::new(cfg, seed).unwrap()
}

pub fn tiny_seq2seq(vocab_size: usize, kind: PositionKind, seed: u64) -> Seq2Seq<f64> {
    let cfg = Seq2SeqConfig { embedding_size: 6, num_units: 5, dropout: 0.0, vocab_size, position: tiny_position(kind) };
    Seq2Seq::new(cfg, seed).unwrap()
}

/// Padded batch built from a few random examples of differing lengths.
pub fn random_batch(rng: &mut ChaCha8Rng, vocab: &Vocab, base: usize) -> Batch {
    let mut items: Vec<BlankInstance> = Vec::new();
    for _ in 0..rng.random_range(2..=3) {
        let ex = random_example(rng, vocab, 4..=8);
        items.extend(example_instances(&ex, vocab, base).unwrap());
    }
    Batch::collate(&items, base).unwrap()
}

fn model_loss<M: InfillModel<f64>>(model: &M, batch: &Batch, dropout_seed: Option<u64>) -> f64 {
    let mut g = Graph::with_params(model.params());
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let l = model.batch_loss(&mut g, batch, rng.as_mut()).unwrap();
    g.value(l).item()
}

/// Relative error over randomly sampled parameter coordinates of the batch
/// loss gradient. With `dropout_seed` the same dropout masks are replayed for
/// every evaluation.
pub fn model_trial<M: InfillModel<f64>>(model: &mut M, batch: &Batch, dropout_seed: Option<u64>, rng: &mut ChaCha8Rng) -> f64 {
    let grads = {
        let mut g = Graph::with_params(model.params());
        let mut drng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let l = model.batch_loss(&mut g, batch, drng.as_mut()).unwrap();
        g.backward(l).unwrap().into_param_grads(model.params())
    };
    let sizes: Vec<usize> = (0..model.params().len()).map(|i| model.params().get(i).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..MODEL_COORDS {
        let mut flat = rng.random_range(0..total);
        let mut id = 0;
        while flat >= sizes[id] {
            flat -= sizes[id];
            id += 1;
        }
        analytic.push(grads[id].data()[flat]);
        let orig = model.params().get(id).data()[flat];
        model.params_mut().get_mut(id).data_mut()[flat] = orig + MODEL_STEP;
        let up = model_loss(model, batch, dropout_seed);
        model.params_mut().get_mut(id).data_mut()[flat] = orig - MODEL_STEP;
        let down = model_loss(model, batch, dropout_seed);
        model.params_mut().get_mut(id).data_mut()[flat] = orig;
        numeric.push((up - down) / (2.0 * MODEL_STEP));
    }
    rel_err(&analytic, &numeric)
}

/// Worst error over `MODEL_TRIALS` random models and batches for each
/// architecture variant.
pub fn model_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let vocab = word_vocab(8);
    let v = vocab.len();
    let mut out = Vec::new();
    let variants: Vec<(&str, PositionKind, f64)> = vec![
        ("transformer/sinusoidal", PositionKind::Sinusoidal, 0.0),
        ("transformer/learned", PositionKind::Learned, 0.0),
        ("transformer/dropout", PositionKind::Sinusoidal, 0.2),
    ];
    for (name, kind, p) in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for t in 0..MODEL_TRIALS {
            let mut m = tiny_transformer(v, kind, p, seed + t as u64);
            let batch = random_batch(&mut rng, &vocab, 16);
            let ds = (p > 0.0).then_some(seed + 1000 + t as u64);
            worst = worst.max(model_trial(&mut m, &batch, ds, &mut rng));
        }
        out.push((name.to_string(), worst));
    }
    for (name, kind) in [("seq2seq/sinusoidal", PositionKind::Sinusoidal), ("seq2seq/learned", PositionKind::Learned)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for t in 0..MODEL_TRIALS {
            let mut m = tiny_seq2seq(v, kind, seed + t as u64);
            let batch = random_batch(&mut rng, &vocab, 16);
            worst = worst.max(model_trial(&mut m, &batch, None, &mut rng));
        }
        out.push((name.to_string(), worst));
    }
    out
}

/// Sentences of a synthetic corpus after ingestion.
pub fn synth_sentences(preset: Preset, n: usize, seed: u64) -> Vec<Vec<String>> {
    ingest_text(&gen_synth(preset, n, seed).unwrap(), 10, 18, false).unwrap()
}

pub fn loss_of<M: InfillModel<f64>>(m: &M, ex: &InfillExample, vocab: &Vocab) -> f64 {
    let mut g = Graph::with_params(m.params());
    let l = infill_loss(m, &mut g, ex, vocab, None).unwrap();
    g.value(l).item()
}

/// Perturbs one teacher token of a random blank and reports whether every
/// earlier logit row stayed bit-identical (and the next row changed).
pub fn causality_case<M: InfillModel<f64>>(m: &M, vocab: &Vocab, rng: &mut ChaCha8Rng) -> bool {
    let ex = random_example(rng, vocab, 4..=10);
    let seg = *ex.template.blank_set().choose(rng).unwrap();
    let words = 7..vocab.len();
    let teacher: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(words.clone())).collect();
    let j = rng.random_range(0..teacher.len());
    let mut other = teacher.clone();
    while other[j] == teacher[j] {
        other[j] = rng.random_range(words.clone());
    }
    let a = decoder_forward(m, &ex.template, seg, &teacher, vocab).unwrap();
    let b = decoder_forward(m, &ex.template, seg, &other, vocab).unwrap();
    let bits = |t: &Tensor<f64>, r: usize| t.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.rows() == teacher.len() + 1 && (0..=j).all(|r| bits(&a, r) == bits(&b, r)) && a.row(j + 1) != b.row(j + 1)
}

/// Oracle for the summed loss: each blank scored on its own batch, added in
/// ascending order.
pub fn per_blank_sum<M: InfillModel<f64>>(m: &M, ex: &InfillExample, vocab: &Vocab) -> f64 {
    let mut total: Option<f64> = None;
    for seg in ex.template.blank_set() {
        let t = ex.template_for_blank(seg).unwrap();
        let inst = BlankInstance::new(&t, seg, &vocab.encode(&ex.golden[&seg]), vocab, m.base()).unwrap();
        let batch = Batch::collate(&[inst], m.base()).unwrap();
        let mut g = Graph::with_params(m.params());
        let l = m.batch_loss(&mut g, &batch, None).unwrap();
        let v = g.value(l).item();
        total = Some(total.map_or(v, |t| t + v));
    }
    total.unwrap()
}
