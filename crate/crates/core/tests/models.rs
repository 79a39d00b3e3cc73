mod common;

use std::path::PathBuf;

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textinfill::autodiff::{AttnMask, Graph};
use textinfill::checkpoint::{load_model, manifest_for, save_checkpoint};
use textinfill::data::{mask_closed_class, mask_corpus, MaskSpec, MaskStrategy};
use textinfill::model::{decoder_forward, example_instances, infill_loss, Batch, InfillModel};
use textinfill::position::{layout_template, PositionKind};
use textinfill::seq2seq::Seq2Seq;
use textinfill::synth::Preset;
use textinfill::template::{InfillExample, Segment, SegmentKind, Template};
use textinfill::train::{train, AdamConfig, ScheduleConfig, TrainOptions};
use textinfill::transformer::{multi_head_attention, AttnParams, InfillTransformer, ModelConfig};
use textinfill::vocab::{tokenize, Vocab, EOB};
use textinfill::Tensor;

fn attn_inputs(g: &mut Graph<'_, f64>, w: [&Tensor<f64>; 4], d: usize) -> AttnParams {
    let z = Tensor::zeros(&[d]);
    AttnParams {
        wq: g.input(w[0].clone()),
        bq: g.input(z.clone()),
        wk: g.input(w[1].clone()),
        bk: g.input(z.clone()),
        wv: g.input(w[2].clone()),
        bv: g.input(z.clone()),
        wo: g.input(w[3].clone()),
        bo: g.input(z),
    }
}

#[test]
fn attention_over_one_key_projects_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    let ws: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut rng, &[d, d])).collect();
    let mut g = Graph::new();
    let p = attn_inputs(&mut g, [&ws[0], &ws[1], &ws[2], &ws[3]], d);
    let q = g.input(rand_tensor(&mut rng, &[1, d]));
    let kv_t = rand_tensor(&mut rng, &[1, d]);
    let kv = g.input(kv_t.clone());
    let out = multi_head_attention(&mut g, q, kv, &p, 2, &AttnMask::all_visible(1, 1, 1), 0.0, None).unwrap();
    let v = g.matmul(kv, p.wv).unwrap();
    let want = g.matmul(v, p.wo).unwrap();
    for (a, b) in g.value(out.output).data().iter().zip(g.value(want).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_weights_sum_to_one_over_visible_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (groups, rows, cols, heads, d) = (2, 3, 4, 2, 4);
        let ws: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut rng, &[d, d])).collect();
        let mut allowed: Vec<bool> = (0..groups * rows * cols).map(|_| rng.random_bool(0.6)).collect();
        for r in 0..groups * rows {
            allowed[r * cols + rng.random_range(0..cols)] = true;
        }
        let mask = AttnMask::new(groups, rows, cols, allowed.clone()).unwrap();
        let mut g = Graph::new();
        let p = attn_inputs(&mut g, [&ws[0], &ws[1], &ws[2], &ws[3]], d);
        let q = g.input(rand_tensor(&mut rng, &[groups * rows, d]));
        let kv = g.input(rand_tensor(&mut rng, &[groups * cols, d]));
        let out = multi_head_attention(&mut g, q, kv, &p, heads, &mask, 0.0, None).unwrap();
        let w = g.value(out.weights).data();
        for gr in 0..groups {
            for h in 0..heads {
                for r in 0..rows {
                    let base = ((gr * heads + h) * rows + r) * cols;
                    let row = &w[base..base + cols];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for c in 0..cols {
                        if !allowed[(gr * rows + r) * cols + c] {
                            assert_eq!(row[c], 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn two_token_single_head_matches_hand_computation() {
    let t = |d: &[f64]| Tensor::new(&[2, 2], d.to_vec()).unwrap();
    let wq = t(&[0.5, 0.1, -0.2, 0.3]);
    let wk = t(&[0.4, 0.0, 0.2, -0.1]);
    let wv = t(&[1.0, 0.5, -0.5, 0.2]);
    let wo = t(&[0.3, -0.4, 0.6, 0.1]);
    let xq = [[1.0, 2.0], [0.5, -1.0]];
    let xkv = [[0.2, 0.7], [-0.3, 0.4]];

    let mm = |x: [f64; 2], w: &Tensor<f64>| [x[0] * w.at2(0, 0) + x[1] * w.at2(1, 0), x[0] * w.at2(0, 1) + x[1] * w.at2(1, 1)];
    let mut want = Vec::new();
    for xr in xq {
        let q = mm(xr, &wq);
        let scores: Vec<f64> = xkv
            .iter()
            .map(|&k| {
                let k = mm(k, &wk);
                (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
            })
            .collect();
        let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let v0 = mm(xkv[0], &wv);
        let v1 = mm(xkv[1], &wv);
        let ctx = [a[0] * v0[0] + a[1] * v1[0], a[0] * v0[1] + a[1] * v1[1]];
        want.extend(mm(ctx, &wo));
    }

    let mut g = Graph::new();
    let p = attn_inputs(&mut g, [&wq, &wk, &wv, &wo], 2);
    let q = g.input(t(&[1.0, 2.0, 0.5, -1.0]));
    let kv = g.input(t(&[0.2, 0.7, -0.3, 0.4]));
    let out = multi_head_attention(&mut g, q, kv, &p, 1, &AttnMask::all_visible(1, 2, 2), 0.0, None).unwrap();
    for (a, b) in g.value(out.output).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn later_teacher_tokens_never_leak_backwards() {
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 0..100 {
        let kind = if t % 2 == 0 { PositionKind::Sinusoidal } else { PositionKind::Learned };
        assert!(causality_case(&tiny_transformer(vocab.len(), kind, 0.1, t), &vocab, &mut rng));
        assert!(causality_case(&tiny_seq2seq(vocab.len(), kind, t), &vocab, &mut rng));
    }
}

#[test]
fn empty_teacher_gives_one_row() {
    let vocab = word_vocab(4);
    let m = tiny_transformer(vocab.len(), PositionKind::Sinusoidal, 0.0, 1);
    let t = Template::parse("w0 __m__ w1").unwrap();
    let logits = decoder_forward(&m, &t, 2, &[], &vocab).unwrap();
    assert_eq!(logits.shape(), &[1, vocab.len()]);
}

fn uniform<M: InfillModel<f64>>(mut m: M) -> M {
    for name in ["out.w", "out.b"] {
        m.params_mut().by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    m
}

fn lengths_two_and_three(vocab: &Vocab) -> InfillExample {
    let toks: Vec<String> = [0, 1, 2, 0, 1, 2, 0, 1].iter().map(|i| vocab.words()[*i].clone()).collect();
    let ex = InfillExample::from_spans(&toks, &[(1, 2), (4, 3)]).unwrap();
    assert_eq!(ex.golden.values().map(Vec::len).collect::<Vec<_>>(), [2, 3]);
    ex
}

#[test]
fn uniform_logits_cost_log_v_per_scored_token() {
    let vocab = word_vocab(3);
    assert_eq!(vocab.len(), 10);
    let ex = lengths_two_and_three(&vocab);
    let want = 7.0 * 10f64.ln();
    let t = uniform(tiny_transformer(10, PositionKind::Sinusoidal, 0.0, 5));
    let s = uniform(tiny_seq2seq(10, PositionKind::Sinusoidal, 5));
    assert!((loss_of(&t, &ex, &vocab) - want).abs() < 1e-9);
    assert!((loss_of(&s, &ex, &vocab) - want).abs() < 1e-9);
}

#[test]
fn loss_is_zero_when_golden_is_forced() {
    let vocab = word_vocab(3);
    let toks = tokenize("w0 w1 w2 w0", false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = mask_closed_class(&toks, &Default::default(), 3, &mut rng).unwrap();
    assert_eq!(ex.masked_token_count(), 0);
    let mut m = uniform(tiny_transformer(10, PositionKind::Sinusoidal, 0.0, 5));
    m.params_mut().by_name_mut("out.b").unwrap().data_mut()[EOB] = 1e4;
    assert_eq!(loss_of(&m, &ex, &vocab), 0.0);
}

#[test]
fn loss_is_the_exact_sum_of_blank_losses() {
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in 0..20 {
        let ex = random_example(&mut rng, &vocab, 5..=12);
        let t = tiny_transformer(vocab.len(), PositionKind::Sinusoidal, 0.0, s);
        assert_eq!(loss_of(&t, &ex, &vocab).to_bits(), per_blank_sum(&t, &ex, &vocab).to_bits());
        let q = tiny_seq2seq(vocab.len(), PositionKind::Learned, s);
        assert_eq!(loss_of(&q, &ex, &vocab).to_bits(), per_blank_sum(&q, &ex, &vocab).to_bits());
    }
}

#[test]
fn padded_batch_loss_equals_unbatched_sum() {
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = tiny_transformer(vocab.len(), PositionKind::Sinusoidal, 0.0, 1);
    let q = tiny_seq2seq(vocab.len(), PositionKind::Sinusoidal, 1);
    let mut items = Vec::new();
    let mut unbatched = (0.0, 0.0);
    for _ in 0..6 {
        let ex = random_example(&mut rng, &vocab, 4..=12);
        items.extend(example_instances(&ex, &vocab, 16).unwrap());
        unbatched.0 += loss_of(&t, &ex, &vocab);
        unbatched.1 += loss_of(&q, &ex, &vocab);
    }
    let batch = Batch::collate(&items, 16).unwrap();
    assert!(batch.loss_mask.iter().any(|m| !m), "fixture should need padding");
    for (m, want) in [(&t as &dyn InfillModel<f64>, unbatched.0), (&q, unbatched.1)] {
        let mut g = Graph::with_params(m.params());
        let l = m.batch_loss(&mut g, &batch, None).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-10 * want.abs());
    }
}

#[test]
fn evaluation_mode_is_deterministic() {
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ex = random_example(&mut rng, &vocab, 6..=10);
    let t = tiny_transformer(vocab.len(), PositionKind::Learned, 0.3, 2);
    assert_eq!(loss_of(&t, &ex, &vocab).to_bits(), loss_of(&t, &ex, &vocab).to_bits());
    let with_dropout = |seed| {
        let mut g = Graph::with_params(t.params());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let l = infill_loss(&t, &mut g, &ex, &vocab, Some(&mut r)).unwrap();
        g.value(l).item()
    };
    assert_eq!(with_dropout(1).to_bits(), with_dropout(1).to_bits());
    assert_ne!(with_dropout(1), loss_of(&t, &ex, &vocab));
}

#[test]
fn tiny_single_head_model_passes_per_parameter_check() {
    let vocab = word_vocab(4);
    assert_eq!(vocab.len(), 11);
    let cfg = ModelConfig {
        d_model: 8,
        num_blocks: 1,
        num_heads: 1,
        ffn_dim: 32,
        dropout: 0.0,
        vocab_size: 11,
        position: tiny_position(PositionKind::Sinusoidal),
    };
    let mut m = InfillTransformer::<f64>::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_batch(&mut rng, &vocab, 16);
    let loss = |m: &InfillTransformer<f64>| {
        let mut g = Graph::with_params(m.params());
        let l = m.batch_loss(&mut g, &batch, None).unwrap();
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::with_params(m.params());
        let l = m.batch_loss(&mut g, &batch, None).unwrap();
        g.backward(l).unwrap().into_param_grads(m.params())
    };
    let (mut pass, mut total) = (0usize, 0usize);
    let h = 1e-6;
    for id in 0..m.params().len() {
        for k in 0..m.params().get(id).len() {
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = loss(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = loss(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            let (a, n) = (grads[id].data()[k], (up - down) / (2.0 * h));
            let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            pass += (err < 1e-5) as usize;
            total += 1;
        }
    }
    assert!(pass as f64 >= 0.99 * total as f64, "{pass}/{total}");
}

fn shuffled_known_tokens(ex: &InfillExample) -> InfillExample {
    let known: Vec<String> = ex
        .template
        .segments()
        .iter()
        .filter(|s| s.kind == SegmentKind::Known)
        .flat_map(|s| s.tokens.clone())
        .collect();
    let mut rotated = known.clone();
    rotated.rotate_left(1);
    let mut it = rotated.into_iter();
    let segments: Vec<Segment> = ex
        .template
        .segments()
        .iter()
        .map(|s| match s.kind {
            SegmentKind::Known => Segment { tokens: it.by_ref().take(s.tokens.len()).collect(), ..s.clone() },
            _ => s.clone(),
        })
        .collect();
    InfillExample { template: Template::from_segments(segments).unwrap(), ..ex.clone() }
}

#[test]
fn trained_model_reads_the_template() {
    let sentences = synth_sentences(Preset::Nba, 64, 4);
    let vocab = Vocab::build(sentences.clone(), 1000, 1).unwrap();
    let spec = MaskSpec { strategy: MaskStrategy::Random { rate: 0.3, blanks: 2 }, seed: 4 };
    let (examples, _) = mask_corpus(&sentences, &spec).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        vocab_size: vocab.len(),
        position: tiny_position(PositionKind::Sinusoidal),
    };
    let mut m = InfillTransformer::<f64>::new(cfg, 4).unwrap();
    let opts = TrainOptions {
        batch_size: 16,
        epochs: 10,
        max_steps: 40,
        schedule: ScheduleConfig::new(1.0, 20, 16).unwrap(),
        adam: AdamConfig::default(),
        valid_every: 0,
        log_every: 1,
        seed: 4,
    };
    train(&mut m, &examples, &[], &vocab, &opts).unwrap();
    let mut changed = 0;
    for ex in examples.iter().take(10) {
        let sh = shuffled_known_tokens(ex);
        if sh.template != ex.template {
            assert_ne!(loss_of(&m, ex, &vocab).to_bits(), loss_of(&m, &sh, &vocab).to_bits());
            changed += 1;
        }
    }
    assert!(changed > 0);
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored snapshot; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, values: &[f64]) {
    let path = golden_path(name);
    let text: String = values.iter().map(|v| format!("{v:e}\n")).collect();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let stored: Vec<f64> = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(stored.len(), values.len());
    for (s, v) in stored.iter().zip(values) {
        assert!((s - v).abs() <= 1e-12 * s.abs().max(1.0), "{s} vs {v}");
    }
}

fn golden_fixture() -> (Vocab, Template) {
    (word_vocab(8), Template::parse("w0 __m__ w3 w4 __m__ w7").unwrap())
}

#[test]
fn transformer_logits_match_snapshot_and_survive_reload() {
    let (vocab, t) = golden_fixture();
    let m = tiny_transformer(vocab.len(), PositionKind::Sinusoidal, 0.1, 42);
    let teacher = vocab.encode(&tokenize("w1 w2", false));
    let logits = decoder_forward(&m, &t, 2, &teacher, &vocab).unwrap();
    check_golden("transformer_logits.txt", logits.data());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, m.params(), &manifest_for(&m, &vocab.content_hash(), 0)).unwrap();
    let (_, back) = load_model::<f64>(&path, None).unwrap();
    let again = decoder_forward(&back, &t, 2, &teacher, &vocab).unwrap();
    assert_eq!(
        logits.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        again.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

fn encoder_memory(m: &Seq2Seq<f64>, t: &Template, vocab: &Vocab) -> Tensor<f64> {
    let (ids, pos) = layout_template(t, vocab, m.base()).unwrap();
    let mut g = Graph::with_params(m.params());
    let (mem, _) = m.encode_template(&mut g, &ids, &pos, &[ids.len()], None).unwrap();
    g.value(mem).clone()
}

#[test]
fn seq2seq_memory_snapshot_and_unidirectionality() {
    let (vocab, t) = golden_fixture();
    let m = tiny_seq2seq(vocab.len(), PositionKind::Sinusoidal, 42);
    let mem = encoder_memory(&m, &t, &vocab);
    check_golden("seq2seq_memory.txt", mem.data());

    let longer = Template::parse("w0 __m__ w3 w4 __m__ w7 w1 w2").unwrap();
    let (ids, _) = layout_template(&t, &vocab, 16).unwrap();
    let mem2 = encoder_memory(&m, &longer, &vocab);
    // Layouts agree up to the last known token before `<eos>`.
    let shared = ids.len() - 1;
    assert_eq!(&mem.data()[..shared * 5], &mem2.data()[..shared * 5]);

    let mut g = Graph::with_params(m.params());
    let pos = [textinfill::position::PositionIndex::new(1, 1)];
    let (one, _) = m.encode_template(&mut g, &[7], &pos, &[1], None).unwrap();
    assert_eq!(g.value(one).shape(), &[1, 5]);
}

#[test]
fn seq2seq_memory_attention_is_normalised() {
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = tiny_seq2seq(vocab.len(), PositionKind::Learned, 3);
    let batch = random_batch(&mut rng, &vocab, 16);
    let steps = m.attention_weights(&batch).unwrap();
    assert_eq!(steps.len(), batch.dec_len);
    for w in steps {
        for b in 0..batch.size {
            let row = &w.data()[b * batch.mem_len..(b + 1) * batch.mem_len];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[batch.mem_lens[b]..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn reshuffled_rows_keep_a_valid_mask() {
    // Guards the fixture helpers against degenerate batches.
    let vocab = word_vocab(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut items = Vec::new();
    for _ in 0..3 {
        items.extend(example_instances(&random_example(&mut rng, &vocab, 4..=8), &vocab, 16).unwrap());
    }
    items.shuffle(&mut rng);
    let b = Batch::collate(&items, 16).unwrap();
    assert_eq!(b.scored_tokens(), items.iter().map(|i| i.targets.len()).sum::<usize>());
}
