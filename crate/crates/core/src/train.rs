//! Learning-rate schedule, Adam, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::infer::perplexity;
use crate::model::{example_instances, Batch, BlankInstance, InfillModel};
use crate::params::ParamStore;
use crate::template::InfillExample;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_const: f64,
    pub warmup_steps: u64,
    pub d_model: usize,
}

impl ScheduleConfig {
    pub fn new(lr_const: f64, warmup_steps: u64, d_model: usize) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be at least 1".into()));
        }
        if d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if !(lr_const > 0.0 && lr_const.is_finite()) {
            return Err(Error::Config(format!("train.lr_const must be positive, got {lr_const}")));
        }
        Ok(ScheduleConfig { lr_const, warmup_steps, d_model })
    }
}

/// `const * d_model^-0.5 * min(step * warmup^-1.5, step^-0.5)`.
pub fn lr_schedule(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate schedule is defined for step >= 1".into()));
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    let warm = s / (w * w.sqrt());
    let decay = 1.0 / s.sqrt();
    Ok(cfg.lr_const / (cfg.d_model as f64).sqrt() * warm.min(decay))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.997, eps: 1e-9 }
    }
}

/// First/second moments mirroring the parameter store, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        OptimizerState { m: zeros(), v: zeros(), t: 0, config }
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before
/// anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    rate: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape(format!(
                "gradient for '{}' has shape {:?}, parameter has {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
        if let Some(k) = g.data().iter().position(|x| !x.as_f64().is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' at flat index {k} is {} (step {})",
                params.name(id),
                g.data()[k].as_f64(),
                state.t + 1
            )));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powf(state.t as f64);
    let bc2 = 1.0 - beta2.powf(state.t as f64);
    for (id, g) in grads.iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k].as_f64();
            let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * gk * gk;
            m[k] = T::lit(mk);
            v[k] = T::lit(vk);
            let update = rate * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            p[k] = T::lit(p[k].as_f64() - update);
        }
    }
    Ok(())
}

/// Shuffles `examples` (when `rng` is given) and collates every blank of each
/// group of `batch_size` examples into one padded batch.
pub fn batchify(
    examples: &[InfillExample],
    vocab: &Vocab,
    base: usize,
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut items: Vec<BlankInstance> = Vec::new();
        for &i in chunk {
            items.extend(example_instances(&examples[i], vocab, base)?);
        }
        if !items.is_empty() {
            batches.push(Batch::collate(&items, base)?);
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates; 0 means no cap.
    pub max_steps: u64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub valid_every: u64,
    /// Write a metric row every this many steps (validation rows always).
    pub log_every: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    /// Mean token cross-entropy of the step's batch.
    pub loss: f64,
    pub lr: f64,
    pub val_ppl: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,lr,val_ppl\n");
    for r in rows {
        let val = r.val_ppl.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, val));
    }
    out
}

pub struct TrainResult<T: Scalar> {
    pub metrics: Vec<MetricRow>,
    pub steps: u64,
    /// Parameters with the lowest validation perplexity (the final ones when
    /// there is no validation set) and the step they were taken at.
    pub best_params: ParamStore<T>,
    pub best_step: u64,
    pub best_val_ppl: Option<f64>,
}

/// Trains `model` in place. Each update minimises the mean token
/// cross-entropy of one batch. Fully determined by `opts.seed`.
pub fn train<T: Scalar, M: InfillModel<T>>(
    model: &mut M,
    train_set: &[InfillExample],
    valid_set: &[InfillExample],
    vocab: &Vocab,
    opts: &TrainOptions,
) -> Result<TrainResult<T>> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if model.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary of {} tokens",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let base = model.base();
    let mut state = OptimizerState::new(model.params(), opts.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    dropout_rng.set_stream(1);

    let mut metrics = Vec::new();
    let mut best_params = model.params().clone();
    let mut best_step = 0;
    let mut best_val_ppl = None;
    let mut step = 0u64;

    let validate = |model: &M| -> Result<Option<f64>> {
        if valid_set.is_empty() {
            Ok(None)
        } else {
            perplexity(model, valid_set, vocab).map(Some)
        }
    };

    'outer: for _epoch in 0..opts.epochs {
        let batches = batchify(train_set, vocab, base, opts.batch_size, Some(&mut shuffle_rng))?;
        let last = batches.len() - 1;
        for (bi, batch) in batches.iter().enumerate() {
            if opts.max_steps > 0 && step >= opts.max_steps {
                break 'outer;
            }
            step += 1;
            let rate = lr_schedule(step, &opts.schedule)?;
            let (loss, grads) = {
                let mut g = Graph::with_params(model.params());
                let total = model.batch_loss(&mut g, batch, Some(&mut dropout_rng))?;
                let n = batch.scored_tokens().max(1) as f64;
                let mean = g.scale(total, T::lit(1.0 / n));
                let loss = g.value(mean).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss is {loss} at step {step}")));
                }
                let grads = g.backward(mean)?.into_param_grads(model.params());
                (loss, grads)
            };
            adam_step(model.params_mut(), &grads, &mut state, rate)?;

            let capped = opts.max_steps > 0 && step >= opts.max_steps;
            let due = if opts.valid_every > 0 { step % opts.valid_every == 0 } else { bi == last };
            let val_ppl = if due || capped { validate(model)? } else { None };
            if let Some(ppl) = val_ppl {
                if best_val_ppl.is_none_or(|b| ppl < b) {
                    best_val_ppl = Some(ppl);
                    best_params = model.params().clone();
                    best_step = step;
                }
            }
            let log_due = opts.log_every == 0 || step % opts.log_every == 0;
            if log_due || val_ppl.is_some() {
                metrics.push(MetricRow { step, loss, lr: rate, val_ppl });
            }
        }
    }
    if valid_set.is_empty() || step == 0 {
        best_params = model.params().clone();
        best_step = step;
    }
    Ok(TrainResult { metrics, steps: step, best_params, best_step, best_val_ppl })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn default_setting_at_warmup() {
        let cfg = ScheduleConfig::new(0.3, 10000, 400).unwrap();
        let lr = lr_schedule(10000, &cfg).unwrap();
        assert!((lr - 1.5e-4).abs() / 1.5e-4 < 1e-12);
    }

    #[test]
    fn schedule_branches() {
        let cfg = ScheduleConfig::new(0.3, 100, 64).unwrap();
        let w = 100f64;
        assert_eq!(w / (w * w.sqrt()), 1.0 / w.sqrt());
        for s in 1..100 {
            assert!(lr_schedule(s + 1, &cfg).unwrap() > lr_schedule(s, &cfg).unwrap());
        }
        for s in 100..400 {
            assert!(lr_schedule(s + 1, &cfg).unwrap() < lr_schedule(s, &cfg).unwrap());
        }
        assert!(matches!(lr_schedule(0, &cfg), Err(Error::Contract(_))));
        assert!(ScheduleConfig::new(0.3, 0, 64).is_err());
    }

    #[test]
    fn zero_gradient_is_a_no_op_and_moments_decay() {
        let mut p = store(&[0.5, -1.25, 3.0]);
        let before = p.get(0).clone();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        st.m[0] = Tensor::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap();
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        assert_eq!(p.get(0), &before);
        assert_eq!(st.t, 1);

        let mut q = store(&[1.0]);
        let mut st = OptimizerState::new(&q, AdamConfig::default());
        adam_step(&mut q, &[Tensor::from_f64(&[1], &[2.0]).unwrap()], &mut st, 0.1).unwrap();
        let m1 = st.m[0].data()[0];
        adam_step(&mut q, &[Tensor::zeros(&[1])], &mut st, 0.1).unwrap();
        assert!(st.m[0].data()[0].abs() < m1.abs());
    }

    #[test]
    fn first_step_moves_by_rate_against_gradient_sign() {
        let mut p = store(&[1.0, 1.0]);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap()], &mut st, 0.01).unwrap();
        // m_hat = g, v_hat = g^2, so the step is rate * g / (|g| + eps).
        let want0 = 1.0 - 0.01 * 3.0 / (3.0 + 1e-9);
        let want1 = 1.0 + 0.01 * 0.5 / (0.5 + 1e-9);
        assert!((p.get(0).data()[0] - want0).abs() < 1e-15);
        assert!((p.get(0).data()[1] - want1).abs() < 1e-15);
    }

    #[test]
    fn two_half_steps_differ_from_one_step() {
        let g = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut a = store(&[0.0]);
        let mut sa = OptimizerState::new(&a, AdamConfig::default());
        adam_step(&mut a, std::slice::from_ref(&g), &mut sa, 0.1).unwrap();
        let mut b = store(&[0.0]);
        let mut sb = OptimizerState::new(&b, AdamConfig::default());
        adam_step(&mut b, std::slice::from_ref(&g), &mut sb, 0.05).unwrap();
        let g2 = Tensor::from_f64(&[1], &[0.25]).unwrap();
        adam_step(&mut b, std::slice::from_ref(&g2), &mut sb, 0.05).unwrap();
        assert_ne!(a.get(0).data()[0], b.get(0).data()[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &[Tensor::from_f64(&[2], &[0.1, f64::NAN]).unwrap()], &mut st, 0.1);
        assert!(matches!(err, Err(Error::NonFinite(ref m)) if m.contains("'w'")));
        assert_eq!(p.get(0).data(), &[1.0, 2.0]);
        assert_eq!(st.t, 0);
    }
}
