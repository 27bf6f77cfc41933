//! Optimizer, learning-rate schedule, training loop, and perplexity.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainState;
use crate::data::{make_batches, EncodedExample};
use crate::error::{CareError, Result};
use crate::metrics::bleu_n;
use crate::model::{
    CareModel, DecodeStrategy, GenerateOptions, LossWeights, ModelConfig, Prepared,
};
use crate::nn::ForwardCtx;
use crate::rng::CounterRng;
use crate::tensor::{backward, no_grad, Tensor};

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam optimizer state: first/second moment buffers mirroring each
/// parameter, plus the shared step counter.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Flatten the moments in parameter order (checkpointing).
    pub fn flattened(&self) -> (Vec<f64>, Vec<f64>) {
        (self.m.concat(), self.v.concat())
    }

    pub fn restore(
        params: &[(String, Tensor)],
        step: u64,
        m_flat: &[f64],
        v_flat: &[f64],
    ) -> Result<AdamState> {
        let total: usize = params.iter().map(|(_, p)| p.numel()).sum();
        if m_flat.len() != total || v_flat.len() != total {
            return Err(CareError::Checkpoint(format!(
                "optimizer state length {} does not match {total} parameters",
                m_flat.len()
            )));
        }
        let mut state = AdamState::new(params);
        state.step = step;
        let mut offset = 0;
        for (i, (_, p)) in params.iter().enumerate() {
            let n = p.numel();
            state.m[i].copy_from_slice(&m_flat[offset..offset + n]);
            state.v[i].copy_from_slice(&v_flat[offset..offset + n]);
            offset += n;
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over every parameter with a gradient.
/// A non-finite gradient aborts with a diagnostic naming the parameter.
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, (name, p)) in params.iter().enumerate() {
        let grad = match p.grad() {
            Some(g) => g,
            None => continue,
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CareError::Training(format!(
                "non-finite gradient in parameter '{name}' at step {}",
                state.step
            )));
        }
        let mut data = p.to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..grad.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.set_data(&data);
    }
    Ok(())
}

/// Inverse-square-root schedule with linear warmup:
/// `d^{-0.5} * min(step^{-0.5}, step * warmup^{-1.5})`.
pub fn noam_lr(step: u64, d: usize, warmup: u64) -> f64 {
    assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    (d as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Linear KL warm-up over this many steps; 0 disables it.
    pub kl_warmup_steps: u64,
    pub dropout: f64,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: u64,
    /// Early-stopping patience in validation rounds without improvement.
    pub patience: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 10_000,
            batch_size: 16,
            warmup: 4000,
            seed: 0,
            weights: LossWeights::default(),
            kl_warmup_steps: 0,
            dropout: 0.1,
            eval_every: 500,
            patience: 3,
        }
    }
}

/// One metrics-log record; line-delimited JSON in log files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_g: f64,
    pub loss_r: f64,
    pub kl_g: f64,
    pub kl_c: f64,
    pub recon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ppl: Option<f64>,
}

pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub best_val_ppl: Option<f64>,
}

/// Drives forward/backward/Adam over seeded epochs. Progress is a pure
/// function of (model init, TrainConfig, data), so two trainers with the
/// same inputs produce bitwise-identical trajectories and a trainer resumed
/// from checkpointed state continues the original one.
pub struct Trainer<'a> {
    pub model: &'a CareModel,
    pub config: TrainConfig,
    params: Vec<(String, Tensor)>,
    adam: AdamState,
    step: u64,
    best_val_ppl: Option<f64>,
    bad_evals: u32,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a CareModel, config: TrainConfig) -> Trainer<'a> {
        let params = model.params();
        let adam = AdamState::new(&params);
        Trainer {
            model,
            config,
            params,
            adam,
            step: 0,
            best_val_ppl: None,
            bad_evals: 0,
        }
    }

    pub fn resume(model: &'a CareModel, config: TrainConfig, state: &TrainState) -> Result<Trainer<'a>> {
        let params = model.params();
        let adam = AdamState::restore(&params, state.step, &state.adam_m, &state.adam_v)?;
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            step: state.step,
            best_val_ppl: state.best_val_ppl,
            bad_evals: state.bad_evals,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> TrainState {
        let (m, v) = self.adam.flattened();
        TrainState {
            step: self.step,
            adam_m: m,
            adam_v: v,
            best_val_ppl: self.best_val_ppl,
            bad_evals: self.bad_evals,
        }
    }

    fn batch_for_step(&self, n_examples: usize, step: u64) -> Vec<usize> {
        let per_epoch = n_examples.div_ceil(self.config.batch_size) as u64;
        let epoch = (step - 1) / per_epoch;
        let batch_idx = ((step - 1) % per_epoch) as usize;
        // Epoch order derives from (seed, epoch): resumable mid-epoch.
        let dummy: Vec<EncodedExample> = (0..n_examples)
            .map(|_| EncodedExample {
                context_ids: vec![],
                response_ids: vec![],
            })
            .collect();
        let epoch_seed = CounterRng::new(self.config.seed).derive(epoch).seed();
        let batches = make_batches(&dummy, self.config.batch_size, epoch_seed);
        batches[batch_idx].indices.clone()
    }

    /// Run one optimizer step; returns the step's metrics record.
    pub fn step_once(&mut self, train_set: &[Prepared]) -> Result<StepRecord> {
        assert!(!train_set.is_empty(), "empty training set");
        let step = self.step + 1;
        let lr = noam_lr(step, self.model.config.d, self.config.warmup);
        let kl_scale = if self.config.kl_warmup_steps > 0 {
            (step as f64 / self.config.kl_warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let indices = self.batch_for_step(train_set.len(), step);

        self.model.zero_grads();
        let root = CounterRng::new(self.config.seed);
        let mut total: Option<Tensor> = None;
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // loss_g, loss_r, kl_g, kl_c, recon
        for &idx in &indices {
            let ex_rng = root.derive_path(&[0x57e9, step, idx as u64]);
            let mut sample_rng = ex_rng.derive(1);
            let dropout_rng = RefCell::new(ex_rng.derive(2));
            let ctx = if self.config.dropout > 0.0 {
                ForwardCtx::train(self.config.dropout, &dropout_rng)
            } else {
                ForwardCtx::eval()
            };
            let out = self.model.forward_train(
                &train_set[idx],
                &self.config.weights,
                kl_scale,
                &mut sample_rng,
                &ctx,
            )?;
            sums.0 += out.loss_generation.item();
            sums.1 += out.loss_reasoning.item();
            sums.2 += out.kl_graph;
            sums.3 += out.kl_context;
            sums.4 += out.recon;
            total = Some(match total {
                Some(t) => t.add(&out.loss_total).map_err(CareError::Tensor)?,
                None => out.loss_total,
            });
        }
        let n = indices.len() as f64;
        let loss = total.expect("nonempty batch").mul_scalar(1.0 / n);
        backward(&loss).map_err(CareError::Tensor)?;
        adam_step(&self.params, &mut self.adam, lr)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            loss_g: sums.0 / n,
            loss_r: sums.1 / n,
            kl_g: sums.2 / n,
            kl_c: sums.3 / n,
            recon: sums.4 / n,
            val_ppl: None,
        })
    }

    /// Full loop with periodic validation and early stopping; every record
    /// (with `val_ppl` set on validation steps) is passed to `on_record`.
    pub fn run(
        &mut self,
        train_set: &[Prepared],
        valid_set: Option<&[Prepared]>,
        mut on_record: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<TrainReport> {
        let mut final_loss = f64::NAN;
        let mut stopped_early = false;
        while self.step < self.config.max_steps {
            let mut record = self.step_once(train_set)?;
            final_loss = record.loss_g + record.loss_r;
            if let Some(valid) = valid_set {
                if self.config.eval_every > 0 && record.step % self.config.eval_every == 0 {
                    let ppl = perplexity(self.model, valid)?;
                    record.val_ppl = Some(ppl);
                    let improved = self.best_val_ppl.map_or(true, |best| ppl < best);
                    if improved {
                        self.best_val_ppl = Some(ppl);
                        self.bad_evals = 0;
                    } else {
                        self.bad_evals += 1;
                        if self.bad_evals >= self.config.patience {
                            on_record(&record)?;
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
            on_record(&record)?;
        }
        Ok(TrainReport {
            steps_run: self.step,
            final_loss,
            stopped_early,
            best_val_ppl: self.best_val_ppl,
        })
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Teacher-forced corpus perplexity: `exp(total NLL / total gold tokens)`.
/// Conditions and relations come from the prior (inference) path with mean
/// latents, so gold responses never leak into the memories.
pub fn perplexity(model: &CareModel, dataset: &[Prepared]) -> Result<f64> {
    no_grad(|| {
        let mut nll = 0.0;
        let mut tokens = 0usize;
        let ctx = ForwardCtx::eval();
        for prepared in dataset {
            let mut rng = CounterRng::new(0).derive(0xe7a1);
            let (e_out, relations) = model.prior_reasoning(prepared, true, &mut rng)?;
            let r = match &relations.matrix {
                Some(m) => m.clone(),
                None => Tensor::zeros(&[1, model.config.d]),
            };
            let logits = model.teacher_forced_logits(&prepared.response_ids, &e_out, &r, &ctx)?;
            let mean = crate::model::loss_generation(&logits, &prepared.response_ids)?;
            nll += mean.item() * prepared.response_ids.len() as f64;
            tokens += prepared.response_ids.len();
        }
        if tokens == 0 {
            return Err(CareError::Validation("perplexity over empty dataset".into()));
        }
        Ok((nll / tokens as f64).exp())
    })
}

/// Greedy generations for every example (evaluation path).
pub fn generate_all(model: &CareModel, dataset: &[Prepared], seed: u64) -> Result<Vec<Vec<usize>>> {
    let opts = GenerateOptions {
        strategy: DecodeStrategy::Greedy,
        max_len: model.config.max_response_tokens,
        use_mean: true,
        seed,
    };
    dataset
        .iter()
        .map(|p| model.generate_prepared(p, &opts).map(|g| g.token_ids))
        .collect()
}

// ── k-sweep harness ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub bleu4: f64,
    pub train_ppl: f64,
}

/// Retrain the same toy setup at several relation budgets and score BLEU-4
/// of greedy generations against the gold responses. The (k, BLEU-4) curve
/// is reported, not gated.
#[allow(clippy::too_many_arguments)]
pub fn k_sweep(
    base_config: &ModelConfig,
    vocab: &crate::data::Vocab,
    labels: &[String],
    builder: &crate::graph::GraphBuilder,
    examples: &[crate::data::DialogueExample],
    train_cfg: &TrainConfig,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<KSweepRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut config = base_config.clone();
        config.k = k;
        let model = CareModel::init(config, vocab.clone(), labels.to_vec(), seed);
        let prepared: Vec<Prepared> = examples
            .iter()
            .map(|e| model.prepare(e, builder))
            .collect::<Result<_>>()?;
        let mut trainer = Trainer::new(&model, train_cfg.clone());
        trainer.run(&prepared, None, |_| Ok(()))?;
        let hyps = generate_all(&model, &prepared, seed)?;
        let refs: Vec<Vec<usize>> = prepared
            .iter()
            .map(|p| p.response_ids[..p.response_ids.len() - 1].to_vec())
            .collect();
        let bleu4 = bleu_n(&hyps, &refs, 4)?;
        let train_ppl = perplexity(&model, &prepared)?;
        rows.push(KSweepRow { k, bleu4, train_ppl });
    }
    Ok(rows)
}

/// CSV form of a sweep: header plus one row per k.
pub fn k_sweep_csv(rows: &[KSweepRow]) -> String {
    let mut out = String::from("k,bleu4,train_ppl\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.bleu4, r.train_ppl));
    }
    out
}
