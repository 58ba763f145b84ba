//! Pretraining the desk base model and running single fine-tuning cells.

use crate::adamw::{AdamWConfig, AdamWState};
use crate::cost::FlopsLedger;
use crate::data::{
    build_batch, schedule, Batch, CorpusWindow, Example, Item, ReservoirBuffer,
};
use crate::error::{Error, Result};
use crate::eval::{
    forgetting, general_probes, kv_pairs, kv_probe, kv_prompt, kv_response, plasticity,
    probe_score, Probe,
};
use crate::model::{
    trainable_fraction, BoundAdapter, BoundParams, LoraAdapter, ModelConfig, Params,
};
use crate::objective::{
    combined_loss, mean_context_kl, BaseLogitCache, LossBreakdown, ObjectiveConfig,
};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Probe construction seed, shared by every run so before/after scores are
/// comparable across cells.
pub const PROBE_SEED: u64 = 2026;

/// Replay examples are drawn from a fixed reservoir pool so the same windows
/// recur across the run (keeps the base-logit cache effective).
pub const REPLAY_POOL_CAPACITY: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// The desk model every default run uses.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab: crate::data::VOCAB_SIZE,
        d_model: 128,
        layers: 2,
        heads: 4,
        d_ff: 256,
        window: 24,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub beta: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub steps: usize,
    pub seed: u64,
    pub kl_on_replay: bool,
    pub precision: Precision,
    pub rank: usize,
    pub alpha: f64,
    pub lora_dropout: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            beta: 0.0,
            rho: 0.0,
            lr: 1e-3,
            batch: 8,
            window: 24,
            steps: 240,
            seed: 0,
            kl_on_replay: false,
            precision: Precision::F32,
            rank: 4,
            alpha: 8.0,
            lora_dropout: 0.05,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta {}", self.beta)));
        }
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho {}", self.rho)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr {}", self.lr)));
        }
        if self.batch == 0 || self.steps == 0 || self.rank == 0 {
            return Err(Error::InvalidArgument(
                "batch, steps, and rank must be positive".into(),
            ));
        }
        if self.window < 2 || self.window > config.window {
            return Err(Error::InvalidArgument(format!(
                "window {} outside 2..={}",
                self.window, config.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: Params<f32>,
    pub initial_holdout_ppl: f64,
    pub holdout_ppl: f64,
    pub losses: Vec<f64>,
}

/// Next-token pretraining of all base weights on packed corpus windows.
/// Deterministic per seed. The last ~5% of windows are held out.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[u32],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if steps == 0 || batch == 0 || !(lr > 0.0) {
        return Err(Error::InvalidArgument(
            "pretrain needs positive steps, batch, and lr".into(),
        ));
    }
    let windows = crate::data::pack_corpus(corpus, config.window + 1)?;
    let holdout_n = (windows.len() / 20).max(batch.min(windows.len() / 2));
    if windows.len() < holdout_n + batch {
        return Err(Error::InvalidArgument(format!(
            "corpus too small: {} windows for batch {batch}",
            windows.len()
        )));
    }
    let (train, holdout) = windows.split_at(windows.len() - holdout_n);
    let holdout_seqs: Vec<Vec<u32>> = holdout.iter().map(|w| w.tokens.clone()).collect();

    let mut params = Params::<f32>::init(config, &mut stream(seed, "pretrain-init"))?;
    let initial_holdout_ppl =
        crate::eval::holdout_perplexity(&params, None, &holdout_seqs)?;

    let names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let shapes: Vec<Vec<usize>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamWState::<f32>::new(
        AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        &shape_refs,
    )?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = stream(seed, "pretrain-order");
    let mut cursor = order.len(); // forces a shuffle on the first step
    let mut losses = Vec::with_capacity(steps);
    let mut fwd_rng = stream(seed, "pretrain-fwd");
    for _ in 0..steps {
        let mut items = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor >= order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            items.push(Item::Replay(train[order[cursor]].clone()));
            cursor += 1;
        }
        let b = build_batch(&items, config.window)?;
        let mut tape: Tape<f32> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, true)?;
        let logits = crate::model::forward(
            &mut tape,
            &bound,
            None,
            config,
            &b.tokens,
            b.batch,
            b.seq,
            false,
            &mut fwd_rng,
        )?;
        let loss = tape.masked_cross_entropy(logits, &b.targets, &b.mask)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!(
                "pretrain loss became {loss_val} at step {}",
                losses.len()
            )));
        }
        losses.push(loss_val);
        let grads = tape.backward(loss)?;
        let grad_tensors: Vec<_> = bound.named.iter().map(|(_, v)| grads.grad(*v)).collect();
        let mut tensors = params.named_tensors_mut();
        let mut refs: Vec<&mut crate::Tensor<f32>> =
            tensors.iter_mut().map(|(_, t)| &mut **t).collect();
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        opt.step(&mut refs, &grad_tensors, &name_refs)
            .map_err(|e| Error::Diverged(format!("pretrain optimizer: {e}")))?;
    }

    let holdout_ppl = crate::eval::holdout_perplexity(&params, None, &holdout_seqs)?;
    Ok(PretrainOutcome {
        params,
        initial_holdout_ppl,
        holdout_ppl,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub probe_names: Vec<String>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// Mean drop over the general probes (all but the last entry).
    pub forgetting: f64,
    /// Gain on the fine-tune probe (the last entry).
    pub plasticity: f64,
    /// Mean KL(adapted || base) per token on held-out replay windows.
    pub holdout_kl: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<E: Scalar> {
    pub adapter: LoraAdapter<E>,
    pub metrics: MetricsReport,
    pub ledger: FlopsLedger,
    pub losses: Vec<LossBreakdown>,
}

/// The probes every run scores: four general skills plus the kv target task.
pub fn desk_probes(n_examples: usize) -> (Vec<Probe>, Probe) {
    let general = general_probes(n_examples, PROBE_SEED);
    let pairs = kv_pairs(n_examples, PROBE_SEED.wrapping_add(10));
    (general, kv_probe(&pairs))
}

/// Training pairs for the kv task, excluding any pair the probe uses.
pub fn desk_sft_dataset(n: usize, probe_examples: usize) -> Vec<Example> {
    let probe: std::collections::HashSet<(String, String)> =
        kv_pairs(probe_examples, PROBE_SEED.wrapping_add(10))
            .into_iter()
            .collect();
    let mut out = Vec::with_capacity(n);
    let mut rng = stream(PROBE_SEED.wrapping_add(20), "sft-pairs");
    let mut seen = std::collections::HashSet::new();
    while out.len() < n {
        let k = *crate::eval::WORDS.choose(&mut rng).unwrap();
        let v = *crate::eval::WORDS.choose(&mut rng).unwrap();
        let pair = (k.to_string(), v.to_string());
        if probe.contains(&pair) || !seen.insert(pair) {
            continue;
        }
        out.push(Example::sft(
            crate::data::tokenize(kv_prompt(k, v).as_bytes()),
            crate::data::tokenize(kv_response(k, v).as_bytes()),
            "kv",
        ));
    }
    out
}

fn score_all<E: Scalar>(
    params: &Params<E>,
    adapter: Option<&LoraAdapter<E>>,
    general: &[Probe],
    target: &Probe,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(general.len() + 1);
    for p in general {
        scores.push(probe_score(params, adapter, p)?);
    }
    scores.push(probe_score(params, adapter, target)?);
    Ok(scores)
}

/// Freeze the base, train the adapter over the replay-interleaved stream,
/// and evaluate before and after.
///
/// `replay_windows` must be packed to `spec.window + 1` tokens.
pub fn finetune<E: Scalar>(
    base: &Params<E>,
    spec: &TrainSpec,
    sft: &[Example],
    replay_windows: &[CorpusWindow],
    probe_examples: usize,
) -> Result<FinetuneOutcome<E>> {
    let config = &base.config;
    spec.validate(config)?;
    if sft.is_empty() {
        return Err(Error::InvalidArgument("empty sft dataset".into()));
    }
    for ex in sft {
        ex.validate(spec.window + 1)?;
    }
    if spec.rho > 0.0 && replay_windows.is_empty() {
        return Err(Error::InvalidArgument(
            "replay requested but the replay corpus is empty".into(),
        ));
    }

    let (general, target) = desk_probes(probe_examples);
    let before = score_all(base, None, &general, &target)?;

    // fixed replay pool, then per-slot draws from it
    let mut pool = ReservoirBuffer::new(REPLAY_POOL_CAPACITY)?;
    let mut pool_rng = stream(spec.seed, "replay-pool");
    for w in replay_windows {
        pool.insert(w.clone(), &mut pool_rng);
    }

    let n_sft = spec.steps * spec.batch;
    let sched = schedule(n_sft, spec.rho, spec.seed)?;

    let mut sft_order: Vec<usize> = (0..sft.len()).collect();
    let mut sft_rng = stream(spec.seed, "sft-order");
    let mut sft_cursor = sft_order.len();
    let mut draw_rng = stream(spec.seed, "replay-draw");
    let mut items = Vec::with_capacity(sched.order.len());
    for slot in &sched.order {
        match slot {
            crate::data::Source::Sft => {
                if sft_cursor >= sft_order.len() {
                    sft_order.shuffle(&mut sft_rng);
                    sft_cursor = 0;
                }
                items.push(Item::Sft(sft[sft_order[sft_cursor]].clone()));
                sft_cursor += 1;
            }
            crate::data::Source::Replay => {
                let idx = draw_rng.gen_range(0..pool.len());
                items.push(Item::Replay(pool.items()[idx].clone()));
            }
        }
    }

    let mut adapter = LoraAdapter::<E>::init(
        config,
        spec.rank,
        spec.alpha,
        spec.lora_dropout,
        &mut stream(spec.seed, "adapter-init"),
    )?;
    let shapes: Vec<Vec<usize>> = adapter
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let names: Vec<String> = adapter
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamWState::<E>::new(
        AdamWConfig {
            lr: spec.lr,
            ..AdamWConfig::default()
        },
        &shape_refs,
    )?;

    let obj = ObjectiveConfig {
        beta: spec.beta,
        kl_on_replay: spec.kl_on_replay,
    };
    let mut cache = BaseLogitCache::new();
    let counter = Arc::new(AtomicU64::new(0));
    let mut fwd_rng = stream(spec.seed, "finetune-fwd");
    let mut losses = Vec::new();
    let mut optimizer_steps = 0usize;
    for chunk in items.chunks_exact(spec.batch) {
        let b: Batch = build_batch(chunk, spec.window)?;
        let mut tape: Tape<E> = Tape::with_counter(counter.clone());
        let bound = BoundParams::bind(&mut tape, base, false)?;
        let bound_adapter = BoundAdapter::bind(&mut tape, &adapter, true)?;
        let (root, breakdown) = combined_loss(
            &mut tape,
            &bound,
            &bound_adapter,
            config,
            &b,
            &obj,
            &mut cache,
            true,
            &mut fwd_rng,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged(format!(
                "finetune loss became {} at step {optimizer_steps}",
                breakdown.total
            )));
        }
        losses.push(breakdown);
        let grads = tape.backward(root)?;
        let grad_tensors: Vec<_> = bound_adapter
            .named
            .iter()
            .map(|(_, v)| grads.grad(*v))
            .collect();
        let mut tensors = adapter.named_tensors_mut();
        let mut refs: Vec<&mut crate::Tensor<E>> =
            tensors.iter_mut().map(|(_, t)| &mut **t).collect();
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        opt.step(&mut refs, &grad_tensors, &name_refs)
            .map_err(|e| Error::Diverged(format!("finetune optimizer: {e}")))?;
        optimizer_steps += 1;
    }

    let after = score_all(base, Some(&adapter), &general, &target)?;
    let f = forgetting(&before[..general.len()], &after[..general.len()])?;
    let p = plasticity(before[general.len()], after[general.len()]);

    // held-out drift: fixed windows, shared across every cell
    let holdout_kl = {
        let mut hk_rng = stream(PROBE_SEED, "kl-holdout");
        let n_hold = replay_windows.len().min(16);
        let mut contexts = Vec::with_capacity(n_hold);
        for _ in 0..n_hold {
            let w = &replay_windows[hk_rng.gen_range(0..replay_windows.len())];
            contexts.push(w.tokens.clone());
        }
        if contexts.is_empty() {
            0.0
        } else {
            let base64 = base.cast::<f64>();
            let merged = base64.merge(&adapter.cast::<f64>())?;
            mean_context_kl(&base64, &merged, &contexts)?
        }
    };

    let mut probe_names: Vec<String> = general.iter().map(|p| p.name.clone()).collect();
    probe_names.push(target.name.clone());
    let metrics = MetricsReport {
        probe_names,
        before,
        after,
        forgetting: f,
        plasticity: p,
        holdout_kl,
    };
    let ledger = FlopsLedger::new(
        config,
        spec.batch,
        spec.window,
        optimizer_steps,
        spec.rho,
        trainable_fraction(base, &adapter),
        counter.load(Ordering::Relaxed),
    )?;
    Ok(FinetuneOutcome {
        adapter,
        metrics,
        ledger,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainspec_defaults_and_validation() {
        let spec = TrainSpec::default();
        assert_eq!(spec.lr, 1e-3);
        assert_eq!(spec.batch, 8);
        assert!(spec.validate(&desk_model()).is_ok());
        let bad = TrainSpec {
            beta: -1.0,
            ..spec
        };
        assert!(bad.validate(&desk_model()).is_err());
        let wide = TrainSpec {
            window: 999,
            ..spec
        };
        assert!(wide.validate(&desk_model()).is_err());
    }

    #[test]
    fn sft_dataset_is_disjoint_from_probe_pairs() {
        let probe_pairs: std::collections::HashSet<(String, String)> =
            kv_pairs(24, PROBE_SEED.wrapping_add(10)).into_iter().collect();
        let data = desk_sft_dataset(96, 24);
        assert_eq!(data.len(), 96);
        for ex in &data {
            let p = String::from_utf8(crate::data::detokenize(&ex.prompt).unwrap())
                .unwrap();
            let (k, v) = p.split_once(':').unwrap();
            assert!(!probe_pairs.contains(&(k.to_string(), v.to_string())));
        }
    }
}
