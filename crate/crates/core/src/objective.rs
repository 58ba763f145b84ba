//! The fine-tuning objective: masked cross entropy plus a beta-weighted KL
//! anchor to the frozen base policy, and the Fisher diagnostics that predict
//! small-drift KL from a quadratic form.

use crate::data::{Batch, Source};
use crate::error::{Error, Result};
use crate::model::{forward, BoundAdapter, BoundParams, LoraAdapter, ModelConfig, Params};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::{log_softmax_at, softmax_row, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    /// Weight of the KL anchor; 0 disables the term entirely.
    pub beta: f64,
    /// Apply the anchor on replay rows too, not just sft rows.
    pub kl_on_replay: bool,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Scalar components of one training step, for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross entropy over every masked position, both sources.
    pub ce: f64,
    /// Mean cross entropy restricted to sft rows (0 if none in the batch).
    pub sft_ce: f64,
    /// Mean cross entropy restricted to replay rows (0 if none).
    pub replay_ce: f64,
    /// KL to the base: token KLs summed over each row's anchored positions,
    /// averaged over the anchored rows.
    pub kl: f64,
    pub sft_tokens: usize,
    pub replay_tokens: usize,
}

/// Base logits memoized per input row. Exact, because the base is frozen:
/// the same input row always yields the same logits.
#[derive(Debug, Default)]
pub struct BaseLogitCache<E: Scalar> {
    rows: HashMap<u64, Vec<E>>,
    pub hits: usize,
    pub misses: usize,
}

impl<E: Scalar> BaseLogitCache<E> {
    pub fn new() -> Self {
        Self {
            rows: HashMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn per_source_ce<E: Scalar>(
    logits: &Tensor<E>,
    batch: &Batch,
    want: Source,
) -> (f64, usize) {
    let v = logits.shape()[1];
    let xs = logits.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..batch.batch {
        if batch.sources[r] != want {
            continue;
        }
        for t in 0..batch.seq {
            let i = r * batch.seq + t;
            if !batch.mask[i] {
                continue;
            }
            total -= log_softmax_at(&xs[i * v..(i + 1) * v], batch.targets[i] as usize);
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (total / count as f64, count)
    }
}

/// Build the loss graph for one batch. The adapter forward runs on `tape`
/// (bound by the caller); the base side of the KL term comes from the cache,
/// with a single extra no-grad base forward on a miss.
///
/// Returns the loss root and its scalar breakdown.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<E: Scalar>(
    tape: &mut Tape<E>,
    bound_base: &BoundParams,
    bound_adapter: &BoundAdapter,
    config: &ModelConfig,
    batch: &Batch,
    obj: &ObjectiveConfig,
    cache: &mut BaseLogitCache<E>,
    train_mode: bool,
    rng: &mut Stream,
) -> Result<(Var, LossBreakdown)> {
    obj.validate()?;
    let logits = forward(
        tape,
        bound_base,
        Some(bound_adapter),
        config,
        &batch.tokens,
        batch.batch,
        batch.seq,
        train_mode,
        rng,
    )?;
    let ce = tape.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
    let ce_val = tape.value(ce).item().as_f64();

    let (sft_ce, sft_tokens) = per_source_ce(tape.value(logits), batch, Source::Sft);
    let (replay_ce, replay_tokens) =
        per_source_ce(tape.value(logits), batch, Source::Replay);

    let mut kl_mask = vec![false; batch.batch * batch.seq];
    let mut row_anchored = vec![false; batch.batch];
    let mut anchored = 0usize;
    let mut anchored_rows = 0usize;
    if obj.beta > 0.0 {
        for r in 0..batch.batch {
            if batch.sources[r] == Source::Replay && !obj.kl_on_replay {
                continue;
            }
            let mut any = false;
            for t in 0..batch.seq {
                let i = r * batch.seq + t;
                kl_mask[i] = batch.mask[i];
                anchored += kl_mask[i] as usize;
                any |= kl_mask[i];
            }
            row_anchored[r] = any;
            anchored_rows += any as usize;
        }
    }

    if anchored == 0 {
        let breakdown = LossBreakdown {
            total: ce_val,
            ce: ce_val,
            sft_ce,
            replay_ce,
            kl: 0.0,
            sft_tokens,
            replay_tokens,
        };
        return Ok((ce, breakdown));
    }

    let base_logits = base_logits_for(tape, bound_base, config, batch, &row_anchored, cache)?;
    // Sequence-level KL: masked_kl averages per anchored position; rescale to
    // a sum over each row's anchored positions, averaged over anchored rows.
    let per_position = tape.masked_kl(logits, base_logits, &kl_mask)?;
    let kl = tape.scale(
        per_position,
        E::of_f64(anchored as f64 / anchored_rows as f64),
    )?;
    let kl_val = tape.value(kl).item().as_f64();
    let kl_scaled = tape.scale(kl, E::of_f64(obj.beta))?;
    let total = tape.add(ce, kl_scaled)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item().as_f64(),
        ce: ce_val,
        sft_ce,
        replay_ce,
        kl: kl_val,
        sft_tokens,
        replay_tokens,
    };
    Ok((total, breakdown))
}

/// Base logits for the batch, `[B*seq, V]`, as a tape constant. Rows are
/// served from the cache; a miss on any row the anchor covers triggers one
/// base forward over the whole batch (counted in the tape's MAC ledger)
/// whose rows are then cached. Rows outside the anchor never force a
/// forward; their logits are only placeholders under a false mask.
fn base_logits_for<E: Scalar>(
    tape: &mut Tape<E>,
    bound_base: &BoundParams,
    config: &ModelConfig,
    batch: &Batch,
    row_anchored: &[bool],
    cache: &mut BaseLogitCache<E>,
) -> Result<Var> {
    let all_cached = batch
        .keys
        .iter()
        .zip(row_anchored)
        .all(|(k, &a)| !a || cache.rows.contains_key(k));
    if !all_cached {
        cache.misses += 1;
        let mut rng = stream(0, "base-cache");
        let v = forward(
            tape,
            bound_base,
            None,
            config,
            &batch.tokens,
            batch.batch,
            batch.seq,
            false,
            &mut rng,
        )?;
        let logits = tape.value(v);
        let row_len = batch.seq * logits.shape()[1];
        for (r, key) in batch.keys.iter().enumerate() {
            cache
                .rows
                .entry(*key)
                .or_insert_with(|| logits.data()[r * row_len..(r + 1) * row_len].to_vec());
        }
        return Ok(v);
    }
    cache.hits += 1;
    let vocab = config.vocab;
    let zero_row = vec![E::of_f64(0.0); batch.seq * vocab];
    let mut data = Vec::with_capacity(batch.batch * batch.seq * vocab);
    for (key, &a) in batch.keys.iter().zip(row_anchored) {
        match cache.rows.get(key) {
            Some(row) => data.extend_from_slice(row),
            None => {
                debug_assert!(!a, "anchored row missed the cache");
                data.extend_from_slice(&zero_row);
            }
        }
    }
    let t = Tensor::new(vec![batch.batch * batch.seq, vocab], data)?;
    tape.constant(t)
}

/// Per-token KL of `adapted` against `base` over full windows, mean across
/// every position of every context. Contexts must share a common length.
pub fn mean_context_kl(
    params: &Params<f64>,
    adapted: &Params<f64>,
    contexts: &[Vec<u32>],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no contexts".into()));
    }
    let len = contexts[0].len();
    if len < 2 || contexts.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidArgument(
            "contexts must share a length of at least 2".into(),
        ));
    }
    let seq = len - 1;
    let tokens: Vec<u32> = contexts.iter().flat_map(|c| c[..seq].to_vec()).collect();
    let base = crate::model::infer_logits(params, None, &tokens, contexts.len(), seq)?;
    let new = crate::model::infer_logits(adapted, None, &tokens, contexts.len(), seq)?;
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(new)?;
    let b = tape.constant(base)?;
    let mask = vec![true; contexts.len() * seq];
    let kl = tape.masked_kl(a, b, &mask)?;
    Ok(tape.value(kl).item())
}

/// Flattened per-sample scores feeding the Fisher estimators: mean of the
/// squared coordinates (diagonal) or of a squared projection (directional).
fn mc_mean_of_squares(samples: &[f64]) -> f64 {
    samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64
}

/// Draw `n` Monte Carlo score samples: pick a context and a position, sample
/// the next token from the base policy itself, and hand the per-matrix
/// gradients of that token's log probability to `consume`.
fn sample_score_grads(
    params: &Params<f64>,
    contexts: &[Vec<u32>],
    n_samples: usize,
    seed: u64,
    mut consume: impl FnMut(&[Tensor<f64>]) -> Result<()>,
) -> Result<()> {
    if contexts.is_empty() || n_samples == 0 {
        return Err(Error::InvalidArgument(
            "fisher estimation needs contexts and a positive sample count".into(),
        ));
    }
    let mut rng = stream(seed, "fisher-mc");
    let names = grad_matrix_names(&params.config);
    for _ in 0..n_samples {
        let ctx = &contexts[rng.gen_range(0..contexts.len())];
        if ctx.len() < 2 {
            return Err(Error::InvalidArgument(
                "fisher context needs at least 2 tokens".into(),
            ));
        }
        let seq = ctx.len() - 1;
        let pos = rng.gen_range(0..seq);

        let mut tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, true)?;
        let mut fwd_rng = stream(0, "fisher-fwd");
        let logits = forward(
            &mut tape,
            &bound,
            None,
            &params.config,
            &ctx[..seq],
            1,
            seq,
            false,
            &mut fwd_rng,
        )?;

        // sample y ~ pi_theta(. | prefix) at the chosen position
        let v = params.config.vocab;
        let row = &tape.value(logits).data()[pos * v..(pos + 1) * v];
        let mut probs = vec![0.0f64; v];
        softmax_row(row, &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = v - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                y = i;
                break;
            }
        }

        let mut mask = vec![false; seq];
        mask[pos] = true;
        let mut targets = vec![0u32; seq];
        targets[pos] = y as u32;
        let nll = tape.masked_cross_entropy(logits, &targets, &mask)?;
        let grads = tape.backward(nll)?;
        // grad of log p is minus the NLL grad; squares make the sign moot,
        // negate anyway so consumers see the score itself
        let mats: Vec<Tensor<f64>> = names
            .iter()
            .map(|name| {
                let var = bound
                    .named
                    .iter()
                    .find(|(n, _)| n == name)
                    .expect("adapted matrix name")
                    .1;
                let mut g = grads.grad(var);
                g.scale_assign(-1.0);
                g
            })
            .collect();
        consume(&mats)?;
    }
    Ok(())
}

/// The matrices LoRA adapts, in a fixed order: wk, wv, wo per layer.
pub fn grad_matrix_names(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::with_capacity(3 * config.layers);
    for i in 0..config.layers {
        out.push(format!("layer.{i}.wk"));
        out.push(format!("layer.{i}.wv"));
        out.push(format!("layer.{i}.wo"));
    }
    out
}

/// The adapter's weight-space direction: the scaled delta of each adapted
/// matrix, in `grad_matrix_names` order and in weight storage layout.
pub fn adapted_weight_direction(adapter: &LoraAdapter<f64>) -> Result<Vec<Tensor<f64>>> {
    let s = adapter.scale();
    let mut out = Vec::with_capacity(3 * adapter.layers.len());
    for layer in &adapter.layers {
        for m in [&layer.key, &layer.value, &layer.output] {
            let mut d = m.delta()?.transposed_2d()?;
            d.scale_assign(s);
            out.push(d);
        }
    }
    Ok(out)
}

/// Diagonal empirical Fisher at the base policy over the adapted matrices,
/// estimated by Monte Carlo with `y ~ pi_theta`. Returned tensors follow
/// `grad_matrix_names` order.
pub fn estimate_fisher(
    params: &Params<f64>,
    contexts: &[Vec<u32>],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Tensor<f64>>> {
    let names = grad_matrix_names(&params.config);
    let mut acc: Option<Vec<Tensor<f64>>> = None;
    sample_score_grads(params, contexts, n_samples, seed, |mats| {
        match &mut acc {
            None => {
                acc = Some(
                    mats.iter()
                        .map(|g| {
                            let sq: Vec<f64> =
                                g.data().iter().map(|x| x * x).collect();
                            Tensor::new(g.shape().to_vec(), sq)
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(mats) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv * gv;
                    }
                }
            }
        }
        Ok(())
    })?;
    let mut acc = acc.expect("n_samples > 0");
    for t in &mut acc {
        t.scale_assign(1.0 / n_samples as f64);
    }
    debug_assert_eq!(acc.len(), names.len());
    Ok(acc)
}

/// `E[(phi^T score)^2]`: the exact quadratic form `phi^T F phi` as a Monte
/// Carlo mean, including off-diagonal Fisher mass the diagonal misses.
pub fn directional_fisher(
    params: &Params<f64>,
    direction: &[Tensor<f64>],
    contexts: &[Vec<u32>],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut dots = Vec::with_capacity(n_samples);
    sample_score_grads(params, contexts, n_samples, seed, |mats| {
        if mats.len() != direction.len() {
            return Err(Error::InvalidArgument(format!(
                "direction has {} matrices, gradients have {}",
                direction.len(),
                mats.len()
            )));
        }
        let mut dot = 0.0;
        for (d, g) in direction.iter().zip(mats) {
            if d.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "directional_fisher",
                    lhs: d.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            dot += d
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        dots.push(dot);
        Ok(())
    })?;
    Ok(mc_mean_of_squares(&dots))
}

/// `phi^T F phi` by full enumeration: every context, every position, every
/// vocabulary entry weighted by `pi_theta(y)`. No sampling noise, so the
/// quadratic prediction is deterministic; tractable on hand-sized models.
pub fn directional_fisher_exact(
    params: &Params<f64>,
    direction: &[Tensor<f64>],
    contexts: &[Vec<u32>],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument(
            "fisher enumeration needs contexts".into(),
        ));
    }
    let names = grad_matrix_names(&params.config);
    let v = params.config.vocab;
    let mut total = 0.0;
    let mut positions = 0usize;
    for ctx in contexts {
        if ctx.len() < 2 {
            return Err(Error::InvalidArgument(
                "fisher context needs at least 2 tokens".into(),
            ));
        }
        let seq = ctx.len() - 1;
        for pos in 0..seq {
            let mut tape: Tape<f64> = Tape::new();
            let bound = BoundParams::bind(&mut tape, params, true)?;
            let mut fwd_rng = stream(0, "fisher-fwd");
            let logits = forward(
                &mut tape,
                &bound,
                None,
                &params.config,
                &ctx[..seq],
                1,
                seq,
                false,
                &mut fwd_rng,
            )?;
            let row = tape.value(logits).data()[pos * v..(pos + 1) * v].to_vec();
            let mut probs = vec![0.0f64; v];
            softmax_row(&row, &mut probs);
            let mut mask = vec![false; seq];
            mask[pos] = true;
            for y in 0..v {
                let mut targets = vec![0u32; seq];
                targets[pos] = y as u32;
                let nll = tape.masked_cross_entropy(logits, &targets, &mask)?;
                let grads = tape.backward(nll)?;
                let mut dot = 0.0;
                for (name, d) in names.iter().zip(direction) {
                    let var = bound
                        .named
                        .iter()
                        .find(|(n, _)| n == name)
                        .expect("adapted matrix name")
                        .1;
                    let g = grads.grad(var);
                    // score is minus the NLL gradient; the square is even
                    dot += d
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                total += probs[y] * dot * dot;
            }
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub eps: f64,
    pub kl: f64,
    pub predicted: f64,
    pub ratio: f64,
}

/// Compare measured drift `KL(pi_{theta + eps*phi} || pi_theta)` against the
/// second-order prediction `0.5 * eps^2 * phi^T F phi` along the adapter
/// direction. `eps = 0` reports ratio 1 by convention.
pub fn kl_quadratic_check(
    params: &Params<f64>,
    adapter: &LoraAdapter<f64>,
    contexts: &[Vec<u32>],
    epsilons: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<QuadPoint>> {
    let direction = adapted_weight_direction(adapter)?;
    let quad = directional_fisher(params, &direction, contexts, n_samples, seed)?;
    quad_points(params, adapter, contexts, epsilons, quad)
}

/// `kl_quadratic_check` with the enumerated (noise-free) quadratic form.
pub fn kl_quadratic_check_exact(
    params: &Params<f64>,
    adapter: &LoraAdapter<f64>,
    contexts: &[Vec<u32>],
    epsilons: &[f64],
) -> Result<Vec<QuadPoint>> {
    let direction = adapted_weight_direction(adapter)?;
    let quad = directional_fisher_exact(params, &direction, contexts)?;
    quad_points(params, adapter, contexts, epsilons, quad)
}

fn quad_points(
    params: &Params<f64>,
    adapter: &LoraAdapter<f64>,
    contexts: &[Vec<u32>],
    epsilons: &[f64],
    quad: f64,
) -> Result<Vec<QuadPoint>> {
    if quad <= 0.0 {
        return Err(Error::InvalidArgument(
            "estimated quadratic form is not positive; direction may be zero".into(),
        ));
    }
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps == 0.0 {
            out.push(QuadPoint {
                eps,
                kl: 0.0,
                predicted: 0.0,
                ratio: 1.0,
            });
            continue;
        }
        // scaling alpha scales the merged delta linearly in eps
        let mut scaled = adapter.clone();
        scaled.alpha = adapter.alpha * eps;
        let merged = params.merge(&scaled)?;
        let kl = mean_context_kl(params, &merged, contexts)?;
        let predicted = 0.5 * eps * eps * quad;
        out.push(QuadPoint {
            eps,
            kl,
            predicted,
            ratio: kl / predicted,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_squares_matches_hand_value() {
        assert_eq!(mc_mean_of_squares(&[1.0, -3.0]), 5.0);
    }

    /// Bernoulli logit model: p = sigmoid(z), score dlogp/dz = y - p.
    /// At z = 0 the Fisher is p(1-p) = 0.25.
    #[test]
    fn bernoulli_fisher_closed_form() {
        let n = 100_000;
        let mut rng = stream(11, "bernoulli");
        let p = 0.5f64;
        let mut scores = Vec::with_capacity(n);
        for _ in 0..n {
            let y = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
            scores.push(y - p);
        }
        let est = mc_mean_of_squares(&scores);
        assert!(
            (est - 0.25).abs() / 0.25 < 0.05,
            "estimate {est} outside 5% of 0.25"
        );
    }

    #[test]
    fn objective_config_rejects_negative_beta() {
        assert!(ObjectiveConfig {
            beta: -0.1,
            kl_on_replay: false
        }
        .validate()
        .is_err());
        assert!(ObjectiveConfig {
            beta: 0.0,
            kl_on_replay: true
        }
        .validate()
        .is_ok());
    }
}
