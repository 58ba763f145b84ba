//! Measured-counter contracts: instrumented multiply-adds against the
//! modeled forward cost and the LoRA training band.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use tunelab_core::cost::flops_forward;
use tunelab_core::data::{build_batch, CorpusWindow, Example, Item, VOCAB_SIZE};
use tunelab_core::model::{BoundAdapter, BoundParams, LoraAdapter, ModelConfig, Params};
use tunelab_core::objective::{combined_loss, BaseLogitCache, ObjectiveConfig};
use tunelab_core::rng::stream;
use tunelab_core::Tape;

/// The configuration the experiment grid runs at.
fn desk() -> ModelConfig {
    ModelConfig {
        vocab: VOCAB_SIZE,
        d_model: 128,
        layers: 2,
        heads: 4,
        d_ff: 256,
        window: 24,
    }
}

fn desk_batch(rows: usize, seq: usize, seed: u64) -> tunelab_core::data::Batch {
    use rand::Rng;
    let mut rng = stream(seed, "cost-batch");
    let items: Vec<Item> = (0..rows)
        .map(|r| {
            if r % 2 == 0 {
                let prompt: Vec<u32> = (0..6).map(|_| rng.gen_range(97..123)).collect();
                let response: Vec<u32> = (0..8).map(|_| rng.gen_range(97..123)).collect();
                Item::Sft(Example::sft(prompt, response, "t"))
            } else {
                Item::Replay(CorpusWindow {
                    tokens: (0..seq + 1).map(|_| rng.gen_range(0..256)).collect(),
                })
            }
        })
        .collect();
    build_batch(&items, seq).unwrap()
}

#[test]
fn forward_only_measured_matches_modeled_within_20_percent() {
    let cfg = desk();
    let (b, w) = (8, cfg.window);
    let params = Params::<f32>::init(&cfg, &mut stream(1, "init")).unwrap();
    let counter = Arc::new(AtomicU64::new(0));
    let mut tape: Tape<f32> = Tape::with_counter(counter.clone());
    let bound = BoundParams::bind(&mut tape, &params, false).unwrap();
    let tokens: Vec<u32> = (0..b * w).map(|i| (i % 256) as u32).collect();
    let mut rng = stream(2, "fwd");
    tunelab_core::model::forward(&mut tape, &bound, None, &cfg, &tokens, b, w, false, &mut rng)
        .unwrap();
    let measured = 2.0 * counter.load(Ordering::Relaxed) as f64;
    let modeled = flops_forward(&cfg, b, w).unwrap();
    let ratio = measured / modeled;
    assert!(
        (ratio - 1.0).abs() < 0.2,
        "measured {measured} vs modeled {modeled} (ratio {ratio})"
    );
}

/// One adapter training step (forward + backward, KL off) measured against
/// the per-step band [F_fwd, 2 F_fwd].
#[test]
fn lora_step_sits_inside_the_cost_band() {
    let cfg = desk();
    let (b, w) = (8, cfg.window);
    let params = Params::<f32>::init(&cfg, &mut stream(3, "init")).unwrap();
    let adapter = LoraAdapter::<f32>::init(&cfg, 4, 8.0, 0.0, &mut stream(4, "a")).unwrap();
    let batch = desk_batch(b, w, 5);
    let modeled = flops_forward(&cfg, b, w).unwrap();

    for (beta, label) in [(0.0, "plain"), (0.01, "kl-warm")] {
        let mut cache = BaseLogitCache::new();
        let obj = ObjectiveConfig {
            beta,
            kl_on_replay: true,
        };
        let mut per_step = Vec::new();
        for step in 0..3 {
            let counter = Arc::new(AtomicU64::new(0));
            let mut tape: Tape<f32> = Tape::with_counter(counter.clone());
            let bound = BoundParams::bind(&mut tape, &params, false).unwrap();
            let bound_adapter = BoundAdapter::bind(&mut tape, &adapter, true).unwrap();
            let mut rng = stream(step, "fwd");
            let (root, _) = combined_loss(
                &mut tape,
                &bound,
                &bound_adapter,
                &cfg,
                &batch,
                &obj,
                &mut cache,
                true,
                &mut rng,
            )
            .unwrap();
            tape.backward(root).unwrap();
            per_step.push(2.0 * counter.load(Ordering::Relaxed) as f64);
        }
        // the first KL step pays the base forward for the cache; steady
        // state is what the run-level bound sees
        let steady = per_step[2];
        let ratio = steady / modeled;
        eprintln!("{label}: per-step ratio to F_fwd = {ratio:.4}");
        assert!(
            (1.0..=2.0).contains(&ratio),
            "{label}: steady step {steady} vs F_fwd {modeled} (ratio {ratio})"
        );
        if beta > 0.0 {
            assert!(per_step[0] > per_step[2], "cold step should cost more");
            assert_eq!(per_step[1], per_step[2], "warm steps should match");
        }
    }
}
