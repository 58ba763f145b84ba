//! Probe tasks, greedy decoding, token-level F1, and the
//! forgetting/plasticity bookkeeping.
//!
//! General-skill probes mirror lines the pretraining corpus contains
//! (`copy:`, `reverse:`, `add:`, `upper:`), rendered as plain completions
//! that stop at a newline. The fine-tuning probe uses the chat layout the
//! SFT rows use: BOS before the prompt, EOS ends the response.

use crate::data::{tokenize, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{infer_logits, LoraAdapter, Params};
use crate::rng::stream;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::Rng;

/// Closed vocabulary for the synthetic tasks; small enough to learn at desk
/// scale, varied enough that probes are not a single memorized string.
pub const WORDS: &[&str] = &[
    "ant", "arch", "barn", "bead", "bell", "bird", "boat", "book", "cake", "cart",
    "cave", "clay", "coal", "coin", "cord", "corn", "crow", "dawn", "dew", "door",
    "drum", "fern", "fig", "fish", "flax", "foam", "fog", "fork", "gate", "gem",
    "hill", "iron", "ivy", "jar", "kite", "lamp", "leaf", "lime", "loom", "mast",
    "moss", "nest", "oak", "opal", "pear", "pond", "reed", "sail", "silk", "wren",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStyle {
    /// Feed the prompt bytes raw; stop on the given byte.
    Completion { stop: u8 },
    /// Feed BOS then the prompt; stop on EOS.
    Chat,
}

#[derive(Debug, Clone)]
pub struct ProbeExample {
    pub prompt: Vec<u32>,
    pub reference: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub style: DecodeStyle,
    pub examples: Vec<ProbeExample>,
}

fn completion_probe(
    name: &str,
    n: usize,
    seed: u64,
    mut render: impl FnMut(&mut crate::rng::Stream) -> (String, String),
) -> Probe {
    let mut rng = stream(seed, name);
    let examples = (0..n)
        .map(|_| {
            let (prompt, reference) = render(&mut rng);
            ProbeExample {
                prompt: tokenize(prompt.as_bytes()),
                reference: tokenize(reference.as_bytes()),
            }
        })
        .collect();
    Probe {
        name: name.to_string(),
        style: DecodeStyle::Completion { stop: b'\n' },
        examples,
    }
}

pub fn copy_probe(n: usize, seed: u64) -> Probe {
    completion_probe("copy", n, seed, |rng| {
        let w = WORDS.choose(rng).unwrap();
        (format!("copy: {w} => "), (*w).to_string())
    })
}

pub fn reverse_probe(n: usize, seed: u64) -> Probe {
    completion_probe("reverse", n, seed, |rng| {
        let w = WORDS.choose(rng).unwrap();
        let r: String = w.chars().rev().collect();
        (format!("reverse: {w} => "), r)
    })
}

pub fn addition_probe(n: usize, seed: u64) -> Probe {
    completion_probe("add", n, seed, |rng| {
        let a = rng.gen_range(0..10u32);
        let b = rng.gen_range(0..10u32);
        (format!("add: {a}+{b} => "), (a + b).to_string())
    })
}

pub fn uppercase_probe(n: usize, seed: u64) -> Probe {
    completion_probe("upper", n, seed, |rng| {
        let w = WORDS.choose(rng).unwrap();
        (format!("upper: {w} => "), w.to_uppercase())
    })
}

/// The four general-skill probes the forgetting score averages over.
pub fn general_probes(n: usize, seed: u64) -> Vec<Probe> {
    vec![
        copy_probe(n, seed),
        reverse_probe(n, seed.wrapping_add(1)),
        addition_probe(n, seed.wrapping_add(2)),
        uppercase_probe(n, seed.wrapping_add(3)),
    ]
}

/// Deterministic key/value pairs behind the fine-tuning task.
pub fn kv_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = stream(seed, "kv-pairs");
    (0..n)
        .map(|_| {
            let k = WORDS.choose(&mut rng).unwrap();
            let v = WORDS.choose(&mut rng).unwrap();
            ((*k).to_string(), (*v).to_string())
        })
        .collect()
}

pub fn kv_prompt(key: &str, value: &str) -> String {
    format!("{key}:{value}")
}

pub fn kv_response(key: &str, value: &str) -> String {
    format!("{key} is {value}.")
}

/// Probe over the fine-tuning task itself, chat layout.
pub fn kv_probe(pairs: &[(String, String)]) -> Probe {
    Probe {
        name: "kv".to_string(),
        style: DecodeStyle::Chat,
        examples: pairs
            .iter()
            .map(|(k, v)| ProbeExample {
                prompt: tokenize(kv_prompt(k, v).as_bytes()),
                reference: tokenize(kv_response(k, v).as_bytes()),
            })
            .collect(),
    }
}

/// Rendered task lines for corpus building; one task instance per line, the
/// same formats the completion probes use.
pub fn task_corpus_lines(n: usize, seed: u64) -> String {
    let mut rng = stream(seed, "task-corpus");
    let mut out = String::new();
    for _ in 0..n {
        let w = WORDS.choose(&mut rng).unwrap();
        match rng.gen_range(0..4u32) {
            0 => out.push_str(&format!("copy: {w} => {w}\n")),
            1 => {
                let r: String = w.chars().rev().collect();
                out.push_str(&format!("reverse: {w} => {r}\n"));
            }
            2 => {
                let a = rng.gen_range(0..10u32);
                let b = rng.gen_range(0..10u32);
                out.push_str(&format!("add: {a}+{b} => {}\n", a + b));
            }
            _ => out.push_str(&format!("upper: {w} => {}\n", w.to_uppercase())),
        }
    }
    out
}

/// Multiset token F1 between a prediction and a reference.
pub fn token_f1(pred: &[u32], reference: &[u32]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for &t in reference {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for &t in pred {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Greedy argmax decoding; ties break toward the lower token id. The stop
/// token, when reached, is not included in the output.
pub fn greedy_decode<E: Scalar>(
    params: &Params<E>,
    adapter: Option<&LoraAdapter<E>>,
    prompt: &[u32],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty decode prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if tokens.len() > params.config.window {
            break;
        }
        let seq = tokens.len();
        let logits = infer_logits(params, adapter, &tokens, 1, seq)?;
        let v = logits.shape()[1];
        let last = &logits.data()[(seq - 1) * v..seq * v];
        let mut best = 0usize;
        for (i, &x) in last.iter().enumerate() {
            if x.as_f64() > last[best].as_f64() {
                best = i;
            }
        }
        let tok = best as u32;
        if Some(tok) == stop {
            break;
        }
        out.push(tok);
        tokens.push(tok);
    }
    Ok(out)
}

/// Mean token F1 over the probe's examples, scaled to 0..100. The decode
/// budget is the reference length plus slack, capped by the model window.
pub fn probe_score<E: Scalar>(
    params: &Params<E>,
    adapter: Option<&LoraAdapter<E>>,
    probe: &Probe,
) -> Result<f64> {
    if probe.examples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "probe {} has no examples",
            probe.name
        )));
    }
    let mut total = 0.0;
    for ex in &probe.examples {
        let (prompt, stop) = match probe.style {
            DecodeStyle::Completion { stop } => (ex.prompt.clone(), stop as u32),
            DecodeStyle::Chat => {
                let mut p = vec![BOS];
                p.extend(&ex.prompt);
                (p, EOS)
            }
        };
        let budget = ex.reference.len() + 4;
        let pred = greedy_decode(params, adapter, &prompt, budget, Some(stop))?;
        total += token_f1(&pred, &ex.reference);
    }
    Ok(100.0 * total / probe.examples.len() as f64)
}

/// Mean drop across general probes; positive means skills were lost.
pub fn forgetting(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.is_empty() || before.len() != after.len() {
        return Err(Error::InvalidArgument(format!(
            "forgetting needs matched non-empty score lists, got {} and {}",
            before.len(),
            after.len()
        )));
    }
    Ok(before
        .iter()
        .zip(after)
        .map(|(b, a)| b - a)
        .sum::<f64>()
        / before.len() as f64)
}

/// Gain on the fine-tuning task; positive means the model learned it.
pub fn plasticity(before: f64, after: f64) -> f64 {
    after - before
}

/// exp of the mean next-token cross entropy over full windows.
pub fn holdout_perplexity<E: Scalar>(
    params: &Params<E>,
    adapter: Option<&LoraAdapter<E>>,
    windows: &[Vec<u32>],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no holdout windows".into()));
    }
    let len = windows[0].len();
    if len < 2 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::InvalidArgument(
            "holdout windows must share a length of at least 2".into(),
        ));
    }
    let seq = len - 1;
    let tokens: Vec<u32> = windows.iter().flat_map(|w| w[..seq].to_vec()).collect();
    let targets: Vec<u32> = windows.iter().flat_map(|w| w[1..].to_vec()).collect();
    let logits = infer_logits(params, adapter, &tokens, windows.len(), seq)?;
    let mut tape: crate::tape::Tape<E> = crate::tape::Tape::new();
    let l = tape.constant(logits)?;
    let mask = vec![true; windows.len() * seq];
    let ce = tape.masked_cross_entropy(l, &targets, &mask)?;
    Ok(tape.value(ce).item().as_f64().exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_values() {
        // {a,b} vs {b,c}: overlap 1, P = R = 0.5, F1 = 0.5
        assert_eq!(token_f1(&[0, 1], &[1, 2]), 0.5);
        assert_eq!(token_f1(&[3, 4], &[3, 4]), 1.0);
        assert_eq!(token_f1(&[3, 4], &[5, 6]), 0.0);
        assert_eq!(token_f1(&[], &[]), 1.0);
        assert_eq!(token_f1(&[1], &[]), 0.0);
    }

    #[test]
    fn f1_respects_multiplicity() {
        // pred {7,7} vs ref {7}: overlap 1, P = 0.5, R = 1, F1 = 2/3
        let f = token_f1(&[7, 7], &[7]);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_is_order_invariant() {
        assert_eq!(token_f1(&[1, 2, 3], &[3, 1, 2]), 1.0);
    }

    #[test]
    fn probes_are_deterministic_and_well_formed() {
        let a = reverse_probe(8, 5);
        let b = reverse_probe(8, 5);
        for (x, y) in a.examples.iter().zip(&b.examples) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.reference, y.reference);
        }
        for ex in &a.examples {
            // "reverse: wren => nerw"
            let p = String::from_utf8(crate::data::detokenize(&ex.prompt).unwrap()).unwrap();
            assert!(p.starts_with("reverse: ") && p.ends_with(" => "));
            let w = &p["reverse: ".len()..p.len() - 4];
            let r = String::from_utf8(crate::data::detokenize(&ex.reference).unwrap())
                .unwrap();
            assert_eq!(r, w.chars().rev().collect::<String>());
        }
    }

    #[test]
    fn addition_references_are_sums() {
        for ex in &addition_probe(20, 3).examples {
            let p = String::from_utf8(crate::data::detokenize(&ex.prompt).unwrap()).unwrap();
            let body = p
                .strip_prefix("add: ")
                .and_then(|s| s.strip_suffix(" => "))
                .unwrap();
            let (a, b) = body.split_once('+').unwrap();
            let sum: u32 = a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap();
            let r = String::from_utf8(crate::data::detokenize(&ex.reference).unwrap())
                .unwrap();
            assert_eq!(r, sum.to_string());
        }
    }

    #[test]
    fn forgetting_and_plasticity_are_antisymmetric() {
        let before = vec![90.0, 80.0, 70.0];
        let after = vec![85.0, 70.0, 75.0];
        let f = forgetting(&before, &after).unwrap();
        let g = forgetting(&after, &before).unwrap();
        assert!((f + g).abs() < 1e-12);
        assert!((f - (5.0 + 10.0 - 5.0) / 3.0).abs() < 1e-12);
        assert_eq!(plasticity(10.0, 35.0), 25.0);
        assert_eq!(plasticity(35.0, 10.0), -25.0);
    }

    #[test]
    fn forgetting_rejects_mismatched_lists() {
        assert!(forgetting(&[1.0], &[]).is_err());
        assert!(forgetting(&[], &[]).is_err());
    }

    #[test]
    fn task_corpus_lines_are_valid_task_instances() {
        let text = task_corpus_lines(50, 4);
        for line in text.lines() {
            let (head, rest) = line.split_once(": ").unwrap();
            let (input, output) = rest.split_once(" => ").unwrap();
            match head {
                "copy" => assert_eq!(input, output),
                "reverse" => {
                    assert_eq!(output, input.chars().rev().collect::<String>())
                }
                "add" => {
                    let (a, b) = input.split_once('+').unwrap();
                    let sum = a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap();
                    assert_eq!(output, sum.to_string());
                }
                "upper" => assert_eq!(output, input.to_uppercase()),
                other => panic!("unknown task head {other}"),
            }
        }
    }
}
