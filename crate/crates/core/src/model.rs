//! Decoder-only micro transformer with LoRA adapters on the key, value, and
//! attention-output projections.
//!
//! Pre-norm blocks, learned absolute positions, SiLU MLP, no biases. Linear
//! weights are stored `[d_in, d_out]` so activations multiply on the left.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub window: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("window", self.window),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<E: Scalar> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub w_up: Tensor<E>,
    pub w_down: Tensor<E>,
    pub g_attn: Tensor<E>,
    pub g_mlp: Tensor<E>,
}

/// Base transformer weights. Frozen during LoRA fine-tuning.
#[derive(Debug, Clone)]
pub struct Params<E: Scalar> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<E>,
    pub pos_embed: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub g_final: Tensor<E>,
    pub w_out: Tensor<E>,
}

impl<E: Scalar> Params<E> {
    pub fn init(config: &ModelConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: Tensor::randn(&[d, d], std, rng),
                wk: Tensor::randn(&[d, d], std, rng),
                wv: Tensor::randn(&[d, d], std, rng),
                wo: Tensor::randn(&[d, d], std, rng),
                w_up: Tensor::randn(&[d, config.d_ff], std, rng),
                w_down: Tensor::randn(&[config.d_ff, d], std, rng),
                g_attn: Tensor::full(&[d], E::one()),
                g_mlp: Tensor::full(&[d], E::one()),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_embed: Tensor::randn(&[config.vocab, d], std, rng),
            pos_embed: Tensor::randn(&[config.window, d], std, rng),
            layers,
            g_final: Tensor::full(&[d], E::one()),
            w_out: Tensor::randn(&[d, config.vocab], std, rng),
        })
    }

    /// All tensors with stable names, in checkpoint/optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.wq"), &l.wq));
            out.push((format!("layer.{i}.wk"), &l.wk));
            out.push((format!("layer.{i}.wv"), &l.wv));
            out.push((format!("layer.{i}.wo"), &l.wo));
            out.push((format!("layer.{i}.w_up"), &l.w_up));
            out.push((format!("layer.{i}.w_down"), &l.w_down));
            out.push((format!("layer.{i}.g_attn"), &l.g_attn));
            out.push((format!("layer.{i}.g_mlp"), &l.g_mlp));
        }
        out.push(("g_final".into(), &self.g_final));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.wq"), &mut l.wq));
            out.push((format!("layer.{i}.wk"), &mut l.wk));
            out.push((format!("layer.{i}.wv"), &mut l.wv));
            out.push((format!("layer.{i}.wo"), &mut l.wo));
            out.push((format!("layer.{i}.w_up"), &mut l.w_up));
            out.push((format!("layer.{i}.w_down"), &mut l.w_down));
            out.push((format!("layer.{i}.g_attn"), &mut l.g_attn));
            out.push((format!("layer.{i}.g_mlp"), &mut l.g_mlp));
        }
        out.push(("g_final".into(), &mut self.g_final));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count excluding token/position embeddings (cost model input).
    pub fn non_embedding_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| n != "tok_embed" && n != "pos_embed")
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<F: Scalar>(&self) -> Params<F> {
        Params {
            config: self.config.clone(),
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                    g_attn: l.g_attn.cast(),
                    g_mlp: l.g_mlp.cast(),
                })
                .collect(),
            g_final: self.g_final.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Fold the adapter delta into the base weights:
    /// `W' = W + (alpha/r) * B A` for each adapted projection.
    pub fn merge(&self, adapter: &LoraAdapter<E>) -> Result<Params<E>> {
        adapter.check_shapes(&self.config)?;
        let mut merged = self.clone();
        let scale = E::of_f64(adapter.scale());
        for (layer, al) in merged.layers.iter_mut().zip(adapter.layers.iter()) {
            for (w, m) in [
                (&mut layer.wk, &al.key),
                (&mut layer.wv, &al.value),
                (&mut layer.wo, &al.output),
            ] {
                // delta is [d_out, d_in]; weights are stored [d_in, d_out]
                let mut delta = m.delta()?;
                delta.scale_assign(scale);
                w.add_assign(&delta.transposed_2d()?)?;
            }
        }
        Ok(merged)
    }
}

/// One low-rank pair: `A [r, d_in]`, `B [d_out, r]`.
#[derive(Debug, Clone)]
pub struct LoraMatrix<E: Scalar> {
    pub a: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Scalar> LoraMatrix<E> {
    /// Unscaled `B A`, shaped `[d_out, d_in]`.
    pub fn delta(&self) -> Result<Tensor<E>> {
        Ok(self.b.matmul(&self.a)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct LoraLayer<E: Scalar> {
    pub key: LoraMatrix<E>,
    pub value: LoraMatrix<E>,
    pub output: LoraMatrix<E>,
}

/// LoRA adapter over the K, V, and attention-output projections.
///
/// B starts at zero so the initial delta is exactly zero and the adapted
/// model is bit-identical to the base model at step 0.
#[derive(Debug, Clone)]
pub struct LoraAdapter<E: Scalar> {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub layers: Vec<LoraLayer<E>>,
}

impl<E: Scalar> LoraAdapter<E> {
    pub fn init(
        config: &ModelConfig,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "LoRA dropout {dropout} outside [0,1)"
            )));
        }
        let d = config.d_model;
        let a_std = 0.02;
        let mk = |rng: &mut Stream| LoraMatrix {
            a: Tensor::randn(&[rank, d], a_std, rng),
            b: Tensor::zeros(&[d, rank]),
        };
        let layers = (0..config.layers)
            .map(|_| LoraLayer {
                key: mk(rng),
                value: mk(rng),
                output: mk(rng),
            })
            .collect();
        Ok(Self {
            rank,
            alpha,
            dropout,
            layers,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.layers {
            return Err(Error::Config(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                config.layers
            )));
        }
        let d = config.d_model;
        for l in &self.layers {
            for m in [&l.key, &l.value, &l.output] {
                if m.a.shape() != [self.rank, d] || m.b.shape() != [d, self.rank] {
                    return Err(Error::ShapeMismatch {
                        context: "lora adapter",
                        lhs: m.a.shape().to_vec(),
                        rhs: m.b.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (tag, m) in [("key", &l.key), ("value", &l.value), ("output", &l.output)]
            {
                out.push((format!("lora.{i}.{tag}.a"), &m.a));
                out.push((format!("lora.{i}.{tag}.b"), &m.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (tag, m) in [
                ("key", &mut l.key),
                ("value", &mut l.value),
                ("output", &mut l.output),
            ] {
                out.push((format!("lora.{i}.{tag}.a"), &mut m.a));
                out.push((format!("lora.{i}.{tag}.b"), &mut m.b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> LoraAdapter<F> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    key: LoraMatrix {
                        a: l.key.a.cast(),
                        b: l.key.b.cast(),
                    },
                    value: LoraMatrix {
                        a: l.value.a.cast(),
                        b: l.value.b.cast(),
                    },
                    output: LoraMatrix {
                        a: l.output.a.cast(),
                        b: l.output.b.cast(),
                    },
                })
                .collect(),
        }
    }
}

/// Trainable-parameter count relative to the base model.
pub fn trainable_fraction<E: Scalar>(
    params: &Params<E>,
    adapter: &LoraAdapter<E>,
) -> f64 {
    adapter.param_count() as f64 / params.param_count() as f64
}

struct BoundLayer {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w_up: Var,
    w_down: Var,
    g_attn: Var,
    g_mlp: Var,
}

/// Base weights placed on a tape, as leaves (pretraining) or constants
/// (LoRA fine-tuning and inference).
pub struct BoundParams {
    tok_embed: Var,
    pos_embed: Var,
    layers: Vec<BoundLayer>,
    g_final: Var,
    w_out: Var,
    pub named: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn bind<E: Scalar>(
        tape: &mut Tape<E>,
        params: &Params<E>,
        trainable: bool,
    ) -> Result<Self> {
        let place = |t: &Tensor<E>, tape: &mut Tape<E>| -> Result<Var> {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_embed = place(&params.tok_embed, tape)?;
        let pos_embed = place(&params.pos_embed, tape)?;
        let mut layers = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            layers.push(BoundLayer {
                wq: place(&l.wq, tape)?,
                wk: place(&l.wk, tape)?,
                wv: place(&l.wv, tape)?,
                wo: place(&l.wo, tape)?,
                w_up: place(&l.w_up, tape)?,
                w_down: place(&l.w_down, tape)?,
                g_attn: place(&l.g_attn, tape)?,
                g_mlp: place(&l.g_mlp, tape)?,
            });
        }
        let g_final = place(&params.g_final, tape)?;
        let w_out = place(&params.w_out, tape)?;
        let mut named = vec![
            ("tok_embed".to_string(), tok_embed),
            ("pos_embed".to_string(), pos_embed),
        ];
        for (i, bl) in layers.iter().enumerate() {
            named.push((format!("layer.{i}.wq"), bl.wq));
            named.push((format!("layer.{i}.wk"), bl.wk));
            named.push((format!("layer.{i}.wv"), bl.wv));
            named.push((format!("layer.{i}.wo"), bl.wo));
            named.push((format!("layer.{i}.w_up"), bl.w_up));
            named.push((format!("layer.{i}.w_down"), bl.w_down));
            named.push((format!("layer.{i}.g_attn"), bl.g_attn));
            named.push((format!("layer.{i}.g_mlp"), bl.g_mlp));
        }
        named.push(("g_final".to_string(), g_final));
        named.push(("w_out".to_string(), w_out));
        Ok(Self {
            tok_embed,
            pos_embed,
            layers,
            g_final,
            w_out,
            named,
        })
    }
}

struct BoundLoraMatrix {
    a: Var,
    b: Var,
}

struct BoundLoraLayer {
    key: BoundLoraMatrix,
    value: BoundLoraMatrix,
    output: BoundLoraMatrix,
}

/// Adapter weights placed on a tape.
pub struct BoundAdapter {
    scale: f64,
    dropout: f64,
    layers: Vec<BoundLoraLayer>,
    pub named: Vec<(String, Var)>,
}

impl BoundAdapter {
    pub fn bind<E: Scalar>(
        tape: &mut Tape<E>,
        adapter: &LoraAdapter<E>,
        trainable: bool,
    ) -> Result<Self> {
        let place = |t: &Tensor<E>, tape: &mut Tape<E>| -> Result<Var> {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut layers = Vec::with_capacity(adapter.layers.len());
        let mut named = Vec::new();
        for (i, l) in adapter.layers.iter().enumerate() {
            let mut bind_matrix =
                |m: &LoraMatrix<E>, tag: &str, tape: &mut Tape<E>| -> Result<BoundLoraMatrix> {
                    let a = place(&m.a, tape)?;
                    let b = place(&m.b, tape)?;
                    named.push((format!("lora.{i}.{tag}.a"), a));
                    named.push((format!("lora.{i}.{tag}.b"), b));
                    Ok(BoundLoraMatrix { a, b })
                };
            layers.push(BoundLoraLayer {
                key: bind_matrix(&l.key, "key", tape)?,
                value: bind_matrix(&l.value, "value", tape)?,
                output: bind_matrix(&l.output, "output", tape)?,
            });
        }
        Ok(Self {
            scale: adapter.scale(),
            dropout: adapter.dropout,
            layers,
            named,
        })
    }
}

/// Linear projection with an optional LoRA path:
/// `y = x W + (alpha/r) (dropout(x) A^T) B^T`.
fn project<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    w: Var,
    lora: Option<&BoundLoraMatrix>,
    scale: f64,
    p_drop: f64,
    train_mode: bool,
    rng: &mut Stream,
) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let Some(m) = lora else {
        return Ok(y);
    };
    let xin = if train_mode && p_drop > 0.0 {
        tape.dropout(x, p_drop, rng)?
    } else {
        x
    };
    let h = tape.matmul_nt(xin, m.a)?;
    let d = tape.matmul_nt(h, m.b)?;
    let d = tape.scale(d, E::of_f64(scale))?;
    tape.add(y, d)
}

/// Build the forward graph; returns flattened logits `[B*seq, V]`.
///
/// Causal by construction: attention scores above the diagonal never enter
/// the softmax. Without an adapter this is the frozen base model.
pub fn forward<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    adapter: Option<&BoundAdapter>,
    config: &ModelConfig,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    train_mode: bool,
    rng: &mut Stream,
) -> Result<Var> {
    if tokens.len() != batch * seq {
        return Err(Error::InvalidArgument(format!(
            "expected {} tokens for batch {batch} x seq {seq}, got {}",
            batch * seq,
            tokens.len()
        )));
    }
    if seq > config.window {
        return Err(Error::SequenceTooLong {
            len: seq,
            window: config.window,
        });
    }
    for &t in tokens {
        if (t as usize) >= config.vocab {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: config.vocab,
            });
        }
    }
    let d = config.d_model;
    let h = config.heads;
    let hd = config.head_dim();

    let tok = tape.gather(bound.tok_embed, tokens)?;
    let pos_ids: Vec<u32> = (0..batch)
        .flat_map(|_| 0..seq as u32)
        .collect();
    let pos = tape.gather(bound.pos_embed, &pos_ids)?;
    let mut x = tape.add(tok, pos)?; // [B*seq, d]

    for (li, layer) in bound.layers.iter().enumerate() {
        let al = adapter.map(|a| &a.layers[li]);
        let (scale, p_drop) = adapter
            .map(|a| (a.scale, a.dropout))
            .unwrap_or((0.0, 0.0));

        let hn = tape.rms_norm(x, layer.g_attn, RMS_EPS)?;
        let q = project(tape, hn, layer.wq, None, 0.0, 0.0, false, rng)?;
        let k = project(
            tape,
            hn,
            layer.wk,
            al.map(|a| &a.key),
            scale,
            p_drop,
            train_mode,
            rng,
        )?;
        let v = project(
            tape,
            hn,
            layer.wv,
            al.map(|a| &a.value),
            scale,
            p_drop,
            train_mode,
            rng,
        )?;

        let split = |tape: &mut Tape<E>, t: Var| -> Result<Var> {
            let t = tape.reshape(t, vec![batch, seq, h, hd])?;
            let t = tape.swap_middle(t)?; // [B, H, seq, hd]
            tape.reshape(t, vec![batch * h, seq, hd])
        };
        let qh = split(tape, q)?;
        let kh = split(tape, k)?;
        let vh = split(tape, v)?;

        let scores = tape.batch_matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, E::of_f64(1.0 / (hd as f64).sqrt()))?;
        let att = tape.causal_softmax(scores)?;
        let ctx = tape.batch_matmul(att, vh)?; // [B*H, seq, hd]
        let ctx = tape.reshape(ctx, vec![batch, h, seq, hd])?;
        let ctx = tape.swap_middle(ctx)?; // [B, seq, H, hd]
        let ctx = tape.reshape(ctx, vec![batch * seq, d])?;

        let attn_out = project(
            tape,
            ctx,
            layer.wo,
            al.map(|a| &a.output),
            scale,
            p_drop,
            train_mode,
            rng,
        )?;
        x = tape.add(x, attn_out)?;

        let mn = tape.rms_norm(x, layer.g_mlp, RMS_EPS)?;
        let up = tape.matmul(mn, layer.w_up)?;
        let act = tape.silu(up)?;
        let down = tape.matmul(act, layer.w_down)?;
        x = tape.add(x, down)?;
    }

    let xf = tape.rms_norm(x, bound.g_final, RMS_EPS)?;
    tape.matmul(xf, bound.w_out) // [B*seq, V]
}

/// Convenience inference path: logits as a plain tensor, no gradients.
pub fn infer_logits<E: Scalar>(
    params: &Params<E>,
    adapter: Option<&LoraAdapter<E>>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false)?;
    let bound_adapter = match adapter {
        Some(a) => Some(BoundAdapter::bind(&mut tape, a, false)?),
        None => None,
    };
    let mut rng = crate::rng::stream(0, "infer");
    let logits = forward(
        &mut tape,
        &bound,
        bound_adapter.as_ref(),
        &params.config,
        tokens,
        batch,
        seq,
        false,
        &mut rng,
    )?;
    Ok(tape.value(logits).clone())
}
