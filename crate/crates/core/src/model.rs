//! A tiny pre-norm decoder transformer whose q/k/v/o/gate/up/down projections
//! are [`AdaptedLinear`] instances, plus named architecture presets used by
//! the audits without ever instantiating the full-size models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    build_adapters_into, AdaptedLinear, AdapterMode, AdapterScheme, LayerAdapter, ModuleKind,
    ParamId, SharedParamStore, TapeBinding,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Architecture description. Sufficient both for building the toy model and
/// for closed-form parameter/memory audits of full-size configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub has_gated_mlp: bool,
    /// Learned absolute position table (absent in rotary-embedding models).
    pub has_position_embeddings: bool,
    /// Norms carry a bias term in addition to the scale (false for RMS-style norms).
    pub norm_has_bias: bool,
    /// Linear projections carry bias vectors (never adapted or trained here,
    /// but counted by the full fine-tune audit).
    pub linear_has_bias: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.intermediate_dim,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all dimensions of '{}' must be >= 1", self.name)));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {} in '{}'",
                self.hidden_dim, self.n_heads, self.name
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Module kinds present in this architecture.
    pub fn modules(&self) -> Vec<ModuleKind> {
        ModuleKind::ALL
            .into_iter()
            .filter(|m| self.has_gated_mlp || *m != ModuleKind::Gate)
            .collect()
    }
}

/// Canonical dimensions for the architectures referenced by the audits.
pub fn preset_spec(name: &str) -> Result<ModelSpec> {
    let spec = match name {
        "llama7b" => ModelSpec {
            name: name.into(),
            n_layers: 32,
            hidden_dim: 4096,
            n_heads: 32,
            intermediate_dim: 11008,
            vocab_size: 32000,
            max_seq_len: 2048,
            has_gated_mlp: true,
            has_position_embeddings: false,
            norm_has_bias: false,
            linear_has_bias: false,
        },
        "llama13b" => ModelSpec {
            name: name.into(),
            n_layers: 40,
            hidden_dim: 5120,
            n_heads: 40,
            intermediate_dim: 13824,
            vocab_size: 32000,
            max_seq_len: 2048,
            has_gated_mlp: true,
            has_position_embeddings: false,
            norm_has_bias: false,
            linear_has_bias: false,
        },
        "roberta_base" => ModelSpec {
            name: name.into(),
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            intermediate_dim: 3072,
            vocab_size: 50265,
            max_seq_len: 512,
            has_gated_mlp: false,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: true,
        },
        "roberta_large" => ModelSpec {
            name: name.into(),
            n_layers: 24,
            hidden_dim: 1024,
            n_heads: 16,
            intermediate_dim: 4096,
            vocab_size: 50265,
            max_seq_len: 512,
            has_gated_mlp: false,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: true,
        },
        "gpt2_medium" => ModelSpec {
            name: name.into(),
            n_layers: 24,
            hidden_dim: 1024,
            n_heads: 16,
            intermediate_dim: 4096,
            vocab_size: 50257,
            max_seq_len: 1024,
            has_gated_mlp: false,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: true,
        },
        "gpt2_large" => ModelSpec {
            name: name.into(),
            n_layers: 36,
            hidden_dim: 1280,
            n_heads: 20,
            intermediate_dim: 5120,
            vocab_size: 50257,
            max_seq_len: 1024,
            has_gated_mlp: false,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: true,
        },
        "tiny" => ModelSpec {
            name: name.into(),
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            intermediate_dim: 32,
            vocab_size: 64,
            max_seq_len: 32,
            has_gated_mlp: true,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: false,
        },
        other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// A batch of token sequences, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq {
            return Err(Error::Contract(format!(
                "token batch of {} ids cannot be [{batch}, {seq}]",
                tokens.len()
            )));
        }
        Ok(TokenBatch { tokens, batch, seq })
    }
}

/// Tokens plus next-token targets and the positions that contribute to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: TokenBatch,
    /// One target class per input position, `[batch * seq]`.
    pub targets: Vec<usize>,
    /// Positions included in the loss, `[batch * seq]`.
    pub mask: Vec<bool>,
}

struct LayerBlock {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: AdaptedLinear,
    gate: Option<AdaptedLinear>,
    up: AdaptedLinear,
    down: AdaptedLinear,
}

impl LayerBlock {
    fn linear(&self, m: ModuleKind) -> Option<&AdaptedLinear> {
        match m {
            ModuleKind::Q => Some(&self.q),
            ModuleKind::K => Some(&self.k),
            ModuleKind::V => Some(&self.v),
            ModuleKind::O => Some(&self.o),
            ModuleKind::Gate => self.gate.as_ref(),
            ModuleKind::Up => Some(&self.up),
            ModuleKind::Down => Some(&self.down),
        }
    }
}

/// Per-layer intermediate tensors exposed for probing.
pub struct ForwardTrace {
    /// Logits, `[batch*seq, vocab]`.
    pub logits: TensorId,
    /// Adapted q-projection output per layer, `[batch*seq, hidden]`.
    pub layer_q: Vec<TensorId>,
    /// Attention probabilities per layer, `[batch*heads, seq, seq]`.
    pub layer_attn: Vec<TensorId>,
}

pub struct TinyTransformer {
    pub spec: ModelSpec,
    pub scheme: AdapterScheme,
    pub seed: u64,
    pub store: SharedParamStore,
    embed: ParamId,
    pos_embed: Option<ParamId>,
    final_gamma: ParamId,
    final_beta: ParamId,
    head: ParamId,
    blocks: Vec<LayerBlock>,
}

const LN_EPS: f64 = 1e-5;

impl TinyTransformer {
    pub fn build(spec: &ModelSpec, scheme: &AdapterScheme, seed: u64) -> Result<Self> {
        spec.validate()?;
        scheme.validate(spec)?;
        let mut store = SharedParamStore::new();
        let full_ft = scheme.mode == AdapterMode::FullFt;
        let mut base_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed);

        let h = spec.hidden_dim;
        let v = spec.vocab_size;
        let embed = store.insert("embed", &[v, h], gaussian_vec(&mut base_rng, v * h, 0.05), full_ft);
        let pos_embed = if spec.has_position_embeddings {
            Some(store.insert(
                "pos_embed",
                &[spec.max_seq_len, h],
                gaussian_vec(&mut base_rng, spec.max_seq_len * h, 0.05),
                full_ft,
            ))
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(spec.n_layers);
        let mut bases: Vec<Vec<ParamId>> = Vec::with_capacity(spec.n_layers);
        for layer in 0..spec.n_layers {
            let mut per_layer = Vec::new();
            for module in spec.modules() {
                let (din, dout) = module.dims(spec);
                let std = (1.0 / din as f64).sqrt();
                let id = store.insert(
                    format!("layers.{layer}.{module}.base"),
                    &[din, dout],
                    gaussian_vec(&mut base_rng, din * dout, std),
                    full_ft,
                );
                per_layer.push(id);
            }
            bases.push(per_layer);
        }
        let final_gamma = store.insert("final_norm.gamma", &[h], vec![1.0; h], full_ft);
        let final_beta = store.insert("final_norm.beta", &[h], vec![0.0; h], full_ft);
        let head_std = (1.0 / h as f64).sqrt();
        let head = store.insert("head", &[h, v], gaussian_vec(&mut base_rng, h * v, head_std), full_ft);

        let adapters = build_adapters_into(&mut store, spec, scheme, &mut adapter_rng)?;
        let adapter_for = |layer: usize, module: ModuleKind| -> Option<LayerAdapter> {
            adapters
                .iter()
                .find(|a| a.layer_index == layer && a.module == module)
                .cloned()
        };

        for layer in 0..spec.n_layers {
            let ln1_gamma = store.insert(format!("layers.{layer}.ln1.gamma"), &[h], vec![1.0; h], full_ft);
            let ln1_beta = store.insert(format!("layers.{layer}.ln1.beta"), &[h], vec![0.0; h], full_ft);
            let ln2_gamma = store.insert(format!("layers.{layer}.ln2.gamma"), &[h], vec![1.0; h], full_ft);
            let ln2_beta = store.insert(format!("layers.{layer}.ln2.beta"), &[h], vec![0.0; h], full_ft);
            let modules = spec.modules();
            let base_of = |module: ModuleKind| -> ParamId {
                let idx = modules.iter().position(|m| *m == module).unwrap();
                bases[layer][idx]
            };
            let mk = |module: ModuleKind| -> AdaptedLinear {
                let (din, dout) = module.dims(spec);
                AdaptedLinear {
                    base: base_of(module),
                    in_dim: din,
                    out_dim: dout,
                    adapter: adapter_for(layer, module),
                }
            };
            blocks.push(LayerBlock {
                ln1_gamma,
                ln1_beta,
                ln2_gamma,
                ln2_beta,
                q: mk(ModuleKind::Q),
                k: mk(ModuleKind::K),
                v: mk(ModuleKind::V),
                o: mk(ModuleKind::O),
                gate: spec.has_gated_mlp.then(|| mk(ModuleKind::Gate)),
                up: mk(ModuleKind::Up),
                down: mk(ModuleKind::Down),
            });
        }

        Ok(TinyTransformer {
            spec: spec.clone(),
            scheme: scheme.clone(),
            seed,
            store,
            embed,
            pos_embed,
            final_gamma,
            final_beta,
            head,
            blocks,
        })
    }

    /// Add uniform noise to every trainable parameter. Gradient checks and
    /// merge tests need a generic point; at the zero-delta start many
    /// gradients vanish identically.
    pub fn jitter_trainable(&mut self, seed: u64, amplitude: f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.store.trainable_ids() {
            for v in self.store.param_mut(id).data.iter_mut() {
                *v += rng.gen_range(-amplitude..amplitude);
            }
        }
    }

    /// All adapters attached to this model, layer-major.
    pub fn adapters(&self) -> Vec<&LayerAdapter> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for m in ModuleKind::ALL {
                if let Some(lin) = block.linear(m) {
                    if let Some(ad) = &lin.adapter {
                        out.push(ad);
                    }
                }
            }
        }
        out
    }

    pub fn adapted_linear(&self, layer: usize, module: ModuleKind) -> Option<&AdaptedLinear> {
        self.blocks.get(layer).and_then(|b| b.linear(module))
    }

    /// Logits `[batch*seq, vocab]` with the adapter path active.
    pub fn forward(&self, tape: &mut Tape, bind: &mut TapeBinding, input: &TokenBatch) -> Result<TensorId> {
        Ok(self.forward_traced(tape, bind, input, true)?.logits)
    }

    /// Logits of the frozen base model (adapters skipped entirely).
    pub fn forward_base(&self, tape: &mut Tape, bind: &mut TapeBinding, input: &TokenBatch) -> Result<TensorId> {
        Ok(self.forward_traced(tape, bind, input, false)?.logits)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        input: &TokenBatch,
        use_adapters: bool,
    ) -> Result<ForwardTrace> {
        let (b, t, h) = (input.batch, input.seq, self.spec.hidden_dim);
        if t > self.spec.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.spec.max_seq_len
            )));
        }
        let heads = self.spec.n_heads;
        let dh = self.spec.head_dim();
        let proj = |lin: &AdaptedLinear, tape: &mut Tape, bind: &mut TapeBinding, x: TensorId| {
            if use_adapters {
                lin.forward(tape, bind, &self.store, x)
            } else {
                lin.forward_base(tape, bind, &self.store, x)
            }
        };

        let embed = bind.bind(tape, &self.store, self.embed);
        let mut hstate = tape.embedding_lookup(embed, &input.tokens, &[b, t])?;
        if let Some(pos_id) = self.pos_embed {
            let pos_table = bind.bind(tape, &self.store, pos_id);
            let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
            let pos = tape.embedding_lookup(pos_table, &pos_ids, &[b, t])?;
            hstate = tape.add(hstate, pos)?;
        }

        let mut layer_q = Vec::with_capacity(self.blocks.len());
        let mut layer_attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let g1 = bind.bind(tape, &self.store, block.ln1_gamma);
            let b1 = bind.bind(tape, &self.store, block.ln1_beta);
            let n1 = tape.layernorm(hstate, g1, b1, LN_EPS)?;
            let flat = tape.reshape(n1, &[b * t, h])?;

            let q2 = proj(&block.q, tape, bind, flat)?;
            layer_q.push(q2);
            let k2 = proj(&block.k, tape, bind, flat)?;
            let v2 = proj(&block.v, tape, bind, flat)?;

            let q3 = tape.reshape(q2, &[b, t, h])?;
            let k3 = tape.reshape(k2, &[b, t, h])?;
            let v3 = tape.reshape(v2, &[b, t, h])?;
            let qh = tape.split_heads(q3, heads)?;
            let kh = tape.split_heads(k3, heads)?;
            let vh = tape.split_heads(v3, heads)?;
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.causal_mask(scaled)?;
            let attn = tape.softmax_lastdim(masked)?;
            layer_attn.push(attn);
            let ctx = tape.bmm(attn, vh)?;
            let merged = tape.merge_heads(ctx, heads)?;
            let ctx_flat = tape.reshape(merged, &[b * t, h])?;
            let out = proj(&block.o, tape, bind, ctx_flat)?;
            let out3 = tape.reshape(out, &[b, t, h])?;
            hstate = tape.add(hstate, out3)?;

            let g2 = bind.bind(tape, &self.store, block.ln2_gamma);
            let bt2 = bind.bind(tape, &self.store, block.ln2_beta);
            let n2 = tape.layernorm(hstate, g2, bt2, LN_EPS)?;
            let flat2 = tape.reshape(n2, &[b * t, h])?;
            let act = if let Some(gate) = &block.gate {
                let gpath = proj(gate, tape, bind, flat2)?;
                let gact = tape.gelu(gpath);
                let upath = proj(&block.up, tape, bind, flat2)?;
                tape.mul(gact, upath)?
            } else {
                let upath = proj(&block.up, tape, bind, flat2)?;
                tape.gelu(upath)
            };
            let mlp = proj(&block.down, tape, bind, act)?;
            let mlp3 = tape.reshape(mlp, &[b, t, h])?;
            hstate = tape.add(hstate, mlp3)?;
        }

        let gf = bind.bind(tape, &self.store, self.final_gamma);
        let bf = bind.bind(tape, &self.store, self.final_beta);
        let nf = tape.layernorm(hstate, gf, bf, LN_EPS)?;
        let flat = tape.reshape(nf, &[b * t, h])?;
        let head = bind.bind(tape, &self.store, self.head);
        let logits = tape.matmul(flat, head)?;
        Ok(ForwardTrace { logits, layer_q, layer_attn })
    }

    /// Masked next-token cross-entropy for a batch.
    pub fn loss(&self, tape: &mut Tape, bind: &mut TapeBinding, batch: &Batch) -> Result<TensorId> {
        let logits = self.forward(tape, bind, &batch.inputs)?;
        tape.cross_entropy_masked(logits, &batch.targets, &batch.mask)
    }
}

use crate::adapters::gaussian_vec;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterMode;

    fn all_targets() -> Vec<ModuleKind> {
        ModuleKind::ALL.to_vec()
    }

    #[test]
    fn preset_dimensions() {
        let l7 = preset_spec("llama7b").unwrap();
        assert_eq!((l7.n_layers, l7.hidden_dim, l7.intermediate_dim), (32, 4096, 11008));
        let rl = preset_spec("roberta_large").unwrap();
        assert_eq!((rl.n_layers, rl.hidden_dim), (24, 1024));
        let tiny = preset_spec("tiny").unwrap();
        assert_eq!(
            (tiny.n_layers, tiny.hidden_dim, tiny.n_heads, tiny.intermediate_dim, tiny.vocab_size),
            (2, 16, 2, 32, 64)
        );
        assert!(preset_spec("llama99b").is_err());
    }

    #[test]
    fn zero_init_adapters_do_not_change_logits() {
        let spec = preset_spec("tiny").unwrap();
        for mode in [
            AdapterMode::Lora,
            AdapterMode::LoraFa,
            AdapterMode::ShareA,
            AdapterMode::ShareB,
            AdapterMode::ShareAb,
        ] {
            let scheme = AdapterScheme::new(mode, 4, 8.0, &all_targets());
            let model = TinyTransformer::build(&spec, &scheme, 42).unwrap();
            let input = TokenBatch::new(vec![1, 5, 9, 3, 2, 2, 7, 8], 2, 4).unwrap();
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new();
            let with = model.forward(&mut tape, &mut bind, &input).unwrap();
            let without = model.forward_base(&mut tape, &mut bind, &input).unwrap();
            for (a, b) in tape.data(with).iter().zip(tape.data(without)) {
                assert_eq!(a.to_bits(), b.to_bits(), "mode {mode:?}");
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::Lora, 4, 8.0, &all_targets());
        let model = TinyTransformer::build(&spec, &scheme, 0).unwrap();
        let input = TokenBatch::new(vec![3], 1, 1).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let trace = model.forward_traced(&mut tape, &mut bind, &input, true).unwrap();
        for attn in trace.layer_attn {
            assert_eq!(tape.shape(attn), &[2, 1, 1]); // batch * heads
            for &p in tape.data(attn) {
                assert!((p - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &all_targets());
        let model = TinyTransformer::build(&spec, &scheme, 11).unwrap();
        let a = TokenBatch::new(vec![4, 8, 15, 16], 1, 4).unwrap();
        let b = TokenBatch::new(vec![4, 8, 15, 23], 1, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let la = model.forward(&mut tape, &mut bind, &a).unwrap();
        let lb = model.forward(&mut tape, &mut bind, &b).unwrap();
        let v = spec.vocab_size;
        let da = tape.data(la);
        let db = tape.data(lb);
        for pos in 0..3 {
            for c in 0..v {
                assert_eq!(da[pos * v + c].to_bits(), db[pos * v + c].to_bits());
            }
        }
        assert!(
            (0..v).any(|c| da[3 * v + c] != db[3 * v + c]),
            "changing the final token must change its logits"
        );
    }

    #[test]
    fn oversize_sequence_is_contract_error() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::Lora, 2, 4.0, &[ModuleKind::Q]);
        let model = TinyTransformer::build(&spec, &scheme, 0).unwrap();
        let long = TokenBatch::new(vec![0; 33], 1, 33).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        assert!(matches!(
            model.forward(&mut tape, &mut bind, &long),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shared_a_perturbation_reaches_every_layer_owned_b_only_its_own() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &all_targets());
        let mut model = TinyTransformer::build(&spec, &scheme, 3).unwrap();
        // Give B nonzero values so the adapter path is active.
        for id in model.store.trainable_ids() {
            let p = model.store.param_mut(id);
            for (i, v) in p.data.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let input = TokenBatch::new(vec![1, 2, 3, 4], 1, 4).unwrap();
        let qs = |model: &TinyTransformer| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new();
            let trace = model.forward_traced(&mut tape, &mut bind, &input, true).unwrap();
            trace.layer_q.iter().map(|&q| tape.data(q).to_vec()).collect()
        };
        let before = qs(&model);

        let shared_a = model.store.shared_entry("a.q").unwrap();
        model.store.param_mut(shared_a).data[0] += 0.5;
        let after_shared = qs(&model);
        for (layer, (b, a)) in before.iter().zip(&after_shared).enumerate() {
            assert!(b.iter().zip(a).any(|(x, y)| x != y), "layer {layer} q should move");
        }
        model.store.param_mut(shared_a).data[0] -= 0.5;

        let b_q1 = model.adapted_linear(1, ModuleKind::Q).unwrap().adapter.as_ref().unwrap().b.id();
        model.store.param_mut(b_q1).data[0] += 0.5;
        let after_b = qs(&model);
        assert_eq!(before[0], after_b[0], "layer 0 q must be unchanged");
        assert!(before[1].iter().zip(&after_b[1]).any(|(x, y)| x != y));
    }

    #[test]
    fn merged_model_forward_matches_adapter_path() {
        use rand::Rng;
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &all_targets());
        let mut model = TinyTransformer::build(&spec, &scheme, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for id in model.store.trainable_ids() {
            for v in model.store.param_mut(id).data.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        // Fold every adapter into its base weight, then compare forwards.
        let mut merged = TinyTransformer::build(&spec, &scheme, 5).unwrap();
        merged.store.restore(&model.store.snapshot()).unwrap();
        for layer in 0..spec.n_layers {
            for module in ModuleKind::ALL {
                let lin = model.adapted_linear(layer, module).unwrap().clone();
                let folded = lin.merge(&model.store).unwrap();
                let base = merged.adapted_linear(layer, module).unwrap().base;
                merged.store.param_mut(base).data.copy_from_slice(&folded.weight.data);
            }
        }
        let input = TokenBatch::new(vec![9, 1, 4, 4, 2, 60, 33, 7], 2, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let adapted = model.forward(&mut tape, &mut bind, &input).unwrap();
        let mut tape2 = Tape::new();
        let mut bind2 = TapeBinding::new();
        let plain = merged.forward_base(&mut tape2, &mut bind2, &input).unwrap();
        for (a, b) in tape.data(adapted).iter().zip(tape2.data(plain)) {
            let denom = b.abs().max(1.0);
            assert!((a - b).abs() / denom < 1e-10);
        }
    }

    #[test]
    fn model_gradcheck_shared_a_and_owned_b() {
        // Small 2-layer model; finite differences on one shared A and one owned B.
        let spec = ModelSpec {
            name: "gradcheck8".into(),
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            intermediate_dim: 16,
            vocab_size: 12,
            max_seq_len: 8,
            has_gated_mlp: true,
            has_position_embeddings: true,
            norm_has_bias: true,
            linear_has_bias: false,
        };
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 2, 4.0, &all_targets());
        let mut model = TinyTransformer::build(&spec, &scheme, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        {
            use rand::Rng;
            for id in model.store.trainable_ids() {
                for v in model.store.param_mut(id).data.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
        }
        let batch = Batch {
            inputs: TokenBatch::new(vec![1, 2, 3, 4, 5, 6, 7, 8], 2, 4).unwrap(),
            targets: vec![2, 3, 4, 5, 6, 7, 8, 9],
            mask: vec![true; 8],
        };
        let loss_at = |model: &TinyTransformer| -> f64 {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new();
            let l = model.loss(&mut tape, &mut bind, &batch).unwrap();
            tape.data(l)[0]
        };

        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let loss = model.loss(&mut tape, &mut bind, &batch).unwrap();
        tape.backward(loss).unwrap();
        let grads = bind.harvest(&tape, &model.store);

        let shared_a = model.store.shared_entry("a.q").unwrap();
        let owned_b = model
            .adapted_linear(1, ModuleKind::V)
            .unwrap()
            .adapter
            .as_ref()
            .unwrap()
            .b
            .id();
        let h = 1e-5;
        for pid in [shared_a, owned_b] {
            let n = model.store.param(pid).numel();
            let analytic = grads[&pid].clone();
            for i in (0..n).step_by(3) {
                let orig = model.store.param(pid).data[i];
                model.store.param_mut(pid).data[i] = orig + h;
                let fp = loss_at(&model);
                model.store.param_mut(pid).data[i] = orig - h;
                let fm = loss_at(&model);
                model.store.param_mut(pid).data[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs());
                let err = if denom < 1e-6 {
                    (analytic[i] - numeric).abs()
                } else {
                    (analytic[i] - numeric).abs() / denom
                };
                assert!(err < 1e-4, "param {pid:?} elem {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }
}
