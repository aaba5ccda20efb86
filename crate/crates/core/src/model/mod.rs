//! Decoder-only transformer with activation recording and value injection.
//!
//! The architecture is a pre-norm residual decoder with learned positional
//! embeddings and RMS norms. Each block carries either the classic two-matrix
//! FFN or the gated three-matrix variant; in both, the "neurons" of a layer
//! are the post-activation outputs of the first projection, and injection
//! adds delta values to that vector at one token position before it is
//! consumed downstream.

pub mod tokenizer;
pub mod train;

pub use tokenizer::Tokenizer;
pub use train::{train_toy, TrainCfg, TrainReport};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{ActKind, NodeId, Real, Tape, Tensor};

/// FFN wiring of every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnVariant {
    /// h = act(x·W1)·W2
    Classic,
    /// h = (act(x·W1) ⊙ x·W2)·W3
    Gated,
}

/// Geometry and wiring of the subject model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_variant: FfnVariant,
    pub act_fn: ActKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Invalid("n_layers must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::Invalid("d_ffn must be at least 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Invalid("vocab_size must cover the 4 reserved tokens".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Invalid("max_seq must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-block weights. `w3` is present only for the gated variant.
#[derive(Clone, Debug)]
pub struct LayerParams<R: Real> {
    pub attn_norm: Tensor<R>,
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub ffn_norm: Tensor<R>,
    pub w1: Tensor<R>,
    pub w2: Tensor<R>,
    pub w3: Option<Tensor<R>>,
}

/// All weights in a fixed, nameable order.
#[derive(Clone, Debug)]
pub struct ModelParams<R: Real> {
    pub tok_emb: Tensor<R>,
    pub pos_emb: Tensor<R>,
    pub layers: Vec<LayerParams<R>>,
    pub final_norm: Tensor<R>,
    pub head: Tensor<R>,
}

/// The subject model: weights, configuration, and tokenizer.
#[derive(Clone, Debug)]
pub struct TransformerModel<R: Real> {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: ModelParams<R>,
}

const RMS_EPS: f64 = 1e-5;

impl<R: Real> TransformerModel<R> {
    /// Random initialization: normal(0, 0.02) weights, unit norm gains.
    /// Identical seeds produce identical weights.
    pub fn new_random(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_len() != config.vocab_size {
            return Err(Error::Invalid(format!(
                "tokenizer has {} forms but config expects vocab_size {}",
                tokenizer.vocab_len(),
                config.vocab_size
            )));
        }
        let mut rng = seeds::rng(seed, "model-init", 0);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut sample = |shape: Vec<usize>| -> Tensor<R> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| R::from_f64_lossy(normal.sample(&mut rng))).collect();
            Tensor::from_data(shape, data).expect("shape/data agree")
        };
        let (d, f, v) = (config.d_model, config.d_ffn, config.vocab_size);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::from_data(vec![d], vec![R::one(); d]).unwrap(),
                wq: sample(vec![d, d]),
                wk: sample(vec![d, d]),
                wv: sample(vec![d, d]),
                wo: sample(vec![d, d]),
                ffn_norm: Tensor::from_data(vec![d], vec![R::one(); d]).unwrap(),
                w1: sample(vec![d, f]),
                w2: match config.ffn_variant {
                    FfnVariant::Classic => sample(vec![f, d]),
                    FfnVariant::Gated => sample(vec![d, f]),
                },
                w3: match config.ffn_variant {
                    FfnVariant::Classic => None,
                    FfnVariant::Gated => Some(sample(vec![f, d])),
                },
            })
            .collect();
        let params = ModelParams {
            tok_emb: sample(vec![v, d]),
            pos_emb: sample(vec![config.max_seq, d]),
            layers,
            final_norm: Tensor::from_data(vec![d], vec![R::one(); d]).unwrap(),
            head: sample(vec![d, v]),
        };
        Ok(TransformerModel { config, tokenizer, params })
    }

    /// Assemble from parts, validating geometry.
    pub fn from_parts(
        config: ModelConfig,
        tokenizer: Tokenizer,
        params: ModelParams<R>,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_len() != config.vocab_size {
            return Err(Error::Invalid("tokenizer size does not match config".into()));
        }
        let model = TransformerModel { config, tokenizer, params };
        for (name, t) in model.named_tensors() {
            let expected = model.expected_shape(&name)?;
            if t.shape() != expected.as_slice() {
                return Err(Error::Invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ModelParams<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<R> {
        &mut self.params
    }

    /// Canonical tensor naming, the order used by the container format and
    /// by the training optimizer state.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec![String::from("tok_emb"), String::from("pos_emb")];
        for i in 0..config.n_layers {
            names.push(format!("layers.{i}.attn_norm"));
            names.push(format!("layers.{i}.wq"));
            names.push(format!("layers.{i}.wk"));
            names.push(format!("layers.{i}.wv"));
            names.push(format!("layers.{i}.wo"));
            names.push(format!("layers.{i}.ffn_norm"));
            names.push(format!("layers.{i}.ffn.w1"));
            names.push(format!("layers.{i}.ffn.w2"));
            if config.ffn_variant == FfnVariant::Gated {
                names.push(format!("layers.{i}.ffn.w3"));
            }
        }
        names.push(String::from("final_norm"));
        names.push(String::from("head"));
        names
    }

    fn expected_shape(&self, name: &str) -> Result<Vec<usize>> {
        let (d, f, v) = (self.config.d_model, self.config.d_ffn, self.config.vocab_size);
        let shape = match name {
            "tok_emb" => vec![v, d],
            "pos_emb" => vec![self.config.max_seq, d],
            "final_norm" => vec![d],
            "head" => vec![d, v],
            _ => {
                let suffix = name.split('.').skip(2).collect::<Vec<_>>().join(".");
                match suffix.as_str() {
                    "attn_norm" | "ffn_norm" => vec![d],
                    "wq" | "wk" | "wv" | "wo" => vec![d, d],
                    "ffn.w1" => vec![d, f],
                    "ffn.w2" => match self.config.ffn_variant {
                        FfnVariant::Classic => vec![f, d],
                        FfnVariant::Gated => vec![d, f],
                    },
                    "ffn.w3" => vec![f, d],
                    _ => return Err(Error::Invalid(format!("unknown tensor name {name}"))),
                }
            }
        };
        Ok(shape)
    }

    /// Tensors paired with their canonical names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out: Vec<(String, &Tensor<R>)> = vec![
            ("tok_emb".into(), &self.params.tok_emb),
            ("pos_emb".into(), &self.params.pos_emb),
        ];
        for (i, l) in self.params.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w1"), &l.w1));
            out.push((format!("layers.{i}.ffn.w2"), &l.w2));
            if let Some(w3) = &l.w3 {
                out.push((format!("layers.{i}.ffn.w3"), w3));
            }
        }
        out.push(("final_norm".into(), &self.params.final_norm));
        out.push(("head".into(), &self.params.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let mut out: Vec<(String, &mut Tensor<R>)> = vec![
            ("tok_emb".into(), &mut self.params.tok_emb),
            ("pos_emb".into(), &mut self.params.pos_emb),
        ];
        for (i, l) in self.params.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w1"), &mut l.w1));
            out.push((format!("layers.{i}.ffn.w2"), &mut l.w2));
            if let Some(w3) = &mut l.w3 {
                out.push((format!("layers.{i}.ffn.w3"), w3));
            }
        }
        out.push(("final_norm".into(), &mut self.params.final_norm));
        out.push(("head".into(), &mut self.params.head));
        out
    }

    /// Elementwise precision change (f64 verification twin, f32 storage).
    pub fn cast<T: Real>(&self) -> TransformerModel<T> {
        TransformerModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: ModelParams {
                tok_emb: self.params.tok_emb.cast(),
                pos_emb: self.params.pos_emb.cast(),
                layers: self
                    .params
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        attn_norm: l.attn_norm.cast(),
                        wq: l.wq.cast(),
                        wk: l.wk.cast(),
                        wv: l.wv.cast(),
                        wo: l.wo.cast(),
                        ffn_norm: l.ffn_norm.cast(),
                        w1: l.w1.cast(),
                        w2: l.w2.cast(),
                        w3: l.w3.as_ref().map(Tensor::cast),
                    })
                    .collect(),
                final_norm: self.params.final_norm.cast(),
                head: self.params.head.cast(),
            },
        }
    }

    /// Push all weights onto a tape as leaves. With `trainable` the leaves
    /// become differentiation targets.
    pub fn stage(&self, tape: &mut Tape<R>) -> StagedModel {
        self.stage_inner(tape, false)
    }

    pub fn stage_trainable(&self, tape: &mut Tape<R>) -> StagedModel {
        self.stage_inner(tape, true)
    }

    fn stage_inner(&self, tape: &mut Tape<R>, trainable: bool) -> StagedModel {
        let mut put = |t: &Tensor<R>| {
            let mut t = t.clone();
            if trainable {
                t = t.with_grad();
            }
            tape.leaf(t)
        };
        StagedModel {
            tok_emb: put(&self.params.tok_emb),
            pos_emb: put(&self.params.pos_emb),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| StagedLayer {
                    attn_norm: put(&l.attn_norm),
                    wq: put(&l.wq),
                    wk: put(&l.wk),
                    wv: put(&l.wv),
                    wo: put(&l.wo),
                    ffn_norm: put(&l.ffn_norm),
                    w1: put(&l.w1),
                    w2: put(&l.w2),
                    w3: l.w3.as_ref().map(&mut put),
                })
                .collect(),
            final_norm: put(&self.params.final_norm),
            head: put(&self.params.head),
        }
    }

    /// Causal forward over one token sequence, returning `[seq, vocab]`
    /// logits. Optional injection adds deltas to layer neuron vectors at one
    /// position; optional recording captures FFN inputs and pre-injection
    /// neuron vectors per layer. With no hooks this is a pure function of
    /// the weights and tokens.
    pub fn forward(
        &self,
        tokens: &[u32],
        inject: Option<&InjectionSpec>,
        record: Option<&mut ActivationRecord<R>>,
    ) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let plan = match inject {
            Some(spec) => spec.to_plan(&mut tape)?,
            None => Vec::new(),
        };
        let logits = forward_staged(&mut tape, &staged, &self.config, tokens, &plan, record)?;
        Ok(tape.value(logits).clone())
    }
}

/// Weight leaf ids on a tape, mirroring [`ModelParams`].
pub struct StagedLayer {
    pub attn_norm: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ffn_norm: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub w3: Option<NodeId>,
}

pub struct StagedModel {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<StagedLayer>,
    pub final_norm: NodeId,
    pub head: NodeId,
}

impl StagedModel {
    /// Leaf ids in canonical tensor order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.w2]);
            if let Some(w3) = l.w3 {
                ids.push(w3);
            }
        }
        ids.push(self.final_norm);
        ids.push(self.head);
        ids
    }
}

/// One additive injection site: delta values aligned to sorted neuron
/// indices of one layer, applied at one token position.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionEntry {
    pub layer: usize,
    pub position: usize,
    pub neuron_indices: Vec<usize>,
    pub deltas: Vec<f32>,
}

/// Concrete injection values for a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectionSpec {
    pub entries: Vec<InjectionEntry>,
}

impl InjectionSpec {
    pub fn new(entries: Vec<InjectionEntry>) -> Result<Self> {
        for e in &entries {
            if e.neuron_indices.len() != e.deltas.len() {
                return Err(Error::Invalid(format!(
                    "injection at layer {} has {} indices but {} deltas",
                    e.layer,
                    e.neuron_indices.len(),
                    e.deltas.len()
                )));
            }
            if !e.neuron_indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Invalid(format!(
                    "injection indices at layer {} must be sorted and unique",
                    e.layer
                )));
            }
        }
        Ok(InjectionSpec { entries })
    }

    fn to_plan<R: Real>(&self, tape: &mut Tape<R>) -> Result<Vec<PlanEntry>> {
        Ok(self
            .entries
            .iter()
            .map(|e| {
                let deltas: Vec<R> = e.deltas.iter().map(|&d| R::from_f32_lossy(d)).collect();
                PlanEntry {
                    layer: e.layer,
                    row: e.position,
                    cols: e.neuron_indices.clone(),
                    delta: tape.leaf(Tensor::vector(deltas)),
                }
            })
            .collect())
    }
}

/// Tape-level injection: the delta is a node, so it can require gradients.
#[derive(Clone, Debug)]
pub struct PlanEntry {
    pub layer: usize,
    pub row: usize,
    pub cols: Vec<usize>,
    pub delta: NodeId,
}

/// Per-layer activation snapshots from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActivationRecord<R: Real> {
    /// Normalized FFN inputs per layer, `[seq, d_model]`.
    pub ffn_inputs: Vec<Tensor<R>>,
    /// Post-activation neuron vectors per layer before injection, `[seq, d_ffn]`.
    pub neurons: Vec<Tensor<R>>,
}

impl<R: Real> ActivationRecord<R> {
    pub fn new() -> Self {
        ActivationRecord { ffn_inputs: Vec::new(), neurons: Vec::new() }
    }
}

/// Causal decoder forward over staged weights. See
/// [`TransformerModel::forward`] for hook semantics.
pub fn forward_staged<R: Real>(
    tape: &mut Tape<R>,
    staged: &StagedModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    inject: &[PlanEntry],
    mut record: Option<&mut ActivationRecord<R>>,
) -> Result<NodeId> {
    let seq = tokens.len();
    if seq == 0 {
        return Err(Error::Invalid("forward needs at least one token".into()));
    }
    if seq > cfg.max_seq {
        return Err(Error::Invalid(format!("sequence length {seq} exceeds max_seq {}", cfg.max_seq)));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!("token id {t} outside vocabulary")));
        }
    }
    for e in inject {
        if e.layer >= cfg.n_layers {
            return Err(Error::Invalid(format!("injection layer {} out of range", e.layer)));
        }
        if e.row >= seq {
            return Err(Error::Invalid(format!(
                "injection position {} outside sequence of length {seq}",
                e.row
            )));
        }
        if e.cols.iter().any(|&c| c >= cfg.d_ffn) {
            return Err(Error::Invalid(format!(
                "injection neuron index out of range for d_ffn {}",
                cfg.d_ffn
            )));
        }
    }
    if let Some(rec) = record.as_deref_mut() {
        rec.ffn_inputs.clear();
        rec.neurons.clear();
    }

    let positions: Vec<u32> = (0..seq as u32).collect();
    let tok = tape.gather(staged.tok_emb, tokens)?;
    let pos = tape.gather(staged.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let d_head = cfg.d_model / cfg.n_heads;
    let scale = R::from_f64_lossy(1.0 / (d_head as f64).sqrt());
    let eps = R::from_f64_lossy(RMS_EPS);

    for (li, layer) in staged.layers.iter().enumerate() {
        // attention
        let a_in = tape.rmsnorm(x, layer.attn_norm, eps)?;
        let q = tape.matmul(a_in, layer.wq)?;
        let k = tape.matmul(a_in, layer.wk)?;
        let v = tape.matmul(a_in, layer.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            let vh = tape.slice_cols(v, h * d_head, d_head)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.causal_softmax(scaled)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(ctx, layer.wo)?;
        x = tape.add(x, attn_out)?;

        // feed-forward
        let f_in = tape.rmsnorm(x, layer.ffn_norm, eps)?;
        let pre = tape.matmul(f_in, layer.w1)?;
        let mut neurons = tape.activation(pre, cfg.act_fn);
        if let Some(rec) = record.as_deref_mut() {
            rec.ffn_inputs.push(tape.value(f_in).clone());
            rec.neurons.push(tape.value(neurons).clone());
        }
        for e in inject.iter().filter(|e| e.layer == li) {
            neurons = tape.inject_row(neurons, e.delta, e.row, &e.cols)?;
        }
        let ffn_out = match cfg.ffn_variant {
            FfnVariant::Classic => tape.matmul(neurons, layer.w2)?,
            FfnVariant::Gated => {
                let up = tape.matmul(f_in, layer.w2)?;
                let gated = tape.mul(neurons, up)?;
                let w3 = layer.w3.ok_or(Error::Invalid("gated variant requires w3".into()))?;
                tape.matmul(gated, w3)?
            }
        };
        x = tape.add(x, ffn_out)?;
    }

    let xf = tape.rmsnorm(x, staged.final_norm, eps)?;
    tape.matmul(xf, staged.head)
}

/// One FFN layer applied to a single hidden vector, returning the layer
/// output and the neuron vector `act(h·W1)`.
pub fn ffn_forward<R: Real>(
    variant: FfnVariant,
    act: ActKind,
    h: &[R],
    w1: &Tensor<R>,
    w2: &Tensor<R>,
    w3: Option<&Tensor<R>>,
) -> Result<(Vec<R>, Vec<R>)> {
    use crate::tensor::kernels;
    let d = h.len();
    if w1.rows() != d {
        return Err(Error::Shape {
            op: "ffn_forward",
            detail: format!("w1 rows {} != hidden size {d}", w1.rows()),
        });
    }
    let f = w1.cols();
    let pre = kernels::matmul(h, 1, d, w1.data(), f);
    let neurons: Vec<R> = pre.iter().map(|&x| kernels::act_forward(act, x)).collect();
    let out = match variant {
        FfnVariant::Classic => {
            if w2.rows() != f || w2.cols() != d {
                return Err(Error::Shape {
                    op: "ffn_forward",
                    detail: format!("classic w2 must be [{f},{d}], got {:?}", w2.shape()),
                });
            }
            kernels::matmul(&neurons, 1, f, w2.data(), d)
        }
        FfnVariant::Gated => {
            let w3 = w3.ok_or(Error::Invalid("gated variant requires w3".into()))?;
            if w2.rows() != d || w2.cols() != f || w3.rows() != f || w3.cols() != d {
                return Err(Error::Shape {
                    op: "ffn_forward",
                    detail: format!(
                        "gated needs w2 [{d},{f}] and w3 [{f},{d}], got {:?} and {:?}",
                        w2.shape(),
                        w3.shape()
                    ),
                });
            }
            let up = kernels::matmul(h, 1, d, w2.data(), f);
            let gated: Vec<R> = neurons.iter().zip(&up).map(|(&n, &u)| n * u).collect();
            kernels::matmul(&gated, 1, f, w3.data(), d)
        }
    };
    Ok((out, neurons))
}

/// Greedy argmax with ties resolved toward the lowest index.
pub fn argmax<R: Real>(row: &[R]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Deterministic greedy decoding: appends up to `max_new` tokens, stopping
/// at `<eos>`. Returns only the newly generated ids.
pub fn generate_greedy<R: Real>(
    model: &TransformerModel<R>,
    prompt: &[u32],
    inject: Option<&InjectionSpec>,
    max_new: usize,
) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= model.config().max_seq {
            break;
        }
        let logits = model.forward(&seq, inject, None)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == tokenizer::EOS {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Sample a random prefix from the unedited model: autoregressive from
/// `<bos>` at temperature 1.0, deterministic per (model, seed). The `<bos>`
/// marker itself is not part of the returned prefix.
pub fn sample_prefix<R: Real>(
    model: &TransformerModel<R>,
    length: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut rng = seeds::rng(seed, "sample-prefix", 0);
    let mut seq = vec![tokenizer::BOS];
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        if seq.len() >= model.config().max_seq {
            break;
        }
        let logits = model.forward(&seq, None, None)?;
        let row = logits.row(logits.rows() - 1);
        let probs = crate::tensor::kernels::row_softmax(row, 1, row.len(), false);
        let u: f64 = rng.random();
        let mut acc = 0.0f64;
        let mut pick = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p.to_f64_lossy();
            if u < acc {
                pick = i;
                break;
            }
        }
        seq.push(pick as u32);
        out.push(pick as u32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;

    fn tiny_tokenizer() -> Tokenizer {
        Tokenizer::from_corpus(["bade kuro limo", "vena sipo rato", "mofa gilo"])
    }

    fn tiny_model(variant: FfnVariant, act: ActKind, seed: u64) -> TransformerModel<f32> {
        let tok = tiny_tokenizer();
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ffn: 24,
            n_heads: 2,
            vocab_size: tok.vocab_len(),
            max_seq: 16,
            ffn_variant: variant,
            act_fn: act,
        };
        TransformerModel::new_random(config, tok, seed).unwrap()
    }

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn ffn_forward_classic_hand_case() {
        let w1 = Tensor::matrix(1, 1, vec![2.0f64]).unwrap();
        let w2 = Tensor::matrix(1, 1, vec![3.0f64]).unwrap();
        let (out, neurons) =
            ffn_forward(FfnVariant::Classic, ActKind::Relu, &[1.0], &w1, &w2, None).unwrap();
        assert_eq!(neurons, vec![2.0]);
        assert_eq!(out, vec![6.0]);
    }

    #[test]
    fn ffn_forward_gated_zero_up_projection() {
        let w1 = Tensor::matrix(1, 1, vec![5.0f64]).unwrap();
        let w2 = Tensor::matrix(1, 1, vec![0.0f64]).unwrap();
        let w3 = Tensor::matrix(1, 1, vec![7.0f64]).unwrap();
        let (out, _) =
            ffn_forward(FfnVariant::Gated, ActKind::Silu, &[3.0], &w1, &w2, Some(&w3)).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn ffn_forward_zero_hidden_gives_zero_neurons() {
        for act in [ActKind::Relu, ActKind::Silu] {
            let w1 = Tensor::matrix(3, 4, vec![0.5f64; 12]).unwrap();
            let w2 = Tensor::matrix(4, 3, vec![0.5f64; 12]).unwrap();
            let (_, neurons) =
                ffn_forward(FfnVariant::Classic, act, &[0.0, 0.0, 0.0], &w1, &w2, None).unwrap();
            assert_eq!(neurons, vec![0.0; 4]);
        }
    }

    #[test]
    fn gated_matches_classic_when_up_projection_is_unit() {
        // With an all-ones up matrix and an input that sums to one, the up
        // projection is the unit gate and W3 plays the classic W2 role.
        let d = 4;
        let f = 6;
        let m = tiny_model(FfnVariant::Classic, ActKind::Silu, 9);
        let _ = m; // geometry helper only
        let mut rng = crate::seeds::rng(9, "ffn-agree", 0);
        use rand::Rng;
        let mut h: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.1).collect();
        let sum: f64 = h.iter().sum();
        for v in &mut h {
            *v /= sum;
        }
        let w1_data: Vec<f64> = (0..d * f).map(|_| rng.random::<f64>() - 0.5).collect();
        let w23_data: Vec<f64> = (0..f * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let w1 = Tensor::matrix(d, f, w1_data).unwrap();
        let w2_classic = Tensor::matrix(f, d, w23_data.clone()).unwrap();
        let ones = Tensor::matrix(d, f, vec![1.0f64; d * f]).unwrap();
        let w3 = Tensor::matrix(f, d, w23_data).unwrap();
        let (classic, n1) =
            ffn_forward(FfnVariant::Classic, ActKind::Silu, &h, &w1, &w2_classic, None).unwrap();
        let (gated, n2) =
            ffn_forward(FfnVariant::Gated, ActKind::Silu, &h, &w1, &ones, Some(&w3)).unwrap();
        assert_eq!(n1, n2);
        for (a, b) in classic.iter().zip(&gated) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_injection_is_bit_identical() {
        for variant in [FfnVariant::Classic, FfnVariant::Gated] {
            let model = tiny_model(variant, ActKind::Silu, 3);
            let tokens = model.tokenizer().encode_prompt("bade kuro limo");
            let plain = model.forward(&tokens, None, None).unwrap();
            let spec = InjectionSpec::new(vec![InjectionEntry {
                layer: 1,
                position: 1,
                neuron_indices: vec![0, 5, 7],
                deltas: vec![0.0, 0.0, 0.0],
            }])
            .unwrap();
            let injected = model.forward(&tokens, Some(&spec), None).unwrap();
            assert_eq!(bits(&plain), bits(&injected));
        }
    }

    #[test]
    fn injection_respects_causality() {
        let model = tiny_model(FfnVariant::Gated, ActKind::Silu, 4);
        let tokens = model.tokenizer().encode_prompt("bade kuro limo rato");
        let pos = 2;
        let plain = model.forward(&tokens, None, None).unwrap();
        let spec = InjectionSpec::new(vec![InjectionEntry {
            layer: 0,
            position: pos,
            neuron_indices: vec![3],
            deltas: vec![3.0],
        }])
        .unwrap();
        let injected = model.forward(&tokens, Some(&spec), None).unwrap();
        let v = model.config().vocab_size;
        for p in 0..tokens.len() {
            let a = &bits(&plain)[p * v..(p + 1) * v];
            let b = &bits(&injected)[p * v..(p + 1) * v];
            if p < pos {
                assert_eq!(a, b, "position {p} before injection changed");
            }
        }
        let last = tokens.len() - 1;
        assert_ne!(
            &bits(&plain)[last * v..],
            &bits(&injected)[last * v..],
            "injection had no downstream effect"
        );
    }

    #[test]
    fn injection_out_of_range_errors() {
        let model = tiny_model(FfnVariant::Classic, ActKind::Relu, 5);
        let tokens = model.tokenizer().encode_prompt("bade");
        let spec = InjectionSpec::new(vec![InjectionEntry {
            layer: 0,
            position: 10,
            neuron_indices: vec![0],
            deltas: vec![1.0],
        }])
        .unwrap();
        assert!(model.forward(&tokens, Some(&spec), None).is_err());
        let spec = InjectionSpec::new(vec![InjectionEntry {
            layer: 0,
            position: 0,
            neuron_indices: vec![999],
            deltas: vec![1.0],
        }])
        .unwrap();
        assert!(model.forward(&tokens, Some(&spec), None).is_err());
    }

    #[test]
    fn record_shapes_match_contract() {
        let tok = tiny_tokenizer();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ffn: 12,
            n_heads: 2,
            vocab_size: tok.vocab_len(),
            max_seq: 8,
            ffn_variant: FfnVariant::Classic,
            act_fn: ActKind::Relu,
        };
        let model: TransformerModel<f32> = TransformerModel::new_random(config, tok, 1).unwrap();
        let mut rec = ActivationRecord::new();
        let tokens = [tokenizer::BOS, 4];
        model.forward(&tokens, None, Some(&mut rec)).unwrap();
        assert_eq!(rec.neurons.len(), 1);
        assert_eq!(rec.neurons[0].shape(), &[2, 12]);
        assert_eq!(rec.ffn_inputs[0].shape(), &[2, 8]);
    }

    #[test]
    fn recorded_neurons_match_independent_recompute() {
        let model = tiny_model(FfnVariant::Gated, ActKind::Silu, 8);
        let tokens = model.tokenizer().encode_prompt("vena sipo rato");
        let mut rec = ActivationRecord::new();
        model.forward(&tokens, None, Some(&mut rec)).unwrap();
        for (li, layer) in model.params().layers.iter().enumerate() {
            let f_in = &rec.ffn_inputs[li];
            let neurons = &rec.neurons[li];
            let (d, f) = (layer.w1.rows(), layer.w1.cols());
            for p in 0..tokens.len() {
                for j in 0..f {
                    // test-local dot product, independent of the kernels
                    let mut acc = 0.0f32;
                    for k in 0..d {
                        acc += f_in.row(p)[k] * layer.w1.data()[k * f + j];
                    }
                    let expect = kernels::act_forward(ActKind::Silu, acc);
                    assert_eq!(expect.to_bits(), neurons.row(p)[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn sample_prefix_is_deterministic() {
        let model = tiny_model(FfnVariant::Gated, ActKind::Silu, 11);
        assert!(sample_prefix(&model, 0, 0).unwrap().is_empty());
        let a = sample_prefix(&model, 5, 42).unwrap();
        let b = sample_prefix(&model, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let prefixes: Vec<Vec<u32>> =
            (0..4).map(|s| sample_prefix(&model, 5, s).unwrap()).collect();
        assert_eq!(prefixes.len(), 4);
        assert!(prefixes.iter().all(|p| p.len() == 5));
    }

    #[test]
    fn train_memorizes_single_fact() {
        let tok = tiny_tokenizer();
        let config = ModelConfig {
            n_layers: 2,
            d_model: 32,
            d_ffn: 48,
            n_heads: 2,
            vocab_size: tok.vocab_len(),
            max_seq: 8,
            ffn_variant: FfnVariant::Gated,
            act_fn: ActKind::Silu,
        };
        let mut model: TransformerModel<f32> = TransformerModel::new_random(config, tok, 2).unwrap();
        let mut seq = model.tokenizer().encode_prompt("bade kuro limo");
        seq.push(tokenizer::EOS);
        let corpus = vec![seq];
        let report = train_toy(
            &mut model,
            &corpus,
            &TrainCfg { lr: 3e-3, steps: 150, batch: 1, seed: 0 },
        )
        .unwrap();
        assert!(report.losses.last().unwrap() < &0.05, "loss {:?}", report.losses.last());
        let prompt = model.tokenizer().encode_prompt("bade kuro");
        let out = generate_greedy(&model, &prompt, None, 4).unwrap();
        assert_eq!(model.tokenizer().decode(&out), "limo");
    }

    #[test]
    fn train_zero_steps_keeps_initialization() {
        let mut a = tiny_model(FfnVariant::Classic, ActKind::Relu, 6);
        let b = a.clone();
        let corpus = vec![a.tokenizer().encode_prompt("bade kuro")];
        train_toy(&mut a, &corpus, &TrainCfg { steps: 0, ..TrainCfg::default() }).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(bits(ta), bits(&tb));
        }
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let cfg = TrainCfg { lr: 1e-3, steps: 20, batch: 2, seed: 7 };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut model = tiny_model(FfnVariant::Gated, ActKind::Silu, 6);
            let corpus: Vec<Vec<u32>> = ["bade kuro limo", "vena sipo rato"]
                .iter()
                .map(|s| {
                    let mut t = model.tokenizer().encode_prompt(s);
                    t.push(tokenizer::EOS);
                    t
                })
                .collect();
            train_toy(&mut model, &corpus, &cfg).unwrap();
            runs.push(model);
        }
        for ((_, ta), (_, tb)) in runs[0].named_tensors().iter().zip(runs[1].named_tensors()) {
            assert_eq!(bits(ta), bits(&tb));
        }
    }
}
