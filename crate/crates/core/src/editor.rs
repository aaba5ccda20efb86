//! Optimize one shared additive patch over the located neurons.
//!
//! A patch is a per-layer delta vector added to the post-activation neuron
//! values at the last token of the subject. One delta set is optimized
//! jointly for every language of the group: the target term is the mean
//! answer NLL over languages and random prefixes, and the preservation term
//! is the mean KL between the original and patched next-token distributions
//! on a per-language probe prompt. Model weights stay frozen throughout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as index_sample;

use crate::data::EditGroup;
use crate::error::{Error, Result};
use crate::locator::{
    count_activations, intersect_languages, select_factual_neurons, LafnSet, LocateCfg, NeuronSet,
};
use crate::model::{
    forward_staged, sample_prefix, ActivationRecord, PlanEntry, StagedModel, TransformerModel,
};
use crate::seeds;
use crate::tensor::{Adam, AdamCfg, NodeId, Real, Tape, Tensor};

/// Editing hyperparameters; the defaults follow the reference setup
/// (λ₁ = 1, λ₂ = 0.0625, four random prefixes of five tokens per language).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EditorConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Random prefixes per language (M).
    pub prefix_count: usize,
    pub prefix_len: usize,
    pub optimizer: AdamCfg,
    pub max_steps: usize,
    /// Early stop once the per-answer-token target NLL drops below this.
    pub target_nll_stop: f64,
    /// Preservation-probe template per language; `{s}` is the subject slot.
    /// A group's own probe string wins when present.
    pub probe_templates: BTreeMap<String, String>,
    /// Optional per-layer clamp: ‖Δ‖ ≤ factor · ‖unpatched neurons‖.
    pub max_delta_norm_factor: Option<f64>,
}

impl Default for EditorConfig {
    fn default() -> Self {
        EditorConfig {
            lambda1: 1.0,
            lambda2: 0.0625,
            prefix_count: 4,
            prefix_len: 5,
            optimizer: AdamCfg { lr: 0.1, ..AdamCfg::default() },
            max_steps: 50,
            target_nll_stop: 0.05,
            probe_templates: BTreeMap::new(),
            max_delta_norm_factor: None,
        }
    }
}

const DEFAULT_PROBE_TEMPLATE: &str = "{s} is a";

/// Per-step loss values recorded during optimization.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceStep {
    pub l_target: f64,
    pub l_kl: f64,
    pub l_mke: f64,
}

/// One edited layer: delta values aligned to sorted neuron indices.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchLayer {
    pub layer: usize,
    pub neuron_indices: Vec<usize>,
    pub deltas: Vec<f32>,
}

/// Optimized update values keyed by the group's subject set.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EditPatch {
    /// Language code → subject surface form (S_G).
    pub subjects: BTreeMap<String, String>,
    pub layers: Vec<PatchLayer>,
    pub trace: Vec<TraceStep>,
}

impl EditPatch {
    /// Injection spec applying this patch at one token position.
    pub fn to_injection(&self, position: usize) -> crate::model::InjectionSpec {
        crate::model::InjectionSpec {
            entries: self
                .layers
                .iter()
                .map(|l| crate::model::InjectionEntry {
                    layer: l.layer,
                    position,
                    neuron_indices: l.neuron_indices.clone(),
                    deltas: l.deltas.clone(),
                })
                .collect(),
        }
    }
}

/// Index of the last token of the last occurrence of `subject` within
/// `prompt`, both given as token id sequences.
pub fn resolve_subject_position(prompt: &[u32], subject: &[u32]) -> Result<usize> {
    if subject.is_empty() {
        return Err(Error::Invalid("subject tokenizes to nothing".into()));
    }
    if subject.len() > prompt.len() {
        return Err(Error::SubjectNotFound {
            subject: format!("{subject:?}"),
            prompt: format!("{prompt:?}"),
        });
    }
    let mut found = None;
    for start in 0..=prompt.len() - subject.len() {
        if &prompt[start..start + subject.len()] == subject {
            found = Some(start + subject.len() - 1);
        }
    }
    found.ok_or_else(|| Error::SubjectNotFound {
        subject: format!("{subject:?}"),
        prompt: format!("{prompt:?}"),
    })
}

/// A prompt prepared for the target loss: full token sequence with the
/// injection row and the answer span.
struct PreparedPrompt {
    tokens: Vec<u32>,
    subject_pos: usize,
    answer_start: usize,
    answer: Vec<u32>,
}

struct PreparedProbe {
    tokens: Vec<u32>,
    subject_pos: usize,
}

/// Everything fixed across optimization steps of one group.
pub struct EditContext {
    prompts: Vec<PreparedPrompt>,
    probes: Vec<PreparedProbe>,
    /// (layer, neuron indices) with at least one neuron.
    layers: Vec<(usize, Vec<usize>)>,
    total_answer_tokens: usize,
    n_langs: usize,
    prefix_count: usize,
    subjects: BTreeMap<String, String>,
    /// Per-layer reference norms of the unpatched neuron values at the
    /// subject position (max over languages), for the optional clamp.
    reference_norms: Vec<f64>,
}

impl EditContext {
    pub fn delta_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|(_, ix)| ix.len()).collect()
    }
}

/// Precompute prompts, probes, prefixes, and injection geometry for a group.
pub fn build_context<R: Real>(
    model: &TransformerModel<R>,
    group: &EditGroup,
    langs: &[String],
    lafns: &LafnSet,
    cfg: &EditorConfig,
    seed: u64,
) -> Result<EditContext> {
    if langs.is_empty() {
        return Err(Error::Invalid("editing needs at least one language".into()));
    }
    if cfg.prefix_count == 0 {
        return Err(Error::Invalid("prefix count M must be at least 1".into()));
    }
    let layers: Vec<(usize, Vec<usize>)> =
        lafns.occupied_layers().into_iter().map(|(i, ix)| (i, ix.to_vec())).collect();
    if layers.is_empty() {
        return Err(Error::EmptyLafnSet);
    }
    let tok = model.tokenizer();
    let mut prompts = Vec::new();
    let mut probes = Vec::new();
    let mut subjects = BTreeMap::new();
    let mut total_answer_tokens = 0usize;
    let mut reference_norms = vec![0.0f64; layers.len()];

    for (li, lang) in langs.iter().enumerate() {
        let entry = group.entry(lang)?;
        subjects.insert(lang.clone(), entry.subject.clone());
        let subject_toks = tok.encode(&entry.subject);
        let prompt_toks = tok.encode(&entry.prompt);
        let answer = tok.encode(&entry.target_new);
        if answer.is_empty() {
            return Err(Error::Invalid(format!(
                "target answer for language {lang} tokenizes to nothing"
            )));
        }
        let rel_pos = resolve_subject_position(&prompt_toks, &subject_toks)?;

        // reference norms from the unprefixed prompt
        let mut rec = ActivationRecord::new();
        let mut plain = vec![crate::model::tokenizer::BOS];
        plain.extend_from_slice(&prompt_toks);
        model.forward(&plain, None, Some(&mut rec))?;
        for (k, (layer, ix)) in layers.iter().enumerate() {
            let row = rec.neurons[*layer].row(1 + rel_pos);
            let mut acc = 0.0f64;
            for &j in ix {
                let v = row[j].to_f64_lossy();
                acc += v * v;
            }
            reference_norms[k] = reference_norms[k].max(acc.sqrt());
        }

        for m in 0..cfg.prefix_count {
            let prefix_seed = seeds::derive(seed, "prefix", (li * cfg.prefix_count + m) as u64);
            let prefix = sample_prefix(model, cfg.prefix_len, prefix_seed)?;
            let mut tokens = vec![crate::model::tokenizer::BOS];
            tokens.extend_from_slice(&prefix);
            let prompt_offset = tokens.len();
            tokens.extend_from_slice(&prompt_toks);
            let answer_start = tokens.len();
            tokens.extend_from_slice(&answer);
            if tokens.len() > model.config().max_seq {
                return Err(Error::Invalid(format!(
                    "prefixed prompt of {} tokens exceeds max_seq {}",
                    tokens.len(),
                    model.config().max_seq
                )));
            }
            total_answer_tokens += answer.len();
            prompts.push(PreparedPrompt {
                tokens,
                subject_pos: prompt_offset + rel_pos,
                answer_start,
                answer: answer.clone(),
            });
        }

        let probe_text = match &entry.probe {
            Some(p) => p.clone(),
            None => cfg
                .probe_templates
                .get(lang)
                .map(String::as_str)
                .unwrap_or(DEFAULT_PROBE_TEMPLATE)
                .replace("{s}", &entry.subject),
        };
        let probe_toks = tok.encode(&probe_text);
        let probe_pos = resolve_subject_position(&probe_toks, &subject_toks)?;
        let mut tokens = vec![crate::model::tokenizer::BOS];
        tokens.extend_from_slice(&probe_toks);
        probes.push(PreparedProbe { tokens, subject_pos: 1 + probe_pos });
    }

    Ok(EditContext {
        prompts,
        probes,
        layers,
        total_answer_tokens,
        n_langs: langs.len(),
        prefix_count: cfg.prefix_count,
        subjects,
        reference_norms,
    })
}

/// Loss node handles from one forward build.
pub struct LossNodes {
    pub target: NodeId,
    pub kl: NodeId,
    pub mke: NodeId,
    pub answer_tokens: usize,
}

/// KL(P_o ‖ P_e) of the next-token distributions given two `[1, vocab]`
/// logit rows. Computed as a single fused sum so a zero patch yields an
/// exact zero.
pub fn kl_from_logit_rows<R: Real>(
    tape: &mut Tape<R>,
    row_original: NodeId,
    row_edited: NodeId,
) -> Result<NodeId> {
    let lp_o = tape.log_softmax(row_original)?;
    let p_o = tape.softmax(row_original)?;
    let lp_e = tape.log_softmax(row_edited)?;
    let neg_lp_e = tape.scale(lp_e, R::from_f64_lossy(-1.0));
    let diff = tape.add(lp_o, neg_lp_e)?;
    let weighted = tape.mul(p_o, diff)?;
    Ok(tape.sum_all(weighted))
}

/// Build L_target, L_kl, and the combined objective on `tape` with the given
/// per-layer delta leaves injected at each prompt's subject position.
pub fn build_mke_loss<R: Real>(
    tape: &mut Tape<R>,
    staged: &StagedModel,
    model: &TransformerModel<R>,
    ctx: &EditContext,
    cfg: &EditorConfig,
    delta_ids: &[NodeId],
) -> Result<LossNodes> {
    if delta_ids.len() != ctx.layers.len() {
        return Err(Error::Invalid("delta leaf count does not match edit layers".into()));
    }
    let plan_for = |pos: usize| -> Vec<PlanEntry> {
        ctx.layers
            .iter()
            .zip(delta_ids)
            .map(|((layer, cols), &delta)| PlanEntry {
                layer: *layer,
                row: pos,
                cols: cols.clone(),
                delta,
            })
            .collect()
    };

    // L_target: mean over languages and prefixes of the summed answer NLL.
    let mut nll_nodes = Vec::with_capacity(ctx.prompts.len());
    for p in &ctx.prompts {
        let plan = plan_for(p.subject_pos);
        let logits = forward_staged(tape, staged, model.config(), &p.tokens, &plan, None)?;
        let rows = tape.slice_rows(logits, p.answer_start - 1, p.answer.len())?;
        let lp = tape.log_softmax(rows)?;
        let coords: Vec<(usize, usize)> =
            p.answer.iter().enumerate().map(|(k, &t)| (k, t as usize)).collect();
        let picked = tape.select_entries(lp, &coords)?;
        nll_nodes.push(tape.sum_all(picked));
    }
    let mut target = nll_nodes[0];
    for &n in &nll_nodes[1..] {
        target = tape.add(target, n)?;
    }
    let norm = -1.0 / (ctx.n_langs * ctx.prefix_count) as f64;
    let target = tape.scale(target, R::from_f64_lossy(norm));

    // L_kl: mean over languages of the probe next-token KL.
    let mut kl_nodes = Vec::with_capacity(ctx.probes.len());
    for probe in &ctx.probes {
        let last = probe.tokens.len() - 1;
        let logits_o = forward_staged(tape, staged, model.config(), &probe.tokens, &[], None)?;
        let plan = plan_for(probe.subject_pos);
        let logits_e = forward_staged(tape, staged, model.config(), &probe.tokens, &plan, None)?;
        let row_o = tape.slice_rows(logits_o, last, 1)?;
        let row_e = tape.slice_rows(logits_e, last, 1)?;
        kl_nodes.push(kl_from_logit_rows(tape, row_o, row_e)?);
    }
    let mut kl = kl_nodes[0];
    for &n in &kl_nodes[1..] {
        kl = tape.add(kl, n)?;
    }
    let kl = tape.scale(kl, R::from_f64_lossy(1.0 / ctx.n_langs as f64));

    let t_part = tape.scale(target, R::from_f64_lossy(cfg.lambda1));
    let k_part = tape.scale(kl, R::from_f64_lossy(cfg.lambda2));
    let mke = tape.add(t_part, k_part)?;
    Ok(LossNodes { target, kl, mke, answer_tokens: ctx.total_answer_tokens })
}

/// Optimize the shared delta values for one group. The model is frozen;
/// only the deltas move. Deltas start at zero, step under Adam, and stop
/// early once the per-token answer NLL falls below the configured bound.
pub fn optimize_patch<R: Real>(
    model: &TransformerModel<R>,
    group: &EditGroup,
    langs: &[String],
    lafns: &LafnSet,
    cfg: &EditorConfig,
    seed: u64,
) -> Result<EditPatch> {
    if cfg.max_steps == 0 {
        return Err(Error::Invalid("max_steps must be at least 1".into()));
    }
    let ctx = build_context(model, group, langs, lafns, cfg, seed)?;
    let sizes = ctx.delta_sizes();
    let mut deltas: Vec<Tensor<R>> =
        sizes.iter().map(|&s| Tensor::zeros(vec![s])).collect();
    let mut adam: Adam<R> = Adam::new(cfg.optimizer, &sizes);
    let mut trace = Vec::new();

    for step in 0..cfg.max_steps {
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let delta_ids: Vec<NodeId> =
            deltas.iter().map(|d| tape.leaf(d.clone().with_grad())).collect();
        let losses = build_mke_loss(&mut tape, &staged, model, &ctx, cfg, &delta_ids)?;
        let l_target = tape.value(losses.target).item()?.to_f64_lossy();
        let l_kl = tape.value(losses.kl).item()?.to_f64_lossy();
        let l_mke = tape.value(losses.mke).item()?.to_f64_lossy();
        if !l_mke.is_finite() {
            return Err(Error::NonFinite { context: "patch optimization".into(), step: Some(step) });
        }
        trace.push(TraceStep { l_target, l_kl, l_mke });

        // Summed NLL normalized per answer token, for the stop rule.
        let per_token =
            l_target * (ctx.n_langs * ctx.prefix_count) as f64 / losses.answer_tokens as f64;
        if per_token < cfg.target_nll_stop {
            break;
        }

        let grads = tape.backward(losses.mke)?;
        let grad_tensors: Vec<Tensor<R>> = delta_ids.iter().map(|&id| grads.get(id)).collect();
        let mut refs: Vec<&mut Tensor<R>> = deltas.iter_mut().collect();
        adam.step(&mut refs, &grad_tensors)?;

        if let Some(factor) = cfg.max_delta_norm_factor {
            for (d, &reference) in deltas.iter_mut().zip(&ctx.reference_norms) {
                let bound = factor * reference;
                let norm = d.norm().to_f64_lossy();
                if bound > 0.0 && norm > bound {
                    let scale = R::from_f64_lossy(bound / norm);
                    for v in d.data_mut() {
                        *v = *v * scale;
                    }
                }
            }
        }
    }

    Ok(EditPatch {
        subjects: ctx.subjects,
        layers: ctx
            .layers
            .iter()
            .zip(&deltas)
            .map(|((layer, ix), d)| PatchLayer {
                layer: *layer,
                neuron_indices: ix.clone(),
                deltas: d.data().iter().map(|v| v.to_f32_lossy()).collect(),
            })
            .collect(),
        trace,
    })
}

/// Alternative locating strategies used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocateVariant {
    /// Paraphrase-based locating (the method itself).
    Lafn,
    /// Locate from the single edit prompt per language, no paraphrases.
    NoPgs,
    /// Every neuron of every edit layer.
    All,
    /// Uniformly sampled indices matching the located per-layer sizes.
    Random,
}

/// Produce the neuron set for a locating-strategy variant. `base` is the
/// paraphrase-located set; `Random` draws size-matched samples from it and
/// `All` ignores it.
pub fn ablation_variant<R: Real>(
    model: &TransformerModel<R>,
    group: &EditGroup,
    langs: &[String],
    base: &LafnSet,
    locate_cfg: &LocateCfg,
    variant: LocateVariant,
    seed: u64,
) -> Result<LafnSet> {
    let d_ffn = model.config().d_ffn;
    let n_layers = model.config().n_layers;
    match variant {
        LocateVariant::Lafn => Ok(base.clone()),
        LocateVariant::NoPgs => {
            let mut sets = Vec::new();
            for lang in langs {
                let entry = group.entry(lang)?;
                let corpus = vec![model.tokenizer().encode_prompt(&entry.prompt)];
                let counts = count_activations(model, &corpus, lang)?;
                sets.push(select_factual_neurons(&counts, locate_cfg.beta)?);
            }
            Ok(intersect_languages(&sets)?.restricted_to(&locate_cfg.edit_layers))
        }
        LocateVariant::All => {
            let layers = (0..n_layers)
                .map(|i| {
                    if locate_cfg.edit_layers.contains(&i) {
                        (0..d_ffn).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            Ok(LafnSet {
                set: NeuronSet {
                    layers,
                    provenance: "all".to_string(),
                    beta: locate_cfg.beta,
                    corpus_label: "all".to_string(),
                },
                languages: langs.to_vec(),
            })
        }
        LocateVariant::Random => {
            let mut rng = seeds::rng(seed, "random-variant", 0);
            let layers = base
                .set
                .layers
                .iter()
                .map(|ix| {
                    let mut picked: Vec<usize> =
                        index_sample(&mut rng, d_ffn, ix.len()).into_iter().collect();
                    picked.sort_unstable();
                    picked
                })
                .collect();
            Ok(LafnSet {
                set: NeuronSet {
                    layers,
                    provenance: "random".to_string(),
                    beta: base.set.beta,
                    corpus_label: "random".to_string(),
                },
                languages: langs.to_vec(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_world;
    use crate::data::WorldCfg;
    use crate::locator::locate_for_group;
    use crate::model::{
        generate_greedy, train_toy, FfnVariant, ModelConfig, Tokenizer, TrainCfg,
        TransformerModel,
    };
    use crate::tensor::ActKind;

    #[test]
    fn subject_position_basics() {
        assert_eq!(resolve_subject_position(&[10, 11, 12], &[11]).unwrap(), 1);
        assert_eq!(resolve_subject_position(&[11, 30, 11, 31], &[11]).unwrap(), 2);
        assert_eq!(resolve_subject_position(&[10, 20, 21], &[20, 21]).unwrap(), 2);
        assert!(resolve_subject_position(&[1, 2], &[9]).is_err());
        assert!(resolve_subject_position(&[1, 2], &[]).is_err());
    }

    fn small_world() -> WorldCfg {
        WorldCfg {
            n_entities: 10,
            n_relations: 3,
            n_facts: 20,
            n_edit_groups: 3,
            n_rephrases: 2,
            n_paraphrases: 8,
            n_train_variants: 1,
            seed: 13,
        }
    }

    fn trained_setup() -> (TransformerModel<f32>, Vec<crate::data::EditGroup>) {
        let (world, corpora, groups) = gen_synthetic_world(&small_world()).unwrap();
        let _ = world;
        let lines: Vec<&str> =
            corpora.iter().flat_map(|c| c.iter().map(String::as_str)).collect();
        let tok = Tokenizer::from_corpus(lines.iter().copied());
        let config = ModelConfig {
            n_layers: 2,
            d_model: 32,
            d_ffn: 64,
            n_heads: 2,
            vocab_size: tok.vocab_len(),
            max_seq: 24,
            ffn_variant: FfnVariant::Gated,
            act_fn: ActKind::Silu,
        };
        let mut model = TransformerModel::new_random(config, tok, 3).unwrap();
        let corpus: Vec<Vec<u32>> = lines
            .iter()
            .map(|l| {
                let mut t = model.tokenizer().encode_prompt(l);
                t.push(crate::model::tokenizer::EOS);
                t
            })
            .collect();
        train_toy(&mut model, &corpus, &TrainCfg { lr: 3e-3, steps: 500, batch: 8, seed: 1 })
            .unwrap();
        (model, groups)
    }

    #[test]
    fn kl_matches_closed_form_on_three_symbols() {
        let mut tape: Tape<f64> = Tape::new();
        let lo = [0.2f64, -0.4, 1.1];
        let le = [0.9f64, 0.3, -0.2];
        let a = tape.leaf(Tensor::matrix(1, 3, lo.to_vec()).unwrap());
        let b = tape.leaf(Tensor::matrix(1, 3, le.to_vec()).unwrap());
        let kl = kl_from_logit_rows(&mut tape, a, b).unwrap();
        let got = tape.value(kl).item().unwrap();

        let softmax = |x: &[f64]| {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect::<Vec<f64>>()
        };
        let p = softmax(&lo);
        let q = softmax(&le);
        let want: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn kl_is_exactly_zero_for_zero_delta_and_nonnegative_otherwise() {
        let (model, groups) = trained_setup();
        let model: TransformerModel<f64> = model.cast();
        let langs: Vec<String> = groups[0].langs.keys().cloned().collect();
        let lafns = locate_for_group(
            &model,
            &groups[0],
            &langs,
            &LocateCfg { beta: 0.1, edit_layers: vec![0, 1] },
        )
        .unwrap();
        let cfg = EditorConfig { prefix_count: 1, prefix_len: 2, ..EditorConfig::default() };
        let ctx = build_context(&model, &groups[0], &langs, &lafns, &cfg, 5).unwrap();

        let eval_kl = |values: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape);
            let ids: Vec<NodeId> = values.iter().map(|d| tape.leaf(d.clone())).collect();
            let losses = build_mke_loss(&mut tape, &staged, &model, &ctx, &cfg, &ids).unwrap();
            tape.value(losses.kl).item().unwrap()
        };

        let zeros: Vec<Tensor<f64>> =
            ctx.delta_sizes().iter().map(|&s| Tensor::zeros(vec![s])).collect();
        assert_eq!(eval_kl(&zeros), 0.0);

        let mut rng = crate::seeds::rng(2, "kl-prop", 0);
        use rand::Rng;
        for _ in 0..5 {
            let random: Vec<Tensor<f64>> = ctx
                .delta_sizes()
                .iter()
                .map(|&s| {
                    Tensor::vector((0..s).map(|_| rng.random::<f64>() - 0.5).collect())
                })
                .collect();
            assert!(eval_kl(&random) >= 0.0);
        }
    }

    #[test]
    fn target_loss_matches_direct_recompute_for_single_token() {
        let (model, groups) = trained_setup();
        let model: TransformerModel<f64> = model.cast();
        let langs = vec!["l1".to_string()];
        let lafns = locate_for_group(
            &model,
            &groups[0],
            &langs,
            &LocateCfg { beta: 0.0, edit_layers: vec![1] },
        )
        .unwrap();
        let cfg = EditorConfig { prefix_count: 1, prefix_len: 3, ..EditorConfig::default() };
        let ctx = build_context(&model, &groups[0], &langs, &lafns, &cfg, 9).unwrap();
        assert_eq!(ctx.prompts.len(), 1);
        assert_eq!(ctx.prompts[0].answer.len(), 1, "entity answers are single tokens");

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let ids: Vec<NodeId> =
            ctx.delta_sizes().iter().map(|&s| tape.leaf(Tensor::zeros(vec![s]))).collect();
        let losses = build_mke_loss(&mut tape, &staged, &model, &ctx, &cfg, &ids).unwrap();
        let got = tape.value(losses.target).item().unwrap();

        // independent recompute via a plain forward
        let p = &ctx.prompts[0];
        let logits = model.forward(&p.tokens, None, None).unwrap();
        let row = logits.row(p.answer_start - 1);
        let z: f64 = row.iter().map(|v| (*v - row.iter().cloned().fold(f64::MIN, f64::max)).exp()).sum();
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let prob = (row[p.answer[0] as usize] - m).exp() / z;
        let want = -prob.ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn optimization_reduces_loss_and_edits_both_languages() {
        let (model, groups) = trained_setup();
        let group = &groups[0];
        let langs: Vec<String> = group.langs.keys().cloned().collect();
        let lafns = locate_for_group(
            &model,
            group,
            &langs,
            &LocateCfg { beta: 0.05, edit_layers: vec![0, 1] },
        )
        .unwrap();
        assert!(lafns.total() > 0);
        let cfg = EditorConfig { max_steps: 60, ..EditorConfig::default() };
        let patch = optimize_patch(&model, group, &langs, &lafns, &cfg, 21).unwrap();
        assert!(!patch.trace.is_empty());
        let first = patch.trace.first().unwrap().l_mke;
        let last = patch.trace.last().unwrap().l_mke;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(last.is_finite());

        // greedy decode with the patch injected at the subject position
        for lang in &langs {
            let entry = group.entry(lang).unwrap();
            let tok = model.tokenizer();
            let prompt = tok.encode_prompt(&entry.prompt);
            let pos = 1 + resolve_subject_position(&tok.encode(&entry.prompt), &tok.encode(&entry.subject))
                .unwrap();
            let spec = patch.to_injection(pos);
            let out = generate_greedy(&model, &prompt, Some(&spec), 4).unwrap();
            assert_eq!(tok.decode(&out), entry.target_new, "language {lang}");
        }
    }

    #[test]
    fn early_stop_when_target_already_satisfied() {
        let (model, groups) = trained_setup();
        let group = &groups[1];
        let langs = vec!["l1".to_string()];
        // Replace the counterfactual with the model's own greedy answer.
        let mut group = group.clone();
        let tok = model.tokenizer();
        let entry = group.langs.get_mut("l1").unwrap();
        let prompt = tok.encode_prompt(&entry.prompt);
        let current = generate_greedy(&model, &prompt, None, 4).unwrap();
        entry.target_new = tok.decode(&current);
        assert!(!entry.target_new.is_empty());

        let lafns = locate_for_group(
            &model,
            &group,
            &langs,
            &LocateCfg { beta: 0.05, edit_layers: vec![0, 1] },
        )
        .unwrap();
        let patch =
            optimize_patch(&model, &group, &langs, &lafns, &EditorConfig::default(), 4).unwrap();
        assert_eq!(patch.trace.len(), 1, "expected early stop at the first step");
        for l in &patch.layers {
            assert!(l.deltas.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn model_weights_are_frozen_through_optimization() {
        let (model, groups) = trained_setup();
        let before: Vec<Vec<u32>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let langs: Vec<String> = groups[2].langs.keys().cloned().collect();
        let lafns = locate_for_group(
            &model,
            &groups[2],
            &langs,
            &LocateCfg { beta: 0.1, edit_layers: vec![1] },
        )
        .unwrap();
        let _ = optimize_patch(&model, &groups[2], &langs, &lafns, &EditorConfig::default(), 8)
            .unwrap();
        let after: Vec<Vec<u32>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_lafn_set_is_rejected_with_advice() {
        let (model, groups) = trained_setup();
        let langs: Vec<String> = groups[0].langs.keys().cloned().collect();
        let empty = LafnSet {
            set: NeuronSet {
                layers: vec![Vec::new(); model.config().n_layers],
                provenance: "intersection".into(),
                beta: 0.99,
                corpus_label: "l1".into(),
            },
            languages: langs.clone(),
        };
        let err = optimize_patch(&model, &groups[0], &langs, &empty, &EditorConfig::default(), 0)
            .unwrap_err();
        assert_eq!(err, Error::EmptyLafnSet);
    }

    #[test]
    fn ablation_variants_contracts() {
        let (model, groups) = trained_setup();
        let langs: Vec<String> = groups[0].langs.keys().cloned().collect();
        let locate_cfg = LocateCfg { beta: 0.1, edit_layers: vec![0, 1] };
        let base = locate_for_group(&model, &groups[0], &langs, &locate_cfg).unwrap();

        let all =
            ablation_variant(&model, &groups[0], &langs, &base, &locate_cfg, LocateVariant::All, 0)
                .unwrap();
        for (i, layer) in all.set.layers.iter().enumerate() {
            if locate_cfg.edit_layers.contains(&i) {
                assert_eq!(layer.len(), model.config().d_ffn);
            } else {
                assert!(layer.is_empty());
            }
        }

        let r1 = ablation_variant(
            &model, &groups[0], &langs, &base, &locate_cfg, LocateVariant::Random, 5,
        )
        .unwrap();
        let r2 = ablation_variant(
            &model, &groups[0], &langs, &base, &locate_cfg, LocateVariant::Random, 5,
        )
        .unwrap();
        assert_eq!(r1, r2);
        for (a, b) in r1.set.layers.iter().zip(&base.set.layers) {
            assert_eq!(a.len(), b.len());
            assert!(a.windows(2).all(|w| w[0] < w[1]));
        }

        let no_pgs = ablation_variant(
            &model, &groups[0], &langs, &base, &locate_cfg, LocateVariant::NoPgs, 0,
        )
        .unwrap();
        assert_eq!(no_pgs.set.layers.len(), model.config().n_layers);
    }
}
