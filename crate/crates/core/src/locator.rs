//! Locating factual neurons: count activations over a corpus, threshold per
//! layer into per-language sets, and intersect across languages.
//!
//! A neuron is "activated" at a token position when its post-activation
//! value is strictly positive. Counts are layer-local: thresholding divides
//! by the maximum count within the same layer, so a hot layer cannot zero
//! out the others.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::EditGroup;
use crate::error::{Error, Result};
use crate::model::{forward_staged, ActivationRecord, TransformerModel};
use crate::tensor::{Real, Tape};

/// Per-layer, per-neuron activation tallies over a corpus.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActivationCounts {
    /// `counts[layer][neuron]` = token positions where the neuron fired.
    pub counts: Vec<Vec<u64>>,
    /// Total token positions processed.
    pub positions: u64,
    /// Corpus label, normally the language code.
    pub label: String,
}

impl ActivationCounts {
    pub fn zeros(n_layers: usize, d_ffn: usize, label: &str) -> Self {
        ActivationCounts {
            counts: vec![vec![0; d_ffn]; n_layers],
            positions: 0,
            label: label.to_string(),
        }
    }

    /// Commutative, associative integer merge.
    pub fn merge(&mut self, other: &ActivationCounts) -> Result<()> {
        if self.counts.len() != other.counts.len()
            || self.counts.first().map(Vec::len) != other.counts.first().map(Vec::len)
        {
            return Err(Error::Invalid("activation count geometries differ".into()));
        }
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += *t;
            }
        }
        self.positions += other.positions;
        Ok(())
    }
}

/// Per-layer sorted neuron index lists with provenance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NeuronSet {
    /// `layers[i]` = strictly increasing neuron indices selected in layer i.
    pub layers: Vec<Vec<usize>>,
    /// Language code, or "intersection".
    pub provenance: String,
    pub beta: f64,
    pub corpus_label: String,
}

/// A [`NeuronSet`] produced by cross-language intersection.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LafnSet {
    pub set: NeuronSet,
    pub languages: Vec<String>,
}

impl LafnSet {
    /// Total selected neurons over all layers.
    pub fn total(&self) -> usize {
        self.set.layers.iter().map(Vec::len).sum()
    }

    /// (layer, indices) pairs for layers with at least one neuron.
    pub fn occupied_layers(&self) -> Vec<(usize, &[usize])> {
        self.set
            .layers
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, v)| (i, v.as_slice()))
            .collect()
    }

    /// Keep only the given layers; all other layers become empty.
    pub fn restricted_to(&self, edit_layers: &[usize]) -> LafnSet {
        let mut out = self.clone();
        for (i, layer) in out.set.layers.iter_mut().enumerate() {
            if !edit_layers.contains(&i) {
                layer.clear();
            }
        }
        out
    }
}

/// Count strictly-positive neuron activations at every token position of
/// every sequence. Out-of-vocabulary tokens were already mapped to `<unk>`
/// by the tokenizer, so they simply count through that embedding.
pub fn count_activations<R: Real>(
    model: &TransformerModel<R>,
    corpus: &[Vec<u32>],
    label: &str,
) -> Result<ActivationCounts> {
    if corpus.is_empty() {
        return Err(Error::Invalid("activation counting needs a non-empty corpus".into()));
    }
    let cfg = model.config();
    let mut acc = ActivationCounts::zeros(cfg.n_layers, cfg.d_ffn, label);
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let mut rec = ActivationRecord::new();
    for seq in corpus {
        forward_staged(&mut tape, &staged, cfg, seq, &[], Some(&mut rec))?;
        for (layer, neurons) in rec.neurons.iter().enumerate() {
            for p in 0..neurons.rows() {
                let row = neurons.row(p);
                for (j, &v) in row.iter().enumerate() {
                    if v > R::zero() {
                        acc.counts[layer][j] += 1;
                    }
                }
            }
        }
        acc.positions += seq.len() as u64;
    }
    Ok(acc)
}

/// Keep neurons whose count exceeds `beta` times the layer's maximum count
/// (strict inequality). A layer whose maximum is zero selects nothing.
pub fn select_factual_neurons(counts: &ActivationCounts, beta: f64) -> Result<NeuronSet> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Invalid(format!("beta must lie in [0, 1), got {beta}")));
    }
    let layers = counts
        .counts
        .iter()
        .map(|layer| {
            let max = layer.iter().copied().max().unwrap_or(0);
            if max == 0 {
                return Vec::new();
            }
            let threshold = beta * max as f64;
            layer
                .iter()
                .enumerate()
                .filter(|&(_, &n)| n as f64 > threshold)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok(NeuronSet {
        layers,
        provenance: counts.label.clone(),
        beta,
        corpus_label: counts.label.clone(),
    })
}

/// Per-layer sorted intersection of per-language sets.
pub fn intersect_languages(sets: &[NeuronSet]) -> Result<LafnSet> {
    let first = sets.first().ok_or(Error::Invalid("intersection needs at least one set".into()))?;
    let n_layers = first.layers.len();
    for s in sets {
        if s.layers.len() != n_layers {
            return Err(Error::Invalid("neuron sets span different layer counts".into()));
        }
    }
    let mut layers: Vec<Vec<usize>> = first.layers.clone();
    for s in &sets[1..] {
        for (acc, other) in layers.iter_mut().zip(&s.layers) {
            let keep: BTreeSet<usize> = other.iter().copied().collect();
            acc.retain(|j| keep.contains(j));
        }
    }
    Ok(LafnSet {
        set: NeuronSet {
            layers,
            provenance: "intersection".to_string(),
            beta: first.beta,
            corpus_label: first.corpus_label.clone(),
        },
        languages: sets.iter().map(|s| s.provenance.clone()).collect(),
    })
}

/// One row of the per-layer distribution report.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LayerReportRow {
    pub layer: usize,
    pub per_language: Vec<usize>,
    pub lafn: usize,
}

/// Figure-style distribution table: per-layer counts per language plus the
/// intersection.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LayerReport {
    pub languages: Vec<String>,
    pub rows: Vec<LayerReportRow>,
}

pub fn layer_distribution_report(
    per_language: &[NeuronSet],
    lafn: &LafnSet,
) -> Result<LayerReport> {
    let n_layers = lafn.set.layers.len();
    for s in per_language {
        if s.layers.len() != n_layers {
            return Err(Error::Invalid("report inputs span different layer counts".into()));
        }
    }
    let rows = (0..n_layers)
        .map(|i| {
            let per_lang: Vec<usize> = per_language.iter().map(|s| s.layers[i].len()).collect();
            let lafn_count = lafn.set.layers[i].len();
            debug_assert!(per_lang.iter().all(|&c| lafn_count <= c));
            LayerReportRow { layer: i, per_language: per_lang, lafn: lafn_count }
        })
        .collect();
    Ok(LayerReport {
        languages: per_language.iter().map(|s| s.provenance.clone()).collect(),
        rows,
    })
}

/// Locating configuration for per-group edits.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LocateCfg {
    pub beta: f64,
    pub edit_layers: Vec<usize>,
}

/// Locate the group's language-agnostic neurons: count over each language's
/// paraphrase corpus, threshold, intersect, and restrict to the edit layers.
/// An empty result is allowed here; the editor decides how to react.
pub fn locate_for_group<R: Real>(
    model: &TransformerModel<R>,
    group: &EditGroup,
    langs: &[String],
    cfg: &LocateCfg,
) -> Result<LafnSet> {
    for &l in &cfg.edit_layers {
        if l >= model.config().n_layers {
            return Err(Error::Invalid(format!(
                "edit layer {l} out of range for {}-layer model",
                model.config().n_layers
            )));
        }
    }
    let mut sets = Vec::with_capacity(langs.len());
    for lang in langs {
        let entry = group.entry(lang)?;
        if entry.paraphrases.is_empty() {
            return Err(Error::MissingParaphrases { lang: lang.clone() });
        }
        let corpus: Vec<Vec<u32>> =
            entry.paraphrases.iter().map(|p| model.tokenizer().encode_prompt(p)).collect();
        let counts = count_activations(model, &corpus, lang)?;
        sets.push(select_factual_neurons(&counts, cfg.beta)?);
    }
    Ok(intersect_languages(&sets)?.restricted_to(&cfg.edit_layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};
    use crate::tensor::{ActKind, Tensor};

    fn toy_model() -> TransformerModel<f32> {
        let tok = Tokenizer::from_corpus(["bade kuro limo", "vena sipo rato", "mofa gilo peti"]);
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 12,
            n_heads: 2,
            vocab_size: tok.vocab_len(),
            max_seq: 12,
            ffn_variant: crate::model::FfnVariant::Gated,
            act_fn: ActKind::Silu,
        };
        TransformerModel::new_random(config, tok, 5).unwrap()
    }

    #[test]
    fn zero_first_projection_counts_nothing() {
        let mut model = toy_model();
        let f = model.config().d_ffn;
        let d = model.config().d_model;
        model.params_mut().layers[0].w1 = Tensor::matrix(d, f, alloc::vec![0.0; d * f]).unwrap();
        let corpus = vec![vec![crate::model::tokenizer::BOS]];
        let counts = count_activations(&model, &corpus, "l1").unwrap();
        assert!(counts.counts[0].iter().all(|&c| c == 0));
    }

    #[test]
    fn duplicating_corpus_doubles_counts() {
        let model = toy_model();
        let corpus: Vec<Vec<u32>> = ["bade kuro", "vena sipo rato"]
            .iter()
            .map(|s| model.tokenizer().encode_prompt(s))
            .collect();
        let single = count_activations(&model, &corpus, "l1").unwrap();
        let mut doubled_corpus = corpus.clone();
        doubled_corpus.extend(corpus.clone());
        let doubled = count_activations(&model, &doubled_corpus, "l1").unwrap();
        for (a, b) in single.counts.iter().zip(&doubled.counts) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(2 * x, *y);
            }
        }
        assert_eq!(2 * single.positions, doubled.positions);
        // selection is scale-invariant under duplication
        for beta in [0.0, 0.3, 0.7] {
            assert_eq!(
                select_factual_neurons(&single, beta).unwrap().layers,
                select_factual_neurons(&doubled, beta).unwrap().layers
            );
        }
    }

    #[test]
    fn selection_hand_case() {
        let counts = ActivationCounts {
            counts: vec![vec![5, 3, 0]],
            positions: 5,
            label: "l1".into(),
        };
        assert_eq!(select_factual_neurons(&counts, 0.5).unwrap().layers, vec![vec![0, 1]]);
        assert_eq!(select_factual_neurons(&counts, 0.6).unwrap().layers, vec![vec![0]]);
        // strict inequality: never-activated neurons are excluded even at 0
        assert_eq!(select_factual_neurons(&counts, 0.0).unwrap().layers, vec![vec![0, 1]]);
        assert!(select_factual_neurons(&counts, 1.0).is_err());
        assert!(select_factual_neurons(&counts, -0.1).is_err());
    }

    #[test]
    fn nestedness_in_beta() {
        let model = toy_model();
        let corpus: Vec<Vec<u32>> = ["bade kuro limo", "mofa gilo", "vena sipo"]
            .iter()
            .map(|s| model.tokenizer().encode_prompt(s))
            .collect();
        let counts = count_activations(&model, &corpus, "l1").unwrap();
        let betas = [0.0, 0.25, 0.5, 0.75];
        let sets: Vec<NeuronSet> =
            betas.iter().map(|&b| select_factual_neurons(&counts, b).unwrap()).collect();
        for w in sets.windows(2) {
            for (tight, loose) in w[1].layers.iter().zip(&w[0].layers) {
                let loose: BTreeSet<usize> = loose.iter().copied().collect();
                assert!(tight.iter().all(|j| loose.contains(j)));
            }
        }
    }

    #[test]
    fn intersection_set_algebra() {
        let mk = |layers: Vec<Vec<usize>>, lang: &str| NeuronSet {
            layers,
            provenance: lang.into(),
            beta: 0.1,
            corpus_label: lang.into(),
        };
        let a = mk(vec![vec![1, 4, 7]], "l1");
        let b = mk(vec![vec![4, 7, 9]], "l2");
        let both = intersect_languages(&[a.clone(), b]).unwrap();
        assert_eq!(both.set.layers, vec![vec![4, 7]]);
        assert_eq!(both.languages, vec!["l1", "l2"]);
        let identity = intersect_languages(&[a.clone()]).unwrap();
        assert_eq!(identity.set.layers, a.layers);
        let disjoint =
            intersect_languages(&[a, mk(vec![vec![0, 2]], "l2")]).unwrap();
        assert_eq!(disjoint.set.layers, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn report_shape_and_bounds() {
        let mk = |layers: Vec<Vec<usize>>, lang: &str| NeuronSet {
            layers,
            provenance: lang.into(),
            beta: 0.1,
            corpus_label: lang.into(),
        };
        let a = mk(vec![vec![1, 2], vec![0]], "l1");
        let b = mk(vec![vec![1, 2], vec![0, 3]], "l2");
        let lafn = intersect_languages(&[a.clone(), b.clone()]).unwrap();
        let report = layer_distribution_report(&[a, b], &lafn).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.per_language.iter().all(|&c| row.lafn <= c));
        }
        // equal sets per language leave the intersection equal to each
        assert_eq!(report.rows[0].lafn, 2);
    }
}
