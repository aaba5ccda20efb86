//! Toy-model training: next-token cross-entropy over a memorization corpus.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{forward_staged, TransformerModel};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Adam, AdamCfg, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainCfg {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg { lr: 1e-3, steps: 2000, batch: 16, seed: 0 }
    }
}

/// Per-step mean next-token NLL.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Train in place on tokenized sequences (each including its own `<bos>` and
/// `<eos>`). Deterministic per seed; zero steps leaves initialization
/// untouched. A NaN loss aborts with the failing step index.
pub fn train_toy<R: Real>(
    model: &mut TransformerModel<R>,
    corpus: &[Vec<u32>],
    cfg: &TrainCfg,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::Invalid("training sequences need at least two tokens".into()));
        }
        if seq.len() > model.config().max_seq {
            return Err(Error::Invalid("training sequence exceeds max_seq".into()));
        }
    }
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }

    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(AdamCfg { lr: cfg.lr, ..AdamCfg::default() }, &sizes);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = seeds::rng(cfg.seed, "train-shuffle", 0);
    let batch = cfg.batch.max(1);

    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut shuffle_rng);
            }
            picks.push(order.pop().expect("refilled above"));
        }

        let mut tape = Tape::new();
        let staged = model.stage_trainable(&mut tape);
        let mut nll_nodes = Vec::with_capacity(picks.len());
        let mut predicted = 0usize;
        for &ix in &picks {
            let seq = &corpus[ix];
            let logits = forward_staged(&mut tape, &staged, model.config(), seq, &[], None)?;
            let lp = tape.log_softmax(logits)?;
            let coords: Vec<(usize, usize)> =
                seq[1..].iter().enumerate().map(|(p, &t)| (p, t as usize)).collect();
            predicted += coords.len();
            let picked = tape.select_entries(lp, &coords)?;
            nll_nodes.push(tape.sum_all(picked));
        }
        let mut total = nll_nodes[0];
        for &n in &nll_nodes[1..] {
            total = tape.add(total, n)?;
        }
        let loss = tape.scale(total, R::from_f64_lossy(-1.0 / predicted as f64));
        let loss_value = tape.value(loss).item()?.to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.losses.push(loss_value);
        log::debug!("train step {step}: loss {loss_value:.6}");

        let grads = tape.backward(loss)?;
        let ids = staged.param_ids();
        let grad_tensors: Vec<Tensor<R>> = ids.iter().map(|&id| grads.get(id)).collect();
        let mut named = model.named_tensors_mut();
        let mut params: Vec<&mut Tensor<R>> =
            named.iter_mut().map(|(_, t)| &mut **t).collect();
        adam.step(&mut params, &grad_tensors)?;
    }
    Ok(report)
}
