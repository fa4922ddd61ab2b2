//! Reverse-mode gradients against central finite differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Gradients, ParamId, ParamStore, Tape, Tensor};
use crate::text::{ConversationExample, Domain};
use crate::config::AdversarialMode;
use crate::transfer::{combined_loss, example_terms, BatchSizes};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
const VOCAB: usize = 20;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// [`relative_error`] with `|·|` the Euclidean norm over a whole tensor.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// Norm-wise relative error over the tensor.
    pub rel_err: f64,
    /// Largest single-element relative error; dominated by rounding noise
    /// wherever `|a| ≲ 1e-6`.
    pub max_elem_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub kind: ModelKind,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{}\t{}\t{}\t{:.3e}\t{:.3e}",
                self.kind.name(),
                self.seed,
                t.name,
                t.rel_err,
                t.max_elem_rel_err
            )?;
        }
        Ok(())
    }
}

/// Compares `grads` with central differences of a loss for every element of
/// the listed parameters except frozen PAD rows. `terms` returns the loss as
/// additive parts; each part is differenced on its own before summing, so
/// small terms are not rounded away against large ones. Each perturbed value
/// is restored bit-exactly.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], grads: &Gradients, terms: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&ParamStore) -> Result<Vec<f64>>,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = store.get(id).len();
        let analytic = grads.dense(id, len);
        let p = store.param(id);
        let frozen = if p.pad_row { p.value.shape()[1] } else { 0 };
        let mut worst: f64 = 0.0;
        let mut numeric_all = Vec::with_capacity(len - frozen);
        for i in frozen..len {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = terms(store)?;
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = terms(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
            let numeric = diff / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
            numeric_all.push(numeric);
        }
        out.push(TensorCheck {
            name: store.name(id).to_string(),
            rel_err: tensor_relative_error(&analytic[frozen..], &numeric_all),
            max_elem_rel_err: worst,
            checked: len - frozen,
        });
    }
    Ok(out)
}

fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng, label: f64, domain: Option<Domain>) -> ConversationExample {
    let seq = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(2..=cfg.m);
        let mut s: Vec<usize> = (0..len).map(|_| rng.random_range(2..VOCAB)).collect();
        s.resize(cfg.m, 0);
        s
    };
    ConversationExample {
        utterances: (0..cfg.n_max).map(|_| seq(rng)).collect(),
        candidate: seq(rng),
        label,
        group_id: 0,
        domain,
    }
}

/// Perturbs every weight so that biases start away from zero. PAD rows stay zero.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.param(id);
        let skip = if p.pad_row { p.value.shape()[1] } else { 0 };
        let data = store.get_mut(id).data_mut();
        for v in &mut data[skip..] {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn single_loss(model: &Model, store: &ParamStore, ex: &ConversationExample) -> Result<(f64, Gradients)> {
    let net = model.single().expect("single model");
    let mut tape = Tape::new(store);
    let s = net.score_var(&mut tape, &model.config, ex)?;
    let y = tape.input(Tensor::scalar(ex.label))?;
    let e = tape.sub(y, s)?;
    let sq = tape.mul(e, e)?;
    let l = tape.scale(sq, 0.5)?;
    let value = tape.item(l);
    Ok((value, tape.backward(l)?.params))
}

fn transfer_loss(
    model: &Model,
    store: &ParamStore,
    source: &[ConversationExample],
    target: &[ConversationExample],
) -> Result<(f64, Gradients)> {
    let net = model.transfer().expect("transfer model");
    let mut tape = Tape::new(store);
    let l = combined_loss(&mut tape, net, &model.config, source, target, &LossWeights::default())?;
    let value = tape.item(l);
    Ok((value, tape.backward(l)?.params))
}

/// The combined loss evaluated as its individual additive terms.
fn transfer_terms(
    model: &Model,
    store: &ParamStore,
    source: &[ConversationExample],
    target: &[ConversationExample],
) -> Result<Vec<f64>> {
    let net = model.transfer().expect("transfer model");
    let w = LossWeights::default();
    let sizes = BatchSizes {
        source: source.len(),
        target: target.len(),
    };
    let mut tape = Tape::new(store);
    let mut vars = Vec::new();
    for ex in source.iter().chain(target) {
        vars.extend(example_terms(&mut tape, net, &model.config, ex, sizes, &w, AdversarialMode::Alternating)?);
    }
    let mut out: Vec<f64> = vars.iter().map(|&v| tape.item(v)).collect();
    for id in net.model_ids() {
        let r = tape.param_sq_norm(id)?;
        out.push(0.5 * w.l2 * tape.item(r));
    }
    Ok(out)
}

/// Checks one randomly initialized model. Single models use the squared error
/// of one example; the transfer model uses the combined loss on two source
/// and two target examples.
pub fn grad_check_seed(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::new(kind, cfg.clone(), VOCAB, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    jitter(&mut model.store, &mut rng);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut store = model.store.clone();
    let tensors = match kind {
        ModelKind::MtHcnn | ModelKind::MtHcnnD => {
            let label = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let ex = random_example(cfg, &mut rng, label, None);
            let (_, grads) = single_loss(&model, &store, &ex)?;
            check_params(&mut store, &ids, &grads, |s| Ok(vec![single_loss(&model, s, &ex)?.0]))?
        }
        ModelKind::Transfer => {
            let source: Vec<_> = (0..2)
                .map(|i| random_example(cfg, &mut rng, i as f64, Some(Domain::Source)))
                .collect();
            let target: Vec<_> = (0..2)
                .map(|i| random_example(cfg, &mut rng, (1 - i) as f64, Some(Domain::Target)))
                .collect();
            let (_, grads) = transfer_loss(&model, &store, &source, &target)?;
            check_params(&mut store, &ids, &grads, |s| transfer_terms(&model, s, &source, &target))?
        }
    };
    Ok(GradCheckReport { kind, seed, tensors })
}

pub fn grad_check(kind: ModelKind, cfg: &ModelConfig, seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    if seeds.is_empty() {
        return Err(Error::Usage("gradient check needs at least one seed".into()));
    }
    seeds.iter().map(|&s| grad_check_seed(kind, cfg, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(tensor_relative_error(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert_eq!(tensor_relative_error(&[3.0, 4.0], &[0.0, 0.0]), 1.0);
        assert_eq!(tensor_relative_error(&[0.0], &[1e-10]), 1e-2);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-10, 0.0), 1e-2);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn linear_toy_model() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new(s);
            let xv = tape.input(x.clone())?;
            let wv = tape.param(w);
            let y = tape.affine(xv, wv, None)?;
            let l = tape.sum(y)?;
            let v = tape.item(l);
            Ok((v, tape.backward(l)?.params))
        };
        let (_, g) = loss(&store).unwrap();
        assert_eq!(g.dense(w, 3), vec![1.0, 2.0, 3.0]);
        let report = check_params(&mut store, &[w], &g, |s| Ok(vec![loss(s)?.0])).unwrap();
        assert!(report[0].rel_err < 1e-9 && report[0].max_elem_rel_err < 1e-9);
        assert_eq!(store.get(w).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0]));
        let mut g = Gradients::new(1);
        g.add_dense(w, &[3.0]);
        let r = check_params(&mut store, &[w], &g, |s| Ok(vec![s.get(w).data()[0].powi(2)])).unwrap();
        assert!(r[0].rel_err > 0.3);
    }

    #[test]
    fn tiny_models_pass() {
        let cfg = ModelConfig::tiny();
        for kind in [ModelKind::MtHcnn, ModelKind::MtHcnnD, ModelKind::Transfer] {
            let r = grad_check_seed(kind, &cfg, 3).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn empty_seed_list_is_usage_error() {
        let err = grad_check(ModelKind::MtHcnn, &ModelConfig::tiny(), &[]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
