//! Mini-batch training with AdaDelta and validation-MAP early stopping.
//!
//! Batch gradients are computed over fixed chunks of examples. Chunks may run
//! on different threads, but their partial sums are merged in chunk order, so
//! a run is bit-identical under [`Exec::Sequential`] and [`Exec::Parallel`].

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AdversarialMode, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{compute_metrics, group_scores, MetricsReport};
use crate::model::{Model, MtHcnn, Network};
use crate::optim::AdaDelta;
use crate::tensor::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{ConversationExample, Domain};
use crate::transfer::{example_objective, regularizer, shared_disc_objective, BatchSizes, TransferNet};

/// Examples per gradient work unit.
pub const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's steps.
    pub loss: f64,
    pub valid: MetricsReport,
}

impl fmt::Display for EpochRecord {
    /// `epoch<TAB>loss<TAB>MAP<TAB>R@5<TAB>R@2<TAB>R@1`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{}", self.epoch, self.loss, self.valid)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights the model holds after training.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        let e = self.best_epoch?;
        self.epochs.iter().find(|r| r.epoch == e)
    }

    /// One log line per epoch.
    pub fn log(&self) -> String {
        self.epochs.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Training inputs. `train` is the target-domain set; `source` is used only
/// by transfer models. An empty `valid` disables early stopping.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [ConversationExample],
    pub source: &'a [ConversationExample],
    pub valid: &'a [ConversationExample],
}

pub fn evaluate(model: &Model, examples: &[ConversationExample], exec: Exec) -> Result<MetricsReport> {
    let scores = model.score_batch(examples, exec)?;
    compute_metrics(&group_scores(examples, &scores))
}

/// Sums per-example losses and gradients over `items`, chunked through `exec`.
pub fn accumulate<T, F>(store: &ParamStore, items: &[T], exec: Exec, f: F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> Result<Var> + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let parts = exec.try_map(&chunks, |chunk| {
        let mut grads = Gradients::new(store.len());
        let mut loss = 0.0;
        for item in chunk.iter() {
            let mut tape = Tape::new(store);
            let l = f(&mut tape, item)?;
            loss += tape.item(l);
            grads.merge(&tape.backward(l)?.params);
        }
        Ok((loss, grads))
    })?;
    let mut grads = Gradients::new(store.len());
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grads.merge(&g);
    }
    Ok((loss, grads))
}

fn add_regularizer(store: &ParamStore, ids: &[ParamId], l2: f64, grads: &mut Gradients) -> Result<f64> {
    if l2 <= 0.0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new(store);
    let r = regularizer(&mut tape, ids)?;
    let r = tape.scale(r, 0.5 * l2)?;
    grads.merge(&tape.backward(r)?.params);
    Ok(tape.item(r))
}

fn squared_error(tape: &mut Tape, y_hat: Var, label: f64, scale: f64) -> Result<Var> {
    let y = tape.input(Tensor::scalar(label))?;
    let e = tape.sub(y, y_hat)?;
    let sq = tape.mul(e, e)?;
    tape.scale(sq, 0.5 * scale)
}

/// Batch objective and gradient of a single network:
/// `(1/B) Σ ½(y − ŷ)² + λ4/2 · Σ‖θ‖²`.
pub fn single_batch_gradients(
    store: &ParamStore,
    net: &MtHcnn,
    cfg: &ModelConfig,
    batch: &[&ConversationExample],
    l2: f64,
    exec: Exec,
) -> Result<(f64, Gradients)> {
    let scale = 1.0 / batch.len() as f64;
    let (loss, mut grads) = accumulate(store, batch, exec, |tape, ex| {
        let s = net.score_var(tape, cfg, ex)?;
        squared_error(tape, s, ex.label, scale)
    })?;
    let reg = add_regularizer(store, &net.ids(), l2, &mut grads)?;
    Ok((loss + reg, grads))
}

/// Transfer objective and gradient over one source batch and one target batch.
pub fn transfer_batch_gradients(
    store: &ParamStore,
    net: &TransferNet,
    cfg: &ModelConfig,
    source: &[&ConversationExample],
    target: &[&ConversationExample],
    train: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let sizes = BatchSizes {
        source: source.len(),
        target: target.len(),
    };
    let batch: Vec<&ConversationExample> = source.iter().chain(target).copied().collect();
    let (loss, mut grads) = accumulate(store, &batch, train.exec, |tape, ex| {
        example_objective(tape, net, cfg, ex, sizes, &train.weights, train.adversarial_mode)
    })?;
    let reg = add_regularizer(store, &net.model_ids(), train.weights.l2, &mut grads)?;
    Ok((loss + reg, grads))
}

/// Discriminator-step gradient: `−(1/n) Σ log p(d_i | O^c_i)` with the shared
/// features held fixed.
pub fn shared_disc_gradients(
    store: &ParamStore,
    net: &TransferNet,
    cfg: &ModelConfig,
    batch: &[&ConversationExample],
    exec: Exec,
) -> Result<(f64, Gradients)> {
    let n = batch.len();
    accumulate(store, batch, exec, |tape, ex| {
        let domain = ex.domain.ok_or_else(|| Error::Usage("transfer example without a domain".into()))?;
        let features = {
            let mut fwd = Tape::new(store);
            let f = net.shared.features(&mut fwd, cfg, ex)?;
            fwd.tensor(f)
        };
        shared_disc_objective(tape, net, features, domain, n)
    })
}

/// Epoch-wise shuffled order that reshuffles whenever it runs out.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycle { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_domains(examples: &[ConversationExample], domain: Domain, what: &str) -> Result<()> {
    match examples.iter().position(|e| e.domain != Some(domain)) {
        Some(i) => Err(Error::Data(format!("{what} example {i} is not tagged {domain:?}"))),
        None => Ok(()),
    }
}

fn single_epoch(
    model: &mut Model,
    train: &[ConversationExample],
    cfg: &TrainConfig,
    opt: &mut AdaDelta,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let Model { config, store, net, .. } = model;
    let Network::Single(net) = net else {
        return Err(Error::Usage("single-network training on a transfer model".into()));
    };
    let ids = net.ids();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0usize;
    for idx in order.chunks(cfg.batch_size) {
        let batch: Vec<&ConversationExample> = idx.iter().map(|&i| &train[i]).collect();
        let (loss, grads) = single_batch_gradients(store, net, config, &batch, cfg.weights.l2, cfg.exec)?;
        opt.step(store, &grads, &ids)?;
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}

fn transfer_epoch(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    opt: &mut AdaDelta,
    cycles: &mut (Cycle, Cycle),
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let Model { config, store, net, .. } = model;
    let Network::Transfer(net) = net else {
        return Err(Error::Usage("transfer training on a single-network model".into()));
    };
    let (n_s, n_t) = (data.source.len(), data.train.len());
    let b_s = cfg.batch_size.min(n_s);
    let b_t = cfg.batch_size.min(n_t);
    let steps = n_s.max(n_t).div_ceil(cfg.batch_size);
    let disc_ids = net.disc_shared.ids();
    let alternating = cfg.adversarial_mode == AdversarialMode::Alternating;
    let model_ids: Vec<ParamId> = store
        .ids()
        .filter(|id| !(alternating && disc_ids.contains(id)))
        .collect();
    let mut total = 0.0;
    for _ in 0..steps {
        let src: Vec<&ConversationExample> = cycles.0.take(b_s, rng).into_iter().map(|i| &data.source[i]).collect();
        let tgt: Vec<&ConversationExample> = cycles.1.take(b_t, rng).into_iter().map(|i| &data.train[i]).collect();
        if alternating && cfg.weights.adversarial > 0.0 {
            let both: Vec<&ConversationExample> = src.iter().chain(&tgt).copied().collect();
            let (_, g) = shared_disc_gradients(store, net, config, &both, cfg.exec)?;
            opt.step(store, &g, &disc_ids)?;
        }
        let (loss, grads) = transfer_batch_gradients(store, net, config, &src, &tgt, cfg)?;
        opt.step(store, &grads, &model_ids)?;
        total += loss;
    }
    Ok(total / steps as f64)
}

/// Trains `model` in place and leaves it holding the weights of the epoch with
/// the best validation MAP (or the last epoch when `valid` is empty).
pub fn train(model: &mut Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let transfer = matches!(model.net, Network::Transfer(_));
    if transfer {
        if data.source.is_empty() {
            return Err(Error::Data("transfer training needs a source-domain set".into()));
        }
        check_domains(data.source, Domain::Source, "source")?;
        check_domains(data.train, Domain::Target, "target")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdaDelta::new(&model.store, cfg.learning_rate, cfg.rho, cfg.epsilon);
    let mut cycles = transfer.then(|| (Cycle::new(data.source.len(), &mut rng), Cycle::new(data.train.len(), &mut rng)));
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let loss = match cycles.as_mut() {
            Some(c) => transfer_epoch(model, data, cfg, &mut opt, c, &mut rng)?,
            None => single_epoch(model, data.train, cfg, &mut opt, &mut rng)?,
        };
        let valid = if data.valid.is_empty() {
            MetricsReport::default()
        } else {
            evaluate(model, data.valid, cfg.exec)?
        };
        let record = EpochRecord { epoch, loss, valid };
        on_epoch(&record);
        report.epochs.push(record);

        if data.valid.is_empty() {
            report.best_epoch = Some(epoch);
            continue;
        }
        if best.as_ref().is_none_or(|(m, _)| valid.map > *m) {
            best = Some((valid.map, model.store.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LossWeights, ModelKind};
    use rand::Rng;

    fn examples(cfg: &ModelConfig, n_groups: usize, seed: u64, domain: Option<Domain>) -> Vec<ConversationExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for g in 0..n_groups {
            for c in 0..4 {
                let mut seq = || (0..cfg.m).map(|_| rng.random_range(2..20)).collect::<Vec<_>>();
                out.push(ConversationExample {
                    utterances: (0..cfg.n_max).map(|_| seq()).collect(),
                    candidate: seq(),
                    label: if c == 0 { 1.0 } else { 0.0 },
                    group_id: g,
                    domain,
                });
            }
        }
        out
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 3,
            patience: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn chunked_gradients_match_single_tape() {
        let m = Model::new(ModelKind::MtHcnn, ModelConfig::tiny(), 20, 1).unwrap();
        let data = examples(&m.config, 5, 2, None);
        let batch: Vec<_> = data.iter().collect();
        let net = m.single().unwrap();
        let (loss, g) = single_batch_gradients(&m.store, net, &m.config, &batch, 0.0, Exec::Sequential).unwrap();

        let mut tape = Tape::new(&m.store);
        let mut terms = Vec::new();
        for ex in &data {
            let s = net.score_var(&mut tape, &m.config, ex).unwrap();
            terms.push(squared_error(&mut tape, s, ex.label, 1.0 / data.len() as f64).unwrap());
        }
        let all = tape.concat(&terms, 0).unwrap();
        let l = tape.sum(all).unwrap();
        let reference = tape.backward(l).unwrap().params;
        assert!((tape.item(l) - loss).abs() < 1e-12);
        for id in m.store.ids() {
            let n = m.store.get(id).len();
            for (a, b) in g.dense(id, n).iter().zip(reference.dense(id, n)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_metrics_constant() {
        let mut m = Model::new(ModelKind::MtHcnn, ModelConfig::tiny(), 20, 1).unwrap();
        let data = examples(&m.config, 4, 2, None);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..train_cfg()
        };
        let before = m.store.clone();
        let r = train(
            &mut m,
            &TrainData {
                train: &data,
                source: &[],
                valid: &data,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(r.epochs.len(), 3);
        assert!(r.epochs.iter().all(|e| e.valid == r.epochs[0].valid));
        assert_eq!(m.store, before);
    }

    #[test]
    fn sequential_and_parallel_runs_are_identical() {
        let run = |exec: Exec| {
            let mut m = Model::new(ModelKind::Transfer, ModelConfig::tiny(), 20, 3).unwrap();
            let src = examples(&m.config, 5, 4, Some(Domain::Source));
            let tgt = examples(&m.config, 3, 5, Some(Domain::Target));
            let cfg = TrainConfig { exec, ..train_cfg() };
            let r = train(
                &mut m,
                &TrainData {
                    train: &tgt,
                    source: &src,
                    valid: &tgt,
                },
                &cfg,
            )
            .unwrap();
            (r, m.store)
        };
        let (a, sa) = run(Exec::Sequential);
        let (b, sb) = run(Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn alternating_step_leaves_disc_shared_to_its_own_objective() {
        let m = Model::new(ModelKind::Transfer, ModelConfig::tiny(), 20, 3).unwrap();
        let src = examples(&m.config, 1, 4, Some(Domain::Source));
        let tgt = examples(&m.config, 1, 5, Some(Domain::Target));
        let net = m.transfer().unwrap();
        let s: Vec<_> = src.iter().collect();
        let t: Vec<_> = tgt.iter().collect();
        let both: Vec<_> = s.iter().chain(&t).copied().collect();
        let (_, g) = shared_disc_gradients(&m.store, net, &m.config, &both, Exec::Sequential).unwrap();
        let disc = net.disc_shared.ids();
        for id in m.store.ids() {
            assert_eq!(g.get(id).is_some(), disc.contains(&id), "{}", m.store.name(id));
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = Model::new(ModelKind::MtHcnnD, ModelConfig::tiny(), 20, 1).unwrap();
        let data = examples(&m.config, 4, 2, None);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 1.0,
            weights: LossWeights::zero(),
            ..train_cfg()
        };
        let r = train(
            &mut m,
            &TrainData {
                train: &data,
                source: &[],
                valid: &[],
            },
            &cfg,
        )
        .unwrap();
        assert!(r.epochs.last().unwrap().loss < r.epochs[0].loss);
        assert_eq!(r.best_epoch, Some(30));
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let mut m = Model::new(ModelKind::MtHcnn, ModelConfig::tiny(), 20, 1).unwrap();
        let data = examples(&m.config, 4, 2, None);
        let valid = examples(&m.config, 4, 9, None);
        let cfg = TrainConfig {
            epochs: 12,
            patience: 2,
            learning_rate: 1.0,
            ..train_cfg()
        };
        let r = train(
            &mut m,
            &TrainData {
                train: &data,
                source: &[],
                valid: &valid,
            },
            &cfg,
        )
        .unwrap();
        let best = r.best().unwrap();
        assert!(r.epochs.iter().all(|e| e.valid.map <= best.valid.map));
        assert_eq!(evaluate(&m, &valid, Exec::Sequential).unwrap(), best.valid);
        assert!(r.log().lines().all(|l| l.split('\t').count() == 6));
    }

    #[test]
    fn transfer_requires_tagged_domains() {
        let mut m = Model::new(ModelKind::Transfer, ModelConfig::tiny(), 20, 3).unwrap();
        let src = examples(&m.config, 1, 4, None);
        let tgt = examples(&m.config, 1, 5, Some(Domain::Target));
        let err = train(
            &mut m,
            &TrainData {
                train: &tgt,
                source: &src,
                valid: &[],
            },
            &train_cfg(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
