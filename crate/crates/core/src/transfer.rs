//! Shared-private transfer model.
//!
//! Three multi-turn encoders produce the shared features `O^c` and the
//! domain-specific features `O^s` / `O^t`. Each domain has its own sigmoid
//! output over `(O^c, O^{s|t})`. Three discriminators act on the features:
//! one on `O^c` (adversarial, entropy term) and one per specific space
//! (cross-entropy on the true domain).
//!
//! The objective over a source batch of size `n_s` and target batch `n_t`:
//!
//! ```text
//! L = Σ_k (1/n_k) Σ_j ½(y − ŷ)²  +  λ1/2 · (1/n) Σ_i Σ_d p log p
//!   + λ2/2 · (1/n_s) Σ −log p_s(O^s)  +  λ3/2 · (1/n_t) Σ −log p_t(O^t)
//!   + λ4/2 · ‖Θ‖²
//! ```
//!
//! Θ covers the encoders, embeddings (minus the PAD row) and output layers;
//! discriminator weights are not regularized.

use rand::Rng;

use crate::config::{AdversarialMode, LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::init::{glorot, zeros};
use crate::model::{Aggregation, MtHcnn};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{ConversationExample, Domain, EmbeddingTable};

/// `features → hidden → 2` with ReLU then softmax. Index 0 is source.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            w1: glorot(store, format!("{prefix}.w1"), vec![input, hidden], input, hidden, rng),
            b1: zeros(store, format!("{prefix}.b1"), hidden),
            w2: glorot(store, format!("{prefix}.w2"), vec![hidden, 2], hidden, 2, rng),
            b2: zeros(store, format!("{prefix}.b2"), 2),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Domain posterior `[p_source, p_target]`.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let h = tape.affine(features, w1, Some(b1))?;
        let h = tape.relu(h)?;
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        let logits = tape.affine(h, w2, Some(b2))?;
        tape.softmax(logits)
    }
}

/// Domain output layer `σ(W^c O^c + W O + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    pub shared_w: ParamId,
    pub specific_w: ParamId,
    pub bias: ParamId,
}

impl DomainHead {
    fn new(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        DomainHead {
            shared_w: glorot(store, format!("{prefix}.shared_w"), vec![hidden, 1], 2 * hidden, 1, rng),
            specific_w: glorot(store, format!("{prefix}.specific_w"), vec![hidden, 1], 2 * hidden, 1, rng),
            bias: zeros(store, format!("{prefix}.b"), 1),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.shared_w, self.specific_w, self.bias]
    }

    fn forward(&self, tape: &mut Tape, shared: Var, specific: Var) -> Result<Var> {
        let wc = tape.param(self.shared_w);
        let a = tape.affine(shared, wc, None)?;
        let (ws, b) = (tape.param(self.specific_w), tape.param(self.bias));
        let c = tape.affine(specific, ws, Some(b))?;
        let logit = tape.add(a, c)?;
        tape.sigmoid(logit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferNet {
    pub shared: MtHcnn,
    pub source: MtHcnn,
    pub target: MtHcnn,
    pub source_head: DomainHead,
    pub target_head: DomainHead,
    pub disc_shared: Discriminator,
    pub disc_source: Discriminator,
    pub disc_target: Discriminator,
}

/// Nodes produced by one transfer forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TransferOutput {
    pub y_hat: Var,
    pub shared: Var,
    pub specific: Var,
    pub domain: Domain,
}

impl TransferNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let (e_shared, e_src, e_tgt) = if cfg.shared_embeddings {
            let e = EmbeddingTable::init(store, "embedding", vocab_size, d, cfg.embed_init, rng);
            (e, e, e)
        } else {
            (
                EmbeddingTable::init(store, "shared.embedding", vocab_size, d, cfg.embed_init, rng),
                EmbeddingTable::init(store, "source.embedding", vocab_size, d, cfg.embed_init, rng),
                EmbeddingTable::init(store, "target.embedding", vocab_size, d, cfg.embed_init, rng),
            )
        };
        let agg = Aggregation::TurnConv;
        let shared = MtHcnn::new(store, "shared", cfg, agg, e_shared, false, rng)?;
        let source = MtHcnn::new(store, "source", cfg, agg, e_src, false, rng)?;
        let target = MtHcnn::new(store, "target", cfg, agg, e_tgt, false, rng)?;
        let h = cfg.fc_hidden;
        let source_head = DomainHead::new(store, "source_out", h, rng);
        let target_head = DomainHead::new(store, "target_out", h, rng);
        let dh = cfg.disc_hidden;
        Ok(TransferNet {
            shared,
            source,
            target,
            source_head,
            target_head,
            disc_shared: Discriminator::new(store, "disc_shared", h, dh, rng),
            disc_source: Discriminator::new(store, "disc_source", h, dh, rng),
            disc_target: Discriminator::new(store, "disc_target", h, dh, rng),
        })
    }

    /// Regularized weights Θ: encoders, embeddings and output layers.
    pub fn model_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .shared
            .ids()
            .into_iter()
            .chain(self.source.ids())
            .chain(self.target.ids())
            .chain(self.source_head.ids())
            .chain(self.target_head.ids())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn specific(&self, domain: Domain) -> &MtHcnn {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn specific_disc(&self, domain: Domain) -> &Discriminator {
        match domain {
            Domain::Source => &self.disc_source,
            Domain::Target => &self.disc_target,
        }
    }

    /// Routes by `ex.domain`; an unset domain is a usage error.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, ex: &ConversationExample) -> Result<TransferOutput> {
        let domain = ex
            .domain
            .ok_or_else(|| Error::Usage("transfer forward needs an example with a domain".into()))?;
        self.forward_in(tape, cfg, ex, domain)
    }

    pub fn forward_in(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        ex: &ConversationExample,
        domain: Domain,
    ) -> Result<TransferOutput> {
        let shared = self.shared.features(tape, cfg, ex)?;
        let specific = self.specific(domain).features(tape, cfg, ex)?;
        let head = match domain {
            Domain::Source => &self.source_head,
            Domain::Target => &self.target_head,
        };
        let y_hat = head.forward(tape, shared, specific)?;
        Ok(TransferOutput {
            y_hat,
            shared,
            specific,
            domain,
        })
    }
}

/// `(1/n) Σ_i Σ_d p log p` over discriminator posteriors; lies in `[ln ½, 0]`.
pub fn adversarial_loss(tape: &mut Tape, posteriors: &[Var]) -> Result<Var> {
    if posteriors.is_empty() {
        return Err(Error::Usage("adversarial loss over an empty batch".into()));
    }
    let scale = 1.0 / posteriors.len() as f64;
    let mut terms = Vec::with_capacity(posteriors.len());
    for &p in posteriors {
        terms.push(neg_entropy(tape, p, scale)?);
    }
    sum_all(tape, &terms)
}

fn neg_entropy(tape: &mut Tape, p: Var, scale: f64) -> Result<Var> {
    let lp = tape.log(p)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp)?;
    tape.scale(s, scale)
}

/// `−(1/n) Σ log p(true domain)`; nonnegative.
pub fn specific_domain_loss(tape: &mut Tape, posteriors: &[Var], domain: Domain) -> Result<Var> {
    if posteriors.is_empty() {
        return Err(Error::Usage("domain loss over an empty batch".into()));
    }
    let scale = -1.0 / posteriors.len() as f64;
    let mut terms = Vec::with_capacity(posteriors.len());
    for &p in posteriors {
        terms.push(log_prob(tape, p, domain, scale)?);
    }
    sum_all(tape, &terms)
}

fn log_prob(tape: &mut Tape, p: Var, domain: Domain, scale: f64) -> Result<Var> {
    let pd = tape.slice(p, 0, domain.index(), 1)?;
    let lp = tape.log(pd)?;
    tape.scale(lp, scale)
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let all = tape.concat(terms, 0)?;
    tape.sum(all)
}

/// `Σ ‖θ‖²` over the given parameters (PAD rows excluded).
pub fn regularizer(tape: &mut Tape, ids: &[ParamId]) -> Result<Var> {
    let mut terms = Vec::with_capacity(ids.len());
    for &id in ids {
        terms.push(tape.param_sq_norm(id)?);
    }
    sum_all(tape, &terms)
}

/// Batch sizes that normalize each per-example contribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSizes {
    pub source: usize,
    pub target: usize,
}

/// One example's share of the combined objective (everything except the
/// regularizer). Summing this over a batch and adding `λ4/2 · ‖Θ‖²`
/// reproduces [`combined_loss`].
pub fn example_objective(
    tape: &mut Tape,
    net: &TransferNet,
    cfg: &ModelConfig,
    ex: &ConversationExample,
    sizes: BatchSizes,
    w: &LossWeights,
    mode: AdversarialMode,
) -> Result<Var> {
    let terms = example_terms(tape, net, cfg, ex, sizes, w, mode)?;
    sum_all(tape, &terms)
}

/// The additive terms of [`example_objective`]: squared error, then the
/// shared adversarial term and the domain-specific term when their weights
/// are positive.
pub fn example_terms(
    tape: &mut Tape,
    net: &TransferNet,
    cfg: &ModelConfig,
    ex: &ConversationExample,
    sizes: BatchSizes,
    w: &LossWeights,
    mode: AdversarialMode,
) -> Result<Vec<Var>> {
    let out = net.forward(tape, cfg, ex)?;
    let (n_k, lambda_k) = match out.domain {
        Domain::Source => (sizes.source, w.source),
        Domain::Target => (sizes.target, w.target),
    };
    let n = (sizes.source + sizes.target) as f64;
    let y = tape.input(Tensor::scalar(ex.label))?;
    let err = tape.sub(y, out.y_hat)?;
    let sq = tape.mul(err, err)?;
    let mut terms = vec![tape.scale(sq, 0.5 / n_k as f64)?];

    if w.adversarial > 0.0 {
        match mode {
            AdversarialMode::Alternating => {
                let p = net.disc_shared.forward(tape, out.shared)?;
                terms.push(neg_entropy(tape, p, 0.5 * w.adversarial / n)?);
            }
            AdversarialMode::Reversal => {
                let rev = tape.grad_reverse(out.shared, 1.0)?;
                let p = net.disc_shared.forward(tape, rev)?;
                terms.push(log_prob(tape, p, out.domain, -0.5 * w.adversarial / n)?);
            }
        }
    }
    if lambda_k > 0.0 {
        let p = net.specific_disc(out.domain).forward(tape, out.specific)?;
        terms.push(log_prob(tape, p, out.domain, -0.5 * lambda_k / n_k as f64)?);
    }
    Ok(terms)
}

/// The full objective over a source batch and a target batch on one tape.
pub fn combined_loss(
    tape: &mut Tape,
    net: &TransferNet,
    cfg: &ModelConfig,
    source: &[ConversationExample],
    target: &[ConversationExample],
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Usage("combined loss needs nonempty source and target batches".into()));
    }
    let sizes = BatchSizes {
        source: source.len(),
        target: target.len(),
    };
    let mut terms = Vec::with_capacity(sizes.source + sizes.target + 1);
    for (batch, domain) in [(source, Domain::Source), (target, Domain::Target)] {
        for ex in batch {
            if ex.domain != Some(domain) {
                return Err(Error::Usage(format!("example in the {domain:?} batch has domain {:?}", ex.domain)));
            }
            terms.push(example_objective(tape, net, cfg, ex, sizes, w, AdversarialMode::Alternating)?);
        }
    }
    if w.l2 > 0.0 {
        let r = regularizer(tape, &net.model_ids())?;
        terms.push(tape.scale(r, 0.5 * w.l2)?);
    }
    sum_all(tape, &terms)
}

/// Discriminator-step loss for one detached shared feature vector:
/// `−(1/n) log p(domain)`.
pub fn shared_disc_objective(
    tape: &mut Tape,
    net: &TransferNet,
    features: Tensor,
    domain: Domain,
    n: usize,
) -> Result<Var> {
    let f = tape.input(features)?;
    let p = net.disc_shared.forward(tape, f)?;
    log_prob(tape, p, domain, -1.0 / n as f64)
}
