//! Multi-turn matcher: one hybrid-CNN pair encoding per (utterance, candidate),
//! stacked into an `n × |Z|` grid, aggregated by a small convolution and
//! scored by a dense head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{clip_pool, ModelConfig, ModelKind, TurnConvMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hcnn::HcnnParams;
use crate::init::{glorot, zeros};
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::text::{ConversationExample, Domain, EmbeddingTable};
use crate::transfer::TransferNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Convolution + max-pool over the turn stack.
    TurnConv,
    /// Stack flattened straight into the dense head.
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtHcnn {
    pub aggregation: Aggregation,
    pub embedding: EmbeddingTable,
    pub hcnn: HcnnParams,
    pub turn_conv: Option<(ParamId, ParamId)>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    /// Scalar output layer; absent when the features feed a transfer head.
    pub head: Option<(ParamId, ParamId)>,
}

pub(crate) fn check_example(cfg: &ModelConfig, ex: &ConversationExample) -> Result<()> {
    let ok = ex.utterances.len() == cfg.n_max
        && ex.candidate.len() == cfg.m
        && ex.utterances.iter().all(|u| u.len() == cfg.m);
    if ok {
        Ok(())
    } else {
        Err(Error::dim(
            "example",
            format!(
                "expected {} utterances of length {}, got {} (candidate length {})",
                cfg.n_max,
                cfg.m,
                ex.utterances.len(),
                ex.candidate.len()
            ),
        ))
    }
}

impl MtHcnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        aggregation: Aggregation,
        embedding: EmbeddingTable,
        with_head: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kind = match aggregation {
            Aggregation::TurnConv => ModelKind::MtHcnn,
            Aggregation::Flat => ModelKind::MtHcnnD,
        };
        cfg.validate(kind)?;
        let hcnn = HcnnParams::new(store, &format!("{prefix}.hcnn"), cfg, rng);
        let turn_conv = match aggregation {
            Aggregation::TurnConv => {
                let k = cfg.turn_kernel;
                let c = cfg.turn_channels;
                let kw = match cfg.turn_mode {
                    TurnConvMode::Grid => k,
                    TurnConvMode::Turns => cfg.z_dim()?,
                };
                Some((
                    glorot(store, format!("{prefix}.turn_conv.w"), vec![k, kw, 1, c], k * kw, c, rng),
                    zeros(store, format!("{prefix}.turn_conv.b"), c),
                ))
            }
            Aggregation::Flat => None,
        };
        let din = cfg.head_input_dim(kind)?;
        let h = cfg.fc_hidden;
        let fc_w = glorot(store, format!("{prefix}.fc.w"), vec![din, h], din, h, rng);
        let fc_b = zeros(store, format!("{prefix}.fc.b"), h);
        let head = with_head.then(|| {
            (
                glorot(store, format!("{prefix}.out.w"), vec![h, 1], h, 1, rng),
                zeros(store, format!("{prefix}.out.b"), 1),
            )
        });
        Ok(MtHcnn {
            aggregation,
            embedding,
            hcnn,
            turn_conv,
            fc_w,
            fc_b,
            head,
        })
    }

    /// Parameters owned by this network, embedding table included.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding.param];
        ids.extend(self.hcnn.ids());
        if let Some((w, b)) = self.turn_conv {
            ids.extend([w, b]);
        }
        ids.extend([self.fc_w, self.fc_b]);
        if let Some((w, b)) = self.head {
            ids.extend([w, b]);
        }
        ids
    }

    /// The stacked pair representations `H`, shape `[n_max × |Z|]`.
    pub fn stack(&self, tape: &mut Tape, cfg: &ModelConfig, ex: &ConversationExample) -> Result<Var> {
        check_example(cfg, ex)?;
        let r = tape.gather(self.embedding.param, &ex.candidate)?;
        let h_r = self.hcnn.encode_sentence(tape, r)?;
        let mut zs = Vec::with_capacity(ex.utterances.len());
        for u in &ex.utterances {
            let x = tape.gather(self.embedding.param, u)?;
            zs.push(self.hcnn.forward_with_encoded(tape, cfg, x, r, h_r)?);
        }
        let h = tape.concat(&zs, 0)?;
        let z = tape.shape(zs[0])[0];
        tape.reshape(h, vec![zs.len(), z])
    }

    /// Aggregated representation fed to the dense layer.
    pub fn aggregate(&self, tape: &mut Tape, cfg: &ModelConfig, h: Var) -> Result<Var> {
        let Some((w, b)) = self.turn_conv else {
            return tape.flatten(h);
        };
        let (n, z) = (tape.shape(h)[0], tape.shape(h)[1]);
        let grid = tape.reshape(h, vec![n, z, 1])?;
        let (w, b) = (tape.param(w), tape.param(b));
        let conv = tape.conv2d(grid, w, b)?;
        let act = tape.relu(conv)?;
        let (rows, cols) = (tape.shape(act)[0], tape.shape(act)[1]);
        let p = cfg.turn_pool;
        let pooled = match cfg.turn_mode {
            TurnConvMode::Grid => tape.maxpool2d(act, (clip_pool(p, rows), clip_pool(p, cols)), (p, p))?,
            TurnConvMode::Turns => tape.maxpool2d(act, (clip_pool(p, rows), 1), (p, 1))?,
        };
        tape.flatten(pooled)
    }

    /// Hidden representation `O` (post-ReLU dense layer), `[fc_hidden]`.
    pub fn features(&self, tape: &mut Tape, cfg: &ModelConfig, ex: &ConversationExample) -> Result<Var> {
        let h = self.stack(tape, cfg, ex)?;
        let p = self.aggregate(tape, cfg, h)?;
        let (w, b) = (tape.param(self.fc_w), tape.param(self.fc_b));
        let o = tape.affine(p, w, Some(b))?;
        tape.relu(o)
    }

    /// Matching score in (0, 1).
    pub fn score_var(&self, tape: &mut Tape, cfg: &ModelConfig, ex: &ConversationExample) -> Result<Var> {
        let (hw, hb) = self
            .head
            .ok_or_else(|| Error::Usage("network has no scalar output head".into()))?;
        let o = self.features(tape, cfg, ex)?;
        let (w, b) = (tape.param(hw), tape.param(hb));
        let logit = tape.affine(o, w, Some(b))?;
        tape.sigmoid(logit)
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Single(MtHcnn),
    Transfer(Box<TransferNet>),
}

/// A network together with its configuration and weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    /// Fresh model with weights drawn from a seeded ChaCha stream.
    pub fn new(kind: ModelKind, config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate(kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match kind {
            ModelKind::MtHcnn | ModelKind::MtHcnnD => {
                let agg = if kind == ModelKind::MtHcnn {
                    Aggregation::TurnConv
                } else {
                    Aggregation::Flat
                };
                let emb = EmbeddingTable::init(&mut store, "embedding", vocab_size, config.embed_dim, config.embed_init, &mut rng);
                Network::Single(MtHcnn::new(&mut store, "mt", &config, agg, emb, true, &mut rng)?)
            }
            ModelKind::Transfer => {
                Network::Transfer(Box::new(TransferNet::new(&mut store, &config, vocab_size, &mut rng)?))
            }
        };
        Ok(Model {
            kind,
            config,
            store,
            net,
        })
    }

    pub fn single(&self) -> Option<&MtHcnn> {
        match &self.net {
            Network::Single(m) => Some(m),
            Network::Transfer(_) => None,
        }
    }

    pub fn transfer(&self) -> Option<&TransferNet> {
        match &self.net {
            Network::Transfer(t) => Some(t),
            Network::Single(_) => None,
        }
    }

    /// Builds the score node on `tape`. Transfer models use the branch of the
    /// example's domain, defaulting to the target branch.
    pub fn score_var(&self, tape: &mut Tape, ex: &ConversationExample) -> Result<Var> {
        match &self.net {
            Network::Single(m) => m.score_var(tape, &self.config, ex),
            Network::Transfer(t) => {
                let domain = ex.domain.unwrap_or(Domain::Target);
                Ok(t.forward_in(tape, &self.config, ex, domain)?.y_hat)
            }
        }
    }

    pub fn score(&self, ex: &ConversationExample) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let s = self.score_var(&mut tape, ex)?;
        Ok(tape.item(s))
    }

    /// Shared and domain-specific feature vectors of a transfer model, routed
    /// by `domain`.
    pub fn transfer_features(&self, ex: &ConversationExample, domain: Domain) -> Result<(Vec<f64>, Vec<f64>)> {
        let net = self
            .transfer()
            .ok_or_else(|| Error::Usage("features are defined for transfer models only".into()))?;
        let mut tape = Tape::new(&self.store);
        let out = net.forward_in(&mut tape, &self.config, ex, domain)?;
        Ok((tape.value(out.shared).to_vec(), tape.value(out.specific).to_vec()))
    }

    /// Scores a mini-batch; identical to scoring each example on its own.
    pub fn score_batch(&self, examples: &[ConversationExample], exec: Exec) -> Result<Vec<f64>> {
        exec.try_map(examples, |ex| self.score(ex))
    }
}
