//! Hybrid CNN pair matcher.
//!
//! Two branches over a sentence pair `(X1, X2)`, each `[m × d]`:
//!
//! * sentence encoding: a shared 1-D convolution, max-over-time pooling and
//!   ReLU give `h1`, `h2`; they are combined as `h1 ⊕ h2 ⊕ (h1 − h2) ⊕ (h1 · h2)`.
//! * interaction: `M[i, j] = <x1_i, x2_j>` passes through two
//!   conv → ReLU → max-pool stages (plus an optional global max-pool).
//!
//! The pair representation is the concatenation of both branch outputs.

use rand::Rng;

use crate::config::{clip_pool, ModelConfig};
use crate::error::Result;
use crate::init::{glorot, zeros};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HcnnParams {
    pub cnn1_w: ParamId,
    pub cnn1_b: ParamId,
    pub pyramid1_w: ParamId,
    pub pyramid1_b: ParamId,
    pub pyramid2_w: ParamId,
    pub pyramid2_b: ParamId,
}

/// Outputs of one pair encoding.
#[derive(Clone, Copy, Debug)]
pub struct PairRepr {
    pub h_b: Var,
    pub h_p: Var,
    pub z: Var,
}

impl HcnnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, w, c) = (cfg.embed_dim, cfg.cnn1_window, cfg.cnn1_channels);
        let k = cfg.pyramid_kernel;
        let (p1, p2) = cfg.pyramid_channels;
        HcnnParams {
            cnn1_w: glorot(store, format!("{prefix}.cnn1.w"), vec![w, d, c], w * d, c, rng),
            cnn1_b: zeros(store, format!("{prefix}.cnn1.b"), c),
            pyramid1_w: glorot(store, format!("{prefix}.pyramid1.w"), vec![k, k, 1, p1], k * k, p1, rng),
            pyramid1_b: zeros(store, format!("{prefix}.pyramid1.b"), p1),
            pyramid2_w: glorot(store, format!("{prefix}.pyramid2.w"), vec![k, k, p1, p2], k * k * p1, p2, rng),
            pyramid2_b: zeros(store, format!("{prefix}.pyramid2.b"), p2),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.cnn1_w,
            self.cnn1_b,
            self.pyramid1_w,
            self.pyramid1_b,
            self.pyramid2_w,
            self.pyramid2_b,
        ]
    }

    /// `relu(max_t conv1d(x))`: fixed-size sentence vector.
    pub fn encode_sentence(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.cnn1_w);
        let b = tape.param(self.cnn1_b);
        let conv = tape.conv1d(x, w, b)?;
        let (len, ch) = (tape.shape(conv)[0], tape.shape(conv)[1]);
        let grid = tape.reshape(conv, vec![len, 1, ch])?;
        let pooled = tape.maxpool2d(grid, (len, 1), (len, 1))?;
        let flat = tape.reshape(pooled, vec![ch])?;
        tape.relu(flat)
    }

    /// `h1 ⊕ h2 ⊕ (h1 − h2) ⊕ (h1 · h2)`.
    pub fn combine(&self, tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
        let diff = tape.sub(h1, h2)?;
        let prod = tape.mul(h1, h2)?;
        tape.concat(&[h1, h2, diff, prod], 0)
    }

    pub fn bcnn_encode(&self, tape: &mut Tape, x1: Var, x2: Var) -> Result<Var> {
        let h1 = self.encode_sentence(tape, x1)?;
        let h2 = self.encode_sentence(tape, x2)?;
        self.combine(tape, h1, h2)
    }

    fn conv_relu_pool(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId, pool: usize) -> Result<Var> {
        let w = tape.param(w);
        let b = tape.param(b);
        let c = tape.conv2d(x, w, b)?;
        let r = tape.relu(c)?;
        let (h, wd) = (tape.shape(r)[0], tape.shape(r)[1]);
        tape.maxpool2d(r, (clip_pool(pool, h), clip_pool(pool, wd)), (pool, pool))
    }

    /// Interaction branch over a precomputed `M`, returned flattened.
    pub fn pyramid_from_matrix(&self, tape: &mut Tape, cfg: &ModelConfig, m: Var) -> Result<Var> {
        let (rows, cols) = (tape.shape(m)[0], tape.shape(m)[1]);
        let grid = tape.reshape(m, vec![rows, cols, 1])?;
        let s1 = self.conv_relu_pool(tape, grid, self.pyramid1_w, self.pyramid1_b, cfg.pyramid_pool)?;
        let mut s2 = self.conv_relu_pool(tape, s1, self.pyramid2_w, self.pyramid2_b, cfg.pyramid_pool)?;
        if cfg.pyramid_global_pool {
            let (h, w) = (tape.shape(s2)[0], tape.shape(s2)[1]);
            if h * w > 1 {
                s2 = tape.maxpool2d(s2, (h, w), (h, w))?;
            }
        }
        tape.flatten(s2)
    }

    pub fn pyramid_encode(&self, tape: &mut Tape, cfg: &ModelConfig, x1: Var, x2: Var) -> Result<Var> {
        let m = tape.dot_interaction(x1, x2)?;
        self.pyramid_from_matrix(tape, cfg, m)
    }

    /// Full pair encoding `Z = H_b ⊕ H_p`.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, x1: Var, x2: Var) -> Result<PairRepr> {
        let h_b = self.bcnn_encode(tape, x1, x2)?;
        let h_p = self.pyramid_encode(tape, cfg, x1, x2)?;
        let z = tape.concat(&[h_b, h_p], 0)?;
        Ok(PairRepr { h_b, h_p, z })
    }

    /// Pair encoding when the second sentence's vector `h2` is already known.
    pub(crate) fn forward_with_encoded(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        x1: Var,
        x2: Var,
        h2: Var,
    ) -> Result<Var> {
        let h1 = self.encode_sentence(tape, x1)?;
        let h_b = self.combine(tape, h1, h2)?;
        let h_p = self.pyramid_encode(tape, cfg, x1, x2)?;
        tape.concat(&[h_b, h_p], 0)
    }
}
