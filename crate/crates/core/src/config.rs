//! Model and training configuration, plus the flat `key = value` file format.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::text::SequenceShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Multi-turn hybrid CNN with the turn-aggregating convolution.
    MtHcnn,
    /// Same, with the turn stack flattened straight into the dense head.
    MtHcnnD,
    /// Shared-private transfer model.
    Transfer,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::MtHcnn => 0,
            ModelKind::MtHcnnD => 1,
            ModelKind::Transfer => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::MtHcnn),
            1 => Some(ModelKind::MtHcnnD),
            2 => Some(ModelKind::Transfer),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MtHcnn => "mt_hcnn",
            ModelKind::MtHcnnD => "mt_hcnn_d",
            ModelKind::Transfer => "transfer",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mt_hcnn" => Ok(ModelKind::MtHcnn),
            "mt_hcnn_d" => Ok(ModelKind::MtHcnnD),
            "transfer" => Ok(ModelKind::Transfer),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// How the turn-aggregation convolution reads the `n × |Z|` stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TurnConvMode {
    /// Square `k × k` kernel sliding over both axes.
    Grid,
    /// `k × |Z|` kernel spanning the whole feature axis, sliding over turns.
    Turns,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialMode {
    /// Discriminator step on detached shared features, then a model step.
    Alternating,
    /// Single pass through a gradient-reversal layer.
    Reversal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub m: usize,
    pub n_max: usize,
    pub cnn1_window: usize,
    pub cnn1_channels: usize,
    pub pyramid_kernel: usize,
    pub pyramid_channels: (usize, usize),
    pub pyramid_pool: usize,
    /// Max-pool whatever spatial grid is left after the second pyramid stage
    /// down to 1×1, so `|H_p|` equals the channel count for any `m`.
    pub pyramid_global_pool: bool,
    pub turn_kernel: usize,
    pub turn_channels: usize,
    pub turn_pool: usize,
    pub turn_mode: TurnConvMode,
    pub fc_hidden: usize,
    pub disc_hidden: usize,
    /// Transfer model only: one embedding table for all three encoders.
    pub shared_embeddings: bool,
    /// Embeddings start uniform in `(−embed_init, embed_init)`.
    pub embed_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 100,
            m: 50,
            n_max: 3,
            cnn1_window: 3,
            cnn1_channels: 64,
            pyramid_kernel: 3,
            pyramid_channels: (8, 16),
            pyramid_pool: 2,
            pyramid_global_pool: true,
            turn_kernel: 2,
            turn_channels: 8,
            turn_pool: 2,
            turn_mode: TurnConvMode::Grid,
            fc_hidden: 128,
            disc_hidden: 64,
            shared_embeddings: true,
            embed_init: 0.1,
        }
    }
}

/// Pool window clipped to the feature map so that small maps still pool.
pub(crate) fn clip_pool(pool: usize, extent: usize) -> usize {
    pool.min(extent)
}

fn pooled(extent: usize, pool: usize) -> usize {
    let win = clip_pool(pool, extent);
    (extent - win) / pool + 1
}

impl ModelConfig {
    /// Small shapes for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 4,
            m: 6,
            n_max: 3,
            cnn1_window: 2,
            cnn1_channels: 3,
            pyramid_kernel: 2,
            pyramid_channels: (2, 3),
            pyramid_pool: 2,
            pyramid_global_pool: true,
            turn_kernel: 2,
            turn_channels: 3,
            turn_pool: 2,
            turn_mode: TurnConvMode::Grid,
            fc_hidden: 5,
            disc_hidden: 3,
            shared_embeddings: true,
            embed_init: 0.1,
        }
    }

    pub fn shape(&self) -> SequenceShape {
        SequenceShape {
            m: self.m,
            n_max: self.n_max,
        }
    }

    pub fn bcnn_dim(&self) -> usize {
        4 * self.cnn1_channels
    }

    /// Spatial size of the pyramid output per channel.
    pub fn pyramid_grid(&self) -> Result<(usize, usize)> {
        let k = self.pyramid_kernel;
        let mut side = self.m;
        for stage in 1..=2 {
            if side < k {
                return Err(Error::Config(format!(
                    "sentence length {} too small for pyramid stage {stage} (kernel {k}, map {side})",
                    self.m
                )));
            }
            side = pooled(side + 1 - k, self.pyramid_pool);
        }
        Ok(if self.pyramid_global_pool { (1, 1) } else { (side, side) })
    }

    pub fn pyramid_dim(&self) -> Result<usize> {
        let (h, w) = self.pyramid_grid()?;
        Ok(h * w * self.pyramid_channels.1)
    }

    /// `|Z| = |H_b| + |H_p|`.
    pub fn z_dim(&self) -> Result<usize> {
        Ok(self.bcnn_dim() + self.pyramid_dim()?)
    }

    /// Output grid `(rows, cols, channels)` of the turn-aggregation stage.
    pub fn turn_out_dims(&self) -> Result<(usize, usize, usize)> {
        let z = self.z_dim()?;
        let k = self.turn_kernel;
        if self.n_max < k {
            return Err(Error::Config(format!(
                "n_max {} is smaller than the turn kernel {k}",
                self.n_max
            )));
        }
        let rows = self.n_max + 1 - k;
        match self.turn_mode {
            TurnConvMode::Grid => {
                if z < k {
                    return Err(Error::Config("pair representation narrower than turn kernel".into()));
                }
                let cols = z + 1 - k;
                Ok((pooled(rows, self.turn_pool), pooled(cols, self.turn_pool), self.turn_channels))
            }
            TurnConvMode::Turns => Ok((pooled(rows, self.turn_pool), 1, self.turn_channels)),
        }
    }

    /// Width of the input to the dense head.
    pub fn head_input_dim(&self, kind: ModelKind) -> Result<usize> {
        match kind {
            ModelKind::MtHcnnD => Ok(self.n_max * self.z_dim()?),
            _ => {
                let (r, c, ch) = self.turn_out_dims()?;
                Ok(r * c * ch)
            }
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("m", self.m),
            ("n_max", self.n_max),
            ("cnn1_window", self.cnn1_window),
            ("cnn1_channels", self.cnn1_channels),
            ("pyramid_kernel", self.pyramid_kernel),
            ("pyramid_channels1", self.pyramid_channels.0),
            ("pyramid_channels2", self.pyramid_channels.1),
            ("pyramid_pool", self.pyramid_pool),
            ("turn_kernel", self.turn_kernel),
            ("turn_channels", self.turn_channels),
            ("turn_pool", self.turn_pool),
            ("fc_hidden", self.fc_hidden),
            ("disc_hidden", self.disc_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.cnn1_window > self.m {
            return Err(Error::Config(format!(
                "cnn1_window {} exceeds sentence length {}",
                self.cnn1_window, self.m
            )));
        }
        if !(self.embed_init > 0.0 && self.embed_init.is_finite()) {
            return Err(Error::Config(format!("embed_init must be positive, got {}", self.embed_init)));
        }
        self.head_input_dim(kind)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Adversarial entropy term on shared features.
    pub adversarial: f64,
    /// Source-domain discrimination on source-specific features.
    pub source: f64,
    /// Target-domain discrimination on target-specific features.
    pub target: f64,
    /// Squared Frobenius norm of the model weights.
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 0.05,
            source: 0.05,
            target: 0.05,
            l2: 0.005,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            adversarial: 0.0,
            source: 0.0,
            target: 0.0,
            l2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.adversarial),
            ("lambda2", self.source),
            ("lambda3", self.target),
            ("lambda4", self.l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation-MAP improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adversarial_mode: AdversarialMode,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.08,
            rho: 0.95,
            epsilon: 1e-6,
            batch_size: 64,
            epochs: 20,
            patience: 5,
            seed: 0,
            weights: LossWeights::default(),
            adversarial_mode: AdversarialMode::Alternating,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointDtype {
    F64,
    F32,
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub group_size: usize,
    pub min_count: usize,
    pub candidate_size: usize,
    pub checkpoint_dtype: CheckpointDtype,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub source_train_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            kind: ModelKind::MtHcnn,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            group_size: 10,
            min_count: 1,
            candidate_size: 15,
            checkpoint_dtype: CheckpointDtype::F64,
            train_path: None,
            valid_path: None,
            test_path: None,
            source_train_path: None,
            vocab_path: None,
            bank_path: None,
            log_path: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Format {
        line,
        detail: format!("bad value {v:?} for {key}"),
    })
}

fn flag(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Format {
            line,
            detail: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

impl Config {
    /// Parses `key = value` lines. `#` starts a comment; unknown keys are
    /// errors. Relative paths are resolved against `base_dir` when given.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut c = Config::default();
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Format {
                line,
                detail: format!("expected key = value, got {content:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let m = &mut c.model;
            let t = &mut c.train;
            match key {
                "model" => c.kind = v.parse()?,
                "embed_dim" => m.embed_dim = num(key, v, line)?,
                "m" => m.m = num(key, v, line)?,
                "n_max" => m.n_max = num(key, v, line)?,
                "cnn1_window" => m.cnn1_window = num(key, v, line)?,
                "cnn1_channels" => m.cnn1_channels = num(key, v, line)?,
                "pyramid_kernel" => m.pyramid_kernel = num(key, v, line)?,
                "pyramid_channels1" => m.pyramid_channels.0 = num(key, v, line)?,
                "pyramid_channels2" => m.pyramid_channels.1 = num(key, v, line)?,
                "pyramid_pool" => m.pyramid_pool = num(key, v, line)?,
                "pyramid_global_pool" => m.pyramid_global_pool = flag(key, v, line)?,
                "turn_kernel" => m.turn_kernel = num(key, v, line)?,
                "turn_channels" => m.turn_channels = num(key, v, line)?,
                "turn_pool" => m.turn_pool = num(key, v, line)?,
                "turn_mode" => {
                    m.turn_mode = match v {
                        "grid" => TurnConvMode::Grid,
                        "turns" => TurnConvMode::Turns,
                        _ => return Err(Error::Config(format!("unknown turn_mode {v:?}"))),
                    }
                }
                "fc_hidden" => m.fc_hidden = num(key, v, line)?,
                "disc_hidden" => m.disc_hidden = num(key, v, line)?,
                "shared_embeddings" => m.shared_embeddings = flag(key, v, line)?,
                "embed_init" => m.embed_init = num(key, v, line)?,
                "learning_rate" => t.learning_rate = num(key, v, line)?,
                "rho" => t.rho = num(key, v, line)?,
                "epsilon" => t.epsilon = num(key, v, line)?,
                "batch_size" => t.batch_size = num(key, v, line)?,
                "epochs" => t.epochs = num(key, v, line)?,
                "patience" => t.patience = num(key, v, line)?,
                "seed" => t.seed = num(key, v, line)?,
                "lambda1" => t.weights.adversarial = num(key, v, line)?,
                "lambda2" => t.weights.source = num(key, v, line)?,
                "lambda3" => t.weights.target = num(key, v, line)?,
                "lambda4" => t.weights.l2 = num(key, v, line)?,
                "adversarial_mode" => {
                    t.adversarial_mode = match v {
                        "alternating" => AdversarialMode::Alternating,
                        "reversal" => AdversarialMode::Reversal,
                        _ => return Err(Error::Config(format!("unknown adversarial_mode {v:?}"))),
                    }
                }
                "parallel" => {
                    t.exec = if flag(key, v, line)? {
                        Exec::Parallel
                    } else {
                        Exec::Sequential
                    }
                }
                "group_size" => c.group_size = num(key, v, line)?,
                "min_count" => c.min_count = num(key, v, line)?,
                "candidate_size" => c.candidate_size = num(key, v, line)?,
                "checkpoint_dtype" => {
                    c.checkpoint_dtype = match v {
                        "f64" => CheckpointDtype::F64,
                        "f32" => CheckpointDtype::F32,
                        _ => return Err(Error::Config(format!("unknown checkpoint_dtype {v:?}"))),
                    }
                }
                "train" => c.train_path = Some(path(v)),
                "valid" => c.valid_path = Some(path(v)),
                "test" => c.test_path = Some(path(v)),
                "source_train" => c.source_train_path = Some(path(v)),
                "vocab" => c.vocab_path = Some(path(v)),
                "bank" => c.bank_path = Some(path(v)),
                "log" => c.log_path = Some(path(v)),
                _ => {
                    return Err(Error::Config(format!("unknown key {key:?} at line {line}")));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.kind)?;
        self.train.weights.validate()?;
        let t = &self.train;
        if !(t.rho > 0.0 && t.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", t.rho)));
        }
        if !(t.epsilon > 0.0) || !(t.learning_rate >= 0.0) {
            return Err(Error::Config("epsilon must be positive and learning_rate nonnegative".into()));
        }
        if t.batch_size == 0 || self.group_size == 0 || self.candidate_size == 0 {
            return Err(Error::Config("batch_size, group_size and candidate_size must be positive".into()));
        }
        Ok(())
    }
}
