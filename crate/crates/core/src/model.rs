//! The assembled regressor: patch embedding, class token, positional table,
//! encoder stack and a two-layer regression head.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::autograd::{Graph, Var};
use crate::encoder::{encoder_stack, Attention, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::patch::{embed_single_step, embed_two_step, PatchTrace, PatcherConfig, PatcherKind, RunningStats};
use crate::tensor::{Real, Tensor};

/// Forward-pass mode. Training mode carries the dropout randomness.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::config("dropout", format!("probability {p} outside [0, 1)")));
                }
                Ok(x)
            }
            Mode::Train(rng) => g.dropout(x, p, true, &mut **rng),
        }
    }
}

/// The four trained configurations: patcher kind × pretrained encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelVariant {
    pub patcher: PatcherKind,
    pub pretrained: bool,
}

impl ModelVariant {
    pub const VIT: Self = Self::new(PatcherKind::SingleStep, false);
    pub const VIT_PRETRAINED: Self = Self::new(PatcherKind::SingleStep, true);
    pub const EEGVIT: Self = Self::new(PatcherKind::TwoStep, false);
    pub const EEGVIT_PRETRAINED: Self = Self::new(PatcherKind::TwoStep, true);

    pub const ALL: [Self; 4] = [
        Self::VIT,
        Self::VIT_PRETRAINED,
        Self::EEGVIT,
        Self::EEGVIT_PRETRAINED,
    ];

    pub const fn new(patcher: PatcherKind, pretrained: bool) -> Self {
        ModelVariant {
            patcher,
            pretrained,
        }
    }

    /// Short identifier used on the command line and in reports.
    pub fn name(&self) -> &'static str {
        match (self.patcher, self.pretrained) {
            (PatcherKind::SingleStep, false) => "vit",
            (PatcherKind::SingleStep, true) => "vit-pre",
            (PatcherKind::TwoStep, false) => "eegvit",
            (PatcherKind::TwoStep, true) => "eegvit-pre",
        }
    }

    /// Row label as it appears in results tables.
    pub fn display_name(&self) -> &'static str {
        match (self.patcher, self.pretrained) {
            (PatcherKind::SingleStep, false) => "ViT-Base",
            (PatcherKind::SingleStep, true) => "ViT-Base Pre-trained",
            (PatcherKind::TwoStep, false) => "EEGViT",
            (PatcherKind::TwoStep, true) => "EEGViT Pre-trained",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config("variant", format!("unknown variant `{s}` (vit|vit-pre|eegvit|eegvit-pre)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub patcher: PatcherConfig,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub outputs: usize,
}

impl ModelConfig {
    /// Canonical ViT-Base sized model for the given patcher.
    pub fn vit_base(kind: PatcherKind) -> Self {
        ModelConfig {
            patcher: PatcherConfig::canonical(kind),
            encoder: EncoderConfig::vit_base(),
            head_hidden: 1000,
            head_dropout: 0.1,
            outputs: 2,
        }
    }

    /// Two layers, hidden 64, four heads, on canonical 128×500 input.
    pub fn reduced(kind: PatcherKind) -> Self {
        let encoder = EncoderConfig::reduced();
        ModelConfig {
            patcher: PatcherConfig {
                // Unused by the single-step patcher, so left canonical there
                // and a config inferred from tensor shapes compares equal.
                channels_stage1: match kind {
                    PatcherKind::TwoStep => 32,
                    PatcherKind::SingleStep => 256,
                },
                embed_dim: encoder.hidden,
                ..PatcherConfig::canonical(kind)
            },
            encoder,
            ..Self::vit_base(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patcher.validate()?;
        self.encoder.validate()?;
        if self.patcher.embed_dim != self.encoder.hidden {
            return Err(Error::config(
                "model",
                format!(
                    "patch embed_dim {} != encoder hidden {}",
                    self.patcher.embed_dim, self.encoder.hidden
                ),
            ));
        }
        if self.patcher.token_count() != self.encoder.token_count {
            return Err(Error::config(
                "model",
                format!(
                    "patcher emits {} tokens but the encoder expects {}",
                    self.patcher.token_count(),
                    self.encoder.token_count
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config("model", "head dropout outside [0, 1)"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.encoder.hidden;
        let mut specs = self.patcher.param_specs();
        specs.push(ParamSpec::weight("embed.cls", &[d]));
        specs.push(ParamSpec::weight("embed.pos", &[self.encoder.token_count + 1, d]));
        specs.extend(self.encoder.param_specs());
        specs.extend([
            ParamSpec::weight("head.fc1.weight", &[self.head_hidden, d]),
            ParamSpec::zeros("head.fc1.bias", &[self.head_hidden]),
            ParamSpec::weight("head.fc2.weight", &[self.outputs, self.head_hidden]),
            ParamSpec::zeros("head.fc2.bias", &[self.outputs]),
        ]);
        specs
    }

    /// Recover the architecture from a stored parameter set. The head count
    /// is not visible in tensor shapes and must be supplied.
    pub fn infer<T: Real>(params: &ParamStore<T>, heads: usize) -> Result<Self> {
        let dims = |n: &str| params.get(n).map(|t| t.shape().to_vec());
        let kind = if params.contains("patch.bn.gamma") {
            PatcherKind::TwoStep
        } else {
            PatcherKind::SingleStep
        };
        let cls = dims("embed.cls")?;
        let pos = dims("embed.pos")?;
        let hidden = cls[0];
        let layers = (0..)
            .take_while(|i| params.contains(&format!("encoder.{i}.ln1.gamma")))
            .count();
        let mlp = dims("encoder.0.mlp.fc1.weight")?[0];
        let fc1 = dims("head.fc1.weight")?;
        let fc2 = dims("head.fc2.weight")?;
        let conv1 = dims("patch.conv1.weight")?;
        let mut cfg = ModelConfig::vit_base(kind);
        cfg.encoder = EncoderConfig {
            layers,
            hidden,
            mlp,
            heads,
            token_count: pos[0] - 1,
            ..cfg.encoder
        };
        cfg.patcher.embed_dim = hidden;
        match kind {
            PatcherKind::TwoStep => {
                cfg.patcher.channels_stage1 = conv1[0];
                cfg.patcher.temporal_kernel = conv1[3];
                cfg.patcher.spatial_kernel = dims("patch.conv2.weight")?[2];
            }
            PatcherKind::SingleStep => {
                cfg.patcher.spatial_kernel = conv1[2];
                cfg.patcher.temporal_kernel = conv1[3];
            }
        }
        cfg.head_hidden = fc1[0];
        cfg.outputs = fc2[0];
        cfg.validate()?;
        for spec in cfg.param_specs() {
            let found = dims(&spec.name)?;
            if found != spec.shape {
                return Err(Error::ExtentMismatch {
                    name: spec.name,
                    model: spec.shape,
                    archive: found,
                });
            }
        }
        Ok(cfg)
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub patch: PatchTrace,
    pub attention: Vec<Attention>,
    pub prediction: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EEGViTModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> EEGViTModel<T> {
    /// Fresh weights: truncated normal (std 0.02, ±2 std) for weights, class
    /// token and positional table; zero biases; unit norm scales.
    pub fn init_fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), seed);
        Ok(EEGViTModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !specs.iter().any(|s| s.name == *n))
            .collect();
        if !extra.is_empty() {
            return Err(Error::InvalidData(format!("unexpected tensors: {}", extra.join(", "))));
        }
        for spec in specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ExtentMismatch {
                    name: spec.name,
                    model: spec.shape,
                    archive: t.shape().to_vec(),
                });
            }
        }
        Ok(EEGViTModel { config, params })
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    fn running_stats(&self) -> Result<Option<RunningStats<T>>> {
        if self.config.patcher.kind != PatcherKind::TwoStep {
            return Ok(None);
        }
        Ok(Some(RunningStats {
            mean: self.params.get("patch.bn.running_mean")?.clone(),
            var: self.params.get("patch.bn.running_var")?.clone(),
        }))
    }

    /// Record a forward pass on `g`. In training mode the batch-norm running
    /// statistics of `self` are updated.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        p: &Bound,
        trials: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardTrace> {
        let mut stats = self.running_stats()?;
        let trace = forward_with(&self.config, g, p, stats.as_mut(), trials, mode)?;
        if mode.is_training() {
            if let Some(s) = stats {
                *self.params.get_mut("patch.bn.running_mean")? = s.mean;
                *self.params.get_mut("patch.bn.running_var")? = s.var;
            }
        }
        Ok(trace)
    }

    /// Eval-mode predictions `[B, outputs]` for `trials: [B, 1, electrodes, samples]`.
    pub fn predict(&self, trials: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(trials.clone());
        let mut stats = self.running_stats()?;
        let trace = forward_with(&self.config, &mut g, &p, stats.as_mut(), x, &mut Mode::Eval)?;
        Ok(g.value(trace.prediction).clone())
    }
}

fn forward_with<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    stats: Option<&mut RunningStats<T>>,
    trials: Var,
    mode: &mut Mode<'_>,
) -> Result<ForwardTrace> {
    let patch = match (cfg.patcher.kind, stats) {
        (PatcherKind::TwoStep, Some(stats)) => {
            embed_two_step(g, &cfg.patcher, p, stats, trials, mode.is_training())?
        }
        (PatcherKind::TwoStep, None) => {
            return Err(Error::MissingTensors(vec!["patch.bn.running_mean".into()]))
        }
        (PatcherKind::SingleStep, _) => embed_single_step(g, &cfg.patcher, p, trials)?,
    };
    let x = g.prepend_token(p.get("embed.cls")?, patch.tokens)?;
    let x = g.add_broadcast(x, p.get("embed.pos")?).map_err(|e| e.within("embed.pos"))?;
    let (x, attention) = encoder_stack(g, p, x, &cfg.encoder, mode)?;
    let cls = g.select_token(x, 0)?;
    let h = g
        .linear(cls, p.get("head.fc1.weight")?, Some(p.get("head.fc1.bias")?))
        .map_err(|e| e.within("head.fc1"))?;
    let h = mode.dropout(g, h, cfg.head_dropout)?;
    let prediction = g
        .linear(h, p.get("head.fc2.weight")?, Some(p.get("head.fc2.bias")?))
        .map_err(|e| e.within("head.fc2"))?;
    Ok(ForwardTrace {
        patch,
        attention,
        prediction,
    })
}
