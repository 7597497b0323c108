//! Patch embedding: one EEG trial `[1, electrodes, samples]` becomes a grid
//! of tokens, flattened row-major (electrode-group rows, time columns).

use crate::autograd::{BatchNormConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatcherKind {
    /// Temporal `1×T` convolution, batch norm, then depthwise `C×1` convolution.
    TwoStep,
    /// One `C×T` convolution straight to the embedding width.
    SingleStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatcherConfig {
    pub kind: PatcherKind,
    pub electrodes: usize,
    pub samples: usize,
    pub channels_stage1: usize,
    pub embed_dim: usize,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub temporal_padding: usize,
    pub batch_norm: BatchNormConfig,
}

impl PatcherConfig {
    pub fn canonical(kind: PatcherKind) -> Self {
        PatcherConfig {
            kind,
            electrodes: 128,
            samples: 500,
            channels_stage1: 256,
            embed_dim: 768,
            temporal_kernel: 36,
            spatial_kernel: 8,
            temporal_padding: 2,
            batch_norm: BatchNormConfig::default(),
        }
    }

    /// Token grid `(rows, cols)`: electrode groups by time windows.
    pub fn grid(&self) -> (usize, usize) {
        let rows = (self.electrodes - self.spatial_kernel) / self.spatial_kernel + 1;
        let cols = (self.samples + 2 * self.temporal_padding - self.temporal_kernel)
            / self.temporal_kernel
            + 1;
        (rows, cols)
    }

    pub fn token_count(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = "patcher";
        if self.spatial_kernel == 0 || self.temporal_kernel == 0 || self.embed_dim == 0 {
            return Err(Error::config(ctx, "kernels and embed_dim must be positive"));
        }
        if self.spatial_kernel > self.electrodes {
            return Err(Error::config(
                ctx,
                format!(
                    "spatial kernel {} exceeds electrodes {}",
                    self.spatial_kernel, self.electrodes
                ),
            ));
        }
        if self.temporal_kernel > self.samples + 2 * self.temporal_padding {
            return Err(Error::config(
                ctx,
                format!(
                    "temporal kernel {} exceeds padded samples {}",
                    self.temporal_kernel,
                    self.samples + 2 * self.temporal_padding
                ),
            ));
        }
        if self.kind == PatcherKind::TwoStep
            && (self.channels_stage1 == 0 || !self.embed_dim.is_multiple_of(self.channels_stage1))
        {
            return Err(Error::config(
                ctx,
                format!(
                    "embed_dim {} not divisible by channels_stage1 {}",
                    self.embed_dim, self.channels_stage1
                ),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c1, e) = (self.channels_stage1, self.embed_dim);
        let (t, c) = (self.temporal_kernel, self.spatial_kernel);
        match self.kind {
            PatcherKind::TwoStep => vec![
                ParamSpec::weight("patch.conv1.weight", &[c1, 1, 1, t]),
                ParamSpec::zeros("patch.conv1.bias", &[c1]),
                ParamSpec::ones("patch.bn.gamma", &[c1]),
                ParamSpec::zeros("patch.bn.beta", &[c1]),
                ParamSpec::buffer_zeros("patch.bn.running_mean", &[c1]),
                ParamSpec::buffer_ones("patch.bn.running_var", &[c1]),
                ParamSpec::weight("patch.conv2.weight", &[e, 1, c, 1]),
                ParamSpec::zeros("patch.conv2.bias", &[e]),
            ],
            PatcherKind::SingleStep => vec![
                ParamSpec::weight("patch.conv1.weight", &[e, 1, c, t]),
                ParamSpec::zeros("patch.conv1.bias", &[e]),
            ],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.electrodes, self.samples];
        if shape.len() != 4 || shape[1] != 1 || shape[2..] != expected {
            let batch = shape.first().copied().unwrap_or(0);
            return Err(Error::shape(
                "patch embedding input (batch, 1, electrodes, samples)",
                &[batch, 1, self.electrodes, self.samples],
                shape,
            ));
        }
        Ok(())
    }
}

/// Batch-norm running statistics of the two-step patcher.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Intermediate feature maps, exposed for shape inspection.
#[derive(Debug, Clone, Copy)]
pub struct PatchTrace {
    pub temporal: Option<Var>,
    pub spatial: Var,
    pub tokens: Var,
}

pub fn embed_two_step<T: Real>(
    g: &mut Graph<T>,
    cfg: &PatcherConfig,
    p: &Bound,
    stats: &mut RunningStats<T>,
    trial: Var,
    training: bool,
) -> Result<PatchTrace> {
    cfg.check_input(g.shape(trial))?;
    let temporal = g
        .conv2d(
            trial,
            p.get("patch.conv1.weight")?,
            p.get("patch.conv1.bias")?,
            (1, cfg.temporal_kernel),
            (0, cfg.temporal_padding),
            1,
        )
        .map_err(|e| e.within("patch.conv1"))?;
    let normed = g
        .batch_norm2d(
            temporal,
            p.get("patch.bn.gamma")?,
            p.get("patch.bn.beta")?,
            &mut stats.mean,
            &mut stats.var,
            cfg.batch_norm,
            training,
        )
        .map_err(|e| e.within("patch.bn"))?;
    let spatial = g
        .conv2d(
            normed,
            p.get("patch.conv2.weight")?,
            p.get("patch.conv2.bias")?,
            (cfg.spatial_kernel, 1),
            (0, 0),
            cfg.channels_stage1,
        )
        .map_err(|e| e.within("patch.conv2"))?;
    let tokens = g.flatten_grid(spatial)?;
    Ok(PatchTrace {
        temporal: Some(temporal),
        spatial,
        tokens,
    })
}

pub fn embed_single_step<T: Real>(
    g: &mut Graph<T>,
    cfg: &PatcherConfig,
    p: &Bound,
    trial: Var,
) -> Result<PatchTrace> {
    cfg.check_input(g.shape(trial))?;
    let spatial = g
        .conv2d(
            trial,
            p.get("patch.conv1.weight")?,
            p.get("patch.conv1.bias")?,
            (cfg.spatial_kernel, cfg.temporal_kernel),
            (0, cfg.temporal_padding),
            1,
        )
        .map_err(|e| e.within("patch.conv1"))?;
    let tokens = g.flatten_grid(spatial)?;
    Ok(PatchTrace {
        temporal: None,
        spatial,
        tokens,
    })
}
