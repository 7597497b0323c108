//! Pre-norm transformer encoder (ViT-Base layout).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::params::{Bound, ParamSpec};
use crate::tensor::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    /// Patch tokens, not counting the class token.
    pub token_count: usize,
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn vit_base() -> Self {
        EncoderConfig {
            layers: 12,
            hidden: 768,
            mlp: 3072,
            heads: 12,
            attn_dropout: 0.0,
            token_count: 224,
            ln_eps: 1e-12,
        }
    }

    /// Small configuration for fast checks.
    pub fn reduced() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            mlp: 128,
            heads: 4,
            ..Self::vit_base()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "encoder",
                format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::config(
                "encoder",
                format!("attention dropout {} outside [0, 1)", self.attn_dropout),
            ));
        }
        Ok(())
    }

    pub(crate) fn layer_specs(&self, i: usize) -> Vec<ParamSpec> {
        let (d, m) = (self.hidden, self.mlp);
        let p = |s: &str| format!("encoder.{i}.{s}");
        let mut specs = vec![
            ParamSpec::ones(&p("ln1.gamma"), &[d]),
            ParamSpec::zeros(&p("ln1.beta"), &[d]),
        ];
        for proj in ["q", "k", "v", "out"] {
            specs.push(ParamSpec::weight(&p(&format!("attn.{proj}.weight")), &[d, d]));
            specs.push(ParamSpec::zeros(&p(&format!("attn.{proj}.bias")), &[d]));
        }
        specs.extend([
            ParamSpec::ones(&p("ln2.gamma"), &[d]),
            ParamSpec::zeros(&p("ln2.beta"), &[d]),
            ParamSpec::weight(&p("mlp.fc1.weight"), &[m, d]),
            ParamSpec::zeros(&p("mlp.fc1.bias"), &[m]),
            ParamSpec::weight(&p("mlp.fc2.weight"), &[d, m]),
            ParamSpec::zeros(&p("mlp.fc2.bias"), &[d]),
        ]);
        specs
    }

    /// All encoder tensors: every layer plus the final layer norm.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> = (0..self.layers).flat_map(|i| self.layer_specs(i)).collect();
        specs.push(ParamSpec::ones("encoder.final_ln.gamma", &[self.hidden]));
        specs.push(ParamSpec::zeros("encoder.final_ln.beta", &[self.hidden]));
        specs
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    /// Softmax-normalized weights `[B, heads, T, T]`.
    pub weights: Var,
}

fn proj<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b)).map_err(|e| e.within(prefix))
}

/// Scaled dot-product attention over `heads` heads of `x: [B, T, D]`.
/// `prefix` names the attention block, e.g. `encoder.0.attn`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Attention> {
    cfg.validate()?;
    let q = proj(g, p, &format!("{prefix}.q"), x)?;
    let k = proj(g, p, &format!("{prefix}.k"), x)?;
    let v = proj(g, p, &format!("{prefix}.v"), x)?;
    let (q, k, v) = (
        g.split_heads(q, cfg.heads)?,
        g.split_heads(k, cfg.heads)?,
        g.split_heads(v, cfg.heads)?,
    );
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, lit(1.0 / (cfg.head_dim() as f64).sqrt()))?;
    let weights = g.softmax(scores)?;
    let dropped = mode.dropout(g, weights, cfg.attn_dropout)?;
    let ctx = g.bmm(dropped, v, false)?;
    let merged = g.merge_heads(ctx)?;
    let output = proj(g, p, &format!("{prefix}.out"), merged)?;
    Ok(Attention { output, weights })
}

/// One pre-norm block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    index: usize,
    x: Var,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<(Var, Attention)> {
    let pre = format!("encoder.{index}");
    let ln = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
        let gamma = p.get(&format!("{pre}.{name}.gamma"))?;
        let beta = p.get(&format!("{pre}.{name}.beta"))?;
        g.layer_norm(x, gamma, beta, cfg.ln_eps)
            .map_err(|e| e.within(&format!("{pre}.{name}")))
    };
    let h = ln(g, "ln1", x)?;
    let attn = multi_head_attention(g, p, &format!("{pre}.attn"), h, cfg, mode)?;
    let x = g.add(x, attn.output)?;
    let h = ln(g, "ln2", x)?;
    let h = proj(g, p, &format!("{pre}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = proj(g, p, &format!("{pre}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, attn))
}

/// All layers followed by the final layer norm.
pub fn encoder_stack<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    mut x: Var,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<(Var, Vec<Attention>)> {
    let mut maps = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let (next, attn) = encoder_layer(g, p, i, x, cfg, mode)?;
        x = next;
        maps.push(attn);
    }
    let out = g
        .layer_norm(
            x,
            p.get("encoder.final_ln.gamma")?,
            p.get("encoder.final_ln.beta")?,
            cfg.ln_eps,
        )
        .map_err(|e| e.within("encoder.final_ln"))?;
    Ok((out, maps))
}
