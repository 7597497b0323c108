//! Central finite-difference verification of every differentiable operator
//! and of a reduced two-layer encoder, in `f64`.
//!
//! Each case maps its inputs to some tensor `y`; the checked scalar is
//! `Σ y ⊙ R` for a fixed random `R`, which gives every output element a
//! distinct weight. Numeric derivatives use only forward evaluations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormConfig, Graph, Var};
use crate::encoder::{encoder_stack, EncoderConfig};
use crate::error::Result;
use crate::model::Mode;
use crate::params::{Bound, Init};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test fixture: scale the analytic gradient of the named case by 1.5.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Names of all cases, in the order [`run_suite`] reports them.
pub const CASES: [&str; 20] = [
    "add",
    "add_broadcast",
    "mul",
    "scale",
    "sum",
    "linear",
    "conv2d",
    "batch_norm2d",
    "layer_norm",
    "softmax",
    "gelu",
    "dropout",
    "mse_loss",
    "bmm",
    "split_heads",
    "merge_heads",
    "prepend_token",
    "select_token",
    "flatten_grid",
    "encoder_2layer",
];

pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases = build_cases(&mut rng);
    debug_assert_eq!(cases.len(), CASES.len());
    cases
        .iter()
        .map(|case| {
            let fault = cfg.fault.as_deref() == Some(case.name);
            check_case(case, cfg, fault, &mut rng)
        })
        .collect()
}

fn check_case(
    case: &Case,
    cfg: &GradcheckConfig,
    fault: bool,
    rng: &mut ChaCha8Rng,
) -> Result<OpReport> {
    // Probe once for the output shape, then fix the projection.
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = (case.build)(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let proj = Tensor::randn(&probe, 1.0, rng);

    let objective = |inputs: &[Tensor<f64>], g: &mut Graph<f64>| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = (case.build)(g, &vars)?;
        let r = g.constant(proj.clone());
        let weighted = g.mul(y, r)?;
        Ok((g.sum(weighted)?, vars))
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = objective(inputs, &mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let (loss, vars) = objective(&case.inputs, &mut g)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(t) => t.data().iter().map(|&v| if fault { v * 1.5 } else { v }).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * cfg.step));
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
        checked += numeric.len();
    }
    Ok(OpReport {
        name: case.name,
        max_rel_error: worst,
        checked,
    })
}

/// Largest `|a − n| / max(|a|, |n|, s)`. The floor `s` is 1e-3 of the
/// largest numeric magnitude (at least 1e-6), so entries whose true gradient
/// is ~0 are judged against the input's overall gradient scale. Inputs with
/// an identically zero gradient, such as key biases under softmax, are then
/// held to an absolute error of `tolerance · 1e-6`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn build_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, rng);
    let mut cases: Vec<Case> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor<f64>>, build: Build| {
        cases.push(Case {
            name,
            inputs,
            build,
        })
    };

    push("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1])));
    push(
        "add_broadcast",
        vec![r(&[2, 3, 4]), r(&[3, 4])],
        Box::new(|g, v| g.add_broadcast(v[0], v[1])),
    );
    push("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1])));
    push("scale", vec![r(&[3, 4])], Box::new(|g, v| g.scale(v[0], -0.7)));
    push("sum", vec![r(&[3, 4])], Box::new(|g, v| g.sum(v[0])));
    push(
        "linear",
        vec![r(&[2, 3, 5]), r(&[4, 5]), r(&[4])],
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    );
    // Dense strided/padded convolution and a depthwise one, summed.
    push(
        "conv2d",
        vec![
            r(&[2, 2, 5, 7]),
            r(&[3, 2, 2, 3]),
            r(&[3]),
            r(&[2, 4, 6, 6]),
            r(&[8, 1, 3, 1]),
            r(&[8]),
        ],
        Box::new(|g, v| {
            let dense = g.conv2d(v[0], v[1], v[2], (1, 2), (1, 1), 1)?;
            let depthwise = g.conv2d(v[3], v[4], v[5], (2, 1), (0, 1), 4)?;
            let a = g.sum(dense)?;
            let b = g.sum(depthwise)?;
            let dense_sq = g.mul(dense, dense)?;
            let c = g.sum(dense_sq)?;
            let dw_sq = g.mul(depthwise, depthwise)?;
            let d = g.sum(dw_sq)?;
            let ab = g.add(a, b)?;
            let cd = g.add(c, d)?;
            g.add(ab, cd)
        }),
    );
    push(
        "batch_norm2d",
        vec![r(&[3, 2, 3, 4]), r(&[2]), r(&[2])],
        Box::new(|g, v| {
            let mut mean = Tensor::zeros(&[2]);
            let mut var = Tensor::ones(&[2]);
            let cfg = BatchNormConfig::default();
            let train = g.batch_norm2d(v[0], v[1], v[2], &mut mean, &mut var, cfg, true)?;
            let mut mean = Tensor::from_f64(&[2], &[0.3, -0.2])?;
            let mut var = Tensor::from_f64(&[2], &[1.5, 0.7])?;
            let eval = g.batch_norm2d(v[0], v[1], v[2], &mut mean, &mut var, cfg, false)?;
            g.add(train, eval)
        }),
    );
    push(
        "layer_norm",
        vec![r(&[3, 6]), r(&[6]), r(&[6])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
    push("softmax", vec![r(&[3, 5])], Box::new(|g, v| g.softmax(v[0])));
    push("gelu", vec![r(&[12])], Box::new(|g, v| g.gelu(v[0])));
    push(
        "dropout",
        vec![r(&[4, 5])],
        Box::new(|g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            g.dropout(v[0], 0.3, true, &mut mask_rng)
        }),
    );
    push(
        "mse_loss",
        vec![r(&[3, 2]), r(&[3, 2])],
        Box::new(|g, v| g.mse_loss(v[0], v[1])),
    );
    push(
        "bmm",
        vec![r(&[2, 3, 4]), r(&[2, 4, 5]), r(&[2, 5, 4])],
        Box::new(|g, v| {
            let nn = g.bmm(v[0], v[1], false)?;
            let nt = g.bmm(v[0], v[2], true)?;
            let a = g.mul(nn, nt)?;
            g.add(a, nn)
        }),
    );
    push("split_heads", vec![r(&[2, 3, 6])], Box::new(|g, v| g.split_heads(v[0], 2)));
    push("merge_heads", vec![r(&[2, 2, 3, 3])], Box::new(|g, v| g.merge_heads(v[0])));
    push(
        "prepend_token",
        vec![r(&[4]), r(&[2, 3, 4])],
        Box::new(|g, v| g.prepend_token(v[0], v[1])),
    );
    push("select_token", vec![r(&[2, 3, 4])], Box::new(|g, v| g.select_token(v[0], 1)));
    push("flatten_grid", vec![r(&[2, 3, 2, 4])], Box::new(|g, v| g.flatten_grid(v[0])));

    let enc = EncoderConfig {
        layers: 2,
        hidden: 8,
        mlp: 16,
        heads: 2,
        token_count: 4,
        ..EncoderConfig::reduced()
    };
    let specs = enc.param_specs();
    let mut inputs = vec![r(&[2, 5, 8])];
    for s in &specs {
        let t = match s.init {
            Init::TruncNormal => r(&s.shape).map(|v| 0.25 * v),
            Init::Zeros => r(&s.shape).map(|v| 0.1 * v),
            Init::Ones => r(&s.shape).map(|v| 1.0 + 0.1 * v),
        };
        inputs.push(t);
    }
    let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
    push(
        "encoder_2layer",
        inputs,
        Box::new(move |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let (out, _) = encoder_stack(g, &bound, v[0], &enc, &mut Mode::Eval)?;
            Ok(out)
        }),
    );
    cases
}
