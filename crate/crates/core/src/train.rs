//! Training protocol: learning-rate schedule, Adam, the epoch loop,
//! reports and resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::data::{batch_order, TrialSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::model::{EEGViTModel, Mode, ModelVariant};
use crate::tensor::Tensor;
use crate::weights::{decode_archive, encode_archive, TensorMap, META_HEADS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    StepDecay { factor: f64, every: usize },
}

impl Schedule {
    pub const PRETRAINED_DECAY: Schedule = Schedule::StepDecay {
        factor: 0.9,
        every: 6,
    };

    /// Decay for fine-tuning imported weights, constant from scratch.
    pub fn for_variant(variant: ModelVariant) -> Self {
        if variant.pretrained {
            Self::PRETRAINED_DECAY
        } else {
            Schedule::Constant
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub variant: ModelVariant,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// 15 epochs, batch 64, lr 1e-4, schedule paired with the variant.
    pub fn new(variant: ModelVariant, seed: u64) -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            lr0: 1e-4,
            schedule: Schedule::for_variant(variant),
            seed,
            variant,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("train", "epochs and batch size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train", format!("learning rate {} must be positive", self.lr0)));
        }
        if let Schedule::StepDecay { factor, every } = self.schedule {
            if every == 0 || !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::config("train", "step decay needs factor > 0 and every ≥ 1"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train", format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::StepDecay { factor, every } => self.lr0 * factor.powi((epoch / every) as i32),
        }
    }
}

pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr_at(epoch)
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every tensor in `grads`. Moments are created as zeros
    /// on first use.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<f32>)>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("adam/{name}"), p.shape(), g.shape()));
            }
            let m = self.m.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Independent seed for stream `tag` at position `k` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, k: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ k.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_rmse_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub test: Option<Metrics>,
    pub seed: u64,
    pub variant: ModelVariant,
    /// SHA-256 over the training and model configuration.
    pub fingerprint: String,
    pub wall_time: Duration,
}

impl TrainReport {
    /// Line-oriented text. Wall time is left out so that seeded reruns
    /// produce identical text.
    pub fn to_text(&self) -> String {
        let mut s = format!("config_sha256={}\n", self.fingerprint);
        for e in &self.epochs {
            writeln!(
                s,
                "epoch={} lr={} train_mse={} val_rmse_px={}",
                e.epoch, e.lr, e.train_mse, e.val_rmse_px
            )
            .unwrap();
        }
        if let Some(m) = &self.test {
            writeln!(
                s,
                "test_rmse_px={} test_rmse_mm={} test_meandist_px={} seed={} variant={}",
                m.rmse_px,
                m.rmse_mm(),
                m.mean_dist_px,
                self.seed,
                self.variant
            )
            .unwrap();
        }
        s
    }
}

pub fn fingerprint(config: &TrainConfig, model: &EEGViTModel<f32>) -> String {
    let text = format!("{config:?}\n{:?}", model.config);
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Eval-mode predictions `[N, 2]` for a whole set, `batch` trials at a time.
pub fn predict_set(model: &EEGViTModel<f32>, set: &TrialSet, batch: usize) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(set.len() * 2);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = set.gather(chunk, true);
        out.extend_from_slice(model.predict(&x)?.data());
    }
    Tensor::new(&[set.len(), 2], out)
}

pub fn evaluate_set(model: &EEGViTModel<f32>, set: &TrialSet, batch: usize) -> Result<Metrics> {
    evaluate(&predict_set(model, set, batch)?, &set.labels)
}

/// Model plus optimizer state. All randomness is derived from the seed and
/// the step/epoch counters, so a checkpoint needs no RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: EEGViTModel<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: EEGViTModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            adam: Adam::default(),
            config,
        })
    }

    /// One forward/backward pass and Adam update. Returns the batch MSE.
    pub fn step(&mut self, eeg: &Tensor<f32>, labels: &Tensor<f32>, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let x = g.constant(eeg.clone());
        let y = g.constant(labels.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            DROPOUT_STREAM,
            self.adam.step,
        ));
        let trace = self.model.forward(&mut g, &bound, x, &mut Mode::Train(&mut rng))?;
        let loss = g.mse_loss(trace.prediction, y)?;
        let loss_value = f64::from(g.value(loss).data()[0]);
        let mut raw = g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, var) in bound.iter() {
            let grad = raw
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            grads.insert(name.clone(), grad);
        }
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let params = self
            .model
            .params
            .iter_mut()
            .map(|(n, t)| (n.as_str(), t));
        self.adam.update(params, &grads, lr)?;
        Ok(loss_value)
    }

    /// One shuffled pass over `train`; returns the mean batch MSE weighted
    /// by batch size.
    pub fn run_epoch(&mut self, train: &TrialSet, epoch: usize) -> Result<f64> {
        let lr = self.config.lr_at(epoch);
        let order = batch_order(
            train.len(),
            self.config.batch_size,
            derive_seed(self.config.seed, SHUFFLE_STREAM, epoch as u64),
        );
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let (x, y) = train.gather(idx, true);
            let loss = self.step(&x, &y, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NumericalAbort { epoch, batch: b },
                other => other,
            })?;
            total += loss * idx.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Model tensors, `adam.m.*` / `adam.v.*` moments, `meta.heads` and the
    /// step counter `meta.step` as four exact 16-bit limbs.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let heads = Tensor::scalar(self.model.config.encoder.heads as f32);
        let step = step_tensor(self.adam.step);
        let moments = self
            .adam
            .m
            .iter()
            .map(|(n, t)| (format!("adam.m.{n}"), t))
            .chain(self.adam.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        let entries = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(moments)
            .chain([(META_HEADS.to_owned(), &heads), (META_STEP.to_owned(), &step)]);
        encode_archive(entries)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], config: TrainConfig) -> Result<Self> {
        let mut map = decode_archive(bytes)?;
        let step = map
            .remove(META_STEP)
            .ok_or_else(|| Error::MissingTensors(vec![META_STEP.into()]))?;
        let mut adam = Adam {
            step: step_from_tensor(&step)?,
            ..Adam::default()
        };
        let mut model_map = TensorMap::new();
        for (name, t) in map {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam.m.insert(n.to_owned(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.v.insert(n.to_owned(), t);
            } else {
                model_map.insert(name, t);
            }
        }
        let model = EEGViTModel::from_archive_map(model_map)?;
        let mut trainer = Trainer::new(model, config)?;
        trainer.adam = adam;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path, config: TrainConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, config)
    }
}

const META_STEP: &str = "meta.step";

fn step_tensor(step: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|i| ((step >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], limbs).expect("four limbs")
}

fn step_from_tensor(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::shape(META_STEP, &[4], t.shape()));
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        if v.fract() != 0.0 || !(0.0..65536.0).contains(&v) {
            return Err(Error::InvalidData(format!("{META_STEP} limb {v}")));
        }
        Ok(acc | (v as u64) << (16 * i))
    })
}

/// Train for `config.epochs` full passes and return the final-epoch model.
/// Validation RMSE is logged after every epoch; there is no early stopping.
pub fn train(
    model: EEGViTModel<f32>,
    train_set: &TrialSet,
    val_set: &TrialSet,
    config: &TrainConfig,
) -> Result<(EEGViTModel<f32>, TrainReport)> {
    let shared: Vec<u32> = train_set
        .subject_ids()
        .intersection(&val_set.subject_ids())
        .copied()
        .collect();
    if !shared.is_empty() {
        return Err(Error::config(
            "train",
            format!("subjects {shared:?} appear in both training and validation sets"),
        ));
    }
    let start = Instant::now();
    let fingerprint = fingerprint(config, &model);
    let mut trainer = Trainer::new(model, *config)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_mse = trainer.run_epoch(train_set, epoch)?;
        let val = evaluate_set(&trainer.model, val_set, config.batch_size)?;
        epochs.push(EpochRecord {
            epoch,
            lr: config.lr_at(epoch),
            train_mse,
            val_rmse_px: val.rmse_px,
        });
    }
    let report = TrainReport {
        epochs,
        test: None,
        seed: config.seed,
        variant: config.variant,
        fingerprint,
        wall_time: start.elapsed(),
    };
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let pre = TrainConfig::new(ModelVariant::EEGVIT_PRETRAINED, 0);
        let lrs: Vec<f64> = (0..15).map(|e| pre.lr_at(e)).collect();
        assert!(lrs[..6].iter().all(|&v| v == 1e-4));
        assert!(lrs[6..12].iter().all(|&v| v == 9e-5));
        assert!(lrs[12..].iter().all(|&v| v == 8.1e-5));
        let scratch = TrainConfig::new(ModelVariant::EEGVIT, 0);
        assert_eq!(scratch.schedule, Schedule::Constant);
        assert!((0..15).all(|e| scratch.lr_at(e) == 1e-4));
        assert!((0..6).all(|e| scratch.lr_at(e) == pre.lr_at(e)));
    }

    fn one(v: f32) -> Tensor<f32> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn run(adam: &mut Adam, w: &mut Tensor<f32>, g: f32, lr: f64) {
        let grads = BTreeMap::from([("w".to_owned(), one(g))]);
        adam.update([("w", w)], &grads, lr).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::default();
        let mut w = one(3.0);
        for _ in 0..10 {
            run(&mut adam, &mut w, 0.0, 1e-2);
        }
        assert_eq!(w.data()[0], 3.0);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut adam = Adam::default();
        let mut w = one(0.0);
        let lr = 1e-3;
        let mut prev = 0.0;
        for k in 0..2000 {
            run(&mut adam, &mut w, 0.5, lr);
            let step = f64::from(prev - w.data()[0]);
            prev = w.data()[0];
            if k == 0 || k > 1000 {
                assert!((step - lr).abs() < 1e-5 * lr.max(1.0) + 1e-3 * lr, "{k}: {step}");
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut adam = Adam::default();
        let mut w = Tensor::new(&[3], vec![0.7f32, -0.4, 0.2]).unwrap();
        for _ in 0..500 {
            let grads = BTreeMap::from([("w".to_owned(), w.map(|v| 2.0 * v))]);
            adam.update([("w", &mut w)], &grads, 1e-2).unwrap();
        }
        let f: f32 = w.data().iter().map(|v| v * v).sum();
        assert!(f < 1e-6, "{f}");
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut grads = BTreeMap::from([("a".to_owned(), one(3.0)), ("b".to_owned(), one(4.0))]);
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads["a"].data()[0] - 0.6).abs() < 1e-7);
        assert!((grads["b"].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn step_limbs_round_trip() {
        for s in [0, 1, 65535, 65536, u64::MAX, 1 << 40 | 12345] {
            assert_eq!(step_from_tensor(&step_tensor(s)).unwrap(), s);
        }
    }

    #[test]
    fn report_text_format() {
        let report = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 1e-4,
                train_mse: 12.5,
                val_rmse_px: 3.0,
            }],
            test: Some(Metrics {
                rmse_px: 5.0,
                mean_dist_px: 4.0,
                n: 1,
            }),
            seed: 7,
            variant: ModelVariant::EEGVIT,
            fingerprint: "ab".into(),
            wall_time: Duration::from_secs(3),
        };
        assert_eq!(
            report.to_text(),
            "config_sha256=ab\n\
             epoch=0 lr=0.0001 train_mse=12.5 val_rmse_px=3\n\
             test_rmse_px=5 test_rmse_mm=2.5 test_meandist_px=4 seed=7 variant=eegvit\n"
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn adam_step_never_increases_a_convex_quadratic(
            seed in proptest::prelude::any::<u64>(),
            dim in 1usize..7,
            lr in 1e-6f64..=1e-3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // f(w) = ½·wᵀHw with H = BᵀB + I.
            let b: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..dim * dim)
                .map(|ij| {
                    let (i, j) = (ij / dim, ij % dim);
                    (0..dim).map(|k| b[k * dim + i] * b[k * dim + j]).sum::<f64>() + f64::from(u8::from(i == j))
                })
                .collect();
            let f = |w: &[f32]| -> f64 {
                (0..dim * dim).map(|ij| 0.5 * f64::from(w[ij / dim]) * h[ij] * f64::from(w[ij % dim])).sum()
            };
            let mut w = loop {
                let w: Vec<f32> = (0..dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
                if w.iter().map(|v| v * v).sum::<f32>() >= 0.01 {
                    break Tensor::new(&[dim], w).unwrap();
                }
            };
            let before = f(w.data());
            let grad: Vec<f32> = (0..dim)
                .map(|i| (0..dim).map(|j| h[i * dim + j] * f64::from(w.data()[j])).sum::<f64>() as f32)
                .collect();
            let grads = BTreeMap::from([("w".to_owned(), Tensor::new(&[dim], grad).unwrap())]);
            Adam::default().update([("w", &mut w)], &grads, lr).unwrap();
            proptest::prop_assert!(f(w.data()) <= before, "{} > {before}", f(w.data()));
        }

        #[test]
        fn schedules_agree_on_the_first_six_epochs(lr0 in 1e-6f64..1.0, epoch in 0usize..6) {
            let mut pre = TrainConfig::new(ModelVariant::EEGVIT_PRETRAINED, 0);
            let mut scratch = TrainConfig::new(ModelVariant::EEGVIT, 0);
            pre.lr0 = lr0;
            scratch.lr0 = lr0;
            proptest::prop_assert_eq!(pre.lr_at(epoch), scratch.lr_at(epoch));
        }
    }
}
