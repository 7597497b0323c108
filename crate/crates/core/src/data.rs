//! Trial sets, the EVTD file format, subject-wise splits, batching and a
//! synthetic generator with decodable gaze labels.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EVTD_MAGIC: &[u8; 4] = b"EVTD";
pub const EVTD_VERSION: u32 = 1;
const EVTD_HEADER: usize = 4 + 4 * 4 + 2 * 4;

/// Pixels per millimetre, used only when reporting distances.
pub const PX_PER_MM: f64 = 2.0;

/// EEG trials with pixel-space gaze labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    /// `[N, channels, samples]`
    pub eeg: Tensor<f32>,
    /// `[N, 2]`, (x, y) in pixels.
    pub labels: Tensor<f32>,
    pub subjects: Vec<u32>,
    /// (width, height) in pixels.
    pub screen: (f32, f32),
}

impl TrialSet {
    pub fn new(
        eeg: Tensor<f32>,
        labels: Tensor<f32>,
        subjects: Vec<u32>,
        screen: (f32, f32),
    ) -> Result<Self> {
        let set = TrialSet {
            eeg,
            labels,
            subjects,
            screen,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let n = self.subjects.len();
        if self.eeg.rank() != 3 || self.eeg.shape()[0] != n {
            return Err(Error::InvalidData(format!(
                "eeg shape {:?} does not match {n} subject ids",
                self.eeg.shape()
            )));
        }
        if self.labels.shape() != [n, 2] {
            return Err(Error::InvalidData(format!(
                "labels shape {:?}, expected [{n}, 2]",
                self.labels.shape()
            )));
        }
        let (w, h) = self.screen;
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::InvalidData(format!("screen {w}x{h}")));
        }
        for (i, xy) in self.labels.data().chunks_exact(2).enumerate() {
            let (x, y) = (xy[0], xy[1]);
            if x.is_nan() || y.is_nan() {
                return Err(Error::InvalidData(format!("NaN label in trial {i}")));
            }
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                return Err(Error::LabelOutOfBounds {
                    index: i,
                    x,
                    y,
                    width: w,
                    height: h,
                });
            }
        }
        let per_trial = self.channels() * self.samples();
        if let Some(pos) = self.eeg.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite EEG value in trial {}",
                pos / per_trial
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.eeg.shape()[1]
    }

    pub fn samples(&self) -> usize {
        self.eeg.shape()[2]
    }

    pub fn trial(&self, i: usize) -> &[f32] {
        let k = self.channels() * self.samples();
        &self.eeg.data()[i * k..(i + 1) * k]
    }

    pub fn label(&self, i: usize) -> [f32; 2] {
        let l = self.labels.data();
        [l[2 * i], l[2 * i + 1]]
    }

    pub fn subject_ids(&self) -> BTreeSet<u32> {
        self.subjects.iter().copied().collect()
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<TrialSet> {
        if indices.is_empty() {
            return Err(Error::InvalidData("empty subset".into()));
        }
        let (eeg, labels) = self.gather(indices, false);
        let subjects = indices.iter().map(|&i| self.subjects[i]).collect();
        Ok(TrialSet {
            eeg,
            labels,
            subjects,
            screen: self.screen,
        })
    }

    /// `(eeg, labels)` for `indices`; with `image` the EEG gains a singleton
    /// channel axis, `[B, 1, channels, samples]`.
    pub fn gather(&self, indices: &[usize], image: bool) -> (Tensor<f32>, Tensor<f32>) {
        let (c, s) = (self.channels(), self.samples());
        let mut eeg = Vec::with_capacity(indices.len() * c * s);
        let mut labels = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            eeg.extend_from_slice(self.trial(i));
            labels.extend_from_slice(&self.label(i));
        }
        let b = indices.len();
        let shape = if image { vec![b, 1, c, s] } else { vec![b, c, s] };
        (
            Tensor::from_parts(shape, eeg),
            Tensor::from_parts(vec![b, 2], labels),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(EVTD_HEADER + n * (4 + 8) + 4 * self.eeg.numel());
        out.extend_from_slice(EVTD_MAGIC);
        for v in [EVTD_VERSION, n as u32, self.channels() as u32, self.samples() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.screen.0.to_le_bytes());
        out.extend_from_slice(&self.screen.1.to_le_bytes());
        for s in &self.subjects {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in self.labels.data().iter().chain(self.eeg.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrialSet> {
        if bytes.len() < 4 || &bytes[..4] != EVTD_MAGIC {
            return Err(Error::InvalidData("bad magic (expected EVTD)".into()));
        }
        let truncated = |what: &str| Error::Bounds {
            name: what.to_owned(),
            message: format!("file truncated ({} bytes)", bytes.len()),
        };
        if bytes.len() < EVTD_HEADER {
            return Err(truncated("header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != EVTD_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: EVTD_VERSION,
            });
        }
        let (n, c, s) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if n == 0 || c == 0 || s == 0 {
            return Err(Error::InvalidData(format!("empty extents n={n} channels={c} samples={s}")));
        }
        let screen = (f32_at(20), f32_at(24));

        let subj_end = EVTD_HEADER + 4 * n;
        let label_end = subj_end + 8 * n;
        let eeg_len = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(s))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::InvalidData("extents overflow".into()))?;
        let end = label_end + eeg_len;
        for (what, bound) in [("subjects", subj_end), ("labels", label_end), ("eeg", end)] {
            if bytes.len() < bound {
                return Err(truncated(what));
            }
        }
        if bytes.len() > end {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes after the EEG block",
                bytes.len() - end
            )));
        }
        let floats = |from: usize, to: usize| -> Vec<f32> {
            bytes[from..to]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let subjects = (0..n).map(|i| u32_at(EVTD_HEADER + 4 * i)).collect();
        let labels = Tensor::from_parts(vec![n, 2], floats(subj_end, label_end));
        let eeg = Tensor::from_parts(vec![n, c, s], floats(label_end, end));
        TrialSet::new(eeg, labels, subjects, screen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrialSet> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TrialSet::from_bytes(&bytes)
    }
}

/// Subject-wise partition fractions (train, val, test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            fractions: [0.70, 0.15, 0.15],
            seed,
        }
    }

    /// Subjects per partition for `subjects` distinct ids. Validation and
    /// test each get `max(1, round(f·S))`; train takes the remainder.
    pub fn quotas(&self, subjects: usize) -> Result<[usize; 3]> {
        let f = self.fractions;
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions {f:?} must be in [0,1] and sum to 1")));
        }
        if subjects < 3 {
            return Err(Error::config(
                "split",
                format!("{subjects} subject(s) cannot fill three partitions"),
            ));
        }
        let quota = |frac: f64| ((frac * subjects as f64).round() as usize).max(1);
        let (val, test) = (quota(f[1]), quota(f[2]));
        if val + test >= subjects {
            return Err(Error::config(
                "split",
                format!("{subjects} subjects leave none for training after {val}+{test}"),
            ));
        }
        Ok([subjects - val - test, val, test])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: TrialSet,
    pub val: TrialSet,
    pub test: TrialSet,
}

/// Shuffle the distinct subject ids with `spec.seed` and deal them out in
/// order to train, val and test until each quota is met.
pub fn subject_partition(subject_ids: &BTreeSet<u32>, spec: &SplitSpec) -> Result<[Vec<u32>; 3]> {
    let [tr, va, _] = spec.quotas(subject_ids.len())?;
    let mut ids: Vec<u32> = subject_ids.iter().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut parts = [ids[..tr].to_vec(), ids[tr..tr + va].to_vec(), ids[tr + va..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn subject_split(set: &TrialSet, spec: &SplitSpec) -> Result<Split> {
    let parts = subject_partition(&set.subject_ids(), spec)?;
    let pick = |ids: &[u32]| -> Result<TrialSet> {
        let idx: Vec<usize> = (0..set.len())
            .filter(|&i| ids.binary_search(&set.subjects[i]).is_ok())
            .collect();
        set.subset(&idx)
    };
    Ok(Split {
        train: pick(&parts[0])?,
        val: pick(&parts[1])?,
        test: pick(&parts[2])?,
    })
}

/// Index batches for one epoch: a seeded permutation of `0..n` cut into
/// chunks of `batch_size`, keeping the short final chunk.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Shuffled `(eeg [B,1,C,S], labels [B,2])` batches.
pub fn batches(
    set: &TrialSet,
    batch_size: usize,
    shuffle_seed: u64,
) -> impl Iterator<Item = (Tensor<f32>, Tensor<f32>)> + '_ {
    batch_order(set.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(move |idx| set.gather(&idx, true))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub subjects: usize,
    pub screen: (f32, f32),
    pub noise_std: f64,
    pub seed: u64,
    pub channels: usize,
    pub samples: usize,
}

impl SynthSpec {
    pub fn new(n: usize, subjects: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            subjects,
            screen: (800.0, 600.0),
            noise_std,
            seed,
            channels: 128,
            samples: 500,
        }
    }
}

/// Peak amplitude (µV) of a label-carrying sinusoid at the screen edge,
/// and of the reference sinusoid.
pub const SYNTH_AMPLITUDE: f64 = 10.0;
/// Carrier period in samples. Equal to the patch width and stride of the
/// canonical patchers, so every time column of patches sees the same phase
/// (about 13.9 Hz at 500 samples per second).
pub const SYNTH_PERIOD: f64 = 36.0;

/// Role of a channel in the synthetic montage. Within every block of eight
/// adjacent electrodes, three carry x, three carry y and two carry a fixed
/// reference, so each electrode-group patch sees both coordinates relative
/// to a known amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthGroup {
    X,
    Y,
    Reference,
}

pub fn synth_group(channel: usize) -> SynthGroup {
    match channel % 8 {
        0..=2 => SynthGroup::X,
        3..=5 => SynthGroup::Y,
        _ => SynthGroup::Reference,
    }
}

/// Synthetic trials. Labels are uniform over the screen. X channels carry
/// `A·(x/W)·sin(2π·t/36)`, Y channels the same with `y/H`, and reference
/// channels amplitude `A`. All channels share one carrier phase: with a
/// per-channel offset the amplitude code changes sign across electrode rows
/// and cancels under mean pooling. Every sample gets Gaussian noise of
/// `noise_std`.
///
/// Labels and noise come from separate streams, so the labels for a given
/// `(n, seed)` do not depend on the EEG extents.
pub fn synth_trials(spec: &SynthSpec) -> Result<TrialSet> {
    let SynthSpec {
        n,
        subjects,
        screen,
        noise_std,
        seed,
        channels,
        samples,
    } = *spec;
    if n == 0 || subjects == 0 || channels == 0 || samples == 0 {
        return Err(Error::config("synth", "n, subjects, channels and samples must be positive"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::config("synth", format!("noise_std {noise_std} must be ≥ 0")));
    }
    let (w, h) = screen;
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k);

    let mut rng = stream(1);
    let labels: Vec<f32> = (0..n)
        .flat_map(|_| {
            let x = rng.random_range(0.0..=w);
            let y = rng.random_range(0.0..=h);
            [x, y]
        })
        .collect();

    let carrier: Vec<f64> = (0..samples).map(|t| (TAU * t as f64 / SYNTH_PERIOD).sin()).collect();

    let mut rng = stream(3);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut eeg = Vec::with_capacity(n * channels * samples);
    for i in 0..n {
        let ax = SYNTH_AMPLITUDE * f64::from(labels[2 * i]) / f64::from(w);
        let ay = SYNTH_AMPLITUDE * f64::from(labels[2 * i + 1]) / f64::from(h);
        for c in 0..channels {
            let a = match synth_group(c) {
                SynthGroup::X => ax,
                SynthGroup::Y => ay,
                SynthGroup::Reference => SYNTH_AMPLITUDE,
            };
            for &wave in &carrier {
                let mut v = a * wave;
                if noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                eeg.push(v as f32);
            }
        }
    }
    let subject_ids = (0..n).map(|i| (i % subjects) as u32).collect();
    TrialSet::new(
        Tensor::from_parts(vec![n, channels, samples], eeg),
        Tensor::from_parts(vec![n, 2], labels),
        subject_ids,
        screen,
    )
}
