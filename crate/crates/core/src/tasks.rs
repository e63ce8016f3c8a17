//! Seeded synthetic tasks.
//!
//! * **parity**: each stream carries one hidden bit, written into its tokens
//!   through one of two orthonormal pattern vectors plus Gaussian noise. The
//!   label is the XOR of all bits, so no proper subset of the streams says
//!   anything about it and a linear read-out of per-stream features cannot
//!   separate it.
//! * **injection**: the same streams, but the bits act as signs `±1`; the
//!   target is `x + s·u` for a task input `x`, a fixed direction `u` and the
//!   product `s` of all signs.
//! * **contrastive**: orthonormal class embeddings, with video and audio
//!   features equal to the class embedding plus noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::adapters::ClassEmbeddings;
use crate::config::{SenConfig, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples of one split. `inputs[s]` is `[N×n×d_in]` for token streams or
/// `[N×d]` for contrastive features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    /// Class per sample (parity bit, class index, or sign bit for injection).
    pub labels: Vec<usize>,
    /// Injection only: task inputs `x`, `[N×T]`.
    pub base: Option<Tensor>,
    /// Injection only: regression targets, `[N×T]`.
    pub targets: Option<Tensor>,
}

/// A gathered subset of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub base: Option<Tensor>,
    pub targets: Option<Tensor>,
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let per = t.numel() / n;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("gathered shape")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of the first `streams` inputs.
    pub fn batch(&self, idx: &[usize], streams: usize) -> Batch {
        Batch {
            inputs: self.inputs[..streams].iter().map(|t| gather(t, idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            base: self.base.as_ref().map(|t| gather(t, idx)),
            targets: self.targets.as_ref().map(|t| gather(t, idx)),
        }
    }

    /// Hex SHA-256 over every tensor and label.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.inputs.iter().chain(&self.base).chain(&self.targets) {
            h.update(t.le_bytes().collect::<Vec<u8>>());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub noise: f64,
    pub train: Dataset,
    pub test: Dataset,
    /// Contrastive only.
    pub classes: Option<ClassEmbeddings>,
    /// Injection only: the direction `u`, `[T]`.
    pub direction: Option<Tensor>,
}

/// `count` orthonormal vectors in `ℝ^dim` (Gram-Schmidt on Gaussian draws).
pub fn orthonormal<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::invalid(
            "orthonormal",
            format!("cannot fit {count} orthonormal vectors in dimension {dim}"),
        ));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

/// Shared token streams of the parity and injection tasks.
struct BitStreams {
    patterns: Vec<Vec<Vec<f64>>>,
    seq_len: usize,
    noise: f64,
}

impl BitStreams {
    fn new<R: Rng + ?Sized>(streams: usize, d_in: usize, seq_len: usize, noise: f64, rng: &mut R) -> Result<Self> {
        if streams < 2 {
            return Err(Error::invalid("gen_parity_task", format!("need ≥ 2 streams, got {streams}")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::invalid("gen_parity_task", format!("noise must be ≥ 0, got {noise}")));
        }
        let patterns = (0..streams)
            .map(|_| orthonormal(2, d_in, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(BitStreams {
            patterns,
            seq_len,
            noise,
        })
    }

    /// `(inputs, bits)` for `count` samples.
    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> (Vec<Tensor>, Vec<Vec<usize>>) {
        let m = self.patterns.len();
        let d_in = self.patterns[0][0].len();
        let n = self.seq_len;
        let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(count * n * d_in); m];
        let mut bits = Vec::with_capacity(count);
        for _ in 0..count {
            let b: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
            for (s, &bit) in b.iter().enumerate() {
                let p = &self.patterns[s][bit];
                for _ in 0..n {
                    for &pv in p {
                        let e: f64 = rng.sample(StandardNormal);
                        data[s].push(pv + self.noise * e);
                    }
                }
            }
            bits.push(b);
        }
        let inputs = data
            .into_iter()
            .map(|d| Tensor::new(&[count, n, d_in], d).expect("stream shape"))
            .collect();
        (inputs, bits)
    }
}

fn parity(bits: &[usize]) -> usize {
    bits.iter().fold(0, |acc, b| acc ^ b)
}

/// Parity task over `streams` token streams of shape `[n×d_in]`.
pub fn gen_parity_task(
    streams: usize,
    d_in: usize,
    seq_len: usize,
    noise: f64,
    samples: (usize, usize),
    seed: u64,
) -> Result<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = BitStreams::new(streams, d_in, seq_len, noise, &mut rng)?;
    let mut split = |count| {
        let (inputs, bits) = gen.sample(count, &mut rng);
        Dataset {
            inputs,
            labels: bits.iter().map(|b| parity(b)).collect(),
            base: None,
            targets: None,
        }
    };
    let train = split(samples.0);
    let test = split(samples.1);
    Ok(SyntheticTask {
        kind: TaskKind::Parity,
        noise,
        train,
        test,
        classes: None,
        direction: None,
    })
}

/// Injection task: targets `x + s·u` with `s = ∏ (2·b_m − 1)`.
pub fn gen_injection_task(
    streams: usize,
    d_in: usize,
    seq_len: usize,
    target_shape: &[usize],
    noise: f64,
    samples: (usize, usize),
    seed: u64,
) -> Result<SyntheticTask> {
    if target_shape.is_empty() || target_shape.contains(&0) {
        return Err(Error::invalid("gen_injection_task", format!("invalid target shape {target_shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = BitStreams::new(streams, d_in, seq_len, noise, &mut rng)?;
    let size: usize = target_shape.iter().product();
    let u: Vec<f64> = (0..size).map(|_| rng.sample(StandardNormal)).collect();
    let mut shape = vec![0];
    shape.extend_from_slice(target_shape);
    let mut split = |count| {
        let (inputs, bits) = gen.sample(count, &mut rng);
        let mut base = Vec::with_capacity(count * size);
        let mut targets = Vec::with_capacity(count * size);
        let mut labels = Vec::with_capacity(count);
        for b in &bits {
            let bit = parity(b);
            let s = if bit == 1 { -1.0 } else { 1.0 };
            for &uj in &u {
                let x: f64 = rng.sample(StandardNormal);
                base.push(x);
                targets.push(x + s * uj);
            }
            labels.push(bit);
        }
        shape[0] = count;
        Dataset {
            inputs,
            labels,
            base: Some(Tensor::new(&shape, base).expect("base shape")),
            targets: Some(Tensor::new(&shape, targets).expect("target shape")),
        }
    };
    let train = split(samples.0);
    let test = split(samples.1);
    Ok(SyntheticTask {
        kind: TaskKind::Injection,
        noise,
        train,
        test,
        classes: None,
        direction: Some(Tensor::new(target_shape, u)?),
    })
}

/// Contrastive task: inputs are `[video, audio]`, each `[N×d]`.
pub fn gen_contrastive_task(
    classes: usize,
    dim: usize,
    noise: f64,
    samples: (usize, usize),
    seed: u64,
) -> Result<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal(classes, dim, &mut rng)?;
    let matrix = Tensor::new(&[classes, dim], basis.concat())?;
    let labels = (0..classes).map(|c| format!("class{c}")).collect();
    let embeddings = ClassEmbeddings::new(matrix, labels)?;
    let mut split = |count: usize| {
        let mut video = Vec::with_capacity(count * dim);
        let mut audio = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let c = rng.random_range(0..classes);
            for stream in [&mut video, &mut audio] {
                for &e in &basis[c] {
                    let z: f64 = rng.sample(StandardNormal);
                    stream.push(e + noise * z);
                }
            }
            labels.push(c);
        }
        Dataset {
            inputs: vec![
                Tensor::new(&[count, dim], video).expect("video shape"),
                Tensor::new(&[count, dim], audio).expect("audio shape"),
            ],
            labels,
            base: None,
            targets: None,
        }
    };
    let train = split(samples.0);
    let test = split(samples.1);
    Ok(SyntheticTask {
        kind: TaskKind::Contrastive,
        noise,
        train,
        test,
        classes: Some(embeddings),
        direction: None,
    })
}

/// Builds the task described by a config.
pub fn build_task(cfg: &SenConfig) -> Result<SyntheticTask> {
    let t = &cfg.task;
    let samples = (t.train_samples, t.test_samples);
    let first = cfg
        .modalities
        .first()
        .ok_or_else(|| Error::Config(vec!["at least one modality is required".into()]))?;
    match t.kind {
        TaskKind::Parity => gen_parity_task(cfg.streams(), first.input_dim, first.seq_len, t.noise, samples, cfg.task_seed()),
        TaskKind::Injection => gen_injection_task(
            cfg.streams(),
            first.input_dim,
            first.seq_len,
            &t.target_shape,
            t.noise,
            samples,
            cfg.task_seed(),
        ),
        TaskKind::Contrastive => gen_contrastive_task(t.classes, cfg.shared_dim, t.noise, samples, cfg.task_seed()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_digest() {
        let a = gen_parity_task(3, 8, 4, 0.1, (64, 16), 5).unwrap();
        let b = gen_parity_task(3, 8, 4, 0.1, (64, 16), 5).unwrap();
        let c = gen_parity_task(3, 8, 4, 0.1, (64, 16), 6).unwrap();
        assert_eq!(a.train.digest(), b.train.digest());
        assert_eq!(a.test, b.test);
        assert_ne!(a.train.digest(), c.train.digest());
    }

    #[test]
    fn labels_are_balanced() {
        let t = gen_parity_task(3, 8, 2, 0.1, (4096, 1), 0).unwrap();
        let ones = t.train.labels.iter().sum::<usize>() as f64;
        let n = 4096.0;
        // 4 standard deviations of a fair binomial
        assert!((ones / n - 0.5).abs() < 4.0 * (0.25 / n).sqrt(), "{ones}");
    }

    #[test]
    fn noiseless_inputs_determine_labels() {
        let t = gen_parity_task(3, 4, 2, 0.0, (256, 1), 1).unwrap();
        let per = 2 * 4;
        let key = |i: usize| -> Vec<u64> {
            t.train.inputs.iter().flat_map(|s| s.data()[i * per..(i + 1) * per].iter().map(|v| v.to_bits())).collect()
        };
        let mut seen = std::collections::HashMap::new();
        for i in 0..t.train.len() {
            let label = *seen.entry(key(i)).or_insert(t.train.labels[i]);
            assert_eq!(label, t.train.labels[i]);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn fewer_than_two_streams_is_rejected() {
        assert!(gen_parity_task(1, 8, 4, 0.1, (8, 8), 0).is_err());
    }

    #[test]
    fn orthonormal_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = orthonormal(5, 7, &mut rng).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        assert!(orthonormal(8, 7, &mut rng).is_err());
    }

    #[test]
    fn injection_target_is_base_plus_signed_direction() {
        let t = gen_injection_task(3, 8, 2, &[2, 3], 0.0, (32, 8), 3).unwrap();
        let u = t.direction.as_ref().unwrap();
        let (x, y) = (t.train.base.as_ref().unwrap(), t.train.targets.as_ref().unwrap());
        assert_eq!(y.shape(), &[32, 2, 3]);
        for i in 0..32 {
            let s = if t.train.labels[i] == 1 { -1.0 } else { 1.0 };
            for j in 0..6 {
                assert_eq!(y.data()[i * 6 + j], x.data()[i * 6 + j] + s * u.data()[j]);
            }
        }
    }

    #[test]
    fn noiseless_contrastive_features_are_class_embeddings() {
        let t = gen_contrastive_task(4, 6, 0.0, (16, 4), 4).unwrap();
        let classes = t.classes.as_ref().unwrap();
        for i in 0..16 {
            let c = t.train.labels[i];
            let row = &t.train.inputs[0].data()[i * 6..(i + 1) * 6];
            let reference = &classes.matrix().data()[c * 6..(c + 1) * 6];
            for (a, b) in row.iter().zip(reference) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(gen_contrastive_task(7, 6, 0.0, (1, 1), 0).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let t = gen_parity_task(3, 4, 2, 0.1, (10, 1), 7).unwrap();
        let b = t.train.batch(&[3, 0], 2);
        assert_eq!(b.inputs.len(), 2);
        assert_eq!(b.inputs[0].shape(), &[2, 2, 4]);
        assert_eq!(b.inputs[1].data()[..8], t.train.inputs[1].data()[24..32]);
        assert_eq!(b.labels, vec![t.train.labels[3], t.train.labels[0]]);
    }
}
