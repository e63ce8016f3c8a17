//! Downstream adaptation: zero-shot scoring, context injection and feature
//! averaging.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One unit-norm embedding per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    matrix: Tensor,
    labels: Vec<String>,
}

impl ClassEmbeddings {
    /// Normalizes every row of `matrix` (`[C×d]`) to unit length.
    pub fn new(matrix: Tensor, labels: Vec<String>) -> Result<Self> {
        let shape = matrix.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("class_embeddings", format!("expected [C×d], got {shape:?}")));
        }
        if labels.len() != shape[0] {
            return Err(Error::invalid(
                "class_embeddings",
                format!("{} labels for {} classes", labels.len(), shape[0]),
            ));
        }
        let d = shape[1];
        let mut data = matrix.into_data();
        for (c, row) in data.chunks_mut(d).enumerate() {
            let norm = l2(row);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric("class_embeddings", format!("class {c} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(ClassEmbeddings {
            matrix: Tensor::new(&shape, data)?,
            labels,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    fn row(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[c * d..(c + 1) * d]
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(op: &'static str, v: &[f64]) -> Result<Vec<f64>> {
    let n = l2(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::numeric(op, format!("feature norm is {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores each class by `cos(video, class) + cos(audio, class)`.
///
/// ```
/// use sen_core::adapters::{contrastive_predict, ClassEmbeddings};
/// use sen_core::tensor::Tensor;
///
/// let classes = ClassEmbeddings::new(Tensor::eye(2), vec!["a".into(), "b".into()]).unwrap();
/// let e1 = Tensor::from_vec(vec![1.0, 0.0]);
/// let e2 = Tensor::from_vec(vec![0.0, 1.0]);
/// let (class, scores) = contrastive_predict(&e1, &e2, &classes).unwrap();
/// assert_eq!(class, 0);
/// assert_eq!(scores.data(), &[1.0, 1.0]);
/// ```
pub fn contrastive_predict(video: &Tensor, audio: &Tensor, classes: &ClassEmbeddings) -> Result<(usize, Tensor)> {
    let d = classes.dim();
    for f in [video, audio] {
        if f.numel() != d {
            return Err(Error::shape("contrastive_predict", f.shape(), &[d]));
        }
    }
    let v = unit("contrastive_predict", video.data())?;
    let a = unit("contrastive_predict", audio.data())?;
    let scores: Vec<f64> = (0..classes.num_classes())
        .map(|c| dot(&v, classes.row(c)) + dot(&a, classes.row(c)))
        .collect();
    Ok((argmax(&scores), Tensor::from_vec(scores)))
}

/// Batched form over `[N×d]` video and audio features: row-wise argmax of
/// the summed `N×C` cosine-similarity matrices.
pub fn contrastive_predict_batch(video: &Tensor, audio: &Tensor, classes: &ClassEmbeddings) -> Result<Vec<usize>> {
    let d = classes.dim();
    if video.shape().len() != 2 || video.shape()[1] != d || video.shape() != audio.shape() {
        return Err(Error::shape("contrastive_predict", video.shape(), audio.shape()));
    }
    let n = video.shape()[0];
    let normalize = |t: &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * d);
        for row in t.data().chunks(d) {
            data.extend(unit("contrastive_predict", row)?);
        }
        Tensor::new(&[n, d], data)
    };
    let mut tape = Tape::new();
    let v = tape.constant(normalize(video)?);
    let a = tape.constant(normalize(audio)?);
    let ct = tape.constant(transpose(classes.matrix()));
    let sv = tape.matmul(v, ct)?;
    let sa = tape.matmul(a, ct)?;
    let s = tape.add(sv, sa)?;
    let c = classes.num_classes();
    Ok(tape.value(s).chunks(c).map(argmax).collect())
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transposed shape")
}

/// Shape of a task model's entry point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionTarget {
    shape: Vec<usize>,
}

impl InjectionTarget {
    pub fn new(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("context_inject", format!("invalid target shape {shape:?}")));
        }
        Ok(InjectionTarget { shape: shape.to_vec() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Source index and weight of output `j` when resampling `d` points to
/// `size` points with aligned endpoints.
fn sample_point(j: usize, d: usize, size: usize) -> (usize, f64) {
    if size == 1 || d == 1 {
        return (0, 0.0);
    }
    let t = (j * (d - 1)) as f64 / (size - 1) as f64;
    let lo = (t.floor() as usize).min(d - 1);
    (lo, t - lo as f64)
}

/// Resizes a `[d]` context to the target's shape by 1-D linear
/// interpolation; the caller adds the result to its input.
///
/// ```
/// use sen_core::adapters::{context_inject, InjectionTarget};
/// use sen_core::tensor::Tensor;
///
/// let ctx = Tensor::from_vec(vec![0.0, 3.0]);
/// let out = context_inject(&ctx, &InjectionTarget::new(&[4]).unwrap()).unwrap();
/// assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0]);
/// ```
pub fn context_inject(context: &Tensor, target: &InjectionTarget) -> Result<Tensor> {
    let c = context.data();
    let d = c.len();
    let size = target.size();
    let out = (0..size)
        .map(|j| {
            let (lo, frac) = sample_point(j, d, size);
            if frac == 0.0 {
                c[lo]
            } else {
                c[lo] + frac * (c[lo + 1] - c[lo])
            }
        })
        .collect();
    Tensor::new(target.shape(), out)
}

/// The `[d×size]` matrix `R` with `context_inject(c) = c·R`.
pub fn interpolation_matrix(d: usize, target: &InjectionTarget) -> Tensor {
    let size = target.size();
    let mut r = vec![0.0; d * size];
    for j in 0..size {
        let (lo, frac) = sample_point(j, d, size);
        r[lo * size + j] += 1.0 - frac;
        if frac != 0.0 {
            r[(lo + 1) * size + j] += frac;
        }
    }
    Tensor::new(&[d, size], r).expect("d ≥ 1 and size ≥ 1")
}

/// Differentiable batched injection: `[batch×d]` → `[batch×size]`.
pub fn context_inject_var(tape: &mut Tape, context: Var, target: &InjectionTarget) -> Result<Var> {
    let d = *tape
        .shape(context)
        .last()
        .ok_or_else(|| Error::invalid("context_inject", "scalar context"))?;
    let r = tape.constant(interpolation_matrix(d, target));
    tape.matmul(context, r)
}

/// Elementwise mean of `M` features `[d]`, in modality order.
///
/// ```
/// use sen_core::adapters::average_features;
/// use sen_core::tensor::Tensor;
///
/// let v = Tensor::from_vec(vec![1.0, -2.0]);
/// let neg = Tensor::from_vec(vec![-1.0, 2.0]);
/// assert_eq!(average_features(&[v, neg]).unwrap().data(), &[0.0, 0.0]);
/// ```
pub fn average_features(finals: &[Tensor]) -> Result<Tensor> {
    let first = finals
        .first()
        .ok_or_else(|| Error::invalid("average_features", "no features"))?;
    let d = first.numel();
    let mut tape = Tape::new();
    let vars = finals
        .iter()
        .map(|f| {
            if f.numel() != d {
                return Err(Error::shape("average_features", first.shape(), f.shape()));
            }
            Ok(tape.constant(f.clone().reshaped(&[1, d])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = crate::network::average(&mut tape, &vars)?;
    tape.to_tensor(mean).reshaped(first.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> ClassEmbeddings {
        ClassEmbeddings::new(Tensor::eye(n), (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn agreeing_streams_score_two() {
        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let (c, s) = contrastive_predict(&e1, &e1, &classes(2)).unwrap();
        assert_eq!(c, 0);
        assert_eq!(s.data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_feature_is_numeric_error() {
        let z = Tensor::zeros(&[2]);
        let e = Tensor::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            contrastive_predict(&z, &e, &classes(2)),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn rows_are_normalized() {
        let m = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let c = ClassEmbeddings::new(m, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.matrix().data(), &[0.6, 0.8, 0.0, 1.0]);
        let zero = Tensor::zeros(&[1, 2]);
        assert!(ClassEmbeddings::new(zero, vec!["z".into()]).is_err());
    }

    #[test]
    fn resample_four_to_seven() {
        let ctx = Tensor::from_vec(vec![1.0, 3.0, -1.0, 5.0]);
        let out = context_inject(&ctx, &InjectionTarget::new(&[7]).unwrap()).unwrap();
        // t = j/2: 0, .5, 1, 1.5, 2, 2.5, 3
        let table = [1.0, 2.0, 3.0, 1.0, -1.0, 2.0, 5.0];
        for (a, b) in out.data().iter().zip(table) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn same_size_is_identity_and_reshapes() {
        let ctx = Tensor::from_vec((0..6).map(|i| i as f64 * 0.7).collect());
        let out = context_inject(&ctx, &InjectionTarget::new(&[2, 3]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.data(), ctx.data());
    }

    #[test]
    fn matrix_path_matches_direct_path() {
        let ctx = Tensor::from_vec(vec![0.3, -1.1, 2.5, 0.9, 4.0]);
        let target = InjectionTarget::new(&[3, 4]).unwrap();
        let direct = context_inject(&ctx, &target).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(ctx.clone().reshaped(&[1, 5]).unwrap());
        let out = context_inject_var(&mut tape, c, &target).unwrap();
        for (a, b) in tape.value(out).iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        assert!(InjectionTarget::new(&[]).is_err());
        assert!(InjectionTarget::new(&[3, 0]).is_err());
    }

    #[test]
    fn average_rejects_empty_and_mismatched() {
        assert!(average_features(&[]).is_err());
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0]);
        assert!(average_features(&[a.clone(), b]).is_err());
        assert!(average_features(std::slice::from_ref(&a)).unwrap().bitwise_eq(&a));
    }
}
