//! Rank-r projection maps from intermediate features: POD via SVD of the
//! snapshot matrix, active subspaces via gradient covariance, and a
//! Frequent Directions sketch as the streaming route to the latter.

use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, sym_eig};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pod,
    As,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pod => "pod",
            Method::As => "as",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pod" => Ok(Method::Pod),
            "as" => Ok(Method::As),
            other => Err(Error::Parameter(format!(
                "unknown reducer '{other}', expected 'pod' or 'as'"
            ))),
        }
    }
}

/// Rank-r linear reduction `z = basis * (x - center)`.
///
/// `basis` is `[r, n_l]` with orthonormal rows; `spectrum` holds the
/// retained singular values (POD) or covariance eigenvalues (AS),
/// descending. `center` is only present when snapshots were mean-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap<T: Scalar = f64> {
    pub basis: Tensor<T>,
    pub method: Method,
    pub spectrum: Vec<T>,
    pub center: Option<Tensor<T>>,
}

impl<T: Scalar> ProjectionMap<T> {
    pub fn r(&self) -> usize {
        self.basis.rows()
    }

    pub fn n_l(&self) -> usize {
        self.basis.cols()
    }

    /// Row-orthonormality within 1e-10, spectrum nonnegative descending,
    /// center length. Called on every deserialized map.
    pub fn validate(&self) -> Result<()> {
        if !self.basis.is_matrix() || self.basis.rows() > self.basis.cols() {
            return Err(Error::Validation(format!(
                "projection basis must be r x n_l with r <= n_l, got {:?}",
                self.basis.shape()
            )));
        }
        let r = self.r();
        let gram = matmul(&self.basis, &self.basis.transpose()?)?;
        for i in 0..r {
            for j in 0..r {
                let expect = if i == j { T::one() } else { T::zero() };
                if (gram.at(i, j) - expect).abs() > T::from_f64(1e-10) {
                    return Err(Error::Validation(format!(
                        "projection basis rows are not orthonormal: gram[{i}][{j}] = {}",
                        gram.at(i, j)
                    )));
                }
            }
        }
        if self.spectrum.len() != r {
            return Err(Error::Validation(format!(
                "spectrum has {} entries for rank {r}",
                self.spectrum.len()
            )));
        }
        for w in self.spectrum.windows(2) {
            if w[1] > w[0] {
                return Err(Error::Validation("spectrum is not descending".into()));
            }
        }
        if self.spectrum.iter().any(|&v| v < T::zero()) {
            return Err(Error::Validation("spectrum has negative entries".into()));
        }
        if let Some(c) = &self.center {
            if c.shape() != [self.n_l()] {
                return Err(Error::Validation(format!(
                    "center has shape {:?}, expected [{}]",
                    c.shape(),
                    self.n_l()
                )));
            }
        }
        Ok(())
    }
}

/// POD basis: top-r left singular vectors of the `[n_l, N]` snapshot
/// matrix. With `center` set, the per-feature mean is subtracted first
/// and stored in the map.
pub fn pod_basis<T: Scalar>(snapshots: &Tensor<T>, r: usize, center: bool) -> Result<ProjectionMap<T>> {
    if !snapshots.is_matrix() {
        return Err(Error::Shape(format!(
            "snapshots must be a matrix, got {:?}",
            snapshots.shape()
        )));
    }
    let (n_l, n) = (snapshots.rows(), snapshots.cols());
    let max_r = n_l.min(n);
    if r < 1 || r > max_r {
        return Err(Error::Parameter(format!(
            "rank {r} out of range: {n_l}x{n} snapshots allow 1 <= r <= {max_r}"
        )));
    }

    let mut work = snapshots.clone();
    let center_vec = if center {
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut mean = vec![T::zero(); n_l];
        for (i, m) in mean.iter_mut().enumerate() {
            *m = work.row(i).iter().copied().sum::<T>() * inv_n;
        }
        for i in 0..n_l {
            let m = mean[i];
            for v in work.row_mut(i) {
                *v = *v - m;
            }
        }
        Some(Tensor::from_vec(mean))
    } else {
        None
    };

    let f = svd(&work)?;
    let mut basis = Tensor::zeros(&[r, n_l]);
    for i in 0..r {
        for j in 0..n_l {
            basis.set(i, j, f.u.at(j, i));
        }
    }
    Ok(ProjectionMap {
        basis,
        method: Method::Pod,
        spectrum: f.s[..r].to_vec(),
        center: center_vec,
    })
}

/// Plain stable softmax at T = 1, local to the gradient computation here
/// (the distiller owns the temperature-scaled variant).
fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient rows of g_l(x^l) = cross-entropy(post(x^l), label): one row
/// per feature column, computed by backpropagating softmax - onehot.
pub fn as_gradients<T: Scalar>(
    post: &Network<T>,
    features: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    if !features.is_matrix() {
        return Err(Error::Shape(format!(
            "features must be a matrix, got {:?}",
            features.shape()
        )));
    }
    let (n_l, n) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {n} feature columns",
            labels.len()
        )));
    }
    let in_shape = post.input_shape().to_vec();
    if in_shape.iter().product::<usize>() != n_l {
        return Err(Error::Shape(format!(
            "feature rows ({n_l}) do not match the post-model input {in_shape:?}"
        )));
    }
    let out_shape = post.output_shape().to_vec();
    if out_shape.len() != 1 {
        return Err(Error::Shape(format!(
            "post-model must end in logits, got output shape {out_shape:?}"
        )));
    }
    let n_class = out_shape[0];

    let mut grads = Tensor::zeros(&[n, n_l]);
    for j in 0..n {
        let label = labels[j];
        if label >= n_class {
            return Err(Error::Data(format!(
                "label {label} at sample {j} out of range for {n_class} classes"
            )));
        }
        let col: Vec<T> = (0..n_l).map(|i| features.at(i, j)).collect();
        let x = Tensor::new(in_shape.clone(), col)?;
        let trace = post.forward(&x)?;
        let mut grad_out = softmax(trace.output().data());
        grad_out[label] = grad_out[label] - T::one();
        let bundle = post.backward(&trace, &Tensor::from_vec(grad_out))?;
        let flat = bundle.input_grad.flatten();
        for (i, &v) in flat.data().iter().enumerate() {
            grads.set(j, i, v);
        }
    }
    Ok(grads)
}

/// Active-subspace basis: top-r eigenvectors of C = (1/N) G^T G.
///
/// Zero gradients are legal; the eigensolver then returns an arbitrary
/// (but orthonormal and deterministic) basis with an all-zero spectrum.
pub fn as_basis<T: Scalar>(gradients: &Tensor<T>, r: usize) -> Result<ProjectionMap<T>> {
    if !gradients.is_matrix() {
        return Err(Error::Shape(format!(
            "gradients must be a matrix, got {:?}",
            gradients.shape()
        )));
    }
    let (n, n_l) = (gradients.rows(), gradients.cols());
    if n == 0 {
        return Err(Error::Parameter("as_basis needs at least one gradient row".into()));
    }
    if r < 1 || r > n_l {
        return Err(Error::Parameter(format!(
            "rank {r} out of range: gradients have {n_l} columns, need 1 <= r <= {n_l}"
        )));
    }
    let mut cov = matmul(&gradients.transpose()?, gradients)?;
    let inv_n = T::one() / T::from_f64(n as f64);
    for v in cov.data_mut() {
        *v = *v * inv_n;
    }
    let eig = sym_eig(&cov)?;
    let mut basis = Tensor::zeros(&[r, n_l]);
    for i in 0..r {
        for j in 0..n_l {
            basis.set(i, j, eig.vectors.at(j, i));
        }
    }
    let spectrum = eig.values[..r].iter().map(|&v| v.max(T::zero())).collect();
    Ok(ProjectionMap {
        basis,
        method: Method::As,
        spectrum,
        center: None,
    })
}

/// Frequent Directions sketch of a row stream.
///
/// The working buffer holds up to `2l` rows; on overflow it is SVD'd and
/// the squared singular values are shrunk by the (l+1)-th largest, which
/// zeroes at least half the rows. Working at `2l` and publishing the top
/// `l` rows is what makes the classical guarantee
/// `|A^T A - B^T B|_2 <= |A|_F^2 / l` hold with denominator `l` (a plain
/// l-row buffer only achieves `2/l`).
#[derive(Debug, Clone)]
pub struct FdSketch<T: Scalar = f64> {
    buffer: Tensor<T>,
    ell: usize,
    filled: usize,
    rows_seen: usize,
}

impl<T: Scalar> FdSketch<T> {
    pub fn new(ell: usize, n: usize) -> Result<Self> {
        if ell < 1 || n < 1 {
            return Err(Error::Parameter(format!(
                "sketch size and row length must be >= 1, got l = {ell}, n = {n}"
            )));
        }
        Ok(FdSketch {
            buffer: Tensor::zeros(&[2 * ell, n]),
            ell,
            filled: 0,
            rows_seen: 0,
        })
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn n(&self) -> usize {
        self.buffer.cols()
    }

    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    /// Append one row of the streamed matrix.
    pub fn update(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.n() {
            return Err(Error::Shape(format!(
                "sketch rows have length {}, got {}",
                self.n(),
                row.len()
            )));
        }
        if self.filled == 2 * self.ell {
            self.shrink()?;
        }
        self.buffer.row_mut(self.filled).copy_from_slice(row);
        self.filled += 1;
        self.rows_seen += 1;
        Ok(())
    }

    /// The published `[l, n]` sketch B, compacting the buffer if needed.
    pub fn sketch_matrix(&mut self) -> Result<Tensor<T>> {
        if self.filled > self.ell {
            self.shrink()?;
        }
        let n = self.n();
        let mut b = Tensor::zeros(&[self.ell, n]);
        for i in 0..self.filled.min(self.ell) {
            b.row_mut(i).copy_from_slice(self.buffer.row(i));
        }
        Ok(b)
    }

    /// SVD the occupied rows and shrink by the (l+1)-th largest squared
    /// singular value; at most l rows stay nonzero.
    fn shrink(&mut self) -> Result<()> {
        let n = self.n();
        let occupied = Tensor::new(
            vec![self.filled, n],
            self.buffer.data()[..self.filled * n].to_vec(),
        )?;
        let f = svd(&occupied)?;
        let k = f.s.len();
        let delta = if k > self.ell {
            f.s[self.ell] * f.s[self.ell]
        } else {
            T::zero()
        };
        let keep = k.min(self.ell);
        for v in self.buffer.data_mut() {
            *v = T::zero();
        }
        for i in 0..keep {
            let shrunk = (f.s[i] * f.s[i] - delta).max(T::zero()).sqrt();
            if shrunk == T::zero() {
                continue;
            }
            for j in 0..n {
                self.buffer.set(i, j, shrunk * f.vt.at(i, j));
            }
        }
        self.filled = keep;
        Ok(())
    }
}

/// Basis from a finished sketch: top-r right singular directions of B.
/// The spectrum is scaled by 1/rows_seen so it estimates the covariance
/// eigenvalues the exact path would produce.
pub fn fd_finalize<T: Scalar>(sketch: &mut FdSketch<T>, r: usize) -> Result<ProjectionMap<T>> {
    let (ell, n) = (sketch.ell(), sketch.n());
    if r < 1 || r > ell.min(n) {
        return Err(Error::Parameter(format!(
            "rank {r} out of range: sketch is {ell} x {n}, need 1 <= r <= {}",
            ell.min(n)
        )));
    }
    if sketch.rows_seen() == 0 {
        return Err(Error::Parameter("cannot finalize an empty sketch".into()));
    }
    let b = sketch.sketch_matrix()?;
    let f = svd(&b)?;
    let mut basis = Tensor::zeros(&[r, n]);
    for i in 0..r {
        for j in 0..n {
            basis.set(i, j, f.vt.at(i, j));
        }
    }
    let inv_n = T::one() / T::from_f64(sketch.rows_seen() as f64);
    let spectrum = f.s[..r].iter().map(|&s| s * s * inv_n).collect();
    Ok(ProjectionMap {
        basis,
        method: Method::As,
        spectrum,
        center: None,
    })
}

/// `z = basis * (flatten(x) - center)`.
pub fn project<T: Scalar>(map: &ProjectionMap<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n_l = map.n_l();
    if x.len() != n_l {
        return Err(Error::Shape(format!(
            "projection expects {n_l} features, input has {} (shape {:?})",
            x.len(),
            x.shape()
        )));
    }
    let xd = x.data();
    let mut z = vec![T::zero(); map.r()];
    match &map.center {
        Some(c) => {
            let cd = c.data();
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = map
                    .basis
                    .row(i)
                    .iter()
                    .zip(xd.iter().zip(cd))
                    .map(|(&b, (&v, &m))| b * (v - m))
                    .sum();
            }
        }
        None => {
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = map
                    .basis
                    .row(i)
                    .iter()
                    .zip(xd)
                    .map(|(&b, &v)| b * v)
                    .sum();
            }
        }
    }
    Ok(Tensor::from_vec(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::rng;

    type Tensor = crate::tensor::Tensor<f64>;
    type Network = crate::nn::Network<f64>;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng::uniform(&mut r, -1.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn cos_angle(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn pod_recovers_rank_one_direction() {
        let mut u = vec![0.0; 10];
        let mut r = rng::seeded(0);
        for v in u.iter_mut() {
            *v = rng::uniform(&mut r, -1.0, 1.0);
        }
        let mut snaps = Tensor::zeros(&[10, 6]);
        for j in 0..6 {
            let scale = rng::uniform::<f64>(&mut r, -2.0, 2.0);
            for i in 0..10 {
                snaps.set(i, j, u[i] * scale);
            }
        }
        let map = pod_basis(&snaps, 1, false).unwrap();
        assert!((cos_angle(map.basis.row(0), &u).abs() - 1.0).abs() <= 1e-10);
        map.validate().unwrap();
    }

    #[test]
    fn pod_full_rank_reconstructs_snapshots() {
        let snaps = random_matrix(8, 5, 1);
        let map = pod_basis(&snaps, 5, false).unwrap();
        // lift(project(x)) = basis^T basis x must reproduce each snapshot
        for j in 0..5 {
            let x = Tensor::from_vec((0..8).map(|i| snaps.at(i, j)).collect());
            let z = project(&map, &x).unwrap();
            for i in 0..8 {
                let lifted: f64 = (0..5).map(|k| map.basis.at(k, i) * z[k]).sum();
                assert!((lifted - x[i]).abs() <= 1e-8, "snapshot {j} entry {i}");
            }
        }
    }

    #[test]
    fn pod_spectrum_matches_svd_oracle() {
        let snaps = random_matrix(20, 12, 2);
        let map = pod_basis(&snaps, 5, false).unwrap();
        let f = svd(&snaps).unwrap();
        for i in 0..5 {
            assert!((map.spectrum[i] - f.s[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn pod_centering_stores_the_mean() {
        let mut snaps = random_matrix(6, 10, 3);
        for j in 0..10 {
            snaps.set(2, j, snaps.at(2, j) + 100.0); // large offset on row 2
        }
        let map = pod_basis(&snaps, 2, true).unwrap();
        let center = map.center.as_ref().unwrap();
        let mean_row2: f64 = (0..10).map(|j| snaps.at(2, j)).sum::<f64>() / 10.0;
        assert!((center[2] - mean_row2).abs() <= 1e-12);
        map.validate().unwrap();
        // Centered POD ignores the constant offset direction.
        let uncentered = pod_basis(&snaps, 2, false).unwrap();
        assert!(uncentered.basis.row(0)[2].abs() > 0.9); // offset dominates
        assert!(map.basis.row(0)[2].abs() < 0.9);
    }

    #[test]
    fn pod_residual_equals_discarded_spectrum_energy() {
        let snaps = random_matrix(12, 9, 4);
        let r = 4;
        let map = pod_basis(&snaps, r, false).unwrap();
        let f = svd(&snaps).unwrap();
        let discarded: f64 = f.s[r..].iter().map(|s| s * s).sum();
        let mut residual = 0.0;
        for j in 0..9 {
            let x = Tensor::from_vec((0..12).map(|i| snaps.at(i, j)).collect());
            let z = project(&map, &x).unwrap();
            for i in 0..12 {
                let lifted: f64 = (0..r).map(|k| map.basis.at(k, i) * z[k]).sum();
                residual += (x[i] - lifted) * (x[i] - lifted);
            }
        }
        assert!(
            (residual - discarded).abs() <= 1e-8,
            "residual {residual} vs discarded {discarded}"
        );
    }

    #[test]
    fn pod_beats_random_projections() {
        let snaps = random_matrix(12, 9, 5);
        let r = 3;
        let map = pod_basis(&snaps, r, false).unwrap();
        let pod_residual = projection_residual(&map, &snaps);
        for trial in 0..20 {
            let rand_map = random_orthonormal_map(r, 12, 1000 + trial);
            assert!(projection_residual(&rand_map, &snaps) >= pod_residual - 1e-9);
        }
    }

    fn projection_residual(map: &ProjectionMap<f64>, snaps: &Tensor) -> f64 {
        let (n_l, n) = (snaps.rows(), snaps.cols());
        let mut residual = 0.0;
        for j in 0..n {
            let x = Tensor::from_vec((0..n_l).map(|i| snaps.at(i, j)).collect());
            let z = project(map, &x).unwrap();
            for i in 0..n_l {
                let lifted: f64 = (0..map.r()).map(|k| map.basis.at(k, i) * z[k]).sum();
                residual += (x[i] - lifted) * (x[i] - lifted);
            }
        }
        residual
    }

    /// Gram-Schmidt on random rows: an arbitrary orthonormal projection.
    fn random_orthonormal_map(r: usize, n: usize, seed: u64) -> ProjectionMap<f64> {
        let mut rows = random_matrix(r, n, seed);
        for i in 0..r {
            for prev in 0..i {
                let dot: f64 = rows.row(i).iter().zip(rows.row(prev)).map(|(a, b)| a * b).sum();
                let prev_row: Vec<f64> = rows.row(prev).to_vec();
                for (v, p) in rows.row_mut(i).iter_mut().zip(prev_row) {
                    *v -= dot * p;
                }
            }
            let norm: f64 = rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rows.row_mut(i) {
                *v /= norm;
            }
        }
        ProjectionMap {
            basis: rows,
            method: Method::Pod,
            spectrum: vec![0.0; r],
            center: None,
        }
    }

    #[test]
    fn pod_rejects_bad_rank() {
        let snaps = random_matrix(6, 4, 6);
        for r in [0, 5, 7] {
            let err = pod_basis(&snaps, r, false).unwrap_err();
            assert!(err.to_string().contains("1 <= r <= 4"), "{err}");
        }
    }

    fn linear_post(n_in: usize, n_out: usize, seed: u64) -> Network {
        let mut r = rng::seeded(seed);
        Network::new(
            vec![n_in],
            vec![Layer::linear_init(n_in, n_out, &mut r).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn as_gradient_vanishes_at_confident_correct_prediction() {
        // Identity post-model and a feature vector whose label logit
        // towers over the rest: softmax is one-hot, so the CE gradient
        // at the features is ~0.
        let post = Network::new(
            vec![3],
            vec![Layer::linear(Tensor::identity(3), Tensor::from_vec(vec![0.0; 3])).unwrap()],
        )
        .unwrap();
        let mut features = Tensor::zeros(&[3, 1]);
        features.set(1, 0, 50.0);
        let grads = as_gradients(&post, &features, &[1]).unwrap();
        assert!(grads.max_abs() <= 1e-8);
    }

    #[test]
    fn as_gradients_match_finite_differences() {
        let post = linear_post(6, 4, 7);
        let features = random_matrix(6, 3, 8);
        let labels = [2usize, 0, 3];
        let grads = as_gradients(&post, &features, &labels).unwrap();

        let h = 1e-6;
        for j in 0..3 {
            for i in 0..6 {
                let loss_at = |delta: f64| -> f64 {
                    let mut x: Vec<f64> = (0..6).map(|k| features.at(k, j)).collect();
                    x[i] += delta;
                    let out = post.output(&Tensor::from_vec(x)).unwrap();
                    let p = softmax(out.data());
                    -p[labels[j]].ln()
                };
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let got = grads.at(j, i);
                assert!(
                    (got - fd).abs() / got.abs().max(fd.abs()).max(1e-4) <= 1e-5,
                    "sample {j} feature {i}: analytic {got}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn duplicated_sample_duplicates_its_gradient_row() {
        let post = linear_post(5, 3, 9);
        let mut features = Tensor::zeros(&[5, 2]);
        let col = random_matrix(5, 1, 10);
        for i in 0..5 {
            features.set(i, 0, col.at(i, 0));
            features.set(i, 1, col.at(i, 0));
        }
        let grads = as_gradients(&post, &features, &[1, 1]).unwrap();
        for i in 0..5 {
            assert_eq!(grads.at(0, i), grads.at(1, i));
        }
    }

    #[test]
    fn as_gradients_reject_bad_labels() {
        let post = linear_post(4, 3, 11);
        let features = random_matrix(4, 2, 12);
        let err = as_gradients(&post, &features, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn as_basis_recovers_ridge_direction() {
        // g(x) = (a^T x)^2 has gradient 2 (a^T x) a: every row is
        // parallel to a, so the leading eigenvector must be +-a.
        let n = 12;
        let mut r = rng::seeded(13);
        let mut a: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in a.iter_mut() {
            *v /= norm;
        }
        let mut grads = Tensor::zeros(&[40, n]);
        for j in 0..40 {
            let x: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
            let ax: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
            for i in 0..n {
                grads.set(j, i, 2.0 * ax * a[i]);
            }
        }
        let map = as_basis(&grads, 2).unwrap();
        assert!((cos_angle(map.basis.row(0), &a).abs() - 1.0).abs() <= 1e-8);
        map.validate().unwrap();
    }

    #[test]
    fn as_spectrum_ratio_matches_rayleigh_quotient_oracle() {
        // g(x) = (a^T x)^2 + 0.01 (b^T x)^2 with a perpendicular to b.
        // The oracle measures gradient energy along a and b directly
        // from the accumulated covariance, no eigensolver involved.
        let n = 10;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        a[0] = 1.0;
        b[3] = 1.0;
        let mut r = rng::seeded(14);
        let n_samples = 400;
        let mut grads = Tensor::zeros(&[n_samples, n]);
        for j in 0..n_samples {
            let x: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
            let ax: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
            let bx: f64 = b.iter().zip(&x).map(|(p, q)| p * q).sum();
            for i in 0..n {
                grads.set(j, i, 2.0 * ax * a[i] + 0.02 * bx * b[i]);
            }
        }
        let map = as_basis(&grads, 2).unwrap();

        let mut energy_a = 0.0;
        let mut energy_b = 0.0;
        for j in 0..n_samples {
            let ga: f64 = (0..n).map(|i| grads.at(j, i) * a[i]).sum();
            let gb: f64 = (0..n).map(|i| grads.at(j, i) * b[i]).sum();
            energy_a += ga * ga;
            energy_b += gb * gb;
        }
        let oracle_ratio = energy_a / energy_b;
        let got_ratio = map.spectrum[0] / map.spectrum[1];
        assert!(
            (got_ratio - oracle_ratio).abs() <= 0.05 * oracle_ratio,
            "eig ratio {got_ratio} vs oracle {oracle_ratio}"
        );
    }

    #[test]
    fn as_basis_of_zero_gradients_is_orthonormal() {
        let grads = Tensor::zeros(&[5, 4]);
        let map = as_basis(&grads, 2).unwrap();
        assert!(map.spectrum.iter().all(|&v| v == 0.0));
        map.validate().unwrap();
    }

    #[test]
    fn fd_without_compression_is_exact() {
        let a = random_matrix(6, 5, 15);
        let mut sketch = FdSketch::new(8, 5).unwrap(); // l >= N: never shrinks
        for i in 0..6 {
            sketch.update(a.row(i)).unwrap();
        }
        let b = sketch.sketch_matrix().unwrap();
        let ata = matmul(&a.transpose().unwrap(), &a).unwrap();
        let btb = matmul(&b.transpose().unwrap(), &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((ata.at(i, j) - btb.at(i, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn fd_guarantee_holds_with_eigensolver_norm() {
        let a = random_matrix(60, 12, 16);
        for ell in [3usize, 6] {
            let mut sketch = FdSketch::new(ell, 12).unwrap();
            for i in 0..60 {
                sketch.update(a.row(i)).unwrap();
            }
            let b = sketch.sketch_matrix().unwrap();
            let ata = matmul(&a.transpose().unwrap(), &a).unwrap();
            let btb = matmul(&b.transpose().unwrap(), &b).unwrap();
            let mut diff = Tensor::zeros(&[12, 12]);
            for i in 0..12 {
                for j in 0..12 {
                    diff.set(i, j, ata.at(i, j) - btb.at(i, j));
                }
            }
            // Spectral norm of the symmetric difference via its extreme
            // eigenvalues.
            let eig = sym_eig(&diff).unwrap();
            let norm = eig
                .values
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            let bound = a.frobenius_norm().powi(2) / ell as f64;
            assert!(norm <= bound, "l = {ell}: {norm} > {bound}");
        }
    }

    #[test]
    fn fd_zero_rows_leave_sketch_zero() {
        let mut sketch = FdSketch::new(2, 4).unwrap();
        for _ in 0..10 {
            sketch.update(&[0.0; 4]).unwrap();
        }
        let b = sketch.sketch_matrix().unwrap();
        assert!(b.max_abs() == 0.0);
        assert_eq!(sketch.rows_seen(), 10);
    }

    #[test]
    fn fd_rejects_wrong_row_length() {
        let mut sketch = FdSketch::new(2, 4).unwrap();
        let err = sketch.update(&[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn fd_finalize_agrees_with_exact_path_on_ridge_data() {
        // Well-separated two-direction data: the sketch path and the
        // exact covariance path must find the same leading subspace.
        let n = 16;
        let mut r = rng::seeded(17);
        let mut grads = Tensor::zeros(&[300, n]);
        for j in 0..300 {
            let s1 = rng::uniform::<f64>(&mut r, -3.0, 3.0);
            let s2 = rng::uniform::<f64>(&mut r, -0.5, 0.5);
            for i in 0..n {
                let dir1 = if i == 2 { 1.0 } else { 0.0 };
                let dir2 = if i == 9 { 1.0 } else { 0.0 };
                grads.set(j, i, s1 * dir1 + s2 * dir2 + rng::uniform::<f64>(&mut r, -0.01, 0.01));
            }
        }
        let exact = as_basis(&grads, 2).unwrap();
        let mut sketch = FdSketch::new(4, n).unwrap(); // l = 2r
        for j in 0..300 {
            sketch.update(grads.row(j)).unwrap();
        }
        let sketched = fd_finalize(&mut sketch, 2).unwrap();
        sketched.validate().unwrap();
        for i in 0..2 {
            let cos = cos_angle(exact.basis.row(i), sketched.basis.row(i)).abs();
            assert!(cos.acos() <= 0.05, "row {i}: angle {} rad", cos.acos());
        }
    }

    #[test]
    fn identity_projection_is_a_no_op() {
        let map = ProjectionMap {
            basis: Tensor::identity(4),
            method: Method::Pod,
            spectrum: vec![0.0; 4],
            center: None,
        };
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = project(&map, &x).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projection_of_orthogonal_vector_is_zero() {
        let mut basis = Tensor::zeros(&[2, 4]);
        basis.set(0, 0, 1.0);
        basis.set(1, 1, 1.0);
        let map = ProjectionMap {
            basis,
            method: Method::As,
            spectrum: vec![0.0; 2],
            center: None,
        };
        let x = Tensor::from_vec(vec![0.0, 0.0, 5.0, -3.0]);
        let z = project(&map, &x).unwrap();
        assert!(z.max_abs() <= 1e-12);
    }

    #[test]
    fn projection_is_non_expansive() {
        for seed in 0..10 {
            let snaps = random_matrix(8, 8, 30 + seed);
            let map = pod_basis(&snaps, 3, false).unwrap();
            let x = random_matrix(8, 1, 50 + seed).flatten();
            let z = project(&map, &x).unwrap();
            assert!(z.frobenius_norm() <= x.frobenius_norm() + 1e-10);
        }
    }

    #[test]
    fn method_names_round_trip() {
        assert_eq!(Method::parse("pod").unwrap(), Method::Pod);
        assert_eq!(Method::parse("as").unwrap(), Method::As);
        assert!(Method::parse("pca").is_err());
        assert_eq!(Method::Pod.name(), "pod");
        assert_eq!(Method::As.name(), "as");
    }
}
