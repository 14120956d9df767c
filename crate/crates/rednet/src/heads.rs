//! Surrogate heads mapping reduced coordinates z to logits: polynomial
//! chaos expansions fit by least squares, and a small feed-forward net
//! with Softplus activations and no bias terms.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::rng;
use crate::Tensor;

/// Scale floor guarding degenerate standardization (constant features).
const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Probabilists' Hermite with empirical mean/std standardization.
    Hermite,
    /// Legendre with min-max scaling onto [-1, 1].
    Legendre,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Hermite => "hermite",
            Family::Legendre => "legendre",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hermite" => Ok(Family::Hermite),
            "legendre" => Ok(Family::Legendre),
            other => Err(Error::Parameter(format!(
                "unknown polynomial family '{other}', expected 'hermite' or 'legendre'"
            ))),
        }
    }
}

/// All multi-indices with |alpha| <= p over r variables, graded order
/// (total degree ascending), descending lexicographic within a degree:
/// r=2, p=1 gives (0,0), (1,0), (0,1).
pub fn multi_indices(r: usize, p: usize) -> Result<Vec<Vec<usize>>> {
    if r < 1 {
        return Err(Error::Parameter("multi_indices needs r >= 1".into()));
    }
    let mut out = Vec::new();
    let mut current = vec![0usize; r];
    for degree in 0..=p {
        compositions(degree, 0, &mut current, &mut out);
    }
    Ok(out)
}

fn compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for head in (0..=remaining).rev() {
        current[pos] = head;
        compositions(remaining - head, pos + 1, current, out);
    }
}

/// `C(n, k)` for the n_terms = C(r+p, p) invariant.
pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Polynomial chaos expansion: y ~= sum over |alpha| <= p of
/// c_alpha * phi_alpha(standardize(z)).
///
/// Coefficients are the trainable part during distillation; indices,
/// family, and standardization stay frozen after the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PceModel {
    pub indices: Vec<Vec<usize>>,
    /// `[n_terms, n_out]`, row k belongs to indices[k].
    pub coefficients: Tensor,
    pub family: Family,
    pub degree: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PceModel {
    pub fn r(&self) -> usize {
        self.mean.len()
    }

    pub fn n_terms(&self) -> usize {
        self.indices.len()
    }

    pub fn n_out(&self) -> usize {
        self.coefficients.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r();
        if r < 1 || self.scale.len() != r {
            return Err(Error::Validation(format!(
                "standardization lengths disagree: {} means, {} scales",
                r,
                self.scale.len()
            )));
        }
        let expected = binomial(r + self.degree, self.degree);
        if self.n_terms() != expected {
            return Err(Error::Validation(format!(
                "{} terms stored, C({}+{}, {}) = {expected} expected",
                self.n_terms(),
                r,
                self.degree,
                self.degree
            )));
        }
        if self.indices != multi_indices(r, self.degree)? {
            return Err(Error::Validation("index list is not graded-lex".into()));
        }
        if !self.coefficients.is_matrix() || self.coefficients.rows() != self.n_terms() {
            return Err(Error::Validation(format!(
                "coefficient shape {:?} does not match {} terms",
                self.coefficients.shape(),
                self.n_terms()
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("standardization scales must be positive".into()));
        }
        Ok(())
    }
}

/// Univariate values phi_0..phi_p at u by the family's recurrence.
fn univariate(family: Family, u: f64, p: usize) -> Vec<f64> {
    let mut v = vec![0.0; p + 1];
    v[0] = 1.0;
    if p >= 1 {
        v[1] = u;
    }
    for k in 1..p {
        v[k + 1] = match family {
            // He_{k+1} = u He_k - k He_{k-1}
            Family::Hermite => u * v[k] - k as f64 * v[k - 1],
            // (k+1) P_{k+1} = (2k+1) u P_k - k P_{k-1}
            Family::Legendre => {
                ((2 * k + 1) as f64 * u * v[k] - k as f64 * v[k - 1]) / (k + 1) as f64
            }
        };
    }
    v
}

/// Derivatives phi'_0..phi'_p at u, given the values at u.
fn univariate_deriv(family: Family, p: usize, vals: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; p + 1];
    if p >= 1 {
        d[1] = 1.0;
    }
    for k in 1..p {
        d[k + 1] = match family {
            // He'_{k+1} = (k+1) He_k
            Family::Hermite => (k + 1) as f64 * vals[k],
            // P'_{k+1} = P'_{k-1} + (2k+1) P_k
            Family::Legendre => d[k - 1] + (2 * k + 1) as f64 * vals[k],
        };
    }
    d
}

fn standardized(model: &PceModel, z: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(model.mean.iter().zip(&model.scale))
        .map(|(&v, (&m, &s))| (v - m) / s)
        .collect()
}

/// Basis vector phi_alpha(z) for every stored multi-index.
pub fn pce_basis_eval(model: &PceModel, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != model.r() {
        return Err(Error::Shape(format!(
            "pce expects {} reduced coordinates, got {}",
            model.r(),
            z.len()
        )));
    }
    let u = standardized(model, z);
    let tables: Vec<Vec<f64>> = u
        .iter()
        .map(|&ui| univariate(model.family, ui, model.degree))
        .collect();
    Ok(model
        .indices
        .iter()
        .map(|alpha| {
            alpha
                .iter()
                .zip(&tables)
                .map(|(&k, table)| table[k])
                .product()
        })
        .collect())
}

/// Least-squares PCE fit with standardization computed from Z.
///
/// Z is `[N, r]` (one sample per row), Y is `[N, n_out]`. When N is
/// below the term count the least-squares step degrades to its ridge
/// path; that is logged, not an error.
pub fn pce_fit(z: &Tensor, y: &Tensor, p: usize, family: Family) -> Result<PceModel> {
    if !z.is_matrix() || !y.is_matrix() {
        return Err(Error::Shape(format!(
            "pce_fit expects matrices, got {:?} and {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let (n, r) = (z.rows(), z.cols());
    if n == 0 || r == 0 {
        return Err(Error::Parameter("pce_fit needs N >= 1 samples and r >= 1".into()));
    }
    if y.rows() != n {
        return Err(Error::Shape(format!(
            "pce_fit has {n} samples but {} targets",
            y.rows()
        )));
    }

    let (mean, scale) = match family {
        Family::Hermite => {
            let mut mean = vec![0.0; r];
            let mut scale = vec![0.0; r];
            for i in 0..r {
                let m: f64 = (0..n).map(|j| z.at(j, i)).sum::<f64>() / n as f64;
                let var: f64 = (0..n).map(|j| (z.at(j, i) - m).powi(2)).sum::<f64>() / n as f64;
                mean[i] = m;
                scale[i] = var.sqrt().max(SCALE_FLOOR);
            }
            (mean, scale)
        }
        Family::Legendre => {
            let mut mean = vec![0.0; r];
            let mut scale = vec![0.0; r];
            for i in 0..r {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for j in 0..n {
                    lo = lo.min(z.at(j, i));
                    hi = hi.max(z.at(j, i));
                }
                mean[i] = 0.5 * (hi + lo);
                scale[i] = (0.5 * (hi - lo)).max(SCALE_FLOOR);
            }
            (mean, scale)
        }
    };

    let indices = multi_indices(r, p)?;
    let n_terms = indices.len();
    if n < n_terms {
        log::warn!(
            "pce_fit: {n} samples for {n_terms} terms; least squares falls back to its ridge path"
        );
    }

    let mut model = PceModel {
        indices,
        coefficients: Tensor::zeros(&[n_terms, y.cols()]),
        family,
        degree: p,
        mean,
        scale,
    };
    let mut design = Tensor::zeros(&[n, n_terms]);
    for j in 0..n {
        let phi = pce_basis_eval(&model, z.row(j))?;
        design.row_mut(j).copy_from_slice(&phi);
    }
    model.coefficients = lstsq(&design, y)?;
    Ok(model)
}

/// Coefficient-weighted basis sum at one point.
pub fn pce_predict(model: &PceModel, z: &[f64]) -> Result<Tensor> {
    let phi = pce_basis_eval(model, z)?;
    let n_out = model.n_out();
    let mut out = vec![0.0; n_out];
    for (k, &p) in phi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, out_o) in out.iter_mut().enumerate() {
            *out_o += model.coefficients.at(k, o) * p;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Gradients of a scalar loss through the PCE: returns
/// (dL/dcoefficients `[n_terms, n_out]`, dL/dz `[r]`) given dL/dy.
pub fn pce_backward(model: &PceModel, z: &[f64], grad_y: &Tensor) -> Result<(Tensor, Tensor)> {
    if grad_y.shape() != [model.n_out()] {
        return Err(Error::Shape(format!(
            "grad_y shape {:?} does not match {} outputs",
            grad_y.shape(),
            model.n_out()
        )));
    }
    let phi = pce_basis_eval(model, z)?;
    let n_terms = model.n_terms();
    let n_out = model.n_out();
    let r = model.r();

    // y_o = sum_k c[k][o] phi_k  =>  dL/dc[k][o] = phi_k * g_o
    let mut grad_c = Tensor::zeros(&[n_terms, n_out]);
    for k in 0..n_terms {
        for o in 0..n_out {
            grad_c.set(k, o, phi[k] * grad_y[o]);
        }
    }

    // dphi_k/dz_i = phi'_{alpha_i}(u_i)/scale_i * prod_{m != i} phi_{alpha_m}(u_m)
    let u = standardized(model, z);
    let tables: Vec<Vec<f64>> = u
        .iter()
        .map(|&ui| univariate(model.family, ui, model.degree))
        .collect();
    let deriv_tables: Vec<Vec<f64>> = tables
        .iter()
        .map(|vals| univariate_deriv(model.family, model.degree, vals))
        .collect();

    let mut grad_z = vec![0.0; r];
    for (k, alpha) in model.indices.iter().enumerate() {
        // weight of term k in the loss gradient
        let gk: f64 = (0..n_out).map(|o| model.coefficients.at(k, o) * grad_y[o]).sum();
        if gk == 0.0 {
            continue;
        }
        for i in 0..r {
            if alpha[i] == 0 {
                continue; // constant factor in this variable
            }
            let mut dphi = deriv_tables[i][alpha[i]] / model.scale[i];
            for (m, &am) in alpha.iter().enumerate() {
                if m != i {
                    dphi *= tables[m][am];
                }
            }
            grad_z[i] += gk * dphi;
        }
    }
    Ok((grad_c, Tensor::from_vec(grad_z)))
}

/// Feed-forward head without biases: weight matrices applied in order
/// with Softplus between them (none after the last). The single-hidden-
/// layer default is `y = W2 * softplus_beta(W1 * z)`; the sweep utility
/// builds deeper stacks of equal width through the same struct.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnHead {
    pub weights: Vec<Tensor>,
    pub beta: f64,
}

impl FnnHead {
    /// Seeded init: each matrix uniform in +-sqrt(1/fan_in).
    pub fn init(r: usize, hidden: &[usize], n_out: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Parameter("fnn head needs at least one hidden layer".into()));
        }
        let mut dims = vec![r];
        dims.extend_from_slice(hidden);
        dims.push(n_out);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Parameter("fnn head dimensions must be >= 1".into()));
            }
            let bound = (1.0 / fan_in as f64).sqrt();
            weights.push(Tensor::matrix(
                fan_out,
                fan_in,
                (0..fan_out * fan_in)
                    .map(|_| rng::uniform(rng, -bound, bound))
                    .collect(),
            )?);
        }
        let head = FnnHead { weights, beta };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() < 2 {
            return Err(Error::Validation("fnn head needs >= 2 weight matrices".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Validation(format!(
                "fnn beta must be positive and finite, got {}",
                self.beta
            )));
        }
        for pair in self.weights.windows(2) {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::Validation(format!(
                    "fnn weight chain breaks: {:?} feeds {:?}",
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.last().expect("validated").rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    fn softplus(&self, x: f64) -> f64 {
        x.max(0.0) + (-(self.beta * x).abs()).exp().ln_1p() / self.beta
    }

    /// Pre-activations of every matrix product, in order. The last entry
    /// is the output (no activation after the final matrix).
    fn forward_trace(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        if z.shape() != [self.r()] {
            return Err(Error::Shape(format!(
                "fnn head expects input [{}], got {:?}",
                self.r(),
                z.shape()
            )));
        }
        let mut trace = Vec::with_capacity(self.weights.len());
        let mut h = z.clone();
        for (i, w) in self.weights.iter().enumerate() {
            let mut pre = vec![0.0; w.rows()];
            for (o, row) in pre.iter_mut().zip(0..w.rows()) {
                *o = w.row(row).iter().zip(h.data()).map(|(&a, &b)| a * b).sum();
            }
            let pre = Tensor::from_vec(pre);
            if i + 1 < self.weights.len() {
                h = pre.map(|v| self.softplus(v));
            }
            trace.push(pre);
        }
        Ok(trace)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut trace = self.forward_trace(z)?;
        Ok(trace.pop().expect("head has >= 2 matrices"))
    }

    /// Gradients of a scalar loss: (per-matrix gradients, dL/dz).
    pub fn backward(&self, z: &Tensor, grad_y: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        if grad_y.shape() != [self.n_out()] {
            return Err(Error::Shape(format!(
                "grad_y shape {:?} does not match {} outputs",
                grad_y.shape(),
                self.n_out()
            )));
        }
        let trace = self.forward_trace(z)?;
        let n_mats = self.weights.len();

        // Post-activation inputs to each matrix.
        let mut inputs: Vec<Tensor> = Vec::with_capacity(n_mats);
        inputs.push(z.clone());
        for pre in trace.iter().take(n_mats - 1) {
            inputs.push(pre.map(|v| self.softplus(v)));
        }

        let mut grads = vec![Tensor::zeros(&[0]); n_mats];
        let mut g = grad_y.clone();
        for i in (0..n_mats).rev() {
            let w = &self.weights[i];
            let x = &inputs[i];
            let mut gw = Tensor::zeros(&[w.rows(), w.cols()]);
            for row in 0..w.rows() {
                let gr = g[row];
                for (dst, &xv) in gw.row_mut(row).iter_mut().zip(x.data()) {
                    *dst = gr * xv;
                }
            }
            grads[i] = gw;
            let mut gx = vec![0.0; w.cols()];
            for row in 0..w.rows() {
                let gr = g[row];
                for (dst, &wv) in gx.iter_mut().zip(w.row(row)) {
                    *dst += gr * wv;
                }
            }
            let mut gx = Tensor::from_vec(gx);
            if i > 0 {
                // through the softplus: sigma'(pre) = 1/(1+exp(-beta pre))
                let pre = &trace[i - 1];
                let b = self.beta;
                gx = Tensor::from_vec(
                    gx.data()
                        .iter()
                        .zip(pre.data())
                        .map(|(&gv, &pv)| gv / (1.0 + (-b * pv).exp()))
                        .collect(),
                );
            }
            g = gx;
        }
        Ok((grads, g))
    }
}

/// One-call forward for the common case.
pub fn fnn_forward(head: &FnnHead, z: &Tensor) -> Result<Tensor> {
    head.forward(z)
}

/// Either head kind behind one interface for the distiller.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Pce(PceModel),
    Fnn(FnnHead),
}

impl Head {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Head::Pce(_) => "pce",
            Head::Fnn(_) => "fnn",
        }
    }

    pub fn r(&self) -> usize {
        match self {
            Head::Pce(m) => m.r(),
            Head::Fnn(h) => h.r(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Head::Pce(m) => m.n_out(),
            Head::Fnn(h) => h.n_out(),
        }
    }

    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Head::Pce(m) => pce_predict(m, z.data()),
            Head::Fnn(h) => h.forward(z),
        }
    }

    /// Trainable tensors, in the order [`Head::backward`] reports their
    /// gradients. PCE trains coefficients only; standardization and the
    /// index set stay frozen.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Pce(m) => vec![&mut m.coefficients],
            Head::Fnn(h) => h.weights.iter_mut().collect(),
        }
    }

    pub fn backward(&self, z: &Tensor, grad_y: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        match self {
            Head::Pce(m) => {
                let (gc, gz) = pce_backward(m, z.data(), grad_y)?;
                Ok((vec![gc], gz))
            }
            Head::Fnn(h) => h.backward(z, grad_y),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Head::Pce(m) => m.validate(),
            Head::Fnn(h) => h.validate(),
        }
    }
}

/// Stored parameter count: FNN weights, or PCE coefficients plus the 2r
/// standardization values that ship with them.
pub fn head_param_count(head: &Head) -> usize {
    match head {
        Head::Pce(m) => m.n_terms() * m.n_out() + 2 * m.r(),
        Head::Fnn(h) => h.param_count(),
    }
}
