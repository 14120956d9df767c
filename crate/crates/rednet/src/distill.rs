//! Knowledge-distillation losses and the training loops: the reduced
//! net against its teacher, and plain cross-entropy training used to
//! produce teachers in the first place.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::reduce::{project, ProjectionMap};
use crate::rng;
use crate::{Network, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Distillation temperature, applied to both teacher and student
    /// inside the KL term.
    pub tau: f64,
    /// Weight of the KL term; the cross-entropy term gets 1 - lambda.
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub momentum: f64,
    pub train_head: bool,
    pub train_projection: bool,
    pub train_pre: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 4.0,
            lambda: 0.5,
            epochs: 10,
            batch: 32,
            lr: 0.01,
            seed: 0,
            momentum: 0.9,
            train_head: true,
            train_projection: false,
            train_pre: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Pre-model, projection, and head chained into one student network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNet {
    pub pre: Network,
    pub map: ProjectionMap,
    pub head: Head,
}

impl ReducedNet {
    /// Checks the n0 -> n_l -> r -> n_out shape chain.
    pub fn new(pre: Network, map: ProjectionMap, head: Head) -> Result<Self> {
        let n_l: usize = pre.output_shape().iter().product();
        if map.n_l() != n_l {
            return Err(Error::Config(format!(
                "pre-model emits {n_l} features but the projection expects {}",
                map.n_l()
            )));
        }
        if map.r() != head.r() {
            return Err(Error::Config(format!(
                "projection rank {} does not match head input {}",
                map.r(),
                head.r()
            )));
        }
        if let Some(c) = &map.center {
            if c.len() != n_l {
                return Err(Error::Config(format!(
                    "projection center has {} entries for {n_l} features",
                    c.len()
                )));
            }
        }
        head.validate()?;
        Ok(ReducedNet { pre, map, head })
    }

    pub fn n_out(&self) -> usize {
        self.head.n_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let features = self.pre.output(x)?;
        let z = project(&self.map, &features)?;
        self.head.predict(&z)
    }

    /// Shapes of every pre-model parameter tensor, for velocity buffers.
    fn layers_param_shapes(&self) -> Vec<Vec<Vec<usize>>> {
        self.pre
            .layers()
            .iter()
            .map(|l| l.params().iter().map(|t| t.shape().to_vec()).collect())
            .collect()
    }
}

/// Temperature-softened softmax, computed with max subtraction.
pub fn softmax_t(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    if logits.shape().len() != 1 || logits.len() == 0 {
        return Err(Error::Shape(format!(
            "softmax expects a non-empty vector, got shape {:?}",
            logits.shape()
        )));
    }
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&y| ((y - m) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(Tensor::from_vec(exps.into_iter().map(|e| e / z).collect()))
}

/// KL divergence between softened teacher and student distributions,
/// scaled by t^2 so its gradient magnitude stays comparable across
/// temperatures.
pub fn kl_distill_loss(y_t: &Tensor, y_s: &Tensor, t: f64) -> Result<f64> {
    if y_t.shape() != y_s.shape() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            y_t.shape(),
            y_s.shape()
        )));
    }
    let p_t = softmax_t(y_t, t)?;
    let p_s = softmax_t(y_s, t)?;
    let mut kl = 0.0;
    for (&pt, &ps) in p_t.data().iter().zip(p_s.data()) {
        if pt > 0.0 {
            kl += pt * (pt / ps).ln();
        }
    }
    Ok(t * t * kl)
}

/// Cross entropy of the student logits at temperature 1 against a
/// one-hot truth vector, via log-sum-exp.
pub fn ce_student_loss(truth: &Tensor, y_s: &Tensor) -> Result<f64> {
    if truth.shape() != y_s.shape() {
        return Err(Error::Shape(format!(
            "one-hot truth {:?} vs logits {:?}",
            truth.shape(),
            y_s.shape()
        )));
    }
    let mut class = None;
    for (i, &v) in truth.data().iter().enumerate() {
        if v == 1.0 {
            if class.is_some() {
                return Err(Error::Data("one-hot vector has two entries set".into()));
            }
            class = Some(i);
        } else if v != 0.0 {
            return Err(Error::Data(format!(
                "one-hot vector entry {i} is {v}, expected 0 or 1"
            )));
        }
    }
    let class = class.ok_or_else(|| Error::Data("one-hot vector has no entry set".into()))?;
    let m = y_s.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = y_s.data().iter().map(|&y| (y - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - y_s.data()[class])
}

/// lambda * KL(tau) + (1 - lambda) * CE(1).
pub fn combined_loss(truth: &Tensor, y_t: &Tensor, y_s: &Tensor, cfg: &DistillConfig) -> Result<f64> {
    cfg.validate()?;
    let ld = kl_distill_loss(y_t, y_s, cfg.tau)?;
    let ls = ce_student_loss(truth, y_s)?;
    Ok(cfg.lambda * ld + (1.0 - cfg.lambda) * ls)
}

/// d(combined_loss)/d(student logits):
/// lambda * tau * (p_s(tau) - p_t(tau)) + (1 - lambda) * (p_s(1) - truth).
pub fn combined_loss_grad(
    truth: &Tensor,
    y_t: &Tensor,
    y_s: &Tensor,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let p_t = softmax_t(y_t, cfg.tau)?;
    let p_s_tau = softmax_t(y_s, cfg.tau)?;
    let p_s = softmax_t(y_s, 1.0)?;
    let n = y_s.len();
    let mut g = vec![0.0; n];
    for i in 0..n {
        g[i] = cfg.lambda * cfg.tau * (p_s_tau.data()[i] - p_t.data()[i])
            + (1.0 - cfg.lambda) * (p_s.data()[i] - truth.data()[i]);
    }
    Ok(Tensor::from_vec(g))
}

pub fn one_hot(label: usize, n: usize) -> Result<Tensor> {
    if label >= n {
        return Err(Error::Data(format!("label {label} out of range for {n} classes")));
    }
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    Ok(Tensor::from_vec(v))
}

/// One epoch row of the training history. All numeric fields are exact
/// f64 values so identical runs compare bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub distill_loss: f64,
    pub student_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

impl EpochRecord {
    /// One machine-parseable key=value line.
    pub fn to_line(&self) -> String {
        let test = match self.test_accuracy {
            Some(a) => format!("{a:.6}"),
            None => "nan".to_string(),
        };
        format!(
            "epoch={} loss={:.6} distill={:.6} student={:.6} train_acc={:.6} test_acc={test}",
            self.epoch, self.loss, self.distill_loss, self.student_loss, self.train_accuracy
        )
    }
}

pub fn history_text(history: &[EpochRecord]) -> String {
    let mut out = String::from("# epoch loss distill student train_acc test_acc\n");
    for rec in history {
        out.push_str(&rec.to_line());
        out.push('\n');
    }
    out
}

fn sgd_step(w: &mut Tensor, v: &mut Tensor, g: &Tensor, scale: f64, lr: f64, momentum: f64) {
    for ((wv, vv), &gv) in w
        .data_mut()
        .iter_mut()
        .zip(v.data_mut().iter_mut())
        .zip(g.data())
    {
        *vv = momentum * *vv - lr * gv * scale;
        *wv += *vv;
    }
}

fn shuffled_indices(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn zeros_like(ts: &[&Tensor]) -> Vec<Tensor> {
    ts.iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av += gv;
        }
    }
}

/// Mini-batch SGD on the combined loss. The teacher runs in inference
/// mode only; its logits are computed once up front. Pre-model features
/// and projected coordinates are likewise cached while the parts that
/// produce them stay frozen. Samples inside a batch are accumulated in
/// index order, so a fixed seed reproduces bitwise.
pub fn train_reduced(
    student: &ReducedNet,
    teacher: &Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<(ReducedNet, Vec<EpochRecord>)> {
    cfg.validate()?;
    train.validate()?;
    if let Some(t) = test {
        t.validate()?;
    }
    let n_out: usize = teacher.output_shape().iter().product();
    if n_out != student.n_out() {
        return Err(Error::Config(format!(
            "teacher emits {n_out} logits, student emits {}",
            student.n_out()
        )));
    }
    if n_out != train.n_class {
        return Err(Error::Config(format!(
            "{n_out} logits for a {}-class dataset",
            train.n_class
        )));
    }
    if teacher.input_shape() != train.sample_shape()
        || student.pre.input_shape() != train.sample_shape()
    {
        return Err(Error::Config(format!(
            "sample shape {:?} does not match teacher input {:?} / pre input {:?}",
            train.sample_shape(),
            teacher.input_shape(),
            student.pre.input_shape()
        )));
    }

    let n = train.len();
    let mut teacher_logits = Vec::with_capacity(n);
    for x in &train.inputs {
        teacher_logits.push(teacher.output(x)?.flatten());
    }
    let truths: Vec<Tensor> = train
        .labels
        .iter()
        .map(|&l| one_hot(l, n_out))
        .collect::<Result<_>>()?;

    let mut net = student.clone();
    let features_frozen = !cfg.train_pre;
    let z_frozen = features_frozen && !cfg.train_projection;
    let mut feature_cache: Vec<Tensor> = Vec::new();
    if features_frozen {
        for x in &train.inputs {
            feature_cache.push(net.pre.output(x)?.flatten());
        }
    }
    let mut test_feature_cache: Vec<Tensor> = Vec::new();
    if features_frozen {
        if let Some(t) = test {
            for x in &t.inputs {
                test_feature_cache.push(net.pre.output(x)?.flatten());
            }
        }
    }

    let mut head_vel = zeros_like(&net.head.params_mut().iter().map(|t| &**t).collect::<Vec<_>>());
    let mut basis_vel = Tensor::zeros(net.map.basis.shape());
    let mut pre_vel: Vec<Vec<Tensor>> = net
        .layers_param_shapes()
        .into_iter()
        .map(|shapes| shapes.iter().map(|s| Tensor::zeros(s)).collect())
        .collect();

    let mut r = rng::seeded(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    // Per-sample loss buffers, reduced in index order at epoch end so
    // the reported means do not depend on the shuffle.
    let mut sample_loss = vec![0.0; n];
    let mut sample_ld = vec![0.0; n];
    let mut sample_ls = vec![0.0; n];
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(n, &mut r);
        for (batch_idx, batch) in order.chunks(cfg.batch).enumerate() {
            let mut head_acc =
                zeros_like(&net.head.params_mut().iter().map(|t| &**t).collect::<Vec<_>>());
            let mut basis_acc = Tensor::zeros(net.map.basis.shape());
            let mut pre_acc: Vec<Vec<Tensor>> = pre_vel
                .iter()
                .map(|v| v.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect();
            let mut batch_loss = 0.0;

            for &j in batch {
                let (z, features, trace) = if z_frozen {
                    (project(&net.map, &feature_cache[j])?, None, None)
                } else if features_frozen {
                    let f = feature_cache[j].clone();
                    (project(&net.map, &f)?, Some(f), None)
                } else {
                    let trace = net.pre.forward(&train.inputs[j])?;
                    let f = trace.output().flatten();
                    (project(&net.map, &f)?, Some(f), Some(trace))
                };
                let y_s = net.head.predict(&z)?;
                let y_t = &teacher_logits[j];
                let ld = kl_distill_loss(y_t, &y_s, cfg.tau)?;
                let ls = ce_student_loss(&truths[j], &y_s)?;
                let loss = cfg.lambda * ld + (1.0 - cfg.lambda) * ls;
                batch_loss += loss;
                sample_loss[j] = loss;
                sample_ld[j] = ld;
                sample_ls[j] = ls;

                let grad_y = combined_loss_grad(&truths[j], y_t, &y_s, cfg)?;
                let (head_grads, grad_z) = net.head.backward(&z, &grad_y)?;
                if cfg.train_head {
                    accumulate(&mut head_acc, &head_grads);
                }
                if cfg.train_projection || cfg.train_pre {
                    let f = features.as_ref().expect("features kept when projection or pre trains");
                    if cfg.train_projection {
                        // z = B(f - c), so dL/dB is the outer product
                        // grad_z x (f - c). The center stays a frozen
                        // dataset statistic.
                        for i in 0..net.map.r() {
                            let gz = grad_z[i];
                            if gz == 0.0 {
                                continue;
                            }
                            let row = basis_acc.row_mut(i);
                            match &net.map.center {
                                Some(c) => {
                                    for ((dst, &fv), &cv) in
                                        row.iter_mut().zip(f.data()).zip(c.data())
                                    {
                                        *dst += gz * (fv - cv);
                                    }
                                }
                                None => {
                                    for (dst, &fv) in row.iter_mut().zip(f.data()) {
                                        *dst += gz * fv;
                                    }
                                }
                            }
                        }
                    }
                    if cfg.train_pre {
                        let mut grad_f = vec![0.0; net.map.n_l()];
                        for i in 0..net.map.r() {
                            let gz = grad_z[i];
                            if gz == 0.0 {
                                continue;
                            }
                            for (dst, &bv) in grad_f.iter_mut().zip(net.map.basis.row(i)) {
                                *dst += gz * bv;
                            }
                        }
                        let trace = trace.as_ref().expect("full forward when pre is trainable");
                        let grad_out =
                            crate::tensor::Tensor::new(net.pre.output_shape().to_vec(), grad_f)?;
                        let bundle = net.pre.backward(trace, &grad_out)?;
                        for (acc, grads) in pre_acc.iter_mut().zip(&bundle.layer_grads) {
                            accumulate(acc, grads);
                        }
                    }
                }
            }

            let scale = 1.0 / batch.len() as f64;
            if !(batch_loss * scale).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                    message: format!("batch mean loss is {}", batch_loss * scale),
                });
            }
            if cfg.train_head {
                for ((w, v), g) in net
                    .head
                    .params_mut()
                    .into_iter()
                    .zip(head_vel.iter_mut())
                    .zip(&head_acc)
                {
                    sgd_step(w, v, g, scale, cfg.lr, cfg.momentum);
                }
            }
            if cfg.train_projection {
                sgd_step(&mut net.map.basis, &mut basis_vel, &basis_acc, scale, cfg.lr, cfg.momentum);
            }
            if cfg.train_pre {
                for (layer, (vel, acc)) in net
                    .pre
                    .layers_mut()
                    .iter_mut()
                    .zip(pre_vel.iter_mut().zip(&pre_acc))
                {
                    for ((w, v), g) in layer.params_mut().into_iter().zip(vel.iter_mut()).zip(acc) {
                        sgd_step(w, v, g, scale, cfg.lr, cfg.momentum);
                    }
                }
            }
        }

        let train_accuracy = if features_frozen {
            accuracy_from_features(&net, &feature_cache, &train.labels)?
        } else {
            reduced_accuracy(&net, train)?
        };
        let test_accuracy = match test {
            Some(t) if features_frozen => {
                Some(accuracy_from_features(&net, &test_feature_cache, &t.labels)?)
            }
            Some(t) => Some(reduced_accuracy(&net, t)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: sample_loss.iter().sum::<f64>() / n as f64,
            distill_loss: sample_ld.iter().sum::<f64>() / n as f64,
            student_loss: sample_ls.iter().sum::<f64>() / n as f64,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok((net, history))
}

fn accuracy_from_features(net: &ReducedNet, features: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for (f, &label) in features.iter().zip(labels) {
        let z = project(&net.map, f)?;
        if net.head.predict(&z)?.argmax() == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

pub fn reduced_accuracy(net: &ReducedNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let mut hits = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        if net.forward(x)?.argmax() == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub fn network_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let mut hits = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        if net.output(x)?.argmax() == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Plain cross-entropy SGD over a whole network. This is how teachers
/// for the distillation benchmark get trained; history rows reuse
/// [`EpochRecord`] with the distillation column pinned to zero.
pub fn train_classifier(
    net: &Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochRecord>)> {
    cfg.validate()?;
    train.validate()?;
    if let Some(t) = test {
        t.validate()?;
    }
    let n_out: usize = net.output_shape().iter().product();
    if n_out != train.n_class {
        return Err(Error::Config(format!(
            "network emits {n_out} logits for a {}-class dataset",
            train.n_class
        )));
    }
    if net.input_shape() != train.sample_shape() {
        return Err(Error::Config(format!(
            "network input {:?} does not match sample shape {:?}",
            net.input_shape(),
            train.sample_shape()
        )));
    }

    let truths: Vec<Tensor> = train
        .labels
        .iter()
        .map(|&l| one_hot(l, n_out))
        .collect::<Result<_>>()?;
    let mut model = net.clone();
    let mut vel: Vec<Vec<Tensor>> = model
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|t| Tensor::zeros(t.shape())).collect())
        .collect();

    let n = train.len();
    let mut r = rng::seeded(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut sample_loss = vec![0.0; n];
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(n, &mut r);
        for (batch_idx, batch) in order.chunks(cfg.batch).enumerate() {
            let mut acc: Vec<Vec<Tensor>> = vel
                .iter()
                .map(|v| v.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect();
            let mut batch_loss = 0.0;
            for &j in batch {
                let trace = model.forward(&train.inputs[j])?;
                let y = trace.output().flatten();
                let loss = ce_student_loss(&truths[j], &y)?;
                batch_loss += loss;
                sample_loss[j] = loss;
                let p = softmax_t(&y, 1.0)?;
                let grad: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(truths[j].data())
                    .map(|(&ps, &t)| ps - t)
                    .collect();
                let grad_out =
                    crate::tensor::Tensor::new(model.output_shape().to_vec(), grad)?;
                let bundle = model.backward(&trace, &grad_out)?;
                for (a, g) in acc.iter_mut().zip(&bundle.layer_grads) {
                    accumulate(a, g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if !(batch_loss * scale).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                    message: format!("batch mean loss is {}", batch_loss * scale),
                });
            }
            for (layer, (v, a)) in model
                .layers_mut()
                .iter_mut()
                .zip(vel.iter_mut().zip(&acc))
            {
                for ((w, vv), g) in layer.params_mut().into_iter().zip(v.iter_mut()).zip(a) {
                    sgd_step(w, vv, g, scale, cfg.lr, cfg.momentum);
                }
            }
        }
        let mean = sample_loss.iter().sum::<f64>() / n as f64;
        let train_accuracy = network_accuracy(&model, train)?;
        let test_accuracy = match test {
            Some(t) => Some(network_accuracy(&model, t)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: mean,
            distill_loss: 0.0,
            student_loss: mean,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok((model, history))
}

/// Seeded SGD regression of an FNN head onto target logits, used to give
/// the head a sensible starting point before distillation. Squared-error
/// objective, mean over outputs.
///
/// Training runs on per-dimension rms-normalized inputs (projected
/// features can span orders of magnitude, which otherwise blows up the
/// first step) and the scales are folded back into the first weight
/// matrix, so the returned head acts on raw coordinates.
pub fn fit_fnn_head(
    head: &mut crate::heads::FnnHead,
    z: &Tensor,
    y: &Tensor,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<()> {
    if !z.is_matrix() || !y.is_matrix() || z.rows() != y.rows() {
        return Err(Error::Shape(format!(
            "fit_fnn_head expects matching sample matrices, got {:?} and {:?}",
            z.shape(),
            y.shape()
        )));
    }
    if batch == 0 || !lr.is_finite() || lr < 0.0 {
        return Err(Error::Parameter("fit_fnn_head needs batch >= 1 and finite lr >= 0".into()));
    }
    let n = z.rows();
    let n_out = y.cols();
    let dim = z.cols();
    let scale: Vec<f64> = (0..dim)
        .map(|k| {
            let ms = (0..n).map(|j| z.at(j, k) * z.at(j, k)).sum::<f64>() / n as f64;
            ms.sqrt().max(1e-12)
        })
        .collect();
    let mut zn = z.clone();
    for j in 0..n {
        for (v, s) in zn.row_mut(j).iter_mut().zip(&scale) {
            *v /= s;
        }
    }
    let mut vel: Vec<Tensor> = head.weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
    let mut r = rng::seeded(seed);
    for epoch in 1..=epochs {
        let order = shuffled_indices(n, &mut r);
        for (batch_idx, chunk) in order.chunks(batch).enumerate() {
            let mut acc: Vec<Tensor> =
                head.weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
            let mut batch_loss = 0.0;
            for &j in chunk {
                let zj = Tensor::from_vec(zn.row(j).to_vec());
                let pred = head.forward(&zj)?;
                let mut grad = vec![0.0; n_out];
                for o in 0..n_out {
                    let d = pred[o] - y.at(j, o);
                    batch_loss += d * d / n_out as f64;
                    grad[o] = 2.0 * d / n_out as f64;
                }
                let (gw, _) = head.backward(&zj, &Tensor::from_vec(grad))?;
                accumulate(&mut acc, &gw);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                    message: "head pre-fit loss is not finite".into(),
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((w, v), g) in head.weights.iter_mut().zip(vel.iter_mut()).zip(&acc) {
                sgd_step(w, v, g, scale, lr, 0.9);
            }
        }
    }
    // W1 (zn) = W1 D^-1 (z): dividing column k by scale[k] makes the head
    // compute the trained function on raw inputs.
    let w1 = &mut head.weights[0];
    for i in 0..w1.rows() {
        for (v, s) in w1.row_mut(i).iter_mut().zip(&scale) {
            *v /= s;
        }
    }
    Ok(())
}
