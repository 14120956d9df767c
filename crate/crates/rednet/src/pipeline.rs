//! End-to-end compression runs: load a teacher and a dataset, build the
//! reduced student, distill it, and leave the artifacts plus a report in
//! the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{atomic_write, load_dataset, Dataset};
use crate::distill::{
    fit_fnn_head, history_text, network_accuracy, reduced_accuracy, train_reduced, DistillConfig,
    EpochRecord, ReducedNet,
};
use crate::error::{Error, Result};
use crate::format::{
    artifact_bytes, load_head, load_network, load_projection, save_head, save_network,
    save_projection,
};
use crate::heads::{head_param_count, pce_fit, Family, FnnHead, Head};
use crate::reduce::{
    as_basis, as_gradients, fd_finalize, pod_basis, project, FdSketch, Method, ProjectionMap,
};
use crate::rng;
use crate::split::{collect_features, split_network};
use crate::{Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Pce,
    Fnn,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Pce => "pce",
            HeadKind::Fnn => "fnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pce" => Ok(HeadKind::Pce),
            "fnn" => Ok(HeadKind::Fnn),
            other => Err(Error::Parameter(format!(
                "unknown head kind `{other}`, expected pce or fnn"
            ))),
        }
    }
}

/// Everything one compression run needs. `data` points at a directory
/// holding `train.nsds` and `test.nsds`.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Cut-off layer, 1-based, counting every layer of the model.
    pub cut_layer: usize,
    pub rank: usize,
    pub reducer: Method,
    pub head: HeadKind,
    pub pce_degree: usize,
    pub pce_family: Family,
    /// Hidden widths of an fnn head.
    pub hidden: Vec<usize>,
    /// Softplus sharpness of an fnn head.
    pub beta: f64,
    /// Mean-center features before projecting.
    pub center: bool,
    /// `Some(ell)` routes the reducer through a frequent-directions
    /// sketch of that size instead of a dense factorization.
    pub fd_sketch: Option<usize>,
    /// Squared-error epochs that warm-start an fnn head on the teacher's
    /// logits before distillation. 0 keeps the random init.
    pub head_fit_epochs: usize,
    pub distill: DistillConfig,
    /// Seeds head initialization and the warm start; the distillation
    /// shuffle is driven by `distill.seed`.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(
        model: impl Into<PathBuf>,
        data: impl Into<PathBuf>,
        out: impl Into<PathBuf>,
        cut_layer: usize,
        rank: usize,
        reducer: Method,
        head: HeadKind,
    ) -> Self {
        PipelineConfig {
            model: model.into(),
            data: data.into(),
            out: out.into(),
            cut_layer,
            rank,
            reducer,
            head,
            pce_degree: 2,
            pce_family: Family::Hermite,
            hidden: vec![20],
            beta: 1.0,
            center: false,
            fd_sketch: None,
            head_fit_epochs: 500,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Storage {
    pub pre_model_bytes: u64,
    pub projection_bytes: u64,
    pub head_bytes: u64,
    pub total_bytes: u64,
    pub teacher_bytes: u64,
    pub compression_ratio: f64,
}

/// Run summary. The wall-clock fields are skipped by serde so the JSON
/// report of two identical runs compares bitwise; the text report
/// carries them.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub cut_layer: usize,
    pub rank: usize,
    pub reducer: String,
    pub head: String,
    pub seed: u64,
    pub epochs: usize,
    pub head_params: usize,
    pub teacher_accuracy: f64,
    pub epoch0_accuracy: f64,
    pub final_accuracy: f64,
    pub storage: Storage,
    #[serde(skip)]
    pub init_seconds: f64,
    #[serde(skip)]
    pub train_seconds: f64,
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_text(report: &Report) -> String {
    let s = &report.storage;
    format!(
        "cut layer:        {}\n\
         rank:             {}\n\
         reducer:          {}\n\
         head:             {}\n\
         seed:             {}\n\
         epochs:           {}\n\
         head params:      {}\n\
         teacher accuracy: {:.6}\n\
         epoch 0 accuracy: {:.6}\n\
         final accuracy:   {:.6}\n\
         pre-model bytes:  {}\n\
         projection bytes: {}\n\
         head bytes:       {}\n\
         total bytes:      {}\n\
         teacher bytes:    {}\n\
         compression:      {:.2}x\n\
         init time:        {:.3} s\n\
         train time:       {:.3} s\n",
        report.cut_layer,
        report.rank,
        report.reducer,
        report.head,
        report.seed,
        report.epochs,
        report.head_params,
        report.teacher_accuracy,
        report.epoch0_accuracy,
        report.final_accuracy,
        s.pre_model_bytes,
        s.projection_bytes,
        s.head_bytes,
        s.total_bytes,
        s.teacher_bytes,
        s.compression_ratio,
        report.init_seconds,
        report.train_seconds,
    )
}

/// Loads `train.nsds` and `test.nsds` from a dataset directory.
pub fn load_split_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_path = dir.join("train.nsds");
    let test_path = dir.join("test.nsds");
    if !train_path.is_file() || !test_path.is_file() {
        return Err(Error::Data(format!(
            "expected train.nsds and test.nsds under {}",
            dir.display()
        )));
    }
    Ok((load_dataset(&train_path)?, load_dataset(&test_path)?))
}

/// Test accuracy of a full network, with the shape checks the CLI
/// relies on. Argmax ties resolve toward the lowest class index.
pub fn evaluate_network(net: &Network, data: &Dataset) -> Result<f64> {
    let n_out: usize = net.output_shape().iter().product();
    if n_out != data.n_class {
        return Err(Error::Config(format!(
            "model emits {n_out} logits for a {}-class dataset",
            data.n_class
        )));
    }
    if net.input_shape() != data.sample_shape() {
        return Err(Error::Config(format!(
            "model input {:?} does not match sample shape {:?}",
            net.input_shape(),
            data.sample_shape()
        )));
    }
    network_accuracy(net, data)
}

/// [`evaluate_network`] for a reduced student.
pub fn evaluate_reduced(net: &ReducedNet, data: &Dataset) -> Result<f64> {
    if net.n_out() != data.n_class {
        return Err(Error::Config(format!(
            "student emits {} logits for a {}-class dataset",
            net.n_out(),
            data.n_class
        )));
    }
    if net.pre.input_shape() != data.sample_shape() {
        return Err(Error::Config(format!(
            "student input {:?} does not match sample shape {:?}",
            net.pre.input_shape(),
            data.sample_shape()
        )));
    }
    reduced_accuracy(net, data)
}

/// Reassembles a student from a pipeline output directory.
pub fn load_student(dir: &Path) -> Result<ReducedNet> {
    let pre = load_network(&dir.join("pre.toml"))?;
    let map = load_projection(&dir.join("projection.toml"))?;
    let head = load_head(&dir.join("head.toml"))?;
    ReducedNet::new(pre, map, head)
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::stage(name, e))
}

fn validate(cfg: &PipelineConfig, teacher: &Network, train: &Dataset, test: &Dataset) -> Result<()> {
    let layer_count = teacher.len();
    if cfg.cut_layer < 1 || cfg.cut_layer >= layer_count {
        return Err(Error::Config(format!(
            "cut layer {} out of range: the model has {layer_count} layers and the tail must be non-empty",
            cfg.cut_layer
        )));
    }
    let n_l: usize = teacher
        .layer_output_shape(cfg.cut_layer - 1)
        .iter()
        .product();
    if cfg.rank < 1 || cfg.rank > n_l {
        return Err(Error::Config(format!(
            "rank {} out of range for {n_l} features at the cut",
            cfg.rank
        )));
    }
    if teacher.input_shape() != train.sample_shape() {
        return Err(Error::Config(format!(
            "model input {:?} does not match sample shape {:?}",
            teacher.input_shape(),
            train.sample_shape()
        )));
    }
    let n_out: usize = teacher.output_shape().iter().product();
    if n_out != train.n_class {
        return Err(Error::Config(format!(
            "model emits {n_out} logits for a {}-class dataset",
            train.n_class
        )));
    }
    if test.n_class != train.n_class || test.sample_shape() != train.sample_shape() {
        return Err(Error::Config(
            "train and test splits disagree on shape or class count".into(),
        ));
    }
    if cfg.head == HeadKind::Fnn {
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "fnn head needs non-empty hidden widths, got {:?}",
                cfg.hidden
            )));
        }
        if !(cfg.beta > 0.0) || !cfg.beta.is_finite() {
            return Err(Error::Config(format!(
                "softplus beta must be positive and finite, got {}",
                cfg.beta
            )));
        }
    }
    if let Some(ell) = cfg.fd_sketch {
        if ell < cfg.rank {
            return Err(Error::Config(format!(
                "sketch size {ell} is smaller than rank {}",
                cfg.rank
            )));
        }
    }
    cfg.distill.validate()?;
    Ok(())
}

/// Builds the projection the config asks for: dense POD, dense active
/// subspaces, or either one through a frequent-directions sketch.
///
/// Spectrum semantics differ per route: dense POD stores singular values
/// of the snapshot matrix, the sketched routes store sketch eigenvalues
/// over the sample count. Downstream code relies on the ordering
/// invariant only.
pub fn build_projection(
    cfg: &PipelineConfig,
    post: &Network,
    features: &Tensor,
    labels: &[usize],
) -> Result<ProjectionMap> {
    match (cfg.reducer, cfg.fd_sketch) {
        (Method::Pod, None) => pod_basis(features, cfg.rank, cfg.center),
        (Method::Pod, Some(ell)) => {
            let (n_l, n) = (features.rows(), features.cols());
            let center: Option<Vec<f64>> = if cfg.center {
                Some(
                    (0..n_l)
                        .map(|i| features.row(i).iter().sum::<f64>() / n as f64)
                        .collect(),
                )
            } else {
                None
            };
            let mut sketch = FdSketch::new(ell, n_l)?;
            let mut row = vec![0.0; n_l];
            for j in 0..n {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = features.at(i, j);
                }
                if let Some(c) = &center {
                    for (v, m) in row.iter_mut().zip(c) {
                        *v -= m;
                    }
                }
                sketch.update(&row)?;
            }
            let mut map = fd_finalize(&mut sketch, cfg.rank)?;
            map.method = Method::Pod;
            map.center = center.map(Tensor::from_vec);
            Ok(map)
        }
        (Method::As, fd) => {
            let grads = as_gradients(post, features, labels)?;
            match fd {
                None => as_basis(&grads, cfg.rank),
                Some(ell) => {
                    let mut sketch = FdSketch::new(ell, grads.cols())?;
                    for j in 0..grads.rows() {
                        sketch.update(grads.row(j))?;
                    }
                    fd_finalize(&mut sketch, cfg.rank)
                }
            }
        }
    }
}

/// Projects every training feature and fits the head to the teacher's
/// logits: least squares for pce, seeded init plus an optional
/// squared-error warm start for fnn.
pub fn build_head(
    cfg: &PipelineConfig,
    post: &Network,
    map: &ProjectionMap,
    features: &Tensor,
) -> Result<Head> {
    let (n_l, n) = (features.rows(), features.cols());
    let in_shape = post.input_shape().to_vec();
    let n_out: usize = post.output_shape().iter().product();
    let mut z = Tensor::zeros(&[n, map.r()]);
    let mut y = Tensor::zeros(&[n, n_out]);
    for j in 0..n {
        let col: Vec<f64> = (0..n_l).map(|i| features.at(i, j)).collect();
        let f = Tensor::new(in_shape.clone(), col)?;
        let zj = project(map, &f)?;
        z.row_mut(j).copy_from_slice(zj.data());
        let logits = post.output(&f)?;
        y.row_mut(j).copy_from_slice(logits.data());
    }
    match cfg.head {
        HeadKind::Pce => Ok(Head::Pce(pce_fit(&z, &y, cfg.pce_degree, cfg.pce_family)?)),
        HeadKind::Fnn => {
            let mut r = rng::seeded(cfg.seed);
            let mut head = FnnHead::init(map.r(), &cfg.hidden, n_out, cfg.beta, &mut r)?;
            if cfg.head_fit_epochs > 0 {
                fit_fnn_head(
                    &mut head,
                    &z,
                    &y,
                    cfg.head_fit_epochs,
                    0.01,
                    cfg.distill.batch,
                    cfg.seed,
                )?;
            }
            Ok(Head::Fnn(head))
        }
    }
}

fn write_artifacts(cfg: &PipelineConfig, student: &ReducedNet, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    // Paths are recorded before each save so a half-written pair gets
    // cleaned up with everything else.
    written.push(cfg.out.join("pre.toml"));
    written.push(cfg.out.join("pre.bin"));
    save_network(&student.pre, &cfg.out, "pre")?;
    written.push(cfg.out.join("projection.toml"));
    written.push(cfg.out.join("projection.bin"));
    save_projection(&student.map, &cfg.out, "projection")?;
    written.push(cfg.out.join("head.toml"));
    written.push(cfg.out.join("head.bin"));
    save_head(&student.head, &cfg.out, "head")?;
    Ok(())
}

/// Byte counts come from the files just written, not from in-memory
/// sizes, so the report reflects what actually ships.
fn measure_storage(cfg: &PipelineConfig) -> Result<Storage> {
    let pre_model_bytes = artifact_bytes(&cfg.out.join("pre.toml"))?;
    let projection_bytes = artifact_bytes(&cfg.out.join("projection.toml"))?;
    let head_bytes = artifact_bytes(&cfg.out.join("head.toml"))?;
    let teacher_bytes = artifact_bytes(&cfg.model)?;
    let total_bytes = pre_model_bytes + projection_bytes + head_bytes;
    Ok(Storage {
        pre_model_bytes,
        projection_bytes,
        head_bytes,
        total_bytes,
        teacher_bytes,
        compression_ratio: teacher_bytes as f64 / total_bytes as f64,
    })
}

fn write_reports(
    out: &Path,
    report: &Report,
    history: &[EpochRecord],
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let json_path = out.join("report.json");
    written.push(json_path.clone());
    atomic_write(&json_path, report_json(report).as_bytes())?;
    let txt_path = out.join("report.txt");
    written.push(txt_path.clone());
    atomic_write(&txt_path, report_text(report).as_bytes())?;
    let hist_path = out.join("history.txt");
    written.push(hist_path.clone());
    atomic_write(&hist_path, history_text(history).as_bytes())?;
    Ok(())
}

/// Runs split, reduce, head fit, distillation, and evaluation, writing
/// `pre`, `projection`, and `head` artifact pairs plus `report.json`,
/// `report.txt`, and `history.txt` into the output directory. Epoch-0
/// accuracy is measured before any distillation step. On failure the
/// files written so far are removed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Report> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = run_inner(cfg, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = std::fs::remove_file(path);
        }
    }
    result
}

fn run_inner(cfg: &PipelineConfig, written: &mut Vec<PathBuf>) -> Result<Report> {
    let teacher = stage("load-model", load_network(&cfg.model))?;
    let (train, test) = stage("load-data", load_split_dir(&cfg.data))?;
    stage("validate", validate(cfg, &teacher, &train, &test))?;

    let init_start = Instant::now();
    let split = stage("split", split_network(&teacher, cfg.cut_layer))?;
    let features = stage("features", collect_features(&split.pre, &train.inputs))?;
    let map = stage("reduce", build_projection(cfg, &split.post, &features, &train.labels))?;
    let head = stage("fit-head", build_head(cfg, &split.post, &map, &features))?;
    let student = stage("fit-head", ReducedNet::new(split.pre, map, head))?;
    let init_seconds = init_start.elapsed().as_secs_f64();
    log::info!(
        "student ready: {} features -> rank {} -> {} outputs",
        features.rows(),
        cfg.rank,
        student.n_out()
    );

    let teacher_accuracy = stage("evaluate", network_accuracy(&teacher, &test))?;
    let epoch0_accuracy = stage("evaluate", reduced_accuracy(&student, &test))?;

    let train_start = Instant::now();
    let (student, history) = stage(
        "distill",
        train_reduced(&student, &teacher, &train, Some(&test), &cfg.distill),
    )?;
    let train_seconds = train_start.elapsed().as_secs_f64();

    let final_accuracy = stage("evaluate", reduced_accuracy(&student, &test))?;
    log::info!(
        "accuracy: teacher {teacher_accuracy:.4}, epoch 0 {epoch0_accuracy:.4}, final {final_accuracy:.4}"
    );

    stage("write-artifacts", write_artifacts(cfg, &student, written))?;
    let storage = stage("write-artifacts", measure_storage(cfg))?;

    let report = Report {
        cut_layer: cfg.cut_layer,
        rank: cfg.rank,
        reducer: cfg.reducer.name().to_string(),
        head: cfg.head.name().to_string(),
        seed: cfg.seed,
        epochs: cfg.distill.epochs,
        head_params: head_param_count(&student.head),
        teacher_accuracy,
        epoch0_accuracy,
        final_accuracy,
        storage,
        init_seconds,
        train_seconds,
    };
    stage("write-report", write_reports(&cfg.out, &report, &history, written))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub width: usize,
    pub depth: usize,
    pub epoch0_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// 4 bytes per head parameter.
    pub head_bytes: Option<u64>,
    pub error: Option<String>,
}

/// Grid sweep over equal-width fnn heads, one pipeline run per cell in
/// `out/w{width}_d{depth}`. A failing cell is recorded with its error
/// and the sweep moves on.
pub fn sweep_heads(cfg: &PipelineConfig, widths: &[usize], depths: &[usize]) -> Result<Vec<SweepCell>> {
    if cfg.head != HeadKind::Fnn {
        return Err(Error::Config("head sweeps only apply to fnn heads".into()));
    }
    if widths.is_empty() || depths.is_empty() {
        return Err(Error::Config("sweep needs at least one width and one depth".into()));
    }
    let mut cells = Vec::with_capacity(widths.len() * depths.len());
    for &depth in depths {
        for &width in widths {
            let mut cell = cfg.clone();
            cell.hidden = vec![width; depth];
            cell.out = cfg.out.join(format!("w{width}_d{depth}"));
            match run_pipeline(&cell) {
                Ok(report) => cells.push(SweepCell {
                    width,
                    depth,
                    epoch0_accuracy: Some(report.epoch0_accuracy),
                    final_accuracy: Some(report.final_accuracy),
                    head_bytes: Some(4 * report.head_params as u64),
                    error: None,
                }),
                Err(e) => {
                    log::warn!("sweep cell width {width} depth {depth} failed: {e}");
                    cells.push(SweepCell {
                        width,
                        depth,
                        epoch0_accuracy: None,
                        final_accuracy: None,
                        head_bytes: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    Ok(cells)
}

pub fn sweep_text(cells: &[SweepCell]) -> String {
    let mut out = String::from("# width depth epoch0 final head_bytes\n");
    for c in cells {
        if let Some(e) = &c.error {
            out.push_str(&format!("{} {} ERROR {e}\n", c.width, c.depth));
        } else {
            out.push_str(&format!(
                "{} {} {:.6} {:.6} {}\n",
                c.width,
                c.depth,
                c.epoch0_accuracy.unwrap_or(f64::NAN),
                c.final_accuracy.unwrap_or(f64::NAN),
                c.head_bytes.unwrap_or(0)
            ));
        }
    }
    out
}
