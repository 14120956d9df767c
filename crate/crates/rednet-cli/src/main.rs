//! `rednet`: compress a trained classifier by cutting it at a layer,
//! projecting the features onto a low-rank subspace, and distilling a
//! small surrogate head against the original network.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rednet::data::{atomic_write, gen_synthetic, load_dataset, save_dataset, Dataset};
use rednet::distill::{history_text, train_classifier, train_reduced, DistillConfig, TrainConfig};
use rednet::format::{load_network, save_head, save_network, save_projection};
use rednet::heads::{head_param_count, Family};
use rednet::pipeline::{
    build_head, build_projection, evaluate_network, evaluate_reduced, load_split_dir,
    load_student, report_text, run_pipeline, sweep_heads, sweep_text, HeadKind, PipelineConfig,
};
use rednet::reduce::Method;
use rednet::rng;
use rednet::split::{collect_features, split_network};
use rednet::{Error, Layer, Network, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "rednet",
    version,
    about = "Neural network compression by feature-space reduction and distillation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a model at the cut-off layer and save both halves
    Split(SplitArgs),
    /// Save the intermediate features of the training split at the cut
    Features(FeaturesArgs),
    /// Compute a projection basis and save it
    Reduce(ReduceArgs),
    /// Build a full student (pre-model, projection, head) without distilling
    FitHead(FitHeadArgs),
    /// Distill an existing student against its teacher
    Distill(DistillArgs),
    /// Report test accuracy of a model or a student directory
    Eval(EvalArgs),
    /// Run the whole compression pipeline and write a report
    Pipeline(PipelineArgs),
    /// Grid-sweep fnn head widths and depths
    SweepHeads(SweepArgs),
    /// Generate a synthetic labeled image dataset
    GenData(GenDataArgs),
    /// Train a fresh teacher network on a dataset
    TrainTeacher(TrainTeacherArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Teacher model manifest (.toml)
    #[arg(long)]
    model: PathBuf,
    /// Cut-off layer, 1-based, counting every layer
    #[arg(long)]
    cut_layer: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory (train.nsds + test.nsds) or a single .nsds file
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cut_layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReducerFlags {
    /// Projection method
    #[arg(long, value_parser = parse_method)]
    reducer: Method,
    /// Mean-center features before projecting
    #[arg(long)]
    center: bool,
    /// Route the reducer through a frequent-directions sketch of this size
    #[arg(long)]
    fd_sketch: Option<usize>,
}

#[derive(Args)]
struct HeadFlags {
    /// Surrogate head family
    #[arg(long, value_parser = parse_head)]
    head: HeadKind,
    /// Total polynomial degree of a pce head
    #[arg(long, default_value_t = 2)]
    pce_degree: usize,
    /// Polynomial family of a pce head
    #[arg(long, value_parser = parse_family, default_value = "hermite")]
    pce_family: Family,
    /// Hidden widths of an fnn head, comma separated
    #[arg(long, value_delimiter = ',', default_value = "20")]
    hidden: Vec<usize>,
    /// Softplus sharpness of an fnn head
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Squared-error warm-start epochs for an fnn head (0 keeps random init)
    #[arg(long, default_value_t = 500)]
    head_fit_epochs: usize,
}

#[derive(Args)]
struct DistillFlags {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Distillation temperature
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    /// Weight of the distillation term; cross-entropy gets 1 - lambda
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Also update the projection basis during distillation
    #[arg(long)]
    train_projection: bool,
    /// Also update the pre-model weights during distillation
    #[arg(long)]
    train_pre: bool,
}

impl DistillFlags {
    fn to_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            tau: self.tau,
            lambda: self.lambda,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed,
            momentum: self.momentum,
            train_head: true,
            train_projection: self.train_projection,
            train_pre: self.train_pre,
        }
    }
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cut_layer: usize,
    #[arg(long)]
    rank: usize,
    #[command(flatten)]
    reducer: ReducerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitHeadArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cut_layer: usize,
    #[arg(long)]
    rank: usize,
    #[command(flatten)]
    reducer: ReducerFlags,
    #[command(flatten)]
    head: HeadFlags,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Student directory holding pre.toml, projection.toml, head.toml
    #[arg(long)]
    student: PathBuf,
    #[command(flatten)]
    distill: DistillFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Full model manifest to evaluate
    #[arg(long)]
    model: Option<PathBuf>,
    /// Student directory to evaluate
    #[arg(long)]
    student: Option<PathBuf>,
    /// Dataset directory (evaluates test.nsds) or a single .nsds file
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cut_layer: usize,
    #[arg(long)]
    rank: usize,
    #[command(flatten)]
    reducer: ReducerFlags,
    #[command(flatten)]
    head: HeadFlags,
    #[command(flatten)]
    distill: DistillFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl PipelineArgs {
    fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            data: self.data.clone(),
            out: self.out.clone(),
            cut_layer: self.cut_layer,
            rank: self.rank,
            reducer: self.reducer.reducer,
            head: self.head.head,
            pce_degree: self.head.pce_degree,
            pce_family: self.head.pce_family,
            hidden: self.head.hidden.clone(),
            beta: self.head.beta,
            center: self.reducer.center,
            fd_sketch: self.reducer.fd_sketch,
            head_fit_epochs: self.head.head_fit_epochs,
            distill: self.distill.to_config(self.seed),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Hidden widths to sweep, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    widths: Vec<usize>,
    /// Hidden-layer counts to sweep, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    depths: Vec<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    n_class: usize,
    /// Samples per class across both splits (80/20 train/test)
    #[arg(long, default_value_t = 250)]
    n_per_class: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Gaussian pixel noise level
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    /// Network shape: linear, mlp, or cnn
    #[arg(long, default_value = "cnn")]
    arch: String,
    /// Width of the hidden linear layer (mlp and cnn)
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    HeadKind::parse(s).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    Family::parse(s).map_err(|e| e.to_string())
}

/// A directory means the named split file inside it; anything else is
/// loaded directly.
fn load_one_split(path: &Path, split_file: &str) -> Result<Dataset> {
    if path.is_dir() {
        load_dataset(&path.join(split_file))
    } else {
        load_dataset(path)
    }
}

fn run_split(args: &SplitArgs) -> Result<()> {
    let net = load_network(&args.model)?;
    let split = split_network(&net, args.cut_layer)?;
    for (i, layer) in net.layers().iter().enumerate() {
        let marker = if i + 1 == args.cut_layer { " <- cut" } else { "" };
        println!(
            "{:3}  {:<9} -> {:?}{marker}",
            i + 1,
            layer.kind_name(),
            net.layer_output_shape(i)
        );
    }
    std::fs::create_dir_all(&args.out)?;
    save_network(&split.pre, &args.out, "pre")?;
    save_network(&split.post, &args.out, "post")?;
    println!(
        "pre: {} layers, emits {:?}; post: {} layers, emits {:?}",
        split.pre.len(),
        split.pre.output_shape(),
        split.post.len(),
        split.post.output_shape()
    );
    Ok(())
}

fn run_features(args: &FeaturesArgs) -> Result<()> {
    let net = load_network(&args.model)?;
    let data = load_one_split(&args.data, "train.nsds")?;
    let split = split_network(&net, args.cut_layer)?;
    let features = collect_features(&split.pre, &data.inputs)?;
    let (n_l, n) = (features.rows(), features.cols());
    let inputs = (0..n)
        .map(|j| Tensor::from_vec((0..n_l).map(|i| features.at(i, j)).collect()))
        .collect();
    let ds = Dataset {
        inputs,
        labels: data.labels.clone(),
        n_class: data.n_class,
        split: data.split,
    };
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("features.nsds");
    save_dataset(&ds, &path)?;
    println!("wrote {n_l} x {n} feature matrix to {}", path.display());
    Ok(())
}

/// Shared by `reduce` and `fit-head`: load, split, collect, project.
fn prepare_projection(
    cfg: &PipelineConfig,
) -> Result<(rednet::split::SplitNetwork, Dataset, Tensor, rednet::reduce::ProjectionMap)> {
    let net = load_network(&cfg.model)?;
    let (train, _) = load_split_dir(&cfg.data)?;
    let split = split_network(&net, cfg.cut_layer)?;
    let features = collect_features(&split.pre, &train.inputs)?;
    let map = build_projection(cfg, &split.post, &features, &train.labels)?;
    Ok((split, train, features, map))
}

fn run_reduce(args: &ReduceArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(
        &args.model,
        &args.data,
        &args.out,
        args.cut_layer,
        args.rank,
        args.reducer.reducer,
        HeadKind::Pce,
    );
    cfg.center = args.reducer.center;
    cfg.fd_sketch = args.reducer.fd_sketch;
    let (_, _, _, map) = prepare_projection(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_projection(&map, &args.out, "projection")?;
    println!(
        "wrote rank-{} {} projection of {} features to {}",
        map.r(),
        map.method.name(),
        map.n_l(),
        args.out.display()
    );
    Ok(())
}

fn run_fit_head(args: &FitHeadArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(
        &args.model,
        &args.data,
        &args.out,
        args.cut_layer,
        args.rank,
        args.reducer.reducer,
        args.head.head,
    );
    cfg.center = args.reducer.center;
    cfg.fd_sketch = args.reducer.fd_sketch;
    cfg.pce_degree = args.head.pce_degree;
    cfg.pce_family = args.head.pce_family;
    cfg.hidden = args.head.hidden.clone();
    cfg.beta = args.head.beta;
    cfg.head_fit_epochs = args.head.head_fit_epochs;
    cfg.distill.batch = args.batch;
    cfg.seed = args.seed;
    let (split, _, features, map) = prepare_projection(&cfg)?;
    let head = build_head(&cfg, &split.post, &map, &features)?;
    std::fs::create_dir_all(&args.out)?;
    save_network(&split.pre, &args.out, "pre")?;
    save_projection(&map, &args.out, "projection")?;
    save_head(&head, &args.out, "head")?;
    println!(
        "wrote student ({} head, {} params) to {}",
        head.kind_name(),
        head_param_count(&head),
        args.out.display()
    );
    Ok(())
}

fn run_distill(args: &DistillArgs) -> Result<()> {
    let teacher = load_network(&args.model)?;
    let student = load_student(&args.student)?;
    let (train, test) = load_split_dir(&args.data)?;
    let cfg = args.distill.to_config(args.seed);
    let (trained, history) = train_reduced(&student, &teacher, &train, Some(&test), &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_network(&trained.pre, &args.out, "pre")?;
    save_projection(&trained.map, &args.out, "projection")?;
    save_head(&trained.head, &args.out, "head")?;
    atomic_write(&args.out.join("history.txt"), history_text(&history).as_bytes())?;
    let acc = evaluate_reduced(&trained, &test)?;
    println!("final test accuracy {acc:.6}");
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let data = load_one_split(&args.data, "test.nsds")?;
    let acc = match (&args.model, &args.student) {
        (Some(model), None) => evaluate_network(&load_network(model)?, &data)?,
        (None, Some(student)) => evaluate_reduced(&load_student(student)?, &data)?,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --model or --student".into(),
            ))
        }
    };
    println!("accuracy {acc:.6}");
    Ok(())
}

fn run_pipeline_cmd(args: &PipelineArgs) -> Result<()> {
    let report = run_pipeline(&args.to_config())?;
    print!("{}", report_text(&report));
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.pipeline.to_config();
    let cells = sweep_heads(&cfg, &args.widths, &args.depths)?;
    let table = sweep_text(&cells);
    std::fs::create_dir_all(&cfg.out)?;
    atomic_write(&cfg.out.join("sweep.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let (train, test) = gen_synthetic(
        args.seed,
        args.n_class,
        args.n_per_class,
        args.height,
        args.width,
        args.noise,
    )?;
    std::fs::create_dir_all(&args.out)?;
    save_dataset(&train, &args.out.join("train.nsds"))?;
    save_dataset(&test, &args.out.join("test.nsds"))?;
    println!(
        "wrote {} train / {} test samples ({} classes, {}x{}) to {}",
        train.len(),
        test.len(),
        args.n_class,
        args.height,
        args.width,
        args.out.display()
    );
    Ok(())
}

fn pool_out(x: usize) -> Option<usize> {
    x.checked_sub(2).map(|d| d / 2 + 1)
}

fn build_arch(
    arch: &str,
    in_shape: &[usize],
    n_class: usize,
    hidden: usize,
    rng: &mut rng::ChaCha8Rng,
) -> Result<Network> {
    let n_in: usize = in_shape.iter().product();
    let layers = match arch {
        "linear" => vec![Layer::Flatten, Layer::linear_init(n_in, n_class, rng)?],
        "mlp" => vec![
            Layer::Flatten,
            Layer::linear_init(n_in, hidden, rng)?,
            Layer::Relu,
            Layer::linear_init(hidden, n_class, rng)?,
        ],
        "cnn" => {
            if in_shape.len() != 3 {
                return Err(Error::Config(format!(
                    "cnn teacher needs [channels, height, width] input, got {in_shape:?}"
                )));
            }
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let flat = pool_out(h)
                .zip(pool_out(w))
                .and_then(|(h1, w1)| pool_out(h1).zip(pool_out(w1)))
                .map(|(h2, w2)| 16 * h2 * w2)
                .filter(|&f| f > 0)
                .ok_or_else(|| {
                    Error::Config(format!("{h}x{w} images are too small for the cnn teacher"))
                })?;
            vec![
                Layer::conv2d_init(c, 8, 3, 3, 1, 1, rng)?,
                Layer::Relu,
                Layer::maxpool2d(2, 2)?,
                Layer::conv2d_init(8, 16, 3, 3, 1, 1, rng)?,
                Layer::Relu,
                Layer::maxpool2d(2, 2)?,
                Layer::Flatten,
                Layer::linear_init(flat, hidden, rng)?,
                Layer::Relu,
                Layer::linear_init(hidden, n_class, rng)?,
            ]
        }
        other => {
            return Err(Error::Parameter(format!(
                "unknown arch `{other}`, expected linear, mlp, or cnn"
            )))
        }
    };
    Network::new(in_shape.to_vec(), layers)
}

fn run_train_teacher(args: &TrainTeacherArgs) -> Result<()> {
    let (train, test) = load_split_dir(&args.data)?;
    let mut r = rng::seeded(args.seed);
    let net = build_arch(&args.arch, train.sample_shape(), train.n_class, args.hidden, &mut r)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch: args.batch,
        lr: args.lr,
        momentum: args.momentum,
        seed: args.seed,
    };
    let (trained, history) = train_classifier(&net, &train, Some(&test), &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_network(&trained, &args.out, "model")?;
    atomic_write(&args.out.join("history.txt"), history_text(&history).as_bytes())?;
    let acc = evaluate_network(&trained, &test)?;
    println!(
        "wrote {} ({} params) to {}, final test accuracy {acc:.6}",
        args.arch,
        trained.param_count(),
        args.out.display()
    );
    Ok(())
}

fn run(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Split(args) => run_split(args),
        Cmd::Features(args) => run_features(args),
        Cmd::Reduce(args) => run_reduce(args),
        Cmd::FitHead(args) => run_fit_head(args),
        Cmd::Distill(args) => run_distill(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Pipeline(args) => run_pipeline_cmd(args),
        Cmd::SweepHeads(args) => run_sweep(args),
        Cmd::GenData(args) => run_gen_data(args),
        Cmd::TrainTeacher(args) => run_train_teacher(args),
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
