use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elastic_nn::align::{self, AlignError, ImageBuffer, LandmarkSet, SymmetricPairSpec};
use elastic_nn::arch::{zoo, ArchitectureDescriptor, DescriptorError};
use elastic_nn::elastic::{anytime_predict, ElasticError, ExitSchedule};
use elastic_nn::flops::{self, flops_table, flops_table_with, MacConvention};
use elastic_nn::graph::checkpoint::{self, CheckpointError};
use elastic_nn::graph::{build_graph, GraphError};
use elastic_nn::metrics::{self, MetricsError};
use elastic_nn::trainer::{self, Dataset, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "elnn",
    version,
    about = "Early-exit networks: compute tables, alignment, training and budgeted inference"
)]
struct Cli {
    /// Seed for every random choice; overrides the training config.
    #[arg(long, global = true, env = "ELNN_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cumulative multiply-accumulates per exit as CSV.
    Flops(FlopsArgs),
    /// Warp a face image onto a landmark template.
    Align(AlignArgs),
    /// Build a symmetric landmark template from a sample face.
    Template(TemplateArgs),
    /// Train an early-exit network on a CSV dataset.
    Train(TrainArgs),
    /// Score age predictions: MAE and epsilon-error.
    Eval(EvalArgs),
    /// Predict with the deepest exit that fits a compute budget.
    Infer(InferArgs),
}

#[derive(Args)]
struct FlopsArgs {
    /// Descriptor JSON, or the name of a bundled descriptor such as `resnet50`.
    descriptor: String,
    /// Descriptor whose total cost is the 0% reference.
    #[arg(long)]
    reference: Option<String>,
    /// Also write a gnuplot script plotting the CSV to this path.
    #[arg(long)]
    gnuplot: Option<PathBuf>,
    /// Count depthwise convolutions as free, as some published MobileNet
    /// tables do. Applies to the reference too.
    #[arg(long)]
    skip_depthwise: bool,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    template: PathBuf,
    /// PGM or PPM input.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output side length in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Args)]
struct TemplateArgs {
    #[arg(long)]
    landmarks: PathBuf,
    /// JSON `{"pairs": [[l, r], ...], "singles": [...]}`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log CSV.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with columns pred_age,true_age,mu,sigma.
    file: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    arch: String,
    /// Checkpoint written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset CSV; the label column is ignored.
    #[arg(long)]
    input: PathBuf,
    /// Budget in multiply-accumulates.
    #[arg(long)]
    budget: f64,
}

/// A one-line diagnostic and its exit status.
struct Failure {
    code: u8,
    message: String,
}

const IO: u8 = 3;
const INVALID: u8 = 4;

impl Failure {
    fn io(message: impl ToString) -> Self {
        Self {
            code: IO,
            message: message.to_string(),
        }
    }

    fn invalid(message: impl ToString) -> Self {
        Self {
            code: INVALID,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

impl From<DescriptorError> for Failure {
    fn from(e: DescriptorError) -> Self {
        match e {
            DescriptorError::Io(_) => Self::io(e),
            _ => Self::invalid(e),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Descriptor(d) => d.into(),
            _ => Self::invalid(e),
        }
    }
}

impl From<ElasticError> for Failure {
    fn from(e: ElasticError) -> Self {
        match e {
            ElasticError::Descriptor(d) => d.into(),
            ElasticError::Graph(g) => g.into(),
            _ => Self::invalid(e),
        }
    }
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        if e.is_io() {
            Self::io(e)
        } else {
            Self::invalid(e)
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        if e.is_io() {
            Self::io(e)
        } else {
            Self::invalid(e)
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            _ if e.is_io() => Self::io(e),
            TrainError::Graph(g) => g.into(),
            TrainError::Elastic(el) => el.into(),
            _ => Self::invalid(e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Self::io(e),
            _ => Self::invalid(e),
        }
    }
}

/// Loads a descriptor file, falling back to the bundled descriptor of the
/// same name when no such file exists.
fn load_descriptor(arg: &str) -> Result<ArchitectureDescriptor, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(ArchitectureDescriptor::load(path)?);
    }
    zoo::by_name(arg).ok_or_else(|| Failure::io(format!("{arg}: no such file or bundled descriptor")))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_flops(a: FlopsArgs) -> Result<(), Failure> {
    let convention = if a.skip_depthwise {
        MacConvention::SkipDepthwise
    } else {
        MacConvention::Full
    };
    let table = flops_table_with(&load_descriptor(&a.descriptor)?, convention)?;
    let reference = match &a.reference {
        Some(r) => Some(flops_table_with(&load_descriptor(r)?, convention)?.total()),
        None => None,
    };
    let csv = flops::to_csv(&table, reference);
    if let Some(script) = &a.gnuplot {
        let csv_name = format!("{}.csv", table.name);
        let png = format!("{}.png", table.name);
        fs::write(script, flops::gnuplot_script(&[(&csv_name, &table.name)], &png))?;
    }
    write_out(None, &csv)
}

fn run_align(a: AlignArgs) -> Result<(), Failure> {
    let landmarks = LandmarkSet::load_csv(&a.landmarks)?;
    let template = LandmarkSet::load_csv(&a.template)?;
    let img = ImageBuffer::load(&a.image)?;
    let (aligned, t) = align::align_face(&img, &landmarks, &template, (a.size, a.size))?;
    aligned.save(&a.out)?;
    println!("scale={} rotation={} tx={} ty={}", t.scale(), t.rotation(), t.tx, t.ty);
    Ok(())
}

fn run_template(a: TemplateArgs) -> Result<(), Failure> {
    let sample = LandmarkSet::load_csv(&a.landmarks)?;
    let pairs = SymmetricPairSpec::load(&a.pairs)?;
    let tpl = align::build_template(&sample, &pairs, (a.size, a.size))?;
    let mut buf = Vec::new();
    tpl.write_csv(&mut buf)?;
    write_out(a.out.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
}

fn run_train(a: TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let desc = load_descriptor(&a.arch)?;
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let train_data = Dataset::load_csv(&a.data, desc.input_shape)?;
    let val_data = Dataset::load_csv(&a.val, desc.input_shape)?;
    let mut graph = build_graph(&desc)?;
    trainer::initialize(&mut graph, config.seed, config.output_init_scale);
    let schedule = ExitSchedule::from_descriptor(&desc)?;
    let log = trainer::train(&mut graph, &schedule, &train_data, &val_data, &config)?;
    fs::write(&a.log, log.to_csv())?;
    checkpoint::save(&graph, &a.out)?;
    if let Some(last) = log.records.last() {
        let p = *log.active_exits.last().expect("final exit is active");
        println!(
            "epochs={} final_exit={} val_loss={:.6} val_acc={:.4}",
            last.epoch,
            p,
            last.val_loss[p - 1],
            last.val_acc[p - 1]
        );
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let rows = metrics::read_eval_csv(fs::File::open(&a.file)?)?;
    let s = metrics::evaluate(&rows)?;
    println!("MAE={} eps={}", s.mae, s.eps);
    if s.zero_sigma > 0 {
        println!(
            "note: {} of {} rows have sigma=0 and score 0 for an exact match, 1 otherwise",
            s.zero_sigma, s.count
        );
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<(), Failure> {
    if a.budget.is_nan() {
        return Err(Failure::invalid("budget must be a number"));
    }
    let desc = load_descriptor(&a.arch)?;
    let table = flops_table(&desc)?;
    let mut graph = build_graph(&desc)?;
    checkpoint::load(&mut graph, &a.weights)?;
    let data = Dataset::load_csv(&a.input, desc.input_shape)?;
    let mut out = String::from("sample,exit,cumulative_macs,class,probability\n");
    for i in 0..data.len() {
        let (x, _) = data.batch(&[i], &[]);
        let (exit, probs) = anytime_predict(&graph, &x, a.budget, &table)?;
        let probs = probs.data();
        let class = elastic_nn::tensor::Tensor::argmax(probs);
        let macs = table.at_exit(exit).expect("selected exit exists");
        out.push_str(&format!("{i},{exit},{macs},{class},{:.6}\n", probs[class]));
    }
    write_out(None, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Flops(a) => run_flops(a),
        Command::Align(a) => run_align(a),
        Command::Template(a) => run_template(a),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.lines().next().unwrap_or_default());
            ExitCode::from(f.code)
        }
    }
}
