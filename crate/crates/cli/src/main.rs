use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oad_core::pipeline::{self, Settings};
use oad_core::Result;

/// Online action detection over unit-level features: synthetic data,
/// training, evaluation, streaming inference and grid comparisons.
#[derive(Parser)]
#[command(name = "oad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic feature streams.
    Synth(SynthCmd),
    /// Train a temporal model on feature streams.
    Train(TrainCmd),
    /// Score streams with a checkpoint and report AP / cAP.
    Eval(EvalCmd),
    /// Write per-unit score timelines for streams.
    Infer(InferCmd),
    /// Train and evaluate every cell of a hyperparameter grid.
    Grid(GridCmd),
    /// Describe a stream, checkpoint or timeline file.
    Inspect(InspectCmd),
}

#[derive(Args)]
struct Common {
    /// Config file of key=value lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    streams: Option<usize>,
    /// Index of the first stream; give held-out sets the training seed and a later index.
    #[arg(long)]
    first_stream: Option<usize>,
    /// Units per stream.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Feature dimension.
    #[arg(long = "d")]
    d: Option<usize>,
    /// Number of action classes (background excluded).
    #[arg(long = "K")]
    k: Option<usize>,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// `order` or `static`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `binary` or `csv`.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct ModelFlags {
    /// Operator name or hybrid preset m1..m6.
    #[arg(long)]
    model: Option<String>,
    /// Window length.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Dilation rate of the TC operator.
    #[arg(long)]
    tc_rate: Option<usize>,
    /// Comma-separated dilation rates for PDC / DCC.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// `last` or `average`.
    #[arg(long)]
    rnn_output: Option<String>,
    #[arg(long)]
    attn_hidden: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    dcc_mid: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Scales hidden, attention and DCC widths from full size.
    #[arg(long)]
    width: Option<f64>,
    /// `f32` or `f64`.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Per-epoch learning-rate decay.
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    /// Stream file or directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `cap` (mean calibrated AP) or `map`.
    #[arg(long)]
    metric: Option<String>,
    /// Also write an SVG bar chart.
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct InferCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score frame by frame and report p50/p99 latency.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct GridCmd {
    #[command(flatten)]
    common: Common,
    /// Grid file: `key = value value ...` per axis.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metric: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct InspectCmd {
    path: PathBuf,
}

struct Flags(Vec<(&'static str, Option<String>)>);

impl Flags {
    fn new() -> Self {
        Flags(Vec::new())
    }

    fn put<V: ToString>(&mut self, key: &'static str, v: &Option<V>) -> &mut Self {
        self.0.push((key, v.as_ref().map(ToString::to_string)));
        self
    }

    fn switch(&mut self, key: &'static str, on: bool) -> &mut Self {
        if on {
            self.0.push((key, Some("true".into())));
        }
        self
    }

    fn model(&mut self, m: &ModelFlags) -> &mut Self {
        self.put("model", &m.model)
            .put("L", &m.l)
            .put("kernel-size", &m.kernel_size)
            .put("tc-rate", &m.tc_rate)
            .put("rates", &m.rates)
            .put("hidden-size", &m.hidden_size)
            .put("layers", &m.layers)
            .put("rnn-output", &m.rnn_output)
            .put("attn-hidden", &m.attn_hidden)
            .put("proj-dim", &m.proj_dim)
            .put("dcc-mid", &m.dcc_mid)
            .put("dropout", &m.dropout)
            .put("width", &m.width)
            .put("precision", &m.precision)
    }

    fn train(&mut self, t: &TrainFlags) -> &mut Self {
        self.put("lr", &t.lr)
            .put("momentum", &t.momentum)
            .put("decay", &t.decay)
            .put("epochs", &t.epochs)
            .put("batch-size", &t.batch_size)
            .put("seed", &t.seed)
            .put("clip", &t.clip)
    }

    fn resolve(&self, common: &Common) -> Result<Settings> {
        let mut flags = Settings::new();
        for (k, v) in &self.0 {
            if let Some(v) = v {
                flags.set(k, v.clone())?;
            }
        }
        Settings::resolve(common.config.as_deref(), &flags)
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(c) => {
            let s = Flags::new()
                .put("streams", &c.streams)
                .put("first-stream", &c.first_stream)
                .put("T", &c.t)
                .put("d", &c.d)
                .put("K", &c.k)
                .put("noise", &c.noise)
                .put("mode", &c.mode)
                .put("seed", &c.seed)
                .put("format", &c.format)
                .resolve(&c.common)?;
            pipeline::cmd_synth(&s, &c.out)
        }
        Command::Train(c) => {
            let s = Flags::new().model(&c.model).train(&c.train).resolve(&c.common)?;
            pipeline::cmd_train(&s, &c.data, &c.out)
        }
        Command::Eval(c) => {
            let s = Flags::new()
                .model(&c.model)
                .put("metric", &c.metric)
                .switch("svg", c.svg)
                .resolve(&c.common)?;
            pipeline::cmd_eval(&s, &c.checkpoint, &c.data, &c.out)
        }
        Command::Infer(c) => {
            let s = Flags::new().model(&c.model).switch("timing", c.timing).resolve(&c.common)?;
            pipeline::cmd_infer(&s, &c.checkpoint, &c.data, &c.out)
        }
        Command::Grid(c) => {
            let s = Flags::new()
                .model(&c.model)
                .train(&c.train)
                .put("metric", &c.metric)
                .resolve(&c.common)?;
            pipeline::cmd_grid(&s, &c.grid, &c.train_data, &c.test_data, &c.out)
        }
        Command::Inspect(c) => pipeline::cmd_inspect(&c.path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
