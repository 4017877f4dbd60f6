//! Commands behind the CLI: settings resolution, run manifests and the
//! synth / train / eval / infer / grid / inspect workflows.
//!
//! Settings are `key=value` pairs. A command resolves them as built-in
//! defaults, overridden by a config file, overridden by flags. Keys match the
//! CLI's long flag names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{self, FeatureStream, StreamFormat, SynthMode, SynthSpec};
use crate::error::{Error, Result};
use crate::infer::{infer_stream, infer_timed, ScoreTimeline, TIMELINE_MAGIC};
use crate::metrics::{evaluate, EvalReport, Protocol};
use crate::model::params::CHECKPOINT_MAGIC;
use crate::model::{Model, ModelSpec, ParamStore};
use crate::tensor::Real;
use crate::train::{train, Precision, TrainConfig};

/// Every key accepted in config files, flags and grid files.
pub const KNOWN_KEYS: &[&str] = &[
    "model", "L", "kernel-size", "tc-rate", "rates", "hidden-size", "layers", "rnn-output",
    "attn-hidden", "proj-dim", "dcc-mid", "dropout", "width", "lr", "momentum", "decay", "epochs",
    "batch-size", "seed", "precision", "clip", "streams", "first-stream", "T", "d", "K", "noise", "mode", "format",
    "metric", "svg", "timing",
];

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_PREFIX: &str = "manifest.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn new() -> Self {
        Settings::default()
    }

    /// Parses `key=value` lines; `#` starts a comment and `manifest.*` keys are skipped,
    /// so a run manifest can be fed back as a config file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Settings::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if k.starts_with(MANIFEST_PREFIX) {
                continue;
            }
            out.set(k, v.trim())?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "unknown setting `{key}`; known settings: {}",
                KNOWN_KEYS.join(", ")
            )));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Values from `other` replace ours.
    pub fn overlay(&mut self, other: &Settings) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Config file (if any) overlaid by flags.
    pub fn resolve(file: Option<&Path>, flags: &Settings) -> Result<Self> {
        let mut s = match file {
            Some(p) => Self::load(p)?,
            None => Settings::new(),
        };
        s.overlay(flags);
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("invalid value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter()
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn flag_bool(s: &Settings, key: &str) -> Result<bool> {
    match s.raw(key) {
        None => Ok(false),
        Some("true" | "1" | "yes" | "on") => Ok(true),
        Some("false" | "0" | "no" | "off") => Ok(false),
        Some(v) => Err(Error::Config(format!("invalid value `{v}` for `{key}`: expected true or false"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("invalid entry `{x}` in `{key}`: {e}")))
        })
        .collect()
}

/// Builds and validates the model spec described by `s` for data of width `d` with `k` classes.
pub fn model_spec(s: &Settings, d: usize, k: usize) -> Result<ModelSpec> {
    let name = s.raw("model").ok_or_else(|| {
        Error::Config(format!(
            "no model given; valid kinds: {}",
            crate::model::MODEL_NAMES.join(", ")
        ))
    })?;
    let mut spec = ModelSpec::from_name(name, d, k)?;
    if let Some(w) = s.get::<f64>("width")? {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("width multiplier {w} must be > 0")));
        }
        spec = spec.with_width_multiplier(w);
    }
    spec.seq_len = s.get_or("L", spec.seq_len)?;
    spec.kernel_size = s.get_or("kernel-size", spec.kernel_size)?;
    spec.tc_rate = s.get_or("tc-rate", spec.tc_rate)?;
    if let Some(r) = s.raw("rates") {
        spec.dilation_rates = parse_list("rates", r)?;
    }
    spec.hidden_size = s.get_or("hidden-size", spec.hidden_size)?;
    spec.num_layers = s.get_or("layers", spec.num_layers)?;
    spec.rnn_output = s.get_or("rnn-output", spec.rnn_output)?;
    spec.attn_hidden = s.get_or("attn-hidden", spec.attn_hidden)?;
    if let Some(p) = s.get::<usize>("proj-dim")? {
        spec.proj_dim = Some(p);
    }
    spec.dcc_mid_width = s.get_or("dcc-mid", spec.dcc_mid_width)?;
    spec.dropout = s.get_or("dropout", spec.dropout)?;
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::Config(format!("dropout {} must lie in [0, 1)", spec.dropout)));
    }
    spec.validate()?;
    Ok(spec)
}

/// The resolved model keys of `spec`, suitable for a config file.
pub fn model_settings(spec: &ModelSpec) -> Settings {
    let mut s = Settings::new();
    let mut put = |k: &str, v: String| {
        s.0.insert(k.to_string(), v);
    };
    put("model", spec.display_name());
    put("L", spec.seq_len.to_string());
    put("kernel-size", spec.kernel_size.to_string());
    put("tc-rate", spec.tc_rate.to_string());
    let rates: Vec<String> = spec.dilation_rates.iter().map(|r| r.to_string()).collect();
    put("rates", rates.join(","));
    put("hidden-size", spec.hidden_size.to_string());
    put("layers", spec.num_layers.to_string());
    put("rnn-output", spec.rnn_output.to_string());
    put("attn-hidden", spec.attn_hidden.to_string());
    if let Some(p) = spec.proj_dim {
        put("proj-dim", p.to_string());
    }
    put("dcc-mid", spec.dcc_mid_width.to_string());
    put("dropout", spec.dropout.to_string());
    s
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: s.get_or("lr", d.learning_rate)?,
        momentum: s.get_or("momentum", d.momentum)?,
        decay: s.get_or("decay", d.decay)?,
        epochs: s.get_or("epochs", d.epochs)?,
        batch_size: s.get_or("batch-size", d.batch_size)?,
        seed: s.get_or("seed", d.seed)?,
        precision: s.get_or("precision", d.precision)?,
        clip: s.get("clip")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_settings(cfg: &TrainConfig) -> Settings {
    let mut s = Settings::new();
    let mut put = |k: &str, v: String| {
        s.0.insert(k.to_string(), v);
    };
    put("lr", cfg.learning_rate.to_string());
    put("momentum", cfg.momentum.to_string());
    put("decay", cfg.decay.to_string());
    put("epochs", cfg.epochs.to_string());
    put("batch-size", cfg.batch_size.to_string());
    put("seed", cfg.seed.to_string());
    put("precision", cfg.precision.to_string());
    if let Some(c) = cfg.clip {
        put("clip", c.to_string());
    }
    s
}

pub fn synth_spec(s: &Settings) -> Result<SynthSpec> {
    let mode = match s.raw("mode").unwrap_or("order") {
        "order" | "order-sensitive" => SynthMode::OrderSensitive,
        "static" => SynthMode::Static,
        other => return Err(Error::Config(format!("unknown mode `{other}` (expected order or static)"))),
    };
    let spec = SynthSpec {
        num_streams: s.get_or("streams", 10)?,
        len: s.get_or("T", 256)?,
        feature_dim: s.get_or("d", 16)?,
        num_classes: s.get_or("K", 2)?,
        noise: s.get_or("noise", 0.1)?,
        mode,
        seed: s.get_or("seed", 0)?,
        first_index: s.get_or("first-stream", 0)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn stream_format(s: &Settings) -> Result<StreamFormat> {
    match s.raw("format").unwrap_or("binary") {
        "binary" | "oadf" => Ok(StreamFormat::Binary),
        "csv" => Ok(StreamFormat::Csv),
        other => Err(Error::Config(format!("unknown format `{other}` (expected binary or csv)"))),
    }
}

fn metric(s: &Settings) -> Result<Protocol> {
    s.get_or("metric", Protocol::MeanCap)
}

/// Record of one command run, written next to its artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Settings,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time: Duration,
    pub version: String,
}

impl RunManifest {
    fn new(command: &str, config: Settings, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            wall_time: Duration::ZERO,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "manifest.command={}", self.command);
        let _ = writeln!(out, "manifest.version={}", self.version);
        let _ = writeln!(out, "manifest.seed={}", self.seed);
        for p in &self.inputs {
            let _ = writeln!(out, "manifest.input={}", p.display());
        }
        for p in &self.artifacts {
            let _ = writeln!(out, "manifest.artifact={}", p.display());
        }
        let _ = writeln!(out, "manifest.wall_time_s={:.6}", self.wall_time.as_secs_f64());
        out.push_str(&self.config.to_text());
        out
    }

    fn write(&mut self, dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wall_time = started.elapsed();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

fn manifest_ref() -> String {
    format!("# manifest: {MANIFEST_FILE}\n")
}

/// Loads a single stream file or every `.oadf` / `.csv` file of a directory, sorted by name.
pub fn load_streams(path: &Path) -> Result<(Vec<FeatureStream>, Vec<PathBuf>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("oadf" | "csv")
                )
            })
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let load = |p: &PathBuf| data::load_stream(p, StreamFormat::from_path(p));
    #[cfg(feature = "parallel")]
    let streams = files.par_iter().map(load).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let streams = files.iter().map(load).collect::<Result<Vec<_>>>()?;
    Ok((streams, files))
}

/// Shared `(d, K)` of a non-empty stream set.
fn stream_shape(streams: &[FeatureStream], what: &str) -> Result<(usize, usize)> {
    let first = streams
        .first()
        .ok_or_else(|| Error::Validation(format!("empty {what} set")))?;
    for s in streams {
        if s.feature_dim() != first.feature_dim() || s.num_classes != first.num_classes {
            return Err(Error::Validation(format!(
                "stream `{}` has d={}, K={} but `{}` has d={}, K={}",
                s.video_id,
                s.feature_dim(),
                s.num_classes,
                first.video_id,
                first.feature_dim(),
                first.num_classes
            )));
        }
    }
    Ok((first.feature_dim(), first.num_classes))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes synthetic streams as `synth-NNNN.oadf` (or `.csv`).
pub fn cmd_synth(s: &Settings, out: &Path) -> Result<String> {
    let started = Instant::now();
    let spec = synth_spec(s)?;
    let format = stream_format(s)?;
    let streams = data::generate_synthetic(&spec)?;
    ensure_dir(out)?;
    let mut resolved = Settings::new();
    for (k, v) in [
        ("streams", spec.num_streams.to_string()),
        ("T", spec.len.to_string()),
        ("d", spec.feature_dim.to_string()),
        ("K", spec.num_classes.to_string()),
        ("noise", spec.noise.to_string()),
        (
            "mode",
            match spec.mode {
                SynthMode::OrderSensitive => "order".into(),
                SynthMode::Static => "static".into(),
            },
        ),
        ("seed", spec.seed.to_string()),
        ("first-stream", spec.first_index.to_string()),
        (
            "format",
            match format {
                StreamFormat::Binary => "binary".into(),
                StreamFormat::Csv => "csv".into(),
            },
        ),
    ] {
        resolved.set(k, v)?;
    }
    let mut manifest = RunManifest::new("synth", resolved, spec.seed);
    let ext = match format {
        StreamFormat::Binary => "oadf",
        StreamFormat::Csv => "csv",
    };
    let mut counts = vec![0usize; spec.num_classes + 1];
    for st in &streams {
        let path = out.join(format!("{}.{ext}", st.video_id));
        data::save_stream(st, &path, format)?;
        manifest.artifacts.push(path);
        for &l in &st.labels {
            counts[l as usize] += 1;
        }
    }
    manifest.write(out, started)?;
    let counts: Vec<String> = counts.iter().enumerate().map(|(k, c)| format!("{k}:{c}")).collect();
    Ok(format!(
        "wrote {} streams (T={}, d={}, K={}) to {}\nunit counts per label {}\n",
        streams.len(),
        spec.len,
        spec.feature_dim,
        spec.num_classes,
        out.display(),
        counts.join(" ")
    ))
}

fn train_any<T: Real>(
    spec: &ModelSpec,
    streams: &[FeatureStream],
    cfg: &TrainConfig,
) -> Result<(Vec<u8>, crate::train::TrainLog)> {
    let (params, log) = train::<T>(spec, streams, cfg)?;
    Ok((params.to_checkpoint_bytes(spec.fingerprint()), log))
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.log";

/// Trains on the streams at `data`; writes `model.ckpt`, `train.log` and a manifest into `out`.
pub fn cmd_train(s: &Settings, data: &Path, out: &Path) -> Result<String> {
    let started = Instant::now();
    let (streams, inputs) = load_streams(data)?;
    let (d, k) = stream_shape(&streams, "training")?;
    let spec = model_spec(s, d, k)?;
    let cfg = train_config(s)?;
    let (bytes, log) = match cfg.precision {
        Precision::F32 => train_any::<f32>(&spec, &streams, &cfg)?,
        Precision::F64 => train_any::<f64>(&spec, &streams, &cfg)?,
    };
    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    fs::write(&ckpt, &bytes)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    fs::write(&log_path, format!("{}{}", manifest_ref(), log.to_text()))?;
    let mut resolved = model_settings(&spec);
    resolved.overlay(&train_settings(&cfg));
    let mut manifest = RunManifest::new("train", resolved, cfg.seed);
    manifest.inputs = inputs;
    manifest.artifacts = vec![ckpt.clone(), log_path];
    manifest.write(out, started)?;
    Ok(format!(
        "model {} ({} windows of L={}), fingerprint {:016x}\n{}checkpoint written to {}\n",
        spec.display_name(),
        streams.iter().map(|st| st.len() / spec.seq_len).sum::<usize>(),
        spec.seq_len,
        spec.fingerprint(),
        log.to_text(),
        ckpt.display()
    ))
}

fn load_model<T: Real>(spec: &ModelSpec, checkpoint: &Path) -> Result<Model<T>> {
    let (params, fingerprint) = ParamStore::<T>::load(fs::File::open(checkpoint)?)?;
    if fingerprint != spec.fingerprint() {
        return Err(Error::Validation(format!(
            "checkpoint fingerprint {fingerprint:016x} does not match the model settings ({:016x}, {})",
            spec.fingerprint(),
            spec.canonical()
        )));
    }
    Model::from_parts(spec.clone(), params)
}

fn timelines<T: Real>(model: &Model<T>, streams: &[FeatureStream]) -> Result<Vec<ScoreTimeline>> {
    streams.iter().map(|st| infer_stream(model, st)).collect()
}

fn score_streams(
    spec: &ModelSpec,
    precision: Precision,
    checkpoint: &Path,
    streams: &[FeatureStream],
) -> Result<Vec<ScoreTimeline>> {
    match precision {
        Precision::F32 => timelines(&load_model::<f32>(spec, checkpoint)?, streams),
        Precision::F64 => timelines(&load_model::<f64>(spec, checkpoint)?, streams),
    }
}

fn evaluate_timelines(
    timelines: &[ScoreTimeline],
    streams: &[FeatureStream],
    k: usize,
    protocol: Protocol,
) -> Result<EvalReport> {
    let rows: Vec<Vec<Vec<f64>>> = timelines.iter().map(ScoreTimeline::rows).collect();
    let pairs: Vec<(&[Vec<f64>], &[u32])> = rows
        .iter()
        .zip(streams)
        .map(|(r, st)| (r.as_slice(), st.labels.as_slice()))
        .collect();
    evaluate(&pairs, k, protocol)
}

pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_SVG_FILE: &str = "report.svg";

/// Scores the streams at `data` with a checkpoint and writes the evaluation report into `out`.
pub fn cmd_eval(s: &Settings, checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    let started = Instant::now();
    let (streams, mut inputs) = load_streams(data)?;
    let (d, k) = stream_shape(&streams, "test")?;
    let spec = model_spec(s, d, k)?;
    let precision = s.get_or("precision", Precision::default())?;
    let protocol = metric(s)?;
    let tls = score_streams(&spec, precision, checkpoint, &streams)?;
    let report = evaluate_timelines(&tls, &streams, k, protocol)?;
    ensure_dir(out)?;
    let text = report.to_text();
    let txt = out.join(REPORT_TEXT_FILE);
    fs::write(&txt, format!("{}{text}", manifest_ref()))?;
    let csv = out.join(REPORT_CSV_FILE);
    fs::write(&csv, report.to_csv())?;
    let mut artifacts = vec![txt, csv];
    if flag_bool(s, "svg")? {
        let svg = out.join(REPORT_SVG_FILE);
        fs::write(&svg, report.to_svg())?;
        artifacts.push(svg);
    }
    let mut resolved = model_settings(&spec);
    resolved.set("precision", precision.to_string())?;
    resolved.set(
        "metric",
        match protocol {
            Protocol::MeanAp => "map",
            Protocol::MeanCap => "cap",
        },
    )?;
    let mut manifest = RunManifest::new("eval", resolved, 0);
    inputs.insert(0, checkpoint.to_path_buf());
    manifest.inputs = inputs;
    manifest.artifacts = artifacts;
    manifest.write(out, started)?;
    Ok(text)
}

/// Writes `<id>.timeline.csv` and `<id>.oadt` per stream into `out`.
pub fn cmd_infer(s: &Settings, checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    let started = Instant::now();
    let (streams, mut inputs) = load_streams(data)?;
    let (d, k) = stream_shape(&streams, "input")?;
    let spec = model_spec(s, d, k)?;
    let precision = s.get_or("precision", Precision::default())?;
    let timing = flag_bool(s, "timing")?;
    ensure_dir(out)?;
    let mut summary = String::new();
    let mut artifacts = Vec::new();
    fn run<T: Real>(
        model: &Model<T>,
        streams: &[FeatureStream],
        timing: bool,
        summary: &mut String,
    ) -> Result<Vec<ScoreTimeline>> {
        streams
            .iter()
            .map(|st| {
                if timing {
                    let (tl, lat) = infer_timed(model, st)?;
                    let _ = writeln!(
                        summary,
                        "{}: {} units, latency p50 {:.1} us, p99 {:.1} us",
                        st.video_id,
                        lat.frames,
                        lat.p50.as_secs_f64() * 1e6,
                        lat.p99.as_secs_f64() * 1e6
                    );
                    Ok(tl)
                } else {
                    let tl = infer_stream(model, st)?;
                    let _ = writeln!(summary, "{}: {} units", st.video_id, tl.len());
                    Ok(tl)
                }
            })
            .collect()
    }
    let tls = match precision {
        Precision::F32 => run(&load_model::<f32>(&spec, checkpoint)?, &streams, timing, &mut summary)?,
        Precision::F64 => run(&load_model::<f64>(&spec, checkpoint)?, &streams, timing, &mut summary)?,
    };
    for (st, tl) in streams.iter().zip(&tls) {
        let csv = out.join(format!("{}.timeline.csv", st.video_id));
        fs::write(&csv, tl.to_csv())?;
        let bin = out.join(format!("{}.oadt", st.video_id));
        fs::write(&bin, tl.to_bytes())?;
        artifacts.push(csv);
        artifacts.push(bin);
    }
    let mut resolved = model_settings(&spec);
    resolved.set("precision", precision.to_string())?;
    let mut manifest = RunManifest::new("infer", resolved, 0);
    inputs.insert(0, checkpoint.to_path_buf());
    manifest.inputs = inputs;
    manifest.artifacts = artifacts;
    manifest.write(out, started)?;
    Ok(summary)
}

/// Grid axes: `key = alt1 alt2 …` per line (alternatives separated by whitespace).
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid line {}: expected key = values", n + 1)))?;
        let key = match k.trim() {
            "models" => "model",
            other => other,
        };
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("grid line {}: unknown setting `{key}`", n + 1)));
        }
        if axes.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("grid line {}: `{key}` repeated", n + 1)));
        }
        let values: Vec<String> = v.split_whitespace().map(str::to_string).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid line {}: `{key}` has no values", n + 1)));
        }
        axes.push((key.to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::Config("grid file defines no axes".into()));
    }
    Ok(axes)
}

/// Cartesian product of the axes, first axis outermost.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub cell: usize,
    pub model: String,
    pub params: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub mcap: Option<f64>,
    pub accuracy: Option<f64>,
    pub wall_time: Duration,
    pub status: String,
}

fn run_cell(
    s: &Settings,
    train_set: &[FeatureStream],
    test_set: &[FeatureStream],
    shape: (usize, usize),
) -> Result<EvalReport> {
    let spec = model_spec(s, shape.0, shape.1)?;
    let cfg = train_config(s)?;
    let protocol = metric(s)?;
    fn go<T: Real>(
        spec: &ModelSpec,
        cfg: &TrainConfig,
        train_set: &[FeatureStream],
        test_set: &[FeatureStream],
    ) -> Result<Vec<ScoreTimeline>> {
        let (params, _) = train::<T>(spec, train_set, cfg)?;
        timelines(&Model::from_parts(spec.clone(), params)?, test_set)
    }
    let tls = match cfg.precision {
        Precision::F32 => go::<f32>(&spec, &cfg, train_set, test_set)?,
        Precision::F64 => go::<f64>(&spec, &cfg, train_set, test_set)?,
    };
    evaluate_timelines(&tls, test_set, shape.1, protocol)
}

/// Runs every grid cell and returns rows ranked by the headline metric
/// (failed cells last, ties by cell index).
pub fn run_grid(
    base: &Settings,
    axes: &[(String, Vec<String>)],
    train_set: &[FeatureStream],
    test_set: &[FeatureStream],
) -> Result<Vec<GridRow>> {
    let shape = stream_shape(train_set, "training")?;
    if stream_shape(test_set, "test")? != shape {
        return Err(Error::Validation("training and test streams differ in d or K".into()));
    }
    let protocol = metric(base)?;
    let cells = grid_cells(axes);
    let run = |(i, cell): (usize, &Vec<(String, String)>)| {
        let started = Instant::now();
        let mut s = base.clone();
        let mut params = Vec::new();
        let mut setup = Ok(());
        for (k, v) in cell {
            if k != "model" {
                params.push(format!("{k}={v}"));
            }
            if let Err(e) = s.set(k, v.clone()) {
                setup = Err(e);
            }
        }
        let result = setup.and_then(|_| run_cell(&s, train_set, test_set, shape));
        let seed = s.get_or("seed", 0u64).unwrap_or(0);
        let model = s.raw("model").unwrap_or("?").to_string();
        let mut row = GridRow {
            cell: i,
            model,
            params: params.join(";"),
            seed,
            map: None,
            mcap: None,
            accuracy: None,
            wall_time: Duration::ZERO,
            status: "ok".into(),
        };
        match result {
            Ok(r) => {
                row.map = r.mean_ap;
                row.mcap = r.mean_cap;
                row.accuracy = Some(r.frame_accuracy);
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        row.wall_time = started.elapsed();
        row
    };
    #[cfg(feature = "parallel")]
    let mut rows: Vec<GridRow> = cells.par_iter().enumerate().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let mut rows: Vec<GridRow> = cells.iter().enumerate().map(run).collect();
    let key = |r: &GridRow| match protocol {
        Protocol::MeanAp => r.map,
        Protocol::MeanCap => r.mcap,
    };
    rows.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        match (ka, kb) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then(a.cell.cmp(&b.cell))
    });
    Ok(rows)
}

pub const GRID_CSV_FILE: &str = "grid.csv";
pub const GRID_TEXT_FILE: &str = "grid.txt";

fn cell_value(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("rank,cell,model,params,seed,map,mcap,accuracy,wall_time_ms,status\n");
    for (rank, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.1},\"{}\"",
            rank + 1,
            r.cell,
            r.model,
            r.params,
            r.seed,
            cell_value(r.map),
            cell_value(r.mcap),
            cell_value(r.accuracy),
            r.wall_time.as_secs_f64() * 1e3,
            r.status.replace('"', "'")
        );
    }
    out
}

pub fn grid_text(rows: &[GridRow]) -> String {
    let mut out = format!(
        "{:<5}{:<6}{:<14}{:<28}{:>6}{:>10}{:>10}{:>10}{:>12}  status\n",
        "rank", "cell", "model", "params", "seed", "mAP", "mcAP", "acc", "wall_ms"
    );
    for (rank, r) in rows.iter().enumerate() {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "{:<5}{:<6}{:<14}{:<28}{:>6}{:>10}{:>10}{:>10}{:>12.1}  {}",
            rank + 1,
            r.cell,
            r.model,
            r.params,
            r.seed,
            show(r.map),
            show(r.mcap),
            show(r.accuracy),
            r.wall_time.as_secs_f64() * 1e3,
            r.status
        );
    }
    out
}

/// Trains and evaluates every cell of the grid file; writes `grid.csv`, `grid.txt` and a manifest.
pub fn cmd_grid(s: &Settings, grid: &Path, train_data: &Path, test_data: &Path, out: &Path) -> Result<String> {
    let started = Instant::now();
    let axes = parse_grid(&fs::read_to_string(grid)?)?;
    let (train_set, train_inputs) = load_streams(train_data)?;
    let (test_set, test_inputs) = load_streams(test_data)?;
    let rows = run_grid(s, &axes, &train_set, &test_set)?;
    ensure_dir(out)?;
    let csv = out.join(GRID_CSV_FILE);
    fs::write(&csv, grid_csv(&rows))?;
    let text = grid_text(&rows);
    let txt = out.join(GRID_TEXT_FILE);
    fs::write(&txt, format!("{}{text}", manifest_ref()))?;
    let mut manifest = RunManifest::new("grid", s.clone(), s.get_or("seed", 0)?);
    manifest.inputs = std::iter::once(grid.to_path_buf())
        .chain(train_inputs)
        .chain(test_inputs)
        .collect();
    manifest.artifacts = vec![csv, txt];
    manifest.write(out, started)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    Ok(format!("{text}{} cells, {failed} failed\n", rows.len()))
}

/// Describes a stream, checkpoint or timeline file.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut out = String::new();
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == data::STREAM_MAGIC || StreamFormat::from_path(path) == StreamFormat::Csv {
        let st = data::load_stream(path, StreamFormat::from_path(path))?;
        let mut counts = vec![0usize; st.num_classes + 1];
        for &l in &st.labels {
            counts[l as usize] += 1;
        }
        let _ = writeln!(out, "feature stream `{}`", st.video_id);
        let _ = writeln!(out, "T={} d={} K={}", st.len(), st.feature_dim(), st.num_classes);
        for (k, c) in counts.iter().enumerate() {
            let _ = writeln!(out, "label {k}: {c} units");
        }
    } else if magic == CHECKPOINT_MAGIC {
        let width = ParamStore::<f64>::from_checkpoint_bytes(&bytes);
        let (names, fingerprint, precision) = match width {
            Ok((p, f)) => (describe(&p), f, "f64"),
            Err(_) => {
                let (p, f) = ParamStore::<f32>::from_checkpoint_bytes(&bytes)?;
                (describe(&p), f, "f32")
            }
        };
        let _ = writeln!(out, "checkpoint, {precision} values, fingerprint {fingerprint:016x}");
        out.push_str(&names);
    } else if magic == TIMELINE_MAGIC {
        let tl = ScoreTimeline::from_bytes(&bytes)?;
        let _ = writeln!(
            out,
            "score timeline: {} units, {} classes (incl. background), fingerprint {:016x}",
            tl.len(),
            tl.probs.cols(),
            tl.fingerprint
        );
    } else {
        return Err(crate::error::FormatError::BadMagic.into());
    }
    Ok(out)
}

fn describe<T: Real>(p: &ParamStore<T>) -> String {
    let mut out = String::new();
    for (name, param) in p.iter() {
        let [r, c] = param.value.shape();
        let _ = writeln!(out, "  {name:<32} {r}x{c}");
    }
    let _ = writeln!(out, "{} tensors, {} scalars", p.len(), p.num_scalars());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> Settings {
        let mut s = Settings::new();
        for (k, v) in pairs {
            s.set(k, *v).unwrap();
        }
        s
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "# comment\nlr = 0.5\nepochs=3\n").unwrap();
        let s = Settings::resolve(Some(&file), &settings(&[("epochs", "7")])).unwrap();
        let cfg = train_config(&s).unwrap();
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(Settings::parse("bogus=1"), Err(Error::Config(_))));
        assert!(Settings::parse("manifest.command=train\nL=4").is_ok());
    }

    #[test]
    fn dcc_defaults_and_presets() {
        let spec = model_spec(&settings(&[("model", "dcc"), ("L", "4")]), 16, 2).unwrap();
        assert_eq!(spec.dilation_rates, vec![1, 2, 4]);
        assert_eq!(spec.kernel_size, 2);
        let spec = model_spec(&settings(&[("model", "m4")]), 16, 2).unwrap();
        let names: Vec<_> = spec.chain.iter().map(|s| s.name()).collect();
        assert_eq!(names, vec!["dcc", "lstm", "transformer"]);
        let spec = model_spec(&settings(&[("model", "lstm")]), 16, 2).unwrap();
        assert_eq!(spec.rnn_output, crate::model::RnnOutput::LastHidden);
    }

    #[test]
    fn unknown_model_is_usage_error() {
        let err = model_spec(&settings(&[("model", "resnet")]), 16, 2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("avgpool"));
    }

    #[test]
    fn grid_cardinality_and_order() {
        let axes = parse_grid("models = avgpool lstm dcc transformer\nL = 2 4 8\n").unwrap();
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0][0].1, "avgpool");
        assert_eq!(cells[1][1].1, "4");
    }

    #[test]
    fn model_settings_round_trip() {
        let spec = model_spec(&settings(&[("model", "gru"), ("width", "0.01"), ("L", "6")]), 8, 3).unwrap();
        let again = model_spec(&model_settings(&spec), 8, 3).unwrap();
        assert_eq!(again.fingerprint(), spec.fingerprint());
    }
}
