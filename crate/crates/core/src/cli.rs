//! The `grid` command line: data generation, training, sampling in every
//! task mode, evaluation, and the attention probe.
//!
//! Every command that writes an output also writes a run manifest next to
//! it (`<output>.manifest.json`, outside any output folder so reruns leave
//! the folder byte-identical). `grid replay <manifest>` re-executes it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{load_checkpoint, Model};
use crate::condition::{parse_labels, Condition};
use crate::data::{
    degrade, gen_sequence, load_folder, load_frame, synth_dataset, DatasetKind, DegradeSpec,
    SequenceSpec, LABEL_FILE,
};
use crate::error::{Error, ErrorClass, Result};
use crate::io::{list_images, load_image, save_frames, save_gif, save_png, save_raw, write_atomic};
use crate::layout::{unpack, Frame, GridSize, GridTensor, LayoutSpec};
use crate::metrics::{attention_report, evaluate, AttentionMass};
use crate::sampler::{init_grid, sample, InitMode, MaskMode, SamplerConfig, DEFAULT_NOISE_LEVEL};
use crate::trainer::{resolve_datasets, train, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "grid", version, about = "Grid-layout flow matching for frame sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic sequences from a generator spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a grid: free generation, expansion, interpolation or restoration.
    Sample(SampleArgs),
    /// Compare a predicted frame folder against a reference folder.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report how attention mass splits between same-cell, cross-cell and condition tokens.
    ProbeAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame folder holding one sequence.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        layout: Option<GridSize>,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long)]
        labels: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the command recorded in a run manifest.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    PaperLiteral,
    TrajectoryConsistent,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::PaperLiteral => MaskMode::PaperLiteral,
            MaskModeArg::TrajectoryConsistent => MaskMode::TrajectoryConsistent,
        }
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("task").required(true).args(["free", "expand", "interp", "restore"]))]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub free: bool,
    /// Reference frame pinned to cell (0, 0).
    #[arg(long, value_name = "REF")]
    pub expand: Option<PathBuf>,
    /// Key frames (comma-separated images, or a folder) placed at row starts.
    #[arg(long, value_name = "KEYS")]
    pub interp: Option<String>,
    /// Folder of degraded frames, one per cell.
    #[arg(long, value_name = "DIR")]
    pub restore: Option<PathBuf>,
    /// Grid as ROWSxCOLS; defaults to the training layout.
    #[arg(long)]
    pub layout: Option<GridSize>,
    /// Noise level; defaults to 0.9, or 1.0 for free generation.
    #[arg(long = "T")]
    pub noise_level: Option<f64>,
    #[arg(long, default_value_t = crate::sampler::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = crate::sampler::DEFAULT_GUIDANCE)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Content labels, e.g. "TRANSLATE_RIGHT,SHAPE_CIRCLE".
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long, value_enum, default_value_t = MaskModeArg::PaperLiteral)]
    pub mask_mode: MaskModeArg,
    /// Permit T = 0 (reproduces the initialization; diagnostics only).
    #[arg(long)]
    pub allow_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_secs: f64,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "output".into());
    name.push(".manifest.json");
    output.with_file_name(name)
}

struct Outcome {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    output: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_argv(argv: &[String]) -> Result<()> {
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(e.to_string()))?;
    run(cli, argv)
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let outcome = match cli.command {
        Command::Replay { manifest } => return replay(&manifest),
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out)?,
        Command::Train {
            config,
            out,
            resume,
        } => cmd_train(&config, &out, resume.as_deref())?,
        Command::Sample(args) => cmd_sample(&args)?,
        Command::Eval {
            pred,
            reference,
            out,
        } => cmd_eval(&pred, &reference, out.as_deref())?,
        Command::ProbeAttn {
            checkpoint,
            input,
            layout,
            t,
            labels,
            out,
        } => cmd_probe_attn(&checkpoint, &input, layout, t, labels.as_deref(), out.as_deref())?,
    };
    if let Some(output) = &outcome.output {
        let manifest = RunManifest {
            command: outcome.command.into(),
            argv: argv.to_vec(),
            cwd: std::env::current_dir().map_err(|e| Error::io(".", e))?,
            config: outcome.config,
            seed: outcome.seed,
            inputs: outcome.inputs,
            outputs: vec![output.clone()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: start.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&manifest_path(output), &json)?;
    }
    Ok(())
}

fn replay(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: bad manifest: {e}", path.display())))?;
    std::env::set_current_dir(&m.cwd).map_err(|e| Error::io(&m.cwd, e))?;
    run_argv(&m.argv)
}

/// Generator spec file: one explicit sequence or a random dataset, with an
/// optional degradation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSpec {
    /// `ROWSxCOLS`; required for datasets, checked against `frames` otherwise.
    #[serde(default)]
    pub grid: Option<String>,
    #[serde(default)]
    pub sequence: Option<SequenceSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetGen>,
    #[serde(default)]
    pub degrade: Option<DegradeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetGen {
    pub kind: DatasetKind,
    pub count: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn invalid(m: String) -> Error {
    Error::InvalidSpec(m)
}

fn write_sequence(dir: &Path, frames: &[Frame], labels: &str, deg: Option<&DegradeSpec>) -> Result<()> {
    save_frames(dir, frames)?;
    write_atomic(&dir.join(LABEL_FILE), labels.as_bytes())?;
    if let Some(d) = deg {
        save_frames(&dir.join("degraded"), &degrade(frames, d)?)?;
    }
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<Outcome> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: GenDataSpec =
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", spec_path.display())))?;
    let grid: Option<GridSize> = spec
        .grid
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(|e: Error| invalid(e.to_string()))?;
    if let Some(d) = &spec.degrade {
        d.validate()?;
    }
    // validate everything before touching the output folder
    match (&spec.sequence, &spec.dataset) {
        (Some(seq), None) => {
            seq.validate()?;
            if let Some(g) = grid {
                if g.rows * g.cols != seq.frames {
                    return Err(invalid(format!(
                        "{} frames do not fill a {g} grid ({} cells)",
                        seq.frames,
                        g.rows * g.cols
                    )));
                }
            }
            let s = gen_sequence(seq)?;
            let labels = crate::condition::format_labels(&s.labels);
            write_sequence(out, &s.frames, &labels, spec.degrade.as_ref())?;
        }
        (None, Some(ds)) => {
            let g = grid.ok_or_else(|| invalid("a dataset needs `grid`".into()))?;
            let layout = LayoutSpec::new(g.rows, g.cols, ds.frame_h, ds.frame_w, ds.channels)
                .map_err(|e| invalid(e.to_string()))?;
            let items = synth_dataset(ds.kind, ds.count, &layout, ds.seed)?;
            let width = ds.count.saturating_sub(1).to_string().len().max(4);
            for (i, (grid, cond)) in items.iter().enumerate() {
                let labels = crate::condition::format_labels(&cond.content_labels);
                let dir = out.join(format!("seq_{i:0width$}"));
                write_sequence(&dir, &unpack(grid)?, &labels, spec.degrade.as_ref())?;
            }
        }
        _ => {
            return Err(invalid(
                "spec needs exactly one of [sequence] or [dataset]".into(),
            ))
        }
    }
    Ok(Outcome {
        command: "gen-data",
        config: serde_json::to_value(&spec).expect("spec serializes"),
        seed: spec
            .sequence
            .as_ref()
            .map(|s| s.seed)
            .or(spec.dataset.as_ref().map(|d| d.seed)),
        inputs: vec![spec_path.to_path_buf()],
        output: Some(out.to_path_buf()),
    })
}

fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<Outcome> {
    let cfg = TrainConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let datasets = resolve_datasets(&cfg, base)?;
    let outcome = train(&cfg, &datasets, out, resume)?;
    if let Some(last) = outcome.losses.last() {
        eprintln!(
            "trained to step {}: base {:.5} flow {:.5} total {:.5}",
            cfg.total_steps(),
            last.base,
            last.flow,
            last.total
        );
    }
    eprintln!("checkpoint: {}", outcome.checkpoint.display());
    let mut inputs = vec![config.to_path_buf()];
    inputs.extend(resume.map(Path::to_path_buf));
    Ok(Outcome {
        command: "train",
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: Some(cfg.seed),
        inputs,
        output: Some(out.to_path_buf()),
    })
}

/// Layout for a checkpoint: an explicit grid, else the training grid stored
/// in the checkpoint metadata.
fn layout_for(model: &Model, meta: &serde_json::Value, grid: Option<GridSize>) -> Result<LayoutSpec> {
    let c = model.config();
    let g = match grid {
        Some(g) => g,
        None => {
            let l = meta.get("layout").ok_or_else(|| {
                Error::Config("checkpoint has no training layout; pass --layout".into())
            })?;
            let l: LayoutSpec = serde_json::from_value(l.clone())
                .map_err(|e| Error::Config(format!("bad layout in checkpoint: {e}")))?;
            GridSize {
                rows: l.rows,
                cols: l.cols,
            }
        }
    };
    LayoutSpec::new(g.rows, g.cols, c.frame_h, c.frame_w, c.channels)
}

fn condition_for(layout: &LayoutSpec, labels: Option<&str>) -> Result<Condition> {
    let labels = labels.map(parse_labels).transpose()?.unwrap_or_default();
    Condition::new(layout, labels)
}

fn key_frames(spec: &str, channels: usize) -> Result<(Vec<Frame>, Vec<PathBuf>)> {
    let p = Path::new(spec);
    let paths = if p.is_dir() {
        list_images(p)?
    } else {
        spec.split(',').map(|s| PathBuf::from(s.trim())).collect()
    };
    let frames = paths
        .iter()
        .map(|p| load_frame(p, channels))
        .collect::<Result<_>>()?;
    Ok((frames, paths))
}

#[derive(Debug, Clone, Serialize)]
struct SampleRecord<'a> {
    mode: InitMode,
    checkpoint: &'a Path,
    layout: LayoutSpec,
    condition: &'a Condition,
    sampler: SamplerConfig,
    references: &'a [PathBuf],
}

pub const GRID_PNG: &str = "grid.png";
pub const GRID_RAW: &str = "grid.raw";
pub const FRAMES_DIR: &str = "frames";
pub const GIF_FILE: &str = "sequence.gif";
pub const SIDECAR: &str = "sample.json";

fn cmd_sample(a: &SampleArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let layout = layout_for(model, &ckpt.meta, a.layout)?;
    let channels = layout.channels;
    let cond = condition_for(&layout, a.labels.as_deref())?;
    let (mode, refs, ref_paths) = if a.free {
        (InitMode::Free, Vec::new(), Vec::new())
    } else if let Some(p) = &a.expand {
        (InitMode::Expansion, vec![load_frame(p, channels)?], vec![p.clone()])
    } else if let Some(k) = &a.interp {
        let (f, p) = key_frames(k, channels)?;
        (InitMode::Interpolation, f, p)
    } else if let Some(dir) = &a.restore {
        let (grid, _) = load_folder(dir, &layout)?;
        (InitMode::Restoration, unpack(&grid)?, vec![dir.clone()])
    } else {
        unreachable!("clap requires a task flag")
    };
    let noise_level = a.noise_level.unwrap_or(if mode == InitMode::Free {
        1.0
    } else {
        DEFAULT_NOISE_LEVEL
    });
    let cfg = SamplerConfig {
        noise_level,
        steps: a.steps,
        guidance_scale: a.guidance,
        mask_mode: a.mask_mode.into(),
        seed: a.seed,
        allow_degenerate: a.allow_degenerate,
    };
    cfg.validate()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(a.seed);
    init_rng.set_stream(1);
    let (init, mask) = init_grid(mode, &refs, &layout, &mut init_rng)?;
    let out_grid = sample(model, &init, &mask, &init, &cond, &cfg)?;
    write_sample_bundle(&a.out, &out_grid)?;
    let record = SampleRecord {
        mode,
        checkpoint: &a.checkpoint,
        layout,
        condition: &cond,
        sampler: cfg,
        references: &ref_paths,
    };
    let json = serde_json::to_vec_pretty(&record).expect("record serializes");
    write_atomic(&a.out.join(SIDECAR), &json)?;

    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(ref_paths.iter().cloned());
    Ok(Outcome {
        command: "sample",
        config: serde_json::to_value(&record).expect("record serializes"),
        seed: Some(a.seed),
        inputs,
        output: Some(a.out.clone()),
    })
}

fn write_sample_bundle(out: &Path, grid: &GridTensor) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_png(&out.join(GRID_PNG), grid.data())?;
    save_raw(&out.join(GRID_RAW), grid)?;
    let frames = unpack(grid)?;
    save_frames(&out.join(FRAMES_DIR), &frames)?;
    save_gif(&out.join(GIF_FILE), &frames, 120)
}

fn load_dir_frames(dir: &Path) -> Result<Vec<Frame>> {
    list_images(dir)?.iter().map(|p| load_image(p)).collect()
}

fn emit_json(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    println!("{json}");
    if let Some(p) = out {
        write_atomic(p, json.as_bytes())?;
    }
    Ok(())
}

fn cmd_eval(pred: &Path, reference: &Path, out: Option<&Path>) -> Result<Outcome> {
    let p = load_dir_frames(pred)?;
    let r = load_dir_frames(reference)?;
    if p.len() != r.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} frames, {} has {}",
            pred.display(),
            p.len(),
            reference.display(),
            r.len()
        )));
    }
    let report = evaluate(&p, &r)?;
    emit_json(out, &report)?;
    Ok(Outcome {
        command: "eval",
        config: serde_json::Value::Null,
        seed: None,
        inputs: vec![pred.to_path_buf(), reference.to_path_buf()],
        output: out.map(Path::to_path_buf),
    })
}

#[derive(Debug, Clone, Serialize)]
struct ProbeReport {
    t: f64,
    layout: LayoutSpec,
    overall: AttentionMass,
    /// `per_head[layer][head]`.
    per_head: Vec<Vec<AttentionMass>>,
}

fn cmd_probe_attn(
    checkpoint: &Path,
    input: &Path,
    grid: Option<GridSize>,
    t: f64,
    labels: Option<&str>,
    out: Option<&Path>,
) -> Result<Outcome> {
    let ckpt = load_checkpoint(checkpoint)?;
    let layout = layout_for(&ckpt.model, &ckpt.meta, grid)?;
    let (x, sidecar_cond) = load_folder(input, &layout)?;
    let cond = match labels {
        Some(l) => condition_for(&layout, Some(l))?,
        None => sidecar_cond,
    };
    let record = ckpt.model.attention_maps(&x, t, &cond)?;
    let overall = attention_report(&record)?;
    let per_head = record
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|h| {
                    attention_report(&crate::backbone::AttentionRecord {
                        layers: vec![vec![h.clone()]],
                        tokens: record.tokens.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ProbeReport {
        t,
        layout,
        overall,
        per_head,
    };
    emit_json(out, &report)?;
    Ok(Outcome {
        command: "probe-attn",
        config: serde_json::json!({ "t": t, "layout": layout }),
        seed: None,
        inputs: vec![checkpoint.to_path_buf(), input.to_path_buf()],
        output: out.map(Path::to_path_buf),
    })
}
