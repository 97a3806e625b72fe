//! Command-line front end: argument parsing and the six verbs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionKind};
use crate::config::{ModelConfig, RunConfig};
use crate::erf::{compute_erf, ErfBlock, ErfConfig, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::io::{read_frame, write_frame, write_gray_png, Checkpoint};
use crate::nn::Builder;
use crate::synth::{load_corpus, write_corpus};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::train::{evaluate, load_model, run_training, EvalReport, Trainer, CHECKPOINT_FILE};

#[derive(Debug, Parser)]
#[command(name = "vfiformer", version, about = "Video frame interpolation with cross-scale window attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every verb.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON). Flags given alongside override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Model preset.
    #[arg(long, global = true, value_parser = ["paper", "toy"])]
    pub preset: Option<String>,
    /// Total training steps; a quarter go to the flow phase.
    #[arg(long, global = true)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a corpus, writing checkpoints and a loss CSV.
    Train {
        /// Corpus directory (defaults to the config's corpus_dir).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and the overlay baseline on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write the frames between two inputs as frame_%03d.png.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        frame0: PathBuf,
        frame1: PathBuf,
        /// 2, 4 or 8.
        #[arg(long, default_value_t = 2)]
        factor: usize,
    },
    /// Effective receptive field maps of a 3x3 convolution, WA and CSWA.
    Erf {
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
    },
    /// Attention latency and FLOPs across window sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8, 12])]
        window_sizes: Vec<usize>,
        /// Square feature map side.
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Render a synthetic corpus.
    GenData {
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

/// Config file (or preset), then flag overrides.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(ModelConfig::toy()),
    };
    if let Some(p) = &common.preset {
        if common.config.is_none() || run.model.preset != *p {
            run.model = ModelConfig::preset(p)?;
        }
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        run.out_dir = dir.clone();
    }
    if let Some(steps) = common.steps {
        run.steps_flow = steps / 4;
        run.steps_joint = steps - steps / 4;
    }
    run.model.validate()?;
    Ok(run)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

pub fn run(cli: Cli) -> Result<()> {
    let run = resolve_config(&cli.common)?;
    create_dir(&run.out_dir)?;
    match cli.command {
        Command::Train { corpus, resume } => cmd_train(run, corpus, resume).map(|_| ()),
        Command::Eval { checkpoint, corpus } => {
            let report = cmd_eval(&run, &checkpoint, &corpus)?;
            print!("{}", format_table(&report));
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            frame0,
            frame1,
            factor,
        } => cmd_interpolate(&run, &checkpoint, &frame0, &frame1, factor).map(|_| ()),
        Command::Erf { samples, size, window } => {
            let cfg = ErfConfig {
                samples,
                size,
                window,
                seed: run.seed,
                ..ErfConfig::default()
            };
            let csv = cmd_erf(&run, &cfg)?;
            print!("{csv}");
            Ok(())
        }
        Command::Bench {
            window_sizes,
            size,
            runs,
        } => {
            let rows = cmd_bench(&run, &window_sizes, size, runs)?;
            print!("{}", bench_csv(&rows));
            Ok(())
        }
        Command::GenData { count, size } => {
            let dir = run.out_dir.join("corpus");
            write_corpus(&dir, run.seed, count, size)?;
            println!("wrote {count} triplets to {}", dir.display());
            Ok(())
        }
    }
}

/// Trains (or resumes) and returns the final checkpoint path.
pub fn cmd_train(mut run: RunConfig, corpus: Option<PathBuf>, resume: bool) -> Result<PathBuf> {
    if let Some(c) = corpus {
        run.corpus_dir = c;
    }
    if !run.corpus_dir.is_dir() {
        return Err(Error::io(
            run.corpus_dir.display(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let data = load_corpus(&run.corpus_dir)?;
    create_dir(&run.out_dir)?;
    let resume_from = match (&run.checkpoint, resume) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some(run.out_dir.join(CHECKPOINT_FILE)),
        (None, false) => None,
    };
    let mut trainer = match resume_from {
        Some(path) => Trainer::resume(run.clone(), &Checkpoint::load(&path)?)?,
        None => Trainer::new(run.clone())?,
    };
    run.save(&run.out_dir.join("config.json"))?;
    let started = Instant::now();
    let total = run.total_steps();
    run_training(&mut trainer, &data, &mut |step, report| {
        if (step + 1) % 50 == 0 || step + 1 == total {
            eprintln!(
                "step {}/{total} total {:.5} rec {:.5} census {:.5} distill {:.5} ({:.0}s)",
                step + 1,
                report.total,
                report.rec,
                report.census,
                report.distill,
                started.elapsed().as_secs_f64()
            );
        }
    })
}

pub fn cmd_eval(run: &RunConfig, checkpoint: &Path, corpus: &Path) -> Result<EvalReport> {
    let data = load_corpus(corpus)?;
    let (model, store, _) = load_model(checkpoint)?;
    let report = evaluate(Some((&model, &store)), &data)?;
    write_text(&run.out_dir.join("eval.csv"), &report.to_csv())?;
    Ok(report)
}

pub fn format_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>5} {:>8} {:>7} {:>7} {:>7} {:>9} {:>9} {:>8}",
        "level", "n", "psnr", "ssim", "ie", "epe", "ovl psnr", "ovl ssim", "ovl ie"
    );
    let rows = report
        .levels
        .iter()
        .map(|(l, r)| (l.name(), r))
        .chain(std::iter::once(("all", &report.overall)));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>8.3} {:>7.4} {:>7.3} {:>7.3} {:>9.3} {:>9.4} {:>8.3}",
            name, r.count, r.model.psnr, r.model.ssim, r.model.ie, r.epe, r.overlay.psnr, r.overlay.ssim, r.overlay.ie
        );
    }
    s
}

fn batched(frame: Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = frame.shape().to_vec();
    frame.reshape([vec![1], shape].concat())
}

fn unbatched(frame: Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = frame.shape()[1..].to_vec();
    frame.reshape(shape)
}

/// Writes `factor − 1` frames and returns their paths in temporal order.
pub fn cmd_interpolate(run: &RunConfig, checkpoint: &Path, f0: &Path, f1: &Path, factor: usize) -> Result<Vec<PathBuf>> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::Usage(format!("interpolation factor must be 2, 4 or 8, got {factor}")));
    }
    let a = read_frame(f0)?;
    let b = read_frame(f1)?;
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "frames differ in size: {:?} vs {:?}",
            &a.shape()[1..],
            &b.shape()[1..]
        )));
    }
    let (model, store, _) = load_model(checkpoint)?;
    let frames = model.interpolate_recursive(&store, &batched(a)?, &batched(b)?, factor)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (k, frame) in frames.into_iter().enumerate() {
        let path = run.out_dir.join(format!("frame_{:03}.png", k + 1));
        write_frame(&path, &unbatched(frame)?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub const ERF_BLOCKS: [ErfBlock; 3] = [
    ErfBlock::Conv3x3,
    ErfBlock::Attention(AttentionKind::Window),
    ErfBlock::Attention(AttentionKind::CrossScale),
];

/// Writes `erf_<block>.png` per block and `erf_area.csv`; returns the CSV.
pub fn cmd_erf(run: &RunConfig, cfg: &ErfConfig) -> Result<String> {
    if !cfg.window.is_multiple_of(4) || !cfg.size.is_multiple_of(cfg.window) {
        return Err(Error::Config(format!(
            "erf window {} must be a multiple of 4 dividing the size {}",
            cfg.window, cfg.size
        )));
    }
    let mut csv = String::from("block,window,threshold,area\n");
    for block in ERF_BLOCKS {
        let map = compute_erf(block, cfg)?;
        write_gray_png(&run.out_dir.join(format!("erf_{}.png", block.name())), &map.map.cast())?;
        let _ = writeln!(csv, "{},{},{},{}", block.name(), cfg.window, DEFAULT_THRESHOLD, map.area(DEFAULT_THRESHOLD));
    }
    write_text(&run.out_dir.join("erf_area.csv"), &csv)?;
    Ok(csv)
}

/// One bench measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub window: usize,
    pub size: usize,
    pub median_ms: f64,
    pub measured_flops: u64,
    pub analytic_flops: u64,
}

/// Matrix-product flops counted during one attention forward pass, and the
/// analytic count, for a `[1, C, size, size]` map.
pub fn attention_flops(kind: AttentionKind, dim: usize, heads: usize, window: usize, size: usize) -> Result<(u64, u64)> {
    let (attn, store, x) = bench_setup(kind, dim, heads, window, size, 0)?;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let before = g.matmul_flops();
    attn.forward_map(&mut g, &store, xv)?;
    let measured = g.matmul_flops() - before;
    Ok((measured, attn.flops_per_pixel() * (size * size) as u64))
}

fn bench_setup(
    kind: AttentionKind,
    dim: usize,
    heads: usize,
    window: usize,
    size: usize,
    seed: u64,
) -> Result<(Attention, ParamStore<f32>, Tensor<f32>)> {
    if window == 0 || !window.is_multiple_of(4) {
        return Err(Error::Config(format!("window size {window} must be a positive multiple of 4")));
    }
    if !size.is_multiple_of(window) {
        return Err(Error::Config(format!("bench size {size} is not a multiple of window {window}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut Builder::new(&mut store, &mut rng), kind, dim, heads, window)?;
    let x = crate::tensor::gradcheck::random_tensor(&[1, dim, size, size], -1.0, 1.0, &mut rng).cast();
    Ok((attn, store, x))
}

pub fn cmd_bench(run: &RunConfig, windows: &[usize], size: usize, runs: usize) -> Result<Vec<BenchRow>> {
    let m = &run.model;
    let kind = m.attention;
    let mut rows = Vec::with_capacity(windows.len());
    for &window in windows {
        let (attn, store, x) = bench_setup(kind, m.width, m.heads, window, size, run.seed)?;
        let (measured, analytic) = attention_flops(kind, m.width, m.heads, window, size)?;
        let mut times = Vec::with_capacity(runs.max(1));
        for _ in 0..runs.max(1) {
            let start = Instant::now();
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            attn.forward_map(&mut g, &store, xv)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            kind,
            window,
            size,
            median_ms: times[times.len() / 2],
            measured_flops: measured,
            analytic_flops: analytic,
        });
    }
    write_text(&run.out_dir.join("bench.csv"), &bench_csv(&rows))?;
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("attention,window,size,median_ms,measured_flops,analytic_flops\n");
    for r in rows {
        let kind = match r.kind {
            AttentionKind::Window => "wa",
            AttentionKind::CrossScale => "cswa",
        };
        let _ = writeln!(
            s,
            "{kind},{},{},{:.3},{},{}",
            r.window, r.size, r.median_ms, r.measured_flops, r.analytic_flops
        );
    }
    s
}
