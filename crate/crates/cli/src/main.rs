//! `giant` command-line entry point.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use giant::agent::backend::{RandomRegionFactory, RandomRegionParams};
use giant::agent::remote::RemoteBackend;
use giant::agent::tool::HttpScorer;
use giant::agent::{EpisodeError, LmmBackend, Scorer, SharedBackend};
use giant::bench::report::write_report;
use giant::bench::runners::{score_predictions, write_sweep_csv, PATCH_COUNT, PATCH_SIZE};
use giant::bench::{
    iteration_sweep, load_manifest, resolution_sweep, run_baseline_patches, run_baseline_thumbnail, run_giant, BenchContext,
    BenchError, RunResult, SweepRow,
};
use giant::par::Execution;
use giant::pyramid::{build_pyramid, open_slide, BuildOptions, Region, TileFormat, DEFAULT_TILE_SIZE};
use giant::synth::generate::{generate_suite, DEFAULT_SLIDE_PX};
use giant::synth::{OracleBackend, SynthError};
use giant::tissue::{self, SegmentParams};
use giant::viewport::{overlay_axis_guides, render_crop, OverlaySpec, DEFAULT_BIAS, DEFAULT_LONG_SIDE};

use config::{invalid, BackendKind, Invalid, Mode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "giant", version, about = "Navigate gigapixel slide pyramids with a multimodal agent")]
struct Cli {
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Base seed for generation, sampling and bootstrap
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of tables
    #[arg(long, global = true)]
    json: bool,
    /// Progress messages on stderr
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a tiled pyramid from a flat PNG or JPEG
    Ingest {
        src: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
        tile_size: u32,
        #[arg(long, default_value = "png")]
        format: TileFormat,
        /// Defaults to the output directory name
        #[arg(long)]
        slide_id: Option<String>,
        /// Microns per level-0 pixel
        #[arg(long)]
        mpp: Option<f64>,
    },
    /// Generate the synthetic glyph suite
    Synth {
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Level-0 side of every slide
        #[arg(long, default_value_t = DEFAULT_SLIDE_PX)]
        size: u32,
    },
    /// Whole-slide thumbnail, optionally with coordinate guides
    Thumb {
        slide: PathBuf,
        #[arg(long, default_value_t = 1024)]
        long_side: u32,
        #[arg(long)]
        guides: bool,
        #[arg(short, long, default_value = "thumb.png")]
        out: PathBuf,
    },
    /// Render one level-0 region the way the agent sees it
    Crop {
        slide: PathBuf,
        /// x,y,w,h in level-0 pixels
        #[arg(long)]
        bbox: String,
        #[arg(long, default_value_t = DEFAULT_LONG_SIDE)]
        long_side: u32,
        #[arg(long, default_value_t = DEFAULT_BIAS)]
        bias: f64,
        #[arg(short, long, default_value = "crop.png")]
        out: PathBuf,
    },
    /// Tissue mask as a 0/255 PNG
    Segment {
        slide: PathBuf,
        #[arg(short, long, default_value = "mask.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        work_long_side: u32,
    },
    /// Benchmark runs, sweeps and scoring
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Static HTML report for a run directory
    Report {
        dir: PathBuf,
        /// Defaults to `<dir>/report`
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Backend {
    /// `oracle`, `remote`, or a TOML run config
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Iteration limit (overrides the config)
    #[arg(long = "T", alias = "max-steps")]
    t: Option<u32>,
    /// Episodes per question, majority voted (overrides the config)
    #[arg(long)]
    vote: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Run one mode over a dataset manifest
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Giant)]
        mode: Mode,
        #[command(flatten)]
        backend: Backend,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing per-step PNGs
        #[arg(long)]
        no_images: bool,
    },
    /// Sweep the iteration limit or the thumbnail size
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["T", "thumbnail-side"])]
        param: String,
        /// Comma separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u32>,
        #[command(flatten)]
        backend: Backend,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an `id,prediction` CSV against a dataset
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write results.jsonl and metrics.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    workers: usize,
    seed: Option<u64>,
    json: bool,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("giant: {}", msg.as_ref());
        }
    }

    fn bench(&self, cfg: &RunConfig, out: Option<PathBuf>, save_images: bool) -> Result<BenchContext> {
        Ok(BenchContext {
            exec: Execution::default(),
            workers: cfg.workers,
            out_dir: out,
            seed: cfg.agent.seed,
            trace_extra: serde_json::to_value(cfg)?,
            save_images,
            ..BenchContext::default()
        })
    }
}

fn parse_bbox(s: &str) -> Result<Region> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Option<Vec<i64>> = parts.iter().map(|p| p.parse().ok()).collect();
    match nums.as_deref() {
        Some(&[x, y, w, h]) if w > 0 && h > 0 => Ok(Region::new(x, y, w, h)),
        Some(&[_, _, _, _]) => Err(invalid(format!("bbox {s:?}: width and height must be positive"))),
        _ => Err(invalid(format!("bbox {s:?}: expected four integers x,y,w,h"))),
    }
}

fn run_config(ctx: &Ctx, b: &Backend, mode: Mode, dataset: &Path, out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_backend_arg(&b.backend)?;
    if let Some(t) = b.t {
        cfg.agent.max_steps = t;
    }
    if let Some(v) = b.vote {
        cfg.agent.vote_runs = v;
    }
    if let Some(s) = ctx.seed {
        cfg.agent.seed = s;
    }
    if ctx.workers > 0 {
        cfg.workers = ctx.workers;
    }
    cfg.mode = mode;
    cfg.dataset = Some(dataset.to_path_buf());
    cfg.out_dir = Some(out.to_path_buf());
    cfg.validate()?;
    Ok(cfg)
}

fn make_backend(cfg: &RunConfig) -> Result<Arc<dyn LmmBackend>> {
    Ok(match cfg.backend {
        BackendKind::Oracle => Arc::new(OracleBackend::default()),
        BackendKind::Remote => {
            let backend = RemoteBackend::new(cfg.remote.clone());
            if std::env::var(&cfg.remote.api_key_env).map_or(true, |k| k.is_empty()) {
                return Err(invalid(format!("remote backend needs ${} to be set", cfg.remote.api_key_env)));
            }
            Arc::new(backend)
        }
    })
}

fn make_scorer(cfg: &RunConfig) -> Option<HttpScorer> {
    let endpoint = cfg.scorer_endpoint.as_ref().filter(|_| cfg.agent.tool_enabled)?;
    Some(HttpScorer::new(endpoint.clone(), Duration::from_secs(cfg.remote.timeout_secs.max(1))))
}

fn print_run(ctx: &Ctx, run: &RunResult) -> Result<()> {
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(&run.metric)?);
        return Ok(());
    }
    println!("{:<20} {:<10} {:<10} {:>5}  note", "question", "gold", "prediction", "crops");
    for q in &run.questions {
        let crops = q.crops.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
        let note = match (&q.error, q.resumed) {
            (Some(e), _) => e.clone(),
            (None, true) => "resumed".into(),
            _ => String::new(),
        };
        println!("{:<20} {:<10} {:<10} {:>5}  {}", q.id, q.gold, q.prediction, crops, note);
    }
    let m = &run.metric;
    println!(
        "{} {}: {:.4} +/- {:.4} (n={}, {} bootstrap replicates, seed {})",
        run.mode,
        serde_json::to_value(m.metric)?.as_str().unwrap_or("?"),
        m.value,
        m.bootstrap_std,
        m.n_questions,
        m.bootstrap_replicates,
        m.seed
    );
    Ok(())
}

fn print_sweep(ctx: &Ctx, rows: &[SweepRow]) -> Result<()> {
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(rows)?);
        return Ok(());
    }
    println!("{:<20} {:>6} {:>8} {:>8} {:>4}", "parameter", "value", "score", "std", "n");
    for r in rows {
        println!("{:<20} {:>6} {:>8.4} {:>8.4} {:>4}", r.parameter, r.value, r.score, r.bootstrap_std, r.n_questions);
    }
    Ok(())
}

fn bench_run(ctx: &Ctx, dataset: &Path, mode: Mode, b: &Backend, out: &Path, no_images: bool) -> Result<()> {
    let cfg = run_config(ctx, b, mode, dataset, out)?;
    let questions = load_manifest(dataset)?;
    if questions.is_empty() {
        return Err(invalid(format!("{}: no questions", dataset.display())));
    }
    let backend = make_backend(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)
        .with_context(|| format!("writing {}", out.join("config.json").display()))?;
    let bctx = ctx.bench(&cfg, Some(out.to_path_buf()), !no_images)?;
    ctx.log(format!("{} questions, mode {}, backend {}", questions.len(), mode.as_str(), backend.name()));
    let scorer = make_scorer(&cfg);
    let tool = scorer.as_ref().map(|s| s as &dyn Scorer);
    let run = match mode {
        Mode::Giant => run_giant(&questions, &SharedBackend(backend), tool, &cfg.agent, &bctx)?,
        Mode::RandomRegion => {
            let factory = RandomRegionFactory {
                inner: backend,
                segment: SegmentParams::default(),
                params: RandomRegionParams::default(),
            };
            run_giant(&questions, &factory, tool, &cfg.agent, &bctx)?
        }
        Mode::Thumbnail => run_baseline_thumbnail(&questions, backend.as_ref(), cfg.agent.thumbnail_long_side, &bctx)?,
        Mode::Patch => run_baseline_patches(&questions, backend.as_ref(), PATCH_COUNT, PATCH_SIZE, &bctx)?,
    };
    print_run(ctx, &run)
}

fn bench_sweep(ctx: &Ctx, dataset: &Path, param: &str, values: &[u32], b: &Backend, out: &Path) -> Result<()> {
    let mode = if param == "T" { Mode::Giant } else { Mode::Thumbnail };
    let cfg = run_config(ctx, b, mode, dataset, out)?;
    let questions = load_manifest(dataset)?;
    let backend = make_backend(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let bctx = ctx.bench(&cfg, Some(out.to_path_buf()), true)?;
    let rows = if param == "T" {
        if values.contains(&0) {
            return Err(invalid("iteration limits must be at least 1"));
        }
        let scorer = make_scorer(&cfg);
        iteration_sweep(
            &questions,
            &SharedBackend(backend),
            scorer.as_ref().map(|s| s as &dyn Scorer),
            &cfg.agent,
            values,
            &bctx,
        )?
    } else {
        resolution_sweep(&questions, backend.as_ref(), values, &bctx)?
    };
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    print_sweep(ctx, &rows)
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        workers: cli.workers,
        seed: cli.seed,
        json: cli.json,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Ingest {
            src,
            out,
            tile_size,
            format,
            slide_id,
            mpp,
        } => {
            let img = image::open(&src)
                .with_context(|| format!("reading {}", src.display()))?
                .to_rgb8();
            let slide_id = slide_id
                .or_else(|| out.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "slide".into());
            let opts = BuildOptions {
                slide_id,
                tile_size_px: tile_size,
                tile_format: format,
                mpp,
                ..BuildOptions::default()
            };
            let manifest = build_pyramid(&img, &opts, &out)?;
            if ctx.json {
                println!("{}", serde_json::to_string_pretty(&manifest)?);
            } else {
                for l in &manifest.levels {
                    println!("level {}: {}x{} (downsample {})", l.index, l.width_px, l.height_px, l.downsample);
                }
            }
        }
        Command::Synth { suite, out, size } => {
            if suite != "default" {
                return Err(invalid(format!("unknown suite {suite:?} (only \"default\")")));
            }
            let seed = ctx.seed.unwrap_or(0);
            ctx.log(format!("generating {suite} suite at {size} px, seed {seed}"));
            let summary = Execution::default().with_workers(ctx.workers, || generate_suite(&out, seed, size, Execution::default()))?;
            if ctx.json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                println!("{} slides under {}", summary.slides, out.join("slides").display());
                println!("dataset: {}", summary.dataset.display());
                println!("deep subset: {}", summary.deep_dataset.display());
            }
        }
        Command::Thumb {
            slide,
            long_side,
            guides,
            out,
        } => {
            let h = open_slide(&slide)?;
            let mut img = h.thumbnail(long_side)?;
            if guides {
                img = overlay_axis_guides(&img, h.manifest(), &OverlaySpec::default())?;
            }
            img.save(&out).with_context(|| format!("writing {}", out.display()))?;
            ctx.log(format!("{}x{} -> {}", img.width(), img.height(), out.display()));
        }
        Command::Crop {
            slide,
            bbox,
            long_side,
            bias,
            out,
        } => {
            let region = parse_bbox(&bbox)?;
            if long_side == 0 || !(bias > 0.0 && bias <= 1.0) {
                return Err(invalid(format!("long side {long_side} and bias {bias}: need S >= 1 and 0 < bias <= 1")));
            }
            let h = open_slide(&slide)?;
            let crop = render_crop(&h, &region, long_side, bias)?;
            crop.pixels.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if ctx.json {
                println!("{}", serde_json::to_string_pretty(&crop.geometry)?);
            } else {
                let g = &crop.geometry;
                println!(
                    "level {} -> {}x{} ({:?}), sha256 {}",
                    g.chosen_level, g.width, g.height, g.resample_kind, g.pixel_sha256
                );
            }
        }
        Command::Segment {
            slide,
            out,
            work_long_side,
        } => {
            if work_long_side < 16 {
                return Err(invalid("work long side must be at least 16"));
            }
            let h = open_slide(&slide)?;
            let params = SegmentParams {
                work_long_side,
                ..SegmentParams::default()
            };
            let mask = tissue::segment(&h, &params)?;
            mask.to_image().save(&out).with_context(|| format!("writing {}", out.display()))?;
            let (w, hh) = h.manifest().dimensions();
            let frac = tissue::tissue_fraction(&mask, &Region::new(0, 0, w as i64, hh as i64));
            if ctx.json {
                println!("{}", serde_json::json!({"mask": out, "tissue_fraction": frac}));
            } else {
                println!("tissue fraction {frac:.4} -> {}", out.display());
            }
        }
        Command::Bench { command } => match command {
            BenchCommand::Run {
                dataset,
                mode,
                backend,
                out,
                no_images,
            } => bench_run(&ctx, &dataset, mode, &backend, &out, no_images)?,
            BenchCommand::Sweep {
                dataset,
                param,
                values,
                backend,
                out,
            } => bench_sweep(&ctx, &dataset, &param, &values, &backend, &out)?,
            BenchCommand::Score { pred, dataset, out } => {
                let questions = load_manifest(&dataset)?;
                let bctx = BenchContext {
                    seed: ctx.seed.unwrap_or(0),
                    out_dir: out,
                    ..BenchContext::default()
                };
                let run = score_predictions(&pred, &questions, &bctx)?;
                print_run(&ctx, &run)?;
            }
        },
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            let pages = write_report(&dir, &out)?;
            if pages == 0 {
                return Err(invalid(format!("{}: no traces found", dir.display())));
            }
            println!("{pages} trajectory pages -> {}", out.join("index.html").display());
        }
    }
    Ok(())
}

/// True for errors caused by bad input rather than a failure while running.
fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(
                e.downcast_ref::<BenchError>(),
                Some(BenchError::Config(_) | BenchError::InvalidRecord { .. } | BenchError::Parse { .. })
            )
            || matches!(e.downcast_ref::<EpisodeError>(), Some(EpisodeError::Config(_)))
            || matches!(e.downcast_ref::<SynthError>(), Some(SynthError::InvalidSpec(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors often embed their source already
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
