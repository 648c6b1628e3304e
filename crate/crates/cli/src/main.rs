use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lattice_lstm::cell::Variant;
use lattice_lstm::checkpoint::Checkpoint;
use lattice_lstm::eval::evaluate;
use lattice_lstm::gradcheck::{gradcheck, GradcheckConfig};
use lattice_lstm::linear_rnn::theory_check;
use lattice_lstm::model::Modality;
use lattice_lstm::par::Exec;
use lattice_lstm::sampling::SamplingConfig;
use lattice_lstm::synth::{generate, resolve_classes, Dataset, Dims, GenerateConfig, Split, SplitPlan, Suite};
use lattice_lstm::train::{train_with, write_metrics_csv, StopReason, TrainConfig};
use lattice_lstm::viz::{kernel_grid, location_kernel, parse_locations, saliency};

#[derive(Parser)]
#[command(name = "l2stm", version, about = "Lattice-LSTM two-stream video classifier on synthetic motion data")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        /// Suite name (nonstationary, stationary, mixed) or comma-separated class names.
        #[arg(long, default_value = "mixed")]
        classes: String,
        /// Videos per class, split 70/10/20.
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Exact per-class split as train,val,test; overrides --count.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "16x16x64")]
        dims: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        share_gates: Option<bool>,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with multi-stride score accumulation.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1,2,4")]
        strides: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of the full backward pass in 64-bit.
    Gradcheck {
        #[arg(long, default_value = "l2stm")]
        variant: Variant,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        /// Recurrent map extent.
        #[arg(long, default_value_t = 4)]
        map: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        no_norm: bool,
        #[arg(long)]
        separate_gates: bool,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export input-gradient saliency maps for one video as PGM images.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video_idx: usize,
        /// Target class; defaults to the video's label.
        #[arg(long = "class")]
        class: Option<usize>,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Export hidden-to-candidate kernels at map locations as PGM grids.
    ExportKernels {
        #[arg(long)]
        ckpt: PathBuf,
        /// Locations as i,j;i,j;...
        #[arg(long)]
        locations: String,
        #[arg(long, default_value = "rgb")]
        stream: String,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare iterative and closed-form linear RNN unrolling.
    TheoryCheck {
        #[arg(long, default_value_t = 8)]
        tau_max: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exec(threads: Option<usize>) -> Result<Exec> {
    match threads {
        Some(0) => bail!("--threads must be positive"),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::default()),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad {what} '{p}'")))
        .collect()
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn episode_shape(ck: &Checkpoint<f32>) -> SamplingConfig {
    SamplingConfig {
        n: ck.meta.steps,
        l_t: ck.meta.clip_frames,
        crop_rows: ck.config.input_rows,
        crop_cols: ck.config.input_cols,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = exec(cli.threads)?;
    match cli.command {
        Command::Gen {
            classes,
            count,
            split,
            dims,
            seed,
            out,
        } => {
            let specs = match classes.parse::<Suite>() {
                Ok(s) => s.classes(),
                Err(_) => resolve_classes(&classes.split(',').map(str::trim).collect::<Vec<_>>())?,
            };
            let split = match split {
                Some(s) => match parse_list(&s, "split count")?[..] {
                    [train, val, test] => SplitPlan::Counts { train, val, test },
                    _ => bail!("--split must be train,val,test"),
                },
                None => SplitPlan::Fractions { count },
            };
            let mut cfg = GenerateConfig::new(specs, split, seed);
            cfg.dims = dims.parse::<Dims>()?;
            let ds = generate(&cfg, exec)?;
            ds.write(&out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} videos of {} classes ({}x{}x{}) to {}",
                ds.videos.len(),
                ds.num_classes(),
                ds.height,
                ds.width,
                ds.frames,
                out.display()
            );
        }
        Command::Train {
            data,
            variant,
            share_gates,
            config,
            overrides,
            seed,
            out,
        } => {
            let ds = load_data(&data)?;
            let mut cfg = TrainConfig::default();
            if let Some(path) = &config {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply_text(&text)?;
            }
            cfg.apply_text(&overrides.join("\n"))?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = share_gates {
                cfg.share_gates = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let outcome = train_with(&ds, &cfg, exec, |row| {
                if let Some(v) = row.val_accuracy {
                    log::info!(
                        "iter {} loss {:.4} train {:.3} val {:.3} lr {:e} {}",
                        row.iteration,
                        row.loss,
                        row.train_accuracy,
                        v,
                        row.lr,
                        row.phase
                    );
                }
            })?;
            let mut csv = Vec::new();
            write_metrics_csv(&outcome.metrics, &mut csv)?;
            fs::write(out.join("metrics.csv"), csv)?;
            let ckpt = out.join("checkpoint.llst");
            outcome.checkpoint.save(&ckpt)?;
            println!(
                "saved {} (iteration {}, val accuracy {})",
                ckpt.display(),
                outcome.checkpoint.meta.iteration,
                outcome
                    .checkpoint
                    .meta
                    .val_accuracy
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
            if let StopReason::NonFinite(msg) = &outcome.stop {
                eprintln!("training aborted: {msg}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval {
            ckpt,
            data,
            strides,
            split,
            report,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let ds = load_data(&data)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => bail!("unknown split '{other}'"),
            };
            let strides = parse_list(&strides, "stride")?;
            let rep = evaluate(&ck.model, &ds, split, &episode_shape(&ck), &strides, exec)?;
            println!("{} accuracy {:.4} over {} videos", rep.variant, rep.overall_accuracy, rep.videos.len());
            for (name, acc) in rep.class_names.iter().zip(&rep.per_class_accuracy) {
                println!("  {name:12} {acc:.4}");
            }
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            }
        }
        Command::Gradcheck {
            variant,
            seed,
            channels,
            map,
            steps,
            no_norm,
            separate_gates,
            report,
        } => {
            let cfg = GradcheckConfig {
                variant,
                seed,
                channels,
                map_extent: map,
                steps,
                share_gates: !separate_gates,
                norm: !no_norm,
                ..Default::default()
            };
            let rep = gradcheck(&cfg, exec)?;
            for g in &rep.groups {
                println!(
                    "{:5} {:40} n={:<5} rel {:.3e}",
                    if g.passed { "ok" } else { "FAIL" },
                    g.name,
                    g.elements,
                    g.worst_relative_error
                );
            }
            println!(
                "{} groups, worst {:.3e}, tolerance {:.0e}: {}",
                rep.groups.len(),
                rep.worst(),
                rep.tolerance,
                if rep.passed() { "passed" } else { "FAILED" }
            );
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            }
            if !rep.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Saliency {
            ckpt,
            data,
            video_idx,
            class,
            scale,
            out_dir,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let ds = load_data(&data)?;
            let video = ds
                .videos
                .get(video_idx)
                .with_context(|| format!("video {video_idx} out of range ({} videos)", ds.videos.len()))?;
            let target = class.unwrap_or(video.label);
            let sal = saliency(&ck.model.cast::<f64>(), &ds, video_idx, target, &episode_shape(&ck))?;
            fs::create_dir_all(&out_dir)?;
            for (img, t) in sal.images(scale).iter().zip(&sal.frames) {
                img.save(&out_dir.join(format!("frame_{t:03}.pgm")))?;
            }
            let ratio = sal.sprite_ratio(&ds, video_idx);
            println!(
                "wrote {} maps for class {target} to {}; sprite/background ratio {}",
                sal.maps.len(),
                out_dir.display(),
                ratio.map_or("n/a".to_string(), |r| format!("{r:.3}"))
            );
        }
        Command::ExportKernels {
            ckpt,
            locations,
            stream,
            scale,
            out_dir,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let stream = match stream.as_str() {
                "rgb" => Modality::Rgb,
                "flow" => Modality::Flow,
                other => bail!("unknown stream '{other}'"),
            };
            fs::create_dir_all(&out_dir)?;
            let locs = parse_locations(&locations)?;
            for &(i, j) in &locs {
                let k = location_kernel(&ck.model, stream, i, j)?;
                kernel_grid(&k, scale).save(&out_dir.join(format!("{stream}_{i}_{j}.pgm")))?;
            }
            println!("wrote {} kernel grids to {}", locs.len(), out_dir.display());
        }
        Command::TheoryCheck { tau_max, dim, seed } => {
            let gaps = theory_check(dim, tau_max, seed)?;
            let mut ok = true;
            for (tau, gap) in gaps {
                let pass = gap <= 1e-9;
                ok &= pass;
                println!("tau {tau:2}  relative gap {gap:.3e}  {}", if pass { "ok" } else { "FAIL" });
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
