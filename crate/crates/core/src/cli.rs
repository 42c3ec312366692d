//! The `seistile` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic_volume, load_masks, load_volume, merge_classes, preprocess_rescale, save_masks, save_volume,
    split_blocks, tile_volume, Split, TileSet,
};
use crate::error::{Error, Result};
use crate::eval::{crop, evaluate_testset, export_mask_pgm, predict_slice_mask, SliceMask};
use crate::topology::{count_operations, count_parameters, parse_topology, preset, OpMode, TopologySpec, PRESET_NAMES};
use crate::train::{load_checkpoint, save_checkpoint, train, TrainStatus, Validation};

#[derive(Parser, Debug)]
#[command(
    name = "seistile",
    version,
    about = "Seismic facies segmentation with residual encoder-decoder networks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration.
    Config {
        /// Print the built-in defaults instead.
        #[arg(long)]
        defaults: bool,
    },
    /// Write a synthetic layered volume and its masks.
    Synth,
    /// Rescale, merge, split and tile into the prepared directory.
    Prepare,
    /// Train and keep the checkpoint with the best validation mIOU.
    Train,
    /// Score a checkpoint on the test slices.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and operation counts of topologies.
    Count {
        /// Preset name; repeatable. All presets when neither this nor
        /// `--topology` is given.
        #[arg(long)]
        preset: Vec<String>,
        /// Topology DSL file; repeatable.
        #[arg(long)]
        topology: Vec<PathBuf>,
        /// Extra input size `HxW` to report.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value = "mac")]
        op_mode: OpMode,
    },
    /// Write predicted (and ground-truth) masks of slices as PGM.
    ExportMasks {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Slice indices; the test slices when omitted.
        #[arg(long, value_delimiter = ',')]
        slices: Vec<usize>,
        /// Output directory; `<run_dir>/masks` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("input size `{s}` is not HxW"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let (h, w) = (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn configure_threads() {
    if let Some(n) = std::env::var("SEISTILE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::debug!("thread pool already configured: {e}");
            }
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Config { defaults: true } = cli.command {
        print!("{}", RunConfig::default().to_json());
        return Ok(());
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    eprintln!("config digest sha256:{}", cfg.digest());
    match cli.command {
        Command::Config { .. } => {
            print!("{}", cfg.to_json());
            Ok(())
        }
        Command::Synth => synth(&cfg),
        Command::Prepare => prepare(&cfg),
        Command::Train => train_cmd(&cfg),
        Command::Eval { checkpoint } => eval_cmd(&cfg, checkpoint.as_deref()),
        Command::Count {
            preset: names,
            topology,
            input,
            op_mode,
        } => {
            let extra = input.as_deref().map(parse_hw).transpose()?;
            let mut specs = Vec::new();
            for name in &names {
                specs.push(preset(name)?);
            }
            for path in &topology {
                let text =
                    fs::read_to_string(path).map_err(|e| Error::config(format!("topology {}: {e}", path.display())))?;
                specs.push(parse_topology(&text)?);
            }
            if specs.is_empty() {
                specs = PRESET_NAMES.iter().map(|n| preset(n)).collect::<Result<_>>()?;
            }
            print!("{}", count_report(&specs, extra, op_mode));
            Ok(())
        }
        Command::ExportMasks {
            checkpoint,
            slices,
            out,
        } => export_masks(&cfg, checkpoint.as_deref(), &slices, out),
    }
}

/// CSV: `name,parameters,ops_80x120,ops_128x128,op_mode[,ops_HxW]`.
pub fn count_report(specs: &[TopologySpec], extra: Option<(usize, usize)>, mode: OpMode) -> String {
    let mut out = String::from("name,parameters,ops_80x120,ops_128x128,op_mode");
    if let Some((h, w)) = extra {
        write!(out, ",ops_{h}x{w}").expect("string write");
    }
    out.push('\n');
    for spec in specs {
        write!(
            out,
            "{},{},{},{},{}",
            spec.name,
            count_parameters(spec),
            count_operations(spec, 80, 120, mode),
            count_operations(spec, 128, 128, mode),
            mode.as_str()
        )
        .expect("string write");
        if let Some((h, w)) = extra {
            write!(out, ",{}", count_operations(spec, h, w, mode)).expect("string write");
        }
        out.push('\n');
    }
    out
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let (volume, masks) = generate_synthetic_volume(&cfg.synth, cfg.seed)?;
    save_volume(&cfg.data.volume, &volume)?;
    save_masks(&cfg.data.masks, &masks)?;
    eprintln!(
        "wrote {:?} volume to {} and masks to {}",
        volume.dims(),
        cfg.data.volume.display(),
        cfg.data.masks.display()
    );
    Ok(())
}

fn prepared(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.data.prepared_dir.join(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_split(cfg: &RunConfig) -> Result<Split> {
    let path = prepared(cfg, "split.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    let volume = load_volume(&cfg.data.volume)?;
    let mut masks = load_masks(&cfg.data.masks)?;
    if volume.dims() != masks.dims() {
        return Err(Error::Corruption {
            path: cfg.data.masks.clone(),
            message: format!("masks {:?} do not match volume {:?}", masks.dims(), volume.dims()),
        });
    }
    if cfg.data.merge_classes {
        masks = merge_classes(&masks)?;
    }
    let volume = preprocess_rescale(&volume, cfg.data.clip_lo_pct, cfg.data.clip_hi_pct)?;
    let split = split_blocks(volume.slices(), &cfg.split, cfg.seed)?;
    let train_tiles = tile_volume(&volume, &masks, &split.train, &cfg.tiles)?;
    let val_tiles = tile_volume(&volume, &masks, &split.val, &cfg.tiles)?;
    save_volume(&prepared(cfg, "volume.segv"), &volume)?;
    save_masks(&prepared(cfg, "masks.segv"), &masks)?;
    write_json(&prepared(cfg, "split.json"), &split)?;
    train_tiles.save(&cfg.data.prepared_dir, "train")?;
    val_tiles.save(&cfg.data.prepared_dir, "val")?;
    eprintln!(
        "split: {} train, {} val, {} test, {} unused slices; {} train tiles, {} val tiles",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.unused.len(),
        train_tiles.len(),
        val_tiles.len()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let volume = load_volume(&prepared(cfg, "volume.segv"))?;
    let masks = load_masks(&prepared(cfg, "masks.segv"))?;
    let split = read_split(cfg)?;
    let tiles = TileSet::load(&cfg.data.prepared_dir, "train")?;
    let model = cfg.model.build::<f32>(cfg.seed)?;
    let val = Validation {
        volume: &volume,
        masks: &masks,
        slices: &split.val,
        tile_h: cfg.eval.tile_h,
        tile_w: cfg.eval.tile_w,
    };
    let outcome = train(model, &tiles, &val, &cfg.train, &cfg.optimizer, cfg.seed)?;
    let run_dir = &cfg.data.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join("train_log.csv");
    fs::write(&log_path, outcome.log_csv()).map_err(|e| Error::io(&log_path, e))?;
    if let Some(best) = &outcome.best {
        save_checkpoint(&run_dir.join("best.ckpt"), best)?;
        eprintln!("best epoch {} with validation mIOU {:.4}", best.epoch, best.val_miou);
    }
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { epoch, reason } => Err(Error::Divergence(format!(
            "epoch {epoch}: {reason}; best checkpoint so far preserved"
        ))),
    }
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.data.run_dir.join("best.ckpt"))
}

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let volume = load_volume(&prepared(cfg, "volume.segv"))?;
    let masks = load_masks(&prepared(cfg, "masks.segv"))?;
    let split = read_split(cfg)?;
    let report = evaluate_testset(
        &ckpt.model,
        &volume,
        &masks,
        &split.test,
        cfg.eval.tile_h,
        cfg.eval.tile_w,
    )?;
    report.write(
        &cfg.data.run_dir.join("report.json"),
        &cfg.data.run_dir.join("report.csv"),
    )?;
    println!("mmiou,{:.6}", report.mmiou);
    Ok(())
}

fn export_masks(cfg: &RunConfig, checkpoint: Option<&Path>, slices: &[usize], out: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let volume = load_volume(&prepared(cfg, "volume.segv"))?;
    let masks = load_masks(&prepared(cfg, "masks.segv"))?;
    let slices = if slices.is_empty() {
        read_split(cfg)?.test
    } else {
        slices.to_vec()
    };
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("masks"));
    let (h, w, nc) = (volume.height(), volume.width(), masks.num_classes());
    for &s in &slices {
        if s >= volume.slices() {
            return Err(Error::config(format!("slice {s} out of range")));
        }
        let pred = predict_slice_mask(&ckpt.model, volume.slice(s), h, w, cfg.eval.tile_h, cfg.eval.tile_w)?;
        let gt = SliceMask {
            height: pred.height,
            width: pred.width,
            labels: crop(masks.slice(s), w, pred.height, pred.width),
        };
        export_mask_pgm(&out.join(format!("slice_{s:04}_pred.pgm")), &pred, nc)?;
        export_mask_pgm(&out.join(format!("slice_{s:04}_gt.pgm")), &gt, nc)?;
    }
    eprintln!("wrote {} mask pairs to {}", slices.len(), out.display());
    Ok(())
}
