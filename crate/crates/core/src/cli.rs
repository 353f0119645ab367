//! Command-line front end: `floeberg gen|train|eval|predict|render`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::evaluate;
use crate::scene_io::{load_scene, Scene};
use crate::synthgen::{gen_dataset, read_index, SynthConfig};
pub use crate::trainer::NO_CLASS;
use crate::trainer::{load_checkpoint, save_checkpoint, Mode, TrainConfig, Trainer};
use crate::NUM_CLASSES;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Map colours: open water, young ice, first-year ice, multiyear ice.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [[10, 30, 120], [110, 190, 255], [255, 215, 0], [200, 20, 20]];
pub const LAND_RGB: [u8; 3] = [255, 255, 255];

#[derive(Debug, Parser)]
#[command(name = "floeberg", version, about = "Sea-ice-type segmentation from polygon labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with hidden truth.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus history CSVs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the per-pixel class plane of one scene.
    Predict(PredictArgs),
    /// Render a class plane as a binary PPM.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value = "separable-v1")]
    pub preset: String,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (with index.txt or scene subdirectories).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub t0: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta_min: f64,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
    #[arg(long, default_value = "weak", value_parser = ["weak", "baseline"])]
    pub mode: String,
    #[arg(long, default_value_t = 2)]
    pub val_scenes: usize,
    /// Encoder filter counts, e.g. `16,32,64,64`.
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from a checkpoint; `--epochs` sets the new total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory for `pred.u8` and `pred.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Class plane, one byte per pixel (0–3, 255 = land).
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the `pred.json` next to the input.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlaneShape {
    height: usize,
    width: usize,
}

/// Binary PPM (P6) of a class plane; 255 renders as land.
pub fn render_ppm(classes: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if classes.len() != height * width {
        return Err(Error::format(format!(
            "class plane has {} bytes, expected {height}x{width}",
            classes.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in classes {
        let rgb = match c {
            NO_CLASS => LAND_RGB,
            c if (c as usize) < NUM_CLASSES => PALETTE[c as usize],
            c => return Err(Error::format(format!("class value {c} is not 0-3 or 255"))),
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scene directories of a dataset root: `index.txt` order if present,
/// otherwise every subdirectory holding a manifest, sorted by name.
pub fn dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("index.txt").exists() {
        return read_index(root);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let dirs = dataset_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::format(format!("no scenes under {}", root.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut cfg = SynthConfig::preset(&a.preset)?;
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    let names = gen_dataset(&cfg, a.scenes, a.seed, &a.out)?;
    println!("wrote {} scenes to {}", names.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::resume(load_checkpoint(path)?, &data)?;
            t.set_epochs(a.epochs);
            t
        }
        None => {
            let cfg = TrainConfig {
                lr_max: a.lr,
                momentum: a.momentum,
                weight_decay: a.weight_decay,
                batch_size: a.batch,
                iterations_per_epoch: a.iters,
                epochs: a.epochs,
                restart_t0_epochs: a.t0,
                eta_min: a.eta_min,
                patch_size: a.patch,
                downscale_ratio: a.downscale,
                seed: a.seed,
                mode: a.mode.parse::<Mode>()?,
                val_scenes: a.val_scenes,
                encoder_filters: match a.filters.as_deref() {
                    Some(&[a, b, c, d]) => [a, b, c, d],
                    Some(_) => return Err(Error::arg("--filters takes exactly four counts")),
                    None => TrainConfig::default().encoder_filters,
                },
                deterministic: a.deterministic,
                ..TrainConfig::default()
            };
            Trainer::new(&data, cfg)?
        }
    };
    trainer.run()?;
    let ck = trainer.checkpoint();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_checkpoint(&ck, &a.out.join("model.ckpt"))?;
    let h = trainer.history();
    write(&a.out.join("history.csv"), h.to_csv(ck.config.iterations_per_epoch))?;
    write(&a.out.join("epochs.csv"), h.epochs_csv())?;
    if let Some(last) = h.epochs.last() {
        println!("epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
    }
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let scenes: Vec<Scene> = load_dataset(&a.data)?
        .iter()
        .map(|s| ck.prepare_scene(s))
        .collect::<Result<_>>()?;
    let report = evaluate(&ck.params, &scenes, ck.config.patch_size)?;
    write(&a.out.join("report.csv"), report.to_csv())?;
    let summary = report.summary();
    write(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let (classes, height, width) = ck.predict_classes(&load_scene(&a.scene)?)?;
    write(&a.out.join("pred.u8"), &classes)?;
    let shape = PlaneShape { height, width };
    let json = serde_json::to_string(&shape).expect("plain struct serialises");
    write(&a.out.join("pred.json"), json)?;
    println!("wrote {} ({height}x{width})", a.out.join("pred.u8").display());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let classes = fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let (height, width) = match (a.height, a.width) {
        (Some(h), Some(w)) => (h, w),
        (None, None) => {
            let path = a.input.with_file_name("pred.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let s: PlaneShape = serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            (s.height, s.width)
        }
        _ => return Err(Error::arg("give both --height and --width, or neither")),
    };
    write(&a.out, render_ppm(&classes, height, width)?)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses `argv` (including the program name), runs it and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Argument(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
