//! `styleforge` — train, stylize, verify, and render stylization grids.
//!
//! Exit codes: 0 success, 1 internal failure or failed verification,
//! 2 usage/configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use candle_core::{Device, Tensor};
use clap::{Parser, Subcommand};
use styleforge_core::error::Error;
use styleforge_core::imaging::{image_dims, list_images, load_image, save_image};
use styleforge_core::scin::DEFAULT_EPSILON;
use styleforge_core::training::{load_generator, run_training, TrainConfig};
use styleforge_core::verify::run_checks;

/// Environment variable consulted for the checkpoint directory when
/// `--checkpoint` is omitted (the file `checkpoint.ckpt` inside it is used).
const CKPT_DIR_ENV: &str = "STYLEFORGE_CKPT_DIR";

#[derive(Parser)]
#[command(name = "styleforge", version, about = "Arbitrary style transfer: training, inference, and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training loop from a TOML config file.
    Train {
        /// Path to the training configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Stylize one content image with one style image.
    Stylize {
        /// Content image (PNG/JPEG, dimensions divisible by 8).
        #[arg(long)]
        content: PathBuf,
        /// Style image (PNG/JPEG, dimensions divisible by 8).
        #[arg(long)]
        style: PathBuf,
        /// Trained checkpoint; defaults to $STYLEFORGE_CKPT_DIR/checkpoint.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical verification suite and print its report.
    Verify {
        #[arg(long, hide = true, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Stylize every (style, content) pair and write a contact sheet.
    Grid {
        /// Directory of content images.
        #[arg(long)]
        contents: PathBuf,
        /// Directory of style images.
        #[arg(long)]
        styles: PathBuf,
        /// Trained checkpoint; defaults to $STYLEFORGE_CKPT_DIR/checkpoint.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for the PNGs and the contact sheet.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let device = Device::Cpu;
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config, &device),
        Command::Stylize {
            content,
            style,
            checkpoint,
            out,
        } => cmd_stylize(&content, &style, checkpoint, &out, &device),
        Command::Verify { epsilon } => cmd_verify(epsilon, &device),
        Command::Grid {
            contents,
            styles,
            checkpoint,
            out,
        } => cmd_grid(&contents, &styles, checkpoint, &out, &device),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_train(config_path: &std::path::Path, device: &Device) -> Result<ExitCode, Error> {
    let config = TrainConfig::from_toml_file(config_path)?;
    let summary = run_training(&config, device)?;
    println!("completed {} steps", summary.steps_completed);
    println!("final losses:");
    let line = serde_json::to_string_pretty(&summary.final_losses)
        .map_err(|e| Error::config(format!("loss serialization failed: {e}")))?;
    println!("{line}");
    println!("checkpoint: {}", summary.checkpoint_path.display());
    println!("metrics:    {}", summary.metrics_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Resolves the checkpoint path: explicit flag wins, otherwise
/// `$STYLEFORGE_CKPT_DIR/checkpoint.ckpt`.
fn resolve_checkpoint(flag: Option<PathBuf>) -> Result<PathBuf, Error> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os(CKPT_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join("checkpoint.ckpt")),
        None => Err(Error::config(format!(
            "no --checkpoint given and {CKPT_DIR_ENV} is not set"
        ))),
    }
}

/// Loads an image at its native size, which must be divisible by 8.
fn load_image_div8(path: &std::path::Path, device: &Device) -> Result<Tensor, Error> {
    let (h, w) = image_dims(path)?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!(
            "{}: image dimensions must be divisible by 8, got {h}x{w}",
            path.display()
        )));
    }
    load_image(path, (h, w), device)
}

fn cmd_stylize(
    content: &std::path::Path,
    style: &std::path::Path,
    checkpoint: Option<PathBuf>,
    out: &std::path::Path,
    device: &Device,
) -> Result<ExitCode, Error> {
    let ckpt = resolve_checkpoint(checkpoint)?;
    // Validate the cheap header-level contract before touching the checkpoint.
    let i_c = load_image_div8(content, device)?;
    let i_s = load_image_div8(style, device)?;
    let (_, _, generator) = load_generator(&ckpt, device)?;
    let stylized = generator.stylize(&i_c, &i_s)?;
    save_image(&stylized.clamp(0.0, 1.0)?, out)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(epsilon: f64, device: &Device) -> Result<ExitCode, Error> {
    let results = run_checks(epsilon, device)?;
    let name_w = results.iter().map(|r| r.name.len()).max().unwrap_or(4);
    println!(
        "{:<name_w$}  {:>12}  {:>12}  result",
        "check", "tolerance", "measured"
    );
    let mut all_pass = true;
    for r in &results {
        println!(
            "{:<name_w$}  {:>12.3e}  {:>12.3e}  {}",
            r.name,
            r.tolerance,
            r.measured,
            if r.pass { "pass" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    if all_pass {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verification failed");
        Ok(ExitCode::from(1))
    }
}

fn cmd_grid(
    contents_dir: &std::path::Path,
    styles_dir: &std::path::Path,
    checkpoint: Option<PathBuf>,
    out_dir: &std::path::Path,
    device: &Device,
) -> Result<ExitCode, Error> {
    let ckpt = resolve_checkpoint(checkpoint)?;
    let (config, _, generator) = load_generator(&ckpt, device)?;
    let size = config.image_size;
    let content_paths = list_images(contents_dir)?;
    let style_paths = list_images(styles_dir)?;
    if content_paths.is_empty() {
        return Err(Error::config(format!(
            "no images in {}",
            contents_dir.display()
        )));
    }
    if style_paths.is_empty() {
        return Err(Error::config(format!(
            "no images in {}",
            styles_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let contents: Vec<Tensor> = content_paths
        .iter()
        .map(|p| load_image(p, (size, size), device))
        .collect::<Result<_, _>>()?;
    let styles: Vec<Tensor> = style_paths
        .iter()
        .map(|p| load_image(p, (size, size), device))
        .collect::<Result<_, _>>()?;

    // One cell per (style i, content j); filenames carry both indices.
    let (n, m) = (styles.len(), contents.len());
    let mut cells: Vec<Vec<f64>> = Vec::with_capacity(n * m);
    for (i, style) in styles.iter().enumerate() {
        for (j, content) in contents.iter().enumerate() {
            let img = generator.stylize(content, style)?.clamp(0.0, 1.0)?;
            save_image(&img, out_dir.join(format!("s{i}_c{j}.png")))?;
            cells.push(img.flatten_all()?.to_vec1()?);
        }
    }

    // Contact sheet: one row per content, one column per style, white gutters.
    let gutter = 2usize;
    let sheet_h = m * size + (m - 1) * gutter;
    let sheet_w = n * size + (n - 1) * gutter;
    let mut sheet = vec![1.0f64; 3 * sheet_h * sheet_w];
    for i in 0..n {
        for j in 0..m {
            let cell = &cells[i * m + j];
            let (y0, x0) = (j * (size + gutter), i * (size + gutter));
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        sheet[(c * sheet_h + y0 + y) * sheet_w + x0 + x] =
                            cell[(c * size + y) * size + x];
                    }
                }
            }
        }
    }
    let sheet = Tensor::from_vec(sheet, (1, 3, sheet_h, sheet_w), device)?;
    let sheet_path = out_dir.join("contact_sheet.png");
    save_image(&sheet, &sheet_path)?;
    println!(
        "wrote {} stylizations and {}",
        n * m,
        sheet_path.display()
    );
    Ok(ExitCode::SUCCESS)
}
