//! Command-line interface: training, upsampling, baselines and diagnostics.
//!
//! Every subcommand reads and writes the formats in [`crate::io`]. Results go
//! to stdout, progress and notices to stderr. Exit codes: 0 on success, 1 for
//! invalid input or a failed check, 2 for I/O and file-format problems.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::encoder::StubEncoder;
use crate::eval::{
    adcc, average_drop, average_gain, average_increase, coherency, complexity, feature_resize,
    generalization_eval, pca_rgb, GenConfig, ScorePair,
};
use crate::gradcheck::{grad_check, CheckSettings, op_suite};
use crate::image::ResizeMode;
use crate::io::{
    atomic_write, load_checkpoint, read_feature_map, read_pgm, read_ppm, save_checkpoint,
    write_feature_map, write_pgm, write_ppm, IoFormatError,
};
use crate::model::{JafarParams, UpsampleRequest};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, SaliencyMap};
use crate::train::{train, CompositeObjective, RunConfig, TrainEvent};

/// Added to `--seed` to derive the evaluation stream, so evaluation scenes
/// never coincide with training scenes drawn from the same base seed.
const HOLDOUT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Parser)]
#[command(
    name = "jafar",
    version,
    about = "Attention-based feature upsampling: train, apply, and evaluate"
)]
struct Cli {
    /// Base RNG seed. Overrides the seed in a training config; offsets the
    /// scene stream for eval-gen. Defaults to 42.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output on stderr and summaries on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an upsampler and write its checkpoint.
    Train {
        /// Optional key=value config file; defaults apply when omitted.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Checkpoint destination. Intermediate checkpoints, if enabled in
        /// the config, are written to <OUT>.step<N>.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Upsample a stored feature map, guided by an image.
    Upsample {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Low-resolution feature map to upsample.
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        /// Guidance image (binary PPM).
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[arg(long, value_name = "ROWS")]
        out_h: usize,
        #[arg(long, value_name = "COLS")]
        out_w: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Process at most this many output rows at once; the result is
        /// bit-identical to a whole-grid pass.
        #[arg(long, value_name = "N")]
        tile_rows: Option<usize>,
    },
    /// Resize a stored feature map channel-wise, with no model.
    Baseline {
        /// bilinear or nearest.
        #[arg(long, value_name = "MODE")]
        mode: String,
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        #[arg(long, value_name = "ROWS")]
        out_h: usize,
        #[arg(long, value_name = "COLS")]
        out_w: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score a checkpoint against the resize baselines on held-out scenes.
    EvalGen {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Number of held-out scenes.
        #[arg(long, default_value_t = 50)]
        images: usize,
        /// Upsampling factors to probe.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        factors: Vec<usize>,
        /// Destination for per-factor, per-method scores.
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
    },
    /// Verify all tape gradients against finite differences.
    Gradcheck {
        /// Relative-error tolerance for single operations; the composite
        /// forward pass is allowed ten times this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Project feature maps to RGB along their shared top principal axes.
    VizPca {
        /// Feature-map files; all are projected in one shared basis.
        #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output files are named <PREFIX><index>.ppm in input order.
        #[arg(long, value_name = "PREFIX")]
        out_prefix: String,
    },
    /// Export one query's attention over the low-resolution grid as a PGM.
    VizAttn {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Output-grid position as row,col.
        #[arg(long, value_delimiter = ',', value_name = "ROW,COL")]
        query: Vec<usize>,
        /// Output grid height; defaults to the guidance image's.
        #[arg(long, value_name = "ROWS")]
        out_h: Option<usize>,
        /// Output grid width; defaults to the guidance image's.
        #[arg(long, value_name = "COLS")]
        out_w: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Faithfulness metrics over classifier scores and saliency maps.
    CamMetrics {
        /// CSV of full,masked score pairs, one per image.
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        /// Saliency maps (PGM) in original,masked pairs; enables the
        /// coherency, complexity and combined scores.
        #[arg(long, value_name = "FILE", num_args = 0..)]
        maps: Vec<PathBuf>,
    },
}

// ───────────────────────── error plumbing ─────────────────────────

#[derive(Debug)]
enum CliError {
    /// Bad input or a failed check; exits with 1.
    Invalid(String),
    /// I/O or file-format failure; exits with 2.
    Format(IoFormatError),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Format(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(msg) => write!(f, "{msg}"),
            CliError::Format(e) => write!(f, "{e}"),
        }
    }
}

impl From<IoFormatError> for CliError {
    fn from(e: IoFormatError) -> Self {
        CliError::Format(e)
    }
}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|source| IoFormatError::Io { path: path.to_path_buf(), source }.into())
}

// ───────────────────────── entry point ─────────────────────────

/// Parses and executes a full argument vector (including the program name);
/// returns the process exit code.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (seed, quiet) = (cli.seed, cli.quiet);
    match cli.command {
        Command::Train { config, out } => cmd_train(config.as_deref(), &out, seed, quiet),
        Command::Upsample { ckpt, features, image, out_h, out_w, out, tile_rows } => {
            cmd_upsample(&ckpt, &features, &image, out_h, out_w, &out, tile_rows, quiet)
        }
        Command::Baseline { mode, features, out_h, out_w, out } => {
            cmd_baseline(&mode, &features, out_h, out_w, &out, quiet)
        }
        Command::EvalGen { ckpt, images, factors, csv } => {
            cmd_eval_gen(&ckpt, images, factors, &csv, seed, quiet)
        }
        Command::Gradcheck { tol } => cmd_gradcheck(tol),
        Command::VizPca { inputs, out_prefix } => cmd_viz_pca(&inputs, &out_prefix, quiet),
        Command::VizAttn { ckpt, features, image, query, out_h, out_w, out } => {
            cmd_viz_attn(&ckpt, &features, &image, &query, out_h, out_w, &out, quiet)
        }
        Command::CamMetrics { scores, maps } => cmd_cam_metrics(&scores, &maps, quiet),
    }
}

// ───────────────────────── subcommands ─────────────────────────

fn cmd_train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut run = match config {
        Some(path) => RunConfig::parse(&read_text(path)?).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, run.model.c_in);
    let mut rng = Rng::new(run.train.seed);
    let mut params = JafarParams::<f32>::init(run.model.clone(), &mut rng).map_err(invalid)?;

    let mut ckpt_err: Option<IoFormatError> = None;
    let report = train(&run, &enc, &mut params, &mut rng, |event| match event {
        TrainEvent::Log { step, steps, recent_mean_loss } => {
            if !quiet {
                eprintln!("step {step}/{steps}  loss {recent_mean_loss:.6}");
            }
        }
        TrainEvent::Checkpoint { step, params } => {
            if ckpt_err.is_none() {
                let path = PathBuf::from(format!("{}.step{step}", out.display()));
                if let Err(e) = save_checkpoint(&path, &run, params) {
                    ckpt_err = Some(e);
                }
            }
        }
    })
    .map_err(invalid)?;
    if let Some(e) = ckpt_err {
        return Err(e.into());
    }
    save_checkpoint(out, &run, &params)?;
    if !quiet {
        let last = report.losses.last().copied().unwrap_or(f64::NAN);
        eprintln!("final batch loss {last:.6}; checkpoint written to {}", out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_upsample(
    ckpt: &Path,
    features: &Path,
    image: &Path,
    out_h: usize,
    out_w: usize,
    out: &Path,
    tile_rows: Option<usize>,
    quiet: bool,
) -> Result<(), CliError> {
    let (_run, params) = load_checkpoint(ckpt)?;
    let f_lr = read_feature_map::<f32>(features)?;
    let img = read_ppm::<f32>(image)?;
    let req = UpsampleRequest { guidance: &img, f_lr: &f_lr, out_h, out_w };
    let result = match tile_rows {
        Some(rows) => params.upsample_tiled(&req, rows),
        None => params.upsample(&req),
    }
    .map_err(invalid)?;
    write_feature_map(out, &result)?;
    if !quiet {
        eprintln!("wrote {}x{}x{} features to {}", result.c, result.h, result.w, out.display());
    }
    Ok(())
}

fn cmd_baseline(
    mode: &str,
    features: &Path,
    out_h: usize,
    out_w: usize,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let mode: ResizeMode = mode.parse().map_err(invalid)?;
    if out_h == 0 || out_w == 0 {
        return Err(CliError::Invalid(format!("target size {out_h}x{out_w} must be nonempty")));
    }
    let f = read_feature_map::<f32>(features)?;
    let result = feature_resize(&f, out_h, out_w, mode);
    write_feature_map(out, &result)?;
    if !quiet {
        eprintln!(
            "wrote {mode} {}x{}x{} features to {}",
            result.c,
            result.h,
            result.w,
            out.display()
        );
    }
    Ok(())
}

fn cmd_eval_gen(
    ckpt: &Path,
    images: usize,
    factors: Vec<usize>,
    csv: &Path,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let (run, params) = load_checkpoint(ckpt)?;
    let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, run.model.c_in);
    // Probe at the geometry the checkpoint was trained for.
    let cfg = GenConfig {
        images,
        factors,
        base_size: run.train.hr_size,
        guidance_base: run.train.guidance_size,
        seed: seed.unwrap_or(42).wrapping_add(HOLDOUT_SEED_OFFSET),
    };
    let report = generalization_eval(&params, &enc, &cfg).map_err(invalid)?;
    atomic_write(csv, report.to_csv().as_bytes())?;
    if !quiet {
        for f in &report.factors {
            println!(
                "factor {}: jafar cos {:.4} l2 {:.4} | bilinear cos {:.4} l2 {:.4} | \
                 nearest cos {:.4} l2 {:.4} | wins {}/{}",
                f.factor,
                f.jafar.mean_cos,
                f.jafar.mean_l2,
                f.bilinear.mean_cos,
                f.bilinear.mean_l2,
                f.nearest.mean_cos,
                f.nearest.mean_l2,
                f.jafar_beats_bilinear,
                report.images
            );
        }
        eprintln!("scores written to {}", csv.display());
    }
    Ok(())
}

fn cmd_gradcheck(tol: f64) -> Result<(), CliError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CliError::Invalid(format!("tolerance {tol} must be positive")));
    }
    let mut all_ok = true;
    for (name, outcome) in op_suite(tol) {
        match outcome {
            Ok(report) => {
                let ok = report.passed();
                all_ok &= ok;
                println!(
                    "op {name}: max rel err {:.2e} (tol {:.1e}) {}",
                    report.max_rel_err(),
                    report.tol,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            Err(e) => {
                all_ok = false;
                println!("op {name}: FAIL ({e})");
            }
        }
    }
    let obj = CompositeObjective::standard();
    let settings = CheckSettings::exhaustive(tol * 10.0);
    match grad_check(&obj, &obj.params(), &settings) {
        Ok(report) => {
            let ok = report.passed();
            all_ok &= ok;
            println!(
                "full pipeline: max rel err {:.2e} (tol {:.1e}) {}",
                report.max_rel_err(),
                report.tol,
                if ok { "ok" } else { "FAIL" }
            );
        }
        Err(e) => {
            all_ok = false;
            println!("full pipeline: FAIL ({e})");
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Invalid("gradient check failed".into()))
    }
}

fn cmd_viz_pca(inputs: &[PathBuf], out_prefix: &str, quiet: bool) -> Result<(), CliError> {
    let mut maps: Vec<FeatureMap<f32>> = Vec::with_capacity(inputs.len());
    for path in inputs {
        maps.push(read_feature_map(path)?);
    }
    let refs: Vec<&FeatureMap<f32>> = maps.iter().collect();
    let images = pca_rgb(&refs).map_err(invalid)?;
    for (i, (img, src)) in images.iter().zip(inputs).enumerate() {
        let path = PathBuf::from(format!("{out_prefix}{i}.ppm"));
        write_ppm(&path, img)?;
        if !quiet {
            eprintln!("{} -> {}", src.display(), path.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_viz_attn(
    ckpt: &Path,
    features: &Path,
    image: &Path,
    query: &[usize],
    out_h: Option<usize>,
    out_w: Option<usize>,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let [qy, qx] = query else {
        return Err(CliError::Invalid(format!(
            "--query takes exactly row,col; got {} values",
            query.len()
        )));
    };
    let (_run, params) = load_checkpoint(ckpt)?;
    let f_lr = read_feature_map::<f32>(features)?;
    let img = read_ppm::<f32>(image)?;
    let req = UpsampleRequest {
        guidance: &img,
        f_lr: &f_lr,
        out_h: out_h.unwrap_or(img.h),
        out_w: out_w.unwrap_or(img.w),
    };
    let row = params.export_attention_row(&req, (*qy, *qx)).map_err(invalid)?;
    // Attention weights sum to one; rescale so the peak maps to white.
    let max = row.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scaled: Vec<f32> = if max > 0.0 {
        row.data().iter().map(|v| v / max).collect()
    } else {
        row.data().to_vec()
    };
    write_pgm(out, &SaliencyMap::from_vec(row.h, row.w, scaled))?;
    if !quiet {
        eprintln!("wrote {}x{} attention map to {}", row.h, row.w, out.display());
    }
    Ok(())
}

fn cmd_cam_metrics(scores: &Path, maps: &[PathBuf], quiet: bool) -> Result<(), CliError> {
    let pairs = parse_scores(&read_text(scores)?)?;
    let drop = average_drop(&pairs).map_err(invalid)?;
    let increase = average_increase(&pairs).map_err(invalid)?;
    let gain = average_gain(&pairs).map_err(invalid)?;
    println!("average_drop {drop:.6}");
    println!("average_increase {increase:.6}");
    println!("average_gain {gain:.6}");
    if maps.is_empty() {
        if !quiet {
            eprintln!("no saliency maps given; skipping coherency, complexity and adcc");
        }
        return Ok(());
    }
    if maps.len() % 2 != 0 {
        return Err(CliError::Invalid(format!(
            "--maps takes original,masked pairs; got {} files",
            maps.len()
        )));
    }
    let mut coh_sum = 0.0;
    let mut cplx_sum = 0.0;
    let n_pairs = maps.len() / 2;
    for pair in maps.chunks_exact(2) {
        let original = read_pgm::<f64>(&pair[0])?;
        let masked = read_pgm::<f64>(&pair[1])?;
        coh_sum += coherency(&original, &masked).map_err(invalid)?;
        cplx_sum += complexity(&original).map_err(invalid)?;
    }
    let coh = coh_sum / n_pairs as f64;
    let cplx = cplx_sum / n_pairs as f64;
    println!("coherency {coh:.6}");
    println!("complexity {cplx:.6}");
    let combined = adcc(coh, cplx, drop).map_err(invalid)?;
    println!("adcc {combined:.6}");
    Ok(())
}

/// Parses `full,masked` score rows; tolerates one leading header line,
/// blank lines and `#` comments.
fn parse_scores(text: &str) -> Result<Vec<ScorePair>, CliError> {
    let mut pairs = Vec::new();
    let mut may_be_header = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((full, masked)) => {
                pairs.push(ScorePair { full, masked });
                may_be_header = false;
            }
            None if may_be_header => may_be_header = false,
            None => {
                return Err(CliError::Invalid(format!(
                    "scores line {}: expected two comma-separated numbers, got {raw:?}",
                    i + 1
                )))
            }
        }
    }
    if pairs.is_empty() {
        return Err(CliError::Invalid("scores file contains no data rows".into()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("jafar").chain(list.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn score_rows_parse_with_header_comments_and_blanks() {
        let text = "full,masked\n# note\n\n0.9, 0.8\n0.5,0.7\n";
        let pairs = parse_scores(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].full, 0.9);
        assert_eq!(pairs[1].masked, 0.7);
    }

    #[test]
    fn score_rows_reject_garbage_after_the_header() {
        assert!(parse_scores("full,masked\n0.9,0.8\nnot,numbers\n").is_err());
        assert!(parse_scores("0.9\n").is_err());
        assert!(parse_scores("").is_err());
    }

    #[test]
    fn unknown_flags_and_subcommands_exit_with_one() {
        assert_eq!(run(args(&["no-such-command"])), 1);
        assert_eq!(run(args(&["train", "--no-such-flag"])), 1);
        assert_eq!(run(args(&[])), 1);
    }

    #[test]
    fn missing_input_files_exit_with_two() {
        assert_eq!(
            run(args(&[
                "baseline",
                "--mode",
                "bilinear",
                "--features",
                "/nonexistent/f.jfar",
                "--out-h",
                "4",
                "--out-w",
                "4",
                "--out",
                "/nonexistent/out.jfar",
            ])),
            2
        );
    }

    #[test]
    fn invalid_mode_exits_with_one() {
        assert_eq!(
            run(args(&[
                "baseline",
                "--mode",
                "bicubic",
                "--features",
                "/nonexistent/f.jfar",
                "--out-h",
                "4",
                "--out-w",
                "4",
                "--out",
                "/nonexistent/out.jfar",
            ])),
            1
        );
    }

    #[test]
    fn help_requests_exit_cleanly() {
        assert_eq!(run(args(&["--help"])), 0);
        assert_eq!(run(args(&["upsample", "--help"])), 0);
    }
}
