//! Command line interface.
//!
//! Subcommands: `synth` writes a synthetic dataset, `train` fits a
//! model, `eval` scores one against a dataset, `predict` renders
//! per-slice maps, `sweep` traces DSC across binarization thresholds,
//! and `params` counts trainable parameters.
//!
//! Defaults can come from a `key=value` file passed with `--config`;
//! explicit flags always win over file values. Exit codes: 0 success,
//! 1 runtime failure, 2 usage error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Model};
use crate::clstm::attach_clstm;
use crate::data::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{self, CaseScore};
use crate::network::{SegNet, SegNetConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, RnnConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sliceseg",
    version,
    about = "Slice-stack segmentation: synthetic data, training, and scoring"
)]
struct Cli {
    /// key=value defaults file; explicit flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads. Only 1 is implemented; higher values run
    /// sequentially with a note.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of drifting-blob volumes
    Synth(SynthArgs),
    /// Train a model with two-phase selection, optionally adding the
    /// recurrent extension afterwards
    Train(TrainArgs),
    /// Score a trained model case by case against a dataset
    Eval(EvalArgs),
    /// Write per-slice probability and contour-overlay images
    Predict(PredictArgs),
    /// Trace DSC across binarization thresholds
    Sweep(SweepArgs),
    /// Count trainable parameters
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Target per-slice foreground fraction
    #[arg(long)]
    fg: Option<f64>,
    /// Pixel noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    /// Largest per-axis centre movement between adjacent slices
    #[arg(long)]
    drift: Option<f64>,
    /// Fraction of cases that get degraded slices
    #[arg(long)]
    corrupt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth` (or matching its layout)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint path to write
    #[arg(long, value_name = "FILE", default_value = "model.segn")]
    out: PathBuf,
    /// Architecture: jac64, jac128, or SCALESxCBRxCHANNELS (e.g. 3x2x8)
    #[arg(long)]
    arch: Option<String>,
    /// Loss: jaccard, ce, or balanced-ce
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Epoch cap per phase; 0 saves the freshly initialized model
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Phase A validation fraction
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also attach and fine-tune the recurrent extension
    #[arg(long)]
    rnn: bool,
    /// Recurrent hidden channels
    #[arg(long)]
    hidden: Option<usize>,
    /// Recurrent unroll window (slices per prediction)
    #[arg(long)]
    window: Option<usize>,
    /// Process stacks in descending slice order
    #[arg(long)]
    reverse: bool,
    /// Write the epoch log CSV here
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to score; omit with --oracle
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Score the ground truth against itself to check the pipeline
    #[arg(long)]
    oracle: bool,
    /// Write per-case scores CSV here
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Case id to render; defaults to the first case
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Output directory for PGM images
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to sweep; omit with --benchmark
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Train one model per loss kind first and sweep each
    #[arg(long)]
    benchmark: bool,
    /// Architecture for --benchmark runs
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Architecture to count; defaults to both stock variants
    #[arg(long)]
    arch: Option<String>,
    /// Count a trained checkpoint instead
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

/// key=value pairs from a defaults file. Blank lines and `#` comments
/// are skipped.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Config(format!(
                        "bad line {line:?} in {}, expected key=value",
                        path.display()
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key} has unusable value {raw:?}"))),
        }
    }
}

/// Flag value if given, else config file value, else the default.
fn pick<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

fn parse_arch(spec: &str) -> Result<SegNetConfig> {
    match spec {
        "jac64" => return Ok(SegNetConfig::jac64()),
        "jac128" => return Ok(SegNetConfig::jac128()),
        _ => {}
    }
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() == 3 {
        let nums: Result<Vec<usize>> = parts
            .iter()
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad architecture field {p:?}")))
            })
            .collect();
        let nums = nums?;
        let config = SegNetConfig::uniform(nums[0], nums[1], nums[2]);
        config.validate()?;
        return Ok(config);
    }
    Err(Error::Config(format!(
        "unknown architecture {spec:?}, expected jac64, jac128, or SCALESxCBRxCHANNELS"
    )))
}

fn train_config(
    file: &FileConfig,
    loss: Option<LossKind>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    patience: Option<usize>,
    val_frac: Option<f64>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let loss = match loss {
        Some(v) => v,
        None => match file.0.get("loss") {
            Some(raw) => raw
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?,
            None => d.loss,
        },
    };
    let cfg = TrainConfig {
        loss,
        lr: pick(lr, file, "lr", d.lr)?,
        momentum: pick(momentum, file, "momentum", d.momentum)?,
        batch_size: pick(batch, file, "batch", d.batch_size)?,
        max_epochs: pick(epochs, file, "epochs", d.max_epochs)?,
        patience: pick(patience, file, "patience", d.patience)?,
        val_fraction: pick(val_frac, file, "val_frac", d.val_fraction)?,
        seed: pick(seed, file, "seed", d.seed)?,
        threshold: pick(None, file, "threshold", d.threshold)?,
    };
    if cfg.max_epochs > 0 {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs, file: &FileConfig) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        cases: pick(args.cases, file, "cases", d.cases)?,
        depth: pick(args.depth, file, "depth", d.depth)?,
        height: pick(args.height, file, "height", d.height)?,
        width: pick(args.width, file, "width", d.width)?,
        target_fg: pick(args.fg, file, "fg", d.target_fg)?,
        noise: pick(args.noise, file, "noise", d.noise)?,
        drift: pick(args.drift, file, "drift", d.drift)?,
        corrupt_cases: pick(args.corrupt, file, "corrupt", d.corrupt_cases)?,
        seed: pick(args.seed, file, "seed", d.seed)?,
    };
    let summary = data::generate_dataset(&args.out, &cfg)?;
    println!(
        "wrote {} cases ({} slices, {} degraded) to {}",
        summary.case_ids.len(),
        summary.total_slices,
        summary.corrupted_slices,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let arch = match &args.arch {
        Some(s) => s.clone(),
        None => file
            .0
            .get("arch")
            .cloned()
            .unwrap_or_else(|| "jac64".to_string()),
    };
    let net_config = parse_arch(&arch)?;
    let cfg = train_config(
        file,
        args.loss,
        args.lr,
        args.momentum,
        args.batch,
        args.epochs,
        args.patience,
        args.val_frac,
        args.seed,
    )?;
    let rnn_cfg = RnnConfig {
        hidden_channels: pick(
            args.hidden,
            file,
            "hidden",
            RnnConfig::default().hidden_channels,
        )?,
        window: pick(args.window, file, "window", RnnConfig::default().window)?,
        reverse: args.reverse || matches!(file.0.get("reverse").map(String::as_str), Some("1")),
    };

    let ids = data::list_cases(&args.data)?;
    if ids.is_empty() {
        return Err(Error::Train(format!(
            "no cases found in {}",
            args.data.display()
        )));
    }

    let model = if cfg.max_epochs == 0 {
        // A zero-epoch run writes the freshly initialized model, which
        // keeps smoke tests and downstream tooling cheap.
        let net = SegNet::build(net_config, cfg.seed)?;
        if args.rnn {
            let mut rnn = attach_clstm(net, rnn_cfg.hidden_channels, cfg.seed ^ 0xc157)?;
            rnn.window = rnn_cfg.window;
            rnn.reverse = rnn_cfg.reverse;
            Model::Rnn(rnn)
        } else {
            Model::Cnn(net)
        }
    } else {
        let cases = data::load_cases(&args.data, &ids)?;
        let selection = trainer::model_select(net_config, &cases, &cfg)?;
        println!(
            "selection done: target DSC {:.4}, validation DSC {:.4}{}",
            selection.acc_t,
            selection.val_dsc,
            if selection.reached_target {
                ""
            } else {
                " (target not reached)"
            }
        );
        for warning in &selection.log.warnings {
            eprintln!("warning: {warning}");
        }
        let mut log = selection.log;
        let model = if args.rnn {
            let (train, monitor) = trainer_split(&cases, &cfg)?;
            let (rnn, rnn_log) =
                trainer::finetune_rnn(selection.net, &train, &monitor, &cfg, &rnn_cfg)?;
            log.rows.extend(rnn_log.rows);
            log.warnings.extend(rnn_log.warnings);
            Model::Rnn(rnn)
        } else {
            Model::Cnn(selection.net)
        };
        if let Some(path) = &args.log {
            fs::write(path, log.to_csv())?;
        }
        checkpoint::save(&model, &args.out)?;
        println!(
            "saved {} ({} parameters) to {}",
            match &model {
                Model::Cnn(_) => "cnn",
                Model::Rnn(_) => "rnn",
            },
            model.count_parameters(),
            args.out.display()
        );
        return Ok(());
    };

    if let Some(path) = &args.log {
        fs::write(path, trainer::TrainLog::default().to_csv())?;
    }
    checkpoint::save(&model, &args.out)?;
    println!(
        "saved untrained {} ({} parameters) to {}",
        match &model {
            Model::Cnn(_) => "cnn",
            Model::Rnn(_) => "rnn",
        },
        model.count_parameters(),
        args.out.display()
    );
    Ok(())
}

/// Case split used when fine-tuning the recurrent extension.
fn trainer_split(
    cases: &[data::CaseData],
    cfg: &TrainConfig,
) -> Result<(Vec<data::CaseData>, Vec<data::CaseData>)> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let (train_ids, val_ids) = data::split_train_val(&ids, cfg.val_fraction, cfg.seed ^ 0xf17)?;
    let pick = |wanted: &[String]| {
        cases
            .iter()
            .filter(|c| wanted.contains(&c.id))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok((pick(&train_ids), pick(&val_ids)))
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    let threshold = pick(args.threshold, file, "threshold", 0.5)?;
    let ids = data::list_cases(&args.data)?;
    let cases = data::load_cases(&args.data, &ids)?;

    let model = match (&args.model, args.oracle) {
        (Some(path), false) => Some(checkpoint::load(path)?),
        (None, true) => None,
        (Some(_), true) => return Err(Error::Config("--oracle does not take a model".into())),
        (None, false) => return Err(Error::Config("pass --model FILE or --oracle".into())),
    };

    let mut scores = Vec::with_capacity(cases.len());
    for case in &cases {
        let probs = match &model {
            Some(m) => trainer::predict_case(m, &case.images)?,
            // Oracle mode scores the labels against themselves, which
            // must give perfect marks if the pipeline is sound.
            None => case.labels.clone(),
        };
        let prob = data::stack_batch(&probs)?;
        let truth = data::stack_batch(&case.labels)?;
        let mask = metrics::binarize(&prob, threshold);
        scores.push(CaseScore {
            case_id: case.id.clone(),
            threshold,
            dsc: metrics::dsc(&mask, &truth)?,
            ji: metrics::jaccard_index(&mask, &truth)?,
        });
    }

    let report = metrics::aggregate(&scores)?;
    print!("{}", metrics::report_to_csv(&report));
    if let Some(path) = &args.out {
        fs::write(path, metrics::scores_to_csv(&scores))?;
        println!("wrote per-case scores to {}", path.display());
    }
    Ok(())
}

/// Binary PGM (P5) writer.
fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), height * width);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

fn to_gray(map: &Tensor) -> Vec<u8> {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    map.data()
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Paints the boundary of the binarized probability map in white over
/// the intensity image.
fn overlay_contour(gray: &mut [u8], prob: &Tensor, threshold: f64, height: usize, width: usize) {
    let mask: Vec<bool> = prob.data().iter().map(|&v| v > threshold).collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let edge = (y == 0 || !mask[i - width])
                || (y + 1 == height || !mask[i + width])
                || (x == 0 || !mask[i - 1])
                || (x + 1 == width || !mask[i + 1]);
            if edge {
                gray[i] = 255;
            }
        }
    }
}

fn cmd_predict(args: PredictArgs, file: &FileConfig) -> Result<()> {
    let threshold = pick(args.threshold, file, "threshold", 0.5)?;
    let ids = data::list_cases(&args.data)?;
    let case_id = match args.case {
        Some(id) if ids.contains(&id) => id,
        Some(id) => {
            return Err(Error::Config(format!(
                "case {id} not found in {}",
                args.data.display()
            )))
        }
        None => ids
            .first()
            .ok_or_else(|| Error::Config("dataset is empty".into()))?
            .clone(),
    };

    let model = checkpoint::load(&args.model)?;
    let cases = data::load_cases(&args.data, std::slice::from_ref(&case_id))?;
    let case = &cases[0];
    let (raw, _) = data::load_case(&args.data, &case_id)?;
    let probs = trainer::predict_case(&model, &case.images)?;

    fs::create_dir_all(&args.out)?;
    let (h, w) = (raw.height, raw.width);
    for (t, prob) in probs.iter().enumerate() {
        let prob_pixels: Vec<u8> = prob
            .data()
            .iter()
            .map(|&v| ((v * 255.0).round()).clamp(0.0, 255.0) as u8)
            .collect();
        write_pgm(
            &args.out.join(format!("{case_id}_slice{t:03}_prob.pgm")),
            h,
            w,
            &prob_pixels,
        )?;

        let mut gray = to_gray(&raw.slice(t)?);
        overlay_contour(&mut gray, prob, threshold, h, w);
        write_pgm(
            &args.out.join(format!("{case_id}_slice{t:03}_overlay.pgm")),
            h,
            w,
            &gray,
        )?;
    }
    println!(
        "wrote {} probability and overlay images for {case_id} to {}",
        2 * probs.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    let ids = data::list_cases(&args.data)?;
    let cases = data::load_cases(&args.data, &ids)?;
    let thresholds = metrics::sweep_thresholds();

    if args.benchmark {
        let arch = match &args.arch {
            Some(s) => s.clone(),
            None => file
                .0
                .get("arch")
                .cloned()
                .unwrap_or_else(|| "2x2x8".to_string()),
        };
        let net_config = parse_arch(&arch)?;
        let cfg = train_config(
            file,
            None,
            args.lr,
            None,
            args.batch,
            args.epochs,
            args.patience,
            None,
            args.seed,
        )?;
        let curves = trainer::benchmark_losses(net_config, &cases, &cfg, &LossKind::ALL)?;
        let mut csv = String::from("loss,threshold,mean_dsc\n");
        for curve in &curves {
            csv.push_str(&curve.to_csv_rows());
            println!(
                "{}: spread {:.4} across {} thresholds",
                curve.loss,
                curve.spread,
                curve.curve.len()
            );
        }
        fs::write(&args.out, csv)?;
        println!("wrote loss benchmark curves to {}", args.out.display());
        return Ok(());
    }

    let Some(model_path) = &args.model else {
        return Err(Error::Config("pass --model FILE or --benchmark".into()));
    };
    let model = checkpoint::load(model_path)?;
    let mut scores = Vec::new();
    for case in &cases {
        let probs = trainer::predict_case(&model, &case.images)?;
        let prob = data::stack_batch(&probs)?;
        let truth = data::stack_batch(&case.labels)?;
        scores.extend(metrics::threshold_sweep(
            &case.id,
            &prob,
            &truth,
            &thresholds,
        )?);
    }
    fs::write(&args.out, metrics::scores_to_csv(&scores))?;
    println!(
        "wrote {} rows ({} cases x {} thresholds) to {}",
        scores.len(),
        cases.len(),
        thresholds.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    if let Some(path) = &args.model {
        let model = checkpoint::load(path)?;
        let kind = match &model {
            Model::Cnn(_) => "cnn",
            Model::Rnn(_) => "rnn",
        };
        println!("{kind} {} parameters", model.count_parameters());
        return Ok(());
    }
    match &args.arch {
        Some(spec) => {
            let net = SegNet::build(parse_arch(spec)?, 0)?;
            println!("{spec} {} parameters", net.count_parameters());
        }
        None => {
            for spec in ["jac64", "jac128"] {
                let net = SegNet::build(parse_arch(spec)?, 0)?;
                println!("{spec} {} parameters", net.count_parameters());
            }
        }
    }
    Ok(())
}

/// Parses arguments and runs the selected command. Returns the process
/// exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        if threads > 1 {
            eprintln!("note: parallel execution is not implemented; running on one thread");
        }
    }
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Predict(args) => cmd_predict(args, &file),
        Command::Sweep(args) => cmd_sweep(args, &file),
        Command::Params(args) => cmd_params(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
