//! `duforge`: degradation, restoration, estimation, tokenization, evaluation,
//! dataset building, parameter sensitivity and the reward server.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use duforge_core::cues::{build_composite, write_cues};
use duforge_core::dataset::{build, read_manifest, BuildConfig, ManifestRecord};
use duforge_core::degrade::degrade;
use duforge_core::estimate::{predict_with_reference, Prediction};
use duforge_core::metrics::{aggregate, psnr, score_understanding, ssim, EvalReport};
use duforge_core::restore::{ProcessRestorer, RestoreOptions, RestorerRegistry};
use duforge_core::reward::ScorerRegistry;
use duforge_core::sensitivity::{sensitivity, SensitivitySample};
use duforge_core::server::{RewardMode, RewardService, DEFAULT_RESIZE};
use duforge_core::tokenizer::{decode, encode, verify_prop1, verify_prop2, Prop1Setup, Prop2Setup, QuantGrid, TokenSeq};
use duforge_core::{load_png, save_png, DegradationSpec, ParamKey};

#[derive(Parser)]
#[command(name = "duforge", version, about = "Parametric image degradation toolkit")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a degradation spec to an image.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        /// Spec document: a file path or inline JSON.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a degradation given its spec.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = RestoreOptions::default().wiener_lambda)]
        wiener_lambda: f64,
        /// Route through a registered external restorer.
        #[arg(long)]
        external: Option<String>,
        /// Register an external restorer as NAME=PROGRAM (repeatable).
        #[arg(long = "register", value_name = "NAME=PROGRAM")]
        register: Vec<String>,
        /// Clean image; when given, PSNR and SSIM are printed.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Blind prediction for one image, or JSON lines for every manifest record.
    Estimate {
        #[arg(long = "in", required_unless_present = "manifest", conflicts_with = "manifest")]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Size of the undegraded frame as WxH, when known.
        #[arg(long, value_parser = parse_dims)]
        reference_dims: Option<(usize, usize)>,
        /// Also write the spectrum and edge cues next to the input.
        #[arg(long)]
        emit_cues: bool,
    },
    /// Write the spectrum and edge cues of an image.
    Cues {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Spec document to token sequence.
    Tokenize {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        delta: f64,
    },
    /// Token sequence to spec document.
    Detokenize {
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        delta: f64,
    },
    /// Score predictions against a manifest.
    Eval {
        /// JSON lines of {"id", "prediction"}.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Generate a degraded dataset with its manifest.
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Master seed; overrides the config.
        #[arg(long, env = "DUFORGE_SEED")]
        seed: Option<u64>,
    },
    /// Restoration fidelity against parameter error.
    Sensitivity {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        errors: Vec<f64>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Monte-Carlo check of the quantization loss and risk bounds.
    VerifyBounds {
        #[arg(long, value_delimiter = ',', required = true)]
        delta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, env = "DUFORGE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Serve rewards over line-delimited JSON.
    RewardServe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
        /// Comparison resolution; 0 keeps native size.
        #[arg(long, default_value_t = DEFAULT_RESIZE)]
        resize: usize,
        /// No-reference mode with the named scorer.
        #[arg(long)]
        scorer: Option<String>,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(w)?, n(h)?))
}

/// Inline JSON when the argument starts with `{`, otherwise a file path.
fn load_spec(arg: &str) -> Result<DegradationSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading spec {arg}"))?
    };
    let spec = DegradationSpec::from_json_str(&text).with_context(|| format!("parsing spec {arg}"))?;
    spec.validate()?;
    Ok(spec)
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| anyhow!("{} has no file name", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let threads = cli.threads;
    match cli.command {
        Command::Degrade { input, spec, out } => {
            let spec = load_spec(&spec)?;
            let img = load_png(&input)?;
            save_png(&degrade(&img, &spec)?, &out)?;
        }
        Command::Restore {
            input,
            spec,
            out,
            wiener_lambda,
            external,
            register,
            reference,
        } => {
            let spec = load_spec(&spec)?;
            let opts = RestoreOptions {
                wiener_lambda,
                ..RestoreOptions::default()
            };
            opts.validate()?;
            let mut registry = RestorerRegistry::new();
            for entry in &register {
                let (name, program) = entry
                    .split_once('=')
                    .ok_or_else(|| anyhow!("--register expects NAME=PROGRAM, got {entry:?}"))?;
                registry.register(name, Arc::new(ProcessRestorer::new(program, Vec::new())));
            }
            let img = load_png(&input)?;
            let restored = registry.restore_with(external.as_deref(), &img, &spec, &opts)?;
            save_png(&restored, &out)?;
            if let Some(r) = reference {
                let clean = load_png(&r)?;
                println!("psnr={:.4}", psnr(&restored.quantize_8bit(), &clean)?);
                println!("ssim={:.6}", ssim(&restored.quantize_8bit(), &clean)?);
            }
        }
        Command::Estimate {
            input,
            manifest,
            reference_dims,
            emit_cues,
        } => match (input, manifest) {
            (Some(input), _) => {
                let img = load_png(&input)?;
                let pred = predict_with_reference(&img, reference_dims)?;
                if emit_cues {
                    let dir = input.parent().unwrap_or(Path::new("."));
                    write_cues(&build_composite(&img)?, dir, &stem(&input)?)?;
                }
                println!("{}", pred.to_json());
            }
            (None, Some(manifest)) => estimate_manifest(&manifest)?,
            (None, None) => unreachable!("clap requires one of --in, --manifest"),
        },
        Command::Cues { input, out_dir } => {
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let img = load_png(&input)?;
            let (fft, edge) = write_cues(&build_composite(&img)?, &out_dir, &stem(&input)?)?;
            println!("{}\n{}", fft.display(), edge.display());
        }
        Command::Tokenize { spec, delta } => {
            let grid = QuantGrid::new(delta)?;
            println!("{}", encode(&load_spec(&spec)?, &grid)?);
        }
        Command::Detokenize { tokens, delta } => {
            let grid = QuantGrid::new(delta)?;
            let seq: TokenSeq = tokens.parse()?;
            println!("{}", decode(&seq, &grid)?.to_json());
        }
        Command::Eval { pred, manifest, out_csv } => {
            let report = evaluate(&pred, &manifest)?;
            write_file(&out_csv, &eval_csv(&report))?;
            print_report(&report);
        }
        Command::BuildDataset { config, out, seed } => {
            let mut config = BuildConfig::load(&config)?;
            if let Some(s) = seed {
                config.master_seed = s;
            }
            let records = build(&config, &out, threads)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Sensitivity {
            manifest,
            param,
            errors,
            out_csv,
        } => {
            let key: ParamKey = param.parse()?;
            let root = manifest_root(&manifest);
            let samples = read_manifest(&manifest)?
                .into_iter()
                .filter(|r| r.spec.get(key).is_some())
                .map(|r| {
                    Ok(SensitivitySample {
                        clean: load_png(root.join(&r.clean_path))?,
                        degraded: load_png(root.join(&r.degraded_path))?,
                        truth: r.spec,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = sensitivity(&samples, key, &errors, &RestoreOptions::default())?;
            write_file(&out_csv, &report.to_csv())?;
            println!("samples={} observations={}", samples.len(), report.observations.len());
            println!("pearson_psnr={:.6}", report.r_psnr);
            println!("pearson_ssim={:.6}", report.r_ssim);
            println!("pearson_psnr_means={:.6}", report.r_psnr_means);
            println!("pearson_ssim_means={:.6}", report.r_ssim_means);
        }
        Command::VerifyBounds {
            delta,
            epsilon,
            trials,
            seed,
        } => verify_bounds(&delta, &epsilon, trials, seed)?,
        Command::RewardServe {
            manifest,
            listen,
            stdio,
            resize,
            scorer,
        } => {
            let mut service = RewardService::from_manifest(&manifest, (resize > 0).then_some(resize))?;
            if let Some(name) = scorer {
                service = service.with_mode(RewardMode::NoReference(ScorerRegistry::default().get(&name)?));
            }
            if stdio {
                let stdin = io::stdin();
                service.serve(stdin.lock(), io::stdout().lock())?;
            } else {
                serve_tcp(service, &listen.expect("clap requires --listen without --stdio"))?;
            }
        }
    }
    Ok(())
}

fn estimate_manifest(manifest: &Path) -> Result<()> {
    let root = manifest_root(manifest);
    let records = read_manifest(manifest)?;
    let mut out = io::stdout().lock();
    for rec in &records {
        let img = load_png(root.join(&rec.degraded_path))?;
        let clean = load_png(root.join(&rec.clean_path))?;
        let pred: Prediction = predict_with_reference(&img, Some(rec.reference_dims(&clean)))?;
        writeln!(out, "{}", json!({ "id": rec.id, "prediction": pred.spec.to_json() }))?;
    }
    Ok(())
}

/// Predictions keyed by id. A missing or unparseable prediction scores as a
/// structural failure.
fn evaluate(pred: &Path, manifest: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let mut preds = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).with_context(|| format!("{} line {}", pred.display(), i + 1))?;
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("{} line {}: missing id", pred.display(), i + 1))?;
        let spec = v.get("prediction").and_then(|p| DegradationSpec::from_json(p).ok());
        preds.insert(id.to_string(), spec);
    }
    let records: Vec<ManifestRecord> = read_manifest(manifest)?;
    let rows = records
        .iter()
        .map(|r| score_understanding(&r.id, preds.get(&r.id).and_then(Option::as_ref), &r.spec))
        .collect();
    Ok(aggregate(rows)?)
}

fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("id,true_type,pred_type,type_correct,keys_correct,key,p_abs,p_rel\n");
    for row in &report.rows {
        let pred = row.pred_type.map(|t| t.name()).unwrap_or("");
        for (key, e) in &row.per_key {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.id,
                row.true_type.name(),
                pred,
                row.type_correct,
                row.keys_correct,
                key.name(),
                e.p_abs,
                e.p_rel
            ));
        }
    }
    s
}

fn print_report(report: &EvalReport) {
    println!("t_acc={:.4}", report.t_acc);
    println!("t_f1_macro={:.4}", report.t_f1_macro);
    println!("j_acc={:.4}", report.j_acc);
    for (key, e) in &report.per_key {
        println!("{}: p_abs={:.4} p_rel={:.4}", key.name(), e.p_abs, e.p_rel);
    }
    println!("p_abs_avg={:.4}", report.p_abs_avg);
    println!("p_rel_avg={:.4}", report.p_rel_avg);
}

fn verify_bounds(deltas: &[f64], epsilons: &[f64], trials: usize, seed: u64) -> Result<()> {
    println!("delta,epsilon,r_cls,bound_cls,r_reg,bound_reg,kl,holds");
    let mut all = true;
    for &delta in deltas {
        for &epsilon in epsilons {
            let r = verify_prop2(&Prop2Setup {
                epsilon,
                delta,
                trials,
                seed,
                ..Prop2Setup::default()
            })?;
            let holds = r.r_cls <= r.bound_cls && r.r_reg <= r.bound_reg;
            all &= holds;
            println!(
                "{delta},{epsilon},{},{},{},{},{},{holds}",
                r.r_cls, r.bound_cls, r.r_reg, r.bound_reg, r.kl
            );
        }
    }
    println!("delta,loss_gap");
    for &delta in deltas {
        let r = verify_prop1(&Prop1Setup {
            delta,
            trials: trials.max(10_000),
            seed,
            ..Prop1Setup::default()
        })?;
        println!("{delta},{}", r.gap);
    }
    if !all {
        bail!("a risk bound was exceeded");
    }
    Ok(())
}

/// One thread per connection; each connection is answered in order.
fn serve_tcp(service: RewardService, addr: &str) -> Result<()> {
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    for conn in listener.incoming() {
        let conn = match conn {
            Ok(c) => c,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let service = service.clone();
        std::thread::spawn(move || {
            let peer = conn.peer_addr().ok();
            let result = conn
                .try_clone()
                .and_then(|writer| service.serve(BufReader::new(conn), writer));
            if let Err(e) = result {
                log::warn!("connection {peer:?}: {e}");
            }
        });
    }
    Ok(())
}

/// The error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
