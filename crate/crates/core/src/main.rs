//! Command-line entry point: train, score, evaluate, benchmark, synthesize.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use clap::{Parser, Subcommand};
use ndarray::Array2;
use ssmspoof::augment::{synth_dataset, toy_frontend, Waveform, DEFAULT_SAMPLE_RATE};
use ssmspoof::bench::{
    emit_csv, emit_svg, measure_rtf, AttentionRef, RtfRecord,
    DEFAULT_DURATIONS,
};
use ssmspoof::ckpt::{load_params, save_params};
use ssmspoof::config::{load_cost_model, FullConfig};
use ssmspoof::metrics::{compute_eer, format_report, join_trials, min_tdcf, read_protocol, read_scores};
use ssmspoof::model::{detection_score, model_forward, ModelParams};
use ssmspoof::train::{eval_features, train, TrainUtt};
use ssmspoof::Error;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ssmspoof", version, about = "Selective-SSM speech anti-spoofing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector from a config file.
    Train {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        /// Override a config value as section.key=value; repeatable.
        #[arg(long = "set", value_name = "k=v")]
        set: Vec<String>,
    },
    /// Score a manifest of utterances with a checkpoint.
    Score {
        #[arg(long, value_name = "F")]
        ckpt: PathBuf,
        #[arg(long, value_name = "F")]
        manifest: PathBuf,
        #[arg(long, value_name = "F")]
        out: PathBuf,
    },
    /// Compute EER (and optionally min t-DCF) from scores and a protocol.
    Eval {
        #[arg(long, value_name = "F")]
        scores: PathBuf,
        #[arg(long, value_name = "F")]
        protocol: PathBuf,
        /// Cost-model file enabling the t-DCF report.
        #[arg(long, value_name = "F")]
        tdcf: Option<PathBuf>,
    },
    /// Real-time-factor sweep of the trunk vs an attention reference.
    Bench {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        #[arg(long, value_name = "D")]
        out_dir: PathBuf,
        #[arg(long, value_name = "N")]
        runs: Option<usize>,
    },
    /// Generate the synthetic labeled dataset (N utterances per class for
    /// the train split, half that for dev).
    Synth {
        #[arg(long, value_name = "N")]
        seed: u64,
        #[arg(long, value_name = "N")]
        n: usize,
        #[arg(long, value_name = "D")]
        out_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidCostModel(_) => 1,
        Error::Numerical(_) | Error::NonFiniteInput => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own help/version output is a success path
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::Train { config, set } => cmd_train(&config, &set),
        Command::Score { ckpt, manifest, out } => cmd_score(&ckpt, &manifest, &out),
        Command::Eval {
            scores,
            protocol,
            tdcf,
        } => cmd_eval(&scores, &protocol, tdcf.as_deref()),
        Command::Bench {
            config,
            out_dir,
            runs,
        } => cmd_bench(&config, &out_dir, runs),
        Command::Synth { seed, n, out_dir } => cmd_synth(seed, n, &out_dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn load_set(manifest: &Path) -> Result<Vec<TrainUtt>, Error> {
    let entries = ssmspoof::augment::read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let wave = ssmspoof::augment::read_wav(&e.path)?;
        out.push(TrainUtt {
            id: e.utt_id,
            wave,
            label: e.label,
        });
    }
    Ok(out)
}

fn run_dir(base: Option<&Path>, seed: u64) -> Result<PathBuf, Error> {
    let dir = match base {
        Some(d) => d.to_path_buf(),
        None => {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_secs();
            PathBuf::from(format!("runs/run_{ts}_{seed}"))
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_train(config: &Path, overrides: &[String]) -> Result<(), Error> {
    let cfg = FullConfig::load(config, overrides)?;
    let train_manifest = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_manifest is required for train".into()))?;
    let dev_manifest = cfg
        .data
        .dev_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.dev_manifest is required for train".into()))?;
    let train_set = load_set(train_manifest)?;
    let dev_set = load_set(dev_manifest)?;
    let dir = run_dir(cfg.data.out_dir.as_deref(), cfg.model.seed)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved_text())?;
    let log_path = dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path)?;
    let outcome = train(
        &train_set,
        &dev_set,
        &cfg.model,
        &cfg.train,
        &cfg.augment,
        |line| {
            use std::io::Write;
            println!("{line}");
            let _ = writeln!(log_file, "{line}");
        },
    )?;
    let ckpt_path = dir.join("averaged.ckpt");
    save_params(&ckpt_path, &cfg.model, &outcome.averaged)?;
    for (i, k) in outcome.kept.iter().enumerate() {
        save_params(
            &dir.join(format!("top{}.ckpt", i + 1)),
            &cfg.model,
            &k.params,
        )?;
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_score(ckpt: &Path, manifest: &Path, out: &Path) -> Result<(), Error> {
    let (_cfg, params) = load_params(ckpt)?;
    let entries = ssmspoof::augment::read_manifest(manifest)?;
    let crop = ssmspoof::augment::TARGET_LEN;
    let mut lines = String::new();
    let mut failures = Vec::new();
    for e in &entries {
        match ssmspoof::augment::read_wav(&e.path).and_then(|w| {
            let feats = eval_features(&w, crop)?;
            let (logits, _) = model_forward(&feats, &params, false)?;
            Ok(detection_score(&logits))
        }) {
            Ok(score) => lines.push_str(&format!("{} {score:.6}\n", e.utt_id)),
            Err(err) => {
                lines.push_str(&format!("# error {} {err}\n", e.utt_id));
                failures.push((e.utt_id.clone(), err.to_string()));
            }
        }
    }
    if !failures.is_empty() {
        lines.push_str(&format!("# partial: {} utterances failed\n", failures.len()));
    }
    std::fs::write(out, lines)?;
    if !failures.is_empty() {
        for (id, msg) in &failures {
            eprintln!("failed to score {id}: {msg}");
        }
        return Err(Error::Data(format!(
            "scored {} of {} utterances; output is partial",
            entries.len() - failures.len(),
            entries.len()
        )));
    }
    Ok(())
}

fn cmd_eval(scores: &Path, protocol: &Path, tdcf: Option<&Path>) -> Result<(), Error> {
    let scores = read_scores(scores)?;
    let protocol = read_protocol(protocol)?;
    let (joined, unmatched) = join_trials(&scores, &protocol);
    for id in &unmatched {
        eprintln!("unmatched id: {id}");
    }
    let (eer, threshold) = compute_eer(&joined)?;
    let tdcf_result = match tdcf {
        Some(path) => Some(min_tdcf(&joined, &load_cost_model(path)?)?),
        None => None,
    };
    print!("{}", format_report(eer, threshold, tdcf_result));
    Ok(())
}

fn cmd_bench(config: &Path, out_dir: &Path, runs: Option<usize>) -> Result<(), Error> {
    let cfg = FullConfig::load(config, &[])?;
    let runs = runs.unwrap_or(cfg.bench.runs);
    let warmup = cfg.bench.warmup;
    std::fs::create_dir_all(out_dir)?;
    let params = ModelParams::<f32>::init(&cfg.model)?;
    let trunk = &params.trunk;
    let d = cfg.model.d_model;
    let trunk_name = format!("trunk_{}", cfg.model.variant.name());
    let mut records: Vec<RtfRecord> = measure_rtf(
        &trunk_name,
        d,
        |x| {
            trunk.forward(x, false).unwrap();
        },
        &DEFAULT_DURATIONS,
        runs,
        warmup,
    )?;
    // front-end-inclusive timing: process a real waveform of each duration
    for &dur in &DEFAULT_DURATIONS {
        let n = (dur * DEFAULT_SAMPLE_RATE as f64) as usize;
        let wave = Waveform::new(
            (0..n)
                .map(|t| 0.1 * (0.05 * t as f32).sin())
                .collect(),
            DEFAULT_SAMPLE_RATE,
        );
        let mut rec = measure_rtf(
            &format!("frontend+{trunk_name}"),
            1,
            |_| {
                let feats = toy_frontend(&wave).unwrap();
                let proj = feats.dot(&params.proj_w.t()) + &params.proj_b;
                trunk.forward(&proj, false).unwrap();
            },
            &[dur],
            runs,
            warmup,
        )?;
        records.append(&mut rec);
    }
    let att = AttentionRef::<f32>::init(d, cfg.model.seed);
    let mut att_records = measure_rtf(
        "attention",
        d,
        |x: &Array2<f32>| {
            att.forward(x).unwrap();
        },
        &DEFAULT_DURATIONS,
        runs,
        warmup,
    )?;
    records.append(&mut att_records);
    std::fs::write(out_dir.join("rtf.csv"), emit_csv(&records))?;
    std::fs::write(out_dir.join("rtf.svg"), emit_svg(&records)?)?;
    for r in &records {
        println!(
            "{} {}s frames={} rtf={:.3e} std={:.1e}",
            r.system, r.duration_s, r.frames, r.rtf, r.std
        );
    }
    Ok(())
}

fn cmd_synth(seed: u64, n: usize, out_dir: &Path) -> Result<(), Error> {
    let (train_manifest, dev_manifest) = synth_dataset(seed, n, out_dir)?;
    println!("train manifest: {}", train_manifest.display());
    println!("dev manifest: {}", dev_manifest.display());
    Ok(())
}
