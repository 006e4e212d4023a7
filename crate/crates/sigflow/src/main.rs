use clap::{Args, Parser, Subcommand};
use sigflow::cnsde::generate;
use sigflow::config::RunConfig;
use sigflow::data::{
    aggregate_buckets, format_float, load_csv, make_windows, normalize_stream, simulate_ar,
    split_and_normalize, write_csv, Dataset,
};
use sigflow::error::{Result, SigflowError};
use sigflow::evaluation::{
    classification_metric, extreme_values_metric, generate_per_pair, ho_sigw1_metric,
    unordered_w1, ExtremeSign, MetricReport, W1Variant,
};
use sigflow::sde::{SolveMode, TapeStats};
use sigflow::signature::Stream;
use sigflow::training::{
    load_checkpoint, save_checkpoint, sigcwgan_loss, train, LossLogRow,
};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sigflow", version, about = "Train and evaluate conditional neural SDE generators with the signature-Wasserstein loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// flat `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// configuration overrides, e.g. --set d_z=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// master seed (overrides the `seed` key)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an AR(p) series and write it as CSV
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator and write the best-validation checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample output streams conditioned on an input CSV
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the metric battery against a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare solver memory/time across step counts and modes
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => cmd_simulate(&load_config(&common)?),
        Command::Train { common, resume } => cmd_train(&load_config(&common)?, resume.as_deref()),
        Command::Generate { common } => cmd_generate(&load_config(&common)?),
        Command::Evaluate { common } => cmd_evaluate(&load_config(&common)?),
        Command::Bench { common } => cmd_bench(&load_config(&common)?),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(cfg: &RunConfig, dir: &Path, name: &str, extras: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    text.push_str("# resolved configuration\n");
    text.push_str(&cfg.to_text());
    if !extras.is_empty() {
        text.push_str("# run details\n");
        for (k, v) in extras {
            text.push_str(&format!("# {k} = {v}\n"));
        }
    }
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn source_stream(cfg: &RunConfig) -> Result<(Stream, String)> {
    let (mut s, source) = if cfg.data_path.is_empty() {
        let s = simulate_ar(
            &cfg.ar_coeffs,
            cfg.ar_noise_std,
            cfg.ar_length,
            cfg.ar_burn_in,
            cfg.data_seed(),
        )?;
        (s, "simulated".to_string())
    } else {
        let s = load_csv(Path::new(&cfg.data_path), cfg.log_transform)?;
        (s, cfg.data_path.clone())
    };
    if cfg.bucket_width > 0.0 {
        s = aggregate_buckets(&s, cfg.bucket_width)?;
    }
    Ok((s, source))
}

fn build_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<(String, String)>)> {
    let (series, source) = source_stream(cfg)?;
    let pairs = make_windows(&series, &cfg.window_spec())?;
    let ds = split_and_normalize(
        &pairs,
        (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction),
        cfg.chronological,
    )?;
    let extras = vec![
        ("data_source".to_string(), source),
        ("pairs".to_string(), pairs.len().to_string()),
        ("train_pairs".to_string(), ds.train.len().to_string()),
        ("val_pairs".to_string(), ds.val.len().to_string()),
        ("test_pairs".to_string(), ds.test.len().to_string()),
        ("norm_mean".to_string(), format_float(ds.norm.mean)),
        ("norm_std".to_string(), format_float(ds.norm.std)),
    ];
    Ok((ds, extras))
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let dir = ensure_out_dir(cfg)?;
    let s = simulate_ar(
        &cfg.ar_coeffs,
        cfg.ar_noise_std,
        cfg.ar_length,
        cfg.ar_burn_in,
        cfg.data_seed(),
    )?;
    let mut buf = Vec::new();
    write_csv(&s, &mut buf)?;
    let path = dir.join("simulated.csv");
    std::fs::write(&path, buf)?;
    write_manifest(
        cfg,
        &dir,
        "simulate_manifest.txt",
        &[("rows".to_string(), s.len().to_string())],
    )?;
    println!("wrote {} rows to {}", s.len(), path.display());
    Ok(())
}

fn write_loss_log(log: &[LossLogRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,train_loss,val_loss\n");
    for row in log {
        let cell = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{}\n",
            row.step,
            cell(row.train_loss),
            cell(row.val_loss)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let dir = ensure_out_dir(cfg)?;
    let (ds, mut extras) = build_dataset(cfg)?;
    let d_x = ds.train[0].0.channels();
    let d_y = ds.train[0].1.channels();
    let gc = cfg.gen_config(d_x, d_y);
    let tc = cfg.train_config();
    let previous = resume.map(load_checkpoint).transpose()?;
    let (ckpt, log) = train(&ds, &tc, &gc, previous.as_ref())?;
    let ckpt_path = cfg.resolved_checkpoint_path();
    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_loss_log(&log, &dir.join("loss_log.csv"))?;
    extras.push(("best_step".to_string(), ckpt.step.to_string()));
    extras.push(("best_val_loss".to_string(), format_float(ckpt.best_val_loss)));
    write_manifest(cfg, &dir, "train_manifest.txt", &extras)?;
    println!(
        "trained {} steps; best validation loss {} at step {}; checkpoint: {}",
        log.last().map_or(0, |r| r.step),
        ckpt.best_val_loss,
        ckpt.step,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let dir = ensure_out_dir(cfg)?;
    if cfg.generate_input.is_empty() {
        return Err(SigflowError::Config(
            "generate needs `generate_input` pointing at a conditioning CSV".into(),
        ));
    }
    let ckpt = load_checkpoint(&cfg.resolved_checkpoint_path())?;
    let x_raw = load_csv(Path::new(&cfg.generate_input), cfg.log_transform)?;
    if x_raw.channels() != ckpt.gen_config.d_x {
        return Err(SigflowError::Data(format!(
            "conditioning CSV has {} channels but the checkpoint expects {}",
            x_raw.channels(),
            ckpt.gen_config.d_x
        )));
    }
    let x = normalize_stream(&x_raw, &ckpt.norm)?;
    let samples = generate(
        &x,
        &ckpt.params,
        &ckpt.gen_config,
        &ckpt.model.in_scaler,
        cfg.n_samples,
        cfg.generate_seed(),
    )?;
    let mut out = String::new();
    let header: Vec<String> = std::iter::once("sample".to_string())
        .chain(std::iter::once("t".to_string()))
        .chain((1..=ckpt.gen_config.d_y).map(|j| format!("v{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        for (t, row) in s.timestamps().iter().zip(s.values()) {
            let mut cells = vec![i.to_string(), format_float(*t)];
            cells.extend(row.iter().map(|v| format_float(ckpt.norm.invert(*v))));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    let path = dir.join("generated.csv");
    std::fs::write(&path, out)?;
    write_manifest(
        cfg,
        &dir,
        "generate_manifest.txt",
        &[("samples".to_string(), samples.len().to_string())],
    )?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = ensure_out_dir(cfg)?;
    let ckpt = load_checkpoint(&cfg.resolved_checkpoint_path())?;
    let (ds, mut extras) = build_dataset(cfg)?;
    if ds.test.is_empty() {
        return Err(SigflowError::Data("evaluation needs a test split".into()));
    }
    let seeds = cfg.eval_repeat_seeds();
    let mut report = MetricReport::default();
    report.add_metadata("eval_seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    report.add_metadata("eval_m", cfg.eval_m);
    report.add_metadata("classifier", "logistic regression on signature features");
    report.add_metadata("overlapping_windows", (cfg.stride < cfg.input_len + cfg.output_len).to_string());

    let variants = [
        ("w1_a", W1Variant::PooledValues),
        ("w1_b", W1Variant::PooledIncrements),
        ("w1_c", W1Variant::MaxIncrement),
        ("w1_d", W1Variant::MinIncrement),
    ];
    let want_w1 = variants.iter().any(|(n, _)| cfg.metric_enabled(n));
    let want_extreme = cfg.metric_enabled("extreme");
    for &seed in &seeds {
        if want_w1 {
            let generated = generate_per_pair(&ckpt, &ds.test, cfg.eval_m, seed)?;
            for (name, variant) in variants {
                if cfg.metric_enabled(name) {
                    let v = unordered_w1(&ds.test, &generated, variant)?;
                    push_sample(&mut report, name, v)?;
                }
            }
        }
        if cfg.metric_enabled("classification") {
            let out = classification_metric(
                &ds.test,
                &ckpt,
                cfg.depth_in,
                cfg.depth_out,
                cfg.classifier_train_fraction,
                seed,
            )?;
            push_sample(&mut report, "classification_auc", out.auc)?;
            push_sample(&mut report, "classification_accuracy", out.accuracy)?;
        }
        if cfg.metric_enabled("ho_sigw1") {
            let v = ho_sigw1_metric(
                &ds.train,
                &ds.test,
                &ckpt,
                cfg.ho_depth_in,
                cfg.ho_depth_out,
                cfg.eval_m,
                cfg.lambda,
                seed,
            )?;
            push_sample(&mut report, "ho_sigw1", v)?;
        }
        if want_extreme {
            let v = extreme_values_metric(
                &ds.test,
                &ckpt,
                cfg.percentile,
                cfg.eval_m,
                ExtremeSign::parse(&cfg.extreme_sign)?,
                cfg.extreme_relative,
                seed,
            )?;
            push_sample(&mut report, "extreme_auc", v)?;
        }
    }
    let report = finalize_report(report)?;
    std::fs::write(dir.join("report.txt"), report.to_text())?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    extras.push(("metrics".to_string(), cfg.metrics.clone()));
    write_manifest(cfg, &dir, "evaluate_manifest.txt", &extras)?;
    print!("{}", report.to_text());
    Ok(())
}

// accumulate per-seed samples as rows named "<metric>@sample", collapsed
// into mean +/- std by finalize_report
fn push_sample(report: &mut MetricReport, name: &str, value: f64) -> Result<()> {
    report.push(&format!("{name}@sample"), &[value])
}

fn finalize_report(raw: MetricReport) -> Result<MetricReport> {
    let mut grouped: Vec<(String, Vec<f64>)> = Vec::new();
    for row in &raw.rows {
        let name = row.name.trim_end_matches("@sample").to_string();
        match grouped.iter_mut().find(|(n, _)| *n == name) {
            Some((_, vals)) => vals.push(row.mean),
            None => grouped.push((name, vec![row.mean])),
        }
    }
    let mut out = MetricReport {
        rows: Vec::new(),
        metadata: raw.metadata,
    };
    for (name, vals) in grouped {
        out.push(&name, &vals)?;
    }
    Ok(out)
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let dir = ensure_out_dir(cfg)?;
    let steps: Vec<usize> = cfg
        .bench_steps
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| SigflowError::Config(format!("bad bench step count `{s}`")))
        })
        .collect::<Result<_>>()?;
    let (ds, _) = build_dataset(cfg)?;
    let d_x = ds.train[0].0.channels();
    let d_y = ds.train[0].1.channels();
    let tc = cfg.train_config();
    let model = sigflow::sigmetric::fit_cond_expsig(
        &ds.train,
        tc.depth_in,
        tc.depth_out,
        tc.lambda,
        cfg.gen_config(d_x, d_y).augment_options(),
    )?;
    let batch: Vec<(u64, &Stream)> = ds
        .train
        .iter()
        .take(cfg.bench_batch)
        .enumerate()
        .map(|(i, (x, _))| (i as u64, x))
        .collect();

    let mut csv = String::from("mode,steps,loss,retained_tapes,peak_bytes,seconds_per_step\n");
    println!("{:<12} {:>6} {:>14} {:>15} {:>12} {:>16}", "mode", "steps", "loss", "retained_tapes", "peak_bytes", "secs_per_step");
    for &n in &steps {
        let mut gc = cfg.gen_config(d_x, d_y);
        gc.solver_steps = n.max(gc.output_len - 1);
        let params = sigflow::cnsde::CnsdeParams::init(&gc, cfg.train_seed())?;
        for (mode, name) in [(SolveMode::Reversible, "reversible"), (SolveMode::StoreAll, "store_all")] {
            let mut stats = TapeStats::default();
            let start = Instant::now();
            let (loss, _) = sigcwgan_loss(
                &batch,
                &model,
                &params,
                &gc,
                cfg.bench_m,
                cfg.eval_seed(),
                mode,
                &mut stats,
            )?;
            let secs = start.elapsed().as_secs_f64();
            println!(
                "{:<12} {:>6} {:>14.6} {:>15} {:>12} {:>16.6}",
                name, gc.solver_steps, loss, stats.retained, stats.peak_bytes, secs
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                gc.solver_steps,
                format_float(loss),
                stats.retained,
                stats.peak_bytes,
                format_float(secs)
            ));
        }
    }
    std::fs::write(dir.join("bench.csv"), &csv)?;
    write_manifest(cfg, &dir, "bench_manifest.txt", &[])?;
    let mut stdout = std::io::stdout();
    stdout.flush().ok();
    Ok(())
}
