//! `selhn` command-line tool: synthetic data generation, training,
//! checkpoint evaluation and gradient checking.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or format error,
//! 4 numerical abort, 1 anything else.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use selhn::data::{write_features, Split};
use selhn::harness::{load_features, read_config, run_eval, run_gradcheck, run_training, GradcheckConfig, RunConfig};
use selhn::evalmetrics::RecallReport;

#[derive(Parser)]
#[command(name = "selhn", about = "Triplet-loss family training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset and write it as an HNSF file.
    GenData(GenData),
    /// Train an image/text encoder pair.
    Train(Train),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(Eval),
    /// Check analytic parameter gradients against finite differences.
    GradCheck(GradCheck),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2400)]
    items: usize,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 64)]
    dv: usize,
    #[arg(long, default_value_t = 64)]
    dt: usize,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    #[arg(long, default_value_t = 4)]
    words: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    confuser_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    confuser_perturb: f64,
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    /// Image encoder architecture (fc, mlp, rmlp).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Feature file, or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Feature file; without it the dataset is rebuilt from `--config`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Configuration the checkpoint was trained with (for split sizes or synthetic data).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the report as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheck {
    /// Non-skipped instances per (loss, arch) pair.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn overrides(t: &Train) -> Result<Vec<(String, String)>> {
    let named = [
        ("loss", &t.loss),
        ("arch", &t.arch),
        ("epsilon", &t.epsilon),
        ("margin", &t.margin),
        ("epochs", &t.epochs),
        ("batch", &t.batch),
        ("seed", &t.seed),
        ("data", &t.data),
        ("out", &t.out),
    ];
    let mut out: Vec<(String, String)> = named
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
    for kv in &t.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got `{kv}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn print_report(r: &RecallReport) {
    println!(
        "i2t R@1 {:.2} R@5 {:.2} R@10 {:.2} | t2i R@1 {:.2} R@5 {:.2} R@10 {:.2} | rsum {:.2}",
        r.i2t[0], r.i2t[1], r.i2t[2], r.t2i[0], r.t2i[1], r.t2i[2], r.rsum
    );
}

fn train(t: Train) -> Result<()> {
    let mut cfg = read_config(t.config.as_deref(), &overrides(&t)?)?;
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("run"));
    }
    let outcome = run_training(&cfg)?;
    for row in &outcome.rows {
        let rsum = row.recall.map_or(String::from("-"), |r| format!("{:.2}", r.rsum));
        println!(
            "epoch {:>3}  loss {:.5}  hn {:.3}  ds {:.4}/{:.4}  gnorm {:.3e}/{:.3e}  rsum {}",
            row.epoch,
            row.loss_value,
            row.branch_fraction_hn,
            row.mean_delta_s_i2t,
            row.mean_delta_s_t2i,
            row.grad_norm_first_layer_img,
            row.grad_norm_first_layer_txt,
            rsum
        );
    }
    if let Some((epoch, r)) = outcome.best {
        print!("best epoch {epoch}: ");
        print_report(&r);
    }
    println!("outputs in {}", cfg.out.as_ref().expect("set above").display());
    Ok(())
}

fn eval(e: Eval) -> Result<()> {
    let cfg = read_config(e.config.as_deref(), &[])?;
    let split: Split = e.split.parse()?;
    let ds = match &e.data {
        Some(path) => {
            let mut ds = load_features(path)?;
            ds.assign_splits(cfg.val_items, cfg.test_items)?;
            ds
        }
        None => cfg.load_dataset()?,
    };
    let report = run_eval(&e.ckpt, &ds, split)?;
    print_report(&report);
    if let Some(path) = &e.out {
        fs::write(path, format!("{}\n{}\n", RecallReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(())
}

fn gen_data(g: GenData) -> Result<()> {
    let overrides: Vec<(String, String)> = [
        ("synth_items", g.items.to_string()),
        ("synth_latent", g.latent.to_string()),
        ("synth_dv", g.dv.to_string()),
        ("synth_dt", g.dt.to_string()),
        ("synth_regions", g.regions.to_string()),
        ("synth_words", g.words.to_string()),
        ("synth_noise", g.noise.to_string()),
        ("synth_confuser_fraction", g.confuser_fraction.to_string()),
        ("synth_confuser_perturb", g.confuser_perturb.to_string()),
        ("synth_offset", g.offset.to_string()),
        ("synth_seed", g.seed.to_string()),
        // split sizes are irrelevant to the file
        ("val_items", "0".into()),
        ("test_items", "0".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let cfg: RunConfig = read_config(None, &overrides)?;
    let ds = cfg.load_dataset()?;
    write_features(&g.out, &ds)?;
    println!("wrote {} items to {}", ds.len(), g.out.display());
    Ok(())
}

fn grad_check(g: GradCheck) -> Result<bool> {
    let report = run_gradcheck(&GradcheckConfig {
        seeds: g.seeds,
        base_seed: g.seed,
        ..Default::default()
    })?;
    print!("{}", report.table());
    println!("{}", if report.pass() { "all pass" } else { "FAILED" });
    Ok(report.pass())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(g) => gen_data(g)?,
        Command::Train(t) => train(t)?,
        Command::Eval(e) => eval(e)?,
        Command::GradCheck(g) => return grad_check(g),
        Command::Version => println!("selhn {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<selhn::Error>().map_or(1, selhn::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
