//! Experiment plumbing: run configuration, the training loop with per-epoch
//! metrics, checkpoint evaluation, and the parameter-gradient check.
//!
//! # Configuration file
//!
//! A flat list of `key = value` lines; `#` starts a comment. Every key has a
//! default (see [`RunConfig::keys`]), unknown keys are rejected, and
//! command-line overrides win over the file. The fully resolved set is
//! written to `config.resolved` in the output directory, in a form
//! [`parse_config`] reads back to the same configuration.
//!
//! # Outputs
//!
//! `metrics.csv` (one row per epoch, header = [`MetricsRow::CSV_HEADER`]),
//! optional `steps.csv` (same columns per step, `log_steps = true`),
//! `config.resolved`, `ckpt_best` (best validation RSUM) and `ckpt_final`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{batch_iter, gen_synthetic, read_features, read_features_text, Mixing, PairedDataset, Split, SynthConfig};
use crate::encoders::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoders::{Encoder, EncoderArch, EncoderGrads, EncoderKind, FeatureSet, Mode, Pooling};
use crate::error::{Error, Result};
use crate::evalmetrics::{rsum, PairingMap, RecallReport};
use crate::graddiag::{first_layer_grad_norm, relative_error, vanishing_predicate};
use crate::losses::{chain_to_embeddings, cosine_sim_matrix, kink_distance, Branch, LossHyper, LossKind};
use crate::numerics::{gaussian_from, matmul_nt, rng_from_seed, Matrix};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// `HNSF` file, or the text format when the name ends in `.txt`.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub loss: LossKind,
    pub margin: f64,
    pub epsilon: f64,
    pub arch_img: EncoderKind,
    pub arch_txt: EncoderKind,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub mlp_activation: bool,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    pub batch: usize,
    pub seed: u64,
    pub data: DataSource,
    pub val_items: usize,
    pub test_items: usize,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub log_steps: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config(None, &[]).expect("defaults are valid")
    }
}

const DEFAULTS: &[(&str, &str)] = &[
    ("loss", "selhn"),
    ("margin", "0.2"),
    ("epsilon", "0.01"),
    ("arch", "fc"),
    ("arch_txt", "fc"),
    ("embed_dim", "32"),
    ("pooling", "mean"),
    ("mlp_activation", "false"),
    ("lr", "0.0005"),
    ("epochs", "15"),
    ("decay_epoch", "none"),
    ("decay_factor", "10"),
    ("weight_decay", "0.0001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("batch", "128"),
    ("seed", "0"),
    ("data", "synthetic"),
    ("synth_items", "2400"),
    ("synth_latent", "16"),
    ("synth_dv", "64"),
    ("synth_dt", "64"),
    ("synth_regions", "4"),
    ("synth_words", "4"),
    ("synth_noise", "0.1"),
    ("synth_confuser_fraction", "0.3"),
    ("synth_confuser_perturb", "0.1"),
    ("synth_offset", "0"),
    ("synth_mixing", "random"),
    ("synth_seed", "2024"),
    ("val_items", "200"),
    ("test_items", "200"),
    ("eval_every", "1"),
    ("log_steps", "false"),
    ("out", "none"),
];

struct Values(Vec<(&'static str, String)>);

impl Values {
    fn raw(&self, key: &str) -> &str {
        &self.0.iter().find(|(k, _)| *k == key).expect("known key").1
    }

    fn get<V: std::str::FromStr>(&self, key: &'static str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| Error::config(key, format!("cannot parse `{}`: {e}", self.raw(key))))
    }

    fn opt<V: std::str::FromStr>(&self, key: &'static str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        if self.raw(key) == "none" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }
}

/// Resolves a configuration from optional file text plus overrides (which win).
pub fn parse_config(file: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut values = Values(DEFAULTS.iter().map(|&(k, v)| (k, v.to_string())).collect());
    let mut set = |key: &str, value: &str| -> Result<()> {
        match values.0.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => {
                slot.1 = value.to_string();
                Ok(())
            }
            None => Err(Error::config(key, "unknown configuration key")),
        }
    };
    if let Some(text) = file {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("line {}: expected `key = value`", n + 1)))?;
            set(k.trim(), v.trim())?;
        }
    }
    for (k, v) in overrides {
        set(k, v)?;
    }
    build(&values)
}

pub fn read_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p)?),
        None => None,
    };
    parse_config(text.as_deref(), overrides)
}

fn build(v: &Values) -> Result<RunConfig> {
    let epochs: usize = v.get("epochs")?;
    let schedule = LrSchedule {
        base_lr: v.get("lr")?,
        total_epochs: epochs,
        decay_epoch: v.opt("decay_epoch")?.unwrap_or(epochs),
        decay_factor: v.get("decay_factor")?,
    };
    schedule.validate()?;
    let optim = AdamWConfig {
        beta1: v.get("beta1")?,
        beta2: v.get("beta2")?,
        eps: v.get("adam_eps")?,
        weight_decay: v.get("weight_decay")?,
    };
    optim.validate()?;
    let margin: f64 = v.get("margin")?;
    let epsilon: f64 = v.get("epsilon")?;
    LossHyper::new(margin, epsilon)?;

    let data = match v.raw("data") {
        "synthetic" => {
            let mixing = match v.raw("synth_mixing") {
                "random" => Mixing::Random,
                "identity" => Mixing::Identity,
                other => return Err(Error::config("synth_mixing", format!("unknown mixing `{other}` (random|identity)"))),
            };
            let cfg = SynthConfig {
                n_items: v.get("synth_items")?,
                latent_dim: v.get("synth_latent")?,
                image_dim: v.get("synth_dv")?,
                text_dim: v.get("synth_dt")?,
                regions: v.get("synth_regions")?,
                words: v.get("synth_words")?,
                noise_sigma: v.get("synth_noise")?,
                confuser_fraction: v.get("synth_confuser_fraction")?,
                confuser_perturb: v.get("synth_confuser_perturb")?,
                offset: v.get("synth_offset")?,
                mixing,
                seed: v.get("synth_seed")?,
            };
            cfg.validate()?;
            DataSource::Synthetic(cfg)
        }
        path => DataSource::File(PathBuf::from(path)),
    };

    let batch: usize = v.get("batch")?;
    if batch < 2 {
        return Err(Error::config("batch", format!("must be >= 2, got {batch}")));
    }
    let eval_every: usize = v.get("eval_every")?;
    if eval_every == 0 {
        return Err(Error::config("eval_every", "must be >= 1"));
    }
    let cfg = RunConfig {
        loss: v.get("loss")?,
        margin,
        epsilon,
        arch_img: v.get("arch")?,
        arch_txt: v.get("arch_txt")?,
        embed_dim: v.get("embed_dim")?,
        pooling: v.get("pooling")?,
        mlp_activation: v.get("mlp_activation")?,
        optim,
        schedule,
        batch,
        seed: v.get("seed")?,
        data,
        val_items: v.get("val_items")?,
        test_items: v.get("test_items")?,
        eval_every,
        log_steps: v.get("log_steps")?,
        out: v.opt::<PathBuf>("out")?,
    };
    // dims are checked against the data at run time; this catches odd d early
    for kind in [cfg.arch_img, cfg.arch_txt] {
        EncoderArch {
            pooling: cfg.pooling,
            mlp_activation: cfg.mlp_activation,
            ..EncoderArch::new(kind, 1, cfg.embed_dim)
        }
        .validate()?;
    }
    Ok(cfg)
}

impl RunConfig {
    /// Every accepted configuration key, in the order `config.resolved` uses.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    pub fn hyper(&self) -> LossHyper<f64> {
        LossHyper {
            margin: self.margin,
            threshold: self.epsilon,
        }
    }

    /// The resolved configuration as `key = value` lines.
    pub fn resolved(&self) -> String {
        let s = &self.schedule;
        let mut kv: Vec<(&str, String)> = vec![
            ("loss", self.loss.to_string()),
            ("margin", self.margin.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("arch", self.arch_img.to_string()),
            ("arch_txt", self.arch_txt.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("pooling", self.pooling.name().to_string()),
            ("mlp_activation", self.mlp_activation.to_string()),
            ("lr", s.base_lr.to_string()),
            ("epochs", s.total_epochs.to_string()),
            ("decay_epoch", s.decay_epoch.to_string()),
            ("decay_factor", s.decay_factor.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("adam_eps", self.optim.eps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
        ];
        match &self.data {
            DataSource::File(p) => kv.push(("data", p.display().to_string())),
            DataSource::Synthetic(c) => {
                kv.push(("data", "synthetic".into()));
                kv.extend([
                    ("synth_items", c.n_items.to_string()),
                    ("synth_latent", c.latent_dim.to_string()),
                    ("synth_dv", c.image_dim.to_string()),
                    ("synth_dt", c.text_dim.to_string()),
                    ("synth_regions", c.regions.to_string()),
                    ("synth_words", c.words.to_string()),
                    ("synth_noise", c.noise_sigma.to_string()),
                    ("synth_confuser_fraction", c.confuser_fraction.to_string()),
                    ("synth_confuser_perturb", c.confuser_perturb.to_string()),
                    ("synth_offset", c.offset.to_string()),
                    (
                        "synth_mixing",
                        match c.mixing {
                            Mixing::Random => "random",
                            Mixing::Identity => "identity",
                        }
                        .into(),
                    ),
                    ("synth_seed", c.seed.to_string()),
                ]);
            }
        }
        kv.extend([
            ("val_items", self.val_items.to_string()),
            ("test_items", self.test_items.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("log_steps", self.log_steps.to_string()),
            (
                "out",
                self.out.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
        ]);
        let mut text = String::new();
        for (k, v) in kv {
            let _ = writeln!(text, "{k} = {v}");
        }
        text
    }

    /// Loads or generates the dataset and tags its splits.
    pub fn load_dataset(&self) -> Result<PairedDataset> {
        let mut ds = match &self.data {
            DataSource::Synthetic(c) => gen_synthetic(c)?,
            DataSource::File(p) => load_features(p)?,
        };
        ds.assign_splits(self.val_items, self.test_items)?;
        Ok(ds)
    }

    fn arch(&self, kind: EncoderKind, input_dim: usize) -> EncoderArch {
        EncoderArch {
            pooling: self.pooling,
            mlp_activation: self.mlp_activation,
            ..EncoderArch::new(kind, input_dim, self.embed_dim)
        }
    }
}

/// Reads `HNSF`, or the text format for `.txt` paths.
pub fn load_features(path: &Path) -> Result<PairedDataset> {
    if path.extension().is_some_and(|e| e == "txt") {
        read_features_text(path)
    } else {
        read_features(path)
    }
}

/// One epoch (or, in `steps.csv`, one step) of training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean loss per batch.
    pub loss_value: f64,
    pub branch_fraction_triplet: f64,
    pub branch_fraction_hn: f64,
    pub mean_delta_s_i2t: f64,
    pub mean_delta_s_t2i: f64,
    pub fraction_delta_s_below_eps: f64,
    pub grad_norm_first_layer_img: f64,
    pub grad_norm_first_layer_txt: f64,
    /// Present on evaluation epochs.
    pub recall: Option<RecallReport>,
    pub lr: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,step,loss_value,branch_fraction_triplet,branch_fraction_hn,\
mean_delta_s_i2t,mean_delta_s_t2i,fraction_delta_s_below_eps,grad_norm_first_layer_img,\
grad_norm_first_layer_txt,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,rsum,lr";

    pub fn csv_row(&self) -> String {
        let recall = self.recall.map_or_else(|| ",,,,,,".to_string(), |r| r.csv_row());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss_value,
            self.branch_fraction_triplet,
            self.branch_fraction_hn,
            self.mean_delta_s_i2t,
            self.mean_delta_s_t2i,
            self.fraction_delta_s_below_eps,
            self.grad_norm_first_layer_img,
            self.grad_norm_first_layer_txt,
            recall,
            self.lr
        )
    }
}

/// Running sums for one epoch.
#[derive(Default)]
struct Accum {
    batches: usize,
    loss: f64,
    anchors: usize,
    triplet: usize,
    hn: usize,
    below: usize,
    ds_i2t: f64,
    ds_t2i: f64,
    gn_img: f64,
    gn_txt: f64,
}

impl Accum {
    fn add(&mut self, s: &StepStats) {
        self.batches += 1;
        self.loss += s.loss;
        self.anchors += s.anchors;
        self.triplet += s.triplet;
        self.hn += s.hn;
        self.below += s.below;
        self.ds_i2t += s.ds_i2t;
        self.ds_t2i += s.ds_t2i;
        self.gn_img += s.gn_img;
        self.gn_txt += s.gn_txt;
    }

    fn row(&self, epoch: usize, step: u64, lr: f64) -> MetricsRow {
        let nb = self.batches.max(1) as f64;
        let na = self.anchors.max(1) as f64;
        MetricsRow {
            epoch,
            step,
            loss_value: self.loss / nb,
            branch_fraction_triplet: self.triplet as f64 / na,
            branch_fraction_hn: self.hn as f64 / na,
            // per direction there are anchors/2 entries
            mean_delta_s_i2t: 2.0 * self.ds_i2t / na,
            mean_delta_s_t2i: 2.0 * self.ds_t2i / na,
            fraction_delta_s_below_eps: self.below as f64 / na,
            grad_norm_first_layer_img: self.gn_img / nb,
            grad_norm_first_layer_txt: self.gn_txt / nb,
            recall: None,
            lr,
        }
    }
}

struct StepStats {
    loss: f64,
    anchors: usize,
    triplet: usize,
    hn: usize,
    below: usize,
    ds_i2t: f64,
    ds_t2i: f64,
    gn_img: f64,
    gn_txt: f64,
}

/// Image and text encoders trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub img: Encoder<f64>,
    pub txt: Encoder<f64>,
}

impl Model {
    pub fn init(cfg: &RunConfig, image_dim: usize, text_dim: usize) -> Result<Self> {
        // separate seeds so the two encoders never share a draw
        Ok(Self {
            img: Encoder::init(cfg.arch(cfg.arch_img, image_dim), cfg.seed.wrapping_mul(2))?,
            txt: Encoder::init(cfg.arch(cfg.arch_txt, text_dim), cfg.seed.wrapping_mul(2).wrapping_add(1))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &[&self.img, &self.txt])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut encs = load_checkpoint::<f64>(path)?;
        if encs.len() != 2 {
            return Err(Error::format(8, format!("expected 2 encoders (image, text), found {}", encs.len())));
        }
        let txt = encs.pop().expect("two encoders");
        let img = encs.pop().expect("two encoders");
        Ok(Self { img, txt })
    }

    /// Eval-mode score table `images x texts` over the given items.
    pub fn score_table(&self, ds: &PairedDataset, indices: &[usize]) -> Result<Matrix<f64>> {
        check_dims(self, ds)?;
        let imgs: Vec<&FeatureSet<f64>> = indices.iter().map(|&i| &ds.images[i]).collect();
        let txts: Vec<&FeatureSet<f64>> = indices.iter().map(|&i| &ds.texts[i]).collect();
        let (v, _) = self.img.forward(&imgs, Mode::Eval)?;
        let (t, _) = self.txt.forward(&txts, Mode::Eval)?;
        matmul_nt(&v, &t)
    }

    pub fn evaluate(&self, ds: &PairedDataset, indices: &[usize]) -> Result<RecallReport> {
        rsum(&self.score_table(ds, indices)?, &PairingMap::diagonal(indices.len()))
    }
}

fn check_dims(m: &Model, ds: &PairedDataset) -> Result<()> {
    let model = (m.img.arch().input_dim, m.txt.arch().input_dim);
    let data = (ds.image_dim, ds.text_dim);
    if model != data {
        return Err(Error::shape(
            "model input",
            format!("checkpoint dims D_v={} D_t={}", model.0, model.1),
            format!("dataset dims D_v={} D_t={}", data.0, data.1),
        ));
    }
    Ok(())
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    ds: &'a PairedDataset,
    model: Model,
    opt_img: AdamW<f64>,
    opt_txt: AdamW<f64>,
}

impl Trainer<'_> {
    fn step(&mut self, batch: &[usize], lr: f64, epoch: usize, step: u64) -> Result<StepStats> {
        let imgs: Vec<&FeatureSet<f64>> = batch.iter().map(|&i| &self.ds.images[i]).collect();
        let txts: Vec<&FeatureSet<f64>> = batch.iter().map(|&i| &self.ds.texts[i]).collect();
        let m = &mut self.model;
        let (v, tape_v) = m.img.forward(&imgs, Mode::Train)?;
        let (t, tape_t) = m.txt.forward(&txts, Mode::Train)?;
        let s = cosine_sim_matrix(&v, &t)?;
        let res = self.cfg.loss.evaluate(&s, &self.cfg.hyper())?;
        let mining = &res.mining;
        let ds_i2t: f64 = mining.image_to_text.iter().map(|r| r.delta_s).sum();
        let ds_t2i: f64 = mining.text_to_image.iter().map(|r| r.delta_s).sum();
        let dump = |what: &str| {
            let n = 2 * batch.len();
            Error::Numerical(format!(
                "{what} at epoch {epoch}, step {step}; batch indices {batch:?}; \
                 mean delta_s i2t {}, t2i {}; loss {}",
                2.0 * ds_i2t / n as f64,
                2.0 * ds_t2i / n as f64,
                res.value
            ))
        };
        if !res.value.is_finite() || !res.d_s.is_finite() {
            return Err(dump("non-finite loss"));
        }
        let (dv, dt) = chain_to_embeddings(&res.d_s, &v, &t)?;
        m.img.update_running_stats(&tape_v);
        m.txt.update_running_stats(&tape_t);
        let g_img = m.img.backward(tape_v, &dv);
        let g_txt = m.txt.backward(tape_t, &dt);
        // backward checks the tape version, which update_running_stats leaves alone
        let (g_img, g_txt) = (g_img?, g_txt?);
        if !g_img.is_finite() || !g_txt.is_finite() {
            return Err(dump("non-finite gradient"));
        }
        let stats = StepStats {
            loss: res.value,
            anchors: 2 * batch.len(),
            triplet: mining.count(Branch::Triplet),
            hn: mining.count(Branch::Hn),
            below: mining.iter().filter(|r| vanishing_predicate(r.delta_s, self.cfg.epsilon)).count(),
            ds_i2t,
            ds_t2i,
            gn_img: first_layer_grad_norm(&g_img),
            gn_txt: first_layer_grad_norm(&g_txt),
        };
        apply(&mut self.opt_img, &mut m.img, &g_img, lr)?;
        apply(&mut self.opt_txt, &mut m.txt, &g_txt, lr)?;
        Ok(stats)
    }
}

fn apply(opt: &mut AdamW<f64>, enc: &mut Encoder<f64>, g: &EncoderGrads<f64>, lr: f64) -> Result<()> {
    let grads = g.tensors();
    let mut params = enc.params_mut();
    opt.step(&mut params, &grads, lr)
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub best: Option<(usize, RecallReport)>,
    pub model: Model,
    pub best_model: Model,
}

/// Trains per `cfg`, writing outputs when `cfg.out` is set.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = cfg.load_dataset()?;
    run_training_on(cfg, &ds)
}

/// [`run_training`] on an already-loaded dataset with splits assigned.
pub fn run_training_on(cfg: &RunConfig, ds: &PairedDataset) -> Result<TrainOutcome> {
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    if train.len() < 2 {
        return Err(Error::config("val_items", format!("only {} training items left", train.len())));
    }
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved"), cfg.resolved())?;
    }
    let mut trainer = Trainer {
        cfg,
        ds,
        model: Model::init(cfg, ds.image_dim, ds.text_dim)?,
        opt_img: AdamW::new(cfg.optim)?,
        opt_txt: AdamW::new(cfg.optim)?,
    };
    let mut csv = format!("{}\n", MetricsRow::CSV_HEADER);
    let mut steps_csv = csv.clone();
    let mut rows = Vec::new();
    let mut best: Option<(usize, RecallReport)> = None;
    let mut best_model = trainer.model.clone();
    let mut step = 0u64;
    let epochs = cfg.schedule.total_epochs;

    for epoch in 0..epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut acc = Accum::default();
        for batch in batch_iter(&train, cfg.batch, cfg.seed, epoch as u64)? {
            let stats = trainer.step(&batch, lr, epoch, step)?;
            step += 1;
            if cfg.log_steps {
                let mut one = Accum::default();
                one.add(&stats);
                let _ = writeln!(steps_csv, "{}", one.row(epoch, step, lr).csv_row());
            }
            acc.add(&stats);
        }
        let mut row = acc.row(epoch, step, lr);
        let last = epoch + 1 == epochs;
        if !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let report = trainer.model.evaluate(ds, &val)?;
            row.recall = Some(report);
            if best.as_ref().is_none_or(|(_, b)| report.rsum > b.rsum) {
                best = Some((epoch, report));
                best_model = trainer.model.clone();
            }
        }
        let _ = writeln!(csv, "{}", row.csv_row());
        rows.push(row);
    }

    if let Some(dir) = &cfg.out {
        fs::write(dir.join("metrics.csv"), &csv)?;
        if cfg.log_steps {
            fs::write(dir.join("steps.csv"), &steps_csv)?;
        }
        trainer.model.save(&dir.join("ckpt_final"))?;
        best_model.save(&dir.join("ckpt_best"))?;
    }
    Ok(TrainOutcome {
        rows,
        best,
        model: trainer.model,
        best_model,
    })
}

/// Evaluates a checkpoint on one split of a dataset.
pub fn run_eval(ckpt: &Path, ds: &PairedDataset, split: Split) -> Result<RecallReport> {
    let model = Model::load(ckpt)?;
    let idx = ds.indices(split);
    model.evaluate(ds, &idx)
}

/// Settings for [`run_gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    /// Non-skipped instances required per (loss, arch) pair.
    pub seeds: usize,
    pub base_seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Instances whose similarity matrix lies closer than this to a kink are skipped.
    pub kink_guard: f64,
    /// Threshold used for the selhn rows; wide enough that both branches occur.
    pub selhn_epsilon: f64,
    pub batch: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub set_size: usize,
    /// Negative control: perturb one analytic gradient entry for this pair.
    pub corrupt: Option<(LossKind, EncoderKind)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            base_seed: 0,
            step: 1e-6,
            tolerance: 1e-4,
            kink_guard: 1e-3,
            selhn_epsilon: 0.3,
            batch: 4,
            input_dim: 6,
            embed_dim: 4,
            set_size: 3,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub arch: EncoderKind,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:<5} {:>7} {:>7} {:>12}  result\n", "loss", "arch", "checked", "skipped", "max_rel_err");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<5} {:>7} {:>7} {:>12.3e}  {}",
                r.loss.name(),
                r.arch.name(),
                r.checked,
                r.skipped,
                r.max_rel_error,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

struct GcInstance {
    img: Encoder<f64>,
    txt: Encoder<f64>,
    images: Vec<FeatureSet<f64>>,
    texts: Vec<FeatureSet<f64>>,
}

impl GcInstance {
    fn new(gc: &GradcheckConfig, kind: EncoderKind, seed: u64) -> Result<Self> {
        let arch = EncoderArch::new(kind, gc.input_dim, gc.embed_dim);
        let mut rng = rng_from_seed(seed);
        let mut sets = |n: usize| -> Result<Vec<FeatureSet<f64>>> {
            (0..n)
                .map(|_| FeatureSet::new(gaussian_from(gc.set_size, gc.input_dim, &mut rng)))
                .collect()
        };
        let images = sets(gc.batch)?;
        let texts = sets(gc.batch)?;
        let mut img = Encoder::init(arch, seed.wrapping_mul(2))?;
        let mut txt = Encoder::init(arch, seed.wrapping_mul(2).wrapping_add(1))?;
        // move BN affine parameters off their 1/0 init so their gradients are exercised generically
        for enc in [&mut img, &mut txt] {
            let mut p = enc.params_mut();
            for m in p.iter_mut() {
                let noise = gaussian_from::<f64>(m.rows(), m.cols(), &mut rng);
                m.axpy(0.1, &noise)?;
            }
        }
        Ok(Self { img, txt, images, texts })
    }

    fn sim(&self) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let imgs: Vec<&FeatureSet<f64>> = self.images.iter().collect();
        let txts: Vec<&FeatureSet<f64>> = self.texts.iter().collect();
        Ok((self.img.forward(&imgs, Mode::Train)?.0, self.txt.forward(&txts, Mode::Train)?.0))
    }

    fn loss(&self, kind: LossKind, h: &LossHyper<f64>) -> Result<f64> {
        let (v, t) = self.sim()?;
        Ok(kind.evaluate(&cosine_sim_matrix(&v, &t)?, h)?.value)
    }

    fn analytic(&self, kind: LossKind, h: &LossHyper<f64>) -> Result<(EncoderGrads<f64>, EncoderGrads<f64>)> {
        let imgs: Vec<&FeatureSet<f64>> = self.images.iter().collect();
        let txts: Vec<&FeatureSet<f64>> = self.texts.iter().collect();
        let (v, tv) = self.img.forward(&imgs, Mode::Train)?;
        let (t, tt) = self.txt.forward(&txts, Mode::Train)?;
        let res = kind.evaluate(&cosine_sim_matrix(&v, &t)?, h)?;
        let (dv, dt) = chain_to_embeddings(&res.d_s, &v, &t)?;
        Ok((self.img.backward(tv, &dv)?, self.txt.backward(tt, &dt)?))
    }

    fn numeric(&mut self, kind: LossKind, h: &LossHyper<f64>, step: f64) -> Result<Vec<Matrix<f64>>> {
        let mut out = Vec::new();
        for which in 0..2 {
            let count = self.encoder(which).params().len();
            for p in 0..count {
                let (rows, cols) = self.encoder(which).params()[p].shape();
                let mut g = Matrix::zeros(rows, cols);
                for k in 0..rows * cols {
                    let orig = self.encoder(which).params()[p].as_slice()[k];
                    self.encoder(which).params_mut()[p].as_mut_slice()[k] = orig + step;
                    let up = self.loss(kind, h)?;
                    self.encoder(which).params_mut()[p].as_mut_slice()[k] = orig - step;
                    let down = self.loss(kind, h)?;
                    self.encoder(which).params_mut()[p].as_mut_slice()[k] = orig;
                    g.as_mut_slice()[k] = (up - down) / (2.0 * step);
                }
                out.push(g);
            }
        }
        Ok(out)
    }

    fn encoder(&mut self, which: usize) -> &mut Encoder<f64> {
        if which == 0 {
            &mut self.img
        } else {
            &mut self.txt
        }
    }
}

/// Checks analytic parameter gradients of every (loss, arch) pair against
/// central differences, on small random instances.
///
/// Both encoders use the arch under test; BN runs in train mode. The
/// relative error is `max|a − n| / max(max|a|, max|n|)` over all parameter
/// tensors of both encoders.
pub fn run_gradcheck(gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    for loss in LossKind::ALL {
        let mut h = LossHyper::<f64>::default();
        if loss == LossKind::SelHn {
            h.threshold = gc.selhn_epsilon;
        }
        for arch in EncoderKind::ALL {
            let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
            let mut seed = gc.base_seed;
            while checked < gc.seeds && skipped < 50 * gc.seeds.max(1) {
                let mut inst = GcInstance::new(gc, arch, seed)?;
                seed += 1;
                let (v, t) = inst.sim()?;
                if kink_distance(&cosine_sim_matrix(&v, &t)?, loss, &h) < gc.kink_guard {
                    skipped += 1;
                    continue;
                }
                let (mut ga, gb) = inst.analytic(loss, &h)?;
                if gc.corrupt == Some((loss, arch)) {
                    let w = ga.tensors_mut().swap_remove(0);
                    let k = w
                        .as_slice()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .map_or(0, |(k, _)| k);
                    let bump = 0.1 * w.as_slice()[k].abs() + 1e-3;
                    w.as_mut_slice()[k] += bump;
                }
                let numeric = inst.numeric(loss, &h, gc.step)?;
                let analytic: Vec<&Matrix<f64>> = ga.tensors().into_iter().chain(gb.tensors()).collect();
                let numeric: Vec<&Matrix<f64>> = numeric.iter().collect();
                worst = worst.max(relative_error(&analytic, &numeric)?);
                checked += 1;
            }
            rows.push(GradcheckRow {
                loss,
                arch,
                checked,
                skipped,
                max_rel_error: worst,
                pass: checked >= gc.seeds && worst < gc.tolerance,
            });
        }
    }
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse_config(Some(""), &[]).unwrap();
        assert_eq!(c.margin, 0.2);
        assert_eq!(c.epsilon, 0.01);
        assert_eq!(c.loss, LossKind::SelHn);
        assert_eq!(c.schedule.decay_epoch, c.schedule.total_epochs);
    }

    #[test]
    fn negative_margin_names_key() {
        let err = parse_config(Some("margin = -1"), &[]).unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "margin"));
    }

    #[test]
    fn unknown_and_unparsable_keys() {
        assert!(matches!(parse_config(Some("lamda = 0.2"), &[]), Err(Error::Config { key, .. }) if key == "lamda"));
        assert!(matches!(parse_config(Some("epochs = ten"), &[]), Err(Error::Config { key, .. }) if key == "epochs"));
        assert!(matches!(parse_config(Some("nonsense"), &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn override_beats_file() {
        let c = parse_config(Some("epsilon = 0.05\nbatch = 64 # comment"), &ov(&[("epsilon", "0.02")])).unwrap();
        assert_eq!(c.epsilon, 0.02);
        assert_eq!(c.batch, 64);
    }

    #[test]
    fn resolved_round_trips() {
        let c = parse_config(Some("loss = hn\narch = mlp\ndecay_epoch = 5\nout = /tmp/x"), &[]).unwrap();
        let again = parse_config(Some(&c.resolved()), &[]).unwrap();
        assert_eq!(c, again);
        for k in RunConfig::keys() {
            assert!(c.resolved().contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn odd_embed_dim_with_mlp_rejected() {
        assert!(matches!(parse_config(Some("arch = mlp\nembed_dim = 7"), &[]), Err(Error::Config { key, .. }) if key == "embed_dim"));
    }

    #[test]
    fn header_has_every_column() {
        let cols: Vec<&str> = MetricsRow::CSV_HEADER.split(',').collect();
        assert_eq!(cols.len(), 18);
        assert_eq!(cols[0], "epoch");
        assert_eq!(cols[17], "lr");
        let row = Accum::default().row(0, 0, 0.1);
        assert_eq!(row.csv_row().split(',').count(), 18);
    }
}
