//! Paired two-modality feature datasets: synthetic generation, the `HNSF`
//! binary format, a plain-text loader, and epoch-keyed batch shuffling.
//!
//! # `HNSF` layout (little-endian)
//!
//! ```text
//! magic    4 bytes "HNSF"
//! version  u32     1
//! n_items  u32
//! D_v      u32
//! D_t      u32
//! per item:
//!   M      u16, then M x D_v f32 values (row-major)
//!   N      u16, then N x D_t f32 values
//! ```
//!
//! Values are stored in single precision and widened to `f64` on load, so a
//! read → write → read cycle is bit-exact.
//!
//! # Text format
//!
//! One item per line: `M;v1,v2,...;N;w1,w2,...` where the first list holds
//! all `M x D_v` image values and the second all `N x D_t` text values.
//! Blank lines and lines starting with `#` are skipped.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::binio::ByteReader;
use crate::encoders::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_from, matmul_nt, rng_from_seed, Matrix};

pub const MAGIC: &[u8; 4] = b"HNSF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split `{s}` (train|val|test)"))),
        }
    }
}

/// Index-aligned (image, text) pairs with a split tag per item.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub image_dim: usize,
    pub text_dim: usize,
    pub images: Vec<FeatureSet<f64>>,
    pub texts: Vec<FeatureSet<f64>>,
    pub splits: Vec<Split>,
}

impl PairedDataset {
    pub fn new(image_dim: usize, text_dim: usize, images: Vec<FeatureSet<f64>>, texts: Vec<FeatureSet<f64>>) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::shape(
                "PairedDataset::new",
                format!("{} texts", images.len()),
                format!("{} texts", texts.len()),
            ));
        }
        for (i, (v, t)) in images.iter().zip(&texts).enumerate() {
            if v.dim() != image_dim || t.dim() != text_dim {
                return Err(Error::shape(
                    "PairedDataset::new",
                    format!("dims ({image_dim}, {text_dim})"),
                    format!("({}, {}) at item {i}", v.dim(), t.dim()),
                ));
            }
            if !v.vectors.is_finite() || !t.vectors.is_finite() {
                return Err(Error::Precondition(format!("item {i} has non-finite features")));
            }
        }
        let splits = vec![Split::Train; images.len()];
        Ok(Self {
            image_dim,
            text_dim,
            images,
            texts,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Tags the last `test` items as test and the `val` items before them as
    /// validation; everything else is training data.
    pub fn assign_splits(&mut self, val: usize, test: usize) -> Result<()> {
        let n = self.len();
        if val + test > n {
            return Err(Error::config(
                "val_items",
                format!("val ({val}) + test ({test}) exceeds dataset size {n}"),
            ));
        }
        for (i, s) in self.splits.iter_mut().enumerate() {
            *s = if i >= n - test {
                Split::Test
            } else if i >= n - test - val {
                Split::Val
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// Independent Gaussian maps with entries `N(0, 1/k)` per region/word slot.
    Random,
    /// Every map is the identity; requires `D_v = D_t = k`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub regions: usize,
    pub words: usize,
    pub noise_sigma: f64,
    pub confuser_fraction: f64,
    pub confuser_perturb: f64,
    /// Scale of a fixed random vector added to every feature of a modality
    /// (one vector per modality). Zero leaves features centred.
    pub offset: f64,
    pub mixing: Mixing,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 1000,
            latent_dim: 16,
            image_dim: 64,
            text_dim: 64,
            regions: 4,
            words: 4,
            noise_sigma: 0.1,
            confuser_fraction: 0.3,
            confuser_perturb: 0.1,
            offset: 0.0,
            mixing: Mixing::Random,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("synth_items", self.n_items),
            ("synth_latent", self.latent_dim),
            ("synth_dv", self.image_dim),
            ("synth_dt", self.text_dim),
            ("synth_regions", self.regions),
            ("synth_words", self.words),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.regions > u16::MAX as usize || self.words > u16::MAX as usize {
            return Err(Error::config("synth_regions", "set sizes must fit in u16"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("synth_noise", "must be a finite value >= 0"));
        }
        if !(0.0..1.0).contains(&self.confuser_fraction) {
            return Err(Error::config("synth_confuser_fraction", "must be in [0, 1)"));
        }
        if !(self.confuser_perturb >= 0.0) || !self.confuser_perturb.is_finite() {
            return Err(Error::config("synth_confuser_perturb", "must be a finite value >= 0"));
        }
        if !(self.offset >= 0.0) || !self.offset.is_finite() {
            return Err(Error::config("synth_offset", "must be a finite value >= 0"));
        }
        if self.mixing == Mixing::Identity && (self.image_dim != self.latent_dim || self.text_dim != self.latent_dim) {
            return Err(Error::config("synth_mixing", "identity mixing needs D_v = D_t = latent dim"));
        }
        Ok(())
    }

    /// Number of items generated as confusers of another item.
    pub fn confuser_count(&self) -> usize {
        (self.confuser_fraction * self.n_items as f64).round() as usize
    }
}

/// Latent codes behind a synthetic dataset, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLatents {
    pub latents: Matrix<f64>,
    /// `(confuser, source)` pairs.
    pub confusers: Vec<(usize, usize)>,
}

/// Generates a dataset where item `i`'s image and text are independent noisy
/// views of one latent code `zᵢ ~ N(0, I_k)`:
/// `feature_m = A_m zᵢ + σ η + c`, with a fixed map `A_m` per region (or
/// word) slot and a fixed per-modality offset `c`.
///
/// A `confuser_fraction` of items take the latent of a distinct non-confuser
/// item plus `confuser_perturb · η`, so they are near-duplicates of it
/// without being its pair.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<PairedDataset> {
    Ok(gen_synthetic_with_latents(cfg)?.0)
}

pub fn gen_synthetic_with_latents(cfg: &SynthConfig) -> Result<(PairedDataset, SynthLatents)> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let k = cfg.latent_dim;
    let maps = |count: usize, dim: usize, rng: &mut ChaCha8Rng| -> Vec<Matrix<f64>> {
        (0..count)
            .map(|_| match cfg.mixing {
                Mixing::Identity => Matrix::identity(k),
                Mixing::Random => {
                    let mut a = gaussian_from::<f64>(dim, k, rng);
                    a.scale(1.0 / (k as f64).sqrt());
                    a
                }
            })
            .collect()
    };
    let image_maps = maps(cfg.regions, cfg.image_dim, &mut rng);
    let text_maps = maps(cfg.words, cfg.text_dim, &mut rng);
    let mut image_offset = gaussian_from::<f64>(1, cfg.image_dim, &mut rng);
    image_offset.scale(cfg.offset);
    let mut text_offset = gaussian_from::<f64>(1, cfg.text_dim, &mut rng);
    text_offset.scale(cfg.offset);

    let n = cfg.n_items;
    let mut latents = gaussian_from::<f64>(n, k, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_conf = cfg.confuser_count().min(n.saturating_sub(1));
    let (conf, sources) = order.split_at(n_conf);
    let mut confusers = Vec::with_capacity(n_conf);
    for (c_idx, &c) in conf.iter().enumerate() {
        let src = sources[c_idx % sources.len()];
        let eta = gaussian_from::<f64>(1, k, &mut rng);
        for j in 0..k {
            latents[(c, j)] = latents[(src, j)] + cfg.confuser_perturb * eta[(0, j)];
        }
        confusers.push((c, src));
    }
    confusers.sort_unstable();

    let make = |z: &Matrix<f64>, maps: &[Matrix<f64>], offset: &Matrix<f64>, rng: &mut ChaCha8Rng| -> Result<FeatureSet<f64>> {
        let dim = offset.cols();
        let mut rows = Matrix::zeros(maps.len(), dim);
        for (m, a) in maps.iter().enumerate() {
            // (A zᵀ)ᵀ = z Aᵀ
            let clean = matmul_nt(z, a)?;
            let noise = gaussian_from::<f64>(1, dim, rng);
            for (c, x) in rows.row_mut(m).iter_mut().enumerate() {
                *x = clean[(0, c)] + cfg.noise_sigma * noise[(0, c)] + offset[(0, c)];
            }
        }
        FeatureSet::new(rows)
    };
    let mut images = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    for i in 0..n {
        let z = latents.select_rows(&[i]);
        images.push(make(&z, &image_maps, &image_offset, &mut rng)?);
        texts.push(make(&z, &text_maps, &text_offset, &mut rng)?);
    }
    let ds = PairedDataset::new(cfg.image_dim, cfg.text_dim, images, texts)?;
    Ok((ds, SynthLatents { latents, confusers }))
}

pub fn encode_features(ds: &PairedDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [ds.len(), ds.image_dim, ds.text_dim] {
        let v = u32::try_from(v).map_err(|_| Error::format(out.len() as u64, "header field exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, (img, txt)) in ds.images.iter().zip(&ds.texts).enumerate() {
        for set in [img, txt] {
            let count = u16::try_from(set.len())
                .map_err(|_| Error::format(out.len() as u64, format!("item {i}: set of {} vectors exceeds u16", set.len())))?;
            out.extend_from_slice(&count.to_le_bytes());
            for &x in set.vectors.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<PairedDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HNSF\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = r.u32("n_items")? as usize;
    let dv = r.u32("D_v")? as usize;
    let dt = r.u32("D_t")? as usize;
    let mut images = Vec::with_capacity(n.min(1 << 20));
    let mut texts = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let mut read_set = |dim: usize, what: &str| -> Result<FeatureSet<f64>> {
            let at = r.offset();
            let count = r
                .u16("set size")
                .map_err(|e| with_item(e, i, what))? as usize;
            if count == 0 {
                return Err(Error::format(at, format!("item {i}: empty {what} set")));
            }
            let raw = r.take(count * dim * 4, what).map_err(|e| with_item(e, i, what))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let m = Matrix::from_vec(count, dim, data)?;
            if !m.is_finite() {
                return Err(Error::format(at, format!("item {i}: non-finite {what} value")));
            }
            FeatureSet::new(m)
        };
        images.push(read_set(dv, "image features")?);
        texts.push(read_set(dt, "text features")?);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes after item {n}", r.remaining())));
    }
    PairedDataset::new(dv, dt, images, texts)
}

fn with_item(e: Error, item: usize, what: &str) -> Error {
    match e {
        Error::Format { offset, reason } => Error::format(offset, format!("item {item} ({what}): {reason}")),
        other => other,
    }
}

pub fn write_features(path: &Path, ds: &PairedDataset) -> Result<()> {
    fs::write(path, encode_features(ds)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<PairedDataset> {
    decode_features(&fs::read(path)?)
}

/// Parses the line-oriented text format described in the module docs.
pub fn parse_features_text(text: &str) -> Result<PairedDataset> {
    let mut dims: Option<(usize, usize)> = None;
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::format(line_start, format!("line {}: {reason}", lineno + 1));
        let fields: Vec<&str> = line.split(';').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 `;`-separated fields, found {}", fields.len())));
        }
        let parse_set = |count: &str, values: &str, what: &str| -> Result<(usize, Matrix<f64>)> {
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad {what} count `{count}`")))?;
            let vals = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("bad {what} value: {e}")))?;
            if count == 0 || vals.len() % count != 0 {
                return Err(bad(format!("{} {what} values do not split into {count} vectors", vals.len())));
            }
            let dim = vals.len() / count;
            Ok((dim, Matrix::from_vec(count, dim, vals)?))
        };
        let (dv, img) = parse_set(fields[0], fields[1], "image")?;
        let (dt, txt) = parse_set(fields[2], fields[3], "text")?;
        match dims {
            None => dims = Some((dv, dt)),
            Some(d) if d != (dv, dt) => {
                return Err(bad(format!("dims ({dv}, {dt}) differ from earlier ({}, {})", d.0, d.1)));
            }
            _ => {}
        }
        images.push(FeatureSet::new(img)?);
        texts.push(FeatureSet::new(txt)?);
    }
    let (dv, dt) = dims.unwrap_or((0, 0));
    PairedDataset::new(dv, dt, images, texts)
}

pub fn read_features_text(path: &Path) -> Result<PairedDataset> {
    parse_features_text(&fs::read_to_string(path)?)
}

/// Shuffled batches of `indices` for one epoch.
///
/// The shuffle is a ChaCha8 stream seeded by `seed` with stream id `epoch`.
/// A final batch smaller than 2 is dropped.
pub fn batch_iter(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("batch", format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut order = indices.to_vec();
    let mut rng = rng_from_seed(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
