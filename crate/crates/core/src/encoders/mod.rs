//! Set encoders: a shared linear projection of every input vector, an
//! optional bottleneck MLP (plain or residual), pooling over the set, and
//! L2 normalization, with a hand-written backward pass.
//!
//! ```text
//! fc:   x = W·r + b                         → pool → normalize
//! mlp:  y = MLP(x)                          → pool → normalize
//! rmlp: y = x + MLP(x)                      → pool → normalize
//! MLP:  BN(d) → FC(d→d/2) → [ReLU] → BN(d/2) → FC(d/2→d)
//! ```

mod batchnorm;
pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, l2_normalize_vjp, matmul, matmul_nt, matmul_tn, rng_from_seed, Matrix, NormalizeTape};
use crate::scalar::Scalar;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, DEFAULT_EPS, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Fc,
    Mlp,
    Rmlp,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Fc, EncoderKind::Mlp, EncoderKind::Rmlp];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Fc => "fc",
            EncoderKind::Mlp => "mlp",
            EncoderKind::Rmlp => "rmlp",
        }
    }

    pub fn has_mlp(self) -> bool {
        self != EncoderKind::Fc
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("arch", format!("unknown architecture `{s}` (fc|mlp|rmlp)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    Mean,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::config("pooling", format!("unknown pooling `{s}` (mean|max)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderArch {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub pooling: Pooling,
    /// Insert a ReLU after the first MLP linear layer.
    pub mlp_activation: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl EncoderArch {
    pub fn new(kind: EncoderKind, input_dim: usize, embed_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            embed_dim,
            pooling: Pooling::Mean,
            mlp_activation: false,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        if self.kind.has_mlp() && (!self.embed_dim.is_multiple_of(2) || self.embed_dim < 2) {
            return Err(Error::config(
                "embed_dim",
                format!("{} arch needs an even embedding dimension, got {}", self.kind, self.embed_dim),
            ));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be > 0"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One item's input vectors (regions of an image or words of a sentence), one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub vectors: Matrix<T>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(vectors: Matrix<T>) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::Precondition("feature set needs at least one vector".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// `y = x·W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.sample(dist))).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = matmul(x, &self.weight)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    /// Returns the parameter gradients and `∂L/∂x`.
    fn backward(&self, x: &Matrix<T>, d_y: &Matrix<T>) -> Result<(LinearGrads<T>, Matrix<T>)> {
        let grads = LinearGrads {
            weight: matmul_tn(x, d_y)?,
            bias: d_y.sum_rows(),
        };
        Ok((grads, matmul_nt(d_y, &self.weight)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub bn1: BatchNorm<T>,
    pub fc1: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub fc2: Linear<T>,
}

/// Trainable parameters and batch-norm running statistics of one encoder.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    arch: EncoderArch,
    pub fc: Linear<T>,
    pub mlp: Option<Mlp<T>>,
    version: u64,
}

impl<T: Scalar> PartialEq for Encoder<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.fc == other.fc && self.mlp == other.mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub bn1: BnGrads<T>,
    pub fc1: LinearGrads<T>,
    pub bn2: BnGrads<T>,
    pub fc2: LinearGrads<T>,
}

/// Gradients for every trainable tensor, same layout as [`Encoder::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub fc: LinearGrads<T>,
    pub mlp: Option<MlpGrads<T>>,
}

impl<T: Scalar> EncoderGrads<T> {
    /// Trainable gradients in declaration order.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.fc.weight, &self.fc.bias];
        if let Some(m) = &self.mlp {
            out.extend([
                &m.bn1.gamma,
                &m.bn1.beta,
                &m.fc1.weight,
                &m.fc1.bias,
                &m.bn2.gamma,
                &m.bn2.beta,
                &m.fc2.weight,
                &m.fc2.bias,
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.fc.weight, &mut self.fc.bias];
        if let Some(m) = &mut self.mlp {
            out.extend([
                &mut m.bn1.gamma,
                &mut m.bn1.beta,
                &mut m.fc1.weight,
                &mut m.fc1.bias,
                &mut m.bn2.gamma,
                &mut m.bn2.beta,
                &mut m.fc2.weight,
                &mut m.fc2.bias,
            ]);
        }
        out
    }

    /// Gradient of the first linear layer's weight (the input projection).
    pub fn first_layer_weight(&self) -> &Matrix<T> {
        &self.fc.weight
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// Cached activations from one forward pass, consumed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    version: u64,
    mode: Mode,
    /// Every input vector of the batch stacked row-wise.
    inputs: Matrix<T>,
    /// `offsets[b]..offsets[b + 1]` are item `b`'s rows.
    offsets: Vec<usize>,
    mlp: Option<MlpTape<T>>,
    /// Winning row per (item, column) for max pooling.
    argmax: Option<Vec<usize>>,
    normalize: NormalizeTape<T>,
}

#[derive(Debug, Clone)]
struct MlpTape<T> {
    bn1: BnCache<T>,
    z1: Matrix<T>,
    pre_act: Matrix<T>,
    bn2: BnCache<T>,
    z2: Matrix<T>,
}

impl<T> ForwardTape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }
}

impl<T: Scalar> Encoder<T> {
    /// Uniform `±1/√fan_in` weights, zero biases, identity batch norm; deterministic per seed.
    pub fn init(arch: EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let d = arch.embed_dim;
        let fc = Linear::init(arch.input_dim, d, &mut rng);
        let mlp = arch.kind.has_mlp().then(|| {
            let h = arch.hidden_dim();
            let (eps, mom) = (T::of(arch.bn_eps), T::of(arch.bn_momentum));
            let fc1 = Linear::init(d, h, &mut rng);
            let fc2 = Linear::init(h, d, &mut rng);
            Mlp {
                bn1: BatchNorm::new(d, eps, mom),
                fc1,
                bn2: BatchNorm::new(h, eps, mom),
                fc2,
            }
        });
        Ok(Self {
            arch,
            fc,
            mlp,
            version: 0,
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    /// Trainable tensors in declaration order:
    /// `fc.w, fc.b, [bn1.γ, bn1.β, fc1.w, fc1.b, bn2.γ, bn2.β, fc2.w, fc2.b]`.
    ///
    /// Borrowing them mutably invalidates outstanding forward tapes.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.version += 1;
        let mut out = vec![&mut self.fc.weight, &mut self.fc.bias];
        if let Some(m) = &mut self.mlp {
            out.extend([
                &mut m.bn1.gamma,
                &mut m.bn1.beta,
                &mut m.fc1.weight,
                &mut m.fc1.bias,
                &mut m.bn2.gamma,
                &mut m.bn2.beta,
                &mut m.fc2.weight,
                &mut m.fc2.bias,
            ]);
        }
        out
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.fc.weight, &self.fc.bias];
        if let Some(m) = &self.mlp {
            out.extend([
                &m.bn1.gamma,
                &m.bn1.beta,
                &m.fc1.weight,
                &m.fc1.bias,
                &m.bn2.gamma,
                &m.bn2.beta,
                &m.fc2.weight,
                &m.fc2.bias,
            ]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Encodes a batch of feature sets into unit-norm rows.
    ///
    /// Does not touch the running statistics; call
    /// [`Encoder::update_running_stats`] with the returned tape to fold in
    /// train-mode batch statistics.
    pub fn forward(&self, items: &[&FeatureSet<T>], mode: Mode) -> Result<(Matrix<T>, ForwardTape<T>)> {
        let (inputs, offsets) = self.stack(items)?;
        if mode == Mode::Train && self.mlp.is_some() && items.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch norm needs at least 2 items, got {}",
                items.len()
            )));
        }
        let x = self.fc.forward(&inputs)?;
        let (y, mlp_tape) = match &self.mlp {
            None => (x, None),
            Some(mlp) => {
                let (z1, bn1) = batchnorm_forward(&x, &mlp.bn1, mode)?;
                let pre_act = mlp.fc1.forward(&z1)?;
                let act = if self.arch.mlp_activation {
                    pre_act.map(|v| v.max(T::zero()))
                } else {
                    pre_act.clone()
                };
                let (z2, bn2) = batchnorm_forward(&act, &mlp.bn2, mode)?;
                let mut out = mlp.fc2.forward(&z2)?;
                if self.arch.kind == EncoderKind::Rmlp {
                    out.add_assign(&x)?;
                }
                (
                    out,
                    Some(MlpTape {
                        bn1,
                        z1,
                        pre_act,
                        bn2,
                        z2,
                    }),
                )
            }
        };
        let (pooled, argmax) = pool(&y, &offsets, self.arch.pooling);
        let (emb, normalize) = l2_normalize_rows(&pooled)?;
        Ok((
            emb,
            ForwardTape {
                version: self.version,
                mode,
                inputs,
                offsets,
                mlp: mlp_tape,
                argmax,
                normalize,
            },
        ))
    }

    /// Folds the batch statistics recorded in a train-mode tape into the
    /// running estimates. Eval tapes are ignored.
    pub fn update_running_stats(&mut self, tape: &ForwardTape<T>) {
        if let (Some(mlp), Some(t)) = (&mut self.mlp, &tape.mlp) {
            mlp.bn1.update_running(&t.bn1);
            mlp.bn2.update_running(&t.bn2);
        }
    }

    /// Exact gradients of every trainable tensor given `∂L/∂embeddings`.
    pub fn backward(&self, tape: ForwardTape<T>, d_emb: &Matrix<T>) -> Result<EncoderGrads<T>> {
        if tape.version != self.version {
            return Err(Error::StaleTape(format!(
                "tape recorded at parameter version {}, encoder is at {}",
                tape.version, self.version
            )));
        }
        let d_pooled = l2_normalize_vjp(d_emb, &tape.normalize)?;
        let d_y = unpool(&d_pooled, &tape.offsets, tape.argmax.as_deref());
        let (d_x, mlp_grads) = match (&self.mlp, &tape.mlp) {
            (None, _) => (d_y, None),
            (Some(mlp), Some(t)) => {
                let (fc2, d_z2) = mlp.fc2.backward(&t.z2, &d_y)?;
                let (mut d_act, g2, b2) = batchnorm_backward(&d_z2, &t.bn2)?;
                if self.arch.mlp_activation {
                    for (g, &p) in d_act.as_mut_slice().iter_mut().zip(t.pre_act.as_slice()) {
                        if p <= T::zero() {
                            *g = T::zero();
                        }
                    }
                }
                let (fc1, d_z1) = mlp.fc1.backward(&t.z1, &d_act)?;
                let (mut d_x, g1, b1) = batchnorm_backward(&d_z1, &t.bn1)?;
                if self.arch.kind == EncoderKind::Rmlp {
                    d_x.add_assign(&d_y)?;
                }
                let grads = MlpGrads {
                    bn1: BnGrads { gamma: g1, beta: b1 },
                    fc1,
                    bn2: BnGrads { gamma: g2, beta: b2 },
                    fc2,
                };
                (d_x, Some(grads))
            }
            (Some(_), None) => return Err(Error::StaleTape("tape has no MLP activations".into())),
        };
        let (fc, _) = self.fc.backward(&tape.inputs, &d_x)?;
        Ok(EncoderGrads { fc, mlp: mlp_grads })
    }

    fn stack(&self, items: &[&FeatureSet<T>]) -> Result<(Matrix<T>, Vec<usize>)> {
        if items.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let d_in = self.arch.input_dim;
        let total: usize = items.iter().map(|f| f.len()).sum();
        let mut data = Vec::with_capacity(total * d_in);
        let mut offsets = Vec::with_capacity(items.len() + 1);
        offsets.push(0);
        for (b, f) in items.iter().enumerate() {
            if f.dim() != d_in {
                return Err(Error::shape(
                    "Encoder::forward",
                    format!("feature dimension {d_in}"),
                    format!("dimension {} in item {b}", f.dim()),
                ));
            }
            if f.is_empty() {
                return Err(Error::Precondition(format!("item {b} has no feature vectors")));
            }
            data.extend_from_slice(f.vectors.as_slice());
            offsets.push(offsets[b] + f.len());
        }
        Ok((Matrix::from_vec(total, d_in, data)?, offsets))
    }
}

fn pool<T: Scalar>(y: &Matrix<T>, offsets: &[usize], pooling: Pooling) -> (Matrix<T>, Option<Vec<usize>>) {
    let items = offsets.len() - 1;
    let d = y.cols();
    let mut out = Matrix::zeros(items, d);
    match pooling {
        Pooling::Mean => {
            for b in 0..items {
                let (lo, hi) = (offsets[b], offsets[b + 1]);
                let inv = T::one() / T::from_count(hi - lo);
                for r in lo..hi {
                    for (o, &v) in out.row_mut(b).iter_mut().zip(y.row(r)) {
                        *o += v;
                    }
                }
                for o in out.row_mut(b) {
                    *o *= inv;
                }
            }
            (out, None)
        }
        Pooling::Max => {
            let mut argmax = vec![0; items * d];
            for b in 0..items {
                let (lo, hi) = (offsets[b], offsets[b + 1]);
                for c in 0..d {
                    let mut best = lo;
                    for r in lo + 1..hi {
                        if y[(r, c)] > y[(best, c)] {
                            best = r;
                        }
                    }
                    argmax[b * d + c] = best;
                    out[(b, c)] = y[(best, c)];
                }
            }
            (out, Some(argmax))
        }
    }
}

fn unpool<T: Scalar>(d_pooled: &Matrix<T>, offsets: &[usize], argmax: Option<&[usize]>) -> Matrix<T> {
    let items = offsets.len() - 1;
    let d = d_pooled.cols();
    let mut d_y = Matrix::zeros(offsets[items], d);
    match argmax {
        None => {
            for b in 0..items {
                let (lo, hi) = (offsets[b], offsets[b + 1]);
                let inv = T::one() / T::from_count(hi - lo);
                for r in lo..hi {
                    for (g, &p) in d_y.row_mut(r).iter_mut().zip(d_pooled.row(b)) {
                        *g = p * inv;
                    }
                }
            }
        }
        Some(argmax) => {
            for b in 0..items {
                for c in 0..d {
                    d_y[(argmax[b * d + c], c)] = d_pooled[(b, c)];
                }
            }
        }
    }
    d_y
}
