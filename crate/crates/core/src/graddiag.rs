//! Gradient-vanishing diagnostics: `Δs` statistics, tangent-gradient
//! moduli, and a finite-difference checker for the loss chain.
//!
//! `Δs = |s_hn − s_p|` per anchor, with the hard negative taken by arg-max
//! mining. When `Δs` is small the hinge gradient of a positive and its hard
//! negative nearly cancel on the text side, and what survives on the image
//! side is tangent to the unit sphere with modulus tied to `Δs`.
//! [`TangentReport`] carries both the closed-form moduli and exact
//! projections so the two can be compared.

use crate::encoders::EncoderGrads;
use crate::error::{Error, Result};
use crate::losses::{chain_to_embeddings, cosine_sim_matrix, kink_distance, Direction, LossHyper, LossKind, SimMatrix};
use crate::numerics::{dot, l2_normalize_rows, l2_normalize_vjp, norm, Matrix};
use crate::scalar::Scalar;

const UNIT_TOL: f64 = 1e-9;

/// Per-anchor `Δs` in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaS<T> {
    pub image_to_text: Vec<T>,
    pub text_to_image: Vec<T>,
}

impl<T: Scalar> DeltaS<T> {
    pub fn direction(&self, dir: Direction) -> &[T] {
        match dir {
            Direction::ImageToText => &self.image_to_text,
            Direction::TextToImage => &self.text_to_image,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.image_to_text.iter().chain(&self.text_to_image).copied()
    }

    pub fn len(&self) -> usize {
        self.image_to_text.len() + self.text_to_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self, dir: Direction) -> T {
        mean(self.direction(dir))
    }
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_count(xs.len())
}

pub fn delta_s_per_anchor<T: Scalar>(s: &SimMatrix<T>) -> Result<DeltaS<T>> {
    let b = s.batch_size();
    if b < 2 {
        return Err(Error::NoNegatives { batch: b });
    }
    let per_dir = |dir| {
        (0..b)
            .map(|i| {
                let (_, hn) = s.hard_negative(dir, i);
                (hn - s.get(i, i)).abs()
            })
            .collect()
    };
    Ok(DeltaS {
        image_to_text: per_dir(Direction::ImageToText),
        text_to_image: per_dir(Direction::TextToImage),
    })
}

/// Image anchor `v`, positive `t`, hard negative `t̂`, all unit-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentReport<T> {
    /// `‖t̂ − t‖ · (vᵀt̂ − vᵀt)`; signed, negative when the positive wins.
    pub g_v_stated: T,
    /// `vᵀt̂`.
    pub g_that_stated: T,
    /// `vᵀt`.
    pub g_t_stated: T,
    /// `‖(t̂ − t) − (vᵀ(t̂ − t)) v‖`, the part of the image-side gradient
    /// tangent to the sphere at `v`.
    pub g_v_exact: T,
    /// `vᵀ(t̂ − t)`, the radial part removed by the projection.
    pub g_v_radial: T,
    /// `‖t̂ − t‖`.
    pub diff_norm: T,
    /// Norm of the sum of the text-side tangent gradients,
    /// `‖(v − (t̂ᵀv) t̂) − (v − (tᵀv) t)‖`; zero when the two cancel.
    pub text_sum_exact: T,
    /// `|vᵀt̂ − vᵀt|`.
    pub delta_s: T,
}

impl<T: Scalar> TangentReport<T> {
    pub fn g_v_stated_abs(&self) -> T {
        self.g_v_stated.abs()
    }
}

fn check_unit<T: Scalar>(name: &str, x: &[T]) -> Result<()> {
    let n = norm(x).as_f64();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Precondition(format!("{name} has norm {n}, expected unit norm")));
    }
    Ok(())
}

pub fn tangent_report<T: Scalar>(v: &[T], t: &[T], t_hat: &[T]) -> Result<TangentReport<T>> {
    if v.len() != t.len() || v.len() != t_hat.len() {
        return Err(Error::shape(
            "tangent_report",
            format!("three vectors of length {}", v.len()),
            format!("lengths {}, {}, {}", v.len(), t.len(), t_hat.len()),
        ));
    }
    check_unit("v", v)?;
    check_unit("t", t)?;
    check_unit("t_hat", t_hat)?;

    let vt = dot(v, t);
    let vth = dot(v, t_hat);
    let diff: Vec<T> = t_hat.iter().zip(t).map(|(&a, &b)| a - b).collect();
    let diff_norm = norm(&diff);
    let radial = dot(v, &diff);
    let tangent: Vec<T> = diff.iter().zip(v).map(|(&g, &vk)| g - radial * vk).collect();
    let text_sum: Vec<T> = (0..v.len())
        .map(|k| (v[k] - vth * t_hat[k]) - (v[k] - vt * t[k]))
        .collect();

    Ok(TangentReport {
        g_v_stated: diff_norm * (vth - vt),
        g_that_stated: vth,
        g_t_stated: vt,
        g_v_exact: norm(&tangent),
        g_v_radial: radial,
        diff_norm,
        text_sum_exact: norm(&text_sum),
        delta_s: (vth - vt).abs(),
    })
}

/// True when `Δs ≤ ε`: the anchor is vanishing-prone and hard negatives
/// should not be mined. The boundary belongs to the non-mining side.
pub fn vanishing_predicate<T: Scalar>(delta_s: T, epsilon: T) -> bool {
    delta_s <= epsilon
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingReport<T> {
    pub delta_s: DeltaS<T>,
    pub mean_delta_s: T,
    /// One entry per encoder, image first.
    pub first_layer_grad_norms: Vec<T>,
}

impl<T: Scalar> VanishingReport<T> {
    pub fn new(delta_s: DeltaS<T>, first_layer_grad_norms: Vec<T>) -> Self {
        let all: Vec<T> = delta_s.iter().collect();
        Self {
            mean_delta_s: mean(&all),
            delta_s,
            first_layer_grad_norms,
        }
    }

    /// Fraction of anchor-direction entries with `Δs ≤ ε`.
    pub fn fraction_below(&self, epsilon: T) -> f64 {
        fraction_below(self.delta_s.iter(), epsilon)
    }
}

pub(crate) fn fraction_below<T: Scalar>(values: impl Iterator<Item = T>, epsilon: T) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for d in values {
        n += 1;
        hit += vanishing_predicate(d, epsilon) as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Frobenius norm of the first linear layer's weight gradient.
pub fn first_layer_grad_norm<T: Scalar>(grads: &EncoderGrads<T>) -> T {
    grads.first_layer_weight().frobenius_norm()
}

/// `max|a − n| / max(max|a|, max|n|)` over paired tensors; 0 when both are zero.
pub fn relative_error<T: Scalar>(analytic: &[&Matrix<T>], numeric: &[&Matrix<T>]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::shape(
            "relative_error",
            format!("{} tensors", analytic.len()),
            format!("{}", numeric.len()),
        ));
    }
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max(a.max_abs_diff(n)?.as_f64());
        scale = scale.max(a.max_abs().as_f64()).max(n.max_abs().as_f64());
    }
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdOutcome {
    Checked { max_rel_error: f64 },
    /// Some kink lies within the guard distance; the instance says nothing
    /// about gradient correctness.
    Skipped { kink_distance: f64 },
}

impl FdOutcome {
    pub fn is_skipped(&self) -> bool {
        matches!(self, FdOutcome::Skipped { .. })
    }
}

fn loss_of<T: Scalar>(kind: LossKind, v_raw: &Matrix<T>, t_raw: &Matrix<T>, h: &LossHyper<T>) -> Result<T> {
    let (v, _) = l2_normalize_rows(v_raw)?;
    let (t, _) = l2_normalize_rows(t_raw)?;
    Ok(kind.evaluate(&cosine_sim_matrix(&v, &t)?, h)?.value)
}

/// Analytic `(∂L/∂V_raw, ∂L/∂T_raw)` through normalization, similarity and loss.
pub fn analytic_embedding_grads<T: Scalar>(
    kind: LossKind,
    v_raw: &Matrix<T>,
    t_raw: &Matrix<T>,
    h: &LossHyper<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (v, vt) = l2_normalize_rows(v_raw)?;
    let (t, tt) = l2_normalize_rows(t_raw)?;
    let res = kind.evaluate(&cosine_sim_matrix(&v, &t)?, h)?;
    let (dv, dt) = chain_to_embeddings(&res.d_s, &v, &t)?;
    Ok((l2_normalize_vjp(&dv, &vt)?, l2_normalize_vjp(&dt, &tt)?))
}

fn central_diff<T: Scalar>(x: &Matrix<T>, step: T, f: impl Fn(&Matrix<T>) -> Result<T>) -> Result<Matrix<T>> {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (up - down) / (step + step);
    }
    Ok(g)
}

/// Compares the analytic gradient w.r.t. the raw (pre-normalization)
/// embeddings against central differences.
///
/// A coordinate step of `h` moves a similarity by at most `h / min‖row‖`, so
/// any kink closer than ten times that is reported as skipped.
pub fn finite_diff_check<T: Scalar>(
    kind: LossKind,
    v_raw: &Matrix<T>,
    t_raw: &Matrix<T>,
    h: &LossHyper<T>,
    step: T,
) -> Result<FdOutcome> {
    let st = step.as_f64();
    if !(1e-8..=1e-4).contains(&st) {
        return Err(Error::Precondition(format!("finite-difference step {st} outside [1e-8, 1e-4]")));
    }
    let (v, vtape) = l2_normalize_rows(v_raw)?;
    let (t, ttape) = l2_normalize_rows(t_raw)?;
    let min_norm = vtape
        .input_norms
        .iter()
        .chain(&ttape.input_norms)
        .map(|n| n.as_f64())
        .fold(f64::INFINITY, f64::min);
    let s = cosine_sim_matrix(&v, &t)?;
    let kink = kink_distance(&s, kind, h).as_f64();
    if kink < 10.0 * st * (2.0 / min_norm).max(1.0) {
        return Ok(FdOutcome::Skipped { kink_distance: kink });
    }
    let (dv, dt) = analytic_embedding_grads(kind, v_raw, t_raw, h)?;
    let nv = central_diff(v_raw, step, |p| loss_of(kind, p, t_raw, h))?;
    let nt = central_diff(t_raw, step, |p| loss_of(kind, v_raw, p, h))?;
    Ok(FdOutcome::Checked {
        max_rel_error: relative_error(&[&dv, &dt], &[&nv, &nt])?,
    })
}
