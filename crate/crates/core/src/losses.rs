//! The triplet-loss family over a batch similarity matrix.
//!
//! All losses take `S[i][j] = vᵢᵀtⱼ` with positives on the diagonal and return
//! the loss value, the exact gradient `∂L/∂S`, and a per-anchor record of
//! which negative and which branch each term used. Both retrieval directions
//! are treated symmetrically: image-to-text anchors walk rows of `S`,
//! text-to-image anchors walk columns.
//!
//! Conventions shared by every loss:
//! - a hinge `[x]₊` is active only for `x > 0`; at `x = 0` its subgradient is 0;
//! - hard-negative arg-max ties resolve to the lowest index;
//! - `delta_s` in every record is `|s_hard_negative − s_positive|` using the
//!   unrestricted hard negative, whatever the loss actually optimized.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, norm, Matrix};
use crate::scalar::{hinge, Scalar};

/// Tolerance on row norms accepted by [`cosine_sim_matrix`].
const UNIT_NORM_TOL: f64 = 1e-6;

/// Square batch similarity matrix with positives on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix<T> {
    s: Matrix<T>,
}

impl<T: Scalar> SimMatrix<T> {
    pub fn new(s: Matrix<T>) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::shape(
                "SimMatrix::new",
                "square matrix",
                format!("{}x{}", s.rows(), s.cols()),
            ));
        }
        Ok(Self { s })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn batch_size(&self) -> usize {
        self.s.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.s[(i, j)]
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.s
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.s
    }

    /// Score of `candidate` for `anchor` in the given direction.
    #[inline]
    pub fn score(&self, dir: Direction, anchor: usize, candidate: usize) -> T {
        let (r, c) = dir.cell(anchor, candidate);
        self.s[(r, c)]
    }

    /// Arg-max over negatives `j ≠ anchor`, lowest index on ties.
    pub fn hard_negative(&self, dir: Direction, anchor: usize) -> (usize, T) {
        self.best_negative(dir, anchor, |_| true)
            .expect("batch of at least two has a negative")
    }

    /// Arg-max over negatives satisfying `keep`, lowest index on ties.
    pub fn best_negative(&self, dir: Direction, anchor: usize, keep: impl Fn(T) -> bool) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for j in 0..self.batch_size() {
            if j == anchor {
                continue;
            }
            let sj = self.score(dir, anchor, j);
            if !keep(sj) {
                continue;
            }
            match best {
                Some((_, b)) if sj <= b => {}
                _ => best = Some((j, sj)),
            }
        }
        best
    }

    fn require_negatives(&self) -> Result<()> {
        if self.batch_size() < 2 {
            return Err(Error::NoNegatives {
                batch: self.batch_size(),
            });
        }
        Ok(())
    }
}

/// Retrieval direction: which modality plays the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    /// Cell of `S` holding the score of `candidate` for `anchor`.
    #[inline]
    pub fn cell(self, anchor: usize, candidate: usize) -> (usize, usize) {
        match self {
            Direction::ImageToText => (anchor, candidate),
            Direction::TextToImage => (candidate, anchor),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

/// Which formula an anchor's term used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Hn,
    Triplet,
    SemiHard,
    Contrastive,
    Inactive,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Hn => "hn",
            Branch::Triplet => "triplet",
            Branch::SemiHard => "semi_hard",
            Branch::Contrastive => "contrastive",
            Branch::Inactive => "inactive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRecord<T> {
    /// Negative the term was built on; `None` for all-negatives terms and empty semi-hard sets.
    pub negative: Option<usize>,
    /// Unrestricted hard negative (arg-max over all negatives).
    pub hard_negative: usize,
    pub branch: Branch,
    pub delta_s: T,
    /// This anchor's contribution to the loss value.
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningRecord<T> {
    pub image_to_text: Vec<AnchorRecord<T>>,
    pub text_to_image: Vec<AnchorRecord<T>>,
}

impl<T: Scalar> MiningRecord<T> {
    pub fn direction(&self, dir: Direction) -> &[AnchorRecord<T>] {
        match dir {
            Direction::ImageToText => &self.image_to_text,
            Direction::TextToImage => &self.text_to_image,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &AnchorRecord<T>> {
        self.image_to_text.iter().chain(&self.text_to_image)
    }

    /// Number of anchor-direction entries on `branch`.
    pub fn count(&self, branch: Branch) -> usize {
        self.iter().filter(|r| r.branch == branch).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    /// `∂L/∂S`.
    pub d_s: Matrix<T>,
    pub mining: MiningRecord<T>,
}

/// Margin `λ` and the selective-mining threshold `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossHyper<T> {
    pub margin: T,
    pub threshold: T,
}

impl<T: Scalar> LossHyper<T> {
    pub fn new(margin: T, threshold: T) -> Result<Self> {
        if !(margin > T::zero()) || !margin.is_finite() {
            return Err(Error::config("margin", format!("must be > 0, got {margin}")));
        }
        if !(threshold >= T::zero()) || !threshold.is_finite() {
            return Err(Error::config("epsilon", format!("must be >= 0, got {threshold}")));
        }
        Ok(Self { margin, threshold })
    }
}

impl<T: Scalar> Default for LossHyper<T> {
    fn default() -> Self {
        Self {
            margin: T::of(0.2),
            threshold: T::of(0.01),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Triplet,
    Hn,
    Shn,
    Sct,
    SelHn,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Triplet,
        LossKind::Hn,
        LossKind::Shn,
        LossKind::Sct,
        LossKind::SelHn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Hn => "hn",
            LossKind::Shn => "shn",
            LossKind::Sct => "sct",
            LossKind::SelHn => "selhn",
        }
    }

    pub fn evaluate<T: Scalar>(self, s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
        match self {
            LossKind::Triplet => triplet_loss(s, h),
            LossKind::Hn => hn_loss(s, h),
            LossKind::Shn => shn_loss(s, h),
            LossKind::Sct => sct_loss(s, h),
            LossKind::SelHn => selhn_loss(s, h),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("loss", format!("unknown loss `{s}` (triplet|hn|shn|sct|selhn)")))
    }
}

/// `S = V Tᵀ` for two batches of unit-norm rows.
pub fn cosine_sim_matrix<T: Scalar>(v: &Matrix<T>, t: &Matrix<T>) -> Result<SimMatrix<T>> {
    if v.shape() != t.shape() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            format!("{}x{}", v.rows(), v.cols()),
            format!("{}x{}", t.rows(), t.cols()),
        ));
    }
    for (name, m) in [("image", v), ("text", t)] {
        for i in 0..m.rows() {
            let n = norm(m.row(i)).as_f64();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Precondition(format!(
                    "{name} embedding row {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    SimMatrix::new(matmul_nt(v, t)?)
}

/// Chains `∂L/∂S` through `S = V Tᵀ`: returns `(∂L/∂V, ∂L/∂T) = (G T, Gᵀ V)`.
pub fn chain_to_embeddings<T: Scalar>(d_s: &Matrix<T>, v: &Matrix<T>, t: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    if v.shape() != t.shape() || d_s.rows() != v.rows() || d_s.cols() != t.rows() {
        return Err(Error::shape(
            "chain_to_embeddings",
            format!("{0}x{0} gradient with two {0}xd batches", v.rows()),
            format!(
                "{}x{} gradient, {}x{} and {}x{} batches",
                d_s.rows(),
                d_s.cols(),
                v.rows(),
                v.cols(),
                t.rows(),
                t.cols()
            ),
        ));
    }
    Ok((matmul(d_s, t)?, matmul_tn(d_s, v)?))
}

/// Accumulates one anchor's gradient contributions into `∂L/∂S`.
struct GradSink<'a, T> {
    d_s: &'a mut Matrix<T>,
    dir: Direction,
    anchor: usize,
}

impl<T: Scalar> GradSink<'_, T> {
    #[inline]
    fn add(&mut self, candidate: usize, g: T) {
        let cell = self.dir.cell(self.anchor, candidate);
        self.d_s[cell] += g;
    }

    /// Gradient of `scale · [s_neg − s_pos + λ]₊` when the hinge is active.
    #[inline]
    fn hinge_pair(&mut self, negative: usize, scale: T) {
        self.add(negative, scale);
        let anchor = self.anchor;
        self.add(anchor, -scale);
    }
}

/// Context for evaluating one anchor in one direction.
struct Anchor<'a, T> {
    s: &'a SimMatrix<T>,
    dir: Direction,
    i: usize,
    positive: T,
    hard: (usize, T),
}

impl<'a, T: Scalar> Anchor<'a, T> {
    fn new(s: &'a SimMatrix<T>, dir: Direction, i: usize) -> Self {
        Self {
            s,
            dir,
            i,
            positive: s.get(i, i),
            hard: s.hard_negative(dir, i),
        }
    }

    fn delta_s(&self) -> T {
        (self.hard.1 - self.positive).abs()
    }

    fn record(&self, negative: Option<usize>, branch: Branch, value: T) -> AnchorRecord<T> {
        AnchorRecord {
            negative,
            hard_negative: self.hard.0,
            branch,
            delta_s: self.delta_s(),
            value,
        }
    }

    /// `[s_neg − s_pos + λ]₊` for the hard negative.
    fn hard_hinge(&self, h: &LossHyper<T>, sink: &mut GradSink<'_, T>) -> AnchorRecord<T> {
        let (j, sj) = self.hard;
        let x = sj - self.positive + h.margin;
        if x > T::zero() {
            sink.hinge_pair(j, T::one());
        }
        self.record(Some(j), Branch::Hn, hinge(x))
    }

    /// `scale · Σ_{j≠i} [s_j − s_pos + λ]₊`.
    fn all_negatives(&self, h: &LossHyper<T>, scale: T, sink: &mut GradSink<'_, T>) -> AnchorRecord<T> {
        let mut sum = T::zero();
        for j in 0..self.s.batch_size() {
            if j == self.i {
                continue;
            }
            let x = self.s.score(self.dir, self.i, j) - self.positive + h.margin;
            if x > T::zero() {
                sum += x;
                sink.hinge_pair(j, scale);
            }
        }
        self.record(None, Branch::Triplet, scale * sum)
    }
}

fn run_per_anchor<T: Scalar>(
    s: &SimMatrix<T>,
    mut term: impl FnMut(&Anchor<'_, T>, &mut GradSink<'_, T>) -> AnchorRecord<T>,
) -> Result<LossResult<T>> {
    s.require_negatives()?;
    let b = s.batch_size();
    let mut d_s = Matrix::zeros(b, b);
    let mut records = [Vec::with_capacity(b), Vec::with_capacity(b)];
    for (slot, dir) in Direction::BOTH.into_iter().enumerate() {
        for i in 0..b {
            let anchor = Anchor::new(s, dir, i);
            let mut sink = GradSink {
                d_s: &mut d_s,
                dir,
                anchor: i,
            };
            records[slot].push(term(&anchor, &mut sink));
        }
    }
    let [image_to_text, text_to_image] = records;
    let mut value = T::zero();
    for i in 0..b {
        value += image_to_text[i].value + text_to_image[i].value;
    }
    Ok(LossResult {
        value,
        d_s,
        mining: MiningRecord {
            image_to_text,
            text_to_image,
        },
    })
}

/// Sum over all anchors and all negatives of both directional hinges, no batch normalization.
pub fn triplet_loss<T: Scalar>(s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
    run_per_anchor(s, |a, sink| a.all_negatives(h, T::one(), sink))
}

/// Hinge against the hardest in-batch negative, both directions.
pub fn hn_loss<T: Scalar>(s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
    run_per_anchor(s, |a, sink| a.hard_hinge(h, sink))
}

/// Hinge against the hardest negative still scoring strictly below the positive.
///
/// An anchor with no such negative contributes nothing and is marked inactive.
pub fn shn_loss<T: Scalar>(s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
    run_per_anchor(s, |a, sink| {
        let positive = a.positive;
        match s.best_negative(a.dir, a.i, |sj| sj < positive) {
            Some((j, sj)) => {
                let x = sj - positive + h.margin;
                if x > T::zero() {
                    sink.hinge_pair(j, T::one());
                }
                a.record(Some(j), Branch::SemiHard, hinge(x))
            }
            None => a.record(None, Branch::Inactive, T::zero()),
        }
    })
}

/// Hard-negative hinge while the hard negative ranks below the positive;
/// otherwise the raw hard-negative similarity itself is the term.
pub fn sct_loss<T: Scalar>(s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
    run_per_anchor(s, |a, sink| {
        let (j, sj) = a.hard;
        if sj < a.positive {
            a.hard_hinge(h, sink)
        } else {
            sink.add(j, T::one());
            a.record(Some(j), Branch::Contrastive, sj)
        }
    })
}

/// Selective hard-negative mining: the hard-negative hinge when `Δs > ε`,
/// otherwise the all-negatives triplet term scaled by `1/B`.
pub fn selhn_loss<T: Scalar>(s: &SimMatrix<T>, h: &LossHyper<T>) -> Result<LossResult<T>> {
    let inv_b = T::one() / T::from_count(s.batch_size());
    run_per_anchor(s, |a, sink| {
        if a.delta_s() > h.threshold {
            a.hard_hinge(h, sink)
        } else {
            a.all_negatives(h, inv_b, sink)
        }
    })
}

/// Distance in similarity space from `s` to the nearest point where `kind`
/// is not differentiable: a hinge kink, an arg-max tie, a semi-hard or
/// contrastive boundary, or the selective threshold.
///
/// The check is conservative: it looks at every candidate kink whether or
/// not the loss currently uses it.
pub fn kink_distance<T: Scalar>(s: &SimMatrix<T>, kind: LossKind, h: &LossHyper<T>) -> T {
    let b = s.batch_size();
    let mut best = T::infinity();
    for dir in Direction::BOTH {
        for i in 0..b {
            let positive = s.get(i, i);
            let mut scores: Vec<T> = (0..b).filter(|&j| j != i).map(|j| s.score(dir, i, j)).collect();
            for &sj in &scores {
                best = best.min((sj - positive + h.margin).abs());
                if matches!(kind, LossKind::Shn | LossKind::Sct) {
                    best = best.min((sj - positive).abs());
                }
            }
            scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
            if matches!(kind, LossKind::Hn | LossKind::Sct | LossKind::SelHn) && scores.len() >= 2 {
                best = best.min(scores[0] - scores[1]);
            }
            if kind == LossKind::Shn {
                let below: Vec<T> = scores.iter().copied().filter(|&x| x < positive).collect();
                if below.len() >= 2 {
                    best = best.min(below[0] - below[1]);
                }
            }
            if kind == LossKind::SelHn {
                let delta = (scores[0] - positive).abs();
                best = best.min((delta - h.threshold).abs());
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(rows: &[&[f64]]) -> SimMatrix<f64> {
        SimMatrix::from_rows(rows).unwrap()
    }

    fn hyp() -> LossHyper<f64> {
        LossHyper::new(0.2, 0.01).unwrap()
    }

    #[test]
    fn cosine_matrix_small_case() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 0.0], [0.6, 0.8]]).unwrap();
        let s = cosine_sim_matrix(&v, &t).unwrap();
        assert_eq!(s.matrix().as_slice(), &[1.0, 0.6, 0.0, 0.8]);
    }

    #[test]
    fn cosine_matrix_identical_batches_symmetric() {
        let (v, _) = crate::numerics::l2_normalize_rows(&crate::numerics::gaussian::<f64>(5, 3, 9)).unwrap();
        let s = cosine_sim_matrix(&v, &v).unwrap();
        for i in 0..5 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..5 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn cosine_matrix_rejects_mismatch_and_non_unit() {
        let v = Matrix::<f64>::from_rows(&[[1.0, 0.0]]).unwrap();
        let t = Matrix::<f64>::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_sim_matrix(&v, &t), Err(Error::Shape { .. })));
        let w = Matrix::<f64>::from_rows(&[[2.0, 0.0]]).unwrap();
        assert!(matches!(cosine_sim_matrix(&v, &w), Err(Error::Precondition(_))));
    }

    #[test]
    fn triplet_two_by_two() {
        let s = sm(&[&[0.6, 0.5], &[0.7, 0.4]]);
        let r = triplet_loss(&s, &hyp()).unwrap();
        assert!((r.value - 1.2).abs() < 1e-12);
        assert_eq!(r.d_s.as_slice(), &[-2.0, 2.0, 2.0, -2.0]);
    }

    #[test]
    fn triplet_all_inactive() {
        let s = sm(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, 0.4], &[0.1, 0.2, 0.7]]);
        let r = triplet_loss(&s, &hyp()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.d_s.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hn_equals_triplet_at_batch_two() {
        let s = sm(&[&[0.6, 0.5], &[0.7, 0.4]]);
        let t = triplet_loss(&s, &hyp()).unwrap();
        let h = hn_loss(&s, &hyp()).unwrap();
        assert!((h.value - 1.2).abs() < 1e-12);
        assert_eq!(h.d_s, t.d_s);
    }

    #[test]
    fn hn_three_by_three_is_zero() {
        let s = sm(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, 0.4], &[0.1, 0.2, 0.7]]);
        let r = hn_loss(&s, &hyp()).unwrap();
        assert_eq!(r.value, 0.0);
        let i2t: Vec<_> = r.mining.image_to_text.iter().map(|a| a.negative.unwrap()).collect();
        let t2i: Vec<_> = r.mining.text_to_image.iter().map(|a| a.negative.unwrap()).collect();
        assert_eq!(i2t, vec![2, 2, 1]);
        assert_eq!(t2i, vec![1, 2, 1]);
    }

    #[test]
    fn hard_negative_ties_take_lowest_index() {
        let s = sm(&[&[0.9, 0.5, 0.5], &[0.5, 0.9, 0.5], &[0.5, 0.5, 0.9]]);
        assert_eq!(s.hard_negative(Direction::ImageToText, 0).0, 1);
        assert_eq!(s.hard_negative(Direction::ImageToText, 2).0, 0);
        assert_eq!(s.hard_negative(Direction::TextToImage, 1).0, 0);
    }

    #[test]
    fn shn_restricts_to_below_positive() {
        // anchor 0: positive 0.9, negatives 0.5 and 0.95
        let s = sm(&[&[0.9, 0.5, 0.95], &[0.0, 0.9, 0.0], &[0.0, 0.0, 0.9]]);
        let r = shn_loss(&s, &hyp()).unwrap();
        let a0 = r.mining.image_to_text[0];
        assert_eq!(a0.negative, Some(1));
        assert_eq!(a0.branch, Branch::SemiHard);
        assert_eq!(a0.value, 0.0);
        assert_eq!(a0.hard_negative, 2);
    }

    #[test]
    fn shn_empty_set_is_inactive() {
        // anchor 0: positive 0.4, negatives 0.5 and 0.6
        let s = sm(&[&[0.4, 0.5, 0.6], &[0.0, 0.9, 0.0], &[0.0, 0.0, 0.9]]);
        let r = shn_loss(&s, &hyp()).unwrap();
        let a0 = r.mining.image_to_text[0];
        assert_eq!(a0.branch, Branch::Inactive);
        assert_eq!(a0.negative, None);
        assert_eq!(a0.value, 0.0);
        assert_eq!(r.d_s.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sct_branches() {
        // anchor 0 i2t: positive 0.8, hard negative 0.5 -> hinge 0, branch hn
        // anchor 1 i2t: positive 0.3, hard negative 0.5 -> contrastive, term 0.5
        let s = sm(&[&[0.8, 0.5], &[0.5, 0.3]]);
        let r = sct_loss(&s, &hyp()).unwrap();
        let a0 = r.mining.image_to_text[0];
        assert_eq!(a0.branch, Branch::Hn);
        assert!(a0.value.abs() < 1e-15);
        let a1 = r.mining.image_to_text[1];
        assert_eq!(a1.branch, Branch::Contrastive);
        assert_eq!(a1.value, 0.5);
        // t2i anchor 1 also has hard negative s[0][1] = 0.5 > 0.3: contrastive, +1 at (0,1)
        // i2t anchor 1 contributes +1 at (1,0); neither touches the diagonal
        assert_eq!(r.d_s[(1, 0)], 1.0);
        assert_eq!(r.d_s[(1, 1)], 0.0);
    }

    #[test]
    fn sct_tie_goes_to_contrastive() {
        let s = sm(&[&[0.5, 0.5], &[0.1, 0.9]]);
        let r = sct_loss(&s, &hyp()).unwrap();
        assert_eq!(r.mining.image_to_text[0].branch, Branch::Contrastive);
    }

    #[test]
    fn selhn_branch_split() {
        // anchor 0: positive 0.500, hard negative 0.505 -> Δs 0.005 <= ε -> triplet
        // anchor 1: positive 0.4, hard negative 0.7 -> Δs 0.3 -> hn, term 0.5
        let s = sm(&[&[0.500, 0.505, 0.1], &[0.7, 0.4, 0.0], &[0.0, 0.0, 0.9]]);
        let r = selhn_loss(&s, &hyp()).unwrap();
        let a0 = r.mining.image_to_text[0];
        assert_eq!(a0.branch, Branch::Triplet);
        assert!((a0.delta_s - 0.005).abs() < 1e-12);
        // (1/3)([0.505-0.5+0.2]₊ + [0.1-0.5+0.2]₊)
        assert!((a0.value - 0.205 / 3.0).abs() < 1e-12);
        let a1 = r.mining.image_to_text[1];
        assert_eq!(a1.branch, Branch::Hn);
        assert!((a1.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn selhn_zero_threshold_matches_hn() {
        let s = sm(&[&[0.3, 0.5, 0.1], &[0.7, 0.4, 0.2], &[0.0, 0.6, 0.9]]);
        let h0 = LossHyper::new(0.2, 0.0).unwrap();
        let a = selhn_loss(&s, &h0).unwrap();
        let b = hn_loss(&s, &h0).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.d_s, b.d_s);
    }

    #[test]
    fn batch_of_one_has_no_negatives() {
        let s = sm(&[&[1.0]]);
        for kind in LossKind::ALL {
            assert!(matches!(kind.evaluate(&s, &hyp()), Err(Error::NoNegatives { batch: 1 })));
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(matches!(LossHyper::new(-1.0, 0.01), Err(Error::Config { key, .. }) if key == "margin"));
        assert!(matches!(LossHyper::new(0.2, -0.1), Err(Error::Config { key, .. }) if key == "epsilon"));
        assert!(LossHyper::new(0.2, 0.0).is_ok());
    }

    #[test]
    fn loss_kind_round_trips_names() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("contrastive".parse::<LossKind>().is_err());
    }

    #[test]
    fn chain_single_active_hinge() {
        // one anchor with an active i2t hinge against negative 1: row 0 of dL/dV = t1 - t0
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.6, 0.8], [0.8, 0.6]]).unwrap();
        let mut d_s = Matrix::zeros(2, 2);
        d_s[(0, 1)] = 1.0;
        d_s[(0, 0)] = -1.0;
        let (dv, dt) = chain_to_embeddings(&d_s, &v, &t).unwrap();
        assert!((dv[(0, 0)] - 0.2_f64).abs() < 1e-15);
        assert!((dv[(0, 1)] + 0.2_f64).abs() < 1e-15);
        assert_eq!(dv.row(1), &[0.0, 0.0]);
        // text side: +v0 on the negative, -v0 on the positive
        assert_eq!(dt.row(0), &[-1.0, 0.0]);
        assert_eq!(dt.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn chain_zero_gradient() {
        let v = crate::numerics::gaussian::<f64>(3, 4, 1);
        let t = crate::numerics::gaussian::<f64>(3, 4, 2);
        let (dv, dt) = chain_to_embeddings(&Matrix::zeros(3, 3), &v, &t).unwrap();
        assert_eq!(dv.max_abs(), 0.0);
        assert_eq!(dt.max_abs(), 0.0);
    }
}
