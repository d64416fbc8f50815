//! Recall@K in both retrieval directions and RSUM.
//!
//! Score tables are `images x texts`. A query succeeds at `K` when any of
//! its ground-truth matches is among the top `K` candidates, ranked by
//! descending score with ties going to the lower candidate index.

use crate::error::{Error, Result};
use crate::losses::Direction;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const RSUM_KS: [usize; 3] = [1, 5, 10];

/// Ground-truth matches from each image to one or more texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingMap {
    image_to_texts: Vec<Vec<usize>>,
    text_to_images: Vec<Vec<usize>>,
}

impl PairingMap {
    /// `image_to_texts[i]` lists the texts matching image `i`; every image
    /// and every one of the `n_texts` texts needs at least one match.
    pub fn new(image_to_texts: Vec<Vec<usize>>, n_texts: usize) -> Result<Self> {
        let mut text_to_images = vec![Vec::new(); n_texts];
        for (i, ts) in image_to_texts.iter().enumerate() {
            if ts.is_empty() {
                return Err(Error::config("pairing", format!("image {i} has no ground-truth text")));
            }
            for &t in ts {
                if t >= n_texts {
                    return Err(Error::config("pairing", format!("image {i} maps to text {t} of {n_texts}")));
                }
                text_to_images[t].push(i);
            }
        }
        if let Some(t) = text_to_images.iter().position(Vec::is_empty) {
            return Err(Error::config("pairing", format!("text {t} has no ground-truth image")));
        }
        Ok(Self {
            image_to_texts,
            text_to_images,
        })
    }

    /// Item `i` matches item `i`.
    pub fn diagonal(n: usize) -> Self {
        let image_to_texts: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        Self {
            text_to_images: image_to_texts.clone(),
            image_to_texts,
        }
    }

    /// Image `i` matches texts `i·per .. (i+1)·per` (e.g. five captions per image).
    pub fn grouped(n_images: usize, per: usize) -> Result<Self> {
        Self::new((0..n_images).map(|i| (i * per..(i + 1) * per).collect()).collect(), n_images * per)
    }

    pub fn n_images(&self) -> usize {
        self.image_to_texts.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_to_images.len()
    }

    /// Ground truth for `query` in the given direction.
    pub fn matches(&self, dir: Direction, query: usize) -> &[usize] {
        match dir {
            Direction::ImageToText => &self.image_to_texts[query],
            Direction::TextToImage => &self.text_to_images[query],
        }
    }
}

/// Recall percentages for K ∈ {1, 5, 10} in both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
    pub rsum: f64,
}

impl RecallReport {
    pub fn r_at(&self, dir: Direction, k: usize) -> Option<f64> {
        let slot = RSUM_KS.iter().position(|&x| x == k)?;
        Some(match dir {
            Direction::ImageToText => self.i2t[slot],
            Direction::TextToImage => self.t2i[slot],
        })
    }

    pub const CSV_HEADER: &'static str = "r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,rsum";

    pub fn csv_row(&self) -> String {
        let v = [self.i2t[0], self.i2t[1], self.i2t[2], self.t2i[0], self.t2i[1], self.t2i[2], self.rsum];
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn check_table<T: Scalar>(scores: &Matrix<T>, pairing: &PairingMap) -> Result<()> {
    if scores.shape() != (pairing.n_images(), pairing.n_texts()) {
        return Err(Error::shape(
            "recall_at_k",
            format!("{}x{} score table", pairing.n_images(), pairing.n_texts()),
            format!("{}x{}", scores.rows(), scores.cols()),
        ));
    }
    if !scores.is_finite() {
        return Err(Error::Precondition("score table has non-finite entries".into()));
    }
    Ok(())
}

/// Best (smallest) 0-based rank any ground-truth match reaches for `query`.
fn best_rank<T: Scalar>(scores: &Matrix<T>, pairing: &PairingMap, dir: Direction, query: usize) -> usize {
    let n_cand = match dir {
        Direction::ImageToText => scores.cols(),
        Direction::TextToImage => scores.rows(),
    };
    let score = |c: usize| {
        let cell = dir.cell(query, c);
        scores[cell]
    };
    pairing
        .matches(dir, query)
        .iter()
        .map(|&p| {
            let sp = score(p);
            (0..n_cand)
                .filter(|&c| {
                    let sc = score(c);
                    c != p && (sc > sp || (sc == sp && c < p))
                })
                .count()
        })
        .min()
        .expect("every query has a match")
}

fn query_count(pairing: &PairingMap, dir: Direction) -> (usize, usize) {
    match dir {
        Direction::ImageToText => (pairing.n_images(), pairing.n_texts()),
        Direction::TextToImage => (pairing.n_texts(), pairing.n_images()),
    }
}

/// Percentage of queries whose top `k` candidates contain a ground-truth match.
pub fn recall_at_k<T: Scalar>(scores: &Matrix<T>, pairing: &PairingMap, k: usize, dir: Direction) -> Result<f64> {
    check_table(scores, pairing)?;
    let (n_query, n_cand) = query_count(pairing, dir);
    if k == 0 || k > n_cand {
        return Err(Error::config("k", format!("k = {k} outside 1..={n_cand} candidates")));
    }
    let hits = (0..n_query)
        .filter(|&q| best_rank(scores, pairing, dir, q) < k)
        .count();
    Ok(100.0 * hits as f64 / n_query as f64)
}

/// All six recalls and their sum; needs at least 10 candidates per direction.
pub fn rsum<T: Scalar>(scores: &Matrix<T>, pairing: &PairingMap) -> Result<RecallReport> {
    check_table(scores, pairing)?;
    for dir in Direction::BOTH {
        let (_, n_cand) = query_count(pairing, dir);
        if n_cand < 10 {
            return Err(Error::config(
                "split",
                format!("{} needs at least 10 candidates for R@10, have {n_cand}", dir.tag()),
            ));
        }
    }
    let mut out = RecallReport {
        i2t: [0.0; 3],
        t2i: [0.0; 3],
        rsum: 0.0,
    };
    for dir in Direction::BOTH {
        let (n_query, _) = query_count(pairing, dir);
        let ranks: Vec<usize> = (0..n_query).map(|q| best_rank(scores, pairing, dir, q)).collect();
        let slots = match dir {
            Direction::ImageToText => &mut out.i2t,
            Direction::TextToImage => &mut out.t2i,
        };
        for (slot, &k) in slots.iter_mut().zip(&RSUM_KS) {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            *slot = 100.0 * hits as f64 / n_query as f64;
        }
    }
    out.rsum = out.i2t.iter().chain(&out.t2i).sum();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_ranked_three_by_three() {
        let s = table(&[&[0.9, 0.1, 0.2], &[0.3, 0.2, 0.8], &[0.1, 0.5, 0.4]]);
        let p = PairingMap::diagonal(3);
        let r1 = recall_at_k(&s, &p, 1, Direction::ImageToText).unwrap();
        let r2 = recall_at_k(&s, &p, 2, Direction::ImageToText).unwrap();
        assert!((r1 - 100.0 / 3.0).abs() < 1e-12);
        assert!((r2 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&s, &p, 3, Direction::ImageToText).unwrap(), 100.0);
    }

    #[test]
    fn k_beyond_candidates_is_config_error() {
        let s = table(&[&[0.9, 0.1], &[0.3, 0.2]]);
        let p = PairingMap::diagonal(2);
        assert!(matches!(recall_at_k(&s, &p, 3, Direction::TextToImage), Err(Error::Config { .. })));
        assert!(matches!(recall_at_k(&s, &p, 0, Direction::TextToImage), Err(Error::Config { .. })));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = table(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let p = PairingMap::diagonal(2);
        // query 0's positive (index 0) wins the tie; query 1's loses it
        assert_eq!(recall_at_k(&s, &p, 1, Direction::ImageToText).unwrap(), 50.0);
    }

    #[test]
    fn perfect_and_inverted_tables() {
        let n = 12;
        let mut good = Matrix::<f64>::zeros(n, n);
        let mut bad = Matrix::<f64>::zeros(n, n);
        for i in 0..n {
            good[(i, i)] = 1.0;
            for j in 0..n {
                if i != j {
                    bad[(i, j)] = 1.0;
                }
            }
        }
        let p = PairingMap::diagonal(n);
        assert_eq!(rsum(&good, &p).unwrap().rsum, 600.0);
        let r = rsum(&bad, &p).unwrap();
        assert_eq!(r.rsum, 0.0);
    }

    #[test]
    fn too_few_candidates() {
        let s = Matrix::<f64>::zeros(9, 9);
        assert!(matches!(rsum(&s, &PairingMap::diagonal(9)), Err(Error::Config { .. })));
    }

    #[test]
    fn grouped_pairing_uses_any_caption() {
        // 2 images, 2 captions each; image 0's second caption ranks first,
        // image 1 ranks a foreign caption first
        let s = table(&[&[0.1, 0.9, 0.5, 0.2], &[0.5, 0.2, 0.1, 0.4]]);
        let p = PairingMap::grouped(2, 2).unwrap();
        assert_eq!(recall_at_k(&s, &p, 1, Direction::ImageToText).unwrap(), 50.0);
        // texts 1 and 3 find their image first, texts 0 and 2 do not
        assert_eq!(recall_at_k(&s, &p, 1, Direction::TextToImage).unwrap(), 50.0);
    }

    #[test]
    fn pairing_validation() {
        assert!(PairingMap::new(vec![vec![0], vec![]], 2).is_err());
        assert!(PairingMap::new(vec![vec![0], vec![0]], 2).is_err());
        assert!(PairingMap::new(vec![vec![3]], 2).is_err());
    }
}
