//! Cross-modal retrieval evaluation: recall at K over a gallery of aligned
//! pairs, in both directions.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::objective::similarity;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `S[q][r] = a_q . i_r` over matching `[Q, N]` embedding matrices.
pub fn similarity_matrix<T: Scalar>(a: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || a.shape() != i.shape() {
        return Err(Error::Shape(alloc::format!(
            "similarity_matrix expects matching [Q, N] matrices, got {:?} and {:?}",
            a.shape(),
            i.shape()
        )));
    }
    let q = a.shape()[0];
    let mut s = Tensor::zeros(&[q, q]);
    for row in 0..q {
        for col in 0..q {
            let idx = s.idx2(row, col);
            s.data_mut()[idx] = similarity(a.row(row), i.row(col));
        }
    }
    Ok(s)
}

/// Pessimistic rank of each aligned item: `1 + #{r != q : S[q][r] >= S[q][q]}`.
/// Ties with the aligned item count against it.
pub fn ranks<T: Scalar>(s: &Tensor<T>) -> Result<Vec<usize>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Shape(alloc::format!(
            "ranks expects a non-empty square matrix, got {shape:?}"
        )));
    }
    let q = shape[0];
    let mut out = Vec::with_capacity(q);
    for row in 0..q {
        let aligned = s.at2(row, row);
        let beaten = (0..q)
            .filter(|&col| col != row && s.at2(row, col) >= aligned)
            .count();
        out.push(1 + beaten);
    }
    Ok(out)
}

/// Fraction of queries whose aligned item ranks within the top K.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("recall over zero queries".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("recall needs k >= 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Retrieval scores in both directions for a set of aligned pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Speech query, image gallery: one score per entry of `ks`.
    pub s2i: Vec<f64>,
    /// Image query, speech gallery.
    pub i2s: Vec<f64>,
    pub s2i_ranks: Vec<usize>,
    pub i2s_ranks: Vec<usize>,
    pub queries: usize,
}

impl RecallReport {
    /// Evaluate aligned `[Q, N]` audio and image embeddings at each K.
    pub fn compute<T: Scalar>(
        audio: &Tensor<T>,
        image: &Tensor<T>,
        ks: &[usize],
    ) -> Result<RecallReport> {
        let s = similarity_matrix(audio, image)?;
        let s2i_ranks = ranks(&s)?;
        // The image-to-speech direction reads the transposed matrix:
        // query row q scans S[r][q] over speech items r.
        let q = s.shape()[0];
        let mut st = Tensor::zeros(&[q, q]);
        for row in 0..q {
            for col in 0..q {
                let idx = st.idx2(row, col);
                st.data_mut()[idx] = s.at2(col, row);
            }
        }
        let i2s_ranks = ranks(&st)?;
        let s2i = ks
            .iter()
            .map(|&k| recall_at_k(&s2i_ranks, k))
            .collect::<Result<Vec<_>>>()?;
        let i2s = ks
            .iter()
            .map(|&k| recall_at_k(&i2s_ranks, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(RecallReport {
            ks: ks.to_vec(),
            s2i,
            i2s,
            s2i_ranks,
            i2s_ranks,
            queries: q,
        })
    }
}

/// Indices of the top-K gallery rows for one probe, best first. Score ties
/// resolve toward the lower index.
pub fn query<T: Scalar>(probe: &[T], gallery: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    if gallery.shape().len() != 2 || gallery.shape()[1] != probe.len() {
        return Err(Error::Shape(alloc::format!(
            "gallery {:?} does not match probe length {}",
            gallery.shape(),
            probe.len()
        )));
    }
    if k == 0 {
        return Err(Error::Invalid("query needs k >= 1".into()));
    }
    let rows = gallery.shape()[0];
    let mut scored: Vec<(usize, T)> = (0..rows)
        .map(|r| (r, similarity(probe, gallery.row(r))))
        .collect();
    // Stable sort keeps index order among exact ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    scored.truncate(k.min(rows));
    Ok(scored.into_iter().map(|(r, _)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_similarity_gives_perfect_recall() {
        let e = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let rep = RecallReport::compute(&e, &e.clone(), &[1, 2]).unwrap();
        assert_eq!(rep.s2i, vec![1.0, 1.0]);
        assert_eq!(rep.i2s, vec![1.0, 1.0]);
        assert_eq!(rep.s2i_ranks, vec![1, 1, 1]);
    }

    #[test]
    fn ties_count_against_the_aligned_item() {
        // Row 0 ties its aligned score with column 1: pessimistic rank 2.
        let s = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(ranks(&s).unwrap(), vec![2, 1]);
    }

    #[test]
    fn worked_three_by_three_example() {
        let s = Tensor::new(
            &[3, 3],
            vec![
                0.9, 0.2, 0.1, //
                0.8, 0.3, 0.2, // aligned 0.3 beaten by 0.8: rank 2
                0.5, 0.6, 0.4, // aligned 0.4 beaten twice: rank 3
            ],
        )
        .unwrap();
        let r = ranks(&s).unwrap();
        assert_eq!(r, vec![1, 2, 3]);
        assert_eq!(recall_at_k(&r, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(recall_at_k(&r, 2).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_k(&r, 3).unwrap(), 1.0);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let r = vec![1, 4, 2, 9, 3, 3, 7];
        let mut prev = 0.0;
        for k in 1..=10 {
            let cur = recall_at_k(&r, k).unwrap();
            assert!(cur >= prev);
            prev = cur;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
        let bad = Tensor::<f64>::zeros(&[2, 3]);
        assert!(ranks(&bad).is_err());
    }

    #[test]
    fn query_orders_by_score_with_index_tie_break() {
        let gallery = Tensor::new(
            &[4, 2],
            vec![0.0, 1.0, 1.0, 0.0, 0.6, 0.8, 1.0, 0.0],
        )
        .unwrap();
        let probe = [1.0, 0.0];
        // Scores: 0.0, 1.0, 0.6, 1.0. Rows 1 and 3 tie; row 1 wins.
        assert_eq!(query(&probe, &gallery, 3).unwrap(), vec![1, 3, 2]);
        // k beyond the gallery truncates.
        assert_eq!(query(&probe, &gallery, 10).unwrap().len(), 4);
    }

    #[test]
    fn directions_differ_on_asymmetric_similarities() {
        // S = [[1.0, 0.9], [0.0, 0.436]]: each speech query still ranks its
        // own image first, but image 1 prefers speech 0.
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let i = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.9, 0.436]).unwrap();
        let rep = RecallReport::compute(&a, &i, &[1]).unwrap();
        assert_eq!(rep.s2i_ranks, vec![1, 1]);
        assert_eq!(rep.i2s_ranks, vec![1, 2]);
        assert_eq!(rep.s2i, vec![1.0]);
        assert_eq!(rep.i2s, vec![0.5]);
    }
}
