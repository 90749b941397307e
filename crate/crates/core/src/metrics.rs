//! Agreement between a predicted and a reference partition.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub adjusted_rand_index: f64,
    pub misclassification_rate: f64,
    /// Distinct reference labels, in increasing order (confusion rows).
    pub true_classes: Vec<usize>,
    /// Predicted label matched to each confusion column, `None` for padding.
    pub predicted_clusters: Vec<Option<usize>>,
    /// Counts with predicted clusters permuted to maximize the diagonal.
    /// Padded with zero rows or columns to a square matrix.
    pub confusion: Vec<Vec<usize>>,
}

/// Contingency table with rows indexed by the sorted distinct values of `a`
/// and columns by those of `b`.
pub fn contingency(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<Vec<usize>>) {
    let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let mut map = BTreeMap::new();
        for &l in labels {
            map.entry(l).or_insert(0);
        }
        for (i, v) in map.values_mut().enumerate() {
            *v = i;
        }
        map
    };
    let (ia, ib) = (index(a), index(b));
    let mut table = vec![vec![0; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    (ia.into_keys().collect(), ib.into_keys().collect(), table)
}

fn pairs(c: usize) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items.
///
/// Returns 1 when both partitions are the same trivial partition (all in one
/// cluster, or all singletons), where the chance correction is undefined.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let (_, _, table) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..table[0].len())
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(a.len());
    let expected = if total > 0.0 {
        rows * cols / total
    } else {
        0.0
    };
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "labelings have different lengths ({} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::input("labelings are empty"));
    }
    Ok(())
}

/// Column assignment maximizing the total weight of a square matrix.
///
/// Returns `col[row]`. Shortest augmenting path form of the Hungarian method,
/// O(s^3).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let s = weights.len();
    if s == 0 {
        return Vec::new();
    }
    let top = weights
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| top - weights[i][j];
    // One-based potentials; row 0 and column 0 are sentinels.
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut row_of = vec![0usize; s + 1];
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; s];
    for j in 1..=s {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

/// Compares predicted labels with reference labels.
pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<Metrics> {
    check_lengths(pred, truth)?;
    let ari = adjusted_rand_index(pred, truth)?;
    let (classes, clusters, table) = contingency(truth, pred);
    let s = classes.len().max(clusters.len());
    let weights: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    table
                        .get(i)
                        .and_then(|r| r.get(j))
                        .map_or(0.0, |&c| c as f64)
                })
                .collect()
        })
        .collect();
    let assign = max_weight_assignment(&weights);
    let mut predicted_clusters = vec![None; s];
    let mut confusion = vec![vec![0; s]; s];
    for (i, &j) in assign.iter().enumerate() {
        predicted_clusters[i] = clusters.get(j).copied();
    }
    for (c, row) in confusion.iter_mut().enumerate() {
        for (slot, cluster) in row.iter_mut().zip(&predicted_clusters) {
            let j = cluster.and_then(|l| clusters.iter().position(|&x| x == l));
            *slot = match (table.get(c), j) {
                (Some(r), Some(j)) => r[j],
                _ => 0,
            };
        }
    }
    let correct: usize = (0..s).map(|i| confusion[i][i]).sum();
    Ok(Metrics {
        n: pred.len(),
        adjusted_rand_index: ari,
        misclassification_rate: 1.0 - correct as f64 / pred.len() as f64,
        true_classes: classes,
        predicted_clusters,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_best(weights: &[Vec<f64>]) -> f64 {
        fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..w.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + go(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(weights, 0, &mut vec![false; weights.len()])
    }

    #[test]
    fn identical_labelings() {
        let a = [1, 1, 2, 2, 3];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let m = evaluate(&a, &a).unwrap();
        assert_eq!(m.misclassification_rate, 0.0);
    }

    #[test]
    fn relabeled_partition_is_perfect() {
        let truth = [1, 1, 1, 2, 2, 3];
        let pred = [7, 7, 7, 0, 0, 4];
        assert_eq!(adjusted_rand_index(&pred, &truth).unwrap(), 1.0);
        let m = evaluate(&pred, &truth).unwrap();
        assert_eq!(m.misclassification_rate, 0.0);
        assert_eq!(m.predicted_clusters, vec![Some(7), Some(0), Some(4)]);
        assert_eq!(
            m.confusion,
            vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]
        );
    }

    #[test]
    fn constant_against_balanced_is_chance() {
        let constant = [1; 8];
        let balanced = [1, 1, 1, 1, 2, 2, 2, 2];
        assert_eq!(adjusted_rand_index(&constant, &balanced).unwrap(), 0.0);
    }

    #[test]
    fn unequal_cluster_counts_pad_the_confusion() {
        let truth = [1, 1, 2, 2];
        let pred = [1, 1, 1, 1];
        let m = evaluate(&pred, &truth).unwrap();
        assert_eq!(m.confusion.len(), 2);
        assert_eq!(m.misclassification_rate, 0.5);
        assert_eq!(
            m.predicted_clusters.iter().filter(|c| c.is_none()).count(),
            1
        );

        let pred = [1, 2, 3, 3];
        let m = evaluate(&pred, &truth).unwrap();
        assert_eq!(m.confusion.len(), 3);
        assert_eq!(m.misclassification_rate, 0.25);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            evaluate(&[1, 2], &[1]),
            Err(Error::InvalidInput(_))
        ));
        assert!(adjusted_rand_index(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(
            s in 1usize..6,
            seed in prop::collection::vec(0u32..20, 36),
        ) {
            let w: Vec<Vec<f64>> =
                (0..s).map(|i| (0..s).map(|j| seed[i * 6 + j] as f64).collect()).collect();
            let col = max_weight_assignment(&w);
            let mut seen = col.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..s).collect::<Vec<_>>());
            let total: f64 = col.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
            prop_assert_eq!(total, brute_force_best(&w));
        }

        #[test]
        fn ari_is_symmetric_and_bounded(
            a in prop::collection::vec(0usize..4, 2..40),
            shift in 0usize..40,
        ) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, &l)| (l + i * shift) % 3).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            let ba = adjusted_rand_index(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }
    }
}
