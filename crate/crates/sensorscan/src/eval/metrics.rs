//! Clustering agreement metrics: accuracy under optimal matching (Hungarian
//! algorithm), normalized mutual information, and the (adjusted) Rand index.
//! Natural log throughout; NMI is base-invariant either way.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Co-occurrence counts between two labelings of the same samples. Values
/// need not be dense: distinct values are indexed in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Distinct label values (ascending) on each side.
    pub row_values: Vec<usize>,
    pub col_values: Vec<usize>,
    /// counts[q][c] = samples with row value `row_values[q]` and column
    /// value `col_values[c]`.
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub n: usize,
}

impl ContingencyTable {
    pub fn from_labels(y: &[usize], c: &[usize]) -> Result<Self> {
        if y.is_empty() || y.len() != c.len() {
            return Err(Error::Validation(format!(
                "contingency table: need equal nonempty labelings, got {} and {}",
                y.len(),
                c.len()
            )));
        }
        let mut row_values: Vec<usize> = y.to_vec();
        row_values.sort_unstable();
        row_values.dedup();
        let mut col_values: Vec<usize> = c.to_vec();
        col_values.sort_unstable();
        col_values.dedup();
        let row_of = |v: usize| row_values.binary_search(&v).unwrap();
        let col_of = |v: usize| col_values.binary_search(&v).unwrap();
        let mut counts = vec![vec![0usize; col_values.len()]; row_values.len()];
        for (&yv, &cv) in y.iter().zip(c) {
            counts[row_of(yv)][col_of(cv)] += 1;
        }
        let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..col_values.len())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        let n = y.len();
        Ok(ContingencyTable {
            row_values,
            col_values,
            counts,
            row_sums,
            col_sums,
            n,
        })
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (potentials
/// method, O(n³)). Returns the column assigned to each row.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed arrays with a virtual column 0, after the standard
    // shortest-augmenting-path formulation.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Clustering accuracy: the best achievable agreement under a one-to-one
/// matching of cluster ids to label ids, found exactly with the Hungarian
/// algorithm on the negated contingency table (padded square when the two
/// sides have different cardinalities).
pub fn acc(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y, c)?;
    let s = table.row_values.len().max(table.col_values.len());
    let mut cost = vec![vec![0i64; s]; s];
    for (q, row) in table.counts.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            cost[q][j] = -(n as i64);
        }
    }
    let assignment = hungarian_min(&cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(q, &j)| -cost[q][j])
        .sum();
    Ok(matched as f64 / table.n as f64)
}

fn entropy(sums: &[usize], n: usize) -> f64 {
    sums.iter()
        .filter(|&&a| a > 0)
        .map(|&a| {
            let p = a as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, 2·I(Y;C)/(H(Y)+H(C)). Conventions for
/// zero-entropy marginals: 1 when both partitions are the trivial
/// single-cluster partition (they are then identical), 0 when exactly one
/// side is trivial (no information shared).
pub fn nmi(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y, c)?;
    let hy = entropy(&table.row_sums, table.n);
    let hc = entropy(&table.col_sums, table.n);
    if hy == 0.0 && hc == 0.0 {
        return Ok(1.0);
    }
    if hy == 0.0 || hc == 0.0 {
        return Ok(0.0);
    }
    let n = table.n as f64;
    let mut mi = 0.0;
    for (q, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let pij = nij as f64 / n;
                mi += pij
                    * (n * nij as f64 / (table.row_sums[q] as f64 * table.col_sums[j] as f64))
                        .ln();
            }
        }
    }
    Ok((2.0 * mi / (hy + hc)).clamp(0.0, 1.0))
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

fn pair_counts(table: &ContingencyTable) -> (f64, f64, f64, f64) {
    let sum_ij: f64 = table
        .counts
        .iter()
        .flat_map(|r| r.iter())
        .map(|&n| choose2(n))
        .sum();
    let sum_a: f64 = table.row_sums.iter().map(|&a| choose2(a)).sum();
    let sum_b: f64 = table.col_sums.iter().map(|&b| choose2(b)).sum();
    let total = choose2(table.n);
    (sum_ij, sum_a, sum_b, total)
}

/// Rand index: fraction of sample pairs on which the two partitions agree
/// (together in both or separated in both).
pub fn ri(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y, c)?;
    if table.n < 2 {
        return Ok(1.0); // no pairs to disagree on
    }
    let (sum_ij, sum_a, sum_b, total) = pair_counts(&table);
    Ok((total + 2.0 * sum_ij - sum_a - sum_b) / total)
}

/// Adjusted Rand index: the Rand index corrected for chance agreement,
/// (Index − Expected) / (Max − Expected) over pair counts. 1 for identical
/// partitions, ≈ 0 in expectation for independent ones, negative when
/// agreement is below chance.
pub fn ari(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y, c)?;
    if table.n < 2 {
        return Ok(1.0);
    }
    let (sum_ij, sum_a, sum_b, total) = pair_counts(&table);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        // Both partitions trivial in the same way (all-one-cluster or
        // all-singletons): identical, so perfect agreement.
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max - expected))
}
