//! Spatial kNN edges and similarity-matrix edge features.

use std::collections::BTreeSet;

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Undirected edges `(u, v)` with `u < v`, sorted.
///
/// Each node proposes its `k` nearest centroids (ties broken by lower index);
/// proposals are symmetrized and pairs farther apart than `delta_max` dropped.
pub fn knn_edges(centroids: &[[f64; 3]], k: usize, delta_max: f64) -> Vec<(usize, usize)> {
    let n = centroids.len();
    let mut set = BTreeSet::new();
    let mut others: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i).map(|j| (distance(&centroids[i], &centroids[j]), j)));
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in others.iter().take(k) {
            if d <= delta_max {
                set.insert((i.min(j), i.max(j)));
            }
        }
    }
    set.into_iter().collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `S[i][j] = cos(a_i, b_j)` flattened row-major; zero-norm rows give 0.
pub fn cosine_matrix(a: &[&[f64]], b: &[&[f64]]) -> Vec<f64> {
    let nb: Vec<f64> = b.iter().map(|r| norm(r)).collect();
    let mut out = Vec::with_capacity(a.len() * b.len());
    for ra in a {
        let na = norm(ra);
        for (rb, &n2) in b.iter().zip(&nb) {
            let denom = na * n2;
            let dot: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum();
            out.push(if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 });
        }
    }
    out
}

/// `M[i][j] = a_i b_j / (‖a‖ ‖b‖)` flattened row-major; zero vectors give 0.
pub fn normalized_outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let denom = norm(a) * norm(b);
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        for &y in b {
            out.push(if denom > 0.0 { x * y / denom } else { 0.0 });
        }
    }
    out
}

/// Transpose a flattened `rows × cols` matrix.
pub fn transpose_flat(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}
