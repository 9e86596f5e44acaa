//! Agglomerative hierarchical clustering of embedding tables with Ward
//! linkage on Euclidean distance, cut at a requested cluster count.

use kodama::{linkage, Method};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Cluster the rows of `points` into `k` groups by Ward-linkage
/// agglomeration. Returns one cluster id per row; ids are assigned in order
/// of first appearance, so row 0 always lands in cluster 0.
pub fn ward_cluster(points: &Matrix, k: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Empty("clustering an empty table".into()));
    }
    if k < 1 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "cluster count {k} exceeds the {n} rows available"
        )));
    }

    // Condensed upper-triangle Euclidean distances, (i, j) with i < j.
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for (a, b) in points.row(i).iter().zip(points.row(j)) {
                let d = a - b;
                sq += d * d;
            }
            condensed.push(sq.sqrt());
        }
    }
    let dendrogram = linkage(&mut condensed, n, Method::Ward);

    // Replay the first n - k merges. Step t merges two existing clusters
    // into a new cluster labeled n + t.
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (t, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let target = n + t;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = target;
        parent[b] = target;
    }

    let mut labels = Vec::with_capacity(n);
    let mut relabel: Vec<(usize, usize)> = Vec::new(); // (root, compact id)
    for i in 0..n {
        let root = find(&mut parent, i);
        let id = match relabel.iter().find(|(r, _)| *r == root) {
            Some((_, id)) => *id,
            None => {
                let id = relabel.len();
                relabel.push((root, id));
                id
            }
        };
        labels.push(id);
    }
    Ok(labels)
}
