//! Brute-force oracle for the contrastive losses: direct transcriptions in
//! plain f64, with naive exponentials and no shared code with the library's
//! tape or stabilized reductions. Instances are small (N <= 4, |s| <= 1),
//! so the naive forms are numerically safe.

/// Cosine similarity; same mathematical definition as the library
/// (norm product clamped at 1e-12), written independently.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    dot / (aa * bb).sqrt().max(1e-12)
}

fn sigmoid(v: f64) -> f64 {
    let e = v.exp();
    e / (1.0 + e)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Binary contrastive loss over explicit score lists; an empty list drops
/// its term.
pub fn nce(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    let mut total = 0.0;
    if !pos_scores.is_empty() {
        let logs: Vec<f64> = pos_scores.iter().map(|s| sigmoid(*s).ln()).collect();
        total -= mean(&logs);
    }
    if !neg_scores.is_empty() {
        let logs: Vec<f64> = neg_scores
            .iter()
            .map(|s| (1.0 - sigmoid(*s)).ln())
            .collect();
        total -= mean(&logs);
    }
    total
}

/// Multi-class contrastive loss: one (positive score, grouped negative
/// scores) entry per anchor, averaged.
pub fn mc(groups: &[(f64, Vec<f64>)], tau: f64) -> f64 {
    let per_anchor: Vec<f64> = groups
        .iter()
        .map(|(pos, negs)| {
            let num = (pos / tau).exp();
            let den = num + negs.iter().map(|n| (n / tau).exp()).sum::<f64>();
            -(num / den).ln()
        })
        .collect();
    mean(&per_anchor)
}

/// One random problem instance: embeddings for the batch, a second dropout
/// pass, projected images, and sampled negative locations (C per image).
pub struct Instance {
    pub loc: Vec<Vec<f64>>,
    pub loc_second_pass: Vec<Vec<f64>>,
    pub img: Vec<Vec<f64>>,
    /// negatives_per_image entries per image, image-major.
    pub neg_loc: Vec<Vec<f64>>,
    pub negatives_per_image: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl Instance {
    pub fn batch_size(&self) -> usize {
        self.loc.len()
    }

    fn in_batch_scores(&self) -> (Vec<f64>, Vec<(f64, Vec<f64>)>) {
        let n = self.batch_size();
        let mut pos = Vec::new();
        let mut groups = Vec::new();
        for i in 0..n {
            let p = cosine(&self.loc[i], &self.img[i]);
            pos.push(p);
            let negs: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(&self.loc[i], &self.img[j]))
                .collect();
            groups.push((p, negs));
        }
        (pos, groups)
    }

    fn negative_location_scores(&self) -> Vec<Vec<f64>> {
        let c = self.negatives_per_image;
        (0..self.batch_size())
            .map(|i| {
                (0..c)
                    .map(|k| cosine(&self.neg_loc[i * c + k], &self.img[i]))
                    .collect()
            })
            .collect()
    }

    fn dropout_scores(&self) -> (Vec<f64>, Vec<(f64, Vec<f64>)>) {
        let n = self.batch_size();
        let mut pos = Vec::new();
        let mut groups = Vec::new();
        for i in 0..n {
            let p = cosine(&self.loc[i], &self.loc_second_pass[i]);
            pos.push(p);
            let negs: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(&self.loc[i], &self.loc_second_pass[j]))
                .collect();
            groups.push((p, negs));
        }
        (pos, groups)
    }

    /// Plain NCE loss of the in-batch pairs.
    pub fn eq_nce_in_batch(&self) -> f64 {
        let (pos, groups) = self.in_batch_scores();
        let negs: Vec<f64> = groups
            .iter()
            .flat_map(|(_, negs)| negs.iter().copied())
            .collect();
        nce(&pos, &negs)
    }

    /// Plain MC loss of the in-batch pairs at tau0.
    pub fn eq_mc_in_batch(&self) -> f64 {
        let (_, groups) = self.in_batch_scores();
        mc(&groups, self.tau0)
    }

    /// Combined binary objective: in-batch + beta1 * negative-locations
    /// (negatives only) + beta2 * dropout pairs.
    pub fn eq_nce_combined(&self) -> f64 {
        let in_batch = self.eq_nce_in_batch();
        let neg_scores: Vec<f64> = self
            .negative_location_scores()
            .into_iter()
            .flatten()
            .collect();
        let l_term = nce(&[], &neg_scores);
        let (d_pos, d_groups) = self.dropout_scores();
        let d_negs: Vec<f64> = d_groups
            .iter()
            .flat_map(|(_, negs)| negs.iter().copied())
            .collect();
        let d_term = nce(&d_pos, &d_negs);
        in_batch + self.beta1 * l_term + self.beta2 * d_term
    }

    /// Combined multi-class objective: in-batch at tau0 + alpha1 * matched
    /// positives against sampled locations at tau1 + alpha2 * dropout pairs
    /// at tau2.
    pub fn eq_mc_combined(&self) -> f64 {
        let in_batch = self.eq_mc_in_batch();
        let (pos, _) = self.in_batch_scores();
        let l_groups: Vec<(f64, Vec<f64>)> = pos
            .iter()
            .zip(self.negative_location_scores())
            .map(|(p, negs)| (*p, negs))
            .collect();
        let l_term = mc(&l_groups, self.tau1);
        let (_, d_groups) = self.dropout_scores();
        let d_term = mc(&d_groups, self.tau2);
        in_batch + self.alpha1 * l_term + self.alpha2 * d_term
    }
}
