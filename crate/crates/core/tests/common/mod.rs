//! Brute-force oracles shared by the integration suites. These deliberately
//! re-derive every quantity from plain arrays, independent of the graph
//! implementation they check.

/// Mean over parts of per-part Euclidean distance between flat [P*C] vectors.
pub fn oracle_part_distance(a: &[f64], b: &[f64], parts: usize) -> f64 {
    let chans = a.len() / parts;
    (0..parts)
        .map(|p| {
            (0..chans)
                .map(|c| (a[p * chans + c] - b[p * chans + c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / parts as f64
}

/// Batch-all triplet loss by exhaustive enumeration.
pub fn oracle_triplet(embs: &[Vec<f64>], labels: &[usize], parts: usize, margin: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..embs.len() {
        for p in 0..embs.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = oracle_part_distance(&embs[a], &embs[p], parts);
            for n in 0..embs.len() {
                if labels[n] == labels[a] {
                    continue;
                }
                let d_an = oracle_part_distance(&embs[a], &embs[n], parts);
                let term = (margin + d_ap - d_an).max(0.0);
                if term > 0.0 {
                    count += 1;
                }
                sum += term;
            }
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

/// Contrastive alignment loss over every (lidar, camera) pair.
pub fn oracle_contrastive(
    lidar: &[(Vec<f64>, usize)],
    camera: &[(Vec<f64>, usize)],
    parts: usize,
    margin: f64,
) -> (f64, usize) {
    let mut sum = 0.0;
    for (ld, ll) in lidar {
        for (cd, cl) in camera {
            let d = oracle_part_distance(ld, cd, parts);
            sum += if ll == cl {
                d * d
            } else {
                (margin - d * d).max(0.0)
            };
        }
    }
    let n = lidar.len() * camera.len();
    (sum / n as f64, n)
}

/// Per-part softmax cross-entropy with shared heads [P x IDS x C], averaged
/// over parts and sequences.
pub fn oracle_cross_entropy(
    aligned: &[(Vec<f64>, usize)],
    heads: &[f64],
    parts: usize,
    num_ids: usize,
) -> f64 {
    let chans = aligned[0].0.len() / parts;
    let mut total = 0.0;
    for (f, label) in aligned {
        let mut seq = 0.0;
        for p in 0..parts {
            let logits: Vec<f64> = (0..num_ids)
                .map(|o| {
                    (0..chans)
                        .map(|c| heads[(p * num_ids + o) * chans + c] * f[p * chans + c])
                        .sum()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            seq += lse - logits[*label];
        }
        total += seq / parts as f64;
    }
    total / aligned.len() as f64
}

/// Leave-one-out nearest-neighbor rank-1 accuracy (percent) by brute force.
pub fn oracle_leave_one_out_rank1(vectors: &[Vec<f64>], labels: &[u32], parts: usize) -> f64 {
    let n = vectors.len();
    let mut hits = 0usize;
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = oracle_part_distance(&vectors[i], &vectors[j], parts);
            let better = match best {
                None => true,
                Some((bd, bj)) => d < bd || (d == bd && j < bj),
            };
            if better {
                best = Some((d, j));
            }
        }
        if labels[best.expect("n >= 2").1] == labels[i] {
            hits += 1;
        }
    }
    100.0 * hits as f64 / n as f64
}
