//! Training objectives: per-modality batch-all triplet losses on fused
//! embeddings, the cross-modality contrastive alignment loss and identity
//! cross-entropy on aligned embeddings, and their composite.

use std::collections::HashMap;

use crate::graph::{Graph, Var};
use crate::tensor::Scalar;
use crate::Result;

/// Mean over parts of the per-part Euclidean distance between two
/// P x C part embeddings. This is the metric used everywhere: triplets,
/// pairs, and retrieval.
pub fn part_distance<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let per_part = g.sum_axis(sq, 1)?;
    let norms = g.sqrt(per_part);
    g.mean_axis(norms, 0)
}

fn sum_scalars<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Batch-all triplet loss over one modality's fused embeddings:
/// sum of max(m + d(a,p) - d(a,n), 0) over all valid (a, p, n), divided by
/// the count of strictly positive terms. No valid or active triplet means
/// loss 0 with a zero count.
pub fn triplet_loss<S: Scalar>(
    g: &mut Graph<S>,
    embeddings: &[(Var, usize)],
    margin: f64,
) -> Result<(Var, usize)> {
    let n = embeddings.len();
    let mut dist_memo: HashMap<(usize, usize), Var> = HashMap::new();
    let mut distance = |g: &mut Graph<S>, i: usize, j: usize| -> Result<Var> {
        let key = (i.min(j), i.max(j));
        if let Some(&v) = dist_memo.get(&key) {
            return Ok(v);
        }
        let d = part_distance(g, embeddings[key.0].0, embeddings[key.1].0)?;
        dist_memo.insert(key, d);
        Ok(d)
    };
    let margin_var = g.constant_scalar(margin);
    let mut terms = Vec::new();
    let mut positive = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || embeddings[p].1 != embeddings[a].1 {
                continue;
            }
            let d_ap = distance(g, a, p)?;
            for neg in 0..n {
                if embeddings[neg].1 == embeddings[a].1 {
                    continue;
                }
                let d_an = distance(g, a, neg)?;
                let gap = g.sub(d_ap, d_an)?;
                let shifted = g.add(margin_var, gap)?;
                let term = g.relu(shifted);
                if g.scalar_value(term) > S::zero() {
                    positive += 1;
                }
                terms.push(term);
            }
        }
    }
    if positive == 0 {
        return Ok((g.constant_scalar(0.0), 0));
    }
    let total = sum_scalars(g, &terms)?;
    Ok((g.mul_scalar(total, 1.0 / positive as f64), positive))
}

/// Contrastive alignment over all (LiDAR, camera) pairs in the batch:
/// same identity pulls with d^2, different identities push with
/// max(m - d^2, 0). Returns the loss and the pair count N_p.
pub fn contrastive_alignment_loss<S: Scalar>(
    g: &mut Graph<S>,
    lidar: &[(Var, usize)],
    camera: &[(Var, usize)],
    margin: f64,
) -> Result<(Var, usize)> {
    let n_pairs = lidar.len() * camera.len();
    if n_pairs == 0 {
        return Ok((g.constant_scalar(0.0), 0));
    }
    let margin_var = g.constant_scalar(margin);
    let mut terms = Vec::with_capacity(n_pairs);
    for &(d_emb, d_label) in lidar {
        for &(s_emb, s_label) in camera {
            let d = part_distance(g, d_emb, s_emb)?;
            let d_sq = g.mul(d, d)?;
            let term = if d_label == s_label {
                d_sq
            } else {
                let gap = g.sub(margin_var, d_sq)?;
                g.relu(gap)
            };
            terms.push(term);
        }
    }
    let total = sum_scalars(g, &terms)?;
    Ok((g.mul_scalar(total, 1.0 / n_pairs as f64), n_pairs))
}

/// Identity cross-entropy on aligned embeddings of both modalities with
/// shared per-part classifier heads (P x numIds x C), averaged over parts,
/// sequences, and modalities.
pub fn cross_entropy_loss<S: Scalar>(
    g: &mut Graph<S>,
    aligned: &[(Var, usize)],
    heads: Var,
) -> Result<Var> {
    let parts = g.shape(heads)[0];
    let mut terms = Vec::with_capacity(aligned.len());
    for &(emb, label) in aligned {
        let logits = g.part_linear(heads, emb)?;
        let labels = vec![label; parts];
        terms.push(g.cross_entropy_rows(logits, &labels)?);
    }
    if terms.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let total = sum_scalars(g, &terms)?;
    Ok(g.mul_scalar(total, 1.0 / terms.len() as f64))
}

/// L = L_pc + L_sils + L_ce + lambda * L_contrastive.
pub fn composite_loss<S: Scalar>(
    g: &mut Graph<S>,
    l_pc: Var,
    l_sils: Var,
    l_ce: Var,
    l_contrastive: Var,
    lambda: f64,
) -> Result<Var> {
    let a = g.add(l_pc, l_sils)?;
    let b = g.add(a, l_ce)?;
    let scaled = g.mul_scalar(l_contrastive, lambda);
    g.add(b, scaled)
}

/// Scalar components of one batch's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_pc: f64,
    pub l_sils: f64,
    pub l_contrastive: f64,
    pub l_ce: f64,
    pub total: f64,
    pub n_tp_lidar: usize,
    pub n_tp_camera: usize,
    pub n_pairs: usize,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "iter,lr,l_pc,l_sils,l_contrastive,l_ce,total,n_tp_lidar,n_tp_camera,n_pairs"
    }

    pub fn csv_row(&self, iter: u64, lr: f64) -> String {
        format!(
            "{iter},{lr},{},{},{},{},{},{},{},{}",
            self.l_pc,
            self.l_sils,
            self.l_contrastive,
            self.l_ce,
            self.total,
            self.n_tp_lidar,
            self.n_tp_camera,
            self.n_pairs
        )
    }

    /// Composition check: total equals the weighted component sum.
    pub fn composes(&self, lambda: f64, tol: f64) -> bool {
        (self.l_pc + self.l_sils + self.l_ce + lambda * self.l_contrastive - self.total).abs()
            < tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::tensor::Tensor;
    use rand::Rng;

    const PARTS: usize = 3;
    const CH: usize = 2;

    fn embed(g: &mut Graph<f64>, data: Vec<f64>, track: bool) -> Var {
        g.leaf(&Tensor::new(vec![PARTS, CH], data), track)
    }

    fn rand_embed(g: &mut Graph<f64>, rng: &mut impl Rng, track: bool) -> Var {
        let data: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        embed(g, data, track)
    }

    // plain-array oracle: mean over parts of per-part Euclidean distance
    fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
        (0..PARTS)
            .map(|p| {
                (0..CH)
                    .map(|c| (a[p * CH + c] - b[p * CH + c]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / PARTS as f64
    }

    fn oracle_triplet(embs: &[Vec<f64>], labels: &[usize], m: f64) -> (f64, usize) {
        let mut sum = 0.0;
        let mut count = 0;
        for a in 0..embs.len() {
            for p in 0..embs.len() {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..embs.len() {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let term =
                        (m + oracle_distance(&embs[a], &embs[p]) - oracle_distance(&embs[a], &embs[n]))
                            .max(0.0);
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

    #[test]
    fn identical_embeddings_make_every_term_equal_margin() {
        let mut g: Graph<f64> = Graph::new();
        let data = vec![0.3; PARTS * CH];
        let embs: Vec<(Var, usize)> = (0..4)
            .map(|i| (embed(&mut g, data.clone(), false), i / 2))
            .collect();
        let (loss, n) = triplet_loss(&mut g, &embs, 0.2).unwrap();
        assert!(n > 0);
        assert!((g.scalar_value(loss) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separated_classes_give_zero_loss_and_zero_count() {
        let mut g: Graph<f64> = Graph::new();
        // class 0 near origin, class 1 far away; margin easily cleared
        let embs = vec![
            (embed(&mut g, vec![0.0; 6], false), 0),
            (embed(&mut g, vec![0.01; 6], false), 0),
            (embed(&mut g, vec![5.0; 6], false), 1),
            (embed(&mut g, vec![5.01; 6], false), 1),
        ];
        let (loss, n) = triplet_loss(&mut g, &embs, 0.2).unwrap();
        assert_eq!(n, 0);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn triplet_matches_brute_force_on_random_batch() {
        let mut rng = seeds::stream(31, &[1]);
        let mut g: Graph<f64> = Graph::new();
        let mut embs = Vec::new();
        let mut raw = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let data: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            raw.push(data.clone());
            labels.push(i / 2);
            embs.push((embed(&mut g, data, false), i / 2));
        }
        let (loss, n) = triplet_loss(&mut g, &embs, 0.2).unwrap();
        let (want, want_n) = oracle_triplet(&raw, &labels, 0.2);
        assert_eq!(n, want_n);
        assert!((g.scalar_value(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn triplet_is_invariant_to_common_rotation() {
        // Gram-Schmidt a random 2x2 rotation applied to every part vector
        let mut rng = seeds::stream(32, &[2]);
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let rot = [theta.cos(), -theta.sin(), theta.sin(), theta.cos()];
        let mut raw = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let data: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            raw.push(data);
            labels.push(i / 2);
        }
        let rotate = |e: &Vec<f64>| -> Vec<f64> {
            let mut out = vec![0.0; e.len()];
            for p in 0..PARTS {
                out[p * CH] = rot[0] * e[p * CH] + rot[1] * e[p * CH + 1];
                out[p * CH + 1] = rot[2] * e[p * CH] + rot[3] * e[p * CH + 1];
            }
            out
        };
        let run = |vecs: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let embs: Vec<(Var, usize)> = vecs
                .iter()
                .zip(&labels)
                .map(|(d, &l)| (embed(&mut g, d.clone(), false), l))
                .collect();
            let (loss, _) = triplet_loss(&mut g, &embs, 0.2).unwrap();
            g.scalar_value(loss)
        };
        let rotated: Vec<Vec<f64>> = raw.iter().map(rotate).collect();
        assert!((run(&raw) - run(&rotated)).abs() < 1e-9);
    }

    #[test]
    fn contrastive_positive_identical_and_satisfied_negative_contribute_zero() {
        let mut g: Graph<f64> = Graph::new();
        let same = vec![0.5; PARTS * CH];
        let lidar = vec![(embed(&mut g, same.clone(), false), 0)];
        let far = vec![9.0; PARTS * CH];
        let camera = vec![
            (embed(&mut g, same, false), 0),
            (embed(&mut g, far, false), 1),
        ];
        let (loss, n) = contrastive_alignment_loss(&mut g, &lidar, &camera, 0.2).unwrap();
        assert_eq!(n, 2);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn contrastive_matches_pair_loop_oracle() {
        let mut rng = seeds::stream(33, &[3]);
        let m = 0.2;
        let mut g: Graph<f64> = Graph::new();
        let mut l_raw = Vec::new();
        let mut c_raw = Vec::new();
        let mut lidar = Vec::new();
        let mut camera = Vec::new();
        for i in 0..3 {
            let d: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() - 0.5).collect();
            l_raw.push((d.clone(), i));
            lidar.push((embed(&mut g, d, false), i));
        }
        for i in 0..4 {
            let d: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() - 0.5).collect();
            c_raw.push((d.clone(), i % 3));
            camera.push((embed(&mut g, d, false), i % 3));
        }
        let (loss, n) = contrastive_alignment_loss(&mut g, &lidar, &camera, m).unwrap();
        let mut want = 0.0;
        for (ld, ll) in &l_raw {
            for (cd, cl) in &c_raw {
                let d = oracle_distance(ld, cd);
                want += if ll == cl {
                    d * d
                } else {
                    (m - d * d).max(0.0)
                };
            }
        }
        want /= (l_raw.len() * c_raw.len()) as f64;
        assert_eq!(n, 12);
        assert!((g.scalar_value(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn contrastive_decreases_as_positive_pair_closes() {
        let mut rng = seeds::stream(34, &[4]);
        let base: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>()).collect();
        let offset: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() * 0.5 + 0.2).collect();
        let eval = |t: f64| {
            let mut g: Graph<f64> = Graph::new();
            let a: Vec<f64> = base.clone();
            let b: Vec<f64> = base
                .iter()
                .zip(&offset)
                .map(|(x, o)| x + o * t)
                .collect();
            let lidar = vec![(embed(&mut g, a, false), 0)];
            let camera = vec![(embed(&mut g, b, false), 0)];
            let (loss, _) = contrastive_alignment_loss(&mut g, &lidar, &camera, 0.2).unwrap();
            g.scalar_value(loss)
        };
        assert!(eval(1.0) > eval(0.6));
        assert!(eval(0.6) > eval(0.3));
    }

    #[test]
    fn cross_entropy_uniform_logits_give_log_num_ids() {
        let num_ids = 5;
        let mut g: Graph<f64> = Graph::new();
        let heads = g.leaf(&Tensor::zeros(vec![PARTS, num_ids, CH]), false);
        let aligned = vec![
            (embed(&mut g, vec![0.0; PARTS * CH], false), 2),
            (embed(&mut g, vec![0.0; PARTS * CH], false), 4),
        ];
        let loss = cross_entropy_loss(&mut g, &aligned, heads).unwrap();
        assert!((g.scalar_value(loss) - (num_ids as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_with_large_correct_logit() {
        // logits = heads . f: pick f = e_0 and heads so the true class
        // leads every other logit by 20
        let num_ids = 4;
        let label = 1usize;
        let mut g: Graph<f64> = Graph::new();
        let mut head_data = vec![0.0; PARTS * num_ids * CH];
        for p in 0..PARTS {
            head_data[(p * num_ids + label) * CH] = 20.0;
        }
        let heads = g.leaf(&Tensor::new(vec![PARTS, num_ids, CH], head_data), false);
        let mut f = vec![0.0; PARTS * CH];
        for p in 0..PARTS {
            f[p * CH] = 1.0;
        }
        let aligned = vec![(embed(&mut g, f, false), label)];
        let loss = cross_entropy_loss(&mut g, &aligned, heads).unwrap();
        assert!(g.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = seeds::stream(35, &[5]);
        let num_ids = 3;
        let mut g: Graph<f64> = Graph::new();
        let head_data: Vec<f64> = (0..PARTS * num_ids * CH).map(|_| rng.gen::<f64>() - 0.5).collect();
        let heads = g.leaf(&Tensor::new(vec![PARTS, num_ids, CH], head_data.clone()), false);
        let mut aligned = Vec::new();
        let mut raw = Vec::new();
        for i in 0..4 {
            let d: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() - 0.5).collect();
            raw.push((d.clone(), i % num_ids));
            aligned.push((embed(&mut g, d, false), i % num_ids));
        }
        let loss = cross_entropy_loss(&mut g, &aligned, heads).unwrap();
        let mut want = 0.0;
        for (f, label) in &raw {
            let mut seq_loss = 0.0;
            for p in 0..PARTS {
                let logits: Vec<f64> = (0..num_ids)
                    .map(|o| {
                        (0..CH)
                            .map(|c| head_data[(p * num_ids + o) * CH + c] * f[p * CH + c])
                            .sum()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                seq_loss += lse - logits[*label];
            }
            want += seq_loss / PARTS as f64;
        }
        want /= raw.len() as f64;
        assert!((g.scalar_value(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn composite_weights_components() {
        let mut g: Graph<f64> = Graph::new();
        let pc = g.constant_scalar(1.0);
        let sils = g.constant_scalar(1.0);
        let ce = g.constant_scalar(1.0);
        let contr = g.constant_scalar(0.5);
        let total = composite_loss(&mut g, pc, sils, ce, contr, 2.0).unwrap();
        assert_eq!(g.scalar_value(total), 4.0);
        let no_contr = composite_loss(&mut g, pc, sils, ce, contr, 0.0).unwrap();
        assert_eq!(g.scalar_value(no_contr), 3.0);
    }

    #[test]
    fn losses_pass_gradcheck_away_from_hinge_boundaries() {
        // fixed seed chosen so no hinge term sits within 1e-3 of zero
        let mut rng = seeds::stream(36, &[6]);
        let n_l = 4;
        let n_c = 4;
        let num_ids = 2;
        let mut inputs = Vec::new();
        for _ in 0..(n_l + n_c) {
            let d: Vec<f64> = (0..PARTS * CH).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            inputs.push(Tensor::new(vec![PARTS, CH], d));
        }
        let head_data: Vec<f64> = (0..PARTS * num_ids * CH).map(|_| rng.gen::<f64>() - 0.5).collect();
        inputs.push(Tensor::new(vec![PARTS, num_ids, CH], head_data));
        let labels: Vec<usize> = (0..n_l.max(n_c)).map(|i| i % num_ids).collect();
        let rep = crate::gradcheck::grad_check(&inputs, 1e-5, |g, vars| {
            let lidar: Vec<(Var, usize)> = (0..n_l).map(|i| (vars[i], labels[i])).collect();
            let camera: Vec<(Var, usize)> =
                (0..n_c).map(|i| (vars[n_l + i], labels[i])).collect();
            let heads = vars[n_l + n_c];
            let (pc, _) = triplet_loss(g, &lidar, 0.2)?;
            let (sils, _) = triplet_loss(g, &camera, 0.2)?;
            let (contr, _) = contrastive_alignment_loss(g, &lidar, &camera, 0.2)?;
            let all: Vec<(Var, usize)> = lidar.iter().chain(camera.iter()).copied().collect();
            let ce = cross_entropy_loss(g, &all, heads)?;
            composite_loss(g, pc, sils, ce, contr, 2.0)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn all_components_nonnegative_and_finite_on_random_batches() {
        let mut rng = seeds::stream(37, &[7]);
        for _ in 0..10 {
            let mut g: Graph<f64> = Graph::new();
            let lidar: Vec<(Var, usize)> = (0..4)
                .map(|i| (rand_embed(&mut g, &mut rng, false), i % 2))
                .collect();
            let camera: Vec<(Var, usize)> = (0..4)
                .map(|i| (rand_embed(&mut g, &mut rng, false), i % 2))
                .collect();
            let (pc, _) = triplet_loss(&mut g, &lidar, 0.2).unwrap();
            let (sils, _) = triplet_loss(&mut g, &camera, 0.2).unwrap();
            let (contr, _) = contrastive_alignment_loss(&mut g, &lidar, &camera, 0.2).unwrap();
            for v in [pc, sils, contr] {
                let x = g.scalar_value(v);
                assert!(x >= 0.0 && x.is_finite());
            }
        }
    }
}
