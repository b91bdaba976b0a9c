//! Central-finite-difference verification of tape gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst disagreement.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with the |a-b| / max(1, |a|, |b|) metric.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Run `f` once with tracked leaves and return (loss, dloss/dinput per input).
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], f: F) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            Tensor::new(
                t.shape.clone(),
                g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]),
            )
        })
        .collect();
    Ok((g.scalar_value(loss), grads))
}

/// Central differences of the scalar function, step `h` per element.
pub fn finite_difference_grads<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    f: F,
) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t, false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[ti].numel()];
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + h;
            let fp = eval(&work)?;
            work[ti].data[ei] = orig - h;
            let fm = eval(&work)?;
            work[ti].data[ei] = orig;
            grad[ei] = (fp - fm) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[ti].shape.clone(), grad));
    }
    Ok(out)
}

/// Element-wise comparison of two gradient sets.
pub fn compare_grads(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&av, &nv)) in a.data.iter().zip(&n.data).enumerate() {
            let e = rel_err(av, nv);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (ti, ei);
            }
        }
    }
    report
}

/// Full check: backward gradients against central differences.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(inputs, &f)?;
    let numeric = finite_difference_grads(inputs, h, &f)?;
    Ok(compare_grads(&analytic, &numeric))
}

// ── the full check suite ─────────────────────────────────────────────

/// One named check outcome.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

mod suite {
    use super::*;
    use crate::model::{EncoderConfig, ModelConfig, ModelParams};
    use crate::seeds;
    use crate::tensor::NamedTensors;
    use crate::trainer::{batch_gradients, batch_loss_value, LossSettings, PreparedSequence};
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng, away_from_zero: bool) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = rng.gen::<f64>() * 2.0 - 1.0;
                if away_from_zero {
                    // keep |x| >= 0.1 so relu/max/sqrt kinks stay clear of
                    // the finite-difference step
                    v.signum() * (0.1 + 0.9 * v.abs())
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape, data)
    }

    fn scalarize(g: &mut Graph<f64>, v: Var) -> Result<Var> {
        let sq = g.mul(v, v)?;
        let mut acc = sq;
        while g.shape(acc).len() > 1 || g.shape(acc)[0] > 1 {
            acc = g.sum_axis(acc, 0)?;
        }
        Ok(acc)
    }

    /// Gradient checks for every differentiable operation, three random
    /// shapes each.
    pub fn op_checks() -> Result<Vec<OpCheck>> {
        let mut rng = seeds::stream(0xc4ec, &[1]);
        let mut out: Vec<OpCheck> = Vec::new();
        let mut run = |name: &str,
                       inputs: Vec<Tensor<f64>>,
                       f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
         -> Result<()> {
            let rep = grad_check(&inputs, GRADCHECK_STEP, |g, vars| {
                let v = f(g, vars)?;
                scalarize(g, v)
            })?;
            match out.iter_mut().find(|c| c.name == name) {
                Some(c) => c.max_rel_error = c.max_rel_error.max(rep.max_rel_error),
                None => out.push(OpCheck {
                    name: name.to_string(),
                    max_rel_error: rep.max_rel_error,
                }),
            }
            Ok(())
        };

        for (m, k, n) in [(2usize, 3usize, 4usize), (1, 5, 2), (4, 4, 3)] {
            let a = rand_tensor(vec![m, k], &mut rng, false);
            let b = rand_tensor(vec![k, n], &mut rng, false);
            run("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]))?;
            let a = rand_tensor(vec![k, m], &mut rng, false);
            let b = rand_tensor(vec![k, n], &mut rng, false);
            run("matmul_at", vec![a, b], &|g, v| g.matmul_at(v[0], v[1]))?;
            let a = rand_tensor(vec![m, k], &mut rng, false);
            let b = rand_tensor(vec![n, k], &mut rng, false);
            run("matmul_bt", vec![a, b], &|g, v| g.matmul_bt(v[0], v[1]))?;
        }
        for (cin, cout, h, w, stride, pad) in
            [(1usize, 2usize, 5usize, 5usize, 1usize, 1usize), (2, 1, 7, 7, 2, 1), (2, 3, 4, 6, 1, 0)]
        {
            let x = rand_tensor(vec![2, cin, h, w], &mut rng, false);
            let kk = rand_tensor(vec![cout, cin, 3, 3], &mut rng, false);
            run("conv2d", vec![x, kk], &move |g, v| {
                g.conv2d(v[0], v[1], stride, pad)
            })?;
        }
        for (n, c, h, w) in [(1usize, 2usize, 3usize, 3usize), (2, 1, 4, 2), (1, 4, 2, 5)] {
            let x = rand_tensor(vec![n, c, h, w], &mut rng, false);
            let b = rand_tensor(vec![c], &mut rng, false);
            run("bias_add_channel", vec![x, b], &|g, v| {
                g.bias_add_channel(v[0], v[1])
            })?;
        }
        for shape in [vec![6usize], vec![2, 5], vec![3, 2, 2]] {
            let x = rand_tensor(shape.clone(), &mut rng, true);
            run("relu", vec![x], &|g, v| Ok(g.relu(v[0])))?;
            let a = rand_tensor(shape.clone(), &mut rng, false);
            let b = rand_tensor(shape.clone(), &mut rng, false);
            run("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]))?;
            run("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]))?;
            run("mul", vec![a.clone(), b], &|g, v| g.mul(v[0], v[1]))?;
            run("mul_scalar", vec![a], &|g, v| Ok(g.mul_scalar(v[0], -1.7)))?;
            // strictly positive inputs for sqrt
            let mut pos = rand_tensor(shape.clone(), &mut rng, true);
            for v in &mut pos.data {
                *v = v.abs();
            }
            run("sqrt", vec![pos], &|g, v| Ok(g.sqrt(v[0])))?;
        }
        for (shape, axis) in [
            (vec![4usize, 3usize], 0usize),
            (vec![2, 5], 1),
            (vec![2, 3, 2], 1),
        ] {
            let x = rand_tensor(shape.clone(), &mut rng, true);
            run("mean_axis", vec![x.clone()], &move |g, v| g.mean_axis(v[0], axis))?;
            run("sum_axis", vec![x.clone()], &move |g, v| g.sum_axis(v[0], axis))?;
            run("reduce_max_axis", vec![x], &move |g, v| {
                g.reduce_max_axis(v[0], axis)
            })?;
        }
        for (r, c) in [(1usize, 4usize), (3, 3), (2, 6)] {
            let x = rand_tensor(vec![r, c], &mut rng, false);
            run("softmax_rows", vec![x.clone()], &|g, v| g.softmax_rows(v[0]))?;
            run("transpose2d", vec![x.clone()], &|g, v| g.transpose2d(v[0]))?;
            run("reshape", vec![x.clone()], &move |g, v| {
                g.reshape(v[0], vec![c, r])
            })?;
            let labels: Vec<usize> = (0..r).map(|i| i % c).collect();
            run("cross_entropy_rows", vec![x], &move |g, v| {
                g.cross_entropy_rows(v[0], &labels)
            })?;
        }
        for (shape, axis, start, len) in [
            (vec![4usize, 3usize], 0usize, 1usize, 2usize),
            (vec![2, 6], 1, 2, 3),
            (vec![3, 2, 2], 0, 0, 2),
        ] {
            let x = rand_tensor(shape, &mut rng, false);
            run("slice_axis", vec![x], &move |g, v| {
                g.slice_axis(v[0], axis, start, len)
            })?;
        }
        for (r1, r2, c) in [(2usize, 3usize, 2usize), (1, 1, 4), (3, 2, 3)] {
            let a = rand_tensor(vec![r1, c], &mut rng, false);
            let b = rand_tensor(vec![r2, c], &mut rng, false);
            run("concat_rows", vec![a, b], &|g, v| g.concat_rows(&[v[0], v[1]]))?;
        }
        for (p, o, i) in [(2usize, 3usize, 2usize), (1, 4, 3), (3, 2, 2)] {
            let w = rand_tensor(vec![p, o, i], &mut rng, false);
            let x = rand_tensor(vec![p, i], &mut rng, false);
            run("part_linear", vec![w, x], &|g, v| g.part_linear(v[0], v[1]))?;
        }
        Ok(out)
    }

    /// Composite forward + all losses against finite differences, over
    /// every model parameter, on a tiny two-modality batch.
    pub fn composed_check() -> Result<OpCheck> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_size: 8,
                stem_channels: 2,
                stem_stride: 1,
                stage_channels: vec![2, 4],
                stage_strides: vec![1, 2],
            },
            prototypes: 1,
            parts: 2,
            cmfa: true,
        };
        let num_ids = 2;
        let params = ModelParams::<f64>::init(cfg, num_ids, 0xabcd)?;
        let mut rng = seeds::stream(0xc4ec, &[2]);
        let mut batch: Vec<PreparedSequence<f64>> = Vec::new();
        for branch in [crate::model::Branch::Lidar, crate::model::Branch::Camera] {
            for label in 0..num_ids {
                for _ in 0..2 {
                    batch.push(PreparedSequence {
                        frames: rand_tensor(vec![2, 1, 8, 8], &mut rng, false),
                        branch,
                        label,
                    });
                }
            }
        }
        let ls = LossSettings {
            lambda: 2.0,
            margin_triplet: 0.2,
            margin_contrastive: 0.2,
        };
        let analytic = batch_gradients(&params, &batch, &ls, None)?;
        let mut max_rel = 0.0f64;
        let h = GRADCHECK_STEP;
        let mut work: NamedTensors<f64> = params.tensors.clone();
        for name in params.tensors.keys() {
            let n = params.tensors[name].numel();
            for ei in 0..n {
                let orig = work[name].data[ei];
                work.get_mut(name).expect("param").data[ei] = orig + h;
                let mut p_plus = params.clone();
                p_plus.tensors = work.clone();
                let fp = batch_loss_value(&p_plus, &batch, &ls)?;
                work.get_mut(name).expect("param").data[ei] = orig - h;
                let mut p_minus = params.clone();
                p_minus.tensors = work.clone();
                let fm = batch_loss_value(&p_minus, &batch, &ls)?;
                work.get_mut(name).expect("param").data[ei] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.grads[name].data[ei];
                let rel = (an - fd).abs() / 1.0f64.max(an.abs()).max(fd.abs());
                max_rel = max_rel.max(rel);
            }
        }
        Ok(OpCheck {
            name: "composed_forward_and_losses".to_string(),
            max_rel_error: max_rel,
        })
    }

    pub fn full_suite() -> Result<Vec<OpCheck>> {
        let mut checks = op_checks()?;
        checks.push(composed_check()?);
        Ok(checks)
    }
}

pub use suite::{composed_check, full_suite, op_checks};
