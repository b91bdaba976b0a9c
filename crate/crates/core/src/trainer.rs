//! Identity-balanced dual-modality batch sampling and the optimization
//! loop.
//!
//! Each sequence's forward/backward runs on its own tape; sequences meet
//! only through their embeddings on a small batch tape. Parameter
//! gradients are reduced across sequences in a fixed order, so the
//! parallel mode is bit-identical to the single-threaded one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Blob, Checkpoint, VERSION};
use crate::config::{Config, TrainSettings};
use crate::graph::Graph;
use crate::losses::{
    composite_loss, contrastive_alignment_loss, cross_entropy_loss, triplet_loss, LossReport,
};
use crate::model::{forward_sequence, Branch, ModelParams, SequenceForward};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::preprocess::preprocess_sequence;
use crate::seeds;
use crate::synthgen::dataset::{load_sequence, read_manifest, ManifestRow, DATASET_CFG_NAME};
use crate::tensor::{accumulate_named, NamedTensors, Scalar, Tensor};
use crate::{Error, Result};

/// Base learning rate decayed by `lr_factor` at each passed milestone.
pub fn lr_schedule(iter: u64, s: &TrainSettings) -> f64 {
    let passed = s.lr_milestones.iter().filter(|&&m| m <= iter).count();
    s.lr * s.lr_factor.powi(passed as i32)
}

/// Optional worker pool; `threads` <= 1 means the serial deterministic path.
pub fn make_pool(threads: usize) -> Option<rayon::ThreadPool> {
    if threads <= 1 {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool"),
        )
    }
}

// ── in-memory dataset ────────────────────────────────────────────────

/// One preprocessed sequence, ready for the network.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub row: ManifestRow,
    /// T x 1 x 64 x 64 normalized frames.
    pub frames: Tensor<f32>,
    pub branch: Branch,
}

/// Whole dataset preprocessed into memory.
#[derive(Debug)]
pub struct DataCache {
    pub records: Vec<SequenceRecord>,
    pub train_identities: u32,
    /// Train-split record indices per (branch, identity).
    by_identity: BTreeMap<(u8, u32), Vec<usize>>,
    pub train_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn contains(self, id: u32, train_identities: u32) -> bool {
        match self {
            Split::Train => id < train_identities,
            Split::Test => id >= train_identities,
            Split::All => true,
        }
    }
}

impl DataCache {
    /// Read the manifest, preprocess every sequence, and index the train
    /// split. The dataset's own config echo decides the train/test split.
    pub fn load(root: &Path, cfg: &Config, pool: Option<&rayon::ThreadPool>) -> Result<DataCache> {
        let manifest = read_manifest(root)?;
        let ds_cfg_path = root.join(DATASET_CFG_NAME);
        let train_identities = if ds_cfg_path.exists() {
            Config::load(&ds_cfg_path)?.dataset.train_identities
        } else {
            cfg.dataset.train_identities
        };
        let build = |row: &ManifestRow| -> Result<SequenceRecord> {
            let seq = load_sequence(root, row)?;
            let sensor = cfg.depth_sensor(row.view as f64);
            let frames = preprocess_sequence(&seq, &sensor)?;
            Ok(SequenceRecord {
                row: row.clone(),
                frames,
                branch: Branch::of_modality(row.modality),
            })
        };
        let records: Result<Vec<SequenceRecord>> = match pool {
            Some(p) => p.install(|| {
                use rayon::prelude::*;
                manifest.rows.par_iter().map(build).collect()
            }),
            None => manifest.rows.iter().map(build).collect(),
        };
        let records = records?;
        let mut by_identity: BTreeMap<(u8, u32), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.row.id < train_identities {
                by_identity
                    .entry((branch_code(r.branch), r.row.id))
                    .or_default()
                    .push(i);
            }
        }
        let mut train_ids: Vec<u32> = by_identity
            .keys()
            .map(|&(_, id)| id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        train_ids.retain(|&id| {
            by_identity.contains_key(&(branch_code(Branch::Lidar), id))
                && by_identity.contains_key(&(branch_code(Branch::Camera), id))
        });
        Ok(DataCache {
            records,
            train_identities,
            by_identity,
            train_ids,
        })
    }

    pub fn split_records(&self, split: Split) -> Vec<&SequenceRecord> {
        self.records
            .iter()
            .filter(|r| split.contains(r.row.id, self.train_identities))
            .collect()
    }
}

fn branch_code(b: Branch) -> u8 {
    match b {
        Branch::Lidar => 0,
        Branch::Camera => 1,
    }
}

// ── batch sampling ───────────────────────────────────────────────────

/// One network-ready training example.
#[derive(Debug, Clone)]
pub struct PreparedSequence<S: Scalar> {
    pub frames: Tensor<S>,
    pub branch: Branch,
    pub label: usize,
}

fn shuffled<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Contiguous window of `len` frames starting at a random offset,
/// wrapping when the sequence is shorter.
fn frame_window(frames: &Tensor<f32>, len: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let t = frames.shape[0];
    let stride: usize = frames.shape[1..].iter().product();
    let start = rng.gen_range(0..t);
    let mut shape = frames.shape.clone();
    shape[0] = len;
    let mut data = Vec::with_capacity(len * stride);
    for i in 0..len {
        let src = (start + i) % t;
        data.extend_from_slice(&frames.data[src * stride..(src + 1) * stride]);
    }
    Tensor::new(shape, data)
}

/// P identities x K sequences per modality, same identities in both
/// halves so cross-modality positive pairs exist.
pub fn sample_pk_batch(
    cache: &DataCache,
    s: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedSequence<f32>>> {
    if cache.train_ids.len() < s.batch_identities {
        return Err(Error::Contract(format!(
            "training split has {} identities with both modalities, need {}",
            cache.train_ids.len(),
            s.batch_identities
        )));
    }
    let ids: Vec<u32> = shuffled(&cache.train_ids, rng)
        .into_iter()
        .take(s.batch_identities)
        .collect();
    let mut batch = Vec::new();
    for branch in [Branch::Lidar, Branch::Camera] {
        let frames_len = match branch {
            Branch::Lidar => s.frames_lidar,
            Branch::Camera => s.frames_camera,
        };
        for &id in &ids {
            let pool = &cache.by_identity[&(branch_code(branch), id)];
            let order = shuffled(pool, rng);
            for k in 0..s.batch_seqs_per_identity {
                let rec = &cache.records[order[k % order.len()]];
                batch.push(PreparedSequence {
                    frames: frame_window(&rec.frames, frames_len, rng),
                    branch,
                    label: id as usize,
                });
            }
        }
    }
    Ok(batch)
}

// ── gradients ────────────────────────────────────────────────────────

struct SeqWork<S: Scalar> {
    graph: Graph<S>,
    fwd: SequenceForward,
    branch: Branch,
    label: usize,
}

fn forward_one<S: Scalar>(
    params: &ModelParams<S>,
    seq: &PreparedSequence<S>,
    track: bool,
) -> Result<SeqWork<S>> {
    let mut graph: Graph<S> = Graph::new();
    let frames = graph.leaf(&seq.frames, false);
    let fwd = forward_sequence(&mut graph, frames, seq.branch, params, track)?;
    Ok(SeqWork {
        graph,
        fwd,
        branch: seq.branch,
        label: seq.label,
    })
}

/// Loss weights and margins for one batch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub lambda: f64,
    pub margin_triplet: f64,
    pub margin_contrastive: f64,
}

impl From<&TrainSettings> for LossSettings {
    fn from(s: &TrainSettings) -> Self {
        LossSettings {
            lambda: s.lambda,
            margin_triplet: s.margin_triplet,
            margin_contrastive: s.margin_contrastive,
        }
    }
}

pub struct BatchGradients<S: Scalar> {
    pub report: LossReport,
    pub grads: NamedTensors<S>,
}

/// Forward every sequence, assemble the composite objective on a batch
/// tape, and push gradients back through each sequence tape. Gradients
/// accumulate across sequences in batch order regardless of `pool`.
pub fn batch_gradients<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[PreparedSequence<S>],
    ls: &LossSettings,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchGradients<S>> {
    let mut works: Vec<SeqWork<S>> = match pool {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            batch.par_iter().map(|sq| forward_one(params, sq, true)).collect::<Result<_>>()
        })?,
        None => batch
            .iter()
            .map(|sq| forward_one(params, sq, true))
            .collect::<Result<_>>()?,
    };

    // batch tape over embedding values
    let mut bg: Graph<S> = Graph::new();
    let mut fused_leafs = Vec::with_capacity(works.len());
    let mut aligned_leafs = Vec::with_capacity(works.len());
    for w in &works {
        let fused_t = w.graph.to_tensor(w.fwd.fused);
        let aligned_t = w.graph.to_tensor(w.fwd.aligned);
        fused_leafs.push(bg.leaf(&fused_t, true));
        aligned_leafs.push(bg.leaf(&aligned_t, true));
    }
    let heads_t = params.get("head.w");
    let heads = bg.leaf(heads_t, true);

    let mut lidar_fused = Vec::new();
    let mut camera_fused = Vec::new();
    let mut lidar_aligned = Vec::new();
    let mut camera_aligned = Vec::new();
    for (i, w) in works.iter().enumerate() {
        match w.branch {
            Branch::Lidar => {
                lidar_fused.push((fused_leafs[i], w.label));
                lidar_aligned.push((aligned_leafs[i], w.label));
            }
            Branch::Camera => {
                camera_fused.push((fused_leafs[i], w.label));
                camera_aligned.push((aligned_leafs[i], w.label));
            }
        }
    }

    let (l_pc, n_tp_lidar) = triplet_loss(&mut bg, &lidar_fused, ls.margin_triplet)?;
    let (l_sils, n_tp_camera) = triplet_loss(&mut bg, &camera_fused, ls.margin_triplet)?;
    let (l_contr, n_pairs) =
        contrastive_alignment_loss(&mut bg, &lidar_aligned, &camera_aligned, ls.margin_contrastive)?;
    let all_aligned: Vec<_> = lidar_aligned
        .iter()
        .chain(camera_aligned.iter())
        .copied()
        .collect();
    let l_ce = cross_entropy_loss(&mut bg, &all_aligned, heads)?;
    let total = composite_loss(&mut bg, l_pc, l_sils, l_ce, l_contr, ls.lambda)?;

    for (name, v) in [
        ("L_pc", l_pc),
        ("L_sils", l_sils),
        ("L_contrastive", l_contr),
        ("L_ce", l_ce),
        ("L", total),
    ] {
        let x = bg.scalar_value(v).to_f64();
        if !x.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss component {name} = {x}"
            )));
        }
    }
    bg.backward(total)?;

    let report = LossReport {
        l_pc: bg.scalar_value(l_pc).to_f64(),
        l_sils: bg.scalar_value(l_sils).to_f64(),
        l_contrastive: bg.scalar_value(l_contr).to_f64(),
        l_ce: bg.scalar_value(l_ce).to_f64(),
        total: bg.scalar_value(total).to_f64(),
        n_tp_lidar,
        n_tp_camera,
        n_pairs,
    };

    // pull embedding cotangents back through each sequence tape
    let cotangents: Vec<(Vec<S>, Vec<S>)> = (0..works.len())
        .map(|i| {
            let fz = bg
                .grad(fused_leafs[i])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![S::zero(); bg.data(fused_leafs[i]).len()]);
            let az = bg
                .grad(aligned_leafs[i])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![S::zero(); bg.data(aligned_leafs[i]).len()]);
            (fz, az)
        })
        .collect();

    let extract = |w: &mut SeqWork<S>, cots: &(Vec<S>, Vec<S>)| -> Result<NamedTensors<S>> {
        // when the adapter is off, fused and aligned are the same node;
        // backward_seeded sums duplicate seeds
        w.graph.backward_seeded(&[
            (w.fwd.fused, cots.0.clone()),
            (w.fwd.aligned, cots.1.clone()),
        ])?;
        let mut grads = NamedTensors::new();
        for (name, var) in w.fwd.params.iter() {
            if let Some(g) = w.graph.grad(*var) {
                grads.insert(
                    name.clone(),
                    Tensor::new(w.graph.shape(*var).to_vec(), g.to_vec()),
                );
            }
        }
        Ok(grads)
    };
    let per_seq: Vec<NamedTensors<S>> = match pool {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            works
                .par_iter_mut()
                .zip(cotangents.par_iter())
                .map(|(w, c)| extract(w, c))
                .collect::<Result<_>>()
        })?,
        None => works
            .iter_mut()
            .zip(cotangents.iter())
            .map(|(w, c)| extract(w, c))
            .collect::<Result<_>>()?,
    };

    // fixed-order reduction: zero-init every parameter, then batch order
    let mut grads: NamedTensors<S> = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
        .collect();
    if let Some(hg) = bg.grad(heads) {
        let slot = grads.get_mut("head.w").expect("head.w");
        for (a, b) in slot.data.iter_mut().zip(hg) {
            *a = *a + *b;
        }
    }
    for g in &per_seq {
        accumulate_named(&mut grads, g);
    }
    Ok(BatchGradients { report, grads })
}

/// Forward-only composite loss value, for finite-difference checks.
pub fn batch_loss_value<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[PreparedSequence<S>],
    ls: &LossSettings,
) -> Result<f64> {
    let works: Vec<SeqWork<S>> = batch
        .iter()
        .map(|sq| forward_one(params, sq, false))
        .collect::<Result<_>>()?;
    let mut bg: Graph<S> = Graph::new();
    let mut lidar_fused = Vec::new();
    let mut camera_fused = Vec::new();
    let mut lidar_aligned = Vec::new();
    let mut camera_aligned = Vec::new();
    for w in &works {
        let f = bg.leaf(&w.graph.to_tensor(w.fwd.fused), false);
        let a = bg.leaf(&w.graph.to_tensor(w.fwd.aligned), false);
        match w.branch {
            Branch::Lidar => {
                lidar_fused.push((f, w.label));
                lidar_aligned.push((a, w.label));
            }
            Branch::Camera => {
                camera_fused.push((f, w.label));
                camera_aligned.push((a, w.label));
            }
        }
    }
    let heads = bg.leaf(params.get("head.w"), false);
    let (l_pc, _) = triplet_loss(&mut bg, &lidar_fused, ls.margin_triplet)?;
    let (l_sils, _) = triplet_loss(&mut bg, &camera_fused, ls.margin_triplet)?;
    let (l_contr, _) =
        contrastive_alignment_loss(&mut bg, &lidar_aligned, &camera_aligned, ls.margin_contrastive)?;
    let all: Vec<_> = lidar_aligned
        .iter()
        .chain(camera_aligned.iter())
        .copied()
        .collect();
    let l_ce = cross_entropy_loss(&mut bg, &all, heads)?;
    let total = composite_loss(&mut bg, l_pc, l_sils, l_ce, l_contr, ls.lambda)?;
    Ok(bg.scalar_value(total).to_f64())
}

// ── the trainer ──────────────────────────────────────────────────────

pub struct Trainer {
    pub config: Config,
    pub params: ModelParams<f32>,
    pub opt: OptimizerState<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: Config, num_train_identities: usize) -> Result<Trainer> {
        let params = ModelParams::init(
            config.model.clone(),
            num_train_identities,
            config.train.train_seed,
        )?;
        let opt = OptimizerState::new(&params.tensors, config.train.lr);
        let rng = seeds::stream(config.train.train_seed, &[0x7a41]);
        Ok(Trainer {
            config,
            params,
            opt,
            rng,
            iteration: 0,
        })
    }

    pub fn step_with_batch(
        &mut self,
        batch: &[PreparedSequence<f32>],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<LossReport> {
        self.opt.learning_rate = lr_schedule(self.iteration, &self.config.train);
        let ls = LossSettings::from(&self.config.train);
        let bg = batch_gradients(&self.params, batch, &ls, pool)?;
        adam_step(
            &mut self.params.tensors,
            &bg.grads,
            &mut self.opt,
            &AdamConfig::default(),
        )?;
        self.iteration += 1;
        Ok(bg.report)
    }

    pub fn step(
        &mut self,
        cache: &DataCache,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<LossReport> {
        let batch = sample_pk_batch(cache, &self.config.train, &mut self.rng)?;
        self.step_with_batch(&batch, pool)
    }

    // ── persistence ──────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blobs: Vec<(String, Blob)> = Vec::new();
        blobs.push((
            "config.echo".to_string(),
            Blob::U8(
                vec![self.config.to_text().len()],
                self.config.to_text().into_bytes(),
            ),
        ));
        blobs.push((
            "meta.num_train_ids".to_string(),
            Blob::U64(vec![1], vec![self.params.num_train_identities as u64]),
        ));
        blobs.push((
            "opt.step_count".to_string(),
            Blob::U64(vec![1], vec![self.opt.step_count]),
        ));
        blobs.push((
            "opt.lr".to_string(),
            Blob::F64(vec![1], vec![self.opt.learning_rate]),
        ));
        for (name, t) in &self.params.tensors {
            blobs.push((format!("param.{name}"), Blob::F32(t.shape.clone(), t.data.clone())));
        }
        for (name, t) in &self.opt.first_moment {
            blobs.push((format!("opt.m.{name}"), Blob::F32(t.shape.clone(), t.data.clone())));
        }
        for (name, t) in &self.opt.second_moment {
            blobs.push((format!("opt.v.{name}"), Blob::F32(t.shape.clone(), t.data.clone())));
        }
        blobs.push((
            "rng.seed".to_string(),
            Blob::U8(vec![32], self.rng.get_seed().to_vec()),
        ));
        let pos = self.rng.get_word_pos();
        blobs.push((
            "rng.word_pos".to_string(),
            Blob::U64(vec![2], vec![pos as u64, (pos >> 64) as u64]),
        ));
        Checkpoint {
            version: VERSION,
            iteration: self.iteration,
            blobs,
        }
    }

    /// Rebuild a trainer from a checkpoint, validating blob shapes against
    /// the embedded config echo.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let echo = match ck.get("config.echo") {
            Some(Blob::U8(_, bytes)) => String::from_utf8(bytes.clone())
                .map_err(|e| Error::Contract(format!("config echo is not utf-8: {e}")))?,
            _ => return Err(Error::Contract("checkpoint missing config.echo".into())),
        };
        let config = Config::parse(&echo)?;
        let num_ids = match ck.get("meta.num_train_ids") {
            Some(Blob::U64(_, v)) if v.len() == 1 => v[0] as usize,
            _ => return Err(Error::Contract("checkpoint missing meta.num_train_ids".into())),
        };
        let mut trainer = Trainer::new(config, num_ids)?;
        trainer.iteration = ck.iteration;
        for (name, t) in trainer.params.tensors.iter_mut() {
            let blob = ck
                .get(&format!("param.{name}"))
                .ok_or_else(|| Error::Contract(format!("checkpoint missing param.{name}")))?;
            let (shape, data) = blob
                .as_f32()
                .ok_or_else(|| Error::Contract(format!("param.{name} has wrong dtype")))?;
            if shape != t.shape {
                return Err(Error::Dim {
                    op: "checkpoint load",
                    lhs: t.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            t.data = data.to_vec();
        }
        for (prefix, store) in [("opt.m.", true), ("opt.v.", false)] {
            let moments = if store {
                &mut trainer.opt.first_moment
            } else {
                &mut trainer.opt.second_moment
            };
            for (name, t) in moments.iter_mut() {
                let blob = ck
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Contract(format!("checkpoint missing {prefix}{name}")))?;
                let (shape, data) = blob
                    .as_f32()
                    .ok_or_else(|| Error::Contract(format!("{prefix}{name} has wrong dtype")))?;
                if shape != t.shape {
                    return Err(Error::Dim {
                        op: "checkpoint load",
                        lhs: t.shape.clone(),
                        rhs: shape.to_vec(),
                    });
                }
                t.data = data.to_vec();
            }
        }
        match ck.get("opt.step_count") {
            Some(Blob::U64(_, v)) if v.len() == 1 => trainer.opt.step_count = v[0],
            _ => return Err(Error::Contract("checkpoint missing opt.step_count".into())),
        }
        match ck.get("opt.lr") {
            Some(Blob::F64(_, v)) if v.len() == 1 => trainer.opt.learning_rate = v[0],
            _ => return Err(Error::Contract("checkpoint missing opt.lr".into())),
        }
        let seed: [u8; 32] = match ck.get("rng.seed") {
            Some(Blob::U8(_, v)) if v.len() == 32 => v.as_slice().try_into().expect("32"),
            _ => return Err(Error::Contract("checkpoint missing rng.seed".into())),
        };
        let word_pos = match ck.get("rng.word_pos") {
            Some(Blob::U64(_, v)) if v.len() == 2 => (v[0] as u128) | ((v[1] as u128) << 64),
            _ => return Err(Error::Contract("checkpoint missing rng.word_pos".into())),
        };
        trainer.rng = ChaCha8Rng::from_seed(seed);
        trainer.rng.set_word_pos(word_pos);
        Ok(trainer)
    }
}
