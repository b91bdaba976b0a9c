//! The CrossGait network: per-modality convolutional encoders, temporal
//! max pooling, horizontal partitioning, prototypical attention (PMAM),
//! fusion, and the cross-modality feature adapter (CMFA).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::seeds;
use crate::synthgen::Modality;
use crate::tensor::{NamedTensors, Scalar, Tensor};
use crate::{Error, Result};

/// Which modality-specific stream a sequence runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Lidar,
    Camera,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Lidar => "lidar",
            Branch::Camera => "camera",
        }
    }

    pub fn of_modality(m: Modality) -> Branch {
        match m {
            Modality::Silhouette => Branch::Camera,
            Modality::Pointcloud | Modality::Depth => Branch::Lidar,
        }
    }
}

/// Convolutional encoder layout. All convs are 3x3 stride 1 (1x1 for skip
/// projections); a stride-2 entry downsamples with 2x2 max pooling at the
/// stage input, which keeps conv output extents integral on even sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            stem_channels: 32,
            stem_stride: 1,
            stage_channels: vec![32, 64, 128],
            stage_strides: vec![1, 2, 2],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "stage_channels ({}) and stage_strides ({}) differ in length",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        let mut size = self.input_size;
        for (i, &s) in std::iter::once(&self.stem_stride)
            .chain(self.stage_strides.iter())
            .enumerate()
        {
            match s {
                1 => {}
                2 if size % 2 == 0 => size /= 2,
                2 => {
                    return Err(Error::Config(format!(
                        "stride 2 at position {i} on odd extent {size}"
                    )))
                }
                other => {
                    return Err(Error::Config(format!(
                        "stride must be 1 or 2, got {other}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Spatial extent of the final feature map.
    pub fn final_extent(&self) -> usize {
        let mut size = self.input_size;
        for &s in std::iter::once(&self.stem_stride).chain(self.stage_strides.iter()) {
            if s == 2 {
                size /= 2;
            }
        }
        size
    }

    pub fn final_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of learnable prototypes K; 0 disables the attention module.
    pub prototypes: usize,
    /// Horizontal parts p.
    pub parts: usize,
    /// Whether the shared feature adapter is applied.
    pub cmfa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prototypes: 2,
            parts: 8,
            cmfa: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let h = self.encoder.final_extent();
        if self.parts == 0 || h % self.parts != 0 {
            return Err(Error::Config(format!(
                "parts ({}) must divide the final map height ({h})",
                self.parts
            )));
        }
        Ok(())
    }

    /// Rows of every part embedding: K + p.
    pub fn total_parts(&self) -> usize {
        self.prototypes + self.parts
    }

    /// Pixels of the final feature map (HW).
    pub fn pixels(&self) -> usize {
        let e = self.encoder.final_extent();
        e * e
    }
}

// ── parameters ───────────────────────────────────────────────────────

/// All learnable state, keyed by stable names. Encoders are disjoint per
/// branch; the prototypes `pmam.q`, the adapter `cmfa.w`, and the
/// classifier `head.w` are shared across modalities.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub cfg: ModelConfig,
    pub num_train_identities: usize,
    pub tensors: NamedTensors<S>,
}

enum Init {
    Uniform { fan_in: usize },
    Zero,
    Gaussian { std: f64 },
    PartIdentity { dim: usize },
}

fn param_plan(cfg: &ModelConfig, num_ids: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut plan = Vec::new();
    for branch in ["camera", "lidar"] {
        let mut cin = 1usize;
        let c0 = cfg.encoder.stem_channels;
        plan.push((
            format!("enc.{branch}.stem.w"),
            vec![c0, cin, 3, 3],
            Init::Uniform { fan_in: cin * 9 },
        ));
        plan.push((format!("enc.{branch}.stem.b"), vec![c0], Init::Zero));
        cin = c0;
        for (i, &cout) in cfg.encoder.stage_channels.iter().enumerate() {
            plan.push((
                format!("enc.{branch}.s{i}.c1.w"),
                vec![cout, cin, 3, 3],
                Init::Uniform { fan_in: cin * 9 },
            ));
            plan.push((format!("enc.{branch}.s{i}.c1.b"), vec![cout], Init::Zero));
            plan.push((
                format!("enc.{branch}.s{i}.c2.w"),
                vec![cout, cout, 3, 3],
                Init::Uniform { fan_in: cout * 9 },
            ));
            plan.push((format!("enc.{branch}.s{i}.c2.b"), vec![cout], Init::Zero));
            if cin != cout {
                plan.push((
                    format!("enc.{branch}.s{i}.skip.w"),
                    vec![cout, cin, 1, 1],
                    Init::Uniform { fan_in: cin },
                ));
                plan.push((format!("enc.{branch}.s{i}.skip.b"), vec![cout], Init::Zero));
            }
            cin = cout;
        }
        if cfg.prototypes > 0 {
            let hw = cfg.pixels();
            plan.push((
                format!("pmam.{branch}.wk"),
                vec![hw, hw],
                Init::Uniform { fan_in: hw },
            ));
            plan.push((
                format!("pmam.{branch}.wv"),
                vec![hw, hw],
                Init::Uniform { fan_in: hw },
            ));
        }
    }
    let c = cfg.encoder.final_channels();
    if cfg.prototypes > 0 {
        plan.push((
            "pmam.q".to_string(),
            vec![cfg.prototypes, c],
            Init::Gaussian {
                std: 1.0 / (c as f64).sqrt(),
            },
        ));
    }
    if cfg.cmfa {
        plan.push((
            "cmfa.w".to_string(),
            vec![cfg.total_parts(), c, c],
            Init::PartIdentity { dim: c },
        ));
    }
    plan.push((
        "head.w".to_string(),
        vec![cfg.total_parts(), num_ids, c],
        Init::Uniform { fan_in: c },
    ));
    plan
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization: conv and projection weights are
    /// uniform(+-1/sqrt(fan_in)), biases zero, prototypes Gaussian, and the
    /// adapter starts as per-part identity so aligned == fused at step 0.
    pub fn init(cfg: ModelConfig, num_train_identities: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut plan = param_plan(&cfg, num_train_identities);
        plan.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = seeds::stream(seed, &[0x9a7a]);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in plan {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init {
                Init::Zero => vec![S::zero(); n],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                        .collect()
                }
                Init::Gaussian { std } => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| S::from_f64(dist.sample(&mut rng))).collect()
                }
                Init::PartIdentity { dim } => {
                    let parts = n / (dim * dim);
                    let mut data = vec![S::zero(); n];
                    for p in 0..parts {
                        for i in 0..dim {
                            data[(p * dim + i) * dim + i] = S::one();
                        }
                    }
                    data
                }
            };
            tensors.insert(name, Tensor::new(shape, data));
        }
        Ok(ModelParams {
            cfg,
            num_train_identities,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            cfg: self.cfg.clone(),
            num_train_identities: self.num_train_identities,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        }
    }
}

// ── forward pieces ───────────────────────────────────────────────────

/// 2x2 max pooling via reshape + max reduction.
fn max_pool_2x2<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec(); // [N, C, H, W]
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, vec![n, c, h / 2, 2, w / 2, 2])?;
    let m1 = g.reduce_max_axis(r, 5)?;
    let m2 = g.reduce_max_axis(m1, 3)?;
    debug_assert_eq!(g.shape(m2), &[n, c, h / 2, w / 2]);
    Ok(m2)
}

/// Tracked parameter handles for one sequence's forward pass.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not loaded"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }
}

/// Load the parameters one branch's forward pass uses into the graph.
pub fn load_branch_params<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    branch: Branch,
    track: bool,
) -> ParamVars {
    let mut vars = Vec::new();
    let prefix_enc = format!("enc.{}.", branch.name());
    let prefix_pmam = format!("pmam.{}.", branch.name());
    for (name, t) in &params.tensors {
        let used = name.starts_with(&prefix_enc)
            || name.starts_with(&prefix_pmam)
            || name == "pmam.q"
            || (name == "cmfa.w" && params.cfg.cmfa);
        if used {
            vars.push((name.clone(), g.leaf(t, track)));
        }
    }
    ParamVars { vars }
}

/// Stem + residual stages over a T x 1 x H x W stack of frames.
pub fn encode_frames<S: Scalar>(
    g: &mut Graph<S>,
    frames: Var,
    branch: Branch,
    cfg: &ModelConfig,
    pv: &ParamVars,
) -> Result<Var> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.encoder.input_size {
        return Err(Error::Config(format!(
            "encoder expects T x 1 x {0} x {0} input, got {shape:?}",
            cfg.encoder.input_size
        )));
    }
    let b = branch.name();
    let conv_block = |g: &mut Graph<S>, x: Var, w: Var, bias: Var, pad: usize| -> Result<Var> {
        let y = g.conv2d(x, w, 1, pad)?;
        g.bias_add_channel(y, bias)
    };
    let mut x = {
        let w = pv.get(&format!("enc.{b}.stem.w"));
        let bias = pv.get(&format!("enc.{b}.stem.b"));
        let y = conv_block(g, frames, w, bias, 1)?;
        g.relu(y)
    };
    if cfg.encoder.stem_stride == 2 {
        x = max_pool_2x2(g, x)?;
    }
    let mut cin = cfg.encoder.stem_channels;
    for (i, (&cout, &stride)) in cfg
        .encoder
        .stage_channels
        .iter()
        .zip(&cfg.encoder.stage_strides)
        .enumerate()
    {
        if stride == 2 {
            x = max_pool_2x2(g, x)?;
        }
        let c1 = conv_block(
            g,
            x,
            pv.get(&format!("enc.{b}.s{i}.c1.w")),
            pv.get(&format!("enc.{b}.s{i}.c1.b")),
            1,
        )?;
        let c1 = g.relu(c1);
        let c2 = conv_block(
            g,
            c1,
            pv.get(&format!("enc.{b}.s{i}.c2.w")),
            pv.get(&format!("enc.{b}.s{i}.c2.b")),
            1,
        )?;
        let skip = if cin != cout {
            conv_block(
                g,
                x,
                pv.get(&format!("enc.{b}.s{i}.skip.w")),
                pv.get(&format!("enc.{b}.s{i}.skip.b")),
                0,
            )?
        } else {
            x
        };
        let sum = g.add(c2, skip)?;
        x = g.relu(sum);
        cin = cout;
    }
    Ok(x)
}

/// Element-wise max over the frame axis: T x C x H x W -> C x H x W.
pub fn temporal_pool<S: Scalar>(g: &mut Graph<S>, frames: Var) -> Result<Var> {
    g.reduce_max_axis(frames, 0)
}

/// Flatten a pooled map to HW rows of C channels.
pub fn pixel_rows<S: Scalar>(g: &mut Graph<S>, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec(); // [C, H, W]
    let flat = g.reshape(map, vec![s[0], s[1] * s[2]])?;
    g.transpose2d(flat)
}

/// Split the map height into p strips; each strip pools to one C-vector
/// with (max + mean) / 2.
pub fn horizontal_partition<S: Scalar>(g: &mut Graph<S>, map: Var, p: usize) -> Result<Var> {
    let s = g.shape(map).to_vec(); // [C, H, W]
    let (c, h, w) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 {
        return Err(Error::Config(format!(
            "horizontal_partition: p={p} does not divide H={h}"
        )));
    }
    let strip_h = h / p;
    let mut rows = Vec::with_capacity(p);
    for i in 0..p {
        let strip = g.slice_axis(map, 1, i * strip_h, strip_h)?;
        let flat = g.reshape(strip, vec![c, strip_h * w])?;
        let mx = g.reduce_max_axis(flat, 1)?;
        let mn = g.mean_axis(flat, 1)?;
        let sum = g.add(mx, mn)?;
        let pooled = g.mul_scalar(sum, 0.5);
        rows.push(g.reshape(pooled, vec![1, c])?);
    }
    g.concat_rows(&rows)
}

/// Prototype attention: keys and values are pixel-axis projections of F,
/// attention logits are Q k^T / sqrt(HW), and the output is the
/// softmax-weighted sum of values.
pub fn pmam_forward<S: Scalar>(g: &mut Graph<S>, f: Var, q: Var, wk: Var, wv: Var) -> Result<Var> {
    let hw = g.shape(f)[0];
    let k = g.matmul_at(wk, f)?; // HW x C
    let v = g.matmul_at(wv, f)?; // HW x C
    let logits = g.matmul_bt(q, k)?; // K x HW
    let scaled = g.mul_scalar(logits, 1.0 / (hw as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    g.matmul(weights, v) // K x C
}

/// Row-concatenation, prototypes first. `proto` absent means K = 0.
pub fn fuse<S: Scalar>(g: &mut Graph<S>, parts: Var, proto: Option<Var>) -> Result<Var> {
    match proto {
        Some(p) => g.concat_rows(&[p, parts]),
        None => g.concat_rows(&[parts]),
    }
}

/// Part-separated linear maps with parameters shared across modalities.
pub fn cmfa_apply<S: Scalar>(g: &mut Graph<S>, w: Var, fused: Var) -> Result<Var> {
    g.part_linear(w, fused)
}

/// Both embedding stages of one sequence.
pub struct SequenceForward {
    /// Pre-adapter part embedding (triplet-loss stage).
    pub fused: Var,
    /// Post-adapter embedding (contrastive/CE and inference stage).
    pub aligned: Var,
    /// Parameters this pass loaded, for gradient collection.
    pub params: ParamVars,
}

/// encode -> temporal pool -> {partition, attention} -> fuse -> adapter.
pub fn forward_sequence<S: Scalar>(
    g: &mut Graph<S>,
    frames: Var,
    branch: Branch,
    params: &ModelParams<S>,
    track_params: bool,
) -> Result<SequenceForward> {
    let pv = load_branch_params(g, params, branch, track_params);
    let encoded = encode_frames(g, frames, branch, &params.cfg, &pv)?;
    let map = temporal_pool(g, encoded)?;
    let parts = horizontal_partition(g, map, params.cfg.parts)?;
    let proto = if params.cfg.prototypes > 0 {
        let f = pixel_rows(g, map)?;
        let b = branch.name();
        Some(pmam_forward(
            g,
            f,
            pv.get("pmam.q"),
            pv.get(&format!("pmam.{b}.wk")),
            pv.get(&format!("pmam.{b}.wv")),
        )?)
    } else {
        None
    };
    let fused = fuse(g, parts, proto)?;
    let aligned = if params.cfg.cmfa {
        cmfa_apply(g, pv.get("cmfa.w"), fused)?
    } else {
        fused
    };
    Ok(SequenceForward {
        fused,
        aligned,
        params: pv,
    })
}
