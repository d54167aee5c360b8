//! Part-assembly network: a shared point-feature extractor, an
//! instance-conditioned transformer encoder that refines one rigid pose per
//! part at every layer, and a decoder that poses additional parts against
//! an already-assembled context.
//!
//! All attention reductions over the parts axis use order-independent
//! summation, so permuting the input parts permutes the predicted poses
//! bitwise. There is no positional encoding; part identity enters only
//! through the instance codes.

mod params;

pub use params::ParamStore;

use crate::autodiff::{Op, Tape, Tensor};
use crate::encoding::{instance_encode, EquivalencePartition};
use crate::error::{Error, Result};
use crate::geom::{PartCloud, Pose};
use crate::rng::{derive_seed, rng_from_seed};
use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Epsilon inside layer normalization.
const LN_EPS: f64 = 1e-5;

/// Pose 7-vector of the identity transform: unit quaternion, zero offset.
pub const IDENTITY_POSE_7: [f64; 7] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Architecture hyperparameters. `token_width` columns feed each layer's
/// learned projection; see [`TokenInputs`] for the column layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub noise_dim: usize,
    pub max_parts: usize,
    /// Points sampled per part cloud; consumed by data generation and the
    /// CLI, not by the network itself (which accepts any point count).
    pub n_pc: usize,
    /// Hidden width of the pose head MLP.
    pub head_hidden: usize,
    /// When false, instance-code columns are zeroed; token width and
    /// parameter shapes stay fixed so ablations share architecture.
    pub use_instance_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            n_layers: 6,
            noise_dim: 64,
            max_parts: 20,
            n_pc: 128,
            head_hidden: 256,
            use_instance_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (what, v) in [
            ("n_layers", self.n_layers),
            ("max_parts", self.max_parts),
            ("n_pc", self.n_pc),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{what} must be positive")));
            }
        }
        Ok(())
    }

    /// Columns of a part token before projection:
    /// feature, inter code, intra code, previous pose, noise.
    pub fn token_width(&self) -> usize {
        self.d_model + 2 * self.max_parts + 7 + self.noise_dim
    }
}

/// Dense per-part inputs to the network. Rows are part slots; `valid`
/// distinguishes real parts from padding, which is zeroed and masked out
/// of every attention reduction.
#[derive(Clone, Debug)]
pub struct TokenInputs {
    /// Canonical part clouds, `[n, points, 3]`.
    pub clouds: ArrayD<f64>,
    /// Instance codes, `[n, 2 * max_parts]`: inter one-hot then intra.
    pub codes: ArrayD<f64>,
    /// Per-part noise, `[n, noise_dim]`.
    pub noise: ArrayD<f64>,
    pub valid: Vec<bool>,
}

impl TokenInputs {
    pub fn from_parts(
        parts: &[PartCloud],
        partition: &EquivalencePartition,
        config: &ModelConfig,
        noise: ArrayD<f64>,
    ) -> Result<TokenInputs> {
        if parts.is_empty() {
            return Err(Error::NoParts);
        }
        if parts.len() != partition.n_parts() {
            return Err(Error::LengthMismatch {
                context: "parts vs partition",
                left: parts.len(),
                right: partition.n_parts(),
            });
        }
        let points = parts[0].len();
        if let Some(odd) = parts.iter().find(|c| c.len() != points) {
            return Err(Error::LengthMismatch {
                context: "per-part point counts",
                left: points,
                right: odd.len(),
            });
        }
        let mut flat = Vec::with_capacity(parts.len() * points * 3);
        for cloud in parts {
            for p in cloud.points() {
                flat.extend_from_slice(p);
            }
        }
        let clouds = ArrayD::from_shape_vec(IxDyn(&[parts.len(), points, 3]), flat).unwrap();
        let inputs = TokenInputs {
            clouds,
            codes: codes_array(partition, config)?,
            noise,
            valid: vec![true; parts.len()],
        };
        inputs.check(config)?;
        Ok(inputs)
    }

    pub fn n_parts(&self) -> usize {
        self.valid.len()
    }

    /// Appends zeroed, masked slots up to `slots` total.
    pub fn padded_to(&self, slots: usize) -> TokenInputs {
        assert!(slots >= self.n_parts(), "cannot pad below current size");
        let pad = |a: &ArrayD<f64>| {
            let mut shape = a.shape().to_vec();
            shape[0] = slots;
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.slice_each_axis_mut(|ax| {
                if ax.axis.index() == 0 {
                    (0..a.shape()[0]).into()
                } else {
                    (..).into()
                }
            })
            .assign(a);
            out
        };
        let mut valid = self.valid.clone();
        valid.resize(slots, false);
        TokenInputs {
            clouds: pad(&self.clouds),
            codes: pad(&self.codes),
            noise: pad(&self.noise),
            valid,
        }
    }

    /// Same parts and codes with a different noise block; used to evaluate
    /// several noise draws of one sample.
    pub fn with_noise(&self, noise: ArrayD<f64>) -> TokenInputs {
        TokenInputs {
            clouds: self.clouds.clone(),
            codes: self.codes.clone(),
            noise,
            valid: self.valid.clone(),
        }
    }

    /// Restricts (or reorders) rows; used for query/context splits and for
    /// permutation tests.
    pub fn select(&self, rows: &[usize]) -> TokenInputs {
        let take = |a: &ArrayD<f64>| {
            let picked: Vec<_> = rows
                .iter()
                .map(|&r| a.index_axis(ndarray::Axis(0), r).to_owned().insert_axis(ndarray::Axis(0)))
                .collect();
            let views: Vec<_> = picked.iter().map(|p| p.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        TokenInputs {
            clouds: take(&self.clouds),
            codes: take(&self.codes),
            noise: take(&self.noise),
            valid: rows.iter().map(|&r| self.valid[r]).collect(),
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let n = self.valid.len();
        for (context, rows) in [
            ("clouds vs mask", self.clouds.shape()[0]),
            ("codes vs mask", self.codes.shape()[0]),
            ("noise vs mask", self.noise.shape()[0]),
        ] {
            if rows != n {
                return Err(Error::LengthMismatch {
                    context,
                    left: rows,
                    right: n,
                });
            }
        }
        if n > config.max_parts {
            return Err(Error::TooManyParts {
                n_parts: n,
                max_parts: config.max_parts,
            });
        }
        let widths = [
            ("clouds", self.clouds.ndim() == 3 && self.clouds.shape()[2] == 3),
            ("codes", self.codes.shape()[1..] == [2 * config.max_parts]),
            ("noise", self.noise.shape()[1..] == [config.noise_dim]),
        ];
        for (what, ok) in widths {
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "token inputs",
                    detail: format!("{what} shape incompatible with model config"),
                });
            }
        }
        Ok(())
    }
}

/// Instance codes as one dense `[n, 2 * max_parts]` block. Zeroed when
/// instance encoding is disabled.
pub fn codes_array(partition: &EquivalencePartition, config: &ModelConfig) -> Result<ArrayD<f64>> {
    let n = partition.n_parts();
    if n > config.max_parts {
        return Err(Error::TooManyParts {
            n_parts: n,
            max_parts: config.max_parts,
        });
    }
    let mut arr = ArrayD::zeros(IxDyn(&[n, 2 * config.max_parts]));
    if config.use_instance_encoding {
        for (i, code) in instance_encode(partition, config.max_parts)?.iter().enumerate() {
            for (j, &v) in code.inter.iter().enumerate() {
                arr[[i, j]] = v;
            }
            for (j, &v) in code.intra.iter().enumerate() {
                arr[[i, config.max_parts + j]] = v;
            }
        }
    }
    Ok(arr)
}

/// Standard-normal per-part noise block, `[n_parts, noise_dim]`.
pub fn sample_noise(n_parts: usize, noise_dim: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = rng_from_seed(seed);
    let v: Vec<f64> = (0..n_parts * noise_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[n_parts, noise_dim]), v).unwrap()
}

/// `[n, 7]` rows of the identity pose.
pub fn identity_pose_rows(n: usize) -> ArrayD<f64> {
    let mut a = ArrayD::zeros(IxDyn(&[n, 7]));
    for i in 0..n {
        a[[i, 0]] = 1.0;
    }
    a
}

/// `[n, 7]` rows from explicit poses, e.g. for pinning a context shape to
/// its known placement.
pub fn pose_rows(poses: &[Pose]) -> ArrayD<f64> {
    let mut a = ArrayD::zeros(IxDyn(&[poses.len(), 7]));
    for (i, p) in poses.iter().enumerate() {
        for (j, v) in p.to_7vec().into_iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    a
}

/// Inverse of [`pose_rows`]: every row of an `[n, 7]` block as a pose.
pub fn poses_from_rows(rows: &ArrayD<f64>) -> Result<Vec<Pose>> {
    if rows.ndim() != 2 || rows.shape()[1] != 7 {
        return Err(Error::ShapeMismatch {
            op: "poses_from_rows",
            detail: format!("expected [n, 7], got {:?}", rows.shape()),
        });
    }
    (0..rows.shape()[0])
        .map(|i| {
            let seven: [f64; 7] = std::array::from_fn(|j| rows[[i, j]]);
            Pose::from_7vec(&seven)
        })
        .collect()
}

/// Which parameters receive gradients when the model is bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    Frozen,
    Full,
    /// Only decoder blocks and the decoder pose head train; everything the
    /// encoder side owns stays fixed.
    DecoderOnly,
}

impl Trainability {
    fn trains(self, name: &str) -> bool {
        match self {
            Trainability::Frozen => false,
            Trainability::Full => true,
            Trainability::DecoderOnly => name.starts_with("dec"),
        }
    }
}

/// Per-layer part features retained for decoder cross-attention.
pub struct EncoderMemory<'t> {
    layers: Vec<Tensor<'t>>,
    valid: Vec<bool>,
}

impl<'t> EncoderMemory<'t> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_parts(&self) -> usize {
        self.valid.len()
    }

    pub fn layer(&self, l: usize) -> Tensor<'t> {
        self.layers[l]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Everything the encoder produces in one pass.
pub struct EncoderOutput<'t> {
    pub memory: EncoderMemory<'t>,
    /// One `[n, 7]` tensor per layer: unit quaternion then translation.
    pub layer_poses: Vec<Tensor<'t>>,
}

/// Pose predictions per layer, coarse to fine. Quaternions are unit-norm
/// and translation components lie in (-1, 1) by construction.
#[derive(Clone, Debug)]
pub struct PoseSequence {
    layers: Vec<Vec<Pose>>,
}

impl PoseSequence {
    /// Extracts poses for the valid rows of per-layer `[n, 7]` tensors.
    pub fn from_layer_tensors(layers: &[Tensor<'_>], valid: &[bool]) -> Result<PoseSequence> {
        let mut out = Vec::with_capacity(layers.len());
        for t in layers {
            let v = t.value();
            let mut row = Vec::new();
            for i in 0..v.shape()[0] {
                if !valid[i] {
                    continue;
                }
                let seven: [f64; 7] = std::array::from_fn(|j| v[[i, j]]);
                row.push(Pose::from_7vec(&seven)?);
            }
            out.push(row);
        }
        Ok(PoseSequence { layers: out })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_parts(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn layer(&self, l: usize) -> &[Pose] {
        &self.layers[l]
    }

    /// The last refinement step's poses, used for evaluation and export.
    pub fn final_poses(&self) -> &[Pose] {
        self.layers.last().expect("at least one layer")
    }
}

/// The assembly network: configuration plus named parameters. Immutable
/// during inference; training mutates parameters through [`ParamStore`].
#[derive(Clone)]
pub struct AssemblyModel {
    config: ModelConfig,
    params: ParamStore,
}

impl AssemblyModel {
    /// Fresh parameters: uniform fan-in everywhere except the final pose
    /// projections, which start at zero with an identity-pose bias so the
    /// first refinement step leaves parts unmoved.
    pub fn init(config: ModelConfig, seed: u64) -> Result<AssemblyModel> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, "model-init", &[]));
        let mut p = ParamStore::new();
        let d = config.d_model;
        let w = config.token_width();
        let hh = config.head_hidden;
        params::init_linear(&mut p, &mut rng, "pointnet.0", 3, 64);
        params::init_linear(&mut p, &mut rng, "pointnet.1", 64, 128);
        params::init_linear(&mut p, &mut rng, "pointnet.2", 128, d);
        for l in 0..config.n_layers {
            params::init_linear(&mut p, &mut rng, &format!("enc.{l}.proj"), w, d);
            for nm in ["q", "k", "v", "o"] {
                params::init_linear(&mut p, &mut rng, &format!("enc.{l}.attn.{nm}"), d, d);
            }
            params::init_linear(&mut p, &mut rng, &format!("enc.{l}.ffn.0"), d, 4 * d);
            params::init_linear(&mut p, &mut rng, &format!("enc.{l}.ffn.1"), 4 * d, d);
        }
        params::init_linear(&mut p, &mut rng, "head.0", d, hh);
        params::init_linear(&mut p, &mut rng, "head.1", hh, hh);
        params::init_linear_zero(&mut p, "head.2", hh, &IDENTITY_POSE_7);
        for l in 0..config.n_layers {
            params::init_linear(&mut p, &mut rng, &format!("dec.{l}.proj"), w, d);
            for blk in ["self", "cross"] {
                for nm in ["q", "k", "v", "o"] {
                    params::init_linear(&mut p, &mut rng, &format!("dec.{l}.{blk}.{nm}"), d, d);
                }
            }
            params::init_linear(&mut p, &mut rng, &format!("dec.{l}.ffn.0"), d, 4 * d);
            params::init_linear(&mut p, &mut rng, &format!("dec.{l}.ffn.1"), 4 * d, d);
        }
        params::init_linear(&mut p, &mut rng, "dec_head.0", d, hh);
        params::init_linear(&mut p, &mut rng, "dec_head.1", hh, hh);
        params::init_linear_zero(&mut p, "dec_head.2", hh, &IDENTITY_POSE_7);
        Ok(AssemblyModel { config, params: p })
    }

    /// Reassembles a model from loaded pieces, e.g. a checkpoint.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<AssemblyModel> {
        config.validate()?;
        let reference = AssemblyModel::init(config, 0)?;
        for (name, value) in reference.params.iter() {
            let loaded = params.get(name)?;
            if loaded.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    detail: format!(
                        "{name}: expected {:?}, found {:?}",
                        value.shape(),
                        loaded.shape()
                    ),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(AssemblyModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter on the tape; gradients flow only into
    /// those the trainability selects.
    pub fn bind<'t>(&self, tape: &'t Tape, trainability: Trainability) -> BoundModel<'t, '_> {
        let tensors = self
            .params
            .iter()
            .map(|(name, value)| tape.leaf(value.clone(), trainability.trains(name)))
            .collect();
        BoundModel {
            model: self,
            tape,
            tensors,
        }
    }

    /// Poses every part of a shape from canonical clouds; inference only.
    pub fn predict(&self, inputs: &TokenInputs) -> Result<PoseSequence> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainability::Frozen);
        let out = bound.encode(inputs, None)?;
        PoseSequence::from_layer_tensors(&out.layer_poses, &inputs.valid)
    }

    /// Poses query parts against a context shape pinned at known poses.
    pub fn predict_inprocess(
        &self,
        context: &TokenInputs,
        context_poses: &[Pose],
        queries: &TokenInputs,
    ) -> Result<PoseSequence> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainability::Frozen);
        let pinned = pose_rows(context_poses);
        let encoded = bound.encode(context, Some(&pinned))?;
        let poses = bound.decode(queries, &encoded.memory)?;
        PoseSequence::from_layer_tensors(&poses, &queries.valid)
    }
}

/// A model bound to a tape: parameters registered as (possibly trainable)
/// leaves, forward passes recording onto the tape.
pub struct BoundModel<'t, 'm> {
    model: &'m AssemblyModel,
    tape: &'t Tape,
    tensors: Vec<Tensor<'t>>,
}

impl<'t> BoundModel<'t, '_> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn model(&self) -> &AssemblyModel {
        self.model
    }

    /// Parameter tensors in store order, for gradient collection.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, Tensor<'t>)> + '_ {
        self.model
            .params
            .names()
            .zip(self.tensors.iter().copied())
    }

    fn p(&self, name: &str) -> Tensor<'t> {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.tensors[i]
    }

    fn linear(&self, x: Tensor<'t>, prefix: &str) -> Tensor<'t> {
        x.matmul(self.p(&format!("{prefix}.w")))
            .add_row(self.p(&format!("{prefix}.b")))
    }

    /// Per-point MLP (3 -> 64 -> 128 -> d_model, ReLU throughout) followed
    /// by a max-pool over points. Invariant to point order and duplicates.
    pub fn pointnet(&self, clouds: Tensor<'t>) -> Result<Tensor<'t>> {
        let shape = clouds.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::ShapeMismatch {
                op: "pointnet",
                detail: format!("expected [parts, points, 3], got {shape:?}"),
            });
        }
        let (n, points) = (shape[0], shape[1]);
        let x = clouds.reshape(&[n * points, 3]);
        let x = self.linear(x, "pointnet.0").relu();
        let x = self.linear(x, "pointnet.1").relu();
        let x = self.linear(x, "pointnet.2").relu();
        Ok(x.reshape(&[n, points, self.config().d_model]).reduce_max(1))
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows. Masked keys
    /// receive exactly zero weight; the probability normalizer and the
    /// value mixdown both reduce over the key axis with order-independent
    /// sums, so key order never changes any output bit.
    fn attention(
        &self,
        q_in: Tensor<'t>,
        kv_in: Tensor<'t>,
        prefix: &str,
        key_mask: &[bool],
    ) -> Tensor<'t> {
        let d = self.config().d_model;
        let heads = self.config().n_heads;
        let dk = d / heads;
        let nq = q_in.shape()[0];
        let nk = kv_in.shape()[0];
        let q = self
            .linear(q_in, &format!("{prefix}.q"))
            .reshape(&[nq, heads, dk])
            .permute(&[1, 0, 2]);
        let k = self
            .linear(kv_in, &format!("{prefix}.k"))
            .reshape(&[nk, heads, dk])
            .permute(&[1, 2, 0]);
        let v = self
            .linear(kv_in, &format!("{prefix}.v"))
            .reshape(&[nk, heads, dk])
            .permute(&[1, 0, 2]);
        let scores = q.matmul(k).scale(1.0 / (dk as f64).sqrt());
        let mask: Vec<f64> = key_mask
            .iter()
            .map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let probs = scores.softmax(2, Some(&mask));
        let ctx = probs.matmul_sorted(v).permute(&[1, 0, 2]).reshape(&[nq, d]);
        self.linear(ctx, &format!("{prefix}.o"))
    }

    fn ffn(&self, y: Tensor<'t>, prefix: &str) -> Tensor<'t> {
        self.linear(
            self.linear(y, &format!("{prefix}.0")).relu(),
            &format!("{prefix}.1"),
        )
    }

    /// Three-layer pose MLP shared across layers: first four outputs
    /// normalize to a unit quaternion, last three pass through tanh.
    fn pose_head(&self, f: Tensor<'t>, prefix: &str) -> Tensor<'t> {
        let h = self.linear(f, &format!("{prefix}.0")).relu();
        let h = self.linear(h, &format!("{prefix}.1")).relu();
        let o = self.linear(h, &format!("{prefix}.2"));
        let quat = o.slice_ax(1, 0, 4).l2_normalize(1);
        let trans = o.slice_ax(1, 4, 7).tanh();
        self.tape.concat(&[quat, trans], 1)
    }

    /// Builds layer tokens (feature, codes, previous pose, noise) and
    /// projects them to model width with the layer's own projection.
    fn build_tokens(
        &self,
        features: Tensor<'t>,
        codes: Tensor<'t>,
        prev_pose: Tensor<'t>,
        noise: Option<Tensor<'t>>,
        proj: &str,
    ) -> Result<Tensor<'t>> {
        let mut cols = vec![features, codes, prev_pose];
        if let Some(nz) = noise {
            cols.push(nz);
        }
        let tok = self.tape.apply(Op::Concat { axis: 1 }, &cols)?;
        Ok(self.linear(tok, proj))
    }

    /// Runs the full encoder. Instance codes and the previous layer's
    /// poses are re-attached before every block; each layer's features go
    /// through the shared pose head, so the pose sequence refines coarse
    /// to fine. `pinned_poses` replaces the predicted-pose feedback with
    /// fixed rows, used when the input shape is already assembled.
    pub fn encode(
        &self,
        inputs: &TokenInputs,
        pinned_poses: Option<&ArrayD<f64>>,
    ) -> Result<EncoderOutput<'t>> {
        let clouds = self.tape.constant(inputs.clouds.clone());
        let features = self.pointnet(clouds)?;
        self.encode_from_features(features, inputs, pinned_poses)
    }

    /// As [`BoundModel::encode`] with part features already extracted.
    /// Lets noise-only reruns of one sample skip the point network.
    pub fn encode_from_features(
        &self,
        features: Tensor<'t>,
        inputs: &TokenInputs,
        pinned_poses: Option<&ArrayD<f64>>,
    ) -> Result<EncoderOutput<'t>> {
        let cfg = *self.config();
        inputs.check(&cfg)?;
        if inputs.valid.iter().all(|&v| !v) {
            return Err(Error::AllMasked);
        }
        let n = inputs.n_parts();
        if features.shape() != [n, cfg.d_model] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("features {:?} vs {n} parts", features.shape()),
            });
        }
        if let Some(p) = pinned_poses {
            if p.shape() != [n, 7] {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    detail: format!("pinned poses {:?} vs {n} parts", p.shape()),
                });
            }
        }
        let codes = self.tape.constant(inputs.codes.clone());
        let noise =
            (cfg.noise_dim > 0).then(|| self.tape.constant(inputs.noise.clone()));
        let pinned = pinned_poses.map(|p| self.tape.constant(p.clone()));
        let mut features = features;
        let mut prev = pinned.unwrap_or_else(|| self.tape.constant(identity_pose_rows(n)));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut layer_poses = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let x = self.build_tokens(features, codes, prev, noise, &format!("enc.{l}.proj"))?;
            let y = x.layer_norm(LN_EPS);
            let x = x.add(self.attention(y, y, &format!("enc.{l}.attn"), &inputs.valid));
            let f = x.add(self.ffn(x.layer_norm(LN_EPS), &format!("enc.{l}.ffn")));
            let pose = self.pose_head(f, "head");
            layers.push(f);
            layer_poses.push(pose);
            features = f;
            prev = pinned.unwrap_or(pose);
        }
        Ok(EncoderOutput {
            memory: EncoderMemory {
                layers,
                valid: inputs.valid.clone(),
            },
            layer_poses,
        })
    }

    /// Runs the decoder: per layer, self-attention over the queries, then
    /// cross-attention into the matching encoder layer's memory, then the
    /// decoder's own pose head. Returns one `[n_q, 7]` tensor per layer.
    pub fn decode(
        &self,
        queries: &TokenInputs,
        memory: &EncoderMemory<'t>,
    ) -> Result<Vec<Tensor<'t>>> {
        let cfg = *self.config();
        queries.check(&cfg)?;
        if queries.valid.iter().all(|&v| !v) {
            return Err(Error::NoParts);
        }
        if memory.layers.is_empty() || memory.valid.iter().all(|&v| !v) {
            return Err(Error::EmptyMemory);
        }
        if memory.n_layers() != cfg.n_layers {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!(
                    "memory has {} layers, model {}",
                    memory.n_layers(),
                    cfg.n_layers
                ),
            });
        }
        let n = queries.n_parts();
        let clouds = self.tape.constant(queries.clouds.clone());
        let codes = self.tape.constant(queries.codes.clone());
        let noise =
            (cfg.noise_dim > 0).then(|| self.tape.constant(queries.noise.clone()));
        let mut features = self.pointnet(clouds)?;
        let mut prev = self.tape.constant(identity_pose_rows(n));
        let mut poses = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let x = self.build_tokens(features, codes, prev, noise, &format!("dec.{l}.proj"))?;
            let y = x.layer_norm(LN_EPS);
            let x = x.add(self.attention(y, y, &format!("dec.{l}.self"), &queries.valid));
            let x = x.add(self.attention(
                x.layer_norm(LN_EPS),
                memory.layer(l),
                &format!("dec.{l}.cross"),
                memory.valid(),
            ));
            let f = x.add(self.ffn(x.layer_norm(LN_EPS), &format!("dec.{l}.ffn")));
            let pose = self.pose_head(f, "dec_head");
            poses.push(pose);
            features = f;
            prev = pose;
        }
        Ok(poses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::cluster_equivalent;
    use rand::Rng as _;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            noise_dim: 3,
            max_parts: 4,
            n_pc: 8,
            head_hidden: 8,
            use_instance_encoding: true,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PartCloud {
        let mut rng = rng_from_seed(seed);
        PartCloud::from_points(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5)))
                .collect(),
        )
        .unwrap()
    }

    fn inputs_for(n_parts: usize, cfg: &ModelConfig, seed: u64) -> TokenInputs {
        let parts: Vec<PartCloud> = (0..n_parts)
            .map(|i| random_cloud(cfg.n_pc, seed * 100 + i as u64))
            .collect();
        let partition = cluster_equivalent(&parts, 0.1).unwrap();
        let noise = sample_noise(n_parts, cfg.noise_dim, seed + 7);
        TokenInputs::from_parts(&parts, &partition, cfg, noise).unwrap()
    }

    fn pose_bits(seq: &PoseSequence) -> Vec<u64> {
        let mut bits = Vec::new();
        for l in 0..seq.n_layers() {
            for p in seq.layer(l) {
                bits.extend(p.to_7vec().iter().map(|v| v.to_bits()));
            }
        }
        bits
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = AssemblyModel::init(cfg, 11).unwrap();
        let b = AssemblyModel::init(cfg, 11).unwrap();
        let c = AssemblyModel::init(cfg, 12).unwrap();
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
        assert!(a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, va), (_, vc))| va != vc));
    }

    #[test]
    fn pointnet_is_invariant_to_point_order_and_duplicates() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 3).unwrap();
        let cloud = random_cloud(8, 42);
        let as_feature = |pts: Vec<[f64; 3]>| -> Vec<u64> {
            let n = pts.len();
            let flat: Vec<f64> = pts.iter().flatten().copied().collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&[1, n, 3]), flat).unwrap();
            let tape = Tape::new();
            let bound = model.bind(&tape, Trainability::Frozen);
            let f = bound.pointnet(tape.constant(arr)).unwrap();
            f.value().iter().map(|v| v.to_bits()).collect()
        };
        let pts = cloud.points().to_vec();
        let mut reversed = pts.clone();
        reversed.reverse();
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        let base = as_feature(pts);
        assert_eq!(base, as_feature(reversed));
        assert_eq!(base, as_feature(doubled));
    }

    #[test]
    fn pointnet_separates_distinct_clouds() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 3).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, Trainability::Frozen);
        let make = |seed: u64| {
            let c = random_cloud(8, seed);
            let flat: Vec<f64> = c.points().iter().flatten().copied().collect();
            ArrayD::from_shape_vec(IxDyn(&[1, 8, 3]), flat).unwrap()
        };
        let fa = bound.pointnet(tape.constant(make(1))).unwrap().value();
        let fb = bound.pointnet(tape.constant(make(2))).unwrap().value();
        assert!(fa.iter().zip(fb.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn fresh_model_predicts_identity_poses() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 5).unwrap();
        let inputs = inputs_for(3, &cfg, 1);
        let seq = model.predict(&inputs).unwrap();
        assert_eq!(seq.n_layers(), cfg.n_layers);
        for l in 0..seq.n_layers() {
            for p in seq.layer(l) {
                assert_eq!(p.to_7vec(), IDENTITY_POSE_7);
            }
        }
    }

    #[test]
    fn pose_sequence_shape_follows_layer_count() {
        for n_layers in [1, 6] {
            let cfg = ModelConfig {
                n_layers,
                ..tiny_config()
            };
            let model = AssemblyModel::init(cfg, 5).unwrap();
            let seq = model.predict(&inputs_for(2, &cfg, 3)).unwrap();
            assert_eq!(seq.n_layers(), n_layers);
            assert_eq!(seq.n_parts(), 2);
        }
    }

    /// Random (trained-looking) parameters still emit unit quaternions and
    /// bounded translations at every layer.
    #[test]
    fn predicted_poses_keep_invariants_under_random_params() {
        let cfg = tiny_config();
        let mut model = AssemblyModel::init(cfg, 5).unwrap();
        let mut rng = rng_from_seed(99);
        for (_, v) in model.params_mut().iter_mut() {
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
        let seq = model.predict(&inputs_for(4, &cfg, 2)).unwrap();
        for l in 0..seq.n_layers() {
            for p in seq.layer(l) {
                let v = p.to_7vec();
                let qn: f64 = v[..4].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((qn - 1.0).abs() < 1e-9);
                assert!(v[4..].iter().all(|t| t.abs() < 1.0));
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_bitwise() {
        let cfg = tiny_config();
        let mut model = AssemblyModel::init(cfg, 8).unwrap();
        let mut rng = rng_from_seed(17);
        for (_, v) in model.params_mut().iter_mut() {
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let inputs = inputs_for(4, &cfg, 6);
        let perm = [2usize, 0, 3, 1];
        let permuted = inputs.select(&perm);
        let base = model.predict(&inputs).unwrap();
        let shuffled = model.predict(&permuted).unwrap();
        for l in 0..base.n_layers() {
            for (slot, &src) in perm.iter().enumerate() {
                let a = base.layer(l)[src].to_7vec();
                let b = shuffled.layer(l)[slot].to_7vec();
                assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let cfg = tiny_config();
        let mut model = AssemblyModel::init(cfg, 8).unwrap();
        let mut rng = rng_from_seed(18);
        for (_, v) in model.params_mut().iter_mut() {
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let inputs = inputs_for(2, &cfg, 9);
        let padded = inputs.padded_to(cfg.max_parts);
        let base = model.predict(&inputs).unwrap();
        let with_pad = model.predict(&padded).unwrap();
        assert_eq!(with_pad.n_parts(), 2, "padded rows are skipped");
        assert_eq!(pose_bits(&base), pose_bits(&with_pad));
    }

    #[test]
    fn encoder_rejects_fully_masked_input() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 8).unwrap();
        let mut inputs = inputs_for(2, &cfg, 9);
        inputs.valid = vec![false, false];
        assert!(matches!(model.predict(&inputs), Err(Error::AllMasked)));
    }

    #[test]
    fn too_many_parts_is_an_error() {
        let cfg = tiny_config();
        let parts: Vec<PartCloud> = (0..5).map(|i| random_cloud(8, i)).collect();
        let partition = cluster_equivalent(&parts, 0.1).unwrap();
        let noise = sample_noise(5, cfg.noise_dim, 0);
        assert!(matches!(
            TokenInputs::from_parts(&parts, &partition, &cfg, noise),
            Err(Error::TooManyParts { n_parts: 5, .. })
        ));
    }

    #[test]
    fn zero_noise_dim_makes_prediction_noise_independent() {
        let cfg = ModelConfig {
            noise_dim: 0,
            ..tiny_config()
        };
        let model = AssemblyModel::init(cfg, 21).unwrap();
        let a = inputs_for(3, &cfg, 4);
        let b = inputs_for(3, &cfg, 4);
        assert_eq!(
            pose_bits(&model.predict(&a).unwrap()),
            pose_bits(&model.predict(&b).unwrap())
        );
    }

    #[test]
    fn decoder_single_query_single_memory_part() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 31).unwrap();
        let ctx = inputs_for(1, &cfg, 5);
        let query = inputs_for(1, &cfg, 6);
        let seq = model
            .predict_inprocess(&ctx, &[Pose::identity()], &query)
            .unwrap();
        assert_eq!(seq.n_layers(), cfg.n_layers);
        assert_eq!(seq.n_parts(), 1);
    }

    #[test]
    fn decoder_cross_attention_is_live() {
        let cfg = tiny_config();
        let mut model = AssemblyModel::init(cfg, 31).unwrap();
        let mut rng = rng_from_seed(23);
        for (_, v) in model.params_mut().iter_mut() {
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let query = inputs_for(1, &cfg, 6);
        let ctx_a = inputs_for(2, &cfg, 7);
        let ctx_b = inputs_for(2, &cfg, 8);
        let poses = vec![Pose::identity(); 2];
        let a = model.predict_inprocess(&ctx_a, &poses, &query).unwrap();
        let b = model.predict_inprocess(&ctx_b, &poses, &query).unwrap();
        assert_ne!(pose_bits(&a), pose_bits(&b));
    }

    #[test]
    fn decoder_is_invariant_to_memory_order() {
        let cfg = tiny_config();
        let mut model = AssemblyModel::init(cfg, 31).unwrap();
        let mut rng = rng_from_seed(24);
        for (_, v) in model.params_mut().iter_mut() {
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let query = inputs_for(1, &cfg, 6);
        let ctx = inputs_for(3, &cfg, 7);
        let mut rng2 = rng_from_seed(5);
        let poses: Vec<Pose> = (0..3)
            .map(|_| {
                Pose::new(
                    crate::geom::Quat::from_axis_angle(
                        [0.0, 0.0, 1.0],
                        rng2.gen_range(-1.0..1.0),
                    ),
                    [
                        rng2.gen_range(-0.4..0.4),
                        rng2.gen_range(-0.4..0.4),
                        rng2.gen_range(-0.4..0.4),
                    ],
                )
                .unwrap()
            })
            .collect();
        let perm = [1usize, 2, 0];
        let ctx_p = ctx.select(&perm);
        let poses_p: Vec<Pose> = perm.iter().map(|&i| poses[i]).collect();
        let a = model.predict_inprocess(&ctx, &poses, &query).unwrap();
        let b = model.predict_inprocess(&ctx_p, &poses_p, &query).unwrap();
        assert_eq!(pose_bits(&a), pose_bits(&b));
    }

    #[test]
    fn decoder_requires_memory() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 31).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, Trainability::Frozen);
        let query = inputs_for(1, &cfg, 6);
        let empty = EncoderMemory {
            layers: vec![],
            valid: vec![],
        };
        assert!(matches!(
            bound.decode(&query, &empty),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn trainability_selects_decoder_parameters() {
        let cfg = tiny_config();
        let model = AssemblyModel::init(cfg, 31).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, Trainability::DecoderOnly);
        for (name, t) in bound.named_tensors() {
            assert_eq!(
                t.requires_grad(),
                name.starts_with("dec"),
                "trainability of {name}"
            );
        }
    }

    #[test]
    fn codes_array_zeroes_when_encoding_disabled() {
        let parts: Vec<PartCloud> = (0..3).map(|i| random_cloud(8, 50 + i)).collect();
        let partition = cluster_equivalent(&parts, 0.1).unwrap();
        let on = codes_array(&partition, &tiny_config()).unwrap();
        let off = codes_array(
            &partition,
            &ModelConfig {
                use_instance_encoding: false,
                ..tiny_config()
            },
        )
        .unwrap();
        assert_eq!(on.shape(), off.shape());
        assert!(on.iter().any(|&v| v != 0.0));
        assert!(off.iter().all(|&v| v == 0.0));
    }
}
