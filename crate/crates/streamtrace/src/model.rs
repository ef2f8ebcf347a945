//! The recurrent tracking network: feature-embedding MLP, two stacked GRU
//! layers, a concatenation decoder, the student's 3D convolutional
//! projection, and the binary weights container.
//!
//! Batch normalization uses current-batch statistics in both training and
//! evaluation (no running estimates), so outputs depend on the evaluated
//! batch. Statistics are taken over every row passed to [`embed`]; callers
//! decide the batch regime (all valid positions of a training batch, or the
//! active streamlines of one tracking step).
//!
//! Weights container (`CRNNWT1\0`, little-endian): u32 tensor count, then per
//! tensor u16 name length + UTF-8 name, u8 rank, u64 dims, float32 data
//! row-major; trailing u64 Adler-32 checksum (zero-extended) of everything
//! between the magic and the checksum.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, SphericalStep, Streamline};
use crate::volumes::Volume;

pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.1;
pub const CONV_KERNEL: usize = 7;
pub const CONV_PAD: isize = 3;

/// Architecture hyperparameters. Full scale is embed/hidden 512 with four
/// MLP blocks; desk-scale configurations shrink every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Teacher input channels (and student conv output channels).
    pub c_in: usize,
    /// Student context channels (conv input).
    pub context_channels: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_blocks: usize,
    pub gru_layers: usize,
}

impl ArchConfig {
    pub fn full_scale(c_in: usize, context_channels: usize) -> Self {
        ArchConfig {
            c_in,
            context_channels,
            embed_dim: 512,
            hidden_dim: 512,
            mlp_blocks: 4,
            gru_layers: 2,
        }
    }

    pub fn desk_scale(c_in: usize, context_channels: usize) -> Self {
        ArchConfig {
            c_in,
            context_channels,
            embed_dim: 32,
            hidden_dim: 32,
            mlp_blocks: 4,
            gru_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn prefix(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// [out, in]
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, input: usize) -> Self {
        Linear {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }

    pub fn init(out: usize, input: usize, rng: &mut crate::rng::Xoshiro256StarStar) -> Self {
        let a = 1.0 / (input as f64).sqrt();
        let w = Array2::from_shape_fn((out, input), |_| rng.uniform(-a, a));
        let b = Array1::from_shape_fn(out, |_| rng.uniform(-a, a));
        Linear { w, b }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

/// Intermediates of one MLP block forward, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub xhat: Array2<f64>,
    /// Pre-activation (batch-norm output).
    pub bn_out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl MlpBlock {
    /// linear -> batch-norm (current batch statistics) -> leaky ReLU.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let z = self.linear.forward(x);
        let mean = z.mean_axis(Axis(0)).unwrap();
        let centered = &z - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let bn_out = &xhat * &self.bn.gamma + &self.bn.beta;
        let out = bn_out.mapv(leaky_relu);
        (
            out,
            BlockCache {
                x: x.clone(),
                mean,
                var,
                xhat,
                bn_out,
            },
        )
    }
}

#[inline]
pub fn leaky_relu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
pub fn leaky_relu_grad(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub blocks: Vec<MlpBlock>,
}

impl Embedder {
    pub fn init(
        c_in: usize,
        embed_dim: usize,
        n_blocks: usize,
        rng: &mut crate::rng::Xoshiro256StarStar,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| {
                let input = if i == 0 { c_in } else { embed_dim };
                MlpBlock {
                    linear: Linear::init(embed_dim, input, rng),
                    bn: BatchNorm::identity(embed_dim),
                }
            })
            .collect();
        Embedder { blocks }
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().map(|b| b.linear.w.nrows()).unwrap_or(0)
    }
}

/// MLP embedding of a batch of feature rows. Batch statistics need at least
/// two rows.
pub fn embed(e: &Embedder, features: &Array2<f64>) -> Result<(Array2<f64>, Vec<BlockCache>)> {
    if features.nrows() < 2 {
        return Err(Error::BatchTooSmall(features.nrows()));
    }
    let mut x = features.clone();
    let mut caches = Vec::with_capacity(e.blocks.len());
    for block in &e.blocks {
        let (out, cache) = block.forward(&x);
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// One GRU layer; gate blocks stacked in (reset, update, candidate) order:
/// r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r .* (W_hn h + b_hn))
/// h' = (1 - z) .* n + z .* h
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    /// [3H, in]
    pub w_ih: Array2<f64>,
    /// [3H, H]
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
}

impl GruLayer {
    pub fn init(input: usize, hidden: usize, rng: &mut crate::rng::Xoshiro256StarStar) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        GruLayer {
            w_ih: Array2::from_shape_fn((3 * hidden, input), |_| rng.uniform(-a, a)),
            w_hh: Array2::from_shape_fn((3 * hidden, hidden), |_| rng.uniform(-a, a)),
            b_ih: Array1::from_shape_fn(3 * hidden, |_| rng.uniform(-a, a)),
            b_hh: Array1::from_shape_fn(3 * hidden, |_| rng.uniform(-a, a)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.ncols()
    }
}

/// Per-layer GRU step intermediates for backpropagation.
#[derive(Debug, Clone)]
pub struct GruLayerCache {
    pub x: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub r: Array2<f64>,
    pub z: Array2<f64>,
    pub n: Array2<f64>,
    /// W_hn h + b_hn (the candidate's hidden-side pre-gate term).
    pub hn_term: Array2<f64>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gru_layer_step(
    layer: &GruLayer,
    x: &Array2<f64>,
    h_prev: &Array2<f64>,
) -> (Array2<f64>, GruLayerCache) {
    let h = layer.hidden_dim();
    let gi = x.dot(&layer.w_ih.t()) + &layer.b_ih; // [B, 3H]
    let gh = h_prev.dot(&layer.w_hh.t()) + &layer.b_hh;
    let i_r = gi.slice(ndarray::s![.., 0..h]);
    let i_z = gi.slice(ndarray::s![.., h..2 * h]);
    let i_n = gi.slice(ndarray::s![.., 2 * h..3 * h]);
    let h_r = gh.slice(ndarray::s![.., 0..h]);
    let h_z = gh.slice(ndarray::s![.., h..2 * h]);
    let h_n = gh.slice(ndarray::s![.., 2 * h..3 * h]);

    let r = (&i_r + &h_r).mapv(sigmoid);
    let z = (&i_z + &h_z).mapv(sigmoid);
    let hn_term = h_n.to_owned();
    let n = (&i_n + &(&r * &hn_term)).mapv(f64::tanh);
    let h_new = (1.0 - &z) * &n + &z * h_prev;
    (
        h_new,
        GruLayerCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            r,
            z,
            n,
            hn_term,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCore {
    pub layers: Vec<GruLayer>,
}

impl RecurrentCore {
    pub fn init(
        input: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut crate::rng::Xoshiro256StarStar,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| GruLayer::init(if i == 0 { input } else { hidden }, hidden, rng))
            .collect();
        RecurrentCore { layers }
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim()
    }

    /// Zero hidden state for a batch.
    pub fn zero_hidden(&self, batch: usize) -> Vec<Array2<f64>> {
        self.layers
            .iter()
            .map(|l| Array2::zeros((batch, l.hidden_dim())))
            .collect()
    }
}

/// One step of the stacked GRU. Layer 1's output feeds layer 2; the returned
/// output is the last layer's new hidden state.
pub fn recurrent_step(
    core: &RecurrentCore,
    input: &Array2<f64>,
    hidden: &[Array2<f64>],
) -> Result<(Array2<f64>, Vec<Array2<f64>>, Vec<GruLayerCache>)> {
    if hidden.len() != core.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "hidden has {} layers, core has {}",
            hidden.len(),
            core.layers.len()
        )));
    }
    let mut x = input.clone();
    let mut new_hidden = Vec::with_capacity(core.layers.len());
    let mut caches = Vec::with_capacity(core.layers.len());
    for (layer, h) in core.layers.iter().zip(hidden) {
        if h.nrows() != x.nrows() || h.ncols() != layer.hidden_dim() {
            return Err(Error::ShapeMismatch(format!(
                "hidden state {:?} does not match batch {} x {}",
                h.dim(),
                x.nrows(),
                layer.hidden_dim()
            )));
        }
        let (h_new, cache) = gru_layer_step(layer, &x, h);
        x = h_new.clone();
        new_hidden.push(h_new);
        caches.push(cache);
    }
    Ok((x, new_hidden, caches))
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub linear: Linear,
}

impl Decoder {
    pub fn init(
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut crate::rng::Xoshiro256StarStar,
    ) -> Self {
        Decoder {
            linear: Linear::init(2, embed_dim + hidden_dim, rng),
        }
    }
}

/// Linear map of concat(embedding, gru_out) to raw (azimuth, zenith) pairs.
/// Concatenation order is (embedding, gru_out).
pub fn decode(d: &Decoder, emb: &Array2<f64>, gru_out: &Array2<f64>) -> Array2<f64> {
    let b = emb.nrows();
    let mut cat = Array2::zeros((b, emb.ncols() + gru_out.ncols()));
    cat.slice_mut(ndarray::s![.., ..emb.ncols()]).assign(emb);
    cat.slice_mut(ndarray::s![.., emb.ncols()..]).assign(gru_out);
    d.linear.forward(&cat)
}

// ---------------------------------------------------------------------------
// Convolutional projection (student)
// ---------------------------------------------------------------------------

/// 7x7x7 3D convolution, correlation convention, zero padding 3
/// (shape-preserving). Kernel stored as [c_out, c_in * 343] with taps laid
/// out z-major: tap index = (dz*7 + dy)*7 + dx, offsets in [-3, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvProjection {
    pub kernel: Array2<f64>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvProjection {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvProjection {
            kernel: Array2::zeros((c_out, c_in * CONV_KERNEL.pow(3))),
            c_in,
            c_out,
        }
    }

    pub fn init(c_in: usize, c_out: usize, rng: &mut crate::rng::Xoshiro256StarStar) -> Self {
        let fan_in = (c_in * CONV_KERNEL.pow(3)) as f64;
        let a = 1.0 / fan_in.sqrt();
        ConvProjection {
            kernel: Array2::from_shape_fn((c_out, c_in * CONV_KERNEL.pow(3)), |_| {
                rng.uniform(-a, a)
            }),
            c_in,
            c_out,
        }
    }

    #[inline]
    pub fn tap_index(c_in_idx: usize, dz: usize, dy: usize, dx: usize) -> usize {
        c_in_idx * CONV_KERNEL.pow(3) + (dz * CONV_KERNEL + dy) * CONV_KERNEL + dx
    }

    /// Convolution output for all channels at one voxel.
    pub fn at_voxel(&self, v: &Volume, x: usize, y: usize, z: usize, out: &mut [f64]) {
        debug_assert_eq!(v.channels, self.c_in);
        debug_assert_eq!(out.len(), self.c_out);
        out.fill(0.0);
        let (nx, ny, nz) = v.dims;
        for dz in 0..CONV_KERNEL {
            let sz = z as isize + dz as isize - CONV_PAD;
            if sz < 0 || sz >= nz as isize {
                continue;
            }
            for dy in 0..CONV_KERNEL {
                let sy = y as isize + dy as isize - CONV_PAD;
                if sy < 0 || sy >= ny as isize {
                    continue;
                }
                for dx in 0..CONV_KERNEL {
                    let sx = x as isize + dx as isize - CONV_PAD;
                    if sx < 0 || sx >= nx as isize {
                        continue;
                    }
                    let base = v.voxel_index(sx as usize, sy as usize, sz as usize);
                    for ci in 0..self.c_in {
                        let val = v.data[base + ci] as f64;
                        if val == 0.0 {
                            continue;
                        }
                        let tap = Self::tap_index(ci, dz, dy, dx);
                        for (co, o) in out.iter_mut().enumerate() {
                            *o += self.kernel[(co, tap)] * val;
                        }
                    }
                }
            }
        }
    }
}

/// Full-volume convolution (same spatial dims, `c_out` channels). Training
/// and tracking evaluate lazily per voxel instead; this is the whole-volume
/// contract surface.
pub fn conv_project(c: &ConvProjection, v: &Volume) -> Result<Volume> {
    if v.channels != c.c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, volume has {}",
            c.c_in, v.channels
        )));
    }
    let (nx, ny, nz) = v.dims;
    let mut out = Volume::zeros(v.dims, c.c_out, v.voxel_size);
    out.voxel_to_world = v.voxel_to_world;
    let mut buf = vec![0.0f64; c.c_out];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                c.at_voxel(v, x, y, z, &mut buf);
                let base = out.voxel_index(x, y, z);
                for (co, &val) in buf.iter().enumerate() {
                    out.data[base + co] = val as f32;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherNet {
    pub embedder: Embedder,
    pub core: RecurrentCore,
    pub decoder: Decoder,
    pub config: ArchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub conv: ConvProjection,
    pub embedder: Embedder,
    /// Frozen, shared bit-identically with the teacher at creation.
    pub core: RecurrentCore,
    /// Frozen, shared bit-identically with the teacher at creation.
    pub decoder: Decoder,
    pub config: ArchConfig,
}

impl TeacherNet {
    pub fn init(config: &ArchConfig, rng: &mut crate::rng::Xoshiro256StarStar) -> Self {
        TeacherNet {
            embedder: Embedder::init(config.c_in, config.embed_dim, config.mlp_blocks, rng),
            core: RecurrentCore::init(config.embed_dim, config.hidden_dim, config.gru_layers, rng),
            decoder: Decoder::init(config.embed_dim, config.hidden_dim, rng),
            config: config.clone(),
        }
    }
}

impl StudentNet {
    /// Fresh conv + embedder; GRU core and decoder cloned bit-identically
    /// from the teacher.
    pub fn from_teacher(
        teacher: &TeacherNet,
        rng: &mut crate::rng::Xoshiro256StarStar,
    ) -> StudentNet {
        let config = teacher.config.clone();
        StudentNet {
            conv: ConvProjection::init(config.context_channels, config.c_in, rng),
            embedder: Embedder::init(config.c_in, config.embed_dim, config.mlp_blocks, rng),
            core: teacher.core.clone(),
            decoder: teacher.decoder.clone(),
            config,
        }
    }
}

/// Output of a whole-streamline forward pass: one raw angle pair per step
/// (one fewer than the streamline's points) plus the MLP embeddings.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub predictions: Vec<SphericalStep>,
    /// [steps, embed_dim]
    pub embeddings: Array2<f64>,
}

fn sequence_forward(
    embedder: &Embedder,
    core: &RecurrentCore,
    decoder: &Decoder,
    features: Array2<f64>,
) -> Result<ForwardOutput> {
    let steps = features.nrows();
    let (emb, _) = embed(embedder, &features)?;
    let mut hidden = core.zero_hidden(1);
    let mut predictions = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = emb.row(t).insert_axis(Axis(0)).to_owned();
        let (out, new_hidden, _) = recurrent_step(core, &x, &hidden)?;
        hidden = new_hidden;
        let angles = decode(decoder, &x, &out);
        predictions.push(SphericalStep {
            azimuth: angles[(0, 0)],
            zenith: angles[(0, 1)],
        });
    }
    Ok(ForwardOutput {
        predictions,
        embeddings: emb,
    })
}

fn sample_features(volume: &Volume, points: &[Point3]) -> Array2<f64> {
    let mut features = Array2::zeros((points.len(), volume.channels));
    let mut buf = vec![0.0f64; volume.channels];
    for (i, p) in points.iter().enumerate() {
        volume.trilinear_into(p, &mut buf);
        for (c, &v) in buf.iter().enumerate() {
            features[(i, c)] = v;
        }
    }
    features
}

/// Teacher forward over one streamline: trilinear feature sampling at the
/// first L-1 points, MLP embedding (batch statistics over those steps), GRU
/// from zero hidden state, decode. Out-of-bounds points contribute zero
/// features.
pub fn teacher_forward(
    net: &TeacherNet,
    feature_volume: &Volume,
    streamline: &Streamline,
) -> Result<ForwardOutput> {
    let pts = &streamline.points()[..streamline.len() - 1];
    sequence_forward(
        &net.embedder,
        &net.core,
        &net.decoder,
        sample_features(feature_volume, pts),
    )
}

/// Student forward: identical path with the conv projection applied to the
/// context volume before trilinear sampling.
pub fn student_forward(
    net: &StudentNet,
    context_volume: &Volume,
    streamline: &Streamline,
    conv_cache: &mut ConvFeatureCache,
) -> Result<ForwardOutput> {
    let pts = &streamline.points()[..streamline.len() - 1];
    let features = conv_cache.sample(net, context_volume, pts)?;
    sequence_forward(&net.embedder, &net.core, &net.decoder, features)
}

/// Lazily evaluated conv output voxels, reused across points and streamlines
/// of the same volume.
#[derive(Debug, Default)]
pub struct ConvFeatureCache {
    voxels: std::collections::HashMap<(usize, usize, usize), Vec<f64>>,
}

impl ConvFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.voxels.clear();
    }

    fn voxel_value<'a>(
        &'a mut self,
        net: &StudentNet,
        v: &Volume,
        key: (usize, usize, usize),
    ) -> &'a [f64] {
        self.voxels.entry(key).or_insert_with(|| {
            let mut out = vec![0.0f64; net.conv.c_out];
            net.conv.at_voxel(v, key.0, key.1, key.2, &mut out);
            out
        })
    }

    /// Trilinear sampling of the (lazily computed) conv output at world
    /// points. Out-of-bounds points yield zero features.
    pub fn sample(
        &mut self,
        net: &StudentNet,
        context_volume: &Volume,
        points: &[Point3],
    ) -> Result<Array2<f64>> {
        if context_volume.channels != net.conv.c_in {
            return Err(Error::ShapeMismatch(format!(
                "context volume has {} channels, conv expects {}",
                context_volume.channels, net.conv.c_in
            )));
        }
        let c_out = net.conv.c_out;
        let mut out = Array2::zeros((points.len(), c_out));
        for (i, p) in points.iter().enumerate() {
            if let Some(corners) = context_volume.trilinear_weights(p) {
                for (x, y, z, w) in corners {
                    let vals = self.voxel_value(net, context_volume, (x, y, z));
                    for c in 0..c_out {
                        out[(i, c)] += w * vals[c];
                    }
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Weights container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array1(a: &Array1<f64>) -> Tensor {
        Tensor {
            dims: vec![a.len()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Tensor {
        Tensor {
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array1(&self) -> Array1<f64> {
        Array1::from_iter(self.data.iter().map(|&v| v as f64))
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got rank {}",
                self.dims.len()
            )));
        }
        Array2::from_shape_vec(
            (self.dims[0], self.dims[1]),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn n_values(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Named-tensor container for a teacher or student model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub role: Role,
    pub tensors: BTreeMap<String, Tensor>,
}

const WEIGHTS_MAGIC: &[u8; 8] = b"CRNNWT1\0";

/// Adler-32 over the payload, zero-extended to u64.
fn payload_checksum(payload: &[u8]) -> u64 {
    const MOD: u32 = 65521;
    let mut a: u32 = 1;
    let mut b: u32 = 0;
    for chunk in payload.chunks(5552) {
        for &byte in chunk {
            a += byte as u32;
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (((b << 16) | a) as u64) & 0xFFFF_FFFF
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    payload.extend_from_slice(&(w.tensors.len() as u32).to_le_bytes());
    for (name, t) in &w.tensors {
        let name_bytes = name.as_bytes();
        payload.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(t.dims.len() as u8);
        for &d in &t.dims {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = payload_checksum(&payload);
    let mut out = Vec::with_capacity(8 + payload.len() + 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_weights(&bytes, path)
}

/// Parse a weights container from raw bytes.
pub fn parse_weights(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    if bytes.len() < 8 + 4 + 8 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            format: "CRNNWT1",
        });
    }
    let payload = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = payload_checksum(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.into(),
            stored,
            computed,
        });
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > payload.len() {
            return Err(Error::Truncated {
                path: path.into(),
                expected: *pos + n,
                actual: payload.len(),
            });
        }
        let s = &payload[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| {
            Error::MalformedHeader {
                path: path.into(),
                reason: "tensor name is not UTF-8".into(),
            }
        })?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor { dims, data });
    }

    let role = if tensors.keys().any(|k| k.starts_with("student.")) {
        Role::Student
    } else {
        Role::Teacher
    };
    Ok(ModelWeights { role, tensors })
}

// --- net <-> container conversions ---

fn insert_linear(t: &mut BTreeMap<String, Tensor>, prefix: &str, l: &Linear) {
    t.insert(format!("{prefix}.weight"), Tensor::from_array2(&l.w));
    t.insert(format!("{prefix}.bias"), Tensor::from_array1(&l.b));
}

fn insert_embedder(t: &mut BTreeMap<String, Tensor>, prefix: &str, e: &Embedder) {
    for (i, b) in e.blocks.iter().enumerate() {
        insert_linear(t, &format!("{prefix}.block{i}.linear"), &b.linear);
        t.insert(
            format!("{prefix}.block{i}.bn.gamma"),
            Tensor::from_array1(&b.bn.gamma),
        );
        t.insert(
            format!("{prefix}.block{i}.bn.beta"),
            Tensor::from_array1(&b.bn.beta),
        );
    }
}

fn insert_core(t: &mut BTreeMap<String, Tensor>, prefix: &str, c: &RecurrentCore) {
    for (i, l) in c.layers.iter().enumerate() {
        t.insert(format!("{prefix}.layer{i}.w_ih"), Tensor::from_array2(&l.w_ih));
        t.insert(format!("{prefix}.layer{i}.w_hh"), Tensor::from_array2(&l.w_hh));
        t.insert(format!("{prefix}.layer{i}.b_ih"), Tensor::from_array1(&l.b_ih));
        t.insert(format!("{prefix}.layer{i}.b_hh"), Tensor::from_array1(&l.b_hh));
    }
}

impl TeacherNet {
    pub fn to_weights(&self) -> ModelWeights {
        let mut tensors = BTreeMap::new();
        insert_embedder(&mut tensors, "teacher.embed", &self.embedder);
        insert_core(&mut tensors, "teacher.gru", &self.core);
        insert_linear(&mut tensors, "teacher.decoder", &self.decoder.linear);
        ModelWeights {
            role: Role::Teacher,
            tensors,
        }
    }

    pub fn from_weights(w: &ModelWeights, config: &ArchConfig) -> Result<TeacherNet> {
        let mut net = TeacherNet {
            embedder: Embedder::init(
                config.c_in,
                config.embed_dim,
                config.mlp_blocks,
                &mut crate::rng::Xoshiro256StarStar::seed_from_u64(0),
            ),
            core: RecurrentCore::init(
                config.embed_dim,
                config.hidden_dim,
                config.gru_layers,
                &mut crate::rng::Xoshiro256StarStar::seed_from_u64(0),
            ),
            decoder: Decoder::init(
                config.embed_dim,
                config.hidden_dim,
                &mut crate::rng::Xoshiro256StarStar::seed_from_u64(0),
            ),
            config: config.clone(),
        };
        load_embedder(w, "teacher.embed", &mut net.embedder)?;
        load_core(w, "teacher.gru", &mut net.core)?;
        load_linear(w, "teacher.decoder", &mut net.decoder.linear)?;
        check_no_unknown(w, &net.to_weights())?;
        Ok(net)
    }
}

impl StudentNet {
    pub fn to_weights(&self) -> ModelWeights {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "student.conv.kernel".to_string(),
            Tensor {
                dims: vec![
                    self.conv.c_out,
                    self.conv.c_in,
                    CONV_KERNEL,
                    CONV_KERNEL,
                    CONV_KERNEL,
                ],
                data: self.conv.kernel.iter().map(|&v| v as f32).collect(),
            },
        );
        insert_embedder(&mut tensors, "student.embed", &self.embedder);
        insert_core(&mut tensors, "student.gru", &self.core);
        insert_linear(&mut tensors, "student.decoder", &self.decoder.linear);
        ModelWeights {
            role: Role::Student,
            tensors,
        }
    }

    pub fn from_weights(w: &ModelWeights, config: &ArchConfig) -> Result<StudentNet> {
        let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(0);
        let mut net = StudentNet {
            conv: ConvProjection::zeros(config.context_channels, config.c_in),
            embedder: Embedder::init(config.c_in, config.embed_dim, config.mlp_blocks, &mut rng),
            core: RecurrentCore::init(
                config.embed_dim,
                config.hidden_dim,
                config.gru_layers,
                &mut rng,
            ),
            decoder: Decoder::init(config.embed_dim, config.hidden_dim, &mut rng),
            config: config.clone(),
        };
        let kernel = w
            .tensors
            .get("student.conv.kernel")
            .ok_or_else(|| Error::MissingTensor {
                name: "student.conv.kernel".into(),
            })?;
        let expected = vec![
            config.c_in,
            config.context_channels,
            CONV_KERNEL,
            CONV_KERNEL,
            CONV_KERNEL,
        ];
        if kernel.dims != expected {
            return Err(Error::TensorShapeMismatch {
                name: "student.conv.kernel".into(),
                expected,
                actual: kernel.dims.clone(),
            });
        }
        net.conv.kernel = Array2::from_shape_vec(
            (config.c_in, config.context_channels * CONV_KERNEL.pow(3)),
            kernel.data.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        load_embedder(w, "student.embed", &mut net.embedder)?;
        load_core(w, "student.gru", &mut net.core)?;
        load_linear(w, "student.decoder", &mut net.decoder.linear)?;
        check_no_unknown(w, &net.to_weights())?;
        Ok(net)
    }
}

fn get_tensor<'a>(w: &'a ModelWeights, name: &str) -> Result<&'a Tensor> {
    w.tensors.get(name).ok_or_else(|| Error::MissingTensor {
        name: name.to_string(),
    })
}

fn load_matrix(w: &ModelWeights, name: &str, dst: &mut Array2<f64>) -> Result<()> {
    let t = get_tensor(w, name)?;
    if t.dims != [dst.nrows(), dst.ncols()] {
        return Err(Error::TensorShapeMismatch {
            name: name.to_string(),
            expected: vec![dst.nrows(), dst.ncols()],
            actual: t.dims.clone(),
        });
    }
    *dst = t.to_array2()?;
    Ok(())
}

fn load_vector(w: &ModelWeights, name: &str, dst: &mut Array1<f64>) -> Result<()> {
    let t = get_tensor(w, name)?;
    if t.dims != [dst.len()] {
        return Err(Error::TensorShapeMismatch {
            name: name.to_string(),
            expected: vec![dst.len()],
            actual: t.dims.clone(),
        });
    }
    *dst = t.to_array1();
    Ok(())
}

fn load_linear(w: &ModelWeights, prefix: &str, dst: &mut Linear) -> Result<()> {
    load_matrix(w, &format!("{prefix}.weight"), &mut dst.w)?;
    load_vector(w, &format!("{prefix}.bias"), &mut dst.b)
}

fn load_embedder(w: &ModelWeights, prefix: &str, dst: &mut Embedder) -> Result<()> {
    for (i, b) in dst.blocks.iter_mut().enumerate() {
        load_linear(w, &format!("{prefix}.block{i}.linear"), &mut b.linear)?;
        load_vector(w, &format!("{prefix}.block{i}.bn.gamma"), &mut b.bn.gamma)?;
        load_vector(w, &format!("{prefix}.block{i}.bn.beta"), &mut b.bn.beta)?;
    }
    Ok(())
}

fn load_core(w: &ModelWeights, prefix: &str, dst: &mut RecurrentCore) -> Result<()> {
    for (i, l) in dst.layers.iter_mut().enumerate() {
        load_matrix(w, &format!("{prefix}.layer{i}.w_ih"), &mut l.w_ih)?;
        load_matrix(w, &format!("{prefix}.layer{i}.w_hh"), &mut l.w_hh)?;
        load_vector(w, &format!("{prefix}.layer{i}.b_ih"), &mut l.b_ih)?;
        load_vector(w, &format!("{prefix}.layer{i}.b_hh"), &mut l.b_hh)?;
    }
    Ok(())
}

fn check_no_unknown(w: &ModelWeights, expected: &ModelWeights) -> Result<()> {
    for name in w.tensors.keys() {
        if !expected.tensors.contains_key(name) {
            return Err(Error::UnknownTensor { name: name.clone() });
        }
    }
    Ok(())
}

/// Write the architecture config JSON sidecar next to a weights file.
pub fn write_config_sidecar(config: &ArchConfig, weights_path: impl AsRef<Path>) -> Result<()> {
    let path = weights_path.as_ref().with_extension("json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Other(format!("config serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_config_sidecar(weights_path: impl AsRef<Path>) -> Result<ArchConfig> {
    let path = weights_path.as_ref().with_extension("json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path,
        reason: format!("config JSON: {e}"),
    })
}
