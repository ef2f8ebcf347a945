//! Teacher and student training: label construction, cosine-similarity and
//! contrastive losses, hand-derived backpropagation through the whole
//! network (MLP batch-norm blocks, stacked GRU, decoder, trilinear sampling
//! and the student's conv projection), Adam, early stopping, and a central
//! finite-difference gradient check.
//!
//! Streamline batches are ragged (no materialized padding): every array row
//! corresponds to one valid (streamline, step) position, so padding
//! contributes exactly zero loss and gradient by construction.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spherical_to_unit, Point3, SphericalStep, Streamline};
use crate::model::{
    self, embed, leaky_relu_grad, recurrent_step, ArchConfig, BlockCache, ConvProjection, Decoder,
    Embedder, GruLayer, GruLayerCache, RecurrentCore, Role, StudentNet, TeacherNet, BN_EPS,
    CONV_KERNEL, CONV_PAD,
};
use crate::rng::Xoshiro256StarStar;
use crate::tracts::{self, Tractogram};
use crate::volumes::Volume;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn d_epochs() -> usize {
    500
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_patience() -> usize {
    200
}
fn d_lambda() -> f64 {
    1.0
}
fn d_temp() -> f64 {
    0.1
}
fn d_negatives() -> usize {
    256
}
fn d_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Streamlines drawn per subject per epoch (full scale: 1000).
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_lambda")]
    pub lambda_contrastive: f64,
    #[serde(default = "d_temp")]
    pub temperature: f64,
    #[serde(default = "d_negatives")]
    pub max_negatives: usize,
    #[serde(default = "d_seed")]
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// One training subject for the teacher: FOD-like features plus tracts.
#[derive(Debug, Clone)]
pub struct TeacherSubject {
    pub features: Volume,
    pub tracts: Tractogram,
}

/// One training subject for the student: context volume (student input),
/// feature volume (teacher input, for distillation targets), tracts.
#[derive(Debug, Clone)]
pub struct StudentSubject {
    pub context: Volume,
    pub features: Volume,
    pub tracts: Tractogram,
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

/// A ragged streamline batch: per streamline the first L-1 points as inputs
/// and the L-1 unit step directions as labels. Row r of every batch-aligned
/// array corresponds to `row_of[i][t]`.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub inputs: Vec<Vec<Point3>>,
    /// [n_rows, 3] unit direction labels.
    pub labels: Array2<f64>,
    pub row_of: Vec<Vec<usize>>,
    pub n_rows: usize,
    pub max_steps: usize,
}

pub fn make_batch(streamlines: &[Streamline]) -> Result<TrainingBatch> {
    let mut inputs = Vec::with_capacity(streamlines.len());
    let mut row_of = Vec::with_capacity(streamlines.len());
    let mut labels = Vec::new();
    let mut row = 0usize;
    let mut max_steps = 0usize;
    for s in streamlines {
        let pts = s.points();
        let steps = pts.len() - 1;
        max_steps = max_steps.max(steps);
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            let d = pts[t + 1].sub(&pts[t]);
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            labels.push([d[0] / n, d[1] / n, d[2] / n]);
            rows.push(row);
            row += 1;
        }
        inputs.push(pts[..steps].to_vec());
        row_of.push(rows);
    }
    if row < 2 {
        return Err(Error::BatchTooSmall(row));
    }
    let labels = Array2::from_shape_vec(
        (row, 3),
        labels.into_iter().flatten().collect(),
    )
    .expect("label shape");
    Ok(TrainingBatch {
        inputs,
        labels,
        row_of,
        n_rows: row,
        max_steps,
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over masked rows of (1 - u_pred . u_label); both arguments are
/// [n, 2] (azimuth, zenith) angle arrays. Range [0, 2].
pub fn cosine_loss(pred: &Array2<f64>, label: &Array2<f64>, mask: &[bool]) -> Result<f64> {
    if pred.dim() != label.dim() || pred.nrows() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_loss: pred {:?}, label {:?}, mask {}",
            pred.dim(),
            label.dim(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let up = spherical_to_unit(&SphericalStep {
            azimuth: pred[(i, 0)],
            zenith: pred[(i, 1)],
        })?;
        let ul = spherical_to_unit(&SphericalStep {
            azimuth: label[(i, 0)],
            zenith: label[(i, 1)],
        })?;
        sum += 1.0 - (up[0] * ul[0] + up[1] * ul[1] + up[2] * ul[2]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Loss and gradient w.r.t. the predicted angles; labels given directly as
/// unit vectors ([n, 3]). All rows are valid (ragged batches carry no
/// padding).
fn cosine_loss_grad(angles: &Array2<f64>, labels: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = angles.nrows();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, 2));
    for i in 0..n {
        let (a, z) = (angles[(i, 0)], angles[(i, 1)]);
        let (sa, ca) = a.sin_cos();
        let (sz, cz) = z.sin_cos();
        let u = [sz * ca, sz * sa, cz];
        let l = [labels[(i, 0)], labels[(i, 1)], labels[(i, 2)]];
        loss += 1.0 - (u[0] * l[0] + u[1] * l[1] + u[2] * l[2]);
        // du/da = (-sz*sa, sz*ca, 0); du/dz = (cz*ca, cz*sa, -sz)
        grad[(i, 0)] = -(-sz * sa * l[0] + sz * ca * l[1]) * inv;
        grad[(i, 1)] = -(cz * ca * l[0] + cz * sa * l[1] - sz * l[2]) * inv;
    }
    (loss * inv, grad)
}

/// Normalized-temperature cross-entropy distillation loss. For each masked
/// position the positive is the teacher embedding at the same position;
/// negatives are teacher embeddings at up to `max_negatives` other masked
/// positions (all of them when few enough, otherwise sampled
/// deterministically from `rng_seed`). Logits are cosine similarities over
/// `temperature`.
pub fn contrastive_loss(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    mask: &[bool],
    temperature: f64,
    max_negatives: usize,
    rng_seed: u64,
) -> Result<f64> {
    if student.dim() != teacher.dim() || student.nrows() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive_loss: student {:?}, teacher {:?}, mask {}",
            student.dim(),
            teacher.dim(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let s = student.select(Axis(0), &rows);
    let t = teacher.select(Axis(0), &rows);
    let out = contrastive_loss_grad(&s, &t, temperature, max_negatives, rng_seed)?;
    Ok(out.0)
}

fn contrastive_loss_grad(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    temperature: f64,
    max_negatives: usize,
    rng_seed: u64,
) -> Result<(f64, Array2<f64>)> {
    let n = student.nrows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let dim = student.ncols();
    let s_norm: Vec<f64> = (0..n)
        .map(|i| student.row(i).dot(&student.row(i)).sqrt())
        .collect();
    let t_norm: Vec<f64> = (0..n)
        .map(|i| teacher.row(i).dot(&teacher.row(i)).sqrt())
        .collect();
    if s_norm.iter().chain(&t_norm).any(|&v| v < 1e-12) {
        return Err(Error::NonFinite("zero-norm embedding".into()));
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, dim));
    for i in 0..n {
        // candidate set: position i (positive) plus sampled negatives
        let negatives: Vec<usize> = if n - 1 <= max_negatives {
            (0..n).filter(|&j| j != i).collect()
        } else {
            let mut r = Xoshiro256StarStar::seed_from_u64(
                rng_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            r.sample_indices(n - 1, max_negatives)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        };
        let set: Vec<usize> = std::iter::once(i).chain(negatives).collect();

        let si = student.row(i);
        let cosv: Vec<f64> = set
            .iter()
            .map(|&j| si.dot(&teacher.row(j)) / (s_norm[i] * t_norm[j]))
            .collect();
        let logits: Vec<f64> = cosv.iter().map(|c| c / temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(exps[0] / z).ln() * inv_n;

        for (k, &j) in set.iter().enumerate() {
            let p = exps[k] / z;
            let dlogit = (p - if k == 0 { 1.0 } else { 0.0 }) * inv_n / temperature;
            // d cos(s_i, t_j) / d s_i
            let scale_t = 1.0 / (s_norm[i] * t_norm[j]);
            let scale_s = cosv[k] / (s_norm[i] * s_norm[i]);
            for c in 0..dim {
                grad[(i, c)] += dlogit * (teacher[(j, c)] * scale_t - si[c] * scale_s);
            }
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Batched sequence forward / backward
// ---------------------------------------------------------------------------

struct StepCache {
    /// Streamline indices active at this step.
    active: Vec<usize>,
    /// Batch rows (into emb/labels) of the active streamlines.
    rows: Vec<usize>,
    gru: Vec<GruLayerCache>,
    /// Last-layer hidden output for the active set.
    h_out: Array2<f64>,
    /// Embedding rows fed to the GRU/decoder at this step.
    x: Array2<f64>,
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    emb: Array2<f64>,
    steps: Vec<StepCache>,
    /// [n_rows, 2] raw (azimuth, zenith) predictions.
    angles: Array2<f64>,
}

fn run_sequence(
    embedder: &Embedder,
    core: &RecurrentCore,
    decoder: &Decoder,
    features: Array2<f64>,
    batch: &TrainingBatch,
) -> Result<SeqCache> {
    let (emb, blocks) = embed(embedder, &features)?;
    let b = batch.inputs.len();
    let mut hidden: Vec<Array2<f64>> = core.zero_hidden(b);
    let mut angles = Array2::zeros((batch.n_rows, 2));
    let mut steps = Vec::with_capacity(batch.max_steps);

    for t in 0..batch.max_steps {
        let active: Vec<usize> = (0..b).filter(|&i| t < batch.row_of[i].len()).collect();
        let rows: Vec<usize> = active.iter().map(|&i| batch.row_of[i][t]).collect();
        let x = emb.select(Axis(0), &rows);
        let h_gathered: Vec<Array2<f64>> = hidden
            .iter()
            .map(|h| h.select(Axis(0), &active))
            .collect();
        let (out, new_hidden, gru) = recurrent_step(core, &x, &h_gathered)?;
        for (layer, nh) in new_hidden.iter().enumerate() {
            for (k, &i) in active.iter().enumerate() {
                hidden[layer].row_mut(i).assign(&nh.row(k));
            }
        }
        let pred = model::decode(decoder, &x, &out);
        for (k, &r) in rows.iter().enumerate() {
            angles[(r, 0)] = pred[(k, 0)];
            angles[(r, 1)] = pred[(k, 1)];
        }
        steps.push(StepCache {
            active,
            rows,
            gru,
            h_out: out,
            x,
        });
    }
    Ok(SeqCache {
        blocks,
        emb,
        steps,
        angles,
    })
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbedGrads {
    pub blocks: Vec<BlockGrads>,
}

#[derive(Debug, Clone)]
pub struct GruGrads {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TeacherGrads {
    pub embed: EmbedGrads,
    pub core: Vec<GruGrads>,
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub conv: Array2<f64>,
    pub embed: EmbedGrads,
}

struct SeqGrads {
    embed: EmbedGrads,
    core: Vec<GruGrads>,
    dec_w: Array2<f64>,
    dec_b: Array1<f64>,
    dfeatures: Array2<f64>,
}

fn gru_layer_backward(
    layer: &GruLayer,
    c: &GruLayerCache,
    dh: &Array2<f64>,
    g: &mut GruGrads,
) -> (Array2<f64>, Array2<f64>) {
    let h = layer.hidden_dim();
    let dz = dh * &(&c.h_prev - &c.n);
    let dn = dh * &(1.0 - &c.z);
    let mut dh_prev = dh * &c.z;
    let dn_pre = &dn * &c.n.mapv(|v| 1.0 - v * v);
    let d_hn = &dn_pre * &c.r;
    let dr = &dn_pre * &c.hn_term;
    let dr_pre = &dr * &(&c.r * &c.r.mapv(|v| 1.0 - v));
    let dz_pre = &dz * &(&c.z * &c.z.mapv(|v| 1.0 - v));

    let b = dh.nrows();
    let mut gi = Array2::zeros((b, 3 * h));
    gi.slice_mut(s![.., 0..h]).assign(&dr_pre);
    gi.slice_mut(s![.., h..2 * h]).assign(&dz_pre);
    gi.slice_mut(s![.., 2 * h..3 * h]).assign(&dn_pre);
    let mut gh = gi.clone();
    gh.slice_mut(s![.., 2 * h..3 * h]).assign(&d_hn);

    g.w_ih += &gi.t().dot(&c.x);
    g.b_ih += &gi.sum_axis(Axis(0));
    g.w_hh += &gh.t().dot(&c.h_prev);
    g.b_hh += &gh.sum_axis(Axis(0));
    let dx = gi.dot(&layer.w_ih);
    dh_prev += &gh.dot(&layer.w_hh);
    (dx, dh_prev)
}

fn block_backward(
    block: &crate::model::MlpBlock,
    cache: &BlockCache,
    dout: &Array2<f64>,
    g: &mut BlockGrads,
) -> Array2<f64> {
    let dpre = dout * &cache.bn_out.mapv(leaky_relu_grad);
    g.gamma += &(&dpre * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dpre.sum_axis(Axis(0));
    let dxhat = &dpre * &block.bn.gamma;
    let n = dpre.nrows() as f64;
    let inv_std = cache.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let dz = (&(&dxhat * n) - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat)) * &inv_std / n;
    g.w += &dz.t().dot(&cache.x);
    g.b += &dz.sum_axis(Axis(0));
    dz.dot(&block.linear.w)
}

fn zero_embed_grads(e: &Embedder) -> EmbedGrads {
    EmbedGrads {
        blocks: e
            .blocks
            .iter()
            .map(|b| BlockGrads {
                w: Array2::zeros(b.linear.w.dim()),
                b: Array1::zeros(b.linear.b.len()),
                gamma: Array1::zeros(b.bn.gamma.len()),
                beta: Array1::zeros(b.bn.beta.len()),
            })
            .collect(),
    }
}

fn zero_core_grads(c: &RecurrentCore) -> Vec<GruGrads> {
    c.layers
        .iter()
        .map(|l| GruGrads {
            w_ih: Array2::zeros(l.w_ih.dim()),
            w_hh: Array2::zeros(l.w_hh.dim()),
            b_ih: Array1::zeros(l.b_ih.len()),
            b_hh: Array1::zeros(l.b_hh.len()),
        })
        .collect()
}

/// Full backward pass: decoder -> BPTT through the stacked GRU -> MLP
/// blocks. `demb_extra` carries an additional gradient on the embeddings
/// (the contrastive term). Returns parameter gradients and the gradient
/// w.r.t. the input features.
fn backward_sequence(
    embedder: &Embedder,
    core: &RecurrentCore,
    decoder: &Decoder,
    cache: &SeqCache,
    batch: &TrainingBatch,
    dangles: &Array2<f64>,
    demb_extra: Option<&Array2<f64>>,
) -> SeqGrads {
    let b = batch.inputs.len();
    let e_dim = cache.emb.ncols();
    let n_layers = core.layers.len();
    let mut embed_g = zero_embed_grads(embedder);
    let mut core_g = zero_core_grads(core);
    let mut dec_w = Array2::zeros(decoder.linear.w.dim());
    let mut dec_b = Array1::zeros(decoder.linear.b.len());
    let mut demb: Array2<f64> = match demb_extra {
        Some(g) => g.clone(),
        None => Array2::zeros(cache.emb.dim()),
    };
    let mut dh_full: Vec<Array2<f64>> = core
        .layers
        .iter()
        .map(|l| Array2::zeros((b, l.hidden_dim())))
        .collect();

    for t in (0..batch.max_steps).rev() {
        let sc = &cache.steps[t];
        // decoder backward on this step's rows
        let dang = dangles.select(Axis(0), &sc.rows);
        let n_active = sc.active.len();
        let mut cat = Array2::zeros((n_active, e_dim + sc.h_out.ncols()));
        cat.slice_mut(s![.., ..e_dim]).assign(&sc.x);
        cat.slice_mut(s![.., e_dim..]).assign(&sc.h_out);
        dec_w += &dang.t().dot(&cat);
        dec_b += &dang.sum_axis(Axis(0));
        let dcat = dang.dot(&decoder.linear.w);
        for (k, &r) in sc.rows.iter().enumerate() {
            for c in 0..e_dim {
                demb[(r, c)] += dcat[(k, c)];
            }
        }
        // gradient flowing into the top layer's hidden at this step
        let mut d = dcat.slice(s![.., e_dim..]).to_owned();
        for (k, &i) in sc.active.iter().enumerate() {
            for c in 0..d.ncols() {
                d[(k, c)] += dh_full[n_layers - 1][(i, c)];
            }
        }
        for layer in (0..n_layers).rev() {
            let (dx, dh_prev) =
                gru_layer_backward(&core.layers[layer], &sc.gru[layer], &d, &mut core_g[layer]);
            for (k, &i) in sc.active.iter().enumerate() {
                dh_full[layer].row_mut(i).assign(&dh_prev.row(k));
            }
            if layer > 0 {
                d = dx;
                for (k, &i) in sc.active.iter().enumerate() {
                    for c in 0..d.ncols() {
                        d[(k, c)] += dh_full[layer - 1][(i, c)];
                    }
                }
            } else {
                for (k, &r) in sc.rows.iter().enumerate() {
                    for c in 0..e_dim {
                        demb[(r, c)] += dx[(k, c)];
                    }
                }
            }
        }
    }

    // embedder backward (batch statistics couple all rows)
    let mut dout = demb;
    for idx in (0..embedder.blocks.len()).rev() {
        dout = block_backward(
            &embedder.blocks[idx],
            &cache.blocks[idx],
            &dout,
            &mut embed_g.blocks[idx],
        );
    }

    SeqGrads {
        embed: embed_g,
        core: core_g,
        dec_w,
        dec_b,
        dfeatures: dout,
    }
}

// ---------------------------------------------------------------------------
// Teacher loss / gradients
// ---------------------------------------------------------------------------

fn sample_feature_rows(volume: &Volume, batch: &TrainingBatch) -> Array2<f64> {
    let mut features = Array2::zeros((batch.n_rows, volume.channels));
    let mut buf = vec![0.0f64; volume.channels];
    for (i, pts) in batch.inputs.iter().enumerate() {
        for (t, p) in pts.iter().enumerate() {
            volume.trilinear_into(p, &mut buf);
            let r = batch.row_of[i][t];
            for (c, &v) in buf.iter().enumerate() {
                features[(r, c)] = v;
            }
        }
    }
    features
}

pub fn teacher_loss(net: &TeacherNet, volume: &Volume, batch: &TrainingBatch) -> Result<f64> {
    let features = sample_feature_rows(volume, batch);
    let cache = run_sequence(&net.embedder, &net.core, &net.decoder, features, batch)?;
    Ok(cosine_loss_grad(&cache.angles, &batch.labels).0)
}

pub fn teacher_loss_and_grads(
    net: &TeacherNet,
    volume: &Volume,
    batch: &TrainingBatch,
) -> Result<(f64, TeacherGrads)> {
    let features = sample_feature_rows(volume, batch);
    let cache = run_sequence(&net.embedder, &net.core, &net.decoder, features, batch)?;
    let (loss, dangles) = cosine_loss_grad(&cache.angles, &batch.labels);
    let g = backward_sequence(
        &net.embedder,
        &net.core,
        &net.decoder,
        &cache,
        batch,
        &dangles,
        None,
    );
    Ok((
        loss,
        TeacherGrads {
            embed: g.embed,
            core: g.core,
            dec_w: g.dec_w,
            dec_b: g.dec_b,
        },
    ))
}

// ---------------------------------------------------------------------------
// Student loss / gradients
// ---------------------------------------------------------------------------

type Corners = Vec<Option<[(usize, usize, usize, f64); 8]>>;

/// Conv features at the batch positions, with the trilinear corner weights
/// and the conv outputs of every touched voxel kept for the backward pass.
fn student_features(
    conv: &ConvProjection,
    ctx: &Volume,
    batch: &TrainingBatch,
) -> Result<(Array2<f64>, Corners)> {
    if ctx.channels != conv.c_in {
        return Err(Error::ShapeMismatch(format!(
            "context volume has {} channels, conv expects {}",
            ctx.channels, conv.c_in
        )));
    }
    let mut corners: Corners = vec![None; batch.n_rows];
    for (i, pts) in batch.inputs.iter().enumerate() {
        for (t, p) in pts.iter().enumerate() {
            corners[batch.row_of[i][t]] = ctx.trilinear_weights(p);
        }
    }
    let mut voxel_vals: std::collections::HashMap<(usize, usize, usize), Vec<f64>> =
        std::collections::HashMap::new();
    let mut features = Array2::zeros((batch.n_rows, conv.c_out));
    for (r, cw) in corners.iter().enumerate() {
        if let Some(cw) = cw {
            for &(x, y, z, w) in cw {
                let vals = voxel_vals.entry((x, y, z)).or_insert_with(|| {
                    let mut out = vec![0.0f64; conv.c_out];
                    conv.at_voxel(ctx, x, y, z, &mut out);
                    out
                });
                for c in 0..conv.c_out {
                    features[(r, c)] += w * vals[c];
                }
            }
        }
    }
    Ok((features, corners))
}

/// Scatter feature gradients through the trilinear weights onto conv-output
/// voxels, then through the convolution onto the kernel.
fn conv_kernel_backward(
    conv: &ConvProjection,
    ctx: &Volume,
    corners: &Corners,
    dfeatures: &Array2<f64>,
    dkernel: &mut Array2<f64>,
) {
    let mut dout: std::collections::HashMap<(usize, usize, usize), Vec<f64>> =
        std::collections::HashMap::new();
    for (r, cw) in corners.iter().enumerate() {
        if let Some(cw) = cw {
            for &(x, y, z, w) in cw {
                let d = dout
                    .entry((x, y, z))
                    .or_insert_with(|| vec![0.0f64; conv.c_out]);
                for c in 0..conv.c_out {
                    d[c] += w * dfeatures[(r, c)];
                }
            }
        }
    }
    let (nx, ny, nz) = ctx.dims;
    // deterministic order for bit-exact reproducibility
    let mut keys: Vec<_> = dout.keys().cloned().collect();
    keys.sort();
    for (x, y, z) in keys {
        let d = &dout[&(x, y, z)];
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
                    let base = ctx.voxel_index(sx as usize, sy as usize, sz as usize);
                    for ci in 0..conv.c_in {
                        let val = ctx.data[base + ci] as f64;
                        if val == 0.0 {
                            continue;
                        }
                        let tap = ConvProjection::tap_index(ci, dz, dy, dx);
                        for (co, &dv) in d.iter().enumerate() {
                            dkernel[(co, tap)] += dv * val;
                        }
                    }
                }
            }
        }
    }
}

/// Total student loss (cosine + lambda * contrastive against the teacher's
/// embeddings at the same positions) without gradients.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    student: &StudentNet,
    teacher: &TeacherNet,
    ctx: &Volume,
    feature_volume: &Volume,
    batch: &TrainingBatch,
    lambda: f64,
    temperature: f64,
    max_negatives: usize,
    neg_seed: u64,
) -> Result<f64> {
    let (features, _) = student_features(&student.conv, ctx, batch)?;
    let cache = run_sequence(
        &student.embedder,
        &student.core,
        &student.decoder,
        features,
        batch,
    )?;
    let mut loss = cosine_loss_grad(&cache.angles, &batch.labels).0;
    if lambda != 0.0 {
        let teacher_features = sample_feature_rows(feature_volume, batch);
        let (teacher_emb, _) = embed(&teacher.embedder, &teacher_features)?;
        let (cl, _) =
            contrastive_loss_grad(&cache.emb, &teacher_emb, temperature, max_negatives, neg_seed)?;
        loss += lambda * cl;
    }
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
pub fn student_loss_and_grads(
    student: &StudentNet,
    teacher: &TeacherNet,
    ctx: &Volume,
    feature_volume: &Volume,
    batch: &TrainingBatch,
    lambda: f64,
    temperature: f64,
    max_negatives: usize,
    neg_seed: u64,
) -> Result<(f64, StudentGrads)> {
    let (features, corners) = student_features(&student.conv, ctx, batch)?;
    let cache = run_sequence(
        &student.embedder,
        &student.core,
        &student.decoder,
        features,
        batch,
    )?;
    let (mut loss, dangles) = cosine_loss_grad(&cache.angles, &batch.labels);

    let demb_extra = if lambda != 0.0 {
        let teacher_features = sample_feature_rows(feature_volume, batch);
        let (teacher_emb, _) = embed(&teacher.embedder, &teacher_features)?;
        let (cl, demb) =
            contrastive_loss_grad(&cache.emb, &teacher_emb, temperature, max_negatives, neg_seed)?;
        loss += lambda * cl;
        Some(demb * lambda)
    } else {
        None
    };

    let g = backward_sequence(
        &student.embedder,
        &student.core,
        &student.decoder,
        &cache,
        batch,
        &dangles,
        demb_extra.as_ref(),
    );
    let mut dconv = Array2::zeros(student.conv.kernel.dim());
    conv_kernel_backward(&student.conv, ctx, &corners, &g.dfeatures, &mut dconv);
    Ok((
        loss,
        StudentGrads {
            conv: dconv,
            embed: g.embed,
        },
    ))
}

// ---------------------------------------------------------------------------
// Flat parameter views (canonical order) and Adam
// ---------------------------------------------------------------------------

fn push2(v: &mut Vec<f64>, a: &Array2<f64>) {
    v.extend(a.iter());
}
fn push1(v: &mut Vec<f64>, a: &Array1<f64>) {
    v.extend(a.iter());
}
fn pull2(it: &mut std::slice::Iter<f64>, a: &mut Array2<f64>) {
    for x in a.iter_mut() {
        *x = *it.next().expect("flat parameter vector too short");
    }
}
fn pull1(it: &mut std::slice::Iter<f64>, a: &mut Array1<f64>) {
    for x in a.iter_mut() {
        *x = *it.next().expect("flat parameter vector too short");
    }
}

fn flatten_embedder(v: &mut Vec<f64>, e: &Embedder) {
    for b in &e.blocks {
        push2(v, &b.linear.w);
        push1(v, &b.linear.b);
        push1(v, &b.bn.gamma);
        push1(v, &b.bn.beta);
    }
}

fn assign_embedder(it: &mut std::slice::Iter<f64>, e: &mut Embedder) {
    for b in &mut e.blocks {
        pull2(it, &mut b.linear.w);
        pull1(it, &mut b.linear.b);
        pull1(it, &mut b.bn.gamma);
        pull1(it, &mut b.bn.beta);
    }
}

fn flatten_embed_grads(v: &mut Vec<f64>, g: &EmbedGrads) {
    for b in &g.blocks {
        push2(v, &b.w);
        push1(v, &b.b);
        push1(v, &b.gamma);
        push1(v, &b.beta);
    }
}

/// Teacher trainable parameters in canonical order: MLP blocks (weight,
/// bias, gamma, beta), GRU layers (w_ih, w_hh, b_ih, b_hh), decoder.
pub fn teacher_flatten(net: &TeacherNet) -> Vec<f64> {
    let mut v = Vec::new();
    flatten_embedder(&mut v, &net.embedder);
    for l in &net.core.layers {
        push2(&mut v, &l.w_ih);
        push2(&mut v, &l.w_hh);
        push1(&mut v, &l.b_ih);
        push1(&mut v, &l.b_hh);
    }
    push2(&mut v, &net.decoder.linear.w);
    push1(&mut v, &net.decoder.linear.b);
    v
}

pub fn teacher_assign(net: &mut TeacherNet, flat: &[f64]) {
    let mut it = flat.iter();
    assign_embedder(&mut it, &mut net.embedder);
    for l in &mut net.core.layers {
        pull2(&mut it, &mut l.w_ih);
        pull2(&mut it, &mut l.w_hh);
        pull1(&mut it, &mut l.b_ih);
        pull1(&mut it, &mut l.b_hh);
    }
    pull2(&mut it, &mut net.decoder.linear.w);
    pull1(&mut it, &mut net.decoder.linear.b);
    assert!(it.next().is_none(), "flat parameter vector too long");
}

pub fn teacher_grads_flatten(g: &TeacherGrads) -> Vec<f64> {
    let mut v = Vec::new();
    flatten_embed_grads(&mut v, &g.embed);
    for l in &g.core {
        push2(&mut v, &l.w_ih);
        push2(&mut v, &l.w_hh);
        push1(&mut v, &l.b_ih);
        push1(&mut v, &l.b_hh);
    }
    push2(&mut v, &g.dec_w);
    push1(&mut v, &g.dec_b);
    v
}

/// Student trainable parameters: conv kernel then embedder. The GRU core and
/// decoder are frozen and never enter the flat vector.
pub fn student_flatten(net: &StudentNet) -> Vec<f64> {
    let mut v = Vec::new();
    push2(&mut v, &net.conv.kernel);
    flatten_embedder(&mut v, &net.embedder);
    v
}

pub fn student_assign(net: &mut StudentNet, flat: &[f64]) {
    let mut it = flat.iter();
    pull2(&mut it, &mut net.conv.kernel);
    assign_embedder(&mut it, &mut net.embedder);
    assert!(it.next().is_none(), "flat parameter vector too long");
}

pub fn student_grads_flatten(g: &StudentGrads) -> Vec<f64> {
    let mut v = Vec::new();
    push2(&mut v, &g.conv);
    flatten_embed_grads(&mut v, &g.embed);
    v
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: self.m.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Early stopping and training loops
// ---------------------------------------------------------------------------

/// Tracks the best validation loss; stops after `patience` epochs without
/// improvement and hands back the best epoch's snapshot.
#[derive(Debug, Clone)]
pub struct EarlyStopper<T> {
    pub patience: usize,
    best: Option<(usize, f64, T)>,
}

impl<T: Clone> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
        }
    }

    /// Record this epoch's validation loss; returns true on improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: &T) -> bool {
        let improved = self.best.as_ref().map(|(_, b, _)| loss < *b).unwrap_or(true);
        if improved {
            self.best = Some((epoch, loss, snapshot.clone()));
        }
        improved
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        match &self.best {
            Some((be, _, _)) => epoch - be >= self.patience,
            None => false,
        }
    }

    pub fn best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult<N> {
    pub net: N,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for p in curve {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", p.epoch, p.train_loss, p.val_loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_finite(loss: f64, epoch: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, value: loss });
    }
    Ok(loss)
}

fn epoch_batch(tracts: &Tractogram, batch_size: usize, seed: u64) -> Result<TrainingBatch> {
    let t = if batch_size < tracts.len() {
        tracts::sample(tracts, batch_size, seed)?
    } else {
        tracts.clone()
    };
    make_batch(&t.streamlines)
}

/// Teacher training: per epoch, one randomly sampled streamline batch per
/// subject (image-level batch size 1), cosine loss, Adam; early stopping on
/// the validation cosine loss; returns the best epoch's weights.
pub fn train_teacher(
    train: &[TeacherSubject],
    val: &[TeacherSubject],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult<TeacherNet>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs at least one training and one validation subject".into(),
        ));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.rng_seed);
    let mut net = TeacherNet::init(arch, &mut rng);
    let mut params = teacher_flatten(&net);
    let mut adam = Adam::new(params.len(), cfg);
    let mut stopper: EarlyStopper<TeacherNet> = EarlyStopper::new(cfg.patience);
    let mut curve = Vec::new();

    let val_batches: Vec<(usize, TrainingBatch)> = val
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, make_batch(&s.tracts.streamlines)?)))
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.max_epochs {
        let mut train_loss = 0.0;
        for subject in train {
            let batch = epoch_batch(&subject.tracts, cfg.batch_size, rng.next_u64())?;
            let (loss, grads) = teacher_loss_and_grads(&net, &subject.features, &batch)?;
            check_finite(loss, epoch)?;
            train_loss += loss;
            adam.step(&mut params, &teacher_grads_flatten(&grads))?;
            teacher_assign(&mut net, &params);
        }
        train_loss /= train.len() as f64;

        let mut val_loss = 0.0;
        for (i, batch) in &val_batches {
            val_loss += check_finite(teacher_loss(&net, &val[*i].features, batch)?, epoch)?;
        }
        val_loss /= val_batches.len() as f64;

        curve.push(CurvePoint {
            epoch,
            train_loss,
            val_loss,
        });
        stopper.observe(epoch, val_loss, &net);
        if stopper.should_stop(epoch) {
            break;
        }
    }

    let (best_epoch, best_val_loss, best_net) = stopper.best().expect("at least one epoch ran");
    Ok(TrainResult {
        net: best_net,
        curve,
        best_epoch,
        best_val_loss,
    })
}

/// Student distillation: cosine loss plus lambda * contrastive loss against
/// the teacher's embeddings. Only the conv projection and student embedder
/// are updated; the shared GRU core and decoder stay bit-frozen. Validation
/// loss is the cosine term alone (comparable with the teacher's).
pub fn train_student(
    train: &[StudentSubject],
    val: &[StudentSubject],
    teacher: &TeacherNet,
    cfg: &TrainConfig,
) -> Result<TrainResult<StudentNet>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs at least one training and one validation subject".into(),
        ));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.rng_seed);
    let mut net = StudentNet::from_teacher(teacher, &mut rng);
    let frozen_core = net.core.clone();
    let frozen_decoder = net.decoder.clone();
    let mut params = student_flatten(&net);
    let mut adam = Adam::new(params.len(), cfg);
    let mut stopper: EarlyStopper<StudentNet> = EarlyStopper::new(cfg.patience);
    let mut curve = Vec::new();

    let val_batches: Vec<(usize, TrainingBatch)> = val
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, make_batch(&s.tracts.streamlines)?)))
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.max_epochs {
        let mut train_loss = 0.0;
        for (si, subject) in train.iter().enumerate() {
            let batch = epoch_batch(&subject.tracts, cfg.batch_size, rng.next_u64())?;
            // negatives drawn from a stream independent of the main rng so a
            // lambda = 0 run follows the identical trajectory
            let neg_seed = cfg
                .rng_seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((epoch * train.len() + si) as u64);
            let (loss, grads) = student_loss_and_grads(
                &net,
                teacher,
                &subject.context,
                &subject.features,
                &batch,
                cfg.lambda_contrastive,
                cfg.temperature,
                cfg.max_negatives,
                neg_seed,
            )?;
            check_finite(loss, epoch)?;
            train_loss += loss;
            adam.step(&mut params, &student_grads_flatten(&grads))?;
            student_assign(&mut net, &params);
        }
        train_loss /= train.len() as f64;

        let mut val_loss = 0.0;
        for (i, batch) in &val_batches {
            let loss = student_loss(
                &net,
                teacher,
                &val[*i].context,
                &val[*i].features,
                batch,
                0.0,
                cfg.temperature,
                cfg.max_negatives,
                0,
            )?;
            val_loss += check_finite(loss, epoch)?;
        }
        val_loss /= val_batches.len() as f64;

        curve.push(CurvePoint {
            epoch,
            train_loss,
            val_loss,
        });
        stopper.observe(epoch, val_loss, &net);
        if stopper.should_stop(epoch) {
            break;
        }
    }

    let (best_epoch, best_val_loss, best_net) = stopper.best().expect("at least one epoch ran");
    debug_assert_eq!(best_net.core, frozen_core);
    debug_assert_eq!(best_net.decoder, frozen_decoder);
    Ok(TrainResult {
        net: best_net,
        curve,
        best_epoch,
        best_val_loss,
    })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Tiny configuration for gradient checking: the architecture dims are taken
/// from `arch`; the scene is a small random volume with 3 random streamlines
/// of 6 points.
pub struct GradCheckScene {
    pub feature_volume: Volume,
    pub context_volume: Volume,
    pub batch: TrainingBatch,
}

pub fn grad_check_scene(arch: &ArchConfig, rng_seed: u64) -> Result<GradCheckScene> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(rng_seed);
    let dims = (10, 8, 8);
    let mut feature_volume = Volume::zeros(dims, arch.c_in, [1.0, 1.0, 1.0]);
    for v in feature_volume.data.iter_mut() {
        *v = rng.uniform(-1.0, 1.0) as f32;
    }
    let mut context_volume = Volume::zeros(dims, arch.context_channels, [1.0, 1.0, 1.0]);
    for v in context_volume.data.iter_mut() {
        *v = rng.uniform(-1.0, 1.0) as f32;
    }
    let mut streamlines = Vec::new();
    for _ in 0..3 {
        let mut p = Point3::new(
            rng.uniform(2.5, 6.5),
            rng.uniform(2.5, 5.5),
            rng.uniform(2.5, 5.5),
        );
        let mut pts = vec![p];
        for _ in 0..5 {
            let d = [rng.next_normal(), rng.next_normal(), rng.next_normal()];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-6);
            p = p.add_scaled(&[d[0] / n, d[1] / n, d[2] / n], 0.8);
            pts.push(p);
        }
        streamlines.push(Streamline::new(pts, 0)?);
    }
    Ok(GradCheckScene {
        feature_volume,
        context_volume,
        batch: make_batch(&streamlines)?,
    })
}

const FD_H: f64 = 1e-5;

fn relative_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5)
}

/// Max relative error between analytic gradients and central finite
/// differences over every trainable parameter, total loss (cosine for the
/// teacher; cosine + contrastive for the student).
pub fn grad_check(arch: &ArchConfig, role: Role, rng_seed: u64) -> Result<f64> {
    grad_check_h(arch, role, rng_seed, FD_H)
}

/// Gradient check with an explicit finite-difference step (exposed so the
/// truncation-error scaling of the oracle itself can be verified).
pub fn grad_check_h(arch: &ArchConfig, role: Role, rng_seed: u64, h: f64) -> Result<f64> {
    let scene = grad_check_scene(arch, rng_seed)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(rng_seed ^ 0xABCD);
    let teacher = TeacherNet::init(arch, &mut rng);
    let mut max_err = 0.0f64;

    match role {
        Role::Teacher => {
            let mut net = teacher;
            let (_, grads) = teacher_loss_and_grads(&net, &scene.feature_volume, &scene.batch)?;
            let analytic = teacher_grads_flatten(&grads);
            let mut params = teacher_flatten(&net);
            for i in 0..params.len() {
                let orig = params[i];
                params[i] = orig + h;
                teacher_assign(&mut net, &params);
                let lp = teacher_loss(&net, &scene.feature_volume, &scene.batch)?;
                params[i] = orig - h;
                teacher_assign(&mut net, &params);
                let lm = teacher_loss(&net, &scene.feature_volume, &scene.batch)?;
                params[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                max_err = max_err.max(relative_error(analytic[i], fd));
            }
            teacher_assign(&mut net, &params);
        }
        Role::Student => {
            let mut net = StudentNet::from_teacher(&teacher, &mut rng);
            let neg_seed = rng_seed ^ 0x5EED;
            let (_, grads) = student_loss_and_grads(
                &net,
                &teacher,
                &scene.context_volume,
                &scene.feature_volume,
                &scene.batch,
                1.0,
                0.1,
                256,
                neg_seed,
            )?;
            let analytic = student_grads_flatten(&grads);
            let mut params = student_flatten(&net);
            for i in 0..params.len() {
                let orig = params[i];
                params[i] = orig + h;
                student_assign(&mut net, &params);
                let lp = student_loss(
                    &net,
                    &teacher,
                    &scene.context_volume,
                    &scene.feature_volume,
                    &scene.batch,
                    1.0,
                    0.1,
                    256,
                    neg_seed,
                )?;
                params[i] = orig - h;
                student_assign(&mut net, &params);
                let lm = student_loss(
                    &net,
                    &teacher,
                    &scene.context_volume,
                    &scene.feature_volume,
                    &scene.batch,
                    1.0,
                    0.1,
                    256,
                    neg_seed,
                )?;
                params[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                max_err = max_err.max(relative_error(analytic[i], fd));
            }
            student_assign(&mut net, &params);
        }
    }
    Ok(max_err)
}
