//! Vector-quantized autoencoder for z-scored time-intensity curves.
//!
//! Encoder: three strided 1-D convolutions (ReLU between blocks, linear last
//! block) followed by adaptive average pooling to `n` latent positions, so
//! any acquisition length maps to an `n × d_enc` latent sequence. Decoder:
//! two nearest-upsample + convolution blocks, linear interpolation to the
//! requested length, and a final linear convolution to one channel.
//!
//! Gradient routing follows the straight-through estimator: the decoder sees
//! the quantized vectors, its gradient is copied onto the encoder output, the
//! codebook term updates only codebook entries and the commitment term
//! updates only the encoder.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::autograd::{
    adaptive_pool_matrix, interpolate_matrix, upsample_matrix, Conv1dShape, Mat, Tape, Var,
};
use crate::error::{Error, Result};
use crate::optim::{sum_grads, Adam, BoundParams, ParamId, ParamSet};
use crate::par;
use crate::seed;
use crate::signal::curves::{MAX_TIMEPOINTS, MIN_TIMEPOINTS};

/// Curves per tape when computing gradients or encodings.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeArch {
    /// Codebook size.
    pub k: usize,
    /// Latent positions per curve.
    pub n: usize,
    pub d_enc: usize,
    /// Widths of the first two encoder blocks (mirrored by the decoder).
    pub hidden: [usize; 2],
    pub kernel: usize,
    /// Commitment weight.
    pub beta: f64,
    /// Accept curves shorter than the clinical range (gradient checks only).
    pub allow_short_curves: bool,
}

impl Default for VqVaeArch {
    fn default() -> Self {
        Self {
            k: 2,
            n: 3,
            d_enc: 256,
            hidden: [32, 64],
            kernel: 5,
            beta: 0.25,
            allow_short_curves: false,
        }
    }
}

impl VqVaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 || self.d_enc < 1 || self.hidden.contains(&0) {
            return Err(Error::param("VQ-VAE sizes must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::param("VQ-VAE kernel must be odd"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::param("commitment weight beta must be positive"));
        }
        Ok(())
    }

    /// Flattened latent length `n · d_enc`.
    pub fn d_flat(&self) -> usize {
        self.n * self.d_enc
    }

    /// Number of distinct composite codes, `k^n`.
    pub fn num_composite_codes(&self) -> usize {
        self.k.pow(self.n as u32)
    }

    pub fn check_length(&self, t: usize) -> Result<()> {
        let lo = if self.allow_short_curves { 2 } else { MIN_TIMEPOINTS };
        if t < lo || t > MAX_TIMEPOINTS {
            return Err(Error::param(format!(
                "curve length {t} outside [{lo}, {MAX_TIMEPOINTS}]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Cap on training curves drawn from the cohort.
    pub max_training_curves: usize,
    /// Seed the codebook with k-means centres of the initial encoder outputs.
    pub kmeans_init: bool,
    /// Re-seed entries left unused for a whole epoch.
    pub restart_dead_codes: bool,
    pub seed: u64,
}

impl Default for VqVaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 3e-3,
            batch_size: 512,
            max_training_curves: 2048,
            kmeans_init: true,
            restart_dead_codes: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ids {
    enc_w: [ParamId; 3],
    enc_b: [ParamId; 3],
    dec_w: [ParamId; 3],
    dec_b: [ParamId; 3],
    codebook: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Mat,
}

impl Codebook {
    pub fn new(entries: Mat) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::param("codebook must be non-empty"));
        }
        Ok(Self { entries })
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d_enc(&self) -> usize {
        self.entries.ncols()
    }

    /// True when no two entries are within `tol` of each other.
    pub fn entries_distinct(&self, tol: f64) -> bool {
        let k = self.k();
        (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let d2: f64 = (&self.entries.row(i) - &self.entries.row(j)).mapv(|x| x * x).sum();
                d2.sqrt() > tol
            })
        })
    }
}

/// Nearest codebook entry per latent row; ties go to the lowest index.
pub fn quantize(codebook: &Codebook, z: &Mat) -> Result<(Vec<usize>, Mat)> {
    if z.ncols() != codebook.d_enc() {
        return Err(Error::param(format!(
            "latent width {} does not match codebook width {}",
            z.ncols(),
            codebook.d_enc()
        )));
    }
    let codes = nearest_codes(&codebook.entries, z);
    let mut q = Mat::zeros(z.dim());
    for (mut r, &c) in q.rows_mut().into_iter().zip(&codes) {
        r.assign(&codebook.entries.row(c));
    }
    Ok((codes, q))
}

fn nearest_codes(entries: &Mat, z: &Mat) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|r| {
            let mut best = (0usize, f64::INFINITY);
            for (j, e) in entries.rows().into_iter().enumerate() {
                let d: f64 = r.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// The three terms of the VQ objective for one curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossTerms {
    /// `‖x − x̂‖₁`
    pub reconstruction: f64,
    /// `Σ_n ‖sg[z_e] − z_q‖²`
    pub codebook: f64,
    /// `β Σ_n ‖z_e − sg[z_q]‖²`
    pub commitment: f64,
}

impl VqLossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

/// Evaluate the VQ objective on plain values.
pub fn vq_loss(beta: f64, x: &[f64], x_hat: &[f64], z_e: &Mat, z_q: &Mat) -> Result<VqLossTerms> {
    if x.len() != x_hat.len() {
        return Err(Error::param("x and x_hat lengths differ"));
    }
    if z_e.dim() != z_q.dim() {
        return Err(Error::param("z_e and z_q shapes differ"));
    }
    let sq: f64 = (z_e - z_q).mapv(|d| d * d).sum();
    Ok(VqLossTerms {
        reconstruction: x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum(),
        codebook: sq,
        commitment: beta * sq,
    })
}

/// Loss terms recorded on a tape, each a `1×1` node summed over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
    pub z_e: Var,
    /// Decoder input: quantized values with straight-through gradient.
    pub z_q: Var,
    pub x_hat: Var,
}

/// Stop-gradient values pinned at a reference point.
///
/// Evaluating the objective with these held fixed defines a smooth surrogate
/// whose true gradient equals the routed (straight-through) gradient at the
/// reference point; finite differences can then check it directly.
#[derive(Clone, Debug)]
pub struct PinnedStopGradients {
    pub codes: Vec<usize>,
    pub z_e: Mat,
    pub z_q: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVae {
    pub arch: VqVaeArch,
    params: ParamSet,
    ids: Ids,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub code_usage: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqTrainLog {
    pub epochs: Vec<EpochLog>,
}

impl VqVae {
    /// Random initialization: He-scaled convolutions, zero biases, codebook
    /// rows drawn from a unit Gaussian scaled by `1/sqrt(d_enc)`.
    pub fn new(arch: VqVaeArch, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed::derive(seed_value, "vqvae-init"));
        let mut params = ParamSet::new();
        let kz = arch.kernel;
        let [h1, h2] = arch.hidden;
        let d = arch.d_enc;
        let mut conv = |ps: &mut ParamSet, name: &str, fan_in: usize, out: usize, gain: f64| {
            let sd = (gain / fan_in as f64).sqrt();
            let n = Normal::new(0.0, sd).expect("positive sd");
            let w = Mat::from_shape_fn((fan_in, out), |_| n.sample(&mut rng));
            let wi = ps.add(format!("{name}.weight"), w);
            let bi = ps.add(format!("{name}.bias"), Mat::zeros((1, out)));
            (wi, bi)
        };
        let e0 = conv(&mut params, "encoder.0", kz, h1, 2.0);
        let e1 = conv(&mut params, "encoder.1", kz * h1, h2, 2.0);
        let e2 = conv(&mut params, "encoder.2", kz * h2, d, 1.0);
        let d0 = conv(&mut params, "decoder.0", kz * d, h2, 2.0);
        let d1 = conv(&mut params, "decoder.1", kz * h2, h1, 2.0);
        let d2 = conv(&mut params, "decoder.out", kz * h1, 1, 1.0);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (d as f64).sqrt();
        let cb = Mat::from_shape_fn((arch.k, d), |_| n.sample(&mut rng) * scale);
        let codebook = params.add("codebook", cb);
        Ok(Self {
            arch,
            params,
            ids: Ids {
                enc_w: [e0.0, e1.0, e2.0],
                enc_b: [e0.1, e1.1, e2.1],
                dec_w: [d0.0, d1.0, d2.0],
                dec_b: [d0.1, d1.1, d2.1],
                codebook,
            },
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.params.get(self.ids.codebook).clone(),
        }
    }

    /// Encoder-only parameter names (for gradient-isolation checks).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with("encoder."))
            .cloned()
            .collect()
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: Var,
        shape: Conv1dShape,
        w: ParamId,
        b: ParamId,
        relu: bool,
    ) -> Var {
        let cols = tape.im2col(input, shape);
        let y = tape.matmul(cols, bound.var(w));
        let y = tape.add_row(y, bound.var(b));
        if relu {
            tape.relu(y)
        } else {
            y
        }
    }

    /// Encoder output `[batch·n, d_enc]` for `batch` stacked curves of length `t`.
    pub fn encode_on_tape(&self, tape: &mut Tape, bound: &BoundParams, x: Var, batch: usize, t: usize) -> Var {
        let k = self.arch.kernel;
        let pad = k / 2;
        let mut len = t;
        let mut h = x;
        let mut channels = 1;
        let widths = [self.arch.hidden[0], self.arch.hidden[1], self.arch.d_enc];
        for i in 0..3 {
            let shape = Conv1dShape {
                batch,
                len_in: len,
                channels,
                kernel: k,
                stride: 2,
                pad,
            };
            h = self.conv_block(tape, bound, h, shape, self.ids.enc_w[i], self.ids.enc_b[i], i < 2);
            len = shape.len_out();
            channels = widths[i];
        }
        tape.resample(h, batch, adaptive_pool_matrix(len, self.arch.n))
    }

    /// Decoder output `[batch·t, 1]` from latents `[batch·n, d_enc]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, bound: &BoundParams, z: Var, batch: usize, t: usize) -> Var {
        let k = self.arch.kernel;
        let pad = k / 2;
        let [h1, h2] = self.arch.hidden;
        let mut len = self.arch.n;
        let mut h = z;
        let mut channels = self.arch.d_enc;
        for (i, out) in [h2, h1].into_iter().enumerate() {
            h = tape.resample(h, batch, upsample_matrix(len, 2));
            len *= 2;
            let shape = Conv1dShape {
                batch,
                len_in: len,
                channels,
                kernel: k,
                stride: 1,
                pad,
            };
            h = self.conv_block(tape, bound, h, shape, self.ids.dec_w[i], self.ids.dec_b[i], true);
            channels = out;
        }
        h = tape.resample(h, batch, interpolate_matrix(len, t));
        let shape = Conv1dShape {
            batch,
            len_in: t,
            channels,
            kernel: k,
            stride: 1,
            pad,
        };
        self.conv_block(tape, bound, h, shape, self.ids.dec_w[2], self.ids.dec_b[2], false)
    }

    fn stack(curves: &[&[f64]]) -> (Mat, usize) {
        let t = curves[0].len();
        let mut x = Mat::zeros((curves.len() * t, 1));
        for (b, c) in curves.iter().enumerate() {
            assert_eq!(c.len(), t, "curves in one batch share a length");
            x.slice_mut(s![b * t..(b + 1) * t, 0]).assign(&ndarray::ArrayView1::from(*c));
        }
        (x, t)
    }

    /// Record the full objective for a same-length batch on `tape`.
    ///
    /// With `pinned`, stop-gradient quantities take the pinned values instead
    /// of being recomputed (see [`PinnedStopGradients`]).
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        curves: &[&[f64]],
        pinned: Option<&PinnedStopGradients>,
    ) -> Result<(LossVars, Vec<usize>)> {
        let (x, t) = Self::stack(curves);
        self.arch.check_length(t)?;
        let batch = curves.len();
        let xv = tape.constant(x);
        let z_e = self.encode_on_tape(tape, bound, xv, batch, t);
        let ze_val = tape.value(z_e).clone();
        let cb_val = self.params.get(self.ids.codebook);
        let (codes, zq_val, ze_sg) = match pinned {
            Some(p) => (p.codes.clone(), p.z_q.clone(), p.z_e.clone()),
            None => {
                let codes = nearest_codes(cb_val, &ze_val);
                let mut q = Mat::zeros(ze_val.dim());
                for (mut r, &c) in q.rows_mut().into_iter().zip(&codes) {
                    r.assign(&cb_val.row(c));
                }
                (codes, q, ze_val.clone())
            }
        };
        // codebook term: ‖sg[z_e] − e_k‖²
        let cb = bound.var(self.ids.codebook);
        let gathered = tape.gather_rows(cb, codes.clone());
        let ze_const = tape.constant(ze_sg.clone());
        let diff_cb = tape.sub(ze_const, gathered);
        let sq_cb = tape.mul(diff_cb, diff_cb);
        let codebook = tape.sum(sq_cb);
        // commitment term: β‖z_e − sg[z_q]‖²
        let zq_const = tape.constant(zq_val.clone());
        let diff_c = tape.sub(z_e, zq_const);
        let sq_c = tape.mul(diff_c, diff_c);
        let sum_c = tape.sum(sq_c);
        let commitment = tape.scale(sum_c, self.arch.beta);
        // straight-through decoder input: value z_e + sg[z_q − z_e]
        let st_value = &ze_val + &(&zq_val - &ze_sg);
        let z_q = tape.straight_through(z_e, st_value);
        let x_hat = self.decode_on_tape(tape, bound, z_q, batch, t);
        let resid = tape.sub(xv, x_hat);
        let abs = tape.abs(resid);
        let reconstruction = tape.sum(abs);
        let s1 = tape.add(reconstruction, codebook);
        let total = tape.add(s1, commitment);
        Ok((
            LossVars {
                reconstruction,
                codebook,
                commitment,
                total,
                z_e,
                z_q,
                x_hat,
            },
            codes,
        ))
    }

    /// Pin the stop-gradient values at the current parameters.
    pub fn pin_stop_gradients(&self, curves: &[&[f64]]) -> Result<PinnedStopGradients> {
        let z = self.encode_batch(curves)?;
        let mut stacked = Mat::zeros((curves.len() * self.arch.n, self.arch.d_enc));
        for (b, zb) in z.iter().enumerate() {
            stacked.slice_mut(s![b * self.arch.n..(b + 1) * self.arch.n, ..]).assign(zb);
        }
        let (codes, z_q) = quantize(&self.codebook(), &stacked)?;
        Ok(PinnedStopGradients {
            codes,
            z_e: stacked,
            z_q,
        })
    }

    /// Total objective (summed over the batch) with pinned stop-gradients.
    pub fn pinned_loss(&self, curves: &[&[f64]], pinned: &PinnedStopGradients) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (vars, _) = self.loss_on_tape(&mut tape, &bound, curves, Some(pinned))?;
        Ok(tape.scalar(vars.total))
    }

    /// Routed gradient of the summed objective for a same-length batch.
    pub fn loss_and_grads(&self, curves: &[&[f64]]) -> Result<(VqLossTerms, Vec<Mat>, Vec<usize>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (vars, codes) = self.loss_on_tape(&mut tape, &bound, curves, None)?;
        let g = tape.backward(vars.total);
        let terms = VqLossTerms {
            reconstruction: tape.scalar(vars.reconstruction),
            codebook: tape.scalar(vars.codebook),
            commitment: tape.scalar(vars.commitment),
        };
        Ok((terms, bound.grads(&g, &self.params), codes))
    }

    /// Latent sequences (`n × d_enc` each) for same-length curves.
    pub fn encode_batch(&self, curves: &[&[f64]]) -> Result<Vec<Mat>> {
        if curves.is_empty() {
            return Ok(Vec::new());
        }
        let (x, t) = Self::stack(curves);
        self.arch.check_length(t)?;
        let mut tape = Tape::new();
        let consts: Vec<Var> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let bound = BoundParams(consts);
        let xv = tape.constant(x);
        let z = self.encode_on_tape(&mut tape, &bound, xv, curves.len(), t);
        let zv = tape.value(z);
        let n = self.arch.n;
        Ok((0..curves.len())
            .map(|b| zv.slice(s![b * n..(b + 1) * n, ..]).to_owned())
            .collect())
    }

    pub fn encode(&self, curve: &[f64]) -> Result<Mat> {
        Ok(self.encode_batch(&[curve])?.remove(0))
    }

    /// Encode curves of arbitrary lengths, batching equal lengths internally.
    /// Output order matches input order.
    pub fn encode_many(&self, curves: &[&[f64]]) -> Result<Vec<Mat>> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in curves.iter().enumerate() {
            by_len.entry(c.len()).or_default().push(i);
        }
        let mut jobs: Vec<Vec<usize>> = Vec::new();
        for idx in by_len.into_values() {
            jobs.extend(idx.chunks(CHUNK).map(<[usize]>::to_vec));
        }
        let encoded = par::try_map(&jobs, |job| {
            let cs: Vec<&[f64]> = job.iter().map(|&i| curves[i]).collect();
            self.encode_batch(&cs)
        })?;
        let mut out: Vec<Option<Mat>> = vec![None; curves.len()];
        for (job, zs) in jobs.iter().zip(encoded) {
            for (&i, z) in job.iter().zip(zs) {
                out[i] = Some(z);
            }
        }
        Ok(out.into_iter().map(|z| z.expect("every curve encoded")).collect())
    }

    /// Composite code sequences for curves of arbitrary lengths.
    pub fn codes_many(&self, curves: &[&[f64]]) -> Result<Vec<Vec<usize>>> {
        let cb = self.codebook();
        self.encode_many(curves)?
            .iter()
            .map(|z| quantize(&cb, z).map(|(c, _)| c))
            .collect()
    }

    /// Reconstruction through the quantizer.
    pub fn reconstruct(&self, curve: &[f64]) -> Result<Vec<f64>> {
        let t = curve.len();
        let z = self.encode(curve)?;
        let (_, q) = quantize(&self.codebook(), &z)?;
        let mut tape = Tape::new();
        let consts: Vec<Var> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let bound = BoundParams(consts);
        let zq = tape.constant(q);
        let out = self.decode_on_tape(&mut tape, &bound, zq, 1, t);
        Ok(tape.value(out).column(0).to_vec())
    }

    /// Mini-batch training with Adam on the routed gradient.
    ///
    /// `curves` should already be z-scored and non-degenerate. Batches are
    /// split by length and into chunks evaluated in parallel; chunk gradients
    /// are reduced in a fixed order so runs are repeatable for a seed.
    pub fn train(&mut self, curves: &[Vec<f64>], cfg: &VqVaeTrainConfig) -> Result<VqTrainLog> {
        if curves.is_empty() {
            return Err(Error::Domain("no training curves".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        for c in curves {
            self.arch.check_length(c.len())?;
        }
        let mut rng = seed::rng(seed::derive(cfg.seed, "vqvae-shuffle"));
        if cfg.kmeans_init {
            let rows = self.latent_rows(curves)?;
            let centres = kmeans(&rows, self.arch.k, 10, &mut rng);
            *self.params.get_mut(self.ids.codebook) = centres;
        }
        let mut opt = Adam::new(&self.params, cfg.lr);
        let mut order: Vec<usize> = (0..curves.len()).collect();
        let mut log = VqTrainLog { epochs: Vec::new() };
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = VqLossTerms::default();
            let mut usage = vec![0usize; self.arch.k];
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &i in batch {
                    by_len.entry(curves[i].len()).or_default().push(i);
                }
                let jobs: Vec<Vec<usize>> = by_len
                    .into_values()
                    .flat_map(|v| v.chunks(CHUNK).map(<[usize]>::to_vec).collect::<Vec<_>>())
                    .collect();
                let results = par::try_map(&jobs, |job| {
                    let cs: Vec<&[f64]> = job.iter().map(|&i| curves[i].as_slice()).collect();
                    self.loss_and_grads(&cs)
                })?;
                let mut terms = VqLossTerms::default();
                let mut grad_parts = Vec::with_capacity(results.len());
                for (t, g, codes) in results {
                    terms.reconstruction += t.reconstruction;
                    terms.codebook += t.codebook;
                    terms.commitment += t.commitment;
                    for c in codes {
                        usage[c] += 1;
                    }
                    grad_parts.push(g);
                }
                let total = terms.total();
                if !total.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        step,
                        reason: "non-finite VQ loss".into(),
                    });
                }
                let inv = 1.0 / batch.len() as f64;
                let mut grads = sum_grads(grad_parts.into_iter()).expect("at least one chunk");
                for g in &mut grads {
                    *g *= inv;
                }
                opt.step(&mut self.params, &grads);
                sums.reconstruction += terms.reconstruction;
                sums.codebook += terms.codebook;
                sums.commitment += terms.commitment;
            }
            let n = curves.len() as f64;
            let entry = EpochLog {
                epoch,
                loss: sums.total() / n,
                reconstruction: sums.reconstruction / n,
                codebook: sums.codebook / n,
                commitment: sums.commitment / n,
                code_usage: usage,
            };
            tracing::debug!(epoch, loss = entry.loss, recon = entry.reconstruction, usage = ?entry.code_usage, "vqvae epoch");
            if cfg.restart_dead_codes && entry.code_usage.contains(&0) {
                self.restart_dead(curves, &entry.code_usage)?;
            }
            log.epochs.push(entry);
        }
        Ok(log)
    }

    fn latent_rows(&self, curves: &[Vec<f64>]) -> Result<Mat> {
        let refs: Vec<&[f64]> = curves.iter().map(Vec::as_slice).collect();
        let z = self.encode_many(&refs)?;
        let views: Vec<_> = z.iter().map(|m| m.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))
    }

    /// Move each unused entry onto the latent row farthest from its current
    /// code; rows are taken in decreasing distance, one per dead entry.
    fn restart_dead(&mut self, curves: &[Vec<f64>], usage: &[usize]) -> Result<()> {
        let rows = self.latent_rows(curves)?;
        let cb = self.params.get(self.ids.codebook).clone();
        let codes = nearest_codes(&cb, &rows);
        let mut dist: Vec<(f64, usize)> = rows
            .rows()
            .into_iter()
            .zip(&codes)
            .enumerate()
            .map(|(i, (r, &c))| ((&r - &cb.row(c)).mapv(|d| d * d).sum(), i))
            .collect();
        dist.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let dead: Vec<usize> = (0..usage.len()).filter(|&j| usage[j] == 0).collect();
        let cbm = self.params.get_mut(self.ids.codebook);
        for (&j, &(_, i)) in dead.iter().zip(&dist) {
            cbm.row_mut(j).assign(&rows.row(i));
        }
        tracing::debug!(?dead, "restarted unused codebook entries");
        Ok(())
    }

    /// Histogram of codebook usage over all latent rows of `curves`.
    pub fn code_usage(&self, curves: &[&[f64]]) -> Result<Vec<usize>> {
        let mut usage = vec![0usize; self.arch.k];
        for seq in self.codes_many(curves)? {
            for c in seq {
                usage[c] += 1;
            }
        }
        Ok(usage)
    }

    pub fn to_archive(&self, meta: serde_json::Value) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "vqvae",
            "arch": self.arch,
            "K": self.arch.k,
            "N": self.arch.n,
            "d_enc": self.arch.d_enc,
            "beta": self.arch.beta,
            "info": meta,
        }));
        for (name, v) in self.params.names().iter().zip(self.params.values()) {
            a.put_mat(name, v);
        }
        a
    }

    pub fn from_archive(a: &Archive, origin: &Path) -> Result<Self> {
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("vqvae") {
            return Err(Error::format(origin, "not a VQ-VAE checkpoint"));
        }
        let arch: VqVaeArch = serde_json::from_value(a.meta["arch"].clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let mut model = Self::new(arch, 0)?;
        for i in 0..model.params.len() {
            let name = model.params.names()[i].clone();
            let m = a.get_mat(&name).map_err(|_| Error::format(origin, format!("missing tensor {name}")))?;
            if m.dim() != model.params.values()[i].dim() {
                return Err(Error::format(origin, format!("tensor {name} has the wrong shape")));
            }
            model.params.values_mut()[i] = m;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_archive(meta).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}

/// k-means++ seeding followed by `iters` Lloyd steps; empty clusters keep
/// their previous centre.
pub fn kmeans(rows: &Mat, k: usize, iters: usize, rng: &mut seed::Rng) -> Mat {
    use rand::Rng;
    let n = rows.nrows();
    let mut centres = Mat::zeros((k, rows.ncols()));
    let d2 = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    centres.row_mut(0).assign(&rows.row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| d2(rows.row(i), centres.row(0))).collect();
    for j in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    pick = i;
                    break;
                }
                u -= b;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.row_mut(j).assign(&rows.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(d2(rows.row(i), centres.row(j)));
        }
    }
    for _ in 0..iters {
        let codes = nearest_codes(&centres, rows);
        let mut sums = Mat::zeros(centres.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in codes.iter().enumerate() {
            let mut r = sums.row_mut(c);
            r += &rows.row(i);
            counts[c] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centres.row_mut(j).assign(&mean);
            }
        }
    }
    centres
}

/// Mean absolute reconstruction error per timepoint.
pub fn mean_reconstruction_l1(model: &VqVae, curves: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for c in curves {
        let r = model.reconstruct(c)?;
        total += c.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += c.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Flatten a latent sequence row-major over `(n, d_enc)`.
pub fn flatten_latents(z: &Mat) -> Vec<f64> {
    z.iter().copied().collect()
}

/// Column means of stacked latents, used for degenerate-voxel placeholders.
pub fn zero_latents(arch: &VqVaeArch) -> Mat {
    Mat::zeros((arch.n, arch.d_enc))
}

#[doc(hidden)]
pub fn mean_rows(m: &Mat) -> Mat {
    m.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn tiny_arch() -> VqVaeArch {
        VqVaeArch {
            k: 3,
            n: 2,
            d_enc: 4,
            hidden: [3, 4],
            kernel: 5,
            beta: 0.25,
            allow_short_curves: true,
        }
    }

    fn random_curves(n: usize, t: usize, seed_v: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_v);
        (0..n).map(|_| (0..t).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::new(array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let (c, q) = quantize(&cb, &array![[0.1, 0.2]]).unwrap();
        assert_eq!(c, vec![0]);
        assert_eq!(q, array![[0.0, 0.0]]);
        let (c, q) = quantize(&cb, &array![[1.0, 1.0]]).unwrap();
        assert_eq!(c, vec![1]);
        assert_eq!(q, array![[1.0, 1.0]]);
        let (c, _) = quantize(&cb, &array![[0.5, 0.5]]).unwrap();
        assert_eq!(c, vec![0], "tie goes to the lowest index");
        assert!(quantize(&cb, &array![[0.5, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let model = VqVae::new(VqVaeArch::default(), 3).unwrap();
        let cb = model.codebook();
        let mut rng = seed::rng(5);
        let z = Mat::from_shape_fn((6, 256), |_| rng.random_range(-1.0..1.0));
        let (c1, q1) = quantize(&cb, &z).unwrap();
        let (c2, q2) = quantize(&cb, &q1).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(q1, q2);
    }

    #[test]
    fn loss_examples() {
        let x = vec![0.5; 50];
        let z = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(vq_loss(0.25, &x, &x, &z, &z).unwrap().total(), 0.0);
        let xh: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!((vq_loss(0.25, &x, &xh, &z, &z).unwrap().total() - 50.0).abs() < 1e-12);
        // z_e − z_q = [[0.5, -1], [0, 2]] → ‖·‖² = 0.25 + 1 + 0 + 4 = 5.25
        let zq = array![[0.5, 3.0], [3.0, 2.0]];
        let terms = vq_loss(0.25, &x, &x, &z, &zq).unwrap();
        assert!((terms.codebook - 5.25).abs() < 1e-12);
        assert!((terms.commitment - 1.3125).abs() < 1e-12);
        assert!((terms.total() - 6.5625).abs() < 1e-12);
        assert!(vq_loss(0.25, &x, &x[..3], &z, &z).is_err());
        assert!(vq_loss(0.25, &x, &x, &z, &array![[1.0]]).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let model = VqVae::new(tiny_arch(), 1).unwrap();
        let curves = random_curves(1, 10, 2);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let (v, _) = model.loss_on_tape(&mut tape, &bound, &refs, None).unwrap();
        let x_hat: Vec<f64> = tape.value(v.x_hat).column(0).to_vec();
        let direct = vq_loss(0.25, &curves[0], &x_hat, tape.value(v.z_e), tape.value(v.z_q)).unwrap();
        assert!((direct.total() - tape.scalar(v.total)).abs() < 1e-10);
    }

    #[test]
    fn encoder_shape_is_length_invariant() {
        let model = VqVae::new(VqVaeArch::default(), 0).unwrap();
        for t in [45, 52, 60] {
            let c = random_curves(1, t, t as u64).remove(0);
            let z = model.encode(&c).unwrap();
            assert_eq!(z.dim(), (3, 256));
            assert!(z.iter().all(|v| v.is_finite()));
            assert_eq!(model.reconstruct(&c).unwrap().len(), t);
        }
        assert!(model.encode(&vec![0.0; 44]).is_err());
        assert!(model.encode(&vec![0.0; 61]).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_batch_independent() {
        let model = VqVae::new(VqVaeArch::default(), 0).unwrap();
        let curves = random_curves(3, 50, 9);
        let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
        let batch = model.encode_batch(&refs).unwrap();
        let single = model.encode(&curves[1]).unwrap();
        assert!((&batch[1] - &single).iter().all(|d| d.abs() < 1e-12));
        assert_eq!(model.encode(&curves[1]).unwrap(), single);
    }

    #[test]
    fn codebook_distinct_after_init() {
        assert!(VqVae::new(VqVaeArch::default(), 0).unwrap().codebook().entries_distinct(1e-8));
        let dup = Codebook::new(array![[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(!dup.entries_distinct(1e-8));
    }

    #[test]
    fn training_is_seeded() {
        let curves = random_curves(40, 12, 4);
        let cfg = VqVaeTrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            max_training_curves: 40,
            seed: 3,
            ..Default::default()
        };
        let mut a = VqVae::new(tiny_arch(), 1).unwrap();
        let mut b = VqVae::new(tiny_arch(), 1).unwrap();
        let la = a.train(&curves, &cfg).unwrap();
        let lb = b.train(&curves, &cfg).unwrap();
        assert_eq!(la.epochs.last().unwrap().loss, lb.epochs.last().unwrap().loss);
        assert_eq!(a, b);
        assert_eq!(la.epochs[0].code_usage.iter().sum::<usize>(), 80);
    }

    #[test]
    fn training_divergence_is_reported() {
        let mut curves = random_curves(4, 12, 4);
        curves[2][3] = f64::NAN;
        let mut m = VqVae::new(tiny_arch(), 1).unwrap();
        let cfg = VqVaeTrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        assert!(matches!(m.train(&curves, &cfg), Err(Error::Training { epoch: 1, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VqVae::new(tiny_arch(), 8).unwrap();
        let a = m.to_archive(json!({"epoch": 0}));
        let back = VqVae::from_archive(&Archive::from_bytes(&a.to_bytes(), Path::new("m")).unwrap(), Path::new("m")).unwrap();
        assert_eq!(m, back);
    }
}
