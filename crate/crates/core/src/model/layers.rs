//! PNA message passing, GraphNorm and the JK-LSTM readout on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mat, Tape, Var};
use crate::optim::{BoundParams, ParamId, ParamSet};
use crate::seed;

pub const NORM_EPS: f64 = 1e-5;

/// Glorot-normal weight plus zero bias.
pub fn linear(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> (ParamId, ParamId) {
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let n = Normal::new(0.0, sd).expect("positive sd");
    let w = ps.add(format!("{name}.weight"), Mat::from_shape_fn((fan_in, fan_out), |_| n.sample(rng)));
    let b = ps.add(format!("{name}.bias"), Mat::zeros((1, fan_out)));
    (w, b)
}

pub fn apply_linear(tape: &mut Tape, p: &BoundParams, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let y = tape.matmul(x, p.var(w));
    tape.add_row(y, p.var(b))
}

/// Inverted dropout drawn from `rng`; identity when `rate == 0`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut seed::Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x);
    let mask = Mat::from_shape_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mul_const(x, mask)
}

/// Edge list in message-passing form: both directions of every undirected edge.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageGraph {
    pub num_nodes: usize,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// One row per directed edge, oriented sender → receiver.
    pub edge_attr: Mat,
}

impl MessageGraph {
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &r in &self.receivers {
            d[r] += 1;
        }
        d
    }
}

/// Degree scalers `(amplification, attenuation)` per node.
pub fn degree_scalers(degrees: &[usize], delta_bar: f64) -> (Vec<f64>, Vec<f64>) {
    degrees
        .iter()
        .map(|&d| {
            let l = ((d + 1) as f64).ln();
            (l / delta_bar, if d == 0 { 0.0 } else { delta_bar / l })
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphNormIds {
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub fn graph_norm_params(ps: &mut ParamSet, name: &str, width: usize) -> GraphNormIds {
    GraphNormIds {
        alpha: ps.add(format!("{name}.alpha"), Mat::ones((1, width))),
        gamma: ps.add(format!("{name}.gamma"), Mat::ones((1, width))),
        beta: ps.add(format!("{name}.beta"), Mat::zeros((1, width))),
    }
}

/// `γ ⊙ (h − α⊙μ) / sqrt(var + ε) + β` with statistics over the graph's nodes.
pub fn graph_norm(tape: &mut Tape, p: &BoundParams, h: Var, ids: GraphNormIds) -> Var {
    let mu = tape.col_mean(h);
    let shift = tape.mul(mu, p.var(ids.alpha));
    let neg = tape.scale(shift, -1.0);
    let centred = tape.add_row(h, neg);
    let sq = tape.mul(centred, centred);
    let var = tape.col_mean(sq);
    let var_eps = tape.add_scalar(var, NORM_EPS);
    let inv = tape.powf(var_eps, -0.5);
    let normed = tape.mul_row(centred, inv);
    let scaled = tape.mul_row(normed, p.var(ids.gamma));
    tape.add_row(scaled, p.var(ids.beta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnaIds {
    pub message: (ParamId, ParamId),
    pub post: (ParamId, ParamId),
    pub norm: GraphNormIds,
}

/// Aggregators × scalers applied to `width + edge_dim` message channels.
pub const AGGREGATORS: usize = 4;
pub const SCALERS: usize = 3;

pub fn pna_params(ps: &mut ParamSet, name: &str, width: usize, edge_dim: usize, rng: &mut seed::Rng) -> PnaIds {
    let message = linear(ps, &format!("{name}.message"), width, width, rng);
    let post = linear(ps, &format!("{name}.post"), (width + edge_dim) * AGGREGATORS * SCALERS, width, rng);
    let norm = graph_norm_params(ps, &format!("{name}.norm"), width);
    PnaIds { message, post, norm }
}

/// One PNA layer: message = `[h_s W + b | e_sr]`, aggregated per receiver as
/// `[mean|std|max|min]`, scaled by identity/amplification/attenuation,
/// projected, residual-added, GraphNorm, ReLU, dropout.
#[allow(clippy::too_many_arguments)]
pub fn pna_layer(
    tape: &mut Tape,
    p: &BoundParams,
    ids: PnaIds,
    h: Var,
    graph: &MessageGraph,
    scalers: &(Vec<f64>, Vec<f64>),
    dropout_rate: f64,
    rng: Option<&mut seed::Rng>,
) -> Var {
    let transformed = apply_linear(tape, p, h, ids.message);
    let sent = tape.gather_rows(transformed, graph.senders.clone());
    let edge = tape.constant(graph.edge_attr.clone());
    let msg = tape.concat_cols(&[sent, edge]);
    let agg = tape.neighbor_aggregate(msg, graph.receivers.clone(), graph.num_nodes);
    let amp = tape.scale_rows(agg, scalers.0.clone());
    let att = tape.scale_rows(agg, scalers.1.clone());
    let all = tape.concat_cols(&[agg, amp, att]);
    let proj = apply_linear(tape, p, all, ids.post);
    let res = tape.add(proj, h);
    let normed = graph_norm(tape, p, res, ids.norm);
    let act = tape.relu(normed);
    match rng {
        Some(r) => dropout(tape, act, dropout_rate, r),
        None => act,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmIds {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

pub fn lstm_params(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut seed::Rng) -> LstmIds {
    let sd = (1.0 / hidden as f64).sqrt();
    let n = Normal::new(0.0, sd).expect("positive sd");
    let wi = ps.add(format!("{name}.input"), Mat::from_shape_fn((input, 4 * hidden), |_| n.sample(rng)));
    let wh = ps.add(format!("{name}.hidden"), Mat::from_shape_fn((hidden, 4 * hidden), |_| n.sample(rng)));
    // Forget-gate bias starts at 1.
    let mut b = Mat::zeros((1, 4 * hidden));
    b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
    let bias = ps.add(format!("{name}.bias"), b);
    LstmIds { input: wi, hidden: wh, bias }
}

/// Final hidden state of a single-layer LSTM run over `sequence` per node.
/// Gate order in the packed weights is `[input | forget | cell | output]`.
pub fn jk_lstm(tape: &mut Tape, p: &BoundParams, ids: LstmIds, sequence: &[Var], hidden: usize) -> Var {
    assert!(!sequence.is_empty(), "JK readout needs at least one layer output");
    let n = tape.shape(sequence[0]).0;
    let mut h = tape.constant(Mat::zeros((n, hidden)));
    let mut c = tape.constant(Mat::zeros((n, hidden)));
    for &x in sequence {
        assert_eq!(tape.shape(x).0, n, "ragged JK sequence");
        let xi = tape.matmul(x, p.var(ids.input));
        let hh = tape.matmul(h, p.var(ids.hidden));
        let pre = tape.add(xi, hh);
        let gates = tape.add_row(pre, p.var(ids.bias));
        let i_pre = tape.slice_cols(gates, 0, hidden);
        let f_pre = tape.slice_cols(gates, hidden, hidden);
        let g_pre = tape.slice_cols(gates, 2 * hidden, hidden);
        let o_pre = tape.slice_cols(gates, 3 * hidden, hidden);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        h = tape.mul(o, tc);
    }
    h
}
