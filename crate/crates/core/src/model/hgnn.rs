//! Fine-to-coarse hierarchical network.
//!
//! fine PNA stack → JK-LSTM → child mean per habitat, concatenated with the
//! habitat descriptor → coarse input projection → coarse PNA stack → JK-LSTM
//! → global mean pool → two-layer MLP.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::autograd::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::graphs::hierarchy::{GraphLevel, HierarchicalGraph};
use crate::model::layers::{
    apply_linear, degree_scalers, dropout, jk_lstm, linear, lstm_params, pna_layer, pna_params, LstmIds,
    MessageGraph, PnaIds,
};
use crate::optim::{BoundParams, ParamId, ParamSet};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub fine_layers: usize,
    pub coarse_layers: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            fine_layers: 3,
            coarse_layers: 3,
            dropout: 0.3,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.fine_layers == 0 || self.coarse_layers == 0 {
            return Err(Error::param("model widths and depths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("need at least two classes"));
        }
        Ok(())
    }
}

/// Input widths the network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub fine_node: usize,
    pub fine_edge: usize,
    pub coarse_node: usize,
    pub coarse_edge: usize,
}

impl InputDims {
    pub fn of(g: &HierarchicalGraph) -> Self {
        Self {
            fine_node: g.channels,
            fine_edge: g.fine.edge_dim(),
            coarse_node: g.n_positions * g.d_enc,
            coarse_edge: g.coarse.edge_dim(),
        }
    }
}

/// Mean of `log(d + 1)` over training nodes, per level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub fine: f64,
    pub coarse: f64,
}

impl DegreeStats {
    pub fn from_graphs(graphs: &[GraphTensors]) -> Result<Self> {
        let mean_log = |f: &dyn Fn(&GraphTensors) -> &MessageGraph| -> f64 {
            let mut s = 0.0;
            let mut n = 0usize;
            for g in graphs {
                for d in f(g).in_degrees() {
                    s += ((d + 1) as f64).ln();
                    n += 1;
                }
            }
            s / n.max(1) as f64
        };
        let stats = Self {
            fine: mean_log(&|g| &g.fine),
            coarse: mean_log(&|g| &g.coarse),
        };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        if !(self.fine > 0.0 && self.coarse > 0.0 && self.fine.is_finite() && self.coarse.is_finite()) {
            return Err(Error::Configuration(format!(
                "degree statistics unusable (fine {}, coarse {}); training graphs need edges at both levels",
                self.fine, self.coarse
            )));
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on training nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a Mat>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut s = vec![0.0; dim];
        let mut s2 = vec![0.0; dim];
        for m in rows {
            for r in m.rows() {
                n += 1;
                for (j, &x) in r.iter().enumerate() {
                    s[j] += x;
                    s2[j] += x * x;
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = s.iter().map(|x| x / n).collect();
        let scale = s2
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.scale[j];
            }
        }
        out
    }
}

/// A hierarchical graph in the dense form the network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors {
    pub fine_x: Mat,
    pub fine: MessageGraph,
    pub coarse_x: Mat,
    pub coarse: MessageGraph,
    /// Coarse parent per fine node.
    pub parent: Vec<usize>,
    pub label: usize,
}

fn message_graph<N>(level: &GraphLevel<N>) -> MessageGraph {
    let e = level.edges.len();
    let mut senders = Vec::with_capacity(2 * e);
    let mut receivers = Vec::with_capacity(2 * e);
    let mut attr = Mat::zeros((2 * e, level.edge_dim()));
    for (i, &(u, v)) in level.edges.iter().enumerate() {
        senders.push(u);
        receivers.push(v);
        attr.row_mut(2 * i).assign(&ndarray::Array1::from(level.directed_feature(i, false)));
        senders.push(v);
        receivers.push(u);
        attr.row_mut(2 * i + 1).assign(&ndarray::Array1::from(level.directed_feature(i, true)));
    }
    MessageGraph {
        num_nodes: level.num_nodes(),
        senders,
        receivers,
        edge_attr: attr,
    }
}

impl GraphTensors {
    pub fn from_graph(g: &HierarchicalGraph) -> Self {
        let fine_x = Mat::from_shape_fn((g.fine.num_nodes(), g.channels), |(i, j)| g.fine.nodes[i].feature[j]);
        let d = g.n_positions * g.d_enc;
        let coarse_x = Mat::from_shape_fn((g.coarse.num_nodes(), d), |(i, j)| g.coarse.nodes[i].feature[j]);
        Self {
            fine_x,
            fine: message_graph(&g.fine),
            coarse_x,
            coarse: message_graph(&g.coarse),
            parent: g.assignment.parent.clone(),
            label: g.label,
        }
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            fine_node: self.fine_x.ncols(),
            fine_edge: self.fine.edge_attr.ncols(),
            coarse_node: self.coarse_x.ncols(),
            coarse_edge: self.coarse.edge_attr.ncols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    fine_in: (ParamId, ParamId),
    fine_layers: Vec<PnaIds>,
    fine_jk: LstmIds,
    coarse_in: (ParamId, ParamId),
    coarse_layers: Vec<PnaIds>,
    coarse_jk: LstmIds,
    head_hidden: (ParamId, ParamId),
    head_out: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from this seed.
    Train(u64),
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `1 × num_classes`.
    pub logits: Var,
    /// Coarse enriched input `[descriptor | child mean]`, one row per habitat.
    pub enriched: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hgnn {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub degree: Option<DegreeStats>,
    pub fine_scaler: Standardizer,
    pub coarse_scaler: Standardizer,
    params: ParamSet,
    ids: Ids,
}

impl Hgnn {
    pub fn new(config: ModelConfig, dims: InputDims, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed_value, "hgnn-init"));
        let h = config.hidden;
        let mut ps = ParamSet::new();
        let fine_in = linear(&mut ps, "fine.input", dims.fine_node, h, &mut rng);
        let fine_layers = (0..config.fine_layers)
            .map(|l| pna_params(&mut ps, &format!("fine.pna{l}"), h, dims.fine_edge, &mut rng))
            .collect();
        let fine_jk = lstm_params(&mut ps, "fine.jk", h, h, &mut rng);
        let coarse_in = linear(&mut ps, "coarse.input", dims.coarse_node + h, h, &mut rng);
        let coarse_layers = (0..config.coarse_layers)
            .map(|l| pna_params(&mut ps, &format!("coarse.pna{l}"), h, dims.coarse_edge, &mut rng))
            .collect();
        let coarse_jk = lstm_params(&mut ps, "coarse.jk", h, h, &mut rng);
        let head_hidden = linear(&mut ps, "head.hidden", h, h, &mut rng);
        let head_out = linear(&mut ps, "head.out", h, config.num_classes, &mut rng);
        Ok(Self {
            config,
            dims,
            degree: None,
            fine_scaler: Standardizer::identity(dims.fine_node),
            coarse_scaler: Standardizer::identity(dims.coarse_node),
            params: ps,
            ids: Ids {
                fine_in,
                fine_layers,
                fine_jk,
                coarse_in,
                coarse_layers,
                coarse_jk,
                head_hidden,
                head_out,
            },
        })
    }

    /// Fit degree statistics and input standardization on training graphs.
    pub fn fit_statistics(&mut self, train: &[GraphTensors]) -> Result<()> {
        self.degree = Some(DegreeStats::from_graphs(train)?);
        self.fine_scaler = Standardizer::fit(train.iter().map(|g| &g.fine_x), self.dims.fine_node);
        self.coarse_scaler = Standardizer::fit(train.iter().map(|g| &g.coarse_x), self.dims.coarse_node);
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zero the output layer (all logits become the bias, gradients vanish).
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.ids.head_out.0).fill(0.0);
    }

    fn check_dims(&self, g: &GraphTensors) -> Result<()> {
        let got = g.dims();
        let checks = [
            ("fine.input", got.fine_node, self.dims.fine_node),
            ("fine.pna edge features", got.fine_edge, self.dims.fine_edge),
            ("coarse.input", got.coarse_node, self.dims.coarse_node),
            ("coarse.pna edge features", got.coarse_edge, self.dims.coarse_edge),
        ];
        for (layer, a, b) in checks {
            if a != b {
                return Err(Error::Configuration(format!("{layer}: graph provides width {a}, model expects {b}")));
            }
        }
        if g.parent.len() != g.fine_x.nrows() || g.parent.iter().any(|&p| p >= g.coarse_x.nrows()) {
            return Err(Error::Consistency("assignment references a missing coarse node".into()));
        }
        if g.fine_x.nrows() == 0 || g.coarse_x.nrows() == 0 {
            return Err(Error::Consistency("graph has an empty level".into()));
        }
        Ok(())
    }

    fn degree_stats(&self) -> Result<DegreeStats> {
        let d = self
            .degree
            .ok_or_else(|| Error::Configuration("degree statistics not fitted; call fit_statistics on training graphs".into()))?;
        d.check()?;
        Ok(d)
    }

    fn stack(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        mut h: Var,
        layers: &[PnaIds],
        jk: LstmIds,
        graph: &MessageGraph,
        delta_bar: f64,
        rng: &mut Option<seed::Rng>,
    ) -> Var {
        let scalers = degree_scalers(&graph.in_degrees(), delta_bar);
        let mut outs = Vec::with_capacity(layers.len());
        for &ids in layers {
            h = pna_layer(tape, p, ids, h, graph, &scalers, self.config.dropout, rng.as_mut());
            outs.push(h);
        }
        jk_lstm(tape, p, jk, &outs, self.config.hidden)
    }

    /// Fine stack up to the enriched coarse input.
    pub fn enriched_on_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        g: &GraphTensors,
        rng: &mut Option<seed::Rng>,
    ) -> Result<Var> {
        self.check_dims(g)?;
        let deg = self.degree_stats()?;
        let fx = tape.constant(self.fine_scaler.apply(&g.fine_x));
        let h0 = apply_linear(tape, p, fx, self.ids.fine_in);
        let fine_out = self.stack(tape, p, h0, &self.ids.fine_layers, self.ids.fine_jk, &g.fine, deg.fine, rng);
        let pooled = tape.segment_mean(fine_out, g.parent.clone(), g.coarse_x.nrows());
        let cx = tape.constant(self.coarse_scaler.apply(&g.coarse_x));
        Ok(tape.concat_cols(&[cx, pooled]))
    }

    /// Coarse stack and head from an enriched input.
    pub fn logits_from_enriched(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        g: &GraphTensors,
        enriched: Var,
        rng: &mut Option<seed::Rng>,
    ) -> Result<Var> {
        let deg = self.degree_stats()?;
        let expect = self.dims.coarse_node + self.config.hidden;
        if tape.shape(enriched).1 != expect {
            return Err(Error::Configuration(format!(
                "coarse.input: enriched width {} differs from {expect}",
                tape.shape(enriched).1
            )));
        }
        let c0 = apply_linear(tape, p, enriched, self.ids.coarse_in);
        let coarse_out = self.stack(tape, p, c0, &self.ids.coarse_layers, self.ids.coarse_jk, &g.coarse, deg.coarse, rng);
        let pooled = tape.col_mean(coarse_out);
        let hid = apply_linear(tape, p, pooled, self.ids.head_hidden);
        let hid = tape.relu(hid);
        let hid = match rng.as_mut() {
            Some(r) => dropout(tape, hid, self.config.dropout, r),
            None => hid,
        };
        Ok(apply_linear(tape, p, hid, self.ids.head_out))
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, p: &BoundParams, g: &GraphTensors, mode: Mode) -> Result<ForwardVars> {
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(s) => Some(seed::rng(s)),
        };
        let enriched = self.enriched_on_tape(tape, p, g, &mut rng)?;
        let logits = self.logits_from_enriched(tape, p, g, enriched, &mut rng)?;
        Ok(ForwardVars { logits, enriched })
    }

    /// Tape whose parameters are constants (inference only).
    fn frozen_tape(&self) -> (Tape, BoundParams) {
        let mut tape = Tape::new();
        let vars = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        (tape, BoundParams(vars))
    }

    pub fn logits(&self, g: &GraphTensors) -> Result<Vec<f64>> {
        let (mut tape, p) = self.frozen_tape();
        let f = self.forward_on_tape(&mut tape, &p, g, Mode::Eval)?;
        let out = tape.value(f.logits).row(0).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("non-finite logits".into()));
        }
        Ok(out)
    }

    /// Logits when the enriched coarse input is replaced by `enriched`.
    pub fn logits_with_enriched(&self, g: &GraphTensors, enriched: &Mat) -> Result<Vec<f64>> {
        self.check_dims(g)?;
        let (mut tape, p) = self.frozen_tape();
        let e = tape.constant(enriched.clone());
        let l = self.logits_from_enriched(&mut tape, &p, g, e, &mut None)?;
        Ok(tape.value(l).row(0).to_vec())
    }

    /// Enriched coarse input in eval mode.
    pub fn enriched(&self, g: &GraphTensors) -> Result<Mat> {
        let (mut tape, p) = self.frozen_tape();
        let e = self.enriched_on_tape(&mut tape, &p, g, &mut None)?;
        Ok(tape.value(e).clone())
    }

    /// Parameter gradient of `cotangent · logits` (eval mode).
    pub fn logits_vjp(&self, g: &GraphTensors, cotangent: &[f64]) -> Result<Vec<Mat>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let f = self.forward_on_tape(&mut tape, &p, g, Mode::Eval)?;
        let seed = Mat::from_shape_vec((1, cotangent.len()), cotangent.to_vec())
            .map_err(|e| Error::param(e.to_string()))?;
        let grads = tape.backward_with(f.logits, seed);
        Ok(p.grads(&grads, &self.params))
    }

    /// Gradient of one logit with respect to the enriched coarse input (eval mode).
    pub fn enriched_gradient(&self, g: &GraphTensors, class: usize) -> Result<(Mat, Mat)> {
        if class >= self.config.num_classes {
            return Err(Error::param(format!("target class {class} out of range")));
        }
        let (mut tape, p) = self.frozen_tape();
        let e = self.enriched_on_tape(&mut tape, &p, g, &mut None)?;
        let value = tape.value(e).clone();
        let probe = tape.input(value.clone());
        let l = self.logits_from_enriched(&mut tape, &p, g, probe, &mut None)?;
        let mut seed = Mat::zeros((1, self.config.num_classes));
        seed[[0, class]] = 1.0;
        let mut grads: Gradients = tape.backward_with(l, seed);
        let shape = value.dim();
        Ok((grads.take(probe).unwrap_or_else(|| Mat::zeros(shape)), value))
    }

    pub fn to_archive(&self, meta: Value) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "hgnn",
            "config": self.config,
            "dims": self.dims,
            "degree": self.degree,
            "fine_scaler": self.fine_scaler,
            "coarse_scaler": self.coarse_scaler,
            "info": meta,
        }));
        for (name, v) in self.params.names().iter().zip(self.params.values()) {
            a.put_mat(name, v);
        }
        a
    }

    pub fn from_archive(a: &Archive, origin: &Path) -> Result<Self> {
        let bad = |r: String| Error::format(origin, r);
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("hgnn") {
            return Err(bad("not an HGNN checkpoint".into()));
        }
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let config: ModelConfig = serde_json::from_value(field("config")?).map_err(|e| bad(e.to_string()))?;
        let dims: InputDims = serde_json::from_value(field("dims")?).map_err(|e| bad(e.to_string()))?;
        let mut m = Self::new(config, dims, 0)?;
        m.degree = serde_json::from_value(field("degree")?).map_err(|e| bad(e.to_string()))?;
        m.fine_scaler = serde_json::from_value(field("fine_scaler")?).map_err(|e| bad(e.to_string()))?;
        m.coarse_scaler = serde_json::from_value(field("coarse_scaler")?).map_err(|e| bad(e.to_string()))?;
        for i in 0..m.params.len() {
            let name = m.params.names()[i].clone();
            let t = a.get_mat(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
            if t.dim() != m.params.values()[i].dim() {
                return Err(bad(format!("tensor {name} has the wrong shape")));
            }
            m.params.values_mut()[i] = t;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        self.to_archive(meta).write(path)
    }

    /// Load a checkpoint, refusing one trained on graphs with another config hash.
    pub fn load(path: &Path, graph_hash: &str) -> Result<(Self, Value)> {
        let a = Archive::read(path)?;
        let found = a.meta["info"]["graph_config_hash"].as_str().unwrap_or("").to_string();
        if found != graph_hash {
            return Err(Error::StaleCache {
                path: path.to_path_buf(),
                found,
                expected: graph_hash.to_string(),
            });
        }
        let info = a.meta["info"].clone();
        Ok((Self::from_archive(&a, path)?, info))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_graph(nf: usize, nc: usize, ef: usize, ec: usize, rng: &mut seed::Rng) -> GraphTensors {
        let dims = (3usize, 4usize, 5usize, 4usize);
        let level = |n: usize, e: usize, fdim: usize, rng: &mut seed::Rng| {
            let mut s = Vec::new();
            let mut r = Vec::new();
            let mut pairs = std::collections::BTreeSet::new();
            while pairs.len() < e.min(n * (n - 1) / 2) {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
            for (a, b) in pairs {
                s.extend([a, b]);
                r.extend([b, a]);
            }
            let attr = Mat::from_shape_fn((s.len(), fdim), |_| rng.random_range(-1.0..1.0));
            MessageGraph {
                num_nodes: n,
                senders: s,
                receivers: r,
                edge_attr: attr,
            }
        };
        let mut parent: Vec<usize> = (0..nf).map(|i| i % nc).collect();
        parent.rotate_left(1);
        GraphTensors {
            fine_x: Mat::from_shape_fn((nf, dims.0), |_| rng.random_range(-1.0..1.0)),
            fine: level(nf, ef, dims.1, rng),
            coarse_x: Mat::from_shape_fn((nc, dims.2), |_| rng.random_range(-1.0..1.0)),
            coarse: level(nc, ec, dims.3, rng),
            parent,
            label: 0,
        }
    }

    pub(crate) fn tiny_model() -> Hgnn {
        let cfg = ModelConfig {
            hidden: 8,
            ..Default::default()
        };
        let dims = InputDims {
            fine_node: 3,
            fine_edge: 4,
            coarse_node: 5,
            coarse_edge: 4,
        };
        let mut m = Hgnn::new(cfg, dims, 1).unwrap();
        m.degree = Some(DegreeStats { fine: 0.9, coarse: 0.8 });
        m
    }

    #[test]
    fn minimal_graph_gives_finite_logits() {
        let m = tiny_model();
        let mut rng = seed::rng(1);
        let g = random_graph(1, 1, 0, 0, &mut rng);
        assert!(m.logits(&g).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_degree_stats_is_a_configuration_error() {
        let mut m = tiny_model();
        m.degree = None;
        let g = random_graph(4, 2, 3, 1, &mut seed::rng(2));
        assert!(matches!(m.logits(&g), Err(Error::Configuration(_))));
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let m = tiny_model();
        let mut g = random_graph(4, 2, 3, 1, &mut seed::rng(2));
        g.fine_x = Mat::zeros((4, 7));
        match m.logits(&g) {
            Err(Error::Configuration(msg)) => assert!(msg.contains("fine.input")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eval_is_bitwise_repeatable_and_train_is_seeded() {
        let m = tiny_model();
        let g = random_graph(6, 3, 8, 2, &mut seed::rng(3));
        assert_eq!(m.logits(&g).unwrap(), m.logits(&g).unwrap());
        let run = |s| {
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape);
            let f = m.forward_on_tape(&mut tape, &p, &g, Mode::Train(s)).unwrap();
            tape.value(f.logits).clone()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = tiny_model();
        let g = random_graph(8, 3, 12, 3, &mut seed::rng(4));
        let grads = m.logits_vjp(&g, &[1.0, -0.5]).unwrap();
        for (name, gr) in m.params().names().iter().zip(&grads) {
            assert!(gr.iter().any(|&x| x != 0.0), "dead parameter {name}");
        }
    }

    #[test]
    fn zero_head_gives_zero_enriched_gradient() {
        let mut m = tiny_model();
        m.zero_head();
        let g = random_graph(5, 2, 4, 1, &mut seed::rng(6));
        let (grad, _) = m.enriched_gradient(&g, 1).unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
        assert!(m.enriched_gradient(&g, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model();
        let a = m.to_archive(json!({"graph_config_hash": "h"}));
        let b = Hgnn::from_archive(&Archive::from_bytes(&a.to_bytes(), Path::new("x")).unwrap(), Path::new("x")).unwrap();
        assert_eq!(m, b);
    }
}
