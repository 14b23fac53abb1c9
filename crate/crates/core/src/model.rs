//! Graph-network feasibility models with exact reverse-mode gradients.
//!
//! A plan maps to a graph with one node per placement. `Tgn` connectivity
//! sends an edge from every earlier placement to every later one, mirroring
//! the subtower structure of the stability computation; `Fcgn` connects all
//! ordered pairs. One round of message passing runs over the graph:
//!
//! 1. node encoder `F -> H` (tanh),
//! 2. edge network on concatenated sender/receiver embeddings `2H -> H`
//!    (tanh), messages summed at the receiver,
//! 3. node update on [embedding, aggregate] `2H -> H` (tanh),
//! 4. linear per-node readout `H -> 1`.
//!
//! Per-node probabilities are sigmoids of the readout logits; whole-plan
//! probability is, by default, the sigmoid of the mean logit. Parameters are
//! tied across nodes and edges, so one parameter vector serves any plan
//! length.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::domain::{rotate_plan, LabeledPlan, Plan, Rotation};

/// Width of one node's feature vector: rotated dims (3), rotated COM offset
/// (3), mass (1), planar offset (2), yaw one-hot (4).
pub const FEATURE_DIM: usize = 13;

/// Probabilities are clamped to this range before the log in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Graph connectivity variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Edge (j -> i) for every j < i.
    Tgn,
    /// Edges between every ordered pair.
    Fcgn,
}

impl Arch {
    /// Directed (sender, receiver) pairs for an `n`-node graph, in a fixed
    /// deterministic order.
    pub fn edges(self, n: usize) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.edge_count(n));
        for recv in 0..n {
            for send in 0..n {
                let keep = match self {
                    Arch::Tgn => send < recv,
                    Arch::Fcgn => send != recv,
                };
                if keep {
                    edges.push((send, recv));
                }
            }
        }
        edges
    }

    pub fn edge_count(self, n: usize) -> usize {
        match self {
            Arch::Tgn => n * (n - 1) / 2,
            Arch::Fcgn => n * (n - 1),
        }
    }
}

/// Which quantity a model predicts and is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    /// Whole-plan feasibility read from the plan-level output.
    Comp,
    /// Per-step feasibility; plan feasibility is the product over steps.
    Ss,
}

/// Readout used for the per-step probability of a prefix graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsReadout {
    /// Probability of the last node — the placement being judged.
    LastNode,
    /// Mean of the per-node probabilities.
    MeanNodes,
}

/// Readout used for the whole-plan probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanReadout {
    /// Sigmoid of the mean per-node logit.
    MeanLogits,
    /// Mean of the per-node probabilities.
    MeanProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden width H.
    pub hidden: usize,
    /// Lengths (dims, COM, offsets) are divided by this before encoding.
    pub length_scale: f64,
    pub ss_readout: SsReadout,
    pub plan_readout: PlanReadout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Tgn,
            hidden: 64,
            length_scale: 0.15,
            ss_readout: SsReadout::LastNode,
            plan_readout: PlanReadout::MeanLogits,
        }
    }
}

/// One member's parameters, stored flat so the optimizer, finite-difference
/// checks, and serialization all see a single vector. Section order:
/// encoder weights/bias, edge weights/bias, update weights/bias, readout
/// weights/bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub hidden: usize,
    pub data: Vec<f64>,
}

struct Layout {
    h: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        Layout { h }
    }
    fn enc_w(&self) -> std::ops::Range<usize> {
        0..self.h * FEATURE_DIM
    }
    fn enc_b(&self) -> std::ops::Range<usize> {
        let s = self.enc_w().end;
        s..s + self.h
    }
    fn edge_w(&self) -> std::ops::Range<usize> {
        let s = self.enc_b().end;
        s..s + self.h * 2 * self.h
    }
    fn edge_b(&self) -> std::ops::Range<usize> {
        let s = self.edge_w().end;
        s..s + self.h
    }
    fn upd_w(&self) -> std::ops::Range<usize> {
        let s = self.edge_b().end;
        s..s + self.h * 2 * self.h
    }
    fn upd_b(&self) -> std::ops::Range<usize> {
        let s = self.upd_w().end;
        s..s + self.h
    }
    fn read_w(&self) -> std::ops::Range<usize> {
        let s = self.upd_b().end;
        s..s + self.h
    }
    fn read_b(&self) -> usize {
        self.read_w().end
    }
    fn total(&self) -> usize {
        self.read_b() + 1
    }
}

impl GnnParams {
    /// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`), zero biases.
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        let layout = Layout::new(hidden);
        let mut data = vec![0.0; layout.total()];
        let mut fill =
            |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, data: &mut [f64]| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut data[range] {
                    *v = rng.gen_range(-bound..bound);
                }
            };
        fill(layout.enc_w(), FEATURE_DIM, hidden, &mut data);
        fill(layout.edge_w(), 2 * hidden, hidden, &mut data);
        fill(layout.upd_w(), 2 * hidden, hidden, &mut data);
        fill(layout.read_w(), hidden, 1, &mut data);
        GnnParams { hidden, data }
    }

    pub fn zeros(hidden: usize) -> Self {
        GnnParams { hidden, data: vec![0.0; Layout::new(hidden).total()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at minimum the readout bias exists
    }

    fn layout(&self) -> Layout {
        Layout::new(self.hidden)
    }

    fn enc_w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, FEATURE_DIM), &self.data[self.layout().enc_w()])
            .unwrap()
    }
    fn enc_b(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[self.layout().enc_b()])
    }
    fn edge_w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, 2 * self.hidden), &self.data[self.layout().edge_w()])
            .unwrap()
    }
    fn edge_b(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[self.layout().edge_b()])
    }
    fn upd_w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, 2 * self.hidden), &self.data[self.layout().upd_w()])
            .unwrap()
    }
    fn upd_b(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[self.layout().upd_b()])
    }
    fn read_w(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[self.layout().read_w()])
    }
    fn read_b(&self) -> f64 {
        self.data[self.layout().read_b()]
    }
}

/// Mutable section views over a flat gradient vector.
struct GradViews<'a> {
    enc_w: ArrayViewMut2<'a, f64>,
    enc_b: ArrayViewMut1<'a, f64>,
    edge_w: ArrayViewMut2<'a, f64>,
    edge_b: ArrayViewMut1<'a, f64>,
    upd_w: ArrayViewMut2<'a, f64>,
    upd_b: ArrayViewMut1<'a, f64>,
    read_w: ArrayViewMut1<'a, f64>,
    read_b: &'a mut f64,
}

fn grad_views(hidden: usize, grad: &mut [f64]) -> GradViews<'_> {
    let layout = Layout::new(hidden);
    let (enc_w, rest) = grad.split_at_mut(layout.enc_w().end);
    let (enc_b, rest) = rest.split_at_mut(hidden);
    let (edge_w, rest) = rest.split_at_mut(hidden * 2 * hidden);
    let (edge_b, rest) = rest.split_at_mut(hidden);
    let (upd_w, rest) = rest.split_at_mut(hidden * 2 * hidden);
    let (upd_b, rest) = rest.split_at_mut(hidden);
    let (read_w, rest) = rest.split_at_mut(hidden);
    GradViews {
        enc_w: ArrayViewMut2::from_shape((hidden, FEATURE_DIM), enc_w).unwrap(),
        enc_b: ArrayViewMut1::from(enc_b),
        edge_w: ArrayViewMut2::from_shape((hidden, 2 * hidden), edge_w).unwrap(),
        edge_b: ArrayViewMut1::from(edge_b),
        upd_w: ArrayViewMut2::from_shape((hidden, 2 * hidden), upd_w).unwrap(),
        upd_b: ArrayViewMut1::from(upd_b),
        read_w: ArrayViewMut1::from(read_w),
        read_b: &mut rest[0],
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Encode a plan as one feature row per action. Dims and COM offsets are
/// rotated into the placement frame first, so yaw reaches the network only
/// through the one-hot.
pub fn encode(cfg: &ModelConfig, plan: &Plan) -> Array2<f64> {
    let s = cfg.length_scale;
    let n = plan.len();
    let mut feats = Array2::zeros((n, FEATURE_DIM));
    for (i, action) in plan.actions().iter().enumerate() {
        let b = &action.block;
        let rot = action.rel_pose.rot_z;
        let (wx, wy) =
            if rot.swaps_axes() { (b.dims[1], b.dims[0]) } else { (b.dims[0], b.dims[1]) };
        let (cx, cy) = rot.rotate_xy(b.com_offset[0], b.com_offset[1]);
        let row = [
            wx / s,
            wy / s,
            b.dims[2] / s,
            cx / s,
            cy / s,
            b.com_offset[2] / s,
            b.mass,
            action.rel_pose.dx / s,
            action.rel_pose.dy / s,
        ];
        for (j, v) in row.into_iter().enumerate() {
            feats[[i, j]] = v;
        }
        feats[[i, 9 + rot.index()]] = 1.0;
    }
    feats
}

/// A plan pre-encoded for a given connectivity.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub feats: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl Encoded {
    pub fn new(cfg: &ModelConfig, plan: &Plan) -> Self {
        Encoded { feats: encode(cfg, plan), edges: cfg.arch.edges(plan.len()) }
    }
}

/// Activations kept from the forward pass for backpropagation.
struct Trace {
    e: Array2<f64>,
    edge_in: Array2<f64>,
    msgs: Array2<f64>,
    agg: Array2<f64>,
    u: Array2<f64>,
    logits: Vec<f64>,
}

fn forward_trace(params: &GnnParams, feats: ArrayView2<'_, f64>, edges: &[(usize, usize)]) -> Trace {
    let h = params.hidden;
    let n = feats.nrows();

    let mut e = feats.dot(&params.enc_w().t());
    e += &params.enc_b();
    e.mapv_inplace(f64::tanh);

    let mut edge_in = Array2::zeros((edges.len(), 2 * h));
    for (k, &(s, r)) in edges.iter().enumerate() {
        edge_in.slice_mut(ndarray::s![k, ..h]).assign(&e.row(s));
        edge_in.slice_mut(ndarray::s![k, h..]).assign(&e.row(r));
    }
    let mut msgs = edge_in.dot(&params.edge_w().t());
    msgs += &params.edge_b();
    msgs.mapv_inplace(f64::tanh);

    let mut agg = Array2::zeros((n, h));
    for (k, &(_, r)) in edges.iter().enumerate() {
        let mut row = agg.row_mut(r);
        row += &msgs.row(k);
    }

    let mut upd_in = Array2::zeros((n, 2 * h));
    upd_in.slice_mut(ndarray::s![.., ..h]).assign(&e);
    upd_in.slice_mut(ndarray::s![.., h..]).assign(&agg);
    let mut u = upd_in.dot(&params.upd_w().t());
    u += &params.upd_b();
    u.mapv_inplace(f64::tanh);

    let logits = u
        .rows()
        .into_iter()
        .map(|row| row.dot(&params.read_w()) + params.read_b())
        .collect();

    Trace { e, edge_in, msgs, agg, u, logits }
}

/// Per-node probabilities and whole-plan probability for one member.
#[derive(Debug, Clone)]
pub struct Forward {
    pub per_node_probs: Vec<f64>,
    pub plan_prob: f64,
}

pub fn forward(params: &GnnParams, cfg: &ModelConfig, plan: &Plan) -> Forward {
    let encoded = Encoded::new(cfg, plan);
    forward_encoded(params, cfg, encoded.feats.view(), &encoded.edges)
}

fn forward_encoded(
    params: &GnnParams,
    cfg: &ModelConfig,
    feats: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
) -> Forward {
    let trace = forward_trace(params, feats, edges);
    let per_node_probs: Vec<f64> = trace.logits.iter().map(|&z| sigmoid(z)).collect();
    let plan_prob = match cfg.plan_readout {
        PlanReadout::MeanLogits => {
            sigmoid(trace.logits.iter().sum::<f64>() / trace.logits.len() as f64)
        }
        PlanReadout::MeanProbs => per_node_probs.iter().sum::<f64>() / per_node_probs.len() as f64,
    };
    Forward { per_node_probs, plan_prob }
}

/// An ensemble of independently initialized and trained members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub config: ModelConfig,
    pub members: Vec<GnnParams>,
}

impl Ensemble {
    /// Fresh ensemble; member i is seeded with `seed + i`.
    pub fn init(config: ModelConfig, size: usize, seed: u64) -> Self {
        assert!(size >= 1, "ensemble needs at least one member");
        let members = (0..size)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                GnnParams::init(config.hidden, &mut rng)
            })
            .collect();
        Ensemble { config, members }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Ensemble-mean whole-plan feasibility.
pub fn predict_comp(ens: &Ensemble, plan: &Plan) -> f64 {
    member_plan_probs(ens, plan).iter().sum::<f64>() / ens.members.len() as f64
}

/// Each member's whole-plan probability, in member order.
pub fn member_plan_probs(ens: &Ensemble, plan: &Plan) -> Vec<f64> {
    let encoded = Encoded::new(&ens.config, plan);
    ens.members
        .iter()
        .map(|m| forward_encoded(m, &ens.config, encoded.feats.view(), &encoded.edges).plan_prob)
        .collect()
}

fn member_step_prob(
    params: &GnnParams,
    cfg: &ModelConfig,
    feats: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
) -> f64 {
    let out = forward_encoded(params, cfg, feats, edges);
    match cfg.ss_readout {
        SsReadout::LastNode => *out.per_node_probs.last().unwrap(),
        SsReadout::MeanNodes => {
            out.per_node_probs.iter().sum::<f64>() / out.per_node_probs.len() as f64
        }
    }
}

/// Per-member step probabilities for every prefix of the plan. Row = member,
/// column i = probability that step i+1 succeeds given all earlier steps
/// did; column 0 is exactly 1. Prefix graphs reuse the full encoding: a
/// prefix's features are the leading rows.
pub fn member_step_matrix(ens: &Ensemble, plan: &Plan) -> Array2<f64> {
    let n = plan.len();
    let feats = encode(&ens.config, plan);
    let mut probs = Array2::ones((ens.members.len(), n));
    for i in 1..n {
        let prefix_feats = feats.slice(ndarray::s![..=i, ..]);
        let edges = ens.config.arch.edges(i + 1);
        for (m, params) in ens.members.iter().enumerate() {
            probs[[m, i]] = member_step_prob(params, &ens.config, prefix_feats, &edges);
        }
    }
    probs
}

/// Ensemble-mean probability that the prefix's final step succeeds given
/// every earlier step did. The first step is feasible by assumption.
pub fn predict_step(ens: &Ensemble, prefix: &Plan) -> f64 {
    let n = prefix.len();
    if n == 1 {
        return 1.0;
    }
    let encoded = Encoded::new(&ens.config, prefix);
    let sum: f64 = ens
        .members
        .iter()
        .map(|m| member_step_prob(m, &ens.config, encoded.feats.view(), &encoded.edges))
        .sum();
    sum / ens.members.len() as f64
}

/// Plan feasibility under the per-step model: the product of ensemble-mean
/// step probabilities over every prefix.
pub fn plan_feasibility_ss(ens: &Ensemble, plan: &Plan) -> f64 {
    let probs = member_step_matrix(ens, plan);
    let n_members = ens.members.len() as f64;
    (0..plan.len()).map(|i| probs.column(i).sum() / n_members).product()
}

/// A labeled training record: a plan (or prefix) with the observed label and
/// the model class that consumes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub plan: Plan,
    pub label: bool,
    pub class: ModelClass,
}

/// Pre-encoded example, shared read-only across ensemble members during
/// training.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub feats: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub label: f64,
    pub class: ModelClass,
}

impl EncodedExample {
    pub fn new(cfg: &ModelConfig, ex: &Example) -> Self {
        let encoded = Encoded::new(cfg, &ex.plan);
        EncodedExample {
            feats: encoded.feats,
            edges: encoded.edges,
            label: if ex.label { 1.0 } else { 0.0 },
            class: ex.class,
        }
    }
}

pub fn encode_examples(cfg: &ModelConfig, examples: &[Example]) -> Vec<EncodedExample> {
    examples.iter().map(|ex| EncodedExample::new(cfg, ex)).collect()
}

fn clamped_bce(p: f64, y: f64) -> (f64, bool) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (-(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()), clamped)
}

/// The probability an example's loss is measured on: plan-level readout for
/// the whole-plan class, per-step readout for the subsequence class.
fn predicted_prob(cfg: &ModelConfig, class: ModelClass, trace: &Trace) -> f64 {
    let n = trace.logits.len();
    match class {
        ModelClass::Comp => match cfg.plan_readout {
            PlanReadout::MeanLogits => sigmoid(trace.logits.iter().sum::<f64>() / n as f64),
            PlanReadout::MeanProbs => {
                trace.logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / n as f64
            }
        },
        ModelClass::Ss => match cfg.ss_readout {
            SsReadout::LastNode => sigmoid(*trace.logits.last().unwrap()),
            SsReadout::MeanNodes => {
                trace.logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / n as f64
            }
        },
    }
}

/// Mean binary cross-entropy over an encoded batch.
pub fn bce_loss(params: &GnnParams, cfg: &ModelConfig, batch: &[EncodedExample]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|ex| {
            let trace = forward_trace(params, ex.feats.view(), &ex.edges);
            clamped_bce(predicted_prob(cfg, ex.class, &trace), ex.label).0
        })
        .sum();
    total / batch.len() as f64
}

/// Mean binary cross-entropy and its exact gradient over the batch.
///
/// Where the predicted probability falls outside the clamp range the loss is
/// flat, and the gradient of that example is zero to match.
pub fn bce_loss_and_grad(
    params: &GnnParams,
    cfg: &ModelConfig,
    batch: &[EncodedExample],
) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty());
    let mut grad = vec![0.0; params.len()];
    let mut total_loss = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for ex in batch {
        let n = ex.feats.nrows();
        let trace = forward_trace(params, ex.feats.view(), &ex.edges);
        let p = predicted_prob(cfg, ex.class, &trace);
        let (loss, clamped) = clamped_bce(p, ex.label);
        total_loss += loss;
        if clamped {
            continue;
        }

        // dL/dz per node, already scaled by 1/batch.
        let mut dz = vec![0.0; n];
        let err = scale * (p - ex.label);
        let mean_logit_readout = match ex.class {
            ModelClass::Comp => cfg.plan_readout == PlanReadout::MeanLogits,
            ModelClass::Ss => false,
        };
        let mean_prob_readout = match ex.class {
            ModelClass::Comp => cfg.plan_readout == PlanReadout::MeanProbs,
            ModelClass::Ss => cfg.ss_readout == SsReadout::MeanNodes,
        };
        if mean_logit_readout {
            for v in &mut dz {
                *v = err / n as f64;
            }
        } else if mean_prob_readout {
            // dL/dp = (p - y)/(p(1-p)); dp/dz_i = sigma'(z_i)/n.
            let dldp = scale * (p - ex.label) / (p * (1.0 - p));
            for (i, v) in dz.iter_mut().enumerate() {
                let pi = sigmoid(trace.logits[i]);
                *v = dldp * pi * (1.0 - pi) / n as f64;
            }
        } else {
            dz[n - 1] = err;
        }

        backward(params, ex, &trace, &dz, &mut grad);
    }

    (total_loss * scale, grad)
}

fn backward(
    params: &GnnParams,
    ex: &EncodedExample,
    trace: &Trace,
    dz: &[f64],
    grad: &mut [f64],
) {
    let h = params.hidden;
    let n = ex.feats.nrows();
    let dz = ArrayView1::from(dz);

    // Readout.
    let mut du = Array2::zeros((n, h));
    {
        let mut views = grad_views(h, grad);
        views.read_w.scaled_add(1.0, &trace.u.t().dot(&dz));
        *views.read_b += dz.sum();
        for i in 0..n {
            du.row_mut(i).scaled_add(dz[i], &params.read_w());
        }
    }

    // Node update (tanh).
    let dg_u = &du * &trace.u.mapv(|v| 1.0 - v * v);
    let mut upd_in = Array2::zeros((n, 2 * h));
    upd_in.slice_mut(ndarray::s![.., ..h]).assign(&trace.e);
    upd_in.slice_mut(ndarray::s![.., h..]).assign(&trace.agg);
    let d_upd_in = dg_u.dot(&params.upd_w());
    {
        let mut views = grad_views(h, grad);
        views.upd_w.scaled_add(1.0, &dg_u.t().dot(&upd_in));
        views.upd_b.scaled_add(1.0, &dg_u.sum_axis(Axis(0)));
    }
    let mut de = d_upd_in.slice(ndarray::s![.., ..h]).to_owned();
    let dagg = d_upd_in.slice(ndarray::s![.., h..]);

    // Edge network (tanh); each message's upstream gradient is the
    // receiver's aggregate gradient.
    if !ex.edges.is_empty() {
        let mut dg_m = Array2::zeros((ex.edges.len(), h));
        for (k, &(_, r)) in ex.edges.iter().enumerate() {
            let m_row = trace.msgs.row(k);
            let a_row = dagg.row(r);
            let mut out = dg_m.row_mut(k);
            for j in 0..h {
                out[j] = a_row[j] * (1.0 - m_row[j] * m_row[j]);
            }
        }
        let d_edge_in = dg_m.dot(&params.edge_w());
        {
            let mut views = grad_views(h, grad);
            views.edge_w.scaled_add(1.0, &dg_m.t().dot(&trace.edge_in));
            views.edge_b.scaled_add(1.0, &dg_m.sum_axis(Axis(0)));
        }
        for (k, &(s, r)) in ex.edges.iter().enumerate() {
            let row = d_edge_in.row(k);
            let mut ds = de.row_mut(s);
            for j in 0..h {
                ds[j] += row[j];
            }
            let mut dr = de.row_mut(r);
            for j in 0..h {
                dr[j] += row[h + j];
            }
        }
    }

    // Encoder (tanh).
    let dg_e = &de * &trace.e.mapv(|v| 1.0 - v * v);
    let mut views = grad_views(h, grad);
    views.enc_w.scaled_add(1.0, &dg_e.t().dot(&ex.feats.view()));
    views.enc_b.scaled_add(1.0, &dg_e.sum_axis(Axis(0)));
}

/// Training hyperparameters. Members shuffle independently; early stopping
/// watches the validation loss and the best-epoch parameters are restored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of collected data routed to the validation split.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 60,
            patience: 6,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
}

/// Adam with decay rates 0.9/0.999.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Train one member by mini-batch Adam with early stopping; returns the
/// parameters from the best validation epoch (the entry parameters count as
/// epoch zero).
pub fn train_member(
    start: &GnnParams,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    seed: u64,
) -> (GnnParams, TrainStats) {
    assert!(!train_set.is_empty() && !val_set.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = start.clone();
    let mut adam = Adam::new(params.len(), train_cfg.learning_rate);

    let mut best = params.clone();
    let mut best_val = bce_loss(&params, cfg, val_set);
    let mut final_val = best_val;
    let mut since_best = 0;
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch: Vec<&EncodedExample> = Vec::with_capacity(train_cfg.batch_size);

    for _ in 0..train_cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &train_set[i]));
            let (_, grad) = bce_loss_and_grad_refs(&params, cfg, &batch);
            adam.step(&mut params.data, &grad);
        }
        let val = bce_loss(&params, cfg, val_set);
        final_val = val;
        if val < best_val {
            best_val = val;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                break;
            }
        }
    }

    (best, TrainStats { epochs_run, best_val_loss: best_val, final_val_loss: final_val })
}

fn bce_loss_and_grad_refs(
    params: &GnnParams,
    cfg: &ModelConfig,
    batch: &[&EncodedExample],
) -> (f64, Vec<f64>) {
    // Mirrors bce_loss_and_grad for a borrowed batch; kept separate so the
    // training loop avoids cloning examples every step.
    let mut grad = vec![0.0; params.len()];
    let mut total_loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &ex in batch {
        let n = ex.feats.nrows();
        let trace = forward_trace(params, ex.feats.view(), &ex.edges);
        let p = predicted_prob(cfg, ex.class, &trace);
        let (loss, clamped) = clamped_bce(p, ex.label);
        total_loss += loss;
        if clamped {
            continue;
        }
        let mut dz = vec![0.0; n];
        let err = scale * (p - ex.label);
        let mean_logit_readout = match ex.class {
            ModelClass::Comp => cfg.plan_readout == PlanReadout::MeanLogits,
            ModelClass::Ss => false,
        };
        let mean_prob_readout = match ex.class {
            ModelClass::Comp => cfg.plan_readout == PlanReadout::MeanProbs,
            ModelClass::Ss => cfg.ss_readout == SsReadout::MeanNodes,
        };
        if mean_logit_readout {
            for v in &mut dz {
                *v = err / n as f64;
            }
        } else if mean_prob_readout {
            let dldp = scale * (p - ex.label) / (p * (1.0 - p));
            for (i, v) in dz.iter_mut().enumerate() {
                let pi = sigmoid(trace.logits[i]);
                *v = dldp * pi * (1.0 - pi) / n as f64;
            }
        } else {
            dz[n - 1] = err;
        }
        backward(params, ex, &trace, &dz, &mut grad);
    }
    (total_loss * scale, grad)
}

/// Train every member independently (members may run in parallel); member i
/// shuffles with seed `train_cfg.seed + i`.
pub fn train(
    ens: &Ensemble,
    train_set: &[Example],
    val_set: &[Example],
    train_cfg: &TrainConfig,
) -> Ensemble {
    let enc_train = encode_examples(&ens.config, train_set);
    let enc_val = encode_examples(&ens.config, val_set);
    let members: Vec<GnnParams> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(i, start)| {
            train_member(
                start,
                &ens.config,
                train_cfg,
                &enc_train,
                &enc_val,
                train_cfg.seed.wrapping_add(i as u64),
            )
            .0
        })
        .collect();
    Ensemble { config: ens.config, members }
}

/// The collected tower plus its three quarter-turn rotations, labels copied.
/// Static stability is rotation-invariant, so the oracle labels transfer.
pub fn augment(lp: &LabeledPlan) -> Vec<LabeledPlan> {
    Rotation::ALL
        .iter()
        .map(|&rot| LabeledPlan {
            plan: rotate_plan(&lp.plan, rot),
            step_labels: lp.step_labels.clone(),
            overall: lp.overall,
        })
        .collect()
}

/// On-disk snapshot of a trained ensemble. JSON floats round-trip exactly,
/// so a reloaded checkpoint reproduces predictions bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model_class: ModelClass,
    pub feature_dim: usize,
    pub seed: u64,
    pub members: Vec<GnnParams>,
}

impl Checkpoint {
    pub fn new(ens: &Ensemble, model_class: ModelClass, seed: u64) -> Self {
        Checkpoint {
            config: ens.config,
            model_class,
            feature_dim: FEATURE_DIM,
            seed,
            members: ens.members.clone(),
        }
    }

    pub fn ensemble(&self) -> Ensemble {
        Ensemble { config: self.config, members: self.members.clone() }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string(self).expect("checkpoint serializes"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))?;
        if ckpt.feature_dim != FEATURE_DIM {
            return Err(format!(
                "checkpoint feature dim {} does not match build ({})",
                ckpt.feature_dim, FEATURE_DIM
            ));
        }
        if ckpt.members.is_empty() {
            return Err("checkpoint has no members".into());
        }
        let expect = Layout::new(ckpt.config.hidden).total();
        for (i, m) in ckpt.members.iter().enumerate() {
            if m.hidden != ckpt.config.hidden || m.data.len() != expect {
                return Err(format!("checkpoint member {i} has inconsistent shape"));
            }
        }
        Ok(ckpt)
    }
}
