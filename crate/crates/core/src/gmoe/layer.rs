//! One tree-gated mixture-of-experts layer.
//!
//! Each expert is an affine+ReLU block `d_in → d_out`; gates are affine
//! maps `d_in → 2` on the same input. Parameters live in the owning
//! network's [`ParamSet`] under `"{layer}.e{j}.{w,b}"` and
//! `"{layer}.g{g}.{w,b}"`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{GateNode, GateTree};
use crate::error::{input_err, shape_err, state_err, Result};
use crate::metrics::LayerDesc;
use crate::numkit::layers::{affine_backward, affine_forward, relu_backward_inplace, relu_inplace};
use crate::numkit::matrix::dot;
use crate::numkit::mlp::init_affine;
use crate::numkit::{argmax, Matrix, ParamSet, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub fn expert_weight(layer: &str, j: usize) -> String {
    format!("{layer}.e{j}.w")
}

pub fn expert_bias(layer: &str, j: usize) -> String {
    format!("{layer}.e{j}.b")
}

pub fn gate_weight(layer: &str, g: usize) -> String {
    format!("{layer}.g{g}.w")
}

pub fn gate_bias(layer: &str, g: usize) -> String {
    format!("{layer}.g{g}.b")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    name: String,
    d_in: usize,
    d_out: usize,
    gating: Gating,
    tree: GateTree,
    /// Bumped on every split so routing records from before it are refused.
    version: u64,
}

impl MoeLayer {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, gating: Gating) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            gating,
            tree: GateTree::single(),
            version: 0,
        }
    }

    /// Reassembles a layer read back from a checkpoint.
    pub fn from_parts(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        gating: Gating,
        tree: GateTree,
        version: u64,
    ) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            gating,
            tree,
            version,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn gating(&self) -> Gating {
        self.gating
    }

    pub fn tree(&self) -> &GateTree {
        &self.tree
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_experts(&self) -> usize {
        self.tree.num_leaves()
    }

    pub fn expert_block_size(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn gate_block_size(&self) -> usize {
        2 * self.d_in + 2
    }

    pub fn param_count(&self) -> usize {
        self.num_experts() * self.expert_block_size() + self.tree.num_gates() * self.gate_block_size()
    }

    pub fn desc(&self) -> LayerDesc {
        LayerDesc::Moe {
            d_in: self.d_in,
            d_out: self.d_out,
            experts: self.num_experts(),
            hard: self.gating == Gating::Hard,
        }
    }

    /// Initialises the single expert of a fresh layer.
    pub fn init_params(&self, seed: SeedStream, params: &mut ParamSet) -> Result<()> {
        if self.num_experts() != 1 {
            return Err(state_err!("only a fresh single-expert layer can be initialised"));
        }
        let (w, b) = init_affine(seed, self.d_in, self.d_out);
        params.insert(expert_weight(&self.name, 0), w)?;
        params.insert(expert_bias(&self.name, 0), b)
    }
}

/// Which experts handled a batch, as produced by [`moe_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub version: u64,
    pub gating: Gating,
    pub phase: Phase,
    /// Leaf probabilities, `n×k`.
    pub probs: Matrix,
    /// Expert used per example: sampled or greedy in hard mode, the
    /// most probable leaf in soft mode.
    pub selected: Vec<usize>,
}

/// Left-branch probability and reach probability at every tree node.
#[derive(Debug, Clone)]
struct GateCache {
    left: Vec<Vec<f64>>,
    reach: Vec<Vec<f64>>,
}

/// Everything [`moe_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct MoeCache {
    record: RoutingRecord,
    input: Matrix,
    gates: GateCache,
    /// Post-ReLU expert outputs; `None` for experts not evaluated.
    experts: Vec<Option<Matrix>>,
}

impl MoeCache {
    pub fn record(&self) -> &RoutingRecord {
        &self.record
    }
}

fn sigmoid_diff(s0: f64, s1: f64) -> f64 {
    // softmax([s0, s1])[0] without overflow
    let d = s1 - s0;
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

fn gate_forward(layer: &MoeLayer, params: &ParamSet, z: &Matrix) -> Result<(Matrix, GateCache)> {
    let n = z.rows();
    let tree = &layer.tree;
    let nodes = tree.nodes().len();
    let mut cache = GateCache {
        left: vec![Vec::new(); nodes],
        reach: vec![Vec::new(); nodes],
    };
    cache.reach[0] = vec![1.0; n];
    let mut probs = Matrix::zeros(n, tree.num_leaves());
    for id in tree.preorder_ids() {
        match tree.node(id) {
            GateNode::Leaf { expert } => {
                for (i, &r) in cache.reach[id].iter().enumerate() {
                    probs.set(i, expert, r);
                }
            }
            GateNode::Internal { gate, left, right } => {
                let s = affine_forward(
                    z,
                    params.get(&gate_weight(&layer.name, gate))?,
                    params.get(&gate_bias(&layer.name, gate))?,
                )?;
                let a: Vec<f64> = (0..n).map(|i| sigmoid_diff(s.get(i, 0), s.get(i, 1))).collect();
                let reach = std::mem::take(&mut cache.reach[id]);
                cache.reach[left] = reach.iter().zip(&a).map(|(r, a)| r * a).collect();
                cache.reach[right] = reach.iter().zip(&a).map(|(r, a)| r * (1.0 - a)).collect();
                cache.reach[id] = reach;
                cache.left[id] = a;
            }
        }
    }
    Ok((probs, cache))
}

/// Leaf probabilities `n×k`: products of gate outputs along each path.
pub fn gate_probs(layer: &MoeLayer, params: &ParamSet, z: &Matrix) -> Result<Matrix> {
    check_input(layer, z)?;
    Ok(gate_forward(layer, params, z)?.0)
}

fn check_input(layer: &MoeLayer, z: &Matrix) -> Result<()> {
    if z.cols() != layer.d_in {
        return Err(shape_err!(
            "layer {} expects {} inputs, got {}",
            layer.name,
            layer.d_in,
            z.cols()
        ));
    }
    Ok(())
}

fn expert_forward(layer: &MoeLayer, params: &ParamSet, j: usize, z: &Matrix) -> Result<Matrix> {
    let mut h = affine_forward(
        z,
        params.get(&expert_weight(&layer.name, j))?,
        params.get(&expert_bias(&layer.name, j))?,
    )?;
    relu_inplace(&mut h);
    Ok(h)
}

fn sample_leaf(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        cum += pj;
        if u < cum {
            return j;
        }
    }
    p.iter().rposition(|&pj| pj > 0.0).unwrap_or(0)
}

fn greedy_leaf(tree: &GateTree, gates: &GateCache, i: usize) -> usize {
    let mut id = 0;
    loop {
        match tree.node(id) {
            GateNode::Leaf { expert } => return expert,
            GateNode::Internal { left, right, .. } => {
                id = if gates.left[id][i] >= 0.5 { left } else { right };
            }
        }
    }
}

/// Forward pass of the layer.
///
/// Soft gating mixes all experts by leaf probability. Hard gating samples
/// one expert per example from the leaf distribution while training (using
/// `rng`) and walks down the tree taking the more probable branch at
/// evaluation.
pub fn moe_forward(
    layer: &MoeLayer,
    params: &ParamSet,
    z: &Matrix,
    phase: Phase,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Matrix, MoeCache)> {
    check_input(layer, z)?;
    let n = z.rows();
    let k = layer.num_experts();
    let (probs, gates) = gate_forward(layer, params, z)?;

    let selected: Vec<usize> = match (layer.gating, phase) {
        (Gating::Soft, _) => (0..n).map(|i| argmax(probs.row(i))).collect(),
        (Gating::Hard, Phase::Train) => {
            let rng = rng.ok_or_else(|| state_err!("hard routing in training needs a random stream"))?;
            (0..n).map(|i| sample_leaf(rng, probs.row(i))).collect()
        }
        (Gating::Hard, Phase::Eval) => (0..n).map(|i| greedy_leaf(&layer.tree, &gates, i)).collect(),
    };

    let mut out = Matrix::zeros(n, layer.d_out);
    let mut experts: Vec<Option<Matrix>> = vec![None; k];
    match (layer.gating, phase) {
        (Gating::Soft, _) => {
            for (j, slot) in experts.iter_mut().enumerate() {
                let h = expert_forward(layer, params, j, z)?;
                for i in 0..n {
                    let p = probs.get(i, j);
                    for (o, &v) in out.row_mut(i).iter_mut().zip(h.row(i)) {
                        *o += p * v;
                    }
                }
                *slot = Some(h);
            }
        }
        (Gating::Hard, Phase::Train) => {
            // every expert is needed for the straight-through gate gradient
            for (j, slot) in experts.iter_mut().enumerate() {
                *slot = Some(expert_forward(layer, params, j, z)?);
            }
            for (i, &j) in selected.iter().enumerate() {
                let h = experts[j].as_ref().expect("computed above");
                out.row_mut(i).copy_from_slice(h.row(i));
            }
        }
        (Gating::Hard, Phase::Eval) => {
            for j in 0..k {
                let rows: Vec<usize> = (0..n).filter(|&i| selected[i] == j).collect();
                if rows.is_empty() {
                    continue;
                }
                let h = expert_forward(layer, params, j, &z.gather_rows(&rows))?;
                for (r, &i) in rows.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(h.row(r));
                }
            }
        }
    }

    let record = RoutingRecord {
        version: layer.version,
        gating: layer.gating,
        phase,
        probs,
        selected,
    };
    Ok((
        out,
        MoeCache {
            record,
            input: z.clone(),
            gates,
            experts,
        },
    ))
}

fn add_into(grads: &mut ParamSet, name: &str, g: &[f64]) -> Result<()> {
    for (acc, v) in grads.get_mut(name)?.data_mut().iter_mut().zip(g) {
        *acc += v;
    }
    Ok(())
}

fn add_matrix(acc: &mut Option<Matrix>, m: Option<Matrix>) {
    match (acc.as_mut(), m) {
        (Some(a), Some(m)) => {
            for (x, y) in a.data_mut().iter_mut().zip(m.data()) {
                *x += y;
            }
        }
        (None, m) => *acc = m,
        (_, None) => {}
    }
}

/// Backward pass: adds parameter gradients into `grads` and returns the
/// gradient with respect to the layer input when `need_dz`.
///
/// In hard mode only the selected expert of each example receives expert
/// gradient, while gates are differentiated as if the soft mixture had been
/// used (straight-through).
pub fn moe_backward(
    layer: &MoeLayer,
    params: &ParamSet,
    cache: &MoeCache,
    dout: &Matrix,
    grads: &mut ParamSet,
    need_dz: bool,
) -> Result<Option<Matrix>> {
    let rec = &cache.record;
    if rec.version != layer.version {
        return Err(state_err!(
            "routing record from layer version {} used after growth to version {}",
            rec.version,
            layer.version
        ));
    }
    if rec.gating == Gating::Hard && rec.phase == Phase::Eval {
        return Err(state_err!("evaluation-time hard routing has no backward pass"));
    }
    let z = &cache.input;
    let n = z.rows();
    let k = layer.num_experts();
    if dout.rows() != n || dout.cols() != layer.d_out || rec.probs.cols() != k {
        return Err(shape_err!(
            "upstream gradient {}x{} for layer {} output {}x{}",
            dout.rows(),
            dout.cols(),
            layer.name,
            n,
            layer.d_out
        ));
    }

    let mut dz: Option<Matrix> = None;
    let mut dp = Matrix::zeros(n, k);
    for j in 0..k {
        let h = cache.experts[j]
            .as_ref()
            .ok_or_else(|| state_err!("expert {j} missing from forward cache"))?;
        for i in 0..n {
            dp.set(i, j, dot(dout.row(i), h.row(i)));
        }
        let mut dh = Matrix::zeros(n, layer.d_out);
        let mut any = false;
        for i in 0..n {
            let scale = match rec.gating {
                Gating::Soft => rec.probs.get(i, j),
                Gating::Hard if rec.selected[i] == j => 1.0,
                Gating::Hard => continue,
            };
            any = true;
            for (d, &g) in dh.row_mut(i).iter_mut().zip(dout.row(i)) {
                *d = scale * g;
            }
        }
        if !any {
            continue;
        }
        relu_backward_inplace(h, &mut dh);
        let w_name = expert_weight(&layer.name, j);
        let g = affine_backward(z, params.get(&w_name)?, &dh, need_dz)?;
        add_into(grads, &w_name, &g.dw)?;
        add_into(grads, &expert_bias(&layer.name, j), &g.db)?;
        add_matrix(&mut dz, g.dx);
    }

    let tree = &layer.tree;
    if tree.num_gates() > 0 {
        // value[v] = Σ over leaves j below v of dP_j · P(j | v)
        let order = tree.preorder_ids();
        let mut value: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes().len()];
        for &id in order.iter().rev() {
            value[id] = match tree.node(id) {
                GateNode::Leaf { expert } => (0..n).map(|i| dp.get(i, expert)).collect(),
                GateNode::Internal { left, right, .. } => {
                    let a = &cache.gates.left[id];
                    (0..n)
                        .map(|i| a[i] * value[left][i] + (1.0 - a[i]) * value[right][i])
                        .collect()
                }
            };
        }
        for &id in &order {
            let GateNode::Internal { gate, left, right } = tree.node(id) else {
                continue;
            };
            let a = &cache.gates.left[id];
            let reach = &cache.gates.reach[id];
            let mut ds = Matrix::zeros(n, 2);
            for i in 0..n {
                let g = reach[i] * (value[left][i] - value[right][i]) * a[i] * (1.0 - a[i]);
                ds.set(i, 0, g);
                ds.set(i, 1, -g);
            }
            let w_name = gate_weight(&layer.name, gate);
            let g = affine_backward(z, params.get(&w_name)?, &ds, need_dz)?;
            add_into(grads, &w_name, &g.dw)?;
            add_into(grads, &gate_bias(&layer.name, gate), &g.db)?;
            add_matrix(&mut dz, g.dx);
        }
    }

    if need_dz && dz.is_none() {
        dz = Some(Matrix::zeros(n, layer.d_in));
    }
    Ok(dz)
}

/// Summed validation loss and example count per expert.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpertLossStats {
    pub loss: Vec<f64>,
    pub count: Vec<usize>,
}

impl ExpertLossStats {
    pub fn new(k: usize) -> Self {
        Self {
            loss: vec![0.0; k],
            count: vec![0; k],
        }
    }
}

/// Credits each example's loss to the expert recorded as selected for it.
pub fn accumulate_expert_loss(stats: &mut ExpertLossStats, record: &RoutingRecord, losses: &[f64]) -> Result<()> {
    if losses.len() != record.selected.len() {
        return Err(input_err!(
            "{} losses for {} routed examples",
            losses.len(),
            record.selected.len()
        ));
    }
    let k = record.probs.cols();
    if stats.loss.len() < k {
        stats.loss.resize(k, 0.0);
        stats.count.resize(k, 0);
    }
    for (&j, &l) in record.selected.iter().zip(losses) {
        stats.loss[j] += l;
        stats.count[j] += 1;
    }
    Ok(())
}

/// Expert with the largest summed loss among those that saw any example;
/// ties go to the lowest index.
pub fn select_losing_expert(stats: &ExpertLossStats) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (j, (&l, &c)) in stats.loss.iter().zip(&stats.count).enumerate() {
        if c > 0 && best.is_none_or(|b| l > stats.loss[b]) {
            best = Some(j);
        }
    }
    best.ok_or_else(|| state_err!("no expert received any validation example"))
}

/// Replaces leaf `expert_id` by a gate over two copies of that expert.
///
/// The left child keeps the original id; the right child is the new expert
/// `k`. The new gate is drawn from `seed`. Returns the new expert id.
pub fn split_expert(layer: &mut MoeLayer, params: &mut ParamSet, expert_id: usize, seed: SeedStream) -> Result<usize> {
    let k = layer.num_experts();
    if expert_id >= k {
        return Err(input_err!("expert {expert_id} out of range for {k} experts"));
    }
    let name = layer.name.clone();
    let gate = layer.tree.num_gates();
    let new_names = [
        expert_weight(&name, k),
        expert_bias(&name, k),
        gate_weight(&name, gate),
        gate_bias(&name, gate),
    ];
    if let Some(taken) = new_names.iter().find(|n| params.contains(n)) {
        return Err(state_err!("parameter {taken} already exists"));
    }
    let w = params.get(&expert_weight(&name, expert_id))?.clone();
    let b = params.get(&expert_bias(&name, expert_id))?.clone();
    let (gw, gb) = init_affine(seed, layer.d_in, 2);
    let [ew_name, eb_name, gw_name, gb_name] = new_names;
    params.insert(ew_name, w)?;
    params.insert(eb_name, b)?;
    params.insert(gw_name, gw)?;
    params.insert(gb_name, gb)?;
    let (g, new_expert) = layer.tree.split(expert_id)?;
    debug_assert_eq!((g, new_expert), (gate, k));
    layer.version += 1;
    Ok(new_expert)
}
