//! State and action graphs built from simulator snapshots.
//!
//! Node order in a state graph is fixed: the CPO root, one TR node per
//! transformer group, one CS node per charger, then one EV node per connected
//! session in charger order. Edges follow the electrical hierarchy
//! CPO–TR, TR–CS and CS–EV.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use gnndt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::env::{Scenario, SimState};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Ev,
    Cs,
    Tr,
    Cpo,
    EvAction,
}

impl NodeKind {
    pub fn feature_len(self) -> usize {
        match self {
            NodeKind::Ev | NodeKind::Cpo => 5,
            NodeKind::Cs | NodeKind::EvAction => 3,
            NodeKind::Tr => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityIds {
    pub session: Option<usize>,
    pub charger: Option<usize>,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub features: Vec<f64>,
    pub ids: EntityIds,
}

/// Largest id of each kind in the scenario, used to scale id features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRange {
    pub sessions: usize,
    pub chargers: usize,
    pub groups: usize,
}

impl IdRange {
    fn of(scenario: &Scenario) -> Self {
        Self {
            sessions: scenario.sessions.len(),
            chargers: scenario.num_chargers(),
            groups: scenario.config.num_transformer_groups,
        }
    }
}

/// `id / max_id`, with a single-element range mapped to 0.
pub fn scaled_id(id: f64, count: usize) -> f64 {
    id / (count.saturating_sub(1).max(1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGraph {
    pub t: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
    pub ev_node_index_by_charger: Vec<Option<usize>>,
    pub id_range: IdRange,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
    pub state_node_ref: Vec<usize>,
    pub id_range: IdRange,
}

impl ActionGraph {
    pub const EMPTY: ActionGraph = ActionGraph {
        nodes: Vec::new(),
        edges: Vec::new(),
        state_node_ref: Vec::new(),
        id_range: IdRange {
            sessions: 0,
            chargers: 0,
            groups: 0,
        },
    };
}

pub trait GraphTopology {
    fn num_nodes(&self) -> usize;
    fn edge_list(&self) -> &[(usize, usize)];
}

impl GraphTopology for StateGraph {
    fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
    fn edge_list(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

impl GraphTopology for ActionGraph {
    fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
    fn edge_list(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

impl StateGraph {
    pub fn num_chargers(&self) -> usize {
        self.ev_node_index_by_charger.len()
    }

    pub fn num_groups(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Tr).count()
    }

    /// EV nodes as `(node index, charger)` in charger order.
    pub fn ev_nodes(&self) -> Vec<(usize, usize)> {
        self.ev_node_index_by_charger
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (n, i)))
            .collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.ev_node_index_by_charger.iter().map(Option::is_some).collect()
    }
}

pub fn build_state_graph(state: &SimState, scenario: &Scenario) -> StateGraph {
    let c = &scenario.config;
    let t = state.t.min(c.horizon_t - 1);
    let ids = IdRange::of(scenario);
    let mut nodes = Vec::with_capacity(1 + ids.groups + 2 * ids.chargers);
    let mut edges = Vec::new();

    let h = (state.t % c.steps_per_day) as f64;
    let day = ((state.t / c.steps_per_day) % 7) as f64;
    let angle = 2.0 * PI * h / c.steps_per_day as f64;
    nodes.push(GraphNode {
        kind: NodeKind::Cpo,
        features: vec![day / 7.0, angle.sin(), angle.cos(), c.price_charge[t], state.prev_total_power],
        ids: EntityIds::default(),
    });
    for w in 0..ids.groups {
        nodes.push(GraphNode {
            kind: NodeKind::Tr,
            features: vec![c.group_limits[w][t], w as f64],
            ids: EntityIds {
                group: Some(w),
                ..Default::default()
            },
        });
        edges.push((0, 1 + w));
    }
    let cs0 = 1 + ids.groups;
    for i in 0..ids.chargers {
        let w = c.charger_to_group[i];
        nodes.push(GraphNode {
            kind: NodeKind::Cs,
            features: vec![c.charger_max_charge_kw[i], c.charger_max_discharge_kw[i], i as f64],
            ids: EntityIds {
                session: None,
                charger: Some(i),
                group: Some(w),
            },
        });
        edges.push((1 + w, cs0 + i));
    }
    let mut ev_index = vec![None; ids.chargers];
    for i in 0..ids.chargers {
        let Some(j) = state.connected[i] else { continue };
        let s = &scenario.sessions[j];
        let node = nodes.len();
        nodes.push(GraphNode {
            kind: NodeKind::Ev,
            features: vec![
                state.battery_energy[i] / s.e_max,
                s.t_departure.saturating_sub(state.t) as f64,
                j as f64,
                i as f64,
                s.group_id as f64,
            ],
            ids: EntityIds {
                session: Some(j),
                charger: Some(i),
                group: Some(s.group_id),
            },
        });
        edges.push((cs0 + i, node));
        ev_index[i] = Some(node);
    }
    StateGraph {
        t: state.t,
        nodes,
        edges,
        ev_node_index_by_charger: ev_index,
        id_range: ids,
    }
}

/// One node per connected EV carrying `[a, i, w]`; nodes sharing a group form
/// a clique and consecutive nodes are chained.
pub fn build_action_graph(graph: &StateGraph, values: &[f64]) -> ActionGraph {
    let mut nodes = Vec::new();
    let mut refs = Vec::new();
    for (node, i) in graph.ev_nodes() {
        let ids = graph.nodes[node].ids;
        let w = ids.group.unwrap_or(0);
        nodes.push(GraphNode {
            kind: NodeKind::EvAction,
            features: vec![values.get(i).copied().unwrap_or(0.0), i as f64, w as f64],
            ids,
        });
        refs.push(node);
    }
    let mut edges = BTreeSet::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            if nodes[a].ids.group == nodes[b].ids.group {
                edges.insert((a, b));
            }
        }
        if a + 1 < nodes.len() {
            edges.insert((a, a + 1));
        }
    }
    ActionGraph {
        nodes,
        edges: edges.into_iter().collect(),
        state_node_ref: refs,
        id_range: graph.id_range,
    }
}

/// Row-major `D̂^{-1/2} (A + I) D̂^{-1/2}` for an undirected edge list.
pub fn normalized_adjacency_values(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let n = num_nodes;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(u, v) in edges {
        if u != v {
            a[u * n + v] = 1.0;
            a[v * n + u] = 1.0;
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

pub fn normalized_adjacency(graph: &impl GraphTopology) -> Tensor {
    let n = graph.num_nodes();
    Tensor::from_vec(n, n, normalized_adjacency_values(n, graph.edge_list())).expect("square")
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(CoreError::Permutation(format!("length {} for {n} nodes", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(CoreError::Permutation("not a bijection".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    inv
}

fn relabel_edges(edges: &[(usize, usize)], perm: &[usize]) -> Vec<(usize, usize)> {
    edges
        .iter()
        .map(|&(u, v)| {
            let (a, b) = (perm[u], perm[v]);
            (a.min(b), a.max(b))
        })
        .collect()
}

/// Moves node `k` to position `perm[k]`.
pub fn permute_graph(graph: &StateGraph, perm: &[usize]) -> Result<StateGraph> {
    check_permutation(perm, graph.nodes.len())?;
    let mut nodes = graph.nodes.clone();
    for (old, node) in graph.nodes.iter().enumerate() {
        nodes[perm[old]] = node.clone();
    }
    Ok(StateGraph {
        t: graph.t,
        nodes,
        edges: relabel_edges(&graph.edges, perm),
        ev_node_index_by_charger: graph.ev_node_index_by_charger.iter().map(|n| n.map(|n| perm[n])).collect(),
        id_range: graph.id_range,
    })
}

/// Action-graph counterpart: permutes action nodes by `perm` and remaps the
/// state-node references through `state_perm`.
pub fn permute_action_graph(graph: &ActionGraph, perm: &[usize], state_perm: &[usize]) -> Result<ActionGraph> {
    check_permutation(perm, graph.nodes.len())?;
    let mut nodes = graph.nodes.clone();
    let mut refs = graph.state_node_ref.clone();
    for old in 0..graph.nodes.len() {
        nodes[perm[old]] = graph.nodes[old].clone();
        refs[perm[old]] = state_perm[graph.state_node_ref[old]];
    }
    Ok(ActionGraph {
        nodes,
        edges: relabel_edges(&graph.edges, perm),
        state_node_ref: refs,
        id_range: graph.id_range,
    })
}
