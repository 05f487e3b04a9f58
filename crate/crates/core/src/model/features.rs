//! Fixed input scaling shared by the graph and flat embedders.

use crate::error::{CoreError, Result};
use crate::graph::{scaled_id, ActionGraph, GraphNode, IdRange, NodeKind, StateGraph};

pub const POWER_SCALE_KW: f64 = 20.0;
pub const STEPS_SCALE: f64 = 20.0;
pub const PRICE_SCALE: f64 = 5.0;

/// Model-side features of one node: powers in units of 20 kW, remaining
/// steps in units of 20, prices ×5, ids as `id / max_id`.
pub fn node_features(node: &GraphNode, ids: &IdRange) -> Vec<f64> {
    let f = &node.features;
    match node.kind {
        NodeKind::Ev => vec![
            f[0],
            f[1] / STEPS_SCALE,
            scaled_id(f[2], ids.sessions),
            scaled_id(f[3], ids.chargers),
            scaled_id(f[4], ids.groups),
        ],
        NodeKind::Cs => vec![f[0] / POWER_SCALE_KW, f[1] / POWER_SCALE_KW, scaled_id(f[2], ids.chargers)],
        NodeKind::Tr => vec![f[0] / POWER_SCALE_KW, scaled_id(f[1], ids.groups)],
        NodeKind::Cpo => vec![f[0], f[1], f[2], f[3] * PRICE_SCALE, f[4] / POWER_SCALE_KW],
        NodeKind::EvAction => vec![f[0], scaled_id(f[1], ids.chargers), scaled_id(f[2], ids.groups)],
    }
}

pub fn flat_state_len(num_chargers: usize, num_groups: usize) -> usize {
    6 * num_chargers + num_groups + 5
}

/// Fixed-length state vector: per charger `[occupied, SoC, remaining, j, p̄⁺, p̄⁻]`
/// (all zero when empty), then one limit per group, then the CPO features.
pub fn flat_state(graph: &StateGraph, num_chargers: usize, num_groups: usize) -> Result<Vec<f64>> {
    if graph.num_chargers() != num_chargers || graph.num_groups() != num_groups {
        return Err(CoreError::Model(format!(
            "flat embedder built for {num_chargers} chargers / {num_groups} groups, got {} / {}",
            graph.num_chargers(),
            graph.num_groups()
        )));
    }
    let ids = &graph.id_range;
    let mut out = Vec::with_capacity(flat_state_len(num_chargers, num_groups));
    let cs: Vec<&GraphNode> = graph.nodes.iter().filter(|n| n.kind == NodeKind::Cs).collect();
    for i in 0..num_chargers {
        match graph.ev_node_index_by_charger[i] {
            Some(n) => {
                let ev = node_features(&graph.nodes[n], ids);
                let c = node_features(cs[i], ids);
                out.extend_from_slice(&[1.0, ev[0], ev[1], ev[2], c[0], c[1]]);
            }
            None => out.extend_from_slice(&[0.0; 6]),
        }
    }
    for n in graph.nodes.iter().filter(|n| n.kind == NodeKind::Tr) {
        out.push(node_features(n, ids)[0]);
    }
    let cpo = graph.nodes.iter().find(|n| n.kind == NodeKind::Cpo).expect("one CPO node");
    out.extend(node_features(cpo, ids));
    Ok(out)
}

/// Previous action as a dense per-charger vector (zeros where no EV was connected).
pub fn flat_action(graph: &ActionGraph, num_chargers: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; num_chargers];
    for node in &graph.nodes {
        let i = node.ids.charger.unwrap_or(node.features[1] as usize);
        if i >= num_chargers {
            return Err(CoreError::Model(format!(
                "flat action embedder built for {num_chargers} chargers, got charger {i}"
            )));
        }
        out[i] = node.features[0];
    }
    Ok(out)
}
