//! Forward pass, decoding and loss.

use std::sync::Arc;

use gnndt_tensor::{AttentionLayout, BlockDiag, Bound, Graph, ParamStore, Tensor, Var};

use super::features::{flat_action, flat_state, node_features};
use super::{kind_name, EmbedderKind, GnnDt, ModelConfig, StepInput, Window};
use crate::error::{CoreError, Result};
use crate::graph::{normalized_adjacency_values, GraphNode, GraphTopology, IdRange, NodeKind, StateGraph};

const LN_EPS: f64 = 1e-5;

/// Where a predicted action sits: window, position in the window, charger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub window: usize,
    pub pos: usize,
    pub charger: usize,
    /// An EV is connected at this charger (the action is valid).
    pub valid: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// One prediction per slot, `S × 1`.
    pub pred: Var,
    pub slots: Vec<Slot>,
    pub target: Vec<f64>,
    /// Loss weight per slot (action mask, or all ones).
    pub weight: Vec<f64>,
    /// Head output at each real step, in `real_steps` order.
    pub y: Var,
    /// `(window, pos)` of every non-padded step.
    pub real_steps: Vec<(usize, usize)>,
}

/// `Σ ((pred − target)·mask·pad)² / (K·B)`.
pub fn masked_mse_loss(
    g: &mut Graph,
    pred: Var,
    target: &[f64],
    mask: &[f64],
    pad: &[f64],
    k: usize,
    batch: usize,
) -> Result<Var> {
    let n = target.len();
    if mask.len() != n || pad.len() != n || g.value(pred).len() != n {
        return Err(CoreError::Model("masked_mse_loss: misaligned inputs".into()));
    }
    let t = g.constant(Tensor::from_vec(n, 1, target.to_vec())?);
    let w: Vec<f64> = mask.iter().zip(pad).map(|(m, p)| m * p).collect();
    let w = g.constant(Tensor::from_vec(n, 1, w)?);
    let diff = g.sub(pred, t)?;
    let d = g.mul(diff, w)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (k.max(1) * batch.max(1)) as f64))
}

/// `x W + b` with parameters `{name}.w`, `{name}.b`.
fn linear(g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, bias)?)
}

fn mlp2(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, b, x, &format!("{prefix}.l1"))?;
    let h = g.relu(h);
    linear(g, b, h, &format!("{prefix}.l2"))
}

/// `H ← ReLU(Â H W)` for each weight in turn; `adj` holds one block per graph.
pub fn gcn_stack(g: &mut Graph, h0: Var, adj: Arc<BlockDiag>, weights: &[Var]) -> Result<Var> {
    let mut h = h0;
    for &w in weights {
        let hw = g.matmul(h, w)?;
        let ah = g.block_diag_matmul(adj.clone(), hw)?;
        h = g.relu(ah);
    }
    Ok(h)
}

/// Node embeddings of a batch of graphs.
struct GraphBatch {
    per_node: Option<Var>,
    pooled: Var,
    offsets: Vec<usize>,
}

/// Runs the per-kind projection and GCN stack over several graphs at once.
fn embed_graphs(
    g: &mut Graph,
    b: &Bound,
    graphs: &[(&[GraphNode], &[(usize, usize)], IdRange)],
    prefix: &str,
    layers: usize,
    out_dim: usize,
) -> Result<GraphBatch> {
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut total = 0;
    for (nodes, _, _) in graphs {
        offsets.push(total);
        total += nodes.len();
    }
    let segments: Vec<(usize, usize)> = graphs.iter().zip(&offsets).map(|((n, _, _), &o)| (o, n.len())).collect();
    if total == 0 {
        let pooled = g.constant(Tensor::zeros(graphs.len(), out_dim));
        return Ok(GraphBatch {
            per_node: None,
            pooled,
            offsets,
        });
    }

    let kinds = [NodeKind::Ev, NodeKind::Cs, NodeKind::Tr, NodeKind::Cpo, NodeKind::EvAction];
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(total);
    for kind in kinds {
        let mut rows = Vec::new();
        for ((nodes, _, ids), &off) in graphs.iter().zip(&offsets) {
            for (i, n) in nodes.iter().enumerate() {
                if n.kind == kind {
                    rows.push(node_features(n, ids));
                    order.push(off + i);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let x = g.constant(Tensor::from_rows(&rows)?);
        let name = if kind == NodeKind::EvAction {
            format!("{prefix}.proj")
        } else {
            format!("{prefix}.proj.{}", kind_name(kind))
        };
        parts.push(linear(g, b, x, &name)?);
    }
    let stacked = g.concat_rows(&parts)?;
    // `order[r]` is the global index of stacked row r; invert it.
    let mut gather = vec![0; total];
    for (r, &gi) in order.iter().enumerate() {
        gather[gi] = r;
    }
    let h0 = g.gather_rows(stacked, gather)?;

    let mut adj = BlockDiag::new();
    for (nodes, edges, _) in graphs {
        adj.push_block(nodes.len(), normalized_adjacency_values(nodes.len(), edges))?;
    }
    let weights = (0..layers)
        .map(|l| b.get(&format!("{prefix}.gcn.{l}.w")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let h = gcn_stack(g, h0, Arc::new(adj), &weights)?;
    let pooled = g.segment_mean(h, segments)?;
    Ok(GraphBatch {
        per_node: Some(h),
        pooled,
        offsets,
    })
}

fn state_parts(graph: &StateGraph) -> (&[GraphNode], &[(usize, usize)], IdRange) {
    (&graph.nodes, graph.edge_list(), graph.id_range)
}

impl GnnDt {
    fn check_graph_width(&self, graph: &StateGraph) -> Result<()> {
        if let Some(n) = self.config.num_chargers {
            let locked = !self.config.use_residual_decode
                || self.config.embedder_kind == EmbedderKind::FlatMlp
                || self.config.action_embedder_kind == EmbedderKind::FlatMlp;
            if locked && graph.num_chargers() != n {
                return Err(CoreError::Model(format!(
                    "model is built for {n} chargers, environment has {}",
                    graph.num_chargers()
                )));
            }
        }
        Ok(())
    }

    /// Pooled and per-node state embeddings of one graph.
    pub fn embed_state(&self, graph: &StateGraph) -> Result<(Vec<f64>, Tensor)> {
        if graph.nodes.is_empty() {
            return Err(CoreError::Model("empty state graph".into()));
        }
        if self.config.embedder_kind != EmbedderKind::Gnn {
            return Err(CoreError::Model("flat state embedder has no node embeddings".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = embed_graphs(
            &mut g,
            &b,
            &[state_parts(graph)],
            "embed.state",
            self.config.gcn_layers_state,
            self.config.gnn_feature_dim,
        )?;
        let per_node = g.value(out.per_node.expect("non-empty")).clone();
        Ok((g.value(out.pooled).data().to_vec(), per_node))
    }

    /// Pooled action-graph embedding; zeros for an empty graph.
    pub fn embed_action(&self, graph: &crate::graph::ActionGraph) -> Result<Vec<f64>> {
        if self.config.action_embedder_kind != EmbedderKind::Gnn {
            return Err(CoreError::Model("flat action embedder has no graph embedding".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = embed_graphs(
            &mut g,
            &b,
            &[(&graph.nodes, &graph.edges, graph.id_range)],
            "embed.action",
            self.config.gcn_layers_action,
            self.config.gnn_feature_dim,
        )?;
        Ok(g.value(out.pooled).data().to_vec())
    }

    pub fn embed_rtg(&self, rtg: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::scalar(self.config.rtg_scale * rtg));
        let y = mlp2(&mut g, &b, x, "embed.rtg")?;
        Ok(g.value(y).data().to_vec())
    }

    /// Forward pass over a batch of equal-length windows.
    pub fn forward(&self, g: &mut Graph, b: &Bound, windows: &[Window<'_>]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let len = windows.first().map_or(0, |w| w.steps.len());
        if len == 0 || len > cfg.context_k {
            return Err(CoreError::Model(format!(
                "window length {len} outside 1..={}",
                cfg.context_k
            )));
        }
        if windows.iter().any(|w| w.steps.len() != len) {
            return Err(CoreError::Model("windows in a batch must have equal length".into()));
        }
        let mut real: Vec<(usize, usize, &StepInput<'_>)> = Vec::new();
        for (wi, w) in windows.iter().enumerate() {
            for (p, s) in w.steps.iter().enumerate() {
                if let Some(s) = s {
                    real.push((wi, p, s));
                }
            }
        }
        if real.is_empty() {
            return Err(CoreError::Model("batch has no real steps".into()));
        }
        for &(_, _, s) in &real {
            if s.state.nodes.is_empty() {
                return Err(CoreError::Model("empty state graph".into()));
            }
            if s.timestep >= cfg.max_episode_steps {
                return Err(CoreError::Model(format!(
                    "timestep {} beyond the embedding table ({})",
                    s.timestep, cfg.max_episode_steps
                )));
            }
            self.check_graph_width(s.state)?;
        }
        let r = real.len();

        // State tokens.
        let mut state_batch = None;
        let state_tok = match cfg.embedder_kind {
            EmbedderKind::Gnn => {
                let parts: Vec<_> = real.iter().map(|(_, _, s)| state_parts(s.state)).collect();
                let sb = embed_graphs(g, b, &parts, "embed.state", cfg.gcn_layers_state, cfg.gnn_feature_dim)?;
                let tok = linear(g, b, sb.pooled, "embed.state.out")?;
                state_batch = Some(sb);
                tok
            }
            EmbedderKind::FlatMlp => {
                let (n, w) = (cfg.num_chargers.expect("validated"), cfg.num_groups.expect("validated"));
                let rows = real
                    .iter()
                    .map(|(_, _, s)| flat_state(s.state, n, w))
                    .collect::<Result<Vec<_>>>()?;
                let x = g.constant(Tensor::from_rows(&rows)?);
                mlp2(g, b, x, "embed.state.flat")?
            }
        };

        // Previous-action tokens.
        let action_tok = match cfg.action_embedder_kind {
            EmbedderKind::Gnn => {
                let parts: Vec<_> = real
                    .iter()
                    .map(|(_, _, s)| (&s.prev_action.nodes[..], &s.prev_action.edges[..], s.prev_action.id_range))
                    .collect();
                let ab = embed_graphs(g, b, &parts, "embed.action", cfg.gcn_layers_action, cfg.gnn_feature_dim)?;
                linear(g, b, ab.pooled, "embed.action.out")?
            }
            EmbedderKind::FlatMlp => {
                let n = cfg.num_chargers.expect("validated");
                let rows = real
                    .iter()
                    .map(|(_, _, s)| flat_action(s.prev_action, n))
                    .collect::<Result<Vec<_>>>()?;
                let x = g.constant(Tensor::from_rows(&rows)?);
                mlp2(g, b, x, "embed.action.flat")?
            }
        };

        let rtg: Vec<f64> = real.iter().map(|(_, _, s)| cfg.rtg_scale * s.rtg).collect();
        let rtg = g.constant(Tensor::column(&rtg));
        let rtg_tok = mlp2(g, b, rtg, "embed.rtg")?;

        let table = b.get("embed.timestep")?;
        let te = g.embedding_lookup(table, real.iter().map(|(_, _, s)| s.timestep).collect())?;
        let rtg_tok = g.add(rtg_tok, te)?;
        let action_tok = g.add(action_tok, te)?;
        let state_tok = g.add(state_tok, te)?;

        // Interleave into B sequences of 3·len tokens.
        let seq = 3 * len;
        let rows = windows.len() * seq;
        let tokens = g.concat_rows(&[rtg_tok, action_tok, state_tok])?;
        let mut index = Vec::with_capacity(3 * r);
        for m in 0..3 {
            for &(wi, p, _) in &real {
                index.push(wi * seq + 3 * p + m);
            }
        }
        let mut key_valid = vec![false; rows];
        for &i in &index {
            key_valid[i] = true;
        }
        let x = g.scatter_rows(tokens, index, rows)?;
        let (lg, lb) = (b.get("embed.ln.g")?, b.get("embed.ln.b")?);
        let mut x = g.layer_norm(x, lg, lb, LN_EPS)?;

        let layout = Arc::new(AttentionLayout {
            seq_len: seq,
            heads: cfg.attention_heads,
            key_valid,
        });
        for blk in 0..cfg.decoder_layers {
            let (g1, b1) = (b.get(&format!("block{blk}.ln1.g"))?, b.get(&format!("block{blk}.ln1.b"))?);
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let q = linear(g, b, h, &format!("block{blk}.attn.q"))?;
            let k = linear(g, b, h, &format!("block{blk}.attn.k"))?;
            let v = linear(g, b, h, &format!("block{blk}.attn.v"))?;
            let a = g.causal_attention(q, k, v, layout.clone())?;
            let a = linear(g, b, a, &format!("block{blk}.attn.out"))?;
            x = g.add(x, a)?;
            let (g2, b2) = (b.get(&format!("block{blk}.ln2.g"))?, b.get(&format!("block{blk}.ln2.b"))?);
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let h = linear(g, b, h, &format!("block{blk}.mlp.fc"))?;
            let h = g.gelu(h);
            let h = linear(g, b, h, &format!("block{blk}.mlp.proj"))?;
            x = g.add(x, h)?;
        }
        let (fg, fb) = (b.get("ln_f.g")?, b.get("ln_f.b")?);
        let x = g.layer_norm(x, fg, fb, LN_EPS)?;
        let state_rows = real.iter().map(|&(wi, p, _)| wi * seq + 3 * p + 2).collect();
        let hs = g.gather_rows(x, state_rows)?;
        let y = linear(g, b, hs, "head")?;

        // Decode.
        let mut slots = Vec::new();
        let mut target = Vec::new();
        let mut weight = Vec::new();
        let pred = if cfg.use_residual_decode {
            let sb = state_batch.expect("residual decode uses the graph embedder");
            let per_node = sb.per_node.expect("state graphs are non-empty");
            let mut y_rows = Vec::new();
            let mut node_rows = Vec::new();
            for (ri, &(wi, p, s)) in real.iter().enumerate() {
                let off = sb.offsets[ri];
                for (charger, ev) in s.state.ev_node_index_by_charger.iter().enumerate() {
                    let node = match ev {
                        Some(n) => *n,
                        None if cfg.use_action_mask_loss => continue,
                        // Empty chargers decode from their CS node and are trained towards 0.
                        None => cs_node(s.state, charger)?,
                    };
                    y_rows.push(ri);
                    node_rows.push(off + node);
                    slots.push(Slot {
                        window: wi,
                        pos: p,
                        charger,
                        valid: ev.is_some(),
                    });
                    target.push(s.target.get(charger).copied().unwrap_or(0.0));
                    weight.push(1.0);
                }
            }
            if slots.is_empty() {
                g.constant(Tensor::zeros(0, 1))
            } else {
                let ys = g.gather_rows(y, y_rows)?;
                let xs = g.gather_rows(per_node, node_rows)?;
                g.row_dot(ys, xs)?
            }
        } else {
            let n = cfg.num_chargers.expect("validated");
            for &(wi, p, s) in &real {
                for charger in 0..n {
                    let valid = s.state.ev_node_index_by_charger[charger].is_some();
                    slots.push(Slot {
                        window: wi,
                        pos: p,
                        charger,
                        valid,
                    });
                    target.push(s.target.get(charger).copied().unwrap_or(0.0));
                    weight.push(if cfg.use_action_mask_loss && !valid { 0.0 } else { 1.0 });
                }
            }
            g.reshape(y, r * n, 1)?
        };

        Ok(ForwardOutput {
            pred,
            slots,
            target,
            weight,
            y,
            real_steps: real.iter().map(|&(wi, p, _)| (wi, p)).collect(),
        })
    }

    /// Masked MSE training loss over a batch of windows.
    pub fn loss(&self, g: &mut Graph, b: &Bound, windows: &[Window<'_>]) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, b, windows)?;
        let pad = vec![1.0; out.target.len()];
        let k = windows.first().map_or(1, |w| w.steps.len());
        let loss = if out.target.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            masked_mse_loss(g, out.pred, &out.target, &out.weight, &pad, k, windows.len())?
        };
        Ok((loss, out))
    }

    /// Actions for the last step of `window`, zero where no EV is connected.
    pub fn predict(&self, window: &Window<'_>) -> Result<Vec<f64>> {
        let last = window
            .steps
            .last()
            .and_then(|s| s.as_ref())
            .ok_or_else(|| CoreError::Model("last window step must be real".into()))?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, std::slice::from_ref(window))?;
        let pos = window.steps.len() - 1;
        let mut actions = vec![0.0; last.state.num_chargers()];
        let pred = g.value(out.pred);
        for (i, slot) in out.slots.iter().enumerate() {
            if slot.pos == pos && slot.valid {
                actions[slot.charger] = pred.get(i, 0);
            }
        }
        Ok(actions)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

fn cs_node(graph: &StateGraph, charger: usize) -> Result<usize> {
    graph
        .nodes
        .iter()
        .position(|n| n.kind == NodeKind::Cs && n.ids.charger == Some(charger))
        .ok_or_else(|| CoreError::Model(format!("no CS node for charger {charger}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_example() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::column(&[0.5, 0.3]));
        let l = masked_mse_loss(&mut g, p, &[0.4, 0.0], &[1.0, 0.0], &[1.0, 1.0], 1, 1).unwrap();
        assert!((g.value(l).item().unwrap() - 0.01).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).get(1, 0), 0.0);
    }

    #[test]
    fn gcn_two_node_path() {
        let mut g = Graph::new();
        let h0 = g.constant(Tensor::column(&[1.0, 3.0]));
        let w = g.constant(Tensor::scalar(1.0));
        let mut adj = BlockDiag::new();
        adj.push_block(2, normalized_adjacency_values(2, &[(0, 1)])).unwrap();
        let h = gcn_stack(&mut g, h0, Arc::new(adj), &[w]).unwrap();
        let pooled = g.segment_mean(h, vec![(0, 2)]).unwrap();
        let v = g.value(h);
        assert!((v.get(0, 0) - 2.0).abs() < 1e-12 && (v.get(1, 0) - 2.0).abs() < 1e-12);
        assert!((g.value(pooled).item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_product() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::row(&[1.0, 2.0]));
        let x = g.constant(Tensor::row(&[3.0, 4.0]));
        let a = g.row_dot(y, x).unwrap();
        assert_eq!(g.value(a).item().unwrap(), 11.0);
    }
}
