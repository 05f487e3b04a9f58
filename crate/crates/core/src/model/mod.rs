//! Decision transformer with graph embedders and residual action decoding.
//!
//! Each step of a window contributes three tokens in the order
//! (return-to-go, previous action, state). The action for every connected EV
//! is read from the state token's output `y_t` as the dot product with that
//! EV node's final GCN embedding.

mod features;
mod network;

use std::path::{Path, PathBuf};

use gnndt_tensor::checkpoint::{load_checkpoint, save_checkpoint};
use gnndt_tensor::{glorot_uniform, truncated_normal, AdamW, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CoreError, Result};
use crate::graph::{ActionGraph, NodeKind, StateGraph};

pub use features::{flat_action, flat_state, flat_state_len, node_features, POWER_SCALE_KW, PRICE_SCALE, STEPS_SCALE};
pub use network::{masked_mse_loss, ForwardOutput, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Gnn,
    FlatMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub context_k: usize,
    pub embed_dim: usize,
    pub gnn_feature_dim: usize,
    pub gnn_hidden_dim: usize,
    pub gcn_layers_state: usize,
    pub gcn_layers_action: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    /// State embedder.
    pub embedder_kind: EmbedderKind,
    pub action_embedder_kind: EmbedderKind,
    pub use_residual_decode: bool,
    pub use_action_mask_loss: bool,
    pub rtg_scale: f64,
    pub max_episode_steps: usize,
    /// Required by the flat embedders and the direct decode head.
    pub num_chargers: Option<usize>,
    pub num_groups: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_k: 10,
            embed_dim: 128,
            gnn_feature_dim: 16,
            gnn_hidden_dim: 32,
            gcn_layers_state: 3,
            gcn_layers_action: 3,
            decoder_layers: 3,
            attention_heads: 4,
            embedder_kind: EmbedderKind::Gnn,
            action_embedder_kind: EmbedderKind::Gnn,
            use_residual_decode: true,
            use_action_mask_loss: true,
            rtg_scale: 1e-3,
            max_episode_steps: 300,
            num_chargers: None,
            num_groups: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale GNN-DT: embed 64, 2 decoder layers.
    pub fn small(context_k: usize) -> Self {
        Self {
            context_k,
            embed_dim: 64,
            decoder_layers: 2,
            ..Self::default()
        }
    }

    /// The classic DT baseline: flat MLP embedders and a size-locked head.
    pub fn flat_baseline(mut self, num_chargers: usize, num_groups: usize) -> Self {
        self.embedder_kind = EmbedderKind::FlatMlp;
        self.action_embedder_kind = EmbedderKind::FlatMlp;
        self.use_residual_decode = false;
        self.use_action_mask_loss = false;
        self.num_chargers = Some(num_chargers);
        self.num_groups = Some(num_groups);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_k == 0 {
            return Err(config_err("context_k must be at least 1"));
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(config_err("embed_dim must be divisible by attention_heads"));
        }
        if self.gcn_layers_state == 0 || self.gcn_layers_action == 0 {
            return Err(config_err("GCN stacks need at least one layer"));
        }
        if self.embed_dim == 0 || self.gnn_feature_dim == 0 || self.gnn_hidden_dim == 0 {
            return Err(config_err("dimensions must be positive"));
        }
        if self.max_episode_steps == 0 || !(self.rtg_scale.is_finite()) {
            return Err(config_err("max_episode_steps and rtg_scale must be valid"));
        }
        if self.use_residual_decode && self.embedder_kind == EmbedderKind::FlatMlp {
            return Err(config_err("residual decoding needs the graph state embedder"));
        }
        let needs_n = !self.use_residual_decode
            || self.embedder_kind == EmbedderKind::FlatMlp
            || self.action_embedder_kind == EmbedderKind::FlatMlp;
        if needs_n && self.num_chargers.is_none() {
            return Err(config_err("flat embedders and the direct head need num_chargers"));
        }
        if self.embedder_kind == EmbedderKind::FlatMlp && self.num_groups.is_none() {
            return Err(config_err("the flat state embedder needs num_groups"));
        }
        Ok(())
    }

    /// Input width of GCN layer `l` and output width.
    fn gcn_dims(&self, layers: usize, l: usize) -> (usize, usize) {
        let fin = self.gnn_hidden_dim;
        let fout = if l + 1 == layers {
            self.gnn_feature_dim
        } else {
            self.gnn_hidden_dim
        };
        (fin, fout)
    }
}

/// One position of a model input window. Padded positions are `None`.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub state: &'a StateGraph,
    /// Action graph of the previous step (empty at the first step).
    pub prev_action: &'a ActionGraph,
    /// Unscaled return-to-go.
    pub rtg: f64,
    pub timestep: usize,
    /// Training targets; may be empty at inference.
    pub target: &'a [f64],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub steps: Vec<Option<StepInput<'a>>>,
}

impl Window<'_> {
    pub fn pad_mask(&self) -> Vec<bool> {
        self.steps.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnDt {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn kind_name(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Ev => "ev",
        NodeKind::Cs => "cs",
        NodeKind::Tr => "tr",
        NodeKind::Cpo => "cpo",
        NodeKind::EvAction => "act",
    }
}

impl GnnDt {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let e = config.embed_dim;
        let (f0, fl) = (config.gnn_hidden_dim, config.gnn_feature_dim);
        let linear = |p: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng| {
            p.insert(format!("{name}.w"), truncated_normal(fin, fout, 0.02, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(1, fout));
        };
        let ln = |p: &mut ParamStore, name: &str| {
            p.insert(format!("{name}.g"), Tensor::filled(1, e, 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(1, e));
        };

        match config.embedder_kind {
            EmbedderKind::Gnn => {
                for kind in [NodeKind::Ev, NodeKind::Cs, NodeKind::Tr, NodeKind::Cpo] {
                    let name = format!("embed.state.proj.{}", kind_name(kind));
                    linear(&mut p, &name, kind.feature_len(), f0, &mut rng);
                }
                for l in 0..config.gcn_layers_state {
                    let (fin, fout) = config.gcn_dims(config.gcn_layers_state, l);
                    p.insert(format!("embed.state.gcn.{l}.w"), glorot_uniform(fin, fout, &mut rng));
                }
                linear(&mut p, "embed.state.out", fl, e, &mut rng);
            }
            EmbedderKind::FlatMlp => {
                let n = config.num_chargers.expect("validated");
                let w = config.num_groups.expect("validated");
                linear(&mut p, "embed.state.flat.l1", flat_state_len(n, w), e, &mut rng);
                linear(&mut p, "embed.state.flat.l2", e, e, &mut rng);
            }
        }
        match config.action_embedder_kind {
            EmbedderKind::Gnn => {
                linear(&mut p, "embed.action.proj", NodeKind::EvAction.feature_len(), f0, &mut rng);
                for l in 0..config.gcn_layers_action {
                    let (fin, fout) = config.gcn_dims(config.gcn_layers_action, l);
                    p.insert(format!("embed.action.gcn.{l}.w"), glorot_uniform(fin, fout, &mut rng));
                }
                linear(&mut p, "embed.action.out", fl, e, &mut rng);
            }
            EmbedderKind::FlatMlp => {
                let n = config.num_chargers.expect("validated");
                linear(&mut p, "embed.action.flat.l1", n, e, &mut rng);
                linear(&mut p, "embed.action.flat.l2", e, e, &mut rng);
            }
        }
        linear(&mut p, "embed.rtg.l1", 1, e, &mut rng);
        linear(&mut p, "embed.rtg.l2", e, e, &mut rng);
        p.insert("embed.timestep", Tensor::zeros(config.max_episode_steps, e));
        ln(&mut p, "embed.ln");
        for b in 0..config.decoder_layers {
            ln(&mut p, &format!("block{b}.ln1"));
            for part in ["q", "k", "v", "out"] {
                linear(&mut p, &format!("block{b}.attn.{part}"), e, e, &mut rng);
            }
            ln(&mut p, &format!("block{b}.ln2"));
            linear(&mut p, &format!("block{b}.mlp.fc"), e, 4 * e, &mut rng);
            linear(&mut p, &format!("block{b}.mlp.proj"), 4 * e, e, &mut rng);
        }
        ln(&mut p, "ln_f");
        let head_out = if config.use_residual_decode {
            fl
        } else {
            config.num_chargers.expect("validated")
        };
        linear(&mut p, "head", e, head_out, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Writes `path` (binary checkpoint) and `path.json` (config sidecar).
    pub fn save(&self, path: &Path, opt: Option<&AdamW>) -> Result<()> {
        save_checkpoint(path, &self.params, opt)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamW>)> {
        let config: ModelConfig = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let (params, opt) = load_checkpoint(path)?;
        let fresh = Self::new(config.clone())?;
        if fresh.params.names() != params.names()
            || fresh.params.values().iter().zip(params.values()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(CoreError::Model("checkpoint does not match its config".into()));
        }
        Ok((Self { config, params }, opt))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
