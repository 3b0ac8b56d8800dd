//! The joint aspect-detection / sentiment model.
//!
//! Word vectors `X` feed a Bi-LSTM producing `H`. For every aspect `j`,
//! two additive attentions pool `X` and `H` into contextualized aspect
//! embeddings (CAEs). Their concatenation drives that aspect's detection
//! head, and the CAEs serve as dot-attention queries over `X` and `H`
//! for the sentiment features, which a single shared head classifies.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GroupId, NodeId, ParamCategory, ParamId, ParamStore};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{
    additive_attention, bilstm_forward, dense, dot_attention, embedding_lookup, glorot_uniform, Activation,
    AdditiveAttention, Dense, Dropout, EmbeddingTable, LstmCell, Mode,
};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    /// One sentiment head per aspect instead of a shared one.
    WithoutShare,
    /// Sentiment queries are free per-aspect vectors instead of CAEs.
    WithoutCae,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Full, ModelVariant::WithoutShare, ModelVariant::WithoutCae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::WithoutShare => "without_share",
            ModelVariant::WithoutCae => "without_cae",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (expected full, without_share or without_cae)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_aspects: usize,
    pub n_polarities: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    /// Width of the ReLU layer in both the detection and sentiment heads.
    pub head_hidden: usize,
    /// Context size of the additive attentions; `None` uses each level's input size.
    pub attn_dim: Option<usize>,
    pub variant: ModelVariant,
    pub freeze_embedding: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_aspects: usize, n_polarities: usize) -> Self {
        Self {
            vocab_size,
            n_aspects,
            n_polarities,
            embed_dim: 300,
            lstm_hidden: 100,
            head_hidden: 100,
            attn_dim: None,
            variant: ModelVariant::Full,
            freeze_embedding: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_aspects", self.n_aspects),
            ("n_polarities", self.n_polarities),
            ("embed_dim", self.embed_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("head_hidden", self.head_hidden),
            ("attn_dim", self.attn_dim.unwrap_or(1)),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::invalid(format!("model dimension `{name}` must be positive"))),
            None => Ok(()),
        }
    }

    /// `d_w + 2 d_s`, the size of both the CAE pair and the sentiment features.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim + 2 * self.lstm_hidden
    }
}

/// What a parameter group does, for census reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embedding,
    Bilstm,
    CaeAttention,
    AcdHead,
    ScHead,
    Ciae,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Embedding => "embedding",
            Role::Bilstm => "bilstm",
            Role::CaeAttention => "cae_attention",
            Role::AcdHead => "acd_head",
            Role::ScHead => "sc_head",
            Role::Ciae => "ciae",
        }
    }
}

/// Trainable scalar counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub variant: ModelVariant,
    pub total: usize,
    pub by_role: BTreeMap<Role, usize>,
    /// Keyed by the category's display form, e.g. `per_aspect(0)`.
    pub by_category: BTreeMap<String, usize>,
    /// Parameter groups in construction order.
    pub groups: Vec<GroupCount>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub name: String,
    pub role: Role,
    pub scalars: usize,
}

impl ParameterCensus {
    pub fn role(&self, role: Role) -> usize {
        self.by_role.get(&role).copied().unwrap_or(0)
    }
}

impl fmt::Display for ParameterCensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant: {}", self.variant)?;
        for (role, n) in &self.by_role {
            writeln!(f, "{}: {n}", role.as_str())?;
        }
        writeln!(f, "total: {}", self.total)?;
        write!(f, "groups:")?;
        for g in &self.groups {
            write!(f, "\n  {} ({}): {}", g.name, g.role.as_str(), g.scalars)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AspectModule {
    pub attn_x: AdditiveAttention,
    pub attn_h: AdditiveAttention,
    pub acd_hidden: Dense,
    pub acd_out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentimentHead {
    pub hidden: Dense,
    pub out: Dense,
}

/// Free per-aspect sentiment queries used by [`ModelVariant::WithoutCae`].
#[derive(Clone, Debug, PartialEq)]
pub struct AspectQuery {
    pub x: ParamId,
    pub h: ParamId,
}

/// How a forward pass treats dropout.
pub enum Pass<'r> {
    Eval,
    Train { dropout: Dropout, rng: &'r mut ChaCha8Rng },
}

/// Graph nodes of one forward pass, indexed by aspect.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub x: NodeId,
    pub h: NodeId,
    pub y_a: Vec<NodeId>,
    pub y_s: Vec<NodeId>,
    pub alpha_x: Vec<NodeId>,
    pub alpha_h: Vec<NodeId>,
    pub beta_x: Vec<NodeId>,
    pub beta_h: Vec<NodeId>,
}

/// Attention weights over token positions for one aspect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub alpha_x: Vec<f64>,
    pub alpha_h: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    /// Detection probability per aspect.
    pub y_hat_a: Vec<f64>,
    /// Polarity distribution per aspect, `N x M`.
    pub y_hat_s: Vec<Vec<f64>>,
    pub attention: Vec<AttentionMaps>,
}

impl ForwardOutput {
    pub fn from_nodes(g: &Graph, nodes: &ForwardNodes) -> Self {
        let vec = |id: &NodeId| g.value(*id).data().to_vec();
        Self {
            y_hat_a: nodes.y_a.iter().map(|&id| g.value(id).data()[0]).collect(),
            y_hat_s: nodes.y_s.iter().map(vec).collect(),
            attention: (0..nodes.y_a.len())
                .map(|j| AttentionMaps {
                    alpha_x: vec(&nodes.alpha_x[j]),
                    alpha_h: vec(&nodes.alpha_h[j]),
                    beta_x: vec(&nodes.beta_x[j]),
                    beta_h: vec(&nodes.beta_h[j]),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    config: ModelConfig,
    store: ParamStore,
    roles: Vec<(GroupId, Role)>,
    pub embedding: EmbeddingTable,
    pub lstm_fwd: LstmCell,
    pub lstm_bwd: LstmCell,
    pub aspects: Vec<AspectModule>,
    /// One head under `Full` and `WithoutCae`, `N` heads under `WithoutShare`.
    pub sc_heads: Vec<SentimentHead>,
    pub queries: Option<Vec<AspectQuery>>,
}

impl JointModel {
    /// Builds a freshly initialized model; every random draw comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut roles = Vec::new();
        let mut group = |store: &mut ParamStore, name: String, cat: ParamCategory, role: Role| {
            let id = store.add_group(name, cat);
            roles.push((id, role));
            id
        };

        let (d_w, d_s, hid) = (config.embed_dim, config.lstm_hidden, config.head_hidden);
        let feat = config.feature_dim();

        let g_emb = group(&mut store, "embedding".into(), ParamCategory::Embedding, Role::Embedding);
        let embedding = EmbeddingTable::new(&mut store, g_emb, config.vocab_size, d_w, &mut rng);
        if config.freeze_embedding {
            store.set_trainable(embedding.table, false);
        }

        let g_lstm = group(&mut store, "bilstm".into(), ParamCategory::Bilstm, Role::Bilstm);
        let lstm_fwd = LstmCell::new(&mut store, g_lstm, "bilstm.fwd", d_w, d_s, &mut rng);
        let lstm_bwd = LstmCell::new(&mut store, g_lstm, "bilstm.bwd", d_w, d_s, &mut rng);

        let mut aspects = Vec::with_capacity(config.n_aspects);
        for j in 0..config.n_aspects {
            let cat = ParamCategory::PerAspect(j);
            let g_cae = group(&mut store, format!("aspect{j}.cae"), cat, Role::CaeAttention);
            let m_x = config.attn_dim.unwrap_or(d_w);
            let m_h = config.attn_dim.unwrap_or(2 * d_s);
            let attn_x = AdditiveAttention::new(&mut store, g_cae, &format!("aspect{j}.attn_x"), d_w, m_x, &mut rng);
            let attn_h = AdditiveAttention::new(&mut store, g_cae, &format!("aspect{j}.attn_h"), 2 * d_s, m_h, &mut rng);
            let g_acd = group(&mut store, format!("aspect{j}.acd"), cat, Role::AcdHead);
            let acd_hidden = Dense::new(&mut store, g_acd, &format!("aspect{j}.acd.hidden"), feat, hid, Activation::Relu, &mut rng);
            let acd_out = Dense::new(&mut store, g_acd, &format!("aspect{j}.acd.out"), hid, 1, Activation::Sigmoid, &mut rng);
            aspects.push(AspectModule {
                attn_x,
                attn_h,
                acd_hidden,
                acd_out,
            });
        }

        let sentiment_head = |store: &mut ParamStore, gid: GroupId, prefix: &str, rng: &mut ChaCha8Rng| SentimentHead {
            hidden: Dense::new(store, gid, &format!("{prefix}.hidden"), feat, hid, Activation::Relu, rng),
            out: Dense::new(store, gid, &format!("{prefix}.out"), hid, config.n_polarities, Activation::Softmax, rng),
        };
        let sc_heads = if config.variant == ModelVariant::WithoutShare {
            (0..config.n_aspects)
                .map(|j| {
                    let gid = group(&mut store, format!("aspect{j}.sc_head"), ParamCategory::PerAspect(j), Role::ScHead);
                    sentiment_head(&mut store, gid, &format!("aspect{j}.sc_head"), &mut rng)
                })
                .collect()
        } else {
            let gid = group(&mut store, "sc_head".into(), ParamCategory::Shared, Role::ScHead);
            vec![sentiment_head(&mut store, gid, "sc_head", &mut rng)]
        };

        let queries = (config.variant == ModelVariant::WithoutCae).then(|| {
            (0..config.n_aspects)
                .map(|j| {
                    let gid = group(&mut store, format!("aspect{j}.ciae"), ParamCategory::PerAspect(j), Role::Ciae);
                    let x = glorot_uniform(1, d_w, &mut rng).into_data();
                    let h = glorot_uniform(1, 2 * d_s, &mut rng).into_data();
                    AspectQuery {
                        x: store.add(gid, format!("aspect{j}.ciae.x"), Tensor::vector(x)),
                        h: store.add(gid, format!("aspect{j}.ciae.h"), Tensor::vector(h)),
                    }
                })
                .collect()
        });

        Ok(Self {
            config,
            store,
            roles,
            embedding,
            lstm_fwd,
            lstm_bwd,
            aspects,
            sc_heads,
            queries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn n_aspects(&self) -> usize {
        self.config.n_aspects
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces the word vectors, keeping the padding row at zero.
    pub fn set_embeddings(&mut self, matrix: &Tensor) -> Result<()> {
        let slot = self.store.value_mut(self.embedding.table);
        if slot.shape() != matrix.shape() {
            return Err(Error::shape("set_embeddings", slot.shape(), matrix.shape()));
        }
        slot.clone_from(matrix);
        slot.row_mut(0).fill(0.0);
        Ok(())
    }

    pub fn role_of(&self, group: GroupId) -> Role {
        self.roles
            .iter()
            .find(|(g, _)| *g == group)
            .map(|&(_, r)| r)
            .expect("every group is registered with a role")
    }

    fn check_aspect(&self, j: usize) -> Result<()> {
        if j >= self.config.n_aspects {
            return Err(Error::invalid(format!(
                "aspect index {j} out of range for {} aspects",
                self.config.n_aspects
            )));
        }
        Ok(())
    }

    /// Returns `(v^X, v^H, alpha^X, alpha^H)` for aspect `j`.
    pub fn compute_cae(
        &self,
        g: &mut Graph,
        x: NodeId,
        h: NodeId,
        mask: &[bool],
        j: usize,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        self.check_aspect(j)?;
        let a = &self.aspects[j];
        let (vx, ax) = additive_attention(g, &a.attn_x, x, mask)?;
        let (vh, ah) = additive_attention(g, &a.attn_h, h, mask)?;
        Ok((vx, vh, ax, ah))
    }

    /// Detection probability `[1]` for aspect `j` from its CAE pair.
    pub fn predict_aspect_probability(&self, g: &mut Graph, vx: NodeId, vh: NodeId, j: usize) -> Result<NodeId> {
        self.check_aspect(j)?;
        let a = &self.aspects[j];
        let v = g.concat(&[vx, vh])?;
        let hidden = dense(g, &a.acd_hidden, v)?;
        dense(g, &a.acd_out, hidden)
    }

    /// Sentiment features of aspect `j` and their dot-attention weights
    /// `(v_s, beta^X, beta^H)`. `cae` supplies the queries for the
    /// variants that use CAEs; `WithoutCae` reads its own query vectors.
    pub fn sentiment_features(
        &self,
        g: &mut Graph,
        x: NodeId,
        h: NodeId,
        mask: &[bool],
        j: usize,
        cae: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        self.check_aspect(j)?;
        let (qx, qh) = match (&self.queries, cae) {
            (Some(q), _) => (g.param(q[j].x), g.param(q[j].h)),
            (None, Some(pair)) => pair,
            (None, None) => {
                return Err(Error::invalid(format!(
                    "variant {} needs CAE queries for sentiment features",
                    self.config.variant
                )))
            }
        };
        let (sx, bx) = dot_attention(g, x, qx, mask)?;
        let (sh, bh) = dot_attention(g, h, qh, mask)?;
        let v = g.concat(&[sx, sh])?;
        Ok((v, bx, bh))
    }

    /// Polarity distribution `[M]` for aspect `j`.
    pub fn predict_sentiment_distribution(&self, g: &mut Graph, v: NodeId, j: usize) -> Result<NodeId> {
        self.check_aspect(j)?;
        let head = if self.sc_heads.len() == 1 { &self.sc_heads[0] } else { &self.sc_heads[j] };
        let hidden = dense(g, &head.hidden, v)?;
        dense(g, &head.out, hidden)
    }

    pub fn forward_graph(&self, g: &mut Graph, token_ids: &[usize], mask: &[bool], pass: Pass) -> Result<ForwardNodes> {
        if token_ids.len() != mask.len() {
            return Err(Error::shape("forward", &[token_ids.len()], &[mask.len()]));
        }
        let x = embedding_lookup(g, &self.embedding, token_ids)?;
        let (x, h) = match pass {
            Pass::Eval => {
                let h = bilstm_forward(g, &self.lstm_fwd, &self.lstm_bwd, x, mask)?;
                (x, h)
            }
            Pass::Train { dropout, rng } => {
                let x = dropout.apply(g, x, Mode::Train, rng)?;
                let h = bilstm_forward(g, &self.lstm_fwd, &self.lstm_bwd, x, mask)?;
                let h = dropout.apply(g, h, Mode::Train, rng)?;
                (x, h)
            }
        };

        let n = self.config.n_aspects;
        let mut nodes = ForwardNodes {
            x,
            h,
            y_a: Vec::with_capacity(n),
            y_s: Vec::with_capacity(n),
            alpha_x: Vec::with_capacity(n),
            alpha_h: Vec::with_capacity(n),
            beta_x: Vec::with_capacity(n),
            beta_h: Vec::with_capacity(n),
        };
        for j in 0..n {
            let (vx, vh, ax, ah) = self.compute_cae(g, x, h, mask, j)?;
            let y_a = self.predict_aspect_probability(g, vx, vh, j)?;
            let (vs, bx, bh) = self.sentiment_features(g, x, h, mask, j, Some((vx, vh)))?;
            let y_s = self.predict_sentiment_distribution(g, vs, j)?;
            nodes.y_a.push(y_a);
            nodes.y_s.push(y_s);
            nodes.alpha_x.push(ax);
            nodes.alpha_h.push(ah);
            nodes.beta_x.push(bx);
            nodes.beta_h.push(bh);
        }
        Ok(nodes)
    }

    /// Deterministic evaluation-mode forward pass over an unpadded sequence.
    pub fn forward(&self, token_ids: &[usize]) -> Result<ForwardOutput> {
        self.forward_masked(token_ids, &vec![true; token_ids.len()])
    }

    pub fn forward_masked(&self, token_ids: &[usize], mask: &[bool]) -> Result<ForwardOutput> {
        let mut g = Graph::new(&self.store);
        let nodes = self.forward_graph(&mut g, token_ids, mask, Pass::Eval)?;
        Ok(ForwardOutput::from_nodes(&g, &nodes))
    }

    /// Evaluation-mode outputs for each row of a padded batch. Attention
    /// maps keep only the unmasked positions.
    pub fn forward_batch(&self, batch: &Batch) -> Result<Vec<ForwardOutput>> {
        batch
            .token_ids
            .iter()
            .zip(&batch.masks)
            .map(|(ids, mask)| {
                let mut out = self.forward_masked(ids, mask)?;
                let keep = |v: &mut Vec<f64>| {
                    let mut it = mask.iter();
                    v.retain(|_| *it.next().expect("map length equals mask length"));
                };
                for maps in &mut out.attention {
                    keep(&mut maps.alpha_x);
                    keep(&mut maps.alpha_h);
                    keep(&mut maps.beta_x);
                    keep(&mut maps.beta_h);
                }
                Ok(out)
            })
            .collect()
    }

    pub fn parameter_census(&self) -> ParameterCensus {
        let mut by_role = BTreeMap::new();
        let mut by_category = BTreeMap::new();
        let mut total = 0;
        let mut groups = Vec::new();
        for (gi, group) in self.store.groups().iter().enumerate() {
            let count: usize = group
                .params
                .iter()
                .filter(|&&p| self.store.is_trainable(p))
                .map(|&p| self.store.value(p).numel())
                .sum();
            *by_role.entry(self.roles[gi].1).or_insert(0) += count;
            *by_category.entry(group.category.to_string()).or_insert(0) += count;
            groups.push(GroupCount {
                name: group.name.clone(),
                role: self.roles[gi].1,
                scalars: count,
            });
            total += count;
        }
        ParameterCensus {
            variant: self.config.variant,
            total,
            by_role,
            by_category,
            groups,
        }
    }
}
