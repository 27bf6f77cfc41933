//! Conditional variational graph auto-encoder.
//!
//! Graph latents are produced by GCN recognition/prior nets whose shared
//! hidden state attends to a three-row condition stack (context condition,
//! emotion condition, context latent). The adjacency is reconstructed from
//! latent inner products, and the top-k scored cause-effect candidates
//! become relation vectors (head + tail node embeddings) for the decoder.

use std::collections::HashSet;

use crate::error::{TensorError, TensorResult};
use crate::graph::CausalGraph;
use crate::nn::{
    gcn_forward, multi_head_attention, xavier, Activation, AttentionLayer, GcnLayer,
};
use crate::rng::CounterRng;
use crate::tensor::{
    concat_rows, gaussian_reparam_sample, kl_diag_gaussians, no_grad, Tensor, LOG_SIGMA_CLAMP,
};

/// Diagonal Gaussian in (mu, log_sigma) form; log_sigma is clamped at
/// construction so downstream exps stay finite.
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, log_sigma_raw: Tensor) -> GaussianParams {
        GaussianParams {
            mu,
            log_sigma: log_sigma_raw.clamp(LOG_SIGMA_CLAMP.0, LOG_SIGMA_CLAMP.1),
        }
    }

    pub fn sample(&self, rng: &mut CounterRng) -> TensorResult<Tensor> {
        gaussian_reparam_sample(&self.mu, &self.log_sigma, rng)
    }

    pub fn kl_from(&self, prior: &GaussianParams) -> TensorResult<Tensor> {
        kl_diag_gaussians(&self.mu, &self.log_sigma, &prior.mu, &prior.log_sigma)
    }
}

/// The decoder-facing condition stack (Eq ordering: context, emotion,
/// context latent).
pub struct ConditionBundle {
    pub c_ctx: Tensor,
    pub c_emo: Tensor,
    pub z_c: Tensor,
    pub c_cond: Tensor,
}

impl ConditionBundle {
    pub fn new(c_ctx: Tensor, c_emo: Tensor, z_c: Tensor) -> TensorResult<ConditionBundle> {
        let c_cond = concat_rows(&[&c_ctx, &c_emo, &z_c])?;
        Ok(ConditionBundle {
            c_ctx,
            c_emo,
            z_c,
            c_cond,
        })
    }
}

/// Two-layer perceptron d -> d -> d with ReLU, used by the contextual
/// recognition/prior nets.
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init(d: usize, rng: &mut CounterRng) -> Mlp {
        Mlp {
            w1: xavier(d, d, rng),
            b1: Tensor::param(vec![0.0; d], &[1, d]).expect("bias"),
            w2: xavier(d, d, rng),
            b2: Tensor::param(vec![0.0; d], &[1, d]).expect("bias"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let h = x.matmul(&self.w1)?.add_row(&self.b1)?.relu();
        h.matmul(&self.w2)?.add_row(&self.b2)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// GCN-based graph latent net (one of the recognition/prior pair): shared
/// hidden GCN, condition attention, and mu / log-sigma GCN heads.
pub struct GraphNet {
    pub gcn_h: GcnLayer,
    pub cond_attn: AttentionLayer,
    pub gcn_mu: GcnLayer,
    pub gcn_sigma: GcnLayer,
}

impl GraphNet {
    pub fn init(d: usize, num_heads: usize, rng: &mut CounterRng) -> GraphNet {
        GraphNet {
            gcn_h: GcnLayer::init(d, d, Activation::Relu, rng),
            cond_attn: AttentionLayer::init(d, num_heads, rng),
            gcn_mu: GcnLayer::init(d, d, Activation::Linear, rng),
            gcn_sigma: GcnLayer::init(d, d, Activation::Linear, rng),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.gcn_h.collect(&format!("{prefix}.gcn_h"), out);
        self.cond_attn.collect(&format!("{prefix}.cond_attn"), out);
        self.gcn_mu.collect(&format!("{prefix}.gcn_mu"), out);
        self.gcn_sigma.collect(&format!("{prefix}.gcn_sigma"), out);
    }
}

/// All CVGAE parameters: the learnable attention query, the emotion
/// embedding table, contextual recognition/prior MLP pairs, and the graph
/// recognition/prior nets (identical architecture, distinct parameters).
pub struct CvgaeNets {
    pub v_rand: Tensor,
    pub emotion_table: Tensor,
    pub cond_attn: AttentionLayer,
    pub rec_mu: Mlp,
    pub rec_sigma: Mlp,
    pub pri_mu: Mlp,
    pub pri_sigma: Mlp,
    pub rec_graph: GraphNet,
    pub pri_graph: GraphNet,
}

impl CvgaeNets {
    pub fn init(d: usize, num_heads: usize, num_emotions: usize, rng: &mut CounterRng) -> Self {
        let v_rand = Tensor::param((0..d).map(|_| rng.normal() * 0.02).collect(), &[1, d])
            .expect("v_rand");
        let emotion_table = Tensor::param(
            (0..num_emotions * d).map(|_| rng.normal() * 0.02).collect(),
            &[num_emotions, d],
        )
        .expect("emotion table");
        CvgaeNets {
            v_rand,
            emotion_table,
            cond_attn: AttentionLayer::init(d, num_heads, rng),
            rec_mu: Mlp::init(d, rng),
            rec_sigma: Mlp::init(d, rng),
            pri_mu: Mlp::init(d, rng),
            pri_sigma: Mlp::init(d, rng),
            rec_graph: GraphNet::init(d, num_heads, rng),
            pri_graph: GraphNet::init(d, num_heads, rng),
        }
    }

    /// Context condition: the learnable query attending over the encoder
    /// output, 1 x d.
    pub fn context_condition(&self, e_out: &Tensor) -> TensorResult<Tensor> {
        if e_out.rows() == 0 {
            return Err(TensorError::Contract("context_condition: empty encoder output".into()));
        }
        multi_head_attention(&self.cond_attn, &self.v_rand, e_out, e_out, None)
    }

    /// Emotion condition: row `label_id` of the emotion table, 1 x d.
    pub fn emotion_condition(&self, label_id: usize) -> TensorResult<Tensor> {
        self.emotion_table.gather_rows(&[label_id])
    }

    /// Contextual recognition net over the encoded context ⊕ gold response.
    pub fn context_recognition(&self, e_rep: &Tensor) -> TensorResult<GaussianParams> {
        let c_lant = multi_head_attention(&self.cond_attn, &self.v_rand, e_rep, e_rep, None)?;
        Ok(GaussianParams::new(
            self.rec_mu.forward(&c_lant)?,
            self.rec_sigma.forward(&c_lant)?,
        ))
    }

    /// Contextual prior net over the context condition alone.
    pub fn context_prior(&self, c_ctx: &Tensor) -> TensorResult<GaussianParams> {
        Ok(GaussianParams::new(
            self.pri_mu.forward(c_ctx)?,
            self.pri_sigma.forward(c_ctx)?,
        ))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.v_rand"), self.v_rand.clone()));
        out.push((format!("{prefix}.emotion_table"), self.emotion_table.clone()));
        self.cond_attn.collect(&format!("{prefix}.cond_attn"), out);
        self.rec_mu.collect(&format!("{prefix}.rec_mu"), out);
        self.rec_sigma.collect(&format!("{prefix}.rec_sigma"), out);
        self.pri_mu.collect(&format!("{prefix}.pri_mu"), out);
        self.pri_sigma.collect(&format!("{prefix}.pri_sigma"), out);
        self.rec_graph.collect(&format!("{prefix}.rec_graph"), out);
        self.pri_graph.collect(&format!("{prefix}.pri_graph"), out);
    }
}

/// Graph latent pipeline: shared-hidden GCN, condition attention (skipped
/// when `c_cond` is None, reducing to plain VGAE), then mu / log-sigma GCN
/// heads. Returns latents (a sample, or the mean when `sample` is false)
/// plus the Gaussian parameters.
pub fn graph_latents(
    net: &GraphNet,
    node_embeddings: &Tensor,
    adj_norm: &Tensor,
    c_cond: Option<&Tensor>,
    rng: &mut CounterRng,
    sample: bool,
) -> TensorResult<(Tensor, GaussianParams)> {
    if adj_norm.rows() != node_embeddings.rows() {
        return Err(TensorError::Dimension(format!(
            "graph_latents: adjacency {:?} vs {} nodes",
            adj_norm.shape(),
            node_embeddings.rows()
        )));
    }
    let h_hat = gcn_forward(&net.gcn_h, node_embeddings, adj_norm)?;
    let h_v = match c_cond {
        Some(cond) => multi_head_attention(&net.cond_attn, &h_hat, cond, cond, None)?,
        None => h_hat,
    };
    let params = GaussianParams::new(
        gcn_forward(&net.gcn_mu, &h_v, adj_norm)?,
        gcn_forward(&net.gcn_sigma, &h_v, adj_norm)?,
    );
    let z = if sample {
        params.sample(rng)?
    } else {
        params.mu.clone()
    };
    Ok((z, params))
}

/// Full reconstructed adjacency: sigmoid of latent inner products,
/// symmetric with entries in (0, 1).
pub fn reconstruct_adjacency(z: &Tensor) -> TensorResult<Tensor> {
    Ok(z.matmul_nt(z)?.sigmoid())
}

/// Inner-product logits for an explicit pair list, shape [len(pairs), 1].
/// Differentiable route used by the reconstruction loss.
pub fn pair_logits(z: &Tensor, pairs: &[(usize, usize)]) -> TensorResult<Tensor> {
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let zh = z.gather_rows(&heads)?;
    let zt = z.gather_rows(&tails)?;
    let ones = Tensor::full(&[z.cols(), 1], 1.0);
    zh.mul(&zt)?.matmul(&ones)
}

/// One reasoned causal relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationRecord {
    pub head: usize,
    pub tail: usize,
    pub probability: f64,
}

/// Top-k relations by reconstructed probability; `matrix` stacks the
/// relation vectors r_i = emb(head) + emb(tail), one row per record, and is
/// `None` when no candidates existed.
pub struct ReasonedRelations {
    pub records: Vec<RelationRecord>,
    pub matrix: Option<Tensor>,
}

impl ReasonedRelations {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Deterministic top-k: sort candidates by probability descending, break
/// ties by smaller head then smaller tail index, keep min(k, candidates).
pub fn select_top_k(
    pair_probs: &[f64],
    candidates: &[(usize, usize)],
    k: usize,
    node_embeddings: &Tensor,
) -> TensorResult<ReasonedRelations> {
    if pair_probs.len() != candidates.len() {
        return Err(TensorError::Dimension(format!(
            "select_top_k: {} probabilities vs {} candidates",
            pair_probs.len(),
            candidates.len()
        )));
    }
    if candidates.is_empty() {
        return Ok(ReasonedRelations {
            records: Vec::new(),
            matrix: None,
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        pair_probs[b]
            .partial_cmp(&pair_probs[a])
            .unwrap()
            .then_with(|| candidates[a].0.cmp(&candidates[b].0))
            .then_with(|| candidates[a].1.cmp(&candidates[b].1))
    });
    order.truncate(k.min(candidates.len()));
    let records: Vec<RelationRecord> = order
        .iter()
        .map(|&i| RelationRecord {
            head: candidates[i].0,
            tail: candidates[i].1,
            probability: pair_probs[i],
        })
        .collect();
    let heads: Vec<usize> = records.iter().map(|r| r.head).collect();
    let tails: Vec<usize> = records.iter().map(|r| r.tail).collect();
    let matrix = node_embeddings
        .gather_rows(&heads)?
        .add(&node_embeddings.gather_rows(&tails)?)?;
    Ok(ReasonedRelations {
        records,
        matrix: Some(matrix),
    })
}

/// Reconstructed probabilities of the candidate pairs, computed off-graph
/// (selection is not differentiated through).
pub fn candidate_probs(z: &Tensor, candidates: &[(usize, usize)]) -> TensorResult<Vec<f64>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    no_grad(|| Ok(pair_logits(z, candidates)?.sigmoid().to_vec()))
}

/// Human-readable relation dump: `head_word<TAB>tail_word<TAB>probability`,
/// already sorted by probability descending.
pub fn relations_tsv(relations: &ReasonedRelations, nodes: &crate::graph::NodeSet) -> String {
    let mut out = String::new();
    for r in &relations.records {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            nodes.word(r.head),
            nodes.word(r.tail),
            r.probability
        ));
    }
    out
}

// ── Reconstruction targets ───────────────────────────────────────────

/// Pairs, {0,1} targets, and pos_weight for the reconstruction loss.
pub struct ReconTargets {
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
    pub pos_weight: f64,
}

/// Below this node count the loss may cover every unordered pair.
pub const FULL_RECON_MAX_NODES: usize = 128;

/// Sampled mode: candidate CEG pairs (deduplicated to unordered form,
/// labeled from the posterior adjacency) plus an equal count of uniformly
/// sampled non-CEG negative pairs. Full mode: every unordered pair.
/// pos_weight = negatives / positives over the emitted set.
pub fn recon_targets(graph: &CausalGraph, full: bool, rng: &mut CounterRng) -> ReconTargets {
    let n = graph.nodes.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    if full {
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
                targets.push(graph.a_post[i * n + j]);
            }
        }
    } else {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for &(i, j) in &graph.candidates {
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                pairs.push(key);
                targets.push(graph.a_post[i * n + j]);
            }
        }
        let wanted = pairs.len();
        let mut guard = 0;
        while pairs.len() < 2 * wanted && n >= 2 && guard < 100 * wanted.max(1) {
            guard += 1;
            let i = rng.below(n as u64) as usize;
            let j = rng.below(n as u64) as usize;
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.contains(&key) {
                continue;
            }
            seen.insert(key);
            pairs.push(key);
            targets.push(0.0);
        }
    }
    let positives = targets.iter().filter(|t| **t == 1.0).count();
    let negatives = targets.len() - positives;
    let pos_weight = if positives == 0 {
        1.0
    } else {
        negatives as f64 / positives as f64
    };
    ReconTargets {
        pairs,
        targets,
        pos_weight,
    }
}
