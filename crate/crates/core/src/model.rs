//! Full model assembly: shared embeddings, encoder, CVGAE reasoning,
//! multi-source decoder, output head, and both training losses.

use std::collections::HashMap;

use crate::cvgae::{
    candidate_probs, graph_latents, pair_logits, recon_targets, select_top_k, ConditionBundle,
    CvgaeNets, GaussianParams, ReasonedRelations, RelationRecord,
};
use crate::data::{
    context_token_ids, next_user_tokens, prev_user_tokens, response_token_ids, DialogueExample,
    Speaker, Vocab, BOS, EOS, SYS,
};
use crate::error::{CareError, Result, TensorResult};
use crate::graph::{CausalGraph, GraphBuilder};
use crate::nn::{
    decoder_layer, multi_head_attention, normalize_adjacency, xavier, AttentionLayer,
    DecoderLayerParams, EncoderStack, ForwardCtx, LayerNormParams, PositionalEncoding,
};
use crate::rng::CounterRng;
use crate::tensor::{concat_cols, cross_entropy_rows, weighted_bce_logits, no_grad, Tensor};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub k: usize,
    pub max_nodes: usize,
    pub dropout: f64,
    pub max_context_tokens: usize,
    pub max_response_tokens: usize,
    pub tie_output: bool,
    pub no_reasoning: bool,
    pub no_condition: bool,
    /// Reconstruction loss over every node pair instead of sampled pairs;
    /// only sensible for small graphs.
    pub full_recon: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 300,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 1200,
            k: 512,
            max_nodes: 800,
            dropout: 0.1,
            max_context_tokens: 256,
            max_response_tokens: 64,
            tie_output: false,
            no_reasoning: false,
            no_condition: false,
            full_recon: false,
        }
    }
}

/// Loss-term weights; all 1.0 unless configured otherwise.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub generation: f64,
    pub reconstruction: f64,
    pub kl_graph: f64,
    pub kl_context: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            generation: 1.0,
            reconstruction: 1.0,
            kl_graph: 1.0,
            kl_context: 1.0,
        }
    }
}

// ── Multi-source cross sub-layer ─────────────────────────────────────

/// Eq-18 sub-layer: parallel attention over the encoder output and the
/// relation matrix, fused by W_multi, with residual + layer norm.
pub struct MultiSourceLayer {
    pub attn_ctx: AttentionLayer,
    pub attn_rel: AttentionLayer,
    pub w_multi: Tensor,
    pub ln: LayerNormParams,
}

impl MultiSourceLayer {
    pub fn init(d: usize, num_heads: usize, rng: &mut CounterRng) -> Self {
        MultiSourceLayer {
            attn_ctx: AttentionLayer::init(d, num_heads, rng),
            attn_rel: AttentionLayer::init(d, num_heads, rng),
            w_multi: xavier(2 * d, d, rng),
            ln: LayerNormParams::init(d),
        }
    }

    /// `H_out = LayerNorm((MH(H, E, E) ⊕ MH(H, R, R)) W_multi + H)`; the
    /// concatenation order is fixed as [context; relations].
    pub fn forward(
        &self,
        h_in: &Tensor,
        e_out: &Tensor,
        relations: &Tensor,
        ctx: &ForwardCtx,
    ) -> TensorResult<Tensor> {
        let h_ctx = multi_head_attention(&self.attn_ctx, h_in, e_out, e_out, None)?;
        let h_rel = multi_head_attention(&self.attn_rel, h_in, relations, relations, None)?;
        let fused = concat_cols(&h_ctx, &h_rel)?.matmul(&self.w_multi)?;
        self.ln.forward(&ctx.apply(fused)?.add(h_in)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn_ctx.collect(&format!("{prefix}.attn_ctx"), out);
        self.attn_rel.collect(&format!("{prefix}.attn_rel"), out);
        out.push((format!("{prefix}.w_multi"), self.w_multi.clone()));
        self.ln.collect(&format!("{prefix}.ln"), out);
    }
}

/// Free-function form of the multi-source cross sub-layer.
pub fn multi_source_cross(
    layer: &MultiSourceLayer,
    h_in: &Tensor,
    e_out: &Tensor,
    relations: &Tensor,
) -> TensorResult<Tensor> {
    layer.forward(h_in, e_out, relations, &ForwardCtx::eval())
}

// ── Losses ───────────────────────────────────────────────────────────

/// Mean negative log-likelihood per gold token (the log-space equivalent of
/// maximizing the product of token probabilities).
pub fn loss_generation(logits: &Tensor, gold_ids: &[usize]) -> TensorResult<Tensor> {
    cross_entropy_rows(logits, gold_ids)
}

/// Reasoning loss: weighted-BCE reconstruction term plus the two KL terms
/// (the negation of the maximized reasoning objective).
pub fn loss_reasoning(
    recon_logits: &Tensor,
    targets: &Tensor,
    pos_weight: f64,
    kl_graph: &Tensor,
    kl_context: &Tensor,
) -> TensorResult<Tensor> {
    weighted_bce_logits(recon_logits, targets, pos_weight)?
        .add(kl_graph)?
        .add(kl_context)
}

// ── Prepared examples ────────────────────────────────────────────────

/// Example pre-encoded against a vocab and with its causal graphs built.
#[derive(Debug)]
pub struct Prepared {
    pub context_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub emotion_id: usize,
    pub node_ids: Vec<usize>,
    pub graph: CausalGraph,
}

// ── The model ────────────────────────────────────────────────────────

pub struct CareModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub emotion_labels: Vec<String>,
    emotion_index: HashMap<String, usize>,
    pub embedding: Tensor,
    pub encoder: EncoderStack,
    pub decoder_layers: Vec<(DecoderLayerParams, MultiSourceLayer)>,
    pub decoder_pos: PositionalEncoding,
    pub cvgae: CvgaeNets,
    /// None when the output projection is tied to the embedding table.
    pub w_o: Option<Tensor>,
    pub b_o: Tensor,
}

/// Diagnostics and differentiable losses from one training forward pass.
pub struct ForwardOutputs {
    pub logits: Tensor,
    pub relations: ReasonedRelations,
    pub loss_generation: Tensor,
    pub loss_reasoning: Tensor,
    pub loss_total: Tensor,
    pub kl_graph: f64,
    pub kl_context: f64,
    pub recon: f64,
    pub gold_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    TopP(f64),
}

pub struct GenerateOptions {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
    /// Use Gaussian means instead of samples on the prior path.
    pub use_mean: bool,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            strategy: DecodeStrategy::Greedy,
            max_len: 64,
            use_mean: false,
            seed: 0,
        }
    }
}

impl CareModel {
    pub fn init(
        config: ModelConfig,
        vocab: Vocab,
        emotion_labels: Vec<String>,
        seed: u64,
    ) -> CareModel {
        let root = CounterRng::new(seed);
        let d = config.d;
        let mut emb_rng = root.derive(1);
        let embedding = Tensor::param(
            (0..vocab.len() * d).map(|_| emb_rng.normal() * 0.02).collect(),
            &[vocab.len(), d],
        )
        .expect("embedding table");
        let max_pos = config.max_context_tokens + config.max_response_tokens + 8;
        let mut enc_rng = root.derive(2);
        let encoder = EncoderStack::new(
            embedding.clone(),
            d,
            config.enc_layers,
            config.num_heads,
            config.d_ff,
            max_pos,
            &mut enc_rng,
        );
        let mut dec_rng = root.derive(3);
        let decoder_layers = (0..config.dec_layers)
            .map(|_| {
                (
                    DecoderLayerParams::init(d, config.num_heads, config.d_ff, &mut dec_rng),
                    MultiSourceLayer::init(d, config.num_heads, &mut dec_rng),
                )
            })
            .collect();
        let mut cv_rng = root.derive(4);
        let cvgae = CvgaeNets::init(d, config.num_heads, emotion_labels.len(), &mut cv_rng);
        let mut out_rng = root.derive(5);
        let w_o = if config.tie_output {
            None
        } else {
            Some(xavier(d, vocab.len(), &mut out_rng))
        };
        let b_o = Tensor::param(vec![0.0; vocab.len()], &[1, vocab.len()]).expect("b_o");
        let emotion_index = emotion_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        CareModel {
            config,
            vocab,
            emotion_labels,
            emotion_index,
            embedding,
            encoder,
            decoder_layers,
            decoder_pos: PositionalEncoding::new(max_pos, d),
            cvgae,
            w_o,
            b_o,
        }
    }

    /// Replace the embedding table contents (pre-trained vectors).
    pub fn set_embedding_table(&self, table: &[f64]) {
        self.embedding.set_data(table);
    }

    /// All parameters in a stable, documented order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), self.embedding.clone()));
        self.encoder.collect("encoder", &mut out);
        for (i, (layer, ms)) in self.decoder_layers.iter().enumerate() {
            layer.collect(&format!("decoder.layer{i}"), &mut out);
            ms.collect(&format!("decoder.layer{i}.multi_source"), &mut out);
        }
        self.cvgae.collect("cvgae", &mut out);
        if let Some(w_o) = &self.w_o {
            out.push(("output.w_o".to_string(), w_o.clone()));
        }
        out.push(("output.b_o".to_string(), self.b_o.clone()));
        out
    }

    /// Deterministic (name, shape) listing plus the total scalar count.
    pub fn parameter_manifest(&self) -> (Vec<(String, Vec<usize>)>, usize) {
        let params = self.params();
        let total = params.iter().map(|(_, t)| t.numel()).sum();
        (
            params
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
            total,
        )
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    pub fn emotion_id(&self, label: &str) -> Result<usize> {
        self.emotion_index.get(label).copied().ok_or_else(|| CareError::Label {
            label: label.to_string(),
            valid: self.emotion_labels.join(", "),
        })
    }

    /// Encode a raw example: token ids, emotion id, causal graph, node ids.
    /// Out-of-vocabulary words never become graph nodes.
    pub fn prepare(&self, example: &DialogueExample, builder: &GraphBuilder) -> Result<Prepared> {
        let context_ids = context_token_ids(
            &example.context,
            &self.vocab,
            self.config.max_context_tokens,
        );
        let response_ids = response_token_ids(
            &example.response,
            &self.vocab,
            self.config.max_response_tokens,
        );
        let emotion_id = self.emotion_id(&example.emotion)?;
        let prev = prev_user_tokens(example);
        let next = next_user_tokens(example);
        let graph = builder.build(
            &prev,
            next.as_deref(),
            &example.emotion,
            |w| self.vocab.contains(w),
        )?;
        let node_ids = graph
            .nodes
            .words()
            .iter()
            .map(|w| self.vocab.id(w))
            .collect();
        Ok(Prepared {
            context_ids,
            response_ids,
            emotion_id,
            node_ids,
            graph,
        })
    }

    fn output_logits(&self, h: &Tensor) -> TensorResult<Tensor> {
        let scores = match &self.w_o {
            Some(w_o) => h.matmul(w_o)?,
            None => h.matmul_nt(&self.embedding)?,
        };
        scores.add_row(&self.b_o)
    }

    /// Decoder stack over teacher-forced or generated prefixes; `relations`
    /// is the k x d relation matrix (or the zero-row stand-in).
    fn decode_hidden(
        &self,
        dec_input_ids: &[usize],
        e_out: &Tensor,
        relations: &Tensor,
        ctx: &ForwardCtx,
    ) -> TensorResult<Tensor> {
        let d = self.config.d;
        let t = dec_input_ids.len();
        let emb = self
            .embedding
            .gather_rows(dec_input_ids)?
            .mul_scalar((d as f64).sqrt());
        let mut h = ctx.apply(emb.add(&self.decoder_pos.slice(t)?)?)?;
        for (layer, ms) in &self.decoder_layers {
            h = decoder_layer(layer, &h, |h1| ms.forward(h1, e_out, relations, ctx), ctx)?;
        }
        Ok(h)
    }

    /// Teacher-forced logits for `response_ids` given fixed memories;
    /// exposed for causal-integrity checks and perplexity.
    pub fn teacher_forced_logits(
        &self,
        response_ids: &[usize],
        e_out: &Tensor,
        relations: &Tensor,
        ctx: &ForwardCtx,
    ) -> TensorResult<Tensor> {
        let mut dec_in = Vec::with_capacity(response_ids.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&response_ids[..response_ids.len() - 1]);
        let h = self.decode_hidden(&dec_in, e_out, relations, ctx)?;
        self.output_logits(&h)
    }

    fn relation_matrix(&self, relations: &ReasonedRelations) -> Tensor {
        match &relations.matrix {
            Some(m) => m.clone(),
            None => Tensor::zeros(&[1, self.config.d]),
        }
    }

    /// Relations taken directly from the prior graph (the "w/o reasoning"
    /// ablation): prior edges in index order, truncated to k.
    fn prior_graph_relations(
        &self,
        prepared: &Prepared,
        node_emb: &Tensor,
    ) -> TensorResult<ReasonedRelations> {
        let edges: Vec<(usize, usize)> = prepared
            .graph
            .prior_edges
            .iter()
            .copied()
            .take(self.config.k)
            .collect();
        if edges.is_empty() {
            return Ok(ReasonedRelations {
                records: Vec::new(),
                matrix: None,
            });
        }
        let heads: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let tails: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let matrix = node_emb
            .gather_rows(&heads)?
            .add(&node_emb.gather_rows(&tails)?)?;
        Ok(ReasonedRelations {
            records: edges
                .iter()
                .map(|&(head, tail)| RelationRecord {
                    head,
                    tail,
                    probability: 1.0,
                })
                .collect(),
            matrix: Some(matrix),
        })
    }

    /// Conditions on the recognition (training) path; `None` under the
    /// "w/o condition" ablation.
    #[allow(clippy::type_complexity)]
    fn training_conditions(
        &self,
        prepared: &Prepared,
        ctx: &ForwardCtx,
        rng: &mut CounterRng,
    ) -> TensorResult<Option<(ConditionBundle, ConditionBundle, GaussianParams, GaussianParams)>>
    {
        if self.config.no_condition {
            return Ok(None);
        }
        let e_out = self.encoder.encode(&prepared.context_ids, None, ctx)?;
        let c_ctx = self.cvgae.context_condition(&e_out)?;
        let c_emo = self.cvgae.emotion_condition(prepared.emotion_id)?;
        // C ⊕ R: context ids, a system tag, then the gold tokens (no EOS).
        let mut rep_ids = prepared.context_ids.clone();
        rep_ids.push(SYS);
        rep_ids.extend_from_slice(&prepared.response_ids[..prepared.response_ids.len() - 1]);
        let e_rep = self.encoder.encode(&rep_ids, None, ctx)?;
        let q_c = self.cvgae.context_recognition(&e_rep)?;
        let p_c = self.cvgae.context_prior(&c_ctx)?;
        let z_c = q_c.sample(rng)?;
        let z_c_prior = p_c.sample(rng)?;
        let cond_q = ConditionBundle::new(c_ctx.clone(), c_emo.clone(), z_c)?;
        let cond_p = ConditionBundle::new(c_ctx, c_emo, z_c_prior)?;
        Ok(Some((cond_q, cond_p, q_c, p_c)))
    }

    /// Full training forward pass: encoder, conditions, recognition nets,
    /// reconstruction, top-k relation selection, teacher-forced decoding,
    /// and both losses. `kl_scale` implements optional KL warm-up.
    pub fn forward_train(
        &self,
        prepared: &Prepared,
        weights: &LossWeights,
        kl_scale: f64,
        rng: &mut CounterRng,
        ctx: &ForwardCtx,
    ) -> Result<ForwardOutputs> {
        if prepared.response_ids.is_empty() {
            return Err(CareError::Validation("example has no gold response".into()));
        }
        let e_out = self.encoder.encode(&prepared.context_ids, None, ctx)?;
        let node_emb = self.embedding.gather_rows(&prepared.node_ids)?;
        let n = prepared.graph.nodes.len();

        let zero = || Tensor::scalar(0.0);
        let (relations, l_reason, kl_g_v, kl_c_v, recon_v);
        if self.config.no_reasoning {
            relations = self.prior_graph_relations(prepared, &node_emb)?;
            l_reason = zero();
            kl_g_v = 0.0;
            kl_c_v = 0.0;
            recon_v = 0.0;
        } else {
            let conds = self.training_conditions(prepared, ctx, rng)?;
            let (cond_q, cond_p, kl_c) = match &conds {
                Some((cq, cp, q_c, p_c)) => {
                    (Some(&cq.c_cond), Some(&cp.c_cond), q_c.kl_from(p_c)?)
                }
                None => (None, None, zero()),
            };
            let adj_post = normalize_adjacency(&prepared.graph.a_post, n)?;
            let adj_prior = normalize_adjacency(&prepared.graph.a_prior, n)?;
            let (z_g, q_g) =
                graph_latents(&self.cvgae.rec_graph, &node_emb, &adj_post, cond_q, rng, true)?;
            let (_, p_g) =
                graph_latents(&self.cvgae.pri_graph, &node_emb, &adj_prior, cond_p, rng, false)?;
            let kl_g = q_g.kl_from(&p_g)?;

            let targets = recon_targets(&prepared.graph, self.config.full_recon, rng);
            let recon = if targets.pairs.is_empty() {
                zero()
            } else {
                let logits = pair_logits(&z_g, &targets.pairs)?;
                let t = Tensor::from_vec(targets.targets.clone(), &[targets.pairs.len(), 1])
                    .map_err(CareError::Tensor)?;
                weighted_bce_logits(&logits, &t, targets.pos_weight)?
            };

            let probs = candidate_probs(&z_g, &prepared.graph.candidates)?;
            relations = select_top_k(&probs, &prepared.graph.candidates, self.config.k, &node_emb)?;

            kl_g_v = kl_g.item();
            kl_c_v = kl_c.item();
            recon_v = recon.item();
            l_reason = recon
                .mul_scalar(weights.reconstruction)
                .add(&kl_g.mul_scalar(weights.kl_graph * kl_scale))?
                .add(&kl_c.mul_scalar(weights.kl_context * kl_scale))?;
        }

        let r_matrix = self.relation_matrix(&relations);
        let logits = self.teacher_forced_logits(&prepared.response_ids, &e_out, &r_matrix, ctx)?;
        let l_gen = loss_generation(&logits, &prepared.response_ids)?;
        let total = l_gen.mul_scalar(weights.generation).add(&l_reason)?;
        if !total.is_finite() {
            return Err(CareError::Training("non-finite loss".into()));
        }
        Ok(ForwardOutputs {
            logits,
            relations,
            loss_generation: l_gen,
            loss_reasoning: l_reason,
            loss_total: total,
            kl_graph: kl_g_v,
            kl_context: kl_c_v,
            recon: recon_v,
            gold_tokens: prepared.response_ids.len(),
        })
    }

    /// Prior-path reasoning shared by generation, `reason`, and evaluation:
    /// encodes the context and produces relations without gold access.
    pub fn prior_reasoning(
        &self,
        prepared: &Prepared,
        use_mean: bool,
        rng: &mut CounterRng,
    ) -> Result<(Tensor, ReasonedRelations)> {
        let ctx = ForwardCtx::eval();
        let e_out = self.encoder.encode(&prepared.context_ids, None, &ctx)?;
        let node_emb = self.embedding.gather_rows(&prepared.node_ids)?;
        if self.config.no_reasoning {
            let relations = self.prior_graph_relations(prepared, &node_emb)?;
            return Ok((e_out, relations));
        }
        let cond = if self.config.no_condition {
            None
        } else {
            let c_ctx = self.cvgae.context_condition(&e_out)?;
            let c_emo = self.cvgae.emotion_condition(prepared.emotion_id)?;
            let p_c = self.cvgae.context_prior(&c_ctx)?;
            let z_c = if use_mean {
                p_c.mu.clone()
            } else {
                p_c.sample(rng)?
            };
            Some(ConditionBundle::new(c_ctx, c_emo, z_c)?)
        };
        let n = prepared.graph.nodes.len();
        let adj_prior = normalize_adjacency(&prepared.graph.a_prior, n)?;
        let (z_g, _) = graph_latents(
            &self.cvgae.pri_graph,
            &node_emb,
            &adj_prior,
            cond.as_ref().map(|c| &c.c_cond),
            rng,
            !use_mean,
        )?;
        let probs = candidate_probs(&z_g, &prepared.graph.candidates)?;
        let relations =
            select_top_k(&probs, &prepared.graph.candidates, self.config.k, &node_emb)?;
        Ok((e_out, relations))
    }

    /// Reason only: prior-path relations for a raw context.
    pub fn reason(
        &self,
        context: &[(Speaker, String)],
        emotion: &str,
        builder: &GraphBuilder,
        use_mean: bool,
        seed: u64,
    ) -> Result<(Prepared, ReasonedRelations)> {
        let example = DialogueExample {
            context: context.to_vec(),
            emotion: emotion.to_string(),
            response: String::new(),
            next_user_utterance: None,
        };
        let prepared = self.prepare(&example, builder)?;
        let mut rng = CounterRng::new(seed).derive(0x5ea5);
        let relations =
            no_grad(|| self.prior_reasoning(&prepared, use_mean, &mut rng).map(|(_, r)| r))?;
        Ok((prepared, relations))
    }

    /// Autoregressive generation from a raw context: prior-path reasoning,
    /// then greedy or nucleus decoding from BOS until EOS or `max_len`.
    pub fn generate(
        &self,
        context: &[(Speaker, String)],
        emotion: &str,
        builder: &GraphBuilder,
        opts: &GenerateOptions,
    ) -> Result<GeneratedResponse> {
        if context.is_empty() {
            return Err(CareError::Validation("generate: empty context".into()));
        }
        let example = DialogueExample {
            context: context.to_vec(),
            emotion: emotion.to_string(),
            response: String::new(),
            next_user_utterance: None,
        };
        let prepared = self.prepare(&example, builder)?;
        no_grad(|| self.generate_prepared(&prepared, opts))
    }

    /// Generation against an already prepared example.
    pub fn generate_prepared(
        &self,
        prepared: &Prepared,
        opts: &GenerateOptions,
    ) -> Result<GeneratedResponse> {
        no_grad(|| {
            let mut rng = CounterRng::new(opts.seed).derive(0x9e4e);
            let (e_out, relations) = self.prior_reasoning(prepared, opts.use_mean, &mut rng)?;
            let r_matrix = self.relation_matrix(&relations);
            let ctx = ForwardCtx::eval();
            let mut ids: Vec<usize> = vec![BOS];
            let mut out: Vec<usize> = Vec::new();
            while out.len() < opts.max_len {
                let h = self.decode_hidden(&ids, &e_out, &r_matrix, &ctx)?;
                let logits = self.output_logits(&h)?;
                let v = logits.cols();
                let last = logits.to_vec()[(ids.len() - 1) * v..].to_vec();
                let next = match opts.strategy {
                    DecodeStrategy::Greedy => argmax(&last),
                    DecodeStrategy::TopP(p) => top_p_sample(&last, p, &mut rng),
                };
                if next == EOS {
                    break;
                }
                out.push(next);
                ids.push(next);
            }
            Ok(GeneratedResponse {
                token_ids: out.clone(),
                text: self.vocab.decode(&out),
                relations,
            })
        })
    }
}

pub struct GeneratedResponse {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub relations: ReasonedRelations,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling over the smallest probability mass >= p.
fn top_p_sample(logits: &[f64], p: f64, rng: &mut CounterRng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| exps[b].partial_cmp(&exps[a]).unwrap());
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += exps[i] / denom;
        if mass >= p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| exps[i]).sum();
    let mut draw = rng.uniform() * total;
    for &i in &kept {
        draw -= exps[i];
        if draw <= 0.0 {
            return i;
        }
    }
    *kept.last().expect("nonempty nucleus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{CauseEffectGraph, Stopwords};
    use crate::nn::multi_head_attention as mha;
    use crate::tensor::{backward, grad_check, Mask};

    fn toy_vocab_and_labels() -> (Vocab, Vec<String>) {
        let examples = toy_examples();
        (Vocab::build(&examples, 1), crate::data::emotion_labels(&examples))
    }

    fn toy_examples() -> Vec<DialogueExample> {
        vec![
            DialogueExample {
                context: vec![(Speaker::User, "my brother won the game by killing it".into())],
                emotion: "impressed".into(),
                response: "that is impressive indeed".into(),
                next_user_utterance: Some("yes the killing spree was epic".into()),
            },
            DialogueExample {
                context: vec![(Speaker::User, "a storm hit our town".into())],
                emotion: "afraid".into(),
                response: "stay safe during the storm".into(),
                next_user_utterance: None,
            },
        ]
    }

    fn toy_ceg() -> CauseEffectGraph {
        let mut g = CauseEffectGraph::new();
        g.insert("game", "killing", 3.0);
        g.insert("killing", "impressed", 1.5);
        g.insert("brother", "game", 2.0);
        g.insert("storm", "afraid", 2.5);
        g
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 16,
            k: 4,
            max_nodes: 16,
            dropout: 0.0,
            max_context_tokens: 64,
            max_response_tokens: 16,
            tie_output: false,
            no_reasoning: false,
            no_condition: false,
            full_recon: true,
        }
    }

    fn tiny_model() -> (CareModel, CauseEffectGraph, Stopwords) {
        let (vocab, labels) = toy_vocab_and_labels();
        let model = CareModel::init(tiny_config(), vocab, labels, 11);
        (model, toy_ceg(), Stopwords::default_list())
    }

    #[test]
    fn multi_source_concat_order_and_zero_relations() {
        let d = 6;
        let mut rng = CounterRng::new(3);
        let ms = MultiSourceLayer::init(d, 2, &mut rng);
        let h = Tensor::randn(&[3, d], 1.0, &mut rng);
        let e = Tensor::randn(&[4, d], 1.0, &mut rng);
        let r = Tensor::randn(&[2, d], 1.0, &mut rng);
        let out = multi_source_cross(&ms, &h, &e, &r).unwrap();
        assert_eq!(out.shape(), &[3, d]);

        // Composed oracle with the fixed [context; relations] order.
        let hc = mha(&ms.attn_ctx, &h, &e, &e, None).unwrap();
        let hr = mha(&ms.attn_rel, &h, &r, &r, None).unwrap();
        let fused = concat_cols(&hc, &hr).unwrap().matmul(&ms.w_multi).unwrap();
        let want = ms.ln.forward(&fused.add(&h).unwrap()).unwrap();
        for (a, b) in out.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-10);
        }

        // Degenerate single zero-row memory stays well-defined.
        let zero_rel = Tensor::zeros(&[1, d]);
        let out = multi_source_cross(&ms, &h, &e, &zero_rel).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn zeroed_relation_path_reduces_to_vanilla_transformer() {
        // With R = zero row, W_multi = [I; 0]: the multi-source sub-layer
        // equals the vanilla cross-attention sub-layer (Eq 3 wiring).
        let d = 6;
        let mut rng = CounterRng::new(5);
        let ms = MultiSourceLayer::init(d, 2, &mut rng);
        let mut w = vec![0.0; 2 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        ms.w_multi.set_data(&w);
        let h = Tensor::randn(&[3, d], 1.0, &mut rng);
        let e = Tensor::randn(&[4, d], 1.0, &mut rng);
        let zero_rel = Tensor::zeros(&[1, d]);
        let got = multi_source_cross(&ms, &h, &e, &zero_rel).unwrap();

        let hc = mha(&ms.attn_ctx, &h, &e, &e, None).unwrap();
        let vanilla = ms.ln.forward(&hc.add(&h).unwrap()).unwrap();
        for (a, b) in got.to_vec().iter().zip(vanilla.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_generation_cases() {
        // Perfectly peaked logits drive the loss to ~0.
        let mut logits = vec![0.0; 2 * 5];
        logits[2] = 1e3;
        logits[5 + 4] = 1e3;
        let t = Tensor::from_vec(logits, &[2, 5]).unwrap();
        assert!(loss_generation(&t, &[2, 4]).unwrap().item() < 1e-9);

        // Uniform logits give ln V.
        let u = Tensor::zeros(&[3, 7]);
        assert!((loss_generation(&u, &[0, 3, 6]).unwrap().item() - 7.0_f64.ln()).abs() < 1e-12);

        // Random case matches -mean(log softmax[gold]).
        let mut rng = CounterRng::new(8);
        let l = Tensor::randn(&[4, 6], 1.5, &mut rng);
        let gold = [1usize, 5, 0, 3];
        let got = loss_generation(&l, &gold).unwrap().item();
        let ld = l.to_vec();
        let mut want = 0.0;
        for (i, &g) in gold.iter().enumerate() {
            let row = &ld[i * 6..(i + 1) * 6];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[g].exp() / denom).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn loss_reasoning_cases() {
        // Identical Gaussians: both KL terms vanish, leaving reconstruction.
        let mu = Tensor::from_vec(vec![0.2, -0.1], &[1, 2]).unwrap();
        let ls = Tensor::from_vec(vec![0.0, 0.3], &[1, 2]).unwrap();
        let klz = crate::tensor::kl_diag_gaussians(&mu, &ls, &mu, &ls).unwrap();
        let logits = Tensor::zeros(&[4, 1]);
        let targets = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[4, 1]).unwrap();
        let total = loss_reasoning(&logits, &targets, 1.0, &klz, &klz).unwrap();
        // Zero latents: every pair contributes ln 2 (pos_weight 1).
        assert!((total.item() - 2.0_f64.ln()).abs() < 1e-12);

        // Weight-adjusted zero-latent case.
        let total = loss_reasoning(&logits, &targets, 3.0, &klz, &klz).unwrap();
        let want = (3.0 * 2.0 * 2.0_f64.ln() + 2.0 * 2.0_f64.ln()) / 4.0;
        assert!((total.item() - want).abs() < 1e-12);

        // Sum-of-components oracle.
        let mut rng = CounterRng::new(10);
        let logits = Tensor::randn(&[5, 1], 1.0, &mut rng);
        let tv: Vec<f64> = (0..5).map(|i| f64::from(i % 2 == 0)).collect();
        let targets = Tensor::from_vec(tv, &[5, 1]).unwrap();
        let mu_p = Tensor::randn(&[1, 2], 1.0, &mut rng);
        let kl1 = crate::tensor::kl_diag_gaussians(&mu, &ls, &mu_p, &ls).unwrap();
        let kl2 = crate::tensor::kl_diag_gaussians(&mu_p, &ls, &mu, &ls).unwrap();
        let got = loss_reasoning(&logits, &targets, 2.0, &kl1, &kl2).unwrap().item();
        let want = weighted_bce_logits(&logits, &targets, 2.0).unwrap().item()
            + kl1.item()
            + kl2.item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn forward_train_shapes_losses_and_determinism() {
        let (model, ceg, stop) = tiny_model();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: model.config.max_nodes,
        };
        let examples = toy_examples();
        let prepared = model.prepare(&examples[0], &builder).unwrap();
        let weights = LossWeights::default();

        let run = |seed: u64| {
            let mut rng = CounterRng::new(seed);
            let out = model
                .forward_train(&prepared, &weights, 1.0, &mut rng, &ForwardCtx::eval())
                .unwrap();
            (
                out.logits.shape().to_vec(),
                out.loss_total.item(),
                out.loss_generation.item(),
                out.loss_reasoning.item(),
            )
        };
        let (shape, total, lg, lr) = run(42);
        assert_eq!(shape, vec![prepared.response_ids.len(), model.vocab.len()]);
        assert!(total.is_finite() && lg > 0.0 && lr.is_finite());
        assert!((total - (lg + lr)).abs() < 1e-12, "unit weights sum");

        let (_, total2, _, _) = run(42);
        assert_eq!(total.to_bits(), total2.to_bits(), "fixed seed, fixed loss");
        let (_, total3, _, _) = run(43);
        assert_ne!(total.to_bits(), total3.to_bits(), "seed changes the sample");
    }

    #[test]
    fn forward_train_ablations_run_and_differ() {
        let (vocab, labels) = toy_vocab_and_labels();
        let ceg = toy_ceg();
        let stop = Stopwords::default_list();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let weights = LossWeights::default();
        let examples = toy_examples();

        let mut no_reason = tiny_config();
        no_reason.no_reasoning = true;
        let m1 = CareModel::init(no_reason, vocab.clone(), labels.clone(), 11);
        let p1 = m1.prepare(&examples[0], &builder).unwrap();
        let mut rng = CounterRng::new(1);
        let o1 = m1
            .forward_train(&p1, &weights, 1.0, &mut rng, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(o1.loss_reasoning.item(), 0.0);
        assert_eq!(o1.kl_graph, 0.0);
        // Relations come straight from the prior graph.
        for r in &o1.relations.records {
            assert!(p1.graph.prior_edges.contains(&(r.head, r.tail)));
        }

        let mut no_cond = tiny_config();
        no_cond.no_condition = true;
        let m2 = CareModel::init(no_cond, vocab, labels, 11);
        let p2 = m2.prepare(&examples[0], &builder).unwrap();
        let mut rng = CounterRng::new(1);
        let o2 = m2
            .forward_train(&p2, &weights, 1.0, &mut rng, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(o2.kl_context, 0.0, "no z_c pathway under no_condition");
        assert!(o2.kl_graph >= 0.0);
        assert!(o2.recon > 0.0);
    }

    #[test]
    fn no_condition_with_copied_nets_and_equal_adjacency_zeroes_kl() {
        let (vocab, labels) = toy_vocab_and_labels();
        let ceg = toy_ceg();
        let stop = Stopwords::default_list();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let mut cfg = tiny_config();
        cfg.no_condition = true;
        let model = CareModel::init(cfg, vocab, labels, 11);
        // Copy recognition-net parameters into the prior net.
        let mut params = Vec::new();
        model.cvgae.rec_graph.collect("r", &mut params);
        let mut pri = Vec::new();
        model.cvgae.pri_graph.collect("p", &mut pri);
        for ((_, src), (_, dst)) in params.iter().zip(&pri) {
            dst.set_data(&src.to_vec());
        }
        // Example without next utterance: prior == posterior adjacency.
        let examples = toy_examples();
        let prepared = model.prepare(&examples[1], &builder).unwrap();
        assert_eq!(prepared.graph.a_prior, prepared.graph.a_post);
        let mut rng = CounterRng::new(4);
        let out = model
            .forward_train(&prepared, &LossWeights::default(), 1.0, &mut rng, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(out.kl_graph, 0.0, "identical nets and graphs agree exactly");
    }

    #[test]
    fn causal_integrity_through_multi_source_layer() {
        let (model, ceg, stop) = tiny_model();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let examples = toy_examples();
        let prepared = model.prepare(&examples[0], &builder).unwrap();
        let ctx = ForwardCtx::eval();
        let e_out = model.encoder.encode(&prepared.context_ids, None, &ctx).unwrap();
        let node_emb = model.embedding.gather_rows(&prepared.node_ids).unwrap();
        let relations = model.prior_graph_relations(&prepared, &node_emb).unwrap();
        let r = model.relation_matrix(&relations);

        let gold = prepared.response_ids.clone();
        let base = model
            .teacher_forced_logits(&gold, &e_out, &r, &ctx)
            .unwrap()
            .to_vec();
        let v = model.vocab.len();
        for t in 0..gold.len() - 1 {
            let mut perturbed = gold.clone();
            perturbed[t + 1] = (perturbed[t + 1] + 1) % v;
            let out = model
                .teacher_forced_logits(&perturbed, &e_out, &r, &ctx)
                .unwrap()
                .to_vec();
            for pos in 0..=t {
                for j in 0..v {
                    assert_eq!(
                        base[pos * v + j].to_bits(),
                        out[pos * v + j].to_bits(),
                        "logit changed at pos {pos} when perturbing {t}+1"
                    );
                }
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let (model, ceg, stop) = tiny_model();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let context = vec![(Speaker::User, "a storm hit our town".to_string())];
        let opts = GenerateOptions {
            max_len: 10,
            ..Default::default()
        };
        let a = model.generate(&context, "afraid", &builder, &opts).unwrap();
        let b = model.generate(&context, "afraid", &builder, &opts).unwrap();
        assert_eq!(a.token_ids, b.token_ids, "greedy decoding is deterministic");
        assert!(a.token_ids.len() <= 10);

        assert!(matches!(
            model.generate(&[], "afraid", &builder, &opts),
            Err(CareError::Validation(_))
        ));
        assert!(matches!(
            model.generate(&context, "not-a-label", &builder, &opts),
            Err(CareError::Label { .. })
        ));
    }

    #[test]
    fn reason_emits_ceg_consistent_sorted_relations() {
        let (model, ceg, stop) = tiny_model();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let context = vec![(
            Speaker::User,
            "my brother won the game by killing it".to_string(),
        )];
        let (prepared, relations) = model
            .reason(&context, "impressed", &builder, true, 7)
            .unwrap();
        assert!(!relations.is_empty());
        for w in relations.records.windows(2) {
            assert!(w[0].probability >= w[1].probability);
        }
        for r in &relations.records {
            assert!(ceg.has_edge(
                prepared.graph.nodes.word(r.head),
                prepared.graph.nodes.word(r.tail)
            ));
        }
    }

    #[test]
    fn parameter_manifest_is_deterministic_and_tying_drops_w_o() {
        let (model, _, _) = tiny_model();
        let (manifest, total) = model.parameter_manifest();
        let (manifest2, total2) = model.parameter_manifest();
        assert_eq!(manifest, manifest2);
        assert_eq!(total, total2);
        assert!(manifest.iter().any(|(n, _)| n == "output.w_o"));
        assert_eq!(manifest.first().unwrap().0, "embedding");

        let (vocab, labels) = toy_vocab_and_labels();
        let mut cfg = tiny_config();
        cfg.tie_output = true;
        let tied = CareModel::init(cfg, vocab, labels, 11);
        let (m2, t2) = tied.parameter_manifest();
        assert!(!m2.iter().any(|(n, _)| n == "output.w_o"));
        assert!(t2 < total);
        // Tied output still produces logits.
        let h = Tensor::zeros(&[2, tied.config.d]);
        let logits = tied.output_logits(&h).unwrap();
        assert_eq!(logits.shape(), &[2, tied.vocab.len()]);
    }

    #[test]
    fn forward_train_micro_example_grad_check() {
        // Micro example: |C|=6, |V|=8, k=3, |R|=4, vocab=20.
        let mut cfg = tiny_config();
        cfg.d = 4;
        cfg.num_heads = 2;
        cfg.d_ff = 8;
        cfg.k = 3;
        let tokens: Vec<String> = crate::data::RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0..14).map(|i| format!("w{i}")))
            .collect();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        assert_eq!(vocab.len(), 20);
        let labels = vec!["afraid".to_string(), "proud".to_string()];
        let model = CareModel::init(cfg, vocab, labels, 21);

        let mut ceg = CauseEffectGraph::new();
        for (c, e, w) in [
            ("w0", "w1", 2.0),
            ("w1", "w2", 1.0),
            ("w2", "w3", 1.5),
            ("w3", "w4", 1.2),
            ("w0", "w5", 0.7),
            ("w5", "w6", 0.9),
            ("w6", "w7", 1.1),
        ] {
            ceg.insert(c, e, w);
        }
        let stop = Stopwords::default_list();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 8,
        };
        let example = DialogueExample {
            context: vec![(Speaker::User, "w0 w1 w2 w5".into())],
            emotion: "afraid".into(),
            response: "w3 w4 w6".into(),
            next_user_utterance: Some("w3 w6".into()),
        };
        let prepared = model.prepare(&example, &builder).unwrap();
        assert_eq!(prepared.context_ids.len(), 6); // BOS + USR + 4 words
        assert_eq!(prepared.response_ids.len(), 4); // 3 words + EOS
        assert!(prepared.graph.nodes.len() <= 8);

        let weights = LossWeights::default();
        // Probe several parameters spanning all components.
        let probes: Vec<(&str, Tensor)> = vec![
            ("v_rand", model.cvgae.v_rand.clone()),
            ("w_multi", model.decoder_layers[0].1.w_multi.clone()),
            ("gcn_mu(rec)", model.cvgae.rec_graph.gcn_mu.weight.clone()),
            ("b_o", model.b_o.clone()),
        ];
        for (name, param) in probes {
            let err = grad_check(
                |_| {
                    let mut rng = CounterRng::new(31337);
                    model
                        .forward_train(&prepared, &weights, 1.0, &mut rng, &ForwardCtx::eval())
                        .unwrap()
                        .loss_total
                },
                &param,
                1e-5,
            );
            assert!(err < 1e-3, "{name}: grad err {err}");
        }
        // Embedding feeds every pathway (encoder, nodes, decoder): spot-check
        // a block of its rows via full-table probe too.
        let err = grad_check(
            |_| {
                let mut rng = CounterRng::new(31337);
                model
                    .forward_train(&prepared, &weights, 1.0, &mut rng, &ForwardCtx::eval())
                    .unwrap()
                    .loss_total
            },
            &model.embedding,
            1e-5,
        );
        assert!(err < 1e-3, "embedding grad err {err}");
    }

    #[test]
    fn pad_positions_never_attended_in_padded_batch() {
        let (model, _, _) = tiny_model();
        let ids = vec![BOS, 7, 8];
        let padded = {
            let mut v = ids.clone();
            v.push(crate::data::PAD);
            v
        };
        let valid = vec![true, true, true, false];
        let ctx = ForwardCtx::eval();
        let a = model.encoder.encode(&padded, Some(&valid), &ctx).unwrap();
        // Altering the PAD row embedding leaves valid outputs unchanged.
        let table = model.embedding.to_vec();
        let mut bumped = table.clone();
        for v in bumped[0..model.config.d].iter_mut() {
            *v += 2.0;
        }
        model.embedding.set_data(&bumped);
        let b = model.encoder.encode(&padded, Some(&valid), &ctx).unwrap();
        model.embedding.set_data(&table);
        let (av, bv) = (a.to_vec(), b.to_vec());
        for i in 0..3 * model.config.d {
            assert_eq!(av[i], bv[i]);
        }
        let _ = Mask::causal(2);
    }

    #[test]
    fn backward_reaches_every_parameter_in_full_forward() {
        let (model, ceg, stop) = tiny_model();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 16,
        };
        let examples = toy_examples();
        // Example 0 has candidates and a next utterance: full pathway.
        let prepared = model.prepare(&examples[0], &builder).unwrap();
        let mut rng = CounterRng::new(5);
        let out = model
            .forward_train(&prepared, &LossWeights::default(), 1.0, &mut rng, &ForwardCtx::eval())
            .unwrap();
        backward(&out.loss_total).unwrap();
        let missing: Vec<String> = model
            .params()
            .into_iter()
            .filter(|(_, p)| p.grad().is_none())
            .map(|(n, _)| n)
            .collect();
        assert!(
            missing.is_empty(),
            "parameters with no gradient: {missing:?}"
        );
    }
}
