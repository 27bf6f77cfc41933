//! Per-example causal-graph construction over an external cause-effect
//! knowledge graph.
//!
//! The prior graph holds relations whose endpoints are covered by the
//! emotion word plus previous user utterances; the posterior graph adds
//! relations whose endpoints are additionally covered by the next user
//! utterance. Both share one node set: the emotion word, content words from
//! previous user utterances, and one-hop neighbors of those.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::error::{CareError, Result};

/// Default stopword list shipped with the crate; callers may load their own
/// via [`Stopwords::from_path`].
const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Function-word filter approximating a content-word (noun/verb/adj/adv)
/// restriction on graph nodes.
#[derive(Debug, Clone)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Stopwords {
    pub fn default_list() -> Stopwords {
        Stopwords {
            words: DEFAULT_STOPWORDS
                .lines()
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line; '#' comments and blank lines ignored.
    pub fn from_path(path: &Path) -> Result<Stopwords> {
        let text = std::fs::read_to_string(path)?;
        Ok(Stopwords {
            words: text
                .lines()
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty() && !w.starts_with('#'))
                .collect(),
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    /// Lowercased tokens with stopwords removed, order preserved.
    pub fn content_words<'a, I: IntoIterator<Item = &'a str>>(&self, tokens: I) -> Vec<String> {
        tokens
            .into_iter()
            .map(|t| t.to_lowercase())
            .filter(|t| !t.is_empty() && !self.contains(t))
            .collect()
    }
}

/// External word-level causal knowledge graph: directed cause -> effect
/// edges with positive weights, plus a one-hop neighbor index.
#[derive(Debug, Default)]
pub struct CauseEffectGraph {
    edges: HashMap<(String, String), f64>,
    neighbors: HashMap<String, BTreeSet<String>>,
}

impl CauseEffectGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a cause -> effect edge; duplicate pairs keep the max weight.
    pub fn insert(&mut self, cause: &str, effect: &str, weight: f64) {
        let cause = cause.to_lowercase();
        let effect = effect.to_lowercase();
        self.neighbors
            .entry(cause.clone())
            .or_default()
            .insert(effect.clone());
        self.neighbors
            .entry(effect.clone())
            .or_default()
            .insert(cause.clone());
        let slot = self.edges.entry((cause, effect)).or_insert(weight);
        if weight > *slot {
            *slot = weight;
        }
    }

    pub fn weight(&self, cause: &str, effect: &str) -> Option<f64> {
        self.edges.get(&(cause.to_lowercase(), effect.to_lowercase())).copied()
    }

    pub fn has_edge(&self, cause: &str, effect: &str) -> bool {
        self.weight(cause, effect).is_some()
    }

    /// Union of in- and out-neighbors.
    pub fn neighbors(&self, word: &str) -> impl Iterator<Item = &str> {
        self.neighbors
            .get(&word.to_lowercase())
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Parse a TSV cause-effect graph: `cause\teffect\tweight` per line, UTF-8,
/// '#'-prefixed comment lines ignored.
pub fn load_ceg(path: &Path) -> Result<CauseEffectGraph> {
    let text = std::fs::read_to_string(path)?;
    let mut graph = CauseEffectGraph::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (cause, effect, weight) = match (fields.next(), fields.next(), fields.next()) {
            (Some(c), Some(e), Some(w)) if !c.is_empty() && !e.is_empty() => (c, e, w),
            _ => {
                return Err(CareError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: "expected three tab-separated fields: cause, effect, weight".into(),
                })
            }
        };
        let weight: f64 = weight.trim().parse().map_err(|_| CareError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: format!("weight '{weight}' is not a number"),
        })?;
        if weight <= 0.0 || !weight.is_finite() {
            return Err(CareError::Validation(format!(
                "{}:{lineno}: weight must be positive, got {weight}",
                path.display()
            )));
        }
        graph.insert(cause, effect, weight);
    }
    Ok(graph)
}

/// Why a word entered the node set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    EmotionWord,
    ContextWord,
    OneHopNeighbor,
}

/// Ordered node list: emotion word first, then context words in first
/// occurrence order, then CEG neighbors ranked by descending edge weight.
#[derive(Debug, Clone)]
pub struct NodeSet {
    words: Vec<String>,
    origins: Vec<NodeOrigin>,
    index: HashMap<String, usize>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn origin(&self, i: usize) -> NodeOrigin {
        self.origins[i]
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Build the node set for one example. `user_words` are the content words of
/// previous user utterances in order of first use; `word_filter` excludes
/// words the model cannot embed (out-of-vocabulary).
pub fn build_node_set(
    user_words: &[String],
    emotion_word: &str,
    ceg: &CauseEffectGraph,
    max_nodes: usize,
    word_filter: impl Fn(&str) -> bool,
) -> NodeSet {
    assert!(!emotion_word.is_empty(), "emotion word must be nonempty");
    let emotion_word = emotion_word.to_lowercase();
    let mut words: Vec<String> = Vec::new();
    let mut origins: Vec<NodeOrigin> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let push = |w: String, origin: NodeOrigin, words: &mut Vec<String>, origins: &mut Vec<NodeOrigin>, index: &mut HashMap<String, usize>| {
        if words.len() < max_nodes && !index.contains_key(&w) {
            index.insert(w.clone(), words.len());
            words.push(w);
            origins.push(origin);
        }
    };

    if word_filter(&emotion_word) {
        push(emotion_word.clone(), NodeOrigin::EmotionWord, &mut words, &mut origins, &mut index);
    }
    for w in user_words {
        let w = w.to_lowercase();
        if word_filter(&w) {
            push(w, NodeOrigin::ContextWord, &mut words, &mut origins, &mut index);
        }
    }

    // One-hop CEG neighbors of the words collected so far, ranked by the
    // strongest edge joining them to a collected word; ties break
    // lexicographically.
    let seeds: Vec<String> = words.clone();
    let mut best: HashMap<String, f64> = HashMap::new();
    for seed in &seeds {
        for n in ceg.neighbors(seed) {
            if index.contains_key(n) || !word_filter(n) {
                continue;
            }
            let w = ceg
                .weight(seed, n)
                .into_iter()
                .chain(ceg.weight(n, seed))
                .fold(0.0_f64, f64::max);
            let slot = best.entry(n.to_string()).or_insert(w);
            if w > *slot {
                *slot = w;
            }
        }
    }
    let mut ranked: Vec<(String, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    for (w, _) in ranked {
        push(w, NodeOrigin::OneHopNeighbor, &mut words, &mut origins, &mut index);
    }

    NodeSet { words, origins, index }
}

/// Directed edge between node indices, in CEG cause -> effect orientation.
pub type EdgeSet = BTreeSet<(usize, usize)>;

/// Collect prior and posterior edge sets: a CEG relation between two nodes
/// enters the prior set iff both endpoint words are covered by the prior
/// coverage, and the posterior set iff both are covered by the posterior
/// coverage. Neighbor nodes extend the node set but never the coverage.
pub fn build_edges(
    nodes: &NodeSet,
    covered_prior: &HashSet<String>,
    covered_post: &HashSet<String>,
    ceg: &CauseEffectGraph,
) -> (EdgeSet, EdgeSet) {
    debug_assert!(covered_prior.is_subset(covered_post));
    let mut prior = EdgeSet::new();
    let mut post = EdgeSet::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i == j {
                continue;
            }
            let (wi, wj) = (nodes.word(i), nodes.word(j));
            if !ceg.has_edge(wi, wj) {
                continue;
            }
            if covered_post.contains(wi) && covered_post.contains(wj) {
                post.insert((i, j));
                if covered_prior.contains(wi) && covered_prior.contains(wj) {
                    prior.insert((i, j));
                }
            }
        }
    }
    (prior, post)
}

/// All directed CEG relations among node-set members, regardless of
/// coverage: the candidate pairs the reasoner scores.
pub fn candidate_pairs(nodes: &NodeSet, ceg: &CauseEffectGraph) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i != j && ceg.has_edge(nodes.word(i), nodes.word(j)) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Symmetric {0,1} adjacency with zero diagonal from a directed edge set.
pub fn adjacency(num_nodes: usize, edges: &EdgeSet) -> Vec<f64> {
    let mut a = vec![0.0; num_nodes * num_nodes];
    for &(i, j) in edges {
        if i != j {
            a[i * num_nodes + j] = 1.0;
            a[j * num_nodes + i] = 1.0;
        }
    }
    a
}

/// Per-example node set plus prior/posterior edge sets and their symmetric
/// adjacency matrices.
#[derive(Debug)]
pub struct CausalGraph {
    pub nodes: NodeSet,
    pub prior_edges: EdgeSet,
    pub posterior_edges: EdgeSet,
    pub a_prior: Vec<f64>,
    pub a_post: Vec<f64>,
    /// Directed CEG pairs among the nodes; scored by the reasoner.
    pub candidates: Vec<(usize, usize)>,
}

/// Everything needed to build per-example graphs.
pub struct GraphBuilder<'a> {
    pub ceg: &'a CauseEffectGraph,
    pub stopwords: &'a Stopwords,
    pub max_nodes: usize,
}

impl<'a> GraphBuilder<'a> {
    /// `prev_user_tokens` are tokenized previous user utterances in order;
    /// `next_user_tokens` the next user utterance when present.
    pub fn build(
        &self,
        prev_user_tokens: &[String],
        next_user_tokens: Option<&[String]>,
        emotion_label: &str,
        word_filter: impl Fn(&str) -> bool,
    ) -> Result<CausalGraph> {
        let emotion_word = emotion_node_word(emotion_label, self.stopwords).ok_or_else(|| {
            CareError::Validation(format!("emotion label '{emotion_label}' has no usable word"))
        })?;
        let user_words = self
            .stopwords
            .content_words(prev_user_tokens.iter().map(String::as_str));
        let nodes = build_node_set(&user_words, &emotion_word, self.ceg, self.max_nodes, &word_filter);

        let mut covered_prior: HashSet<String> = user_words.iter().cloned().collect();
        covered_prior.insert(emotion_word.clone());
        let mut covered_post = covered_prior.clone();
        if let Some(next) = next_user_tokens {
            for w in self.stopwords.content_words(next.iter().map(String::as_str)) {
                covered_post.insert(w);
            }
        }

        let (prior_edges, posterior_edges) =
            build_edges(&nodes, &covered_prior, &covered_post, self.ceg);
        let n = nodes.len();
        let a_prior = adjacency(n, &prior_edges);
        let a_post = adjacency(n, &posterior_edges);
        let candidates = candidate_pairs(&nodes, self.ceg);
        Ok(CausalGraph {
            nodes,
            prior_edges,
            posterior_edges,
            a_prior,
            a_post,
            candidates,
        })
    }
}

/// The emotion node word: the label itself when it is a single content
/// token, otherwise its first content token.
pub fn emotion_node_word(label: &str, stopwords: &Stopwords) -> Option<String> {
    let lowered = label.to_lowercase();
    let parts: Vec<&str> = lowered.split_whitespace().collect();
    if parts.len() == 1 {
        return Some(parts[0].to_string());
    }
    parts
        .iter()
        .find(|p| !stopwords.contains(p))
        .or(parts.first())
        .map(|s| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy_ceg() -> CauseEffectGraph {
        let mut g = CauseEffectGraph::new();
        g.insert("game", "killing", 3.5);
        g.insert("killing", "impressive", 1.5);
        g.insert("brother", "game", 2.0);
        g.insert("game", "fun", 4.0);
        g.insert("storm", "fear", 1.0);
        g
    }

    #[test]
    fn load_ceg_parses_documented_format() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment line").unwrap();
        writeln!(f, "game\tkilling\t3.5").unwrap();
        writeln!(f, "Game\tKilling\t1.0").unwrap(); // duplicate, lower weight
        writeln!(f, "a\tb\t1").unwrap();
        writeln!(f, "a\tb\t2").unwrap(); // duplicate keeps max
        f.flush().unwrap();
        let g = load_ceg(f.path()).unwrap();
        assert_eq!(g.weight("game", "killing"), Some(3.5));
        assert_eq!(g.weight("a", "b"), Some(2.0));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn load_ceg_empty_file_gives_empty_graph() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let g = load_ceg(f.path()).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.neighbors("anything").count(), 0);
    }

    #[test]
    fn load_ceg_reports_line_numbers_and_bad_weights() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "ok\tfine\t1.0").unwrap();
        writeln!(f, "missing-fields").unwrap();
        f.flush().unwrap();
        match load_ceg(f.path()) {
            Err(CareError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut f2 = tempfile::NamedTempFile::new().unwrap();
        writeln!(f2, "x\ty\t-1.0").unwrap();
        f2.flush().unwrap();
        assert!(matches!(load_ceg(f2.path()), Err(CareError::Validation(_))));
    }

    #[test]
    fn node_set_contains_emotion_context_and_neighbors() {
        let ceg = toy_ceg();
        let user = vec!["brother".to_string(), "game".to_string(), "killing".to_string()];
        let nodes = build_node_set(&user, "impressive", &ceg, 800, |_| true);
        assert_eq!(nodes.word(0), "impressive");
        assert_eq!(nodes.origin(0), NodeOrigin::EmotionWord);
        for w in ["brother", "game", "killing"] {
            assert!(nodes.position(w).is_some(), "{w} missing");
        }
        // "fun" is a one-hop neighbor of "game".
        let fun = nodes.position("fun").expect("neighbor fun");
        assert_eq!(nodes.origin(fun), NodeOrigin::OneHopNeighbor);
        // "storm"/"fear" touch no seed word.
        assert!(nodes.position("storm").is_none());
    }

    #[test]
    fn node_set_truncation_keeps_emotion_word() {
        let ceg = toy_ceg();
        let user = vec!["game".to_string(), "brother".to_string()];
        let nodes = build_node_set(&user, "impressive", &ceg, 1, |_| true);
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes.word(0), "impressive");
    }

    #[test]
    fn node_set_without_ceg_coverage_is_emotion_plus_context() {
        let ceg = CauseEffectGraph::new();
        let user = vec!["alpha".to_string(), "beta".to_string()];
        let nodes = build_node_set(&user, "joy", &ceg, 800, |_| true);
        assert_eq!(nodes.words(), &["joy", "alpha", "beta"]);
    }

    #[test]
    fn neighbor_ranking_is_weight_desc_then_lexicographic() {
        let mut ceg = CauseEffectGraph::new();
        ceg.insert("seed", "low", 1.0);
        ceg.insert("seed", "bbb", 2.0);
        ceg.insert("aaa", "seed", 2.0);
        let nodes = build_node_set(&[], "seed", &ceg, 800, |_| true);
        assert_eq!(nodes.words(), &["seed", "aaa", "bbb", "low"]);
    }

    #[test]
    fn edges_respect_coverage_rules() {
        let ceg = toy_ceg();
        // Previous user words: game, killing. Next user utterance adds: impressive... no —
        // emotion word is "impressive" (always covered); next adds "brother".
        let user = vec!["game".to_string(), "killing".to_string()];
        let nodes = build_node_set(&user, "impressive", &ceg, 800, |_| true);
        let mut covered_prior: HashSet<String> =
            ["impressive", "game", "killing"].iter().map(|s| s.to_string()).collect();
        let covered_post: HashSet<String> = covered_prior
            .iter()
            .cloned()
            .chain(std::iter::once("brother".to_string()))
            .collect();
        covered_prior.insert("impressive".into());
        let (prior, post) = build_edges(&nodes, &covered_prior, &covered_post, &ceg);

        let gi = |w: &str| nodes.position(w).unwrap();
        // Both endpoints in previous utterances -> in both sets.
        assert!(prior.contains(&(gi("game"), gi("killing"))));
        assert!(post.contains(&(gi("game"), gi("killing"))));
        // killing -> impressive: emotion word is covered -> both sets.
        assert!(prior.contains(&(gi("killing"), gi("impressive"))));
        // brother -> game: brother appears only in the next utterance -> posterior only.
        assert!(!prior.contains(&(gi("brother"), gi("game"))));
        assert!(post.contains(&(gi("brother"), gi("game"))));
        // game -> fun: fun is a pure neighbor, covered by nothing -> neither.
        assert!(!post.contains(&(gi("game"), gi("fun"))));
        // Containment.
        assert!(prior.is_subset(&post));
    }

    #[test]
    fn adjacency_is_symmetric_zero_diagonal() {
        let mut edges = EdgeSet::new();
        edges.insert((0, 1));
        let a = adjacency(3, &edges);
        assert_eq!(a, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let empty = adjacency(3, &EdgeSet::new());
        assert!(empty.iter().all(|v| *v == 0.0));

        let mut edges = EdgeSet::new();
        for e in [(0usize, 1usize), (1, 2), (3, 4), (4, 0), (2, 3)] {
            edges.insert(e);
        }
        let a = adjacency(5, &edges);
        for i in 0..5 {
            assert_eq!(a[i * 5 + i], 0.0);
            for j in 0..5 {
                assert_eq!(a[i * 5 + j], a[j * 5 + i]);
            }
        }
        let nonzero = a.iter().filter(|v| **v == 1.0).count();
        assert_eq!(nonzero, 10);
    }

    #[test]
    fn builder_is_deterministic_and_posterior_defaults_to_prior() {
        let ceg = toy_ceg();
        let stop = Stopwords::default_list();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 800,
        };
        let tokens: Vec<String> = ["my", "brother", "played", "the", "game"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let g1 = builder.build(&tokens, None, "impressive", |_| true).unwrap();
        let g2 = builder.build(&tokens, None, "impressive", |_| true).unwrap();
        assert_eq!(g1.nodes.words(), g2.nodes.words());
        assert_eq!(g1.prior_edges, g2.prior_edges);
        assert_eq!(g1.posterior_edges, g2.posterior_edges);
        // No next utterance: posterior == prior.
        assert_eq!(g1.prior_edges, g1.posterior_edges);
        // Stopwords filtered out.
        assert!(g1.nodes.position("the").is_none());
        assert!(g1.nodes.position("my").is_none());
    }

    #[test]
    fn every_edge_exists_in_ceg_and_candidates_cover_edges() {
        let ceg = toy_ceg();
        let stop = Stopwords::default_list();
        let builder = GraphBuilder {
            ceg: &ceg,
            stopwords: &stop,
            max_nodes: 800,
        };
        let prev: Vec<String> = ["game", "killing"].iter().map(|s| s.to_string()).collect();
        let next: Vec<String> = ["brother"].iter().map(|s| s.to_string()).collect();
        let g = builder
            .build(&prev, Some(&next), "impressive", |_| true)
            .unwrap();
        for &(i, j) in g.posterior_edges.iter() {
            assert!(ceg.has_edge(g.nodes.word(i), g.nodes.word(j)));
        }
        let cand: HashSet<(usize, usize)> = g.candidates.iter().copied().collect();
        for e in g.posterior_edges.iter() {
            assert!(cand.contains(e), "candidate pairs must cover posterior edges");
        }
        assert!(g.prior_edges.is_subset(&g.posterior_edges));
    }

    #[test]
    fn multiword_emotion_label_uses_first_content_token() {
        let stop = Stopwords::default_list();
        assert_eq!(emotion_node_word("apprehensive", &stop).unwrap(), "apprehensive");
        assert_eq!(emotion_node_word("so proud", &stop).unwrap(), "proud");
    }
}
