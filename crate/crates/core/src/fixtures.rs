//! Deterministic toy dataset: 16 single-turn dialogues with a matching
//! cause-effect graph. Small enough to overfit on one core in minutes;
//! used by integration tests, the acceptance suite, and CLI smoke runs.

use std::path::{Path, PathBuf};

use crate::data::{write_corpus, write_split_indices, DialogueExample, Speaker};
use crate::error::Result;
use crate::graph::CauseEffectGraph;

const DIALOGUES: [(&str, &str, &str, Option<&str>); 16] = [
    (
        "i saw a huge storm last night",
        "afraid",
        "that storm sounds really scary",
        Some("the thunder kept me awake"),
    ),
    (
        "my brother won the chess game",
        "impressed",
        "winning chess takes real skill",
        Some("he kept killing it all evening"),
    ),
    (
        "my dog ate my homework",
        "annoyed",
        "a dog eating homework is rough",
        None,
    ),
    (
        "we planted flowers in the garden",
        "content",
        "a garden full of flowers sounds lovely",
        Some("the roses bloomed so fast"),
    ),
    (
        "i failed the driving test",
        "disappointed",
        "failing a test stings badly",
        None,
    ),
    (
        "my best friend moved far away",
        "lonely",
        "missing a friend is hard",
        Some("we chat online sometimes"),
    ),
    (
        "i found money on the street",
        "surprised",
        "finding money is lucky",
        None,
    ),
    (
        "the baby slept through the night",
        "grateful",
        "a sleeping baby is a gift",
        None,
    ),
    (
        "i burned the dinner again",
        "embarrassed",
        "burning dinner happens to everyone",
        None,
    ),
    (
        "our team lost the final match",
        "devastated",
        "losing a final hurts deeply",
        Some("the coach was crushed too"),
    ),
    (
        "i got a new job offer",
        "excited",
        "a new job is thrilling news",
        Some("the salary is amazing"),
    ),
    (
        "the spider crawled on my bed",
        "terrified",
        "spiders in bed are creepy",
        None,
    ),
    (
        "my sister baked me a cake",
        "joyful",
        "cake from family tastes sweetest",
        None,
    ),
    (
        "the traffic made me very late",
        "anxious",
        "traffic stress is the worst",
        None,
    ),
    (
        "i finished the marathon yesterday",
        "proud",
        "finishing a marathon is impressive",
        Some("my legs still ache"),
    ),
    (
        "the movie ending was ruined",
        "angry",
        "a spoiled ending is infuriating",
        None,
    ),
];

const CEG_EDGES: [(&str, &str, f64); 43] = [
    ("storm", "afraid", 2.5),
    ("thunder", "storm", 1.8),
    ("storm", "scary", 2.2),
    ("game", "impressed", 1.6),
    ("chess", "game", 2.0),
    ("winning", "impressed", 2.4),
    ("killing", "impressed", 1.2),
    ("game", "killing", 3.5),
    ("brother", "game", 1.4),
    ("dog", "annoyed", 1.5),
    ("homework", "annoyed", 1.1),
    ("flowers", "content", 1.7),
    ("garden", "flowers", 2.1),
    ("roses", "flowers", 1.9),
    ("failed", "disappointed", 2.6),
    ("test", "failed", 1.3),
    ("friend", "lonely", 1.8),
    ("moved", "lonely", 2.2),
    ("money", "surprised", 1.4),
    ("found", "money", 1.0),
    ("baby", "grateful", 1.2),
    ("slept", "baby", 0.9),
    ("burned", "embarrassed", 2.0),
    ("dinner", "burned", 1.1),
    ("lost", "devastated", 2.3),
    ("match", "lost", 1.5),
    ("final", "match", 1.2),
    ("coach", "match", 0.8),
    ("job", "excited", 2.1),
    ("offer", "job", 1.7),
    ("salary", "job", 1.3),
    ("spider", "terrified", 2.8),
    ("bed", "spider", 0.7),
    ("cake", "joyful", 1.9),
    ("sister", "cake", 1.0),
    ("baked", "cake", 1.6),
    ("marathon", "proud", 2.5),
    ("finished", "marathon", 1.4),
    ("legs", "marathon", 0.6),
    ("traffic", "anxious", 2.4),
    ("late", "traffic", 1.1),
    ("movie", "angry", 1.0),
    ("ruined", "angry", 2.7),
];

pub fn toy_corpus() -> Vec<DialogueExample> {
    DIALOGUES
        .iter()
        .map(|(context, emotion, response, next)| DialogueExample {
            context: vec![(Speaker::User, context.to_string())],
            emotion: emotion.to_string(),
            response: response.to_string(),
            next_user_utterance: next.map(|n| n.to_string()),
        })
        .collect()
}

pub fn toy_ceg() -> CauseEffectGraph {
    let mut graph = CauseEffectGraph::new();
    for (cause, effect, weight) in CEG_EDGES {
        graph.insert(cause, effect, weight);
    }
    graph
}

pub fn toy_ceg_tsv() -> String {
    let mut out = String::from("# toy cause-effect graph\n");
    for (cause, effect, weight) in CEG_EDGES {
        out.push_str(&format!("{cause}\t{effect}\t{weight}\n"));
    }
    out
}

pub struct ToyPaths {
    pub corpus: PathBuf,
    pub ceg: PathBuf,
    pub split_dir: PathBuf,
}

/// Materialize the toy dataset for CLI runs: corpus.jsonl, ceg.tsv, and
/// train/valid/test manifests (all three cover the full corpus; the toy
/// task is a memorization target, not a generalization benchmark).
pub fn write_toy_dataset(dir: &Path) -> Result<ToyPaths> {
    std::fs::create_dir_all(dir)?;
    let corpus = dir.join("corpus.jsonl");
    write_corpus(&corpus, &toy_corpus())?;
    let ceg = dir.join("ceg.tsv");
    std::fs::write(&ceg, toy_ceg_tsv())?;
    let split_dir = dir.join("splits");
    std::fs::create_dir_all(&split_dir)?;
    let all: Vec<usize> = (0..DIALOGUES.len()).collect();
    write_split_indices(&split_dir.join("train.idx"), &all)?;
    write_split_indices(&split_dir.join("valid.idx"), &all)?;
    write_split_indices(&split_dir.join("test.idx"), &all)?;
    Ok(ToyPaths {
        corpus,
        ceg,
        split_dir,
    })
}
