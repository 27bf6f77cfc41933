//! Converter from the upstream empathetic-dialogue benchmark layout
//! (per-split CSV files) into the corpus JSONL plus split manifests.
//!
//! Expected input: a directory with `train.csv`, `valid.csv`, `test.csv`,
//! each with the header `conv_id,utterance_idx,context,prompt,speaker_idx,
//! utterance,selfeval,tags`; commas inside utterances are `_comma_` escapes.
//! Conversations alternate speaker-first, so odd utterance positions are
//! listener (bot) turns; each bot turn becomes one example whose context is
//! everything before it and whose `next_user_utterance` is the turn after
//! it when present.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{write_corpus, write_split_indices, DialogueExample, Speaker};
use crate::error::{CareError, Result};

/// The benchmark's 32 emotion categories; rows with any other label are
/// skipped and counted.
pub const EMOTION_LABELS: [&str; 32] = [
    "afraid",
    "angry",
    "annoyed",
    "anticipating",
    "anxious",
    "apprehensive",
    "ashamed",
    "caring",
    "confident",
    "content",
    "devastated",
    "disappointed",
    "disgusted",
    "embarrassed",
    "excited",
    "faithful",
    "furious",
    "grateful",
    "guilty",
    "hopeful",
    "impressed",
    "jealous",
    "joyful",
    "lonely",
    "nostalgic",
    "prepared",
    "proud",
    "sad",
    "sentimental",
    "surprised",
    "terrified",
    "trusting",
];

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Default)]
pub struct ConvertReport {
    pub examples: usize,
    pub skipped_rows: usize,
    pub split_sizes: HashMap<String, usize>,
}

struct Row {
    conv_id: String,
    utterance_idx: u64,
    emotion: String,
    utterance: String,
}

fn parse_split_csv(path: &Path, skipped: &mut usize) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 {
            *skipped += 1;
            continue;
        }
        let emotion = fields[2].trim().to_lowercase();
        if !EMOTION_LABELS.contains(&emotion.as_str()) {
            *skipped += 1;
            continue;
        }
        let utterance_idx: u64 = match fields[1].trim().parse() {
            Ok(v) => v,
            Err(_) => {
                *skipped += 1;
                continue;
            }
        };
        rows.push(Row {
            conv_id: fields[0].trim().to_string(),
            utterance_idx,
            emotion,
            utterance: fields[5].replace("_comma_", ",").trim().to_string(),
        });
    }
    Ok(rows)
}

fn conversations(rows: Vec<Row>) -> Vec<(String, Vec<Row>)> {
    // First-occurrence conversation order keeps the output deterministic.
    let mut order: Vec<String> = Vec::new();
    let mut by_conv: HashMap<String, Vec<Row>> = HashMap::new();
    for row in rows {
        if !by_conv.contains_key(&row.conv_id) {
            order.push(row.conv_id.clone());
        }
        by_conv.entry(row.conv_id.clone()).or_default().push(row);
    }
    order
        .into_iter()
        .map(|id| {
            let mut turns = by_conv.remove(&id).expect("collected above");
            turns.sort_by_key(|r| r.utterance_idx);
            (id, turns)
        })
        .collect()
}

fn examples_from_conversation(turns: &[Row]) -> Vec<DialogueExample> {
    let mut out = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        if i % 2 == 0 {
            continue; // speaker (user) turn
        }
        let context: Vec<(Speaker, String)> = turns[..i]
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let speaker = if j % 2 == 0 { Speaker::User } else { Speaker::Bot };
                (speaker, r.utterance.clone())
            })
            .collect();
        let next_user_utterance = turns.get(i + 1).map(|r| r.utterance.clone());
        out.push(DialogueExample {
            context,
            emotion: turn.emotion.clone(),
            response: turn.utterance.clone(),
            next_user_utterance,
        });
    }
    out
}

/// Convert a benchmark directory into `out_jsonl` plus three split
/// manifests under `split_dir`, honoring the upstream division.
pub fn convert_benchmark(
    input_dir: &Path,
    out_jsonl: &Path,
    split_dir: &Path,
) -> Result<ConvertReport> {
    let mut report = ConvertReport::default();
    let mut corpus: Vec<DialogueExample> = Vec::new();
    let mut manifests: Vec<(String, Vec<usize>)> = Vec::new();
    for split in SPLITS {
        let path = input_dir.join(format!("{split}.csv"));
        if !path.exists() {
            return Err(CareError::Config(format!(
                "missing upstream split file {}",
                path.display()
            )));
        }
        let rows = parse_split_csv(&path, &mut report.skipped_rows)?;
        let mut indices = Vec::new();
        for (_, turns) in conversations(rows) {
            for example in examples_from_conversation(&turns) {
                indices.push(corpus.len());
                corpus.push(example);
            }
        }
        report.split_sizes.insert(split.to_string(), indices.len());
        manifests.push((split.to_string(), indices));
    }
    report.examples = corpus.len();
    write_corpus(out_jsonl, &corpus)?;
    std::fs::create_dir_all(split_dir)?;
    for (split, indices) in &manifests {
        write_split_indices(&split_dir.join(format!("{split}.idx")), indices)?;
    }
    Ok(report)
}

/// Synthetic benchmark fixture in the upstream layout (tests and demos):
/// `conversations_per_split` conversations of two exchanges each.
pub fn write_benchmark_fixture(dir: &Path, conversations_per_split: [usize; 3]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let topics = [
        ("afraid", "i heard a loud storm", "that sounds scary_comma_ stay inside", "the thunder was wild"),
        ("proud", "i finished a marathon", "what an achievement", "my legs ache now"),
        ("joyful", "my sister baked a cake", "cake is the best news", "it tasted amazing"),
        ("angry", "someone ruined the movie ending", "spoilers are infuriating", "i left the room"),
        ("lonely", "my friend moved away", "that must feel isolating", "we still text daily"),
    ];
    let mut conv_counter = 0usize;
    for (split, count) in SPLITS.iter().zip(conversations_per_split) {
        let mut csv = String::from(
            "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n",
        );
        for c in 0..count {
            let (emotion, u1, b1, u2) = topics[(conv_counter + c) % topics.len()];
            let conv = format!("hit:{}_conv:{}", split, conv_counter + c);
            for (idx, text) in [(1, u1), (2, b1), (3, u2), (4, "glad to hear more")] {
                csv.push_str(&format!(
                    "{conv},{idx},{emotion},{u1},{speaker},{text},5|5|5,\n",
                    speaker = if idx % 2 == 1 { 10 } else { 20 },
                ));
            }
        }
        conv_counter += count;
        std::fs::write(dir.join(format!("{split}.csv")), csv)?;
    }
    Ok(())
}
