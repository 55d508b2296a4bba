//! Triplet extraction from pairwise captions.
//!
//! A text-completion model gets the task description, three worked
//! question/answer examples and the caption to process. Its answer is
//! expected to paraphrase first ("Step 1") and then list triplets as
//! `<subject, predicate, object>` ("Step 2"). The parser is total: any input
//! maps to triplets, an explicit "nothing to extract", or a parse failure.

use serde::Serialize;

use crate::backends::{BackendError, ModelClient};
use crate::captioning::CaptionRecord;
use crate::graph::{normalize_predicate, NodeId, Triplet};

pub const TASK_DESCRIPTION: &str = include_str!("../resources/prompts/task.txt");
pub const IN_CONTEXT_EXAMPLES: &str = include_str!("../resources/prompts/examples.txt");
pub const DEFAULT_BLACKLIST: &str = include_str!("../resources/prompts/blacklist.txt");

pub const DEFAULT_MAX_TOKENS: u32 = 256;

const REFUSAL_PHRASES: [&str; 2] = ["not possible to extract", "no meaningful triplet"];
const ENTITY_DECORATORS: [&str; 4] = [
    "in the red rectangle",
    "in the yellow rectangle",
    "in the red box",
    "in the yellow box",
];
const ARTICLES: [&str; 3] = ["a ", "an ", "the "];

/// The fixed prompt pieces, loaded from the bundled resource files.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionPromptTemplate {
    pub task_description: &'static str,
    pub examples: &'static str,
}

impl Default for ExtractionPromptTemplate {
    fn default() -> Self {
        ExtractionPromptTemplate {
            task_description: TASK_DESCRIPTION.trim_end(),
            examples: IN_CONTEXT_EXAMPLES.trim_end(),
        }
    }
}

impl ExtractionPromptTemplate {
    /// Question/answer pairs in order. The free-standing user note between
    /// the second and third pair is not included.
    pub fn in_context_examples(&self) -> Vec<(&'static str, &'static str)> {
        let blocks: Vec<&str> = self
            .examples
            .split("\n\n")
            .map(str::trim)
            .filter(|b| !b.is_empty())
            .collect();
        blocks
            .windows(2)
            .filter(|w| w[0].starts_with("Question") && w[1].starts_with("Answer"))
            .map(|w| (w[0], w[1]))
            .collect()
    }

    pub fn user_note(&self) -> Option<&'static str> {
        self.examples
            .split("\n\n")
            .map(str::trim)
            .find(|b| b.starts_with("User:"))
    }

    pub fn render(&self, caption: &str, label1: &str, label2: &str) -> String {
        format!(
            "{}\n\n{}\n\nQuestion: {}",
            self.task_description,
            self.examples,
            final_question(caption, label1, label2)
        )
    }
}

fn escape_quoted(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn final_question(caption: &str, label1: &str, label2: &str) -> String {
    format!(
        "Given the sentence \"{}\", extract meaningful triplets describing the relationship between {} and {}.",
        escape_quoted(caption),
        label1,
        label2
    )
}

pub fn render_extraction_prompt(caption: &str, label1: &str, label2: &str) -> String {
    ExtractionPromptTemplate::default().render(caption, label1, label2)
}

/// First call of the two-call variant: paraphrase only.
pub fn render_paraphrase_prompt(caption: &str, label1: &str, label2: &str) -> String {
    format!(
        "Rephrase the sentence: Simplify the sentence to focus on the key interaction or relationship between the {} and the {}. Answer with the rephrased sentence only.\n\nSentence: \"{}\"",
        label1,
        label2,
        escape_quoted(caption)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RawTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "triplets", rename_all = "snake_case")]
pub enum ExtractionOutcome {
    Triplets(Vec<RawTriplet>),
    None,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractionResult {
    pub outcome: ExtractionOutcome,
    pub raw_response: String,
}

fn rfind_ascii_ci(hay: &str, needle: &str) -> Option<usize> {
    let (h, n) = (hay.as_bytes(), needle.as_bytes());
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len())
        .rev()
        .find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Text after the last "Step 2" marker, or everything when there is none.
fn step2_region(text: &str) -> &str {
    match rfind_ascii_ci(text, "step 2") {
        // the marker is pure ASCII, so the cut lands on a char boundary
        Some(i) => &text[i + "step 2".len()..],
        None => text,
    }
}

/// Contents of every top-level `<...>` span.
fn angle_spans(region: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in region.char_indices() {
        match c {
            '<' => {
                if depth == 0 {
                    start = i + 1;
                }
                depth += 1;
            }
            '>' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push(&region[start..i]);
                }
            }
            _ => {}
        }
    }
    spans
}

/// Splits on commas outside any nested bracket pair.
fn split_top_level(span: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in span.char_indices() {
        match c {
            '(' | '[' | '{' | '<' => depth += 1,
            ')' | ']' | '}' | '>' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&span[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&span[start..]);
    parts
}

fn clean_field(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_extraction_response(text: &str) -> ExtractionResult {
    let region = step2_region(text);
    let triplets: Vec<RawTriplet> = angle_spans(region)
        .into_iter()
        .filter_map(|span| {
            let parts = split_top_level(span);
            if parts.len() != 3 {
                return None;
            }
            let [s, p, o] = [parts[0], parts[1], parts[2]].map(clean_field);
            (!s.is_empty() && !p.is_empty() && !o.is_empty()).then_some(RawTriplet {
                subject: s,
                predicate: p,
                object: o,
            })
        })
        .collect();
    let outcome = if !triplets.is_empty() {
        ExtractionOutcome::Triplets(triplets)
    } else {
        let lower = region.to_lowercase();
        if REFUSAL_PHRASES.iter().any(|p| lower.contains(p)) {
            ExtractionOutcome::None
        } else {
            ExtractionOutcome::ParseFailure
        }
    };
    ExtractionResult {
        outcome,
        raw_response: text.to_string(),
    }
}

fn fold_plural(s: &str) -> &str {
    if s.len() > 1 {
        s.strip_suffix('s').unwrap_or(s)
    } else {
        s
    }
}

/// Reduces an entity mention to one of the pair's labels, if it names one.
pub fn normalize_entity(raw: &str, expected: (&str, &str)) -> Option<String> {
    let mut s = raw
        .to_lowercase()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    for dec in ENTITY_DECORATORS {
        if s == dec {
            return None;
        }
        if let Some(head) = s.strip_suffix(dec) {
            if head.ends_with(' ') {
                s = head.trim_end().to_string();
                break;
            }
        }
    }
    for art in ARTICLES {
        if let Some(rest) = s.strip_prefix(art) {
            s = rest.trim_start().to_string();
            break;
        }
    }
    let folded = fold_plural(&s);
    [expected.0, expected.1]
        .into_iter()
        .find(|label| {
            let l = label.trim().to_lowercase();
            !l.is_empty() && fold_plural(&l) == folded
        })
        .map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Screen {
    Pass,
    Reject,
}

fn word_normalize(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Phrases that carry no semantic or geometric meaning as predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateBlacklist {
    phrases: Vec<String>,
}

impl Default for PredicateBlacklist {
    fn default() -> Self {
        Self::from_text(DEFAULT_BLACKLIST)
    }
}

impl PredicateBlacklist {
    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Self {
        let mut bl = PredicateBlacklist { phrases: Vec::new() };
        bl.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        );
        bl
    }

    pub fn extend<'a>(&mut self, phrases: impl IntoIterator<Item = &'a str>) {
        for p in phrases {
            let n = word_normalize(p);
            if !n.is_empty() && !self.phrases.contains(&n) {
                self.phrases.push(n);
            }
        }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn screen(&self, predicate: &str) -> Screen {
        let p = word_normalize(predicate);
        if p.is_empty() {
            return Screen::Reject;
        }
        let padded = format!(" {p} ");
        if self
            .phrases
            .iter()
            .any(|phrase| padded.contains(&format!(" {phrase} ")))
        {
            Screen::Reject
        } else {
            Screen::Pass
        }
    }
}

pub fn screen_predicate(predicate: &str, blacklist: &PredicateBlacklist) -> Screen {
    blacklist.screen(predicate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    UnresolvedEntity,
    Blacklisted,
    ParseFailure,
    NoneReported,
}

/// One audit-log line for a discarded triplet or caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DropRecord {
    pub caption_id: String,
    pub reason: DropReason,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ExtractionOptions {
    pub two_call_mode: bool,
    pub max_tokens: u32,
    pub blacklist: PredicateBlacklist,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        ExtractionOptions {
            two_call_mode: false,
            max_tokens: DEFAULT_MAX_TOKENS,
            blacklist: PredicateBlacklist::default(),
        }
    }
}

/// The pair a caption was written for: node ids and labels, lower id first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabels {
    pub i: NodeId,
    pub label_i: String,
    pub j: NodeId,
    pub label_j: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExtractionOutput {
    pub triplets: Vec<Triplet>,
    pub drops: Vec<DropRecord>,
    pub raw_responses: Vec<String>,
    pub completion_calls: usize,
}

/// Maps parsed triplets onto the pair's node ids, screening predicates.
pub fn resolve_triplets(
    caption_id: &str,
    result: &ExtractionResult,
    pair: &PairLabels,
    blacklist: &PredicateBlacklist,
) -> (Vec<Triplet>, Vec<DropRecord>) {
    let drop = |reason, detail: String| DropRecord {
        caption_id: caption_id.to_string(),
        reason,
        detail,
    };
    let raw = match &result.outcome {
        ExtractionOutcome::Triplets(t) => t,
        ExtractionOutcome::None => {
            return (Vec::new(), vec![drop(DropReason::NoneReported, result.raw_response.clone())]);
        }
        ExtractionOutcome::ParseFailure => {
            tracing::debug!(caption_id, "unparseable extraction response");
            return (Vec::new(), vec![drop(DropReason::ParseFailure, result.raw_response.clone())]);
        }
    };
    let expected = (pair.label_i.as_str(), pair.label_j.as_str());
    let same_labels = pair.label_i == pair.label_j;
    let node_of = |label: &str| if label == pair.label_i { pair.i } else { pair.j };

    let mut kept = Vec::new();
    let mut drops = Vec::new();
    for t in raw {
        let describe = || format!("<{}, {}, {}>", t.subject, t.predicate, t.object);
        let (Some(s), Some(o)) = (
            normalize_entity(&t.subject, expected),
            normalize_entity(&t.object, expected),
        ) else {
            drops.push(drop(DropReason::UnresolvedEntity, describe()));
            continue;
        };
        let (subject, object) = if same_labels {
            (pair.i, pair.j)
        } else {
            (node_of(&s), node_of(&o))
        };
        if subject == object {
            drops.push(drop(DropReason::UnresolvedEntity, describe()));
            continue;
        }
        if blacklist.screen(&t.predicate) == Screen::Reject {
            drops.push(drop(DropReason::Blacklisted, describe()));
            continue;
        }
        kept.push(Triplet::pending(
            subject,
            normalize_predicate(&t.predicate),
            object,
            caption_id,
        ));
    }
    (kept, drops)
}

/// Prompts the completion backend for one caption and resolves its answer.
pub async fn extract_triplets(
    caption: &CaptionRecord,
    pair: &PairLabels,
    client: &ModelClient,
    opts: &ExtractionOptions,
) -> Result<ExtractionOutput, BackendError> {
    let mut raw_responses = Vec::new();
    let mut sentence = caption.text.trim().to_string();
    if opts.two_call_mode {
        let prompt = render_paraphrase_prompt(&sentence, &pair.label_i, &pair.label_j);
        let paraphrase = client.complete(&prompt, opts.max_tokens).await?;
        raw_responses.push(paraphrase.clone());
        sentence = paraphrase.trim().to_string();
    }
    let prompt = render_extraction_prompt(&sentence, &pair.label_i, &pair.label_j);
    let response = client.complete(&prompt, opts.max_tokens).await?;
    let parsed = parse_extraction_response(&response);
    raw_responses.push(response);
    let (triplets, drops) = resolve_triplets(&caption.caption_id, &parsed, pair, &opts.blacklist);
    Ok(ExtractionOutput {
        triplets,
        drops,
        completion_calls: raw_responses.len(),
        raw_responses,
    })
}
