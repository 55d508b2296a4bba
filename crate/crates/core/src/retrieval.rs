//! Sentence-to-graph retrieval evaluation.
//!
//! Each query is a small text graph parsed from a caption, paired with the id
//! of the gallery graph built from the same image. Gallery graphs are ranked
//! by similarity to the query and the gold graph's rank feeds Recall@K and
//! the median rank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ModelClient};
use crate::error::{Error, Result};
use crate::extraction::{parse_extraction_response, ExtractionOutcome, ExtractionPromptTemplate};
use crate::graph::SceneGraph;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[String; 3]", into = "[String; 3]")]
pub struct TextTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl From<[String; 3]> for TextTriplet {
    fn from([subject, predicate, object]: [String; 3]) -> Self {
        TextTriplet {
            subject,
            predicate,
            object,
        }
    }
}

impl From<TextTriplet> for [String; 3] {
    fn from(t: TextTriplet) -> Self {
        [t.subject, t.predicate, t.object]
    }
}

impl TextTriplet {
    pub fn new(s: &str, p: &str, o: &str) -> Self {
        TextTriplet {
            subject: s.into(),
            predicate: p.into(),
            object: o.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryGraph {
    pub query_id: String,
    pub gold: String,
    pub triplets: Vec<TextTriplet>,
}

/// A query line before caption parsing: either triplets or a raw caption.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInput {
    pub query_id: String,
    pub gold: String,
    #[serde(default)]
    pub triplets: Option<Vec<TextTriplet>>,
    #[serde(default)]
    pub caption: Option<String>,
}

pub fn parse_query_lines(text: &str) -> Result<Vec<QueryInput>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::at(format!("queries line {}", n + 1), e.to_string()))
        })
        .collect()
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Exact non-negative fraction. Similarities are compared exactly so that
/// equal scores fall through to the id tie-break instead of rounding noise.
#[derive(Debug, Clone, Copy)]
struct Frac {
    num: u128,
    den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Frac {
    const ZERO: Frac = Frac { num: 0, den: 1 };

    fn new(num: u128, den: u128) -> Frac {
        let g = gcd(num, den).max(1);
        Frac {
            num: num / g,
            den: den / g,
        }
    }

    fn checked_add(self, o: Frac) -> Option<Frac> {
        let g = gcd(self.den, o.den);
        let den = (self.den / g).checked_mul(o.den)?;
        let num = self.num.checked_mul(o.den / g)?.checked_add(o.num.checked_mul(self.den / g)?)?;
        Some(Frac::new(num, den))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// A similarity score: exact unless the fraction arithmetic overflowed.
#[derive(Debug, Clone, Copy)]
enum Score {
    Exact(Frac),
    Approx(f64),
}

impl Score {
    fn value(self) -> f64 {
        match self {
            Score::Exact(f) => f.to_f64(),
            Score::Approx(v) => v,
        }
    }

    fn cmp(self, other: Score) -> std::cmp::Ordering {
        if let (Score::Exact(a), Score::Exact(b)) = (self, other) {
            if let (Some(x), Some(y)) = (a.num.checked_mul(b.den), b.num.checked_mul(a.den)) {
                return x.cmp(&y);
            }
        }
        self.value().total_cmp(&other.value())
    }
}

/// Jaccard index; two empty sets count as identical.
fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Frac {
    if a.is_empty() && b.is_empty() {
        return Frac::new(1, 1);
    }
    let inter = a.intersection(b).count();
    Frac::new(inter as u128, (a.len() + b.len() - inter) as u128)
}

/// Mean of the token Jaccard similarities of subject, predicate and object.
pub fn triplet_similarity(a: &TextTriplet, b: &TextTriplet) -> f64 {
    TokenTriplet::new(a).similarity(&TokenTriplet::new(b)).to_f64()
}

struct TokenTriplet([BTreeSet<String>; 3]);

impl TokenTriplet {
    fn new(t: &TextTriplet) -> Self {
        TokenTriplet([tokens(&t.subject), tokens(&t.predicate), tokens(&t.object)])
    }

    fn similarity(&self, other: &TokenTriplet) -> Frac {
        // each denominator is a union size, so this cannot overflow
        let sum = (0..3)
            .map(|k| jaccard(&self.0[k], &other.0[k]))
            .try_fold(Frac::ZERO, Frac::checked_add)
            .expect("small denominators");
        Frac::new(sum.num, sum.den * 3)
    }
}

pub fn graph_triplets(g: &SceneGraph) -> Vec<TextTriplet> {
    g.labelled_edges()
        .into_iter()
        .map(|(s, p, o)| TextTriplet {
            subject: s,
            predicate: p,
            object: o,
        })
        .collect()
}

fn best_match_mean(query: &[TokenTriplet], edges: &[TokenTriplet]) -> Score {
    if query.is_empty() || edges.is_empty() {
        return Score::Exact(Frac::ZERO);
    }
    let best: Vec<Frac> = query
        .iter()
        .map(|q| {
            edges.iter().map(|e| q.similarity(e)).fold(Frac::ZERO, |m, s| {
                if Score::Exact(s).cmp(Score::Exact(m)).is_gt() {
                    s
                } else {
                    m
                }
            })
        })
        .collect();
    let n = query.len() as u128;
    match best.iter().try_fold(Frac::ZERO, |acc, f| acc.checked_add(*f)) {
        Some(total) if total.den.checked_mul(n).is_some() => Score::Exact(Frac::new(total.num, total.den * n)),
        _ => Score::Approx(best.iter().map(|f| f.to_f64()).sum::<f64>() / n as f64),
    }
}

/// Mean over query triplets of the best-matching edge similarity.
pub fn graph_similarity(q: &QueryGraph, g: &SceneGraph) -> f64 {
    let qt: Vec<_> = q.triplets.iter().map(TokenTriplet::new).collect();
    let gt: Vec<_> = graph_triplets(g).iter().map(TokenTriplet::new).collect();
    best_match_mean(&qt, &gt).value()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedGraph {
    pub id: String,
    pub similarity: f64,
}

/// Gallery with edges pre-tokenized, sorted by id.
pub struct Gallery {
    ids: Vec<String>,
    edges: Vec<Vec<TokenTriplet>>,
}

impl Gallery {
    pub fn new(graphs: &[SceneGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Invalid("gallery is empty".into()));
        }
        let mut sorted: Vec<&SceneGraph> = graphs.iter().collect();
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = sorted.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Invalid(format!("duplicate gallery id {:?}", w[0].image_id)));
        }
        Ok(Gallery {
            ids: sorted.iter().map(|g| g.image_id.clone()).collect(),
            edges: sorted
                .iter()
                .map(|g| graph_triplets(g).iter().map(TokenTriplet::new).collect())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }

    /// Descending similarity, ties by ascending id.
    pub fn rank(&self, q: &QueryGraph) -> Vec<RankedGraph> {
        let qt: Vec<_> = q.triplets.iter().map(TokenTriplet::new).collect();
        let mut scored: Vec<(&String, Score)> = self
            .ids
            .iter()
            .zip(&self.edges)
            .map(|(id, edges)| (id, best_match_mean(&qt, edges)))
            .collect();
        // ids are already ascending, so a stable sort on score keeps the tie order
        scored.sort_by(|a, b| b.1.cmp(a.1));
        scored
            .into_iter()
            .map(|(id, s)| RankedGraph {
                id: id.clone(),
                similarity: s.value(),
            })
            .collect()
    }
}

pub fn rank_gallery(q: &QueryGraph, gallery: &[SceneGraph]) -> Result<Vec<RankedGraph>> {
    Ok(Gallery::new(gallery)?.rank(q))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRank {
    pub query_id: String,
    pub gold: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub gallery_size: usize,
    pub query_count: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub ranks: Vec<QueryRank>,
}

pub fn median_of(ranks: &[usize]) -> f64 {
    let mut v = ranks.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Recall@k for each k and the median rank, from 1-based gold ranks.
pub fn summarize_ranks(ranks: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, f64) {
    let n = ranks.len().max(1) as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    (recall, median_of(ranks))
}

pub fn evaluate(queries: &[QueryGraph], gallery: &[SceneGraph], ks: &[usize]) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Invalid("recall cut-offs must be >= 1".into()));
    }
    let gallery = Gallery::new(gallery)?;
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        if q.triplets.is_empty() {
            return Err(Error::Invalid(format!("query {} has no triplets", q.query_id)));
        }
        if !gallery.contains(&q.gold) {
            return Err(Error::Invalid(format!(
                "query {}: gold graph {:?} is not in the gallery",
                q.query_id, q.gold
            )));
        }
        let rank = gallery
            .rank(q)
            .iter()
            .position(|r| r.id == q.gold)
            .map(|p| p + 1)
            .expect("gold id present");
        ranks.push(QueryRank {
            query_id: q.query_id.clone(),
            gold: q.gold.clone(),
            rank,
        });
    }
    let raw: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    let (recall_at, median_rank) = summarize_ranks(&raw, ks);
    Ok(RetrievalReport {
        gallery_size: gallery.len(),
        query_count: queries.len(),
        recall_at,
        median_rank,
        ranks,
    })
}

fn clean_mention(s: &str) -> String {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let words = match words.first() {
        Some(&("a" | "an" | "the")) => &words[1..],
        _ => &words[..],
    };
    words.join(" ")
}

/// Turns a caption into a query graph through the completion backend.
pub async fn parse_caption_query(
    client: &ModelClient,
    caption: &str,
    max_tokens: u32,
) -> std::result::Result<Vec<TextTriplet>, BackendError> {
    let t = ExtractionPromptTemplate::default();
    let prompt = format!(
        "{}\n\n{}\n\nQuestion: Given the sentence \"{}\", extract meaningful triplets describing the relationships between the objects it mentions.",
        t.task_description,
        t.examples,
        caption.replace('\\', "\\\\").replace('"', "\\\"")
    );
    let text = client.complete(&prompt, max_tokens).await?;
    Ok(match parse_extraction_response(&text).outcome {
        ExtractionOutcome::Triplets(ts) => ts
            .into_iter()
            .map(|r| TextTriplet {
                subject: clean_mention(&r.subject),
                predicate: clean_mention(&r.predicate),
                object: clean_mention(&r.object),
            })
            .collect(),
        _ => Vec::new(),
    })
}
