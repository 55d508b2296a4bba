//! Scene graph data model.
//!
//! A [`SceneGraph`] is a set of detected objects (nodes) plus directed,
//! predicate-labelled edges between distinct nodes. The JSON form produced
//! by [`serialize_graph`] is the canonical interchange format; DOT output is
//! export-only.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and zero or negative extent.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("{self:?} has non-finite coordinates")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox(format!(
                "{self:?} requires x1 < x2 and y1 < y2"
            )));
        }
        Ok(())
    }

    /// Checks `0 <= x1 < x2 <= width` and `0 <= y1 < y2 <= height`.
    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        self.check()?;
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width as f64 || self.y2 > height as f64 {
            return Err(Error::InvalidBox(format!(
                "{self:?} lies outside a {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }
}

/// Where an image's pixels come from.
#[derive(Debug, Clone)]
pub enum PixelSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: PixelSource,
}

impl ImageRecord {
    /// Reads only the image header to obtain dimensions.
    pub fn from_path(id: impl Into<String>, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Self::checked(id.into(), width, height, PixelSource::Path(path))
    }

    pub fn from_rgb(id: impl Into<String>, img: RgbImage) -> Result<Self> {
        let (width, height) = img.dimensions();
        Self::checked(id.into(), width, height, PixelSource::Memory(Arc::new(img)))
    }

    fn checked(id: String, width: u32, height: u32, pixels: PixelSource) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("image {id} has zero extent")));
        }
        Ok(ImageRecord {
            id,
            width,
            height,
            pixels,
        })
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn load_rgb(&self) -> Result<Arc<RgbImage>> {
        match &self.pixels {
            PixelSource::Memory(img) => Ok(Arc::clone(img)),
            PixelSource::Path(p) => {
                let img = image::open(p)
                    .map_err(|e| Error::Image(format!("{}: {e}", p.display())))?
                    .to_rgb8();
                if img.dimensions() != (self.width, self.height) {
                    return Err(Error::Image(format!(
                        "{} changed size since it was registered",
                        p.display()
                    )));
                }
                Ok(Arc::new(img))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    #[serde(rename = "id")]
    pub node_id: NodeId,
    pub label: String,
    pub bbox: BBox,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    1.0
}

impl DetectedObject {
    pub fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::Invalid(format!("node {} has an empty label", self.node_id)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Invalid(format!(
                "node {} score {} outside [0,1]",
                self.node_id, self.score
            )));
        }
        self.bbox.check_within(width, height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationState {
    Pending,
    Kept,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: NodeId,
    pub predicate: String,
    pub object: NodeId,
    pub source_caption_id: String,
    pub validated: ValidationState,
}

impl Triplet {
    pub fn pending(
        subject: NodeId,
        predicate: impl Into<String>,
        object: NodeId,
        source_caption_id: impl Into<String>,
    ) -> Self {
        Triplet {
            subject,
            predicate: predicate.into(),
            object,
            source_caption_id: source_caption_id.into(),
            validated: ValidationState::Pending,
        }
    }
}

/// One directed, labelled edge of an assembled graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub subject: NodeId,
    pub predicate: String,
    pub object: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraph {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub nodes: Vec<DetectedObject>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn node(&self, id: NodeId) -> Option<&DetectedObject> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Edges rendered with node labels in place of ids.
    pub fn labelled_edges(&self) -> Vec<(String, String, String)> {
        self.edges
            .iter()
            .filter_map(|e| {
                let s = self.node(e.subject)?;
                let o = self.node(e.object)?;
                Some((s.label.clone(), e.predicate.clone(), o.label.clone()))
            })
            .collect()
    }

    /// Re-checks every structural invariant, reporting the offending field path.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::at("width/height", "image extent must be positive"));
        }
        let mut ids = BTreeSet::new();
        for (k, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.node_id) {
                return Err(Error::at(
                    format!("nodes[{k}].id"),
                    format!("duplicate node id {}", n.node_id),
                ));
            }
            if n.label.trim().is_empty() {
                return Err(Error::at(format!("nodes[{k}].label"), "empty label"));
            }
            if !(0.0..=1.0).contains(&n.score) {
                return Err(Error::at(
                    format!("nodes[{k}].score"),
                    format!("{} outside [0,1]", n.score),
                ));
            }
            n.bbox
                .check_within(self.width, self.height)
                .map_err(|e| Error::at(format!("nodes[{k}].bbox"), e.to_string()))?;
        }
        let mut seen = BTreeSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            for (field, id) in [("subject", e.subject), ("object", e.object)] {
                if !ids.contains(&id) {
                    return Err(Error::at(
                        format!("edges[{k}].{field}"),
                        format!("node {id} not present in nodes"),
                    ));
                }
            }
            if e.subject == e.object {
                return Err(Error::at(format!("edges[{k}]"), "self-loop"));
            }
            let pred = normalize_predicate(&e.predicate);
            if pred.is_empty() {
                return Err(Error::at(format!("edges[{k}].predicate"), "empty predicate"));
            }
            if !seen.insert((e.subject, pred, e.object)) {
                return Err(Error::at(format!("edges[{k}]"), "duplicate edge"));
            }
        }
        Ok(())
    }
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_predicate(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Builds the final graph from detected nodes and validated triplets.
///
/// Predicates are normalized, exact duplicates collapse to one edge and the
/// edge list is sorted by `(subject, object, predicate)`. Distinct predicates
/// between the same node pair stay separate edges.
pub fn assemble_graph(
    image: &ImageRecord,
    nodes: &[DetectedObject],
    kept: &[Triplet],
) -> Result<SceneGraph> {
    let ids: BTreeSet<NodeId> = nodes.iter().map(|n| n.node_id).collect();
    let mut edges = BTreeSet::new();
    for t in kept {
        if !ids.contains(&t.subject) || !ids.contains(&t.object) {
            return Err(Error::DanglingNode(format!(
                "triplet ({}, {:?}, {}) from {} references a missing node",
                t.subject, t.predicate, t.object, t.source_caption_id
            )));
        }
        if t.subject == t.object {
            return Err(Error::Invalid(format!(
                "triplet ({}, {:?}, {}) from {} is a self-loop",
                t.subject, t.predicate, t.object, t.source_caption_id
            )));
        }
        let predicate = normalize_predicate(&t.predicate);
        if predicate.is_empty() {
            return Err(Error::Invalid(format!(
                "triplet from {} has an empty predicate",
                t.source_caption_id
            )));
        }
        edges.insert((t.subject, t.object, predicate));
    }
    let mut nodes = nodes.to_vec();
    nodes.sort_by_key(|n| n.node_id);
    let graph = SceneGraph {
        image_id: image.id.clone(),
        width: image.width,
        height: image.height,
        nodes,
        edges: edges
            .into_iter()
            .map(|(subject, object, predicate)| Edge {
                subject,
                predicate,
                object,
            })
            .collect(),
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(GraphFormat::Json),
            "dot" => Ok(GraphFormat::Dot),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

pub fn serialize_graph(g: &SceneGraph, format: GraphFormat) -> Result<Vec<u8>> {
    match format {
        GraphFormat::Json => Ok(serde_json::to_vec(g)?),
        GraphFormat::Dot => Ok(to_dot(g).into_bytes()),
    }
}

pub fn parse_graph(bytes: &[u8], format: GraphFormat) -> Result<SceneGraph> {
    match format {
        GraphFormat::Json => {
            let g: SceneGraph = serde_json::from_slice(bytes)
                .map_err(|e| Error::at(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
            g.validate()?;
            Ok(g)
        }
        GraphFormat::Dot => Err(Error::UnknownFormat("dot is export-only".into())),
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn to_dot(g: &SceneGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(&g.image_id));
    for n in &g.nodes {
        let _ = writeln!(
            out,
            "  n{} [label=\"{}\"];",
            n.node_id,
            dot_escape(&format!("{}#{}", n.label, n.node_id))
        );
    }
    for e in &g.edges {
        let _ = writeln!(
            out,
            "  n{} -> n{} [label=\"{}\"];",
            e.subject,
            e.object,
            dot_escape(&e.predicate)
        );
    }
    out.push_str("}\n");
    out
}

/// Parses a JSON-lines batch, one graph per non-blank line.
pub fn parse_graph_lines(text: &str) -> Result<Vec<SceneGraph>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_graph(l.as_bytes(), GraphFormat::Json)
                .map_err(|e| Error::at(format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}
