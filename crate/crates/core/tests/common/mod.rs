#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use image::RgbImage;
use rand::Rng;
use serde_json::{json, Value};
use sgg_core::backends::{ModelClient, ServiceKind, Transport, TransportError};
use sgg_core::geometry::{DepthGrid, FilterParams};
use sgg_core::graph::{BBox, DetectedObject, ImageRecord};

type Handler = dyn Fn(ServiceKind, &Value) -> Result<Value, TransportError> + Send + Sync;

/// Transport that answers from a closure and counts calls per kind.
pub struct FnTransport {
    handler: Box<Handler>,
    calls: [AtomicUsize; 5],
}

impl FnTransport {
    pub fn new(f: impl Fn(ServiceKind, &Value) -> Result<Value, TransportError> + Send + Sync + 'static) -> Arc<Self> {
        Arc::new(FnTransport {
            handler: Box::new(f),
            calls: Default::default(),
        })
    }

    pub fn calls(&self, kind: ServiceKind) -> usize {
        self.calls[kind.index()].load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Transport for FnTransport {
    async fn call(&self, kind: ServiceKind, body: &Value) -> Result<Value, TransportError> {
        self.calls[kind.index()].fetch_add(1, Ordering::SeqCst);
        // let other tasks interleave so scheduling differences show up
        tokio::task::yield_now().await;
        (self.handler)(kind, body)
    }
}

pub fn client(t: Arc<dyn Transport>) -> ModelClient {
    ModelClient::new(t, 0, Duration::ZERO)
}

pub fn blank(id: &str, w: u32, h: u32) -> ImageRecord {
    ImageRecord::from_rgb(id, RgbImage::from_pixel(w, h, image::Rgb([90, 120, 150]))).unwrap()
}

pub fn text(s: impl Into<String>) -> Value {
    json!({ "text": s.into() })
}

pub fn detect_response(objs: &[(&str, [f64; 4])]) -> Value {
    json!({ "objects": objs.iter().map(|(l, b)| json!({"label": l, "bbox": b})).collect::<Vec<_>>() })
}

pub fn depth_response(rows: usize, cols: usize, values: &[f64]) -> Value {
    json!({ "rows": rows, "cols": cols, "values": values })
}

pub fn str_field<'a>(body: &'a Value, key: &str) -> &'a str {
    body[key].as_str().unwrap_or_default()
}

/// The two labels named at the end of an extraction prompt.
pub fn prompt_labels(prompt: &str) -> (String, String) {
    let tail = &prompt[prompt.rfind("relationship between ").expect("extraction prompt") + 21..];
    let tail = tail.trim_end().trim_end_matches('.');
    let (a, b) = tail.split_once(" and ").expect("two labels");
    (a.to_string(), b.to_string())
}

pub fn object(id: usize, label: &str, b: [f64; 4]) -> DetectedObject {
    DetectedObject {
        node_id: id,
        label: label.into(),
        bbox: BBox::from(b),
        score: 1.0,
    }
}

pub struct Scene {
    pub image: ImageRecord,
    pub objects: Vec<DetectedObject>,
    pub rows: usize,
    pub cols: usize,
    pub depth: Vec<f64>,
}

impl Scene {
    pub fn grid(&self) -> DepthGrid {
        DepthGrid::new(self.rows, self.cols, self.depth.clone(), self.image.width, self.image.height).unwrap()
    }
}

/// Random scene with `n` objects on a `w x h` image and a random depth grid.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> Scene {
    let w = rng.gen_range(32..=640u32);
    let h = rng.gen_range(32..=640u32);
    let rows = rng.gen_range(1..=24usize);
    let cols = rng.gen_range(1..=24usize);
    // quantized depths make exact ties between objects likely
    let levels = rng.gen_range(2..=40u32);
    let depth = (0..rows * cols)
        .map(|_| rng.gen_range(0..=levels) as f64 / levels as f64)
        .collect();
    let objects = (0..n)
        .map(|i| {
            let x1 = rng.gen_range(0.0..w as f64 - 1.0);
            let y1 = rng.gen_range(0.0..h as f64 - 1.0);
            let x2 = rng.gen_range(x1 + 0.5..=w as f64);
            let y2 = rng.gen_range(y1 + 0.5..=h as f64);
            object(i, "thing", [x1, y1, x2, y2])
        })
        .collect();
    Scene {
        image: blank("scene", w, h),
        objects,
        rows,
        cols,
        depth,
    }
}

/// Brute-force median depth: scans every cell of the grid.
pub fn oracle_median(s: &Scene, b: &BBox) -> f64 {
    let (w, h) = (s.image.width as f64, s.image.height as f64);
    let mut inside = Vec::new();
    for r in 0..s.rows {
        for c in 0..s.cols {
            let cx = (c as f64 + 0.5) * (w / s.cols as f64);
            let cy = (r as f64 + 0.5) * (h / s.rows as f64);
            if b.x1 <= cx && cx < b.x2 && b.y1 <= cy && cy < b.y2 {
                inside.push(s.depth[r * s.cols + c]);
            }
        }
    }
    if inside.is_empty() {
        let cx = (b.x1 + b.x2) / 2.0;
        let cy = (b.y1 + b.y2) / 2.0;
        let c = ((cx / (w / s.cols as f64)) as usize).min(s.cols - 1);
        let r = ((cy / (h / s.rows as f64)) as usize).min(s.rows - 1);
        return s.depth[r * s.cols + c];
    }
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = inside.len();
    if m % 2 == 1 {
        inside[m / 2]
    } else {
        (inside[m / 2 - 1] + inside[m / 2]) / 2.0
    }
}

/// (i, j, score, retained) for every pair i < j, straight from the formula.
pub fn oracle_pairs(s: &Scene, p: &FilterParams) -> Vec<(usize, usize, f64, bool)> {
    let diag = (s.image.width as f64).hypot(s.image.height as f64);
    let mut objs = s.objects.clone();
    objs.sort_by_key(|o| o.node_id);
    let mut out = Vec::new();
    for a in 0..objs.len() {
        for b in a + 1..objs.len() {
            let (oa, ob) = (&objs[a], &objs[b]);
            let ca = ((oa.bbox.x1 + oa.bbox.x2) / 2.0, (oa.bbox.y1 + oa.bbox.y2) / 2.0);
            let cb = ((ob.bbox.x1 + ob.bbox.x2) / 2.0, (ob.bbox.y1 + ob.bbox.y2) / 2.0);
            let x = (ca.0 - cb.0).hypot(ca.1 - cb.1);
            let dd = (oracle_median(s, &oa.bbox) - oracle_median(s, &ob.bbox)).abs();
            let score = p.lambda1 * (x / diag) + p.lambda2 * dd;
            out.push((oa.node_id, ob.node_id, score, !p.enabled || score < p.tau));
        }
    }
    out
}

/// Ten objects in three depth bands of 4, 3 and 3 on a 300x100 image.
///
/// Bands sit 0.5 apart in depth, so every cross-band pair scores at least
/// 0.5 and is dropped, while same-band pairs score below 0.45 and are kept:
/// C(4,2) + C(3,2) + C(3,2) = 12 of 45.
pub fn banded_scene() -> Scene {
    let labels = ["cat", "dog", "cup", "box", "hat", "pen", "key", "car", "bus", "mug"];
    let bands = [(0.0, 4), (100.0, 3), (200.0, 3)];
    let mut objects = Vec::new();
    for (x0, count) in bands {
        for k in 0..count {
            let id = objects.len();
            let inset = 4.0 * k as f64;
            objects.push(object(id, labels[id], [x0 + 10.0 + inset, 10.0 + inset, x0 + 90.0 - inset, 90.0]));
        }
    }
    Scene {
        image: blank("banded", 300, 100),
        objects,
        rows: 1,
        cols: 3,
        depth: vec![0.0, 0.5, 1.0],
    }
}

pub fn scene_detect_response(s: &Scene) -> Value {
    let objs: Vec<(&str, [f64; 4])> = s
        .objects
        .iter()
        .map(|o| (o.label.as_str(), [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2]))
        .collect();
    detect_response(&objs)
}

const CHARS: &[char] = &[
    'a', 'b', 'k', 'z', 'é', 'ß', 'ж', '漢', '字', '🙂', 'ü', '"', '\\', '\'', '-', '#', '/', '<', '>', ',',
];

pub fn random_text(rng: &mut impl Rng, max_words: usize) -> String {
    let words = rng.gen_range(1..=max_words);
    (0..words)
        .map(|_| (0..rng.gen_range(1..=6)).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Structurally valid graph with unicode labels and predicates.
pub fn random_graph(rng: &mut impl Rng, id: &str) -> sgg_core::graph::SceneGraph {
    use sgg_core::graph::{normalize_predicate, Edge, SceneGraph};
    let w = rng.gen_range(1..=4000u32);
    let h = rng.gen_range(1..=4000u32);
    let n = rng.gen_range(0..=8usize);
    let nodes: Vec<DetectedObject> = (0..n)
        .map(|i| {
            let x1 = rng.gen_range(0.0..w as f64);
            let y1 = rng.gen_range(0.0..h as f64);
            let x2 = rng.gen_range(x1..=w as f64);
            let y2 = rng.gen_range(y1..=h as f64);
            let (x2, y2) = (if x2 > x1 { x2 } else { w as f64 }, if y2 > y1 { y2 } else { h as f64 });
            DetectedObject {
                node_id: i * 3 + rng.gen_range(0..3),
                label: random_text(rng, 3),
                bbox: BBox::from([x1, y1, x2, y2]),
                score: rng.gen_range(0.0..=1.0),
            }
        })
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut edges = Vec::new();
    if n >= 2 {
        for _ in 0..rng.gen_range(0..=12) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let predicate = random_text(rng, 4);
            let (s, o) = (nodes[a].node_id, nodes[b].node_id);
            if seen.insert((s, normalize_predicate(&predicate), o)) {
                edges.push(Edge { subject: s, predicate, object: o });
            }
        }
    }
    SceneGraph {
        image_id: format!("{id}-{}", random_text(rng, 2)),
        width: w,
        height: h,
        nodes,
        edges,
    }
}
