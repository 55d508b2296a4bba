//! Pairwise crops with highlighted objects, and the captioning prompt.
//!
//! For each retained pair the lower node id becomes obj1 (outlined red) and
//! the higher one obj2 (outlined yellow). The crop covers both boxes plus a
//! margin so the captioner sees the interaction in local context.

use image::{Rgb, RgbImage};
use serde::Serialize;
use thiserror::Error;

use crate::backends::{BackendError, EncodedImage, ModelClient};
use crate::error::{Error, Result};
use crate::geometry::PairCandidate;
use crate::graph::{BBox, DetectedObject, NodeId};

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);

pub const DEFAULT_MARGIN_FRAC: f64 = 0.1;
pub const MIN_STROKE_PX: u32 = 3;

const CAPTION_TEMPLATE: &str = "What is the relationship between the {obj1} in the red rectangle and the {obj2} in the yellow rectangle? Use the red and yellow rectangle to locate the objects, and then focus primarily on understanding the pairwise relation between the {obj1} in the red rectangle and the {obj2} in the yellow rectangle, in a way that reflects their interaction or relative location.";

pub fn render_caption_prompt(label1: &str, label2: &str) -> Result<String> {
    if label1.trim().is_empty() || label2.trim().is_empty() {
        return Err(Error::Invalid("caption prompt labels must be nonempty".into()));
    }
    Ok(CAPTION_TEMPLATE.replace("{obj1}", label1).replace("{obj2}", label2))
}

/// Union of both boxes grown by `margin_frac` of the union diagonal on each
/// side, clamped to the image.
pub fn compute_crop(b1: &BBox, b2: &BBox, width: u32, height: u32, margin_frac: f64) -> Result<BBox> {
    if !(0.0..=0.5).contains(&margin_frac) {
        return Err(Error::Invalid(format!("margin_frac {margin_frac} outside [0, 0.5]")));
    }
    b1.check()?;
    b2.check()?;
    let u = b1.union(b2);
    let m = margin_frac * u.diagonal();
    let crop = BBox {
        x1: (u.x1 - m).max(0.0),
        y1: (u.y1 - m).max(0.0),
        x2: (u.x2 + m).min(width as f64),
        y2: (u.y2 + m).min(height as f64),
    };
    crop.check()?;
    Ok(crop)
}

/// Integer pixel window `(x, y, w, h)` covering `rect`, rounded outward.
pub fn pixel_window(rect: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x1 = (rect.x1.floor().max(0.0) as u32).min(width - 1);
    let y1 = (rect.y1.floor().max(0.0) as u32).min(height - 1);
    let x2 = (rect.x2.ceil() as u32).clamp(x1 + 1, width);
    let y2 = (rect.y2.ceil() as u32).clamp(y1 + 1, height);
    (x1, y1, x2 - x1, y2 - y1)
}

pub fn default_stroke(crop_w: u32, crop_h: u32) -> u32 {
    let diag = (crop_w as f64).hypot(crop_h as f64);
    MIN_STROKE_PX.max((0.005 * diag).round() as u32)
}

/// Inclusive pixel span covered by a box inside an image of `w`x`h`.
fn pixel_span(b: &BBox, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let x1 = (b.x1.floor().max(0.0) as u32).min(w - 1);
    let y1 = (b.y1.floor().max(0.0) as u32).min(h - 1);
    let x2 = ((b.x2.ceil() as u32).saturating_sub(1)).clamp(x1, w - 1);
    let y2 = ((b.y2.ceil() as u32).saturating_sub(1)).clamp(y1, h - 1);
    (x1, y1, x2, y2)
}

fn outline(img: &mut RgbImage, b: &BBox, stroke: u32, color: Rgb<u8>) {
    let (x1, y1, x2, y2) = pixel_span(b, img.width(), img.height());
    for y in y1..=y2 {
        for x in x1..=x2 {
            let on_edge = x < x1 + stroke || x + stroke > x2 || y < y1 + stroke || y + stroke > y2;
            if on_edge {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Outlines obj1 in red and then obj2 in yellow, `stroke_px` pixels wide,
/// drawn inward from each box edge. Everything else is left as is.
pub fn draw_highlights(crop: &RgbImage, obj1: &BBox, obj2: &BBox, stroke_px: u32) -> Result<RgbImage> {
    if stroke_px < 1 {
        return Err(Error::Invalid("stroke width must be at least 1 pixel".into()));
    }
    let (w, h) = crop.dimensions();
    for b in [obj1, obj2] {
        b.check_within(w, h)?;
    }
    let mut out = crop.clone();
    outline(&mut out, obj1, stroke_px, RED);
    outline(&mut out, obj2, stroke_px, YELLOW);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PairCrop {
    pub pair: (NodeId, NodeId),
    /// Crop window in image coordinates, after outward pixel rounding.
    pub crop_rect: BBox,
    pub obj1_box: BBox,
    pub obj2_box: BBox,
    pub image: RgbImage,
    pub encoded: EncodedImage,
    pub prompt: String,
}

fn translate(b: &BBox, dx: f64, dy: f64, w: u32, h: u32) -> BBox {
    BBox {
        x1: (b.x1 - dx).clamp(0.0, w as f64),
        y1: (b.y1 - dy).clamp(0.0, h as f64),
        x2: (b.x2 - dx).clamp(0.0, w as f64),
        y2: (b.y2 - dy).clamp(0.0, h as f64),
    }
}

/// Cuts the highlighted crop for `(obj1, obj2)` and renders its prompt.
pub fn build_pair_crop(
    image: &RgbImage,
    obj1: &DetectedObject,
    obj2: &DetectedObject,
    margin_frac: f64,
) -> Result<PairCrop> {
    let (w, h) = image.dimensions();
    let rect = compute_crop(&obj1.bbox, &obj2.bbox, w, h, margin_frac)?;
    let (px, py, pw, ph) = pixel_window(&rect, w, h);
    let crop_rect = BBox {
        x1: px as f64,
        y1: py as f64,
        x2: (px + pw) as f64,
        y2: (py + ph) as f64,
    };
    let plain = image::imageops::crop_imm(image, px, py, pw, ph).to_image();
    let obj1_box = translate(&obj1.bbox, px as f64, py as f64, pw, ph);
    let obj2_box = translate(&obj2.bbox, px as f64, py as f64, pw, ph);
    let highlighted = draw_highlights(&plain, &obj1_box, &obj2_box, default_stroke(pw, ph))?;
    let encoded = EncodedImage::from_rgb(&highlighted).map_err(|e| Error::Image(e.to_string()))?;
    Ok(PairCrop {
        pair: (obj1.node_id, obj2.node_id),
        crop_rect,
        obj1_box,
        obj2_box,
        image: highlighted,
        encoded,
        prompt: render_caption_prompt(&obj1.label, &obj2.label)?,
    })
}

/// Plain (unhighlighted) crop around a pair, used when validation runs on crops.
pub fn plain_pair_crop(image: &RgbImage, b1: &BBox, b2: &BBox, margin_frac: f64) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    let rect = compute_crop(b1, b2, w, h, margin_frac)?;
    let (px, py, pw, ph) = pixel_window(&rect, w, h);
    Ok(image::imageops::crop_imm(image, px, py, pw, ph).to_image())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub pair: (NodeId, NodeId),
    pub text: String,
}

pub fn caption_id(image_id: &str, i: NodeId, j: NodeId) -> String {
    format!("{image_id}:{i}-{j}")
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("{caption_id}: {source}")]
    Backend {
        caption_id: String,
        #[source]
        source: BackendError,
    },
    #[error("{caption_id}: {source}")]
    Input {
        caption_id: String,
        #[source]
        source: Error,
    },
}

/// Crops, highlights, prompts and captions one retained pair.
pub async fn caption_pair(
    pair: &PairCandidate,
    image_id: &str,
    image: &RgbImage,
    objects: &[DetectedObject],
    client: &ModelClient,
    margin_frac: f64,
) -> std::result::Result<(CaptionRecord, PairCrop), CaptionError> {
    let id = caption_id(image_id, pair.i, pair.j);
    let input = |source: Error| CaptionError::Input {
        caption_id: id.clone(),
        source,
    };
    if !pair.retained {
        return Err(input(Error::Invalid("pair was not retained by the filter".into())));
    }
    let find = |n: NodeId| {
        objects
            .iter()
            .find(|o| o.node_id == n)
            .ok_or_else(|| Error::DanglingNode(format!("node {n}")))
    };
    let (lo, hi) = (pair.i.min(pair.j), pair.i.max(pair.j));
    let obj1 = find(lo).map_err(input)?;
    let obj2 = find(hi).map_err(input)?;
    let crop = build_pair_crop(image, obj1, obj2, margin_frac).map_err(input)?;
    let text = client
        .caption(&crop.encoded, &crop.prompt)
        .await
        .map_err(|source| CaptionError::Backend {
            caption_id: id.clone(),
            source,
        })?;
    Ok((
        CaptionRecord {
            caption_id: id,
            pair: (lo, hi),
            text,
        },
        crop,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: [f64; 4]) -> BBox {
        a.into()
    }

    #[test]
    fn prompt_substitution() {
        let p = render_caption_prompt("person", "dog").unwrap();
        assert!(p.starts_with(
            "What is the relationship between the person in the red rectangle and the dog in the yellow rectangle?"
        ));
        assert_eq!(p.matches("person in the red rectangle").count(), 2);
        assert_eq!(p.matches("dog in the yellow rectangle").count(), 2);
        assert!(!p.contains('{'));
        let same = render_caption_prompt("man", "man").unwrap();
        assert_eq!(same.matches("man in the").count(), 4);
        assert!(render_caption_prompt("", "dog").is_err());
    }

    #[test]
    fn crops() {
        let c = compute_crop(&bb([0., 0., 10., 10.]), &bb([90., 90., 100., 100.]), 100, 100, 0.0).unwrap();
        assert_eq!(c, bb([0., 0., 100., 100.]));
        let c = compute_crop(&bb([0., 0., 60., 50.]), &bb([40., 50., 100., 100.]), 100, 100, 0.3).unwrap();
        assert_eq!(c, bb([0., 0., 100., 100.]));
        // union (40,40)-(60,60), diag 20*sqrt2, margin 0.5 -> ~14.14 per side
        let c = compute_crop(&bb([40., 40., 50., 50.]), &bb([50., 50., 60., 60.]), 100, 100, 0.5).unwrap();
        let m = 0.5 * 20f64.hypot(20.0);
        assert_eq!(c, bb([40. - m, 40. - m, 60. + m, 60. + m]));
        let c = compute_crop(&bb([2., 3., 12., 13.]), &bb([5., 5., 15., 15.]), 16, 16, 0.5).unwrap();
        assert_eq!(c, bb([0., 0., 16., 16.]));
        assert!(compute_crop(&bb([0., 0., 1., 1.]), &bb([0., 0., 1., 1.]), 4, 4, 0.6).is_err());
    }

    #[test]
    fn highlight_colors_and_locality() {
        let base = RgbImage::from_fn(40, 30, |x, y| Rgb([x as u8, y as u8, 77]));
        let b1 = bb([2., 2., 15., 20.]);
        let b2 = bb([20., 5., 38., 28.]);
        let out = draw_highlights(&base, &b1, &b2, 2).unwrap();
        assert_eq!(*out.get_pixel(2, 10), RED);
        assert_eq!(*out.get_pixel(14, 19), RED);
        assert_eq!(*out.get_pixel(20, 5), YELLOW);
        assert_eq!(*out.get_pixel(36, 26), YELLOW);
        // interior and background untouched
        assert_eq!(out.get_pixel(8, 10), base.get_pixel(8, 10));
        assert_eq!(out.get_pixel(29, 16), base.get_pixel(29, 16));
        assert_eq!(out.get_pixel(17, 1), base.get_pixel(17, 1));
        assert!(draw_highlights(&base, &b1, &b2, 0).is_err());
    }

    #[test]
    fn stroke_scales_with_crop() {
        assert_eq!(default_stroke(100, 100), 3);
        assert_eq!(default_stroke(3000, 4000), 25);
    }

    #[test]
    fn pair_crop_geometry() {
        let img = RgbImage::new(200, 100);
        let o1 = DetectedObject { node_id: 0, label: "man".into(), bbox: bb([10.5, 10., 50., 90.]), score: 1.0 };
        let o2 = DetectedObject { node_id: 1, label: "man".into(), bbox: bb([120., 20., 160.2, 95.]), score: 1.0 };
        let c = build_pair_crop(&img, &o1, &o2, 0.1).unwrap();
        assert!(c.crop_rect.contains(&o1.bbox.union(&o2.bbox)));
        let (w, h) = c.image.dimensions();
        assert!(c.obj1_box.check_within(w, h).is_ok());
        assert!(c.obj2_box.check_within(w, h).is_ok());
        assert_eq!(c.pair, (0, 1));
    }
}
