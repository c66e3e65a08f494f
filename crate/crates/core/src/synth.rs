//! Procedural image-caption corpus: 32 color/shape classes × 8 placement
//! variants = 256 pairs of 32×32 rasters with 3–6-token Italian captions,
//! fully deterministic (no RNG). Variant 0 (the plain centered drawing) of
//! every class is held out as the evaluation split: its captions are unique
//! per class and its medium-centered composition sits between the shifted
//! and resized variants the model trains on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{save_ppm, AugmentError, RasterImage};
use crate::data::{CaptionRecord, SourceTag};

pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 32;
pub const VARIANTS_PER_CLASS: usize = 8;
pub const EVAL_VARIANT: usize = 0;

const COLORS: &[(&str, [u8; 3])] = &[
    ("rosso", [210, 40, 40]),
    ("verde", [40, 190, 60]),
    ("blu", [45, 60, 220]),
    ("giallo", [230, 220, 40]),
    ("viola", [150, 50, 200]),
    ("arancione", [240, 140, 30]),
    ("rosa", [245, 130, 180]),
    ("marrone", [130, 85, 40]),
];

const SHAPES: &[&str] = &["cerchio", "quadrato", "triangolo", "anello"];

const BACKGROUND: [u8; 3] = [25, 25, 30];

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    pub class_id: usize,
    /// "cerchio rosso", "rombo verde", ...
    pub class_label: String,
    pub article: &'static str,
    pub caption: String,
    pub variant: usize,
    pub image: RasterImage,
}

struct Variant {
    size_word: Option<&'static str>,
    place_word: Option<&'static str>,
    radius: f64,
    center: (f64, f64),
}

fn variants() -> [Variant; VARIANTS_PER_CLASS] {
    let mid = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let near = 9.0;
    let far = IMAGE_SIDE as f64 - 10.0;
    [
        // the held-out drawing; v1/v2 share its caption but not its geometry
        Variant { size_word: None, place_word: None, radius: 8.0, center: (mid, mid) },
        Variant { size_word: None, place_word: None, radius: 6.8, center: (mid - 1.5, mid - 1.0) },
        Variant { size_word: None, place_word: None, radius: 9.2, center: (mid + 1.5, mid + 1.0) },
        Variant { size_word: Some("piccolo"), place_word: None, radius: 5.0, center: (mid, mid) },
        Variant { size_word: Some("grande"), place_word: None, radius: 11.0, center: (mid, mid) },
        Variant { size_word: None, place_word: Some("in alto"), radius: 8.0, center: (mid, near) },
        Variant { size_word: None, place_word: Some("in basso"), radius: 8.0, center: (mid, far) },
        Variant { size_word: Some("grande"), place_word: Some("in alto"), radius: 10.0, center: (mid, 10.0) },
    ]
}

fn inside_shape(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    let d2 = dx * dx + dy * dy;
    match shape {
        "cerchio" => d2 <= r * r,
        "quadrato" => dx.abs().max(dy.abs()) <= 0.8 * r,
        "triangolo" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        "anello" => d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r),
        other => unreachable!("unknown shape {other}"),
    }
}

fn draw(shape: &str, rgb: [u8; 3], radius: f64, center: (f64, f64)) -> RasterImage {
    let mut img = RasterImage::filled(IMAGE_SIDE, IMAGE_SIDE, BACKGROUND);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            if inside_shape(shape, dx, dy, radius) {
                img.set(x, y, rgb);
            }
        }
    }
    img
}

fn caption_for(shape: &str, color: &str, v: &Variant) -> String {
    let mut parts: Vec<&str> = vec!["un"];
    if let Some(size) = v.size_word {
        parts.push(size);
    }
    parts.push(shape);
    parts.push(color);
    let mut caption = parts.join(" ");
    if let Some(place) = v.place_word {
        caption.push(' ');
        caption.push_str(place);
    }
    caption
}

/// All 256 items in (class, variant) order.
pub fn generate() -> Vec<SynthItem> {
    let vars = variants();
    let mut items = Vec::with_capacity(NUM_CLASSES * VARIANTS_PER_CLASS);
    for (ci, (color, rgb)) in COLORS.iter().enumerate() {
        for (si, shape) in SHAPES.iter().enumerate() {
            let class_id = ci * SHAPES.len() + si;
            for (vi, v) in vars.iter().enumerate() {
                items.push(SynthItem {
                    id: format!("synth-{class_id:02}-{vi}"),
                    class_id,
                    class_label: format!("{shape} {color}"),
                    article: "un",
                    caption: caption_for(shape, color, v),
                    variant: vi,
                    image: draw(shape, *rgb, v.radius, v.center),
                });
            }
        }
    }
    items
}

/// (train, eval): variant 7 of every class held out, 224 / 32 items.
pub fn train_eval_split() -> (Vec<SynthItem>, Vec<SynthItem>) {
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for item in generate() {
        if item.variant == EVAL_VARIANT {
            eval.push(item);
        } else {
            train.push(item);
        }
    }
    (train, eval)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: String,
    pub label: String,
    pub article: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub image_ref: String,
    pub class_id: String,
}

fn manifest_record(item: &SynthItem, image_ref: String) -> CaptionRecord {
    CaptionRecord {
        id: item.id.clone(),
        image_ref,
        caption: item.caption.clone(),
        source: SourceTag::Custom,
        lang: Some("it".into()),
        pos_tags: None,
    }
}

/// Write the corpus under `dir`: PPM images, train/eval manifests, the
/// zero-shot class list, and a labeled eval manifest.
pub fn write_corpus(dir: &Path) -> Result<(), AugmentError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let (train, eval) = train_eval_split();

    let write_split = |items: &[SynthItem], name: &str| -> Result<(), AugmentError> {
        let mut records = Vec::new();
        for item in items {
            let rel = format!("images/{}.ppm", item.id);
            save_ppm(&images.join(format!("{}.ppm", item.id)), &item.image)?;
            records.push(manifest_record(item, rel));
        }
        crate::data::write_manifest(&dir.join(name), &records)
            .map_err(|e| AugmentError::Decode(e.to_string()))?;
        Ok(())
    };
    write_split(&train, "train.jsonl")?;
    write_split(&eval, "eval.jsonl")?;

    // class list: one entry per class, ordered by class id
    let mut classes = Vec::new();
    let mut seen = std::collections::BTreeMap::new();
    for item in train.iter().chain(&eval) {
        seen.entry(item.class_id)
            .or_insert_with(|| (item.class_label.clone(), item.article));
    }
    for (class_id, (label, article)) in seen {
        classes.push(ClassEntry {
            class_id: format!("c{class_id:02}"),
            label,
            article: article.to_string(),
        });
    }
    let mut out = Vec::new();
    for c in &classes {
        out.extend_from_slice(serde_json::to_string(c).expect("serializes").as_bytes());
        out.push(b'\n');
    }
    fs::write(dir.join("classes.jsonl"), out)?;

    // labeled eval images for zero-shot accuracy
    let mut out = Vec::new();
    for item in &eval {
        let labeled = LabeledImage {
            id: item.id.clone(),
            image_ref: format!("images/{}.ppm", item.id),
            class_id: format!("c{:02}", item.class_id),
        };
        out.extend_from_slice(serde_json::to_string(&labeled).expect("serializes").as_bytes());
        out.push(b'\n');
    }
    fs::write(dir.join("labeled_eval.jsonl"), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_determinism() {
        let items = generate();
        assert_eq!(items.len(), 256);
        let again = generate();
        for (a, b) in items.iter().zip(&again) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.caption, b.caption);
        }
    }

    #[test]
    fn captions_are_three_to_six_tokens() {
        for item in generate() {
            let tokens = item.caption.split_whitespace().count();
            assert!(
                (3..=6).contains(&tokens),
                "{} has {tokens} tokens",
                item.caption
            );
        }
    }

    #[test]
    fn split_holds_out_one_variant_per_class() {
        let (train, eval) = train_eval_split();
        assert_eq!(train.len(), 224);
        assert_eq!(eval.len(), 32);
        let mut classes: Vec<usize> = eval.iter().map(|i| i.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), 32, "every class appears once in eval");
        for e in &eval {
            assert!(train.iter().all(|t| t.id != e.id));
        }
    }

    #[test]
    fn images_differ_across_classes_and_variants() {
        let items = generate();
        assert_ne!(items[0].image, items[1].image, "same class, different variant");
        assert_ne!(items[0].image, items[8].image, "same color, different shape");
    }

    #[test]
    fn eval_captions_unique_within_split() {
        let (_, eval) = train_eval_split();
        let mut captions: Vec<&str> = eval.iter().map(|i| i.caption.as_str()).collect();
        captions.sort_unstable();
        captions.dedup();
        assert_eq!(captions.len(), eval.len());
    }
}
