//! Procedural garment-sprite generator with per-attribute labels, plus the
//! rule-based decoder used as an independent grading oracle.
//!
//! The renderer and the decoder share the same silhouette predicates, so a
//! template match over the jitter range recovers Category and SleeveLength
//! exactly on clean renders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, uniform, Stream};
use crate::tensor::{fnv_bytes, fnv_init, fnv_u64, Tensor};

pub const IMG_SIZE: usize = 32;
pub const BACKGROUND: f32 = -0.85;

/// Canonical attribute indices of the synthetic schema.
pub const ATTR_CATEGORY: usize = 0;
pub const ATTR_SLEEVE: usize = 1;
pub const ATTR_PATTERN: usize = 2;
pub const ATTR_COLLAR: usize = 3;
pub const ATTR_FABRIC: usize = 4;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid glyph spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub classes: Vec<String>,
}

/// Ordered attribute/class definitions. Schema order is the canonical
/// index order everywhere: labels, logits, queries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<(), GlyphError> {
        let mut names = std::collections::HashSet::new();
        for attr in &self.attributes {
            if !names.insert(attr.name.clone()) {
                return Err(GlyphError::InvalidSchema(format!(
                    "duplicate attribute name {:?}",
                    attr.name
                )));
            }
            if attr.classes.len() < 2 {
                return Err(GlyphError::InvalidSchema(format!(
                    "attribute {:?} needs at least 2 classes",
                    attr.name
                )));
            }
            let mut cls = std::collections::HashSet::new();
            for c in &attr.classes {
                if !cls.insert(c.clone()) {
                    return Err(GlyphError::InvalidSchema(format!(
                        "duplicate class {:?} in attribute {:?}",
                        c, attr.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.classes.len()).collect()
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn class_index(&self, attr: usize, name: &str) -> Option<usize> {
        self.attributes[attr].classes.iter().position(|c| c == name)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    pub fn content_hash(&self) -> u64 {
        fnv_bytes(fnv_init(), self.canonical_json().as_bytes())
    }

    /// The 5-attribute / 16-class training schema.
    pub fn synthetic() -> Self {
        let mk = |name: &str, classes: &[&str]| Attribute {
            name: name.to_string(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
        };
        AttributeSchema {
            attributes: vec![
                mk("category", &["top", "dress", "pants", "skirt"]),
                mk("sleeve_length", &["none", "short", "long"]),
                mk("pattern", &["plain", "stripes", "dots", "checks"]),
                mk("collar", &["round", "v-neck", "square"]),
                mk("fabric", &["smooth", "textured"]),
            ],
        }
    }
}

/// Per-attribute class indices (−1 marks an inapplicable attribute) plus
/// continuous nuisance parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub class_idx: Vec<i32>,
    pub hue: f64,
    pub value: f64,
    pub jitter_x: f64,
    pub jitter_y: f64,
    pub scale: f64,
}

impl GlyphSpec {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<(), GlyphError> {
        if self.class_idx.len() != schema.len() {
            return Err(GlyphError::InvalidSpec(format!(
                "{} labels for {} attributes",
                self.class_idx.len(),
                schema.len()
            )));
        }
        for (i, &c) in self.class_idx.iter().enumerate() {
            if c >= 0 && c as usize >= schema.attributes[i].classes.len() {
                return Err(GlyphError::InvalidSpec(format!(
                    "class {} out of range for attribute {:?}",
                    c, schema.attributes[i].name
                )));
            }
        }
        let cat = self.class_idx[ATTR_CATEGORY];
        if cat < 0 {
            return Err(GlyphError::InvalidSpec("category is mandatory".into()));
        }
        let bottoms = cat == 2 || cat == 3; // pants, skirt
        let sleeve = self.class_idx[ATTR_SLEEVE];
        let collar = self.class_idx[ATTR_COLLAR];
        if bottoms && (sleeve != -1 || collar != -1) {
            return Err(GlyphError::InvalidSpec(
                "pants/skirt force sleeve_length = -1 and collar = -1".into(),
            ));
        }
        if !bottoms && (sleeve < 0 || collar < 0) {
            return Err(GlyphError::InvalidSpec(
                "top/dress require sleeve_length and collar".into(),
            ));
        }
        if self.class_idx[ATTR_PATTERN] < 0 || self.class_idx[ATTR_FABRIC] < 0 {
            return Err(GlyphError::InvalidSpec(
                "pattern and fabric are always applicable".into(),
            ));
        }
        Ok(())
    }
}

/// An image with its per-attribute labels (−1 = inapplicable).
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub labels: Vec<i32>,
}

/// Garment-body predicate in canonical 32-grid coordinates (y grows down).
/// Shared by the renderer and the template-matching decoder.
pub fn silhouette(category: usize, sleeve: i32, xc: f64, yc: f64) -> bool {
    let body = match category {
        // top: torso block
        0 => (10.0..=21.9).contains(&xc) && (8.0..=20.9).contains(&yc),
        // dress: torso + flare widening 12 -> 20 px by y = 27
        1 => {
            let torso = (10.0..=21.9).contains(&xc) && (8.0..=14.0).contains(&yc);
            let flare = if (14.0..=26.9).contains(&yc) {
                let t = (yc - 14.0) / 13.0;
                let half = 6.0 + 4.0 * t;
                (xc - 16.0).abs() <= half
            } else {
                false
            };
            torso || flare
        }
        // pants: waistband + two legs with a gap
        2 => {
            let waist = (10.0..=21.9).contains(&xc) && (8.0..=11.0).contains(&yc);
            let legs = (11.0..=26.9).contains(&yc)
                && ((10.0..=14.4).contains(&xc) || (17.5..=21.9).contains(&xc));
            waist || legs
        }
        // skirt: trapezoid widening 10 -> 18, starting lower than tops
        3 => {
            if (12.0..=24.9).contains(&yc) {
                let t = (yc - 12.0) / 12.9;
                let half = 5.0 + 4.0 * t;
                (xc - 16.0).abs() <= half
            } else {
                false
            }
        }
        _ => false,
    };
    let arms = match sleeve {
        // short sleeves: stubs by the shoulders
        1 => {
            (8.5..=13.0).contains(&yc) && ((6.5..=9.9).contains(&xc) || (22.0..=25.4).contains(&xc))
        }
        // long sleeves: arms down past the waist
        2 => {
            (8.5..=21.9).contains(&yc) && ((6.5..=9.9).contains(&xc) || (22.0..=25.4).contains(&xc))
        }
        _ => false,
    };
    body || arms
}

/// Collar notch predicate (cut to background) in canonical coordinates.
fn collar_notch(collar: i32, xc: f64, yc: f64) -> bool {
    match collar {
        0 => {
            // round: semicircle of radius 3 hanging from the top edge
            let dx = xc - 16.0;
            let dy = yc - 8.0;
            yc >= 8.0 && dx * dx + dy * dy <= 9.0
        }
        1 => {
            // v-neck: triangle of depth 5
            (8.0..=13.0).contains(&yc) && (xc - 16.0).abs() <= (13.0 - yc) * 0.72
        }
        2 => {
            // square: rectangular cutout
            (8.0..=11.4).contains(&yc) && (13.0..=18.9).contains(&xc)
        }
        _ => false,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pattern shade selector: 0 = primary, 1 = dark, 2 = light.
fn pattern_shade(pattern: usize, xc: f64, yc: f64) -> usize {
    match pattern {
        0 => 0,
        // horizontal stripes, period 4 rows
        1 => {
            if ((yc - 8.0).rem_euclid(4.0)) < 2.0 {
                0
            } else {
                1
            }
        }
        // light dots on a 4-px grid
        2 => {
            let mx = (xc - 8.0).rem_euclid(4.0);
            let my = (yc - 8.0).rem_euclid(4.0);
            if (1.0..3.0).contains(&mx) && (1.0..3.0).contains(&my) {
                2
            } else {
                0
            }
        }
        // 4-px checkerboard
        3 => {
            let cx = ((xc - 8.0).rem_euclid(8.0) < 4.0) as usize;
            let cy = ((yc - 8.0).rem_euclid(8.0) < 4.0) as usize;
            if cx == cy {
                0
            } else {
                1
            }
        }
        _ => 0,
    }
}

/// Deterministic render of a glyph spec. `size` scales the canonical
/// 32-grid geometry; the rng only feeds the textured-fabric overlay.
pub fn render_glyph(
    spec: &GlyphSpec,
    size: usize,
    rng: &mut Stream,
    schema: &AttributeSchema,
) -> Result<Tensor<f32>, GlyphError> {
    spec.validate(schema)?;
    let category = spec.class_idx[ATTR_CATEGORY] as usize;
    let sleeve = spec.class_idx[ATTR_SLEEVE];
    let pattern = spec.class_idx[ATTR_PATTERN] as usize;
    let collar = spec.class_idx[ATTR_COLLAR];
    let textured = spec.class_idx[ATTR_FABRIC] == 1;

    let primary = hsv_to_rgb(spec.hue, 0.7, spec.value);
    let dark = hsv_to_rgb(spec.hue, 0.7, (spec.value * 0.42).max(0.16));
    let light = hsv_to_rgb(spec.hue, 0.35, (spec.value + 0.28).min(1.0));

    let grid = size as f64 / IMG_SIZE as f64;
    let mut data = vec![BACKGROUND; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            // inverse jitter/scale transform into canonical coordinates
            let xi = (x as f64 + 0.5) / grid;
            let yi = (y as f64 + 0.5) / grid;
            let xc = (xi - 16.0 - spec.jitter_x) / spec.scale + 16.0;
            let yc = (yi - 16.0 - spec.jitter_y) / spec.scale + 16.0;
            if !silhouette(category, sleeve, xc, yc) {
                continue;
            }
            if collar >= 0 && collar_notch(collar, xc, yc) {
                continue;
            }
            let rgb = match pattern_shade(pattern, xc, yc) {
                1 => &dark,
                2 => &light,
                _ => &primary,
            };
            let o = (y * size + x) * 3;
            for c in 0..3 {
                data[o + c] = (rgb[c] * 2.0 - 1.0) as f32;
            }
        }
    }
    if textured {
        for y in 0..size {
            for x in 0..size {
                let o = (y * size + x) * 3;
                let n: f32 = uniform::<f32>(-0.09, 0.09, rng);
                if data[o] != BACKGROUND || data[o + 1] != BACKGROUND || data[o + 2] != BACKGROUND {
                    for c in 0..3 {
                        data[o + c] = (data[o + c] + n).clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[size, size, 3], data))
}

/// Draw a random valid spec against the synthetic schema.
pub fn sample_spec(rng: &mut Stream, schema: &AttributeSchema) -> GlyphSpec {
    use rand::Rng;
    let counts = schema.class_counts();
    let category = rng.gen_range(0..counts[ATTR_CATEGORY]) as i32;
    let bottoms = category == 2 || category == 3;
    let sleeve = if bottoms {
        -1
    } else {
        rng.gen_range(0..counts[ATTR_SLEEVE]) as i32
    };
    let pattern = rng.gen_range(0..counts[ATTR_PATTERN]) as i32;
    let collar = if bottoms {
        -1
    } else {
        rng.gen_range(0..counts[ATTR_COLLAR]) as i32
    };
    let fabric = rng.gen_range(0..counts[ATTR_FABRIC]) as i32;
    GlyphSpec {
        class_idx: vec![category, sleeve, pattern, collar, fabric],
        hue: uniform(0.0, 1.0, rng),
        value: uniform(0.55, 0.85, rng),
        jitter_x: uniform(-1.0, 1.0, rng),
        jitter_y: uniform(-1.0, 1.0, rng),
        scale: uniform(0.94, 1.06, rng),
    }
}

/// Reproducible dataset: each index renders from its own derived stream.
pub fn gen_dataset(n: usize, seed: u64, schema: &AttributeSchema) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, &format!("glyph/{i}"));
            let spec = sample_spec(&mut rng, schema);
            let image = render_glyph(&spec, IMG_SIZE, &mut rng, schema).expect("sampled spec valid");
            LabeledImage {
                image,
                labels: spec.class_idx,
            }
        })
        .collect()
}

/// Stable content hash over all images and labels.
pub fn dataset_hash(data: &[LabeledImage]) -> u64 {
    let mut h = fnv_init();
    for item in data {
        h = fnv_u64(h, item.image.content_hash());
        for &l in &item.labels {
            h = fnv_u64(h, l as u64);
        }
    }
    h
}

/// Garment mask: any channel sufficiently far from the background level.
pub fn garment_mask(img: &Tensor<f32>) -> Vec<bool> {
    let size = img.shape()[0];
    let mut mask = vec![false; size * size];
    for (px, m) in mask.iter_mut().enumerate() {
        let o = px * 3;
        for c in 0..3 {
            if (img.data()[o + c] - BACKGROUND).abs() > 0.15 {
                *m = true;
                break;
            }
        }
    }
    mask
}

/// Template-matching decoder for Category and SleeveLength: scans the
/// jitter/scale grid, rasterizes each candidate silhouette through the
/// shared predicates and picks the best IoU.
///
/// Returns `(category, sleeve)` where sleeve is −1 for pants/skirt.
pub fn decode_category_sleeve(img: &Tensor<f32>) -> (usize, i32) {
    let size = img.shape()[0];
    let grid = size as f64 / IMG_SIZE as f64;
    let observed = garment_mask(img);
    let mut best = (0usize, -1i32);
    let mut best_iou = -1.0f64;
    let scales = [0.94, 0.98, 1.02, 1.06];
    let jits = [-1.0, -0.5, 0.0, 0.5, 1.0];
    for category in 0..4usize {
        let sleeves: &[i32] = if category >= 2 { &[-1] } else { &[0, 1, 2] };
        for &sleeve in sleeves {
            for &s in &scales {
                for &jx in &jits {
                    for &jy in &jits {
                        let mut inter = 0usize;
                        let mut uni = 0usize;
                        for y in 0..size {
                            for x in 0..size {
                                let xi = (x as f64 + 0.5) / grid;
                                let yi = (y as f64 + 0.5) / grid;
                                let xc = (xi - 16.0 - jx) / s + 16.0;
                                let yc = (yi - 16.0 - jy) / s + 16.0;
                                let t = silhouette(category, sleeve, xc, yc);
                                let o = observed[y * size + x];
                                if t && o {
                                    inter += 1;
                                }
                                if t || o {
                                    uni += 1;
                                }
                            }
                        }
                        let iou = if uni == 0 {
                            0.0
                        } else {
                            inter as f64 / uni as f64
                        };
                        if iou > best_iou {
                            best_iou = iou;
                            best = (category, sleeve);
                        }
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> AttributeSchema {
        AttributeSchema::synthetic()
    }

    fn spec_with(class_idx: Vec<i32>) -> GlyphSpec {
        GlyphSpec {
            class_idx,
            hue: 0.6,
            value: 0.7,
            jitter_x: 0.0,
            jitter_y: 0.0,
            scale: 1.0,
        }
    }

    #[test]
    fn synthetic_schema_is_valid() {
        let s = schema();
        s.validate().unwrap();
        assert_eq!(s.class_counts(), vec![4, 3, 4, 3, 2]);
        assert_eq!(s.class_counts().iter().sum::<usize>(), 16);
    }

    #[test]
    fn pants_force_inapplicable_marks() {
        let s = schema();
        let bad = spec_with(vec![2, 1, 0, 0, 0]);
        assert!(bad.validate(&s).is_err());
        let good = spec_with(vec![2, -1, 0, -1, 0]);
        good.validate(&s).unwrap();
        let img = render_glyph(&good, IMG_SIZE, &mut substream(1, "t"), &s).unwrap();
        // no garment pixels in the sleeve zone (canonical x in 6.5..10)
        for y in 0..IMG_SIZE {
            for x in 0..8 {
                let o = (y * IMG_SIZE + x) * 3;
                assert_eq!(img.data()[o], BACKGROUND);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = schema();
        let spec = spec_with(vec![0, 2, 1, 1, 1]);
        let a = render_glyph(&spec, IMG_SIZE, &mut substream(9, "r"), &s).unwrap();
        let b = render_glyph(&spec, IMG_SIZE, &mut substream(9, "r"), &s).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn stripes_differ_from_plain_inside_silhouette() {
        let s = schema();
        let plain = spec_with(vec![0, 0, 0, 0, 0]);
        let stripes = spec_with(vec![0, 0, 1, 0, 0]);
        let a = render_glyph(&plain, IMG_SIZE, &mut substream(3, "p"), &s).unwrap();
        let b = render_glyph(&stripes, IMG_SIZE, &mut substream(3, "p"), &s).unwrap();
        let mask = garment_mask(&a);
        let mut diff = 0.0;
        let mut count = 0;
        for (px, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            for c in 0..3 {
                diff += (a.data()[px * 3 + c] - b.data()[px * 3 + c]).abs() as f64;
                count += 1;
            }
        }
        let mad = diff / count as f64;
        assert!(mad > 0.05, "mean abs diff inside silhouette = {}", mad);
    }

    #[test]
    fn dataset_reproducible_and_singleton_valid() {
        let s = schema();
        let one = gen_dataset(1, 42, &s);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].labels.len(), 5);
        let a = gen_dataset(16, 7, &s);
        let b = gen_dataset(16, 7, &s);
        assert_eq!(dataset_hash(&a), dataset_hash(&b));
        let c = gen_dataset(16, 8, &s);
        assert_ne!(dataset_hash(&a), dataset_hash(&c));
    }

    #[test]
    fn class_balance_within_20pct_of_uniform() {
        let s = schema();
        let data = gen_dataset(2000, 123, &s);
        let counts = s.class_counts();
        for attr in 0..s.len() {
            let mut per_class = vec![0usize; counts[attr]];
            let mut applicable = 0usize;
            for item in &data {
                let l = item.labels[attr];
                if l >= 0 {
                    per_class[l as usize] += 1;
                    applicable += 1;
                }
            }
            let expect = applicable as f64 / counts[attr] as f64;
            for (ci, &n) in per_class.iter().enumerate() {
                let dev = (n as f64 - expect).abs() / expect;
                assert!(
                    dev < 0.2,
                    "attr {} class {} count {} vs uniform {}",
                    attr,
                    ci,
                    n,
                    expect
                );
            }
        }
    }

    #[test]
    fn decoder_recovers_category_and_sleeve_on_clean_renders() {
        let s = schema();
        let data = gen_dataset(300, 2024, &s);
        for (i, item) in data.iter().enumerate() {
            let (cat, sleeve) = decode_category_sleeve(&item.image);
            assert_eq!(
                cat as i32, item.labels[ATTR_CATEGORY],
                "category mismatch on sample {}",
                i
            );
            assert_eq!(
                sleeve, item.labels[ATTR_SLEEVE],
                "sleeve mismatch on sample {} (category {})",
                i, item.labels[ATTR_CATEGORY]
            );
        }
    }

    #[test]
    fn pixel_range_is_bounded() {
        let s = schema();
        let data = gen_dataset(50, 5, &s);
        for item in &data {
            for &v in item.image.data() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
