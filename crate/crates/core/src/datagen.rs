//! Procedural pill-like images, virtual class synthesis, feature extraction
//! and the feature/image file formats.
//!
//! Images are `H × W × 3` row-major with interleaved RGB, values quantized to
//! multiples of 1/255 so the binary image file reproduces them exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::MlpBackbone;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{check_finite, Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PillShape {
    Circle,
    Ellipse,
    Capsule,
}

impl PillShape {
    const ALL: [PillShape; 3] = [PillShape::Circle, PillShape::Ellipse, PillShape::Capsule];
}

/// Appearance of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillClassSpec {
    pub shape: PillShape,
    pub color: [f64; 3],
    /// Pill length as a fraction of the image width, in `[0.3, 0.9]`.
    pub scale: f64,
    pub texture_seed: u64,
}

impl PillClassSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput(format!("color {:?} outside [0,1]", self.color)));
        }
        if !(0.3..=0.9).contains(&self.scale) {
            return Err(Error::InvalidInput(format!("scale {} outside [0.3, 0.9]", self.scale)));
        }
        Ok(())
    }
}

/// Per-sample variation magnitudes. All zero renders every sample of a
/// class identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Max center offset as a fraction of the image width.
    pub position: f64,
    /// Max relative brightness change.
    pub brightness: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    /// Probability of an overlapping distractor blob.
    pub distractor_prob: f64,
    /// Max rotation in degrees.
    pub rotation_deg: f64,
    /// Max relative size change.
    pub size: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            position: 0.2,
            brightness: 0.35,
            noise_std: 0.08,
            distractor_prob: 0.35,
            rotation_deg: 60.0,
            size: 0.2,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig { position: 0.0, brightness: 0.0, noise_std: 0.0, distractor_prob: 0.0, rotation_deg: 0.0, size: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn square(size: usize) -> Self {
        ImageShape { height: size, width: size }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
    pub label: usize,
    pub session: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub shape: ImageShape,
    pub classes: Vec<PillClassSpec>,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Rotates the hue of one RGB triple by `degrees`.
pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(rgb);
    hsv_to_rgb(h + degrees, s, v)
}

/// `n` pairwise distinct class appearances.
pub fn random_class_specs(n: usize, rng: &mut Rng) -> Vec<PillClassSpec> {
    let mut specs: Vec<PillClassSpec> = Vec::with_capacity(n);
    while specs.len() < n {
        let shape = PillShape::ALL[rng.below(3)];
        let color = hsv_to_rgb(rng.uniform(0.0, 360.0), rng.uniform(0.1, 0.85), rng.uniform(0.55, 1.0));
        let spec = PillClassSpec { shape, color, scale: rng.uniform(0.45, 0.85), texture_seed: rng.next_u64() };
        if !specs.contains(&spec) {
            specs.push(spec);
        }
    }
    specs
}

/// Per-image random draws, taken serially from the generator so rendering
/// itself is a pure function.
#[derive(Clone, Copy, Debug)]
struct SampleParams {
    dx: f64,
    dy: f64,
    angle: f64,
    brightness: f64,
    size: f64,
    distractor: Option<(f64, f64, f64, f64)>,
    noise_seed: u64,
}

impl SampleParams {
    fn draw(jitter: &JitterConfig, rng: &mut Rng) -> Self {
        let mut sym = |mag: f64| if mag > 0.0 { rng.uniform(-mag, mag) } else { 0.0 };
        let dx = sym(jitter.position);
        let dy = sym(jitter.position);
        let angle = sym(jitter.rotation_deg).to_radians();
        let brightness = 1.0 + sym(jitter.brightness);
        let size = 1.0 + sym(jitter.size);
        let distractor = (jitter.distractor_prob > 0.0 && rng.bernoulli(jitter.distractor_prob)).then(|| {
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            (theta, rng.uniform(0.1, 0.18), rng.uniform(0.3, 0.9), rng.uniform(0.0, 360.0))
        });
        let noise_seed = if jitter.noise_std > 0.0 { rng.next_u64() } else { 0 };
        SampleParams { dx, dy, angle, brightness, size, distractor, noise_seed }
    }
}

const BACKGROUND: [f64; 3] = [0.16, 0.17, 0.19];

/// Signed distance (in image-width units) to the pill outline.
fn pill_distance(spec: &PillClassSpec, size: f64, u: f64, v: f64) -> f64 {
    let len = spec.scale * size;
    match spec.shape {
        PillShape::Circle => (u * u + v * v).sqrt() - 0.5 * len * 0.8,
        PillShape::Ellipse => {
            let (a, b) = (0.5 * len, 0.32 * len);
            let k = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            (k - 1.0) * a.min(b)
        }
        PillShape::Capsule => {
            let r = 0.22 * len;
            let half = 0.5 * len - r;
            let cu = u.clamp(-half, half);
            ((u - cu).powi(2) + v * v).sqrt() - r
        }
    }
}

fn render(spec: &PillClassSpec, shape: ImageShape, p: &SampleParams) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut px = vec![0.0; shape.len()];
    let pattern = spec.texture_seed % 3;
    let freq = 2.0 + (spec.texture_seed >> 8) as f64 % 5.0;
    let second = rotate_hue(spec.color, 150.0 + (spec.texture_seed >> 16) as f64 % 60.0);
    let (sin, cos) = p.angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let gx = (x as f64 + 0.5) / w as f64 - 0.5;
            let gy = (y as f64 + 0.5) / h as f64 - 0.5;
            let shade = 1.0 - 0.1 * (gy + 0.5);
            let mut rgb = BACKGROUND.map(|c| c * shade);

            if let Some((theta, radius, gray, hue)) = p.distractor {
                let (cx, cy) = (0.38 * theta.cos(), 0.38 * theta.sin());
                let dist = ((gx - cx).powi(2) + (gy - cy).powi(2)).sqrt() - radius;
                let cover = (0.5 - dist * w as f64).clamp(0.0, 1.0);
                let tint = rotate_hue([gray, gray * 0.9, gray * 0.8], hue);
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cover) + tint[c] * cover;
                }
            }

            // pill frame: translate then rotate
            let (tu, tv) = (gx - p.dx, gy - p.dy);
            let u = cos * tu + sin * tv;
            let v = -sin * tu + cos * tv;
            let dist = pill_distance(spec, p.size, u, v);
            let cover = (0.5 - dist * w as f64).clamp(0.0, 1.0);
            if cover > 0.0 {
                let radial = ((u * u + v * v).sqrt() / (0.5 * spec.scale * p.size)).min(1.0);
                let light = (1.0 - 0.3 * radial * radial) * p.brightness;
                let base = match pattern {
                    1 if u > 0.0 => second,
                    _ => spec.color,
                };
                let mut texture = 1.0 + 0.05 * (freq * std::f64::consts::TAU * (u + v)).sin();
                if pattern == 2 && u.abs() < 0.5 / w as f64 + 0.01 {
                    texture *= 0.55;
                }
                for c in 0..3 {
                    let pill = base[c] * light * texture;
                    rgb[c] = rgb[c] * (1.0 - cover) + pill * cover;
                }
            }
            let o = (y * w + x) * 3;
            px[o..o + 3].copy_from_slice(&rgb);
        }
    }
    px
}

fn render_sample(spec: &PillClassSpec, shape: ImageShape, jitter: &JitterConfig, rng: &mut Rng) -> Vec<f64> {
    let params = SampleParams::draw(jitter, rng);
    let clean = render(spec, shape, &params);
    if params.noise_seed == 0 {
        return clean.into_iter().map(quantize).collect();
    }
    let mut noise_rng = Rng::new(params.noise_seed);
    clean.into_iter().map(|v| quantize(v + jitter.noise_std * noise_rng.normal())).collect()
}

/// Renders `per_class_train + per_class_test` images for each class.
/// Deterministic given the generator state.
pub fn generate_dataset(
    classes: &[PillClassSpec],
    shape: ImageShape,
    per_class_train: usize,
    per_class_test: usize,
    jitter: &JitterConfig,
    rng: &mut Rng,
) -> Result<GeneratedDataset> {
    if classes.len() < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    if per_class_train == 0 || per_class_test == 0 {
        return Err(Error::InvalidInput("per-class counts must be at least 1".into()));
    }
    if shape.is_empty() {
        return Err(Error::InvalidInput("image shape must be nonempty".into()));
    }
    for spec in classes {
        spec.validate()?;
    }
    let mut train = Vec::with_capacity(classes.len() * per_class_train);
    let mut test = Vec::with_capacity(classes.len() * per_class_test);
    for (label, spec) in classes.iter().enumerate() {
        for i in 0..per_class_train + per_class_test {
            let pixels = render_sample(spec, shape, jitter, rng);
            let sample = ImageSample { pixels, label, session: 0 };
            if i < per_class_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(GeneratedDataset { shape, classes: classes.to_vec(), train, test })
}

/// Fixed color and size transform defining one virtual class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualTransform {
    pub hue_degrees: f64,
    pub scale: f64,
    pub source_class: usize,
    pub virtual_label: usize,
}

/// Sampling ranges for virtual transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualRanges {
    pub hue_min: f64,
    pub hue_max: f64,
    pub shrink: [f64; 2],
    pub grow: [f64; 2],
}

impl Default for VirtualRanges {
    fn default() -> Self {
        VirtualRanges { hue_min: 60.0, hue_max: 300.0, shrink: [0.6, 0.9], grow: [1.1, 1.4] }
    }
}

impl VirtualRanges {
    fn draw_scale(&self, rng: &mut Rng) -> f64 {
        let [lo, hi] = if rng.bernoulli(0.5) { self.shrink } else { self.grow };
        rng.uniform(lo, hi)
    }
}

impl VirtualTransform {
    /// Hue rotation in HSV, then bilinear rescale about the image center with
    /// the corner color as background fill.
    pub fn apply(&self, pixels: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
        check_dim(shape.len(), pixels.len())?;
        let (h, w) = (shape.height, shape.width);
        let rotated: Vec<f64> = pixels
            .chunks_exact(3)
            .flat_map(|c| rotate_hue([c[0], c[1], c[2]], self.hue_degrees))
            .collect();
        let corners = [0, w - 1, (h - 1) * w, h * w - 1];
        let mut fill = [0.0; 3];
        for &i in &corners {
            for c in 0..3 {
                fill[c] += rotated[i * 3 + c] / 4.0;
            }
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = vec![0.0; pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let sx = cx + (x as f64 - cx) / self.scale;
                let sy = cy + (y as f64 - cy) / self.scale;
                let o = (y * w + x) * 3;
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    out[o..o + 3].copy_from_slice(&fill);
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| rotated[(yy * w + xx) * 3 + c];
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    out[o + c] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Ok(out.into_iter().map(quantize).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualClassSet {
    /// Real samples first (untouched), then virtual ones.
    pub samples: Vec<ImageSample>,
    pub transforms: Vec<VirtualTransform>,
    pub num_classes: usize,
}

/// Adds `fold` virtual classes per real class. Virtual class `k` of source
/// `c` gets label `c + k·num_real`, so real and virtual labels are disjoint
/// and jointly contiguous.
pub fn generate_virtual_classes(
    base: &[ImageSample],
    shape: ImageShape,
    num_real: usize,
    fold: usize,
    ranges: &VirtualRanges,
    rng: &mut Rng,
) -> Result<VirtualClassSet> {
    if fold > 2 {
        return Err(Error::Config(format!("virtual fold must be 0, 1 or 2, got {fold}")));
    }
    if let Some(s) = base.iter().find(|s| s.label >= num_real) {
        return Err(Error::InvalidInput(format!("label {} outside {num_real} real classes", s.label)));
    }
    let mut transforms = Vec::with_capacity(num_real * fold);
    for k in 1..=fold {
        for c in 0..num_real {
            let t = loop {
                let candidate = VirtualTransform {
                    hue_degrees: rng.uniform(ranges.hue_min, ranges.hue_max),
                    scale: ranges.draw_scale(rng),
                    source_class: c,
                    virtual_label: c + k * num_real,
                };
                // siblings of one source must differ visibly in hue
                let clash = transforms.iter().any(|o: &VirtualTransform| {
                    o.source_class == c && (o.hue_degrees - candidate.hue_degrees).abs() < 30.0
                });
                if !clash {
                    break candidate;
                }
            };
            transforms.push(t);
        }
    }
    let mut samples = base.to_vec();
    for t in &transforms {
        for s in base.iter().filter(|s| s.label == t.source_class) {
            samples.push(ImageSample { pixels: t.apply(&s.pixels, shape)?, label: t.virtual_label, session: s.session });
        }
    }
    Ok(VirtualClassSet { samples, transforms, num_classes: num_real * (fold + 1) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SyntheticBackbone,
    ExternalFile,
}

/// Labeled feature vectors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureDataset {
    pub fn empty(dim: usize, provenance: Provenance) -> Self {
        FeatureDataset { dim, features: Vec::new(), labels: Vec::new(), provenance }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, feature: Vec<f64>, label: usize) -> Result<()> {
        check_dim(self.dim, feature.len())?;
        check_finite(&feature)?;
        self.features.push(feature);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &FeatureDataset) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        self.features.extend(other.features.iter().cloned());
        self.labels.extend(&other.labels);
        Ok(())
    }

    /// Features of one class, in dataset order.
    pub fn class_features(&self, class: usize) -> Vec<Vec<f64>> {
        self.features.iter().zip(&self.labels).filter(|(_, l)| **l == class).map(|(f, _)| f.clone()).collect()
    }

    pub fn as_matrix(&self) -> Result<Mat> {
        if self.features.is_empty() {
            return Ok(Mat::zeros(0, self.dim));
        }
        Mat::from_rows(&self.features)
    }
}

const EXTRACT_CHUNK: usize = 256;

/// One feature per image through `g(x)`, labels preserved.
pub fn extract_features(backbone: &MlpBackbone, images: &[ImageSample]) -> Result<FeatureDataset> {
    let dim = backbone.output_dim();
    let mut out = FeatureDataset::empty(dim, Provenance::SyntheticBackbone);
    for chunk in images.chunks(EXTRACT_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * backbone.input_dim());
        for s in chunk {
            check_dim(backbone.input_dim(), s.pixels.len())?;
            data.extend_from_slice(&s.pixels);
        }
        let x = Mat::from_vec(chunk.len(), backbone.input_dim(), data)?;
        let feats = backbone.forward_batch(&x)?.into_features();
        for (r, s) in chunk.iter().enumerate() {
            out.features.push(feats.row(r).to_vec());
            out.labels.push(s.label);
        }
    }
    Ok(out)
}

/// Writes `d=<d>,classes=<k>` then one `label,v1,...,vd` line per feature.
/// Floats use the shortest round-trip representation.
pub fn save_feature_file(dataset: &FeatureDataset, path: &Path) -> Result<()> {
    let classes = dataset.labels.iter().max().map_or(0, |m| m + 1);
    let mut text = format!("d={},classes={}\n", dataset.dim, classes);
    for (f, l) in dataset.features.iter().zip(&dataset.labels) {
        check_dim(dataset.dim, f.len())?;
        write!(text, "{l}").expect("string write");
        for v in f {
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |m: &str| Error::parse("line 1", m.to_string());
    let (d, k) = line.trim_end().split_once(',').ok_or_else(|| bad("expected `d=<int>,classes=<int>`"))?;
    let d = d.strip_prefix("d=").ok_or_else(|| bad("missing `d=`"))?;
    let k = k.strip_prefix("classes=").ok_or_else(|| bad("missing `classes=`"))?;
    let d: usize = d.parse().map_err(|_| bad("dimension is not an integer"))?;
    let k: usize = k.parse().map_err(|_| bad("class count is not an integer"))?;
    if d == 0 {
        return Err(bad("dimension must be positive"));
    }
    Ok((d, k))
}

pub fn load_feature_file(path: &Path) -> Result<FeatureDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let (dim, classes) = parse_header(&header)?;
    let mut out = FeatureDataset::empty(dim, Provenance::ExternalFile);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = i + 2;
        let record = i + 1;
        let here = || format!("line {line_no} (record {record})");
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::parse(here(), "label is not a nonnegative integer"))?;
        if label >= classes {
            return Err(Error::parse(here(), format!("label {label} outside classes={classes}")));
        }
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(here(), format!("`{f}` is not a number"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::parse(here(), format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(here(), "non-finite value"));
        }
        out.features.push(values);
        out.labels.push(label);
    }
    if !out.is_empty() {
        let mut seen = vec![false; classes];
        out.labels.iter().for_each(|&l| seen[l] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::parse("file", format!("labels are not contiguous: class {missing} has no rows")));
        }
    }
    Ok(out)
}

const IMAGE_MAGIC: &[u8; 8] = b"FSCILIMG";

/// Binary image container: magic, `u32` version, `u32` height, `u32` width,
/// `u64` count, then per image a `u32` label and `H·W·3` bytes (value·255).
pub fn write_images(images: &[ImageSample], shape: ImageShape, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + images.len() * (4 + shape.len()));
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(shape.height as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.width as u32).to_le_bytes());
    buf.extend_from_slice(&(images.len() as u64).to_le_bytes());
    for s in images {
        check_dim(shape.len(), s.pixels.len())?;
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        buf.extend(s.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: &Path) -> Result<(ImageShape, Vec<ImageSample>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(path.display().to_string(), m.to_string());
    if bytes.len() < 28 || &bytes[..8] != IMAGE_MAGIC {
        return Err(bad("not an image container"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(8) != 1 {
        return Err(bad("unsupported image container version"));
    }
    let shape = ImageShape { height: u32_at(12), width: u32_at(16) };
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let stride = 4 + shape.len();
    if bytes.len() != 28 + count * stride {
        return Err(bad("truncated image container"));
    }
    let images = (0..count)
        .map(|i| {
            let o = 28 + i * stride;
            ImageSample {
                label: u32_at(o),
                pixels: bytes[o + 4..o + stride].iter().map(|b| *b as f64 / 255.0).collect(),
                session: 0,
            }
        })
        .collect();
    Ok((shape, images))
}
