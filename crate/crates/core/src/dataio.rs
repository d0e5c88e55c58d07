//! Images, manifests and the synthetic shape corpora used for training and detection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::{GroundTruth, Proposal};
use crate::error::{Error, Result};
use crate::geometry::WindowRect;
use crate::tensor::{Shape, Tensor};

/// Mean pixel value subtracted from every sample before the network sees it.
pub const DEFAULT_MEAN: f32 = 128.0;

/// Planar image with 1 or 3 channels; samples are 8-bit values held as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape("Image::new", "sample count", data.len(), width * height * channels));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Image { data, ..*self }
    }

    /// Pixel crop of `win`, which must lie inside the image.
    pub fn crop(&self, win: &WindowRect) -> Result<Image> {
        if win.x0 < 0 || win.y0 < 0 || win.x1 > self.width as i64 || win.y1 > self.height as i64 || win.x1 <= win.x0 || win.y1 <= win.y0 {
            return Err(Error::invalid(format!(
                "crop {win} outside {}x{} image",
                self.width, self.height
            )));
        }
        let (x0, y0, x1, y1) = (win.x0 as usize, win.y0 as usize, win.x1 as usize, win.y1 as usize);
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * self.channels);
        for c in 0..self.channels {
            for y in y0..y1 {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x1]);
            }
        }
        Image::new(x1 - x0, y1 - y0, self.channels, data)
    }

    /// Samples rounded and clamped to 8 bits, interleaved.
    fn interleaved_bytes(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push(self.data[c * n + i].round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Image {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval <= 255.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("missing P5/P6 magic")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    let n = width * height;
    let need = n * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Image {
            offset: bytes.len(),
            reason: format!("truncated payload: {} of {need} samples", payload.len()),
        });
    }
    let mut data = vec![0.0f32; need];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = payload[i * channels + c] as f32;
        }
    }
    Image::new(width, height, channels, data)
}

pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.interleaved_bytes());
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_netpbm(&fs::read(path)?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    crate::write_atomic(path, &encode_netpbm(img))
}

/// Batch-1 tensor of `img` minus the constant `mean`.
pub fn subtract_mean(img: &Image, mean: f32) -> Tensor<f32> {
    let data = img.data.iter().map(|v| v - mean).collect();
    Tensor::from_vec(Shape::new(1, img.channels, img.height, img.width), data).expect("image shape")
}

pub fn add_mean(t: &Tensor<f32>, mean: f32) -> Result<Image> {
    let s = t.shape();
    if s.batch != 1 {
        return Err(Error::shape("add_mean", "batch", s.batch, 1));
    }
    Image::new(s.width, s.height, s.channels, t.data().iter().map(|v| v + mean).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
}

/// Line-delimited `path[,label]` records. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let path = fields.next().unwrap_or_default();
            let label = match fields.next() {
                Some(l) => Some(l.parse::<usize>().map_err(|_| Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    reason: format!("bad label `{l}`"),
                })?),
                None => None,
            };
            if fields.next().is_some() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    reason: "expected `path[,label]`".into(),
                });
            }
            let p = Path::new(path);
            entries.push(ManifestEntry {
                path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
                label,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Decodes every image, ignoring labels.
    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.entries.iter().map(|e| read_image(&e.path)).collect()
    }

    /// Decodes every image; the label is required.
    pub fn load_labelled(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let label = e.label.ok_or_else(|| Error::invalid(format!("{} has no label", e.path.display())))?;
                Ok(Sample {
                    image: read_image(&e.path)?,
                    label,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// Shape classes drawn by the synthetic generators. `Blank` never appears in detection scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Circle = 0,
    Triangle = 1,
    Square = 2,
    Cross = 3,
    Blank = 4,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Circle,
        ShapeClass::Triangle,
        ShapeClass::Square,
        ShapeClass::Cross,
        ShapeClass::Blank,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Whether pixel centre `(x, y)` lies inside the shape of radius `r` centred at `(cx, cy)`.
    fn covers(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            ShapeClass::Circle => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeClass::Triangle => {
                // apex up, base at cy + r
                dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeClass::Cross => {
                let t = r / 3.0;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
            ShapeClass::Blank => false,
        }
    }
}

struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new<R: Rng>(width: usize, height: usize, rng: &mut R) -> Self {
        let bg = rng.random_range(40.0..100.0f32);
        Canvas {
            width,
            height,
            data: vec![bg; width * height],
        }
    }

    fn draw<R: Rng>(&mut self, class: ShapeClass, cx: f64, cy: f64, r: f64, rng: &mut R) {
        let fg = rng.random_range(170.0..240.0f32);
        for y in 0..self.height {
            for x in 0..self.width {
                if class.covers(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                    self.data[y * self.width + x] = fg;
                }
            }
        }
    }

    fn finish<R: Rng>(mut self, rng: &mut R) -> Image {
        let noise = Normal::new(0.0f32, 8.0).expect("valid sigma");
        for v in &mut self.data {
            *v = (*v + noise.sample(rng)).round().clamp(0.0, 255.0);
        }
        Image::new(self.width, self.height, 1, self.data).expect("canvas shape")
    }
}

/// Settings for the synthetic classification corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Inclusive canvas side range; width and height are drawn independently.
    pub size_range: (usize, usize),
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 2014,
            train_per_class: 400,
            test_per_class: 40,
            size_range: (24, 40),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ToyDataset {
    pub const CLASSES: usize = 5;
}

fn render_toy<R: Rng>(class: ShapeClass, size_range: (usize, usize), rng: &mut R) -> Image {
    let w = rng.random_range(size_range.0..=size_range.1);
    let h = rng.random_range(size_range.0..=size_range.1);
    let mut canvas = Canvas::new(w, h, rng);
    let min_side = w.min(h) as f64;
    let r = rng.random_range(0.22 * min_side..0.4 * min_side);
    let cx = rng.random_range(r..w as f64 - r);
    let cy = rng.random_range(r..h as f64 - r);
    canvas.draw(class, cx, cy, r, rng);
    canvas.finish(rng)
}

/// Deterministic five-class shape corpus; samples are interleaved by class.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Result<ToyDataset> {
    let (lo, hi) = cfg.size_range;
    if lo < 8 || hi < lo {
        return Err(Error::invalid(format!("bad canvas size range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |per_class: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * ShapeClass::ALL.len());
        for _ in 0..per_class {
            for class in ShapeClass::ALL {
                out.push(Sample {
                    image: render_toy(class, cfg.size_range, &mut rng),
                    label: class as usize,
                });
            }
        }
        out
    };
    let train = make(cfg.train_per_class);
    let test = make(cfg.test_per_class);
    Ok(ToyDataset { train, test })
}

/// Writes images as PGM plus `train.txt` / `test.txt` manifests into `dir`.
pub fn write_toy_dataset(dir: &Path, ds: &ToyDataset) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir.join("images"))?;
    let write_split = |name: &str, samples: &[Sample]| -> Result<PathBuf> {
        let mut manifest = String::new();
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{name}_{i:05}.pgm");
            write_image(&dir.join(&rel), &s.image)?;
            manifest.push_str(&format!("{rel},{}\n", s.label));
        }
        let path = dir.join(format!("{name}.txt"));
        crate::write_atomic(&path, manifest.as_bytes())?;
        Ok(path)
    };
    Ok((write_split("train", &ds.train)?, write_split("test", &ds.test)?))
}

/// Writes `<name>.txt` (image manifest), `<name>_gt.txt` and `<name>_proposals.txt`
/// plus the images under `dir/images`. Returns the three paths in that order.
pub fn write_detection_corpus(dir: &Path, name: &str, corpus: &DetectionCorpus) -> Result<(PathBuf, PathBuf, PathBuf)> {
    use crate::detection::io::{format_ground_truth, format_proposals};
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::new();
    for (i, img) in corpus.images.iter().enumerate() {
        let rel = format!("images/{name}_{i:05}.pgm");
        write_image(&dir.join(&rel), img)?;
        manifest.push_str(&rel);
        manifest.push('\n');
    }
    let paths = (
        dir.join(format!("{name}.txt")),
        dir.join(format!("{name}_gt.txt")),
        dir.join(format!("{name}_proposals.txt")),
    );
    crate::write_atomic(&paths.0, manifest.as_bytes())?;
    crate::write_atomic(&paths.1, format_ground_truth(&corpus.ground_truth).as_bytes())?;
    crate::write_atomic(&paths.2, format_proposals(&corpus.proposals).as_bytes())?;
    Ok(paths)
}

/// Settings for the synthetic detection corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCorpusConfig {
    pub seed: u64,
    pub images: usize,
    pub size_range: (usize, usize),
    pub objects_per_image: (usize, usize),
    /// Object radius range in pixels.
    pub radius_range: (f64, f64),
    pub jittered_per_object: usize,
    pub random_per_image: usize,
}

impl Default for DetectionCorpusConfig {
    fn default() -> Self {
        DetectionCorpusConfig {
            seed: 4,
            images: 40,
            size_range: (64, 96),
            objects_per_image: (1, 3),
            radius_range: (7.0, 14.0),
            jittered_per_object: 8,
            random_per_image: 40,
        }
    }
}

/// Images with ground-truth boxes and ingested-style proposals; `image_id` is the index into `images`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCorpus {
    pub images: Vec<Image>,
    pub ground_truth: Vec<GroundTruth>,
    pub proposals: Vec<Proposal>,
}

impl DetectionCorpus {
    /// Four object classes: circle, triangle, square, cross.
    pub const CLASSES: usize = 4;
}

fn shape_box(class: ShapeClass, cx: f64, cy: f64, r: f64, w: usize, h: usize) -> WindowRect {
    let e = if class == ShapeClass::Square { 0.85 * r } else { r };
    let rect = WindowRect::new(
        (cx - e).floor() as i64,
        (cy - e).floor() as i64,
        (cx + e).ceil() as i64,
        (cy + e).ceil() as i64,
    );
    rect.clamp_to(w, h).unwrap_or(rect)
}

pub fn generate_detection_corpus(cfg: &DetectionCorpusConfig) -> Result<DetectionCorpus> {
    let (lo, hi) = cfg.size_range;
    if hi < lo || (lo as f64) < 4.0 * cfg.radius_range.1 {
        return Err(Error::invalid("detection canvas too small for the object radius range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.images);
    let mut ground_truth = Vec::new();
    let mut proposals = Vec::new();
    for image_id in 0..cfg.images {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let mut canvas = Canvas::new(w, h, &mut rng);
        let count = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..count {
            for _attempt in 0..50 {
                let r = rng.random_range(cfg.radius_range.0..cfg.radius_range.1);
                let cx = rng.random_range(r + 1.0..w as f64 - r - 1.0);
                let cy = rng.random_range(r + 1.0..h as f64 - r - 1.0);
                let apart = placed
                    .iter()
                    .all(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > 1.5 * (pr + r) + 2.0);
                if !apart {
                    continue;
                }
                let class = ShapeClass::ALL[rng.random_range(0..DetectionCorpus::CLASSES)];
                canvas.draw(class, cx, cy, r, &mut rng);
                placed.push((cx, cy, r));
                let rect = shape_box(class, cx, cy, r, w, h);
                boxes.push(rect);
                ground_truth.push(GroundTruth {
                    image_id,
                    class_id: class as usize,
                    rect,
                });
                break;
            }
        }
        let mut image_props = Vec::new();
        for b in &boxes {
            image_props.push(*b);
            for _ in 0..cfg.jittered_per_object {
                let (bw, bh) = (b.width() as f64, b.height() as f64);
                let dx = rng.random_range(-0.2..0.2) * bw;
                let dy = rng.random_range(-0.2..0.2) * bh;
                let sw = rng.random_range(0.8..1.25) * bw;
                let sh = rng.random_range(0.8..1.25) * bh;
                let cx = b.x0 as f64 + bw / 2.0 + dx;
                let cy = b.y0 as f64 + bh / 2.0 + dy;
                let r = WindowRect::new(
                    (cx - sw / 2.0).round() as i64,
                    (cy - sh / 2.0).round() as i64,
                    (cx + sw / 2.0).round() as i64,
                    (cy + sh / 2.0).round() as i64,
                );
                if let Some(r) = r.clamp_to(w, h) {
                    image_props.push(r);
                }
            }
        }
        for _ in 0..cfg.random_per_image {
            let bw = rng.random_range(8..=(w / 2) as i64);
            let bh = rng.random_range(8..=(h / 2) as i64);
            let x0 = rng.random_range(0..=w as i64 - bw);
            let y0 = rng.random_range(0..=h as i64 - bh);
            image_props.push(WindowRect::new(x0, y0, x0 + bw, y0 + bh));
        }
        // shuffle so file order carries no class information
        for i in (1..image_props.len()).rev() {
            let j = rng.random_range(0..=i);
            image_props.swap(i, j);
        }
        proposals.extend(image_props.into_iter().map(|rect| Proposal { image_id, rect }));
        images.push(canvas.finish(&mut rng));
    }
    Ok(DetectionCorpus {
        images,
        ground_truth,
        proposals,
    })
}
