//! Synthetic building scenes and the bbox-jittered crop protocol.
//!
//! Footprints are unions of grid cells carved from a rectangle, traced into
//! a rectilinear ring. Scenes are single-channel rasters with one building,
//! shade contrast, vertex jitter and Gaussian noise. Every sample is a pure
//! function of `(master_seed, split, index)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, Point, Polygon};

/// Side of every crop fed to the model.
pub const CROP_SIZE: usize = 128;
/// Crop enlargement used at test time.
pub const TEST_CROP_SCALE: f64 = 1.3;
/// Training crops draw their enlargement from this range.
pub const TRAIN_CROP_SCALE: (f64, f64) = (1.1, 1.5);

const MAX_GEN_ATTEMPTS: usize = 400;

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Binary P5 with maxval 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Shape("raster buffer size".into()))?;
        let file = std::io::BufWriter::new(fs::File::create(path)?);
        let enc = image::codecs::pnm::PnmEncoder::new(file).with_subtype(
            image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary),
        );
        img.write_with_encoder(enc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self { width: w as usize, height: h as usize, data: img.into_raw() })
    }
}

/// Everything needed to draw one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub polygon: Polygon,
    pub fill_shade: u8,
    pub bg_shade: u8,
    pub noise_sigma: f64,
    pub edge_jitter: i32,
    pub seed: u64,
}

/// One model input: a 128x128 crop and its canonical contour.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub image: GrayImage,
    pub gt: Polygon,
    pub source_id: String,
    pub crop_scale: f64,
    /// Crop window in source-image coordinates.
    pub window: Option<BBox>,
}

impl CropSample {
    pub fn new(image: GrayImage, gt: Polygon, source_id: String, crop_scale: f64) -> Self {
        Self { image, gt, source_id, crop_scale, window: None }
    }

    /// Maps crop coordinates back to the source image.
    pub fn to_source(&self, p: &Polygon) -> Result<Polygon> {
        match &self.window {
            Some(w) => crop_to_source(p, w),
            None => Ok(p.clone()),
        }
    }
}

fn axis_scale(w: &BBox) -> (f64, f64) {
    (CROP_SIZE as f64 / w.width() as f64, CROP_SIZE as f64 / w.height() as f64)
}

/// Source -> crop affine map, rounded and clamped into the crop.
pub fn source_to_crop(p: &Polygon, window: &BBox) -> Result<Polygon> {
    let (sx, sy) = axis_scale(window);
    let hi = CROP_SIZE as i32 - 1;
    let v: Vec<Point> = p
        .vertices()
        .iter()
        .map(|&(x, y)| {
            let u = (((x - window.x_min) as f64) * sx).round() as i32;
            let w = (((y - window.y_min) as f64) * sy).round() as i32;
            (u.clamp(0, hi), w.clamp(0, hi))
        })
        .collect();
    Polygon::from_dedup(v).map_err(|e| Error::DegenerateAfterTransform(e.to_string()))
}

/// Inverse of [`source_to_crop`] up to rounding.
pub fn crop_to_source(p: &Polygon, window: &BBox) -> Result<Polygon> {
    let (sx, sy) = axis_scale(window);
    let v: Vec<Point> = p
        .vertices()
        .iter()
        .map(|&(u, w)| {
            (
                (u as f64 / sx + window.x_min as f64).round() as i32,
                (w as f64 / sy + window.y_min as f64).round() as i32,
            )
        })
        .collect();
    Polygon::from_dedup(v)
}

/// Knobs of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub image_size: usize,
    pub max_vertices: usize,
    pub grid: i32,
    pub min_cells: usize,
    pub max_cells: usize,
    pub diagonal: bool,
    pub noise_sigma: f64,
    pub edge_jitter: i32,
    pub min_contrast: u8,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            image_size: 192,
            max_vertices: 16,
            grid: 8,
            min_cells: 8,
            max_cells: 15,
            diagonal: false,
            noise_sigma: 8.0,
            edge_jitter: 1,
            min_contrast: 40,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gen: {m}")));
        if self.max_vertices < 4 || !self.max_vertices.is_multiple_of(2) {
            return bad("max_vertices must be even and >= 4");
        }
        if self.grid < 4 {
            return bad("grid must be >= 4");
        }
        if self.min_cells < 2 || self.min_cells > self.max_cells {
            return bad("cell range must satisfy 2 <= min_cells <= max_cells");
        }
        let side = self.max_cells as f64 * self.grid as f64;
        if side * TRAIN_CROP_SCALE.1 > self.image_size as f64 {
            return bad("image_size too small for the largest building at 1.5x crop");
        }
        if self.min_contrast < 20 {
            return bad("min_contrast must be >= 20");
        }
        Ok(())
    }
}

/// Cell occupancy grid used to build rectilinear footprints.
struct CellGrid {
    w: usize,
    h: usize,
    occ: Vec<bool>,
}

impl CellGrid {
    fn full(w: usize, h: usize) -> Self {
        Self { w, h, occ: vec![true; w * h] }
    }

    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h && self.occ[y as usize * self.w + x as usize]
    }

    /// Corner count, or `None` if the region pinches at a lattice point.
    fn corner_count(&self) -> Option<usize> {
        let mut corners = 0;
        for j in 0..=self.h as i64 {
            for i in 0..=self.w as i64 {
                let a = self.at(i - 1, j - 1);
                let b = self.at(i, j - 1);
                let c = self.at(i - 1, j);
                let d = self.at(i, j);
                match a as u8 + b as u8 + c as u8 + d as u8 {
                    1 | 3 => corners += 1,
                    2 if a == d => return None,
                    _ => {}
                }
            }
        }
        Some(corners)
    }

    /// Traces the boundary clockwise (screen) and returns the corner ring,
    /// or `None` when the region is not one simple loop.
    fn trace(&self) -> Option<Vec<Point>> {
        let mut next: HashMap<(i64, i64), (i64, i64)> = HashMap::new();
        for y in 0..self.h as i64 {
            for x in 0..self.w as i64 {
                if !self.at(x, y) {
                    continue;
                }
                if !self.at(x, y - 1) {
                    next.insert((x, y), (x + 1, y));
                }
                if !self.at(x + 1, y) {
                    next.insert((x + 1, y), (x + 1, y + 1));
                }
                if !self.at(x, y + 1) {
                    next.insert((x + 1, y + 1), (x, y + 1));
                }
                if !self.at(x - 1, y) {
                    next.insert((x, y + 1), (x, y));
                }
            }
        }
        let start = *next.keys().min_by_key(|&&(x, y)| (y, x))?;
        let mut path = vec![start];
        let mut cur = next[&start];
        while cur != start {
            path.push(cur);
            cur = *next.get(&cur)?;
            if path.len() > next.len() {
                return None;
            }
        }
        if path.len() != next.len() {
            return None;
        }
        let n = path.len();
        let corners: Vec<Point> = (0..n)
            .filter(|&i| {
                let p = path[(i + n - 1) % n];
                let c = path[i];
                let q = path[(i + 1) % n];
                (c.0 - p.0, c.1 - p.1) != (q.0 - c.0, q.1 - c.1)
            })
            .map(|i| (path[i].0 as i32, path[i].1 as i32))
            .collect();
        Some(corners)
    }
}

/// Footprint cell extents used by [`gen_rectilinear_polygon`].
pub const DEFAULT_CELL_RANGE: (usize, usize) = (8, 15);

/// Simple rectilinear polygon with an even vertex count in `4..=max_vertices`,
/// snapped to `grid` pixels and anchored at the origin. Returned canonical.
pub fn gen_rectilinear_polygon<R: Rng + ?Sized>(max_vertices: usize, grid: i32, rng: &mut R) -> Result<Polygon> {
    gen_rectilinear_polygon_in(max_vertices, grid, DEFAULT_CELL_RANGE, rng)
}

pub fn gen_rectilinear_polygon_in<R: Rng + ?Sized>(
    max_vertices: usize,
    grid: i32,
    cells: (usize, usize),
    rng: &mut R,
) -> Result<Polygon> {
    let max_vertices = max_vertices.max(4) & !1;
    let target = 2 * rng.random_range(2..=max_vertices / 2);
    for _ in 0..MAX_GEN_ATTEMPTS {
        let w = rng.random_range(cells.0..=cells.1);
        let h = rng.random_range(cells.0..=cells.1);
        let mut g = CellGrid::full(w, h);
        let mut count = 4;
        let mut fails = 0;
        while count < target && fails < 60 {
            let saved = g.occ.clone();
            carve_bite(&mut g, rng);
            match g.corner_count() {
                Some(c) if c <= target && g.trace().is_some() && c > count => count = c,
                _ => {
                    g.occ = saved;
                    fails += 1;
                }
            }
        }
        if count != target {
            continue;
        }
        let ring = g.trace().expect("validated");
        let scaled: Vec<Point> = ring.iter().map(|&(x, y)| (x * grid, y * grid)).collect();
        let p = Polygon::new(scaled)?;
        return geometry::canonicalize(&p);
    }
    Err(Error::GenerationFailed(MAX_GEN_ATTEMPTS))
}

/// Removes a rectangle of cells that touches the grid border.
fn carve_bite<R: Rng + ?Sized>(g: &mut CellGrid, rng: &mut R) {
    let bw = rng.random_range(1..=(g.w / 2).max(1));
    let bh = rng.random_range(1..=(g.h / 2).max(1));
    let (x0, y0) = match rng.random_range(0..4) {
        0 => (rng.random_range(0..=g.w - bw), 0),
        1 => (g.w - bw, rng.random_range(0..=g.h - bh)),
        2 => (rng.random_range(0..=g.w - bw), g.h - bh),
        _ => (0, rng.random_range(0..=g.h - bh)),
    };
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            g.occ[y * g.w + x] = false;
        }
    }
}

/// Cuts some convex corners with short 45-degree chamfers.
pub fn chamfer_corners<R: Rng + ?Sized>(p: &Polygon, prob: f64, rng: &mut R) -> Result<Polygon> {
    let v = p.vertices();
    let n = v.len();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (a, c, b) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
        let convex = (c.0 - a.0) as i64 * (b.1 - c.1) as i64 - (c.1 - a.1) as i64 * (b.0 - c.0) as i64 > 0;
        let la = (c.0 - a.0).abs() + (c.1 - a.1).abs();
        let lb = (b.0 - c.0).abs() + (b.1 - c.1).abs();
        let cut = la.min(lb) / 3;
        if convex && cut >= 2 && rng.random_bool(prob) {
            let d = rng.random_range(2..=cut);
            let toward = |from: Point, to: Point| -> Point {
                ((from.0 + (to.0 - from.0).signum() * d), (from.1 + (to.1 - from.1).signum() * d))
            };
            out.push(toward(c, a));
            out.push(toward(c, b));
        } else {
            out.push(c);
        }
    }
    geometry::canonicalize(&Polygon::new(out)?)
}

/// Draws a scene: background, even-odd fill of the jittered polygon, noise.
pub fn rasterize(spec: &SceneSpec) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let j = spec.edge_jitter.max(0);
    let ring: Vec<(f64, f64)> = spec
        .polygon
        .vertices()
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = if j > 0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0, 0) };
            (
                (x + dx).clamp(0, spec.image_w as i32 - 1) as f64,
                (y + dy).clamp(0, spec.image_h as i32 - 1) as f64,
            )
        })
        .collect();
    let mut img = GrayImage::filled(spec.image_w, spec.image_h, spec.bg_shade);
    let (mut cr, mut spans) = (Vec::new(), Vec::new());
    for row in 0..spec.image_h {
        geometry::covered_spans(&ring, row as i64, 1.0, &mut cr, &mut spans);
        for &(c0, c1) in &spans {
            for x in c0.max(0)..c1.min(spec.image_w as i64) {
                img.set(x as usize, row, spec.fill_shade);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for px in img.data.iter_mut() {
            let v = *px as f64 + normal.sample(&mut rng);
            *px = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// The `scale`-enlarged window around `bbox`, resampled to 128x128 by
/// nearest neighbour, and the window itself.
pub fn crop_image(image: &GrayImage, bbox: &BBox, scale: f64) -> Result<(GrayImage, BBox)> {
    let window = geometry::enlarge_bbox(bbox, scale, image.width, image.height);
    if window.width() <= 0 || window.height() <= 0 {
        return Err(Error::DegenerateAfterTransform("empty crop window".into()));
    }
    let (sx, sy) = axis_scale(&window);
    let mut out = GrayImage::filled(CROP_SIZE, CROP_SIZE, 0);
    for j in 0..CROP_SIZE {
        let y = (window.y_min as f64 + (j as f64 + 0.5) / sy).floor() as usize;
        let y = y.min(image.height - 1);
        for i in 0..CROP_SIZE {
            let x = (window.x_min as f64 + (i as f64 + 0.5) / sx).floor() as usize;
            out.set(i, j, image.get(x.min(image.width - 1), y));
        }
    }
    Ok((out, window))
}

/// Crops `scale`-enlarged `bbox`, resamples to 128x128 (nearest neighbour)
/// and maps the contour into crop coordinates.
///
/// With an rng the scale is drawn from [1.1, 1.5] (training); without one
/// it is `scale` as given, normally [`TEST_CROP_SCALE`].
pub fn crop_sample<R: Rng + ?Sized>(
    image: &GrayImage,
    gt: &Polygon,
    bbox: &BBox,
    scale: f64,
    rng: Option<&mut R>,
    source_id: &str,
) -> Result<CropSample> {
    let scale = match rng {
        Some(r) => r.random_range(TRAIN_CROP_SCALE.0..=TRAIN_CROP_SCALE.1),
        None => scale,
    };
    let (out, window) = crop_image(image, bbox, scale)?;
    let mapped = source_to_crop(gt, &window)?;
    let gt = geometry::canonicalize(&mapped).map_err(|e| Error::DegenerateAfterTransform(e.to_string()))?;
    Ok(CropSample { image: out, gt, source_id: source_id.to_string(), crop_scale: scale, window: Some(window) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }
}

/// splitmix64 finalizer; derives per-sample seeds.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master ^ stream.rotate_left(17) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample annotation stored next to each crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAnnotation {
    pub vertices: Vec<Point>,
    pub source_id: String,
    pub crop_scale: f64,
    pub window: BBox,
    pub source_vertices: Vec<Point>,
    pub source_size: [usize; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub source_id: String,
    pub image: String,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub params: GenParams,
    pub counts: [usize; 3],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// A stored crop with its source-space ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub sample: CropSample,
    pub source_gt: Polygon,
    pub source_size: [usize; 2],
}

/// Generates one sample. Pure in `(params, master_seed, split, index)`.
pub fn generate_record(params: &GenParams, master_seed: u64, split: Split, index: usize) -> Result<DataRecord> {
    generate_scene(params, master_seed, split, index).map(|(_, r)| r)
}

/// Like [`generate_record`], also returning the full source raster.
pub fn generate_scene(params: &GenParams, master_seed: u64, split: Split, index: usize) -> Result<(GrayImage, DataRecord)> {
    let seed = derive_seed(master_seed, split.tag(), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_id = format!("{}-{:05}", split.name(), index);
    let local = gen_rectilinear_polygon_in(params.max_vertices, params.grid, (params.min_cells, params.max_cells), &mut rng)?;
    let local = if params.diagonal { chamfer_corners(&local, 0.3, &mut rng)? } else { local };
    let bb = local.bbox();
    let size = params.image_size as i32;
    let (bw, bh) = (bb.width(), bb.height());
    let mx = (bw + 3) / 4 + 1;
    let my = (bh + 3) / 4 + 1;
    let ox = rng.random_range(mx..=(size - bw - mx).max(mx)) - bb.x_min;
    let oy = rng.random_range(my..=(size - bh - my).max(my)) - bb.y_min;
    let polygon = Polygon::new(local.vertices().iter().map(|&(x, y)| (x + ox, y + oy)).collect())?;
    let bg: i32 = rng.random_range(30..=225);
    let contrast: i32 = rng.random_range(params.min_contrast as i32..=110);
    let fill = if (rng.random_bool(0.5) && bg + contrast <= 255) || bg - contrast < 0 { bg + contrast } else { bg - contrast };
    let spec = SceneSpec {
        image_w: params.image_size,
        image_h: params.image_size,
        polygon: polygon.clone(),
        fill_shade: fill.clamp(0, 255) as u8,
        bg_shade: bg as u8,
        noise_sigma: params.noise_sigma,
        edge_jitter: params.edge_jitter,
        seed: rng.random(),
    };
    let scene = rasterize(&spec);
    let bbox = polygon.bbox();
    let sample = match split {
        Split::Train => crop_sample(&scene, &polygon, &bbox, TEST_CROP_SCALE, Some(&mut rng), &source_id)?,
        _ => crop_sample::<ChaCha8Rng>(&scene, &polygon, &bbox, TEST_CROP_SCALE, None, &source_id)?,
    };
    Ok((scene, DataRecord { sample, source_gt: polygon, source_size: [params.image_size, params.image_size] }))
}

fn record_annotation(r: &DataRecord, seed: u64) -> SampleAnnotation {
    SampleAnnotation {
        vertices: r.sample.gt.vertices().to_vec(),
        source_id: r.sample.source_id.clone(),
        crop_scale: r.sample.crop_scale,
        window: r.sample.window.expect("generated crops carry a window"),
        source_vertices: r.source_gt.vertices().to_vec(),
        source_size: r.source_size,
        seed,
    }
}

/// Writes `manifest.json`, `{split}/{id}.pgm` and `{split}/{id}.json`.
pub fn build_dataset(
    counts: [usize; 3],
    params: &GenParams,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    if counts.contains(&0) {
        return Err(Error::Config("split counts must be >= 1".into()));
    }
    let mut entries = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir)?;
        let written: Vec<Result<ManifestEntry>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let rec = generate_record(params, master_seed, *split, i)?;
                let id = rec.sample.source_id.clone();
                let image = format!("{}/{}.pgm", split.name(), id);
                let annotation = format!("{}/{}.json", split.name(), id);
                rec.sample.image.save_pgm(&out_dir.join(&image))?;
                let ann = record_annotation(&rec, derive_seed(master_seed, split.tag(), i as u64));
                fs::write(out_dir.join(&annotation), serde_json::to_string(&ann)?)?;
                Ok(ManifestEntry { split: *split, source_id: id, image, annotation })
            })
            .collect();
        for e in written {
            entries.push(e?);
        }
    }
    let manifest = DatasetManifest { format_version: 1, master_seed, params: params.clone(), counts, entries };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads every record of one split listed in a manifest.
pub fn load_split(dataset_dir: &Path, split: Split) -> Result<Vec<DataRecord>> {
    let manifest = DatasetManifest::load(&dataset_dir.join("manifest.json"))?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_record(dataset_dir, e))
        .collect()
}

pub fn load_record(dataset_dir: &Path, entry: &ManifestEntry) -> Result<DataRecord> {
    let image = GrayImage::load(&dataset_dir.join(&entry.image))?;
    let ann: SampleAnnotation = serde_json::from_str(&fs::read_to_string(dataset_dir.join(&entry.annotation))?)?;
    let gt = Polygon::new(ann.vertices)?;
    Ok(DataRecord {
        sample: CropSample {
            image,
            gt,
            source_id: ann.source_id,
            crop_scale: ann.crop_scale,
            window: Some(ann.window),
        },
        source_gt: Polygon::new(ann.source_vertices)?,
        source_size: ann.source_size,
    })
}

/// Generates records in memory without touching disk.
pub fn generate_split(params: &GenParams, master_seed: u64, split: Split, n: usize) -> Result<Vec<DataRecord>> {
    (0..n).into_par_iter().map(|i| generate_record(params, master_seed, split, i)).collect()
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}
