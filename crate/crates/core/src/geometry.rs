//! Polygon primitives on the integer pixel lattice.
//!
//! Coordinates follow image convention: `x` grows to the right, `y` grows
//! downward. Under that convention a positive shoelace area means the ring
//! runs clockwise as drawn on screen, which is the canonical orientation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = (i32, i32);

/// Default supersampling factor for rasterized IoU.
pub const DEFAULT_SUPERSAMPLE: usize = 4;

/// Open vertex ring; the closing vertex is not stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPolygon")]
pub struct Polygon {
    vertices: Vec<Point>,
}

#[derive(Deserialize)]
struct RawPolygon {
    vertices: Vec<Point>,
}

impl TryFrom<RawPolygon> for Polygon {
    type Error = Error;
    fn try_from(raw: RawPolygon) -> Result<Self> {
        Polygon::new(raw.vertices)
    }
}

impl Polygon {
    /// Builds a polygon, rejecting rings with fewer than three vertices or
    /// with consecutive repeats (the wrap-around pair included).
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!(
                "{} vertices, need at least 3",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(Error::InvalidPolygon(format!(
                    "consecutive duplicate vertex {:?} at {}",
                    vertices[i], i
                )));
            }
        }
        Ok(Self { vertices })
    }

    /// Drops consecutive duplicates (cyclically) and then validates.
    pub fn from_dedup(mut vertices: Vec<Point>) -> Result<Self> {
        vertices.dedup();
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        Self::new(vertices)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut v = self.vertices.clone();
        v.reverse();
        Self { vertices: v }
    }

    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for &(x, y) in &self.vertices {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 }
    }

    /// True when every vertex lies in `[0, w) x [0, h)`.
    pub fn within(&self, w: usize, h: usize) -> bool {
        self.vertices
            .iter()
            .all(|&(x, y)| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
    }

    pub fn is_canonical(&self) -> bool {
        canonicalize(self).map(|c| &c == self).unwrap_or(false)
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BBox {
    pub fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidPolygon(format!(
                "degenerate bbox ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

// BBox travels as a bare [x_min, y_min, x_max, y_max] array.
impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[i32; 4]>::deserialize(d)?;
        BBox::new(x_min, y_min, x_max, y_max).map_err(serde::de::Error::custom)
    }
}

/// Signed shoelace area over the closed ring. Positive means screen-clockwise.
pub fn shoelace_signed_area(p: &Polygon) -> f64 {
    let v = p.vertices();
    let n = v.len();
    let mut twice: i64 = 0;
    for i in 0..n {
        let (x0, y0) = v[i];
        let (x1, y1) = v[(i + 1) % n];
        twice += x0 as i64 * y1 as i64 - x1 as i64 * y0 as i64;
    }
    twice as f64 / 2.0
}

fn start_key(&(x, y): &Point) -> (i64, i32, i32) {
    let (xx, yy) = (x as i64, y as i64);
    (xx * xx + yy * yy, y, x)
}

/// Clockwise ring starting at the vertex nearest the image origin
/// (ties: smaller y, then smaller x).
pub fn canonicalize(p: &Polygon) -> Result<Polygon> {
    let area = shoelace_signed_area(p);
    if area == 0.0 {
        return Err(Error::ZeroArea);
    }
    let mut v = p.vertices().to_vec();
    if area < 0.0 {
        v.reverse();
    }
    let start = v
        .iter()
        .enumerate()
        .min_by_key(|(i, pt)| (start_key(pt), *i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    v.rotate_left(start);
    Ok(Polygon { vertices: v })
}

/// Cyclic rotation so that vertex `offset` comes first.
pub fn rotate_start(p: &Polygon, offset: usize) -> Result<Polygon> {
    if offset >= p.len() {
        return Err(Error::OffsetOutOfRange { offset, len: p.len() });
    }
    let mut v = p.vertices().to_vec();
    v.rotate_left(offset);
    Ok(Polygon { vertices: v })
}

/// Even-odd crossings of the horizontal line `y` with the ring, sorted.
///
/// Edges are half-open in y so a scanline through a vertex counts once.
pub(crate) fn scanline_crossings(ring: &[(f64, f64)], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = ring.len();
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        if (y0 <= y) != (y1 <= y) {
            let t = (y - y0) / (y1 - y0);
            out.push(x0 + t * (x1 - x0));
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
}

/// Row-wise column spans `[c0, c1)` covered under the even-odd rule, where
/// a cell is covered when its center falls inside. Cells are `1/scale` wide.
pub(crate) fn covered_spans(
    ring: &[(f64, f64)],
    row: i64,
    scale: f64,
    crossings: &mut Vec<f64>,
    spans: &mut Vec<(i64, i64)>,
) {
    spans.clear();
    let yc = (row as f64 + 0.5) / scale;
    scanline_crossings(ring, yc, crossings);
    for pair in crossings.chunks_exact(2) {
        // first cell whose center x*scale - 0.5 >= a
        let c0 = (pair[0] * scale - 0.5).ceil() as i64;
        let c1 = (pair[1] * scale - 0.5).ceil() as i64;
        if c1 > c0 {
            spans.push((c0, c1));
        }
    }
}

fn ring_f64(p: &Polygon) -> Vec<(f64, f64)> {
    p.vertices().iter().map(|&(x, y)| (x as f64, y as f64)).collect()
}

fn span_len(spans: &[(i64, i64)]) -> i64 {
    spans.iter().map(|(a, b)| b - a).sum()
}

/// Length of the intersection of two sorted, disjoint span lists.
fn span_overlap(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Filled cell count of a polygon on a grid with `supersample` cells per pixel.
pub fn raster_area(p: &Polygon, supersample: usize) -> i64 {
    let s = supersample.max(1) as f64;
    let ring = ring_f64(p);
    let bb = p.bbox();
    let (mut cr, mut sp) = (Vec::new(), Vec::new());
    let mut total = 0;
    for row in (bb.y_min as i64 * s as i64)..(bb.y_max as i64 * s as i64) {
        covered_spans(&ring, row, s, &mut cr, &mut sp);
        total += span_len(&sp);
    }
    total
}

/// Rasterized intersection-over-union under the even-odd rule.
///
/// Spans from a row may overlap for self-intersecting rings only through
/// even-odd pairing, which keeps them disjoint, so span arithmetic is exact.
pub fn polygon_iou(a: &Polygon, b: &Polygon, supersample: usize) -> Result<f64> {
    let s = supersample.max(1) as f64;
    let si = supersample.max(1) as i64;
    let (ra, rb) = (ring_f64(a), ring_f64(b));
    let (ba, bb) = (a.bbox(), b.bbox());
    let y0 = ba.y_min.min(bb.y_min) as i64 * si;
    let y1 = ba.y_max.max(bb.y_max) as i64 * si;
    let (mut cr, mut sa, mut sb) = (Vec::new(), Vec::new(), Vec::new());
    let (mut inter, mut union) = (0i64, 0i64);
    for row in y0..y1 {
        covered_spans(&ra, row, s, &mut cr, &mut sa);
        covered_spans(&rb, row, s, &mut cr, &mut sb);
        let ov = span_overlap(&sa, &sb);
        inter += ov;
        union += span_len(&sa) + span_len(&sb) - ov;
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Removes `k` distinct random vertices, keeping the order of the rest.
///
/// Retries a few draws when the survivors would collapse to a collinear ring.
pub fn corrupt_delete<R: Rng + ?Sized>(p: &Polygon, k: usize, rng: &mut R) -> Result<Polygon> {
    let n = p.len();
    if k == 0 || n < k + 3 {
        return Err(Error::DeleteTooMany { k, n });
    }
    let mut last_err = Error::ZeroArea;
    for _ in 0..16 {
        let mut drop = rand::seq::index::sample(rng, n, k).into_vec();
        drop.sort_unstable();
        let kept: Vec<Point> = p
            .vertices()
            .iter()
            .enumerate()
            .filter(|(i, _)| drop.binary_search(i).is_err())
            .map(|(_, &v)| v)
            .collect();
        match Polygon::new(kept) {
            Ok(q) if shoelace_signed_area(&q) != 0.0 => return Ok(q),
            Ok(_) => last_err = Error::ZeroArea,
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

/// Inserts `k` vertices, each at the midpoint of a random edge of the
/// current ring displaced by up to `delta` pixels per axis and clamped to
/// `[0, bounds.0) x [0, bounds.1)`.
pub fn corrupt_insert<R: Rng + ?Sized>(
    p: &Polygon,
    k: usize,
    delta: i32,
    bounds: (usize, usize),
    rng: &mut R,
) -> Result<Polygon> {
    let mut v = p.vertices().to_vec();
    let (w, h) = (bounds.0 as i32, bounds.1 as i32);
    let mut inserted = 0;
    let mut attempts = 0;
    while inserted < k {
        attempts += 1;
        if attempts > 64 * k.max(1) {
            return Err(Error::InvalidPolygon("no room to insert vertices".into()));
        }
        let n = v.len();
        let e = rng.random_range(0..n);
        let (a, b) = (v[e], v[(e + 1) % n]);
        let (dx, dy) = if delta > 0 {
            (rng.random_range(-delta..=delta), rng.random_range(-delta..=delta))
        } else {
            (0, 0)
        };
        let mx = (a.0 + b.0).div_euclid(2) + dx;
        let my = (a.1 + b.1).div_euclid(2) + dy;
        let q = (mx.clamp(0, w - 1), my.clamp(0, h - 1));
        if q == a || q == b {
            continue;
        }
        v.insert(e + 1, q);
        inserted += 1;
    }
    Polygon::new(v)
}

/// Scales a box about its center and clamps it into the image.
///
/// Corners round outward so the unclamped result always contains the input.
pub fn enlarge_bbox(b: &BBox, factor: f64, image_w: usize, image_h: usize) -> BBox {
    let f = factor.max(1.0);
    let cx = (b.x_min + b.x_max) as f64 / 2.0;
    let cy = (b.y_min + b.y_max) as f64 / 2.0;
    let hw = b.width() as f64 * f / 2.0;
    let hh = b.height() as f64 * f / 2.0;
    const EPS: f64 = 1e-9;
    let x0 = ((cx - hw) + EPS).floor() as i32;
    let y0 = ((cy - hh) + EPS).floor() as i32;
    let x1 = ((cx + hw) - EPS).ceil() as i32;
    let y1 = ((cy + hh) - EPS).ceil() as i32;
    let (wmax, hmax) = (image_w as i32 - 1, image_h as i32 - 1);
    BBox {
        x_min: x0.clamp(0, wmax),
        y_min: y0.clamp(0, hmax),
        x_max: x1.clamp(0, wmax),
        y_max: y1.clamp(0, hmax),
    }
}

fn orient(a: Point, b: Point, c: Point) -> i64 {
    let (ax, ay) = (a.0 as i64, a.1 as i64);
    (b.0 as i64 - ax) * (c.1 as i64 - ay) - (b.1 as i64 - ay) * (c.0 as i64 - ax)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)) {
        return true;
    }
    (d1 == 0 && on_segment(q1, q2, p1))
        || (d2 == 0 && on_segment(q1, q2, p2))
        || (d3 == 0 && on_segment(p1, p2, q1))
        || (d4 == 0 && on_segment(p1, p2, q2))
}

/// True when any two non-adjacent edges of the ring touch, or adjacent
/// edges fold back onto each other.
pub fn self_intersects(v: &[Point]) -> bool {
    let n = v.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        for j in (i + 1)..n {
            let (b1, b2) = (v[j], v[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // shared endpoint; only a fold-back (overlap) counts
                let shared = if j == i + 1 { a2 } else { a1 };
                let (other_a, other_b) = if j == i + 1 { (a1, b2) } else { (a2, b1) };
                if orient(shared, other_a, other_b) == 0 {
                    let da = (other_a.0 - shared.0, other_a.1 - shared.1);
                    let db = (other_b.0 - shared.0, other_b.1 - shared.1);
                    let dot = da.0 as i64 * db.0 as i64 + da.1 as i64 * db.1 as i64;
                    if dot > 0 {
                        return true;
                    }
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn poly(v: &[Point]) -> Polygon {
        Polygon::new(v.to_vec()).unwrap()
    }

    fn square() -> Polygon {
        poly(&[(0, 0), (4, 0), (4, 4), (0, 4)])
    }

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Polygon {
        poly(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    #[test]
    fn shoelace_examples() {
        assert_eq!(shoelace_signed_area(&square()), 16.0);
        assert_eq!(shoelace_signed_area(&square().reversed()), -16.0);
        assert_eq!(shoelace_signed_area(&rect(0, 0, 4, 1)), 4.0);
    }

    #[test]
    fn rejects_bad_rings() {
        assert!(Polygon::new(vec![(0, 0), (1, 1)]).is_err());
        assert!(Polygon::new(vec![(0, 0), (1, 1), (1, 1), (0, 2)]).is_err());
        assert!(Polygon::new(vec![(0, 0), (1, 1), (0, 2), (0, 0)]).is_err());
        assert_eq!(Polygon::from_dedup(vec![(0, 0), (1, 1), (1, 1), (0, 2), (0, 0)]).unwrap().len(), 3);
    }

    #[test]
    fn canonical_start_on_printed_contour() {
        let p = poly(&[
            (85, 32),
            (160, 63),
            (135, 122),
            (176, 139),
            (154, 191),
            (103, 169),
            (111, 150),
            (46, 124),
        ]);
        let c = canonicalize(&p).unwrap();
        assert_eq!(c.vertices()[0], (85, 32));
        assert_eq!(c, p);
        let min_d2 = p.vertices().iter().map(|&(x, y)| x * x + y * y).min().unwrap();
        assert_eq!(min_d2, 8249);
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize(&square()).unwrap(), square());
        let ccw = poly(&[(0, 0), (0, 4), (4, 4), (4, 0)]);
        assert_eq!(canonicalize(&ccw).unwrap(), square());
        let line = poly(&[(0, 0), (2, 0), (4, 0)]);
        assert!(matches!(canonicalize(&line), Err(Error::ZeroArea)));
    }

    #[test]
    fn canonical_tie_break_prefers_smaller_y() {
        // (3,4) and (4,3) are both at distance 5 from the origin
        let p = poly(&[(4, 3), (9, 3), (9, 9), (3, 9), (3, 4)]);
        assert_eq!(canonicalize(&p).unwrap().vertices()[0], (4, 3));
    }

    #[test]
    fn rotate_examples() {
        assert_eq!(rotate_start(&square(), 0).unwrap(), square());
        assert_eq!(
            rotate_start(&square(), 1).unwrap().vertices(),
            &[(4, 0), (4, 4), (0, 4), (0, 0)]
        );
        assert!(rotate_start(&square(), 4).is_err());
        for k in 0..4 {
            let r = rotate_start(&square(), k).unwrap();
            assert_eq!(canonicalize(&r).unwrap(), canonicalize(&square()).unwrap());
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(polygon_iou(&square(), &square(), 4).unwrap(), 1.0);
        assert_eq!(polygon_iou(&rect(0, 0, 4, 4), &rect(10, 10, 14, 14), 4).unwrap(), 0.0);
        let iou = polygon_iou(&rect(0, 0, 4, 4), &rect(2, 0, 6, 4), 4).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 0.02, "{iou}");
    }

    #[test]
    fn raster_area_matches_pixel_count() {
        assert_eq!(raster_area(&square(), 1), 16);
        assert_eq!(raster_area(&square(), 4), 256);
        // right triangle with legs 8: half of 64 cells, centers strictly inside
        let tri = poly(&[(0, 0), (8, 0), (0, 8)]);
        assert_eq!(raster_area(&tri, 1), 28);
    }

    #[test]
    fn bowtie_uses_even_odd() {
        let bowtie = poly(&[(0, 0), (4, 4), (4, 0), (0, 4)]);
        let a = raster_area(&bowtie, 4);
        assert!(a > 0 && a < 256);
    }

    #[test]
    fn delete_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = corrupt_delete(&square(), 1, &mut rng).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.vertices().iter().all(|v| square().vertices().contains(v)));
        assert!(corrupt_delete(&square(), 2, &mut rng).is_err());
        assert!(corrupt_delete(&square(), 0, &mut rng).is_err());
    }

    #[test]
    fn insert_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = corrupt_insert(&square(), 1, 0, (64, 64), &mut rng).unwrap();
        assert_eq!(q.len(), 5);
        assert_eq!(polygon_iou(&q, &square(), 4).unwrap(), 1.0);
        let q = corrupt_insert(&square(), 2, 3, (64, 64), &mut rng).unwrap();
        assert_eq!(q.len(), 6);
    }

    #[test]
    fn enlarge_examples() {
        let b = BBox::new(10, 10, 20, 20).unwrap();
        assert_eq!(enlarge_bbox(&b, 1.0, 100, 100), b);
        assert_eq!(enlarge_bbox(&b, 2.0, 100, 100), BBox::new(5, 5, 25, 25).unwrap());
        let o = BBox::new(0, 0, 20, 20).unwrap();
        assert_eq!(enlarge_bbox(&o, 1.5, 100, 100), BBox::new(0, 0, 25, 25).unwrap());
    }

    #[test]
    fn intersection_flags() {
        assert!(!self_intersects(square().vertices()));
        assert!(self_intersects(&[(0, 0), (4, 4), (4, 0), (0, 4)]));
        // spike folding back along its own edge
        assert!(self_intersects(&[(0, 0), (4, 0), (2, 0), (2, 3)]));
    }

    #[test]
    fn bbox_json_is_array() {
        let b = BBox::new(1, 2, 3, 4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::to_string(&square()).unwrap(), r#"{"vertices":[[0,0],[4,0],[4,4],[0,4]]}"#);
    }
}
