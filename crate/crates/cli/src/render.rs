//! Ground-truth versus prediction overlays in crop coordinates.
//!
//! The SVG writes vertex coordinates verbatim; the PNG is a 4x nearest
//! upscale of the crop with both rings drawn on top.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use contourlm::evaluation::SampleDump;
use contourlm::geometry::Polygon;
use contourlm::synthdata::{GrayImage, CROP_SIZE};

pub const PNG_SCALE: usize = 4;
const GT_RGB: [u8; 3] = [0, 200, 0];
const PRED_RGB: [u8; 3] = [230, 30, 30];

fn points_attr(p: &Polygon) -> String {
    p.vertices().iter().map(|(x, y)| format!("{x},{y}")).collect::<Vec<_>>().join(" ")
}

fn ring_svg(out: &mut String, p: &Polygon, class: &str, color: &str) {
    let _ = writeln!(
        out,
        r#"  <polygon class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="0.6"/>"#,
        points_attr(p)
    );
    for (x, y) in p.vertices() {
        let _ = writeln!(out, r#"  <circle class="{class}-vertex" cx="{x}" cy="{y}" r="0.9" fill="{color}"/>"#);
    }
}

/// SVG overlay; `background` is an optional href drawn under the rings.
pub fn svg(dump: &SampleDump, background: Option<&str>) -> String {
    let n = CROP_SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {n} {n}">"#,
        w = n * PNG_SCALE
    );
    match background {
        Some(href) => {
            let _ = writeln!(s, r#"  <image href="{href}" x="0" y="0" width="{n}" height="{n}" style="image-rendering:pixelated"/>"#);
        }
        None => {
            let _ = writeln!(s, r##"  <rect x="0" y="0" width="{n}" height="{n}" fill="#202020"/>"##);
        }
    }
    ring_svg(&mut s, &dump.gt_crop, "gt", "#00c800");
    if let Some(p) = &dump.pred_crop {
        ring_svg(&mut s, p, "pred", "#e61e1e");
    }
    let _ = writeln!(s, r#"  <text x="2" y="6" font-size="5" fill="white">{}</text>"#, legend(dump));
    s.push_str("</svg>\n");
    s
}

/// Vertex counts and IoU, e.g. `gt 8 | pred 6 | IoU 0.734`.
pub fn legend(dump: &SampleDump) -> String {
    match &dump.pred_crop {
        Some(p) => format!("gt {} | pred {} | IoU {:.3}", dump.gt_crop.len(), p.len(), dump.iou),
        None if dump.error.is_some() => format!("gt {} | pred failed to decode", dump.gt_crop.len()),
        None => format!("gt {}", dump.gt_crop.len()),
    }
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn draw_ring(img: &mut image::RgbImage, p: &Polygon, c: [u8; 3]) {
    let s = PNG_SCALE as f64;
    let v = p.vertices();
    let centre = |(x, y): (i32, i32)| (x as f64 * s + s / 2.0, y as f64 * s + s / 2.0);
    for i in 0..v.len() {
        let (x0, y0) = centre(v[i]);
        let (x1, y1) = centre(v[(i + 1) % v.len()]);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            put(img, (x0 + t * (x1 - x0)).floor() as i64, (y0 + t * (y1 - y0)).floor() as i64, c);
        }
    }
    for &pt in v {
        let (cx, cy) = centre(pt);
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(img, cx as i64 + dx, cy as i64 + dy, c);
            }
        }
    }
}

/// Rasterized overlay at `PNG_SCALE`x.
pub fn png(dump: &SampleDump, crop: Option<&GrayImage>) -> image::RgbImage {
    let side = (CROP_SIZE * PNG_SCALE) as u32;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([32, 32, 32]));
    if let Some(c) = crop {
        for y in 0..side {
            for x in 0..side {
                let v = c.get(x as usize / PNG_SCALE, y as usize / PNG_SCALE);
                img.put_pixel(x, y, image::Rgb([v, v, v]));
            }
        }
    }
    draw_ring(&mut img, &dump.gt_crop, GT_RGB);
    if let Some(p) = &dump.pred_crop {
        draw_ring(&mut img, p, PRED_RGB);
    }
    img
}

/// Writes `<id>.svg` and `<id>.png` (plus `<id>_crop.png` when a crop is
/// available, referenced by the SVG).
pub fn write_overlay(dir: &Path, dump: &SampleDump, crop: Option<&GrayImage>) -> std::io::Result<()> {
    let id = &dump.source_id;
    let bg = match crop {
        Some(c) => {
            let name = format!("{id}_crop.png");
            let raw = image::GrayImage::from_raw(c.width as u32, c.height as u32, c.data.clone())
                .ok_or_else(|| std::io::Error::other("crop buffer size mismatch"))?;
            raw.save(dir.join(&name)).map_err(std::io::Error::other)?;
            Some(name)
        }
        None => None,
    };
    fs::write(dir.join(format!("{id}.svg")), svg(dump, bg.as_deref()))?;
    png(dump, crop).save(dir.join(format!("{id}.png"))).map_err(std::io::Error::other)
}
