//! Static PNG figures: line charts, scatter plots and reconstruction review
//! sheets. Series names and data are embedded as PNG text chunks so figures
//! can be checked without looking at pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::arg_err;
use crate::imaging::{self, to_u8, BinaryMask, Image};
use crate::Result;

const WIDTH: usize = 640;
const HEIGHT: usize = 420;
const MARGIN_LEFT: usize = 70;
const MARGIN_RIGHT: usize = 20;
const MARGIN_TOP: usize = 20;
const MARGIN_BOTTOM: usize = 40;
/// Text chunk key holding the JSON series description.
pub const SERIES_KEY: &str = "Series";

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Line,
    Points,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn line(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            style: Style::Line,
        }
    }

    pub fn points(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            style: Style::Points,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot x on a base-2 logarithmic axis (latent sizes).
    pub log2_x: bool,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            rgb: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let o = (y as usize * self.w + x as usize) * 3;
            self.rgb[o..o + 3].copy_from_slice(&c);
        }
    }

    fn square(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                self.set(x + dx, y + dy, c);
            }
        }
    }

    fn disc(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.set(x + dx, y + dy, c);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), thick: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.square(x, y, thick, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, s: &str, x: i64, y: i64, scale: i64, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            let gx = x + k as i64 * 4 * scale;
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if row & (0b100 >> rx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.set(gx + rx * scale + sx, y + ry as i64 * scale + sy, c);
                            }
                        }
                    }
                }
            }
        }
    }

    fn save(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        imaging::write_png(path, self.w, self.h, png::ColorType::Rgb, png::BitDepth::Eight, &self.rgb, text)
    }
}

/// 3x5 glyphs for tick labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b111, 0b101, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

fn tick_label(v: f64, span: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs();
    if !(1e-3..1e5).contains(&mag) {
        return format!("{v:.1e}").replace("e-0", "e-").replace('+', "");
    }
    let decimals = if span > 0.0 { (2.0 - span.log10().floor()).clamp(0.0, 4.0) as usize } else { 2 };
    format!("{v:.decimals$}")
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return Some((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.05;
    Some((lo - pad, hi + pad))
}

impl Figure {
    fn tx(&self, x: f64) -> f64 {
        if self.log2_x {
            x.max(f64::MIN_POSITIVE).log2()
        } else {
            x
        }
    }

    /// Renders and writes the figure. Non-finite points are skipped.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.series.is_empty() {
            return arg_err("figure has no series");
        }
        if self.log2_x && self.series.iter().flat_map(|s| &s.points).any(|p| p.0 <= 0.0) {
            return arg_err("log2 x axis needs positive x values");
        }
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = match self.x_range {
            Some((a, b)) => (self.tx(a), self.tx(b)),
            None => bounds(all().map(|p| self.tx(p.0))).unwrap_or((0.0, 1.0)),
        };
        let (y0, y1) = self.y_range.or_else(|| bounds(all().map(|p| p.1))).unwrap_or((0.0, 1.0));
        let pw = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
        let ph = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
        let px = |x: f64| MARGIN_LEFT as i64 + ((self.tx(x) - x0) / (x1 - x0) * pw).round() as i64;
        let py = |y: f64| (MARGIN_TOP as f64 + ph - (y - y0) / (y1 - y0) * ph).round() as i64;

        let mut c = Canvas::new(WIDTH, HEIGHT);
        let grey = [220, 220, 220];
        let black = [0, 0, 0];
        let (left, right) = (MARGIN_LEFT as i64, (WIDTH - MARGIN_RIGHT) as i64);
        let (top, bottom) = (MARGIN_TOP as i64, (HEIGHT - MARGIN_BOTTOM) as i64);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let yv = y0 + f * (y1 - y0);
            let yp = py(yv);
            c.line((left, yp), (right, yp), 0, grey);
            c.text(&tick_label(yv, y1 - y0), 4, yp - 5, 2, black);
            let xt = x0 + f * (x1 - x0);
            let xp = left + (f * pw).round() as i64;
            c.line((xp, top), (xp, bottom), 0, grey);
            let xv = if self.log2_x { xt.exp2() } else { xt };
            let label = tick_label(xv, if self.log2_x { xv } else { x1 - x0 });
            c.text(&label, xp - (label.len() as i64 * 4), bottom + 8, 2, black);
        }
        c.line((left, top), (left, bottom), 0, black);
        c.line((left, bottom), (right, bottom), 0, black);

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(i64, i64)> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|p| (px(p.0), py(p.1)))
                .collect();
            match s.style {
                Style::Line => {
                    for w in pts.windows(2) {
                        c.line(w[0], w[1], 1, color);
                    }
                    if pts.len() == 1 {
                        c.disc(pts[0].0, pts[0].1, 3, color);
                    }
                }
                Style::Points => {
                    for p in &pts {
                        c.disc(p.0, p.1, 3, color);
                    }
                }
            }
            // Legend swatch; names are in the text chunks.
            c.square(right - 12, top + 8 + 14 * i as i64, 5, color);
        }

        let series_json = serde_json::to_string(&self.series).map_err(|e| crate::Error::Argument(e.to_string()))?;
        c.save(
            path,
            &[
                ("Title", self.title.clone()),
                ("XLabel", self.x_label.clone()),
                ("YLabel", self.y_label.clone()),
                (SERIES_KEY, series_json),
            ],
        )
    }
}

/// Series stored in a figure written by [`Figure::save`].
pub fn read_series(path: &Path) -> Result<Vec<Series>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let reader = decoder.read_info()?;
    let info = reader.info();
    let text = info
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == SERIES_KEY)
        .map(|t| t.text.clone())
        .or_else(|| {
            info.compressed_latin1_text
                .iter()
                .find(|t| t.keyword == SERIES_KEY)
                .and_then(|t| t.get_text().ok())
        })
        .or_else(|| {
            info.utf8_text
                .iter()
                .find(|t| t.keyword == SERIES_KEY)
                .and_then(|t| t.get_text().ok())
        });
    match text {
        Some(t) => serde_json::from_str(&t).map_err(|e| crate::Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
        None => Err(crate::Error::Ingestion {
            path: path.to_path_buf(),
            reason: "figure has no series metadata".into(),
        }),
    }
}

/// One row per record: original, reconstruction, difference mask (white
/// where the images differ), separated by a 4-pixel gutter.
pub fn review_sheet(rows: &[(&Image, &Image, &BinaryMask)], path: &Path) -> Result<()> {
    let Some(first) = rows.first() else {
        return arg_err("review sheet needs at least one row");
    };
    let (h, w) = (first.0.height(), first.0.width());
    let gap = 4;
    let sheet_w = 3 * w + 4 * gap;
    let sheet_h = rows.len() * (h + gap) + gap;
    let mut c = Canvas::new(sheet_w, sheet_h);
    for (r, (orig, rec, mask)) in rows.iter().enumerate() {
        if !orig.same_shape(rec) || mask.height() != h || mask.width() != w || orig.height() != h || orig.width() != w {
            return arg_err("review rows must share one image size");
        }
        let oy = gap + r * (h + gap);
        for y in 0..h {
            for x in 0..w {
                let pix = |img: &Image| [0, 1, 2].map(|ch| to_u8(img.get(ch, y, x)));
                c.set((gap + x) as i64, (oy + y) as i64, pix(orig));
                c.set((2 * gap + w + x) as i64, (oy + y) as i64, pix(rec));
                let m = if mask.get(y, x) { 255 } else { 0 };
                c.set((3 * gap + 2 * w + x) as i64, (oy + y) as i64, [m, m, m]);
            }
        }
    }
    c.save(path, &[("Title", "original | reconstruction | difference".into())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_roundtrips_series_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fig.png");
        let fig = Figure {
            title: "loss".into(),
            x_label: "latent size".into(),
            y_label: "loss".into(),
            log2_x: true,
            series: vec![
                Series::line("total", vec![(4.0, 1.0), (32.0, 0.5), (256.0, 0.25)]),
                Series::points("ssim", vec![(4.0, 0.2)]),
            ],
            ..Default::default()
        };
        fig.save(&p).unwrap();
        assert_eq!(read_series(&p).unwrap(), fig.series);
        let img = imaging::load_png(&p).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        // Some pixels carry the first series colour.
        let blue = (0..HEIGHT * WIDTH).any(|i| {
            let (y, x) = (i / WIDTH, i % WIDTH);
            to_u8(img.get(0, y, x)) == 31 && to_u8(img.get(1, y, x)) == 119
        });
        assert!(blue);
    }

    #[test]
    fn rejects_empty_and_bad_log_axis() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Figure::default().save(&dir.path().join("a.png")).is_err());
        let fig = Figure {
            log2_x: true,
            series: vec![Series::line("x", vec![(0.0, 1.0)])],
            ..Default::default()
        };
        assert!(fig.save(&dir.path().join("b.png")).is_err());
    }

    #[test]
    fn review_sheet_layout() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::constant(8, 8, 0.0).unwrap();
        let b = Image::constant(8, 8, 1.0).unwrap();
        let m = imaging::diff_mask(&a, &b, 0.5).unwrap();
        let p = dir.path().join("sheet.png");
        review_sheet(&[(&a, &b, &m), (&a, &a, &m)], &p).unwrap();
        let img = imaging::load_png(&p).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 8 + 16, 2 * 12 + 4));
        assert_eq!(img.get(0, 4, 4 + 8 + 4 + 1), 1.0);
    }

    #[test]
    fn tick_labels() {
        assert_eq!(tick_label(0.0, 1.0), "0");
        assert_eq!(tick_label(0.25, 1.0), "0.25");
        assert_eq!(tick_label(128.0, 256.0), "128");
        assert!(tick_label(1e-6, 1e-6).contains('e'));
    }
}
