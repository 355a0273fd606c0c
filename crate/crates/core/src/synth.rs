//! Synthetic tables: grid images with matching LaTeX token labels.
//!
//! Each sample is a pure function of `(seed, index)`, so generation can be
//! split across workers and repeated bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::rng::{derive_indexed, rng_from};
use crate::vocab::{Task, CELL, ROW_SEPARATOR};
use crate::{Error, Result};

pub const BEGIN_TABULAR: &str = "\\begin{tabular}";
pub const END_TABULAR: &str = "\\end{tabular}";
pub const HLINE: &str = "\\hline";

/// Minimum cell size in pixels.
pub const MIN_CELL_W: usize = 12;
pub const MIN_CELL_H: usize = 8;
const MARGIN: usize = 2;
const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 digit bitmaps, one row per byte, most significant of the low five bits on the left.
const DIGITS: [[u8; GLYPH_H]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentMode {
    /// A solid bar standing in for cell text.
    Marker,
    /// Digit strings drawn from the built-in bitmap font.
    Digits,
}

impl core::str::FromStr for ContentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marker" => Ok(Self::Marker),
            "digits" => Ok(Self::Digits),
            _ => Err(Error::Config(format!("unknown content mode `{s}` (expected marker or digits)"))),
        }
    }
}

impl ContentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Marker => "marker",
            Self::Digits => "digits",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub width: usize,
    pub height: usize,
    pub content: ContentMode,
    /// Probability that a cell holds content.
    pub fill_prob: f64,
    /// Probability of each vertical rule (outer edges and column boundaries).
    pub vrule_prob: f64,
    /// Probability of each horizontal rule (top, between rows, bottom).
    pub hline_prob: f64,
    pub max_digits: usize,
    pub task: Task,
    /// Longest accepted label body, in tokens.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: (1, 8),
            cols: (1, 6),
            width: 80,
            height: 80,
            content: ContentMode::Marker,
            fill_prob: 0.9,
            vrule_prob: 0.5,
            hline_prob: 0.5,
            max_digits: 3,
            task: Task::Tsr,
            max_seq_len: Task::Tsr.default_max_seq_len(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (r0, r1) = self.rows;
        let (c0, c1) = self.cols;
        if r0 == 0 || c0 == 0 || r0 > r1 || c0 > c1 {
            return bad(format!("row range {r0}..={r1} and column range {c0}..={c1} must be positive and ordered"));
        }
        if self.width < 2 * MARGIN + 1 || self.height < 2 * MARGIN + 1 {
            return bad("canvas too small".into());
        }
        let cw = (self.width - 2 * MARGIN) / c1;
        let rh = (self.height - 2 * MARGIN) / r1;
        if cw < MIN_CELL_W || rh < MIN_CELL_H {
            return bad(format!(
                "{}x{} canvas gives {cw}x{rh} cells at {r1} rows by {c1} columns; need at least {MIN_CELL_W}x{MIN_CELL_H}",
                self.width, self.height
            ));
        }
        if self.content == ContentMode::Digits && (self.max_digits == 0 || rh < GLYPH_H + 1) {
            return bad("digit content needs max_digits >= 1 and rows at least 8 pixels high".into());
        }
        for (name, p) in [("fill_prob", self.fill_prob), ("vrule_prob", self.vrule_prob), ("hline_prob", self.hline_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        // Shortest possible label must fit, otherwise rejection never ends.
        let min_len = 4 + c0 + r0 * (2 * c0);
        if min_len > self.max_seq_len {
            return bad(format!("smallest table needs {min_len} tokens, max_seq_len is {}", self.max_seq_len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    Left,
    Center,
    Right,
}

impl Align {
    pub fn token(self) -> &'static str {
        match self {
            Align::Left => "l",
            Align::Center => "c",
            Align::Right => "r",
        }
    }
}

/// Drawn table layout, kept with each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMeta {
    pub rows: usize,
    pub cols: usize,
    pub aligns: Vec<Align>,
    /// `cols + 1` flags, left edge first.
    pub vrules: Vec<bool>,
    /// `rows + 1` flags, top edge first.
    pub hlines: Vec<bool>,
    /// Row-major cell text; empty for blank cells.
    pub cells: Vec<String>,
    /// Rejected draws before this one.
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableSample {
    pub id: String,
    pub image: ImageTensor,
    pub label: String,
    pub meta: TableMeta,
}

fn draw_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TableMeta {
    let rows = rng.random_range(cfg.rows.0..=cfg.rows.1);
    let cols = rng.random_range(cfg.cols.0..=cfg.cols.1);
    let aligns = (0..cols)
        .map(|_| match rng.random_range(0..3) {
            0 => Align::Left,
            1 => Align::Center,
            _ => Align::Right,
        })
        .collect();
    let vrules = (0..=cols).map(|_| rng.random_bool(cfg.vrule_prob)).collect();
    let hlines = (0..=rows).map(|_| rng.random_bool(cfg.hline_prob)).collect();
    let cw = (cfg.width - 2 * MARGIN) / cols;
    let fit = ((cw.saturating_sub(4)) / (GLYPH_W + 1)).clamp(1, cfg.max_digits.max(1));
    let cells = (0..rows * cols)
        .map(|_| {
            if !rng.random_bool(cfg.fill_prob) {
                return String::new();
            }
            match cfg.content {
                ContentMode::Marker => String::from(CELL),
                ContentMode::Digits => {
                    let n = rng.random_range(1..=fit);
                    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
                }
            }
        })
        .collect();
    TableMeta { rows, cols, aligns, vrules, hlines, cells, attempts: 0 }
}

/// Token label for a layout.
pub fn label_tokens(meta: &TableMeta, task: Task) -> Vec<String> {
    let mut t: Vec<String> = vec![BEGIN_TABULAR.into(), "{".into()];
    for c in 0..meta.cols {
        if meta.vrules[c] {
            t.push("|".into());
        }
        t.push(meta.aligns[c].token().into());
    }
    if meta.vrules[meta.cols] {
        t.push("|".into());
    }
    t.push("}".into());
    for r in 0..meta.rows {
        if meta.hlines[r] {
            t.push(HLINE.into());
        }
        for c in 0..meta.cols {
            if c > 0 {
                t.push("&".into());
            }
            let cell = &meta.cells[r * meta.cols + c];
            if cell.is_empty() {
                continue;
            }
            match task {
                Task::Tsr => t.push(CELL.into()),
                Task::Tcr if cell == CELL => t.push(CELL.into()),
                Task::Tcr => t.extend(cell.chars().map(String::from)),
            }
        }
        t.push(ROW_SEPARATOR.into());
    }
    if meta.hlines[meta.rows] {
        t.push(HLINE.into());
    }
    t.push(END_TABULAR.into());
    t
}

/// Body length limit check: the label must fit in `max_seq_len` tokens.
fn fits(meta: &TableMeta, cfg: &SynthConfig) -> bool {
    label_tokens(meta, cfg.task).len() <= cfg.max_seq_len
}

fn fill_rect(img: &mut ImageTensor, x0: usize, y0: usize, w: usize, h: usize) {
    let (iw, ih) = (img.width(), img.height());
    for y in y0..(y0 + h).min(ih) {
        for x in x0..(x0 + w).min(iw) {
            img.set(0, y, x, 0.0);
        }
    }
}

fn render(meta: &TableMeta, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut img = ImageTensor::filled(1, cfg.height, cfg.width, 1.0);
    let cw = (cfg.width - 2 * MARGIN) / meta.cols;
    let rh = (cfg.height - 2 * MARGIN) / meta.rows;
    let (tw, th) = (cw * meta.cols, rh * meta.rows);
    // Center the grid on the canvas.
    let x0 = (cfg.width - tw) / 2;
    let y0 = (cfg.height - th) / 2;
    for (c, &on) in meta.vrules.iter().enumerate() {
        if on {
            let x = (x0 + c * cw).min(x0 + tw - 1);
            fill_rect(&mut img, x, y0, 1, th);
        }
    }
    for (r, &on) in meta.hlines.iter().enumerate() {
        if on {
            let y = (y0 + r * rh).min(y0 + th - 1);
            fill_rect(&mut img, x0, y, tw, 1);
        }
    }
    let pad = 2;
    for r in 0..meta.rows {
        for c in 0..meta.cols {
            let cell = &meta.cells[r * meta.cols + c];
            if cell.is_empty() {
                continue;
            }
            let (cx, cy) = (x0 + c * cw, y0 + r * rh);
            let inner = cw - 2 * pad;
            let (content_w, content_h) = if cell == CELL {
                let w = rng.random_range(3..=(inner / 2).max(3));
                (w, 3.min(rh - 2))
            } else {
                (cell.len() * (GLYPH_W + 1) - 1, GLYPH_H)
            };
            let content_w = content_w.min(inner);
            let x = match meta.aligns[c] {
                Align::Left => cx + pad,
                Align::Center => cx + (cw - content_w) / 2,
                Align::Right => cx + cw - pad - content_w,
            };
            let y = cy + (rh - content_h) / 2;
            if cell == CELL {
                fill_rect(&mut img, x, y, content_w, content_h);
            } else {
                for (k, ch) in cell.bytes().enumerate() {
                    let glyph = &DIGITS[usize::from(ch - b'0')];
                    for (gy, bits) in glyph.iter().enumerate() {
                        for gx in 0..GLYPH_W {
                            if bits & (1 << (GLYPH_W - 1 - gx)) != 0 {
                                fill_rect(&mut img, x + k * (GLYPH_W + 1) + gx, y + gy, 1, 1);
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// Sample number `index` of the stream defined by `cfg`.
pub fn generate_one(cfg: &SynthConfig, index: u64) -> Result<TableSample> {
    cfg.validate()?;
    let mut rng = rng_from(derive_indexed(cfg.seed, "synth", index));
    let mut attempts = 0;
    let mut meta = loop {
        let meta = draw_layout(cfg, &mut rng);
        if fits(&meta, cfg) {
            break meta;
        }
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("synthetic labels keep exceeding max_seq_len".into()));
        }
    };
    meta.attempts = attempts;
    let image = render(&meta, cfg, &mut rng);
    let label = label_tokens(&meta, cfg.task).join(" ");
    Ok(TableSample { id: format!("{index:06}"), image, label, meta })
}

/// Samples `start..start + n`.
pub fn generate_range(cfg: &SynthConfig, start: u64, n: usize) -> Result<Vec<TableSample>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    (start..start + n as u64).map(|i| generate_one(cfg, i)).collect()
}

pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<TableSample>> {
    generate_range(cfg, 0, n)
}
