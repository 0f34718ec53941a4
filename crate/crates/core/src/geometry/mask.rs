use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, GeometryError, Result};

/// Row-major binary mask stored as alternating run lengths, background first.
///
/// The text form is a header line `W H` followed by whitespace-separated run
/// lengths, e.g. `"4 2\n1 2 5"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::from_runs(width, height, vec![width.saturating_mul(height)])
    }

    /// Validates and canonicalizes a run list. Zero-length runs after the
    /// first are folded into their neighbours.
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidInput(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        let total = width as u64 * height as u64;
        if total > u32::MAX as u64 {
            return Err(GeometryError::InvalidInput(format!(
                "mask of {width}x{height} pixels is too large"
            )));
        }
        let sum: u64 = runs.iter().map(|&r| r as u64).sum();
        if sum != total {
            return Err(GeometryError::InvalidInput(format!(
                "run lengths sum to {sum}, expected {total}"
            )));
        }
        // Fold runs keyed by parity so that background/foreground alternation
        // survives zero-length entries.
        let mut canon: Vec<u32> = Vec::with_capacity(runs.len().max(1));
        for (i, &r) in runs.iter().enumerate() {
            let fg = i % 2 == 1;
            let last_fg = canon.len() % 2 == 0;
            if canon.is_empty() {
                canon.push(r);
            } else if r == 0 {
                continue;
            } else if fg == last_fg {
                *canon.last_mut().unwrap() += r;
            } else {
                canon.push(r);
            }
        }
        while canon.len() > 1 && *canon.last().unwrap() == 0 {
            canon.pop();
        }
        Ok(Mask {
            width,
            height,
            runs: canon,
        })
    }

    pub fn from_grid(width: u32, height: u32, grid: &[bool]) -> Result<Self> {
        if grid.len() as u64 != width as u64 * height as u64 {
            return Err(GeometryError::InvalidInput(format!(
                "grid has {} cells, expected {width}x{height}",
                grid.len()
            )));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &cell in grid {
            if cell != current {
                runs.push(len);
                current = cell;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Self::from_runs(width, height, runs)
    }

    pub fn to_grid(&self) -> Vec<bool> {
        let mut grid = Vec::with_capacity(self.pixel_count() as usize);
        for (i, &r) in self.runs.iter().enumerate() {
            grid.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        grid
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn foreground_count(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Foreground spans as half-open `[start, end)` offsets into the
    /// row-major pixel order.
    fn foreground_spans(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Tight pixel-aligned box around the foreground.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let w = self.width as u64;
        let mut bounds: Option<(u64, u64, u64, u64)> = None;
        for (start, end) in self.foreground_spans() {
            let (r0, r1) = (start / w, (end - 1) / w);
            let (c0, c1) = if r0 == r1 {
                (start % w, (end - 1) % w)
            } else {
                (0, w - 1)
            };
            bounds = Some(match bounds {
                None => (c0, r0, c1, r1),
                Some((a, b, c, d)) => (a.min(c0), b.min(r0), c.max(c1), d.max(r1)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| BoundingBox {
            x1: x0 as f64,
            y1: y0 as f64,
            x2: (x1 + 1) as f64,
            y2: (y1 + 1) as f64,
        })
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.width, self.height)?;
        for (i, r) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

impl FromStr for Mask {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| GeometryError::InvalidInput(format!("mask RLE: {msg}"));
        let s = s.trim_start();
        let (header, body) = s.split_once('\n').unwrap_or((s, ""));
        let dims: Vec<&str> = header.split_whitespace().collect();
        if dims.len() != 2 {
            return Err(bad(format!("header must be `W H`, got {header:?}")));
        }
        let parse_u32 = |t: &str| t.parse::<u32>().map_err(|e| bad(format!("{t:?}: {e}")));
        let width = parse_u32(dims[0])?;
        let height = parse_u32(dims[1])?;
        let runs = body
            .split_whitespace()
            .map(parse_u32)
            .collect::<Result<Vec<_>>>()?;
        Mask::from_runs(width, height, runs)
    }
}

impl TryFrom<String> for Mask {
    type Error = GeometryError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mask> for String {
    fn from(m: Mask) -> Self {
        m.to_string()
    }
}

/// Marks every pixel whose center lies in `[x1, x2) x [y1, y2)`, clipped to
/// the image.
pub fn rasterize_box(b: &BoundingBox, width: u32, height: u32) -> Result<Mask> {
    b.validate()?;
    let span = |lo: f64, hi: f64, limit: u32| -> (u64, u64) {
        // pixel i is covered when lo <= i + 0.5 < hi
        let first = (lo - 0.5).ceil().clamp(0.0, limit as f64) as u64;
        let end = (hi - 0.5).ceil().clamp(0.0, limit as f64) as u64;
        (first, end.max(first))
    };
    let (c0, c1) = span(b.x1, b.x2, width);
    let (r0, r1) = span(b.y1, b.y2, height);
    let w = width as u64;
    let mut runs = Vec::new();
    let mut cursor = 0u64;
    if c1 > c0 {
        for row in r0..r1 {
            let start = row * w + c0;
            runs.push((start - cursor) as u32);
            runs.push((c1 - c0) as u32);
            cursor = row * w + c1;
        }
    }
    let total = w * height as u64;
    runs.push((total - cursor) as u32);
    Mask::from_runs(width, height, runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskIou {
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

/// Pixel IoU with the counts needed for cumulative aggregation. Two empty
/// masks have IoU 1 with counts `(0, 0)`.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<MaskIou> {
    if a.width != b.width || a.height != b.height {
        return Err(GeometryError::InvalidInput(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let sa: Vec<(u64, u64)> = a.foreground_spans().collect();
    let sb: Vec<(u64, u64)> = b.foreground_spans().collect();
    let (mut i, mut j) = (0, 0);
    let mut inter = 0u64;
    while i < sa.len() && j < sb.len() {
        let lo = sa[i].0.max(sb[j].0);
        let hi = sa[i].1.min(sb[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if sa[i].1 < sb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = a.foreground_count() + b.foreground_count() - inter;
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok(MaskIou {
        iou,
        intersection: inter,
        union,
    })
}
