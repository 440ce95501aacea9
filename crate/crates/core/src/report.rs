//! Run artifacts: flat config files, line-delimited metrics, result tables
//! and PNG exports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Appends one JSON record per line.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path)?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    /// Percentages; `None` renders as `-`.
    pub values: Vec<Option<f64>>,
}

/// A table of accuracies: one row per model or setting, one column per
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new(title: impl Into<String>, row_header: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            row_header: row_header.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::shape("results row", &[self.columns.len()], &[values.len()]));
        }
        self.rows.push(ResultRow {
            label: label.into(),
            values,
        });
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let cell = |v: &Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut widths = vec![self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([self.row_header.len()])
            .max()
            .unwrap_or(0)];
        for (j, c) in self.columns.iter().enumerate() {
            let w = self.rows.iter().map(|r| cell(&r.values[j]).len()).chain([c.len()]).max().unwrap_or(0);
            widths.push(w);
        }
        let line = |first: &str, rest: Vec<String>| {
            let mut s = format!("{first:<w$}", w = widths[0]);
            for (j, r) in rest.iter().enumerate() {
                s.push_str(&format!("  {r:>w$}", w = widths[j + 1]));
            }
            s
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.row_header, self.columns.clone()));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * self.columns.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(&r.label, r.values.iter().map(cell).collect()));
            out.push('\n');
        }
        out
    }

    /// Write `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `3 x H x W` image in `[0, 1]` as an 8-bit PNG, upscaled by
/// pixel replication.
pub fn save_png(path: &Path, img: ArrayView3<'_, f32>, scale: usize) -> Result<()> {
    save_panel(path, &[img], scale)
}

/// Save images side by side, separated by a 2-pixel white gutter.
pub fn save_panel(path: &Path, imgs: &[ArrayView3<'_, f32>], scale: usize) -> Result<()> {
    let Some(first) = imgs.first() else {
        return Err(Error::Config("empty image panel".into()));
    };
    let (c, h, w) = first.dim();
    if c != 3 && c != 1 {
        return Err(Error::shape("png image channels", &[3], &[c]));
    }
    if imgs.iter().any(|i| i.dim() != (c, h, w)) {
        return Err(Error::Config("panel images must share a shape".into()));
    }
    let scale = scale.max(1);
    let gutter = 2;
    let tile = w * scale;
    let width = imgs.len() * tile + (imgs.len() - 1) * gutter;
    let mut out = RgbImage::from_pixel(width as u32, (h * scale) as u32, Rgb([255, 255, 255]));
    for (k, img) in imgs.iter().enumerate() {
        let x0 = k * (tile + gutter);
        for y in 0..h * scale {
            for x in 0..tile {
                let (sy, sx) = (y / scale, x / scale);
                let px = |ch: usize| to_byte(img[[if c == 1 { 0 } else { ch }, sy, sx]]);
                out.put_pixel((x0 + x) as u32, y as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    out.save(path)?;
    Ok(())
}
