//! Metrics CSV, atomic file writes and SVG 1.1 charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const CSV_HEADER: &str = "study,method,step,alpha,k,ce_loss,cka_adapt,cka_pretrain,divergence,seconds,seed";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub study: String,
    pub method: String,
    pub step: Option<u64>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub ce_loss: f64,
    pub cka_adapt: Option<f64>,
    pub cka_pretrain: Option<f64>,
    /// `1 - cka_adapt` when CKA is reported.
    pub divergence: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str, col: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad value {s:?} in column {col}")))
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{}",
            self.study,
            self.method,
            opt(self.step),
            opt(self.alpha),
            opt(self.k),
            self.ce_loss,
            opt(self.cka_adapt),
            opt(self.cka_pretrain),
            opt(self.divergence),
            self.seconds,
            self.seed
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Config(format!("metrics line has {} fields: {line:?}", f.len())));
        }
        let req = |s: &str, col: &str| -> Result<f64> {
            parse_opt(s, col)?.ok_or_else(|| Error::Config(format!("missing {col}")))
        };
        Ok(Self {
            study: f[0].to_string(),
            method: f[1].to_string(),
            step: parse_opt(f[2], "step")?,
            alpha: parse_opt(f[3], "alpha")?,
            k: parse_opt(f[4], "k")?,
            ce_loss: req(f[5], "ce_loss")?,
            cka_adapt: parse_opt(f[6], "cka_adapt")?,
            cka_pretrain: parse_opt(f[7], "cka_pretrain")?,
            divergence: parse_opt(f[8], "divergence")?,
            seconds: req(f[9], "seconds")?,
            seed: parse_opt(f[10], "seed")?.ok_or_else(|| Error::Config("missing seed".into()))?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!("{}: unexpected metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv_line).collect()
}

/// Metrics file that is rewritten atomically after every appended row.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let log = Self {
            path: path.to_path_buf(),
            rows: Vec::new(),
        };
        write_atomic(path, metrics_csv(&[]).as_bytes())?;
        Ok(log)
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        self.rows.push(row);
        write_atomic(&self.path, metrics_csv(&self.rows).as_bytes())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(w: f64, h: f64, title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        esc(title)
    )
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart (or scatter when `lines` is false) with axes, ticks and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], lines: bool) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = header(W, H, title);
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            sx(xv),
            H - PAD + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            PAD - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 14.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if lines && pts.len() > 1 {
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(s, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = PAD + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - PAD - 150.0,
            ly - 9.0,
            W - PAD - 135.0,
            ly,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Grayscale-to-blue heatmap of a row-major `rows x cols` grid in `[lo, hi]`.
pub fn heatmap(title: &str, rows: usize, cols: usize, values: &[f64], lo: f64, hi: f64) -> String {
    let cell = 48.0;
    let (w, h) = (PAD * 2.0 + cell * cols as f64, PAD * 2.0 + cell * rows as f64);
    let mut s = header(w.max(240.0), h, title);
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j];
            let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let (r, g) = ((255.0 * (1.0 - f)) as u8, (255.0 * (1.0 - 0.6 * f)) as u8);
            let (x, y) = (PAD + cell * j as f64, PAD + cell * i as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},255)\" stroke=\"white\"/>\
                 <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{v:.2}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    for j in 0..cols {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{j}</text>",
            PAD + cell * (j as f64 + 0.5),
            PAD - 6.0
        );
    }
    for i in 0..rows {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{i}</text>",
            PAD - 6.0,
            PAD + cell * (i as f64 + 0.5) + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
