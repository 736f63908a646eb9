//! CSV files with `#` metadata rows, and line charts drawn from them.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Key-value pairs written as `# key=value` before the column header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(pub Vec<(String, String)>);

impl Meta {
    pub fn new() -> Self {
        Meta::default()
    }

    pub fn with(mut self, k: &str, v: impl ToString) -> Self {
        self.0.push((k.to_string(), v.to_string()));
        self
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
    }
}

/// A CSV table with a fixed column list.
pub struct Table<W: Write> {
    out: csv::Writer<W>,
    width: usize,
}

impl<W: Write> Table<W> {
    pub fn new(mut w: W, schema: &str, meta: &Meta, columns: &[String]) -> Result<Self> {
        writeln!(w, "# schema={schema}/{SCHEMA_VERSION}")?;
        for (k, v) in &meta.0 {
            writeln!(w, "# {k}={v}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(columns).map_err(csv_err)?;
        Ok(Table {
            out,
            width: columns.len(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.width {
            return Err(Error::Contract(format!("row has {} fields, table has {}", fields.len(), self.width)));
        }
        self.out.write_record(fields).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

impl Table<BufWriter<File>> {
    pub fn create(path: &Path, schema: &str, meta: &Meta, columns: &[String]) -> Result<Self> {
        Table::new(BufWriter::new(File::create(path)?), schema, meta, columns)
    }
}

pub fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// A parsed CSV: metadata, header and string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub meta: Meta,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedCsv {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Column `name` parsed as numbers; empty cells are skipped.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .column(name)
            .ok_or_else(|| Error::Usage(format!("no column {name:?}")))?;
        self.rows
            .iter()
            .filter(|r| !r[i].is_empty())
            .map(|r| {
                r[i].parse::<f64>()
                    .map_err(|_| Error::Usage(format!("column {name:?} holds {:?}", r[i])))
            })
            .collect()
    }
}

pub fn read_csv(text: &str) -> Result<ParsedCsv> {
    let mut meta = Meta::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            meta.0.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok(ParsedCsv { meta, header, rows })
}

pub fn num(v: f64) -> String {
    v.to_string()
}

/// One curve of a chart, optionally with a symmetric error band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub err: Option<Vec<f64>>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Stacked line charts sharing an x axis, as a standalone SVG document.
pub fn line_charts(title: &str, xlabel: &str, panels: &[(&str, Vec<Series>)]) -> String {
    let (w, ph, pad_l, pad_r, pad_t, pad_b) = (640.0, 220.0, 64.0, 140.0, 36.0, 40.0);
    let h = pad_t + panels.len() as f64 * (ph + pad_b) + 8.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, esc(title));
    for (pi, (ylabel, series)) in panels.iter().enumerate() {
        let top = pad_t + pi as f64 * (ph + pad_b);
        let pw = w - pad_l - pad_r;
        let pts = series.iter().flat_map(|se| {
            se.points.iter().enumerate().flat_map(move |(i, (x, y))| {
                let e = se.err.as_ref().map_or(0.0, |e| e[i]);
                [(*x, y - e), (*x, y + e)]
            })
        });
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            continue;
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| pad_l + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(
            s,
            r##"<rect x="{pad_l}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for k in 0..=4 {
            let yv = y0 + (y1 - y0) * k as f64 / 4.0;
            let xv = x0 + (x1 - x0) * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad_l - 4.0, sy(yv) + 4.0, tick(yv));
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), top + ph + 14.0, tick(xv));
        }
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            esc(ylabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            pad_l + pw / 2.0,
            top + ph + 30.0,
            esc(xlabel)
        );
        for (si, se) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            if let Some(err) = &se.err {
                for ((x, y), e) in se.points.iter().zip(err) {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{0}" x2="{0}" y1="{1}" y2="{2}" stroke="{color}" stroke-opacity="0.5"/>"#,
                        sx(*x),
                        sy(y - e),
                        sy(y + e)
                    );
                }
            }
            let path: Vec<String> = se
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
                path.join(" ")
            );
            let ly = top + 14.0 + 16.0 * si as f64;
            let lx = w - pad_r + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                esc(&se.name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
