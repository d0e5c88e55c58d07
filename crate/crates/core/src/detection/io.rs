//! Comma-separated record files.
//!
//! * proposals: `image_id,x0,y0,x1,y1`
//! * ground truth: `image_id,class_id,x0,y0,x1,y1`
//! * detections: `image_id,class_id,score,x0,y0,x1,y1` with the score at 6 decimals
//!
//! Coordinates are integer pixels of the original image. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::{Detection, GroundTruth, Proposal};
use crate::error::{Error, Result};
use crate::geometry::WindowRect;

fn records<'a>(text: &'a str, source: &'a str, arity: usize) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(move |(i, l)| {
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() != arity {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    reason: format!("expected {arity} fields, found {}", fields.len()),
                });
            }
            Ok((i + 1, fields))
        })
}

fn field<T: std::str::FromStr>(v: &str, source: &str, line: usize, name: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        path: source.to_string(),
        line,
        reason: format!("bad {name} `{v}`"),
    })
}

fn rect(f: &[&str], source: &str, line: usize) -> Result<WindowRect> {
    let r = WindowRect::new(
        field(f[0], source, line, "x0")?,
        field(f[1], source, line, "y0")?,
        field(f[2], source, line, "x1")?,
        field(f[3], source, line, "y1")?,
    );
    r.validate().map_err(|e| Error::Parse {
        path: source.to_string(),
        line,
        reason: e.to_string(),
    })?;
    Ok(r)
}

pub fn parse_proposals(text: &str, source: &str) -> Result<Vec<Proposal>> {
    records(text, source, 5)
        .map(|r| {
            let (line, f) = r?;
            Ok(Proposal {
                image_id: field(f[0], source, line, "image_id")?,
                rect: rect(&f[1..], source, line)?,
            })
        })
        .collect()
}

pub fn parse_ground_truth(text: &str, source: &str) -> Result<Vec<GroundTruth>> {
    records(text, source, 6)
        .map(|r| {
            let (line, f) = r?;
            Ok(GroundTruth {
                image_id: field(f[0], source, line, "image_id")?,
                class_id: field(f[1], source, line, "class_id")?,
                rect: rect(&f[2..], source, line)?,
            })
        })
        .collect()
}

pub fn parse_detections(text: &str, source: &str) -> Result<Vec<Detection>> {
    records(text, source, 7)
        .map(|r| {
            let (line, f) = r?;
            let score: f64 = field(f[2], source, line, "score")?;
            if !score.is_finite() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    reason: "score must be finite".into(),
                });
            }
            Ok(Detection {
                image_id: field(f[0], source, line, "image_id")?,
                class_id: field(f[1], source, line, "class_id")?,
                score,
                rect: rect(&f[3..], source, line)?,
            })
        })
        .collect()
}

pub fn format_proposals(props: &[Proposal]) -> String {
    let mut s = String::new();
    for p in props {
        let r = p.rect;
        let _ = writeln!(s, "{},{},{},{},{}", p.image_id, r.x0, r.y0, r.x1, r.y1);
    }
    s
}

pub fn format_ground_truth(gt: &[GroundTruth]) -> String {
    let mut s = String::new();
    for g in gt {
        let r = g.rect;
        let _ = writeln!(s, "{},{},{},{},{},{}", g.image_id, g.class_id, r.x0, r.y0, r.x1, r.y1);
    }
    s
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let r = d.rect;
        let _ = writeln!(s, "{},{},{:.6},{},{},{},{}", d.image_id, d.class_id, d.score, r.x0, r.y0, r.x1, r.y1);
    }
    s
}

pub fn read_proposals(path: &Path) -> Result<Vec<Proposal>> {
    parse_proposals(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    parse_ground_truth(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    crate::write_atomic(path, format_detections(dets).as_bytes())
}
