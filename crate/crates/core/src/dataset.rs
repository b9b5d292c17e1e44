//! Labeled vector datasets and their on-disk formats.
//!
//! Binary layout: a UTF-8 header
//!
//! ```text
//! ACTDATA 1
//! n <count>
//! d <dim>
//! k <classes>
//! has_labels <0|1>
//! ---
//! ```
//!
//! followed by `n·d` little-endian `f64` values in row-major order and, when
//! labelled, `n` little-endian `u32` labels in `1..=K`. Labels are 0-based in
//! memory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{ActError, Result};

const MAGIC: &str = "ACTDATA 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, points: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.len() != dim) {
            return Err(ActError::Shape(format!("point {i} has dimension {}, expected {dim}", points[i].len())));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ActError::NonFinite("dataset contains a non-finite coordinate".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(ActError::Shape(format!("{} labels for {} points", labels.len(), points.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(ActError::InvalidArgument(format!("label {} outside 1..={num_classes}", bad + 1)));
            }
        }
        Ok(Self { dim, num_classes, points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| ActError::InvalidArgument("dataset has no labels".into()))
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for &y in self.require_labels()? {
            counts[y] += 1;
        }
        Ok(counts)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "n {}", self.len())?;
        writeln!(w, "d {}", self.dim)?;
        writeln!(w, "k {}", self.num_classes)?;
        writeln!(w, "has_labels {}", u8::from(self.labels.is_some()))?;
        writeln!(w, "---")?;
        for x in self.points.iter().flatten() {
            w.write_all(&x.to_le_bytes())?;
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                let y = u32::try_from(y + 1).map_err(|_| ActError::Format("label too large".into()))?;
                w.write_all(&y.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(ActError::Format("dataset header is truncated".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(ActError::Format("not an ACTDATA file".into()));
        }
        let mut field = |r: &mut R, key: &str| -> Result<usize> {
            let l = next_line(r)?;
            l.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ActError::Format(format!("expected `{key} <int>`, got `{l}`")))
        };
        let n = field(&mut r, "n")?;
        let d = field(&mut r, "d")?;
        let k = field(&mut r, "k")?;
        let has_labels = match field(&mut r, "has_labels")? {
            0 => false,
            1 => true,
            other => return Err(ActError::Format(format!("has_labels must be 0 or 1, got {other}"))),
        };
        if next_line(&mut r)? != "---" {
            return Err(ActError::Format("missing header terminator".into()));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected = n * d * 8 + if has_labels { n * 4 } else { 0 };
        if body.len() != expected {
            return Err(ActError::Format(format!("body is {} bytes, expected {expected}", body.len())));
        }
        let (coords, label_bytes) = body.split_at(n * d * 8);
        let values: Vec<f64> = coords
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let points = if d == 0 { vec![Vec::new(); n] } else { values.chunks(d).map(<[f64]>::to_vec).collect() };
        let labels = if has_labels {
            let labels = label_bytes
                .chunks_exact(4)
                .map(|c| {
                    let y = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
                    y.checked_sub(1).ok_or_else(|| ActError::Format("labels are 1-based".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        } else {
            None
        };
        Dataset::new(d, k, points, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Header `x1,…,xd[,label]`, one row per point, labels 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|x| format!("{x:?}")).collect();
            if let Some(labels) = &self.labels {
                row.push((labels[i] + 1).to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV layout of [`write_csv`](Self::write_csv). Without
    /// `num_classes` the class count is the largest label.
    pub fn read_csv<R: BufRead>(r: R, num_classes: Option<usize>) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| ActError::Format("empty CSV".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let has_labels = cols.last() == Some(&"label");
        let dim = cols.len() - usize::from(has_labels);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(ActError::Format(format!("CSV row {} has {} fields, expected {}", i + 2, fields.len(), cols.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| ActError::Format(format!("CSV row {}: bad number `{s}`", i + 2)));
            points.push(fields[..dim].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
            if has_labels {
                let y: usize = fields[dim]
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&y| y >= 1)
                    .ok_or_else(|| ActError::Format(format!("CSV row {}: bad label `{}`", i + 2, fields[dim])))?;
                labels.push(y - 1);
            }
        }
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(dim, k, points, has_labels.then_some(labels))
    }
}
