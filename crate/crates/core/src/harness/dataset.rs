//! Tabular datasets and their delimited-text file format.
//!
//! ```text
//! mesh-dataset,<feature count>,<class count>
//! f_0,...,f_{d-1},label,domain,split,truth
//! ...
//! ```
//!
//! `label` is the visible class or `-1` for unlabeled rows. `truth` is the
//! hidden ground truth kept for scoring only (`-1` when unknown). Floats are
//! written with 17 significant digits, so a save/load round trip is exact.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "mesh-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(format!("unknown domain tag {s:?}")),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split tag {s:?}")),
        }
    }
}

/// Feature rows with visible labels, hidden ground truth and tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// Visible label per row, `-1` when unlabeled.
    pub labels: Vec<i64>,
    /// Ground truth per row, `-1` when unknown. Never handed to the trainer.
    pub truth: Vec<i64>,
    pub domains: Vec<Domain>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks lengths and label ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if [
            self.labels.len(),
            self.truth.len(),
            self.domains.len(),
            self.splits.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Data("dataset columns have different lengths".into()));
        }
        let k = self.num_classes as i64;
        for (i, (&l, &t)) in self.labels.iter().zip(&self.truth).enumerate() {
            if l < -1 || l >= k || t < -1 || t >= k {
                return Err(Error::Data(format!(
                    "row {i}: label {l} / truth {t} outside [-1, {k})"
                )));
            }
        }
        if !self.features.all_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Rows at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            truth: idx.iter().map(|&i| self.truth[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(&self.indices_of(split))
    }

    /// Ground truth for scoring: the visible label when present, the hidden
    /// truth otherwise.
    pub fn scoring_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.truth)
            .enumerate()
            .map(|(i, (&l, &t))| {
                let y = if l >= 0 { l } else { t };
                usize::try_from(y)
                    .map_err(|_| Error::Data(format!("row {i} has no ground truth to score")))
            })
            .collect()
    }

    /// Serialises to the text format described in the module docs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC},{},{}", self.dim(), self.num_classes);
        for i in 0..self.len() {
            for v in self.features.row(i) {
                let _ = write!(s, "{v:.16e},");
            }
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.labels[i], self.domains[i], self.splits[i], self.truth[i]
            );
        }
        s
    }

    /// Parses the text format. Errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (dim, num_classes) = loop {
            match lines.next() {
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: "missing header".into(),
                    })
                }
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((n, l)) => break parse_header(n, l)?,
            }
        };

        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut truth = Vec::new();
        let mut domains = Vec::new();
        let mut splits = Vec::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 4 {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("expected {} fields, found {}", dim + 4, fields.len()),
                });
            }
            for f in &fields[..dim] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: n,
                    msg: format!("bad feature value {f:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("non-finite feature value {f:?}"),
                    });
                }
                data.push(v);
            }
            let class = |f: &str, what: &str| -> Result<i64> {
                let v: i64 = f.parse().map_err(|_| Error::Parse {
                    line: n,
                    msg: format!("bad {what} {f:?}"),
                })?;
                if v < -1 || v >= num_classes as i64 {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("{what} {v} outside [-1, {num_classes})"),
                    });
                }
                Ok(v)
            };
            labels.push(class(fields[dim], "label")?);
            domains.push(
                fields[dim + 1]
                    .parse()
                    .map_err(|msg| Error::Parse { line: n, msg })?,
            );
            splits.push(
                fields[dim + 2]
                    .parse()
                    .map_err(|msg| Error::Parse { line: n, msg })?,
            );
            truth.push(class(fields[dim + 3], "truth")?);
        }
        let rows = labels.len();
        Ok(Dataset {
            features: Matrix::from_vec(rows, dim, data)?,
            labels,
            truth,
            domains,
            splits,
            num_classes,
        })
    }
}

fn parse_header(line_no: usize, line: &str) -> Result<(usize, usize)> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 3 || fields[0] != MAGIC {
        return Err(err(format!(
            "missing header: expected `{MAGIC},<features>,<classes>`"
        )));
    }
    let dim: usize = fields[1]
        .parse()
        .map_err(|_| err(format!("bad feature count {:?}", fields[1])))?;
    let k: usize = fields[2]
        .parse()
        .map_err(|_| err(format!("bad class count {:?}", fields[2])))?;
    if dim == 0 || k == 0 {
        return Err(err("feature and class counts must be positive".into()));
    }
    if dim > 1 << 20 || k > 1 << 20 {
        return Err(err("feature or class count too large".into()));
    }
    Ok((dim, k))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::parse(&text)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_text()).map_err(|e| Error::io(path, e))
}
