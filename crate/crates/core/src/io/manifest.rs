use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::data::{ImageSet, Normalization};
use crate::error::{Error, Result};
use crate::io::image::load_image;
use crate::io::write_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?} (expected train, query or gallery)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// As written in the file.
    pub path: String,
    /// Resolved against the manifest's directory.
    pub resolved: PathBuf,
    pub pid: i64,
    pub camid: i64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    pid: i64,
    camid: i64,
    split: String,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,pid,camid,split\n");
        for r in &self.rows {
            s += &format!("{},{},{},{}\n", r.path, r.pid, r.camid, r.split);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    /// Decodes every image of `split`, resized to `hw`, in manifest order.
    pub fn load_images(&self, split: Split, hw: [usize; 2]) -> Result<ImageSet> {
        let mut set = ImageSet::default();
        for r in self.split(split) {
            set.push(load_image(&r.resolved, hw)?, r.pid, r.camid);
        }
        Ok(set)
    }

    pub fn paths(&self, split: Split) -> Vec<String> {
        self.split(split).iter().map(|r| r.path.clone()).collect()
    }
}

/// Parses a `path,pid,camid,split` CSV. Relative image paths resolve
/// against the manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let want = ["path", "pid", "camid", "split"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(parse_err(1, format!("header must be {}", want.join(","))));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let raw: RawRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let split: Split = raw.split.parse().map_err(|m| parse_err(line, m))?;
        if raw.pid < 0 && split != Split::Gallery {
            return Err(parse_err(line, format!("junk pid {} allowed only in gallery", raw.pid)));
        }
        if !seen.insert(raw.path.clone()) {
            return Err(parse_err(line, format!("duplicate path {}", raw.path)));
        }
        let resolved = base.join(&raw.path);
        if !resolved.exists() {
            return Err(parse_err(line, format!("image {} does not exist", resolved.display())));
        }
        rows.push(ManifestRow {
            path: raw.path,
            resolved,
            pid: raw.pid,
            camid: raw.camid,
            split,
        });
    }
    Ok(Manifest { rows })
}

/// Normalized `N×3×H×W` batch for rows of one split.
pub fn load_split_batch(
    m: &Manifest,
    split: Split,
    hw: [usize; 2],
    norm: &Normalization,
) -> Result<(ImageSet, crate::Tensor)> {
    let set = m.load_images(split, hw)?;
    if set.is_empty() {
        return Err(Error::invalid("manifest", format!("split {split} is empty")));
    }
    let batch = set.normalized_batch(norm)?;
    Ok((set, batch))
}
