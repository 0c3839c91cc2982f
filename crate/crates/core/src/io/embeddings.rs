//! Descriptor dumps: the tensor file plus a `<file>.csv` sidecar of
//! `path,pid,camid` rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EmbeddingSet;
use crate::io::{read_file, write_file};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    pid: i64,
    camid: i64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    s.into()
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    write_file(path, &set.descriptors.to_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..set.len() {
        w.serialize(Row {
            path: set.paths[i].clone(),
            pid: set.pids[i],
            camid: set.camids[i],
        })
        .map_err(|e| Error::invalid("write_embeddings", e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid("write_embeddings", e.to_string()))?;
    write_file(&sidecar_path(path), &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = read_file(path)?;
    let descriptors = Tensor::read_from(&mut bytes.as_slice()).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = read_file(&side)?;
    let mut reader = csv::Reader::from_reader(text.as_slice());
    let (mut paths, mut pids, mut camids) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: side.clone(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        paths.push(row.path);
        pids.push(row.pid);
        camids.push(row.camid);
    }
    EmbeddingSet::new(descriptors, pids, camids, paths)
}
