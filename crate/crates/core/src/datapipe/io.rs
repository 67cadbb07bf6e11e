//! Proposals file (one JSON record per line) and image-directory ingestion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::proposals::ProposalSet;

#[derive(Serialize, Deserialize)]
struct Record {
    image_id: String,
    width: usize,
    height: usize,
    boxes: Vec<Vec<f64>>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn save_proposals<'a>(sets: impl IntoIterator<Item = &'a ProposalSet>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for set in sets {
        let record = Record {
            image_id: set.image_id.clone(),
            width: set.image_w,
            height: set.image_h,
            boxes: set
                .proposals
                .iter()
                .map(|p| vec![round2(p.bbox.x), round2(p.bbox.y), round2(p.bbox.w), round2(p.bbox.h)])
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serialises");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a proposals file. Object ids are list positions; unknown keys are
/// ignored.
pub fn load_proposals(path: impl AsRef<Path>) -> Result<BTreeMap<String, ProposalSet>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for (j, b) in record.boxes.iter().enumerate() {
            if b.len() != 4 {
                return Err(parse_err(format!("box {j} has {} values, expected 4", b.len())));
            }
            let bbox = BBox::try_new(b[0], b[1], b[2], b[3]).map_err(|e| parse_err(format!("box {j}: {e}")))?;
            boxes.push(bbox);
        }
        let set = ProposalSet::from_boxes(record.image_id.clone(), record.width, record.height, boxes);
        sets.insert(record.image_id, set);
    }
    Ok(sets)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Raster files directly inside `dir`, sorted by file name. The file name is
/// the image id.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let id = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}
