//! JSON Lines scene files. Line 0 is a header naming the world the scenes
//! came from; every further line is one scene.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synth_data::{GtObject, SceneSample, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub world_hash: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub num_categories: usize,
}

impl DatasetHeader {
    pub fn for_world(world: &WorldSpec) -> Self {
        DatasetHeader {
            world_hash: world_hash(world),
            h: world.height,
            w: world.width,
            c: world.channels,
            num_categories: world.num_categories(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    cat: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_type: usize,
    grid: Vec<f64>,
    gt: Vec<GtLine>,
}

/// SHA-256 of the world's JSON form, hex encoded.
pub fn world_hash(world: &WorldSpec) -> String {
    let json = serde_json::to_vec(world).expect("world serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn save_dataset(path: &Path, world: &WorldSpec, samples: &[SceneSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &DatasetHeader::for_world(world))?;
    out.write_all(b"\n").map_err(io)?;
    for s in samples {
        let line = SceneLine {
            scene_type: s.scene_type,
            grid: s.grid.clone(),
            gt: s
                .gt
                .iter()
                .map(|g| GtLine {
                    cx: g.bbox.cx,
                    cy: g.bbox.cy,
                    w: g.bbox.w,
                    h: g.bbox.h,
                    cat: g.category,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a dataset, checking every scene against the header's dimensions.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, reason: String| Error::Dataset { line, reason };
    let header: DatasetHeader = match lines.next() {
        Some(l) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| bad(1, format!("bad header: {e}")))?
        }
        None => return Err(bad(1, "empty file, expected a header".into())),
    };
    let mut samples = Vec::new();
    for (k, l) in lines.enumerate() {
        let n = k + 2;
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let s: SceneLine = serde_json::from_str(&l).map_err(|e| bad(n, e.to_string()))?;
        if s.grid.len() != header.h * header.w * header.c {
            return Err(bad(n, format!("grid has {} values, expected {}", s.grid.len(), header.h * header.w * header.c)));
        }
        let mut gt = Vec::with_capacity(s.gt.len());
        for g in s.gt {
            if g.cat >= header.num_categories {
                return Err(bad(n, format!("category {} out of range", g.cat)));
            }
            if !(g.w > 0.0 && g.h > 0.0) {
                return Err(bad(n, format!("box size must be positive, got {}x{}", g.w, g.h)));
            }
            gt.push(GtObject {
                bbox: BBox::new(g.cx, g.cy, g.w, g.h),
                category: g.cat,
            });
        }
        samples.push(SceneSample {
            height: header.h,
            width: header.w,
            channels: header.c,
            grid: s.grid,
            scene_type: s.scene_type,
            gt,
        });
    }
    Ok((header, samples))
}

/// Compares a dataset header with the configured world. Differing shapes are
/// always an error. A differing hash alone is an error unless
/// `allow_mismatch`, in which case the warning text is returned.
pub fn check_header(header: &DatasetHeader, world: &WorldSpec, allow_mismatch: bool) -> Result<Option<String>> {
    let want = DatasetHeader::for_world(world);
    if (header.h, header.w, header.c, header.num_categories) != (want.h, want.w, want.c, want.num_categories) {
        return Err(Error::Config(format!(
            "dataset is {}x{}x{} with {} categories, world is {}x{}x{} with {}",
            header.h, header.w, header.c, header.num_categories, want.h, want.w, want.c, want.num_categories
        )));
    }
    if header.world_hash == want.world_hash {
        return Ok(None);
    }
    let msg = format!(
        "dataset world hash {} differs from configured world {}",
        header.world_hash, want.world_hash
    );
    if allow_mismatch {
        Ok(Some(msg))
    } else {
        Err(Error::Config(format!("{msg}; pass --allow-world-mismatch to proceed")))
    }
}
