use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_image, write_image, DatasetSplits, IdentitySpec, Jitter, Split, ViewRender};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IDENTITIES_FILE: &str = "identities.json";

/// One manifest line. `path` is relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub identity: usize,
    pub camera: usize,
    pub view: usize,
    pub path: String,
    pub jitter: Jitter,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    disjoint_train: bool,
    identities: Vec<IdentitySpec>,
}

pub fn image_rel_path(split: Split, identity: usize, view: usize) -> String {
    format!("{}/id{identity:03}_v{view:02}.ppm", split.as_str())
}

/// Writes every render as a P6 file plus `manifest.jsonl` and
/// `identities.json` under `dir`.
pub fn write_dataset(dir: &Path, data: &DatasetSplits) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for v in data.split(split) {
            let rel = image_rel_path(split, v.identity_id, v.view);
            write_image(&dir.join(&rel), &v.image)?;
            entries.push(ManifestEntry {
                split,
                identity: v.identity_id,
                camera: v.camera_id,
                view: v.view,
                path: rel,
                jitter: v.jitter,
            });
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for e in &entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let meta = DatasetMeta {
        disjoint_train: data.disjoint_train,
        identities: data.identities.clone(),
    };
    let meta_path = dir.join(IDENTITIES_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let f = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.clone(),
            what: "dataset manifest".into(),
        },
        _ => Error::io(&path, e),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads a dataset written by [`write_dataset`]. Images come back quantised
/// to 8 bits.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplits> {
    let entries = read_manifest(dir)?;
    let meta_path = dir.join(IDENTITIES_FILE);
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let mut out = DatasetSplits {
        identities: meta.identities,
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        disjoint_train: meta.disjoint_train,
    };
    for e in entries {
        let p: PathBuf = dir.join(&e.path);
        let vr = ViewRender {
            identity_id: e.identity,
            camera_id: e.camera,
            view: e.view,
            image: read_image(&p)?,
            jitter: e.jitter,
        };
        match e.split {
            Split::Train => out.train.push(vr),
            Split::Query => out.query.push(vr),
            Split::Gallery => out.gallery.push(vr),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_dataset;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(4, 3, (16, 8), 2).unwrap();
        let entries = write_dataset(dir.path(), &d).unwrap();
        assert_eq!(entries.len(), 12);
        let first = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["split", "identity", "camera", "path"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.identities, d.identities);
        for s in Split::ALL {
            assert_eq!(back.split(s).len(), d.split(s).len());
            for (a, b) in back.split(s).iter().zip(d.split(s)) {
                assert_eq!(
                    (a.identity_id, a.camera_id, a.view),
                    (b.identity_id, b.camera_id, b.view)
                );
                assert!(a.image.max_abs_diff(&b.image).unwrap() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingArtifact { .. })));
    }
}
