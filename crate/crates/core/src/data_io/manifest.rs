//! Tab-separated dataset manifests: `id<TAB>image<TAB>mask`, one line each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{pnm, BinaryMask, ImageSample};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Resolved against the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and the manifest under `dir`.
/// Returns the manifest path.
pub fn write_manifest(samples: &[ImageSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut text = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::Input(format!(
                "sample id {:?} cannot be used as a file name",
                s.id
            )));
        }
        let image = format!("images/{}.ppm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        pnm::write_ppm(dir.join(&image), &s.image)?;
        pnm::write_pgm(dir.join(&mask), &s.mask.to_tensor())?;
        writeln!(text, "{}\t{image}\t{mask}", s.id).expect("writing to a String");
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses a manifest and checks every referenced file exists. Missing files
/// are reported together as [`Error::MissingData`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let line_start = offset;
        offset += line.len();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                offset: line_start,
                detail: format!("{}: expected id<TAB>image<TAB>mask", path.display()),
            });
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            image: base.join(fields[1]),
            mask: base.join(fields[2]),
        });
    }
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !e.image.is_file() || !e.mask.is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingData(missing));
    }
    Ok(entries)
}

pub fn load_samples(entries: &[ManifestEntry]) -> Result<Vec<ImageSample>> {
    entries
        .iter()
        .map(|e| {
            let image = pnm::read_ppm(&e.image)?;
            let mask_map = pnm::read_pgm(&e.mask)?;
            if let Some(v) = mask_map.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Input(format!(
                    "{}: mask {} holds non-binary value {}",
                    e.id,
                    e.mask.display(),
                    pnm::quantize(*v)
                )));
            }
            let mask = BinaryMask::from_tensor(&mask_map, 0.5)?;
            ImageSample::new(e.id.clone(), image, mask)
        })
        .collect()
}
