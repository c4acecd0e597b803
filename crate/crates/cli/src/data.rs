use std::fs;
use std::path::{Path, PathBuf};

use mest_core::scene::{read_scene, SceneSample};
use mest_core::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "# mest scene manifest v1";
pub const SCENE_EXT: &str = "scene";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub superpoints: usize,
    pub sha256: String,
    pub status: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\nfile\tseed\tsuperpoints\tsha256\tstatus\n");
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.file, e.seed, e.superpoints, e.sha256, e.status));
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, message: String| Error::Parse {
        location: format!("{}:{line}", path.display()),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Version {
                found: h.to_string(),
                expected: MANIFEST_HEADER.to_string(),
            })
        }
        None => return Err(err(1, "empty manifest".into())),
    }
    lines.next();
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(i + 1, format!("`{s}`: {e}")));
            Ok(ManifestEntry {
                file: f[0].to_string(),
                seed: num(f[1])?,
                superpoints: num(f[2])? as usize,
                sha256: f[3].to_string(),
                status: f[4].to_string(),
            })
        })
        .collect()
}

/// Scene files of a data directory: the manifest order when there is a
/// manifest, otherwise every `*.scene` file sorted by name.
pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST);
    let files: Vec<PathBuf> = if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| io(&manifest, e))?;
        parse_manifest(&text, &manifest)?.into_iter().map(|e| dir.join(e.file)).collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == SCENE_EXT))
            .collect();
        v.sort();
        v
    };
    if files.is_empty() {
        return Err(Error::Missing(format!("no scenes in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    scene_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_scene(&p)?))
        })
        .collect()
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}
