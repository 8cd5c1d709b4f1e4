//! Run directory manifest: every artifact with its sha256, plus copies of all
//! CSVs gathered under `report/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bidtune::{Error, Result};

pub const REPORT_DIR: &str = "report";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub sha256: String,
    pub bytes: u64,
    /// Modification time in whole seconds since the epoch.
    pub modified: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash over all artifact paths and digests; stable while nothing changes.
    pub run_id: String,
    pub tool_version: String,
    /// Keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, Artifact>,
    /// CSV copies under the report directory, relative to the run directory.
    pub reports: Vec<String>,
}

fn kind_of(path: &Path) -> Option<&'static str> {
    match path.extension()?.to_str()? {
        "csv" => Some("table"),
        "dat" => Some("plot_data"),
        "ckpt" => Some("checkpoint"),
        "bin" => Some("dataset"),
        "toml" => Some("config"),
        "txt" => Some("text"),
        _ => None,
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn rel_key(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn describe(path: &Path, kind: &str) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let meta = fs::metadata(path).map_err(|e| io_err(path, e))?;
    let modified = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_secs());
    Ok(Artifact {
        kind: kind.to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
        modified,
    })
}

pub fn build(run: &Path) -> Result<RunManifest> {
    if !run.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a directory",
            run.display()
        )));
    }
    let report_dir = run.join(REPORT_DIR);
    let mut files = Vec::new();
    walk(run, &mut files)?;
    files.retain(|p| !p.starts_with(&report_dir));

    // CSV copies are named after their source path so that two runs'
    // `losses.csv` files do not collide.
    let mut reports = Vec::new();
    for p in files
        .iter()
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
    {
        let name = rel_key(run, p).replace('/', "__");
        let dest = report_dir.join(&name);
        fs::create_dir_all(&report_dir).map_err(|e| io_err(&report_dir, e))?;
        let src = fs::read(p).map_err(|e| io_err(p, e))?;
        if fs::read(&dest).ok().as_deref() != Some(&src[..]) {
            fs::write(&dest, &src).map_err(|e| io_err(&dest, e))?;
        }
        reports.push(format!("{REPORT_DIR}/{name}"));
    }

    let mut artifacts = BTreeMap::new();
    for p in &files {
        if let Some(kind) = kind_of(p) {
            artifacts.insert(rel_key(run, p), describe(p, kind)?);
        }
    }
    let mut h = Sha256::new();
    for (k, a) in &artifacts {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(a.sha256.as_bytes());
    }
    Ok(RunManifest {
        run_id: hex::encode(&h.finalize()[..8]),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts,
        reports,
    })
}

/// Lists artifacts whose current digest differs from the manifest.
pub fn verify(run: &Path, m: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (k, a) in &m.artifacts {
        let p = run.join(k);
        if !p.exists() || describe(&p, &a.kind)?.sha256 != a.sha256 {
            bad.push(k.clone());
        }
    }
    Ok(bad)
}

pub fn report(run: &Path) -> Result<()> {
    let m = build(run)?;
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))? + "\n";
    let path = run.join(REPORT_DIR).join(MANIFEST_FILE);
    fs::create_dir_all(run.join(REPORT_DIR)).map_err(|e| io_err(run, e))?;
    if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let bad = verify(run, &m)?;
    if !bad.is_empty() {
        return Err(Error::Contract(format!(
            "artifacts changed while reporting: {}",
            bad.join(", ")
        )));
    }
    println!(
        "run {}: {} artifacts, {} tables in {}",
        m.run_id,
        m.artifacts.len(),
        m.reports.len(),
        run.join(REPORT_DIR).display()
    );
    Ok(())
}
