//! Run manifests, content hashes and staged outputs.
//!
//! A stage writing a directory `out` works in `out.partial` and renames it into
//! place once every file is written, with the manifest at `out/run.json`. A
//! stage writing a single file `out` keeps its manifest beside it as
//! `out.run.json`. Manifest paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "run.json";
pub const TOOL_VERSION: &str = concat!("epical ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    /// Hash of `settings`.
    pub config_hash: String,
    /// Effective settings of the stage after defaults, file and overrides.
    pub settings: serde_json::Value,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub seeds: BTreeMap<String, u64>,
    /// Wall-clock seconds, recorded only on request so reruns stay identical.
    pub duration_seconds: Option<f64>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(stage: &str, path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(stage, path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(stage, path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn display_relative(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn absolute(stage: &str, path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(stage, path, e))
}

/// Files under `dir`, sorted, relative to it; the manifest itself is skipped.
fn list_files(stage: &str, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::new(stage, "io", e.to_string()).with("path", dir.display()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).expect("walk stays under root").to_path_buf();
            if rel != Path::new(MANIFEST_NAME) {
                files.push(rel);
            }
        }
    }
    Ok(files)
}

fn read_manifest(stage: &str, path: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(stage, path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(stage, "malformed_input", e.to_string()).with("path", path.display()))
}

fn check_entry(stage: &str, base: &Path, entry: &ArtifactHash, manifest: &Path) -> CliResult<()> {
    let path = base.join(&entry.path);
    if !path.exists() {
        return Err(CliError::new(stage, "missing_input", "artifact listed in a manifest is missing")
            .with("path", path.display())
            .with("manifest", manifest.display()));
    }
    let actual = sha256_file(stage, &path)?;
    if actual != entry.sha256 {
        return Err(CliError::new(stage, "hash_mismatch", "artifact does not match its manifest")
            .with("path", path.display())
            .with("manifest", manifest.display())
            .with("expected", &entry.sha256)
            .with("actual", actual));
    }
    Ok(())
}

/// Checks an input against the manifest of the stage that produced it.
///
/// A directory is checked file by file against `dir/run.json`; a file against
/// `file.run.json` or the `run.json` of its directory. Returns the path and
/// the hash that identifies the input (the manifest's, for a directory).
pub fn verify_input(stage: &str, path: &Path) -> CliResult<(PathBuf, String)> {
    if !path.exists() {
        return Err(CliError::new(stage, "missing_input", "input does not exist").with("path", path.display()));
    }
    if path.is_dir() {
        let mpath = path.join(MANIFEST_NAME);
        if !mpath.exists() {
            return Err(CliError::new(stage, "missing_manifest", "input directory has no run manifest").with("path", path.display()));
        }
        let m = read_manifest(stage, &mpath)?;
        for entry in &m.outputs {
            check_entry(stage, path, entry, &mpath)?;
        }
        return Ok((path.to_path_buf(), sha256_file(stage, &mpath)?));
    }
    let sibling = PathBuf::from(format!("{}.run.json", path.display()));
    let parent = path.parent().map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p }).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let candidates = [(sibling, parent.to_path_buf()), (parent.join(MANIFEST_NAME), parent.to_path_buf())];
    for (mpath, base) in candidates {
        if !mpath.exists() {
            continue;
        }
        let m = read_manifest(stage, &mpath)?;
        if let Some(entry) = m.outputs.iter().find(|e| e.path == name) {
            check_entry(stage, &base, entry, &mpath)?;
            return Ok((path.to_path_buf(), entry.sha256.clone()));
        }
    }
    Err(CliError::new(stage, "missing_manifest", "no run manifest lists this input").with("path", path.display()))
}

/// Collects what goes into a manifest while a stage runs.
pub struct ManifestBuilder {
    stage: String,
    settings: serde_json::Value,
    inputs: Vec<(PathBuf, String)>,
    seeds: BTreeMap<String, u64>,
    started: Instant,
    record_timing: bool,
}

impl ManifestBuilder {
    pub fn new<S: Serialize>(stage: &str, settings: &S, record_timing: bool) -> Self {
        Self {
            stage: stage.to_string(),
            settings: serde_json::to_value(settings).expect("settings serialize"),
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            started: Instant::now(),
            record_timing,
        }
    }

    /// Verifies an input and records it.
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        let (p, hash) = verify_input(&self.stage, path)?;
        self.inputs.push((p.clone(), hash));
        Ok(p)
    }

    /// Records an input from outside the pipeline by its hash alone.
    pub fn external_input(&mut self, path: &Path) -> CliResult<()> {
        if !path.is_file() {
            return Err(CliError::new(&self.stage, "missing_input", "input file does not exist").with("path", path.display()));
        }
        let hash = sha256_file(&self.stage, path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    fn finish(self, manifest_dir: &Path, outputs: Vec<ArtifactHash>) -> CliResult<RunManifest> {
        let stage = self.stage;
        let base = absolute(&stage, manifest_dir)?;
        let inputs = self
            .inputs
            .into_iter()
            .map(|(p, sha256)| {
                let abs = absolute(&stage, &p)?;
                let rel = pathdiff::diff_paths(&abs, &base).unwrap_or(abs);
                Ok(ArtifactHash {
                    path: display_relative(&rel),
                    sha256,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let settings_bytes = serde_json::to_vec(&self.settings).expect("settings serialize");
        Ok(RunManifest {
            config_hash: sha256_bytes(&settings_bytes),
            stage,
            tool_version: TOOL_VERSION.to_string(),
            settings: self.settings,
            inputs,
            outputs,
            seeds: self.seeds,
            duration_seconds: self.record_timing.then(|| self.started.elapsed().as_secs_f64()),
        })
    }
}

fn write_manifest(stage: &str, path: &Path, m: &RunManifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(stage, path, e))
}

fn ensure_parent(stage: &str, path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p).map_err(|e| CliError::io(stage, p, e))?;
        }
    }
    Ok(())
}

/// Output directory written through a staging directory.
pub struct StagedDir {
    stage: String,
    target: PathBuf,
    staging: PathBuf,
    keep_on_failure: bool,
    committed: bool,
}

impl StagedDir {
    /// With `keep_on_failure` set the staging directory survives a failed run
    /// so a resumable stage can pick it up again.
    pub fn begin(stage: &str, target: &Path, keep_on_failure: bool) -> CliResult<Self> {
        ensure_parent(stage, target)?;
        let staging = PathBuf::from(format!("{}.partial", target.display()));
        if staging.exists() && !keep_on_failure {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(stage, &staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| CliError::io(stage, &staging, e))?;
        Ok(Self {
            stage: stage.to_string(),
            target: target.to_path_buf(),
            staging,
            keep_on_failure,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    /// Hashes the staged files, writes the manifest and moves the directory into place.
    pub fn commit(mut self, builder: ManifestBuilder) -> CliResult<RunManifest> {
        let stage = self.stage.clone();
        let outputs = list_files(&stage, &self.staging)?
            .into_iter()
            .map(|rel| {
                Ok(ArtifactHash {
                    sha256: sha256_file(&stage, &self.staging.join(&rel))?,
                    path: display_relative(&rel),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        // Input paths are recorded relative to where the directory ends up.
        let m = builder.finish(&self.target, outputs)?;
        write_manifest(&stage, &self.staging.join(MANIFEST_NAME), &m)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&stage, &self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| CliError::io(&stage, &self.target, e))?;
        self.committed = true;
        Ok(m)
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed && !self.keep_on_failure {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Single output file with its manifest beside it.
pub struct StagedFile {
    stage: String,
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl StagedFile {
    pub fn begin(stage: &str, target: &Path) -> CliResult<Self> {
        ensure_parent(stage, target)?;
        Ok(Self {
            stage: stage.to_string(),
            target: target.to_path_buf(),
            staging: PathBuf::from(format!("{}.partial", target.display())),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn manifest_path(target: &Path) -> PathBuf {
        PathBuf::from(format!("{}.run.json", target.display()))
    }

    pub fn commit(mut self, builder: ManifestBuilder) -> CliResult<RunManifest> {
        let stage = self.stage.clone();
        let name = self
            .target
            .file_name()
            .ok_or_else(|| CliError::new(&stage, "invalid_input", "output path has no file name").with("path", self.target.display()))?
            .to_string_lossy()
            .into_owned();
        let outputs = vec![ArtifactHash {
            path: name,
            sha256: sha256_file(&stage, &self.staging)?,
        }];
        let dir = match self.target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let m = builder.finish(&dir, outputs)?;
        fs::rename(&self.staging, &self.target).map_err(|e| CliError::io(&stage, &self.target, e))?;
        write_manifest(&stage, &Self::manifest_path(&self.target), &m)?;
        self.committed = true;
        Ok(m)
    }
}

impl Drop for StagedFile {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.staging);
        }
    }
}
