//! Run directory layout and the manifest that indexes it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::experiments;
use crate::output::{CheckItem, CheckReport, PlotSpec};
use crate::plot;

pub const MANIFEST_FORMAT: &str = "tdlab-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_seed_seconds: BTreeMap<String, f64>,
}

/// Lists every file of a run except itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub config: Value,
    pub decisions: BTreeMap<String, Value>,
    pub artifacts: Vec<ManifestEntry>,
    pub timings: Timings,
    pub library_version: String,
    pub checks: Vec<CheckItem>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::MissingArtifact(path.to_path_buf()),
            _ => LabError::io(path, e),
        })?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| LabError::Json { path: path.to_path_buf(), source: e })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(LabError::Csv {
                path: path.to_path_buf(),
                message: format!("unsupported manifest {} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }

    pub fn report(&self) -> CheckReport {
        CheckReport { experiment: self.experiment.clone(), items: self.checks.clone() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    /// Parent of hashed run directories when the config has no `output_dir`.
    pub output_root: Option<PathBuf>,
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    b.build().map_err(|e| LabError::Pool(e.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `contents` to `dir/rel`, creating parents.
fn write_file(dir: &Path, rel: &str, contents: &[u8]) -> Result<ManifestEntry> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| LabError::io(&path, e))?;
    Ok(ManifestEntry { path: rel.to_string(), bytes: contents.len() as u64, sha256: sha256_hex(contents), plot: None })
}

/// Removes the files listed by a previous manifest in `dir`, if any.
fn clear_previous(dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(());
    }
    let old = RunManifest::read(&path)?;
    for entry in old.artifacts {
        let p = dir.join(&entry.path);
        if p.is_file() {
            std::fs::remove_file(&p).map_err(|e| LabError::io(&p, e))?;
        }
    }
    Ok(())
}

/// Runs one experiment and writes its artifacts, plots and manifest.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let start = Instant::now();
    let pool = thread_pool(opts.jobs)?;
    log::info!("running {} on {} seeds with {} threads", config.experiment, config.seeds.len(), pool.current_num_threads());
    let output = experiments::run(config.experiment, &config.parameters, &config.seeds, &pool)?;

    let dir = config.resolve_output_dir(opts.output_root.as_deref());
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    clear_previous(&dir)?;

    let mut entries = Vec::new();
    let config_text = serde_json::to_string_pretty(&config.to_json()).expect("JSON values always serialize") + "\n";
    entries.push(write_file(&dir, "config.json", config_text.as_bytes())?);
    for artifact in &output.artifacts {
        let mut entry = write_file(&dir, &artifact.path, artifact.contents.as_bytes())?;
        entry.plot = artifact.plot.clone();
        entries.push(entry);
        if let Some(spec) = &artifact.plot {
            let svg = plot::render(spec, &artifact.contents)
                .map_err(|message| LabError::Csv { path: dir.join(&artifact.path), message })?;
            entries.push(write_file(&dir, &plot::svg_path(&artifact.path), svg.as_bytes())?);
        }
    }

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        experiment: config.experiment.name().into(),
        config_hash: config.hash(),
        config: config.to_json(),
        decisions: output.decisions,
        artifacts: entries,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            per_seed_seconds: output.seed_seconds.iter().map(|(s, t)| (s.to_string(), *t)).collect(),
        },
        library_version: env!("CARGO_PKG_VERSION").into(),
        checks: output.checks,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
    log::info!("wrote {} files to {}", manifest.artifacts.len() + 1, dir.display());
    Ok(RunSummary { dir, manifest })
}
