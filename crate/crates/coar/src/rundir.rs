//! Run directories. Every command writes exactly one: the resolved config,
//! a manifest naming the inputs and outputs by content hash, the per-step
//! loss log, and whatever artifacts the command produced.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::{env, fs, io};

use coar_core::{GradcheckReport, LossReport, PretrainReport, SweepRow};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_DIR_ENV: &str = "COAR_RUN_DIR";

/// Output root: `--run-root` beats the environment beats `./runs`.
pub fn resolve_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Create `<root>/<name>`, suffixing `-2`, `-3`, ... when taken.
    pub fn create(root: &Path, name: &str) -> io::Result<RunDir> {
        fs::create_dir_all(root)?;
        for i in 1..10_000u32 {
            let candidate = if i == 1 {
                root.join(name)
            } else {
                root.join(format!("{name}-{i}"))
            };
            match fs::create_dir(&candidate) {
                Ok(()) => return Ok(RunDir { path: candidate }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::other(format!("no free run name under {name}")))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        fs::write(self.file(name), bytes)
    }

    /// One JSON object per step, in step order.
    pub fn write_losses(&self, history: &[LossReport]) -> io::Result<()> {
        let mut out = io::BufWriter::new(fs::File::create(self.file("losses.jsonl"))?);
        for report in history {
            serde_json::to_writer(&mut out, &LossRow::from(report)).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

pub fn sha256_hex(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

/// What a run did, stamped after the fact. Hash maps are keyed by the
/// artifact's file name (inputs may live outside the run directory, so
/// their keys are full paths).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub world_seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, world_seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            world_seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_ms: 0,
        }
    }

    pub fn note_input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(path)?);
        Ok(())
    }

    pub fn note_output(&mut self, path: &Path) -> io::Result<()> {
        let key = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(key, sha256_hex(path)?);
        Ok(())
    }
}

// Serialization mirrors for the core report types, which carry no serde.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub ntp: f64,
    pub dpp_ntp: f64,
    pub dpp_kl: f64,
    pub casr: f64,
    pub total: f64,
}

impl From<&LossReport> for LossRow {
    fn from(r: &LossReport) -> Self {
        LossRow {
            step: r.step,
            ntp: r.ntp,
            dpp_ntp: r.dpp_ntp,
            dpp_kl: r.dpp_kl,
            casr: r.casr,
            total: r.total,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRowOut {
    pub n_layers: usize,
    pub final_ntp: f64,
    pub fidelity: f64,
    pub drift: f64,
}

impl From<&SweepRow> for SweepRowOut {
    fn from(r: &SweepRow) -> Self {
        SweepRowOut {
            n_layers: r.n_layers,
            final_ntp: r.final_ntp,
            fidelity: r.fidelity,
            drift: r.drift,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckOut {
    pub max_rel_err: f64,
    pub worst_side: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

impl From<&GradcheckReport> for GradcheckOut {
    fn from(r: &GradcheckReport) -> Self {
        GradcheckOut {
            max_rel_err: r.max_rel_err,
            worst_side: if r.worst_side == 0 { "p_v" } else { "p_i" }.to_string(),
            worst_index: r.worst_index,
            n_checked: r.n_checked,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainOut {
    pub steps_run: usize,
    pub final_class_ce: f64,
    pub reached_target: bool,
    pub evals: Vec<(usize, f64)>,
}

impl From<&PretrainReport> for PretrainOut {
    fn from(r: &PretrainReport) -> Self {
        PretrainOut {
            steps_run: r.steps_run,
            final_class_ce: r.final_class_ce,
            reached_target: r.reached_target,
            evals: r.evals.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_names_dedup_with_suffixes() {
        let root = tempfile::tempdir().expect("tempdir");
        let a = RunDir::create(root.path(), "learn-subject").expect("a");
        let b = RunDir::create(root.path(), "learn-subject").expect("b");
        let c = RunDir::create(root.path(), "learn-subject").expect("c");
        assert_eq!(a.path, root.path().join("learn-subject"));
        assert_eq!(b.path, root.path().join("learn-subject-2"));
        assert_eq!(c.path, root.path().join("learn-subject-3"));
    }

    #[test]
    fn losses_land_one_object_per_line() {
        let root = tempfile::tempdir().expect("tempdir");
        let run = RunDir::create(root.path(), "x").expect("run");
        let history = vec![
            LossReport { ntp: 1.0, dpp_ntp: 0.5, dpp_kl: 0.1, casr: 0.0, total: 1.3, step: 0 },
            LossReport { ntp: 0.9, dpp_ntp: 0.4, dpp_kl: 0.2, casr: 0.1, total: 1.2, step: 1 },
        ];
        run.write_losses(&history).expect("write");
        let text = fs::read_to_string(run.file("losses.jsonl")).expect("read");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: LossRow = serde_json::from_str(lines[0]).expect("parse");
        assert_eq!(first.step, 0);
        assert_eq!(first.total, 1.3);
        let second: LossRow = serde_json::from_str(lines[1]).expect("parse");
        assert_eq!(second.ntp, 0.9);
    }

    #[test]
    fn manifest_hashes_inputs_and_outputs() {
        let root = tempfile::tempdir().expect("tempdir");
        let run = RunDir::create(root.path(), "x").expect("run");
        let artifact = run.file("bank.ckpt");
        fs::write(&artifact, b"hello").expect("write");
        let mut manifest = RunManifest::new("learn-subject", serde_json::json!({"lr": 0.01}), 7);
        manifest.note_input(&artifact).expect("input");
        manifest.note_output(&artifact).expect("output");
        // sha256("hello")
        let expect = "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824";
        assert_eq!(manifest.outputs["bank.ckpt"], expect);
        assert_eq!(manifest.inputs[&artifact.display().to_string()], expect);
        run.write_json("manifest.json", &manifest).expect("json");
        let back: RunManifest =
            serde_json::from_slice(&fs::read(run.file("manifest.json")).unwrap()).expect("parse");
        assert_eq!(back.command, "learn-subject");
        assert_eq!(back.config["lr"], 0.01);
    }

    #[test]
    fn root_resolution_prefers_the_flag() {
        let flag = PathBuf::from("/tmp/explicit");
        assert_eq!(resolve_root(Some(&flag)), flag);
        // Without a flag the env or default applies; both are plain paths.
        let fallback = resolve_root(None);
        assert!(!fallback.as_os_str().is_empty());
    }
}
