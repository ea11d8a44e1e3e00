//! On-disk build artifacts: program text, audit sidecar and manifest.
//!
//! The key never appears in an artifact; the sidecar stores its fingerprint
//! and loading refuses any key with a different one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::instrument::{CheckPolicy, Manifest, Mode};
use crate::ir::{layout_addresses, parse_program, IrError, Op, Program};
use crate::pac::{PacConfig, PacKey};
use crate::postprocess::Build;
use crate::sim::{Image, SimError};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Ir { path: PathBuf, source: IrError },
    #[error("key fingerprint {actual} does not match the artifact's {expected}")]
    KeyMismatch { expected: String, actual: String },
    #[error("sidecar does not match the program: {0}")]
    Tampered(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRecord {
    #[serde(with = "crate::hexfmt")]
    pub address: u64,
    pub function: String,
    #[serde(with = "crate::hexfmt")]
    pub constant: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: u32,
    pub key_fingerprint: String,
    pub mode: Mode,
    pub policy: CheckPolicy,
    pub pac: PacConfig,
    #[serde(with = "crate::hexfmt")]
    pub seed: u64,
    #[serde(with = "crate::hexfmt")]
    pub base_address: u64,
    pub entry: String,
    #[serde(with = "crate::hexfmt")]
    pub entry_address: u64,
    #[serde(with = "crate::hexfmt")]
    pub initial_state: u64,
    pub state_map_digest: String,
    #[serde(with = "crate::hexfmt::map")]
    pub function_begin: BTreeMap<String, u64>,
    #[serde(with = "crate::hexfmt::map")]
    pub function_end: BTreeMap<String, u64>,
    pub icall_classes: Vec<Vec<String>>,
    pub checks: Vec<CheckRecord>,
}

pub const SIDECAR_FORMAT: u32 = 1;

fn checks_of(p: &Program) -> Vec<CheckRecord> {
    p.functions
        .iter()
        .flat_map(|f| {
            f.instructions().filter_map(move |i| match i.op {
                Op::CfiCheck { constant } => {
                    Some(CheckRecord { address: i.address, function: f.name.clone(), constant })
                }
                _ => None,
            })
        })
        .collect()
}

impl Sidecar {
    pub fn from_build(b: &Build) -> Sidecar {
        let (function_begin, icall_classes) = match &b.signatures {
            Some(s) => (s.function_begin.clone(), s.classes.classes.clone()),
            None => (BTreeMap::new(), Vec::new()),
        };
        Sidecar {
            format: SIDECAR_FORMAT,
            key_fingerprint: b.config.key.fingerprint(),
            mode: b.config.mode,
            policy: b.config.policy,
            pac: b.config.pac,
            seed: b.config.seed,
            base_address: b.config.base_address,
            entry: b.program.entry.clone(),
            entry_address: b.program.entry_function().address(),
            initial_state: b.initial_state(),
            state_map_digest: b.states.digest(),
            function_begin,
            function_end: b.states.function_end.clone(),
            icall_classes,
            checks: checks_of(&b.program),
        }
    }
}

/// Paths of the three files that make up one artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub program: PathBuf,
    pub sidecar: PathBuf,
    pub manifest: PathBuf,
}

impl ArtifactPaths {
    /// `out.fir` → `out.fir`, `out.sidecar.json`, `out.manifest.json`.
    pub fn for_program(program: impl AsRef<Path>) -> ArtifactPaths {
        let program = program.as_ref().to_path_buf();
        let stem = program.with_extension("");
        let with = |suffix: &str| {
            let mut s = stem.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        ArtifactPaths { sidecar: with(".sidecar.json"), manifest: with(".manifest.json"), program }
    }

    pub fn all(&self) -> [&Path; 3] {
        [&self.program, &self.sidecar, &self.manifest]
    }
}

/// Serialized contents of an artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactFiles {
    pub program: String,
    pub sidecar: String,
    pub manifest: String,
}

impl ArtifactFiles {
    pub fn from_build(b: &Build) -> ArtifactFiles {
        let json = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("json") + "\n";
        ArtifactFiles {
            program: b.text(),
            sidecar: json(serde_json::to_value(Sidecar::from_build(b)).expect("sidecar serializes")),
            manifest: json(serde_json::to_value(&b.manifest).expect("manifest serializes")),
        }
    }

    /// SHA-256 over the three files, length-prefixed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.program, &self.sidecar, &self.manifest] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, paths: &ArtifactPaths) -> Result<(), ArtifactError> {
        for (path, text) in paths.all().into_iter().zip([&self.program, &self.sidecar, &self.manifest]) {
            fs::write(path, text).map_err(|source| ArtifactError::Io { path: path.to_path_buf(), source })?;
        }
        Ok(())
    }

    pub fn read(paths: &ArtifactPaths) -> Result<ArtifactFiles, ArtifactError> {
        let read = |path: &Path| fs::read_to_string(path).map_err(|source| ArtifactError::Io { path: path.to_path_buf(), source });
        Ok(ArtifactFiles { program: read(&paths.program)?, sidecar: read(&paths.sidecar)?, manifest: read(&paths.manifest)? })
    }
}

/// An artifact read back from disk and checked against its sidecar.
#[derive(Debug, Clone)]
pub struct LoadedArtifact {
    pub program: Program,
    pub sidecar: Sidecar,
    pub manifest: Manifest,
}

impl LoadedArtifact {
    pub fn load(paths: &ArtifactPaths) -> Result<LoadedArtifact, ArtifactError> {
        let files = ArtifactFiles::read(paths)?;
        let sidecar: Sidecar = serde_json::from_str(&files.sidecar)
            .map_err(|source| ArtifactError::Json { path: paths.sidecar.clone(), source })?;
        let manifest: Manifest = serde_json::from_str(&files.manifest)
            .map_err(|source| ArtifactError::Json { path: paths.manifest.clone(), source })?;
        let ir_err = |source| ArtifactError::Ir { path: paths.program.clone(), source };
        let parsed = parse_program(&files.program).map_err(ir_err)?;
        let program = layout_addresses(&parsed, sidecar.base_address, sidecar.pac.va_bits()).map_err(ir_err)?;
        if checks_of(&program) != sidecar.checks {
            return Err(ArtifactError::Tampered("check constants differ".into()));
        }
        if program.entry != sidecar.entry || program.entry_function().address() != sidecar.entry_address {
            return Err(ArtifactError::Tampered("entry point differs".into()));
        }
        Ok(LoadedArtifact { program, sidecar, manifest })
    }

    pub fn image(&self, key: PacKey) -> Result<Image, ArtifactError> {
        let actual = key.fingerprint();
        if actual != self.sidecar.key_fingerprint {
            return Err(ArtifactError::KeyMismatch { expected: self.sidecar.key_fingerprint.clone(), actual });
        }
        Ok(Image::new(&self.program, key, self.sidecar.pac, self.sidecar.initial_state)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::postprocess::{build, BuildConfig};
    use crate::sim::{execute, run_build, ExecConfig};

    const KEY: PacKey = PacKey::new(0x0123_4567_89AB_CDEF, 0x89AB_CDEF_0123_4567);

    fn fixture(name: &str, mode: Mode) -> Build {
        let c = corpus::get(name).unwrap();
        build(&c.program(), BuildConfig::new(mode, CheckPolicy::EndOfFunction, KEY).with_seed(7)).unwrap()
    }

    #[test]
    fn paths_share_a_stem() {
        let p = ArtifactPaths::for_program("out/diamond.fir");
        assert_eq!(p.sidecar, PathBuf::from("out/diamond.sidecar.json"));
        assert_eq!(p.manifest, PathBuf::from("out/diamond.manifest.json"));
    }

    #[test]
    fn sidecar_round_trips_and_omits_key() {
        let b = fixture("icall_merged", Mode::Fipac);
        let files = ArtifactFiles::from_build(&b);
        let s: Sidecar = serde_json::from_str(&files.sidecar).unwrap();
        assert_eq!(s, Sidecar::from_build(&b));
        assert!(!files.sidecar.contains(&KEY.to_hex()));
        assert_eq!(s.icall_classes, vec![vec!["dbl".to_string(), "inc".into(), "neg".into()]]);
    }

    #[test]
    fn load_reproduces_the_build() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        for mode in [Mode::Fipac, Mode::XorBaseline, Mode::None] {
            for c in corpus::PROGRAMS {
                let b = fixture(c.name, mode);
                let paths = ArtifactPaths::for_program(dir.join(format!("{}-{mode}.fir", c.name)));
                ArtifactFiles::from_build(&b).write(&paths).unwrap();
                let loaded = LoadedArtifact::load(&paths).unwrap();
                assert_eq!(loaded.program, b.program, "{}", c.name);
                let img = loaded.image(KEY).unwrap();
                let cfg = ExecConfig::default();
                assert_eq!(execute(&img, c.inputs[0], &[], &cfg), run_build(&b, c.inputs[0], &[], &cfg), "{}", c.name);
            }
        }
    }

    #[test]
    fn wrong_key_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let paths = ArtifactPaths::for_program(dir.join("k.fir"));
        ArtifactFiles::from_build(&fixture("diamond", Mode::Fipac)).write(&paths).unwrap();
        let loaded = LoadedArtifact::load(&paths).unwrap();
        assert!(matches!(loaded.image(PacKey::new(1, 2)), Err(ArtifactError::KeyMismatch { .. })));
    }

    #[test]
    fn edited_check_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let paths = ArtifactPaths::for_program(dir.join("t.fir"));
        let mut files = ArtifactFiles::from_build(&fixture("diamond", Mode::Fipac));
        let c = Sidecar::from_build(&fixture("diamond", Mode::Fipac)).checks[0].constant;
        files.program = files.program.replacen(&format!("{c:#x}"), "0x1", 1);
        files.write(&paths).unwrap();
        assert!(matches!(LoadedArtifact::load(&paths), Err(ArtifactError::Tampered(_))));
    }

    #[test]
    fn hash_is_deterministic() {
        let a = ArtifactFiles::from_build(&fixture("fig6", Mode::Fipac));
        let b = ArtifactFiles::from_build(&fixture("fig6", Mode::Fipac));
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ArtifactFiles::from_build(&fixture("fig6", Mode::XorBaseline)).hash());
    }
}
