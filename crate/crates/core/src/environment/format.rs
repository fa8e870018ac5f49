//! Environment container file format.
//!
//! Layout (see `docs/formats.md` for the frozen byte-level description):
//!
//! ```text
//! bytes 0..8   magic "BRWRENV1"
//! bytes 8..12  u32 LE header length H
//! bytes 12..12+H  JSON header
//! then, iff has_explicit_arrays: little-endian f64 arrays
//!   - per axis k = 0..d: weights of edges {x, x+e_k} for storage-box sites
//!     x in lexicographic order with x_k < M+1   (kinds with edge data)
//!   - trap parameters rho_x for storage-box sites in lexicographic order
//!     (kinds with trap data)
//! ```
//!
//! Loading always re-derives the environment from `(spec, seed, shift)`;
//! when explicit arrays are present they are compared bit-exactly against
//! the re-derivation and any mismatch is an error.

use super::{EnvKind, EnvSpec, Environment};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"BRWRENV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not an environment file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("stored arrays do not match re-derivation from (spec, seed): first mismatch in {0}")]
    VerificationFailed(String),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("environment error: {0}")]
    Env(#[from] super::EnvError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    d: usize,
    /// Current interior radius M.
    m: i64,
    /// Interior radius at sampling time (differs from `m` after shifts).
    base_m: i64,
    kind: EnvKind,
    spec: EnvSpec,
    seed: u64,
    shift: Vec<i64>,
    has_explicit_arrays: bool,
}

fn has_edge_arrays(kind: EnvKind) -> bool {
    matches!(kind, EnvKind::Conductances | EnvKind::Mixed)
}

fn has_trap_arrays(kind: EnvKind) -> bool {
    matches!(kind, EnvKind::Traps | EnvKind::Mixed)
}

/// Explicit payload arrays in file order.
fn payload_arrays(env: &Environment) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let storage = env.storage().clone();
    let b = storage.radius();
    if has_edge_arrays(env.kind()) {
        for k in 0..env.d() {
            let mut arr = Vec::new();
            storage.for_each_site(|idx, x| {
                if x[k] < b {
                    arr.push(env.edge_weight_idx(k, idx));
                }
            });
            out.push(arr);
        }
    }
    if has_trap_arrays(env.kind()) {
        let mut arr = Vec::with_capacity(storage.len());
        for idx in 0..storage.len() {
            arr.push(env.rho_idx(idx));
        }
        out.push(arr);
    }
    out
}

pub fn save(env: &Environment, path: &Path, explicit_arrays: bool) -> Result<(), FormatError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        d: env.d(),
        m: env.interior().radius(),
        base_m: env.base_radius(),
        kind: env.kind(),
        spec: env.spec().clone(),
        seed: env.seed(),
        shift: env.shift_offset().to_vec(),
        has_explicit_arrays: explicit_arrays,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    if explicit_arrays {
        for arr in payload_arrays(env) {
            for v in arr {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64_array(r: &mut impl Read, len: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(|_| FormatError::Truncated(what))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Loads an environment, re-deriving from provenance and verifying stored
/// arrays bit-exactly when present.
pub fn load(path: &Path) -> Result<Environment, FormatError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| FormatError::Truncated("magic"))?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| FormatError::Truncated("header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(FormatError::BadHeader(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| FormatError::Truncated("header"))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(header.format_version));
    }
    if header.kind != header.spec.kind {
        return Err(FormatError::BadHeader("kind field disagrees with spec".into()));
    }

    let derived = header.spec.sample(header.d, header.base_m, header.seed)?;
    let derived = if header.shift.iter().any(|&c| c != 0) {
        derived.shift(&header.shift)?
    } else {
        derived
    };
    if derived.interior().radius() != header.m {
        return Err(FormatError::BadHeader(format!(
            "radius after shift is {}, header says {}",
            derived.interior().radius(),
            header.m
        )));
    }

    if header.has_explicit_arrays {
        let expected = payload_arrays(&derived);
        let names: Vec<String> = {
            let mut n: Vec<String> =
                (0..expected.len().saturating_sub(usize::from(has_trap_arrays(header.kind))))
                    .map(|k| format!("edge axis {k}"))
                    .collect();
            if has_trap_arrays(header.kind) {
                n.push("trap parameters".into());
            }
            n
        };
        for (arr, name) in expected.iter().zip(names) {
            let stored = read_f64_array(&mut r, arr.len(), "payload")?;
            for (i, (a, b)) in arr.iter().zip(stored.iter()).enumerate() {
                if a.to_bits() != b.to_bits() {
                    return Err(FormatError::VerificationFailed(format!("{name}, slot {i}")));
                }
            }
        }
    }
    Ok(derived)
}

/// Round-trips the file and reports whether verification passed.
pub fn verify(path: &Path) -> Result<(), FormatError> {
    load(path).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::DistributionSpec;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("brwre_fmt_{}_{}", std::process::id(), name));
        p
    }

    #[test]
    fn roundtrip_with_and_without_arrays() {
        let spec = EnvSpec::mixed(
            DistributionSpec::log_uniform(0.5, 2.0),
            DistributionSpec::uniform(0.0, 0.5),
        );
        let env = spec.sample(2, 3, 99).unwrap();
        for explicit in [false, true] {
            let p = tmp(&format!("rt_{explicit}"));
            save(&env, &p, explicit).unwrap();
            let loaded = load(&p).unwrap();
            assert!(loaded.bitwise_eq(&env));
            assert_eq!(loaded.seed(), env.seed());
            std::fs::remove_file(&p).ok();
        }
    }

    #[test]
    fn shifted_environment_roundtrips() {
        let spec = EnvSpec::conductances(DistributionSpec::uniform(1.0, 2.0));
        let env = spec.sample(2, 4, 5).unwrap().shift(&[1, -1]).unwrap();
        let p = tmp("shifted");
        save(&env, &p, true).unwrap();
        let loaded = load(&p).unwrap();
        assert!(loaded.bitwise_eq(&env));
        assert_eq!(loaded.interior().radius(), 3);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn corrupted_payload_fails_verification() {
        let spec = EnvSpec::traps(DistributionSpec::uniform(0.0, 0.5));
        let env = spec.sample(1, 3, 3).unwrap();
        let p = tmp("corrupt");
        save(&env, &p, true).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(FormatError::VerificationFailed(_))));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let p = tmp("magic");
        std::fs::write(&p, b"NOTANENVFILE....").unwrap();
        assert!(matches!(load(&p), Err(FormatError::BadMagic)));
        std::fs::remove_file(&p).ok();
    }
}
