//! Two-file model format: a canonical JSON structure file plus a sidecar
//! AMLG parameter archive (`<name>.amlg`).

use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::archive::Archive;
use super::{ModelGraph, ParamKey, ParamStore};
use crate::error::{Error, Result};

const DIGEST_KEY: &str = "params_sha256";

/// Path of the parameter archive that accompanies a structure file.
pub fn params_path(structure: &Path) -> PathBuf {
    structure.with_extension("amlg")
}

pub fn params_to_archive(params: &ParamStore) -> Result<Archive> {
    let mut a = Archive::new();
    for (k, t) in params.iter() {
        a.push(k.to_string(), t.clone())?;
    }
    Ok(a)
}

pub fn params_from_archive(a: Archive) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in a.into_records() {
        store.insert(ParamKey::parse(&name)?, t);
    }
    Ok(store)
}

/// SHA-256 of the canonical JSON form of `graph` alone.
pub fn arch_digest(graph: &ModelGraph) -> Result<String> {
    let v = serde_json::to_value(graph)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

/// Canonical bytes of `(structure, params)`. Object keys are sorted, so
/// equal models always produce equal bytes.
pub fn model_to_bytes(graph: &ModelGraph, params: &ParamStore) -> Result<(Vec<u8>, Vec<u8>)> {
    graph.validate()?;
    params.validate(graph)?;
    let archive = params_to_archive(params)?.to_bytes();
    let mut v = serde_json::to_value(graph)?;
    let digest = hex::encode(Sha256::digest(&archive));
    v.as_object_mut()
        .ok_or_else(|| Error::internal("graph did not serialize to an object"))?
        .insert(DIGEST_KEY.into(), Value::String(digest));
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    Ok((text.into_bytes(), archive))
}

fn check_version(obj: &serde_json::Map<String, Value>, location: &str) -> Result<()> {
    if let Some(ver) = obj.get("version").and_then(Value::as_str) {
        if ver != super::FORMAT_VERSION {
            return Err(Error::load(
                location,
                format!("version mismatch: file has `{ver}`, expected `{}`", super::FORMAT_VERSION),
            ));
        }
    }
    Ok(())
}

/// Parses a structure file alone; any parameter digest is ignored.
pub fn structure_from_bytes(structure: &[u8], location: &str) -> Result<ModelGraph> {
    let mut v: Value = serde_json::from_slice(structure).map_err(|e| Error::load(location, e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::load(location, "structure file is not a JSON object"))?;
    check_version(obj, location)?;
    obj.remove(DIGEST_KEY);
    let graph: ModelGraph = serde_json::from_value(v).map_err(|e| Error::load(location, e.to_string()))?;
    graph.validate().map_err(|e| Error::load(location, e.to_string()))?;
    Ok(graph)
}

pub fn read_structure(path: &Path) -> Result<ModelGraph> {
    let s = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    structure_from_bytes(&s, &path.display().to_string())
}

/// Inverse of [`model_to_bytes`]; `location` is used in error messages.
pub fn model_from_bytes(structure: &[u8], params: &[u8], location: &str) -> Result<(ModelGraph, ParamStore)> {
    let mut v: Value = serde_json::from_slice(structure).map_err(|e| Error::load(location, e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::load(location, "structure file is not a JSON object"))?;
    check_version(obj, location)?;
    let digest = match obj.remove(DIGEST_KEY) {
        Some(Value::String(s)) => s,
        _ => return Err(Error::load(location, format!("missing `{DIGEST_KEY}` field"))),
    };
    let graph: ModelGraph = serde_json::from_value(v).map_err(|e| Error::load(location, e.to_string()))?;
    graph.validate().map_err(|e| Error::load(location, e.to_string()))?;

    if hex::encode(Sha256::digest(params)) != digest {
        return Err(Error::load(location, "checksum failure: parameter archive does not match structure file"));
    }
    let archive = Archive::from_bytes(params, &format!("{location} (params)"))?;
    let store = params_from_archive(archive)?;
    store.validate(&graph).map_err(|e| Error::load(location, e.to_string()))?;
    Ok((graph, store))
}

/// Writes `path` (structure) and its `.amlg` sidecar.
pub fn serialize_model(graph: &ModelGraph, params: &ParamStore, path: &Path) -> Result<()> {
    let side = params_path(path);
    if side == path {
        return Err(Error::arg(format!("structure path {} must not end in .amlg", path.display())));
    }
    let (s, p) = model_to_bytes(graph, params)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))?;
    std::fs::write(&side, p).map_err(|e| Error::io(&side, e))
}

pub fn deserialize_model(path: &Path) -> Result<(ModelGraph, ParamStore)> {
    let s = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = params_path(path);
    let p = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    model_from_bytes(&s, &p, &path.display().to_string())
}
