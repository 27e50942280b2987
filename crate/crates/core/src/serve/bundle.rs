//! Single-file model bundle.
//!
//! Layout (little-endian): magic `DEFB`, version byte, `u32` section count,
//! then per section a `u8` name length, the name, `u64` offset, `u64` length
//! and the 32-byte SHA-256 of the payload; payloads follow the table.
//! Offsets are relative to the end of the table.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BundleForest, BundleMeta, Mode, ModelBundle, ServeError};
use crate::data::parse_schema;
use crate::fuzzy::{export_fuzzy, import_fuzzy};
use crate::gbdt::{export_forest, import_forest};
use crate::nn::tensorfile::{decode, embedder_from_tensors, embedder_tensors, encode};

const MAGIC: &[u8; 4] = b"DEFB";
pub const BUNDLE_VERSION: u8 = 1;
const SECTIONS: [&str; 4] = ["schema", "embeddings", "forest", "meta"];

fn meta_text(b: &ModelBundle) -> String {
    format!(
        "mode {}\ncreated_unix {}\nconfig_digest {}\n",
        b.mode().as_str(),
        b.meta.created_unix,
        b.meta.config_digest
    )
}

pub fn encode_bundle(b: &ModelBundle) -> Vec<u8> {
    let forest = match &b.forest {
        BundleForest::TwoStep(f) => export_forest(f),
        BundleForest::ThreeStep(f) => export_fuzzy(f),
    };
    let payloads: [Vec<u8>; 4] = [
        b.embedder.schema().to_text().into_bytes(),
        encode(&embedder_tensors(&b.embedder)),
        forest.into_bytes(),
        meta_text(b).into_bytes(),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(BUNDLE_VERSION);
    out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, p) in SECTIONS.iter().zip(&payloads) {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(p));
        offset += p.len() as u64;
    }
    for p in &payloads {
        out.extend_from_slice(p);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ServeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ServeError::Bundle("truncated bundle".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ServeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ServeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn text(name: &str, bytes: &[u8]) -> Result<String, ServeError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| ServeError::Bundle(format!("section {name} is not UTF-8")))
}

fn parse_meta(t: &str) -> Result<(Mode, BundleMeta), ServeError> {
    let mut mode = None;
    let mut meta = BundleMeta::default();
    for line in t.lines() {
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        match k {
            "mode" => mode = Some(Mode::parse(v)?),
            "created_unix" => {
                meta.created_unix = v.parse().map_err(|_| ServeError::Bundle(format!("bad created_unix `{v}`")))?
            }
            "config_digest" => meta.config_digest = v.to_string(),
            _ => return Err(ServeError::Bundle(format!("unknown meta key `{k}`"))),
        }
    }
    Ok((mode.ok_or_else(|| ServeError::Bundle("meta has no mode".into()))?, meta))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle, ServeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ServeError::Bundle("not a model bundle".into()));
    }
    let version = r.take(1)?[0];
    if version != BUNDLE_VERSION {
        return Err(ServeError::Bundle(format!(
            "bundle version {version} is not supported (expected {BUNDLE_VERSION})"
        )));
    }
    let n = r.u32()? as usize;
    if n != SECTIONS.len() {
        return Err(ServeError::Bundle(format!("expected {} sections, found {n}", SECTIONS.len())));
    }
    let mut table = Vec::with_capacity(n);
    for expected in SECTIONS {
        let len = r.take(1)?[0] as usize;
        let name = r.take(len)?;
        if name != expected.as_bytes() {
            return Err(ServeError::Bundle(format!("expected section {expected}")));
        }
        let (offset, length) = (r.u64()?, r.u64()?);
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        table.push((expected, offset, length, digest));
    }
    let body = &bytes[r.pos..];
    let mut sections = Vec::with_capacity(n);
    let mut end = 0u64;
    for (name, offset, length, digest) in table {
        let stop = offset.checked_add(length).filter(|&s| s <= body.len() as u64);
        let stop = stop.ok_or_else(|| ServeError::Bundle(format!("truncated bundle: section {name} extends past end")))?;
        let payload = &body[offset as usize..stop as usize];
        if Sha256::digest(payload).as_slice() != digest {
            return Err(ServeError::Bundle(format!("checksum mismatch in section {name}")));
        }
        end = end.max(stop);
        sections.push(payload);
    }
    if end != body.len() as u64 {
        return Err(ServeError::Bundle("trailing bytes after last section".into()));
    }
    let schema = parse_schema(&text("schema", sections[0])?)?;
    let embedder = embedder_from_tensors(schema, &decode(sections[1])?)?;
    let forest_text = text("forest", sections[2])?;
    let (mode, meta) = parse_meta(&text("meta", sections[3])?)?;
    let forest = match mode {
        Mode::TwoStep => BundleForest::TwoStep(import_forest(&forest_text)?),
        Mode::ThreeStep => BundleForest::ThreeStep(import_fuzzy(&forest_text)?),
    };
    ModelBundle::new(embedder, forest, meta)
}

pub fn save_bundle(b: &ModelBundle, path: &Path) -> Result<(), ServeError> {
    fs::write(path, encode_bundle(b))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, ServeError> {
    decode_bundle(&fs::read(path)?)
}
