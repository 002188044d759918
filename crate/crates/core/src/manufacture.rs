//! Factory provisioning: each finder gets an id_init and its own mf-key,
//! and the server gets the registry of both.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{Identifier, SecretKey};
use crate::server::ManufacturerRegistry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisioningRecord {
    pub serial: u32,
    pub id_init: Identifier,
    pub mf_key: SecretKey,
}

#[derive(Serialize, Deserialize)]
struct ProvisioningFile {
    serial: u32,
    id_init: String,
    mf_key: String,
}

/// Provisions `count` finders. The same seed always yields the same batch.
pub fn manufacture(count: u32, seed: u64) -> Vec<ProvisioningRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count as usize);
    for serial in 0..count {
        let id_init = loop {
            let id = Identifier::random(&mut rng);
            if seen.insert(id) {
                break id;
            }
        };
        out.push(ProvisioningRecord {
            serial,
            id_init,
            mf_key: SecretKey::random(&mut rng),
        });
    }
    out
}

pub fn registry_of(records: &[ProvisioningRecord]) -> ManufacturerRegistry {
    let mut reg = ManufacturerRegistry::default();
    for r in records {
        reg.insert(r.id_init, r.mf_key);
    }
    reg
}

impl ProvisioningRecord {
    pub fn to_json(&self) -> String {
        let file = ProvisioningFile {
            serial: self.serial,
            id_init: self.id_init.to_hex(),
            mf_key: hex::encode(self.mf_key.as_bytes()),
        };
        serde_json::to_string(&file).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: ProvisioningFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let id_init = hex::decode(&file.id_init)
            .ok()
            .and_then(|b| Identifier::from_slice(&b).ok())
            .ok_or("bad id_init")?;
        let mf_key = hex::decode(&file.mf_key)
            .ok()
            .and_then(|b| SecretKey::from_slice(&b).ok())
            .ok_or("bad mf_key")?;
        Ok(Self {
            serial: file.serial,
            id_init,
            mf_key,
        })
    }
}

/// Writes the server registry to `registry_path` and one provisioning file
/// per finder into `finder_dir`. Returns the finder file paths.
pub fn write_batch(
    records: &[ProvisioningRecord],
    registry_path: &Path,
    finder_dir: &Path,
) -> io::Result<Vec<PathBuf>> {
    if let Some(parent) = registry_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(registry_path, registry_of(records).to_jsonl())?;
    fs::create_dir_all(finder_dir)?;
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let path = finder_dir.join(format!("finder-{:04}.json", r.serial));
        fs::write(&path, r.to_json() + "\n")?;
        paths.push(path);
    }
    Ok(paths)
}
