//! Persistent store of model records, dataset sketches and MinHash band tables.
//!
//! File layout (little endian):
//!
//! ```text
//! magic "FITSREG\0" | u32 format_version | u64 manifest_len | manifest JSON
//! | sha256(manifest) | blob 0 | blob 1 | ...
//! ```
//!
//! Each blob is the JSON encoding of one model's sketch and feature
//! signatures; its offset, length and sha256 live in the manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hashing::digest_values;
use crate::lsh::{JsLshParams, MinHashParams, MinHasher, Signature};
use crate::sketch::{feature_token_sets, DatasetSketch, FeatureId};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FITSREG\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub display_name: String,
    pub task_tag: String,
    pub source_accuracy: Option<f64>,
    pub dataset_id: String,
    pub created_at: DateTime<Utc>,
    pub notes: String,
}

impl ModelRecord {
    pub fn new(model_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        let model_id = model_id.into();
        ModelRecord {
            display_name: model_id.clone(),
            model_id,
            task_tag: String::new(),
            source_accuracy: None,
            dataset_id: dataset_id.into(),
            created_at: Utc::now(),
            notes: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.trim().is_empty() {
            return Err(Error::Invalid("model_id must not be empty".into()));
        }
        if let Some(a) = self.source_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Invalid(format!("source_accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Hash-family and quantization parameters shared by every stored sketch.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryParams {
    pub minhash: MinHashParams,
    pub jslsh: JsLshParams,
    pub bins_per_numeric_feature: u32,
}

impl Default for RegistryParams {
    fn default() -> Self {
        RegistryParams {
            minhash: MinHashParams::default(),
            jslsh: JsLshParams::default(),
            bins_per_numeric_feature: 32,
        }
    }
}

impl RegistryParams {
    pub fn validate(&self) -> Result<()> {
        self.minhash.validate()?;
        self.jslsh.validate()?;
        if self.bins_per_numeric_feature == 0 {
            return Err(Error::Invalid("bins_per_numeric_feature must be at least 1".into()));
        }
        Ok(())
    }

    /// Reject sketches built with different quantization.
    pub fn check_sketch(&self, sketch: &DatasetSketch) -> Result<()> {
        if sketch.bins_per_numeric_feature != self.bins_per_numeric_feature {
            return Err(Error::Params(format!(
                "sketch `{}` uses {} bins per numeric feature, registry expects {}",
                sketch.dataset_id, sketch.bins_per_numeric_feature, self.bins_per_numeric_feature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Posting {
    pub model_id: String,
    pub feature_id: FeatureId,
    pub values: Vec<u64>,
}

/// One band's hash table: signature digest to postings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BandTable {
    pub band_index: u32,
    buckets: HashMap<u64, BTreeSet<Posting>>,
}

impl BandTable {
    fn insert(&mut self, posting: Posting) {
        self.buckets.entry(digest_values(&posting.values)).or_default().insert(posting);
    }

    fn remove(&mut self, posting: &Posting) {
        let d = digest_values(&posting.values);
        if let Some(set) = self.buckets.get_mut(&d) {
            set.remove(posting);
            if set.is_empty() {
                self.buckets.remove(&d);
            }
        }
    }

    /// Postings whose full signature equals `values`.
    pub fn probe<'a>(&'a self, values: &'a [u64]) -> impl Iterator<Item = &'a Posting> + 'a {
        self.buckets
            .get(&digest_values(values))
            .into_iter()
            .flatten()
            .filter(move |p| p.values == values)
    }

    pub fn num_postings(&self) -> usize {
        self.buckets.values().map(BTreeSet::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisteredModel {
    pub record: ModelRecord,
    pub sketch: DatasetSketch,
    /// MinHash signatures of every feature's distinct bin tokens.
    pub feature_signatures: BTreeMap<FeatureId, Vec<Signature>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReceipt {
    pub model_id: String,
    pub manifest_version: u64,
    pub num_features: usize,
    pub num_partitions: usize,
    pub postings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalReceipt {
    pub model_id: String,
    pub manifest_version: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    record: ModelRecord,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub format_version: u32,
    pub params: RegistryParams,
    /// Incremented by every registration and removal.
    pub manifest_version: u64,
    models: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    sketch: DatasetSketch,
    feature_signatures: Vec<(FeatureId, Vec<Signature>)>,
}

/// In-memory registry. Many readers or one writer; wrap in a lock to share.
#[derive(Clone, Debug)]
pub struct Registry {
    params: RegistryParams,
    hasher: MinHasher,
    manifest_version: u64,
    models: BTreeMap<String, RegisteredModel>,
    bands: Vec<BandTable>,
}

impl PartialEq for Registry {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.manifest_version == other.manifest_version
            && self.models == other.models
            && self.bands == other.bands
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(RegistryParams::default()).expect("default params are valid")
    }
}

impl Registry {
    pub fn new(params: RegistryParams) -> Result<Self> {
        params.validate()?;
        Ok(Registry {
            hasher: MinHasher::new(params.minhash)?,
            params,
            manifest_version: 0,
            models: BTreeMap::new(),
            bands: (0..params.minhash.num_bands)
                .map(|b| BandTable { band_index: b as u32, ..Default::default() })
                .collect(),
        })
    }

    pub fn params(&self) -> &RegistryParams {
        &self.params
    }

    pub fn minhasher(&self) -> &MinHasher {
        &self.hasher
    }

    pub fn manifest_version(&self) -> u64 {
        self.manifest_version
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, model_id: &str) -> Option<&RegisteredModel> {
        self.models.get(model_id)
    }

    /// Registered models in `model_id` order.
    pub fn models(&self) -> impl Iterator<Item = &RegisteredModel> {
        self.models.values()
    }

    pub fn records(&self) -> Vec<ModelRecord> {
        self.models.values().map(|m| m.record.clone()).collect()
    }

    pub fn band_tables(&self) -> &[BandTable] {
        &self.bands
    }

    /// MinHash signatures of every non-empty feature of `sketch`.
    pub fn feature_signatures(&self, sketch: &DatasetSketch) -> Result<BTreeMap<FeatureId, Vec<Signature>>> {
        feature_token_sets(sketch)
            .into_iter()
            .filter(|(_, tokens)| !tokens.is_empty())
            .map(|(id, tokens)| Ok((id, self.hasher.signatures(&tokens)?)))
            .collect()
    }

    pub fn register(&mut self, record: ModelRecord, sketch: DatasetSketch) -> Result<RegistrationReceipt> {
        record.validate()?;
        if self.models.contains_key(&record.model_id) {
            return Err(Error::Conflict(format!("model `{}` already registered", record.model_id)));
        }
        sketch.validate()?;
        self.params.check_sketch(&sketch)?;
        if record.dataset_id != sketch.dataset_id {
            return Err(Error::Invalid(format!(
                "record references dataset `{}` but the sketch is `{}`",
                record.dataset_id, sketch.dataset_id
            )));
        }
        let feature_signatures = self.feature_signatures(&sketch)?;
        // nothing below can fail
        let model = RegisteredModel { record, sketch, feature_signatures };
        let postings = self.insert_postings(&model);
        self.manifest_version += 1;
        let receipt = RegistrationReceipt {
            model_id: model.record.model_id.clone(),
            manifest_version: self.manifest_version,
            num_features: model.sketch.descriptors.len(),
            num_partitions: model.sketch.num_partitions(),
            postings,
        };
        self.models.insert(model.record.model_id.clone(), model);
        Ok(receipt)
    }

    fn postings_of(model: &RegisteredModel) -> impl Iterator<Item = (usize, Posting)> + '_ {
        model.feature_signatures.iter().flat_map(move |(fid, sigs)| {
            sigs.iter().map(move |s| {
                (
                    s.band_index as usize,
                    Posting {
                        model_id: model.record.model_id.clone(),
                        feature_id: *fid,
                        values: s.values.clone(),
                    },
                )
            })
        })
    }

    fn insert_postings(&mut self, model: &RegisteredModel) -> usize {
        let mut n = 0;
        for (band, posting) in Self::postings_of(model) {
            self.bands[band].insert(posting);
            n += 1;
        }
        n
    }

    pub fn remove(&mut self, model_id: &str) -> Result<RemovalReceipt> {
        let model = self
            .models
            .remove(model_id)
            .ok_or_else(|| Error::NotFound(format!("model `{model_id}`")))?;
        for (band, posting) in Self::postings_of(&model) {
            self.bands[band].remove(&posting);
        }
        self.manifest_version += 1;
        Ok(RemovalReceipt { model_id: model_id.to_string(), manifest_version: self.manifest_version })
    }

    /// Serialize to the container format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.models.len());
        for m in self.models.values() {
            let blob = serde_json::to_vec(&Blob {
                sketch: m.sketch.clone(),
                feature_signatures: m.feature_signatures.iter().map(|(k, v)| (*k, v.clone())).collect(),
            })
            .map_err(|e| Error::Format(e.to_string()))?;
            entries.push(ManifestEntry {
                record: m.record.clone(),
                offset: blobs.len() as u64,
                length: blob.len() as u64,
                sha256: hex::encode(Sha256::digest(&blob)),
            });
            blobs.extend_from_slice(&blob);
        }
        let manifest = RegistryManifest {
            format_version: FORMAT_VERSION,
            params: self.params,
            manifest_version: self.manifest_version,
            models: entries,
        };
        let manifest = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + manifest.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&Sha256::digest(&manifest));
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Format("not a registry file".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "registry format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let manifest_bytes = cur.take(usize::try_from(len).map_err(|_| corrupt("manifest length"))?)?;
        let checksum = cur.take(32)?;
        if Sha256::digest(manifest_bytes).as_slice() != checksum {
            return Err(corrupt("manifest checksum mismatch"));
        }
        let manifest: RegistryManifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("manifest format version {}", manifest.format_version)));
        }
        let blobs = &bytes[cur.pos..];
        let mut reg = Registry::new(manifest.params)?;
        for entry in manifest.models {
            let id = entry.record.model_id.clone();
            let start = usize::try_from(entry.offset).map_err(|_| corrupt("blob offset"))?;
            let end = start
                .checked_add(usize::try_from(entry.length).map_err(|_| corrupt("blob length"))?)
                .ok_or_else(|| corrupt("blob length"))?;
            let blob = blobs
                .get(start..end)
                .ok_or_else(|| corrupt(&format!("blob of `{id}` truncated")))?;
            if hex::encode(Sha256::digest(blob)) != entry.sha256 {
                return Err(corrupt(&format!("blob of `{id}` checksum mismatch")));
            }
            let blob: Blob = serde_json::from_slice(blob).map_err(|e| corrupt(&format!("blob of `{id}`: {e}")))?;
            blob.sketch.validate()?;
            reg.params.check_sketch(&blob.sketch)?;
            let feature_signatures: BTreeMap<_, _> = blob.feature_signatures.into_iter().collect();
            reg.check_signatures(&id, &feature_signatures)?;
            let model = RegisteredModel { record: entry.record, sketch: blob.sketch, feature_signatures };
            reg.insert_postings(&model);
            if reg.models.insert(id.clone(), model).is_some() {
                return Err(corrupt(&format!("duplicate model `{id}`")));
            }
        }
        reg.manifest_version = manifest.manifest_version;
        Ok(reg)
    }

    fn check_signatures(&self, id: &str, sigs: &BTreeMap<FeatureId, Vec<Signature>>) -> Result<()> {
        let p = &self.params.minhash;
        for s in sigs.values() {
            let ok = s.len() == p.num_bands
                && s.iter()
                    .enumerate()
                    .all(|(b, sig)| sig.band_index as usize == b && sig.values.len() == p.k_per_band);
            if !ok {
                return Err(Error::Params(format!("signatures of `{id}` do not match the manifest parameters")));
            }
        }
        Ok(())
    }

    /// Atomically write the registry to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Corruption(msg.to_string())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt("file truncated")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{ingest_table, FeatureKind, IngestOptions, Value};

    fn sketch(id: &str, offset: f64, n: usize) -> DatasetSketch {
        let rows: Vec<_> = (0..n)
            .map(|i| {
                vec![
                    Some(Value::Number(((i * 7) % 13) as f64 / 13.0 + offset)),
                    Some(Value::from(["a", "b", "c"][i % 3])),
                ]
            })
            .collect();
        let schema = vec![("x".into(), FeatureKind::Numeric), ("c".into(), FeatureKind::Categorical)];
        let mut opts = IngestOptions { partition_size: 10, ..Default::default() };
        opts.ranges.insert("x".into(), (0.0, 2.0));
        ingest_table(id, &rows, &schema, &opts).unwrap()
    }

    fn register(reg: &mut Registry, model: &str, data: &str, offset: f64) {
        reg.register(ModelRecord::new(model, data), sketch(data, offset, 40)).unwrap();
    }

    #[test]
    fn register_and_lookup() {
        let mut reg = Registry::default();
        let rec = ModelRecord::new("m1", "d1");
        let receipt = reg.register(rec.clone(), sketch("d1", 0.0, 40)).unwrap();
        assert_eq!(receipt.manifest_version, 1);
        assert_eq!(reg.get("m1").unwrap().record, rec);
        assert_eq!(receipt.postings, 2 * reg.params().minhash.num_bands);
    }

    #[test]
    fn duplicate_is_conflict_and_params_checked() {
        let mut reg = Registry::default();
        register(&mut reg, "m1", "d1", 0.0);
        let err = reg.register(ModelRecord::new("m1", "d1"), sketch("d1", 0.0, 40)).unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
        let mut s = sketch("d2", 0.0, 40);
        s.bins_per_numeric_feature = 8;
        assert!(matches!(reg.register(ModelRecord::new("m2", "d2"), s), Err(Error::Params(_))));
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.manifest_version(), 1);
    }

    #[test]
    fn identical_datasets_share_postings() {
        let mut reg = Registry::default();
        register(&mut reg, "a", "d", 0.0);
        reg.register(ModelRecord::new("b", "d"), sketch("d", 0.0, 40)).unwrap();
        let sig_a = &reg.get("a").unwrap().feature_signatures;
        for (fid, sigs) in sig_a {
            for s in sigs {
                let models: BTreeSet<_> = reg.bands[s.band_index as usize]
                    .probe(&s.values)
                    .filter(|p| p.feature_id == *fid)
                    .map(|p| p.model_id.as_str())
                    .collect();
                assert_eq!(models, BTreeSet::from(["a", "b"]));
            }
        }
    }

    #[test]
    fn remove_cleans_postings() {
        let mut reg = Registry::default();
        register(&mut reg, "a", "d1", 0.0);
        register(&mut reg, "b", "d2", 0.5);
        reg.remove("a").unwrap();
        assert!(reg.bands.iter().flat_map(|b| b.buckets.values().flatten()).all(|p| p.model_id == "b"));
        assert!(matches!(reg.remove("a"), Err(Error::NotFound(_))));
    }

    #[test]
    fn round_trip_and_failures() {
        let mut reg = Registry::default();
        for i in 0..5 {
            register(&mut reg, &format!("m{i}"), &format!("d{i}"), i as f64 * 0.2);
        }
        let bytes = reg.to_bytes().unwrap();
        let back = Registry::from_bytes(&bytes).unwrap();
        assert_eq!(back, reg);

        for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Registry::from_bytes(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 5;
        flipped[last] ^= 0x01;
        assert!(matches!(Registry::from_bytes(&flipped), Err(Error::Corruption(_))));

        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(Registry::from_bytes(&wrong), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.fsr");
        let mut reg = Registry::default();
        register(&mut reg, "m", "d", 0.0);
        reg.save(&path).unwrap();
        assert_eq!(Registry::load(&path).unwrap(), reg);
    }
}
