//! Nearline embedding cache keyed by `(item_id, model_version)`.
//!
//! With a backing file, every put is appended as
//! `u32 record_len | u32 id_len | id | u32 version_len | version | u64 updated_at | payload`
//! and the index is rebuilt by replaying the file on open. A torn final
//! record is ignored.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use mixlm_core::mix::encode_item;
use mixlm_core::model::Params;
use mixlm_core::Tensor;

use crate::error::{Result, ServeError};
use crate::payload::{decode_payload, encode_payload};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub item_id: String,
    pub model_version: String,
    /// `T_S x H` encoder rows.
    pub rows: Tensor<f64>,
    /// Milliseconds since the Unix epoch.
    pub updated_at: u64,
}

type Key = (String, String);

#[derive(Debug, Default)]
pub struct EmbeddingCache {
    index: RwLock<HashMap<Key, CacheEntry>>,
    widths: RwLock<HashMap<String, usize>>,
    log: Mutex<Option<File>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn encode_record(e: &CacheEntry) -> Result<Vec<u8>> {
    let payload = encode_payload(&e.rows)?;
    let mut body = Vec::new();
    body.extend_from_slice(&(e.item_id.len() as u32).to_le_bytes());
    body.extend_from_slice(e.item_id.as_bytes());
    body.extend_from_slice(&(e.model_version.len() as u32).to_le_bytes());
    body.extend_from_slice(e.model_version.as_bytes());
    body.extend_from_slice(&e.updated_at.to_le_bytes());
    body.extend_from_slice(&payload);
    let mut rec = (body.len() as u32).to_le_bytes().to_vec();
    rec.extend_from_slice(&body);
    Ok(rec)
}

fn decode_record(body: &[u8]) -> Result<CacheEntry> {
    let bad = |what: &str| ServeError::Io(std::io::Error::other(format!("cache log: bad {what}")));
    let mut at = 0;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let s = body.get(at..at + n).ok_or_else(|| bad(what))?;
        at += n;
        Ok(s)
    };
    let len = u32::from_le_bytes(take(4, "id length")?.try_into().expect("4")) as usize;
    let id = String::from_utf8(take(len, "id")?.to_vec()).map_err(|_| bad("id"))?;
    let len = u32::from_le_bytes(take(4, "version length")?.try_into().expect("4")) as usize;
    let version = String::from_utf8(take(len, "version")?.to_vec()).map_err(|_| bad("version"))?;
    let updated_at = u64::from_le_bytes(take(8, "timestamp")?.try_into().expect("8"));
    let rows = decode_payload::<f64>(&body[at..])?;
    Ok(CacheEntry {
        item_id: id,
        model_version: version,
        rows,
        updated_at,
    })
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a log-backed cache and replays it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(path)?.read_to_end(&mut bytes)?;
        }
        let cache = Self::default();
        let mut at = 0;
        let mut valid = 0;
        while at + 4 <= bytes.len() {
            let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4")) as usize;
            let Some(body) = bytes.get(at + 4..at + 4 + len) else { break };
            let e = decode_record(body)?;
            {
                let mut w = cache.widths.write().expect("lock");
                w.entry(e.model_version.clone()).or_insert(e.rows.cols());
            }
            cache
                .index
                .write()
                .expect("lock")
                .insert((e.item_id.clone(), e.model_version.clone()), e);
            at += 4 + len;
            valid = at;
        }
        if valid < bytes.len() {
            log::warn!("cache log {}: dropping {} torn bytes", path.display(), bytes.len() - valid);
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        file.set_len(valid as u64)?;
        *cache.log.lock().expect("lock") = Some(file);
        Ok(cache)
    }

    /// Declares the row width for a model version.
    pub fn register_version(&self, version: &str, width: usize) -> Result<()> {
        let mut w = self.widths.write().expect("lock");
        match w.get(version) {
            Some(&have) if have != width => Err(ServeError::Input(format!(
                "version {version} already registered with width {have}, not {width}"
            ))),
            _ => {
                w.insert(version.to_string(), width);
                Ok(())
            }
        }
    }

    pub fn width_of(&self, version: &str) -> Option<usize> {
        self.widths.read().expect("lock").get(version).copied()
    }

    pub fn put(&self, item_id: &str, version: &str, rows: Tensor<f64>) -> Result<()> {
        let width = self
            .width_of(version)
            .ok_or_else(|| ServeError::Input(format!("model version {version} is not registered")))?;
        if rows.shape().len() != 2 || rows.cols() != width || rows.rows() == 0 {
            return Err(ServeError::Input(format!(
                "rows of shape {:?} do not fit width {width} of version {version}",
                rows.shape()
            )));
        }
        let entry = CacheEntry {
            item_id: item_id.to_string(),
            model_version: version.to_string(),
            rows,
            updated_at: now_ms(),
        };
        let rec = encode_record(&entry)?;
        let mut log = self.log.lock().expect("lock");
        if let Some(f) = log.as_mut() {
            f.write_all(&rec)?;
        }
        self.index
            .write()
            .expect("lock")
            .insert((entry.item_id.clone(), entry.model_version.clone()), entry);
        Ok(())
    }

    pub fn get(&self, item_id: &str, version: &str) -> Option<Tensor<f64>> {
        self.entry(item_id, version).map(|e| e.rows)
    }

    pub fn entry(&self, item_id: &str, version: &str) -> Option<CacheEntry> {
        self.index
            .read()
            .expect("lock")
            .get(&(item_id.to_string(), version.to_string()))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(f) = self.log.lock().expect("lock").as_mut() {
            f.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RefreshReport {
    pub updated: usize,
    pub errors: Vec<(String, String)>,
}

/// Re-encodes changed items and upserts them. Repeated ids keep their last
/// occurrence. Per-item failures are collected, the rest still land.
pub fn refresh(
    cache: &EmbeddingCache,
    encoder: &Params<f64>,
    version: &str,
    changed: &[(String, Vec<u32>)],
    t_s: usize,
) -> Result<RefreshReport> {
    match cache.width_of(version) {
        Some(w) if w != encoder.config.hidden => {
            return Err(ServeError::Input(format!(
                "encoder width {} does not match version {version} ({w})",
                encoder.config.hidden
            )))
        }
        Some(_) => {}
        None => cache.register_version(version, encoder.config.hidden)?,
    }
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (i, (id, _)) in changed.iter().enumerate() {
        last.insert(id.as_str(), i);
    }
    let mut report = RefreshReport::default();
    for (i, (id, tokens)) in changed.iter().enumerate() {
        if last[id.as_str()] != i {
            continue;
        }
        match encode_item(encoder, tokens, t_s)
            .map_err(ServeError::from)
            .and_then(|rows| cache.put(id, version, rows))
        {
            Ok(()) => report.updated += 1,
            Err(e) => report.errors.push((id.clone(), e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixlm_core::model::{HeadMode, ModelConfig};

    fn rows(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 2], vec![v, -v]).unwrap()
    }

    #[test]
    fn put_get_and_isolation() {
        let c = EmbeddingCache::in_memory();
        c.register_version("v1", 2).unwrap();
        c.register_version("v2", 2).unwrap();
        c.put("a", "v1", rows(0.1)).unwrap();
        assert_eq!(c.get("a", "v1").unwrap(), rows(0.1));
        assert!(c.get("b", "v1").is_none());
        assert!(c.get("a", "v2").is_none());
        assert!(c.put("a", "v1", Tensor::zeros(&[1, 3])).is_err());
        assert!(c.put("a", "v9", rows(1.0)).is_err());
    }

    #[test]
    fn log_replay_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        {
            let c = EmbeddingCache::open(&path).unwrap();
            c.register_version("v", 2).unwrap();
            c.put("x", "v", rows(1.0)).unwrap();
            c.put("y", "v", rows(2.0)).unwrap();
            c.put("x", "v", rows(3.0)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[9, 0, 0]).unwrap();
        drop(f);
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("x", "v").unwrap(), rows(3.0));
        assert_eq!(c.width_of("v"), Some(2));
        c.put("z", "v", rows(4.0)).unwrap();
        drop(c);
        assert_eq!(EmbeddingCache::open(&path).unwrap().get("z", "v").unwrap(), rows(4.0));
    }

    #[test]
    fn refresh_semantics() {
        let cfg = ModelConfig {
            hidden: 8,
            ..ModelConfig::desk(HeadMode::None)
        };
        let enc = Params::<f64>::init(&cfg, 1).unwrap();
        let c = EmbeddingCache::in_memory();
        assert_eq!(refresh(&c, &enc, "v", &[], 1).unwrap().updated, 0);
        let r = refresh(&c, &enc, "v", &[("a".into(), vec![1, 2]), ("a".into(), vec![3, 4])], 1).unwrap();
        assert_eq!(r.updated, 1);
        assert_eq!(c.get("a", "v").unwrap(), encode_item(&enc, &[3, 4], 1).unwrap());
        let r = refresh(&c, &enc, "v", &[("b".into(), vec![1]), ("bad".into(), vec![500])], 1).unwrap();
        assert_eq!((r.updated, r.errors.len()), (1, 1));
    }
}
