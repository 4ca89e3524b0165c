//! Binary store file.
//!
//! ```text
//! magic[8] | version u32 | dimension u32 | header_len u32 | header JSON
//! | payload_len u64 | sha256(header JSON ++ payload)[32] | payload
//! ```
//!
//! The payload holds a record count followed by length-prefixed records
//! (id, composed text, metadata JSON, raw f64 vector), then an optional
//! HNSW section. All integers are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ChunkMetadata, Hnsw, HnswParams, IndexedChunk, StoreError, StoreHeader, VectorStore};
use crate::composer::EmbeddingVector;

pub const STORE_MAGIC: &[u8; 8] = b"CHOPVSTR";
pub const STORE_VERSION: u32 = 1;

const NO_ENTRY: u32 = u32::MAX;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| StoreError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], StoreError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, StoreError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| StoreError::Corrupt(e.to_string()))
    }
}

fn encode_header(store: &VectorStore) -> Vec<u8> {
    serde_json::to_vec(&store.header).expect("header serializes")
}

fn encode_payload(store: &VectorStore) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(store.items.len() as u64);
    for item in &store.items {
        let mut rec = Writer(Vec::new());
        rec.bytes(item.id.as_bytes());
        rec.bytes(item.x_text.as_bytes());
        rec.bytes(&serde_json::to_vec(&item.metadata).expect("metadata serializes"));
        for v in item.vector.values() {
            rec.u64(v.to_bits());
        }
        w.bytes(&rec.0);
    }
    match &store.ann {
        None => w.u8(0),
        Some(ann) => {
            w.u8(1);
            let p = ann.params();
            w.u32(p.m as u32);
            w.u32(p.ef_construction as u32);
            w.u32(p.ef_search as u32);
            w.u64(p.seed);
            w.u32(ann.max_level() as u32);
            w.u32(ann.entry().unwrap_or(NO_ENTRY));
            for node in ann.links() {
                w.u32(node.len() as u32);
                for layer in node {
                    w.u32(layer.len() as u32);
                    for &n in layer {
                        w.u32(n);
                    }
                }
            }
        }
    }
    w.0
}

fn digest(header: &[u8], payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(header);
    h.update(payload);
    h.finalize().into()
}

impl VectorStore {
    /// Hex SHA-256 over the serialized header and contents; equal stores
    /// have equal checksums.
    pub fn checksum(&self) -> String {
        hex::encode(digest(&encode_header(self), &encode_payload(self)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = encode_header(self);
        let payload = encode_payload(self);
        let mut w = Writer(Vec::with_capacity(payload.len() + header.len() + 64));
        w.0.extend_from_slice(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.u32(self.header.dimension as u32);
        w.bytes(&header);
        w.u64(payload.len() as u64);
        w.0.extend_from_slice(&digest(&header, &payload));
        w.0.extend_from_slice(&payload);
        w.0
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let buf = fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err(StoreError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(StoreError::Version {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let dimension = r.u32()? as usize;
        let header_bytes = r.bytes()?;
        let payload_len = r.u64()? as usize;
        let expected: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let payload = &buf[r.pos..];
        if payload.len() != payload_len {
            return Err(StoreError::Checksum(format!(
                "payload is {} bytes, header declares {payload_len}",
                payload.len()
            )));
        }
        if digest(header_bytes, payload) != expected {
            return Err(StoreError::Checksum("content digest differs".into()));
        }

        let header: StoreHeader =
            serde_json::from_slice(header_bytes).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        if header.dimension != dimension {
            return Err(StoreError::Corrupt("dimension fields disagree".into()));
        }

        let mut p = Reader { buf: payload, pos: 0 };
        let count = p.u64()? as usize;
        let mut store = VectorStore {
            header,
            items: Vec::with_capacity(count.min(1 << 20)),
            by_id: Default::default(),
            ann: None,
        };
        for _ in 0..count {
            let mut rec = Reader {
                buf: p.bytes()?,
                pos: 0,
            };
            let id = rec.string()?;
            let x_text = rec.string()?;
            let metadata: ChunkMetadata =
                serde_json::from_slice(rec.bytes()?).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            let values = (0..dimension)
                .map(|_| rec.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            store.insert(IndexedChunk {
                id,
                x_text,
                vector: EmbeddingVector::from_normalized(values),
                metadata,
            })?;
        }

        if p.u8()? == 1 {
            let params = HnswParams {
                m: p.u32()? as usize,
                ef_construction: p.u32()? as usize,
                ef_search: p.u32()? as usize,
                seed: p.u64()?,
            };
            let max_level = p.u32()? as usize;
            let entry = match p.u32()? {
                NO_ENTRY => None,
                e => Some(e),
            };
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let layers = p.u32()? as usize;
                let mut node = Vec::with_capacity(layers);
                for _ in 0..layers {
                    let n = p.u32()? as usize;
                    node.push((0..n).map(|_| p.u32()).collect::<Result<Vec<_>, _>>()?);
                }
                links.push(node);
            }
            store.ann = Some(Hnsw::from_parts(params, links, entry, max_level));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_store;
    use super::*;
    use crate::composer::EmbedderDescriptor;

    #[test]
    fn round_trip_preserves_search() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.chop");
        let mut store = random_store(10, 8, 3);
        store.build_ann(HnswParams::default());
        store.persist(&path).unwrap();
        let back = VectorStore::load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.checksum(), store.checksum());
        for item in store.items() {
            assert_eq!(
                back.search_exact(&item.vector, 10).unwrap(),
                store.search_exact(&item.vector, 10).unwrap()
            );
            assert_eq!(
                back.search_ann(&item.vector, 3).unwrap(),
                store.search_ann(&item.vector, 3).unwrap()
            );
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = random_store(10, 8, 3).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 100] {
            assert!(matches!(
                VectorStore::from_bytes(&bytes[..cut]),
                Err(StoreError::Checksum(_))
            ));
        }
        assert!(matches!(VectorStore::from_bytes(&bytes[..20]), Err(StoreError::Corrupt(_))));
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = random_store(4, 4, 1).to_bytes();
        let last = bytes.len() - 9;
        bytes[last] ^= 0x40;
        assert!(matches!(VectorStore::from_bytes(&bytes), Err(StoreError::Checksum(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = random_store(2, 4, 1).to_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(StoreError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn seed_difference_is_surfaced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.chop");
        random_store(3, 4, 1).persist(&path).unwrap();
        let back = VectorStore::load(&path).unwrap();
        let warnings = back.embedder_warnings(&EmbedderDescriptor::local_hash(4, 42));
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("seed"));
        assert!(back.embedder_warnings(&EmbedderDescriptor::local_hash(4, 0)).is_empty());
    }
}
