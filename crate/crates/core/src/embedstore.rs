//! Embedding containers, annotations and captions.
//!
//! A container is three sibling files sharing a stem:
//!
//! - `<name>.meta.json`: `{"format_version":1,"count":N,"dim":D,"dtype":"f32","normalized":bool}`
//! - `<name>.ids.txt`: one UTF-8 id per line
//! - `<name>.f32`: `N*D` row-major little-endian `f32` values
//!
//! Stores are validated on construction, so every `EmbeddingStore` in memory
//! holds finite values, unique ids and (when flagged) unit-norm rows.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
const META_SUFFIX: &str = ".meta.json";
const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed meta: {0}")]
    MalformedMeta(String),
    #[error("payload holds {actual} bytes, expected {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("ids file holds {actual} ids, expected {expected}")]
    IdCountMismatch { expected: usize, actual: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid id at row {row}: ids must be non-empty and single-line")]
    InvalidId { row: usize },
    #[error("row {row} has norm {norm} but the store is declared normalized")]
    NormViolation { row: usize, norm: f64 },
    #[error("non-finite value at row {row}, column {col}")]
    RejectedValue { row: usize, col: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: empty id")]
    EmptyId { line: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
struct Meta {
    format_version: u32,
    count: usize,
    dim: usize,
    dtype: String,
    normalized: bool,
}

/// Paths of the three files making up one container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerPaths {
    pub meta: PathBuf,
    pub ids: PathBuf,
    pub payload: PathBuf,
}

impl ContainerPaths {
    pub fn from_meta(meta_path: &Path) -> Result<Self, StoreError> {
        let name = meta_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| StoreError::MalformedMeta(format!("bad path {}", meta_path.display())))?;
        let stem = name.strip_suffix(META_SUFFIX).ok_or_else(|| {
            StoreError::MalformedMeta(format!("{} does not end in {META_SUFFIX}", meta_path.display()))
        })?;
        if stem.is_empty() {
            return Err(StoreError::MalformedMeta("empty container name".into()));
        }
        let sibling = |ext: &str| meta_path.with_file_name(format!("{stem}{ext}"));
        Ok(Self {
            meta: meta_path.to_path_buf(),
            ids: sibling(".ids.txt"),
            payload: sibling(".f32"),
        })
    }
}

/// An immutable N×D matrix of embeddings keyed by string ids.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    data: Vec<f32>,
    dim: usize,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingStore {
    /// Bitwise comparison so NaN-free round trips can be asserted exactly.
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
            && self.dim == other.dim
            && self.normalized == other.normalized
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, data: Vec<f32>, dim: usize, normalized: bool) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::MalformedMeta("dim must be positive".into()));
        }
        let expected = ids.len() * dim;
        if data.len() != expected {
            return Err(StoreError::SizeMismatch {
                expected: expected as u64 * 4,
                actual: data.len() as u64 * 4,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains('\n') || id.contains('\r') {
                return Err(StoreError::InvalidId { row });
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if let Some(col) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::RejectedValue { row, col });
            }
            if normalized {
                let norm = chunk.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NormViolation { row, norm });
                }
            }
        }
        Ok(Self {
            ids,
            data,
            dim,
            normalized,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + Clone + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    /// Loads a container given the path of its `.meta.json` file.
    pub fn load(meta_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let paths = ContainerPaths::from_meta(meta_path.as_ref())?;
        let meta_bytes = fs::read(&paths.meta).map_err(io_err(&paths.meta))?;
        let meta: Meta = serde_json::from_slice(&meta_bytes).map_err(|e| StoreError::MalformedMeta(e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(StoreError::MalformedMeta(format!(
                "unsupported format_version {}",
                meta.format_version
            )));
        }
        if meta.dtype != "f32" {
            return Err(StoreError::MalformedMeta(format!("unsupported dtype {:?}", meta.dtype)));
        }
        if meta.dim == 0 {
            return Err(StoreError::MalformedMeta("dim must be positive".into()));
        }

        let expected_bytes = (meta.count as u64)
            .checked_mul(meta.dim as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::MalformedMeta("count*dim overflows".into()))?;
        let payload = File::open(&paths.payload).map_err(io_err(&paths.payload))?;
        let actual_bytes = payload.metadata().map_err(io_err(&paths.payload))?.len();
        if actual_bytes != expected_bytes {
            return Err(StoreError::SizeMismatch {
                expected: expected_bytes,
                actual: actual_bytes,
            });
        }

        let ids_file = File::open(&paths.ids).map_err(io_err(&paths.ids))?;
        let mut ids = Vec::with_capacity(meta.count);
        for line in BufReader::new(ids_file).lines() {
            let line = line.map_err(io_err(&paths.ids))?;
            ids.push(line.strip_suffix('\r').map(str::to_owned).unwrap_or(line));
        }
        if ids.len() != meta.count {
            return Err(StoreError::IdCountMismatch {
                expected: meta.count,
                actual: ids.len(),
            });
        }

        let mut data = vec![0f32; meta.count * meta.dim];
        BufReader::with_capacity(1 << 16, payload)
            .read_f32_into::<LittleEndian>(&mut data)
            .map_err(io_err(&paths.payload))?;

        Self::new(ids, data, meta.dim, meta.normalized)
    }

    /// Writes the three container files. The meta file is written last so a
    /// partially written container fails to load.
    pub fn save(&self, meta_path: impl AsRef<Path>) -> Result<(), StoreError> {
        let paths = ContainerPaths::from_meta(meta_path.as_ref())?;

        let file = File::create(&paths.payload).map_err(io_err(&paths.payload))?;
        let mut w = BufWriter::with_capacity(1 << 16, file);
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v).map_err(io_err(&paths.payload))?;
        }
        w.flush().map_err(io_err(&paths.payload))?;

        let file = File::create(&paths.ids).map_err(io_err(&paths.ids))?;
        let mut w = BufWriter::new(file);
        for id in &self.ids {
            writeln!(w, "{id}").map_err(io_err(&paths.ids))?;
        }
        w.flush().map_err(io_err(&paths.ids))?;

        let meta = Meta {
            format_version: FORMAT_VERSION,
            count: self.len(),
            dim: self.dim,
            dtype: "f32".into(),
            normalized: self.normalized,
        };
        let mut json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        json.push(b'\n');
        fs::write(&paths.meta, json).map_err(io_err(&paths.meta))
    }
}

/// A parsed id-keyed record file plus the number of ids that were
/// overridden by a later line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Loaded<T> {
    pub records: T,
    pub duplicates: usize,
}

/// Image id to annotation labels (e.g. class names).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet(pub BTreeMap<String, Vec<String>>);

/// Image id to generated captions. Lists are never empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet(pub BTreeMap<String, Vec<String>>);

#[derive(Deserialize)]
struct AnnotationLine {
    id: String,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    captions: Vec<String>,
}

impl AnnotationSet {
    pub fn get(&self, id: &str) -> Option<&[String]> {
        self.0.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl CaptionSet {
    pub fn get(&self, id: &str) -> Option<&[String]> {
        self.0.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Reads a line-delimited JSON file, handing each non-blank line (with its
/// 1-based number) to `visit`.
pub(crate) fn for_each_json_line<T, F>(path: &Path, mut visit: F) -> Result<(), StoreError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<(), StoreError>,
{
    let file = File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| StoreError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        visit(line_no, record)?;
    }
    Ok(())
}

fn insert_last_wins(map: &mut BTreeMap<String, Vec<String>>, duplicates: &mut usize, id: String, values: Vec<String>) {
    if map.insert(id, values).is_some() {
        *duplicates += 1;
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Loaded<AnnotationSet>, StoreError> {
    let mut map = BTreeMap::new();
    let mut duplicates = 0;
    for_each_json_line(path.as_ref(), |line, rec: AnnotationLine| {
        if rec.id.is_empty() {
            return Err(StoreError::EmptyId { line });
        }
        insert_last_wins(&mut map, &mut duplicates, rec.id, rec.labels);
        Ok(())
    })?;
    Ok(Loaded {
        records: AnnotationSet(map),
        duplicates,
    })
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Loaded<CaptionSet>, StoreError> {
    let mut map = BTreeMap::new();
    let mut duplicates = 0;
    for_each_json_line(path.as_ref(), |line, rec: CaptionLine| {
        if rec.id.is_empty() {
            return Err(StoreError::EmptyId { line });
        }
        if rec.captions.is_empty() {
            return Err(StoreError::MalformedLine {
                line,
                reason: "captions must be non-empty".into(),
            });
        }
        insert_last_wins(&mut map, &mut duplicates, rec.id, rec.captions);
        Ok(())
    })?;
    Ok(Loaded {
        records: CaptionSet(map),
        duplicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(dir: &Path, meta: &str, ids: &str, payload: &[u8]) -> PathBuf {
        let meta_path = dir.join("emb.meta.json");
        fs::write(&meta_path, meta).unwrap();
        fs::write(dir.join("emb.ids.txt"), ids).unwrap();
        fs::write(dir.join("emb.f32"), payload).unwrap();
        meta_path
    }

    fn f32_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn loads_two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"format_version":1,"count":2,"dim":3,"dtype":"f32","normalized":false}"#;
        let path = write_raw(dir.path(), meta, "a\nb\n", &f32_bytes(&[1., 2., 3., 4., 5., 6.]));
        let store = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dim(), 3);
        assert_eq!(store.get("b").unwrap(), &[4., 5., 6.]);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"format_version":1,"count":2,"dim":3,"dtype":"f32","normalized":false}"#;
        let path = write_raw(dir.path(), meta, "a\nb\n", &[0u8; 20]);
        match EmbeddingStore::load(&path) {
            Err(StoreError::SizeMismatch {
                expected: 24,
                actual: 20,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalized_flag_checks_norms() {
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"format_version":1,"count":1,"dim":3,"dtype":"f32","normalized":true}"#;
        let path = write_raw(dir.path(), meta, "a\n", &f32_bytes(&[3., 4., 0.]));
        match EmbeddingStore::load(&path) {
            Err(StoreError::NormViolation { row: 0, norm }) => assert!((norm - 5.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_bad_ids_rejected() {
        let err = EmbeddingStore::new(vec!["a".into(), "a".into()], vec![0.; 2], 1, false);
        assert!(matches!(err, Err(StoreError::DuplicateId(_))));
        let err = EmbeddingStore::new(vec!["".into()], vec![0.], 1, false);
        assert!(matches!(err, Err(StoreError::InvalidId { row: 0 })));
    }

    #[test]
    fn malformed_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(dir.path(), "{\"count\":1}", "a\n", &[0u8; 4]);
        assert!(matches!(EmbeddingStore::load(&path), Err(StoreError::MalformedMeta(_))));
        let wrong = dir.path().join("emb.json");
        assert!(matches!(
            EmbeddingStore::load(&wrong),
            Err(StoreError::MalformedMeta(_))
        ));
    }

    #[test]
    fn id_count_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"format_version":1,"count":2,"dim":1,"dtype":"f32","normalized":false}"#;
        let path = write_raw(dir.path(), meta, "a\n", &f32_bytes(&[1., 2.]));
        assert!(matches!(
            EmbeddingStore::load(&path),
            Err(StoreError::IdCountMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn nan_rejected() {
        let err = EmbeddingStore::new(vec!["x".into()], vec![f32::NAN], 1, false);
        assert!(matches!(err, Err(StoreError::RejectedValue { row: 0, col: 0 })));
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"format_version":1,"count":1,"dim":1,"dtype":"f32","normalized":false}"#;
        let path = write_raw(dir.path(), meta, "x\n", &f32_bytes(&[f32::INFINITY]));
        assert!(matches!(
            EmbeddingStore::load(&path),
            Err(StoreError::RejectedValue { .. })
        ));
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.meta.json");
        let store = EmbeddingStore::new(vec![], vec![], 4, true).unwrap();
        store.save(&path).unwrap();
        assert_eq!(fs::metadata(dir.path().join("empty.f32")).unwrap().len(), 0);
        assert_eq!(EmbeddingStore::load(&path).unwrap(), store);
    }

    #[test]
    fn record_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"labels\":[\"gun\"]}\n{\"id\":\"b\",\"labels\":[]}\n{\"id\":\"a\",\"labels\":[\"x\"]}\n",
        )
        .unwrap();
        let loaded = load_annotations(&p).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.duplicates, 1);
        assert_eq!(loaded.records.get("a").unwrap(), &["x".to_string()]);

        fs::write(
            &p,
            "{\"id\":\"a\",\"captions\":[\"c\"]}\n{\"id\":\"b\",\"captions\":[\"d\"]}\n",
        )
        .unwrap();
        assert_eq!(load_captions(&p).unwrap().records.len(), 2);

        fs::write(
            &p,
            "{\"id\":\"a\",\"captions\":[\"c\"]}\n{\"id\":\"b\",\"captions\":[]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_captions(&p),
            Err(StoreError::MalformedLine { line: 2, .. })
        ));

        fs::write(&p, "{\"id\":\"\",\"captions\":[\"c\"]}\n").unwrap();
        assert!(matches!(load_captions(&p), Err(StoreError::EmptyId { line: 1 })));

        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(
            load_annotations(&p),
            Err(StoreError::MalformedLine { line: 1, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn save_load_is_bit_exact(
            rows in 0usize..6,
            dim in 1usize..6,
            seed in proptest::collection::vec(
                any::<f32>().prop_filter("finite", |v| v.is_finite()), 36),
        ) {
            let data: Vec<f32> = seed.into_iter().take(rows * dim).collect();
            prop_assume!(data.len() == rows * dim);
            let ids = (0..rows).map(|i| format!("id-{i}")).collect();
            let store = EmbeddingStore::new(ids, data, dim, false).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.meta.json");
            store.save(&path).unwrap();
            prop_assert_eq!(EmbeddingStore::load(&path).unwrap(), store);
        }
    }
}
