use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::dataset::{ClassData, ClassId, Dataset, Impression, Sample};
use crate::error::{Error, Result};

/// `(class, impression) -> vector` table with a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<(ClassId, String), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, class: ClassId, impression: String, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("embedding", &[self.dim], &[v.len()]));
        }
        let key = (class, impression);
        if self.rows.contains_key(&key) {
            return Err(Error::Dataset(format!("duplicate key {}/{}", key.0, key.1)));
        }
        self.rows.insert(key, v);
        Ok(())
    }

    pub fn get(&self, class: &ClassId, impression: &str) -> Option<&[f64]> {
        self.rows
            .get(&(class.clone(), impression.to_string()))
            .map(Vec::as_slice)
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let crate::dataset::SampleKind::Embeddings { dim } = ds.kind() else {
            return Err(Error::Dataset("dataset holds images, not embeddings".into()));
        };
        let mut t = EmbeddingTable::new(dim);
        for c in ds.classes() {
            for imp in &c.impressions {
                t.insert(c.id.clone(), imp.id.clone(), imp.sample.values().to_vec())?;
            }
        }
        Ok(t)
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut by_class: BTreeMap<&ClassId, Vec<Impression>> = BTreeMap::new();
        for ((c, i), v) in &self.rows {
            by_class.entry(c).or_default().push(Impression {
                id: i.clone(),
                sample: Sample::Embedding(v.clone()),
            });
        }
        Dataset::new(
            by_class
                .into_iter()
                .map(|(id, impressions)| ClassData {
                    id: id.clone(),
                    impressions,
                })
                .collect(),
        )
    }
}

/// Reads a `class_id,impression_id,e0,...,e{d-1}` CSV.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let fmt_err = |line: u64, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => fmt_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "class_id" || &header[1] != "impression_id" {
        return Err(fmt_err(1, "header must be class_id,impression_id,e0,...".into()));
    }
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("e{k}") {
            return Err(fmt_err(1, format!("expected column e{k}, found {name}")));
        }
    }
    let dim = header.len() - 2;
    let mut table = EmbeddingTable::new(dim);
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fmt_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(fmt_err(
                line,
                format!(
                    "expected {dim} embedding values, found {}",
                    record.len().saturating_sub(2)
                ),
            ));
        }
        let values = record
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(line, format!("malformed value: {e}")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(line, "non-finite embedding value".into()));
        }
        let class = ClassId(record[0].to_string());
        let imp = record[1].to_string();
        if table.get(&class, &imp).is_some() {
            return Err(fmt_err(line, format!("duplicate key {class}/{imp}")));
        }
        table.insert(class, imp, values)?;
    }
    Ok(table)
}

/// Writes a table in the same CSV format, rows sorted by key. Values use the
/// shortest round-tripping decimal form.
pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut keys: Vec<&(ClassId, String)> = table.rows.keys().collect();
    keys.sort();
    let mut out = String::from("class_id,impression_id");
    for k in 0..table.dim {
        out.push_str(&format!(",e{k}"));
    }
    out.push('\n');
    for key in keys {
        out.push_str(&format!("{},{}", key.0, key.1));
        for v in &table.rows[key] {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn table(classes: usize, imps: usize, d: usize) -> EmbeddingTable {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut t = EmbeddingTable::new(d);
        for c in 0..classes {
            for i in 0..imps {
                let v = (0..d).map(|_| rng.random_range(-1.0..1.0) * 1e3).collect();
                t.insert(ClassId(format!("c{c}")), format!("i{i}"), v).unwrap();
            }
        }
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let t = table(3, 4, 8);
        write_embeddings(&t, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.len(), 12);
        assert_eq!(back.to_dataset().unwrap().num_classes(), 3);
    }

    #[test]
    fn short_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        std::fs::write(&path, "class_id,impression_id,e0,e1,e2\na,x,1,2,3\na,y,1,2\n").unwrap();
        let err = load_embeddings(&path).unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");
    }

    #[test]
    fn malformed_and_duplicate_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        std::fs::write(&path, "class_id,impression_id,e0\na,x,abc\n").unwrap();
        assert!(matches!(load_embeddings(&path), Err(Error::Format { line: 2, .. })));
        std::fs::write(&path, "class_id,impression_id,e0\na,x,1\na,x,2\n").unwrap();
        assert!(matches!(load_embeddings(&path), Err(Error::Format { line: 3, .. })));
        std::fs::write(&path, "class,impression,e0\n").unwrap();
        assert!(matches!(load_embeddings(&path), Err(Error::Format { line: 1, .. })));
    }
}
