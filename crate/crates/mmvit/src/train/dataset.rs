//! On-disk datasets: a TSV manifest (`path<TAB>comma-separated class
//! ids`), a `classes.txt` id↔name map, and per-sample feature tensors
//! stored as NTC files. Also a synthetic-dataset generator for smoke
//! tests and the overfit check.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontend::ntc::{read_ntc, write_ntc};
use crate::frontend::FormatError;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("classes.txt line {line}: {msg}")]
    Classes { line: usize, msg: String },
    #[error("sample {index} ({path}): {msg}")]
    Sample { index: usize, path: String, msg: String },
    #[error("{path}: {source}")]
    Feature { path: String, source: FormatError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One manifest row: a feature file relative to the dataset root plus
/// its class-id set.
#[derive(Debug, Clone)]
pub struct Item {
    pub path: String,
    pub labels: Vec<usize>,
}

#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<Item>,
    pub classes: Vec<String>,
}

/// Parse manifest text: one `path<TAB>id[,id…]` row per line; blank
/// lines and `#` comments are skipped; ids must be unique per row.
pub fn parse_manifest(text: &str) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() || row.trim_start().starts_with('#') {
            continue;
        }
        let (path, ids) = row.split_once('\t').ok_or_else(|| DatasetError::Manifest {
            line,
            msg: "expected `path<TAB>class-ids`".into(),
        })?;
        if path.is_empty() {
            return Err(DatasetError::Manifest { line, msg: "empty path".into() });
        }
        let mut labels = Vec::new();
        for id in ids.split(',') {
            let id = id.trim();
            let n: usize = id.parse().map_err(|_| DatasetError::Manifest {
                line,
                msg: format!("bad class id `{id}`"),
            })?;
            if labels.contains(&n) {
                return Err(DatasetError::Manifest {
                    line,
                    msg: format!("duplicate class id {n}"),
                });
            }
            labels.push(n);
        }
        if labels.is_empty() {
            return Err(DatasetError::Manifest { line, msg: "no class ids".into() });
        }
        items.push(Item { path: path.to_string(), labels });
    }
    Ok(items)
}

/// Parse `classes.txt`: one name per line, id = 0-based line position.
pub fn parse_classes(text: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let name = raw.trim();
        if name.is_empty() {
            return Err(DatasetError::Classes { line: i + 1, msg: "empty class name".into() });
        }
        names.push(name.to_string());
    }
    Ok(names)
}

impl Dataset {
    /// Read `manifest.tsv` and `classes.txt` from `dir` and validate
    /// every class id against the class list.
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
        let classes = parse_classes(&std::fs::read_to_string(dir.join("classes.txt"))?)?;
        let items = parse_manifest(&manifest)?;
        for (index, item) in items.iter().enumerate() {
            for &c in &item.labels {
                if c >= classes.len() {
                    return Err(DatasetError::Sample {
                        index,
                        path: item.path.clone(),
                        msg: format!("class id {c} out of range ({} classes)", classes.len()),
                    });
                }
            }
        }
        Ok(Dataset { root: dir.to_path_buf(), items, classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Load sample `i`'s features and check they are (T, F) rank 2.
    pub fn features(&self, i: usize) -> Result<Tensor<f32>> {
        let item = &self.items[i];
        let t = read_ntc(&self.root.join(&item.path))
            .map_err(|source| DatasetError::Feature { path: item.path.clone(), source })?;
        if t.rank() != 2 {
            return Err(DatasetError::Sample {
                index: i,
                path: item.path.clone(),
                msg: format!("features must be rank 2, got {:?}", t.shape()),
            });
        }
        Ok(t)
    }

    /// Multi-hot label row of width `classes.len()`.
    pub fn multi_hot(&self, i: usize) -> Vec<f32> {
        let mut row = vec![0.0f32; self.classes.len()];
        for &c in &self.items[i].labels {
            row[c] = 1.0;
        }
        row
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.items.iter().map(|it| it.labels.clone()).collect()
    }
}

/// Write a synthetic single-label dataset under `dir`: each class gets
/// a distinct frequency band raised well above the noise floor, so a
/// small model can separate the classes quickly. Samples are assigned
/// labels round-robin.
pub fn make_synthetic(
    dir: &Path,
    n: usize,
    num_classes: usize,
    frames: usize,
    mels: usize,
    seed: u64,
) -> Result<()> {
    assert!(num_classes > 0 && num_classes <= mels, "one band per class must fit");
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = mels / num_classes;
    let mut manifest = String::new();
    for i in 0..n {
        let class = i % num_classes;
        let mut data = vec![0.0f32; frames * mels];
        for v in &mut data {
            *v = rng.gen_range(-0.2..0.2);
        }
        let (lo, hi) = (class * band, (class + 1) * band);
        for t in 0..frames {
            let wobble = (t as f32 * 0.07 + i as f32).sin() * 0.3;
            for f in lo..hi {
                data[t * mels + f] += 2.0 + wobble;
            }
        }
        let name = format!("feat_{i:04}.ntc");
        let tensor = Tensor::from_vec(vec![frames, mels], data).expect("shape matches data");
        write_ntc(&dir.join(&name), &tensor)
            .map_err(|source| DatasetError::Feature { path: name.clone(), source })?;
        manifest.push_str(&format!("{name}\t{class}\n"));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    let classes: Vec<String> = (0..num_classes).map(|c| format!("class_{c}")).collect();
    std::fs::write(dir.join("classes.txt"), classes.join("\n") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_grammar() {
        let items = parse_manifest("a.ntc\t0\n# note\n\nb.ntc\t1,2, 3\r\n").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].path, "a.ntc");
        assert_eq!(items[0].labels, vec![0]);
        assert_eq!(items[1].labels, vec![1, 2, 3]);

        for (bad, what) in [
            ("a.ntc 0", "no tab"),
            ("a.ntc\t", "no ids"),
            ("a.ntc\tx", "bad id"),
            ("a.ntc\t1,1", "duplicate"),
            ("\t1", "empty path"),
        ] {
            assert!(parse_manifest(bad).is_err(), "{what} should fail");
        }
    }

    #[test]
    fn classes_grammar() {
        let names = parse_classes("dog\ncat\n").unwrap();
        assert_eq!(names, vec!["dog", "cat"]);
        assert!(parse_classes("dog\n\ncat").is_err());
    }

    #[test]
    fn synthetic_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(dir.path(), 8, 4, 32, 16, 1).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.classes.len(), 4);
        for i in 0..8 {
            assert_eq!(ds.items[i].labels, vec![i % 4]);
            let f = ds.features(i).unwrap();
            assert_eq!(f.shape(), &[32, 16]);
            let hot = ds.multi_hot(i);
            assert_eq!(hot.iter().sum::<f32>(), 1.0);
            assert_eq!(hot[i % 4], 1.0);
        }
        // Class bands are separable: mean energy inside the band is
        // far above the floor.
        let f = ds.features(1).unwrap();
        let band: f32 = (0..32).map(|t| f.data()[t * 16 + 4]).sum::<f32>() / 32.0;
        let floor: f32 = (0..32).map(|t| f.data()[t * 16 + 12]).sum::<f32>() / 32.0;
        assert!(band > floor + 1.0);
    }

    #[test]
    fn open_rejects_out_of_range_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "a.ntc\t7\n").unwrap();
        std::fs::write(dir.path().join("classes.txt"), "x\ny\n").unwrap();
        let err = Dataset::open(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::Sample { .. }), "{err}");
    }

    #[test]
    fn feature_shape_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        write_ntc(&dir.path().join("a.ntc"), &Tensor::zeros(vec![2, 3, 4])).unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "a.ntc\t0\n").unwrap();
        std::fs::write(dir.path().join("classes.txt"), "x\n").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.features(0).is_err());
    }
}
