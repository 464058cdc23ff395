use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::{read_mask, read_rgb};
use crate::error::{Error, Result};
use crate::pipeline::{generate_fov_mask, FundusSample, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Drive,
    Stare,
    ChaseDb1,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub gt1: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt2: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<PathBuf>,
}

/// How samples are divided into training and test sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// Explicit id lists.
    Fixed { train: Vec<String>, test: Vec<String> },
    /// One fold per sample, testing on that sample.
    LeaveOneOut,
    /// First `k` samples train, the rest test.
    FirstK { k: usize },
}

/// One train/test partition, as sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: DatasetName,
    pub samples: Vec<SampleRecord>,
    pub split: SplitSpec,
    /// Directory that relative sample paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_ids()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check_ids(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Config("manifest lists no samples".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id '{}'", s.id)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// The folds described by `split`; every fold partitions all samples.
    pub fn plan(&self) -> Result<Vec<Fold>> {
        self.check_ids()?;
        let n = self.samples.len();
        let folds = match &self.split {
            SplitSpec::Fixed { train, test } => {
                let index: HashMap<&str, usize> =
                    self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
                let lookup = |ids: &[String]| -> Result<Vec<usize>> {
                    ids.iter()
                        .map(|id| {
                            index.get(id.as_str()).copied().ok_or_else(|| {
                                Error::Config(format!("split names unknown sample id '{id}'"))
                            })
                        })
                        .collect()
                };
                vec![Fold { name: "fixed".into(), train: lookup(train)?, test: lookup(test)? }]
            }
            SplitSpec::LeaveOneOut => {
                if n < 2 {
                    return Err(Error::Config("leave-one-out needs at least 2 samples".into()));
                }
                (0..n)
                    .map(|i| Fold {
                        name: format!("fold-{}", self.samples[i].id),
                        train: (0..n).filter(|&j| j != i).collect(),
                        test: vec![i],
                    })
                    .collect()
            }
            SplitSpec::FirstK { k } => {
                if *k == 0 || *k > n {
                    return Err(Error::Config(format!("first-k split needs 0 < k <= {n}, got {k}")));
                }
                vec![Fold { name: format!("first-{k}"), train: (0..*k).collect(), test: (*k..n).collect() }]
            }
        };
        for f in &folds {
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            all.sort_unstable();
            let unique = all.windows(2).all(|w| w[0] != w[1]);
            if !unique || all.len() != n {
                return Err(Error::Config(format!(
                    "split '{}' must partition all {n} samples into disjoint train and test sets",
                    f.name
                )));
            }
        }
        Ok(folds)
    }
}

/// A manifest with every sample decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<FundusSample>,
    pub folds: Vec<Fold>,
}

fn same_dims(id: &str, what: &str, mask: &Mask, dims: (usize, usize)) -> Result<()> {
    if mask.dims() != dims {
        return Err(Error::Data(format!(
            "sample '{id}': {what} is {}x{} but the image is {}x{}",
            mask.width(),
            mask.height(),
            dims.1,
            dims.0
        )));
    }
    Ok(())
}

pub fn load_sample(manifest: &DatasetManifest, record: &SampleRecord, fov_threshold: f32) -> Result<FundusSample> {
    let id = &record.id;
    let rgb = read_rgb(&manifest.resolve(&record.image))?;
    let dims = (rgb.height() as usize, rgb.width() as usize);
    let gt1 = read_mask(&manifest.resolve(&record.gt1))?;
    same_dims(id, "gt1", &gt1, dims)?;
    let gt2 = match &record.gt2 {
        Some(p) => {
            let m = read_mask(&manifest.resolve(p))?;
            same_dims(id, "gt2", &m, dims)?;
            Some(m)
        }
        None => None,
    };
    let fov = match &record.fov {
        Some(p) => read_mask(&manifest.resolve(p))?,
        None => generate_fov_mask(&rgb, fov_threshold).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("sample '{id}': {m}")),
            other => other,
        })?,
    };
    same_dims(id, "fov", &fov, dims)?;
    Ok(FundusSample { id: id.clone(), rgb, gt1, gt2, fov })
}

pub fn load_dataset(manifest_path: &Path, fov_threshold: f32) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let folds = manifest.plan()?;
    let samples = manifest.samples.iter().map(|r| load_sample(&manifest, r, fov_threshold)).collect::<Result<_>>()?;
    Ok(Dataset { manifest, samples, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize, split: SplitSpec) -> DatasetManifest {
        DatasetManifest {
            name: DatasetName::Custom,
            samples: (0..n)
                .map(|i| SampleRecord {
                    id: format!("{i:02}"),
                    image: format!("{i}.png").into(),
                    gt1: format!("{i}_gt.png").into(),
                    gt2: None,
                    fov: None,
                })
                .collect(),
            split,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn leave_one_out_without_params_parses() {
        let m: DatasetManifest = serde_json::from_str(
            r#"{"name":"stare","samples":[{"id":"a","image":"a.ppm","gt1":"a.pgm"}],"split":{"kind":"leave-one-out"}}"#,
        )
        .unwrap();
        assert_eq!(m.split, SplitSpec::LeaveOneOut);
        assert_eq!(m.name, DatasetName::Stare);
    }

    #[test]
    fn first_k_and_fixed_parse() {
        let m: DatasetManifest = serde_json::from_str(
            r#"{"name":"chase-db1","samples":[],"split":{"kind":"first-k","params":{"k":14}}}"#,
        )
        .unwrap();
        assert_eq!(m.split, SplitSpec::FirstK { k: 14 });
        let s: SplitSpec =
            serde_json::from_str(r#"{"kind":"fixed","params":{"train":["a"],"test":["b"]}}"#).unwrap();
        assert_eq!(s, SplitSpec::Fixed { train: vec!["a".into()], test: vec!["b".into()] });
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<SampleRecord, _> =
            serde_json::from_str(r#"{"id":"a","image":"a","gt1":"b","gt3":"c"}"#);
        assert!(r.is_err());
    }

    #[test]
    fn fixed_split_must_partition() {
        let m = manifest(3, SplitSpec::Fixed { train: vec!["00".into()], test: vec!["01".into()] });
        assert!(matches!(m.plan(), Err(Error::Config(_))));
        let m = manifest(2, SplitSpec::Fixed { train: vec!["00".into()], test: vec!["00".into(), "01".into()] });
        assert!(matches!(m.plan(), Err(Error::Config(_))));
        let m = manifest(2, SplitSpec::Fixed { train: vec!["00".into()], test: vec!["zz".into()] });
        assert!(matches!(m.plan(), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut m = manifest(2, SplitSpec::LeaveOneOut);
        m.samples[1].id = "00".into();
        assert!(matches!(m.plan(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_resolve_against_the_manifest() {
        let mut m = manifest(1, SplitSpec::FirstK { k: 1 });
        m.root = PathBuf::from("/data/drive");
        assert_eq!(m.resolve(Path::new("a.png")), PathBuf::from("/data/drive/a.png"));
        assert_eq!(m.resolve(Path::new("/abs/b.png")), PathBuf::from("/abs/b.png"));
    }
}
