use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distort::{DistortionType, SeverityLevel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One distorted clip in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Clip directory, relative to the manifest file unless absolute.
    pub clip_path: String,
    pub reference_id: String,
    pub distortion_type: DistortionType,
    pub severity_level: SeverityLevel,
    #[serde(default)]
    pub mos: Option<f64>,
    pub split: Split,
}

/// A dataset manifest. Serialized as a bare JSON array of entries; `root`
/// is the directory relative clip paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.clip_path.as_str()) {
                return Err(Error::format(format!(
                    "duplicate clip path {:?} in manifest",
                    e.clip_path
                )));
            }
        }
        Ok(DatasetManifest {
            entries,
            root: root.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn clip_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.clip_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// A manifest restricted to one split, sharing this manifest's root.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self.split_entries(split).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn reference_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.reference_id.as_str()).collect()
    }

    pub fn has_mos(&self) -> bool {
        self.entries.iter().all(|e| e.mos.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitGranularity {
    /// Distorted clips are assigned independently.
    #[default]
    PerClip,
    /// All clips of one reference content land on the same side.
    ContentDisjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub granularity: SplitGranularity,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            granularity: SplitGranularity::PerClip,
            seed: 0,
        }
    }
}

fn train_count(total: usize, fraction: f64) -> usize {
    let n = (fraction * total as f64).round() as usize;
    if total >= 2 {
        n.clamp(1, total - 1)
    } else {
        total
    }
}

/// Reassigns the `split` field of every entry.
pub fn make_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::precondition("cannot split an empty manifest"));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::precondition(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = manifest.clone();
    match spec.granularity {
        SplitGranularity::PerClip => {
            let mut order: Vec<usize> = (0..out.entries.len()).collect();
            order.shuffle(&mut rng);
            let n_train = train_count(order.len(), spec.train_fraction);
            for (rank, &i) in order.iter().enumerate() {
                out.entries[i].split = if rank < n_train {
                    Split::Train
                } else {
                    Split::Test
                };
            }
        }
        SplitGranularity::ContentDisjoint => {
            let mut refs: Vec<String> = manifest
                .reference_ids()
                .into_iter()
                .map(str::to_owned)
                .collect();
            if refs.len() < 2 {
                return Err(Error::precondition(
                    "content-disjoint split needs at least two reference contents",
                ));
            }
            refs.shuffle(&mut rng);
            let n_train = train_count(refs.len(), spec.train_fraction);
            let side: BTreeMap<&str, Split> = refs
                .iter()
                .enumerate()
                .map(|(rank, r)| {
                    let s = if rank < n_train {
                        Split::Train
                    } else {
                        Split::Test
                    };
                    (r.as_str(), s)
                })
                .collect();
            for e in &mut out.entries {
                e.split = side[e.reference_id.as_str()];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distort::{DistortionType, SeverityLevel};

    fn manifest(refs: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for r in 0..refs {
            for t in DistortionType::ALL {
                for l in SeverityLevel::ALL {
                    entries.push(ManifestEntry {
                        clip_path: format!("ref{r}_{}_{}", t.code(), l.code()),
                        reference_id: format!("ref{r}"),
                        distortion_type: t,
                        severity_level: l,
                        mos: None,
                        split: Split::Train,
                    });
                }
            }
        }
        DatasetManifest::new(entries, ".").unwrap()
    }

    #[test]
    fn per_clip_counts() {
        let m = make_split(&manifest(10), &SplitSpec::default()).unwrap();
        assert_eq!(m.split_entries(Split::Train).count(), 160);
        assert_eq!(m.split_entries(Split::Test).count(), 40);
    }

    #[test]
    fn content_disjoint_counts() {
        let spec = SplitSpec {
            granularity: SplitGranularity::ContentDisjoint,
            seed: 3,
            ..SplitSpec::default()
        };
        let m = make_split(&manifest(10), &spec).unwrap();
        let train: BTreeSet<_> = m
            .split_entries(Split::Train)
            .map(|e| e.reference_id.clone())
            .collect();
        let test: BTreeSet<_> = m
            .split_entries(Split::Test)
            .map(|e| e.reference_id.clone())
            .collect();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn content_disjoint_needs_two_refs() {
        let spec = SplitSpec {
            granularity: SplitGranularity::ContentDisjoint,
            ..SplitSpec::default()
        };
        assert!(matches!(
            make_split(&manifest(1), &spec),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let base = manifest(4);
        let spec = SplitSpec {
            seed: 11,
            ..SplitSpec::default()
        };
        let a = make_split(&base, &spec).unwrap();
        let b = make_split(&base, &spec).unwrap();
        assert_eq!(a, b);
        let paths: BTreeSet<_> = a.entries.iter().map(|e| e.clip_path.clone()).collect();
        assert_eq!(paths.len(), base.entries.len());
        let other = make_split(&base, &SplitSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn json_field_names() {
        let m = manifest(1);
        let v: serde_json::Value = serde_json::to_value(&m.entries[5]).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "clip_path",
            "reference_id",
            "distortion_type",
            "severity_level",
            "mos",
            "split",
        ] {
            assert!(obj.contains_key(key), "{key}");
        }
        assert_eq!(obj["distortion_type"], "MB");
        assert_eq!(obj["severity_level"], 2);
        assert_eq!(obj["split"], "train");
    }

    #[test]
    fn duplicate_paths_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(1);
        m.entries[1].clip_path = m.entries[0].clip_path.clone();
        let p = dir.path().join("m.json");
        fs::write(&p, serde_json::to_string(&m.entries).unwrap()).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(2);
        m.entries[3].mos = Some(62.5);
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.resolve(&back.entries[0]), dir.path().join("ref0_DB_HV"));
    }
}
