//! Dataset manifests (JSON) and train/test splitting.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub input_volume_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_input_path: Option<PathBuf>,
    pub truth_mask_path: PathBuf,
    pub split_tag: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub records: Vec<CaseRecord>,
}

/// One train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub name: String,
    pub train: Manifest,
    pub test: Manifest,
}

impl Manifest {
    pub fn new(records: Vec<CaseRecord>) -> Result<Self> {
        let m = Manifest { records };
        m.check_unique()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.case_id.as_str()) {
                return Err(Error::data(format!("duplicate case_id {}", r.case_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Subset by record indices, preserving manifest order.
    fn subset(&self, keep: impl Fn(usize) -> bool) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, r)| r.clone())
                .collect(),
        }
    }
}

/// Parse a manifest, resolve relative paths against its directory (made absolute) and
/// check that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: format!("invalid manifest JSON: {e}"),
    })?;
    m.check_unique()?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    let base = std::path::absolute(parent).map_err(|e| Error::io(parent, e))?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    for r in &mut m.records {
        r.input_volume_path = resolve(&r.input_volume_path);
        r.truth_mask_path = resolve(&r.truth_mask_path);
        r.second_input_path = r.second_input_path.as_deref().map(resolve);
        let files = [Some(&r.input_volume_path), Some(&r.truth_mask_path), r.second_input_path.as_ref()];
        for f in files.into_iter().flatten() {
            if !f.is_file() {
                return Err(Error::data(format!("case {}: missing file {}", r.case_id, f.display())));
            }
        }
    }
    Ok(m)
}

/// Seeded k-fold partition: fold sizes differ by at most one and every record lands in
/// exactly one test fold.
pub fn kfold_split(m: &Manifest, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > m.len() {
        return Err(Error::config(format!("k = {k} exceeds {} records", m.len())));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; m.len()];
    for (pos, &rec) in order.iter().enumerate() {
        fold_of[rec] = pos % k;
    }
    Ok((0..k)
        .map(|f| Split {
            name: format!("fold{f}"),
            train: m.subset(|i| fold_of[i] != f),
            test: m.subset(|i| fold_of[i] == f),
        })
        .collect())
}

/// One split per distinct `split_tag`: test on that study, train on all others.
/// With two tags A and B this yields A→B and B→A.
pub fn cross_study_split(m: &Manifest) -> Result<Vec<Split>> {
    let tags: BTreeSet<&str> = m.records.iter().map(|r| r.split_tag.as_str()).collect();
    if tags.len() < 2 {
        return Err(Error::config(format!(
            "cross-study split needs at least two split tags, found {}",
            tags.len()
        )));
    }
    Ok(tags
        .iter()
        .map(|&test_tag| {
            let train_tags: Vec<&str> = tags.iter().copied().filter(|t| *t != test_tag).collect();
            Split {
                name: format!("{}_to_{}", train_tags.join("+"), test_tag),
                train: m.subset(|i| m.records[i].split_tag != test_tag),
                test: m.subset(|i| m.records[i].split_tag == test_tag),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| CaseRecord {
                    case_id: format!("case_{i:03}"),
                    input_volume_path: format!("t1_{i}.mvol").into(),
                    second_input_path: None,
                    truth_mask_path: format!("truth_{i}.mvol").into(),
                    split_tag: if i % 3 == 0 { "A".into() } else { "B".into() },
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn five_folds_of_ninety_nine() {
        let m = synthetic(99);
        let folds = kfold_split(&m, 5, 11).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|s| s.test.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![20, 20, 20, 20, 19]);
        let mut all: Vec<&str> = folds
            .iter()
            .flat_map(|s| s.test.records.iter().map(|r| r.case_id.as_str()))
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 99);
        for s in &folds {
            assert_eq!(s.train.len() + s.test.len(), 99);
        }
    }

    #[test]
    fn kfold_is_seeded() {
        let m = synthetic(17);
        assert_eq!(kfold_split(&m, 5, 3).unwrap(), kfold_split(&m, 5, 3).unwrap());
        assert_ne!(kfold_split(&m, 5, 3).unwrap(), kfold_split(&m, 5, 4).unwrap());
    }

    #[test]
    fn kfold_rejects_bad_k() {
        let m = synthetic(4);
        assert!(matches!(kfold_split(&m, 5, 0), Err(Error::Config(_))));
        assert!(matches!(kfold_split(&m, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_study_two_directions() {
        let m = synthetic(9);
        let s = cross_study_split(&m).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].name, "B_to_A");
        assert_eq!(s[1].name, "A_to_B");
        assert!(s[0].test.records.iter().all(|r| r.split_tag == "A"));
        assert!(s[0].train.records.iter().all(|r| r.split_tag == "B"));
    }

    #[test]
    fn duplicate_case_ids_rejected() {
        let mut m = synthetic(2);
        m.records[1].case_id = m.records[0].case_id.clone();
        assert!(Manifest::new(m.records).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"records": [], "extra": 1}"#;
        assert!(serde_json::from_str::<Manifest>(text).is_err());
    }
}
