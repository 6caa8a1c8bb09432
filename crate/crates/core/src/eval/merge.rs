use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::SegmentationMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Six-class driving taxonomy: flat, background, object, vegetation, human,
/// vehicle.
pub const DDD17_MERGE: &str = include_str!("../../data/ddd17_merge.txt");
/// Eleven-class driving taxonomy.
pub const DSEC_MERGE: &str = include_str!("../../data/dsec_merge.txt");

/// Many-to-one relabelling from fine class names to merged names.
///
/// Text format: one `merged: fine, fine, ...` group per line; `#` starts a
/// comment line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMergeMap {
    /// Merged names in declaration order.
    pub groups: Vec<String>,
    /// Fine name to index into `groups`.
    pub mapping: BTreeMap<String, usize>,
}

impl ClassMergeMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        let mut mapping = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (merged, fine) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `merged: fine, ...`".into(),
            })?;
            let merged = merged.trim();
            if merged.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty merged class name".into(),
                });
            }
            let idx = match groups.iter().position(|g| g == merged) {
                Some(p) => p,
                None => {
                    groups.push(merged.to_string());
                    groups.len() - 1
                }
            };
            for f in fine.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                if let Some(prev) = mapping.insert(f.to_string(), idx) {
                    if prev != idx {
                        return Err(Error::config(format!(
                            "class {f:?} is mapped to both {:?} and {merged:?}",
                            groups[prev]
                        )));
                    }
                }
            }
        }
        if groups.is_empty() {
            return Err(Error::config("merge map declares no merged classes"));
        }
        Ok(Self { groups, mapping })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn identity(vocabulary: &[String]) -> Self {
        Self {
            groups: vocabulary.to_vec(),
            mapping: vocabulary.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect(),
        }
    }

    pub fn ddd17() -> Self {
        Self::parse(DDD17_MERGE).expect("bundled merge map parses")
    }

    pub fn dsec() -> Self {
        Self::parse(DSEC_MERGE).expect("bundled merge map parses")
    }

    /// Merged-group index of every class in `vocabulary`.
    pub fn resolve(&self, vocabulary: &[String]) -> Result<Vec<usize>> {
        let missing: Vec<&str> = vocabulary
            .iter()
            .filter(|c| !self.mapping.contains_key(*c))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("merge map has no entry for {}", missing.join(", "))));
        }
        Ok(vocabulary.iter().map(|c| self.mapping[c]).collect())
    }
}

/// Sums soft mass within merged groups and recomputes the argmax.
pub fn merge_classes(map: &SegmentationMap, merge: &ClassMergeMap) -> Result<SegmentationMap> {
    let index = merge.resolve(&map.vocabulary)?;
    let (c, k) = (map.vocabulary.len(), merge.groups.len());
    let n = map.width * map.height;
    let mut soft = vec![0.0; n * k];
    let mut hard = Vec::with_capacity(n);
    for (p, row) in map.soft.data().chunks(c).enumerate() {
        let out = &mut soft[p * k..(p + 1) * k];
        for (ci, &v) in row.iter().enumerate() {
            out[index[ci]] += v;
        }
        hard.push(super::argmax_row(out));
    }
    Ok(SegmentationMap {
        width: map.width,
        height: map.height,
        vocabulary: merge.groups.clone(),
        soft: Tensor::from_parts(vec![n, k], soft),
        hard,
    })
}
