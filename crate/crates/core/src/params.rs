//! Trainable values, their pretrained snapshots, and the ordered module stack.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// One named tensor of trainable values together with its pretrained snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroup {
    name: String,
    values: Vec<f64>,
    snapshot: Vec<f64>,
    module_index: usize,
    frozen: bool,
    from_scratch: bool,
}

impl ParameterGroup {
    /// New group whose snapshot is a copy of `values`.
    pub fn new(name: impl Into<String>, values: Vec<f64>, module_index: usize, from_scratch: bool) -> Self {
        let snapshot = values.clone();
        Self {
            name: name.into(),
            values,
            snapshot,
            module_index,
            frozen: false,
            from_scratch,
        }
    }

    pub fn with_snapshot(
        name: impl Into<String>,
        values: Vec<f64>,
        snapshot: Vec<f64>,
        module_index: usize,
        from_scratch: bool,
    ) -> Result<Self> {
        ensure!(
            values.len() == snapshot.len() && !values.is_empty(),
            Contract,
            "values ({}) and snapshot ({}) must have equal, non-zero length",
            values.len(),
            snapshot.len()
        );
        Ok(Self {
            name: name.into(),
            values,
            snapshot,
            module_index,
            frozen: false,
            from_scratch,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn snapshot(&self) -> &[f64] {
        &self.snapshot
    }

    pub fn module_index(&self) -> usize {
        self.module_index
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_from_scratch(&self) -> bool {
        self.from_scratch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `‖values − snapshot‖₂`.
    pub fn deviation(&self) -> f64 {
        l2_distance(&self.values, &self.snapshot)
    }
}

/// Euclidean distance with a fixed, sequential reduction order.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn l2_deviation(group: &ParameterGroup) -> f64 {
    group.deviation()
}

/// Set of 1-based module indices to freeze.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeMask(BTreeSet<usize>);

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(module_count: usize) -> Self {
        Self((1..=module_count).collect())
    }

    pub fn contains(&self, module_index: usize) -> bool {
        self.0.contains(&module_index)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn validate(&self, module_count: usize) -> Result<()> {
        for &k in &self.0 {
            ensure!(
                (1..=module_count).contains(&k),
                Config,
                "freeze index {k} outside 1..={module_count}"
            );
        }
        Ok(())
    }
}

impl FromIterator<usize> for FreezeMask {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// All trainable groups of a model, ordered by module then declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    module_names: Vec<String>,
    groups: Vec<ParameterGroup>,
    // Bumped on every mutation of `values`; forward caches record it.
    version: u64,
}

impl ModelParameters {
    pub fn new(module_names: Vec<String>, groups: Vec<ParameterGroup>) -> Result<Self> {
        let module_count = module_names.len();
        ensure!(module_count > 0, Config, "model needs at least one module");
        let mut names = HashSet::new();
        let mut seen = vec![false; module_count];
        for g in &groups {
            ensure!(names.insert(g.name.as_str()), Config, "duplicate group name `{}`", g.name);
            ensure!(
                (1..=module_count).contains(&g.module_index),
                Config,
                "group `{}` has module index {} outside 1..={module_count}",
                g.name,
                g.module_index
            );
            ensure!(!g.is_empty(), Config, "group `{}` is empty", g.name);
            seen[g.module_index - 1] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "module {} (`{}`) owns no parameter groups",
                k + 1,
                module_names[k]
            )));
        }
        Ok(Self {
            module_names,
            groups,
            version: 0,
        })
    }

    pub fn module_count(&self) -> usize {
        self.module_names.len()
    }

    pub fn module_names(&self) -> &[String] {
        &self.module_names
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &ParameterGroup {
        &self.groups[i]
    }

    pub fn num_parameters(&self) -> usize {
        self.groups.iter().map(ParameterGroup::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable view of one group's current values.
    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        self.version += 1;
        &mut self.groups[i].values
    }

    pub(crate) fn set_values(&mut self, i: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.groups[i].values.len());
        self.version += 1;
        self.groups[i].values = values;
    }

    /// Capture θ₀: every snapshot becomes a copy of the current values.
    pub fn snapshot_pretrained(&mut self) {
        for g in &mut self.groups {
            g.snapshot.clone_from(&g.values);
        }
    }

    pub fn apply_freeze_mask(&mut self, mask: &FreezeMask) -> Result<()> {
        mask.validate(self.module_count())?;
        for g in &mut self.groups {
            g.frozen = mask.contains(g.module_index);
        }
        Ok(())
    }

    /// Root-sum-of-squares of member-group deviations, one entry per module.
    pub fn module_deviations(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.module_count()];
        for g in &self.groups {
            let d = g.deviation();
            sq[g.module_index - 1] += d * d;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// `‖θ − θ₀‖₂` over every group of the model.
    pub fn total_deviation(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.deviation().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Fails unless `other` has the same modules and group layout.
    pub fn check_layout(&self, other: &ModelParameters) -> Result<()> {
        if self.module_names != other.module_names {
            return Err(Error::ArchiveMismatch(format!(
                "module stack {:?} != {:?}",
                other.module_names, self.module_names
            )));
        }
        if self.groups.len() != other.groups.len() {
            return Err(Error::ArchiveMismatch(format!(
                "{} groups != {}",
                other.groups.len(),
                self.groups.len()
            )));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.name != b.name || a.module_index != b.module_index || a.len() != b.len() || a.from_scratch != b.from_scratch {
                return Err(Error::ArchiveMismatch(format!(
                    "group `{}` (module {}, len {}) does not match expected `{}` (module {}, len {})",
                    b.name,
                    b.module_index,
                    b.len(),
                    a.name,
                    a.module_index,
                    a.len()
                )));
            }
        }
        Ok(())
    }
}

// Checkpoint archive, all integers and floats little-endian:
//
//   magic     b"PXTNARC1"
//   u32       module count, then per module: u32 byte length + UTF-8 name
//   u32       group count, then per group:
//               u32 + UTF-8 name, u32 module index, u8 flags (bit0 frozen,
//               bit1 from_scratch), u64 length, f64[length] values,
//               f64[length] snapshot
const MAGIC: &[u8; 8] = b"PXTNARC1";

impl ModelParameters {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 16 * self.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.module_names.len() as u32).to_le_bytes());
        for name in &self.module_names {
            put_str(&mut out, name);
        }
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            put_str(&mut out, &g.name);
            out.extend_from_slice(&(g.module_index as u32).to_le_bytes());
            out.push(u8::from(g.frozen) | (u8::from(g.from_scratch) << 1));
            out.extend_from_slice(&(g.values.len() as u64).to_le_bytes());
            for x in g.values.iter().chain(&g.snapshot) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ArchiveMismatch("not a parameter archive (bad magic)".into()));
        }
        let module_count = r.u32()? as usize;
        let module_names = (0..module_count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let group_count = r.u32()? as usize;
        let mut groups = Vec::with_capacity(group_count.min(bytes.len()));
        for _ in 0..group_count {
            let name = r.string()?;
            let module_index = r.u32()? as usize;
            let flags = r.take(1)?[0];
            let len = r.u64()? as usize;
            let values = r.f64s(len)?;
            let snapshot = r.f64s(len)?;
            groups.push(ParameterGroup {
                name,
                values,
                snapshot,
                module_index,
                frozen: flags & 1 != 0,
                from_scratch: flags & 2 != 0,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::ArchiveMismatch(format!(
                "{} trailing bytes after archive",
                bytes.len() - r.pos
            )));
        }
        Self::new(module_names, groups).map_err(|e| Error::ArchiveMismatch(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::ArchiveMismatch(format!("archive truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::ArchiveMismatch(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::ArchiveMismatch("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn four_module_model() -> ModelParameters {
        let names = (1..=4).map(|k| format!("m{k}")).collect();
        let groups = (1..=4)
            .flat_map(|k| {
                [
                    ParameterGroup::new(format!("m{k}.w"), vec![0.5 * k as f64; 6], k, false),
                    ParameterGroup::new(format!("m{k}.b"), vec![0.0; 2], k, k == 4),
                ]
            })
            .collect();
        ModelParameters::new(names, groups).unwrap()
    }

    #[test]
    fn snapshot_zeroes_deviation_and_is_idempotent() {
        let mut m = four_module_model();
        m.values_mut(0)[0] = 9.0;
        m.snapshot_pretrained();
        assert!(m.groups().iter().all(|g| g.deviation() == 0.0));
        let before = m.clone();
        m.snapshot_pretrained();
        assert_eq!(m.groups(), before.groups());
    }

    #[test]
    fn deviation_three_four_five() {
        let g = ParameterGroup::with_snapshot("g", vec![3.0, 4.0], vec![0.0, 0.0], 1, false).unwrap();
        assert_eq!(l2_deviation(&g), 5.0);
    }

    #[test]
    fn deviation_matches_scalar_loop() {
        let mut rng = SplitMix64::new(11);
        let values: Vec<f64> = (0..1000).map(|_| rng.standard_normal()).collect();
        let snapshot: Vec<f64> = (0..1000).map(|_| rng.standard_normal()).collect();
        let g = ParameterGroup::with_snapshot("g", values.clone(), snapshot.clone(), 1, false).unwrap();
        let mut acc = 0.0;
        for i in 0..values.len() {
            acc += (values[i] - snapshot[i]) * (values[i] - snapshot[i]);
        }
        let oracle = acc.sqrt();
        assert!((g.deviation() - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(ParameterGroup::with_snapshot("g", vec![1.0], vec![1.0, 2.0], 1, false).is_err());
        assert!(ParameterGroup::with_snapshot("g", vec![], vec![], 1, false).is_err());
    }

    #[test]
    fn rejects_gaps_and_duplicates() {
        let gap = ModelParameters::new(
            vec!["a".into(), "b".into()],
            vec![ParameterGroup::new("x", vec![1.0], 1, false)],
        );
        assert!(matches!(gap, Err(Error::Config(_))));
        let dup = ModelParameters::new(
            vec!["a".into()],
            vec![
                ParameterGroup::new("x", vec![1.0], 1, false),
                ParameterGroup::new("x", vec![1.0], 1, false),
            ],
        );
        assert!(matches!(dup, Err(Error::Config(_))));
    }

    #[test]
    fn freeze_mask_validation() {
        let mut m = four_module_model();
        assert!(matches!(
            m.apply_freeze_mask(&[0].into_iter().collect()),
            Err(Error::Config(_))
        ));
        assert!(m.apply_freeze_mask(&[5].into_iter().collect()).is_err());
        m.apply_freeze_mask(&[1, 2].into_iter().collect()).unwrap();
        for g in m.groups() {
            assert_eq!(g.is_frozen(), g.module_index() <= 2);
        }
        m.apply_freeze_mask(&FreezeMask::none()).unwrap();
        assert!(m.groups().iter().all(|g| !g.is_frozen()));
    }

    #[test]
    fn module_deviation_is_root_sum_of_squares() {
        let mut m = four_module_model();
        m.values_mut(0)[0] += 3.0; // m1.w
        m.values_mut(1)[0] += 4.0; // m1.b
        m.values_mut(2)[1] -= 1.0; // m2.w
        let devs = m.module_deviations();
        assert_eq!(devs, vec![5.0, 1.0, 0.0, 0.0]);
        assert!((m.total_deviation() - 26f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn archive_roundtrip_is_byte_exact() {
        let mut m = four_module_model();
        m.apply_freeze_mask(&[2].into_iter().collect()).unwrap();
        m.values_mut(0)[3] = -1.0 / 3.0;
        let bytes = m.to_bytes();
        let loaded = ModelParameters::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.groups(), m.groups());
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn archive_rejects_truncation_and_garbage() {
        let bytes = four_module_model().to_bytes();
        assert!(matches!(
            ModelParameters::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::ArchiveMismatch(_))
        ));
        assert!(ModelParameters::from_bytes(b"hello world").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelParameters::from_bytes(&extra).is_err());
    }

    #[test]
    fn layout_check_detects_differences() {
        let a = four_module_model();
        let mut b = four_module_model();
        assert!(a.check_layout(&b).is_ok());
        b.groups[1].values.push(0.0);
        b.groups[1].snapshot.push(0.0);
        assert!(matches!(a.check_layout(&b), Err(Error::ArchiveMismatch(_))));
    }
}
