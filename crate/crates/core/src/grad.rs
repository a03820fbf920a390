//! Flattened, group-partitioned gradients.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three parameter groups of a split model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Extractor,
    Intermediate,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Extractor, Group::Intermediate, Group::Classifier];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Extractor => "extractor",
            Group::Intermediate => "intermediate",
            Group::Classifier => "classifier",
        }
    }

    pub fn from_prefix(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Set of groups an optimizer step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupMask([bool; 3]);

impl GroupMask {
    pub const ALL: GroupMask = GroupMask([true; 3]);
    pub const NONE: GroupMask = GroupMask([false; 3]);
    pub const SHELLS: GroupMask = GroupMask([true, false, true]);
    pub const INTERMEDIATE: GroupMask = GroupMask([false, true, false]);

    pub fn contains(self, g: Group) -> bool {
        self.0[g.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub group: Group,
    pub name: String,
    /// Offset within the group's flat vector.
    pub offset: usize,
    pub len: usize,
}

/// Where each named parameter lives in the flattened group vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    group_lens: [usize; 3],
}

impl Layout {
    /// Builds a layout from `(group, name, len)` triples; offsets follow
    /// the order parameters appear within each group.
    pub fn new<'a>(params: impl IntoIterator<Item = (Group, &'a str, usize)>) -> Self {
        let mut group_lens = [0usize; 3];
        let entries = params
            .into_iter()
            .map(|(group, name, len)| {
                let offset = group_lens[group.index()];
                group_lens[group.index()] += len;
                LayoutEntry {
                    group,
                    name: name.to_owned(),
                    offset,
                    len,
                }
            })
            .collect();
        Self {
            entries,
            group_lens,
        }
    }

    /// Single-group layout over a flat vector, handy for raw arrays.
    pub fn flat(group: Group, len: usize) -> Self {
        Self::new([(group, "flat", len)])
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn group_len(&self, g: Group) -> usize {
        self.group_lens[g.index()]
    }

    pub fn total_len(&self) -> usize {
        self.group_lens.iter().sum()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Per-group flattened gradients (G_local, G_IN and the resolved update
/// all share this type). Values are 64-bit regardless of model precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    layout: Arc<Layout>,
    groups: [Vec<f64>; 3],
}

impl GradientSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let groups = Group::ALL.map(|g| vec![0.0; layout.group_len(g)]);
        Self { layout, groups }
    }

    pub fn from_groups(layout: Arc<Layout>, groups: [Vec<f64>; 3]) -> Result<Self> {
        for g in Group::ALL {
            if groups[g.index()].len() != layout.group_len(g) {
                return Err(Error::contract(format!(
                    "{g} group has {} values, layout expects {}",
                    groups[g.index()].len(),
                    layout.group_len(g)
                )));
            }
        }
        Ok(Self { layout, groups })
    }

    /// Gradient over a single flat vector placed in `group`.
    pub fn from_flat(group: Group, values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(group, values.len()));
        let mut groups: [Vec<f64>; 3] = Default::default();
        groups[group.index()] = values;
        Self { layout, groups }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    /// Slice of the named parameter's gradient.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let e = self.layout.entry(name)?;
        Some(&self.groups[e.group.index()][e.offset..e.offset + e.len])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.entry(name)?.clone();
        Some(&mut self.groups[e.group.index()][e.offset..e.offset + e.len])
    }

    /// All values, groups concatenated in extractor/intermediate/classifier order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.groups.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.groups.iter_mut().flatten()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn check_layout(&self, other: &GradientSet) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::contract(
                "gradient sets have different parameter layouts",
            ))
        }
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &GradientSet, scale: f64) -> Result<GradientSet> {
        self.check_layout(other)?;
        let groups = Group::ALL.map(|g| {
            self.group(g)
                .iter()
                .zip(other.group(g))
                .map(|(&a, &b)| a + scale * b)
                .collect()
        });
        Ok(GradientSet {
            layout: self.layout.clone(),
            groups,
        })
    }

    pub fn scaled(&self, scale: f64) -> GradientSet {
        GradientSet {
            layout: self.layout.clone(),
            groups: self.groups.clone().map(|v| v.into_iter().map(|x| x * scale).collect()),
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_per_group() {
        let layout = Layout::new([
            (Group::Extractor, "extractor.0.weight", 6),
            (Group::Extractor, "extractor.0.bias", 2),
            (Group::Intermediate, "intermediate.0.weight", 4),
            (Group::Classifier, "classifier.0.weight", 3),
        ]);
        assert_eq!(layout.entry("extractor.0.bias").unwrap().offset, 6);
        assert_eq!(layout.entry("intermediate.0.weight").unwrap().offset, 0);
        assert_eq!(layout.group_len(Group::Extractor), 8);
        assert_eq!(layout.total_len(), 15);
    }

    #[test]
    fn group_prefix_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::from_prefix(&format!("{}.3.bias", g.prefix())), Some(g));
        }
        assert_eq!(Group::from_prefix("meta.round"), None);
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = GradientSet::from_flat(Group::Intermediate, vec![1.0, 2.0]);
        let b = GradientSet::from_flat(Group::Intermediate, vec![1.0, 2.0, 3.0]);
        assert!(matches!(a.add_scaled(&b, 1.0), Err(Error::Contract(_))));
    }
}
