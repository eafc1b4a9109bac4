//! Class universe: stuff vs things, partitionable classes and the mapping
//! between grouped parts and class-specific part indices.
//!
//! Grouped parts are shared across semantic classes (one "window" class for
//! cars and buses). After fusion they are reverted into class-specific parts:
//! the class-specific id of a group is its 1-based position in the class'
//! configured part list, keeping 0 free for "no part".

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("class {semantic} has no part group {group}")]
    UnknownGroupForClass { semantic: u32, group: u32 },
    #[error("class {0} is not partitionable")]
    NotPartitionable(u32),
    #[error("failed to read taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse taxonomy: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid taxonomy: {0:?}")]
    Invalid(Vec<Violation>),
}

/// A single broken invariant, produced by [`ClassTaxonomy::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl Violation {
    fn new(field: &'static str, rule: impl Into<String>) -> Self {
        Self { field, rule: rule.into() }
    }
}

/// The immutable class universe every other component consumes.
///
/// `part_groups[0]` is the generic background group; it never appears in any
/// class' part list. `class_parts` may contain stuff classes as well: the
/// datasets shipped as fixtures do not use partitionable stuff, but the
/// fusion supports it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTaxonomy {
    pub stuff_classes: Vec<u32>,
    pub thing_classes: Vec<u32>,
    pub part_groups: Vec<u32>,
    pub class_parts: HashMap<u32, Vec<u32>>,
    pub names: HashMap<u32, String>,
    pub part_names: HashMap<u32, String>,
}

impl ClassTaxonomy {
    pub fn background_group(&self) -> u32 {
        self.part_groups[0]
    }

    pub fn is_stuff(&self, class_id: u32) -> bool {
        self.stuff_classes.contains(&class_id)
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.thing_classes.contains(&class_id)
    }

    pub fn is_partitionable(&self, class_id: u32) -> bool {
        self.class_parts.contains_key(&class_id)
    }

    /// Part groups used by a partitionable class, in configured order.
    pub fn parts_of(&self, class_id: u32) -> Option<&[u32]> {
        self.class_parts.get(&class_id).map(|v| v.as_slice())
    }

    /// Number of class-specific parts of `class_id` (0 if not partitionable).
    pub fn part_count(&self, class_id: u32) -> usize {
        self.class_parts.get(&class_id).map_or(0, |v| v.len())
    }

    /// All semantic classes in canonical channel order: stuff first, then
    /// things, each in configured order. This fixes the channel layout of
    /// semantic logit maps.
    pub fn semantic_channel_order(&self) -> Vec<u32> {
        self.stuff_classes.iter().chain(self.thing_classes.iter()).copied().collect()
    }

    /// Revert a grouped part into the class-specific part id for `semantic`:
    /// the 1-based index of `group` within the class' part list.
    pub fn ungroup_part(&self, semantic: u32, group: u32) -> Result<u32, TaxonomyError> {
        let parts = self
            .class_parts
            .get(&semantic)
            .ok_or(TaxonomyError::NotPartitionable(semantic))?;
        parts
            .iter()
            .position(|&g| g == group)
            .map(|i| (i + 1) as u32)
            .ok_or(TaxonomyError::UnknownGroupForClass { semantic, group })
    }

    /// Inverse of [`ungroup_part`](Self::ungroup_part): class-specific part id
    /// back to the grouped part id.
    pub fn regroup_part(&self, semantic: u32, part: u32) -> Result<u32, TaxonomyError> {
        let parts = self
            .class_parts
            .get(&semantic)
            .ok_or(TaxonomyError::NotPartitionable(semantic))?;
        if part == 0 || part as usize > parts.len() {
            return Err(TaxonomyError::UnknownGroupForClass { semantic, group: part });
        }
        Ok(parts[part as usize - 1])
    }

    /// Checks every structural invariant; an empty list means the taxonomy is
    /// well formed. Validation never aborts early.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.stuff_classes.is_empty() {
            v.push(Violation::new("stuff_classes", "at least one stuff class required"));
        }
        let stuff: HashSet<u32> = self.stuff_classes.iter().copied().collect();
        let things: HashSet<u32> = self.thing_classes.iter().copied().collect();
        if stuff.len() != self.stuff_classes.len() {
            v.push(Violation::new("stuff_classes", "duplicate class id"));
        }
        if things.len() != self.thing_classes.len() {
            v.push(Violation::new("thing_classes", "duplicate class id"));
        }
        for id in stuff.intersection(&things) {
            v.push(Violation::new(
                "stuff_classes",
                format!("class {id} declared as both stuff and thing"),
            ));
        }
        let groups: HashSet<u32> = self.part_groups.iter().copied().collect();
        if groups.len() != self.part_groups.len() {
            v.push(Violation::new("part_groups", "duplicate part group id"));
        }
        if self.part_groups.is_empty() {
            v.push(Violation::new("part_groups", "background group missing"));
            return v;
        }
        let background = self.background_group();
        for (&class, parts) in &self.class_parts {
            if !stuff.contains(&class) && !things.contains(&class) {
                v.push(Violation::new(
                    "class_parts",
                    format!("partitionable class {class} is not a declared class"),
                ));
            }
            if parts.is_empty() {
                v.push(Violation::new(
                    "class_parts",
                    format!("partitionable class {class} has no parts"),
                ));
            }
            let mut seen = HashSet::new();
            for &g in parts {
                if g == background {
                    v.push(Violation::new(
                        "class_parts",
                        format!("class {class} references the reserved background group {g}"),
                    ));
                } else if !groups.contains(&g) {
                    v.push(Violation::new(
                        "class_parts",
                        format!("class {class} references unknown part group {g}"),
                    ));
                }
                if !seen.insert(g) {
                    v.push(Violation::new(
                        "class_parts",
                        format!("class {class} lists part group {g} twice"),
                    ));
                }
            }
        }
        v
    }

    pub fn from_json(json: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(json)?;
        let t = file.into_taxonomy();
        let violations = t.validate();
        if violations.is_empty() {
            Ok(t)
        } else {
            Err(TaxonomyError::Invalid(violations))
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk schema:
/// `{stuff:[{id,name}], things:[{id,name,parts:[group-id]}], part_groups:[{id,name}]}`.
/// A `parts` list on a stuff entry is accepted for partitionable stuff.
#[derive(Debug, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub stuff: Vec<ClassEntry>,
    pub things: Vec<ClassEntry>,
    pub part_groups: Vec<PartGroupEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PartGroupEntry {
    pub id: u32,
    pub name: String,
}

impl TaxonomyFile {
    pub fn into_taxonomy(self) -> ClassTaxonomy {
        let mut names = HashMap::new();
        let mut class_parts = HashMap::new();
        for entry in self.stuff.iter().chain(self.things.iter()) {
            names.insert(entry.id, entry.name.clone());
            if !entry.parts.is_empty() {
                class_parts.insert(entry.id, entry.parts.clone());
            }
        }
        let part_names = self.part_groups.iter().map(|g| (g.id, g.name.clone())).collect();
        ClassTaxonomy {
            stuff_classes: self.stuff.iter().map(|e| e.id).collect(),
            thing_classes: self.things.iter().map(|e| e.id).collect(),
            part_groups: self.part_groups.iter().map(|g| g.id).collect(),
            class_parts,
            names,
            part_names,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn cpp_fixture_is_valid() {
        let t = fixtures::cpp();
        assert_eq!(t.validate(), Vec::new());
        assert_eq!(t.stuff_classes.len(), 11);
        assert_eq!(t.thing_classes.len(), 8);
        assert_eq!(t.class_parts.len(), 5);
    }

    #[test]
    fn ppp_fixture_is_valid() {
        let t = fixtures::ppp();
        assert_eq!(t.validate(), Vec::new());
        assert_eq!(t.stuff_classes.len(), 39);
        assert_eq!(t.thing_classes.len(), 20);
        assert_eq!(t.class_parts.len(), 16);
        let total: usize = t.class_parts.values().map(|p| p.len()).sum();
        assert_eq!(total, 58);
    }

    #[test]
    fn overlapping_stuff_and_things_is_flagged() {
        let mut t = fixtures::cpp();
        let shared = t.thing_classes[0];
        t.stuff_classes.push(shared);
        let violations = t.validate();
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("both stuff and thing"));
    }

    #[test]
    fn background_group_in_class_parts_is_flagged() {
        let mut t = fixtures::cpp();
        let bg = t.background_group();
        let person = *t.class_parts.keys().next().unwrap();
        t.class_parts.get_mut(&person).unwrap().push(bg);
        let violations = t.validate();
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("background"));
    }

    #[test]
    fn ungroup_person_legs() {
        let t = fixtures::cpp();
        // person parts configured as [head, torso, arms, legs]
        let person = 12;
        let legs = t.class_parts[&person][3];
        assert_eq!(t.ungroup_part(person, legs).unwrap(), 4);
    }

    #[test]
    fn ungroup_car_window_is_first() {
        let t = fixtures::cpp();
        let car = 14;
        let window = t.class_parts[&car][0];
        assert_eq!(t.ungroup_part(car, window).unwrap(), 1);
    }

    #[test]
    fn ungroup_invalid_pairing() {
        let t = fixtures::cpp();
        let car = 14;
        let window = t.class_parts[&car][0];
        // person has no window part
        match t.ungroup_part(12, window) {
            Err(TaxonomyError::UnknownGroupForClass { semantic: 12, .. }) => {}
            other => panic!("expected UnknownGroupForClass, got {other:?}"),
        }
    }

    #[test]
    fn ungroup_regroup_roundtrip() {
        let t = fixtures::cpp();
        for (&class, parts) in &t.class_parts {
            for &group in parts {
                let p = t.ungroup_part(class, group).unwrap();
                assert_eq!(t.regroup_part(class, p).unwrap(), group);
            }
        }
    }
}
