//! Bundled taxonomy configs for the Cityscapes Panoptic Parts and Pascal
//! Panoptic Parts class universes.

use crate::taxonomy::ClassTaxonomy;

pub const CPP_JSON: &str = include_str!("../configs/cpp.json");
pub const PPP_JSON: &str = include_str!("../configs/ppp.json");

/// Cityscapes Panoptic Parts: 11 stuff, 8 things, 5 partitionable.
pub fn cpp() -> ClassTaxonomy {
    ClassTaxonomy::from_json(CPP_JSON).expect("bundled CPP config is valid")
}

/// Pascal Panoptic Parts: 39 stuff, 20 things, 16 partitionable.
pub fn ppp() -> ClassTaxonomy {
    ClassTaxonomy::from_json(PPP_JSON).expect("bundled PPP config is valid")
}
