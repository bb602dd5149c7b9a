//! Bundled element-property table.
//!
//! The table is a versioned CSV asset compiled into the library. Values used
//! in the atomic-property blocks of the serialized strings come from here, so
//! rows are stored at the precision they are printed with.

use std::collections::HashMap;
use std::sync::LazyLock;

use serde::Deserialize;

use crate::error::{Error, Result};

const ELEMENT_TABLE: &str = include_str!("../data/elements.csv");

/// Version tag carried on the first line of the bundled table.
pub const ELEMENT_TABLE_VERSION: &str = "element-table v1";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ElementProperties {
    pub symbol: String,
    pub atomic_number: u32,
    /// Atomic mass in amu.
    pub atomic_mass: f64,
    pub period: u32,
    /// Static dipole polarizability in atomic units.
    pub dipole_polarizability: f64,
    /// Pauling electronegativity.
    pub electronegativity: f64,
    /// Electron affinity in eV.
    pub electron_affinity: f64,
    /// Covalent radius in angstrom.
    pub covalent_radius: f64,
}

struct Table {
    rows: Vec<ElementProperties>,
    by_symbol: HashMap<String, usize>,
}

static TABLE: LazyLock<Table> = LazyLock::new(|| {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(ELEMENT_TABLE.as_bytes());
    let rows: Vec<ElementProperties> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("bundled element table is well formed");
    let by_symbol = rows
        .iter()
        .enumerate()
        .map(|(i, row)| (row.symbol.clone(), i))
        .collect();
    Table { rows, by_symbol }
});

/// Look up the bundled properties for `symbol` (case-sensitive).
pub fn element_properties(symbol: &str) -> Result<&'static ElementProperties> {
    TABLE
        .by_symbol
        .get(symbol)
        .map(|&i| &TABLE.rows[i])
        .ok_or_else(|| Error::UnknownElement(symbol.to_string()))
}

pub fn is_known_element(symbol: &str) -> bool {
    TABLE.by_symbol.contains_key(symbol)
}

pub fn covalent_radius(symbol: &str) -> Result<f64> {
    element_properties(symbol).map(|e| e.covalent_radius)
}

/// All bundled rows in atomic-number order.
pub fn all_elements() -> &'static [ElementProperties] {
    &TABLE.rows
}
