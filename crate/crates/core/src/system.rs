//! Adsorbate-catalyst systems and the line-delimited dataset format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "...", "adsorbate_smiles": "NH3", "bulk_formula": "VCr3",
//!  "miller_index": [2, 1, 0], "cell": [[..], [..], [..]],
//!  "atoms": [{"element": "Cr", "position": [x, y, z], "tag": 1}, ...],
//!  "energy_ev": -0.41, "split": "ID"}
//! ```
//!
//! Atom tags follow the OC20 convention: 0 subsurface slab, 1 surface,
//! 2 adsorbate. Positions are Cartesian in angstrom; cell rows are the three
//! lattice vectors.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composition::{element_counts, ElementCounts};
use crate::elements::element_properties;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Cell = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD_ads")]
    OodAds,
    #[serde(rename = "OOD_cat")]
    OodCat,
    #[serde(rename = "OOD_both")]
    OodBoth,
}

impl Split {
    pub const VALIDATION: [Split; 4] = [Split::Id, Split::OodAds, Split::OodCat, Split::OodBoth];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Id => "ID",
            Split::OodAds => "OOD_ads",
            Split::OodCat => "OOD_cat",
            Split::OodBoth => "OOD_both",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "ID" => Ok(Split::Id),
            "OOD_ads" => Ok(Split::OodAds),
            "OOD_cat" => Ok(Split::OodCat),
            "OOD_both" => Ok(Split::OodBoth),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Tag {
    Subsurface = 0,
    Surface = 1,
    Adsorbate = 2,
}

impl From<Tag> for u8 {
    fn from(tag: Tag) -> u8 {
        tag as u8
    }
}

impl TryFrom<u8> for Tag {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Tag::Subsurface),
            1 => Ok(Tag::Surface),
            2 => Ok(Tag::Adsorbate),
            other => Err(format!("tag {other} not in {{0, 1, 2}}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: String,
    pub position: Vec3,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub id: String,
    pub adsorbate_smiles: String,
    pub bulk_formula: String,
    pub miller_index: [i32; 3],
    pub cell: Cell,
    pub atoms: Vec<Atom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_ev: Option<f64>,
    pub split: Split,
}

impl AtomicSystem {
    /// Check every record-level invariant.
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, message: String| Error::Invalid {
            id: self.id.clone(),
            field,
            message,
        };
        if self.id.is_empty() {
            return Err(invalid("id", "empty id".into()));
        }
        for (i, atom) in self.atoms.iter().enumerate() {
            element_properties(&atom.element)?;
            if atom.position.iter().any(|x| !x.is_finite()) {
                return Err(invalid("position", format!("atom {i} has a non-finite coordinate")));
            }
        }
        if !self.atoms.iter().any(|a| a.tag == Tag::Adsorbate) {
            return Err(invalid("tag", "no adsorbate (tag 2) atom".into()));
        }
        if !self.atoms.iter().any(|a| a.tag == Tag::Surface) {
            return Err(invalid("tag", "no surface (tag 1) atom".into()));
        }
        let det = determinant(&self.cell);
        if !det.is_finite() || det.abs() < 1e-10 {
            return Err(invalid("cell", format!("lattice vectors are dependent (det {det:e})")));
        }
        let expected = element_counts(&self.adsorbate_smiles)
            .map_err(|e| invalid("adsorbate_smiles", e.to_string()))?;
        let found = self.adsorbate_element_counts();
        if expected != found {
            return Err(invalid(
                "adsorbate_smiles",
                format!("tag-2 atoms {found:?} do not match {expected:?}"),
            ));
        }
        if let Some(e) = self.energy_ev {
            if !e.is_finite() {
                return Err(invalid("energy_ev", "non-finite energy".into()));
            }
        }
        Ok(())
    }

    pub fn adsorbate_element_counts(&self) -> ElementCounts {
        let mut counts = ElementCounts::new();
        for atom in self.atoms.iter().filter(|a| a.tag == Tag::Adsorbate) {
            *counts.entry(atom.element.clone()).or_default() += 1;
        }
        counts
    }

    pub fn adsorbate_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_with_tag(Tag::Adsorbate)
    }

    pub fn surface_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_with_tag(Tag::Surface)
    }

    fn indices_with_tag(&self, tag: Tag) -> impl Iterator<Item = usize> + '_ {
        self.atoms
            .iter()
            .enumerate()
            .filter(move |(_, a)| a.tag == tag)
            .map(|(i, _)| i)
    }

    /// Minimum-image distance between two atoms of this system.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        minimum_image_distance(self.atoms[i].position, self.atoms[j].position, &self.cell)
    }
}

pub fn determinant(m: &Cell) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Shortest distance between `a` and any translation of `b` by up to one
/// lattice vector along each cell axis (27 images).
pub fn minimum_image_distance(a: Vec3, b: Vec3, cell: &Cell) -> Result<f64> {
    let det = determinant(cell);
    if !det.is_finite() || det.abs() < 1e-10 {
        return Err(Error::SingularCell(det));
    }
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let (fi, fj, fk) = (i as f64, j as f64, k as f64);
                let mut sq = 0.0;
                for axis in 0..3 {
                    let t = d[axis] + fi * cell[0][axis] + fj * cell[1][axis] + fk * cell[2][axis];
                    sq += t * t;
                }
                best = best.min(sq);
            }
        }
    }
    Ok(best.sqrt())
}

/// Read a dataset file. Every record is validated and ids must be unique.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AtomicSystem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset(reader: impl BufRead) -> Result<Vec<AtomicSystem>> {
    let mut systems = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let system: AtomicSystem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        system.validate()?;
        if !seen.insert(system.id.clone()) {
            return Err(Error::DuplicateId(system.id));
        }
        systems.push(system);
    }
    Ok(systems)
}

pub fn save_dataset(path: impl AsRef<Path>, systems: &[AtomicSystem]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(&mut out, systems).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(out: &mut impl Write, systems: &[AtomicSystem]) -> std::io::Result<()> {
    for system in systems {
        serde_json::to_writer(&mut *out, system)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBIC10: Cell = [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]];

    fn record(tag: u8) -> String {
        format!(
            r#"{{"id":"x","adsorbate_smiles":"O","bulk_formula":"Cu","miller_index":[1,1,1],
            "cell":[[10,0,0],[0,10,0],[0,0,20]],
            "atoms":[{{"element":"Cu","position":[0,0,0],"tag":1}},
                     {{"element":"O","position":[0,0,2],"tag":{tag}}}],
            "split":"ID"}}"#
        )
        .replace('\n', " ")
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        assert!(read_dataset("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn tag_three_is_rejected_naming_tag() {
        let err = read_dataset(record(3).as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tag"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn valid_record_loads() {
        let systems = read_dataset(record(2).as_bytes()).unwrap();
        assert_eq!(systems.len(), 1);
        assert_eq!(systems[0].energy_ev, None);
        assert_eq!(systems[0].split, Split::Id);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}\n", record(2), record(2));
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::DuplicateId(id)) if id == "x"));
    }

    #[test]
    fn missing_surface_and_mismatched_smiles() {
        let no_surface = record(2).replace(r#""tag":1"#, r#""tag":0"#);
        let msg = read_dataset(no_surface.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("surface"), "{msg}");

        let wrong = record(2).replace(r#""adsorbate_smiles":"O""#, r#""adsorbate_smiles":"OH""#);
        let msg = read_dataset(wrong.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("adsorbate_smiles"), "{msg}");
    }

    #[test]
    fn unknown_element_rejected() {
        let text = record(2).replace(r#""element":"Cu""#, r#""element":"Qq""#);
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(Error::UnknownElement(_))
        ));
    }

    #[test]
    fn singular_cell_rejected() {
        let text = record(2).replace("[0,0,20]", "[0,0,0]");
        let msg = read_dataset(text.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("cell"), "{msg}");
        let flat = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            minimum_image_distance([0.0; 3], [1.0; 3], &flat),
            Err(Error::SingularCell(_))
        ));
    }

    #[test]
    fn identity_and_wraparound() {
        let p = [1.2, 3.4, 5.6];
        assert_eq!(minimum_image_distance(p, p, &CUBIC10).unwrap(), 0.0);
        let d = minimum_image_distance([0.0; 3], [9.0, 0.0, 0.0], &CUBIC10).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn split_names_round_trip() {
        for split in [Split::Train, Split::Id, Split::OodAds, Split::OodCat, Split::OodBoth] {
            assert_eq!(split.as_str().parse::<Split>().unwrap(), split);
            let json = serde_json::to_string(&split).unwrap();
            assert_eq!(json, format!("\"{split}\""));
        }
    }
}
