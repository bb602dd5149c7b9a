//! Adsorption-configuration detection and text serialization.
//!
//! Two atoms are in covalent contact when their minimum-image distance is at
//! most the sum of their covalent radii plus a tolerance. The binding
//! adsorbate atom is the tag-2 atom with the most surface contacts; its
//! contacts are the primary interacting atoms, and the contacts of each
//! primary atom are its secondary interacting atoms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composition::unique_elements;
use crate::elements::{covalent_radius, element_properties};
use crate::error::{Error, Result};
use crate::system::{AtomicSystem, Split, Tag};

pub const DEFAULT_CUTOFF_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteType {
    Ontop,
    Bridge,
    Hollow,
    Fourfold,
}

impl SiteType {
    pub fn from_contact_count(n: usize) -> Option<SiteType> {
        match n {
            0 => None,
            1 => Some(SiteType::Ontop),
            2 => Some(SiteType::Bridge),
            3 => Some(SiteType::Hollow),
            _ => Some(SiteType::Fourfold),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteType::Ontop => "ontop",
            SiteType::Bridge => "bridge",
            SiteType::Hollow => "hollow",
            SiteType::Fourfold => "fourfold",
        }
    }
}

impl fmt::Display for SiteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingAtom {
    pub index: usize,
    pub element: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceContact {
    pub index: usize,
    pub element: String,
    /// Distance to the binding adsorbate atom in angstrom.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsorptionConfiguration {
    pub binding_atom: BindingAtom,
    /// Sorted by ascending distance.
    pub primary_surface_atoms: Vec<SurfaceContact>,
    pub site_type: SiteType,
    /// One list per primary atom; each list starts with that atom's element.
    pub secondary_lists: Vec<Vec<String>>,
}

fn in_contact(system: &AtomicSystem, i: usize, j: usize, tolerance: f64) -> Result<Option<f64>> {
    let cutoff = covalent_radius(&system.atoms[i].element)?
        + covalent_radius(&system.atoms[j].element)?
        + tolerance;
    let d = system.distance(i, j)?;
    Ok((d <= cutoff).then_some(d))
}

/// Find the binding atom, its surface contacts, the site type and the
/// secondary interacting atoms of every contact.
pub fn detect_configuration(
    system: &AtomicSystem,
    cutoff_tolerance: f64,
) -> Result<AdsorptionConfiguration> {
    if !(cutoff_tolerance >= 0.0) {
        return Err(Error::Data(format!(
            "cutoff tolerance must be non-negative, got {cutoff_tolerance}"
        )));
    }
    let surface: Vec<usize> = system.surface_indices().collect();

    // (contacts, nearest distance, index) of the current best adsorbate atom
    let mut best: Option<(Vec<(usize, f64)>, f64, usize)> = None;
    for a in system.adsorbate_indices() {
        let mut contacts = Vec::new();
        for &s in &surface {
            if let Some(d) = in_contact(system, a, s, cutoff_tolerance)? {
                contacts.push((s, d));
            }
        }
        if contacts.is_empty() {
            continue;
        }
        let nearest = contacts.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let better = match &best {
            None => true,
            Some((bc, bd, _)) => {
                contacts.len() > bc.len() || (contacts.len() == bc.len() && nearest < *bd)
            }
        };
        if better {
            best = Some((contacts, nearest, a));
        }
    }
    let (mut contacts, _, binding) = best.ok_or_else(|| Error::NoBinding(system.id.clone()))?;
    contacts.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));

    let site_type = SiteType::from_contact_count(contacts.len()).expect("contacts non-empty");
    let mut secondary_lists = Vec::with_capacity(contacts.len());
    for &(p, _) in &contacts {
        let mut slab: Vec<&str> = Vec::new();
        let mut adsorbate: Vec<(f64, usize)> = Vec::new();
        for (j, atom) in system.atoms.iter().enumerate() {
            if j == p {
                continue;
            }
            if let Some(d) = in_contact(system, p, j, cutoff_tolerance)? {
                match atom.tag {
                    Tag::Adsorbate => adsorbate.push((d, j)),
                    _ => slab.push(&atom.element),
                }
            }
        }
        slab.sort_unstable();
        adsorbate.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut list = Vec::with_capacity(1 + slab.len() + adsorbate.len());
        list.push(system.atoms[p].element.clone());
        list.extend(slab.into_iter().map(str::to_string));
        list.extend(adsorbate.into_iter().map(|(_, j)| system.atoms[j].element.clone()));
        secondary_lists.push(list);
    }

    Ok(AdsorptionConfiguration {
        binding_atom: BindingAtom {
            index: binding,
            element: system.atoms[binding].element.clone(),
        },
        primary_surface_atoms: contacts
            .into_iter()
            .map(|(index, distance)| SurfaceContact {
                index,
                element: system.atoms[index].element.clone(),
                distance,
            })
            .collect(),
        site_type,
        secondary_lists,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextFormat {
    S1,
    S2,
    S3,
    S4,
    S5,
    #[serde(rename = "DESC")]
    Desc,
}

impl TextFormat {
    pub const ALL: [TextFormat; 6] = [
        TextFormat::S1,
        TextFormat::S2,
        TextFormat::S3,
        TextFormat::S4,
        TextFormat::S5,
        TextFormat::Desc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TextFormat::S1 => "S1",
            TextFormat::S2 => "S2",
            TextFormat::S3 => "S3",
            TextFormat::S4 => "S4",
            TextFormat::S5 => "S5",
            TextFormat::Desc => "DESC",
        }
    }
}

impl fmt::Display for TextFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(TextFormat::S1),
            "S2" => Ok(TextFormat::S2),
            "S3" => Ok(TextFormat::S3),
            "S4" => Ok(TextFormat::S4),
            "S5" => Ok(TextFormat::S5),
            "DESC" => Ok(TextFormat::Desc),
            _ => Err(Error::Data(format!("unknown format {s:?} (expected s1..s5 or desc)"))),
        }
    }
}

/// Text for one system in one format, plus its label. One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedSample {
    pub system_id: String,
    pub format: TextFormat,
    pub text: String,
    pub energy_ev: Option<f64>,
    pub split: Split,
}

fn header(system: &AtomicSystem) -> String {
    let [h, k, l] = system.miller_index;
    format!(
        "<s>{}</s>{} ({h} {k} {l})</s>",
        system.adsorbate_smiles, system.bulk_formula
    )
}

/// Round half away from zero to one decimal.
pub fn round_one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn property_block(symbol: &str) -> Result<String> {
    let e = element_properties(symbol)?;
    Ok(format!(
        "[{}, {}, {:?}, {}, {:?}, {:?}, {:?}]",
        e.symbol,
        e.atomic_number,
        e.atomic_mass,
        e.period,
        e.dipole_polarizability,
        e.electronegativity,
        e.electron_affinity
    ))
}

/// Unique adsorbate elements alphabetically, then bulk elements not already
/// listed, alphabetically.
fn property_elements(system: &AtomicSystem) -> Result<Vec<String>> {
    let ads = unique_elements(&system.adsorbate_smiles)?;
    let seen: BTreeSet<&String> = ads.iter().collect();
    let bulk: Vec<String> = unique_elements(&system.bulk_formula)?
        .into_iter()
        .filter(|e| !seen.contains(e))
        .collect();
    Ok(ads.into_iter().chain(bulk).collect())
}

/// Render `system` in one of the string formats. `config` is required for
/// every format except S1.
pub fn serialize(
    system: &AtomicSystem,
    config: Option<&AdsorptionConfiguration>,
    format: TextFormat,
) -> Result<SerializedSample> {
    let mut text = header(system);
    if format == TextFormat::Desc {
        return render_system_description(system, config);
    }
    if format != TextFormat::S1 {
        let config = config.ok_or_else(|| Error::NoBinding(system.id.clone()))?;
        let ads = &config.binding_atom.element;
        let site = config.site_type.as_str();
        let secondary: Vec<String> = config
            .secondary_lists
            .iter()
            .map(|list| format!("[{}]", list.join(" ")))
            .collect();
        match format {
            TextFormat::S2 | TextFormat::S3 => {
                let mut parts = vec![ads.as_str()];
                parts.extend(config.primary_surface_atoms.iter().map(|c| c.element.as_str()));
                parts.push(site);
                text.push_str(&format!("[{}]</s>", parts.join(", ")));
                if format == TextFormat::S3 {
                    for el in property_elements(system)? {
                        text.push_str(&property_block(&el)?);
                    }
                    text.push_str("</s>");
                }
            }
            TextFormat::S4 | TextFormat::S5 => {
                let mut parts = vec![ads.clone()];
                parts.extend(config.primary_surface_atoms.iter().map(|c| {
                    if format == TextFormat::S5 {
                        format!("({} {:.1})", c.element, round_one_decimal(c.distance))
                    } else {
                        c.element.clone()
                    }
                }));
                parts.push(site.to_string());
                parts.extend(secondary);
                text.push_str(&format!("[{}]</s>", parts.join(" ")));
            }
            TextFormat::S1 | TextFormat::Desc => unreachable!(),
        }
    }
    Ok(SerializedSample {
        system_id: system.id.clone(),
        format,
        text,
        energy_ev: system.energy_ev,
        split: system.split,
    })
}

/// The deterministic system paragraph of the description format.
pub fn render_system_description(
    system: &AtomicSystem,
    config: Option<&AdsorptionConfiguration>,
) -> Result<SerializedSample> {
    let config = config.ok_or_else(|| Error::NoBinding(system.id.clone()))?;
    let [h, k, l] = system.miller_index;
    let surface: Vec<&str> = config
        .primary_surface_atoms
        .iter()
        .map(|c| c.element.as_str())
        .collect();
    let text = format!(
        "Adsorbate {} is adsorbed on the catalytic surface {} with a Miller Index of ({h}, {k}, {l}). \
         The {} atom of the adsorbate is placed on the {} site and is binding to the catalytic surface atoms {}.",
        system.adsorbate_smiles,
        system.bulk_formula,
        config.binding_atom.element,
        config.site_type,
        surface.join(", "),
    );
    Ok(SerializedSample {
        system_id: system.id.clone(),
        format: TextFormat::Desc,
        text,
        energy_ev: system.energy_ev,
        split: system.split,
    })
}

/// Detect and serialize in one go. Systems without a detectable binding fall
/// back to S1 content when `fallback` is set.
pub fn featurize(
    system: &AtomicSystem,
    format: TextFormat,
    cutoff_tolerance: f64,
    fallback: bool,
) -> Result<SerializedSample> {
    if format == TextFormat::S1 {
        return serialize(system, None, format);
    }
    match detect_configuration(system, cutoff_tolerance) {
        Ok(config) => serialize(system, Some(&config), format),
        Err(Error::NoBinding(_)) if fallback => {
            log::warn!("{}: no binding detected, using S1 content", system.id);
            let mut sample = serialize(system, None, TextFormat::S1)?;
            sample.format = format;
            Ok(sample)
        }
        Err(e) => Err(e),
    }
}

/// Pre-generated adsorbate and catalyst prose keyed by SMILES and formula.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptionCache {
    #[serde(default)]
    pub adsorbates: BTreeMap<String, String>,
    #[serde(default)]
    pub catalysts: BTreeMap<String, String>,
}

impl DescriptionCache {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Cache(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheMergeReport {
    pub merged_adsorbate: usize,
    pub merged_catalyst: usize,
    pub missing_adsorbate: usize,
    pub missing_catalyst: usize,
}

/// Append cached prose to description samples. `systems` supplies the SMILES
/// and formula for each sample id.
pub fn merge_description_cache(
    samples: &mut [SerializedSample],
    systems: &[AtomicSystem],
    cache: &DescriptionCache,
) -> Result<CacheMergeReport> {
    let keys: BTreeMap<&str, (&str, &str)> = systems
        .iter()
        .map(|s| (s.id.as_str(), (s.adsorbate_smiles.as_str(), s.bulk_formula.as_str())))
        .collect();
    let mut report = CacheMergeReport::default();
    for sample in samples.iter_mut().filter(|s| s.format == TextFormat::Desc) {
        let &(smiles, formula) = keys
            .get(sample.system_id.as_str())
            .ok_or_else(|| Error::Data(format!("no system for sample {}", sample.system_id)))?;
        match cache.adsorbates.get(smiles) {
            Some(prose) => {
                sample.text.push_str("\n\n");
                sample.text.push_str(prose.trim());
                report.merged_adsorbate += 1;
            }
            None => report.missing_adsorbate += 1,
        }
        match cache.catalysts.get(formula) {
            Some(prose) => {
                sample.text.push_str("\n\n");
                sample.text.push_str(prose.trim());
                report.merged_catalyst += 1;
            }
            None => report.missing_catalyst += 1,
        }
    }
    Ok(report)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<SerializedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SerializedSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if sample.text.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                message: "empty text".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[SerializedSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for sample in samples {
        serde_json::to_writer(&mut out, sample).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Atom;

    fn atom(el: &str, p: [f64; 3], tag: Tag) -> Atom {
        Atom {
            element: el.into(),
            position: p,
            tag,
        }
    }

    fn slab_system(id: &str, smiles: &str, atoms: Vec<Atom>) -> AtomicSystem {
        AtomicSystem {
            id: id.into(),
            adsorbate_smiles: smiles.into(),
            bulk_formula: "Cr".into(),
            miller_index: [1, 0, 0],
            cell: [[20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 30.0]],
            atoms,
            energy_ev: Some(-1.0),
            split: Split::Id,
        }
    }

    #[test]
    fn nitrogen_over_chromium_pair_is_bridge() {
        // N 2.1 A from two Cr atoms: 2.1 <= 0.71 + 1.39 + 0.25
        let half = 1.25_f64;
        let h = (2.1_f64 * 2.1 - half * half).sqrt();
        let system = slab_system(
            "bridge",
            "N",
            vec![
                atom("Cr", [10.0 - half, 10.0, 10.0], Tag::Surface),
                atom("Cr", [10.0 + half, 10.0, 10.0], Tag::Surface),
                atom("N", [10.0, 10.0, 10.0 + h], Tag::Adsorbate),
            ],
        );
        let config = detect_configuration(&system, DEFAULT_CUTOFF_TOLERANCE).unwrap();
        assert_eq!(config.site_type, SiteType::Bridge);
        let els: Vec<&str> = config
            .primary_surface_atoms
            .iter()
            .map(|c| c.element.as_str())
            .collect();
        assert_eq!(els, ["Cr", "Cr"]);
        assert!(config.primary_surface_atoms.iter().all(|c| (c.distance - 2.1).abs() < 1e-12));
        assert_eq!(config.secondary_lists[0], ["Cr", "Cr", "N"]);
    }

    #[test]
    fn adatom_on_top_and_description_with_one_atom() {
        let mut system = slab_system(
            "ontop",
            "O",
            vec![
                atom("Cu", [10.0, 10.0, 10.0], Tag::Surface),
                atom("Cu", [12.6, 10.0, 10.0], Tag::Surface),
                atom("O", [10.0, 10.0, 11.8], Tag::Adsorbate),
            ],
        );
        system.bulk_formula = "Cu".into();
        let config = detect_configuration(&system, DEFAULT_CUTOFF_TOLERANCE).unwrap();
        assert_eq!(config.site_type, SiteType::Ontop);
        let desc = render_system_description(&system, Some(&config)).unwrap();
        assert!(desc.text.ends_with("binding to the catalytic surface atoms Cu."), "{}", desc.text);
    }

    #[test]
    fn no_contact_is_no_binding() {
        let system = slab_system(
            "far",
            "O",
            vec![
                atom("Cr", [10.0, 10.0, 10.0], Tag::Surface),
                atom("O", [10.0, 10.0, 16.0], Tag::Adsorbate),
            ],
        );
        assert!(matches!(
            detect_configuration(&system, DEFAULT_CUTOFF_TOLERANCE),
            Err(Error::NoBinding(_))
        ));
        assert!(matches!(
            serialize(&system, None, TextFormat::S4),
            Err(Error::NoBinding(_))
        ));
        assert!(render_system_description(&system, None).is_err());
        let fallback = featurize(&system, TextFormat::S4, DEFAULT_CUTOFF_TOLERANCE, true).unwrap();
        assert_eq!(fallback.text, "<s>O</s>Cr (1 0 0)</s>");
        assert!(featurize(&system, TextFormat::S4, DEFAULT_CUTOFF_TOLERANCE, false).is_err());
    }

    #[test]
    fn binding_atom_prefers_more_contacts_then_shorter_distance() {
        // O sits over a Cr pair, C sits on top of a single Cr.
        let system = slab_system(
            "two",
            "CO",
            vec![
                atom("Cr", [5.0, 5.0, 10.0], Tag::Surface),
                atom("Cr", [7.5, 5.0, 10.0], Tag::Surface),
                atom("Cr", [14.0, 14.0, 10.0], Tag::Surface),
                atom("O", [6.25, 5.0, 11.5], Tag::Adsorbate),
                atom("C", [14.0, 14.0, 11.9], Tag::Adsorbate),
            ],
        );
        let config = detect_configuration(&system, DEFAULT_CUTOFF_TOLERANCE).unwrap();
        assert_eq!(config.binding_atom.element, "O");
        assert_eq!(config.site_type, SiteType::Bridge);

        let tied = slab_system(
            "tie",
            "CO",
            vec![
                atom("Cr", [5.0, 5.0, 10.0], Tag::Surface),
                atom("Cr", [14.0, 14.0, 10.0], Tag::Surface),
                atom("O", [5.0, 5.0, 12.0], Tag::Adsorbate),
                atom("C", [14.0, 14.0, 11.9], Tag::Adsorbate),
            ],
        );
        let config = detect_configuration(&tied, DEFAULT_CUTOFF_TOLERANCE).unwrap();
        assert_eq!(config.binding_atom.element, "C");
    }

    #[test]
    fn site_mapping() {
        assert_eq!(SiteType::from_contact_count(0), None);
        assert_eq!(SiteType::from_contact_count(1), Some(SiteType::Ontop));
        assert_eq!(SiteType::from_contact_count(2), Some(SiteType::Bridge));
        assert_eq!(SiteType::from_contact_count(3), Some(SiteType::Hollow));
        assert_eq!(SiteType::from_contact_count(4), Some(SiteType::Fourfold));
        assert_eq!(SiteType::from_contact_count(6), Some(SiteType::Fourfold));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_one_decimal(2.25), 2.3);
        assert_eq!(round_one_decimal(2.15), 2.2);
        assert_eq!(round_one_decimal(-2.25), -2.3);
        assert_eq!(round_one_decimal(2.1), 2.1);
        for x in [0.05, 1.95, 2.049999, 3.17159] {
            let r = round_one_decimal(x);
            assert_eq!(round_one_decimal(r), r);
        }
    }

    #[test]
    fn format_names() {
        for f in TextFormat::ALL {
            assert_eq!(f.as_str().parse::<TextFormat>().unwrap(), f);
            assert_eq!(f.as_str().to_lowercase().parse::<TextFormat>().unwrap(), f);
        }
        assert!("s6".parse::<TextFormat>().is_err());
    }
}
