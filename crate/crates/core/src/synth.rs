//! Synthetic adsorbate-slab systems with an analytic energy.
//!
//! Slabs are two-layer triangular lattices; the adsorbate sits on an ontop,
//! bridge or threefold hollow site. The label is
//! `E = A[adsorbate] + S[site] + mean(B[e] for primary contacts e) + noise`,
//! computed from the configuration the featurizer actually detects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::elements::covalent_radius;
use crate::error::{Error, Result};
use crate::featurize::{detect_configuration, AdsorptionConfiguration, SiteType, DEFAULT_CUTOFF_TOLERANCE};
use crate::system::{Atom, AtomicSystem, Cell, Split, Tag, Vec3};

const LATTICE: f64 = 2.8;
const CELL_REPEAT: usize = 4;
const SURFACE_Z: f64 = 10.0;
const LAYER_GAP: f64 = 2.3;
const VACUUM_CELL_Z: f64 = 30.0;

/// (label, atoms from the binding atom upward, adsorbate term in eV)
const ADSORBATES: [(&str, &[&str], f64); 10] = [
    ("O", &["O"], -1.6),
    ("OH", &["O", "H"], -0.4),
    ("NH3", &["N", "H", "H", "H"], 0.3),
    ("NH2", &["N", "H", "H"], -0.9),
    ("N", &["N"], -1.9),
    ("CO", &["C", "O"], -0.6),
    ("CH3", &["C", "H", "H", "H"], 0.1),
    ("COH", &["C", "O", "H"], -1.2),
    ("OCH3", &["O", "C", "H", "H", "H"], 0.5),
    ("NO", &["N", "O"], -1.0),
];

/// (metal, element term in eV)
const METALS: [(&str, f64); 16] = [
    ("Cu", 0.2),
    ("Pt", -0.5),
    ("Pd", -0.3),
    ("Ag", 0.5),
    ("Au", 0.6),
    ("Rh", -0.4),
    ("Ir", -0.45),
    ("Ru", -0.55),
    ("Fe", -0.7),
    ("Cr", -0.9),
    ("V", -1.0),
    ("Ti", -1.2),
    ("Mo", -0.8),
    ("Sc", -1.3),
    ("Nb", -1.1),
    ("W", -0.85),
];

const MILLER: [[i32; 3]; 7] = [
    [1, 0, 0],
    [1, 1, 0],
    [1, 1, 1],
    [2, 1, 0],
    [2, 1, 1],
    [0, 0, 1],
    [1, 0, 1],
];

pub fn site_term(site: SiteType) -> f64 {
    match site {
        SiteType::Ontop => 0.4,
        SiteType::Bridge => 0.0,
        SiteType::Hollow => -0.4,
        SiteType::Fourfold => -0.6,
    }
}

pub fn adsorbate_term(smiles: &str) -> Option<f64> {
    ADSORBATES.iter().find(|a| a.0 == smiles).map(|a| a.2)
}

pub fn element_term(symbol: &str) -> Option<f64> {
    METALS.iter().find(|m| m.0 == symbol).map(|m| m.1)
}

/// Noise-free energy of a detected configuration.
pub fn analytic_energy(smiles: &str, config: &AdsorptionConfiguration) -> Result<f64> {
    let a = adsorbate_term(smiles)
        .ok_or_else(|| Error::Data(format!("no synthetic term for adsorbate {smiles}")))?;
    let mut b = 0.0;
    for c in &config.primary_surface_atoms {
        b += element_term(&c.element)
            .ok_or_else(|| Error::Data(format!("no synthetic term for element {}", c.element)))?;
    }
    Ok(a + site_term(config.site_type) + b / config.primary_surface_atoms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_systems: usize,
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Spread validation systems over the four validation split labels
    /// instead of labelling them all `ID`. The labels carry no meaning here.
    pub mixed_validation_splits: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_systems: 2000,
            noise_sigma: 0.1,
            val_fraction: 0.2,
            seed: 0,
            mixed_validation_splits: false,
        }
    }
}

fn lattice_point(i: i64, j: i64) -> Vec3 {
    let (x, y) = (
        LATTICE * (i as f64 + 0.5 * j as f64),
        LATTICE * (3f64.sqrt() / 2.0) * j as f64,
    );
    [x, y, SURFACE_Z]
}

fn cell() -> Cell {
    let n = CELL_REPEAT as f64 * LATTICE;
    [
        [n, 0.0, 0.0],
        [0.5 * n, n * 3f64.sqrt() / 2.0, 0.0],
        [0.0, 0.0, VACUUM_CELL_Z],
    ]
}

fn bulk_formula(a: &str, b: Option<(&str, usize, usize)>) -> String {
    match b {
        None => a.to_string(),
        Some((b, na, nb)) => {
            let part = |el: &str, n: usize| if n == 1 { el.to_string() } else { format!("{el}{n}") };
            format!("{}{}", part(a, na), part(b, nb))
        }
    }
}

struct Draft {
    system: AtomicSystem,
    intended: SiteType,
}

fn draft(rng: &mut ChaCha8Rng, id: String, split: Split) -> Result<Draft> {
    let (smiles, ads_atoms, _) = ADSORBATES[rng.random_range(0..ADSORBATES.len())];
    let ia = rng.random_range(0..METALS.len());
    let a = METALS[ia].0;
    // stoichiometry: elemental, AB, AB3 or A3B
    let pattern = rng.random_range(0..4);
    let (formula, b_fraction, b) = if pattern == 0 {
        (bulk_formula(a, None), 0.0, a)
    } else {
        let mut ib = rng.random_range(0..METALS.len() - 1);
        if ib >= ia {
            ib += 1;
        }
        let b = METALS[ib].0;
        let (na, nb) = [(1, 1), (1, 3), (3, 1)][pattern - 1];
        (bulk_formula(a, Some((b, na, nb))), nb as f64 / (na + nb) as f64, b)
    };

    let n_slab = CELL_REPEAT * CELL_REPEAT;
    let mut slab_elements: Vec<&str> = (0..2 * n_slab)
        .map(|k| if (k as f64) < b_fraction * (2 * n_slab) as f64 { b } else { a })
        .collect();
    slab_elements.shuffle(rng);

    let mut atoms = Vec::with_capacity(2 * n_slab + ads_atoms.len());
    let sub_offset = [LATTICE / 2.0, LATTICE / (2.0 * 3f64.sqrt()), -LAYER_GAP];
    for j in 0..CELL_REPEAT as i64 {
        for i in 0..CELL_REPEAT as i64 {
            let k = (j as usize) * CELL_REPEAT + i as usize;
            let p = lattice_point(i, j);
            atoms.push(Atom {
                element: slab_elements[k].to_string(),
                position: p,
                tag: Tag::Surface,
            });
            atoms.push(Atom {
                element: slab_elements[n_slab + k].to_string(),
                position: [p[0] + sub_offset[0], p[1] + sub_offset[1], p[2] + sub_offset[2]],
                tag: Tag::Subsurface,
            });
        }
    }

    let site = [SiteType::Ontop, SiteType::Bridge, SiteType::Hollow][rng.random_range(0..3)];
    let i = rng.random_range(0..CELL_REPEAT as i64 - 1);
    let j = rng.random_range(0..CELL_REPEAT as i64 - 1);
    let corners: Vec<(i64, i64)> = match site {
        SiteType::Ontop => vec![(i, j)],
        SiteType::Bridge => vec![(i, j), (i + 1, j)],
        _ => vec![(i, j), (i + 1, j), (i, j + 1)],
    };
    let contacted: Vec<&str> = corners
        .iter()
        .map(|&(ci, cj)| slab_elements[cj as usize * CELL_REPEAT + ci as usize])
        .collect();
    let points: Vec<Vec3> = corners.iter().map(|&(ci, cj)| lattice_point(ci, cj)).collect();
    let k = points.len() as f64;
    let center = [
        points.iter().map(|p| p[0]).sum::<f64>() / k,
        points.iter().map(|p| p[1]).sum::<f64>() / k,
        SURFACE_Z,
    ];
    let horizontal = ((points[0][0] - center[0]).powi(2) + (points[0][1] - center[1]).powi(2)).sqrt();

    let r_bind = covalent_radius(ads_atoms[0])?;
    let mut min_r = f64::INFINITY;
    for el in &contacted {
        min_r = min_r.min(covalent_radius(el)?);
    }
    let bond = r_bind + min_r + 0.12;
    let height = (bond * bond - horizontal * horizontal).max(1.0).sqrt();
    let bind_pos = [center[0], center[1], SURFACE_Z + height];

    atoms.push(Atom {
        element: ads_atoms[0].to_string(),
        position: bind_pos,
        tag: Tag::Adsorbate,
    });
    // heavy atoms stack straight up; hydrogens fan out in a narrow cone
    let mut anchor = bind_pos;
    let heavy: Vec<&str> = ads_atoms[1..].iter().copied().filter(|e| *e != "H").collect();
    for el in &heavy {
        anchor = [anchor[0], anchor[1], anchor[2] + 1.3];
        atoms.push(Atom {
            element: el.to_string(),
            position: anchor,
            tag: Tag::Adsorbate,
        });
    }
    let n_h = ads_atoms.iter().filter(|e| **e == "H").count();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt: f64 = if n_h == 1 { 0.0 } else { 30f64.to_radians() };
    for h in 0..n_h {
        let phi = phase + std::f64::consts::TAU * h as f64 / n_h as f64;
        atoms.push(Atom {
            element: "H".to_string(),
            position: [
                anchor[0] + 1.0 * tilt.sin() * phi.cos(),
                anchor[1] + 1.0 * tilt.sin() * phi.sin(),
                anchor[2] + 1.0 * tilt.cos(),
            ],
            tag: Tag::Adsorbate,
        });
    }

    let system = AtomicSystem {
        id,
        adsorbate_smiles: smiles.to_string(),
        bulk_formula: formula,
        miller_index: MILLER[rng.random_range(0..MILLER.len())],
        cell: cell(),
        atoms,
        energy_ev: None,
        split,
    };
    Ok(Draft {
        system,
        intended: site,
    })
}

/// Generate a labelled dataset. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Vec<AtomicSystem>> {
    if !(0.0..1.0).contains(&config.val_fraction) || !(config.noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "val_fraction {} must lie in [0, 1) and noise_sigma {} be non-negative",
            config.val_fraction, config.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n_val = (config.n_systems as f64 * config.val_fraction).round() as usize;
    let mut out = Vec::with_capacity(config.n_systems);
    for idx in 0..config.n_systems {
        let split = if idx < config.n_systems - n_val {
            Split::Train
        } else if config.mixed_validation_splits {
            Split::VALIDATION[idx % Split::VALIDATION.len()]
        } else {
            Split::Id
        };
        let id = format!("synth_{:05}", idx);
        let mut tries = 0;
        loop {
            tries += 1;
            let Draft { mut system, intended } = draft(&mut rng, id.clone(), split)?;
            let detected = match detect_configuration(&system, DEFAULT_CUTOFF_TOLERANCE) {
                Ok(c) => c,
                Err(Error::NoBinding(_)) => continue,
                Err(e) => return Err(e),
            };
            let first_adsorbate = system.adsorbate_indices().next();
            if detected.site_type != intended || Some(detected.binding_atom.index) != first_adsorbate {
                if tries > 100 {
                    return Err(Error::Data(format!("could not place an adsorbate for {id}")));
                }
                continue;
            }
            let clean = analytic_energy(&system.adsorbate_smiles, &detected)?;
            let e = if config.noise_sigma > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            };
            system.energy_ev = Some(e);
            system.validate()?;
            out.push(system);
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig {
            n_systems: 40,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.split == Split::Train).count(), 32);
        for s in &a {
            s.validate().unwrap();
        }
    }

    #[test]
    fn noise_free_labels_match_the_analytic_function() {
        let cfg = SynthConfig {
            n_systems: 30,
            noise_sigma: 0.0,
            seed: 5,
            ..Default::default()
        };
        for s in generate(&cfg).unwrap() {
            let c = detect_configuration(&s, DEFAULT_CUTOFF_TOLERANCE).unwrap();
            let e = analytic_energy(&s.adsorbate_smiles, &c).unwrap();
            assert_eq!(s.energy_ev, Some(e));
        }
    }

    #[test]
    fn every_site_type_appears() {
        let cfg = SynthConfig {
            n_systems: 60,
            ..Default::default()
        };
        let mut seen = std::collections::BTreeSet::new();
        for s in generate(&cfg).unwrap() {
            seen.insert(detect_configuration(&s, DEFAULT_CUTOFF_TOLERANCE).unwrap().site_type);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn formulas() {
        assert_eq!(bulk_formula("V", Some(("Cr", 1, 3))), "VCr3");
        assert_eq!(bulk_formula("Pt", None), "Pt");
    }
}
