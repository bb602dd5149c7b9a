//! Prediction scoring: per-split MAE, energy-difference pairs, subgroup
//! error cancellation and error-propagation statistics.
//!
//! Pairs are streamed; nothing holds all n(n-1)/2 of them at once.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::csv_err;
use crate::error::{Error, Result};
use crate::system::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub system_id: String,
    pub split: Split,
    pub adsorbate_smiles: String,
    pub bulk_formula: String,
    pub label: f64,
    pub prediction: f64,
    /// prediction - label
    pub error: f64,
}

impl PredictionRecord {
    pub fn new(
        system_id: impl Into<String>,
        split: Split,
        adsorbate_smiles: impl Into<String>,
        bulk_formula: impl Into<String>,
        label: f64,
        prediction: f64,
    ) -> Self {
        Self {
            system_id: system_id.into(),
            split,
            adsorbate_smiles: adsorbate_smiles.into(),
            bulk_formula: bulk_formula.into(),
            label,
            prediction,
            error: prediction - label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMae {
    /// Split name, or `total`.
    pub split: String,
    pub mae: f64,
    pub count: usize,
}

/// MAE per split (in split order) followed by the total.
pub fn mae_by_split(records: &[PredictionRecord]) -> Vec<SplitMae> {
    let mut groups: BTreeMap<Split, (f64, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.split).or_default();
        g.0 += r.error.abs();
        g.1 += 1;
    }
    let mut out: Vec<SplitMae> = groups
        .iter()
        .map(|(s, (sum, n))| SplitMae {
            split: s.to_string(),
            mae: sum / *n as f64,
            count: *n,
        })
        .collect();
    let total: f64 = records.iter().map(|r| r.error.abs()).sum();
    out.push(SplitMae {
        split: "total".into(),
        mae: if records.is_empty() { f64::NAN } else { total / records.len() as f64 },
        count: records.len(),
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id_i: String,
    pub id_j: String,
    pub label_diff: f64,
    pub prediction_diff: f64,
    /// error_i - error_j
    pub error: f64,
    pub shares_adsorbate: bool,
    pub shares_bulk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    Total,
    /// Exactly one of adsorbate / bulk shared.
    SharingOne,
    /// Both shared.
    SharingTwo,
    /// At least one shared.
    ChemicallySimilar,
}

impl Subgroup {
    pub const ALL: [Subgroup; 4] = [
        Subgroup::Total,
        Subgroup::SharingOne,
        Subgroup::SharingTwo,
        Subgroup::ChemicallySimilar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Total => "total",
            Subgroup::SharingOne => "sharing_one",
            Subgroup::SharingTwo => "sharing_two",
            Subgroup::ChemicallySimilar => "chemically_similar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimilarityFlags {
    pub shares_adsorbate: bool,
    pub shares_bulk: bool,
}

impl SimilarityFlags {
    pub fn of(a: &PredictionRecord, b: &PredictionRecord) -> Self {
        Self {
            shares_adsorbate: a.adsorbate_smiles == b.adsorbate_smiles,
            shares_bulk: a.bulk_formula == b.bulk_formula,
        }
    }

    pub fn in_subgroup(self, g: Subgroup) -> bool {
        match g {
            Subgroup::Total => true,
            Subgroup::SharingOne => self.shares_adsorbate != self.shares_bulk,
            Subgroup::SharingTwo => self.shares_adsorbate && self.shares_bulk,
            Subgroup::ChemicallySimilar => self.shares_adsorbate || self.shares_bulk,
        }
    }
}

impl PairRecord {
    pub fn flags(&self) -> SimilarityFlags {
        SimilarityFlags {
            shares_adsorbate: self.shares_adsorbate,
            shares_bulk: self.shares_bulk,
        }
    }
}

fn make_pair(a: &PredictionRecord, b: &PredictionRecord) -> PairRecord {
    let f = SimilarityFlags::of(a, b);
    PairRecord {
        id_i: a.system_id.clone(),
        id_j: b.system_id.clone(),
        label_diff: a.label - b.label,
        prediction_diff: a.prediction - b.prediction,
        error: a.error - b.error,
        shares_adsorbate: f.shares_adsorbate,
        shares_bulk: f.shares_bulk,
    }
}

/// Records grouped for pairing: one group per split, or a single group.
/// Each group is sorted by system id so that `i < j` follows id order.
pub fn pair_groups(records: &[PredictionRecord], within_split: bool) -> Result<Vec<(String, Vec<&PredictionRecord>)>> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.system_id.as_str()) {
            return Err(Error::DuplicateId(r.system_id.clone()));
        }
    }
    let mut groups: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        let key = if within_split { r.split.to_string() } else { "all".to_string() };
        groups.entry(key).or_default().push(r);
    }
    let mut out: Vec<(String, Vec<&PredictionRecord>)> = groups.into_iter().collect();
    for (_, g) in &mut out {
        g.sort_by(|a, b| a.system_id.cmp(&b.system_id));
    }
    Ok(out)
}

/// Call `f` with every unordered pair of each group.
pub fn for_each_pair(
    records: &[PredictionRecord],
    within_split: bool,
    mut f: impl FnMut(&str, &PairRecord),
) -> Result<()> {
    for (name, group) in pair_groups(records, within_split)? {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                f(&name, &make_pair(group[i], group[j]));
            }
        }
    }
    Ok(())
}

/// Every pair, materialized. Prefer [`for_each_pair`] for large sets.
pub fn generate_pairs(records: &[PredictionRecord], within_split: bool) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for_each_pair(records, within_split, |_, p| out.push(p.clone()))?;
    Ok(out)
}

/// n(n-1)/2.
pub fn pair_count(n: u64) -> u64 {
    if n < 2 {
        0
    } else {
        n * (n - 1) / 2
    }
}

/// Running mean/variance/covariance of (x, y) samples (population moments).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoMoments {
    pub n: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
}

impl CoMoments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        self.mean_x += dx / n;
        let dy = y - self.mean_y;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn var_x(&self) -> f64 {
        self.m2_x / self.n as f64
    }

    pub fn var_y(&self) -> f64 {
        self.m2_y / self.n as f64
    }

    pub fn cov(&self) -> f64 {
        self.c_xy / self.n as f64
    }
}

/// Accumulates pair errors of one subgroup.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairAccumulator {
    pub count: u64,
    sum_sq: f64,
    /// (error_i, error_j) moments.
    members: CoMoments,
    /// Moments of the pair error itself (x) against zero (y unused).
    pair: CoMoments,
}

impl PairAccumulator {
    pub fn push(&mut self, error_i: f64, error_j: f64) {
        let e = error_i - error_j;
        self.count += 1;
        self.sum_sq += e * e;
        self.members.push(error_i, error_j);
        self.pair.push(e, 0.0);
    }

    /// Root of the mean squared pair error; `None` when empty.
    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }

    pub fn propagation(&self) -> Option<PropagationStats> {
        if self.count == 0 {
            return None;
        }
        let var_pair = self.pair.var_x();
        let var_i = self.members.var_x();
        let var_j = self.members.var_y();
        let cov = self.members.cov();
        Some(PropagationStats {
            n_pairs: self.count,
            var_pair,
            var_i,
            var_j,
            cov,
            residual: (var_pair - var_i - var_j + 2.0 * cov).abs(),
        })
    }
}

/// Var(e_i - e_j) against Var(e_i) + Var(e_j) - 2 Cov(e_i, e_j) over pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationStats {
    pub n_pairs: u64,
    pub var_pair: f64,
    pub var_i: f64,
    pub var_j: f64,
    pub cov: f64,
    pub residual: f64,
}

/// 100 (1 - rmse_sub / rmse_total); `None` when undefined.
pub fn secr_from_rmse(rmse_sub: Option<f64>, rmse_total: Option<f64>) -> Option<f64> {
    match (rmse_sub, rmse_total) {
        (Some(s), Some(t)) if t > 0.0 => Some(100.0 * (1.0 - s / t)),
        _ => None,
    }
}

/// SECR of `subgroup` within `pairs`.
pub fn secr<'a>(pairs: impl IntoIterator<Item = &'a PairRecord>, subgroup: Subgroup) -> Option<f64> {
    let mut total = PairAccumulator::default();
    let mut sub = PairAccumulator::default();
    for p in pairs {
        // only the pair error matters for rmse
        total.push(p.error, 0.0);
        if p.flags().in_subgroup(subgroup) {
            sub.push(p.error, 0.0);
        }
    }
    secr_from_rmse(sub.rmse(), total.rmse())
}

/// Accumulators for all subgroups of one pair group.
#[derive(Debug, Clone, Default)]
pub struct PairStatistics {
    pub groups: BTreeMap<Subgroup, PairAccumulator>,
}

impl PairStatistics {
    pub fn push(&mut self, error_i: f64, error_j: f64, flags: SimilarityFlags) {
        for g in Subgroup::ALL {
            if flags.in_subgroup(g) {
                self.groups.entry(g).or_default().push(error_i, error_j);
            }
        }
    }

    pub fn get(&self, g: Subgroup) -> PairAccumulator {
        self.groups.get(&g).copied().unwrap_or_default()
    }

    pub fn secr(&self, g: Subgroup) -> Option<f64> {
        secr_from_rmse(self.get(g).rmse(), self.get(Subgroup::Total).rmse())
    }
}

/// Stream every pair once and accumulate statistics per pair group.
pub fn pair_statistics(
    records: &[PredictionRecord],
    within_split: bool,
) -> Result<BTreeMap<String, PairStatistics>> {
    let mut out: BTreeMap<String, PairStatistics> = BTreeMap::new();
    for (name, group) in pair_groups(records, within_split)? {
        let stats = out.entry(name).or_default();
        for i in 0..group.len() {
            let a = group[i];
            for b in &group[i + 1..] {
                stats.push(a.error, b.error, SimilarityFlags::of(a, b));
            }
        }
        // make sure an empty group still reports a zero-count total
        stats.groups.entry(Subgroup::Total).or_default();
    }
    Ok(out)
}

/// Propagation statistics of every subgroup of every pair group.
pub fn error_propagation_stats(
    records: &[PredictionRecord],
    within_split: bool,
) -> Result<Vec<PropagationRow>> {
    if records.len() < 2 {
        return Err(Error::Data(format!("{} records; at least 2 needed", records.len())));
    }
    let mut rows = Vec::new();
    for (group, stats) in pair_statistics(records, within_split)? {
        for g in Subgroup::ALL {
            if let Some(p) = stats.get(g).propagation() {
                rows.push(PropagationRow {
                    group: group.clone(),
                    subgroup: g.as_str().to_string(),
                    stats: p,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationRow {
    pub group: String,
    pub subgroup: String,
    #[serde(flatten)]
    pub stats: PropagationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecrRow {
    pub group: String,
    pub subgroup: String,
    pub pairs: u64,
    pub rmse: Option<f64>,
    /// Percent; absent when undefined.
    pub secr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair_counts: BTreeMap<String, u64>,
    pub secr: Vec<SecrRow>,
    pub propagation: Vec<PropagationRow>,
}

pub fn pair_report(records: &[PredictionRecord], within_split: bool) -> Result<PairReport> {
    let stats = pair_statistics(records, within_split)?;
    let mut pair_counts = BTreeMap::new();
    let mut secr = Vec::new();
    let mut propagation = Vec::new();
    for (group, s) in &stats {
        pair_counts.insert(group.clone(), s.get(Subgroup::Total).count);
        for g in Subgroup::ALL {
            let acc = s.get(g);
            secr.push(SecrRow {
                group: group.clone(),
                subgroup: g.as_str().to_string(),
                pairs: acc.count,
                rmse: acc.rmse(),
                secr: s.secr(g),
            });
            if let Some(p) = acc.propagation() {
                propagation.push(PropagationRow {
                    group: group.clone(),
                    subgroup: g.as_str().to_string(),
                    stats: p,
                });
            }
        }
    }
    Ok(PairReport {
        pair_counts,
        secr,
        propagation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: Vec<SplitMae>,
    pub pairs: PairReport,
}

pub fn eval_report(records: &[PredictionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    Ok(EvalReport {
        mae: mae_by_split(records),
        pairs: pair_report(records, true)?,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PRED_HEADER: [&str; 6] = ["system_id", "split", "smiles", "formula", "label", "prediction"];

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(PRED_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.system_id.as_str(),
            r.split.as_str(),
            &r.adsorbate_smiles,
            &r.bulk_formula,
            &format!("{:?}", r.label),
            &format!("{:?}", r.prediction),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(PRED_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", PRED_HEADER.join("\t")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let bad = |m: String| Error::Parse { line, message: m };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        out.push(PredictionRecord::new(
            &rec[0],
            rec[1].parse::<Split>().map_err(|e| bad(e.to_string()))?,
            &rec[2],
            &rec[3],
            num(&rec[4])?,
            num(&rec[5])?,
        ));
    }
    Ok(out)
}

/// Write `parity_<split>.tsv` (system_id, label, prediction) for every split
/// present and `parity_summary.tsv` with per-split MAE and counts.
pub fn export_parity(dir: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_split: BTreeMap<Split, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_split.entry(r.split).or_default().push(r);
    }
    let mut written = Vec::new();
    for (split, rows) in &by_split {
        let path = dir.join(format!("parity_{}.tsv", split.as_str()));
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        w.write_record(["system_id", "label", "prediction"]).map_err(|e| csv_err(&path, e))?;
        for r in rows {
            w.write_record([
                r.system_id.as_str(),
                &format!("{:?}", r.label),
                &format!("{:?}", r.prediction),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("parity_summary.tsv");
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| csv_err(&path, e))?;
    w.write_record(["split", "count", "mae"]).map_err(|e| csv_err(&path, e))?;
    for m in mae_by_split(records) {
        w.write_record([m.split.as_str(), &m.count.to_string(), &format!("{:?}", m.mae)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, smiles: &str, bulk: &str, label: f64, pred: f64) -> PredictionRecord {
        PredictionRecord::new(id, Split::Id, smiles, bulk, label, pred)
    }

    #[test]
    fn mae_cases() {
        let r = vec![rec("a", "O", "Pt", 1.0, 2.0), rec("b", "O", "Pt", 1.0, 0.0)];
        let m = mae_by_split(&r);
        assert_eq!(m[0].split, "ID");
        assert_eq!(m[0].mae, 1.0);
        assert_eq!(m.last().unwrap().count, 2);
        let exact = vec![rec("a", "O", "Pt", 1.0, 1.0)];
        assert!(mae_by_split(&exact).iter().all(|m| m.mae == 0.0));
    }

    #[test]
    fn similarity_examples() {
        let a = rec("1", "NH", "Al20Rh8", 0.0, 0.0);
        let b = rec("2", "NH", "N2Ti4", 0.0, 0.0);
        let f = SimilarityFlags::of(&a, &b);
        assert!(f.shares_adsorbate && !f.shares_bulk);
        assert!(f.in_subgroup(Subgroup::SharingOne) && !f.in_subgroup(Subgroup::SharingTwo));
        let c = rec("3", "OCH3", "Sc3Al", 0.0, 0.0);
        let d = rec("4", "COCH2O", "Sc3Al", 0.0, 0.0);
        assert!(SimilarityFlags::of(&c, &d).in_subgroup(Subgroup::SharingOne));
        let e = rec("5", "OCH3", "Sc3Al", 0.0, 0.0);
        let f = SimilarityFlags::of(&c, &e);
        assert!(f.in_subgroup(Subgroup::SharingTwo) && f.in_subgroup(Subgroup::ChemicallySimilar));
        assert!(!f.in_subgroup(Subgroup::SharingOne));
    }

    #[test]
    fn pair_counts_and_ordering() {
        assert_eq!(pair_count(1), 0);
        assert_eq!(pair_count(0), 0);
        let r = vec![rec("c", "O", "Pt", 0.0, 0.3), rec("a", "O", "Pt", 1.0, 0.5), rec("b", "O", "Cu", 2.0, 2.0)];
        let pairs = generate_pairs(&r, true).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!((pairs[0].id_i.as_str(), pairs[0].id_j.as_str()), ("a", "b"));
        let dup = vec![rec("a", "O", "Pt", 0.0, 0.0), rec("a", "O", "Pt", 0.0, 0.0)];
        assert!(matches!(generate_pairs(&dup, true), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn secr_limits() {
        let r: Vec<_> = (0..6)
            .map(|i| rec(&format!("s{i}"), if i < 3 { "O" } else { "OH" }, "Pt", 0.0, i as f64))
            .collect();
        let pairs = generate_pairs(&r, true).unwrap();
        assert_eq!(secr(&pairs, Subgroup::Total), Some(0.0));
        // same errors within a subgroup: bias cancels completely
        let r2: Vec<_> = (0..4)
            .map(|i| rec(&format!("t{i}"), if i < 2 { "O" } else { "OH" }, &format!("B{i}"), 0.0, if i < 2 { 1.0 } else { 3.0 }))
            .collect();
        let p2 = generate_pairs(&r2, true).unwrap();
        assert_eq!(secr(&p2, Subgroup::SharingOne), Some(100.0));
        assert_eq!(secr(&p2, Subgroup::SharingTwo), None);
        let zero: Vec<_> = (0..3).map(|i| rec(&format!("z{i}"), "O", "Pt", 1.0, 1.0)).collect();
        assert_eq!(secr(&generate_pairs(&zero, true).unwrap(), Subgroup::Total), None);
    }

    #[test]
    fn propagation_extremes() {
        let mut same = PairAccumulator::default();
        let mut anti = PairAccumulator::default();
        for e in [0.3, -1.2, 0.7, 2.0] {
            same.push(e, e);
            anti.push(e, -e);
        }
        assert_eq!(same.propagation().unwrap().var_pair, 0.0);
        let a = anti.propagation().unwrap();
        assert!((a.var_pair - 4.0 * a.var_i).abs() < 1e-12);
        let mut constant = PairAccumulator::default();
        constant.push(0.5, 0.5);
        constant.push(0.5, 0.5);
        let c = constant.propagation().unwrap();
        assert_eq!((c.cov, c.residual), (0.0, 0.0));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.tsv");
        let r = vec![rec("a", "*OH", "VCr3", -0.1, 0.2 + 0.1), rec("b", "NH3", "Pt", 1.0 / 3.0, 2.0)];
        write_predictions(&p, &r).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), r);
        let files = export_parity(dir.path(), &r).unwrap();
        assert_eq!(files.len(), 2);
    }
}
