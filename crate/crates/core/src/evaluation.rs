//! Dice scoring, experiment orchestration over organ-group folds and
//! results reporting.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use ndarray::{Array3, ArrayView, Dimension};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClassCatalog, VolumeScan};
use crate::encoder::ModelState;
use crate::inference::{segment_volume, InferenceConfig, VolumeSegmentation};
use crate::prototype::HeadConfig;
use crate::training::{episode_rng, TrainingAudit};
use crate::{ClassId, Error, Result};

/// `2|A n B| / (|A| + |B|)` over non-zero voxels; 1.0 when both are empty.
pub fn dice_score<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        a += p as usize;
        b += g as usize;
        both += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Cca,
    Ttt,
    SliceAdapter,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Cca, Variant::Ttt, Variant::SliceAdapter];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cca => "cca",
            Variant::Ttt => "ttt",
            Variant::SliceAdapter => "slice_adapter",
        }
    }

    /// Whether predictions are filtered to the most confident component.
    /// Test-time training is always paired with filtering.
    pub fn uses_cca(self) -> bool {
        matches!(self, Variant::Cca | Variant::Ttt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}` (expected base, cca, ttt or slice_adapter)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dataset {
    AbdCt,
    AbdMri,
    Synth,
}

/// Classes held out together in one fold, by name or numeric id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganGroup {
    pub name: String,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub dataset: Dataset,
    pub organ_groups: Vec<OrganGroup>,
    pub n_way: usize,
    pub k_shot: usize,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dataset: Dataset::AbdMri,
            organ_groups: vec![
                OrganGroup {
                    name: "upper".into(),
                    classes: vec!["spleen".into(), "liver".into()],
                },
                OrganGroup {
                    name: "lower".into(),
                    classes: vec!["left_kidney".into(), "right_kidney".into()],
                },
            ],
            n_way: 1,
            k_shot: 1,
            variants: vec![Variant::Base, Variant::Cca],
            seeds: vec![0],
        }
    }
}

impl ExperimentSpec {
    /// Checks the setting and resolves every group against `catalog`.
    pub fn resolve(&self, catalog: &ClassCatalog) -> Result<Vec<(String, Vec<ClassId>)>> {
        if (self.n_way, self.k_shot) != (1, 1) {
            return Err(Error::InvalidConfig(format!(
                "only 1-way 1-shot evaluation is supported, got {}-way {}-shot",
                self.n_way, self.k_shot
            )));
        }
        if self.organ_groups.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs organ groups, variants and seeds".into()));
        }
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for g in &self.organ_groups {
            let mut ids = Vec::new();
            for key in &g.classes {
                let id = catalog
                    .resolve(key)
                    .ok_or_else(|| Error::InvalidConfig(format!("organ group {}: unknown class `{key}`", g.name)))?;
                if let Some(other) = seen.insert(id, g.name.clone()) {
                    return Err(Error::InvalidConfig(format!(
                        "class `{key}` appears in organ groups {other} and {}",
                        g.name
                    )));
                }
                ids.push(id);
            }
            out.push((g.name.clone(), ids));
        }
        Ok(out)
    }
}

/// `(query, support)` patient pairs: every patient is queried once against
/// a support patient drawn from the others with a seeded generator.
pub fn pairings(patients: &[String], seed: u64) -> Result<Vec<(String, String)>> {
    if patients.len() < 2 {
        return Err(Error::InvalidInput("pairing needs at least two patients".into()));
    }
    let mut rng = episode_rng(seed, 0);
    Ok(patients
        .iter()
        .map(|q| {
            let others: Vec<&String> = patients.iter().filter(|p| *p != q).collect();
            (q.clone(), (*others.choose(&mut rng).expect("two or more patients")).clone())
        })
        .collect())
}

/// Training record of the model used for one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldCheckpoint {
    pub fold: String,
    pub audit: TrainingAudit,
}

/// Produces a binary prediction volume for one query.
pub trait VolumeSegmenter {
    fn segment(
        &mut self,
        variant: Variant,
        fold: &str,
        query: &VolumeScan,
        support: &VolumeScan,
        class: ClassId,
    ) -> Result<Array3<u8>>;
}

/// Segments with trained models through [`segment_volume`]. Models are keyed
/// by `(variant, fold)`; a variant without its own model falls back to the
/// `Base` model of the fold. Filtering follows [`Variant::uses_cca`].
pub struct ModelSegmenter {
    pub models: BTreeMap<(Variant, String), ModelState>,
    pub head: HeadConfig,
    pub inference: InferenceConfig,
}

impl ModelSegmenter {
    pub fn model(&self, variant: Variant, fold: &str) -> Result<&ModelState> {
        self.models
            .get(&(variant, fold.to_string()))
            .or_else(|| self.models.get(&(Variant::Base, fold.to_string())))
            .ok_or_else(|| Error::InvalidInput(format!("no model for variant {variant} on fold {fold}")))
    }

    pub fn segment_full(
        &self,
        variant: Variant,
        fold: &str,
        query: &VolumeScan,
        support: &VolumeScan,
        class: ClassId,
    ) -> Result<VolumeSegmentation> {
        let cfg = InferenceConfig {
            cca: variant.uses_cca(),
            ..self.inference.clone()
        };
        segment_volume(query, support, class, self.model(variant, fold)?, &self.head, &cfg)
    }
}

impl VolumeSegmenter for ModelSegmenter {
    fn segment(
        &mut self,
        variant: Variant,
        fold: &str,
        query: &VolumeScan,
        support: &VolumeScan,
        class: ClassId,
    ) -> Result<Array3<u8>> {
        Ok(self.segment_full(variant, fold, query, support, class)?.prediction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub variant: Variant,
    pub fold: String,
    pub class: String,
    pub scan_id: String,
    /// Percent.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub class: String,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub n_scans: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<ScanResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsTable {
    /// Per-class statistics per variant, plus a `Mean` row per variant that
    /// averages the class means. Variants and classes keep first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<(Variant, Vec<String>)> = Vec::new();
        let mut values: BTreeMap<(Variant, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            match order.iter_mut().find(|(v, _)| *v == r.variant) {
                Some((_, classes)) => {
                    if !classes.contains(&r.class) {
                        classes.push(r.class.clone());
                    }
                }
                None => order.push((r.variant, vec![r.class.clone()])),
            }
            values.entry((r.variant, r.class.clone())).or_default().push(r.dice);
        }
        let mut out = Vec::new();
        for (variant, classes) in order {
            let mut means = Vec::new();
            for class in classes {
                let xs = &values[&(variant, class.clone())];
                let (mean, std) = mean_std(xs);
                means.push(mean);
                out.push(SummaryRow {
                    variant,
                    class,
                    mean_dice: mean,
                    std_dice: std,
                    n_scans: xs.len(),
                });
            }
            let (mean, std) = mean_std(&means);
            out.push(SummaryRow {
                variant,
                class: "Mean".into(),
                mean_dice: mean,
                std_dice: std,
                n_scans: values
                    .iter()
                    .filter(|((v, _), _)| *v == variant)
                    .map(|(_, xs)| xs.len())
                    .sum(),
            });
        }
        out
    }

    /// Mean Dice (percent) of one variant over all its scans and classes.
    pub fn variant_mean(&self, variant: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.dice).collect();
        (!xs.is_empty()).then(|| mean_std(&xs).0)
    }

    /// Variants as rows and classes as columns, two decimals.
    pub fn render_text(&self) -> String {
        let summary = self.summary();
        let mut classes: Vec<String> = Vec::new();
        let mut variants: Vec<Variant> = Vec::new();
        for s in &summary {
            if s.class != "Mean" && !classes.contains(&s.class) {
                classes.push(s.class.clone());
            }
            if !variants.contains(&s.variant) {
                variants.push(s.variant);
            }
        }
        classes.push("Mean".into());
        let width = classes.iter().map(|c| c.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<14}", "variant");
        for c in &classes {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for v in variants {
            let _ = write!(out, "{:<14}", v.name());
            for c in &classes {
                match summary.iter().find(|s| s.variant == v && &s.class == c) {
                    Some(s) => {
                        let _ = write!(out, " {:>width$.2}", s.mean_dice);
                    }
                    None => {
                        let _ = write!(out, " {:>width$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TABLE_TXT: &str = "table.txt";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Serde(format!("{}: {e}", path.display()))
}

/// Writes `results.csv` (one row per scan), `summary.csv` and `table.txt`.
/// Output depends only on the table, so re-rendering is byte-identical.
pub fn report(table: &MetricsTable, out: &Path) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::InvalidInput("cannot report an empty table".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RESULTS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &table.rows {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in table.summary() {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join(TABLE_TXT);
    std::fs::write(&path, table.render_text()).map_err(|e| Error::io(&path, e))
}

/// Reads a `results.csv` back.
pub fn read_results(path: &Path) -> Result<MetricsTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScanResult>, _>>()
        .map_err(csv_err(path))?;
    Ok(MetricsTable { rows })
}

fn check_audit(fold: &str, classes: &[ClassId], checkpoints: &[FoldCheckpoint]) -> Result<()> {
    let ck = checkpoints
        .iter()
        .find(|c| c.fold == fold)
        .ok_or_else(|| Error::InvalidInput(format!("no checkpoint for fold {fold}")))?;
    let mut expected = classes.to_vec();
    let mut trained = ck.audit.test_classes.clone();
    expected.sort();
    trained.sort();
    if expected != trained {
        return Err(Error::InvalidInput(format!(
            "checkpoint for fold {fold} held out {trained:?}, fold tests {expected:?}"
        )));
    }
    if ck.audit.pool_test_pixels > 0 || ck.audit.episodes_with_test_pixels > 0 {
        return Err(Error::Audit(format!(
            "fold {fold}: training saw {} test-class pixels in {} episodes",
            ck.audit.pool_test_pixels, ck.audit.episodes_with_test_pixels
        )));
    }
    Ok(())
}

/// Evaluates every variant on every fold: each test class, each seed's
/// query/support pairing, one volumetric Dice per query scan.
pub fn run_experiment(
    spec: &ExperimentSpec,
    scans: &[VolumeScan],
    catalog: &ClassCatalog,
    checkpoints: &[FoldCheckpoint],
    segmenter: &mut dyn VolumeSegmenter,
) -> Result<MetricsTable> {
    let folds = spec.resolve(catalog)?;
    for (fold, classes) in &folds {
        check_audit(fold, classes, checkpoints)?;
    }
    let by_id: BTreeMap<&str, &VolumeScan> = scans.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    let patients: Vec<String> = scans.iter().map(|s| s.patient_id.clone()).collect();
    let mut table = MetricsTable::default();
    for &variant in &spec.variants {
        for (fold, classes) in &folds {
            for &class in classes {
                let name = catalog.name(class).unwrap_or("?").to_string();
                for &seed in &spec.seeds {
                    for (q, s) in pairings(&patients, seed)? {
                        let (query, support) = (by_id[q.as_str()], by_id[s.as_str()]);
                        let gt = query.mask(class).ok_or_else(|| Error::ClassAbsent {
                            class,
                            patient: q.clone(),
                        })?;
                        let pred = segmenter.segment(variant, fold, query, support, class)?;
                        let dice = dice_score(pred.view(), gt.view())?;
                        table.rows.push(ScanResult {
                            variant,
                            fold: fold.clone(),
                            class: name.clone(),
                            scan_id: q,
                            dice: 100.0 * dice,
                        });
                    }
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use ndarray::{array, s, Array2};
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        let a = array![[1u8, 1, 1, 1, 0, 0]];
        let b = array![[0u8, 0, 1, 1, 1, 1]];
        assert_eq!(dice_score(a.view(), b.view()).unwrap(), 0.5);
        assert_eq!(dice_score(a.view(), a.view()).unwrap(), 1.0);
        let c = array![[0u8, 0, 0, 0, 1, 1]];
        assert_eq!(dice_score(array![[1u8, 1, 0, 0, 0, 0]].view(), c.view()).unwrap(), 0.0);
        let z = Array2::<u8>::zeros((2, 2));
        assert_eq!(dice_score(z.view(), z.view()).unwrap(), 1.0);
        assert!(dice_score(z.view(), Array2::<u8>::zeros((2, 3)).view()).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_monotone(bits in proptest::collection::vec(0u8..4, 36)) {
            let a = Array2::from_shape_fn((6, 6), |(r, c)| bits[r * 6 + c] & 1);
            let b = Array2::from_shape_fn((6, 6), |(r, c)| (bits[r * 6 + c] >> 1) & 1);
            let ab = dice_score(a.view(), b.view()).unwrap();
            prop_assert_eq!(ab, dice_score(b.view(), a.view()).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            // adding a true positive never lowers the score
            if let Some(i) = (0..36).find(|&i| b[[i / 6, i % 6]] == 1 && a[[i / 6, i % 6]] == 0) {
                let mut grown = a.clone();
                grown[[i / 6, i % 6]] = 1;
                prop_assert!(dice_score(grown.view(), b.view()).unwrap() >= ab);
            }
        }
    }

    fn scans() -> (Vec<VolumeScan>, ClassCatalog) {
        let catalog = ClassCatalog::new([(1, "bright"), (2, "dark")]);
        let scans = (0..3)
            .map(|i| {
                let mut m1 = Array3::<u8>::zeros((8, 8, 4));
                m1.slice_mut(s![1..4, 1..4, 1..3]).fill(1);
                let mut m2 = Array3::<u8>::zeros((8, 8, 4));
                m2.slice_mut(s![5..7, 4..7, i % 2..3]).fill(1);
                VolumeScan::new(
                    Array3::zeros((8, 8, 4)),
                    [(ClassId(1), m1), (ClassId(2), m2)].into(),
                    format!("p{i}"),
                    Modality::Synth,
                )
                .unwrap()
            })
            .collect();
        (scans, catalog)
    }

    fn audit(classes: Vec<ClassId>) -> TrainingAudit {
        TrainingAudit {
            test_classes: classes,
            pool_slices: 10,
            pool_test_pixels: 0,
            episodes: 5,
            episodes_with_test_pixels: 0,
        }
    }

    struct Oracle;
    impl VolumeSegmenter for Oracle {
        fn segment(&mut self, _: Variant, _: &str, q: &VolumeScan, s: &VolumeScan, c: ClassId) -> Result<Array3<u8>> {
            assert_ne!(q.patient_id, s.patient_id);
            Ok(q.mask(c).unwrap().clone())
        }
    }

    struct Empty;
    impl VolumeSegmenter for Empty {
        fn segment(&mut self, _: Variant, _: &str, q: &VolumeScan, _: &VolumeScan, _: ClassId) -> Result<Array3<u8>> {
            Ok(Array3::zeros(q.shape()))
        }
    }

    fn spec() -> ExperimentSpec {
        ExperimentSpec {
            dataset: Dataset::Synth,
            organ_groups: vec![
                OrganGroup {
                    name: "a".into(),
                    classes: vec!["bright".into()],
                },
                OrganGroup {
                    name: "b".into(),
                    classes: vec!["dark".into()],
                },
            ],
            ..Default::default()
        }
    }

    fn checkpoints() -> Vec<FoldCheckpoint> {
        vec![
            FoldCheckpoint {
                fold: "a".into(),
                audit: audit(vec![ClassId(1)]),
            },
            FoldCheckpoint {
                fold: "b".into(),
                audit: audit(vec![ClassId(2)]),
            },
        ]
    }

    #[test]
    fn oracle_scores_one_hundred() {
        let (scans, catalog) = scans();
        let t = run_experiment(&spec(), &scans, &catalog, &checkpoints(), &mut Oracle).unwrap();
        assert_eq!(t.rows.len(), 2 * 2 * 3);
        assert!(t.rows.iter().all(|r| r.dice == 100.0));
        assert!(t.summary().iter().all(|r| r.mean_dice == 100.0));
    }

    #[test]
    fn audit_and_fold_mismatch_fail() {
        let (scans, catalog) = scans();
        let mut bad = checkpoints();
        bad[0].audit.episodes_with_test_pixels = 1;
        assert!(matches!(
            run_experiment(&spec(), &scans, &catalog, &bad, &mut Oracle),
            Err(Error::Audit(_))
        ));
        let mut swapped = checkpoints();
        swapped[0].audit.test_classes = vec![ClassId(2)];
        assert!(run_experiment(&spec(), &scans, &catalog, &swapped, &mut Oracle).is_err());
        assert!(run_experiment(&spec(), &scans, &catalog, &checkpoints()[..1], &mut Oracle).is_err());
    }

    #[test]
    fn overlapping_groups_rejected() {
        let (_, catalog) = scans();
        let mut s = spec();
        s.organ_groups[1].classes.push("1".into());
        assert!(s.resolve(&catalog).is_err());
    }

    #[test]
    fn pairings_are_seeded_and_cross_patient() {
        let ps: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let a = pairings(&ps, 3).unwrap();
        assert_eq!(a, pairings(&ps, 3).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|(q, s)| q != s));
        assert!(pairings(&ps[..1], 0).is_err());
    }

    #[test]
    fn report_is_reproducible_and_recomputable() {
        let (scans, catalog) = scans();
        let mut t = run_experiment(&spec(), &scans, &catalog, &checkpoints(), &mut Oracle).unwrap();
        t.rows.extend(run_experiment(&spec(), &scans, &catalog, &checkpoints(), &mut Empty).unwrap().rows.into_iter().map(|mut r| {
            r.variant = Variant::Ttt;
            r
        }));
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        report(&t, d1.path()).unwrap();
        report(&t, d2.path()).unwrap();
        for f in [RESULTS_CSV, SUMMARY_CSV, TABLE_TXT] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        let back = read_results(&d1.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(back, t);
        for row in t.summary().iter().filter(|r| r.class != "Mean") {
            let xs: Vec<f64> = back.rows.iter().filter(|r| r.variant == row.variant && r.class == row.class).map(|r| r.dice).collect();
            assert!((xs.iter().sum::<f64>() / xs.len() as f64 - row.mean_dice).abs() < 1e-6);
        }
        let header = std::fs::read_to_string(d1.path().join(RESULTS_CSV)).unwrap();
        assert!(header.starts_with("variant,fold,class,scan_id,dice\n"));
        assert!(report(&MetricsTable::default(), d1.path()).is_err());
    }
}
