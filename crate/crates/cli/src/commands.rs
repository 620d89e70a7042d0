//! Subcommand implementations. Every command resolves the config, prints its
//! digest and claims the output directory before doing any work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array3;
use protoseg_core::data::{
    load_volume, prepare_dataset, setting2_pool, write_nifti_volume, write_synth_dataset, ClassCatalog, Manifest, PreparedDataset,
};
use protoseg_core::encoder::InputMode;
use protoseg_core::evaluation::{
    pairings, report, run_experiment, Dataset, FoldCheckpoint, MetricsTable, Variant, VolumeSegmenter,
};
use protoseg_core::inference::{segment_volume, test_time_train, InferenceConfig, PredictionStore};
use protoseg_core::training::{latest_checkpoint, run_training, TrainingAudit, TrainingData};
use protoseg_core::{ClassId, ModelState, RunConfig, VolumeScan};

use crate::workspace::Workspace;

pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub fold: Option<String>,
    pub variant: Option<Variant>,
    pub out: PathBuf,
    pub force: bool,
    pub episodes: Option<u64>,
}

struct Run {
    cfg: RunConfig,
    ws: Workspace,
}

fn setup(opts: &Options) -> Result<Run> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::synthetic(),
    };
    if let Some(seed) = opts.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = opts.episodes {
        cfg.train.episodes = n;
    }
    cfg.validate()?;
    println!("config digest {}", cfg.digest()?);
    let ws = Workspace::claim(&opts.out, &cfg, opts.force)?;
    Ok(Run { cfg, ws })
}

impl Run {
    /// The configured manifest, or the synthetic dataset under the output
    /// directory (generated on first use).
    fn manifest(&self) -> Result<Manifest> {
        if let Some(p) = &self.cfg.data.manifest {
            return Ok(Manifest::load(p)?);
        }
        if self.cfg.evaluation.dataset != Dataset::Synth {
            bail!("no data.manifest configured for dataset {:?}", self.cfg.evaluation.dataset);
        }
        let path = self.ws.synth_data().join("manifest.toml");
        if path.exists() {
            return Ok(Manifest::load(&path)?);
        }
        println!("generating synthetic dataset in {}", self.ws.synth_data().display());
        Ok(write_synth_dataset(&self.ws.synth_data(), &self.cfg.data.synth)?)
    }

    fn prepare(&self, manifest: &Manifest) -> Result<PreparedDataset> {
        let root = self.cfg.cache_root();
        let prepared = prepare_dataset(manifest, &self.cfg.preprocess_params(), &root)?;
        println!(
            "{} scans: {} cache hits, {} misses (cache {})",
            prepared.scans.len(),
            prepared.cache_hits,
            prepared.cache_misses,
            root.display()
        );
        Ok(prepared)
    }

    fn scans(&self, manifest: &Manifest) -> Result<Vec<VolumeScan>> {
        let catalog = manifest.catalog();
        manifest
            .scans
            .iter()
            .map(|e| {
                load_volume(e, &manifest.base_dir, &catalog, manifest.modality, &self.cfg.data.normalization)
                    .map_err(Into::into)
            })
            .collect()
    }

    fn folds(&self, catalog: &ClassCatalog, only: Option<&str>) -> Result<Vec<(String, Vec<ClassId>)>> {
        let all = self.cfg.evaluation.resolve(catalog)?;
        match only {
            None => Ok(all),
            Some(name) => {
                let known: Vec<String> = all.iter().map(|f| f.0.clone()).collect();
                all.into_iter()
                    .find(|f| f.0 == name)
                    .map(|f| vec![f])
                    .ok_or_else(|| anyhow!("unknown fold {name}; configured folds: {}", known.join(", ")))
            }
        }
    }

    fn inference(&self, variant: Variant) -> InferenceConfig {
        InferenceConfig {
            cca: variant.uses_cca(),
            ..self.cfg.inference.clone()
        }
    }

    fn trained_model(&self, variant: Variant, fold: &str) -> Result<ModelState> {
        if variant == Variant::Ttt {
            let dir = self.ws.ttt_dir(fold);
            if !dir.join("state.json").exists() {
                bail!("no adapted model for fold {fold} in {}; run ttt first", dir.display());
            }
            return Ok(ModelState::load_checkpoint(&dir)?);
        }
        let dir = self.ws.train_dir(model_name(variant), fold);
        let ck = latest_checkpoint(&dir)
            .ok_or_else(|| anyhow!("no checkpoint for fold {fold} in {}; run train first", dir.display()))?;
        Ok(ModelState::load_checkpoint(&ck)?)
    }

    fn audit(&self, variant: Variant, fold: &str) -> Result<FoldCheckpoint> {
        let path = self.ws.train_dir(model_name(variant), fold).join("audit.json");
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}; run train first", path.display()))?;
        let audit: TrainingAudit = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(FoldCheckpoint {
            fold: fold.to_string(),
            audit,
        })
    }

    /// Segments every configured query of `fold` with `state` into a fresh
    /// store at `dir`, plus one NIfTI label volume per class and scan under
    /// `dir/labels`.
    fn segment_fold(
        &self,
        variant: Variant,
        classes: &[ClassId],
        scans: &[VolumeScan],
        state: &ModelState,
        dir: &Path,
    ) -> Result<usize> {
        reset_dir(dir)?;
        let store = PredictionStore::new(dir);
        let labels_dir = dir.join("labels");
        let by_id: BTreeMap<&str, &VolumeScan> = scans.iter().map(|s| (s.patient_id.as_str(), s)).collect();
        let patients: Vec<String> = scans.iter().map(|s| s.patient_id.clone()).collect();
        let cfg = self.inference(variant);
        let mut n = 0;
        for &class in classes {
            for &seed in &self.cfg.evaluation.seeds {
                for (q, s) in pairings(&patients, seed)? {
                    let seg = segment_volume(by_id[q.as_str()], by_id[s.as_str()], class, state, &self.cfg.head, &cfg)?;
                    store.put(&seg)?;
                    let label = labels_dir.join(format!("class_{}", class.0)).join(format!("{q}.nii.gz"));
                    write_nifti_volume(&label, &seg.prediction)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }
}

fn model_name(variant: Variant) -> &'static str {
    match variant {
        Variant::SliceAdapter => "slice_adapter",
        _ => "base",
    }
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let manifest = write_synth_dataset(&run.ws.synth_data(), &run.cfg.data.synth)?;
    println!(
        "wrote {} synthetic scans to {}",
        manifest.scans.len(),
        run.ws.synth_data().display()
    );
    Ok(())
}

pub fn preprocess(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let manifest = run.manifest()?;
    let prepared = run.prepare(&manifest)?;
    println!("slice key {}, superpixel key {}", prepared.slice_key, prepared.superpixel_key);
    Ok(())
}

pub fn train(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let models: Vec<&str> = match opts.variant {
        Some(Variant::Ttt) => bail!("the ttt variant adapts a trained model; use the ttt command"),
        Some(v) => vec![model_name(v)],
        None => {
            let mut m: Vec<&str> = run.cfg.evaluation.variants.iter().map(|&v| model_name(v)).collect();
            m.sort();
            m.dedup();
            m
        }
    };
    let manifest = run.manifest()?;
    let prepared = run.prepare(&manifest)?;
    let mut pool = Vec::new();
    let mut superpixels = Vec::new();
    for scan in &prepared.scans {
        pool.extend(scan.slices.iter().cloned());
        superpixels.extend(scan.superpixels.iter().cloned());
    }
    for (fold, classes) in run.folds(&manifest.catalog(), opts.fold.as_deref())? {
        let (fold_pool, fold_sp) = setting2_pool(&pool, &superpixels, &classes)?;
        for &model in &models {
            let dir = run.ws.train_dir(model, &fold);
            let mut encoder = run.cfg.encoder.clone();
            if model == "slice_adapter" {
                encoder.input_mode = InputMode::SliceAdapter;
            }
            if opts.force {
                reset_dir(&dir)?;
            }
            let mut state = match latest_checkpoint(&dir) {
                Some(ck) => {
                    let s = ModelState::load_checkpoint(&ck)?;
                    println!("resuming {model}/{fold} from step {}", s.step);
                    s
                }
                None => ModelState::init(&encoder)?,
            };
            let data = TrainingData {
                pool: &fold_pool,
                superpixels: &fold_sp,
                test_classes: &classes,
            };
            let result = run_training(
                &mut state,
                &data,
                &run.cfg.data.augmentation,
                &run.cfg.train,
                &run.cfg.head,
                Some(&dir),
            )?;
            match result.reports.last() {
                Some(r) => println!(
                    "trained {model}/{fold}: {} episodes on {} slices, last loss {:.4}",
                    result.reports.len(),
                    fold_pool.len(),
                    r.total
                ),
                None => println!("{model}/{fold} already trained to {} episodes", state.step),
            }
        }
    }
    Ok(())
}

fn infer_variants(run: &Run, opts: &Options) -> Vec<Variant> {
    match opts.variant {
        Some(v) => vec![v],
        None => run
            .cfg
            .evaluation
            .variants
            .iter()
            .copied()
            .filter(|&v| v != Variant::Ttt)
            .collect(),
    }
}

pub fn infer(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let manifest = run.manifest()?;
    let scans = run.scans(&manifest)?;
    for (fold, classes) in run.folds(&manifest.catalog(), opts.fold.as_deref())? {
        for variant in infer_variants(&run, opts) {
            let state = run.trained_model(variant, &fold)?;
            let dir = run.ws.predictions(variant, &fold);
            let n = run.segment_fold(variant, &classes, &scans, &state, &dir)?;
            println!("{variant}/{fold}: {n} volumes segmented into {}", dir.display());
        }
    }
    Ok(())
}

pub fn ttt(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let manifest = run.manifest()?;
    let scans = run.scans(&manifest)?;
    let refs: Vec<&VolumeScan> = scans.iter().collect();
    for (fold, classes) in run.folds(&manifest.catalog(), opts.fold.as_deref())? {
        let source = [Variant::Cca, Variant::Base]
            .into_iter()
            .map(|v| run.ws.predictions(v, &fold))
            .find(|d| PredictionStore::new(d).is_empty().map(|e| !e).unwrap_or(false))
            .ok_or_else(|| anyhow!("no stored predictions for fold {fold}; run infer first"))?;
        let mut state = run.trained_model(Variant::Base, &fold)?;
        let report = test_time_train(
            &mut state,
            &refs,
            &PredictionStore::new(&source),
            &run.cfg.ttt,
            &run.cfg.train,
            &run.cfg.head,
        )?;
        let dir = run.ws.ttt_dir(&fold);
        reset_dir(&dir)?;
        state.save_checkpoint(&dir)?;
        let last = report.losses.last().map_or(f64::NAN, |l| l.total);
        println!(
            "adapted {fold} on labels from {}: {} steps, {} background slices skipped, last loss {last:.4}",
            source.display(),
            report.steps,
            report.skipped_background
        );
        if run.cfg.ttt.refresh_labels {
            let out = run.ws.predictions(Variant::Ttt, &fold);
            let n = run.segment_fold(Variant::Ttt, &classes, &scans, &state, &out)?;
            println!("ttt/{fold}: {n} volumes segmented into {}", out.display());
        }
    }
    Ok(())
}

/// Serves stored predictions as segmentations.
struct StoredSegmenter {
    stores: BTreeMap<(Variant, String), PredictionStore>,
}

impl VolumeSegmenter for StoredSegmenter {
    fn segment(
        &mut self,
        variant: Variant,
        fold: &str,
        query: &VolumeScan,
        _support: &VolumeScan,
        class: ClassId,
    ) -> protoseg_core::Result<Array3<u8>> {
        let store = &self.stores[&(variant, fold.to_string())];
        store.get(class, &query.patient_id, true)?.ok_or_else(|| protoseg_core::Error::MissingArtifact {
            what: format!("{variant} prediction of class {class} for {}", query.patient_id),
            producer: "protoseg infer".into(),
        })
    }
}

pub fn eval(opts: &Options) -> Result<()> {
    let run = setup(opts)?;
    let manifest = run.manifest()?;
    let catalog = manifest.catalog();
    let folds = run.folds(&catalog, opts.fold.as_deref())?;
    let variants = match opts.variant {
        Some(v) => vec![v],
        None => run.cfg.evaluation.variants.clone(),
    };
    let mut stores = BTreeMap::new();
    for &variant in &variants {
        for (fold, _) in &folds {
            let dir = run.ws.predictions(variant, fold);
            let store = PredictionStore::new(&dir);
            if !dir.exists() || store.is_empty()? {
                let producer = if variant == Variant::Ttt { "ttt" } else { "infer" };
                bail!("no stored {variant} predictions for fold {fold} in {}; run {producer} first", dir.display());
            }
            stores.insert((variant, fold.clone()), store);
        }
    }
    let scans = run.scans(&manifest)?;
    let mut segmenter = StoredSegmenter { stores };
    let mut table = MetricsTable::default();
    for &variant in &variants {
        let checkpoints = folds
            .iter()
            .map(|(fold, _)| run.audit(variant, fold))
            .collect::<Result<Vec<_>>>()?;
        let mut spec = run.cfg.evaluation.clone();
        spec.variants = vec![variant];
        if let Some(f) = &opts.fold {
            spec.organ_groups.retain(|g| &g.name == f);
        }
        let part = run_experiment(&spec, &scans, &catalog, &checkpoints, &mut segmenter)?;
        table.rows.extend(part.rows);
    }
    let dir = run.ws.eval_dir();
    report(&table, &dir)?;
    print!("{}", table.render_text());
    println!("results written to {}", dir.display());
    Ok(())
}
