//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order and
//! uncaptured. Exits non-zero if any criterion fails.

use std::collections::{BTreeMap, VecDeque};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoseg_core::data::synth::synth_classes;
use protoseg_core::data::{
    generate_superpixels, reformat_and_resize, setting2_pool, synth_scan, ClassCatalog, Episode, Shot,
};
use protoseg_core::encoder::{
    encode, encode_batch, wrap_with_low_rank_adapters, Backbone, FeatureUpsample, InputMode, LowRankAdapterSpec,
    SliceTriplet, VitConfig,
};
use protoseg_core::evaluation::{
    dice_score, pairings, run_experiment, ExperimentSpec, FoldCheckpoint, ModelSegmenter, Variant,
};
use protoseg_core::inference::{
    balanced_partition, component_confidence, connected_components, select_most_confident,
    support_reference_indices, test_time_train, Connectivity, PredictionStore, TttConfig,
};
use protoseg_core::prototype::{compute_class_prototype, pool_local_prototypes, HeadConfig, PrototypeKind};
use protoseg_core::similarity::{cosine_maps, fuse_tensor, probability_tensor, SegmentationResult};
use protoseg_core::training::{episode_losses, run_training, train_episode, TrainConfig, TrainingData};
use protoseg_core::{ClassId, EncoderConfig, FeatureMap, ModelState, PoolingWindow, RunConfig, VolumeScan};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. Prototype pooling against pixel loops.

fn prototype_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let d = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let window = PoolingWindow {
            lh: rng.random_range(1..=h),
            lw: rng.random_range(1..=w),
        };
        let threshold = [0.0, 0.25, 0.5, 0.95, 1.0, rng.random::<f64>()][case % 6];
        let density = rng.random::<f64>();
        let feats = Array3::from_shape_fn((d, h, w), |_| rng.random_range(-1.0f32..1.0));
        let mask = Array2::from_shape_fn((h, w), |_| (rng.random::<f64>() < density) as u8 as f32);
        let fmap = FeatureMap::from_array(&feats, (h, w)).map_err(fail)?;

        let mut expected = Vec::new();
        for m in 0..h.div_ceil(window.lh) {
            for n in 0..w.div_ceil(window.lw) {
                let ys = m * window.lh..((m + 1) * window.lh).min(h);
                let xs = n * window.lw..((n + 1) * window.lw).min(w);
                let area = (ys.len() * xs.len()) as f64;
                let mut cover = 0.0;
                let mut mean = vec![0.0; d];
                for y in ys.clone() {
                    for x in xs.clone() {
                        cover += mask[[y, x]] as f64;
                        for (k, v) in mean.iter_mut().enumerate() {
                            *v += feats[[k, y, x]] as f64;
                        }
                    }
                }
                if cover / area + 1e-9 >= threshold {
                    expected.push(((m, n), mean.iter().map(|v| v / area).collect::<Vec<_>>()));
                }
            }
        }
        let got = pool_local_prototypes(&fmap, mask.view(), window, threshold, ClassId(1), 0).map_err(fail)?;
        if got.len() != expected.len() {
            return Err(format!("case {case}: {} local prototypes, oracle {}", got.len(), expected.len()));
        }
        for (p, (pos, v)) in got.iter().zip(&expected) {
            if p.kind != PrototypeKind::Local(pos.0, pos.1) {
                return Err(format!("case {case}: prototype at {:?}, oracle {pos:?}", p.kind));
            }
            for (a, b) in p.vector.iter().zip(v) {
                worst = worst.max((a - b).abs());
            }
        }

        let total: f64 = mask.iter().map(|&v| v as f64).sum();
        let global = compute_class_prototype(&fmap, mask.view(), ClassId(1), 0);
        if total == 0.0 {
            if global.is_ok() {
                return Err(format!("case {case}: empty mask produced a global prototype"));
            }
            continue;
        }
        let global = global.map_err(fail)?;
        for k in 0..d {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += mask[[y, x]] as f64 * feats[[k, y, x]] as f64;
                }
            }
            worst = worst.max((global.vector[k] - s / total).abs());
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    check(worst <= 1e-6, format!("200 cases, max abs error {worst:.2e}"))
}

// 2. Similarity bounds and fusion.

fn tensor(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, String> {
    Tensor::from_vec(data, shape, &Device::Cpu).map_err(fail)
}

fn similarity_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_abs = 0.0f64;
    for case in 0..50 {
        let (k, d, h, w) = (rng.random_range(1..6), rng.random_range(1..9), 4, 5);
        let mut protos: Vec<f64> = (0..k * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut feats: Vec<f64> = (0..d * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        if case % 5 == 0 {
            protos[..d].iter_mut().for_each(|v| *v = 0.0);
            feats.iter_mut().step_by(7).for_each(|v| *v = 0.0);
        }
        let s = cosine_maps(&tensor(protos, &[k, d])?, &tensor(feats, &[d, h, w])?).map_err(fail)?;
        for v in s.flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(fail)? {
            if !v.is_finite() {
                return Err(format!("case {case}: non-finite similarity"));
            }
            max_abs = max_abs.max(v.abs());
        }
    }
    if max_abs > 20.0 {
        return Err(format!("|S| reached {max_abs}"));
    }

    let single: Vec<f64> = (0..12).map(|_| rng.random_range(-20.0..20.0)).collect();
    let fused = fuse_tensor(&tensor(single.clone(), &[1, 3, 4])?)
        .and_then(|t| Ok(t.flatten_all()?.to_vec1::<f64>()?))
        .map_err(fail)?;
    if fused != single {
        return Err("single-prototype fusion is not the identity".into());
    }

    let pairs: Vec<f64> = (0..200).map(|_| rng.random_range(-20.0..20.0)).collect();
    let fused = fuse_tensor(&tensor(pairs.clone(), &[2, 10, 10])?)
        .and_then(|t| Ok(t.flatten_all()?.to_vec1::<f64>()?))
        .map_err(fail)?;
    let mut worst = 0.0f64;
    for (i, f) in fused.iter().enumerate() {
        let (a, b) = (pairs[i], pairs[100 + i]);
        let closed = (a * a.exp() + b * b.exp()) / (a.exp() + b.exp());
        worst = worst.max((f - closed).abs());
    }
    check(
        worst <= 1e-6,
        format!("max |S| {max_abs:.3}, single fusion exact, two-prototype error {worst:.2e} on 100 pixels"),
    )
}

// 3. Per-pixel probabilities.

fn probability_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..40 {
        let (c, h, w) = (rng.random_range(2..5), rng.random_range(2..9), rng.random_range(2..9));
        let sims: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-20.0..20.0)).collect();
        let t = tensor(sims.clone(), &[c, h, w])?;
        for res in [(h, w), (2 * h + 1, 3 * w)] {
            let p = probability_tensor(&t, res).map_err(fail)?;
            let sums = p.sum(0).and_then(|s| s.flatten_all()?.to_vec1::<f64>()).map_err(fail)?;
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
        let p = probability_tensor(&t, (h, w)).map_err(fail)?.to_dtype(DType::F32).map_err(fail)?;
        let classes: Vec<ClassId> = (0..c as u16).map(ClassId).collect();
        let seg = SegmentationResult::from_tensor(&p, classes).map_err(fail)?;
        for y in 0..h {
            for x in 0..w {
                let best = (0..c)
                    .max_by(|&a, &b| sims[a * h * w + y * w + x].total_cmp(&sims[b * h * w + y * w + x]))
                    .unwrap();
                if seg.prediction[[y, x]] != best as u16 {
                    return Err(format!("case {case}: argmax differs at ({y}, {x})"));
                }
            }
        }
    }
    check(worst <= 1e-5, format!("max |sum - 1| {worst:.2e}, argmax agrees on 40 maps"))
}

// 4. Loss gradients against central differences.

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let head = HeadConfig {
        window: PoolingWindow { lh: 2, lw: 2 },
        coverage_threshold: 0.95,
    };
    let support_mask = ndarray::array![[1u8, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 1]];
    let query_mask = ndarray::array![[0u8, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let make = |mask: &Array2<u8>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v = Vec::with_capacity(48);
        for k in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let fg = mask[[y, x]] as f64;
                    let base = if k == 0 { fg } else if k == 1 { 1.0 - fg } else { 0.5 };
                    v.push(base + rng.random_range(-0.4..0.4));
                }
            }
        }
        v
    };
    let sv = make(&support_mask, &mut rng);
    let qv = make(&query_mask, &mut rng);
    let loss = |s: &[f64], q: &[f64]| -> Result<f64, String> {
        let st = tensor(s.to_vec(), &[3, 4, 4])?;
        let qt = tensor(q.to_vec(), &[3, 4, 4])?;
        let out = episode_losses(&[(&st, &support_mask)], &qt, &query_mask, &head, 1.0, true).map_err(fail)?;
        out.total.to_scalar::<f64>().map_err(fail)
    };

    let s_var = Var::from_tensor(&tensor(sv.clone(), &[3, 4, 4])?).map_err(fail)?;
    let q_var = Var::from_tensor(&tensor(qv.clone(), &[3, 4, 4])?).map_err(fail)?;
    let out = episode_losses(
        &[(s_var.as_tensor(), &support_mask)],
        q_var.as_tensor(),
        &query_mask,
        &head,
        1.0,
        true,
    )
    .map_err(fail)?;
    if out.reg.is_none() {
        return Err("alignment term was skipped on the toy episode".into());
    }
    let grads = out.total.backward().map_err(fail)?;
    let analytic = |v: &Var| -> Result<Vec<f64>, String> {
        grads
            .get(v.as_tensor())
            .ok_or("missing gradient")?
            .flatten_all()
            .and_then(|t| t.to_vec1::<f64>())
            .map_err(fail)
    };
    let (gs, gq) = (analytic(&s_var)?, analytic(&q_var)?);

    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (which, g) in [(0, &gs), (1, &gq)] {
        for i in 0..48 {
            let (mut sp, mut sm, mut qp, mut qm) = (sv.clone(), sv.clone(), qv.clone(), qv.clone());
            if which == 0 {
                sp[i] += eps;
                sm[i] -= eps;
            } else {
                qp[i] += eps;
                qm[i] -= eps;
            }
            let fd = (loss(&sp, &qp)? - loss(&sm, &qm)?) / (2.0 * eps);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    check(worst <= 1e-4, format!("96 coordinates, max relative error {worst:.2e}"))
}

// Shared synthetic setup.

const HELD_OUT: ClassId = ClassId(3);

struct Synth {
    cfg: RunConfig,
    scans: Vec<VolumeScan>,
    catalog: ClassCatalog,
}

fn synth() -> Result<Synth, String> {
    let cfg = RunConfig::synthetic();
    let scans = (0..cfg.data.synth.patients)
        .map(|i| synth_scan(&cfg.data.synth, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    Ok(Synth {
        cfg,
        scans,
        catalog: ClassCatalog {
            classes: synth_classes(),
        },
    })
}

fn middle_slice(scan: &VolumeScan, class: ClassId, size: (usize, usize)) -> Result<Shot, String> {
    let range = scan.class_slice_range(class).ok_or("class absent")?;
    let z = range.start + range.len() / 2;
    let sample = reformat_and_resize(scan, size).map_err(fail)?.remove(z);
    let mask = sample.label(class).ok_or("label missing")?.to_owned();
    Ok(Shot {
        image: sample.triplet(),
        mask,
    })
}

// 5. Overfitting one episode.

fn overfit(s: &Synth) -> Outcome {
    let start = Instant::now();
    let size = s.cfg.encoder.train_resolution;
    let support = middle_slice(&s.scans[0], ClassId(1), size)?;
    let query = middle_slice(&s.scans[1], ClassId(1), size)?;
    let label = query.mask.clone();
    let episode = Episode::one_shot(support, query.image, Some(label.clone()), ClassId(1));
    let mut state = ModelState::init(&s.cfg.encoder).map_err(fail)?;
    let mut last = None;
    for step in 0..200 {
        last = Some(train_episode(&mut state, &episode, &s.cfg.train, &s.cfg.head, step).map_err(fail)?);
    }
    let feats = encode_batch(&state, &[&episode.support[0].image, &episode.query_image]).map_err(fail)?;
    let out = episode_losses(
        &[(&feats[0].values, &episode.support[0].mask)],
        &feats[1].values,
        &label,
        &s.cfg.head,
        0.0,
        false,
    )
    .map_err(fail)?;
    let seg = out.seg.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).map_err(fail)?;
    let probs = out.query_probs.to_dtype(DType::F32).map_err(fail)?;
    let pred = SegmentationResult::from_tensor(&probs, vec![ClassId(0), ClassId(1)])
        .map_err(fail)?
        .binary(ClassId(1));
    let dice = dice_score(pred.view(), label.view()).map_err(fail)?;
    within(start.elapsed(), Duration::from_secs(300))?;
    let last = last.expect("200 steps");
    check(
        seg < 0.05 && dice > 0.9,
        format!(
            "seg_loss {seg:.4} (last step {:.4}), query Dice {dice:.3}, {:.1?}",
            last.seg_loss,
            start.elapsed()
        ),
    )
}

// 6. Training and 1-shot evaluation on the held-out class.

struct Trained {
    state: ModelState,
    checkpoint: FoldCheckpoint,
    spec: ExperimentSpec,
    fold: String,
}

fn train_synthetic(s: &Synth) -> Result<(Trained, Duration), String> {
    let start = Instant::now();
    let cfg = &s.cfg;
    let mut pool = Vec::new();
    let mut superpixels = Vec::new();
    for scan in &s.scans {
        for slice in reformat_and_resize(scan, cfg.encoder.train_resolution).map_err(fail)? {
            superpixels.push(generate_superpixels(slice.image.view(), &cfg.data.felzenszwalb).map_err(fail)?);
            pool.push(slice);
        }
    }
    let test = [HELD_OUT];
    let (pool, superpixels) = setting2_pool(&pool, &superpixels, &test).map_err(fail)?;
    let mut state = ModelState::init(&cfg.encoder).map_err(fail)?;
    let data = TrainingData {
        pool: &pool,
        superpixels: &superpixels,
        test_classes: &test,
    };
    let run = run_training(&mut state, &data, &cfg.data.augmentation, &cfg.train, &cfg.head, None).map_err(fail)?;
    let fold = cfg.evaluation.organ_groups[0].name.clone();
    Ok((
        Trained {
            state,
            checkpoint: FoldCheckpoint {
                fold: fold.clone(),
                audit: run.audit,
            },
            spec: cfg.evaluation.clone(),
            fold,
        },
        start.elapsed(),
    ))
}

fn end_to_end(s: &Synth) -> (Outcome, Option<Trained>) {
    let start = Instant::now();
    if !s.cfg.data.synth.distractor {
        return (Err("synthetic scenes lack the distractor blob".into()), None);
    }
    let (trained, train_time) = match train_synthetic(s) {
        Ok(t) => t,
        Err(e) => return (Err(e), None),
    };
    let mut seg = ModelSegmenter {
        models: BTreeMap::from([((Variant::Base, trained.fold.clone()), trained.state.clone())]),
        head: s.cfg.head,
        inference: s.cfg.inference.clone(),
    };
    let spec = ExperimentSpec {
        variants: vec![Variant::Base, Variant::Cca],
        ..trained.spec.clone()
    };
    let table = match run_experiment(&spec, &s.scans, &s.catalog, &[trained.checkpoint.clone()], &mut seg) {
        Ok(t) => t,
        Err(e) => return (Err(fail(e)), Some(trained)),
    };
    let base = table.variant_mean(Variant::Base).unwrap_or(f64::NAN) / 100.0;
    let cca = table.variant_mean(Variant::Cca).unwrap_or(f64::NAN) / 100.0;
    let elapsed = start.elapsed();
    let outcome = within(elapsed, Duration::from_secs(1800)).and_then(|_| {
        check(
            base >= 0.60 && cca >= 0.60 && cca >= base,
            format!(
                "{} episodes in {train_time:.1?}, mean Dice base {base:.3}, cca {cca:.3}, total {elapsed:.1?}",
                s.cfg.train.episodes
            ),
        )
    });
    (outcome, Some(trained))
}

// 7. Component filtering against flood fill.

fn flood_fill_oracle(mask: &Array2<u8>, probs: &Array2<f32>, eight: bool) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut best: Option<(f64, usize, Vec<(usize, usize)>)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || seen[[r, c]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[[r, c]] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comp.sort();
            let conf = comp.iter().map(|&(y, x)| probs[[y, x]] as f64).sum::<f64>() / comp.len() as f64;
            let better = match &best {
                None => true,
                Some((bc, bs, _)) => conf > *bc || (conf == *bc && comp.len() > *bs),
            };
            if better {
                best = Some((conf, comp.len(), comp));
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    if let Some((_, _, comp)) = best {
        for (y, x) in comp {
            out[[y, x]] = 1;
        }
    }
    out
}

fn cca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let density = rng.random_range(0.05..0.7);
        let mask = Array2::from_shape_fn((h, w), |_| (rng.random::<f64>() < density) as u8);
        let probs = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
        let eight = case % 2 == 0;
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let got = select_most_confident(mask.view(), probs.view(), conn).map_err(fail)?;
        if got != flood_fill_oracle(&mask, &probs, eight) {
            return Err(format!("case {case}: selection differs from flood-fill oracle"));
        }
    }
    let mask = ndarray::array![[1u8, 1, 0, 0, 0], [0, 0, 0, 1, 0]];
    let probs = ndarray::array![[0.9f32, 0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.75, 0.1]];
    let comps = connected_components(mask.view(), Connectivity::Four);
    let conf = component_confidence(&comps[0], probs.view()).map_err(fail)?;
    let kept = select_most_confident(mask.view(), probs.view(), Connectivity::Four).map_err(fail)?;
    check(
        (conf - 0.8).abs() < 1e-6 && kept[[0, 0]] == 1 && kept[[1, 3]] == 0,
        format!("500 random masks match, hand case confidence {conf:.6}"),
    )
}

// 8. Section arithmetic.

fn protocol_arithmetic() -> Outcome {
    for len in 3..=30 {
        for start in [0usize, 5] {
            let range = start..start + len;
            let parts = balanced_partition(range.clone(), 3);
            if parts.len() != 3 {
                return Err(format!("len {len}: {} sections", parts.len()));
            }
            let mut next = range.start;
            for p in &parts {
                if p.start != next || p.is_empty() {
                    return Err(format!("len {len}: sections {parts:?} not contiguous"));
                }
                next = p.end;
            }
            if next != range.end {
                return Err(format!("len {len}: sections {parts:?} do not cover {range:?}"));
            }
            let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
            if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
                return Err(format!("len {len}: unbalanced sizes {sizes:?}"));
            }
            let refs: Vec<usize> = parts.iter().map(|p| p.start + p.len() / 2).collect();
            if support_reference_indices(range, 3) != refs {
                return Err(format!("len {len}: reference indices differ from partition middles"));
            }
        }
    }
    check(true, "lengths 3..=30 disjoint, covering, balanced; references match".into())
}

// 9. Test-time training.

fn ttt_contract(s: &Synth, trained: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let store = PredictionStore::new(dir.path());
    let base = ModelSegmenter {
        models: BTreeMap::from([((Variant::Base, trained.fold.clone()), trained.state.clone())]),
        head: s.cfg.head,
        inference: s.cfg.inference.clone(),
    };
    let by_id: BTreeMap<&str, &VolumeScan> = s.scans.iter().map(|v| (v.patient_id.as_str(), v)).collect();
    let patients: Vec<String> = s.scans.iter().map(|v| v.patient_id.clone()).collect();
    for (q, sup) in pairings(&patients, s.cfg.seed).map_err(fail)? {
        let seg = base
            .segment_full(Variant::Cca, &trained.fold, by_id[q.as_str()], by_id[sup.as_str()], HELD_OUT)
            .map_err(fail)?;
        store.put(&seg).map_err(fail)?;
    }
    let scans: Vec<&VolumeScan> = s.scans.iter().collect();
    let before = trained.state.weights_digest().map_err(fail)?;

    let mut idle = trained.state.clone();
    let zero = TttConfig {
        iterations: 0,
        ..s.cfg.ttt.clone()
    };
    test_time_train(&mut idle, &scans, &store, &zero, &s.cfg.train, &s.cfg.head).map_err(fail)?;
    if idle.weights_digest().map_err(fail)? != before {
        return Err("zero iterations changed the weights".into());
    }

    let ttt = TttConfig {
        iterations: 100,
        ..s.cfg.ttt.clone()
    };
    let mut adapted = Vec::new();
    for _ in 0..2 {
        let mut st = trained.state.clone();
        test_time_train(&mut st, &scans, &store, &ttt, &s.cfg.train, &s.cfg.head).map_err(fail)?;
        adapted.push(st);
    }
    let (a, b) = (adapted[0].weights_digest().map_err(fail)?, adapted[1].weights_digest().map_err(fail)?);
    if a != b {
        return Err("repeated adaptation under one seed differs".into());
    }
    if a == before {
        return Err("adaptation left the weights unchanged".into());
    }

    let mut seg = ModelSegmenter {
        models: BTreeMap::from([
            ((Variant::Base, trained.fold.clone()), trained.state.clone()),
            ((Variant::Ttt, trained.fold.clone()), adapted.remove(0)),
        ]),
        head: s.cfg.head,
        inference: s.cfg.inference.clone(),
    };
    let spec = ExperimentSpec {
        variants: vec![Variant::Cca, Variant::Ttt],
        ..trained.spec.clone()
    };
    let table =
        run_experiment(&spec, &s.scans, &s.catalog, &[trained.checkpoint.clone()], &mut seg).map_err(fail)?;
    let cca = table.variant_mean(Variant::Cca).unwrap_or(f64::NAN);
    let ttt_dice = table.variant_mean(Variant::Ttt).unwrap_or(f64::NAN);
    check(
        ttt_dice >= cca - 2.0,
        format!("no-op at 0 iterations, deterministic, Dice {cca:.2} -> {ttt_dice:.2} after 100 iterations"),
    )
}

// 10. Low-rank adapters.

fn lora_contract() -> Outcome {
    let cfg = EncoderConfig {
        backbone: Backbone::FoundationVit(VitConfig::tiny()),
        input_mode: InputMode::Replicate1Slice,
        train_resolution: (28, 28),
        test_resolution: (28, 28),
        lora: None,
        feature_upsample: FeatureUpsample::Divisor(4),
        weights: None,
        init_seed: 10,
    };
    let plain = ModelState::init(&cfg).map_err(fail)?;
    let mut wrapped = wrap_with_low_rank_adapters(plain.clone(), &LowRankAdapterSpec::default()).map_err(fail)?;
    let img = Array2::from_shape_fn((28, 28), |(r, c)| {
        let d = (r as f32 - 12.0).powi(2) + (c as f32 - 15.0).powi(2);
        if d < 40.0 { 0.8 } else { 0.2 + ((r * 3 + c) % 5) as f32 * 0.02 }
    });
    let mask = img.mapv(|v| (v > 0.5) as u8);
    let triplet = SliceTriplet::replicate(img);
    let a = encode(&triplet, &plain).and_then(|f| f.to_array()).map_err(fail)?;
    let b = encode(&triplet, &wrapped).and_then(|f| f.to_array()).map_err(fail)?;
    if a != b {
        return Err("zero-initialized adapters changed the features".into());
    }
    let base_before = wrapped.base_digest().map_err(fail)?;
    let all_before = wrapped.weights_digest().map_err(fail)?;
    let episode = Episode::one_shot(
        Shot {
            image: triplet.clone(),
            mask: mask.clone(),
        },
        triplet,
        Some(mask),
        ClassId(1),
    );
    let mut train = TrainConfig::default();
    train.optimizer.lr = 1e-2;
    let head = HeadConfig {
        window: PoolingWindow { lh: 2, lw: 2 },
        coverage_threshold: 0.5,
    };
    for step in 0..3 {
        train_episode(&mut wrapped, &episode, &train, &head, step).map_err(fail)?;
    }
    let base_after = wrapped.base_digest().map_err(fail)?;
    let all_after = wrapped.weights_digest().map_err(fail)?;
    check(
        base_after == base_before && all_after != all_before && base_before == plain.base_digest().map_err(fail)?,
        "outputs bit-identical at init; base digest unchanged and adapters updated after 3 steps".into(),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "prototype oracle", prototype_oracle()));
    results.push((2, "similarity bounds and fusion", similarity_bounds()));
    results.push((3, "probability normalization", probability_normalization()));
    results.push((4, "gradient check", gradient_check()));
    let synth = synth();
    match &synth {
        Ok(s) => {
            results.push((5, "overfit sanity", overfit(s)));
            let (e2e, trained) = end_to_end(s);
            results.push((6, "end-to-end synthetic 1-shot", e2e));
            results.push((7, "component filtering oracle", cca_oracle()));
            results.push((8, "protocol arithmetic", protocol_arithmetic()));
            let ttt = match &trained {
                Some(t) => ttt_contract(s, t),
                None => Err("no trained model".into()),
            };
            results.push((9, "test-time training contract", ttt));
        }
        Err(e) => {
            for (n, name) in [(5, "overfit sanity"), (6, "end-to-end synthetic 1-shot"), (9, "test-time training contract")] {
                results.push((n, name, Err(format!("synthetic data: {e}"))));
            }
            results.push((7, "component filtering oracle", cca_oracle()));
            results.push((8, "protocol arithmetic", protocol_arithmetic()));
        }
    }
    results.push((10, "low-rank adapter contract", lora_contract()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
