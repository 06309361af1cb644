//! Count evaluation (mean relative error), the unsupervised selection
//! score ω, and the ω-driven hyperparameter sweep.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{extract_sub, hist_equalize, pgm, CropMode, Dataset, ImagePatch};
use crate::density::{count_of, DensityMap};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::models::{regress_batch, Model, ParameterStore};
use crate::tensor::Tensor;
use crate::trainer::{adapt, AdaptConfig};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

/// Predicted counts for a list of already-preprocessed images.
fn predict_maps(params: &ParameterStore, images: &[ImagePatch]) -> Result<Vec<DensityMap>> {
    let chunks: Vec<Result<Vec<DensityMap>>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let tensors: Vec<Tensor> = chunk.iter().map(ImagePatch::to_tensor).collect();
            let refs: Vec<&Tensor> = tensors.iter().collect();
            regress_batch(params, &Tensor::stack(&refs)?)
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Predicted density maps of raw (unequalized) patches.
pub fn predict_density(params: &ParameterStore, images: &[ImagePatch]) -> Result<Vec<DensityMap>> {
    let eq: Vec<ImagePatch> = images.iter().map(hist_equalize).collect();
    predict_maps(params, &eq)
}

pub fn predict_counts(params: &ParameterStore, images: &[ImagePatch]) -> Result<Vec<f64>> {
    Ok(predict_density(params, images)?.iter().map(count_of).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub gt_count: usize,
    pub pred_count: f64,
    /// `100 |pred - gt| / gt`; absent when `gt = 0`.
    pub rel_error_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub range: String,
    pub n: usize,
    pub mre: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean of `rel_error_pct` over images with `gt > 0`, in percent.
    pub mre: Option<f64>,
    pub skipped_zero_gt: usize,
    pub buckets: Vec<Bucket>,
}

const BUCKETS: [(&str, usize, usize); 3] = [("<31", 0, 30), ("31-60", 31, 60), (">60", 61, usize::MAX)];

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn from_counts(counts: Vec<(String, usize, f64)>) -> Self {
        let rows: Vec<EvalRow> = counts
            .into_iter()
            .map(|(id, gt, pred)| EvalRow {
                rel_error_pct: (gt > 0).then(|| 100.0 * (pred - gt as f64).abs() / gt as f64),
                id,
                gt_count: gt,
                pred_count: pred,
            })
            .collect();
        let errs = |lo: usize, hi: usize| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.gt_count >= lo && r.gt_count <= hi)
                .filter_map(|r| r.rel_error_pct)
                .collect()
        };
        let buckets = BUCKETS
            .iter()
            .map(|&(range, lo, hi)| {
                let e = errs(lo.max(1), hi);
                Bucket {
                    range: range.to_string(),
                    n: e.len(),
                    mre: mean(&e),
                }
            })
            .collect();
        EvalReport {
            mre: mean(&errs(1, usize::MAX)),
            skipped_zero_gt: rows.iter().filter(|r| r.gt_count == 0).count(),
            buckets,
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,gt_count,pred_count,rel_error_pct\n");
        for r in &self.rows {
            let rel = r.rel_error_pct.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{}", r.id, r.gt_count, r.pred_count, rel).unwrap();
        }
        s
    }

    /// Aggregates only, as pretty JSON.
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "n_images": self.rows.len(),
            "n_scored": self.rows.len() - self.skipped_zero_gt,
            "skipped_zero_gt": self.skipped_zero_gt,
            "mre": self.mre,
            "buckets": self.buckets,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Count MRE of `params` on a labelled dataset.
pub fn evaluate_mre(params: &ParameterStore, dataset: &Dataset) -> Result<EvalReport> {
    let mut gts = Vec::with_capacity(dataset.len());
    for it in &dataset.items {
        match it.count() {
            Some(c) => gts.push(c),
            None => {
                let path = dataset.root.join(format!("{}.json", it.id));
                return Err(Error::malformed(path, "evaluation image has no annotation"));
            }
        }
    }
    let preds = predict_counts(params, &dataset.items)?;
    Ok(EvalReport::from_counts(
        dataset
            .items
            .iter()
            .zip(gts)
            .zip(preds)
            .map(|((it, gt), p)| (it.id.clone(), gt, p))
            .collect(),
    ))
}

/// Per-image `(full count, sub-image count)` with sub-images taken by
/// `mode` from the equalized patch.
pub fn full_and_sub_counts(
    params: &ParameterStore,
    dataset: &Dataset,
    sub_fraction: f64,
    mode: impl Fn(usize) -> CropMode,
) -> Result<Vec<(f64, f64)>> {
    let eq: Vec<ImagePatch> = dataset.items.iter().map(hist_equalize).collect();
    let subs = eq
        .iter()
        .enumerate()
        .map(|(i, p)| extract_sub(p, sub_fraction, mode(i)))
        .collect::<Result<Vec<_>>>()?;
    let full = predict_maps(params, &eq)?;
    let sub = predict_maps(params, &subs)?;
    Ok(full.iter().zip(&sub).map(|(f, s)| (count_of(f), count_of(s))).collect())
}

/// Number of pairs satisfying `full - sub >= -m`.
pub fn omega_of(pairs: &[(f64, f64)], m: f64) -> usize {
    pairs.iter().filter(|(f, s)| f - s >= -m).count()
}

/// ω: images whose full-image count is not below their centre
/// sub-image count by more than `m`. Uses no annotation.
pub fn compute_omega(params: &ParameterStore, dataset: &Dataset, sub_fraction: f64, m: f64) -> Result<usize> {
    let pairs = full_and_sub_counts(params, dataset, sub_fraction, |_| CropMode::Center)?;
    Ok(omega_of(&pairs, m))
}

/// ω averaged over random sub-image placements, one per seed.
pub fn compute_omega_random(
    params: &ParameterStore,
    dataset: &Dataset,
    sub_fraction: f64,
    m: f64,
    seeds: &[u64],
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no crop seeds given".into()));
    }
    let mut total = 0usize;
    for &s in seeds {
        let pairs = full_and_sub_counts(params, dataset, sub_fraction, |i| {
            CropMode::Random(s.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))
        })?;
        total += omega_of(&pairs, m);
    }
    Ok(total as f64 / seeds.len() as f64)
}

/// Writes each predicted map as an 8-bit PGM, scaled to the per-map max.
pub fn dump_heatmaps(maps: &[(String, DensityMap)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, map) in maps {
        let max = map.data().iter().cloned().fold(0.0, f64::max);
        let pixels: Vec<u8> = map
            .data()
            .iter()
            .map(|&v| if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 })
            .collect();
        pgm::write(&dir.join(format!("{id}.pgm")), map.width(), map.height(), &pixels)?;
    }
    Ok(())
}

/// Index of the largest ω; the earliest candidate wins ties.
pub fn select_best(omegas: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &o) in omegas.iter().enumerate() {
        if best.is_none_or(|b| o > omegas[b]) {
            best = Some(i);
        }
    }
    best
}

/// Candidate values per phase; a grid file may omit any of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alpha: vec![0.001, 0.01, 0.1, 0.5, 1.0],
            lambda1: vec![45.0, 25.0, 5.0, 1.0, 1.0 / 5.0, 1.0 / 25.0, 1.0 / 45.0],
            lambda2: vec![1.0 / 26.0, 1.0 / 20.0, 1.0 / 10.0, 1.0 / 5.0, 1.0],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("alpha", &self.alpha), ("lambda1", &self.lambda1), ("lambda2", &self.lambda2)] {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} grid is empty")));
            }
            if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} grid has a negative or non-finite value")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Fraction of target training images used while sweeping.
    pub subset_fraction: f64,
    pub subset_seed: u64,
    /// Stop starting new candidates once this many seconds have passed.
    pub budget_seconds: Option<f64>,
    /// Test split of the target domain; when given, each row carries its MRE.
    pub report_mre: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            subset_fraction: 1.0,
            subset_seed: 0,
            budget_seconds: None,
            report_mre: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stage: Stage,
    pub alpha: f64,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub omega: usize,
    pub mre: Option<f64>,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub alpha: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// False when the budget ran out before every candidate was tried.
    pub complete: bool,
}

/// Plain decimal, or `1/k` when `v` is the reciprocal of an integer with
/// no short decimal form.
pub fn format_weight(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() > 8 && v > 0.0 && v < 1.0 {
        let k = (1.0 / v).round();
        if (1.0 / k - v).abs() <= 1e-12 * v {
            return format!("1/{k}");
        }
    }
    plain
}

fn experiment_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Source => "L_MSE",
        Stage::Dma => "L_DMA",
        Stage::Cwi => "L_CWI",
        Stage::Cai => "L_CAI",
    }
}

impl SweepRow {
    pub fn parameters(&self) -> String {
        let mut s = format!("alpha = {}", format_weight(self.alpha));
        if let Some(l1) = self.lambda1 {
            write!(s, ", lambda1 = {}", format_weight(l1)).unwrap();
        }
        if let Some(l2) = self.lambda2 {
            write!(s, ", lambda2 = {}", format_weight(l2)).unwrap();
        }
        s
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,parameters,mre,omega\n");
        for r in &self.rows {
            let mre = r.mre.map(|v| format!("{v:.2}")).unwrap_or_default();
            writeln!(s, "{},\"{}\",{},{}", experiment_name(r.stage), r.parameters(), mre, r.omega).unwrap();
        }
        s
    }
}

/// Seeded-shuffle prefix holding `fraction` of the items (at least one).
pub fn subset(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    let n = dataset.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(n.min(1), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort();
    Dataset {
        items: idx.into_iter().map(|i| dataset.items[i].clone()).collect(),
        ..dataset.clone()
    }
}

/// Three cumulative phases: α under DMA, then λ1 under CWI starting from
/// the chosen DMA model, then λ2 under CAI starting from the chosen CWI
/// model. Each phase keeps the candidate with the largest ω on
/// `omega_set`, normally the full unlabeled target training split.
pub fn run_sweep(
    source_model: &Model,
    source: &Dataset,
    target: &Dataset,
    omega_set: &Dataset,
    target_test: Option<&Dataset>,
    grid: &SweepGrid,
    base: &AdaptConfig,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    grid.validate()?;
    base.validate()?;
    if !(opts.subset_fraction > 0.0 && opts.subset_fraction <= 1.0) {
        return Err(Error::InvalidArgument("subset fraction must be in (0, 1]".into()));
    }
    let target = subset(&target.unlabeled(), opts.subset_fraction, opts.subset_seed);
    let omega_set = omega_set.unlabeled();
    let started = Instant::now();
    let out_of_time = || opts.budget_seconds.is_some_and(|b| started.elapsed().as_secs_f64() >= b);

    let mut report = SweepReport {
        rows: Vec::new(),
        alpha: None,
        lambda1: None,
        lambda2: None,
        complete: true,
    };
    let mut current = source_model.clone();
    let phases: [(Stage, &[f64]); 3] = [
        (Stage::Dma, &grid.alpha),
        (Stage::Cwi, &grid.lambda1),
        (Stage::Cai, &grid.lambda2),
    ];
    for (stage, values) in phases {
        let mut candidates: Vec<(Model, usize)> = Vec::new();
        let first_row = report.rows.len();
        for &v in values {
            if out_of_time() {
                report.complete = false;
                break;
            }
            let mut cfg = AdaptConfig { stage, ..base.clone() };
            match stage {
                Stage::Dma => cfg.alpha = v,
                Stage::Cwi => {
                    cfg.alpha = report.alpha.unwrap_or(base.alpha);
                    cfg.lambda1 = v;
                }
                _ => {
                    cfg.alpha = report.alpha.unwrap_or(base.alpha);
                    cfg.lambda1 = report.lambda1.unwrap_or(base.lambda1);
                    cfg.lambda2 = v;
                }
            }
            let (model, _) = adapt(current.clone(), source, &target, None, &cfg)?;
            let omega = compute_omega(&model.params, &omega_set, cfg.sub_fraction, cfg.margin)?;
            let mre = match target_test {
                Some(t) if opts.report_mre => evaluate_mre(&model.params, t)?.mre,
                _ => None,
            };
            report.rows.push(SweepRow {
                stage,
                alpha: cfg.alpha,
                lambda1: (stage >= Stage::Cwi).then_some(cfg.lambda1),
                lambda2: (stage >= Stage::Cai).then_some(cfg.lambda2),
                omega,
                mre,
                selected: false,
            });
            candidates.push((model, omega));
        }
        let omegas: Vec<usize> = candidates.iter().map(|c| c.1).collect();
        let Some(best) = select_best(&omegas) else {
            break;
        };
        let row = &mut report.rows[first_row + best];
        row.selected = true;
        match stage {
            Stage::Dma => report.alpha = Some(row.alpha),
            Stage::Cwi => report.lambda1 = row.lambda1,
            _ => report.lambda2 = row.lambda2,
        }
        current = candidates.swap_remove(best).0;
        if !report.complete {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mre_table() {
        let r = EvalReport::from_counts(vec![
            ("a".into(), 10, 12.0),
            ("b".into(), 50, 40.0),
            ("c".into(), 0, 3.0),
            ("d".into(), 100, 100.0),
        ]);
        assert!((r.mre.unwrap() - 40.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.skipped_zero_gt, 1);
        let b: Vec<_> = r.buckets.iter().map(|b| (b.n, b.mre)).collect();
        assert_eq!(b, vec![(1, Some(20.0)), (1, Some(20.0)), (1, Some(0.0))]);
        assert_eq!(r.rows[2].rel_error_pct, None);
    }

    #[test]
    fn bucket_edges() {
        let r = EvalReport::from_counts(vec![
            ("a".into(), 30, 30.0),
            ("b".into(), 31, 31.0),
            ("c".into(), 60, 60.0),
            ("d".into(), 61, 61.0),
        ]);
        let n: Vec<_> = r.buckets.iter().map(|b| b.n).collect();
        assert_eq!(n, vec![1, 2, 1]);
    }

    #[test]
    fn omega_counts_margin() {
        let pairs = [(10.0, 8.0), (10.0, 10.0), (10.0, 10.5), (3.0, 5.0)];
        assert_eq!(omega_of(&pairs, 0.0), 2);
        assert_eq!(omega_of(&pairs, 1.0), 3);
    }

    #[test]
    fn selection_prefers_first_max() {
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[3, 7, 7, 1]), Some(1));
        assert_eq!(select_best(&[5]), Some(0));
    }

    #[test]
    fn weight_formatting() {
        assert_eq!(format_weight(1.0 / 26.0), "1/26");
        assert_eq!(format_weight(1.0 / 45.0), "1/45");
        assert_eq!(format_weight(0.2), "0.2");
        assert_eq!(format_weight(45.0), "45");
        assert_eq!(format_weight(0.3), "0.3");
    }

    #[test]
    fn sweep_csv_quotes_parameters() {
        let r = SweepReport {
            rows: vec![SweepRow {
                stage: Stage::Cwi,
                alpha: 0.1,
                lambda1: Some(45.0),
                lambda2: None,
                omega: 12,
                mre: Some(21.456),
                selected: true,
            }],
            alpha: Some(0.1),
            lambda1: Some(45.0),
            lambda2: None,
            complete: true,
        };
        assert_eq!(
            r.to_csv(),
            "experiment,parameters,mre,omega\nL_CWI,\"alpha = 0.1, lambda1 = 45\",21.46,12\n"
        );
    }
}
