//! Staged optimization: supervised source training, then output-space
//! alignment (DMA), within-image consistency (CWI) and across-image
//! consistency (CAI) adaptation on unlabeled target images.
//!
//! All randomness is drawn from independent ChaCha streams derived from
//! the configured seed, one per purpose, so that enabling a term never
//! shifts the draws another term sees. Terms whose weight is zero are not
//! placed on the graph at all; that is what makes `cai` with `lambda2 = 0`
//! reproduce `cwi` bit for bit, and `cai` with `lambda1 = lambda2 = 0`
//! reproduce `dma`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::dataio::{extract_sub, hist_equalize, CropMode, Dataset, ImagePatch};
use crate::density::{build_density_map, DensityMapConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_omega, evaluate_mre};
use crate::losses::{
    across_image_on_graph, weighted_sum_on_graph, LossBreakdown, LossWeights, Stage,
};
use crate::models::{
    discriminate_on_graph, discriminator_forward, init_params, is_discriminator_param, is_regressor_param,
    regressor_forward, Bound, Hyperparameters, Model, ParameterStore, SOURCE_LABEL, TARGET_LABEL,
};
use crate::tensor::{BnMode, BnStats, Graph, Tensor, Var};

const STREAM_SOURCE_ORDER: u64 = 1;
const STREAM_TARGET_ORDER: u64 = 2;
const STREAM_CROPS: u64 = 3;
const STREAM_PAIRS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub pair_threshold: f64,
    pub sub_fraction: f64,
    pub stage: Stage,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub adapt_epochs: usize,
    pub adapt_lr: f64,
    /// Discriminator learning rate during adaptation.
    pub disc_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub density: DensityMapConfig,
    /// Fill the `seconds` column of the log; off by default so reruns
    /// produce identical bytes.
    pub record_wall_time: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.1,
            lambda1: 45.0,
            lambda2: 1.0 / 26.0,
            margin: 0.0,
            pair_threshold: 5.0,
            sub_fraction: 0.8,
            stage: Stage::Source,
            source_epochs: 30,
            source_lr: 1e-3,
            adapt_epochs: 15,
            adapt_lr: 1e-4,
            disc_lr: 1e-3,
            batch_size: 16,
            seed: 0,
            density: DensityMapConfig::default(),
            record_wall_time: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.alpha, self.lambda1, self.lambda2, self.margin]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok {
            return Err(Error::InvalidArgument("loss weights and margin must be >= 0".into()));
        }
        if !(self.pair_threshold > 0.0) {
            return Err(Error::InvalidArgument("pair_threshold must be > 0".into()));
        }
        if !(self.sub_fraction > 0.0 && self.sub_fraction <= 1.0) {
            return Err(Error::InvalidArgument("sub_fraction must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        for lr in [self.source_lr, self.adapt_lr, self.disc_lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("learning rate {lr} out of range")));
            }
        }
        self.density.validate()
    }

    /// Loss weights that actually act in `stage`.
    pub fn effective_weights(&self, stage: Stage) -> LossWeights {
        LossWeights {
            alpha: if stage >= Stage::Dma { self.alpha } else { 0.0 },
            lambda1: if stage >= Stage::Cwi { self.lambda1 } else { 0.0 },
            lambda2: if stage >= Stage::Cai { self.lambda2 } else { 0.0 },
        }
    }

    pub fn hyperparameters(&self, stage: Stage) -> Hyperparameters {
        let w = self.effective_weights(stage);
        Hyperparameters {
            alpha: w.alpha,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            margin: self.margin,
            pair_threshold: self.pair_threshold,
            sub_fraction: self.sub_fraction,
            ..Hyperparameters::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub seed: u64,
    pub config: AdaptConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,mse,bce,wi,ai,total,val_metric,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.loss.mse, r.loss.bce, r.loss.wi, r.loss.ai, r.loss.total, val, r.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Histogram-equalized copy of every item, and its `[1, H, W]` tensor.
pub struct Prepared {
    pub patches: Vec<ImagePatch>,
    pub images: Vec<Tensor>,
}

pub fn prepare(dataset: &Dataset) -> Prepared {
    let patches: Vec<ImagePatch> = dataset.items.iter().map(hist_equalize).collect();
    let images = patches.iter().map(ImagePatch::to_tensor).collect();
    Prepared { patches, images }
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(items)
}

fn ensure_labeled(dataset: &Dataset) -> Result<()> {
    if let Some(it) = dataset.items.iter().find(|it| it.annotation.is_none()) {
        let path = dataset.root.join(format!("{}.json", it.id));
        return Err(Error::malformed(path, "source item has no annotation"));
    }
    Ok(())
}

fn density_targets(dataset: &Dataset, cfg: &DensityMapConfig) -> Vec<Tensor> {
    dataset
        .items
        .iter()
        .map(|it| {
            let ann = it.annotation.clone().unwrap_or_default();
            build_density_map(&ann, (it.width, it.height), cfg).to_tensor()
        })
        .collect()
}

struct Accum {
    mse: f64,
    bce: f64,
    wi: f64,
    ai: f64,
    steps: usize,
}

impl Accum {
    fn new() -> Self {
        Accum {
            mse: 0.0,
            bce: 0.0,
            wi: 0.0,
            ai: 0.0,
            steps: 0,
        }
    }

    fn finish(&self, stage: Stage, w: LossWeights) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        LossBreakdown::new(stage, w, self.mse / n, self.bce / n, self.wi / n, self.ai / n)
    }
}

fn diverged(stage: Stage, epoch: usize, step: usize, what: impl std::fmt::Display) -> Error {
    Error::TrainingDiverged(format!("stage {stage}, epoch {epoch}, step {step}: {what}"))
}

/// Supervised training from freshly initialized weights.
pub fn train_source(source: &Dataset, val: Option<&Dataset>, cfg: &AdaptConfig) -> Result<(Model, TrainLog)> {
    let init = Model {
        params: init_params(cfg.seed),
        hyperparameters: cfg.hyperparameters(Stage::Source),
        seed: cfg.seed,
    };
    train_source_from(init, source, val, cfg)
}

/// Supervised training of the regressor starting from `model`.
pub fn train_source_from(
    model: Model,
    source: &Dataset,
    val: Option<&Dataset>,
    cfg: &AdaptConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    ensure_labeled(source)?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("source dataset is empty".into()));
    }
    let stage = Stage::Source;
    let prep = prepare(source);
    let targets = density_targets(source, &cfg.density);
    let mut params = model.params;
    let mut opt = AdamState::new(&params, is_regressor_param);
    let mut order_rng = stream(cfg.seed, STREAM_SOURCE_ORDER);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut log = TrainLog {
        stage,
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: Vec::new(),
    };
    let weights = cfg.effective_weights(stage);
    for epoch in 1..=cfg.source_epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut acc = Accum::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<&Tensor> = batch.iter().map(|&i| &prep.images[i]).collect();
            let gts: Vec<&Tensor> = batch.iter().map(|&i| &targets[i]).collect();
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph, is_regressor_param);
            let x = graph.input(stack(&imgs)?);
            let pred = regressor_forward(&mut graph, &bound, x)?;
            let loss = graph.mse(pred, &stack(&gts)?)?;
            let value = graph.scalar(loss);
            if !value.is_finite() {
                return Err(diverged(stage, epoch, step, "non-finite loss"));
            }
            graph.backward(loss)?;
            let grads = bound.gradients(&graph);
            adam_step(&mut params, &grads, &mut opt, cfg.source_lr)
                .map_err(|e| diverged(stage, epoch, step, e))?;
            acc.mse += value;
            acc.steps += 1;
        }
        let val_metric = match val {
            Some(v) if !v.is_empty() => evaluate_mre(&params, v)?.mre,
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: acc.finish(stage, weights),
            val_metric,
            seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    if !params.is_finite() {
        return Err(diverged(stage, cfg.source_epochs, 0, "non-finite parameters"));
    }
    Ok((
        Model {
            params,
            hyperparameters: cfg.hyperparameters(stage),
            seed: cfg.seed,
        },
        log,
    ))
}

/// How the domain-classification term enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adversarial {
    /// Training wiring: maps pass a reversal layer with coefficient
    /// alpha, and the BCE enters with weight 1. The regressor then
    /// receives `-alpha` times the BCE gradient, the discriminator the
    /// plain gradient.
    Reversed,
    /// The scalar objective `mse + alpha * bce + ...` with no reversal;
    /// what gradient checks differentiate.
    Plain,
}

/// Stacked tensors for one adaptation step.
pub struct StepInputs {
    pub source_images: Tensor,
    pub source_density: Tensor,
    pub target_images: Tensor,
    /// Resized sub-images of the target batch, in the same order. Needed
    /// only when a consistency weight is nonzero.
    pub target_subs: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub margin: f64,
    pub pair_threshold: f64,
    pub adversarial: Adversarial,
}

/// Graph handles of the objective and its components.
pub struct StepTerms {
    pub objective: Var,
    pub mse: Var,
    pub bce: Var,
    pub wi: Option<Var>,
    pub ai: Option<Var>,
}

/// Records one adaptation objective on `graph`. Terms with zero weight
/// are not recorded.
pub fn step_objective(
    graph: &mut Graph,
    bound: &Bound,
    inputs: &StepInputs,
    settings: &StepSettings,
    bn: &mut BnStats,
    pair_rng: &mut impl Rng,
) -> Result<StepTerms> {
    let w = settings.weights;
    let n_src = inputs.source_images.shape()[0];
    let n_tgt = inputs.target_images.shape()[0];
    let xs = graph.input(inputs.source_images.clone());
    let ps = regressor_forward(graph, bound, xs)?;
    let mse = graph.mse(ps, &inputs.source_density)?;
    let xt = graph.input(inputs.target_images.clone());
    let pt = regressor_forward(graph, bound, xt)?;

    let maps = graph.concat(&[ps, pt])?;
    let labels: Vec<f64> = std::iter::repeat_n(SOURCE_LABEL, n_src)
        .chain(std::iter::repeat_n(TARGET_LABEL, n_tgt))
        .collect();
    let (probs, bce_weight) = match settings.adversarial {
        Adversarial::Reversed => (discriminate_on_graph(graph, bound, maps, w.alpha, BnMode::Train, bn)?, 1.0),
        Adversarial::Plain => (discriminator_forward(graph, bound, maps, BnMode::Train, bn)?, w.alpha),
    };
    let bce = graph.bce(probs, &labels)?;

    let mut terms = vec![(mse, 1.0), (bce, bce_weight)];
    let (mut wi, mut ai) = (None, None);
    if w.lambda1 > 0.0 || w.lambda2 > 0.0 {
        let subs = inputs
            .target_subs
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("consistency terms need target sub-images".into()))?;
        let xsub = graph.input(subs.clone());
        let psub = regressor_forward(graph, bound, xsub)?;
        let c_full = graph.sum_per_item(pt);
        let c_sub = graph.sum_per_item(psub);
        if w.lambda1 > 0.0 {
            let diff = graph.sub(c_full, c_sub)?;
            let hinge = graph.hinge(diff, settings.margin);
            let v = graph.mean_all(hinge);
            terms.push((v, w.lambda1));
            wi = Some(v);
        }
        if w.lambda2 > 0.0 {
            let counts = graph.value(c_full).data().to_vec();
            let pairs = pair_by_count(&counts, settings.pair_threshold, pair_rng);
            let mut per_pair = Vec::with_capacity(pairs.len());
            for (a, b) in pairs {
                let ca = graph.select(c_full, a)?;
                let cb = graph.select(c_full, b)?;
                let sa = graph.select(c_sub, a)?;
                let sb = graph.select(c_sub, b)?;
                per_pair.push(across_image_on_graph(graph, ca, cb, sa, sb, settings.margin)?);
            }
            if !per_pair.is_empty() {
                let all = graph.concat(&per_pair)?;
                let v = graph.mean_all(all);
                terms.push((v, w.lambda2));
                ai = Some(v);
            }
        }
    }
    let objective = weighted_sum_on_graph(graph, &terms)?;
    Ok(StepTerms {
        objective,
        mse,
        bce,
        wi,
        ai,
    })
}

/// Greedy pairing of batch positions whose predicted counts differ by
/// more than `threshold`. Positions are visited in a seeded shuffled
/// order; each is paired with the first later unpaired position that
/// qualifies.
pub fn pair_by_count(counts: &[f64], threshold: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(rng);
    let mut used = vec![false; counts.len()];
    let mut pairs = Vec::new();
    for (oi, &i) in order.iter().enumerate() {
        if used[i] {
            continue;
        }
        if let Some(&j) = order[oi + 1..]
            .iter()
            .find(|&&j| !used[j] && (counts[i] - counts[j]).abs() > threshold)
        {
            used[i] = true;
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Adapts `model` to the target domain with the objective of `cfg.stage`.
/// Target annotations, if any, are dropped before training starts.
pub fn adapt(
    model: Model,
    source: &Dataset,
    target: &Dataset,
    val_target: Option<&Dataset>,
    cfg: &AdaptConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let stage = cfg.stage;
    if stage == Stage::Source {
        return Err(Error::InvalidArgument("adapt needs an adaptation stage".into()));
    }
    ensure_labeled(source)?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("source dataset is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidArgument("target dataset is empty".into()));
    }
    let target = target.unlabeled();
    let val_target = val_target.map(Dataset::unlabeled);

    let weights = cfg.effective_weights(stage);
    let need_crops = weights.lambda1 > 0.0 || weights.lambda2 > 0.0;

    let src = prepare(source);
    let src_targets = density_targets(source, &cfg.density);
    let tgt = prepare(&target);

    let mut params = model.params;
    let mut reg_opt = AdamState::new(&params, is_regressor_param);
    let mut disc_opt = AdamState::new(&params, is_discriminator_param);
    let mut bn = params.bn_stats()?;

    let mut src_rng = stream(cfg.seed, STREAM_SOURCE_ORDER);
    let mut tgt_rng = stream(cfg.seed, STREAM_TARGET_ORDER);
    let mut crop_rng = stream(cfg.seed, STREAM_CROPS);
    let mut pair_rng = stream(cfg.seed, STREAM_PAIRS);

    let mut src_order: Vec<usize> = (0..source.len()).collect();
    src_order.shuffle(&mut src_rng);
    let mut src_pos = 0;
    let mut tgt_order: Vec<usize> = (0..target.len()).collect();

    let mut log = TrainLog {
        stage,
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: Vec::new(),
    };
    for epoch in 1..=cfg.adapt_epochs {
        let started = Instant::now();
        tgt_order.shuffle(&mut tgt_rng);
        let mut acc = Accum::new();
        for (step, tbatch) in tgt_order.chunks(cfg.batch_size).enumerate() {
            let mut sbatch = Vec::with_capacity(cfg.batch_size);
            while sbatch.len() < cfg.batch_size.min(source.len()) {
                if src_pos == src_order.len() {
                    src_order.shuffle(&mut src_rng);
                    src_pos = 0;
                }
                sbatch.push(src_order[src_pos]);
                src_pos += 1;
            }

            let subs = if need_crops {
                let mut subs = Vec::with_capacity(tbatch.len());
                for &i in tbatch {
                    let seed = crop_rng.random::<u64>();
                    subs.push(extract_sub(&tgt.patches[i], cfg.sub_fraction, CropMode::Random(seed))?.to_tensor());
                }
                Some(stack(&subs.iter().collect::<Vec<_>>())?)
            } else {
                None
            };
            let inputs = StepInputs {
                source_images: stack(&sbatch.iter().map(|&i| &src.images[i]).collect::<Vec<_>>())?,
                source_density: stack(&sbatch.iter().map(|&i| &src_targets[i]).collect::<Vec<_>>())?,
                target_images: stack(&tbatch.iter().map(|&i| &tgt.images[i]).collect::<Vec<_>>())?,
                target_subs: subs,
            };

            let mut graph = Graph::new();
            let bound = params.bind(&mut graph, |_| true);
            let terms = step_objective(
                &mut graph,
                &bound,
                &inputs,
                &StepSettings {
                    weights,
                    margin: cfg.margin,
                    pair_threshold: cfg.pair_threshold,
                    adversarial: Adversarial::Reversed,
                },
                &mut bn,
                &mut pair_rng,
            )?;
            let objective = terms.objective;
            let (mse_v, bce_v) = (graph.scalar(terms.mse), graph.scalar(terms.bce));
            let wi_value = terms.wi.map_or(0.0, |v| graph.scalar(v));
            let ai_value = terms.ai.map_or(0.0, |v| graph.scalar(v));
            if !graph.scalar(objective).is_finite() {
                return Err(diverged(stage, epoch, step, "non-finite loss"));
            }
            graph.backward(objective)?;
            let grads = bound.gradients(&graph);
            drop(graph);
            adam_step(&mut params, &grads, &mut reg_opt, cfg.adapt_lr)
                .map_err(|e| diverged(stage, epoch, step, e))?;
            adam_step(&mut params, &grads, &mut disc_opt, cfg.disc_lr)
                .map_err(|e| diverged(stage, epoch, step, e))?;
            params.set_bn_stats(&bn)?;

            acc.mse += mse_v;
            acc.bce += bce_v;
            acc.wi += wi_value;
            acc.ai += ai_value;
            acc.steps += 1;
        }
        let val_metric = match &val_target {
            Some(v) if !v.is_empty() => Some(compute_omega(&params, v, cfg.sub_fraction, cfg.margin)? as f64),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: acc.finish(stage, weights),
            val_metric,
            seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    if !params.is_finite() {
        return Err(diverged(stage, cfg.adapt_epochs, 0, "non-finite parameters"));
    }
    Ok((
        Model {
            params,
            hyperparameters: cfg.hyperparameters(stage),
            seed: cfg.seed,
        },
        log,
    ))
}

pub fn adapt_dma(
    model: Model,
    source: &Dataset,
    target: &Dataset,
    val_target: Option<&Dataset>,
    cfg: &AdaptConfig,
) -> Result<(Model, TrainLog)> {
    adapt(model, source, target, val_target, &AdaptConfig { stage: Stage::Dma, ..cfg.clone() })
}

pub fn adapt_cwi(
    model: Model,
    source: &Dataset,
    target: &Dataset,
    val_target: Option<&Dataset>,
    cfg: &AdaptConfig,
) -> Result<(Model, TrainLog)> {
    adapt(model, source, target, val_target, &AdaptConfig { stage: Stage::Cwi, ..cfg.clone() })
}

pub fn adapt_cai(
    model: Model,
    source: &Dataset,
    target: &Dataset,
    val_target: Option<&Dataset>,
    cfg: &AdaptConfig,
) -> Result<(Model, TrainLog)> {
    adapt(model, source, target, val_target, &AdaptConfig { stage: Stage::Cai, ..cfg.clone() })
}

/// How successive adaptation stages are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageChaining {
    /// Each stage continues from the previous stage's weights.
    Cumulative,
    /// Every stage starts from the source model.
    FromSource,
}

/// Models produced by a full source → dma → cwi → cai run.
pub struct StageRun {
    pub source: (Model, TrainLog),
    pub dma: (Model, TrainLog),
    pub cwi: (Model, TrainLog),
    pub cai: (Model, TrainLog),
}

pub fn run_all_stages(
    source: &Dataset,
    source_val: Option<&Dataset>,
    target: &Dataset,
    target_val: Option<&Dataset>,
    cfg: &AdaptConfig,
    chaining: StageChaining,
) -> Result<StageRun> {
    let src = train_source(source, source_val, cfg)?;
    let dma = adapt_dma(src.0.clone(), source, target, target_val, cfg)?;
    let start = |prev: &Model| match chaining {
        StageChaining::Cumulative => prev.clone(),
        StageChaining::FromSource => src.0.clone(),
    };
    let cwi = adapt_cwi(start(&dma.0), source, target, target_val, cfg)?;
    let cai = adapt_cai(start(&cwi.0), source, target, target_val, cfg)?;
    Ok(StageRun { source: src, dma, cwi, cai })
}

/// Plain-parameter snapshot, handy for comparing trajectories.
pub fn regressor_bits(params: &ParameterStore) -> Vec<u64> {
    params
        .iter()
        .filter(|(n, _)| is_regressor_param(n))
        .flat_map(|(_, e)| e.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_respects_threshold() {
        let mut rng = stream(1, 9);
        assert!(pair_by_count(&[3.0; 6], 5.0, &mut rng).is_empty());
        let counts = [0.0, 20.0, 2.0, 30.0, 1.0];
        let pairs = pair_by_count(&counts, 5.0, &mut rng);
        let mut seen = std::collections::HashSet::new();
        for (a, b) in &pairs {
            assert!((counts[*a] - counts[*b]).abs() > 5.0);
            assert!(seen.insert(*a) && seen.insert(*b));
        }
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn effective_weights_follow_stage() {
        let cfg = AdaptConfig::default();
        let w = cfg.effective_weights(Stage::Dma);
        assert_eq!((w.alpha, w.lambda1, w.lambda2), (0.1, 0.0, 0.0));
        let w = cfg.effective_weights(Stage::Cai);
        assert_eq!((w.alpha, w.lambda1, w.lambda2), (0.1, 45.0, 1.0 / 26.0));
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        let bad = AdaptConfig {
            sub_fraction: 0.0,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig {
            pair_threshold: 0.0,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig {
            lambda1: -1.0,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            stage: Stage::Dma,
            seed: 1,
            config: AdaptConfig::default(),
            epochs: vec![EpochRecord {
                epoch: 1,
                loss: LossBreakdown::new(
                    Stage::Dma,
                    LossWeights {
                        alpha: 0.5,
                        lambda1: 0.0,
                        lambda2: 0.0,
                    },
                    1.0,
                    2.0,
                    0.0,
                    0.0,
                ),
                val_metric: None,
                seconds: 0.0,
            }],
        };
        assert_eq!(log.to_csv(), "epoch,mse,bce,wi,ai,total,val_metric,seconds\n1,1,2,0,0,2,,0\n");
    }
}
