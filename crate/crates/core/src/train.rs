//! Training: losses, SGD/Adam, left-right flip augmentation, k-fold
//! cross-validation and grid search.
//!
//! Everything is seeded and strictly serial, so identical inputs give
//! byte-identical checkpoints and histories. Losses and metrics average
//! over valid pixels only; out-of-view pixels never contribute.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::bev::combine_inputs;
use crate::error::{Error, Result};
use crate::kitti::ConfidenceMap;
use crate::metrics::PixelHistogram;
use crate::model::{build_model, ForwardMode, Model, ModelVariant, Param, ScaleProfile};
use crate::synth::Scene;

/// RNG stream ids derived from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::InvalidParameter(format!(
                "unknown optimizer '{other}' (expected adam or sgd)"
            ))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Dice,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bce" => Ok(Self::Bce),
            "dice" => Ok(Self::Dice),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss '{other}' (expected bce or dice)"
            ))),
        }
    }

    /// Append the loss node for a batch of predictions.
    pub fn apply(
        &self,
        graph: &mut Graph,
        pred: NodeId,
        target: &Tensor,
        valid: &[bool],
    ) -> Result<NodeId> {
        match self {
            Self::Bce => graph.bce_loss(pred, target, valid),
            Self::Dice => graph.dice_loss(pred, target, valid),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bce => "bce",
            Self::Dice => "dice",
        })
    }
}

/// One training configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub loss: LossKind,
    /// Dropout probability in [0, 1).
    pub dropout_rate: f64,
    /// Hold-out fraction in (0, 1).
    pub val_split: f64,
    /// Fraction of the training split that gets a flipped copy, [0, 1].
    pub aug_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            loss: LossKind::Bce,
            dropout_rate: 0.2,
            val_split: 0.1,
            aug_rate: 1.0,
            batch_size: 2,
            max_epochs: 50,
            seed: 42,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(
                "dropout rate must lie in [0, 1)".into(),
            ));
        }
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::InvalidParameter(
                "validation split must lie in (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.aug_rate) {
            return Err(Error::InvalidParameter(
                "augmentation rate must lie in [0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "batch size and epoch count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_biou: f64,
}

/// One entry per completed epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// Plain gradient descent step: p <- p - lr * g.
pub fn sgd_step(params: &mut [Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    check_aligned(params, grads)?;
    for (param, grad) in params.iter_mut().zip(grads) {
        for (p, &g) in param.value.data_mut().iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Per-parameter Adam state.
#[derive(Clone, Debug)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            first: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    check_aligned(params, grads)?;
    if state.first.len() != params.len() {
        return Err(Error::ShapeMismatch(
            "adam state does not match parameter list".into(),
        ));
    }
    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (j, p) in params[i].value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

fn check_aligned(params: &[Param], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (param, grad) in params.iter().zip(grads) {
        if param.value.numel() != grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} does not match parameter '{}'",
                grad.len(),
                param.name
            )));
        }
    }
    Ok(())
}

enum OptState {
    Sgd,
    Adam(AdamState),
}

impl OptState {
    fn new(optimizer: Optimizer, params: &[Param]) -> Self {
        match optimizer {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam => Self::Adam(AdamState::new(params)),
        }
    }

    fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        match self {
            Self::Sgd => sgd_step(params, grads, lr),
            Self::Adam(state) => adam_step(params, grads, lr, state),
        }
    }
}

// ---------------------------------------------------------------------------
// dataset handling
// ---------------------------------------------------------------------------

/// Append a left-right flipped copy of `floor(aug_rate * n)` scenes, chosen
/// by a seeded shuffle. Source scenes are never mutated.
pub fn augment_dataset(scenes: &[Scene], aug_rate: f64, seed: u64) -> Result<Vec<Scene>> {
    if !(0.0..=1.0).contains(&aug_rate) {
        return Err(Error::InvalidParameter(format!(
            "augmentation rate {aug_rate} must lie in [0, 1]"
        )));
    }
    let n_aug = (aug_rate * scenes.len() as f64).floor() as usize;
    let mut out: Vec<Scene> = scenes.to_vec();
    let mut indices: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    for &i in indices.iter().take(n_aug) {
        out.push(scenes[i].fliplr());
    }
    Ok(out)
}

/// Disjoint index folds covering [0, n), sizes differing by at most one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

/// Chunk a seeded permutation of [0, n) into k near-equal folds; the first
/// `n % k` folds take the extra element.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "cannot split {n} items into {k} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let base = n / k;
    let remainder = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < remainder);
        folds.push(perm[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(FoldPlan { k, folds })
}

/// Input tensors of one scene for a variant, scaled from 8-bit to [0, 1],
/// camera before LiDAR.
pub fn scene_inputs(scene: &Scene, variant: ModelVariant) -> Result<Vec<Tensor>> {
    let to_tensor = |img: &crate::bev::BevImage| {
        Tensor::new(
            vec![1, img.height(), img.width(), img.channels()],
            img.data().iter().map(|&v| f64::from(v) / 255.0).collect(),
        )
    };
    if variant.combined_input() {
        let combined = combine_inputs(&scene.camera_bev, &scene.lidar_bev)?;
        Ok(vec![to_tensor(&combined)?])
    } else if variant.twin_encoders() {
        Ok(vec![to_tensor(&scene.camera_bev)?, to_tensor(&scene.lidar_bev)?])
    } else if variant.camera_only() {
        Ok(vec![to_tensor(&scene.camera_bev)?])
    } else {
        Ok(vec![to_tensor(&scene.lidar_bev)?])
    }
}

fn stack_batch(
    scenes: &[&Scene],
    variant: ModelVariant,
) -> Result<(Vec<Tensor>, Tensor, Vec<bool>)> {
    let arity = variant.input_arity();
    let mut stacked: Vec<Vec<f64>> = vec![Vec::new(); arity];
    let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); arity];
    let mut target = Vec::new();
    let mut valid = Vec::new();
    for scene in scenes {
        let inputs = scene_inputs(scene, variant)?;
        for (slot, input) in inputs.into_iter().enumerate() {
            shapes[slot] = input.shape().to_vec();
            stacked[slot].extend_from_slice(input.data());
        }
        target.extend(scene.gt.road().iter().map(|&r| f64::from(u8::from(r))));
        valid.extend_from_slice(scene.gt.valid());
    }
    let n = scenes.len();
    let inputs: Vec<Tensor> = stacked
        .into_iter()
        .zip(&shapes)
        .map(|(data, shape)| Tensor::new(vec![n, shape[1], shape[2], shape[3]], data))
        .collect::<Result<_>>()?;
    let h = shapes[0][1];
    let w = shapes[0][2];
    let target = Tensor::new(vec![n, h, w, 1], target)?;
    Ok((inputs, target, valid))
}

fn check_scene_dims(scene: &Scene, profile: &ScaleProfile) -> Result<()> {
    let (h, w) = (profile.input_h, profile.input_w);
    for (what, img_h, img_w) in [
        ("camera raster", scene.camera_bev.height(), scene.camera_bev.width()),
        ("lidar raster", scene.lidar_bev.height(), scene.lidar_bev.width()),
        ("ground truth", scene.gt.height(), scene.gt.width()),
    ] {
        if img_h != h || img_w != w {
            return Err(Error::ShapeMismatch(format!(
                "scene '{}': {what} is {img_h}x{img_w}, profile expects {h}x{w}",
                scene.id
            )));
        }
    }
    Ok(())
}

/// Run a model over one scene in inference mode.
pub fn predict_confidence(model: &Model, scene: &Scene) -> Result<ConfidenceMap> {
    let inputs = scene_inputs(scene, model.variant())?;
    let pass = model.forward(&inputs, ForwardMode::Inference)?;
    let out = pass.graph.value(pass.output);
    let (_, h, w, _) = out.dims4()?;
    ConfidenceMap::new(h, w, out.data().to_vec())
}

/// Pooled mean BinaryIoU of a model over scenes at threshold 0.5.
pub fn evaluate_biou(model: &Model, scenes: &[Scene]) -> Result<f64> {
    let mut hist = PixelHistogram::default();
    for scene in scenes {
        let conf = predict_confidence(model, scene)?;
        hist.merge(&PixelHistogram::from_confidence(&conf, &scene.gt)?);
    }
    if hist.valid_total() == 0 {
        return Err(Error::DegenerateInput(
            "no valid pixels in evaluation scenes".into(),
        ));
    }
    Ok(hist.counts_at_half().iou().2)
}

/// Result of one training run: the retained best checkpoint and the
/// per-epoch history.
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainingHistory,
    /// Zero-based epoch whose checkpoint was retained.
    pub best_epoch: usize,
}

/// Train on an explicit train/validation split. Augmentation applies to the
/// training scenes only; the checkpoint with the best validation BinaryIoU
/// is retained (earliest epoch wins ties).
pub fn train_with_split(
    variant: ModelVariant,
    profile: &ScaleProfile,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    hp: &HyperParams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    profile.validate()?;
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::DegenerateInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    for scene in train_scenes.iter().chain(val_scenes) {
        check_scene_dims(scene, profile)?;
    }

    let train_set = augment_dataset(train_scenes, hp.aug_rate, hp.seed)?;
    let mut model = build_model(variant, profile, hp.seed)?;
    let mut opt = OptState::new(hp.optimizer, model.params());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    dropout_rng.set_stream(STREAM_DROPOUT);

    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, Vec<Param>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_indices in order.chunks(hp.batch_size) {
            let batch: Vec<&Scene> = batch_indices.iter().map(|&i| &train_set[i]).collect();
            let (inputs, target, valid) = stack_batch(&batch, variant)?;
            let mut pass = model.forward(
                &inputs,
                ForwardMode::Train {
                    dropout: hp.dropout_rate,
                    rng: &mut dropout_rng,
                },
            )?;
            let loss = hp.loss.apply(&mut pass.graph, pass.output, &target, &valid)?;
            let loss_value = pass.graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss_value} at epoch {epoch}, batch {batches}"
                )));
            }
            pass.graph.backward(loss)?;
            let grads = pass.param_grads();
            opt.step(model.params_mut(), &grads, hp.learning_rate)?;
            epoch_loss += loss_value;
            batches += 1;
        }

        let (val_loss, val_biou) = validate(&model, val_scenes, hp.loss)?;
        history.epochs.push(EpochStats {
            train_loss: epoch_loss / batches as f64,
            val_loss,
            val_biou,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_biou > *b) {
            best = Some((val_biou, epoch, model.params().to_vec()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let model = Model::from_parts(variant, *profile, best_params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

fn validate(model: &Model, scenes: &[Scene], loss: LossKind) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut valid_total = 0.0;
    let mut hist = PixelHistogram::default();
    for scene in scenes {
        let inputs = scene_inputs(scene, model.variant())?;
        let mut pass = model.forward(&inputs, ForwardMode::Inference)?;
        let target = Tensor::new(
            vec![1, scene.gt.height(), scene.gt.width(), 1],
            scene.gt.road().iter().map(|&r| f64::from(u8::from(r))).collect(),
        )?;
        let n_valid = scene.gt.valid().iter().filter(|&&v| v).count() as f64;
        let loss_node = loss.apply(&mut pass.graph, pass.output, &target, scene.gt.valid())?;
        loss_sum += pass.graph.value(loss_node).item() * n_valid;
        valid_total += n_valid;

        let out = pass.graph.value(pass.output);
        let conf = ConfidenceMap::new(scene.gt.height(), scene.gt.width(), out.data().to_vec())?;
        hist.merge(&PixelHistogram::from_confidence(&conf, &scene.gt)?);
    }
    Ok((loss_sum / valid_total, hist.counts_at_half().iou().2))
}

/// Train with a single seeded hold-out split of `hp.val_split`.
pub fn train(
    variant: ModelVariant,
    profile: &ScaleProfile,
    dataset: &[Scene],
    hp: &HyperParams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if dataset.is_empty() {
        return Err(Error::DegenerateInput("dataset is empty".into()));
    }
    if dataset.len() == 1 {
        // Nothing to hold out; validate on the single training scene.
        return train_with_split(variant, profile, dataset, dataset, hp);
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(STREAM_SPLIT);
    indices.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * hp.val_split).round() as usize)
        .clamp(1, dataset.len() - 1);
    let val: Vec<Scene> = indices[..n_val].iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Vec<Scene> = indices[n_val..].iter().map(|&i| dataset[i].clone()).collect();
    train_with_split(variant, profile, &train_set, &val, hp)
}

/// Per-fold validation BinaryIoU and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossValReport {
    pub variant: ModelVariant,
    pub fold_bious: Vec<f64>,
    pub mean_biou: f64,
}

/// k-fold cross-validation: train on each fold's complement, evaluate the
/// retained checkpoint's BinaryIoU on the fold.
pub fn cross_validate(
    variant: ModelVariant,
    profile: &ScaleProfile,
    dataset: &[Scene],
    hp: &HyperParams,
    k: usize,
) -> Result<CrossValReport> {
    let plan = kfold_split(dataset.len(), k, hp.seed)?;
    let mut fold_bious = Vec::with_capacity(k);
    for fold in &plan.folds {
        let in_fold: std::collections::HashSet<usize> = fold.iter().copied().collect();
        let val: Vec<Scene> = fold.iter().map(|&i| dataset[i].clone()).collect();
        let train_set: Vec<Scene> = (0..dataset.len())
            .filter(|i| !in_fold.contains(i))
            .map(|i| dataset[i].clone())
            .collect();
        let outcome = train_with_split(variant, profile, &train_set, &val, hp)?;
        fold_bious.push(evaluate_biou(&outcome.model, &val)?);
    }
    let mean_biou = fold_bious.iter().sum::<f64>() / fold_bious.len() as f64;
    Ok(CrossValReport {
        variant,
        fold_bious,
        mean_biou,
    })
}

/// Axes of the hyper-parameter grid.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub optimizers: Vec<Optimizer>,
    pub learning_rates: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub dropout_rates: Vec<f64>,
    pub val_splits: Vec<f64>,
    pub aug_rates: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            optimizers: vec![Optimizer::Adam, Optimizer::Sgd],
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            losses: vec![LossKind::Bce, LossKind::Dice],
            dropout_rates: vec![0.2, 0.35, 0.5],
            val_splits: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            aug_rates: vec![0.0, 0.5, 1.0],
        }
    }
}

/// One evaluated grid cell.
#[derive(Clone, Debug)]
pub struct GridResult {
    pub index: usize,
    pub hp: HyperParams,
    pub val_biou: f64,
    pub val_loss: f64,
}

/// Train every configuration of the Cartesian product with a single
/// hold-out split and rank by validation BinaryIoU (descending), breaking
/// ties by lower validation loss, then configuration index.
pub fn grid_search(
    grid: &GridSpec,
    variant: ModelVariant,
    profile: &ScaleProfile,
    dataset: &[Scene],
    base: &HyperParams,
) -> Result<Vec<GridResult>> {
    for (axis, len) in [
        ("optimizer", grid.optimizers.len()),
        ("learning rate", grid.learning_rates.len()),
        ("loss", grid.losses.len()),
        ("dropout", grid.dropout_rates.len()),
        ("validation split", grid.val_splits.len()),
        ("augmentation rate", grid.aug_rates.len()),
    ] {
        if len == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid axis '{axis}' is empty"
            )));
        }
    }

    let mut results = Vec::new();
    let mut index = 0usize;
    for &optimizer in &grid.optimizers {
        for &learning_rate in &grid.learning_rates {
            for &loss in &grid.losses {
                for &dropout_rate in &grid.dropout_rates {
                    for &val_split in &grid.val_splits {
                        for &aug_rate in &grid.aug_rates {
                            let hp = HyperParams {
                                optimizer,
                                learning_rate,
                                loss,
                                dropout_rate,
                                val_split,
                                aug_rate,
                                ..*base
                            };
                            let outcome = train(variant, profile, dataset, &hp)?;
                            let best = outcome.history.epochs[outcome.best_epoch];
                            results.push(GridResult {
                                index,
                                hp,
                                val_biou: best.val_biou,
                                val_loss: best.val_loss,
                            });
                            index += 1;
                        }
                    }
                }
            }
        }
    }
    results.sort_by(|a, b| {
        b.val_biou
            .total_cmp(&a.val_biou)
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then(a.index.cmp(&b.index))
    });
    Ok(results)
}
