//! Training orchestration.
//!
//! Two growth procedures share one epoch loop:
//!
//! * Cascade training starts from the three-layer base network, trains it to
//!   a plateau, then repeatedly inserts a near-identity residual block before
//!   the output layer and trains the deepened network until its epoch loss
//!   drops to `stage_loss_ratio` times the previous stage's final loss (or an
//!   epoch cap intervenes).
//! * Depthwise evolution starts from a trained network and replaces standard
//!   residual blocks with depthwise-separable ones, tail first, fine-tuning
//!   after each swap. A one-shot mode converts every block at once and
//!   fine-tunes a single time; it exists as the baseline the incremental
//!   schedule is judged against.
//!
//! Every random choice is drawn from a named, index-addressed stream, so a
//! run is a pure function of (seed, config, data). Stage checkpoints, the
//! stage history file, and metric rows contain no timestamps for the same
//! reason.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{epoch_batches, extract_patch_pairs, PatchPair};
use crate::error::{Error, Result};
use crate::loss::{evaluate_loss, LossSpec};
use crate::network::Network;
use crate::noise::{degrade, NoiseModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{pair_index, stream_rng, StreamRole};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_STRIDE: usize = 16;
pub const DEFAULT_MAX_BLOCKS: usize = 5;
pub const DEFAULT_STAGE_LOSS_RATIO: f64 = 0.97;
pub const DEFAULT_EPOCH_CAP: usize = 100;
pub const DEFAULT_PLATEAU_WINDOW: usize = 3;
pub const DEFAULT_PLATEAU_MIN_REL: f64 = 1e-3;
pub const DEFAULT_FINE_TUNE_EPOCHS: usize = 10;

// Stream-index base for evolution stages, so their weight-init and shuffle
// draws can never collide with cascade stages of the same ordinal.
const EVOLUTION_STREAM_BASE: usize = 1 << 16;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: OptimizerKind::Adam,
            loss: LossSpec::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive and finite"));
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer<f32> {
        Optimizer::new(self.optimizer, self.learning_rate as f32)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CascadePlan {
    pub train: TrainConfig,
    /// Residual blocks to insert after the base stage.
    pub max_blocks: usize,
    /// A growth stage stops once its epoch loss <= ratio * previous final.
    pub stage_loss_ratio: f64,
    /// Hard per-stage epoch limit.
    pub epoch_cap: usize,
    /// Base-stage plateau: epochs compared across this window.
    pub plateau_window: usize,
    /// Base-stage plateau: minimum relative improvement over the window.
    pub plateau_min_rel: f64,
}

impl Default for CascadePlan {
    fn default() -> Self {
        CascadePlan {
            train: TrainConfig::default(),
            max_blocks: DEFAULT_MAX_BLOCKS,
            stage_loss_ratio: DEFAULT_STAGE_LOSS_RATIO,
            epoch_cap: DEFAULT_EPOCH_CAP,
            plateau_window: DEFAULT_PLATEAU_WINDOW,
            plateau_min_rel: DEFAULT_PLATEAU_MIN_REL,
        }
    }
}

impl CascadePlan {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.stage_loss_ratio > 0.0 && self.stage_loss_ratio <= 1.0) {
            return Err(Error::arg("stage_loss_ratio must be in (0, 1]"));
        }
        if self.epoch_cap == 0 {
            return Err(Error::arg("epoch_cap must be positive"));
        }
        if self.plateau_window == 0 {
            return Err(Error::arg("plateau_window must be positive"));
        }
        if !(self.plateau_min_rel >= 0.0 && self.plateau_min_rel.is_finite()) {
            return Err(Error::arg("plateau_min_rel must be non-negative and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvolutionPlan {
    pub train: TrainConfig,
    /// Fine-tune epochs after each block conversion.
    pub fine_tune_epochs: usize,
    /// Convert every block first, then fine-tune once.
    pub one_shot: bool,
}

impl Default for EvolutionPlan {
    fn default() -> Self {
        EvolutionPlan {
            train: TrainConfig::default(),
            fine_tune_epochs: DEFAULT_FINE_TUNE_EPOCHS,
            one_shot: false,
        }
    }
}

impl EvolutionPlan {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.fine_tune_epochs == 0 {
            return Err(Error::arg("fine_tune_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Epoch loss reached the ratio target against the previous stage.
    LossThreshold,
    /// Base-stage loss stopped improving over the plateau window.
    Plateau,
    /// The per-stage epoch cap fired before any other rule.
    EpochCap,
    /// The stage ran a fixed epoch budget (evolution fine-tuning).
    Scheduled,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::LossThreshold => "loss_threshold",
            StopReason::Plateau => "plateau",
            StopReason::EpochCap => "epoch_cap",
            StopReason::Scheduled => "scheduled",
        };
        f.write_str(s)
    }
}

impl FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_threshold" => Ok(StopReason::LossThreshold),
            "plateau" => Ok(StopReason::Plateau),
            "epoch_cap" => Ok(StopReason::EpochCap),
            "scheduled" => Ok(StopReason::Scheduled),
            other => Err(Error::arg(format!("unknown stop reason '{other}'"))),
        }
    }
}

/// One completed growth or fine-tune stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub topology_id: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub reason: StopReason,
    pub checkpoint: Option<String>,
}

impl StageRecord {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.17e}\t{}\t{}",
            self.stage,
            self.topology_id,
            self.epochs,
            self.final_loss,
            self.reason,
            self.checkpoint.as_deref().unwrap_or("-")
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                "history",
                format!("expected 6 tab-separated fields, found {}", fields.len()),
            ));
        }
        let bad = |what: &str| Error::format("history", format!("bad {what} in '{line}'"));
        Ok(StageRecord {
            stage: fields[0].parse().map_err(|_| bad("stage"))?,
            topology_id: fields[1].to_string(),
            epochs: fields[2].parse().map_err(|_| bad("epochs"))?,
            final_loss: fields[3].parse().map_err(|_| bad("final_loss"))?,
            reason: fields[4].parse()?,
            checkpoint: match fields[5] {
                "-" => None,
                other => Some(other.to_string()),
            },
        })
    }
}

const HISTORY_HEADER: &str = "stage\ttopology\tepochs\tfinal_loss\treason\tcheckpoint";

pub fn save_history(path: impl AsRef<Path>, records: &[StageRecord]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_history(path: impl AsRef<Path>) -> Result<Vec<StageRecord>> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HISTORY_HEADER => {}
        _ => return Err(Error::format("history", "missing header line")),
    }
    lines.filter(|l| !l.trim().is_empty()).map(StageRecord::from_line).collect()
}

/// Final network plus the per-stage record of how it got there.
pub struct TrainedOutcome {
    pub network: Network<f32>,
    pub history: Vec<StageRecord>,
}

/// Degrade each clean image under each model and cut patch pairs. Noise for
/// image i under model m comes from stream (Noise, pair_index(i, m)), so
/// adding images or models never perturbs existing draws.
pub fn prepare_training_data(
    images: &[(String, Tensor<f32>)],
    models: &[NoiseModel],
    seed: u64,
    stride: usize,
    jitter: usize,
) -> Result<Vec<PatchPair>> {
    if images.is_empty() {
        return Err(Error::arg("no training images"));
    }
    if models.is_empty() {
        return Err(Error::arg("no degradation models"));
    }
    let mut pairs = Vec::new();
    for (i, (name, clean)) in images.iter().enumerate() {
        for (m, model) in models.iter().enumerate() {
            let idx = pair_index(i, m);
            let mut noise_rng = stream_rng(seed, StreamRole::Noise, idx);
            let degraded = degrade(clean, model, &mut noise_rng)?;
            let jit = if jitter > 0 {
                Some(stream_rng(seed, StreamRole::Jitter, idx))
            } else {
                None
            };
            let mut jit = jit;
            pairs.extend(extract_patch_pairs(
                clean,
                &degraded,
                name,
                m,
                stride,
                jit.as_mut().map(|rng| (jitter, &mut *rng)),
            )?);
        }
    }
    if pairs.is_empty() {
        return Err(Error::arg(
            "no patches extracted; every image is smaller than one window",
        ));
    }
    Ok(pairs)
}

/// One pass over `pairs` in an order drawn from `shuffle_rng`. Returns the
/// sample-weighted mean loss across the epoch.
pub fn train_epoch(
    net: &mut Network<f32>,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
    optimizer: &mut Optimizer<f32>,
    shuffle_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    cfg.validate()?;
    let mut loss_sum = 0.0f64;
    let mut samples = 0usize;
    for batch in epoch_batches(pairs, cfg.batch_size, shuffle_rng)? {
        let (pred, tape) = net.forward_training(&batch.noisy)?;
        let (value, grad_pred) = evaluate_loss(&cfg.loss, &pred, &batch.clean)?;
        let (grads, _) = net.backward(&tape, &grad_pred)?;
        {
            let slices = grads.slices();
            let mut params = net.param_slices_mut();
            optimizer.step(&mut params, &slices)?;
        }
        let b = batch.indices.len();
        loss_sum += value.total * b as f64;
        samples += b;
    }
    Ok(loss_sum / samples as f64)
}

enum StageRule {
    /// Stop when relative improvement over `window` epochs falls below
    /// `min_rel`, or at `cap` epochs.
    Plateau { window: usize, min_rel: f64, cap: usize },
    /// Stop at loss <= target, or at `cap` epochs.
    Threshold { target: f64, cap: usize },
    /// Run exactly `epochs` epochs.
    Fixed { epochs: usize },
}

struct StageResult {
    epochs: usize,
    final_loss: f64,
    reason: StopReason,
}

fn run_stage(
    net: &mut Network<f32>,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
    rule: &StageRule,
    shuffle_base: usize,
) -> Result<StageResult> {
    let mut optimizer = cfg.optimizer();
    let mut losses: Vec<f64> = Vec::new();
    loop {
        let epoch = losses.len();
        let cap_reached = match *rule {
            StageRule::Plateau { cap, .. } | StageRule::Threshold { cap, .. } => epoch >= cap,
            StageRule::Fixed { epochs } => epoch >= epochs,
        };
        if cap_reached {
            let reason = match *rule {
                StageRule::Fixed { .. } => StopReason::Scheduled,
                _ => StopReason::EpochCap,
            };
            return Ok(StageResult {
                epochs: losses.len(),
                final_loss: *losses.last().unwrap_or(&f64::INFINITY),
                reason,
            });
        }

        let mut shuffle = stream_rng(cfg.seed, StreamRole::Shuffle, pair_index(shuffle_base, epoch));
        let loss = train_epoch(net, pairs, cfg, &mut optimizer, &mut shuffle)?;
        log::debug!("stage base {shuffle_base} epoch {epoch}: loss {loss:.6e}");
        losses.push(loss);

        match *rule {
            StageRule::Plateau { window, min_rel, .. } => {
                if losses.len() > window {
                    let before = losses[losses.len() - 1 - window];
                    let rel = (before - loss) / before.max(f64::MIN_POSITIVE);
                    if rel < min_rel {
                        return Ok(StageResult {
                            epochs: losses.len(),
                            final_loss: loss,
                            reason: StopReason::Plateau,
                        });
                    }
                }
            }
            StageRule::Threshold { target, .. } => {
                if loss <= target {
                    return Ok(StageResult {
                        epochs: losses.len(),
                        final_loss: loss,
                        reason: StopReason::LossThreshold,
                    });
                }
            }
            StageRule::Fixed { .. } => {}
        }
    }
}

/// Tail index of the output-nearest block that is still standard. Already
/// converted blocks keep their positions, so this walks past them.
fn standard_block_nearest_tail(net: &Network<f32>) -> Result<usize> {
    let topo = net.topology();
    let nodes = topo.nodes();
    topo.block_indices()
        .iter()
        .rev()
        .position(|&i| matches!(nodes[i].kind, crate::topology::NodeKind::ResBlock { .. }))
        .ok_or_else(|| Error::topology("no standard residual blocks left to evolve"))
}

fn stage_checkpoint(
    dir: Option<&Path>,
    net: &Network<f32>,
    meta: &CheckpointMeta,
    stage: usize,
) -> Result<Option<String>> {
    let Some(dir) = dir else { return Ok(None) };
    let name = format!("stage{:02}_{}.dnrf", stage, net.topology().id());
    let path: PathBuf = dir.join(&name);
    save_checkpoint(&path, net, meta)?;
    Ok(Some(name))
}

fn meta_for(cfg: &TrainConfig, history: &[StageRecord]) -> CheckpointMeta {
    CheckpointMeta {
        seed: Some(cfg.seed),
        optimizer: Some(cfg.optimizer.to_string()),
        loss: Some(cfg.loss.label()),
        stages: history.to_vec(),
    }
}

/// Cascade training from scratch: base stage to plateau, then one stage per
/// inserted block. Stage checkpoints land in `stage_dir` when given.
pub fn run_cascade(
    plan: &CascadePlan,
    pairs: &[PatchPair],
    stage_dir: Option<&Path>,
) -> Result<TrainedOutcome> {
    plan.validate()?;
    let cfg = &plan.train;
    let mut history: Vec<StageRecord> = Vec::new();

    let mut init = stream_rng(cfg.seed, StreamRole::WeightInit, 0);
    let mut net = Network::<f32>::build_base(&mut init);
    log::info!("cascade stage 0: training base network {}", net.topology().id());
    let rule = StageRule::Plateau {
        window: plan.plateau_window,
        min_rel: plan.plateau_min_rel,
        cap: plan.epoch_cap,
    };
    let result = run_stage(&mut net, pairs, cfg, &rule, 0)?;
    let mut prev_loss = result.final_loss;
    history.push(StageRecord {
        stage: 0,
        topology_id: net.topology().id(),
        epochs: result.epochs,
        final_loss: result.final_loss,
        reason: result.reason,
        checkpoint: None,
    });
    history[0].checkpoint = stage_checkpoint(stage_dir, &net, &meta_for(cfg, &history), 0)?;

    for stage in 1..=plan.max_blocks {
        let mut insert_rng = stream_rng(cfg.seed, StreamRole::WeightInit, stage as u64);
        net = net.insert_resblock(&mut insert_rng)?;
        log::info!(
            "cascade stage {stage}: inserted block, now {}; target loss {:.6e}",
            net.topology().id(),
            prev_loss * plan.stage_loss_ratio
        );
        let rule = StageRule::Threshold {
            target: prev_loss * plan.stage_loss_ratio,
            cap: plan.epoch_cap,
        };
        let result = run_stage(&mut net, pairs, cfg, &rule, stage)?;
        prev_loss = result.final_loss;
        history.push(StageRecord {
            stage,
            topology_id: net.topology().id(),
            epochs: result.epochs,
            final_loss: result.final_loss,
            reason: result.reason,
            checkpoint: None,
        });
        let idx = history.len() - 1;
        history[idx].checkpoint = stage_checkpoint(stage_dir, &net, &meta_for(cfg, &history), stage)?;
    }

    Ok(TrainedOutcome { network: net, history })
}

/// Depthwise evolution of a trained network. Incremental mode converts one
/// block per stage, tail first, fine-tuning for `fine_tune_epochs` after
/// each; one-shot mode converts everything and fine-tunes once.
pub fn run_evolution(
    start: &Network<f32>,
    plan: &EvolutionPlan,
    pairs: &[PatchPair],
    stage_dir: Option<&Path>,
) -> Result<TrainedOutcome> {
    plan.validate()?;
    let cfg = &plan.train;
    let blocks = start.topology().block_count() - start.topology().ds_block_count();
    if blocks == 0 {
        return Err(Error::topology("no standard residual blocks left to evolve"));
    }
    let mut history: Vec<StageRecord> = Vec::new();
    let mut net = start.clone();
    let rule = StageRule::Fixed { epochs: plan.fine_tune_epochs };

    if plan.one_shot {
        for i in 0..blocks {
            let mut rng =
                stream_rng(cfg.seed, StreamRole::WeightInit, (EVOLUTION_STREAM_BASE + i) as u64);
            let target = standard_block_nearest_tail(&net)?;
            net = net.evolve_block(target, &mut rng)?;
        }
        log::info!("one-shot evolution: all {blocks} blocks converted, fine-tuning once");
        let result = run_stage(&mut net, pairs, cfg, &rule, EVOLUTION_STREAM_BASE)?;
        history.push(StageRecord {
            stage: 0,
            topology_id: net.topology().id(),
            epochs: result.epochs,
            final_loss: result.final_loss,
            reason: result.reason,
            checkpoint: None,
        });
        history[0].checkpoint = stage_checkpoint(stage_dir, &net, &meta_for(cfg, &history), 0)?;
        return Ok(TrainedOutcome { network: net, history });
    }

    for stage in 0..blocks {
        let mut rng =
            stream_rng(cfg.seed, StreamRole::WeightInit, (EVOLUTION_STREAM_BASE + stage) as u64);
        let target = standard_block_nearest_tail(&net)?;
        net = net.evolve_block(target, &mut rng)?;
        log::info!(
            "evolution stage {stage}: converted tail block, now {}",
            net.topology().id()
        );
        let result = run_stage(&mut net, pairs, cfg, &rule, EVOLUTION_STREAM_BASE + stage)?;
        history.push(StageRecord {
            stage,
            topology_id: net.topology().id(),
            epochs: result.epochs,
            final_loss: result.final_loss,
            reason: result.reason,
            checkpoint: None,
        });
        let idx = history.len() - 1;
        history[idx].checkpoint = stage_checkpoint(stage_dir, &net, &meta_for(cfg, &history), stage)?;
    }

    Ok(TrainedOutcome { network: net, history })
}
