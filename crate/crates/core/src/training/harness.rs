//! Data preparation, the training and fine-tuning loops, and evaluation
//! under the noise conditions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::schedule::{FinetuneSpec, LrSchedule};
use super::synthetic::SyntheticAvTask;
use crate::audio::{features, mix_at_snr, overlap_utterance, MelConfig, Waveform};
use crate::avmodel::wer::word_errors;
use crate::avmodel::{AvModel, Batch};
use crate::config::{KeyValues, ModelConfig};
use crate::error::bail;
use crate::tensorops::{Graph, ParamStore, Tensor};
use crate::video::{normalize_rgb, RawVideo, Rate};
use crate::{Error, Result, Scalar};

/// Evaluation condition of the WER grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Clean,
    /// Babble from a competing utterance at this SNR in dB.
    Snr(Scalar),
    /// A short distractor utterance overlapping the start or the end.
    Overlap,
}

impl Condition {
    /// Columns of the evaluation grid.
    pub const GRID: [Condition; 5] = [
        Condition::Clean,
        Condition::Snr(20.0),
        Condition::Snr(10.0),
        Condition::Snr(0.0),
        Condition::Overlap,
    ];

    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "∞dB".into(),
            Condition::Snr(s) => format!("{s}dB"),
            Condition::Overlap => "overlap".into(),
        }
    }
}

/// Normalized `[steps, H, W, 3]` frames at the acoustic rate.
pub fn video_at_acoustic_rate(raw: &RawVideo, steps: usize) -> Result<Tensor> {
    let clip = normalize_rgb(&raw.resample_nn(Rate::ACOUSTIC)?)?;
    if clip.steps() < steps {
        bail!(Sync, "video covers {} steps, audio needs {steps}", clip.steps());
    }
    clip.frames.slice_first(0, steps)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A task with clean features, frames and label ids computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: SyntheticAvTask,
    pub mel: MelConfig,
    /// `[T, 240]` per utterance.
    pub audio: Vec<Tensor>,
    /// `[T, H, W, 3]` per utterance.
    pub video: Vec<Tensor>,
    pub labels: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn new(task: SyntheticAvTask, mel: MelConfig) -> Result<Self> {
        let steps = task.steps();
        let mut audio = Vec::new();
        let mut video = Vec::new();
        let mut labels = Vec::new();
        for s in &task.samples {
            let a = features(&s.audio, &mel)?;
            if a.steps() != steps {
                bail!(Sync, "audio gives {} steps, layout has {steps}", a.steps());
            }
            audio.push(a.data);
            video.push(video_at_acoustic_rate(&s.video, steps)?);
            labels.push(task.vocab.encode(&s.transcript)?);
        }
        Ok(Self {
            task,
            mel,
            audio,
            video,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Audio of utterance `i` under `cond`; `rng` draws the noise. A
    /// video-only task has no audio channel for noise to enter, so its
    /// (silent) audio is returned unchanged.
    pub fn corrupted_audio(&self, i: usize, cond: Condition, rng: &mut impl Rng) -> Result<Waveform> {
        let clean = &self.task.samples[i].audio;
        if self.task.video_only {
            return Ok(clean.clone());
        }
        match cond {
            Condition::Clean => Ok(clean.clone()),
            Condition::Snr(s) => mix_at_snr(clean, &self.task.babble(rng), s),
            Condition::Overlap => {
                let at_start = rng.gen_bool(0.5);
                overlap_utterance(clean, &self.task.distractor(rng), at_start)
            }
        }
    }

    /// Assembles a batch; `audio` overrides the clean features per slot.
    pub fn batch(&self, ids: &[usize], audio: Option<Vec<Tensor>>, with_video: bool) -> Result<Batch> {
        let steps = self.task.steps();
        let audio = match audio {
            Some(a) => a,
            None => ids.iter().map(|&i| self.audio[i].clone()).collect(),
        };
        let refs: Vec<&Tensor> = audio.iter().collect();
        let a = Tensor::stack_first(&refs)?.reshape(&[ids.len(), steps, crate::audio::FEATURE_DIM])?;
        let video = if with_video {
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &self.video[i]).collect();
            let mut shape = self.video[ids[0]].shape().to_vec();
            shape.insert(0, ids.len());
            Some(Tensor::stack_first(&refs)?.reshape(&shape)?)
        } else {
            None
        };
        Ok(Batch {
            audio: a,
            video,
            labels: ids.iter().map(|&i| self.labels[i].clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<Scalar>,
    pub seed: u64,
    /// Training-set WER is measured every this many steps (0 = only at the
    /// end).
    pub eval_every: u64,
    /// Stop once training WER falls below this.
    pub target_wer: Option<Scalar>,
    /// Probability that an utterance is mixed with babble during training.
    pub augment_prob: Scalar,
    /// SNR range in dB of the training babble.
    pub augment_snr: (Scalar, Scalar),
    /// Checkpoint hook cadence in steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            steps: 300_000,
            batch: 1024,
            schedule: LrSchedule::paper(),
            clip_norm: None,
            seed: 0,
            eval_every: 0,
            target_wer: None,
            augment_prob: 0.5,
            augment_snr: (0.0, 20.0),
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            steps: 2_000,
            batch: 8,
            schedule: LrSchedule::desk(),
            clip_norm: Some(1.0),
            seed: 0,
            eval_every: 50,
            target_wer: Some(0.05),
            augment_prob: 0.5,
            augment_snr: (0.0, 20.0),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.augment_prob) || self.augment_snr.0 > self.augment_snr.1 {
            bail!(Config, "invalid augmentation settings");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.steps", self.steps);
        kv.set("train.batch", self.batch);
        kv.set("train.base_lr", self.schedule.base_lr);
        kv.set("train.warmup_steps", self.schedule.warmup_steps);
        kv.set("train.constant_until", self.schedule.constant_until);
        kv.set("train.anneal_until", self.schedule.anneal_until);
        kv.set("train.final_lr", self.schedule.final_lr);
        kv.set("train.clip_norm", self.clip_norm.map_or(String::from("off"), |c| format!("{c}")));
        kv.set("train.seed", self.seed);
        kv.set("train.eval_every", self.eval_every);
        kv.set("train.target_wer", self.target_wer.map_or(String::from("off"), |c| format!("{c}")));
        kv.set("train.augment_prob", self.augment_prob);
        kv.set("train.augment_snr_min", self.augment_snr.0);
        kv.set("train.augment_snr_max", self.augment_snr.1);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Overrides fields of `self` with the `train.*` keys present in `kv`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        fn opt(kv: &KeyValues, key: &str) -> Result<Option<Option<Scalar>>> {
            match kv.get(key) {
                None => Ok(None),
                Some("off") => Ok(Some(None)),
                Some(_) => Ok(Some(kv.parse_value(key)?)),
            }
        }
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        set!(self.steps, "train.steps");
        set!(self.batch, "train.batch");
        set!(self.schedule.base_lr, "train.base_lr");
        set!(self.schedule.warmup_steps, "train.warmup_steps");
        set!(self.schedule.constant_until, "train.constant_until");
        set!(self.schedule.anneal_until, "train.anneal_until");
        set!(self.schedule.final_lr, "train.final_lr");
        set!(self.seed, "train.seed");
        set!(self.eval_every, "train.eval_every");
        set!(self.augment_prob, "train.augment_prob");
        set!(self.augment_snr.0, "train.augment_snr_min");
        set!(self.augment_snr.1, "train.augment_snr_max");
        set!(self.checkpoint_every, "train.checkpoint_every");
        if let Some(c) = opt(kv, "train.clip_norm")? {
            self.clip_norm = c;
        }
        if let Some(t) = opt(kv, "train.target_wer")? {
            self.target_wer = t;
        }
        self.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: Scalar,
    pub lr: Scalar,
    pub wall_ms: f64,
    /// Training-set WER, on evaluation steps.
    pub wer: Option<Scalar>,
}

impl LogRecord {
    /// `step=.. loss=.. lr=.. wall_ms=..[ wer=..]`.
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} loss={:?} lr={:?} wall_ms={:.3}", self.step, self.loss, self.lr, self.wall_ms);
        if let Some(w) = self.wer {
            s.push_str(&format!(" wer={w:?}"));
        }
        s
    }
}

/// Side effects of a training run: wall clock, logging and checkpoints.
pub trait TrainHooks {
    /// Monotonic milliseconds; the default clock always reads 0.
    fn now_ms(&mut self) -> f64 {
        0.0
    }
    fn on_record(&mut self, _rec: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AvModel,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (model, store) = AvModel::init(cfg, seed)?;
        Ok(Self {
            model,
            store,
            adam: Adam::new(),
            step: 0,
        })
    }

    /// Fits the feature normalization to the clean training audio.
    pub fn fit_normalizer(&mut self, data: &Prepared) -> Result<()> {
        let refs: Vec<&Tensor> = data.audio.iter().collect();
        AvModel::fit_normalizer(&mut self.store, &refs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    pub final_wer: Scalar,
    pub stopped_early: bool,
}

const BATCH_STREAM: u64 = 11;
const MIX_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;

/// Batch `step` of a run: utterance ids and their (possibly noisy) features.
fn draw_batch(data: &Prepared, cfg: &TrainConfig, batch: usize, seed: u64, step: u64) -> Result<(Vec<usize>, Option<Vec<Tensor>>)> {
    let mut rng = stream(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15), BATCH_STREAM);
    let n = data.len();
    let ids: Vec<usize> = if batch <= n {
        index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    };
    if data.task.video_only || cfg.augment_prob == 0.0 {
        return Ok((ids, None));
    }
    let mut any = false;
    let mut audio = Vec::with_capacity(ids.len());
    for &i in &ids {
        if rng.gen_bool(cfg.augment_prob) {
            let snr = rng.gen_range(cfg.augment_snr.0..=cfg.augment_snr.1);
            let w = data.corrupted_audio(i, Condition::Snr(snr), &mut rng)?;
            audio.push(features(&w, &data.mel)?.data);
            any = true;
        } else {
            audio.push(data.audio[i].clone());
        }
    }
    Ok((ids, any.then_some(audio)))
}

/// Forward, backward, clipping and one Adam update; returns the loss.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr: Scalar, clip: Option<Scalar>) -> Result<Scalar> {
    let step = state.step + 1;
    let as_training = |e: Error| match e {
        Error::NonFinite(op) => Error::Training {
            step,
            msg: format!("loss diverged: {op} produced a non-finite value at lr {lr:e}"),
        },
        e => e,
    };
    let (loss, mut grads) = {
        let mut g = Graph::with_params(&state.store, true);
        let l = state.model.loss(&mut g, batch).map_err(as_training)?;
        g.backward(l)?;
        (g.value(l).data()[0], g.param_grads())
    };
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Training {
            step,
            msg: format!("loss diverged (loss {loss}, gradient norm {})", grads.global_norm()),
        });
    }
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    state.adam.step(&mut state.store, &grads, lr)?;
    state.step = step;
    Ok(loss)
}

/// Word error rate of greedy decoding on every utterance of `data` under
/// `cond`, with noise drawn from `seed`.
pub fn evaluate(state: &TrainState, data: &Prepared, cond: Condition, seed: u64) -> Result<Scalar> {
    let mut rng = stream(seed, EVAL_STREAM);
    let (mut edits, mut words) = (0usize, 0usize);
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(8) {
        let audio = match cond {
            Condition::Clean => None,
            _ => Some(
                chunk
                    .iter()
                    .map(|&i| Ok(features(&data.corrupted_audio(i, cond, &mut rng)?, &data.mel)?.data))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let batch = data.batch(chunk, audio, state.model.uses_video())?;
        for (d, &i) in state.model.decode(&state.store, &batch)?.iter().zip(chunk) {
            let hyp = data.task.vocab.decode(&d.ids)?;
            let reference = &data.task.samples[i].transcript;
            edits += word_errors(reference, &hyp);
            words += reference.split_whitespace().count();
        }
    }
    Ok(edits as Scalar / words.max(1) as Scalar)
}

fn checkpoint_due(every: u64, step: u64) -> bool {
    every > 0 && step.is_multiple_of(every)
}

/// Runs `cfg.steps - state.step` more steps (stopping early when the
/// training WER target is met).
pub fn train(state: &mut TrainState, data: &Prepared, cfg: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<TrainReport> {
    cfg.validate()?;
    let video = state.model.uses_video();
    let mut records = Vec::new();
    let mut final_wer = None;
    let mut stopped_early = false;
    while state.step < cfg.steps {
        let t0 = hooks.now_ms();
        let lr = cfg.schedule.lr_at(state.step);
        let (ids, audio) = draw_batch(data, cfg, cfg.batch, cfg.seed, state.step)?;
        let batch = data.batch(&ids, audio, video)?;
        let loss = train_step(state, &batch, lr, cfg.clip_norm)?;
        let mut rec = LogRecord {
            step: state.step,
            loss,
            lr,
            wall_ms: hooks.now_ms() - t0,
            wer: None,
        };
        if checkpoint_due(cfg.eval_every, state.step) || state.step == cfg.steps {
            let w = evaluate(state, data, Condition::Clean, cfg.seed)?;
            rec.wer = Some(w);
            final_wer = Some(w);
            if cfg.target_wer.is_some_and(|t| w < t) {
                stopped_early = state.step < cfg.steps;
            }
        }
        hooks.on_record(&rec)?;
        records.push(rec);
        if checkpoint_due(cfg.checkpoint_every, state.step) {
            hooks.on_checkpoint(state)?;
        }
        if stopped_early {
            break;
        }
    }
    let final_wer = match final_wer {
        Some(w) => w,
        None => evaluate(state, data, Condition::Clean, cfg.seed)?,
    };
    hooks.on_checkpoint(state)?;
    Ok(TrainReport {
        records,
        final_wer,
        stopped_early,
    })
}

/// Whether fine-tuning batch `step` comes from the primary task.
pub fn draws_primary(seed: u64, step: u64, mix: Scalar) -> bool {
    stream(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15), MIX_STREAM).gen_bool(mix)
}

/// Continues training on a seeded per-batch mix of two tasks with the
/// fine-tuning learning-rate decay. `cfg` supplies seed, clipping and
/// augmentation.
pub fn finetune(
    state: &mut TrainState,
    primary: &Prepared,
    extra: &Prepared,
    spec: &FinetuneSpec,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<LogRecord>> {
    spec.validate()?;
    let video = state.model.uses_video();
    let mut records = Vec::new();
    for k in 0..spec.steps {
        let t0 = hooks.now_ms();
        let lr = spec.lr_at(k);
        let data = if draws_primary(cfg.seed, k, spec.mix) { primary } else { extra };
        let (ids, audio) = draw_batch(data, cfg, spec.batch, cfg.seed ^ 0x5eed, k)?;
        let batch = data.batch(&ids, audio, video)?;
        let loss = train_step(state, &batch, lr, cfg.clip_norm)?;
        let rec = LogRecord {
            step: state.step,
            loss,
            lr,
            wall_ms: hooks.now_ms() - t0,
            wer: None,
        };
        hooks.on_record(&rec)?;
        records.push(rec);
    }
    hooks.on_checkpoint(state)?;
    Ok(records)
}
