//! Training, evaluation, fine-tuning and data-generation commands.
//!
//! A training run directory holds:
//!
//! - `config.txt`: the resolved run configuration;
//! - `train.log`: one `step=.. loss=.. lr=..[ wer=..]` line per step;
//! - `timing.log`: one `step=.. wall_ms=..` line per step;
//! - `ckpt-NNNNNNNN.avtx`: periodic checkpoints;
//! - `model.avtx`: the final checkpoint.
//!
//! Fine-tuning writes `finetune.log` and `finetune-timing.log` instead.
//!
//! `train.log` and every checkpoint depend only on the configuration, so
//! identical runs produce identical files; wall-clock times go to
//! `timing.log`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use avtx_core::audio::{features, MelConfig};
use avtx_core::config::KeyValues;
use avtx_core::training::{
    evaluate, finetune, make_finetune_task, train, Condition, LogRecord, Prepared, SyntheticAvTask, TaskSpec, TrainHooks,
    TrainState,
};
use avtx_core::Scalar;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{read_wav, write_tensor, write_video, write_wav};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train.log";
pub const TIMING_FILE: &str = "timing.log";
pub const MODEL_FILE: &str = "model.avtx";

/// The synthetic task of `cfg`, rendered at the frame size the model expects.
pub fn make_task(cfg: &RunConfig) -> Result<SyntheticAvTask> {
    let mut spec = TaskSpec::new(cfg.task.classes, cfg.task.samples);
    let frame = cfg.model.video_frame();
    if frame > 0 {
        spec.frame = frame;
    }
    let task = SyntheticAvTask::new(cfg.task.seed, spec)?;
    Ok(if cfg.task.video_only { task.video_only() } else { task })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    Ok(Prepared::new(make_task(cfg)?, MelConfig::default())?)
}

/// The fine-tuning task, sharing the primary task's lexicon.
pub fn prepare_finetune(cfg: &RunConfig, primary: &Prepared) -> Result<Prepared> {
    let task = make_finetune_task(&primary.task, cfg.finetune.task_seed, cfg.finetune.samples)?;
    let task = if primary.task.video_only { task.video_only() } else { task };
    Ok(Prepared::new(task, MelConfig::default())?)
}

/// The deterministic part of a log record.
pub fn log_line(rec: &LogRecord) -> String {
    let mut s = format!("step={} loss={:?} lr={:?}", rec.step, rec.loss, rec.lr);
    if let Some(w) = rec.wer {
        s.push_str(&format!(" wer={w:?}"));
    }
    s
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn log_file(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(Error::io(path))?;
    Ok(BufWriter::new(f))
}

/// Hooks that log to files and write checkpoints into a run directory.
struct RunHooks {
    dir: PathBuf,
    kv: KeyValues,
    log: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
    last_checkpoint: Option<u64>,
    checkpoints: bool,
    error: Option<Error>,
}

impl RunHooks {
    fn new(dir: &Path, kv: KeyValues, logs: [&str; 2], append: bool, checkpoints: bool) -> Result<Self> {
        let log = log_file(&dir.join(logs[0]), append)?;
        let timing = log_file(&dir.join(logs[1]), append)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            kv,
            log,
            timing,
            start: Instant::now(),
            last_checkpoint: None,
            checkpoints,
            error: None,
        })
    }

    fn keep<T>(&mut self, r: Result<T>) -> avtx_core::Result<()> {
        match r {
            Ok(_) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(avtx_core::Error::Input(msg))
            }
        }
    }

    /// The std error behind a failed hook, if any.
    fn finish<T>(mut self, r: avtx_core::Result<T>) -> Result<T> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let v = r?;
        self.log.flush().map_err(Error::io(&self.dir))?;
        self.timing.flush().map_err(Error::io(&self.dir))?;
        Ok(v)
    }
}

impl TrainHooks for RunHooks {
    fn now_ms(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn on_record(&mut self, rec: &LogRecord) -> avtx_core::Result<()> {
        let a = writeln!(self.log, "{}", log_line(rec));
        let b = writeln!(self.timing, "step={} wall_ms={:.3}", rec.step, rec.wall_ms);
        let r = a.and(b).map_err(Error::io(&self.dir));
        self.keep(r)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> avtx_core::Result<()> {
        if !self.checkpoints || self.last_checkpoint == Some(state.step) {
            return Ok(());
        }
        self.last_checkpoint = Some(state.step);
        let path = self.dir.join(format!("ckpt-{:08}.avtx", state.step));
        let r = save_checkpoint(&path, state, &self.kv);
        self.keep(r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_wer: Scalar,
    pub stopped_early: bool,
    pub model: PathBuf,
}

/// Trains from scratch, or from `resume` when given, writing the run
/// directory `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    create_dir(out)?;
    let kv = cfg.to_kv();
    let data = prepare(cfg)?;
    let mut state = match resume {
        Some(p) => {
            let (state, saved) = load_checkpoint(&require(p)?)?;
            if RunConfig::from_kv(&saved)?.model != cfg.model {
                return Err(Error::Usage(format!("{} was trained with a different model", p.display())));
            }
            state
        }
        None => {
            let mut s = TrainState::new(&cfg.model, cfg.seed)?;
            s.fit_normalizer(&data)?;
            s
        }
    };
    write_text(&out.join(CONFIG_FILE), &kv.render())?;
    let mut hooks = RunHooks::new(out, kv.clone(), [LOG_FILE, TIMING_FILE], resume.is_some(), true)?;
    let r = train(&mut state, &data, &cfg.train, &mut hooks);
    let report = hooks.finish(r)?;
    let model = out.join(MODEL_FILE);
    save_checkpoint(&model, &state, &kv)?;
    Ok(TrainSummary {
        steps: state.step,
        final_wer: report.final_wer,
        stopped_early: report.stopped_early,
        model,
    })
}

/// A usage error when the checkpoint does not exist.
pub fn require(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Usage(format!("checkpoint {} not found", path.display())))
    }
}

/// One row of the evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    /// WER per [`Condition::GRID`] column.
    pub wer: Vec<Scalar>,
}

/// A WER grid with one column per evaluation condition.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub rows: Vec<EvalRow>,
}

impl EvalGrid {
    pub fn columns() -> Vec<String> {
        Condition::GRID.iter().map(Condition::label).collect()
    }

    /// Header and rows as display strings; text and CSV both use these.
    pub fn cells(&self) -> Vec<Vec<String>> {
        let mut out = vec![std::iter::once("model".to_string()).chain(Self::columns()).collect()];
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            line.extend(r.wer.iter().map(|w| format!("{:.2}", 100.0 * w)));
            out.push(line);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("WER (%) on the synthetic task\n");
        s.push_str(&render_table(&self.cells()));
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.cells())
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_table(cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| cells.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in cells {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            let pad = width[c] - cell.chars().count();
            if c == 0 {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str("  ");
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

pub fn to_csv(cells: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for row in cells {
        w.write_record(row).map_err(|e| Error::Usage(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 cells is UTF-8"))
}

/// Row label of a model: front-end plus the modality it was trained on.
pub fn model_label(cfg: &RunConfig) -> String {
    let fe = cfg.model.front_end.name();
    if cfg.task.video_only {
        format!("{fe} video-only")
    } else {
        fe.to_string()
    }
}

/// Evaluates checkpoints on their own synthetic task under every condition.
pub fn cmd_eval(checkpoints: &[PathBuf]) -> Result<EvalGrid> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("eval needs at least one checkpoint".into()));
    }
    let mut rows = Vec::new();
    for p in checkpoints {
        let (state, kv) = load_checkpoint(&require(p)?)?;
        let cfg = RunConfig::from_kv(&kv)?;
        rows.push(eval_state(&state, &cfg)?);
    }
    Ok(EvalGrid { rows })
}

pub fn eval_state(state: &TrainState, cfg: &RunConfig) -> Result<EvalRow> {
    let data = prepare(cfg)?;
    let wer = Condition::GRID
        .iter()
        .map(|&c| Ok(evaluate(state, &data, c, cfg.seed)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRow {
        name: model_label(cfg),
        wer,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSummary {
    pub primary_wer: (Scalar, Scalar),
    pub finetune_wer: (Scalar, Scalar),
    pub model: PathBuf,
}

/// Fine-tunes a trained checkpoint on a mix of its task and the fine-tuning
/// task, writing `finetune.log` and `model.avtx` into `out`.
pub fn cmd_finetune(checkpoint: &Path, cfg: Option<&RunConfig>, out: &Path) -> Result<FinetuneSummary> {
    let (mut state, kv) = load_checkpoint(&require(checkpoint)?)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => RunConfig::from_kv(&kv)?,
    };
    if cfg.model != state.model.cfg {
        return Err(Error::Usage(format!("{} was trained with a different model", checkpoint.display())));
    }
    create_dir(out)?;
    let kv = cfg.to_kv();
    write_text(&out.join(CONFIG_FILE), &kv.render())?;
    let primary = prepare(&cfg)?;
    let extra = prepare_finetune(&cfg, &primary)?;
    let wer = |s: &TrainState| -> Result<(Scalar, Scalar)> {
        Ok((
            evaluate(s, &primary, Condition::Clean, cfg.seed)?,
            evaluate(s, &extra, Condition::Clean, cfg.seed)?,
        ))
    };
    let before = wer(&state)?;
    let mut hooks = RunHooks::new(out, kv.clone(), ["finetune.log", "finetune-timing.log"], false, false)?;
    let r = finetune(&mut state, &primary, &extra, &cfg.finetune.spec, &cfg.train, &mut hooks);
    hooks.finish(r)?;
    let after = wer(&state)?;
    let model = out.join(MODEL_FILE);
    save_checkpoint(&model, &state, &kv)?;
    Ok(FinetuneSummary {
        primary_wer: (before.0, after.0),
        finetune_wer: (before.1, after.1),
        model,
    })
}

/// Writes the synthetic task of `cfg` as files: `uttNNNN.wav`,
/// `uttNNNN.avtxv`, `transcripts.tsv` and `lexicon.txt`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let task = make_task(cfg)?;
    let mut tsv = String::new();
    for (i, s) in task.samples.iter().enumerate() {
        let id = format!("utt{i:04}");
        write_wav(&out.join(format!("{id}.wav")), &s.audio)?;
        write_video(&out.join(format!("{id}.avtxv")), &s.video)?;
        tsv.push_str(&format!("{id}\t{}\n", s.transcript));
    }
    write_text(&out.join("transcripts.tsv"), &tsv)?;
    let lexicon: String = task.lexicon.iter().map(|w| format!("{w}\n")).collect();
    write_text(&out.join("lexicon.txt"), &lexicon)?;
    Ok(task.samples.len())
}

/// Stacked log-mel features of a WAV file, written as a tensor file.
pub fn cmd_features(wav: &Path, out: &Path) -> Result<[usize; 2]> {
    let w = read_wav(wav)?;
    let f = features(&w, &MelConfig::default())?;
    write_tensor(out, &f.data)?;
    Ok([f.data.shape()[0], f.data.shape()[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_csv_share_cells() {
        let g = EvalGrid {
            rows: vec![EvalRow {
                name: "vit".into(),
                wer: vec![0.0, 0.125, 0.5, 1.0 / 3.0, 1.0],
            }],
        };
        let csv = g.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "model,∞dB,20dB,10dB,0dB,overlap");
        assert_eq!(csv.lines().nth(1).unwrap(), "vit,0.00,12.50,50.00,33.33,100.00");
        let text = g.to_text();
        for cell in ["0.00", "12.50", "50.00", "33.33", "100.00", "∞dB", "overlap"] {
            assert!(text.contains(cell), "{text}");
        }
    }

    #[test]
    fn log_lines_leave_out_the_clock() {
        let rec = LogRecord {
            step: 3,
            loss: 1.5,
            lr: 1e-3,
            wall_ms: 12.0,
            wer: Some(0.25),
        };
        assert_eq!(log_line(&rec), "step=3 loss=1.5 lr=0.001 wer=0.25");
    }

    #[test]
    fn missing_checkpoint_is_a_usage_error() {
        let e = cmd_eval(&[PathBuf::from("/nonexistent/model.avtx")]).unwrap_err();
        assert_eq!(e.kind(), "usage");
    }
}
