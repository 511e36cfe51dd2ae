//! Run configuration: model, training, task and fine-tuning settings in one
//! flat `key = value` file.
//!
//! | key | meaning | desk default |
//! |---|---|---|
//! | `preset` | `desk` or `paper`; supplies every default below | `desk` |
//! | `model.front_end` | `vgg21d`, `vit` or `audio-only` | `vit` |
//! | `vgg.*`, `vit.*`, `video.*`, `encoder.*`, `decoder.*`, `vocab.*` | model overrides | preset |
//! | `train.*` | training loop overrides | preset |
//! | `seed` | parameter initialization; also the default `train.seed` | 0 |
//! | `task.seed`, `task.classes`, `task.samples` | synthetic task | 1, 8, 32 |
//! | `task.video_only` | silence the audio channel | `false` |
//! | `finetune.steps`, `finetune.batch`, `finetune.lr_start`, `finetune.lr_end`, `finetune.mix` | fine-tuning recipe | preset |
//! | `finetune.task_seed`, `finetune.samples` | fine-tuning task | 2, 32 |
//!
//! Lines starting with `#` are comments. Without `preset`, every model key
//! must be present.

use std::path::Path;

use avtx_core::config::{FrontEndKind, KeyValues, ModelConfig, Preset};
use avtx_core::training::{FinetuneSpec, TrainConfig};

use crate::error::{Error, Result};

/// The synthetic task a run trains and evaluates on.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub video_only: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            classes: 8,
            samples: 32,
            video_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub spec: FinetuneSpec,
    pub task_seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

fn parse<T: std::str::FromStr>(kv: &KeyValues, key: &str, field: &mut T) -> Result<()> {
    if let Some(v) = kv.parse_value(key)? {
        *field = v;
    }
    Ok(())
}

impl RunConfig {
    pub fn preset(preset: Preset, front_end: FrontEndKind) -> Self {
        let (train, spec) = match preset {
            Preset::Paper => (TrainConfig::paper(), FinetuneSpec::paper()),
            Preset::Desk => (TrainConfig::desk(), FinetuneSpec::desk()),
        };
        Self {
            preset: Some(preset),
            model: ModelConfig::preset(preset, front_end),
            train,
            task: TaskConfig::default(),
            finetune: FinetuneConfig {
                spec,
                task_seed: 2,
                samples: 32,
            },
            seed: 0,
        }
    }

    pub fn desk(front_end: FrontEndKind) -> Self {
        Self::preset(Preset::Desk, front_end)
    }

    /// Sets the initialization and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let preset = kv.get("preset").map(Preset::parse).transpose()?;
        let model = ModelConfig::from_kv(kv)?;
        let mut cfg = Self {
            model,
            ..Self::preset(preset.unwrap_or(Preset::Desk), FrontEndKind::Vit)
        };
        cfg.preset = preset;
        parse(kv, "seed", &mut cfg.seed)?;
        cfg.train.seed = cfg.seed;
        cfg.train.apply_kv(kv)?;
        parse(kv, "task.seed", &mut cfg.task.seed)?;
        parse(kv, "task.classes", &mut cfg.task.classes)?;
        parse(kv, "task.samples", &mut cfg.task.samples)?;
        parse(kv, "task.video_only", &mut cfg.task.video_only)?;
        let f = &mut cfg.finetune;
        parse(kv, "finetune.steps", &mut f.spec.steps)?;
        parse(kv, "finetune.batch", &mut f.spec.batch)?;
        parse(kv, "finetune.lr_start", &mut f.spec.lr_start)?;
        parse(kv, "finetune.lr_end", &mut f.spec.lr_end)?;
        parse(kv, "finetune.mix", &mut f.spec.mix)?;
        parse(kv, "finetune.task_seed", &mut f.task_seed)?;
        parse(kv, "finetune.samples", &mut f.samples)?;
        f.spec.validate()?;
        if cfg.task.video_only && cfg.model.front_end == FrontEndKind::AudioOnly {
            return Err(Error::Usage("a video-only task needs a video front-end".into()));
        }
        if cfg.task.samples == 0 || cfg.finetune.samples == 0 {
            return Err(Error::Usage("task sample counts must be positive".into()));
        }
        Ok(cfg)
    }

    /// Every key, so the text alone reproduces the run.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        if let Some(p) = self.preset {
            kv.set("preset", p.name());
        }
        kv.extend(&self.train.to_kv());
        kv.set("seed", self.seed);
        kv.set("task.seed", self.task.seed);
        kv.set("task.classes", self.task.classes);
        kv.set("task.samples", self.task.samples);
        kv.set("task.video_only", self.task.video_only);
        let f = &self.finetune;
        kv.set("finetune.steps", f.spec.steps);
        kv.set("finetune.batch", f.spec.batch);
        kv.set("finetune.lr_start", f.spec.lr_start);
        kv.set("finetune.lr_end", f.spec.lr_end);
        kv.set("finetune.mix", f.spec.mix);
        kv.set("finetune.task_seed", f.task_seed);
        kv.set("finetune.samples", f.samples);
        kv
    }

    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(KeyValues::parse(&text)?)
    }
}

/// A preset name from the command line.
pub fn parse_preset(s: &str) -> Result<Preset> {
    Preset::parse(s).map_err(|e| Error::Usage(e.to_string()))
}

/// A front-end name from the command line.
pub fn parse_front_end(s: &str) -> Result<FrontEndKind> {
    FrontEndKind::parse(s).map_err(|e| Error::Usage(e.to_string()))
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub front_end: Option<String>,
    pub seed: Option<u64>,
}

impl Overrides {
    /// Builds the run configuration from an optional file plus overrides.
    /// Without a file or a preset the desk preset is used.
    pub fn resolve(&self, file: Option<&Path>) -> Result<RunConfig> {
        let mut kv = match file {
            Some(p) => RunConfig::load(p)?,
            None => KeyValues::new(),
        };
        if let Some(p) = &self.preset {
            kv.set("preset", parse_preset(p)?.name());
        }
        if file.is_none() && !kv.contains("preset") {
            kv.set("preset", Preset::Desk.name());
        }
        if let Some(f) = &self.front_end {
            kv.set("model.front_end", parse_front_end(f)?.name());
        }
        if let Some(s) = self.seed {
            kv.set("seed", s);
            kv.set("train.seed", s);
        }
        RunConfig::from_kv(&kv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            for fe in FrontEndKind::ALL {
                let c = RunConfig::preset(p, fe).with_seed(9);
                let kv = KeyValues::parse(&c.to_kv().render()).unwrap();
                assert_eq!(RunConfig::from_kv(&kv).unwrap(), c);
            }
        }
    }

    #[test]
    fn preset_keys_fill_the_rest() {
        let kv = KeyValues::parse("preset = desk\nmodel.front_end = vgg21d\ntrain.steps = 7\ntask.video_only = true\n").unwrap();
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(c.model, ModelConfig::desk(FrontEndKind::Vgg21d));
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.batch, TrainConfig::desk().batch);
        assert!(c.task.video_only);
        let kv = KeyValues::parse("preset = desk\nmodel.front_end = audio-only\ntask.video_only = true\n").unwrap();
        assert_eq!(RunConfig::from_kv(&kv).unwrap_err().kind(), "usage");
    }

    #[test]
    fn missing_model_keys_are_listed() {
        let kv = KeyValues::parse("train.steps = 7\n").unwrap();
        let e = RunConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(e.contains("encoder.layers"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            preset: None,
            front_end: Some("audio-only".into()),
            seed: Some(4),
        };
        let c = o.resolve(None).unwrap();
        assert_eq!(c.preset, Some(Preset::Desk));
        assert_eq!(c.model.front_end, FrontEndKind::AudioOnly);
        assert_eq!((c.seed, c.train.seed), (4, 4));
        let bad = Overrides {
            preset: Some("huge".into()),
            ..Overrides::default()
        };
        assert_eq!(bad.resolve(None).unwrap_err().kind(), "usage");
    }
}
