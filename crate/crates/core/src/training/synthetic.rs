//! Seeded synthetic audio-visual recognition task.
//!
//! Every class is a short written word. An utterance is a fixed layout of
//! silent gaps and word segments on the 30 ms step grid. During a word the
//! audio carries a class-specific tone and the video shows a class-specific
//! color with drifting stripes, so the transcript can be recovered from
//! either stream alone. Video is rendered at 25 fps and brought to the
//! acoustic rate by nearest-neighbor resampling.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{samples_for_steps, Waveform, HOP, SAMPLE_RATE, STACK};
use crate::avmodel::Vocabulary;
use crate::error::bail;
use crate::scalar::{self, Scalar, PI};
use crate::video::{RawVideo, Rate, CHANNELS};
use crate::Result;

/// Most frames a clip may have at the acoustic rate.
pub const MAX_CLIP_STEPS: usize = 512;
/// Rate at which the raw video is rendered.
pub const RAW_FPS: Rate = Rate { num: 25, den: 1 };

const TONE_AMPLITUDE: Scalar = 0.3;
const FLOOR_NOISE: Scalar = 1e-3;
const RAMP_SAMPLES: usize = 80;
const STEP_SAMPLES: usize = HOP * STACK;

/// Step layout shared by every utterance: `gap (word gap)*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub words: usize,
    pub word_steps: usize,
    pub gap_steps: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            words: 2,
            word_steps: 5,
            gap_steps: 1,
        }
    }
}

impl Layout {
    pub fn steps(&self) -> usize {
        self.gap_steps + self.words * (self.word_steps + self.gap_steps)
    }

    /// First step of word `i`.
    pub fn word_start(&self, i: usize) -> usize {
        self.gap_steps + i * (self.word_steps + self.gap_steps)
    }

    /// Word index active at `step`, if any.
    pub fn word_at(&self, step: usize) -> Option<usize> {
        let rel = step.checked_sub(self.gap_steps)?;
        let (i, off) = (rel / (self.word_steps + self.gap_steps), rel % (self.word_steps + self.gap_steps));
        (i < self.words && off < self.word_steps).then_some(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub n_samples: usize,
    /// Square frame size of the rendered video.
    pub frame: usize,
    pub layout: Layout,
}

impl TaskSpec {
    pub fn new(n_classes: usize, n_samples: usize) -> Self {
        Self {
            n_classes,
            n_samples,
            frame: 32,
            layout: Layout::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            bail!(Config, "a task needs at least 2 classes, got {}", self.n_classes);
        }
        if self.layout.words == 0 || self.layout.word_steps == 0 {
            bail!(Config, "utterances need at least one non-empty word");
        }
        if self.layout.steps() > MAX_CLIP_STEPS {
            bail!(Config, "clips are limited to {MAX_CLIP_STEPS} frames");
        }
        if self.frame == 0 {
            bail!(Config, "frame size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub words: Vec<usize>,
    pub transcript: String,
    pub audio: Waveform,
    /// 25 fps RGB24 frames.
    pub video: RawVideo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAvTask {
    pub seed: u64,
    pub spec: TaskSpec,
    pub lexicon: Vec<String>,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
    /// Audio channel removed (lip-reading variant).
    pub video_only: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const WORD_STREAM: u64 = 1;
const LEXICON_STREAM: u64 = 2;
const SIGNAL_STREAM: u64 = 3;

/// Class sequences of the first `n` utterances of the task with this seed.
pub fn draw_words(seed: u64, n_classes: usize, words: usize, n: usize) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, WORD_STREAM);
    (0..n)
        .map(|_| (0..words).map(|_| rng.gen_range(0..n_classes)).collect())
        .collect()
}

/// Distinct 2-3 letter words, one per class.
pub fn make_lexicon(seed: u64, n_classes: usize) -> Vec<String> {
    let mut rng = stream(seed, LEXICON_STREAM);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n_classes);
    while out.len() < n_classes {
        let len = rng.gen_range(2..=3);
        let w: String = (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Tone frequency of a class: log-spaced over 300-6000 Hz.
pub fn class_frequency(class: usize, n_classes: usize) -> Scalar {
    let frac = class as Scalar / (n_classes - 1).max(1) as Scalar;
    300.0 * scalar::powf(20.0, frac)
}

/// Class color in [-1, 1]^3 (fully saturated hue wheel).
pub fn class_color(class: usize, n_classes: usize) -> [Scalar; 3] {
    let h = 6.0 * class as Scalar / n_classes as Scalar;
    let sector = h as usize % 6;
    let f = h - (h as usize) as Scalar;
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [2.0 * r - 1.0, 2.0 * g - 1.0, 2.0 * b - 1.0]
}

/// Clean tone audio for a class sequence on `layout` (no floor noise).
pub fn render_audio(words: &[usize], n_classes: usize, layout: &Layout) -> Waveform {
    let steps = layout.steps();
    let mut s = vec![0.0; samples_for_steps(steps)];
    for (i, &c) in words.iter().enumerate().take(layout.words) {
        let start = layout.word_start(i) * STEP_SAMPLES;
        let len = layout.word_steps * STEP_SAMPLES;
        let f = class_frequency(c, n_classes);
        for j in 0..len {
            let ramp = j.min(len - 1 - j).min(RAMP_SAMPLES) as Scalar / RAMP_SAMPLES as Scalar;
            let env = 0.5 - 0.5 * scalar::cos(PI * ramp);
            let t = (start + j) as Scalar / SAMPLE_RATE as Scalar;
            s[start + j] += TONE_AMPLITUDE * env * scalar::sin(2.0 * PI * f * t);
        }
    }
    Waveform::new(s, SAMPLE_RATE).expect("finite tones")
}

/// Raw frames needed so that resampling to the acoustic rate yields at least
/// `steps` frames.
pub fn raw_frames_for_steps(steps: usize) -> usize {
    (steps * 3).div_ceil(4) + 1
}

fn to_byte(v: Scalar) -> u8 {
    libm::round((v + 1.0) * 127.5).clamp(0.0, 255.0) as u8
}

/// 25 fps video for a class sequence; `rng` supplies the background grain.
pub fn render_video(words: &[usize], n_classes: usize, layout: &Layout, frame: usize, rng: &mut impl Rng) -> RawVideo {
    let n = raw_frames_for_steps(layout.steps());
    let mut px = Vec::with_capacity(n * frame * frame * CHANNELS);
    for i in 0..n {
        // Acoustic step shown by raw frame i: floor((i / 25) / 0.03).
        let step = i * 4 / 3;
        let class = layout.word_at(step).map(|w| words[w]);
        for _y in 0..frame {
            for x in 0..frame {
                match class {
                    Some(c) => {
                        let col = class_color(c, n_classes);
                        let stripe = 0.75 + 0.25 * scalar::sin(2.0 * PI * (x + 2 * i) as Scalar / 8.0);
                        for ch in col {
                            px.push(to_byte(0.8 * ch * stripe));
                        }
                    }
                    None => {
                        for _ in 0..CHANNELS {
                            px.push(to_byte(rng.gen_range(-0.03..0.03)));
                        }
                    }
                }
            }
        }
    }
    RawVideo::new(frame, frame, RAW_FPS, px).expect("whole frames")
}

impl SyntheticAvTask {
    pub fn new(seed: u64, spec: TaskSpec) -> Result<Self> {
        let lexicon = make_lexicon(seed, spec.n_classes);
        Self::with_lexicon(seed, spec, lexicon)
    }

    /// Like [`SyntheticAvTask::new`] but spelling classes with a given
    /// lexicon, so that tasks from different seeds share a vocabulary.
    pub fn with_lexicon(seed: u64, spec: TaskSpec, lexicon: Vec<String>) -> Result<Self> {
        spec.validate()?;
        if lexicon.len() != spec.n_classes {
            bail!(Config, "lexicon has {} words for {} classes", lexicon.len(), spec.n_classes);
        }
        let vocab = Vocabulary::default();
        let all_words = draw_words(seed, spec.n_classes, spec.layout.words, spec.n_samples);
        let mut rng = stream(seed, SIGNAL_STREAM);
        let mut samples = Vec::with_capacity(spec.n_samples);
        for words in all_words {
            let transcript = words.iter().map(|&c| lexicon[c].as_str()).collect::<Vec<_>>().join(" ");
            let mut audio = render_audio(&words, spec.n_classes, &spec.layout).into_samples();
            for s in audio.iter_mut() {
                *s += FLOOR_NOISE * rng.gen_range(-1.0..1.0);
            }
            let video = render_video(&words, spec.n_classes, &spec.layout, spec.frame, &mut rng);
            samples.push(Sample {
                words,
                transcript,
                audio: Waveform::new(audio, SAMPLE_RATE)?,
                video,
            });
        }
        Ok(Self {
            seed,
            spec,
            lexicon,
            vocab,
            samples,
            video_only: false,
        })
    }

    pub fn steps(&self) -> usize {
        self.spec.layout.steps()
    }

    /// Same utterances with the audio channel zeroed.
    pub fn video_only(&self) -> Self {
        let mut t = self.clone();
        for s in &mut t.samples {
            s.audio = Waveform::silence(s.audio.len());
        }
        t.video_only = true;
        t
    }

    /// A competing utterance with the same layout and random words, used as
    /// babble noise.
    pub fn babble(&self, rng: &mut impl Rng) -> Waveform {
        let words: Vec<usize> = (0..self.spec.layout.words).map(|_| rng.gen_range(0..self.spec.n_classes)).collect();
        render_audio(&words, self.spec.n_classes, &self.spec.layout)
    }

    /// A one-word utterance (gap, word, gap), used as the overlapping
    /// distractor.
    pub fn distractor(&self, rng: &mut impl Rng) -> Waveform {
        let layout = Layout {
            words: 1,
            ..self.spec.layout
        };
        let w = rng.gen_range(0..self.spec.n_classes);
        render_audio(&[w], self.spec.n_classes, &layout)
    }
}

/// A shifted domain for fine-tuning: new utterances of three shorter words,
/// spelled with the primary task's lexicon.
pub fn make_finetune_task(primary: &SyntheticAvTask, seed: u64, n_samples: usize) -> Result<SyntheticAvTask> {
    let spec = TaskSpec {
        n_samples,
        layout: Layout {
            words: 3,
            word_steps: 4,
            gap_steps: 1,
        },
        ..primary.spec.clone()
    };
    SyntheticAvTask::with_lexicon(seed, spec, primary.lexicon.clone())
}

/// `make_synthetic_task(seed, n_classes, n_samples)` with 32x32 video and the
/// default layout.
pub fn make_synthetic_task(seed: u64, n_classes: usize, n_samples: usize) -> Result<SyntheticAvTask> {
    SyntheticAvTask::new(seed, TaskSpec::new(n_classes, n_samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_geometry() {
        let l = Layout::default();
        assert_eq!(l.steps(), 13);
        let active: Vec<Option<usize>> = (0..13).map(|s| l.word_at(s)).collect();
        assert_eq!(active[0], None);
        assert_eq!(active[1..6], [Some(0); 5]);
        assert_eq!(active[6], None);
        assert_eq!(active[7..12], [Some(1); 5]);
        assert_eq!(active[12], None);
    }

    #[test]
    fn lexicon_is_distinct() {
        let lex = make_lexicon(3, 20);
        let set: BTreeSet<&String> = lex.iter().collect();
        assert_eq!(set.len(), 20);
        assert!(lex.iter().all(|w| (2..=3).contains(&w.len())));
    }

    #[test]
    fn rejects_single_class() {
        assert!(make_synthetic_task(1, 1, 4).is_err());
    }
}
