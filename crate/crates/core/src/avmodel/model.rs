//! The full audio-visual transducer: video front-end, fusion, encoder,
//! prediction and joint networks.

use alloc::vec;
use alloc::vec::Vec;

use super::decoder::{greedy_decode, Decoded, Joint, NetworkTransducer, PredictionNet};
use super::encoder::{fuse, Encoder};
use super::rnnt::RnntObjective;
use crate::audio::FEATURE_DIM;
use crate::config::{FrontEndKind, ModelConfig};
use crate::conv_frontend::Vgg21d;
use crate::error::bail;
use crate::tensorops::{CostBuilder, CostReport, Graph, Init, ParamBuilder, ParamStore, Tensor, Var};
use crate::video::{extract_tubelets, Rate, VideoClip};
use crate::vit_frontend::Vit;
use crate::{Result, Scalar};

pub const VIDEO_SCOPE: &str = "video";
pub const CMVN_MEAN: &str = "audio.cmvn.mean";
pub const CMVN_INV_STD: &str = "audio.cmvn.inv_std";

#[derive(Clone, Debug)]
pub enum FrontEnd {
    Vgg(Vgg21d),
    Vit(Vit),
    None,
}

/// One training or evaluation batch. All utterances share the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Raw (un-normalized) stacked log-mel features `[B, T, 240]`.
    pub audio: Tensor,
    /// Normalized frames `[B, T, H, W, 3]` at the acoustic rate.
    pub video: Option<Tensor>,
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn max_labels(&self) -> usize {
        self.labels.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct AvModel {
    pub cfg: ModelConfig,
    pub front: FrontEnd,
    pub encoder: Encoder,
    pub pred: PredictionNet,
    pub joint: Joint,
}

impl AvModel {
    /// Declares every parameter in `pb`.
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        pb.buffer(CMVN_MEAN, &[FEATURE_DIM], Init::Zeros);
        pb.buffer(CMVN_INV_STD, &[FEATURE_DIM], Init::Ones);
        let front = match cfg.front_end {
            FrontEndKind::Vgg21d => FrontEnd::Vgg(Vgg21d::new(pb, VIDEO_SCOPE, &cfg.vgg)?),
            FrontEndKind::Vit => FrontEnd::Vit(Vit::new(pb, VIDEO_SCOPE, &cfg.vit)?),
            FrontEndKind::AudioOnly => FrontEnd::None,
        };
        let encoder = Encoder::new(pb, "encoder", cfg.fused_dim(), &cfg.encoder)?;
        let v = cfg.vocab.size();
        let pred = PredictionNet::new(pb, "prediction", v, &cfg.decoder)?;
        let joint = Joint::new(pb, "joint", cfg.encoder.d_model, cfg.decoder.hidden, &cfg.decoder, v);
        Ok(Self {
            cfg: cfg.clone(),
            front,
            encoder,
            pred,
            joint,
        })
    }

    /// Builds the model and initializes its parameters from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut pb = ParamBuilder::new();
        let m = Self::new(&mut pb, cfg)?;
        Ok((m, pb.initialize(seed)))
    }

    pub fn uses_video(&self) -> bool {
        !matches!(self.front, FrontEnd::None)
    }

    /// Per-channel `(x - mean) * inv_std` with the stored statistics.
    pub fn normalize_audio(store: &ParamStore, audio: &Tensor) -> Result<Tensor> {
        let (Some(mean), Some(inv)) = (store.get(CMVN_MEAN), store.get(CMVN_INV_STD)) else {
            bail!(Config, "feature statistics missing from the parameter store");
        };
        if audio.last_dim() != FEATURE_DIM {
            bail!(Dimension, "audio features must have width {FEATURE_DIM}, got {:?}", audio.shape());
        }
        let mut out = audio.clone();
        for row in out.data_mut().chunks_mut(FEATURE_DIM) {
            for ((x, m), s) in row.iter_mut().zip(mean.data()).zip(inv.data()) {
                *x = (*x - m) * s;
            }
        }
        Ok(out)
    }

    /// Sets the normalization statistics from `[.., 240]` feature rows.
    pub fn fit_normalizer(store: &mut ParamStore, features: &[&Tensor]) -> Result<()> {
        let mut sum = vec![0.0 as Scalar; FEATURE_DIM];
        let mut sq = vec![0.0 as Scalar; FEATURE_DIM];
        let mut n = 0usize;
        for f in features {
            for row in f.data().chunks(FEATURE_DIM) {
                for (i, &x) in row.iter().enumerate() {
                    sum[i] += x;
                    sq[i] += x * x;
                }
                n += 1;
            }
        }
        if n == 0 {
            bail!(Input, "no feature rows to fit normalization");
        }
        let nn = n as Scalar;
        let mean: Vec<Scalar> = sum.iter().map(|s| s / nn).collect();
        let inv: Vec<Scalar> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nn - m * m).max(0.0);
                1.0 / crate::scalar::sqrt(var + 1e-6)
            })
            .collect();
        for (name, v) in [(CMVN_MEAN, mean), (CMVN_INV_STD, inv)] {
            match store.get_mut(name) {
                Some(t) => t.data_mut().copy_from_slice(&v),
                None => bail!(Config, "feature statistics missing from the parameter store"),
            }
        }
        Ok(())
    }

    /// The video input of the front-end as a graph leaf: frames for the
    /// VGG, tubelets for the ViT.
    fn video_input(&self, g: &mut Graph, video: &Tensor) -> Result<Var> {
        match &self.front {
            FrontEnd::Vgg(_) => Ok(g.input(video.clone())),
            FrontEnd::Vit(vit) => {
                let s = video.shape();
                if s.len() != 5 {
                    bail!(Dimension, "video batch must be [B, T, H, W, 3], got {s:?}");
                }
                let geom = &vit.cfg.geometry;
                let clips = (0..s[0])
                    .map(|b| {
                        let frames = video.slice_first(b, 1)?.reshape(&s[1..])?;
                        let clip = VideoClip::new(frames, Rate::ACOUSTIC)?;
                        Ok(extract_tubelets(&clip, geom)?.tokens)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = clips.iter().collect();
                let t = Tensor::stack_first(&refs)?.reshape(&[s[0], s[1], geom.tokens(), geom.token_dim()])?;
                Ok(g.input(t))
            }
            FrontEnd::None => bail!(Contract, "audio-only model has no video input"),
        }
    }

    /// Visual features `[B, T, D_v]`.
    pub fn video_features(&self, g: &mut Graph, video: &Tensor) -> Result<Var> {
        let x = self.video_input(g, video)?;
        match &self.front {
            FrontEnd::Vgg(vgg) => vgg.forward(g, x),
            FrontEnd::Vit(vit) => vit.forward(g, x),
            FrontEnd::None => unreachable!(),
        }
    }

    /// Encoder output `[B, T, d_enc]`. The graph must be bound to a store.
    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let Some(store) = g.store() else {
            bail!(Contract, "model graph needs a parameter store");
        };
        let s = batch.audio.shape();
        if s.len() != 3 || s[2] != FEATURE_DIM {
            bail!(Dimension, "audio batch must be [B, T, {FEATURE_DIM}], got {s:?}");
        }
        let audio = Self::normalize_audio(store, &batch.audio)?;
        let a = g.input(audio);
        let fused = match (&self.front, &batch.video) {
            (FrontEnd::None, _) => a,
            (_, None) => bail!(Input, "the model needs video input"),
            (_, Some(video)) => {
                let v = self.video_features(g, video)?;
                g.push_scope("fusion");
                let f = fuse(g, a, v);
                g.pop_scope();
                f?
            }
        };
        self.encoder.forward(g, fused)
    }

    /// Joint log-probabilities `[B, T, U_max + 1, V]`.
    pub fn log_probs(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let enc = self.encode(g, batch)?;
        let pred = self.pred.forward(g, &batch.labels)?;
        self.joint.forward(g, enc, pred)
    }

    /// Mean transducer loss over the batch, as a scalar graph node.
    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let lp = self.log_probs(g, batch)?;
        let obj = RnntObjective::new(batch.labels.clone(), vec![batch.steps(); batch.size()])?;
        g.push_scope("loss");
        let l = g.objective(lp, obj);
        g.pop_scope();
        l
    }

    /// Greedy transcripts (token ids) for every utterance.
    pub fn decode(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<Decoded>> {
        let mut g = Graph::with_params(store, false);
        let enc = self.encode(&mut g, batch)?;
        let enc = g.value(enc).clone();
        (0..batch.size())
            .map(|b| {
                let e = enc.slice_first(b, 1)?;
                let e = e.reshape(&enc.shape()[1..])?;
                let m = NetworkTransducer::new(store, &self.pred, &self.joint, &e)?;
                greedy_decode(&m, batch.steps())
            })
            .collect()
    }

    /// Analytic cost of [`AvModel::video_features`] (empty without video).
    pub fn front_end_cost(&self, batch: usize, steps: usize) -> CostReport {
        match &self.front {
            FrontEnd::Vgg(v) => v.cost(batch, steps),
            FrontEnd::Vit(v) => v.cost(batch, steps),
            FrontEnd::None => CostReport::default(),
        }
    }

    /// Analytic cost of [`AvModel::loss`] on a batch of `batch` utterances
    /// with `steps` frames and `positions = U_max + 1` label positions.
    pub fn cost(&self, batch: usize, steps: usize, positions: usize) -> CostReport {
        let front = self.front_end_cost(batch, steps);
        let mut c = CostBuilder::new();
        self.encoder.cost(&mut c, batch, steps);
        self.pred.cost(&mut c, batch, positions);
        self.joint.cost(&mut c, batch, steps, positions);
        CostReport::merge([front, c.finish()])
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> u64 {
        self.cost(1, 1, 1).params
    }
}
