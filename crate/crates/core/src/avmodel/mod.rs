//! Fusion, the audio-visual encoder and the RNN-T decoder with its loss,
//! greedy decoding and WER scoring.

pub mod decoder;
pub mod encoder;
pub mod model;
pub mod rnnt;
pub mod vocab;
pub mod wer;

pub use decoder::{greedy_decode, Decoded, DecoderConfig, Joint, PredictionNet, Transducer, MAX_SYMBOLS_PER_FRAME};
pub use encoder::{fuse, fuse_concat, split_fused, Encoder, EncoderConfig};
pub use model::{AvModel, Batch, FrontEnd};
pub use rnnt::{rnnt_loss, RnntLattice, RnntObjective};
pub use vocab::{Vocabulary, BLANK};
pub use wer::{corpus_wer, wer};
