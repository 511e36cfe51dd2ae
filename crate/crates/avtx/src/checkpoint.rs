//! Single-file training checkpoints.
//!
//! Layout, little-endian (strings are a `u32` byte length then UTF-8;
//! tensors and arrays as in [`crate::formats`]):
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `AVTXCKPT` |
//! | version | `u32` = 1 |
//! | config | string: the run configuration as `key = value` text |
//! | step | `u64` completed optimizer steps |
//! | entries | `u32` count, then per entry: name string, `u8` trainable flag, tensor |
//! | Adam hyper-parameters | beta1, beta2, eps as `f64`; `u64` update count |
//! | Adam moments | `u32` count, then per entry: name string, first moments, second moments |
//!
//! Entries are written in name order, so equal states give equal files.

use std::path::Path;

use avtx_core::config::{KeyValues, ModelConfig};
use avtx_core::training::{Adam, TrainState};
use avtx_core::avmodel::AvModel;
use avtx_core::tensorops::{ParamBuilder, ParamStore};
use avtx_core::Scalar;

use crate::error::{Error, Result};
use crate::formats::{create, open, version, FORMAT_VERSION};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVTXCKPT";

/// Writes `state` with the echoed configuration text. The file is written
/// next to `path` and renamed into place.
pub fn save_checkpoint(path: &Path, state: &TrainState, config: &KeyValues) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut w = create(&tmp)?;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.string(&config.render())?;
    w.u64(state.step)?;
    w.u32(state.store.len() as u32)?;
    for (name, e) in state.store.iter() {
        w.string(name)?;
        w.u8(u8::from(e.trainable))?;
        w.tensor(&e.value)?;
    }
    let adam = &state.adam;
    w.f64(adam.beta1)?;
    w.f64(adam.beta2)?;
    w.f64(adam.eps)?;
    w.u64(adam.t)?;
    w.u32(adam.moments.len() as u32)?;
    for (name, (m, v)) in &adam.moments {
        w.string(name)?;
        w.scalars(m)?;
        w.scalars(v)?;
    }
    w.finish()?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Reads a checkpoint, rebuilds the model from its configuration and checks
/// that every declared parameter is present with the declared shape.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, KeyValues)> {
    let mut r = open(path)?;
    r.magic(CHECKPOINT_MAGIC)?;
    version(&mut r)?;
    let text = r.string()?;
    let kv = KeyValues::parse(&text)?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(r.corrupt(format!("bad trainable flag {f} for {name}"))),
        };
        let t = r.tensor()?;
        store.insert(name, t, trainable);
    }
    let mut adam = Adam::new();
    adam.beta1 = r.f64()? as Scalar;
    adam.beta2 = r.f64()? as Scalar;
    adam.eps = r.f64()? as Scalar;
    adam.t = r.u64()?;
    let n = r.u32()? as usize;
    for _ in 0..n {
        let name = r.string()?;
        let (m, v) = (r.scalars()?, r.scalars()?);
        adam.moments.insert(name, (m, v));
    }
    let mut pb = ParamBuilder::new();
    let model = AvModel::new(&mut pb, &cfg)?;
    if pb.specs().len() != store.len() {
        return Err(r.corrupt(format!(
            "{} parameters stored, the configured model declares {}",
            store.len(),
            pb.specs().len()
        )));
    }
    for spec in pb.specs() {
        match store.entry(&spec.name) {
            Some(e) if e.value.shape() == spec.shape.as_slice() && e.trainable == spec.trainable => {}
            Some(e) => {
                return Err(r.corrupt(format!(
                    "{} has shape {:?}, the model declares {:?}",
                    spec.name,
                    e.value.shape(),
                    spec.shape
                )))
            }
            None => return Err(r.corrupt(format!("parameter {} is missing", spec.name))),
        }
    }
    r.end()?;
    Ok((
        TrainState {
            model,
            store,
            adam,
            step,
        },
        kv,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use avtx_core::config::FrontEndKind;

    fn state() -> (TrainState, KeyValues) {
        let cfg = ModelConfig::desk(FrontEndKind::Vit);
        let mut s = TrainState::new(&cfg, 3).unwrap();
        s.step = 17;
        s.adam.t = 17;
        for (name, e) in s.store.iter().take(3) {
            let n = e.value.len();
            s.adam
                .moments
                .insert(name.to_string(), ((0..n).map(|i| i as Scalar * 0.1).collect(), vec![1e-9; n]));
        }
        let mut kv = cfg.to_kv();
        kv.set("task.seed", 5);
        (s, kv)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.avtx"), dir.path().join("b.avtx"));
        let (s, kv) = state();
        save_checkpoint(&a, &s, &kv).unwrap();
        let (loaded, kv2) = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.store, s.store);
        assert_eq!(loaded.adam, s.adam);
        assert_eq!(loaded.step, 17);
        assert_eq!(kv2, kv);
        save_checkpoint(&b, &loaded, &kv2).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn config_and_tensors_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.avtx");
        let (s, _) = state();
        let other = ModelConfig::desk(FrontEndKind::Vgg21d).to_kv();
        save_checkpoint(&p, &s, &other).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.avtx");
        let (s, kv) = state();
        save_checkpoint(&p, &s, &kv).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        std::fs::write(&p, &v).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
