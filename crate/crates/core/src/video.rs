//! Video pipeline: nearest-neighbor frame-rate conversion to the acoustic
//! rate, pixel normalization to [-1, 1], and tubelet extraction.
//!
//! A tubelet token for output step `t` covers `depth` frames around `t` and a
//! `patch x patch` spatial cell of a `frame x frame` mouth track. Tokens are
//! numbered row-major over the spatial grid (`gy * grid + gx`) and flattened
//! with `h` fastest, then `w`, then time, then channel slowest.

use alloc::vec::Vec;

use crate::error::bail;
use crate::scalar::Scalar;
use crate::tensorops::Tensor;
use crate::Result;

pub const CHANNELS: usize = 3;

/// A frame rate as an exact fraction `num / den` frames per second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
}

impl Rate {
    /// The acoustic feature rate, one step every 30 ms.
    pub const ACOUSTIC: Rate = Rate { num: 100, den: 3 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            bail!(Input, "frame rate {num}/{den} must be positive");
        }
        Ok(Self { num, den })
    }

    pub fn fps(num: u64) -> Self {
        Self { num, den: 1 }
    }

    pub fn hz(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Where an output step's `depth`-frame window sits relative to the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TubeletWindow {
    /// `[t - (depth/2 - 1), t + depth/2]`, i.e. `[t-3, t+4]` for depth 8.
    Centered,
    /// `[t - depth + 1, t]`.
    Causal,
}

impl TubeletWindow {
    pub fn name(&self) -> &'static str {
        match self {
            TubeletWindow::Centered => "centered",
            TubeletWindow::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Self::Centered),
            "causal" => Ok(Self::Causal),
            _ => bail!(Config, "unknown tubelet window {s:?} (centered | causal)"),
        }
    }
}

/// Frame and tubelet geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoGeometry {
    /// Square frame side in pixels.
    pub frame: usize,
    /// Square tubelet side in pixels.
    pub patch: usize,
    /// Frames per tubelet.
    pub depth: usize,
    pub window: TubeletWindow,
}

impl VideoGeometry {
    /// 128x128 frames, 32x32x8 tubelets.
    pub fn paper() -> Self {
        Self {
            frame: 128,
            patch: 32,
            depth: 8,
            window: TubeletWindow::Centered,
        }
    }

    /// 32x32 frames, 8x8x8 tubelets; same 4x4 token grid.
    pub fn desk() -> Self {
        Self {
            frame: 32,
            patch: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame == 0 || self.patch == 0 || self.depth == 0 {
            bail!(Config, "video geometry extents must be positive");
        }
        if !self.frame.is_multiple_of(self.patch) {
            bail!(Config, "frame {} is not a multiple of patch {}", self.frame, self.patch);
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.frame / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.depth * CHANNELS
    }

    /// Offset of step `t`'s own frame inside its window.
    pub fn anchor(&self) -> usize {
        match self.window {
            TubeletWindow::Centered => (self.depth / 2).saturating_sub(1),
            TubeletWindow::Causal => self.depth - 1,
        }
    }

    /// Source frame for window offset `k` of step `t`, edge-replicated.
    pub fn source_frame(&self, t: usize, k: usize, steps: usize) -> usize {
        let s = t as isize + k as isize - self.anchor() as isize;
        s.clamp(0, steps as isize - 1) as usize
    }

    /// Flattened position of `(y, x, k, channel)` inside a token.
    pub fn token_offset(&self, y: usize, x: usize, k: usize, c: usize) -> usize {
        y + self.patch * (x + self.patch * (k + self.depth * c))
    }
}

/// Frame indices of a nearest-neighbor conversion from `from` to `to`.
///
/// Output frame `j` takes input `argmin_i |i/from - j/to|`, ties going to
/// the earlier frame; outputs cover the input's time span,
/// `floor((n - 1) * to / from) + 1` frames.
pub fn resample_indices(n: usize, from: Rate, to: Rate) -> Result<Vec<usize>> {
    if n == 0 {
        bail!(Input, "cannot resample an empty clip");
    }
    // x_j = j * a / b is output j's position in input frame units.
    let a = to.den as u128 * from.num as u128;
    let b = to.num as u128 * from.den as u128;
    let count = ((n as u128 - 1) * b / a + 1) as usize;
    Ok((0..count as u128)
        .map(|j| {
            // ceil(x - 1/2) == floor((2 j a + b - 1) / 2b)
            let i = (2 * j * a + b - 1) / (2 * b);
            (i as usize).min(n - 1)
        })
        .collect())
}

/// Raw 8-bit RGB frames as delivered by the container format.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub width: usize,
    pub height: usize,
    pub fps: Rate,
    /// `frames * height * width * 3` bytes, row-major RGB.
    pub pixels: Vec<u8>,
}

impl RawVideo {
    pub fn new(width: usize, height: usize, fps: Rate, pixels: Vec<u8>) -> Result<Self> {
        let frame = width * height * CHANNELS;
        if frame == 0 || !pixels.len().is_multiple_of(frame) {
            bail!(Input, "{} bytes is not a whole number of {width}x{height} RGB frames", pixels.len());
        }
        Ok(Self {
            width,
            height,
            fps,
            pixels,
        })
    }

    pub fn frame_bytes(&self) -> usize {
        self.width * self.height * CHANNELS
    }

    pub fn frames(&self) -> usize {
        self.pixels.len() / self.frame_bytes()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Nearest-neighbor conversion; every output frame is a byte copy of an
    /// input frame.
    pub fn resample_nn(&self, target: Rate) -> Result<RawVideo> {
        let idx = resample_indices(self.frames(), self.fps, target)?;
        let mut pixels = Vec::with_capacity(idx.len() * self.frame_bytes());
        for i in idx {
            pixels.extend_from_slice(self.frame(i));
        }
        RawVideo::new(self.width, self.height, target, pixels)
    }
}

/// `x / 127.5 - 1`.
pub fn normalize_pixel(x: u8) -> Scalar {
    x as Scalar / 127.5 - 1.0
}

/// Byte frames to a `[T, H, W, 3]` tensor in [-1, 1].
pub fn normalize_rgb(v: &RawVideo) -> Result<VideoClip> {
    if v.frames() == 0 {
        bail!(Input, "empty video");
    }
    let frames = Tensor::new(
        &[v.frames(), v.height, v.width, CHANNELS],
        v.pixels.iter().map(|&b| normalize_pixel(b)).collect(),
    )?;
    Ok(VideoClip { frames, fps: v.fps })
}

/// Normalized frames `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fps: Rate,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: Rate) -> Result<Self> {
        if frames.rank() != 4 || frames.last_dim() != CHANNELS {
            bail!(Dimension, "video frames must be [T, H, W, 3], got {:?}", frames.shape());
        }
        Ok(Self { frames, fps })
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn resample_nn(&self, target: Rate) -> Result<VideoClip> {
        let idx = resample_indices(self.steps(), self.fps, target)?;
        let frames = idx
            .iter()
            .map(|&i| self.frames.slice_first(i, 1))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = frames.iter().collect();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = idx.len();
        let data = Tensor::stack_first(&refs)?.reshape(&shape)?;
        VideoClip::new(data, target)
    }

    /// Checks the clip against the configured square frame size.
    pub fn check_extent(&self, geom: &VideoGeometry) -> Result<()> {
        let s = self.frames.shape();
        if s[1] != geom.frame || s[2] != geom.frame {
            bail!(Dimension, "frames are {}x{}, expected {}x{}", s[1], s[2], geom.frame, geom.frame);
        }
        Ok(())
    }
}

/// Flattened tubelets `[T, tokens, token_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeletBatch {
    pub tokens: Tensor,
}

impl TubeletBatch {
    pub fn steps(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// One token per spatial cell per output step; output steps equal input
/// frames (temporal stride 1).
pub fn extract_tubelets(v: &VideoClip, geom: &VideoGeometry) -> Result<TubeletBatch> {
    geom.validate()?;
    v.check_extent(geom)?;
    let steps = v.steps();
    let (f, p, grid, dim) = (geom.frame, geom.patch, geom.grid(), geom.token_dim());
    let src = v.frames.data();
    let mut out = alloc::vec![0.0; steps * grid * grid * dim];
    for t in 0..steps {
        for k in 0..geom.depth {
            let frame = &src[geom.source_frame(t, k, steps) * f * f * CHANNELS..];
            for gy in 0..grid {
                for gx in 0..grid {
                    let token = &mut out[((t * grid + gy) * grid + gx) * dim..][..dim];
                    for y in 0..p {
                        for x in 0..p {
                            let px = ((gy * p + y) * f + gx * p + x) * CHANNELS;
                            for c in 0..CHANNELS {
                                token[geom.token_offset(y, x, k, c)] = frame[px + c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TubeletBatch {
        tokens: Tensor::new(&[steps, grid * grid, dim], out)?,
    })
}

/// Reassembles the frame at window offset `k` of step `t` from its tokens.
pub fn assemble_frame(tb: &TubeletBatch, geom: &VideoGeometry, t: usize, k: usize) -> Result<Tensor> {
    let (f, p, grid, dim) = (geom.frame, geom.patch, geom.grid(), geom.token_dim());
    if tb.tokens.shape()[1..] != [grid * grid, dim] || t >= tb.steps() || k >= geom.depth {
        bail!(Dimension, "tokens {:?} do not match the geometry", tb.tokens.shape());
    }
    let mut out = alloc::vec![0.0; f * f * CHANNELS];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = &tb.tokens.data()[((t * grid + gy) * grid + gx) * dim..][..dim];
            for y in 0..p {
                for x in 0..p {
                    for c in 0..CHANNELS {
                        out[((gy * p + y) * f + gx * p + x) * CHANNELS + c] = token[geom.token_offset(y, x, k, c)];
                    }
                }
            }
        }
    }
    Tensor::new(&[f, f, CHANNELS], out)
}
