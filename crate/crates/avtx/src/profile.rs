//! Front-end cost profile: analytic GFLOPs and parameters, an instrumented
//! consistency check and mean forward latency, next to published reference
//! values.
//!
//! Each front-end gets one warm-up forward pass, whose instrumented counts
//! are compared with the analytic ones, then `runs` timed passes (20 by
//! default) on the same mini-batch. Latency is host wall-clock and only the
//! ViT/VGG ratio is comparable with the reference.

use std::time::Instant;

use avtx_core::avmodel::AvModel;
use avtx_core::config::{FrontEndKind, ModelConfig, Preset};
use avtx_core::tensorops::cost::CONVENTION;
use avtx_core::{CostReport, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::run::{render_table, to_csv};

pub const DEFAULT_RUNS: usize = 20;

/// Published (params in M, GFLOPs, latency in ms) of the 128x128 front-ends.
pub const REFERENCE_VIT: (f64, f64, f64) = (37.2, 520.7, 162.3);
pub const REFERENCE_VGG: (f64, f64, f64) = (7.0, 299.3, 120.7);

fn reference(fe: FrontEndKind) -> Option<(f64, f64, f64)> {
    match fe {
        FrontEndKind::Vit => Some(REFERENCE_VIT),
        FrontEndKind::Vgg21d => Some(REFERENCE_VGG),
        FrontEndKind::AudioOnly => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRequest {
    pub preset: Preset,
    pub front_ends: Vec<FrontEndKind>,
    pub batch: usize,
    pub steps: usize,
    /// Timed passes; 0 skips timing (the warm-up pass still runs).
    pub runs: usize,
    pub seed: u64,
}

impl ProfileRequest {
    /// B=1, T=32, both video front-ends, 20 timed runs.
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            front_ends: vec![FrontEndKind::Vgg21d, FrontEndKind::Vit],
            batch: 1,
            steps: 32,
            runs: DEFAULT_RUNS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub front_end: FrontEndKind,
    pub analytic: CostReport,
    pub instrumented: CostReport,
    /// Mean over the timed runs.
    pub latency_ms: Option<f64>,
}

impl ProfileRow {
    pub fn gflops(&self) -> f64 {
        self.analytic.flops as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.analytic.params as f64 / 1e6
    }

    pub fn consistent(&self) -> bool {
        self.analytic == self.instrumented
    }

    /// Relative parameter residual against the reference, in percent.
    pub fn params_residual_pct(&self) -> Option<f64> {
        reference(self.front_end).map(|r| 100.0 * (self.params_m() - r.0) / r.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub request: ProfileRequest,
    pub rows: Vec<ProfileRow>,
}

/// Profiles one video front-end of the preset.
pub fn profile_front_end(preset: Preset, fe: FrontEndKind, batch: usize, steps: usize, runs: usize, seed: u64) -> Result<ProfileRow> {
    if fe == FrontEndKind::AudioOnly {
        return Err(Error::Usage("audio-only has no video front-end to profile".into()));
    }
    if batch == 0 || steps == 0 {
        return Err(Error::Usage("profile batch and steps must be positive".into()));
    }
    let cfg = ModelConfig::preset(preset, fe);
    let (model, store) = AvModel::init(&cfg, seed)?;
    let frame = cfg.video_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = Tensor::from_fn(&[batch, steps, frame, frame, 3], |_| rng.gen_range(-1.0..1.0));
    let pass = || -> Result<CostReport> {
        let mut g = Graph::with_params(&store, false);
        model.video_features(&mut g, &video)?;
        Ok(g.cost_report())
    };
    let instrumented = pass()?;
    let latency_ms = if runs == 0 {
        None
    } else {
        let t0 = Instant::now();
        for _ in 0..runs {
            pass()?;
        }
        Some(t0.elapsed().as_secs_f64() * 1e3 / runs as f64)
    };
    let analytic = model.front_end_cost(batch, steps);
    Ok(ProfileRow {
        front_end: fe,
        analytic,
        instrumented,
        latency_ms,
    })
}

pub fn profile(req: &ProfileRequest) -> Result<ProfileReport> {
    let rows = req
        .front_ends
        .iter()
        .map(|&fe| profile_front_end(req.preset, fe, req.batch, req.steps, req.runs, req.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileReport {
        request: req.clone(),
        rows,
    })
}

fn num(x: f64, places: usize) -> String {
    format!("{x:.places$}")
}

impl ProfileReport {
    fn row(&self, fe: FrontEndKind) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.front_end == fe)
    }

    /// ViT over VGG analytic FLOPs.
    pub fn flop_ratio(&self) -> Option<f64> {
        Some(self.row(FrontEndKind::Vit)?.analytic.flops as f64 / self.row(FrontEndKind::Vgg21d)?.analytic.flops as f64)
    }

    /// ViT over VGG mean latency.
    pub fn latency_ratio(&self) -> Option<f64> {
        Some(self.row(FrontEndKind::Vit)?.latency_ms? / self.row(FrontEndKind::Vgg21d)?.latency_ms?)
    }

    pub fn consistent(&self) -> bool {
        self.rows.iter().all(ProfileRow::consistent)
    }

    /// Header and rows as display strings; text and CSV both use these.
    pub fn cells(&self) -> Vec<Vec<String>> {
        let (b, t) = (self.request.batch.to_string(), self.request.steps.to_string());
        let blank = String::new;
        let mut out = vec![[
            "front_end",
            "batch",
            "steps",
            "gflops",
            "ref_gflops",
            "params_m",
            "ref_params_m",
            "params_residual_pct",
            "latency_ms",
            "ref_latency_ms",
        ]
        .map(String::from)
        .to_vec()];
        for r in &self.rows {
            let rf = reference(r.front_end);
            out.push(vec![
                r.front_end.name().to_string(),
                b.clone(),
                t.clone(),
                num(r.gflops(), 4),
                rf.map_or_else(blank, |x| num(x.1, 1)),
                num(r.params_m(), 3),
                rf.map_or_else(blank, |x| num(x.0, 1)),
                r.params_residual_pct().map_or_else(blank, |x| num(x, 1)),
                r.latency_ms.map_or_else(blank, |x| num(x, 2)),
                rf.map_or_else(blank, |x| num(x.2, 1)),
            ]);
        }
        if let Some(fr) = self.flop_ratio() {
            out.push(vec![
                "vit/vgg21d".into(),
                b,
                t,
                num(fr, 3),
                num(REFERENCE_VIT.1 / REFERENCE_VGG.1, 3),
                blank(),
                blank(),
                blank(),
                self.latency_ratio().map_or_else(blank, |x| num(x, 3)),
                num(REFERENCE_VIT.2 / REFERENCE_VGG.2, 3),
            ]);
        }
        out
    }

    pub fn footer(&self) -> Vec<String> {
        let r = &self.request;
        vec![
            format!("preset {}, mini-batch B={} T={}", r.preset.name(), r.batch, r.steps),
            format!("FLOP convention: {CONVENTION}"),
            format!(
                "analytic counts equal instrumented counts: {}",
                if self.consistent() { "yes" } else { "NO" }
            ),
            if r.runs == 0 {
                "latency not measured".to_string()
            } else {
                format!("latency: mean of {} forward passes after 1 warm-up, host CPU wall-clock", r.runs)
            },
            "ref_*: published 128x128 front-end figures; only ratios are comparable".to_string(),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = render_table(&self.cells());
        for line in self.footer() {
            s.push_str(&format!("# {line}\n"));
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.cells())
    }
}
