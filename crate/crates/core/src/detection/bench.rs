//! Shared-feature versus per-window feature extraction timing.

use std::fmt;
use std::time::{Duration, Instant};

use crate::dataio::{subtract_mean, Image, DEFAULT_MEAN};
use crate::error::{Error, Result};
use crate::geometry::{map_window, resize_exact, resize_image, select_scale, WindowRect};
use crate::netgraph::{head_forward, trunk_forward, NetworkSpec, SharedParams};
use crate::spp::{spp_forward, spp_forward_region};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// Conv maps once per scale, every window pooled from them.
    Shared,
    /// Every window cropped, warped and run through the whole network.
    PerWindow,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Shared => "shared",
            BenchMode::PerWindow => "per_window",
        })
    }
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(BenchMode::Shared),
            "per_window" | "per-window" => Ok(BenchMode::PerWindow),
            other => Err(Error::invalid(format!("unknown bench mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub mode: BenchMode,
    /// Short-side lengths for shared mode.
    pub scales: Vec<usize>,
    pub target_side: usize,
    /// Square side each window is warped to in per-window mode.
    pub warp_side: usize,
    pub repeats: usize,
    pub mean: f32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Shared,
            scales: vec![224],
            target_side: 32,
            warp_side: 224,
            repeats: 5,
            mean: DEFAULT_MEAN,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    /// Resizing, cropping and warping.
    pub prep: f64,
    pub conv: f64,
    pub pool: f64,
    pub fc: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.prep + self.conv + self.pool + self.fc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub proposals: usize,
    /// Per-stage medians over all repetitions.
    pub median: StageTimes,
    pub runs: Vec<StageTimes>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn run_shared(spec: &NetworkSpec, params: &SharedParams, image: &Image, windows: &[WindowRect], cfg: &BenchConfig) -> Result<StageTimes> {
    let pyr = spec.pyramid().ok_or_else(|| Error::invalid("network has no pyramid"))?;
    let stride = spec.geometry()?.stride();
    let mut t = StageTimes::default();
    let mut inputs = Vec::with_capacity(cfg.scales.len());
    let start = Instant::now();
    for &s in &cfg.scales {
        inputs.push((s, subtract_mean(&resize_image(image, s)?, cfg.mean)));
    }
    t.prep = secs(start.elapsed());
    let start = Instant::now();
    let maps = inputs
        .iter()
        .map(|(s, x)| Ok((*s, trunk_forward(spec, params, x)?)))
        .collect::<Result<Vec<_>>>()?;
    t.conv = secs(start.elapsed());
    let start = Instant::now();
    let size = (image.width(), image.height());
    let min_side = size.0.min(size.1) as f64;
    let mut pooled = Vec::with_capacity(windows.len() * pyr.output_len(spec.trunk_channels()));
    for w in windows {
        let s = select_scale(w, size, &cfg.scales, cfg.target_side)?;
        let map = &maps.iter().find(|(m, _)| *m == s).expect("scale computed").1;
        let sh = map.shape();
        let r = map_window(&w.scaled(s as f64 / min_side), stride, sh.width, sh.height)?;
        pooled.extend(spp_forward_region(map, 0, r.rows(), r.cols(), pyr)?.0);
    }
    t.pool = secs(start.elapsed());
    let start = Instant::now();
    let len = pooled.len() / windows.len();
    head_forward(spec, params, &Tensor::from_vec(Shape::new(windows.len(), len, 1, 1), pooled)?, true)?;
    t.fc = secs(start.elapsed());
    Ok(t)
}

fn run_per_window(spec: &NetworkSpec, params: &SharedParams, image: &Image, windows: &[WindowRect], cfg: &BenchConfig) -> Result<StageTimes> {
    let pyr = spec.pyramid().ok_or_else(|| Error::invalid("network has no pyramid"))?;
    let mut t = StageTimes::default();
    let start = Instant::now();
    let warped = windows
        .iter()
        .map(|w| Ok(subtract_mean(&resize_exact(&image.crop(w)?, cfg.warp_side, cfg.warp_side)?, cfg.mean)))
        .collect::<Result<Vec<_>>>()?;
    t.prep = secs(start.elapsed());
    let start = Instant::now();
    let maps = warped
        .iter()
        .map(|x| trunk_forward(spec, params, x))
        .collect::<Result<Vec<_>>>()?;
    t.conv = secs(start.elapsed());
    let start = Instant::now();
    let pooled = maps
        .iter()
        .map(|m| Ok(spp_forward(m, pyr)?.0))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Tensor::stack(&pooled)?;
    t.pool = secs(start.elapsed());
    let start = Instant::now();
    head_forward(spec, params, &stacked, true)?;
    t.fc = secs(start.elapsed());
    Ok(t)
}

/// Times feature extraction and scoring for `windows` on one image.
pub fn speed_bench(spec: &NetworkSpec, params: &SharedParams, image: &Image, windows: &[WindowRect], cfg: &BenchConfig) -> Result<BenchReport> {
    if windows.is_empty() {
        return Err(Error::invalid("benchmark needs at least one proposal"));
    }
    if cfg.repeats == 0 || cfg.scales.is_empty() || cfg.warp_side == 0 {
        return Err(Error::invalid("benchmark needs repeats, scales and a warp side"));
    }
    let (w, h) = (image.width(), image.height());
    let windows = windows
        .iter()
        .map(|r| r.clamp_to(w, h).ok_or_else(|| Error::WindowOutside(r.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let runs = (0..cfg.repeats)
        .map(|_| match cfg.mode {
            BenchMode::Shared => run_shared(spec, params, image, &windows, cfg),
            BenchMode::PerWindow => run_per_window(spec, params, image, &windows, cfg),
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&StageTimes) -> f64| median(runs.iter().map(f).collect());
    let median = StageTimes {
        prep: pick(|t| t.prep),
        conv: pick(|t| t.conv),
        pool: pick(|t| t.pool),
        fc: pick(|t| t.fc),
    };
    Ok(BenchReport {
        mode: cfg.mode,
        proposals: windows.len(),
        median,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{shared, ParameterStore};

    #[test]
    fn both_modes_run() {
        let spec = NetworkSpec::toy(5);
        let params = shared(ParameterStore::init(&spec, 0.05, 1));
        let img = Image::filled(40, 30, 1, 100.0).unwrap();
        let wins = [WindowRect::new(0, 0, 20, 20), WindowRect::new(10, 5, 40, 30)];
        for mode in [BenchMode::Shared, BenchMode::PerWindow] {
            let cfg = BenchConfig {
                mode,
                scales: vec![30],
                warp_side: 32,
                repeats: 3,
                ..BenchConfig::default()
            };
            let r = speed_bench(&spec, &params, &img, &wins, &cfg).unwrap();
            assert_eq!(r.runs.len(), 3);
            assert_eq!(r.proposals, 2);
            assert!(r.median.total() > 0.0);
        }
        assert!(speed_bench(&spec, &params, &img, &[], &BenchConfig::default()).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
