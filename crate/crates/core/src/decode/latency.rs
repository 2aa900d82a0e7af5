use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sentence decode times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub percentile: f64,
    /// Time at `percentile` (nearest rank).
    pub value: f64,
    pub mean: f64,
    pub median: f64,
    pub p99: Option<f64>,
    pub samples: Vec<f64>,
}

/// Smallest sample count for which the nearest-rank `percentile` is not the maximum
/// by construction.
pub fn required_samples(percentile: f64) -> usize {
    if percentile >= 100.0 {
        return 1;
    }
    (100.0 / (100.0 - percentile)).ceil() as usize
}

pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl LatencyReport {
    pub fn from_samples(samples: Vec<f64>, percentile: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&percentile) {
            return Err(Error::invalid(format!("percentile {percentile} outside [0, 100]")));
        }
        let need = required_samples(percentile);
        if samples.len() < need {
            return Err(Error::invalid(format!(
                "percentile {percentile} needs at least {need} inputs, got {}",
                samples.len()
            )));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let p99 = (sorted.len() >= required_samples(99.0)).then(|| nearest_rank(&sorted, 99.0));
        Ok(LatencyReport {
            percentile,
            value: nearest_rank(&sorted, percentile),
            mean,
            median: nearest_rank(&sorted, 50.0),
            p99,
            samples,
        })
    }
}

/// Times `decode` on each input sequentially (batch size 1). Each input is decoded
/// `repeats` times and its fastest run is kept, which filters scheduler noise.
pub fn measure_latency<I, R>(
    mut decode: impl FnMut(&I) -> Result<R>,
    inputs: &[I],
    percentile: f64,
    repeats: usize,
) -> Result<LatencyReport> {
    let need = required_samples(percentile);
    if inputs.len() < need {
        return Err(Error::invalid(format!(
            "percentile {percentile} needs at least {need} inputs, got {}",
            inputs.len()
        )));
    }
    let mut samples = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            std::hint::black_box(decode(input)?);
            best = best.min(start.elapsed().as_secs_f64());
        }
        samples.push(best);
    }
    LatencyReport::from_samples(samples, percentile)
}

/// Times several decoders on the same inputs. Calls are interleaved per input (and
/// per repeat) so slow drift in machine speed hits every decoder alike; each keeps
/// its fastest run per input.
pub fn compare_latency(
    decoders: &mut [&mut dyn FnMut(usize) -> Result<()>],
    inputs: usize,
    percentile: f64,
    repeats: usize,
) -> Result<Vec<LatencyReport>> {
    let mut best = vec![vec![f64::INFINITY; inputs]; decoders.len()];
    for i in 0..inputs {
        for _ in 0..repeats.max(1) {
            for (decode, times) in decoders.iter_mut().zip(best.iter_mut()) {
                let start = Instant::now();
                decode(i)?;
                times[i] = times[i].min(start.elapsed().as_secs_f64());
            }
        }
    }
    best.into_iter()
        .map(|samples| LatencyReport::from_samples(samples, percentile))
        .collect()
}
