//! Real-time-factor benchmarking of the trunk against a quadratic
//! self-attention reference.
//!
//! Timing is single-threaded wall clock: `warmup` discarded runs, then
//! `runs` timed runs reported as mean and standard deviation. Durations map
//! to frame counts through the front-end hop (20 ms -> 50 frames/s).

use crate::error::{Error, Result};
use crate::num::Real;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::Instant;

/// Frames per second of audio at the front-end hop.
pub const FRAMES_PER_SECOND: f64 = 50.0;
pub const DEFAULT_DURATIONS: [f64; 9] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct RtfRecord {
    pub system: String,
    pub duration_s: f64,
    pub frames: usize,
    pub wall_time_s: f64,
    pub rtf: f64,
    pub runs: usize,
    pub std: f64,
}

pub fn frames_for_duration(duration_s: f64) -> usize {
    (duration_s * FRAMES_PER_SECOND).round() as usize
}

/// Time `forward` on random inputs of the given durations. If a single call
/// is too fast for the timer (< ~1 ms), calls are batched per timed sample
/// so the measurement stays above timer resolution.
pub fn measure_rtf<F>(
    system: &str,
    width: usize,
    mut forward: F,
    durations: &[f64],
    runs: usize,
    warmup: usize,
) -> Result<Vec<RtfRecord>>
where
    F: FnMut(&Array2<f32>),
{
    if runs == 0 {
        return Err(Error::InvalidLength("runs must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe4c);
    let mut out = Vec::with_capacity(durations.len());
    for &dur in durations {
        let t = frames_for_duration(dur).max(1);
        let x = Array2::from_shape_fn((t, width), |_| rng.gen_range(-1.0f32..1.0));
        for _ in 0..warmup {
            forward(&x);
        }
        // estimate one call to pick an inner repetition count
        let est_start = Instant::now();
        forward(&x);
        let est = est_start.elapsed().as_secs_f64();
        let reps = if est < 1e-3 {
            ((1e-3 / est.max(1e-9)).ceil() as usize).clamp(1, 10_000)
        } else {
            1
        };
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            for _ in 0..reps {
                forward(&x);
            }
            samples.push(start.elapsed().as_secs_f64() / reps as f64);
        }
        let mean = samples.iter().sum::<f64>() / runs as f64;
        let var = if runs > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64
        } else {
            0.0
        };
        out.push(RtfRecord {
            system: system.to_string(),
            duration_s: dur,
            frames: t,
            wall_time_s: mean,
            rtf: mean / dur,
            runs,
            std: var.sqrt(),
        });
    }
    Ok(out)
}

/// Single-head scaled dot-product self-attention with fixed random
/// projections: a timing baseline with O(T^2 * D) cost by construction.
/// Never used for detection quality.
#[derive(Debug, Clone)]
pub struct AttentionRef<F: Real> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

impl<F: Real> AttentionRef<F> {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 1.0 / (d as f64).sqrt();
        let mat = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((d, d), |_| F::of_f64(rng.gen_range(-b..b)))
        };
        AttentionRef {
            wq: mat(&mut rng),
            wk: mat(&mut rng),
            wv: mat(&mut rng),
            wo: mat(&mut rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        let d = self.wq.ncols();
        if x.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "attention width {} vs input {}",
                d,
                x.ncols()
            )));
        }
        let q = x.dot(&self.wq.t());
        let k = x.dot(&self.wk.t());
        let v = x.dot(&self.wv.t());
        let scale = F::one() / F::of_f64((d as f64).sqrt());
        let t_len = x.nrows();
        let mut ctx = Array2::zeros((t_len, d));
        let mut row = Array1::zeros(t_len);
        for i in 0..t_len {
            let qi = q.row(i);
            let mut maxv = F::neg_infinity();
            for j in 0..t_len {
                let s = qi.dot(&k.row(j)) * scale;
                row[j] = s;
                maxv = maxv.max(s);
            }
            let mut z = F::zero();
            for j in 0..t_len {
                row[j] = (row[j] - maxv).exp();
                z += row[j];
            }
            for j in 0..t_len {
                let w = row[j] / z;
                let vj = v.row(j);
                for c in 0..d {
                    ctx[[i, c]] += w * vj[c];
                }
            }
        }
        Ok(ctx.dot(&self.wo.t()))
    }
}

/// CSV with columns `system,duration_s,rtf,std`; deterministic bytes.
pub fn emit_csv(records: &[RtfRecord]) -> String {
    let mut s = String::from("system,duration_s,rtf,std\n");
    for r in records {
        writeln!(
            s,
            "{},{:.1},{:.6e},{:.6e}",
            r.system, r.duration_s, r.rtf, r.std
        )
        .unwrap();
    }
    s
}

/// Simple deterministic SVG line chart of RTF vs duration, one polyline per
/// system.
pub fn emit_svg(records: &[RtfRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidLength("no records to plot".into()));
    }
    let (w, h) = (640.0f64, 400.0f64);
    let (ml, mr, mt, mb) = (70.0f64, 20.0f64, 20.0f64, 50.0f64);
    let xmin = records.iter().map(|r| r.duration_s).fold(f64::MAX, f64::min);
    let xmax = records.iter().map(|r| r.duration_s).fold(f64::MIN, f64::max);
    let ymax = records.iter().map(|r| r.rtf).fold(f64::MIN, f64::max);
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = ymax.max(1e-12);
    let px = |d: f64| ml + (d - xmin) / xspan * (w - ml - mr);
    let py = |v: f64| h - mb - v / yspan * (h - mt - mb);
    let mut systems: Vec<&str> = records.iter().map(|r| r.system.as_str()).collect();
    systems.dedup();
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )
    .unwrap();
    writeln!(
        s,
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\
         <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{y0}\" stroke=\"black\"/>",
        y0 = h - mb,
        x1 = w - mr,
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">duration (s)</text>",
        (ml + w - mr) / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-size=\"14\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">RTF</text>",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    )
    .unwrap();
    for (si, sys) in systems.iter().enumerate() {
        let color = palette[si % palette.len()];
        let pts: Vec<String> = records
            .iter()
            .filter(|r| r.system == *sys)
            .map(|r| format!("{:.2},{:.2}", px(r.duration_s), py(r.rtf)))
            .collect();
        writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{sys}</text>",
            ml + 10.0,
            mt + 16.0 * (si as f64 + 1.0)
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}
