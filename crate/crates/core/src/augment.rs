//! Waveform-level augmentation, length normalization, a fixed deterministic
//! front-end, synthetic dataset generation, and WAV/manifest plumbing.
//!
//! All randomness flows through explicit seeded generators. Disabled
//! configurations are exact identities. The front-end is deterministic and
//! never trained: it stands in for a frozen pretrained feature extractor.

use crate::error::{Error, Result};
use crate::metrics::Label;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Length-normalization target: about four seconds at 16 kHz.
pub const TARGET_LEN: usize = 64_600;
/// Front-end analysis window (25 ms) and hop (20 ms) at 16 kHz.
pub const FRAME_WIN: usize = 400;
pub const FRAME_HOP: usize = 320;
/// Front-end output width.
pub const D_FEAT: usize = 1024;
const N_BANDS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum();
        ((e / self.samples.len() as f64) as f32).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Convolutive + impulsive signal-dependent noise.
    La,
    /// Stationary signal-independent noise with random coloration.
    Df,
    None,
}

impl AugmentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "la" => Ok(AugmentMode::La),
            "df" => Ok(AugmentMode::Df),
            "none" => Ok(AugmentMode::None),
            other => Err(Error::Config(format!("unknown augment mode '{other}'"))),
        }
    }
}

/// Parameter ranges for the noise family. The defaults are approximations in
/// the spirit of the commonly used configuration; every number is meant to be
/// visible here and overridable via config.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Number of random spectral bands in the convolutive filter.
    pub conv_bands: (usize, usize),
    /// Strength of the band perturbation added to the identity filter.
    pub conv_strength: (f32, f32),
    /// Gains of the squared/cubed terms modelling non-linearity.
    pub conv_nl_gain: (f32, f32),
    /// Fraction of samples that receive an impulse.
    pub imp_density: (f32, f32),
    /// Target SNR of the impulsive noise, dB.
    pub imp_snr_db: (f32, f32),
    /// Target SNR of the stationary colored noise, dB.
    pub stat_snr_db: (f32, f32),
    /// One-pole coloration coefficient range.
    pub stat_color: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mode: AugmentMode::None,
            conv_bands: (2, 5),
            conv_strength: (0.1, 0.5),
            conv_nl_gain: (0.0, 0.1),
            imp_density: (0.001, 0.01),
            imp_snr_db: (10.0, 40.0),
            stat_snr_db: (10.0, 40.0),
            stat_color: (-0.9, 0.9),
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn signal_energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Scale `noise` so that 10*log10(E_signal/E_noise) equals `snr_db`, then add.
fn add_at_snr(signal: &[f32], noise: &mut [f32], snr_db: f32) -> Vec<f32> {
    let es = signal_energy(signal);
    let en = signal_energy(noise);
    if es == 0.0 || en == 0.0 {
        return signal.to_vec();
    }
    let gain = ((es / en) * 10f64.powf(-(snr_db as f64) / 10.0)).sqrt() as f32;
    signal
        .iter()
        .zip(noise.iter())
        .map(|(&s, &n)| s + gain * n)
        .collect()
}

/// Randomized multi-band convolutive filter plus low-order polynomial
/// distortion. The filter is an identity tap perturbed by a sum of windowed
/// cosine bands; strength 0 and non-linear gain 0 reduce to the identity.
pub fn convolutive_noise<R: Rng>(w: &Waveform, cfg: &AugmentConfig, rng: &mut R) -> Waveform {
    let strength = sample_range(rng, cfg.conv_strength);
    let nl2 = sample_range(rng, cfg.conv_nl_gain);
    let nl3 = sample_range(rng, cfg.conv_nl_gain);
    if strength == 0.0 && nl2 == 0.0 && nl3 == 0.0 {
        return w.clone();
    }
    let n_bands = if cfg.conv_bands.0 >= cfg.conv_bands.1 {
        cfg.conv_bands.0
    } else {
        rng.gen_range(cfg.conv_bands.0..=cfg.conv_bands.1)
    };
    let n_taps = 31usize;
    let mut taps = vec![0.0f32; n_taps];
    taps[0] = 1.0;
    for _ in 0..n_bands {
        let freq: f32 = rng.gen_range(0.02..0.45); // cycles per sample
        let gain: f32 = rng.gen_range(-1.0..1.0) * strength / n_bands.max(1) as f32;
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        for (k, t) in taps.iter_mut().enumerate() {
            let win = 0.5 * (1.0 - (std::f32::consts::TAU * k as f32 / n_taps as f32).cos());
            *t += gain * win * (std::f32::consts::TAU * freq * k as f32 + phase).cos();
        }
    }
    let x = &w.samples;
    let mut y = vec![0.0f32; x.len()];
    for t in 0..x.len() {
        let mut acc = 0.0f32;
        for (k, &tap) in taps.iter().enumerate() {
            if t >= k {
                acc += tap * x[t - k];
            }
        }
        y[t] = acc;
    }
    for v in y.iter_mut() {
        let lin = *v;
        *v = lin + nl2 * lin * lin + nl3 * lin * lin * lin;
    }
    Waveform::new(y, w.sample_rate)
}

/// Sparse impulses whose amplitudes scale with the local signal amplitude,
/// rescaled to a drawn target SNR. Density 0 and silent input are identities.
pub fn impulsive_noise<R: Rng>(w: &Waveform, cfg: &AugmentConfig, rng: &mut R) -> Waveform {
    let density = sample_range(rng, cfg.imp_density);
    let snr_db = sample_range(rng, cfg.imp_snr_db);
    if density <= 0.0 {
        return w.clone();
    }
    let x = &w.samples;
    let mut noise = vec![0.0f32; x.len()];
    let mut any = false;
    for t in 0..x.len() {
        if rng.gen::<f32>() < density {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let local = x[t].abs();
            if local > 0.0 {
                noise[t] = sign * local * rng.gen_range(0.5..2.0);
                any = true;
            }
        }
    }
    if !any {
        return w.clone();
    }
    Waveform::new(add_at_snr(x, &mut noise, snr_db), w.sample_rate)
}

/// Filtered white noise with a random one-pole spectral tilt, added at a
/// drawn target SNR. An infinite SNR bound disables the op exactly.
pub fn stationary_colored_noise<R: Rng>(
    w: &Waveform,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Waveform {
    if cfg.stat_snr_db.0.is_infinite() {
        return w.clone();
    }
    let snr_db = sample_range(rng, cfg.stat_snr_db);
    let alpha = sample_range(rng, cfg.stat_color);
    let mut noise = vec![0.0f32; w.len()];
    let mut state = 0.0f32;
    for n in noise.iter_mut() {
        let white: f32 = rng.gen_range(-1.0..1.0);
        state = alpha * state + white;
        *n = state;
    }
    Waveform::new(add_at_snr(&w.samples, &mut noise, snr_db), w.sample_rate)
}

/// Apply the mode's noise chain.
pub fn apply_augment<R: Rng>(w: &Waveform, cfg: &AugmentConfig, rng: &mut R) -> Waveform {
    match cfg.mode {
        AugmentMode::La => {
            let a = convolutive_noise(w, cfg, rng);
            impulsive_noise(&a, cfg, rng)
        }
        AugmentMode::Df => stationary_colored_noise(w, cfg, rng),
        AugmentMode::None => w.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Random crop offset (training).
    Random,
    /// Deterministic leading segment (evaluation).
    Leading,
}

/// Normalize to exactly `target_len` samples: crop long inputs, tile short
/// ones until they reach the target.
pub fn crop_or_concat<R: Rng>(
    w: &Waveform,
    target_len: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidLength("empty waveform".into()));
    }
    let n = w.len();
    let samples = if n == target_len {
        w.samples.clone()
    } else if n > target_len {
        let start = match mode {
            CropMode::Random => rng.gen_range(0..=n - target_len),
            CropMode::Leading => 0,
        };
        w.samples[start..start + target_len].to_vec()
    } else {
        let mut out = Vec::with_capacity(target_len);
        while out.len() < target_len {
            let need = target_len - out.len();
            out.extend_from_slice(&w.samples[..need.min(n)]);
        }
        out
    };
    Ok(Waveform::new(samples, w.sample_rate))
}

fn frontend_projection() -> &'static Array2<f32> {
    use std::sync::OnceLock;
    static PROJ: OnceLock<Array2<f32>> = OnceLock::new();
    PROJ.get_or_init(|| {
        // fixed seed: the front-end must produce identical features forever
        let mut rng = ChaCha8Rng::seed_from_u64(0x00f3_0a7e);
        let scale = (1.0 / N_BANDS as f32).sqrt();
        Array2::from_shape_fn((D_FEAT, N_BANDS), |_| rng.gen_range(-scale..scale))
    })
}

fn frontend_bands() -> &'static Vec<(Vec<f32>, Vec<f32>)> {
    use std::sync::OnceLock;
    static BANDS: OnceLock<Vec<(Vec<f32>, Vec<f32>)>> = OnceLock::new();
    BANDS.get_or_init(|| {
        // correlation kernels at fixed frequencies, Hann-windowed
        (0..N_BANDS)
            .map(|b| {
                let freq = 0.004 + 0.44 * (b as f32 + 0.5) / N_BANDS as f32; // cycles/sample
                let mut cosv = Vec::with_capacity(FRAME_WIN);
                let mut sinv = Vec::with_capacity(FRAME_WIN);
                for k in 0..FRAME_WIN {
                    let win = 0.5
                        * (1.0 - (std::f32::consts::TAU * k as f32 / FRAME_WIN as f32).cos());
                    let ph = std::f32::consts::TAU * freq * k as f32;
                    cosv.push(win * ph.cos());
                    sinv.push(win * ph.sin());
                }
                (cosv, sinv)
            })
            .collect()
    })
}

/// Deterministic front-end: frame the waveform (25 ms window, 20 ms hop),
/// compute log band energies at fixed frequencies, and expand to `D_FEAT`
/// dimensions with a fixed seeded random projection.
pub fn toy_frontend(w: &Waveform) -> Result<Array2<f32>> {
    let n = w.len();
    if n < FRAME_WIN {
        return Err(Error::InvalidLength(format!(
            "waveform of {n} samples is shorter than one {FRAME_WIN}-sample frame"
        )));
    }
    let t_frames = (n - FRAME_WIN) / FRAME_HOP + 1;
    let bands = frontend_bands();
    let proj = frontend_projection();
    let mut feats = Array2::zeros((t_frames, D_FEAT));
    let mut energies = Array1::zeros(N_BANDS);
    for t in 0..t_frames {
        let frame = &w.samples[t * FRAME_HOP..t * FRAME_HOP + FRAME_WIN];
        for (b, (cosv, sinv)) in bands.iter().enumerate() {
            let mut re = 0.0f32;
            let mut im = 0.0f32;
            for k in 0..FRAME_WIN {
                re += frame[k] * cosv[k];
                im += frame[k] * sinv[k];
            }
            energies[b] = (1e-6 + re * re + im * im).ln();
        }
        feats.row_mut(t).assign(&proj.dot(&energies));
    }
    Ok(feats)
}

// ---------------------------------------------------------------------------
// synthetic dataset

/// One manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: Label,
}

const BLOCK_SAMPLES: usize = 1280; // 80 ms at 16 kHz

fn synth_utterance(rng: &mut ChaCha8Rng, label: Label, n_samples: usize) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE as f32;
    let f0_base: f32 = rng.gen_range(120.0..250.0);
    let depth = 0.05f32; // relative frequency excursion, same for both classes
    let partials = [1.0f32, 0.5, 0.25];
    let mut samples = vec![0.0f32; n_samples];
    // frequency and amplitude trajectories: smooth and continuous for
    // bonafide, held constant over 80 ms blocks for spoof — same ranges, so
    // time-averaged spectra match and only the temporal structure differs
    let (ftraj, atraj): (Vec<f32>, Vec<f32>) = match label {
        Label::Bonafide => {
            let vib_rate: f32 = rng.gen_range(3.0..7.0);
            let vib_ph: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let am_rate: f32 = rng.gen_range(1.0..4.0);
            let am_ph: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let f = (0..n_samples)
                .map(|t| {
                    let tt = t as f32 / sr;
                    f0_base
                        * (1.0 + depth * (std::f32::consts::TAU * vib_rate * tt + vib_ph).sin())
                })
                .collect();
            let a = (0..n_samples)
                .map(|t| {
                    let tt = t as f32 / sr;
                    1.0 + 0.3 * (std::f32::consts::TAU * am_rate * tt + am_ph).sin()
                })
                .collect();
            (f, a)
        }
        Label::Spoof => {
            let n_blocks = n_samples / BLOCK_SAMPLES + 1;
            let fb: Vec<f32> = (0..n_blocks)
                .map(|_| f0_base * (1.0 + depth * rng.gen_range(-1.0f32..1.0)))
                .collect();
            let ab: Vec<f32> = (0..n_blocks)
                .map(|_| 1.0 + 0.3 * rng.gen_range(-1.0f32..1.0))
                .collect();
            let f = (0..n_samples).map(|t| fb[t / BLOCK_SAMPLES]).collect();
            let a = (0..n_samples).map(|t| ab[t / BLOCK_SAMPLES]).collect();
            (f, a)
        }
    };
    // phase-continuous synthesis: no boundary clicks, only trajectory shape
    let mut phase = [0.0f32; 3];
    for t in 0..n_samples {
        let mut v = 0.0f32;
        for (h, &amp) in partials.iter().enumerate() {
            phase[h] += std::f32::consts::TAU * ftraj[t] * (h as f32 + 1.0) / sr;
            v += amp * phase[h].sin();
        }
        samples[t] = atraj[t] * v;
    }
    // light measurement noise, identical config for both classes
    for s in samples.iter_mut() {
        *s += 0.002 * rng.gen_range(-1.0f32..1.0);
    }
    // exact energy normalization removes any residual class energy cue
    let mut w = Waveform::new(samples, DEFAULT_SAMPLE_RATE);
    let rms = w.rms();
    if rms > 0.0 {
        let g = 0.1 / rms;
        for s in w.samples.iter_mut() {
            *s *= g;
        }
    }
    w
}

/// Generate a balanced labeled dataset: `n_per_class` train utterances per
/// class plus half as many dev utterances per class. Writes WAVs under
/// `out_dir/wav/` and `train.txt` / `dev.txt` manifests.
pub fn synth_dataset(seed: u64, n_per_class: usize, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if n_per_class == 0 {
        return Err(Error::InvalidLength("need at least one trial per class".into()));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_samples = 66_000; // slightly over the crop target so cropping is real
    let write_split = |split: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<PathBuf> {
        let manifest_path = out_dir.join(format!("{split}.txt"));
        let mut manifest = String::new();
        for i in 0..n {
            for label in [Label::Bonafide, Label::Spoof] {
                let id = format!("{split}_{}_{i:04}", label.name());
                let w = synth_utterance(rng, label, n_samples);
                let rel = format!("wav/{id}.wav");
                write_wav(&out_dir.join(&rel), &w)?;
                manifest.push_str(&format!("{id} {rel} {}\n", label.name()));
            }
        }
        std::fs::write(&manifest_path, manifest)?;
        Ok(manifest_path)
    };
    let train = write_split("train", n_per_class, &mut rng)?;
    let dev = write_split("dev", n_per_class.div_ceil(2), &mut rng)?;
    Ok((train, dev))
}

/// Manifest lines: `<utt_id> <relative_path> <label>`. Paths are resolved
/// relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected '<utt_id> <path> <label>', got '{line}'"),
            });
        }
        let label = Label::parse(fields[2]).ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("bad label '{}'", fields[2]),
        })?;
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::DuplicateId(fields[0].to_string()));
        }
        out.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            path: base.join(fields[1]),
            label,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// WAV IO: 16-bit PCM mono

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut out = BufWriter::new(f);
    let data_len = (w.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_u32::<LittleEndian>(36 + data_len)?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_u32::<LittleEndian>(16)?;
    out.write_u16::<LittleEndian>(1)?; // PCM
    out.write_u16::<LittleEndian>(1)?; // mono
    out.write_u32::<LittleEndian>(w.sample_rate)?;
    out.write_u32::<LittleEndian>(w.sample_rate * 2)?;
    out.write_u16::<LittleEndian>(2)?;
    out.write_u16::<LittleEndian>(16)?;
    out.write_all(b"data")?;
    out.write_u32::<LittleEndian>(data_len)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_i16::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != b"RIFF" {
        return Err(Error::Corrupt("missing RIFF header".into()));
    }
    let _riff_len = r.read_u32::<LittleEndian>()?;
    r.read_exact(&mut tag)?;
    if &tag != b"WAVE" {
        return Err(Error::Corrupt("missing WAVE tag".into()));
    }
    let mut sample_rate = 0u32;
    loop {
        if r.read_exact(&mut tag).is_err() {
            return Err(Error::Corrupt("no data chunk".into()));
        }
        let chunk_len = r.read_u32::<LittleEndian>()?;
        match &tag {
            b"fmt " => {
                let fmt = r.read_u16::<LittleEndian>()?;
                let channels = r.read_u16::<LittleEndian>()?;
                sample_rate = r.read_u32::<LittleEndian>()?;
                let _byte_rate = r.read_u32::<LittleEndian>()?;
                let _align = r.read_u16::<LittleEndian>()?;
                let bits = r.read_u16::<LittleEndian>()?;
                if fmt != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Corrupt(
                        "only 16-bit PCM mono is supported".into(),
                    ));
                }
                let extra = chunk_len.saturating_sub(16);
                std::io::copy(&mut r.by_ref().take(extra as u64), &mut std::io::sink())?;
            }
            b"data" => {
                if sample_rate == 0 {
                    return Err(Error::Corrupt("data chunk before fmt".into()));
                }
                let n = (chunk_len / 2) as usize;
                let mut samples = Vec::with_capacity(n);
                for _ in 0..n {
                    samples.push(r.read_i16::<LittleEndian>()? as f32 / 32767.0);
                }
                return Ok(Waveform::new(samples, sample_rate));
            }
            _ => {
                std::io::copy(&mut r.by_ref().take(chunk_len as u64), &mut std::io::sink())?;
            }
        }
    }
}
