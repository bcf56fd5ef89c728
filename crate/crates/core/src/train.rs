//! Training protocol: batched Adam updates, per-epoch dev EER, early
//! stopping, and top-k checkpoint averaging.

use crate::augment::{
    apply_augment, crop_or_concat, toy_frontend, AugmentConfig, AugmentMode, CropMode, Waveform,
    FRAME_HOP, FRAME_WIN,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, Label, TrialScore};
use crate::model::{
    average_params, detection_score, model_backward, model_forward, weighted_ce_loss, ModelConfig,
    ModelParams,
};
use crate::optim::{AdamState, StepOutcome};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub top_k: usize,
    pub max_epochs: usize,
    pub crop_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-6,
            weight_decay: 1e-4,
            batch_size: 20,
            patience: 7,
            top_k: 5,
            max_epochs: 100,
            crop_len: 64_600,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("top_k", self.top_k),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.crop_len < FRAME_WIN {
            return Err(Error::Config(format!(
                "crop_len must be >= one front-end frame ({FRAME_WIN} samples)"
            )));
        }
        Ok(())
    }
}

/// One labeled training/dev utterance at the waveform level.
#[derive(Debug, Clone)]
pub struct TrainUtt {
    pub id: String,
    pub wave: Waveform,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_eer: f64,
}

/// A checkpoint retained by the top-k tracker.
#[derive(Debug, Clone)]
pub struct KeptCheckpoint {
    pub epoch: usize,
    pub dev_eer: f64,
    pub params: ModelParams<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Elementwise average of the kept top-k checkpoints.
    pub averaged: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub kept: Vec<KeptCheckpoint>,
    pub skipped_steps: usize,
}

/// Number of front-end frames produced from `crop_len` samples.
pub fn frames_for(crop_len: usize) -> usize {
    (crop_len - FRAME_WIN) / FRAME_HOP + 1
}

/// Evaluation-time features: deterministic leading crop, then the front-end.
pub fn eval_features(wave: &Waveform, crop_len: usize) -> Result<Array2<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in Leading mode
    let cropped = crop_or_concat(wave, crop_len, CropMode::Leading, &mut rng)?;
    toy_frontend(&cropped)
}

/// Full-utterance features for training; random crops are taken per epoch by
/// slicing frame-aligned windows out of this matrix, which is exactly
/// equivalent to waveform-level crops at hop-aligned offsets.
fn train_features(wave: &Waveform, crop_len: usize) -> Result<Array2<f32>> {
    if wave.len() < crop_len {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tiled = crop_or_concat(wave, crop_len, CropMode::Leading, &mut rng)?;
        toy_frontend(&tiled)
    } else {
        toy_frontend(wave)
    }
}

/// Score every utterance with the model (higher = more bonafide).
pub fn score_set(
    params: &ModelParams<f32>,
    set: &[TrainUtt],
    crop_len: usize,
) -> Result<Vec<TrialScore>> {
    let mut out = Vec::with_capacity(set.len());
    for u in set {
        let feats = eval_features(&u.wave, crop_len)?;
        let (logits, _) = model_forward(&feats, params, false)?;
        out.push(TrialScore {
            utt_id: u.id.clone(),
            score: detection_score(&logits) as f64,
            label: Some(u.label),
        });
    }
    Ok(out)
}

fn resolve_class_weights(mcfg: &ModelConfig, train_set: &[TrainUtt]) -> (f32, f32) {
    if let Some((wb, ws)) = mcfg.class_weights {
        return (wb as f32, ws as f32);
    }
    // inverse class frequency: w_c = n_total / (2 * n_c)
    let n_bona = train_set
        .iter()
        .filter(|u| u.label == Label::Bonafide)
        .count();
    let n_spoof = train_set.len() - n_bona;
    let n = train_set.len() as f32;
    (n / (2.0 * n_bona as f32), n / (2.0 * n_spoof as f32))
}

/// Run the training loop. `log` receives one `epoch=<n> loss=<f>
/// dev_eer=<f>` line per epoch plus occasional diagnostics.
pub fn train(
    train_set: &[TrainUtt],
    dev_set: &[TrainUtt],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    aug: &AugmentConfig,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data("empty train or dev set".into()));
    }
    let has = |set: &[TrainUtt], l: Label| set.iter().any(|u| u.label == l);
    if !has(train_set, Label::Bonafide) || !has(train_set, Label::Spoof) {
        return Err(Error::Data("training set must contain both classes".into()));
    }
    let weights = resolve_class_weights(mcfg, train_set);
    let mut params = ModelParams::<f32>::init(mcfg)?;
    let mut opt = AdamState::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(mcfg.seed ^ 0x7261_696e);
    let target_frames = frames_for(tcfg.crop_len);

    // feature extraction is the dominant fixed cost: do it once per utterance
    let augment_on = aug.mode != AugmentMode::None;
    let mut train_feats: Vec<Array2<f32>> = Vec::with_capacity(train_set.len());
    if !augment_on {
        for u in train_set {
            train_feats.push(train_features(&u.wave, tcfg.crop_len)?);
        }
    }

    let mut history = Vec::new();
    let mut kept: Vec<KeptCheckpoint> = Vec::new();
    let mut best_eer = f64::INFINITY;
    let mut since_best = 0usize;
    let mut skipped_steps = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(tcfg.batch_size) {
            let mut grad_acc = vec![0.0f32; params.param_count()];
            let mut grad_tmp = Vec::with_capacity(params.param_count());
            for &idx in batch {
                let u = &train_set[idx];
                let feats = if augment_on {
                    let w = apply_augment(&u.wave, aug, &mut rng);
                    let cropped = crop_or_concat(&w, tcfg.crop_len, CropMode::Random, &mut rng)?;
                    toy_frontend(&cropped)?
                } else {
                    let full = &train_feats[idx];
                    let max_off = full.nrows() - target_frames.min(full.nrows());
                    let off = if max_off > 0 {
                        rng.gen_range(0..=max_off)
                    } else {
                        0
                    };
                    full.slice(s![off..off + target_frames.min(full.nrows()), ..])
                        .to_owned()
                };
                let (logits, cache) = model_forward(&feats, &params, true)?;
                let label_idx = match u.label {
                    Label::Bonafide => 0,
                    Label::Spoof => 1,
                };
                let (loss, glogits) = weighted_ce_loss(&logits, label_idx, weights);
                epoch_loss += loss as f64;
                let g = model_backward(cache.as_ref().unwrap(), &params, &glogits)?;
                grad_tmp.clear();
                g.flatten_into(&mut grad_tmp);
                // fixed accumulation order (batch index order) for
                // reproducibility
                let inv = 1.0 / batch.len() as f32;
                for (a, gv) in grad_acc.iter_mut().zip(&grad_tmp) {
                    *a += gv * inv;
                }
            }
            let mut flat = params.flatten();
            match opt.step(&mut flat, &grad_acc, tcfg.lr, tcfg.weight_decay) {
                StepOutcome::Applied => params.unflatten(&flat)?,
                StepOutcome::SkippedNonFinite => {
                    skipped_steps += 1;
                    log(&format!(
                        "epoch {epoch}: skipped a step with non-finite gradients"
                    ));
                }
            }
        }
        let loss = epoch_loss / train_set.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}: loss={loss}"
            )));
        }
        let dev_scores = score_set(&params, dev_set, tcfg.crop_len)?;
        let (dev_eer, _) = compute_eer(&dev_scores)?;
        history.push(EpochRecord {
            epoch,
            loss,
            dev_eer,
        });
        log(&format!("epoch={epoch} loss={loss:.6} dev_eer={dev_eer:.6}"));

        kept.push(KeptCheckpoint {
            epoch,
            dev_eer,
            params: params.clone(),
        });
        kept.sort_by(|a, b| {
            a.dev_eer
                .partial_cmp(&b.dev_eer)
                .unwrap()
                .then(a.epoch.cmp(&b.epoch))
        });
        kept.truncate(tcfg.top_k);

        if dev_eer < best_eer {
            best_eer = dev_eer;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                log(&format!(
                    "early stop at epoch {epoch}: no dev improvement for {} epochs",
                    tcfg.patience
                ));
                break;
            }
        }
    }

    if kept.len() < tcfg.top_k {
        log(&format!(
            "only {} checkpoints available for top-{} averaging; averaging all",
            kept.len(),
            tcfg.top_k
        ));
    }
    let refs: Vec<&ModelParams<f32>> = kept.iter().map(|k| &k.params).collect();
    let averaged = average_params(&refs)?;
    Ok(TrainOutcome {
        averaged,
        history,
        kept,
        skipped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::DEFAULT_SAMPLE_RATE;
    use crate::bimamba::Variant;
    use crate::model::Pooling;

    fn tiny_mcfg() -> ModelConfig {
        ModelConfig {
            d_feat: crate::augment::D_FEAT,
            d_model: 8,
            d_inner: 12,
            n_state: 4,
            n_blocks: 1,
            variant: Variant::Dua,
            k_conv: 3,
            pooling: Pooling::Mean,
            class_weights: None,
            seed: 3,
        }
    }

    fn toy_set(seed: u64, n_per_class: usize, len: usize) -> Vec<TrainUtt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..n_per_class {
            for label in [Label::Bonafide, Label::Spoof] {
                // crude but separable: different fundamental per class
                let f = match label {
                    Label::Bonafide => 200.0 + rng.gen_range(-5.0f32..5.0),
                    Label::Spoof => 350.0 + rng.gen_range(-5.0f32..5.0),
                };
                let samples = (0..len)
                    .map(|t| {
                        0.1 * (std::f32::consts::TAU * f * t as f32
                            / DEFAULT_SAMPLE_RATE as f32)
                            .sin()
                    })
                    .collect();
                out.push(TrainUtt {
                    id: format!("{}_{i}", label.name()),
                    wave: Waveform::new(samples, DEFAULT_SAMPLE_RATE),
                    label,
                });
            }
        }
        out
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            max_epochs: 2,
            crop_len: 8000,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let set = toy_set(1, 3, 9000);
        let out = train(&set, &set, &mcfg, &tcfg, &AugmentConfig::default(), |_| {}).unwrap();
        let init = ModelParams::<f32>::init(&mcfg).unwrap();
        assert_eq!(out.kept[0].params.flatten(), init.flatten());
    }

    #[test]
    fn deterministic_trajectory() {
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            lr: 1e-3,
            max_epochs: 3,
            crop_len: 8000,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let set = toy_set(2, 3, 9000);
        let run = || {
            train(&set, &set, &mcfg, &tcfg, &AugmentConfig::default(), |_| {})
                .unwrap()
                .history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn patience_counter_semantics() {
        // constant dev EER: first epoch sets the best, the next `patience`
        // epochs count as no-improvement, so training stops at patience+1
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            lr: 0.0, // nothing changes, so dev EER is constant
            weight_decay: 0.0,
            patience: 7,
            max_epochs: 50,
            crop_len: 8000,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let set = toy_set(3, 2, 9000);
        let out = train(&set, &set, &mcfg, &tcfg, &AugmentConfig::default(), |_| {}).unwrap();
        assert_eq!(out.history.len(), 8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig::default();
        let set = toy_set(4, 2, 9000);
        assert!(train(&[], &set, &mcfg, &tcfg, &AugmentConfig::default(), |_| {}).is_err());
        let bona_only: Vec<TrainUtt> = set
            .iter()
            .filter(|u| u.label == Label::Bonafide)
            .cloned()
            .collect();
        assert!(
            train(&bona_only, &set, &mcfg, &tcfg, &AugmentConfig::default(), |_| {}).is_err()
        );
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn learns_separable_toy_set() {
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            lr: 2e-3,
            max_epochs: 12,
            patience: 12,
            crop_len: 8000,
            batch_size: 8,
            top_k: 3,
            ..TrainConfig::default()
        };
        let train_set = toy_set(5, 10, 9000);
        let dev_set = toy_set(6, 5, 9000);
        let out = train(
            &train_set,
            &dev_set,
            &mcfg,
            &tcfg,
            &AugmentConfig::default(),
            |_| {},
        )
        .unwrap();
        let best = out
            .history
            .iter()
            .map(|r| r.dev_eer)
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 0.05, "best dev EER {best}");
        // the averaged checkpoint also evaluates sanely
        let scores = score_set(&out.averaged, &dev_set, tcfg.crop_len).unwrap();
        let (eer, _) = compute_eer(&scores).unwrap();
        assert!(eer.is_finite());
    }

    #[test]
    fn log_line_format() {
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            lr: 1e-3,
            max_epochs: 1,
            crop_len: 8000,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let set = toy_set(7, 2, 9000);
        let mut lines = Vec::new();
        train(&set, &set, &mcfg, &tcfg, &AugmentConfig::default(), |l| {
            lines.push(l.to_string())
        })
        .unwrap();
        assert!(lines
            .iter()
            .any(|l| l.starts_with("epoch=1 loss=") && l.contains(" dev_eer=")));
    }
}
