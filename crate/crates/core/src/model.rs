//! Full detector: feature projection, trunk, pooling, prediction head, and
//! the weighted cross-entropy loss, with analytic gradients for training.

use crate::bimamba::{TrunkCache, TrunkParams, Variant};
use crate::error::{Error, Result};
use crate::num::Real;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub n_blocks: usize,
    pub variant: Variant,
    pub k_conv: usize,
    pub pooling: Pooling,
    /// (bonafide, spoof) loss weights; `None` = inverse class frequency of
    /// the training set, resolved by the trainer.
    pub class_weights: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feat: 1024,
            d_model: 144,
            d_inner: 256,
            n_state: 16,
            n_blocks: 12,
            variant: Variant::Dua,
            k_conv: 3,
            pooling: Pooling::Mean,
            class_weights: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_feat", self.d_feat),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("n_state", self.n_state),
            ("n_blocks", self.n_blocks),
            ("k_conv", self.k_conv),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if let Some((wb, ws)) = self.class_weights {
            if !(wb > 0.0 && ws > 0.0) {
                return Err(Error::Config("class weights must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Width of the trunk output (and head input).
    pub fn trunk_width(&self) -> usize {
        match self.variant {
            Variant::Dua => 2 * self.d_model,
            _ => self.d_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub trunk: TrunkParams<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

#[derive(Debug)]
pub struct ModelCache<F: Real> {
    x: Array2<F>,
    trunk: TrunkCache<F>,
    pooled: Array1<F>,
    t_len: usize,
}

impl<F: Real> ModelParams<F> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trunk = TrunkParams::init(
            cfg.variant,
            cfg.n_blocks,
            cfg.d_model,
            cfg.d_inner,
            cfg.n_state,
            cfg.k_conv,
            &mut rng,
        )?;
        let w = cfg.trunk_width();
        let bf = 1.0 / (cfg.d_feat as f64).sqrt();
        let bh = 1.0 / (w as f64).sqrt();
        Ok(ModelParams {
            proj_w: Array2::from_shape_fn((cfg.d_model, cfg.d_feat), |_| {
                F::of_f64(rng.gen_range(-bf..bf))
            }),
            proj_b: Array1::zeros(cfg.d_model),
            trunk,
            head_w: Array2::from_shape_fn((2, w), |_| F::of_f64(rng.gen_range(-bh..bh))),
            head_b: Array1::zeros(2),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            proj_w: Array2::zeros(self.proj_w.dim()),
            proj_b: Array1::zeros(self.proj_b.len()),
            trunk: self.trunk.zeros_like(),
            head_w: Array2::zeros(self.head_w.dim()),
            head_b: Array1::zeros(self.head_b.len()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj_w.len()
            + self.proj_b.len()
            + self.trunk.param_count()
            + self.head_w.len()
            + self.head_b.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<F>) {
        out.extend(self.proj_w.iter().cloned());
        out.extend(self.proj_b.iter().cloned());
        self.trunk.flatten_into(out);
        out.extend(self.head_w.iter().cloned());
        out.extend(self.head_b.iter().cloned());
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut v);
        v
    }

    pub fn unflatten_from<I: Iterator<Item = F>>(&mut self, it: &mut I) {
        for v in self.proj_w.iter_mut() {
            *v = it.next().expect("parameter payload too short");
        }
        for v in self.proj_b.iter_mut() {
            *v = it.next().expect("parameter payload too short");
        }
        self.trunk.unflatten_from(it);
        for v in self.head_w.iter_mut() {
            *v = it.next().expect("parameter payload too short");
        }
        for v in self.head_b.iter_mut() {
            *v = it.next().expect("parameter payload too short");
        }
    }

    pub fn unflatten(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "payload of {} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().cloned();
        self.unflatten_from(&mut it);
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.proj_w += &other.proj_w;
        self.proj_b += &other.proj_b;
        self.trunk.add_assign(&other.trunk);
        self.head_w += &other.head_w;
        self.head_b += &other.head_b;
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Per-frame affine projection into the model width.
pub fn project_features<F: Real>(x: &Array2<F>, p: &ModelParams<F>) -> Result<Array2<F>> {
    if x.ncols() != p.proj_w.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} vs projection input {}",
            x.ncols(),
            p.proj_w.ncols()
        )));
    }
    Ok(x.dot(&p.proj_w.t()) + &p.proj_b)
}

/// Mean over the time axis; permutation-invariant and linear in its input.
pub fn mean_pool<F: Real>(y: &Array2<F>) -> Array1<F> {
    let t = F::of_f64(y.nrows() as f64);
    y.sum_axis(Axis(0)) / t
}

/// Full forward pass: projection -> trunk -> pooling -> head.
/// Returns the two logits (bonafide, spoof).
pub fn model_forward<F: Real>(
    x: &Array2<F>,
    p: &ModelParams<F>,
    training: bool,
) -> Result<(Array1<F>, Option<ModelCache<F>>)> {
    if x.nrows() == 0 {
        return Err(Error::InvalidLength("empty feature sequence".into()));
    }
    let proj = project_features(x, p)?;
    let (y, trunk_cache) = p.trunk.forward(&proj, training)?;
    let pooled = mean_pool(&y);
    let logits = p.head_w.dot(&pooled) + &p.head_b;
    let cache = trunk_cache.map(|tc| ModelCache {
        x: x.clone(),
        trunk: tc,
        pooled,
        t_len: y.nrows(),
    });
    Ok((logits, cache))
}

/// Backward pass from the logit gradient; returns parameter gradients.
pub fn model_backward<F: Real>(
    cache: &ModelCache<F>,
    p: &ModelParams<F>,
    grad_logits: &Array1<F>,
) -> Result<ModelParams<F>> {
    let mut grads = p.zeros_like();
    for i in 0..2 {
        for (j, gw) in grads.head_w.row_mut(i).iter_mut().enumerate() {
            *gw = grad_logits[i] * cache.pooled[j];
        }
        grads.head_b[i] = grad_logits[i];
    }
    let gpooled = p.head_w.t().dot(grad_logits);
    let inv_t = F::of_f64(1.0 / cache.t_len as f64);
    let mut gy = Array2::zeros((cache.t_len, gpooled.len()));
    for t in 0..cache.t_len {
        gy.row_mut(t).assign(&(&gpooled * inv_t));
    }
    let (gproj, gtrunk) = p.trunk.backward(&cache.trunk, &gy)?;
    grads.trunk = gtrunk;
    grads.proj_w = gproj.t().dot(&cache.x);
    grads.proj_b = gproj.sum_axis(Axis(0));
    Ok(grads)
}

/// Detection score: higher = more bonafide.
pub fn detection_score<F: Real>(logits: &Array1<F>) -> F {
    logits[0] - logits[1]
}

/// Weighted cross-entropy for one utterance. `label_idx` 0 = bonafide,
/// 1 = spoof; `weights` = (w_bonafide, w_spoof). Returns the loss and the
/// gradient with respect to the logits.
pub fn weighted_ce_loss<F: Real>(
    logits: &Array1<F>,
    label_idx: usize,
    weights: (F, F),
) -> (F, Array1<F>) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let p0 = e0 / z;
    let p1 = e1 / z;
    let w = if label_idx == 0 { weights.0 } else { weights.1 };
    let p_label = if label_idx == 0 { p0 } else { p1 };
    let loss = -w * p_label.ln();
    let mut grad = Array1::zeros(2);
    grad[0] = w * (p0 - if label_idx == 0 { F::one() } else { F::zero() });
    grad[1] = w * (p1 - if label_idx == 1 { F::one() } else { F::zero() });
    (loss, grad)
}

/// Elementwise mean of parameter trees.
pub fn average_params<F: Real>(list: &[&ModelParams<F>]) -> Result<ModelParams<F>> {
    if list.is_empty() {
        return Err(Error::InvalidLength("no checkpoints to average".into()));
    }
    let mut acc = list[0].flatten();
    for p in &list[1..] {
        let f = p.flatten();
        if f.len() != acc.len() {
            return Err(Error::ShapeMismatch("checkpoint shapes differ".into()));
        }
        for (a, b) in acc.iter_mut().zip(f) {
            *a += b;
        }
    }
    let inv = F::of_f64(1.0 / list.len() as f64);
    for a in acc.iter_mut() {
        *a *= inv;
    }
    let mut out = list[0].zeros_like();
    out.unflatten(&acc)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_feat: 6,
            d_model: 4,
            d_inner: 6,
            n_state: 2,
            n_blocks: 1,
            variant,
            k_conv: 3,
            pooling: Pooling::Mean,
            class_weights: Some((1.0, 1.0)),
            seed: 7,
        }
    }

    fn rand_x(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0f64..1.0))
    }

    #[test]
    fn projection_zero_weights_gives_bias() {
        let cfg = tiny_cfg(Variant::Dua);
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        p.proj_w.fill(0.0);
        p.proj_b = Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(1), 5, 6);
        let out = project_features(&x, &p).unwrap();
        for t in 0..5 {
            assert_eq!(out.row(t).to_owned(), p.proj_b);
        }
    }

    #[test]
    fn projection_identity_passthrough() {
        let mut cfg = tiny_cfg(Variant::Dua);
        cfg.d_feat = 4;
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        p.proj_w = Array2::eye(4);
        p.proj_b.fill(0.0);
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(2), 5, 4);
        assert_eq!(project_features(&x, &p).unwrap(), x);
    }

    #[test]
    fn projection_matches_naive_oracle() {
        let cfg = tiny_cfg(Variant::Dua);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(3), 5, 6);
        let out = project_features(&x, &p).unwrap();
        for t in 0..5 {
            for d in 0..4 {
                let mut acc = p.proj_b[d];
                for j in 0..6 {
                    acc += p.proj_w[[d, j]] * x[[t, j]];
                }
                assert!((out[[t, d]] - acc).abs() < 1e-14);
            }
        }
        // width mismatch rejected
        assert!(project_features(&rand_x(&mut ChaCha8Rng::seed_from_u64(4), 3, 5), &p).is_err());
    }

    #[test]
    fn mean_pool_permutation_invariant_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = rand_x(&mut rng, 7, 3);
        let p1 = mean_pool(&y);
        let mut perm = y.clone();
        perm.invert_axis(Axis(0));
        let p2 = mean_pool(&perm);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p3 = mean_pool(&(&y * 3.0));
        for (a, b) in p1.iter().zip(p3.iter()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_zero_logits() {
        let cfg = tiny_cfg(Variant::Inn);
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(6), 6, 6);
        let (logits, _) = model_forward(&x, &p, false).unwrap();
        assert_eq!(logits[0], 0.0);
        assert_eq!(logits[1], 0.0);
        assert_eq!(detection_score(&logits), 0.0);
    }

    #[test]
    fn forward_deterministic_and_rejects_empty() {
        let cfg = tiny_cfg(Variant::Dua);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(7), 6, 6);
        let (l1, _) = model_forward(&x, &p, false).unwrap();
        let (l2, _) = model_forward(&x, &p, false).unwrap();
        assert_eq!(l1, l2);
        assert!(model_forward(&Array2::<f64>::zeros((0, 6)), &p, false).is_err());
    }

    #[test]
    fn score_antisymmetric_under_head_row_swap() {
        let cfg = tiny_cfg(Variant::Ext);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let x = rand_x(&mut ChaCha8Rng::seed_from_u64(8), 6, 6);
        let (l, _) = model_forward(&x, &p, false).unwrap();
        let mut q = p.clone();
        let r0 = q.head_w.row(0).to_owned();
        let r1 = q.head_w.row(1).to_owned();
        q.head_w.row_mut(0).assign(&r1);
        q.head_w.row_mut(1).assign(&r0);
        q.head_b = Array1::from_vec(vec![p.head_b[1], p.head_b[0]]);
        let (ls, _) = model_forward(&x, &q, false).unwrap();
        assert!((detection_score(&l) + detection_score(&ls)).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_values_and_gradient() {
        let logits = Array1::from_vec(vec![0.0f64, 0.0]);
        let (loss, _) = weighted_ce_loss(&logits, 0, (1.0, 1.0));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // confident and correct -> loss toward 0
        let logits = Array1::from_vec(vec![30.0f64, 0.0]);
        let (loss, _) = weighted_ce_loss(&logits, 0, (1.0, 1.0));
        assert!(loss < 1e-12);
        assert!(loss >= 0.0);
        // gradient vs central finite differences
        let base = Array1::from_vec(vec![0.4f64, -0.7]);
        for label in 0..2 {
            let (_, g) = weighted_ce_loss(&base, label, (1.4, 0.8));
            let h = 1e-7;
            for i in 0..2 {
                let mut lp = base.clone();
                let mut lm = base.clone();
                lp[i] += h;
                lm[i] -= h;
                let (fp, _) = weighted_ce_loss(&lp, label, (1.4, 0.8));
                let (fm, _) = weighted_ce_loss(&lm, label, (1.4, 0.8));
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "label={label} i={i}");
            }
        }
    }

    #[test]
    fn averaging_examples() {
        let cfg = tiny_cfg(Variant::Unidirectional);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let avg = average_params(&[&p, &p, &p]).unwrap();
        for (a, b) in avg.flatten().iter().zip(p.flatten()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        // power-of-two count: exactly reproducible
        let avg2 = average_params(&[&p, &p]).unwrap();
        assert_eq!(avg2.flatten(), p.flatten());
        let mut neg = p.zeros_like();
        let negflat: Vec<f64> = p.flatten().iter().map(|v| -v).collect();
        neg.unflatten(&negflat).unwrap();
        let avg = average_params(&[&p, &neg]).unwrap();
        assert!(avg.flatten().iter().all(|v| v.abs() < 1e-15));
        assert!(average_params::<f64>(&[]).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for variant in [Variant::Unidirectional, Variant::Inn, Variant::Ext, Variant::Dua] {
            let cfg = tiny_cfg(variant);
            let p = ModelParams::<f64>::init(&cfg).unwrap();
            let x = rand_x(&mut ChaCha8Rng::seed_from_u64(9), 6, 6);
            let loss_of = |p: &ModelParams<f64>| {
                let (logits, _) = model_forward(&x, p, false).unwrap();
                weighted_ce_loss(&logits, 1, (1.3, 0.9)).0
            };
            let (logits, cache) = model_forward(&x, &p, true).unwrap();
            let (_, glogits) = weighted_ce_loss(&logits, 1, (1.3, 0.9));
            let grads = model_backward(cache.as_ref().unwrap(), &p, &glogits).unwrap();
            let flat = p.flatten();
            let gflat = grads.flatten();
            let h = 1e-6;
            for i in 0..flat.len() {
                let mut fp = flat.clone();
                let mut fm = flat.clone();
                fp[i] += h;
                fm[i] -= h;
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.unflatten(&fp).unwrap();
                pm.unflatten(&fm).unwrap();
                let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                assert!(
                    (fd - gflat[i]).abs() / denom < 1e-5,
                    "{variant:?} param {i}: fd={fd} got={}",
                    gflat[i]
                );
            }
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = tiny_cfg(Variant::Dua);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = p.zeros_like();
        q.unflatten(&flat).unwrap();
        assert_eq!(q, p);
        assert!(q.unflatten(&flat[..flat.len() - 1]).is_err());
    }
}
