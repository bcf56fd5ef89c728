//! Detection metrics: DET staircase, EER, and minimum normalized tandem
//! detection cost.
//!
//! Conventions, fixed so numbers are reproducible:
//! - higher score = more bonafide;
//! - a trial with score exactly equal to the threshold counts as accepted
//!   (score >= theta);
//! - the finite-sample EER is read off the DET staircase by linear
//!   interpolation between the two adjacent points that bracket the
//!   miss/false-alarm crossing.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "bonafide" => Some(Label::Bonafide),
            "spoof" => Some(Label::Spoof),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub utt_id: String,
    pub score: f64,
    pub label: Option<Label>,
}

/// One point of the DET staircase at a candidate threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn split_labeled(scores: &[TrialScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for t in scores {
        if !t.score.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        match t.label {
            Some(Label::Bonafide) => bona.push(t.score),
            Some(Label::Spoof) => spoof.push(t.score),
            None => return Err(Error::Data(format!("unlabeled trial {}", t.utt_id))),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::DegenerateProtocol);
    }
    Ok((bona, spoof))
}

/// DET points at every distinct score, plus one terminal point above the
/// maximum where everything is rejected. P_miss is the fraction of bonafide
/// strictly below the threshold; P_fa is the fraction of spoof at or above it.
pub fn det_points(scores: &[TrialScore]) -> Result<Vec<DetPoint>> {
    let (mut bona, mut spoof) = split_labeled(scores)?;
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    spoof.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds: Vec<f64> = bona.iter().chain(spoof.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let terminal = thresholds.last().unwrap() + 1.0;
    thresholds.push(terminal);
    let nb = bona.len() as f64;
    let ns = spoof.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len());
    // two-pointer sweep over the sorted class scores
    let mut ib = 0usize; // bonafide strictly below threshold
    let mut is = 0usize; // spoof strictly below threshold
    for theta in thresholds {
        while ib < bona.len() && bona[ib] < theta {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < theta {
            is += 1;
        }
        points.push(DetPoint {
            threshold: theta,
            p_miss: ib as f64 / nb,
            p_fa: (spoof.len() - is) as f64 / ns,
        });
    }
    Ok(points)
}

/// Equal error rate and the interpolated threshold attaining it.
pub fn compute_eer(scores: &[TrialScore]) -> Result<(f64, f64)> {
    let points = det_points(scores)?;
    // diff = p_miss - p_fa goes from <= -? .. to +1; find the sign change
    let mut prev = points[0];
    let mut prev_d = prev.p_miss - prev.p_fa;
    if prev_d >= 0.0 {
        // crossing at or before the first candidate threshold
        return Ok((prev.p_miss.max(prev.p_fa).min(prev.p_miss), prev.threshold));
    }
    for p in &points[1..] {
        let d = p.p_miss - p.p_fa;
        if d >= 0.0 {
            if d == 0.0 {
                return Ok((p.p_miss, p.threshold));
            }
            let t = -prev_d / (d - prev_d);
            let eer_miss = prev.p_miss + t * (p.p_miss - prev.p_miss);
            let eer_fa = prev.p_fa + t * (p.p_fa - prev.p_fa);
            // the staircase is axis-aligned, so one of the two is exact; the
            // interpolated crossing is their common value up to rounding
            let eer = 0.5 * (eer_miss + eer_fa);
            let theta = prev.threshold + t * (p.threshold - prev.threshold);
            return Ok((eer, theta));
        }
        prev = *p;
        prev_d = d;
    }
    unreachable!("terminal DET point has p_miss=1, p_fa=0");
}

/// Cost model for the constrained tandem detection cost.
///
/// The constants are external evaluation-convention inputs (priors, costs,
/// and a fixed ASV operating point); they are not derived by this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct TdcfCostModel {
    pub p_target: f64,
    pub p_nontarget: f64,
    pub p_spoof: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub c_fa_spoof: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    pub p_fa_spoof_asv: f64,
}

impl Default for TdcfCostModel {
    fn default() -> Self {
        TdcfCostModel {
            p_target: 0.9405,
            p_nontarget: 0.0095,
            p_spoof: 0.05,
            c_miss: 1.0,
            c_fa: 10.0,
            c_fa_spoof: 10.0,
            p_miss_asv: 0.03,
            p_fa_asv: 0.01,
            p_fa_spoof_asv: 0.50,
        }
    }
}

impl TdcfCostModel {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_target, self.p_nontarget, self.p_spoof];
        if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidCostModel("priors must be >= 0".into()));
        }
        if (priors.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCostModel("priors must sum to 1".into()));
        }
        for c in [self.c_miss, self.c_fa, self.c_fa_spoof] {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::InvalidCostModel("costs must be > 0".into()));
            }
        }
        for r in [self.p_miss_asv, self.p_fa_asv, self.p_fa_spoof_asv] {
            if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidCostModel("ASV rates must be in [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Constants of t-DCF(theta) = C0 + C1 * P_miss_cm + C2 * P_fa_cm.
    pub fn coefficients(&self) -> Result<(f64, f64, f64)> {
        self.validate()?;
        let c0 = self.p_target * self.c_miss * self.p_miss_asv
            + self.p_nontarget * self.c_fa * self.p_fa_asv;
        let c1 = self.p_target * self.c_miss - c0;
        let c2 = self.c_fa_spoof * self.p_spoof * self.p_fa_spoof_asv;
        if c1 <= 0.0 || c2 <= 0.0 {
            return Err(Error::InvalidCostModel(
                "derived coefficients C1 and C2 must be > 0".into(),
            ));
        }
        Ok((c0, c1, c2))
    }
}

/// Minimum normalized t-DCF over all candidate thresholds, with its argmin.
pub fn min_tdcf(cm_scores: &[TrialScore], model: &TdcfCostModel) -> Result<(f64, f64)> {
    let (c0, c1, c2) = model.coefficients()?;
    let norm = (c0 + c1).min(c0 + c2);
    let points = det_points(cm_scores)?;
    let mut best = f64::INFINITY;
    let mut best_theta = points[0].threshold;
    for p in &points {
        let cost = (c0 + c1 * p.p_miss + c2 * p.p_fa) / norm;
        if cost < best {
            best = cost;
            best_theta = p.threshold;
        }
    }
    Ok((best.min(1.0), best_theta))
}

fn read_two_column(path: &Path) -> Result<Vec<(String, String)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let a = it.next();
        let b = it.next();
        match (a, b, it.next()) {
            (Some(a), Some(b), None) => out.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected two whitespace-separated fields, got '{line}'"),
                })
            }
        }
    }
    Ok(out)
}

/// Score file: one `<utt_id> <score>` per line.
pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let rows = read_two_column(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, (id, sc)) in rows.into_iter().enumerate() {
        let score: f64 = sc.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad score '{sc}'"),
        })?;
        if !score.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        out.push(TrialScore {
            utt_id: id,
            score,
            label: None,
        });
    }
    Ok(out)
}

/// Protocol file: one `<utt_id> <bonafide|spoof>` per line.
pub fn read_protocol(path: &Path) -> Result<Vec<(String, Label)>> {
    let rows = read_two_column(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, (id, lab)) in rows.into_iter().enumerate() {
        let label = Label::parse(&lab).ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("bad label '{lab}'"),
        })?;
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        out.push((id, label));
    }
    Ok(out)
}

/// Join scores with a protocol on utterance id. Unmatched ids (on either
/// side) are returned for reporting and excluded from the joined set.
pub fn join_trials(
    scores: &[TrialScore],
    protocol: &[(String, Label)],
) -> (Vec<TrialScore>, Vec<String>) {
    let labels: HashMap<&str, Label> =
        protocol.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let scored: HashMap<&str, ()> = scores.iter().map(|t| (t.utt_id.as_str(), ())).collect();
    let mut joined = Vec::new();
    let mut unmatched = Vec::new();
    for t in scores {
        match labels.get(t.utt_id.as_str()) {
            Some(l) => joined.push(TrialScore {
                utt_id: t.utt_id.clone(),
                score: t.score,
                label: Some(*l),
            }),
            None => unmatched.push(t.utt_id.clone()),
        }
    }
    for (id, _) in protocol {
        if !scored.contains_key(id.as_str()) {
            unmatched.push(id.clone());
        }
    }
    (joined, unmatched)
}

/// Machine-readable `key=value` metric report.
pub fn format_report(eer: f64, threshold: f64, tdcf: Option<(f64, f64)>) -> String {
    let mut s = String::new();
    writeln!(s, "eer={eer:.6}").unwrap();
    writeln!(s, "threshold={threshold:.6}").unwrap();
    if let Some((t, th)) = tdcf {
        writeln!(s, "min_tdcf={t:.6}").unwrap();
        writeln!(s, "tdcf_threshold={th:.6}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trials(bona: &[f64], spoof: &[f64]) -> Vec<TrialScore> {
        let mut v = Vec::new();
        for (i, &s) in bona.iter().enumerate() {
            v.push(TrialScore {
                utt_id: format!("b{i}"),
                score: s,
                label: Some(Label::Bonafide),
            });
        }
        for (i, &s) in spoof.iter().enumerate() {
            v.push(TrialScore {
                utt_id: format!("s{i}"),
                score: s,
                label: Some(Label::Spoof),
            });
        }
        v
    }

    /// O(n^2) counting oracle for the miss/false-alarm rates at a threshold.
    fn brute_rates(ts: &[TrialScore], theta: f64) -> (f64, f64) {
        let nb = ts.iter().filter(|t| t.label == Some(Label::Bonafide)).count() as f64;
        let ns = ts.iter().filter(|t| t.label == Some(Label::Spoof)).count() as f64;
        let miss = ts
            .iter()
            .filter(|t| t.label == Some(Label::Bonafide) && t.score < theta)
            .count() as f64;
        let fa = ts
            .iter()
            .filter(|t| t.label == Some(Label::Spoof) && t.score >= theta)
            .count() as f64;
        (miss / nb, fa / ns)
    }

    #[test]
    fn det_separated_pair() {
        let ts = trials(&[0.9], &[0.1]);
        let (pm, pf) = brute_rates(&ts, 0.5);
        assert_eq!((pm, pf), (0.0, 0.0));
        let pts = det_points(&ts).unwrap();
        assert!(pts.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
    }

    #[test]
    fn det_identical_scores_endpoints() {
        let ts = trials(&[1.0, 1.0], &[1.0]);
        let pts = det_points(&ts).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].p_miss, pts[0].p_fa), (0.0, 1.0));
        assert_eq!((pts[1].p_miss, pts[1].p_fa), (1.0, 0.0));
    }

    #[test]
    fn det_matches_brute_force_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bona: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let spoof: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..2.0)).collect();
        let ts = trials(&bona, &spoof);
        let pts = det_points(&ts).unwrap();
        for p in &pts {
            let (pm, pf) = brute_rates(&ts, p.threshold);
            assert_eq!((p.p_miss, p.p_fa), (pm, pf));
        }
        for w in pts.windows(2) {
            assert!(w[0].p_miss <= w[1].p_miss);
            assert!(w[0].p_fa >= w[1].p_fa);
        }
    }

    #[test]
    fn det_rejects_single_class() {
        let ts = trials(&[1.0, 2.0], &[]);
        assert!(matches!(det_points(&ts), Err(Error::DegenerateProtocol)));
    }

    #[test]
    fn eer_perfect_separation_zero() {
        let ts = trials(&[2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0]);
        let (eer, _) = compute_eer(&ts).unwrap();
        assert_eq!(eer, 0.0);
    }

    #[test]
    fn eer_chance_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bona: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let spoof: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (eer, _) = compute_eer(&trials(&bona, &spoof)).unwrap();
        assert!((eer - 0.5).abs() < 0.05, "eer={eer}");
    }

    #[test]
    fn eer_six_trial_hand_oracle() {
        // crossing where one of three bonafide is below and one of three
        // spoof is at or above the threshold
        let ts = trials(&[3.0, 2.0, 1.0], &[2.5, 0.5, 0.2]);
        let (eer, theta) = compute_eer(&ts).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12, "eer={eer}");
        let (pm, pf) = brute_rates(&ts, theta);
        assert_eq!(pm, pf);
    }

    #[test]
    fn eer_monotone_transform_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bona: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let spoof: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let (e1, _) = compute_eer(&trials(&bona, &spoof)).unwrap();
        let f = |v: f64| (3.0 * v).tanh() * 2.0 + 0.1 * v; // strictly increasing
        let bt: Vec<f64> = bona.iter().map(|&v| f(v)).collect();
        let st: Vec<f64> = spoof.iter().map(|&v| f(v)).collect();
        let (e2, _) = compute_eer(&trials(&bt, &st)).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn eer_extreme_trial_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let bona: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let spoof: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let (e1, _) = compute_eer(&trials(&bona, &spoof)).unwrap();
            let mut b2 = bona.clone();
            b2.push(10.0);
            let (e2, _) = compute_eer(&trials(&b2, &spoof)).unwrap();
            assert!(e2 <= e1 + 1e-12);
            let mut s2 = spoof.clone();
            s2.push(-10.0);
            let (e3, _) = compute_eer(&trials(&bona, &s2)).unwrap();
            assert!(e3 <= e1 + 1e-12);
        }
    }

    #[test]
    fn tdcf_perfect_cm() {
        let model = TdcfCostModel::default();
        let (c0, c1, c2) = model.coefficients().unwrap();
        let ts = trials(&[2.0, 3.0], &[-1.0, 0.0]);
        let (t, _) = min_tdcf(&ts, &model).unwrap();
        let expect = c0 / (c0 + c1).min(c0 + c2);
        assert!((t - expect).abs() < 1e-15);
    }

    #[test]
    fn tdcf_all_same_score_is_one() {
        let model = TdcfCostModel::default();
        let ts = trials(&[1.0, 1.0], &[1.0, 1.0]);
        let (t, _) = min_tdcf(&ts, &model).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn tdcf_matches_brute_force_sweep() {
        let model = TdcfCostModel::default();
        let (c0, c1, c2) = model.coefficients().unwrap();
        let norm = (c0 + c1).min(c0 + c2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bona: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let spoof: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let ts = trials(&bona, &spoof);
        // brute force: evaluate the cost at every score and one beyond max
        let mut cands: Vec<f64> = ts.iter().map(|t| t.score).collect();
        let top = cands.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
        cands.push(top);
        let mut best = f64::INFINITY;
        for &theta in &cands {
            let (pm, pf) = brute_rates(&ts, theta);
            best = best.min((c0 + c1 * pm + c2 * pf) / norm);
        }
        let (t, _) = min_tdcf(&ts, &model).unwrap();
        assert!((t - best.min(1.0)).abs() <= 1e-12);
    }

    #[test]
    fn tdcf_invalid_model_rejected() {
        let mut m = TdcfCostModel::default();
        m.p_spoof = 0.0;
        m.p_target = 0.9905;
        assert!(matches!(
            m.coefficients(),
            Err(Error::InvalidCostModel(_))
        ));
        let mut m = TdcfCostModel::default();
        m.c_miss = -1.0;
        assert!(m.validate().is_err());
        let mut m = TdcfCostModel::default();
        m.p_fa_asv = 1.5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn file_join_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("scores.txt");
        let pp = dir.path().join("protocol.txt");
        std::fs::write(&sp, "u1 0.5\nu2 -1.25\nu3 2.0\nu4 0.1\n").unwrap();
        std::fs::write(&pp, "u1 bonafide\nu2 spoof\nu3 bonafide\nu5 spoof\n").unwrap();
        let scores = read_scores(&sp).unwrap();
        assert_eq!(scores.len(), 4);
        assert_eq!(scores[1].score, -1.25);
        let protocol = read_protocol(&pp).unwrap();
        let (joined, unmatched) = join_trials(&scores, &protocol);
        assert_eq!(joined.len(), 3);
        assert!(unmatched.contains(&"u4".to_string()));
        assert!(unmatched.contains(&"u5".to_string()));
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "u1 0.5\nu2 zebra\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "u1 0.5 extra\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "u1 0.5\nu1 0.7\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::DuplicateId(id)) if id == "u1"));
        std::fs::write(&p, "u1 neither\n").unwrap();
        assert!(read_protocol(&p).is_err());
    }

    #[test]
    fn report_format() {
        let r = format_report(0.0333, 1.5, Some((0.2, 0.7)));
        assert!(r.contains("eer=0.033300"));
        assert!(r.contains("min_tdcf=0.200000"));
    }
}
