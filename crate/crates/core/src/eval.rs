//! Detection evaluation: greedy matching, all-point interpolated average
//! precision, mean AP over classes, the accuracy-improvement-to-bandwidth
//! ratio, and comma-separated report tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{bev_iou, iou_3d, ObjectClass};
use crate::netsim::MB;
use crate::rpn::Detection;
use crate::scenegen::{GroundTruth, Occlusion, RangeClass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("IoU threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("bandwidth must be positive to compute AIB")]
    ZeroBandwidth,
    #[error("mean over an empty class list")]
    NoClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Matched a ground truth outside the evaluated subset.
    Ignored { gt: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMatch {
    /// Index into the prediction list passed in.
    pub index: usize,
    pub score: f64,
    pub outcome: Outcome,
}

/// Per-class matching of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Class predictions in descending score order.
    pub predictions: Vec<PredictionMatch>,
    /// Indexed like the ground-truth list; `true` once matched.
    pub gt_matched: Vec<bool>,
    /// Ground truths of the class inside the evaluated subset.
    pub n_gt: usize,
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.predictions.iter().filter(|p| matches!(p.outcome, Outcome::TruePositive { .. })).count()
    }

    pub fn false_positives(&self) -> usize {
        self.predictions.iter().filter(|p| p.outcome == Outcome::FalsePositive).count()
    }

    pub fn recall(&self) -> f64 {
        if self.n_gt == 0 {
            0.0
        } else {
            self.true_positives() as f64 / self.n_gt as f64
        }
    }
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::Threshold(t))
    }
}

/// Greedy matching in descending score order: each prediction of `class`
/// with score at least `score_threshold` takes the unmatched same-class
/// ground truth of highest 3D IoU, if that IoU reaches `iou_threshold`.
/// A prediction matched to a ground truth outside `include` is ignored.
pub fn match_detections_in(
    preds: &[Detection],
    gts: &[GroundTruth],
    class: ObjectClass,
    iou_threshold: f64,
    score_threshold: f64,
    include: impl Fn(&GroundTruth) -> bool,
) -> Result<MatchResult, EvalError> {
    check_threshold(iou_threshold)?;
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].class == class && preds[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut gt_matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.class != class || gt_matched[g] {
                continue;
            }
            let iou = iou_3d(&preds[i].bbox, &gt.bbox).unwrap_or(0.0);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        let outcome = match best {
            Some((_, g)) => {
                gt_matched[g] = true;
                if include(&gts[g]) {
                    Outcome::TruePositive { gt: g }
                } else {
                    Outcome::Ignored { gt: g }
                }
            }
            None => Outcome::FalsePositive,
        };
        out.push(PredictionMatch { index: i, score: preds[i].score, outcome });
    }
    let n_gt = gts.iter().filter(|g| g.class == class && include(g)).count();
    Ok(MatchResult { predictions: out, gt_matched, n_gt, iou_threshold, score_threshold })
}

/// [`match_detections_in`] over every ground truth, no score cut.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruth],
    class: ObjectClass,
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    match_detections_in(preds, gts, class, iou_threshold, 0.0, |_| true)
}

/// Precision at successive confidence cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recalls: Vec<f64>,
    pub precisions: Vec<f64>,
    /// True positives and kept predictions at each cutoff.
    pub counts: Vec<(usize, usize)>,
    pub n_gt: usize,
}

impl PrCurve {
    /// Pools the matches of several frames. Predictions with equal scores
    /// fall under the same cutoff, so the curve does not depend on frame
    /// order.
    pub fn from_matches<'a>(matches: impl IntoIterator<Item = &'a MatchResult>) -> Self {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for m in matches {
            n_gt += m.n_gt;
            for p in &m.predictions {
                match p.outcome {
                    Outcome::TruePositive { .. } => scored.push((p.score, true)),
                    Outcome::FalsePositive => scored.push((p.score, false)),
                    Outcome::Ignored { .. } => {}
                }
            }
        }
        Self::from_scored(scored, n_gt)
    }

    /// Curve from `(score, is_true_positive)` pairs and a ground-truth
    /// count.
    pub fn from_scored(mut scored: Vec<(f64, bool)>, n_gt: usize) -> Self {
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let mut recalls = Vec::new();
        let mut precisions = Vec::new();
        let mut counts = Vec::new();
        if n_gt == 0 {
            return Self { recalls, precisions, counts, n_gt };
        }
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < scored.len() {
            let s = scored[i].0;
            while i < scored.len() && scored[i].0 == s {
                if scored[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            recalls.push(tp as f64 / n_gt as f64);
            precisions.push(tp as f64 / (tp + fp) as f64);
            counts.push((tp, tp + fp));
        }
        Self { recalls, precisions, counts, n_gt }
    }

    /// Curve for predictions already in descending confidence order, one
    /// cutoff per prediction.
    pub fn from_ranked(outcomes: &[bool], n_gt: usize) -> Self {
        let mut recalls = Vec::with_capacity(outcomes.len());
        let mut precisions = Vec::with_capacity(outcomes.len());
        let mut counts = Vec::with_capacity(outcomes.len());
        let mut tp = 0usize;
        for (k, &hit) in outcomes.iter().enumerate() {
            tp += usize::from(hit);
            recalls.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
            precisions.push(tp as f64 / (k + 1) as f64);
            counts.push((tp, k + 1));
        }
        Self { recalls, precisions, counts, n_gt }
    }

    pub fn len(&self) -> usize {
        self.recalls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recalls.is_empty()
    }

    /// `e_interp(r_k) = max_{j >= k} e(r_j)`.
    pub fn interpolated(&self) -> Vec<f64> {
        let mut out = self.precisions.clone();
        for k in (0..out.len().saturating_sub(1)).rev() {
            out[k] = out[k].max(out[k + 1]);
        }
        out
    }
}

/// `sum_k e_interp(r_k) (r_k - r_{k-1})` with `r_0 = 0`; 0 for an empty
/// curve.
///
/// Summed as an exact fraction of the cutoff counts when it fits, so the
/// result is the correctly rounded value; long curves fall back to
/// floating-point accumulation.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.n_gt > 0 && curve.counts.len() == curve.len() {
        if let Some(ap) = exact_average_precision(&curve.counts, curve.n_gt) {
            return ap;
        }
    }
    let interp = curve.interpolated();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (r, e) in curve.recalls.iter().zip(interp) {
        ap += e * (r - prev);
        prev = *r;
    }
    ap
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn exact_average_precision(counts: &[(usize, usize)], n_gt: usize) -> Option<f64> {
    // interpolated precision as a fraction, from the last cutoff backwards
    let mut interp = vec![(0u128, 1u128); counts.len()];
    let mut best = (0u128, 1u128);
    for (k, &(tp, kept)) in counts.iter().enumerate().rev() {
        let p = (tp as u128, kept.max(1) as u128);
        if p.0 * best.1 > best.0 * p.1 {
            best = p;
        }
        interp[k] = best;
    }
    let (mut num, mut den) = (0u128, 1u128);
    let mut prev_tp = 0usize;
    for (&(tp, _), &(pn, pd)) in counts.iter().zip(&interp) {
        let step = tp.checked_sub(prev_tp)? as u128;
        prev_tp = tp;
        if step == 0 || pn == 0 {
            continue;
        }
        // num/den += step * pn / (pd * n_gt)
        let (tn, td) = (step.checked_mul(pn)?, pd.checked_mul(n_gt as u128)?);
        let g = gcd(den, td);
        let lcm = den.checked_mul(td / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(tn.checked_mul(lcm / td)?)?;
        den = lcm;
        let r = gcd(num, den);
        (num, den) = (num / r, den / r);
    }
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

/// Unweighted mean.
pub fn map_over_classes(aps: &[f64]) -> Result<f64, EvalError> {
    if aps.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `|ap_with - ap_without|` per MB (1024^2 bytes) of per-frame bandwidth.
pub fn aib(ap_with: f64, ap_without: f64, bytes_per_frame: f64) -> Result<f64, EvalError> {
    if !(bytes_per_frame > 0.0) {
        return Err(EvalError::ZeroBandwidth);
    }
    Ok((ap_with - ap_without).abs() / (bytes_per_frame / MB))
}

/// Greedy per-class suppression by bird's-eye IoU, highest score first.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && bev_iou(&k.bbox, &d.bbox).is_ok_and(|v| v > iou_threshold));
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Ground-truth subset an AP is computed over. Buckets are disjoint within
/// the occlusion levels and within the range classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    All,
    Easy,
    Moderate,
    Hard,
    Near,
    Far,
}

impl Bucket {
    pub const ALL: [Bucket; 6] = [Bucket::All, Bucket::Easy, Bucket::Moderate, Bucket::Hard, Bucket::Near, Bucket::Far];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::All => "All",
            Bucket::Easy => "Easy",
            Bucket::Moderate => "Moderate",
            Bucket::Hard => "Hard",
            Bucket::Near => "Near",
            Bucket::Far => "Far",
        }
    }

    pub fn contains(self, gt: &GroundTruth) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Easy => gt.tag.occlusion == Occlusion::Easy,
            Bucket::Moderate => gt.tag.occlusion == Occlusion::Moderate,
            Bucket::Hard => gt.tag.occlusion == Occlusion::Hard,
            Bucket::Near => gt.tag.range == RangeClass::Near,
            Bucket::Far => gt.tag.range == RangeClass::Far,
        }
    }
}

/// Detections and ground truth of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// AP of `class` in `bucket` pooled over frames; `None` without ground
/// truth in the bucket.
pub fn dataset_ap(frames: &[FrameResult], class: ObjectClass, bucket: Bucket, iou_threshold: f64) -> Result<Option<f64>, EvalError> {
    let matches = frames
        .iter()
        .map(|f| match_detections_in(&f.detections, &f.ground_truth, class, iou_threshold, 0.0, |g| bucket.contains(g)))
        .collect::<Result<Vec<_>, _>>()?;
    if matches.iter().all(|m| m.n_gt == 0) {
        return Ok(None);
    }
    Ok(Some(average_precision(&PrCurve::from_matches(&matches))))
}

/// AP per (class, bucket) and mAP per bucket for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub policy: String,
    pub ap: BTreeMap<(ObjectClass, Bucket), Option<f64>>,
    pub map: BTreeMap<Bucket, Option<f64>>,
    /// Mean counted bytes per frame.
    pub bytes_per_frame: f64,
    pub frames: usize,
}

pub fn evaluate_policy(policy: &str, frames: &[FrameResult], bytes_per_frame: f64, iou_threshold: f64) -> Result<PolicyEval, EvalError> {
    let mut ap = BTreeMap::new();
    let mut map = BTreeMap::new();
    for bucket in Bucket::ALL {
        let mut present = Vec::new();
        for class in ObjectClass::DETECTED {
            let v = dataset_ap(frames, class, bucket, iou_threshold)?;
            if let Some(x) = v {
                present.push(x);
            }
            ap.insert((class, bucket), v);
        }
        map.insert(bucket, map_over_classes(&present).ok());
    }
    Ok(PolicyEval { policy: policy.to_string(), ap, map, bytes_per_frame, frames: frames.len() })
}

impl PolicyEval {
    pub fn map_of(&self, bucket: Bucket) -> Option<f64> {
        self.map.get(&bucket).copied().flatten()
    }

    pub fn kb_per_frame(&self) -> f64 {
        self.bytes_per_frame / 1024.0
    }

    /// AIB against a baseline evaluation in `bucket`, on the 0-100 scale;
    /// `None` for zero bandwidth or missing mAP.
    pub fn aib_against(&self, baseline: &PolicyEval, bucket: Bucket) -> Option<f64> {
        let (a, b) = (self.map_of(bucket)?, baseline.map_of(bucket)?);
        aib(100.0 * a, 100.0 * b, self.bytes_per_frame).ok()
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// `policy,class,difficulty,AP` on the 0-100 scale.
pub fn ap_table(evals: &[PolicyEval]) -> String {
    let mut s = String::from("policy,class,difficulty,AP\n");
    for e in evals {
        for ((class, bucket), v) in &e.ap {
            let _ = writeln!(s, "{},{},{},{}", e.policy, class.name(), bucket.name(), pct(*v));
        }
    }
    s
}

/// `policy,difficulty,mAP`; also the plot-data triples.
pub fn map_table(evals: &[PolicyEval]) -> String {
    let mut s = String::from("policy,difficulty,mAP\n");
    for e in evals {
        for (bucket, v) in &e.map {
            let _ = writeln!(s, "{},{},{}", e.policy, bucket.name(), pct(*v));
        }
    }
    s
}

/// `policy,bytes_per_frame,KB_per_frame,AIB` with AIB against `baseline`
/// in `bucket`; `undefined` where bandwidth is zero.
pub fn bandwidth_table(evals: &[PolicyEval], baseline: &PolicyEval, bucket: Bucket) -> String {
    let mut s = String::from("policy,bytes_per_frame,KB_per_frame,AIB\n");
    for e in evals {
        let aib = e.aib_against(baseline, bucket).map_or_else(|| "undefined".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "{},{},{:.2},{}", e.policy, e.bytes_per_frame, e.kb_per_frame(), aib);
    }
    s
}

/// Fixed-width rendering of a comma-separated table.
pub fn render_text_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|v| v.len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:<w$}", w = widths[c])).collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use crate::rng::SeededRng;
    use crate::scenegen::DifficultyTag;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gt(x: f64, class: ObjectClass, occ: f64) -> GroundTruth {
        GroundTruth {
            id: x as u32,
            bbox: Box3D { center: [x, 0.0, 0.0], w: 1.8, l: 4.0, h: 1.5, yaw: 0.0 },
            class,
            tag: DifficultyTag::classify(occ, x.abs()),
        }
    }

    fn det(x: f64, score: f64) -> Detection {
        Detection { bbox: Box3D { center: [x, 0.0, 0.0], w: 1.8, l: 4.0, h: 1.5, yaw: 0.0 }, class: ObjectClass::Car, score, direction: 0.0 }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![gt(0.0, ObjectClass::Car, 0.0), gt(10.0, ObjectClass::Car, 0.0)];
        let m = match_detections(&[det(0.0, 0.9), det(10.0, 0.8)], &gts, ObjectClass::Car, 0.7).unwrap();
        assert_eq!(m.true_positives(), 2);
        assert!(m.gt_matched.iter().all(|&b| b));
        assert_eq!(average_precision(&PrCurve::from_matches([&m])), 1.0);
        let e = match_detections(&[], &gts, ObjectClass::Car, 0.7).unwrap();
        assert_eq!(e.recall(), 0.0);
        assert_eq!(average_precision(&PrCurve::from_matches([&e])), 0.0);
        assert!(match_detections(&[], &gts, ObjectClass::Car, 0.0).is_err());
    }

    #[test]
    fn duplicate_predictions() {
        let gts = vec![gt(0.0, ObjectClass::Car, 0.0)];
        let m = match_detections(&[det(0.1, 0.6), det(0.0, 0.9)], &gts, ObjectClass::Car, 0.5).unwrap();
        assert_eq!(m.predictions[0].index, 1);
        assert_eq!(m.predictions[0].outcome, Outcome::TruePositive { gt: 0 });
        assert_eq!(m.predictions[1].outcome, Outcome::FalsePositive);
        // exhaustive: among feasible one-to-one assignments, the one preferred
        // lexicographically in score order
        let preds = [det(0.1, 0.6), det(0.0, 0.9)];
        let by_score = [1usize, 0];
        let mut best: Option<Vec<bool>> = None;
        for a in [None, Some(0usize), Some(1usize)] {
            if let Some(p) = a {
                if iou_3d(&preds[p].bbox, &gts[0].bbox).unwrap() < 0.5 {
                    continue;
                }
            }
            let key: Vec<bool> = by_score.iter().map(|&p| a == Some(p)).collect();
            if best.as_ref().is_none_or(|b| key > *b) {
                best = Some(key);
            }
        }
        assert_eq!(best.unwrap(), vec![true, false]);
    }

    #[test]
    fn class_and_threshold_filtering() {
        let gts = vec![gt(0.0, ObjectClass::Truck, 0.0)];
        let m = match_detections(&[det(0.0, 0.9)], &gts, ObjectClass::Car, 0.5).unwrap();
        assert_eq!((m.n_gt, m.predictions.len()), (0, 1));
        assert_eq!(m.false_positives(), 1);
        let m = match_detections_in(&[det(0.0, 0.2)], &[gt(0.0, ObjectClass::Car, 0.0)], ObjectClass::Car, 0.5, 0.3, |_| true).unwrap();
        assert!(m.predictions.is_empty());
        let m = match_detections(&[det(1.5, 0.9)], &[gt(0.0, ObjectClass::Car, 0.0)], ObjectClass::Car, 0.7).unwrap();
        assert_eq!(m.false_positives(), 1);
    }

    #[test]
    fn worked_example_five_sixths() {
        let c = PrCurve::from_ranked(&[true, false, true], 2);
        assert_eq!(c.recalls, vec![0.5, 0.5, 1.0]);
        assert_eq!(c.precisions, vec![1.0, 0.5, 2.0 / 3.0]);
        assert_eq!(average_precision(&c), 5.0 / 6.0);
        assert_eq!(average_precision(&PrCurve::from_ranked(&[false, false], 2)), 0.0);
        assert_eq!(average_precision(&PrCurve::from_ranked(&[true], 1)), 1.0);
    }

    /// Integrates the interpolated precision envelope as a step function on
    /// a fine uniform recall grid.
    fn step_integral(outcomes: &[bool], n_gt: usize) -> f64 {
        let mut pts = Vec::new();
        let mut tp = 0;
        for (k, &o) in outcomes.iter().enumerate() {
            tp += usize::from(o);
            pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut breaks: Vec<f64> = vec![0.0];
        breaks.extend(pts.iter().map(|p| p.0));
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let env = pts.iter().filter(|p| p.0 >= mid).map(|p| p.1).fold(0.0, f64::max);
            total += env * (w[1] - w[0]);
        }
        total
    }

    #[test]
    fn matches_brute_force_integration() {
        let mut rng = SeededRng::new(99);
        for _ in 0..500 {
            let n_gt = 1 + rng.index(10);
            let n = rng.index(21);
            let mut left = n_gt;
            let outcomes: Vec<bool> = (0..n)
                .map(|_| {
                    let hit = left > 0 && rng.next_f64() < 0.5;
                    left -= usize::from(hit);
                    hit
                })
                .collect();
            let a = average_precision(&PrCurve::from_ranked(&outcomes, n_gt));
            assert!((a - step_integral(&outcomes, n_gt)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn ap_bounded_and_envelope_monotone(outcomes in proptest::collection::vec(any::<bool>(), 1..30), extra in 0usize..5) {
            let n_gt = outcomes.iter().filter(|&&o| o).count() + extra;
            prop_assume!(n_gt > 0);
            let c = PrCurve::from_ranked(&outcomes, n_gt);
            let ap = average_precision(&c);
            prop_assert!((0.0..=1.0).contains(&ap));
            let e = c.interpolated();
            prop_assert!(e.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.recalls.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn ap_invariant_under_monotone_rescaling(scores in proptest::collection::vec(0.01..0.99f64, 1..12)) {
            let gts: Vec<GroundTruth> = (0..scores.len()).map(|i| gt(10.0 * i as f64, ObjectClass::Car, 0.0)).collect();
            let dets: Vec<Detection> = scores.iter().enumerate().map(|(i, &s)| det(10.0 * i as f64 + if i % 3 == 0 { 3.0 } else { 0.0 }, s)).collect();
            let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
            let a = average_precision(&PrCurve::from_matches([&match_detections(&dets, &gts, ObjectClass::Car, 0.5).unwrap()]));
            let b = average_precision(&PrCurve::from_matches([&match_detections(&squashed, &gts, ObjectClass::Car, 0.5).unwrap()]));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn greedy_never_double_assigns(xs in proptest::collection::vec(-2.0..2.0f64, 1..10)) {
            let gts = vec![gt(0.0, ObjectClass::Car, 0.0), gt(1.0, ObjectClass::Car, 0.0)];
            let dets: Vec<Detection> = xs.iter().enumerate().map(|(i, &x)| det(x, 1.0 / (i + 1) as f64)).collect();
            let m = match_detections(&dets, &gts, ObjectClass::Car, 0.3).unwrap();
            let mut used = std::collections::HashSet::new();
            for p in &m.predictions {
                if let Outcome::TruePositive { gt } = p.outcome {
                    prop_assert!(used.insert(gt));
                }
            }
        }
    }

    #[test]
    fn tied_scores_form_one_cutoff() {
        let c = PrCurve::from_scored(vec![(0.5, false), (0.5, true), (0.9, true)], 2);
        assert_eq!(c.recalls, vec![0.5, 1.0]);
        assert_eq!(c.precisions, vec![1.0, 2.0 / 3.0]);
        let d = PrCurve::from_scored(vec![(0.5, true), (0.9, true), (0.5, false)], 2);
        assert_eq!(c, d);
    }

    #[test]
    fn map_examples() {
        assert_abs_diff_eq!(map_over_classes(&[93.03, 92.33]).unwrap(), 92.68, epsilon = 1e-9);
        assert_abs_diff_eq!(map_over_classes(&[88.42, 91.16]).unwrap(), 89.79, epsilon = 1e-9);
        assert_eq!(map_over_classes(&[0.7]).unwrap(), 0.7);
        assert!(map_over_classes(&[]).is_err());
    }

    #[test]
    fn aib_examples() {
        let kb = |k: f64| k * 1024.0;
        assert_abs_diff_eq!(aib(92.68, 88.12, kb(4608.0625)).unwrap(), 1.01, epsilon = 0.005);
        assert_abs_diff_eq!(aib(91.07, 88.12, kb(13824.0)).unwrap(), 0.22, epsilon = 0.005);
        assert_eq!(aib(90.0, 90.0, 1.0).unwrap(), 0.0);
        assert_eq!(aib(90.0, 80.0, 0.0), Err(EvalError::ZeroBandwidth));
    }

    #[test]
    fn nms_keeps_best_per_cluster() {
        let mut dets = vec![det(0.0, 0.5), det(0.2, 0.9), det(20.0, 0.4)];
        dets.push(Detection { class: ObjectClass::Truck, ..det(0.1, 0.3) });
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].score, 0.9);
        assert!(kept.iter().all(|d| d.score != 0.5));
    }

    #[test]
    fn buckets_ignore_out_of_bucket_matches() {
        let gts = vec![gt(5.0, ObjectClass::Car, 0.0), gt(30.0, ObjectClass::Car, 0.9)];
        let frames = vec![FrameResult { detections: vec![det(5.0, 0.9), det(30.0, 0.8)], ground_truth: gts }];
        assert_eq!(dataset_ap(&frames, ObjectClass::Car, Bucket::Easy, 0.7).unwrap(), Some(1.0));
        assert_eq!(dataset_ap(&frames, ObjectClass::Car, Bucket::Hard, 0.7).unwrap(), Some(1.0));
        assert_eq!(dataset_ap(&frames, ObjectClass::Car, Bucket::Moderate, 0.7).unwrap(), None);
        assert_eq!(dataset_ap(&frames, ObjectClass::Truck, Bucket::All, 0.7).unwrap(), None);
        let e = evaluate_policy("LocVehicle", &frames, 0.0, 0.7).unwrap();
        assert_eq!(e.map_of(Bucket::All), Some(1.0));
        assert_eq!(e.map_of(Bucket::Moderate), None);
    }

    #[test]
    fn pooled_ap_ignores_frame_order() {
        let mut rng = SeededRng::new(4);
        let mut frames = Vec::new();
        for f in 0..12 {
            let gts: Vec<GroundTruth> = (0..4).map(|i| gt(10.0 * i as f64 + 100.0 * f as f64, ObjectClass::Car, 0.0)).collect();
            let mut dets = Vec::new();
            for i in 0..4 {
                if rng.next_f64() < 0.7 {
                    let shift = if rng.next_f64() < 0.3 { 4.0 } else { 0.0 };
                    dets.push(det(10.0 * i as f64 + 100.0 * f as f64 + shift, (rng.index(4) as f64 + 1.0) / 5.0));
                }
            }
            frames.push(FrameResult { detections: dets, ground_truth: gts });
        }
        let a = dataset_ap(&frames, ObjectClass::Car, Bucket::All, 0.5).unwrap();
        frames.reverse();
        frames.swap(1, 7);
        assert_eq!(a, dataset_ap(&frames, ObjectClass::Car, Bucket::All, 0.5).unwrap());
    }

    #[test]
    fn report_tables() {
        let gts = vec![gt(5.0, ObjectClass::Car, 0.5)];
        let base = evaluate_policy("LocVehicle", &[FrameResult { detections: vec![], ground_truth: gts.clone() }], 0.0, 0.7).unwrap();
        let good = evaluate_policy("Learn2com", &[FrameResult { detections: vec![det(5.0, 0.9)], ground_truth: gts }], 4718656.0, 0.7).unwrap();
        let bw = bandwidth_table(&[base.clone(), good.clone()], &base, Bucket::Moderate);
        assert!(bw.contains("LocVehicle,0,0.00,undefined"));
        assert!(bw.contains("Learn2com,4718656,4608.06,22.22"));
        let t = map_table(&[good]);
        assert!(t.contains("Learn2com,Moderate,100.00"));
        assert!(t.contains("Learn2com,Hard,NA"));
        assert!(render_text_table(&bw).lines().nth(1).unwrap().starts_with("---"));
        assert!(ap_table(&[base]).starts_with("policy,class,difficulty,AP\nLocVehicle,Car,All,0.00\n"));
    }
}
