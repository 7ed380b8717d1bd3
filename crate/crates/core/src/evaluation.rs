//! Detection matching under a distance tolerance, counting metrics,
//! threshold selection and the multi-exemplar protocol.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counting::{count_map, detect_local_maxima, infer_similarity, CountMode, Exemplar};
use crate::data::{BBox, Image, Point, SimilarityMap};
use crate::error::{Error, Result};
use crate::model::Gmn;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)`
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub total_distance: f64,
}

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn–Munkres with
/// potentials, O(n³)). Returns `assignment[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// One-to-one matching of predictions to ground truth within distance `r`:
/// maximum number of matches first, then minimum total distance.
pub fn match_detections(preds: &[Point], gts: &[Point], r: f64) -> MatchResult {
    let (np, ng) = (preds.len(), gts.len());
    let n = np.max(ng);
    // any assignment with one more feasible pair is cheaper than all feasible distances combined
    let big = 2.0 * (np.min(ng) as f64 + 1.0) * r + 1.0;
    let mut cost = vec![vec![big; n]; n];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.distance(g);
            if d <= r {
                cost[i][j] = d;
            }
        }
    }
    let assignment = hungarian(&cost);
    let mut pairs = Vec::new();
    let mut total_distance = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        if i < np && j < ng {
            let d = preds[i].distance(&gts[j]);
            if d <= r {
                pairs.push((i, j));
                total_distance += d;
            }
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: np - tp,
        fn_: ng - tp,
        pairs,
        total_distance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub predicted_count: f64,
    pub true_count: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub images: Vec<ImageRecord>,
    pub threshold: Option<f64>,
    pub tolerance: f64,
    pub exemplars: usize,
}

pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if a + b > 0 { a as f64 / (a + b) as f64 } else { 0.0 };
    let p = ratio(tp, fp);
    let r = ratio(tp, fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Micro-averaged precision/recall/F1 over summed TP/FP/FN, MAE over image counts.
pub fn compute_metrics(records: Vec<ImageRecord>, tolerance: f64, threshold: Option<f64>, exemplars: usize) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let tp = records.iter().map(|r| r.tp).sum();
    let fp = records.iter().map(|r| r.fp).sum();
    let fn_ = records.iter().map(|r| r.fn_).sum();
    let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
    let mae = records
        .iter()
        .map(|r| (r.predicted_count - r.true_count).abs())
        .sum::<f64>()
        / records.len() as f64;
    Ok(EvalReport {
        mae,
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        images: records,
        threshold,
        tolerance,
        exemplars,
    })
}

/// Record for one image given its detections and ground truth.
pub fn image_record(id: impl Into<String>, preds: &[Point], gts: &[Point], predicted_count: f64, r: f64) -> ImageRecord {
    let m = match_detections(preds, gts, r);
    ImageRecord {
        id: id.into(),
        predicted_count,
        true_count: gts.len() as f64,
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: f64,
}

/// Best row: highest F1, then highest recall, then smallest threshold.
pub fn choose_threshold(rows: &[SweepRow]) -> Result<&SweepRow> {
    rows.iter()
        .min_by(|a, b| {
            b.f1.total_cmp(&a.f1)
                .then(b.recall.total_cmp(&a.recall))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .ok_or_else(|| Error::InvalidArgument("no candidate thresholds".into()))
}

/// A validation map with its ground-truth points.
#[derive(Clone, Debug)]
pub struct LabeledMap {
    pub id: String,
    pub map: SimilarityMap,
    pub points: Vec<Point>,
}

/// Local-max metrics for every candidate threshold.
pub fn threshold_sweep(maps: &[LabeledMap], candidates: &[f64], r: f64, min_distance: f64) -> Result<Vec<SweepRow>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate thresholds".into()));
    }
    candidates
        .iter()
        .map(|&t| {
            let records = maps
                .iter()
                .map(|m| {
                    let det = detect_local_maxima(&m.map, t, min_distance);
                    image_record(m.id.clone(), &det.points(), &m.points, det.len() as f64, r)
                })
                .collect();
            let rep = compute_metrics(records, r, Some(t), 1)?;
            Ok(SweepRow {
                threshold: t,
                precision: rep.precision,
                recall: rep.recall,
                f1: rep.f1,
                mae: rep.mae,
            })
        })
        .collect()
}

pub fn select_threshold(maps: &[LabeledMap], candidates: &[f64], r: f64, min_distance: f64) -> Result<f64> {
    let rows = threshold_sweep(maps, candidates, r, min_distance)?;
    Ok(choose_threshold(&rows)?.threshold)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("T,P,R,F1,MAE\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.threshold, r.precision, r.recall, r.f1, r.mae
        ));
    }
    s
}

/// Tolerance from box annotations: mean of `√(w·h)` halved.
pub fn radius_from_boxes(boxes: &[BBox]) -> Option<f64> {
    if boxes.is_empty() {
        return None;
    }
    Some(boxes.iter().map(|b| (b.w * b.h).sqrt()).sum::<f64>() / boxes.len() as f64 / 2.0)
}

#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    pub image: Image,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExemplarSettings {
    pub k: usize,
    pub mode: CountMode,
    pub threshold: f64,
    pub tolerance: f64,
    /// Suppression radius; `None` uses each exemplar's radius.
    pub min_distance: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExemplarReport {
    /// One report per exemplar slot (slot `j` uses the `j`-th draw for every image).
    pub runs: Vec<EvalReport>,
    pub mean_mae: f64,
    /// Population standard deviation of MAE across slots.
    pub mae_std: f64,
    pub mae_range: f64,
}

impl MultiExemplarReport {
    /// Spread relative to the mean MAE (0 when the mean is 0).
    pub fn relative_spread(&self) -> f64 {
        if self.mean_mae > 0.0 {
            self.mae_std / self.mean_mae
        } else {
            0.0
        }
    }
}

/// Counts every test image with `k` exemplars drawn from `pool`.
pub fn multi_exemplar_eval(model: &Gmn<f32>, test: &[EvalImage], pool: &[Exemplar], s: &MultiExemplarSettings) -> Result<MultiExemplarReport> {
    if s.k == 0 || pool.len() < s.k {
        return Err(Error::InvalidArgument(format!(
            "exemplar pool has {} patches, {} requested",
            pool.len(),
            s.k
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let draws: Vec<Vec<&Exemplar>> = test.iter().map(|_| pool.choose_multiple(&mut rng, s.k).collect()).collect();
    let mut runs = Vec::with_capacity(s.k);
    for slot in 0..s.k {
        let mut records = Vec::with_capacity(test.len());
        for (img, ex) in test.iter().zip(&draws) {
            let ex = ex[slot];
            let map = infer_similarity(model, &img.image, ex)?;
            let md = s.min_distance.unwrap_or_else(|| ex.radius());
            let result = count_map(&map, s.mode, s.threshold, md);
            let det = detect_local_maxima(&map, s.threshold, md);
            records.push(image_record(img.id.clone(), &det.points(), &img.points, result.count, s.tolerance));
        }
        runs.push(compute_metrics(records, s.tolerance, Some(s.threshold), 1)?);
    }
    let maes: Vec<f64> = runs.iter().map(|r| r.mae).collect();
    let mean_mae = maes.iter().sum::<f64>() / maes.len() as f64;
    let mae_std = (maes.iter().map(|m| (m - mean_mae).powi(2)).sum::<f64>() / maes.len() as f64).sqrt();
    let mae_range = maes.iter().cloned().fold(f64::MIN, f64::max) - maes.iter().cloned().fold(f64::MAX, f64::min);
    Ok(MultiExemplarReport {
        runs,
        mean_mae,
        mae_std,
        mae_range,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    /// Exhaustive search: best (cardinality, -distance) over all partial matchings.
    fn brute_force(preds: &[Point], gts: &[Point], r: f64) -> (usize, f64) {
        #[allow(clippy::too_many_arguments)]
        fn go(i: usize, preds: &[Point], gts: &[Point], r: f64, used: &mut Vec<bool>, k: usize, d: f64, best: &mut (usize, f64)) {
            if i == preds.len() {
                if k > best.0 || (k == best.0 && d < best.1) {
                    *best = (k, d);
                }
                return;
            }
            go(i + 1, preds, gts, r, used, k, d, best);
            for j in 0..gts.len() {
                let dist = preds[i].distance(&gts[j]);
                if !used[j] && dist <= r {
                    used[j] = true;
                    go(i + 1, preds, gts, r, used, k + 1, d + dist, best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        go(0, preds, gts, r, &mut vec![false; gts.len()], 0, 0.0, &mut best);
        best
    }

    #[test]
    fn matching_examples() {
        let g = pts(&[(10.0, 10.0), (50.0, 50.0)]);
        let m = match_detections(&g, &g, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        let m = match_detections(&[], &g, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
        let m = match_detections(&pts(&[(12.0, 11.0), (80.0, 80.0)]), &g, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(match_detections(&[], &[], 5.0), MatchResult::default());
    }

    #[test]
    fn cardinality_beats_distance() {
        // greedy nearest matching would pair p0-g0 and strand p1
        let preds = pts(&[(0.0, 0.0), (-4.0, 0.0)]);
        let gts = pts(&[(-1.0, 0.0), (3.0, 0.0)]);
        let m = match_detections(&preds, &gts, 4.0);
        assert_eq!(m.tp, 2);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(precision_recall_f1(1, 1, 1), (0.5, 0.5, 0.5));
        assert_eq!(precision_recall_f1(0, 3, 0).2, 0.0);
        let rec = |p: f64, t: f64| ImageRecord { id: String::new(), predicted_count: p, true_count: t, tp: 0, fp: 0, fn_: 0 };
        let rep = compute_metrics(vec![rec(10.0, 11.0), rec(12.0, 11.0)], 5.0, None, 1).unwrap();
        assert_eq!(rep.mae, 1.0);
        assert!(compute_metrics(vec![], 5.0, None, 1).is_err());
    }

    fn row(t: f64, p: f64, r: f64, f1: f64) -> SweepRow {
        SweepRow { threshold: t, precision: p, recall: r, f1, mae: 0.0 }
    }

    #[test]
    fn threshold_choice_rules() {
        assert_eq!(choose_threshold(&[row(1.0, 0.1, 0.1, 0.1)]).unwrap().threshold, 1.0);
        let tie = [row(2.0, 0.9, 0.7, 0.8), row(3.0, 0.7, 0.9, 0.8)];
        assert_eq!(choose_threshold(&tie).unwrap().threshold, 3.0);
        let same = [row(3.0, 0.5, 0.5, 0.5), row(2.0, 0.5, 0.5, 0.5)];
        assert_eq!(choose_threshold(&same).unwrap().threshold, 2.0);
        // hand-built precision/recall table peaking at 2.75
        let table: Vec<SweepRow> = [(2.0, 0.60, 0.95), (2.5, 0.72, 0.92), (2.75, 0.85, 0.90), (3.0, 0.90, 0.78), (3.5, 0.95, 0.60)]
            .iter()
            .map(|&(t, p, r)| row(t, p, r, 2.0 * p * r / (p + r)))
            .collect();
        assert_eq!(choose_threshold(&table).unwrap().threshold, 2.75);
        assert!(choose_threshold(&[]).is_err());
        let csv = sweep_csv(&table);
        assert!(csv.starts_with("T,P,R,F1,MAE\n2,0.600000"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn sweep_over_maps_picks_the_separating_threshold() {
        use crate::data::GridGeometry;
        let g = GridGeometry { stride: 1.0, offset_x: 0.0, offset_y: 0.0 };
        let mut map = SimilarityMap::zeros(20, 20, g);
        map.values[5 * 20 + 5] = 4.0; // true object
        map.values[15 * 20 + 15] = 2.0; // clutter
        let maps = [LabeledMap { id: "a".into(), map, points: pts(&[(5.0, 5.0)]) }];
        assert_eq!(select_threshold(&maps, &[1.0, 2.5, 4.5], 2.0, 3.0).unwrap(), 2.5);
        assert!(select_threshold(&maps, &[], 2.0, 3.0).is_err());
    }

    #[test]
    fn radius_from_box_sizes() {
        assert_eq!(radius_from_boxes(&[BBox::new(0.0, 0.0, 20.0, 20.0), BBox::new(0.0, 0.0, 10.0, 40.0)]), Some(10.0));
        assert_eq!(radius_from_boxes(&[]), None);
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<Point>> {
        proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0).prop_map(|(x, y)| Point::new(x, y)), 0..=max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1500))]

        #[test]
        fn hungarian_equals_exhaustive_search(preds in arb_points(6), gts in arb_points(6), r in 1.0f64..15.0) {
            let m = match_detections(&preds, &gts, r);
            let (k, d) = brute_force(&preds, &gts, r);
            prop_assert_eq!(m.tp, k);
            prop_assert!((m.total_distance - d).abs() < 1e-9);
            prop_assert_eq!(m.tp + m.fp, preds.len());
            prop_assert_eq!(m.tp + m.fn_, gts.len());
            for &(i, j) in &m.pairs {
                prop_assert!(preds[i].distance(&gts[j]) <= r);
            }
        }

        #[test]
        fn matches_grow_with_tolerance(preds in arb_points(8), gts in arb_points(8), r in 0.5f64..10.0, dr in 0.0f64..10.0) {
            prop_assert!(match_detections(&preds, &gts, r).tp <= match_detections(&preds, &gts, r + dr).tp);
        }
    }
}
