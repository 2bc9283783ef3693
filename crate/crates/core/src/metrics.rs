//! Pixel-wise evaluation: threshold-swept confusion counts, MaxF, 11-point
//! average precision, PRE/REC/FPR/FNR and BinaryIoU, pooled per scene
//! category.
//!
//! Confidences are quantized to 8 bits (round half away from zero, the same
//! quantization as the emitted PNG maps) and swept over all 256 thresholds
//! `t`, a pixel counting as positive when `round(255*p) >= t`. Aggregation
//! pools integer confusion counts across scenes before deriving any ratio.

use crate::error::{Error, Result};
use crate::kitti::{quantize_unit, Category, ConfidenceMap, GtMaskPair};

/// Pixel confusion counts over valid pixels only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        let denom = self.false_pos + self.true_neg;
        if denom == 0 {
            0.0
        } else {
            self.false_pos as f64 / denom as f64
        }
    }

    pub fn fnr(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.false_neg as f64 / denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// (road IoU, background IoU, their mean); a class with an empty union
    /// scores 1.
    pub fn iou(&self) -> (f64, f64, f64) {
        let road_union = self.true_pos + self.false_pos + self.false_neg;
        let iou_road = if road_union == 0 {
            1.0
        } else {
            self.true_pos as f64 / road_union as f64
        };
        let bg_union = self.true_neg + self.false_pos + self.false_neg;
        let iou_bg = if bg_union == 0 {
            1.0
        } else {
            self.true_neg as f64 / bg_union as f64
        };
        (iou_road, iou_bg, 0.5 * (iou_road + iou_bg))
    }
}

fn check_shapes(conf: &ConfidenceMap, gt: &GtMaskPair) -> Result<()> {
    if conf.height != gt.height() || conf.width != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "confidence {}x{} vs ground truth {}x{}",
            conf.height,
            conf.width,
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Confusion counts at one 8-bit threshold: positive iff round(255*p) >= t.
pub fn confusion_at_threshold(
    conf: &ConfidenceMap,
    gt: &GtMaskPair,
    threshold: u8,
) -> Result<ConfusionCounts> {
    check_shapes(conf, gt)?;
    let mut counts = ConfusionCounts::default();
    for i in 0..conf.data.len() {
        if !gt.valid()[i] {
            continue;
        }
        let positive = quantize_unit(conf.data[i]) >= threshold;
        match (positive, gt.road()[i]) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, true) => counts.false_neg += 1,
            (false, false) => counts.true_neg += 1,
        }
    }
    Ok(counts)
}

/// Per-level pixel counts of one or more scenes: how many valid road /
/// background pixels were quantized to each of the 256 confidence levels.
/// Confusion counts at every threshold derive from suffix sums, and pooling
/// scenes is plain addition.
#[derive(Clone)]
pub struct PixelHistogram {
    road: [u64; 256],
    background: [u64; 256],
}

impl Default for PixelHistogram {
    fn default() -> Self {
        Self {
            road: [0; 256],
            background: [0; 256],
        }
    }
}

impl PixelHistogram {
    pub fn from_confidence(conf: &ConfidenceMap, gt: &GtMaskPair) -> Result<Self> {
        check_shapes(conf, gt)?;
        let mut hist = Self::default();
        for i in 0..conf.data.len() {
            if !gt.valid()[i] {
                continue;
            }
            let level = quantize_unit(conf.data[i]) as usize;
            if gt.road()[i] {
                hist.road[level] += 1;
            } else {
                hist.background[level] += 1;
            }
        }
        Ok(hist)
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..256 {
            self.road[i] += other.road[i];
            self.background[i] += other.background[i];
        }
    }

    pub fn road_total(&self) -> u64 {
        self.road.iter().sum()
    }

    pub fn valid_total(&self) -> u64 {
        self.road_total() + self.background.iter().sum::<u64>()
    }

    pub fn counts_at(&self, threshold: u8) -> ConfusionCounts {
        let t = threshold as usize;
        let true_pos: u64 = self.road[t..].iter().sum();
        let false_pos: u64 = self.background[t..].iter().sum();
        ConfusionCounts {
            true_pos,
            false_pos,
            false_neg: self.road_total() - true_pos,
            true_neg: self.background.iter().sum::<u64>() - false_pos,
        }
    }

    /// Counts at the quantized 0.5 threshold.
    pub fn counts_at_half(&self) -> ConfusionCounts {
        self.counts_at(quantize_unit(0.5))
    }
}

/// One threshold of the sweep.
#[derive(Clone, Copy, Debug)]
pub struct PrCurvePoint {
    pub threshold: u8,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion counts and precision/recall at all 256 thresholds.
#[derive(Clone, Debug)]
pub struct PrCurve {
    pub points: Vec<PrCurvePoint>,
}

impl PrCurve {
    pub fn from_histogram(hist: &PixelHistogram) -> Result<Self> {
        if hist.road_total() == 0 {
            return Err(Error::DegenerateInput(
                "precision/recall sweep needs at least one valid road pixel".into(),
            ));
        }
        let points = (0..=255u8)
            .map(|t| {
                let counts = hist.counts_at(t);
                PrCurvePoint {
                    threshold: t,
                    counts,
                    precision: counts.precision(),
                    recall: counts.recall(),
                }
            })
            .collect();
        Ok(Self { points })
    }
}

/// Sweep a single scene.
pub fn pr_curve(conf: &ConfidenceMap, gt: &GtMaskPair) -> Result<PrCurve> {
    PrCurve::from_histogram(&PixelHistogram::from_confidence(conf, gt)?)
}

/// Maximum F1 over the sweep; ties resolve to the lowest threshold.
pub fn max_f1(curve: &PrCurve) -> (f64, u8) {
    let mut best = f64::NEG_INFINITY;
    let mut best_t = 0u8;
    for point in &curve.points {
        let f1 = point.counts.f1();
        if f1 > best {
            best = f1;
            best_t = point.threshold;
        }
    }
    (best, best_t)
}

/// 11-point interpolated average precision: the mean over recall levels
/// r in {0, 0.1, ..., 1.0} of max{precision(t) : recall(t) >= r}, taking 0
/// at levels no threshold reaches.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut total = 0.0;
    for level in 0..=10u32 {
        let r = f64::from(level) / 10.0;
        let mut p_interp = 0.0;
        for point in &curve.points {
            if point.recall >= r && point.precision > p_interp {
                p_interp = point.precision;
            }
        }
        total += p_interp;
    }
    total / 11.0
}

/// Class IoUs at a real-valued threshold (quantized to 8 bits):
/// (road, background, mean).
pub fn binary_iou(
    conf: &ConfidenceMap,
    gt: &GtMaskPair,
    threshold: f64,
) -> Result<(f64, f64, f64)> {
    let counts = confusion_at_threshold(conf, gt, quantize_unit(threshold))?;
    Ok(counts.iou())
}

/// Derived metrics of one pooled group.
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub max_f1: f64,
    pub best_threshold: u8,
    pub ap: f64,
    /// Precision/recall/FPR/FNR at the best threshold.
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// Class IoUs at threshold 0.5.
    pub iou_road: f64,
    pub iou_background: f64,
    pub binary_iou_mean: f64,
}

impl MetricReport {
    pub fn from_histogram(hist: &PixelHistogram) -> Result<Self> {
        let curve = PrCurve::from_histogram(hist)?;
        let (max_f1_value, best_threshold) = max_f1(&curve);
        let at_best = &curve.points[best_threshold as usize];
        let at_half = hist.counts_at(quantize_unit(0.5));
        let (iou_road, iou_background, binary_iou_mean) = at_half.iou();
        Ok(Self {
            max_f1: max_f1_value,
            best_threshold,
            ap: average_precision(&curve),
            precision: at_best.counts.precision(),
            recall: at_best.counts.recall(),
            fpr: at_best.counts.fpr(),
            fnr: at_best.counts.fnr(),
            iou_road,
            iou_background,
            binary_iou_mean,
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "maxf={:.6}\nap={:.6}\npre={:.6}\nrec={:.6}\nfpr={:.6}\nfnr={:.6}\niou_road={:.6}\niou_bg={:.6}\nbiou={:.6}\n",
            self.max_f1,
            self.ap,
            self.precision,
            self.recall,
            self.fpr,
            self.fnr,
            self.iou_road,
            self.iou_background,
            self.binary_iou_mean
        )
    }
}

/// How scenes pool into report rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One row per present category plus a pooled URBAN row.
    Category,
    /// A single pooled row.
    Overall,
}

/// One pooled report row.
pub struct GroupReport {
    pub name: String,
    pub scene_count: usize,
    pub report: MetricReport,
}

/// Pool per-scene histograms into group reports. Confusion counts are
/// summed pixel-wise before any ratio is derived.
pub fn aggregate(
    scenes: &[(Category, PixelHistogram)],
    grouping: Grouping,
) -> Result<Vec<GroupReport>> {
    if scenes.is_empty() {
        return Err(Error::DegenerateInput(
            "aggregate requires at least one scene".into(),
        ));
    }
    let pool = |filter: Option<Category>| -> (usize, PixelHistogram) {
        let mut hist = PixelHistogram::default();
        let mut count = 0;
        for (category, scene_hist) in scenes {
            if filter.is_none() || filter == Some(*category) {
                hist.merge(scene_hist);
                count += 1;
            }
        }
        (count, hist)
    };

    let mut groups = Vec::new();
    match grouping {
        Grouping::Overall => {
            let (count, hist) = pool(None);
            groups.push(GroupReport {
                name: "OVERALL".into(),
                scene_count: count,
                report: MetricReport::from_histogram(&hist)?,
            });
        }
        Grouping::Category => {
            for category in [Category::UM, Category::UMM, Category::UU] {
                let (count, hist) = pool(Some(category));
                if count == 0 {
                    continue;
                }
                groups.push(GroupReport {
                    name: format!("{category}_ROAD"),
                    scene_count: count,
                    report: MetricReport::from_histogram(&hist)?,
                });
            }
            let (count, hist) = pool(None);
            groups.push(GroupReport {
                name: "URBAN_ROAD".into(),
                scene_count: count,
                report: MetricReport::from_histogram(&hist)?,
            });
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf_gt(conf: Vec<f64>, road: Vec<bool>, valid: Vec<bool>) -> (ConfidenceMap, GtMaskPair) {
        let n = conf.len();
        (
            ConfidenceMap::new(1, n, conf).unwrap(),
            GtMaskPair::new(1, n, road, valid).unwrap(),
        )
    }

    #[test]
    fn perfect_prediction_is_perfect_everywhere() {
        let (conf, gt) = conf_gt(
            vec![1.0, 0.0, 1.0, 0.0],
            vec![true, false, true, false],
            vec![true; 4],
        );
        let counts = confusion_at_threshold(&conf, &gt, 128).unwrap();
        assert_eq!(counts.false_pos, 0);
        assert_eq!(counts.false_neg, 0);
        let curve = pr_curve(&conf, &gt).unwrap();
        assert_eq!(max_f1(&curve).0, 1.0);
        assert_eq!(average_precision(&curve), 1.0);
        assert_eq!(binary_iou(&conf, &gt, 0.5).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn threshold_zero_predicts_everything_positive() {
        let (conf, gt) = conf_gt(
            vec![0.9, 0.1, 0.4, 0.0],
            vec![true, false, true, false],
            vec![true; 4],
        );
        let counts = confusion_at_threshold(&conf, &gt, 0).unwrap();
        assert_eq!(counts.false_neg, 0);
        assert_eq!(counts.true_neg, 0);
        assert_eq!(counts.true_pos, 2);
        assert_eq!(counts.false_pos, 2);
    }

    #[test]
    fn counts_ignore_invalid_pixels() {
        let (conf, gt) = conf_gt(
            vec![1.0, 1.0, 0.0],
            vec![true, false, false],
            vec![true, false, true],
        );
        let counts = confusion_at_threshold(&conf, &gt, 128).unwrap();
        assert_eq!(counts.total(), 2);
        assert_eq!(counts.true_pos, 1);
        assert_eq!(counts.true_neg, 1);
    }

    #[test]
    fn confident_everywhere_on_half_road_gt() {
        // Precision 1/2 and recall 1 at every threshold: F1 = 2/3, AP = 0.5.
        let (conf, gt) = conf_gt(
            vec![1.0; 8],
            vec![true, false, true, false, true, false, true, false],
            vec![true; 8],
        );
        let curve = pr_curve(&conf, &gt).unwrap();
        let (f1, t) = max_f1(&curve);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(t, 0);
        assert_eq!(average_precision(&curve), 0.5);
    }

    #[test]
    fn pr_curve_requires_a_road_pixel() {
        let (conf, gt) = conf_gt(vec![0.5, 0.5], vec![false, false], vec![true, true]);
        assert!(matches!(pr_curve(&conf, &gt), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn iou_spot_value_and_f1_identity() {
        let counts = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            false_neg: 1,
            true_neg: 10,
        };
        let (iou_road, _, _) = counts.iou();
        assert!((iou_road - 0.6).abs() < 1e-15);
        let f1 = counts.f1();
        assert!((f1 - 0.75).abs() < 1e-15);
        assert!((iou_road - f1 / (2.0 - f1)).abs() < 1e-12);
    }

    #[test]
    fn predicted_positive_count_is_non_increasing_in_threshold() {
        let conf_vals: Vec<f64> = (0..64).map(|i| f64::from(i) / 63.0).collect();
        let road: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let (conf, gt) = conf_gt(conf_vals, road, vec![true; 64]);
        let curve = pr_curve(&conf, &gt).unwrap();
        let mut last = u64::MAX;
        for p in &curve.points {
            let pp = p.counts.true_pos + p.counts.false_pos;
            assert!(pp <= last);
            assert!(p.counts.total() == 64);
            assert!((0.0..=1.0).contains(&p.precision));
            assert!((0.0..=1.0).contains(&p.recall));
            assert!((p.counts.fnr() - (1.0 - p.recall)).abs() < 1e-15);
            last = pp;
        }
    }

    #[test]
    fn interpolated_precision_is_non_increasing_in_recall_level() {
        let conf_vals: Vec<f64> = (0..40).map(|i| f64::from((i * 37) % 41) / 41.0).collect();
        let road: Vec<bool> = (0..40).map(|i| i % 4 != 1).collect();
        let (conf, gt) = conf_gt(conf_vals, road, vec![true; 40]);
        let curve = pr_curve(&conf, &gt).unwrap();
        let mut last = f64::INFINITY;
        for level in 0..=10u32 {
            let r = f64::from(level) / 10.0;
            let p = curve
                .points
                .iter()
                .filter(|pt| pt.recall >= r)
                .map(|pt| pt.precision)
                .fold(0.0, f64::max);
            assert!(p <= last + 1e-15);
            last = p;
        }
    }

    #[test]
    fn max_f1_at_least_f1_at_half() {
        let conf_vals: Vec<f64> = (0..50).map(|i| f64::from((i * 13) % 17) / 17.0).collect();
        let road: Vec<bool> = (0..50).map(|i| (i * 7) % 5 < 2).collect();
        let (conf, gt) = conf_gt(conf_vals, road, vec![true; 50]);
        let curve = pr_curve(&conf, &gt).unwrap();
        let f1_half = confusion_at_threshold(&conf, &gt, 128).unwrap().f1();
        assert!(max_f1(&curve).0 >= f1_half);
    }

    #[test]
    fn aggregate_pools_counts_not_ratios() {
        // Scene 1: tp=1, fp=0 (precision 1). Scene 2: tp=0, fp=1
        // (precision 0). Pooled counts give precision 0.5.
        let (conf_a, gt_a) = conf_gt(vec![1.0, 0.0], vec![true, true], vec![true, true]);
        let (conf_b, gt_b) = conf_gt(vec![1.0, 0.0], vec![false, true], vec![true, true]);
        let hist_a = PixelHistogram::from_confidence(&conf_a, &gt_a).unwrap();
        let hist_b = PixelHistogram::from_confidence(&conf_b, &gt_b).unwrap();
        let mut pooled = hist_a.clone();
        pooled.merge(&hist_b);
        assert_eq!(pooled.counts_at_half().precision(), 0.5);

        // Unequal scene sizes separate pooling from ratio averaging:
        // tp=3/fp=0 pooled with tp=0/fp=1 gives 0.75, not (1 + 0)/2.
        let (conf_c, gt_c) = conf_gt(vec![1.0; 3], vec![true; 3], vec![true; 3]);
        let hist_c = PixelHistogram::from_confidence(&conf_c, &gt_c).unwrap();
        let mut pooled = hist_c;
        pooled.merge(&hist_b);
        assert_eq!(pooled.counts_at_half().precision(), 0.75);
    }

    #[test]
    fn aggregate_single_scene_equals_its_own_report() {
        let (conf, gt) = conf_gt(
            vec![0.9, 0.2, 0.7, 0.1],
            vec![true, false, true, false],
            vec![true; 4],
        );
        let hist = PixelHistogram::from_confidence(&conf, &gt).unwrap();
        let own = MetricReport::from_histogram(&hist).unwrap();
        let groups = aggregate(&[(Category::UU, hist)], Grouping::Category).unwrap();
        // UU row plus the URBAN pool of the same single scene.
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].name, "UU_ROAD");
        assert_eq!(groups[1].name, "URBAN_ROAD");
        for g in groups {
            assert_eq!(g.report.max_f1, own.max_f1);
            assert_eq!(g.report.ap, own.ap);
            assert_eq!(g.report.binary_iou_mean, own.binary_iou_mean);
        }
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(aggregate(&[], Grouping::Overall).is_err());
    }

    #[test]
    fn urban_pools_all_categories() {
        let mk = |road_val: f64| {
            let (conf, gt) = conf_gt(vec![road_val, 0.0], vec![true, false], vec![true, true]);
            PixelHistogram::from_confidence(&conf, &gt).unwrap()
        };
        let groups = aggregate(
            &[
                (Category::UM, mk(1.0)),
                (Category::UMM, mk(1.0)),
                (Category::UU, mk(0.0)),
            ],
            Grouping::Category,
        )
        .unwrap();
        let names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["UM_ROAD", "UMM_ROAD", "UU_ROAD", "URBAN_ROAD"]);
        let urban = groups.last().unwrap();
        assert_eq!(urban.scene_count, 3);
        // Two of the three road pixels are recovered at threshold 0.5.
        assert!((urban.report.iou_road - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_invariant_under_simultaneous_fliplr() {
        let h = 4;
        let w = 8;
        let conf_vals: Vec<f64> = (0..h * w).map(|i| ((i * 29) % 31) as f64 / 31.0).collect();
        let road: Vec<bool> = (0..h * w).map(|i| (i * 11) % 7 < 3).collect();
        let valid: Vec<bool> = (0..h * w).map(|i| i % 9 != 0).collect();
        let road = road
            .iter()
            .zip(&valid)
            .map(|(&r, &v)| r && v)
            .collect::<Vec<_>>();
        let conf = ConfidenceMap::new(h, w, conf_vals.clone()).unwrap();
        let gt = GtMaskPair::new(h, w, road.clone(), valid.clone()).unwrap();

        let flip_f = |data: &[f64]| {
            let mut out = vec![0.0; data.len()];
            for r in 0..h {
                for c in 0..w {
                    out[r * w + c] = data[r * w + (w - 1 - c)];
                }
            }
            out
        };
        let conf_flipped = ConfidenceMap::new(h, w, flip_f(&conf_vals)).unwrap();
        let gt_flipped = gt.fliplr();

        let a = MetricReport::from_histogram(
            &PixelHistogram::from_confidence(&conf, &gt).unwrap(),
        )
        .unwrap();
        let b = MetricReport::from_histogram(
            &PixelHistogram::from_confidence(&conf_flipped, &gt_flipped).unwrap(),
        )
        .unwrap();
        assert_eq!(a.max_f1.to_bits(), b.max_f1.to_bits());
        assert_eq!(a.ap.to_bits(), b.ap.to_bits());
        assert_eq!(a.binary_iou_mean.to_bits(), b.binary_iou_mean.to_bits());
        assert_eq!(a.best_threshold, b.best_threshold);
    }
}
