//! Location-aware detection scores: F within 20 degrees and relative distance 1, its
//! on-screen variant, DOA error, relative distance error and on/off-screen accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{angular_distance, Event, SeldFrameLabels};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub angle_thresh_deg: f64,
    pub rel_dist_thresh: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { angle_thresh_deg: 20.0, rel_dist_thresh: 1.0 }
    }
}

/// One-to-one pairing of reference and predicted events within a class-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// `(ref index, pred index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub total_error: f64,
}

/// Pairs `min(refs, preds)` events so the summed azimuth error is smallest. Search is
/// exhaustive; ties keep the first pairing in lexicographic order of prediction indices.
pub fn match_frame(refs: &[Event], preds: &[Event]) -> FrameMatch {
    #[allow(clippy::too_many_arguments)]
    fn search(
        refs: &[Event],
        preds: &[Event],
        r: usize,
        skips_left: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cost: f64,
        best: &mut Option<FrameMatch>,
    ) {
        if r == refs.len() {
            if best.as_ref().is_none_or(|b| cost < b.total_error) {
                *best = Some(FrameMatch { pairs: cur.clone(), total_error: cost });
            }
            return;
        }
        for p in 0..preds.len() {
            if used[p] {
                continue;
            }
            used[p] = true;
            cur.push((r, p));
            let e = angular_distance(refs[r].azimuth_deg, preds[p].azimuth_deg);
            search(refs, preds, r + 1, skips_left, used, cur, cost + e, best);
            cur.pop();
            used[p] = false;
        }
        // With more refs than preds some refs stay unmatched.
        if skips_left > 0 {
            search(refs, preds, r + 1, skips_left - 1, used, cur, cost, best);
        }
    }
    let skips = refs.len().saturating_sub(preds.len());
    let mut best = None;
    search(refs, preds, 0, skips, &mut vec![false; preds.len()], &mut Vec::new(), 0.0, &mut best);
    best.unwrap_or(FrameMatch { pairs: Vec::new(), total_error: 0.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `2 TP / (2 TP + FP + FN)` in percent.
    pub fn f_score(&self) -> f64 {
        if self.is_empty() { 100.0 } else { 200.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub counts: Counts,
    pub counts_on: Counts,
    pub f: Option<f64>,
    pub f_on: Option<f64>,
    pub n_matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro-averaged F within 20 degrees and relative distance 1, percent.
    pub f_le20_1: f64,
    /// Same with both sides flagged on-screen, percent.
    pub f_le20_1_on: f64,
    /// Mean azimuth error of matched pairs in degrees; `None` without pairs.
    pub doae: Option<f64>,
    /// Mean relative distance error of matched pairs, percent.
    pub rde: Option<f64>,
    /// On/off-screen agreement of matched pairs, percent.
    pub onoff_acc: Option<f64>,
    pub per_class: Vec<ClassReport>,
}

fn macro_average(scores: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = scores.flatten().collect();
    if v.is_empty() { 100.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Scores predictions against references on the shared 100 ms grid.
///
/// A matched pair counts as a true positive when its azimuth error and relative distance
/// error both pass the gates. Classes without any reference or prediction are left out
/// of the macro average.
pub fn evaluate(refs: &SeldFrameLabels, preds: &SeldFrameLabels, n_classes: usize, cfg: &MetricsConfig) -> Result<EvalReport> {
    if refs.n_frames() != preds.n_frames() {
        return Err(Error::data(format!(
            "reference has {} frames, prediction has {}",
            refs.n_frames(),
            preds.n_frames()
        )));
    }
    for (which, l) in [("reference", refs), ("prediction", preds)] {
        if let Some((t, e)) = l.iter().find(|(_, e)| e.class_id >= n_classes) {
            return Err(Error::data(format!("{which} frame {t}: class {} outside 0..{n_classes}", e.class_id)));
        }
        if let Some((t, _)) = l.iter().find(|(_, e)| !(e.distance_m > 0.0) || !e.azimuth_deg.is_finite()) {
            return Err(Error::data(format!("{which} frame {t}: invalid azimuth or distance")));
        }
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let (mut doa_sum, mut rde_sum, mut agree, mut pairs) = (0.0, 0.0, 0usize, 0usize);
    for c in 0..n_classes {
        let mut counts = Counts::default();
        let mut counts_on = Counts::default();
        let mut n_matched = 0;
        for t in 0..refs.n_frames() {
            let r = refs.class_events(t, c);
            let p = preds.class_events(t, c);
            let m = match_frame(&r, &p);
            let mut tp = 0;
            let mut tp_on = 0;
            for &(ri, pi) in &m.pairs {
                let (re, pe) = (&r[ri], &p[pi]);
                let doa = angular_distance(re.azimuth_deg, pe.azimuth_deg);
                let rel = (pe.distance_m - re.distance_m).abs() / re.distance_m;
                doa_sum += doa;
                rde_sum += rel;
                agree += usize::from(re.onscreen == pe.onscreen);
                pairs += 1;
                n_matched += 1;
                if doa <= cfg.angle_thresh_deg && rel <= cfg.rel_dist_thresh {
                    tp += 1;
                    tp_on += usize::from(re.onscreen && pe.onscreen);
                }
            }
            counts.tp += tp;
            counts.fp += p.len() - tp;
            counts.fn_ += r.len() - tp;
            let p_on = p.iter().filter(|e| e.onscreen).count();
            let r_on = r.iter().filter(|e| e.onscreen).count();
            counts_on.tp += tp_on;
            counts_on.fp += p_on - tp_on;
            counts_on.fn_ += r_on - tp_on;
        }
        per_class.push(ClassReport {
            class_id: c,
            f: (!counts.is_empty()).then(|| counts.f_score()),
            f_on: (!counts_on.is_empty()).then(|| counts_on.f_score()),
            counts,
            counts_on,
            n_matched,
        });
    }
    let mean = |s: f64, scale: f64| (pairs > 0).then(|| scale * s / pairs as f64);
    Ok(EvalReport {
        f_le20_1: macro_average(per_class.iter().map(|c| c.f)),
        f_le20_1_on: macro_average(per_class.iter().map(|c| c.f_on)),
        doae: mean(doa_sum, 1.0),
        rde: mean(rde_sum, 100.0),
        onoff_acc: mean(agree as f64, 100.0),
        per_class,
    })
}

impl EvalReport {
    /// Fixed-width summary rows: `F1 F1o DOAE RDE Acc`.
    pub fn table(&self, label: &str) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7}", "System", "F1", "F1o", "DOAE", "RDE", "Acc");
        let _ = writeln!(
            s,
            "{:<16} {:>7.1} {:>7.1} {:>7} {:>7} {:>7}",
            label,
            self.f_le20_1,
            self.f_le20_1_on,
            opt(self.doae),
            opt(self.rde),
            opt(self.onoff_acc)
        );
        s
    }
}
