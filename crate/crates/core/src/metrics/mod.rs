//! Panoptic quality, mIoU and pixel-level unknown-detection metrics.
//!
//! PQ tallies are pooled over all images and over the classes of a group:
//! PQ = ΣIoU / (tp + fp/2 + fn/2), which factors exactly as RQ·SQ. Unknown
//! instances of any shape count as a single class.

mod ranking;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::IGNORE_LABEL;

pub use ranking::{fpr_at_95tpr, unknown_ap, UncertaintyReport};

/// Class-id layout shared by predictions and ground truth: ids below
/// `num_stuff` are stuff, ids below `num_classes` are known, and every id
/// from `num_classes` up to 254 is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub num_classes: usize,
    pub num_stuff: usize,
}

impl ClassLayout {
    pub fn is_stuff(&self, class: u8) -> bool {
        (class as usize) < self.num_stuff
    }

    pub fn is_unknown(&self, class: u8) -> bool {
        class != IGNORE_LABEL && class as usize >= self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class_id: u8,
    /// 0 for stuff segments.
    pub instance_id: u16,
    /// Sorted flat pixel indices.
    pub pixels: Vec<u32>,
    pub is_unknown: bool,
}

/// One segment per stuff class and one per (thing or unknown) instance id.
/// Thing pixels with instance id 0 form one segment per class. Ignore-labeled
/// pixels and pixels flagged in `ignore` are left out.
pub fn extract_segments(semantic: &[u8], instance: &[u16], ignore: Option<&[bool]>, layout: &ClassLayout) -> Result<Vec<Segment>> {
    if semantic.len() != instance.len() || ignore.is_some_and(|m| m.len() != semantic.len()) {
        return Err(Error::Dimension("semantic, instance and ignore maps differ in size".into()));
    }
    let mut by_key: BTreeMap<(bool, u16, u8), Vec<u32>> = BTreeMap::new();
    let mut class_of_instance: BTreeMap<u16, u8> = BTreeMap::new();
    for (p, (&c, &id)) in semantic.iter().zip(instance).enumerate() {
        if c == IGNORE_LABEL || ignore.is_some_and(|m| m[p]) {
            continue;
        }
        let key = if layout.is_stuff(c) {
            (false, 0, c)
        } else if id == 0 {
            (true, 0, c)
        } else {
            match class_of_instance.insert(id, c) {
                Some(prev) if prev != c => {
                    return Err(Error::Data(format!("instance {id} spans classes {prev} and {c}")));
                }
                _ => {}
            }
            (true, id, 0)
        };
        by_key.entry(key).or_default().push(p as u32);
    }
    Ok(by_key
        .into_iter()
        .map(|((_, id, c), pixels)| {
            let class_id = if id == 0 { c } else { class_of_instance[&id] };
            Segment { class_id, instance_id: id, pixels, is_unknown: layout.is_unknown(class_id) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqTally {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqTally {
    pub fn merge(&mut self, other: &PqTally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn quality(&self) -> Option<GroupQuality> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let rq = self.tp as f64 / denom;
        let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
        Some(GroupQuality { pq: self.iou_sum / denom, rq, sq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupQuality {
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PqGroup {
    KnownThings,
    KnownStuff,
    Unknown,
    AllKnown,
}

impl PqGroup {
    pub const ALL: [PqGroup; 4] = [PqGroup::KnownThings, PqGroup::KnownStuff, PqGroup::Unknown, PqGroup::AllKnown];

    pub fn name(self) -> &'static str {
        match self {
            Self::KnownThings => "known_things",
            Self::KnownStuff => "known_stuff",
            Self::Unknown => "unknown",
            Self::AllKnown => "all_known",
        }
    }
}

/// Pooled PQ tallies per group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub groups: BTreeMap<PqGroup, PqTally>,
}

impl PqReport {
    pub fn tally(&self, group: PqGroup) -> PqTally {
        self.groups.get(&group).copied().unwrap_or_default()
    }

    pub fn quality(&self, group: PqGroup) -> Option<GroupQuality> {
        self.tally(group).quality()
    }

    /// Adds another report's tallies; order does not matter.
    pub fn merge(&mut self, other: &PqReport) {
        for (g, t) in &other.groups {
            self.groups.entry(*g).or_default().merge(t);
        }
    }
}

/// A matched prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Class used for matching: unknown ids collapse into one.
fn match_class(seg: &Segment) -> Option<u8> {
    if seg.is_unknown {
        None
    } else {
        Some(seg.class_id)
    }
}

/// Pixel overlap counts between two segment lists plus per-prediction void.
pub(crate) struct Overlaps {
    /// (pred, gt) -> intersection size
    pub inter: BTreeMap<(usize, usize), usize>,
    /// Prediction pixels on ground-truth ignore-labeled pixels.
    pub pred_on_ignore: Vec<usize>,
    /// Prediction pixels on ground-truth unknown pixels.
    pub pred_on_unknown: Vec<usize>,
}

pub(crate) fn overlaps(pred: &[Segment], gt: &[Segment], gt_semantic: &[u8], layout: &ClassLayout) -> Overlaps {
    let mut gt_of = vec![usize::MAX; gt_semantic.len()];
    for (i, s) in gt.iter().enumerate() {
        for &p in &s.pixels {
            gt_of[p as usize] = i;
        }
    }
    let mut inter = BTreeMap::new();
    let mut pred_on_ignore = vec![0; pred.len()];
    let mut pred_on_unknown = vec![0; pred.len()];
    for (i, s) in pred.iter().enumerate() {
        for &p in &s.pixels {
            let p = p as usize;
            let c = gt_semantic[p];
            if c == IGNORE_LABEL {
                pred_on_ignore[i] += 1;
            } else if layout.is_unknown(c) {
                pred_on_unknown[i] += 1;
            }
            if gt_of[p] != usize::MAX {
                *inter.entry((i, gt_of[p])).or_insert(0) += 1;
            }
        }
    }
    Overlaps { inter, pred_on_ignore, pred_on_unknown }
}

impl Overlaps {
    /// Void pixels of prediction `i`: ground-truth ignore pixels, plus
    /// ground-truth unknown pixels when the prediction is a known class.
    pub fn void(&self, i: usize, pred: &Segment) -> usize {
        self.pred_on_ignore[i] + if pred.is_unknown { 0 } else { self.pred_on_unknown[i] }
    }

    pub fn iou(&self, i: usize, j: usize, pred: &Segment, gt: &Segment) -> f64 {
        let inter = self.inter.get(&(i, j)).copied().unwrap_or(0);
        if inter == 0 {
            return 0.0;
        }
        let union = pred.pixels.len() + gt.pixels.len() - inter - self.void(i, pred);
        inter as f64 / union as f64
    }
}

/// Every class-consistent pair with IoU > 0.5. Such pairs never share a
/// segment, which is asserted.
pub fn match_segments(pred: &[Segment], gt: &[Segment], gt_semantic: &[u8], layout: &ClassLayout) -> Vec<Match> {
    matches_from(&overlaps(pred, gt, gt_semantic, layout), pred, gt)
}

fn matches_from(ov: &Overlaps, pred: &[Segment], gt: &[Segment]) -> Vec<Match> {
    let mut matches = Vec::new();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for &(i, j) in ov.inter.keys() {
        if match_class(&pred[i]) != match_class(&gt[j]) {
            continue;
        }
        let iou = ov.iou(i, j, &pred[i], &gt[j]);
        if iou > 0.5 {
            assert!(!gt_used[j] && !pred_used[i], "segment matched twice at IoU > 0.5");
            gt_used[j] = true;
            pred_used[i] = true;
            matches.push(Match { pred: i, gt: j, iou });
        }
    }
    matches
}

fn group_of(seg: &Segment, layout: &ClassLayout) -> PqGroup {
    if seg.is_unknown {
        PqGroup::Unknown
    } else if layout.is_stuff(seg.class_id) {
        PqGroup::KnownStuff
    } else {
        PqGroup::KnownThings
    }
}

/// PQ tallies for one image. `gt_semantic` is the full ground-truth map,
/// used to find void pixels.
pub fn pq(pred: &[Segment], gt: &[Segment], gt_semantic: &[u8], layout: &ClassLayout) -> PqReport {
    let ov = overlaps(pred, gt, gt_semantic, layout);
    let matches = matches_from(&ov, pred, gt);
    let mut report = PqReport::default();
    for g in PqGroup::ALL {
        report.groups.insert(g, PqTally::default());
    }
    let mut pred_matched = vec![false; pred.len()];
    let mut gt_matched = vec![false; gt.len()];
    for m in &matches {
        pred_matched[m.pred] = true;
        gt_matched[m.gt] = true;
        let t = report.groups.get_mut(&group_of(&gt[m.gt], layout)).expect("all groups present");
        t.tp += 1;
        t.iou_sum += m.iou;
    }
    for (i, s) in pred.iter().enumerate() {
        // Predictions lying mostly on void are not counted as false positives.
        if pred_matched[i] || 2 * ov.void(i, s) > s.pixels.len() {
            continue;
        }
        report.groups.get_mut(&group_of(s, layout)).expect("all groups present").fp += 1;
    }
    for (j, s) in gt.iter().enumerate() {
        if !gt_matched[j] {
            report.groups.get_mut(&group_of(s, layout)).expect("all groups present").fn_ += 1;
        }
    }
    let mut all = report.tally(PqGroup::KnownThings);
    all.merge(&report.tally(PqGroup::KnownStuff));
    report.groups.insert(PqGroup::AllKnown, all);
    report
}

/// Per-class intersection and union counts for mIoU.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouTally {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt_count: Vec<u64>,
}

impl IouTally {
    pub fn new(num_classes: usize) -> Self {
        Self { intersection: vec![0; num_classes], union: vec![0; num_classes], gt_count: vec![0; num_classes] }
    }

    /// Counts one image. Ground-truth pixels that are ignore-labeled or of an
    /// unknown class are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!("semantic maps differ in size: {} vs {}", pred.len(), gt.len())));
        }
        let k = self.intersection.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if g as usize >= k {
                continue;
            }
            self.gt_count[g as usize] += 1;
            if p == g {
                self.intersection[g as usize] += 1;
                self.union[g as usize] += 1;
            } else {
                self.union[g as usize] += 1;
                if (p as usize) < k {
                    self.union[p as usize] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouTally) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        for (a, b) in self.gt_count.iter_mut().zip(&other.gt_count) {
            *a += b;
        }
    }

    /// Mean IoU over classes present in the ground truth; `None` if none are.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = (0..self.intersection.len())
            .filter(|&c| self.gt_count[c] > 0)
            .map(|c| self.intersection[c] as f64 / self.union[c] as f64)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// mIoU over a set of images.
pub fn miou(preds: &[&[u8]], gts: &[&[u8]], num_classes: usize) -> Result<Option<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension("different numbers of predicted and ground-truth maps".into()));
    }
    let mut tally = IouTally::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        tally.add(p, g)?;
    }
    Ok(tally.miou())
}
