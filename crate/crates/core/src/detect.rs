//! Per-defect bounding boxes across a frame sequence.
//!
//! Boxes come either from an annotation file or from a segmentation-based
//! blob proposer. Once a defect has a box it keeps one in every later
//! frame: a frame without a matching detection reuses the previous box,
//! grown slightly about its center.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::raster::GrayImage;
use crate::segment::{self, Morphology};
use crate::threshold::ThresholdDecision;

pub const DEFAULT_GROW: f64 = 1.2;
pub const DEFAULT_IOU_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let iy = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        let inter = ix as u64 * iy as u64;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Clip to a `width`x`height` image. `None` if nothing remains.
    pub fn clip(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (self.x < x1 && self.y < y1).then(|| BoundingBox::new(self.x, self.y, x1 - self.x, y1 - self.y))
    }

    /// Scale about the center by `grow`, keeping the original box inside the
    /// result, then clip to the image.
    pub fn grown(&self, grow: f64, width: u32, height: u32) -> BoundingBox {
        // absorbs rounding noise such as 20 * 1.2 = 24.000000000000004
        const SNAP: f64 = 1e-9;
        let cx = self.x as f64 + self.w as f64 / 2.0;
        let cy = self.y as f64 + self.h as f64 / 2.0;
        let hw = self.w as f64 * grow / 2.0;
        let hh = self.h as f64 * grow / 2.0;
        let x0 = ((cx - hw + SNAP).floor().max(0.0) as u32).min(self.x);
        let y0 = ((cy - hh + SNAP).floor().max(0.0) as u32).min(self.y);
        let x1 = ((cx + hw - SNAP).ceil().min(width as f64) as u32).max(self.right());
        let y1 = ((cy + hh - SNAP).ceil().min(height as f64) as u32).max(self.bottom());
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    Annotated,
    Proposed,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub t: u32,
    pub bbox: BoundingBox,
    pub source: BoxSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectTrack {
    pub track_id: u32,
    pub entries: Vec<TrackEntry>,
}

impl DefectTrack {
    pub fn new(track_id: u32) -> Self {
        Self {
            track_id,
            entries: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&TrackEntry> {
        self.entries.last()
    }

    pub fn box_at(&self, t: u32) -> Option<&TrackEntry> {
        self.entries
            .binary_search_by_key(&t, |e| e.t)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn push(&mut self, entry: TrackEntry) {
        debug_assert!(self.last().is_none_or(|l| l.t < entry.t));
        self.entries.push(entry);
    }
}

/// Every later timestep in `timesteps` after the first entry has a box.
pub fn has_no_gaps(track: &DefectTrack, timesteps: &[u32]) -> bool {
    let Some(first) = track.entries.first() else {
        return true;
    };
    let strictly_increasing = track.entries.windows(2).all(|w| w[0].t < w[1].t);
    strictly_increasing
        && timesteps
            .iter()
            .filter(|&&t| t >= first.t)
            .all(|&t| track.box_at(t).is_some())
}

/// Box for timestep `t`: the detection if present, otherwise the previous
/// box grown about its center. `None` when the track has not started.
pub fn apply_fallback(
    track: &DefectTrack,
    t: u32,
    detected: Option<BoundingBox>,
    grow: f64,
    bounds: (u32, u32),
) -> Option<(BoundingBox, BoxSource)> {
    if let Some(b) = detected {
        return Some((b, BoxSource::Proposed));
    }
    let prev = track.entries.iter().rev().find(|e| e.t < t)?;
    Some((
        prev.bbox.grown(grow.max(1.0), bounds.0, bounds.1),
        BoxSource::Fallback,
    ))
}

/// One box per foreground component of at least `min_area` pixels, expanded
/// by `margin` on every side and clipped to the image.
pub fn propose_boxes(
    img: &GrayImage,
    decision: ThresholdDecision,
    min_area: usize,
    morph: Morphology,
    margin: u32,
) -> Vec<BoundingBox> {
    let mask = segment::preprocess(img, decision.threshold, morph);
    segment::components(&mask)
        .into_iter()
        .filter(|c| c.pixel_count >= min_area.max(1))
        .map(|c| {
            let (x, y, w, h) = c.bounds;
            let x0 = x.saturating_sub(margin);
            let y0 = y.saturating_sub(margin);
            let x1 = (x + w + margin).min(img.width());
            let y1 = (y + h + margin).min(img.height());
            BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub iou_floor: f64,
    pub grow: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_floor: DEFAULT_IOU_FLOOR,
            grow: DEFAULT_GROW,
        }
    }
}

/// Frame-by-frame IoU association of detections to tracks.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    bounds: (u32, u32),
    tracks: Vec<DefectTrack>,
    next_id: u32,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, bounds: (u32, u32)) -> Self {
        Self {
            cfg,
            bounds,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &[DefectTrack] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<DefectTrack> {
        self.tracks
    }

    /// Feed the detections of frame `t`. Frames must arrive in increasing `t`.
    pub fn step(&mut self, t: u32, boxes: &[BoundingBox], source: BoxSource) {
        associate(&mut self.tracks, &mut self.next_id, boxes, source, t, self.cfg, self.bounds);
    }
}

/// Match boxes to tracks greedily by descending IoU (ties to the lower
/// track id, then the earlier box). Pairs below the floor never match.
/// Unmatched boxes open new tracks; unmatched live tracks get a fallback box.
pub fn associate(
    tracks: &mut Vec<DefectTrack>,
    next_id: &mut u32,
    boxes: &[BoundingBox],
    source: BoxSource,
    t: u32,
    cfg: TrackerConfig,
    bounds: (u32, u32),
) {
    let mut pairs = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        let Some(last) = track.last() else { continue };
        for (bi, b) in boxes.iter().enumerate() {
            let iou = last.bbox.iou(b);
            if iou >= cfg.iou_floor && iou > 0.0 {
                pairs.push((iou, track.track_id, ti, bi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));

    let mut track_match = vec![None; tracks.len()];
    let mut box_used = vec![false; boxes.len()];
    for (_, _, ti, bi) in pairs {
        if track_match[ti].is_none() && !box_used[bi] {
            track_match[ti] = Some(bi);
            box_used[bi] = true;
        }
    }

    for (track, matched) in tracks.iter_mut().zip(track_match) {
        if track.last().is_some_and(|l| l.t >= t) {
            continue;
        }
        let detected = matched.map(|bi| boxes[bi]);
        if let Some((bbox, src)) = apply_fallback(track, t, detected, cfg.grow, bounds) {
            let src = if detected.is_some() { source } else { src };
            track.push(TrackEntry { t, bbox, source: src });
        }
    }

    for (bi, b) in boxes.iter().enumerate() {
        if !box_used[bi] {
            let mut track = DefectTrack::new(*next_id);
            *next_id += 1;
            track.push(TrackEntry { t, bbox: *b, source });
            tracks.push(track);
        }
    }
}

/// One row of the annotation CSV `frame_index,track_id,x,y,w,h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_index: u32,
    pub track_id: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

pub fn read_annotations<R: std::io::Read>(input: R) -> Result<Vec<Annotation>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Build tracks from annotations over frames `0..n_frames`. Frames where an
/// already-started track has no annotation receive fallback boxes.
pub fn tracks_from_annotations(
    annotations: &[Annotation],
    n_frames: u32,
    grow: f64,
    bounds: (u32, u32),
) -> Vec<DefectTrack> {
    let mut by_track: BTreeMap<u32, BTreeMap<u32, BoundingBox>> = BTreeMap::new();
    for a in annotations {
        if a.w == 0 || a.h == 0 {
            continue;
        }
        let Some(b) = BoundingBox::new(a.x, a.y, a.w, a.h).clip(bounds.0, bounds.1) else {
            continue;
        };
        by_track.entry(a.track_id).or_default().insert(a.frame_index, b);
    }
    by_track
        .into_iter()
        .map(|(id, frames)| {
            let mut track = DefectTrack::new(id);
            for t in 0..n_frames {
                let detected = frames.get(&t).copied();
                if let Some((bbox, src)) = apply_fallback(&track, t, detected, grow, bounds) {
                    let source = if detected.is_some() { BoxSource::Annotated } else { src };
                    track.push(TrackEntry { t, bbox, source });
                }
            }
            track
        })
        .collect()
}

pub fn tracks_to_json(tracks: &[DefectTrack]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(tracks)
}
