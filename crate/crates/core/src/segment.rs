//! Defect quantification inside a region of interest.
//!
//! The ROI is binarized (dark defect becomes foreground after inversion),
//! closed with a square structuring element, and the largest 8-connected
//! component is taken as the defect. Its pixel count is the area.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::raster::{self, BinaryImage, GrayImage, StructuringElement};
use crate::threshold::ThresholdDecision;

pub const DEFAULT_MM_PER_PIXEL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mm_per_pixel: f64,
}

impl Calibration {
    pub fn new(mm_per_pixel: f64) -> Option<Self> {
        (mm_per_pixel.is_finite() && mm_per_pixel > 0.0).then_some(Self { mm_per_pixel })
    }

    pub fn mm2_per_px(&self) -> f64 {
        self.mm_per_pixel * self.mm_per_pixel
    }

    pub fn px_to_mm2(&self, area_px: f64) -> f64 {
        area_px * self.mm2_per_px()
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            mm_per_pixel: DEFAULT_MM_PER_PIXEL,
        }
    }
}

/// Structuring element and pass counts for the closing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Morphology {
    pub se: StructuringElement,
    pub dilation_passes: u32,
    pub erosion_passes: u32,
}

impl Default for Morphology {
    fn default() -> Self {
        Self {
            se: StructuringElement::square(1),
            dilation_passes: 1,
            erosion_passes: 1,
        }
    }
}

impl From<StructuringElement> for Morphology {
    fn from(se: StructuringElement) -> Self {
        Self {
            se,
            ..Self::default()
        }
    }
}

/// Threshold, invert, dilate, erode.
pub fn preprocess(roi: &GrayImage, t: u8, morph: Morphology) -> BinaryImage {
    let mut mask = raster::invert(&raster::threshold(roi, t));
    for _ in 0..morph.dilation_passes {
        mask = raster::dilate(&mask, morph.se);
    }
    for _ in 0..morph.erosion_passes {
        mask = raster::erode(&mask, morph.se);
    }
    mask
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    /// Outer boundary as `(x, y)` pixels in clockwise tracing order,
    /// starting at the component's first pixel in row-major order.
    pub boundary: Vec<(u32, u32)>,
    pub pixel_count: usize,
    /// Row-major index of the component's first pixel.
    pub first_index: usize,
    /// Tight bounds `(x, y, w, h)`.
    pub bounds: (u32, u32, u32, u32),
}

const NEIGHBORS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// All 8-connected components, ordered by first row-major pixel.
pub fn components(mask: &BinaryImage) -> Vec<Contour> {
    let w = mask.width() as usize;
    let h = mask.height() as usize;
    let data = mask.as_slice();
    let mut label = vec![0u32; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !data[start] || label[start] != 0 {
            continue;
        }
        let id = out.len() as u32 + 1;
        label[start] = id;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for (dx, dy) in NEIGHBORS {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if data[j] && label[j] == 0 {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        let boundary = trace_boundary(&label, w, h, start, id);
        out.push(Contour {
            boundary,
            pixel_count: count,
            first_index: start,
            bounds: (
                x0 as u32,
                y0 as u32,
                (x1 - x0 + 1) as u32,
                (y1 - y0 + 1) as u32,
            ),
        });
    }
    out
}

// Moore-neighbor tracing, stopping when the first edge repeats. `start` is the
// first pixel of the component in row-major order, so its west neighbor is
// guaranteed to be background and serves as the initial backtrack.
fn trace_boundary(label: &[u32], w: usize, h: usize, start: usize, id: u32) -> Vec<(u32, u32)> {
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && label[y as usize * w + x as usize] == id
    };
    let sx = (start % w) as i64;
    let sy = (start / w) as i64;
    let mut boundary = vec![(sx as u32, sy as u32)];

    // direction index (into NEIGHBORS) pointing from current pixel to backtrack
    let (mut cx, mut cy) = (sx, sy);
    let mut back = 0usize;
    let mut first_step: Option<(i64, i64)> = None;
    let limit = 4 * w * h + 8;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let (dx, dy) = NEIGHBORS[d];
            if inside(cx + dx, cy + dy) {
                found = Some(d);
                break;
            }
        }
        let Some(d) = found else {
            // isolated pixel
            return boundary;
        };
        let (dx, dy) = NEIGHBORS[d];
        let next = (cx + dx, cy + dy);
        // done once the first edge out of the start pixel is about to repeat
        if (cx, cy) == (sx, sy) {
            match first_step {
                Some(step) if step == next => break,
                None => first_step = Some(next),
                _ => {}
            }
        }
        let (pdx, pdy) = NEIGHBORS[(d + 7) % 8];
        let (bx, by) = (cx + pdx, cy + pdy);
        (cx, cy) = next;
        // new backtrack: the last background cell examined, seen from the new pixel
        back = NEIGHBORS
            .iter()
            .position(|&(ox, oy)| cx + ox == bx && cy + oy == by)
            .unwrap_or(0);
        if (cx, cy) != (sx, sy) {
            boundary.push((cx as u32, cy as u32));
        }
    }
    boundary
}

/// Largest component; ties go to the smaller first row-major index.
pub fn largest_component(mask: &BinaryImage) -> Option<Contour> {
    components(mask)
        .into_iter()
        .reduce(|best, c| if c.pixel_count > best.pixel_count { c } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaResult {
    pub area_px: usize,
    pub area_mm2: f64,
    pub threshold_used: ThresholdDecision,
    pub contour: Option<Contour>,
}

pub fn measure(
    roi: &GrayImage,
    decision: ThresholdDecision,
    morph: Morphology,
    cal: Calibration,
) -> AreaResult {
    let mask = preprocess(roi, decision.threshold, morph);
    let contour = largest_component(&mask);
    let area_px = contour.as_ref().map_or(0, |c| c.pixel_count);
    AreaResult {
        area_px,
        area_mm2: cal.px_to_mm2(area_px as f64),
        threshold_used: decision,
        contour,
    }
}

/// One line of the per-track areas CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub frame_index: usize,
    pub timestep: u32,
    pub area_px: usize,
    pub area_mm2: f64,
    pub threshold: u8,
    pub method: crate::threshold::ThresholdMethod,
}

impl AreaRow {
    pub fn new(frame_index: usize, timestep: u32, result: &AreaResult) -> Self {
        Self {
            frame_index,
            timestep,
            area_px: result.area_px,
            area_mm2: result.area_mm2,
            threshold: result.threshold_used.threshold,
            method: result.threshold_used.method,
        }
    }
}

pub fn write_area_csv<W: std::io::Write>(out: W, rows: &[AreaRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_area_csv<R: std::io::Read>(input: R) -> Result<Vec<AreaRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::threshold::{ThresholdClass, ThresholdMethod};

    fn dark_square(size: u32, x0: u32, y0: u32, side: u32) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
                20
            } else {
                200
            }
        })
        .unwrap()
    }

    fn fixed(t: u8) -> ThresholdDecision {
        ThresholdDecision {
            threshold: t,
            method: ThresholdMethod::Fixed,
            confidence: 1.0,
            degenerate: false,
        }
    }

    #[test]
    fn bright_roi_is_empty() {
        let roi = GrayImage::filled(20, 20, 200).unwrap();
        assert_eq!(preprocess(&roi, 52, Morphology::default()).count(), 0);
        let r = measure(&roi, fixed(52), Morphology::default(), Calibration::default());
        assert_eq!(r.area_px, 0);
        assert!(r.contour.is_none());
    }

    #[test]
    fn solid_square_survives_closing() {
        let roi = dark_square(30, 10, 10, 10);
        let mask = preprocess(&roi, 52, Morphology::default());
        assert_eq!(mask.count(), 100);
        let c = largest_component(&mask).unwrap();
        assert_eq!(c.pixel_count, 100);
        assert_eq!(c.bounds, (10, 10, 10, 10));
        // square outline has 4*10 - 4 pixels
        assert_eq!(c.boundary.len(), 36);
    }

    #[test]
    fn closing_fills_interior_hole() {
        let mut roi = dark_square(30, 10, 10, 10);
        roi.set(14, 15, 230);
        assert_eq!(raster::invert(&raster::threshold(&roi, 52)).count(), 99);
        let c = largest_component(&preprocess(&roi, 52, Morphology::default())).unwrap();
        assert_eq!(c.pixel_count, 100);
    }

    #[test]
    fn measure_converts_with_calibration() {
        let roi = dark_square(30, 10, 10, 10);
        let cal = Calibration::new(0.05).unwrap();
        let r = measure(&roi, ThresholdDecision::fixed(ThresholdClass::from_value(52).unwrap()), Morphology::default(), cal);
        assert_eq!(r.area_px, 100);
        assert!((r.area_mm2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn largest_of_two_blobs() {
        let roi = GrayImage::from_fn(60, 60, |x, y| {
            let big = (5..25).contains(&x) && (5..25).contains(&y);
            let small = (40..46).contains(&x) && (40..45).contains(&y);
            if big || small { 20 } else { 200 }
        })
        .unwrap();
        let r = measure(&roi, fixed(52), Morphology::default(), Calibration::default());
        assert_eq!(r.area_px, 400);
    }

    #[test]
    fn component_selection() {
        assert!(largest_component(&BinaryImage::empty(5, 5).unwrap()).is_none());

        // 50 px vs 7 px
        let mut m = BinaryImage::empty(20, 20).unwrap();
        for y in 0..5 {
            for x in 0..10 {
                m.set(x, y + 10, true);
            }
        }
        for x in 0..7 {
            m.set(x + 12, 0, true);
        }
        assert_eq!(largest_component(&m).unwrap().pixel_count, 50);

        // two 10 px bars, the upper-left one wins
        let mut m = BinaryImage::empty(20, 20).unwrap();
        for x in 0..10 {
            m.set(x + 5, 12, true);
            m.set(x + 2, 3, true);
        }
        let c = largest_component(&m).unwrap();
        assert_eq!(c.pixel_count, 10);
        assert_eq!(c.first_index, 3 * 20 + 2);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mut m = BinaryImage::empty(4, 4).unwrap();
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(2, 2, true);
        let all = components(&m);
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].pixel_count, 3);
        assert_eq!(all[0].boundary, vec![(0, 0), (1, 1), (2, 2), (1, 1)]);
    }

    #[test]
    fn boundary_pixels_belong_to_component() {
        let mut m = BinaryImage::empty(12, 12).unwrap();
        for (x, y) in [(3, 3), (4, 3), (5, 4), (5, 5), (4, 6), (3, 6), (2, 5), (2, 4), (3, 4), (4, 4), (4, 5), (3, 5)] {
            m.set(x, y, true);
        }
        let c = largest_component(&m).unwrap();
        assert_eq!(c.pixel_count, 12);
        for &(x, y) in &c.boundary {
            assert!(m.get(x, y));
        }
        // interior pixels are not on the outer boundary
        assert!(!c.boundary.contains(&(3, 4)) || !c.boundary.contains(&(4, 5)));
    }

    #[test]
    fn area_csv_schema() {
        let roi = dark_square(30, 10, 10, 10);
        let r = measure(&roi, fixed(52), Morphology::default(), Calibration::new(0.05).unwrap());
        let mut buf = Vec::new();
        write_area_csv(&mut buf, &[AreaRow::new(0, 0, &r)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "frame_index,timestep,area_px,area_mm2,threshold,method"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,100,0.25"));
        assert!(text.lines().nth(1).unwrap().ends_with(",52,fixed"));
        let back = read_area_csv(&buf[..]).unwrap();
        assert_eq!(back[0], AreaRow::new(0, 0, &r));
    }
}
