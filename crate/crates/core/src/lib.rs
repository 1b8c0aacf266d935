//! Vision-based wear forecasting for surface defects.
//!
//! The pipeline stages are:
//!
//! 1. **Detect**: per-defect bounding boxes, tracked across frames with a
//!    grow-the-previous-box fallback when a detection is missing.
//! 2. **Threshold**: one of six fixed threshold classes, Otsu, or a
//!    nearest-centroid classifier choosing among the six.
//! 3. **Segment**: threshold, invert, dilate, erode; largest component area.
//! 4. **Expert**: rule-based correction so the area series never shrinks.
//! 5. **Forecast**: horizon-weighted, data-efficiency-aware selection among
//!    linear, quadratic, cubic and exponential growth; wear-limit crossing.
//!
//! [`synth`] generates image sequences with known ground truth and
//! [`pipeline`] wires the stages together.

pub mod detect;
pub mod expert;
pub mod forecast;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod segment;
pub mod synth;
pub mod threshold;
