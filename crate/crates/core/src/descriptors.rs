//! Keypoint-anchored local regions and their crops.
//!
//! The 18 keypoints are the base set. Denser sets add one point per skeleton
//! segment: first the midpoints, then one quarter point per segment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{check_level, ImageBuffer, KeypointSet, NUM_KEYPOINTS};
use crate::error::{Error, Result};

/// A skeleton edge between two keypoints and the fraction along it used for
/// the quarter-point descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: usize,
    pub b: usize,
    pub quarter: f32,
}

const fn seg(a: usize, b: usize, quarter: f32) -> Segment {
    Segment { a, b, quarter }
}

/// Limbs and torso; left/right counterparts share a quarter fraction.
pub const DEFAULT_SEGMENTS: [Segment; 13] = [
    seg(2, 3, 0.25),   // right upper arm
    seg(5, 6, 0.25),   // left upper arm
    seg(3, 4, 0.75),   // right forearm
    seg(6, 7, 0.75),   // left forearm
    seg(8, 9, 0.25),   // right thigh
    seg(11, 12, 0.25), // left thigh
    seg(9, 10, 0.75),  // right shin
    seg(12, 13, 0.75), // left shin
    seg(2, 5, 0.25),   // shoulder to shoulder
    seg(8, 11, 0.75),  // hip to hip
    seg(1, 8, 0.25),   // neck to right hip
    seg(1, 11, 0.25),  // neck to left hip
    seg(2, 11, 0.75),  // right shoulder to left hip
];

/// Level → descriptor count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DescriptorSchedule(pub BTreeMap<usize, usize>);

impl Default for DescriptorSchedule {
    fn default() -> Self {
        Self([(64, 18), (128, 18), (256, 31), (512, 31), (1024, 44)].into())
    }
}

impl DescriptorSchedule {
    pub fn count(&self, level: usize) -> Result<usize> {
        check_level(level)?;
        self.0.get(&level).copied().ok_or(Error::InvalidLevel(level))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTable {
    pub segments: Vec<Segment>,
}

impl Default for SegmentTable {
    fn default() -> Self {
        Self {
            segments: DEFAULT_SEGMENTS.to_vec(),
        }
    }
}

impl SegmentTable {
    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if s.a >= NUM_KEYPOINTS || s.b >= NUM_KEYPOINTS || s.a == s.b {
                return Err(Error::Config(format!("invalid segment {}-{}", s.a, s.b)));
            }
            if !(s.quarter > 0.0 && s.quarter < 1.0) {
                return Err(Error::Config(format!(
                    "segment {}-{} fraction {} must lie in (0, 1)",
                    s.a, s.b, s.quarter
                )));
            }
        }
        Ok(())
    }

    /// Largest descriptor count this table can produce.
    pub fn max_count(&self) -> usize {
        NUM_KEYPOINTS + 2 * self.segments.len()
    }
}

/// Where a descriptor center comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anchor {
    Keypoint(usize),
    /// Point at fraction `t` from keypoint `a` to keypoint `b`.
    Segment { a: usize, b: usize, t: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Descriptor {
    pub x: f32,
    pub y: f32,
    pub anchor: Anchor,
}

/// Square window `[x0, x0 + side) × [y0, y0 + side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl Rect {
    pub fn center(&self) -> (f32, f32) {
        ((self.x0 + self.side / 2) as f32, (self.y0 + self.side / 2) as f32)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.side && y >= self.y0 && y < self.y0 + self.side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Vec<Descriptor>,
    pub window_side: usize,
    pub level: usize,
    /// Count requested by the schedule, before dropping missing anchors.
    pub requested: usize,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn windows(&self) -> Vec<Rect> {
        self.descriptors
            .iter()
            .map(|d| crop_window((d.x, d.y), self.level))
            .collect()
    }
}

pub fn window_side(level: usize) -> usize {
    level / 8
}

/// Window of side `level / 8` around `center`, translated to fit the image.
///
/// The origin is `round(center) - side / 2` (round half away from zero),
/// clamped to `[0, level - side]` on each axis.
pub fn crop_window(center: (f32, f32), level: usize) -> Rect {
    let side = window_side(level).max(1);
    let hi = level.saturating_sub(side) as i64;
    let origin = |c: f32| -> usize {
        let r = if c.is_finite() { c.round() as i64 } else { 0 };
        (r - (side / 2) as i64).clamp(0, hi) as usize
    };
    Rect {
        x0: origin(center.0),
        y0: origin(center.1),
        side,
    }
}

/// Descriptors for `level`, using the default schedule and segment table.
pub fn build_descriptors(kp: &KeypointSet, level: usize) -> Result<DescriptorSet> {
    let n = DescriptorSchedule::default().count(level)?;
    build_descriptors_with(kp, level, n, &SegmentTable::default())
}

/// First `count` candidates in the order keypoints, midpoints, quarter
/// points; candidates whose anchors are missing are then dropped.
pub fn build_descriptors_with(
    kp: &KeypointSet,
    level: usize,
    count: usize,
    table: &SegmentTable,
) -> Result<DescriptorSet> {
    check_level(level)?;
    table.validate()?;
    if kp.source_resolution() != (level, level) {
        return Err(Error::ShapeMismatch(format!(
            "keypoints are in {:?} pixels, expected {level}x{level}",
            kp.source_resolution()
        )));
    }
    if count > table.max_count() || count == 0 {
        return Err(Error::Config(format!(
            "descriptor count {count} is outside 1..={}",
            table.max_count()
        )));
    }
    let mut anchors: Vec<Anchor> = (0..NUM_KEYPOINTS).map(Anchor::Keypoint).collect();
    anchors.extend(table.segments.iter().map(|s| Anchor::Segment { a: s.a, b: s.b, t: 0.5 }));
    anchors.extend(table.segments.iter().map(|s| Anchor::Segment {
        a: s.a,
        b: s.b,
        t: s.quarter,
    }));
    anchors.truncate(count);
    let descriptors = anchors
        .into_iter()
        .filter_map(|anchor| match anchor {
            Anchor::Keypoint(k) => {
                let p = kp.get(k);
                p.is_present().then_some(Descriptor { x: p.x, y: p.y, anchor })
            }
            Anchor::Segment { a, b, t } => {
                let (pa, pb) = (kp.get(a), kp.get(b));
                (pa.is_present() && pb.is_present()).then(|| Descriptor {
                    x: pa.x + t * (pb.x - pa.x),
                    y: pa.y + t * (pb.y - pa.y),
                    anchor,
                })
            }
        })
        .collect();
    Ok(DescriptorSet {
        descriptors,
        window_side: window_side(level),
        level,
        requested: count,
    })
}

/// One `window_side²` crop per descriptor, in descriptor order.
pub fn extract_crops(img: &ImageBuffer, ds: &DescriptorSet) -> Result<Vec<ImageBuffer>> {
    if img.side() != ds.level {
        return Err(Error::ShapeMismatch(format!(
            "image is {}px but descriptors were built at {}px",
            img.side(),
            ds.level
        )));
    }
    ds.windows()
        .iter()
        .map(|r| img.crop(r.x0, r.y0, r.side))
        .collect()
}
