//! Hierarchical quadtree over the observation domain.
//!
//! Boxes at every level except the root are numbered along a Z-order curve
//! with a single global index: level `l` occupies `[(4^l - 4)/3, (4^(l+1) - 4)/3)`.
//! Within a level the Morton code interleaves the grid column `x` into the even
//! bits and the row `y` into the odd bits, which gives the closed forms
//! `children(b) = 4b+4..=4b+7` and `parent(b) = (b-4)/4`.

use std::fmt::Write as _;

use thiserror::Error;

/// Smallest tree depth the multi-level far-field scheme supports.
pub const MIN_LEVELS: usize = 3;

/// Deepest tree accepted by [`BoxTree::build`].
pub const MAX_LEVELS: usize = 12;

/// Default cap on the mean leaf occupancy used by [`levels_for_occupancy`].
pub const DEFAULT_OCCUPANCY_CAP: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("a box tree needs at least {MIN_LEVELS} levels and at most {MAX_LEVELS}, got {0}")]
    BadLevelCount(usize),

    #[error("observation set is empty")]
    Empty,

    #[error("observation {index} has invalid coordinates (lat {lat}, lon {lon})")]
    BadCoordinate { index: usize, lat: f64, lon: f64 },

    #[error("all {0} observations are coincident; the bounding rectangle has zero area")]
    Degenerate(usize),

    #[error("observation {index} lies outside the bounding rectangle")]
    OutsideBounds { index: usize },

    #[error("box {id} {reason}")]
    Level { id: usize, reason: &'static str },

    #[error("box {0} does not exist in this tree")]
    UnknownBox(usize),

    #[error("boxes span more than one level")]
    MixedLevels,
}

/// A latitude/longitude pair in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Geolocated observations indexed `0..m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    points: Vec<GeoPoint>,
}

impl ObservationSet {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self, TreeError> {
        if points.is_empty() {
            return Err(TreeError::Empty);
        }
        for (index, p) in points.iter().enumerate() {
            if !p.lat.is_finite() || !p.lon.is_finite() || p.lat.abs() > 90.0 {
                return Err(TreeError::BadCoordinate {
                    index,
                    lat: p.lat,
                    lon: p.lon,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> GeoPoint {
        self.points[i]
    }

    /// Observations at `indices`, renumbered densely in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, TreeError> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Minimal lon/lat rectangle covering every observation.
    pub fn bounds(&self) -> Bounds {
        let mut b = Bounds {
            lon_min: f64::INFINITY,
            lon_max: f64::NEG_INFINITY,
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
        };
        for p in &self.points {
            b.lon_min = b.lon_min.min(p.lon);
            b.lon_max = b.lon_max.max(p.lon);
            b.lat_min = b.lat_min.min(p.lat);
            b.lat_max = b.lat_max.max(p.lat);
        }
        b
    }
}

/// Axis-aligned rectangle in longitude (x) and latitude (y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Bounds {
    fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.lon_min && p.lon <= self.lon_max && p.lat >= self.lat_min && p.lat <= self.lat_max
    }
}

/// Cell along one axis: left-closed intervals, with the maximum edge closed.
/// A zero-width axis maps everything to cell 0.
fn bin(value: f64, min: f64, max: f64, cells: usize) -> usize {
    let width = max - min;
    if width <= 0.0 {
        return 0;
    }
    let t = ((value - min) / width * cells as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(cells - 1)
    }
}

/// Global index of a box under the cross-level Z-order numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BoxId(pub usize);

/// First global index used by `level` (level ≥ 1).
pub fn level_offset(level: usize) -> usize {
    (4usize.pow(level as u32) - 4) / 3
}

/// Interleaves `x` into even bits and `y` into odd bits.
pub fn morton_encode(x: usize, y: usize) -> usize {
    let mut code = 0;
    for bit in 0..usize::BITS as usize / 2 {
        code |= ((x >> bit) & 1) << (2 * bit);
        code |= ((y >> bit) & 1) << (2 * bit + 1);
    }
    code
}

pub fn morton_decode(code: usize) -> (usize, usize) {
    let (mut x, mut y) = (0, 0);
    for bit in 0..usize::BITS as usize / 2 {
        x |= ((code >> (2 * bit)) & 1) << bit;
        y |= ((code >> (2 * bit + 1)) & 1) << bit;
    }
    (x, y)
}

impl BoxId {
    pub fn from_grid(level: usize, x: usize, y: usize) -> Self {
        BoxId(level_offset(level) + morton_encode(x, y))
    }

    /// Level of the box (1 for ids 0..4, 2 for 4..20, ...).
    pub fn level(self) -> usize {
        let mut level = 1;
        while self.0 >= level_offset(level + 1) {
            level += 1;
        }
        level
    }

    /// Grid column and row within the box's level.
    pub fn grid(self) -> (usize, usize) {
        morton_decode(self.0 - level_offset(self.level()))
    }

    /// `{4b+4, 4b+5, 4b+6, 4b+7}`; the caller checks the box is not a leaf.
    pub fn children(self) -> [BoxId; 4] {
        let base = 4 * self.0 + 4;
        [BoxId(base), BoxId(base + 1), BoxId(base + 2), BoxId(base + 3)]
    }

    /// `(b - 4) / 4`, or `None` for level-1 boxes whose parent is the unnumbered root.
    pub fn parent(self) -> Option<BoxId> {
        (self.0 >= 4).then(|| BoxId((self.0 - 4) / 4))
    }
}

/// Smallest depth `L ≥ 3` whose mean leaf occupancy `m / 4^L` is at most `cap`.
pub fn levels_for_occupancy(m: usize, cap: usize) -> usize {
    let cap = cap.max(1);
    let mut levels = MIN_LEVELS;
    while levels < MAX_LEVELS && m > cap * 4usize.pow(levels as u32) {
        levels += 1;
    }
    levels
}

/// Nested-box partition of an observation set.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTree {
    bounds: Bounds,
    levels: usize,
    observations: usize,
    /// Observation indices (ascending) of every numbered box, by global id.
    members: Vec<Vec<usize>>,
}

impl BoxTree {
    /// Builds the tree over the minimal rectangle covering `obs`.
    pub fn build(obs: &ObservationSet, levels: usize) -> Result<Self, TreeError> {
        let bounds = obs.bounds();
        if obs.len() > 1 && bounds.lon_min == bounds.lon_max && bounds.lat_min == bounds.lat_max {
            return Err(TreeError::Degenerate(obs.len()));
        }
        Self::build_in(obs, bounds, levels)
    }

    /// Builds the tree over a caller-supplied rectangle, which must contain every observation.
    pub fn build_in(obs: &ObservationSet, bounds: Bounds, levels: usize) -> Result<Self, TreeError> {
        if !(MIN_LEVELS..=MAX_LEVELS).contains(&levels) {
            return Err(TreeError::BadLevelCount(levels));
        }
        if obs.is_empty() {
            return Err(TreeError::Empty);
        }
        let cells = 1usize << levels;
        let total = level_offset(levels + 1);
        let mut members = vec![Vec::new(); total];
        for (index, &p) in obs.points().iter().enumerate() {
            if !bounds.contains(p) {
                return Err(TreeError::OutsideBounds { index });
            }
            let x = bin(p.lon, bounds.lon_min, bounds.lon_max, cells);
            let y = bin(p.lat, bounds.lat_min, bounds.lat_max, cells);
            // Coarser cells are prefixes of the leaf cell, so nesting holds exactly.
            for level in 1..=levels {
                let shift = levels - level;
                members[BoxId::from_grid(level, x >> shift, y >> shift).0].push(index);
            }
        }
        Ok(Self {
            bounds,
            levels,
            observations: obs.len(),
            members,
        })
    }

    /// Reassembles a tree from stored membership lists.
    pub(crate) fn from_parts(
        bounds: Bounds,
        levels: usize,
        observations: usize,
        members: Vec<Vec<usize>>,
    ) -> Result<Self, TreeError> {
        if !(MIN_LEVELS..=MAX_LEVELS).contains(&levels) {
            return Err(TreeError::BadLevelCount(levels));
        }
        if members.len() != level_offset(levels + 1) {
            return Err(TreeError::UnknownBox(members.len()));
        }
        Ok(Self {
            bounds,
            levels,
            observations,
            members,
        })
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    /// Leaf level `L`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn observation_count(&self) -> usize {
        self.observations
    }

    pub fn box_count(&self) -> usize {
        self.members.len()
    }

    /// Boxes of one level in ascending id order.
    pub fn level_boxes(&self, level: usize) -> impl Iterator<Item = BoxId> {
        (level_offset(level)..level_offset(level + 1)).map(BoxId)
    }

    pub fn leaves(&self) -> impl Iterator<Item = BoxId> {
        self.level_boxes(self.levels)
    }

    pub fn is_leaf(&self, b: BoxId) -> bool {
        b.0 >= level_offset(self.levels) && b.0 < self.members.len()
    }

    fn check(&self, b: BoxId) -> Result<(), TreeError> {
        if b.0 < self.members.len() {
            Ok(())
        } else {
            Err(TreeError::UnknownBox(b.0))
        }
    }

    /// Observation indices of one box, ascending.
    pub fn members(&self, b: BoxId) -> &[usize] {
        &self.members[b.0]
    }

    pub fn children(&self, b: BoxId) -> Result<[BoxId; 4], TreeError> {
        self.check(b)?;
        if self.is_leaf(b) {
            return Err(TreeError::Level {
                id: b.0,
                reason: "is a leaf and has no children",
            });
        }
        Ok(b.children())
    }

    pub fn parent(&self, b: BoxId) -> Result<BoxId, TreeError> {
        self.check(b)?;
        b.parent().ok_or(TreeError::Level {
            id: b.0,
            reason: "is on level 1; its parent is the unnumbered root",
        })
    }

    fn check_deep(&self, b: BoxId) -> Result<(), TreeError> {
        self.check(b)?;
        if b.level() < 2 {
            return Err(TreeError::Level {
                id: b.0,
                reason: "must be on level 2 or deeper",
            });
        }
        Ok(())
    }

    /// The box and its same-level neighbours, ascending. No level check.
    fn stencil(b: BoxId) -> Vec<BoxId> {
        let level = b.level();
        let side = 1isize << level;
        let (x, y) = b.grid();
        let mut out = Vec::with_capacity(9);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if (0..side).contains(&nx) && (0..side).contains(&ny) {
                    out.push(BoxId::from_grid(level, nx as usize, ny as usize));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn near_field(&self, b: BoxId) -> Result<Vec<BoxId>, TreeError> {
        self.check_deep(b)?;
        Ok(Self::stencil(b))
    }

    pub fn far_field(&self, b: BoxId) -> Result<Vec<BoxId>, TreeError> {
        let near = self.near_field(b)?;
        Ok(self
            .level_boxes(b.level())
            .filter(|c| near.binary_search(c).is_err())
            .collect())
    }

    /// Children of the parent's near field that lie in the far field of `b`.
    pub fn interaction_list(&self, b: BoxId) -> Result<Vec<BoxId>, TreeError> {
        let near = self.near_field(b)?;
        let parent = b.parent().expect("level >= 2 has a parent");
        let mut out: Vec<BoxId> = Self::stencil(parent)
            .into_iter()
            .flat_map(|p| p.children())
            .filter(|c| near.binary_search(c).is_err())
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Concatenated member lists of `boxes`, taken in ascending box order.
    pub fn indices_of(&self, boxes: &[BoxId]) -> Result<Vec<usize>, TreeError> {
        let mut sorted = boxes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(first) = sorted.first() {
            let level = first.level();
            for &b in &sorted {
                self.check(b)?;
                if b.level() != level {
                    return Err(TreeError::MixedLevels);
                }
            }
        }
        Ok(sorted.iter().flat_map(|&b| self.members(b).iter().copied()).collect())
    }

    /// One tab-separated record per box: id, level, grid x, grid y, occupancy.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("box_id\tlevel\tx\ty\toccupancy\n");
        for id in 0..self.members.len() {
            let b = BoxId(id);
            let (x, y) = b.grid();
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", id, b.level(), x, y, self.members[id].len());
        }
        out
    }
}
