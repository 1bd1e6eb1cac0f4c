//! Synthetic box-city depth scenes with exact per-pixel labels.
//!
//! Boxes stand on a flat ground plane. The orthographic render sees only
//! roofs and ground. The oblique render adds a global depth tilt and, on the
//! sides of every box facing the tilt, a strip of steep depth ramp standing
//! in for the visible facade.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::mgsf::{DepthMap, GeoMask};
use crate::ops;

/// Facade strip width per unit of `height / |slope|`.
pub const FACADE_WIDTH_FACTOR: f64 = 0.25;
pub const MAX_FACADE_WIDTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Label {
    Ground = 0,
    Roof = 1,
    Facade = 2,
    Edge = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Ground, Label::Roof, Label::Facade, Label::Edge];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Axis-aligned building: footprint `[x, x+w) × [y, y+h)`, raised by `height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub height: f64,
}

impl BoxSpec {
    fn overlaps(&self, o: &BoxSpec) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        (self.x..self.x + self.w).contains(&x) && (self.y..self.y + self.h).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub ground_depth: f64,
    pub boxes: Vec<BoxSpec>,
    /// Depth added per pixel along `x` and `y` in the oblique view.
    pub oblique_slope: (f64, f64),
    /// `(H, W)`.
    pub raster: (usize, usize),
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ground_depth: 20.0,
            boxes: Vec::new(),
            oblique_slope: (0.0, 0.0),
            raster: (64, 64),
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.raster;
        if h < 3 || w < 3 {
            return Err(Error::invalid("scene", format!("raster must be at least 3×3, got {h}×{w}")));
        }
        let finite = [self.ground_depth, self.oblique_slope.0, self.oblique_slope.1, self.noise_sigma];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "scene" });
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("scene", "noise sigma must be non-negative"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(Error::invalid("scene", format!("box {i} does not fit in the {h}×{w} raster")));
            }
            if !(b.height > 0.0 && b.height.is_finite()) {
                return Err(Error::invalid("scene", format!("box {i} must have positive finite height")));
            }
        }
        for i in 0..self.boxes.len() {
            for j in i + 1..self.boxes.len() {
                if self.boxes[i].overlaps(&self.boxes[j]) {
                    return Err(Error::OverlappingBoxes(i, j));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self> {
        let labels = codes
            .iter()
            .map(|&c| Label::from_code(c).ok_or_else(|| Error::invalid("label map", format!("unknown label byte {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Majority label of every pooling bin; ties go to the lower code.
    pub fn pool_majority(&self, h: usize, w: usize) -> Result<Vec<Label>> {
        if h == 0 || w == 0 || h > self.height || w > self.width {
            return Err(Error::invalid(
                "pool labels",
                format!("cannot pool {}×{} labels to {h}×{w}", self.height, self.width),
            ));
        }
        let mut out = Vec::with_capacity(h * w);
        for by in 0..h {
            let (y0, y1) = ops::pool_bin(by, h, self.height);
            for bx in 0..w {
                let (x0, x1) = ops::pool_bin(bx, w, self.width);
                let mut counts = [0usize; 4];
                for y in y0..y1 {
                    for x in x0..x1 {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let mut best = 0;
                for c in 1..4 {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                out.push(Label::ALL[best]);
            }
        }
        Ok(out)
    }
}

struct Canvas {
    h: usize,
    w: usize,
    depth: Vec<f64>,
    labels: Vec<Label>,
}

fn base_render(spec: &SceneSpec) -> Result<Canvas> {
    spec.validate()?;
    let (h, w) = spec.raster;
    let mut c = Canvas {
        h,
        w,
        depth: vec![spec.ground_depth; h * w],
        labels: vec![Label::Ground; h * w],
    };
    for b in &spec.boxes {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                c.depth[y * w + x] = spec.ground_depth - b.height;
                c.labels[y * w + x] = Label::Roof;
            }
        }
    }
    // one-pixel ground ring around every footprint
    for b in &spec.boxes {
        for y in b.y.saturating_sub(1)..(b.y + b.h + 1).min(h) {
            for x in b.x.saturating_sub(1)..(b.x + b.w + 1).min(w) {
                if c.labels[y * w + x] == Label::Ground {
                    c.labels[y * w + x] = Label::Edge;
                }
            }
        }
    }
    Ok(c)
}

fn add_noise(c: &mut Canvas, spec: &SceneSpec) {
    if spec.noise_sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    for d in &mut c.depth {
        let z: f64 = StandardNormal.sample(&mut rng);
        *d += spec.noise_sigma * z;
    }
}

fn finish(c: Canvas) -> Result<(DepthMap, LabelMap)> {
    Ok((DepthMap::new(c.h, c.w, c.depth)?, LabelMap::new(c.h, c.w, c.labels)?))
}

/// Top-down view: ground and roofs only.
pub fn render_ortho(spec: &SceneSpec) -> Result<(DepthMap, LabelMap)> {
    let mut c = base_render(spec)?;
    add_noise(&mut c, spec);
    finish(c)
}

/// Width of the facade strip for a box of `height` under tilt `slope`.
pub fn facade_width(height: f64, slope: f64) -> usize {
    let raw = math::ceil(FACADE_WIDTH_FACTOR * height / slope.abs());
    if raw.is_finite() {
        (raw as usize).clamp(1, MAX_FACADE_WIDTH)
    } else {
        MAX_FACADE_WIDTH
    }
}

/// Tilted view with facade strips on the slope-facing sides of every box.
///
/// A strip of width `fw` ramps from roof depth towards ground depth in
/// `fw + 1` equal steps. It only paints over ground and edge pixels.
pub fn render_oblique(spec: &SceneSpec) -> Result<(DepthMap, LabelMap)> {
    let mut c = base_render(spec)?;
    let (sx, sy) = spec.oblique_slope;
    if (sx, sy) != (0.0, 0.0) {
        let (h, w) = (c.h, c.w);
        let g = spec.ground_depth;
        let mut paint = |y: usize, x: usize, t: usize, fw: usize, ht: f64| {
            let i = y * w + x;
            if matches!(c.labels[i], Label::Ground | Label::Edge) {
                c.depth[i] = g - ht + ht * (t + 1) as f64 / (fw + 1) as f64;
                c.labels[i] = Label::Facade;
            }
        };
        for b in &spec.boxes {
            if sx != 0.0 {
                let fw = facade_width(b.height, sx);
                for t in 0..fw {
                    let x = if sx > 0.0 {
                        (b.x + b.w + t) as isize
                    } else {
                        b.x as isize - 1 - t as isize
                    };
                    if (0..w as isize).contains(&x) {
                        for y in b.y..b.y + b.h {
                            paint(y, x as usize, t, fw, b.height);
                        }
                    }
                }
            }
            if sy != 0.0 {
                let fw = facade_width(b.height, sy);
                for t in 0..fw {
                    let y = if sy > 0.0 {
                        (b.y + b.h + t) as isize
                    } else {
                        b.y as isize - 1 - t as isize
                    };
                    if (0..h as isize).contains(&y) {
                        for x in b.x..b.x + b.w {
                            paint(y as usize, x, t, fw, b.height);
                        }
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                c.depth[y * w + x] += sx * x as f64 + sy * y as f64;
            }
        }
    }
    add_noise(&mut c, spec);
    finish(c)
}

/// Agreement between a mask and scene labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskQuality {
    /// Mean of the horizontal and facade recalls.
    pub balanced_accuracy: f64,
    pub horizontal_recall: f64,
    pub facade_recall: f64,
    /// Mean mask per pooled label (`NaN` for labels absent after pooling).
    pub mean_ground: f64,
    pub mean_roof: f64,
    pub mean_facade: f64,
    pub evaluated: usize,
}

/// Scores a mask against labels pooled to its resolution by majority vote.
///
/// Bins voted EDGE are skipped; a bin counts as horizontal when its mask
/// value exceeds 0.5. Labels without any facade bin cannot be scored.
pub fn mask_quality(mask: &GeoMask, labels: &LabelMap) -> Result<MaskQuality> {
    let pooled = labels.pool_majority(mask.height(), mask.width())?;
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&l, &m) in pooled.iter().zip(mask.values()) {
        sums[l as usize] += m;
        counts[l as usize] += 1;
        let class = match l {
            Label::Ground | Label::Roof => 0,
            Label::Facade => 1,
            Label::Edge => continue,
        };
        totals[class] += 1;
        let says_horizontal = m > 0.5;
        if says_horizontal == (class == 0) {
            hits[class] += 1;
        }
    }
    if totals[1] == 0 {
        return Err(Error::NotEvaluable);
    }
    let recall = |c: usize| if totals[c] == 0 { 0.0 } else { hits[c] as f64 / totals[c] as f64 };
    let (hr, fr) = (recall(0), recall(1));
    let mean = |l: Label| sums[l as usize] / counts[l as usize] as f64;
    Ok(MaskQuality {
        balanced_accuracy: if totals[0] == 0 { fr } else { 0.5 * (hr + fr) },
        horizontal_recall: hr,
        facade_recall: fr,
        mean_ground: mean(Label::Ground),
        mean_roof: mean(Label::Roof),
        mean_facade: mean(Label::Facade),
        evaluated: totals[0] + totals[1],
    })
}

/// Random-city generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CityProfile {
    pub boxes: usize,
    pub height: (f64, f64),
    /// Range of each tilt component.
    pub slope: (f64, f64),
    /// Footprint side range before grid snapping.
    pub footprint: (usize, usize),
    /// Minimum clearance between footprints.
    pub gap: usize,
    /// Footprint origins and sides snap down to multiples of this.
    pub grid: usize,
    pub margin: usize,
    pub raster: (usize, usize),
    pub ground_depth: f64,
    pub noise_sigma: f64,
}

impl CityProfile {
    /// Two low buildings under a gentle tilt.
    pub fn standard() -> Self {
        Self {
            boxes: 2,
            height: (2.0, 4.0),
            slope: (0.1, 0.2),
            footprint: (8, 12),
            gap: 14,
            grid: 4,
            margin: 4,
            raster: (64, 64),
            ground_depth: 20.0,
            noise_sigma: 0.02,
        }
    }

    /// Taller buildings and a steeper tilt: wider facade strips.
    pub fn facade_heavy() -> Self {
        Self {
            height: (3.0, 6.0),
            slope: (0.15, 0.3),
            ..Self::standard()
        }
    }
}

impl Default for CityProfile {
    fn default() -> Self {
        Self::standard()
    }
}

const PLACEMENT_ROUNDS: usize = 20;
const ATTEMPTS_PER_ROUND: usize = 100;

fn place_boxes(rng: &mut ChaCha8Rng, profile: &CityProfile) -> Vec<BoxSpec> {
    let (rh, rw) = profile.raster;
    let grid = profile.grid.max(1);
    let g = profile.gap;
    let mut boxes: Vec<BoxSpec> = Vec::new();
    for _ in 0..ATTEMPTS_PER_ROUND {
        if boxes.len() == profile.boxes {
            break;
        }
        let mut side = || rng.random_range(profile.footprint.0..=profile.footprint.1);
        let (w, h) = (side(), side());
        let (w, h) = ((w - w % grid).max(grid), (h - h % grid).max(grid));
        let hi_x = rw.saturating_sub(w + g);
        let hi_y = rh.saturating_sub(h + g);
        if hi_x <= profile.margin || hi_y <= profile.margin {
            continue;
        }
        let x = rng.random_range(profile.margin..hi_x);
        let y = rng.random_range(profile.margin..hi_y);
        let (x, y) = (x - x % grid, y - y % grid);
        let height = rng.random_range(profile.height.0..=profile.height.1);
        let clear = boxes
            .iter()
            .all(|b| x + w + g <= b.x || b.x + b.w + g <= x || y + h + g <= b.y || b.y + b.h + g <= y);
        if clear {
            boxes.push(BoxSpec { x, y, w, h, height });
        }
    }
    boxes
}

/// Seeded random box city. Placement is rejection-sampled and restarted
/// when an early box leaves no room; a crowded profile may still yield
/// fewer than `profile.boxes` buildings.
pub fn box_city(seed: u64, profile: &CityProfile) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::new();
    for _ in 0..PLACEMENT_ROUNDS {
        let round = place_boxes(&mut rng, profile);
        if round.len() > boxes.len() {
            boxes = round;
        }
        if boxes.len() == profile.boxes {
            break;
        }
    }
    let sx = rng.random_range(profile.slope.0..=profile.slope.1);
    let sy = rng.random_range(profile.slope.0..=profile.slope.1);
    SceneSpec {
        ground_depth: profile.ground_depth,
        boxes,
        oblique_slope: (sx, sy),
        raster: profile.raster,
        noise_sigma: profile.noise_sigma,
        rng_seed: seed,
    }
}

impl SceneSpec {
    /// Footprint membership of a pixel.
    pub fn box_at(&self, y: usize, x: usize) -> Option<usize> {
        self.boxes.iter().position(|b| b.contains(y, x))
    }
}
