//! Procedural pathology-like scenes with exact masks, and dataset persistence.
//!
//! Each patch holds one functional-unit class (1–3 instances by default) plus
//! scattered nuclei. Masks are rasterised by testing pixel centres against the
//! analytic shapes, so they are exact by construction; the RGB image is
//! rendered from the same shapes with class-specific texture.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mask::Mask;
use crate::{Error, Result};

/// Functional-unit class of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitClass {
    Dt,
    Pt,
    Tuft,
    Capsule,
}

impl UnitClass {
    pub const ALL: [UnitClass; 4] = [UnitClass::Dt, UnitClass::Pt, UnitClass::Tuft, UnitClass::Capsule];

    /// Row index used by the fixed-ID prompt tables.
    pub fn index(self) -> usize {
        match self {
            UnitClass::Dt => 0,
            UnitClass::Pt => 1,
            UnitClass::Tuft => 2,
            UnitClass::Capsule => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            UnitClass::Dt => "dt",
            UnitClass::Pt => "pt",
            UnitClass::Tuft => "tuft",
            UnitClass::Capsule => "capsule",
        }
    }

    /// Name substituted for `<class>` in free-text prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            UnitClass::Dt => "distal tubule",
            UnitClass::Pt => "proximal tubule",
            UnitClass::Tuft => "tuft",
            UnitClass::Capsule => "capsule",
        }
    }
}

impl fmt::Display for UnitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for UnitClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::Domain(format!("unknown unit class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Shape and colour parameters for one unit class.
///
/// Radii are fractions of the image side so scenes keep their layout at any
/// resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassArchetype {
    pub radius: (f64, f64),
    pub aspect: (f64, f64),
    pub color: [f64; 3],
    pub texture: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSet {
    pub dt: ClassArchetype,
    pub pt: ClassArchetype,
    pub tuft: ClassArchetype,
    pub capsule: ClassArchetype,
}

impl ArchetypeSet {
    pub fn get(&self, class: UnitClass) -> &ClassArchetype {
        match class {
            UnitClass::Dt => &self.dt,
            UnitClass::Pt => &self.pt,
            UnitClass::Tuft => &self.tuft,
            UnitClass::Capsule => &self.capsule,
        }
    }
}

impl Default for ArchetypeSet {
    fn default() -> Self {
        Self {
            dt: ClassArchetype {
                radius: (0.20, 0.26),
                aspect: (0.75, 0.95),
                color: [0.88, 0.56, 0.70],
                texture: 0.04,
            },
            pt: ClassArchetype {
                radius: (0.17, 0.24),
                aspect: (0.65, 0.95),
                color: [0.74, 0.36, 0.55],
                texture: 0.07,
            },
            tuft: ClassArchetype {
                radius: (0.17, 0.23),
                aspect: (1.0, 1.0),
                color: [0.58, 0.30, 0.62],
                texture: 0.06,
            },
            capsule: ClassArchetype {
                radius: (0.21, 0.27),
                aspect: (1.0, 1.0),
                color: [0.70, 0.44, 0.58],
                texture: 0.04,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Backbone patch size the image side must be divisible by.
    pub patch_size: usize,
    pub units_per_patch: (usize, usize),
    pub nuclei_per_patch: (usize, usize),
    /// Nucleus radius range in pixels.
    pub nuclei_radius: (f64, f64),
    pub class_archetypes: ArchetypeSet,
    pub require_nucleus_in_unit: bool,
    /// Fraction of the non-mandatory nuclei that are placed inside units.
    pub inside_fraction: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            units_per_patch: (1, 3),
            nuclei_per_patch: (8, 24),
            nuclei_radius: (2.0, 3.0),
            class_archetypes: ArchetypeSet::default(),
            require_nucleus_in_unit: true,
            inside_fraction: 0.35,
            max_attempts: 400,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.units_per_patch.0 > self.units_per_patch.1 {
            return bad("units_per_patch range is empty".into());
        }
        if self.nuclei_per_patch.0 > self.nuclei_per_patch.1 {
            return bad("nuclei_per_patch range is empty".into());
        }
        let (r0, r1) = self.nuclei_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("nuclei_radius range ({r0}, {r1}) is invalid"));
        }
        for class in UnitClass::ALL {
            let a = self.class_archetypes.get(class);
            if !(a.radius.0 > 0.0 && a.radius.0 <= a.radius.1 && a.aspect.0 > 0.0 && a.aspect.0 <= a.aspect.1 && a.aspect.1 <= 1.0) {
                return bad(format!("archetype for {class} has an invalid range"));
            }
            let unit_r = a.radius.0 * a.aspect.0 * self.image_size as f64;
            if r1 >= unit_r {
                return bad(format!(
                    "nuclei radius {r1} must be below the {class} characteristic radius {unit_r:.2}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.inside_fraction) {
            return bad("inside_fraction must lie in [0, 1]".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

/// RGB image in `[0, 1]`, row-major `H x W x 3`, quantised to 8-bit levels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub unit_class: UnitClass,
    pub sample_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMasks {
    pub unit_mask: Mask,
    pub nuclei_mask: Mask,
    pub unit_class: UnitClass,
}

/// Analytic unit geometry in pixel coordinates (pixel `(r, c)` has centre
/// `(c + 0.5, r + 0.5)`).
#[derive(Clone, Debug, PartialEq)]
pub enum UnitShape {
    /// Ring between an outer ellipse and a concentric inner (lumen) ellipse.
    ThickWalledEllipse { cx: f64, cy: f64, a: f64, b: f64, angle: f64, wall: f64 },
    /// Filled ellipse with a smooth radial perturbation.
    PerturbedEllipse { cx: f64, cy: f64, a: f64, b: f64, angle: f64, amp: f64, freq: f64, phase: f64 },
    /// Core disk plus overlapping lobules (offsets relative to the centre).
    Cluster { cx: f64, cy: f64, core: f64, lobes: Vec<(f64, f64, f64)> },
    /// Filled disk; rendered as a wall ring, a pale space and an inner cluster.
    Capsule { cx: f64, cy: f64, radius: f64, inner: Box<UnitShape> },
}

fn ellipse_rho(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    let (s, c) = angle.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (((u / a).powi(2) + (v / b).powi(2)).sqrt(), v.atan2(u))
}

impl UnitShape {
    pub fn center(&self) -> (f64, f64) {
        match *self {
            UnitShape::ThickWalledEllipse { cx, cy, .. }
            | UnitShape::PerturbedEllipse { cx, cy, .. }
            | UnitShape::Cluster { cx, cy, .. }
            | UnitShape::Capsule { cx, cy, .. } => (cx, cy),
        }
    }

    /// Radius of a disk around the centre that contains the whole shape.
    pub fn extent(&self) -> f64 {
        match self {
            UnitShape::ThickWalledEllipse { a, .. } => *a,
            UnitShape::PerturbedEllipse { a, amp, .. } => a * (1.0 + amp),
            UnitShape::Cluster { core, lobes, .. } => lobes
                .iter()
                .map(|(dx, dy, r)| (dx * dx + dy * dy).sqrt() + r)
                .fold(*core, f64::max),
            UnitShape::Capsule { radius, .. } => *radius,
        }
    }

    /// Unit-mask membership of the point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            &UnitShape::ThickWalledEllipse { cx, cy, a, b, angle, wall } => {
                let (outer, _) = ellipse_rho(x, y, cx, cy, a, b, angle);
                let (inner, _) = ellipse_rho(x, y, cx, cy, a - wall, b - wall, angle);
                outer <= 1.0 && inner > 1.0
            }
            &UnitShape::PerturbedEllipse { cx, cy, a, b, angle, amp, freq, phase } => {
                let (rho, theta) = ellipse_rho(x, y, cx, cy, a, b, angle);
                rho <= 1.0 + amp * (freq * theta + phase).sin()
            }
            UnitShape::Cluster { cx, cy, core, lobes } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= core * core
                    || lobes.iter().any(|&(lx, ly, r)| (dx - lx).powi(2) + (dy - ly).powi(2) <= r * r)
            }
            &UnitShape::Capsule { cx, cy, radius, .. } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
        }
    }

    /// Filled outline (lumen included) used to keep units and outside nuclei apart.
    pub fn footprint_contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let (cx, cy) = self.center();
        match *self {
            UnitShape::ThickWalledEllipse { a, b, angle, .. } => {
                ellipse_rho(x, y, cx, cy, a + margin, b + margin, angle).0 <= 1.0
            }
            UnitShape::PerturbedEllipse { a, b, angle, amp, .. } => {
                let k = 1.0 + amp;
                ellipse_rho(x, y, cx, cy, a * k + margin, b * k + margin, angle).0 <= 1.0
            }
            _ => {
                let r = self.extent() + margin;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| self.contains(c as f64 + 0.5, r as f64 + 0.5))
    }
}

/// Pixels whose centres lie within `radius` of `(cx, cy)`.
pub fn rasterize_disk(height: usize, width: usize, cx: f64, cy: f64, radius: f64) -> Mask {
    let r2 = radius * radius;
    Mask::from_fn(height, width, |r, c| {
        (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2) <= r2
    })
}

fn disk_pixels(size: usize, cx: f64, cy: f64, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let lo_r = (cy - radius - 1.0).floor().max(0.0) as usize;
    let hi_r = ((cy + radius + 1.0).ceil().max(0.0) as usize).min(size);
    let lo_c = (cx - radius - 1.0).floor().max(0.0) as usize;
    let hi_c = ((cx + radius + 1.0).ceil().max(0.0) as usize).min(size);
    let mut out = Vec::new();
    for r in lo_r..hi_r {
        for c in lo_c..hi_c {
            if (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2) <= r2 {
                out.push(r * size + c);
            }
        }
    }
    out
}

/// A placed nucleus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nucleus {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Full scene description before rendering.
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub unit_class: UnitClass,
    pub units: Vec<UnitShape>,
    pub nuclei: Vec<Nucleus>,
}

/// Mixes a dataset seed and a sample index into an independent per-sample seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = base ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_unit(class: UnitClass, arch: &ClassArchetype, size: f64, nucleus_max: f64, rng: &mut ChaCha8Rng) -> UnitShape {
    let radius = rng.random_range(arch.radius.0..=arch.radius.1) * size;
    let aspect = rng.random_range(arch.aspect.0..=arch.aspect.1);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let margin = radius + 1.0;
    let cx = rng.random_range(margin..=size - margin);
    let cy = rng.random_range(margin..=size - margin);
    match class {
        UnitClass::Dt => {
            let b = radius * aspect;
            let wall = (0.6 * b).max(2.0 * nucleus_max + 2.0).min(b - 1.5);
            UnitShape::ThickWalledEllipse { cx, cy, a: radius, b, angle, wall }
        }
        UnitClass::Pt => {
            let amp = rng.random_range(0.04..0.10);
            UnitShape::PerturbedEllipse {
                cx,
                cy,
                a: radius / (1.0 + amp),
                b: radius * aspect / (1.0 + amp),
                angle,
                amp,
                freq: rng.random_range(2..=4) as f64,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        }
        UnitClass::Tuft => cluster(cx, cy, radius, rng),
        UnitClass::Capsule => UnitShape::Capsule {
            cx,
            cy,
            radius,
            inner: Box::new(cluster(cx, cy, radius * 0.62, rng)),
        },
    }
}

fn cluster(cx: f64, cy: f64, radius: f64, rng: &mut ChaCha8Rng) -> UnitShape {
    let n = rng.random_range(5..=7);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let lobe_r = radius * 0.42;
    let dist = radius - lobe_r;
    let lobes = (0..n)
        .map(|k| {
            let t = phase + std::f64::consts::TAU * k as f64 / n as f64;
            let d = dist * rng.random_range(0.85..=1.0);
            (d * t.cos(), d * t.sin(), lobe_r * rng.random_range(0.85..=1.0))
        })
        .collect();
    UnitShape::Cluster { cx, cy, core: radius * 0.6, lobes }
}

/// Samples unit and nucleus geometry for one patch.
pub fn layout_scene(config: &SceneConfig, unit_class: UnitClass, sample_seed: u64) -> Result<SceneLayout> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let size = config.image_size;
    let sf = size as f64;
    let arch = config.class_archetypes.get(unit_class);
    let n_units = rng.random_range(config.units_per_patch.0..=config.units_per_patch.1);
    let mut units: Vec<UnitShape> = Vec::with_capacity(n_units);
    let mut footprint = vec![false; size * size];
    for _ in 0..n_units {
        for _ in 0..config.max_attempts {
            let shape = sample_unit(unit_class, arch, sf, config.nuclei_radius.1, &mut rng);
            // 2 px gap keeps unit instances separate 4-connected components.
            let clash = (0..size * size).any(|i| {
                footprint[i] && shape.footprint_contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5, 2.0)
            });
            if clash {
                continue;
            }
            for (i, f) in footprint.iter_mut().enumerate() {
                if shape.footprint_contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5, 0.0) {
                    *f = true;
                }
            }
            units.push(shape);
            break;
        }
    }
    let unit_masks: Vec<Mask> = units.iter().map(|u| u.rasterize(size, size)).collect();
    let unit_pixels: Vec<Vec<(usize, usize)>> = unit_masks.iter().map(Mask::pixels).collect();

    let n_nuclei = rng.random_range(config.nuclei_per_patch.0..=config.nuclei_per_patch.1);
    let mut occupied = vec![false; size * size];
    let mut nuclei = Vec::with_capacity(n_nuclei);
    let mandatory = if config.require_nucleus_in_unit { units.len() } else { 0 };

    let try_inside = |unit: usize, radius: f64, rng: &mut ChaCha8Rng, occupied: &[bool]| -> Option<Nucleus> {
        let pixels = &unit_pixels[unit];
        if pixels.is_empty() {
            return None;
        }
        let (r, c) = pixels[rng.random_range(0..pixels.len())];
        let cx = c as f64 + rng.random_range(0.0..1.0);
        let cy = r as f64 + rng.random_range(0.0..1.0);
        let body = disk_pixels(size, cx, cy, radius + 0.5);
        let in_unit = body.iter().all(|&i| unit_masks[unit].data()[i]) && !body.is_empty();
        let free = disk_pixels(size, cx, cy, radius + 1.5).iter().all(|&i| !occupied[i]);
        (in_unit && free).then_some(Nucleus { cx, cy, radius })
    };
    let try_outside = |radius: f64, rng: &mut ChaCha8Rng, occupied: &[bool]| -> Option<Nucleus> {
        let lo = radius + 0.5;
        let cx = rng.random_range(lo..=sf - lo);
        let cy = rng.random_range(lo..=sf - lo);
        let halo = disk_pixels(size, cx, cy, radius + 1.5);
        let ok = halo.iter().all(|&i| !occupied[i] && !footprint[i]);
        ok.then_some(Nucleus { cx, cy, radius })
    };

    for k in 0..n_nuclei {
        let radius = rng.random_range(config.nuclei_radius.0..=config.nuclei_radius.1);
        let mut placed = None;
        if k < mandatory {
            for _ in 0..config.max_attempts {
                placed = try_inside(k, radius, &mut rng, &occupied);
                if placed.is_some() {
                    break;
                }
            }
            if placed.is_none() {
                return Err(Error::GenerationCapacity(format!(
                    "could not fit a nucleus of radius {radius:.2} inside unit {k} after {} attempts",
                    config.max_attempts
                )));
            }
        } else {
            let inside = !units.is_empty() && rng.random_bool(config.inside_fraction);
            for attempt in 0..2 * config.max_attempts {
                // fall back to the other placement mode halfway through
                let want_inside = inside ^ (attempt >= config.max_attempts);
                placed = if want_inside && !units.is_empty() {
                    let u = rng.random_range(0..units.len());
                    try_inside(u, radius, &mut rng, &occupied)
                } else if !want_inside {
                    try_outside(radius, &mut rng, &occupied)
                } else {
                    None
                };
                if placed.is_some() {
                    break;
                }
            }
            if placed.is_none() {
                return Err(Error::GenerationCapacity(format!(
                    "placed {k} of {n_nuclei} nuclei; no room for another after {} attempts",
                    2 * config.max_attempts
                )));
            }
        }
        let n = placed.expect("checked above");
        for i in disk_pixels(size, n.cx, n.cy, n.radius) {
            occupied[i] = true;
        }
        nuclei.push(n);
    }
    Ok(SceneLayout { unit_class, units, nuclei })
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn render(config: &SceneConfig, layout: &SceneLayout, masks: &SceneMasks, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = config.image_size;
    let arch = config.class_archetypes.get(layout.unit_class);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 64.0 / size as f64;
    let (fx, fy) = (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let background = [0.95, 0.84, 0.89];
    let lumen = [0.98, 0.95, 0.97];
    let nucleus = [0.26, 0.16, 0.46];
    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let (xs, ys) = (x * scale, y * scale);
            let mut rgb = background;
            let wave = 0.03 * (fx * xs + px).sin() * (fy * ys + py).sin();
            let mut texture = wave;
            if masks.nuclei_mask.get(r, c) {
                rgb = nucleus;
                texture = 0.0;
            } else if masks.unit_mask.get(r, c) {
                rgb = arch.color;
                texture = match layout.unit_class {
                    UnitClass::Dt => arch.texture * (0.9 * (xs + ys)).sin(),
                    UnitClass::Pt => arch.texture * noise.sample(rng),
                    UnitClass::Tuft => arch.texture * (0.8 * xs).sin() * (0.8 * ys).sin(),
                    UnitClass::Capsule => 0.0,
                };
                if let Some(UnitShape::Capsule { cx, cy, radius, inner }) =
                    layout.units.iter().find(|u| u.footprint_contains(x, y, 0.0))
                {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    if inner.contains(x, y) {
                        rgb = config.class_archetypes.tuft.color;
                        texture = arch.texture * (0.8 * xs).sin() * (0.8 * ys).sin();
                    } else if d < radius * 0.8 {
                        rgb = lumen;
                    }
                }
            } else if layout.units.iter().any(|u| u.footprint_contains(x, y, 0.0)) {
                // dt lumen
                rgb = lumen;
            }
            for ch in rgb {
                let v = ch + texture + 0.025 * noise.sample(rng);
                pixels.push(quantize(v));
            }
        }
    }
    pixels
}

/// Generates one patch of class `unit_class`; a pure function of its inputs.
pub fn generate_scene(config: &SceneConfig, unit_class: UnitClass, sample_seed: u64) -> Result<(ImagePatch, SceneMasks)> {
    let layout = layout_scene(config, unit_class, sample_seed)?;
    let size = config.image_size;
    let mut unit_mask = Mask::new(size, size);
    for u in &layout.units {
        unit_mask = unit_mask.union(&u.rasterize(size, size))?;
    }
    let mut nuclei_mask = Mask::new(size, size);
    for n in &layout.nuclei {
        for i in disk_pixels(size, n.cx, n.cy, n.radius) {
            nuclei_mask.set(i / size, i % size, true);
        }
    }
    let masks = SceneMasks { unit_mask, nuclei_mask, unit_class };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 0x5EED));
    let pixels = render(config, &layout, &masks, &mut rng);
    let patch = ImagePatch {
        height: size,
        width: size,
        pixels,
        unit_class,
        sample_id: format!("scene-{sample_seed:016x}"),
        seed: sample_seed,
    };
    Ok((patch, masks))
}

/// Patch counts per (class, split), rows in [`UnitClass::ALL`] order and
/// columns in [`Split::ALL`] order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts(pub [[usize; 3]; 4]);

impl SplitCounts {
    /// Train/val/test patch counts of the reference kidney dataset.
    pub const REFERENCE: SplitCounts = SplitCounts([[402, 94, 83], [458, 99, 95], [287, 62, 67], [306, 64, 66]]);

    pub fn get(&self, class: UnitClass, split: Split) -> usize {
        self.0[class.index()][split_index(split)]
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    /// Scales every cell by `factor` and rounds with largest-remainder
    /// apportionment: each cell gets at least its floor and the total equals
    /// `floor(total * factor)`. Ties go to the earlier cell.
    pub fn scaled(&self, factor: f64) -> Result<SplitCounts> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::Config(format!("scale factor {factor} must be finite and non-negative")));
        }
        let exact: Vec<f64> = self.0.iter().flatten().map(|&n| n as f64 * factor).collect();
        let mut cells: Vec<usize> = exact.iter().map(|v| (v + 1e-9).floor() as usize).collect();
        let target = (self.total() as f64 * factor + 1e-9).floor() as usize;
        let assigned: usize = cells.iter().sum();
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - cells[a] as f64;
            let rb = exact[b] - cells[b] as f64;
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().take(target.saturating_sub(assigned)) {
            cells[i] += 1;
        }
        let mut out = [[0usize; 3]; 4];
        for (i, n) in cells.into_iter().enumerate() {
            out[i / 3][i % 3] = n;
        }
        Ok(SplitCounts(out))
    }
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub image_size: usize,
    pub counts: SplitCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_config: Option<SceneConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub image_path: String,
    pub unit_mask_path: String,
    pub nuclei_mask_path: String,
    pub unit_class: UnitClass,
    pub split: Split,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
enum ManifestLine {
    Header(ManifestHeader),
    Sample(ManifestRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const MANIFEST_FORMAT: &str = "promptseg-dataset";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut header = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match parsed {
                ManifestLine::Header(h) if header.is_none() && n == 0 => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(Error::Manifest(format!("{}:{}: unexpected header", path.display(), n + 1)))
                }
                ManifestLine::Sample(r) => {
                    if !seen.insert(r.sample_id.clone()) {
                        return Err(Error::DuplicateSampleId(r.sample_id));
                    }
                    records.push(r);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Manifest(format!("{} has no header record", path.display())))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Manifest(format!("unknown dataset format `{}`", header.format)));
        }
        Ok(Manifest { header, records })
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        let mut put = |line: &ManifestLine| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(io_err(&path))
        };
        put(&ManifestLine::Header(self.header.clone()))?;
        for r in &self.records {
            put(&ManifestLine::Sample(r.clone()))?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(path)
    }
}

fn save_rgb(path: &Path, patch: &ImagePatch) -> Result<()> {
    let bytes: Vec<u8> = patch.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(patch.width as u32, patch.height as u32, bytes)
        .ok_or_else(|| Error::Shape("pixel buffer does not match patch size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Generates every patch in `counts`, writes images, masks and the manifest
/// under `out_dir`, and returns the manifest.
pub fn generate_dataset(config: &SceneConfig, counts: &SplitCounts, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    for sub in ["images", "masks"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut records = Vec::with_capacity(counts.total());
    let mut seen = HashSet::new();
    let mut index = 0u64;
    for class in UnitClass::ALL {
        for split in Split::ALL {
            for k in 0..counts.get(class, split) {
                let seed = derive_seed(config.seed, index);
                index += 1;
                let sample_id = format!("{}_{}_{:05}", class.code(), split.code(), k);
                if !seen.insert(sample_id.clone()) {
                    return Err(Error::DuplicateSampleId(sample_id));
                }
                let (mut patch, masks) = generate_scene(config, class, seed)?;
                patch.sample_id = sample_id.clone();
                let record = ManifestRecord {
                    image_path: format!("images/{sample_id}.png"),
                    unit_mask_path: format!("masks/{sample_id}_unit.png"),
                    nuclei_mask_path: format!("masks/{sample_id}_nuclei.png"),
                    sample_id,
                    unit_class: class,
                    split,
                    seed,
                };
                save_rgb(&out_dir.join(&record.image_path), &patch)?;
                save_mask(&out_dir.join(&record.unit_mask_path), &masks.unit_mask)?;
                save_mask(&out_dir.join(&record.nuclei_mask_path), &masks.nuclei_mask)?;
                records.push(record);
            }
        }
    }
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            image_size: config.image_size,
            counts: counts.clone(),
            scene_config: Some(config.clone()),
        },
        records,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// One loaded patch.
#[derive(Clone, Debug)]
pub struct Sample {
    pub patch: ImagePatch,
    pub masks: SceneMasks,
    pub split: Split,
}

fn read_png(dir: &Path, rel: &str, sample_id: &str) -> Result<image::DynamicImage> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(Error::MissingFile { sample_id: sample_id.to_string(), path });
    }
    image::open(&path).map_err(|e| Error::Image(format!("{sample_id}: {}: {e}", path.display())))
}

fn load_mask(dir: &Path, rel: &str, sample_id: &str) -> Result<Mask> {
    let img = read_png(dir, rel, sample_id)?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::from_vec(h as usize, w as usize, img.into_raw().into_iter().map(|v| v >= 128).collect())
}

fn load_record(dir: &Path, rec: &ManifestRecord) -> Result<Sample> {
    let img = read_png(dir, &rec.image_path, &rec.sample_id)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let unit_mask = load_mask(dir, &rec.unit_mask_path, &rec.sample_id)?;
    let nuclei_mask = load_mask(dir, &rec.nuclei_mask_path, &rec.sample_id)?;
    for m in [&unit_mask, &nuclei_mask] {
        if m.height() != h || m.width() != w {
            return Err(Error::Shape(format!(
                "{}: image is {h}x{w} but a mask is {}x{}",
                rec.sample_id,
                m.height(),
                m.width()
            )));
        }
    }
    Ok(Sample {
        patch: ImagePatch {
            height: h,
            width: w,
            pixels,
            unit_class: rec.unit_class,
            sample_id: rec.sample_id.clone(),
            seed: rec.seed,
        },
        masks: SceneMasks { unit_mask, nuclei_mask, unit_class: rec.unit_class },
        split: rec.split,
    })
}

/// Lazily loads patches in manifest order.
pub struct DatasetReader {
    dir: PathBuf,
    records: std::vec::IntoIter<ManifestRecord>,
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        Some(load_record(&self.dir, &rec))
    }
}

pub fn load_dataset(dir: &Path) -> Result<DatasetReader> {
    let manifest = Manifest::read(dir)?;
    Ok(DatasetReader { dir: dir.to_path_buf(), records: manifest.records.into_iter() })
}

/// A fully loaded dataset.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        Ok(Dataset { samples: load_dataset(dir)?.collect::<Result<Vec<_>>>()? })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn of(&self, split: Split, class: UnitClass) -> Vec<&Sample> {
        self.split(split).filter(|s| s.patch.unit_class == class).collect()
    }
}

/// SHA-256 over the manifest and every file it references, in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest = Manifest::read(dir)?;
    let mut hasher = Sha256::new();
    let mpath = dir.join(MANIFEST_FILE);
    hasher.update(fs::read(&mpath).map_err(io_err(&mpath))?);
    for rec in &manifest.records {
        for rel in [&rec.image_path, &rec.unit_mask_path, &rec.nuclei_mask_path] {
            let p = dir.join(rel);
            hasher.update(fs::read(&p).map_err(io_err(&p))?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
