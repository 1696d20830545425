//! The nine set-algebraic segmentation targets, point prompts, training task
//! sets and the free-text prompt bank.
//!
//! | task | target                                         |
//! |------|------------------------------------------------|
//! | 1    | units                                          |
//! | 2    | nuclei                                         |
//! | 3    | units ∪ nuclei                                 |
//! | 4    | units ∩ nuclei                                 |
//! | 5    | nuclei \ units                                 |
//! | 6    | nucleus at the point                           |
//! | 7    | unit at the point                              |
//! | 8    | nuclei ∩ unit at the point                     |
//! | 9    | nuclei \ unit at the point                     |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mask::Mask;
use crate::synth_data::{SceneMasks, UnitClass};
use crate::{Error, Result};

pub const NUM_TASKS: usize = 9;
pub const TASK_IDS: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];
pub const PROMPT_VARIANTS: usize = 20;

pub fn requires_point(task_id: u8) -> bool {
    (6..=9).contains(&task_id)
}

fn check_task(task_id: u8) -> Result<()> {
    if (1..=9).contains(&task_id) {
        Ok(())
    } else {
        Err(Error::Domain(format!("task id {task_id} outside 1..=9")))
    }
}

/// Normalised image coordinates; `x` runs along columns, `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    /// Centre of pixel `(row, col)` on a `height x width` grid.
    pub fn pixel_center(row: usize, col: usize, height: usize, width: usize) -> Point {
        Point {
            x: (col as f64 + 0.5) / width as f64,
            y: (row as f64 + 0.5) / height as f64,
        }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    /// Pixel `(row, col)` containing the point.
    pub fn to_pixel(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !self.in_unit_square() {
            return Err(Error::InvalidPoint(format!("({}, {}) is outside [0,1]²", self.x, self.y)));
        }
        let col = ((self.x * width as f64) as usize).min(width - 1);
        let row = ((self.y * height as f64) as usize).min(height - 1);
        Ok((row, col))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u8,
    pub unit_class: UnitClass,
    pub point: Option<Point>,
    pub prompt_variant: Option<usize>,
}

impl TaskSpec {
    pub fn new(task_id: u8, unit_class: UnitClass, point: Option<Point>) -> Result<TaskSpec> {
        let spec = TaskSpec { task_id, unit_class, point, prompt_variant: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variant(mut self, variant: usize) -> TaskSpec {
        self.prompt_variant = Some(variant);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_task(self.task_id)?;
        match (requires_point(self.task_id), self.point) {
            (true, None) => Err(Error::InvalidPoint(format!("task {} needs a point", self.task_id))),
            (false, Some(_)) => Err(Error::InvalidPoint(format!("task {} takes no point", self.task_id))),
            (_, Some(p)) if !p.in_unit_square() => {
                Err(Error::InvalidPoint(format!("({}, {}) is outside [0,1]²", p.x, p.y)))
            }
            _ => {
                if let Some(v) = self.prompt_variant {
                    if v >= PROMPT_VARIANTS {
                        return Err(Error::Domain(format!("prompt variant {v} outside 0..20")));
                    }
                }
                Ok(())
            }
        }
    }
}

fn component_at_point(mask: &Mask, point: Point, what: &str) -> Result<Mask> {
    let (row, col) = point.to_pixel(mask.height(), mask.width())?;
    mask.component_at(row, col).ok_or_else(|| {
        Error::InvalidPoint(format!("pixel ({row}, {col}) is not on the {what} mask"))
    })
}

/// Ground-truth mask of `spec` on a scene.
pub fn compute_task_mask(masks: &SceneMasks, spec: &TaskSpec) -> Result<Mask> {
    spec.validate()?;
    let (units, nuclei) = (&masks.unit_mask, &masks.nuclei_mask);
    let point = || spec.point.expect("validated above");
    match spec.task_id {
        1 => Ok(units.clone()),
        2 => Ok(nuclei.clone()),
        3 => units.union(nuclei),
        4 => units.intersection(nuclei),
        5 => nuclei.difference(units),
        6 => component_at_point(nuclei, point(), "nuclei"),
        7 => component_at_point(units, point(), "unit"),
        8 => nuclei.intersection(&component_at_point(units, point(), "unit")?),
        9 => nuclei.difference(&component_at_point(units, point(), "unit")?),
        _ => unreachable!("task id checked by validate"),
    }
}

/// Uniform instance, then uniform pixel within it, as a normalised pixel centre.
pub fn sample_point<R: Rng + ?Sized>(masks: &SceneMasks, task_id: u8, rng: &mut R) -> Result<Point> {
    check_task(task_id)?;
    let source = match task_id {
        6 => &masks.nuclei_mask,
        7..=9 => &masks.unit_mask,
        _ => return Err(Error::Domain(format!("task {task_id} takes no point"))),
    };
    let members = source.components().members();
    if members.is_empty() {
        return Err(Error::NoValidPoint { task_id });
    }
    let inst = &members[rng.random_range(0..members.len())];
    let i = inst[rng.random_range(0..inst.len())];
    let w = source.width();
    Ok(Point::pixel_center(i / w, i % w, source.height(), w))
}

/// Builds a spec for `task_id`, drawing a point when the task needs one.
pub fn sample_task<R: Rng + ?Sized>(masks: &SceneMasks, task_id: u8, rng: &mut R) -> Result<TaskSpec> {
    let point = if requires_point(task_id) { Some(sample_point(masks, task_id, rng)?) } else { None };
    TaskSpec::new(task_id, masks.unit_class, point)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Complete,
    Incomplete,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Complete, Regime::Incomplete];

    pub fn code(self) -> &'static str {
        match self {
            Regime::Complete => "complete",
            Regime::Incomplete => "incomplete",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Regime::Complete),
            "incomplete" => Ok(Regime::Incomplete),
            _ => Err(Error::Domain(format!("unknown regime `{s}`"))),
        }
    }
}

/// Classes whose composite tasks are withheld in the incomplete regime.
pub fn is_unseen(class: UnitClass) -> bool {
    matches!(class, UnitClass::Dt | UnitClass::Capsule)
}

/// Tasks trained for `class`; in the incomplete regime dt and capsule keep
/// tasks 1 and 2.
pub fn enumerate_training_tasks(unit_class: UnitClass, regime: Regime) -> Vec<u8> {
    enumerate_training_tasks_with(unit_class, regime, false)
}

/// Like [`enumerate_training_tasks`]; `task1_only` shrinks the retained set of
/// restricted classes to task 1 alone.
pub fn enumerate_training_tasks_with(unit_class: UnitClass, regime: Regime, task1_only: bool) -> Vec<u8> {
    match regime {
        Regime::Incomplete if is_unseen(unit_class) => {
            if task1_only {
                vec![1]
            } else {
                vec![1, 2]
            }
        }
        _ => TASK_IDS.to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn code(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplates {
    pub task_id: u8,
    /// `invented` or `published`.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub templates: Vec<String>,
}

/// Twenty templates per task; the first `train_split` are for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub format: String,
    pub version: u32,
    pub placeholder: String,
    pub train_split: usize,
    pub tasks: Vec<TaskTemplates>,
}

const DEFAULT_BANK: &str = include_str!("../assets/prompt_bank.json");

impl PromptBank {
    pub fn builtin() -> PromptBank {
        Self::from_json(DEFAULT_BANK).expect("bundled prompt bank is valid")
    }

    pub fn from_json(text: &str) -> Result<PromptBank> {
        let bank: PromptBank = serde_json::from_str(text).map_err(|e| Error::PromptBank(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn from_path(path: &Path) -> Result<PromptBank> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PromptBank(m));
        if self.placeholder.is_empty() {
            return bad("empty placeholder".into());
        }
        if self.train_split == 0 || self.train_split >= PROMPT_VARIANTS {
            return bad(format!("train split {} must lie in 1..20", self.train_split));
        }
        if self.tasks.len() != NUM_TASKS {
            return bad(format!("expected {NUM_TASKS} tasks, found {}", self.tasks.len()));
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if t.task_id as usize != k + 1 {
                return bad(format!("task entry {k} has id {}, expected {}", t.task_id, k + 1));
            }
            if t.templates.len() != PROMPT_VARIANTS {
                return bad(format!("task {} has {} templates", t.task_id, t.templates.len()));
            }
            if let Some(i) = t.templates.iter().position(|s| !s.contains(&self.placeholder)) {
                return bad(format!("task {} template {i} lacks {}", t.task_id, self.placeholder));
            }
        }
        Ok(())
    }

    pub fn templates(&self, task_id: u8) -> Result<&[String]> {
        check_task(task_id)?;
        Ok(&self.tasks[task_id as usize - 1].templates)
    }

    /// Task whose templates were published under `label`, if any.
    pub fn task_for_published_label(&self, label: u8) -> Option<u8> {
        self.tasks.iter().find(|t| t.published_label == Some(label)).map(|t| t.task_id)
    }

    pub fn variant_range(&self, phase: Phase) -> std::ops::Range<usize> {
        match phase {
            Phase::Train => 0..self.train_split,
            Phase::Test => self.train_split..PROMPT_VARIANTS,
        }
    }

    /// Template `variant` of `task_id` with the class name substituted.
    pub fn text(&self, task_id: u8, class: UnitClass, variant: usize) -> Result<String> {
        let t = self
            .templates(task_id)?
            .get(variant)
            .ok_or_else(|| Error::Domain(format!("prompt variant {variant} outside 0..20")))?;
        Ok(t.replace(&self.placeholder, class.display_name()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bank serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Picks a variant for `spec` in `phase` and returns `(variant, text)`.
pub fn render_prompt_indexed<R: Rng + ?Sized>(
    bank: &PromptBank,
    spec: &TaskSpec,
    phase: Phase,
    rng: &mut R,
) -> Result<(usize, String)> {
    let range = bank.variant_range(phase);
    let variant = match spec.prompt_variant {
        Some(v) if range.contains(&v) => v,
        Some(v) => return Err(Error::SplitViolation { variant: v, phase: phase.code() }),
        None => rng.random_range(range),
    };
    Ok((variant, bank.text(spec.task_id, spec.unit_class, variant)?))
}

pub fn render_prompt<R: Rng + ?Sized>(bank: &PromptBank, spec: &TaskSpec, phase: Phase, rng: &mut R) -> Result<String> {
    render_prompt_indexed(bank, spec, phase, rng).map(|(_, s)| s)
}
