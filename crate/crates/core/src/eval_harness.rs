//! Dice scoring, checkpoint-grid evaluation and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use promptseg_autograd::{Float, ParamStore, Tensor};

use crate::mask::Mask;
use crate::nn::Graph;
use crate::prompt_encoders::{PromptInput, Strategy, TextMode};
use crate::seg_model::SegModel;
use crate::synth_data::{derive_seed, Dataset, SceneMasks, Split, UnitClass};
use crate::task_engine::{requires_point, sample_point, Phase, PromptBank, Regime, TaskSpec, TASK_IDS};
use crate::trainer::{spec_key, Checkpoint, PromptSource};
use crate::{Error, Result};

/// Tasks averaged for the generalisation comparison (1, 2 and 6 are excluded).
pub const COMPOSITE_TASKS: [u8; 6] = [3, 4, 5, 7, 8, 9];
pub const SEEN: [UnitClass; 2] = [UnitClass::Pt, UnitClass::Tuft];
pub const UNSEEN: [UnitClass; 2] = [UnitClass::Dt, UnitClass::Capsule];
/// Column order of the report tables: unseen classes, then seen.
pub const COLUMN_ORDER: [UnitClass; 4] = [UnitClass::Dt, UnitClass::Capsule, UnitClass::Pt, UnitClass::Tuft];

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "dice of {}x{} and {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-pixel argmax of channel-last `[H*W, 2]` logits; ties go to background.
pub fn binarize<T: Float>(logits: &Tensor<T>, height: usize, width: usize) -> Result<Mask> {
    if logits.shape() != [height * width, 2] {
        return Err(Error::Shape(format!("logits {:?} for a {height}x{width} mask", logits.shape())));
    }
    Mask::from_vec(height, width, logits.data().chunks(2).map(|c| c[1] > c[0]).collect())
}

/// Inference-mode forward pass and binarisation.
pub fn predict(
    model: &SegModel,
    store: &ParamStore<f32>,
    pixels: &[f32],
    input: &PromptInput<f32>,
    point: Option<crate::task_engine::Point>,
) -> Result<Mask> {
    let mut g = Graph::inference(store);
    let out = model.forward(&mut g, pixels, input, point)?;
    let s = model.config.image_size;
    binarize(g.value(out.logits), s, s)
}

/// Evaluation spec for `(sample, task)`: the point depends only on the
/// sample, task and seed, so every strategy sees the same points. `None` when
/// the task needs a point and the scene offers none.
pub fn eval_point(masks: &SceneMasks, sample_id: &str, task: u8, seed: u64) -> Result<Option<TaskSpec>> {
    let point = if requires_point(task) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xE7A1_0000, spec_key(sample_id, task)));
        match sample_point(masks, task, &mut rng) {
            Ok(p) => Some(p),
            Err(Error::NoValidPoint { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    TaskSpec::new(task, masks.unit_class, point).map(Some)
}

/// Which prompt variants a free-text checkpoint is tested with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Held-out variants 15–19.
    Different,
    /// Training variants 0–14.
    Same,
}

impl PromptMode {
    pub fn phase(self) -> Phase {
        match self {
            PromptMode::Different => Phase::Test,
            PromptMode::Same => Phase::Train,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            PromptMode::Different => "different",
            PromptMode::Same => "same",
        }
    }
}

/// Identifies one trained model in the experiment grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub strategy: Strategy,
    pub regime: Regime,
    /// Only for free text.
    pub text_mode: Option<TextMode>,
    /// Only for free text.
    pub prompt_mode: Option<PromptMode>,
}

impl RunKey {
    pub fn label(&self) -> String {
        let mut s = self.strategy.code().to_string();
        if let Some(t) = self.text_mode {
            s.push_str(&format!(" ({})", t.code()));
        }
        if let Some(p) = self.prompt_mode {
            s.push_str(&format!(" [{}]", p.code()));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub key: RunKey,
    pub unit_class: UnitClass,
    pub task_id: u8,
    pub dice: f64,
    pub count: usize,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub checkpoint: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cells: Vec<ReportCell>,
    pub failed: Vec<FailedCell>,
    pub eval_seed: u64,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub key: RunKey,
    pub unit_class: UnitClass,
    pub dice: f64,
    pub tasks: usize,
}

impl DiceReport {
    /// Mean over the composite tasks present for each (run, class).
    pub fn composites(&self) -> Vec<Composite> {
        let mut acc: BTreeMap<(RunKey, UnitClass), (f64, usize)> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| COMPOSITE_TASKS.contains(&c.task_id)) {
            let e = acc.entry((c.key.clone(), c.unit_class)).or_default();
            e.0 += c.dice;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|((key, unit_class), (s, n))| Composite { key, unit_class, dice: s / n as f64, tasks: n })
            .collect()
    }

    pub fn composite(&self, key: &RunKey, class: UnitClass) -> Option<f64> {
        self.composites().into_iter().find(|c| &c.key == key && c.unit_class == class).map(|c| c.dice)
    }

    pub fn regimes(&self) -> Vec<Regime> {
        let mut r: Vec<Regime> = self.cells.iter().map(|c| c.key.regime).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn run_keys(&self) -> Vec<RunKey> {
        let mut k: Vec<RunKey> = self.cells.iter().map(|c| c.key.clone()).collect();
        k.sort();
        k.dedup();
        k
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub eval_seed: u64,
    pub split: Split,
    /// Also score free-text checkpoints with training-split prompts.
    pub include_same_prompts: bool,
    pub force: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { eval_seed: 2024, split: Split::Test, include_same_prompts: true, force: false }
    }
}

fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    label: &str,
    dataset: &Dataset,
    bank: &PromptBank,
    opts: &ExperimentOptions,
) -> Result<Vec<ReportCell>> {
    let (model, store) = ckpt.restore()?;
    let h = &ckpt.header;
    ckpt.check_compatible(h.strategy, h.text_mode, &model.config, opts.force)?;
    let modes: Vec<Option<PromptMode>> = match h.strategy {
        Strategy::FreeText if opts.include_same_prompts => vec![Some(PromptMode::Different), Some(PromptMode::Same)],
        Strategy::FreeText => vec![Some(PromptMode::Different)],
        _ => vec![None],
    };
    let mut prompts = PromptSource::new(bank);
    let mut cells = Vec::new();
    for mode in modes {
        let key = RunKey {
            strategy: h.strategy,
            regime: h.train.regime,
            text_mode: (h.strategy == Strategy::FreeText).then_some(h.text_mode),
            prompt_mode: mode,
        };
        let phase = mode.map_or(Phase::Test, PromptMode::phase);
        for class in UnitClass::ALL {
            let samples = dataset.of(opts.split, class);
            for task in TASK_IDS {
                let (mut sum, mut count) = (0.0, 0usize);
                for s in &samples {
                    let Some(spec) = eval_point(&s.masks, &s.patch.sample_id, task, opts.eval_seed)? else {
                        continue;
                    };
                    let target = crate::task_engine::compute_task_mask(&s.masks, &spec)?;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(opts.eval_seed, spec_key(&s.patch.sample_id, task)));
                    let (input, _) = prompts.input(&model, &store, &spec, phase, &mut rng)?;
                    let pred = predict(&model, &store, &s.patch.pixels, &input, spec.point)?;
                    sum += dice(&pred, &target)?;
                    count += 1;
                }
                if count > 0 {
                    cells.push(ReportCell {
                        key: key.clone(),
                        unit_class: class,
                        task_id: task,
                        dice: sum / count as f64,
                        count,
                        checkpoint: label.to_string(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Evaluates every checkpoint on the chosen split. Checkpoints that fail to
/// load or run are recorded as failed cells rather than aborting the run.
pub fn run_experiment(
    checkpoints: &[PathBuf],
    dataset: &Dataset,
    bank: &PromptBank,
    opts: &ExperimentOptions,
) -> Result<DiceReport> {
    if checkpoints.is_empty() {
        return Err(Error::MissingInput("no checkpoints to evaluate".into()));
    }
    let mut report = DiceReport { eval_seed: opts.eval_seed, ..Default::default() };
    for path in checkpoints {
        let label = path.display().to_string();
        let result = Checkpoint::load(path).and_then(|c| evaluate_checkpoint(&c, &label, dataset, bank, opts));
        match result {
            Ok(cells) => report.cells.extend(cells),
            Err(e) => report.failed.push(FailedCell { checkpoint: label, error: e.to_string() }),
        }
    }
    report.notes.push(
        "composite = mean Dice over tasks 3,4,5,7,8,9; columns dt, capsule (unseen in the incomplete regime), pt, tuft (seen)"
            .into(),
    );
    report.notes.push(
        "ablation columns use the same class order as the performance table; the published ablation grid labels no columns"
            .into(),
    );
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"))
}

/// Aligned-text performance table (strategies as rows) for one regime.
pub fn performance_table(report: &DiceReport, regime: Regime) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Performance ({} training set), composite Dice over tasks 3,4,5,7,8,9", regime.code());
    let _ = writeln!(s, "{:<28} | {:^17} | {:^17}", "", "unseen", "seen");
    let _ = writeln!(s, "{:<28} | {:>8} {:>8} | {:>8} {:>8}", "strategy", "dt", "capsule", "pt", "tuft");
    let _ = writeln!(s, "{}", "-".repeat(68));
    for key in report.run_keys().into_iter().filter(|k| k.regime == regime) {
        if key.prompt_mode == Some(PromptMode::Same) {
            continue;
        }
        let v: Vec<String> = COLUMN_ORDER.iter().map(|&c| fmt_opt(report.composite(&key, c))).collect();
        let _ = writeln!(s, "{:<28} | {:>8} {:>8} | {:>8} {:>8}", key.label(), v[0], v[1], v[2], v[3]);
    }
    s
}

/// Free-text ablation grid: prompt overlap (same/different) x text encoder
/// (frozen/lora), for one regime.
pub fn ablation_table(report: &DiceReport, regime: Regime) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Ablation ({} training set), free-text composite Dice", regime.code());
    let _ = writeln!(s, "{:<10} {:<8} | {:>8} {:>8} | {:>8} {:>8}", "prompts", "encoder", "dt", "capsule", "pt", "tuft");
    let _ = writeln!(s, "{}", "-".repeat(58));
    for mode in [PromptMode::Different, PromptMode::Same] {
        for tm in [TextMode::Frozen, TextMode::Lora] {
            let key = RunKey { strategy: Strategy::FreeText, regime, text_mode: Some(tm), prompt_mode: Some(mode) };
            let v: Vec<String> = COLUMN_ORDER.iter().map(|&c| fmt_opt(report.composite(&key, c))).collect();
            let _ = writeln!(s, "{:<10} {:<8} | {:>8} {:>8} | {:>8} {:>8}", mode.code(), tm.code(), v[0], v[1], v[2], v[3]);
        }
    }
    s
}

pub const CSV_HEADER: &str = "strategy,regime,text_mode,prompt_mode,unit_class,task_id,dice,count,checkpoint";

pub fn report_csv(report: &DiceReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{},{}",
            c.key.strategy,
            c.key.regime,
            c.key.text_mode.map_or("", TextMode::code),
            c.key.prompt_mode.map_or("", PromptMode::code),
            c.unit_class,
            c.task_id,
            c.dice,
            c.count,
            c.checkpoint.replace(',', "_"),
        );
    }
    s
}

pub fn report_text(report: &DiceReport) -> String {
    let mut s = String::new();
    for regime in report.regimes() {
        s.push_str(&performance_table(report, regime));
        s.push('\n');
        s.push_str(&ablation_table(report, regime));
        s.push('\n');
    }
    for f in &report.failed {
        let _ = writeln!(s, "FAILED {}: {}", f.checkpoint, f.error);
    }
    for n in &report.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

const PALETTE: [[u8; 3]; 6] =
    [[66, 103, 172], [221, 132, 82], [85, 168, 104], [196, 78, 82], [129, 114, 179], [147, 120, 96]];

/// Grouped bar chart: one group per class (table column order), one bar per
/// run, bar height = composite Dice on a 0–1 axis with quarter gridlines.
pub fn bar_chart(report: &DiceReport, regime: Regime) -> image::RgbImage {
    let keys: Vec<RunKey> = report
        .run_keys()
        .into_iter()
        .filter(|k| k.regime == regime && k.prompt_mode != Some(PromptMode::Same))
        .collect();
    let (w, h, margin) = (480u32, 240u32, 20u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let plot_h = h - 2 * margin;
    for q in 0..=4u32 {
        let y = h - margin - q * plot_h / 4;
        for x in margin..w - margin {
            img.put_pixel(x, y, image::Rgb(if q == 0 { [0, 0, 0] } else { [220, 220, 220] }));
        }
    }
    let group_w = (w - 2 * margin) / COLUMN_ORDER.len() as u32;
    let bar_w = (group_w - 8) / keys.len().max(1) as u32;
    for (gi, &class) in COLUMN_ORDER.iter().enumerate() {
        for (ki, key) in keys.iter().enumerate() {
            let Some(d) = report.composite(key, class) else { continue };
            let bh = (d.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
            let x0 = margin + gi as u32 * group_w + 4 + ki as u32 * bar_w;
            for x in x0..x0 + bar_w.saturating_sub(1) {
                for y in (h - margin - bh)..(h - margin) {
                    img.put_pixel(x, y, image::Rgb(PALETTE[ki % PALETTE.len()]));
                }
            }
        }
    }
    img
}

/// Writes `report.csv`, `report.txt`, `report.json` and one chart per regime
/// under `charts/`. Returns the written paths.
pub fn emit_report(report: &DiceReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    let csv = out_dir.join("report.csv");
    fs::write(&csv, report_csv(report)).map_err(io(&csv))?;
    written.push(csv);
    let txt = out_dir.join("report.txt");
    fs::write(&txt, report_text(report)).map_err(io(&txt))?;
    written.push(txt);
    let json = out_dir.join("report.json");
    fs::write(&json, serde_json::to_vec_pretty(report)?).map_err(io(&json))?;
    written.push(json);
    let regimes = report.regimes();
    if !regimes.is_empty() {
        let charts = out_dir.join("charts");
        fs::create_dir_all(&charts).map_err(io(&charts))?;
        for regime in regimes {
            let p = charts.join(format!("{}.png", regime.code()));
            bar_chart(report, regime)
                .save_with_format(&p, image::ImageFormat::Png)
                .map_err(|e| Error::Image(format!("{}: {e}", p.display())))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_conventions() {
        let a = Mask::from_fn(2, 2, |r, _| r == 0);
        let b = Mask::from_fn(2, 2, |_, c| c == 0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let empty = Mask::new(2, 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert!(dice(&a, &Mask::new(3, 2)).is_err());
    }

    #[test]
    fn binarize_ties_to_background() {
        let zeros = Tensor::<f32>::zeros(&[4, 2]);
        assert!(binarize(&zeros, 2, 2).unwrap().is_empty());
        let fg = Tensor::new(&[4, 2], vec![0.0f32, 1.0, -1.0, 0.0, 0.0, 0.5, 2.0, 3.0]).unwrap();
        assert_eq!(binarize(&fg, 2, 2).unwrap().count(), 4);
    }

    #[test]
    fn empty_report_emits_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&DiceReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(!dir.path().join("charts").exists());
    }
}
