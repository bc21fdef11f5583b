//! The `metrics.json` schema and the comparison report built from it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pulsestress_core::ingest::Task;
use pulsestress_core::nn::{ModelConfig, Variant};
use pulsestress_core::pipeline::PreprocessConfig;
use pulsestress_core::train::{FoldMetrics, FoldRecord, FoldSummary};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub validation_subjects: usize,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub cache_key: String,
}

/// Published leave-one-subject-out result for the same task and variant,
/// in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn reference(task: Task, variant: Variant) -> Option<Reference> {
    match (task, variant) {
        (Task::ThreeClass, Variant::Hcnn) => Some(Reference {
            accuracy: 75.21,
            macro_f1: 64.15,
        }),
        (Task::ThreeClass, Variant::Cnn) => Some(Reference {
            accuracy: 68.52,
            macro_f1: 57.67,
        }),
        (Task::TwoClass, _) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ConfigEcho,
    pub folds: Vec<FoldRecord>,
    pub pooled: FoldMetrics,
    pub per_fold: FoldSummary,
    pub reference: Option<Reference>,
}

pub fn load_metrics(path: &Path) -> Result<MetricsFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{}: not valid JSON", path.display()))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => bail!(
            "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        ),
        None => bail!("{}: missing schema_version", path.display()),
    }
    serde_json::from_value(value)
        .with_context(|| format!("{}: unexpected metrics layout", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub source: PathBuf,
    pub task: Task,
    pub variant: Variant,
    pub folds: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub fold_accuracy: (f64, f64),
    pub fold_macro_f1: (f64, f64),
    pub reference: Option<Reference>,
}

impl ReportRow {
    pub fn from_metrics(source: &Path, m: &MetricsFile) -> Self {
        Self {
            source: source.to_path_buf(),
            task: m.config.task,
            variant: m.config.variant,
            folds: m.folds.iter().filter(|f| f.metrics.is_some()).count(),
            accuracy: 100.0 * m.pooled.accuracy,
            macro_f1: 100.0 * m.pooled.macro_f1,
            fold_accuracy: (
                100.0 * m.per_fold.accuracy.mean,
                100.0 * m.per_fold.accuracy.std,
            ),
            fold_macro_f1: (
                100.0 * m.per_fold.macro_f1.mean,
                100.0 * m.per_fold.macro_f1.std,
            ),
            reference: m.reference,
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.task, self.variant)
    }
}

pub fn table_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "source,task,variant,folds,accuracy,macro_f1,fold_accuracy_mean,fold_accuracy_std,\
         fold_macro_f1_mean,fold_macro_f1_std,reference_accuracy,reference_macro_f1\n",
    );
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{},{}",
            r.source.display(),
            r.task,
            r.variant,
            r.folds,
            r.accuracy,
            r.macro_f1,
            r.fold_accuracy.0,
            r.fold_accuracy.1,
            r.fold_macro_f1.0,
            r.fold_macro_f1.1,
            opt(r.reference.map(|x| x.accuracy)),
            opt(r.reference.map(|x| x.macro_f1)),
        )
        .expect("write to string");
    }
    out
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grouped bar chart of pooled accuracy and macro F1, one group per run.
/// Published references, where known, are drawn as dashed markers.
pub fn bar_chart_svg(rows: &[ReportRow]) -> String {
    const LEFT: f64 = 60.0;
    const TOP: f64 = 50.0;
    const PLOT_H: f64 = 260.0;
    const GROUP_W: f64 = 150.0;
    const BAR_W: f64 = 44.0;
    const COLORS: [&str; 2] = ["#4477aa", "#ee6677"];

    let width = LEFT + GROUP_W * rows.len().max(1) as f64 + 30.0;
    let height = TOP + PLOT_H + 70.0;
    let y = |pct: f64| TOP + PLOT_H * (1.0 - pct.clamp(0.0, 100.0) / 100.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">Pooled LOSO performance</text>"#,
        width / 2.0
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(f64::from(tick));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{}" y1="{ty}" y2="{ty}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{tick}%</text>"##,
            width - 20.0,
            LEFT - 6.0,
            ty + 4.0
        );
    }
    for (g, row) in rows.iter().enumerate() {
        let x0 = LEFT + GROUP_W * g as f64 + (GROUP_W - 2.0 * BAR_W) / 2.0;
        let _ = writeln!(
            s,
            r#"<g class="group" data-label="{}">"#,
            escape(&row.label())
        );
        let refs = row.reference.map(|r| [r.accuracy, r.macro_f1]);
        for (b, value) in [row.accuracy, row.macro_f1].into_iter().enumerate() {
            let x = x0 + BAR_W * b as f64;
            let top = y(value);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{top}" width="{}" height="{}" fill="{}"/><text x="{}" y="{}" text-anchor="middle">{value:.1}</text>"#,
                BAR_W - 4.0,
                TOP + PLOT_H - top,
                COLORS[b],
                x + (BAR_W - 4.0) / 2.0,
                top - 4.0
            );
            if let Some(r) = refs {
                let ry = y(r[b]);
                let _ = writeln!(
                    s,
                    r#"<line class="reference" x1="{x}" x2="{}" y1="{ry}" y2="{ry}" stroke="black" stroke-dasharray="4 2"/>"#,
                    x + BAR_W - 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text></g>"#,
            x0 + BAR_W,
            TOP + PLOT_H + 18.0,
            escape(&row.label())
        );
    }
    let ly = TOP + PLOT_H + 45.0;
    for (i, name) in ["accuracy", "macro F1"].iter().enumerate() {
        let lx = LEFT + 110.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            ly - 10.0,
            COLORS[i],
            lx + 16.0,
            ly
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{0}" x2="{1}" y1="{2}" y2="{2}" stroke="black" stroke-dasharray="4 2"/><text x="{3}" y="{4}">published</text>"#,
        LEFT + 220.0,
        LEFT + 240.0,
        ly - 4.0,
        LEFT + 246.0,
        ly
    );
    s.push_str("</svg>\n");
    s
}
