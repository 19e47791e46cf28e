//! Annotation labels and the accuracy/hallucination tables computed from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StateCategory;
use crate::policy::Behavior;
use crate::repr::BrKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Strategy,
    Category,
    Goal,
    Action,
    Intent,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Strategy, Metric::Category, Metric::Goal, Metric::Action, Metric::Intent];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Strategy => "Strategy",
            Metric::Category => "Category",
            Metric::Goal => "Goal",
            Metric::Action => "Action",
            Metric::Intent => "Intent",
        }
    }
}

/// Human judgements for one explanation record. Unset fields are left out of
/// every denominator.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationLabels {
    #[serde(default)]
    pub record_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub strategy: Option<bool>,
    #[serde(default)]
    pub category: Option<bool>,
    #[serde(default)]
    pub goal: Option<bool>,
    #[serde(default)]
    pub action: Option<bool>,
    #[serde(default)]
    pub intent: Option<bool>,
    #[serde(default)]
    pub hallucination_in_explanation: Option<bool>,
    #[serde(default)]
    pub hallucination_in_prediction: Option<bool>,
}

impl AnnotationLabels {
    pub fn metric(&self, m: Metric) -> Option<bool> {
        match m {
            Metric::Strategy => self.strategy,
            Metric::Category => self.category,
            Metric::Goal => self.goal,
            Metric::Action => self.action,
            Metric::Intent => self.intent,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.record_id.trim().is_empty() {
            return Err("record_id is empty".into());
        }
        if self.annotator_id.trim().is_empty() {
            return Err("annotator_id is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub behavior: Behavior,
    pub br_kind: BrKind,
    /// `None` for Fixed, whose states are not split by category.
    pub state_category: Option<StateCategory>,
}

/// Labels joined with the record attributes that place them in a cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    #[serde(flatten)]
    pub key: CellKey,
    #[serde(flatten)]
    pub labels: AnnotationLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: u32,
    pub denominator: u32,
}

impl Rate {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub metric: Metric,
    pub numerator: u32,
    pub denominator: u32,
}

impl EvalCell {
    pub fn accuracy(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// Accuracy per (behavior, representation, category, metric). Cells without
/// any set label are absent.
pub fn score_cells(items: &[LabeledItem]) -> Vec<EvalCell> {
    let mut acc: BTreeMap<(CellKey, Metric), Rate> = BTreeMap::new();
    for item in items {
        for m in Metric::ALL {
            if let Some(hit) = item.labels.metric(m) {
                let r = acc.entry((item.key, m)).or_insert(Rate {
                    numerator: 0,
                    denominator: 0,
                });
                r.denominator += 1;
                r.numerator += hit as u32;
            }
        }
    }
    acc.into_iter()
        .map(|((key, metric), r)| EvalCell {
            key,
            metric,
            numerator: r.numerator,
            denominator: r.denominator,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationRate {
    pub behavior: Behavior,
    pub br_kind: BrKind,
    pub explanation: Option<Rate>,
    pub prediction: Option<Rate>,
}

/// Share of labelled explanations and predictions flagged as hallucinated,
/// per (behavior, representation).
pub fn hallucination_rates(items: &[LabeledItem]) -> Vec<HallucinationRate> {
    let mut acc: BTreeMap<(Behavior, BrKind), [Option<Rate>; 2]> = BTreeMap::new();
    for it in items {
        let slot = acc.entry((it.key.behavior, it.key.br_kind)).or_default();
        for (r, flag) in slot
            .iter_mut()
            .zip([it.labels.hallucination_in_explanation, it.labels.hallucination_in_prediction])
        {
            if let Some(v) = flag {
                let r = r.get_or_insert(Rate {
                    numerator: 0,
                    denominator: 0,
                });
                r.denominator += 1;
                r.numerator += v as u32;
            }
        }
    }
    acc.into_iter()
        .filter(|(_, [e, p])| e.is_some() || p.is_some())
        .map(|((behavior, br_kind), [explanation, prediction])| HallucinationRate {
            behavior,
            br_kind,
            explanation,
            prediction,
        })
        .collect()
}

const TABLE_BEHAVIORS: [Behavior; 2] = [Behavior::Exploit, Behavior::Explore];

fn lookup(cells: &[EvalCell], key: CellKey, metric: Metric) -> String {
    cells
        .iter()
        .find(|c| c.key == key && c.metric == metric)
        .map(|c| format!("{:.2}", c.accuracy()))
        .unwrap_or_else(|| "-".into())
}

/// Left-aligned columns separated by two spaces, trailing spaces trimmed.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(i, s)| format!("{s:<w$}", w = widths[i])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn category_table(cells: &[EvalCell], metrics: &[Metric]) -> String {
    let mut head1 = vec![String::new(), String::new()];
    let mut head2 = vec!["Behavior".to_string(), "Method".to_string()];
    for cat in StateCategory::ALL {
        for (i, m) in metrics.iter().enumerate() {
            head1.push(if i == 0 { cat.label().to_string() } else { String::new() });
            head2.push(m.label().to_string());
        }
    }
    let mut rows = vec![head1, head2];
    for b in TABLE_BEHAVIORS {
        for k in BrKind::ALL {
            let mut row = vec![b.label().to_string(), k.label().to_string()];
            for cat in StateCategory::ALL {
                let key = CellKey {
                    behavior: b,
                    br_kind: k,
                    state_category: Some(cat),
                };
                row.extend(metrics.iter().map(|m| lookup(cells, key, *m)));
            }
            rows.push(row);
        }
    }
    align(&rows)
}

fn fixed_table(cells: &[EvalCell]) -> String {
    let metrics = [Metric::Strategy, Metric::Action, Metric::Intent];
    let mut rows = vec![["Behavior", "Method"]
        .into_iter()
        .map(String::from)
        .chain(metrics.iter().map(|m| m.label().to_string()))
        .collect::<Vec<_>>()];
    for k in BrKind::ALL {
        let key = CellKey {
            behavior: Behavior::Fixed,
            br_kind: k,
            state_category: None,
        };
        let mut row = vec![Behavior::Fixed.label().to_string(), k.label().to_string()];
        row.extend(metrics.iter().map(|m| lookup(cells, key, *m)));
        rows.push(row);
    }
    align(&rows)
}

fn hallucination_table(rates: &[HallucinationRate]) -> String {
    let mut rows = vec![["Behavior", "Method", "Explanation", "Prediction"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    let fmt = |r: Option<Rate>| r.map(|r| format!("{:.2}", r.value())).unwrap_or_else(|| "-".into());
    for b in Behavior::ALL {
        for k in BrKind::ALL {
            let found = rates.iter().find(|r| r.behavior == b && r.br_kind == k);
            rows.push(vec![
                b.label().to_string(),
                k.label().to_string(),
                fmt(found.and_then(|r| r.explanation)),
                fmt(found.and_then(|r| r.prediction)),
            ]);
        }
    }
    align(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub cells: Vec<EvalCell>,
    /// Strategy, Category and Goal per category for Exploit and Explore.
    pub explanation_table: String,
    /// Action and Intent per category for Exploit and Explore.
    pub prediction_table: String,
    /// Strategy, Action and Intent for Fixed.
    pub fixed_table: String,
}

impl AccuracyReport {
    pub fn from_items(items: &[LabeledItem]) -> Self {
        let cells = score_cells(items);
        Self {
            explanation_table: category_table(&cells, &[Metric::Strategy, Metric::Category, Metric::Goal]),
            prediction_table: category_table(&cells, &[Metric::Action, Metric::Intent]),
            fixed_table: fixed_table(&cells),
            cells,
        }
    }

    pub fn text(&self) -> String {
        format!(
            "Explanation accuracy\n{}\nAction prediction accuracy\n{}\nFixed behavior\n{}",
            self.explanation_table, self.prediction_table, self.fixed_table
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub rates: Vec<HallucinationRate>,
    pub table: String,
}

impl HallucinationReport {
    pub fn from_items(items: &[LabeledItem]) -> Self {
        let rates = hallucination_rates(items);
        Self {
            table: hallucination_table(&rates),
            rates,
        }
    }
}
