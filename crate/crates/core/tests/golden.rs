use std::collections::BTreeMap;
use std::path::PathBuf;

use brex_core::env::{Action, EnvConfig, Role, RoomCoord};
use brex_core::eval::{hallucination_rates, pearson, score_cells, AccuracyReport, HallucinationReport, LabeledItem};
use brex_core::llm::{build_prompt, icl_examples};
use brex_core::policy::Behavior;
use brex_core::repr::{parse_predicate, render_path, sample_states_br, BehaviorRepresentation, DecisionPath, PathStep};
use brex_core::rollout::rollout;

fn dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join(sub)
}

/// Compares against `tests/golden/<name>`; `BREX_BLESS=1` rewrites the file.
fn check_golden(name: &str, actual: &str) {
    let path = dir("golden").join(name);
    if std::env::var_os("BREX_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden {name} differs");
}

/// Path whose predicates are the worked Explore example's feature lines.
fn example_path() -> DecisionPath {
    let explore = &icl_examples()[0];
    let steps = explore
        .features_block
        .lines()
        .skip(1)
        .map(|l| {
            let (feature, branch) = parse_predicate(l).unwrap();
            PathStep { feature, branch }
        })
        .collect();
    DecisionPath {
        steps,
        leaf_action: Action::MoveEast,
        role: Role::Engineer,
    }
}

#[test]
fn path_block() {
    let path = example_path();
    assert_eq!(path.steps.len(), 32);
    let text = render_path(&path);
    assert_eq!(text, icl_examples()[0].features_block);
    check_golden("path_block.txt", &text);
}

#[test]
fn states_block() {
    let p = Behavior::Exploit.policy();
    let traj = rollout(p, p, &EnvConfig::default().with_seed(7)).unwrap();
    let br = sample_states_br(&traj, Role::Medic, 3, 11).unwrap();
    check_golden("states_block.txt", &br.render().unwrap().unwrap());
}

#[test]
fn path_prompt() {
    let br = BehaviorRepresentation::Path { path: example_path() };
    let bundle = build_prompt(&br, Role::Engineer, RoomCoord::new(0, 2).unwrap(), Action::MoveEast).unwrap();
    assert!(bundle.query_block.starts_with("Features:"));
    assert!(bundle.query_block.ends_with("Explanation:"));
    check_golden("prompt_path.txt", &bundle.full_text());
}

fn fixture_items() -> Vec<LabeledItem> {
    std::fs::read_to_string(dir("fixtures").join("labels.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[derive(serde::Deserialize)]
struct Expected {
    cells: BTreeMap<String, (u32, u32)>,
    hallucination: BTreeMap<String, (u32, u32, u32, u32)>,
}

#[test]
fn label_fixture_matches_independent_counts() {
    let items = fixture_items();
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(dir("fixtures").join("labels_expected.json")).unwrap()).unwrap();
    let cells = score_cells(&items);
    assert_eq!(cells.len(), expected.cells.len());
    for c in &cells {
        let key = serde_json::to_string(&(c.key.behavior, c.key.br_kind, c.key.state_category, c.metric))
            .unwrap()
            .replace(',', ", ");
        assert_eq!(expected.cells[&key], (c.numerator, c.denominator), "{key}");
        assert_eq!(c.denominator, 20);
    }
    for h in hallucination_rates(&items) {
        let (en, ed, pn, pd) = expected.hallucination[&format!("{}/{}", h.behavior, h.br_kind)];
        let e = h.explanation.unwrap();
        let p = h.prediction.unwrap();
        assert_eq!((e.numerator, e.denominator, p.numerator, p.denominator), (en, ed, pn, pd));
    }
}

#[test]
fn report_tables() {
    let items = fixture_items();
    check_golden("accuracy_report.txt", &AccuracyReport::from_items(&items).text());
    check_golden("hallucination_table.txt", &HallucinationReport::from_items(&items).table);
}

#[test]
fn pearson_reference_values() {
    // reference values from scipy.stats.pearsonr
    let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
    // direct formula: sum dxdy = 8, sum dx^2 = sum dy^2 = 10
    assert!((r.r - 0.8).abs() < 1e-12);
    assert!((r.p - 0.10408803866182799).abs() < 1e-9);
    let r = pearson(&[0.1, 0.4, 0.35, 0.8, 0.2, 0.55], &[0.9, 0.5, 0.6, 0.3, 0.7, 0.65]).unwrap();
    assert!((r.r + 0.8818799929935018).abs() < 1e-12);
    assert!((r.p - 0.02010447906652328).abs() < 1e-9);
}
