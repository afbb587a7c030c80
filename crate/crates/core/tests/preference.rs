//! Baseline preference extraction checked against a tally written directly
//! over the raw log lines, with the binning rules restated by hand.

mod common;

use common::oracle::{preference_oracle, tables_as_oracle};

use homeagent_core::domain::{InstructionType, ProposalStatus, Provenance, Scalar, Subtask, TaskProposal};
use homeagent_core::preference::{
    extract_baseline, parse_llm_tables, property_targets, select_table, Direction, EnvProperty, Level, PreferenceError,
    PreferenceStore, PropertyTarget,
};

#[test]
fn baseline_matches_tally_oracle_on_100_entry_log() {
    let raw = std::fs::read_to_string(common::fixtures().join("logs/interactions.jsonl")).unwrap();
    assert_eq!(raw.lines().filter(|l| !l.trim().is_empty()).count(), 100);
    let assets = common::assets();
    let tables = extract_baseline(assets.prefs.logs(), &assets.effects, &assets.bins, &assets.corpus).unwrap();
    assert_eq!(tables_as_oracle(&tables), preference_oracle(&raw));

    // Spot checks that pin down what the fixture is meant to express.
    let sleeping = &tables["sleeping"];
    assert_eq!(sleeping.level(EnvProperty::Temperature), Some(Level::Low));
    assert_eq!(sleeping.level(EnvProperty::Brightness), Some(Level::Low));
    assert_eq!(sleeping.level(EnvProperty::Security), Some(Level::High));
    assert_eq!(tables["studying"].level(EnvProperty::Brightness), Some(Level::High));
    assert_eq!(tables["cooking"].level(EnvProperty::Security), Some(Level::Low));
}

#[test]
fn fan_inherits_the_low_temperature_target_of_sleeping() {
    let assets = common::assets();
    let tables = extract_baseline(assets.prefs.logs(), &assets.effects, &assets.bins, &assets.corpus).unwrap();
    let fan = common::cmd("fan", "fanSpeed", "setFanSpeed", vec![Scalar::Integer(1)]);
    let targets = property_targets(&[fan], &assets.effects, select_table(&tables, "Sleeping").unwrap());
    assert!(targets.contains(&PropertyTarget {
        property: EnvProperty::Temperature,
        level: Level::Low,
        direction: Direction::Decreases,
    }));
}

#[test]
fn unknown_context_falls_back_to_normal() {
    let assets = common::assets();
    let tables = extract_baseline(assets.prefs.logs(), &assets.effects, &assets.bins, &assets.corpus).unwrap();
    assert_eq!(select_table(&tables, "gardening").unwrap().context_keyword, "normal");
    assert!(matches!(
        extract_baseline(&[], &assets.effects, &assets.bins, &assets.corpus),
        Err(PreferenceError::EmptyLogs)
    ));
}

#[test]
fn model_tables_keep_only_evidenced_properties() {
    let assets = common::assets();
    let v = serde_json::json!({"tables": {
        "sleeping": {"temperature": "low", "noise": {"level": "high", "support": 2}, "air_quality": "high"},
        "normal": {"brightness": {"level": "medium", "support": 7}},
    }});
    let tables = parse_llm_tables(&v, assets.prefs.logs(), &assets.effects).unwrap();
    let sleeping = &tables["sleeping"];
    assert_eq!(sleeping.level(EnvProperty::Temperature), Some(Level::Low));
    // tv off is logged under sleeping, so noise has evidence; air quality does not.
    assert_eq!(sleeping.level(EnvProperty::Noise), Some(Level::High));
    assert_eq!(sleeping.level(EnvProperty::AirQuality), None);
    assert_eq!(tables["normal"].support[&EnvProperty::Brightness], 7);

    let no_normal = serde_json::json!({"sleeping": {"temperature": "low"}});
    assert!(matches!(
        parse_llm_tables(&no_normal, assets.prefs.logs(), &assets.effects),
        Err(PreferenceError::MissingNormalTable)
    ));
    let bad_level = serde_json::json!({"normal": {"temperature": "freezing"}});
    assert!(parse_llm_tables(&bad_level, assets.prefs.logs(), &assets.effects).is_err());
}

#[test]
fn approved_commands_feed_back_into_the_tables() {
    let assets = common::assets();
    let mut store = PreferenceStore::default();
    assert!(store.tables(&assets.effects, &assets.bins, &assets.corpus)["normal"]
        .levels
        .is_empty());

    let mut p = TaskProposal::new("p", "Get ready for reading", InstructionType::DirectControl);
    p.context_keyword = "Reading".into();
    let mut st = Subtask::new("Brighten the lamp", "living room light", Provenance::FreshlyDecomposed);
    st.commands = vec![common::cmd(
        "living room light",
        "switchLevel",
        "setLevel",
        vec![Scalar::Integer(90)],
    )];
    p.subtasks.push(st);
    p.transition(ProposalStatus::AwaitingReview).unwrap();
    p.transition(ProposalStatus::Approved).unwrap();
    let added = store.append_feedback_logs(&p);
    assert_eq!(added.len(), 1);
    assert_eq!(added[0].context_keyword, "reading");

    let tables = store.tables(&assets.effects, &assets.bins, &assets.corpus);
    assert_eq!(tables["reading"].level(EnvProperty::Brightness), Some(Level::High));
    // Export is line-delimited and re-readable.
    let text = store.export_jsonl();
    let again = homeagent_core::preference::parse_log_jsonl(&text).unwrap();
    assert_eq!(again, store.logs());
}
