//! Shared helpers for integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use homeagent_core::agent::{Agent, AssetPaths, Assets};
use homeagent_core::domain::{Comparator, DeviceCommand, ParamValue, Scalar, TriggerActionRule, TriggerPredicate};
use homeagent_core::eval::{load_dataset, DatasetTask};
use homeagent_core::home::{Cause, ExecutionRecord, HomeState};
use homeagent_core::llm::{
    ChatProvider, ChatRequest, ChatResponse, Gateway, HashEmbedder, LlmError, Playbook, ScriptedProvider, StageTag,
};
use homeagent_core::pipeline::PipelineConfig;
use serde_json::{json, Value};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn assets() -> Assets {
    Assets::load(&AssetPaths::under(fixtures())).expect("fixture assets load")
}

pub fn playbook() -> Playbook {
    Playbook::load(fixtures().join("playbook.json")).expect("fixture playbook loads")
}

pub fn dataset() -> Vec<DatasetTask> {
    load_dataset(fixtures().join("dataset/tasks.jsonl")).expect("fixture dataset loads")
}

pub fn s(v: &str) -> Scalar {
    Scalar::String(v.to_string())
}

pub fn cmd(device: &str, capability: &str, command: &str, args: Vec<Scalar>) -> DeviceCommand {
    let args = args.into_iter().map(|a| ParamValue::concrete(a).unwrap()).collect();
    DeviceCommand::new(format!("{device} {command}"), device, capability, command, args).unwrap()
}

pub fn pred(
    device: &str,
    capability: &str,
    attribute: &str,
    comparator: Comparator,
    value: Scalar,
) -> TriggerPredicate {
    TriggerPredicate {
        description: format!("{device} {attribute}"),
        device_name: device.to_string(),
        capability_name: capability.to_string(),
        attribute_name: attribute.to_string(),
        comparator,
        value,
    }
}

pub fn home() -> HomeState {
    assets().home
}

pub fn fridge_rule() -> TriggerActionRule {
    TriggerActionRule {
        rule_id: "fridge-open".into(),
        triggers: vec![pred("fridge", "contactSensor", "contact", Comparator::Eq, s("open"))],
        actions: vec![cmd("dining light", "switch", "on", vec![])],
    }
}

pub fn fired(records: &[ExecutionRecord], rule: &str) -> usize {
    records
        .iter()
        .filter(|r| r.cause == Cause::RuleFired { rule_id: rule.into() })
        .count()
}

/// Three rules that keep toggling the hallway light forever once motion is seen.
pub fn oscillating_home(cap: usize) -> HomeState {
    let mut h = home().with_cascade_cap(cap);
    let light_is = |v: &str| pred("hallway light", "switch", "switch", Comparator::Eq, s(v));
    h.install_rule(TriggerActionRule {
        rule_id: "a-motion".into(),
        triggers: vec![pred(
            "motion sensor",
            "motionSensor",
            "motion",
            Comparator::Eq,
            s("active"),
        )],
        actions: vec![cmd("hallway light", "switch", "on", vec![])],
    })
    .unwrap();
    h.install_rule(TriggerActionRule {
        rule_id: "b-when-on".into(),
        triggers: vec![light_is("on")],
        actions: vec![cmd("hallway light", "switch", "off", vec![])],
    })
    .unwrap();
    h.install_rule(TriggerActionRule {
        rule_id: "c-when-off".into(),
        triggers: vec![light_is("off")],
        actions: vec![cmd("hallway light", "switch", "on", vec![])],
    })
    .unwrap();
    h
}

/// Passes requests to a scripted provider and keeps (stage, key, response).
pub struct Recording {
    pub inner: ScriptedProvider,
    pub seen: Mutex<Vec<(StageTag, String, String)>>,
}

impl ChatProvider for Recording {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let resp = self.inner.chat(req)?;
        self.seen
            .lock()
            .unwrap()
            .push((req.stage, req.key(), resp.text.clone()));
        Ok(resp)
    }
}

pub fn recording_agent() -> (Agent, Arc<Recording>) {
    let assets = assets();
    let rec = Arc::new(Recording {
        inner: ScriptedProvider::new(playbook()),
        seen: Mutex::new(Vec::new()),
    });
    let gw = Arc::new(Gateway::new(
        rec.clone(),
        Arc::new(HashEmbedder),
        assets.pricing.clone(),
    ));
    let pipeline = assets.pipeline(PipelineConfig::default(), gw).unwrap();
    (Agent::new(pipeline, &assets), rec)
}

/// Reference Decompose output for the sleep instruction.
pub fn expected_decompose() -> Value {
    json!({"CommandType": "Direct Control Command",
     "Action": {
      "name": "Make the bedroom ready for sleep",
      "possible subtask list":
       [{"subtask": "Adjust air conditioner temperature",
         "device": "air conditioner"},
        {"subtask": "Set humidifier level",
         "device": "humidifier"},
        {"subtask": "Dim the sleep light",
         "device": "sleep light"}]}})
}

/// Reference Derive output for its air-conditioner subtask.
pub fn expected_derive() -> Value {
    json!({"subtask": "Adjust air conditioner temperature",
     "commands":
     [{"desc": "Turn on air conditioner",
       "device": {"name": "air conditioner",
         "capability": {"name": "switch",
         "command": "on", "value":{}}}},
      {"desc": "Set mode to [mode_value]",
       "device": {"name": "air conditioner",
         "capability": {"name": "airConditionerMode",
         "command": "setAirConditionerMode",
         "value":{"string": "[mode_value]"}}}},
      {"desc": "Set temperature to [temperature_value]",
       "device": {"name": "air conditioner",
         "capability":
         {"name": "thermostatCoolingSetpoint",
          "command": "setCoolingSetpoint",
          "value":{"decimal": "[temperature_value]"}}}}]})
}
