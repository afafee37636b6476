use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::{json, Value};

use super::*;
use crate::assets;

const MINIMAL: &str = "version: activity/v1\nid: clean\ninputs:\n  - {name: raw, type: file}\noutputs:\n  - {name: out, type: file}\nbinding:\n  local_step: {handler: preprocess}\n";

#[test]
fn minimal_activity() {
    let doc = ActivityDocument::parse(MINIMAL).unwrap();
    assert_eq!(doc.id, "clean");
    assert_eq!(doc.binding, ExecutorBinding::LocalStep(LocalStep { handler: "preprocess".into() }));
    assert_eq!(ActivityDocument::parse(&doc.to_canonical()).unwrap(), doc);
}

#[test]
fn conditional_construct_rejected() {
    let text = MINIMAL.replace("binding:", "when: $(inputs.raw) != null\nbinding:");
    let err = ActivityDocument::parse(&text).unwrap_err();
    assert_eq!(err.field(), Some("when"));
    assert_eq!(err.line(), Some(7));
    let nested = MINIMAL.replace("{handler: preprocess}", "{handler: preprocess, when: x}");
    assert_eq!(ActivityDocument::parse(&nested).unwrap_err().field(), Some("binding.local_step.when"));
}

#[test]
fn syntax_and_semantic_errors() {
    assert!(matches!(ActivityDocument::parse("id: [\n"), Err(DocumentError::Syntax { line: Some(_), .. })));
    let dup = MINIMAL.replace("outputs:", "  - {name: raw, type: string}\noutputs:");
    assert_eq!(ActivityDocument::parse(&dup).unwrap_err().field(), Some("inputs[1].name"));
    let slot = assets::WEATHER_MODEL.replace("$(inputs.region)", "$(inputs.area)");
    assert_eq!(ActivityDocument::parse(&slot).unwrap_err().field(), Some("binding.federated_job.arguments.region"));
    let bad_type = MINIMAL.replace("type: file}\noutputs", "type: blob}\noutputs");
    assert!(matches!(ActivityDocument::parse(&bad_type), Err(DocumentError::Schema { .. })));
}

#[test]
fn weather_model_canonical_golden() {
    let doc = ActivityDocument::parse(assets::WEATHER_MODEL).unwrap();
    let golden = include_str!("../../assets/golden/weather_model.canonical.yaml");
    assert_eq!(doc.to_canonical(), golden);
    assert_eq!(ActivityDocument::parse(golden).unwrap().to_canonical(), golden);
}

#[test]
fn slot_substitution() {
    let values: BTreeMap<String, String> = [("a".to_string(), "1".to_string())].into();
    assert_eq!(substitute("x=$(inputs.a);", &values).unwrap(), "x=1;");
    assert!(substitute("$(inputs.b)", &values).is_err());
    assert_eq!(slots("$(inputs.a)-$(inputs.b)").unwrap(), ["a", "b"]);
}

fn ctx(event: Value, active: bool) -> Value {
    json!({"event": event, "ensemble": {"active": active, "count": usize::from(active)}, "state": {}})
}

#[test]
fn simple_conditions() {
    let c = Condition::parse("ensemble.active == true").unwrap();
    assert!(c.evaluate(&ctx(json!({}), true)).unwrap());
    let c = Condition::parse("event.needs_preprocessing == true").unwrap();
    assert_eq!(c.evaluate(&ctx(json!({}), false)), Err(EvalError::MissingField("event.needs_preprocessing".into())));
    let c = Condition::parse("exists(event.x) && !(event.n < 3) || event.s >= 'b'").unwrap();
    assert!(c.evaluate(&ctx(json!({"x": 1, "n": 3, "s": "a"}), false)).unwrap());
    assert!(c.evaluate(&ctx(json!({"n": 1, "s": "c"}), false)).unwrap());
}

#[test]
fn condition_type_errors() {
    for bad in ["1", "'a'", "event.x && 3", "1 == 'a'", "true < false", "foo.bar == 1", "event", "!'x'"] {
        assert!(matches!(Condition::parse(bad), Err(ExprError::Type(_))), "{bad}");
    }
    for bad in ["", "event.x ==", "(event.x", "event.x == 1 1", "event.", "exists(1)", "'open"] {
        assert!(matches!(Condition::parse(bad), Err(ExprError::Parse { .. })), "{bad}");
    }
}

/// Hand enumeration of `ensemble.active == false && event.region == "A"`.
#[test]
fn composite_condition_table() {
    let c = Condition::parse(r#"ensemble.active == false && event.region == "A""#).unwrap();
    let table: [(bool, Option<Value>, Result<bool, ()>); 8] = [
        (false, Some(json!("A")), Ok(true)),
        (false, Some(json!("B")), Ok(false)),
        (false, None, Err(())),
        (false, Some(json!(7)), Ok(false)),
        (true, Some(json!("A")), Ok(false)),
        (true, Some(json!("B")), Ok(false)),
        (true, None, Ok(false)),
        (true, Some(json!(7)), Ok(false)),
    ];
    for (active, region, want) in table {
        let event = match &region {
            Some(r) => json!({"region": r}),
            None => json!({}),
        };
        let got = c.evaluate(&ctx(event, active)).map_err(|_| ());
        assert_eq!(got, want, "active={active} region={region:?}");
    }
}

fn engine() -> RuleEngine {
    let mut e = RuleEngine::new();
    for text in assets::ACTIVITIES {
        e.register_activity(ActivityDocument::parse(text).unwrap()).unwrap();
    }
    e.register_rules(RuleDocument::parse(assets::WILDFIRE_RULES).unwrap()).unwrap();
    e
}

fn weather(id: &str, raw: bool) -> WorkflowEvent {
    WorkflowEvent::new(id, kinds::SENSOR_DATA_ARRIVED, "inc", 10)
        .with_field("content_kind", "weather_obs")
        .with_field("region", "A")
        .with_field("needs_preprocessing", raw)
        .with_field("data_ref", format!("data/{id}"))
        .with_field("direction", "E")
        .with_field("speed", 0.5)
}

fn view(active: bool) -> StateView {
    let mut v = StateView::default();
    if active {
        v.ensembles.insert(scope_key("inc", "A"), EnsembleView { active: true, count: 1 });
    }
    v
}

#[test]
fn data_with_active_ensemble_updates_it() {
    let out = engine().on_event("wildfire", &weather("e1", false), &view(true));
    assert_eq!(out.actions.len(), 1);
    let a = &out.actions[0];
    assert_eq!(a.provenance, ["e1"]);
    match &a.action {
        ResolvedAction::UpdateEnsemble { selector, payload } => {
            assert_eq!(selector.region.as_deref(), Some("A"));
            assert_eq!(payload["wind_direction"], json!("E"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn data_without_ensemble_starts_forecast_then_fire() {
    let e = engine();
    let out = e.on_event("wildfire", &weather("e1", false), &view(false));
    assert_eq!(out.actions.len(), 1);
    assert_eq!(out.actions[0].action.target(), Some("weather_model"));
    let done = WorkflowEvent::new("e2", kinds::ACTIVITY_COMPLETED, "inc", 400)
        .with_field("activity_id", "weather_model")
        .with_field("region", "A")
        .with_field("outputs", json!({"forecast": "data/run1/forecast"}))
        .caused_by(vec!["e1".into()]);
    let out = e.on_event("wildfire", &done, &view(false));
    assert_eq!(out.actions.len(), 1);
    assert_eq!(out.actions[0].provenance, ["e1", "e2"]);
    match &out.actions[0].action {
        ResolvedAction::SpawnEnsemble { template, inputs, sweep } => {
            assert_eq!(template, "wildfire");
            assert_eq!(inputs["wind_input"], json!("data/run1/forecast"));
            assert_eq!(sweep["spread_prob"].len(), 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unmatched_event_fires_nothing() {
    let ev = WorkflowEvent::new("e1", kinds::OPERATOR_COMMAND, "inc", 0);
    assert_eq!(engine().on_event("wildfire", &ev, &view(false)), Evaluation::default());
    assert_eq!(engine().on_event("nope", &weather("e", true), &view(false)), Evaluation::default());
}

#[test]
fn missing_field_warns() {
    let mut ev = weather("e1", false);
    ev.payload.remove("needs_preprocessing");
    let out = engine().on_event("wildfire", &ev, &view(false));
    assert!(out.actions.is_empty());
    assert_eq!(out.diagnostics.len(), 3);
    assert!(out.diagnostics.iter().all(|d| d.kind == DiagnosticKind::Warning));
}

#[test]
fn unbound_mandatory_input_is_binding_error() {
    let done = WorkflowEvent::new("e2", kinds::ACTIVITY_COMPLETED, "inc", 400).with_field("activity_id", "weather_model").with_field("region", "A");
    let out = engine().on_event("wildfire", &done, &view(false));
    assert!(out.actions.is_empty());
    assert_eq!(out.diagnostics[0].kind, DiagnosticKind::BindingError);
    assert!(out.diagnostics[0].message.contains("wind_input"));
}

#[test]
fn rule_registration_checks_references() {
    let mut e = engine();
    let bad = assets::WILDFIRE_RULES.replace("activity: preprocess", "activity: nowhere");
    assert!(matches!(e.register_rules(RuleDocument::parse(&bad).unwrap()), Err(WorkflowError::UnknownActivity { .. })));
    let bad = assets::WILDFIRE_RULES.replace("when: ensemble.active == true", "when: ensemble.count");
    assert!(RuleDocument::parse(&bad).is_ok());
    let bad = assets::WILDFIRE_RULES.replace("when: ensemble.active == true", "when: ensemble.count + 1");
    assert!(RuleDocument::parse(&bad).is_err());
    let bad = assets::WILDFIRE_RULES.replace("$(event.region)}", "$(region)}");
    assert!(RuleDocument::parse(&bad).is_err());
    let doc = RuleDocument::parse(assets::WILDFIRE_RULES).unwrap();
    assert_eq!(RuleDocument::parse(&doc.to_canonical()).unwrap(), doc);
}

fn arb_port() -> impl Strategy<Value = (String, PortType, bool)> {
    ("[a-z]{1,6}", prop_oneof![Just(PortType::File), Just(PortType::String), Just(PortType::Number), Just(PortType::Boolean)], any::<bool>())
}

proptest! {
    #[test]
    fn canonical_round_trip(
        id in "[a-z][a-z_]{0,10}",
        inputs in prop::collection::btree_map("[a-z]{1,6}", arb_port(), 0..4),
        job in any::<bool>(),
        nodes in 1u32..64,
        walltime in 1u64..10_000,
        spec in 1u32..4,
    ) {
        let inputs: Vec<Port> = inputs.into_iter().map(|(name, (_, ty, optional))| Port { name, ty, optional }).collect();
        let binding = if job {
            let arguments = inputs.iter().map(|p| (p.name.clone(), format!("$(inputs.{})", p.name))).collect();
            ExecutorBinding::FederatedJob(JobTemplate {
                workload: "w".into(), nodes, walltime, runtime: None, max_priority: "high".into(),
                speculation: spec, deadline_offset: walltime * 2, arguments,
            })
        } else {
            ExecutorBinding::LocalStep(LocalStep { handler: id.clone() })
        };
        let doc = ActivityDocument { version: ACTIVITY_VERSION.into(), id, inputs, outputs: vec![], binding };
        let once = ActivityDocument::parse(&doc.to_canonical()).unwrap();
        prop_assert_eq!(&once, &doc);
        prop_assert_eq!(ActivityDocument::parse(&once.to_canonical()).unwrap(), once);
    }

    #[test]
    fn printed_conditions_reparse(a in 0i64..5, b in "[a-c]{1,3}", neg in any::<bool>()) {
        let src = format!("{}(event.n <= {a} || event.s != '{b}') && exists(state.x)", if neg { "!" } else { "" });
        let c = Condition::parse(&src).unwrap();
        let again = Condition::parse(&c.expr().to_string()).unwrap();
        prop_assert_eq!(again.expr(), c.expr());
    }
}
