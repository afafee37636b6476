use proptest::prelude::*;

use super::*;

fn gateway() -> Gateway {
    let mut g = Gateway::new();
    g.create_incident(IncidentDescriptor { incident_id: "inc".into(), label: "Fire".into(), tokens: 10_000.0, active: true, rule_set: "wildfire".into() })
        .unwrap();
    g.register_source(SourceRegistration { source_id: "s1".into(), incident_id: "inc".into() }).unwrap();
    g
}

fn env(seq: u64) -> SensorEnvelope {
    SensorEnvelope {
        source_id: "s1".into(),
        sequence_number: seq,
        content_kind: ContentKind::WeatherObs,
        format: "json".into(),
        payload: r#"{"region":"A","station":"st1","direction":"E","speed":0.5}"#.into(),
        received_at: 0,
    }
}

#[test]
fn first_envelope_accepted_then_duplicate() {
    let mut g = gateway();
    let IngestOutcome::Accepted(a) = g.ingest(&env(1)).unwrap() else { panic!() };
    assert_eq!(a.content.region(), "A");
    let fields = a.content.fields();
    assert_eq!(fields["direction"], "E");
    assert_eq!(fields["needs_preprocessing"], false);
    assert!(matches!(g.ingest(&env(1)).unwrap(), IngestOutcome::Duplicate { sequence_number: 1, .. }));
}

#[test]
fn errors() {
    let mut g = gateway();
    let mut e = env(1);
    e.source_id = "zz".into();
    assert!(matches!(g.ingest(&e), Err(GatewayError::UnknownSource(_))));
    let mut e = env(2);
    e.payload = r#"{"region":"A","station":"st1","direction":"up","speed":0.5}"#.into();
    assert!(matches!(g.ingest(&e), Err(GatewayError::PayloadInvalid { .. })));
    assert!(matches!(g.ingest(&env(2)), Ok(IngestOutcome::Accepted(_))));
    let mut e = env(3);
    e.payload = r#"{"region":"A","station":"st1","direction":"E","speed":0.5,"extra":1}"#.into();
    assert!(g.ingest(&e).is_err());
    assert!(matches!(g.register_source(SourceRegistration { source_id: "x".into(), incident_id: "nope".into() }), Err(GatewayError::UnknownIncident(_))));
}

#[test]
fn raw_csv_needs_preprocessing() {
    let mut g = gateway();
    let mut e = env(1);
    e.format = "csv".into();
    e.payload = "A,st1,E,0.4\nA,st2,E,0.6\n# comment\nA,st3,N,0.9\n".into();
    let IngestOutcome::Accepted(a) = g.ingest(&e).unwrap() else { panic!() };
    assert_eq!(a.content.fields()["needs_preprocessing"], true);
    assert_eq!(a.content.fields()["observation_count"], 3);
    assert!(parse_weather_csv("A,s,E,1\nB,s,E,1\n").is_err());
    assert!(parse_weather_csv("A,s,E\n").is_err());
    assert!(parse_weather_csv("").is_err());
}

#[test]
fn fire_perimeter() {
    let c = validate_payload(ContentKind::FirePerimeter, "json", r#"{"region":"A","cells":[[1,2],[3,4]]}"#).unwrap();
    assert_eq!(c, SensorContent::FirePerimeter { region: "A".into(), cells: vec![(1, 2), (3, 4)] });
    assert!(validate_payload(ContentKind::FirePerimeter, "csv", "").is_err());
}

#[test]
fn hundred_with_ten_duplicates() {
    let mut g = gateway();
    let seqs: Vec<u64> = (0..90).chain((0..10).map(|i| i * 9)).collect();
    let events = seqs.iter().filter(|s| matches!(g.ingest(&env(**s)).unwrap(), IngestOutcome::Accepted(_))).count();
    assert_eq!(events, 90);
}

proptest! {
    /// A burst with duplicates yields one acceptance per distinct sequence
    /// number, in arrival order.
    #[test]
    fn burst_counting(order in prop::collection::vec(0u64..90, 100)) {
        let mut g = gateway();
        let mut accepted = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for seq in &order {
            match g.ingest(&env(*seq)).unwrap() {
                IngestOutcome::Accepted(a) => accepted.push(a.sequence_number),
                IngestOutcome::Duplicate { .. } => prop_assert!(seen.contains(seq)),
            }
            seen.insert(*seq);
        }
        let mut expect = Vec::new();
        let mut firsts = std::collections::BTreeSet::new();
        for seq in order {
            if firsts.insert(seq) {
                expect.push(seq);
            }
        }
        prop_assert_eq!(accepted, expect);
    }
}
