use feedback_core::encoding::{EpisodeId, Target};
use feedback_core::gridworld::{Action, Cell};
use feedback_core::translator::{EventPayload, RawFeedbackEvent};
use feedback_service::http::parse_events;
use feedback_service::wire::{EventResult, SubmitResponse};
use feedback_service::ErrorBody;
use proptest::prelude::*;

fn episode_id() -> impl Strategy<Value = EpisodeId> {
    ("[a-z][a-z0-9-]{0,8}", "[a-z][a-z-]{0,8}", 0u64..5, 0u64..2000, 0u64..100_000).prop_map(
        |(env, src, policy, skill, num)| EpisodeId {
            env_name: env,
            source_kind: src,
            policy_id: policy,
            skill_level: skill,
            episode_num: num,
        },
    )
}

fn target() -> impl Strategy<Value = Target> {
    prop_oneof![
        episode_id().prop_map(Target::episode),
        (episode_id(), 0u32..20, 1u32..20).prop_map(|(id, a, len)| Target::segment(id, a, a + len)),
        Just(Target::all()),
    ]
}

fn action() -> impl Strategy<Value = Action> {
    (0usize..4).prop_map(|i| Action::ALL[i])
}

fn payload() -> impl Strategy<Value = EventPayload> {
    let finite = -1e6f64..1e6;
    prop_oneof![
        (target(), finite.clone(), proptest::option::of((-10.0f64..0.0, 0.5f64..10.0))).prop_map(
            |(target, value, scale)| EventPayload::Rating { target, value, scale }
        ),
        (
            proptest::collection::vec(target(), 2..5),
            proptest::option::of(proptest::collection::vec(0u32..5, 2..5))
        )
            .prop_map(|(targets, ranks)| EventPayload::Ranking { targets, ranks }),
        (episode_id(), 0u32..40, proptest::collection::vec(action(), 1..6))
            .prop_map(|(episode, step, actions)| EventPayload::Correction { episode, step, actions }),
        (proptest::collection::vec(action(), 0..30), proptest::option::of(0.0f64..1.0))
            .prop_map(|(actions, optimality)| EventPayload::Demonstration { actions, optimality }),
        (
            target(),
            proptest::option::of(proptest::collection::vec((0i32..8, 0i32..8), 0..6)),
            proptest::option::of(proptest::collection::vec((0.0f64..8.0, 0.0f64..8.0), 3..6)),
            prop_oneof![Just(1.0), Just(-1.0)],
            proptest::option::of("[ -~]{0,20}"),
        )
            .prop_map(|(target, cells, polygon, sign, annotation)| EventPayload::Brush {
                target,
                cells: cells.map(|c| c.into_iter().map(|(x, y)| Cell::new(x, y)).collect()),
                polygon,
                sign,
                annotation,
            }),
    ]
}

fn raw_event() -> impl Strategy<Value = RawFeedbackEvent> {
    (
        "[a-z0-9-]{1,12}",
        "[a-z0-9-]{0,12}",
        "[a-z-]{1,12}",
        any::<i64>(),
        any::<u32>(),
        proptest::option::of(0.0f64..1.0),
        proptest::option::of("\\PC{0,30}"),
        payload(),
    )
        .prop_map(
            |(session_id, user_id, ui_element, ts, latency, confidence, free_text, payload)| RawFeedbackEvent {
                session_id,
                user_id,
                ui_element,
                client_timestamp: ts,
                latency_ms: latency as u64,
                confidence,
                free_text,
                meta: [("progress_phase".to_string(), serde_json::json!(ts.rem_euclid(7)))]
                    .into_iter()
                    .collect(),
                payload,
            },
        )
}

fn result() -> impl Strategy<Value = EventResult> {
    prop_oneof![
        (0usize..100, proptest::collection::vec(any::<u64>(), 0..4))
            .prop_map(|(index, feedback_ids)| EventResult::Accepted { index, feedback_ids }),
        (0usize..100, "[a-z_]{1,12}", "\\PC{0,30}", proptest::option::of("[a-z_]{1,8}")).prop_map(
            |(index, error, message, field)| EventResult::Rejected {
                index,
                error: ErrorBody { error, message, field },
            }
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn events_round_trip_as_ndjson_and_arrays(events in proptest::collection::vec(raw_event(), 1..4)) {
        let ndjson: String = events.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
        let parsed: Vec<_> = parse_events(ndjson.as_bytes()).unwrap().into_iter().map(Result::unwrap).collect();
        prop_assert_eq!(&parsed, &events);
        let array = serde_json::to_string(&events).unwrap();
        let parsed: Vec<_> = parse_events(array.as_bytes()).unwrap().into_iter().map(Result::unwrap).collect();
        prop_assert_eq!(&parsed, &events);
    }

    #[test]
    fn submit_responses_round_trip(results in proptest::collection::vec(result(), 0..5)) {
        let resp = SubmitResponse { results };
        let back: SubmitResponse = serde_json::from_str(&serde_json::to_string(&resp).unwrap()).unwrap();
        prop_assert_eq!(back, resp);
    }
}

#[test]
fn bad_lines_are_reported_in_place() {
    let body = b"{\"nope\":1}\n\n{\"session_id\":\"s\",\"ui_element\":\"x\",\"client_timestamp\":1,\"event_kind\":\"demonstration\",\"payload\":{\"actions\":[\"up\"]}}\n";
    let parsed = parse_events(body).unwrap();
    assert_eq!(parsed.len(), 2);
    assert!(parsed[0].is_err());
    assert!(parsed[1].is_ok(), "{:?}", parsed[1]);
    assert!(parse_events(b"[1, 2").is_err());
    assert!(parse_events(&[0xff, 0xfe]).is_err());
}
