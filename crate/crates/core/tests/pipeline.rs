//! Whole-pipeline tests through the public surface: scenario text in, trace
//! files and reports out, with replay and comparison closing the loop.

use turngate_core::metrics::{compare, render_compare_text, RunReport};
use turngate_core::scenario::Scenario;
use turngate_core::sim;
use turngate_core::trace::{load_trace, save_trace};

const SCENARIO: &str = r#"
name = "pipeline"
seed = 2024
duration_s = 20.0

[[nodes]]
id = "alpha"
cache_capacity_tokens = 500_000

[[nodes]]
id = "beta"
cache_capacity_tokens = 500_000

[[workload]]
name = "chat"
arrival_rate = 1.5
initial_context_tokens = { lognormal = { median = 900.0, sigma = 0.2 } }
new_tokens_per_turn = { lognormal = { median = 100.0, sigma = 0.2 } }
output_tokens_per_turn = { uniform = { lo = 20, hi = 40 } }
turns_per_session = { shifted_geometric = { median = 4 } }
inter_turn_gap_ms = { lognormal = { median_ms = 2000.0, sigma = 0.4 } }
"#;

fn scenario() -> Scenario {
    Scenario::from_toml_str(SCENARIO).unwrap()
}

#[test]
fn saved_trace_replays_to_the_same_report() {
    let sc = scenario();
    let direct = sim::run(&sc).unwrap();

    let trace = sc.generate_trace().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.trace");
    save_trace(&path, &trace).unwrap();
    let loaded = load_trace(&path).unwrap();
    assert_eq!(trace, loaded, "trace must survive the file round trip");

    let replayed = sim::run_with_trace(&sc, &loaded).unwrap();
    assert_eq!(
        direct.report.to_json(),
        replayed.report.to_json(),
        "replaying the trace a run would generate must reproduce the run"
    );
}

#[test]
fn report_json_round_trips_with_metrics_intact() {
    let report = sim::run(&scenario()).unwrap().report;
    let parsed = RunReport::from_json(&report.to_json()).unwrap();
    assert_eq!(parsed.to_json(), report.to_json());
    assert_eq!(parsed.metric_map(), report.metric_map());
}

#[test]
fn comparison_covers_every_metric_and_renders() {
    let a = sim::run(&scenario()).unwrap().report;
    let mut reseeded = scenario();
    reseeded.seed += 1;
    let b = sim::run(&reseeded).unwrap().report;

    let table = compare(&a, &b).unwrap();
    let keys: Vec<&str> = table.rows.iter().map(|r| r.key.as_str()).collect();
    for metric in a.metric_map().keys() {
        assert!(keys.contains(&metric.as_str()), "comparison lost {metric}");
    }
    let turns = table.ratio_of("turns").unwrap();
    assert!(turns > 0.0, "turn ratio should be positive, got {turns}");
    assert!(table.ratio_of("not_a_metric").is_err());

    let text = render_compare_text(&table);
    assert!(text.contains("req_throughput"), "render misses metrics:\n{text}");
}

#[test]
fn event_log_round_trips_through_a_file() {
    let run = sim::run(&scenario()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    sim::write_events(&path, &run.events).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), run.events.len());
    for (line, event) in text.lines().zip(&run.events) {
        assert_eq!(line, event.render_line(), "file line differs from the record");
        assert!(line.starts_with("t_us="), "malformed line: {line}");
    }
}

#[test]
fn digest_tracks_the_config() {
    assert_eq!(scenario().digest(), scenario().digest());
    let tweaked = Scenario::from_toml_str(&SCENARIO.replace("20.0", "21.0")).unwrap();
    assert_ne!(scenario().digest(), tweaked.digest());
}
