use neuroflow_core::clock::SimClock;
use neuroflow_core::ledger::{compute_run_stats, Ledger, LoadedLedger};
use neuroflow_core::policy::ScriptedPolicy;
use neuroflow_core::runtime::{run_episode, Budget, EpisodeConfig, EpisodeOutcome, HaltReason};
use neuroflow_core::synth;

fn happy(root: &std::path::Path, ledger: Ledger) -> EpisodeOutcome {
    synth::write_happy_dataset(root).unwrap();
    let mut policy = ScriptedPolicy::new(synth::happy_script());
    let mut clock = SimClock::new(0, 1000);
    let mut cfg = EpisodeConfig::new(root);
    cfg.seed = 7;
    run_episode(
        &synth::happy_objective(),
        &synth::fixture_registry(),
        &mut policy,
        &Budget::default(),
        &cfg,
        &mut clock,
        ledger,
    )
    .unwrap()
}

fn dump(out: &EpisodeOutcome) -> String {
    out.trace()
        .iter()
        .map(|s| format!("#{} {:?} {} -> {}", s.index, s.agent, s.action.kind().as_str(), s.observation))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn happy_path_completes_with_two_pipelines() {
    let dir = tempfile::tempdir().unwrap();
    let out = happy(dir.path(), Ledger::in_memory());
    assert!(out.completed, "halt {:?}\n{}", out.halt, dump(&out));
    assert_eq!(out.routing_violations(), 0);
    assert_eq!(out.deliverables.kinds().len(), 3);
    let stats = compute_run_stats(&LoadedLedger::from_ledger(&out.ledger)).unwrap();
    assert_eq!(stats.n_pipelines_explored, 2, "{}", dump(&out));
    assert_eq!(stats.n_refinement_rounds, 1);
    assert!(stats.n_errors >= 1 && stats.n_recovered >= 1, "{stats:?}\n{}", dump(&out));
}

#[test]
fn replay_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let la = a.path().join("trace.jsonl");
    let lb = b.path().join("trace.jsonl");
    happy(&a.path().join("ws"), Ledger::create(&la).unwrap());
    happy(&b.path().join("ws"), Ledger::create(&lb).unwrap());
    assert_eq!(std::fs::read(la).unwrap(), std::fs::read(lb).unwrap());
}

fn looping(budget: Budget, clock: &mut SimClock) -> EpisodeOutcome {
    let dir = tempfile::tempdir().unwrap();
    synth::write_happy_dataset(dir.path()).unwrap();
    let mut policy = ScriptedPolicy::new(synth::looping_script());
    run_episode(
        &synth::happy_objective(),
        &synth::fixture_registry(),
        &mut policy,
        &budget,
        &EpisodeConfig::new(dir.path()),
        clock,
        Ledger::in_memory(),
    )
    .unwrap()
}

#[test]
fn step_limit_halts_at_exactly_500() {
    let out = looping(Budget::default(), &mut SimClock::new(0, 10));
    assert_eq!(out.halt, Some(HaltReason::StepLimit));
    assert_eq!(out.trace().len(), 500);
    assert!(!out.completed);
}

#[test]
fn fast_clock_halts_on_time() {
    let out = looping(Budget::default(), &mut SimClock::new(0, 3_600_000));
    assert_eq!(out.halt, Some(HaltReason::TimeLimit));
    assert!(out.trace().len() < 500);
}
