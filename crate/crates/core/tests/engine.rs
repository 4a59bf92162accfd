use emseg::checkpoint::{decode_state, encode_state};
use emseg::data::{generate, Benchmark, SyntheticSpec};
use emseg::engine::{advance_stream, resume_stream, run_stream, start_stream, Method, RunConfig, StreamLog, Toggles};

fn small_bench(seed: u64) -> Benchmark {
    generate(&SyntheticSpec {
        seed,
        height: 16,
        width: 16,
        blob_side_min: 6,
        blob_side_max: 12,
        base_images: 24,
        images_per_task: 24,
        test_images_per_task: 8,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        base_epochs: 4,
        ..RunConfig::benchmark()
    }
}

#[test]
fn switching_every_component_off_is_experience_replay() {
    let bench = small_bench(1);
    let off = RunConfig {
        toggles: Toggles::none(),
        ..cfg(1)
    };
    let er = RunConfig {
        method: Method::Er,
        ..cfg(1)
    };
    let a = run_stream(&bench, &off).unwrap();
    let b = run_stream(&bench, &er).unwrap();
    assert_eq!(a.per_task_miou(), b.per_task_miou());
    assert_eq!(a.state.head, b.state.head);
    assert_eq!(a.audit.samples, 0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let bench = small_bench(2);
    let cfg = cfg(2);
    let full = run_stream(&bench, &cfg).unwrap();

    // stop partway through the first incremental task, round-trip the
    // state through the checkpoint format, then finish
    let mut log = StreamLog::default();
    let mut state = start_stream(&bench, &cfg, &mut log).unwrap();
    assert_eq!(advance_stream(&bench, &cfg, &mut state, &mut log, Some(4)).unwrap(), 4);
    assert_eq!((state.task, state.batch_index), (1, 4));
    let restored = decode_state(&encode_state(&state)).unwrap();
    let rest = resume_stream(&bench, &cfg, restored).unwrap();

    assert_eq!(rest.state.head, full.state.head);
    assert_eq!(rest.state.sgd_steps, full.state.sgd_steps);
    assert_eq!(rest.tasks, full.tasks[1..].to_vec());
    assert_eq!(log.diagnostics.len() + rest.diagnostics.len(), full.diagnostics.len());
    assert_eq!(rest.diagnostics, full.diagnostics[4..].to_vec());
}

#[test]
fn resume_from_task_boundary() {
    let bench = small_bench(3);
    let cfg = cfg(3);
    let full = run_stream(&bench, &cfg).unwrap();
    let first = bench.schedule.tasks[0].len();
    let mut log = StreamLog::default();
    let mut state = start_stream(&bench, &cfg, &mut log).unwrap();
    advance_stream(&bench, &cfg, &mut state, &mut log, Some(first)).unwrap();
    assert_eq!(
        log.tasks.len(),
        2,
        "task 1 is evaluated when its last batch is consumed"
    );
    let rest = resume_stream(&bench, &cfg, decode_state(&encode_state(&state)).unwrap()).unwrap();
    assert_eq!(rest.tasks, full.tasks[2..].to_vec());
    assert_eq!(rest.state.head, full.state.head);
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let bench = small_bench(4);
    let a = run_stream(&bench, &cfg(4)).unwrap();
    let b = run_stream(&bench, &cfg(4)).unwrap();
    let c = run_stream(&bench, &cfg(5)).unwrap();
    assert_eq!(a.per_task_miou(), b.per_task_miou());
    assert_eq!(a.state.head, b.state.head);
    assert_ne!(a.state.head, c.state.head);
}

#[test]
fn every_ablation_subset_runs() {
    let bench = small_bench(6);
    for bits in 0..16u8 {
        let toggles = Toggles {
            cbes: bits & 1 != 0,
            relabel_composite: bits & 2 != 0,
            cosine_norm: bits & 4 != 0,
            dynamic_sampling: bits & 8 != 0,
        };
        let r = run_stream(&bench, &RunConfig { toggles, ..cfg(6) }).unwrap();
        assert_eq!(r.state.sgd_steps, r.incoming_batches);
        assert_eq!(r.tasks.len(), 3);
        assert_eq!(r.audit.violations(), 0);
    }
}

#[test]
fn test_set_count_mismatch_is_reported() {
    let mut bench = small_bench(7);
    bench.test_sets.pop();
    let err = run_stream(&bench, &cfg(7)).unwrap_err();
    assert!(err.tasks.is_empty());
    assert!(matches!(err.error, emseg::Error::Schedule(_)));
}
