mod common;

use std::collections::{BTreeMap, HashMap};

use stagewise::experiment::{run_experiment, ExperimentConfig, PolicySelection};
use stagewise::hp::{HpAssignment, Segment, StudySpec, TrialSpec};
use stagewise::sim::{
    merge_studies, partition_cluster, qualified_trial_id, route, simulate, simulate_studies,
    summarize_trace, ClusterSpec, CostModel, Policy, SimReport, TraceEvent, TraceRecord,
};
use stagewise::surrogate::{train_segments, Checkpoint};

use common::{bundled, BUNDLED};

fn both(cfg: &ExperimentConfig) -> (SimReport, SimReport) {
    let out = run_experiment(cfg, PolicySelection::Both).unwrap();
    (
        out.runs[&Policy::TrialBased].clone(),
        out.runs[&Policy::StageBased].clone(),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Every launch with a parent starts no earlier than the parent's successful
/// completion.
fn check_dependencies(trace: &[TraceRecord]) {
    let mut done: HashMap<&str, f64> = HashMap::new();
    for r in trace {
        match r.event {
            TraceEvent::Complete if r.detail_value("truncated").is_none() => {
                done.entry(r.stage_id.as_str()).or_insert(r.time_s);
            }
            TraceEvent::Launch => {
                let parent = r.detail_value("parent").unwrap_or("");
                if !parent.is_empty() {
                    let t = done.get(parent).unwrap_or_else(|| panic!("{} launched before {parent}", r.stage_id));
                    assert!(*t <= r.time_s);
                }
            }
            _ => {}
        }
    }
}

/// No GPU is held by two live workers, and no worker runs two stages at once.
fn check_exclusive(trace: &[TraceRecord]) {
    let mut owner: HashMap<u32, String> = HashMap::new();
    let mut gpus_of: HashMap<String, Vec<u32>> = HashMap::new();
    let mut busy: HashMap<String, bool> = HashMap::new();
    for r in trace {
        match r.event {
            TraceEvent::WorkerCreate => {
                let ids: Vec<u32> = r
                    .detail_value("gpu_ids")
                    .unwrap()
                    .split(' ')
                    .map(|x| x.parse().unwrap())
                    .collect();
                assert_eq!(ids.len() as u32, r.gpus.unwrap());
                for g in &ids {
                    assert!(owner.insert(*g, r.worker_id.clone()).is_none(), "gpu {g} double-booked");
                }
                gpus_of.insert(r.worker_id.clone(), ids);
            }
            TraceEvent::WorkerDestroy => {
                assert!(!busy.get(&r.worker_id).copied().unwrap_or(false));
                for g in gpus_of.remove(&r.worker_id).expect("destroying a live worker") {
                    owner.remove(&g);
                }
            }
            TraceEvent::Launch => {
                assert!(gpus_of.contains_key(&r.worker_id));
                assert!(!busy.insert(r.worker_id.clone(), true).unwrap_or(false));
            }
            TraceEvent::Complete | TraceEvent::Oom => {
                assert!(busy.insert(r.worker_id.clone(), false).unwrap());
            }
            _ => {}
        }
    }
}

#[test]
fn traces_respect_dependencies_and_exclusivity() {
    for name in BUNDLED {
        let (t, s) = both(&bundled(name));
        for run in [&t, &s] {
            check_dependencies(&run.trace);
            check_exclusive(&run.trace);
            assert!(run.trace.windows(2).all(|w| w[0].time_s <= w[1].time_s), "{name}: time order");
        }
    }
}

#[test]
fn totals_are_recomputable_from_traces() {
    for name in BUNDLED {
        let (t, s) = both(&bundled(name));
        for run in [&t, &s] {
            let sum = summarize_trace(&run.trace).unwrap();
            assert!(close(sum.gpu_seconds, run.gpu_seconds), "{name} {}", run.policy);
            assert!(close(run.gpu_hours, run.gpu_seconds / 3600.0));
            assert!(close(run.gpu_busy_s.iter().sum::<f64>(), run.gpu_seconds));
            assert_eq!(sum.epochs_trained, run.epochs_trained);
            assert_eq!(sum.launches, run.launches);
            assert_eq!(sum.oom_failures, run.oom_failures);
            assert!(sum.end_to_end_s <= run.end_to_end_s + 1e-9);
            assert_eq!(run.launch_gpu_counts.values().sum::<u64>(), run.launches);
        }
    }
}

#[test]
fn stage_based_never_costs_more_with_default_costs() {
    for name in BUNDLED {
        let (t, s) = both(&bundled(name));
        assert!(s.gpu_hours <= t.gpu_hours, "{name}: {} > {}", s.gpu_hours, t.gpu_hours);
        assert!(s.epochs_trained <= t.epochs_trained, "{name}");
    }
}

#[test]
fn exhaustive_accuracy_matches_direct_training() {
    for name in ["fig1_example", "resnet_grid"] {
        let cfg = bundled(name);
        let study = cfg.build_study().unwrap();
        let (t, s) = both(&cfg);
        assert_eq!(t.trial_accuracy, s.trial_accuracy);
        let fresh = Checkpoint::fresh(cfg.seed, &cfg.surrogate);
        for trial in &study.trials {
            let want = train_segments(&fresh, trial.segments(), &cfg.surrogate).unwrap();
            assert_eq!(
                s.trial_accuracy[trial.id()].to_bits(),
                want.validation_accuracy().to_bits(),
                "{name} {}",
                trial.id()
            );
        }
    }
}

#[test]
fn synchronous_pruning_is_policy_independent() {
    let (t, s) = both(&bundled("resnet_sha"));
    assert_eq!(t.trial_outcomes, s.trial_outcomes);
    assert_eq!(t.rungs, s.rungs);
    assert_eq!(t.trial_epochs, s.trial_epochs);
    for (id, acc) in &t.trial_accuracy {
        assert_eq!(acc.to_bits(), s.trial_accuracy[id].to_bits(), "{id}");
    }
}

/// Asynchronous promotion depends on completion order, so the two policies
/// may promote different trials; both still see every trial at the first rung.
#[test]
fn asynchronous_runs_fill_the_base_rung() {
    let (t, s) = both(&bundled("wideresnet_asha"));
    for run in [&t, &s] {
        assert_eq!(run.rungs[0].entered, 64);
        for w in run.rungs.windows(2) {
            assert!(w[1].entered <= w[0].promoted);
        }
    }
}

#[test]
fn zero_overhead_single_gpu_time_is_epoch_count() {
    for name in BUNDLED {
        let mut cfg = bundled(name);
        cfg.cost = CostModel::zero_overhead();
        let (t, s) = both(&cfg);
        for run in [&t, &s] {
            // Each epoch costs one GPU-second whatever the allocation.
            assert!(close(run.gpu_seconds, run.epochs_trained as f64), "{name} {}", run.policy);
        }
    }
}

fn study(id: &str, model: &str, lrs: &[&str]) -> StudySpec {
    let trials = lrs
        .iter()
        .enumerate()
        .map(|(i, lr)| {
            let a = HpAssignment::parse_pairs(&[("lr", lr)]).unwrap();
            TrialSpec::new(format!("t{i}"), vec![Segment::new(a, 4).unwrap()], 0).unwrap()
        })
        .collect();
    StudySpec::new(id, model, "cifar10", trials, 4).unwrap()
}

#[test]
fn studies_route_by_model_and_dataset() {
    let studies = vec![
        study("a", "resnet", &["0.1", "0.2"]),
        study("b", "vgg", &["0.1"]),
        study("c", "resnet", &["0.1", "0.3"]),
    ];
    let r = route(&studies);
    assert_eq!(r, BTreeMap::from([("a".into(), 0), ("b".into(), 1), ("c".into(), 0)]));

    let merged = merge_studies(&[&studies[0], &studies[2]]).unwrap();
    assert_eq!(merged.trials.len(), 4);
    assert!(merged.trials.iter().any(|t| *t.id() == qualified_trial_id("c", &"t1".into())));

    let cluster = ClusterSpec::default();
    let parts = partition_cluster(&cluster, 3).unwrap();
    assert_eq!(parts.iter().map(|p| p.nodes).collect::<Vec<_>>(), vec![2, 1, 1]);
    assert!(partition_cluster(&cluster, 5).is_err());
    assert!(partition_cluster(&cluster, 0).is_err());

    let out = simulate_studies(
        &studies,
        &stagewise::algo::Algorithm::Exhaustive,
        Policy::StageBased,
        &cluster,
        &CostModel::zero_overhead(),
        &Default::default(),
        3,
    )
    .unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].studies, vec!["a".to_string(), "c".to_string()]);
    // Shared "lr=0.1" prefix across studies a and c trains once.
    assert_eq!(out[0].report.epochs_trained, 12);
    assert_eq!(out[1].report.epochs_trained, 4);
}

#[test]
fn seeds_change_accuracy_but_not_accounting() {
    let cfg = bundled("resnet_sha");
    let study = cfg.build_study().unwrap();
    let run = |seed| {
        simulate(&study, &cfg.algorithm, Policy::StageBased, &cfg.cluster, &cfg.cost, &cfg.surrogate, seed).unwrap()
    };
    let (a, b) = (run(1), run(2));
    assert_eq!(a.rungs, b.rungs);
    assert_ne!(a.trial_accuracy, b.trial_accuracy);
}
