mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::question;
use giant::agent::{AgentConfig, BackendError, Conversation, LmmBackend, RuleBackend, SharedBackend};
use giant::bench::dataset::write_manifest;
use giant::bench::metrics::{evaluate, metric_value};
use giant::bench::{accuracy, balanced_accuracy, bootstrap_std, load_manifest, run_giant, BenchContext, Metric, Scored};
use giant::par::Execution;
use proptest::prelude::*;

fn scored() -> impl Strategy<Value = Vec<Scored>> {
    prop::collection::vec((0u8..4, 0u8..5), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (g, p))| {
                let gold = ((b'a' + g) as char).to_string();
                Scored {
                    id: format!("q{i}"),
                    prediction: if p == 4 { "INVALID".into() } else { ((b'a' + p) as char).to_string() },
                    group: gold.clone(),
                    gold,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_ignore_question_order(records in scored(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        for m in [Metric::Accuracy, Metric::BalancedAccuracy] {
            prop_assert_eq!(metric_value(&records, m), metric_value(&shuffled, m));
        }
    }

    #[test]
    fn balanced_equals_plain_with_equal_support_and_recall(classes in 1usize..6, support in 1usize..12, hits in 0usize..12) {
        let hits = hits.min(support);
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for c in 0..classes {
            for k in 0..support {
                golds.push(format!("c{c}"));
                preds.push(if k < hits { format!("c{c}") } else { "other".into() });
            }
        }
        let (ba, recall) = balanced_accuracy(&preds, &golds, &golds);
        prop_assert!((ba - accuracy(&preds, &golds)).abs() < 1e-12);
        prop_assert_eq!(recall.len(), classes);
    }

    #[test]
    fn bootstrap_is_a_function_of_the_seed(records in scored(), seed in any::<u64>()) {
        let a = bootstrap_std(&records, Metric::BalancedAccuracy, 50, seed, Execution::default());
        let b = bootstrap_std(&records, Metric::BalancedAccuracy, 50, seed, Execution::Sequential);
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0 && a.is_finite());
    }
}

#[test]
fn bootstrap_std_is_near_the_analytic_value() {
    let records: Vec<Scored> = (0..100)
        .map(|i| Scored {
            id: i.to_string(),
            gold: "x".into(),
            prediction: if i % 2 == 0 { "x" } else { "y" }.into(),
            group: "x".into(),
        })
        .collect();
    for seed in 0..5 {
        let r = evaluate(&records, Metric::Accuracy, 1000, seed, Execution::default());
        assert!((0.038..=0.062).contains(&r.bootstrap_std), "seed {seed}: {}", r.bootstrap_std);
        assert_eq!(r.seed, seed);
    }
}

fn counting(calls: Arc<AtomicUsize>) -> Arc<dyn LmmBackend> {
    Arc::new(RuleBackend::new("counting", move |c: &Conversation| {
        calls.fetch_add(1, Ordering::SeqCst);
        // one crop, then an answer that depends on the seed
        Ok::<_, BackendError>(if c.assistant_turns() == 0 {
            r#"{"action": "crop", "x": 200, "y": 200, "w": 900, "h": 700}"#.to_string()
        } else {
            format!(r#"{{"action": "final", "answer": "{}"}}"#, ["A", "B", "A"][(c.seed % 3) as usize])
        })
    }))
}

#[test]
fn completed_runs_resume_without_backend_calls() {
    let out = tempfile::tempdir().unwrap();
    let questions: Vec<_> = (0..4).map(|i| question(&format!("q{i}"))).collect();
    let cfg = AgentConfig { vote_runs: 3, long_side: 128, ..AgentConfig::default() };
    let ctx = BenchContext { out_dir: Some(out.path().to_path_buf()), bootstrap_replicates: 50, ..BenchContext::default() };

    let calls = Arc::new(AtomicUsize::new(0));
    let first = run_giant(&questions, &SharedBackend(counting(calls.clone())), None, &cfg, &ctx).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 4 * 3 * 2);
    assert!(first.questions.iter().all(|q| q.prediction == "A" && !q.resumed));

    let again = Arc::new(AtomicUsize::new(0));
    let second = run_giant(&questions, &SharedBackend(counting(again.clone())), None, &cfg, &ctx).unwrap();
    assert_eq!(again.load(Ordering::SeqCst), 0);
    assert!(second.questions.iter().all(|q| q.resumed));
    assert_eq!(first.metric, second.metric);
    for (a, b) in first.questions.iter().zip(&second.questions) {
        assert_eq!((&a.prediction, &a.votes, &a.crops), (&b.prediction, &b.votes, &b.crops));
    }

    // an interrupted run loses its footer and is redone
    let trace = out.path().join("traces/q2/run_1/trace.jsonl");
    let text = std::fs::read_to_string(&trace).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    std::fs::write(&trace, kept.join("\n") + "\n").unwrap();
    let third_calls = Arc::new(AtomicUsize::new(0));
    let third = run_giant(&questions, &SharedBackend(counting(third_calls.clone())), None, &cfg, &ctx).unwrap();
    assert_eq!(third_calls.load(Ordering::SeqCst), 3 * 2);
    assert_eq!(third.metric.value, first.metric.value);

    assert!(out.path().join("results.jsonl").exists());
    assert!(out.path().join("metrics.json").exists());
}

#[test]
fn manifests_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut q = question("only");
    q.slide_ref = common::fixture().path.display().to_string();
    let path = dir.path().join("d.jsonl");
    write_manifest(&path, std::slice::from_ref(&q)).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, vec![q]);
}
