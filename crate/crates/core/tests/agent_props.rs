mod common;

use std::sync::Mutex;

use common::{handle, question, H, W};
use giant::agent::{
    majority_vote, parse_action, run_episode, sanitize_region, Action, AgentConfig, BackendError, Conversation, MockScorer,
    Outcome, RuleBackend,
};
use giant::pyramid::Region;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Reply {
    Crop(i64, i64, i64, i64),
    Score,
    Final,
    Garbage,
}

fn reply() -> impl Strategy<Value = Reply> {
    prop_oneof![
        4 => (-300i64..2000, -300i64..1500, -10i64..1500, -10i64..1500).prop_map(|(x, y, w, h)| Reply::Crop(x, y, w, h)),
        1 => Just(Reply::Score),
        1 => Just(Reply::Final),
        1 => Just(Reply::Garbage),
    ]
}

fn text(r: &Reply) -> String {
    match r {
        Reply::Crop(x, y, w, h) => format!("looking\n{{\"action\": \"crop\", \"x\": {x}, \"y\": {y}, \"w\": {w}, \"h\": {h}}}"),
        Reply::Score => r#"{"action": "score", "hypotheses": ["alpha", "beta"]}"#.into(),
        Reply::Final => r#"done {"action": "final", "answer": "B"}"#.into(),
        Reply::Garbage => "I am not sure what to do".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn episodes_respect_the_step_budget(
        script in prop::collection::vec(reply(), 1..40),
        t in 1u32..8,
        tool in any::<bool>(),
    ) {
        let calls = Mutex::new(Vec::<Conversation>::new());
        let backend = RuleBackend::new("random", |c: &Conversation| {
            let mut seen = calls.lock().unwrap();
            let i = seen.len();
            seen.push(c.clone());
            Ok::<_, BackendError>(text(&script[i % script.len()]))
        });
        let scorer = MockScorer::new([("alpha".to_string(), 0.3), ("beta".to_string(), 0.1)]);
        let cfg = AgentConfig { max_steps: t, tool_enabled: tool, long_side: 96, ..AgentConfig::default() };
        let tr = run_episode(&handle(), &question("q"), &backend, tool.then_some(&scorer as _), &cfg).unwrap();

        let non_final = tr.steps.iter().filter(|s| !matches!(s.action, Action::Final { .. })).count();
        let finals = tr.steps.len() - non_final;
        prop_assert!(non_final <= (t - 1) as usize, "{non_final} steps at T={t}");
        prop_assert!(finals <= 1);
        prop_assert!(tr.crop_count() <= (t - 1) as usize);
        prop_assert!(tr.steps.iter().all(|s| s.parse_attempts >= 1 && s.parse_attempts <= 4));
        match tr.outcome {
            Outcome::Answered | Outcome::ForcedFinal => prop_assert!(tr.final_answer.is_some()),
            Outcome::FailedParse => prop_assert!(tr.final_answer.is_none()),
            Outcome::BackendError => prop_assert!(false, "rule backend never errors"),
        }
        for s in &tr.steps {
            if let Some(g) = &s.crop {
                let r = g.source_region;
                prop_assert!(r.x >= 0 && r.y >= 0 && r.right() <= W as i64 && r.bottom() <= H as i64);
            }
        }

        // every call sees a strict extension of the previous context
        let seen = calls.into_inner().unwrap();
        for pair in seen.windows(2) {
            prop_assert!(pair[1].extends(&pair[0]));
        }
    }

    #[test]
    fn strict_modes_survive_permutation(
        votes in prop::collection::vec(prop::option::of(0u8..4), 1..9),
        seed in any::<u64>(),
    ) {
        let votes: Vec<Option<String>> = votes.into_iter().map(|v| v.map(|c| ((b'A' + c) as char).to_string())).collect();
        let mut counts = std::collections::BTreeMap::new();
        for v in votes.iter().flatten() {
            *counts.entry(v.clone()).or_insert(0) += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        let leaders: Vec<_> = counts.iter().filter(|(_, &c)| c == top).map(|(k, _)| k.clone()).collect();
        prop_assume!(leaders.len() == 1);
        let mut shuffled = votes.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(majority_vote(&votes), Some(leaders[0].clone()));
        prop_assert_eq!(majority_vote(&shuffled), Some(leaders[0].clone()));
    }

    #[test]
    fn the_last_action_object_wins(prefix in "[a-z ]{0,30}", x in 0i64..5000, answer in "[A-Da-d]") {
        let first = Action::Crop { x, y: 1, w: 2, h: 3 }.to_json();
        let last = Action::Final { answer: answer.clone() }.to_json();
        let parsed = parse_action(&format!("{prefix} {first} then {last}")).unwrap();
        prop_assert_eq!(parsed.action, Action::Final { answer });
    }

    #[test]
    fn sanitized_boxes_lie_on_the_slide(x in -3000i64..3000, y in -3000i64..3000, w in -10i64..4000, h in -10i64..4000, min in 1i64..200) {
        let m = handle().manifest().clone();
        if let Ok(r) = sanitize_region(&m, &Region::new(x, y, w, h), min) {
            prop_assert!(r.x >= 0 && r.y >= 0 && r.right() <= W as i64 && r.bottom() <= H as i64);
            prop_assert!(r.w >= min && r.h >= min);
            prop_assert!(r.x >= x && r.y >= y && r.right() <= x + w && r.bottom() <= y + h);
        }
    }
}
