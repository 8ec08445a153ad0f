use std::collections::BTreeSet;

use proptest::prelude::*;

use slide_agent_core::backends::ScriptRule;
use slide_agent_core::orchestrator::{run_session, ActionKind, ForcedReason, SessionConfig};
use slide_agent_core::testkit::{explore_reply, predict_reply, reflect_reply, step_keys, ScriptedWorld, SyntheticBundle};

#[derive(Debug, Clone)]
struct Script {
    w: u32,
    h: u32,
    max_iterations: u32,
    zoom_patch_count: usize,
    /// Per iteration: reflection verdict and requested zoom level.
    steps: Vec<(bool, Option<u32>)>,
}

fn script() -> impl Strategy<Value = Script> {
    (
        2u32..6,
        1u32..5,
        1u32..6,
        1usize..3,
        prop::collection::vec((any::<bool>(), prop::option::weighted(0.3, prop::sample::select(vec![10u32, 15, 20, 40]))), 6),
    )
        .prop_map(|(w, h, max_iterations, zoom_patch_count, steps)| Script {
            w,
            h,
            max_iterations,
            zoom_patch_count,
            steps,
        })
}

fn rules(s: &Script) -> Vec<ScriptRule> {
    let mut rules = Vec::new();
    for (sufficient, zoom) in &s.steps {
        rules.push(ScriptRule::once(step_keys::REFLECT, reflect_reply(*sufficient)));
        if !sufficient {
            rules.push(ScriptRule::once(step_keys::EXPLORE, explore_reply("nuclear detail", *zoom)));
        }
    }
    rules.push(ScriptRule::always(step_keys::PREDICT, predict_reply("a", "b")));
    rules.push(ScriptRule::always(step_keys::FINAL, predict_reply("a", "c")));
    rules
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, .. ProptestConfig::default() })]

    #[test]
    fn scripted_sessions_keep_loop_invariants(s in script()) {
        let dir = tempfile::tempdir().unwrap();
        let world = ScriptedWorld::new(
            dir.path(),
            &SyntheticBundle::new("prop", s.w, s.h).with_levels(&[5, 10, 20]).tile_px(2),
            rules(&s),
        );
        let config = SessionConfig {
            max_iterations: s.max_iterations,
            zoom_patch_count: s.zoom_patch_count,
            ..SessionConfig::default()
        };
        let t = run_session(world.bundle.clone(), world.index.clone(), world.backends(), "q", &[], config, world.replay_options("p")).unwrap();
        let n = (s.w * s.h) as usize;

        prop_assert!(!t.iterations.is_empty());
        prop_assert!(t.iterations.len() as u32 <= s.max_iterations);
        prop_assert!(t.final_answer.is_some());

        // exactly one action per iteration; only the last one terminates
        let last = t.iterations.len() - 1;
        for (i, it) in t.iterations.iter().enumerate() {
            let a = it.action.as_ref().expect("every iteration has an action");
            prop_assert_eq!(a.iteration as usize, i + 1);
            prop_assert_eq!(a.terminates(), i == last);
            match a.action {
                ActionKind::Conclude => prop_assert!(a.verdict.sufficient),
                ActionKind::Zoom => {
                    prop_assert!(a.directive.as_ref().unwrap().zoom_recommendation);
                    let level = a.zoom_level.unwrap();
                    prop_assert!(level > 5);
                    let zoomed: Vec<_> = it.state.entries.iter().filter_map(|e| e.key()).filter(|(m, _)| *m != 5).collect();
                    prop_assert_eq!(zoomed.len(), s.zoom_patch_count);
                    prop_assert!(zoomed.iter().all(|(m, _)| *m == level));
                }
                ActionKind::ForcedConclude => {
                    let examined: usize = t.iterations.iter().map(|i| i.findings.len()).sum();
                    match a.reason {
                        Some(ForcedReason::MaxIterations) => prop_assert_eq!(a.iteration, s.max_iterations),
                        Some(ForcedReason::PoolExhausted) => prop_assert_eq!(examined, n),
                        other => prop_assert!(false, "unexpected reason {:?}", other),
                    }
                }
                ActionKind::Explore => prop_assert!(!a.verdict.sufficient),
            }
        }

        // base-level findings never repeat across iterations
        let mut seen = BTreeSet::new();
        for it in &t.iterations {
            for f in &it.findings {
                prop_assert_eq!(f.patch.magnification, 5);
                prop_assert!(seen.insert(f.patch.patch_index), "patch {} examined twice", f.patch.patch_index);
            }
        }

        // entries are distinct by (magnification, loc) within a state
        for it in &t.iterations {
            let keys: Vec<_> = it.state.entries.iter().filter_map(|e| e.key()).collect();
            let unique: BTreeSet<_> = keys.iter().map(|(m, l)| (*m, l.col, l.row)).collect();
            prop_assert_eq!(keys.len(), unique.len());
        }
    }
}
