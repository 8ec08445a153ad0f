//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use slide_agent_core::backends::{EmbeddingScript, ScriptRule, ScriptedChat, ScriptedEmbedder};
use slide_agent_core::config::AppConfig;
use slide_agent_core::executor::prompts::*;
use slide_agent_core::executor::{parse_json_object, JsonParseError};
use slide_agent_core::metrics::{
    bleu_tokens, meteor_lite_tokens, rouge_l, rouge_l_tokens, run_eval, stem, AnswerRunner, QaRecord, QuestionKind,
    RunnerAnswer,
};
use slide_agent_core::navigator::{guided_sample, ExclusionSet, PatchEmbeddingIndex, Sample};
use slide_agent_core::orchestrator::{
    run_session, ActionKind, Backends, ForcedReason, JsonlSink, SessionConfig, StateEntry, Trajectory,
};
use slide_agent_core::perceptor::PERCEPTOR_SYSTEM_PROMPT;
use slide_agent_core::runtime::{AgentRunner, Runtime};
use slide_agent_core::slide_store::{MagLevel, Manifest, SlideBundle, SlideLibrary};
use slide_agent_core::testkit::{
    executor_rules, predict_reply, reflect_reply, step_keys, ScriptedWorld, SyntheticBundle, TILE_PATTERN,
};

const SEED: u64 = 0x5eed_2026;
const TOL: f64 = 1e-12;
const REPLAY_LIMIT: Duration = Duration::from_secs(5);
const COVERAGE_LIMIT: Duration = Duration::from_secs(5);
const SERVICE_LIMIT: Duration = Duration::from_secs(10);
const FUZZ_CASES: usize = 1000;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let checks: Vec<Check> = vec![
        ("trace replay", trace_replay),
        ("action coverage", action_coverage),
        ("navigator oracle", navigator_oracle),
        ("zoom partition", zoom_partition),
        ("metrics oracles", metrics_oracles),
        ("protocol robustness", protocol_robustness),
        ("service contract", service_contract),
        ("eval harness", eval_harness),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({secs:.2}s)");
            }
        }
        std::io::stdout().flush().ok();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn actions(t: &Trajectory) -> Vec<ActionKind> {
    t.actions().map(|a| a.action).collect()
}

fn session(world: &ScriptedWorld, id: &str, log: Option<&std::path::Path>) -> Trajectory {
    let mut opts = world.replay_options(id);
    if let Some(path) = log {
        opts.sinks.push(Box::new(JsonlSink::create(path).unwrap()));
    }
    run_session(
        world.bundle.clone(),
        world.index.clone(),
        world.backends(),
        "What is the histological grade?",
        &[],
        SessionConfig::default(),
        opts,
    )
    .unwrap()
}

fn trace_replay() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticBundle::new("s100", 10, 10).tile_px(2);
    let mut logs = Vec::new();
    let mut first = None;
    for run_no in 0..3 {
        let world = ScriptedWorld::new(&dir.path().join("slide"), &spec, executor_rules("Grade II/III", 5, None));
        let path = dir.path().join(format!("run{run_no}.jsonl"));
        let t = session(&world, "replay", Some(&path));
        logs.push(std::fs::read(&path).unwrap());
        first.get_or_insert(t);
    }
    let t = first.unwrap();
    let examined: BTreeSet<u32> = t
        .iterations
        .iter()
        .flat_map(|i| i.findings.iter().map(|f| f.patch.patch_index))
        .collect();
    use ActionKind::*;
    ensure!(examined.len() == 30, "examined {} distinct patches", examined.len());
    ensure!(t.iterations.len() == 5, "{} iterations", t.iterations.len());
    ensure!(
        actions(&t) == vec![Explore, Explore, Explore, Explore, ForcedConclude],
        "actions {:?}",
        actions(&t)
    );
    ensure!(
        t.actions().last().unwrap().reason == Some(ForcedReason::MaxIterations),
        "forced for another reason"
    );
    ensure!(!logs[0].is_empty() && logs[0] == logs[1] && logs[1] == logs[2], "reruns differ");
    let elapsed = start.elapsed();
    ensure!(elapsed < REPLAY_LIMIT, "took {elapsed:?}");
    Ok(format!("30 patches over 5 iterations, 3 identical logs of {} bytes", logs[0].len()))
}

fn action_coverage() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    use ActionKind::*;

    let world = ScriptedWorld::new(
        &dir.path().join("c"),
        &SyntheticBundle::new("c", 10, 10).tile_px(2),
        executor_rules("Grade II/III", 0, None),
    );
    let t = session(&world, "conclude", None);
    ensure!(actions(&t) == vec![Conclude], "conclude path: {:?}", actions(&t));
    ensure!(t.iterations[0].state.entries.len() == 10, "conclude state size");
    ensure!(t.final_answer.is_some(), "conclude path has no answer");

    let world = ScriptedWorld::new(
        &dir.path().join("z"),
        &SyntheticBundle::new("z", 4, 4).with_levels(&[5, 10, 20, 40]).tile_px(2),
        executor_rules("Grade III/III", 1, Some(40)),
    );
    let t = session(&world, "zoom", None);
    ensure!(actions(&t) == vec![Zoom], "zoom path: {:?}", actions(&t));
    let state = &t.iterations[0].state;
    let at_40 = state.entries.iter().filter_map(StateEntry::key).filter(|(m, _)| *m == 40).count();
    ensure!(state.entries.len() == 3 && at_40 == 1, "zoom state {} entries, {at_40} at 40x", state.entries.len());
    ensure!(t.final_answer.is_some(), "zoom path has no answer");

    let world = ScriptedWorld::new(
        &dir.path().join("e"),
        &SyntheticBundle::new("e", 10, 10).tile_px(2),
        executor_rules("Grade I/III", 2, None),
    );
    let t = session(&world, "explore", None);
    let sizes: Vec<usize> = t.iterations.iter().map(|i| i.state.entries.len()).collect();
    ensure!(actions(&t) == vec![Explore, Explore, Conclude], "explore path: {:?}", actions(&t));
    ensure!(sizes == vec![10, 5, 5], "explore state sizes {sizes:?}");

    let elapsed = start.elapsed();
    ensure!(elapsed < COVERAGE_LIMIT, "took {elapsed:?}");
    Ok("conclude [10], zoom [2+1@40x], explore [10,5,5]".into())
}

fn fuzz_bundle(w: u32, h: u32, levels: &[u32]) -> SlideBundle {
    let base = levels[0];
    let manifest = Manifest {
        slide_id: "fuzz".into(),
        tile_size_px: 256,
        levels: levels
            .iter()
            .map(|m| MagLevel {
                magnification: *m,
                grid_w: w * m / base,
                grid_h: h * m / base,
                tile_path_pattern: TILE_PATTERN.into(),
            })
            .collect(),
        created_at: None,
        source_note: None,
    };
    SlideBundle::from_manifest("/nonexistent", manifest).unwrap()
}

fn navigator_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED);
    let scales = [1e-3f32, 0.37, 2.0, 55.0, 4e3];
    let mut ties = 0;
    for case in 0..FUZZ_CASES {
        let (w, h) = (rng.gen_range(1..9u32), rng.gen_range(1..9u32));
        let n = (w * h) as usize;
        // equal ranks share a vector, so their scores tie exactly
        let ranks: Vec<u8> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let excluded: BTreeSet<u32> = (0..n as u32).filter(|_| rng.gen_bool(0.4)).collect();
        let k = rng.gen_range(1..n + 4);
        let scale = *scales.choose(&mut rng).unwrap();

        let bundle = fuzz_bundle(w, h, &[5]);
        let vectors: Vec<Vec<f32>> = ranks
            .iter()
            .map(|r| {
                let theta = *r as f32 * 0.25;
                vec![theta.cos(), theta.sin(), 0.0]
            })
            .collect();
        let index = PatchEmbeddingIndex::from_vectors("fuzz", 5, "scripted-embedder", &vectors).unwrap();
        let mut exclusion = ExclusionSet::new();
        for i in &excluded {
            exclusion.insert(&bundle.patch_by_index(5, *i).unwrap().unwrap());
        }
        let sample = |q: f32| {
            let mut script = EmbeddingScript::hashed(3);
            script.hashed_fallback = false;
            script.texts.insert("q".into(), vec![q, 0.0, 0.0]);
            match guided_sample(&bundle, &index, "q", &exclusion, k, &ScriptedEmbedder::new(script), 1).unwrap() {
                Sample::Exhausted => None,
                Sample::Found(v) => Some(v.into_iter().map(|s| s.patch.patch_index).collect::<Vec<_>>()),
            }
        };

        let mut pool: Vec<(u8, u32)> = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| (*r, i as u32))
            .filter(|(_, i)| !excluded.contains(i))
            .collect();
        pool.sort();
        let want = (!pool.is_empty()).then(|| pool.iter().take(k).map(|(_, i)| *i).collect::<Vec<_>>());
        if pool.windows(2).any(|p| p[0].0 == p[1].0) {
            ties += 1;
        }
        let got = sample(1.0);
        ensure!(got == want, "case {case}: {got:?} vs oracle {want:?}");
        let scaled = sample(scale);
        ensure!(scaled == got, "case {case}: scaling by {scale} changed the ranking");
    }
    Ok(format!("{FUZZ_CASES} cases ({ties} with ties), scale-invariant"))
}

fn zoom_partition() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut grids: Vec<(u32, u32)> = vec![(1, 1), (64, 1), (1, 64), (64, 64)];
    grids.extend((0..60).map(|_| (rng.gen_range(1..=64), rng.gen_range(1..=64))));
    let mut checked = 0usize;
    for (w, h) in grids {
        for levels in [[5u32, 10], [5, 20]] {
            let b = fuzz_bundle(w, h, &levels);
            let ratio = levels[1] / levels[0];
            let mut hits: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for p in b.patches_at(levels[0]).unwrap() {
                let children = b.magnify_patch(&p, levels[1]).map_err(|e| e.to_string())?;
                ensure!(children.len() == (ratio * ratio) as usize, "{w}x{h}: {} children", children.len());
                for c in children {
                    ensure!(
                        c.loc.col / ratio == p.loc.col && c.loc.row / ratio == p.loc.row,
                        "{w}x{h}: child outside parent"
                    );
                    *hits.entry((c.loc.col, c.loc.row)).or_default() += 1;
                }
            }
            let high = b.level(levels[1]).unwrap();
            let violations = hits.values().filter(|n| **n != 1).count() + high.patch_count().abs_diff(hits.len());
            ensure!(violations == 0, "{w}x{h} ratio {ratio}: {violations} violations");
            checked += hits.len();
        }
    }
    Ok(format!("64 grids x ratios 2 and 4, {checked} cells covered once"))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

fn bleu_oracle(c: &[String], r: &[String], max_n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut product = 1.0f64;
    for n in 1..=max_n {
        if c.len() < n {
            return 0.0;
        }
        let cw: Vec<&[String]> = c.windows(n).collect();
        let rw: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
        let mut distinct: Vec<&[String]> = cw.clone();
        distinct.sort();
        distinct.dedup();
        let clipped: usize = distinct
            .iter()
            .map(|g| cw.iter().filter(|x| *x == g).count().min(rw.iter().filter(|x| *x == g).count()))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        product *= clipped as f64 / cw.len() as f64;
    }
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * product.powf(1.0 / max_n as f64)
}

/// Largest one-to-one stem matching, fewest chunks among the largest.
fn meteor_oracle(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let sc: Vec<String> = c.iter().map(|t| stem(t)).collect();
    let sr: Vec<String> = r.iter().map(|t| stem(t)).collect();
    let mut best = (0usize, usize::MAX);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; r.len()];
    fn walk(
        i: usize,
        sc: &[String],
        sr: &[String],
        used: &mut [bool],
        pairs: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize),
    ) {
        if i == sc.len() {
            let chunks = (0..pairs.len())
                .filter(|&k| k == 0 || pairs[k - 1].0 + 1 != pairs[k].0 || pairs[k - 1].1 + 1 != pairs[k].1)
                .count();
            if pairs.len() > best.0 || (pairs.len() == best.0 && chunks < best.1) {
                *best = (pairs.len(), chunks);
            }
            return;
        }
        walk(i + 1, sc, sr, used, pairs, best);
        for j in 0..sr.len() {
            if !used[j] && sc[i] == sr[j] {
                used[j] = true;
                pairs.push((i, j));
                walk(i + 1, sc, sr, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    walk(0, &sc, &sr, &mut used, &mut pairs, &mut best);
    let (m, chunks) = best;
    if m == 0 {
        return 0.0;
    }
    let (mf, ch) = (m as f64, chunks as f64);
    let p = mf / c.len() as f64;
    let rec = mf / r.len() as f64;
    10.0 * p * rec / (rec + 9.0 * p) * (1.0 - 0.5 * (ch / mf).powi(3))
}

fn random_words(rng: &mut StdRng, vocab: &[&str], max_len: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| vocab.choose(rng).unwrap().to_string()).collect()
}

fn all_sequences(vocab: &[&str], max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::<String>::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| vocab.iter().map(move |w| [s.clone(), vec![w.to_string()]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn metrics_oracles() -> Outcome {
    const PLAIN: &[&str] = &["a", "b", "c", "d", "e", "f"];
    const MORPH: &[&str] = &["cell", "cells", "divide", "dividing", "divided", "the", "tumor", "tumors", "grade", "a"];
    let mut rng = StdRng::seed_from_u64(SEED);
    for case in 0..FUZZ_CASES {
        let (c, r) = (random_words(&mut rng, PLAIN, 14), random_words(&mut rng, PLAIN, 14));
        let got = rouge_l_tokens(&c, &r);
        let l = lcs(&c, &r) as f64;
        let (p, rec) = if l == 0.0 { (0.0, 0.0) } else { (l / c.len() as f64, l / r.len() as f64) };
        let f = if l == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
        ensure!(
            (got.precision - p).abs() < TOL && (got.recall - rec).abs() < TOL && (got.f1 - f).abs() < TOL,
            "ROUGE-L case {case}: {got:?} vs ({p}, {rec}, {f})"
        );
        let n = rng.gen_range(1..=4);
        let (b, want) = (bleu_tokens(&c, &r, n), bleu_oracle(&c, &r, n));
        ensure!((b - want).abs() < TOL, "BLEU-{n} case {case}: {b} vs {want}");
        let (c, r) = (random_words(&mut rng, MORPH, 6), random_words(&mut rng, MORPH, 6));
        let (m, want) = (meteor_lite_tokens(&c, &r), meteor_oracle(&c, &r));
        ensure!((m - want).abs() < TOL, "METEOR {c:?} / {r:?}: {m} vs {want}");
    }
    let seqs = all_sequences(&["a", "b"], 6);
    for c in &seqs {
        for r in &seqs {
            let (m, want) = (meteor_lite_tokens(c, r), meteor_oracle(c, r));
            ensure!((m - want).abs() < TOL, "METEOR {c:?} / {r:?}: {m} vs {want}");
        }
    }
    let f1 = rouge_l("a c e", "a b c d e").f1;
    ensure!((f1 - 0.75).abs() < TOL, "worked example F1 {f1}");
    Ok(format!(
        "{FUZZ_CASES} ROUGE-L/BLEU/METEOR pairs, {} exhaustive METEOR pairs, worked example F1 {f1:.2}",
        seqs.len() * seqs.len()
    ))
}

fn random_object(rng: &mut StdRng) -> Map<String, Value> {
    const CHARS: &[char] = &['a', 'Z', ' ', '{', '}', '"', '\\', '`', ':', ',', '\n', 'é', '細', '7'];
    let mut obj = Map::new();
    for _ in 0..rng.gen_range(1..5) {
        let key: String = (0..rng.gen_range(1..8)).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
        let value = match rng.gen_range(0..4) {
            0 => json!(rng.gen_bool(0.5)),
            1 => json!(rng.gen_range(-1000..1000)),
            2 => json!((0..rng.gen_range(0..20)).map(|_| *CHARS.choose(rng).unwrap()).collect::<String>()),
            _ => json!(["Yes", "No", "None"].choose(rng).unwrap()),
        };
        obj.insert(key, value);
    }
    obj
}

fn protocol_robustness() -> Outcome {
    let golden_dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/golden");
    for (file, text) in [
        ("predict_answer.txt", PREDICT_ANSWER_PROMPT),
        ("self_reflect.txt", SELF_REFLECT_PROMPT),
        ("explore_missing_info.txt", EXPLORE_MISSING_INFO_PROMPT),
        ("final_answer.txt", FINAL_ANSWER_PROMPT),
        ("perceptor_system.txt", PERCEPTOR_SYSTEM_PROMPT),
    ] {
        let want = std::fs::read_to_string(format!("{golden_dir}/{file}")).map_err(|e| format!("{file}: {e}"))?;
        ensure!(want == text, "{file} differs from the prompt in use");
    }

    let mut rng = StdRng::seed_from_u64(SEED);
    let prose = |rng: &mut StdRng| -> String {
        let words = ["Sure", "here is", "the JSON", "answer.", "Note:", "done!"];
        (0..rng.gen_range(1..5)).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let mut counts = [0usize; 4];
    for case in 0..FUZZ_CASES {
        let obj = random_object(&mut rng);
        let body = if rng.gen_bool(0.5) {
            serde_json::to_string_pretty(&obj).unwrap()
        } else {
            serde_json::to_string(&obj).unwrap()
        };
        let (lead, tail) = (prose(&mut rng), prose(&mut rng));
        let wrapped = match case % 6 {
            0 => body.clone(),
            1 => format!("```json\n{body}\n```"),
            2 => format!("```\n{body}\n```"),
            3 => format!("{lead}\n{body}"),
            4 => format!("{body}\n{tail}"),
            _ => format!("{lead} ```json\n{body}\n``` {tail}"),
        };
        let got = parse_json_object(&wrapped);
        ensure!(got.as_ref() == Ok(&obj), "well-formed case {case} {wrapped:?}: {got:?}");
        counts[0] += 1;

        // malformed: never closed
        let compact = serde_json::to_string(&obj).unwrap();
        let mut end = compact.len() - rng.gen_range(1..8).min(compact.len() - 1);
        while !compact.is_char_boundary(end) {
            end -= 1;
        }
        let raw = format!("{lead}{}", &compact[..end]);
        let got = parse_json_object(&raw);
        ensure!(matches!(got, Err(JsonParseError::Unbalanced { .. })), "truncated {raw:?}: {got:?}");
        counts[1] += 1;

        // malformed: no object at all
        let raw = format!("{lead} {tail}");
        let got = parse_json_object(&raw);
        ensure!(matches!(got, Err(JsonParseError::NoObject { .. })), "prose {raw:?}: {got:?}");
        counts[2] += 1;

        // malformed: a balanced block that is not JSON
        let key = obj.keys().next().unwrap();
        let bad = match case % 4 {
            0 => format!("{{'{key}': 1}}"),
            1 => format!("{{\"{key}\": 1,}}"),
            2 => format!("{{{key}: 1}}"),
            _ => format!("{{\"{key}\": tru}}"),
        };
        let raw = format!("{lead} {bad}");
        let got = parse_json_object(&raw);
        ensure!(matches!(got, Err(JsonParseError::Invalid { .. })), "invalid {raw:?}: {got:?}");
        counts[3] += 1;
    }
    Ok(format!(
        "{} well-formed parsed; {} unbalanced, {} no-object, {} invalid rejected; 5 golden prompts match",
        counts[0], counts[1], counts[2], counts[3]
    ))
}

fn service_contract() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mgr = common::manager(dir.path(), executor_rules("Grade II/III", 1, None), 8);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let detail = rt.block_on(async move {
        let base = common::serve(mgr).await;
        let c = reqwest::Client::new();
        let post = |url: String, body: Value| {
            let c = c.clone();
            async move {
                let r = c.post(url).json(&body).send().await.unwrap();
                let code = r.status().as_u16();
                (code, r.json::<Value>().await.unwrap_or(Value::Null))
            }
        };
        let mut codes = Vec::new();
        let (code, h) = post(
            format!("{base}/v1/sessions"),
            json!({ "slide_id": "s1", "question": "What is the histological grade?", "config": { "interactive": true } }),
        )
        .await;
        ensure!(code == 201 && h["status"] == "paused", "create: {code} {h}");
        codes.push(code);
        let id = h["id"].as_str().unwrap().to_string();
        let s = |p: &str| format!("{base}/v1/sessions/{id}{p}");

        let mut v = Value::Null;
        for _ in 0..2 {
            let (code, body) = post(s("/resume"), json!({})).await;
            ensure!(code == 200, "resume: {code} {body}");
            codes.push(code);
            v = body;
        }
        ensure!(v["status"] == "awaiting_intervention", "after two resumes: {}", v["status"]);
        let entry = &v["state"]["state"]["entries"][0];
        let (col, row) = (entry["patch"]["loc"]["col"].clone(), entry["patch"]["loc"]["row"].clone());
        let original = entry["description"].as_str().unwrap_or_default().to_string();

        let (code, body) = post(
            s("/interventions"),
            json!({ "kind": "edit_description", "payload": { "magnification": 5, "col": col, "row": row, "text": common::CORRECTED } }),
        )
        .await;
        ensure!(code == 200, "intervene: {code} {body}");
        codes.push(code);

        loop {
            let (code, body) = post(s("/resume"), json!({})).await;
            ensure!(code == 200, "resume: {code} {body}");
            codes.push(code);
            if body["status"] == "done" {
                break;
            }
            ensure!(codes.len() < 20, "session never finished");
        }
        let (code, _) = post(s("/resume"), json!({})).await;
        ensure!(code == 409, "resume after done gave {code}");
        codes.push(code);

        let traj: Value = c.get(s("/trajectory")).send().await.unwrap().json().await.unwrap();
        let events = traj.as_array().cloned().unwrap_or_default();
        let edit_at = events
            .iter()
            .position(|e| e["kind"] == "intervention")
            .ok_or("no intervention event")?;
        let later: Vec<&str> = events[edit_at..]
            .iter()
            .filter_map(|e| e.pointer("/exchange/user_prompt").and_then(Value::as_str))
            .collect();
        ensure!(!later.is_empty(), "no prompts after the edit");
        ensure!(later.iter().any(|p| p.contains(common::CORRECTED)), "edited text missing from later prompts");
        ensure!(!later.iter().any(|p| p.contains(&original)), "original text still in later prompts");
        Ok(format!("status codes {codes:?}, edit in {} later prompts", later.len()))
    })?;
    let elapsed = start.elapsed();
    ensure!(elapsed < SERVICE_LIMIT, "took {elapsed:?}");
    Ok(detail)
}

struct Counting<'a> {
    inner: AgentRunner<'a>,
    calls: AtomicUsize,
}

impl AnswerRunner for Counting<'_> {
    fn answer(&self, record: &QaRecord) -> Result<RunnerAnswer, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.answer(record)
    }
}

fn eval_harness() -> Outcome {
    const OPTIONS: [&str; 2] = ["luminal A", "luminal B"];
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<QaRecord> = (0..10)
        .map(|i| QaRecord {
            id: format!("r{i}"),
            slide_id: "s1".into(),
            question: format!("Case {i}: which molecular subtype fits?"),
            kind: QuestionKind::Closed,
            options: OPTIONS.iter().map(|s| s.to_string()).collect(),
            gold_answer: OPTIONS[i % 2].into(),
        })
        .collect();
    let mut rules = vec![ScriptRule::always(step_keys::REFLECT, reflect_reply(true))];
    for (i, r) in records.iter().enumerate() {
        let answer = if i < 7 { r.gold_answer.clone() } else { OPTIONS[(i + 1) % 2].to_string() };
        rules.push(ScriptRule::always(r.question.clone(), predict_reply(&answer, "scripted")));
    }
    let slides = common::write_slides(dir.path());
    let backends = Backends {
        embedder: Arc::new(ScriptedEmbedder::hashed(8)),
        perceptor: Arc::new(ScriptedChat::new(vec![ScriptRule::fallback("glands {image}")])),
        executor: Arc::new(ScriptedChat::new(rules)),
    };
    let rt = Runtime::new(AppConfig::default(), SlideLibrary::scan(slides).unwrap(), backends);
    let runner = || Counting {
        inner: AgentRunner {
            runtime: &rt,
            trajectory_dir: dir.path().join("traj"),
        },
        calls: AtomicUsize::new(0),
    };
    let out = dir.path().join("results.jsonl");

    // interrupted after four records, mid-way through writing the fifth
    let first = runner();
    run_eval(&records[..4], &first, &out, 2).map_err(|e| e.to_string())?;
    std::fs::OpenOptions::new()
        .append(true)
        .open(&out)
        .unwrap()
        .write_all(b"{\"id\":\"r4\",\"sli")
        .unwrap();

    let second = runner();
    let report = run_eval(&records, &second, &out, 3).map_err(|e| e.to_string())?;
    let accuracy = format!("{:.2}", report.aggregates.accuracy.unwrap_or(f64::NAN));
    let resumed = second.calls.load(Ordering::SeqCst);
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    ensure!(accuracy == "70.00", "accuracy {accuracy}");
    ensure!(resumed == 6, "resume answered {resumed} records, expected 6");
    ensure!(lines == 10 && report.counts.total == 10, "{lines} result lines");
    ensure!(report.table().contains("70.00"), "report table lacks 70.00");
    Ok(format!("accuracy {accuracy}, resumed with {resumed} of 10 records"))
}
