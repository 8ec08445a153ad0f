mod common;

use std::io::Cursor;
use std::path::Path;

use slide_agent_core::backends::ScriptRule;
use slide_agent_core::testkit::executor_rules;
use slide_agent_service::cli;

struct Output {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str], stdin: &str) -> Output {
    let mut argv = vec!["slide-agent".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut Cursor::new(stdin.as_bytes().to_vec()), &mut out, &mut err);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn rule_toml(r: &ScriptRule) -> String {
    let contains = r.contains.as_ref().map(|c| format!("contains = '{c}', ")).unwrap_or_default();
    format!("{{ {contains}response = '{}', repeat = {} }}", r.response, r.repeat)
}

/// A scripted configuration file; returns its path.
fn write_config(dir: &Path, executor: &[ScriptRule]) -> String {
    let rules: Vec<String> = executor.iter().map(rule_toml).collect();
    let text = format!(
        "session_dir = 'runs'\nslides_dir = 'slides'\n\
         [navigator]\nkind = 'scripted'\ndim = 8\n\
         [perceptor]\nkind = 'scripted'\nrules = [{{ response = 'tile {{image}}', repeat = true }}]\n\
         [executor]\nkind = 'scripted'\nrules = [{}]\n",
        rules.join(", ")
    );
    let path = dir.join("agent.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn ask_prints_the_answer_and_writes_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let slides = common::write_slides(dir.path());
    let cfg = write_config(dir.path(), &executor_rules("Grade II/III", 1, None));
    let traj = dir.path().join("t.jsonl");
    let o = run(
        &[
            "--config",
            &cfg,
            "ask",
            "--slide",
            slides.join("s1").to_str().unwrap(),
            "--question",
            "Which grade?",
            "--options",
            "Grade I/III,Grade II/III,Grade III/III",
            "--trajectory",
            traj.to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(o.code, 0, "{}", o.err);
    assert!(o.out.contains("Answer: Grade II/III"), "{}", o.out);
    assert!(o.out.contains("Iterations: 2"), "{}", o.out);
    let lines = std::fs::read_to_string(&traj).unwrap();
    assert!(lines.lines().last().unwrap().contains("\"final\""));
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let slides = common::write_slides(dir.path());
    let cfg = write_config(dir.path(), &executor_rules("A", 0, None));
    let s1 = slides.join("s1");
    let s1 = s1.to_str().unwrap();

    let o = run(&["--config", &cfg, "ask", "--question", "q"], "");
    assert_eq!(o.code, 1);
    assert!(o.err.contains("--slide"), "{}", o.err);
    assert_eq!(run(&["--config", &cfg, "ask", "--slide", s1, "--question", "q", "--options", "one"], "").code, 1);
    assert_eq!(run(&["--config", &cfg, "embed", "--slide", s1, "--mag", "40"], "").code, 1);
    assert_eq!(run(&["--help"], "").code, 0);

    let o = run(&["--config", &cfg, "ask", "--slide", "/nonexistent", "--question", "q"], "");
    assert_eq!(o.code, 2);
    // the executor script has no rule for the prompts, so the session fails
    let broken = write_config(dir.path(), &[ScriptRule::once("never matches", "{}")]);
    let o = run(&["--config", &broken, "ask", "--slide", s1, "--question", "q"], "");
    assert_eq!(o.code, 2, "{}", o.out);
    assert!(o.out.contains("Trajectory:"));
}

#[test]
fn embed_writes_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let slides = common::write_slides(dir.path());
    let cfg = write_config(dir.path(), &[]);
    let o = run(&["--config", &cfg, "embed", "--slide", slides.join("s1").to_str().unwrap(), "--mag", "10"], "");
    assert_eq!(o.code, 0, "{}", o.err);
    assert!(o.out.contains("indexed 144 patches of s1 at 10x (dim 8)"), "{}", o.out);
    assert!(slides.join("s1/embeddings").read_dir().unwrap().count() >= 1);
}

#[test]
fn eval_writes_results_and_report_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    common::write_slides(dir.path());
    let cfg = write_config(dir.path(), &executor_rules("B", 0, None));
    let dataset = dir.path().join("qa.jsonl");
    std::fs::write(
        &dataset,
        [
            r#"{"id":"q1","slide_id":"s1","question":"Pick","kind":"closed","options":["A","B"],"gold_answer":"B"}"#,
            r#"{"id":"q2","slide_id":"s2","question":"Pick","kind":"closed","options":["A","B"],"gold_answer":"A"}"#,
            r#"{"id":"q3","slide_id":"s2","question":"Describe","kind":"open","gold_answer":"B"}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let out = dir.path().join("results.jsonl");
    let args = ["--config", &cfg, "eval", "--dataset", dataset.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = run(&args, "");
    assert_eq!(o.code, 0, "{}", o.err);
    assert!(o.out.contains("50.00"), "{}", o.out);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.jsonl.report.json")).unwrap()).unwrap();
    assert_eq!(report["counts"]["total"], 3);
    assert!(dir.path().join("runs/q1.jsonl").exists());

    // a second run finds everything done
    let o = run(&args, "");
    assert_eq!(o.code, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);

    let o = run(&["--config", &cfg, "eval", "--dataset", "/nonexistent.jsonl", "--out", out.to_str().unwrap()], "");
    assert_eq!(o.code, 2);
}

#[test]
fn interactive_repl_applies_commands() {
    let dir = tempfile::tempdir().unwrap();
    let slides = common::write_slides(dir.path());
    let cfg = write_config(dir.path(), &executor_rules("Grade I/III", 0, None));
    let input = "help\nresume\nresume\nnote check the margin\nmag 40\nbogus\nresume\nresume\nresume\nresume\n";
    let o = run(
        &["--config", &cfg, "ask", "--interactive", "--slide", slides.join("s2").to_str().unwrap(), "--question", "Grade?"],
        input,
    );
    assert_eq!(o.code, 0, "out:\n{}\nerr:\n{}", o.out, o.err);
    assert!(o.out.contains("[awaiting_intervention"), "{}", o.out);
    assert!(o.out.contains("applied inject_note"), "{}", o.out);
    assert!(o.out.contains("rejected:"), "{}", o.out);
    assert!(o.out.contains("unknown command"), "{}", o.out);
    assert!(o.out.contains("Answer: Grade I/III"), "{}", o.out);

    // input ending early leaves the session paused
    let o = run(
        &["--config", &cfg, "ask", "--interactive", "--slide", slides.join("s2").to_str().unwrap(), "--question", "Grade?"],
        "resume\n",
    );
    assert_eq!(o.code, 2);
}
