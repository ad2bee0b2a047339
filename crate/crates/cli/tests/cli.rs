use std::fs;
use std::process::{Command, Output};

fn fnetae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnetae")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn count_params_defaults() {
    let out = fnetae(&["count-params"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "4977808");
    let out = fnetae(&["count-params", "--vocab-size", "10", "--max-len", "4", "--embed", "2", "--latent", "2", "--heads", "1", "--key-dim", "2"]);
    assert_eq!(stdout(&out).trim(), "178");
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["train"][..], &["--bogus"], &["generate", "--strategy", "beam", "x"], &[]] {
        let out = fnetae(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
    assert_eq!(fnetae(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let out = fnetae(&["generate", "hello"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checkpoint required"), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fnae");
    let out = fnetae(&["eval", "--checkpoint", missing.to_str().unwrap(), "--corpus", "nowhere.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let corpus = path("stories.jsonl");
    let out = fnetae(&["synth-corpus", "--limit", "60", "--seed", "3", "--out", &corpus]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 60);

    let vocab = path("vocab.txt");
    let out = fnetae(&["build-vocab", "--corpus", &corpus, "--vocab-size", "50", "--out", &vocab]);
    assert!(out.status.success(), "{}", stderr(&out));
    let tokens: Vec<String> = fs::read_to_string(&vocab).unwrap().lines().map(String::from).collect();
    assert_eq!(tokens.len(), 50);
    assert_eq!(tokens[..4], ["[PAD]", "[UNK]", "[START]", "[END]"]);

    let ckpt = path("model.fnae");
    let out = fnetae(&[
        "train", "--corpus", &corpus, "--checkpoint", &ckpt, "--epochs", "2", "--batch", "16", "--vocab-size", "200",
        "--max-len", "16", "--embed", "8", "--latent", "4", "--heads", "2", "--key-dim", "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("stories train=54 val=6"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    assert!(text.contains("val_loss="));

    let out = fnetae(&["eval", "--corpus", &corpus, "--checkpoint", &ckpt]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("loss="));

    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", ckpt.as_str(), "--max-steps", "8"];
        args.extend(extra);
        args.push("the council said");
        let out = fnetae(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out)
    };
    assert_eq!(gen(&[]), gen(&[]));
    assert_eq!(gen(&["--strategy", "topk", "--k", "5", "--seed", "4"]), gen(&["--strategy", "topk", "--k", "5", "--seed", "4"]));

    let seeds = path("seeds.txt");
    fs::write(&seeds, "the council said\nlocal police\n").unwrap();
    let results = path("results.json");
    let out = fnetae(&["export-results", "--checkpoint", &ckpt, "--corpus", &seeds, "--out", &results]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&results).unwrap()).unwrap();
    let rows = json.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["seed"], "local police");
    assert_eq!(rows[0]["strategy"], "greedy");
    assert_eq!(rows[0]["checkpoint-id"].as_str().unwrap().len(), 8);
}
