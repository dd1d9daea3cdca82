//! Environment variables are process-wide, so this binary holds one test.

mod common;

use common::cli;

#[test]
fn flags_override_environment() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("env.jsonl");
    let from_flag = dir.path().join("flag.jsonl");
    std::env::set_var("RIT_CORPUS_PATH", &from_env);

    let (code, _, err) = cli(&["--backend", "mock", "feedback", "Should I help?", "Yes.", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(from_env.exists());

    let flag = from_flag.to_str().unwrap();
    let (code, _, err) = cli(&["--backend", "mock", "--corpus", flag, "feedback", "Should I lie?", "No.", "-1"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read_to_string(&from_flag).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_to_string(&from_env).unwrap().lines().count(), 1);

    // a lone backend URL from the environment is rejected in auto mode
    std::env::set_var("RIT_EMBED_URL", "http://127.0.0.1:9/");
    let (code, _, _) = cli(&["query", "hi"]);
    assert_eq!(code, 2);
    // but an explicit mock backend ignores it
    let (code, _, err) = cli(&["--backend", "mock", "query", "hi"]);
    assert_eq!(code, 0, "{err}");
    std::env::remove_var("RIT_EMBED_URL");
    std::env::remove_var("RIT_CORPUS_PATH");
}
