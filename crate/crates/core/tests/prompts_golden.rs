mod common;

use common::{check_goldens, golden_cases, golden_path, TWEET};
use emodetect::strategies::zero_shot_messages;

#[test]
fn rendered_prompts_match_goldens() {
    if let Err(e) = check_goldens() {
        panic!("{e}");
    }
}

#[test]
fn every_golden_file_is_exercised() {
    let covered: Vec<&str> = golden_cases().iter().map(|(n, _)| *n).collect();
    let dir = golden_path("");
    for entry in std::fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(covered.contains(&name.as_str()), "unused golden {name}");
    }
}

#[test]
fn tweet_is_inserted_verbatim() {
    let msgs = zero_shot_messages(TWEET).unwrap();
    assert!(msgs.iter().any(|m| m.content.contains(TWEET)));
}
