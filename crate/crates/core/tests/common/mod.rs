#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use emodetect::gateway::{BackendConfig, ChatMessage, Gateway, MockBackend, Role};
use emodetect::strategies::{
    few_shot_messages, finetuned_messages, zero_shot_messages, zse_correction_messages, zse_messages,
};
use emodetect::workflows::{binary_messages, miawf_messages, neutral_check_messages, pick_messages};
use emodetect::EmotionLabel::*;

pub const TWEET: &str = "yeah my ass is going wherever jasons going lmao";

pub fn transcript(msgs: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in msgs {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str("--- ");
        out.push_str(role);
        out.push('\n');
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// (golden file, rendered transcript) for every prompt template group.
pub fn golden_cases() -> Vec<(&'static str, String)> {
    vec![
        ("finetune.txt", transcript(&finetuned_messages(TWEET).unwrap())),
        ("zero_shot.txt", transcript(&zero_shot_messages(TWEET).unwrap())),
        (
            "zero_shot_braces.txt",
            transcript(&zero_shot_messages("set {tweet_text} to {label} lol }{").unwrap()),
        ),
        (
            "few_shot.txt",
            transcript(
                &few_shot_messages(
                    &[
                        ("Finna drop another track", Neutral),
                        ("@user Fair enough . No 6 - 0 loss is ever acceptable .", Sadness),
                    ],
                    TWEET,
                )
                .unwrap(),
            ),
        ),
        ("zse.txt", transcript(&zse_messages(TWEET).unwrap())),
        ("zse_correction.txt", transcript(&zse_correction_messages(TWEET, Neutral).unwrap())),
        ("miawf.txt", transcript(&miawf_messages(TWEET, Joy, Neutral).unwrap())),
        ("mbcawf_binary.txt", transcript(&binary_messages(TWEET, Joy).unwrap())),
        ("mbcawf_neutral_check.txt", transcript(&neutral_check_messages(TWEET).unwrap())),
        ("mbcawf_pick.txt", transcript(&pick_messages(TWEET, &[Anger, Joy]).unwrap())),
    ]
}

/// Returns the first golden mismatch, if any.
pub fn check_goldens() -> Result<usize, String> {
    let cases = golden_cases();
    for (name, rendered) in &cases {
        let expected = std::fs::read_to_string(golden_path(name)).map_err(|e| format!("{name}: {e}"))?;
        if &expected != rendered {
            return Err(format!("{name} differs:\n--- expected\n{expected}\n--- rendered\n{rendered}"));
        }
    }
    Ok(cases.len())
}

pub fn mock_gateway(mock: MockBackend, in_flight: usize, cache_dir: Option<PathBuf>) -> (Arc<Gateway>, Arc<MockBackend>) {
    let mock = Arc::new(mock);
    let mut cfg = BackendConfig::mock("mock-chat");
    cfg.max_in_flight = in_flight;
    cfg.cache_dir = cache_dir;
    cfg.retry.backoff_ms = 0;
    (Arc::new(Gateway::with_backend(mock.clone(), &cfg).unwrap()), mock)
}
