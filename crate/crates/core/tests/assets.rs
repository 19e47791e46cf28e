use std::path::PathBuf;

use brex_core::llm::{icl_examples, BR_DESCRIPTION, ENV_DESCRIPTION, PREDICTION_PROMPT};
use sha2::{Digest, Sha256};

const PINNED: [(&str, &str); 6] = [
    ("br_description.txt", "0e0292b754988add2c2e0531b27b73cffdf0480003754d8d2b7a9ca09735e039"),
    ("env_description.txt", "5bd3ea28aeb574e3c586f24ba50c17100e5d90faf696fd1382a6c3a5a63f91b1"),
    ("icl_exploit.txt", "b052842ed8fecdcfb0a7275446186f6e92dbe22512dbbafaee38ea6c8334e5cd"),
    ("icl_explore.txt", "6ab2b924dab859545816128dad39f68f8fbf828e0ba001d271397717efbac9c7"),
    ("icl_fixed.txt", "015755ac2eddca628c0ec660c04d8ee2282afe92702a7863eb8287b3e7f10077"),
    ("prediction_prompt.txt", "3891f4d9c2035270c694772b80576305ae294498d1b8f779000d008c5172ce31"),
];

fn asset(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn assets_match_pinned_checksums() {
    for (name, sum) in PINNED {
        assert_eq!(hex::encode(Sha256::digest(asset(name).as_bytes())), sum, "{name} changed");
    }
}

#[test]
fn compiled_assets_are_the_files() {
    assert_eq!(ENV_DESCRIPTION, asset("env_description.txt"));
    assert_eq!(BR_DESCRIPTION, asset("br_description.txt"));
    assert_eq!(PREDICTION_PROMPT, asset("prediction_prompt.txt"));
    let icl = icl_examples();
    for (ex, name) in icl.iter().zip(["icl_explore.txt", "icl_exploit.txt", "icl_fixed.txt"]) {
        assert_eq!(format!("{}\n", ex.render()), asset(name));
    }
}

#[test]
fn required_sentences() {
    assert!(ENV_DESCRIPTION.contains("Rubble in the room won't affect the movement of the agents."));
    assert!(ENV_DESCRIPTION.contains("with y=0 being the northernmost row"));
    assert!(BR_DESCRIPTION.contains("the agent may not always be making optimal decisions"));
}
