//! Role prompts for multi-agent stages, keyed by domain.
//!
//! Built-in sets ship under `assets/roles/<domain>.txt`, one role per line. A
//! directory with the same layout can be loaded at runtime.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

const BUILTIN: &[(&str, &str)] = &[
    ("arc", include_str!("../assets/roles/arc.txt")),
    ("medmcqa", include_str!("../assets/roles/medmcqa.txt")),
    ("medqa", include_str!("../assets/roles/medqa.txt")),
    ("mmlu", include_str!("../assets/roles/mmlu.txt")),
];

fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Role list for a built-in domain (`arc`, `medqa`, `medmcqa`, `mmlu`).
pub fn builtin(domain: &str) -> Option<Vec<String>> {
    BUILTIN
        .iter()
        .find(|(name, _)| *name == domain)
        .map(|(_, text)| parse_lines(text))
}

pub fn builtin_domains() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(name, _)| *name)
}

/// Loads every `*.txt` file in `dir` as a domain role list.
pub fn load_dir(dir: &Path) -> io::Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), parse_lines(&fs::read_to_string(&path)?));
        }
    }
    Ok(out)
}

/// System prompt used for a role-conditioned agent call.
pub fn system_prompt(role: &str) -> String {
    format!(
        "You are a {role}. Reason from that perspective, then give your final answer as a single choice letter in parentheses."
    )
}
