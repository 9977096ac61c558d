//! Versioned prompt assets. Their digests enter the pipeline configuration
//! digest, so recorded outputs go stale when a prompt changes.

use std::collections::BTreeMap;

use crate::model::sha256_hex;

pub const ABSTRACT: &str = include_str!("../prompts/abstract.txt");
pub const CLUSTER: &str = include_str!("../prompts/cluster.txt");
pub const CONSOLIDATE: &str = include_str!("../prompts/consolidate.txt");
pub const TEACHER: &str = include_str!("../prompts/agents/teacher.txt");
pub const STUDENT: &str = include_str!("../prompts/agents/student.txt");

/// Asset text by id (`abstract`, `cluster`, `consolidate`, `teacher`, `student`).
pub fn asset(id: &str) -> Option<&'static str> {
    match id {
        "abstract" => Some(ABSTRACT),
        "cluster" => Some(CLUSTER),
        "consolidate" => Some(CONSOLIDATE),
        "teacher" => Some(TEACHER),
        "student" => Some(STUDENT),
        _ => None,
    }
}

/// SHA-256 of every asset, keyed by id.
pub fn digests() -> BTreeMap<&'static str, String> {
    ["abstract", "cluster", "consolidate", "teacher", "student"]
        .into_iter()
        .map(|id| (id, sha256_hex(asset(id).expect("known id").as_bytes())))
        .collect()
}

/// Substitute `{{name}}` placeholders. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}
