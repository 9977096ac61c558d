//! Host conformance against the fixture servers. Everything runs in one test
//! so the closing orphan scan sees only this test's children.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mcpbox::boxer::save_box;
use mcpbox::host::{mount_box, spawn_server, HostError, ServerState};
use mcpbox::model::{BoxEntry, Provenance};
use mcpbox::sandbox::SandboxConfig;
use mcpbox::McpBox;
use serde_json::json;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tools").join(name)
}

fn sandbox(timeout_ms: u64) -> SandboxConfig {
    SandboxConfig { timeout_ms, call_timeout_ms: timeout_ms, shutdown_grace_ms: 500, ..SandboxConfig::default() }
}

/// Live children of this process, as (pid, state).
fn children() -> Vec<(u32, char)> {
    let me = std::process::id();
    let mut out = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else { continue };
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else { continue };
        // Fields after the parenthesised command: state, ppid, ...
        let Some((_, rest)) = stat.rsplit_once(") ") else { continue };
        let mut fields = rest.split_whitespace();
        let state = fields.next().and_then(|s| s.chars().next()).unwrap_or('?');
        let ppid: u32 = fields.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        if ppid == me {
            out.push((pid, state));
        }
    }
    out
}

fn echo_round_trip() {
    let started = Instant::now();
    let mut h = spawn_server(&fixture("echo.py"), "echo", &sandbox(10_000)).unwrap();
    assert_eq!(h.state(), ServerState::Starting);
    let info = h.initialize().unwrap();
    assert_eq!(info.name, "echo");
    assert_eq!(h.state(), ServerState::Ready);
    assert_eq!(h.tools().len(), 1);
    assert_eq!(h.tools()[0].signature(), "echo(text: string)");
    let r = h.call_tool("echo", json!({"text": "hello"})).unwrap();
    assert!(!r.is_error);
    assert_eq!(r.content, "hello");
    // Unknown tools are a tool-side error, not a host failure.
    let r = h.call_tool("nope", json!({})).unwrap();
    assert!(r.is_error);
    h.shutdown();
    assert_eq!(h.state(), ServerState::Stopped);
    assert!(started.elapsed() < Duration::from_secs(2), "round trip took {:?}", started.elapsed());
    assert!(matches!(h.call_tool("echo", json!({})), Err(HostError::InvalidState(ServerState::Stopped))));
}

fn fault_injection() {
    for name in ["bad_id.py", "malformed.py"] {
        let mut h = spawn_server(&fixture(name), "fault", &sandbox(5_000)).unwrap();
        let err = h.initialize().unwrap_err();
        assert!(matches!(err, HostError::ProtocolViolation { .. }), "{name}: {err}");
        assert_eq!(h.state(), ServerState::Failed);
    }
}

fn hang_times_out_at_bound() {
    let bound = 1_000u64;
    let mut h = spawn_server(&fixture("hang.py"), "hang", &sandbox(bound)).unwrap();
    let started = Instant::now();
    let err = h.initialize().unwrap_err();
    let elapsed = started.elapsed().as_millis() as u64;
    assert!(matches!(err, HostError::Timeout { .. }), "{err}");
    assert!(elapsed >= bound * 8 / 10 && elapsed <= bound * 12 / 10, "timed out after {elapsed} ms");
}

fn raise_and_broken() {
    let mut h = spawn_server(&fixture("raise.py"), "raise", &sandbox(5_000)).unwrap();
    h.initialize().unwrap();
    let tool = h.tools()[0].name.clone();
    let r = h.call_tool(&tool, json!({})).unwrap();
    assert!(r.is_error);
    drop(h);

    let mut h = spawn_server(&fixture("broken.py"), "broken", &sandbox(5_000)).unwrap();
    let err = h.initialize().unwrap_err();
    assert!(matches!(err, HostError::ServerExited { .. } | HostError::LaunchFailure { .. }), "{err}");
    assert!(h.stderr_tail().contains("SyntaxError"), "{}", h.stderr_tail());

    let err = spawn_server(&fixture("does_not_exist.py"), "x", &sandbox(5_000)).err().unwrap();
    assert!(matches!(err, HostError::LaunchFailure { .. }));
}

fn three_tool_box(root: &Path, broken: bool) -> McpBox {
    std::fs::create_dir_all(root.join("tools")).unwrap();
    let sources = [
        ("echo", "echo.py"),
        ("numeric analysis", "game24_solver.py"),
        ("image utils", if broken { "broken.py" } else { "brain_region_analyzer.py" }),
    ];
    let mut entries = Vec::new();
    for (cluster, file) in sources {
        let rel = format!("tools/{}.tool", cluster.replace(' ', "-"));
        std::fs::copy(fixture(file), root.join(&rel)).unwrap();
        let mut h = spawn_server(&fixture(if file == "broken.py" { "echo.py" } else { file }), cluster, &sandbox(5_000)).unwrap();
        h.initialize().unwrap();
        entries.push(BoxEntry { tool_script_path: rel, cluster_name: cluster.into(), tool_schemas: h.tools().to_vec() });
    }
    entries.sort_by(|a, b| a.cluster_name.cmp(&b.cluster_name));
    let mcp_box = McpBox {
        schema_version: "1".into(),
        entries,
        provenance: Provenance { source_log_digest: "x".into(), created_at: "t".into(), pipeline_config_digest: "y".into() },
    };
    save_box(&mcp_box, root).unwrap();
    mcp_box
}

fn full_box_mounting() {
    let dir = tempfile::tempdir().unwrap();
    let mcp_box = three_tool_box(dir.path(), false);
    let mounted = mount_box(&mcp_box, dir.path(), &sandbox(5_000));
    assert_eq!(mounted.handles.len(), 3);
    assert!(mounted.failures.is_empty());
    let prompt = mcpbox::agents::student_system_prompt(&mcpbox::agents::AgentConfig::student("m"), &mounted);
    for name in ["echo", "solve_24", "analyze_brain_region"] {
        assert!(prompt.contains(&format!("- {name} (group: ")), "{name} missing from:\n{prompt}");
    }
    drop(mounted);

    let dir = tempfile::tempdir().unwrap();
    let mcp_box = three_tool_box(dir.path(), true);
    let mounted = mount_box(&mcp_box, dir.path(), &sandbox(5_000));
    assert_eq!(mounted.handles.len(), 2);
    assert_eq!(mounted.failures.len(), 1);
    assert_eq!(mounted.failures[0].cluster_name, "image utils");
}

#[test]
fn host_conformance_and_cleanup() {
    echo_round_trip();
    fault_injection();
    hang_times_out_at_bound();
    raise_and_broken();
    full_box_mounting();
    let left = children();
    assert!(left.is_empty(), "leftover children: {left:?}");
}
