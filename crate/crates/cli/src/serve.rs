//! One stdio MCP server fronting every entry of a box. Tool names are routed
//! to the first mounted entry that offers them.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::Context;
use serde_json::{json, Value};

use mcpbox::host::mount_box;
use mcpbox::sandbox::SandboxConfig;
use mcpbox::{McpBox, ToolSchema};

fn input_schema(tool: &ToolSchema) -> Value {
    let properties: serde_json::Map<String, Value> = tool
        .parameters
        .iter()
        .map(|p| (p.name.clone(), json!({"type": p.type_tag, "description": p.description})))
        .collect();
    let required: Vec<&str> = tool.parameters.iter().filter(|p| p.required).map(|p| p.name.as_str()).collect();
    json!({"type": "object", "properties": properties, "required": required})
}

fn error(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.into()}})
}

pub fn serve(mcp_box: &McpBox, box_root: &Path, sandbox: &SandboxConfig) -> anyhow::Result<()> {
    let mut mounted = mount_box(mcp_box, box_root, sandbox);
    for f in &mounted.failures {
        tracing::warn!(cluster = %f.cluster_name, detail = %f.detail, "entry not served");
    }
    let listing: Vec<Value> = mounted
        .offered_tools()
        .map(|(_, t)| json!({"name": t.name, "description": t.description, "inputSchema": input_schema(t)}))
        .collect();

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.context("reading stdin")?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                writeln!(stdout, "{}", error(Value::Null, -32700, format!("parse error: {e}")))?;
                stdout.flush()?;
                continue;
            }
        };
        // Notifications carry no id and get no reply.
        let Some(id) = msg.get("id").cloned() else { continue };
        let method = msg.get("method").and_then(Value::as_str).unwrap_or("");
        let params = msg.get("params").cloned().unwrap_or(Value::Null);
        let reply = match method {
            "initialize" => json!({"jsonrpc": "2.0", "id": id, "result": {
                "protocolVersion": params.get("protocolVersion").cloned().unwrap_or_else(|| json!(sandbox.protocol_version)),
                "capabilities": {"tools": {}},
                "serverInfo": {"name": "mcpbox", "version": env!("CARGO_PKG_VERSION")},
            }}),
            "ping" => json!({"jsonrpc": "2.0", "id": id, "result": {}}),
            "tools/list" => json!({"jsonrpc": "2.0", "id": id, "result": {"tools": listing}}),
            "tools/call" => {
                let name = params.get("name").and_then(Value::as_str).unwrap_or("");
                let arguments = params.get("arguments").cloned().unwrap_or_else(|| json!({}));
                match mounted.handles.iter_mut().find(|h| h.tools().iter().any(|t| t.name == name)) {
                    None => error(id, -32602, format!("unknown tool: {name}")),
                    Some(handle) => match handle.call_tool(name, arguments) {
                        Ok(r) => json!({"jsonrpc": "2.0", "id": id, "result": {
                            "content": [{"type": "text", "text": r.content}],
                            "isError": r.is_error,
                        }}),
                        Err(e) => error(id, -32603, e.to_string()),
                    },
                }
            }
            other => error(id, -32601, format!("method not found: {other}")),
        };
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    mounted.shutdown();
    Ok(())
}
