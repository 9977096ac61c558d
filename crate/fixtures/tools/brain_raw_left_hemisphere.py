#!/usr/bin/env python3
"""Analyze the left hemisphere of the current brain MRI slice."""
import json
import sys

SERVER_INFO = {"name": "left-hemisphere", "version": "1.0.0"}

TOOLS = [
    {
        "name": "analyze_left_hemisphere",
        "description": "Crop the left hemisphere and report intensity asymmetry.",
        "inputSchema": {"type": "object", "properties": {}, "required": []},
    }
]


def call_tool(name, args):
    return "left hemisphere: asymmetric hyperintensity, 1 lesion candidate"


def send(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except ValueError:
            send({"jsonrpc": "2.0", "id": None, "error": {"code": -32700, "message": "Parse error"}})
            continue
        if "id" not in msg:
            continue
        mid, method, params = msg["id"], msg.get("method"), msg.get("params") or {}
        if method == "initialize":
            result = {
                "protocolVersion": params.get("protocolVersion", "2024-11-05"),
                "capabilities": {"tools": {}},
                "serverInfo": SERVER_INFO,
            }
        elif method == "tools/list":
            result = {"tools": TOOLS}
        elif method == "tools/call":
            name = params.get("name")
            if name not in [t["name"] for t in TOOLS]:
                send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32602, "message": "Unknown tool: %s" % name}})
                continue
            try:
                text = call_tool(name, params.get("arguments") or {})
                result = {"content": [{"type": "text", "text": text}], "isError": False}
            except Exception as exc:
                send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32000, "message": str(exc)}})
                continue
        elif method == "ping":
            result = {}
        else:
            send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32601, "message": "Method not found: %s" % method}})
            continue
        send({"jsonrpc": "2.0", "id": mid, "result": result})


if __name__ == "__main__":
    main()
