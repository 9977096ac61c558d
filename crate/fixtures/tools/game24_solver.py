#!/usr/bin/env python3
"""Game-of-24 solver tool server: exhaustive search with exact fractions."""
import json
import sys

SERVER_INFO = {"name": "game24-solver", "version": "1.0.0"}

TOOLS = [
    {
        "name": "solve_24",
        "description": "Find an arithmetic expression using each number exactly once (+ - * / and parentheses) that equals the target. Returns the expression or 'no solution'.",
        "inputSchema": {
            "type": "object",
            "properties": {
                "numbers": {"type": "array", "description": "The puzzle numbers, e.g. [4, 4, 6, 8]."},
                "target": {"type": "integer", "description": "Value to reach (default 24)."},
            },
            "required": ["numbers"],
        },
    }
]

from fractions import Fraction


def _search(items, target):
    if len(items) == 1:
        return items[0][1] if items[0][0] == target else None
    for i in range(len(items)):
        for j in range(len(items)):
            if i == j:
                continue
            (a, ea), (b, eb) = items[i], items[j]
            rest = [items[k] for k in range(len(items)) if k != i and k != j]
            options = [(a + b, "(%s+%s)" % (ea, eb)), (a - b, "(%s-%s)" % (ea, eb)), (a * b, "(%s*%s)" % (ea, eb))]
            if b != 0:
                options.append((a / b, "(%s/%s)" % (ea, eb)))
            for value, expr in options:
                found = _search(rest + [(value, expr)], target)
                if found is not None:
                    return found
    return None


def solve(numbers, target=24):
    items = [(Fraction(int(n)), str(int(n))) for n in numbers]
    found = _search(items, Fraction(target))
    if found is None:
        return "no solution"
    if found.startswith("(") and found.endswith(")"):
        depth = 0
        for pos, ch in enumerate(found):
            depth += ch == "("
            depth -= ch == ")"
            if depth == 0 and pos < len(found) - 1:
                return found
        return found[1:-1]
    return found


def call_tool(name, args):
    numbers = args.get("numbers")
    if not isinstance(numbers, list) or not numbers:
        raise ValueError("numbers must be a non-empty list of integers")
    return solve(numbers, int(args.get("target", 24)))


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
