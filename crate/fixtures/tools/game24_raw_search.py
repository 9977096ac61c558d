#!/usr/bin/env python3
"""Brute-force search over orderings and operators for the 24 game."""
import json
import sys

SERVER_INFO = {"name": "find-expression", "version": "1.0.0"}

TOOLS = [
    {
        "name": "find_expression",
        "description": "Try every ordering, operator choice and bracketing of four numbers and return one that makes 24.",
        "inputSchema": {
            "type": "object",
            "properties": {"numbers": {"type": "array", "description": "exactly four integers"}},
            "required": ["numbers"],
        },
    }
]

from fractions import Fraction
from itertools import permutations, product


def _ap(a, op, b):
    if a is None or b is None:
        return None
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    return None if b == 0 else a / b


def find(numbers, target=24):
    goal = Fraction(target)
    for a, b, c, d in permutations([Fraction(int(n)) for n in numbers]):
        sa, sb, sc, sd = (str(int(v)) for v in (a, b, c, d))
        for x, y, z in product("+-*/", repeat=3):
            shapes = [
                (_ap(_ap(_ap(a, x, b), y, c), z, d), "((%s%s%s)%s%s)%s%s" % (sa, x, sb, y, sc, z, sd)),
                (_ap(_ap(a, x, _ap(b, y, c)), z, d), "(%s%s(%s%s%s))%s%s" % (sa, x, sb, y, sc, z, sd)),
                (_ap(_ap(a, x, b), y, _ap(c, z, d)), "(%s%s%s)%s(%s%s%s)" % (sa, x, sb, y, sc, z, sd)),
                (_ap(a, x, _ap(_ap(b, y, c), z, d)), "%s%s((%s%s%s)%s%s)" % (sa, x, sb, y, sc, z, sd)),
                (_ap(a, x, _ap(b, y, _ap(c, z, d))), "%s%s(%s%s(%s%s%s))" % (sa, x, sb, y, sc, z, sd)),
            ]
            for value, expr in shapes:
                if value is not None and value == goal:
                    return expr
    return "no solution"


def call_tool(name, args):
    numbers = args["numbers"]
    if len(numbers) != 4:
        raise ValueError("expected exactly four numbers")
    return find(numbers, 24)


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
