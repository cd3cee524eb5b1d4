"""Test double for the external backend protocol.

Each patch's reply is a deterministic function of its first pixel, so the
host can check order and exact values. ``--malformed`` makes it misbehave.
"""

import argparse
import base64
import json
import sys

CLASSES = ["AL", "HD", "FB", "Tn", "BG"]


def distribution(first_pixel):
    a = first_pixel / 510.0
    rest = (1.0 - a) / 4.0
    return [a, rest, rest, rest, rest]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--side", type=int, default=8)
    parser.add_argument("--fixed", help="comma-separated distribution returned for every patch")
    parser.add_argument("--malformed", choices=["json", "count", "sum", "id", "exit", "hello", "error"])
    args = parser.parse_args()

    def send(obj):
        sys.stdout.write((obj if isinstance(obj, str) else json.dumps(obj)) + "\n")
        sys.stdout.flush()

    if args.malformed == "hello":
        send({"kind": "probs"})
        return
    send({"kind": "hello", "input_side": args.side, "classes": CLASSES})
    fixed = [float(v) for v in args.fixed.split(",")] if args.fixed else None
    for line in sys.stdin:
        msg = json.loads(line)
        n, side = msg["count"], msg["side"]
        raw = base64.b64decode(msg["pixels"])
        probs = [fixed if fixed else distribution(raw[i * side * side]) for i in range(n)]
        if args.malformed == "json":
            send("{not json")
        elif args.malformed == "count":
            send({"kind": "probs", "id": msg["id"], "probs": probs[:-1]})
        elif args.malformed == "sum":
            send({"kind": "probs", "id": msg["id"], "probs": [[0.5] * 5 for _ in probs]})
        elif args.malformed == "id":
            send({"kind": "probs", "id": msg["id"] + 1, "probs": probs})
        elif args.malformed == "exit":
            sys.stderr.write("backend crashed on purpose\n")
            sys.exit(1)
        elif args.malformed == "error":
            send({"kind": "error", "id": msg["id"], "message": "model unavailable"})
        else:
            send({"kind": "probs", "id": msg["id"], "probs": probs})


if __name__ == "__main__":
    main()
