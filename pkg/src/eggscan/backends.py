"""Classification backends and the line-delimited JSON protocol for external models.

Protocol, one JSON object per line over the child's stdin/stdout:

* backend -> host, first line:
  ``{"kind": "hello", "input_side": N, "classes": ["AL", "HD", "FB", "Tn", "BG"]}``
* host -> backend:
  ``{"kind": "classify", "id": K, "count": n, "side": N, "pixels": "<base64>"}``
  where pixels are n*N*N raw uint8 bytes, row-major within a patch, patch-major overall
* backend -> host: ``{"kind": "probs", "id": K, "probs": [[p_AL, p_HD, p_FB, p_Tn, p_BG], ...]}``
  or ``{"kind": "error", "id": K, "message": "..."}``

Requests are sent one at a time; a backend never sees two in flight.
"""

import base64
import json
import math
import queue
import shlex
import subprocess
import threading

import numpy as np

from ._validation import check_patch_stack
from .classifier import resize_stack
from .exceptions import BackendError
from .patching import CLASSES

PROB_TOLERANCE = 1e-6


def encode_request(request_id, patches):
    patches = np.ascontiguousarray(patches, dtype=np.uint8)
    n, side, _ = patches.shape
    return {
        "kind": "classify",
        "id": request_id,
        "count": int(n),
        "side": int(side),
        "pixels": base64.b64encode(patches.tobytes()).decode("ascii"),
    }


def decode_request(message):
    """Inverse of :func:`encode_request`, for backend implementations."""
    n, side = int(message["count"]), int(message["side"])
    raw = base64.b64decode(message["pixels"])
    if len(raw) != n * side * side:
        raise ValueError(f"pixel payload has {len(raw)} bytes, expected {n * side * side}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, side, side)


def check_probabilities(probs, count, diagnostic=""):
    """Validate an (n, 5) probability table, raising :class:`BackendError` otherwise."""
    if not isinstance(probs, list) or len(probs) != count:
        raise BackendError(f"expected {count} probability rows", diagnostic)
    for row in probs:
        if (not isinstance(row, list) or len(row) != len(CLASSES)
                or not all(isinstance(p, (int, float)) and not isinstance(p, bool) for p in row)):
            raise BackendError("probability rows must hold five numbers", diagnostic)
        if not all(math.isfinite(p) and -PROB_TOLERANCE <= p <= 1 + PROB_TOLERANCE for p in row):
            raise BackendError("probabilities must lie in [0, 1]", diagnostic)
        if abs(math.fsum(row) - 1.0) > PROB_TOLERANCE:
            raise BackendError("probability rows must sum to 1", diagnostic)
    return np.array(probs, dtype=np.float64).reshape(count, len(CLASSES))


class ExternalBackend:
    """Child-process backend speaking the JSON-lines protocol.

    ``command`` is an argv list or a shell-style string. Use as a context
    manager, or call :meth:`close` when done.
    """

    def __init__(self, command, timeout=120.0, max_batch=512):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.max_batch = max_batch
        self._next_id = 0
        self._stderr = []
        self._lines = queue.Queue()
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise BackendError(f"could not start backend {self.command!r}: {exc}") from exc
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()
        threading.Thread(target=self._drain_stderr, daemon=True).start()
        hello = self._read_message()
        if hello.get("kind") != "hello":
            self.close()
            raise BackendError("backend did not start with a hello message", json.dumps(hello))
        side = hello.get("input_side")
        if not isinstance(side, int) or isinstance(side, bool) or side < 1:
            self.close()
            raise BackendError("hello carries no valid input_side", json.dumps(hello))
        if list(hello.get("classes", [])) != list(CLASSES):
            self.close()
            raise BackendError(f"backend classes must be {list(CLASSES)}", json.dumps(hello))
        self.input_side = side

    @staticmethod
    def _pump(stream, sink):
        for line in stream:
            sink.put(line)
        sink.put(None)

    def _drain_stderr(self):
        for line in self._proc.stderr:
            self._stderr.append(line)

    def diagnostic(self):
        return "".join(self._stderr[-50:])

    def _read_message(self):
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise BackendError(f"backend gave no reply within {self.timeout}s", self.diagnostic()) from None
        if line is None:
            try:
                code = self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                code = None
            raise BackendError(f"backend exited (status {code})", self.diagnostic())
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            raise BackendError("malformed reply from backend", line.rstrip("\n")) from None
        if not isinstance(msg, dict):
            raise BackendError("malformed reply from backend", line.rstrip("\n"))
        return msg

    def _request(self, patches):
        rid = self._next_id
        self._next_id += 1
        try:
            self._proc.stdin.write(json.dumps(encode_request(rid, patches)) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"backend pipe closed: {exc}", self.diagnostic()) from exc
        msg = self._read_message()
        raw = json.dumps(msg)
        if msg.get("kind") == "error":
            raise BackendError(f"backend error: {msg.get('message', '')}", raw)
        if msg.get("kind") != "probs" or msg.get("id") != rid:
            raise BackendError(f"unexpected reply to request {rid}", raw)
        return check_probabilities(msg.get("probs"), len(patches), raw)

    def predict_proba(self, patches):
        patches = check_patch_stack(patches)
        if patches.shape[0] and patches.shape[1] != self.input_side:
            raise BackendError(f"patches must be {self.input_side}px, got {patches.shape[1]}px")
        out = [self._request(patches[s:s + self.max_batch]) for s in range(0, len(patches), self.max_batch)]
        return np.concatenate(out) if out else np.zeros((0, len(CLASSES)))

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is None or proc.poll() is not None:
            return
        try:
            proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def classify_batch(backend, patches):
    """Per-patch class distributions from ``backend``, in input order.

    Patches are resized to the backend's declared ``input_side`` first.
    """
    patches = check_patch_stack(patches)
    if patches.shape[0] == 0:
        return np.zeros((0, len(CLASSES)))
    resized = resize_stack(patches, backend.input_side)
    probs = np.asarray(backend.predict_proba(resized), dtype=np.float64)
    if probs.shape != (len(patches), len(CLASSES)):
        raise BackendError(f"backend returned shape {probs.shape}, expected {(len(patches), len(CLASSES))}")
    return probs


def serve(backend, stdin=None, stdout=None):
    """Answer protocol requests on ``stdin``/``stdout`` with an in-process ``backend``.

    Lets any object with ``input_side`` and ``predict_proba`` stand behind
    ``--backend cmd:...``; returns when ``stdin`` closes.
    """
    import sys

    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout

    def send(msg):
        stdout.write(json.dumps(msg) + "\n")
        stdout.flush()

    send({"kind": "hello", "input_side": int(backend.input_side), "classes": list(CLASSES)})
    for line in stdin:
        if not line.strip():
            continue
        rid = None
        try:
            msg = json.loads(line)
            rid = msg.get("id")
            if msg.get("kind") != "classify":
                raise ValueError(f"unsupported request kind {msg.get('kind')!r}")
            patches = decode_request(msg)
            probs = np.asarray(backend.predict_proba(patches), dtype=np.float64)
            send({"kind": "probs", "id": rid, "probs": probs.tolist()})
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            send({"kind": "error", "id": rid, "message": str(exc)})


if __name__ == "__main__":
    import argparse

    from .classifier import ReferenceClassifier

    parser = argparse.ArgumentParser(description="Serve a saved reference model over the JSON-lines protocol.")
    parser.add_argument("model", help="path to model.json")
    args = parser.parse_args()
    clf = ReferenceClassifier.load(args.model)
    serve(clf)
