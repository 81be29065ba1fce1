"""Edit-quality scoring: a deterministic builtin mock and an external line protocol.

Each score has two semantic-consistency components (instruction following and
over-editing) plus perceptual quality, all on a 0-10 scale.  The aggregate is
``sqrt(min(sc_follow, sc_overedit) * pq)``.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SCORE_KEYS = ("sc_follow", "sc_overedit", "pq")
FOLLOW_MIN_CHANGE = 0.05


class ScorerError(RuntimeError):
    """The scorer could not produce a valid reply for one sample."""


def aggregate(sc_follow: float, sc_overedit: float, pq: float) -> dict:
    sc = min(sc_follow, sc_overedit)
    return {"sc_follow": sc_follow, "sc_overedit": sc_overedit, "pq": pq, "sc": sc,
            "overall": math.sqrt(sc * pq)}


def _isolated_fraction(img: np.ndarray) -> float:
    """Fraction of interior pixels whose colour differs from all four neighbours."""
    c = img[1:-1, 1:-1]
    diff = [np.any(c != img[1:-1, :-2], -1), np.any(c != img[1:-1, 2:], -1),
            np.any(c != img[:-2, 1:-1], -1), np.any(c != img[2:, 1:-1], -1)]
    return float(np.mean(diff[0] & diff[1] & diff[2] & diff[3]))


def mock_scores(src: np.ndarray, tgt: np.ndarray, mask: np.ndarray | None) -> dict:
    """Ground-truth-aware heuristic standing in for an MLLM judge.

    With no mask, the region of change is taken as the edit region (so the
    over-editing component is vacuous).
    """
    a = src.astype(np.float64) / 255.0
    b = tgt.astype(np.float64) / 255.0
    if mask is None:
        mask = np.any(src != tgt, axis=-1)
    inside, outside = mask, ~mask
    change = float(np.abs(a[inside] - b[inside]).mean()) if inside.any() else 0.0
    sc_follow = 10.0 * min(1.0, change / FOLLOW_MIN_CHANGE)
    bg_mse = float(((a[outside] - b[outside]) ** 2).mean()) if outside.any() else 0.0
    sc_overedit = 10.0 * (1.0 - min(1.0, bg_mse))
    excess = max(0.0, _isolated_fraction(tgt) - _isolated_fraction(src))
    pq = 10.0 * (1.0 - min(1.0, 10.0 * excess))
    return aggregate(sc_follow, sc_overedit, pq)


class ExternalScorer:
    """Talks to a child process: one JSON request per stdin line, one JSON reply per stdout line."""

    def __init__(self, command: str, timeout: float = 30.0):
        self.command = command
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()

    def _start(self) -> None:
        self._proc = subprocess.Popen(shlex.split(self.command), stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE, text=True, bufsize=1)
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue) -> None:
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _restart(self) -> None:
        self.close()
        self._start()

    def score(self, src_path: str, tgt_path: str, instruction: str) -> dict:
        if self._proc is None or self._proc.poll() is not None:
            self._restart()
        request = json.dumps({"src_path": src_path, "tgt_path": tgt_path, "instruction": instruction})
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise ScorerError(f"scorer process unavailable: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            # a late reply would desynchronise the stream
            self.close()
            raise ScorerError(f"scorer timed out after {self.timeout}s") from None
        if line is None:
            self.close()
            raise ScorerError("scorer process exited")
        try:
            reply = json.loads(line)
            values = [float(reply[k]) for k in SCORE_KEYS]
        except (ValueError, KeyError, TypeError) as exc:
            raise ScorerError(f"garbled scorer reply: {line.strip()[:80]!r}") from exc
        if not all(0.0 <= v <= 10.0 for v in values):
            raise ScorerError(f"scorer reply out of range: {values}")
        return aggregate(*values)

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.kill()
            self._proc.wait()
            self._proc = None


@dataclass
class ScorerAdapter:
    """``kind`` is ``builtin-mock`` or ``external-command``; ``tau_q`` is the acceptance floor."""

    kind: str = "builtin-mock"
    tau_q: float = 7.0
    command: str = ""
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("builtin-mock", "external-command"):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "external-command" and not self.command:
            raise ValueError("external-command scorer needs a command")
        self._external = ExternalScorer(self.command, self.timeout) if self.kind == "external-command" else None

    @classmethod
    def from_spec(cls, spec: str, tau_q: float = 7.0) -> ScorerAdapter:
        """``mock`` / ``builtin-mock`` or ``cmd:<shell words>``."""
        if spec in ("mock", "builtin-mock"):
            return cls("builtin-mock", tau_q)
        if spec.startswith("cmd:"):
            return cls("external-command", tau_q, command=spec[4:])
        raise ValueError(f"unknown scorer {spec!r}; use 'mock' or 'cmd:<command>'")

    def score(self, src: np.ndarray, tgt: np.ndarray, mask: np.ndarray | None,
              instruction: str, src_path: str = "", tgt_path: str = "") -> dict:
        if self._external is None:
            return mock_scores(src, tgt, mask)
        return self._external.score(src_path, tgt_path, instruction)

    def close(self) -> None:
        if self._external is not None:
            self._external.close()
