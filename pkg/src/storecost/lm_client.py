"""Client for an external masked-LM server speaking the line-JSON protocol.

Presents the same `predict_masked` contract as the internal backends, so the
storage computations never know which backend answers. The client owns one
connection, serializes writes, demultiplexes responses by request id from a
reader thread, and caches every distinct query so the server is hit at most
once per query per client.

Endpoints: ``host:port`` for TCP, or ``stdio:<command line>`` to spawn a
child process and speak over its pipes.
"""

from __future__ import annotations

import itertools
import json
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import protocol
from .backends import LOG2_FLOOR, MaskedQuery, TokenDistribution, TopKDistribution
from .errors import (
    ContextLengthError,
    DataFormatError,
    ParameterError,
    ProtocolError,
    TransportError,
)

_LN_TO_LOG2 = 1.0 / np.log(2.0)
_WIRE_MASS_TOL = 1e-4


@dataclass(frozen=True)
class ServerConfig:
    endpoint: str
    timeout_ms: int = 60000
    top_k: int | None = None
    max_inflight: int = 8

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ParameterError("timeout_ms must be positive")
        if self.top_k is not None and self.top_k < 2:
            raise ParameterError("top_k must be >= 2 when set")
        if self.max_inflight < 1:
            raise ParameterError("max_inflight must be >= 1")


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout_s: float):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
        self._sock.settimeout(None)
        self._reader = self._sock.makefile("rb")

    def send(self, data: bytes):
        self._sock.sendall(data)

    def readline(self) -> bytes:
        return self._reader.readline()

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class _StdioTransport:
    def __init__(self, command: str):
        argv = shlex.split(command)
        if not argv:
            raise ParameterError("empty stdio command")
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise TransportError(f"cannot start {argv[0]}: {exc}") from None

    def send(self, data: bytes):
        try:
            self._proc.stdin.write(data)
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise TransportError(f"server process closed its pipe: {exc}") from None

    def readline(self) -> bytes:
        return self._proc.stdout.readline()

    def close(self):
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        self._proc.terminate()
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()


class _Pending:
    __slots__ = ("event", "payload", "error")

    def __init__(self):
        self.event = threading.Event()
        self.payload = None
        self.error = None


@dataclass
class BatchResult:
    """Per-query outcome of a batch call: distributions or the error."""

    distributions: list | None = None
    error: Exception | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class LmClient:
    """Blocking per-call client, shareable across threads."""

    def __init__(self, config: ServerConfig):
        self.config = config
        timeout_s = config.timeout_ms / 1000.0
        if config.endpoint.startswith("stdio:"):
            self._transport = _StdioTransport(config.endpoint[len("stdio:") :])
        else:
            host, _, port = config.endpoint.rpartition(":")
            if not host or not port.isdigit():
                raise ParameterError(f"endpoint {config.endpoint!r} is not host:port or stdio:CMD")
            self._transport = _TcpTransport(host, int(port), timeout_s)
        self._timeout_s = timeout_s
        self._ids = itertools.count(1)
        self._write_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._pending: dict[str, _Pending] = {}
        self._cache: dict[str, list] = {}
        self._dedup: dict[str, _Pending] = {}
        self._inflight = threading.BoundedSemaphore(config.max_inflight)
        self._fatal: Exception | None = None
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    # -- plumbing -----------------------------------------------------------

    def _read_loop(self):
        while True:
            try:
                line = self._transport.readline()
            except Exception as exc:  # socket torn down underneath us
                self._fail_all(TransportError(f"read failed: {exc}"))
                return
            if not line:
                if not self._closed:
                    self._fail_all(TransportError("server closed the connection"))
                return
            if not line.strip():
                continue
            try:
                message = protocol.decode(line)
            except ProtocolError as exc:
                self._fail_all(exc)
                return
            request_id = message.get("id")
            with self._state_lock:
                pending = self._pending.pop(request_id, None)
            if pending is None:
                self._fail_all(ProtocolError(f"response for unknown request id {request_id!r}"))
                return
            pending.payload = message
            pending.event.set()

    def _fail_all(self, error: Exception):
        with self._state_lock:
            self._fatal = error
            pending = list(self._pending.values())
            self._pending.clear()
        for item in pending:
            item.error = error
            item.event.set()

    def _roundtrip(self, message: dict) -> dict:
        if self._fatal is not None:
            raise self._fatal
        pending = _Pending()
        request_id = message["id"]
        with self._state_lock:
            self._pending[request_id] = pending
        with self._inflight:
            with self._write_lock:
                self._transport.send(protocol.encode(message))
            if not pending.event.wait(self._timeout_s):
                with self._state_lock:
                    self._pending.pop(request_id, None)
                raise TransportError(
                    f"request {request_id} timed out after {self.config.timeout_ms} ms"
                )
        if pending.error is not None:
            raise pending.error
        payload = pending.payload
        if "error" in payload:
            text = str(payload["error"])
            if text == "context_length":
                raise ContextLengthError(f"request {request_id}: input exceeds model context")
            raise ProtocolError(f"server error for request {request_id}: {text}")
        return payload

    # -- public surface -------------------------------------------------------

    def predict_masked(self, query: MaskedQuery) -> list:
        return self.query(query)

    def query(self, query: MaskedQuery) -> list:
        """One distribution per mask slot.

        Distinct queries hit the server at most once per client: results are
        cached on the canonical (tokens, mask_positions, top_k) key and
        concurrent identical queries share a single request.
        """
        if not query.tokens:
            raise ParameterError("query must be nonempty")
        key = json.dumps(
            [list(query.tokens), list(query.mask_positions), self.config.top_k]
        )
        with self._state_lock:
            if key in self._cache:
                return self._cache[key]
            waiter = self._dedup.get(key)
            owner = waiter is None
            if owner:
                waiter = self._dedup[key] = _Pending()
        if not owner:
            if not waiter.event.wait(self._timeout_s * 2):
                raise TransportError("timed out waiting on a deduplicated query")
            if waiter.error is not None:
                raise waiter.error
            return waiter.payload
        try:
            message = protocol.request_message(
                f"q{next(self._ids)}", query.tokens, query.mask_positions, self.config.top_k
            )
            payload = self._roundtrip(message)
            result = self._parse_distributions(payload, len(query.mask_positions))
            with self._state_lock:
                self._cache[key] = result
            waiter.payload = result
            return result
        except Exception as exc:
            waiter.error = exc
            raise
        finally:
            with self._state_lock:
                self._dedup.pop(key, None)
            waiter.event.set()

    def batch_query(self, queries: Sequence[MaskedQuery]) -> list[BatchResult]:
        """Results order-aligned with the inputs; failures carried per query."""
        results = [BatchResult() for _ in queries]

        def run(index: int, query: MaskedQuery):
            try:
                results[index].distributions = self.query(query)
            except Exception as exc:  # carried, not raised
                results[index].error = exc

        threads = [
            threading.Thread(target=run, args=(idx, query))
            for idx, query in enumerate(queries)
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        return results

    def tokenize(self, words: Sequence[str]) -> tuple[list[str], list[tuple[int, int]]]:
        """Server-side subword tokenization with word-to-token spans."""
        if not words:
            raise ParameterError("words must be nonempty")
        payload = self._roundtrip(protocol.tokenize_message(f"q{next(self._ids)}", words))
        try:
            tokens = [str(t) for t in payload["tokens"]]
            spans = [(int(a), int(b)) for a, b in payload["word_spans"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad tokenize response: {exc}") from None
        return tokens, spans

    def close(self):
        self._closed = True
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def identity(self) -> str:
        parts = [f"server:{self.config.endpoint}"]
        if self.config.top_k is not None:
            parts.append(f"top_k={self.config.top_k}")
        return ",".join(parts)

    # -- response parsing -----------------------------------------------------

    def _parse_distributions(self, payload: dict, n_slots: int) -> list:
        base = payload.get("base", "e")
        if base not in ("e", "2"):
            raise DataFormatError(f"unknown log base {base!r} in response")
        try:
            vocab_size = int(payload["vocab_size"])
        except (KeyError, TypeError, ValueError):
            raise ProtocolError("response missing integer vocab_size") from None
        if "log_probs" in payload:
            slots = payload["log_probs"]
            if len(slots) != n_slots:
                raise ProtocolError(f"expected {n_slots} slots, got {len(slots)}")
            return [self._full_distribution(slot, vocab_size, base) for slot in slots]
        if "top" in payload:
            tops = payload["top"]
            rests = payload.get("rest_mass")
            if len(tops) != n_slots or rests is None or len(rests) != n_slots:
                raise ProtocolError("top-k response slots misaligned")
            return [
                self._topk_distribution(top, rest, vocab_size, base)
                for top, rest in zip(tops, rests)
            ]
        raise ProtocolError("response carries neither log_probs nor top")

    @staticmethod
    def _to_log2(values: np.ndarray, base: str) -> np.ndarray:
        return values * _LN_TO_LOG2 if base == "e" else values

    def _full_distribution(self, slot, vocab_size: int, base: str) -> TokenDistribution:
        lp = np.asarray(slot, dtype=np.float64)
        if lp.shape != (vocab_size,):
            raise ProtocolError(f"slot vector length {lp.shape} != vocab_size {vocab_size}")
        if not np.all(np.isfinite(lp)):
            raise DataFormatError("non-finite log-probability in response")
        log2p = self._to_log2(lp, base)
        mass = float(np.exp2(log2p).sum())
        if abs(mass - 1.0) > _WIRE_MASS_TOL:
            raise DataFormatError(f"slot mass {mass} outside 1±{_WIRE_MASS_TOL}")
        # Mass inside the wire tolerance: renormalize exactly so downstream
        # KL consumers see the 1e-6 internal invariant.
        log2p = np.maximum(log2p - np.log2(mass), LOG2_FLOOR)
        return TokenDistribution(log2p)

    def _topk_distribution(self, top, rest, vocab_size: int, base: str) -> TopKDistribution:
        try:
            indices = tuple(int(i) for i, _ in top)
            logs = np.array([float(lp) for _, lp in top])
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"bad top-k pair: {exc}") from None
        probs = np.exp2(self._to_log2(logs, base))
        rest = float(rest)
        total = float(probs.sum()) + rest
        if abs(total - 1.0) > _WIRE_MASS_TOL:
            raise DataFormatError(f"top-k mass {total} outside 1±{_WIRE_MASS_TOL}")
        if rest < 0:
            raise DataFormatError(f"negative rest mass {rest}")
        # Renormalize within tolerance (same policy as full mode).
        return TopKDistribution(
            indices=indices,
            probs=tuple(float(p) / total for p in probs),
            rest_mass=rest / total,
            vocab_size=vocab_size,
        )


def connect(config: ServerConfig) -> LmClient:
    return LmClient(config)
