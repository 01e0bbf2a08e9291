"""Shared test utilities: scripted wire servers and synthetic data builders."""

from __future__ import annotations

import json
import socket
import threading

import numpy as np
import pandas as pd

from storecost import evaluation
from storecost.backends import TokenDistribution, Vocabulary


class ScriptedServer:
    """Line-JSON TCP server driven by a handler(message) -> dict | None.

    Returning None drops the request (for timeout tests). The handler may
    also return a list of dicts to emit several lines at once (out-of-order
    response tests). Counts every request it sees.
    """

    def __init__(self, handler):
        self.handler = handler
        self.requests: list[dict] = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(1)
        self.port = self._listener.getsockname()[1]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.port}"

    def _serve(self):
        try:
            conn, _ = self._listener.accept()
        except OSError:
            return
        with conn, conn.makefile("rb") as reader:
            for line in reader:
                if not line.strip():
                    continue
                message = json.loads(line)
                self.requests.append(message)
                out = self.handler(message)
                if out is None:
                    continue
                if isinstance(out, dict):
                    out = [out]
                for obj in out:
                    try:
                        conn.sendall((json.dumps(obj) + "\n").encode())
                    except OSError:
                        return

    def close(self):
        try:
            self._listener.close()
        except OSError:
            pass


def uniform_response(message: dict, vocab_size: int = 2) -> dict:
    """Full-mode response: uniform distribution per requested slot, base e."""
    lp = float(np.log(1.0 / vocab_size))
    return {
        "id": message["id"],
        "vocab_size": vocab_size,
        "base": "e",
        "log_probs": [[lp] * vocab_size for _ in message["mask_positions"]],
    }


class ConstantBackend:
    """Backend whose slot distributions ignore the input entirely."""

    def __init__(self, probs):
        self.dist = TokenDistribution.from_probs(probs)
        self.vocabulary = Vocabulary(tuple(f"t{i}" for i in range(len(probs))))

    def predict_masked(self, query):
        return [self.dist] * len(query.mask_positions)


def synthetic_table(
    rng: np.random.Generator,
    n_rows: int = 600,
    n_texts: int = 3,
    info_effect: float = 0.0,
    noise_sd: float = 1.0,
) -> evaluation.PredictorTable:
    """Predictor table with a known generative model for the target.

    rt_target = 400 + 3*zone_z + 2*position + 1.5*wlen + 4*unisurp
                + 5*gpt2_surp + info_effect * z(info_stor) + noise.
    """
    rows = []
    per_text = n_rows // n_texts
    for text in range(n_texts):
        for idx in range(per_text):
            rows.append(
                {
                    "text_id": f"t{text}",
                    "word_index": idx,
                    "sentence_id": idx // 10,
                    "word": "word",
                    "zone": float(idx),
                    "position": float(idx % 10 + 1),
                    "wlen": float(rng.integers(1, 12)),
                    "unisurp": float(rng.normal(10, 3)),
                    "gpt2_surp": float(rng.normal(6, 2)),
                    "dlt_stor": float(rng.integers(0, 6)),
                    "info_stor": float(rng.gamma(2.0, 2.0)),
                }
            )
    frame = pd.DataFrame(rows)
    info = frame["info_stor"].to_numpy()
    info_z = (info - info.mean()) / info.std()
    frame["rt_target"] = (
        400.0
        + 0.3 * frame["zone"]
        + 2.0 * frame["position"]
        + 1.5 * frame["wlen"]
        + 4.0 * frame["unisurp"]
        + 5.0 * frame["gpt2_surp"]
        + info_effect * info_z
        + rng.normal(0.0, noise_sd, size=len(frame))
    )
    frame = evaluation.add_spillover(frame)
    prev_cols = [f"prev_{c}" for c in evaluation.SPILLOVER_BASES]
    frame["usable"] = frame[prev_cols].notna().all(axis=1)
    return evaluation.PredictorTable(frame)
