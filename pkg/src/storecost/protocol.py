"""Wire protocol shared by the masked-LM client and servers.

Framing: UTF-8 JSON objects, one per line, LF-terminated.

Request: ``{"id": str, "tokens": [str], "mask_positions": [int], "top_k": int|null}``
Tokenize request: ``{"id": str, "words": [str]}``
Full response: ``{"id", "vocab_size", "log_probs": [[float]*vocab per slot], "base"}``
Top-k response: ``{"id", "vocab_size", "top": [[[index, log_prob]]*k per slot],
"rest_mass": [float per slot], "base"}``
Tokenize response: ``{"id", "tokens": [str], "word_spans": [[start, end)]}``
Error response: ``{"id", "error": str}``

``base`` declares the log base of the probabilities: "e" (default when
absent) or "2".
"""

from __future__ import annotations

import json

from .errors import ProtocolError

MASK = "[MASK]"


def encode(obj: dict) -> bytes:
    return (json.dumps(obj) + "\n").encode("utf-8")


def decode(line) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON line: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("wire messages must be JSON objects")
    return obj


def request_message(request_id: str, tokens, mask_positions, top_k=None) -> dict:
    return {
        "id": request_id,
        "tokens": list(tokens),
        "mask_positions": [int(p) for p in mask_positions],
        "top_k": None if top_k is None else int(top_k),
    }


def tokenize_message(request_id: str, words) -> dict:
    return {"id": request_id, "words": list(words)}


def check_request(obj: dict) -> dict:
    """Validate an incoming request (server side). Returns the object."""
    if "id" not in obj or not isinstance(obj["id"], str):
        raise ProtocolError("request must carry a string id")
    if "words" in obj:
        if not isinstance(obj["words"], list) or not obj["words"]:
            raise ProtocolError("tokenize request needs a nonempty word list")
        return obj
    for key in ("tokens", "mask_positions"):
        if key not in obj or not isinstance(obj[key], list):
            raise ProtocolError(f"request missing list field {key!r}")
    positions = obj["mask_positions"]
    if any(int(b) <= int(a) for a, b in zip(positions, positions[1:])):
        raise ProtocolError("mask_positions must be strictly increasing")
    for pos in positions:
        if not 0 <= int(pos) < len(obj["tokens"]):
            raise ProtocolError(f"mask position {pos} out of range")
        if obj["tokens"][int(pos)] != MASK:
            raise ProtocolError(f"position {pos} does not hold {MASK!r}")
    top_k = obj.get("top_k")
    if top_k is not None and int(top_k) < 2:
        raise ProtocolError("top_k must be >= 2 when set")
    return obj
