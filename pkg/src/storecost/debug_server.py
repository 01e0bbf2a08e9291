"""Reference server exposing the internal backends over the wire protocol.

Useful for exercising the network path without a neural model and as the
stdio fixture for client tests:

    python -m storecost.debug_server --joint table.tsv --stdio
    python -m storecost.debug_server --corpus corpus.txt --order 2 --listen 127.0.0.1:9009

Words are their own tokens here, so the tokenize request returns the
identity alignment.
"""

from __future__ import annotations

import argparse
import socket
import sys

import numpy as np

from . import protocol
from .backends import MaskedQuery, MaskedNgramModel, load_corpus, load_joint_table
from .errors import StorecostError


class BackendServer:
    """Single-threaded request handler around any internal backend."""

    def __init__(self, backend, top_k_limit: int | None = None):
        self.backend = backend
        self.top_k_limit = top_k_limit

    def handle_line(self, line) -> bytes:
        try:
            message = protocol.check_request(protocol.decode(line))
        except StorecostError as exc:
            return protocol.encode({"id": "", "error": str(exc)})
        request_id = message["id"]
        try:
            if "words" in message:
                return protocol.encode(self._tokenize(request_id, message["words"]))
            return protocol.encode(self._predict(request_id, message))
        except StorecostError as exc:
            return protocol.encode({"id": request_id, "error": str(exc)})

    def _tokenize(self, request_id: str, words) -> dict:
        return {
            "id": request_id,
            "tokens": list(words),
            "word_spans": [[i, i + 1] for i in range(len(words))],
        }

    def _predict(self, request_id: str, message: dict) -> dict:
        query = MaskedQuery(tuple(message["tokens"]), tuple(message["mask_positions"]))
        distributions = self.backend.predict_masked(query)
        vocab_size = self.backend.vocabulary.size
        top_k = message.get("top_k")
        if top_k is None:
            return {
                "id": request_id,
                "vocab_size": vocab_size,
                "base": "2",
                "log_probs": [[float(v) for v in d.log_probs] for d in distributions],
            }
        k = min(int(top_k), vocab_size)
        if self.top_k_limit is not None:
            k = min(k, self.top_k_limit)
        tops, rests = [], []
        for dist in distributions:
            probs = dist.probs
            order = np.lexsort((np.arange(vocab_size), -probs))[:k]
            tops.append([[int(i), float(dist.log_probs[i])] for i in order])
            rests.append(max(float(1.0 - probs[order].sum()), 0.0))
        return {
            "id": request_id,
            "vocab_size": vocab_size,
            "base": "2",
            "top": tops,
            "rest_mass": rests,
        }


def serve_stdio(server: BackendServer, stdin=None, stdout=None):
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(server.handle_line(line))
        stdout.flush()


def serve_tcp(server: BackendServer, host: str, port: int, ready_callback=None):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        if ready_callback is not None:
            ready_callback(listener.getsockname()[1])
        while True:
            conn, _ = listener.accept()
            with conn, conn.makefile("rb") as reader:
                for line in reader:
                    if not line.strip():
                        continue
                    conn.sendall(server.handle_line(line))


def build_backend(args) -> BackendServer:
    if args.joint:
        return BackendServer(load_joint_table(args.joint))
    if args.corpus:
        corpus = load_corpus(args.corpus)
        return BackendServer(MaskedNgramModel.fit(corpus, order=args.order, alpha=args.alpha))
    raise SystemExit("one of --joint or --corpus is required")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--joint", help="exact joint table (sequence<TAB>probability)")
    parser.add_argument("--corpus", help="n-gram training corpus (one sequence per line)")
    parser.add_argument("--order", type=int, default=2)
    parser.add_argument("--alpha", type=float, default=0.5)
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--listen", help="host:port to listen on")
    mode.add_argument("--stdio", action="store_true", help="serve over stdin/stdout")
    args = parser.parse_args(argv)
    server = build_backend(args)
    if args.stdio:
        serve_stdio(server)
        return 0
    host, _, port = args.listen.rpartition(":")
    serve_tcp(server, host or "127.0.0.1", int(port))
    return 0


if __name__ == "__main__":
    sys.exit(main())
