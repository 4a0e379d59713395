"""Untrusted compute node.

A worker stores one blinded operand pair per (layer, shard) slot,
multiplies on request, and hands the pair's reuse products back during
the backward pass without ever seeing a plaintext.  Requests on a
connection are answered strictly in arrival order and every reply
carries the sequence number of the request it answers.

For experiments the worker can also misbehave on purpose: "tamper"
perturbs one entry of a result, "lazy" returns a stale result of the
right shape (or zeros) instead of computing.
"""
from __future__ import annotations

import socket
import threading
from dataclasses import dataclass

import numpy as np

from . import protocol
from .protocol import (
    Config,
    Error,
    Hello,
    MultBwd,
    MultFwd,
    Result,
    StorePair,
    ERR_BAD_ORDER,
    ERR_CACHE_MISS,
    ERR_SHAPE,
)
from .tensor import make_rng

__all__ = [
    "WorkerMode",
    "apply_adversary",
    "WorkerSession",
    "WorkerServer",
    "spawn_local_workers",
    "run_worker",
]


@dataclass(frozen=True)
class WorkerMode:
    kind: str = "honest"  # "honest" | "tamper" | "lazy"
    probability: float = 0.0
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("honest", "tamper", "lazy"):
            raise ValueError(f"unknown worker mode {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")

    @classmethod
    def honest(cls):
        return cls("honest")

    @classmethod
    def tamper(cls, probability: float, magnitude: float = 1.0):
        return cls("tamper", probability, magnitude)

    @classmethod
    def lazy(cls, probability: float):
        return cls("lazy", probability)


def apply_adversary(
    mode: WorkerMode,
    honest_result: np.ndarray,
    rng: np.random.Generator,
    last_by_shape: dict | None = None,
) -> np.ndarray:
    """Possibly corrupt one result matrix according to the worker mode.

    Tampering adds `magnitude` to a single uniformly chosen entry.
    Laziness substitutes the previously returned matrix of the same
    shape, or zeros if there is none; `last_by_shape` holds that history
    and is updated with whatever is actually returned.
    """
    out = honest_result
    if mode.kind == "tamper" and rng.random() < mode.probability:
        out = honest_result.copy()
        i = int(rng.integers(out.shape[0]))
        j = int(rng.integers(out.shape[1]))
        out[i, j] += mode.magnitude
    elif mode.kind == "lazy" and rng.random() < mode.probability:
        if last_by_shape is not None and honest_result.shape in last_by_shape:
            out = last_by_shape[honest_result.shape]
        else:
            out = np.zeros_like(honest_result)
    if last_by_shape is not None:
        last_by_shape[honest_result.shape] = out
    return out


class WorkerSession:
    """Message handler for one connection; no sockets in here so the
    logic is testable directly."""

    def __init__(self, mode: WorkerMode, rng: np.random.Generator):
        self.mode = mode
        self.rng = rng
        self.worker_id: int | None = None
        self.n_layers: int | None = None
        # (layer, shard) -> [a_enc, b_enc, multiplied_flag]
        self.cache: dict[tuple[int, int], list] = {}
        self.last_by_shape: dict = {}
        self._next_tag = 0

    def _ack(self, tag: int) -> Result:
        return Result(tag, ())

    def handle(self, msg):
        """Process one request, returning the reply message."""
        tag = self._next_tag
        self._next_tag += 1
        if isinstance(msg, Hello):
            self.worker_id = msg.worker_id
            return self._ack(tag)
        if isinstance(msg, Config):
            self.n_layers = msg.n_layers
            return self._ack(tag)
        if isinstance(msg, StorePair):
            if msg.a_enc.shape[1] != msg.b_enc.shape[0]:
                return Error(
                    ERR_SHAPE,
                    f"stored operands do not chain: {msg.a_enc.shape} x {msg.b_enc.shape}",
                )
            self.cache[(msg.layer_id, msg.shard_id)] = [msg.a_enc, msg.b_enc, False]
            return self._ack(tag)
        if isinstance(msg, MultFwd):
            slot = self.cache.get((msg.layer_id, msg.shard_id))
            if slot is None:
                return Error(
                    ERR_CACHE_MISS,
                    f"no stored pair for layer {msg.layer_id} shard {msg.shard_id}",
                )
            a_enc, b_enc, _ = slot
            product = self._emit(a_enc @ b_enc)
            slot[2] = True
            return Result(tag, (product,))
        if isinstance(msg, MultBwd):
            slot = self.cache.get((msg.layer_id, msg.shard_id))
            if slot is None:
                return Error(
                    ERR_CACHE_MISS,
                    f"no stored pair for layer {msg.layer_id} shard {msg.shard_id}",
                )
            a_enc, b_enc, multiplied = slot
            if not multiplied:
                return Error(
                    ERR_BAD_ORDER,
                    f"backward request before forward for layer {msg.layer_id} "
                    f"shard {msg.shard_id}",
                )
            d = msg.d_enc
            if d.shape[0] != b_enc.shape[1] or d.shape[1] != a_enc.shape[0]:
                return Error(
                    ERR_SHAPE,
                    f"backward operand {d.shape} does not match cached pair "
                    f"{a_enc.shape} x {b_enc.shape}",
                )
            t1 = self._emit(b_enc @ d)
            t2 = self._emit(d @ a_enc)
            return Result(tag, (t1, t2))
        return Error(protocol.ERR_UNSUPPORTED, f"unexpected message {type(msg).__name__}")

    def _emit(self, honest: np.ndarray) -> np.ndarray:
        return apply_adversary(self.mode, honest, self.rng, self.last_by_shape)


class WorkerServer:
    """Threaded TCP server; one WorkerSession per connection."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 mode: WorkerMode | None = None, seed: int = 0):
        self.mode = mode or WorkerMode.honest()
        self.seed = seed
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self.address: tuple[str, int] = self._listener.getsockname()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._stopping = False
        self._conn_count = 0

    def start(self) -> "WorkerServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            # distinct rng per connection keeps adversary draws reproducible
            rng = make_rng(self.seed + 1000003 * self._conn_count)
            self._conn_count += 1
            t = threading.Thread(target=self._serve, args=(conn, rng), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket, rng: np.random.Generator):
        session = WorkerSession(self.mode, rng)
        try:
            with conn:
                while True:
                    try:
                        msg = protocol.read_message(conn)
                    except (ConnectionError, OSError):
                        return
                    except protocol.ProtocolError as exc:
                        protocol.send_message(
                            conn, Error(protocol.ERR_UNSUPPORTED, str(exc))
                        )
                        return
                    protocol.send_message(conn, session.handle(msg))
        except (ConnectionError, OSError):
            return

    def serve_forever(self):
        self.start()
        assert self._accept_thread is not None
        self._accept_thread.join()

    def stop(self):
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=1.0)


class spawn_local_workers:
    """Context manager starting n loopback workers for tests and the
    --local-workers CLI flag; yields their addresses."""

    def __init__(self, n: int, mode: WorkerMode | None = None, seed: int = 0):
        self.servers = [
            WorkerServer(mode=mode, seed=seed + i).start() for i in range(n)
        ]
        self.addresses = [s.address for s in self.servers]

    def __enter__(self) -> list[tuple[str, int]]:
        return self.addresses

    def __exit__(self, *exc):
        self.stop()
        return False

    def stop(self):
        for s in self.servers:
            s.stop()


def run_worker(host: str, port: int, mode: WorkerMode, seed: int = 0) -> None:
    """Blocking entry point used by the CLI."""
    server = WorkerServer(host, port, mode, seed)
    print(f"worker listening on {server.address[0]}:{server.address[1]} "
          f"mode={mode.kind}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
