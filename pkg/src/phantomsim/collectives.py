"""Deterministic simulated rank group and the collective timing model.

Provides Broadcast, All-Gather, All-Reduce and Reduce-Scatter over p
in-process ranks, records every message, and evaluates or fits the
latency/bandwidth timing model

    time_us(m, p) = c1 * log2(p) + c2 * m + c3

for each collective. Two schedulers share one rendezvous implementation:

* ``lockstep`` (default): exactly one rank executes at any instant and the
  scheduler advances ranks round-robin to the next collective boundary.
  Execution order is fully deterministic and a rank that exits while peers
  still wait inside a collective is reported as a deadlock.
* ``threads``: one free-running task per rank with blocking channel-style
  rendezvous and a timeout backstop.

Reductions are always evaluated in ascending rank order, so both modes
produce bit-identical results and record streams.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FitError, ProtocolError


class Collective(Enum):
    BROADCAST = "broadcast"
    ALL_GATHER = "all_gather"
    ALL_REDUCE = "all_reduce"
    REDUCE_SCATTER = "reduce_scatter"


class Direction(Enum):
    """Tag recorded with each collective. LOSS marks the per-iteration scalar
    loss reduction, which sits outside the per-layer schedule."""

    FORWARD = "forward"
    BACKWARD = "backward"
    LOSS = "loss"


@dataclass(frozen=True)
class CommRecord:
    seq: int
    collective: Collective
    message_size: int  # elements per rank
    direction: Direction | None = None
    layer: int | None = None


class _SecondaryAbort(ProtocolError):
    """Raised in ranks that were parked when another rank failed first."""


class _Pending:
    """One collective being assembled: per-rank mailboxes plus result slots."""

    __slots__ = ("seq", "kind", "root", "direction", "layer",
                 "slots", "entered", "arrived", "results", "done", "error")

    def __init__(self, seq, kind, root, direction, layer, world_size):
        self.seq = seq
        self.kind = kind
        self.root = root
        self.direction = direction
        self.layer = layer
        self.slots = [None] * world_size
        self.entered = [False] * world_size
        self.arrived = 0
        self.results = None
        self.done = False
        self.error = None


class Communicator:
    """Simulated group of ``world_size`` ranks with blocking collectives.

    Every collective must be entered by all ranks with the same sequence
    number, kind and (for broadcast) root; violations raise ProtocolError
    on every participant. Completed collectives append a CommRecord to
    ``records`` in sequence order.
    """

    def __init__(self, world_size: int, mode: str = "lockstep", timeout: float = 120.0):
        if world_size < 1:
            raise ConfigurationError("world_size must be >= 1")
        if mode not in ("lockstep", "threads"):
            raise ConfigurationError(f"unknown scheduler mode: {mode!r}")
        self.world_size = world_size
        self.mode = mode
        self.timeout = timeout
        self.records: list[CommRecord] = []
        self._cv = threading.Condition()
        self._seq = 0
        self._pending: _Pending | None = None
        self._turn = 0
        self._finished = [True] * world_size  # no run in flight yet
        self._failure: BaseException | None = None

    # ------------------------------------------------------------------
    # public collectives

    def all_gather(self, rank: int, local, *, direction=None, layer=None) -> np.ndarray:
        """Concatenation, in ascending rank order along axis 0, of every
        rank's equally shaped local block. Message size is the per-rank
        block element count."""
        return self._collective(rank, Collective.ALL_GATHER, self._payload(local),
                                direction=direction, layer=layer)

    def reduce_scatter(self, rank: int, contributions, *, direction=None, layer=None) -> np.ndarray:
        """Splits each rank's contribution into p equal chunks along axis 0
        and returns to rank j the ascending-rank-order sum of chunk j.
        Message size is one chunk's element count."""
        return self._collective(rank, Collective.REDUCE_SCATTER, self._payload(contributions),
                                direction=direction, layer=layer)

    def broadcast(self, rank: int, root: int, payload=None, *, direction=None, layer=None) -> np.ndarray:
        """Every rank returns the root's payload. Non-root ranks may pass
        None. All ranks must agree on the root."""
        if not 0 <= root < self.world_size:
            raise ConfigurationError(f"broadcast root {root} out of range")
        data = self._payload(payload) if payload is not None else None
        return self._collective(rank, Collective.BROADCAST, data, root=root,
                                direction=direction, layer=layer)

    def all_reduce(self, rank: int, local, *, direction=None, layer=None) -> np.ndarray:
        """Elementwise sum over all ranks, evaluated in ascending rank order
        for bit reproducibility."""
        return self._collective(rank, Collective.ALL_REDUCE, self._payload(local),
                                direction=direction, layer=layer)

    # ------------------------------------------------------------------
    # running rank programs

    def run(self, fn, *args, **kwargs) -> list:
        """Execute ``fn(comm, rank, *args, **kwargs)`` on every rank.

        Returns the per-rank return values. The first failing rank's
        exception is re-raised in the caller; peers receive an abort.
        """
        p = self.world_size
        with self._cv:
            if self._pending is not None:
                raise ProtocolError("a previous run left a collective pending")
            self._finished = [False] * p
            self._turn = 0
            self._failure = None
        results = [None] * p
        errors: list[tuple[int, BaseException]] = []

        def worker(rank: int) -> None:
            failed = False
            try:
                if self.mode == "lockstep":
                    with self._cv:
                        self._wait_locked(lambda: self._turn == rank, f"rank {rank} start")
                results[rank] = fn(self, rank, *args, **kwargs)
            except BaseException as exc:
                failed = True
                with self._cv:
                    errors.append((rank, exc))
                    if self._failure is None:
                        self._failure = exc
                    self._cv.notify_all()
            finally:
                self._rank_finished(rank, failed)

        if p == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
                       for r in range(p)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        primary = sorted((r, e) for r, e in errors if not isinstance(e, _SecondaryAbort))
        if primary:
            raise primary[0][1]
        if errors:
            raise errors[0][1]
        return results

    # ------------------------------------------------------------------
    # rendezvous internals

    @staticmethod
    def _payload(x) -> np.ndarray:
        arr = np.ascontiguousarray(x, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ConfigurationError("collective payloads must be 1-d or 2-d")
        return arr

    def _wait_locked(self, pred, what: str) -> None:
        deadline = time.monotonic() + self.timeout
        while True:
            if pred():
                return
            if self._failure is not None:
                raise _SecondaryAbort(f"aborted while waiting for {what}: {self._failure}")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                err = ProtocolError(
                    f"timeout after {self.timeout:.0f}s waiting for {what} (possible deadlock)")
                self._fail_async(err)
                raise err
            self._cv.wait(remaining)

    def _fail_async(self, err: BaseException) -> None:
        if self._failure is None:
            self._failure = err
        if self._pending is not None and self._pending.error is None:
            self._pending.error = err
        self._cv.notify_all()

    def _fail(self, err: BaseException) -> None:
        self._fail_async(err)
        raise err

    def _advance_token(self) -> None:
        """Hand the lockstep token to the lowest runnable rank; detect the
        case where a pending collective can never complete."""
        pend = self._pending
        if pend is not None:
            for r in range(self.world_size):
                if not pend.entered[r] and not self._finished[r]:
                    self._turn = r
                    self._cv.notify_all()
                    return
            missing = [r for r in range(self.world_size) if not pend.entered[r]]
            self._fail_async(ProtocolError(
                f"deadlock at collective seq {pend.seq} ({pend.kind.value}): "
                f"rank(s) {missing} finished without entering"))
            return
        for r in range(self.world_size):
            if not self._finished[r]:
                self._turn = r
                self._cv.notify_all()
                return
        self._cv.notify_all()  # everyone done

    def _rank_finished(self, rank: int, failed: bool = False) -> None:
        with self._cv:
            self._finished[rank] = True
            pend = self._pending
            if pend is not None and not pend.entered[rank] and not failed:
                # a cleanly finished rank owes peers a contribution that
                # will never arrive; a failed rank already set the failure
                self._fail_async(ProtocolError(
                    f"deadlock at collective seq {pend.seq} ({pend.kind.value}): "
                    f"rank {rank} finished without entering"))
            elif self.mode == "lockstep" and not failed:
                self._advance_token()
            else:
                self._cv.notify_all()

    def _collective(self, rank, kind, payload, *, root=None, direction=None, layer=None):
        if not 0 <= rank < self.world_size:
            raise ConfigurationError(f"rank {rank} out of range for world size {self.world_size}")
        with self._cv:
            if self._failure is not None:
                raise _SecondaryAbort(f"aborted: {self._failure}")
            if self._pending is None:
                self._pending = _Pending(self._seq, kind, root, direction, layer, self.world_size)
            pend = self._pending
            if pend.kind is not kind:
                self._fail(ProtocolError(
                    f"collective mismatch at seq {pend.seq}: rank {rank} called "
                    f"{kind.value} while {pend.kind.value} is in progress"))
            if kind is Collective.BROADCAST and pend.root != root:
                self._fail(ProtocolError(
                    f"broadcast root mismatch at seq {pend.seq}: rank {rank} "
                    f"passed root {root}, expected {pend.root}"))
            if (pend.direction, pend.layer) != (direction, layer):
                self._fail(ProtocolError(
                    f"record tag mismatch at seq {pend.seq} on rank {rank}"))
            if pend.entered[rank]:
                self._fail(ProtocolError(f"rank {rank} entered seq {pend.seq} twice"))
            pend.entered[rank] = True
            pend.slots[rank] = payload
            pend.arrived += 1
            if pend.arrived == self.world_size:
                self._complete(pend)
            else:
                if self.mode == "lockstep":
                    self._advance_token()
                self._wait_locked(lambda: pend.done or pend.error is not None,
                                  f"collective seq {pend.seq} ({kind.value})")
            if pend.error is not None:
                raise pend.error
            if self.mode == "lockstep":
                # leave the rendezvous one rank at a time, in rank order
                self._wait_locked(lambda: self._turn == rank,
                                  f"exit of collective seq {pend.seq}")
            return pend.results[rank]

    def _complete(self, pend: _Pending) -> None:
        try:
            results, msize = self._combine(pend)
        except ProtocolError as err:
            pend.error = err
            self._fail(err)
        self.records.append(CommRecord(pend.seq, pend.kind, msize,
                                       pend.direction, pend.layer))
        self._seq += 1
        pend.results = results
        pend.done = True
        self._pending = None
        if self.mode == "lockstep":
            self._advance_token()
        self._cv.notify_all()

    def _combine(self, pend: _Pending) -> tuple[list[np.ndarray], int]:
        p = self.world_size
        slots = pend.slots
        if pend.kind is Collective.BROADCAST:
            payload = slots[pend.root]
            if payload is None:
                raise ProtocolError(f"broadcast root {pend.root} passed no payload")
            return [payload.copy() for _ in range(p)], payload.size
        shapes = {s.shape for s in slots}
        if len(shapes) != 1:
            raise ProtocolError(
                f"{pend.kind.value} shape disagreement at seq {pend.seq}: {sorted(shapes)}")
        if pend.kind is Collective.ALL_GATHER:
            out = np.concatenate(slots, axis=0)
            return [out.copy() for _ in range(p)], slots[0].size
        if pend.kind is Collective.ALL_REDUCE:
            acc = slots[0].copy()
            for s in slots[1:]:  # ascending rank order
                acc += s
            return [acc.copy() for _ in range(p)], slots[0].size
        # reduce-scatter
        rows = slots[0].shape[0]
        if rows % p != 0:
            raise ProtocolError(
                f"reduce_scatter chunk-count mismatch: {rows} rows not divisible by p={p}")
        chunk = rows // p
        results = []
        for j in range(p):
            acc = slots[0][j * chunk:(j + 1) * chunk].copy()
            for s in slots[1:]:  # ascending rank order
                acc += s[j * chunk:(j + 1) * chunk]
            results.append(acc)
        return results, results[0].size


# ----------------------------------------------------------------------
# analytic timing model


@dataclass(frozen=True)
class CollectiveCost:
    """Per-collective constants of the timing model, in microseconds."""

    c1: float  # latency coefficient (per log2 p)
    c2: float  # per-element coefficient
    c3: float = 0.0  # constant overhead, ~0 in practice

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigurationError("c1 and c2 must be nonnegative")


@dataclass
class CommCostModel:
    """Timing constants for each collective plus the fit quality that
    produced them (log2 of the RMSE in microseconds, when known)."""

    costs: dict[Collective, CollectiveCost]
    rmse_log2_us: dict[Collective, float] = field(default_factory=dict)

    def time_us(self, collective, m: int, p: int) -> float:
        return comm_time(self, collective, m, p)


def comm_time(model: CommCostModel, collective, m: int, p: int) -> float:
    """Modeled duration of one collective in microseconds:
    c1 * log2(p) + c2 * m + c3."""
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    if m < 0:
        raise ConfigurationError("message size must be >= 0")
    kind = Collective(collective)
    try:
        cost = model.costs[kind]
    except KeyError:
        raise ConfigurationError(f"no timing constants for collective {kind.value}") from None
    return cost.c1 * math.log2(p) + cost.c2 * m + cost.c3


DEFAULT_MODEL_RESOURCE = "data/default_comm_model.ini"
_default_model_cache: CommCostModel | None = None


def default_model_path() -> Path:
    """Filesystem path of the packaged default cost-model file."""
    return Path(resources.files("phantomsim").joinpath(DEFAULT_MODEL_RESOURCE))


def default_comm_model() -> CommCostModel:
    """The shipped default timing constants (see data/default_comm_model.ini)."""
    global _default_model_cache
    if _default_model_cache is None:
        _default_model_cache = load_comm_model(default_model_path())
    return _default_model_cache


def load_comm_model(path) -> CommCostModel:
    """Read a cost-model file: one [collective] section per collective with
    keys c1, c2, c3 and optionally rmse_log2_us."""
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cost-model file not found: {path}")
    costs: dict[Collective, CollectiveCost] = {}
    rmse: dict[Collective, float] = {}
    for section in parser.sections():
        try:
            kind = Collective(section)
        except ValueError:
            raise ConfigurationError(f"{path}: unknown collective section [{section}]") from None
        try:
            c1 = parser.getfloat(section, "c1")
            c2 = parser.getfloat(section, "c2")
            c3 = parser.getfloat(section, "c3", fallback=0.0)
        except ValueError as exc:
            raise ConfigurationError(f"{path}: bad value in [{section}]: {exc}") from None
        costs[kind] = CollectiveCost(c1, c2, c3)
        if parser.has_option(section, "rmse_log2_us"):
            rmse[kind] = parser.getfloat(section, "rmse_log2_us")
    missing = [k.value for k in Collective if k not in costs]
    if missing:
        raise ConfigurationError(f"{path}: missing sections for {missing}")
    return CommCostModel(costs, rmse)


def save_comm_model(model: CommCostModel, path) -> None:
    """Write a cost-model file in the same format load_comm_model reads."""
    lines = [
        "# Collective timing constants, microseconds.",
        "# time_us = c1 * log2(p) + c2 * m + c3   (m = message elements per rank)",
        "",
    ]
    for kind in Collective:
        cost = model.costs[kind]
        lines.append(f"[{kind.value}]")
        lines.append(f"c1 = {cost.c1!r}")
        lines.append(f"c2 = {cost.c2!r}")
        lines.append(f"c3 = {cost.c3!r}")
        if kind in model.rmse_log2_us:
            lines.append(f"rmse_log2_us = {model.rmse_log2_us[kind]!r}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def fit_comm_model(samples) -> CommCostModel:
    """Least-squares fit of (c1, c2, c3) per collective in linear
    microsecond space on regressors (log2 p, m, 1).

    ``samples`` is an iterable of (collective, m, p, time_us). Each
    collective needs at least 3 samples spanning at least 2 distinct p and
    2 distinct m, otherwise the design is rank deficient. c1 and c2 are
    clamped at zero. RMSE is computed in microseconds and stored as
    log2(RMSE) per collective.
    """
    groups: dict[Collective, list[tuple[float, float, float]]] = {}
    for coll, m, p, t in samples:
        groups.setdefault(Collective(coll), []).append((float(m), float(p), float(t)))
    if not groups:
        raise FitError("no samples supplied")
    costs: dict[Collective, CollectiveCost] = {}
    rmses: dict[Collective, float] = {}
    for kind, rows in groups.items():
        ps = {p for _, p, _ in rows}
        ms = {m for m, _, _ in rows}
        if len(rows) < 3 or len(ps) < 2 or len(ms) < 2:
            raise FitError(
                f"{kind.value}: need >= 3 samples spanning >= 2 distinct p and "
                f"2 distinct m (got {len(rows)} samples, {len(ps)} p, {len(ms)} m)")
        design = np.array([[math.log2(p), m, 1.0] for m, p, _ in rows])
        target = np.array([t for _, _, t in rows])
        if np.linalg.matrix_rank(design) < 3:
            raise FitError(f"{kind.value}: rank-deficient regressor set")
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        if coef[0] < 0 or coef[1] < 0:
            from scipy.optimize import lsq_linear

            bounded = lsq_linear(design, target,
                                 bounds=([0.0, 0.0, -np.inf], [np.inf, np.inf, np.inf]))
            coef = bounded.x
        resid = design @ coef - target
        rmse = float(np.sqrt(np.mean(resid ** 2)))
        costs[kind] = CollectiveCost(max(float(coef[0]), 0.0),
                                     max(float(coef[1]), 0.0), float(coef[2]))
        rmses[kind] = math.log2(rmse) if rmse > 0 else float("-inf")
    return CommCostModel(costs, rmses)


def load_measurements(path) -> list[tuple[Collective, float, int, float]]:
    """Read delimited measurement samples with header
    collective,m,p,time_us. Malformed rows report their line number."""
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["collective", "m", "p", "time_us"]
        if header is None or [h.strip().lower() for h in header] != expected:
            raise ConfigurationError(f"{path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                kind = Collective(row[0].strip())
                m = float(row[1])
                p = int(row[2])
                t = float(row[3])
            except (ValueError, IndexError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed row: {exc}") from None
            samples.append((kind, m, p, t))
    return samples
