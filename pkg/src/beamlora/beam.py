"""Periodic prune/expand of LoRA ranks under a cosine-annealed Top-P threshold.

Every ``delta_t`` optimizer steps (inside the operation window) each adapter's
normalised scores are sorted, the threshold ``p`` decides how many ranks are
operable (``K``), the ``K`` weakest ranks are overwritten with mid-interval
copies of the ``K`` strongest ranks (parameters and Adam moments), and the
score logits of every pair are averaged. Mid-interval copies are captured at
``last_op + delta_t // 2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from beamlora.adapter import LoraAdapter, zero_ranks
from beamlora.optim import AdamState, write_moments, zero_moments
from beamlora.tensor import ContractError

logger = logging.getLogger(__name__)

MODES = ("beamlora", "static_p", "prune_only", "random_select")
_CUMSUM_TOL = 1e-12
_NORM_TOL = 1e-9


@dataclass(frozen=True)
class BeamSchedule:
    p_init: float
    delta_t: int
    total_steps: int
    op_window_end: int | None = None

    def __post_init__(self):
        if not 0.0 < self.p_init < 1.0:
            raise ValueError(f"p_init must lie in (0, 1), got {self.p_init}")
        if self.delta_t < 2:
            raise ValueError(f"delta_t must be at least 2, got {self.delta_t}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.op_window_end is None:
            object.__setattr__(self, "op_window_end", (2 * self.total_steps) // 3)
        if not 0 <= self.op_window_end <= self.total_steps:
            raise ValueError(f"op_window_end {self.op_window_end} outside [0, {self.total_steps}]")

    def operation_steps(self) -> list[int]:
        return list(range(self.delta_t, self.op_window_end + 1, self.delta_t))


def threshold_at(t: int, schedule: BeamSchedule) -> float:
    T = schedule.total_steps
    if not 0 <= t <= T:
        raise ContractError(f"step {t} outside [0, {T}]")
    if t == T:
        return 1.0
    p0 = schedule.p_init
    return p0 + 0.5 * (1.0 - p0) * (1.0 - math.cos(math.pi * t / T))


def _check_probability(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError(f"scores must be a non-empty vector, got shape {s.shape}")
    if np.any(s < 0) or abs(float(np.sum(s)) - 1.0) > _NORM_TOL:
        raise ContractError(f"scores are not a probability vector (sum={np.sum(s)!r})")
    return s


def operable_count(s: np.ndarray, p: float) -> int:
    """Number of ranks to prune (and expand) at threshold ``p``.

    ``i*`` is the smallest 1-based prefix of the descending scores whose mass
    reaches ``p``; every rank after it is operable. ``K = r - i*`` clamped to
    ``[0, r // 2]`` so that the prune and expand sets can be disjoint.
    """
    s = _check_probability(s)
    if p >= 1.0:
        return 0
    r = s.size
    csum = np.cumsum(np.sort(s)[::-1])
    hits = np.nonzero(csum >= p - _CUMSUM_TOL)[0]
    i_star = int(hits[0]) + 1 if hits.size else r
    return max(0, min(r - i_star, r // 2))


def select_sets(s: np.ndarray, K: int) -> tuple[list[int], list[int]]:
    """``(I_p, I_e)``: the K weakest (weakest first) and K strongest (strongest first).

    Ties go to the lower index; the strongest set is drawn from the ranks left
    after the weakest are taken, so the sets stay disjoint under full ties.
    """
    s = np.asarray(s, dtype=np.float64)
    r = s.size
    if not 0 <= K <= r // 2:
        raise ContractError(f"K={K} outside [0, {r // 2}]")
    if K == 0:
        return [], []
    weakest = sorted(range(r), key=lambda i: (s[i], i))[:K]
    taken = set(weakest)
    strongest = sorted((i for i in range(r) if i not in taken), key=lambda i: (-s[i], i))[:K]
    return weakest, strongest


@dataclass
class Snapshot:
    step: int
    params: dict[str, dict[str, np.ndarray]]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class OperationEvent:
    step: int
    adapter: str
    p: float
    K: int
    I_p: list[int]
    I_e: list[int]
    pairs: list[tuple[int, int]]
    mode: str = "beamlora"
    scores: list[float] = field(default_factory=list)
    snapshot_step: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(pr) for pr in self.pairs]
        return d


def snapshot_step(last_op_step: int, delta_t: int) -> int:
    return last_op_step + delta_t // 2


def capture_snapshot(
    step: int,
    adapters: dict[str, LoraAdapter],
    state: AdamState,
    last_op_step: int | None = None,
    delta_t: int | None = None,
) -> Snapshot:
    """Deep-copy adapter parameters and their Adam moments.

    When ``last_op_step`` and ``delta_t`` are given the call is checked
    against the half-interval schedule.
    """
    if last_op_step is not None and delta_t is not None and step != snapshot_step(last_op_step, delta_t):
        raise ContractError(
            f"snapshot at step {step} is off-schedule; expected {snapshot_step(last_op_step, delta_t)}"
        )
    params = {}
    moments = {}
    for name, ad in adapters.items():
        params[name] = {"B": ad.B.data.copy(), "A": ad.A.data.copy(), "s_logits": ad.s_logits.data.copy()}
        for role in ("B", "A", "s_logits"):
            tid = f"{name}.{role}"
            if tid in state.M:
                moments[tid] = (state.M[tid].copy(), state.V[tid].copy())
    return Snapshot(step, params, moments)


def _ensure_moments(state: AdamState, name: str, adapter: LoraAdapter) -> None:
    for role, t in adapter.parameters().items():
        state.ensure(f"{name}.{role}", t.data)


def prune_expand(
    adapter: LoraAdapter,
    state: AdamState,
    snapshot: Snapshot | None,
    I_p: Sequence[int],
    I_e: Sequence[int],
    name: str = "layer0",
    step: int = 0,
    p: float = float("nan"),
    mode: str = "beamlora",
) -> OperationEvent | None:
    """Transplant snapshot ranks ``I_e`` into slots ``I_p`` and average the pair's score logits.

    ``I_p`` is weakest-first and ``I_e`` strongest-first, so position ``k``
    of each forms a pair. With ``mode="prune_only"`` the ``I_p`` ranks are
    zeroed (parameters and moments) and nothing is expanded.
    """
    I_p, I_e = [int(i) for i in I_p], [int(i) for i in I_e]
    if len(I_p) != len(I_e) or set(I_p) & set(I_e) or len(set(I_p)) != len(I_p) or len(set(I_e)) != len(I_e):
        raise ContractError(f"prune set {I_p} and expand set {I_e} must be disjoint and of equal size")
    for i in I_p + I_e:
        adapter._check_index(i)
    scores = adapter.scores().tolist()
    pairs = list(zip(I_p, I_e))
    event = OperationEvent(step, name, float(p), len(I_p), I_p, I_e, pairs, mode, scores,
                           None if snapshot is None else snapshot.step)
    if not pairs:
        return event
    _ensure_moments(state, name, adapter)
    bid, aid, sid = f"{name}.B", f"{name}.A", f"{name}.s_logits"

    if mode == "prune_only":
        zero_ranks(adapter, I_p)
        for i in I_p:
            zero_moments(state, bid, i)
            zero_moments(state, aid, i)
        event.pairs = []
        return event

    if snapshot is None or name not in snapshot.params:
        logger.warning("step %d: no snapshot for %s; prune/expand skipped", step, name)
        return None
    hist = snapshot.params[name]
    zero = (np.zeros_like(state.M[bid]), np.zeros_like(state.V[bid]))
    hist_mb, hist_vb = snapshot.moments.get(bid, zero)
    zero = (np.zeros_like(state.M[aid]), np.zeros_like(state.V[aid]))
    hist_ma, hist_va = snapshot.moments.get(aid, zero)

    zero_ranks(adapter, I_p)
    logits = adapter.s_logits.data
    for ip, ie in pairs:
        adapter.B.data[:, ip] = hist["B"][:, ie]
        adapter.A.data[ip, :] = hist["A"][ie, :]
        write_moments(state, bid, ip, hist_mb[:, ie], hist_vb[:, ie])
        write_moments(state, aid, ip, hist_ma[ie, :], hist_va[ie, :])
        if adapter.use_scores:
            mean_logit = 0.5 * (logits[ip] + logits[ie])
            logits[ip] = mean_logit
            logits[ie] = mean_logit
            if sid in state.M:
                m = 0.5 * (state.M[sid][ip] + state.M[sid][ie])
                v = 0.5 * (state.V[sid][ip] + state.V[sid][ie])
                state.M[sid][ip] = state.M[sid][ie] = m
                state.V[sid][ip] = state.V[sid][ie] = v
    return event


class BeamController:
    """Drives snapshots and prune/expand operations over a training run."""

    def __init__(self, schedule: BeamSchedule, mode: str = "beamlora", seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown controller mode {mode!r}; expected one of {MODES}")
        self.schedule = schedule
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.last_op_step = 0
        self.snapshot: Snapshot | None = None
        self.events: list[OperationEvent] = []

    def threshold(self, step: int) -> float:
        if self.mode == "static_p":
            return self.schedule.p_init
        return threshold_at(step, self.schedule)

    def is_operation_step(self, step: int) -> bool:
        sch = self.schedule
        return step > 0 and step % sch.delta_t == 0 and step <= sch.op_window_end

    def is_snapshot_step(self, step: int) -> bool:
        sch = self.schedule
        return (
            step == snapshot_step(self.last_op_step, sch.delta_t)
            and self.last_op_step + sch.delta_t <= sch.op_window_end
        )

    def _sets(self, s: np.ndarray, K: int) -> tuple[list[int], list[int]]:
        if self.mode != "random_select":
            return select_sets(s, K)
        perm = self.rng.permutation(s.size)
        return [int(i) for i in perm[:K]], [int(i) for i in perm[K:2 * K]]

    def maybe_operate(self, step: int, adapters: dict[str, LoraAdapter], state: AdamState) -> list[OperationEvent]:
        """Call once after every optimizer step."""
        if self.is_operation_step(step):
            p = self.threshold(step)
            events = []
            for name, ad in adapters.items():
                s = ad.scores()
                K = operable_count(s, p)
                I_p, I_e = self._sets(s, K)
                ev = prune_expand(ad, state, self.snapshot, I_p, I_e, name=name, step=step, p=p, mode=self.mode)
                if ev is not None:
                    events.append(ev)
            self.last_op_step = step
            self.snapshot = None
            self.events.extend(events)
            return events
        if self.is_snapshot_step(step):
            self.snapshot = capture_snapshot(step, adapters, state, self.last_op_step, self.schedule.delta_t)
        return []
