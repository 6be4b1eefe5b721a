"""Post-hoc analyses: rank prune sweeps, importance profiles and config sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from beamlora.adapter import IMPORTANCE_MODES, rank_importance, zero_ranks
from beamlora.config import RunConfig
from beamlora.runner import run
from beamlora.tasks import AdapterModel, RunRecord, TeacherStudentTask, evaluate

logger = logging.getLogger(__name__)

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 11))
SWEEP_AXES = ("r", "p_init", "delta_t", "ablation")


class ProfileError(RuntimeError):
    pass


def n_pruned(fraction: float, r: int) -> int:
    """Ranks removed for ``fraction`` of ``r`` (round half up)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return min(r, int(math.floor(fraction * r + 0.5)))


def pruned_ranks(importance: np.ndarray, count: int, direction: str = "least") -> list[int]:
    """``count`` least (or most) important ranks; ties resolved by lower index."""
    if direction not in ("least", "most"):
        raise ValueError(f"direction must be 'least' or 'most', got {direction!r}")
    sign = 1.0 if direction == "least" else -1.0
    return sorted(range(importance.size), key=lambda i: (sign * importance[i], i))[:count]


def prune_sweep(
    model: AdapterModel,
    task: TeacherStudentTask,
    fractions=DECILES,
    mode: str = "frobenius",
    direction: str = "least",
) -> list[dict]:
    """Eval loss after zeroing a fraction of ranks in every adapter.

    The first row is the unpruned baseline (``fraction == 0``). Each point
    works on a fresh copy, so ``model`` is never modified.
    """
    importance = {name: rank_importance(ad, mode) for name, ad in model.adapters.items()}
    rows = [{"fraction": 0.0, "direction": direction, "mode": mode, "pruned": 0, "loss": evaluate(model, task)}]
    for f in fractions:
        trial = model.copy()
        count = 0
        for name, ad in trial.adapters.items():
            idx = pruned_ranks(importance[name], n_pruned(f, ad.r), direction)
            zero_ranks(ad, idx)
            count += len(idx)
        rows.append({"fraction": float(f), "direction": direction, "mode": mode, "pruned": count,
                     "loss": evaluate(trial, task)})
    return rows


def importance_deciles(values) -> np.ndarray:
    """Importance at the 10%, 20%, ..., 100% quantiles of the sorted ranks."""
    return np.quantile(np.asarray(values, dtype=np.float64), DECILES)


def _require_logging(record: RunRecord) -> None:
    if not record.importance:
        raise ProfileError(
            "run record has no periodic importance vectors; "
            "re-run with logging.importance_every > 0 in the config (or --importance-every on the CLI)"
        )


def importance_profile(source: RunRecord | AdapterModel, mode: str = "frobenius") -> dict[str, list[dict]]:
    """Spatial (sorted deciles) and temporal (per-step trajectories) tables.

    ``source`` is a run record with periodic importance logging, or a model
    (spatial table only, from its current parameters).
    """
    if mode not in IMPORTANCE_MODES:
        raise ValueError(f"unknown importance mode {mode!r}")
    if isinstance(source, AdapterModel):
        latest = {name: (None, rank_importance(ad, mode)) for name, ad in source.adapters.items()}
        trajectories = []
    else:
        _require_logging(source)
        rows = [row for row in source.importance if row["mode"] == mode]
        latest = {}
        trajectories = []
        for row in rows:
            latest[row["adapter"]] = (row["step"], np.asarray(row["values"]))
            for rank, v in enumerate(row["values"]):
                trajectories.append({"step": row["step"], "adapter": row["adapter"], "mode": mode, "rank": rank, "value": v})
    spatial = []
    for name, (step, values) in latest.items():
        for q, v in zip(DECILES, importance_deciles(values)):
            spatial.append({"adapter": name, "mode": mode, "step": step, "decile": q, "value": float(v)})
    return {"spatial": spatial, "temporal": trajectories}


def importance_variance(record: RunRecord, adapter: str = "layer0", mode: str = "frobenius") -> list[tuple[int, float]]:
    """(step, variance across ranks) for every logged importance vector."""
    _require_logging(record)
    return [(row["step"], float(np.var(row["values"])))
            for row in record.importance if row["adapter"] == adapter and row["mode"] == mode]


def write_table(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


@dataclass
class SweepCell:
    value: object
    mode: str
    losses: list[float]
    baseline: list[float]
    failures: list[dict]
    first_K: list[int]

    def summary(self) -> dict:
        ok = [(a, b) for a, b in zip(self.losses, self.baseline) if math.isfinite(a) and math.isfinite(b)]
        a = np.array([x for x, _ in ok])
        b = np.array([y for _, y in ok])
        return {
            "value": self.value,
            "mode": self.mode,
            "n": len(ok),
            "failed": len(self.failures),
            "mean": float(a.mean()) if ok else float("nan"),
            "std": float(a.std(ddof=1)) if len(ok) > 1 else float("nan"),
            "lora_mean": float(b.mean()) if ok else float("nan"),
            "lora_std": float(b.std(ddof=1)) if len(ok) > 1 else float("nan"),
            "wins_vs_lora": int(np.sum(a <= b)),
            "delta_vs_lora": float(a.mean() - b.mean()) if ok else float("nan"),
            "first_K_mean": float(np.mean(self.first_K)) if self.first_K else float("nan"),
        }


def _variant(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "r":
        return dataclasses.replace(base, model=dataclasses.replace(base.model, r=int(value)))
    if axis == "p_init":
        return dataclasses.replace(base, beam=dataclasses.replace(base.beam, p_init=float(value)))
    if axis == "delta_t":
        return dataclasses.replace(base, beam=dataclasses.replace(base.beam, delta_t=int(value)))
    if axis == "ablation":
        return dataclasses.replace(base, mode=str(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _safe_run(cfg: RunConfig):
    try:
        res = run(cfg)
    except Exception as exc:  # recorded, the sweep goes on
        logger.warning("run failed (mode=%s seed=%d): %s", cfg.mode, cfg.seed, exc)
        return None, f"{type(exc).__name__}: {exc}"
    if res.record.status != "ok":
        return res, res.record.diagnostic
    return res, None


def sweep(base: RunConfig, axis: str, values, seeds=range(10)) -> list[dict]:
    """Paired-seed sweep of ``axis`` with a plain-LoRA baseline per cell.

    For ``axis="ablation"`` the values are training modes; otherwise the base
    config's mode is used. Rows are returned in ``values`` order.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    seeds = list(seeds)
    rows = []
    for value in values:
        cfg = _variant(base, axis, value)
        cell = SweepCell(value, cfg.mode, [], [], [], [])
        for seed in seeds:
            arm = dataclasses.replace(cfg, seed=seed)
            lora = dataclasses.replace(arm, mode="lora")
            res, err = _safe_run(arm)
            ref, ref_err = _safe_run(lora)
            for which, e in (("arm", err), ("lora", ref_err)):
                if e:
                    cell.failures.append({"seed": seed, "run": which, "error": e})
            cell.losses.append(res.record.final_eval if res and not err else float("nan"))
            cell.baseline.append(ref.record.final_eval if ref and not ref_err else float("nan"))
            if res is not None and res.record.events:
                cell.first_K.append(res.record.events[0].K)
        row = cell.summary()
        row["failures"] = cell.failures
        rows.append(row)
    return rows
