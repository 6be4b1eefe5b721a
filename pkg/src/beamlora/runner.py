"""Config-driven runs and their on-disk artifacts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from beamlora import persist
from beamlora.config import RunConfig, loads
from beamlora.tasks import AdapterModel, RunRecord, TeacherStudentTask, build_model, gen_teacher_student, train



@dataclass
class RunResult:
    config: RunConfig
    task: TeacherStudentTask
    model: AdapterModel
    record: RunRecord


def prepare(cfg: RunConfig) -> tuple[TeacherStudentTask, AdapterModel]:
    dtype = np.dtype(cfg.model.dtype).type
    task = gen_teacher_student(cfg.task, cfg.seed, dtype=dtype)
    model = build_model(task, cfg.model.r, cfg.seed, mode=cfg.mode, scale=cfg.model.scale,
                        init_std=cfg.model.init_std, dtype=dtype)
    return task, model


def run(cfg: RunConfig) -> RunResult:
    task, model = prepare(cfg)
    record = train(model, task, cfg.optim, cfg.schedule(), cfg.seed, mode=cfg.mode,
                   log_importance_every=cfg.logging.importance_every, eval_every=cfg.logging.eval_every)
    record.meta.update(seed=cfg.seed, mode=cfg.mode, task_fingerprint=task.fingerprint())
    return RunResult(cfg, task, model, record)


def save_run(result: RunResult, out_dir: str | Path | None = None) -> Path:
    """Writes config.yaml, metrics.csv, events.jsonl, importance.jsonl,
    checkpoint.npz and summary.json into ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else result.config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    rec = result.record
    result.config.save(out / "config.yaml")
    persist.write_metrics(rec, out / "metrics.csv")
    persist.write_events(rec, out / "events.jsonl")
    if rec.importance:
        persist.write_importance(rec, out / "importance.jsonl")
    ckpt = out / "checkpoint.npz"
    persist.save_checkpoint(ckpt, result.model, rec.meta.get("state"),
                            extra={"config": result.config.to_dict(), "task_fingerprint": rec.meta["task_fingerprint"]})
    rec.meta["checkpoint"] = str(ckpt)
    summary = {
        "status": rec.status,
        "diagnostic": rec.diagnostic,
        "steps_completed": len(rec.steps),
        "final_eval": rec.final_eval,
        "operations": len(rec.events),
        "seed": result.config.seed,
        "mode": result.config.mode,
        "task_fingerprint": rec.meta["task_fingerprint"],
        "checkpoint": ckpt.name,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def load_run(ckpt_path: str | Path) -> tuple[RunConfig, TeacherStudentTask, AdapterModel]:
    """Rebuild config, task and trained model from a checkpoint written by :func:`save_run`."""
    model, _, extra = persist.load_checkpoint(ckpt_path)
    if "config" not in extra:
        raise ValueError(f"{ckpt_path} carries no run config")
    cfg = loads(yaml.safe_dump(extra["config"], sort_keys=False), source=str(ckpt_path))
    task = gen_teacher_student(cfg.task, cfg.seed, dtype=np.dtype(cfg.model.dtype).type)
    if task.fingerprint() != extra.get("task_fingerprint"):
        raise ValueError(f"{ckpt_path}: regenerated task does not match the recorded fingerprint")
    return cfg, task, model
