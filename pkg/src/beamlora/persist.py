"""On-disk formats: metrics CSV, events JSONL and the checkpoint container.

Metrics CSV columns (one row per optimizer step, header first):

    step        1-based optimizer step, strictly increasing
    train_loss  minibatch loss before the update
    eval_loss   eval-split loss after the update, ``nan`` on steps not evaluated
    lr          base learning rate used for the update
    threshold   Top-P threshold p(t), ``nan`` when no controller runs

Floats are written with ``repr`` so a re-run reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from beamlora.adapter import adapter_arrays, adapter_from_arrays, adapter_meta
from beamlora.optim import AdamState
from beamlora.tasks import AdapterModel, RunRecord

METRICS_COLUMNS = ("step", "train_loss", "eval_loss", "lr", "threshold")
CHECKPOINT_FORMAT = "beamlora-checkpoint"
CHECKPOINT_VERSION = 1


def write_metrics(record: RunRecord, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for row in zip(record.steps, record.train_loss, record.eval_loss, record.lr, record.threshold):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def read_metrics(path: str | Path) -> dict[str, list]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        out = {c: [] for c in METRICS_COLUMNS}
        for row in reader:
            out["step"].append(int(row["step"]))
            for c in METRICS_COLUMNS[1:]:
                out[c].append(float(row[c]))
    return out


def write_events(record: RunRecord, path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in record.events:
            fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")


def read_events(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_importance(record: RunRecord, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in record.importance:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_importance(path: str | Path) -> list[dict]:
    return read_events(path)


def save_checkpoint(path: str | Path, model: AdapterModel, state: AdamState | None = None, extra: dict | None = None) -> None:
    """Adapters, optimizer moments and free-form metadata in one ``.npz``."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "activation": model.activation,
        "loss": model.loss_kind,
        "adapters": {name: adapter_meta(ad) for name, ad in model.adapters.items()},
        "extra": extra or {},
    }
    arrays = {}
    for name, ad in model.adapters.items():
        arrays.update(adapter_arrays(ad, prefix=f"{name}/"))
    if state is not None:
        header["optim"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                           "weight_decay": state.weight_decay, "step": state.step}
        for tid in state.M:
            arrays[f"optim/M/{tid}"] = state.M[tid]
            arrays[f"optim/V/{tid}"] = state.V[tid]
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, **arrays)


def load_checkpoint(path: str | Path) -> tuple[AdapterModel, AdamState | None, dict]:
    """Returns ``(model, optimizer state or None, extra metadata)``."""
    with np.load(path) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path} is not a checkpoint container")
        header = json.loads(z["__header__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {header['version']} is newer than supported {CHECKPOINT_VERSION}")
    names = sorted(header["adapters"], key=lambda n: int(n.removeprefix("layer")))
    layers = [adapter_from_arrays(arrays, header["adapters"][n], prefix=f"{n}/") for n in names]
    model = AdapterModel(layers, header["activation"], header["loss"])
    state = None
    if "optim" in header:
        state = AdamState(**header["optim"])
        for key, arr in arrays.items():
            if key.startswith("optim/M/"):
                state.M[key.removeprefix("optim/M/")] = arr
            elif key.startswith("optim/V/"):
                state.V[key.removeprefix("optim/V/")] = arr
    return model, state, header["extra"]
