"""LoRA adapter with a trainable per-rank score vector.

The adapter computes ``W0 x + scale * B (softmax(s) ⊙_rows A) x``. The score
vector is stored as raw logits; normalisation happens inside the forward pass
so gradients flow through the softmax. With ``use_scores=False`` the adapter
is plain LoRA (``W0 x + scale * B A x``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from beamlora import tensor as T
from beamlora.tensor import Tensor

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


def _softmax_np(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - np.max(v))
    return z / np.sum(z)


@dataclass
class RankSlice:
    index: int
    b: np.ndarray
    a: np.ndarray
    score: float


class LoraAdapter:
    def __init__(
        self,
        W0: np.ndarray,
        B: np.ndarray,
        A: np.ndarray,
        s_logits: np.ndarray | None = None,
        scale: float = 1.0,
        use_scores: bool = True,
        seed: int | None = None,
        init_std: float | None = None,
    ):
        W0 = np.asarray(W0)
        dtype = W0.dtype if W0.dtype.kind == "f" else T.get_default_dtype()
        d, k = W0.shape
        r = np.shape(A)[0]
        if np.shape(B) != (d, r) or np.shape(A) != (r, k):
            raise T.DimensionError(f"adapter factors B{np.shape(B)} A{np.shape(A)} do not fit W0{W0.shape}")
        if s_logits is None:
            s_logits = np.zeros(r, dtype=dtype)
        if np.shape(s_logits) != (r,):
            raise T.DimensionError(f"score logits {np.shape(s_logits)} do not match rank {r}")
        self.W0 = Tensor(W0, dtype=dtype, name="W0")
        self.B = Tensor(B, requires_grad=True, dtype=dtype, name="B")
        self.A = Tensor(A, requires_grad=True, dtype=dtype, name="A")
        self.s_logits = Tensor(s_logits, requires_grad=use_scores, dtype=dtype, name="s_logits")
        self.scale = float(scale)
        self.use_scores = use_scores
        self.seed = seed
        self.init_std = init_std

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def k(self) -> int:
        return self.W0.shape[1]

    @property
    def dtype(self):
        return self.W0.dtype

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by role."""
        params = {"B": self.B, "A": self.A}
        if self.use_scores and self.s_logits.requires_grad:
            params["s_logits"] = self.s_logits
        return params

    def scores(self) -> np.ndarray:
        """Normalised scores; all ones for a plain-LoRA adapter."""
        if not self.use_scores:
            return np.ones(self.r, dtype=self.dtype)
        return _softmax_np(self.s_logits.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[0] != self.k:
            raise T.DimensionError(f"adapter input {x.shape} does not have {self.k} rows")
        base = T.matmul(self.W0, x)
        A = T.scale_rows(T.softmax(self.s_logits), self.A) if self.use_scores else self.A
        branch = T.matmul(self.B, T.matmul(A, x))
        if self.scale != 1.0:
            branch = T.scale(branch, self.scale)
        return T.add(base, branch)

    __call__ = forward

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward for evaluation."""
        A = self.scores()[:, None] * self.A.data
        return self.W0.data @ x + self.scale * (self.B.data @ (A @ x))

    def rank_slice(self, i: int) -> RankSlice:
        self._check_index(i)
        return RankSlice(i, self.B.data[:, i].copy(), self.A.data[i].copy(), float(self.scores()[i]))

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.r:
            raise IndexError(f"rank index {i} out of range for r={self.r}")

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.W0.data.copy(), self.B.data.copy(), self.A.data.copy(), self.s_logits.data.copy(),
            scale=self.scale, use_scores=self.use_scores, seed=self.seed, init_std=self.init_std,
        )


def init_adapter(
    d: int,
    k: int,
    r: int,
    seed: int,
    init_std: float = 0.02,
    W0: np.ndarray | None = None,
    scale: float = 1.0,
    use_scores: bool = True,
    dtype=None,
) -> LoraAdapter:
    """B = 0, A ~ N(0, init_std^2) from ``seed``, zero score logits."""
    if min(d, k, r) < 1:
        raise ConfigurationError(f"d, k, r must be positive, got d={d} k={k} r={r}")
    if r > min(d, k):
        raise ConfigurationError(f"rank r={r} exceeds min(d, k)={min(d, k)}")
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    A = (rng.standard_normal((r, k)) * init_std).astype(dtype)
    if W0 is None:
        W0 = np.zeros((d, k), dtype=dtype)
    elif W0.shape != (d, k):
        raise T.DimensionError(f"W0 shape {W0.shape} is not ({d}, {k})")
    return LoraAdapter(
        np.asarray(W0, dtype=dtype), np.zeros((d, r), dtype=dtype), A, np.zeros(r, dtype=dtype),
        scale=scale, use_scores=use_scores, seed=seed, init_std=init_std,
    )


def delta_w(adapter: LoraAdapter, i: int, include_score: bool = False) -> np.ndarray:
    """Rank-``i`` update matrix ``b_i a_i^T``, optionally times its score."""
    adapter._check_index(i)
    dw = np.outer(adapter.B.data[:, i], adapter.A.data[i])
    if include_score:
        dw = dw * adapter.scores()[i]
    return dw


IMPORTANCE_MODES = ("frobenius", "frobenius_scored", "score")


def rank_importance(adapter: LoraAdapter, mode: str = "frobenius") -> np.ndarray:
    if mode not in IMPORTANCE_MODES:
        raise ValueError(f"unknown importance mode {mode!r}; expected one of {IMPORTANCE_MODES}")
    if mode == "score":
        return adapter.scores()
    # ||b a^T||_F = ||b|| * ||a||
    norms = np.linalg.norm(adapter.B.data, axis=0) * np.linalg.norm(adapter.A.data, axis=1)
    if mode == "frobenius_scored":
        norms = norms * adapter.scores()
    return norms


def zero_ranks(adapter: LoraAdapter, indices: Iterable[int]) -> None:
    idx = sorted(set(int(i) for i in indices))
    for i in idx:
        adapter._check_index(i)
    if idx:
        adapter.B.data[:, idx] = 0.0
        adapter.A.data[idx, :] = 0.0


def merge(adapter: LoraAdapter) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fold the normalised scores into A, returning ``(W0, B, A_merged)``.

    The result has plain LoRA structure: ``W0 x + scale * B A_merged x``.
    """
    return adapter.W0.data.copy(), adapter.B.data.copy(), adapter.scores()[:, None] * adapter.A.data


def merged_forward(W0: np.ndarray, B: np.ndarray, A_merged: np.ndarray, x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return W0 @ x + scale * (B @ (A_merged @ x))


# -- checkpoint container ----------------------------------------------------

def adapter_arrays(adapter: LoraAdapter, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        f"{prefix}W0": adapter.W0.data,
        f"{prefix}B": adapter.B.data,
        f"{prefix}A": adapter.A.data,
        f"{prefix}s_logits": adapter.s_logits.data,
    }


def adapter_meta(adapter: LoraAdapter) -> dict:
    return {
        "d": adapter.d,
        "k": adapter.k,
        "r": adapter.r,
        "dtype": str(adapter.dtype),
        "scale": adapter.scale,
        "use_scores": adapter.use_scores,
        "scores_trainable": adapter.s_logits.requires_grad,
        "seed": adapter.seed,
        "init_std": adapter.init_std,
    }


def adapter_from_arrays(arrays: dict[str, np.ndarray], meta: dict, prefix: str = "") -> LoraAdapter:
    ad = LoraAdapter(
        arrays[f"{prefix}W0"], arrays[f"{prefix}B"], arrays[f"{prefix}A"], arrays[f"{prefix}s_logits"],
        scale=meta["scale"], use_scores=meta["use_scores"], seed=meta.get("seed"), init_std=meta.get("init_std"),
    )
    if meta["use_scores"] and not meta.get("scores_trainable", True):
        ad.s_logits.requires_grad = False
    for key in ("W0", "B", "A", "s_logits"):
        if getattr(ad, key).shape != arrays[f"{prefix}{key}"].shape:
            raise T.DimensionError(f"checkpoint array {prefix}{key} has unexpected shape")
    return ad


def save_adapter(path: str | Path, adapter: LoraAdapter, extra: dict | None = None) -> None:
    """Write a single adapter as ``.npz`` with a JSON header entry."""
    header = {"format": "beamlora-adapter", "version": CHECKPOINT_VERSION, "adapter": adapter_meta(adapter)}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **adapter_arrays(adapter))


def load_adapter(path: str | Path) -> LoraAdapter:
    with np.load(path) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != "beamlora-adapter":
            raise ValueError(f"{path} is not an adapter checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {header['version']} is newer than supported {CHECKPOINT_VERSION}")
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return adapter_from_arrays(arrays, header["adapter"])
