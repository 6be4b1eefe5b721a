"""Adam with per-rank addressable moments.

Moments are keyed by the same string ids the model hands out for its
trainable tensors (``"layer0.B"`` and so on). Rank slices follow the LoRA
layout: a column of ``B``, a row of ``A``, one element of ``s_logits``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from beamlora.tensor import ContractError, Tensor


def tensor_role(tensor_id: str) -> str:
    return tensor_id.rsplit(".", 1)[-1]


# rank axis per role: B is d x r (columns), A is r x k (rows), s_logits is r
_RANK_AXIS = {"B": 1, "A": 0, "s_logits": 0}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    M: dict[str, np.ndarray] = field(default_factory=dict)
    V: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, tensor_id: str, like: np.ndarray) -> None:
        if tensor_id not in self.M:
            self.M[tensor_id] = np.zeros_like(like)
            self.V[tensor_id] = np.zeros_like(like)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
            {k: v.copy() for k, v in self.M.items()}, {k: v.copy() for k, v in self.V.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    grads: dict[str, np.ndarray] | None = None,
    lr_mult: dict[str, float] | None = None,
) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each tensor's accumulated ``.grad``. A parameter with
    no gradient at all is a contract error; pass zeros explicitly to skip it.
    ``lr_mult`` optionally scales the learning rate per tensor id.
    """
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"no gradient for parameter {name!r}")
            grads[name] = p.grad
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        state.ensure(name, p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m, v = state.M[name], state.V[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = state.lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _rank_index(array: np.ndarray, tensor_id: str, rank_index: int, axis: int | None):
    role = tensor_role(tensor_id)
    if role not in _RANK_AXIS:
        raise ContractError(f"{tensor_id!r} is not a rank-structured tensor")
    expected = _RANK_AXIS[role]
    if axis is not None and axis != expected:
        raise ContractError(f"{tensor_id!r} is sliced along axis {expected}, not {axis}")
    if not 0 <= rank_index < array.shape[expected]:
        raise IndexError(f"rank index {rank_index} out of range for {tensor_id!r} {array.shape}")
    return (slice(None), rank_index) if expected == 1 else (rank_index,)


def slice_moments(state: AdamState, tensor_id: str, rank_index: int, axis: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Copies of the M and V entries belonging to one rank."""
    idx = _rank_index(state.M[tensor_id], tensor_id, rank_index, axis)
    return np.array(state.M[tensor_id][idx]), np.array(state.V[tensor_id][idx])


def write_moments(state: AdamState, tensor_id: str, rank_index: int, M_slice: np.ndarray, V_slice: np.ndarray) -> None:
    M, V = state.M[tensor_id], state.V[tensor_id]
    idx = _rank_index(M, tensor_id, rank_index, None)
    M_slice, V_slice = np.asarray(M_slice), np.asarray(V_slice)
    if M_slice.shape != M[idx].shape or V_slice.shape != V[idx].shape:
        raise ContractError(f"moment slice shapes {M_slice.shape}/{V_slice.shape} do not match {M[idx].shape}")
    if np.any(V_slice < 0):
        raise ContractError("second-moment entries must be non-negative")
    M[idx] = M_slice
    V[idx] = V_slice


def zero_moments(state: AdamState, tensor_id: str, rank_index: int) -> None:
    M = state.M[tensor_id]
    idx = _rank_index(M, tensor_id, rank_index, None)
    M[idx] = 0.0
    state.V[tensor_id][idx] = 0.0
