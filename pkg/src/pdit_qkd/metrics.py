"""Entanglement and key-rate quantities."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .pdit import CcqState
from .qcore import DensityMatrix, binary_entropy, trace_norm_hermitian


@dataclass(frozen=True)
class GapRecord:
    """One row of a key-versus-entanglement scan for the example pbit with
    shield dimension ``d``.

    ``key_rate`` is the protocol's measured rate in bits per copy,
    ``ln_per_copy`` the log-negativity of one copy, and ``ed_bound`` the
    analytic upper bound ``log2(1 + 1/d)``.
    """

    d: int
    key_rate: float
    ln_per_copy: float
    ed_bound: float
    n_used: int
    aborted_fraction: float

    def __post_init__(self):
        if self.key_rate < 0 or self.ed_bound < 0 or self.ln_per_copy < -1e-10:
            raise ValueError(f"negative rate in {self}")

    def as_row(self) -> dict:
        return asdict(self)


def partial_transpose(rho: DensityMatrix, labels: Iterable[str]) -> np.ndarray:
    lay = rho.layout
    n = len(lay)
    idx = lay.indices(labels)
    axes = list(range(2 * n))
    for i in idx:
        axes[i], axes[i + n] = axes[i + n], axes[i]
    return rho.tensor_view().transpose(axes).reshape(rho.dim, rho.dim)


def log_negativity(rho: DensityMatrix, cut) -> float:
    """log2 of the trace norm of the partial transpose across ``cut``.

    ``cut`` is a pair ``(left_labels, right_labels)`` partitioning the layout.
    """
    left, right = (list(c) for c in cut)
    labels = set(rho.labels)
    if not left or not right:
        raise ValueError("both sides of the cut must be nonempty")
    if set(left) & set(right) or set(left) | set(right) != labels or \
            len(left) + len(right) != len(labels):
        raise ValueError(f"cut {cut} does not partition {rho.labels}")
    norm = trace_norm_hermitian(partial_transpose(rho, right))
    return math.log2(norm)


def ed_bound_example(d: int) -> float:
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    return math.log2(1 + 1 / d)


def key_rate_bound(e_x: float, e_z: float) -> float:
    for name, e in (("e_x", e_x), ("e_z", e_z)):
        if not 0 <= e <= 0.5:
            raise ValueError(f"{name}={e} outside [0, 1/2]")
    return max(0.0, 1 - binary_entropy(e_x) - binary_entropy(e_z))


def security_diagnostic(c: CcqState) -> float:
    """Trace distance from ``c`` to the ideal ccq operator sharing Eve's marginal.

    With Eve's marginal fixed, the ideal key state ``sum_i |ii><ii|/d (x) rho_E``
    is unique, so the distance is a sum over classical blocks.
    """
    marginal = c.eve_marginal
    total = 0.0
    for i in range(c.d):
        for j in range(c.d):
            block = -marginal / c.d if i == j else np.zeros_like(marginal)
            if (i, j) in c.eve_states:
                block = block + c.probs[i, j] * c.eve_states[(i, j)].entries
            total += trace_norm_hermitian(block)
    return 0.5 * total
