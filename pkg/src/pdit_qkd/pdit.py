"""Private states, their twisting unitaries, and ccq extraction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .qcore import (
    DensityMatrix,
    SystemLayout,
    UnitaryOp,
    haar_unitary,
    permute,
    purification_vector,
    random_density,
    tensor,
    trace_distance,
)

KEY_A, KEY_B, SHIELD_A, SHIELD_B = "A", "B", "A'", "B'"
PDIT_LABELS = (KEY_A, KEY_B, SHIELD_A, SHIELD_B)
EVE = "E"
PROB_CUTOFF = 1e-12


@dataclass(frozen=True, eq=False)
class PditSpec:
    """Key dimension, shield dimensions, one twisting unitary per key value,
    and the shield state."""

    d: int
    d_shield_a: int
    d_shield_b: int
    twist_unitaries: tuple[UnitaryOp, ...]
    shield: DensityMatrix

    def __post_init__(self):
        object.__setattr__(self, "twist_unitaries", tuple(self.twist_unitaries))
        if self.d < 1:
            raise ValueError("key dimension must be positive")
        if len(self.twist_unitaries) != self.d:
            raise ValueError(
                f"need exactly d={self.d} twisting unitaries, got {len(self.twist_unitaries)}"
            )
        dim = self.d_shield_a * self.d_shield_b
        for i, u in enumerate(self.twist_unitaries):
            if u.layout.total_dim != dim:
                raise ValueError(f"U_{i} has dim {u.layout.total_dim}, shield dim is {dim}")
        if self.shield.layout.dims != (self.d_shield_a, self.d_shield_b):
            raise ValueError(
                f"shield layout {self.shield.layout} does not match "
                f"({self.d_shield_a}, {self.d_shield_b})"
            )
        self.shield.validate()

    @property
    def shield_layout(self) -> SystemLayout:
        return SystemLayout((SHIELD_A, SHIELD_B), (self.d_shield_a, self.d_shield_b))

    @property
    def layout(self) -> SystemLayout:
        return SystemLayout(PDIT_LABELS, (self.d, self.d, self.d_shield_a, self.d_shield_b))


@dataclass(frozen=True, eq=False)
class CcqState:
    """Outcome distribution ``probs[i, j]`` of Alice/Bob key measurements and
    Eve's conditional state for each outcome with non-negligible weight."""

    d: int
    probs: np.ndarray
    eve_states: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (self.d, self.d):
            raise ValueError(f"probs must be {self.d}x{self.d}")
        if p.min() < -1e-12 or abs(p.sum() - 1) > 1e-10:
            raise ValueError("probs must be a distribution")
        object.__setattr__(self, "probs", p)

    @property
    def eve_marginal(self) -> np.ndarray:
        return sum(self.probs[k] * s.entries for k, s in self.eve_states.items())


def max_entangled(d: int) -> DensityMatrix:
    if d < 2:
        raise ValueError(f"maximally entangled state needs d >= 2, got {d}")
    v = np.zeros(d * d, dtype=complex)
    v[[i * d + i for i in range(d)]] = 1.0
    return DensityMatrix.pure(v, SystemLayout((KEY_A, KEY_B), (d, d)))


def bell_state(sign: int = +1) -> DensityMatrix:
    """``(|00> + sign |11>)/sqrt(2)`` on (A, B)."""
    v = np.array([1, 0, 0, sign], dtype=complex)
    return DensityMatrix.pure(v, SystemLayout((KEY_A, KEY_B), (2, 2)))


def swap_operator(d: int) -> np.ndarray:
    v = np.zeros((d * d, d * d), dtype=complex)
    for i, j in itertools.product(range(d), repeat=2):
        v[j * d + i, i * d + j] = 1.0
    return v


def sym_antisym_states(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised projectors onto the symmetric and antisymmetric subspaces of
    ``C^d (x) C^d``."""
    eye = np.eye(d * d, dtype=complex)
    swap = swap_operator(d)
    rho_s = (eye + swap) / (d * (d + 1))
    rho_a = (eye - swap) / (d * (d - 1))
    return rho_s, rho_a


def assemble_pdit(spec: PditSpec) -> DensityMatrix:
    d = spec.d
    s = spec.d_shield_a * spec.d_shield_b
    rho = spec.shield.entries
    us = [u.entries for u in spec.twist_unitaries]
    out = np.zeros((d, d, s, d, d, s), dtype=complex)
    for i in range(d):
        left = us[i] @ rho
        for j in range(d):
            out[i, i, :, j, j, :] = left @ us[j].conj().T / d
    dim = d * d * s
    return DensityMatrix(spec.layout, out.reshape(dim, dim))


def _block_diag_controlled(blocks: Sequence[np.ndarray]) -> np.ndarray:
    s = blocks[0].shape[0]
    out = np.zeros((len(blocks) * s, len(blocks) * s), dtype=complex)
    for i, b in enumerate(blocks):
        out[i * s:(i + 1) * s, i * s:(i + 1) * s] = b
    return out


def untwist_local(spec: PditSpec) -> UnitaryOp:
    """``sum_i |i><i|_B (x) U_i^dagger`` on (B, A', B')."""
    layout = SystemLayout(
        (KEY_B, SHIELD_A, SHIELD_B), (spec.d, spec.d_shield_a, spec.d_shield_b)
    )
    blocks = [u.entries.conj().T for u in spec.twist_unitaries]
    return UnitaryOp(layout, _block_diag_controlled(blocks))


def untwist_global(spec: PditSpec, table: Sequence[Sequence[UnitaryOp]] | None = None) -> UnitaryOp:
    """``sum_ij |ij><ij|_AB (x) U_ij^dagger`` on (A, B, A', B').

    ``table[i][j]`` fills the off-diagonal controls; its diagonal must repeat
    the spec's unitaries.  ``None`` fills off-diagonals with the identity.
    """
    d = spec.d
    if table is None:
        eye = UnitaryOp.identity(spec.shield_layout)
        table = [[spec.twist_unitaries[i] if i == j else eye for j in range(d)] for i in range(d)]
    if len(table) != d or any(len(row) != d for row in table):
        raise ValueError(f"twisting table must be {d}x{d}")
    for i in range(d):
        if np.max(np.abs(table[i][i].entries - spec.twist_unitaries[i].entries)) > 1e-10:
            raise ValueError(f"table diagonal entry {i} differs from the spec's U_{i}")
    blocks = [table[i][j].entries.conj().T for i in range(d) for j in range(d)]
    return UnitaryOp(spec.layout, _block_diag_controlled(blocks))


def ccq_of(rho_full: DensityMatrix, d: int) -> CcqState:
    """Purify, measure the key part exactly on every branch, discard the shield."""
    if set(rho_full.labels) != set(PDIT_LABELS):
        raise ValueError(f"expected subsystems {PDIT_LABELS}, got {rho_full.labels}")
    rho = permute(rho_full, PDIT_LABELS)
    da, db, sa, sb = rho.layout.dims
    if da != d or db != d:
        raise ValueError(f"key part has dims ({da}, {db}), expected ({d}, {d})")
    psi = purification_vector(rho)
    r = psi.shape[1]
    psi = psi.reshape(d, d, sa * sb, r)
    probs = np.einsum("ijse,ijse->ij", psi, psi.conj()).real
    probs = np.clip(probs, 0, None)
    probs = probs / probs.sum()
    eve_layout = SystemLayout((EVE,), (r,))
    eve = {}
    for i, j in itertools.product(range(d), repeat=2):
        if probs[i, j] > PROB_CUTOFF:
            block = psi[i, j]
            m = block.T @ block.conj()
            eve[(i, j)] = DensityMatrix(eve_layout, m / np.trace(m).real)
    return CcqState(d, probs, eve)


def is_ideal_ccq(c: CcqState, tol: float) -> bool:
    target = np.eye(c.d) / c.d
    if np.max(np.abs(c.probs - target)) > tol:
        return False
    states = list(c.eve_states.values())
    for a, b in itertools.combinations(states, 2):
        if trace_distance(a, b) > tol:
            return False
    return True


def example_pbit(d: int) -> PditSpec:
    """The pbit mixing ``|psi+>`` with the symmetric shield and ``|psi->`` with the
    antisymmetric shield, written as a twisted basic pbit (``U_1`` = swap)."""
    if d < 2:
        raise ValueError(f"shield dimension must be >= 2, got {d}")
    p = 0.5 * (1 + 1 / d)
    rho_s, rho_a = sym_antisym_states(d)
    shield_layout = SystemLayout((SHIELD_A, SHIELD_B), (d, d))
    shield = DensityMatrix(shield_layout, p * rho_s + (1 - p) * rho_a)
    us = (UnitaryOp.identity(shield_layout), UnitaryOp(shield_layout, swap_operator(d)))
    return PditSpec(2, d, d, us, shield)


def example_pbit_weight(d: int) -> float:
    return 0.5 * (1 + 1 / d)


def basic_pdit(spec: PditSpec) -> DensityMatrix:
    """``P+ (x) shield``: the image of any pdit under untwisting."""
    return tensor(max_entangled(spec.d), spec.shield)


def random_pdit_spec(rng: np.random.Generator, d: int = 2, d_shield_a: int = 2,
                     d_shield_b: int = 2) -> PditSpec:
    layout = SystemLayout((SHIELD_A, SHIELD_B), (d_shield_a, d_shield_b))
    dim = d_shield_a * d_shield_b
    us = tuple(UnitaryOp(layout, haar_unitary(dim, rng)) for _ in range(d))
    return PditSpec(d, d_shield_a, d_shield_b, us, random_density(layout, rng))
