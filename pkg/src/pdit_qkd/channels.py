"""State sources and noise models.

A :class:`SourceSpec` describes what the adversary hands Alice and Bob: exact
copies of the requested pdit, copies corrupted by a fixed channel, or an
explicit correlated state over a block of copies.  It also fixes the quality
of the ebits the distillation step will produce.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
import numpy as np

from .pdit import (
    KEY_A,
    KEY_B,
    PDIT_LABELS,
    PditSpec,
    assemble_pdit,
    basic_pdit,
    max_entangled,
)
from .qcore import (
    SX,
    SZ,
    DensityMatrix,
    SystemLayout,
    apply_kraus,
    partial_trace,
    tensor_all,
)

HONEST, IID_ATTACK, JOINT_ATTACK = "honest", "iid_attack", "joint_attack"
MODES = (HONEST, IID_ATTACK, JOINT_ATTACK)
MAX_JOINT_DIM = 4096


@dataclass(frozen=True, eq=False)
class NoiseChannel:
    kraus: tuple[np.ndarray, ...]
    targets: tuple[str, ...]

    def __post_init__(self):
        ks = tuple(np.asarray(k, dtype=complex) for k in self.kraus)
        object.__setattr__(self, "kraus", ks)
        object.__setattr__(self, "targets", tuple(self.targets))
        dim = ks[0].shape[0]
        if any(k.shape != (dim, dim) for k in ks):
            raise ValueError("Kraus operators must share one square shape")
        total = sum(k.conj().T @ k for k in ks)
        if np.max(np.abs(total - np.eye(dim))) > 1e-10:
            raise ValueError("Kraus operators are not trace preserving")

    def __call__(self, rho: DensityMatrix) -> DensityMatrix:
        return apply_kraus(rho, self.kraus, self.targets)


def identity_channel(targets=(KEY_A, KEY_B), dim: int = 4) -> NoiseChannel:
    return NoiseChannel((np.eye(dim),), targets)


def weyl_operators(dim: int) -> list[np.ndarray]:
    """The ``dim**2`` shift-and-clock operators; they form a unitary 1-design."""
    shift = np.roll(np.eye(dim), 1, axis=0)
    clock = np.diag(np.exp(2j * np.pi * np.arange(dim) / dim))
    return [np.linalg.matrix_power(shift, a) @ np.linalg.matrix_power(clock, b)
            for a in range(dim) for b in range(dim)]


def depolarize_key(q: float, d: int = 2) -> NoiseChannel:
    """With probability ``q`` replace the key part AB by ``I/d^2``."""
    if not 0 <= q <= 1:
        raise ValueError(f"q={q} outside [0, 1]")
    dim = d * d
    ws = weyl_operators(dim)
    n = len(ws)
    kraus = [math.sqrt(1 - q + q / n) * ws[0]]
    kraus += [math.sqrt(q / n) * w for w in ws[1:]]
    return NoiseChannel(tuple(kraus), (KEY_A, KEY_B))


def flip_channels(p_bit: float, p_phase: float, target_label: str = KEY_B) -> NoiseChannel:
    """Independent bit flip (X) with ``p_bit`` and phase flip (Z) with ``p_phase``
    on a qubit."""
    for name, p in (("p_bit", p_bit), ("p_phase", p_phase)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name}={p} outside [0, 1]")
    kraus = (
        math.sqrt((1 - p_bit) * (1 - p_phase)) * np.eye(2),
        math.sqrt(p_bit * (1 - p_phase)) * SX,
        math.sqrt((1 - p_bit) * p_phase) * SZ,
        math.sqrt(p_bit * p_phase) * (SX @ SZ),
    )
    return NoiseChannel(kraus, (target_label,))


def werner_visibility(v: float) -> DensityMatrix:
    """``v P+ + (1 - v) I/4`` on two qubits; positive for ``-1/3 <= v <= 1``."""
    if not -1 / 3 <= v <= 1:
        raise ValueError(f"Werner visibility {v} outside [-1/3, 1]")
    p = max_entangled(2)
    return DensityMatrix(p.layout, v * p.entries + (1 - v) * np.eye(4) / 4)


def werner_state(fidelity: float) -> DensityMatrix:
    """Two-qubit Werner state with the given fidelity to ``P+``."""
    if not 0 <= fidelity <= 1:
        raise ValueError(f"Werner fidelity {fidelity} outside [0, 1]")
    return werner_visibility((4 * fidelity - 1) / 3)


def ebit_source(fidelity: float, count: int, rng: np.random.Generator | None = None):
    """``count`` Werner-parameterised candidate ebits.

    Werner states are fixed mixtures, so ``rng`` is unused; it is accepted to
    keep the signature uniform with sources that sample.
    """
    if not 0.5 <= fidelity <= 1:
        raise ValueError(f"ebit fidelity {fidelity} outside [1/2, 1]")
    state = werner_state(fidelity)
    return [state] * count


@dataclass(frozen=True, eq=False)
class SourceSpec:
    """What Eve distributes.

    ``joint_state`` (joint mode) covers a block of ``c`` copies laid out as
    ``A0, B0, A'0, B'0, A1, ...``; a request for ``n`` copies receives
    ``ceil(n / c)`` independent blocks with the surplus copies of the last
    block traced out.
    """

    mode: str
    target: PditSpec
    channel: NoiseChannel | None = None
    joint_state: DensityMatrix | None = None
    ebit_fidelity: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown source mode {self.mode!r}")
        if self.mode == IID_ATTACK and self.channel is None:
            raise ValueError("iid_attack mode needs a channel")
        if self.mode != IID_ATTACK and self.channel is not None:
            raise ValueError(f"{self.mode} mode takes no channel")
        if self.mode == JOINT_ATTACK:
            if self.joint_state is None:
                raise ValueError("joint_attack mode needs joint_state")
            check_joint_layout(self.joint_state, self.target)
        elif self.joint_state is not None:
            raise ValueError(f"{self.mode} mode takes no joint_state")
        if not 0.5 <= self.ebit_fidelity <= 1:
            raise ValueError(f"ebit_fidelity {self.ebit_fidelity} outside [1/2, 1]")

    @property
    def block_size(self) -> int:
        if self.mode == JOINT_ATTACK:
            return len(self.joint_state.labels) // 4
        return 1


def copy_labels(i: int) -> tuple[str, ...]:
    return tuple(f"{x}{i}" for x in PDIT_LABELS)


def check_joint_layout(state: DensityMatrix, target: PditSpec) -> int:
    labels = state.labels
    if len(labels) % 4 or not labels:
        raise ValueError("joint state must cover whole copies of (A, B, A', B')")
    c = len(labels) // 4
    expected = SystemLayout(
        tuple(itertools.chain.from_iterable(copy_labels(i) for i in range(c))),
        target.layout.dims * c,
    )
    if state.layout != expected:
        raise ValueError(f"joint state layout {state.layout} != expected {expected}")
    if state.dim > MAX_JOINT_DIM:
        raise ValueError(f"joint state dim {state.dim} exceeds {MAX_JOINT_DIM}")
    state.validate()
    return c


def draw_copies(spec: SourceSpec, n: int, rng: np.random.Generator | None = None):
    """Return the distributed state as a list of blocks.

    Honest and iid modes give ``n`` single-copy blocks sharing one matrix;
    joint mode gives correlated blocks on relabelled copies.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.mode == HONEST:
        return [assemble_pdit(spec.target)] * n
    if spec.mode == IID_ATTACK:
        return [spec.channel(assemble_pdit(spec.target))] * n
    c = spec.block_size
    blocks = []
    for start in range(0, n, c):
        size = min(c, n - start)
        block = spec.joint_state
        if size < c:
            keep = [x for i in range(size) for x in copy_labels(i)]
            block = partial_trace(block, keep)
        blocks.append(block)
    return blocks


def basic_copies_attack(target: PditSpec, copies: int) -> DensityMatrix:
    """Joint state of ``copies`` untwisted copies ``P+ (x) shield`` passed off as
    the target pdit."""
    if copies < 1 or target.layout.total_dim ** copies > MAX_JOINT_DIM:
        raise ValueError(f"{copies} copies exceed the joint dimension cap {MAX_JOINT_DIM}")
    parts = [basic_pdit(target).relabel(dict(zip(PDIT_LABELS, copy_labels(i))))
             for i in range(copies)]
    return tensor_all(parts)


def key_parity_observables(d: int = 2):
    """``sigma_z (x) sigma_z`` and ``sigma_x (x) sigma_x`` on AB for qubit keys."""
    if d != 2:
        raise ValueError("parity observables are defined for qubit keys")
    return np.kron(SZ, SZ), np.kron(SX, SX)


__all__ = [
    "NoiseChannel", "SourceSpec", "depolarize_key", "flip_channels", "ebit_source",
    "werner_state", "werner_visibility", "draw_copies", "basic_copies_attack", "copy_labels",
    "identity_channel", "weyl_operators", "HONEST", "IID_ATTACK", "JOINT_ATTACK",
]
