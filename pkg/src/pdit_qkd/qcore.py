"""Dense density-matrix primitives over labeled tensor-product layouts.

States are stored as full ``(D, D)`` complex arrays whose row/column index runs
over the tensor-product basis in layout order (row-major, first label most
significant).  Operations acting on a subset of subsystems reshape to a
``2N``-index tensor and contract only the touched indices, so embedding a
small operator never materialises ``U (x) I``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

HERM_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-9
MAX_CLIP = 1e-6
RANK_TOL = 1e-12

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
CNOT = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)


@dataclass(frozen=True)
class SystemLayout:
    """Ordered subsystem labels with their dimensions."""

    labels: tuple[str, ...]
    dims: tuple[int, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        dims = tuple(int(x) for x in self.dims)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "dims", dims)
        if len(labels) != len(dims):
            raise ValueError("labels and dims differ in length")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate subsystem labels in {labels}")
        if any(x < 1 for x in dims):
            raise ValueError(f"subsystem dimensions must be >= 1, got {dims}")

    @classmethod
    def of(cls, **dims: int) -> "SystemLayout":
        return cls(tuple(dims), tuple(dims.values()))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "SystemLayout":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    def dim_of(self, label: str) -> int:
        return self.dims[self.index(label)]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown subsystem label {label!r}") from None

    def indices(self, labels: Iterable[str]) -> list[int]:
        return [self.index(x) for x in labels]

    def sub(self, labels: Sequence[str]) -> "SystemLayout":
        return SystemLayout(tuple(labels), tuple(self.dim_of(x) for x in labels))

    def __add__(self, other: "SystemLayout") -> "SystemLayout":
        return SystemLayout(self.labels + other.labels, self.dims + other.dims)

    def __len__(self):
        return len(self.labels)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=complex)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive operator on ``layout``.

    Use :meth:`from_array` to build a validated state from user data.  The
    plain constructor trusts its input; library operations use it on results
    they already know to be valid.
    """

    layout: SystemLayout
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))
        dim = self.layout.total_dim
        if self.entries.shape != (dim, dim):
            raise ValueError(
                f"entries shape {self.entries.shape} does not match layout dim {dim}"
            )

    @classmethod
    def from_array(cls, entries, layout: SystemLayout, *, clip: bool = False):
        """Validate ``entries`` as a state on ``layout``.

        With ``clip=True`` small negative eigenvalues (down to ``-MAX_CLIP``) are
        set to zero and the result renormalised.
        """
        m = np.asarray(entries, dtype=complex)
        if clip:
            m = (m + m.conj().T) / 2
            w, v = np.linalg.eigh(m)
            if w.min() < -MAX_CLIP:
                raise ValueError(f"eigenvalue {w.min():.3g} too negative to clip")
            w = np.clip(w, 0.0, None)
            m = (v * w) @ v.conj().T
            m = m / np.trace(m).real
        state = cls(layout, m)
        state.validate()
        return state

    @classmethod
    def pure(cls, vector, layout: SystemLayout) -> "DensityMatrix":
        v = np.asarray(vector, dtype=complex).reshape(-1)
        v = v / np.linalg.norm(v)
        return cls(layout, np.outer(v, v.conj()))

    @classmethod
    def basis(cls, digits: Sequence[int], layout: SystemLayout) -> "DensityMatrix":
        idx = int(np.ravel_multi_index(tuple(digits), layout.dims))
        v = np.zeros(layout.total_dim, dtype=complex)
        v[idx] = 1.0
        return cls(layout, np.outer(v, v))

    @classmethod
    def maximally_mixed(cls, layout: SystemLayout) -> "DensityMatrix":
        dim = layout.total_dim
        return cls(layout, np.eye(dim, dtype=complex) / dim)

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    @property
    def labels(self) -> tuple[str, ...]:
        return self.layout.labels

    def validate(self) -> None:
        m = self.entries
        herm = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
        if herm > HERM_TOL:
            raise ValueError(f"not Hermitian (deviation {herm:.3g})")
        tr = np.trace(m)
        if abs(tr - 1) > TRACE_TOL:
            raise ValueError(f"trace {tr:.12g} is not 1")
        lo = np.linalg.eigvalsh((m + m.conj().T) / 2).min()
        if lo < -PSD_TOL:
            raise ValueError(f"not positive semidefinite (min eigenvalue {lo:.3g})")

    def is_valid(self) -> bool:
        try:
            self.validate()
        except ValueError:
            return False
        return True

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh((self.entries + self.entries.conj().T) / 2)

    def tensor_view(self) -> np.ndarray:
        dims = self.layout.dims
        return self.entries.reshape(dims + dims)

    def relabel(self, mapping: dict[str, str]) -> "DensityMatrix":
        labels = tuple(mapping.get(x, x) for x in self.layout.labels)
        return DensityMatrix(SystemLayout(labels, self.layout.dims), self.entries)

    def __repr__(self):
        parts = ", ".join(f"{l}:{d}" for l, d in zip(self.layout.labels, self.layout.dims))
        return f"DensityMatrix({parts})"


@dataclass(frozen=True, eq=False)
class UnitaryOp:
    layout: SystemLayout
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))
        dim = self.layout.total_dim
        if self.entries.shape != (dim, dim):
            raise ValueError(
                f"unitary shape {self.entries.shape} does not match layout dim {dim}"
            )
        dev = np.max(np.abs(self.entries @ self.entries.conj().T - np.eye(dim)))
        if dev > HERM_TOL:
            raise ValueError(f"operator is not unitary (deviation {dev:.3g})")

    @classmethod
    def identity(cls, layout: SystemLayout) -> "UnitaryOp":
        return cls(layout, np.eye(layout.total_dim, dtype=complex))

    @property
    def dagger(self) -> "UnitaryOp":
        return UnitaryOp(self.layout, self.entries.conj().T)


# ---------------------------------------------------------------------------
# structural operations


def tensor(a: DensityMatrix, b: DensityMatrix) -> DensityMatrix:
    clash = set(a.labels) & set(b.labels)
    if clash:
        raise ValueError(f"label collision in tensor product: {sorted(clash)}")
    return DensityMatrix(a.layout + b.layout, np.kron(a.entries, b.entries))


def tensor_all(states: Iterable[DensityMatrix]) -> DensityMatrix:
    states = list(states)
    out = states[0]
    for s in states[1:]:
        out = tensor(out, s)
    return out


def permute(rho: DensityMatrix, order: Sequence[str]) -> DensityMatrix:
    """Reorder subsystems so the layout follows ``order``."""
    lay = rho.layout
    if sorted(order) != sorted(lay.labels):
        raise ValueError(f"order {order} is not a permutation of {lay.labels}")
    perm = lay.indices(order)
    n = len(lay)
    t = rho.tensor_view().transpose(perm + [p + n for p in perm])
    new = lay.sub(order)
    return DensityMatrix(new, t.reshape(new.total_dim, new.total_dim))


def split_label(rho: DensityMatrix, label: str, parts: Sequence[tuple[str, int]]):
    """Rewrite subsystem ``label`` as a product of smaller factors (no data change)."""
    lay = rho.layout
    i = lay.index(label)
    if math.prod(p[1] for p in parts) != lay.dims[i]:
        raise ValueError(f"factor dims do not multiply to dim({label})")
    labels = lay.labels[:i] + tuple(p[0] for p in parts) + lay.labels[i + 1:]
    dims = lay.dims[:i] + tuple(p[1] for p in parts) + lay.dims[i + 1:]
    return DensityMatrix(SystemLayout(labels, dims), rho.entries)


def merge_labels(rho: DensityMatrix, labels: Sequence[str], new_label: str):
    """Fuse adjacent subsystems ``labels`` (in layout order) into ``new_label``."""
    lay = rho.layout
    idx = lay.indices(labels)
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ValueError(f"labels {labels} are not adjacent and in order")
    i = idx[0]
    dim = math.prod(lay.dims[j] for j in idx)
    new_labels = lay.labels[:i] + (new_label,) + lay.labels[i + len(idx):]
    new_dims = lay.dims[:i] + (dim,) + lay.dims[i + len(idx):]
    return DensityMatrix(SystemLayout(new_labels, new_dims), rho.entries)


def partial_trace(rho: DensityMatrix, keep: Iterable[str]) -> DensityMatrix:
    """Reduced state on ``keep``; kept subsystems appear in the order given."""
    keep = list(keep)
    lay = rho.layout
    if len(set(keep)) != len(keep):
        raise ValueError("duplicate labels in keep")
    n = len(lay)
    keep_idx = lay.indices(keep)
    traced = [i for i in range(n) if i not in keep_idx]
    new = lay.sub(keep)
    dk = new.total_dim
    dt = lay.total_dim // dk
    perm = keep_idx + traced
    t = rho.tensor_view().transpose(perm + [p + n for p in perm]).reshape(dk, dt, dk, dt)
    return DensityMatrix(new, np.einsum("ijkj->ik", t))


def _left_multiply(t: np.ndarray, op: np.ndarray, idx: list[int]) -> np.ndarray:
    """Contract ``op`` into axes ``idx`` of ``t`` via a matmul on a transposed view."""
    rest = [i for i in range(t.ndim) if i not in idx]
    perm = idx + rest
    moved = np.transpose(t, perm)
    shape = moved.shape
    res = (op @ moved.reshape(op.shape[1], -1)).reshape(shape)
    return np.transpose(res, np.argsort(perm))


def conjugate(rho_entries: np.ndarray, layout: SystemLayout, op: np.ndarray,
              targets: Sequence[str]) -> np.ndarray:
    """Return ``(op (x) I) rho (op (x) I)^dagger`` as a ``(D, D)`` array."""
    idx = layout.indices(targets)
    need = math.prod(layout.dims[i] for i in idx)
    if op.shape != (need, need):
        raise ValueError(
            f"operator of shape {op.shape} does not act on targets {list(targets)} "
            f"of total dim {need}"
        )
    n = len(layout)
    t = rho_entries.reshape(layout.dims * 2)
    t = _left_multiply(t, op, idx)
    t = _left_multiply(t, op.conj(), [i + n for i in idx])
    return np.ascontiguousarray(t).reshape(rho_entries.shape)


def apply_unitary(rho: DensityMatrix, u: UnitaryOp, targets: Sequence[str]) -> DensityMatrix:
    targets = list(targets)
    dims = tuple(rho.layout.dim_of(x) for x in targets)
    if dims != u.layout.dims:
        raise ValueError(
            f"unitary acts on dims {u.layout.dims} but targets {targets} have dims {dims}"
        )
    return DensityMatrix(rho.layout, conjugate(rho.entries, rho.layout, u.entries, targets))


def apply_kraus(rho: DensityMatrix, kraus: Sequence[np.ndarray], targets: Sequence[str]):
    out = np.zeros_like(rho.entries)
    for k in kraus:
        out = out + conjugate(rho.entries, rho.layout, np.asarray(k, dtype=complex), targets)
    return DensityMatrix(rho.layout, out)


def depolarize(rho: DensityMatrix, targets: Sequence[str], p: float) -> DensityMatrix:
    """Mix ``rho`` with ``I/D (x) Tr_targets(rho)`` at weight ``p``.

    The map moves any input by at most ``p`` in trace distance.
    """
    if not 0 <= p <= 1:
        raise ValueError(f"depolarizing weight {p} outside [0, 1]")
    if p == 0:
        return rho
    targets = list(targets)
    rest = [x for x in rho.labels if x not in targets]
    mixed = DensityMatrix.maximally_mixed(rho.layout.sub(targets))
    if rest:
        replaced = permute(tensor(mixed, partial_trace(rho, rest)), rho.labels)
    else:
        replaced = permute(mixed, rho.labels)
    return DensityMatrix(rho.layout, (1 - p) * rho.entries + p * replaced.entries)


# ---------------------------------------------------------------------------
# measurement


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform; never picks a zero-weight entry."""
    probs = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    cdf = np.cumsum(probs)
    total = cdf[-1]
    u = rng.random() * total
    i = int(np.searchsorted(cdf, u, side="right"))
    i = min(i, len(probs) - 1)
    while probs[i] <= 0:
        # u landed on the right edge; fall back to the last positive entry
        i -= 1
    return i


def outcome_distribution(rho: DensityMatrix, targets: Sequence[str]) -> np.ndarray:
    """Born probabilities of a computational-basis measurement on ``targets``,
    shaped by the target dimensions."""
    red = partial_trace(rho, targets)
    p = np.real(np.diag(red.entries)).copy()
    p[p < 0] = 0.0
    return p.reshape(red.layout.dims)


def measure_computational(rho: DensityMatrix, targets: Sequence[str],
                          rng: np.random.Generator):
    """Projectively measure ``targets`` in the computational basis.

    Returns ``(outcome, post_state, prob)`` where ``post_state`` is the
    normalised conditional state of the unmeasured subsystems (``None`` when
    every subsystem was measured).
    """
    targets = list(targets)
    if not targets:
        raise ValueError("no measurement targets")
    probs = outcome_distribution(rho, targets)
    flat = sample_index(probs.reshape(-1), rng)
    outcome = tuple(int(x) for x in np.unravel_index(flat, probs.shape))
    prob = float(probs.reshape(-1)[flat])
    return outcome, project(rho, targets, outcome), prob


def project(rho: DensityMatrix, targets: Sequence[str], outcome: Sequence[int]):
    """Normalised state of the other subsystems given ``targets`` read ``outcome``."""
    lay = rho.layout
    rest = [x for x in lay.labels if x not in targets]
    if not rest:
        return None
    ordered = permute(rho, list(targets) + rest)
    tdim = math.prod(lay.dim_of(x) for x in targets)
    rdim = math.prod(lay.dim_of(x) for x in rest)
    flat = int(np.ravel_multi_index(tuple(outcome), tuple(lay.dim_of(x) for x in targets)))
    block = ordered.entries.reshape(tdim, rdim, tdim, rdim)[flat, :, flat, :]
    tr = np.trace(block).real
    if tr <= 0:
        raise ValueError(f"outcome {tuple(outcome)} has zero probability")
    return DensityMatrix(lay.sub(rest), block / tr)


def expectation(rho: DensityMatrix, obs, targets: Sequence[str]) -> float:
    obs = np.asarray(obs, dtype=complex)
    if np.max(np.abs(obs - obs.conj().T)) > HERM_TOL:
        raise ValueError("observable is not Hermitian")
    red = partial_trace(rho, targets)
    if obs.shape != red.entries.shape:
        raise ValueError(f"observable shape {obs.shape} does not match targets {list(targets)}")
    return float(np.real(np.trace(red.entries @ obs)))


# ---------------------------------------------------------------------------
# purification and distances


def purification_vector(rho: DensityMatrix) -> np.ndarray:
    """Vector ``psi`` of shape ``(D, r)`` with ``psi psi^dagger = rho``; ``r`` is the
    rank after dropping eigenvalues below ``RANK_TOL``."""
    w, v = np.linalg.eigh((rho.entries + rho.entries.conj().T) / 2)
    keep = w > RANK_TOL
    if not keep.any():
        raise ValueError("state has no eigenvalue above the rank cutoff")
    return v[:, keep] * np.sqrt(w[keep])


def purify(rho: DensityMatrix, eve_label: str = "E") -> DensityMatrix:
    if eve_label in rho.labels:
        raise ValueError(f"label {eve_label!r} already present")
    psi = purification_vector(rho)
    layout = rho.layout + SystemLayout((eve_label,), (psi.shape[1],))
    return DensityMatrix.pure(psi.reshape(-1), layout)


def _check_same(rho: DensityMatrix, sigma: DensityMatrix):
    if rho.layout.dims != sigma.layout.dims or rho.labels != sigma.labels:
        raise ValueError(f"layout mismatch: {rho.layout} vs {sigma.layout}")


def trace_norm_hermitian(m: np.ndarray) -> float:
    return float(np.sum(np.abs(np.linalg.eigvalsh((m + m.conj().T) / 2))))


def trace_distance(rho: DensityMatrix, sigma: DensityMatrix) -> float:
    _check_same(rho, sigma)
    # both orders, so the result is exactly symmetric in floating point
    forward = trace_norm_hermitian(rho.entries - sigma.entries)
    backward = trace_norm_hermitian(sigma.entries - rho.entries)
    return 0.25 * (forward + backward)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


def fidelity(rho: DensityMatrix, sigma: DensityMatrix) -> float:
    """Squared Uhlmann fidelity."""
    _check_same(rho, sigma)
    s = _psd_sqrt(rho.entries)
    inner = s @ sigma.entries @ s
    w = np.linalg.eigvalsh((inner + inner.conj().T) / 2)
    f = float(np.sum(np.sqrt(np.clip(w, 0, None))) ** 2)
    return min(max(f, 0.0), 1.0)


def binary_entropy(x: float) -> float:
    if not 0 <= x <= 1:
        raise ValueError(f"binary entropy argument {x} outside [0, 1]")
    if x == 0 or x == 1:
        return 0.0
    return float(-x * math.log2(x) - (1 - x) * math.log2(1 - x))


# ---------------------------------------------------------------------------
# random instances (used by tests and the verify command)


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def random_density(layout: SystemLayout, rng: np.random.Generator, rank: int | None = None):
    dim = layout.total_dim
    rank = dim if rank is None else rank
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    m = g @ g.conj().T
    return DensityMatrix(layout, m / np.trace(m).real)


def fourier_matrix(d: int) -> np.ndarray:
    """Columns are the Fourier basis ``F|a> = sum_j w^{aj} |j> / sqrt(d)``; equals
    the Hadamard for ``d = 2``."""
    j = np.arange(d)
    return np.exp(2j * np.pi * np.outer(j, j) / d) / math.sqrt(d)
