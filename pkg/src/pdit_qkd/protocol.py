"""The main key-distribution protocol over (possibly adversarial) private states.

Steps of one run:

1. the source hands over ``n`` systems;
2. ``k`` random systems feed a distillation model whose output ebits are
   checked by random Bell-parity tests on ``t`` of them;
3. ``m`` random systems have their A' shield teleported to Bob, are untwisted,
   and measured in the conjugate basis to estimate the phase error rate;
4. ``m`` more are measured in the key basis to estimate the bit error rate;
5. the rest are measured in the key basis to form the raw key;
6. two-way and one-way classical post-processing produce the final key.

``run_reference_m1`` additionally teleports and untwists every system used in
steps 4 and 5.  With exact ebits the key-basis statistics are unchanged by
that, and the two runs produce identical raw keys from the same seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import postprocess
from .channels import SourceSpec, copy_labels, draw_copies, ebit_source
from .metrics import security_diagnostic
from .pdit import (
    KEY_A,
    KEY_B,
    PDIT_LABELS,
    SHIELD_A,
    SHIELD_B,
    PditSpec,
    ccq_of,
    max_entangled,
    untwist_global,
    untwist_local,
)
from .qcore import (
    CNOT,
    HADAMARD,
    SX,
    SZ,
    DensityMatrix,
    SystemLayout,
    UnitaryOp,
    apply_unitary,
    depolarize,
    fourier_matrix,
    measure_computational,
    merge_labels,
    outcome_distribution,
    partial_trace,
    permute,
    project,
    sample_index,
    split_label,
    tensor,
    trace_distance,
)

LOCAL, GLOBAL = "local", "global"
STAGES = ("select", "distill", "verify", "teleport", "teleport_extra",
          "phase", "bit", "key", "ecpa")
ABORT_VERIFY, ABORT_RATES, ABORT_ECPA = "ebit_verify", "error_rates", "ec_pa"
DEFAULT_C0 = 8


def stage_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per protocol stage, split from one seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        for i, name in enumerate(STAGES)
    }


def qubits_for(dim: int) -> int:
    return math.ceil(math.log2(dim)) if dim > 1 else 0


@dataclass(frozen=True)
class ProtocolConfig:
    n: int
    k: int
    m: int
    t: int
    epsilon: float = 0.05
    e_x_max: float = 0.11
    e_z_max: float = 0.11
    untwist_mode: str = LOCAL
    teleport_noise: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    safety_bits: int = postprocess.SAFETY_BITS
    failure_exponent: int = postprocess.FAILURE_EXPONENT
    round_cap: int = postprocess.ROUND_CAP

    def __post_init__(self):
        object.__setattr__(self, "teleport_noise", tuple(float(x) for x in self.teleport_noise))
        if min(self.k, self.m, self.t) < 1:
            raise ValueError("k, m and t must all be >= 1")
        if self.n - self.k - 2 * self.m < 1:
            raise ValueError(f"n - k - 2m must be >= 1 (n={self.n}, k={self.k}, m={self.m})")
        for name in ("e_x_max", "e_z_max"):
            if not 0 <= getattr(self, name) < 0.5:
                raise ValueError(f"{name} must lie in [0, 1/2)")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.untwist_mode not in (LOCAL, GLOBAL):
            raise ValueError(f"untwist_mode must be 'local' or 'global', got {self.untwist_mode!r}")
        if len(self.teleport_noise) != 2 or not all(0 <= x <= 1 for x in self.teleport_noise):
            raise ValueError("teleport_noise must be two values in [0, 1]")

    @classmethod
    def default(cls, n: int, spec: PditSpec, c0: float = DEFAULT_C0, **overrides) -> "ProtocolConfig":
        """Sample sizes growing like ``log d * log n``.

        ``m = ceil(c0 log2 d log2 n)`` and ``t = ceil(c0 log2 n)``; ``k`` is
        one copy per ebit the run will need.
        """
        m = math.ceil(c0 * max(math.log2(spec.d), 1.0) * math.log2(n))
        t = math.ceil(c0 * math.log2(n))
        mode = overrides.get("untwist_mode", LOCAL)
        per = ebits_per_phase_system(spec, mode)
        fields = dict(n=n, k=max(1, m * per + t), m=m, t=t)
        fields.update(overrides)
        return cls(**fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teleport_noise"] = list(self.teleport_noise)
        return d


def ebits_per_phase_system(spec: PditSpec, mode: str = LOCAL) -> int:
    per = qubits_for(spec.d_shield_a)
    if mode == GLOBAL:
        per += qubits_for(spec.d)
    return per


@dataclass
class ProtocolOutcome:
    aborted: bool
    abort_stage: str | None
    e_x_est: float
    e_z_est: float
    raw_len: int
    final_key_alice: str
    final_key_bob: str
    key_rate: float
    diagnostics: dict = field(default_factory=dict)
    raw_key_alice: str = field(default="", repr=False)
    raw_key_bob: str = field(default="", repr=False)

    def to_record(self) -> dict:
        return {
            "aborted": self.aborted,
            "abort_stage": self.abort_stage,
            "e_x_est": self.e_x_est,
            "e_z_est": self.e_z_est,
            "raw_len": self.raw_len,
            "final_key_alice": self.final_key_alice,
            "final_key_bob": self.final_key_bob,
            "key_rate": self.key_rate,
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=False)


# ---------------------------------------------------------------------------
# ebits and verification


def _is_exact_ebit(e: DensityMatrix) -> bool:
    return trace_distance(e, max_entangled(2)) < 1e-12


def _parity_test(e: DensityMatrix, basis: str, rng: np.random.Generator):
    if basis == "X":
        h = UnitaryOp(SystemLayout(("_q",), (2,)), HADAMARD)
        e = apply_unitary(apply_unitary(e, h, [KEY_A]), h, [KEY_B])
    outcome, _, _ = measure_computational(e, [KEY_A, KEY_B], rng)
    return outcome


def _lo_chau(candidates: Sequence[DensityMatrix], t: int, epsilon: float,
             rng: np.random.Generator, transcript: list | None = None):
    if t > len(candidates):
        raise ValueError(f"cannot test {t} of {len(candidates)} candidates")
    chosen = np.sort(rng.choice(len(candidates), size=t, replace=False))
    errors = 0
    log = []
    for idx in chosen:
        basis = "X" if rng.integers(2) else "Z"
        a, b = _parity_test(candidates[idx], basis, rng)
        errors += a != b
        log.append([int(idx), basis, int(a), int(b)])
    passed = errors / t <= epsilon / 2
    if transcript is not None:
        transcript.append({"stage": "verify", "tests": log, "errors": int(errors),
                           "passed": bool(passed)})
    return passed, chosen


def lo_chau_verify(candidates: Sequence[DensityMatrix], t: int, epsilon: float,
                   rng: np.random.Generator) -> bool:
    """Random ZZ/XX parity tests on ``t`` candidates; pass iff the observed
    error fraction is at most ``epsilon / 2``."""
    return _lo_chau(candidates, t, epsilon, rng)[0]


def partial_distill(copies: Sequence, config: ProtocolConfig, rng: np.random.Generator, *,
                    n_ebits: int, fidelity: float = 1.0, transcript: list | None = None):
    """Consume ``copies`` and return ``(ebits, verified)``.

    The distillation itself is a model: exact ebits when ``fidelity == 1``,
    Werner states of that fidelity otherwise.  ``n_ebits + t`` candidates are
    made; ``t`` of them are spent on verification.
    """
    if len(copies) < 1:
        raise ValueError("partial distillation needs at least one copy")
    total = n_ebits + config.t
    if fidelity >= 1:
        candidates = [max_entangled(2)] * total
    else:
        candidates = ebit_source(fidelity, total, rng)
    passed, tested = _lo_chau(candidates, config.t, config.epsilon, rng, transcript)
    mask = np.ones(total, dtype=bool)
    mask[tested] = False
    remaining = [c for c, keep in zip(candidates, mask) if keep]
    return remaining, bool(passed)


# ---------------------------------------------------------------------------
# teleportation


def bob_label(label: str) -> str:
    return f"{label}@B"


def teleport_subsystem(rho: DensityMatrix, label: str, resource: Sequence[DensityMatrix],
                       rng: np.random.Generator | None = None) -> DensityMatrix:
    """Teleport subsystem ``label`` to Bob using the first ``ceil(log2 dim)`` ebits
    of ``resource``; the subsystem is renamed ``label@B``.

    Exact ebits make teleportation the identity map, so only the label
    changes.  Otherwise each qubit goes through the Bell-measurement circuit
    with Pauli correction (the subsystem dimension must then be a power of 2).
    """
    dim = rho.layout.dim_of(label)
    q = qubits_for(dim)
    if len(resource) < q:
        raise ValueError(f"teleporting dim {dim} needs {q} ebits, got {len(resource)}")
    used = resource[:q]
    if all(_is_exact_ebit(e) for e in used):
        return rho.relabel({label: bob_label(label)})
    if dim != 2 ** q:
        raise ValueError("noisy teleportation needs a power-of-2 subsystem dimension")
    if rng is None:
        raise ValueError("noisy teleportation needs a random stream")
    return _teleport_circuit(rho, label, used, rng, average=False)


def _teleport_circuit(rho, label, resource, rng, average: bool):
    q = len(resource)
    parts = [f"{label}#{i}" for i in range(q)]
    state = split_label(rho, label, [(p, 2) for p in parts]) if q > 1 else rho.relabel({label: parts[0]})
    one = SystemLayout(("_q",), (2,))
    h = UnitaryOp(one, HADAMARD)
    x_op, z_op = UnitaryOp(one, SX), UnitaryOp(one, SZ)
    cnot = UnitaryOp(SystemLayout(("_c", "_t"), (2, 2)), CNOT)
    new_parts = []
    for i, part in enumerate(parts):
        pair = resource[i].relabel({KEY_A: "_ra", KEY_B: "_rb"})
        state = tensor(state, pair)
        state = apply_unitary(state, cnot, [part, "_ra"])
        state = apply_unitary(state, h, [part])
        target = bob_label(part)
        if average:
            acc = None
            for m1 in (0, 1):
                for m2 in (0, 1):
                    w = outcome_distribution(state, [part, "_ra"])[m1, m2]
                    if w <= 0:
                        continue
                    br = _correct(project(state, [part, "_ra"], (m1, m2)), m1, m2, x_op, z_op)
                    acc = w * br.entries if acc is None else acc + w * br.entries
                    lay = br.layout
            state = DensityMatrix(lay, acc)
        else:
            (m1, m2), post, _ = measure_computational(state, [part, "_ra"], rng)
            state = _correct(post, m1, m2, x_op, z_op)
        state = state.relabel({"_rb": target})
        new_parts.append(target)
    order = []
    for lab in rho.labels:
        order.extend(new_parts if lab == label else [lab])
    state = permute(state, order)
    if q > 1:
        return merge_labels(state, new_parts, bob_label(label))
    return state.relabel({new_parts[0]: bob_label(label)})


def _correct(state, m1, m2, x_op, z_op):
    if m2:
        state = apply_unitary(state, x_op, ["_rb"])
    if m1:
        state = apply_unitary(state, z_op, ["_rb"])
    return state


def teleport_channel(rho: DensityMatrix, label: str, resource: Sequence[DensityMatrix]):
    """Outcome-averaged teleportation (the induced channel), computed exactly."""
    dim = rho.layout.dim_of(label)
    q = qubits_for(dim)
    used = resource[:q]
    if len(used) < q:
        raise ValueError("insufficient ebits")
    if all(_is_exact_ebit(e) for e in used):
        return rho.relabel({label: bob_label(label)})
    return _teleport_circuit(rho, label, used, None, average=True)


# ---------------------------------------------------------------------------
# per-copy measurement plumbing


def _labels_for(block: DensityMatrix, j: int) -> tuple[str, ...]:
    if block.labels[:4] == PDIT_LABELS and len(block.labels) == 4:
        return PDIT_LABELS
    return copy_labels(j)


def _teleported(state, labels, spec: PditSpec, config: ProtocolConfig, resource, tele_rng,
                noise_scale: int, average: bool):
    """Teleport the shield (and in global mode Alice's key) of one copy to Bob.

    Returns the state, the relabelled ``(a, b, sa, sb)``, and the untwisting
    unitary with the labels it acts on.
    """
    a, b, sa, sb = labels
    q_shield = qubits_for(spec.d_shield_a)
    tele = teleport_channel if average else (
        lambda r, lab, res: teleport_subsystem(r, lab, res, tele_rng))
    state = tele(state, sa, resource[:q_shield])
    sa = bob_label(sa)
    eps1 = config.teleport_noise[0]
    if eps1 > 0:
        state = depolarize(state, [sa], eps1 / noise_scale)
    if config.untwist_mode == GLOBAL:
        state = tele(state, a, resource[q_shield:])
        a = bob_label(a)
        return state, (a, b, sa, sb), untwist_global(spec), [a, b, sa, sb]
    return state, (a, b, sa, sb), untwist_local(spec), [b, sa, sb]


def _untwisted(state, labels, spec: PditSpec, config: ProtocolConfig, resource, tele_rng,
               noise_scale: int, average: bool = False):
    """Teleport the needed parts of one copy to Bob and untwist it.

    Returns the new state and the (A, B) labels to measure plus the labels to
    discard afterwards.
    """
    state, (a, b, sa, sb), u, targets = _teleported(state, labels, spec, config, resource,
                                                    tele_rng, noise_scale, average)
    state = apply_unitary(state, u, targets)
    eps2 = config.teleport_noise[1]
    if eps2 > 0:
        state = depolarize(state, targets, eps2 / noise_scale)
    return state, (a, b), (sa, sb)


def _conjugate_ops(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Alice's and Bob's basis changes for the conjugate-basis measurement."""
    f = fourier_matrix(d)
    return f.conj().T, f.T


def _conjugate_basis(state, a, b, d):
    fa, fb = _conjugate_ops(d)
    state = apply_unitary(state, UnitaryOp(SystemLayout((a,), (d,)), fa), [a])
    return apply_unitary(state, UnitaryOp(SystemLayout((b,), (d,)), fb), [b])


def _sample_pair(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    flat = sample_index(probs.reshape(-1), rng)
    return tuple(int(x) for x in np.unravel_index(flat, probs.shape))


def _measure_pair(state, meas, discard, rng):
    """Measure ``meas`` (two labels) and return ``(outcome, remaining_state)``."""
    rest = [x for x in state.labels if x not in meas and x not in discard]
    if not rest:
        return _sample_pair(outcome_distribution(state, meas), rng), None
    outcome, post, _ = measure_computational(state, meas, rng)
    return outcome, partial_trace(post, rest)


def _phase_state(block, labels, spec, config, resource, tele_rng, noise_scale, average=False):
    if config.teleport_noise[1] > 0:
        state, (a, b), discard = _untwisted(block, labels, spec, config, resource, tele_rng,
                                            noise_scale, average)
        return _conjugate_basis(state, a, b, spec.d), [a, b], list(discard)
    # nothing acts between untwisting and the basis change: apply both as one unitary
    state, (a, b, sa, sb), u, targets = _teleported(block, labels, spec, config, resource,
                                                    tele_rng, noise_scale, average)
    fa, fb = _conjugate_ops(spec.d)
    u_full = u.entries if len(targets) == 4 else np.kron(np.eye(spec.d), u.entries)
    shield = spec.d_shield_a * spec.d_shield_b
    combined = np.kron(np.kron(fa, fb), np.eye(shield)) @ u_full
    order = [a, b, sa, sb]
    layout = SystemLayout(tuple(order), tuple(state.layout.dim_of(x) for x in order))
    state = apply_unitary(state, UnitaryOp(layout, combined), order)
    return state, [a, b], [sa, sb]


# ---------------------------------------------------------------------------
# estimation and raw key (single-copy entry points)


def _as_copy(state: DensityMatrix) -> DensityMatrix:
    if set(state.labels) != set(PDIT_LABELS):
        raise ValueError(f"expected a single copy on {PDIT_LABELS}, got {state.labels}")
    return state


def phase_error_estimate(systems: Sequence[DensityMatrix], spec: PditSpec,
                         ebits: Sequence[DensityMatrix], config: ProtocolConfig,
                         rng: np.random.Generator, tele_rng: np.random.Generator | None = None,
                         untwist: bool = True) -> float:
    """Fraction of disagreeing conjugate-basis outcomes on teleported and
    untwisted copies (``untwist=False`` measures the twisted copies as given)."""
    if not systems:
        raise ValueError("need at least one system")
    per = ebits_per_phase_system(spec, config.untwist_mode)
    if untwist and len(ebits) < per * len(systems):
        raise ValueError(f"need {per * len(systems)} ebits, got {len(ebits)}")
    tele_rng = tele_rng if tele_rng is not None else rng
    # with exact resources the transform is deterministic, so repeated
    # copies share one outcome distribution
    deterministic = not untwist or (
        config.teleport_noise == (0.0, 0.0)
        and all(_is_exact_ebit(e) for e in ebits[:per * len(systems)]))
    cache: dict[int, np.ndarray] = {}
    errors = 0
    for i, s in enumerate(systems):
        s = _as_copy(s)
        if deterministic and id(s) in cache:
            x, y = _sample_pair(cache[id(s)], rng)
        else:
            if untwist:
                st, meas, _ = _phase_state(s, PDIT_LABELS, spec, config,
                                           ebits[i * per:(i + 1) * per], tele_rng, len(systems))
            else:
                st, meas = _conjugate_basis(s, KEY_A, KEY_B, spec.d), [KEY_A, KEY_B]
            probs = outcome_distribution(st, meas)
            if deterministic:
                cache[id(s)] = probs
            x, y = _sample_pair(probs, rng)
        errors += x != y
    return errors / len(systems)


def _key_basis_outcomes(systems: Sequence[DensityMatrix], rng: np.random.Generator):
    if not systems:
        raise ValueError("need at least one system")
    cache: dict[int, np.ndarray] = {}
    out = []
    for s in systems:
        if id(s) not in cache:
            cache[id(s)] = outcome_distribution(_as_copy(s), [KEY_A, KEY_B])
        out.append(_sample_pair(cache[id(s)], rng))
    return np.array(out, dtype=np.int64)


def bit_error_estimate(systems: Sequence[DensityMatrix], rng: np.random.Generator) -> float:
    """Fraction of copies whose key-basis outcomes disagree."""
    out = _key_basis_outcomes(systems, rng)
    return float(np.mean(out[:, 0] != out[:, 1]))


def generate_raw_key(systems: Sequence[DensityMatrix], rng: np.random.Generator):
    """Key-basis outcomes of every copy as ``(alice_digits, bob_digits)``."""
    out = _key_basis_outcomes(systems, rng)
    return out[:, 0], out[:, 1]


def true_error_oracle(state: DensityMatrix, spec: PditSpec) -> tuple[float, float]:
    """Exact ``(e_x, e_z)`` of one copy: disagreement probabilities in the key
    basis, and in the conjugate basis after exact local untwisting."""
    state = permute(_as_copy(state), PDIT_LABELS)
    pz = outcome_distribution(state, [KEY_A, KEY_B])
    e_z = float(pz.sum() - np.trace(pz))
    u = untwist_local(spec)
    st = apply_unitary(state, u, [KEY_B, SHIELD_A, SHIELD_B])
    px = outcome_distribution(_conjugate_basis(st, KEY_A, KEY_B, spec.d), [KEY_A, KEY_B])
    e_x = float(px.sum() - np.trace(px))
    return e_x, e_z


def phase_error_distribution(systems: Sequence[DensityMatrix], spec: PditSpec,
                             ebits: Sequence[DensityMatrix], config: ProtocolConfig) -> np.ndarray:
    """Exact distribution of the phase-error count over independent copies,
    by enumerating every error pattern; index ``k`` is ``P(e_x_est = k/m)``."""
    m = len(systems)
    per = ebits_per_phase_system(spec, config.untwist_mode)
    q = []
    for i, s in enumerate(systems):
        st, meas, _ = _phase_state(_as_copy(s), PDIT_LABELS, spec, config,
                                   ebits[i * per:(i + 1) * per], None, m, average=True)
        p = outcome_distribution(st, meas)
        q.append(float(p.sum() - np.trace(p)))
    dist = np.zeros(m + 1)
    for pattern in np.ndindex(*(2,) * m):
        w = math.prod(q[i] if bit else 1 - q[i] for i, bit in enumerate(pattern))
        dist[sum(pattern)] += w
    return dist


# ---------------------------------------------------------------------------
# the run


def _digits_to_bits(digits: np.ndarray, d: int) -> np.ndarray:
    if d == 2:
        return digits.astype(np.uint8)
    width = qubits_for(d)
    shifts = np.arange(width - 1, -1, -1)
    return ((digits[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def _bits(arr) -> str:
    return "".join(str(int(x)) for x in arr)


class _Runner:
    def __init__(self, config: ProtocolConfig, source: SourceSpec, reference: bool,
                 transcript: list | None):
        self.config = config
        self.source = source
        self.spec = source.target
        self.reference = reference
        self.transcript = transcript
        self.rng = stage_streams(config.seed)
        self._cache: dict = {}
        self._phase_slot = 0
        self._extra_slot = 0

    def log(self, msg: dict):
        if self.transcript is not None:
            self.transcript.append(msg)

    def run(self) -> ProtocolOutcome:
        cfg, spec = self.config, self.spec
        blocks = draw_copies(self.source, cfg.n, self.rng["distill"])
        diagnostics = self._diagnostics(blocks)

        perm = self.rng["select"].permutation(cfg.n)
        roles = np.empty(cfg.n, dtype=object)
        roles[perm[: cfg.k]] = "distill"
        roles[perm[cfg.k: cfg.k + cfg.m]] = "phase"
        roles[perm[cfg.k + cfg.m: cfg.k + 2 * cfg.m]] = "bit"
        roles[perm[cfg.k + 2 * cfg.m:]] = "key"
        self.log({"stage": "select",
                  "distill": sorted(int(i) for i in perm[: cfg.k]),
                  "phase": sorted(int(i) for i in perm[cfg.k: cfg.k + cfg.m]),
                  "bit": sorted(int(i) for i in perm[cfg.k + cfg.m: cfg.k + 2 * cfg.m])})

        per = ebits_per_phase_system(spec, cfg.untwist_mode)
        untwisted = cfg.m + (cfg.n - cfg.k - cfg.m if self.reference else 0)
        n_ebits = per * untwisted
        distill_copies = [i for i in range(cfg.n) if roles[i] == "distill"]
        ebits, verified = partial_distill(
            distill_copies, cfg, self.rng["verify"], n_ebits=n_ebits,
            fidelity=self.source.ebit_fidelity, transcript=self.transcript)
        diagnostics["ebits_consumed"] = n_ebits + cfg.t
        if not verified:
            self.log({"stage": "abort", "at": ABORT_VERIFY})
            return ProtocolOutcome(True, ABORT_VERIFY, math.nan, math.nan, 0, "", "", 0.0,
                                   diagnostics)
        self.phase_ebits = ebits[: per * cfg.m]
        self.extra_ebits = ebits[per * cfg.m:]

        results = {"phase": [], "bit": [], "key": []}
        index = 0
        for block in blocks:
            c = len(block.labels) // 4
            state = block
            for j in range(c):
                role = roles[index]
                labels = _labels_for(block, j)
                out, state = self._process(block, state, labels, role, index,
                                           last=(j == c - 1))
                if out is not None:
                    results[role].append((index, out))
                index += 1

        ph = results["phase"]
        bt = results["bit"]
        e_x = sum(a != b for _, (a, b) in ph) / len(ph)
        e_z = sum(a != b for _, (a, b) in bt) / len(bt)
        self.log({"stage": "phase_estimate", "outcomes": [[i, a, b] for i, (a, b) in ph],
                  "e_x_est": e_x})
        self.log({"stage": "bit_estimate", "outcomes": [[i, a, b] for i, (a, b) in bt],
                  "e_z_est": e_z})
        key = results["key"]
        alice = np.array([a for _, (a, _) in key], dtype=np.int64)
        bob = np.array([b for _, (_, b) in key], dtype=np.int64)
        raw_a, raw_b = _digits_to_bits(alice, spec.d), _digits_to_bits(bob, spec.d)
        raw = dict(raw_key_alice=_bits(raw_a), raw_key_bob=_bits(raw_b))
        if e_x > cfg.e_x_max or e_z > cfg.e_z_max:
            self.log({"stage": "abort", "at": ABORT_RATES})
            return ProtocolOutcome(True, ABORT_RATES, e_x, e_z, len(raw_a), "", "", 0.0,
                                   diagnostics, **raw)

        pp = postprocess.ec_pa(raw_a, raw_b, e_x, e_z, self.rng["ecpa"],
                               safety_bits=cfg.safety_bits, round_cap=cfg.round_cap,
                               failure_exponent=cfg.failure_exponent,
                               transcript=self.transcript)
        diagnostics.update(two_way_steps="".join(pp.steps), leaked_bits=pp.leaked,
                           e_x_final=pp.e_x_final, e_z_final=pp.e_z_final)
        if pp.aborted:
            diagnostics["ec_pa_reason"] = pp.reason
            self.log({"stage": "abort", "at": ABORT_ECPA, "reason": pp.reason})
            return ProtocolOutcome(True, ABORT_ECPA, e_x, e_z, len(raw_a), "", "", 0.0,
                                   diagnostics, **raw)
        return ProtocolOutcome(False, None, e_x, e_z, len(raw_a), _bits(pp.alice),
                               _bits(pp.bob), len(pp.alice) / cfg.n, diagnostics, **raw)

    def _diagnostics(self, blocks) -> dict:
        first = blocks[0]
        labels = _labels_for(first, 0)
        single = partial_trace(first, labels).relabel(dict(zip(labels, PDIT_LABELS)))
        e_x, e_z = true_error_oracle(single, self.spec)
        diag = ccq_of(single, self.spec.d)
        return {"e_x_true": e_x, "e_z_true": e_z,
                "security_diagnostic": security_diagnostic(diag)}

    def _process(self, block, state, labels, role, index, last):
        cfg, spec = self.config, self.spec
        if role == "distill":
            rest = [x for x in state.labels if x not in labels]
            return None, (partial_trace(state, rest) if rest else None)
        # cache only whole single-copy blocks: conditional states differ per branch
        single = state is block and len(block.labels) == 4
        if role == "phase":
            per = ebits_per_phase_system(spec, cfg.untwist_mode)
            slot = self._phase_slot
            self._phase_slot += 1
            resource = self.phase_ebits[slot * per:(slot + 1) * per]
            return self._transform_and_measure(
                block, state, labels, "phase", single, resource, self.rng["teleport"],
                self.rng["phase"], lambda s, r, rg: _phase_state(s, labels, spec, cfg, r, rg, cfg.m))
        stream = self.rng["bit" if role == "bit" else "key"]
        if self.reference:
            per = ebits_per_phase_system(spec, cfg.untwist_mode)
            slot = self._extra_slot
            self._extra_slot += 1
            resource = self.extra_ebits[slot * per:(slot + 1) * per]
            no_noise = replace(cfg, teleport_noise=(0.0, 0.0))

            def transform(s, r, rg):
                st, meas, discard = _untwisted(s, labels, spec, no_noise, r, rg, 1)
                return st, list(meas), list(discard)
            return self._transform_and_measure(block, state, labels, role, single, resource,
                                               self.rng["teleport_extra"], stream, transform)
        return self._transform_and_measure(
            block, state, labels, role, single, [], None, stream,
            lambda s, r, rg: (s, [labels[0], labels[1]], [labels[2], labels[3]]))

    def _transform_and_measure(self, block, state, labels, role, single, resource, tele_rng,
                               meas_rng, transform):
        exact = all(_is_exact_ebit(e) for e in resource)
        if single and exact:
            key = (id(block), role)
            if key not in self._cache:
                st, meas, _ = transform(state, resource, tele_rng)
                self._cache[key] = outcome_distribution(st, meas)
            return _sample_pair(self._cache[key], meas_rng), None
        st, meas, discard = transform(state, resource, tele_rng)
        return _measure_pair(st, meas, discard, meas_rng)


def run(config: ProtocolConfig, source: SourceSpec, transcript: list | None = None) -> ProtocolOutcome:
    _check_compatible(config, source)
    return _Runner(config, source, reference=False, transcript=transcript).run()


def run_reference_m1(config: ProtocolConfig, source: SourceSpec,
                     transcript: list | None = None) -> ProtocolOutcome:
    """Same as :func:`run` but every bit-estimation and raw-key system is also
    teleported and untwisted before its key-basis measurement."""
    _check_compatible(config, source)
    return _Runner(config, source, reference=True, transcript=transcript).run()


def _check_compatible(config: ProtocolConfig, source: SourceSpec):
    spec = source.target
    if spec.d < 2:
        raise ValueError("key dimension must be at least 2")
    if source.ebit_fidelity < 1:
        for dim in (spec.d_shield_a,) + ((spec.d,) if config.untwist_mode == GLOBAL else ()):
            if dim != 2 ** qubits_for(dim):
                raise ValueError(
                    f"noisy-ebit teleportation needs power-of-2 dims, got {dim}")
