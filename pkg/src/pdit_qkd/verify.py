"""Quick self-checks run by ``pdit-qkd verify``.

Each check returns ``(name, passed, detail)``; together they take a few
seconds and exercise every module once.
"""

from __future__ import annotations

import numpy as np

from .channels import HONEST, SourceSpec, werner_visibility
from .metrics import ed_bound_example, log_negativity
from .pdit import (
    assemble_pdit,
    basic_pdit,
    ccq_of,
    example_pbit,
    example_pbit_weight,
    is_ideal_ccq,
    random_pdit_spec,
    untwist_local,
)
from .postprocess import ec_pa
from .protocol import ProtocolConfig, run, run_reference_m1
from .qcore import DensityMatrix, apply_unitary, tensor, trace_distance


def _ideal_random_pdits(rng):
    for _ in range(10):
        spec = random_pdit_spec(rng, 2, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        c = ccq_of(assemble_pdit(spec), spec.d)
        if not is_ideal_ccq(c, 1e-9):
            return False, "random pdit failed the ideal-key test"
    return True, "10 random pdits give ideal keys"


def _werner_not_ideal(rng):
    for v in rng.uniform(0.2, 0.95, size=5):
        w = werner_visibility(v)
        shield = DensityMatrix.maximally_mixed(example_pbit(2).shield_layout)
        full = tensor(w, shield)
        if is_ideal_ccq(ccq_of(full, 2), 1e-3):
            return False, f"Werner state v={v:.3f} passed as ideal"
    return True, "5 Werner controls rejected"


def _untwist_identity(rng):
    spec = random_pdit_spec(rng, 2, 2, 3)
    out = apply_unitary(assemble_pdit(spec), untwist_local(spec), ["B", "A'", "B'"])
    dist = trace_distance(out, basic_pdit(spec))
    return dist < 1e-10, f"distance {dist:.2e}"


def _example_weight(rng):
    errs = []
    for d in (2, 3, 4):
        shield = example_pbit(d).shield.entries
        errs.append(float(np.max(np.abs(shield - np.eye(d * d) / d**2))))
        errs.append(abs(example_pbit_weight(d) - (1 + 1 / d) / 2))
    return max(errs) < 1e-12, f"max deviation {max(errs):.1e}"


def _log_negativity_bound(rng):
    gaps = []
    for d in (2, 4):
        ln = log_negativity(assemble_pdit(example_pbit(d)), (["A", "A'"], ["B", "B'"]))
        gaps.append(ln - ed_bound_example(d))
    return max(gaps) <= 1e-9, f"max excess {max(gaps):.1e}"


def _m_equals_m1(rng):
    spec = example_pbit(2)
    cfg = ProtocolConfig(n=400, k=60, m=40, t=20, seed=int(rng.integers(1 << 31)))
    src = SourceSpec(HONEST, spec)
    a, b = run(cfg, src), run_reference_m1(cfg, src)
    same = a.raw_key_alice == b.raw_key_alice and a.e_z_est == b.e_z_est
    return same, f"raw length {a.raw_len}"


def _ec_pa_agreement(rng):
    alice = rng.integers(0, 2, size=4000)
    bob = alice ^ (rng.random(4000) < 0.05)
    res = ec_pa(alice, bob, 0.05, 0.05, rng)
    ok = not res.aborted and np.array_equal(res.alice, res.bob)
    return ok, f"final length {len(res.alice)}"


CHECKS = (
    ("random pdits are ideal", _ideal_random_pdits),
    ("Werner controls are not ideal", _werner_not_ideal),
    ("local untwisting", _untwist_identity),
    ("example pbit shield", _example_weight),
    ("log-negativity bound", _log_negativity_bound),
    ("reference run agrees", _m_equals_m1),
    ("reconciliation agrees", _ec_pa_agreement),
)


def run_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []
    for name, check in CHECKS:
        try:
            ok, detail = check(rng)
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
