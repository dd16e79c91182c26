"""Classical error correction and privacy amplification on raw key bits.

Two-way stage (Gottesman and Lo, IEEE Trans. Inf. Theory 49, 457 (2003)):

* B step: bits are paired, both sides announce each pair's parity, the first
  bit of every agreeing pair is kept.  In the entanglement picture this is a
  bilateral CNOT followed by a Z measurement of the target pair, which maps
  errors ``(x1, z1), (x2, z2)`` on the kept pair to ``(x1, z1 ^ z2)`` and
  post-selects on ``x1 == x2``.
* P step: bits are grouped in threes and replaced by their XOR.  This is the
  three-qubit phase-flip code: the logical bit error is ``x1 ^ x2 ^ x3`` and the
  logical phase error is the majority of ``z1, z2, z3``.

The joint bit/phase error distribution starts as a product of the estimated
marginals and is propagated exactly through each step.  The one-way stage
reconciles with syndromes of random column-weight-3 LDPC codes decoded by
belief propagation and checked with a 32-bit random parity hash, then
compresses with a random Toeplitz matrix.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .qcore import binary_entropy

SAFETY_BITS = 40
FAILURE_EXPONENT = 32
ROUND_CAP = 10
SYNDROME_OVERHEAD = 1.6
MAX_RECONCILE_ATTEMPTS = 6
BP_ITERATIONS = 80


def _h(x: float) -> float:
    return binary_entropy(min(max(x, 0.0), 1.0))


def error_table(e_x: float, e_z: float) -> np.ndarray:
    """``p[x, z]``: probability of bit error ``x`` and phase error ``z``,
    assuming the two are independent."""
    bit = np.array([1 - e_z, e_z])
    phase = np.array([1 - e_x, e_x])
    return np.outer(bit, phase)


def rates_of(p: np.ndarray) -> tuple[float, float]:
    """(phase error rate, bit error rate) of an error table."""
    return float(p[:, 1].sum()), float(p[1, :].sum())


def b_step_table(p: np.ndarray) -> np.ndarray:
    out = np.zeros((2, 2))
    for (x1, z1), (x2, z2) in itertools.product(itertools.product((0, 1), repeat=2), repeat=2):
        if x1 == x2:
            out[x1, z1 ^ z2] += p[x1, z1] * p[x2, z2]
    return out / out.sum()


def p_step_table(p: np.ndarray) -> np.ndarray:
    out = np.zeros((2, 2))
    for errs in itertools.product(itertools.product((0, 1), repeat=2), repeat=3):
        w = math.prod(p[x, z] for x, z in errs)
        x = errs[0][0] ^ errs[1][0] ^ errs[2][0]
        z = int(sum(e[1] for e in errs) >= 2)
        out[x, z] += w
    return out


def rate_of(p: np.ndarray) -> float:
    e_x, e_z = rates_of(p)
    return 1 - _h(e_x) - _h(e_z)


def b_step(alice: np.ndarray, bob: np.ndarray):
    half = len(alice) // 2
    a = alice[: 2 * half].reshape(half, 2)
    b = bob[: 2 * half].reshape(half, 2)
    pa = a[:, 0] ^ a[:, 1]
    pb = b[:, 0] ^ b[:, 1]
    keep = pa == pb
    return a[keep, 0].copy(), b[keep, 0].copy(), pa, pb


def p_step(alice: np.ndarray, bob: np.ndarray):
    third = len(alice) // 3
    a = alice[: 3 * third].reshape(third, 3)
    b = bob[: 3 * third].reshape(third, 3)
    return np.bitwise_xor.reduce(a, axis=1), np.bitwise_xor.reduce(b, axis=1)


# ---------------------------------------------------------------------------
# one-way reconciliation


@dataclass
class ParityCheck:
    """Sparse binary matrix given by its edge list (sorted by check)."""

    n_checks: int
    n_vars: int
    check: np.ndarray
    var: np.ndarray

    def syndrome(self, bits: np.ndarray) -> np.ndarray:
        s = np.bincount(self.check, weights=bits[self.var], minlength=self.n_checks)
        return (s.astype(np.int64) % 2).astype(np.uint8)


def random_ldpc(n_vars: int, n_checks: int, rng: np.random.Generator, col_weight: int = 3):
    w = min(col_weight, n_checks)
    var = np.repeat(np.arange(n_vars), w)
    slots = np.arange(n_vars * w) % n_checks
    check = rng.permutation(slots)
    code = check.astype(np.int64) * n_vars + var
    uniq, counts = np.unique(code, return_counts=True)
    uniq = uniq[counts % 2 == 1]
    check, var = np.divmod(uniq, n_vars)
    return ParityCheck(n_checks, n_vars, check, var)


def bp_decode(h: ParityCheck, syndrome: np.ndarray, p: float, iterations: int = BP_ITERATIONS):
    """Find an error pattern ``e`` with ``H e = syndrome`` on a binary symmetric
    channel with crossover ``p`` (log-domain sum-product)."""
    n = h.n_vars
    p = min(max(p, 1e-6), 0.5 - 1e-6)
    prior = math.log((1 - p) / p)
    if h.check.size == 0:
        return np.zeros(n, dtype=np.uint8), np.all(syndrome == 0)
    check, var = h.check, h.var
    starts = np.flatnonzero(np.r_[True, check[1:] != check[:-1]])
    present = check[starts]
    sign_flip = np.where(syndrome[check] == 1, -1.0, 1.0)
    m_vc = np.full(check.size, prior)
    e_hat = np.zeros(n, dtype=np.uint8)
    for _ in range(iterations):
        t = np.tanh(np.clip(m_vc, -40, 40) / 2)
        mag = np.clip(np.abs(t), 1e-300, None)
        logs = np.log(mag)
        neg = (t < 0).astype(np.int64)
        tot_log = np.zeros(h.n_checks)
        tot_neg = np.zeros(h.n_checks, dtype=np.int64)
        tot_log[present] = np.add.reduceat(logs, starts)
        tot_neg[present] = np.add.reduceat(neg, starts)
        excl = np.exp(tot_log[check] - logs)
        excl = np.clip(excl, 0, 1 - 1e-15)
        sgn = np.where((tot_neg[check] - neg) % 2 == 1, -1.0, 1.0) * sign_flip
        m_cv = sgn * 2 * np.arctanh(excl)
        total = prior + np.bincount(var, weights=m_cv, minlength=n)
        e_hat = (total < 0).astype(np.uint8)
        if np.array_equal(h.syndrome(e_hat), syndrome):
            return e_hat, True
        m_vc = total[var] - m_cv
    return e_hat, False


def parity_hash(bits: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return (matrix.astype(np.int64) @ bits.astype(np.int64) % 2).astype(np.uint8)


@dataclass
class ReconcileResult:
    bob: np.ndarray
    success: bool
    leaked: int
    attempts: int


def reconcile(alice: np.ndarray, bob: np.ndarray, e_z: float, rng: np.random.Generator,
              transcript: list | None = None,
              failure_exponent: int = FAILURE_EXPONENT) -> ReconcileResult:
    """Correct Bob's string towards Alice's with one-way syndromes.

    The first syndrome is sized for ``e_z``.  If the verification hash fails,
    Bob reports failure and Alice sends a fresh syndrome sized for a doubled
    error rate, up to ``MAX_RECONCILE_ATTEMPTS`` times.
    """
    n = len(alice)
    leaked = 0
    if n == 0:
        return ReconcileResult(bob.copy(), True, 0, 0)
    guesses = [e_z] if e_z > 0 else [0.0]
    while len(guesses) < MAX_RECONCILE_ATTEMPTS:
        guesses.append(min(0.5, max(2 * guesses[-1], 0.01)))
    for attempt, guess in enumerate(guesses, start=1):
        if guess > 0:
            s = min(n, math.ceil(SYNDROME_OVERHEAD * n * _h(guess)) + 16)
            code = random_ldpc(n, s, rng)
            syn_a = code.syndrome(alice)
            leaked += s
            target = syn_a ^ code.syndrome(bob)
            err, _ = bp_decode(code, target, guess)
            corrected = bob ^ err
        else:
            syn_a = np.zeros(0, dtype=np.uint8)
            corrected = bob.copy()
        hash_matrix = rng.integers(0, 2, size=(failure_exponent, n), dtype=np.uint8)
        ha, hb = parity_hash(alice, hash_matrix), parity_hash(corrected, hash_matrix)
        leaked += failure_exponent
        ok = bool(np.array_equal(ha, hb))
        if transcript is not None:
            transcript.append({
                "stage": "reconcile", "attempt": attempt, "error_guess": guess,
                "syndrome": _bitstr(syn_a), "hash": _bitstr(ha), "bob_ok": ok,
            })
        if ok:
            return ReconcileResult(corrected, True, leaked, attempt)
    return ReconcileResult(bob.copy(), False, leaked, len(guesses))


# ---------------------------------------------------------------------------
# privacy amplification


def toeplitz_hash(bits: np.ndarray, seed_bits: np.ndarray, out_len: int) -> np.ndarray:
    """Multiply ``bits`` by the ``out_len x len(bits)`` Toeplitz matrix
    ``T[i, j] = seed_bits[i - j + len(bits) - 1]`` over GF(2)."""
    n = len(bits)
    if out_len <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    if len(seed_bits) != out_len + n - 1:
        raise ValueError("Toeplitz seed must have out_len + n - 1 bits")
    size = 1 << (out_len + 2 * n - 2).bit_length()
    conv = np.fft.irfft(np.fft.rfft(seed_bits.astype(float), size)
                        * np.fft.rfft(bits.astype(float), size), size)
    full = np.rint(conv[n - 1: n - 1 + out_len]).astype(np.int64)
    return (full % 2).astype(np.uint8)


@dataclass
class PostProcessResult:
    alice: np.ndarray
    bob: np.ndarray
    aborted: bool = False
    reason: str | None = None
    e_x_final: float = 0.0
    e_z_final: float = 0.0
    steps: list = field(default_factory=list)
    two_way_len: int = 0
    leaked: int = 0

    def __iter__(self):
        return iter((self.alice, self.bob))


def ec_pa(alice_bits, bob_bits, e_x_est: float, e_z_est: float, rng: np.random.Generator,
          *, safety_bits: int = SAFETY_BITS, round_cap: int = ROUND_CAP,
          failure_exponent: int = FAILURE_EXPONENT,
          transcript: list | None = None) -> PostProcessResult:
    """Two-way B/P rounds until the one-way rate is positive, then syndrome
    reconciliation and Toeplitz privacy amplification to
    ``floor(l * (1 - h(e_x') - h(e_z'))) - safety_bits`` bits."""
    alice = np.asarray(alice_bits, dtype=np.uint8).copy()
    bob = np.asarray(bob_bits, dtype=np.uint8).copy()
    if alice.shape != bob.shape:
        raise ValueError("raw keys differ in length")
    for name, e in (("e_x_est", e_x_est), ("e_z_est", e_z_est)):
        if not 0 <= e < 0.5:
            raise ValueError(f"{name}={e} outside [0, 1/2)")

    empty = np.zeros(0, dtype=np.uint8)
    table = error_table(e_x_est, e_z_est)
    steps: list[str] = []
    rounds = 0
    while rate_of(table) <= 0:
        if rounds >= round_cap:
            ex, ez = rates_of(table)
            return PostProcessResult(empty, empty, True, "round_cap", ex, ez, steps, len(alice))
        rounds += 1
        for kind in ("B", "P"):
            if kind == "B":
                alice, bob, pa, pb = b_step(alice, bob)
                table = b_step_table(table)
                if transcript is not None:
                    transcript.append({"stage": "b_step", "round": rounds,
                                       "alice_parities": _bitstr(pa), "bob_parities": _bitstr(pb)})
            else:
                alice, bob = p_step(alice, bob)
                table = p_step_table(table)
                if transcript is not None:
                    transcript.append({"stage": "p_step", "round": rounds})
            steps.append(kind)
            if rate_of(table) > 0 or len(alice) == 0:
                break
        if len(alice) == 0:
            ex, ez = rates_of(table)
            return PostProcessResult(empty, empty, True, "exhausted", ex, ez, steps, 0)

    e_x_f, e_z_f = rates_of(table)
    ell = len(alice)
    out_len = math.floor(ell * (1 - _h(e_x_f) - _h(e_z_f))) - safety_bits
    if out_len <= 0:
        return PostProcessResult(empty, empty, True, "length", e_x_f, e_z_f, steps, ell)

    rec = reconcile(alice, bob, e_z_f, rng, transcript, failure_exponent)
    if not rec.success:
        return PostProcessResult(empty, empty, True, "reconcile", e_x_f, e_z_f, steps, ell,
                                 rec.leaked)
    seed = rng.integers(0, 2, size=out_len + ell - 1, dtype=np.uint8)
    if transcript is not None:
        transcript.append({"stage": "privacy_amplification", "out_len": out_len,
                           "toeplitz_seed": _bitstr(seed)})
    return PostProcessResult(
        toeplitz_hash(alice, seed, out_len), toeplitz_hash(rec.bob, seed, out_len),
        False, None, e_x_f, e_z_f, steps, ell, rec.leaked,
    )


def _bitstr(bits) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits).reshape(-1))
