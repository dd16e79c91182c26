import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from pdit_qkd.pdit import KEY_A, KEY_B, bell_state, example_pbit, assemble_pdit, max_entangled, sym_antisym_states
from pdit_qkd.qcore import (
    SX,
    SZ,
    DensityMatrix,
    SystemLayout,
    UnitaryOp,
    apply_unitary,
    binary_entropy,
    expectation,
    fidelity,
    haar_unitary,
    measure_computational,
    outcome_distribution,
    partial_trace,
    permute,
    purify,
    random_density,
    tensor,
    trace_distance,
)

QUBIT_A = SystemLayout(("A",), (2,))
QUBIT_B = SystemLayout(("B",), (2,))
seeds = st.integers(0, 2**32 - 1)


def ket(bit, layout):
    return DensityMatrix.basis([bit], layout)


class TestSystemLayout:
    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            SystemLayout(("A", "A"), (2, 2))

    def test_nonpositive_dimension_rejected(self):
        with pytest.raises(ValueError):
            SystemLayout(("A",), (0,))

    def test_total_dim_is_product(self):
        assert SystemLayout(("A", "B", "C"), (2, 3, 5)).total_dim == 30


class TestDensityMatrix:
    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError):
            DensityMatrix.from_array(np.array([[0.5, 0.1], [0.0, 0.5]]), QUBIT_A)

    def test_rejects_bad_trace(self):
        with pytest.raises(ValueError):
            DensityMatrix.from_array(np.eye(2), QUBIT_A)

    def test_rejects_negative_eigenvalue(self):
        with pytest.raises(ValueError):
            DensityMatrix.from_array(np.diag([1.1, -0.1]), QUBIT_A)

    def test_clip_repairs_rounding_noise(self):
        rho = DensityMatrix.from_array(np.diag([1 + 1e-9, -1e-9]), QUBIT_A, clip=True)
        assert rho.eigenvalues().min() >= 0
        assert abs(np.trace(rho.entries) - 1) < 1e-12

    def test_clip_refuses_large_violation(self):
        with pytest.raises(ValueError):
            DensityMatrix.from_array(np.diag([1.01, -0.01]), QUBIT_A, clip=True)

    def test_entries_are_read_only(self):
        rho = DensityMatrix.maximally_mixed(QUBIT_A)
        with pytest.raises(ValueError):
            rho.entries[0, 0] = 1


class TestUnitaryOp:
    def test_rejects_non_unitary(self):
        with pytest.raises(ValueError):
            UnitaryOp(QUBIT_A, np.array([[1, 1], [0, 1]]))

    def test_dagger_inverts(self, rng):
        u = UnitaryOp(QUBIT_A, haar_unitary(2, rng))
        assert np.allclose(u.entries @ u.dagger.entries, np.eye(2))


class TestTensor:
    def test_basis_product(self):
        out = tensor(ket(0, QUBIT_A), ket(1, QUBIT_B))
        assert out.labels == ("A", "B")
        assert np.allclose(out.entries, DensityMatrix.basis([0, 1], QUBIT_A + QUBIT_B).entries)

    def test_maximally_mixed_product(self):
        out = tensor(DensityMatrix.maximally_mixed(QUBIT_A), DensityMatrix.maximally_mixed(QUBIT_B))
        assert np.allclose(out.entries, np.eye(4) / 4)

    def test_label_collision(self):
        with pytest.raises(ValueError):
            tensor(ket(0, QUBIT_A), ket(0, QUBIT_A))

    @given(seeds)
    def test_trace_multiplicative(self, seed):
        rho = random_density(SystemLayout(("A'", "B'"), (2, 3)), np.random.default_rng(seed))
        assert abs(np.trace(tensor(max_entangled(2), rho).entries) - 1) < 1e-12


class TestPartialTrace:
    def test_ebit_marginal(self):
        assert np.allclose(partial_trace(max_entangled(2), ["A"]).entries, np.eye(2) / 2)

    @given(seeds)
    def test_product_marginal(self, seed):
        rng = np.random.default_rng(seed)
        rho = random_density(QUBIT_A, rng)
        sigma = random_density(SystemLayout(("B", "C"), (3, 2)), rng)
        assert np.allclose(partial_trace(tensor(rho, sigma), ["A"]).entries, rho.entries, atol=1e-12)

    def test_example_pbit_shield_marginal(self):
        rho_s, rho_a = sym_antisym_states(2)
        out = partial_trace(assemble_pdit(example_pbit(2)), ["A'", "B'"])
        assert np.allclose(out.entries, 0.75 * rho_s + 0.25 * rho_a, atol=1e-12)

    def test_keep_order_is_respected(self, rng):
        rho = random_density(SystemLayout(("A", "B", "C"), (2, 3, 2)), rng)
        ab = partial_trace(rho, ["A", "B"])
        ba = partial_trace(rho, ["B", "A"])
        assert np.allclose(permute(ba, ["A", "B"]).entries, ab.entries)

    def test_unknown_label(self):
        with pytest.raises(KeyError):
            partial_trace(max_entangled(2), ["Z"])


class TestApplyUnitary:
    def test_identity(self, rng):
        rho = random_density(SystemLayout(("A", "B"), (2, 3)), rng)
        out = apply_unitary(rho, UnitaryOp.identity(SystemLayout(("B",), (3,))), ["B"])
        assert np.allclose(out.entries, rho.entries)

    def test_reversible(self, rng):
        lay = SystemLayout(("A", "B", "C"), (2, 2, 2))
        rho = random_density(lay, rng)
        u = UnitaryOp(SystemLayout(("x", "y"), (2, 2)), haar_unitary(4, rng))
        back = apply_unitary(apply_unitary(rho, u, ["C", "A"]), u.dagger, ["C", "A"])
        assert np.max(np.abs(back.entries - rho.entries)) < 1e-12

    @given(seeds)
    def test_spectrum_preserved(self, seed):
        rng = np.random.default_rng(seed)
        rho = random_density(SystemLayout(("A", "B", "C"), (2, 2, 2)), rng)
        u = UnitaryOp(SystemLayout(("x", "y"), (2, 2)), haar_unitary(4, rng))
        out = apply_unitary(rho, u, ["B", "C"])
        assert np.allclose(np.sort(out.eigenvalues()), np.sort(rho.eigenvalues()), atol=1e-10)
        assert out.is_valid()

    def test_matches_kron_embedding(self, rng):
        rho = random_density(SystemLayout(("A", "B"), (2, 3)), rng)
        u = haar_unitary(3, rng)
        out = apply_unitary(rho, UnitaryOp(SystemLayout(("B",), (3,)), u), ["B"])
        big = np.kron(np.eye(2), u)
        assert np.allclose(out.entries, big @ rho.entries @ big.conj().T)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_unitary(max_entangled(2), UnitaryOp.identity(SystemLayout(("x",), (3,))), ["A"])


class TestMeasurement:
    def test_basis_state_is_deterministic(self, rng):
        rho = DensityMatrix.basis([0, 1], QUBIT_A + QUBIT_B)
        outcome, post, prob = measure_computational(rho, ["A", "B"], rng)
        assert outcome == (0, 1) and prob == 1 and post is None

    def test_ebit_outcomes_agree(self, rng):
        seen = {measure_computational(max_entangled(2), ["A", "B"], rng)[0] for _ in range(200)}
        assert seen == {(0, 0), (1, 1)}

    def test_post_state_is_conditional(self, rng):
        outcome, post, prob = measure_computational(max_entangled(2), ["A"], rng)
        assert prob == pytest.approx(0.5)
        assert np.allclose(post.entries, DensityMatrix.basis(outcome, QUBIT_B).entries)

    def test_seed_reproduces_sequence(self):
        rho = random_density(SystemLayout(("A", "B"), (2, 2)), np.random.default_rng(5))
        def sequence():
            g = np.random.default_rng(9)
            return [measure_computational(rho, ["A", "B"], g)[0] for _ in range(50)]

        assert sequence() == sequence()

    def test_born_frequencies_within_binomial_bounds(self):
        rho = random_density(SystemLayout(("A", "B"), (2, 2)), np.random.default_rng(17))
        probs = outcome_distribution(rho, ["A", "B"]).reshape(-1)
        rng = np.random.default_rng(19)
        n = 100_000
        counts = np.zeros(4)
        for _ in range(n):
            a, b = measure_computational(rho, ["A", "B"], rng)[0]
            counts[2 * a + b] += 1
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) <= 3 * sigma)
        assert chisquare(counts, n * probs).pvalue > 1e-3

    def test_born_distribution_matches_diagonal(self, rng):
        rho = random_density(SystemLayout(("A", "B"), (2, 3)), rng)
        probs = outcome_distribution(rho, ["A", "B"])
        assert np.allclose(probs.reshape(-1), np.diag(rho.entries).real)


class TestExpectation:
    def test_ebit_parities(self):
        assert expectation(max_entangled(2), np.kron(SZ, SZ), ["A", "B"]) == pytest.approx(1)
        assert expectation(max_entangled(2), np.kron(SX, SX), ["A", "B"]) == pytest.approx(1)

    def test_psi_minus_xx(self):
        assert expectation(bell_state(-1), np.kron(SX, SX), [KEY_A, KEY_B]) == pytest.approx(-1)

    def test_non_hermitian_rejected(self):
        with pytest.raises(ValueError):
            expectation(max_entangled(2), np.array([[0, 1], [0, 0]]), ["A"])


class TestPurify:
    def test_pure_state_gets_trivial_environment(self):
        out = purify(ket(1, QUBIT_A))
        assert out.layout.dim_of("E") == 1
        assert np.allclose(out.entries, ket(1, QUBIT_A).entries)

    def test_maximally_mixed_qubit(self):
        out = purify(DensityMatrix.maximally_mixed(QUBIT_A))
        assert out.layout.dim_of("E") == 2
        assert np.max(out.eigenvalues()) == pytest.approx(1)
        assert np.allclose(partial_trace(out, ["E"]).entries, np.eye(2) / 2)

    @given(seeds)
    def test_round_trip(self, seed):
        rho = random_density(SystemLayout(("A", "B"), (2, 2)), np.random.default_rng(seed))
        out = purify(rho)
        assert np.max(out.eigenvalues()) == pytest.approx(1, abs=1e-10)
        assert np.max(np.abs(partial_trace(out, ["A", "B"]).entries - rho.entries)) < 1e-10

    def test_rank_sets_environment_size(self, rng):
        rho = random_density(SystemLayout(("A", "B"), (2, 2)), rng, rank=2)
        assert purify(rho).layout.dim_of("E") == 2


class TestDistances:
    def test_trace_distance_values(self):
        zero, one = ket(0, QUBIT_A), ket(1, QUBIT_A)
        assert trace_distance(zero, zero) == pytest.approx(0)
        assert trace_distance(zero, one) == pytest.approx(1)
        assert trace_distance(DensityMatrix.maximally_mixed(QUBIT_A), zero) == pytest.approx(0.5)

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            trace_distance(ket(0, QUBIT_A), ket(0, QUBIT_B))

    @given(seeds)
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        lay = SystemLayout(("A", "B"), (2, 2))
        a, b, c = (random_density(lay, rng) for _ in range(3))
        assert trace_distance(a, b) == trace_distance(b, a)
        assert trace_distance(a, c) <= trace_distance(a, b) + trace_distance(b, c) + 1e-9
        assert 0 <= trace_distance(a, b) <= 1

    def test_fidelity_values(self):
        zero, one = ket(0, QUBIT_A), ket(1, QUBIT_A)
        assert fidelity(zero, zero) == pytest.approx(1)
        assert fidelity(zero, one) == pytest.approx(0, abs=1e-12)

    @pytest.mark.parametrize("v", [0.0, 0.3, 0.8, 1.0])
    def test_fidelity_with_werner(self, v):
        from pdit_qkd.channels import werner_visibility

        assert fidelity(max_entangled(2), werner_visibility(v)) == pytest.approx((1 + 3 * v) / 4)

    @given(seeds)
    def test_fidelity_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = (random_density(QUBIT_A + QUBIT_B, rng) for _ in range(2))
        assert fidelity(a, b) == pytest.approx(fidelity(b, a), abs=1e-9)


class TestBinaryEntropy:
    def test_values(self):
        assert binary_entropy(0) == 0
        assert binary_entropy(0.5) == pytest.approx(1)
        # 30-digit mpmath evaluation
        assert binary_entropy(0.11) == pytest.approx(0.499915958164528, abs=1e-12)

    def test_matches_definition(self):
        x = 0.2
        assert binary_entropy(x) == pytest.approx(-x * math.log2(x) - (1 - x) * math.log2(1 - x))

    @pytest.mark.parametrize("x", [-0.1, 1.1])
    def test_out_of_range(self, x):
        with pytest.raises(ValueError):
            binary_entropy(x)
