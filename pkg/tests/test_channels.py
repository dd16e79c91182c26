import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdit_qkd.channels import (
    HONEST,
    IID_ATTACK,
    JOINT_ATTACK,
    MAX_JOINT_DIM,
    NoiseChannel,
    SourceSpec,
    basic_copies_attack,
    copy_labels,
    depolarize_key,
    draw_copies,
    ebit_source,
    flip_channels,
    identity_channel,
    key_parity_observables,
    werner_state,
)
from pdit_qkd.metrics import log_negativity
from pdit_qkd.pdit import assemble_pdit, basic_pdit, example_pbit, max_entangled, random_pdit_spec
from pdit_qkd.qcore import DensityMatrix, SystemLayout, expectation, partial_trace, random_density, tensor, trace_distance

seeds = st.integers(0, 2**32 - 1)
ZZ, XX = key_parity_observables()


def parity_errors(rho):
    """``(e_x, e_z)`` as probabilities of -1 outcomes of XX and ZZ on AB."""
    return (1 - expectation(rho, XX, ["A", "B"])) / 2, (1 - expectation(rho, ZZ, ["A", "B"])) / 2


class TestNoiseChannel:
    def test_incomplete_kraus_rejected(self):
        with pytest.raises(ValueError):
            NoiseChannel((0.5 * np.eye(2),), ("A",))

    def test_identity_leaves_state(self, rng):
        rho = random_density(SystemLayout(("A", "B", "A'", "B'"), (2, 2, 2, 2)), rng)
        assert np.max(np.abs(identity_channel()(rho).entries - rho.entries)) < 1e-12

    @given(seeds, st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_outputs_valid(self, seed, q, pb, pp):
        rho = random_density(SystemLayout(("A", "B", "A'", "B'"), (2, 2, 2, 1)), np.random.default_rng(seed))
        assert depolarize_key(q)(rho).is_valid()
        assert flip_channels(pb, pp)(rho).is_valid()


class TestDepolarizeKey:
    def test_zero_is_identity(self, rng):
        rho = assemble_pdit(random_pdit_spec(rng))
        assert np.allclose(depolarize_key(0)(rho).entries, rho.entries)

    def test_full_replaces_key(self, rng):
        shield = random_density(SystemLayout(("A'", "B'"), (2, 2)), rng)
        out = depolarize_key(1)(tensor(max_entangled(2), shield))
        assert np.allclose(out.entries, np.kron(np.eye(4) / 4, shield.entries))

    @pytest.mark.parametrize("q", [0.1, 0.35, 0.6])
    def test_induced_error_rates(self, q):
        ex, ez = parity_errors(depolarize_key(q)(max_entangled(2)))
        assert ex == pytest.approx(q / 2, abs=1e-10)
        assert ez == pytest.approx(q / 2, abs=1e-10)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            depolarize_key(1.5)


class TestFlipChannels:
    def test_zero_is_identity(self):
        assert np.allclose(flip_channels(0, 0)(max_entangled(2)).entries, max_entangled(2).entries)

    def test_full_bit_flip(self):
        assert expectation(flip_channels(1, 0)(max_entangled(2)), ZZ, ["A", "B"]) == pytest.approx(-1)

    def test_phase_flip_rate(self):
        ex, ez = parity_errors(flip_channels(0, 0.2)(max_entangled(2)))
        assert ex == pytest.approx(0.2) and ez == pytest.approx(0, abs=1e-12)

    @pytest.mark.parametrize("pb,pp", [(-0.1, 0), (0, 1.2)])
    def test_out_of_range(self, pb, pp):
        with pytest.raises(ValueError):
            flip_channels(pb, pp)

    def test_non_qubit_target(self):
        qutrits = max_entangled(3)
        with pytest.raises(ValueError):
            flip_channels(0.1, 0.1)(qutrits)


class TestEbitSource:
    def test_exact(self):
        for e in ebit_source(1.0, 3):
            assert trace_distance(e, max_entangled(2)) < 1e-12

    def test_separable_boundary(self):
        assert log_negativity(ebit_source(0.5, 1)[0], (["A"], ["B"])) == pytest.approx(0, abs=1e-10)

    @pytest.mark.parametrize("f", [0.99, 0.9, 0.75])
    def test_trace_distance_to_ebit(self, f):
        diff = werner_state(f).entries - max_entangled(2).entries
        oracle = 0.5 * np.sum(np.linalg.svd(diff, compute_uv=False))
        assert trace_distance(werner_state(f), max_entangled(2)) == pytest.approx(oracle, abs=1e-12)
        assert oracle == pytest.approx(1 - f, abs=1e-12)

    @pytest.mark.parametrize("f", [0.3, 1.1])
    def test_out_of_range(self, f):
        with pytest.raises(ValueError):
            ebit_source(f, 1)


class TestSourceSpec:
    def test_iid_needs_channel(self):
        with pytest.raises(ValueError):
            SourceSpec(IID_ATTACK, example_pbit(2))

    def test_honest_takes_no_channel(self):
        with pytest.raises(ValueError):
            SourceSpec(HONEST, example_pbit(2), channel=depolarize_key(0.1))

    def test_joint_needs_state(self):
        with pytest.raises(ValueError):
            SourceSpec(JOINT_ATTACK, example_pbit(2))

    def test_joint_layout_checked(self):
        with pytest.raises(ValueError):
            SourceSpec(JOINT_ATTACK, example_pbit(2), joint_state=assemble_pdit(example_pbit(2)))

    def test_joint_dimension_cap(self):
        spec = example_pbit(2)
        assert basic_copies_attack(spec, 3).dim == MAX_JOINT_DIM
        with pytest.raises(ValueError):
            basic_copies_attack(spec, 4)



class TestDrawCopies:
    def test_honest(self):
        copies = draw_copies(SourceSpec(HONEST, example_pbit(2)), 3)
        assert len(copies) == 3
        for c in copies:
            assert np.array_equal(c.entries, assemble_pdit(example_pbit(2)).entries)

    def test_iid_zero_noise_is_honest(self):
        spec = example_pbit(2)
        copies = draw_copies(SourceSpec(IID_ATTACK, spec, depolarize_key(0)), 2)
        assert np.allclose(copies[0].entries, assemble_pdit(spec).entries)

    def test_iid_copies_identical_and_moved(self):
        spec = example_pbit(2)
        copies = draw_copies(SourceSpec(IID_ATTACK, spec, depolarize_key(0.1)), 4)
        assert trace_distance(copies[0], assemble_pdit(spec)) > 0
        assert all(np.array_equal(c.entries, copies[0].entries) for c in copies)

    def test_joint_blocks_and_truncation(self):
        spec = example_pbit(2)
        source = SourceSpec(JOINT_ATTACK, spec, joint_state=basic_copies_attack(spec, 2))
        blocks = draw_copies(source, 5)
        assert [len(b.labels) // 4 for b in blocks] == [2, 2, 1]
        last = blocks[-1]
        assert last.labels == copy_labels(0)
        expected = basic_pdit(spec).relabel(dict(zip(("A", "B", "A'", "B'"), copy_labels(0))))
        assert np.allclose(last.entries, expected.entries)

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            draw_copies(SourceSpec(HONEST, example_pbit(2)), 0)


def test_basic_copies_attack_marginals():
    spec = example_pbit(2)
    joint = basic_copies_attack(spec, 2)
    one = partial_trace(joint, copy_labels(1))
    assert np.allclose(one.entries, basic_pdit(spec).entries)
