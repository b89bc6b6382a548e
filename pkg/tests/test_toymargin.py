"""Tests for the tabular margin experiment."""

import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from seqmargin import numkernel as nk
from seqmargin import toymargin as tm


class TestSequenceSpace:
    def test_size(self):
        for ell in (2, 3, 5):
            assert len(tm.SequenceSpace(ell)) == 2 ** (ell - 1) + 1

    def test_full_mode_size(self):
        assert len(tm.SequenceSpace(3, include_unreachable=True)) == 2 ** 3 + 1

    def test_prefix_sets(self):
        space = tm.SequenceSpace(3)
        assert space.prefixes_at(1) == ["0", "1"]
        assert space.prefixes_at(2) == ["10", "11"]
        assert space.prefixes_at(3) == ["100", "101", "110", "111"]

    def test_positives(self):
        space = tm.SequenceSpace(2)
        assert space.positives == ["10", "11"]


class TestGenerator:
    def test_two_token_probabilities(self):
        """P("0")=0.4, P("11")=0.54, P("10")=0.06 for ell=2."""
        cfg = tm.ToyConfig(ell=2, n_samples=1_000_000, seed=3)
        freq = Counter(tm.generate_toy_data(cfg))
        n = cfg.n_samples
        for seq, p in (("0", 0.4), ("11", 0.54), ("10", 0.06)):
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq[seq] / n - p) < 3 * se

    def test_three_token_modal_mass(self):
        """The all-ones positive keeps mass 0.6*0.9 independent of length."""
        cfg = tm.ToyConfig(ell=3, n_samples=1_000_000, seed=4)
        freq = Counter(tm.generate_toy_data(cfg))
        n = cfg.n_samples
        se = math.sqrt(0.54 * 0.46 / n)
        assert abs(freq["111"] / n - 0.54) < 3 * se

    def test_deterministic_per_seed(self):
        cfg = tm.ToyConfig(ell=4, n_samples=500, seed=9)
        assert tm.generate_toy_data(cfg) == tm.generate_toy_data(cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tm.ToyConfig(ell=1)
        with pytest.raises(ValueError):
            tm.ToyConfig(c=-0.1)


def fd_error(model, seq, c, loss_fn, seeded=1):
    """Relative error of the analytic gradient via the shared checker."""
    p = nk.Parameter(model.theta)
    model.theta = p.value  # share storage so perturbations reach the model

    def loss():
        val, grad = loss_fn(model, seq, c)
        p.grad += grad
        return val

    return nk.finite_diff_check(loss, [p], eps=1e-5)


class TestLossGlobal:
    def test_uniform_value(self):
        model = tm.TabularGlobalModel(tm.SequenceSpace(2))
        loss, grad = tm.loss_global(model, "11", 0.0)
        assert loss == pytest.approx(math.log(3), abs=1e-12)

    def test_prior_adds_zero_at_origin(self):
        model = tm.TabularGlobalModel(tm.SequenceSpace(2))
        loss_c0, _ = tm.loss_global(model, "11", 0.0)
        loss_c1, _ = tm.loss_global(model, "11", 1.0)
        assert loss_c0 == loss_c1

    def test_unknown_sequence(self):
        model = tm.TabularGlobalModel(tm.SequenceSpace(2))
        with pytest.raises(ValueError):
            tm.loss_global(model, "01", 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            model = tm.TabularGlobalModel(tm.SequenceSpace(3))
            model.theta[...] = rng.normal(scale=0.5, size=model.theta.size)
            seq = ["0", "111", "101"][seed % 3]
            assert fd_error(model, seq, 0.3, tm.loss_global) < 1e-8


class TestLossLocal:
    def test_uniform_value(self):
        model = tm.TabularLocalModel(tm.SequenceSpace(2))
        loss, _ = tm.loss_local(model, "11", 0.0)
        assert loss == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_negative_example_has_single_term(self):
        model = tm.TabularLocalModel(tm.SequenceSpace(2))
        loss, grad = tm.loss_local(model, "0", 0.0)
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        # only the level-1 parameters receive gradient
        assert np.nonzero(grad)[0].tolist() == [
            model.prefix_index["0"], model.prefix_index["1"]]

    def test_sign_reflection_symmetry(self):
        """The e^(-theta) form is a pure relabeling: negating theta flips
        every within-block log-odds, so the two parameterizations span the
        same distributions."""
        rng = np.random.default_rng(6)
        model = tm.TabularLocalModel(tm.SequenceSpace(3))
        model.theta[...] = rng.normal(size=model.theta.size)
        lp0, lp1 = model.first_position_logprobs()
        margin_at_theta = tm.measure_local_margin(model)
        model.theta *= -1.0
        lp0n, lp1n = model.first_position_logprobs()
        assert lp1 - lp0 == pytest.approx(lp0n - lp1n, abs=1e-12)
        assert tm.measure_local_margin(model) == pytest.approx(
            -margin_at_theta, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for scope in ("prefix_marginal", "continuation"):
            for seq in ("0", "111", "100"):
                model = tm.TabularLocalModel(tm.SequenceSpace(3), scope)
                model.theta[...] = rng.normal(scale=0.5, size=model.theta.size)
                assert fd_error(model, seq, 0.2, tm.loss_local) < 1e-8

    def test_continuation_blocks_are_sibling_pairs(self):
        model = tm.TabularLocalModel(tm.SequenceSpace(3), "continuation")
        terms = model.example_terms("110")
        # level 1 block has both first tokens; level>=2 blocks have width 2
        sizes = [int(model.block_size[b]) for b, _ in terms]
        assert sizes == [2, 2, 2]


class TestTrainToy:
    def test_zero_epochs_unchanged(self):
        space = tm.SequenceSpace(2)
        model = tm.TabularGlobalModel(space)
        before = model.theta.copy()
        tm.train_toy(model, ["11", "0"], tm.ToyConfig(epochs=0))
        np.testing.assert_array_equal(model.theta, before)

    def test_kernel_step_equals_reference_gradient_step(self):
        """One kernel update == Adagrad applied to the reference gradient."""
        for scope in ("prefix_marginal", "continuation"):
            space = tm.SequenceSpace(3)
            model = tm.TabularLocalModel(space, scope)
            rng = np.random.default_rng(8)
            model.theta[...] = rng.normal(scale=0.3, size=model.theta.size)
            start = model.theta.copy()
            c, lr = 0.25, 0.1
            ref_model = tm.TabularLocalModel(space, scope)
            ref_model.theta[...] = start
            _, grad = tm.loss_local(ref_model, "110", c)
            expected = start - lr * grad / (np.sqrt(grad * grad) + tm.ADAGRAD_DELTA)
            # the kernel leaves untouched coordinates alone (grad treated as absent)
            untouched = grad == 0
            expected[untouched] = start[untouched]
            cfg = tm.ToyConfig(ell=3, c=c, lr=lr, epochs=1, n_samples=1)
            tm.train_toy(model, ["110"], cfg)
            np.testing.assert_allclose(model.theta, expected, atol=1e-14)

    def test_unregularized_global_model_matches_empirical(self):
        """c=0 maximum likelihood converges to the empirical distribution."""
        cfg = tm.ToyConfig(ell=2, c=0.0, n_samples=2000, epochs=400, seed=11)
        data = tm.generate_toy_data(cfg)
        freq = Counter(data)
        model = tm.train_toy(tm.TabularGlobalModel(tm.SequenceSpace(2)), data, cfg)
        probs = np.exp(model.log_probs())
        for seq, p in zip(model.space.sequences, probs):
            assert abs(p - freq[seq] / len(data)) < 0.01

    def test_both_models_equal_margin_without_prior(self):
        cfg = tm.ToyConfig(ell=2, c=0.0, n_samples=2000, epochs=400, seed=12)
        data = tm.generate_toy_data(cfg)
        g = tm.train_toy(tm.TabularGlobalModel(tm.SequenceSpace(2)), data, cfg)
        l = tm.train_toy(tm.TabularLocalModel(tm.SequenceSpace(2)), data, cfg)
        assert abs(tm.measure_margin(g) - tm.measure_margin(l)) < 0.05


class TestMargins:
    def test_untrained_global_margin_zero(self):
        model = tm.TabularGlobalModel(tm.SequenceSpace(2))
        assert tm.measure_margin(model) == 0.0

    def test_untrained_local_margin_minus_log_two(self):
        model = tm.TabularLocalModel(tm.SequenceSpace(2))
        assert tm.measure_margin(model) == pytest.approx(-math.log(2), abs=1e-12)
        assert tm.measure_local_margin(model) == 0.0

    def test_trained_margins_match_empirical_oracle(self):
        cfg = tm.ToyConfig(ell=2, c=0.0, n_samples=4000, epochs=400, seed=13)
        data = tm.generate_toy_data(cfg)
        freq = Counter(data)
        g = tm.train_toy(tm.TabularGlobalModel(tm.SequenceSpace(2)), data, cfg)
        l = tm.train_toy(tm.TabularLocalModel(tm.SequenceSpace(2)), data, cfg)
        emp_margin = math.log(freq["11"] / freq["0"])
        assert tm.measure_margin(g) == pytest.approx(emp_margin, abs=0.02)
        n_pos = freq["11"] + freq["10"]
        emp_local = math.log(n_pos / freq["0"])
        assert tm.measure_local_margin(l) == pytest.approx(emp_local, abs=0.02)
        assert tm.measure_margin(g) == pytest.approx(math.log(0.54 / 0.40), abs=0.06)


class TestSweep:
    def small_cfg(self, seed=0):
        return tm.ToyConfig(n_samples=400, epochs=60, seed=seed)

    def test_identical_seeds_identical_tables(self, tmp_path):
        cfg = self.small_cfg(7)
        rows_a = tm.sweep("by_c", [0.0, 0.2], cfg)
        rows_b = tm.sweep("by_c", [0.0, 0.2], cfg)
        assert rows_a == rows_b  # dataclass equality is exact float equality
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        tm.write_sweep_csv(rows_a, pa)
        tm.write_sweep_csv(rows_b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_csv_roundtrip(self, tmp_path):
        rows = tm.sweep("by_length", [2, 3], self.small_cfg(8))
        path = tmp_path / "sweep.csv"
        tm.write_sweep_csv(rows, path)
        back = tm.read_sweep_csv(path)
        assert len(back) == len(rows)
        for a, b in zip(back, rows):
            assert a.mode == b.mode and a.seed == b.seed
            assert a.grid_value == pytest.approx(b.grid_value, rel=1e-12)
            assert a.global_model_margin == pytest.approx(
                b.global_model_margin, rel=1e-11)

    def test_default_grids(self):
        assert len(tm.DEFAULT_C_GRID) == 11
        assert tm.DEFAULT_C_GRID[0] == 0.0 and tm.DEFAULT_C_GRID[-1] == 0.5
        assert tm.DEFAULT_LENGTH_GRID == tuple(range(2, 9))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tm.sweep("by_entropy", None, self.small_cfg())
