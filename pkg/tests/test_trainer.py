"""Stochastic trainer: buffers, encoders, steps, schedules, full runs."""

from __future__ import annotations

import numpy as np
import pytest

from peira import (
    EmaBuffers,
    EncoderPair,
    JointTable,
    MlpEncoder,
    OneHotEncoder,
    SgdMomentum,
    TrainerConfig,
    TrainingDivergedError,
    ema_rate,
    exact_cca,
    feature_gradients,
    learning_rate_at,
    make_product,
    make_two_state,
    mlp_backprop_check,
    moments,
    optimal_predictor,
    peira_gradient,
    peira_objective,
    perturb_distinct,
    random_encoder_pair,
    sc_peira_step,
    train,
)
from peira import trainer as trainer_module


def full_table_batch(table):
    """Every (x, y) cell once, weighted by its probability: the exact population."""
    xs, ys = np.meshgrid(np.arange(table.nx), np.arange(table.ny), indexing="ij")
    return xs.ravel(), ys.ravel(), table.p.ravel()


def base_config(**overrides):
    kwargs = dict(k=2, lam=0.2, batch_size=64, eta_init=0.5, eta_min=0.05,
                  total_steps=100, learning_rate=0.1)
    kwargs.update(overrides)
    return TrainerConfig(**kwargs)


class TestTrainerConfig:
    def test_invalid_fields_rejected(self):
        for overrides in (
            dict(k=0),
            dict(lam=0.0),
            dict(lam=1.0),
            dict(batch_size=1),
            dict(eta_init=0.0, eta_min=0.0),
            dict(eta_init=0.3, eta_min=0.5),
            dict(eta_init=1.5),
            dict(total_steps=0),
            dict(learning_rate=0.0),
            dict(momentum=1.0),
            dict(momentum=-0.1),
            dict(schedule="linear"),
            dict(encoder="cnn"),
            dict(encoder="mlp", mlp_widths=(0,)),
            dict(clip=0.0),
            dict(log_every=0),
            dict(dataset_size=32),
        ):
            with pytest.raises(ValueError):
                base_config(**overrides)

    def test_widths_normalized_to_ints(self):
        cfg = base_config(encoder="mlp", mlp_widths=[8.0, 4.0])
        assert cfg.mlp_widths == (8, 4)


class TestSchedules:
    def test_constant_schedule(self):
        cfg = base_config(schedule="constant", total_steps=10)
        assert all(ema_rate(s, cfg) == cfg.eta_init for s in range(10))
        assert all(learning_rate_at(s, cfg) == cfg.learning_rate for s in range(10))

    def test_cosine_endpoints_and_midpoint(self):
        cfg = base_config(schedule="cosine", total_steps=100)
        assert ema_rate(0, cfg) == pytest.approx(cfg.eta_init, abs=1e-15)
        assert ema_rate(50, cfg) == pytest.approx(
            0.5 * (cfg.eta_init + cfg.eta_min), abs=1e-12
        )
        assert ema_rate(99, cfg) < cfg.eta_min + 1e-3
        assert learning_rate_at(0, cfg) == pytest.approx(cfg.learning_rate, abs=1e-15)
        assert learning_rate_at(99, cfg) < 1e-3 * cfg.learning_rate

    def test_cosine_is_nonincreasing(self):
        cfg = base_config(schedule="cosine", total_steps=50)
        etas = [ema_rate(s, cfg) for s in range(50)]
        lrs = [learning_rate_at(s, cfg) for s in range(50)]
        assert all(a >= b for a, b in zip(etas, etas[1:]))
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_step_out_of_range_rejected(self):
        cfg = base_config(total_steps=10)
        for step in (-1, 10):
            with pytest.raises(ValueError):
                ema_rate(step, cfg)
            with pytest.raises(ValueError):
                learning_rate_at(step, cfg)


class TestEmaBuffers:
    def test_first_update_copies_batch_statistics(self):
        buffers = EmaBuffers.zeros(2)
        assert not buffers.initialized
        gen = np.random.Generator(np.random.Philox(key=np.uint64(80)))
        phi_x = gen.standard_normal((2, 16))
        phi_y = gen.standard_normal((2, 16))
        buffers.update(phi_x, phi_y, eta=0.123)   # eta ignored on first call
        cross = phi_x @ phi_y.T / 16
        np.testing.assert_allclose(buffers.Sigma, cross + cross.T, atol=1e-12)
        np.testing.assert_allclose(
            buffers.N, (phi_x @ phi_x.T + phi_y @ phi_y.T) / 16, atol=1e-12
        )
        assert buffers.initialized

    def test_later_updates_blend(self):
        buffers = EmaBuffers.zeros(1)
        ones = np.ones((1, 4))
        buffers.update(ones, ones, eta=0.5)          # Sigma=2, N=2
        buffers.update(3.0 * ones, 3.0 * ones, eta=0.5)
        # Sigma: 0.5*2 + 0.5*18 = 10; N likewise
        np.testing.assert_allclose(buffers.Sigma, [[10.0]], atol=1e-12)
        np.testing.assert_allclose(buffers.N, [[10.0]], atol=1e-12)

    def test_population_batch_reproduces_exact_predictor(self, two_state):
        W = random_encoder_pair(two_state, 2, scale=0.7, seed=81)
        xs, ys, weights = full_table_batch(two_state)
        buffers = EmaBuffers.zeros(2)
        buffers.update(W.U[:, xs], W.V[:, ys], eta=1.0, weights=weights)
        m = moments(W, two_state)
        np.testing.assert_allclose(buffers.Sigma, m.Sigma, atol=1e-12)
        np.testing.assert_allclose(buffers.N, m.N, atol=1e-12)
        P, Q = buffers.predictor(0.2)
        pred = optimal_predictor(m, 0.2)
        np.testing.assert_allclose(P, pred.P, atol=1e-10)
        np.testing.assert_allclose(Q, pred.Q, atol=1e-10)
        assert buffers.objective(0.2) == pytest.approx(
            peira_objective(W, two_state, 0.2) - 0.0, abs=1e-12
        )


class TestOneHotEncoder:
    def test_forward_reads_columns(self):
        enc = OneHotEncoder(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        phi, cache = enc.forward(np.array([2, 0, 2]))
        np.testing.assert_array_equal(phi, [[3.0, 1.0, 3.0], [6.0, 4.0, 6.0]])
        grads = enc.backward(cache, np.ones((2, 3)))
        np.testing.assert_array_equal(
            grads[0], [[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]]
        )

    def test_to_table_is_a_copy(self):
        enc = OneHotEncoder(np.zeros((1, 2)))
        tab = enc.to_table()
        tab[0, 0] = 5.0
        assert enc.weight[0, 0] == 0.0


class TestMlpEncoder:
    def test_to_table_matches_forward(self):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(82)))
        net = MlpEncoder.random(4, (5,), 2, gen)
        phi, _ = net.forward(np.arange(4))
        np.testing.assert_array_equal(net.to_table(), phi)

    def test_linear_backprop_is_exact(self):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(83)))
        net = MlpEncoder.random(4, (), 2, gen)
        assert mlp_backprop_check(net, seed=0) < 1e-10

    def test_tanh_backprop_matches_finite_differences(self):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(84)))
        for widths in ((6,), (8, 8)):
            net = MlpEncoder.random(4, widths, 2, gen)
            assert mlp_backprop_check(net, seed=1) < 1e-5

    def test_zero_weights_kill_weight_multiplied_gradients(self):
        net = MlpEncoder(
            weights=[np.zeros((3, 4)), np.zeros((2, 3))],
            biases=[np.zeros(3), np.zeros(2)],
            n_states=4,
        )
        _, cache = net.forward(np.array([0, 1]))
        grad_phi = np.ones((2, 2))
        gw0, gb0, gw1, gb1 = net.backward(cache, grad_phi)
        np.testing.assert_array_equal(gw0, np.zeros((3, 4)))
        np.testing.assert_array_equal(gw1, np.zeros((2, 3)))
        np.testing.assert_array_equal(gb1, grad_phi.sum(axis=1))

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ValueError):
            MlpEncoder(weights=[np.zeros((2, 4))], biases=[], n_states=4)
        with pytest.raises(ValueError):
            MlpEncoder(weights=[np.zeros((2, 3))], biases=[np.zeros(2)], n_states=4)


class TestSgdMomentum:
    def test_heavy_ball_recursion(self):
        p = np.array([1.0, 1.0])
        opt = SgdMomentum([p], momentum=0.5)
        g = np.array([1.0, 2.0])
        opt.step([p], [g], lr=0.1)
        np.testing.assert_allclose(p, [0.9, 0.8], atol=1e-15)
        opt.step([p], [g], lr=0.1)   # v = 0.5*g + g = 1.5 g
        np.testing.assert_allclose(p, [0.75, 0.5], atol=1e-15)


class TestScPeiraStep:
    def test_zero_encoders_are_a_fixed_point(self, two_state):
        enc_x = OneHotEncoder(np.zeros((2, 2)))
        enc_y = OneHotEncoder(np.zeros((2, 2)))
        opt = SgdMomentum(enc_x.params + enc_y.params, momentum=0.9)
        buffers = EmaBuffers.zeros(2)
        cfg = base_config()
        eta = sc_peira_step(enc_x, enc_y, opt, buffers,
                            np.array([0, 1]), np.array([1, 0]), cfg, step=0)
        assert eta == 1.0
        np.testing.assert_array_equal(buffers.Sigma, np.zeros((2, 2)))
        np.testing.assert_array_equal(enc_x.weight, np.zeros((2, 2)))
        np.testing.assert_array_equal(enc_y.weight, np.zeros((2, 2)))

    def test_population_batch_equals_exact_gradient_step(self, two_state):
        lam, lr = 0.2, 0.1
        W = random_encoder_pair(two_state, 2, scale=0.7, seed=85)
        enc_x = OneHotEncoder(W.U.copy())
        enc_y = OneHotEncoder(W.V.copy())
        opt = SgdMomentum(enc_x.params + enc_y.params, momentum=0.0)
        buffers = EmaBuffers.zeros(2)
        cfg = base_config(lam=lam, learning_rate=lr, momentum=0.0,
                          schedule="constant")
        xs, ys, weights = full_table_batch(two_state)
        sc_peira_step(enc_x, enc_y, opt, buffers, xs, ys, cfg, step=0,
                      weights=weights)
        grad = peira_gradient(W, two_state, lam)
        np.testing.assert_allclose(
            enc_x.weight, W.U - lr * grad.U * two_state.px, atol=1e-10
        )
        np.testing.assert_allclose(
            enc_y.weight, W.V - lr * grad.V * two_state.py, atol=1e-10
        )

    def test_shared_encoder_sums_both_view_gradients(self, two_state):
        lam, lr = 0.2, 0.1
        gen = np.random.Generator(np.random.Philox(key=np.uint64(86)))
        w0 = 0.3 * gen.standard_normal((2, 2))
        enc = OneHotEncoder(w0.copy())
        opt = SgdMomentum(enc.params, momentum=0.0)
        buffers = EmaBuffers.zeros(2)
        cfg = base_config(lam=lam, learning_rate=lr, momentum=0.0,
                          schedule="constant", shared_encoder=True)
        idx_x = np.array([0, 1, 1, 0])
        idx_y = np.array([1, 1, 0, 0])
        phi_x, phi_y = w0[:, idx_x], w0[:, idx_y]
        ref = EmaBuffers.zeros(2)
        ref.update(phi_x, phi_y, eta=1.0)
        P, Q = ref.predictor(lam)
        gx, gy = feature_gradients(phi_x, phi_y, P, Q, lam)
        grad_w = np.zeros_like(w0)
        np.add.at(grad_w.T, idx_x, gx.T)
        np.add.at(grad_w.T, idx_y, gy.T)
        sc_peira_step(enc, enc, opt, buffers, idx_x, idx_y, cfg, step=0)
        np.testing.assert_allclose(enc.weight, w0 - lr * grad_w, atol=1e-12)

    def test_clip_rescales_to_requested_norm(self, two_state):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(87)))
        w0 = 2.0 * gen.standard_normal((2, 2))
        clip = 1e-3
        finals = {}
        for clip_setting in (None, clip):
            enc_x = OneHotEncoder(w0.copy())
            enc_y = OneHotEncoder(w0.copy())
            opt = SgdMomentum(enc_x.params + enc_y.params, momentum=0.0)
            cfg = base_config(momentum=0.0, schedule="constant", clip=clip_setting)
            sc_peira_step(enc_x, enc_y, opt, EmaBuffers.zeros(2),
                          np.array([0, 1]), np.array([0, 1]), cfg, step=0)
            finals[clip_setting] = (enc_x.weight - w0, enc_y.weight - w0)
        raw = np.sqrt(sum(float((d * d).sum()) for d in finals[None]))
        clipped = np.sqrt(sum(float((d * d).sum()) for d in finals[clip]))
        assert raw > cfg.learning_rate * clip          # clipping actually engaged
        assert clipped == pytest.approx(cfg.learning_rate * clip, rel=1e-12)

    def test_non_finite_gradient_raises_with_snapshot(self, two_state, monkeypatch):
        enc_x = OneHotEncoder(np.ones((2, 2)))
        enc_y = OneHotEncoder(np.ones((2, 2)))
        opt = SgdMomentum(enc_x.params + enc_y.params, momentum=0.0)

        def poisoned(phi_x, phi_y, P, Q, lam, weights=None):
            bad = np.full_like(phi_x, np.nan)
            return bad, bad

        monkeypatch.setattr(trainer_module, "feature_gradients", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            sc_peira_step(enc_x, enc_y, opt, EmaBuffers.zeros(2),
                          np.array([0, 1]), np.array([0, 1]),
                          base_config(), step=0)
        assert err.value.step == 0
        assert "grad_norm" in err.value.snapshot


class TestTrain:
    def test_same_seed_is_bitwise_identical(self, two_state, tmp_path):
        cfg = base_config(total_steps=300, log_every=50, seed=11,
                          dataset_size=4096)
        res_a = train(two_state, cfg)
        res_b = train(two_state, cfg)
        path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
        res_a.log.to_csv(path_a)
        res_b.log.to_csv(path_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        np.testing.assert_array_equal(res_a.final_pair.U, res_b.final_pair.U)
        np.testing.assert_array_equal(res_a.final_pair.V, res_b.final_pair.V)

    def test_different_seed_differs(self, two_state):
        cfg_a = base_config(total_steps=100, seed=12, dataset_size=4096)
        cfg_b = base_config(total_steps=100, seed=13, dataset_size=4096)
        res_a, res_b = train(two_state, cfg_a), train(two_state, cfg_b)
        assert np.abs(res_a.final_pair.U - res_b.final_pair.U).max() > 0.0

    def test_log_rows_land_on_schedule(self, two_state):
        cfg = base_config(total_steps=250, log_every=100, seed=14,
                          dataset_size=4096)
        res = train(two_state, cfg)
        np.testing.assert_array_equal(res.log.column("step"), [0, 100, 200, 249])
        assert res.log.column("eta")[0] == 1.0

    def test_final_pair_matches_encoder_tables(self, two_state):
        cfg = base_config(total_steps=60, log_every=30, seed=15,
                          dataset_size=4096)
        res = train(two_state, cfg)
        np.testing.assert_array_equal(res.final_pair.U, res.enc_x.to_table())
        np.testing.assert_array_equal(res.final_pair.V, res.enc_y.to_table())

    def test_regularization_filters_modes_in_learned_rank(self):
        # on the perturbed 4-mode product spectrum {1, ~0.6, ~0.6, 0.36}:
        # lam=0.3 keeps all four modes, lam=0.65 kills the 0.36 mode, so the
        # trained effective rank drops from the 4-mode optimum (~3.956) to the
        # 3-mode optimum (~2.904); both 0.6-modes clear the sqrt(c) > lam bar
        table = perturb_distinct(
            make_product([make_two_state(0.6), make_two_state(0.6)]), 1e-3, 0
        )
        eranks = {}
        for lam in (0.3, 0.65):
            cfg = TrainerConfig(k=4, lam=lam, batch_size=256, eta_init=0.5,
                                eta_min=0.05, total_steps=800, learning_rate=0.2,
                                momentum=0.9, schedule="cosine", seed=0,
                                log_every=200)
            eranks[lam] = train(table, cfg).log.column("erank")[-1]
        assert eranks[0.3] == pytest.approx(3.956, abs=0.1)
        assert eranks[0.65] == pytest.approx(2.904, abs=0.1)

    def test_windowed_median_objective_is_nonincreasing(self, two_state):
        cfg = base_config(batch_size=128, total_steps=1500, learning_rate=0.2,
                          momentum=0.9, log_every=25, seed=0)
        obj = train(two_state, cfg).log.column("objective_population")
        medians = [np.median(obj[i:i + 8]) for i in range(0, len(obj) - 7, 8)]
        assert np.diff(medians).max() <= 5e-4

    def test_shared_encoder_requires_matching_state_spaces(self):
        lopsided = JointTable(np.full((2, 3), 1.0 / 6.0))
        cfg = base_config(shared_encoder=True, dataset_size=4096)
        with pytest.raises(ValueError):
            train(lopsided, cfg)

    def test_shared_encoder_trains_one_parameter_set(self, two_state):
        cfg = base_config(total_steps=200, shared_encoder=True, seed=16,
                          dataset_size=4096, log_every=100)
        res = train(two_state, cfg)
        assert res.enc_x is res.enc_y
        np.testing.assert_array_equal(res.final_pair.U, res.final_pair.V)

    def test_runaway_learning_rate_aborts(self, two_state):
        cfg = base_config(total_steps=50, learning_rate=1e25,
                          schedule="constant", seed=17, dataset_size=4096)
        with np.errstate(all="ignore"), pytest.raises(ArithmeticError):
            train(two_state, cfg)


class TestMetricsLogCsv:
    def test_column_names_and_round_trip(self, two_state, tmp_path):
        cfg = base_config(total_steps=120, log_every=40, seed=18,
                          dataset_size=4096)
        res = train(two_state, cfg)
        path = tmp_path / "metrics.csv"
        res.log.to_csv(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        assert header == list(res.log.COLUMNS)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(data[:, 0], res.log.column("step"))
        np.testing.assert_array_equal(
            data[:, 3], res.log.column("objective_population")
        )
        with pytest.raises(KeyError):
            res.log.column("loss")
