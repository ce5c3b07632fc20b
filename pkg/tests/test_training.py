"""Hinge loss semantics and the CE / regularized training loops."""

import numpy as np
import pytest

import lir
from lir.nets import forward
from lir.training import (
    CeConfig,
    REboConfig,
    TrainingDiverged,
    calibrate_margins,
    energy_loss_layer,
    rebo_loss,
    train,
)


def hinge_oracle(id_energies, ood_energies, m_in, m_out):
    """Scalar-at-a-time re-evaluation of the two-sided hinge."""
    id_terms = [max(0.0, e - m_in) ** 2 for e in id_energies]
    ood_terms = [max(0.0, m_out - e) ** 2 for e in ood_energies]
    return sum(id_terms) / len(id_terms) + sum(ood_terms) / len(ood_terms)


class TestEnergyLossLayer:
    def test_all_slack_is_zero(self):
        assert energy_loss_layer([-30.0, -26.0], [-6.0, -1.0], -25.0, -7.0) == 0.0

    def test_single_active_id_hinge(self):
        # one ID energy two above its bound, one OoD exactly at its bound
        assert energy_loss_layer([-23.0], [-7.0], -25.0, -7.0) == 4.0

    def test_hand_worked_mixed_batch(self):
        got = energy_loss_layer([-20.0, -30.0], [-10.0, -3.0], -25.0, -7.0)
        assert got == pytest.approx(17.0, abs=1e-12)
        assert got == pytest.approx(
            hinge_oracle([-20.0, -30.0], [-10.0, -3.0], -25.0, -7.0), abs=1e-12
        )

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            e_id = rng.normal(scale=10, size=rng.integers(1, 9))
            e_ood = rng.normal(scale=10, size=rng.integers(1, 9))
            m_in, m_out = rng.normal(scale=10, size=2)
            assert energy_loss_layer(e_id, e_ood, m_in, m_out) == pytest.approx(
                hinge_oracle(e_id, e_ood, m_in, m_out), rel=1e-12
            )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            energy_loss_layer([], [1.0], 0.0, 0.0)
        with pytest.raises(ValueError):
            energy_loss_layer([1.0], [], 0.0, 0.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            v = energy_loss_layer(
                rng.normal(size=4), rng.normal(size=4), rng.normal(), rng.normal()
            )
            assert v >= 0.0


class TestReboLoss:
    @pytest.fixture()
    def traces(self):
        net = lir.init_net([2, 6, 5, 3], seed=0)
        rng = np.random.default_rng(2)
        id_tr = [forward(net, x) for x in rng.normal(size=(4, 2))]
        ood_tr = [forward(net, x) for x in rng.normal(scale=4, size=(4, 2))]
        return id_tr, ood_tr

    def test_single_layer_equals_energy_loss(self, traces):
        id_tr, ood_tr = traces
        cfg = REboConfig(m_in=-3.0, m_out=-2.0, layer_set=frozenset({1}))
        e_id = [lir.free_energy(tr.taps[1]) for tr in id_tr]
        e_ood = [lir.free_energy(tr.taps[1]) for tr in ood_tr]
        assert rebo_loss(id_tr, ood_tr, cfg) == pytest.approx(
            energy_loss_layer(e_id, e_ood, -3.0, -2.0), rel=1e-12
        )

    def test_sums_over_layers(self, traces):
        id_tr, ood_tr = traces
        total = rebo_loss(id_tr, ood_tr, REboConfig(m_in=-3.0, m_out=-2.0))
        parts = sum(
            rebo_loss(id_tr, ood_tr, REboConfig(m_in=-3.0, m_out=-2.0, layer_set=frozenset({t})))
            for t in range(3)
        )
        assert total == pytest.approx(parts, rel=1e-12)

    def test_all_slack_zero(self, traces):
        id_tr, ood_tr = traces
        assert rebo_loss(id_tr, ood_tr, REboConfig(m_in=1e9, m_out=-1e9)) == 0.0

    def test_repeated_layer_rejected(self, traces):
        id_tr, ood_tr = traces
        cfg = REboConfig(m_in=0.0, m_out=0.0, layer_set=[1, 1])
        with pytest.raises(ValueError):
            rebo_loss(id_tr, ood_tr, cfg)

    def test_out_of_range_layer_rejected(self, traces):
        id_tr, ood_tr = traces
        with pytest.raises(ValueError):
            rebo_loss(id_tr, ood_tr, REboConfig(m_in=0.0, m_out=0.0, layer_set=frozenset({7})))


class TestTrain:
    def test_ce_reaches_high_accuracy(self, default_task):
        _, log = train(
            default_task, CeConfig(epochs=100, seed=0, hidden_dims=(16, 16))
        )
        assert log.train_acc[-1] >= 0.95

    def test_lambda_zero_matches_ce_trajectory(self, default_task):
        ce_net, ce_log = train(default_task, CeConfig(epochs=5, seed=3))
        re_net, re_log = train(
            default_task,
            REboConfig(m_in=-5.0, m_out=-2.0, lam=0.0, epochs=5, seed=3),
        )
        assert ce_log.ce_loss == re_log.ce_loss
        assert np.array_equal(lir.nets.get_params(ce_net), lir.nets.get_params(re_net))

    def test_deterministic_per_seed(self, default_task):
        a, _ = train(default_task, CeConfig(epochs=3, seed=7))
        b, _ = train(default_task, CeConfig(epochs=3, seed=7))
        assert np.array_equal(lir.nets.get_params(a), lir.nets.get_params(b))

    def test_ebo_margin_hinge_decays(self, default_task):
        # the input-adjacent tap cannot push ring energies above blob
        # energies (it is affine in x), so the logit-scale margins are
        # trained on the deeper taps where both hinge sides are attainable
        cfg = REboConfig(
            m_in=-25.0,
            m_out=-7.0,
            lam=0.01,
            layer_set=frozenset({1, 2}),
            epochs=150,
            seed=0,
        )
        _, log = train(default_task, cfg)
        per_epoch = np.array(log.energy_loss).sum(axis=1)
        assert per_epoch[-1] < 0.10 * per_epoch[0]
        assert log.train_acc[-1] >= 0.95

    def test_divergence_reports_epoch(self, default_task):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises((TrainingDiverged, FloatingPointError)):
                train(default_task, CeConfig(epochs=2, lr=1e18, seed=0))

    def test_calibrated_margins_are_percentiles(self, default_task):
        net = lir.init_net([2, 64, 64, 3], seed=0)
        m_in, m_out = calibrate_margins(net, default_task)
        assert m_in < m_out
        pools = []
        for x in (default_task.train_x, default_task.seen_ood_x):
            tr = lir.forward_batch(net, x)
            for tap in tr.hidden + [tr.logits]:
                pools.append(lir.free_energy_batch(tap))
        pool = np.concatenate(pools)
        assert m_in == pytest.approx(np.percentile(pool, 10.0))
        assert m_out == pytest.approx(np.percentile(pool, 90.0))

    def test_trainlog_csv_layout(self, default_task, tmp_path):
        _, log = train(default_task, CeConfig(epochs=2, seed=0, hidden_dims=(8, 8)))
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == (
            "epoch,ce_loss,energy_loss_layer_0,energy_loss_layer_1,"
            "energy_loss_layer_2,train_acc"
        )
        assert len(lines) == 3
