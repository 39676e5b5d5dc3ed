import math

import numpy as np
import pytest

import fedconf.federation as fed
from fedconf.aggregation import AggregationMethod
from fedconf.datagen import FederatedData
from fedconf.errors import ConfigError, NumericError
from fedconf.federation import (
    ClientState,
    FedConfig,
    client_update,
    evaluate,
    public_batches,
    run_federation,
    run_round,
    sample_clients,
)
from fedconf.nn import (
    LayerSpec,
    MlpModel,
    OptimizerState,
    apply_update,
    flatten_params,
    forward,
    init_model,
    loss_and_grads,
    mlp_specs,
    rmse_loss,
    unflatten_params,
)
from fedconf.tensor import SeededRng

DIMS = (3, 8, 4, 1)


def toy_data(k=3, n=40, seed=0, dim=3):
    rng = SeededRng(seed)
    w = np.array([[0.5], [-1.0], [0.25]])[:dim]
    clients = []
    for c in range(k):
        x = rng.split(f"x{c}").normal(n, dim, mean=c, stddev=0.5)
        clients.append((x, x @ w))
    public = rng.split("pub").normal(30, dim)
    tx = rng.split("test").normal(25, dim)
    return FederatedData(clients, public, tx, tx @ w)


def cfg(**kw):
    base = dict(rounds=2, clients=3, local_epochs=1, local_batch=16, local_lr=1e-3, dims=DIMS,
                method=AggregationMethod("fedavg"))
    base.update(kw)
    return FedConfig(**base)


def model(seed=0):
    return init_model(mlp_specs(DIMS), SeededRng(seed))


class TestConfig:
    @pytest.mark.parametrize("field", ["rounds", "clients", "local_epochs", "local_batch", "eval_every"])
    def test_counts_positive(self, field):
        with pytest.raises(ConfigError):
            FedConfig(**{field: 0})

    def test_defaults(self):
        c = FedConfig()
        assert (c.rounds, c.clients, c.participation_fraction, c.local_epochs, c.local_batch) == (100, 5, 1.0, 5, 64)
        assert (c.local_lr, c.local_weight_decay, c.local_optimizer) == (1e-4, 1e-5, "adam")

    def test_fraction_range(self):
        with pytest.raises(ConfigError):
            FedConfig(participation_fraction=0.0)
        with pytest.raises(ConfigError):
            FedConfig(participation_fraction=1.5)

    def test_empty_client(self):
        with pytest.raises(ConfigError):
            ClientState(0, np.zeros((0, 3)), np.zeros((0, 1)))


class TestClientUpdate:
    @pytest.mark.parametrize("opt", ["adam", "sgd"])
    def test_zero_lr_returns_global(self, opt):
        x, y = toy_data().clients[0]
        m = model()
        out, _ = client_update(ClientState(0, x, y), m, cfg(local_lr=0.0, local_epochs=3, local_optimizer=opt),
                               SeededRng(1))
        np.testing.assert_array_equal(flatten_params(out), flatten_params(m))

    def test_single_full_batch_sgd_step(self):
        x, y = toy_data().clients[0]
        m = model(2)
        c = cfg(local_optimizer="sgd", local_batch=1000, local_lr=0.05, local_weight_decay=0.0)
        out, _ = client_update(ClientState(0, x, y), m, c, SeededRng(3))
        # a single batch holds every row; row order does not change the mean gradient beyond round-off
        _, g = loss_and_grads(m, x, y)
        want, _ = apply_update(m, g, OptimizerState("sgd", 0.05))
        np.testing.assert_allclose(flatten_params(out), flatten_params(want), rtol=0, atol=1e-12)

    def test_learns_linear_data(self):
        x, y = toy_data(n=200).clients[0]
        m = model(4)
        before = rmse_loss(forward(m, x).output, y)[0]
        out, _ = client_update(ClientState(0, x, y), m, cfg(local_epochs=5, local_lr=1e-2), SeededRng(5))
        assert rmse_loss(forward(out, x).output, y)[0] < before

    def test_does_not_mutate_global(self):
        x, y = toy_data().clients[0]
        m = model(6)
        snap = flatten_params(m)
        client_update(ClientState(0, x, y), m, cfg(), SeededRng(0))
        np.testing.assert_array_equal(flatten_params(m), snap)

    def test_partial_batch_kept(self):
        x, y = toy_data(n=17).clients[0]
        m = model(7)
        # batch 16 over 17 rows -> 2 steps; with a 1-row last batch dropped the result would differ
        two, _ = client_update(ClientState(0, x, y), m, cfg(local_batch=16, local_optimizer="sgd"), SeededRng(1))
        order = SeededRng(1).split("epoch0").permutation(17)
        ref = m
        for idx in (order[:16], order[16:]):
            _, g = loss_and_grads(ref, x[idx], y[idx])
            ref, _ = apply_update(ref, g, OptimizerState("sgd", 1e-3, 1e-5))
        np.testing.assert_array_equal(flatten_params(two), flatten_params(ref))


class TestSampleClients:
    def test_full(self):
        assert sample_clients(5, 1.0, SeededRng(0)) == [0, 1, 2, 3, 4]

    def test_ceiling_count(self):
        s = sample_clients(5, 0.4, SeededRng(0))
        assert len(s) == 2 == len(set(s))
        assert len(sample_clients(5, 0.3, SeededRng(0))) == 2

    def test_frequency(self):
        counts = np.zeros(5)
        root = SeededRng(1)
        for t in range(10_000):
            for k in sample_clients(5, 0.4, root.split(t)):
                counts[k] += 1
        assert np.all(np.abs(counts / 10_000 - 0.4) <= 0.02)

    def test_deterministic(self):
        assert sample_clients(10, 0.3, SeededRng(2)) == sample_clients(10, 0.3, SeededRng(2))


class TestEvaluate:
    def test_zero_model_unit_targets(self):
        m = unflatten_params(mlp_specs(DIMS), np.zeros(model().n_params))
        assert evaluate(m, np.ones((4, 3)), np.ones((4, 1))) == 1.0

    def test_self_consistency(self):
        m = model(3)
        x = SeededRng(1).normal(10, 3)
        assert evaluate(m, x, forward(m, x).output) <= 1e-12

    def test_matches_rmse_loss(self):
        m = model(3)
        d = toy_data()
        assert evaluate(m, d.test_inputs, d.test_targets) == rmse_loss(forward(m, d.test_inputs).output,
                                                                       d.test_targets)[0]

    def test_empty_pool(self):
        with pytest.raises(ConfigError):
            evaluate(model(), np.zeros((0, 3)), np.zeros((0, 1)))


class TestRounds:
    def test_single_client_identity(self):
        d = toy_data(k=1)
        c = cfg(rounds=1, clients=1)
        final, _ = run_federation(d, c)
        init = init_model(mlp_specs(DIMS), SeededRng(c.seed).split("init"))
        x, y = d.clients[0]
        want, _ = client_update(ClientState(0, x, y), init, c, fed.client_rng(SeededRng(c.seed), 1, 0))
        np.testing.assert_array_equal(flatten_params(final), flatten_params(want))

    def test_identical_clients_shared_stream_equal_centralized(self):
        x, y = toy_data().clients[0]
        clients = [ClientState(k, x, y) for k in range(4)]
        c = cfg(clients=4)
        m = model(1)
        same = lambda k: SeededRng(9)  # noqa: E731 - forced identical streams
        out, _, _ = run_round(m, clients, np.ones((4, 3)), c, 1, SeededRng(0), rng_for=same)
        want, _ = client_update(clients[0], m, c, SeededRng(9))
        assert np.max(np.abs(flatten_params(out) - flatten_params(want))) <= 1e-15

    def test_fedavg_is_column_mean(self):
        d = toy_data()
        c = cfg()
        clients = [ClientState(k, x, y) for k, (x, y) in enumerate(d.clients)]
        m = model(2)
        root = SeededRng(0)
        out, _, _ = run_round(m, clients, d.public, c, 1, root)
        locals_ = [client_update(s, m, c, fed.client_rng(root, 1, s.client_id))[0] for s in clients]
        stacked = np.stack([flatten_params(l) for l in locals_])
        np.testing.assert_allclose(flatten_params(out), stacked.mean(axis=0), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["fedavg", "feddf", "confidence_distill"])
    def test_execution_order_and_workers_irrelevant(self, kind):
        d = toy_data()
        c = cfg(method=AggregationMethod(kind, distill_steps=3, distill_batch=8))
        clients = [ClientState(k, x, y) for k, (x, y) in enumerate(d.clients)]
        m = model(3)
        a, _, _ = run_round(m, clients, d.public, c, 1, SeededRng(4))
        b, _, _ = run_round(m, clients, d.public, c, 1, SeededRng(4), execution_order=[2, 0, 1])
        w, _, _ = run_round(m, clients, d.public, c, 1, SeededRng(4), workers=3)
        np.testing.assert_array_equal(flatten_params(a), flatten_params(b))
        np.testing.assert_array_equal(flatten_params(a), flatten_params(w))

    def test_aggregation_sees_only_public_rows(self, monkeypatch):
        d = toy_data()
        seen = {}

        def spy(models, batches, method):
            seen["batches"] = batches
            return models[0], None

        monkeypatch.setattr(fed, "aggregate", spy)
        c = cfg(method=AggregationMethod("feddf", distill_steps=4, distill_batch=8))
        clients = [ClientState(k, x, y) for k, (x, y) in enumerate(d.clients)]
        run_round(model(), clients, d.public, c, 1, SeededRng(0))
        public_rows = {tuple(r) for r in d.public}
        assert len(seen["batches"]) == 4
        for b in seen["batches"]:
            assert b.shape == (8, 3)
            assert all(tuple(r) in public_rows for r in b)

    def test_public_batches_cycle(self):
        pub = np.arange(10, dtype=float).reshape(5, 2)
        bs = public_batches(pub, 4, 3, SeededRng(0))
        rows = np.concatenate(bs)
        assert rows.shape == (12, 2)
        # first 5 rows are a permutation of the pool
        assert sorted(rows[:5, 0].tolist()) == [0, 2, 4, 6, 8]


class TestRunFederation:
    def test_deterministic_trace(self):
        d = toy_data()
        c = cfg(rounds=3, method=AggregationMethod("confidence_distill", distill_steps=2, distill_batch=8))
        m1, t1 = run_federation(d, c)
        m2, t2 = run_federation(d, c)
        np.testing.assert_array_equal(flatten_params(m1), flatten_params(m2))
        assert [r.test_rmse for r in t1] == [r.test_rmse for r in t2]
        assert [r.teacher_histogram for r in t1] == [r.teacher_histogram for r in t2]
        assert all(sum(r.teacher_histogram) == 16 for r in t1)

    @pytest.mark.parametrize("rounds,every", [(5, 1), (5, 2), (6, 3), (7, 10)])
    def test_trace_length(self, rounds, every):
        _, trace = run_federation(toy_data(), cfg(rounds=rounds, eval_every=every))
        assert len(trace) == math.ceil(rounds / every)
        assert trace[-1].round == rounds

    def test_metrics_fields(self):
        _, trace = run_federation(toy_data(), cfg(rounds=2, seed=7))
        r = trace[0]
        assert (r.round, r.method, r.seed) == (1, "fedavg", 7)
        assert r.test_rmse >= 0 and math.isfinite(r.test_rmse)
        assert sorted(r.client_losses) == [0, 1, 2]
        assert r.teacher_histogram is None

    def test_non_finite_rmse_names_round(self, monkeypatch):
        calls = iter([0.5, 0.4, math.nan])
        monkeypatch.setattr(fed, "evaluate", lambda *a: next(calls))
        with pytest.raises(NumericError, match="round 3"):
            run_federation(toy_data(), cfg(rounds=4))

    def test_config_client_mismatch(self):
        with pytest.raises(ConfigError):
            run_federation(toy_data(k=2), cfg(clients=3))

    def test_input_dim_mismatch(self):
        with pytest.raises(ConfigError):
            run_federation(toy_data(), cfg(dims=(4, 3, 1)))

    def test_training_improves_over_rounds(self):
        d = toy_data(n=120)
        _, trace = run_federation(d, cfg(rounds=8, local_lr=1e-2, local_epochs=2))
        assert trace[-1].test_rmse < trace[0].test_rmse


def test_single_layer_model_runs():
    spec = (LayerSpec(3, 1, "identity"),)
    m = MlpModel(spec, [np.zeros((3, 1))], [np.zeros((1, 1))])
    d = toy_data()
    final, trace = run_federation(d, cfg(rounds=2, dims=(3, 1)), initial_model=m)
    assert trace[-1].test_rmse < evaluate(m, d.test_inputs, d.test_targets)
