"""Smoke test for the fedin Python extension.

Build and install it first, e.g.

    pip install maturin
    pip install --no-build-isolation ./crates/python
"""

import json
import math
import os
import random
import tempfile

import fedin


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def check_resolvers():
    assert fedin.resolve_analytic([1.0, 0.0], [0.0, 1.0]) == [1.0, 0.0]
    assert close(fedin.resolve_analytic([1.0, -1.0], [0.0, 1.0]), [1.0, 0.0])
    assert close(fedin.resolve_simplified([1.0, 1.0], [2.0, 0.0]), [3.0, 1.0])
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(2, 64)
        g_in = [rng.uniform(-1, 1) for _ in range(n)]
        g_local = [rng.uniform(-1, 1) for _ in range(n)]
        z = fedin.resolve_analytic(g_in, g_local)
        assert close(z, fedin.projection_oracle(g_in, g_local), 1e-9)
        assert fedin.frobenius_inner(z, g_local) >= -1e-9
        lam, value = fedin.dual_optimum(g_in, g_local)
        assert lam >= 0.0 and math.isfinite(value)
    try:
        fedin.resolve_analytic([1.0], [1.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_model():
    data = fedin.Dataset.synth_blobs(200, 4, 8, 0.2, seed=1)
    assert len(data) == 200 and data.num_classes == 4
    shards = data.partition(5, "dirichlet", alpha=0.5, seed=3)
    assert sorted(i for s in shards for i in s) == list(range(200))

    model = fedin.SplitModel.mlp("C", 8, 4, hidden=16, seed=0)
    rows = data.inputs()[:6]
    logits, s_in, s_out = model.forward(rows)
    assert len(logits) == 6 and len(logits[0]) == 4
    assert model.feature_dims == (16, 16)
    loss, grads = model.local_gradients(rows, data.labels[:6])
    assert loss > 0 and set(grads) == set(model.param_names())

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        other = fedin.SplitModel.mlp("C", 8, 4, hidden=16, seed=9)
        other.load(path)
        assert other.forward(rows)[0] == logits


def check_simulation():
    cfg = {
        "mode": "fedin",
        "dataset": {"kind": "synth", "n_train": 400, "n_test": 100, "num_classes": 4, "dim": 8},
        "num_clients": 4,
        "num_rounds": 2,
        "variant_assignment": ["A", "B", "C", "E"],
        "model": {"kind": "mlp", "hidden": 16},
    }
    sim = fedin.Simulation(json.dumps(cfg), seed=5)
    first = sim.run_round()
    second = sim.run_round()
    assert first["round"] == 0 and first["mean_in_loss"] is None
    assert second["mean_in_loss"] is not None
    assert len(second["per_client_accuracy"]) == 4
    assert 0.0 <= second["mean_accuracy"] <= 1.0

    again = fedin.Simulation(json.dumps(cfg), seed=5)
    assert again.run_round() == first
    assert sim.round == 2

    try:
        fedin.Simulation(json.dumps({**cfg, "foo": 1}))
    except ValueError as e:
        assert "foo" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_grads():
    results = fedin.check_grads(0)
    assert results and all(passed for _, _, _, passed in results), results


if __name__ == "__main__":
    check_resolvers()
    check_model()
    check_simulation()
    check_grads()
    print("python smoke test passed")
