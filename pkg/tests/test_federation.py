import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samfed import tensor as T
from samfed.config import ExperimentConfig
from samfed.errors import FingerprintMismatch, MissingSoftLabels, NotInitialized, ZeroWeight
from samfed.federation import (
    REPORT_HEADER,
    broadcast,
    client_round,
    evaluate_model,
    fedavg,
    initialize,
    mean_kl,
    regularity_condensation,
    regularity_fusion,
    reports_to_csv,
    run_experiment,
)
from samfed.models import ModelParams, build_segnet, SegNetConfig
from samfed.tensor import Tensor


def tiny(**kw):
    base = dict(image_size=16, rounds=2, public_count=6, client_counts=(10, 10, 20),
                client_channels=(2, 2, 2), client_depth=(1, 1, 1), global_channels=2,
                global_depth=1, teacher_channels=4, teacher_depth=1, foundation_count=24,
                foundation_epochs=10, teacher_epochs=10, pretrain_epochs=3)
    base.update(kw)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="module")
def cache():
    return {}


def scalar_params(*values, fp="s"):
    return ModelParams([("w", Tensor(np.array(values, np.float32)))], fp)


# -- fedavg ------------------------------------------------------------------------

def test_fedavg_weighted_mean_example():
    out = fedavg([scalar_params(1.0), scalar_params(3.0)], [1, 3])
    assert out["w"].data.tolist() == [2.5]


def test_fedavg_symmetry_and_idempotence(rng):
    theta = rng.normal(size=5).astype(np.float32)
    assert not fedavg([scalar_params(*theta), scalar_params(*-theta)], [2, 2])["w"].data.any()
    p, _ = build_segnet(SegNetConfig(2, 1, 2, (8, 8)), 0)
    same = fedavg([p, p.copy(), p.copy()], [1, 5, 7])
    assert same.equal(p) and same.arch_fingerprint == p.arch_fingerprint


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.sampled_from([0.5, 2.0, -4.0, 0.25]))
def test_fedavg_linear(seed, k, a):
    rng = np.random.default_rng(seed)
    thetas = [rng.normal(size=3).astype(np.float32) for _ in range(k)]
    weights = rng.integers(1, 50, size=k).tolist()
    plain = fedavg([scalar_params(*t) for t in thetas], weights)["w"].data
    scaled = fedavg([scalar_params(*(a * t)) for t in thetas], weights)["w"].data
    assert np.array_equal(scaled, a * plain)


def test_fedavg_errors():
    with pytest.raises(FingerprintMismatch):
        fedavg([scalar_params(1.0), scalar_params(1.0, fp="t")], [1, 1])
    with pytest.raises(ZeroWeight):
        fedavg([scalar_params(1.0), scalar_params(1.0)], [1, 0])


def test_fedavg_order_of_clients_fixed(rng):
    thetas = [rng.normal(size=4).astype(np.float32) for _ in range(3)]
    a = fedavg([scalar_params(*t) for t in thetas], [1, 2, 3])["w"].data
    b = fedavg([scalar_params(*t) for t in thetas], [1, 2, 3])["w"].data
    assert a.tobytes() == b.tobytes()


# -- regularity condensation -----------------------------------------------------------

def _maps(rng, k, p, h=4, n=2):
    z = rng.normal(size=(k, p, h, h, n)) * 2
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _public(rng, p, h=4):
    return [(np.zeros((h, h), np.float32), (rng.random((h, h)) < 0.5).astype(np.uint8)) for _ in range(p)]


def test_rc_single_client(rng):
    maps = _maps(rng, 1, 3)
    assert np.allclose(regularity_condensation(maps, _public(rng, 3)), maps[0], atol=1e-12)


def test_rc_dice_weights():
    gt = np.array([[1, 1], [0, 0]], np.uint8)
    public = [(np.zeros((2, 2)), gt)]
    good = np.stack([np.where(gt == 1, 0.2, 0.9), np.where(gt == 1, 0.8, 0.1)], -1)
    bad = good[..., ::-1]  # argmax is exactly wrong, Dice 0
    out = regularity_condensation(np.stack([good, bad])[:, None], public)
    assert np.allclose(out[0], good)
    # equal Dice (same argmax) -> plain average
    soft = np.stack([np.where(gt == 1, 0.4, 0.6), np.where(gt == 1, 0.6, 0.4)], -1)
    out = regularity_condensation(np.stack([good, soft])[:, None], public)
    assert np.allclose(out[0], (good + soft) / 2)
    # all Dice zero -> uniform average
    out = regularity_condensation(np.stack([bad, soft[..., ::-1]])[:, None], public)
    assert np.allclose(out[0], (bad + soft[..., ::-1]) / 2)


def test_rc_valid_distributions(rng):
    for _ in range(100):
        k, p, n = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        maps = _maps(rng, k, p, n=n)
        soft = regularity_condensation(maps, _public(rng, p))
        assert (soft >= 0).all() and np.allclose(soft.sum(-1), 1.0, atol=1e-12)


# -- stateful protocol (small scenario) --------------------------------------------------

def test_initialize_contract(cache):
    cfg = tiny()
    server, clients = initialize(cfg, cache)
    assert [c.cached_teacher_maps.shape[0] for c in clients] == [c.n_samples for c in clients]
    assert [c.n_samples for c in clients] == [8, 8, 16]
    assert clients[0].model.params.equal(clients[2].model.params)
    assert clients[0].model.params is not clients[1].model.params
    # teacher beats an untrained copy of itself on the public set
    images = np.stack([x for x, _ in server.public_data])
    probs = server.teacher(Tensor(images[..., None])).data
    untrained, net = build_segnet(cfg.teacher_config, cfg.seed + 1)
    raw = net(untrained, Tensor(images[..., None])).data
    from samfed.metrics import dice
    d_teacher = np.mean([dice(p.argmax(-1), m) for p, (_, m) in zip(probs, server.public_data)])
    d_raw = np.mean([dice(p.argmax(-1), m) for p, (_, m) in zip(raw, server.public_data)])
    assert d_teacher > d_raw


def test_client_round_lr_zero_refreshes_labels(cache):
    cfg = tiny()
    _, clients = initialize(cfg, cache)
    c = clients[0]
    before = c.model.params.copy()
    client_round(c, cfg, 1, lr=0.0)
    assert c.model.params.equal(before)
    assert len(c.pseudo) == c.n_samples and all(p is not None for p in c.pseudo)
    assert np.isfinite(c.last_unsup_loss)


def test_client_round_requires_init(cache):
    cfg = tiny()
    _, clients = initialize(cfg, cache)
    clients[0].cached_teacher_maps = None
    with pytest.raises(NotInitialized):
        client_round(clients[0], cfg, 1)


def test_self_consistent_teacher_gives_unit_weights_and_decreasing_loss(cache):
    cfg = tiny(optimizer="sgd")
    _, clients = initialize(cfg, cache)
    c = clients[2]
    losses = []
    for r in range(4):
        # teacher maps equal to the client's own current predictions
        c.cached_teacher_maps = c.model.predict_proba(c.unlabeled)
        client_round(c, cfg, r, epochs=0)
        assert all(np.all(p.weights == 1.0) for p in c.pseudo)
        assert all(np.array_equal(p.labels, m.argmax(-1)) for p, m in zip(c.pseudo, c.cached_teacher_maps))
        client_round(c, cfg, r, epochs=1, lr=0.05)
        losses.append(c.last_unsup_loss)
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))


def test_broadcast_makes_clients_identical(cache):
    cfg = tiny()
    _, clients = initialize(cfg, cache)
    for c in clients:
        client_round(c, cfg, 1)
    avg = fedavg([c.model.params for c in clients], [c.n_samples for c in clients])
    broadcast(avg, clients)
    assert all(c.model.params.equal(avg) for c in clients)


def test_regularity_fusion(cache):
    cfg = tiny(mode="heterogeneous", client_channels=(2, 2, 4), client_depth=(1, 1, 1))
    server, clients = initialize(cfg, cache)
    c = clients[0]
    with pytest.raises(MissingSoftLabels):
        regularity_fusion(c, server.public_data, None, 0.5, cfg)
    soft = regularity_condensation(clients, server.public_data)
    before = c.model.params.copy()
    regularity_fusion(c, server.public_data, soft, 0.0, cfg)
    assert c.model.params.equal(before)
    kl0 = mean_kl(c, server.public_data, soft)
    regularity_fusion(c, server.public_data, soft, 1.0, cfg, epochs=3)
    assert mean_kl(c, server.public_data, soft) < kl0
    # a client that already matches its targets gets zero loss and zero gradient
    own = c.model.predict_proba(np.stack([x for x, _ in server.public_data])).astype(np.float64)
    before = c.model.params.copy()
    regularity_fusion(c, server.public_data, own, 1.0, cfg.replace(optimizer="sgd"))
    drift = max(np.max(np.abs(a - b)) for a, b in zip(c.model.params.arrays(), before.arrays()))
    assert drift < 1e-4


def test_zero_rounds_keep_initialisation(cache):
    cfg = tiny(rounds=0)
    res = run_experiment(cfg, cache=cache)
    server, clients = initialize(cfg, cache)
    assert res.reports == []
    assert all(a.model.params.equal(b.model.params) for a, b in zip(res.clients, clients))


def test_run_experiment_outputs_and_determinism(tmp_path, cache):
    cfg = tiny()
    a = run_experiment(cfg, tmp_path / "a", cache)
    b = run_experiment(cfg.replace(threads=3), tmp_path / "b")
    text = (tmp_path / "a" / "report.csv").read_text()
    assert text == (tmp_path / "b" / "report.csv").read_bytes().decode()
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert len(lines) == 1 + cfg.rounds * 3
    assert lines[1].split(",")[2].count(".") == 1 and len(lines[1].split(",")[2].split(".")[1]) == 6
    assert sorted(p.name for p in (tmp_path / "a" / "ckpt").iterdir()) == \
        ["C1.bin", "C2.bin", "C3.bin", "global.bin", "teacher.bin"]
    assert (tmp_path / "a" / "agreement" / "round2_client3.pgm").exists()
    assert reports_to_csv(a.reports) == reports_to_csv(b.reports)
    # homogeneous aggregation leaves every client with the same parameters
    assert all(c.model.params.equal(a.clients[0].model.params) for c in a.clients)
    last = a.reports[-1].clients[1]
    assert evaluate_model(a.clients[1].model, a.clients[1].test).dice == pytest.approx(last["dice"], abs=1e-12)


def test_heterogeneous_run(cache):
    cfg = tiny(mode="heterogeneous", client_channels=(2, 2, 4), client_depth=(1, 1, 1))
    res = run_experiment(cfg, cache=cache)
    assert res.server.soft_labels.shape == (6, 16, 16, 2)
    assert np.allclose(res.server.soft_labels.sum(-1), 1.0)
    assert len(res.reports) == 2 and len(res.reports[0].clients) == 3
