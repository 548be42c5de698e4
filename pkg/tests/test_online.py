"""Streaming adapters: targets, equivalences, and update mechanics."""

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultstream import datagen, model, nn, offline, online, protobank

SPEC = model.NetworkSpec(n_classes=3, n_domains=2, input_dim=16,
                         extractor_widths=(16, 8), classifier_hidden=8)


def _toy_data(n_per=40, seed=0):
    """Linearly separable classes with a separable condition factor."""
    rng = np.random.default_rng(seed)
    xs, ys, cs = [], [], []
    for k in range(3):
        for m in range(2):
            x = rng.normal(0, 1.0, size=(n_per, 16))
            x[:, k] += 4.0
            x[:, 8 + m] += 2.0
            xs.append(x)
            ys.append(np.full(n_per, k, dtype=np.int64))
            cs.append(np.full(n_per, m, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(cs)


@pytest.fixture(scope="module")
def trained():
    x, y, c = _toy_data()
    cfg = offline.OfflineConfig(epochs=25, batch_size=32, lambda_const=0.0,
                                anchors_per_class=12, seed=0)
    return offline.train_offline(x, y, c, cfg, spec=SPEC)


def _blocks(n_blocks=5, block_size=16, seed=9):
    """Hand-rolled stream of toy blocks with hidden labels."""
    rng = np.random.default_rng(seed)
    out = []
    pos = 0
    for i in range(n_blocks):
        y = rng.integers(0, 3, size=block_size)
        x = rng.normal(0, 1.0, size=(block_size, 16))
        x[np.arange(block_size), y] += 4.0
        x[:, 8] += 2.0
        out.append(datagen.StreamBlock(
            index=i + 1, x=x, _truth=y,
            _tags=["steady-1"] * block_size,
            _positions=np.arange(pos, pos + block_size)))
        pos += block_size
    return out


# --- config contract -------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="tau"):
        online.OnlineConfig(tau=0.0)
    with pytest.raises(ValueError, match="n_steps"):
        online.OnlineConfig(n_steps=0)
    with pytest.raises(ValueError, match="refresh"):
        online.OnlineConfig(refresh_every=0)
    with pytest.raises(ValueError, match="optimizer"):
        online.OnlineConfig(optimizer="lbfgs")
    with pytest.raises(ValueError, match="non-negative"):
        online.OnlineConfig(eta_f=-1e-5, eta_y=1e-4)
    # the asymmetry contract: extractor must move strictly slower
    with pytest.raises(ValueError, match="extractor rate"):
        online.OnlineConfig(eta_f=1e-3, eta_y=1e-4)
    with pytest.raises(ValueError, match="extractor rate"):
        online.OnlineConfig(eta_f=1e-4, eta_y=1e-4)
    # both-zero is the explicit escape hatch for no-adaptation runs
    assert online.OnlineConfig(eta_f=0.0, eta_y=0.0).eta_f == 0.0


@given(f=st.floats(0.0, 1.0, allow_nan=False), y=st.floats(0.0, 1.0, allow_nan=False))
def test_config_asymmetry_property(f, y):
    if (f == 0.0 and y == 0.0) or f < y:
        online.OnlineConfig(eta_f=f, eta_y=y)
    else:
        with pytest.raises(ValueError):
            online.OnlineConfig(eta_f=f, eta_y=y)


# --- geometric target ------------------------------------------------------------


def _protos(mu):
    mu = np.asarray(mu, dtype=np.float64)
    norms = np.linalg.norm(mu, axis=1, keepdims=True)
    return protobank.PrototypeSet(mu=mu, mu_bar=mu / norms, version=0)


def test_geometric_distribution_closed_form():
    protos = _protos([[1.0, 0.0], [0.0, 1.0]])
    z = np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]])
    tau = 0.5
    q = online.geometric_distribution(z, protos, tau)
    # cosine scores are [1,0], [0,1], [sqrt(.5), sqrt(.5)]
    e = np.exp(np.array([[1.0, 0.0], [0.0, 1.0],
                         [np.sqrt(0.5), np.sqrt(0.5)]]) / tau)
    expected = e / e.sum(axis=1, keepdims=True)
    assert np.abs(q - expected).max() < 1e-12


@given(seed=st.integers(0, 500))
def test_geometric_distribution_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    protos = _protos(rng.normal(size=(4, 6)))
    q = online.geometric_distribution(rng.normal(size=(8, 6)), protos, 0.1)
    assert q.shape == (8, 4)
    assert np.all(q >= 0) and np.abs(q.sum(axis=1) - 1.0).max() < 1e-9


@given(seed=st.integers(0, 200), tau_a=st.floats(0.01, 10.0), tau_b=st.floats(0.01, 10.0))
def test_argmax_invariant_to_temperature(seed, tau_a, tau_b):
    """tau sharpens the target but must never reorder the similarities."""
    rng = np.random.default_rng(seed)
    protos = _protos(rng.normal(size=(5, 7)))
    z = rng.normal(size=(6, 7))
    scores = model.normalize_rows(z) @ protos.mu_bar.T
    top2 = np.sort(scores, axis=1)[:, -2:]
    qa = online.geometric_distribution(z, protos, tau_a)
    qb = online.geometric_distribution(z, protos, tau_b)
    clear = (top2[:, 1] - top2[:, 0]) > 1e-9
    assert np.array_equal(qa.argmax(axis=1)[clear], qb.argmax(axis=1)[clear])


def test_cosine_scores_bounded():
    rng = np.random.default_rng(3)
    protos = _protos(rng.normal(size=(3, 5)) * 100)
    z = rng.normal(size=(50, 5)) * 1e6
    scores = model.normalize_rows(z) @ protos.mu_bar.T
    assert np.abs(scores).max() <= 1.0 + 1e-12


def test_temperature_limits():
    rng = np.random.default_rng(4)
    protos = _protos(rng.normal(size=(3, 5)))
    z = rng.normal(size=(10, 5))
    flat = online.geometric_distribution(z, protos, 1e4)
    assert (flat.max(axis=1) - flat.min(axis=1)).max() < 1e-3
    sharp = online.geometric_distribution(z, protos, 1e-3)
    assert sharp.max(axis=1).min() > 0.999


def test_adaptation_loss_closed_form():
    q = np.array([[1.0, 0.0]])
    p = np.array([[0.5, 0.5]])
    assert abs(online.adaptation_loss(q, p) - np.log(2.0)) < 1e-12
    # cross-entropy of a distribution with itself is its entropy
    r = np.array([[0.25, 0.75]])
    h = -(0.25 * np.log(0.25) + 0.75 * np.log(0.75))
    assert abs(online.adaptation_loss(r, r) - h) < 1e-12


# --- prediction honesty ----------------------------------------------------------


def test_predictions_precede_updates(trained):
    """Reported predictions come from the params as they were on arrival."""
    cfg = online.OnlineConfig(eta_f=1e-3, eta_y=1e-2)
    adapter = online.make_adapter("proposed", trained, cfg)
    for block in _blocks(3):
        frozen = model.clone_params(adapter.params)
        protos = adapter.prototypes
        result = adapter.process_block(block.x)
        p, z, _, _ = online.classifier_distribution(block.x, frozen)
        q = online.geometric_distribution(z, protos, cfg.tau)
        assert np.array_equal(result.predictions, p.argmax(axis=1))
        assert np.array_equal(result.geo_labels, q.argmax(axis=1))
        assert np.array_equal(result.confidence, p.max(axis=1))


def test_truth_isolation_tripwire(trained, monkeypatch):
    """No adapter code path may look behind the stream's label barrier."""
    def boom(self):
        raise AssertionError("adapter touched hidden ground truth")

    monkeypatch.setattr(datagen.StreamBlock, "reveal_truth", boom)
    monkeypatch.setattr(datagen.StreamBlock, "reveal_tags", boom)
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3)
    for kind in ("proposed", "naive", "baseline"):
        adapter = online.make_adapter(kind, trained, cfg)
        for block in _blocks(2):
            adapter.process_block(block.x)


# --- zero-rate equivalences and baseline immutability ------------------------------


@pytest.mark.parametrize("kind", ["proposed", "naive"])
@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_rates_reduce_to_baseline(trained, kind, opt):
    cfg = online.OnlineConfig(eta_f=0.0, eta_y=0.0, optimizer=opt)
    adapter = online.make_adapter(kind, trained, cfg)
    baseline = online.make_adapter("baseline", trained, online.OnlineConfig())
    for block in _blocks(4):
        ra = adapter.process_block(block.x)
        rb = baseline.process_block(block.x)
        assert np.array_equal(ra.predictions, rb.predictions)
        assert np.array_equal(ra.confidence, rb.confidence)
        assert np.array_equal(ra.geo_labels, rb.geo_labels)
    assert model.params_equal(adapter.params,
                              model.deployment_params(trained.params))


def test_baseline_params_byte_identical_after_stream(trained):
    adapter = online.make_adapter("baseline", trained, online.OnlineConfig())
    before = model.clone_params(adapter.params)
    blocks = _blocks(6)
    for block in blocks:
        adapter.process_block(block.x)
    assert model.params_equal(adapter.params, before)
    # stateless: the same block gives the same answer at any position
    r1 = adapter.process_block(blocks[0].x)
    r2 = adapter.process_block(blocks[0].x)
    assert np.array_equal(r1.predictions, r2.predictions)
    assert np.array_equal(r1.confidence, r2.confidence)


def test_replay_is_bit_exact(trained):
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, refresh_every=2)
    blocks = _blocks(5)
    a = online.make_adapter("proposed", trained, cfg)
    b = online.make_adapter("proposed", trained, cfg)
    for block in blocks:
        ra = a.process_block(block.x)
        rb = b.process_block(block.x)
        assert np.array_equal(ra.predictions, rb.predictions)
        assert ra.losses == rb.losses
    assert model.params_equal(a.params, b.params)
    assert np.array_equal(a.prototypes.mu, b.prototypes.mu)


# --- inner-loop mechanics ----------------------------------------------------------


def test_extra_inner_step_is_one_more_recompute(trained):
    """n_steps=2 equals n_steps=1 followed by one manual recompute-and-step."""
    x = _blocks(1)[0].x
    cfg1 = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, n_steps=1,
                               refresh_every=10**6)
    a1 = online.make_adapter("proposed", trained, cfg1)
    a2 = online.make_adapter("proposed", trained, replace(cfg1, n_steps=2))
    r1 = a1.process_block(x)
    r2 = a2.process_block(x)
    assert r2.losses[0] == r1.losses[0]

    p, z, cache_f, cache_y = online.classifier_distribution(x, a1.params)
    q = online.geometric_distribution(z, a1.prototypes, cfg1.tau)
    extra_loss = online.adaptation_loss(q, p)
    d_logits = nn.softmax_cross_entropy_grad(p, q)
    d_z, g_y = model.classifier_backward(d_logits, cache_y)
    _, g_f = model.extractor_backward(d_z, cache_f)
    nn.sgd_update(a1.params, g_f, cfg1.eta_f)
    nn.sgd_update(a1.params, g_y, cfg1.eta_y)

    assert r2.losses[1] == extra_loss
    assert model.params_equal(a1.params, a2.params)


def test_one_step_descends_after_enough_halving(trained):
    """The adaptation objective is smooth, so some step size must descend."""
    x = _blocks(1, block_size=32)[0].x
    protos = trained.prototypes
    base = model.clone_params(trained.deployment_params())

    def loss_at(params):
        p, z, _, _ = online.classifier_distribution(x, params)
        return online.adaptation_loss(
            online.geometric_distribution(z, protos, 0.1), p)

    l0 = loss_at(base)
    eta_f, eta_y = 1e-2, 1e-1
    for _ in range(60):
        trial = model.clone_params(base)
        p, z, cache_f, cache_y = online.classifier_distribution(x, trial)
        q = online.geometric_distribution(z, protos, 0.1)
        d_logits = nn.softmax_cross_entropy_grad(p, q)
        d_z, g_y = model.classifier_backward(d_logits, cache_y)
        _, g_f = model.extractor_backward(d_z, cache_f)
        nn.sgd_update(trial, g_f, eta_f)
        nn.sgd_update(trial, g_y, eta_y)
        if loss_at(trial) < l0:
            return
        eta_f /= 2.0
        eta_y /= 2.0
    pytest.fail("no step size descended within 60 halvings")


def test_naive_self_training_on_confident_block(trained):
    """Where the classifier is already confident and right, self-training
    reinforces rather than disturbs."""
    x_all, y_all, _ = _toy_data()
    p_all, _, _, _ = online.classifier_distribution(x_all, trained.deployment_params())
    sure = (p_all.argmax(axis=1) == y_all) & (p_all.max(axis=1) > 0.9)
    assert sure.sum() >= 16
    x = x_all[sure][:16]
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3)
    adapter = online.make_adapter("naive", trained, cfg)
    first = adapter.process_block(x)
    assert first.losses[-1] <= first.losses[0]
    again = adapter.process_block(x)
    assert np.array_equal(again.predictions, first.predictions)


def test_nonfinite_gradients_raise():
    with pytest.raises(FloatingPointError, match="block 7, inner step 2"):
        online._check_finite("proposed", 7, 2, float("nan"), {})
    with pytest.raises(FloatingPointError, match="grad\\[w\\]"):
        online._check_finite("naive", 1, 0, 0.5, {"w": np.array([np.inf])})


def test_poisoned_params_trip_the_finite_check(trained):
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3)
    adapter = online.make_adapter("proposed", trained, cfg)
    adapter.params["cls.1.W"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        adapter.process_block(_blocks(1)[0].x)


# --- prototype re-projection --------------------------------------------------------


def test_reprojection_fixed_point_and_versioning(trained):
    """With a frozen extractor, re-projection must return the same prototypes."""
    cfg = online.OnlineConfig(eta_f=0.0, eta_y=0.0, refresh_every=1)
    adapter = online.make_adapter("proposed", trained, cfg)
    mu0 = trained.prototypes.mu.copy()
    for i, block in enumerate(_blocks(3), start=1):
        result = adapter.process_block(block.x)
        assert result.proto_version == i
        assert np.abs(adapter.prototypes.mu - mu0).max() < 1e-12
        assert np.array_equal(adapter.prototypes.mu, mu0)


def test_version_changes_only_on_the_cadence(trained):
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, refresh_every=3)
    adapter = online.make_adapter("proposed", trained, cfg)
    versions = [adapter.process_block(b.x).proto_version for b in _blocks(7)]
    assert versions == [0, 0, 1, 1, 1, 2, 2]


def test_reprojection_matches_bank_recompute(trained):
    """The adapter's refreshed prototypes equal an independent recompute from
    the anchor bank and its current extractor, bit for bit."""
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, refresh_every=2)
    adapter = online.make_adapter("proposed", trained, cfg)
    for block in _blocks(4):
        adapter.process_block(block.x)
    independent = protobank.compute_prototypes(
        trained.anchor_bank, adapter.params,
        version=adapter.prototypes.version)
    assert np.array_equal(adapter.prototypes.mu, independent.mu)
    assert np.array_equal(adapter.prototypes.mu_bar, independent.mu_bar)


def test_naive_never_touches_prototypes(trained, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("naive adapter must not re-project prototypes")

    monkeypatch.setattr(protobank, "compute_prototypes", boom)
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, refresh_every=1)
    adapter = online.make_adapter("naive", trained, cfg)
    versions = {adapter.process_block(b.x).proto_version for b in _blocks(4)}
    assert versions == {trained.prototypes.version}


# --- trace log and construction -----------------------------------------------------


def test_trace_jsonl_structure(trained, tmp_path):
    path = tmp_path / "trace.jsonl"
    cfg = online.OnlineConfig(eta_f=1e-4, eta_y=1e-3, n_steps=2)
    adapter = online.make_adapter("proposed", trained, cfg, trace_path=str(path))
    for block in _blocks(3):
        adapter.process_block(block.x)
    adapter.close()
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["block"] for r in records] == [1, 2, 3]
    for r in records:
        assert r["adapter"] == "proposed"
        assert len(r["losses"]) == cfg.n_steps
        assert r["n"] == 16
        assert 0.0 <= r["agreement"] <= 1.0
        assert 0.0 <= r["mean_confidence"] <= 1.0
        assert r["proto_version"] == 0


def test_baseline_trace_has_no_losses(trained, tmp_path):
    path = tmp_path / "trace.jsonl"
    adapter = online.make_adapter("baseline", trained, online.OnlineConfig(),
                                  trace_path=str(path))
    adapter.process_block(_blocks(1)[0].x)
    adapter.close()
    record = json.loads(path.read_text().splitlines()[0])
    assert record["losses"] == []


def test_make_adapter_kinds(trained):
    cfg = online.OnlineConfig()
    assert online.make_adapter("proposed", trained, cfg).name == "proposed"
    assert online.make_adapter("baseline", trained, cfg).name == "baseline"
    assert online.make_adapter("naive", trained, cfg).name == "naive"
    with pytest.raises(ValueError, match="unknown adapter"):
        online.make_adapter("oracle", trained, cfg)
