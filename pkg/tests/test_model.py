"""Network modules: initialization, composite gradients, reversal contract,
latent normalization, parameter plumbing, and the checkpoint container."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultstream import model, nn, protobank
from oracles import finite_difference, rel_err

TINY = model.NetworkSpec(
    n_classes=3,
    n_domains=2,
    input_dim=10,
    extractor_widths=(8, 4),
    classifier_hidden=5,
    discriminator_widths=(6, 5, 4),
    discriminator_bn_layer=2,
)


def _tiny_batch(seed=7, B=6):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, TINY.input_dim))
    q_cls = np.eye(TINY.n_classes)[rng.integers(0, TINY.n_classes, B)]
    q_dom = np.eye(TINY.n_domains)[rng.integers(0, TINY.n_domains, B)]
    return x, q_cls, q_dom


def _losses(params, x, q_cls, q_dom, lam):
    """Both head losses plus every cache needed for the backward pass."""
    z, cache_f = model.extract_features(x, params, mode="train")
    logits_y, cache_y = model.classify(z, params)
    p_y = nn.softmax(logits_y)
    loss_cls = nn.cross_entropy_soft(q_cls, p_y)
    logits_d, cache_d = model.discriminate(z, params, lam, mode="train")
    p_d = nn.softmax(logits_d)
    loss_dom = nn.cross_entropy_soft(q_dom, p_d)
    return loss_cls, loss_dom, (cache_f, cache_y, cache_d, p_y, p_d)


def _analytic_grads(params, x, q_cls, q_dom, lam):
    _, _, (cache_f, cache_y, cache_d, p_y, p_d) = _losses(params, x, q_cls, q_dom, lam)
    d_z_cls, g_y = model.classifier_backward(
        nn.softmax_cross_entropy_grad(p_y, q_cls), cache_y
    )
    d_z_dom, g_d = model.discriminator_backward(
        nn.softmax_cross_entropy_grad(p_d, q_dom), cache_d
    )
    _, g_f = model.extractor_backward(d_z_cls + d_z_dom, cache_f)
    return {**g_f, **g_y, **g_d}


# --- spec validation ----------------------------------------------------------

def test_spec_rejects_bad_arguments():
    with pytest.raises(ValueError):
        model.NetworkSpec(n_classes=1, n_domains=3)
    with pytest.raises(ValueError):
        model.NetworkSpec(n_classes=4, n_domains=1)
    with pytest.raises(ValueError):
        model.NetworkSpec(n_classes=4, n_domains=3, extractor_widths=())
    with pytest.raises(ValueError):
        model.NetworkSpec(n_classes=4, n_domains=3, discriminator_bn_layer=3)


def test_spec_dict_round_trip():
    spec = model.NetworkSpec(n_classes=4, n_domains=3)
    assert model.NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.latent_dim == 64


# --- initialization -----------------------------------------------------------

def test_init_shapes_biases_and_bn_identity():
    params = model.init_params(TINY, seed=0)
    assert params["ext.0.W"].shape == (10, 8)
    assert params["ext.1.W"].shape == (8, 4)
    assert params["cls.0.W"].shape == (4, 5)
    assert params["cls.1.W"].shape == (5, 3)
    assert params["dom.0.W"].shape == (4, 6)
    assert params["dom.3.W"].shape == (4, 2)
    # batch norm present on every extractor stage but only one discriminator layer
    assert "ext.1.bn.gamma" in params
    assert "dom.2.bn.gamma" in params
    assert "dom.0.bn.gamma" not in params
    assert "dom.1.bn.gamma" not in params
    assert not any(k.startswith("cls.") and ".bn." in k for k in params)
    for k, v in params.items():
        if k.endswith(".b") or k.endswith(".bn.beta") or k.endswith(".bn.mean"):
            assert not v.any(), k
        if k.endswith(".bn.gamma") or k.endswith(".bn.var"):
            assert (v == 1.0).all(), k


def test_init_is_seed_deterministic():
    a = model.init_params(TINY, seed=3)
    b = model.init_params(TINY, seed=3)
    c = model.init_params(TINY, seed=4)
    assert model.params_equal(a, b)
    assert not model.params_equal(a, c)


def test_init_weights_respect_fan_in_bound():
    params = model.init_params(TINY, seed=11)
    for key, fan_in in [("ext.0.W", 10), ("ext.1.W", 8), ("cls.0.W", 4), ("dom.1.W", 6)]:
        bound = np.sqrt(6.0 / fan_in)
        assert np.abs(params[key]).max() <= bound, key


def test_reference_architecture_parameter_count():
    # frozen totals for the deployed geometry (4 fault classes, 3 conditions):
    # 7_004_391 trainable tensors plus 3_840 running batch-norm statistics
    spec = model.NetworkSpec(n_classes=4, n_domains=3)
    params = model.init_params(spec, seed=0)
    total = sum(v.size for v in params.values())
    trainable = sum(params[k].size for k in model.trainable_keys(params))
    assert total == 7_008_231
    assert trainable == 7_004_391
    assert params["ext.0.W"].shape == (6144, 1024)
    assert params["ext.3.W"].shape == (256, 64)
    assert params["dom.2.bn.gamma"].shape == (64,)
    bound = np.sqrt(6.0 / 6144)
    w = params["ext.0.W"]
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.98 * bound  # the draw actually fills the interval


# --- forward contracts --------------------------------------------------------

def test_latent_is_nonnegative_and_shape_checked():
    params = model.init_params(TINY, seed=5)
    x, _, _ = _tiny_batch()
    z, _ = model.extract_features(x, params, mode="train")
    assert z.shape == (6, 4)
    assert (z >= 0.0).all()
    with pytest.raises(ValueError):
        model.extract_features(x[:, :-1], params)
    with pytest.raises(ValueError):
        model.extract_features(x, params, mode="banana")
    with pytest.raises(ValueError):
        model.classify(np.zeros((2, 3)), params)
    with pytest.raises(ValueError):
        model.discriminate(np.zeros((2, 3)), params, 0.5)
    with pytest.raises(ValueError):
        model.discriminate(np.zeros((2, 4)), params, -0.1)


def test_eval_forward_leaves_running_stats_untouched():
    params = model.init_params(TINY, seed=5)
    x, _, _ = _tiny_batch()
    before = model.clone_params(params)
    model.extract_features(x, params, mode="eval")
    model.discriminate(np.abs(np.random.default_rng(0).normal(size=(4, 4))),
                       params, 0.3, mode="eval")
    assert model.params_equal(params, before)
    model.extract_features(x, params, mode="train")
    assert not model.params_equal(params, before)  # running means moved
    # ... but only the running statistics moved
    for k in model.trainable_keys(params):
        assert params[k].tobytes() == before[k].tobytes()


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(min_value=0.0, max_value=10.0, allow_nan=False))
def test_reversal_is_identity_in_forward(lam):
    params = model.init_params(TINY, seed=9)
    z = np.abs(np.random.default_rng(2).normal(size=(3, 4)))
    out_lam, _ = model.discriminate(z, params, lam, mode="eval")
    out_zero, _ = model.discriminate(z, params, 0.0, mode="eval")
    assert np.array_equal(out_lam, out_zero)


# --- gradients ----------------------------------------------------------------

def test_composite_gradients_match_finite_differences():
    """Every trainable tensor, central differences, both heads live.

    Per group the analytic wiring must equal the derivative of:
      classifier params   d/dtheta  CE(class)
      discriminator params d/dtheta CE(condition)
      extractor params    d/dtheta [ CE(class) - lam * CE(condition) ]
    (the reversal layer flips only what flows into the extractor).
    """
    lam = 0.7
    x, q_cls, q_dom = _tiny_batch()
    params = model.init_params(TINY, seed=1)
    grads = _analytic_grads(params, x, q_cls, q_dom, lam)

    def fd_target(key):
        def f():
            loss_cls, loss_dom, _ = _losses(params, x, q_cls, q_dom, lam)
            if key.startswith("ext."):
                return loss_cls - lam * loss_dom
            if key.startswith("cls."):
                return loss_cls
            return loss_dom
        return f

    for key in model.trainable_keys(params):
        fd = finite_difference(fd_target(key), params[key])
        assert np.allclose(grads[key], fd, rtol=1e-4, atol=1e-8), key

    # a bias feeding a train-mode batch norm is a flat direction: the batch
    # mean absorbs the shift, so its analytic gradient must vanish
    for key in ("ext.0.b", "ext.1.b", "dom.2.b"):
        assert np.abs(grads[key]).max() < 1e-12, key


def test_reversal_scales_only_the_latent_gradient():
    """theta_d gradients are lambda-independent; the extractor sees -lam times
    the raw latent gradient. Verified against two explicit backward passes."""
    lam = 0.6
    x, q_cls, q_dom = _tiny_batch(seed=13)
    params = model.init_params(TINY, seed=2)

    z, cache_f = model.extract_features(x, params, mode="train")
    logits_y, cache_y = model.classify(z, params)
    p_y = nn.softmax(logits_y)
    d_z_cls, _ = model.classifier_backward(
        nn.softmax_cross_entropy_grad(p_y, q_cls), cache_y
    )

    def dom_backward(lam_val):
        logits_d, cache_d = model.discriminate(z, params, lam_val, mode="eval")
        p_d = nn.softmax(logits_d)
        return model.discriminator_backward(
            nn.softmax_cross_entropy_grad(p_d, q_dom), cache_d
        )

    d_z_lam, g_d_lam = dom_backward(lam)
    d_z_unit, g_d_unit = dom_backward(1.0)
    d_z_zero, _ = dom_backward(0.0)

    for k in g_d_lam:  # head gradients never see the reversal
        assert np.array_equal(g_d_lam[k], g_d_unit[k]), k
    assert rel_err(d_z_lam, lam * d_z_unit) < 1e-12
    assert not d_z_zero.any()

    # composite extractor gradient == grad(CE_cls) - lam * grad(CE_dom)
    _, g_composite = model.extractor_backward(d_z_cls + d_z_lam, cache_f)
    _, g_cls_only = model.extractor_backward(d_z_cls, cache_f)
    _, g_dom_raw = model.extractor_backward(-d_z_unit, cache_f)
    for k in g_composite:
        want = g_cls_only[k] - lam * g_dom_raw[k]
        assert np.allclose(g_composite[k], want, rtol=1e-10, atol=1e-14), k


# --- latent normalization -----------------------------------------------------

def test_normalize_latent_unit_norm_and_degenerate_guard():
    model.degenerate_normalizations.reset()
    v = np.array([3.0, 4.0, 0.0])
    out = model.normalize_latent(v)
    assert rel_err(out, [0.6, 0.8, 0.0]) < 1e-15
    zero = np.zeros(3)
    kept = model.normalize_latent(zero)
    assert np.array_equal(kept, zero)
    assert model.degenerate_normalizations.count == 1
    model.degenerate_normalizations.reset()
    assert model.degenerate_normalizations.count == 0


def test_normalize_rows_counts_each_degenerate_row():
    model.degenerate_normalizations.reset()
    z = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 1e-15]])
    out = model.normalize_rows(z)
    assert rel_err(out[0], [0.6, 0.8]) < 1e-15
    assert np.array_equal(out[1], z[1])
    assert np.array_equal(out[2], z[2])
    assert model.degenerate_normalizations.count == 2
    model.degenerate_normalizations.reset()


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**31 - 1))
def test_normalize_rows_yields_unit_vectors(rows, seed):
    z = np.random.default_rng(seed).normal(size=(rows, 5)) + 0.1
    out = model.normalize_rows(z)
    assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-12


# --- parameter plumbing -------------------------------------------------------

def test_clone_and_equality_are_bit_level():
    a = model.init_params(TINY, seed=6)
    b = model.clone_params(a)
    assert model.params_equal(a, b)
    b["cls.1.b"][0] += 1e-300  # subnormal nudge still flips bytes
    assert not model.params_equal(a, b)
    c = model.clone_params(a)
    del c["cls.1.b"]
    assert not model.params_equal(a, c)


def test_trainable_keys_and_prefix_filter():
    params = model.init_params(TINY, seed=6)
    keys = model.trainable_keys(params)
    assert not any(k.endswith(".bn.mean") or k.endswith(".bn.var") for k in keys)
    assert set(model.trainable_keys(params, "cls.")) == {
        "cls.0.W", "cls.0.b", "cls.1.W", "cls.1.b"
    }
    ext = model.trainable_keys(params, "ext.")
    assert all(k.startswith("ext.") for k in ext)
    assert "ext.0.bn.gamma" in ext


def test_deployment_params_strip_discriminator_and_copy():
    params = model.init_params(TINY, seed=6)
    dep = model.deployment_params(params)
    assert not any(k.startswith("dom.") for k in dep)
    assert any(k.startswith("ext.") for k in dep)
    dep["ext.0.W"][0, 0] = 99.0
    assert params["ext.0.W"][0, 0] != 99.0


# --- checkpoints ----------------------------------------------------------------

def _small_bank_and_protos(params):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, TINY.input_dim))
    y = np.arange(30) % TINY.n_classes
    c = np.arange(30) % 2
    bank = protobank.build_anchor_bank(x, y, c, anchors_per_class=6, seed=0)
    protos = protobank.compute_prototypes(bank, params, version=3)
    return bank, protos


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = model.init_params(TINY, seed=8)
    bank, protos = _small_bank_and_protos(params)
    path = tmp_path / "ck.npz"
    model.save_checkpoint(path, params, TINY, prototypes=protos,
                          anchor_bank=bank, meta={"seed": 8, "note": "rt"})
    ck = model.load_checkpoint(path)
    assert ck.spec == TINY
    assert model.params_equal(ck.params, params)
    assert ck.prototypes.version == 3
    assert ck.prototypes.mu.tobytes() == protos.mu.tobytes()
    assert ck.prototypes.mu_bar.tobytes() == protos.mu_bar.tobytes()
    assert ck.anchor_bank.n_classes == bank.n_classes
    for k in range(bank.n_classes):
        assert ck.anchor_bank.inputs[k].tobytes() == bank.inputs[k].tobytes()
        assert np.array_equal(ck.anchor_bank.source_indices[k], bank.source_indices[k])
    assert ck.meta == {"seed": 8, "note": "rt"}


def test_checkpoint_without_optional_parts(tmp_path):
    params = model.init_params(TINY, seed=8)
    path = tmp_path / "bare.npz"
    model.save_checkpoint(path, params, TINY)
    ck = model.load_checkpoint(path)
    assert ck.prototypes is None
    assert ck.anchor_bank is None
    assert model.params_equal(ck.params, params)


def test_checkpoint_rejects_foreign_and_future_files(tmp_path):
    alien = tmp_path / "alien.npz"
    np.savez(alien, meta=np.array(json.dumps({"format": "something-else", "version": 1})))
    with pytest.raises(ValueError, match="not a"):
        model.load_checkpoint(alien)
    future = tmp_path / "future.npz"
    np.savez(future, meta=np.array(json.dumps(
        {"format": model.CHECKPOINT_FORMAT, "version": 99, "spec": TINY.to_dict()}
    )))
    with pytest.raises(ValueError, match="version"):
        model.load_checkpoint(future)
