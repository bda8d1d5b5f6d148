"""Tests for the composite replay loss, constrained finetuning, prototype
adapters, and the per-method incremental chains."""

import numpy as np
import pytest

from anchorinv.adaptation import (METHODS, AdaptationConfig, FinetuneConfig,
                                  adapt_protonet, adapt_teen,
                                  base_anchor_memory, composite_loss,
                                  finetune_session, init_new_class_weights,
                                  random_new_class_weights, run_fscil,
                                  sample_base_replay_store)
from anchorinv.anchors import AnchorSet
from anchorinv.autodiff import Tensor
from anchorinv.data import Dataset
from anchorinv.inversion import InversionConfig, ReplaySet
from anchorinv.model import (ConvBackbone, ConvBackboneConfig,
                             IdentityBackbone, ModelState, embed_batch,
                             train_base)


def _tiny_config(**overrides):
    base = dict(name="tiny", channels=3, timesteps=16, filters=2,
                temporal_kernel=5, temporal_stride=1, pool_kernel=4, pool_stride=2)
    base.update(overrides)
    return ConvBackboneConfig(**base)


def _two_class_state():
    state = ModelState(IdentityBackbone(1, 2))
    state.register_class(0, np.array([1.0, 0.0], dtype=np.float32))
    state.register_class(1, np.array([0.0, 1.0], dtype=np.float32))
    return state


def _softmax_ce(sims, temperature, col):
    z = np.asarray(sims, dtype=np.float64) / temperature
    z -= z.max()
    p = np.exp(z) / np.exp(z).sum()
    return -np.log(p[col])


def _dataset(rows, labels):
    x = np.asarray(rows, dtype=np.float32).reshape(len(rows), 1, 2)
    return Dataset(x, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# composite loss


def test_composite_loss_hand_oracle():
    state = _two_class_state()
    new = _dataset([[1.0, 0.0]], [0])       # cos sims (1, 0) -> CE toward 0
    replay = ReplaySet(np.asarray([[[0.0, 1.0]]], dtype=np.float32),
                       np.array([1]), np.array([0]), np.zeros(1))
    ce_new = _softmax_ce([1.0, 0.0], 16.0, 0)
    ce_replay = _softmax_ce([0.0, 1.0], 16.0, 1)
    for w in (0.0, 1.0, 2.5):
        got = composite_loss(state, replay, new, replay_weight=w).item()
        assert got == pytest.approx(ce_new + w * ce_replay, rel=1e-5)


def test_composite_loss_replay_conventions():
    state = _two_class_state()
    new = _dataset([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    base = composite_loss(state, None, new, replay_weight=3.0).item()
    empty = ReplaySet.empty(1, 2)
    assert composite_loss(state, empty, new, replay_weight=3.0).item() == base
    # a Dataset works as real replay and matches the equivalent ReplaySet
    rows = np.asarray([[[0.0, 1.0]]], dtype=np.float32)
    as_set = ReplaySet(rows, np.array([1]), np.zeros(1), np.zeros(1))
    as_data = Dataset(rows, np.array([1], dtype=np.int64))
    a = composite_loss(state, as_set, new, replay_weight=1.0).item()
    b = composite_loss(state, as_data, new, replay_weight=1.0).item()
    assert a == b


def test_composite_loss_replay_only_and_errors():
    state = _two_class_state()
    replay = ReplaySet(np.asarray([[[0.0, 1.0]]], dtype=np.float32),
                       np.array([1]), np.zeros(1), np.zeros(1))
    expect = 2.0 * _softmax_ce([0.0, 1.0], 16.0, 1)
    got = composite_loss(state, replay, None, replay_weight=2.0).item()
    assert got == pytest.approx(expect, rel=1e-5)
    with pytest.raises(ValueError):
        composite_loss(state, None, None, replay_weight=1.0)
    with pytest.raises(TypeError):
        composite_loss(state, [1, 2, 3], None, replay_weight=1.0)


# ---------------------------------------------------------------------------
# new-class initialization


def test_init_new_class_weights_prototypes():
    state = _two_class_state()
    rng = np.random.default_rng(130)
    rows = rng.standard_normal((4, 1, 2)).astype(np.float32)
    new = Dataset(rows, np.array([2, 2, 3, 3]))
    init_new_class_weights(state, new)
    np.testing.assert_allclose(state.class_weights[2].data,
                               rows[:2].reshape(2, 2).mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(state.class_weights[3].data,
                               rows[2:].reshape(2, 2).mean(axis=0), rtol=1e-6)
    with pytest.raises(ValueError):
        init_new_class_weights(state, new)  # already registered


def test_random_new_class_weights():
    a = _two_class_state()
    b = _two_class_state()
    random_new_class_weights(a, [2, 3], seed=4, scale=0.1)
    random_new_class_weights(b, [3, 2], seed=4, scale=0.1)
    # registration order is sorted, so the draw is order-independent
    assert a.class_weights[2].data.tobytes() == b.class_weights[2].data.tobytes()
    c = _two_class_state()
    random_new_class_weights(c, [2, 3], seed=4, scale=0.2)
    np.testing.assert_allclose(c.class_weights[2].data, 2.0 * a.class_weights[2].data,
                               rtol=1e-6)
    with pytest.raises(ValueError):
        random_new_class_weights(a, [2], seed=4)


# ---------------------------------------------------------------------------
# finetuning and the freezing contract


def _conv_state(seed=3):
    backbone = ConvBackbone.initialize(_tiny_config(), seed=seed)
    state = ModelState(backbone)
    rng = np.random.default_rng(seed + 100)
    state.register_class(0, rng.standard_normal(state.feature_dim))
    state.register_class(1, rng.standard_normal(state.feature_dim))
    return state


def test_finetune_freezes_everything_outside_trainable_set():
    state = _conv_state()
    rng = np.random.default_rng(131)
    new = Dataset(rng.standard_normal((6, 3, 16)).astype(np.float32),
                  np.full(6, 2, dtype=np.int64))
    config = FinetuneConfig(learning_rate=1e-2, iterations=5,
                            trainable_layers=("spatial",), seed=1)
    out = finetune_session(state, None, new, config)
    # untouched: temporal layer, old classifier entries, the input state itself
    for name in ("temporal_w", "temporal_b"):
        assert out.backbone.params[name].data.tobytes() \
            == state.backbone.params[name].data.tobytes()
    for c in (0, 1):
        assert out.class_weights[c].data.tobytes() \
            == state.class_weights[c].data.tobytes()
    # moved: spatial layer and the new class weights
    assert out.backbone.params["spatial_w"].data.tobytes() \
        != state.backbone.params["spatial_w"].data.tobytes()
    assert 2 in out.class_weights
    # requires_grad flags restored afterwards
    for t in out.all_parameters().values():
        assert t.requires_grad


def test_finetune_zero_iterations_only_registers():
    state = _conv_state()
    rng = np.random.default_rng(132)
    new = Dataset(rng.standard_normal((4, 3, 16)).astype(np.float32),
                  np.full(4, 2, dtype=np.int64))
    out = finetune_session(state, None, new, FinetuneConfig(iterations=0))
    assert out.seen_classes() == [0, 1, 2]
    for name, t in state.backbone.params.items():
        assert out.backbone.params[name].data.tobytes() == t.data.tobytes()
    feats = embed_batch(state, new.x).data
    np.testing.assert_allclose(out.class_weights[2].data, feats.mean(axis=0),
                               rtol=1e-5)


def test_finetune_rejects_seen_classes():
    state = _conv_state()
    new = Dataset(np.zeros((2, 3, 16), dtype=np.float32), np.array([1, 1]))
    with pytest.raises(ValueError):
        finetune_session(state, None, new, FinetuneConfig(iterations=0))


def test_finetune_detects_frozen_drift(monkeypatch):
    import anchorinv.adaptation as adaptation
    state = _conv_state()
    rng = np.random.default_rng(133)
    new = Dataset(rng.standard_normal((3, 3, 16)).astype(np.float32),
                  np.full(3, 2, dtype=np.int64))
    real_loss = adaptation.composite_loss

    def corrupting_loss(st, replay, new_set, weight):
        st.class_weights[0].data += 1.0  # frozen base class
        return real_loss(st, replay, new_set, weight)

    monkeypatch.setattr(adaptation, "composite_loss", corrupting_loss)
    with pytest.raises(RuntimeError):
        finetune_session(state, None, new, FinetuneConfig(iterations=1))


def test_finetune_naive_is_empty_replay():
    state = _conv_state()
    rng = np.random.default_rng(134)
    new = Dataset(rng.standard_normal((5, 3, 16)).astype(np.float32),
                  np.full(5, 2, dtype=np.int64))
    config = FinetuneConfig(learning_rate=5e-3, iterations=4, seed=2)
    a = finetune_session(state, None, new, config)
    b = finetune_session(state, ReplaySet.empty(3, 16), new, config)
    for name, t in a.backbone.params.items():
        assert b.backbone.params[name].data.tobytes() == t.data.tobytes()
    assert a.class_weights[2].data.tobytes() == b.class_weights[2].data.tobytes()


def test_finetune_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(replay_weight=-1.0)
    with pytest.raises(ValueError):
        FinetuneConfig(iterations=-1)
    with pytest.raises(ValueError):
        FinetuneConfig(trainable_layers=(), train_new_classifier=False)
    FinetuneConfig(trainable_layers=(), train_new_classifier=False, iterations=0)


def test_finetune_loss_log_decreases():
    state = _conv_state()
    rng = np.random.default_rng(135)
    x = rng.standard_normal((8, 3, 16)).astype(np.float32) + 2.0
    new = Dataset(x, np.full(8, 2, dtype=np.int64))
    log = []
    finetune_session(state, None, new,
                     FinetuneConfig(learning_rate=1e-2, iterations=30, seed=3), log)
    assert len(log) == 30
    assert log[-1] < log[0]


# ---------------------------------------------------------------------------
# prototype adapters


def test_adapt_protonet_prototypes_and_idempotence():
    state = _two_class_state()
    rng = np.random.default_rng(136)
    rows = rng.standard_normal((4, 1, 2)).astype(np.float32)
    new = Dataset(rows, np.array([2, 2, 2, 2]))
    a = adapt_protonet(state, new)
    np.testing.assert_allclose(a.class_weights[2].data,
                               rows.reshape(4, 2).mean(axis=0), rtol=1e-6)
    assert 2 not in state.class_weights  # input state untouched
    b = adapt_protonet(a, new)  # re-adapting the same session is allowed
    assert b.class_weights[2].data.tobytes() == a.class_weights[2].data.tobytes()


def test_adapt_teen_alpha_one_is_protonet():
    state = _two_class_state()
    rng = np.random.default_rng(137)
    rows = rng.standard_normal((5, 1, 2)).astype(np.float32)
    new = Dataset(rows, np.full(5, 2, dtype=np.int64))
    teen = adapt_teen(state, new, [0, 1], tau=32.0, alpha=1.0)
    proto = adapt_protonet(state, new)
    np.testing.assert_allclose(teen.class_weights[2].data,
                               proto.class_weights[2].data, rtol=1e-6)


def test_adapt_teen_formula_oracle():
    state = _two_class_state()
    rng = np.random.default_rng(138)
    rows = rng.standard_normal((6, 1, 2)).astype(np.float32)
    new = Dataset(rows, np.full(6, 2, dtype=np.int64))
    tau, alpha = 8.0, 0.3
    got = adapt_teen(state, new, [0, 1], tau=tau, alpha=alpha).class_weights[2].data

    proto = rows.reshape(6, 2).astype(np.float64).mean(axis=0)
    base = np.stack([state.class_weights[0].data,
                     state.class_weights[1].data]).astype(np.float64)
    unit_b = base / np.linalg.norm(base, axis=1)[:, None]
    sims = unit_b @ (proto / np.linalg.norm(proto))
    w = np.exp(tau * sims - (tau * sims).max())
    w /= w.sum()
    expect = alpha * proto + (1 - alpha) * (w @ base)
    np.testing.assert_allclose(got, expect.astype(np.float32), rtol=1e-5)


def test_adapt_teen_validation():
    state = _two_class_state()
    new = _dataset([[1.0, 1.0]], [2])
    with pytest.raises(ValueError):
        adapt_teen(state, new, [])
    with pytest.raises(ValueError):
        adapt_teen(state, new, [0, 9])
    adapted = adapt_teen(state, new, [0, 1])
    with pytest.raises(ValueError):
        adapt_teen(adapted, new, [0, 1])  # class 2 now already registered
    with pytest.raises(ValueError):
        AdaptationConfig(teen_alpha=1.5)
    with pytest.raises(ValueError):
        AdaptationConfig(teen_tau=0.0)


# ---------------------------------------------------------------------------
# replay store


def test_sample_base_replay_store():
    rng = np.random.default_rng(139)
    x = rng.standard_normal((20, 1, 2)).astype(np.float32)
    y = np.repeat([0, 1], 10)
    base = Dataset(x, y)
    store = sample_base_replay_store(base, per_class=3, seed=7)
    assert len(store) == 6
    np.testing.assert_array_equal(np.unique(store.y), [0, 1])
    for i in range(len(store)):
        assert any(np.array_equal(store.x[i], xb) for xb in x)
    again = sample_base_replay_store(base, per_class=3, seed=7)
    assert store.x.tobytes() == again.x.tobytes()
    capped = sample_base_replay_store(base, per_class=99, seed=7)
    assert len(capped) == 20


# ---------------------------------------------------------------------------
# full chains


def _chain_fixture():
    """Identity-backbone FSCIL problem: four directions in the plane."""
    rng = np.random.default_rng(140)
    angles = {0: 0.0, 1: np.pi / 2, 2: np.pi, 3: -np.pi / 2}
    def sample(c, n):
        a = angles[c] + 0.1 * rng.standard_normal(n)
        return np.stack([np.cos(a), np.sin(a)], axis=1).reshape(n, 1, 2).astype(np.float32)
    base = Dataset(np.concatenate([sample(0, 12), sample(1, 12)]),
                   np.repeat([0, 1], 12))
    s1 = Dataset(sample(2, 5), np.full(5, 2, dtype=np.int64))
    s2 = Dataset(sample(3, 5), np.full(5, 3, dtype=np.int64))
    state = _two_class_state()
    config = AdaptationConfig(
        finetune=FinetuneConfig(trainable_layers=(), learning_rate=1e-2,
                                iterations=3, seed=1),
        inversion=InversionConfig(iterations=5, seed=1),
        label_inversion_iterations=5,
        anchors_per_class=4, real_per_class=4)
    return base, [s1, s2], state, config


@pytest.mark.parametrize("method", METHODS)
def test_run_fscil_chain_shapes(method):
    base, sessions, state, config = _chain_fixture()
    if method in ("deepdream", "deepinv"):
        state.feature_stats = None  # deepdream path has no stat term
    if method == "deepinv":
        from anchorinv.model import FeatureStats
        state.feature_stats = FeatureStats(mean=np.zeros(2, dtype=np.float32),
                                           var=np.ones(2, dtype=np.float32))
    chain = run_fscil(base, sessions, method, config, state, seed=5)
    assert len(chain) == 3
    assert chain[0] is state
    assert chain[1].seen_classes() == [0, 1, 2]
    assert chain[2].seen_classes() == [0, 1, 2, 3]
    # the base state is never mutated by the chain
    assert state.seen_classes() == [0, 1]


def test_run_fscil_unknown_method():
    base, sessions, state, config = _chain_fixture()
    with pytest.raises(KeyError) as err:
        run_fscil(base, sessions, "oracle", config, state)
    for m in METHODS:
        assert m in str(err.value)


def test_run_fscil_precomputed_anchors():
    base, sessions, state, config = _chain_fixture()
    anchors = base_anchor_memory(state, base, config)
    assert anchors.classes() == [0, 1]
    assert len(anchors) == 2 * config.anchors_per_class
    a = run_fscil(base, sessions, "anchorinv", config, state, seed=5)
    b = run_fscil(None, sessions, "anchorinv", config, state,
                  base_anchors=anchors, seed=5)
    for sa, sb in zip(a[1:], b[1:]):
        for c in sa.seen_classes():
            assert sa.class_weights[c].data.tobytes() \
                == sb.class_weights[c].data.tobytes()


def test_run_fscil_missing_inputs():
    _, sessions, state, config = _chain_fixture()
    with pytest.raises(ValueError):
        run_fscil(None, sessions, "anchorinv", config, state)
    with pytest.raises(ValueError):
        run_fscil(None, sessions, "realreplay", config, state)


def test_run_fscil_realreplay_store_grows():
    base, sessions, state, config = _chain_fixture()
    store = sample_base_replay_store(base, config.real_per_class, seed=5)
    a = run_fscil(None, sessions, "realreplay", config, state,
                  base_replay_store=store, seed=5)
    b = run_fscil(base, sessions, "realreplay", config, state, seed=5)
    for sa, sb in zip(a[1:], b[1:]):
        for c in sa.seen_classes():
            assert sa.class_weights[c].data.tobytes() \
                == sb.class_weights[c].data.tobytes()


def test_run_fscil_protonet_matches_direct_adapters():
    base, sessions, state, config = _chain_fixture()
    chain = run_fscil(base, sessions, "protonet", config, state, seed=5)
    direct = adapt_protonet(adapt_protonet(state, sessions[0]), sessions[1])
    for c in direct.seen_classes():
        assert chain[2].class_weights[c].data.tobytes() \
            == direct.class_weights[c].data.tobytes()
