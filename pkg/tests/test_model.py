'''
Test suite for egclmil.model
'''
from dataclasses import replace

import numpy as np
import pytest

from egclmil.config import LossConfig, ModelConfig
from egclmil.errors import *
from egclmil.grad import grad_check
from egclmil.losses import ExpertPairSet, MemoryQueue
from egclmil.model import (
    ClamConfig,
    ClamHead,
    ClamParams,
    LinearHeadParams,
    MeanMilConfig,
    MeanMilHead,
    MlpHeadParams,
    build_head,
    clam_forward,
    init_clam_params,
    init_meanmil_params,
    instance_targets,
    load_checkpoint,
    save_checkpoint,
)
from egclmil.train import step_objective

SMALL = ClamConfig(in_dim=5, proj_dim=4, attn_hidden=3, n_classes=3, gated=True, k_instance=2)


def _bag(rng, patches=6, dim=5):
    return rng.normal(size=(patches, dim))


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _queue(rng, dim, labels):
    queue = MemoryQueue(capacity=16)
    for label in labels:
        queue.push(_unit(rng, dim), label)
    return queue


def test_clam_forward_invariants():
    rng = np.random.default_rng(0)
    params = init_clam_params(SMALL, rng)
    cache = clam_forward(_bag(rng), params, SMALL, label=1)
    assert cache.A.shape == (6, 3)
    assert np.allclose(cache.A.sum(axis=0), 1.0)
    assert np.all(cache.A >= 0)
    assert cache.probs.sum() == pytest.approx(1.0)
    assert np.linalg.norm(cache.z) == pytest.approx(1.0)
    assert np.allclose(cache.R, cache.A.T @ cache.H)


def test_clam_forward_without_label_has_no_z():
    rng = np.random.default_rng(1)
    cache = clam_forward(_bag(rng), init_clam_params(SMALL, rng), SMALL)
    assert cache.z is None


def test_clam_permutation_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        params = init_clam_params(SMALL, rng)
        P = int(rng.integers(1, 17))
        X = _bag(rng, patches=P)
        perm = rng.permutation(P)
        a = clam_forward(X, params, SMALL, label=0)
        b = clam_forward(X[perm], params, SMALL, label=0)
        np.testing.assert_allclose(b.A, a.A[perm], rtol=0, atol=1e-10)
        np.testing.assert_allclose(b.R, a.R, rtol=0, atol=1e-10)
        np.testing.assert_allclose(b.logits, a.logits, rtol=0, atol=1e-10)
        np.testing.assert_allclose(b.z, a.z, rtol=0, atol=1e-10)


def test_forward_invariants_over_random_bags():
    rng = np.random.default_rng(20)
    configs = [SMALL, replace(SMALL, gated=False, n_classes=4)]
    for i in range(1000):
        config = configs[i % 2]
        params = init_clam_params(config, rng)
        X = 3.0 * _bag(rng, patches=int(rng.integers(1, 17)))
        cache = clam_forward(X, params, config, label=int(rng.integers(config.n_classes)))
        assert np.all(np.abs(cache.A.sum(axis=0) - 1.0) <= 1e-9)
        assert abs(cache.probs.sum() - 1.0) <= 1e-12
        assert abs(np.linalg.norm(cache.z) - 1.0) <= 1e-9


def test_clam_single_patch():
    rng = np.random.default_rng(3)
    params = init_clam_params(SMALL, rng)
    cache = clam_forward(_bag(rng, patches=1), params, SMALL, label=2)
    assert np.allclose(cache.A, 1.0)
    assert np.allclose(cache.R, np.repeat(cache.H, 3, axis=0))
    assert instance_targets(cache, 2, SMALL.k_instance) == []


def test_clam_shape_errors():
    rng = np.random.default_rng(4)
    params = init_clam_params(SMALL, rng)
    with pytest.raises(ShapeError):
        clam_forward(np.zeros((0, 5)), params, SMALL)
    with pytest.raises(ShapeError):
        clam_forward(np.zeros((3, 4)), params, SMALL)
    with pytest.raises(ShapeError):
        clam_forward(_bag(rng), params, SMALL, label=3)


def test_clam_config_validation():
    with pytest.raises(ConfigError):
        ClamConfig(proj_dim=0)
    with pytest.raises(ConfigError):
        MeanMilConfig(variant='attention')


def test_instance_targets_small_bag():
    rng = np.random.default_rng(5)
    cache = clam_forward(_bag(rng, patches=5), init_clam_params(SMALL, rng), SMALL, label=1)
    selections = instance_targets(cache, 1, k=8)
    assert [s.branch for s in selections] == [0, 1, 2]
    truth = selections[1]
    assert len(truth.indices) == 4
    assert truth.targets.tolist() == [1.0, 1.0, -1.0, -1.0]
    assert np.all(cache.A[truth.indices[:2], 1] >= cache.A[truth.indices[2:], 1].max())
    for other in (selections[0], selections[2]):
        assert len(other.indices) == 2
        assert other.targets.tolist() == [-1.0, -1.0]


def test_instance_targets_ties_prefer_low_index():
    rng = np.random.default_rng(6)
    params = init_clam_params(SMALL, rng)
    params.w_c[:] = 0.0
    cache = clam_forward(_bag(rng, patches=5), params, SMALL, label=0)
    assert np.allclose(cache.A, 0.2)
    selections = instance_targets(cache, 0, k=2)
    assert selections[0].indices.tolist() == [0, 1, 3, 4]
    assert selections[1].indices.tolist() == [0, 1]


GRAD_SEEDS = range(20)
LOSS_MODES = {
    'baseline': LossConfig(lam=0.0, alpha=1e-3, mode='baseline'),
    'cl': LossConfig(lam=0.5, tau=0.5, alpha=1e-3, mode='cl'),
    'egcl': LossConfig(lam=0.5, tau=0.5, alpha=1e-3, gamma=3.0, mode='egcl'),
}
QUEUE_LABELS = [0, 1, 2, 1, 0, 2, 0, 1]
# differences at this level are finite-difference round-off, not gradient error
GRAD_ATOL = 1e-9


def _pairs(loss_config, n_classes):
    return ExpertPairSet(pairs=frozenset({(0, 1)}), gamma=loss_config.gamma, n_classes=n_classes)


def _clam_objective(config, loss_config, seed):
    rng = np.random.default_rng(seed)
    params = init_clam_params(config, rng)
    X = _bag(rng, patches=int(rng.integers(2, 17)), dim=config.in_dim)
    label = 1
    queue = _queue(rng, config.proj_dim, QUEUE_LABELS)
    pairs = _pairs(loss_config, config.n_classes)
    fixed = ClamHead(config, params).select_instances(clam_forward(X, params, config, label), label)

    def f(tensors):
        head = ClamHead(config, ClamParams.from_tensors(tensors))
        outcome = step_objective(head, X, label, loss_config, queue, pairs, selections=fixed)
        return outcome.total.value, outcome.grads

    return f, params.tensors()


def _meanmil_objective(variant, loss_config, seed):
    rng = np.random.default_rng(seed)
    config = MeanMilConfig(in_dim=5, n_classes=3, variant=variant, hidden=6)
    params = init_meanmil_params(config, rng)
    X = _bag(rng, patches=int(rng.integers(2, 17)))
    if variant == 'mlp':
        # every hidden unit active so no relu kink is crossed
        params.b1[:] = np.abs(params.b1) + 0.5
        X = 0.05 * X
    queue = _queue(rng, config.hidden if variant == 'mlp' else config.in_dim, QUEUE_LABELS)
    pairs = _pairs(loss_config, config.n_classes)
    params_type = MlpHeadParams if variant == 'mlp' else LinearHeadParams

    def f(tensors):
        head = MeanMilHead(config, params_type.from_tensors(tensors))
        outcome = step_objective(head, X, 1, loss_config, queue, pairs)
        return outcome.total.value, outcome.grads

    return f, params.tensors()


@pytest.mark.parametrize('mode', sorted(LOSS_MODES))
@pytest.mark.parametrize('gated', [True, False])
def test_clam_composite_gradient(gated, mode):
    config = replace(SMALL, gated=gated)
    for seed in GRAD_SEEDS:
        f, tensors = _clam_objective(config, LOSS_MODES[mode], seed)
        report = grad_check(f, tensors, name=f'clam_{mode}_{seed}', atol=GRAD_ATOL)
        assert report.passed, str(report)


@pytest.mark.parametrize('mode', sorted(LOSS_MODES))
@pytest.mark.parametrize('variant', ['linear', 'mlp'])
def test_meanmil_composite_gradient(variant, mode):
    for seed in GRAD_SEEDS:
        f, tensors = _meanmil_objective(variant, LOSS_MODES[mode], seed)
        report = grad_check(f, tensors, name=f'meanmil_{variant}_{mode}_{seed}', atol=GRAD_ATOL)
        assert report.passed, str(report)


def test_forward_skips_embedding_when_not_needed():
    rng = np.random.default_rng(17)
    params = init_clam_params(SMALL, rng)
    X = _bag(rng)
    assert clam_forward(X, params, SMALL, label=1, embed=False).z is None
    with pytest.raises(ShapeError):
        clam_forward(X, params, SMALL, label=3, embed=False)


def test_dead_hidden_layer_only_fails_with_contrastive_term():
    rng = np.random.default_rng(18)
    config = MeanMilConfig(in_dim=5, n_classes=3, variant='mlp', hidden=6)
    params = init_meanmil_params(config, rng)
    params.b1[:] = -10.0
    head = MeanMilHead(config, params)
    X = 0.1 * _bag(rng)
    queue = _queue(rng, 6, QUEUE_LABELS)
    for loss_config in (
        LossConfig(lam=0.0, mode='baseline'),
        LossConfig(lam=0.5, mode='baseline'),
        LossConfig(lam=0.0, mode='cl'),
    ):
        outcome = step_objective(head, X, 1, loss_config, queue)
        assert outcome.cache.z is None
        assert outcome.contrastive is None
        assert np.isfinite(outcome.total.value)
    assert step_objective(head, X, 1, LossConfig(lam=0.5, mode='cl'), queue=None).cache.z is None
    with pytest.raises(DegenerateEmbedding):
        step_objective(head, X, 1, LossConfig(lam=0.5, mode='cl'), queue)


def test_ungated_clam_has_no_gate_tensors(tmp_path):
    rng = np.random.default_rng(19)
    config = replace(SMALL, gated=False)
    params = init_clam_params(config, rng)
    assert params.U is None and params.b_U is None
    assert 'U' not in params.tensors() and 'b_U' not in params.tensors()
    assert params.copy().U is None

    head = ClamHead(config, params)
    outcome = step_objective(head, _bag(rng), 0, LossConfig(lam=0.0, alpha=1e-3, mode='baseline'))
    assert set(outcome.grads) == set(params.tensors())
    assert 'U' not in outcome.total.param_grads

    path = tmp_path / 'ungated.bin'
    save_checkpoint(head, ('a', 'b', 'c'), path)
    loaded, _ = load_checkpoint(path)
    assert loaded.params.U is None
    assert set(loaded.params.tensors()) == set(params.tensors())

    gated = init_clam_params(SMALL, rng)
    assert gated.U.shape == (3, 4) and gated.b_U.shape == (3,)
    with pytest.raises(ShapeError):
        clam_forward(_bag(rng), params, SMALL)


def test_meanmil_linear_contrastive_is_inert():
    rng = np.random.default_rng(11)
    config = MeanMilConfig(in_dim=5, n_classes=3, variant='linear')
    head = MeanMilHead(config, init_meanmil_params(config, rng))
    X = _bag(rng)
    queue = _queue(rng, 5, [0, 0, 1])
    with_cl = step_objective(head, X, 0, LossConfig(lam=0.5, mode='cl'), queue)
    without = step_objective(head, X, 0, LossConfig(lam=0.0, mode='baseline'), queue)
    assert with_cl.total.components['contrastive'] > 0
    for name in ('W', 'b'):
        assert np.allclose(with_cl.grads[name], without.grads[name])


def test_meanmil_forward_is_mean_pooling():
    rng = np.random.default_rng(12)
    config = MeanMilConfig(in_dim=5, n_classes=2, variant='linear')
    params = init_meanmil_params(config, rng)
    X = _bag(rng)
    cache = MeanMilHead(config, params).forward(X, label=1)
    assert np.allclose(cache.logits, params.W @ X.mean(axis=0) + params.b)
    assert np.allclose(cache.z, X.mean(axis=0) / np.linalg.norm(X.mean(axis=0)))


def test_build_head_kinds():
    rng = np.random.default_rng(13)
    model_config = ModelConfig(proj_dim=4, attn_hidden=3, mlp_hidden=6)
    assert build_head('clam', 5, 3, model_config, rng).kind == 'clam'
    assert isinstance(build_head('meanmil_linear', 5, 3, model_config, rng).params, LinearHeadParams)
    mlp = build_head('meanmil_mlp', 5, 3, model_config, rng)
    assert mlp.kind == 'meanmil_mlp'
    assert mlp.params.W1.shape == (6, 5)
    with pytest.raises(ConfigError):
        build_head('transmil', 5, 3, model_config, rng)


def test_params_copy_is_deep():
    rng = np.random.default_rng(14)
    params = init_clam_params(SMALL, rng)
    copied = params.copy()
    copied.W_head[:] = 0.0
    assert not np.allclose(params.W_head, 0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    model_config = ModelConfig(proj_dim=4, attn_hidden=3, mlp_hidden=6)
    X = _bag(rng)
    for kind in ('clam', 'meanmil_linear', 'meanmil_mlp'):
        head = build_head(kind, 5, 3, model_config, rng)
        path = tmp_path / f'{kind}.bin'
        save_checkpoint(head, ('a', 'b', 'c'), path)
        assert path.read_bytes()[:4] == b'CKPT'
        loaded, class_names = load_checkpoint(path)
        assert class_names == ('a', 'b', 'c')
        assert loaded.kind == kind
        assert loaded.config == head.config
        for name, value in head.params.tensors().items():
            assert loaded.params.tensors()[name].shape == value.shape
        assert np.array_equal(loaded.forward(X).probs, head.forward(X).probs)


def test_checkpoint_corruption(tmp_path):
    rng = np.random.default_rng(16)
    head = build_head('clam', 5, 3, ModelConfig(proj_dim=4, attn_hidden=3), rng)
    path = tmp_path / 'ckpt.bin'
    save_checkpoint(head, ('a', 'b', 'c'), path)
    data = path.read_bytes()

    bad = tmp_path / 'bad.bin'
    for corrupted in (b'XXXX' + data[4:], data[:-8], data + b'\x00', data[:4] + b'\x09\x00' + data[6:]):
        bad.write_bytes(corrupted)
        with pytest.raises(BagFormatError):
            load_checkpoint(bad)
    with pytest.raises(BagFormatError):
        load_checkpoint(tmp_path / 'missing.bin')
