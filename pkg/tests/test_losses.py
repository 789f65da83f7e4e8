'''
Test suite for egclmil.losses
'''
import json
from pathlib import Path

import numpy as np
import pytest

import egclmil
from egclmil.bagdata import SEVEN_CLASS_NAMES
from egclmil.config import LossConfig
from egclmil.errors import *
from egclmil.losses import (
    DEFAULT_EXPERT_PAIRS,
    ExpertPairSet,
    LossTerm,
    MemoryQueue,
    bag_ce,
    branch_instance_loss,
    contrastive_loss,
    default_expert_pairs,
    instance_hinge,
    l2_term,
    load_expert_pairs,
    queue_push,
    resolve_expert_pairs,
    total_loss,
)


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _filled_queue(rng, dim, labels, capacity=64):
    queue = MemoryQueue(capacity=capacity)
    for label in labels:
        queue.push(_unit(rng, dim), label)
    return queue


def _oracle(z, keys, labels, label, tau, weights):
    ''' -mean over positives of log(exp(s_j / tau) / sum_k w_k exp(s_k / tau)) '''
    s = keys @ z / tau
    denominator = sum(w * np.exp(v) for w, v in zip(weights, s))
    return -np.mean([np.log(np.exp(s[j]) / denominator) for j in range(len(labels)) if labels[j] == label])


def test_bag_ce():
    term = bag_ce(np.array([0.2, 0.5, 0.3]), 1)
    assert term.value == pytest.approx(-np.log(0.5))
    assert term.grad.tolist() == pytest.approx([0.2, -0.5, 0.3])
    assert bag_ce(np.array([1.0, 0.0]), 1).value == pytest.approx(-np.log(1e-12))
    with pytest.raises(ShapeError):
        bag_ce(np.array([0.5, 0.5]), 2)


def test_instance_hinge():
    term = instance_hinge(np.array([2.0, 0.5, -0.5, 0.5]), np.array([1.0, 1.0, -1.0, -1.0]))
    # margins: 0, 0.5, 0.5, 1.5
    assert term.value == pytest.approx(2.5 / 4)
    assert term.grad.tolist() == pytest.approx([0.0, -0.25, 0.25, 0.25])


def test_instance_hinge_kink_subgradient_is_zero():
    term = instance_hinge(np.array([1.0, -1.0]), np.array([1.0, -1.0]))
    assert term.value == 0.0
    assert term.grad.tolist() == [0.0, 0.0]


def test_instance_hinge_empty_and_mismatch():
    assert instance_hinge(np.zeros(0), np.zeros(0)).value == 0.0
    with pytest.raises(ShapeError):
        instance_hinge(np.zeros(2), np.zeros(3))


def test_branch_instance_loss_averages_branches():
    scores = np.array([0.0, 0.0, 0.0, 2.0])
    targets = np.array([1.0, -1.0, -1.0, -1.0])
    term = branch_instance_loss(scores, targets, [2, 0, 2])
    # branch 0 mean 1.0, branch 2 mean (1 + 3) / 2
    assert term.value == pytest.approx((1.0 + 2.0) / 2)
    assert term.grad.tolist() == pytest.approx([-0.25, 0.25, 0.25, 0.25])
    assert branch_instance_loss(np.zeros(0), np.zeros(0), []).value == 0.0


def test_queue_fifo_eviction():
    queue = MemoryQueue(capacity=256)
    for i in range(1, 301):
        v = np.zeros(4)
        v[i % 4] = 1.0
        queue_push(queue, v, i)
    keys, labels = queue.snapshot()
    assert len(queue) == 256
    assert keys.shape == (256, 4)
    assert labels[0] == 45
    assert labels[-1] == 300
    assert labels.tolist() == list(range(45, 301))


def test_queue_rejects_non_unit():
    queue = MemoryQueue(capacity=4)
    with pytest.raises(QueueError):
        queue.push(np.array([1.0, 1.0]), 0)
    with pytest.raises(QueueError):
        MemoryQueue(capacity=0)
    assert len(queue) == 0


def test_queue_snapshot_is_detached():
    queue = MemoryQueue(capacity=4)
    z = np.array([1.0, 0.0])
    queue.push(z, 0)
    z[0] = 5.0
    keys, _ = queue.snapshot()
    assert keys.tolist() == [[1.0, 0.0]]
    queue.clear()
    assert len(queue) == 0
    assert queue.snapshot()[0].shape == (0, 0)


def test_contrastive_matches_oracle():
    rng = np.random.default_rng(0)
    labels = [0, 1, 2, 1, 0, 1, 2, 2]
    queue = _filled_queue(rng, 6, labels)
    z = _unit(rng, 6)
    keys, _ = queue.snapshot()
    term = contrastive_loss(z, 1, queue, tau=0.1)
    assert term.n_positive == 3
    assert not term.skipped
    assert term.value == pytest.approx(_oracle(z, keys, labels, 1, 0.1, [1.0] * 8), rel=1e-10)


def test_contrastive_weighted_matches_oracle():
    rng = np.random.default_rng(1)
    labels = [0, 1, 2, 1, 0, 3, 2]
    queue = _filled_queue(rng, 6, labels)
    z = _unit(rng, 6)
    keys, _ = queue.snapshot()
    pairs = ExpertPairSet(pairs=frozenset({(1, 2), (3, 1)}), gamma=2.5, n_classes=4)
    weights = [1.0, 1.0, 2.5, 1.0, 1.0, 2.5, 2.5]
    assert pairs.weights(1, np.array(labels)).tolist() == weights
    term = contrastive_loss(z, 1, queue, tau=0.2, weighting=pairs)
    assert term.value == pytest.approx(_oracle(z, keys, labels, 1, 0.2, weights), rel=1e-10)


def test_contrastive_matches_oracle_on_random_instances():
    rng = np.random.default_rng(6)
    n_skipped = 0
    for _ in range(1000):
        n_classes = int(rng.integers(2, 5))
        dim = int(rng.integers(2, 9))
        labels = [int(v) for v in rng.integers(0, n_classes, size=int(rng.integers(1, 9)))]
        queue = _filled_queue(rng, dim, labels, capacity=8)
        keys, _ = queue.snapshot()
        z = _unit(rng, dim)
        label = int(rng.integers(n_classes))
        tau = float(rng.uniform(0.05, 1.0))
        all_pairs = [(a, b) for a in range(n_classes) for b in range(a + 1, n_classes)]
        chosen = frozenset(p for p in all_pairs if rng.random() < 0.5)
        pairs = ExpertPairSet(pairs=chosen, gamma=float(rng.uniform(1.0, 4.0)), n_classes=n_classes)
        weights = [pairs.gamma if tuple(sorted((label, l))) in chosen else 1.0 for l in labels]

        term = contrastive_loss(z, label, queue, tau, weighting=pairs)
        if label not in labels:
            n_skipped += 1
            assert term.skipped
            assert term.value == 0.0
            assert not term.grad.any()
            continue
        assert not term.skipped
        assert term.n_positive == labels.count(label)
        assert term.value == pytest.approx(_oracle(z, keys, labels, label, tau, weights), rel=1e-9, abs=1e-9)
    assert n_skipped > 0


def test_contrastive_gamma_one_is_unweighted():
    rng = np.random.default_rng(7)
    for _ in range(100):
        labels = [int(v) for v in rng.integers(0, 4, size=8)]
        queue = _filled_queue(rng, 6, labels, capacity=8)
        z = _unit(rng, 6)
        label = labels[0]
        pairs = ExpertPairSet(pairs=frozenset({(0, 1), (1, 2), (2, 3)}), gamma=1.0, n_classes=4)
        weighted = contrastive_loss(z, label, queue, 0.1, weighting=pairs)
        plain = contrastive_loss(z, label, queue, 0.1)
        assert weighted.value == plain.value
        assert np.array_equal(weighted.grad, plain.grad)


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    labels = [0, 1, 2, 1, 0, 1]
    queue = _filled_queue(rng, 5, labels)
    keys, _ = queue.snapshot()
    z = _unit(rng, 5)
    weights = [1.0, 1.0, 3.0, 1.0, 1.0, 1.0]
    pairs = ExpertPairSet(pairs=frozenset({(1, 2)}), gamma=3.0)
    term = contrastive_loss(z, 1, queue, tau=0.3, weighting=pairs)
    h = 1e-6
    numeric = np.array([
        (_oracle(z + h * e, keys, labels, 1, 0.3, weights)
         - _oracle(z - h * e, keys, labels, 1, 0.3, weights)) / (2 * h)
        for e in np.eye(5)
    ])
    assert np.allclose(term.grad, numeric, atol=1e-6)


def test_contrastive_large_logits_are_stable():
    queue = MemoryQueue(capacity=4)
    queue.push(np.array([1.0, 0.0]), 0)
    queue.push(np.array([0.0, 1.0]), 1)
    term = contrastive_loss(np.array([1.0, 0.0]), 0, queue, tau=1e-3)
    assert np.isfinite(term.value)
    assert term.value == pytest.approx(0.0, abs=1e-12)


def test_contrastive_skips_without_positives():
    rng = np.random.default_rng(3)
    z = _unit(rng, 4)
    empty = contrastive_loss(z, 0, MemoryQueue(capacity=4), tau=0.1)
    assert empty.skipped and empty.value == 0.0
    no_positive = contrastive_loss(z, 0, _filled_queue(rng, 4, [1, 2]), tau=0.1)
    assert no_positive.skipped
    assert no_positive.grad.tolist() == [0.0] * 4


def test_contrastive_rejects_non_unit_anchor():
    rng = np.random.default_rng(4)
    with pytest.raises(QueueError):
        contrastive_loss(2.0 * _unit(rng, 4), 0, _filled_queue(rng, 4, [0]), tau=0.1)


def test_expert_weight_increases_loss():
    rng = np.random.default_rng(5)
    labels = [0, 1, 1, 0, 2]
    queue = _filled_queue(rng, 4, labels)
    z = _unit(rng, 4)
    values = [
        contrastive_loss(z, 0, queue, 0.1, ExpertPairSet(pairs=frozenset({(0, 1)}), gamma=g)).value
        for g in (1.0, 2.0, 4.0)
    ]
    assert values[0] == pytest.approx(contrastive_loss(z, 0, queue, 0.1).value)
    assert values[0] < values[1] < values[2]


def test_expert_pair_validation():
    with pytest.raises(ConfigError):
        ExpertPairSet(pairs=frozenset({(1, 1)}))
    with pytest.raises(ConfigError):
        ExpertPairSet(pairs=frozenset({(0, 7)}), n_classes=7)
    with pytest.raises(ConfigError):
        ExpertPairSet(gamma=0.5)
    pairs = ExpertPairSet(pairs=frozenset({(4, 3)}), gamma=2.0)
    assert pairs.pairs == frozenset({(3, 4)})
    assert pairs.with_gamma(3.0).gamma == 3.0


def test_default_expert_pairs_seven_class():
    pairs = default_expert_pairs(SEVEN_CLASS_NAMES, gamma=2.0)
    assert len(pairs.pairs) == len(DEFAULT_EXPERT_PAIRS) == 6
    index = {name: i for i, name in enumerate(SEVEN_CLASS_NAMES)}
    normal, lesion = index['Normal brain'], index['Non-neoplastic brain lesions']
    assert tuple(sorted((normal, lesion))) in pairs.pairs


def test_shipped_expert_pairs_match_defaults():
    shipped = Path(egclmil.__file__).parent / 'data' / 'expert_pairs.json'
    pairs = load_expert_pairs(shipped, SEVEN_CLASS_NAMES)
    assert pairs.pairs == default_expert_pairs(SEVEN_CLASS_NAMES).pairs
    assert pairs.gamma == 2.0


def test_default_expert_pairs_drop_missing_classes():
    pairs = default_expert_pairs(('Normal brain', 'Tumor'), gamma=2.0)
    assert pairs.pairs == frozenset()


def test_resolve_expert_pairs_strict():
    with pytest.raises(ConfigError, match='Unicorn'):
        resolve_expert_pairs([('Normal brain', 'Unicorn')], SEVEN_CLASS_NAMES, 2.0)


def test_load_expert_pairs(tmp_path):
    path = tmp_path / 'pairs.json'
    path.write_text(json.dumps({'pairs': [['Normal brain', 'Ependymal tumors']], 'gamma': 3.0}))
    pairs = load_expert_pairs(path, SEVEN_CLASS_NAMES)
    assert pairs.gamma == 3.0
    assert len(pairs.pairs) == 1
    assert load_expert_pairs(path, SEVEN_CLASS_NAMES, gamma=1.5).gamma == 1.5

    path.write_text(json.dumps({'pairs': [], 'weight': 2}))
    with pytest.raises(ConfigError, match='weight'):
        load_expert_pairs(path, SEVEN_CLASS_NAMES)
    path.write_text('[')
    with pytest.raises(ConfigError):
        load_expert_pairs(path, SEVEN_CLASS_NAMES)


def test_l2_term():
    value, grads = l2_term({'a': np.array([1.0, 2.0]), 'b': np.array([[3.0]])}, alpha=0.1)
    assert value == pytest.approx(1.4)
    assert grads['a'].tolist() == pytest.approx([0.2, 0.4])
    assert grads['b'].tolist() == pytest.approx([[0.6]])


def test_total_loss_weights_terms():
    bag = LossTerm(value=1.0, grad=np.array([0.1, -0.1]))
    instance = LossTerm(value=0.5, grad=np.array([0.2, -0.2]))
    contrastive = LossTerm(value=2.0, grad=np.array([1.0, 0.0]))
    params = {'w': np.array([1.0])}
    config = LossConfig(lam=0.25, alpha=0.5, instance_weight=0.4)
    total = total_loss(bag, instance, contrastive, params, config)
    assert total.value == pytest.approx(1.0 + 0.4 * 0.5 + 0.25 * 2.0 + 0.5)
    assert total.components == pytest.approx({'bag': 1.0, 'instance': 0.5, 'contrastive': 2.0, 'l2': 0.5})
    assert total.d_inst_scores.tolist() == pytest.approx([0.08, -0.08])
    assert total.d_z.tolist() == pytest.approx([0.25, 0.0])
    assert total.param_grads['w'].tolist() == pytest.approx([1.0])


def test_total_loss_lambda_zero_drops_contrastive():
    bag = LossTerm(value=1.0, grad=np.array([0.1, -0.1]))
    contrastive = LossTerm(value=2.0, grad=np.array([1.0, 0.0]))
    total = total_loss(bag, None, contrastive, {}, LossConfig(lam=0.0, alpha=0.0))
    assert total.value == pytest.approx(1.0)
    assert total.d_z is None
    assert total.d_inst_scores is None

    skipped = LossTerm(value=0.0, grad=np.zeros(2), skipped=True)
    assert total_loss(bag, None, skipped, {}, LossConfig(lam=0.5, alpha=0.0)).d_z is None
