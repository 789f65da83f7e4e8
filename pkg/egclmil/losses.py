'''
egclmil / losses.py

Training objectives: bag cross-entropy, instance hinge, queue-based
supervised contrastive loss (optionally expert-weighted), the L2 term and
the composite total.
'''
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, QueueError, ShapeError

_logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
UNIT_TOLERANCE = 1e-9
DEFAULT_QUEUE_CAPACITY = 256

# Clinically confusable neighbours under the 7-class schema
DEFAULT_EXPERT_PAIRS = (
    ('Normal brain', 'Non-neoplastic brain lesions'),
    ('Non-neoplastic brain lesions', 'Other low-grade glial tumors'),
    ('Non-neoplastic brain lesions', 'Non-glial brain tumors'),
    ('Other low-grade glial tumors', 'Pilocytic astrocytoma'),
    ('Pilocytic astrocytoma', 'Ependymal tumors'),
    ('Ependymal tumors', 'High-grade brain tumors'),
)


@dataclass
class LossTerm:
    '''
    One objective term.

    Attributes:
        value: scalar loss
        grad: gradient w.r.t. the term's input (logits, instance scores or z)
        skipped: contrastive term had no positive in the queue
        n_positive: queue entries sharing the anchor label
    '''
    value: float
    grad: Optional[np.ndarray] = None
    skipped: bool = False
    n_positive: int = 0


# =============================================================================
# Bag and instance terms
# =============================================================================
def bag_ce(probs: np.ndarray, label: int) -> LossTerm:
    ''' -log probs[label]; gradient w.r.t. the logits is probs - onehot '''
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[0]:
        raise ShapeError(f'bag_ce: label {label} outside 0..{probs.shape[0] - 1}')
    value = -float(np.log(max(probs[label], PROB_FLOOR)))
    grad = probs.copy()
    grad[label] -= 1.0
    return LossTerm(value=value, grad=grad)


def instance_hinge(scores: np.ndarray, targets: np.ndarray) -> LossTerm:
    ''' Mean of max(0, 1 - t * s); subgradient 0 at the kink '''
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ShapeError(f'instance_hinge: {scores.shape} scores vs {targets.shape} targets')
    if scores.size == 0:
        return LossTerm(value=0.0, grad=np.zeros(0))
    margins = 1.0 - targets * scores
    active = margins > 0
    value = float(np.where(active, margins, 0.0).mean())
    grad = np.where(active, -targets, 0.0) / scores.size
    return LossTerm(value=value, grad=grad)


def branch_instance_loss(scores: np.ndarray, targets: np.ndarray,
                         branch_sizes: Sequence[int]) -> LossTerm:
    '''
    Hinge mean per class branch, averaged over the branches that selected at
    least one patch.  `scores` and `targets` are the branch selections
    concatenated in order.
    '''
    scores = np.asarray(scores, dtype=np.float64)
    sizes = [int(n) for n in branch_sizes if n > 0]
    if not sizes:
        return LossTerm(value=0.0, grad=np.zeros_like(scores))
    grad = np.zeros_like(scores)
    total, offset = 0.0, 0
    for n in branch_sizes:
        if n == 0:
            continue
        term = instance_hinge(scores[offset:offset + n], targets[offset:offset + n])
        total += term.value
        grad[offset:offset + n] = term.grad / len(sizes)
        offset += n
    return LossTerm(value=total / len(sizes), grad=grad)


# =============================================================================
# Memory queue and expert pairs
# =============================================================================
def _check_unit(z: np.ndarray, what: str) -> None:
    norm = float(np.linalg.norm(z))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise QueueError(f'{what} must be a unit vector, |z| = {norm:.12f}')


class MemoryQueue:
    '''
    Fixed-capacity FIFO of detached (z, label) pairs.  The oldest entry is
    evicted once capacity is exceeded.
    '''

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise QueueError(f'Queue capacity must be >= 1: {capacity}')
        self.capacity = capacity
        self._entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, z: np.ndarray, label: int) -> None:
        z = np.asarray(z, dtype=np.float64).ravel()
        _check_unit(z, 'Queue entry')
        self._entries.append((z.copy(), int(label)))

    def snapshot(self) -> Tuple[np.ndarray, np.ndarray]:
        ''' (N x d embeddings, N labels), oldest first '''
        if not self._entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        embeddings = np.stack([z for z, _ in self._entries])
        labels = np.array([label for _, label in self._entries], dtype=np.int64)
        return embeddings, labels

    def clear(self) -> None:
        self._entries.clear()


def queue_push(queue: MemoryQueue, z: np.ndarray, label: int) -> MemoryQueue:
    queue.push(z, label)
    return queue


@dataclass(frozen=True)
class ExpertPairSet:
    '''
    Unordered class-index pairs whose negatives are weighted by gamma.

    Attributes:
        pairs: frozenset of (low, high) index tuples
        gamma: negative weight >= 1
        n_classes: size of the class index space the pairs refer to
    '''
    pairs: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)
    gamma: float = 2.0
    n_classes: Optional[int] = None

    def __post_init__(self):
        normalized = frozenset(tuple(sorted((int(a), int(b)))) for a, b in self.pairs)
        errors = []
        if self.gamma < 1:
            errors.append(f'gamma must be >= 1: {self.gamma}')
        for a, b in sorted(normalized):
            if a == b:
                errors.append(f'pair ({a}, {b}) pairs a class with itself')
            if a < 0 or (self.n_classes is not None and b >= self.n_classes):
                errors.append(f'pair ({a}, {b}) references an invalid class')
        if errors:
            raise ConfigError('Invalid expert pairs: ' + ' - '.join(errors))
        object.__setattr__(self, 'pairs', normalized)

    def weights(self, anchor_label: int, labels: np.ndarray) -> np.ndarray:
        ''' Per-entry denominator weights: gamma for expert-pair labels, else 1 '''
        w = np.ones(len(labels), dtype=np.float64)
        for i, label in enumerate(labels):
            if tuple(sorted((int(anchor_label), int(label)))) in self.pairs:
                w[i] = self.gamma
        return w

    def with_gamma(self, gamma: float) -> 'ExpertPairSet':
        return ExpertPairSet(pairs=self.pairs, gamma=gamma, n_classes=self.n_classes)


def resolve_expert_pairs(named_pairs, class_names: Sequence[str], gamma: float,
                         strict: bool = True) -> ExpertPairSet:
    '''
    Turn (name, name) pairs into index pairs over `class_names`.

    Args:
        strict: unknown names raise ConfigError; otherwise such pairs are dropped
    '''
    index = {name: i for i, name in enumerate(class_names)}
    pairs = set()
    for pair in named_pairs:
        if len(pair) != 2:
            raise ConfigError(f'Expert pair must name two classes: {pair!r}')
        a, b = pair
        if a not in index or b not in index:
            if strict:
                missing = [n for n in (a, b) if n not in index]
                raise ConfigError(f'Expert pair names unknown class(es): {", ".join(missing)}')
            _logger.debug(f'Dropping expert pair ({a!r}, {b!r}): not in task classes')
            continue
        pairs.add((index[a], index[b]))
    return ExpertPairSet(pairs=frozenset(pairs), gamma=gamma, n_classes=len(class_names))


def default_expert_pairs(class_names: Sequence[str], gamma: float = 2.0) -> ExpertPairSet:
    ''' Built-in confusable pairs restricted to the classes present '''
    return resolve_expert_pairs(DEFAULT_EXPERT_PAIRS, class_names, gamma, strict=False)


def load_expert_pairs(path: Path, class_names: Sequence[str],
                      gamma: Optional[float] = None) -> ExpertPairSet:
    '''
    JSON {"pairs": [["A", "B"], ...], "gamma": 2.0}.  An explicit `gamma`
    overrides the file value.
    '''
    try:
        with open(path, 'r') as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f'Unable to read expert pairs {path}: {e}') from e
    if not isinstance(document, dict) or 'pairs' not in document:
        raise ConfigError(f'Expert pairs file {path} needs a "pairs" list')
    unknown = sorted(set(document) - {'pairs', 'gamma'})
    if unknown:
        raise ConfigError(f'Unknown key(s) in expert pairs {path}: {", ".join(unknown)}')
    if gamma is None:
        gamma = float(document.get('gamma', 2.0))
    return resolve_expert_pairs(document['pairs'], class_names, gamma)


# =============================================================================
# Contrastive term
# =============================================================================
def contrastive_loss(
    z: np.ndarray,
    label: int,
    queue: MemoryQueue,
    tau: float,
    weighting: Optional[ExpertPairSet] = None,
) -> LossTerm:
    '''
    Supervised InfoNCE of the anchor against the queue.

        loss = log sum_k w_k exp(s_k / tau) - mean_{j in P} s_j / tau

    where s are cosine similarities to every queue entry, P the entries with
    the anchor's label and w_k = gamma for expert-pair negatives (1 otherwise).
    Positives stay in the denominator.  Without positives the term is skipped.

    Raises:
        QueueError: anchor is not a unit vector
    '''
    z = np.asarray(z, dtype=np.float64).ravel()
    _check_unit(z, 'Contrastive anchor')
    if len(queue) == 0:
        return LossTerm(value=0.0, grad=np.zeros_like(z), skipped=True)

    keys, labels = queue.snapshot()
    if keys.shape[1] != z.shape[0]:
        raise ShapeError(f'Anchor dim {z.shape[0]} does not match queue dim {keys.shape[1]}')
    positive = labels == label
    n_positive = int(positive.sum())
    if n_positive == 0:
        return LossTerm(value=0.0, grad=np.zeros_like(z), skipped=True)

    logits = keys @ z / tau
    if weighting is not None:
        w = weighting.weights(label, labels)
    else:
        w = np.ones(len(labels), dtype=np.float64)

    shift = logits.max()
    scaled = w * np.exp(logits - shift)
    denominator = scaled.sum()
    log_denominator = shift + np.log(denominator)
    value = float(log_denominator - logits[positive].mean())

    p = scaled / denominator
    grad = (p @ keys - keys[positive].mean(axis=0)) / tau
    return LossTerm(value=value, grad=grad, n_positive=n_positive)


# =============================================================================
# Composite
# =============================================================================
@dataclass
class TotalLoss:
    '''
    Weighted sum L_bag + w_inst L_inst + lambda L_CL + alpha |theta|^2.

    d_logits, d_inst_scores and d_z are the weighted upstream gradients for
    the model backward pass; param_grads holds the L2 contribution.
    '''
    value: float
    components: Dict[str, float]
    d_logits: Optional[np.ndarray]
    d_inst_scores: Optional[np.ndarray]
    d_z: Optional[np.ndarray]
    param_grads: Dict[str, np.ndarray]


def l2_term(params: Dict[str, np.ndarray], alpha: float) -> Tuple[float, Dict[str, np.ndarray]]:
    value = alpha * float(sum(np.sum(v * v) for v in params.values()))
    return value, {name: 2.0 * alpha * v for name, v in params.items()}


def total_loss(
    bag: LossTerm,
    instance: Optional[LossTerm],
    contrastive: Optional[LossTerm],
    params: Dict[str, np.ndarray],
    config,
) -> TotalLoss:
    '''
    Args:
        config: config.LossConfig (lam, alpha, instance_weight)
    '''
    l2_value, l2_grads = l2_term(params, config.alpha)
    components = {'bag': bag.value, 'instance': 0.0, 'contrastive': 0.0, 'l2': l2_value}
    value = bag.value + l2_value

    d_inst = None
    if instance is not None and instance.grad is not None and instance.grad.size:
        components['instance'] = instance.value
        value += config.instance_weight * instance.value
        d_inst = config.instance_weight * instance.grad

    d_z = None
    if contrastive is not None and config.lam > 0 and not contrastive.skipped:
        components['contrastive'] = contrastive.value
        value += config.lam * contrastive.value
        d_z = config.lam * contrastive.grad

    return TotalLoss(
        value=float(value),
        components=components,
        d_logits=bag.grad,
        d_inst_scores=d_inst,
        d_z=d_z,
        param_grads=l2_grads,
    )
