'''
egclmil / train.py

Patient-stratified cross-validation, the optimization loop, patient-level
voting and the lambda sweep driver.
'''
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .bagdata import EmbeddingBag, TaskCohort, TaskSlide
from .config import RunConfig, save_config, with_loss, with_train
from .errors import DegenerateEmbedding, FoldDiverged, SplitError, egclmilError
from .losses import (
    ExpertPairSet,
    LossTerm,
    MemoryQueue,
    TotalLoss,
    bag_ce,
    branch_instance_loss,
    contrastive_loss,
    default_expert_pairs,
    load_expert_pairs,
    total_loss,
)
from .metrics import aggregate_folds, confidence_summary, geometry, metric_bundle
from .model import build_head, save_checkpoint

_logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    'lambda', 'mode', 'repeats',
    'mean_macro_recall', 'std_macro_recall', 'mean_macro_f1', 'std_macro_f1', 'is_best',
)


# =============================================================================
# Splitting
# =============================================================================
@dataclass(frozen=True)
class FoldSplit:
    index: int
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]

    def partition_of(self, patient_id: str) -> Optional[str]:
        for name in ('train', 'val', 'test'):
            if patient_id in getattr(self, name):
                return name
        return None


@dataclass(frozen=True)
class SplitPlan:
    '''
    Patient-level train/val/test assignment for every fold.

    Attributes:
        warnings: folds/classes whose val or test representation could not be
            repaired without emptying the class from train
    '''
    n_folds: int
    seed: int
    fractions: Tuple[float, float, float]
    folds: Tuple[FoldSplit, ...]
    warnings: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            'n_folds': self.n_folds,
            'seed': self.seed,
            'fractions': list(self.fractions),
            'warnings': list(self.warnings),
            'folds': [
                {'fold': f.index, 'train': list(f.train), 'val': list(f.val), 'test': list(f.test)}
                for f in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, document: dict) -> 'SplitPlan':
        try:
            return cls(
                n_folds=int(document['n_folds']),
                seed=int(document['seed']),
                fractions=tuple(float(v) for v in document['fractions']),
                folds=tuple(
                    FoldSplit(
                        index=int(f['fold']),
                        train=tuple(f['train']),
                        val=tuple(f['val']),
                        test=tuple(f['test']),
                    )
                    for f in document['folds']
                ),
                warnings=tuple(document.get('warnings', ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SplitError(f'Malformed split plan: {e}') from e


def save_plan(plan: SplitPlan, path: Path) -> None:
    with open(path, 'w') as f:
        json.dump(plan.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')


def load_plan(path: Path) -> SplitPlan:
    try:
        with open(path, 'r') as f:
            return SplitPlan.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise SplitError(f'Unable to read split plan {path}: {e}') from e


def _majority(labels: Sequence[int]) -> int:
    ''' Modal label, ties to the lowest index '''
    counts = Counter(labels)
    best = max(counts.values())
    return min(label for label, n in counts.items() if n == best)


def patient_labels(cohort: TaskCohort) -> Dict[str, int]:
    ''' Patient class = majority of its slide labels '''
    by_patient: Dict[str, List[int]] = {}
    for slide in cohort.slides:
        by_patient.setdefault(slide.entry.patient_id, []).append(slide.label)
    return {pid: _majority(labels) for pid, labels in sorted(by_patient.items())}


def stratified_patient_kfold(
    cohort: TaskCohort,
    n_folds: int = 10,
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
) -> SplitPlan:
    '''
    Deal patients to folds by class.

    Within each class the patients are shuffled with the seeded generator and
    dealt round-robin with one counter running across classes.  A patient at
    position i has slot r = i mod k; fold f tests slot f and validates slots
    f+1 .. f+n_val (mod k), n_val = round(val_fraction * k).  A repair pass then
    moves one train patient into any fold/class missing val or test, when that
    class has a train patient left.  A gap that cannot be filled is reported in
    SplitPlan.warnings.

    Raises:
        SplitError: empty cohort or a class without patients
    '''
    if not cohort.slides:
        raise SplitError('Cannot split an empty cohort')
    labels = patient_labels(cohort)
    by_class: Dict[int, List[str]] = {c: [] for c in range(cohort.n_classes)}
    for pid, label in labels.items():
        by_class[label].append(pid)
    empty = [cohort.class_names[c] for c, pids in by_class.items() if not pids]
    if empty:
        raise SplitError(f'Class(es) without patients under task {cohort.task}: {", ".join(empty)}')

    k = n_folds
    n_val = max(1, int(round(fractions[1] * k)))
    n_val = min(n_val, k - 2) if k >= 3 else 0

    rng = np.random.default_rng(seed)
    position: Dict[str, int] = {}
    dealt: Dict[int, List[str]] = {}
    counter = 0
    for c in range(cohort.n_classes):
        order = [by_class[c][i] for i in rng.permutation(len(by_class[c]))]
        dealt[c] = order
        for pid in order:
            position[pid] = counter % k
            counter += 1

    folds, warnings = [], []
    for f in range(k):
        val_slots = {(f + 1 + j) % k for j in range(n_val)}
        parts = {'train': [], 'val': [], 'test': []}
        for c in range(cohort.n_classes):
            for pid in dealt[c]:
                r = position[pid]
                name = 'test' if r == f else 'val' if r in val_slots else 'train'
                parts[name].append(pid)

        for name in ('test', 'val'):
            for c in range(cohort.n_classes):
                if any(labels[p] == c for p in parts[name]):
                    continue
                candidates = [p for p in dealt[c] if p in parts['train']]
                if candidates:
                    moved = candidates[0]
                    parts['train'].remove(moved)
                    parts[name].append(moved)
                    _logger.debug(f'Fold {f}: moved {moved} to {name} for class {c}')
                else:
                    warnings.append(
                        f'fold {f}: class {cohort.class_names[c]!r} has no {name} patient '
                        f'({len(dealt[c])} patient(s) available)'
                    )

        folds.append(FoldSplit(
            index=f,
            train=tuple(sorted(parts['train'])),
            val=tuple(sorted(parts['val'])),
            test=tuple(sorted(parts['test'])),
        ))

    plan = SplitPlan(
        n_folds=k, seed=seed, fractions=tuple(fractions),
        folds=tuple(folds), warnings=tuple(warnings),
    )
    check_plan(plan, cohort)
    for message in warnings:
        _logger.warning(f'Split representation infeasible: {message}')
    return plan


def check_plan(plan: SplitPlan, cohort: TaskCohort) -> None:
    ''' Every patient in exactly one partition of every fold '''
    patients = set(patient_labels(cohort))
    for fold in plan.folds:
        train, val, test = set(fold.train), set(fold.val), set(fold.test)
        overlap = (train & val) | (train & test) | (val & test)
        if overlap:
            raise SplitError(f'Fold {fold.index}: patient leakage {sorted(overlap)}')
        missing = patients - (train | val | test)
        if missing:
            raise SplitError(f'Fold {fold.index}: unassigned patients {sorted(missing)}')


# =============================================================================
# Optimizer
# =============================================================================
class Adam:
    ''' Adam with bias correction, updating parameter arrays in place '''

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, value in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(value))
            v = self._v.setdefault(name, np.zeros_like(value))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# =============================================================================
# One optimization step
# =============================================================================
@dataclass
class StepOutcome:
    total: TotalLoss
    grads: Dict[str, np.ndarray]
    cache: object
    selections: list
    contrastive: Optional[LossTerm] = None


def step_objective(
    head,
    features: np.ndarray,
    label: int,
    loss_config,
    queue: Optional[MemoryQueue] = None,
    pairs: Optional[ExpertPairSet] = None,
    selections=None,
) -> StepOutcome:
    '''
    Forward, every loss term and backward for one bag.

    Args:
        selections: fixed instance selection; None selects from the forward pass
    '''
    embed = queue is not None and loss_config.contrastive_active
    cache = head.forward(features, label, embed=embed)
    if selections is None:
        selections = head.select_instances(cache, label)

    instance = None
    if selections and loss_config.instance_weight > 0:
        scores = head.instance_scores(cache, selections)
        targets = np.concatenate([s.targets for s in selections])
        instance = branch_instance_loss(scores, targets, [len(s.indices) for s in selections])

    contrastive = None
    if embed:
        weighting = pairs if loss_config.mode == 'egcl' else None
        contrastive = contrastive_loss(cache.z, label, queue, loss_config.tau, weighting)

    total = total_loss(
        bag_ce(cache.probs, label), instance, contrastive, head.params.tensors(), loss_config
    )
    grads = head.backward(cache, total, selections)
    return StepOutcome(
        total=total, grads=grads, cache=cache, selections=selections, contrastive=contrastive
    )


# =============================================================================
# Predictions
# =============================================================================
@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    patient_id: str
    label: int
    predicted: int
    probs: Tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            'slide_id': self.slide_id,
            'patient_id': self.patient_id,
            'label': self.label,
            'predicted': self.predicted,
            'probs': list(self.probs),
        }


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    label: int
    predicted: int
    n_slides: int

    def to_dict(self) -> dict:
        return {
            'patient_id': self.patient_id,
            'label': self.label,
            'predicted': self.predicted,
            'n_slides': self.n_slides,
        }


def majority_vote_patient(predictions: Sequence[SlidePrediction]) -> List[PatientPrediction]:
    '''
    Modal slide prediction per patient.  Ties go to the tied class with the
    highest mean predicted probability, then to the lowest class index.
    '''
    grouped: Dict[str, List[SlidePrediction]] = {}
    for p in predictions:
        grouped.setdefault(p.patient_id, []).append(p)

    result = []
    for pid in sorted(grouped):
        slides = grouped[pid]
        counts = Counter(s.predicted for s in slides)
        best = max(counts.values())
        tied = sorted(c for c, n in counts.items() if n == best)
        if len(tied) > 1:
            mean_probs = np.mean([s.probs for s in slides], axis=0)
            top = max(mean_probs[c] for c in tied)
            tied = [c for c in tied if mean_probs[c] == top]
        result.append(PatientPrediction(
            patient_id=pid,
            label=_majority([s.label for s in slides]),
            predicted=tied[0],
            n_slides=len(slides),
        ))
    return result


def evaluate_slides(head, slides: Sequence[TaskSlide],
                    bags: Dict[str, EmbeddingBag]) -> Tuple[List[SlidePrediction], np.ndarray, float]:
    '''
    Predict every slide.  Returns (predictions, z embeddings taken on the
    true-label branch, mean bag cross-entropy).
    '''
    predictions, embeddings, losses = [], [], []
    for slide in slides:
        bag = bags[slide.entry.slide_id]
        try:
            cache = head.forward(bag.features, slide.label)
            embeddings.append(cache.z)
        except DegenerateEmbedding:
            cache = head.forward(bag.features)
        losses.append(bag_ce(cache.probs, slide.label).value)
        predictions.append(SlidePrediction(
            slide_id=slide.entry.slide_id,
            patient_id=slide.entry.patient_id,
            label=slide.label,
            predicted=int(np.argmax(cache.probs)),
            probs=tuple(float(p) for p in cache.probs),
        ))
    z = np.stack(embeddings) if embeddings else np.zeros((0, 0))
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return predictions, z, mean_loss


def _macro_f1(predictions: Sequence[SlidePrediction], n_classes: int) -> float:
    return metric_bundle(
        [p.label for p in predictions], [p.predicted for p in predictions], n_classes
    )['macro_f1']


# =============================================================================
# Fold training
# =============================================================================
@dataclass
class FoldResult:
    '''
    Outcome of one fold.  to_dict() is deterministic (no timings) so reruns
    can be compared byte for byte.
    '''
    fold: int
    class_names: Tuple[str, ...]
    best_epoch: int
    epochs_run: int
    slide_predictions: List[SlidePrediction]
    patient_predictions: List[PatientPrediction]
    slide_metrics: dict
    patient_metrics: dict
    curve: List[dict]
    geometry: dict
    confidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'fold': self.fold,
            'class_names': list(self.class_names),
            'best_epoch': self.best_epoch,
            'epochs_run': self.epochs_run,
            'slide_predictions': [p.to_dict() for p in self.slide_predictions],
            'patient_predictions': [p.to_dict() for p in self.patient_predictions],
            'slide_metrics': self.slide_metrics,
            'patient_metrics': self.patient_metrics,
            'curve': self.curve,
            'geometry': self.geometry,
            'confidence': {str(c): v for c, v in self.confidence.items()},
        }


def slides_of(cohort: TaskCohort, patients: Sequence[str]) -> List[TaskSlide]:
    wanted = set(patients)
    return [s for s in cohort.slides if s.entry.patient_id in wanted]


def _all_finite(grads: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def build_test_result(head, fold_index: int, cohort: TaskCohort, slides: Sequence[TaskSlide],
                      bags: Dict[str, EmbeddingBag], best_epoch: int = 0,
                      epochs_run: int = 0, curve: Sequence[dict] = ()) -> FoldResult:
    ''' Evaluate a trained head on the test slides of a fold '''
    C = cohort.n_classes
    predictions, z, _ = evaluate_slides(head, slides, bags)
    patients = majority_vote_patient(predictions)
    z_labels = [p.label for p in predictions][:len(z)]
    probs = np.array([p.probs for p in predictions]) if predictions else np.zeros((0, C))
    return FoldResult(
        fold=fold_index,
        class_names=cohort.class_names,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        slide_predictions=predictions,
        patient_predictions=patients,
        slide_metrics=metric_bundle(
            [p.label for p in predictions], [p.predicted for p in predictions], C
        ),
        patient_metrics=metric_bundle(
            [p.label for p in patients], [p.predicted for p in patients], C
        ),
        curve=list(curve),
        geometry=geometry(z, z_labels).to_dict(),
        confidence=confidence_summary(probs, [p.label for p in predictions]),
    )


def resolve_pairs(config: RunConfig, class_names: Sequence[str]) -> Optional[ExpertPairSet]:
    ''' Expert pairs for egcl runs; gamma always comes from loss.gamma '''
    if config.loss.mode != 'egcl':
        return None
    if config.expert_pairs:
        return load_expert_pairs(Path(config.expert_pairs), class_names, gamma=config.loss.gamma)
    return default_expert_pairs(class_names, gamma=config.loss.gamma)


def train_fold(
    fold: FoldSplit,
    cohort: TaskCohort,
    bags: Dict[str, EmbeddingBag],
    config: RunConfig,
    pairs: Optional[ExpertPairSet] = None,
) -> Tuple[FoldResult, object]:
    '''
    Train one fold with a batch of one bag per step and return the result on
    the test partition together with the restored best-validation head.

    Raises:
        FoldDiverged: the loss or a gradient became non-finite
        SplitError: the fold has no training slides
    '''
    tc, lc = config.train, config.loss
    train_slides = slides_of(cohort, fold.train)
    val_slides = slides_of(cohort, fold.val)
    test_slides = slides_of(cohort, fold.test)
    if not train_slides:
        raise SplitError(f'Fold {fold.index} has no training slides')

    rng = np.random.default_rng([tc.seed, fold.index])
    in_dim = bags[train_slides[0].entry.slide_id].dim
    head = build_head(config.model.kind, in_dim, cohort.n_classes, config.model, rng)
    optimizer = Adam(tc.lr, tc.beta1, tc.beta2, tc.eps)
    queue = MemoryQueue(lc.queue_capacity) if lc.contrastive_active else None
    if pairs is None:
        pairs = resolve_pairs(config, cohort.class_names)

    use_val = tc.early_stopping and bool(val_slides)
    if tc.early_stopping and not val_slides:
        _logger.warning(f'Fold {fold.index}: no validation slides, training for the full budget')

    best_score, best_epoch, best_params = -np.inf, 0, head.params.copy()
    stale, step, curve = 0, 0, []
    epochs_run = 0
    for epoch in range(tc.epochs):
        epochs_run = epoch + 1
        step_losses, step_predictions = [], []
        for i in rng.permutation(len(train_slides)):
            slide = train_slides[i]
            features = bags[slide.entry.slide_id].features
            outcome = step_objective(head, features, slide.label, lc, queue, pairs)
            step += 1
            if not np.isfinite(outcome.total.value) or not _all_finite(outcome.grads):
                raise FoldDiverged(
                    fold.index, step, lc.lam, tc.lr,
                    detail=f'components={outcome.total.components}',
                )
            if queue is not None:
                queue.push(outcome.cache.z, slide.label)
            optimizer.step(head.params.tensors(), outcome.grads)

            step_losses.append(outcome.total.value)
            step_predictions.append(SlidePrediction(
                slide_id=slide.entry.slide_id,
                patient_id=slide.entry.patient_id,
                label=slide.label,
                predicted=int(np.argmax(outcome.cache.probs)),
                probs=(),
            ))
            _logger.debug('step', extra={'event': {
                'fold': fold.index, 'epoch': epoch, 'step': step,
                'loss': outcome.total.value, **outcome.total.components,
                'queue_fill': len(queue) if queue is not None else 0,
            }})

        val_predictions, _, val_loss = evaluate_slides(head, val_slides, bags)
        val_f1 = _macro_f1(val_predictions, cohort.n_classes) if val_predictions else 0.0
        row = {
            'epoch': epoch,
            'train_loss': float(np.mean(step_losses)),
            'train_macro_f1': _macro_f1(step_predictions, cohort.n_classes),
            'val_loss': val_loss,
            'val_macro_f1': val_f1,
            'queue_fill': len(queue) if queue is not None else 0,
        }
        curve.append(row)
        _logger.info('epoch', extra={'event': {'fold': fold.index, 'lambda': lc.lam, **row}})

        if not use_val:
            best_epoch, best_params = epoch, head.params.copy()
            continue
        if val_f1 > best_score:
            best_score, best_epoch, best_params = val_f1, epoch, head.params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                _logger.info(f'Fold {fold.index}: early stop at epoch {epoch}, best epoch {best_epoch}')
                break

    head.params = best_params
    result = build_test_result(
        head, fold.index, cohort, test_slides, bags,
        best_epoch=best_epoch, epochs_run=epochs_run, curve=curve,
    )
    return result, head


def write_fold_outputs(fold_dir: Path, result: FoldResult, head) -> None:
    ''' fold_<k>/{result.json, checkpoint.bin, curve.csv} '''
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    with open(fold_dir / 'result.json', 'w') as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    save_checkpoint(head, result.class_names, fold_dir / 'checkpoint.bin')
    pd.DataFrame(result.curve).to_csv(fold_dir / 'curve.csv', index=False)


# =============================================================================
# Cross-validation
# =============================================================================
@dataclass
class CvReport:
    folds: List[FoldResult]
    aggregate: dict
    failed_folds: List[dict] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed_folds)


def _fold_job(fold, cohort, bags, config, run_dir):
    ''' Worker entry: train one fold and write its directory '''
    try:
        result, head = train_fold(fold, cohort, bags, config)
    except FoldDiverged as e:
        _logger.warning(f'Fold aborted: {e}')
        return None, {'fold': e.fold, 'step': e.step, 'lambda': e.lam, 'lr': e.lr, 'error': str(e)}
    except egclmilError as e:
        _logger.warning(f'Fold {fold.index} failed: {e}')
        return None, {
            'fold': fold.index, 'step': None, 'lambda': config.loss.lam,
            'lr': config.train.lr, 'error': f'{type(e).__name__}: {e}',
        }
    if run_dir is not None:
        write_fold_outputs(Path(run_dir) / f'fold_{fold.index}', result, head)
    return result, None


def run_cv(
    cohort: TaskCohort,
    bags: Dict[str, EmbeddingBag],
    config: RunConfig,
    plan: Optional[SplitPlan] = None,
    run_dir: Optional[Path] = None,
) -> CvReport:
    '''
    Train and test every fold.  A fold that diverges or raises a package
    error is recorded in failed_folds and the remaining folds still run; the
    aggregate is then partial.
    '''
    if plan is None:
        plan = stratified_patient_kfold(
            cohort, config.train.n_folds, config.train.fractions, config.train.seed
        )
    check_plan(plan, cohort)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / 'config.json')
        save_plan(plan, run_dir / 'splits.json')

    args = [(fold, cohort, bags, config, run_dir) for fold in plan.folds]
    if config.train.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.train.jobs) as pool:
            outcomes = list(pool.map(_fold_job, *zip(*args)))
    else:
        outcomes = [_fold_job(*a) for a in args]

    results = [r for r, _ in outcomes if r is not None]
    failed = [f for _, f in outcomes if f is not None]
    documents = [r.to_dict() for r in results]
    aggregate = aggregate_folds(documents, cohort.n_classes)
    aggregate['partial'] = bool(failed)
    aggregate['failed_folds'] = failed

    if run_dir is not None:
        with open(run_dir / 'aggregate.json', 'w') as f:
            json.dump(aggregate, f, indent=2, sort_keys=True)
            f.write('\n')
    _logger.info('cv complete', extra={'event': {
        'folds': len(results), 'failed': len(failed),
        'macro_f1': aggregate['slide']['macro_f1']['mean'],
    }})
    return CvReport(folds=results, aggregate=aggregate, failed_folds=failed)


# =============================================================================
# Lambda sweep
# =============================================================================
@dataclass
class SweepReport:
    rows: List[dict]
    runs: Dict[Tuple[str, float, int], CvReport] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(SWEEP_COLUMNS))


def _mark_best(rows: List[dict]) -> None:
    ''' is_best per mode: highest mean macro recall, ties to the smallest lambda '''
    for mode in sorted({r['mode'] for r in rows}):
        candidates = [r for r in rows if r['mode'] == mode]
        best = min(candidates, key=lambda r: (-r['mean_macro_recall'], r['lambda']))
        for r in candidates:
            r['is_best'] = r is best


def lambda_sweep(
    cohort: TaskCohort,
    bags: Dict[str, EmbeddingBag],
    config: RunConfig,
    grid: Sequence[float],
    modes: Sequence[str] = ('cl',),
    repeats: int = 1,
    run_dir: Optional[Path] = None,
) -> SweepReport:
    '''
    Full cross-validation per (mode, lambda, repeat).  Repeat r uses seed
    train.seed + r for splitting, initialization and shuffling.  Each row
    pools the per-fold test metrics of all repeats.
    '''
    if not grid:
        raise SplitError('lambda_sweep needs a nonempty grid')
    rows, runs = [], {}
    for mode in modes:
        for lam in grid:
            recalls, f1s = [], []
            for r in range(repeats):
                seed = config.train.seed + r
                run_config = with_train(with_loss(config, lam=float(lam), mode=mode), seed=seed)
                sub_dir = None
                if run_dir is not None:
                    sub_dir = Path(run_dir) / f'{mode}_lambda{float(lam):g}_seed{seed}'
                report = run_cv(cohort, bags, run_config, run_dir=sub_dir)
                runs[(mode, float(lam), seed)] = report
                recalls.extend(f.slide_metrics['macro_recall'] for f in report.folds)
                f1s.extend(f.slide_metrics['macro_f1'] for f in report.folds)
            rows.append({
                'lambda': float(lam),
                'mode': mode,
                'repeats': repeats,
                'mean_macro_recall': float(np.mean(recalls)) if recalls else 0.0,
                'std_macro_recall': float(np.std(recalls)) if recalls else 0.0,
                'mean_macro_f1': float(np.mean(f1s)) if f1s else 0.0,
                'std_macro_f1': float(np.std(f1s)) if f1s else 0.0,
                'is_best': False,
            })
    _mark_best(rows)

    report = SweepReport(rows=rows, runs=runs)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        report.to_frame().to_csv(Path(run_dir) / 'sweep.csv', index=False)
    return report
