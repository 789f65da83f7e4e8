'''
egclmil / metrics.py

Classification metrics, confusion matrices, embedding geometry and report
emission.  Undefined precision, recall or F1 (zero denominators) count as 0.
'''
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from .errors import ShapeError

_logger = logging.getLogger(__name__)

SUMMARY_METRICS = ('accuracy', 'macro_precision', 'macro_recall', 'macro_f1', 'weighted_f1')
REPORT_COLUMNS = ('task', 'method', 'model', 'class', 'precision', 'recall', 'f1')


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    ''' counts[t, p]: rows are true classes, columns predicted classes '''
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f'Confusion matrix must be square, got {counts.shape}')
        if np.any(counts < 0):
            raise ShapeError('Confusion matrix counts must be nonnegative')
        object.__setattr__(self, 'counts', counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        return ConfusionMatrix(self.counts + other.counts)

    def tolist(self) -> List[List[int]]:
        return self.counts.tolist()


@dataclass(frozen=True, eq=False)
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    def rows(self) -> List[dict]:
        return [
            {
                'precision': float(self.precision[c]),
                'recall': float(self.recall[c]),
                'f1': float(self.f1[c]),
                'support': int(self.support[c]),
            }
            for c in range(len(self.support))
        ]


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f'{y_true.shape[0]} true labels vs {y_pred.shape[0]} predictions')
    if y_true.size == 0:
        return ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    return ConfusionMatrix(confusion_matrix(y_true, y_pred, labels=list(range(n_classes))))


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_prf(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    precision = _safe_divide(tp, predicted)
    recall = _safe_divide(tp, support)
    f1 = _safe_divide(2.0 * precision * recall, precision + recall)
    return ClassReport(precision=precision, recall=recall, f1=f1, support=support)


def macro_avg(report: ClassReport) -> Tuple[float, float, float]:
    return (
        float(np.mean(report.precision)),
        float(np.mean(report.recall)),
        float(np.mean(report.f1)),
    )


def weighted_f1(report: ClassReport) -> float:
    total = report.support.sum()
    if total == 0:
        return 0.0
    return float(np.dot(report.f1, report.support) / total)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        return 0.0
    return float(np.trace(cm.counts) / cm.total)


def normalized(cm: ConfusionMatrix) -> np.ndarray:
    ''' Row-stochastic matrix; rows without support stay zero '''
    return _safe_divide(cm.counts, cm.counts.sum(axis=1, keepdims=True).repeat(cm.n_classes, axis=1))


def metric_bundle(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> dict:
    ''' Everything a fold reports for one prediction level (slide or patient) '''
    cm = confusion(y_true, y_pred, n_classes)
    report = per_class_prf(cm)
    precision, recall, f1 = macro_avg(report)
    return {
        'accuracy': accuracy(cm),
        'macro_precision': precision,
        'macro_recall': recall,
        'macro_f1': f1,
        'weighted_f1': weighted_f1(report),
        'per_class': report.rows(),
        'confusion': cm.tolist(),
        'top_confusions': [list(t) for t in top_confusions(cm)],
    }


def top_confusions(cm: ConfusionMatrix, k: int = 3) -> List[Tuple[int, int, int]]:
    ''' Most frequent off-diagonal (true, predicted, count) cells '''
    cells = [
        (t, p, int(cm.counts[t, p]))
        for t in range(cm.n_classes)
        for p in range(cm.n_classes)
        if t != p and cm.counts[t, p] > 0
    ]
    cells.sort(key=lambda cell: (-cell[2], cell[0], cell[1]))
    return cells[:k]


def confidence_summary(probs: np.ndarray, y_true: Sequence[int]) -> Dict[int, dict]:
    '''
    Per true class: mean max-probability of correct and of incorrect
    predictions (None when there are none).
    '''
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    summary = {}
    if probs.size == 0:
        return summary
    predicted = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    for c in range(probs.shape[1]):
        in_class = y_true == c
        correct = in_class & (predicted == c)
        wrong = in_class & (predicted != c)
        summary[c] = {
            'n_correct': int(correct.sum()),
            'n_incorrect': int(wrong.sum()),
            'correct_mean_confidence': float(confidence[correct].mean()) if correct.any() else None,
            'incorrect_mean_confidence': float(confidence[wrong].mean()) if wrong.any() else None,
        }
    return summary


# =============================================================================
# Embedding geometry
# =============================================================================
@dataclass
class GeometryReport:
    '''
    Attributes:
        compactness: class -> mean within-class pairwise cosine similarity
            (absent for classes with fewer than two embeddings)
        separation: (a, b) with a < b -> 1 - cos(centroid_a, centroid_b)
    '''
    compactness: Dict[int, float] = field(default_factory=dict)
    separation: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def mean_compactness(self) -> Optional[float]:
        if not self.compactness:
            return None
        return float(np.mean(list(self.compactness.values())))

    def to_dict(self) -> dict:
        return {
            'compactness': {str(c): v for c, v in sorted(self.compactness.items())},
            'separation': {f'{a}-{b}': v for (a, b), v in sorted(self.separation.items())},
        }

    @classmethod
    def from_dict(cls, document: dict) -> 'GeometryReport':
        return cls(
            compactness={int(c): float(v) for c, v in document.get('compactness', {}).items()},
            separation={
                tuple(int(i) for i in key.split('-')): float(v)
                for key, v in document.get('separation', {}).items()
            },
        )


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)


def geometry(z: np.ndarray, labels: Sequence[int]) -> GeometryReport:
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    report = GeometryReport()
    if z.size == 0:
        return report
    z = _unit_rows(z)

    centroids = {}
    for c in np.unique(labels):
        members = z[labels == c]
        n = members.shape[0]
        if n >= 2:
            sims = members @ members.T
            upper = sims[np.triu_indices(n, k=1)]
            report.compactness[int(c)] = float(np.clip(upper.mean(), -1.0, 1.0))
        centroid = members.mean(axis=0)
        norm = np.linalg.norm(centroid)
        if norm > 0:
            centroids[int(c)] = centroid / norm
        else:
            _logger.debug(f'Class {c}: zero centroid, no separation entries')

    keys = sorted(centroids)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            cos = float(np.clip(centroids[a] @ centroids[b], -1.0, 1.0))
            report.separation[(a, b)] = 1.0 - cos
    return report


# =============================================================================
# Aggregation and report files
# =============================================================================
def aggregate_folds(fold_documents: Sequence[dict], n_classes: int) -> dict:
    '''
    Mean and standard deviation of every summary metric across folds, at
    slide and patient level, plus pooled confusion matrices.
    '''
    aggregate = {'n_folds': len(fold_documents)}
    for level in ('slide', 'patient'):
        key = f'{level}_metrics'
        section = {}
        for metric in SUMMARY_METRICS:
            values = [doc[key][metric] for doc in fold_documents]
            section[metric] = {
                'mean': float(np.mean(values)) if values else 0.0,
                'std': float(np.std(values)) if values else 0.0,
            }
        pooled = ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
        for doc in fold_documents:
            pooled = pooled + ConfusionMatrix(np.array(doc[key]['confusion']))
        section['pooled_confusion'] = pooled.tolist()
        aggregate[level] = section
    return aggregate


def emit_report(
    fold_documents: Sequence[dict],
    out_dir: Path,
    class_names: Sequence[str],
    task: str,
    method: str,
    model: str,
) -> Dict[str, Path]:
    '''
    Write report.csv (per-class precision/recall/F1 averaged over folds plus a
    macro row), aggregate.json and one normalized confusion CSV per fold.
    '''
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = len(class_names)

    rows = []
    for c, name in enumerate(class_names):
        per_fold = [doc['slide_metrics']['per_class'][c] for doc in fold_documents]
        rows.append({
            'task': task, 'method': method, 'model': model, 'class': name,
            'precision': float(np.mean([r['precision'] for r in per_fold])) if per_fold else 0.0,
            'recall': float(np.mean([r['recall'] for r in per_fold])) if per_fold else 0.0,
            'f1': float(np.mean([r['f1'] for r in per_fold])) if per_fold else 0.0,
        })
    aggregate = aggregate_folds(fold_documents, n_classes)
    rows.append({
        'task': task, 'method': method, 'model': model, 'class': 'macro avg',
        'precision': aggregate['slide']['macro_precision']['mean'],
        'recall': aggregate['slide']['macro_recall']['mean'],
        'f1': aggregate['slide']['macro_f1']['mean'],
    })

    paths = {'report': out_dir / 'report.csv', 'aggregate': out_dir / 'aggregate.json'}
    pd.DataFrame(rows, columns=list(REPORT_COLUMNS)).to_csv(paths['report'], index=False)
    with open(paths['aggregate'], 'w') as f:
        json.dump(aggregate, f, indent=2, sort_keys=True)
        f.write('\n')

    for doc in fold_documents:
        cm = ConfusionMatrix(np.array(doc['slide_metrics']['confusion']))
        frame = pd.DataFrame(normalized(cm), index=list(class_names), columns=list(class_names))
        target = out_dir / f'fold_{doc["fold"]}_confusion_normalized.csv'
        frame.to_csv(target, float_format='%.4f', index_label='true')
        paths[f'confusion_{doc["fold"]}'] = target

    _logger.info(f'Report written to {out_dir}', extra={'event': {'folds': len(fold_documents)}})
    return paths
