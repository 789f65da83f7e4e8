'''
egclmil / model.py

Trainable slide-level heads over patch embeddings

    ClamHead     multi-branch gated-attention CLAM
    MeanMilHead  mean pooling followed by a linear or 2-layer MLP classifier

Forward passes return a cache; backward passes take the cache and the
TotalLoss produced by losses.total_loss() and return one gradient per
trainable tensor.
'''
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grad
from .errors import BagFormatError, ConfigError, ShapeError
from .losses import TotalLoss

_logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CKPT'
CHECKPOINT_VERSION = 1


# =============================================================================
# Parameter containers
# =============================================================================
class _TensorSet:
    ''' Dataclass mixin exposing every field as a name -> array mapping '''

    def tensors(self) -> Dict[str, np.ndarray]:
        ''' Allocated tensors only; optional fields left as None are skipped '''
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]):
        required = {f.name for f in fields(cls) if f.default is not None}
        missing = required - set(tensors)
        if missing:
            raise ShapeError(f'{cls.__name__}: missing tensors {sorted(missing)}')
        return cls(**{
            f.name: np.asarray(tensors[f.name], dtype=np.float64)
            for f in fields(cls) if f.name in tensors
        })


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# =============================================================================
# CLAM
# =============================================================================
@dataclass(frozen=True)
class ClamConfig:
    in_dim: int = 1536
    proj_dim: int = 512
    attn_hidden: int = 256
    n_classes: int = 2
    gated: bool = True
    k_instance: int = 8

    def __post_init__(self):
        errors = [
            f'{name} must be >= 1: {getattr(self, name)}'
            for name in ('in_dim', 'proj_dim', 'attn_hidden', 'n_classes', 'k_instance')
            if getattr(self, name) < 1
        ]
        if errors:
            raise ConfigError(' - '.join(errors))


@dataclass
class ClamParams(_TensorSet):
    '''
    Attributes:
        W_proj, b_proj: patch projection (d x in_dim, d)
        V, b_V: tanh attention branch (attn_hidden x d, attn_hidden)
        w_c: per-class attention scorer (C x attn_hidden)
        W_head, b_head: per-class bag classifier (C x d, C)
        W_inst: per-class binary instance classifiers, weights then bias (C x (d + 1))
        U, b_U: sigmoid gate branch (attn_hidden x d, attn_hidden), None when ungated
    '''
    W_proj: np.ndarray
    b_proj: np.ndarray
    V: np.ndarray
    b_V: np.ndarray
    w_c: np.ndarray
    W_head: np.ndarray
    b_head: np.ndarray
    W_inst: np.ndarray
    U: Optional[np.ndarray] = None
    b_U: Optional[np.ndarray] = None


def init_clam_params(config: ClamConfig, rng: np.random.Generator) -> ClamParams:
    ''' Uniform in +-1/sqrt(fan_in) per layer; the gate branch only when gated '''
    d, m, C = config.proj_dim, config.attn_hidden, config.n_classes
    W_proj = _uniform(rng, (d, config.in_dim), config.in_dim)
    b_proj = _uniform(rng, (d,), config.in_dim)
    V = _uniform(rng, (m, d), d)
    b_V = _uniform(rng, (m,), d)
    gate = {}
    if config.gated:
        gate = {'U': _uniform(rng, (m, d), d), 'b_U': _uniform(rng, (m,), d)}
    return ClamParams(
        W_proj=W_proj,
        b_proj=b_proj,
        V=V,
        b_V=b_V,
        **gate,
        w_c=_uniform(rng, (C, m), m),
        W_head=_uniform(rng, (C, d), d),
        b_head=_uniform(rng, (C,), d),
        W_inst=_uniform(rng, (C, d + 1), d),
    )


@dataclass
class ForwardCache:
    '''
    Intermediates of one CLAM forward pass.

    H: P x d projected patches; A: P x C attention (columns sum to 1);
    R: C x d class-specific bag features; probs: softmax of logits;
    z: l2-normalized R[label] when a label was supplied.
    '''
    X: np.ndarray
    H: np.ndarray
    T: np.ndarray
    G: Optional[np.ndarray]
    gate: np.ndarray
    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    z: Optional[np.ndarray] = None
    label: Optional[int] = None


def _check_features(features, in_dim: int) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f'Bag features must be P x D with P >= 1, got {X.shape}')
    if X.shape[1] != in_dim:
        raise ShapeError(f'Bag feature dim {X.shape[1]} does not match model in_dim {in_dim}')
    return X


def clam_forward(
    features: np.ndarray,
    params: ClamParams,
    config: ClamConfig,
    label: Optional[int] = None,
    embed: bool = True,
) -> ForwardCache:
    '''
    Args:
        label: ground-truth class; selects the branch that z is taken from
        embed: compute z (skipped when no contrastive term consumes it)
    '''
    X = _check_features(features, config.in_dim)

    H = grad.add(grad.matmul(X, params.W_proj.T), params.b_proj)
    T = grad.tanh(grad.add(grad.matmul(H, params.V.T), params.b_V))
    G = None
    gate = T
    if config.gated:
        if params.U is None:
            raise ShapeError('Gated attention needs the U, b_U gate tensors')
        G = grad.sigmoid(grad.add(grad.matmul(H, params.U.T), params.b_U))
        gate = grad.hadamard(T, G)
    S = grad.matmul(gate, params.w_c.T)

    # softmax over patches, one column per class
    A = grad.row_softmax(S.T).T
    R = grad.matmul(A.T, H)
    logits = grad.hadamard(params.W_head, R).sum(axis=1) + params.b_head
    probs = grad.row_softmax(logits.reshape(1, -1))[0]

    z = None
    if label is not None:
        if not 0 <= label < config.n_classes:
            raise ShapeError(f'Label {label} outside 0..{config.n_classes - 1}')
        if embed:
            z = grad.l2_normalize_row(R[label])

    return ForwardCache(
        X=X, H=H, T=T, G=G, gate=gate, S=S, A=A, R=R,
        logits=logits, probs=probs, z=z, label=label,
    )


# =============================================================================
# Instance-level supervision
# =============================================================================
@dataclass(frozen=True)
class InstanceSelection:
    ''' Patches picked in one class branch with their +1/-1 targets '''
    branch: int
    indices: np.ndarray
    targets: np.ndarray


def instance_targets(cache: ForwardCache, label: int, k: int) -> List[InstanceSelection]:
    '''
    Top-k / bottom-k attention patches of the ground-truth branch get +1 / -1;
    the top-k patches of every other branch get -1.  With fewer than 2k patches
    k falls back to floor(P / 2); a single patch yields no selection.
    Ties rank the lower patch index first.
    '''
    P = cache.A.shape[0]
    k_eff = min(k, P // 2)
    if k_eff < 1:
        return []

    selections = []
    for branch in range(cache.A.shape[1]):
        order = np.argsort(-cache.A[:, branch], kind='stable')
        top = order[:k_eff]
        if branch == label:
            bottom = order[P - k_eff:]
            indices = np.concatenate([top, bottom])
            targets = np.concatenate([np.ones(k_eff), -np.ones(k_eff)])
        else:
            indices = top
            targets = -np.ones(k_eff)
        selections.append(InstanceSelection(branch=branch, indices=indices, targets=targets))
    return selections


def instance_scores(cache: ForwardCache, params: ClamParams,
                    selections: Sequence[InstanceSelection]) -> np.ndarray:
    ''' Instance classifier outputs of every selected patch, concatenated in selection order '''
    d = cache.H.shape[1]
    chunks = [
        cache.H[sel.indices] @ params.W_inst[sel.branch, :d] + params.W_inst[sel.branch, d]
        for sel in selections
    ]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def _instance_backward(cache: ForwardCache, params: ClamParams,
                       selections: Sequence[InstanceSelection],
                       d_scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = cache.H.shape[1]
    dH = np.zeros_like(cache.H)
    dW_inst = np.zeros_like(params.W_inst)
    offset = 0
    for sel in selections:
        g = d_scores[offset:offset + len(sel.indices)]
        offset += len(sel.indices)
        dW_inst[sel.branch, :d] += g @ cache.H[sel.indices]
        dW_inst[sel.branch, d] += g.sum()
        np.add.at(dH, sel.indices, np.outer(g, params.W_inst[sel.branch, :d]))
    return dH, dW_inst


def clam_backward(
    cache: ForwardCache,
    params: ClamParams,
    config: ClamConfig,
    total: TotalLoss,
    selections: Sequence[InstanceSelection] = (),
) -> Dict[str, np.ndarray]:
    '''
    Gradients of the composite loss w.r.t. every ClamParams tensor, chaining
    through the heads, the l2 normalization of z, the aggregation, the
    attention softmax and the projection.
    '''
    C, d = cache.R.shape
    grads = {name: np.zeros_like(value) for name, value in params.tensors().items()}

    d_logits = total.d_logits if total.d_logits is not None else np.zeros(C)
    dW_head, dR = grad.hadamard_backward(
        np.repeat(d_logits.reshape(-1, 1), d, axis=1), params.W_head, cache.R
    )
    grads['W_head'] = dW_head
    grads['b_head'] = d_logits.copy()

    if total.d_z is not None and cache.z is not None:
        dR[cache.label] += grad.l2_normalize_row_backward(total.d_z, cache.R[cache.label], cache.z)

    dA_T, dH = grad.matmul_backward(dR, cache.A.T, cache.H)
    dS = grad.row_softmax_backward(dA_T, cache.A.T).T

    d_gate, dw_c_T = grad.matmul_backward(dS, cache.gate, params.w_c.T)
    grads['w_c'] = dw_c_T.T

    if config.gated:
        dT, dG = grad.hadamard_backward(d_gate, cache.T, cache.G)
        d_pre_G = grad.sigmoid_backward(dG, cache.G)
        d_pre_G, grads['b_U'] = grad.add_backward(d_pre_G, params.b_U.shape)
        dH_U, dU_T = grad.matmul_backward(d_pre_G, cache.H, params.U.T)
        grads['U'] = dU_T.T
        dH = dH + dH_U
    else:
        dT = d_gate

    d_pre_T = grad.tanh_backward(dT, cache.T)
    d_pre_T, grads['b_V'] = grad.add_backward(d_pre_T, params.b_V.shape)
    dH_V, dV_T = grad.matmul_backward(d_pre_T, cache.H, params.V.T)
    grads['V'] = dV_T.T
    dH = dH + dH_V

    if total.d_inst_scores is not None and len(selections):
        dH_inst, dW_inst = _instance_backward(cache, params, selections, total.d_inst_scores)
        dH = dH + dH_inst
        grads['W_inst'] = dW_inst

    dH, grads['b_proj'] = grad.add_backward(dH, params.b_proj.shape)
    _, dW_proj_T = grad.matmul_backward(dH, cache.X, params.W_proj.T)
    grads['W_proj'] = dW_proj_T.T

    for name, g in total.param_grads.items():
        grads[name] = grads[name] + g
    return grads


# =============================================================================
# MeanMIL baselines
# =============================================================================
@dataclass(frozen=True)
class MeanMilConfig:
    in_dim: int = 1536
    n_classes: int = 2
    variant: str = 'linear'
    hidden: int = 256

    def __post_init__(self):
        errors = [
            f'{name} must be >= 1: {getattr(self, name)}'
            for name in ('in_dim', 'n_classes', 'hidden')
            if getattr(self, name) < 1
        ]
        if self.variant not in ('linear', 'mlp'):
            errors.append(f'variant must be linear or mlp: {self.variant!r}')
        if errors:
            raise ConfigError(' - '.join(errors))


@dataclass
class LinearHeadParams(_TensorSet):
    W: np.ndarray
    b: np.ndarray


@dataclass
class MlpHeadParams(_TensorSet):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


def init_meanmil_params(config: MeanMilConfig, rng: np.random.Generator):
    if config.variant == 'linear':
        return LinearHeadParams(
            W=_uniform(rng, (config.n_classes, config.in_dim), config.in_dim),
            b=_uniform(rng, (config.n_classes,), config.in_dim),
        )
    return MlpHeadParams(
        W1=_uniform(rng, (config.hidden, config.in_dim), config.in_dim),
        b1=_uniform(rng, (config.hidden,), config.in_dim),
        W2=_uniform(rng, (config.n_classes, config.hidden), config.hidden),
        b2=_uniform(rng, (config.n_classes,), config.hidden),
    )


@dataclass
class MeanMilCache:
    X: np.ndarray
    pooled: np.ndarray
    pre: Optional[np.ndarray]
    hidden: Optional[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    z: Optional[np.ndarray] = None
    label: Optional[int] = None

    @property
    def representation(self) -> np.ndarray:
        ''' pooled features (linear) or hidden activations (mlp) '''
        return self.pooled if self.hidden is None else self.hidden


def meanmil_forward(features: np.ndarray, params, config: MeanMilConfig,
                    label: Optional[int] = None, embed: bool = True) -> MeanMilCache:
    X = _check_features(features, config.in_dim)
    pooled = X.mean(axis=0)
    row = pooled.reshape(1, -1)
    pre = hidden = None
    if config.variant == 'linear':
        logits = grad.add(grad.matmul(row, params.W.T), params.b)[0]
    else:
        pre = grad.add(grad.matmul(row, params.W1.T), params.b1)
        hidden = grad.relu(pre)
        logits = grad.add(grad.matmul(hidden, params.W2.T), params.b2)[0]
    probs = grad.row_softmax(logits.reshape(1, -1))[0]
    cache = MeanMilCache(X=X, pooled=pooled, pre=pre, hidden=hidden, logits=logits, probs=probs)
    if label is not None:
        cache.label = label
        if embed:
            cache.z = grad.l2_normalize_row(cache.representation.ravel())
    return cache


def meanmil_backward(cache: MeanMilCache, params, config: MeanMilConfig,
                     total: TotalLoss) -> Dict[str, np.ndarray]:
    grads = {name: np.zeros_like(value) for name, value in params.tensors().items()}
    C = cache.logits.shape[0]
    d_logits = (total.d_logits if total.d_logits is not None else np.zeros(C)).reshape(1, -1)
    row = cache.pooled.reshape(1, -1)

    if config.variant == 'linear':
        d_logits, grads['b'] = grad.add_backward(d_logits, params.b.shape)
        _, dW_T = grad.matmul_backward(d_logits, row, params.W.T)
        grads['W'] = dW_T.T
        # z is the normalized input mean: no trainable tensor upstream of it
    else:
        d_logits, grads['b2'] = grad.add_backward(d_logits, params.b2.shape)
        d_hidden, dW2_T = grad.matmul_backward(d_logits, cache.hidden, params.W2.T)
        grads['W2'] = dW2_T.T
        if total.d_z is not None and cache.z is not None:
            hidden = cache.hidden.ravel()
            d_hidden = d_hidden + grad.l2_normalize_row_backward(total.d_z, hidden, cache.z).reshape(1, -1)
        d_pre = grad.relu_backward(d_hidden, cache.pre)
        d_pre, grads['b1'] = grad.add_backward(d_pre, params.b1.shape)
        _, dW1_T = grad.matmul_backward(d_pre, row, params.W1.T)
        grads['W1'] = dW1_T.T

    for name, g in total.param_grads.items():
        grads[name] = grads[name] + g
    return grads


# =============================================================================
# Head wrappers used by training
# =============================================================================
class ClamHead:
    kind = 'clam'

    def __init__(self, config: ClamConfig, params: ClamParams):
        self.config = config
        self.params = params

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def forward(self, features, label: Optional[int] = None, embed: bool = True) -> ForwardCache:
        return clam_forward(features, self.params, self.config, label, embed)

    def select_instances(self, cache: ForwardCache, label: int) -> List[InstanceSelection]:
        return instance_targets(cache, label, self.config.k_instance)

    def instance_scores(self, cache, selections) -> np.ndarray:
        return instance_scores(cache, self.params, selections)

    def backward(self, cache, total: TotalLoss, selections=()) -> Dict[str, np.ndarray]:
        return clam_backward(cache, self.params, self.config, total, selections)

    def config_dict(self) -> dict:
        return asdict(self.config)


class MeanMilHead:

    def __init__(self, config: MeanMilConfig, params):
        self.config = config
        self.params = params
        self.kind = f'meanmil_{config.variant}'

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def forward(self, features, label: Optional[int] = None, embed: bool = True) -> MeanMilCache:
        return meanmil_forward(features, self.params, self.config, label, embed)

    def select_instances(self, cache, label: int) -> List[InstanceSelection]:
        return []

    def instance_scores(self, cache, selections) -> np.ndarray:
        return np.zeros(0)

    def backward(self, cache, total: TotalLoss, selections=()) -> Dict[str, np.ndarray]:
        return meanmil_backward(cache, self.params, self.config, total)

    def config_dict(self) -> dict:
        return asdict(self.config)


def build_head(kind: str, in_dim: int, n_classes: int, model_config, rng: np.random.Generator):
    '''
    New head with freshly initialized parameters.

    Args:
        kind: clam, meanmil_linear or meanmil_mlp
        model_config: config.ModelConfig supplying the layer sizes
    '''
    if kind == 'clam':
        cfg = ClamConfig(
            in_dim=in_dim,
            proj_dim=model_config.proj_dim,
            attn_hidden=model_config.attn_hidden,
            n_classes=n_classes,
            gated=model_config.gated,
            k_instance=model_config.k_instance,
        )
        return ClamHead(cfg, init_clam_params(cfg, rng))
    if kind in ('meanmil_linear', 'meanmil_mlp'):
        cfg = MeanMilConfig(
            in_dim=in_dim,
            n_classes=n_classes,
            variant=kind.split('_', 1)[1],
            hidden=model_config.mlp_hidden,
        )
        return MeanMilHead(cfg, init_meanmil_params(cfg, rng))
    raise ConfigError(f'Unknown model kind: {kind!r}')


def _head_from_parts(kind: str, config: dict, tensors: Dict[str, np.ndarray]):
    if kind == 'clam':
        return ClamHead(ClamConfig(**config), ClamParams.from_tensors(tensors))
    if kind in ('meanmil_linear', 'meanmil_mlp'):
        cfg = MeanMilConfig(**config)
        cls = LinearHeadParams if cfg.variant == 'linear' else MlpHeadParams
        return MeanMilHead(cfg, cls.from_tensors(tensors))
    raise BagFormatError(f'Checkpoint holds unknown model kind {kind!r}')


# =============================================================================
# Checkpoints
# =============================================================================
def save_checkpoint(head, class_names: Sequence[str], path: Path) -> None:
    '''
    CKPT | u16 version | u32 len + JSON header | u16 n_sections
    | per section: u16 len + name | u32 rows | u32 cols | rows x cols float64 LE
    '''
    header = json.dumps(
        {'kind': head.kind, 'config': head.config_dict(), 'class_names': list(class_names)},
        sort_keys=True,
    ).encode('utf-8')
    tensors = head.params.tensors()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack('<H', CHECKPOINT_VERSION),
        struct.pack('<I', len(header)),
        header,
        struct.pack('<H', len(tensors)),
    ]
    for name, value in tensors.items():
        matrix = np.atleast_2d(value)
        raw = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(raw)) + raw)
        chunks.append(struct.pack('<II', matrix.shape[0], matrix.shape[1]))
        chunks.append(np.ascontiguousarray(matrix, dtype='<f8').tobytes())
    try:
        with open(path, 'wb') as f:
            f.write(b''.join(chunks))
    except OSError as e:
        raise BagFormatError(f'Unable to write checkpoint {path}: {e}') from e


def load_checkpoint(path: Path):
    ''' Returns (head, class_names) '''
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise BagFormatError(f'Unable to read checkpoint {path}: {e}') from e

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise BagFormatError(f'{path}: truncated checkpoint')
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise BagFormatError(f'{path}: bad magic, not a checkpoint')
    (version,) = struct.unpack('<H', take(2))
    if version != CHECKPOINT_VERSION:
        raise BagFormatError(f'{path}: unsupported checkpoint version {version}')
    (header_len,) = struct.unpack('<I', take(4))
    try:
        header = json.loads(take(header_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BagFormatError(f'{path}: unreadable checkpoint header: {e}') from e
    (n_sections,) = struct.unpack('<H', take(2))

    tensors = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack('<H', take(2))
        name = take(name_len).decode('utf-8')
        rows, cols = struct.unpack('<II', take(8))
        values = np.frombuffer(take(rows * cols * 8), dtype='<f8').reshape(rows, cols)
        tensors[name] = values.astype(np.float64)
    if pos != len(data):
        raise BagFormatError(f'{path}: {len(data) - pos} trailing bytes after last section')

    try:
        expected = _expected_shapes(header['kind'], header['config'])
    except (KeyError, TypeError) as e:
        raise BagFormatError(f'{path}: malformed checkpoint header: {e}') from e
    shaped = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise BagFormatError(f'{path}: missing tensor {name}')
        if tensors[name].size != int(np.prod(shape)):
            raise BagFormatError(f'{path}: tensor {name} holds {tensors[name].size} values, expected {shape}')
        # vectors were stored as 1 x n
        shaped[name] = tensors[name].reshape(shape)

    head = _head_from_parts(header['kind'], header['config'], shaped)
    _logger.debug(f'Loaded checkpoint {path}: kind={header["kind"]}')
    return head, tuple(header['class_names'])


def _expected_shapes(kind: str, config: dict) -> Dict[str, Tuple[int, ...]]:
    if kind == 'clam':
        cfg = ClamConfig(**config)
        d, m, C = cfg.proj_dim, cfg.attn_hidden, cfg.n_classes
        shapes = {
            'W_proj': (d, cfg.in_dim), 'b_proj': (d,),
            'V': (m, d), 'b_V': (m,),
            'w_c': (C, m), 'W_head': (C, d), 'b_head': (C,), 'W_inst': (C, d + 1),
        }
        if cfg.gated:
            shapes.update({'U': (m, d), 'b_U': (m,)})
        return shapes
    if kind in ('meanmil_linear', 'meanmil_mlp'):
        cfg = MeanMilConfig(**config)
        if cfg.variant == 'linear':
            return {'W': (cfg.n_classes, cfg.in_dim), 'b': (cfg.n_classes,)}
        return {
            'W1': (cfg.hidden, cfg.in_dim), 'b1': (cfg.hidden,),
            'W2': (cfg.n_classes, cfg.hidden), 'b2': (cfg.n_classes,),
        }
    raise BagFormatError(f'Checkpoint holds unknown model kind {kind!r}')
