'''
egclmil / stain.py

Macenko stain normalization of RGB patches onto a reference stain basis
'''
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import StainError

_logger = logging.getLogger(__name__)

# =============================================================================
# Defaults
# =============================================================================
OD_EPSILON = 1.0
DEFAULT_BETA = 0.15
DEFAULT_ALPHA_PCT = 1.0
MAX_CONCENTRATION_PCT = 99.0

REFERENCE_H = (0.5626, 0.7201, 0.4062)
REFERENCE_E = (0.2159, 0.8012, 0.5581)
REFERENCE_MAX_C = (1.9705, 1.0308)


@dataclass(frozen=True, eq=False)
class RgbPatch:
    ''' 8-bit RGB image, pixels shaped (height, width, 3) '''
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if self.width * self.height < 1:
            raise StainError(f'Patch must hold at least one pixel: {self.width}x{self.height}')
        if pixels.shape != (self.height, self.width, 3):
            raise StainError(
                f'Patch pixels must be shaped ({self.height}, {self.width}, 3), got {pixels.shape}'
            )
        object.__setattr__(self, 'pixels', pixels.astype(np.uint8))

    @classmethod
    def from_array(cls, pixels) -> 'RgbPatch':
        pixels = np.asarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3:
            raise StainError(f'Expected an (H, W, 3) array, got {pixels.shape}')
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


@dataclass(frozen=True, eq=False)
class StainBasis:
    '''
    Attributes:
        stain_vectors: 2 x 3, hematoxylin row then eosin row, unit norm
        max_concentrations: robust per-stain concentration scale
    '''
    stain_vectors: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.stain_vectors, dtype=np.float64).reshape(2, 3)
        max_c = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise StainError('Stain vectors must be non-zero')
        vectors = vectors / norms[:, None]
        if np.any(vectors < -1e-12):
            raise StainError(f'Stain vectors must have nonnegative entries: {vectors.tolist()}')
        if np.linalg.matrix_rank(vectors, tol=1e-9) < 2:
            raise StainError('Stain vectors are linearly dependent (singular basis)')
        if np.any(max_c <= 0):
            raise StainError(f'Max concentrations must be positive: {max_c.tolist()}')
        object.__setattr__(self, 'stain_vectors', np.clip(vectors, 0.0, None))
        object.__setattr__(self, 'max_concentrations', max_c)

    def to_dict(self) -> dict:
        return {
            'h': self.stain_vectors[0].tolist(),
            'e': self.stain_vectors[1].tolist(),
            'max_c': self.max_concentrations.tolist(),
        }


def reference_basis() -> StainBasis:
    return StainBasis(
        stain_vectors=np.array([REFERENCE_H, REFERENCE_E]),
        max_concentrations=np.array(REFERENCE_MAX_C),
    )


def load_reference_basis(path: Optional[Path] = None) -> StainBasis:
    ''' JSON {"h": [..], "e": [..], "max_c": [..]}; None -> built-in reference '''
    if path is None:
        return reference_basis()
    try:
        with open(path, 'r') as f:
            document = json.load(f)
        return StainBasis(
            stain_vectors=np.array([document['h'], document['e']], dtype=np.float64),
            max_concentrations=np.array(document['max_c'], dtype=np.float64),
        )
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise StainError(f'Unable to load reference basis {path}: {e}') from e


# =============================================================================
# Optical density
# =============================================================================
def rgb_to_od(patch: RgbPatch) -> np.ndarray:
    '''
    N x 3 optical density, OD = -log10((I + 1) / 255), clipped at 0 so that
    white (255) maps to exactly zero absorbance.
    '''
    intensity = patch.pixels.reshape(-1, 3).astype(np.float64)
    od = -np.log10((intensity + OD_EPSILON) / 255.0)
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray, width: int, height: int) -> RgbPatch:
    ''' Inverse of rgb_to_od, rounded and clamped to 8 bits; zero OD maps to white '''
    od = np.asarray(od, dtype=np.float64)
    intensity = np.where(od <= 0.0, 255.0, 255.0 * np.power(10.0, -od) - OD_EPSILON)
    pixels = np.clip(np.rint(intensity), 0, 255).astype(np.uint8)
    return RgbPatch(width=width, height=height, pixels=pixels.reshape(height, width, 3))


# =============================================================================
# Macenko basis estimation
# =============================================================================
def _orient(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise StainError('Stain direction collapsed to zero after orientation')
    return v / norm


def estimate_stain_basis(
    od: np.ndarray,
    beta: float = DEFAULT_BETA,
    alpha_pct: float = DEFAULT_ALPHA_PCT,
) -> StainBasis:
    '''
    Macenko estimate of the H and E directions of an OD cloud.

    Pixels whose OD is <= beta in every channel are discarded; the remainder is
    projected onto its two principal directions and the alpha_pct and
    (100 - alpha_pct) percentile angles become the stain vectors.  The vector
    with the larger red-OD component is hematoxylin.

    Raises:
        StainError: fewer than 2 tissue pixels or a rank < 2 OD cloud
    '''
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    tissue = od[np.any(od > beta, axis=1)]
    if tissue.shape[0] < 2:
        raise StainError(f'Only {tissue.shape[0]} pixel(s) above OD threshold {beta}')

    eigvals, eigvecs = np.linalg.eigh(np.cov(tissue, rowvar=False))
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise StainError('Degenerate OD cloud: rank < 2, cannot separate two stains')

    plane = eigvecs[:, [2, 1]]
    for col in range(2):
        if plane[:, col].sum() < 0:
            plane[:, col] *= -1

    projected = tissue @ plane
    phi = np.arctan2(projected[:, 1], projected[:, 0])
    min_phi = np.percentile(phi, alpha_pct)
    max_phi = np.percentile(phi, 100.0 - alpha_pct)

    v1 = _orient(plane @ np.array([np.cos(min_phi), np.sin(min_phi)]))
    v2 = _orient(plane @ np.array([np.cos(max_phi), np.sin(max_phi)]))
    if v1[0] >= v2[0]:
        vectors = np.array([v1, v2])
    else:
        vectors = np.array([v2, v1])

    if np.linalg.matrix_rank(vectors, tol=1e-9) < 2:
        raise StainError('Estimated stain vectors are linearly dependent')

    concentrations = _concentrations(od, vectors)
    max_c = np.percentile(concentrations, MAX_CONCENTRATION_PCT, axis=0)
    if np.any(max_c <= 0):
        raise StainError(f'Non-positive stain concentration scale: {max_c.tolist()}')
    _logger.debug(f'Estimated stain basis H={vectors[0].round(4).tolist()} E={vectors[1].round(4).tolist()}')
    return StainBasis(stain_vectors=vectors, max_concentrations=max_c)


def estimate_slide_basis(
    patches: Sequence[RgbPatch],
    beta: float = DEFAULT_BETA,
    alpha_pct: float = DEFAULT_ALPHA_PCT,
) -> StainBasis:
    ''' Pooled mode: one basis from the OD samples of all of a slide's patches '''
    if not patches:
        raise StainError('No patches supplied for slide-level basis estimation')
    od = np.concatenate([rgb_to_od(p) for p in patches], axis=0)
    return estimate_stain_basis(od, beta=beta, alpha_pct=alpha_pct)


def _concentrations(od: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    ''' N x 2 least-squares stain concentrations, clipped at 0 '''
    solution, _, rank, _ = np.linalg.lstsq(vectors.T, od.T, rcond=None)
    if rank < 2:
        raise StainError('Singular stain basis in concentration solve')
    return np.clip(solution.T, 0.0, None)


def normalize_patch(patch: RgbPatch, basis: StainBasis, reference: StainBasis) -> RgbPatch:
    '''
    Map a patch from its own stain basis onto the reference basis.
    Concentrations are rescaled by reference.max_c / basis.max_c.
    '''
    od = rgb_to_od(patch)
    concentrations = _concentrations(od, basis.stain_vectors)
    concentrations *= reference.max_concentrations / basis.max_concentrations
    return od_to_rgb(concentrations @ reference.stain_vectors, patch.width, patch.height)


def synthesize_patch(concentrations: np.ndarray, basis: StainBasis, width: int, height: int) -> RgbPatch:
    ''' RGB patch from N x 2 stain concentrations through a basis '''
    return od_to_rgb(np.asarray(concentrations, dtype=np.float64) @ basis.stain_vectors, width, height)


# =============================================================================
# PPM I/O
# =============================================================================
def read_patch(path: Path) -> RgbPatch:
    ''' Binary PPM (P6) or any RGB image Pillow can open '''
    try:
        with Image.open(path) as image:
            pixels = np.array(image.convert('RGB'), dtype=np.uint8)
    except OSError as e:
        raise StainError(f'Unable to read patch {path}: {e}') from e
    return RgbPatch.from_array(pixels)


def write_patch(patch: RgbPatch, path: Path) -> None:
    ''' Binary PPM (P6) '''
    try:
        Image.fromarray(patch.pixels).save(path, format='PPM')
    except OSError as e:
        raise StainError(f'Unable to write patch {path}: {e}') from e
