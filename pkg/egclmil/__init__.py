'''
egclmil / __init__
'''
from importlib.metadata import version, PackageNotFoundError
try:
    __version__ = version('egclmil')
except PackageNotFoundError:
    __version__ = 'embedded'

import json
import logging
import os

_LOG_ENV = 'EGCLMIL_LOG'
_LOG_LEVELS = {'info': logging.INFO, 'debug': logging.DEBUG}
_pkg_logger = logging.getLogger(__name__)


class JsonLineFormatter(logging.Formatter):
    '''
    One JSON object per record.  Fields passed with extra={'event': {...}}
    are merged into the object so training curves can be parsed back.
    '''
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            'level': record.levelname.lower(),
            'logger': record.name,
            'msg': record.getMessage(),
        }
        event = getattr(record, 'event', None)
        if isinstance(event, dict):
            payload.update(event)
        if record.exc_info:
            payload['exc'] = self.formatException(record.exc_info)
        return json.dumps(payload, sort_keys=True, default=str)


def enable_logging(level: str = 'info') -> None:
    '''
    Attach the line-delimited JSON handler to the package logger.
    Calling it again only adjusts the level.
    '''
    _pkg_logger.setLevel(_LOG_LEVELS.get(str(level).lower(), logging.INFO))
    if any(getattr(h, '_egclmil', False) for h in _pkg_logger.handlers):
        return
    handler = logging.StreamHandler()
    handler.setFormatter(JsonLineFormatter())
    handler._egclmil = True
    _pkg_logger.addHandler(handler)
    _pkg_logger.propagate = False


# Configure logging if EGCLMIL_LOG is set
if os.environ.get(_LOG_ENV):
    enable_logging(os.environ[_LOG_ENV])

# Expose egclmil errors in base namespace
from .errors import *

from .config import RunConfig, load_config
from .bagdata import (
    EmbeddingBag,
    CohortManifest,
    TaskSchema,
    SyntheticSpec,
    read_bag,
    write_bag,
    remap_labels,
    generate_synthetic_cohort,
)
from .losses import MemoryQueue, ExpertPairSet
from .train import SplitPlan, stratified_patient_kfold, run_cv, lambda_sweep
