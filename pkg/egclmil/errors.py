'''
egclmil / errors
'''

class egclmilError(Exception):
    ''' Generic egclmilError exception class '''
    pass

class ConfigError(egclmilError):
    ''' Run configuration load or validation failure '''
    pass

class UsageError(egclmilError):
    ''' Invalid egclmil usage '''
    pass

class BagFormatError(egclmilError):
    ''' Bag, manifest or checkpoint file cannot be read or written '''
    pass

class SchemaError(egclmilError):
    ''' Task schema cannot be applied to the cohort '''
    pass

class StainError(egclmilError):
    ''' Stain basis estimation or normalization failure '''
    pass

class ShapeError(egclmilError):
    ''' Operand dimensions do not agree '''
    pass

class DegenerateEmbedding(egclmilError):
    ''' Zero vector handed to l2 normalization '''
    def __init__(self, where: str = 'embedding'):
        super().__init__(f'Cannot l2-normalize a zero vector ({where})')

class QueueError(egclmilError):
    ''' Contrastive anchor or queue entry is not a unit vector '''
    pass

class SplitError(egclmilError):
    ''' Cross-validation plan cannot be built or leaks patients '''
    pass

class FoldDiverged(egclmilError):
    ''' Non-finite loss during training; the fold is aborted '''
    def __init__(self, fold: int, step: int, lam: float, lr: float, detail: str = ''):
        self.fold = fold
        self.step = step
        self.lam = lam
        self.lr = lr
        super().__init__(
            f'Fold {fold} diverged at step {step} (lambda={lam}, lr={lr}) {detail}'.strip()
        )
