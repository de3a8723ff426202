"""
fcnn: fully convolutional crowd segmentation on ``numpy``.
"""
from . import log
from . import netspec
from ._exceptions import (
    CheckpointError, ConfigError, DataError, EvaluationError, FcnnError,
    NumericalError, ShapeError, SpecError,
)
from ._state import is_deterministic, set_deterministic
from ._tensor import ConvParams
from ._network import Network, build_network, fc_as_conv, init_network
from ._checkpoint import load_checkpoint, save_checkpoint
from ._training import (
    LossLog, Sample, TrainConfig, layerwise_pretrain, train_branch,
)
from ._fusion import (
    CUES, MultiBranchNetwork, build_decision_fusion, build_feature_fusion,
    build_input_fusion, load_fusion, multistage_train, save_fusion,
)
from ._scenedata import (
    Clip, SceneConfig, build_dataset, generate_clip, load_clip,
    load_manifest,
)
from ._evalbench import (
    RocCurve, benchmark, evaluate, patch_scan, roc_auc, upsample_prediction,
)
from ._workers import open_worker_pool, run_in_workers
from .netspec import DEFAULT_SPEC, parse_spec, receptive_field


__all__ = [
    'CUES',
    'DEFAULT_SPEC',
    'CheckpointError',
    'Clip',
    'ConfigError',
    'ConvParams',
    'DataError',
    'EvaluationError',
    'FcnnError',
    'LossLog',
    'MultiBranchNetwork',
    'NumericalError',
    'Network',
    'RocCurve',
    'Sample',
    'SceneConfig',
    'ShapeError',
    'SpecError',
    'TrainConfig',
    'benchmark',
    'build_dataset',
    'build_decision_fusion',
    'build_feature_fusion',
    'build_input_fusion',
    'build_network',
    'evaluate',
    'fc_as_conv',
    'generate_clip',
    'init_network',
    'is_deterministic',
    'layerwise_pretrain',
    'load_checkpoint',
    'load_clip',
    'load_fusion',
    'load_manifest',
    'log',
    'multistage_train',
    'netspec',
    'open_worker_pool',
    'parse_spec',
    'patch_scan',
    'receptive_field',
    'roc_auc',
    'run_in_workers',
    'save_checkpoint',
    'save_fusion',
    'set_deterministic',
    'train_branch',
    'upsample_prediction',
]
