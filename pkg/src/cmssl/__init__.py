"""Multi-modal contrastive self-supervised pre-training at desk scale."""

from .config import ExperimentConfig, load_config
from .contrastive import ContrastiveConfig, ViewRecord, batch_loss, build_positive_index, collapse_metrics
from .downstream import evaluate, finetune, fuse
from .encoders import EncoderBundle, EncoderSpec, ModalitySpec, embed, encode
from .errors import (CmsslError, ConfigError, ContractError, DatasetLoadError, DegenerateInputError,
                     DimensionError, FormatError, NumericError)
from .estimators import ContrastivePretrainer, FusionClassifier
from .grid import run_grid
from .trainer import OptimizerConfig, pretrain
from .views import AugmentationConfig, SynthSpec, generate_synthetic, load_raw_dataset, make_views

__version__ = "0.1.0"
