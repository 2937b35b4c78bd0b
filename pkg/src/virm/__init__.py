"""Invariant risk minimization with learned feature-space augmentation, on numpy."""

from .analysis import (OverlapReport, RademacherEstimate, build_augmented_pair, build_augmented_set,
                       empirical_rademacher_linear, kde_overlap, lemma2_bound, project_pca2, theorem1_bound)
from .datasets import (ColoredMnistSpec, EnvDataset, Sem2dSpec, build_colored_mnist, encode_idx,
                       gen_sem_2d, load_mnist, parse_idx)
from .diffcore import Tensor, backward, finite_diff_check
from .errors import (ConfigError, ContractError, DegenerateBatchError, DegenerateSupportError, DimensionError,
                     IdxFormatError, IdxLengthError, IdxUnsupportedTypeError, LabelIndexError, VirmError)
from .objectives import AblationMode, ModelParams, init_model, virm_total_loss, vrex_penalty
from .sda import SdaConfig, SdaParams, init_sda, sda_loss, vicinal_batch
from .trainer import AdamState, TrainReport, Trainer, VirmConfig, adam_step, leave_one_domain_out, train_run

__version__ = "0.1.0"
