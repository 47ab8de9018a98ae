"""Multi-expert evidential classification with gated uncertainty fusion.

Library layers, bottom up: ``autodiff`` (tape-based reverse mode over dense
float64 arrays) and ``special`` (log-gamma family); ``evidential``
(Dirichlet evidence and the annealed loss); ``expert`` (attention-MIL
classifiers, MC-dropout and ensembling); ``gate`` (learned fusion and the
naive average); ``simdata`` (synthetic multi-rater trials); ``metrics``
(weighted F1, calibration, stratification); ``pipeline``/``cli`` (the
reproducible experiment harness).
"""

from .autodiff import Tape, Tensor, grad_check
from .data import FeatureBag
from .errors import (ConfigError, DomainError, EmptyInputError, EvigateError,
                     ShapeError, StateError)
from .evidential import (EdlLossConfig, EvidentialOutput,
                         annealing_coefficient, edl_loss,
                         evidential_from_logits, kl_dirichlet_vs_uniform)
from .expert import (ExpertModel, TrainConfig, abmil_pool, ensemble_predict,
                     forward, init_expert, mc_dropout_predict, predict_bags,
                     train_expert)
from .gate import (FusedOutput, GateLossConfig, GateModel, gate_forward,
                   gate_loss, gate_predict, init_gate, naive_fuse, train_gate)
from .metrics import (ReliabilityBin, StratificationRow, ece, fit_thresholds,
                      reliability_diagram, stratify, weighted_f1)
from .simdata import (GeneratorConfig, RaterProfile, generate_dataset,
                      generate_video, rate, trial_label)

__version__ = "0.1.0"
