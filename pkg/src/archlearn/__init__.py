"""Learning layer widths and depth with binary gates, then shrinking the net."""

from .arch_learn import (DivergenceError, MetricsRecord, RegConfig, TrainConfig, Trainer,
                         complexity_norm, current_architecture, prepare_gates, suggest_lambdas,
                         train)
from .core_math import SeededRng, jacobi_svd, matmul, svd_truncate
from .data_io import Dataset, load_checkpoint, load_mnist_idx, save_checkpoint, synth_blobs
from .layers import Conv2d, Dense, Gate, MaxPool, Network, forward, init_network, predict
from .surgery import (ArchReport, SurgeryPlan, collapse_depth, compress_svd, param_count,
                      prune_widths, run_surgery)

__version__ = "0.1.0"
