"""Benchmark of single-layer sequence models on next-slot CSI prediction.

The package pairs a from-scratch multi-head self-attention layer and a
bilinear-discretized state-space layer with a seedable tapped-delay-line
channel simulator, trains each layer to predict the next OFDM slot's
channel grid, and sweeps train/test conditions (cell type, user speed,
SNR, carrier frequency) into machine-readable MSE/FLOPS reports.
"""

__version__ = "0.1.0"

from . import attention, channel, numkit, ssm, sweep, task, trainer
from .attention import MsaParams, msa_flops, msa_forward, msa_init
from .channel import (
    CsiGrid,
    ScenarioConfig,
    TapSet,
    add_awgn,
    gen_slot,
    load_grid,
    make_taps,
    max_doppler,
    save_grid,
)
from .numkit import (
    AdamState,
    FlopMeter,
    GradTape,
    Tensor,
    adam_step,
    backward,
    grad_check,
    matmul,
    softmax_rows,
)
from .ssm import (
    SsmDiscrete,
    SsmKernel,
    SsmParams,
    bilinear_discretize,
    ssm_conv,
    ssm_discretize,
    ssm_flops,
    ssm_forward,
    ssm_init,
    ssm_kernel,
    ssm_predict,
    ssm_scan,
)
from .sweep import EvalRow, SweepSpec, parse_report_csv, run_sweep, trend_check
from .task import (
    DatasetSpec,
    SeqSample,
    build_dataset,
    build_samples,
    grid_to_sequence,
    make_pair,
    sequence_to_grid,
)
from .trainer import (
    RunRecord,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    mse,
    train,
)
