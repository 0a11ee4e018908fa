from .layers import Dense, LeakyReLU, Mlp, MlpSpec, Module, ResidualBlock, flat_parameters, set_flat_parameters
from .optim import (
    EarlyStopping,
    OptimizerState,
    PlateauScheduler,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    adamw_init,
    adamw_step,
    run_training_loop,
)
from .tensor import Tape, Tensor, backward, concat, grads_for


def forward(model, x):
    """Run ``model`` on ``x`` while recording; returns ``(output, tape)``."""
    with Tape() as tape:
        out = model(x)
    return out, tape
