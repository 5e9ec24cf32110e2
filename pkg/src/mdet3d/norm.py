"""Dataset-conditioned feature normalization with shared affine transform.

Each registered dataset keeps its own running channel mean/variance; the
learnable scale and shift are shared across datasets. A "pooled" mode
(statistics shared across datasets, i.e. plain batch norm) is kept as the
baseline this module is designed to beat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import RegistryError, StateError

POOLED_ID = -1  # pseudo-dataset used when per-dataset statistics are disabled


@dataclass
class DatasetNormState:
    """One normalization layer: shared gamma/beta, per-dataset statistics."""

    channels: int
    eps: float = 1e-5
    momentum: float = 0.01
    training: bool = True
    gamma: T.Tensor = None
    beta: T.Tensor = None
    running_mean: dict[int, np.ndarray] = field(default_factory=dict)
    running_var: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = T.Tensor(np.ones(self.channels), requires_grad=True)
        if self.beta is None:
            self.beta = T.zeros(self.channels, requires_grad=True)

    def register_dataset(self, dataset_id: int) -> None:
        self.running_mean.setdefault(dataset_id, np.zeros(self.channels))
        self.running_var.setdefault(dataset_id, np.ones(self.channels))

    def registered(self, dataset_id: int) -> bool:
        return dataset_id in self.running_mean


def dsnorm_update_running(state: DatasetNormState, dataset_id: int, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
    """EMA update of the dataset's running statistics (train mode only)."""
    if not state.training:
        raise StateError("running statistics update requires train mode")
    if not state.registered(dataset_id):
        raise RegistryError(f"dataset {dataset_id} not registered with this norm layer")
    m = state.momentum
    state.running_mean[dataset_id] = (1.0 - m) * state.running_mean[dataset_id] + m * batch_mean
    state.running_var[dataset_id] = (1.0 - m) * state.running_var[dataset_id] + m * batch_var


def dsnorm_forward(x: T.Tensor, dataset_id: int, state: DatasetNormState) -> T.Tensor:
    """Normalize with the dataset's statistics, then apply shared gamma/beta.

    Train mode uses the current batch's per-channel statistics (over batch
    and spatial dims) and updates the running estimates; eval mode uses the
    stored running mean/variance.
    """
    if not state.registered(dataset_id):
        raise RegistryError(f"dataset {dataset_id} not registered with this norm layer")
    if state.training:
        xhat, mean, var = T.normalize_channels(x, state.eps)
        n = x.data.size // x.shape[-3]
        unbiased = var * (n / max(n - 1, 1))
        dsnorm_update_running(state, dataset_id, mean, unbiased)
    else:
        mean = state.running_mean[dataset_id]
        var = state.running_var[dataset_id]
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = T.affine_channels(x, inv, -mean * inv)
    return T.channel_affine(xhat, state.gamma, state.beta)
