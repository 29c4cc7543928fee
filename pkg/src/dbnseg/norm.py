"""Batch normalisation with per-domain statistics.

:class:`DomainBatchNorm` keeps one learned ``gamma``/``beta`` pair and a
separate running mean/variance row per domain. Each training batch must come
from a single domain; its batch statistics normalise the batch and update
only that domain's running row. With one domain this is plain batch norm,
and the ``bn_*`` functions below share the exact same kernels.
"""

from __future__ import annotations

import logging
import warnings
from typing import Sequence, Union

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

MODES = ("train", "eval", "batch")


class UnseenDomainWarning(UserWarning):
    """Evaluation asked for a domain that never received a training update."""


def _resolve_domain(domain: Union[int, Sequence[int], np.ndarray], num_domains: int) -> int:
    if np.ndim(domain) > 0:
        ids = np.unique(np.asarray(domain))
        if ids.size != 1:
            raise ValueError(f"mixed-domain batch: domains {ids.tolist()} in one mini-batch")
        domain = ids[0]
    d = int(domain)
    if not 0 <= d < num_domains:
        raise ValueError(f"domain index {d} out of range for {num_domains} domain(s)")
    return d


class DomainBatchNorm:
    """Batch norm layer with shared affine parameters and per-domain statistics.

    Parameters
    ----------
    num_channels : int
    num_domains : int
        Number of statistic rows. 1 gives standard batch norm.
    epsilon : float
    momentum : float
        Running statistics follow ``running = (1 - m) * running + m * batch``.
    """

    def __init__(self, num_channels: int, num_domains: int = 1, epsilon: float = 1e-5,
                 momentum: float = 0.1, name: str = "norm"):
        if num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        if num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        self.name = name
        self.num_channels = num_channels
        self.num_domains = num_domains
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_channels, np.float32), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(num_channels, np.float32), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros((num_domains, num_channels), np.float32)
        self.running_var = np.ones((num_domains, num_channels), np.float32)
        self.updates = np.zeros(num_domains, np.int64)
        self._warned: set[int] = set()

    def forward_train(self, x: Tensor, domain) -> Tensor:
        d = _resolve_domain(domain, self.num_domains)
        out, mean, var = ops.batch_norm_train(x, self.gamma, self.beta, self.epsilon)
        m = np.float32(self.momentum)
        self.running_mean[d] = (1 - m) * self.running_mean[d] + m * mean.astype(np.float32)
        self.running_var[d] = (1 - m) * self.running_var[d] + m * var.astype(np.float32)
        self.updates[d] += 1
        return out

    def forward_batch(self, x: Tensor, domain) -> Tensor:
        """Normalise with this batch's own statistics, leaving running stats alone."""
        _resolve_domain(domain, self.num_domains)
        return ops.batch_norm_train(x, self.gamma, self.beta, self.epsilon)[0]

    def domain_stats(self, domain: int):
        """Running ``(mean, var)`` for ``domain``.

        A domain that never trained falls back to the average over trained
        domains (or the initial 0/1 statistics if none trained) and warns
        once per layer and domain.
        """
        d = _resolve_domain(domain, self.num_domains)
        if self.updates[d] > 0:
            return self.running_mean[d], self.running_var[d]
        seen = self.updates > 0
        msg = f"{self.name}: domain {d} has no running statistics; "
        if seen.any():
            mean = self.running_mean[seen].mean(axis=0)
            var = self.running_var[seen].mean(axis=0)
            msg += f"using the average of trained domains {np.flatnonzero(seen).tolist()}"
        else:
            mean, var = self.running_mean[d], self.running_var[d]
            msg += "no domain trained yet, using initial statistics"
        if d not in self._warned:
            self._warned.add(d)
            logger.warning(msg)
            warnings.warn(msg, UnseenDomainWarning, stacklevel=3)
        return mean, var

    def forward_eval(self, x: Tensor, domain) -> Tensor:
        mean, var = self.domain_stats(domain)
        return ops.batch_norm_eval(x, self.gamma, self.beta, mean, var, self.epsilon)

    def __call__(self, x: Tensor, domain, mode: str = "train") -> Tensor:
        if self.num_domains == 1 and np.ndim(domain) == 0:
            domain = 0
        if mode == "train":
            return self.forward_train(x, domain)
        if mode == "eval":
            return self.forward_eval(x, domain)
        if mode == "batch":
            return self.forward_batch(x, domain)
        raise ValueError(f"unknown norm mode {mode!r}; expected one of {MODES}")

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state(self) -> dict[str, np.ndarray]:
        return {
            f"dbn.{self.name}.mean": self.running_mean,
            f"dbn.{self.name}.var": self.running_var,
            f"dbn.{self.name}.updates": self.updates.astype(np.float32),
        }

    def load_state(self, tensors: dict) -> None:
        mean = np.asarray(tensors[f"dbn.{self.name}.mean"], np.float32)
        var = np.asarray(tensors[f"dbn.{self.name}.var"], np.float32)
        if mean.shape != self.running_mean.shape or var.shape != self.running_var.shape:
            raise ShapeError(f"{self.name}: stored stats {mean.shape} do not match layer {self.running_mean.shape}")
        self.running_mean = mean.copy()
        self.running_var = var.copy()
        key = f"dbn.{self.name}.updates"
        if key in tensors:
            self.updates = np.asarray(tensors[key]).reshape(-1).astype(np.int64)
        else:
            self.updates = np.ones(self.num_domains, np.int64)


def dbn_forward_train(layer: DomainBatchNorm, x: Tensor, domain) -> Tensor:
    return layer.forward_train(x, domain)


def dbn_forward_eval(layer: DomainBatchNorm, x: Tensor, domain) -> Tensor:
    return layer.forward_eval(x, domain)


def bn_forward_train(gamma: Tensor, beta: Tensor, epsilon: float, x: Tensor) -> Tensor:
    return ops.batch_norm_train(x, gamma, beta, epsilon)[0]


def bn_forward_eval(gamma: Tensor, beta: Tensor, epsilon: float, x: Tensor, running_mean, running_var) -> Tensor:
    return ops.batch_norm_eval(x, gamma, beta, running_mean, running_var, epsilon)
