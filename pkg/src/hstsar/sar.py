"""Self-attention regularization: agreement between default and rolled topologies.

Each step runs the batch twice: once over the default topology and once with
the attention input rolled under the fixed mask, or, in ``dropout_only``
mode, once more over the default topology with a fresh dropout draw. The loss
is the NLL of both passes plus ``alpha`` times the mean bidirectional KL
between the two predictive distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import TRAIN
from .errors import ConfigurationError, ContractError
from .hst import Roll, model_logits

KL_EPS = 1e-12
NORMALIZATION_TOL = 1e-8


@dataclass
class SarConfig:
    alpha: float = 0.0
    roll_tokens: int = 0
    roll_layer: int = 0
    dropout_only: bool = False
    enabled: bool = True
    # halve-and-copy batches and twice the optimizer steps (only when enabled)
    double_steps: bool = True

    def validate(self, n=None, layers=None):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.roll_tokens < 0 or (n is not None and self.roll_tokens >= n):
            raise ConfigurationError(f"roll_tokens must be in [0, {n}), got {self.roll_tokens}")
        if self.roll_layer < 0 or (layers is not None and self.roll_layer >= layers):
            raise ConfigurationError(f"roll_layer must be in [0, {layers}), got {self.roll_layer}")
        return self

    @property
    def doubles_steps(self):
        return self.enabled and self.double_steps

    def second_pass_roll(self):
        if self.dropout_only or self.roll_tokens == 0:
            return None
        return Roll(self.roll_tokens, self.roll_layer)


@dataclass
class LossBreakdown:
    nll: float
    sar: float
    total: float
    p1: np.ndarray
    p2: np.ndarray | None = None

    def as_dict(self):
        return {"nll": self.nll, "sar": self.sar, "total": self.total}


def _check_normalized(p, name):
    s = np.asarray(p).sum(axis=-1)
    if np.any(np.abs(s - 1.0) > NORMALIZATION_TOL):
        raise ContractError(f"{name} does not sum to 1 (max deviation {np.max(np.abs(s - 1.0)):.3g})")


def bidirectional_kl(p1, p2, eps=KL_EPS):
    """``0.5 * [KL(p1||p2) + KL(p2||p1)]`` over the last axis, logs of clamped values.

    Accepts tensors (differentiable, returns a tensor of per-row values) or
    arrays (returns a float for a single distribution, else an array).
    Written as ``0.5 * sum((p1 - p2) * (log p1 - log p2))``, which makes the
    result exactly symmetric and termwise non-negative.
    """
    if isinstance(p1, T.Tensor) or isinstance(p2, T.Tensor):
        p1, p2 = T.as_tensor(p1), T.as_tensor(p2)
        _check_normalized(p1.data, "P1")
        _check_normalized(p2.data, "P2")
        dlog = T.sub(T.log(T.clamp_min(p1, eps)), T.log(T.clamp_min(p2, eps)))
        return T.scale(T.sum(T.mul(T.sub(p1, p2), dlog), axis=-1), 0.5)
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check_normalized(p1, "P1")
    _check_normalized(p2, "P2")
    dlog = np.log(np.maximum(p1, eps)) - np.log(np.maximum(p2, eps))
    out = 0.5 * ((p1 - p2) * dlog).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def sar_losses(batch, model, topo=None, cfg=None, mode=TRAIN, rng=None):
    """Build the loss graph; returns ``(total, nll, sar, P1, P2)`` as tensors."""
    cfg = cfg or SarConfig(enabled=False)
    n_examples = len(batch)
    labels = batch.labels
    logits1 = model_logits(batch, model, topo, mode, rng)
    nll = T.scale(T.sum(T.take_label(T.log_softmax(logits1), labels)), -1.0 / n_examples)
    p1 = T.softmax_rows(logits1)
    if not cfg.enabled:
        return nll, nll, None, p1, None

    logits2 = model_logits(batch, model, topo, mode, rng, roll=cfg.second_pass_roll())
    nll2 = T.scale(T.sum(T.take_label(T.log_softmax(logits2), labels)), -1.0 / n_examples)
    p2 = T.softmax_rows(logits2)
    nll = T.add(nll, nll2)
    sar = T.mean(bidirectional_kl(p1, p2))
    total = T.add(nll, T.scale(sar, cfg.alpha))
    return total, nll, sar, p1, p2


def sar_step(batch, model, topo=None, cfg=None, mode=TRAIN, rng=None, run_backward=True):
    """Two-pass loss on ``batch`` and, by default, its backward pass.

    ``nll`` sums the two passes' per-example NLL; ``sar`` is the mean
    per-example bidirectional KL; ``total = nll + alpha * sar``. With
    ``cfg.enabled`` false only the first pass runs and ``sar`` is 0.
    """
    cfg = cfg or SarConfig(enabled=False)
    model_cfg = model.config
    cfg.validate((topo or model.topology).n, model_cfg.layers)
    total, nll, sar, p1, p2 = sar_losses(batch, model, topo, cfg, mode, rng)
    if run_backward:
        T.backward(total)
    return LossBreakdown(
        nll=nll.item(),
        sar=0.0 if sar is None else sar.item(),
        total=total.item(),
        p1=p1.data,
        p2=None if p2 is None else p2.data,
    )
