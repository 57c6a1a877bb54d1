"""Adam with per-group learning rates, step decay and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import OptimConfig
from .tensor import Parameter


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Parameter]]
    base_lr: float
    lr: float


def step_decay(base_lr: float, epoch: int, step_epochs: int, factor: float) -> float:
    """Learning rate after ``epoch`` completed epochs: base * factor ** (epoch // step)."""
    if step_epochs <= 0:
        return base_lr
    return base_lr * factor ** (epoch // step_epochs)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Adam with an L2 weight-decay term added to the gradient."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.groups = groups
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for g in groups for n, p in g.params}
        self.v = {n: np.zeros_like(p.data) for g in groups for n, p in g.params}

    @classmethod
    def for_model(cls, model, cfg: OptimConfig) -> "Adam":
        backbone_names = model.backbone_parameter_names()
        named = list(model.named_parameters())
        groups = [
            ParamGroup("backbone", [(n, p) for n, p in named if n in backbone_names],
                       cfg.lr_backbone, cfg.lr_backbone),
            ParamGroup("transformer", [(n, p) for n, p in named if n not in backbone_names],
                       cfg.lr, cfg.lr),
        ]
        return cls(groups, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def set_epoch(self, epoch: int, step_epochs: int, factor: float) -> None:
        for g in self.groups:
            g.lr = step_decay(g.base_lr, epoch, step_epochs, factor)

    def step(self) -> dict[str, float]:
        """Apply one update; returns the mean absolute applied step per group."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        applied = {}
        for g in self.groups:
            total, count = 0.0, 0
            for name, p in g.params:
                if p.grad is None:
                    continue
                grad = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
                m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
                v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
                update = g.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = (p.data - update).astype(p.data.dtype)
                total += float(np.abs(update).sum())
                count += update.size
            applied[g.name] = total / count if count else 0.0
        return applied

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {f"optim.m.{n}": a for n, a in self.m.items()}
        tensors.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return tensors, {"step": self.step_count}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        for n in self.m:
            self.m[n] = np.array(tensors[f"optim.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(tensors[f"optim.v.{n}"], dtype=self.v[n].dtype)
        self.step_count = int(meta["step"])
