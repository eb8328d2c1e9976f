"""Adam with bias correction, operating on named parameter dicts.

Kept hand-rolled so moment tensors serialize into the checkpoint container
and resumed runs continue bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PAPER_LR = 1e-5


class OptimError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
            t=0,
        )


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float = PAPER_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One in-place Adam update. Zero gradient leaves parameters unchanged."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise OptimError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.add_((m / bc1) / ((v / bc2).sqrt() + eps), alpha=-lr)
