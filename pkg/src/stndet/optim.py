"""AdamW with decoupled weight decay and per-parameter decay groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    # parameter names excluded from weight decay
    no_decay: set[str] = field(default_factory=set)
    # per-parameter learning-rate multipliers (default 1)
    lr_scale: dict[str, float] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        """Flattened view for checkpointing."""
        out = {f"optim.m.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"optim.v.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step, "no_decay": sorted(self.no_decay),
                "lr_scale": dict(sorted(self.lr_scale.items()))}

    @classmethod
    def restore(cls, hyper: dict, arrays: dict[str, np.ndarray]) -> "OptimState":
        state = cls(lr=hyper["lr"], beta1=hyper["beta1"], beta2=hyper["beta2"], eps=hyper["eps"],
                    weight_decay=hyper["weight_decay"], step=hyper["step"], no_decay=set(hyper["no_decay"]),
                    lr_scale=dict(hyper.get("lr_scale", {})))
        for k, v in arrays.items():
            if k.startswith("optim.m."):
                state.exp_avg[k[len("optim.m."):]] = v.copy()
            elif k.startswith("optim.v."):
                state.exp_avg_sq[k[len("optim.v."):]] = v.copy()
        return state


def default_no_decay(names) -> set[str]:
    """Biases skip weight decay; everything else decays."""
    return {n for n in names if n.endswith("bias")}


def adamw_step(params: dict[str, Tensor], state: OptimState) -> None:
    """One AdamW update in place. Gradients are left untouched."""
    params = {k: p for k, p in params.items() if p.requires_grad}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        lr = state.lr * state.lr_scale.get(name, 1.0)
        if state.weight_decay and name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (lr / bc1) * m / denom
