from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .nn import ParamStore


class MissingGradientError(KeyError):
    def __init__(self, name: str) -> None:
        super().__init__(f'No gradient for parameter "{name}"')
        self.name = name

    def __str__(self) -> str:
        return self.args[0]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def export(self, prefix: str = "adam") -> Dict[str, np.ndarray]:
        """Moments as flat arrays, for storing next to the parameters."""
        out = {f"{prefix}.m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def restore(cls, arrays: Dict[str, np.ndarray], meta: dict, prefix: str = "adam"):
        state = cls(
            lr=meta["lr"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            eps=meta["eps"],
            step=meta["step"],
        )
        for key, a in arrays.items():
            if key.startswith(prefix + ".m."):
                state.m[key[len(prefix) + 3 :]] = a
            elif key.startswith(prefix + ".v."):
                state.v[key[len(prefix) + 3 :]] = a
        return state

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }


def adam_step(
    params: ParamStore,
    state: AdamState,
    names: Optional[Iterable[str]] = None,
    lr: Optional[float] = None,
) -> None:
    """Apply one bias-corrected Adam update in place and zero the gradients.

    `names` restricts the update to a subset of the store (e.g. one
    sub-network); `lr` overrides the state's rate for this step only.
    """
    names = list(params) if names is None else list(names)
    for name in names:
        if params.grads.get(name) is None:
            raise MissingGradientError(name)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    rate = state.lr if lr is None else lr
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    for name in names:
        g = params.grads[name]
        p = params.params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.params[name] = p - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.grads[name] = np.zeros_like(p)

    params.bump()
