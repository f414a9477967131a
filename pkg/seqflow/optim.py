from dataclasses import dataclass, field

import numpy as np

from .exceptions import Invalid, DimensionMismatch


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(state, params, grads):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays. Returns new parameter arrays
    and a new state; neither input is modified."""
    if set(params) != set(grads):
        raise Invalid(f"invalid keys: gradients for {sorted(set(params) ^ set(grads))} do not match parameters")

    step = state.step_count + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if grad.shape != value.shape or m.shape != value.shape or v.shape != value.shape:
            raise DimensionMismatch(f'key: "{name}" contains invalid item: gradient shape {grad.shape} '
                                    f'does not match parameter shape {value.shape}')
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad ** 2
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v

    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                          step_count=step, m=new_m, v=new_v)
    return new_params, new_state


class Adam:
    """Adam over a dictionary of parameter nodes, updating their values in place."""

    def __init__(self, parameters, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.parameters = parameters
        self.state = state or AdamState.for_params({k: p.value for k, p in parameters.items()},
                                                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads=None):
        if grads is None:
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.value)
                     for name, p in self.parameters.items()}
        values = {name: p.value for name, p in self.parameters.items()}
        updated, self.state = adam_step(self.state, values, grads)
        for name, p in self.parameters.items():
            p.value[...] = updated[name]

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()
