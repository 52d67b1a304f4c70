"""ADAM for Euclidean parameters, Riemannian ADAM on S^3, and schedules."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .quatgeom import project_to_tangent, quat_exp_map, tangent_coords


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def like(cls, params, lr, **kw):
        return cls(lr, np.zeros_like(params), np.zeros_like(params), **kw)

    def remap(self, source, is_new):
        """Carry per-row moments through a density-control pass; new rows start at zero."""
        self.m = np.where(_rows(is_new, self.m.ndim), 0, self.m[source]).astype(self.m.dtype)
        self.v = np.where(_rows(is_new, self.v.ndim), 0, self.v[source]).astype(self.v.dtype)


def _rows(mask, ndim):
    return mask.reshape((-1,) + (1,) * (ndim - 1))


def adam_step(state, params, grads, lr=None):
    """Bias-corrected ADAM update applied in place; returns ``params``."""
    if np.shape(params) != np.shape(grads) or np.shape(params) != state.m.shape:
        raise ShapeMismatchError(
            f"params {np.shape(params)}, grads {np.shape(grads)}, state {state.m.shape} differ"
        )
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * np.square(grads)
    mhat = state.m / (1 - b1**state.step)
    vhat = state.v / (1 - b2**state.step)
    params -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return params


@dataclass
class RiemannianAdamState:
    """Moments in body-frame tangent coordinates, one 3-vector per quaternion.

    The scheduled step size decays linearly from ``lr`` and reaches zero on
    step number ``total_steps`` (1-based).
    """

    lr: float
    total_steps: int
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, r, lr=1e-3, total_steps=1, **kw):
        shape = np.shape(r)[:-1] + (3,)
        dtype = np.asarray(r).dtype
        return cls(lr, total_steps, np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), **kw)

    def remap(self, source, is_new):
        AdamState.remap(self, source, is_new)


def riemannian_adam_step(state, r, euclid_grad):
    """One Riemannian ADAM update of unit quaternion(s) ``r`` from a Euclidean gradient."""
    r = np.asarray(r)
    g = project_to_tangent(r, np.asarray(euclid_grad, dtype=r.dtype))
    c = tangent_coords(r, g)
    state.step += 1
    # 1-based schedule: the step numbered total_steps uses lr 0 and leaves r unchanged
    lr = lr_linear_decay(state.lr, min(state.step, state.total_steps), state.total_steps)
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * c
    state.v = b2 * state.v + (1 - b2) * c * c
    mhat = state.m / (1 - b1**state.step)
    vhat = state.v / (1 - b2**state.step)
    direction = mhat / (np.sqrt(vhat) + state.eps)
    return quat_exp_map(r, (-lr * direction).astype(r.dtype))


def lr_linear_decay(initial, step, total_steps):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    return initial * (1.0 - step / total_steps)


def lr_exp_decay(initial, final, step, total_steps):
    """Log-linear interpolation from ``initial`` to ``final``."""
    if total_steps <= 0:
        return final
    t = min(max(step / total_steps, 0.0), 1.0)
    return float(np.exp(np.log(initial) * (1 - t) + np.log(final) * t))


def k_scheduler(n_i, n_o, L=32, t_const=6, admissible=(1, 2, 4, 8, 16)):
    """Doppelganger count growing with the Gaussian population.

    The raw value ``L / 2**(t_const - ceil(n_i / n_o))`` is clamped to the
    largest admissible divisor of ``L`` not exceeding it.
    """
    if n_o < 1:
        raise ValueError("initial count must be >= 1")
    # beyond t_const + 5 the raw value already exceeds 16 * L; capping keeps the power finite
    u = min(math.ceil(n_i / n_o), t_const + 5)
    raw = L / 2.0 ** (t_const - u)
    allowed = [k for k in admissible if L % k == 0]
    fitting = [k for k in allowed if k <= raw]
    return max(fitting) if fitting else min(allowed)
