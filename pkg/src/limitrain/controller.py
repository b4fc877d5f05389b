"""Neurocontrollers: structure rules, the inverse-dynamics law for linear
plants, and training by back-propagation through a frozen imitator.

Three feature layouts are supported:

``state``
    Full-state regulation, features ``x - r * e_reg`` (``n`` inputs).
``tracking``
    Full state plus an explicit reference, ``[x, r]`` (``n + 1`` inputs).
``delayed``
    Output/input history, ``[r_t, y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}]``
    (``2n`` inputs). This is the layout of the inverse-dynamics law.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .net import AdamState, Layer, Mlp, NumericalError, apply_update, backward, clip_by_norm, forward, init_mlp
from .plant import LinearDifferenceModel, step_linear

FEEDBACK = ("state", "tracking", "delayed")


@dataclass(frozen=True)
class ControllerSpec:
    n: int
    feedback: str = "state"
    hidden: tuple[int, ...] = (8,)
    activations: tuple[str, ...] = ("leaky_relu", "identity")
    alpha: float = 0.01
    reg_index: int = 0  # regulated state coordinate (state/tracking layouts)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.n < 1:
            raise ValueError("plant order must be >= 1")
        if self.feedback not in FEEDBACK:
            raise ValueError(f"feedback must be one of {FEEDBACK}")
        if len(self.activations) != len(self.hidden) + 1:
            raise ValueError("need one activation per hidden layer plus the output layer")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if not 0 <= self.reg_index < self.n:
            raise ValueError("reg_index out of range")

    @property
    def input_dim(self) -> int:
        if self.feedback == "delayed":
            return 2 * self.n
        if self.feedback == "tracking":
            return self.n + 1
        return self.n

    @property
    def register_dim(self) -> int:
        """Width of the recurrent register the features are computed from."""
        return 2 * self.n - 1 if self.feedback == "delayed" else self.n

    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, 1]


HYDRAULIC_CONTROLLER = ControllerSpec(
    n=4, feedback="state", hidden=(24, 8), activations=("leaky_relu", "leaky_relu", "identity"), reg_index=3
)


def build_controller_structure(spec: ControllerSpec, seed: int = 0, output_scale: float = 1.0) -> Mlp:
    """Seeded Glorot skeleton. ``output_scale`` shrinks the output layer so an
    untrained controller starts with small actions (limiters unsaturated).
    """
    net = init_mlp(spec.dims(), list(spec.activations), np.random.default_rng(seed), spec.alpha)
    net.layers[-1].weights *= output_scale
    return net


def widen(spec: ControllerSpec) -> ControllerSpec:
    """Next candidate in the step-by-step growth rule: double the last hidden
    layer, or add a hidden layer of width 2 to a network without one.
    """
    if not spec.hidden:
        return replace(spec, hidden=(2,), activations=("leaky_relu", *spec.activations))
    return replace(spec, hidden=(*spec.hidden[:-1], 2 * spec.hidden[-1]))


# ---------------------------------------------------------------------------
# Inverse dynamics for linear plants
# ---------------------------------------------------------------------------


def _check_invertible(model: LinearDifferenceModel) -> None:
    if len(model.b) < 2 or model.b[1] == 0.0:
        raise ValueError("inverse dynamics needs b_1 != 0")
    if model.b[0] != 0.0:
        raise ValueError("inverse dynamics needs b_0 = 0 (strictly proper model)")


def inverse_dynamics_control(model: LinearDifferenceModel, r_now, y_history, u_history) -> float:
    """Control that makes the next output equal ``r_now``.

    ``y_history = [y(i), y(i-1), ...]`` and ``u_history = [u(i-1), u(i-2), ...]``,
    both zero-padded when short.
    """
    _check_invertible(model)
    y_history = np.asarray(y_history, dtype=float).ravel()
    u_history = np.asarray(u_history, dtype=float).ravel()
    acc = float(r_now)
    for k, a in enumerate(model.a, start=1):
        if k - 1 < len(y_history):
            acc += a * y_history[k - 1]
    for m in range(2, len(model.b)):
        if m - 2 < len(u_history):
            acc -= model.b[m] * u_history[m - 2]
    return acc / model.b[1]


def model_order(model: LinearDifferenceModel) -> int:
    return max(model.order_y, model.order_u, 1)


def inverse_dynamics_net(model: LinearDifferenceModel) -> Mlp:
    """Single identity neuron equal to :func:`inverse_dynamics_control` on the
    ``delayed`` feature layout.
    """
    _check_invertible(model)
    n = model_order(model)
    w = np.zeros(2 * n)
    w[0] = 1.0
    for k, a in enumerate(model.a, start=1):
        w[k] = a
    for m in range(2, len(model.b)):
        w[1 + n + m - 2] = -model.b[m]
    return Mlp([Layer(w[None, :] / model.b[1], [0.0], "identity")])


def step_register(model: LinearDifferenceModel, register, u_now) -> np.ndarray:
    """Advance a delayed register ``[y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}]`` by
    one sample under control ``u_now``.
    """
    if model.b and model.b[0] != 0.0:
        raise ValueError("register stepping needs b_0 = 0")
    n = model_order(model)
    reg = np.asarray(register, dtype=float)
    y_hist, u_past = reg[:n], reg[n:]
    u_hist = np.concatenate(([float(u_now)], u_past))
    y_next = step_linear(model, u_hist, y_hist, 0.0)
    return np.concatenate(([y_next], y_hist[:-1], u_hist[: n - 1]))


# ---------------------------------------------------------------------------
# Features and deployment
# ---------------------------------------------------------------------------


def features(spec: ControllerSpec, register, r) -> np.ndarray:
    """Controller input from a register (row or batch) and reference."""
    reg = np.asarray(register, dtype=float)
    if reg.shape[-1] != spec.register_dim:
        raise ValueError(f"expected register of width {spec.register_dim}, got {reg.shape[-1]}")
    r = np.asarray(r, dtype=float)
    if spec.feedback == "state":
        out = reg.copy()
        out[..., spec.reg_index] = out[..., spec.reg_index] - r
        return out
    r_col = np.broadcast_to(r, reg.shape[:-1])[..., None]
    if spec.feedback == "tracking":
        return np.concatenate([reg, r_col], axis=-1)
    return np.concatenate([r_col, reg], axis=-1)


def closed_loop_step(controller: Mlp, spec: ControllerSpec, plant, reference, state):
    """Evaluate the controller and apply its output to the true plant.

    ``state`` is the plant state vector, or the delayed register for a
    :class:`LinearDifferenceModel`. Returns ``(u, next_state)``.
    """
    f = features(spec, state, reference)
    if f.shape[-1] != controller.input_dim:
        raise ValueError("controller input width does not match the feature layout")
    u = float(controller(f)[0])
    if isinstance(plant, LinearDifferenceModel):
        return u, step_register(plant, state, u)
    return u, plant.step(state, u)


# ---------------------------------------------------------------------------
# Training through a frozen imitator
# ---------------------------------------------------------------------------

REFERENCES = ("constant", "random", "sine", "meander")


@dataclass
class RolloutConfig:
    horizon: int = 50
    batch: int = 16
    reference: str = "constant"
    r_low: float = 0.0
    r_high: float = 0.0
    ref_period: int = 50  # samples, for sine and meander references
    x0_low: list | None = None  # register box, imitator coordinates
    x0_high: list | None = None
    loss: str = "output"  # "output" (regulated coordinate) or "state"

    def validate(self, spec: ControllerSpec) -> None:
        if self.horizon < 1:
            raise ValueError("rollout horizon must be >= 1")
        if self.batch < 1:
            raise ValueError("rollout batch must be >= 1")
        if self.reference not in REFERENCES:
            raise ValueError(f"reference must be one of {REFERENCES}")
        if self.r_high < self.r_low:
            raise ValueError("r_high < r_low")
        if self.loss not in ("output", "state"):
            raise ValueError("loss must be 'output' or 'state'")
        if self.loss == "state" and spec.feedback == "delayed":
            raise ValueError("state loss needs a state-vector imitator")
        for box in (self.x0_low, self.x0_high):
            if box is not None and len(box) != spec.register_dim:
                raise ValueError("initial-state box does not match the register width")

    def sample(self, spec: ControllerSpec, rng: np.random.Generator):
        """Initial registers ``(batch, s)`` and references ``(batch, H)``."""
        s = spec.register_dim
        lo = np.zeros(s) if self.x0_low is None else np.asarray(self.x0_low, float)
        hi = np.zeros(s) if self.x0_high is None else np.asarray(self.x0_high, float)
        s0 = lo + (hi - lo) * rng.random((self.batch, s))
        amp = self.r_low + (self.r_high - self.r_low) * rng.random((self.batch, 1))
        t = np.arange(self.horizon)[None, :]
        if self.reference == "constant":
            refs = np.repeat(amp, self.horizon, axis=1)
        elif self.reference == "random":
            refs = self.r_low + (self.r_high - self.r_low) * rng.random((self.batch, self.horizon))
        elif self.reference == "sine":
            phase = 2.0 * np.pi * rng.random((self.batch, 1))
            refs = amp * np.sin(2.0 * np.pi * t / self.ref_period + phase)
        else:
            refs = np.where(np.mod(t, self.ref_period) < self.ref_period / 2, amp, -amp)
        return s0, refs


class _Wiring:
    """Linear plumbing between controller, imitator and register.

    ``f = S F^T + r g``, imitator input ``a = [u, S] M^T`` and next register
    ``S' = o Y^T + [u, S] Z^T``.
    """

    def __init__(self, spec: ControllerSpec, imitator: Mlp):
        n, s = spec.n, spec.register_dim
        if spec.feedback == "delayed":
            if imitator.input_dim != 2 * n or imitator.output_dim != 1:
                raise ValueError(f"delayed layout needs a [{2 * n}, ..., 1] imitator")
            self.F = np.vstack([np.zeros((1, s)), np.eye(s)])
            self.g = np.eye(2 * n)[0]
            # [u_t, y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}] -> [u_t..u_{t-n+1}, y_t..y_{t-n+1}]
            order = [0, *range(1 + n, 2 * n), *range(1, 1 + n)]
            self.M = np.eye(2 * n)[order]
            self.Y = np.eye(s)[:, :1]
            self.Z = np.zeros((s, 1 + s))
            for j in range(1, n):
                self.Z[j, j] = 1.0  # y shift
            for j in range(n - 1):
                self.Z[n + j, 0 if j == 0 else n + j] = 1.0  # u shift
            self.out_index = 0
        else:
            if imitator.input_dim != n + 1 or imitator.output_dim != n:
                raise ValueError(f"state layout needs a [{n + 1}, ..., {n}] imitator")
            if spec.feedback == "state":
                self.F = np.eye(n)
                self.g = -np.eye(n)[spec.reg_index]
            else:
                self.F = np.vstack([np.eye(n), np.zeros((1, n))])
                self.g = np.eye(n + 1)[n]
            self.M = np.eye(n + 1)
            self.Y = np.eye(n)
            self.Z = np.zeros((n, n + 1))
            self.out_index = spec.reg_index
        self.s = s


def rollout_loss(controller: Mlp, imitator: Mlp, spec: ControllerSpec, s0, refs, loss: str = "output", grads: bool = True):
    """Horizon loss of the controller driving the imitator, and its gradient
    with respect to the controller parameters (truncated BPTT).

    ``s0`` is ``(batch, s)`` and ``refs`` is ``(batch, H)``. The loss is the
    mean over batch and horizon of the squared error between the next
    regulated output and the reference (``loss="state"`` averages over all
    state coordinates, with target ``r * e_reg``). Returns
    ``(loss, grads, registers)`` with registers of shape ``(H + 1, batch, s)``.
    """
    w = _Wiring(spec, imitator)
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    batch, horizon = refs.shape
    if horizon < 1:
        raise ValueError("rollout horizon must be >= 1")
    weight = np.zeros(w.s)
    if loss == "state":
        weight[: spec.n] = 1.0 / spec.n
    else:
        weight[w.out_index] = 1.0
    norm = 1.0 / (batch * horizon)

    regs = [s0]
    c_caches, i_caches, resid = [], [], []
    S = s0
    for t in range(horizon):
        f = S @ w.F.T + refs[:, t : t + 1] * w.g
        u, cc = forward(controller, f)
        v = np.hstack([u, S])
        o, ci = forward(imitator, v @ w.M.T)
        S = o @ w.Y.T + v @ w.Z.T
        target = np.zeros_like(S)
        target[:, w.out_index] = refs[:, t]
        resid.append(S - target)
        regs.append(S)
        c_caches.append(cc)
        i_caches.append(ci)
    value = norm * float(sum(np.sum(weight * e * e) for e in resid))
    if not np.isfinite(value):
        raise NumericalError("non-finite rollout loss")
    if not grads:
        return value, None, np.array(regs)

    total = [np.zeros_like(p) for p in controller.params()]
    dS = np.zeros_like(s0)
    for t in reversed(range(horizon)):
        dS = dS + 2.0 * norm * weight * resid[t]
        dv = dS @ w.Z
        _, da = backward(imitator, i_caches[t], dS @ w.Y, param_grads=False)
        dv = dv + da @ w.M
        g_ctrl, df = backward(controller, c_caches[t], dv[:, :1])
        for acc, g in zip(total, g_ctrl):
            acc += g
        dS = dv[:, 1:] + df @ w.F
    return value, total, np.array(regs)


@dataclass
class ControllerHyper:
    iterations: int = 300
    lr: float = 1e-3
    lr_final: float | None = None
    clip_norm: float | None = 10.0
    seed: int = 0


def train_controller(controller: Mlp, imitator: Mlp, spec: ControllerSpec, rollout: RolloutConfig, hyper: ControllerHyper | None = None):
    """Train ``controller`` in place through the frozen ``imitator``.

    Every iteration samples a batch of episodes, rolls them out for
    ``rollout.horizon`` steps, back-propagates the horizon loss and takes one
    Adam step on the controller only. Returns the per-iteration loss history.
    """
    hyper = hyper or ControllerHyper()
    if not imitator.frozen:
        raise ValueError("imitator must be frozen during controller training")
    if controller.frozen:
        raise ValueError("controller is frozen")
    if controller.input_dim != spec.input_dim or controller.output_dim != 1:
        raise ValueError("controller dimensions do not match the ControllerSpec")
    rollout.validate(spec)
    rng = np.random.default_rng(hyper.seed)
    adam = AdamState(lr=hyper.lr)
    decay = 1.0
    if hyper.lr_final is not None and hyper.iterations > 1:
        decay = (hyper.lr_final / hyper.lr) ** (1.0 / (hyper.iterations - 1))
    history = []
    for it in range(hyper.iterations):
        s0, refs = rollout.sample(spec, rng)
        try:
            value, grads, _ = rollout_loss(controller, imitator, spec, s0, refs, rollout.loss)
        except NumericalError as exc:
            raise NumericalError(f"rollout diverged at iteration {it}") from exc
        apply_update(controller, adam, clip_by_norm(grads, hyper.clip_norm))
        history.append(value)
        adam.lr *= decay
    return history


def write_sidecar(path, spec: ControllerSpec, rollout: RolloutConfig, **extra) -> None:
    record = {"kind": "controller", "spec": asdict(spec), "rollout": asdict(rollout), **extra}
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> tuple[ControllerSpec, RolloutConfig, dict]:
    with open(path) as fh:
        record = json.load(fh)
    spec = ControllerSpec(**record.pop("spec"))
    rollout = RolloutConfig(**record.pop("rollout"))
    return spec, rollout, record
