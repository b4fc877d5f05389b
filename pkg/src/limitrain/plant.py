"""Discrete-time reference plants: linear difference models, limiter links and
the variable-displacement hydraulic drive.

Every plant exposes the same small surface used by the rest of the package:

- ``state_dim`` and ``output_index`` (which state coordinate is the output),
- ``step(x, u) -> x_next`` (pure, returns a new array),
- ``limits_reached(x) -> tuple[int, ...]`` (ids of limiters sitting at a bound),
- ``to_dict()`` for provenance/config round-trips.

Limiters are applied at sample resolution: a linear candidate is computed for
the whole step and then clamped to the admissible box.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

CANDIDATE_MODES = ("zoh", "euler")
CONTACT_MODES = ("companion", "strict")

_EXPM_TOL = 1e-14


class PlantError(ValueError):
    """Raised for invalid plant parameters or non-finite inputs."""


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise PlantError(f"non-finite input: {v!r}")


def _balance(a: np.ndarray):
    """Diagonal similarity ``d^-1 a d`` (powers of two) equalizing row and
    column norms, so badly scaled physical models keep full relative accuracy.
    """
    a = a.copy()
    n = a.shape[0]
    d = np.ones(n)
    converged = False
    while not converged:
        converged = True
        for i in range(n):
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            f = 1.0
            total = c + r
            while c < r / 2.0:
                c, r, f = c * 2.0, r / 2.0, f * 2.0
            while c >= r * 2.0:
                c, r, f = c / 2.0, r * 2.0, f / 2.0
            if c + r < 0.95 * total:
                converged = False
                d[i] *= f
                a[i, :] /= f
                a[:, i] *= f
    return d, a


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring a truncated Taylor series.

    The matrix is balanced first; the series for ``a / 2**s`` is summed until
    the next term is below ``1e-14`` in max-abs norm, then squared ``s`` times.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return np.eye(0)
    d, a = _balance(a)
    norm = np.max(np.sum(np.abs(a), axis=1)) if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(math.ceil(math.log2(norm / 0.5)))
    scaled = a / (2.0**s)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = term @ scaled / k
        result = result + term
        if np.max(np.abs(term)) < _EXPM_TOL:
            break
    for _ in range(s):
        result = result @ result
    return result * d[:, None] / d[None, :]


def discretize(a: np.ndarray, b: np.ndarray, dt: float, mode: str = "zoh"):
    """Discretize ``x' = A x + B u`` with sample period ``dt``.

    Returns ``(Ad, Bd)`` with ``Bd`` of shape ``(n,)`` for a scalar input.
    ``zoh`` holds the input constant over the period (exact for the linear
    part); ``euler`` is a forward difference.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    n, m = b.shape
    if mode == "zoh":
        aug = np.zeros((n + m, n + m))
        aug[:n, :n] = a * dt
        aug[:n, n:] = b * dt
        phi = expm(aug)
        ad, bd = phi[:n, :n], phi[:n, n:]
    elif mode == "euler":
        ad, bd = np.eye(n) + dt * a, dt * b
    else:
        raise PlantError(f"unknown candidate_mode {mode!r}")
    if m == 1:
        bd = bd[:, 0]
    return ad, bd


# ---------------------------------------------------------------------------
# Linear difference model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearDifferenceModel:
    """Z-domain linear plant ``y(i) = sum b_m u(i-m) - sum a_k y(i-k)``.

    ``a`` holds ``a_1..a_K``; ``a_0 = 1`` is implied.
    """

    b: tuple[float, ...]
    a: tuple[float, ...] = ()
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        if not self.b and not self.a:
            raise PlantError("model needs at least one coefficient")
        _check_finite(self.b, self.a)

    @property
    def order_y(self) -> int:
        return len(self.a)

    @property
    def order_u(self) -> int:
        return max(len(self.b) - 1, 0)

    # The simulation state is [y(i-1), ..., y(i-Ky), u(i-1), ..., u(i-M)].
    @property
    def _ny(self) -> int:
        return max(self.order_y, 1)

    @property
    def state_dim(self) -> int:
        return self._ny + self.order_u

    output_index = 0
    n_limiters = 0

    def dc_gain(self) -> float:
        return sum(self.b) / (1.0 + sum(self.a))

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y_hist = x[: self._ny]
        u_hist = x[self._ny :]
        y = step_linear(self, u_hist, y_hist, u)
        new_y = np.concatenate(([y], y_hist[:-1]))
        new_u = np.concatenate(([float(u)], u_hist[:-1])) if self.order_u else u_hist
        return np.concatenate((new_y, new_u))

    def limits_reached(self, x) -> tuple[int, ...]:
        return ()

    def to_dict(self) -> dict:
        return {"type": "linear", "b": list(self.b), "a": list(self.a), "dt": self.dt}


def step_linear(model: LinearDifferenceModel, u_history, y_history, u_now) -> float:
    """One step of the difference equation.

    Histories are most-recent-first (``u_history[0] = u(i-1)``) and are
    zero-padded when shorter than the model order.
    """
    _check_finite(u_now, u_history, y_history)
    acc = model.b[0] * float(u_now) if model.b else 0.0
    for m in range(1, len(model.b)):
        if m - 1 < len(u_history):
            acc += model.b[m] * float(u_history[m - 1])
    for k in range(1, len(model.a) + 1):
        if k - 1 < len(y_history):
            acc -= model.a[k - 1] * float(y_history[k - 1])
    return acc


# ---------------------------------------------------------------------------
# Limiter links
# ---------------------------------------------------------------------------


def _check_modes(candidate_mode: str, contact_mode: str | None = None) -> None:
    if candidate_mode not in CANDIDATE_MODES:
        raise PlantError(f"candidate_mode must be one of {CANDIDATE_MODES}")
    if contact_mode is not None and contact_mode not in CONTACT_MODES:
        raise PlantError(f"contact_mode must be one of {CONTACT_MODES}")


@dataclass(frozen=True)
class SaturationLink:
    """First-order lag ``T x' = k u - x`` with state held inside ``|x| <= D``."""

    k: float = 1.0
    T: float = 1.0
    D: float = 1.0
    dt: float = 0.01
    candidate_mode: str = "zoh"

    state_dim = 1
    output_index = 0
    n_limiters = 1
    n_sat = 1
    n_lin = 0

    def __post_init__(self):
        if not (self.T > 0 and self.D > 0 and self.dt > 0):
            raise PlantError("SaturationLink requires T > 0, D > 0, dt > 0")
        _check_modes(self.candidate_mode)
        object.__setattr__(self, "_disc", self._discretize())

    def continuous(self):
        return np.array([[-1.0 / self.T]]), np.array([self.k / self.T])

    def discrete(self):
        """``(Ad, Bd)`` of the linear candidate."""
        return self._disc

    def _discretize(self):
        if self.candidate_mode == "zoh":
            alpha = math.exp(-self.dt / self.T)
            return np.array([[alpha]]), np.array([(1.0 - alpha) * self.k])
        return discretize(*self.continuous(), self.dt, "euler")

    def bounds(self):
        return np.array([-self.D]), np.array([self.D])

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([step_saturation(self, x[0], u)])

    def limits_reached(self, x) -> tuple[int, ...]:
        return (0,) if abs(x[0]) >= self.D else ()

    def to_dict(self) -> dict:
        return {"type": "saturation", **asdict(self)}


def step_saturation(link: SaturationLink, x: float, u: float) -> float:
    _check_finite(x, u)
    ad, bd = link.discrete()
    c = ad[0, 0] * x + bd[0] * u
    return min(max(c, -float(link.D)), float(link.D))


@dataclass(frozen=True)
class StopLink:
    """Second-order link with a rigid mechanical stop on position.

    ``x1' = x2``, ``x2' = (k u - x1) / T**2 - 2 zeta x2 / T`` with ``|x1| <= D``.
    """

    k: float = 1.0
    T: float = 1.0
    zeta: float = 0.5
    D: float = 1.0
    dt: float = 0.01
    candidate_mode: str = "zoh"
    contact_mode: str = "companion"

    state_dim = 2
    output_index = 0
    n_limiters = 1
    n_sat = 1
    n_lin = 1

    def __post_init__(self):
        if not (self.T > 0 and self.zeta >= 0 and self.D > 0 and self.dt > 0):
            raise PlantError("StopLink requires T > 0, zeta >= 0, D > 0, dt > 0")
        _check_modes(self.candidate_mode, self.contact_mode)
        object.__setattr__(self, "_disc", discretize(*self.continuous(), self.dt, self.candidate_mode))

    def continuous(self):
        a = np.array([[0.0, 1.0], [-1.0 / self.T**2, -2.0 * self.zeta / self.T]])
        b = np.array([0.0, self.k / self.T**2])
        return a, b

    def discrete(self):
        return self._disc

    def bounds(self):
        return np.array([-self.D, -np.inf]), np.array([self.D, np.inf])

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array(step_stop(self, x[0], x[1], u))

    def limits_reached(self, x) -> tuple[int, ...]:
        return (0,) if abs(x[0]) >= self.D else ()

    def to_dict(self) -> dict:
        return {"type": "stop", **asdict(self)}


def step_stop(link: StopLink, x1: float, x2: float, u: float) -> tuple[float, float]:
    _check_finite(x1, x2, u)
    D = float(link.D)
    if link.contact_mode == "strict" and abs(x1) >= D and x2 == 0.0:
        # resting on the stop and pushed outward: held
        if (link.k * u - x1) * math.copysign(1.0, x1) > 0:
            return x1, 0.0
    ad, bd = link.discrete()
    c1 = ad[0, 0] * x1 + ad[0, 1] * x2 + bd[0] * u
    c2 = ad[1, 0] * x1 + ad[1, 1] * x2 + bd[1] * u
    if link.contact_mode == "strict":
        if abs(c1) >= D:
            return math.copysign(D, c1), 0.0
        return c1, c2
    # companion: remove the velocity implied by the clipped overshoot
    x1_next = min(max(c1, -D), D)
    return x1_next, c2 - (c1 - x1_next) / link.dt


# ---------------------------------------------------------------------------
# Hydraulic drive
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HydraulicParams:
    """Constants of the pump-controlled hydraulic drive (SI units).

    Defaults are chosen so that the drive is open-loop stable apart from the
    shaft-angle integrator, the cradle bound ``D1`` is reached for commands
    ``|u| >= 1`` and the pressure bound ``D2`` is reached when decelerating
    the shaft from tens of rad/s.
    """

    k_v: float = 0.3  # cradle angle per unit command, rad
    T_gamma: float = 0.05  # cradle lag, s
    G: float = 3.0e-3  # pump flow per cradle angle, m^3/(s rad)
    L: float = 1.0e-11  # total leakage, m^3/(s Pa)
    E: float = 1.4e9  # bulk modulus, Pa
    V: float = 2.0e-3  # high-pressure line volume, m^3
    q: float = 1.0e-5  # motor displacement, m^3/rad
    J: float = 1.0  # reduced inertia, kg m^2
    b_f: float = 0.5  # viscous friction, N m s
    D1: float = 0.3  # cradle bound, rad
    D2: float = 2.0e7  # pressure-drop bound, Pa
    dt: float = 0.01

    @property
    def T_p(self) -> float:
        """Pressure-loop constant ``L * E / V`` (1/s)."""
        return self.L * self.E / self.V

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v > 0):
                raise PlantError(f"hydraulic parameter {name} must be positive, got {v}")

    def continuous(self):
        """Limiter-free state-space form over ``(gamma, p, omega, phi)``."""
        ev = self.E / self.V
        a = np.array(
            [
                [-1.0 / self.T_gamma, 0.0, 0.0, 0.0],
                [ev * self.G, -self.T_p, -ev * self.q, 0.0],
                [0.0, self.q / self.J, -self.b_f / self.J, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ]
        )
        b = np.array([self.k_v / self.T_gamma, 0.0, 0.0, 0.0])
        return a, b


@dataclass(frozen=True)
class HydraulicDrive:
    """Hydraulic drive with a cradle-angle limiter (id 0) and an inertia-free
    pressure-drop limiter (id 1). State is ``(gamma, p, omega, phi)``; the
    output is the shaft angle ``phi``.
    """

    params: HydraulicParams = field(default_factory=HydraulicParams)
    candidate_mode: str = "zoh"

    state_dim = 4
    output_index = 3
    n_limiters = 2
    n_sat = 2
    n_lin = 2
    state_names = ("gamma", "p", "omega", "phi")

    def __post_init__(self):
        self.params.validate()
        _check_modes(self.candidate_mode)
        object.__setattr__(self, "_disc", discretize(*self.params.continuous(), self.dt, self.candidate_mode))

    @property
    def dt(self) -> float:
        return self.params.dt

    def discrete(self):
        return self._disc

    def bounds(self):
        p = self.params
        return np.array([-p.D1, -p.D2, -np.inf, -np.inf]), np.array([p.D1, p.D2, np.inf, np.inf])

    def step(self, x, u) -> np.ndarray:
        return step_hydraulic(self, x, u)

    def limits_reached(self, x) -> tuple[int, ...]:
        p = self.params
        ids = []
        if abs(x[0]) >= p.D1:
            ids.append(0)
        if abs(x[1]) >= p.D2:
            ids.append(1)
        return tuple(ids)

    def to_dict(self) -> dict:
        return {"type": "hydraulic", "candidate_mode": self.candidate_mode, **asdict(self.params)}


def step_hydraulic(drive: HydraulicDrive, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_finite(x, u)
    ad, bd = drive.discrete()
    c = ad @ x + bd * float(u)
    lo, hi = drive.bounds()
    return np.minimum(np.maximum(c, lo), hi)


def plant_from_dict(cfg: dict):
    """Build a plant from a ``to_dict``-style mapping (``type`` key selects)."""
    cfg = dict(cfg)
    kind = cfg.pop("type", None)
    if kind == "linear":
        return LinearDifferenceModel(**cfg)
    if kind == "saturation":
        return SaturationLink(**cfg)
    if kind == "stop":
        return StopLink(**cfg)
    if kind == "hydraulic":
        mode = cfg.pop("candidate_mode", "zoh")
        return HydraulicDrive(HydraulicParams(**cfg), candidate_mode=mode)
    raise PlantError(f"unknown plant type {kind!r}")


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Time-indexed record. Row 0 is the initial state (``u`` there is 0:
    nothing has been applied yet); row ``k >= 1`` holds the input ``u_k``
    that drove ``x_{k-1}`` to ``x_k``.
    """

    dt: float
    t: np.ndarray
    r: np.ndarray
    u: np.ndarray
    x: np.ndarray  # (rows, n)
    y: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.r) == len(self.u) == len(self.x) == len(self.y) == n):
            raise ValueError("trajectory columns must have equal length")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def header(self) -> list[str]:
        n = self.x.shape[1]
        return ["t", "r", "u", *[f"x{i + 1}" for i in range(n)], "y"]

    def to_csv(self, path) -> None:
        lines = [",".join(self.header)]
        for k in range(len(self)):
            row = [self.t[k], self.r[k], self.u[k], *self.x[k], self.y[k]]
            lines.append(",".join(repr(float(v)) for v in row))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
        if header[:3] != ["t", "r", "u"] or header[-1] != "y":
            raise ValueError(f"unexpected trajectory header {header}")
        data = np.array(rows, dtype=float).reshape(-1, len(header))
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(dt=dt, t=t, r=data[:, 1], u=data[:, 2], x=data[:, 3:-1], y=data[:, -1])


class SimulationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"simulation failed at step {step}: {cause}")
        self.step = step


def simulate(plant, u_signal: Sequence[float], x0=None, n_steps: int | None = None, r=None) -> Trajectory:
    """Open-loop simulation over ``n_steps`` samples (default ``len(u_signal)``).

    ``u_signal[k]`` drives row ``k`` to row ``k + 1``. An optional reference
    column ``r`` (length ``n_steps + 1``) is recorded verbatim, else zeros.
    """
    u_signal = np.asarray(u_signal, dtype=float).ravel()
    if n_steps is None:
        n_steps = len(u_signal)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if len(u_signal) < n_steps:
        raise ValueError("input signal shorter than n_steps")
    x = np.zeros(plant.state_dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    xs = np.empty((n_steps + 1, plant.state_dim))
    us = np.zeros(n_steps + 1)
    xs[0] = x
    for k in range(n_steps):
        try:
            x = plant.step(x, u_signal[k])
        except Exception as exc:
            raise SimulationError(k, exc) from exc
        xs[k + 1] = x
        us[k + 1] = u_signal[k]
    dt = float(getattr(plant, "dt", 1.0))
    t = np.arange(n_steps + 1) * dt
    rr = np.zeros(n_steps + 1) if r is None else np.asarray(r, dtype=float)
    return Trajectory(dt=dt, t=t, r=rr, u=us, x=xs, y=xs[:, plant.output_index].copy())
