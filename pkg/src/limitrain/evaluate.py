"""Closed-loop runs, step-response metrics and side-by-side comparison."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .controller import ControllerSpec, features, step_register
from .net import Mlp
from .plant import LinearDifferenceModel, Trajectory

NOT_SETTLED = "not settled"


@dataclass
class Metrics:
    settling_time: float | None  # None: never stays inside the band
    overshoot: float
    steady_state_error: float
    band: float = 0.02

    @property
    def settled(self) -> bool:
        return self.settling_time is not None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(t, y, target: float | None = None, band: float = 0.02) -> Metrics:
    """Step-response metrics of ``y`` toward ``target`` (default: last sample).

    The band half-width is ``band * |y[0] - target|`` (``band * |target|`` for
    a zero step). Settling time is measured from ``t[0]`` to the first sample
    after which ``y`` never leaves the band again. Overshoot is the largest
    excursion past the target, as a fraction of the step.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or len(y) == 0:
        raise ValueError("t and y must be non-empty and of equal length")
    if not np.all(np.isfinite(y)):
        return Metrics(None, math.inf, math.inf, band)
    final = float(y[-1]) if target is None else float(target)
    step = final - y[0]
    width = band * (abs(step) if step != 0.0 else abs(final))
    outside = np.flatnonzero(np.abs(y - final) > width)
    if len(outside) == 0:
        settling = 0.0
    elif outside[-1] == len(y) - 1:
        settling = None
    else:
        settling = float(t[outside[-1] + 1] - t[0])
    if step != 0.0:
        overshoot = max(0.0, float(np.max((y - final) * np.sign(step))) / abs(step))
    else:
        overshoot = 0.0
    return Metrics(settling, overshoot, abs(float(y[-1]) - final), band)


class ClosedLoopError(ArithmeticError):
    def __init__(self, step: int, trajectory: Trajectory):
        super().__init__(f"non-finite state at step {step}")
        self.step = step
        self.trajectory = trajectory


def nn_policy(controller: Mlp, spec: ControllerSpec):
    if controller.input_dim != spec.input_dim:
        raise ValueError("controller input width does not match its spec")

    def policy(x, r):
        return float(controller(features(spec, x, r))[0])

    return policy


def run_closed_loop(plant, policy, x0, n_steps: int, reference: float = 0.0, band: float = 0.02, csv_path=None):
    """Simulate ``policy(x, r) -> u`` in feedback with the true plant.

    Returns ``(trajectory, metrics)``; metrics target the reference. A
    non-finite state raises :class:`ClosedLoopError` carrying the first bad
    step and the trajectory up to it.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    step_fn = (lambda x, u: step_register(plant, x, u)) if isinstance(plant, LinearDifferenceModel) else plant.step
    x = np.asarray(x0, dtype=float).copy()
    xs = np.zeros((n_steps + 1, len(x)))
    us = np.zeros(n_steps + 1)
    xs[0] = x
    dt = float(getattr(plant, "dt", 1.0))
    out = getattr(plant, "output_index", 0)
    for k in range(n_steps):
        u = policy(x, reference)
        x = step_fn(x, u) if np.isfinite(u) else np.full_like(x, np.nan)
        us[k + 1] = u
        xs[k + 1] = x
        if not np.all(np.isfinite(x)):
            m = k + 2
            partial = Trajectory(dt, np.arange(m) * dt, np.full(m, float(reference)), us[:m], xs[:m], xs[:m, out].copy())
            raise ClosedLoopError(k + 1, partial)
    t = np.arange(n_steps + 1) * dt
    traj = Trajectory(dt, t, np.full(n_steps + 1, float(reference)), us, xs, xs[:, out].copy())
    if csv_path is not None:
        traj.to_csv(csv_path)
    return traj, compute_metrics(t, traj.y, reference, band)


def safe_run(plant, policy, x0, n_steps: int, reference: float = 0.0, band: float = 0.02, csv_path=None):
    """Like :func:`run_closed_loop` but an unstable run yields "not settled"
    metrics instead of an exception.
    """
    try:
        return run_closed_loop(plant, policy, x0, n_steps, reference, band, csv_path)
    except ClosedLoopError as exc:
        if csv_path is not None:
            exc.trajectory.to_csv(csv_path)
        return exc.trajectory, Metrics(None, math.inf, math.inf, band)


def _ratio(a, b):
    if a is None or b is None:
        return NOT_SETTLED
    if a == b:
        return 1.0
    if b == 0.0 or not (math.isfinite(a) and math.isfinite(b)):
        return math.inf
    return a / b


def compare(run_a, run_b, labels=("A", "B")) -> list[dict]:
    """Side-by-side metrics of two runs ``(trajectory, metrics)`` of the same
    scenario, plus ``a / b`` ratio rows.
    """
    (ta, ma), (tb, mb) = run_a, run_b
    if ta.dt != tb.dt or not np.array_equal(ta.x[0], tb.x[0]):
        raise ValueError("runs do not share the time step and initial state")
    if len(ta) != len(tb) and ma.settled and mb.settled:
        raise ValueError("runs do not share the duration")
    if not np.array_equal(ta.r[:1], tb.r[:1]):
        raise ValueError("runs do not share the reference")
    a_name, b_name = labels
    rows = []
    for key in ("settling_time", "overshoot", "steady_state_error"):
        va, vb = getattr(ma, key), getattr(mb, key)
        rows.append(
            {
                "metric": key,
                a_name: NOT_SETTLED if va is None else va,
                b_name: NOT_SETTLED if vb is None else vb,
                "ratio": _ratio(va, vb),
            }
        )
    return rows


def write_table(rows: list[dict], path) -> None:
    keys = list(rows[0])
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(float(v)) for v in row.values()))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def format_table(rows: list[dict]) -> str:
    keys = list(rows[0])

    def cell(v):
        return v if isinstance(v, str) else f"{v:.6g}"

    body = [[cell(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(b[i]) for b in body)) for i, k in enumerate(keys)]
    out = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    out += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(out)


def max_deviation(imitator: Mlp, plant, u_signal, x0=None, scale=None, scaled: bool = False) -> float:
    """Largest ``|imitator - plant|`` over an autonomous state rollout.

    ``scale`` is given when the imitator works on ``x / scale``; the deviation
    is then measured in plant units, or in the imitator's units with ``scaled``.
    """
    s = np.ones(plant.state_dim) if scale is None else np.asarray(scale, dtype=float)
    x = np.zeros(plant.state_dim) if x0 is None else np.asarray(x0, dtype=float)
    z = x / s
    worst = 0.0
    for u in np.asarray(u_signal, dtype=float):
        x = plant.step(x, u)
        z = imitator(np.concatenate(([u], z)))
        err = z - x / s if scaled else z * s - x
        worst = max(worst, float(np.max(np.abs(err))))
    return worst
