"""Neuroimitators: sizing rules, exact ReLU construction and data-driven training.

A plant with limiters whose one-step map is ``x' = clamp(Ad x + Bd u)`` (plus
an overshoot-proportional velocity correction for mechanical stops) is
piecewise linear, so a single ReLU hidden layer reproduces it exactly:

    c        = ReLU(c) - ReLU(-c)                       (identity pair)
    clamp(c) = c - ReLU(c - ub) + ReLU(lb - c)          (plus excess pair)

That is two neurons per unconstrained state and four per constrained one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .net import AdamState, Layer, Mlp, evaluate_mse, init_mlp, train_epochs
from .plant import HydraulicDrive, LinearDifferenceModel, SaturationLink, StopLink

FEEDBACK_MODES = ("state_vector", "delayed_output")


@dataclass(frozen=True)
class ImitatorSpec:
    n_sat: int
    n_lin: int
    feedback_mode: str = "state_vector"
    # identity layer of width n in front of the ReLU layer (hydraulic layout)
    input_projection: bool = False

    def __post_init__(self):
        if self.n_sat < 0 or self.n_lin < 0:
            raise ValueError("state counts must be non-negative")
        if self.n < 1:
            raise ValueError("imitator needs at least one state variable")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"feedback_mode must be one of {FEEDBACK_MODES}")

    @property
    def n(self) -> int:
        return self.n_sat + self.n_lin

    @classmethod
    def for_plant(cls, plant, feedback_mode: str = "state_vector") -> "ImitatorSpec":
        projection = isinstance(plant, HydraulicDrive) and feedback_mode == "state_vector"
        return cls(plant.n_sat, plant.n_lin, feedback_mode, projection)


HYDRAULIC_SPEC = ImitatorSpec(2, 2, "state_vector", input_projection=True)


def hidden_size(spec: ImitatorSpec) -> int:
    """Minimum ReLU hidden width ``4 n_sat + 2 n_lin``."""
    return 4 * spec.n_sat + 2 * spec.n_lin


def build_structure(spec: ImitatorSpec) -> list[int]:
    n, h = spec.n, hidden_size(spec)
    if spec.feedback_mode == "delayed_output":
        return [2 * n, h, 1]
    if spec.input_projection:
        return [n + 1, n, h, n]
    return [n + 1, h, n]


def structure_activations(spec: ImitatorSpec) -> list[str]:
    if spec.feedback_mode == "state_vector" and spec.input_projection:
        return ["identity", "relu", "identity"]
    return ["relu", "identity"]


def init_imitator(spec: ImitatorSpec, seed: int = 0) -> Mlp:
    return init_mlp(build_structure(spec), structure_activations(spec), np.random.default_rng(seed))


def _plant_matrices(plant):
    """``(Ad, Bd, lb, ub, couplings)``; couplings map velocity -> (position, gain)."""
    if not isinstance(plant, (StopLink, SaturationLink, HydraulicDrive)):
        raise TypeError(f"no exact construction for {type(plant).__name__}")
    ad, bd = plant.discrete()
    lb, ub = plant.bounds()
    couplings = {}
    if isinstance(plant, StopLink):
        if plant.contact_mode != "companion":
            raise ValueError(
                "strict contact mode resets velocity discontinuously and has no exact "
                "one-hidden-layer ReLU form; use contact_mode='companion'"
            )
        couplings[1] = (0, 1.0 / plant.dt)
    return np.asarray(ad, float), np.asarray(bd, float), lb, ub, couplings


def construct_exact(plant, scale=None, input_projection: bool | None = None) -> Mlp:
    """Exact state-vector imitator ``[u, x] -> x_next`` of a limiter plant.

    ``scale`` (per-state) makes the network operate on ``x / scale``; the
    control input stays unscaled. Hidden width equals :func:`hidden_size`.
    """
    ad, bd, lb, ub, couplings = _plant_matrices(plant)
    n = ad.shape[0]
    s = np.ones(n) if scale is None else np.asarray(scale, dtype=float)
    # candidate in scaled coordinates: c = S^-1 Ad S z + S^-1 Bd u
    cand = np.hstack([(bd / s)[:, None], ad * s[None, :] / s[:, None]])
    lb, ub = lb / s, ub / s
    sat = [i for i in range(n) if np.isfinite(lb[i]) or np.isfinite(ub[i])]
    if input_projection is None:
        input_projection = isinstance(plant, HydraulicDrive)

    rows, biases = [], []  # selection of the candidate vector per hidden neuron
    pos, neg, hi, lo = {}, {}, {}, {}
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        pos[i] = len(rows)
        rows.append(e), biases.append(0.0)
        neg[i] = len(rows)
        rows.append(-e), biases.append(0.0)
    for i in sat:
        e = np.zeros(n)
        e[i] = 1.0
        hi[i] = len(rows)
        rows.append(e), biases.append(-ub[i])
        lo[i] = len(rows)
        rows.append(-e), biases.append(lb[i])
    select = np.array(rows)
    h = len(rows)

    out = np.zeros((n, h))
    for i in range(n):
        out[i, pos[i]] = 1.0
        out[i, neg[i]] = -1.0
        if i in hi:
            out[i, hi[i]] = -1.0
            out[i, lo[i]] = 1.0
    for vel, (p, gain) in couplings.items():
        g = gain * s[p] / s[vel]
        out[vel, hi[p]] -= g
        out[vel, lo[p]] += g

    if input_projection:
        layers = [
            Layer(cand, np.zeros(n), "identity"),
            Layer(select, biases, "relu"),
            Layer(out, np.zeros(n), "identity"),
        ]
    else:
        layers = [Layer(select @ cand, biases, "relu"), Layer(out, np.zeros(n), "identity")]
    return Mlp(layers)


def linear_imitator(model: LinearDifferenceModel) -> Mlp:
    """One identity neuron reproducing a strictly proper difference model.

    Input layout is ``[u_t, ..., u_{t-n+1}, y_t, ..., y_{t-n+1}]`` with
    ``n = max(K, M)``; the output is ``y_{t+1}``.
    """
    if model.b and model.b[0] != 0.0:
        raise ValueError("linear imitator needs b_0 = 0 (one-step-ahead form)")
    n = max(model.order_y, model.order_u, 1)
    w = np.zeros(2 * n)
    for m in range(1, len(model.b)):
        w[m - 1] = model.b[m]
    for k, a in enumerate(model.a):
        w[n + k] = -a
    return Mlp([Layer(w[None, :], [0.0], "identity")])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ImitatorHyper:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-2
    lr_final: float = 1e-5
    loss_target: float = 0.0
    restarts: int = 1
    seed: int = 0
    normalize: bool = True


def column_scale(a: np.ndarray) -> np.ndarray:
    """Per-column max-abs scale (1 where a column is identically zero)."""
    s = np.max(np.abs(a), axis=0)
    return np.where(s > 0, s, 1.0)


def fold_scaling(net: Mlp, in_scale, out_scale) -> Mlp:
    """Return a copy that accepts raw inputs and emits raw outputs for a net
    trained on ``x / in_scale -> y / out_scale``.
    """
    out = net.copy()
    first, last = out.layers[0], out.layers[-1]
    first.weights = first.weights / np.asarray(in_scale)[None, :]
    last.weights = last.weights * np.asarray(out_scale)[:, None]
    last.biases = last.biases * np.asarray(out_scale)
    return out


@dataclass
class ImitatorReport:
    train_mse: float
    test_mse: float
    history: list[float]
    in_scale: list[float]
    out_scale: list[float]


def train_imitator(spec_or_net, train, test, hyper: ImitatorHyper | None = None):
    """Fit an imitator on single-step pairs.

    ``train`` and ``test`` are ``(inputs, targets)`` array pairs (or anything
    with ``inputs``/``targets`` attributes). With ``normalize`` the network is
    trained on max-abs-scaled data and the scaling is folded back into the
    returned network; reported MSEs are in the normalized units. An ``Mlp``
    passed as the first argument is used as the starting point.

    Returns ``(net, ImitatorReport)``.
    """
    hyper = hyper or ImitatorHyper()
    xtr, ytr = _arrays(train)
    xte, yte = _arrays(test)
    if len(xtr) == 0 or len(xte) == 0:
        raise ValueError("empty train or test split")
    if hyper.normalize:
        s_in, s_out = column_scale(xtr), column_scale(ytr)
    else:
        s_in, s_out = np.ones(xtr.shape[1]), np.ones(ytr.shape[1])

    best = None
    for attempt in range(max(hyper.restarts, 1)):
        if isinstance(spec_or_net, Mlp):
            # starting network works on raw data; move it into normalized units
            net = fold_scaling(spec_or_net, 1.0 / s_in, 1.0 / s_out)
        else:
            net = init_imitator(spec_or_net, seed=hyper.seed + attempt)
        history = train_epochs(
            net,
            xtr / s_in,
            ytr / s_out,
            batch_size=hyper.batch_size,
            epochs=hyper.epochs,
            adam=AdamState(lr=hyper.lr),
            loss_target=hyper.loss_target,
            seed=hyper.seed + attempt,
            lr_decay=(hyper.lr_final / hyper.lr) ** (1.0 / max(hyper.epochs - 1, 1)),
        )
        train_mse = evaluate_mse(net, xtr / s_in, ytr / s_out)
        if best is None or train_mse < best[1]:
            best = (net, train_mse, history)
        if isinstance(spec_or_net, Mlp):
            break
    net, train_mse, history = best
    test_mse = evaluate_mse(net, xte / s_in, yte / s_out)
    report = ImitatorReport(train_mse, test_mse, history, s_in.tolist(), s_out.tolist())
    return fold_scaling(net, s_in, s_out), report


def _arrays(split):
    if hasattr(split, "inputs"):
        return np.asarray(split.inputs, float), np.asarray(split.targets, float)
    x, y = split
    return np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(y, float))


def rollout(net: Mlp, x0, u_signal) -> np.ndarray:
    """Autonomous state-vector rollout: the imitator feeds on its own output."""
    x = np.asarray(x0, dtype=float)
    xs = [x]
    for u in u_signal:
        x = net(np.concatenate(([u], x)))
        xs.append(x)
    return np.array(xs)


def write_sidecar(path, spec: ImitatorSpec, plant, **extra) -> None:
    record = {
        "kind": "imitator",
        **asdict(spec),
        "dt": float(plant.dt),
        "candidate_mode": getattr(plant, "candidate_mode", None),
        **extra,
    }
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
