"""Training-sample formation for imitators and controllers.

Excitation is built from sine and meander (square wave) families; every
recorded step becomes a self-contained input/target pair tagged with the
limiters that sit at their bound at the end of the step.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .plant import HydraulicDrive, SaturationLink, StopLink, plant_from_dict, simulate

NO_LIMIT = "no_limit"
LIMIT = "limit_reached"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    kind: str  # "sine" | "meander"
    amplitude: float
    frequency: float  # Hz
    duration: float  # s
    dt: float  # s

    def validate(self) -> None:
        if self.kind not in ("sine", "meander"):
            raise DatasetError(f"unknown signal kind {self.kind!r}")
        if not self.amplitude > 0:
            raise DatasetError("signal amplitude must be positive")
        if not self.frequency > 0:
            raise DatasetError("signal frequency must be positive")
        if not self.dt > 0:
            raise DatasetError("signal dt must be positive")
        if self.duration * self.frequency < 1.0 - 1e-9:
            raise DatasetError("signal duration shorter than one period")

    def sample(self) -> np.ndarray:
        self.validate()
        n = int(round(self.duration / self.dt))
        t = np.arange(n) * self.dt
        if self.kind == "sine":
            return self.amplitude * np.sin(2.0 * np.pi * self.frequency * t)
        phase = np.mod(t * self.frequency, 1.0)
        return np.where(phase < 0.5, self.amplitude, -self.amplitude)


def generate_signals(grid) -> list[np.ndarray]:
    grid = list(grid)
    if not grid:
        raise DatasetError("empty signal grid")
    return [spec.sample() for spec in grid]


def characteristic_time(plant) -> float:
    if isinstance(plant, (SaturationLink, StopLink)):
        return plant.T
    if isinstance(plant, HydraulicDrive):
        p = plant.params
        return math.sqrt(p.V * p.J / (p.E * p.q**2))
    raise DatasetError(f"no characteristic time for {type(plant).__name__}")


def reaching_amplitude(plant, frequency: float, tol: float = 1e-3) -> float:
    """Smallest meander amplitude (one period at ``frequency``) that drives
    any limiter to its bound, by bisection on a relative bracket.
    """

    def reaches(amp):
        spec = SignalSpec("meander", amp, frequency, 1.0 / frequency, plant.dt)
        tr = simulate(plant, spec.sample())
        return any(plant.limits_reached(x) for x in tr.x)

    lo, hi = 0.0, 1.0
    while not reaches(hi):
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise DatasetError("no amplitude reaches a limiter")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if reaches(mid):
            hi = mid
        else:
            lo = mid
    return hi


AMPLITUDE_FACTORS = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0)
FREQUENCY_FACTORS = (0.1, 0.3, 1.0, 3.0)


def default_grid(plant, kinds=("sine", "meander"), periods: float = 1.0, min_duration: float = 0.0) -> list[SignalSpec]:
    """Amplitudes around the limiter-reaching amplitude times frequencies around
    ``1 / (2 pi T)`` for the plant's characteristic time ``T``.

    Each signal lasts ``periods`` periods but at least ``min_duration * T``.
    """
    T = characteristic_time(plant)
    f0 = 1.0 / (2.0 * math.pi * T)
    a0 = reaching_amplitude(plant, f0 * FREQUENCY_FACTORS[0])
    grid = []
    for kind in kinds:
        for fa in AMPLITUDE_FACTORS:
            for ff in FREQUENCY_FACTORS:
                f = f0 * ff
                duration = max(periods / f, min_duration * T)
                grid.append(SignalSpec(kind, a0 * fa, f, duration, plant.dt))
    return grid


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    categories: list[str]
    provenance: dict = field(default_factory=dict)
    source: np.ndarray | None = None  # (signal index, step index) per pair

    def __len__(self) -> int:
        return len(self.inputs)

    def top_level(self) -> np.ndarray:
        return np.array([c.split(":")[0] for c in self.categories])

    def category_counts(self) -> dict[str, int]:
        top = self.top_level()
        return {NO_LIMIT: int(np.sum(top == NO_LIMIT)), LIMIT: int(np.sum(top == LIMIT))}

    def subcategory_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for c in self.categories:
            counts[c] = counts.get(c, 0) + 1
        return dict(sorted(counts.items()))

    def subset(self, idx, note: dict | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        prov = dict(self.provenance)
        if note:
            prov.setdefault("steps", [])
            prov["steps"] = prov["steps"] + [note]
        return Dataset(
            self.inputs[idx],
            self.targets[idx],
            [self.categories[i] for i in idx],
            prov,
            None if self.source is None else self.source[idx],
        )

    def to_csv(self, path) -> None:
        m, n = self.inputs.shape[1], self.targets.shape[1]
        header = ["category", *[f"in_{i}" for i in range(m)], *[f"out_{j}" for j in range(n)]]
        lines = [",".join(header)]
        for cat, xi, yi in zip(self.categories, self.inputs, self.targets):
            lines.append(",".join([cat, *(repr(float(v)) for v in xi), *(repr(float(v)) for v in yi)]))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(_sidecar(path), "w") as fh:
            json.dump(self.provenance, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
        m = sum(h.startswith("in_") for h in header)
        cats = [r[0] for r in rows]
        vals = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(len(rows), -1)
        prov = {}
        if os.path.exists(_sidecar(path)):
            with open(_sidecar(path)) as fh:
                prov = json.load(fh)
        return cls(vals[:, :m], vals[:, m:], cats, prov)


def _sidecar(path) -> str:
    return str(path) + ".json"


def plant_hash(plant) -> str:
    blob = json.dumps(plant.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def category_of(plant, x) -> str:
    ids = plant.limits_reached(x)
    if not ids:
        return NO_LIMIT
    return LIMIT + ":" + "+".join(str(i) for i in ids)


def extract_pairs(traj, mode: str = "state_vector", order: int | None = None):
    """Single-step pairs from one trajectory.

    state_vector:   ``[u_k, x_{k-1}] -> x_k``
    delayed_output: ``[u_k..u_{k-n+1}, y_{k-1}..y_{k-n}] -> y_k`` (zero-padded)
    """
    n_rows = len(traj)
    if mode == "state_vector":
        inputs = np.column_stack([traj.u[1:], traj.x[:-1]])
        targets = traj.x[1:].copy()
        return inputs, targets
    if mode != "delayed_output":
        raise DatasetError(f"unknown pair mode {mode!r}")
    n = order if order is not None else traj.x.shape[1]
    u = np.concatenate([np.zeros(n), traj.u])
    y = np.concatenate([np.zeros(n), traj.y])
    rows = []
    for k in range(1, n_rows):
        ku, ky = k + n, k + n
        rows.append(np.concatenate([u[ku - n + 1 : ku + 1][::-1], y[ky - n : ky][::-1]]))
    return np.array(rows), traj.y[1:, None].copy()


def controller_pairs(traj):
    """Pairs ``[r_k, x_{k-1}] -> u_k`` for cloning a recorded control law."""
    return np.column_stack([traj.r[1:], traj.x[:-1]]), traj.u[1:, None].copy()


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("LIMITRAIN_THREADS", "1")))
    except ValueError:
        return 1


def record_and_extract(plant, grid, mode: str = "state_vector", seed: int = 0) -> Dataset:
    """Simulate every signal from rest and pool the per-step pairs.

    Results are merged in signal order, so the dataset does not depend on how
    many workers simulated it.
    """
    grid = list(grid)
    signals = generate_signals(grid)

    def run(sig):
        return simulate(plant, sig)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        trajectories = list(pool.map(run, signals))

    xs, ys, cats, src = [], [], [], []
    for j, traj in enumerate(trajectories):
        x, y = extract_pairs(traj, mode)
        xs.append(x)
        ys.append(y)
        cats.extend(category_of(plant, s) for s in traj.x[1:])
        src.append(np.column_stack([np.full(len(x), j), np.arange(1, len(x) + 1)]))
    provenance = {
        "plant": plant.to_dict(),
        "plant_hash": plant_hash(plant),
        "signals": [asdict(s) for s in grid],
        "mode": mode,
        "seed": seed,
        "steps": [],
    }
    return Dataset(np.vstack(xs), np.vstack(ys), cats, provenance, np.vstack(src).astype(int))


def balance(dataset: Dataset, tolerance: float = 0.1, seed: int = 0) -> Dataset:
    """Subsample the majority top-level category to within ``tolerance`` of
    the minority count.
    """
    counts = dataset.category_counts()
    if min(counts.values()) == 0:
        empty = [k for k, v in counts.items() if v == 0]
        raise DatasetError(f"category {empty[0]} is empty; widen the signal grid")
    top = dataset.top_level()
    minority = min(counts, key=counts.get)
    majority = NO_LIMIT if minority == LIMIT else LIMIT
    limit = int(math.floor(counts[minority] * (1.0 + tolerance)))
    note = {"op": "balance", "tolerance": tolerance, "seed": seed}
    if counts[majority] <= limit:
        return dataset.subset(np.arange(len(dataset)), note)
    rng = np.random.default_rng(seed)
    maj_idx = np.flatnonzero(top == majority)
    keep = rng.choice(maj_idx, size=limit, replace=False)
    idx = np.sort(np.concatenate([np.flatnonzero(top == minority), keep]))
    return dataset.subset(idx, note)


def split(dataset: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    k = len(dataset)
    if k < 10:
        raise DatasetError("need at least 10 pairs to split")
    order = np.random.default_rng(seed).permutation(k)
    n_train = int(math.floor(ratio * k + 1e-9))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def regenerate(provenance: dict) -> Dataset:
    """Rebuild a dataset from its provenance record."""
    plant = plant_from_dict(provenance["plant"])
    if plant_hash(plant) != provenance["plant_hash"]:
        raise DatasetError("plant hash mismatch")
    grid = [SignalSpec(**s) for s in provenance["signals"]]
    ds = record_and_extract(plant, grid, provenance["mode"], provenance.get("seed", 0))
    for step in provenance.get("steps", []):
        if step["op"] == "balance":
            ds = balance(ds, step["tolerance"], step["seed"])
    return ds
