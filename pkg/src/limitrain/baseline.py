"""Discrete LQR baseline for the limiter-free hydraulic drive."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .plant import HydraulicParams, discretize


@dataclass
class LtiStateSpace:
    A: np.ndarray  # (n, n), discrete
    B: np.ndarray  # (n, m)
    dt: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B[:, None]
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ValueError(f"inconsistent dimensions A{self.A.shape} B{self.B.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite system matrices")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def step(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, float) + self.B @ np.atleast_1d(np.asarray(u, float))


def linearize_hydraulic(params: HydraulicParams | None = None, mode: str = "zoh") -> LtiStateSpace:
    """Hydraulic drive with both limiters removed, sampled at ``params.dt``."""
    params = params or HydraulicParams()
    params.validate()
    a, b = params.continuous()
    ad, bd = discretize(a, b, params.dt, mode)
    return LtiStateSpace(ad, bd, params.dt)


def scaled(sys: LtiStateSpace, scale) -> LtiStateSpace:
    """Same system in coordinates ``z = x / scale``."""
    s = np.asarray(scale, dtype=float)
    return LtiStateSpace(sys.A * s[None, :] / s[:, None], sys.B / s[:, None], sys.dt)


@dataclass
class LqrSolution:
    P: np.ndarray
    K: np.ndarray  # (m, n); control u = -K x
    residual: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "K": self.K.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
        }


class LqrError(ArithmeticError):
    pass


def riccati_map(sys: LtiStateSpace, Q, R, P) -> np.ndarray:
    A, B = sys.A, sys.B
    bp = B.T @ P
    return Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + bp @ B, bp @ A)


def solve_lqr(sys: LtiStateSpace, Q=None, R=None, tol: float = 1e-12, max_iter: int = 200_000) -> LqrSolution:
    """Fixed-point iteration of the discrete Riccati map from ``P = Q``.

    Stops once the largest entry change falls below ``tol`` (relative to
    ``max(1, |P|max)``).
    """
    n, m = sys.n, sys.B.shape[1]
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError("Q or R has the wrong shape")
    R = 0.5 * (R + R.T)
    if np.any(np.linalg.eigvalsh(R) <= 0.0):
        raise ValueError("R must be positive definite")
    Q = 0.5 * (Q + Q.T)
    if np.any(np.linalg.eigvalsh(Q) < -1e-12 * max(1.0, np.abs(Q).max())):
        raise ValueError("Q must be positive semidefinite")

    P = Q.copy()
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = riccati_map(sys, Q, R, P)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise LqrError("Riccati iteration diverged")
        delta = np.abs(P_next - P).max()
        P = P_next
        if delta < tol * max(1.0, np.abs(P).max()):
            break
    else:
        raise LqrError(f"Riccati iteration did not converge in {max_iter} iterations")
    B = sys.B
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ sys.A)
    residual = float(np.abs(P - riccati_map(sys, Q, R, P)).max())
    return LqrSolution(P, K, residual, it)


def export_gain(solution: LqrSolution, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(",".join(f"k{i}" for i in range(solution.K.shape[1])) + "\n")
        for row in solution.K:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(solution.to_dict(), fh, indent=1)
            fh.write("\n")


def load_gain(csv_path) -> np.ndarray:
    with open(csv_path) as fh:
        fh.readline()
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


class LqrController:
    """State feedback ``u = -K (x - x_ref)`` with the reference on one coordinate."""

    def __init__(self, K, reg_index: int = 0):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.reg_index = reg_index

    def __call__(self, x, r: float = 0.0) -> float:
        e = np.asarray(x, dtype=float).copy()
        e[self.reg_index] -= r
        return float(-(self.K @ e)[0])
