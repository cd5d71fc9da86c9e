"""Forward Euler integration through the stack of blocks."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, IoError, NonFiniteState
from .geometry import PointCloud, save_pointcloud
from .network import NetParams, block_forward


@dataclass(frozen=True, eq=False)
class FlowResult:
    """States q^0..q^L and raw (pre-dt) velocities of one forward pass.

    ``states[l + 1] == states[l] + dt * velocities[l]`` holds entry-wise.
    """

    states: np.ndarray      # (L + 1, n, 3)
    velocities: np.ndarray  # (L, n, 3)
    dt: float
    faces: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def L(self) -> int:
        return len(self.velocities)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def shapes(self) -> list[PointCloud]:
        return [self.shape(l) for l in range(self.L + 1)]

    def shape(self, l: int) -> PointCloud:
        return PointCloud(self.states[l], self.faces, self.labels, check=False)


def _integrate(X, params: NetParams, keep_cache: bool = False):
    X = np.asarray(X, dtype=np.float64)
    L, dt, act = params.L, params.dt, params.activation
    states = np.empty((L + 1,) + X.shape)
    vels = np.empty((L,) + X.shape)
    states[0] = X
    cache = [] if keep_cache else None
    for l, theta in enumerate(params.blocks):
        V, Z1, H, Z2 = block_forward(states[l], theta, act)
        nxt = states[l] + dt * V
        if not np.isfinite(nxt).all():
            raise NonFiniteState(f"non-finite coordinates after block {l + 1}")
        vels[l] = V
        states[l + 1] = nxt
        if keep_cache:
            cache.append((Z1, H, Z2))
    return states, vels, cache


def flow_forward(q0, params: NetParams) -> FlowResult:
    """Push a cloud through all L blocks, keeping every intermediate shape."""
    if isinstance(q0, PointCloud):
        states, vels, _ = _integrate(q0.points, params)
        return FlowResult(states, vels, params.dt, q0.faces, q0.labels)
    states, vels, _ = _integrate(np.atleast_2d(q0), params)
    return FlowResult(states, vels, params.dt)


def apply_flow(points, params: NetParams) -> np.ndarray:
    """Endpoint of the flow for arbitrary points of R^3 (same code path as
    ``flow_forward``)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    states, _, _ = _integrate(np.atleast_2d(pts), params)
    return states[-1][0] if single else states[-1]


def flow_trajectories(points, params: NetParams) -> np.ndarray:
    """All intermediate positions Phi^0..Phi^L of arbitrary points, (L+1, n, 3)."""
    return _integrate(np.atleast_2d(np.asarray(points, dtype=np.float64)), params)[0]


def refine_steps(params: NetParams, factor: int) -> NetParams:
    """Repeat every block ``factor`` times: the same piecewise-constant-in-time
    field integrated with a ``factor``-times finer Euler step."""
    if int(factor) != factor or factor < 1:
        raise InvalidConfig(f"refinement factor must be a positive integer, got {factor}")
    if factor == 1:
        return params
    return params.replace_blocks([b for b in params.blocks for _ in range(int(factor))])


def export_frames(frames, outdir, fmt: str = "obj", prefix: str = "frame") -> list[str]:
    """Write one mesh file per frame as ``frame_000.obj`` ... and return the paths."""
    try:
        os.makedirs(outdir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {outdir}: {exc}") from exc
    paths = []
    for l, shape in enumerate(frames):
        p = os.path.join(outdir, f"{prefix}_{l:03d}.{fmt}")
        save_pointcloud(shape, p, fmt)
        paths.append(p)
    return paths


def write_velocity_csv(fr: FlowResult, path, scale: float = 1.0) -> None:
    """Per-point velocity magnitude for every block; one row per point."""
    mags = np.linalg.norm(fr.velocities, axis=2) * scale  # (L, n)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point"] + [f"block_{l + 1}" for l in range(fr.L)])
            for i in range(mags.shape[1]):
                w.writerow([i] + [repr(float(v)) for v in mags[:, i]])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
