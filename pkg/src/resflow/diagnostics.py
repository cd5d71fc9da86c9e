"""Regularity checks for a trained flow and target-registration error."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, IoError, MissingCorrespondence
from .flow import apply_flow, flow_trajectories
from .geometry import PointCloud
from .network import LEAKY, ActivationKind, BlockParams, NetParams, lipschitz_constant


@dataclass
class DiagnosticsReport:
    C_theta: float
    bilipschitz_factor: float
    min_jacobian_det: float
    grid_spec: dict
    pattern_count_per_block: list
    max_expansion_ratio: float = math.nan
    min_expansion_ratio: float = math.nan
    lower_bound_warning: bool = False
    tre: float | None = None
    inverse_gap: float | None = None
    activation: str = "leaky_relu"
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        rows = [
            ("C_theta", repr(self.C_theta)),
            ("bilipschitz_factor", repr(self.bilipschitz_factor)),
            ("min_jacobian_det", repr(self.min_jacobian_det)),
            ("jacobian_positive", str(self.min_jacobian_det > 0)),
            ("grid_min", " ".join(repr(v) for v in self.grid_spec["min"])),
            ("grid_max", " ".join(repr(v) for v in self.grid_spec["max"])),
            ("grid_resolution", str(self.grid_spec["resolution"])),
            ("pattern_count_per_block", " ".join(str(c) for c in self.pattern_count_per_block)),
            ("max_expansion_ratio", repr(self.max_expansion_ratio)),
            ("min_expansion_ratio", repr(self.min_expansion_ratio)),
            ("lower_bound_warning", str(self.lower_bound_warning)),
            ("tre", "none" if self.tre is None else repr(self.tre)),
            ("inverse_gap", "none" if self.inverse_gap is None else repr(self.inverse_gap)),
            ("activation", self.activation),
        ]
        rows += [("note", n) for n in self.notes]
        return "".join(f"{k}: {v}\n" for k, v in rows)


@dataclass(eq=False)
class ActivationPattern:
    block_index: int
    signs: np.ndarray  # bool, True where the pre-activation is >= 0
    A: np.ndarray
    c: np.ndarray

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64) @ self.A.T + self.c

    def key(self) -> str:
        return "".join("+" if s else "-" for s in self.signs)


# ---------------------------------------------------------------------------
# polytopes
# ---------------------------------------------------------------------------

def _slopes(signs, act: ActivationKind):
    neg = act.alpha if act.name == "leaky_relu" else 0.0
    return np.where(signs, 1.0, neg)


def activation_pattern(x, theta: BlockParams, act: ActivationKind = LEAKY,
                       block_index: int = 0) -> ActivationPattern:
    """Sign pattern of the first layer at ``x`` and the affine map the block
    reduces to on that pattern's polytope."""
    if not act.piecewise_linear:
        raise InvalidConfig("activation patterns need a piecewise-linear activation")
    x = np.asarray(x, dtype=np.float64)
    signs = theta.W1 @ x + theta.b1 >= 0.0
    d = _slopes(signs, act)
    W3W2D = (theta.W3 @ theta.W2) * d
    A = W3W2D @ theta.W1
    c = W3W2D @ theta.b1 + theta.W3 @ theta.b2
    return ActivationPattern(block_index, signs, A, c)


def pattern_signs(points, theta: BlockParams) -> np.ndarray:
    """(n, m) boolean sign matrix for many points at once."""
    return np.atleast_2d(points) @ theta.W1.T + theta.b1 >= 0.0


def polytope_census(theta: BlockParams, probes):
    """Number of distinct sign patterns realized by ``probes`` and a map
    pattern string -> probe count."""
    S = pattern_signs(np.asarray(probes, dtype=np.float64), theta)
    if len(S) == 0:
        raise ValueError("probe set is empty")
    uniq, counts = np.unique(S, axis=0, return_counts=True)
    table = {"".join("+" if s else "-" for s in row): int(c) for row, c in zip(uniq, counts)}
    return len(uniq), table


# ---------------------------------------------------------------------------
# Jacobians and expansion
# ---------------------------------------------------------------------------

def grid_points(lo, hi, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def jacobian_grid_check(params: NetParams, bbox, resolution: int = 16, h: float | None = None):
    """Central-difference Jacobian determinant of the flow map on a
    ``resolution``^3 grid; returns ``(min_det, det_field)``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if resolution < 2:
        raise InvalidConfig("resolution must be >= 2")
    cell = float(np.min((hi - lo) / (resolution - 1)))
    if h is None:
        h = 1e-4 * float(np.linalg.norm(hi - lo))
    if not 0 < h <= 0.1 * cell:
        raise InvalidConfig(f"h={h} must lie in (0, 0.1 * cell size = {0.1 * cell}]")
    P = grid_points(lo, hi, resolution)
    n = len(P)
    offs = np.concatenate([P + h * e for e in np.eye(3)] + [P - h * e for e in np.eye(3)])
    Y = apply_flow(offs, params)
    J = np.empty((n, 3, 3))
    for k in range(3):
        J[:, :, k] = (Y[k * n:(k + 1) * n] - Y[(3 + k) * n:(4 + k) * n]) / (2.0 * h)
    det = np.linalg.det(J).reshape(resolution, resolution, resolution)
    return float(det.min()), det


def expansion_check(params: NetParams, points, n_pairs: int = 2000, seed: int = 0,
                    min_separation: float = 1e-6):
    """Compare sampled ratios |Phi^l(x) - Phi^l(y)| / |x - y| with the bound
    exp(l * dt * C).  Returns a dict with per-step maxima, the bound, the
    number of violations and the smallest endpoint ratio."""
    P = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(P), n_pairs)
    j = rng.integers(0, len(P), n_pairs)
    d0 = np.linalg.norm(P[i] - P[j], axis=1)
    keep = d0 > min_separation
    i, j, d0 = i[keep], j[keep], d0[keep]
    traj = flow_trajectories(P, params)
    C = lipschitz_constant(params)
    steps = np.arange(1, params.L + 1)
    bound = np.exp(steps * params.dt * C)
    max_ratio = np.empty(params.L)
    violations = 0
    for l in steps:
        r = np.linalg.norm(traj[l][i] - traj[l][j], axis=1) / d0
        max_ratio[l - 1] = r.max() if len(r) else 0.0
        violations += int(np.sum(r > bound[l - 1]))
    end = np.linalg.norm(traj[-1][i] - traj[-1][j], axis=1) / d0
    return {
        "C_theta": C,
        "bound": bound,
        "max_ratio": max_ratio,
        "violations": violations,
        "min_ratio": float(end.min()) if len(end) else math.nan,
        "max_endpoint_ratio": float(end.max()) if len(end) else math.nan,
    }


# ---------------------------------------------------------------------------
# correspondence errors
# ---------------------------------------------------------------------------

def resolve_correspondence(deformed: PointCloud, target: PointCloud, correspondence=None):
    """Target index for every deformed point.

    ``correspondence`` may be an index array (negative = missing) or a dict;
    when omitted, matching labels on both clouds are used.
    """
    n = len(deformed)
    if correspondence is None:
        if deformed.labels is None or target.labels is None:
            raise MissingCorrespondence("no correspondence given and clouds carry no labels")
        lookup = {int(l): k for k, l in enumerate(target.labels)}
        idx = np.array([lookup.get(int(l), -1) for l in deformed.labels], dtype=np.int64)
    elif isinstance(correspondence, dict):
        idx = np.array([correspondence.get(i, -1) for i in range(n)], dtype=np.int64)
    else:
        idx = np.asarray(correspondence, dtype=np.int64).ravel()
        if len(idx) != n:
            raise MissingCorrespondence(f"{len(idx)} correspondences for {n} points")
    bad = (idx < 0) | (idx >= len(target))
    if bad.any():
        raise MissingCorrespondence(f"{int(bad.sum())} points lack a valid correspondence")
    return idx


def tre(deformed, target, correspondence=None) -> float:
    """Root-mean-square distance between corresponding points."""
    d = deformed if isinstance(deformed, PointCloud) else PointCloud(deformed, check=False)
    t = target if isinstance(target, PointCloud) else PointCloud(target, check=False)
    idx = resolve_correspondence(d, t, correspondence)
    diff = d.points - t.points[idx]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def read_correspondence(path) -> np.ndarray:
    """One target index per line (``j``) or ``i j`` pairs; ``#`` comments."""
    pairs = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    seq = []
    for lineno, line in enumerate(lines, 1):
        tok = line.split("#", 1)[0].split()
        if not tok:
            continue
        try:
            vals = [int(t) for t in tok]
        except ValueError:
            raise MissingCorrespondence(f"{path}:{lineno}: not an integer index") from None
        if len(vals) == 1:
            seq.append(vals[0])
        elif len(vals) == 2:
            pairs[vals[0]] = vals[1]
        else:
            raise MissingCorrespondence(f"{path}:{lineno}: expected 'j' or 'i j'")
    if seq and pairs:
        raise MissingCorrespondence(f"{path}: mixes single-index and pair lines")
    if pairs:
        n = max(pairs) + 1
        return np.array([pairs.get(i, -1) for i in range(n)], dtype=np.int64)
    if not seq:
        raise MissingCorrespondence(f"{path}: empty correspondence file")
    return np.asarray(seq, dtype=np.int64)


# ---------------------------------------------------------------------------
# inverse consistency
# ---------------------------------------------------------------------------

def inverse_gap(forward, backward, points) -> float:
    """Mean |Phi_BA(Phi_AB(x)) - x| over ``points``, scene units."""
    x = np.asarray(points, dtype=np.float64)
    back = backward.transform_points(forward.transform_points(x))
    return float(np.mean(np.linalg.norm(back - x, axis=1)))


def inverse_consistency(q_S, q_T, cfg) -> float:
    """Train both directions with the same config and measure the round trip."""
    from .solver import register

    ab = register(q_S, q_T, cfg)
    ba = register(q_T, q_S, cfg)
    pts = q_S.points if isinstance(q_S, PointCloud) else q_S
    return inverse_gap(ab, ba, pts)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

def probe_bbox(*clouds, inflate: float = 1.2):
    allp = np.vstack([np.asarray(c, dtype=np.float64) for c in clouds])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * inflate * (hi - lo)
    return mid - half, mid + half


def diagnose(outcome, resolution: int = 16, n_pairs: int = 2000, seed: int = 0,
             h: float | None = None) -> DiagnosticsReport:
    """Run every regularity check on a registration outcome (normalized frame).

    Probes are the pre-aligned source points plus a ``resolution``^3 grid over
    the joint bounding box inflated by 1.2.
    """
    params = outcome.theta_star
    X0 = outcome.final_flow.states[0]
    lo, hi = probe_bbox(X0, outcome.target_normalized.points)
    probes = np.vstack([X0, grid_points(lo, hi, resolution)])
    min_det, _ = jacobian_grid_check(params, (lo, hi), resolution, h)
    exp = expansion_check(params, probes, n_pairs, seed)
    C = exp["C_theta"]
    counts = [polytope_census(b, probes)[0] for b in params.blocks]
    notes = []
    if params.activation.name == "tanh":
        notes.append("tanh activation: bound holds (1-Lipschitz) but the field is not piecewise affine")
    lower = math.exp(-C)
    warn = bool(exp["min_ratio"] < lower)
    if warn:
        notes.append(f"sampled contraction {exp['min_ratio']:.3g} below exp(-C) = {lower:.3g}")
    t = None
    if outcome.source.labels is not None and outcome.target.labels is not None:
        t = tre(outcome.deformed_source(), outcome.target)
    return DiagnosticsReport(
        C_theta=C, bilipschitz_factor=math.exp(C), min_jacobian_det=min_det,
        grid_spec={"min": lo.tolist(), "max": hi.tolist(), "resolution": resolution},
        pattern_count_per_block=counts,
        max_expansion_ratio=float(exp["max_endpoint_ratio"]),
        min_expansion_ratio=float(exp["min_ratio"]), lower_bound_warning=warn, tre=t,
        activation=params.activation.name, notes=notes,
    )


def write_det_csv(det, lo, hi, path) -> None:
    res = det.shape[0]
    P = grid_points(lo, hi, res)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "det"])
            for p, d in zip(P, det.ravel()):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(d))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
