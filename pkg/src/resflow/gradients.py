"""Reverse-mode gradient of the total loss through the unrolled Euler flow.

Conventions (fixed so results are reproducible):

* activation derivative at a pre-activation of exactly 0 takes the negative
  side: 0 for relu, alpha for leaky relu;
* Chamfer gradients hold the nearest-neighbour assignment fixed, ties going
  to the lowest index;
* the entropic-OT gradient holds the converged transport plan fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient
from .flow import FlowResult, _integrate, flow_forward
from .geometry import PointCloud
from .network import LAYERS, BlockParams, NetParams
from .objective import LossConfig, LossReport, assemble_report, data_term_and_grad, total_loss


@dataclass(frozen=True, eq=False)
class NetGradient:
    """Per-block gradients, laid out exactly like ``NetParams.blocks``."""

    blocks: tuple

    def arrays(self):
        for b in self.blocks:
            yield from b.arrays()

    def max_abs(self) -> float:
        return max(float(np.abs(a).max()) for a in self.arrays())

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def block_stats(self):
        """(max |g|, norm) per block."""
        return [(max(float(np.abs(a).max()) for a in b.arrays()),
                 float(np.sqrt(sum(float(np.sum(a * a)) for a in b.arrays()))))
                for b in self.blocks]


def _pts(c):
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)


def evaluate_loss(q_S, q_T, params: NetParams, cfg: LossConfig) -> LossReport:
    """Forward pass and loss, no gradient."""
    fr = flow_forward(_pts(q_S), params)
    return total_loss(fr.endpoint, _pts(q_T), fr, cfg)


def loss_gradient(q_S, q_T, params: NetParams, cfg: LossConfig, return_flow: bool = False):
    """Loss report and exact gradient with respect to every parameter.

    With ``return_flow`` the forward ``FlowResult`` is returned as a third
    element (saves the solver a second forward pass).
    """
    X0 = _pts(q_S)
    y = _pts(q_T)
    act, dt = params.activation, params.dt
    states, vels, cache = _integrate(X0, params, keep_cache=True)
    fr = FlowResult(states, vels, dt)

    wD = cfg.data_weight
    if wD != 0.0:
        D, gD = data_term_and_grad(states[-1], y, cfg)
        adj = wD * gD
    else:
        D, adj = 0.0, np.zeros_like(X0)
    report = assemble_report(D, fr, cfg)

    wk = cfg.kinetic_scale * (dt if cfg.kinetic_weighting == "riemann" else 1.0)
    grads = [None] * params.L
    for l in range(params.L - 1, -1, -1):
        theta = params.blocks[l]
        Z1, H, Z2 = cache[l]
        gV = dt * adj + wk * vels[l]
        dW3 = gV.T @ Z2
        gZ2 = gV @ theta.W3
        db2 = gZ2.sum(axis=0)
        dW2 = gZ2.T @ H
        gZ1 = (gZ2 @ theta.W2) * act.derivative(Z1)
        db1 = gZ1.sum(axis=0)
        dW1 = gZ1.T @ states[l]
        adj = adj + gZ1 @ theta.W1
        for name, g in zip(LAYERS, (dW1, db1, dW2, db2, dW3)):
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite {name} gradient in block {l + 1}")
        grads[l] = BlockParams(dW1, db1, dW2, db2, dW3)

    grad = NetGradient(tuple(grads))
    if return_flow:
        return report, grad, fr
    return report, grad


def finite_difference_gradient(q_S, q_T, params: NetParams, cfg: LossConfig,
                               h: float = 1e-5) -> NetGradient:
    """Central differences, one scalar at a time.  Test oracle for tiny
    instances only: costs two full loss evaluations per parameter."""
    if not h > 0:
        raise ValueError("h must be > 0")
    X0, y = _pts(q_S), _pts(q_T)
    base = [list(b.arrays()) for b in params.blocks]
    out = []
    for l in range(params.L):
        g_block = []
        for k in range(len(LAYERS)):
            arr = base[l][k]
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                vals = []
                for sgn in (1.0, -1.0):
                    pert = [a.copy() for a in base[l]]
                    pert[k][idx] += sgn * h
                    blocks = list(params.blocks)
                    blocks[l] = BlockParams(*pert)
                    vals.append(evaluate_loss(X0, y, params.replace_blocks(blocks), cfg).total)
                g[idx] = (vals[0] - vals[1]) / (2.0 * h)
            g_block.append(g)
        out.append(BlockParams(*g_block))
    return NetGradient(tuple(out))


def relative_error(analytic: NetGradient, numeric: NetGradient, floor: float = 1e-8) -> float:
    """Max over entries with |g| > floor of |g - g_fd| / |g|."""
    a, n = analytic.flat(), numeric.flat()
    mask = np.abs(a) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / np.abs(a[mask])))
