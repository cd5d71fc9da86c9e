"""ADAM training of the block stack and extraction of the geodesic path."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import Divergence, InvalidConfig, IoError, NonFiniteGradient, NonFiniteState, ParseError
from .flow import FlowResult, apply_flow, flow_forward
from .geometry import NormalizationRecord, PointCloud, RigidTransform, normalize, rigid_icp
from .gradients import NetGradient, loss_gradient
from .network import ActivationKind, BlockParams, NetParams, xavier_init
from .objective import LossConfig, LossReport

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig(LossConfig):
    L: int = 10
    m: int = 900
    eta: float = 1e-5
    epochs: int = 2000
    activation: str = "leaky_relu"
    alpha: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    normalize: bool = True
    rigid_prealign: bool = True
    icp_max_iters: int = 50
    icp_tol: float = 1e-10
    patience: int = 200
    min_improvement: float = 1e-8

    def __post_init__(self):
        super().__post_init__()
        if self.L < 1 or self.m < 1:
            raise InvalidConfig("L and m must be >= 1")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not (self.eta > 0 and self.adam_eps > 0 and self.icp_tol > 0 and self.sinkhorn_tol > 0):
            raise InvalidConfig("rates and tolerances must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidConfig("ADAM betas must lie in [0, 1)")
        self.act  # validates name/alpha

    @property
    def act(self) -> ActivationKind:
        return ActivationKind(self.activation, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key=value`` lines into typed overrides for RegistrationConfig."""
    types = {f.name: f.type for f in fields(RegistrationConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ParseError(f"config line {lineno}: unknown key {key!r}")
        t = types[key]
        try:
            if t in ("bool", bool):
                out[key] = _BOOL[val.lower()]
            elif t in ("int", int):
                out[key] = int(val)
            elif t in ("float", float):
                out[key] = float(val)
            else:
                out[key] = val
        except (KeyError, ValueError):
            raise ParseError(f"config line {lineno}: bad value {val!r} for {key}") from None
    return out


def read_config(path) -> dict:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def format_config(cfg: RegistrationConfig) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                   for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    m1: tuple
    m2: tuple
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetParams) -> AdamState:
        z = tuple(tuple(np.zeros_like(a) for a in b.arrays()) for b in params.blocks)
        z2 = tuple(tuple(np.zeros_like(a) for a in b.arrays()) for b in params.blocks)
        return cls(z, z2, 0)


def adam_step(params: NetParams, grad: NetGradient, state: AdamState, eta: float = 1e-5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM update; inputs are left untouched."""
    for a in grad.arrays():
        if not np.isfinite(a).all():
            raise NonFiniteGradient("refusing ADAM step on a non-finite gradient")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_blocks, new_m1, new_m2 = [], [], []
    for pb, gb, m1b, m2b in zip(params.blocks, grad.blocks, state.m1, state.m2):
        arrs, mm1, mm2 = [], [], []
        for p, g, m1, m2 in zip(pb.arrays(), gb.arrays(), m1b, m2b):
            m1 = beta1 * m1 + (1.0 - beta1) * g
            m2 = beta2 * m2 + (1.0 - beta2) * (g * g)
            arrs.append(p - eta * (m1 / bc1) / (np.sqrt(m2 / bc2) + eps))
            mm1.append(m1)
            mm2.append(m2)
        new_blocks.append(BlockParams(*arrs))
        new_m1.append(tuple(mm1))
        new_m2.append(tuple(mm2))
    return params.replace_blocks(new_blocks), AdamState(tuple(new_m1), tuple(new_m2), t)


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RegistrationOutcome:
    theta_star: NetParams
    final_flow: FlowResult
    history: list
    wall_time: float
    best_epoch: int
    config: RegistrationConfig
    normalization: NormalizationRecord
    rigid: RigidTransform | None
    source: PointCloud
    target: PointCloud
    target_normalized: PointCloud
    eta_final: float
    wall_ms: list = field(default_factory=list)
    grad_stats: list = field(default_factory=list)
    theta_init: NetParams | None = None

    @property
    def best_report(self) -> LossReport:
        return self.history[self.best_epoch]

    def transform_points(self, points) -> np.ndarray:
        """The full scene-unit map: normalize, rigid pre-alignment, flow, denormalize."""
        x = self.normalization.apply(points)
        if self.rigid is not None:
            x = self.rigid.apply(x)
        return self.normalization.invert(apply_flow(x, self.theta_star))

    def deformed_source(self) -> PointCloud:
        """Phi^L applied to the source, in scene units."""
        return self.source.with_points(self.normalization.invert(self.final_flow.endpoint))


def _clouds(c) -> PointCloud:
    return c if isinstance(c, PointCloud) else PointCloud(c)


def register(q_S, q_T, cfg: RegistrationConfig, callback=None) -> RegistrationOutcome:
    """Fit the block stack so the flow carries ``q_S`` onto ``q_T``.

    Joint normalization (optional), rigid ICP of the source onto the target,
    Xavier initialization, then full-batch ADAM epochs.  Returns the iterate
    with the lowest total loss.  ``callback(epoch, report)`` is called after
    every evaluated epoch.
    """
    t_start = time.perf_counter()
    q_S, q_T = _clouds(q_S), _clouds(q_T)
    if cfg.normalize:
        src_n, tgt_n, rec = normalize(q_S, q_T)
    else:
        src_n, tgt_n, rec = q_S, q_T, NormalizationRecord.identity()
    rigid = None
    X0 = src_n.points
    if cfg.rigid_prealign:
        rigid = rigid_icp(src_n, tgt_n, cfg.icp_max_iters, cfg.icp_tol)
        X0 = rigid.apply(X0)
    Y = tgt_n.points

    params = theta_init = xavier_init(cfg.L, cfg.m, cfg.seed, cfg.act)
    state = AdamState.zeros_like(params)
    eta = cfg.eta
    halved = False
    prev = None  # (params, grad, state) that produced the current params

    history, wall_ms, gstats = [], [], []
    best = None
    best_total = math.inf
    running_best = []
    e = 0
    while e < cfg.epochs:
        t0 = time.perf_counter()
        try:
            rep, grad, fr = loss_gradient(X0, Y, params, cfg, return_flow=True)
            if not math.isfinite(rep.total):
                raise NonFiniteState("non-finite loss")
        except (NonFiniteState, NonFiniteGradient) as exc:
            if halved or prev is None:
                raise Divergence(f"epoch {e}: {exc}") from exc
            eta *= 0.5
            halved = True
            log.warning("epoch %d: %s; halving learning rate to %g", e, exc, eta)
            params, state = adam_step(prev[0], prev[1], prev[2], eta, cfg.adam_beta1,
                                      cfg.adam_beta2, cfg.adam_eps)
            continue
        history.append(rep)
        gstats.append((grad.max_abs(), grad.norm()))
        if rep.total < best_total:
            best_total = rep.total
            best = (params, fr, e)
        running_best.append(best_total)
        if callback is not None:
            callback(e, rep)
        wall_ms.append(1e3 * (time.perf_counter() - t0))
        if e >= cfg.patience and running_best[e - cfg.patience] - best_total < cfg.min_improvement:
            log.info("early stop at epoch %d", e)
            break
        prev = (params, grad, state)
        params, state = adam_step(params, grad, state, eta, cfg.adam_beta1, cfg.adam_beta2,
                                  cfg.adam_eps)
        e += 1

    theta, fr, best_epoch = best
    final = FlowResult(fr.states, fr.velocities, fr.dt, q_S.faces, q_S.labels)
    return RegistrationOutcome(
        theta_star=theta, final_flow=final, history=history,
        wall_time=time.perf_counter() - t_start, best_epoch=best_epoch, config=cfg,
        normalization=rec, rigid=rigid, source=q_S, target=q_T, target_normalized=tgt_n,
        eta_final=eta, wall_ms=wall_ms, grad_stats=gstats, theta_init=theta_init,
    )


def geodesic_path(outcome: RegistrationOutcome) -> list[PointCloud]:
    """Frames q^0..q^L of the trained flow in scene units.

    Frame 0 is the source itself (or its rigidly pre-aligned copy when ICP
    ran); frame L coincides with ``outcome.deformed_source()`` bit for bit.
    """
    states = outcome.final_flow.states
    rec = outcome.normalization
    first = outcome.source.points if outcome.rigid is None else rec.invert(states[0])
    frames = [first] + [rec.invert(s) for s in states[1:]]
    return [outcome.source.with_points(f) for f in frames]


def path_energy(outcome_or_flow) -> float:
    """Discrete length sum_l dt * sqrt(sum_i |v_i^l|^2) of the path."""
    fr = outcome_or_flow.final_flow if isinstance(outcome_or_flow, RegistrationOutcome) else outcome_or_flow
    return math.fsum(fr.dt * math.sqrt(float(np.sum(v * v))) for v in fr.velocities)
