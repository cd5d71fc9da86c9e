"""Building-block parameters and the per-block velocity field.

One block maps R^3 -> R^3 as ``W3 @ (W2 @ act(W1 @ x + b1) + b2)``; the third
layer carries no bias.  A stack of L blocks with time step 1/L is a
``NetParams``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, IoError, ParseError

LAYERS = ("W1", "b1", "W2", "b2", "W3")


@dataclass(frozen=True)
class ActivationKind:
    name: str = "leaky_relu"
    alpha: float = 0.01

    def __post_init__(self):
        aliases = {"leaky": "leaky_relu", "leakyrelu": "leaky_relu"}
        name = aliases.get(self.name.lower(), self.name.lower())
        if name not in ("relu", "leaky_relu", "tanh"):
            raise InvalidConfig(f"unknown activation {self.name!r}")
        if name == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise InvalidConfig(f"leaky slope must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "name", name)

    @property
    def piecewise_linear(self) -> bool:
        return self.name != "tanh"

    def __call__(self, z):
        if self.name == "relu":
            return np.maximum(z, 0.0)
        if self.name == "leaky_relu":
            return np.where(z >= 0.0, z, self.alpha * z)
        return np.tanh(z)

    def derivative(self, z):
        # at exactly z == 0 the negative-side slope is used (0 for relu, alpha for leaky)
        if self.name == "relu":
            return (z > 0.0).astype(np.float64)
        if self.name == "leaky_relu":
            return np.where(z > 0.0, 1.0, self.alpha)
        t = np.tanh(z)
        return 1.0 - t * t


RELU = ActivationKind("relu")
LEAKY = ActivationKind("leaky_relu", 0.01)
TANH = ActivationKind("tanh")


@dataclass(frozen=True, eq=False)
class BlockParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray

    def __post_init__(self):
        for name in LAYERS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m = self.W1.shape[0]
        expected = {"W1": (m, 3), "b1": (m,), "W2": (m, m), "b2": (m,), "W3": (3, m)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape} for width {m}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} has non-finite entries")

    @property
    def m(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, m: int) -> BlockParams:
        return cls(np.zeros((m, 3)), np.zeros(m), np.zeros((m, m)), np.zeros(m), np.zeros((3, m)))

    def arrays(self):
        return tuple(getattr(self, k) for k in LAYERS)


@dataclass(frozen=True, eq=False)
class NetParams:
    blocks: tuple
    activation: ActivationKind = field(default=LEAKY)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 1:
            raise InvalidConfig("need at least one block")
        widths = {b.m for b in blocks}
        if len(widths) != 1:
            raise InvalidConfig(f"blocks disagree on width: {sorted(widths)}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.blocks[0].m

    @property
    def dt(self) -> float:
        return 1.0 / self.L

    @classmethod
    def zeros(cls, L: int, m: int, activation: ActivationKind = LEAKY) -> NetParams:
        if L < 1 or m < 1:
            raise InvalidConfig("L and m must be >= 1")
        return cls(tuple(BlockParams.zeros(m) for _ in range(L)), activation)

    def replace_blocks(self, blocks) -> NetParams:
        return NetParams(tuple(blocks), self.activation)

    def n_parameters(self) -> int:
        m = self.width
        return self.L * (3 * m + m + m * m + m + 3 * m)


def xavier_init(L: int, m: int, seed: int, activation: ActivationKind = LEAKY) -> NetParams:
    """Uniform Xavier weights, zero biases; deterministic for a given seed."""
    if L < 1 or m < 1:
        raise InvalidConfig(f"L and m must be >= 1, got L={L}, m={m}")
    rng = np.random.default_rng(seed)

    def uni(fan_out, fan_in):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_out, fan_in))

    blocks = []
    for _ in range(L):
        W1 = uni(m, 3)
        W2 = uni(m, m)
        W3 = uni(3, m)
        blocks.append(BlockParams(W1, np.zeros(m), W2, np.zeros(m), W3))
    return NetParams(tuple(blocks), activation)


def block_forward(X, theta: BlockParams, act: ActivationKind):
    """Vectorized block over rows of X; returns ``(V, Z1, H, Z2)`` so the
    backward pass can reuse the intermediates."""
    Z1 = X @ theta.W1.T + theta.b1
    H = act(Z1)
    Z2 = H @ theta.W2.T + theta.b2
    V = Z2 @ theta.W3.T
    return V, Z1, H, Z2


def block_velocity(x, theta: BlockParams, act: ActivationKind = LEAKY):
    """Velocity of one block at a point (shape (3,)) or at rows of an (n, 3) array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    V = block_forward(np.atleast_2d(x), theta, act)[0]
    return V[0] if single else V


def spectral_norm(W, max_iters: int = 500, tol: float = 1e-8) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    Stops once the Rayleigh-quotient residual |G v - mu v| is below
    ``tol * mu``, which bounds the relative eigenvalue error by ``tol`` for a
    symmetric G.  Starts from a fixed pseudo-random vector; falls back to a
    dense SVD when the iteration has not settled within ``max_iters``.
    """
    W = np.asarray(W, dtype=np.float64)
    if not W.any():
        return 0.0
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    v = np.random.default_rng(12345).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iters):
        w = G @ v
        mu = float(v @ w)
        if mu <= 0.0:
            break
        if np.linalg.norm(w - mu * v) <= tol * mu:
            return float(np.sqrt(mu))
        v = w / np.linalg.norm(w)
    return float(np.linalg.norm(W, 2))


def block_lipschitz_bound(theta: BlockParams) -> float:
    """Product of layer operator norms; bounds the block's Lipschitz constant
    for any 1-Lipschitz activation."""
    return spectral_norm(theta.W3) * spectral_norm(theta.W2) * spectral_norm(theta.W1)


def lipschitz_constant(params: NetParams) -> float:
    """Max over blocks of ``block_lipschitz_bound``."""
    return max(block_lipschitz_bound(b) for b in params.blocks)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def params_to_dict(params: NetParams) -> dict:
    return {
        "L": params.L,
        "m": params.width,
        "dt": params.dt,
        "activation": params.activation.name,
        "alpha": params.activation.alpha,
        "blocks": [{k: getattr(b, k).tolist() for k in LAYERS} for b in params.blocks],
    }


def params_from_dict(d: dict) -> NetParams:
    try:
        act = ActivationKind(d["activation"], float(d.get("alpha", 0.01)))
        blocks = [BlockParams(**{k: np.asarray(blk[k], dtype=np.float64) for k in LAYERS})
                  for blk in d["blocks"]]
        params = NetParams(tuple(blocks), act)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed parameter document: {exc}") from exc
    if params.L != int(d["L"]) or params.width != int(d["m"]):
        raise ParseError("parameter document header disagrees with its blocks")
    return params


def save_params(params: NetParams, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(params_to_dict(params), fh)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> NetParams:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return params_from_dict(d)
