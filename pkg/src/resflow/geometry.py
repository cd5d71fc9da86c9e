"""Point clouds, ASCII mesh I/O, joint normalization and rigid ICP."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, EmptyCloud, IoError, ParseError

FORMATS = ("obj", "ply", "xyz")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """n distinct 3D points, optional triangles and per-point labels.

    Construction validates everything; pass ``check=False`` only for
    intermediate states produced internally (flow frames), where distinctness
    is a property of the map rather than something to enforce.
    """

    points: np.ndarray
    faces: np.ndarray | None = None
    labels: np.ndarray | None = None
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.size == 0:
            raise EmptyCloud("point cloud has no points")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.faces is not None:
            faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
            if len(faces) and (faces.min() < 0 or faces.max() >= n):
                raise ParseError(f"face index out of range for {n} vertices")
            object.__setattr__(self, "faces", faces)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if len(labels) != n:
                raise ValueError(f"{len(labels)} labels for {n} points")
            object.__setattr__(self, "labels", labels)
        if self.check:
            if not np.isfinite(pts).all():
                raise DegenerateInput("non-finite coordinates")
            if len(np.unique(pts, axis=0)) != n:
                raise DegenerateInput("point cloud contains duplicate points")

    def __len__(self):
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def with_points(self, points, check: bool = False) -> PointCloud:
        """Same topology and labels, new coordinates."""
        return PointCloud(points, self.faces, self.labels, check=check)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthogonal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True, eq=False)
class NormalizationRecord:
    """x_normalized = (x - offset) / scale."""

    offset: np.ndarray
    scale: float

    @classmethod
    def identity(cls) -> NormalizationRecord:
        return cls(np.zeros(3), 1.0)

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.offset) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"offset": [float(v) for v in self.offset], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationRecord:
        return cls(np.asarray(d["offset"], dtype=np.float64), float(d["scale"]))


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _infer_format(path, fmt):
    if fmt is None:
        fmt = Path(path).suffix.lstrip(".")
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise ParseError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _floats(tokens, where):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None


def _parse_obj(lines):
    verts, faces = [], []
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
            verts.append(_floats(tok[1:4], f"line {lineno}"))
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: face needs at least 3 vertices")
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise ParseError(f"line {lineno}: bad face index") from None
            nv = len(verts)
            idx = [i - 1 if i > 0 else nv + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return verts, faces


def _parse_ply(lines):
    it = iter(enumerate(lines, 1))
    try:
        _, first = next(it)
    except StopIteration:
        raise ParseError("empty PLY file") from None
    if first.strip() != "ply":
        raise ParseError("missing 'ply' magic")
    elements = []  # (name, count, [props])
    fmt_ok = False
    for lineno, line in it:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"line {lineno}: only ASCII PLY is supported")
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"line {lineno}: bad element declaration")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"line {lineno}: property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list", tok[-1]))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"line {lineno}: unexpected header token {tok[0]!r}")
    else:
        raise ParseError("PLY header not terminated")
    if not fmt_ok:
        raise ParseError("PLY format line missing")

    body = (ln for _, ln in it if ln.strip())
    verts, faces = [], []
    for name, count, props in elements:
        for k in range(count):
            try:
                tok = next(body).split()
            except StopIteration:
                raise ParseError(f"PLY body truncated in element {name!r}") from None
            if name == "vertex":
                try:
                    ix = [props.index(a) for a in ("x", "y", "z")]
                except ValueError:
                    raise ParseError("vertex element lacks x/y/z") from None
                vals = _floats(tok, f"vertex {k}")
                if len(vals) < len(props):
                    raise ParseError(f"vertex {k}: expected {len(props)} values")
                verts.append([vals[i] for i in ix])
            elif name == "face":
                try:
                    cnt = int(tok[0])
                    idx = [int(t) for t in tok[1:1 + cnt]]
                except (ValueError, IndexError):
                    raise ParseError(f"face {k}: malformed") from None
                if len(idx) != cnt or cnt < 3:
                    raise ParseError(f"face {k}: malformed")
                for j in range(1, cnt - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
    return verts, faces


def _parse_xyz(lines):
    verts = []
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) != 3:
            raise ParseError(f"line {lineno}: expected 3 values, got {len(tok)}")
        verts.append(_floats(tok, f"line {lineno}"))
    return verts, []


def load_pointcloud(path, format=None, dedup: bool = False) -> PointCloud:
    """Read an ASCII OBJ, PLY or XYZ file.

    Vertex order is preserved.  Duplicate vertices raise ``DegenerateInput``
    unless ``dedup`` is set, in which case later copies are merged into the
    first occurrence and faces are remapped (faces that collapse are dropped).
    """
    fmt = _infer_format(path, format)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise ParseError(f"{path}: not an ASCII file") from None
    lines = text.splitlines()
    parser = {"obj": _parse_obj, "ply": _parse_ply, "xyz": _parse_xyz}[fmt]
    verts, faces = parser(lines)
    if not verts:
        raise EmptyCloud(f"{path}: no vertices")
    pts = np.asarray(verts, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ParseError(f"{path}: non-finite coordinate")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(pts)):
        raise ParseError(f"{path}: face index out of range for {len(pts)} vertices")

    uniq, first, inverse = np.unique(pts, axis=0, return_index=True, return_inverse=True)
    if len(uniq) != len(pts):
        if not dedup:
            raise DegenerateInput(f"{path}: {len(pts) - len(uniq)} duplicate vertices")
        keep = np.sort(first)
        # old index -> index of its first occurrence in the kept order
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[np.argsort(first)] = np.arange(len(uniq))
        remap = rank[inverse.ravel()]
        pts = pts[keep]
        if len(faces):
            faces = remap[faces]
            ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
            faces = faces[ok]
    return PointCloud(pts, faces if len(faces) else None)


def save_pointcloud(cloud: PointCloud, path, format=None) -> None:
    """Write ``cloud`` as ASCII; coordinates use 17 significant digits."""
    fmt = _infer_format(path, format)
    pts = cloud.points
    faces = cloud.faces if cloud.faces is not None else np.zeros((0, 3), dtype=np.int64)
    out = []
    if fmt == "obj":
        out.extend(f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts)
        out.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces)
    elif fmt == "xyz":
        out.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts)
    else:
        out += ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                "property double x", "property double y", "property double z"]
        if len(faces):
            out += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
        out.append("end_header")
        out.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts)
        out.extend(f"3 {a} {b} {c}" for a, b, c in faces)
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(source: PointCloud, target: PointCloud):
    """Jointly center both clouds and scale the joint bbox diagonal to 1.

    Returns ``(source_n, target_n, record)``; ``record.invert`` maps
    normalized coordinates back to scene units.
    """
    allp = np.vstack([source.points, target.points])
    offset = allp.mean(axis=0)
    diag = float(np.linalg.norm(allp.max(axis=0) - allp.min(axis=0)))
    if not diag > 0:
        raise DegenerateInput("all points coincide; cannot normalize")
    rec = NormalizationRecord(offset, diag)
    return (source.with_points(rec.apply(source.points), check=True),
            target.with_points(rec.apply(target.points), check=True), rec)


# ---------------------------------------------------------------------------
# nearest neighbours and rigid alignment
# ---------------------------------------------------------------------------

def nearest_neighbors(x, y, tree: cKDTree | None = None):
    """Exact nearest neighbour in ``y`` for each row of ``x``.

    Returns ``(index, squared_distance)``.  The kd-tree proposes a few
    candidates; the final choice uses the same arithmetic as the brute-force
    kernel and breaks ties by lowest index, so both agree bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if tree is None:
        tree = cKDTree(y)
    k = min(4, len(y))
    _, cand = tree.query(x, k=k)
    cand = np.sort(np.asarray(cand).reshape(len(x), k), axis=1)
    yc = y[cand]
    dx = x[:, None, 0] - yc[..., 0]
    dy = x[:, None, 1] - yc[..., 1]
    dz = x[:, None, 2] - yc[..., 2]
    d = dx * dx + dy * dy + dz * dz
    j = np.argmin(d, axis=1)
    rows = np.arange(len(x))
    return cand[rows, j], d[rows, j]


def kabsch(a, b) -> RigidTransform:
    """Least-squares rigid map sending points ``a`` onto paired points ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, S, Vt = np.linalg.svd(H)
    if S[0] == 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateInput("rank-deficient cross-covariance; rotation ill-defined")
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cb - R @ ca)


def _check_spread(p):
    if len(p) < 3:
        raise DegenerateInput("ICP needs at least 3 points")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInput("points are collinear")


def icp_with_history(source, target, max_iters: int = 50, tol: float = 1e-10):
    """Point-to-point ICP; returns the transform and the per-iteration mean
    squared nearest-neighbour error (non-increasing)."""
    src = _points(source)
    tgt = _points(target)
    _check_spread(src)
    _check_spread(tgt)
    tree = cKDTree(tgt)
    T = RigidTransform.identity()
    errors = []
    for _ in range(max_iters):
        idx, d2 = nearest_neighbors(T.apply(src), tgt, tree)
        err = float(d2.mean())
        if errors and errors[-1] - err < tol:
            errors.append(err)
            break
        errors.append(err)
        T_new = kabsch(src, tgt[idx])
        T = T_new
    return T, errors


def rigid_icp(source, target, max_iters: int = 50, tol: float = 1e-10) -> RigidTransform:
    """Rigid transform aligning ``source`` onto ``target``."""
    return icp_with_history(source, target, max_iters, tol)[0]
