"""Synthetic point-cloud dataset: types, generation, normalization, serialization.

Clouds are N x 3 float64 arrays normalized to a zero centroid and unit max
radius, so perturbation budgets are comparable across shape families.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DatasetParseError, DegenerateInputError

_CENTROID_TOL = 1e-6
_DEGENERATE_SCALE = 1e-9


@dataclass
class PointCloud:
    """An ordered set of 3D points with an integer class label."""

    points: np.ndarray  # (N, 3) float64
    label: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ConfigurationError("points must have shape (N, 3)")
        if not np.all(np.isfinite(self.points)):
            raise DegenerateInputError("point cloud contains non-finite coordinates")

    @property
    def n_points(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.points, other.points)


@dataclass
class SyntheticDatasetSpec:
    """Recipe for a deterministic synthetic dataset.

    Same spec + same seed yields a bit-identical dataset.
    """

    classes: list = field(default_factory=lambda: ["sphere", "cube", "cylinder"])
    points_per_cloud: int = 256
    clouds_per_class: int = 100
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if len(self.classes) < 3:
            raise ConfigurationError("need at least 3 shape families", field="classes")
        if self.points_per_cloud < 8:
            raise ConfigurationError("points_per_cloud must be >= 8", field="points_per_cloud")
        if self.clouds_per_class <= 0:
            raise ConfigurationError("clouds_per_class must be positive", field="clouds_per_class")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0", field="noise_sigma")
        for name in self.classes:
            if name not in SHAPE_FAMILIES:
                raise ConfigurationError(
                    f"unknown shape family {name!r} (known: {sorted(SHAPE_FAMILIES)})",
                    field="classes",
                )


def _sample_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _sample_cube(n, rng):
    # uniform on the surface of the axis-aligned cube [-1, 1]^3
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        a = axis[i]
        rest = [j for j in range(3) if j != a]
        pts[i, a] = sign[i]
        pts[i, rest[0]] = uv[i, 0]
        pts[i, rest[1]] = uv[i, 1]
    return pts


def _sample_cylinder(n, rng):
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    return np.stack([np.cos(theta), np.sin(theta), z], axis=1)


def _sample_cone(n, rng):
    # lateral surface of a cone with apex at (0,0,1), base circle radius 1 at z=-1
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n))  # area-uniform along the slant
    r = t
    z = 1.0 - 2.0 * t
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_torus(n, rng):
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    R, r = 1.0, 0.4
    x = (R + r * np.cos(phi)) * np.cos(theta)
    y = (R + r * np.cos(phi)) * np.sin(theta)
    z = r * np.sin(phi)
    return np.stack([x, y, z], axis=1)


SHAPE_FAMILIES = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
}


def normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale its max point norm to 1.

    Idempotent and invariant to uniform scaling/translation of the input.
    Raises DegenerateInputError when all points coincide.
    """
    pts = cloud.points - cloud.points.mean(axis=0)
    scale = np.linalg.norm(pts, axis=1).max()
    if scale < _DEGENERATE_SCALE:
        raise DegenerateInputError("cannot normalize a cloud with zero extent")
    return PointCloud(points=pts / scale, label=cloud.label)


def is_normalized(points: np.ndarray, tol: float = _CENTROID_TOL) -> bool:
    centroid_ok = np.all(np.abs(points.mean(axis=0)) <= tol)
    radius_ok = abs(np.linalg.norm(points, axis=1).max() - 1.0) <= tol
    return bool(centroid_ok and radius_ok)


def generate_dataset(spec: SyntheticDatasetSpec) -> list[PointCloud]:
    """Generate `clouds_per_class * len(classes)` normalized clouds.

    Labels follow the order of `spec.classes`. Generation is a pure function
    of (spec, seed).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clouds = []
    for label, name in enumerate(spec.classes):
        sampler = SHAPE_FAMILIES[name]
        for _ in range(spec.clouds_per_class):
            pts = sampler(spec.points_per_cloud, rng)
            if spec.noise_sigma > 0:
                pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
            clouds.append(normalize(PointCloud(points=pts, label=label)))
    return clouds


def save_dataset(clouds: list[PointCloud], path) -> None:
    """Write clouds in the `pcset v1` text format.

    Header: ``pcset v1 <num_clouds> <N> <C>``; then per cloud a label line and
    N coordinate lines. Floats are written with shortest round-trip repr, so
    load(save(D)) == D exactly.
    """
    if clouds:
        n = clouds[0].n_points
        c = max(cl.label for cl in clouds) + 1
        for cl in clouds:
            if cl.n_points != n:
                raise ConfigurationError("all clouds in a dataset must share N")
    else:
        n = 0
        c = 0
    buf = io.StringIO()
    buf.write(f"pcset v1 {len(clouds)} {n} {c}\n")
    for cl in clouds:
        buf.write(f"{cl.label}\n")
        for x, y, z in cl.points:
            buf.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> list[PointCloud]:
    """Read a `pcset v1` file; malformed input raises DatasetParseError
    carrying the byte offset of the offending line."""
    with open(path, "r") as fh:
        text = fh.read()
    offset = 0
    lines = text.split("\n")

    def fail(msg):
        raise DatasetParseError(msg, offset)

    idx = 0

    def next_line():
        nonlocal idx, offset
        if idx >= len(lines):
            fail("unexpected end of file")
        line = lines[idx]
        line_offset = offset
        offset += len(line) + 1
        idx += 1
        return line, line_offset

    header, _ = next_line()
    parts = header.split()
    if len(parts) != 5 or parts[0] != "pcset" or parts[1] != "v1":
        fail(f"bad header {header!r}")
    try:
        num_clouds, n, _c = int(parts[2]), int(parts[3]), int(parts[4])
    except ValueError:
        fail(f"non-integer header field in {header!r}")
    clouds = []
    for _ in range(num_clouds):
        label_line, lo = next_line()
        try:
            label = int(label_line)
        except ValueError:
            offset = lo
            fail(f"bad label line {label_line!r}")
        pts = np.empty((n, 3), dtype=np.float64)
        for i in range(n):
            coord_line, lo = next_line()
            fields = coord_line.split()
            if len(fields) != 3:
                offset = lo
                fail(f"expected 3 coordinates, got {coord_line!r}")
            try:
                pts[i] = [float(f) for f in fields]
            except ValueError:
                offset = lo
                fail(f"bad coordinate in {coord_line!r}")
        clouds.append(PointCloud(points=pts, label=label))
    return clouds
