"""Computable metric measure spaces.

A space bundles a quadrature grid, a measure, distance-ball volumes and the
differential backend used by the rest of the package.  Model spaces (circles,
flat tori, weighted circles) sample fields on uniform product grids and
differentiate them spectrally, i.e. every grid field is identified with its
trigonometric interpolant.  Triangle meshes live in :mod:`heatlens.mesh`.

Conventions
-----------
* Scalar fields are 1-D float arrays over ``grid.nodes`` (C-order flattening
  of the product grid).
* Covector fields are ``(node_count, dim)`` arrays in the global coordinate
  frame of the model space.
* All arrays handed out are read-only; operations never mutate their inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import GridMismatchError, InvalidParameterError

__all__ = [
    "SpaceMetadata",
    "QuadratureGrid",
    "TrigPoly",
    "Space",
    "Circle",
    "FlatTorus",
    "WeightedCircle",
    "make_model_space",
    "ball_volume",
    "ball_volume_table",
    "space_to_descriptor",
    "space_from_descriptor",
    "load_space_descriptor",
]

MODEL_VARIANTS = ("circle", "flat_torus", "weighted_circle")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SpaceMetadata:
    """Invariant facts about a space.

    ``dim`` is the essential dimension n used in volume rescalings,
    ``dim_upper`` the (finite) upper dimension bound N used by growth
    diagnostics, ``curvature_lower`` the synthetic lower Ricci bound K.
    """

    variant: str
    dim: int
    dim_upper: float
    curvature_lower: float
    diameter: float
    total_measure: float


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and positive weights; weights sum to the total measure."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", _readonly(np.atleast_2d(self.nodes)))
        object.__setattr__(self, "weights", _readonly(self.weights))
        if self.nodes.shape[0] != self.weights.shape[0]:
            raise InvalidParameterError(
                "grid nodes and weights disagree: "
                f"{self.nodes.shape[0]} vs {self.weights.shape[0]}"
            )
        if not np.all(self.weights > 0):
            raise InvalidParameterError("quadrature weights must be positive")

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]


class TrigPoly:
    """Real trigonometric polynomial on a circle of circumference ``period``.

    p(x) = a0 + sum_k a_k cos(k w x) + b_k sin(k w x),  w = 2 pi / period.
    """

    def __init__(self, a0=0.0, cos_coeffs=(), sin_coeffs=(), period=2.0 * math.pi):
        if period <= 0:
            raise InvalidParameterError(f"period must be positive, got {period}")
        self.a0 = float(a0)
        self.cos_coeffs = tuple(float(c) for c in cos_coeffs)
        self.sin_coeffs = tuple(float(c) for c in sin_coeffs)
        self.period = float(period)
        coeffs = (self.a0,) + self.cos_coeffs + self.sin_coeffs
        if not all(math.isfinite(c) for c in coeffs):
            raise InvalidParameterError("trig coefficients must be finite")

    @property
    def order(self) -> int:
        return max(len(self.cos_coeffs), len(self.sin_coeffs))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = 2.0 * math.pi / self.period
        out = np.full(x.shape, self.a0)
        for k, c in enumerate(self.cos_coeffs, start=1):
            if c:
                out = out + c * np.cos(k * w * x)
        for k, c in enumerate(self.sin_coeffs, start=1):
            if c:
                out = out + c * np.sin(k * w * x)
        return out

    def derivative(self) -> "TrigPoly":
        w = 2.0 * math.pi / self.period
        n = self.order
        a = list(self.cos_coeffs) + [0.0] * (n - len(self.cos_coeffs))
        b = list(self.sin_coeffs) + [0.0] * (n - len(self.sin_coeffs))
        # d/dx [a cos(kwx) + b sin(kwx)] = kw b cos(kwx) - kw a sin(kwx)
        dcos = [k * w * b[k - 1] for k in range(1, n + 1)]
        dsin = [-k * w * a[k - 1] for k in range(1, n + 1)]
        return TrigPoly(0.0, dcos, dsin, self.period)

    def to_dict(self) -> dict:
        return {
            "a0": self.a0,
            "cos": list(self.cos_coeffs),
            "sin": list(self.sin_coeffs),
        }

    @classmethod
    def from_dict(cls, d: dict, period: float) -> "TrigPoly":
        if not isinstance(d, dict):
            raise InvalidParameterError(
                "phi_coefficients must be an object with keys a0/cos/sin"
            )
        unknown = set(d) - {"a0", "cos", "sin"}
        if unknown:
            raise InvalidParameterError(
                f"phi_coefficients has unknown keys {sorted(unknown)}"
            )
        return cls(d.get("a0", 0.0), d.get("cos", ()), d.get("sin", ()), period)


def _spectral_axis_derivative(values_nd: np.ndarray, axis: int, length: float):
    """Differentiate the trig interpolant along one axis of a periodic grid."""
    m = values_nd.shape[axis]
    k = 2.0 * math.pi * np.fft.fftfreq(m, d=length / m)
    if m % 2 == 0:
        k = k.copy()
        k[m // 2] = 0.0  # Nyquist mode has no well-defined odd derivative
    shape = [1] * values_nd.ndim
    shape[axis] = m
    spec = np.fft.fft(values_nd, axis=axis)
    return np.real(np.fft.ifft(spec * (1j * k).reshape(shape), axis=axis))


def _spectral_axis_second(values_nd: np.ndarray, axis: int, length: float):
    m = values_nd.shape[axis]
    k = 2.0 * math.pi * np.fft.fftfreq(m, d=length / m)
    shape = [1] * values_nd.ndim
    shape[axis] = m
    spec = np.fft.fft(values_nd, axis=axis)
    return np.real(np.fft.ifft(spec * (-(k ** 2)).reshape(shape), axis=axis))


class Space:
    """Abstract base: metadata, grid, integration and ball volumes."""

    metadata: SpaceMetadata
    grid: QuadratureGrid

    @property
    def dim(self) -> int:
        return self.metadata.dim

    @property
    def node_count(self) -> int:
        return self.grid.node_count

    @property
    def total_measure(self) -> float:
        return self.metadata.total_measure

    def check_field(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.node_count or values.ndim == 0:
            raise GridMismatchError(
                f"field has {np.shape(values)} samples, space has "
                f"{self.node_count} nodes"
            )
        return values

    def integrate(self, values) -> float:
        values = self.check_field(values)
        return float(np.dot(self.grid.weights, values))

    def ball_volume(self, x, r: float) -> float:
        raise NotImplementedError

    def ball_volume_table(self, r_values, node_indices=None) -> np.ndarray:
        """Measures of balls around grid nodes, shape (nodes, radii)."""
        raise NotImplementedError


class _ProductGrid(Space):
    """Uniform periodic product grid with a spectral differential backend."""

    def __init__(self, lengths: Sequence[float], shape: Sequence[int]):
        lengths = tuple(float(L) for L in np.atleast_1d(lengths))
        if len(lengths) == 0:
            raise InvalidParameterError("at least one period length is required")
        if any((not math.isfinite(L)) or L <= 0 for L in lengths):
            raise InvalidParameterError(f"period lengths must be positive: {lengths}")
        shape = tuple(int(m) for m in np.atleast_1d(shape))
        if len(shape) != len(lengths):
            raise InvalidParameterError(
                f"got {len(shape)} grid sizes for {len(lengths)} factors"
            )
        if any(m < 4 for m in shape):
            raise InvalidParameterError(f"need at least 4 points per factor: {shape}")
        self.lengths = lengths
        self.shape = shape
        axes = [
            np.arange(m, dtype=np.float64) * (L / m) for m, L in zip(shape, lengths)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([a.reshape(-1) for a in mesh], axis=-1)
        cell = math.prod(lengths) / math.prod(shape)
        self._node_array = _readonly(nodes)
        self._cell = cell

    def _reshape(self, values: np.ndarray) -> np.ndarray:
        return np.reshape(values, self.shape)

    def gradient(self, values) -> np.ndarray:
        """Per-node covector of the trig interpolant, shape (nodes, dim)."""
        values = self.check_field(values)
        nd = self._reshape(values)
        comps = [
            _spectral_axis_derivative(nd, j, L).reshape(-1)
            for j, L in enumerate(self.lengths)
        ]
        return np.stack(comps, axis=-1)

    def flat_laplacian(self, values) -> np.ndarray:
        """Unweighted Laplacian (sum of second derivatives) of the interpolant."""
        values = self.check_field(values)
        nd = self._reshape(values)
        out = np.zeros_like(nd)
        for j, L in enumerate(self.lengths):
            out += _spectral_axis_second(nd, j, L)
        return out.reshape(-1)

    def laplacian(self, values) -> np.ndarray:
        """Measure Laplacian; equals the flat one unless the measure is weighted."""
        return self.flat_laplacian(values)

    def wrap(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != len(self.lengths):
            raise InvalidParameterError(
                f"point has {x.shape[-1]} coordinates, space has {len(self.lengths)}"
            )
        return np.mod(x, np.asarray(self.lengths))


def _torus2_ball_area(r, la: float, lb: float):
    """Area of a geodesic ball on a flat 2-torus with periods la >= lb."""
    r = np.asarray(r, dtype=np.float64)
    diam = 0.5 * math.hypot(la, lb)
    u_max = np.minimum(r, la / 2.0)
    u_star = np.sqrt(np.maximum(r ** 2 - (lb / 2.0) ** 2, 0.0))
    u_cap = np.minimum(u_star, u_max)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio_hi = np.clip(np.where(r > 0, u_max / np.maximum(r, 1e-300), 0.0), -1, 1)
        ratio_lo = np.clip(np.where(r > 0, u_cap / np.maximum(r, 1e-300), 0.0), -1, 1)
        f_hi = 0.5 * u_max * np.sqrt(np.maximum(r ** 2 - u_max ** 2, 0.0)) \
            + 0.5 * r ** 2 * np.arcsin(ratio_hi)
        f_lo = 0.5 * u_cap * np.sqrt(np.maximum(r ** 2 - u_cap ** 2, 0.0)) \
            + 0.5 * r ** 2 * np.arcsin(ratio_lo)
    area = 2.0 * (lb * u_cap + 2.0 * (f_hi - f_lo))
    return np.where(r >= diam, la * lb, area)


def _check_radii(r_values) -> np.ndarray:
    r = np.atleast_1d(np.asarray(r_values, dtype=np.float64))
    if r.size == 0 or not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise InvalidParameterError(f"ball radii must be positive and finite, got {r_values}")
    return r


class FlatTorus(_ProductGrid):
    """Flat torus: product of circles with the product Lebesgue measure."""

    def __init__(self, lengths: Sequence[float], n_points=None):
        lengths = tuple(float(L) for L in np.atleast_1d(lengths))
        if n_points is None:
            n_points = 64 if len(lengths) > 1 else 256
        if np.ndim(n_points) == 0:
            shape = (int(n_points),) * len(lengths)
        else:
            shape = tuple(int(m) for m in n_points)
        super().__init__(lengths, shape)
        measure = math.prod(lengths)
        diameter = 0.5 * math.sqrt(sum(L ** 2 for L in lengths))
        self.metadata = SpaceMetadata(
            variant="flat_torus" if len(lengths) > 1 else "circle",
            dim=len(lengths),
            dim_upper=float(len(lengths)),
            curvature_lower=0.0,
            diameter=diameter,
            total_measure=measure,
        )
        weights = np.full(self._node_array.shape[0], self._cell)
        self.grid = QuadratureGrid(self._node_array, weights)

    def ball_volume(self, x, r: float) -> float:
        self.wrap(x)  # validates the point; volume is translation invariant
        return float(self._ball_closed_form(np.asarray([r]))[0])

    def _ball_closed_form(self, r: np.ndarray) -> np.ndarray:
        r = _check_radii(r)
        n = len(self.lengths)
        if r.max() * 2.0 <= min(self.lengths) and n != 2:
            from scipy.special import gamma

            omega = math.pi ** (n / 2.0) / gamma(n / 2.0 + 1.0)
            return omega * r ** n
        if n == 1:
            return np.minimum(2.0 * r, self.lengths[0])
        if n == 2:
            la, lb = max(self.lengths), min(self.lengths)
            return _torus2_ball_area(r, la, lb)
        return np.array([self._ball_recursive(float(ri), self.lengths) for ri in r])

    @staticmethod
    def _ball_recursive(r: float, lengths) -> float:
        from scipy.integrate import quad

        if len(lengths) == 1:
            return min(2.0 * r, lengths[0])
        rest = lengths[1:]

        def section(u):
            return FlatTorus._ball_recursive(math.sqrt(max(r * r - u * u, 0.0)), rest)

        hi = min(r, lengths[0] / 2.0)
        val, _ = quad(section, 0.0, hi, limit=200)
        return 2.0 * val

    def ball_volume_table(self, r_values, node_indices=None) -> np.ndarray:
        r = _check_radii(r_values)
        vols = self._ball_closed_form(r)
        count = self.node_count if node_indices is None else len(np.atleast_1d(node_indices))
        return np.broadcast_to(vols, (count, r.size)).copy()


class Circle(FlatTorus):
    """Circle of circumference ``length`` with arc-length distance."""

    def __init__(self, length: float = 2.0 * math.pi, n_points: int = 256):
        super().__init__([length], n_points=n_points)

    @property
    def length(self) -> float:
        return self.lengths[0]


class WeightedCircle(Circle):
    """Circle carrying the measure exp(-phi(theta)) d(theta).

    ``phi`` is the log-density, a real trig polynomial.  Distances stay those
    of the underlying circle; only the measure is reweighted, so gradients are
    unweighted while the measure Laplacian picks up a drift term
    ``f'' - phi' f'``.
    """

    def __init__(self, length: float, phi: TrigPoly, n_points: int = 2048,
                 dim_upper: float = 3.0):
        if not isinstance(phi, TrigPoly):
            phi = TrigPoly.from_dict(phi, length)
        if abs(phi.period - length) > 1e-12 * length:
            raise InvalidParameterError(
                f"weight period {phi.period} does not match circumference {length}"
            )
        if dim_upper <= 1.0:
            raise InvalidParameterError("dim_upper must exceed the dimension 1")
        super().__init__(length, n_points=n_points)
        self.phi = phi
        self.phi_prime = phi.derivative()
        theta = self.grid.nodes[:, 0]
        density = np.exp(-phi(theta))
        cell = length / self.shape[0]
        weights = cell * density
        total = float(weights.sum())
        self._density = _readonly(density)
        self.grid = QuadratureGrid(self.grid.nodes, weights)
        # Bakry-Emery N-Ricci lower bound for a 1-d weighted space:
        # phi'' - (phi')^2 / (N - 1), minimized over the grid.
        phi2 = self.phi_prime.derivative()
        ric = phi2(theta) - self.phi_prime(theta) ** 2 / (dim_upper - 1.0)
        self.metadata = SpaceMetadata(
            variant="weighted_circle",
            dim=1,
            dim_upper=float(dim_upper),
            curvature_lower=float(ric.min()),
            diameter=length / 2.0,
            total_measure=total,
        )

    @property
    def density(self) -> np.ndarray:
        """exp(-phi) sampled on the grid."""
        return self._density

    def laplacian(self, values) -> np.ndarray:
        values = self.check_field(values)
        theta = self.grid.nodes[:, 0]
        return self.flat_laplacian(values) - self.phi_prime(theta) * self.gradient(values)[:, 0]

    def _ball_quadrature(self, centers: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Arc measures by Gauss-Legendre quadrature, shape (centers, radii)."""
        u, w = leggauss(96)
        theta = centers[:, None, None] + r[None, :, None] * u[None, None, :]
        vals = np.exp(-self.phi(theta))
        out = r[None, :] * np.einsum("ctq,q->ct", vals, w)
        full = np.isclose(r, self.metadata.diameter) | (r >= self.metadata.diameter)
        out[:, full] = self.total_measure
        return out

    def ball_volume(self, x, r: float) -> float:
        x = self.wrap(x)
        r_arr = _check_radii([r])
        return float(self._ball_quadrature(x[..., 0].reshape(1), r_arr)[0, 0])

    def ball_volume_table(self, r_values, node_indices=None) -> np.ndarray:
        r = _check_radii(r_values)
        centers = self.grid.nodes[:, 0]
        if node_indices is not None:
            centers = centers[np.atleast_1d(node_indices)]
        return self._ball_quadrature(centers, r)


def make_model_space(variant: str, lengths, phi_coefficients=None, n_points=None,
                     dim_upper=None):
    """Construct a model space from descriptor-style parameters.

    Parameters
    ----------
    variant : one of ``circle``, ``flat_torus``, ``weighted_circle``.
    lengths : period lengths, one per factor.
    phi_coefficients : trig-polynomial log-density (weighted circle only),
        as a :class:`TrigPoly` or ``{"a0": ..., "cos": [...], "sin": [...]}``.
    n_points : grid points per factor; backend defaults apply when omitted.
    dim_upper : optional upper dimension bound N for the weighted variant.
    """
    if variant not in MODEL_VARIANTS:
        raise InvalidParameterError(
            f"unknown variant {variant!r}; expected one of {MODEL_VARIANTS}"
        )
    lengths = tuple(float(L) for L in np.atleast_1d(lengths))
    if variant == "circle":
        if len(lengths) != 1:
            raise InvalidParameterError("circle takes exactly one length")
        if phi_coefficients is not None:
            raise InvalidParameterError("circle does not take phi_coefficients")
        return Circle(lengths[0], n_points=n_points or 256)
    if variant == "flat_torus":
        if phi_coefficients is not None:
            raise InvalidParameterError("flat_torus does not take phi_coefficients")
        return FlatTorus(lengths, n_points=n_points)
    if len(lengths) != 1:
        raise InvalidParameterError("weighted_circle takes exactly one length")
    if phi_coefficients is None:
        raise InvalidParameterError("weighted_circle requires phi_coefficients")
    kwargs = {} if dim_upper is None else {"dim_upper": dim_upper}
    return WeightedCircle(lengths[0], phi_coefficients,
                          n_points=n_points or 2048, **kwargs)


def ball_volume(space: Space, x, r: float) -> float:
    """Measure of the metric ball of radius ``r`` around ``x``."""
    return space.ball_volume(x, r)


def ball_volume_table(space: Space, r_values, node_indices=None) -> np.ndarray:
    """Ball volumes at grid nodes for several radii, shape (nodes, radii)."""
    return space.ball_volume_table(r_values, node_indices=node_indices)


def space_to_descriptor(space: Space) -> dict:
    """JSON-ready descriptor with the canonical four fields."""
    variant = space.metadata.variant
    desc = {
        "variant": variant,
        "lengths": None,
        "phi_coefficients": None,
        "mesh_path": None,
    }
    if variant in MODEL_VARIANTS:
        desc["lengths"] = list(space.lengths)
        if variant == "weighted_circle":
            desc["phi_coefficients"] = space.phi.to_dict()
    elif variant == "mesh":
        desc["mesh_path"] = getattr(space, "source_path", None)
    return desc


def space_from_descriptor(desc: dict, n_points=None):
    """Build a space from a descriptor dictionary.

    Mesh descriptors require ``mesh_path`` to point at an existing OFF file.
    """
    if not isinstance(desc, dict):
        raise InvalidParameterError("space descriptor must be a JSON object")
    variant = desc.get("variant")
    if variant == "mesh":
        from .mesh import load_mesh

        path = desc.get("mesh_path")
        if not path:
            raise InvalidParameterError("mesh descriptor requires mesh_path")
        return load_mesh(path)
    if variant not in MODEL_VARIANTS:
        raise InvalidParameterError(
            f"descriptor variant {variant!r} not in {MODEL_VARIANTS + ('mesh',)}"
        )
    lengths = desc.get("lengths")
    if not lengths:
        raise InvalidParameterError("model descriptor requires nonempty lengths")
    if n_points is None:
        n_points = desc.get("n_points")
    return make_model_space(variant, lengths, desc.get("phi_coefficients"),
                            n_points=n_points, dim_upper=desc.get("dim_upper"))


def load_space_descriptor(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"descriptor {path} is not valid JSON: {exc}")
