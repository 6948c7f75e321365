"""Eigenbases and heat-kernel series.

The heat kernel is evaluated through its truncated spectral expansion

    p(x, y, t) = sum_i exp(-lambda_i t) phi_i(x) phi_i(y)

with the eigenpairs ordered by eigenvalue and, within ties, by the
lexicographic order of integer frequency vectors with cosine before sine.
Circle and flat-torus bases are stored analytically (frequency vectors) and
materialized in mode chunks; weighted circles and meshes solve a symmetric
generalized eigenproblem and store dense eigenvectors.

Diagonal series used elsewhere in the package:

    p(x, x, t)            = sum exp(-lambda t) phi^2
    d/dt p(x, x, t)       = -sum lambda exp(-lambda t) phi^2
    Delta_x p(x, x, t)    = 2 sum exp(-lambda t) (-lambda phi^2 + |grad phi|^2)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from scipy.special import gammainc, gammaincc, gammaln

from . import __version__
from .errors import (
    CapabilityError,
    InvalidParameterError,
    SolverError,
    TruncationError,
)
from .mesh import DiscreteSpace
from .spaces import (
    Circle,
    FlatTorus,
    Space,
    WeightedCircle,
    space_from_descriptor,
    space_to_descriptor,
)

__all__ = [
    "EigenPair",
    "ModeBlock",
    "TruncationPolicy",
    "SpectralBasis",
    "TrigBasis",
    "DenseBasis",
    "MeshBasis",
    "compute_basis",
    "mode_count_for",
    "suggest_grid",
    "heat_kernel",
    "heat_kernel_row",
    "diag_heat",
    "diag_heat_field",
    "diag_heat_time_derivative",
    "diag_heat_time_derivative_field",
    "diag_laplacian",
    "diag_laplacian_field",
    "embedding_coordinates",
    "check_positivity",
    "fit_growth_constants",
    "fit_gaussian_bound",
    "remix_basis",
    "save_basis",
    "load_basis",
]

DEFAULT_CHUNK = 256
_MAGIC = b"HLSB"
_BIN_VERSION = 1


def _check_time(t) -> float:
    t = float(t)
    if not math.isfinite(t) or t <= 0:
        raise InvalidParameterError(f"time must be positive and finite, got {t}")
    return t


@dataclass(frozen=True)
class EigenPair:
    """One eigenpair: -Laplacian phi = lambda phi, phi normalized in L2(m)."""

    index: int
    lam: float
    phi: np.ndarray
    grad_phi: np.ndarray


@dataclass(frozen=True)
class ModeBlock:
    """A chunk of modes materialized on the grid.

    ``phi`` has shape (block, nodes).  ``grad`` has shape (block, nodes, dim)
    on model spaces and (block, faces, 3) on meshes.  ``hess`` is present only
    when requested and only on model spaces, shape (block, nodes, dim, dim).
    """

    start: int
    lam: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None


@dataclass(frozen=True)
class TruncationPolicy:
    """Retained-spectrum bookkeeping and tail estimates.

    The tail of a series sum_{i>K} lambda_i^p exp(-lambda_i t) is estimated by
    extending the fitted Weyl counting law N(lambda) ~ weyl_coefficient *
    lambda^(dim/2) beyond the retained window; ``tail_bound`` reports it
    relative to the retained part.  Estimates are heuristics for validity
    flags, never substitutes for the series themselves.
    """

    mode_count: int
    lambda_max: float
    dim: int
    weyl_coefficient: float
    lambdas: np.ndarray
    tolerance: float = 1e-6

    def tail_bound(self, t, weight_power: int = 0) -> float:
        t = _check_time(t)
        lam_max = max(self.lambda_max, 1e-300)
        s = self.dim / 2.0 + weight_power
        # integral_{lam_max}^inf lam^(s-1) e^(-lam t) d(lam) scaled by the
        # fitted density  (dim/2) * weyl_coefficient * lam^(dim/2 - 1).
        tail = (
            self.weyl_coefficient
            * (self.dim / 2.0)
            * math.exp(gammaln(s))
            * gammaincc(s, lam_max * t)
            / (t ** s)
            / max(lam_max ** (self.dim / 2.0 - 1.0), 1e-300)
            * lam_max ** max(self.dim / 2.0 - 1.0, 0.0)
        )
        if self.dim / 2.0 - 1.0 < 0:
            tail *= lam_max ** (self.dim / 2.0 - 1.0)
        lam = self.lambdas
        retained = float(np.sum(lam ** weight_power * np.exp(-lam * t))) if weight_power else float(np.sum(np.exp(-lam * t)))
        return tail / max(retained, 1e-300)

    def require(self, t, weight_power: int = 0, tol=None) -> None:
        tol = self.tolerance if tol is None else float(tol)
        bound = self.tail_bound(t, weight_power=weight_power)
        if bound > tol:
            raise TruncationError(
                f"estimated relative series tail {bound:.3e} at t={t:g} exceeds "
                f"{tol:g}; increase mode_count (retained {self.mode_count}, "
                f"lambda_max {self.lambda_max:.6g})"
            )


class SpectralBasis:
    """Base class: ordered eigenvalues plus chunked mode evaluation."""

    space: Space
    lambdas: np.ndarray
    truncation: TruncationPolicy

    def __init__(self, space: Space, lambdas: np.ndarray):
        self.space = space
        lambdas = np.asarray(lambdas, dtype=np.float64).copy()
        lambdas.flags.writeable = False
        self.lambdas = lambdas
        self.truncation = _make_policy(space, lambdas)

    @property
    def mode_count(self) -> int:
        return int(len(self.lambdas))

    def blocks(self, chunk: int = DEFAULT_CHUNK, with_hessians: bool = False):
        raise NotImplementedError

    def pair(self, i: int) -> EigenPair:
        if not 0 <= i < self.mode_count:
            raise InvalidParameterError(
                f"mode index {i} outside 0..{self.mode_count - 1}"
            )
        for block in self.blocks():
            if block.start <= i < block.start + len(block.lam):
                k = i - block.start
                return EigenPair(i, float(block.lam[k]),
                                 block.phi[k].copy(), block.grad[k].copy())
        raise SolverError(f"mode {i} not produced by block iteration")

    def phi_matrix(self) -> np.ndarray:
        """Dense (mode_count, nodes) eigenfunction table."""
        out = np.empty((self.mode_count, self.space.node_count))
        for block in self.blocks():
            out[block.start:block.start + len(block.lam)] = block.phi
        return out

    def densify(self) -> "DenseBasis":
        return DenseBasis(self.space, self.lambdas.copy(), self.phi_matrix())


def _make_policy(space: Space, lambdas: np.ndarray) -> TruncationPolicy:
    n = space.dim
    lam_max = float(lambdas.max()) if len(lambdas) else 0.0
    if lam_max > 0:
        weyl = len(lambdas) / lam_max ** (n / 2.0)
    else:
        weyl = 0.0
    return TruncationPolicy(
        mode_count=int(len(lambdas)),
        lambda_max=lam_max,
        dim=n,
        weyl_coefficient=weyl,
        lambdas=lambdas,
    )


class TrigBasis(SpectralBasis):
    """Closed-form basis on a circle or flat torus.

    Modes are stored as frequency vectors xi (rows of ``freq``) and a kind
    flag (1 cosine, 2 sine); node values are materialized per chunk.
    """

    def __init__(self, space: FlatTorus, freq: np.ndarray, kind: np.ndarray):
        freq = np.asarray(freq, dtype=np.float64)
        lambdas = (freq ** 2).sum(axis=1)
        volume = space.total_measure
        amp = np.where(lambdas > 0, math.sqrt(2.0 / volume), 1.0 / math.sqrt(volume))
        self.freq = freq
        self.kind = np.asarray(kind, dtype=np.int8)
        self.amp = amp
        super().__init__(space, lambdas)

    def blocks(self, chunk: int = DEFAULT_CHUNK, with_hessians: bool = False):
        nodes = self.space.grid.nodes
        for start in range(0, self.mode_count, chunk):
            stop = min(start + chunk, self.mode_count)
            xi = self.freq[start:stop]
            kind = self.kind[start:stop]
            amp = self.amp[start:stop]
            angles = nodes @ xi.T  # (nodes, block)
            c, s = np.cos(angles), np.sin(angles)
            is_cos = (kind == 1)[None, :]
            phi = (np.where(is_cos, c, s) * amp[None, :]).T
            dfac = (np.where(is_cos, -s, c) * amp[None, :]).T  # (block, nodes)
            grad = dfac[:, :, None] * xi[:, None, :]
            hess = None
            if with_hessians:
                # Hess(cos(xi.theta)) = -xi xi^T cos(xi.theta), same for sine.
                outer = -xi[:, None, :] * xi[:, :, None]  # (block, dim, dim)
                hess = phi[:, :, None, None] * outer[:, None, :, :]
            yield ModeBlock(start, self.lambdas[start:stop], phi, grad, hess)


class DenseBasis(SpectralBasis):
    """Dense eigenvector storage on a model-space grid."""

    def __init__(self, space: Space, lambdas: np.ndarray, phi: np.ndarray):
        if isinstance(space, DiscreteSpace):
            raise InvalidParameterError("use MeshBasis for DiscreteSpace")
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        if phi.shape != (len(lambdas), space.node_count):
            raise InvalidParameterError(
                f"phi table has shape {phi.shape}, expected "
                f"({len(lambdas)}, {space.node_count})"
            )
        phi.flags.writeable = False
        self.phi = phi
        super().__init__(space, lambdas)

    def blocks(self, chunk: int = DEFAULT_CHUNK, with_hessians: bool = False):
        space = self.space
        for start in range(0, self.mode_count, chunk):
            stop = min(start + chunk, self.mode_count)
            phi = self.phi[start:stop]
            grad = _batched_gradient(space, phi)
            hess = None
            if with_hessians:
                hess = _batched_hessian(space, phi)
            yield ModeBlock(start, self.lambdas[start:stop], phi, grad, hess)

    def densify(self) -> "DenseBasis":
        return self


class MeshBasis(SpectralBasis):
    """Dense eigenvectors on a mesh; gradients live on faces."""

    def __init__(self, space: DiscreteSpace, lambdas: np.ndarray, phi: np.ndarray):
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        phi.flags.writeable = False
        self.phi = phi
        super().__init__(space, lambdas)

    def blocks(self, chunk: int = DEFAULT_CHUNK, with_hessians: bool = False):
        if with_hessians:
            raise CapabilityError(
                "mesh backend has no pointwise second derivatives; "
                "Hessians exist only in weak form"
            )
        gx, gy, gz = self.space.gradient_ops
        for start in range(0, self.mode_count, chunk):
            stop = min(start + chunk, self.mode_count)
            phi = self.phi[start:stop]
            grad = np.stack([(gx @ phi.T).T, (gy @ phi.T).T, (gz @ phi.T).T],
                            axis=-1)
            yield ModeBlock(start, self.lambdas[start:stop], phi, grad)

    def grad_square_nodes(self, block: ModeBlock) -> np.ndarray:
        """|grad phi|^2 averaged from faces to vertices, shape (block, nodes)."""
        sq = (block.grad ** 2).sum(axis=-1)  # (block, faces)
        return self.space.face_to_vertex(sq.T).T

    def densify(self):
        return self


def _batched_gradient(space, phi_mat: np.ndarray) -> np.ndarray:
    """Spectral gradients of a stack of fields, shape (K, nodes, dim)."""
    from .spaces import _spectral_axis_derivative

    k, _ = phi_mat.shape
    nd = phi_mat.reshape((k,) + space.shape)
    comps = [
        _spectral_axis_derivative(nd, j + 1, L).reshape(k, -1)
        for j, L in enumerate(space.lengths)
    ]
    return np.stack(comps, axis=-1)


def _batched_hessian(space, phi_mat: np.ndarray) -> np.ndarray:
    from .spaces import _spectral_axis_derivative

    k, _ = phi_mat.shape
    n = len(space.lengths)
    nd = phi_mat.reshape((k,) + space.shape)
    firsts = [
        _spectral_axis_derivative(nd, a + 1, space.lengths[a]) for a in range(n)
    ]
    hess = np.empty((k, phi_mat.shape[1], n, n))
    for a in range(n):
        for b in range(a, n):
            hab = _spectral_axis_derivative(firsts[a], b + 1, space.lengths[b])
            hess[:, :, a, b] = hab.reshape(k, -1)
            hess[:, :, b, a] = hess[:, :, a, b]
    return hess


# -- basis construction -----------------------------------------------------


def _enumerate_flat_modes(lengths, mode_count: int):
    """Frequency table of the ``mode_count`` lowest flat-torus modes.

    Ties are broken by the lexicographic order of the integer frequency
    vectors (half lattice: first nonzero entry positive), cosine before sine.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    n = len(lengths)
    w = 2.0 * math.pi / lengths
    volume = float(np.prod(lengths))
    if mode_count < 1:
        raise InvalidParameterError("mode_count must be at least 1")
    # Weyl guess for the eigenvalue window, grown until enough modes fit.
    from scipy.special import gamma

    omega_n = math.pi ** (n / 2.0) / gamma(n / 2.0 + 1.0)
    lam_max = ((mode_count + 1) * (2.0 * math.pi) ** n
               / (omega_n * volume)) ** (2.0 / n)
    lam_max = max(lam_max, 1.05 * float((w ** 2).max()))
    while True:
        ms = [np.arange(-int(math.floor(math.sqrt(lam_max) / w[j])),
                        int(math.floor(math.sqrt(lam_max) / w[j])) + 1)
              for j in range(n)]
        mesh = np.meshgrid(*ms, indexing="ij")
        lattice = np.stack([a.reshape(-1) for a in mesh], axis=-1)
        lam = ((lattice * w) ** 2).sum(axis=1)
        nonzero = lattice[lam > 0]
        lam_nz = lam[lam > 0]
        # half lattice: first nonzero coordinate positive
        first_sign = np.zeros(len(nonzero))
        undecided = np.ones(len(nonzero), dtype=bool)
        for j in range(n):
            col = nonzero[:, j]
            first_sign = np.where(undecided & (col != 0), np.sign(col), first_sign)
            undecided &= col == 0
        keep = (first_sign > 0) & (lam_nz <= lam_max)
        if 1 + 2 * int(keep.sum()) >= mode_count:
            half = nonzero[keep]
            lam_half = lam_nz[keep]
            break
        lam_max *= 1.6
    order = np.lexsort(tuple(half[:, j] for j in range(n - 1, -1, -1)) + (lam_half,))
    half = half[order]
    freq_rows = [np.zeros(n)]
    kind = [1]
    for m in half:
        xi = m * w
        freq_rows.append(xi)
        kind.append(1)
        freq_rows.append(xi)
        kind.append(2)
        if len(kind) >= mode_count + 1:
            break
    freq = np.asarray(freq_rows[:mode_count])
    kind = np.asarray(kind[:mode_count], dtype=np.int8)
    max_int = np.zeros(n, dtype=np.int64)
    used = half[: (mode_count + 1) // 2]
    if len(used):
        max_int = np.abs(used).max(axis=0)
    return freq, kind, max_int


def mode_count_for(space: Space, t_min: float, tol: float = 1e-14) -> int:
    """Mode count so every dropped mode has exp(-lambda t_min) < tol."""
    t_min = _check_time(t_min)
    if not 0 < tol < 1:
        raise InvalidParameterError(f"tol must be in (0, 1), got {tol}")
    lam_max = -math.log(tol) / t_min
    n = space.dim
    from scipy.special import gamma

    omega_n = math.pi ** (n / 2.0) / gamma(n / 2.0 + 1.0)
    volume = space.total_measure
    if isinstance(space, WeightedCircle):
        volume = space.length  # spectrum of the form scales with arc length
    count = omega_n * volume * lam_max ** (n / 2.0) / (2.0 * math.pi) ** n
    return max(int(math.ceil(count)) + 1, 8)


def suggest_grid(variant: str, lengths, mode_count: int, margin: int = 32):
    """Grid sizes per factor that keep the retained modes below Nyquist.

    The margin leaves headroom so quadratic and quartic mode products used by
    the operator residuals stay exactly integrable.
    """
    if variant == "weighted_circle":
        return (max(2048, 1 << (mode_count * 4 - 1).bit_length()),)
    freq, _, max_int = _enumerate_flat_modes(lengths, mode_count)
    sizes = []
    for j in range(len(np.atleast_1d(lengths))):
        m = 2 * int(max_int[j]) + 1 + margin
        sizes.append(int(math.ceil(m / 16.0)) * 16)
    return tuple(sizes)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Deterministic eigenvector signs: the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs[None, :]


def _weighted_circle_matrices(space: WeightedCircle):
    m = space.shape[0]
    h = space.length / m
    theta = space.grid.nodes[:, 0]
    cond = np.exp(-space.phi(theta + 0.5 * h)) / h  # edge (i, i+1)
    rows = np.arange(m)
    nxt = (rows + 1) % m
    diag = cond + np.roll(cond, 1)
    stiff = sp.csr_matrix(
        (np.concatenate([diag, -cond, -cond]),
         (np.concatenate([rows, rows, nxt]),
          np.concatenate([rows, nxt, rows]))),
        shape=(m, m),
    )
    mass = sp.diags(space.grid.weights)
    return stiff, mass


def _generalized_eigensolve(stiff, mass, k: int, label: str):
    n = stiff.shape[0]
    if k >= n:
        raise InvalidParameterError(
            f"mode_count {k} must be below the grid size {n} for {label}"
        )
    v0 = np.full(n, 1.0 / math.sqrt(n))
    try:
        vals, vecs = eigsh(stiff, k=k, M=mass, sigma=-1e-2, which="LM", v0=v0)
    except ArpackNoConvergence as exc:
        raise SolverError(f"{label} eigensolve did not converge: {exc}")
    except (ArpackError, RuntimeError) as exc:
        raise SolverError(f"{label} eigensolve failed: {exc}")
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = _fix_signs(vecs[:, order])
    vals[np.abs(vals) < 1e-9 * max(abs(vals[-1]), 1.0)] = np.maximum(
        vals[np.abs(vals) < 1e-9 * max(abs(vals[-1]), 1.0)], 0.0
    )
    return vals, vecs


def compute_basis(space: Space, mode_count: int | None = None,
                  t_min: float | None = None, tol: float = 1e-14):
    """Compute the lowest ``mode_count`` eigenpairs of the space.

    Exactly one of ``mode_count`` and ``t_min`` must be given; with ``t_min``
    the count retains every mode with exp(-lambda t_min) >= tol.
    """
    if (mode_count is None) == (t_min is None):
        raise InvalidParameterError("give exactly one of mode_count and t_min")
    if t_min is not None:
        mode_count = mode_count_for(space, t_min, tol=tol)
    mode_count = int(mode_count)
    if mode_count < 1:
        raise InvalidParameterError(f"mode_count must be positive, got {mode_count}")

    if isinstance(space, WeightedCircle):
        stiff, mass = _weighted_circle_matrices(space)
        vals, vecs = _generalized_eigensolve(stiff, mass, mode_count,
                                             "weighted circle")
        return DenseBasis(space, vals, np.ascontiguousarray(vecs.T))
    if isinstance(space, DiscreteSpace):
        stiff = space.stiffness
        mass = sp.diags(space.masses)
        vals, vecs = _generalized_eigensolve(stiff, mass, mode_count, "mesh")
        return MeshBasis(space, vals, np.ascontiguousarray(vecs.T))
    if isinstance(space, FlatTorus):
        freq, kind, max_int = _enumerate_flat_modes(space.lengths, mode_count)
        for j, m in enumerate(space.shape):
            if 2 * int(max_int[j]) + 1 > m:
                raise InvalidParameterError(
                    f"grid factor {j} has {m} points but the requested modes "
                    f"need at least {2 * int(max_int[j]) + 1}; rebuild the "
                    f"space with larger n_points"
                )
        return TrigBasis(space, freq, kind)
    raise CapabilityError(f"no eigenbasis backend for {type(space).__name__}")


# -- series evaluation -------------------------------------------------------


def _series_field(basis: SpectralBasis, t: float, mode) -> np.ndarray:
    out = np.zeros(basis.space.node_count)
    for block in basis.blocks():
        w = np.exp(-block.lam * t)
        if mode == "heat":
            out += np.einsum("k,kn,kn->n", w, block.phi, block.phi)
        elif mode == "dt":
            out += np.einsum("k,kn,kn->n", -block.lam * w, block.phi, block.phi)
        else:  # laplacian of the on-diagonal kernel
            if isinstance(basis, MeshBasis):
                gsq = basis.grad_square_nodes(block)
            else:
                gsq = (block.grad ** 2).sum(axis=-1)
            out += 2.0 * np.einsum("k,kn->n", w,
                                   -block.lam[:, None] * block.phi ** 2 + gsq)
    return out


def diag_heat_field(basis: SpectralBasis, t, tol=None) -> np.ndarray:
    """p(x, x, t) at every node."""
    t = _check_time(t)
    basis.truncation.require(t, 0, tol)
    return _series_field(basis, t, "heat")


def diag_heat(basis: SpectralBasis, x: int, t, tol=None) -> float:
    return float(diag_heat_field(basis, t, tol)[int(x)])


def diag_heat_time_derivative_field(basis: SpectralBasis, t, tol=None) -> np.ndarray:
    """d/dt p(x, x, t) at every node."""
    t = _check_time(t)
    basis.truncation.require(t, 1, tol)
    return _series_field(basis, t, "dt")


def diag_heat_time_derivative(basis: SpectralBasis, x: int, t, tol=None) -> float:
    return float(diag_heat_time_derivative_field(basis, t, tol)[int(x)])


def diag_laplacian_field(basis: SpectralBasis, t, tol=None) -> np.ndarray:
    """Delta_x p(x, x, t) at every node (series of eq-type
    2 exp(-lambda t)(-lambda phi^2 + |grad phi|^2))."""
    t = _check_time(t)
    basis.truncation.require(t, 1, tol)
    return _series_field(basis, t, "lap")


def diag_laplacian(basis: SpectralBasis, x: int, t, tol=None) -> float:
    return float(diag_laplacian_field(basis, t, tol)[int(x)])


def heat_kernel_row(basis: SpectralBasis, x: int, t, tol=None) -> np.ndarray:
    """p(x, y, t) for one node x against every node y."""
    t = _check_time(t)
    basis.truncation.require(t, 0, tol)
    x = int(x)
    if not 0 <= x < basis.space.node_count:
        raise InvalidParameterError(f"node index {x} out of range")
    out = np.zeros(basis.space.node_count)
    for block in basis.blocks():
        w = np.exp(-block.lam * t) * block.phi[:, x]
        out += w @ block.phi
    return out


def heat_kernel(basis: SpectralBasis, x: int, y: int, t, tol=None) -> float:
    """Truncated heat kernel between two grid nodes."""
    t = _check_time(t)
    basis.truncation.require(t, 0, tol)
    x, y = int(x), int(y)
    n = basis.space.node_count
    if not (0 <= x < n and 0 <= y < n):
        raise InvalidParameterError(f"node indices ({x}, {y}) out of range")
    total = 0.0
    for block in basis.blocks():
        total += float(np.sum(np.exp(-block.lam * t)
                              * block.phi[:, x] * block.phi[:, y]))
    return total


def embedding_coordinates(basis: SpectralBasis, t, node_indices=None) -> np.ndarray:
    """Truncated heat-kernel embedding coordinates exp(-lambda t) phi_i(x).

    Exposed for plotting and qualitative inspection only; no isometry claims
    are attached to the finite truncation.
    """
    t = _check_time(t)
    idx = (np.arange(basis.space.node_count) if node_indices is None
           else np.atleast_1d(node_indices))
    out = np.empty((len(idx), basis.mode_count))
    for block in basis.blocks():
        w = np.exp(-block.lam * t)
        out[:, block.start:block.start + len(block.lam)] = (block.phi[:, idx] * w[:, None]).T
    return out


def check_positivity(basis: SpectralBasis, t, sample: int = 64, tol=None):
    """Smallest sampled off-diagonal kernel value and a pass flag.

    Sampling: ``sample`` evenly spaced source nodes against all targets.
    The flag is advisory; truncated expansions may dip slightly negative.
    """
    t = _check_time(t)
    basis.truncation.require(t, 0, tol)
    n = basis.space.node_count
    sources = np.unique(np.linspace(0, n - 1, min(sample, n)).astype(int))
    rows = np.zeros((len(sources), n))
    for block in basis.blocks():
        w = np.exp(-block.lam * t)
        rows += (block.phi[:, sources] * w[:, None]).T @ block.phi
    smallest = float(rows.min())
    return smallest, bool(smallest >= -1e-8)


def fit_growth_constants(basis: SpectralBasis) -> dict:
    """Fitted eigen-growth constants (diagnostics, not assertions).

    Returns the smallest c with lambda_i >= c i^(2/N) over retained modes and
    the smallest C bounding sup|phi_i| <= C lambda_i^(N/4) and
    sup|grad phi_i| <= C lambda_i^((N+2)/4) for the nonconstant modes.
    """
    n_upper = basis.space.metadata.dim_upper
    lam = basis.lambdas
    idx = np.arange(len(lam))
    pos = idx >= 1
    weyl_c = float(np.min(lam[pos] / idx[pos] ** (2.0 / n_upper))) if pos.any() else 0.0
    sup_c = 0.0
    grad_c = 0.0
    for block in basis.blocks():
        sel = block.start + np.arange(len(block.lam)) >= 1
        if not sel.any():
            continue
        lam_b = block.lam[sel]
        sup_phi = np.abs(block.phi[sel]).max(axis=1)
        sup_grad = np.sqrt((block.grad[sel] ** 2).sum(axis=-1)).max(axis=1)
        sup_c = max(sup_c, float((sup_phi / lam_b ** (n_upper / 4.0)).max()))
        grad_c = max(grad_c, float((sup_grad / lam_b ** ((n_upper + 2.0) / 4.0)).max()))
    return {
        "weyl_lower": weyl_c,
        "sup_norm": sup_c,
        "sup_gradient": grad_c,
        "dim_upper": float(n_upper),
    }


def fit_gaussian_bound(basis: SpectralBasis, t_grid) -> float:
    """Fitted C with p(x, x, t) <= C / m(B_sqrt(t)(x)) over the sampled grid.

    A diagnostic constant (the epsilon in theoretical Gaussian bounds is fixed
    implicitly by the single-constant fit); used for sanity checks only.
    """
    worst = 0.0
    for t in np.atleast_1d(t_grid):
        t = _check_time(t)
        diag = diag_heat_field(basis, t)
        vols = basis.space.ball_volume_table([math.sqrt(t)])[:, 0]
        worst = max(worst, float((diag * vols).max()))
    return worst


def remix_basis(basis: SpectralBasis, rng, cluster_rtol: float = 1e-8) -> DenseBasis:
    """Random orthogonal remixing inside each degenerate eigenvalue cluster.

    Used to verify that assembled objects (the pull-back metric in particular)
    do not depend on the arbitrary basis choice within eigenspaces.
    """
    dense = basis.densify()
    lam = dense.lambdas
    phi = np.array(dense.phi)
    start = 0
    for i in range(1, len(lam) + 1):
        end_of_cluster = (
            i == len(lam)
            or abs(lam[i] - lam[i - 1]) > cluster_rtol * max(lam[i], 1.0)
        )
        if end_of_cluster:
            size = i - start
            if size > 1:
                a = rng.normal(size=(size, size))
                q, r = np.linalg.qr(a)
                q = q * np.sign(np.diag(r))[None, :]
                phi[start:i] = q.T @ phi[start:i]
            start = i
    return DenseBasis(dense.space, lam.copy(), phi)


# -- binary export ------------------------------------------------------------


def save_basis(basis: SpectralBasis, path) -> None:
    """Write the eigen table: header, lambda array, row-major phi samples.

    A JSON sidecar ``<path>.json`` records the space descriptor, grid size
    and truncation metadata.  Reloading and re-saving reproduces the file
    byte for byte.
    """
    path = str(path)
    phi = basis.phi_matrix()
    k, n = phi.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _BIN_VERSION))
        fh.write(struct.pack("<QQ", k, n))
        fh.write(np.ascontiguousarray(basis.lambdas, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(phi, dtype="<f8").tobytes())
    desc = space_to_descriptor(basis.space)
    if hasattr(basis.space, "shape"):
        desc["n_points"] = list(basis.space.shape)
    sidecar = {
        "format": "heatlens-basis",
        "binary_version": _BIN_VERSION,
        "toolkit_version": __version__,
        "mode_count": k,
        "grid_size": n,
        "space": desc,
        "truncation": {
            "mode_count": basis.truncation.mode_count,
            "lambda_max": basis.truncation.lambda_max,
            "dim": basis.truncation.dim,
            "weyl_coefficient": basis.truncation.weyl_coefficient,
        },
    }
    with open(path + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_basis(path, space: Space | None = None):
    """Read a basis table written by :func:`save_basis`."""
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InvalidParameterError(f"{path} is not a heatlens basis table")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _BIN_VERSION:
            raise InvalidParameterError(
                f"{path}: unsupported basis table version {version}"
            )
        k, n = struct.unpack("<QQ", fh.read(16))
        lam = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        phi = np.frombuffer(fh.read(8 * k * n), dtype="<f8").reshape(k, n).copy()
    if space is None:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        desc = sidecar["space"]
        space = space_from_descriptor(desc, n_points=desc.get("n_points"))
    if space.node_count != n:
        raise InvalidParameterError(
            f"basis table has {n} nodes but the space has {space.node_count}"
        )
    if isinstance(space, DiscreteSpace):
        return MeshBasis(space, lam, phi)
    return DenseBasis(space, lam, phi)
