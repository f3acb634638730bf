"""Residuals and analytic Jacobians of the tracking energy.

Unknowns are stacked per vertex as 6-vectors ``(x, y, z, phi1, phi2, phi3)``.
Every term returns a :class:`TermResult`: ``G`` residual groups of size
``R``, each touching ``K`` vertices, with dense per-group Jacobian blocks of
shape (R, K, 6). Gated residuals are stored as exact zeros, in both the
residual and its blocks.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import project_jacobian_unchecked, project_unchecked
from .imaging import HogParams, dominant_direction, gradient_bin_map, hog_in_box, sample_bilinear
from .mesh import MeshError, barycentric_of_point

TERMS = ("photo", "smooth", "edge", "arap", "vel", "acc", "tex")
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class EnergyWeights:
    lambda_photo: float = 1.0
    lambda_smooth: float = 2.0
    lambda_edge: float = 10.0
    lambda_arap: float = 2.0
    lambda_vel: float = 0.1
    lambda_acc: float = 0.1
    lambda_tex: float = 0.5
    sigma_color_threshold: float = 60.0
    rho_angle_threshold: float = 45.0
    smoothing_sigma: float = 2.0
    # silhouette vertices sample the blurred background; leave them out
    photo_skip_boundary: bool = True

    def __post_init__(self):
        for term in TERMS:
            lam = self.weight(term)
            if not np.isfinite(lam) or lam < 0:
                raise ValueError(f"lambda_{term} must be a non-negative real, got {lam}")
        for name in ("sigma_color_threshold", "rho_angle_threshold", "smoothing_sigma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")

    def weight(self, term):
        return getattr(self, f"lambda_{term}")


@dataclass
class DeformState:
    V: np.ndarray
    Phi: np.ndarray
    V_prev: np.ndarray
    V_prev2: np.ndarray = None

    @property
    def n_vertices(self):
        return self.V.shape[0]

    def unknowns(self):
        return np.hstack([self.V, self.Phi])

    def apply_step(self, delta):
        """New state with ``delta`` (N, 6) or flat (6N,) added to (V, Phi)."""
        d = np.asarray(delta, dtype=np.float64).reshape(self.n_vertices, 6)
        return replace(self, V=self.V + d[:, :3], Phi=self.Phi + d[:, 3:])


@dataclass
class TermResult:
    name: str
    residuals: np.ndarray
    vertex_ids: np.ndarray
    blocks: np.ndarray = None
    active: np.ndarray = None
    gate: tuple = None

    def squared_norm(self):
        return float(np.sum(self.residuals ** 2))

    def dense_jacobian(self, n_vertices):
        """(G*R, 6N) dense Jacobian; for tests and small problems only."""
        G, R = self.residuals.shape
        J = np.zeros((G * R, 6 * n_vertices))
        for g in range(G):
            for a, v in enumerate(self.vertex_ids[g]):
                J[g * R:(g + 1) * R, 6 * v:6 * v + 6] += self.blocks[g, :, a, :]
        return J


@dataclass(frozen=True, eq=False)
class TriangleDfgTable:
    """Per-face texture-map DFG encoded as barycentric weights of its endpoint."""

    weights: np.ndarray
    centers: np.ndarray
    valid: np.ndarray
    directions: np.ndarray = field(repr=False, default=None)


@dataclass
class Gates:
    """Non-smooth decisions frozen at a linearisation point."""

    photo: np.ndarray = None
    tex_active: np.ndarray = None
    tex_sign: np.ndarray = None
    tex_field: np.ndarray = None


@dataclass
class EnergyInputs:
    K: object
    frame_smoothed: np.ndarray = None
    field: object = None
    table: TriangleDfgTable = None
    use_acceleration: bool = True


# -- rotations ---------------------------------------------------------------

def _rot_factors(phi):
    a, b, c = phi[:, 0], phi[:, 1], phi[:, 2]
    n = phi.shape[0]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    one, zero = np.ones(n), np.zeros(n)
    Rx = np.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).reshape(n, 3, 3)
    Ry = np.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).reshape(n, 3, 3)
    Rz = np.stack([cc, -sc, zero, sc, cc, zero, zero, zero, one], -1).reshape(n, 3, 3)
    dRx = np.stack([zero, zero, zero, zero, -sa, -ca, zero, ca, -sa], -1).reshape(n, 3, 3)
    dRy = np.stack([-sb, zero, cb, zero, zero, zero, -cb, zero, -sb], -1).reshape(n, 3, 3)
    dRz = np.stack([-sc, -cc, zero, cc, -sc, zero, zero, zero, zero], -1).reshape(n, 3, 3)
    return Rx, Ry, Rz, dRx, dRy, dRz


def euler_to_rotation(phi):
    """R = Rz(phi3) @ Ry(phi2) @ Rx(phi1); accepts (3,) or (N, 3)."""
    p = np.asarray(phi, dtype=np.float64)
    single = p.ndim == 1
    Rx, Ry, Rz, *_ = _rot_factors(p.reshape(-1, 3))
    R = Rz @ Ry @ Rx
    return R[0] if single else R


def euler_rotation_derivatives(phi):
    """(N, 3, 3, 3) array whose [:, k] is dR/dphi_k."""
    Rx, Ry, Rz, dRx, dRy, dRz = _rot_factors(np.asarray(phi, dtype=np.float64).reshape(-1, 3))
    return np.stack([Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx], axis=1)


def rotation_to_euler(R):
    """Angles reproducing ``R`` under :func:`euler_to_rotation` (away from gimbal lock)."""
    R = np.asarray(R, dtype=np.float64)
    b = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    a = np.arctan2(R[2, 1], R[2, 2])
    c = np.arctan2(R[1, 0], R[0, 0])
    return np.array([a, b, c])


# -- individual terms --------------------------------------------------------

def _identity_blocks(G, sign=1.0):
    blk = np.zeros((G, 3, 1, 6))
    blk[:, :, 0, :3] = sign * np.eye(3)
    return blk


def residuals_photo(state, mesh, frame_smoothed, K, sigma_threshold=60.0, gate=None,
                    jacobian=True, skip=None):
    """Color of the smoothed frame at each projected vertex minus its template color.

    Residuals whose largest channel error exceeds ``sigma_threshold``, that
    project out of view, that sit behind the camera or that are flagged in
    ``skip`` are zeroed. Passing ``gate`` (bool mask) freezes the threshold
    decision instead.
    """
    uv, in_front = project_unchecked(K, state.V)
    vals, grads, in_view = sample_bilinear(frame_smoothed, uv, with_gradient=jacobian)
    r = vals - mesh.vertex_colors
    ok = in_front & in_view
    if skip is not None:
        ok &= ~np.asarray(skip, dtype=bool)
    if gate is None:
        active = ok & (np.max(np.abs(r), axis=1) <= sigma_threshold)
    else:
        active = np.asarray(gate, dtype=bool) & ok
    r = np.where(active[:, None], r, 0.0)
    n = state.n_vertices
    ids = np.arange(n)[:, None]
    blocks = None
    if jacobian:
        P = project_jacobian_unchecked(K, state.V)
        blocks = np.zeros((n, 3, 1, 6))
        blocks[:, :, 0, :3] = np.einsum("nck,nkj->ncj", grads, P)
        blocks[~active] = 0.0
    return TermResult("photo", r, ids, blocks, active)


def residuals_smooth(state, mesh, jacobian=True):
    """(V_i - V_j) - (V^_i - V^_j) for every ordered neighbour pair."""
    i, j = mesh.edges.T
    r = (state.V[i] - state.V[j]) - mesh.rest_edge_vectors()
    blocks = None
    if jacobian:
        blocks = np.concatenate([_identity_blocks(len(i)), _identity_blocks(len(i), -1.0)], axis=2)
    return TermResult("smooth", r, mesh.edges, blocks)


def residuals_edge(state, mesh, jacobian=True):
    """Current minus rest length of every ordered edge.

    Coincident endpoints keep their residual but get a zero Jacobian.
    """
    i, j = mesh.edges.T
    e = state.V[i] - state.V[j]
    length = np.linalg.norm(e, axis=1)
    r = (length - mesh.rest_edge_lengths)[:, None]
    blocks = None
    if jacobian:
        u = np.zeros_like(e)
        ok = length > _NORM_EPS
        u[ok] = e[ok] / length[ok, None]
        blocks = np.zeros((len(i), 1, 2, 6))
        blocks[:, 0, 0, :3] = u
        blocks[:, 0, 1, :3] = -u
    return TermResult("edge", r, mesh.edges, blocks)


def residuals_arap(state, mesh, jacobian=True):
    """(V_i - V_j) - R(Phi_i)(V^_i - V^_j) for every ordered neighbour pair."""
    i, j = mesh.edges.T
    rest = mesh.rest_edge_vectors()
    R = euler_to_rotation(state.Phi)
    r = (state.V[i] - state.V[j]) - np.einsum("eab,eb->ea", R[i], rest)
    blocks = None
    if jacobian:
        dR = euler_rotation_derivatives(state.Phi)[i]
        blocks = np.zeros((len(i), 3, 2, 6))
        blocks[:, :, 0, :3] = np.eye(3)
        blocks[:, :, 0, 3:] = -np.einsum("ekab,eb->eak", dR, rest)
        blocks[:, :, 1, :3] = -np.eye(3)
    return TermResult("arap", r, mesh.edges, blocks)


def residuals_velocity(state, jacobian=True):
    """V_i - V_i^t."""
    n = state.n_vertices
    blocks = _identity_blocks(n) if jacobian else None
    return TermResult("vel", state.V - state.V_prev, np.arange(n)[:, None], blocks)


def residuals_acceleration(state, jacobian=True):
    """(V_i - V_i^t) - (V_i^t - V_i^{t-1})."""
    if state.V_prev2 is None:
        raise ValueError("acceleration term needs V_prev2")
    n = state.n_vertices
    r = state.V - 2.0 * state.V_prev + state.V_prev2
    blocks = _identity_blocks(n) if jacobian else None
    return TermResult("acc", r, np.arange(n)[:, None], blocks)


def precompute_texture_dfg(mesh, hog_params=None):
    """Texture-map dominant gradient per face, as barycentric weights.

    The HOG neighbourhood of a face is the pixel bounding box of its UV
    triangle. Faces without a line pattern, or with degenerate UVs, are
    flagged invalid.
    """
    hp = hog_params or HogParams()
    bm = gradient_bin_map(mesh.texture, hp.bins, hp.mag_threshold, hp.presmooth)
    w, h = mesh.texture_size
    nf = mesh.n_faces
    weights = np.zeros((nf, 3))
    centers = np.zeros((nf, 2))
    directions = np.zeros((nf, 2))
    valid = np.zeros(nf, dtype=bool)
    for f, (k, m, l) in enumerate(mesh.faces):
        tri = mesh.uvs[[k, m, l]]
        z = tri.mean(axis=0)
        centers[f] = z
        lo = np.clip(np.floor(tri.min(axis=0)), 0, [w - 1, h - 1])
        hi = np.clip(np.floor(tri.max(axis=0)), 0, [w - 1, h - 1])
        hist = hog_in_box(bm, hp.bins, lo[0], lo[1], hi[0], hi[1])
        d = dominant_direction(hist, hp.freq_threshold)
        if not d.any():
            continue
        try:
            weights[f] = barycentric_of_point(z + d, *tri)
        except MeshError:
            continue
        directions[f] = d
        valid[f] = True
    return TriangleDfgTable(weights=weights, centers=centers, valid=valid, directions=directions)


def residuals_texture(state, mesh, table, field, K, angle_threshold=45.0, gate=None,
                      jacobian=True):
    """Projected template DFG vs. frame DFG per face, sign-ambiguity aware.

    The projected direction ``d_M`` is normalised; the residual is
    ``d_M - s*d_F`` with ``s`` the sign giving the smaller difference. Faces
    where either direction is zero, or whose resolved angle exceeds
    ``angle_threshold`` degrees, contribute zero. With ``gate`` the activity
    mask, signs and frame directions are held fixed.
    """
    faces = mesh.faces
    nf = faces.shape[0]
    Vt = state.V[faces]                                     # (F, 3, 3)
    B = table.weights
    b3 = np.einsum("fa,fac->fc", B, Vt)
    z3 = Vt.mean(axis=1)
    pb, fb = project_unchecked(K, b3)
    pz, fz = project_unchecked(K, z3)
    d = pb - pz
    nd = np.linalg.norm(d, axis=1)
    ok = table.valid & fb & fz & (nd > _NORM_EPS)
    n = np.zeros_like(d)
    n[ok] = d[ok] / nd[ok, None]

    if gate is None:
        dF = np.where(ok[:, None], field.lookup(pz), 0.0)
        has_f = np.any(dF != 0, axis=1)
        dot = np.einsum("fc,fc->f", n, dF)
        sign = np.where(dot >= 0, 1.0, -1.0)
        cos_thr = np.cos(np.radians(angle_threshold))
        active = ok & has_f & (np.abs(dot) >= cos_thr)
    else:
        dF = gate.tex_field
        sign = gate.tex_sign
        active = gate.tex_active & ok
    r = np.where(active[:, None], n - sign[:, None] * dF, 0.0)

    blocks = None
    if jacobian:
        Pb = project_jacobian_unchecked(K, b3)
        Pz = project_jacobian_unchecked(K, z3)
        safe = np.where(nd > _NORM_EPS, nd, 1.0)
        dn = (np.eye(2)[None] - np.einsum("fa,fb->fab", n, n)) / safe[:, None, None]
        blocks = np.zeros((nf, 2, 3, 6))
        for a in range(3):
            dd = Pb * B[:, a, None, None] - Pz / 3.0
            blocks[:, :, a, :3] = dn @ dd
        blocks[~active] = 0.0
    return TermResult("tex", r, faces, blocks, active, gate=(dF, sign))


# -- whole energy ------------------------------------------------------------

def evaluate_terms(state, mesh, inputs, weights, gates=None, jacobian=True):
    """All enabled terms (lambda > 0 and inputs present) at ``state``.

    Returns ``(terms, gates)`` where ``gates`` records the decisions made,
    so a later call can hold them fixed.
    """
    terms = {}
    new_gates = Gates()
    g = gates or Gates()
    if weights.lambda_photo > 0 and inputs.frame_smoothed is not None:
        t = residuals_photo(state, mesh, inputs.frame_smoothed, inputs.K,
                            weights.sigma_color_threshold, gate=g.photo, jacobian=jacobian,
                            skip=mesh.boundary if weights.photo_skip_boundary else None)
        terms["photo"] = t
        new_gates.photo = t.active
    if weights.lambda_smooth > 0:
        terms["smooth"] = residuals_smooth(state, mesh, jacobian)
    if weights.lambda_edge > 0:
        terms["edge"] = residuals_edge(state, mesh, jacobian)
    if weights.lambda_arap > 0:
        terms["arap"] = residuals_arap(state, mesh, jacobian)
    if weights.lambda_vel > 0:
        terms["vel"] = residuals_velocity(state, jacobian)
    if weights.lambda_acc > 0 and inputs.use_acceleration and state.V_prev2 is not None:
        terms["acc"] = residuals_acceleration(state, jacobian)
    if (weights.lambda_tex > 0 and inputs.field is not None and inputs.table is not None):
        t = residuals_texture(state, mesh, inputs.table, inputs.field, inputs.K,
                              weights.rho_angle_threshold,
                              gate=g if g.tex_active is not None else None,
                              jacobian=jacobian)
        terms["tex"] = t
        new_gates.tex_active = t.active
        new_gates.tex_field, new_gates.tex_sign = t.gate
    return terms, new_gates


def term_energies(terms, weights):
    """Weighted squared norm per term; terms not present are reported as 0."""
    out = {name: 0.0 for name in TERMS}
    for name, t in terms.items():
        out[name] = weights.weight(name) * t.squared_norm()
    return out


def total_energy(state, mesh, inputs, weights, gates=None):
    """Sum over enabled terms of lambda times squared residual norm."""
    terms, _ = evaluate_terms(state, mesh, inputs, weights, gates=gates, jacobian=False)
    return float(sum(term_energies(terms, weights).values()))
