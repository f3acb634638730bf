"""Sequential per-frame tracking, evaluation metrics and per-frame exports."""

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_vertex_array
from .camera import Intrinsics, project_unchecked
from .energy import TERMS, DeformState, EnergyInputs, EnergyWeights, precompute_texture_dfg
from .imaging import HogParams, build_orientation_field, gaussian_smooth
from .mesh import write_obj
from .solver import SolverError, SolverOptions, gauss_newton

METRICS_FIELDS = (["frame_index", "mean_error", "max_error", "bbox_diagonal", "energy_total"]
                  + [f"E_{t}" for t in TERMS] + ["iterations", "pruned_fraction"])


class TrackingError(RuntimeError):
    """Tracking failed on a specific frame; the session cannot continue."""

    def __init__(self, frame_index, message):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


@dataclass
class TrackingSession:
    template: object
    K: Intrinsics
    weights: EnergyWeights
    solver_options: SolverOptions
    hog_params: HogParams
    state: DeformState
    table: object = None
    frames_tracked: int = 0
    failed: bool = False


@dataclass
class FrameResult:
    state: DeformState
    frame_index: int
    energies: dict
    energy_total: float
    iterations: int
    converged: bool
    pruned_fraction: float
    gated_fraction: float
    orientation_field_built: bool
    log: list = field(default_factory=list, repr=False)
    field: object = field(default=None, repr=False)


def initialize(template, K, weights=None, solver_options=None, hog_params=None, initial=None):
    """Start a session. Without ``initial`` the first estimate is the template."""
    n = template.n_vertices
    V0 = (np.array(template.vertices) if initial is None
          else check_vertex_array(initial, n, name="initial alignment").copy())
    weights = weights or EnergyWeights()
    hog_params = hog_params or HogParams()
    state = DeformState(V=V0.copy(), Phi=np.zeros((n, 3)), V_prev=V0.copy(), V_prev2=V0.copy())
    table = precompute_texture_dfg(template, hog_params)
    return TrackingSession(template, K, weights, solver_options or SolverOptions(), hog_params,
                           state, table)


def track_frame(session, frame):
    """Register the template to ``frame`` starting from the previous estimate.

    On success the session state rolls over; on solver failure the session
    is marked failed and :class:`TrackingError` is raised.
    """
    t = session.frames_tracked
    if session.failed:
        raise TrackingError(t, "session aborted after an earlier failure")
    frame = check_image(frame, name="frame", channels=3)
    w = session.weights
    mesh = session.template
    smoothed = gaussian_smooth(frame, w.smoothing_sigma) if w.lambda_photo > 0 else None
    field = build_orientation_field(frame, session.hog_params) if w.lambda_tex > 0 else None
    inputs = EnergyInputs(K=session.K, frame_smoothed=smoothed, field=field,
                          table=session.table, use_acceleration=t > 0)
    try:
        gn = gauss_newton(session.state, mesh, inputs, w, session.solver_options, frame=t)
    except SolverError as exc:
        session.failed = True
        raise TrackingError(t, str(exc)) from exc

    s = gn.state
    final = gn.log[-1] if gn.log[-1].accepted else [r for r in gn.log if r.accepted][-1]
    pruned = gated = 0.0
    if gn.gates is not None and gn.gates.photo is not None:
        pruned = float(1.0 - gn.gates.photo.mean())
    if gn.gates is not None and gn.gates.tex_active is not None:
        valid = session.table.valid
        if valid.any():
            gated = float(1.0 - gn.gates.tex_active[valid].mean())
    V = s.V.copy()
    session.state = DeformState(V=V, Phi=s.Phi.copy(), V_prev=V.copy(),
                                V_prev2=session.state.V_prev.copy())
    session.frames_tracked += 1
    return FrameResult(state=session.state, frame_index=t, energies=dict(final.energies),
                       energy_total=final.total, iterations=gn.iterations,
                       converged=gn.converged, pruned_fraction=pruned, gated_fraction=gated,
                       orientation_field_built=field is not None, log=gn.log, field=field)


def evaluate_against_ground_truth(result, truth):
    """Per-vertex Euclidean error (by index) and the truth's bbox diagonal."""
    R = np.asarray(result, dtype=np.float64)
    T = np.asarray(truth, dtype=np.float64)
    if R.shape != T.shape or R.ndim != 2 or R.shape[1] != 3:
        raise ValueError(f"vertex count mismatch: result {R.shape} vs truth {T.shape}")
    d = np.linalg.norm(R - T, axis=1)
    diag = float(np.linalg.norm(T.max(axis=0) - T.min(axis=0)))
    return {"mean": float(d.mean()), "max": float(d.max()), "bbox_diagonal": diag}


def draw_wireframe(frame, vertices, mesh, K, color=(255, 0, 0)):
    """Frame with the projected mesh edges drawn on top."""
    from PIL import Image, ImageDraw

    img = Image.fromarray(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    uv, front = project_unchecked(K, np.asarray(vertices, dtype=np.float64))
    i, j = mesh.edges.T
    once = (i < j) & front[i] & front[j]
    for a, b in zip(i[once], j[once]):
        draw.line([tuple(uv[a]), tuple(uv[b])], fill=tuple(color), width=1)
    return np.asarray(img, dtype=np.float64)


def metrics_row(frame_result, errors=None):
    e = errors or {}
    row = {"frame_index": frame_result.frame_index,
           "mean_error": e.get("mean", float("nan")),
           "max_error": e.get("max", float("nan")),
           "bbox_diagonal": e.get("bbox_diagonal", float("nan")),
           "energy_total": frame_result.energy_total,
           "iterations": frame_result.iterations,
           "pruned_fraction": frame_result.pruned_fraction}
    for t in TERMS:
        row[f"E_{t}"] = frame_result.energies.get(t, 0.0)
    return row


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def append_metrics_row(path, row):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_FIELDS)
        w.writerow([_fmt(row[k]) for k in METRICS_FIELDS])


def export_frame_outputs(vertices, mesh, frame, K, out_dir, frame_index, row=None,
                         overlay=True):
    """Write ``meshes/frame_XXXX.obj``, ``overlays/frame_XXXX.png`` and a metrics row."""
    from .imaging import write_image

    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    paths = {"mesh": out / "meshes" / f"frame_{frame_index:04d}.obj"}
    write_obj(paths["mesh"], vertices, mesh)
    if overlay:
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        paths["overlay"] = out / "overlays" / f"frame_{frame_index:04d}.png"
        write_image(paths["overlay"], draw_wireframe(frame, vertices, mesh, K))
    if row is not None:
        paths["metrics"] = out / "metrics.csv"
        append_metrics_row(paths["metrics"], row)
    return paths


class SurfaceTracker(BaseEstimator):
    """Estimator wrapper: ``fit`` on a template, ``transform`` a frame sequence.

    ``transform`` continues from the last tracked frame, so calling it twice
    on consecutive chunks equals one call on the whole sequence. Refit to
    start over.
    """

    def __init__(self, fx=500.0, fy=500.0, cx=0.0, cy=0.0, lambda_photo=1.0,
                 lambda_smooth=2.0, lambda_edge=10.0, lambda_arap=2.0, lambda_vel=0.1,
                 lambda_acc=0.1, lambda_tex=0.5, sigma_color_threshold=60.0,
                 rho_angle_threshold=45.0, smoothing_sigma=2.0,
                 photo_skip_boundary=True, hog_bins=36, hog_window=8,
                 hog_mag_threshold=10.0, hog_freq_threshold=16, hog_stride=4,
                 hog_presmooth=1.0, max_iters=20, mu0=1e-4, pcg_iters=200, pcg_tol=1e-5,
                 step_tol=1e-6):
        self.fx = fx
        self.fy = fy
        self.cx = cx
        self.cy = cy
        self.lambda_photo = lambda_photo
        self.lambda_smooth = lambda_smooth
        self.lambda_edge = lambda_edge
        self.lambda_arap = lambda_arap
        self.lambda_vel = lambda_vel
        self.lambda_acc = lambda_acc
        self.lambda_tex = lambda_tex
        self.sigma_color_threshold = sigma_color_threshold
        self.rho_angle_threshold = rho_angle_threshold
        self.smoothing_sigma = smoothing_sigma
        self.photo_skip_boundary = photo_skip_boundary
        self.hog_bins = hog_bins
        self.hog_window = hog_window
        self.hog_mag_threshold = hog_mag_threshold
        self.hog_freq_threshold = hog_freq_threshold
        self.hog_stride = hog_stride
        self.hog_presmooth = hog_presmooth
        self.max_iters = max_iters
        self.mu0 = mu0
        self.pcg_iters = pcg_iters
        self.pcg_tol = pcg_tol
        self.step_tol = step_tol

    def _components(self):
        weights = EnergyWeights(**{f.name: getattr(self, f.name) for f in fields(EnergyWeights)})
        hog = HogParams(bins=self.hog_bins, window=self.hog_window,
                        mag_threshold=self.hog_mag_threshold,
                        freq_threshold=self.hog_freq_threshold, stride=self.hog_stride,
                        presmooth=self.hog_presmooth)
        solver = SolverOptions(max_iters=self.max_iters, mu0=self.mu0, pcg_iters=self.pcg_iters,
                               pcg_tol=self.pcg_tol, step_tol=self.step_tol)
        return Intrinsics(self.fx, self.fy, self.cx, self.cy), weights, hog, solver

    def fit(self, X, y=None, initial=None):
        """``X`` is a :class:`~fabtrack.mesh.TemplateMesh`; ``y`` is ignored."""
        K, weights, hog, solver = self._components()
        self.session_ = initialize(X, K, weights, solver, hog, initial=initial)
        self.n_vertices_ = X.n_vertices
        self.frame_results_ = []
        return self

    def transform(self, X):
        """Track every frame of ``X`` (iterable of (H, W, 3) images).

        Returns the (T, N, 3) per-frame vertex estimates.
        """
        check_is_fitted(self, "session_")
        out = []
        for frame in X:
            res = track_frame(self.session_, frame)
            self.frame_results_.append(res)
            out.append(res.state.V.copy())
        if not out:
            return np.zeros((0, self.n_vertices_, 3))
        return np.stack(out)

    def score(self, X, y):
        """Negative sequence-mean vertex error of tracking ``X`` against truths ``y``."""
        pred = self.transform(X)
        errs = [evaluate_against_ground_truth(p, t)["mean"] for p, t in zip(pred, y)]
        return -float(np.mean(errs))
