"""Synthetic ground-truth scenes: textures, meshes, motions and a z-buffer rasterizer."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import DEPTH_EPS, Intrinsics, project_unchecked
from .imaging import write_image
from .mesh import build_template, write_obj

GT_MAGIC = "FABTRACK-GT 1"
SEQUENCE_KINDS = ("translation", "rotation", "bend")


# -- textures ----------------------------------------------------------------

def _size(size):
    if np.isscalar(size):
        return int(size), int(size)
    w, h = size
    return int(w), int(h)


def make_stripe_texture(size, period=8, angle=0.0, color_a=(40, 40, 40),
                        color_b=(200, 200, 200)):
    """Two-color stripes running along ``angle`` degrees (0 = horizontal bands).

    Intensity changes along the stripe normal, so gradients point at
    ``angle + 90`` (mod 180).
    """
    if period < 2:
        raise ValueError(f"stripe period must be >= 2, got {period}")
    w, h = _size(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.radians(angle)
    s = -xx * np.sin(t) + yy * np.cos(t)
    band = np.floor(s / (period / 2.0)).astype(np.int64) % 2 == 1
    img = np.empty((h, w, 3))
    img[~band] = color_a
    img[band] = color_b
    return img


def make_smooth_texture(size, seed=0, waves=6, wavelength=(0.25, 0.6)):
    """Random low-frequency color pattern (sum of plane waves per channel).

    ``wavelength`` is given as a fraction of the texture width.
    """
    w, h = _size(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(waves):
            lam = rng.uniform(*wavelength) * w
            th = rng.uniform(0, np.pi)
            ph = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / lam + ph)
        acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
        img[..., c] = np.rint(30.0 + 195.0 * acc)
    return img


def make_mixed_texture(size, border=0.25, period=8, angle=0.0, seed=0,
                       color_a=(120, 120, 120), color_b=(160, 160, 160)):
    """Smooth color pattern on a border frame, plain stripes inside.

    ``border`` is the frame thickness as a fraction of each side.
    """
    w, h = _size(size)
    img = make_smooth_texture((w, h), seed=seed)
    bx, by = int(round(border * w)), int(round(border * h))
    stripes = make_stripe_texture((w, h), period, angle, color_a, color_b)
    img[by:h - by, bx:w - bx] = stripes[by:h - by, bx:w - bx]
    return img


# -- meshes ------------------------------------------------------------------

def make_grid_mesh(nx, ny, width, height, depth, texture, center=(0.0, 0.0)):
    """Planar ``nx`` x ``ny`` vertex grid facing the camera at ``depth``.

    The texture is stretched over the whole grid; image x/y follow world x/y.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2x2 vertices")
    th, tw = texture.shape[:2]
    u = np.linspace(0.0, 1.0, nx)
    v = np.linspace(0.0, 1.0, ny)
    uu, vv = np.meshgrid(u, v)
    V = np.column_stack([center[0] + (uu.ravel() - 0.5) * width,
                         center[1] + (vv.ravel() - 0.5) * height,
                         np.full(nx * ny, float(depth))])
    U = np.column_stack([uu.ravel() * tw, vv.ravel() * th])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    F = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return build_template(V, F, U, texture)


# -- rasterizer --------------------------------------------------------------

def _inside(E, dx, dy):
    top_left = (dy < 0) | ((dy == 0) & (dx > 0))
    return (E > 0) | ((E == 0) & top_left)


def rasterize(mesh, vertices, K, size, background=(0.0, 0.0, 0.0), chunk=512):
    """Unlit z-buffered render of ``mesh`` posed at ``vertices``.

    Coverage is tested at pixel centers (integer image coordinates) with a
    top-left fill rule. UVs are interpolated perspective-correctly and the
    texture is sampled nearest-neighbour. Returns ``(image, depth)``; depth
    is ``inf`` where nothing is drawn.
    """
    w, h = _size(size)
    V = np.asarray(vertices, dtype=np.float64)
    uv2d, front = project_unchecked(K, V)
    F = mesh.faces[np.all(front[mesh.faces], axis=1)]
    P = uv2d[F]                                   # (F, 3, 2)
    Z = V[F][:, :, 2]
    T = mesh.uvs[F]
    area = ((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
            - (P[:, 1, 1] - P[:, 0, 1]) * (P[:, 2, 0] - P[:, 0, 0]))
    flip = area < 0
    for arr in (P, Z, T):
        arr[flip, 1], arr[flip, 2] = arr[flip, 2].copy(), arr[flip, 1].copy()
    area = np.abs(area)
    keep = area > 0
    P, Z, T, area = P[keep], Z[keep], T[keep], area[keep]

    x0 = np.clip(np.ceil(P[:, :, 0].min(axis=1)), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(P[:, :, 0].max(axis=1)), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(P[:, :, 1].min(axis=1)), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(P[:, :, 1].max(axis=1)), -1, h - 1).astype(np.int64)
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    keep = (bw > 0) & (bh > 0)
    P, Z, T, area = P[keep], Z[keep], T[keep], area[keep]
    x0, y0, x1, y1, bw, bh = x0[keep], y0[keep], x1[keep], y1[keep], bw[keep], bh[keep]

    pix, dep, tex_uv = [], [], []
    order = np.argsort(bw * bh, kind="stable")
    for start in range(0, order.size, chunk):
        sel = order[start:start + chunk]
        mw, mh = int(bw[sel].max()), int(bh[sel].max())
        ox, oy = np.meshgrid(np.arange(mw), np.arange(mh))
        px = (x0[sel, None] + ox.ravel()[None, :]).astype(np.float64)
        py = (y0[sel, None] + oy.ravel()[None, :]).astype(np.float64)
        ok = (px <= x1[sel, None]) & (py <= y1[sel, None])
        p = P[sel]
        lam = []
        for k in range(3):
            a, b = p[:, (k + 1) % 3], p[:, (k + 2) % 3]
            dx, dy = (b[:, 0] - a[:, 0])[:, None], (b[:, 1] - a[:, 1])[:, None]
            E = dx * (py - a[:, 1, None]) - dy * (px - a[:, 0, None])
            ok &= _inside(E, dx, dy)
            lam.append(E / area[sel, None])
        lam = np.stack(lam, axis=-1)               # (S, M, 3)
        wz = lam / Z[sel][:, None, :]
        zinv = wz.sum(axis=-1)
        uv = np.einsum("smk,skc->smc", wz, T[sel]) / zinv[..., None]
        pix.append((py * w + px)[ok].astype(np.int64))
        dep.append((1.0 / zinv)[ok])
        tex_uv.append(uv[ok])

    image = np.empty((h, w, 3))
    image[:] = background
    depth = np.full((h, w), np.inf)
    if pix:
        pix, dep, tex_uv = np.concatenate(pix), np.concatenate(dep), np.concatenate(tex_uv)
        if pix.size:
            srt = np.lexsort((dep, pix))
            pix, dep, tex_uv = pix[srt], dep[srt], tex_uv[srt]
            first = np.ones(pix.size, dtype=bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, dep, tex_uv = pix[first], dep[first], tex_uv[first]
            th, tw = mesh.texture.shape[:2]
            col = np.clip(np.floor(tex_uv[:, 0]).astype(np.int64), 0, tw - 1)
            row = np.clip(np.floor(tex_uv[:, 1]).astype(np.int64), 0, th - 1)
            image.reshape(-1, 3)[pix] = mesh.texture[row, col]
            depth.reshape(-1)[pix] = dep
    return image, depth


# -- sequences ---------------------------------------------------------------

@dataclass
class SyntheticScene:
    template: object
    K: Intrinsics
    truths: np.ndarray
    frame_size: tuple
    background: np.ndarray
    kind: str = ""
    params: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.truths.shape[0]

    def render(self, t):
        return rasterize(self.template, self.truths[t], self.K, self.frame_size,
                         self.background)[0]

    def frames(self):
        for t in range(self.n_frames):
            yield self.render(t)


def rotate_about(V, center, axis, angle_deg):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    th = np.radians(angle_deg)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(th) * kx + (1 - np.cos(th)) * kx @ kx
    return (V - center) @ R.T + center


def bend(V, center, curvature):
    """Cylindrical bend of the x direction about ``center``, away from the camera.

    Arc length along x is preserved exactly; y is untouched.
    """
    out = np.array(V, dtype=np.float64)
    if curvature == 0:
        return out
    s = out[:, 0] - center[0]
    out[:, 0] = center[0] + np.sin(curvature * s) / curvature
    out[:, 2] = out[:, 2] + (1.0 - np.cos(curvature * s)) / curvature
    return out


def _check_visible(truths, K, size):
    w, h = size
    for t, V in enumerate(truths):
        if np.any(V[:, 2] <= DEPTH_EPS):
            raise ValueError(f"frame {t}: vertex behind the camera")
        uv, _ = project_unchecked(K, V)
        if (uv[:, 0] < 0).any() or (uv[:, 0] > w - 1).any() or (uv[:, 1] < 0).any() \
                or (uv[:, 1] > h - 1).any():
            raise ValueError(f"frame {t}: object leaves the {w}x{h} image")


def generate_sequence(kind, template, K, frame_size, frames, background=(0, 0, 0), **params):
    """Ground-truth vertex sequence for one of the parametric motions.

    Frame ``t`` (0-based) shows the motion after ``t + 1`` steps:

    * ``translation``: ``offset`` (3-vector) added per frame
    * ``rotation``: ``angle`` degrees per frame about ``axis`` through the
      template centroid (default: the viewing axis)
    * ``bend``: cylindrical bend along x with curvature ramping linearly
      to ``curvature`` at the last frame
    """
    if kind not in SEQUENCE_KINDS:
        raise ValueError(f"unknown sequence kind '{kind}', expected one of {SEQUENCE_KINDS}")
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    V0 = np.array(template.vertices)
    center = V0.mean(axis=0)
    steps = np.arange(1, frames + 1)
    if kind == "translation":
        off = np.asarray(params.get("offset", (0.0, 0.0, 0.0)), dtype=np.float64)
        truths = np.stack([V0 + k * off for k in steps])
    elif kind == "rotation":
        ang = float(params.get("angle", 1.0))
        axis = params.get("axis", (0.0, 0.0, 1.0))
        truths = np.stack([rotate_about(V0, center, axis, k * ang) for k in steps])
    else:
        kmax = float(params.get("curvature", 0.5))
        truths = np.stack([bend(V0, center, kmax * k / frames) for k in steps])
    _check_visible(truths, K, _size(frame_size))
    return SyntheticScene(template, K, truths, _size(frame_size),
                          np.asarray(background, dtype=np.float64), kind, dict(params))


# -- ground truth files --------------------------------------------------------

def write_ground_truth(path, truths):
    """Plain text: magic line, ``N T`` line, then T*N lines ``x y z``.

    Frame ``t`` occupies rows ``t*N .. t*N + N - 1``.
    """
    truths = np.asarray(truths, dtype=np.float64)
    T, N, _ = truths.shape
    with open(path, "w") as fh:
        fh.write(f"{GT_MAGIC}\n{N} {T}\n")
        np.savetxt(fh, truths.reshape(-1, 3), fmt="%.17g")


def read_ground_truth(path):
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != GT_MAGIC:
            raise ValueError(f"{path}: not a ground-truth file (header {magic!r})")
        N, T = (int(x) for x in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (N * T, 3):
        raise ValueError(f"{path}: expected {N * T} rows of 3 values, got {data.shape}")
    return data.reshape(T, N, 3)


def write_scene(scene, out_dir):
    """Frames, template OBJ + texture and ground truth under ``out_dir``.

    Returns a dict of the written paths.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    tex_path = out / "texture.png"
    obj_path = out / "template.obj"
    gt_path = out / "truth.txt"
    write_image(tex_path, scene.template.texture)
    write_obj(obj_path, scene.template.vertices, scene.template, texture_name=tex_path.name)
    for t in range(scene.n_frames):
        write_image(out / "frames" / f"frame_{t:04d}.png", scene.render(t))
    write_ground_truth(gt_path, scene.truths)
    return {"frames": out / "frames", "template": obj_path, "texture": tex_path,
            "truth": gt_path}
