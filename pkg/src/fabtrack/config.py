"""Run configuration: a sectioned key-value text file plus flag overrides.

Every key is unique across sections, so each one maps to a single
kebab-case command-line flag (``lambda_tex`` -> ``--lambda-tex``).
Relative paths are resolved against the directory holding the file.
"""

import configparser
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .camera import Intrinsics
from .energy import EnergyWeights
from .imaging import HogParams
from .solver import SolverOptions


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class Field:
    name: str
    section: str
    kind: type
    default: object
    help: str
    required: bool = False
    is_path: bool = False


_W = EnergyWeights()
_H = HogParams()
_S = SolverOptions()

FIELDS = (
    Field("template", "paths", str, None, "template mesh (OBJ with per-vertex UVs)", True, True),
    Field("texture", "paths", str, None, "texture map image", True, True),
    Field("frames", "paths", str, None, "directory of numbered PNG/JPEG frames", True, True),
    Field("output", "paths", str, None, "output directory (created if missing)", True, True),
    Field("truth", "paths", str, "", "optional ground-truth file for per-frame errors",
          False, True),

    Field("fx", "camera", float, None, "focal length in pixels along x", True),
    Field("fy", "camera", float, None, "focal length in pixels along y", True),
    Field("cx", "camera", float, None, "principal point x (pixels)", True),
    Field("cy", "camera", float, None, "principal point y (pixels)", True),

    Field("lambda_photo", "weights", float, _W.lambda_photo, "photometric term weight"),
    Field("lambda_smooth", "weights", float, _W.lambda_smooth, "edge-vector smoothness weight"),
    Field("lambda_edge", "weights", float, _W.lambda_edge, "edge-length (isometry) weight"),
    Field("lambda_arap", "weights", float, _W.lambda_arap, "as-rigid-as-possible weight"),
    Field("lambda_vel", "weights", float, _W.lambda_vel, "velocity prior weight"),
    Field("lambda_acc", "weights", float, _W.lambda_acc, "acceleration prior weight"),
    Field("lambda_tex", "weights", float, _W.lambda_tex, "texture-direction term weight"),
    Field("sigma_color_threshold", "weights", float, _W.sigma_color_threshold,
          "photometric residuals above this (max channel, gray-levels) are pruned"),
    Field("rho_angle_threshold", "weights", float, _W.rho_angle_threshold,
          "texture residuals with a larger angle (degrees) are ignored"),
    Field("smoothing_sigma", "weights", float, _W.smoothing_sigma,
          "Gaussian sigma (pixels) applied to frames for the photometric term"),
    Field("photo_skip_boundary", "weights", bool, _W.photo_skip_boundary,
          "leave mesh-boundary vertices out of the photometric term"),

    Field("hog_bins", "hog", int, _H.bins, "angular bins over 360 degrees"),
    Field("hog_window", "hog", int, _H.window, "half-size of the frame neighbourhood (pixels)"),
    Field("hog_mag_threshold", "hog", float, _H.mag_threshold,
          "gradients at or below this magnitude are not counted"),
    Field("hog_freq_threshold", "hog", int, _H.freq_threshold,
          "minimum modal-bin count for a direction to be reported"),
    Field("hog_stride", "hog", int, _H.stride, "orientation-field grid stride (pixels)"),
    Field("hog_presmooth", "hog", float, _H.presmooth,
          "Gaussian sigma before gradient computation, 0 disables"),

    Field("max_iters", "solver", int, _S.max_iters, "Gauss-Newton iterations per frame"),
    Field("mu0", "solver", float, _S.mu0, "initial Levenberg damping"),
    Field("mu_grow", "solver", float, _S.mu_grow, "damping factor after a rejected step"),
    Field("mu_shrink", "solver", float, _S.mu_shrink, "damping factor after an accepted step"),
    Field("mu_max", "solver", float, _S.mu_max, "stop once damping exceeds this"),
    Field("step_tol", "solver", float, _S.step_tol, "stop when the largest step entry is below"),
    Field("pcg_iters", "solver", int, _S.pcg_iters, "inner conjugate-gradient iterations"),
    Field("pcg_tol", "solver", float, _S.pcg_tol, "inner relative residual tolerance"),

    Field("enable_texture_term", "output", bool, True, "false forces lambda_tex to 0"),
    Field("dump_orientation_field", "output", bool, False,
          "write per-frame orientation-field images to fields/"),
    Field("dump_overlays", "output", bool, True, "write wireframe overlays to overlays/"),
)

FIELD_BY_NAME = {f.name: f for f in FIELDS}
SECTIONS = tuple(dict.fromkeys(f.section for f in FIELDS))
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    template: Path
    texture: Path
    frames: Path
    output: Path
    fx: float
    fy: float
    cx: float
    cy: float
    truth: Path = None
    lambda_photo: float = _W.lambda_photo
    lambda_smooth: float = _W.lambda_smooth
    lambda_edge: float = _W.lambda_edge
    lambda_arap: float = _W.lambda_arap
    lambda_vel: float = _W.lambda_vel
    lambda_acc: float = _W.lambda_acc
    lambda_tex: float = _W.lambda_tex
    sigma_color_threshold: float = _W.sigma_color_threshold
    rho_angle_threshold: float = _W.rho_angle_threshold
    smoothing_sigma: float = _W.smoothing_sigma
    photo_skip_boundary: bool = _W.photo_skip_boundary
    hog_bins: int = _H.bins
    hog_window: int = _H.window
    hog_mag_threshold: float = _H.mag_threshold
    hog_freq_threshold: int = _H.freq_threshold
    hog_stride: int = _H.stride
    hog_presmooth: float = _H.presmooth
    max_iters: int = _S.max_iters
    mu0: float = _S.mu0
    mu_grow: float = _S.mu_grow
    mu_shrink: float = _S.mu_shrink
    mu_max: float = _S.mu_max
    step_tol: float = _S.step_tol
    pcg_iters: int = _S.pcg_iters
    pcg_tol: float = _S.pcg_tol
    enable_texture_term: bool = True
    dump_orientation_field: bool = False
    dump_overlays: bool = True

    def intrinsics(self):
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    def weights(self):
        kw = {f.name: getattr(self, f.name) for f in fields(EnergyWeights)}
        if not self.enable_texture_term:
            kw["lambda_tex"] = 0.0
        return EnergyWeights(**kw)

    def hog_params(self):
        return HogParams(bins=self.hog_bins, window=self.hog_window,
                         mag_threshold=self.hog_mag_threshold,
                         freq_threshold=self.hog_freq_threshold, stride=self.hog_stride,
                         presmooth=self.hog_presmooth)

    def solver_options(self):
        return SolverOptions(max_iters=self.max_iters, mu0=self.mu0, mu_grow=self.mu_grow,
                             mu_shrink=self.mu_shrink, mu_max=self.mu_max,
                             step_tol=self.step_tol, pcg_iters=self.pcg_iters,
                             pcg_tol=self.pcg_tol)

    def validate(self):
        """Check referenced paths and per-module numeric ranges."""
        for name, must_be_dir in (("template", False), ("texture", False), ("frames", True)):
            p = getattr(self, name)
            if not p.exists():
                raise ConfigError(f"{name}: path does not exist: {p}")
            if must_be_dir != p.is_dir():
                raise ConfigError(f"{name}: expected a {'directory' if must_be_dir else 'file'}: {p}")
        if self.truth is not None and not self.truth.is_file():
            raise ConfigError(f"truth: file does not exist: {self.truth}")
        for build in (self.intrinsics, self.weights, self.hog_params, self.solver_options):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return self


def _key_lines(text):
    """(section, key) -> 1-based line number, for error messages."""
    out = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
        elif s and s[0] not in "#;" and "=" in s:
            out[(section, s.split("=", 1)[0].strip().lower())] = (no, line.rstrip())
    return out


def _convert(field, raw, where):
    raw = raw.strip()
    try:
        if field.kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("expected true or false")
        if field.kind is int:
            return int(raw)
        if field.kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}invalid value for '{field.name}': {raw!r} ({exc})") from None


def _where(lines, section, key):
    hit = lines.get((section, key))
    return f"line {hit[0]}: {hit[1].strip()!r}: " if hit else ""


def parse_config_text(text, base_dir=".", overrides=None):
    """Build a :class:`RunConfig` from file text; ``overrides`` win over file values.

    Paths are not checked here; call :meth:`RunConfig.validate`.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.line.strip()!r}: key before any "
                          "[section] header") from None
    except configparser.ParsingError as exc:
        no, line = exc.errors[0]
        raise ConfigError(f"line {no}: {line.strip()!r}: not a 'key = value' line") from None
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        prefix = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{prefix}config parse error: {exc.message}") from None
    lines = _key_lines(text)
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            f = FIELD_BY_NAME.get(key)
            where = _where(lines, section, key)
            if f is None:
                raise ConfigError(f"{where}unknown key '{key}' in [{section}]")
            if f.section != section:
                raise ConfigError(f"{where}key '{key}' belongs in [{f.section}], not [{section}]")
            values[key] = _convert(f, raw, where)
    for key, raw in (overrides or {}).items():
        f = FIELD_BY_NAME.get(key)
        if f is None:
            raise ConfigError(f"unknown override '{key}'")
        values[key] = raw if not isinstance(raw, str) else _convert(f, raw, f"--{flag_name(key)}: ")

    missing = [f.name for f in FIELDS if f.required and values.get(f.name) in (None, "")]
    if missing:
        f = FIELD_BY_NAME[missing[0]]
        raise ConfigError(f"missing required field '{f.name}' in [{f.section}]")
    base = Path(base_dir)
    for f in FIELDS:
        if f.is_path and f.name in values:
            v = values[f.name]
            values[f.name] = None if v in (None, "") else (base / Path(v)).resolve()
    return RunConfig(**values)


def load_config(path, overrides=None, validate=True):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config_text(text, path.parent, overrides)
    return cfg.validate() if validate else cfg


def flag_name(key):
    return key.replace("_", "-")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(values, comments=True):
    """Config file text for a RunConfig or a plain dict of field values.

    Fields absent from a dict are written with their defaults (required
    ones left blank), so the output doubles as a reference.
    """
    if isinstance(values, RunConfig):
        values = {f.name: getattr(values, f.name) for f in FIELDS}
    out = []
    if comments:
        out += ["# fabtrack run configuration",
                "# Every key can be overridden on the command line: key_name -> --key-name.",
                "# Relative paths are resolved against this file's directory.", ""]
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in FIELDS:
            if f.section != section:
                continue
            if comments:
                default = "required" if f.required else f"default {_fmt(f.default) or 'none'}"
                out.append(f"# {f.help} ({default})")
            out.append(f"{f.name} = {_fmt(values.get(f.name, f.default))}")
        out.append("")
    return "\n".join(out)


def replace_config(cfg, **changes):
    return replace(cfg, **changes)
