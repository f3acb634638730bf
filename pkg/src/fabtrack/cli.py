"""Command-line entry points: ``fabtrack track | synth | eval``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 failure
while processing data (the message names the frame when there is one).
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .config import FIELDS, ConfigError, flag_name, load_config, render_config
from .imaging import (list_frames, orientation_to_rgb, read_image, write_image)
from .mesh import MeshError, load_template, read_obj_vertices
from .solver import write_energy_log
from .synth import (generate_sequence, make_grid_mesh, make_mixed_texture, make_smooth_texture,
                    make_stripe_texture, read_ground_truth, write_scene)
from .tracker import (TrackingError, evaluate_against_ground_truth, export_frame_outputs,
                      initialize, metrics_row, track_frame)

logger = logging.getLogger("fabtrack")

EVAL_FIELDS = ("frame_index", "mean_error", "max_error", "bbox_diagonal", "mean_error_pct")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


# -- track -------------------------------------------------------------------

def _bool_flag(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _add_track_parser(sub):
    p = sub.add_parser("track", help="track a frame sequence from a config file")
    p.add_argument("config", help="run configuration file")
    for f in FIELDS:
        kind = _bool_flag if f.kind is bool else f.kind
        p.add_argument(f"--{flag_name(f.name)}", dest=f.name, type=kind, default=None,
                       metavar=f.name.upper(), help=f.help)
    p.set_defaults(func=cmd_track)
    return p


def run_tracking(cfg, log=print):
    """The full pipeline for a validated :class:`RunConfig`; returns frames tracked."""
    template = load_template(cfg.template, cfg.texture)
    frame_paths = list_frames(cfg.frames)
    truths = read_ground_truth(cfg.truth) if cfg.truth is not None else None
    if truths is not None and truths.shape[:2] != (len(frame_paths), template.n_vertices):
        raise ValueError(f"truth holds {truths.shape[0]} frames of {truths.shape[1]} vertices, "
                         f"expected {len(frame_paths)} of {template.n_vertices}")
    K = cfg.intrinsics()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.csv", "energy.csv"):
        (out / name).unlink(missing_ok=True)
    (out / "config.echo").write_text(render_config(cfg))
    if cfg.dump_orientation_field:
        (out / "fields").mkdir(exist_ok=True)

    session = initialize(template, K, cfg.weights(), cfg.solver_options(), cfg.hog_params())
    for t, path in enumerate(frame_paths):
        frame = read_image(path)
        if t == 0:
            h, w = frame.shape[:2]
            try:
                K.check_image_size(w, h)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        res = track_frame(session, frame)
        errors = (evaluate_against_ground_truth(res.state.V, truths[t])
                  if truths is not None else None)
        export_frame_outputs(res.state.V, template, frame, K, out, t, metrics_row(res, errors),
                             overlay=cfg.dump_overlays)
        write_energy_log(out / "energy.csv", res.log, append=True)
        if cfg.dump_orientation_field and res.field is not None:
            write_image(out / "fields" / f"frame_{t:04d}.png", orientation_to_rgb(res.field))
        msg = f"frame {t}: E={res.energy_total:.6g} iters={res.iterations}"
        if errors is not None:
            msg += f" mean_err={errors['mean']:.4g}"
        log(msg)
    return len(frame_paths)


def cmd_track(args):
    overrides = {f.name: getattr(args, f.name) for f in FIELDS
                 if getattr(args, f.name, None) is not None}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        return _fail(1, str(exc))
    try:
        n = run_tracking(cfg)
    except ConfigError as exc:
        return _fail(1, str(exc))
    except TrackingError as exc:
        return _fail(2, str(exc))
    except (MeshError, ValueError, OSError) as exc:
        return _fail(2, str(exc))
    print(f"tracked {n} frames -> {cfg.output}")
    return 0


# -- synth -------------------------------------------------------------------

SYNTH_BASE = dict(frames=30, grid=21, size=800.0, depth=3000.0, width=320, height=256,
                  focal=600.0, texture_size=256, period=16.0, stripe_angle=5.0, seed=1,
                  center=(0.0, 0.0), axis=(0.0, 0.0, 1.0), background=(0.0, 0.0, 0.0),
                  same_background=False)
SYNTH_DEFAULTS = {
    "translation": dict(texture="smooth", grid=31, offset=(10.0, 5.0, 0.0),
                        center=(-150.0, -50.0)),
    "rotation": dict(texture="stripe", angle=1.0, same_background=True),
    "bend": dict(texture="mixed", curvature=1.0 / 600.0),
}


def _add_synth_parser(sub):
    p = sub.add_parser("synth", help="render a synthetic sequence with ground truth",
                       description="Unset options take per-kind defaults.")
    p.add_argument("kind", choices=sorted(SYNTH_DEFAULTS))
    p.add_argument("output", help="output directory")
    p.add_argument("--frames", type=int)
    p.add_argument("--grid", type=int, help="vertices per side of the plane")
    p.add_argument("--size", type=float, help="plane side length (mm)")
    p.add_argument("--depth", type=float, help="plane distance (mm)")
    p.add_argument("--width", type=int, help="frame width (pixels)")
    p.add_argument("--height", type=int, help="frame height (pixels)")
    p.add_argument("--focal", type=float, help="focal length (pixels)")
    p.add_argument("--texture", choices=("smooth", "stripe", "mixed"))
    p.add_argument("--texture-size", type=int)
    p.add_argument("--period", type=float, help="stripe period (texture pixels)")
    p.add_argument("--stripe-angle", type=float, help="stripe direction (deg)")
    p.add_argument("--seed", type=int)
    p.add_argument("--offset", type=float, nargs=3, metavar=("DX", "DY", "DZ"),
                   help="translation per frame (mm)")
    p.add_argument("--center", type=float, nargs=2, metavar=("X", "Y"),
                   help="plane center at rest (mm)")
    p.add_argument("--angle", type=float, help="rotation per frame (deg)")
    p.add_argument("--axis", type=float, nargs=3, metavar=("AX", "AY", "AZ"))
    p.add_argument("--curvature", type=float, help="final bend curvature (1/mm)")
    p.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"))
    p.add_argument("--same-background", type=_bool_flag,
                   help="background takes the object's base color")
    p.set_defaults(func=cmd_synth)
    return p


STRIPE_COLORS = ((100, 100, 100), (160, 160, 160))


def synth_settings(args):
    """Effective synth options: base defaults, then per-kind, then given flags."""
    d = dict(SYNTH_BASE)
    d.update(SYNTH_DEFAULTS[args.kind])
    d.update({k: v for k, v in vars(args).items() if v is not None and k != "func"})
    return d


def build_scene(d):
    """SyntheticScene from a :func:`synth_settings` dict."""
    size, ang = d["texture_size"], d["stripe_angle"]
    if d["texture"] == "stripe":
        tex = make_stripe_texture(size, d["period"], ang, *STRIPE_COLORS)
    elif d["texture"] == "mixed":
        tex = make_mixed_texture(size, 0.25, d["period"], ang, d["seed"], *STRIPE_COLORS)
    else:
        tex = make_smooth_texture(size, seed=d["seed"], wavelength=(0.3, 0.8))
    mesh = make_grid_mesh(d["grid"], d["grid"], d["size"], d["size"], d["depth"], tex,
                          d["center"])
    K = Intrinsics(d["focal"], d["focal"], d["width"] / 2.0, d["height"] / 2.0)
    bg = STRIPE_COLORS[0] if d["same_background"] else d["background"]
    if d["kind"] == "translation":
        params = {"offset": tuple(d["offset"])}
    elif d["kind"] == "rotation":
        params = {"angle": d["angle"], "axis": tuple(d["axis"])}
    else:
        params = {"curvature": d["curvature"]}
    return generate_sequence(d["kind"], mesh, K, (d["width"], d["height"]), d["frames"],
                             background=bg, **params)


def cmd_synth(args):
    d = synth_settings(args)
    if d["frames"] < 1:
        return _fail(1, f"frames must be >= 1, got {d['frames']}")
    try:
        scene = build_scene(d)
    except ValueError as exc:
        return _fail(1, str(exc))
    out = Path(args.output)
    paths = write_scene(scene, out)
    K = scene.K
    values = {"template": paths["template"].name, "texture": paths["texture"].name,
              "frames": paths["frames"].name, "output": "results", "truth": paths["truth"].name,
              "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy}
    (out / "config.ini").write_text(render_config(values))
    print(f"wrote {scene.n_frames} frames, truth and config.ini to {out}")
    return 0


# -- eval --------------------------------------------------------------------

def _add_eval_parser(sub):
    p = sub.add_parser("eval", help="compare tracked meshes with ground truth")
    p.add_argument("results", help="output directory of a track run (holds meshes/)")
    p.add_argument("truth", help="ground-truth file")
    p.set_defaults(func=cmd_eval)
    return p


def evaluate_results(results_dir, truth_path):
    """Per-frame error rows and the summary dict for a results directory."""
    mesh_dir = Path(results_dir) / "meshes"
    objs = sorted(mesh_dir.glob("frame_*.obj")) if mesh_dir.is_dir() else []
    truths = read_ground_truth(truth_path)
    if len(objs) != truths.shape[0]:
        raise ValueError(f"frame count mismatch: {len(objs)} result meshes vs "
                         f"{truths.shape[0]} truth frames")
    rows = []
    for t, (obj, truth) in enumerate(zip(objs, truths)):
        e = evaluate_against_ground_truth(read_obj_vertices(obj), truth)
        pct = 100.0 * e["mean"] / e["bbox_diagonal"] if e["bbox_diagonal"] > 0 else 0.0
        rows.append({"frame_index": t, "mean_error": e["mean"], "max_error": e["max"],
                     "bbox_diagonal": e["bbox_diagonal"], "mean_error_pct": pct})
    summary = {"frames": len(rows),
               "sequence_mean_error": float(np.mean([r["mean_error"] for r in rows])),
               "sequence_mean_error_pct": float(np.mean([r["mean_error_pct"] for r in rows])),
               "max_error": float(max(r["max_error"] for r in rows))}
    return rows, summary


def cmd_eval(args):
    try:
        rows, summary = evaluate_results(args.results, args.truth)
    except (ValueError, OSError, MeshError) as exc:
        return _fail(2, str(exc))
    out = Path(args.results)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_FIELDS)
        for r in rows:
            w.writerow([r["frame_index"]] + [repr(float(r[k])) for k in EVAL_FIELDS[1:]])
    lines = [f"{k} = {v!r}" for k, v in summary.items()]
    (out / "eval_summary.txt").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"frame {r['frame_index']:4d}  mean {r['mean_error']:.6g}  "
              f"max {r['max_error']:.6g}  ({r['mean_error_pct']:.3f}% of diagonal)")
    print(f"sequence mean {summary['sequence_mean_error']:.6g} "
          f"({summary['sequence_mean_error_pct']:.3f}% of diagonal)")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="fabtrack",
                                     description="Monocular template-based surface tracking")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_track_parser(sub)
    _add_synth_parser(sub)
    _add_eval_parser(sub)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
