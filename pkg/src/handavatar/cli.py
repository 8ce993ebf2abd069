"""Command-line entry point: fit, render, refine-pose, synth, eval, gradcheck.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("handavatar")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# flat dotted config keys and their defaults; None means "string path, optional"
DEFAULTS = {
    "paths.rig": None,
    "paths.sequence": None,
    "paths.output": None,
    "weights.sil": 7.0, "weights.init": 10.0, "weights.verts": 2.0, "weights.lap": 4.0,
    "weights.norm": 0.1, "weights.arap": 0.2, "weights.photo": 1.0, "weights.vgg": 1.0,
    "weights.t_reg": 2.0, "weights.n_reg": 0.5,
    "schedule.epochs": [100, 50, 50],
    "schedule.lr_geometry": 1e-3,
    "schedule.lr_appearance": 1e-2,
    "schedule.batch_size": 8,
    "seed": 0,
    "render.shadows": True,
    "render.shadow_map_size": 512,
    "image.size": None,
    "texture.size": 512,
    "lights.count": 1,
    "init.fit_rig": True,
    "checkpoint.every": 0,
    "mode": "known",
    "refine.epochs": 50,
}
_PATH_KEYS = {"paths.rig", "paths.sequence", "paths.output"}


class ConfigError(ValueError):
    pass


def _check_value(key, value):
    default = DEFAULTS[key]
    if key in _PATH_KEYS:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key} must be a path string")
    elif key == "image.size":
        if value is not None and (not isinstance(value, list) or len(value) != 2):
            raise ConfigError("image.size must be [height, width]")
    elif key == "schedule.epochs":
        if (not isinstance(value, list) or len(value) != 3
                or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in value)):
            raise ConfigError("schedule.epochs must be three nonnegative integers")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ConfigError(f"{key} must be a nonnegative integer")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value) or value < 0:
            raise ConfigError(f"{key} must be a nonnegative number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
    return value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then command-line overrides; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        layers.append(data)
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _check_value(k, v)
    if cfg["lights.count"] < 1:
        raise ConfigError("lights.count must be at least 1")
    if cfg["schedule.batch_size"] < 1:
        raise ConfigError("schedule.batch_size must be at least 1")
    if cfg["texture.size"] < 2:
        raise ConfigError("texture.size must be at least 2")
    if cfg["mode"] not in ("sil", "full", "known"):
        raise ConfigError("mode must be sil, full or known")
    return cfg


def parse_epochs(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected three nonnegative integers, got {text!r}")
    return vals


def parse_vec3(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return vals


# ---------------------------------------------------------------------- helpers


def _setup_file_log(out_dir: Path):
    """Timestamps go only to ``run.log`` so every other output is reproducible."""
    out_dir.mkdir(parents=True, exist_ok=True)
    h = logging.FileHandler(out_dir / "run.log", mode="w")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(h)
    logging.getLogger().setLevel(logging.INFO)
    return h


def _load_rig(path):
    from .fixtures import paddle_rig
    from .rig import RigBundle
    if path is None:
        return paddle_rig()
    return RigBundle.load(path)


def initial_lights(count: int) -> np.ndarray:
    """Lights on a 0.3 m circle in the camera's x/y plane, the first straight above."""
    a = 2 * np.pi * np.arange(count) / count
    return np.stack([0.3 * np.sin(a), -0.3 * np.cos(a), np.zeros(count)], axis=1)


def initial_state(rig, ds, texture_size: int, lights: int, fit_rig: bool):
    """Initial avatar and the joints the init term anchors to."""
    from .rig import PoseParams, fit_rig_to_vertices, lbs, regress_joints
    from .state import AvatarState
    poses, beta = list(ds.poses), np.zeros(rig.n_betas)
    if fit_rig and ds.init_vertices is not None:
        fits = [fit_rig_to_vertices(rig, v, seed=t) for t, v in enumerate(ds.init_vertices)]
        poses = [PoseParams(f.gamma, f.translation) for f in fits]
        beta = np.mean([f.beta for f in fits], axis=0)
    st = AvatarState.initial(rig, poses, texture_size)
    st.beta = beta
    st.light_positions = initial_lights(lights)
    joints = np.array([regress_joints(rig, lbs(rig, beta, p.gamma, p.translation).vertices) for p in poses])
    return st, joints


def energy_model(rig, ds, joints, cfg):
    from .energy import EnergyModel, EnergyWeights
    from .render import RenderOptions
    w = EnergyWeights(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("weights.")})
    images = np.array([ds.composite(t) for t in range(ds.n_frames)])
    opts = RenderOptions(shadows=cfg["render.shadows"], shadow_map_size=cfg["render.shadow_map_size"])
    return EnergyModel(rig, ds.camera, images, ds.masks, joints, w, opts)


def render_state(rig, state, camera, poses, shadows=True, shadow_map_size=512):
    """Render ``poses`` of an avatar; returns (images, masks)."""
    from .render import RenderOptions, render_frame
    opts = RenderOptions(shadows=shadows, shadow_map_size=shadow_map_size)
    imgs, masks = [], []
    for p in poses:
        r = render_frame(rig, state.beta, p, state.displacement, state.appearance, state.lighting, camera, opts)
        imgs.append(r.color)
        masks.append(r.face_id >= 0)
    H, W = camera.height, camera.width
    return np.array(imgs).reshape(-1, H, W, 3), np.array(masks).reshape(-1, H, W)


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


# ---------------------------------------------------------------------- commands


def cmd_fit(args, cfg) -> int:
    from .avatar_io import SequenceDataset, export_avatar, import_avatar, load_sequence, write_sequence
    from .energy import EnergyLog
    from .optim import Schedule, run_schedule
    from .state import AvatarState

    seq, out = cfg["paths.sequence"], cfg["paths.output"]
    if seq is None or out is None:
        raise ConfigError("fit needs paths.sequence and paths.output (--sequence/--out)")
    rig = _load_rig(cfg["paths.rig"])
    ds = load_sequence(seq)
    if cfg["image.size"] is not None and list(cfg["image.size"]) != [ds.camera.height, ds.camera.width]:
        raise ConfigError(f"image.size {cfg['image.size']} does not match the sequence")
    out = Path(out)
    _setup_file_log(out)
    log.info("fitting %d frames from %s", ds.n_frames, seq)
    st, joints = initial_state(rig, ds, cfg["texture.size"], cfg["lights.count"], cfg["init.fit_rig"])
    model = energy_model(rig, ds, joints, cfg)
    sched = Schedule.default(tuple(cfg["schedule.epochs"]), lr_geometry=cfg["schedule.lr_geometry"],
                             lr_appearance=cfg["schedule.lr_appearance"],
                             batch_size=cfg["schedule.batch_size"], seed=cfg["seed"])
    elog = EnergyLog()
    store = st.to_store()
    try:
        res = run_schedule(model, store, sched, elog, checkpoint_dir=out / "checkpoints",
                           checkpoint_every=cfg["checkpoint.every"],
                           on_epoch=lambda e, s, r: log.info("epoch %d (%s) E=%.6g", e, s, r.total))
    finally:
        elog.write(out / "energy.csv")
    export_avatar(AvatarState.from_store(res.store), rig, out / "avatar", ds.camera)
    # render what was written so `render` reproduces these frames exactly
    fitted, rig_out, _ = import_avatar(out / "avatar")
    poses = [fitted.pose(t) for t in range(fitted.n_frames)]
    imgs, masks = render_state(rig_out, fitted, ds.camera, poses, cfg["render.shadows"],
                               cfg["render.shadow_map_size"])
    write_sequence(SequenceDataset(imgs, masks, poses, ds.camera), out / "renders")
    print(f"fitted {ds.n_frames} frames in {res.epochs_run} epochs; avatar written to {out / 'avatar'}")
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    from .avatar_io import SequenceDataset, import_avatar, load_camera, load_poses, write_sequence
    st, rig, cam = import_avatar(args.avatar)
    if args.camera is not None:
        cam = load_camera(args.camera)
    if cam is None:
        raise ConfigError("avatar has no camera; pass --camera")
    if args.poses is not None:
        poses, _ = load_poses(args.poses)
    else:
        poses = [st.pose(t) for t in range(st.n_frames)]
    for i, p in enumerate(poses):
        if p.gamma.size != rig.n_joints * 3:
            raise ConfigError(f"pose {i}: expected {rig.n_joints} joints")
    out = Path(args.out)
    imgs, masks = render_state(rig, st, cam, poses, cfg["render.shadows"], cfg["render.shadow_map_size"])
    write_sequence(SequenceDataset(imgs, masks, poses, cam), out)
    print(f"rendered {len(poses)} frames to {out}")
    return EXIT_OK


def cmd_refine_pose(args, cfg) -> int:
    from .avatar_io import import_avatar, load_sequence, save_poses
    from .energy import EnergyLog
    from .optim import pose_errors, refine_pose
    from .rig import lbs, regress_joints

    st0, rig, _ = import_avatar(args.avatar)
    ds = load_sequence(args.sequence)
    gt_path = Path(args.ground_truth) if args.ground_truth else Path(args.sequence) / "ground_truth.json"
    gt = json.loads(gt_path.read_text()) if gt_path.exists() else None
    out = Path(args.out)
    _setup_file_log(out)
    st = st0.copy()
    st.gammas = np.array([p.gamma for p in ds.poses]).reshape(ds.n_frames, rig.n_joints, 3)
    st.translations = np.array([p.translation for p in ds.poses]).reshape(ds.n_frames, 3)
    joints = np.array([regress_joints(rig, lbs(rig, st.beta, p.gamma, p.translation).vertices) for p in ds.poses])
    model = energy_model(rig, ds, joints, cfg)
    elog = EnergyLog()
    refined, _ = refine_pose(model, st, cfg["mode"], cfg["refine.epochs"], cfg["seed"],
                             cfg["schedule.batch_size"], cfg["schedule.lr_geometry"],
                             cfg["schedule.lr_appearance"], elog)
    elog.write(out / "energy.csv")
    poses = [refined.pose(t) for t in range(refined.n_frames)]
    save_poses(out / "poses.json", poses)
    if gt is not None:
        gtv = [p["vertices"] for p in gt["poses"]]
        before = pose_errors(rig, st.beta, st.gammas, st.translations, gtv)
        after = pose_errors(rig, refined.beta, refined.gammas, refined.translations, gtv)
        rows = [[t, repr(float(b)), repr(float(a))] for t, (b, a) in enumerate(zip(before, after))]
        rows.append(["mean", repr(float(before.mean())), repr(float(after.mean()))])
        _write_rows(out / "pose_error.csv", ["frame", "init_pa_mpvpe_mm", "pa_mpvpe_mm"], rows)
        print(f"{cfg['mode']}: PA-MPVPE {before.mean():.3f} mm -> {after.mean():.3f} mm")
    else:
        print(f"{cfg['mode']}: refined {len(poses)} poses (no ground truth)")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from .oracle import SynthSpec, generate_sequence
    spec = SynthSpec(n_frames=args.frames, size=args.size, motion=args.motion, noise_rot=args.noise_rot,
                     noise_trans=args.noise_trans, seed=cfg["seed"], texture_size=args.texture_size,
                     pattern=args.pattern, shadows=cfg["render.shadows"])
    if args.light is not None:
        spec.light = tuple(args.light)
    if spec.n_frames < 1 or spec.size < 8:
        raise ConfigError("synth needs at least one frame of at least 8x8 pixels")
    rig = _load_rig(cfg["paths.rig"])
    out = Path(args.out)
    generate_sequence(rig, spec, out)
    rig.save(out / "rig")
    print(f"wrote {spec.n_frames} frames to {out}")
    return EXIT_OK


def _frames_of(path: Path):
    from .avatar_io import load_sequence
    ds = load_sequence(path)
    return np.array([ds.composite(t) for t in range(ds.n_frames)]), ds.masks


def cmd_eval(args, cfg) -> int:
    from . import metrics
    a_img, a_msk = _frames_of(Path(args.pred))
    b_img, b_msk = _frames_of(Path(args.ref))
    if a_img.shape != b_img.shape:
        raise ConfigError(f"frame stacks differ: {a_img.shape} vs {b_img.shape}")
    rows, vals = [], []
    for t in range(len(a_img)):
        v = (metrics.iou(a_msk[t], b_msk[t]), metrics.l1(a_img[t], b_img[t]),
             metrics.ms_ssim(a_img[t], b_img[t]), metrics.psnr(a_img[t], b_img[t]))
        vals.append(v)
        rows.append([t] + [repr(float(x)) for x in v])
    mean = np.mean(np.array(vals, dtype=float), axis=0) if vals else np.full(4, np.nan)
    rows.append(["mean"] + [repr(float(x)) for x in mean])
    header = ["frame", "iou", "l1", "ms_ssim", "psnr"]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_rows(Path(args.out), header, rows)
    print("IoU %.4f  L1 %.4f  MS-SSIM %.4f  PSNR %.2f" % tuple(mean))
    return EXIT_OK


def gradcheck_setup(size: int = 64, seed: int = 0, texture_size: int = 32, n_frames: int = 2):
    """Paddle scene with every parameter group live and its energy function.

    Targets are rendered from a reference state; the checked state is a
    random perturbation of it so no term sits at an exact minimum.
    """
    from .energy import APP_TERMS, GEO_TERMS, EnergyModel, draw_texture_offsets
    from .fixtures import paddle_rig
    from .oracle import SynthSpec, make_scene
    from .render import RenderOptions
    from .rig import lbs, regress_joints
    from .state import AvatarState

    rng = np.random.default_rng(seed)
    rig = paddle_rig()
    scene = make_scene(rig, SynthSpec(n_frames=n_frames, size=size, texture_size=texture_size, seed=seed))
    ref = AvatarState(scene.beta, scene.gammas, scene.translations, scene.displacement, scene.albedo,
                      scene.normal_map, scene.light_positions, np.stack([scene.ambient, scene.diffuse]))
    images, masks = render_state(rig, ref, scene.camera, [ref.pose(t) for t in range(n_frames)])
    st = ref.copy()
    st.beta = rng.normal(0, 0.3, st.beta.shape)
    st.gammas = st.gammas + rng.normal(0, 0.05, st.gammas.shape)
    st.translations = st.translations + rng.normal(0, 0.002, st.translations.shape)
    st.displacement = rng.normal(0, 5e-4, st.displacement.shape)
    st.albedo = np.clip(st.albedo + rng.normal(0, 0.05, st.albedo.shape), 0.05, 0.95)
    st.normal_map[..., :2] = rng.normal(0, 0.1, st.normal_map[..., :2].shape)
    st.light_positions = st.light_positions + rng.normal(0, 0.02, st.light_positions.shape)
    st.reflection = st.reflection + rng.uniform(-0.05, 0.05, st.reflection.shape)
    joints = np.array([regress_joints(rig, lbs(rig, ref.beta, p.gamma, p.translation).vertices)
                       for p in (ref.pose(t) for t in range(n_frames))])
    images = np.where(masks[..., None], images, 1.0)
    model = EnergyModel(rig, scene.camera, images, masks, joints, options=RenderOptions(shadow_map_size=256))
    offsets = draw_texture_offsets(rng, texture_size)
    frames = list(range(n_frames))

    def loss(P):
        return model(P, frames, GEO_TERMS + APP_TERMS, offsets)[0]

    return loss, st.to_store()


def run_gradcheck(size: int = 64, n_coords: int = 120, seed: int = 0, scope: str = "all", h: float = 1e-5):
    from . import autodiff as ad
    from .state import APPEARANCE, GEOMETRY
    loss, store = gradcheck_setup(size, seed)
    groups = store.names() if scope == "all" else store.names(GEOMETRY if scope == "geometry" else APPEARANCE)
    coords = ad.sample_coords(store, n_coords, np.random.default_rng(seed + 1), groups)
    return ad.finite_diff_check(loss, store, coords, h=h)


def cmd_gradcheck(args, cfg) -> int:
    t0 = time.perf_counter()
    rep = run_gradcheck(args.size, args.coords, cfg["seed"], args.scope)
    dt = time.perf_counter() - t0
    for g, (n, f, m) in sorted(rep.by_group().items()):
        print(f"{g:20s} checked {n:3d} flagged {f:3d} max rel {m:.2e}")
    ok = rep.passed(1e-3, 1e-2)
    print(f"p95 {rep.p95_rel:.2e}  max {rep.max_rel:.2e}  flagged {rep.n_flagged}/{len(rep.entries)}  "
          f"{dt:.1f} s  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handavatar", description="Fit and render textured hand avatars.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-shadow", action="store_true", help="render with visibility fixed to 1")
    common.add_argument("--rig", help="rig bundle directory (default: built-in paddle rig)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit an avatar to a sequence")
    f.add_argument("--sequence")
    f.add_argument("--out")
    f.add_argument("--epochs", type=parse_epochs, help="stage epochs, e.g. 100,50,50")
    f.add_argument("--texture-size", type=int)
    f.add_argument("--lights", type=int)
    f.add_argument("--checkpoint-every", type=int)

    r = sub.add_parser("render", parents=[common], help="render an avatar in given poses")
    r.add_argument("--avatar", required=True)
    r.add_argument("--poses", help="poses JSON (default: the avatar's fitted poses)")
    r.add_argument("--camera", help="camera JSON (default: the avatar's camera)")
    r.add_argument("--out", required=True)

    rp = sub.add_parser("refine-pose", parents=[common], help="refine poses with a fitted avatar")
    rp.add_argument("--avatar", required=True)
    rp.add_argument("--sequence", required=True)
    rp.add_argument("--mode", choices=["sil", "full", "known"])
    rp.add_argument("--epochs", type=int)
    rp.add_argument("--ground-truth", help="ground_truth.json (default: the sequence's, if present)")
    rp.add_argument("--out", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a ray-cast synthetic sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--motion", choices=["flip", "fingers", "mixed", "static"], default="mixed")
    s.add_argument("--noise-rot", type=float, default=0.05)
    s.add_argument("--noise-trans", type=float, default=0.005)
    s.add_argument("--texture-size", type=int, default=128)
    s.add_argument("--pattern", choices=["checker", "gradient", "flat"], default="checker")
    s.add_argument("--light", type=parse_vec3, help="light position x,y,z in metres")

    e = sub.add_parser("eval", parents=[common], help="compare two sequence directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", help="CSV with one row per frame and a mean row")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--coords", type=int, default=120)
    g.add_argument("--scope", choices=["all", "geometry", "appearance"], default="all")
    return p


COMMANDS = {"fit": cmd_fit, "render": cmd_render, "refine-pose": cmd_refine_pose,
            "synth": cmd_synth, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _overrides(args) -> dict:
    o = {"seed": args.seed, "paths.rig": args.rig}
    if args.no_shadow:
        o["render.shadows"] = False
    for attr, key in (("sequence", "paths.sequence"), ("epochs", "schedule.epochs"),
                      ("texture_size", "texture.size"), ("lights", "lights.count"),
                      ("checkpoint_every", "checkpoint.every"), ("mode", "mode")):
        if getattr(args, attr, None) is not None and not (args.command == "synth" and attr == "texture_size"):
            o[key] = getattr(args, attr)
    if args.command == "fit" and args.out is not None:
        o["paths.output"] = args.out
    if args.command == "refine-pose" and args.epochs is not None:
        o.pop("schedule.epochs", None)
        o["refine.epochs"] = args.epochs
    return o


def main(argv=None) -> int:
    from .autodiff import NonFiniteError
    from .avatar_io import DatasetError
    from .container import ContainerError
    from .optim import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DatasetError, ContainerError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, DivergenceError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
