"""Sequence loading/writing and avatar export/import.

Sequence directory layout::

    sequence.json   {"camera": "camera.json", "poses": "poses.json",
                     "frames": [{"image": "images/0000.png", "mask": "masks/0000.png"}, ...]}
    camera.json     {"fx", "fy", "cx", "cy", "width", "height",
                     "rotation": 3x3 (optional), "translation": [3] or "translations": [[3], ...]}
    poses.json      [{"gamma": J x 3, "translation": [3], "vertices": V x 3 (optional)}, ...]

Avatar directory layout::

    avatar.obj / avatar.mtl / albedo.png / normal_map.png   (rest pose, for viewers)
    state/          array container with the float32 parameters
    rig/            copy of the rig bundle
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .container import f32, load_arrays, save_arrays
from .geometry import vertex_normals
from .render.camera import Camera
from .rig import PoseParams, RigBundle, personalized_vertices
from .state import AvatarState

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class SequenceDataset:
    images: np.ndarray          # (N, H, W, 3) float in [0, 1]
    masks: np.ndarray           # (N, H, W) bool
    poses: list[PoseParams]     # initialization per frame
    camera: Camera
    init_vertices: list | None = None   # optional per-frame coarse vertices

    @property
    def n_frames(self) -> int:
        return len(self.images)

    def composite(self, t: int) -> np.ndarray:
        """Frame ``t`` on a white background outside the mask."""
        return np.where(self.masks[t][..., None], self.images[t], 1.0)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_png(path, img):
    img = np.asarray(img)
    if img.dtype == bool:
        data = img.astype(np.uint8) * 255
    else:
        data = np.clip(np.rint(np.asarray(img, float) * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def load_poses(path) -> tuple[list[PoseParams], list | None]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: expected a JSON array of poses")
    poses, verts = [], []
    for i, e in enumerate(entries):
        try:
            poses.append(PoseParams(np.asarray(e["gamma"], float), np.asarray(e["translation"], float)).check())
        except (KeyError, ValueError) as err:
            raise DatasetError(f"{path}: pose entry {i} invalid: {err}") from err
        verts.append(np.asarray(e["vertices"], float) if "vertices" in e else None)
    return poses, (verts if any(v is not None for v in verts) else None)


def save_poses(path, poses: list[PoseParams], vertices=None):
    out = []
    for i, p in enumerate(poses):
        e = {"gamma": np.asarray(p.gamma).tolist(), "translation": np.asarray(p.translation).tolist()}
        if vertices is not None:
            e["vertices"] = np.asarray(vertices[i]).tolist()
        out.append(e)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(out))


def load_camera(path) -> Camera:
    d = json.loads(Path(path).read_text())
    if "translations" in d:
        # per-frame estimates are averaged and then held fixed
        d = dict(d)
        d["translation"] = np.mean(np.asarray(d.pop("translations"), float), axis=0).tolist()
    try:
        return Camera.from_dict(d)
    except TypeError as e:
        raise DatasetError(f"{path}: incomplete camera: {e}") from e


def save_camera(path, cam: Camera):
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2))


def load_sequence(path) -> SequenceDataset:
    path = Path(path)
    seq_file = path / "sequence.json" if path.is_dir() else path
    if not seq_file.exists():
        raise DatasetError(f"sequence file {seq_file} not found")
    root = seq_file.parent
    cfg = json.loads(seq_file.read_text())
    frames = cfg.get("frames", [])
    if not frames:
        raise DatasetError(f"{seq_file}: no frames")
    cam = load_camera(root / cfg.get("camera", "camera.json"))
    poses, verts = load_poses(root / cfg.get("poses", "poses.json"))
    if len(poses) != len(frames):
        raise DatasetError(f"{seq_file}: {len(frames)} frames but {len(poses)} poses")
    images, masks = [], []
    for i, fr in enumerate(frames):
        for key in ("image", "mask"):
            if not (root / fr[key]).exists():
                raise DatasetError(f"frame {i}: missing {key} file {fr[key]}")
        img, m = read_image(root / fr["image"]), read_mask(root / fr["mask"])
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"frame {i}: image size {img.shape[:2]} != camera {(cam.height, cam.width)}")
        if m.shape != img.shape[:2]:
            raise DatasetError(f"frame {i}: mask size {m.shape} != image size {img.shape[:2]}")
        images.append(img)
        masks.append(m)
    return SequenceDataset(np.array(images), np.array(masks), poses, cam, verts)


def write_sequence(ds: SequenceDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for t in range(ds.n_frames):
        img, msk = f"images/{t:04d}.png", f"masks/{t:04d}.png"
        write_png(out / img, ds.images[t])
        write_png(out / msk, ds.masks[t])
        frames.append({"image": img, "mask": msk})
    save_camera(out / "camera.json", ds.camera)
    save_poses(out / "poses.json", ds.poses, ds.init_vertices)
    (out / "sequence.json").write_text(json.dumps(
        {"camera": "camera.json", "poses": "poses.json", "frames": frames}, indent=1))
    return out


# ---------------------------------------------------------------------- avatar


def _write_obj(path: Path, V, faces, uv, normals, mtl_name: str):
    uvk = np.round(uv.reshape(-1, 2), 9)
    uniq, inv = np.unique(uvk, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    lines = [f"mtllib {mtl_name}", "o avatar"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in V]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in uniq]
    lines += [f"vn {x:.6g} {y:.6g} {z:.6g}" for x, y, z in normals]
    lines.append("usemtl skin")
    for f, t in zip(faces + 1, inv + 1):
        lines.append("f " + " ".join(f"{f[k]}/{t[k]}/{f[k]}" for k in range(3)))
    path.write_text("\n".join(lines) + "\n")


def export_avatar(state: AvatarState, rig: RigBundle, out_dir, camera: Camera | None = None) -> AvatarState:
    """Write the avatar package; returns the state at stored (float32) precision.

    Rendering the returned state and rendering :func:`import_avatar` output are
    bit-identical.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write avatar to {out}: {e}") from e
    st = state.rounded()
    fine = rig.subdivision[0]
    rest = personalized_vertices(rig, st.beta, PoseParams.zeros(rig.n_joints), st.displacement)
    _write_obj(out / "avatar.obj", rest, fine.faces, fine.uv, vertex_normals(rest, fine.faces), "avatar.mtl")
    (out / "avatar.mtl").write_text(
        "newmtl skin\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\n"
        "map_Kd albedo.png\nnorm normal_map.png\nmap_Bump normal_map.png\n")
    write_png(out / "albedo.png", np.clip(st.albedo, 0, 1))
    write_png(out / "normal_map.png", np.clip((st.normal_map + 1) / 2, 0, 1))
    arrays = {"beta": st.beta, "displacement": st.displacement, "albedo": st.albedo,
              "normal_map": st.normal_map, "light_positions": st.light_positions,
              "reflection": st.reflection, "gammas": st.gammas, "translations": st.translations}
    meta = {"rig": "rig", "n_frames": st.n_frames}
    if camera is not None:
        meta["camera"] = camera.to_dict()
    save_arrays(out / "state", arrays, meta, kind="avatar")
    rig.save(out / "rig")
    return st


def import_avatar(path) -> tuple[AvatarState, RigBundle, Camera | None]:
    path = Path(path)
    arrays, meta = load_arrays(path / "state", kind="avatar")
    rig = RigBundle.load(path / meta.get("rig", "rig"))
    st = AvatarState(arrays["beta"], arrays["gammas"], arrays["translations"], arrays["displacement"],
                     arrays["albedo"], arrays["normal_map"], arrays["light_positions"], arrays["reflection"])
    cam = Camera.from_dict(meta["camera"]) if "camera" in meta else None
    return st, rig, cam


def save_state(path, state: AvatarState, meta: dict | None = None):
    """Checkpoint a full state (same container format as rigs)."""
    arrays = {k: f32(v) for k, v in state.__dict__.items()}
    return save_arrays(path, arrays, meta or {}, kind="checkpoint")


def load_state(path) -> AvatarState:
    arrays, _ = load_arrays(path, kind="checkpoint")
    return AvatarState(**arrays)
