"""Procedural scene rendering and dataset assembly.

Scenes are textured axis-aligned cuboids (one of them a thin ground slab)
placed so every surface stays inside the depth range from every camera.
Textures are smooth sums of sinusoids so that sub-pixel resampling of a
rendered view stays accurate, which is what makes ground-truth-depth
warping a usable oracle.

Dataset directory layout::

    out_dir/
      manifest.json              pairing, intrinsics, pair list
      scene_0000/
        meta.json                poses (9 R values row-major + 3 t), intrinsics,
                                 depth scale
        view_000.png             8-bit RGB
        depth_000.png            16-bit grayscale, value = depth/scale*65535
        vis_000_001.png          visibility of pair (source 000, target 001)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import geometry as G
from .geometry import Intrinsics, RigidTransform

FORMAT_VERSION = 1
DEPTH_RANGE = (2.0, 6.0)  # scene units, shared default with the model config
ORBIT_RADIUS = 4.0
GEOMETRY_RADIUS = 1.9  # max distance of any surface point from the origin
BACKGROUND_COLOR = (0.32, 0.36, 0.42)
ORBIT_AZIMUTH_STEP = 20.0
ORBIT_ELEVATIONS = (0.0, 10.0, 20.0)
ORBIT_MAX_GAP = 40.0
SEQUENCE_MAX_OFFSET = 7
VISIBILITY_REL_TOL = 0.01  # two-view depth cross-check threshold


# ---------------------------------------------------------------------------
# textures


@dataclass(frozen=True)
class Texture:
    """Smooth solid (3-d) procedural texture, evaluated at world points.

    Solid textures keep the surface color continuous across cuboid edges,
    which keeps sub-pixel resampling of rendered views band-limited;
    frequencies stay low for the same reason.
    """

    kind: str  # checker | stripes | noise
    base: np.ndarray  # rgb in [0,1]
    accent: np.ndarray
    freqs: np.ndarray  # [k,3] wave vectors, cycles per scene unit
    phases: np.ndarray
    amps: np.ndarray

    def weight(self, points: np.ndarray) -> np.ndarray:
        tau = 2.0 * np.pi
        if self.kind == "checker":
            return 0.5 + 0.5 * np.sin(tau * points @ self.freqs[0] + self.phases[0]) * np.sin(
                tau * points @ self.freqs[1] + self.phases[1]
            )
        if self.kind == "stripes":
            return 0.5 + 0.5 * np.sin(tau * points @ self.freqs[0] + self.phases[0])
        if self.kind == "noise":
            acc = np.zeros(points.shape[:-1])
            for i in range(len(self.amps)):
                acc = acc + self.amps[i] * np.sin(tau * points @ self.freqs[i] + self.phases[i])
            return 0.5 + acc
        raise ValueError(f"unknown texture kind {self.kind!r}")

    def sample(self, points: np.ndarray) -> np.ndarray:
        """RGB values for world points [..., 3]; result [..., 3]."""
        w = self.weight(points)[..., None]
        return self.base + (self.accent - self.base) * w


def _random_texture(rng: np.random.Generator) -> Texture:
    kind = ("checker", "stripes", "noise")[rng.integers(3)]
    base = rng.uniform(0.15, 0.85, 3)
    accent = rng.uniform(0.15, 0.85, 3)

    def wave_vectors(n):
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * rng.uniform(0.25, 0.55, (n, 1))

    if kind == "noise":
        amps = rng.uniform(0.5, 1.0, 3)
        amps = 0.5 * amps / amps.sum()
        freqs = wave_vectors(3)
        phases = rng.uniform(0, 2 * np.pi, 3)
    else:
        amps = np.zeros(2)
        freqs = wave_vectors(2)
        phases = rng.uniform(0, 2 * np.pi, 2)
    return Texture(kind, base, accent, freqs, phases, amps)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Cuboid:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture

    def corner_radius(self) -> float:
        corner = np.maximum(np.abs(self.lo), np.abs(self.hi))
        return float(np.linalg.norm(corner))


@dataclass
class Scene:
    seed: int
    cuboids: list[Cuboid] = field(default_factory=list)
    background_color: tuple = BACKGROUND_COLOR
    far_depth: float = DEPTH_RANGE[1]


def make_scene(seed: int, num_objects: Optional[int] = None) -> Scene:
    """Deterministic scene: a thin ground slab plus a few floating cuboids."""
    rng = np.random.default_rng([seed, 0x5CE4E])
    scene = Scene(seed=seed)
    slab_center = np.array([0.0, -0.95, 0.0])
    slab_half = np.array([0.85, 0.05, 0.85])
    scene.cuboids.append(Cuboid(slab_center - slab_half, slab_center + slab_half, _random_texture(rng)))
    n = int(rng.integers(2, 5)) if num_objects is None else num_objects
    placed = 0
    while placed < n:
        center = np.array(
            [rng.uniform(-0.75, 0.75), rng.uniform(-0.55, 0.35), rng.uniform(-0.75, 0.75)]
        )
        half = rng.uniform(0.18, 0.45, 3)
        cub = Cuboid(center - half, center + half, _random_texture(rng))
        if cub.corner_radius() <= GEOMETRY_RADIUS:
            scene.cuboids.append(cub)
            placed += 1
    return scene


def default_intrinsics(width: int, height: int) -> Intrinsics:
    return Intrinsics(float(width), float(width), width / 2.0, height / 2.0, width, height)


# ---------------------------------------------------------------------------
# rendering: per-face plane rasterization with a z-buffer


_FACES = [(axis, side) for axis in range(3) for side in (0, 1)]  # side 0 = lo, 1 = hi


def render_view(scene: Scene, pose: RigidTransform, k: Intrinsics):
    """Z-buffered rasterization; returns (image [3,H,W] in [0,1], depth [1,H,W]).

    Depth is camera-space z per pixel; background pixels take the scene's
    flat color and far depth.
    """
    w, h = int(round(k.width)), int(round(k.height))
    rays = G.ray_directions(k)  # camera space, [3,H,W]
    zbuf = np.full((h, w), np.inf)
    img = np.empty((h, w, 3))
    img[...] = np.asarray(scene.background_color)

    R, t = pose.R, pose.t
    rays_flat = rays.reshape(3, -1)
    for cub in scene.cuboids:
        bounds = (cub.lo, cub.hi)
        for axis, side in _FACES:
            n_c = R[:, axis]  # R @ e_axis
            plane_val = bounds[side][axis]
            denom = n_c @ rays_flat  # [H*W]
            num = plane_val + n_c @ t
            with np.errstate(divide="ignore", invalid="ignore"):
                z = num / denom
            z = z.reshape(h, w)
            hit = np.isfinite(z) & (z > G.Z_EPS) & (z < zbuf)
            if not hit.any():
                continue
            pc = rays[:, hit] * z[hit]  # camera-space points on the plane
            pw = (pc.T - t) @ R  # world: R^T (pc - t)
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            inside = (
                (pw[:, a1] >= cub.lo[a1]) & (pw[:, a1] <= cub.hi[a1])
                & (pw[:, a2] >= cub.lo[a2]) & (pw[:, a2] <= cub.hi[a2])
            )
            if not inside.any():
                continue
            hy, hx = np.nonzero(hit)
            hy, hx = hy[inside], hx[inside]
            zbuf[hy, hx] = z[hy, hx]
            img[hy, hx] = cub.texture.sample(pw[inside])

    depth = np.where(np.isfinite(zbuf), zbuf, scene.far_depth)
    return np.clip(img.transpose(2, 0, 1), 0.0, 1.0), depth[None]


def raycast(scene: Scene, pose: RigidTransform, k: Intrinsics, xs: np.ndarray, ys: np.ndarray):
    """Slab-method ray casting at arbitrary continuous pixel coordinates.

    Independent of the rasterizer; used as its oracle and for exact
    visibility queries. Returns (color [...,3], depth [...]).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    dirs_c = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=-1)
    origin = -pose.R.T @ pose.t
    dirs_w = dirs_c @ pose.R  # R^T @ d for each ray
    best_z = np.full(xs.shape, np.inf)
    color = np.empty(xs.shape + (3,))
    color[...] = np.asarray(scene.background_color)

    for cub in scene.cuboids:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (cub.lo - origin) / dirs_w
            t2 = (cub.hi - origin) / dirs_w
        tlo = np.fmin(t1, t2)
        thi = np.fmax(t1, t2)
        tmin = np.max(tlo, axis=-1)
        tmax = np.min(thi, axis=-1)
        hit = (tmax >= tmin) & (tmin > G.Z_EPS) & (tmin < best_z)
        if not hit.any():
            continue
        pts = origin + tmin[..., None] * dirs_w
        best_z[hit] = tmin[hit]
        color[hit] = cub.texture.sample(pts[hit])

    depth = np.where(np.isfinite(best_z), best_z, scene.far_depth)
    return color, depth


def bilinear_sample_np(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Plain bilinear lookup of [H,W] or [C,H,W] at center-convention coords."""
    squeeze = img.ndim == 2
    arr = img[None] if squeeze else img
    _, h, w = arr.shape
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(int), w - 2) if w > 1 else np.zeros_like(u, dtype=int)
    i0 = np.minimum(np.floor(v).astype(int), h - 2) if h > 1 else np.zeros_like(v, dtype=int)
    fu, fv = u - j0, v - i0
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    out = (
        arr[:, i0, j0] * (1 - fu) * (1 - fv)
        + arr[:, i0, j1] * fu * (1 - fv)
        + arr[:, i1, j0] * (1 - fu) * fv
        + arr[:, i1, j1] * fu * fv
    )
    return out[0] if squeeze else out


def compute_visibility(
    depth_t: np.ndarray,
    depth_s: np.ndarray,
    k: Intrinsics,
    t_to_s: RigidTransform,
    rel_tol: float = VISIBILITY_REL_TOL,
) -> np.ndarray:
    """Target pixels whose 3-d points are seen by the source camera.

    Two-view cross-check: reproject each target pixel with its depth, then
    compare the projected source-space z against the bilinearly sampled
    source depth map. Pixels sampling outside the source image are not
    visible. Inputs are [H,W]; returns bool [H,W].
    """
    h, w = depth_t.shape
    pts = G.backproject(depth_t, k)
    moved = np.einsum("ij,jhw->ihw", t_to_s.R, pts) + t_to_s.t[:, None, None]
    xs, ys, z = G.project(moved, k)
    in_front = z > G.Z_EPS
    in_bounds = (xs >= 0.5) & (xs <= w - 0.5) & (ys >= 0.5) & (ys <= h - 0.5)
    safe_x = np.clip(xs, 0.5, w - 0.5)
    safe_y = np.clip(ys, 0.5, h - 0.5)
    d_src = bilinear_sample_np(depth_s, safe_x, safe_y)
    agree = np.abs(d_src - z) <= rel_tol * np.abs(z)
    return in_front & in_bounds & agree


def visibility_mask(
    scene: Scene,
    pose_s: RigidTransform,
    depth_t: np.ndarray,
    depth_s: np.ndarray,
    k: Intrinsics,
    t_to_s: RigidTransform,
    rel_tol: float = VISIBILITY_REL_TOL,
) -> np.ndarray:
    """Ground-truth visibility written into generated datasets.

    The two-map cross-check of ``compute_visibility`` admits a thin band of
    occlusion-boundary pixels whose bilinearly blended source depth happens
    to agree; with the scene at hand, an exact ray cast at the reprojected
    source coordinates removes them.
    """
    vis = compute_visibility(depth_t, depth_s, k, t_to_s, rel_tol)
    pts = G.backproject(depth_t, k)
    moved = np.einsum("ij,jhw->ihw", t_to_s.R, pts) + t_to_s.t[:, None, None]
    xs, ys, z = G.project(moved, k)
    _, d_exact = raycast(scene, pose_s, k, xs, ys)
    exact_agree = np.abs(d_exact - z) <= rel_tol * np.abs(z)
    return vis & exact_agree


# ---------------------------------------------------------------------------
# view protocols


def orbit_views(views_per_scene: int) -> list[dict]:
    """(azimuth, elevation) grid: 20-degree azimuth ring per elevation."""
    views = []
    for el in ORBIT_ELEVATIONS:
        for az in np.arange(0.0, 360.0, ORBIT_AZIMUTH_STEP):
            views.append({"azimuth": float(az), "elevation": float(el)})
    if views_per_scene > len(views):
        raise ValueError(f"orbit protocol supports at most {len(views)} views")
    return views[:views_per_scene]


def orbit_pairs(views: list[dict]) -> list[tuple[int, int]]:
    """All ordered pairs with circular azimuth gap within the allowed range."""
    pairs = []
    for i, a in enumerate(views):
        for j, b in enumerate(views):
            if i == j:
                continue
            gap = abs(a["azimuth"] - b["azimuth"]) % 360.0
            gap = min(gap, 360.0 - gap)
            if gap <= ORBIT_MAX_GAP + 1e-9:
                pairs.append((i, j))
    return pairs


def sequence_views(views_per_scene: int) -> list[dict]:
    """Laterally translating camera track, fixed forward orientation."""
    xs = np.linspace(-0.35, 0.35, views_per_scene)
    return [{"x": float(x)} for x in xs]


def sequence_pairs(views: list[dict]) -> list[tuple[int, int]]:
    pairs = []
    n = len(views)
    for i in range(n):
        for j in range(n):
            if i != j and abs(i - j) <= SEQUENCE_MAX_OFFSET:
                pairs.append((i, j))
    return pairs


def view_pose(pairing: str, view: dict) -> RigidTransform:
    if pairing == "orbit":
        return G.pose_from_orbit(view["azimuth"], view["elevation"], ORBIT_RADIUS)
    if pairing == "sequence":
        eye = np.array([view["x"], 0.0, -ORBIT_RADIUS])
        return G.look_at(eye, eye + np.array([0.0, 0.0, 1.0]))
    raise ValueError(f"unknown pairing {pairing!r}; expected 'orbit' or 'sequence'")


# ---------------------------------------------------------------------------
# samples and on-disk format


@dataclass
class Sample:
    """One training record: source view, target view, relative pose."""

    scene: str
    source_id: int
    target_id: int
    source_img: np.ndarray  # [3,H,W] in [0,1]
    target_img: np.ndarray
    t_s_to_t: RigidTransform
    k: Intrinsics
    gt_depth_s: Optional[np.ndarray] = None  # [1,H,W]
    gt_depth_t: Optional[np.ndarray] = None
    gt_visibility: Optional[np.ndarray] = None  # bool [1,H,W], target pixels

    def __post_init__(self):
        for name in ("gt_depth_s", "gt_depth_t"):
            d = getattr(self, name)
            if d is not None and not (d > 0).all():
                raise ValueError(f"{name} must be positive everywhere it is defined")


@dataclass
class SceneDataset:
    root: Path
    pairing: str
    k: Intrinsics
    image_size: tuple[int, int]
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


def _save_rgb(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def _load_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _save_depth(path: Path, depth: np.ndarray, scale: float) -> None:
    q = np.clip(np.round(depth / scale * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def _load_depth(path: Path, scale: float) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0 * scale


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def _intrinsics_dict(k: Intrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height}


def _intrinsics_from(d: dict, where: str) -> Intrinsics:
    try:
        return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])
    except KeyError as e:
        raise ValueError(f"{where}: intrinsics entry missing field {e.args[0]!r}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def generate_dataset(
    num_scenes: int,
    views_per_scene: int,
    pairing: str,
    out_dir,
    seed: int = 0,
    image_size: tuple[int, int] = (64, 64),
) -> SceneDataset:
    """Render scenes, write the on-disk format, and return the loaded dataset.

    Deterministic given the seed: regenerating produces bit-identical files.
    The returned samples are read back from disk, so they match exactly what
    a later ``load_dataset`` sees (8-bit images, 16-bit depth).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e

    h, w = image_size
    k = default_intrinsics(w, h)
    views = orbit_views(views_per_scene) if pairing == "orbit" else sequence_views(views_per_scene)
    pair_idx = orbit_pairs(views) if pairing == "orbit" else sequence_pairs(views)
    depth_scale = DEPTH_RANGE[1]

    manifest = {
        "format_version": FORMAT_VERSION,
        "pairing": pairing,
        "seed": seed,
        "image_size": [h, w],
        "intrinsics": _intrinsics_dict(k),
        "scenes": [],
        "pairs": [],
    }
    for s in range(num_scenes):
        scene_name = f"scene_{s:04d}"
        scene_dir = out / scene_name
        scene_dir.mkdir(exist_ok=True)
        scene = make_scene(seed * 100003 + s)
        poses = [view_pose(pairing, v) for v in views]
        quantized_depths = []
        meta = {
            "depth_scale": depth_scale,
            "far_depth": scene.far_depth,
            "intrinsics": _intrinsics_dict(k),
            "views": [],
        }
        for vid, pose in enumerate(poses):
            img, depth = render_view(scene, pose, k)
            _save_rgb(scene_dir / f"view_{vid:03d}.png", img)
            _save_depth(scene_dir / f"depth_{vid:03d}.png", depth[0], depth_scale)
            quantized_depths.append(_load_depth(scene_dir / f"depth_{vid:03d}.png", depth_scale))
            meta["views"].append(
                {
                    "id": vid,
                    "rotation": [float(x) for x in pose.R.reshape(-1)],
                    "translation": [float(x) for x in pose.t],
                    **views[vid],
                }
            )
        for src, tgt in pair_idx:
            rel_t_to_s = G.relative_transform(poses[tgt], poses[src])
            vis = visibility_mask(
                scene, poses[src], quantized_depths[tgt], quantized_depths[src], k, rel_t_to_s
            )
            _save_mask(scene_dir / f"vis_{src:03d}_{tgt:03d}.png", vis)
            manifest["pairs"].append({"scene": scene_name, "source": src, "target": tgt})
        _write_json(scene_dir / "meta.json", meta)
        manifest["scenes"].append(scene_name)
    _write_json(out / "manifest.json", manifest)
    return load_dataset(out)


def load_dataset(root) -> SceneDataset:
    """Read a dataset directory; iteration order is deterministic (sorted).

    Ground-truth depth and visibility are optional: external image+pose
    directories load with those fields absent. Malformed entries fail with
    the file and field named.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{manifest_path}: format_version {version} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    for fld in ("pairing", "intrinsics", "pairs", "image_size"):
        if fld not in manifest:
            raise ValueError(f"{manifest_path}: missing field {fld!r}")
    k = _intrinsics_from(manifest["intrinsics"], str(manifest_path))

    metas: dict[str, dict] = {}
    samples = []
    pairs = sorted(manifest["pairs"], key=lambda p: (p["scene"], p["source"], p["target"]))
    for pair in pairs:
        scene = pair["scene"]
        src, tgt = int(pair["source"]), int(pair["target"])
        scene_dir = root / scene
        if scene not in metas:
            meta_path = scene_dir / "meta.json"
            if not meta_path.exists():
                raise ValueError(f"{scene_dir}: missing meta.json")
            metas[scene] = json.loads(meta_path.read_text())
        meta = metas[scene]
        by_id = {v["id"]: v for v in meta.get("views", [])}

        def pose_of(vid: int) -> RigidTransform:
            if vid not in by_id:
                raise ValueError(f"{scene_dir / 'meta.json'}: no pose entry for view {vid}")
            v = by_id[vid]
            for fld in ("rotation", "translation"):
                if fld not in v:
                    raise ValueError(f"{scene_dir / 'meta.json'}: view {vid} missing {fld!r}")
            return RigidTransform(np.array(v["rotation"]).reshape(3, 3), np.array(v["translation"]))

        imgs = {}
        for vid in (src, tgt):
            img_path = scene_dir / f"view_{vid:03d}.png"
            if not img_path.exists():
                raise ValueError(f"missing image {img_path} for view {vid}")
            imgs[vid] = _load_rgb(img_path)

        scale = meta.get("depth_scale")
        depths = {}
        for vid in (src, tgt):
            dp = scene_dir / f"depth_{vid:03d}.png"
            if dp.exists():
                if scale is None:
                    raise ValueError(f"{scene_dir / 'meta.json'}: depth present but no depth_scale")
                depths[vid] = _load_depth(dp, scale)[None]
        vis_path = scene_dir / f"vis_{src:03d}_{tgt:03d}.png"
        vis = _load_mask(vis_path)[None] if vis_path.exists() else None

        samples.append(
            Sample(
                scene=scene,
                source_id=src,
                target_id=tgt,
                source_img=imgs[src],
                target_img=imgs[tgt],
                t_s_to_t=G.relative_transform(pose_of(src), pose_of(tgt)),
                k=k,
                gt_depth_s=depths.get(src),
                gt_depth_t=depths.get(tgt),
                gt_visibility=vis,
            )
        )
    h, w = manifest["image_size"]
    return SceneDataset(root=root, pairing=manifest["pairing"], k=k,
                        image_size=(int(h), int(w)), samples=samples)
