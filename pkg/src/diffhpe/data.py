"""Pose tracks and clips, normalization, the synthetic motion generator and the
on-disk dataset container.

Container layout (one directory)::

    manifest.json            format/version, skeleton, J, units, camera,
                             splits, and per-track array declarations
    track_0000_x2d.f32       flat little-endian float32, shape (N, J, 2), pixels
    track_0000_x3d.f32       flat little-endian float32, shape (N, J, 3), meters
    ...

External data in the community ``.npz`` layout is read by
:func:`load_external` with ``format_tag="npz"``: one array per field keyed
``"<subject>/<action>/<camera>/x2d"`` (N, J, 2, pixels) and
``".../x3d"`` (N, J, 3, camera-frame meters, same joint order as the
skeleton). Preprocessed Human3.6M arrays map onto this by selecting the 17
lifting joints and transforming world positions into each camera frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .conditioning import normalize_2d
from .skeleton import SkeletonGraph, segment_lengths, skeleton_from_dict

FORMAT_NAME = "diffhpe-dataset"
FORMAT_VERSION = 1
FPS = 50.0


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset container."""


class SchemaError(ValueError):
    """Dataset contents disagree with the configured skeleton."""


@dataclass(frozen=True)
class Camera:
    focal: float = 1100.0
    center: tuple = (500.0, 500.0)
    image_size: tuple = (1000, 1000)

    def __post_init__(self):
        if self.focal <= 0 or min(self.image_size) <= 0:
            raise ValueError("focal length and image size must be positive")

    def project(self, x3d):
        """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
        x3d = np.asarray(x3d, dtype=np.float64)
        return self.focal * x3d[..., :2] / x3d[..., 2:3] + np.asarray(self.center, dtype=np.float64)

    def to_dict(self):
        return {"focal": self.focal, "center": list(self.center), "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["focal"]), tuple(d["center"]), tuple(d["image_size"]))


@dataclass
class Track:
    x2d: np.ndarray
    x3d: np.ndarray
    track_id: int
    subject: str = "synthetic"
    action: str = "random"
    camera: str = "cam0"

    def __post_init__(self):
        if self.x2d.shape[:2] != self.x3d.shape[:2]:
            raise SchemaError(f"track {self.track_id}: 2D {self.x2d.shape} and 3D {self.x3d.shape} disagree")

    def __len__(self):
        return len(self.x3d)


@dataclass
class PoseClip:
    x2d: np.ndarray
    x3d: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x2d.shape[:2] != self.x3d.shape[:2] or self.x2d.shape[-1] != 2 or self.x3d.shape[-1] != 3:
            raise SchemaError(f"inconsistent clip shapes {self.x2d.shape} / {self.x3d.shape}")
        w, h = self.meta.get("image_size", (1, 1))
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")


@dataclass
class PoseDataset:
    skeleton: SkeletonGraph
    camera: Camera
    tracks: list
    splits: dict

    def split_tracks(self, split: str) -> list:
        ids = set(self.splits.get(split, ()))
        return [t for t in self.tracks if t.track_id in ids]

    def clips(self, split: str, L: int = 27, stride: int = 1) -> list:
        out = []
        for t in self.split_tracks(split):
            out.extend(window(t, L, stride, image_size=self.camera.image_size))
        return out


def window(track: Track, L: int = 27, stride: int = 1, image_size=(1000, 1000)) -> list:
    """Overlapping clips of length L; a trailing partial window is dropped."""
    if L < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    if len(track) < L:
        raise ValueError(f"track {track.track_id} has {len(track)} frames, shorter than L={L}")
    clips = []
    for start in range(0, len(track) - L + 1, stride):
        meta = {"track": track.track_id, "start": start, "subject": track.subject,
                "action": track.action, "camera": track.camera, "image_size": tuple(image_size)}
        clips.append(PoseClip(track.x2d[start:start + L], track.x3d[start:start + L], meta))
    return clips


def stack_clips(clips):
    """(N, L, J, 2) pixel and (N, L, J, 3) meter arrays from a list of clips."""
    return np.stack([c.x2d for c in clips]), np.stack([c.x3d for c in clips])


# -- normalization ---------------------------------------------------------


@dataclass
class NormalizationStats:
    """Per-joint, per-axis statistics of root-relative 3D poses.

    ``tracks`` records which tracks the statistics were fitted on.
    """

    mean: np.ndarray
    std: np.ndarray
    image_size: tuple
    root: int = 0
    tracks: tuple = ()

    def __post_init__(self):
        if np.any(~(self.std > 0)):
            raise ValueError("degenerate normalization statistics (non-positive std)")

    def check_disjoint(self, clips):
        used = set(self.tracks)
        leaked = {c.meta.get("track") for c in clips} & used
        if leaked:
            raise ValueError(f"normalization statistics were fitted on evaluation tracks {sorted(leaked)}")

    def arrays(self) -> dict:
        return {"stats/mean": self.mean, "stats/std": self.std}

    def meta(self) -> dict:
        return {"image_size": list(self.image_size), "root": self.root, "tracks": list(self.tracks)}

    @classmethod
    def from_parts(cls, arrays, meta):
        return cls(np.asarray(arrays["stats/mean"], np.float64), np.asarray(arrays["stats/std"], np.float64),
                   tuple(meta["image_size"]), int(meta["root"]), tuple(meta["tracks"]))


def fit_stats(clips, root: int = 0) -> NormalizationStats:
    _, x3d = stack_clips(clips)
    rel = x3d - x3d[..., root:root + 1, :]
    flat = rel.reshape(-1, *rel.shape[-2:])
    mean = flat.mean(0)
    std = flat.std(0)
    mean[root] = 0.0
    std[root] = 1.0
    if np.any(std <= 0):
        raise ValueError("degenerate normalization statistics (a joint never moves)")
    tracks = tuple(sorted({c.meta.get("track") for c in clips if c.meta.get("track") is not None}))
    return NormalizationStats(mean, std, tuple(clips[0].meta.get("image_size", (1000, 1000))), root, tracks)


def to_model_space(clip_or_x2d, x3d=None, stats: NormalizationStats = None):
    """Normalized 2D, standardized root-relative 3D and the root trajectory.

    Accepts a :class:`PoseClip` or raw ``(x2d, x3d)`` arrays with leading
    batch dimensions.
    """
    if isinstance(clip_or_x2d, PoseClip):
        x2d, x3d = clip_or_x2d.x2d, clip_or_x2d.x3d
    else:
        x2d = clip_or_x2d
    if stats is None:
        raise ValueError("normalization statistics are required")
    r = stats.root
    x3d = np.asarray(x3d, dtype=np.float64)
    root_traj = x3d[..., r:r + 1, :]
    x3d_std = (x3d - root_traj - stats.mean) / stats.std
    x2d_norm = normalize_2d(np.asarray(x2d, dtype=np.float64), stats.image_size)
    return x2d_norm, x3d_std, root_traj


def from_model_space(x3d_std, stats: NormalizationStats, root_traj=None):
    """Inverse of the 3D part of :func:`to_model_space` (root at origin if no trajectory)."""
    out = np.asarray(x3d_std, dtype=np.float64) * stats.std + stats.mean
    return out if root_traj is None else out + root_traj


# -- synthetic motion --------------------------------------------------------


def _smooth_signal(rng, n_frames, dims, amplitude, n_waves=3, freq=(0.15, 1.2)):
    t = np.arange(n_frames) / FPS
    f = rng.uniform(*freq, size=(n_waves, dims))
    phase = rng.uniform(0, 2 * np.pi, size=(n_waves, dims))
    amp = rng.uniform(0.3, 1.0, size=(n_waves, dims)) * amplitude / n_waves
    return np.sum(amp[None] * np.sin(2 * np.pi * f[None] * t[:, None, None] + phase[None]), axis=1)


def _symmetric_lengths(skeleton: SkeletonGraph) -> np.ndarray:
    base = segment_lengths(skeleton.rest_pose, skeleton)
    for ls, rs in zip(skeleton.left_segments, skeleton.right_segments):
        base[ls] = base[rs] = 0.5 * (base[ls] + base[rs])
    return base


def _segment_amplitude(skeleton: SkeletonGraph, s: int) -> float:
    p, d = skeleton.edges[s]
    if skeleton.joint_sides[d] == "center":
        return 0.15
    if p == skeleton.root or skeleton.joint_sides[p] == "center":
        return 0.12  # hip / shoulder girdle
    return 0.7


def synthetic_track(rng, skeleton: SkeletonGraph, n_frames: int, camera: Camera, track_id: int = 0):
    """One track of smooth random motion with fixed, mirror-symmetric bone lengths."""
    if skeleton.rest_pose is None:
        raise ValueError(f"skeleton {skeleton.name!r} has no rest pose for the synthetic generator")
    S = skeleton.num_segments
    lengths = _symmetric_lengths(skeleton) * rng.uniform(0.9, 1.1)
    factors = rng.uniform(0.92, 1.08, size=S)
    for ls, rs in zip(skeleton.left_segments, skeleton.right_segments):
        factors[rs] = factors[ls]
    lengths = lengths * factors
    rest = skeleton.rest_pose
    dirs = np.array([(rest[d] - rest[p]) / np.linalg.norm(rest[d] - rest[p]) for p, d in skeleton.edges])

    yaw = rng.uniform(-np.pi, np.pi) + _smooth_signal(rng, n_frames, 1, 1.2, freq=(0.05, 0.3))[:, 0]
    tilt = _smooth_signal(rng, n_frames, 2, 0.15)
    root_rot = Rotation.from_euler("y", yaw) * Rotation.from_rotvec(
        np.stack([tilt[:, 0], np.zeros(n_frames), tilt[:, 1]], axis=1))
    local = [Rotation.from_rotvec(_smooth_signal(rng, n_frames, 3, _segment_amplitude(skeleton, s)))
             for s in range(S)]

    x3d = np.zeros((n_frames, skeleton.num_joints, 3))
    x3d[:, skeleton.root] = (np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.15, 0.15), rng.uniform(4.5, 5.5)])
                             + _smooth_signal(rng, n_frames, 3, 0.1, freq=(0.05, 0.3)))
    world = {skeleton.root: root_rot}
    # edges are processed parent-first
    pending = list(range(S))
    while pending:
        for s in list(pending):
            p, d = skeleton.edges[s]
            if p in world:
                world[d] = world[p] * local[s]
                x3d[:, d] = x3d[:, p] + world[d].apply(dirs[s] * lengths[s])
                pending.remove(s)
    x2d = camera.project(x3d)
    w, h = camera.image_size
    if np.any(x3d[..., 2] <= 0) or np.any(x2d < 0) or np.any(x2d[..., 0] > w) or np.any(x2d[..., 1] > h):
        raise RuntimeError("synthetic pose left the camera frustum")
    return Track(x2d, x3d, track_id, subject=f"S{track_id:04d}", action="random", camera="cam0")


def synthetic_dataset(seed: int, num_tracks: int, track_length: int, skeleton: SkeletonGraph,
                      camera: Camera | None = None, test_fraction: float = 0.2, valid_fraction: float = 0.0):
    """Seeded synthetic dataset; tracks are split (disjointly) into train / valid / test."""
    if num_tracks < 1 or track_length < 1:
        raise ValueError("num_tracks and track_length must be positive")
    camera = camera or Camera()
    rng = np.random.default_rng(seed)
    tracks = [synthetic_track(rng, skeleton, track_length, camera, i) for i in range(num_tracks)]
    n_test = int(round(test_fraction * num_tracks))
    n_valid = int(round(valid_fraction * num_tracks))
    n_train = num_tracks - n_test - n_valid
    if n_train < 1 and num_tracks > 1:
        raise ValueError("split fractions leave no training tracks")
    ids = list(range(num_tracks))
    splits = {"train": ids[:max(n_train, 1)], "valid": ids[n_train:n_train + n_valid],
              "test": ids[n_train + n_valid:]}
    return PoseDataset(skeleton, camera, tracks, splits)


def with_detection_noise(dataset: PoseDataset, sigma_px: float, seed: int = 0) -> PoseDataset:
    """Copy of ``dataset`` whose 2D keypoints carry i.i.d. Gaussian detector error.

    Stands in for keypoints predicted by a 2D detector instead of projected
    ones; 3D targets are untouched and 2D stays inside the image.
    """
    if sigma_px < 0:
        raise ValueError("detection noise must be non-negative")
    if sigma_px == 0:
        return dataset
    rng = np.random.default_rng(seed)
    w, h = dataset.camera.image_size
    tracks = [replace(t, x2d=np.clip(t.x2d + rng.normal(scale=sigma_px, size=t.x2d.shape), 0.0, [w, h]))
              for t in dataset.tracks]
    return PoseDataset(dataset.skeleton, dataset.camera, tracks, dataset.splits)


# -- container I/O ----------------------------------------------------------


def save_dataset(dataset: PoseDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in dataset.tracks:
        files = {}
        for name, arr in (("x2d", t.x2d), ("x3d", t.x3d)):
            fname = f"track_{t.track_id:04d}_{name}.f32"
            np.ascontiguousarray(arr, dtype="<f4").tofile(out / fname)
            files[name] = {"path": fname, "shape": list(arr.shape), "dtype": "<f4"}
        entries.append({"id": t.track_id, "subject": t.subject, "action": t.action, "camera": t.camera,
                        "frames": len(t), "files": files})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "skeleton_id": dataset.skeleton.name,
        "num_joints": dataset.skeleton.num_joints,
        "skeleton": dataset.skeleton.to_dict(),
        "units": {"x2d": "px", "x3d": "m"},
        "camera": dataset.camera.to_dict(),
        "splits": dataset.splits,
        "tracks": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def _read_array(path: Path, decl: dict) -> np.ndarray:
    shape = tuple(int(s) for s in decl["shape"])
    dtype = np.dtype(decl.get("dtype", "<f4"))
    if dtype.byteorder == ">" or dtype.kind != "f":
        raise DatasetFormatError(f"{path.name}: unsupported dtype {decl.get('dtype')}")
    if not path.exists():
        raise DatasetFormatError(f"{path.name}: missing array file")
    expected = int(np.prod(shape)) * dtype.itemsize
    raw = path.read_bytes()
    if len(raw) < expected:
        raise DatasetFormatError(
            f"{path.name}: truncated at byte offset {len(raw)}, expected {expected} bytes for shape {shape}")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path.name}: trailing data after byte offset {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)


def load_dataset(path, skeleton: SkeletonGraph | None = None) -> PoseDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"manifest.json: parse error at offset {e.pos}: {e.msg}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"manifest.json: not a {FORMAT_NAME} container")
    if manifest.get("version", 0) > FORMAT_VERSION:
        raise DatasetFormatError(f"manifest.json: unsupported version {manifest.get('version')}")
    stored = skeleton_from_dict(manifest["skeleton"])
    skeleton = skeleton or stored
    J = skeleton.num_joints
    if int(manifest["num_joints"]) != J or stored.num_joints != J:
        raise SchemaError(f"dataset has {manifest['num_joints']} joints, skeleton {skeleton.name!r} has {J}")
    camera = Camera.from_dict(manifest["camera"])
    tracks = []
    for e in manifest["tracks"]:
        arrs = {}
        for name, width in (("x2d", 2), ("x3d", 3)):
            decl = e["files"][name]
            if len(decl["shape"]) != 3 or decl["shape"][1] != J or decl["shape"][2] != width:
                raise SchemaError(f"track {e['id']} {name}: shape {decl['shape']} does not match (N, {J}, {width})")
            arrs[name] = _read_array(root / decl["path"], decl)
        tracks.append(Track(arrs["x2d"], arrs["x3d"], int(e["id"]), e.get("subject", ""), e.get("action", ""),
                            e.get("camera", "")))
    splits = {k: [int(i) for i in v] for k, v in manifest["splits"].items()}
    _check_splits(splits)
    _check_bounds(tracks, camera)
    return PoseDataset(skeleton, camera, tracks, splits)


def _check_splits(splits):
    seen = {}
    for name, ids in splits.items():
        for i in ids:
            if i in seen:
                raise DatasetFormatError(f"track {i} appears in splits {seen[i]!r} and {name!r}")
            seen[i] = name


def _check_bounds(tracks, camera: Camera):
    w, h = camera.image_size
    for t in tracks:
        x = t.x2d
        zero = np.all(x == 0, axis=-1)
        inside = (x[..., 0] >= 0) & (x[..., 0] <= w) & (x[..., 1] >= 0) & (x[..., 1] <= h)
        if not np.all(inside | zero):
            raise SchemaError(f"track {t.track_id}: 2D keypoints outside the {w}x{h} image")


def load_external(path, format_tag: str = "diffhpe", skeleton: SkeletonGraph | None = None,
                  camera: Camera | None = None, test_subjects=("S9", "S11")) -> PoseDataset:
    """Load a dataset container (``"diffhpe"``) or keyed ``.npz`` arrays (``"npz"``)."""
    if format_tag == "diffhpe":
        return load_dataset(path, skeleton)
    if format_tag != "npz":
        raise ValueError(f"unknown dataset format {format_tag!r}")
    if skeleton is None:
        raise ValueError("the npz adapter needs the skeleton the arrays follow")
    camera = camera or Camera()
    try:
        data = np.load(path)
    except (ValueError, OSError) as e:
        raise DatasetFormatError(f"{path}: unreadable npz ({e})") from None
    keys = sorted({k.rsplit("/", 1)[0] for k in data.files})
    tracks, splits = [], {"train": [], "valid": [], "test": []}
    for i, key in enumerate(keys):
        parts = key.split("/")
        if len(parts) != 3 or f"{key}/x2d" not in data.files or f"{key}/x3d" not in data.files:
            raise DatasetFormatError(f"{path}: entry {key!r} is not <subject>/<action>/<camera> with x2d and x3d")
        x2d = np.asarray(data[f"{key}/x2d"], np.float64)
        x3d = np.asarray(data[f"{key}/x3d"], np.float64)
        if x2d.shape[1:] != (skeleton.num_joints, 2) or x3d.shape[1:] != (skeleton.num_joints, 3):
            raise SchemaError(f"{key}: arrays {x2d.shape}/{x3d.shape} do not match J={skeleton.num_joints}")
        tracks.append(Track(x2d, x3d, i, *parts))
        splits["test" if parts[0] in test_subjects else "train"].append(i)
    _check_bounds(tracks, camera)
    return PoseDataset(skeleton, camera, tracks, splits)
