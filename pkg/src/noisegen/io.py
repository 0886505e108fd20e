"""File formats: float tensors, checkpoints, dataset manifests, PNG previews.

``*.f32``
    ``b"NGF1"``, u32 rank, ``rank`` x u32 dims, then little-endian float32
    data in row-major order.
``*.ckpt``
    ``b"NGCK"``, u32 format version, u32 header length, a UTF-8 JSON header
    (model config, schedule, run config, step, seed, adam step, table
    names), then each table as u32 entry count followed by entries of
    u16 name length, name, u32 rank, dims, float32 LE data.
``manifest.json``
    ``{"version", "seed", "scenes": [...], "splits": {"train": [...], "val": [...]}}``
    with image paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from PIL import Image

from .config import RunConfig
from .diffusion import AdamState
from .model import CameraSettings, ModelConfig, parameter_manifest

__all__ = [
    "FormatError",
    "ManifestError",
    "MissingFileError",
    "MalformedRecordError",
    "UnknownSensorError",
    "CheckpointError",
    "CheckpointMismatchError",
    "save_tensor",
    "load_tensor",
    "save_png",
    "load_image",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "Scene",
    "DatasetManifest",
    "load_dataset",
    "write_manifest",
]

TENSOR_MAGIC = b"NGF1"
CKPT_MAGIC = b"NGCK"
CKPT_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


class CheckpointError(FormatError):
    pass


class CheckpointMismatchError(CheckpointError):
    """The checkpoint was written for a different model configuration."""


class ManifestError(ValueError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class MissingFileError(ManifestError):
    pass


class MalformedRecordError(ManifestError):
    pass


class UnknownSensorError(ManifestError):
    pass


# ---------------------------------------------------------------------------
# tensors


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}")
    return buf


def _read_array(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 4 * count, "tensor data"), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        _write_array(fh, np.asarray(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != TENSOR_MAGIC:
            raise FormatError(f"{path}: not an NGF1 tensor file")
        arr = _read_array(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor data")
    return arr


def save_png(path, img) -> None:
    """8-bit preview of a (3, H, W) image in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    a = np.clip(np.round(a.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def load_image(path) -> np.ndarray:
    """Read ``.f32`` exactly or decode an 8-bit image to (3, H, W) floats in [0, 1]."""
    path = Path(path)
    if path.suffix == ".f32":
        arr = load_tensor(path)
        return arr[0] if arr.ndim == 4 and arr.shape[0] == 1 else arr
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return a.transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict
    ema: dict | None = None
    psi: dict | None = None
    adam: AdamState | None = None
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


_TABLES = ("params", "ema", "psi", "adam_m", "adam_v")


def _tables_of(ck: Checkpoint) -> dict[str, dict]:
    tables = {"params": ck.params}
    if ck.ema is not None:
        tables["ema"] = ck.ema
    if ck.psi is not None:
        tables["psi"] = ck.psi
    if ck.adam is not None:
        tables["adam_m"] = ck.adam.m
        tables["adam_v"] = ck.adam.v
    return tables


def save_checkpoint(path, ck: Checkpoint) -> None:
    manifest = parameter_manifest(ck.config.model)
    tables = _tables_of(ck)
    for tname, table in tables.items():
        if set(table) != set(manifest):
            raise CheckpointError(f"table {tname!r} does not match the architecture manifest")
    header = {
        "run_config": ck.config.to_dict(),
        "model_config": ck.config.model.to_dict(),
        "schedule": {"kind": "linear", "T": ck.config.T, "beta_start": ck.config.beta_start,
                     "beta_end": ck.config.beta_end},
        "step": int(ck.step),
        "seed": int(ck.seed),
        "adam_step": int(ck.adam.step) if ck.adam is not None else None,
        "tables": list(tables),
        "extra": ck.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for tname, table in tables.items():
            fh.write(struct.pack("<I", len(manifest)))
            for name in manifest:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                _write_array(fh, table[name])
    os.replace(tmp, path)


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect_model`` the stored architecture must match it."""
    try:
        return _load_checkpoint(path, expect_model)
    except CheckpointError:
        raise
    except FormatError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def _load_checkpoint(path, expect_model: ModelConfig | None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8, "checkpoint header"))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, hlen, "checkpoint header").decode("utf-8"))
        cfg = RunConfig.from_dict(header["run_config"])
        if expect_model is not None and expect_model != cfg.model:
            raise CheckpointMismatchError(
                f"{path}: checkpoint model config {cfg.model.to_dict()} does not match "
                f"expected {expect_model.to_dict()}"
            )
        manifest = parameter_manifest(cfg.model)
        tables = {}
        for tname in header["tables"]:
            if tname not in _TABLES:
                raise CheckpointError(f"{path}: unknown table {tname!r}")
            (count,) = struct.unpack("<I", _read_exact(fh, 4, "table size"))
            table = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
                name = _read_exact(fh, nlen, "name").decode("utf-8")
                table[name] = _read_array(fh)
            if set(table) != set(manifest):
                raise CheckpointError(
                    f"{path}: table {tname!r} names do not match the architecture manifest"
                )
            for name, shape in manifest.items():
                if table[name].shape != tuple(shape):
                    raise CheckpointError(f"{path}: {tname}/{name} has shape {table[name].shape}")
            tables[tname] = {k: table[k] for k in manifest}
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    adam = None
    if "adam_m" in tables:
        adam = AdamState(tables["adam_m"], tables["adam_v"], header["adam_step"])
    return Checkpoint(
        config=cfg,
        params=tables["params"],
        ema=tables.get("ema"),
        psi=tables.get("psi"),
        adam=adam,
        step=header["step"],
        seed=header["seed"],
        extra=header.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Scene:
    scene_id: str
    clean_path: Path
    noisy_paths: list
    settings: CameraSettings
    profile_name: str

    def load_clean(self) -> np.ndarray:
        return load_image(self.clean_path)

    def load_noisy(self, k: int = 0) -> np.ndarray:
        return load_image(self.noisy_paths[k])


@dataclass
class DatasetManifest:
    version: int
    scenes: list
    splits: dict
    root: Path
    seed: int | None = None

    def scene(self, scene_id: str) -> Scene:
        for sc in self.scenes:
            if sc.scene_id == scene_id:
                return sc
        raise KeyError(scene_id)

    def split(self, name: str) -> list:
        return [self.scene(i) for i in self.splits.get(name, [])]

    def arrays(self, split: str | None = None):
        """Stacked (clean, noisy, settings) over every noisy capture of the chosen scenes."""
        scenes = self.scenes if split is None else self.split(split)
        clean, noisy, settings = [], [], []
        for sc in scenes:
            c = sc.load_clean()
            for k in range(len(sc.noisy_paths)):
                clean.append(c)
                noisy.append(sc.load_noisy(k))
                settings.append(sc.settings)
        if not clean:
            return np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 3, 0, 0), np.float32), []
        return np.stack(clean), np.stack(noisy), settings


def _require(rec: dict, key: str, path, kind=MalformedRecordError):
    if key not in rec:
        raise kind(f"record is missing {key!r}: {rec}", path)
    return rec[key]


def load_dataset(manifest_path, sensor_vocab=None) -> DatasetManifest:
    """Parse and validate a manifest.  Images are decoded lazily via :class:`Scene`."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError("manifest not found", manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"invalid JSON: {exc}", manifest_path) from exc
    if not isinstance(doc, dict):
        raise MalformedRecordError("manifest must be a JSON object", manifest_path)
    root = manifest_path.parent
    version = _require(doc, "version", manifest_path)
    if version != MANIFEST_VERSION:
        raise MalformedRecordError(f"unsupported manifest version {version}", manifest_path)
    raw_scenes = _require(doc, "scenes", manifest_path)
    if not isinstance(raw_scenes, list):
        raise MalformedRecordError("'scenes' must be a list", manifest_path)
    scenes, seen = [], set()
    for rec in raw_scenes:
        if not isinstance(rec, dict):
            raise MalformedRecordError(f"scene record must be an object: {rec!r}", manifest_path)
        sid = str(_require(rec, "scene_id", manifest_path))
        if sid in seen:
            raise MalformedRecordError(f"duplicate scene_id {sid!r}", manifest_path)
        seen.add(sid)
        clean_path = root / _require(rec, "clean_path", manifest_path)
        noisy_paths = [root / p for p in _require(rec, "noisy_paths", manifest_path)]
        for p in [clean_path, *noisy_paths]:
            if not p.is_file():
                raise MissingFileError(f"scene {sid!r} references a missing file", p)
        try:
            settings = CameraSettings.from_dict(_require(rec, "settings", manifest_path))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(f"scene {sid!r} has invalid settings: {exc}", manifest_path) from exc
        if sensor_vocab is not None and settings.sensor_type not in sensor_vocab:
            raise UnknownSensorError(
                f"scene {sid!r} uses sensor {settings.sensor_type!r}; known: {list(sensor_vocab)}",
                manifest_path,
            )
        scenes.append(Scene(sid, clean_path, noisy_paths, settings, str(rec.get("profile_name", settings.sensor_type))))
    splits = doc.get("splits", {"train": [s.scene_id for s in scenes], "val": []})
    if not isinstance(splits, dict):
        raise MalformedRecordError("'splits' must be an object", manifest_path)
    assigned: set = set()
    for name, ids in splits.items():
        for sid in ids:
            if sid not in seen:
                raise MalformedRecordError(f"split {name!r} references unknown scene {sid!r}", manifest_path)
            if sid in assigned:
                raise MalformedRecordError(f"scene {sid!r} appears in more than one split", manifest_path)
            assigned.add(sid)
    return DatasetManifest(version, scenes, {k: list(v) for k, v in splits.items()}, root, doc.get("seed"))


def write_manifest(path, scenes: list[dict], splits: dict | None = None, seed=None, extra: dict | None = None) -> None:
    doc = {"version": MANIFEST_VERSION, "seed": seed, "scenes": scenes,
           "splits": splits if splits is not None else {"train": [s["scene_id"] for s in scenes], "val": []}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))
