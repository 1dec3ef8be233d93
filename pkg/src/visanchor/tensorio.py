"""Raw f32 tensor blobs, multi-image instance bundles and JSON reports.

On disk a tensor is a little-endian float32 payload plus a small JSON
manifest::

    {"shape": [K, D], "dtype": "f32", "layout": "row-major",
     "endianness": "little", "file": "img0_tokens.bin"}

An instance directory holds ``instance.json`` which embeds one manifest per
tensor; every ``file`` is relative to that directory.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    DimMismatch,
    MissingFile,
    NonFinite,
    RankError,
    SchemaError,
    SizeMismatch,
    TensorIOError,
)

_DTYPE = np.dtype("<f4")
_MANIFEST_KEYS = {"shape", "dtype", "layout", "endianness", "file"}


@dataclass(frozen=True)
class TensorManifest:
    shape: tuple[int, ...]
    file: str
    dtype: str = "f32"
    layout: str = "row-major"
    endianness: str = "little"

    @classmethod
    def from_dict(cls, d: Any, where: str = "manifest") -> "TensorManifest":
        if not isinstance(d, dict):
            raise SchemaError(f"{where}: expected an object, got {type(d).__name__}")
        missing = {"shape", "file"} - d.keys()
        if missing:
            raise SchemaError(f"{where}: missing keys {sorted(missing)}")
        extra = d.keys() - _MANIFEST_KEYS
        if extra:
            raise SchemaError(f"{where}: unknown keys {sorted(extra)}")
        shape = d["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in shape
        ):
            raise SchemaError(f"{where}: shape must be a list of integers")
        if d.get("dtype", "f32") != "f32":
            raise SchemaError(f"{where}: dtype must be 'f32'")
        if d.get("layout", "row-major") != "row-major":
            raise SchemaError(f"{where}: layout must be 'row-major'")
        if d.get("endianness", "little") != "little":
            raise SchemaError(f"{where}: endianness must be 'little'")
        if not isinstance(d["file"], str) or not d["file"]:
            raise SchemaError(f"{where}: file must be a non-empty string")
        return cls(shape=tuple(shape), file=d["file"])

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "dtype": self.dtype,
            "layout": self.layout,
            "endianness": self.endianness,
            "file": self.file,
        }


def _check_shape(shape) -> None:
    if not 1 <= len(shape) <= 3:
        raise RankError(f"tensor rank must be 1, 2 or 3, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise SizeMismatch(f"shape entries must be positive, got {list(shape)}")


def load_tensor(manifest: TensorManifest, base_dir) -> np.ndarray:
    """Read the payload named by ``manifest`` relative to ``base_dir``.

    Returns a float32 array of the declared shape. Values are bit-exact to
    the payload; NaN and Inf are rejected.
    """
    _check_shape(manifest.shape)
    path = Path(base_dir) / manifest.file
    if not path.is_file():
        raise MissingFile(f"tensor payload not found: {path}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TensorIOError(f"cannot read {path}: {exc}") from exc
    expected = math.prod(manifest.shape) * _DTYPE.itemsize
    if len(raw) != expected:
        raise SizeMismatch(
            f"{path}: payload is {len(raw)} bytes, shape {list(manifest.shape)} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype=_DTYPE).reshape(manifest.shape)
    if not np.isfinite(arr).all():
        raise NonFinite(f"{path}: payload contains NaN or Inf")
    # native-endian, writeable, owned copy
    return arr.astype(np.float32)


def save_tensor(arr, base_dir, filename: str) -> TensorManifest:
    """Write ``arr`` as a raw payload under ``base_dir`` and return its manifest."""
    a = np.asarray(arr, dtype=np.float32)
    _check_shape(a.shape)
    if not np.isfinite(a).all():
        raise NonFinite(f"refusing to write non-finite values to {filename}")
    path = Path(base_dir) / filename
    try:
        path.write_bytes(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc
    return TensorManifest(shape=tuple(int(s) for s in a.shape), file=filename)


@dataclass(frozen=True, eq=False)
class ImageEntry:
    """One image: ``tokens`` is [U*V, D] row-major with u the column index."""

    u: int
    v: int
    tokens: np.ndarray
    caption: np.ndarray | None = None

    @property
    def caption_source(self) -> str:
        return "caption" if self.caption is not None else "question"

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])

    def grid(self) -> np.ndarray:
        """Tokens reshaped to [V, U, D] (row, column, feature)."""
        return self.tokens.reshape(self.v, self.u, self.dim)

    def __eq__(self, other):
        if not isinstance(other, ImageEntry):
            return NotImplemented
        return (
            self.u == other.u
            and self.v == other.v
            and np.array_equal(self.tokens, other.tokens)
            and _opt_equal(self.caption, other.caption)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class InstanceBundle:
    images: tuple[ImageEntry, ...]
    question: np.ndarray
    logits_global: np.ndarray | None = None
    logits_compressed: np.ndarray | None = None

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return int(self.question.shape[1])

    def text_for(self, i: int) -> np.ndarray:
        """Caption embedding of image ``i``, or the question as its substitute."""
        cap = self.images[i].caption
        return self.question if cap is None else cap

    def __eq__(self, other):
        if not isinstance(other, InstanceBundle):
            return NotImplemented
        return (
            self.images == other.images
            and np.array_equal(self.question, other.question)
            and _opt_equal(self.logits_global, other.logits_global)
            and _opt_equal(self.logits_compressed, other.logits_compressed)
        )

    def validate(self) -> "InstanceBundle":
        if not self.images:
            raise SchemaError("instance has no images")
        if self.question.ndim != 2:
            raise SchemaError("question embedding must be rank 2 [L, D]")
        d = self.dim
        for i, img in enumerate(self.images):
            if img.u < 1 or img.v < 1:
                raise SchemaError(f"image {i}: grid dims must be positive")
            if img.tokens.ndim != 2 or img.tokens.shape[0] != img.u * img.v:
                raise SchemaError(
                    f"image {i}: tokens shape {list(img.tokens.shape)} "
                    f"does not match K = U*V = {img.u * img.v}"
                )
            if img.tokens.shape[1] != d:
                raise DimMismatch(f"image {i}: token width {img.tokens.shape[1]} != question width {d}")
            if img.caption is not None:
                if img.caption.ndim != 2:
                    raise SchemaError(f"image {i}: caption must be rank 2 [L, D]")
                if img.caption.shape[1] != d:
                    raise DimMismatch(f"image {i}: caption width {img.caption.shape[1]} != {d}")
        lg, lc = self.logits_global, self.logits_compressed
        for name, lo in (("logits_global", lg), ("logits_compressed", lc)):
            if lo is not None and lo.ndim != 2:
                raise SchemaError(f"{name} must be rank 2 [T_steps, vocab]")
        if lg is not None and lc is not None and lg.shape != lc.shape:
            raise DimMismatch(
                f"logits streams differ in shape: {list(lg.shape)} vs {list(lc.shape)}"
            )
        return self


def _manifest(d, where) -> TensorManifest | None:
    return None if d is None else TensorManifest.from_dict(d, where)


def load_instance(path) -> InstanceBundle:
    """Load and validate an instance directory."""
    root = Path(path)
    meta_path = root / "instance.json"
    if not meta_path.is_file():
        raise MissingFile(f"instance.json not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise TensorIOError(f"cannot read {meta_path}: {exc}") from exc

    if not isinstance(meta, dict) or "images" not in meta or "question" not in meta:
        raise SchemaError(f"{meta_path}: needs 'images' and 'question'")
    if not isinstance(meta["images"], list) or not meta["images"]:
        raise SchemaError(f"{meta_path}: 'images' must be a non-empty list")

    images = []
    for i, im in enumerate(meta["images"]):
        where = f"images[{i}]"
        if not isinstance(im, dict) or "grid" not in im or "tokens" not in im:
            raise SchemaError(f"{where}: needs 'grid' and 'tokens'")
        g = im["grid"]
        if not isinstance(g, dict) or not all(
            isinstance(g.get(k), int) and not isinstance(g.get(k), bool) for k in ("u", "v")
        ):
            raise SchemaError(f"{where}.grid: needs integer 'u' and 'v'")
        tokens = load_tensor(TensorManifest.from_dict(im["tokens"], f"{where}.tokens"), root)
        cap_m = _manifest(im.get("caption"), f"{where}.caption")
        caption = None if cap_m is None else load_tensor(cap_m, root)
        images.append(ImageEntry(u=g["u"], v=g["v"], tokens=tokens, caption=caption))

    question = load_tensor(TensorManifest.from_dict(meta["question"], "question"), root)
    lg_m = _manifest(meta.get("logits_global"), "logits_global")
    lc_m = _manifest(meta.get("logits_compressed"), "logits_compressed")
    bundle = InstanceBundle(
        images=tuple(images),
        question=question,
        logits_global=None if lg_m is None else load_tensor(lg_m, root),
        logits_compressed=None if lc_m is None else load_tensor(lc_m, root),
    )
    return bundle.validate()


def save_instance(bundle: InstanceBundle, path) -> Path:
    """Write ``bundle`` as a self-contained instance directory."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images = []
    for i, img in enumerate(bundle.images):
        images.append(
            {
                "grid": {"u": img.u, "v": img.v},
                "tokens": save_tensor(img.tokens, root, f"img{i}_tokens.bin").to_dict(),
                "caption": None
                if img.caption is None
                else save_tensor(img.caption, root, f"img{i}_caption.bin").to_dict(),
            }
        )
    meta = {
        "images": images,
        "question": save_tensor(bundle.question, root, "question.bin").to_dict(),
        "logits_global": None,
        "logits_compressed": None,
    }
    if bundle.logits_global is not None:
        meta["logits_global"] = save_tensor(bundle.logits_global, root, "logits_global.bin").to_dict()
    if bundle.logits_compressed is not None:
        meta["logits_compressed"] = save_tensor(
            bundle.logits_compressed, root, "logits_compressed.bin"
        ).to_dict()
    (root / "instance.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return root


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return obj.to_dict()
        return dataclasses.asdict(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dumps_report(report) -> str:
    if hasattr(report, "to_dict"):
        report = report.to_dict()
    return json.dumps(report, sort_keys=True, indent=2, default=_jsonable, allow_nan=False) + "\n"


def write_report(report, path) -> Path:
    """Serialise ``report`` to deterministic JSON (sorted keys), atomically."""
    path = Path(path)
    text = dumps_report(report)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.chmod(tmp, 0o644)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise TensorIOError(f"cannot write report {path}: {exc}") from exc
    return path
