"""Tensor storage for attackable models: raw words, scales, stats, and flips.

A bundle holds every named parameter tensor as raw storage words plus a
float64 "effective" view that the forward pass consumes. Float tensors decode
word-for-word; INT8 tensors dequantize as int * per-row scale. Per-tensor
min/max stats over effective values define the benign range used by the
range-constraint checks, and are refreshed after each applied flip unless the
caller freezes them.

Concurrency: scoring and search only read bundle state. apply_flip/undo_flip
mutate it and must be serialized per bundle; parallel candidate evaluation
works on independent copies (see attack module).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatch
from pathlib import Path

import numpy as np

from .bitcodec import FORMATS, FormatSpec, decode_array, decode_fast, encode_array

FORMAT_VERSION = 1
_ALIGN = 64
_DTYPES = {"BF16": "<u2", "FP16": "<u2", "FP32": "<u4", "INT8": "u1"}


class BundleFormatError(Exception):
    """Raised when an on-disk bundle is malformed or inconsistent."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    layer_index: int
    param_kind: str
    shape: tuple[int, ...]
    fmt: FormatSpec
    quantized: bool = False


@dataclass(frozen=True)
class LayerStats:
    """Benign range of one tensor: min/max over current effective values."""

    w_min: float
    w_max: float

    @property
    def width(self) -> float:
        return self.w_max - self.w_min


@dataclass(frozen=True)
class WeightRef:
    """Address of a single stored weight."""

    tensor: str
    flat_index: int


@dataclass(frozen=True)
class FlipToken:
    """Undo record for one applied flip; restores words, values, and stats."""

    ref: WeightRef
    bit_position: int
    old_raw: int
    old_effective: float
    old_stats: LayerStats


class AttackMode(Enum):
    FLOAT = "float"
    INT8 = "int8"
    MIXED = "mixed"


class ModelBundle:
    """Named tensors with raw words, effective float64 views, and stats."""

    def __init__(
        self,
        metas: list[TensorMeta],
        raw: dict[str, np.ndarray],
        scales: dict[str, np.ndarray],
        arch: dict | None = None,
    ):
        self.metas = list(metas)
        self._index = {m.name: i for i, m in enumerate(self.metas)}
        if len(self._index) != len(self.metas):
            raise ValueError("duplicate tensor names")
        self.raw = raw
        self.scales = scales
        self.arch = dict(arch or {})
        self.gradients: dict[str, np.ndarray] | None = None
        self.effective: dict[str, np.ndarray] = {}
        self.stats: dict[str, LayerStats] = {}
        for m in self.metas:
            if m.quantized and m.name not in scales:
                raise BundleFormatError(f"quantized tensor {m.name!r} has no scales")
            self._refresh_effective(m.name)
            self.refresh_stats(m.name)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_float(
        cls,
        tensors: list[tuple[str, int, str, np.ndarray]],
        fmt: FormatSpec,
        arch: dict | None = None,
    ) -> "ModelBundle":
        """Encode float64 arrays into a uniform-format unquantized bundle."""
        metas, raw = [], {}
        for name, layer_index, kind, values in tensors:
            values = np.asarray(values, dtype=np.float64)
            if not np.isfinite(values).all():
                raise ValueError(f"tensor {name!r} has non-finite values")
            metas.append(TensorMeta(name, layer_index, kind, values.shape, fmt))
            raw[name] = np.ascontiguousarray(encode_array(values, fmt))
        return cls(metas, raw, {}, arch)

    def copy(self) -> "ModelBundle":
        dup = ModelBundle.__new__(ModelBundle)
        dup.metas = list(self.metas)
        dup._index = dict(self._index)
        dup.raw = {k: v.copy() for k, v in self.raw.items()}
        dup.scales = {k: v.copy() for k, v in self.scales.items()}
        dup.arch = dict(self.arch)
        dup.gradients = (
            None if self.gradients is None else {k: v.copy() for k, v in self.gradients.items()}
        )
        dup.effective = {k: v.copy() for k, v in self.effective.items()}
        dup.stats = dict(self.stats)
        return dup

    # -- views ------------------------------------------------------------

    def meta(self, name: str) -> TensorMeta:
        return self.metas[self._index[name]]

    def tensor_id(self, name: str) -> int:
        return self._index[name]

    @property
    def is_quantized(self) -> bool:
        return any(m.quantized for m in self.metas)

    def num_weights(self) -> int:
        return sum(int(np.prod(m.shape)) for m in self.metas)

    def _refresh_effective(self, name: str) -> None:
        m = self.meta(name)
        vals = decode_array(self.raw[name], m.fmt)
        if m.quantized:
            vals = vals * self.scales[name][:, None]
        self.effective[name] = vals

    def refresh_stats(self, name: str) -> None:
        vals = self.effective[name]
        self.stats[name] = LayerStats(float(vals.min()), float(vals.max()))

    def target_tensors(
        self, mode: AttackMode, exclude: tuple[str, ...] = ()
    ) -> list[TensorMeta]:
        """Tensors attackable under a mode, minus excluded name patterns."""
        if mode is AttackMode.FLOAT:
            if self.is_quantized:
                raise ValueError("FLOAT mode targets an unquantized bundle")
            picked = list(self.metas)
        elif mode is AttackMode.INT8:
            if not self.is_quantized:
                raise ValueError("INT8 mode requires a quantized bundle")
            picked = [m for m in self.metas if m.quantized]
        elif mode is AttackMode.MIXED:
            if not self.is_quantized:
                raise ValueError("MIXED mode requires a quantized bundle")
            picked = list(self.metas)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return [m for m in picked if not any(fnmatch(m.name, pat) for pat in exclude)]


# ---------------------------------------------------------------------------
# Weight access and flips


def effective_value(bundle: ModelBundle, ref: WeightRef) -> float:
    return float(bundle.effective[ref.tensor].flat[ref.flat_index])


def raw_word(bundle: ModelBundle, ref: WeightRef) -> int:
    return int(bundle.raw[ref.tensor].flat[ref.flat_index])


def row_scale(bundle: ModelBundle, ref: WeightRef) -> float:
    """Dequantization scale covering a flat index of a quantized tensor."""
    m = bundle.meta(ref.tensor)
    row = ref.flat_index // int(np.prod(m.shape[1:]))
    return float(bundle.scales[ref.tensor][row])


def apply_flip(
    bundle: ModelBundle, ref: WeightRef, bit_position: int, refresh_stats: bool = True
) -> FlipToken:
    """Flip one stored bit; returns the token that undoes it exactly."""
    m = bundle.meta(ref.tensor)
    raw = bundle.raw[ref.tensor]
    old_raw = int(raw.flat[ref.flat_index])
    if not 0 <= bit_position < m.fmt.bit_width:
        raise ValueError(f"bit {bit_position} out of range for {m.fmt.name}")
    token = FlipToken(
        ref,
        bit_position,
        old_raw,
        float(bundle.effective[ref.tensor].flat[ref.flat_index]),
        bundle.stats[ref.tensor],
    )
    new_raw = old_raw ^ (1 << bit_position)
    raw.flat[ref.flat_index] = new_raw
    new_value = decode_fast(new_raw, m.fmt)
    if m.quantized:
        new_value *= row_scale(bundle, ref)
    bundle.effective[ref.tensor].flat[ref.flat_index] = new_value
    if refresh_stats:
        bundle.refresh_stats(ref.tensor)
    return token


def undo_flip(bundle: ModelBundle, token: FlipToken) -> None:
    ref = token.ref
    bundle.raw[ref.tensor].flat[ref.flat_index] = token.old_raw
    bundle.effective[ref.tensor].flat[ref.flat_index] = token.old_effective
    bundle.stats[ref.tensor] = token.old_stats


# ---------------------------------------------------------------------------
# Quantization


def quantize_int8(bundle: ModelBundle) -> ModelBundle:
    """Symmetric per-row absmax INT8 quantization of every 2D tensor.

    1D tensors keep their float storage format. An all-zero row stores
    scale 0.0 and dequantizes to exact zeros.
    """
    if bundle.is_quantized:
        raise ValueError("bundle is already quantized")
    metas, raw, scales = [], {}, {}
    for m in bundle.metas:
        if len(m.shape) >= 2:
            values = bundle.effective[m.name]
            flat_rows = values.reshape(m.shape[0], -1)
            absmax = np.abs(flat_rows).max(axis=1)
            scale = absmax / 127.0
            safe = np.where(scale == 0.0, 1.0, scale)
            ints = np.round(flat_rows / safe[:, None]).reshape(m.shape)
            metas.append(TensorMeta(m.name, m.layer_index, m.param_kind, m.shape, FORMATS["INT8"], True))
            raw[m.name] = encode_array(ints, FORMATS["INT8"])
            scales[m.name] = scale
        else:
            metas.append(m)
            raw[m.name] = bundle.raw[m.name].copy()
    out = ModelBundle(metas, raw, scales, bundle.arch)
    return out


# ---------------------------------------------------------------------------
# On-disk format: human-readable manifest + aligned little-endian blob


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def save_bundle(bundle: ModelBundle, manifest_path: str | Path) -> Path:
    """Write manifest JSON plus the binary blob next to it; returns manifest path."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    blob = bytearray()
    tensors = []
    for m in bundle.metas:
        words = np.ascontiguousarray(bundle.raw[m.name].astype(_DTYPES[m.fmt.name]))
        offset = _align(len(blob))
        blob.extend(b"\0" * (offset - len(blob)))
        payload = words.tobytes()
        blob.extend(payload)
        entry = {
            "name": m.name,
            "layer_index": m.layer_index,
            "param_kind": m.param_kind,
            "shape": list(m.shape),
            "format": m.fmt.name,
            "quantized": m.quantized,
            "offset": offset,
            "nbytes": len(payload),
            "scales_offset": None,
            "scales_count": 0,
        }
        if m.quantized:
            s = np.ascontiguousarray(bundle.scales[m.name].astype("<f8"))
            s_offset = _align(len(blob))
            blob.extend(b"\0" * (s_offset - len(blob)))
            blob.extend(s.tobytes())
            entry["scales_offset"] = s_offset
            entry["scales_count"] = int(s.size)
        tensors.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": blob_path.name,
        "checksum": "sha256:" + hashlib.sha256(bytes(blob)).hexdigest(),
        "architecture": bundle.arch,
        "tensors": tensors,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(bytes(blob))
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_bundle(manifest_path: str | Path) -> ModelBundle:
    """Bit-exact inverse of save_bundle; validates checksum and layout."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleFormatError(
            f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    blob_path = manifest_path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise BundleFormatError(f"cannot read blob {blob_path}: {exc}") from exc
    recorded = manifest.get("checksum", "")
    actual = "sha256:" + hashlib.sha256(blob).hexdigest()
    if recorded != actual:
        raise BundleFormatError(f"{blob_path}: checksum mismatch (manifest {recorded}, blob {actual})")
    metas, raw, scales = [], {}, {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        fmt_name = entry["format"]
        if fmt_name not in _DTYPES:
            raise BundleFormatError(f"tensor {name!r}: unknown format tag {fmt_name!r}")
        fmt = FORMATS[fmt_name]
        shape = tuple(entry["shape"])
        dtype = np.dtype(_DTYPES[fmt_name])
        expected = int(np.prod(shape)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise BundleFormatError(
                f"tensor {name!r}: {entry['nbytes']} bytes on disk, shape needs {expected}"
            )
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise BundleFormatError(f"tensor {name!r}: blob truncated at {len(blob)} bytes")
        words = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape)
        raw[name] = words.astype(dtype.newbyteorder("=")).copy()
        quantized = bool(entry["quantized"])
        if quantized:
            if entry["scales_offset"] is None:
                raise BundleFormatError(f"tensor {name!r}: quantized but no scales recorded")
            s_start = entry["scales_offset"]
            s_end = s_start + entry["scales_count"] * 8
            if s_end > len(blob):
                raise BundleFormatError(f"tensor {name!r}: scales truncated")
            scales[name] = np.frombuffer(blob[s_start:s_end], dtype="<f8").astype(np.float64)
        metas.append(TensorMeta(name, entry["layer_index"], entry["param_kind"], shape, fmt, quantized))
    return ModelBundle(metas, raw, scales, manifest.get("architecture"))
