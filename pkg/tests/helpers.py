"""Shared test oracles, independent of the library's scoring and gradient code."""

from __future__ import annotations

import math
import struct

import numpy as np

from sneakyflip.bundle import ModelBundle, quantize_int8
from sneakyflip.nnet import forward


def ref_decode(raw: int, fmt) -> float:
    """Independent reference decode via struct / numpy float16."""
    if fmt.name == "FP16":
        return float(np.frombuffer(np.uint16(raw).tobytes(), dtype=np.float16)[0])
    if fmt.name == "BF16":
        return struct.unpack("<f", struct.pack("<I", raw << 16))[0]
    if fmt.name == "FP32":
        return struct.unpack("<f", struct.pack("<I", raw))[0]
    return float(raw - 256 if raw >= 128 else raw)


def same_value(a: float, b: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return a == b and math.copysign(1.0, a) == math.copysign(1.0, b)


def oracle_best_flip(bundle: ModelBundle, tensor: str, flat: int):
    """Brute-force best in-range flip: (abs_delta, bit, new_value) or None."""
    meta = bundle.meta(tensor)
    raw = int(bundle.raw[tensor].flat[flat])
    old = float(bundle.effective[tensor].flat[flat])
    stats = bundle.stats[tensor]
    scale = 1.0
    if meta.quantized:
        row = flat // int(np.prod(meta.shape[1:]))
        scale = float(bundle.scales[tensor][row])
    best = None
    for bit in range(meta.fmt.bit_width):
        nv = ref_decode(raw ^ (1 << bit), meta.fmt)
        if meta.quantized:
            nv *= scale
        if not math.isfinite(nv):
            continue
        if not stats.w_min <= nv <= stats.w_max:
            continue
        d = abs(nv - old)
        if best is None or d > best[0]:
            best = (d, bit, nv)
    return best


def random_bundle(seed=0, fmt=None, quantize=False, grads=True) -> ModelBundle:
    """Small multi-tensor bundle with optional quantization and gradients."""
    from sneakyflip.bitcodec import FP16

    rng = np.random.default_rng(seed)
    tensors = [
        ("layer.0.mlp.up_proj", 0, "mlp.up_proj", rng.normal(0, 0.5, (12, 10))),
        ("layer.0.mlp.up_proj.bias", 0, "mlp.up_proj.bias", rng.normal(0, 0.1, 12)),
        ("layer.1.mlp.down_proj", 1, "mlp.down_proj", rng.normal(0, 0.5, (10, 12))),
        ("head.weight", 2, "head", rng.normal(0, 0.8, (4, 10))),
    ]
    bundle = ModelBundle.from_float(tensors, fmt or FP16, arch={"kind": "raw"})
    if quantize:
        bundle = quantize_int8(bundle)
    if grads:
        bundle.gradients = {m.name: rng.normal(0, 1.0, m.shape) for m in bundle.metas}
    return bundle


def _loss_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy computed here, not via the library's loss path."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float((lse - logits[np.arange(len(y)), y]).mean())


def loss_of(arch: dict, params: dict[str, np.ndarray], batch) -> float:
    logits, _ = forward(arch, params, batch.x)
    return _loss_from_logits(logits, batch.y)


def _rectifier_pattern(arch: dict, cache: dict) -> np.ndarray:
    """On/off state of every rectifier unit, concatenated.

    Tuple indices follow the forward cache layout: mlp blocks store
    (normed, ln, pre, post, resid), the attention block stores pre at slot 10.
    """
    if arch["kind"] == "mlp":
        pres = [cache[f"layer.{i}."][2] for i in range(arch["blocks"])]
    else:
        pres = [cache["layer.0."][10]]
    return np.concatenate([(p > 0).ravel() for p in pres])


def central_difference(arch, params, batch, name: str, flat: int, h: float = 1e-4):
    """Two-sided finite difference of the loss for one weight.

    Returns (fd, kink_free). The probe only estimates a derivative when no
    rectifier unit changes state between the two evaluations; a straddled
    kink blends two one-sided slopes instead.
    """
    orig = params[name].flat[flat]
    params[name].flat[flat] = orig + h
    up_logits, up_cache = forward(arch, params, batch.x)
    params[name].flat[flat] = orig - h
    down_logits, down_cache = forward(arch, params, batch.x)
    params[name].flat[flat] = orig
    fd = (_loss_from_logits(up_logits, batch.y) - _loss_from_logits(down_logits, batch.y)) / (2.0 * h)
    kink_free = bool(
        np.array_equal(
            _rectifier_pattern(arch, up_cache), _rectifier_pattern(arch, down_cache)
        )
    )
    return fd, kink_free


def gradcheck_worst_error(arch, params, batch, grads, n_samples: int, seed: int, h: float = 1e-4):
    """Worst relative error over n_samples kink-free probes.

    A floor of 1e-3 guards near-zero gradients. Probes whose step flips a
    rectifier state are resampled (they measure a blend, not the gradient);
    the count of such resamples is returned alongside the worst error.
    """
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    probs = sizes / sizes.sum()
    worst = 0.0
    worst_at = None
    straddled = 0
    valid = 0
    attempts = 0
    while valid < n_samples:
        attempts += 1
        if attempts > 20 * n_samples:
            raise RuntimeError("too many kink-straddling probes; check the batch")
        name = names[rng.choice(len(names), p=probs)]
        flat = int(rng.integers(params[name].size))
        fd, kink_free = central_difference(arch, params, batch, name, flat, h)
        if not kink_free:
            straddled += 1
            continue
        valid += 1
        g = float(grads[name].flat[flat])
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-3)
        if rel > worst:
            worst, worst_at = rel, (name, flat, g, fd)
    return worst, worst_at, straddled
