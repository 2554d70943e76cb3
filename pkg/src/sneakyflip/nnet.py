"""Toy victim networks and synthetic tasks, free of ML frameworks.

Forward and backward math run in float64 over the bundle's effective values;
storage formats only matter at the attacked words. Two architectures: a
residual MLP with layernorms and biases, and a single self-attention block
followed by the same MLP block. Tasks are seeded Gaussian-mixture
classification problems with disjoint train/gradient/eval sample streams.

Non-finite activations are a signal, not a crash: the forward pass raises
NumericalRuntimeError naming the parameter tensor whose output first went
non-finite, and callers decide what that means for the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .bitcodec import FormatSpec
from .bundle import ModelBundle

_LN_EPS = 1e-5


class NumericalRuntimeError(RuntimeError):
    """Non-finite value met in the compute graph; names the tensor at fault."""

    def __init__(self, tensor: str, stage: str = "forward"):
        self.tensor = tensor
        self.stage = stage
        super().__init__(f"non-finite values after tensor {tensor!r} during {stage}")


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class TaskSpec:
    """Gaussian-mixture classification task with seeded sample streams."""

    name: str
    num_classes: int
    components: int
    input_dim: int
    mean_seed: int
    seed: int
    separation: float = 3.5
    grad_split: int = 200
    eval_split: int = 100
    group_map: tuple[int, ...] | None = None  # component -> task label

    @property
    def chance_level(self) -> float:
        return 1.0 / self.num_classes

    def labels_for(self, component: np.ndarray) -> np.ndarray:
        if self.group_map is None:
            return component
        return np.asarray(self.group_map)[component]

    def component_means(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence((self.mean_seed, 7)))
        means = rng.normal(0.0, 1.0, (self.components, self.input_dim))
        return means * (self.separation / np.sqrt(self.input_dim))

    def sample(self, n: int, stream: int, run_seed: int = 0) -> "Batch":
        """Draw n labelled examples from one of the named sample streams."""
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, run_seed, stream)))
        comp = rng.integers(0, self.components, size=n)
        x = self.component_means()[comp] + rng.normal(0.0, 1.0, (n, self.input_dim))
        return Batch(x, self.labels_for(comp))

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "TaskSpec":
        data = json.loads(Path(path).read_text())
        if data.get("group_map") is not None:
            data["group_map"] = tuple(data["group_map"])
        return cls(**data)


STREAM_TRAIN, STREAM_GRAD, STREAM_EVAL = 0, 1, 2

# Task family: a 4-way mixture, a 2-way regrouping of the same components
# (so a 4-way victim has real skill on it), and a held-out sample stream.
_TASK_DEFS = {
    "toy4": dict(num_classes=4, components=4, mean_seed=777, seed=101, group_map=None),
    "toy2": dict(num_classes=2, components=4, mean_seed=777, seed=202, group_map=(0, 0, 1, 1)),
    "toy4-held": dict(num_classes=4, components=4, mean_seed=777, seed=303, group_map=None),
}


def make_task(name: str, input_dim: int) -> TaskSpec:
    try:
        kw = _TASK_DEFS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r} (have {sorted(_TASK_DEFS)})") from None
    return TaskSpec(name=name, input_dim=input_dim, **kw)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)


# ---------------------------------------------------------------------------
# Architectures

ARCH_PRESETS = {
    "mlp": dict(kind="mlp", input_dim=32, d_model=16, d_ff=32, blocks=2, classes=4),
    "attn": dict(kind="attn", tokens=8, token_dim=8, d_model=64, d_ff=128, heads=2, classes=4),
}


def build_arch(kind: str) -> dict:
    try:
        return dict(ARCH_PRESETS[kind])
    except KeyError:
        raise ValueError(f"unknown architecture {kind!r} (have {sorted(ARCH_PRESETS)})") from None


def arch_input_dim(arch: dict) -> int:
    if arch["kind"] == "mlp":
        return arch["input_dim"]
    return arch["tokens"] * arch["token_dim"]


def init_tensors(arch: dict, seed: int) -> list[tuple[str, int, str, np.ndarray]]:
    """Seeded initial parameters in manifest order."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))

    def lin(rows, cols):
        return rng.normal(0.0, 1.0, (rows, cols)) / np.sqrt(cols)

    out = []
    m, f, c = arch["d_model"], arch["d_ff"], arch["classes"]
    if arch["kind"] == "mlp":
        out.append(("embed.weight", 0, "embed", lin(m, arch["input_dim"])))
        blocks = arch["blocks"]
        for i in range(blocks):
            p = f"layer.{i}."
            out.append((p + "norm.weight", i, "norm.weight", np.ones(m)))
            out.append((p + "norm.bias", i, "norm.bias", np.zeros(m)))
            out.append((p + "mlp.up_proj", i, "mlp.up_proj", lin(f, m)))
            out.append((p + "mlp.up_proj.bias", i, "mlp.up_proj.bias", np.zeros(f)))
            out.append((p + "mlp.down_proj", i, "mlp.down_proj", lin(m, f)))
            out.append((p + "mlp.down_proj.bias", i, "mlp.down_proj.bias", np.zeros(m)))
        tail = blocks
    elif arch["kind"] == "attn":
        out.append(("embed.weight", 0, "embed", lin(m, arch["token_dim"])))
        out.append(("pos.weight", 0, "pos", lin(arch["tokens"], m)))
        p = "layer.0."
        out.append((p + "attn_norm.weight", 0, "attn_norm.weight", np.ones(m)))
        out.append((p + "attn_norm.bias", 0, "attn_norm.bias", np.zeros(m)))
        for kind in ("q_proj", "k_proj", "v_proj", "o_proj"):
            out.append((p + f"attn.{kind}", 0, f"attn.{kind}", lin(m, m)))
        out.append((p + "mlp_norm.weight", 0, "mlp_norm.weight", np.ones(m)))
        out.append((p + "mlp_norm.bias", 0, "mlp_norm.bias", np.zeros(m)))
        out.append((p + "mlp.up_proj", 0, "mlp.up_proj", lin(f, m)))
        out.append((p + "mlp.up_proj.bias", 0, "mlp.up_proj.bias", np.zeros(f)))
        out.append((p + "mlp.down_proj", 0, "mlp.down_proj", lin(m, f)))
        out.append((p + "mlp.down_proj.bias", 0, "mlp.down_proj.bias", np.zeros(m)))
        tail = 1
    else:
        raise ValueError(f"unknown architecture kind {arch['kind']!r}")
    out.append(("final_norm.weight", tail, "final_norm.weight", np.ones(m)))
    out.append(("final_norm.bias", tail, "final_norm.bias", np.zeros(m)))
    out.append(("head.weight", tail, "head", lin(c, m)))
    return out


def _check_finite(name: str, arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalRuntimeError(name, stage)


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_bwd(dout, cache, g):
    xhat, inv = cache
    dg = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    db = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - mean1 - xhat * mean2) * inv
    return dx, dg, db


def _split_heads(x, heads):
    b, t, m = x.shape
    return x.reshape(b, t, heads, m // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def forward(arch: dict, params: dict[str, np.ndarray], x: np.ndarray, stage: str = "forward"):
    """Logits plus the cache needed for backward; raises on non-finite."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch_input_dim(arch):
        raise ValueError(
            f"input width {x.shape} does not match architecture input dim {arch_input_dim(arch)}"
        )
    cache = {"x": x}
    if arch["kind"] == "mlp":
        h = x @ params["embed.weight"].T
        _check_finite("embed.weight", h, stage)
        cache["h0"] = h
        for i in range(arch["blocks"]):
            p = f"layer.{i}."
            n, ln = _layernorm_fwd(h, params[p + "norm.weight"], params[p + "norm.bias"])
            _check_finite(p + "norm.weight", n, stage)
            pre = n @ params[p + "mlp.up_proj"].T + params[p + "mlp.up_proj.bias"]
            u = np.maximum(pre, 0.0)
            _check_finite(p + "mlp.up_proj", u, stage)
            down = u @ params[p + "mlp.down_proj"].T + params[p + "mlp.down_proj.bias"]
            _check_finite(p + "mlp.down_proj", down, stage)
            h = h + down
            cache[p] = (n, ln, pre, u, h)
        pooled = h
    elif arch["kind"] == "attn":
        b = x.shape[0]
        tokens = x.reshape(b, arch["tokens"], arch["token_dim"])
        h = tokens @ params["embed.weight"].T + params["pos.weight"]
        _check_finite("pos.weight", h, stage)
        cache["tokens"] = tokens
        cache["h0"] = h
        p = "layer.0."
        n1, ln1 = _layernorm_fwd(h, params[p + "attn_norm.weight"], params[p + "attn_norm.bias"])
        _check_finite(p + "attn_norm.weight", n1, stage)
        heads = arch["heads"]
        dk = arch["d_model"] // heads
        q = _split_heads(n1 @ params[p + "attn.q_proj"].T, heads)
        k = _split_heads(n1 @ params[p + "attn.k_proj"].T, heads)
        v = _split_heads(n1 @ params[p + "attn.v_proj"].T, heads)
        _check_finite(p + "attn.q_proj", q, stage)
        _check_finite(p + "attn.k_proj", k, stage)
        _check_finite(p + "attn.v_proj", v, stage)
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dk)
        shifted = scores - scores.max(axis=-1, keepdims=True)
        expd = np.exp(shifted)
        attn = expd / expd.sum(axis=-1, keepdims=True)
        _check_finite(p + "attn.k_proj", attn, stage)
        ctx = _merge_heads(attn @ v)
        proj = ctx @ params[p + "attn.o_proj"].T
        _check_finite(p + "attn.o_proj", proj, stage)
        h = h + proj
        n2, ln2 = _layernorm_fwd(h, params[p + "mlp_norm.weight"], params[p + "mlp_norm.bias"])
        _check_finite(p + "mlp_norm.weight", n2, stage)
        pre = n2 @ params[p + "mlp.up_proj"].T + params[p + "mlp.up_proj.bias"]
        u = np.maximum(pre, 0.0)
        _check_finite(p + "mlp.up_proj", u, stage)
        down = u @ params[p + "mlp.down_proj"].T + params[p + "mlp.down_proj.bias"]
        _check_finite(p + "mlp.down_proj", down, stage)
        h = h + down
        cache[p] = (n1, ln1, q, k, v, attn, ctx, h, n2, ln2, pre, u)
        pooled = h.mean(axis=1)
        cache["h_final"] = h
    else:
        raise ValueError(f"unknown architecture kind {arch['kind']!r}")
    nf, lnf = _layernorm_fwd(pooled, params["final_norm.weight"], params["final_norm.bias"])
    _check_finite("final_norm.weight", nf, stage)
    logits = nf @ params["head.weight"].T
    _check_finite("head.weight", logits, stage)
    cache["pooled"] = pooled
    cache["nf"] = nf
    cache["lnf"] = lnf
    cache["logits"] = logits
    return logits, cache


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - logits[np.arange(len(y)), y]).mean())
    probs = np.exp(logits - lse)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    return loss, dlogits / len(y)


def loss_and_grads(arch: dict, params: dict[str, np.ndarray], batch: Batch):
    """Mean cross-entropy and its gradient for every parameter tensor."""
    logits, cache = forward(arch, params, batch.x, stage="gradient")
    loss, dlogits = _softmax_ce(logits, batch.y)
    if not np.isfinite(loss):
        raise NumericalRuntimeError("head.weight", "gradient")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["head.weight"] = dlogits.T @ cache["nf"]
    dnf = dlogits @ params["head.weight"]
    dpooled, dgf, dbf = _layernorm_bwd(dnf, cache["lnf"], params["final_norm.weight"])
    grads["final_norm.weight"] = dgf
    grads["final_norm.bias"] = dbf
    if arch["kind"] == "mlp":
        dh = dpooled
        for i in reversed(range(arch["blocks"])):
            p = f"layer.{i}."
            n, ln, pre, u, _ = cache[p]
            ddown = dh
            grads[p + "mlp.down_proj"] = _flat2(ddown).T @ _flat2(u)
            grads[p + "mlp.down_proj.bias"] = _flat2(ddown).sum(axis=0)
            du = ddown @ params[p + "mlp.down_proj"]
            dpre = du * (pre > 0.0)
            grads[p + "mlp.up_proj"] = _flat2(dpre).T @ _flat2(n)
            grads[p + "mlp.up_proj.bias"] = _flat2(dpre).sum(axis=0)
            dn = dpre @ params[p + "mlp.up_proj"]
            dx, dg, db = _layernorm_bwd(dn, ln, params[p + "norm.weight"])
            grads[p + "norm.weight"] = dg
            grads[p + "norm.bias"] = db
            dh = dh + dx
        grads["embed.weight"] = dh.T @ cache["x"]
    else:
        p = "layer.0."
        n1, ln1, q, k, v, attn, ctx, h_final, n2, ln2, pre, u = cache[p]
        t = arch["tokens"]
        dh = np.repeat(dpooled[:, None, :], t, axis=1) / t
        ddown = dh
        grads[p + "mlp.down_proj"] = _flat2(ddown).T @ _flat2(u)
        grads[p + "mlp.down_proj.bias"] = _flat2(ddown).sum(axis=0)
        du = ddown @ params[p + "mlp.down_proj"]
        dpre = du * (pre > 0.0)
        grads[p + "mlp.up_proj"] = _flat2(dpre).T @ _flat2(n2)
        grads[p + "mlp.up_proj.bias"] = _flat2(dpre).sum(axis=0)
        dn2 = dpre @ params[p + "mlp.up_proj"]
        dh2, dg2, db2 = _layernorm_bwd(dn2, ln2, params[p + "mlp_norm.weight"])
        grads[p + "mlp_norm.weight"] = dg2
        grads[p + "mlp_norm.bias"] = db2
        dh = dh + dh2
        dproj = dh
        grads[p + "attn.o_proj"] = _flat2(dproj).T @ _flat2(ctx)
        dctx = _split_heads(dproj @ params[p + "attn.o_proj"], arch["heads"])
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(arch["d_model"] // arch["heads"])
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dn1 = np.zeros_like(n1)
        for mat, grad in (("q_proj", dq), ("k_proj", dk), ("v_proj", dv)):
            dmerged = _merge_heads(grad)
            grads[p + f"attn.{mat}"] = _flat2(dmerged).T @ _flat2(n1)
            dn1 += dmerged @ params[p + f"attn.{mat}"]
        dx1, dg1, db1 = _layernorm_bwd(dn1, ln1, params[p + "attn_norm.weight"])
        grads[p + "attn_norm.weight"] = dg1
        grads[p + "attn_norm.bias"] = db1
        dh = dh + dx1
        grads["pos.weight"] = dh.sum(axis=0)
        grads["embed.weight"] = _flat2(dh).T @ _flat2(cache["tokens"])
    return loss, grads


def _flat2(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# Bundle-facing entry points


def bundle_logits(bundle: ModelBundle, x: np.ndarray, stage: str = "forward") -> np.ndarray:
    return forward(bundle.arch, bundle.effective, x, stage=stage)[0]


def compute_gradients(bundle: ModelBundle, batch: Batch) -> float:
    """Attach mean-loss gradients (per effective weight) to the bundle."""
    loss, grads = loss_and_grads(bundle.arch, bundle.effective, batch)
    bundle.gradients = grads
    return loss


def evaluate(bundle: ModelBundle, task: TaskSpec, batch: Batch) -> float:
    """Accuracy of component predictions mapped through the task labels."""
    logits = bundle_logits(bundle, batch.x, stage="evaluation")
    pred = task.labels_for(np.argmax(logits, axis=1))
    return float((pred == batch.y).mean())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    n_train: int = 4096
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.15
    lr_decay: float = 0.5
    decay_every: int = 12


TRAIN_PRESETS = {
    "mlp": TrainConfig(epochs=80, lr=0.3),
    "attn": TrainConfig(n_train=2048, epochs=40, batch_size=128, lr=0.5, decay_every=15),
}


def train_toy(
    arch_kind: str,
    task: TaskSpec,
    seed: int,
    fmt: FormatSpec,
    config: TrainConfig | None = None,
) -> tuple[ModelBundle, dict]:
    """Plain SGD on float64 weights, then encode into the storage format."""
    cfg = config or TRAIN_PRESETS.get(arch_kind, TrainConfig())
    arch = build_arch(arch_kind)
    if arch["classes"] != task.components:
        raise ValueError("architecture head width must match task components")
    if arch_input_dim(arch) != task.input_dim:
        raise ValueError("architecture input dim must match task input dim")
    if task.group_map is not None:
        raise ValueError(f"task {task.name!r} regroups labels; it is evaluation-only")
    tensors = init_tensors(arch, seed)
    params = {name: arr.copy() for name, _, _, arr in tensors}
    data = task.sample(cfg.n_train, STREAM_TRAIN, run_seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 29)))
    lr = cfg.lr
    history = []
    for epoch in range(cfg.epochs):
        if epoch > 0 and epoch % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        order = rng.permutation(cfg.n_train)
        total = 0.0
        for start in range(0, cfg.n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(arch, params, Batch(data.x[idx], data.y[idx]))
            total += loss * len(idx)
            for name in params:
                params[name] -= lr * grads[name]
        history.append(total / cfg.n_train)
    stored = [(name, li, kind, params[name]) for name, li, kind, _ in tensors]
    bundle = ModelBundle.from_float(stored, fmt, arch=arch)
    eval_batch = task.sample(task.eval_split, STREAM_EVAL, run_seed=seed)
    acc = evaluate(bundle, task, eval_batch)
    return bundle, {"train_loss": history, "eval_accuracy": acc, "seed": seed}
