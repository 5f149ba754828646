"""Attention classifier over supertokens, trained with soft-label cross-entropy.

Architecture: ``blocks`` pre-norm transformer blocks (multi-head
self-attention, then a GELU MLP, each wrapped in a residual connection), a
final layer norm and a linear head followed by a row softmax.  There are no
positional embeddings, so the model is equivariant to token order.

Everything runs in float64 numpy with analytic gradients; row vectors
multiply weights on the right (``Q = X @ wq``).
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .features import xavier_uniform
from .rng import Xoshiro256

LN_EPS = 1e-5
PROB_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ClassifierParams:
    dim: int
    heads: int
    blocks: int
    num_classes: int
    mlp_ratio: int = 4
    seed: int = 0
    tensors: dict = field(default_factory=dict)

    def names(self):
        return param_names(self.blocks)

    def copy(self):
        return ClassifierParams(
            self.dim, self.heads, self.blocks, self.num_classes, self.mlp_ratio, self.seed,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())


def param_names(blocks):
    names = []
    for b in range(blocks):
        p = f"blocks.{b}."
        names += [
            p + "ln1.gain", p + "ln1.bias",
            p + "attn.wq", p + "attn.wk", p + "attn.wv", p + "attn.wo", p + "attn.bo",
            p + "ln2.gain", p + "ln2.bias",
            p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2",
        ]
    return names + ["norm.gain", "norm.bias", "head.w", "head.b"]


def param_shapes(dim, blocks, num_classes, mlp_ratio=4):
    hidden = mlp_ratio * dim
    shapes = {}
    for b in range(blocks):
        p = f"blocks.{b}."
        shapes.update({
            p + "ln1.gain": (dim,), p + "ln1.bias": (dim,),
            p + "attn.wq": (dim, dim), p + "attn.wk": (dim, dim),
            p + "attn.wv": (dim, dim), p + "attn.wo": (dim, dim), p + "attn.bo": (dim,),
            p + "ln2.gain": (dim,), p + "ln2.bias": (dim,),
            p + "mlp.w1": (dim, hidden), p + "mlp.b1": (hidden,),
            p + "mlp.w2": (hidden, dim), p + "mlp.b2": (dim,),
        })
    shapes.update({
        "norm.gain": (dim,), "norm.bias": (dim,),
        "head.w": (dim, num_classes), "head.b": (num_classes,),
    })
    return shapes


def init_params(dim, num_classes, heads=4, blocks=2, mlp_ratio=4, seed=0):
    """Xavier-uniform matrices drawn in declared order from one xoshiro256**
    stream; layer-norm gains 1, all biases 0."""
    if dim % heads:
        raise ValueError(f"heads ({heads}) must divide dim ({dim})")
    rng = Xoshiro256(seed)
    tensors = {}
    for name, shape in param_shapes(dim, blocks, num_classes, mlp_ratio).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 2:
            tensors[name] = xavier_uniform(rng, shape[0], shape[1], shape)
        else:
            tensors[name] = np.zeros(shape)
    return ClassifierParams(dim, heads, blocks, num_classes, mlp_ratio, seed, tensors)


# -- primitives --------------------------------------------------------------


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(z):
    t = np.tanh(_GELU_C * (z + 0.044715 * z**3))
    return 0.5 * z * (1.0 + t), t


def _gelu_back(dy, z, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return dy * (0.5 * (1.0 + t) + 0.5 * z * dt)


def attention(h, wq, wk, wv, heads):
    """Multi-head ``softmax(Q K^T / sqrt(d_head)) V``.

    Returns the concatenated head outputs ``(M, C)`` and the attention
    weights ``(heads, M, M)``.
    """
    m, c = h.shape
    dh = c // heads
    q = (h @ wq).reshape(m, heads, dh).transpose(1, 0, 2)
    k = (h @ wk).reshape(m, heads, dh).transpose(1, 0, 2)
    v = (h @ wv).reshape(m, heads, dh).transpose(1, 0, 2)
    weights = softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
    out = (weights @ v).transpose(1, 0, 2).reshape(m, c)
    return out, weights, (q, k, v)


# -- model -------------------------------------------------------------------


def _forward(x, params):
    t = params.tensors
    caches = []
    for b in range(params.blocks):
        p = f"blocks.{b}."
        h1, ln1 = _layer_norm(x, t[p + "ln1.gain"], t[p + "ln1.bias"])
        o, att, qkv = attention(h1, t[p + "attn.wq"], t[p + "attn.wk"], t[p + "attn.wv"], params.heads)
        x = x + o @ t[p + "attn.wo"] + t[p + "attn.bo"]
        h2, ln2 = _layer_norm(x, t[p + "ln2.gain"], t[p + "ln2.bias"])
        z = h2 @ t[p + "mlp.w1"] + t[p + "mlp.b1"]
        u, th = _gelu(z)
        x = x + u @ t[p + "mlp.w2"] + t[p + "mlp.b2"]
        caches.append((h1, ln1, o, att, qkv, h2, ln2, z, u, th))
    hf, lnf = _layer_norm(x, t["norm.gain"], t["norm.bias"])
    logits = hf @ t["head.w"] + t["head.b"]
    return softmax(logits), (caches, hf, lnf)


def _token_array(tokens):
    return np.asarray(getattr(tokens, "features", tokens), dtype=np.float64)


def forward(tokens, params):
    """Class probabilities ``(M, C')`` for a set of supertokens."""
    x = _token_array(tokens)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"tokens must be (M, {params.dim}), got {x.shape}")
    return _forward(x, params)[0]


def attention_maps(tokens, params):
    """Attention weights of every block, ``[(heads, M, M), ...]``."""
    x = _token_array(tokens)
    _, (caches, _, _) = _forward(x, params)
    return [c[3] for c in caches]


def soft_ce_loss(probs, labels):
    """Mean over valid tokens of ``-sum_c L(m, c) log max(p(m, c), 1e-12)``."""
    rows, valid = _label_parts(labels)
    if not valid.any():
        raise ValueError("no valid tokens to compute the loss over")
    logp = np.log(np.maximum(probs[valid], PROB_FLOOR))
    return float(-(rows[valid] * logp).sum() / valid.sum())


def _label_parts(labels):
    if hasattr(labels, "rows"):
        return labels.rows, np.asarray(labels.valid, dtype=bool)
    rows = np.asarray(labels, dtype=np.float64)
    return rows, np.ones(rows.shape[0], dtype=bool)


def _backward(x, params, probs, cache, rows, valid, scale):
    t = params.tensors
    caches, hf, lnf = cache
    grads = {}
    lab = np.where(valid[:, None], rows, 0.0)
    # clamped entries have zero derivative
    lab = np.where(probs >= PROB_FLOOR, lab, 0.0)
    dlogits = scale / valid.sum() * (probs * lab.sum(axis=1, keepdims=True) - lab)
    grads["head.w"] = hf.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dx, grads["norm.gain"], grads["norm.bias"] = _layer_norm_back(dlogits @ t["head.w"].T, t["norm.gain"], lnf)
    m, c = x.shape
    heads = params.heads
    dh = c // heads
    for b in reversed(range(params.blocks)):
        p = f"blocks.{b}."
        h1, ln1, o, att, (q, k, v), h2, ln2, z, u, th = caches[b]
        # MLP branch
        grads[p + "mlp.w2"] = u.T @ dx
        grads[p + "mlp.b2"] = dx.sum(axis=0)
        dz = _gelu_back(dx @ t[p + "mlp.w2"].T, z, th)
        grads[p + "mlp.w1"] = h2.T @ dz
        grads[p + "mlp.b1"] = dz.sum(axis=0)
        dh2, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _layer_norm_back(dz @ t[p + "mlp.w1"].T, t[p + "ln2.gain"], ln2)
        dx = dx + dh2
        # attention branch
        grads[p + "attn.wo"] = o.T @ dx
        grads[p + "attn.bo"] = dx.sum(axis=0)
        do = (dx @ t[p + "attn.wo"].T).reshape(m, heads, dh).transpose(1, 0, 2)
        datt = do @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        dq, dk, dv = (g.transpose(1, 0, 2).reshape(m, c) for g in (dq, dk, dv))
        grads[p + "attn.wq"] = h1.T @ dq
        grads[p + "attn.wk"] = h1.T @ dk
        grads[p + "attn.wv"] = h1.T @ dv
        dh1 = dq @ t[p + "attn.wq"].T + dk @ t[p + "attn.wk"].T + dv @ t[p + "attn.wv"].T
        dh1x, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _layer_norm_back(dh1, t[p + "ln1.gain"], ln1)
        dx = dx + dh1x
    return grads


def loss_and_grad(params, batch, scale=1.0):
    """Mean loss over the scenes in ``batch`` and its gradient.

    ``batch`` is a list of ``(tokens, labels)`` pairs; each scene's tokens
    attend only among themselves.  ``scale`` multiplies loss and gradients.
    """
    total = 0.0
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    n = len(batch)
    for tokens, labels in batch:
        x = _token_array(tokens)
        rows, valid = _label_parts(labels)
        if not valid.any():
            raise ValueError("scene has no valid tokens")
        probs, cache = _forward(x, params)
        total += soft_ce_loss(probs, labels)
        for name, g in _backward(x, params, probs, cache, rows, valid, scale / n).items():
            grads[name] += g
    return scale * total / n, grads


def backward(tokens, params, labels):
    """Gradients of the soft-label loss for one scene, keyed by tensor name."""
    return loss_and_grad(params, [(tokens, labels)])[1]


def loss_fn(params, batch):
    total = 0.0
    for tokens, labels in batch:
        total += soft_ce_loss(forward(tokens, params), labels)
    return total / len(batch)


# -- gradient verification ---------------------------------------------------


class GradCheckReport(NamedTuple):
    max_rel_error: float
    rel_errors: np.ndarray
    coords: list  # (tensor name, flat index)
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(params, sample, coords=200, h=1e-5, seed=0, floor=1e-5):
    """Compare analytic gradients with central differences at random coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  The difference
    quotient carries roundoff of roughly ``eps * |f| / h`` (~3e-11 for an O(1)
    loss at h = 1e-5), so relative errors of gradients much smaller than that
    over the tolerance are noise; ``floor`` turns them into absolute checks.
    """
    if coords < 1:
        raise ValueError("coords must be >= 1")
    batch = sample if isinstance(sample, list) else [sample]
    _, grads = loss_and_grad(params, batch)
    names = params.names()
    sizes = np.array([params.tensors[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(coords, offsets[-1]), replace=False)
    probe = params.copy()
    chosen, analytic, numeric = [], [], []
    for flat in np.sort(picks):
        t_idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[t_idx], int(flat - offsets[t_idx])
        arr = probe.tensors[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + h
        fp = loss_fn(probe, batch)
        arr[local] = orig - h
        fm = loss_fn(probe, batch)
        arr[local] = orig
        chosen.append((name, local))
        analytic.append(grads[name].reshape(-1)[local])
        numeric.append((fp - fm) / (2 * h))
    analytic, numeric = np.array(analytic), np.array(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()), rel, chosen, analytic, numeric)


# -- training ----------------------------------------------------------------


@dataclass
class ModelConfig:
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(step, total, base, floor=0.0):
    """``floor + (base - floor) * (1 + cos(pi * step / total)) / 2``."""
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * step / total))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in params.names():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            params.tensors[name] -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class TrainResult(NamedTuple):
    params: ClassifierParams
    history: list  # (epoch, lr at the epoch's first step, mean loss)


def train(scenes, cfg, model=None, params=None):
    """Adam with per-step cosine annealing over ``epochs * ceil(n / batch)`` steps.

    Scenes are reshuffled every epoch from ``cfg.seed``.  Pass ``params`` to
    continue from existing weights, otherwise they are initialised from
    ``cfg.seed``.
    """
    if not scenes:
        raise ValueError("train needs at least one scene")
    model = model or ModelConfig()
    if params is None:
        dim = _token_array(scenes[0][0]).shape[1]
        num_classes = _label_parts(scenes[0][1])[0].shape[1]
        params = init_params(dim, num_classes, model.heads, model.blocks, model.mlp_ratio, cfg.seed)
    else:
        params = params.copy()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        losses = []
        first_lr = None
        for s in range(steps_per_epoch):
            batch = [scenes[i] for i in order[s * cfg.batch_size : (s + 1) * cfg.batch_size]]
            loss, grads = loss_and_grad(params, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_floor)
            first_lr = lr if first_lr is None else first_lr
            opt.step(params, grads, lr)
            losses.append(loss)
            step += 1
        history.append((epoch, first_lr, float(np.mean(losses))))
    return TrainResult(params, history)


def predict_tokens(tokens, params):
    """Argmax class per token (ties to the lowest class id)."""
    return np.argmax(forward(tokens, params), axis=1)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params, path):
    """``path`` gets a ``key = value`` header; ``.raw`` holds float32 LE tensors
    concatenated in declared order."""
    path = Path(path)
    lines = [
        "format = supertoken-classifier",
        f"dim = {params.dim}",
        f"heads = {params.heads}",
        f"blocks = {params.blocks}",
        f"num_classes = {params.num_classes}",
        f"mlp_ratio = {params.mlp_ratio}",
        f"seed = {params.seed}",
        "dtype = float32",
        "byteorder = le",
    ]
    blobs = []
    for name in params.names():
        arr = params.tensors[name]
        lines.append(f"tensor = {name} {'x'.join(str(s) for s in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".raw").write_bytes(b"".join(blobs))


def load_checkpoint(path):
    path = Path(path)
    meta, tensors = {}, []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "tensor":
            name, shape = value.split()
            tensors.append((name, tuple(int(s) for s in shape.split("x"))))
        else:
            meta[key] = value
    if meta.get("format") != "supertoken-classifier":
        raise ValueError(f"{path}: not a classifier checkpoint")
    raw = path.with_suffix(".raw").read_bytes()
    need = 4 * sum(int(np.prod(s)) for _, s in tensors)
    if len(raw) != need:
        raise ValueError(f"{path}: tensor data has {len(raw)} bytes, expected {need}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    out, pos = {}, 0
    for name, shape in tensors:
        size = int(np.prod(shape))
        out[name] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    params = ClassifierParams(
        int(meta["dim"]), int(meta["heads"]), int(meta["blocks"]), int(meta["num_classes"]),
        int(meta["mlp_ratio"]), int(meta["seed"]), out,
    )
    if set(out) != set(params.names()):
        raise ValueError(f"{path}: tensor list does not match architecture")
    return params


def write_train_log(history, path):
    rows = ["epoch,lr,loss"] + [f"{e},{lr!r},{loss!r}" for e, lr, loss in history]
    Path(path).write_text("\n".join(rows) + "\n")
