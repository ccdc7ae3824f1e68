"""A small permutation-prediction network trained with SGD.

Every element of the shuffled sequence goes through the same affine+ReLU
encoder; the encodings are concatenated in sequence order, passed through an
affine+ReLU head, and a score layer emits ``l*l`` values reshaped row-major to
an ``l x l`` matrix.  The ``"sinkhorn"`` head turns scores into a
doubly-stochastic matrix; the ``"naive"`` head applies an elementwise sigmoid
and treats the matrix as ``l*l`` independent binary labels.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import permcore
from .assign import round_to_permutation
from .errors import DivergenceError, FormatError, ShapeError
from .permcore import Permutation, SequenceSample
from .sinkhorn import (
    SinkhornConfig,
    sinkhorn_backward,
    sinkhorn_forward,
    to_positive,
    to_positive_backward,
)

TENSOR_NAMES = (
    "encoder.weight",
    "encoder.bias",
    "head.weight",
    "head.bias",
    "score.weight",
    "score.bias",
)
LOSS_KINDS = ("sinkhorn_ce", "naive_sigmoid_ce")


@dataclass
class ModelParams:
    encoder_w: np.ndarray  # (d, h)
    encoder_b: np.ndarray  # (h,)
    head_w: np.ndarray  # (l*h, h2)
    head_b: np.ndarray  # (h2,)
    score_w: np.ndarray  # (h2, l*l)
    score_b: np.ndarray  # (l*l,)

    def __post_init__(self):
        d, h = self.encoder_w.shape
        lh, h2 = self.head_w.shape
        if lh % h:
            raise ShapeError("head input size must be a multiple of the encoder width")
        l = lh // h
        expected = {
            "encoder.bias": (h,),
            "head.bias": (h2,),
            "score.weight": (h2, l * l),
            "score.bias": (l * l,),
        }
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise ShapeError(f"{name} has shape {self[name].shape}, expected {shape}")
        for name in TENSOR_NAMES:
            if not np.all(np.isfinite(self[name])):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def dims(self):
        """``(d, h, h2, l)``"""
        d, h = self.encoder_w.shape
        return d, h, self.head_w.shape[1], self.head_w.shape[0] // h

    @property
    def l(self) -> int:
        return self.dims[3]

    _ATTRS = dict(zip(TENSOR_NAMES, ("encoder_w", "encoder_b", "head_w", "head_b", "score_w", "score_b")))

    def __getitem__(self, name):
        return getattr(self, self._ATTRS[name])

    def tensors(self) -> dict:
        return {name: self[name] for name in TENSOR_NAMES}

    @classmethod
    def from_tensors(cls, tensors: dict) -> "ModelParams":
        return cls(**{cls._ATTRS[name]: np.asarray(tensors[name], dtype=np.float64) for name in TENSOR_NAMES})

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({k: v.copy() for k, v in self.tensors().items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors().values())


def init_params(d: int, h: int, h2: int, l: int, rng: np.random.Generator) -> ModelParams:
    """Gaussian weights with std ``sqrt(2 / fan_in)``, zero biases."""
    if min(d, h, h2, l) < 1:
        raise ValueError("all model dimensions must be positive")

    def he(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)

    return ModelParams(
        encoder_w=he(d, h),
        encoder_b=np.zeros(h),
        head_w=he(l * h, h2),
        head_b=np.zeros(h2),
        score_w=he(h2, l * l),
        score_b=np.zeros(l * l),
    )


def zero_params(d: int, h: int, h2: int, l: int) -> ModelParams:
    return ModelParams(
        np.zeros((d, h)), np.zeros(h), np.zeros((l * h, h2)), np.zeros(h2), np.zeros((h2, l * l)), np.zeros(l * l)
    )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32
    iterations: int = 2000
    weight_decay: float = 1e-4
    seed: int = 0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    loss_kind: str = "sinkhorn_ce"
    eval_every: Optional[int] = None  # defaults to one epoch
    workers: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 1 or self.workers < 1:
            raise ValueError("batch_size, iterations and workers must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    @property
    def head(self) -> str:
        return "sinkhorn" if self.loss_kind == "sinkhorn_ce" else "naive"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(params: ModelParams, x, cfg: SinkhornConfig, head: str = "sinkhorn"):
    """Run the network on one shuffled sequence ``(l, d)`` or a batch ``(B, l, d)``.

    Returns the predicted matrix (doubly-stochastic for the sinkhorn head,
    elementwise sigmoid for the naive head) and a cache for :func:`backward`.
    """
    d, h, h2, l = params.dims
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (l, d):
        raise ShapeError(f"expected input of shape (l={l}, d={d}) per sequence, got {x.shape[-2:]}")
    if head not in ("sinkhorn", "naive"):
        raise ValueError(f"unknown head {head!r}")
    b = x.shape[0]

    a1 = x @ params.encoder_w + params.encoder_b  # shared across positions
    h1 = np.maximum(a1, 0.0)
    concat = h1.reshape(b, l * h)
    a2 = concat @ params.head_w + params.head_b
    hid = np.maximum(a2, 0.0)
    scores = (hid @ params.score_w + params.score_b).reshape(b, l, l)

    cache = {
        "params": params,
        "x": x,
        "a1": a1,
        "concat": concat,
        "a2": a2,
        "hid": hid,
        "scores": scores,
        "head": head,
        "single": single,
    }
    if head == "sinkhorn":
        q, tape = sinkhorn_forward(to_positive(scores, cfg), cfg)
        cache["tape"] = tape
        cache["sinkhorn"] = cfg
    else:
        q = _sigmoid(scores)
    cache["out"] = q
    return (q[0] if single else q), cache


def backward(params: ModelParams, cache: dict, grad, weight_decay: float = 0.0, input_grad: bool = False):
    """Parameter gradients from a forward cache.

    ``grad`` is the upstream gradient w.r.t. the doubly-stochastic output for
    the sinkhorn head and w.r.t. the raw scores for the naive head.  The
    weight-decay term ``2 * weight_decay * theta`` is added to every tensor.
    With ``input_grad`` the gradient w.r.t. the input sequence is returned
    under the key ``"input"``.
    """
    if cache.get("params") is not params:
        raise RuntimeError("forward cache was produced with different parameters")
    if cache.get("consumed"):
        raise RuntimeError("forward cache has already been used by a backward pass")
    cache["consumed"] = True
    d, h, h2, l = params.dims
    x = cache["x"]
    b = x.shape[0]
    grad = np.asarray(grad, dtype=np.float64)
    if cache["single"] and grad.ndim == 2:
        grad = grad[None]
    if grad.shape != (b, l, l):
        raise ShapeError(f"upstream gradient has shape {grad.shape}, expected {(b, l, l)}")

    if cache["head"] == "sinkhorn":
        g_pos = sinkhorn_backward(grad, cache["tape"])
        g_scores = to_positive_backward(g_pos, cache["scores"], cache["sinkhorn"])
    else:
        g_scores = grad
    g_scores = g_scores.reshape(b, l * l)

    grads = {
        "score.weight": cache["hid"].T @ g_scores,
        "score.bias": g_scores.sum(axis=0),
    }
    g_a2 = (g_scores @ params.score_w.T) * (cache["a2"] > 0)
    grads["head.weight"] = cache["concat"].T @ g_a2
    grads["head.bias"] = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ params.head_w.T).reshape(b, l, h) * (cache["a1"] > 0)
    grads["encoder.weight"] = x.reshape(b * l, d).T @ g_a1.reshape(b * l, h)
    grads["encoder.bias"] = g_a1.sum(axis=(0, 1))
    if weight_decay:
        for name in TENSOR_NAMES:
            grads[name] = grads[name] + 2.0 * weight_decay * params[name]
    if input_grad:
        gx = g_a1 @ params.encoder_w.T
        grads["input"] = gx[0] if cache["single"] else gx
    return grads


def _targets(perms, l):
    """Stack of permutation matrices from a ``(B, l)`` index array or a list of permutations."""
    if isinstance(perms, Permutation):
        perms = perms.pi[None]
    elif not isinstance(perms, np.ndarray):
        perms = np.stack([p.pi for p in perms])
    perms = np.asarray(perms)
    if perms.ndim == 1:
        perms = perms[None]
    t = np.zeros((perms.shape[0], l, l))
    np.put_along_axis(t, perms[..., None], 1.0, axis=2)
    return t


def loss_sinkhorn_ce(q, p):
    """Row-wise multi-class cross entropy ``-sum_ij P_ij log Q_ij``.

    Row ``i`` of ``q`` is a distribution over original indices with target
    ``pi[i]``.  For a stack of matrices the loss and gradient are averaged
    over the batch.  Returns ``(loss, dloss/dq)``.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 2
    qb = q[None] if single else q
    l = qb.shape[-1]
    t = p if isinstance(p, np.ndarray) and p.ndim == 3 else _targets(p, l)
    if t.shape != qb.shape:
        raise ShapeError(f"target shape {t.shape} does not match prediction shape {qb.shape}")
    b = qb.shape[0]
    picked = qb[t == 1.0]
    loss = -float(np.log(picked).sum()) / b
    grad = np.where(t == 1.0, -1.0 / np.where(t == 1.0, qb, 1.0), 0.0) / b
    return loss, (grad[0] if single else grad)


def loss_naive(scores, p):
    """Mean binary cross entropy of ``sigmoid(scores)`` against the permutation matrix entries.

    Returns ``(loss, dloss/dscores)``; batches are averaged.
    """
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 2
    sb = s[None] if single else s
    l = sb.shape[-1]
    t = p if isinstance(p, np.ndarray) and p.ndim == 3 else _targets(p, l)
    if t.shape != sb.shape:
        raise ShapeError(f"target shape {t.shape} does not match score shape {sb.shape}")
    b = sb.shape[0]
    # softplus(s) - t*s, written to stay finite for large |s|
    per_entry = np.maximum(sb, 0.0) + np.log1p(np.exp(-np.abs(sb))) - t * sb
    loss = float(per_entry.sum()) / (b * l * l)
    grad = (_sigmoid(sb) - t) / (l * l * b)
    return loss, (grad[0] if single else grad)


def weight_penalty(params: ModelParams, weight_decay: float) -> float:
    if not weight_decay:
        return 0.0
    return weight_decay * sum(float(np.sum(t * t)) for t in params.tensors().values())


def loss_and_grads(params, x_shuffled, perms, sinkhorn_cfg, loss_kind="sinkhorn_ce", weight_decay=0.0):
    """Objective (mean data loss plus ``weight_decay * ||theta||^2``) and its gradients."""
    head = "sinkhorn" if loss_kind == "sinkhorn_ce" else "naive"
    q, cache = forward(params, x_shuffled, sinkhorn_cfg, head)
    t = _targets(perms, params.l)
    if head == "sinkhorn":
        loss, g = loss_sinkhorn_ce(cache["out"], t)
    else:
        loss, g = loss_naive(cache["scores"], t)
    grads = backward(params, cache, g, weight_decay)
    return loss + weight_penalty(params, weight_decay), grads


def sgd_step(params: ModelParams, grads: dict, cfg: TrainConfig, velocity: Optional[dict] = None, iteration=None):
    """Classical momentum: ``v <- m*v - lr*g``; ``theta <- theta + v``.

    Returns new ``(params, velocity)``; inputs are not modified.
    """
    for name in TENSOR_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient in {name}", iteration)
    if velocity is None:
        velocity = {name: np.zeros_like(params[name]) for name in TENSOR_NAMES}
    new_v = {name: cfg.momentum * velocity[name] - cfg.learning_rate * grads[name] for name in TENSOR_NAMES}
    new_p = ModelParams.from_tensors({name: params[name] + new_v[name] for name in TENSOR_NAMES})
    return new_p, new_v


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    loss: float
    kt: float
    hs: float
    ne: float

    def csv(self) -> str:
        return f"{self.iteration},{self.loss:.6g},{self.kt:.6g},{self.hs:.6g},{self.ne:.6g}"


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    epoch_losses: list

    def log_text(self) -> str:
        return "".join(row.csv() + "\n" for row in self.log)


def shuffle_batch(x_ordered, rng: np.random.Generator):
    """Shuffle every sequence in ``(B, l, d)`` by a fresh uniform permutation; returns ``(x_shuffled, pis)``."""
    b, l = x_ordered.shape[:2]
    pis = rng.permuted(np.tile(np.arange(l), (b, 1)), axis=1)
    return np.take_along_axis(x_ordered, pis[..., None], axis=1), pis


def evaluate(params, x_shuffled, pis, sinkhorn_cfg, loss_kind="sinkhorn_ce"):
    """Mean loss, Kendall tau, Hamming similarity and normalization error on a fixed shuffled set."""
    head = "sinkhorn" if loss_kind == "sinkhorn_ce" else "naive"
    q, cache = forward(params, x_shuffled, sinkhorn_cfg, head)
    t = _targets(pis, params.l)
    if head == "sinkhorn":
        loss, _ = loss_sinkhorn_ce(q, t)
    else:
        loss, _ = loss_naive(cache["scores"], t)
    kts, hss, nes = [], [], []
    for qi, pi in zip(q, pis):
        truth = Permutation(pi)
        pred = round_to_permutation(qi).perm
        kts.append(permcore.kendall_tau(pred, truth))
        hss.append(permcore.hamming_similarity(pred, truth))
        nes.append(permcore.normalization_error(qi))
    return loss, float(np.mean(kts)), float(np.mean(hss)), float(np.mean(nes))


def _parallel_grads(params, xs, pis, cfg: TrainConfig, pool):
    """Gradients over chunks of the batch, reduced in chunk order so results do not depend on timing."""
    chunks = np.array_split(np.arange(len(xs)), cfg.workers)
    chunks = [c for c in chunks if len(c)]
    jobs = [
        pool.submit(loss_and_grads, params, xs[c], pis[c], cfg.sinkhorn, cfg.loss_kind, 0.0) for c in chunks
    ]
    loss = 0.0
    grads = {name: np.zeros_like(params[name]) for name in TENSOR_NAMES}
    for c, job in zip(chunks, jobs):
        w = len(c) / len(xs)
        part_loss, part = job.result()
        loss += w * part_loss
        for name in TENSOR_NAMES:
            grads[name] += w * part[name]
    if cfg.weight_decay:
        loss += weight_penalty(params, cfg.weight_decay)
        for name in TENSOR_NAMES:
            grads[name] += 2.0 * cfg.weight_decay * params[name]
    return loss, grads


def train(
    sequences,
    cfg: TrainConfig,
    eval_sequences=None,
    hidden: int = 64,
    hidden2: int = 128,
    params: Optional[ModelParams] = None,
    eval_pis=None,
) -> TrainResult:
    """Minibatch SGD on ordered sequences ``(N, l, d)``, reshuffled on the fly every step.

    Held-out sequences (if given) are shuffled once with a fixed seed and
    evaluated every ``cfg.eval_every`` steps (one epoch by default) and after
    the final step.
    """
    x = _stack(sequences)
    n, l, d = x.shape
    if l < 2:
        raise ValueError("sequences must have at least two elements")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(d, hidden, hidden2, l, rng)
    else:
        params = params.copy()
    if params.dims[0] != d or params.l != l:
        raise ShapeError(f"parameters expect (l={params.l}, d={params.dims[0]}), data has (l={l}, d={d})")

    ev_x = ev_pis = None
    if eval_sequences is not None:
        ev = _stack(eval_sequences)
        if eval_pis is None:
            ev_x, ev_pis = shuffle_batch(ev, np.random.default_rng([cfg.seed, 1]))
        else:
            ev_pis = np.asarray(eval_pis)
            ev_x = np.take_along_axis(ev, ev_pis[..., None], axis=1)

    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    eval_every = cfg.eval_every or steps_per_epoch
    velocity = None
    log, epoch_losses, running = [], [], []
    order = rng.permutation(n)
    cursor = 0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(1, cfg.iterations + 1):
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            xs, pis = shuffle_batch(x[idx], rng)
            if pool is None:
                loss, grads = loss_and_grads(params, xs, pis, cfg.sinkhorn, cfg.loss_kind, cfg.weight_decay)
            else:
                loss, grads = _parallel_grads(params, xs, pis, cfg, pool)
            if not math.isfinite(loss):
                raise DivergenceError("training loss is not finite", it)
            running.append(loss)
            params, velocity = sgd_step(params, grads, cfg, velocity, iteration=it)
            if it % steps_per_epoch == 0 or it == cfg.iterations:
                epoch_losses.append(float(np.mean(running)))
                running = []
            if ev_x is not None and (it % eval_every == 0 or it == cfg.iterations):
                log.append(MetricsRow(it, *evaluate(params, ev_x, ev_pis, cfg.sinkhorn, cfg.loss_kind)))
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, log, epoch_losses)


def _stack(sequences) -> np.ndarray:
    if isinstance(sequences, np.ndarray):
        x = sequences
    else:
        x = np.stack([np.asarray(s.items if isinstance(s, SequenceSample) else s) for s in sequences])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected sequences of shape (N, l, d), got {x.shape}")
    return x


def predict(params: ModelParams, x_shuffled, cfg: SinkhornConfig, head: str = "sinkhorn"):
    """Predict the permutation that shuffled one sequence and undo it.

    Returns ``(permutation, predicted matrix, recovered sequence)``.
    """
    q, _ = forward(params, x_shuffled, cfg, head)
    perm = round_to_permutation(q).perm
    return perm, q, permcore.recover(perm, np.asarray(x_shuffled))


def saliency(params: ModelParams, x_shuffled, cfg: SinkhornConfig, targets, channels: Optional[int] = None):
    """Magnitude of ``d(sum of Q[i, j] over targets) / d(input)`` for each sequence element.

    ``targets`` is an iterable of ``(i, j)`` entries of the output matrix.
    With ``channels=None`` each element's map is the largest absolute gradient
    over its features, shape ``(l,)``.  With ``channels=c`` the features are
    read as ``(pixels, c)`` and the maximum is taken over the channel axis
    only, giving per-pixel maps of shape ``(l, d // c)``.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("saliency needs at least one target entry")
    l = params.l
    x = np.asarray(x_shuffled, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("saliency works on a single sequence of shape (l, d)")
    _, cache = forward(params, x, cfg, "sinkhorn")
    g = np.zeros((l, l))
    for i, j in targets:
        g[i, j] += 1.0
    gx = np.abs(backward(params, cache, g, input_grad=True)["input"])
    if channels is None:
        return gx.max(axis=1)
    if gx.shape[1] % channels:
        raise ShapeError(f"feature size {gx.shape[1]} is not divisible by {channels} channels")
    return gx.reshape(l, -1, channels).max(axis=2)


# checkpoint file: "DPNM", u32 version, u32 d/h/h2/l, then per tensor:
# u16 name length, name, u8 rank, u32 dims, float64 row-major data (all little endian)
MAGIC = b"DPNM"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<4I", *params.dims)]
    for name in TENSOR_NAMES:
        t = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("ascii")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> ModelParams:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a checkpoint", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    d, h, h2, l = struct.unpack("<4I", take(16, "dims"))
    expected = {
        "encoder.weight": (d, h),
        "encoder.bias": (h,),
        "head.weight": (l * h, h2),
        "head.bias": (h2,),
        "score.weight": (h2, l * l),
        "score.bias": (l * l,),
    }
    tensors = {}
    for name in TENSOR_NAMES:
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        got = take(nlen, "tensor name").decode("ascii", errors="replace")
        if got != name:
            raise FormatError(f"expected tensor {name!r}, found {got!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape_at = pos
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "tensor dims"))
        if shape != expected[name]:
            raise FormatError(f"{name} has shape {shape}, header dims imply {expected[name]}", shape_at)
        count = int(np.prod(shape, dtype=np.int64))
        data = take(8 * count, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    try:
        return ModelParams.from_tensors(tensors)
    except ValueError as exc:
        raise FormatError(str(exc), None) from exc


def load_checkpoint(path) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes())

