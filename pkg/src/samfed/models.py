"""Tiny U-Net segmenters, low-rank adapters, optimisers and checkpoints.

The same network family stands in for the server teacher, the server global
model and every client; capacity is set by ``base_channels`` and ``depth``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadCheckpoint,
    EmptyDataset,
    FingerprintMismatch,
    InvalidConfig,
    LabelOutOfRange,
    RankTooLarge,
    UnknownLayer,
)
from .tensor import Tensor

CKPT_MAGIC = b"FSEG"
CKPT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    base_channels: int = 4
    depth: int = 2
    num_classes: int = 2
    input_size: tuple = (64, 64)

    def validate(self) -> "SegNetConfig":
        h, w = self.input_size
        if self.base_channels < 1 or self.depth < 0:
            raise InvalidConfig(f"bad capacity: {self}")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if h % (2 ** self.depth) or w % (2 ** self.depth):
            raise InvalidConfig(f"input {self.input_size} not divisible by 2^{self.depth}")
        return self

    @property
    def arch_fingerprint(self) -> str:
        h, w = self.input_size
        key = f"segnet|c={self.base_channels}|d={self.depth}|n={self.num_classes}|h={h}|w={w}"
        return hashlib.sha256(key.encode()).hexdigest()


class ModelParams:
    """Ordered, uniquely named parameter tensors tagged with an architecture hash."""

    def __init__(self, entries: Sequence[tuple[str, Tensor]], arch_fingerprint: str):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.entries = list(entries)
        self.arch_fingerprint = arch_fingerprint
        self._index = {n: t for n, t in self.entries}

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownLayer(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams(
            [(n, Tensor(t.data.copy(), requires_grad=requires_grad)) for n, t in self.entries],
            self.arch_fingerprint,
        )

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        for t, a in zip(self.tensors(), arrays, strict=True):
            if a.shape != t.shape:
                raise ValueError(f"shape {a.shape} vs {t.shape}")
            t.data = np.array(a, dtype=T.DTYPE)

    def equal(self, other: "ModelParams") -> bool:
        return (
            self.arch_fingerprint == other.arch_fingerprint
            and self.names() == other.names()
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


# -- network -------------------------------------------------------------------

class SegNet:
    """U-Net-like forward pass: two conv+relu per stage, avg-pool down,
    nearest up, skip connections by channel concatenation, 1×1 head."""

    def __init__(self, cfg: SegNetConfig):
        self.cfg = cfg.validate()

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        c, d, n = self.cfg.base_channels, self.cfg.depth, self.cfg.num_classes
        layers = []
        cin = 1
        for i in range(d + 1):
            ch = c * 2 ** i
            layers += [(f"enc{i}.c1", (3, 3, cin, ch)), (f"enc{i}.c2", (3, 3, ch, ch))]
            cin = ch
        for i in range(d, 0, -1):
            ch = c * 2 ** (i - 1)
            layers += [(f"dec{i}.c1", (3, 3, c * 2 ** i + ch, ch)), (f"dec{i}.c2", (3, 3, ch, ch))]
        layers.append(("head", (1, 1, c, n)))
        return layers

    def conv_layers(self) -> list[str]:
        return [name for name, _ in self.layer_shapes()]

    def init_params(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(seed)
        entries = []
        for name, shape in self.layer_shapes():
            fan_in = shape[0] * shape[1] * shape[2]
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=shape).astype(T.DTYPE)
            entries.append((f"{name}.w", Tensor(w, requires_grad=True)))
            entries.append((f"{name}.b", Tensor(np.zeros(shape[-1], T.DTYPE), requires_grad=True)))
        return ModelParams(entries, self.cfg.arch_fingerprint)

    def __call__(self, weights, x) -> Tensor:
        """``weights`` is a ModelParams or any ``name -> Tensor`` callable."""
        get = weights.__getitem__ if isinstance(weights, ModelParams) else weights
        if not isinstance(x, Tensor):
            x = Tensor(x)

        def block(h, prefix):
            h = T.relu(T.conv2d(h, get(f"{prefix}.c1.w"), get(f"{prefix}.c1.b")))
            return T.relu(T.conv2d(h, get(f"{prefix}.c2.w"), get(f"{prefix}.c2.b")))

        skips = []
        h = x
        for i in range(self.cfg.depth + 1):
            if i:
                h = T.downsample2x_avg(h)
            h = block(h, f"enc{i}")
            skips.append(h)
        for i in range(self.cfg.depth, 0, -1):
            h = T.concat_channels(T.upsample2x_nearest(h), skips[i - 1])
            h = block(h, f"dec{i}")
        return T.conv2d(h, get("head.w"), get("head.b"))


def build_segnet(cfg: SegNetConfig, seed: int) -> tuple[ModelParams, SegNet]:
    net = SegNet(cfg)
    return net.init_params(seed), net


def infer_config(params: ModelParams, input_size: tuple) -> SegNetConfig:
    """Recover the architecture from parameter names/shapes plus an input size."""
    try:
        base = params["enc0.c1.w"].shape[-1]
        n = params["head.w"].shape[-1]
    except UnknownLayer as exc:
        raise BadCheckpoint(f"not a segnet parameter set: missing {exc}") from None
    depth = sum(1 for name in params.names() if name.startswith("enc") and name.endswith(".c1.w")) - 1
    cfg = SegNetConfig(base, depth, n, tuple(input_size))
    if cfg.arch_fingerprint != params.arch_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint architecture does not match input size {tuple(input_size)}"
        )
    return cfg


@dataclass
class SegModel:
    """A network together with its trainable parameters."""

    cfg: SegNetConfig
    params: ModelParams
    net: SegNet

    @classmethod
    def build(cls, cfg: SegNetConfig, seed: int) -> "SegModel":
        params, net = build_segnet(cfg, seed)
        return cls(cfg, params, net)

    def logits(self, x) -> Tensor:
        return self.net(self.params, x)

    def trainable(self) -> list[Tensor]:
        return self.params.tensors()

    def predict_proba(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        return predict_proba(self.logits, images, batch_size)


def predict_proba(forward: Callable, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Softmax maps ``[K,H,W,N]`` for grayscale ``images`` of shape ``[K,H,W]``."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i:i + batch_size], dtype=T.DTYPE)[..., None]
            out.append(T.softmax_channels(forward(Tensor(x))).data)
    return np.concatenate(out, axis=0)


# -- low-rank adaptation ----------------------------------------------------------

@dataclass
class LoraAdapter:
    """Per-layer low-rank pairs; a conv kernel ``[kh,kw,cin,cout]`` is viewed
    as a matrix with ``in = kh*kw*cin`` and ``out = cout``."""

    target_layer_names: list
    rank: int = 2
    alpha: float = 4.0
    dropout_p: float = 0.1
    pairs: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, base: ModelParams, targets: Optional[Iterable[str]] = None, rank: int = 2,
             alpha: float = 4.0, dropout_p: float = 0.1, seed: int = 0) -> "LoraAdapter":
        """Create A (small random) and B (zeros) for each target layer.

        ``targets=None`` selects every conv layer whose matrix view admits ``rank``.
        """
        if rank < 1:
            raise InvalidConfig("lora rank must be >= 1")
        if not 0.0 <= dropout_p < 1.0:
            raise InvalidConfig("lora dropout must be in [0, 1)")
        layers = [n[:-2] for n in base.names() if n.endswith(".w")]
        if targets is None:
            targets = [n for n in layers if min(_mat_dims(base[n + ".w"])) >= rank]
        rng = np.random.default_rng(seed)
        pairs = {}
        for name in targets:
            if name not in layers:
                raise UnknownLayer(name)
            fan_in, fan_out = _mat_dims(base[name + ".w"])
            if rank > min(fan_in, fan_out):
                raise RankTooLarge(f"{name}: rank {rank} > min({fan_in}, {fan_out})")
            a = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(rank, fan_in)).astype(T.DTYPE)
            pairs[name] = (Tensor(a, requires_grad=True),
                           Tensor(np.zeros((fan_out, rank), T.DTYPE), requires_grad=True))
        return cls(list(targets), rank, alpha, dropout_p, pairs, seed)

    def tensors(self) -> list[Tensor]:
        return [t for name in self.target_layer_names for t in self.pairs[name]]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())


def _mat_dims(kernel: Tensor) -> tuple[int, int]:
    kh, kw, cin, cout = kernel.shape
    return kh * kw * cin, cout


class LoraForward:
    """Forward pass with ``W_eff = W_base + (alpha/r) * B @ A`` on target layers.

    Base weights enter the graph as untracked tensors, so only the adapter
    receives gradients. Dropout zeroes input columns of A during training.
    """

    def __init__(self, base: ModelParams, adapter: LoraAdapter, net: SegNet):
        for name in adapter.target_layer_names:
            if name + ".w" not in base:
                raise UnknownLayer(name)
            fan_in, fan_out = _mat_dims(base[name + ".w"])
            a, b = adapter.pairs[name]
            if a.shape != (adapter.rank, fan_in) or b.shape != (fan_out, adapter.rank):
                raise RankTooLarge(f"{name}: adapter shapes do not fit layer")
        self.base = base
        self.adapter = adapter
        self.net = net
        self.training = False
        self._rng = np.random.default_rng(adapter.seed + 7919)
        self._frozen = {n: Tensor(t.data) for n, t in base}

    def effective_weight(self, name: str) -> Tensor:
        layer = name[:-2]
        w = self._frozen[name]
        if not name.endswith(".w") or layer not in self.adapter.pairs:
            return w
        a, b = self.adapter.pairs[layer]
        p = self.adapter.dropout_p
        if self.training and p > 0:
            keep = (self._rng.random(a.shape[1]) >= p).astype(T.DTYPE) / T.DTYPE(1.0 - p)
            a = T.mul(a, Tensor(np.broadcast_to(keep, a.shape)))
        delta = T.matmul(T.transpose(a), T.transpose(b))  # [in, out]
        delta = T.mul_scalar(delta, self.adapter.scaling)
        return T.add(w, T.reshape(delta, w.shape))

    def __call__(self, x) -> Tensor:
        return self.net(self.effective_weight, x)

    def merged(self) -> ModelParams:
        """Plain parameters with the adapter folded in."""
        with T.no_grad():
            training, self.training = self.training, False
            entries = [(n, Tensor(self.effective_weight(n).data.copy(), requires_grad=True))
                       for n in self.base.names()]
            self.training = training
        return ModelParams(entries, self.base.arch_fingerprint)


def apply_lora(base: ModelParams, adapter: LoraAdapter, net: SegNet) -> LoraForward:
    return LoraForward(base, adapter, net)


# -- optimisation ----------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                if self.lr:
                    p.sgd_update(T.DTYPE(self.lr) * p.grad)
                p.grad = None


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            if self.lr:
                upd = self.m[i] / c1 / (np.sqrt(self.v[i] / c2) + self.eps) + self.wd * p.data
                p.sgd_update((self.lr * upd).astype(T.DTYPE))
            p.grad = None


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adamw":
        return AdamW(params, lr)
    raise InvalidConfig(f"unknown optimizer {kind!r}")


def stack_batch(images: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(images).astype(T.DTYPE)[..., None])


def train_supervised(model, data: Sequence, epochs: int, lr: float, seed: int,
                     batch_size: int = 4, optimizer: str = "sgd",
                     history: Optional[list] = None) -> ModelParams:
    """Minimise mean per-pixel cross-entropy on ``(image, mask)`` pairs.

    ``model`` is a :class:`SegModel` or a :class:`LoraForward`; for the latter
    only the adapter moves. Epoch-mean losses are appended to ``history``.
    Returns the (in-place updated) parameters.
    """
    from .losses import supervised_ce

    if not data:
        raise EmptyDataset("train_supervised needs at least one sample")
    if isinstance(model, LoraForward):
        forward, trainable, result = model, model.adapter.tensors(), model.base
    else:
        forward, trainable, result = model.logits, model.trainable(), model.params
    n_classes = _num_classes(model)
    for _, m in data:
        if m.max() >= n_classes or m.min() < 0:
            raise LabelOutOfRange("mask label outside class range")
    opt = make_optimizer(optimizer, trainable, lr)
    rng = np.random.default_rng(seed)
    if isinstance(model, LoraForward):
        model.training = True
    try:
        for _ in range(epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for i in range(0, len(order), batch_size):
                idx = order[i:i + batch_size]
                x = stack_batch([data[k][0] for k in idx])
                y = np.stack([data[k][1] for k in idx])
                with T.Tape() as tape:
                    loss = supervised_ce(forward(x), y)
                T.backward(tape, loss)
                opt.step()
                total += loss.item() * len(idx)
            if history is not None:
                history.append(total / len(data))
    finally:
        if isinstance(model, LoraForward):
            model.training = False
    return result


def _num_classes(model) -> int:
    if isinstance(model, LoraForward):
        return model.net.cfg.num_classes
    return model.cfg.num_classes


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> None:
    """Write ``FSEG`` | u32 version | 32-byte fingerprint | u32 count | entries.

    Each entry: u32 name length, UTF-8 name, u32 rank, u32 dims..., f32 LE data.
    """
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += bytes.fromhex(params.arch_fingerprint)
    out += struct.pack("<I", len(params))
    for name, t in params:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.shape)
        out += t.data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadCheckpoint("bad magic")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CKPT_VERSION:
            raise BadCheckpoint(f"unsupported checkpoint version {version}")
        fingerprint = buf[8:40].hex()
        (count,) = struct.unpack_from("<I", buf, 40)
        pos = 44
        entries = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(buf):
                raise BadCheckpoint("truncated payload")
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            entries.append((name, Tensor(data.astype(T.DTYPE), requires_grad=True)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise BadCheckpoint(f"corrupt checkpoint: {exc}") from None
    if pos != len(buf):
        raise BadCheckpoint("trailing bytes after last entry")
    return ModelParams(entries, fingerprint)
