"""Point-prompted vision transformer.

Patch tokens and point tokens share one transformer encoder. Point tokens
come first in the sequence, all receive the same positional vector, and an
MLP head turns each point token into class logits.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor

# trained from scratch when a backbone checkpoint is loaded with skip_scratch
SCRATCH_PREFIXES = ("point_encoder.", "head.")
POINT_POS = "pos_embed.point"
CLS_POS = "pos_embed.cls"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    image_size: tuple = (64, 64)
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 1 or self.depth < 1:
            raise ValueError("need num_classes >= 1 and depth >= 1")

    @property
    def grid(self) -> tuple:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(frozen=True)
class PointPrompt:
    """Normalised ``[x, y, w, h]`` prompt; a point is a box with ``w = h = 0``."""

    x: float
    y: float
    w: float = 0.0
    h: float = 0.0
    label: int | None = None

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"prompt {self.as_row()} outside [0, 1]^4")

    def as_row(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_pixel(cls, row: int, col: int, height: int, width: int, label=None) -> "PointPrompt":
        return cls((col + 0.5) / width, (row + 0.5) / height, 0.0, 0.0, label)


@dataclass
class PointBatch:
    prompts: list = field(default_factory=list)

    def __post_init__(self):
        self.prompts = list(self.prompts)

    def __len__(self) -> int:
        return len(self.prompts)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.array([p.as_row() for p in self.prompts], dtype=dtype).reshape(-1, 4)

    def labels(self) -> list:
        return [p.label for p in self.prompts]

    def permuted(self, order: Sequence[int]) -> "PointBatch":
        return PointBatch([self.prompts[i] for i in order])


# -- parameters ------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, coordinate_head: bool = True) -> ParamStore:
    """Fresh parameters; a fixed seed gives bitwise-identical stores."""
    rng = np.random.default_rng(seed)
    d, hid = cfg.embed_dim, cfg.hidden_dim
    patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
    p = ParamStore()

    def dense(name, fan_in, fan_out, std=None):
        std = 1.0 / math.sqrt(fan_in) if std is None else std
        p[name + ".weight"] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)).astype(dtype), requires_grad=True)
        p[name + ".bias"] = Tensor(np.zeros(fan_out, dtype), requires_grad=True)

    def norm(name):
        p[name + ".gain"] = Tensor(np.ones(d, dtype), requires_grad=True)
        p[name + ".bias"] = Tensor(np.zeros(d, dtype), requires_grad=True)

    dense("patch_embed", patch_in, d, std=0.2 / math.sqrt(patch_in))
    p["pos_embed.patch"] = Tensor(rng.normal(0.0, 0.1, (cfg.num_patches, d)).astype(dtype), requires_grad=True)
    p[POINT_POS] = Tensor(rng.normal(0.0, 0.5, d).astype(dtype), requires_grad=True)
    for i in range(cfg.depth):
        b = f"encoder.block{i}"
        norm(b + ".norm1")
        for proj in ("q", "k", "v", "o"):
            dense(f"{b}.attn.{proj}", d, d)
        norm(b + ".norm2")
        dense(b + ".mlp.fc1", d, hid)
        dense(b + ".mlp.fc2", hid, d, std=0.5 / math.sqrt(hid))
    norm("encoder.norm")
    init_scratch(p, cfg, rng, dtype)
    if coordinate_head:
        _init_coordinate_head(p, cfg)
    return p


def _init_coordinate_head(p: ParamStore, cfg: ModelConfig, alpha: float = 8.0, gamma: float = 8.0,
                          sharpness: float = 6.0) -> None:
    """Bias attention head 0 of the first block towards patches near each point.

    Dims 0-2 carry ``(u, v, const)`` for points and ``(u_j, v_j, |p_j|^2 term)``
    for patches (``u = x - 0.5``); dims 3-5 hold the negated copy so layer
    norm's mean shift cancels. The head-0 logit is then a negative squared
    distance between point and patch centre, up to a per-point constant.
    """
    dh = cfg.embed_dim // cfg.heads
    if dh < 8:
        return
    gh, gw = cfg.grid
    rows, cols = np.mgrid[0:gh, 0:gw]
    u = ((cols.reshape(-1) + 0.5) / gw) - 0.5
    v = ((rows.reshape(-1) + 0.5) / gh) - 0.5

    def put(name, fn):
        data = p[name].data.copy()
        fn(data)
        p[name].data = data

    def mirrored(a, values):
        a[..., :dh] = 0.0
        for i, val in enumerate(values):
            lo = i if i < 3 else 6
            a[..., lo], a[..., lo + (3 if i < 3 else 1)] = val, -val

    def point_weight(a):
        a[:, :dh] = 0.0
        a[0, 0], a[0, 3] = alpha, -alpha
        a[1, 1], a[1, 4] = alpha, -alpha

    def projection(sign):
        def fn(a):
            a[:, :dh] = 0.0
            for i in range(3):
                s = sharpness / 2 * (sign if i == 2 else 1.0)
                a[i, i], a[i + 3, i] = s, -s
        return fn

    beta = alpha ** 2 * (u * u + v * v) / (2 * gamma)
    # filler keeps every patch's coordinate block at the same norm, so layer
    # norm rescales all patch keys alike
    sq = alpha ** 2 * (u * u + v * v) + beta ** 2
    filler = np.sqrt(sq.max() * 1.25 - sq)
    put("pos_embed.patch", lambda a: mirrored(a, (alpha * u, alpha * v, beta, filler)))
    put(POINT_POS, lambda a: mirrored(a, ()))
    put("point_encoder.weight", point_weight)
    put("point_encoder.bias", lambda a: mirrored(a, (-alpha / 2, -alpha / 2, gamma)))
    put("patch_embed.weight", lambda a: a.__setitem__((slice(None), slice(0, 8)), 0.0))
    put("encoder.block0.attn.q.weight", projection(1.0))
    put("encoder.block0.attn.k.weight", projection(-1.0))


def init_scratch(p: ParamStore, cfg: ModelConfig, rng, dtype=np.float32) -> None:
    """(Re)initialise the point encoder and the classification head."""
    d, k = cfg.embed_dim, cfg.num_classes
    p["point_encoder.weight"] = Tensor(rng.normal(0.0, 1.0, (4, d)).astype(dtype), requires_grad=True)
    p["point_encoder.bias"] = Tensor(np.zeros(d, dtype), requires_grad=True)
    p["head.fc1.weight"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)).astype(dtype), requires_grad=True)
    p["head.fc1.bias"] = Tensor(np.zeros(d, dtype), requires_grad=True)
    # small output layer keeps the initial loss near ln K
    p["head.fc2.weight"] = Tensor(rng.normal(0.0, 0.01, (d, k)).astype(dtype), requires_grad=True)
    p["head.fc2.bias"] = Tensor(np.zeros(k, dtype), requires_grad=True)


# -- building blocks -------------------------------------------------------------

def image_to_array(image, cfg: ModelConfig, dtype=np.float32) -> np.ndarray:
    """uint8 H×W×C images are scaled to [-1, 1]; float input is used as is."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.dtype == np.uint8:
        scale = np.dtype(dtype).type
        arr = arr.astype(dtype) / scale(127.5) - scale(1.0)
    arr = arr.astype(dtype, copy=False)
    if arr.shape != (*cfg.image_size, cfg.channels):
        raise ValueError(f"image shape {arr.shape} does not match config {(*cfg.image_size, cfg.channels)}")
    return arr


def patchify(arr: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = arr.shape
    gh, gw = h // patch, w // patch
    return (arr.reshape(gh, patch, gw, patch, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(gh * gw, patch * patch * c))


def patch_embed(image, params: ParamStore, cfg: ModelConfig) -> Tensor:
    arr = image_to_array(image, cfg, params["patch_embed.weight"].dtype)
    patches = patchify(arr, cfg.patch_size)
    if isinstance(image, Tensor) and image.requires_grad:
        # differentiable route for gradient checks against pixels
        x = T.reshape(image, (cfg.grid[0], cfg.patch_size, cfg.grid[1], cfg.patch_size, cfg.channels))
        x = T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), patches.shape)
    else:
        x = Tensor(patches)
    return T.linear(x, params["patch_embed.weight"], params["patch_embed.bias"])


def encode_points(batch: PointBatch | np.ndarray, params: ParamStore) -> Tensor:
    """One shared affine map from ``[x, y, w, h]`` to the embedding width."""
    dtype = params["point_encoder.weight"].dtype
    rows = batch.as_array(dtype) if isinstance(batch, PointBatch) else np.asarray(batch, dtype=dtype)
    if rows.ndim != 2 or rows.shape[1] != 4:
        raise ValueError(f"prompts must be N×4, got {rows.shape}")
    if np.any(rows < 0) or np.any(rows > 1):
        raise ValueError("prompt outside [0, 1]^4")
    return T.linear(Tensor(rows), params["point_encoder.weight"], params["point_encoder.bias"])


def build_sequence(x_p: Tensor, x_i: Tensor) -> Tensor:
    """Point tokens first, then patch tokens."""
    if x_p.dims[0] == 0:
        raise ValueError("at least one point prompt is required")
    if x_p.dims[1] != x_i.dims[1]:
        raise ValueError(f"embedding width mismatch: {x_p.dims[1]} vs {x_i.dims[1]}")
    return T.concat([x_p, x_i], axis=0)


def split_sequence(z: Tensor, num_points: int) -> tuple:
    return z[:num_points], z[num_points:]


def add_positional(z: Tensor, pos_patch: Tensor, pos_point: Tensor) -> Tensor:
    n_patch, d = pos_patch.dims
    n_point = z.dims[0] - n_patch
    if n_point < 1 or z.dims[1] != d or pos_point.dims != (d,):
        raise ValueError(f"positional shapes {pos_patch.dims}/{pos_point.dims} do not fit sequence {z.dims}")
    pos = T.concat([T.broadcast_rows(pos_point, n_point), pos_patch], axis=0)
    return z + pos


def _attention_mask(n_point: int, n_total: int) -> np.ndarray:
    # points see themselves and the patches; patches see only patches
    allowed = np.zeros((n_total, n_total), dtype=bool)
    allowed[:, n_point:] = True
    allowed[np.arange(n_point), np.arange(n_point)] = True
    return np.where(allowed, 0.0, -1e9)


def attention(x: Tensor, params: ParamStore, prefix: str, heads: int, mask=None) -> Tensor:
    t, d = x.dims
    dh = d // heads

    def proj(name):
        y = T.linear(x, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"])
        return T.transpose(T.reshape(y, (t, heads, dh)), (1, 0, 2))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask.astype(x.dtype))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (t, d))
    return T.linear(out, params[f"{prefix}.o.weight"], params[f"{prefix}.o.bias"])


def block(x: Tensor, params: ParamStore, prefix: str, heads: int, mask=None) -> Tensor:
    h = T.layer_norm(x, params[prefix + ".norm1.gain"], params[prefix + ".norm1.bias"])
    x = x + attention(h, params, prefix + ".attn", heads, mask)
    h = T.layer_norm(x, params[prefix + ".norm2.gain"], params[prefix + ".norm2.bias"])
    h = T.gelu(T.linear(h, params[prefix + ".mlp.fc1.weight"], params[prefix + ".mlp.fc1.bias"]))
    return x + T.linear(h, params[prefix + ".mlp.fc2.weight"], params[prefix + ".mlp.fc2.bias"])


def forward(image, batch, params: ParamStore, cfg: ModelConfig, isolate_points: bool = False) -> Tensor:
    """Per-point class logits, ``N×K``.

    ``isolate_points`` blocks point-to-point and patch-to-point attention, so
    each point's logits depend only on the image and that point.
    """
    x_i = patch_embed(image, params, cfg)
    x_p = encode_points(batch, params)
    n = x_p.dims[0]
    z = build_sequence(x_p, x_i)
    z = add_positional(z, params["pos_embed.patch"], params[POINT_POS])
    mask = _attention_mask(n, z.dims[0]) if isolate_points else None
    for i in range(cfg.depth):
        z = block(z, params, f"encoder.block{i}", cfg.heads, mask)
    z = T.layer_norm(z, params["encoder.norm.gain"], params["encoder.norm.bias"])
    points = z[:n]
    h = T.gelu(T.linear(points, params["head.fc1.weight"], params["head.fc1.bias"]))
    return T.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def pad_batch(batch: PointBatch, size: int, hw: tuple, rng) -> PointBatch:
    """Append uniformly random pixel-centre points until the batch has ``size`` prompts."""
    h, w = hw
    extra = max(0, size - len(batch))
    picks = rng.integers(0, h * w, size=extra)
    return PointBatch(batch.prompts + [PointPrompt.from_pixel(int(i // w), int(i % w), h, w) for i in picks])


def predict_proba(image, batch: PointBatch, params: ParamStore, cfg: ModelConfig, pad_to: int = 0,
                  seed: int = 0) -> np.ndarray:
    """Row-wise class probabilities for ``batch`` as a plain array.

    Under full attention a point's logits depend on the other prompts in the
    batch. ``pad_to`` fills the batch with random filler points up to the
    count the model was trained with; filler rows are dropped.
    """
    n = len(batch)
    if pad_to > n:
        batch = pad_batch(batch, pad_to, cfg.image_size, np.random.default_rng([seed, n]))
    return T.softmax(forward(image, batch, params, cfg), axis=-1).data[:n]


def load_pretrained(params: ParamStore, checkpoint: ParamStore | Mapping[str, Tensor],
                    skip_scratch: bool = False) -> dict:
    """Copy checkpoint tensors into ``params``.

    Returns ``{name: "loaded" | "initialized"}``. The shared point positional
    vector is taken from a stored CLS positional slot when the checkpoint has
    one. With ``skip_scratch`` the point encoder and head keep their fresh
    values.
    """
    report = {}
    for name in params.names():
        target = params[name]
        if skip_scratch and name.startswith(SCRATCH_PREFIXES):
            report[name] = "initialized"
            continue
        source_name = name
        if name == POINT_POS and CLS_POS in checkpoint:
            source_name = CLS_POS
        if source_name not in checkpoint:
            if name.startswith(SCRATCH_PREFIXES) or name == POINT_POS:
                report[name] = "initialized"
                continue
            raise KeyError(f"checkpoint lacks parameter {name!r}")
        source = checkpoint[source_name]
        data = source.data if isinstance(source, Tensor) else np.asarray(source)
        if data.shape != target.dims:
            raise ValueError(f"shape mismatch for {name!r}: checkpoint {data.shape} vs model {target.dims}")
        target.data = data.astype(target.dtype, copy=True)
        target.grad = None
        report[name] = "loaded"
    return report
