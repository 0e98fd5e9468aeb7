"""End-to-end classifier: small conv backbone, optional energy-mask stage,
global average pooling, linear head.

The mask sits on the final feature map, just before pooling. Hard token
deletion for robustness studies bypasses the soft gate: it zeroes the
selected d x d feature regions and rescales the pooled vector by
N / (N - k) so accuracy changes reflect information loss, not magnitude
loss. Checkpoints use a little-endian binary format (magic ``ERSM``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import energy_mask as em
from . import tensor as T
from ._fileio import atomic_write_bytes

__all__ = [
    "ConvBlock",
    "ModelConfig",
    "ModelParams",
    "Model",
    "CheckpointFormatError",
    "PARAM_GROUPS",
    "param_group",
    "is_hyper_entry",
    "init_params",
    "predict_nodes",
    "save_params",
    "load_params",
    "expected_entries",
]

VARIANTS = ("baseline", "unary", "full")
PARAM_GROUPS = ("backbone", "mask", "head")

CHECKPOINT_MAGIC = b"ERSM"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are malformed or disagree with the model config."""


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    relu: bool = True
    pool: int = 2  # maxpool window; <= 1 means no pooling


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus mask placement. The default desk-scale setting maps
    1x32x32 inputs to a 32x4x4 feature grid (16 tokens of dimension 32),
    small enough that a full training run takes a couple of minutes on two
    cores."""

    input_shape: tuple = (1, 32, 32)
    blocks: tuple = (ConvBlock(8), ConvBlock(16), ConvBlock(32))
    num_classes: int = 4
    patch_size: int = 1
    variant: str = "full"
    lambda_unary: float = 1e-3
    lambda_pair: float = 1e-3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.lambda_unary < 0 or self.lambda_pair < 0:
            raise ValueError("lambda weights must be >= 0")
        self.feature_shape()  # validates conv/pool/patch divisibility

    def feature_shape(self) -> tuple:
        c, h, w = self.input_shape
        for i, blk in enumerate(self.blocks):
            h = (h + 2 * blk.pad - blk.kernel) // blk.stride + 1
            w = (w + 2 * blk.pad - blk.kernel) // blk.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"block {i} shrinks the map to {h}x{w}")
            if blk.pool > 1:
                if h % blk.pool or w % blk.pool:
                    raise ValueError(f"block {i}: {h}x{w} not divisible by pool window {blk.pool}")
                h //= blk.pool
                w //= blk.pool
            c = blk.out_channels
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"feature map {h}x{w} not divisible by mask patch size {self.patch_size}"
            )
        return c, h, w

    def token_geometry(self) -> em.TokenGeometry:
        c, h, w = self.feature_shape()
        return em.TokenGeometry(c, h, w, self.patch_size)

    @property
    def effective_lambda_pair(self) -> float:
        return 0.0 if self.variant == "unary" else self.lambda_pair

    @property
    def masked(self) -> bool:
        return self.variant != "baseline"


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def is_hyper_entry(name: str) -> bool:
    """Checkpoint entries that are recorded but never optimized."""
    return name in ("mask.lambda_unary", "mask.lambda_pair", "mask.d")


@dataclass
class ModelParams:
    """All learnable state plus the mask layer's fixed weights.

    ``frozen`` names parameter groups (``backbone``/``mask``/``head``) that
    the optimizer must leave bitwise untouched.
    """

    conv_weights: list
    conv_biases: list
    mask: em.MaskLayerParams
    head_weight: np.ndarray
    head_bias: np.ndarray
    frozen: frozenset = frozenset()

    def to_dict(self) -> dict:
        """Named entries in a fixed order. Array entries are live views, so
        in-place updates write through; scalars come back as 0-d arrays."""
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"backbone.{i}.weight"] = w
            out[f"backbone.{i}.bias"] = b
        out["mask.w"] = self.mask.w
        out["mask.b"] = np.asarray(self.mask.b, dtype=np.float64)
        out["mask.lambda_unary"] = np.asarray(self.mask.lambda_unary, dtype=np.float64)
        out["mask.lambda_pair"] = np.asarray(self.mask.lambda_pair, dtype=np.float64)
        out["mask.d"] = np.asarray(float(self.mask.d), dtype=np.float64)
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    @classmethod
    def from_dict(cls, entries: dict, frozen=frozenset()) -> "ModelParams":
        n_blocks = len([k for k in entries if k.startswith("backbone.") and k.endswith(".weight")])
        conv_w = [T.as_f64(entries[f"backbone.{i}.weight"]) for i in range(n_blocks)]
        conv_b = [T.as_f64(entries[f"backbone.{i}.bias"]) for i in range(n_blocks)]
        mask = em.MaskLayerParams(
            w=T.as_f64(entries["mask.w"]),
            b=float(entries["mask.b"]),
            lambda_unary=float(entries["mask.lambda_unary"]),
            lambda_pair=float(entries["mask.lambda_pair"]),
            d=int(round(float(entries["mask.d"]))),
        )
        return cls(
            conv_weights=conv_w,
            conv_biases=conv_b,
            mask=mask,
            head_weight=T.as_f64(entries["head.weight"]),
            head_bias=T.as_f64(entries["head.bias"]),
            frozen=frozenset(frozen),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict(
            {k: np.array(v, dtype=np.float64) for k, v in self.to_dict().items()},
            frozen=self.frozen,
        )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization: He-normal conv weights, zero biases, a small
    uniform mask template (so every initial keep probability is ~0.5), and a
    small random head. Draw order is fixed for reproducibility."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    c_in = config.input_shape[0]
    for blk in config.blocks:
        fan_in = c_in * blk.kernel * blk.kernel
        conv_w.append(rng.standard_normal((blk.out_channels, c_in, blk.kernel, blk.kernel)) * np.sqrt(2.0 / fan_in))
        conv_b.append(np.zeros(blk.out_channels))
        c_in = blk.out_channels
    geom = config.token_geometry()
    mask = em.MaskLayerParams(
        w=rng.uniform(-1e-3, 1e-3, geom.token_dim),
        b=0.0,
        lambda_unary=config.lambda_unary,
        lambda_pair=config.effective_lambda_pair,
        d=config.patch_size,
    )
    c_feat = config.feature_shape()[0]
    head_w = rng.standard_normal((config.num_classes, c_feat)) * 0.01
    head_b = np.zeros(config.num_classes)
    return ModelParams(conv_w, conv_b, mask, head_w, head_b)


@dataclass
class Model:
    """A config plus its parameters; evaluation methods are read-only and
    safe to call concurrently on distinct inputs."""

    config: ModelConfig
    params: ModelParams

    def feature_map(self, x) -> np.ndarray:
        x = T.as_f64(x)
        if x.shape[-3:] != self.config.input_shape or x.ndim > 4:
            raise T.ShapeError(f"input {x.shape} does not match config {self.config.input_shape}")
        h = x
        for blk, w, b in zip(self.config.blocks, self.params.conv_weights, self.params.conv_biases):
            h = T.conv2d(h, w, b, stride=blk.stride, pad=blk.pad)
            if blk.relu:
                h = T.relu(h)
            if blk.pool > 1:
                h, _ = T.maxpool2d(h, blk.pool)
        return h

    def predict(self, x, mode: str = "infer"):
        """Logits plus mask diagnostics (``None`` for the baseline variant)."""
        feature = self.feature_map(x)
        if self.config.masked:
            x_tilde, diag = em.forward(feature, self.params.mask, mode=mode)
        else:
            x_tilde, diag = feature, None
        pooled = T.mean(x_tilde, axis=(1, 2))
        logits = T.add(T.matmul(self.params.head_weight, pooled), self.params.head_bias)
        return logits, diag

    def predict_batch(self, xb, mode: str = "infer"):
        """Stacked twin of :func:`predict` for a (B, C, H, W) input; logits
        come back as (B, K) and diagnostics arrays as (B, N)."""
        xb = T.as_f64(xb)
        if xb.ndim != 4:
            raise T.ShapeError(f"predict_batch expects (B, C, H, W), got {xb.shape}")
        feature = self.feature_map(xb)
        if self.config.masked:
            x_tilde, diag = em.forward(feature, self.params.mask, mode=mode)
        else:
            x_tilde, diag = feature, None
        pooled = T.mean(x_tilde, axis=(-2, -1))
        logits = T.add(pooled @ self.params.head_weight.T, self.params.head_bias)
        return logits, diag

    def token_scores(self, x) -> np.ndarray:
        """Unary energy scores z of the input's feature tokens."""
        _, p_hat, _ = em.tokenize(self.feature_map(x), self.params.mask.d)
        return em.unary_scores(p_hat, self.params.mask)

    def classify_feature_deleted(self, feature, delete: np.ndarray) -> np.ndarray:
        """Head logits after zeroing the given tokens of a feature map and
        rescaling the pooled vector by N / (N - k). No soft gating."""
        geom = em.TokenGeometry(feature.shape[0], feature.shape[1], feature.shape[2], self.params.mask.d)
        tokens = T.unfold(feature, geom.patch)
        if len(delete):
            tokens = tokens.copy()
            tokens[delete] = 0.0
        folded = T.fold(tokens, geom.fold_geometry())
        pooled = T.mean(folded, axis=(1, 2)) * (geom.n_tokens / (geom.n_tokens - len(delete)))
        return T.add(T.matmul(self.params.head_weight, pooled), self.params.head_bias)

    def predict_with_deletion(self, x, delete_set) -> np.ndarray:
        """Hard-deletion forward pass used by robustness studies."""
        geom = self.config.token_geometry()
        requested = np.asarray(sorted(delete_set), dtype=np.int64)
        delete = np.unique(requested) if requested.size else requested
        if len(delete) and (delete.min() < 0 or delete.max() >= geom.n_tokens):
            raise ValueError(f"delete indices out of range 0..{geom.n_tokens - 1}")
        if len(delete) >= geom.n_tokens:
            raise ValueError("cannot delete every token")
        return self.classify_feature_deleted(self.feature_map(x), delete)

    def save(self, path) -> None:
        save_params(self.params, path)

    @classmethod
    def load(cls, config: ModelConfig, path) -> "Model":
        return cls(config, load_params(path, config))


def predict_nodes(tape, x_value, nodes: dict, config: ModelConfig, mask_params: em.MaskLayerParams, mode: str = "train"):
    """Build the forward graph of one sample, or of a stacked batch, on
    ``tape``.

    ``x_value`` is (C, H, W) or (B, C, H, W); ``nodes`` maps parameter names
    to tape nodes (constants for frozen groups). Returns
    ``(logits_node, mask_nodes_or_None)``; ``mask_nodes`` carries the
    per-token nodes and ``"reg_loss"`` from the mask layer.
    """
    h = tape.constant(T.as_f64(x_value))
    for i, blk in enumerate(config.blocks):
        h = tape.conv2d(h, nodes[f"backbone.{i}.weight"], nodes[f"backbone.{i}.bias"], stride=blk.stride, pad=blk.pad)
        if blk.relu:
            h = tape.relu(h)
        if blk.pool > 1:
            h = tape.maxpool2d(h, blk.pool)
    mask_nodes = None
    if config.masked:
        h, mask_nodes = em.forward_nodes(tape, h, nodes["mask.w"], nodes["mask.b"], mask_params, mode=mode)
    pooled = tape.mean(h, axis=(-2, -1))
    # logits_k = sum_c pooled_c * W_kc + b_k, written with broadcasting so a
    # leading batch axis passes straight through
    lead = pooled.value.shape[:-1]
    prod = tape.mul(tape.reshape(pooled, lead + (1, pooled.value.shape[-1])), nodes["head.weight"])
    logits = tape.add(tape.sum(prod, axis=-1), nodes["head.bias"])
    return logits, mask_nodes


# ---------------------------------------------------------------------------
# checkpoint format


def expected_entries(config: ModelConfig) -> dict:
    """Entry name -> shape table implied by a config."""
    table = {}
    c_in = config.input_shape[0]
    for i, blk in enumerate(config.blocks):
        table[f"backbone.{i}.weight"] = (blk.out_channels, c_in, blk.kernel, blk.kernel)
        table[f"backbone.{i}.bias"] = (blk.out_channels,)
        c_in = blk.out_channels
    geom = config.token_geometry()
    table["mask.w"] = (geom.token_dim,)
    table["mask.b"] = ()
    table["mask.lambda_unary"] = ()
    table["mask.lambda_pair"] = ()
    table["mask.d"] = ()
    c_feat = config.feature_shape()[0]
    table["head.weight"] = (config.num_classes, c_feat)
    table["head.bias"] = (config.num_classes,)
    return table


def save_params(params: ModelParams, path) -> None:
    """Serialize all parameters: magic ``ERSM``, u32 version, u32 entry
    count, then per entry {u16 name length, name, u8 rank, u32 dims, f64
    data}. Little-endian, written atomically."""
    entries = params.to_dict()
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name, arr in entries.items():
        arr = T.as_f64(arr)
        name_b = name.encode("ascii")
        payload += struct.pack("<H", len(name_b))
        payload += name_b
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.astype("<f8").tobytes(order="C")
    atomic_write_bytes(path, bytes(payload))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, config: ModelConfig) -> ModelParams:
    """Read a checkpoint and validate it against ``config``'s shape table.

    Raises :class:`CheckpointFormatError` on bad magic/version, truncation,
    or any entry whose shape disagrees, naming the offending entry.
    """
    data = Path(path).read_bytes()
    cur = _Cursor(data, path)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not an ERSM checkpoint")
    version, count = cur.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("ascii")
        if name in entries:
            raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
        (rank,) = cur.unpack("<B")
        dims = cur.unpack(f"<{rank}I") if rank else ()
        n_vals = int(np.prod(dims)) if dims else 1
        raw = cur.take(8 * n_vals)
        entries[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if cur.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - cur.pos} trailing bytes after last entry")
    table = expected_entries(config)
    for name in table:
        if name not in entries:
            raise CheckpointFormatError(f"{path}: missing entry {name!r}")
    for name in entries:
        if name not in table:
            raise CheckpointFormatError(f"{path}: unexpected entry {name!r} for this config")
        if entries[name].shape != table[name]:
            raise CheckpointFormatError(
                f"{path}: shape mismatch for entry {name!r}: file {entries[name].shape}, "
                f"config expects {table[name]}"
            )
    d_file = int(round(float(entries["mask.d"])))
    if d_file != config.patch_size:
        raise CheckpointFormatError(
            f"{path}: entry 'mask.d' is {d_file} but config patch_size is {config.patch_size}"
        )
    return ModelParams.from_dict(entries)
