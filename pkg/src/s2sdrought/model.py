"""CrossFormer encoder/decoder emulator.

The network maps an assembled input state ``[B, C_in, H, W]`` to next-day
outputs ``[B, C_out, H, W]``.  Each encoder stage is a cross-scale embedding
(parallel strided convolutions at several kernel sizes) followed by
pre-norm residual short-distance (windowed) and long-distance (dilated)
attention, each with its own feed-forward unit.  The decoder upsamples by
pixel shuffle (or transposed convolution / bilinear interpolation), fuses
skip connections from every encoder stage except the last, and finishes
with a 1x1 convolution head.

Parameters live in a flat ``{path: Tensor}`` map so that checkpointing and
optimizers stay generic.
"""
from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .catalog import DEFAULT_CATALOG, VariableCatalog
from .tensor import Tensor, concat_channels, matmul, reshape, transpose


class UpsampleMethod(str, enum.Enum):
    PIXEL_SHUFFLE = "pixel_shuffle"
    TRANSPOSE = "transpose"
    INTERPOLATE = "interpolate"


@dataclass
class ModelConfig:
    in_channels: int = 25
    out_channels: int = 23
    block_dims: tuple = (128, 256, 512, 1024)
    heads_per_block: tuple = (4, 8, 16, 32)
    sda_group: int = 5
    lda_intervals: tuple = (2, 2, 2, 1)
    embed_kernels_block1: tuple = (4, 8, 16, 32)
    embed_kernels_later: tuple = (2, 4)
    depths: tuple = (2, 2, 18, 2)  # SDA + LDA sublayer pairs per stage
    ff_expansion: int = 4
    dropout: float = 0.05
    use_spectral_norm: bool = True
    upsample_method: str = UpsampleMethod.PIXEL_SHUFFLE.value
    first_stride: int = 4
    later_stride: int = 2

    def __post_init__(self):
        if isinstance(self.depths, int):
            self.depths = (self.depths,) * len(self.block_dims)
        for name in ("block_dims", "heads_per_block", "lda_intervals", "depths", "embed_kernels_block1", "embed_kernels_later"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.upsample_method = UpsampleMethod(self.upsample_method).value
        self.validate()

    def validate(self):
        n = self.n_stages
        if not len(self.heads_per_block) == len(self.lda_intervals) == len(self.depths) == n:
            raise ValueError("block_dims, heads_per_block, lda_intervals and depths must have equal length")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(self.block_dims, self.block_dims[1:])):
            raise ValueError(f"block_dims must be non-decreasing, got {self.block_dims}")
        for d, h in zip(self.block_dims, self.heads_per_block):
            if h < 1 or d % h:
                raise ValueError(f"head count {h} does not divide dim {d}")
        if self.sda_group < 1 or any(i < 1 for i in self.lda_intervals):
            raise ValueError("attention group and intervals must be positive")
        if any(d < 1 for d in self.depths) or self.ff_expansion < 1:
            raise ValueError("depth and ff_expansion must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if n:
            _embed_shares(self.block_dims[0], self.embed_kernels_block1)
            for d in self.block_dims[1:]:
                _embed_shares(d, self.embed_kernels_later)

    @property
    def n_stages(self) -> int:
        return len(self.block_dims)

    @property
    def downsampling(self) -> int:
        """Total spatial reduction between the input and the deepest stage."""
        if not self.n_stages:
            return 1
        return self.first_stride * self.later_stride ** (self.n_stages - 1)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides):
        """Smallest useful configuration (widths 8/16/32/64), for gradient and plumbing tests."""
        base = dict(block_dims=(8, 16, 32, 64), heads_per_block=(1, 2, 4, 8), depths=(1, 1, 1, 1))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides):
        """Width-64 variant of :meth:`tiny` for the synthetic training recipe.

        Stage-1 width 8 cannot represent 23 output channels (the head is rank
        limited), so rollouts from ``tiny`` stay far from climatology skill.
        """
        base = dict(block_dims=(64, 64, 64, 64), heads_per_block=(4, 4, 4, 4), depths=(1, 1, 1, 1))
        base.update(overrides)
        return cls(**base)


def _embed_shares(out_dim: int, kernels) -> list[int]:
    """Channel share per kernel; larger kernels get halving shares, the smallest the rest."""
    kernels = sorted(kernels)
    if out_dim < len(kernels):
        raise ValueError(f"out_dim {out_dim} smaller than the number of kernels {len(kernels)}")
    shares = [max(out_dim // 2 ** (i + 1), 1) for i in range(1, len(kernels))]
    rest = out_dim - sum(shares)
    if rest < 1:
        raise ValueError(f"cannot split {out_dim} channels across kernels {kernels}")
    return [rest] + shares


# -- parameter layout ------------------------------------------------------------


def _linear(prefix, n_in, n_out):
    return [(f"{prefix}.w", (n_in, n_out)), (f"{prefix}.b", (n_out,))]


def _conv(prefix, c_out, c_in, k):
    return [(f"{prefix}.w", (c_out, c_in, k, k)), (f"{prefix}.b", (c_out,))]


def _norm(prefix, d):
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _upsample(prefix, c_in, c_out, r, method):
    if method == UpsampleMethod.PIXEL_SHUFFLE.value:
        return _conv(f"{prefix}.expand", c_out * r * r, c_in, 1)
    if method == UpsampleMethod.TRANSPOSE.value:
        return [(f"{prefix}.tconv.w", (c_in, c_out, 2 * r, 2 * r)), (f"{prefix}.tconv.b", (c_out,))]
    return _conv(f"{prefix}.proj", c_out, c_in, 1)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Ordered ``{path: shape}`` for every learnable tensor of ``config``."""
    out = []
    c_in = config.in_channels
    dims = config.block_dims
    for s, d in enumerate(dims):
        kernels = config.embed_kernels_block1 if s == 0 else config.embed_kernels_later
        for k, share in zip(sorted(kernels), _embed_shares(d, kernels)):
            out += _conv(f"stage{s}.embed.k{k}", share, c_in, k)
        hidden = d * config.ff_expansion
        for j in range(config.depths[s]):
            for unit in ("sda", "lda"):
                p = f"stage{s}.layer{j}.{unit}"
                out += _norm(f"{p}.norm", d)
                out += _linear(f"{p}.qkv", d, 3 * d)
                out += _linear(f"{p}.proj", d, d)
                out += _norm(f"{p}.ff_norm", d)
                out += _linear(f"{p}.ff1", d, hidden)
                out += _linear(f"{p}.ff2", hidden, d)
        c_in = d
    for s in range(len(dims) - 1, 0, -1):
        out += _upsample(f"up{s}", dims[s], dims[s - 1], 2, config.upsample_method)
        out += _conv(f"up{s}.fuse", dims[s - 1], 2 * dims[s - 1], 3)
    if dims:
        out += _upsample("final", dims[0], dims[0], config.first_stride, config.upsample_method)
    out += _conv("head", config.out_channels, c_in if not dims else dims[0], 1)
    return OrderedDict(out)


def count_parameters(config: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(config).values()))


def _is_matrix(name: str, shape) -> bool:
    return name.endswith(".w") and len(shape) >= 2


# -- attention ---------------------------------------------------------------------


def multi_head_attention(tokens: Tensor, qkv_w, qkv_b, proj_w, proj_b, heads: int, dropout=0.0, training=False, rng=None):
    """Self-attention over ``tokens[N, L, D]``, independently for each of the N groups."""
    n, length, d = tokens.shape
    if d % heads:
        raise ValueError(f"{heads} heads do not divide width {d}")
    dh = d // heads
    qkv = matmul(tokens, qkv_w) + qkv_b  # [N, L, 3D]
    qkv = transpose(reshape(qkv, (n, length, 3, heads, dh)), (2, 0, 3, 1, 4))  # [3, N, H, L, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = nn.dropout(nn.softmax(scores), dropout, training, rng)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))  # [N, L, H, dh]
    return matmul(reshape(out, (n, length, d)), proj_w) + proj_b


def _pad_to_multiple(x: Tensor, mh: int, mw: int, axes=(1, 2)):
    h, w = x.shape[axes[0]], x.shape[axes[1]]
    ph, pw = -h % mh, -w % mw
    if ph or pw:
        x = nn.pad_axes(x, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), axes, strict=False)
    return x, (ph // 2, pw // 2)


def _crop_tokens(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    if x.shape[1] == h and x.shape[2] == w:
        return x
    return x[:, top : top + h, left : left + w, :]


def window_partition(x: Tensor, gh: int, gw: int) -> Tensor:
    """``[B, H, W, D]`` -> ``[B*nh*nw, gh*gw, D]`` of contiguous windows."""
    b, h, w, d = x.shape
    y = reshape(x, (b, h // gh, gh, w // gw, gw, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b * (h // gh) * (w // gw), gh * gw, d))


def window_merge(t: Tensor, b: int, h: int, w: int, gh: int, gw: int) -> Tensor:
    d = t.shape[-1]
    y = reshape(t, (b, h // gh, w // gw, gh, gw, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, h, w, d))


def dilated_partition(x: Tensor, ih: int, iw: int) -> Tensor:
    """``[B, H, W, D]`` -> ``[B*ih*iw, (H/ih)*(W/iw), D]`` grouping sites by (row mod ih, col mod iw)."""
    b, h, w, d = x.shape
    y = reshape(x, (b, h // ih, ih, w // iw, iw, d))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (b * ih * iw, (h // ih) * (w // iw), d))


def dilated_merge(t: Tensor, b: int, h: int, w: int, ih: int, iw: int) -> Tensor:
    d = t.shape[-1]
    y = reshape(t, (b, ih, iw, h // ih, w // iw, d))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (b, h, w, d))


def _grouped_attention(x: Tensor, size: int, dilated: bool, attn_fn) -> Tensor:
    """Apply ``attn_fn`` to window (or dilated) groups of channel-last ``x[B,H,W,D]``."""
    b, h, w, _ = x.shape
    gh, gw = min(size, h), min(size, w)
    xp, (top, left) = _pad_to_multiple(x, gh, gw)
    hp, wp = xp.shape[1:3]
    if dilated:
        out = dilated_merge(attn_fn(dilated_partition(xp, gh, gw)), b, hp, wp, gh, gw)
    else:
        out = window_merge(attn_fn(window_partition(xp, gh, gw)), b, hp, wp, gh, gw)
    return _crop_tokens(out, top, left, h, w)


def short_distance_attention(x: Tensor, group: int, attn_fn) -> Tensor:
    """Attention within non-overlapping ``group x group`` windows of ``x[B,H,W,D]``."""
    return _grouped_attention(x, group, False, attn_fn)


def long_distance_attention(x: Tensor, interval: int, attn_fn) -> Tensor:
    """Attention among sites sharing (row mod interval, col mod interval)."""
    return _grouped_attention(x, interval, True, attn_fn)


# -- the network ----------------------------------------------------------------------


class CrossFormer:
    """Parameters, spectral-norm state and the forward pass."""

    def __init__(self, config: ModelConfig | None = None, catalog: VariableCatalog | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.catalog = catalog or DEFAULT_CATALOG
        if catalog is not None:
            if (self.config.in_channels, self.config.out_channels) != (self.catalog.n_inputs, self.catalog.n_outputs):
                raise ValueError(
                    f"config channels {(self.config.in_channels, self.config.out_channels)} do not match "
                    f"catalog {(self.catalog.n_inputs, self.catalog.n_outputs)}"
                )
        rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in parameter_shapes(self.config).items():
            self.params[name] = Tensor(_init_value(name, shape, rng), requires_grad=True)
        self.sn_state: dict[str, nn.PowerIterState] = {}
        if self.config.use_spectral_norm:
            for name, p in self.params.items():
                if _is_matrix(name, p.shape):
                    self.sn_state[name] = nn.PowerIterState.init(p.shape, rng, p.data, n_iter=15)

    # -- bookkeeping --------------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def count_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _weight(self, name: str, training: bool) -> Tensor:
        p = self.params[name]
        state = self.sn_state.get(name)
        if state is None:
            return p
        return nn.spectral_normalize(p, state, update=training)

    # -- layers ---------------------------------------------------------------------

    def _conv(self, prefix, x, training, stride=1):
        return nn.conv2d(x, self._weight(f"{prefix}.w", training), self.params[f"{prefix}.b"], stride=stride)

    def _embed(self, s, x, training):
        cfg = self.config
        kernels = sorted(cfg.embed_kernels_block1 if s == 0 else cfg.embed_kernels_later)
        stride = cfg.first_stride if s == 0 else cfg.later_stride
        parts = [self._conv(f"stage{s}.embed.k{k}", x, training, stride) for k in kernels]
        return concat_channels(parts) if len(parts) > 1 else parts[0]

    def _linear(self, prefix, x, training):
        return matmul(x, self._weight(f"{prefix}.w", training)) + self.params[f"{prefix}.b"]

    def _norm(self, prefix, x):
        return nn.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention_fn(self, prefix, heads, training, rng):
        p = self.params

        def attn(tokens):
            return multi_head_attention(
                tokens,
                self._weight(f"{prefix}.qkv.w", training),
                p[f"{prefix}.qkv.b"],
                self._weight(f"{prefix}.proj.w", training),
                p[f"{prefix}.proj.b"],
                heads,
                self.config.dropout,
                training,
                rng,
            )

        return attn

    def _feed_forward(self, prefix, x, training, rng):
        h = nn.gelu(self._linear(f"{prefix}.ff1", self._norm(f"{prefix}.ff_norm", x), training))
        h = nn.dropout(h, self.config.dropout, training, rng)
        return self._linear(f"{prefix}.ff2", h, training)

    def _stage(self, s, x, training, rng):
        """Embedding plus attention sublayers of encoder stage ``s`` on ``[B,C,H,W]``."""
        cfg = self.config
        x = self._embed(s, x, training)
        t = transpose(x, (0, 2, 3, 1))  # channel-last tokens
        heads = cfg.heads_per_block[s]
        for j in range(cfg.depths[s]):
            p = f"stage{s}.layer{j}.sda"
            t = t + short_distance_attention(self._norm(f"{p}.norm", t), cfg.sda_group, self._attention_fn(p, heads, training, rng))
            t = t + self._feed_forward(p, t, training, rng)
            p = f"stage{s}.layer{j}.lda"
            t = t + long_distance_attention(self._norm(f"{p}.norm", t), cfg.lda_intervals[s], self._attention_fn(p, heads, training, rng))
            t = t + self._feed_forward(p, t, training, rng)
        return transpose(t, (0, 3, 1, 2))

    def _upsample(self, prefix, x, r, training):
        method = self.config.upsample_method
        if method == UpsampleMethod.PIXEL_SHUFFLE.value:
            return nn.pixel_shuffle(self._conv(f"{prefix}.expand", x, training), r)
        if method == UpsampleMethod.TRANSPOSE.value:
            w = self._weight(f"{prefix}.tconv.w", training)
            return nn.conv_transpose2d(x, w, self.params[f"{prefix}.tconv.b"], stride=r, padding=r // 2)
        return self._conv(f"{prefix}.proj", nn.upsample_bilinear(x, r), training)

    def decoder_up_block(self, s, x, skip, training=False):
        """Upsample stage-``s`` features 2x, join the skip, fuse with a 3x3 conv."""
        y = self._upsample(f"up{s}", x, 2, training)
        y = concat_channels([y, skip])
        return nn.gelu(self._conv(f"up{s}.fuse", y, training))

    # -- forward --------------------------------------------------------------------

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Map ``[B, C_in, H, W]`` (or unbatched ``[C_in, H, W]``) to the output stack."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise ValueError(f"expected [C,H,W] or [B,C,H,W] input, got {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")
        h, w = x.shape[-2:]
        f = cfg.downsampling
        xp, (top, left) = _pad_to_multiple(x, f, f, axes=(2, 3))

        feats = []
        y = xp
        for s in range(cfg.n_stages):
            y = self._stage(s, y, training, rng)
            feats.append(y)
        for s in range(cfg.n_stages - 1, 0, -1):
            y = self.decoder_up_block(s, y, feats[s - 1], training)
        if cfg.n_stages:
            y = nn.gelu(self._upsample("final", y, cfg.first_stride, training))
        out = self._conv("head", y, training)
        if out.shape[-2:] != (h, w):
            out = nn.crop2d(out, top, left, h, w)
        return reshape(out, out.shape[1:]) if squeeze else out

    __call__ = forward

    # -- state ------------------------------------------------------------------------

    def state_arrays(self):
        """Parameter values and power-iteration vectors as plain arrays."""
        out = OrderedDict((k, p.data) for k, p in self.params.items())
        for k, st in self.sn_state.items():
            out[f"{k}#u"] = st.u
            out[f"{k}#v"] = st.v
        return out

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {p.shape}")
            p.data = a.copy()
        for k, st in self.sn_state.items():
            st.u = np.array(arrays[f"{k}#u"], dtype=np.float64)
            st.v = np.array(arrays[f"{k}#v"], dtype=np.float64)


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape)
    if not _is_matrix(name, shape):
        return np.zeros(shape)
    if ".tconv." in name:
        fan_in = shape[0] * shape[2] * shape[3] // 4
    elif len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)), size=shape)
