"""Scale/patch dual attention.

A duo layer runs (1) a pre-norm MSA+FFN block over the scale axis,
independently per patch, and (2) a bare MSA — no LN, FFN, or residual —
over the patch axis on the scale-token slice. The patch-attention output
is written back into scale index 0, so the next layer's scale attention
sees patch-level context through that single conduit.

When the readout consumes the token tensor itself (first_token,
avg_tokens, scale_attn_only_fc) the final layer needs no patch attention
and none is created.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .layers import LayerNorm, Linear, Module
from .tensor import Tensor
from .tokenizer import MultiScaleTokens

READOUTS = ("scale_token_patch_attn", "first_token", "avg_tokens", "scale_attn_only_fc")
ATTENTION_MODES = ("duo", "scale_only", "patch_only")


class MSA(Module):
    """Multi-head self-attention over the second-to-last axis.

    Heads are contiguous slices of the fused qkv projection; scores scale
    by 1/sqrt(D/h). All leading axes are batch.
    """

    def __init__(self, embed_dim: int, heads: int, stream, dtype=np.float32):
        super().__init__()
        if embed_dim % heads:
            raise ConfigError(f"embed dim {embed_dim} not divisible by {heads} heads")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "head_dim", embed_dim // heads)
        self.qkv = Linear(embed_dim, 3 * embed_dim, stream.child("qkv").generator(), dtype=dtype)
        self.proj = Linear(embed_dim, embed_dim, stream.child("proj").generator(), dtype=dtype)

    def forward(self, x: Tensor, return_attn: bool = False):
        *lead, t, d = x.shape
        h, dh = self.heads, self.head_dim
        if d != h * dh:
            raise DimensionError(f"token dim {d} does not match configured {h * dh}")
        b = int(np.prod(lead)) if lead else 1
        x2 = x.reshape((b, t, d))
        qkv = self.qkv(x2)
        q = qkv[:, :, 0 * d:1 * d].reshape((b, t, h, dh)).transpose((0, 2, 1, 3))
        k = qkv[:, :, 1 * d:2 * d].reshape((b, t, h, dh)).transpose((0, 2, 1, 3))
        v = qkv[:, :, 2 * d:3 * d].reshape((b, t, h, dh)).transpose((0, 2, 1, 3))
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)  # [b, h, t, t]
        out = T.matmul(attn, v).transpose((0, 2, 1, 3)).reshape((b, t, d))
        out = self.proj(out).reshape(tuple(lead) + (t, d))
        if return_attn:
            return out, attn.data.reshape(tuple(lead) + (h, t, t))
        return out


class FFN(Module):
    """linear -> GELU -> linear with hidden width 4D."""

    def __init__(self, embed_dim: int, stream, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(embed_dim, 4 * embed_dim, stream.child("fc1").generator(), dtype=dtype)
        self.fc2 = Linear(4 * embed_dim, embed_dim, stream.child("fc2").generator(), dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class DuoLayer(Module):
    """One scale-attention block plus (optionally) one patch attention."""

    def __init__(self, embed_dim: int, heads: int, stream, with_patch: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(embed_dim, dtype=dtype)
        self.scale = MSA(embed_dim, heads, stream.child("scale"), dtype=dtype)
        self.ln2 = LayerNorm(embed_dim, dtype=dtype)
        self.ffn = FFN(embed_dim, stream.child("ffn"), dtype=dtype)
        if with_patch:
            self.patch = MSA(embed_dim, heads, stream.child("patch"), dtype=dtype)
        object.__setattr__(self, "with_patch", with_patch)

    def scale_block(self, x: Tensor) -> Tensor:
        """Pre-norm block over the scale axis of [B, S(+1), N, D]."""
        xt = x.transpose((0, 2, 1, 3))  # patches become batch
        y = xt + self.scale(self.ln1(xt))
        y = y + self.ffn(self.ln2(y))
        return y.transpose((0, 2, 1, 3))

    def patch_attention(self, scale_tokens: Tensor) -> Tensor:
        """Bare MSA over the patch axis: no LN, no FFN, no residual."""
        if not self.with_patch:
            raise ContractError("this layer was built without patch attention")
        return self.patch(scale_tokens)

    def forward(self, x):  # a lone layer acts as its scale block
        return self.scale_block(x)


def scale_attention_block(layer: DuoLayer, tokens: MultiScaleTokens) -> MultiScaleTokens:
    """Scale block over a token bundle; requires the scale token at index 0."""
    if not tokens.has_scale_token:
        raise ContractError("scale attention block expects a scale token at index 0")
    return MultiScaleTokens(tokens=layer.scale_block(tokens.tokens),
                            scale_layout=tokens.scale_layout, has_scale_token=True)


def patch_attention(layer: DuoLayer, scale_tokens: Tensor) -> Tensor:
    return layer.patch_attention(scale_tokens)


class DuoEncoder(Module):
    """L stacked duo layers over [B, S(+1), N, D] -> readout [B, N, D].

    scale_pos is added once before layer 1; patch_pos is added to the
    conduit entering the first patch attention. Both are zero-initialized
    and optional.
    """

    def __init__(self, embed_dim: int, heads: int, layers: int, scale_extent: int,
                 n_patches: int, stream, mode: str = "duo",
                 readout: str = "scale_token_patch_attn",
                 pos_scale: bool = True, pos_patch: bool = True, dtype=np.float32):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"encoder needs layers >= 1, got {layers}")
        if mode not in ("duo", "scale_only"):
            raise ConfigError(f"encoder mode must be duo or scale_only, got {mode!r}")
        object.__setattr__(self, "layer_count", layers)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "readout", readout)
        patch_layers = 0
        if mode == "duo":
            patch_layers = layers if readout == "scale_token_patch_attn" else layers - 1
        object.__setattr__(self, "patch_layers", patch_layers)
        for i in range(layers):
            setattr(self, f"layer{i}",
                    DuoLayer(embed_dim, heads, stream.child(f"layer{i}"),
                             with_patch=i < patch_layers, dtype=dtype))
        if pos_scale:
            self.scale_pos = Tensor(np.zeros((scale_extent, embed_dim), dtype=dtype),
                                    requires_grad=True)
        else:
            object.__setattr__(self, "scale_pos", None)
        if pos_patch and patch_layers > 0:
            self.patch_pos = Tensor(np.zeros((n_patches, embed_dim), dtype=dtype),
                                    requires_grad=True)
        else:
            object.__setattr__(self, "patch_pos", None)

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.layer_count)]

    def forward(self, x: Tensor) -> Tensor:
        b, s, n, d = x.shape
        if self.scale_pos is not None:
            if self.scale_pos.shape[0] != s:
                raise DimensionError(
                    f"scale extent {s} does not match positional table {self.scale_pos.shape}")
            x = x + self.scale_pos.reshape((1, s, 1, d))
        out = None
        patch_seen = False
        for i, layer in enumerate(self.layers()):
            x = layer.scale_block(x)
            if not layer.with_patch:
                continue
            conduit = x[:, 0]  # [B, N, D]
            if self.patch_pos is not None and not patch_seen:
                conduit = conduit + self.patch_pos
                patch_seen = True
            out = layer.patch_attention(conduit)
            if i + 1 < self.layer_count:
                x = T.concat([out.reshape((b, 1, n, d)), x[:, 1:]], axis=1)
        if self.readout == "scale_token_patch_attn":
            return out
        if self.readout in ("first_token", "scale_attn_only_fc"):
            return x[:, 0]
        if self.readout == "avg_tokens":
            return x.mean(axis=1)
        raise ConfigError(f"unknown readout {self.readout!r}")


class TransformerBlock(Module):
    """Standard pre-norm block (both residuals, LN, FFN) over the token axis."""

    def __init__(self, embed_dim: int, heads: int, stream, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(embed_dim, dtype=dtype)
        self.attn = MSA(embed_dim, heads, stream.child("attn"), dtype=dtype)
        self.ln2 = LayerNorm(embed_dim, dtype=dtype)
        self.ffn = FFN(embed_dim, stream.child("ffn"), dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class PatchEncoder(Module):
    """Plain ViT-style encoder over [B, N, D] (the hybrid baseline)."""

    def __init__(self, embed_dim: int, heads: int, layers: int, n_patches: int,
                 stream, pos_patch: bool = True, dtype=np.float32):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"encoder needs layers >= 1, got {layers}")
        object.__setattr__(self, "layer_count", layers)
        for i in range(layers):
            setattr(self, f"layer{i}",
                    TransformerBlock(embed_dim, heads, stream.child(f"layer{i}"), dtype=dtype))
        if pos_patch:
            self.pos = Tensor(np.zeros((n_patches, embed_dim), dtype=dtype), requires_grad=True)
        else:
            object.__setattr__(self, "pos", None)

    def forward(self, x: Tensor) -> Tensor:
        if self.pos is not None:
            x = x + self.pos
        for i in range(self.layer_count):
            x = getattr(self, f"layer{i}")(x)
        return x
