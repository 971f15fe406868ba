"""Full model assembly: backbone -> projections -> scale token -> encoder -> head.

Three attention modes share one readout convention: the encoder (or its
substitute) produces [B, N, D], which is mean-pooled over patches and sent
through a single affine head.

  duo         scale blocks + patch attention each layer; classification
              reads the final patch-attention output (or, for the
              w/o-scale-token readouts, the token tensor after the final
              scale block).
  scale_only  scale blocks only; reads the scale-token slice.
  patch_only  plain pre-norm transformer over the deepest stage's N patch
              tokens (the hybrid-ViT baseline).
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import serialize
from .backbone import FeaturePyramid, ToyBackbone
from .attention import DuoEncoder, PatchEncoder
from .config import DuoFormerConfig, TrainConfig, parse_config, serialize_config
from .errors import ConfigError, ContractError, FormatError
from .layers import Linear, Module
from .rng import SeedStream
from .scale_token import FusedScaleToken, LearnableScaleToken, attach_scale_token
from .tensor import Tensor
from .tokenizer import scale_layout, tokenize

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _Projections(Module):
    """One [C_i, D] affine map per included stage, keyed `stage{i}`."""

    def __init__(self, stages, channels, embed_dim, stream, dtype):
        super().__init__()
        object.__setattr__(self, "stage_indices", tuple(sorted(stages)))
        for i in self.stage_indices:
            setattr(self, f"stage{i}",
                    Linear(channels[i], embed_dim, stream.child(f"stage{i}").generator(),
                           dtype=dtype))

    def as_dict(self):
        return {i: getattr(self, f"stage{i}") for i in self.stage_indices}


class DuoFormer(Module):
    def __init__(self, cfg: DuoFormerConfig):
        super().__init__()
        cfg.validate()
        object.__setattr__(self, "cfg", cfg)
        dtype = _DTYPES[cfg.dtype]
        stream = SeedStream(cfg.seed)
        stages = tuple(sorted(set(cfg.stages)))
        object.__setattr__(self, "stage_indices", stages)

        self.backbone = ToyBackbone(cfg.channels, stream.child("backbone"),
                                    last_stage=max(stages), dtype=dtype)

        if cfg.attention_mode == "patch_only":
            deepest = max(stages)
            self.proj = _Projections((deepest,), cfg.channels, cfg.embed_dim,
                                     stream.child("proj"), dtype)
            depth = cfg.patch_only_layers or cfg.layers
            self.encoder = PatchEncoder(cfg.embed_dim, cfg.heads, depth, cfg.patch_count,
                                        stream.child("encoder"), pos_patch=cfg.pos_patch,
                                        dtype=dtype)
        else:
            self.proj = _Projections(stages, cfg.channels, cfg.embed_dim,
                                     stream.child("proj"), dtype)
            layout = scale_layout(cfg.input_size, cfg.patch_count, stages)
            s = sum(count for _, _, count in layout)
            object.__setattr__(self, "token_count", s)
            if cfg.scale_token_mode == "fused":
                self.scale_token = FusedScaleToken(stages, cfg.channels, cfg.input_size,
                                                   cfg.patch_count, cfg.embed_dim,
                                                   stream.child("scale_token"), dtype=dtype)
            elif cfg.scale_token_mode == "learnable":
                self.scale_token = LearnableScaleToken(cfg.patch_count, cfg.embed_dim,
                                                       stream.child("scale_token"), dtype=dtype)
            scale_extent = s + (1 if cfg.scale_token_mode != "none" else 0)
            mode = "scale_only" if cfg.attention_mode == "scale_only" else "duo"
            self.encoder = DuoEncoder(cfg.embed_dim, cfg.heads, cfg.layers, scale_extent,
                                      cfg.patch_count, stream.child("encoder"), mode=mode,
                                      readout=cfg.readout, pos_scale=cfg.pos_scale,
                                      pos_patch=cfg.pos_patch, dtype=dtype)

        self.head = Linear(cfg.embed_dim, cfg.num_classes, stream.child("head").generator(),
                           dtype=dtype)

    # ---- forward ----------------------------------------------------------------

    def pyramid_from(self, images: "Tensor | None", pyramid: "FeaturePyramid | None"):
        if (images is None) == (pyramid is None):
            raise ContractError("provide exactly one of images or pyramid")
        if pyramid is None:
            return self.backbone(images, stages=self.stage_indices)
        if pyramid.input_size != self.cfg.input_size:
            raise ConfigError(f"pyramid input_size {pyramid.input_size} != configured "
                              f"{self.cfg.input_size}")
        missing = [s for s in self.stage_indices if s not in pyramid.stage_indices]
        if missing:
            raise ConfigError(f"pyramid lacks configured stages {missing}")
        return pyramid

    def forward(self, images: "Tensor | None" = None,
                pyramid: "FeaturePyramid | None" = None) -> Tensor:
        cfg = self.cfg
        pyramid = self.pyramid_from(images, pyramid)
        if cfg.attention_mode == "patch_only":
            deepest = max(self.stage_indices)
            feat = self.proj.as_dict()[deepest](pyramid.stage(deepest))  # [B, g, g, D]
            b, g, _, d = feat.shape
            x = self.encoder(feat.reshape((b, g * g, d)))
        else:
            projected = [(i, self.proj.as_dict()[i](pyramid.stage(i)))
                         for i in self.stage_indices]
            mst = tokenize(projected, cfg.patch_count, cfg.input_size)
            if cfg.scale_token_mode == "fused":
                mst = attach_scale_token(mst, self.scale_token(pyramid))
            elif cfg.scale_token_mode == "learnable":
                mst = attach_scale_token(mst, self.scale_token(batch=pyramid.batch))
            x = self.encoder(mst.tokens)
        return self.head(x.mean(axis=1))  # [B, N, D] -> [B, D] -> logits


def count_parameters(model: DuoFormer) -> "OrderedDict[str, int]":
    """Trainable scalar counts per top-level component, plus 'total'."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        group = name.split(".", 1)[0]
        out[group] = out.get(group, 0) + p.size
    out["total"] = sum(out.values())
    return out


# ---- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: DuoFormer, train_cfg: "TrainConfig | None" = None) -> None:
    """DFC1 with every parameter/state tensor plus a `config` text entry."""
    entries = OrderedDict(model.state_dict())
    tc = train_cfg if train_cfg is not None else TrainConfig(seed=model.cfg.seed)
    entries["config"] = serialize.text_to_array(serialize_config(model.cfg, tc))
    serialize.save_tensors(path, entries)


def load_checkpoint(path) -> "tuple[DuoFormer, TrainConfig]":
    """Rebuild the model from the embedded config, then restore all tensors."""
    entries = serialize.load_tensors(path)
    if "config" not in entries:
        raise FormatError("checkpoint lacks a 'config' entry")
    text = serialize.array_to_text(entries.pop("config"))
    model_cfg, train_cfg = parse_config(text)
    model = DuoFormer(model_cfg)
    model.load_state_dict(entries)
    return model, train_cfg
