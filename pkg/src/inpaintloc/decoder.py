"""Decoders from a frozen feature grid to a full-resolution logit map.

Three families share one contract, ``(B, D, H, W) -> (B, 1, 16H, 16W)``:

* ``linear``: a 1x1 convolution D -> 1, bilinearly upsampled x16;
* ``attention``: two pre-norm transformer blocks over the token grid, a
  per-token projection to one channel, then x16 bilinear upsampling;
* ``conv``: four blocks of M (5x5 conv, batch norm, ReLU) sub-blocks, each
  block followed by x2 bilinear upsampling, then a final 5x5 conv to one
  channel. The first sub-block of each block halves the channel count.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .data import DimensionMismatchError, PathLike, ValidationError

NAMED_DECODERS = {
    "linear": ("linear", 1),
    "attention": ("attention", 1),
    "conv-4": ("conv", 1),
    "conv-12": ("conv", 3),
    "conv-20": ("conv", 5),
}
KINDS = ("linear", "attention", "conv")
N_STAGES = 4
UPSCALE = 2 ** N_STAGES
CHECKPOINT_FORMAT = "inpaintloc-checkpoint/1"


@dataclass(frozen=True)
class DecoderSpec:
    kind: str
    input_dim: int
    input_grid: tuple[int, int] = (16, 16)
    sub_blocks: int = 1
    attn_blocks: int = 2
    attn_heads: int = 16
    attn_hidden: int = 1024
    attn_mlp: int = 4096
    init_seed: int = 0
    zero_init_final: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_grid", tuple(int(v) for v in self.input_grid))
        if self.kind not in KINDS:
            raise ValidationError(f"unsupported decoder kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim <= 0:
            raise ValidationError("input_dim must be positive")
        if min(self.input_grid) <= 0:
            raise ValidationError("input grid must be non-empty")
        if self.kind == "conv":
            if self.sub_blocks < 1:
                raise ValidationError(f"conv decoder needs at least one sub-block per block, got {self.sub_blocks}")
            if self.input_dim % UPSCALE:
                raise ValidationError(f"conv decoder input_dim must be divisible by {UPSCALE}")
        if self.kind == "attention" and self.attn_hidden % self.attn_heads:
            raise ValidationError("attention hidden size must be divisible by the head count")

    @classmethod
    def named(cls, name: str, input_dim: int, input_grid=(16, 16), **kw) -> "DecoderSpec":
        if name not in NAMED_DECODERS:
            raise ValidationError(f"unknown decoder {name!r}; expected one of {sorted(NAMED_DECODERS)}")
        kind, m = NAMED_DECODERS[name]
        return cls(kind=kind, input_dim=input_dim, input_grid=tuple(input_grid), sub_blocks=m, **kw)

    @property
    def name(self) -> str:
        if self.kind == "conv":
            return f"conv-{N_STAGES * self.sub_blocks}"
        return self.kind

    @property
    def output_size(self) -> tuple[int, int]:
        return (self.input_grid[0] * UPSCALE, self.input_grid[1] * UPSCALE)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_grid"] = list(self.input_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        return cls(**d)


def channel_schedule(spec: DecoderSpec) -> list[tuple[int, int]]:
    """(in, out) channels of every conv layer, final projection included."""
    if spec.kind == "linear":
        return [(spec.input_dim, 1)]
    if spec.kind == "attention":
        return [(spec.attn_hidden, 1)]
    pairs = []
    c = spec.input_dim
    for _ in range(N_STAGES):
        pairs.append((c, c // 2))
        c //= 2
        pairs.extend([(c, c)] * (spec.sub_blocks - 1))
    pairs.append((c, 1))
    return pairs


def sub_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 5, padding=2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, sub_blocks: int):
        super().__init__()
        cout = cin // 2
        self.body = nn.Sequential(sub_block(cin, cout), *[sub_block(cout, cout) for _ in range(sub_blocks - 1)])
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x):
        return self.up(self.body(x))


class ConvDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        c = spec.input_dim
        blocks = []
        for _ in range(N_STAGES):
            blocks.append(DecoderBlock(c, spec.sub_blocks))
            c //= 2
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(c, 1, 5, padding=2)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.final(x)


class LinearDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        self.final = nn.Conv2d(spec.input_dim, 1, 1)

    def forward(self, x):
        return F.interpolate(self.final(x), scale_factor=UPSCALE, mode="bilinear", align_corners=False)


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp), nn.GELU(), nn.Linear(mlp, dim))

    def forward(self, x):
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln_2(x))


class AttentionDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        hidden = spec.attn_hidden
        n_tokens = spec.input_grid[0] * spec.input_grid[1]
        self.input_proj = nn.Linear(spec.input_dim, hidden) if spec.input_dim != hidden else nn.Identity()
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, hidden))
        self.blocks = nn.Sequential(*[
            AttentionBlock(hidden, spec.attn_heads, spec.attn_mlp) for _ in range(spec.attn_blocks)
        ])
        self.norm = nn.LayerNorm(hidden)
        self.final = nn.Linear(hidden, 1)

    def forward(self, x):
        b, _, h, w = x.shape
        tokens = self.input_proj(x.flatten(2).transpose(1, 2)) + self.pos_embed
        tokens = self.norm(self.blocks(tokens))
        logits = self.final(tokens).transpose(1, 2).reshape(b, 1, h, w)
        return F.interpolate(logits, scale_factor=UPSCALE, mode="bilinear", align_corners=False)


_CLASSES = {"conv": ConvDecoder, "linear": LinearDecoder, "attention": AttentionDecoder}


def _init_weights(model: nn.Module, spec: DecoderSpec):
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if isinstance(model, AttentionDecoder):
        nn.init.trunc_normal_(model.pos_embed, std=0.02)
    final = model.final
    if spec.zero_init_final:
        nn.init.zeros_(final.weight)
    elif isinstance(final, nn.Conv2d):
        nn.init.kaiming_normal_(final.weight, mode="fan_in", nonlinearity="linear")
    nn.init.zeros_(final.bias)


def build_decoder(spec: DecoderSpec) -> nn.Module:
    """Instantiate the decoder for ``spec`` with a seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        model = _CLASSES[spec.kind](spec)
        _init_weights(model, spec)
    model.channel_schedule = channel_schedule(spec)
    return model


def count_parameters(spec: DecoderSpec) -> int:
    """Exact trainable parameter count, computed on a meta-device build."""
    with torch.device("meta"):
        model = _CLASSES[spec.kind](spec)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward(model: nn.Module, features: torch.Tensor) -> torch.Tensor:
    spec = model.spec
    if features.ndim != 4:
        raise DimensionMismatchError(f"features must be (B, D, H, W), got {tuple(features.shape)}")
    if features.shape[1] != spec.input_dim:
        raise DimensionMismatchError(f"decoder expects {spec.input_dim} channels, got {features.shape[1]}")
    if spec.kind == "attention" and tuple(features.shape[-2:]) != spec.input_grid:
        raise DimensionMismatchError(f"attention decoder is fixed to a {spec.input_grid} grid")
    return model(features)


# --- checkpoint archives ----------------------------------------------------

def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_archive(path: PathLike, state_dict: dict, metadata: dict) -> Path:
    """Zip with ``metadata.json`` and ``weights.pt``; written to a temp file, then renamed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state_dict.items()}, buf)
    meta = {"format": CHECKPOINT_FORMAT, **metadata}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True, default=str))
        zf.writestr("weights.pt", buf.getvalue())
    os.replace(tmp, path)
    return path


def load_archive(path: PathLike) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("metadata.json"))
            state = torch.load(io.BytesIO(zf.read("weights.pt")), map_location="cpu", weights_only=True)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ValidationError(f"{path} is not a valid checkpoint archive: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return state, meta


def save_decoder_checkpoint(path: PathLike, model: nn.Module, **metadata) -> Path:
    meta = {
        "kind": "decoder",
        "decoder": model.spec.to_dict(),
        "channel_schedule": [list(p) for p in channel_schedule(model.spec)],
        "parameters": sum(p.numel() for p in model.parameters()),
        **metadata,
    }
    return save_archive(path, model.state_dict(), meta)


def load_decoder_checkpoint(path: PathLike) -> tuple[nn.Module, dict]:
    state, meta = load_archive(path)
    if meta.get("kind") != "decoder":
        raise ValidationError(f"{path} does not hold a localization decoder")
    model = build_decoder(DecoderSpec.from_dict(meta["decoder"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
