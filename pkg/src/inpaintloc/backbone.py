"""Frozen CLIP image encoders and intermediate feature taps.

Both CLIP visual towers are rebuilt here with the parameter names of the
released OpenAI checkpoints, so ``ViT-L-14.pt`` / ``RN50.pt`` (TorchScript
archives or plain state dicts) load directly. Without a checkpoint the
towers are initialised from a fixed seed, which keeps every shape, the
freezing contract and the training code exercisable offline.

Feature grids are tensors laid out ``(batch, dim, height, width)``.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import struct
import warnings
import zipfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .data import PathLike, ValidationError

log = logging.getLogger(__name__)

INPUT_RESOLUTION = 224
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

FAMILIES = ("vit_l14", "resnet50")
MAX_LAYER = {"vit_l14": 24, "resnet50": 4}
DEFAULT_INIT_SEED = 0


class LayerOutOfRangeError(ValidationError):
    pass


class ChecksumMismatchError(ValidationError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Which frozen encoder to tap, and at what depth.

    ``layer`` counts transformer blocks (1..24) for ViT-L/14 and residual
    stages (1..4) for ResNet-50. ``checkpoint_path=None`` means a seeded
    random initialisation.
    """

    family: str
    layer: int
    checkpoint_path: Optional[str] = None
    expected_digest: Optional[str] = None
    init_seed: int = DEFAULT_INIT_SEED

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        hi = MAX_LAYER[self.family]
        if not isinstance(self.layer, int) or not 1 <= self.layer <= hi:
            raise LayerOutOfRangeError(f"{self.family} layer must be in 1..{hi}, got {self.layer}")
        if self.checkpoint_path is not None and not Path(self.checkpoint_path).is_file():
            raise ValidationError(f"backbone checkpoint not found: {self.checkpoint_path}")

    def feature_shape(self) -> tuple[int, int, int]:
        """(height, width, dim) of the grid at a 224 x 224 input."""
        return feature_shape(self.family, self.layer)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "layer": self.layer,
            "checkpoint_path": self.checkpoint_path,
            "expected_digest": self.expected_digest,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


def feature_shape(family: str, layer: int) -> tuple[int, int, int]:
    if family == "vit_l14":
        return (16, 16, 1024)
    side = 56 >> (layer - 1)
    return (side, side, 256 << (layer - 1))


# --- CLIP ViT ---------------------------------------------------------------

class LayerNorm(nn.LayerNorm):
    def forward(self, x):
        orig = x.dtype
        return super().forward(x.float()).to(orig)


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_head: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_head)
        self.ln_1 = LayerNorm(d_model)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(d_model, d_model * 4)),
            ("gelu", QuickGELU()),
            ("c_proj", nn.Linear(d_model * 4, d_model)),
        ]))
        self.ln_2 = LayerNorm(d_model)

    def forward(self, x):
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int):
        super().__init__()
        self.width = width
        self.layers = layers
        self.resblocks = nn.Sequential(*[ResidualAttentionBlock(width, heads) for _ in range(layers)])


class VisionTransformer(nn.Module):
    def __init__(self, input_resolution=224, patch_size=14, width=1024, layers=24, heads=16, output_dim=768):
        super().__init__()
        self.input_resolution = input_resolution
        self.grid = input_resolution // patch_size
        self.conv1 = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size, bias=False)
        scale = width ** -0.5
        self.class_embedding = nn.Parameter(scale * torch.randn(width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(self.grid ** 2 + 1, width))
        self.ln_pre = LayerNorm(width)
        self.transformer = Transformer(width, layers, heads)
        self.ln_post = LayerNorm(width)
        self.proj = nn.Parameter(scale * torch.randn(width, output_dim))

    def _tokens(self, x, depth: int):
        x = self.conv1(x)
        x = x.flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
        x = self.ln_pre(x).transpose(0, 1)  # LND
        for block in self.transformer.resblocks[:depth]:
            x = block(x)
        return x.transpose(0, 1)

    def intermediate(self, x, layer: int):
        """Patch tokens after block ``layer`` as a (B, D, grid, grid) map; CLS dropped."""
        tokens = self._tokens(x, layer)[:, 1:, :]
        b, n, d = tokens.shape
        # row-major patch order
        return tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)

    def embed(self, x):
        tokens = self._tokens(x, self.transformer.layers)
        return self.ln_post(tokens[:, 0, :]) @ self.proj

    def forward(self, x):
        return self.embed(x)


# --- CLIP ModifiedResNet ----------------------------------------------------

class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu2 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu3 = nn.ReLU(inplace=True)
        self.downsample = None
        if stride > 1 or inplanes != planes * Bottleneck.expansion:
            self.downsample = nn.Sequential(OrderedDict([
                ("-1", nn.AvgPool2d(stride)),
                ("0", nn.Conv2d(inplanes, planes * self.expansion, 1, stride=1, bias=False)),
                ("1", nn.BatchNorm2d(planes * self.expansion)),
            ]))

    def forward(self, x):
        identity = x
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu3(out + identity)


class AttentionPool2d(nn.Module):
    def __init__(self, spacial_dim: int, embed_dim: int, num_heads: int, output_dim: int):
        super().__init__()
        self.positional_embedding = nn.Parameter(torch.randn(spacial_dim ** 2 + 1, embed_dim) / embed_dim ** 0.5)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.c_proj = nn.Linear(embed_dim, output_dim)
        self.num_heads = num_heads

    def forward(self, x):
        x = x.flatten(start_dim=2).permute(2, 0, 1)  # NCHW -> (HW)NC
        x = torch.cat([x.mean(dim=0, keepdim=True), x], dim=0)
        x = x + self.positional_embedding[:, None, :].to(x.dtype)
        x, _ = F.multi_head_attention_forward(
            query=x[:1], key=x, value=x,
            embed_dim_to_check=x.shape[-1],
            num_heads=self.num_heads,
            q_proj_weight=self.q_proj.weight,
            k_proj_weight=self.k_proj.weight,
            v_proj_weight=self.v_proj.weight,
            in_proj_weight=None,
            in_proj_bias=torch.cat([self.q_proj.bias, self.k_proj.bias, self.v_proj.bias]),
            bias_k=None, bias_v=None, add_zero_attn=False,
            dropout_p=0.0,
            out_proj_weight=self.c_proj.weight,
            out_proj_bias=self.c_proj.bias,
            use_separate_proj_weight=True,
            training=self.training,
            need_weights=False,
        )
        return x.squeeze(0)


class ModifiedResNet(nn.Module):
    def __init__(self, layers=(3, 4, 6, 3), output_dim=1024, heads=32, input_resolution=224, width=64):
        super().__init__()
        self.input_resolution = input_resolution
        self.conv1 = nn.Conv2d(3, width // 2, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width // 2)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(width // 2, width // 2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width // 2)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv3 = nn.Conv2d(width // 2, width, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu3 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(2)

        self._inplanes = width
        self.layer1 = self._make_layer(width, layers[0])
        self.layer2 = self._make_layer(width * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(width * 4, layers[2], stride=2)
        self.layer4 = self._make_layer(width * 8, layers[3], stride=2)
        self.attnpool = AttentionPool2d(input_resolution // 32, width * 32, heads, output_dim)

    def _make_layer(self, planes, blocks, stride=1):
        layers = [Bottleneck(self._inplanes, planes, stride)]
        self._inplanes = planes * Bottleneck.expansion
        layers += [Bottleneck(self._inplanes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def stem(self, x):
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.relu2(self.bn2(self.conv2(x)))
        x = self.relu3(self.bn3(self.conv3(x)))
        return self.avgpool(x)

    def intermediate(self, x, layer: int):
        x = self.stem(x.to(self.conv1.weight.dtype))
        for stage in (self.layer1, self.layer2, self.layer3, self.layer4)[:layer]:
            x = stage(x)
        return x

    def embed(self, x):
        return self.attnpool(self.intermediate(x, 4))

    def forward(self, x):
        return self.embed(x)


# --- weights ----------------------------------------------------------------

def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def weights_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _is_torchscript(path: PathLike) -> bool:
    if not zipfile.is_zipfile(path):
        return False
    with zipfile.ZipFile(path) as zf:
        return any(n.split("/", 2)[1:2] == ["code"] for n in zf.namelist())


def _read_state_dict(path: PathLike) -> dict:
    if _is_torchscript(path):
        # the official CLIP releases ship as TorchScript archives
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            sd = torch.jit.load(str(path), map_location="cpu").state_dict()
    else:
        sd = torch.load(str(path), map_location="cpu", weights_only=True)
        if isinstance(sd, dict) and "state_dict" in sd:
            sd = sd["state_dict"]
    if any(k.startswith("visual.") for k in sd):
        sd = {k[len("visual."):]: v for k, v in sd.items() if k.startswith("visual.")}
    return {k: v.float() for k, v in sd.items()}


def build_tower(family: str) -> nn.Module:
    if family == "vit_l14":
        return VisionTransformer()
    return ModifiedResNet()


class FrozenBackbone(nn.Module):
    """A CLIP visual tower with gradients disabled and eval-mode normalisation."""

    def __init__(self, family: str, checkpoint_path: Optional[str] = None,
                 init_seed: int = DEFAULT_INIT_SEED, expected_digest: Optional[str] = None):
        super().__init__()
        self.family = family
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(init_seed)
            self.tower = build_tower(family)
        if checkpoint_path is not None:
            self.digest = file_digest(checkpoint_path)
            if expected_digest is not None and expected_digest != self.digest:
                raise ChecksumMismatchError(
                    f"checkpoint {checkpoint_path} has digest {self.digest}, expected {expected_digest}"
                )
            self.tower.load_state_dict(_read_state_dict(checkpoint_path), strict=True)
            self.provenance = str(checkpoint_path)
        else:
            self.digest = f"seed{init_seed}:{weights_checksum(self.tower)}"
            if expected_digest is not None and expected_digest != self.digest:
                raise ChecksumMismatchError(f"random-init digest {self.digest} != expected {expected_digest}")
            self.provenance = f"random-init(seed={init_seed})"
        self.tower.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # the encoder never leaves eval mode
        return super().train(False)

    @torch.no_grad()
    def intermediate(self, x, layer: int):
        hi = MAX_LAYER[self.family]
        if not 1 <= layer <= hi:
            raise LayerOutOfRangeError(f"{self.family} layer must be in 1..{hi}, got {layer}")
        return self.tower.intermediate(x, layer).float()

    @torch.no_grad()
    def embed(self, x):
        return self.tower.embed(x).float()

    def checksum(self) -> str:
        return weights_checksum(self.tower)


@functools.lru_cache(maxsize=2)
def _cached_backbone(family, checkpoint_path, init_seed, expected_digest):
    log.info("loading %s backbone (%s)", family, checkpoint_path or f"seed {init_seed}")
    return FrozenBackbone(family, checkpoint_path, init_seed, expected_digest)


def load_backbone(spec: BackboneSpec) -> FrozenBackbone:
    """Shared, frozen instance for ``spec`` (weights are read-only, so reuse is safe)."""
    return _cached_backbone(spec.family, spec.checkpoint_path, spec.init_seed, spec.expected_digest)


# --- preprocessing ----------------------------------------------------------

def _as_float_image(image) -> torch.Tensor:
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise ValidationError(f"expected an RGB image, got mode {image.mode!r}")
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 RGB image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError("image has zero area")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)


def preprocess(image, size: int = INPUT_RESOLUTION) -> torch.Tensor:
    """RGB image (PIL, uint8 array or float array in [0, 1]) -> normalised 3 x 224 x 224.

    The image is resized directly to ``size`` x ``size`` (bicubic, no
    crop) so pixel masks stay aligned with the feature grid.
    """
    x = _as_float_image(image)
    if x.shape[1:] != (size, size):
        x = F.interpolate(x[None], size=(size, size), mode="bicubic", align_corners=False, antialias=True)[0]
        x = x.clamp(0.0, 1.0)
    mean = torch.tensor(CLIP_MEAN).view(3, 1, 1)
    std = torch.tensor(CLIP_STD).view(3, 1, 1)
    return (x - mean) / std


def preprocess_batch(images: Sequence) -> torch.Tensor:
    return torch.stack([preprocess(im) for im in images])


# --- feature extraction -----------------------------------------------------

def extract_features(batch: torch.Tensor, spec: BackboneSpec, backbone: Optional[FrozenBackbone] = None) -> torch.Tensor:
    """Preprocessed (B, 3, 224, 224) batch -> (B, D, H, W) grid at ``spec.layer``."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValidationError(f"expected a (B, 3, H, W) batch, got {tuple(batch.shape)}")
    backbone = backbone or load_backbone(spec)
    if backbone.family != spec.family:
        raise ValidationError(f"backbone family {backbone.family} does not match spec {spec.family}")
    return backbone.intermediate(batch, spec.layer)


def extract_global(batch: torch.Tensor, spec: BackboneSpec, backbone: Optional[FrozenBackbone] = None) -> torch.Tensor:
    """Image-level embedding (ViT: projected CLS token, ResNet: attention pool)."""
    backbone = backbone or load_backbone(spec)
    return backbone.embed(batch)


def concat_features(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Stack two grids along channels, upsampling the coarser one bilinearly.

    Channels of ``a`` come first. Grids are never downsampled.
    """
    if a.ndim != 4 or b.ndim != 4:
        raise ValidationError("feature grids must be (B, D, H, W)")
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    ha, wa = a.shape[-2:]
    hb, wb = b.shape[-2:]
    target = (max(ha, hb), max(wa, wb))
    if (ha, wa) != target:
        a = F.interpolate(a, size=target, mode="bilinear", align_corners=False)
    if (hb, wb) != target:
        b = F.interpolate(b, size=target, mode="bilinear", align_corners=False)
    return torch.cat([a, b], dim=1)


class FeatureSource:
    """One backbone tap, or two concatenated (e.g. ViT-L/14 L21 + RN50 L3)."""

    def __init__(self, specs: Sequence[BackboneSpec]):
        if not 1 <= len(specs) <= 2:
            raise ValidationError("a feature source uses one or two backbones")
        self.specs = tuple(specs)

    @property
    def backbones(self) -> list[FrozenBackbone]:
        return [load_backbone(s) for s in self.specs]

    def grid_shape(self) -> tuple[int, int, int]:
        shapes = [s.feature_shape() for s in self.specs]
        return (max(h for h, _, _ in shapes), max(w for _, w, _ in shapes), sum(d for _, _, d in shapes))

    @property
    def dim(self) -> int:
        return self.grid_shape()[2]

    def digests(self) -> list[str]:
        return [bb.digest for bb in self.backbones]

    def key(self) -> str:
        return "+".join(f"{s.family}@{s.layer}:{d}" for s, d in zip(self.specs, self.digests()))

    def checksums(self) -> list[str]:
        return [bb.checksum() for bb in self.backbones]

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        grids = [extract_features(batch, s, bb) for s, bb in zip(self.specs, self.backbones)]
        out = grids[0]
        for g in grids[1:]:
            out = concat_features(out, g)
        return out

    def to_dict(self) -> list[dict]:
        return [s.to_dict() for s in self.specs]


# --- feature files ----------------------------------------------------------

_MAGIC = b"FGRD"


def save_feature_grid(grid: torch.Tensor, path: PathLike, meta: Optional[dict] = None) -> Path:
    """Write one (D, H, W) grid as ``FGRD | u32 header length | JSON header | float32 H*W*D``.

    The payload is stored height-major with the feature axis last.
    """
    if grid.ndim != 3:
        raise ValidationError("save_feature_grid expects a single (D, H, W) grid")
    d, h, w = grid.shape
    header = {"height": h, "width": w, "dim": d, "dtype": "<f4", "layout": "HWD", **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    payload = grid.detach().cpu().permute(1, 2, 0).contiguous().numpy().astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob + payload)
    tmp.replace(path)
    return path


def load_feature_grid(path: PathLike) -> tuple[torch.Tensor, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path} is not a feature grid file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    h, w, d = header["height"], header["width"], header["dim"]
    arr = np.frombuffer(raw[8 + n:], dtype="<f4")
    if arr.size != h * w * d:
        raise ValidationError(f"{path}: payload size does not match header")
    grid = torch.from_numpy(arr.reshape(h, w, d).copy()).permute(2, 0, 1).contiguous()
    return grid, header


class FeatureCache:
    """On-disk cache of frozen-backbone grids keyed by image bytes and source."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def _path(self, image_path: PathLike, source_key: str) -> Path:
        h = hashlib.sha256(source_key.encode())
        h.update(Path(image_path).read_bytes())
        digest = h.hexdigest()
        return self.root / digest[:2] / f"{digest}.fgrd"

    def get(self, image_path, source_key):
        p = self._path(image_path, source_key)
        if p.is_file():
            return load_feature_grid(p)[0]
        return None

    def put(self, image_path, source_key, grid):
        save_feature_grid(grid, self._path(image_path, source_key), {"source": source_key})


def image_features(paths: Sequence[PathLike], source: FeatureSource,
                   cache: Optional[FeatureCache] = None, batch_size: int = 8) -> torch.Tensor:
    """Feature grids for a list of image files, (N, D, H, W), consulting ``cache``."""
    from .data import load_rgb

    key = source.key() if cache is not None else None
    out: list[Optional[torch.Tensor]] = [None] * len(paths)
    todo = []
    for i, p in enumerate(paths):
        hit = cache.get(p, key) if cache is not None else None
        if hit is not None:
            out[i] = hit
        else:
            todo.append(i)
    for start in range(0, len(todo), batch_size):
        idx = todo[start:start + batch_size]
        batch = preprocess_batch([load_rgb(paths[i]) for i in idx])
        grids = source(batch)
        for j, i in enumerate(idx):
            out[i] = grids[j]
            if cache is not None:
                cache.put(paths[i], key, grids[j])
    if not out:
        raise ValidationError("no images given")
    return torch.stack(out)


def image_embeddings(paths: Sequence[PathLike], spec: BackboneSpec, batch_size: int = 8) -> torch.Tensor:
    from .data import load_rgb

    backbone = load_backbone(spec)
    chunks = []
    for start in range(0, len(paths), batch_size):
        batch = preprocess_batch([load_rgb(p) for p in paths[start:start + batch_size]])
        chunks.append(backbone.embed(batch))
    return torch.cat(chunks)
