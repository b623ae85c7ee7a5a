"""End-to-end depth network: conv encoder, GraphSAGE bottleneck, gated decoder, heads."""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kvconfig
from . import tensorcore as tc
from .errors import ConfigurationError, FormatError, UsageError
from .gnn import SageLayerParams, sage_forward
from .graphbuild import KnnParams
from .layers import (AttentionParams, ConvParams, HeadParams, Prediction, StageParams, conv_relu,
                     decoder_stage, graph_for, heads)
from .tensorcore import Tensor

GRAPH_KINDS = ("grid4", "grid8", "knn")


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    graph_kind: str = "grid8"
    knn_k: int = 16
    knn_alpha: float = 0.7
    knn_beta: float = 0.3
    knn_normalize: bool = True
    multi_scale_gnn: bool = True
    bottleneck_gnn_only: bool = False
    channel_attention_on: bool = True
    uncertainty_head_on: bool = True
    aggregator: str = "mean"
    attention_reduction: int = 16
    max_depth: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or min(self.encoder_channels) < 1:
            raise ConfigurationError("encoder_channels needs four positive widths")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigurationError(f"graph_kind must be one of {GRAPH_KINDS}")
        if self.multi_scale_gnn and self.bottleneck_gnn_only:
            raise ConfigurationError("multi_scale_gnn and bottleneck_gnn_only are mutually exclusive")
        if self.aggregator not in ("mean", "max"):
            raise ConfigurationError("aggregator must be 'mean' or 'max'")
        if self.max_depth <= 0 or self.attention_reduction < 1:
            raise ConfigurationError("max_depth and attention_reduction must be positive")
        KnnParams(self.knn_k, self.knn_alpha, self.knn_beta, self.knn_normalize)

    @property
    def knn(self) -> KnnParams:
        return KnnParams(self.knn_k, self.knn_alpha, self.knn_beta, self.knn_normalize)

    @property
    def gnn_scales(self) -> frozenset[int]:
        """Downsampling factors at which GraphSAGE runs (32 = bottleneck)."""
        if self.multi_scale_gnn:
            return frozenset({32, 16, 8})
        if self.bottleneck_gnn_only:
            return frozenset({32})
        return frozenset()

    @property
    def decoder_channels(self) -> tuple[int, int, int]:
        c = self.encoder_channels
        return (c[2], c[1], c[0])


STAGE_SCALE = {1: 16, 2: 8, 3: 4}


class GraphDepthModel:
    """Parameters and forward pass for one :class:`ModelConfig`.

    Each parameter is drawn from a generator seeded by ``(config.seed,
    crc32(name))`` so toggling one component never shifts another's
    initialisation.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.gnn_applied: Counter = Counter()
        c1, c2, c3, c4 = config.encoder_channels
        self.encoder = [
            self._conv("enc.0", 3, c1), self._conv("enc.1", c1, c1), self._conv("enc.2", c1, c2),
            self._conv("enc.3", c2, c3), self._conv("enc.4", c3, c4),
        ]
        self.bottleneck_conv = self._conv("bottleneck.conv", c4, c4)
        self.bottleneck_sage = self._sage("bottleneck.sage", c4, c4) if 32 in config.gnn_scales else None
        skips = (c3, c2, c1)
        prev = c4
        self.stages: list[StageParams] = []
        for l, (skip, out) in enumerate(zip(skips, config.decoder_channels), start=1):
            cin = prev + skip
            att = self._attention(f"dec{l}.attention", cin) if config.channel_attention_on else None
            use_gnn = l <= 2 and STAGE_SCALE[l] in config.gnn_scales
            sage = self._sage(f"dec{l}.sage", cin, out) if use_gnn else None
            conv = None if use_gnn else self._conv(f"dec{l}.conv", cin, out)
            self.stages.append(StageParams(att, sage, conv))
            prev = out
        self.head = HeadParams(
            depth=self._conv("head.depth", prev, 1),
            uncertainty=self._conv("head.log_var", prev, 1) if config.uncertainty_head_on else None,
            max_depth=config.max_depth,
        )

    # -- construction helpers
    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, zlib.crc32(name.encode())])

    def _register(self, *tensors):
        for t in tensors:
            self.params[t.name] = t

    def _conv(self, name, cin, cout):
        p = ConvParams.init(cin, cout, self._rng(name), name)
        self._register(p.kernel, p.bias)
        return p

    def _sage(self, name, cin, cout):
        p = SageLayerParams.init(cin, cout, self._rng(name), name)
        self._register(p.weight, p.bias)
        return p

    def _attention(self, name, channels):
        p = AttentionParams.init(channels, self._rng(name), name, self.config.attention_reduction)
        self._register(p.w1, p.b1, p.w2, p.b2)
        return p

    # -- queries
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise UsageError(f"missing parameters: {', '.join(sorted(missing))}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise UsageError(f"parameter {k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    # -- forward
    def encode(self, image: Tensor) -> list[Tensor]:
        """Feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"expected Bx3xHxW input, got {image.shape}")
        H, W = image.shape[2:]
        if H % 32 or W % 32 or H == 0 or W == 0:
            raise ConfigurationError(f"input extents {H}x{W} must be positive multiples of 32")
        h = conv_relu(image, self.encoder[0], stride=2)
        feats = [conv_relu(h, self.encoder[1], stride=2)]
        for p in self.encoder[2:]:
            feats.append(conv_relu(feats[-1], p, stride=2))
        return feats

    def forward(self, image: Tensor) -> Prediction:
        cfg = self.config
        self.gnn_applied = Counter()
        x1, x2, x3, x4 = self.encode(image)
        c = tc.conv2d(x4, self.bottleneck_conv.kernel, self.bottleneck_conv.bias, padding=1)
        if self.bottleneck_sage is not None:
            self.gnn_applied[32] += 1
            g = sage_forward(c, graph_for(c, cfg.graph_kind, cfg.knn), self.bottleneck_sage, cfg.aggregator)
        else:
            g = tc.relu(c)
        for l, (skip, params) in enumerate(zip((x3, x2, x1), self.stages), start=1):
            counter = Counter()
            g = decoder_stage(g, skip, l, params, cfg.graph_kind, cfg.knn, cfg.aggregator, counter)
            if counter:
                self.gnn_applied[STAGE_SCALE[l]] += 1
        return heads(g, self.head)

    __call__ = forward

    def predict(self, rgb: np.ndarray) -> Prediction:
        """Untracked forward pass on a raw ``Bx3xHxW`` array."""
        return self.forward(Tensor(rgb))


def with_overrides(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "graphdepth-checkpoint-1"


def save_checkpoint(stem, model: GraphDepthModel, step: int = 0, extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.manifest`` (key=value text) and ``<stem>.bin`` (little-endian float64).

    ``extra`` holds additional named arrays such as optimizer moments.
    """
    stem = Path(stem)
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    arrays.update(extra or {})
    lines = [("format", CHECKPOINT_FORMAT), ("step", str(step))]
    lines += kvconfig.to_items(model.config, "config.")
    lines += sorted((meta or {}).items())
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(s) for s in data.shape) or "scalar"
        lines.append((f"array.{name}", f"{shape} {offset} {data.nbytes}"))
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest, blob = stem.with_suffix(".manifest"), stem.with_suffix(".bin")
    kvconfig.write_kv_file(manifest, lines)
    blob.write_bytes(b"".join(blobs))
    return manifest, blob


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    arrays: dict[str, np.ndarray]
    meta: dict[str, str]

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.arrays.items() if k.startswith("param.")}

    def build_model(self) -> GraphDepthModel:
        model = GraphDepthModel(self.config)
        model.load_arrays(self.params())
        return model


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    items = kvconfig.read_kv_file(stem.with_suffix(".manifest"))
    if items.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{stem}.manifest: not a {CHECKPOINT_FORMAT} manifest")
    blob = stem.with_suffix(".bin").read_bytes()
    arrays, cfg, meta = {}, {}, {}
    for key, value in items.items():
        if key.startswith("array."):
            shape_s, off_s, n_s = value.split()
            off, n = int(off_s), int(n_s)
            if off + n > len(blob):
                raise FormatError(f"array {key[6:]} runs past end of blob", offset=len(blob))
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            arrays[key[6:]] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=off).reshape(shape).astype(
                np.float64)
        elif key.startswith("config."):
            cfg[key[7:]] = value
        elif key not in ("format", "step"):
            meta[key] = value
    return Checkpoint(kvconfig.from_items(ModelConfig, cfg), int(items["step"]), arrays, meta)
