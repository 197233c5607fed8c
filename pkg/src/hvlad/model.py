"""Thin-ResNet encoders with flatten, VLAD, and hierarchical-VLAD heads.

Four variants share one trunk (7x7 stem, max-pool, four stages of
three-convolution bottleneck blocks) and differ only in the head:

============  ===========================================================
Baseline1     last block -> freq max-pool -> flatten -> FC
Baseline2     last block -> freq max-pool -> NetVLAD -> FC
Baseline3     every block of the last stage -> max-pool -> flatten -> shared FC, mean
HVLAD         every block of the last stage -> max-pool -> own NetVLAD -> shared FC, mean
============  ===========================================================

All heads finish with ReLU and a linear classifier.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigMismatch, InvalidConfig, MissingTap, ShapeMismatch
from .nn.functional import conv_output_size, softmax_cross_entropy
from .nn.layers import BatchNorm2d, Conv2d, LayerParams, Linear, MaxPool2d, ReLU
from .vlad import NetVLAD, kmeans

VARIANTS = ("baseline1", "baseline2", "baseline3", "hvlad")


@dataclass
class EncoderConfig:
    variant: str = "hvlad"
    K: int = 64
    n_classes: int = 108
    trunk_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (2, 3, 3, 3)
    embed_dim: int = 512
    n_bins: int = 257
    n_frames: int = 248
    intra_norm: bool = True

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)

    def validate(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.K < 2:
            raise InvalidConfig("K must be at least 2")
        if self.n_classes < 2:
            raise InvalidConfig("n_classes must be at least 2")
        if len(self.trunk_channels) != 4 or len(self.stage_depths) != 4:
            raise InvalidConfig("trunk needs exactly four stages")
        if min(self.trunk_channels) < 1 or min(self.stage_depths) < 1 or self.embed_dim < 1:
            raise InvalidConfig("channels, depths and embed_dim must be positive")
        if self.variant in ("baseline3", "hvlad") and self.stage_depths[-1] != 3:
            raise InvalidConfig("hierarchical variants tap three blocks; last stage depth must be 3")
        if self.n_bins < 1 or self.n_frames < 1:
            raise InvalidConfig("input size must be positive")
        return self

    @property
    def hierarchical(self):
        return self.variant in ("baseline3", "hvlad")

    @property
    def uses_vlad(self):
        return self.variant in ("baseline2", "hvlad")

    # plain-text key=value serialization

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in kinds:
                raise InvalidConfig(f"bad config line {raw!r}")
            default = kinds[key].default
            if key in ("trunk_channels", "stage_depths"):
                values[key] = tuple(int(x) for x in val.split(","))
            elif isinstance(default, bool):
                values[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                values[key] = int(val)
            else:
                values[key] = val
        return cls(**values)


def trunk_output_shape(cfg: EncoderConfig):
    """(channels, height, width) of every tapped block output."""
    h = conv_output_size(cfg.n_bins, 7, 2, 3)
    w = conv_output_size(cfg.n_frames, 7, 2, 3)
    h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    if h < 1 or w < 1:
        raise InvalidConfig("input too small for the stem")
    for stage in range(1, 4):
        h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
    return cfg.trunk_channels[-1], h, w


class Bottleneck:
    """1x1 reduce, 3x3 (strided), 1x1 expand, each with batch norm; ReLU after the sum."""

    def __init__(self, store, name, c_in, c_out, stride, rng):
        # a single-channel middle makes the two inner batch norms degenerate
        mid = max(2, c_out // 4)
        self.conv_a = Conv2d(store, f"{name}.conv_a", c_in, mid, 1, rng=rng, bias=False)
        self.bn_a = BatchNorm2d(store, f"{name}.bn_a", mid)
        self.conv_b = Conv2d(store, f"{name}.conv_b", mid, mid, 3, stride=stride, pad=1, rng=rng, bias=False)
        self.bn_b = BatchNorm2d(store, f"{name}.bn_b", mid)
        self.conv_c = Conv2d(store, f"{name}.conv_c", mid, c_out, 1, rng=rng, bias=False)
        self.bn_c = BatchNorm2d(store, f"{name}.bn_c", c_out)
        self.relu_a, self.relu_b, self.relu_out = ReLU(), ReLU(), ReLU()
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(store, f"{name}.proj", c_in, c_out, 1, stride=stride, rng=rng, bias=False)
            self.proj_bn = BatchNorm2d(store, f"{name}.proj_bn", c_out)
        else:
            self.proj = None

    def forward(self, x, train=True):
        h = self.relu_a.forward(self.bn_a.forward(self.conv_a.forward(x, train), train), train)
        h = self.relu_b.forward(self.bn_b.forward(self.conv_b.forward(h, train), train), train)
        h = self.bn_c.forward(self.conv_c.forward(h, train), train)
        short = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x, train), train)
        return self.relu_out.forward(h + short, train)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dx = d if self.proj is None else self.proj.backward(self.proj_bn.backward(d))
        h = self.conv_c.backward(self.bn_c.backward(d))
        h = self.conv_b.backward(self.bn_b.backward(self.relu_b.backward(h)))
        h = self.conv_a.backward(self.bn_a.backward(self.relu_a.backward(h)))
        return dx + h


def hvlad_combine(tap_embeddings):
    """Elementwise mean of the per-tap shared-FC outputs."""
    taps = list(tap_embeddings)
    if len(taps) != 3 or any(t is None for t in taps):
        raise MissingTap(f"expected 3 tap embeddings, got {len(taps)}")
    first = taps[0].shape
    if any(t.shape != first for t in taps):
        raise ShapeMismatch("tap embeddings differ in shape")
    return sum(taps) / len(taps)


class Encoder:
    """Model parameters plus the layer graph that reads them.

    ``params`` is the single `LayerParams` store holding every tensor,
    including batch-norm running statistics; the layers only keep names.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.params = store = LayerParams(dtype)
        ch, depths = cfg.trunk_channels, cfg.stage_depths

        self.stem = Conv2d(store, "stem.conv", 1, ch[0], 7, stride=2, pad=3, rng=rng, need_dx=False,
                           bias=False)
        self.stem_bn = BatchNorm2d(store, "stem.bn", ch[0])
        self.stem_relu = ReLU()
        self.stem_pool = MaxPool2d(2, 2)
        self.blocks = []
        c_in = ch[0]
        for s, (c_out, depth) in enumerate(zip(ch, depths)):
            stage = []
            for b in range(depth):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(Bottleneck(store, f"stage{s}.block{b}", c_in, c_out, stride, rng))
                c_in = c_out
            self.blocks.append(stage)

        C, _, T = trunk_output_shape(cfg)
        self.n_taps = 3 if cfg.hierarchical else 1
        self.freq_pools = [MaxPool2d((None, 1), (1, 1)) for _ in range(self.n_taps)]
        if cfg.uses_vlad:
            names = ["vlad"] if self.n_taps == 1 else [f"vlad{t}" for t in range(self.n_taps)]
            self.vlads = [NetVLAD(store, n, cfg.K, C, rng, cfg.intra_norm) for n in names]
            agg_dim = cfg.K * C
        else:
            self.vlads = []
            agg_dim = C * T
        self.agg_dim = agg_dim
        self.fc = Linear(store, "fc", agg_dim, cfg.embed_dim, rng=rng)
        self.fc_relu = ReLU()
        self.classifier = Linear(store, "classifier", cfg.embed_dim, cfg.n_classes, rng=rng)
        self._tap_shape = None

    # -- forward ----------------------------------------------------------

    def trunk(self, x, train=True):
        """Feature maps handed to the head: all last-stage blocks or just the last one."""
        h = self.stem_relu.forward(self.stem_bn.forward(self.stem.forward(x, train), train), train)
        h = self.stem_pool.forward(h, train)
        for stage in self.blocks[:-1]:
            for block in stage:
                h = block.forward(h, train)
        taps = []
        for block in self.blocks[-1]:
            h = block.forward(h, train)
            taps.append(h)
        return taps[-self.n_taps:]

    def aggregate(self, tap_maps, train=True):
        """Pooled, aggregated and projected embedding (before the final ReLU)."""
        if len(tap_maps) != self.n_taps:
            raise MissingTap(f"{self.cfg.variant} expects {self.n_taps} tap(s), got {len(tap_maps)}")
        outs = []
        for t, fmap in enumerate(tap_maps):
            pooled = self.freq_pools[t].forward(fmap, train)
            if self.vlads:
                agg = self.vlads[t].forward(pooled, train)
            else:
                self._tap_shape = pooled.shape
                agg = pooled.reshape(pooled.shape[0], -1)
            if agg.shape[1] != self.agg_dim:
                raise ShapeMismatch(f"aggregated dim {agg.shape[1]} != {self.agg_dim}; "
                                    f"input size differs from the configured n_bins/n_frames")
            outs.append(self.fc.forward(agg, train))
        return outs[0] if self.n_taps == 1 else hvlad_combine(outs)

    def forward(self, x, train=True):
        """Logits ``[B, n_classes]`` for inputs ``[B, 1, n_bins, n_frames]``."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected [B, 1, bins, frames], got {x.shape}")
        x = np.asarray(x, dtype=self.params.dtype)
        e = self.aggregate(self.trunk(x, train), train)
        return self.classifier.forward(self.fc_relu.forward(e, train), train)

    def embed(self, x):
        return self.aggregate(self.trunk(np.asarray(x, dtype=self.params.dtype), False), False)

    # -- backward ---------------------------------------------------------

    def backward(self, dlogits):
        """Accumulate gradients for the most recent training-mode forward."""
        de = self.fc_relu.backward(self.classifier.backward(dlogits))
        d_fc_out = de / self.n_taps
        d_taps = [None] * self.n_taps
        for t in reversed(range(self.n_taps)):
            dagg = self.fc.backward(d_fc_out)
            if self.vlads:
                dpooled = self.vlads[t].backward(dagg)
            else:
                dpooled = dagg.reshape(self._tap_shape)
            d_taps[t] = self.freq_pools[t].backward(dpooled)

        last = self.blocks[-1]
        first_tap = len(last) - self.n_taps
        d = None
        for i in reversed(range(len(last))):
            t = i - first_tap
            if t >= 0:
                d = d_taps[t] if d is None else d + d_taps[t]
            d = last[i].backward(d)
        for stage in reversed(self.blocks[:-1]):
            for block in reversed(stage):
                d = block.backward(d)
        d = self.stem_pool.backward(d)
        self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(d)))

    # -- helpers ----------------------------------------------------------

    def init_centroids(self, x, n_iter=10, seed=0):
        """k-means centroids from a warm-up batch; assignment weights follow them.

        Batch-norm running statistics are left untouched.
        """
        if not self.vlads:
            return
        buffers = {n: t.copy() for n, t in self.params.tensors.items() if n not in self.params.trainable}
        taps = self.trunk(np.asarray(x, dtype=self.params.dtype), train=True)
        self.reset_caches()
        rng = np.random.default_rng(seed)
        for t, (vl, fmap) in enumerate(zip(self.vlads, taps)):
            desc = NetVLAD.descriptors(self.freq_pools[t].forward(fmap, False)).reshape(-1, vl.D)
            c = kmeans(desc, vl.K, n_iter=n_iter, rng=rng)
            d = np.sort(((desc[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
            gap = float(np.mean(d[:, 1] - d[:, 0])) if vl.K > 1 else 0.0
            sharpness = np.log(100.0) / gap if gap > 0 else 1.0
            vl.set_centroids(c, sharpness)
        for n, t in buffers.items():
            self.params.tensors[n][...] = t

    def branch_signature(self) -> bytes:
        """Piecewise choices (ReLU masks, pool winners) of the latest training forward."""
        parts = []
        for layer in self._layers():
            for cache in layer._caches:
                if isinstance(layer, ReLU):
                    parts.append(np.packbits(cache).tobytes())
                elif isinstance(layer, MaxPool2d):
                    parts.append(cache[1].tobytes())
        return b"".join(parts)

    def reset_caches(self):
        for layer in self._layers():
            layer.reset()

    def _layers(self):
        out = [self.stem, self.stem_bn, self.stem_relu, self.stem_pool]
        for stage in self.blocks:
            for b in stage:
                out += [b.conv_a, b.bn_a, b.relu_a, b.conv_b, b.bn_b, b.relu_b, b.conv_c,
                        b.bn_c, b.relu_out]
                if b.proj is not None:
                    out += [b.proj, b.proj_bn]
        return out + self.freq_pools + self.vlads + [self.fc, self.fc_relu, self.classifier]

    def loss_and_grads(self, x, labels):
        self.params.zero_grad()
        self.reset_caches()
        logits = self.forward(x, train=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits

    def parameter_count(self):
        return self.params.count()

    def load_tensors(self, tensors: dict):
        mine = self.params.tensors
        if set(tensors) != set(mine):
            missing = sorted(set(mine) - set(tensors))[:3]
            extra = sorted(set(tensors) - set(mine))[:3]
            raise ConfigMismatch(f"checkpoint tensors do not match model (missing {missing}, extra {extra})")
        for n, t in tensors.items():
            if t.shape != mine[n].shape:
                raise ConfigMismatch(f"{n}: checkpoint shape {t.shape} != model {mine[n].shape}")
            mine[n][...] = t


def build_encoder(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> Encoder:
    return Encoder(cfg, seed=seed, dtype=dtype)
