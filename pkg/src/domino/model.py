"""DCGAN-style encoders/decoders and the convolutional projection head.

For a 32x32 input the encoder is three stride-2 4x4 convolutions
(32 -> 16 -> 8 -> 4) followed by a linear map to the latent ``z``. The 8x8
activation of the second convolution is exposed as the local feature map ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndgrad import Array, get_default_dtype
from .ndgrad import ops

LATENT_DIM = 64
EMBED_DIM = 64
CONV_FEATURE_SIDE = 8


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


def _conv_fans(shape, transposed=False):
    # conv weight (out, in, kh, kw); transposed conv weight (in, out, kh, kw)
    a, b, kh, kw = shape
    rf = kh * kw
    if transposed:
        return a * rf, b * rf
    return b * rf, a * rf


class Module:
    """Named parameters, named buffers and a train/eval flag."""

    def __init__(self):
        self.params: dict[str, Array] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _param(self, name: str, value: np.ndarray) -> Array:
        arr = Array(value, requires_grad=True)
        self.params[name] = arr
        return arr

    def _bn(self, name: str, channels: int) -> None:
        dt = get_default_dtype()
        self._param(f"{name}/gamma", np.ones(channels, dtype=dt))
        self._param(f"{name}/beta", np.zeros(channels, dtype=dt))
        self.buffers[f"{name}/running_mean"] = np.zeros(channels, dtype=dt)
        self.buffers[f"{name}/running_var"] = np.ones(channels, dtype=dt)

    def _apply_bn(self, name: str, x: Array) -> Array:
        return ops.batchnorm2d(
            x, self.params[f"{name}/gamma"], self.params[f"{name}/beta"],
            training=self.training,
            running_mean=self.buffers[f"{name}/running_mean"],
            running_var=self.buffers[f"{name}/running_var"],
        )

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/{k}": v.data for k, v in self.params.items()}
        out.update({f"{prefix}/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            key = f"{prefix}/{k}"
            if key not in arrays or arrays[key].shape != v.shape:
                raise ValueError(f"checkpoint mismatch for {key}")
            v.data = np.array(arrays[key], dtype=v.dtype, copy=True)
        for k, v in self.buffers.items():
            key = f"{prefix}/{k}"
            if key not in arrays or arrays[key].shape != v.shape:
                raise ValueError(f"checkpoint mismatch for {key}")
            v[...] = arrays[key]


@dataclass
class EncoderConfig:
    in_channels: int = 1
    base_channels: int = 64
    latent_dim: int = LATENT_DIM
    conv_feature_side: int = CONV_FEATURE_SIDE
    seed: int = 0


@dataclass
class EncoderOutputs:
    c: Array
    z: Array


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        super().__init__()
        if cfg.conv_feature_side != CONV_FEATURE_SIDE:
            raise ValueError("the 32x32 stack only produces an 8x8 feature map")
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        b = cfg.base_channels
        self.feature_channels = 2 * b
        for name, shape in (("conv1/w", (b, cfg.in_channels, 4, 4)),
                            ("conv2/w", (2 * b, b, 4, 4)),
                            ("conv3/w", (4 * b, 2 * b, 4, 4))):
            self._param(name, xavier_uniform(rng, shape, *_conv_fans(shape)))
            if name == "conv1/w":
                self._param("conv1/b", np.zeros(b, dtype=get_default_dtype()))
        self._bn("bn2", 2 * b)
        self._bn("bn3", 4 * b)
        flat = 4 * b * 4 * 4
        self._param("fc/w", xavier_uniform(rng, (cfg.latent_dim, flat), flat, cfg.latent_dim))
        self._param("fc/b", np.zeros(cfg.latent_dim, dtype=get_default_dtype()))

    def __call__(self, x: Array) -> EncoderOutputs:
        if x.ndim != 4 or x.shape[2:] != (32, 32) or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"encoder expects (B, {self.cfg.in_channels}, 32, 32), got {x.shape}")
        p = self.params
        h = ops.conv2d(x, p["conv1/w"], stride=2, pad=1)
        h = ops.leaky_relu(ops.bias_add(h, p["conv1/b"]))
        h = ops.conv2d(h, p["conv2/w"], stride=2, pad=1)
        c = ops.leaky_relu(self._apply_bn("bn2", h))
        h = ops.conv2d(c, p["conv3/w"], stride=2, pad=1)
        h = ops.leaky_relu(self._apply_bn("bn3", h))
        h = ops.reshape(h, (x.shape[0], -1))
        z = ops.linear(h, p["fc/w"], p["fc/b"])
        return EncoderOutputs(c=c, z=z)


class ConvHead(Module):
    """Residual 1x1 projection of conv features to 64-d location embeddings.

    Path A is conv-relu-conv (Xavier), path B a single 1x1 conv initialised as a
    channel-wise identity; the sum is batch-normalised.
    """

    def __init__(self, in_channels: int, embed_dim: int = EMBED_DIM,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self._param("a1/w", xavier_uniform(rng, (embed_dim, in_channels, 1, 1), in_channels, embed_dim))
        self._param("a1/b", np.zeros(embed_dim, dtype=get_default_dtype()))
        self._param("a2/w", xavier_uniform(rng, (embed_dim, embed_dim, 1, 1), embed_dim, embed_dim))
        self._param("a2/b", np.zeros(embed_dim, dtype=get_default_dtype()))
        ident = np.zeros((embed_dim, in_channels, 1, 1), dtype=get_default_dtype())
        k = min(embed_dim, in_channels)
        ident[np.arange(k), np.arange(k), 0, 0] = 1.0
        self._param("b/w", ident)
        self._bn("bn", embed_dim)

    def paths(self, c: Array) -> tuple[Array, Array]:
        if c.ndim != 4 or c.shape[1] != self.in_channels:
            raise ValueError(f"conv head expects {self.in_channels} channels, got {c.shape}")
        p = self.params
        a = ops.relu(ops.bias_add(ops.conv2d(c, p["a1/w"]), p["a1/b"]))
        a = ops.bias_add(ops.conv2d(a, p["a2/w"]), p["a2/b"])
        b = ops.conv2d(c, p["b/w"])
        return a, b

    def __call__(self, c: Array) -> Array:
        a, b = self.paths(c)
        return self._apply_bn("bn", a + b)


class Decoder(Module):
    """Transposed-conv mirror of :class:`Encoder`, squashed to [0, 1]."""

    def __init__(self, out_channels: int = 1, base_channels: int = 64,
                 latent_dim: int = LATENT_DIM, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        b = base_channels
        self.out_channels = out_channels
        self.base_channels = b
        flat = 4 * b * 4 * 4
        self._param("fc/w", xavier_uniform(rng, (flat, latent_dim), latent_dim, flat))
        self._param("fc/b", np.zeros(flat, dtype=get_default_dtype()))
        self._bn("bn0", 4 * b)
        for name, shape in (("deconv1/w", (4 * b, 2 * b, 4, 4)),
                            ("deconv2/w", (2 * b, b, 4, 4)),
                            ("deconv3/w", (b, out_channels, 4, 4))):
            self._param(name, xavier_uniform(rng, shape, *_conv_fans(shape, transposed=True)))
        self._bn("bn1", 2 * b)
        self._bn("bn2", b)
        self._param("deconv3/b", np.zeros(out_channels, dtype=get_default_dtype()))

    def __call__(self, z: Array) -> Array:
        if z.ndim != 2:
            raise ValueError(f"decoder expects (B, latent), got {z.shape}")
        p = self.params
        b = self.base_channels
        h = ops.linear(z, p["fc/w"], p["fc/b"])
        h = ops.relu(self._apply_bn("bn0", ops.reshape(h, (z.shape[0], 4 * b, 4, 4))))
        h = ops.relu(self._apply_bn("bn1", ops.conv_transpose2d(h, p["deconv1/w"], stride=2, pad=1)))
        h = ops.relu(self._apply_bn("bn2", ops.conv_transpose2d(h, p["deconv2/w"], stride=2, pad=1)))
        h = ops.bias_add(ops.conv_transpose2d(h, p["deconv3/w"], stride=2, pad=1), p["deconv3/b"])
        return ops.affine(ops.tanh(h), 0.5, 0.5)


class LinearHead(Module):
    """Single linear layer from ``z`` to class logits."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self._param("w", xavier_uniform(rng, (num_classes, in_dim), in_dim, num_classes))
        self._param("b", np.zeros(num_classes, dtype=get_default_dtype()))

    def __call__(self, z: Array) -> Array:
        return ops.linear(z, self.params["w"], self.params["b"])


class MultimodalModel:
    """Per-modality encoders plus whatever heads the objective graph needs.

    Checkpoint names: ``enc{m}/``, ``head{m}/``, ``dec{m}/``, ``sup{m}/``.
    """

    def __init__(self, in_channels: list[int], base_channels: int = 64, seed: int = 0,
                 with_heads: set[int] | None = None, with_decoders: set[int] | None = None,
                 with_sup: set[int] | None = None, num_classes: int = 10):
        rng = np.random.default_rng(seed)
        self.in_channels = list(in_channels)
        self.base_channels = base_channels
        self.num_classes = num_classes
        self.encoders = [
            Encoder(EncoderConfig(in_channels=c, base_channels=base_channels, seed=seed), rng=rng)
            for c in in_channels
        ]
        self.heads = {m: ConvHead(self.encoders[m].feature_channels, rng=rng) for m in sorted(with_heads or ())}
        self.decoders = {m: Decoder(in_channels[m], base_channels, rng=rng) for m in sorted(with_decoders or ())}
        self.sup = {m: LinearHead(LATENT_DIM, num_classes, rng=rng) for m in sorted(with_sup or ())}

    def modules(self):
        for m, enc in enumerate(self.encoders):
            yield f"enc{m}", enc
        for m, mod in self.heads.items():
            yield f"head{m}", mod
        for m, mod in self.decoders.items():
            yield f"dec{m}", mod
        for m, mod in self.sup.items():
            yield f"sup{m}", mod

    def parameters(self) -> dict[str, Array]:
        return {f"{pre}/{k}": v for pre, mod in self.modules() for k, v in mod.params.items()}

    def train(self, mode: bool = True) -> "MultimodalModel":
        for _, mod in self.modules():
            mod.train(mode)
        return self

    def eval(self) -> "MultimodalModel":
        return self.train(False)

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for pre, mod in self.modules():
            out.update(mod.state(pre))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for pre, mod in self.modules():
            mod.load_state(pre, arrays)

    def encode(self, m: int, x: Array) -> EncoderOutputs:
        return self.encoders[m](x)


def init_params(seed: int, in_channels: int = 1, base_channels: int = 64) -> dict[str, np.ndarray]:
    """Freshly initialised encoder + projection-head parameters for one modality."""
    rng = np.random.default_rng(seed)
    enc = Encoder(EncoderConfig(in_channels=in_channels, base_channels=base_channels, seed=seed), rng=rng)
    head = ConvHead(enc.feature_channels, rng=rng)
    return {**{k: v.data for k, v in enc.params.items()},
            **{f"head/{k}": v.data for k, v in head.params.items()}}
