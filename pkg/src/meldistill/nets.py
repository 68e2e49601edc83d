"""Model builders: conv backbones with statistics-pooling backends, the
spectrogram generator, and the instance-discriminator projection head.

Backbone convs use no padding, so a time-constant input produces exactly
time-constant frame features; that property is what makes chunk embeddings
of stationary inputs agree. Frequency is strided down to (near) a single
row and averaged out, leaving frame-level features shaped [B, F, T'].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Parameter, RngState, Tensor, concat, conv2d

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SP_EPS = 1e-8


def he_uniform(rng: RngState, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv2d:
    def __init__(self, cin: int, cout: int, stride: tuple[int, int], padding: tuple[int, int],
                 rng: RngState, name: str, dtype=np.float32, kernel: tuple[int, int] = (3, 3)):
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(he_uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


class BatchNorm2d:
    """Channel batch norm with running statistics (population variance, momentum 0.1)."""

    def __init__(self, channels: int, name: str, dtype=np.float32,
                 gamma_init: float = 1.0, beta_init: float = 0.0):
        self.channels = channels
        self.gamma = Parameter(np.full(channels, gamma_init, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.full(channels, beta_init, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        c = self.channels
        if x.shape[1] != c:
            raise ShapeError(f"batchnorm expects {c} channels, got {x.shape[1]}")
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2.0).mean(axis=(0, 2, 3), keepdims=True)
            m = BN_MOMENTUM
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(c)).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var.data.reshape(c)).astype(x.dtype)
            x_hat = (x - mu) * ((var + BN_EPS) ** -0.5)
        else:
            rm = Tensor(self.running_mean.reshape(1, c, 1, 1))
            rv = Tensor(self.running_var.reshape(1, c, 1, 1))
            x_hat = (x - rm) * ((rv + BN_EPS) ** -0.5)
        return x_hat * self.gamma.tensor.reshape(1, c, 1, 1) + self.beta.tensor.reshape(1, c, 1, 1)

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class Affine:
    def __init__(self, n_in: int, n_out: int, rng: RngState, name: str, dtype=np.float32):
        self.weight = Parameter(he_uniform(rng, (n_in, n_out), n_in, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight.tensor + self.bias.tensor

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ConvBlock:
    """conv3x3 (valid) -> batch norm -> relu."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int], rng: RngState, name: str, dtype=np.float32):
        self.conv = Conv2d(cin, cout, stride=stride, padding=(0, 0), rng=rng, name=f"{name}.conv", dtype=dtype)
        self.bn = BatchNorm2d(cout, name=f"{name}.bn", dtype=dtype)

    def __call__(self, x: Tensor, capture: list[Tensor] | None = None) -> Tensor:
        pre = self.conv(x)
        if capture is not None:
            capture.append(pre)
        return self.bn(pre).relu()

    def params(self) -> list[Parameter]:
        return self.conv.params() + self.bn.params()


@dataclass(frozen=True)
class ArchDef:
    """Per-block (cin, cout, (freq_stride, time_stride)); 3x3 kernels, no padding."""

    blocks: tuple[tuple[int, int, tuple[int, int]], ...]
    frame_dim: int


ARCHES: dict[str, ArchDef] = {
    # time stride 2 at blocks 2 and 4; frequency strided down every block
    "tiny_t": ArchDef(
        blocks=((1, 16, (2, 1)), (16, 32, (2, 2)), (32, 64, (2, 1)), (64, 64, (2, 2))),
        frame_dim=64,
    ),
    # one fewer block, half the frame channels, time stride 2 at block 2 only
    "tiny_s": ArchDef(
        blocks=((1, 16, (2, 1)), (16, 32, (2, 2)), (32, 32, (2, 1))),
        frame_dim=32,
    ),
}


def _min_input(arch: ArchDef, axis: int, final_required: int) -> int:
    req = final_required
    for _, _, stride in reversed(arch.blocks):
        req = (req - 1) * stride[axis] + 3
    return req


def stats_pool(h: Tensor) -> Tensor:
    """Concatenate per-channel time mean and population time std: [B,F,T] -> [B,2F]."""
    if h.ndim != 3:
        raise ShapeError(f"stats_pool expects [B, F, T], got {h.shape}")
    if h.shape[2] < 2:
        raise ContractError(f"stats_pool needs at least 2 frames, got {h.shape[2]}")
    mu = h.mean(axis=2)
    centered = h - mu.reshape(h.shape[0], h.shape[1], 1)
    var = (centered**2.0).mean(axis=2)
    std = (var + SP_EPS).sqrt()
    return concat([mu, std], axis=1)


class ModelBundle:
    """Conv backbone + statistics pooling + affine classifier."""

    def __init__(self, arch: str, class_count: int, rng: RngState, dtype=np.float32, role: str = "teacher"):
        if arch not in ARCHES:
            raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(ARCHES)}")
        if class_count < 2:
            raise ConfigError(f"need at least 2 classes, got {class_count}")
        self.arch = arch
        self.arch_def = ARCHES[arch]
        self.class_count = class_count
        self.role = role
        self.dtype = np.dtype(dtype)
        self.blocks = [
            ConvBlock(cin, cout, stride, rng, name=f"backbone.{i}", dtype=dtype)
            for i, (cin, cout, stride) in enumerate(self.arch_def.blocks)
        ]
        self.classifier = Affine(2 * self.frame_dim, class_count, rng, name="classifier", dtype=dtype)

    @property
    def frame_dim(self) -> int:
        return self.arch_def.frame_dim

    def min_input_frames(self) -> int:
        return _min_input(self.arch_def, axis=1, final_required=2)

    def min_input_mels(self) -> int:
        return _min_input(self.arch_def, axis=0, final_required=1)

    def time_stride(self) -> int:
        out = 1
        for _, _, stride in self.arch_def.blocks:
            out *= stride[1]
        return out

    def train(self) -> "ModelBundle":
        for block in self.blocks:
            block.bn.training = True
        return self

    def eval(self) -> "ModelBundle":
        for block in self.blocks:
            block.bn.training = False
        return self

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.classifier.params())
        return out

    def freeze(self) -> "ModelBundle":
        for p in self.parameters():
            p.tensor.requires_grad = False
        return self

    def bn_layers(self) -> list[BatchNorm2d]:
        return [block.bn for block in self.blocks]

    def forward_frame_level(self, x: Tensor, capture_bn_inputs: list[Tensor] | None = None) -> Tensor:
        """[B, mel, T] -> frame-level hidden state [B, F, T']."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3:
            raise ShapeError(f"expected [B, mel, T] input, got {x.shape}")
        bsz, mel, frames = x.shape
        if mel < self.min_input_mels():
            raise ShapeError(f"{self.arch} needs >= {self.min_input_mels()} mel bins, got {mel}")
        if frames < self.min_input_frames():
            raise ContractError(f"{self.arch} needs >= {self.min_input_frames()} frames, got {frames}")
        h = x.reshape(bsz, 1, mel, frames)
        for block in self.blocks:
            h = block(h, capture=capture_bn_inputs)
        return h.mean(axis=2)

    def forward_pooled(self, x: Tensor, capture_bn_inputs: list[Tensor] | None = None) -> Tensor:
        return stats_pool(self.forward_frame_level(x, capture_bn_inputs))

    def forward_logits(self, x: Tensor, capture_bn_inputs: list[Tensor] | None = None) -> Tensor:
        return self.classifier(self.forward_pooled(x, capture_bn_inputs))

    # -- persistence -------------------------------------------------------

    def named_arrays(self) -> list[tuple[str, np.ndarray, str]]:
        out: list[tuple[str, np.ndarray, str]] = []
        for p in self.parameters():
            out.append((p.name, p.data, "param"))
        for i, block in enumerate(self.blocks):
            out.append((f"backbone.{i}.bn.running_mean", block.bn.running_mean, "running"))
            out.append((f"backbone.{i}.bn.running_var", block.bn.running_var, "running"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = arrays[p.name].astype(self.dtype)
        for i, block in enumerate(self.blocks):
            block.bn.running_mean = arrays[f"backbone.{i}.bn.running_mean"].astype(self.dtype)
            block.bn.running_var = arrays[f"backbone.{i}.bn.running_var"].astype(self.dtype)


def build_model(arch: str, class_count: int, rng: RngState, dtype=np.float32, role: str | None = None) -> ModelBundle:
    """Initialized model; same seed gives identical weights."""
    inferred = "teacher" if arch.endswith("_t") else "student"
    return ModelBundle(arch, class_count, rng, dtype=dtype, role=role or inferred)


def save_checkpoint(base: str | Path, model: ModelBundle) -> Path:
    """Write {base}.json manifest + {base}.bin of float32 LE arrays in manifest order."""
    base = Path(base)
    arrays = model.named_arrays()
    payload = b"".join(np.ascontiguousarray(a).astype("<f4").tobytes() for _, a, _ in arrays)
    manifest = {
        "format": "meldistill-checkpoint-v1",
        "arch": model.arch,
        "class_count": model.class_count,
        "role": model.role,
        "tensors": [{"name": n, "shape": list(a.shape), "kind": k} for n, a, k in arrays],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{base}.bin").write_bytes(payload)
    Path(f"{base}.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return base


def load_checkpoint(base: str | Path, dtype=np.float32) -> ModelBundle:
    base = Path(base)
    manifest = json.loads(Path(f"{base}.json").read_text())
    payload = Path(f"{base}.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise DataError(f"checkpoint payload hash mismatch at {base}.bin")
    model = ModelBundle(manifest["arch"], manifest["class_count"], RngState(0), dtype=dtype, role=manifest["role"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for rec in manifest["tensors"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(rec["shape"])
        arrays[rec["name"]] = arr.copy()
        offset += count * 4
    if offset != len(payload):
        raise DataError(f"checkpoint payload size mismatch at {base}.bin")
    model.load_arrays(arrays)
    model.eval()
    return model


# -- generator ---------------------------------------------------------------------


def _upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on the last two axes."""
    b, c, h, w = x.shape
    ones = Tensor(np.ones((1, 1, 1, 2, 1, 2), dtype=x.dtype))
    return (x.reshape(b, c, h, 1, w, 1) * ones).reshape(b, c, 2 * h, 2 * w)


class Generator:
    """Latent vectors to log-mel maps: affine seed, three 2x upsampling conv
    stages, and a final batch norm whose init places outputs in log-power range."""

    def __init__(self, mel_bins: int, frames: int, latent_dim: int, rng: RngState, dtype=np.float32,
                 width: int = 128, output_shift_init: float = -8.0, output_scale_init: float = 5.0):
        if width < 4 or width % 4:
            raise ConfigError(f"generator width must be a multiple of 4, got {width}")
        self.mel_bins = mel_bins
        self.frames = frames
        self.latent_dim = latent_dim
        self.width = width
        self.dtype = np.dtype(dtype)
        self.f0 = -(-mel_bins // 8)  # ceil
        self.t0 = -(-frames // 8)
        c1, c2 = width // 2, width // 4
        self.fc = Affine(latent_dim, width * self.f0 * self.t0, rng, name="gen.fc", dtype=dtype)
        self.bn0 = BatchNorm2d(width, name="gen.bn0", dtype=dtype)
        self.conv1 = Conv2d(width, c1, stride=(1, 1), padding=(1, 1), rng=rng, name="gen.conv1", dtype=dtype)
        self.bn1 = BatchNorm2d(c1, name="gen.bn1", dtype=dtype)
        self.conv2 = Conv2d(c1, c2, stride=(1, 1), padding=(1, 1), rng=rng, name="gen.conv2", dtype=dtype)
        self.bn2 = BatchNorm2d(c2, name="gen.bn2", dtype=dtype)
        self.conv3 = Conv2d(c2, 1, stride=(1, 1), padding=(1, 1), rng=rng, name="gen.conv3", dtype=dtype)
        self.bn_out = BatchNorm2d(1, name="gen.bn_out", dtype=dtype,
                                  gamma_init=output_scale_init, beta_init=output_shift_init)

    def parameters(self) -> list[Parameter]:
        out = self.fc.params()
        for layer in (self.bn0, self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn_out):
            out.extend(layer.params())
        return out

    def forward(self, z: Tensor) -> Tensor:
        """[B, latent_dim] -> [B, mel_bins, frames]."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"generator expects [B, {self.latent_dim}] latents, got {z.shape}")
        b = z.shape[0]
        h = self.fc(z).reshape(b, self.width, self.f0, self.t0)
        h = self.bn0(h).relu()
        h = self.bn1(self.conv1(_upsample2x(h))).relu()
        h = self.bn2(self.conv2(_upsample2x(h))).relu()
        h = self.bn_out(self.conv3(_upsample2x(h)))
        h = h.slice_axis(2, 0, self.mel_bins).slice_axis(3, 0, self.frames)
        return h.reshape(b, self.mel_bins, self.frames)


def build_generator(mel_bins: int, frames: int, latent_dim: int, rng: RngState, dtype=np.float32,
                    width: int = 128) -> Generator:
    return Generator(mel_bins, frames, latent_dim, rng, dtype=dtype, width=width)


def generate(gen: Generator, z: Tensor) -> Tensor:
    return gen.forward(z)


# -- instance discriminator -----------------------------------------------------------


class Discriminator:
    """Projection head over pooled teacher features: 2F_t -> hidden -> unit-norm embedding."""

    def __init__(self, in_dim: int, rng: RngState, hidden: int = 256, out_dim: int = 128, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = Affine(in_dim, hidden, rng, name="disc.fc1", dtype=dtype)
        self.fc2 = Affine(hidden, out_dim, rng, name="disc.fc2", dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return self.fc1.params() + self.fc2.params()

    def project(self, pooled: Tensor) -> Tensor:
        """[B, in_dim] pooled features -> [B, out_dim] rows of unit L2 norm."""
        if pooled.shape[-1] != self.in_dim:
            raise ShapeError(f"discriminator expects width {self.in_dim}, got {pooled.shape[-1]}")
        e = self.fc2(self.fc1(pooled).relu())
        norm_sq = (e * e).sum(axis=1, keepdims=True)
        return e * ((norm_sq + 1e-24) ** -0.5)


def embed_batch(disc: Discriminator, teacher: ModelBundle, x: Tensor) -> Tensor:
    """Teacher frame features -> statistics pooling -> projection -> unit embeddings [B, D]."""
    return disc.project(teacher.forward_pooled(x))


def embed(disc: Discriminator, teacher: ModelBundle, x: Tensor) -> Tensor:
    """Single spectrogram [mel, T] (any valid T) -> unit-norm embedding vector [D]."""
    if x.ndim == 2:
        x = x.reshape(1, x.shape[0], x.shape[1])
    return embed_batch(disc, teacher, x).reshape(-1)
