"""The embedding network: a small conv net or an MLP ending in row-wise l2 normalisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .errors import ContractError, IncompatibleCheckpointError
from .serialization import read_tensor_file, write_tensor_file

KINDS = ("small_conv", "mlp")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "small_conv"
    embed_dim: int = 128
    hidden: tuple[int, ...] = (256,)  # mlp hidden widths
    channels: tuple[int, ...] = (32, 64, 128)  # small_conv channel plan
    input_shape: tuple[int, int, int] = (3, 32, 32)
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.embed_dim < 2:
            raise ContractError("embed_dim must be >= 2")
        if self.kind == "small_conv":
            H, W = self.input_shape[1:]
            f = 2 ** len(self.channels)
            if H % f or W % f:
                raise ContractError(f"input {H}x{W} cannot be pooled {len(self.channels)} times")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "mlp":
            widths = [int(np.prod(self.input_shape)), *self.hidden, self.embed_dim]
            for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"fc{k}.weight"] = (fan_out, fan_in)
                shapes[f"fc{k}.bias"] = (fan_out,)
        else:
            c_in = self.input_shape[0]
            for k, c_out in enumerate(self.channels):
                shapes[f"conv{k}.weight"] = (c_out, c_in, 3, 3)
                shapes[f"conv{k}.bias"] = (c_out,)
                c_in = c_out
            shapes["fc.weight"] = (self.embed_dim, c_in)
            shapes["fc.bias"] = (self.embed_dim,)
        return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init(cfg: EncoderConfig) -> EncoderParams:
    """He-normal weights (variance 2/fan_in), zero biases; deterministic in ``init_seed``."""
    tensors = {}
    for name, shape in cfg.layer_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            gen = rngmod.stream(cfg.init_seed, "init", name)
            data = (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderParams(cfg, tensors)


def _linear(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(h, ad.transpose(w)), b)


def pre_normalization(params: EncoderParams, batch) -> Tensor:
    """Activations of the final fully connected layer, before normalisation."""
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != tuple(cfg.input_shape):
        raise ContractError(f"expected inputs of shape B×{cfg.input_shape}, got {x.shape}")
    if cfg.kind == "mlp":
        h = ad.reshape(x, (x.shape[0], -1))
        n = len(cfg.hidden) + 1
        for k in range(n):
            h = _linear(h, params[f"fc{k}.weight"], params[f"fc{k}.bias"])
            if k < n - 1:
                h = ad.relu(h)
        return h
    h = x
    for k in range(len(cfg.channels)):
        h = ad.conv2d(h, params[f"conv{k}.weight"], params[f"conv{k}.bias"], padding=1)
        h = ad.maxpool2d(ad.relu(h), 2)
    h = ad.global_avgpool(h)
    return _linear(h, params["fc.weight"], params["fc.bias"])


def embed(params: EncoderParams, batch, pre_norm_scale: float = 1.0) -> Tensor:
    """Map a B×3×32×32 batch to B×d unit-norm embeddings.

    ``pre_norm_scale`` multiplies the final activation before normalisation;
    it exists so tests can probe scale invariance.
    """
    z = pre_normalization(params, batch)
    if pre_norm_scale != 1.0:
        z = ad.scale(z, pre_norm_scale)
    return ad.l2_normalize_rows(z)


def embed_numpy(params: EncoderParams, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embeddings of a preprocessed float array without recording a tape."""
    out = []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(embed(params, inputs[start : start + batch_size]).data)
    return np.concatenate(out).astype(np.float32)


def save_params(params: EncoderParams, path) -> None:
    write_tensor_file(path, params.arrays(), meta={"encoder": encoder_meta(params.config)}, kind="encoder")


def encoder_meta(cfg: EncoderConfig) -> dict:
    return {
        "kind": cfg.kind,
        "embed_dim": cfg.embed_dim,
        "hidden": list(cfg.hidden),
        "channels": list(cfg.channels),
        "input_shape": list(cfg.input_shape),
        "init_seed": cfg.init_seed,
    }


def check_compatible(arrays: dict[str, np.ndarray], cfg: EncoderConfig) -> None:
    want = cfg.layer_shapes()
    missing = sorted(set(want) - set(arrays))
    extra = sorted(set(arrays) - set(want))
    if missing or extra:
        raise IncompatibleCheckpointError(f"checkpoint tensors differ from encoder: missing {missing}, unexpected {extra}")
    for name, shape in want.items():
        if tuple(arrays[name].shape) != shape:
            raise IncompatibleCheckpointError(
                f"{name}: checkpoint has shape {tuple(arrays[name].shape)}, encoder expects {shape}"
            )


def params_from_arrays(arrays: dict[str, np.ndarray], cfg: EncoderConfig) -> EncoderParams:
    check_compatible(arrays, cfg)
    return EncoderParams(cfg, {k: Tensor(arrays[k], requires_grad=True, name=k) for k in cfg.layer_shapes()})


def load_params(path, cfg: EncoderConfig) -> EncoderParams:
    arrays, _ = read_tensor_file(path, kind="encoder")
    return params_from_arrays(arrays, cfg)
