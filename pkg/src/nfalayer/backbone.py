"""U-shaped segmentation network with an NFA head (or a plain sigmoid head), and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import numerics as nx
from .errors import FormatError, ParameterError, UnsupportedVersionError
from .nfa import (
    FORMS,
    ActivationConfig,
    BasicNFABlock,
    ECAScaleWeights,
    SignificanceMap,
    SpatialNFABlock,
    fuse_scales,
    sigm_alpha,
    upsample_map,
)
from .numerics.layers import Conv2d, ConvBlock, Layer
from .numerics.tensor import Parameter, Tensor

HEADS = ("nfa", "plain")


@dataclass
class NetworkSpec:
    levels: int = 3
    channels: tuple = (8, 16, 32)
    in_channels: int = 1
    head: str = "nfa"
    sigma_form: str = "elliptical"
    multiscale: bool = True
    use_eca: bool = True
    use_spatial_block: bool = False
    reduce: str = "max"
    alpha: float = 5e-4
    reg_weight: float = 0.05
    nfa_channels: int = 2
    window: int = 7
    heads: int = 1
    n_test_mode: str = "output"  # "output": every scale uses the output pixel count; "scale": its own

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ParameterError(f"channels list has {len(self.channels)} entries for {self.levels} levels")
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.sigma_form not in FORMS:
            raise ParameterError(f"sigma_form must be one of {FORMS}, got {self.sigma_form!r}")
        if self.reduce not in ("max", "min"):
            raise ParameterError(f"reduce must be max or min, got {self.reduce!r}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.window % 2 == 0:
            raise ParameterError(f"attention window must be odd, got {self.window}")
        if self.n_test_mode not in ("output", "scale"):
            raise ParameterError(f"n_test_mode must be output or scale, got {self.n_test_mode!r}")

    @property
    def threshold(self) -> float:
        """Default binarization threshold for this head."""
        return 0.1 if self.head == "nfa" else 0.5

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class ForwardResult:
    scores: Tensor
    maps: list = field(default_factory=list)  # per-scale SignificanceMaps at full resolution
    fused: Optional[SignificanceMap] = None
    scale_weights: Optional[Tensor] = None


class UNet(Layer):
    """Encoder (two conv blocks + max-pool per level), bilinear decoder with skip concatenation."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        ch = spec.channels
        self.encoder = []
        c_prev = spec.in_channels
        for lvl, c in enumerate(ch):
            self.encoder.append([ConvBlock(f"enc{lvl}.a", c_prev, c, rng), ConvBlock(f"enc{lvl}.b", c, c, rng)])
            c_prev = c
        self.decoder = {}
        for lvl in range(spec.levels - 2, -1, -1):
            self.decoder[lvl] = [
                ConvBlock(f"dec{lvl}.a", ch[lvl + 1] + ch[lvl], ch[lvl], rng),
                ConvBlock(f"dec{lvl}.b", ch[lvl], ch[lvl], rng),
            ]
        self.encoder_layers = [b for pair in self.encoder for b in pair]
        self.decoder_layers = [b for lvl in sorted(self.decoder) for b in self.decoder[lvl]]
        self.trunk = self.encoder_layers + self.decoder_layers
        if spec.head == "plain":
            self.plain = Conv2d("head.plain", ch[0], 1, 1, rng)
        else:
            scales = range(spec.levels) if spec.multiscale else range(1)
            self.nfa_blocks = [
                BasicNFABlock(f"head.nfa{s}", ch[s], spec.nfa_channels, spec.sigma_form, rng) for s in scales
            ]
            self.spatial = (
                [SpatialNFABlock("head.spatial0", ch[0], spec.nfa_channels, spec.sigma_form, rng,
                                 window=spec.window, heads=spec.heads)]
                if spec.use_spatial_block else []
            )
            self.eca = [ECAScaleWeights("head.eca", rng)] if spec.use_eca else []

    # parameters() walks attributes; the flattened lists above would double count
    def _children(self):
        for layer in self.trunk:
            yield layer
        for attr in ("plain",):
            if hasattr(self, attr):
                yield getattr(self, attr)
        for attr in ("nfa_blocks", "spatial", "eca"):
            yield from getattr(self, attr, [])

    def named_parameters(self) -> dict:
        params = {}
        for p in self.parameters():
            if p.name in params:
                raise ParameterError(f"duplicate parameter name {p.name}")
            params[p.name] = p
        return params

    def trunk_parameters(self) -> list:
        return [p for layer in self.trunk for p in layer.parameters()]

    def head_parameters(self) -> list:
        trunk = {id(p) for p in self.trunk_parameters()}
        return [p for p in self.parameters() if id(p) not in trunk]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def __call__(self, image, train: bool = True) -> ForwardResult:
        return forward(self, image, train)


def forward(model: UNet, image, train: bool = True) -> ForwardResult:
    """Run the network on a (n, in_channels, h, w) batch; scores lie in [0, 1)."""
    spec = model.spec
    x = nx.as_tensor(image)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ParameterError(f"expected (n, {spec.in_channels}, h, w) input, got {x.shape}")
    n, _, h, w = x.shape
    if h % spec.divisor or w % spec.divisor:
        raise ParameterError(f"height and width must be divisible by {spec.divisor} (2^(levels-1)), got {h}x{w}")
    skips = []
    for lvl, (a, b) in enumerate(model.encoder):
        x = b(a(x, train), train)
        skips.append(x)
        if lvl < spec.levels - 1:
            x = nx.maxpool2x2(x)
    scale_features = {spec.levels - 1: x}
    for lvl in range(spec.levels - 2, -1, -1):
        a, b = model.decoder[lvl]
        x = nx.concat_channels([nx.bilinear_upsample(x, 2), skips[lvl]])
        x = b(a(x, train), train)
        scale_features[lvl] = x

    if spec.head == "plain":
        return ForwardResult(nx.sigmoid(model.plain(scale_features[0])))

    # with "output", every scale is judged against the number of output pixels, so all
    # upsampled maps share the baseline -ln(h*w) and max-fusion cannot lift the background
    n_test = h * w if spec.n_test_mode == "output" else None
    maps = []
    for s, block in enumerate(model.nfa_blocks):
        maps.append(upsample_map(block(scale_features[s], train, scale_index=s, n_test=n_test), 2 ** s))
    for block in model.spatial:
        maps.append(block(scale_features[0], train, scale_index=0, n_test=n_test))
    weights = model.eca[0](maps) if model.eca else None
    fused = fuse_scales(maps, weights, reduce=spec.reduce)
    scores = sigm_alpha(fused, ActivationConfig(spec.alpha, fused.n_test))
    return ForwardResult(scores, maps, fused, weights)


def freeze_statistics(model: UNet, frozen: bool = True) -> None:
    """Pin each NFA block's background model to the one estimated on its last call.

    Used by finite-difference checks, where re-estimating the (detached)
    statistics at every perturbed input would measure a different function.
    """
    for block in getattr(model, "nfa_blocks", []) + getattr(model, "spatial", []):
        if frozen and block.last_model is None:
            raise ParameterError("run a forward pass before freezing statistics")
        block.frozen_model = block.last_model if frozen else None


def count_parameters(params) -> int:
    return int(sum(p.size for p in params))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DNFA"
VERSION = 1
DTYPE_F32, DTYPE_F64, DTYPE_UTF8 = 1, 2, 3
_DTYPES = {DTYPE_F32: "<f4", DTYPE_F64: "<f8", DTYPE_UTF8: "u1"}
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    spec: NetworkSpec
    arrays: dict  # parameter name -> array, plus "opt/<name>" accumulators and batch-norm buffers
    epoch: int = 0
    seed: int = 0

    def build_model(self) -> UNet:
        model = UNet(self.spec, self.seed)
        load_state(model, self.arrays)
        return model


def model_state(model: UNet) -> dict:
    arrays = {}
    for name, p in model.named_parameters().items():
        arrays[name] = p.data.copy()
        arrays[f"opt/{name}"] = p.accumulator.copy()
    for name, bn in model.buffers():
        arrays[f"{name}.running_mean"] = bn.state.running_mean.copy()
        arrays[f"{name}.running_var"] = bn.state.running_var.copy()
        arrays[f"{name}.populated"] = np.array([1.0 if bn.state.populated else 0.0])
    return arrays


def load_state(model: UNet, arrays: dict) -> None:
    expected = model_state(model)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise FormatError(f"checkpoint does not match the network spec (missing {missing[:5]}, unexpected {extra[:5]})")
    for key, ref in expected.items():
        if arrays[key].shape != ref.shape:
            raise FormatError(f"shape mismatch for {key}: file has {arrays[key].shape}, spec needs {ref.shape}")
    params = model.named_parameters()
    for name, p in params.items():
        p.data[...] = arrays[name]
        p.accumulator[...] = arrays[f"opt/{name}"]
    for name, bn in model.buffers():
        bn.state.running_mean = arrays[f"{name}.running_mean"].copy()
        bn.state.running_var = arrays[f"{name}.running_var"].copy()
        bn.state.populated = bool(arrays[f"{name}.populated"][0])


def make_checkpoint(model: UNet, epoch: int = 0) -> Checkpoint:
    return Checkpoint(model.spec, model_state(model), epoch, model.seed)


def _entry(name: str, code: int, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write magic, u16 version, u32 entry count, entries, then CRC32 of the entries."""
    meta = json.dumps(
        {"spec": ckpt.spec.to_dict(), "epoch": ckpt.epoch, "seed": ckpt.seed, "code_version": __version__},
        sort_keys=True,
    ).encode("utf-8")
    entries = [_entry(META_KEY, DTYPE_UTF8, np.frombuffer(meta, dtype=np.uint8))]
    for name in sorted(ckpt.arrays):
        entries.append(_entry(name, DTYPE_F64, np.asarray(ckpt.arrays[name], dtype=np.float64)))
    payload = struct.pack("<I", len(entries)) + b"".join(entries)
    blob = MAGIC + struct.pack("<H", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    payload, footer = blob[6:-4], blob[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", footer)[0]:
        raise FormatError(f"{path}: CRC mismatch (truncated or corrupt file)")
    arrays = {}
    meta = None
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        off = 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", payload, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            dtype = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(payload):
                raise FormatError(f"{path}: entry {name} runs past end of file")
            arr = np.frombuffer(payload[off:off + nbytes], dtype=dtype).reshape(dims)
            off += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                arrays[name] = arr.astype(np.float64)
        if off != len(payload):
            raise FormatError(f"{path}: {len(payload) - off} trailing bytes after entry table")
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed entry table ({exc})") from None
    if meta is None:
        raise FormatError(f"{path}: missing metadata entry")
    spec = NetworkSpec.from_dict(meta["spec"])
    ckpt = Checkpoint(spec, arrays, int(meta["epoch"]), int(meta["seed"]))
    load_state(UNet(spec, ckpt.seed), arrays)  # validates the shape table against the spec
    return ckpt
