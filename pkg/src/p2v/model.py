"""Encoder and decoder networks plus the checkpoint container format.

The encoder follows the classic shared-MLP design: a learned 3x3 input
transform, per-point layers 3-64-64 with a 64x64 feature transform in
between, per-point layers 64-128-1024, channelwise max-pool, then a
fully connected head that emits a unit-normalized code. The decoder is a
plain fully connected stack ending in decoder_points * 3 coordinates.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DatasetError, InvalidInputError, NumericalError

CHECKPOINT_MAGIC = b"P2VK"
CHECKPOINT_VERSION = 1

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


@dataclass
class ArchConfig:
    """Layer widths; defaults follow the published table."""

    trunk: tuple = (64, 64, 128, 1024)
    head_hidden: tuple = (512, 256)
    tnet_pointwise: tuple = (64, 128, 256)
    tnet_fc: int = 128
    decoder_hidden: tuple = (256, 512, 1024)
    dropout: float = 0.3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1  # fraction of the new batch statistic kept per step

    def to_dict(self):
        return {
            "trunk": list(self.trunk),
            "head_hidden": list(self.head_hidden),
            "tnet_pointwise": list(self.tnet_pointwise),
            "tnet_fc": int(self.tnet_fc),
            "decoder_hidden": list(self.decoder_hidden),
            "dropout": float(self.dropout),
            "bn_eps": float(self.bn_eps),
            "bn_momentum": float(self.bn_momentum),
        }

    @classmethod
    def from_dict(cls, data):
        kwargs = dict(data)
        for key in ("trunk", "head_hidden", "tnet_pointwise", "decoder_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _check_finite(name, tensor):
    if not torch.isfinite(tensor).all():
        raise NumericalError("non-finite activations", layer=name)


class TransformNet(nn.Module):
    """Emits a k x k transform as a learned residual on the identity.

    The final layer starts at zero, so the emitted matrix is exactly the
    identity before any training step.
    """

    def __init__(self, k, pointwise, fc):
        super().__init__()
        self.k = k
        layers = []
        prev = k
        for width in pointwise:
            layers.append(nn.Linear(prev, width))
            prev = width
        self.pointwise = nn.ModuleList(layers)
        self.fc1 = nn.Linear(prev, fc)
        self.fc2 = nn.Linear(fc, k * k)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        # x: (B, N, k)
        h = x
        for layer in self.pointwise:
            h = torch.relu(layer(h))
        h = h.max(dim=1).values
        h = torch.relu(self.fc1(h))
        delta = self.fc2(h)
        eye = torch.eye(self.k, dtype=x.dtype, device=x.device).reshape(1, self.k * self.k)
        return (delta + eye).reshape(-1, self.k, self.k)


class Encoder(nn.Module):
    def __init__(self, code_size, arch):
        super().__init__()
        self.code_size = code_size
        self.arch = arch
        t = arch.trunk
        self.input_transform = TransformNet(3, arch.tnet_pointwise, arch.tnet_fc)
        self.feature_transform = TransformNet(t[0], arch.tnet_pointwise, arch.tnet_fc)
        widths = [3] + list(t)
        self.trunk = nn.ModuleList(nn.Linear(widths[i], widths[i + 1]) for i in range(len(t)))
        self.bns = nn.ModuleList(
            nn.BatchNorm1d(w, eps=arch.bn_eps, momentum=arch.bn_momentum) for w in t
        )
        head = []
        prev = t[-1]
        for width in arch.head_hidden:
            head.append(nn.Linear(prev, width))
            prev = width
        self.head = nn.ModuleList(head)
        self.head_out = nn.Linear(prev, code_size)
        self.drop = nn.Dropout(arch.dropout)

    def _bn(self, i, x):
        # BatchNorm1d wants (B, C, N) for per-channel statistics
        return self.bns[i](x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x):
        _check_finite("input", x)
        t_in = self.input_transform(x)
        _check_finite("input_transform", t_in)
        x = torch.bmm(x, t_in)
        x = torch.relu(self._bn(0, self.trunk[0](x)))
        _check_finite("trunk_0", x)
        t_feat = self.feature_transform(x)
        _check_finite("feature_transform", t_feat)
        x = torch.bmm(x, t_feat)
        for i in range(1, len(self.trunk)):
            x = torch.relu(self._bn(i, self.trunk[i](x)))
            _check_finite(f"trunk_{i}", x)
        x = x.max(dim=1).values
        for i, layer in enumerate(self.head):
            x = self.drop(torch.relu(layer(x)))
            _check_finite(f"head_{i}", x)
        x = self.head_out(x)
        _check_finite("head_out", x)
        norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
        if (norm == 0).any():
            raise NumericalError("zero-norm code cannot be normalized", layer="normalize")
        return x / norm


class Decoder(nn.Module):
    def __init__(self, code_size, decoder_points, hidden):
        super().__init__()
        self.code_size = code_size
        self.decoder_points = decoder_points
        layers = []
        prev = code_size
        for width in hidden:
            layers.append(nn.Linear(prev, width))
            prev = width
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(prev, decoder_points * 3)

    def forward(self, e):
        if e.shape[-1] != self.code_size:
            raise InvalidInputError(
                f"embedding has dimension {e.shape[-1]}, decoder expects {self.code_size}"
            )
        h = e
        for i, layer in enumerate(self.hidden):
            h = torch.relu(layer(h))
            _check_finite(f"decoder_{i}", h)
        h = self.out(h)
        _check_finite("decoder_out", h)
        return h.reshape(*e.shape[:-1], self.decoder_points, 3)


class PointsAutoencoder(nn.Module):
    def __init__(self, code_size, decoder_points, arch=None):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.code_size = code_size
        self.decoder_points = decoder_points
        self.encoder = Encoder(code_size, self.arch)
        self.decoder = Decoder(code_size, decoder_points, self.arch.decoder_hidden)

    def encode(self, clouds):
        return self.encoder(_as_batch(clouds, self))

    def decode(self, e):
        if isinstance(e, np.ndarray):
            e = torch.from_numpy(np.ascontiguousarray(e))
        return self.decoder(e.to(next(self.parameters()).dtype))

    def forward(self, clouds):
        e = self.encode(clouds)
        return e, self.decoder(e)


def _as_batch(clouds, model):
    dtype = next(model.parameters()).dtype
    if isinstance(clouds, np.ndarray):
        clouds = torch.from_numpy(np.ascontiguousarray(clouds))
    clouds = clouds.to(dtype)
    if clouds.ndim == 2:
        clouds = clouds.unsqueeze(0)
    if clouds.ndim != 3 or clouds.shape[-1] != 3 or clouds.shape[1] < 1:
        raise InvalidInputError(f"expected clouds of shape (B, N, 3), got {tuple(clouds.shape)}")
    return clouds


def init_params(code_size, decoder_points, rng_seed, arch=None, dtype=torch.float32):
    """Build a model with deterministic, fan-in-scaled initialization.

    Transform sub-networks emit exact identities at step 0.
    """
    if code_size < 2:
        raise InvalidInputError(f"code_size must be >= 2, got {code_size}")
    if decoder_points < 4:
        raise InvalidInputError(f"decoder_points must be >= 4, got {decoder_points}")
    torch.manual_seed(rng_seed)
    model = PointsAutoencoder(code_size, decoder_points, arch)
    return model.to(dtype)


def embed_cloud(model, cloud):
    """Eval-mode embedding of one centered cloud as a float64 vector."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            e = model.encode(cloud)
    finally:
        model.train(was_training)
    return e.squeeze(0).numpy().astype(np.float64)


def save_checkpoint(path, model, config, rng_seed, epoch, extra=None):
    """Write the versioned checkpoint container (see docs/checkpoint.md).

    Layout: magic, version, uint64 header length, JSON header, then the
    raw little-endian tensor buffers in the header's order. No
    timestamps anywhere, so identical runs produce identical bytes.
    """
    state = model.state_dict()
    names = sorted(state)
    tensors = []
    buffers = []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _TORCH_DTYPES:
            raise InvalidInputError(f"unsupported tensor dtype {dtype} in state dict")
        buf = t.numpy().tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(t.shape), "nbytes": len(buf)})
        buffers.append(buf)
    header = {
        "format": "p2v-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config,
        "rng_seed": rng_seed,
        "epoch": epoch,
        "extra": extra or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path):
    """Read a checkpoint back into a freshly built model; returns (model, header)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode())
    config = header["config"]
    arch = ArchConfig.from_dict(config["arch"]) if "arch" in config else ArchConfig()
    model = PointsAutoencoder(config["code_size"], config["decoder_points"], arch)
    if config.get("dtype") == "float64":
        model = model.double()

    state = {}
    offset = 16 + header_len
    for meta in header["tensors"]:
        count = meta["nbytes"]
        dtype = _TORCH_DTYPES[meta["dtype"]]
        arr = np.frombuffer(raw[offset : offset + count], dtype=meta["dtype"]).copy()
        state[meta["name"]] = torch.from_numpy(arr).to(dtype).reshape(meta["shape"])
        offset += count
    if offset != len(raw):
        raise DatasetError(f"{path}: {len(raw) - offset} trailing bytes")
    model.load_state_dict(state)
    return model, header
