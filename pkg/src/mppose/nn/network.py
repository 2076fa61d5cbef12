"""Single-encoder / multi-decoder reconstruction network.

One convolutional encoder maps object crops to latent codes; each object
owns a decoder that reconstructs clean views from those codes. Training
routes every sample's code to its own object's decoder only, so the encoder
sees gradients from the whole batch while a decoder sees only its sub-batch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import Conv2d, Dense

CHECKPOINT_MAGIC = b"MPAE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor; the desk default is a scaled-down variant of
    the reference four-conv design (expressible here via `paper_scale`)."""

    input_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128)
    kernel: int = 5
    latent_dim: int = 32
    n_objects: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ValueError("input size must be divisible by 2^len(channels)")
        if self.n_objects < 1:
            raise ValueError("need at least one object")

    @classmethod
    def paper_scale(cls, n_objects: int) -> "ArchConfig":
        return cls(
            input_size=128,
            channels=(128, 256, 512, 512),
            latent_dim=128,
            n_objects=n_objects,
        )

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // (2 ** len(self.channels))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class MPNetwork:
    """Shared encoder plus one reconstruction decoder per object."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.arch = arch
        dt = arch.np_dtype
        k = arch.kernel
        side = arch.bottleneck_size
        flat = side * side * arch.channels[-1]

        self.encoder_convs = []
        cin = 3
        for cout in arch.channels:
            self.encoder_convs.append(Conv2d(cin, cout, k, stride=2, rng=rng, dtype=dt))
            cin = cout
        self.encoder_head = Dense(flat, arch.latent_dim, rng, dtype=dt)

        # decoder conv chain mirrors the encoder filters; upsampling after
        # each conv replaces the encoder's striding
        dec_channels = tuple(reversed(arch.channels))
        self.decoders = []
        for _ in range(arch.n_objects):
            dense = Dense(arch.latent_dim, flat, rng, dtype=dt)
            convs = []
            cin = arch.channels[-1]
            for cout in dec_channels:
                convs.append(Conv2d(cin, cout, k, stride=1, rng=rng, dtype=dt))
                cin = cout
            out_conv = Conv2d(cin, 3, k, stride=1, rng=rng, dtype=dt)
            self.decoders.append({"dense": dense, "convs": convs, "out": out_conv})

    # -- parameter plumbing ------------------------------------------------

    def encoder_params(self) -> list[ad.Tensor]:
        ps = []
        for c in self.encoder_convs:
            ps += c.params()
        ps += self.encoder_head.params()
        return ps

    def decoder_params(self, j: int) -> list[ad.Tensor]:
        d = self.decoders[j]
        ps = d["dense"].params()
        for c in d["convs"]:
            ps += c.params()
        ps += d["out"].params()
        return ps

    def params(self) -> list[ad.Tensor]:
        ps = self.encoder_params()
        for j in range(len(self.decoders)):
            ps += self.decoder_params(j)
        return ps

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- forward paths -------------------------------------------------------

    def _check_input(self, x: np.ndarray):
        s = self.arch.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ValueError(f"expected input of shape (B, {s}, {s}, 3), got {x.shape}")

    def encode_t(self, x: np.ndarray) -> ad.Tensor:
        self._check_input(x)
        t = ad.Tensor(np.ascontiguousarray(x, dtype=self.arch.np_dtype))
        for conv in self.encoder_convs:
            t = ad.relu(conv(t))
        t = ad.reshape(t, (len(x), -1))
        return self.encoder_head(t)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Latent codes (B, m) of an image batch."""
        return self.encode_t(x).data

    def decode_t(self, z: ad.Tensor, j: int) -> ad.Tensor:
        d = self.decoders[j]
        side = self.arch.bottleneck_size
        t = d["dense"](z)
        t = ad.reshape(t, (-1, side, side, self.arch.channels[-1]))
        for conv in d["convs"]:
            t = ad.upsample2(ad.relu(conv(t)))
        return ad.sigmoid(d["out"](t))

    def decode_all_t(self, z: ad.Tensor) -> ad.Tensor:
        """Route a balanced, object-ordered batch through every decoder at once.

        Row block j (of n_objects equal blocks) goes through decoder j; the
        grouped ops share the im2col work all decoders would repeat.
        """
        ds = self.decoders
        side = self.arch.bottleneck_size
        t = ad.dense_grouped(
            z, [d["dense"].w for d in ds], [d["dense"].b for d in ds]
        )
        t = ad.reshape(t, (-1, side, side, self.arch.channels[-1]))
        for stage in range(len(ds[0]["convs"])):
            t = ad.conv2d_grouped(
                t,
                [d["convs"][stage].w for d in ds],
                [d["convs"][stage].b for d in ds],
                stride=1,
            )
            t = ad.upsample2(ad.relu(t))
        t = ad.conv2d_grouped(
            t, [d["out"].w for d in ds], [d["out"].b for d in ds], stride=1
        )
        return ad.sigmoid(t)

    def reconstruct(self, x: np.ndarray, j: int) -> np.ndarray:
        return self.decode_t(self.encode_t(x), j).data

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


def multipath_loss(
    net: MPNetwork,
    inputs: np.ndarray,
    targets: np.ndarray,
    object_ids: np.ndarray,
) -> ad.Tensor:
    """Summed per-sample L2 reconstruction norm with per-object decoder routing."""
    if not (len(inputs) == len(targets) == len(object_ids)):
        raise ValueError("batch arrays must have equal length")
    object_ids = np.asarray(object_ids)
    if object_ids.min() < 0 or object_ids.max() >= net.arch.n_objects:
        raise ValueError("object id out of range")
    z = net.encode_t(inputs)

    n = net.arch.n_objects
    balanced = len(object_ids) % n == 0 and np.array_equal(
        object_ids, np.repeat(np.arange(n), len(object_ids) // n)
    )
    if balanced:
        pred = net.decode_all_t(z)
        return ad.l2_reconstruction_loss(pred, targets.astype(net.arch.np_dtype))

    terms = []
    for j in np.unique(object_ids):
        idx = np.flatnonzero(object_ids == j)
        zj = ad.gather_rows(z, idx)
        pred = net.decode_t(zj, int(j))
        terms.append(
            ad.l2_reconstruction_loss(pred, targets[idx].astype(net.arch.np_dtype))
        )
    return ad.add_scalars(terms)


# ---------------------------------------------------------------------------
# checkpoint persistence: MPAE | version | arch json | f32 params | adam state


def save_checkpoint(path: str, net: MPNetwork, adam_state: dict | None = None) -> None:
    arch_json = json.dumps(asdict(net.arch), sort_keys=True).encode("utf-8")
    params = net.params()
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<Q", sum(p.data.size for p in params)))
        fh.write(blob)
        if adam_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", adam_state["step"]))
            for key in ("m", "v"):
                for arr in adam_state[key]:
                    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[MPNetwork, dict | None]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (alen,) = struct.unpack_from("<I", data, off)
    off += 4
    arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in json.loads(data[off: off + alen]).items()})
    off += alen
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    net = MPNetwork(arch)
    if count != net.param_count():
        raise CheckpointError(f"{path}: parameter count mismatch")
    if off + 4 * count > len(data):
        raise CheckpointError(f"{path}: truncated parameter blob")

    def read_blob():
        nonlocal off
        arrays = []
        for p in net.params():
            n = p.data.size
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(p.shape)
            arrays.append(arr.astype(arch.np_dtype))
            off += 4 * n
        return arrays

    for p, arr in zip(net.params(), read_blob()):
        p.data = arr
    if off >= len(data):
        raise CheckpointError(f"{path}: missing optimizer flag")
    (flag,) = struct.unpack_from("<B", data, off)
    off += 1
    adam_state = None
    if flag:
        (step,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + 2 * 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated optimizer state")
        adam_state = {"step": step, "m": read_blob(), "v": read_blob()}
    return net, adam_state
