"""Network assembly: embedding trunk, dilated stack, pyramid context, shortcut head.

The net maps a token-id grid [N, H, W] to per-cell class logits [N, K, H, W].
All activations run channels-last internally; only the public forward output
is channels-first.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from .nn import core
from .nn.core import Parameter
from .nn.layers import Conv2d, Dropout, Embedding, InstanceNorm, ReLU
from .nn.serialize import TensorFormatError, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"GKIE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is structurally unusable."""


@dataclass(frozen=True)
class NetConfig:
    vocab_size: int = 20000
    embedding_dim: int = 128
    trunk_channels: int = 256
    shortcut_channels: int = 64
    num_classes: int = 9
    kernel_h: int = 3
    kernel_w: int = 5
    atrous_rate: int = 2
    aspp_rates: tuple[int, ...] = (4, 8, 16)
    dropout_keep: float = 0.9

    def __post_init__(self):
        for name in ("vocab_size", "embedding_dim", "trunk_channels",
                     "shortcut_channels", "num_classes", "kernel_h", "kernel_w",
                     "atrous_rate"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover the two reserved ids")
        if self.num_classes < 2:
            raise ValueError("need a background class plus at least one field class")
        if not self.aspp_rates:
            raise ValueError("aspp_rates must not be empty")
        if any((not isinstance(r, int)) or r < 1 for r in self.aspp_rates):
            raise ValueError(f"aspp_rates must be positive integers, got {self.aspp_rates}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "aspp_rates" in d:
            d["aspp_rates"] = tuple(d["aspp_rates"])
        return cls(**d)


def receptive_field(config: NetConfig) -> tuple[int, int]:
    """Serial-path receptive field (rows, cols) through the widest branch."""
    def axis(k: int) -> int:
        span = 4 * (k - 1)                      # plain conv stack
        span += 4 * (k - 1) * config.atrous_rate  # dilated stack
        span += (k - 1) * max(config.aspp_rates)  # widest pyramid branch
        return 1 + span
    return axis(config.kernel_h), axis(config.kernel_w)


class TokenGridNet:
    """Fully convolutional per-cell classifier over a token grid."""

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        kh, kw = c.kernel_h, c.kernel_w
        t = c.trunk_channels

        self.embed = Embedding("embed", c.vocab_size, c.embedding_dim, rng)
        self.drop = Dropout(c.dropout_keep)

        self.conv = []
        self.conv_norm = []
        self.conv_relu = []
        in_ch = c.embedding_dim
        for i in range(4):
            self.conv.append(Conv2d(f"conv{i + 1}", in_ch, t, kh, kw, 1, rng))
            self.conv_norm.append(InstanceNorm(f"conv{i + 1}.norm", t))
            self.conv_relu.append(ReLU())
            in_ch = t

        self.atrous = []
        self.atrous_norm = []
        self.atrous_relu = []
        for i in range(4):
            self.atrous.append(
                Conv2d(f"atrous{i + 1}", t, t, kh, kw, c.atrous_rate, rng))
            self.atrous_norm.append(InstanceNorm(f"atrous{i + 1}.norm", t))
            self.atrous_relu.append(ReLU())

        self.branch = []
        self.branch_norm = []
        self.branch_relu = []
        for r in c.aspp_rates:
            self.branch.append(Conv2d(f"aspp_r{r}", t, t, kh, kw, r, rng))
            self.branch_norm.append(InstanceNorm(f"aspp_r{r}.norm", t))
            self.branch_relu.append(ReLU())

        self.pool_proj = Conv2d("aspp_pool", t, t, 1, 1, 1, rng)
        self.pool_relu = ReLU()

        fuse_in = t * (len(c.aspp_rates) + 1)
        self.fuse = Conv2d("fuse", fuse_in, t, 1, 1, 1, rng)
        self.fuse_norm = InstanceNorm("fuse.norm", t)
        self.fuse_relu = ReLU()

        self.short = Conv2d("short", 2 * t, c.shortcut_channels, 1, 1, 1, rng)
        self.short_norm = InstanceNorm("short.norm", c.shortcut_channels)
        self.short_relu = ReLU()

        self.head = Conv2d("head", c.shortcut_channels, c.num_classes, 1, 1, 1, rng)

        self._hw: tuple[int, int] | None = None

    # -- parameter plumbing -------------------------------------------------

    def layers(self):
        out = [self.embed]
        out += self.conv + self.conv_norm
        out += self.atrous + self.atrous_norm
        out += self.branch + self.branch_norm
        out += [self.pool_proj, self.fuse, self.fuse_norm,
                self.short, self.short_norm, self.head]
        return out

    def params(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for layer in self.layers():
            ps.extend(layer.params())
        return ps

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- forward / backward -------------------------------------------------

    def forward(self, ids: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """ids [N, H, W] integer grid -> logits [N, K, H, W]."""
        ids = np.asarray(ids)
        if ids.ndim != 3:
            raise ValueError(f"id grid must be [N, H, W], got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError(f"id grid must be integer, got dtype {ids.dtype}")
        h, w = ids.shape[1], ids.shape[2]

        x = self.embed.forward(ids, training)
        x = self.drop.forward(x, training, rng)
        for i in range(4):
            x = self.conv[i].forward(x, training)
            x = self.conv_norm[i].forward(x, training)
            x = self.conv_relu[i].forward(x, training)
            if i == 0:
                low = x
        for i in range(4):
            x = self.atrous[i].forward(x, training)
            x = self.atrous_norm[i].forward(x, training)
            x = self.atrous_relu[i].forward(x, training)

        pieces = []
        for i in range(len(self.branch)):
            b = self.branch[i].forward(x, training)
            b = self.branch_norm[i].forward(b, training)
            pieces.append(self.branch_relu[i].forward(b, training))
        g = core.gap_fwd(x)
        g = self.pool_proj.forward(g, training)
        g = self.pool_relu.forward(g, training)
        pieces.append(core.upcast_fwd(g, h, w))

        cat = np.concatenate(pieces, axis=-1)
        f = self.fuse.forward(cat, training)
        f = self.fuse_norm.forward(f, training)
        f = self.fuse_relu.forward(f, training)

        sc = np.concatenate([low, f], axis=-1)
        s = self.short.forward(sc, training)
        s = self.short_norm.forward(s, training)
        s = self.short_relu.forward(s, training)

        logits = self.head.forward(s, training)
        if training:
            self._hw = (h, w)
        return core._to_first(logits)

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients from dLoss/dlogits [N, K, H, W]."""
        if self._hw is None:
            raise RuntimeError("backward requires a preceding training-mode forward")
        h, w = self._hw
        t = self.config.trunk_channels

        d = core._to_last(dlogits)
        d = self.head.backward(d)
        d = self.short_relu.backward(d)
        d = self.short_norm.backward(d)
        d = self.short.backward(d)

        dlow = np.ascontiguousarray(d[..., :t])
        df = np.ascontiguousarray(d[..., t:])
        df = self.fuse_relu.backward(df)
        df = self.fuse_norm.backward(df)
        dcat = self.fuse.backward(df)

        dx = None
        for i in range(len(self.branch)):
            db = np.ascontiguousarray(dcat[..., i * t:(i + 1) * t])
            db = self.branch_relu[i].backward(db)
            db = self.branch_norm[i].backward(db)
            db = self.branch[i].backward(db)
            dx = db if dx is None else dx + db
        dg = core.upcast_bwd(np.ascontiguousarray(dcat[..., len(self.branch) * t:]))
        dg = self.pool_relu.backward(dg)
        dg = self.pool_proj.backward(dg)
        dx += core.gap_bwd(dg, h, w)

        for i in reversed(range(4)):
            dx = self.atrous_relu[i].backward(dx)
            dx = self.atrous_norm[i].backward(dx)
            dx = self.atrous[i].backward(dx)
        for i in reversed(range(4)):
            if i == 0:
                dx = dx + dlow
            dx = self.conv_relu[i].backward(dx)
            dx = self.conv_norm[i].backward(dx)
            dx = self.conv[i].backward(dx)

        dx = self.drop.backward(dx)
        self.embed.backward(dx)
        self._hw = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, model: TokenGridNet,
                    classes: list[str] | None = None,
                    optimizer_state: dict | None = None) -> None:
    """Write magic, version, JSON config header, then named tensor records."""
    if classes is not None and len(classes) != model.config.num_classes:
        raise CheckpointError(
            f"{len(classes)} class names for a {model.config.num_classes}-way head")
    header = {"net": model.config.to_dict(), "classes": classes}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.params()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        write_tensor(buf, p.name, p.data)
    if optimizer_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<q", int(optimizer_state["t"])))
        moments = [("m", k, a) for k, a in sorted(optimizer_state["m"].items())]
        moments += [("v", k, a) for k, a in sorted(optimizer_state["v"].items())]
        buf.write(struct.pack("<I", len(moments)))
        for kind, k, a in moments:
            write_tensor(buf, f"{kind}.{k}", a)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[TokenGridNet, list[str] | None, dict | None]:
    """Rebuild a model from disk.  Raises CheckpointError on anything malformed."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fh = io.BytesIO(data)
    try:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic bytes: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise CheckpointError("truncated config header")
        try:
            header = json.loads(raw.decode("utf-8"))
            config = NetConfig.from_dict(header["net"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"invalid config header: {exc}") from exc
        classes = header.get("classes")
        if classes is not None:
            if (not isinstance(classes, list)
                    or not all(isinstance(s, str) for s in classes)):
                raise CheckpointError("class list in header must be strings")
            if len(classes) != config.num_classes:
                raise CheckpointError(
                    f"header lists {len(classes)} classes but the head has "
                    f"{config.num_classes} outputs")

        model = TokenGridNet(config, seed=0)
        by_name = {p.name: p for p in model.params()}
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(by_name):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, model needs {len(by_name)}")
        seen = set()
        for _ in range(count):
            name, arr = read_tensor(fh)
            if name not in by_name:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if name in seen:
                raise CheckpointError(f"duplicate tensor {name!r}")
            p = by_name[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=False)
            p.grad = np.zeros_like(p.data)
            seen.add(name)

        opt_state = None
        flag = fh.read(1)
        if len(flag) != 1:
            raise CheckpointError("truncated optimizer flag")
        if flag[0] == 1:
            (t,) = struct.unpack("<q", fh.read(8))
            (nmom,) = struct.unpack("<I", fh.read(4))
            m: dict[str, np.ndarray] = {}
            v: dict[str, np.ndarray] = {}
            for _ in range(nmom):
                name, arr = read_tensor(fh)
                kind, _, pname = name.partition(".")
                if kind not in ("m", "v") or pname not in by_name:
                    raise CheckpointError(f"unexpected optimizer tensor {name!r}")
                (m if kind == "m" else v)[pname] = arr
            if set(m) != set(by_name) or set(v) != set(by_name):
                raise CheckpointError("optimizer state does not cover all parameters")
            opt_state = {"t": t, "m": m, "v": v}
        elif flag[0] != 0:
            raise CheckpointError(f"bad optimizer flag byte {flag[0]}")
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    except (struct.error, TensorFormatError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return model, classes, opt_state
