"""The shared-trunk ensemble: one stack of convolutional stages whose
feature maps feed N structurally identical classifier branches.

A branch sees the trunk output through its own conv stage and two dense
layers ending in a softmax. Branch argmax decisions are counted into a
vote vector; the softmax of the (temperature-scaled) votes is the soft
target distribution used when retraining on unlabelled samples.

Checkpoints use a fixed little-endian binary layout (magic ``BNE1``)
with a trailing CRC32 so round trips are bit-exact.
"""

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    BatchNorm2d,
    Conv2d,
    Dense,
    MaxPool2,
    NumericsError,
    SoftmaxCrossEntropy,
    Tanh,
    conv_output_size,
    conv_padding,
    softmax,
)


class CheckpointError(RuntimeError):
    """Raised for malformed, truncated, or corrupted checkpoint files."""


@dataclass
class ArchConfig:
    input_channels: int = 1
    input_size: int = 96
    trunk_filters: tuple = (32, 64, 64)
    kernel: int = 5
    stride: int = 1
    branch_filters: int = 32
    hidden_units: int = 30
    num_classes: int = 8
    num_branches: int = 5
    padding: str = "same"
    vote_temperature: float = 1.0

    def __post_init__(self):
        self.trunk_filters = tuple(int(f) for f in self.trunk_filters)
        if self.num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.vote_temperature <= 0:
            raise ValueError("vote_temperature must be positive")
        conv_padding(self.kernel, self.padding)  # validates mode/kernel

    def spatial_sizes(self):
        """Feature-map side length after each conv+pool stage (trunk then branch)."""
        pad = conv_padding(self.kernel, self.padding)
        size = self.input_size
        sizes = []
        for _ in range(len(self.trunk_filters) + 1):
            size = conv_output_size(size, self.kernel, self.stride, pad)
            if size < 2:
                raise ValueError("spatial collapse: feature map smaller than pool window")
            size //= 2
            sizes.append(size)
        return sizes


class ConvStage:
    """conv -> batchnorm -> tanh -> 2x2 maxpool."""

    def __init__(self, in_channels, filters, config, rng, dtype):
        self.conv = Conv2d(in_channels, filters, config.kernel, config.stride,
                           config.padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(filters, dtype=dtype)
        self.act = Tanh()
        self.pool = MaxPool2()

    def forward(self, x, train):
        return self.pool.forward(self.act.forward(self.bn.forward(self.conv.forward(x), train)))

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.act.backward(self.pool.backward(dy))))


class Branch:
    """One weak classifier head: conv stage, hidden dense, output softmax."""

    def __init__(self, in_channels, feat_size, config, rng, dtype):
        self.stage = ConvStage(in_channels, config.branch_filters, config, rng, dtype)
        flat = config.branch_filters * feat_size * feat_size
        self.fc1 = Dense(flat, config.hidden_units, rng=rng, dtype=dtype)
        self.act1 = Tanh()
        self.out = Dense(config.hidden_units, config.num_classes, rng=rng, dtype=dtype)
        self.softmax = SoftmaxCrossEntropy()

    def forward(self, feat, train):
        z = self.stage.forward(feat, train)
        self._flat_shape = z.shape
        z = z.reshape(z.shape[0], -1)
        z = self.act1.forward(self.fc1.forward(z))
        return self.softmax.forward(self.out.forward(z))

    def backward(self, target, scale=1.0):
        """Gradient of the (scaled) soft cross entropy back to the trunk output."""
        d = self.softmax.backward(target, scale)
        d = self.fc1.backward(self.act1.backward(self.out.backward(d)))
        return self.stage.backward(d.reshape(self._flat_shape))


class EnsembleNetwork:
    """Shared trunk plus N branches; built deterministically from a seed."""

    def __init__(self, config: ArchConfig, seed: int, dtype=np.float32):
        self.config = config
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        sizes = config.spatial_sizes()
        self.trunk = []
        in_ch = config.input_channels
        for f in config.trunk_filters:
            self.trunk.append(ConvStage(in_ch, f, config, rng, self.dtype))
            in_ch = f
        self.branches = [
            Branch(in_ch, sizes[-1], config, rng, self.dtype)
            for _ in range(config.num_branches)
        ]

    # -- forward / backward ------------------------------------------------

    def trunk_forward(self, x, train):
        for stage in self.trunk:
            x = stage.forward(x, train)
        return x

    def trunk_backward(self, dfeat):
        for stage in reversed(self.trunk):
            dfeat = stage.backward(dfeat)
        return dfeat

    def forward_branch(self, b, x, train=False):
        """Class probabilities of branch *b* (0-based); trunk re-evaluated."""
        feat = self.trunk_forward(np.asarray(x, dtype=self.dtype), train)
        return self.branches[b].forward(feat, train)

    def forward_all(self, x, train=False):
        """(N, B, K) probabilities with the trunk evaluated exactly once."""
        feat = self.trunk_forward(np.asarray(x, dtype=self.dtype), train)
        return np.stack([br.forward(feat, train) for br in self.branches])

    def backward_branch(self, b, target, scale=1.0):
        """Backprop branch *b*'s loss; fills grads of branch b and the trunk."""
        dfeat = self.branches[b].backward(target, scale)
        return self.trunk_backward(dfeat)

    def backward_all(self, target):
        """Backprop the mean of all branch losses against a shared target."""
        n = len(self.branches)
        dfeat = self.branches[0].backward(target, 1.0 / n)
        for br in self.branches[1:]:
            dfeat = dfeat + br.backward(target, 1.0 / n)
        return self.trunk_backward(dfeat)

    @property
    def trunk_eval_count(self):
        """Forward invocations of the first trunk convolution (instrumentation)."""
        return self.trunk[0].conv.calls

    # -- parameter access ----------------------------------------------------

    def _blocks(self):
        for i, stage in enumerate(self.trunk):
            yield f"trunk.{i}", stage
        for b, br in enumerate(self.branches):
            yield f"branch.{b}", br.stage
            yield f"branch.{b}.fc1", br.fc1
            yield f"branch.{b}.out", br.out

    @staticmethod
    def _block_layers(name, obj):
        if isinstance(obj, ConvStage):
            return [(f"{name}.conv", obj.conv), (f"{name}.bn", obj.bn)]
        return [(name, obj)]

    def named_layers(self):
        for name, obj in self._blocks():
            yield from self._block_layers(name, obj)

    def named_params(self, branches=None):
        """name -> parameter array; restrict branch blocks to *branches* if given."""
        out = {}
        for name, layer in self.named_layers():
            if branches is not None and name.startswith("branch."):
                if int(name.split(".")[1]) not in branches:
                    continue
            for pname, arr in layer.params.items():
                out[f"{name}.{pname}"] = arr
        return out

    def named_grads(self, branches=None):
        out = {}
        for name, layer in self.named_layers():
            if branches is not None and name.startswith("branch."):
                if int(name.split(".")[1]) not in branches:
                    continue
            for pname, arr in layer.grads.items():
                out[f"{name}.{pname}"] = arr
        return out

    def named_state(self):
        """Batch-norm running statistics, name -> array."""
        out = {}
        for name, layer in self.named_layers():
            if isinstance(layer, BatchNorm2d):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        return out

    def state_dict(self):
        d = {k: v.copy() for k, v in self.named_params().items()}
        d.update({k: v.copy() for k, v in self.named_state().items()})
        return d

    def load_state_dict(self, state):
        params = self.named_params()
        for name, layer in self.named_layers():
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = state[f"{name}.running_mean"].copy()
                layer.running_var = state[f"{name}.running_var"].copy()
        for k, arr in params.items():
            src = state[k]
            if src.shape != arr.shape:
                raise NumericsError(f"state shape mismatch for {k}")
            arr[...] = src


# -- votes and soft targets ---------------------------------------------------


def ensemble_vote(branch_probs):
    """Per-class vote counts from (N, K) branch probability rows.

    Each branch contributes one vote for its argmax class; probability
    ties go to the lowest class index.
    """
    probs = np.asarray(branch_probs)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError("expected a nonempty (N, K) array of branch probabilities")
    counts = np.zeros(probs.shape[1], dtype=np.int64)
    for c in probs.argmax(axis=1):
        counts[c] += 1
    return counts


def ensemble_vote_batch(branch_probs):
    """Vote counts for a batch: (N, B, K) probabilities -> (B, K) counts."""
    probs = np.asarray(branch_probs)
    n, b, k = probs.shape
    winners = probs.argmax(axis=2)  # (N, B)
    counts = np.zeros((b, k), dtype=np.int64)
    for i in range(n):
        np.add.at(counts, (np.arange(b), winners[i]), 1)
    return counts


def soft_target(counts, temperature=1.0):
    """softmax(counts / T): the distribution used for self-training."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    counts = np.asarray(counts, dtype=np.float64)
    squeeze = counts.ndim == 1
    if squeeze:
        counts = counts[None, :]
    probs = softmax(counts / temperature)
    return probs[0] if squeeze else probs


# -- parameter accounting -----------------------------------------------------


def param_count(net):
    """Exact per-block and total parameter counts.

    Batch-norm gamma/beta are counted; running statistics are not.
    ``independent_equivalent`` is what N standalone copies (trunk + one
    branch each) would cost.
    """
    blocks = {}
    for name, layer in net.named_layers():
        blocks[name] = sum(int(a.size) for a in layer.params.values())
    trunk = sum(v for k, v in blocks.items() if k.startswith("trunk."))
    branch0 = sum(v for k, v in blocks.items() if k.startswith("branch.0"))
    n = len(net.branches)
    total = sum(blocks.values())
    return {
        "blocks": blocks,
        "trunk": trunk,
        "per_branch": branch0,
        "total": total,
        "independent_equivalent": n * (trunk + branch0),
    }


# -- checkpoint serialization -------------------------------------------------

MAGIC = b"BNE1"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _config_entries(net, optimizer):
    cfg = net.config
    entries = [
        ("input_channels", str(cfg.input_channels)),
        ("input_size", str(cfg.input_size)),
        ("trunk_filters", ",".join(str(f) for f in cfg.trunk_filters)),
        ("kernel", str(cfg.kernel)),
        ("stride", str(cfg.stride)),
        ("branch_filters", str(cfg.branch_filters)),
        ("hidden_units", str(cfg.hidden_units)),
        ("num_classes", str(cfg.num_classes)),
        ("num_branches", str(cfg.num_branches)),
        ("padding", cfg.padding),
        ("vote_temperature", repr(cfg.vote_temperature)),
        ("rng_seed", str(net.rng_seed)),
        ("dtype", np.dtype(net.dtype).name),
        ("has_optimizer", "1" if optimizer is not None else "0"),
    ]
    if optimizer is not None:
        entries += [
            ("opt.base_lr", repr(optimizer.base_lr)),
            ("opt.decay", repr(optimizer.decay)),
            ("opt.momentum", repr(optimizer.momentum)),
            ("opt.step_count", str(optimizer.step_count)),
        ]
    return entries


def _named_arrays(net, optimizer):
    arrays = dict(net.named_params())
    arrays.update(net.named_state())
    if optimizer is not None:
        for k, v in optimizer.velocity.items():
            arrays[f"opt.velocity.{k}"] = v
    return arrays


def save_checkpoint(net, path, optimizer=None):
    """Write the network (and optionally optimizer state) to *path*."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)
    entries = _config_entries(net, optimizer)
    buf += struct.pack("<I", len(entries))
    for k, v in entries:
        buf += _pack_str(k) + _pack_str(v)
    arrays = _named_arrays(net, optimizer)
    buf += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = arrays[name]
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        buf += _pack_str(name)
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path):
    """Read a checkpoint; returns (network, optimizer or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint file")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {data[:4]!r}; not a checkpoint file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum failure: checkpoint file is corrupted")
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    kv = {}
    for _ in range(r.u32()):
        k = r.string()
        kv[k] = r.string()
    try:
        config = ArchConfig(
            input_channels=int(kv["input_channels"]),
            input_size=int(kv["input_size"]),
            trunk_filters=tuple(int(f) for f in kv["trunk_filters"].split(",")),
            kernel=int(kv["kernel"]),
            stride=int(kv["stride"]),
            branch_filters=int(kv["branch_filters"]),
            hidden_units=int(kv["hidden_units"]),
            num_classes=int(kv["num_classes"]),
            num_branches=int(kv["num_branches"]),
            padding=kv["padding"],
            vote_temperature=float(kv["vote_temperature"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"config block missing field {exc}") from exc
    net = EnsembleNetwork(config, int(kv["rng_seed"]), dtype=np.dtype(kv["dtype"]).type)

    optimizer = None
    if kv.get("has_optimizer") == "1":
        from .numerics import SGD
        optimizer = SGD(float(kv["opt.base_lr"]), float(kv["opt.decay"]),
                        float(kv["opt.momentum"]))
        optimizer.step_count = int(kv["opt.step_count"])

    targets = dict(net.named_params())
    targets.update(net.named_state())
    state = {}
    for _ in range(r.u32()):
        name = r.string()
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for record {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        nbytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=_CODE_DTYPES[code]).reshape(dims)
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if name.startswith("opt.velocity."):
            if optimizer is not None:
                optimizer.velocity[name[len("opt.velocity."):]] = arr
            continue
        if name not in targets:
            raise CheckpointError(f"unknown record {name!r} in checkpoint")
        if arr.shape != targets[name].shape:
            raise CheckpointError(f"shape mismatch for record {name!r}")
        state[name] = arr
    missing = set(targets) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing records: {sorted(missing)[:3]}...")
    net.load_state_dict(state)
    return net, optimizer


def build_network(config: ArchConfig, seed: int, dtype=np.float32) -> EnsembleNetwork:
    return EnsembleNetwork(config, seed, dtype=dtype)


def clone_config(config: ArchConfig, **changes) -> ArchConfig:
    return replace(config, **changes)
