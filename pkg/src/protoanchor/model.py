"""The representation network: lifting, multi-periodicity block with a
multiscale 2-D CNN, ResNet-style 1-D stages, and global average pooling.

Three architectures share the residual stages and differ in the front end:

* ``mpl``: 1x1 channel lift, then per-period fold -> 2-D MSCNN -> unfold
  with a residual connection, averaged over the top-k periods.
* ``mscnn1d``: the same lift and residual structure, but three parallel
  1-D convolutions (k = 1, 3, 5) instead of period folding.
* ``plain``: a single 1-D convolution (k = 3) feeding the stages.

Normalization is per-sample and per-channel over the time axis (never
batch statistics), so embeddings are independent of batch composition.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ArgumentError, CheckpointError, DimensionError, NumericError
from .periodicity import averaged_spectrum, fold, top_k_periods, unfold
from .seeding import rng_for
from .tensorcore import AdamState, Tensor, as_tensor, init_adam, ops

ARCHS = ("mpl", "plain", "mscnn1d")
DISTANCES = ("squared_euclidean", "euclidean")
MSCNN_KERNELS = (1, 3, 5)


@dataclass(frozen=True)
class ModelConfig:
    mscnn_channels: int = 32
    top_k: int = 5
    stage_channels: tuple[int, ...] = (64, 128, 256)
    blocks_per_stage: int = 2
    embedding_dim: int = 256
    distance: str = "squared_euclidean"
    period_convention: str = "bin_index"
    arch: str = "mpl"
    sample_rate_hz: float | None = None  # required only for paper_literal periods

    def __post_init__(self):
        if min(self.mscnn_channels, self.top_k, self.blocks_per_stage, self.embedding_dim) < 1:
            raise ArgumentError("model dimensions must be positive")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ArgumentError("stage_channels must be positive")
        if self.embedding_dim != self.stage_channels[-1]:
            raise ArgumentError(
                f"embedding_dim {self.embedding_dim} must equal the last stage width {self.stage_channels[-1]}"
            )
        if self.distance not in DISTANCES:
            raise ArgumentError(f"unknown distance '{self.distance}'")
        if self.arch not in ARCHS:
            raise ArgumentError(f"unknown arch '{self.arch}'")
        if self.period_convention not in ("bin_index", "paper_literal"):
            raise ArgumentError(f"unknown period convention '{self.period_convention}'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return ModelConfig(**d)


def _registry(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Fixed parameter order: (name, shape, kind) with kind in
    {conv, bias, gamma, beta}. This order is the checkpoint blob order."""
    d = cfg.mscnn_channels
    entries: list[tuple[str, tuple[int, ...], str]] = []

    def norm(prefix: str, c: int):
        entries.append((f"{prefix}.gamma", (c,), "gamma"))
        entries.append((f"{prefix}.beta", (c,), "beta"))

    if cfg.arch == "plain":
        entries.append(("entry.kernel", (d, 3, 3), "conv"))
        norm("entry.norm", d)
    else:
        entries.append(("lift.kernel", (d, 3, 1), "conv"))
        entries.append(("lift.bias", (d,), "bias"))
        if cfg.arch == "mpl":
            for k in MSCNN_KERNELS:
                entries.append((f"mscnn.k{k}.kernel", (d, d, k, k), "conv"))
                norm(f"mscnn.k{k}.norm", d)
        else:  # mscnn1d
            for k in MSCNN_KERNELS:
                entries.append((f"mscnn1d.k{k}.kernel", (d, d, k), "conv"))
                norm(f"mscnn1d.k{k}.norm", d)

    cin = d
    for si, cout in enumerate(cfg.stage_channels, start=1):
        for bi in range(1, cfg.blocks_per_stage + 1):
            first = bi == 1
            c_in_block = cin if first else cout
            entries.append((f"s{si}.b{bi}.conv1", (cout, c_in_block, 3), "conv"))
            norm(f"s{si}.b{bi}.n1", cout)
            entries.append((f"s{si}.b{bi}.conv2", (cout, cout, 3), "conv"))
            norm(f"s{si}.b{bi}.n2", cout)
            if first:
                entries.append((f"s{si}.b{bi}.skip", (cout, cin, 1), "conv"))
                norm(f"s{si}.b{bi}.nskip", cout)
        cin = cout
    return entries


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    mpl front end: 3d + d (lift) + d^2 (1+9+25) + 6d (MSCNN + norms);
    mscnn1d swaps the MSCNN term for d^2 (1+3+5); plain uses 9d + 2d.
    Each stage (cin -> c, B blocks): first block 3*cin*c + 3c^2 + cin*c + 6c,
    remaining blocks 6c^2 + 4c each.
    """
    return sum(int(np.prod(shape)) for _, shape, _ in _registry(cfg))


@dataclass
class ModelState:
    """All learnable parameters plus optimizer moments."""

    config: ModelConfig
    params: dict[str, Tensor]
    adam: AdamState

    def clone(self, fresh_adam: bool = False) -> "ModelState":
        params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        adam = init_adam(params) if fresh_adam else self.adam.clone()
        return ModelState(config=self.config, params=params, adam=adam)


def init_state(cfg: ModelConfig, seed) -> ModelState:
    """Kaiming-uniform fan-in for convs, zeros for biases, ones/zeros affine."""
    rng = rng_for(seed, "model-init")
    params: dict[str, Tensor] = {}
    for name, shape, kind in _registry(cfg):
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "gamma":
            data = np.ones(shape)
        else:  # bias, beta
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    state = ModelState(config=cfg, params=params, adam=None)
    state.adam = init_adam(params)
    return state


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations in layer '{layer}'")
    return t


def _conv_norm_relu(x, kernel, gamma, beta, stride: int = 1):
    h = ops.conv1d(x, kernel, stride=stride, padding="same")
    return ops.relu(ops.channel_norm(h, gamma, beta))


def mscnn(state: ModelState, view) -> Tensor:
    """Multiscale 2-D convolution block: 1x1, 3x3, 5x5 branches averaged.

    Each branch is conv -> per-channel norm -> ReLU; accepts a FoldedView
    or any [B, d, H, W] tensor.
    """
    t = view.tensor if hasattr(view, "tensor") else as_tensor(view)
    if t.ndim != 4:
        raise DimensionError(f"mscnn expects [B, d, rows, cols], got {t.shape}")
    p = state.params
    acc = None
    for k in MSCNN_KERNELS:
        branch = ops.conv2d(t, p[f"mscnn.k{k}.kernel"], padding="same")
        branch = ops.relu(ops.channel_norm(branch, p[f"mscnn.k{k}.norm.gamma"], p[f"mscnn.k{k}.norm.beta"]))
        acc = branch if acc is None else ops.add(acc, branch)
    return ops.scale(acc, 1.0 / len(MSCNN_KERNELS))


def _sample_periods(cfg: ModelConfig, raw: np.ndarray) -> tuple[int, ...]:
    amps = averaged_spectrum(raw)
    ps = top_k_periods(
        amps,
        cfg.top_k,
        raw.shape[-1],
        convention=cfg.period_convention,
        sample_rate_hz=cfg.sample_rate_hz,
    )
    return ps.periods


def periodicity_block(state: ModelState, lifted: Tensor, periods: tuple[int, ...]) -> Tensor:
    """fold -> mscnn -> unfold -> residual for each period, then average."""
    if not periods:
        raise ArgumentError("periods must be nonempty")
    length = lifted.shape[-1]
    acc = None
    for p in periods:
        view = fold(lifted, p)
        feats = mscnn(state, view)
        back = unfold(replace_tensor(view, feats), length)
        branch = ops.add(back, lifted)
        acc = branch if acc is None else ops.add(acc, branch)
    return ops.scale(acc, 1.0 / len(periods))


def replace_tensor(view, tensor: Tensor):
    from .periodicity import FoldedView

    return FoldedView(tensor=tensor, period=view.period, pad_len=view.pad_len, orig_len=view.orig_len)


def _front_end(state: ModelState, x: Tensor, raw: np.ndarray) -> Tensor:
    cfg = state.config
    p = state.params
    if cfg.arch == "plain":
        return _check_finite(
            _conv_norm_relu(x, p["entry.kernel"], p["entry.norm.gamma"], p["entry.norm.beta"]), "entry"
        )
    lifted = ops.add_channel_bias(ops.conv1d(x, p["lift.kernel"], padding="same"), p["lift.bias"])
    _check_finite(lifted, "lift")
    if cfg.arch == "mscnn1d":
        acc = None
        for k in MSCNN_KERNELS:
            branch = ops.conv1d(lifted, p[f"mscnn1d.k{k}.kernel"], padding="same")
            branch = ops.relu(
                ops.channel_norm(branch, p[f"mscnn1d.k{k}.norm.gamma"], p[f"mscnn1d.k{k}.norm.beta"])
            )
            acc = branch if acc is None else ops.add(acc, branch)
        return _check_finite(ops.add(ops.scale(acc, 1.0 / len(MSCNN_KERNELS)), lifted), "mscnn1d")

    # mpl: periods are a per-sample, non-differentiated routing decision;
    # samples sharing a period set are folded together.
    batch = raw.shape[0]
    period_sets = [_sample_periods(cfg, raw[b]) for b in range(batch)]
    groups: dict[tuple[int, ...], list[int]] = {}
    for b, ps in enumerate(period_sets):
        groups.setdefault(ps, []).append(b)
    if len(groups) == 1:
        out = periodicity_block(state, lifted, next(iter(groups)))
    else:
        chunks = []
        order = []
        for ps, idx in groups.items():
            sub = ops.gather0(lifted, np.asarray(idx))
            chunks.append(periodicity_block(state, sub, ps))
            order.extend(idx)
        stacked = ops.concat0(chunks)
        inverse = np.empty(batch, dtype=np.intp)
        inverse[np.asarray(order)] = np.arange(batch)
        out = ops.gather0(stacked, inverse)
    return _check_finite(out, "periodicity_block")


def _stage(state: ModelState, h: Tensor, si: int) -> Tensor:
    cfg = state.config
    p = state.params
    for bi in range(1, cfg.blocks_per_stage + 1):
        first = bi == 1
        stride = 2 if first else 1
        y = ops.conv1d(h, p[f"s{si}.b{bi}.conv1"], stride=stride, padding="same")
        y = ops.relu(ops.channel_norm(y, p[f"s{si}.b{bi}.n1.gamma"], p[f"s{si}.b{bi}.n1.beta"]))
        y = ops.conv1d(y, p[f"s{si}.b{bi}.conv2"], padding="same")
        y = ops.channel_norm(y, p[f"s{si}.b{bi}.n2.gamma"], p[f"s{si}.b{bi}.n2.beta"])
        if first:
            skip = ops.conv1d(h, p[f"s{si}.b{bi}.skip"], stride=2, padding="same")
            skip = ops.channel_norm(skip, p[f"s{si}.b{bi}.nskip.gamma"], p[f"s{si}.b{bi}.nskip.beta"])
        else:
            skip = h
        h = ops.relu(ops.add(y, skip))
    return _check_finite(h, f"stage{si}")


def forward(state: ModelState, x) -> Tensor:
    """Embed a batch of raw windows: [B, 3, L] -> [B, w]."""
    t = as_tensor(x)
    if t.ndim != 3 or t.shape[1] != 3:
        raise DimensionError(f"forward expects [B, 3, L], got {t.shape}")
    raw = t.data
    h = _front_end(state, t, raw)
    for si in range(1, len(state.config.stage_channels) + 1):
        h = _stage(state, h, si)
    emb = ops.global_average_pool(h)
    return _check_finite(emb, "embedding")


CHECKPOINT_MAGIC = b"PANCHOR1"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> None:
    """Binary checkpoint: magic, version, config JSON, then parameter and
    Adam-moment blobs as little-endian float64 in registry order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    registry = _registry(state.config)
    buf.write(struct.pack("<I", len(registry)))
    for name, shape, _ in registry:
        data = state.params[name].data
        if data.shape != shape:
            raise CheckpointError(f"parameter '{name}' has shape {data.shape}, registry says {shape}")
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    buf.write(struct.pack("<Q", state.adam.t))
    for name, _, _ in registry:
        buf.write(np.ascontiguousarray(state.adam.m[name], dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(state.adam.v[name], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes; not a model checkpoint")
    offset = 8
    (version,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    try:
        cfg = ModelConfig.from_dict(json.loads(bytes(view[offset : offset + cfg_len])))
    except (ValueError, TypeError, KeyError, ArgumentError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    offset += cfg_len
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError("checkpoint config does not match the expected model config")
    registry = _registry(cfg)
    (n_params,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if n_params != len(registry):
        raise CheckpointError(f"checkpoint has {n_params} parameters, config implies {len(registry)}")

    def read_block(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(view, dtype="<f8", count=int(np.prod(shape)), offset=offset)
        offset += n
        return arr.astype(np.float64).reshape(shape)

    params = {name: Tensor(read_block(shape), requires_grad=True) for name, shape, _ in registry}
    (t_step,) = struct.unpack_from("<Q", view, offset)
    offset += 8
    adam = AdamState(t=int(t_step))
    for name, shape, _ in registry:
        adam.m[name] = read_block(shape)
        adam.v[name] = read_block(shape)
    if offset != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ModelState(config=cfg, params=params, adam=adam)
