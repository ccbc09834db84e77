"""The two expert networks and the weighted-average combiner.

DWINet: three conv blocks ([3x3x3 conv -> relu] x convs_per_block ->
batch norm -> 2x2x2 max pool), filter counts doubling from base_filters,
then global average pooling and a dense head ending in a two-way softmax.

ADCNet: 3D basic-block residual network. Stem is a 7x7x7 stride-2 conv
(bn, relu) plus a 3x3x3 stride-2 max pool; four stages of two basic
blocks each, widths doubling per stage, stage entry stride 2 from the
second stage on; same global-average-pool head shape as DWINet.

Both networks emit two softmax probabilities; the positive class is
index 1 and all losses are binary cross-entropy on that probability.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .errors import FormatError, ValidationError
from .metrics import roc_auc
from .tensor import Parameter, Tensor


@dataclass
class DwiNetConfig:
    blocks: int = 3
    convs_per_block: int = 2
    base_filters: int = 64
    kernel: int = 3
    pool_window: int = 2
    pool_stride: int = 2
    head_hidden: int = 256
    in_channels: int = 1

    @classmethod
    def dev(cls):
        """Desk-scale profile: same shape, reduced widths."""
        return cls(base_filters=4, head_hidden=32)

    def block_filters(self):
        return [self.base_filters * 2 ** b for b in range(self.blocks)]


@dataclass
class AdcNetConfig:
    stem_filters: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool_window: int = 3
    stem_pool_stride: int = 2
    blocks_per_stage: int = 2
    stage_widths: tuple = (64, 128, 256, 512)
    head_hidden: int = 512
    in_channels: int = 3

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)

    @classmethod
    def dev(cls):
        return cls(stem_filters=4, stage_widths=(4, 8, 16, 32), head_hidden=32)


@dataclass
class EnsembleConfig:
    w: float = 0.5
    grid: tuple = field(default_factory=lambda: tuple(round(0.05 * i, 2) for i in range(21)))

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValidationError("bad weight", f"ensemble weight must be in [0,1], got {self.w}")


def config_digest(config):
    payload = json.dumps(asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv3dLayer:
    def __init__(self, name, cin, cout, kernel, stride, padding, rng, dtype):
        fan_in = cin * kernel ** 3
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, (cout, cin, kernel, kernel, kernel)).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv3d(x, self.weight.value, self.bias.value, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm3dLayer:
    def __init__(self, name, channels, dtype):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.state = ops.BatchNormState(channels, dtype=dtype)

    def __call__(self, x, mode):
        return ops.batch_norm(x, self.gamma.value, self.beta.value, self.state, mode=mode)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}


class DenseLayer:
    def __init__(self, name, k_in, m_out, rng, dtype):
        std = np.sqrt(2.0 / k_in)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, (m_out, k_in)).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(m_out, dtype=dtype))

    def __call__(self, x):
        return ops.dense(x, self.weight.value, self.bias.value)

    def parameters(self):
        return [self.weight, self.bias]


class _Head:
    """Global average pool -> dense(hidden) -> relu -> dense(2) -> softmax."""

    def __init__(self, prefix, feat, hidden, rng, dtype):
        self.fc0 = DenseLayer(f"{prefix}.fc0", feat, hidden, rng, dtype)
        self.fc1 = DenseLayer(f"{prefix}.fc1", hidden, 2, rng, dtype)

    def __call__(self, x):
        pooled = ops.pool3d(x, "global_avg")
        flat = ops.reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        hidden = ops.relu(self.fc0(flat))
        return ops.softmax_lastaxis(self.fc1(hidden))

    def parameters(self):
        return self.fc0.parameters() + self.fc1.parameters()


class _NetworkBase:
    kind = "network"
    head_prefix = ""

    def parameters(self):
        raise NotImplementedError

    def bn_layers(self):
        raise NotImplementedError

    def state_tensors(self):
        """All persistent arrays by name: parameters plus batch-norm buffers."""
        out = {p.name: p.value.data for p in self.parameters()}
        for bn in self.bn_layers():
            out.update(bn.buffers())
        return out

    def is_head_name(self, name):
        return name.startswith(self.head_prefix)

    def load_state(self, tensors, head_only_reset=False):
        """Assign named arrays; atomic (validates everything first).

        With head_only_reset, tensors under the head prefix are dropped
        from the source and the freshly initialized head is kept.
        """
        target = self.state_tensors()
        expected = {n: a for n, a in target.items() if not (head_only_reset and self.is_head_name(n))}
        source = {n: a for n, a in tensors.items() if not (head_only_reset and self.is_head_name(n))}
        missing = sorted(set(expected) - set(source))
        extra = sorted(set(source) - set(expected))
        if missing or extra:
            raise FormatError("name mismatch", f"{self.kind}: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, arr in source.items():
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise FormatError("shape mismatch", f"{self.kind}: {name} has shape {list(arr.shape)}, expected {list(expected[name].shape)}")
        for name, arr in source.items():
            np.copyto(target[name], arr.astype(target[name].dtype, copy=False))

    def forward(self, x, mode="eval"):
        raise NotImplementedError

    def predict_proba(self, volumes, batch_size=4):
        """Positive-class probabilities for an array [N,C,D,H,W], eval mode."""
        arr = np.asarray(volumes, dtype=self.dtype)
        out = []
        for i in range(0, arr.shape[0], batch_size):
            probs = self.forward(Tensor(arr[i:i + batch_size]), mode="eval")
            out.append(probs.data[:, 1].copy())
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)


class DwiNet(_NetworkBase):
    kind = "dwinet"

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or DwiNetConfig()
        self.dtype = np.dtype(dtype).type
        self.head_prefix = "dwinet.head."
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.blocks = []
        cin = cfg.in_channels
        for b, filters in enumerate(cfg.block_filters(), start=1):
            convs = []
            for j in range(cfg.convs_per_block):
                convs.append(Conv3dLayer(f"dwinet.block{b}.conv{j}", cin, filters, cfg.kernel,
                                         stride=1, padding=cfg.kernel // 2, rng=rng, dtype=self.dtype))
                cin = filters
            bn = BatchNorm3dLayer(f"dwinet.block{b}.bn", filters, self.dtype)
            self.blocks.append((convs, bn))
        self.head = _Head("dwinet.head", cin, cfg.head_hidden, rng, self.dtype)

    def validate_input_dims(self, dims):
        div = self.config.pool_stride ** self.config.blocks
        if any(d % div != 0 for d in dims):
            raise ValidationError("bad dims", f"dwinet needs spatial dims divisible by {div}, got {list(dims)}")

    def forward(self, x, mode="eval"):
        self.validate_input_dims(x.shape[2:])
        cfg = self.config
        h = x
        for convs, bn in self.blocks:
            for conv in convs:
                h = ops.relu(conv(h))
            h = bn(h, mode)
            h = ops.pool3d(h, "max", window=cfg.pool_window, stride=cfg.pool_stride)
        return self.head(h)

    def parameters(self):
        out = []
        for convs, bn in self.blocks:
            for conv in convs:
                out.extend(conv.parameters())
            out.extend(bn.parameters())
        out.extend(self.head.parameters())
        return out

    def bn_layers(self):
        return [bn for _, bn in self.blocks]


class _BasicBlock:
    """conv-bn-relu-conv-bn plus identity or 1x1x1 projection, relu after add."""

    def __init__(self, name, cin, cout, stride, rng, dtype):
        self.conv0 = Conv3dLayer(f"{name}.conv0", cin, cout, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm3dLayer(f"{name}.bn0", cout, dtype)
        self.conv1 = Conv3dLayer(f"{name}.conv1", cout, cout, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm3dLayer(f"{name}.bn1", cout, dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv3dLayer(f"{name}.proj", cin, cout, 1, stride=stride, padding=0, rng=rng, dtype=dtype)

    def shortcut(self, x):
        return self.proj(x) if self.proj is not None else x

    def __call__(self, x, mode):
        h = ops.relu(self.bn0(self.conv0(x), mode))
        h = self.bn1(self.conv1(h), mode)
        return ops.relu(ops.add(h, self.shortcut(x)))

    def parameters(self):
        out = self.conv0.parameters() + self.bn0.parameters() + self.conv1.parameters() + self.bn1.parameters()
        if self.proj is not None:
            out.extend(self.proj.parameters())
        return out

    def bn_layers(self):
        return [self.bn0, self.bn1]


class AdcNet(_NetworkBase):
    kind = "adcnet"

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or AdcNetConfig()
        self.dtype = np.dtype(dtype).type
        self.head_prefix = "adcnet.head."
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.stem_conv = Conv3dLayer("adcnet.stem.conv", cfg.in_channels, cfg.stem_filters,
                                     cfg.stem_kernel, stride=cfg.stem_stride,
                                     padding=cfg.stem_kernel // 2, rng=rng, dtype=self.dtype)
        self.stem_bn = BatchNorm3dLayer("adcnet.stem.bn", cfg.stem_filters, self.dtype)
        self.stages = []
        cin = cfg.stem_filters
        for s, width in enumerate(cfg.stage_widths, start=1):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 1 and b == 0) else 1
                blocks.append(_BasicBlock(f"adcnet.stage{s}.block{b}", cin, width, stride, rng, self.dtype))
                cin = width
            self.stages.append(blocks)
        self.head = _Head("adcnet.head", cin, cfg.head_hidden, rng, self.dtype)

    def validate_input_dims(self, dims):
        cfg = self.config
        extents = list(dims)
        for i, d in enumerate(extents):
            d = (d + 2 * (cfg.stem_kernel // 2) - cfg.stem_kernel) // cfg.stem_stride + 1
            if d < cfg.stem_pool_window:
                raise ValidationError("bad dims", f"adcnet stem pool window {cfg.stem_pool_window} exceeds extent {d} (input {list(dims)})")
            d = (d - cfg.stem_pool_window) // cfg.stem_pool_stride + 1
            for s in range(2, len(cfg.stage_widths) + 1):
                d = (d + 2 - 3) // 2 + 1
            if d <= 0:
                raise ValidationError("bad dims", f"adcnet spatial extent reaches {d} before the head (input {list(dims)})")
            extents[i] = d

    def forward(self, x, mode="eval"):
        self.validate_input_dims(x.shape[2:])
        cfg = self.config
        h = ops.relu(self.stem_bn(self.stem_conv(x), mode))
        h = ops.pool3d(h, "max", window=cfg.stem_pool_window, stride=cfg.stem_pool_stride)
        for blocks in self.stages:
            for block in blocks:
                h = block(h, mode)
        return self.head(h)

    def parameters(self):
        out = self.stem_conv.parameters() + self.stem_bn.parameters()
        for blocks in self.stages:
            for block in blocks:
                out.extend(block.parameters())
        out.extend(self.head.parameters())
        return out

    def bn_layers(self):
        out = [self.stem_bn]
        for blocks in self.stages:
            for block in blocks:
                out.extend(block.bn_layers())
        return out


def build_dwinet(config=None, seed=0, dtype=np.float32):
    return DwiNet(config=config, seed=seed, dtype=dtype)


def build_adcnet(config=None, seed=0, dtype=np.float32):
    return AdcNet(config=config, seed=seed, dtype=dtype)


def build_network(kind, config=None, seed=0, dtype=np.float32):
    if kind == "dwinet":
        return build_dwinet(config, seed, dtype)
    if kind == "adcnet":
        return build_adcnet(config, seed, dtype)
    raise ValidationError("bad network", f"unknown network kind {kind!r}")


def predict_dwi(network, volume):
    """Positive-class probability for one [1,D,H,W] volume."""
    return float(network.predict_proba(np.asarray(volume)[None, ...])[0])


def predict_adc(network, volume):
    """Positive-class probability for one [3,D,H,W] volume."""
    return float(network.predict_proba(np.asarray(volume)[None, ...])[0])


def apply_checkpoint(network, checkpoint, head_only_reset=False):
    if checkpoint.network_kind != network.kind:
        raise FormatError("network_kind mismatch",
                          f"checkpoint is for {checkpoint.network_kind!r}, target network is {network.kind!r}")
    network.load_state(checkpoint.tensors, head_only_reset=head_only_reset)


def network_gradient_check(kind, dims, seed=0, profile="dev", eps=1e-4, max_coords=64, config=None):
    """End-to-end finite-difference check of one network in float64.

    Builds the network at the given dims, runs a two-item batch (one
    label per class) through train-mode forward + BCE, and returns the
    max relative gradient error over a sampled coordinate subset.
    """
    from .tensor import grad_check  # local import avoids cycle at module load

    if config is None:
        cls = DwiNetConfig if kind == "dwinet" else AdcNetConfig
        config = cls.dev() if profile == "dev" else cls()
    network = build_network(kind, config=config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, config.in_channels) + tuple(dims))
    labels = np.array([0, 1])

    def loss_fn():
        probs = network.forward(Tensor(x), mode="train")
        return ops.bce_loss(ops.take_column(probs, 1), labels)

    return grad_check(network.parameters(), loss_fn, eps=eps, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

def ensemble_predict(p_dwi, p_adc, cfg):
    """Convex combination w*p_dwi + (1-w)*p_adc with w = cfg.w."""
    pd = np.asarray(p_dwi, dtype=np.float64)
    pa = np.asarray(p_adc, dtype=np.float64)
    if ((pd < 0) | (pd > 1)).any() or ((pa < 0) | (pa > 1)).any():
        raise ValidationError("bad probability", "ensemble inputs must lie in [0,1]")
    combined = cfg.w * pd + (1.0 - cfg.w) * pa
    return float(combined) if combined.ndim == 0 else combined


def fit_ensemble_weight(val_scores, cfg=None):
    """Grid-search the convex weight maximizing validation AUC.

    val_scores: iterable of (p_dwi, p_adc, label). Ties break toward the
    weight closest to 0.5, then toward the smaller weight.
    """
    cfg = cfg or EnsembleConfig()
    scores = list(val_scores)
    if not scores:
        raise ValidationError("empty validation set", "fit_ensemble_weight needs validation scores")
    pd = np.array([s[0] for s in scores], dtype=np.float64)
    pa = np.array([s[1] for s in scores], dtype=np.float64)
    labels = np.array([s[2] for s in scores], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ValidationError("single-class validation set", "fit_ensemble_weight needs both classes")
    best = None
    for w in cfg.grid:
        _, auc = roc_auc(w * pd + (1.0 - w) * pa, labels)
        key = (-auc, abs(w - 0.5), w)
        if best is None or key < best[0]:
            best = (key, w)
    return best[1]
