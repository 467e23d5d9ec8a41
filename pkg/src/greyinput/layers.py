"""Trainable layers: learnable preprocessing, a small backbone and the head.

The network is ``preproc -> backbone -> head``.  The preprocessing block
maps a 3-channel interpolation composite to 3 channels at the same
resolution; the backbone is a stack of stride-2 conv/BN/ReLU stages; the
head pools, then applies two BatchNorm -> Dropout -> Linear blocks with a
ReLU between them and a sigmoid on the output.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ParameterError
from .tensor import Tensor

PREPROC_KINDS = ("cbn_1", "cbn_3", "inc", "inc_d", "no_tfm")
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class PreprocSpec:
    kind: str = "inc_d"
    branch_width: int = 8

    def __post_init__(self):
        if self.kind not in PREPROC_KINDS:
            raise ParameterError(f"preprocessing kind must be one of {PREPROC_KINDS}, got {self.kind!r}")
        if self.branch_width < 1:
            raise ParameterError(f"branch_width must be positive, got {self.branch_width}")


@dataclass(frozen=True)
class ModelSpec:
    preproc: PreprocSpec = field(default_factory=PreprocSpec)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    head_hidden: int = 512
    head_dropout: tuple[float, float] = (0.25, 0.5)
    n_classes: int = 17
    bn_momentum: float = 0.1
    bn_eps: float = 1e-9

    def __post_init__(self):
        if not self.backbone_channels:
            raise ParameterError("backbone needs at least one stage")
        if self.head_hidden < 1 or self.n_classes < 1:
            raise ParameterError("head_hidden and n_classes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["head_dropout"] = list(self.head_dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["preproc"] = PreprocSpec(**d["preproc"])
        d["backbone_channels"] = tuple(d["backbone_channels"])
        d["head_dropout"] = tuple(d["head_dropout"])
        return cls(**d)


@dataclass
class ParamGroup:
    name: str
    parameters: list
    lr_scale: float = 1.0
    frozen: bool = False

    def size(self) -> int:
        return sum(p.size for p in self.parameters)


# ---------------------------------------------------------------------------
# module machinery


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self, flag: bool = True) -> None:
        """Stop gradient updates and running-statistic updates below this module."""
        for m in self.modules():
            object.__setattr__(m, "frozen", flag)
        for p in self.parameters():
            p.requires_grad = not flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast(self, dtype) -> "Module":
        """Convert parameters and buffers to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._modules[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Identity(Module):
    def forward(self, x):
        return x


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sigmoid(Module):
    def forward(self, x):
        return T.sigmoid(x)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


class AdaptiveAvgPool(Module):
    def forward(self, x):
        return T.adaptive_avg_pool2d(x, 1)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, bias=True):
        super().__init__()
        fan_in = c_in * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)), True)
        if bias:
            self.bias = Tensor(np.zeros(c_out), True)
        else:
            object.__setattr__(self, "bias", None)
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    """Batch normalisation over axis 1 for 2-D (B x F) or 4-D inputs."""

    def __init__(self, channels, momentum=0.1, eps=1e-9):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), True)
        self.beta = Tensor(np.zeros(channels), True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        batch_stats = self.training and not self.frozen
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            batch_stats, self.momentum, self.eps,
        )


class Linear(Module):
    """Dense layer with Glorot-uniform weights stored as (in, out)."""

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), True)
        self.bias = Tensor(np.zeros(n_out), True)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        object.__setattr__(self, "rng", rng)

    def forward(self, x):
        return T.dropout(x, self.p, self.training and not self.frozen, self.rng)


# ---------------------------------------------------------------------------
# preprocessing blocks


class ConvBN(Module):
    """k x k conv (3 -> 3, same padding) followed by BatchNorm."""

    def __init__(self, k, rng, momentum=0.1, eps=1e-9):
        super().__init__()
        self.conv = Conv2d(3, 3, k, rng, pad=k // 2)
        self.bn = BatchNorm(3, momentum, eps)

    def forward(self, x):
        return self.bn(self.conv(x))


class Inception(Module):
    """Parallel 1x1/3x3/5x5 branches, concatenated and reduced back to 3 channels.

    With ``dense=True`` the raw input is concatenated next to the branch
    outputs before the reducing 1x1 conv.
    """

    def __init__(self, width, rng, dense=False, momentum=0.1, eps=1e-9):
        super().__init__()
        self.b1 = Conv2d(3, width, 1, rng)
        self.b3 = Conv2d(3, width, 3, rng, pad=1)
        self.b5 = Conv2d(3, width, 5, rng, pad=2)
        self.dense = dense
        self.reduce = Conv2d(3 * width + (3 if dense else 0), 3, 1, rng)
        self.bn = BatchNorm(3, momentum, eps)

    # Branches, concat and the reducing conv are all linear, so by default
    # they are folded into one 5x5 conv (3 -> 3) whose weights are built
    # from the branch and reduce parameters inside the graph.  The function
    # and the parameters are unchanged; only full-resolution intermediates
    # are avoided.
    fused = True

    def forward(self, x):
        if self.fused:
            return self.bn(T.conv2d(x, *self.folded_weights(), pad=2))
        parts = [self.b1(x), self.b3(x), self.b5(x)]
        if self.dense:
            parts.append(x)
        return self.bn(self.reduce(T.concat_channels(parts)))

    def folded_weights(self) -> tuple[Tensor, Tensor]:
        """Weight (3, 3, 5, 5) and bias (3,) of the equivalent single conv."""
        kernels = [T.pad2d(self.b1.weight, 2), T.pad2d(self.b3.weight, 1), self.b5.weight]
        biases = [self.b1.bias, self.b3.bias, self.b5.bias]
        if self.dense:
            eye = np.zeros((3, 3, 5, 5))
            eye[np.arange(3), np.arange(3), 2, 2] = 1.0
            kernels.append(Tensor(eye))
            biases.append(Tensor(np.zeros(3)))
        stacked = T.concat(kernels, axis=0)
        m = stacked.shape[0]
        r = T.reshape(self.reduce.weight, (3, m))
        w = T.reshape(T.matmul(r, T.reshape(stacked, (m, 75))), (3, 3, 5, 5))
        b = T.reshape(T.matmul(r, T.reshape(T.concat(biases, axis=0), (m, 1))), (3,)) + self.reduce.bias
        return w, b


def build_preproc(spec: PreprocSpec, rng, momentum=0.1, eps=1e-9) -> Module:
    if spec.kind == "no_tfm":
        return Identity()
    if spec.kind == "cbn_1":
        return ConvBN(1, rng, momentum, eps)
    if spec.kind == "cbn_3":
        return ConvBN(3, rng, momentum, eps)
    if spec.kind in ("inc", "inc_d"):
        return Inception(spec.branch_width, rng, spec.kind == "inc_d", momentum, eps)
    raise ParameterError(f"unknown preprocessing kind {spec.kind!r}")


class Backbone(Module):
    def __init__(self, channels, rng, c_in=3, momentum=0.1, eps=1e-9):
        super().__init__()
        if not channels:
            raise ParameterError("backbone needs at least one stage")
        self.stages = []
        for i, c_out in enumerate(channels):
            stage = Sequential(
                Conv2d(c_in, c_out, 3, rng, stride=2, pad=1, bias=False),
                BatchNorm(c_out, momentum, eps),
                ReLU(),
            )
            self.stages.append(stage)
            self._modules[f"stage{i + 1}"] = stage
            c_in = c_out
        self.out_channels = c_in

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


def build_backbone(channels, rng, momentum=0.1, eps=1e-9) -> Backbone:
    return Backbone(list(channels), rng, momentum=momentum, eps=eps)


def build_head(in_features, hidden, n_classes, dropouts, rng, dropout_rng=None, momentum=0.1, eps=1e-9):
    if hidden < 1:
        raise ParameterError(f"head hidden width must be >= 1, got {hidden}")
    dropout_rng = dropout_rng if dropout_rng is not None else rng
    d1, d2 = dropouts
    return Sequential(
        AdaptiveAvgPool(),
        Flatten(),
        BatchNorm(in_features, momentum, eps),
        Dropout(d1, dropout_rng),
        Linear(in_features, hidden, rng),
        ReLU(),
        BatchNorm(hidden, momentum, eps),
        Dropout(d2, dropout_rng),
        Linear(hidden, n_classes, rng),
        Sigmoid(),
    )


def backbone_output_extent(h: int, w: int, n_stages: int) -> tuple[int, int]:
    for _ in range(n_stages):
        h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    return h, w


# ---------------------------------------------------------------------------
# full model


class Model(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "seed", int(seed))
        init_seq, drop_seq = np.random.SeedSequence(int(seed)).spawn(2)
        rng = np.random.default_rng(init_seq)
        object.__setattr__(self, "dropout_rng", np.random.default_rng(drop_seq))
        kw = dict(momentum=spec.bn_momentum, eps=spec.bn_eps)
        self.preproc = build_preproc(spec.preproc, rng, **kw)
        self.backbone = build_backbone(spec.backbone_channels, rng, **kw)
        self.head = build_head(
            self.backbone.out_channels, spec.head_hidden, spec.n_classes,
            spec.head_dropout, rng, self.dropout_rng, **kw,
        )

    def forward(self, x):
        return self.head(self.backbone(self.preproc(x)))

    def param_groups(self) -> list[ParamGroup]:
        """Backbone stages earliest to latest, then preprocessing + head."""
        groups = [
            ParamGroup(f"backbone.stage{i + 1}", stage.parameters(), frozen=stage.frozen)
            for i, stage in enumerate(self.backbone.stages)
        ]
        groups.append(ParamGroup("preproc+head", self.preproc.parameters() + self.head.parameters()))
        return groups

    def freeze_backbone(self, flag: bool = True) -> None:
        self.backbone.freeze(flag)

    def recalibrate_batchnorm(self, batches) -> int:
        """Replace running statistics of trainable BatchNorm layers by the
        average of batch statistics over ``batches`` (B x 3 x H x W arrays).

        Running averages with a fixed momentum lag behind weights that are
        still moving; re-estimating them with the final weights makes eval
        mode match what training saw.  Frozen layers keep their statistics.
        Dropout is off and no graph is recorded.  Returns the batch count.
        """
        norms = [m for m in self.modules() if isinstance(m, BatchNorm) and not m.frozen]
        saved = [m.momentum for m in norms]
        was_training = self.training
        self.eval()
        for m in norms:
            m.training = True
        count = 0
        try:
            with T.no_grad():
                for x in batches:
                    if len(x) < 2:
                        continue
                    count += 1
                    for m in norms:
                        m.momentum = 1.0 / count  # cumulative mean of batch statistics
                    self(Tensor(x))
        finally:
            for m, mom in zip(norms, saved):
                m.momentum = mom
            self.train(was_training)
        return count

    def predict(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode scores for a B x 3 x H x W array (mode is restored after)."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = [self(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": p.data.astype(np.float64) for k, p in self.named_parameters()}
        state.update({f"buffer/{k}": b.astype(np.float64) for k, b in self.named_buffers()})
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise CompatibilityError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = state[f"param/{k}"]
            if arr.shape != p.shape:
                raise CompatibilityError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for k, arr in sorted(self.state_arrays().items()):
            if k.split("/", 1)[1].startswith(prefix):
                h.update(k.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def assemble(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


# ---------------------------------------------------------------------------
# checkpoints: a .npz (zip of .npy members) with fixed timestamps so the
# bytes depend only on the content


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    meta = {
        "format": "greyinput-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "num_parameters": model.num_parameters(),
        "extra": extra or {},
    }
    members = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    members.update(model.state_arrays())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            arr = np.asarray(members[name])
            np.lib.format.write_array(buf, np.ascontiguousarray(arr).reshape(arr.shape), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(f["__meta__"].item())
        arrays = {k: f[k] for k in f.files if k != "__meta__"}
    if meta.get("format") != "greyinput-checkpoint":
        raise CompatibilityError(f"{path} is not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_checkpoint(path) -> tuple[Model, dict]:
    meta, arrays = read_checkpoint(path)
    model = Model(ModelSpec.from_dict(meta["spec"]), meta["seed"])
    model.load_state_arrays(arrays)
    return model, meta
