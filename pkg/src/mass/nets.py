"""Feedforward networks, gradients, optimizers and checkpoints.

Networks are ``torch.nn.Module`` trees built from affine layers with optional
batch normalization and ReLU. Training runs in float32; gradient checks cast to
float64 with ``net.double()``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from mass.errors import ConfigError, DataError, IncompatibleCheckpointError, NumericalError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
ACTIVATIONS = ("relu", "identity")


class _Normalize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v):
        norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        nonzero = norm > 0
        safe = torch.where(nonzero, norm, torch.ones_like(norm))
        out = torch.where(nonzero, v / safe, torch.zeros_like(v))
        ctx.save_for_backward(out, safe, nonzero)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, safe, nonzero = ctx.saved_tensors
        tangent = grad - out * (out * grad).sum(dim=-1, keepdim=True)
        # The derivative does not exist at v = 0; pass the gradient through
        # unchanged there so a zero-initialized MLP head can leave the origin.
        return torch.where(nonzero, tangent / safe, grad)


def normalize_rows(v: torch.Tensor) -> torch.Tensor:
    """Row-wise ``v / ||v||`` with zero rows mapped to zero."""
    return _Normalize.apply(v)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    batchnorm: bool = False
    activation: str = "identity"


class Layer(nn.Module):
    def __init__(self, spec: LayerSpec, bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
        super().__init__()
        if spec.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {spec.activation!r}")
        self.spec = spec
        self.affine = nn.Linear(spec.in_dim, spec.out_dim)
        self.bn = nn.BatchNorm1d(spec.out_dim, momentum=bn_momentum, eps=bn_eps) if spec.batchnorm else None

    def forward(self, x):
        h = self.affine(x)
        if self.bn is not None:
            h = self.bn(h)
        if self.spec.activation == "relu":
            h = torch.relu(h)
        return h


class NetworkParams(nn.Module):
    """An ordered stack of layers whose dimensions compose."""

    def __init__(self, specs: Sequence[LayerSpec], bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
        super().__init__()
        specs = list(specs)
        if not specs:
            raise ConfigError("a network needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer dims do not compose: {a.out_dim} -> {b.in_dim}")
        self.specs = specs
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.layers = nn.ModuleList(Layer(s, bn_momentum, bn_eps) for s in specs)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    @property
    def has_batchnorm(self) -> bool:
        return any(s.batchnorm for s in self.specs)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def architecture(self) -> dict:
        return {
            "layers": [[s.in_dim, s.out_dim, s.batchnorm, s.activation] for s in self.specs],
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "NetworkParams":
        specs = [LayerSpec(int(i), int(o), bool(bn), act) for i, o, bn, act in arch["layers"]]
        return cls(specs, arch.get("bn_momentum", BN_MOMENTUM), arch.get("bn_eps", BN_EPS))


def mlp_specs(dims: Sequence[int], batchnorm: bool) -> list[LayerSpec]:
    """Affine layers over ``dims`` with (BN +) ReLU between them and a bare last layer."""
    specs = []
    for k, (i, o) in enumerate(zip(dims, dims[1:])):
        last = k == len(dims) - 2
        specs.append(LayerSpec(i, o, batchnorm and not last, "identity" if last else "relu"))
    return specs


def init_uniform_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Fan-in uniform init of every affine layer, BN scale 1 and shift 0."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator, dtype=m.weight.dtype) * 2 * bound - bound)
                m.bias.copy_(torch.rand(m.bias.shape, generator=generator, dtype=m.bias.dtype) * 2 * bound - bound)
            elif isinstance(m, nn.BatchNorm1d):
                m.reset_parameters()
    return module


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


class ModifierNet(nn.Module):
    """The data modifier ``x' = n(x + n(MLP(x)))``.

    The MLP's last layer starts at zero, so an untrained modifier is the identity.
    """

    kind = "modifier"

    def __init__(self, dim: int, hidden: Sequence[int] | None = None, seed=0):
        super().__init__()
        hidden = [dim] if hidden is None else list(hidden)
        self.dim = dim
        self.hidden = hidden
        self.mlp = NetworkParams(mlp_specs([dim, *hidden, dim], batchnorm=False))
        init_uniform_(self, _generator(seed))
        with torch.no_grad():
            last = self.mlp.layers[-1].affine
            last.weight.zero_()
            last.bias.zero_()

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise DataError(f"modifier expects dimension {self.dim}, got {x.shape[-1]}")
        return normalize_rows(x + normalize_rows(self.mlp(x)))

    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "mlp": self.mlp.architecture()}

    @classmethod
    def from_config(cls, cfg: dict) -> "ModifierNet":
        net = cls(cfg["dim"], cfg["hidden"])
        net.mlp = NetworkParams.from_architecture(cfg["mlp"])
        return net


class ClassifierNet(nn.Module):
    """Attribute head ``input-512-256-C``; ``heads`` exposes penultimate features and logits."""

    kind = "classifier"

    def __init__(self, in_dim: int, num_classes: int, attribute: str = "", hidden=(512, 256), seed=0):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.attribute = attribute
        self.hidden = list(hidden)
        dims = [in_dim, *hidden]
        self.extractor = NetworkParams([LayerSpec(i, o, True, "relu") for i, o in zip(dims, dims[1:])])
        self.projector = NetworkParams([LayerSpec(dims[-1], num_classes)])
        init_uniform_(self, _generator(seed))

    def heads(self, x):
        z = self.extractor(x)
        return z, self.projector(z)

    def forward(self, x):
        return self.projector(self.extractor(x))

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "num_classes": self.num_classes,
                "attribute": self.attribute, "hidden": self.hidden}

    @classmethod
    def from_config(cls, cfg: dict) -> "ClassifierNet":
        return cls(cfg["in_dim"], cfg["num_classes"], cfg.get("attribute", ""), cfg["hidden"])


class ContrastiveNet(nn.Module):
    """Encoder ``D-D-D`` plus projector ``D-D-128``, BN + ReLU between affine layers."""

    kind = "contrastive"

    def __init__(self, dim: int, proj_dim: int = 128, seed=0):
        super().__init__()
        self.dim = dim
        self.proj_dim = proj_dim
        self.encoder = NetworkParams(mlp_specs([dim, dim, dim], batchnorm=True))
        self.projector = NetworkParams(mlp_specs([dim, dim, proj_dim], batchnorm=True))
        init_uniform_(self, _generator(seed))

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x):
        return self.projector(self.encoder(x))

    def config(self) -> dict:
        return {"dim": self.dim, "proj_dim": self.proj_dim}

    @classmethod
    def from_config(cls, cfg: dict) -> "ContrastiveNet":
        return cls(cfg["dim"], cfg["proj_dim"])


NET_KINDS = {c.kind: c for c in (ModifierNet, ClassifierNet, ContrastiveNet)}


def _has_batchnorm(net: nn.Module) -> bool:
    return any(isinstance(m, nn.BatchNorm1d) for m in net.modules())


def as_batch(batch, like: nn.Module | None = None) -> torch.Tensor:
    dtype = torch.float32
    if like is not None:
        p = next(iter(like.parameters()), None)
        if p is not None:
            dtype = p.dtype
    if isinstance(batch, torch.Tensor):
        return batch.to(dtype)
    return torch.as_tensor(np.asarray(batch), dtype=dtype)


def forward(net: nn.Module, batch, mode: str = "eval") -> torch.Tensor:
    """Evaluate ``net`` on a ``[B, D_in]`` batch.

    ``train`` mode normalizes with batch statistics and updates running stats;
    ``eval`` mode uses the running stats and does not track gradients.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_batch(batch, net)
    if x.ndim != 2:
        raise DataError(f"expected a [B, D] batch, got shape {tuple(x.shape)}")
    if mode == "train":
        if x.shape[0] < 2 and _has_batchnorm(net):
            raise DataError("train-mode batch normalization needs a batch of at least 2")
        net.train()
        return net(x)
    net.eval()
    with torch.no_grad():
        return net(x)


def modifier_apply(g: ModifierNet, x, mode: str = "eval") -> torch.Tensor:
    x = as_batch(x, g)
    single = x.ndim == 1
    out = forward(g, x[None] if single else x, mode)
    return out[0] if single else out


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@dataclass
class Gradients:
    loss: float
    params: dict[str, torch.Tensor]
    inputs: torch.Tensor | None = None


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return list(params.named_parameters())
    if isinstance(params, dict):
        return list(params.items())
    return list(params)


def gradients(loss_fn: Callable, params, batch=None, wrt_input: bool = False,
              watch: Iterable[nn.Module] = ()) -> Gradients:
    """Exact gradients of ``loss_fn(batch)`` with respect to ``params`` (and the batch).

    ``params`` is a module or ``(name, tensor)`` pairs. Non-finite values raise
    :class:`NumericalError` naming the first module whose output went bad.
    """
    named = _named(params)
    tensors = [p for _, p in named]
    restore = [p.requires_grad for p in tensors]
    for p in tensors:
        p.requires_grad_(True)
    x = batch
    if wrt_input:
        x = batch.detach().clone().requires_grad_(True)

    modules = list(watch)
    if isinstance(params, nn.Module):
        modules.append(params)
    first_bad: list[str] = []
    hooks = []

    def make_hook(name):
        def hook(mod, inp, out):
            if not first_bad and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                first_bad.append(name)
        return hook

    for root in modules:
        for name, m in root.named_modules():
            hooks.append(m.register_forward_hook(make_hook(f"{type(root).__name__}.{name or 'output'}")))
    try:
        loss = loss_fn(x) if batch is not None else loss_fn()
        if not torch.isfinite(loss):
            where = first_bad[0] if first_bad else "loss"
            raise NumericalError(f"non-finite value first produced by {where}")
        targets = tensors + ([x] if wrt_input else [])
        grads = torch.autograd.grad(loss, targets, allow_unused=True) if loss.requires_grad else [None] * len(targets)
    finally:
        for h in hooks:
            h.remove()
        for p, r in zip(tensors, restore):
            p.requires_grad_(r)

    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
        out[name] = g
    gx = None
    if wrt_input:
        gx = grads[-1] if grads[-1] is not None else torch.zeros_like(x)
    return Gradients(float(loss.detach()), out, gx)


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        self.betas = tuple(self.betas)

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay,
                "betas": list(self.betas), "eps": self.eps, "momentum": self.momentum, "step": self.step}

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for group in ("exp_avg", "exp_avg_sq", "velocity"):
            for name, t in getattr(self, group).items():
                out[f"{group}/{name}"] = t
        return out


def adamw_step(state: OptimizerState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               lr: float | None = None):
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            if state.weight_decay:
                p.mul_(1 - lr * state.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-lr)
    return params, state


def sgd_step(state: OptimizerState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             lr: float | None = None):
    """SGD with heavy-ball momentum and L2 weight decay added to the gradient."""
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if state.weight_decay:
                g = g + state.weight_decay * p
            if state.momentum:
                buf = state.velocity.get(name)
                if buf is None:
                    buf = state.velocity[name] = g.clone()
                else:
                    buf.mul_(state.momentum).add_(g)
                g = buf
            p.add_(g, alpha=-lr)
    return params, state


def optimizer_step(state: OptimizerState, params, grads, lr=None):
    step = adamw_step if state.kind == "adamw" else sgd_step
    return step(state, params, grads, lr)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing ``0.5 * lr0 * (1 + cos(pi * t / total))``."""
    if total < 1:
        raise ConfigError("total steps must be >= 1")
    if t < 0 or t > total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"MASSCKPT"
FORMAT_VERSION = 1


class CheckpointError(DataError):
    pass


def _state_tensors(net: nn.Module) -> tuple[list[tuple[str, torch.Tensor]], dict[str, int]]:
    tensors, counters = [], {}
    for name, t in net.state_dict().items():
        if name.endswith("num_batches_tracked"):
            counters[name] = int(t)
        else:
            tensors.append((name, t))
    return tensors, counters


def checkpoint_bytes(net: nn.Module, optimizer_state: OptimizerState | None = None,
                     metadata: dict | None = None) -> bytes:
    tensors, counters = _state_tensors(net)
    opt_tensors = list(optimizer_state.tensors().items()) if optimizer_state is not None else []
    blob = b"".join(
        np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        for _, t in tensors + opt_tensors
    )
    header = {
        "format_version": FORMAT_VERSION,
        "kind": net.kind,
        "config": net.config(),
        "tensors": [[n, list(t.shape)] for n, t in tensors],
        "counters": counters,
        "optimizer": None if optimizer_state is None else {
            "hyper": optimizer_state.hyper(),
            "tensors": [[n, list(t.shape)] for n, t in opt_tensors],
        },
        "metadata": metadata or {},
        "blob_bytes": len(blob),
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def save_checkpoint(path, net: nn.Module, optimizer_state: OptimizerState | None = None,
                    metadata: dict | None = None) -> Path:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float32 blob``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net, optimizer_state, metadata))
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    blob = raw[start + hlen:]
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {header.get('format_version')} != supported {FORMAT_VERSION}")
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"{path}: truncated blob ({len(blob)} of {header['blob_bytes']} bytes)")
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return header, blob


def load_checkpoint(path, manifest=None):
    """Return ``(net, optimizer_state, metadata)``.

    With ``manifest`` given, the checkpoint's recorded manifest fingerprint must match.
    """
    header, blob = read_checkpoint_header(path)
    metadata = header["metadata"]
    if manifest is not None:
        expected = manifest.fingerprint()
        got = metadata.get("manifest_hash")
        if got != expected:
            raise IncompatibleCheckpointError(
                f"{path}: trained under manifest {str(got)[:12]}, current manifest is {expected[:12]}")
    kind = header["kind"]
    if kind not in NET_KINDS:
        raise CheckpointError(f"{path}: unknown network kind {kind!r}")
    net = NET_KINDS[kind].from_config(header["config"])

    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) if shape else 1
        arr = flat[pos:pos + n].reshape(shape)
        pos += n
        return torch.from_numpy(arr.astype(np.float32))

    state = {name: take(shape) for name, shape in header["tensors"]}
    for name, value in header["counters"].items():
        state[name] = torch.tensor(value, dtype=torch.long)
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not fit architecture ({e})") from None

    opt = None
    if header["optimizer"] is not None:
        hyper = dict(header["optimizer"]["hyper"])
        opt = OptimizerState(**{k: hyper[k] for k in ("kind", "lr", "weight_decay", "betas", "eps", "momentum", "step")})
        for name, shape in header["optimizer"]["tensors"]:
            group, pname = name.split("/", 1)
            getattr(opt, group)[pname] = take(shape)
    net.eval()
    return net, opt, metadata


def clone_net(net: nn.Module) -> nn.Module:
    return copy.deepcopy(net)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
