"""The three-stage part-prototype classifier.

Stage layout: a small conv embedding h(x) ending in a sigmoid (so every
latent coordinate lies in (0,1)), a prototype layer holding k vectors of
size d' partitioned evenly across classes, and a linear aggregation over
image-level activations. Image-level activation of a prototype is the max
of its patch activations; a patch activation is a strictly decreasing
function of squared distance, either

    log kind:  log(|p-q|^2 + 1) - log(|p-q|^2 + eps)
    exp kind:  exp(-gamma |p-q|^2)
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import FormatError, ImageExample
from .errors import DataError

__all__ = [
    "ModelConfig",
    "PartProtoNet",
    "Patch",
    "ActivationRecord",
    "BatchForward",
    "stage1_weights",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    v: int = 5
    protos_per_class: int = 2
    d_latent: int = 32
    conv_channels: tuple[int, int] = (16, 32)
    activation: str = "log"  # "log" or "exp"
    eps: float = 1e-8
    gamma: float = 1.0
    height: int = 32
    width: int = 32
    depth: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.activation not in ("log", "exp"):
            raise ValueError(f"unknown activation kind {self.activation!r}")
        if self.eps <= 0 or self.gamma <= 0:
            raise ValueError("eps and gamma must be positive")
        if self.v < 1 or self.protos_per_class < 1:
            raise ValueError("need at least one class and one prototype per class")

    @property
    def k(self) -> int:
        return self.v * self.protos_per_class

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        kw = dict(d)
        kw["conv_channels"] = tuple(kw["conv_channels"])
        return ModelConfig(**kw)


def stage1_weights(v: int, protos_per_class: int) -> np.ndarray:
    """Fixed aggregation: +1 on a class's own prototypes, -0.5 on the rest."""
    w = np.full((v, v * protos_per_class), -0.5)
    for y in range(v):
        w[y, y * protos_per_class:(y + 1) * protos_per_class] = 1.0
    return w


@dataclass
class Patch:
    row: int
    col: int
    vector: np.ndarray  # (d',)
    rf: tuple[int, int, int, int]  # input rows [top, bottom), cols [left, right)


@dataclass
class ActivationRecord:
    """Everything forward() saw: per-patch activations plus where each
    prototype attained its image-level max."""

    image_id: str
    label: int | None
    patch_acts: np.ndarray        # (k, w', h')
    image_acts: np.ndarray        # (k,)
    argmax: list[tuple[int, int]]  # per prototype, (row, col) of the max patch
    logits: np.ndarray            # (v,)


@dataclass
class BatchForward:
    """Differentiable batch forward; losses slice into these tensors."""

    z: Tensor       # (n, w', h', d')
    dists: Tensor   # (n, k, L) squared distances prototype x patch
    acts: Tensor    # (n, k, L)
    a_img: Tensor   # (n, k)
    logits: Tensor  # (n, v)


# conv stack geometry: two 3x3 stride-2 valid convs -> stride 4, 7x7 receptive field
_KERNEL = 3
_STRIDE = 2
RF_SIZE = _KERNEL + (_KERNEL - 1) * _STRIDE
RF_STRIDE = _STRIDE * _STRIDE


class PartProtoNet:
    """Parameters live in named Tensors; training loops pick which to update."""

    PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                   "adapt1_w", "adapt1_b", "adapt2_w", "adapt2_b",
                   "prototypes", "aggregation")

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.conv_channels
        d = config.d_latent

        def he(shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        self.conv1_w = he((c1, _KERNEL, _KERNEL, config.depth), _KERNEL * _KERNEL * config.depth)
        self.conv1_b = Tensor(np.zeros(c1), requires_grad=True)
        self.conv2_w = he((c2, _KERNEL, _KERNEL, c1), _KERNEL * _KERNEL * c1)
        self.conv2_b = Tensor(np.zeros(c2), requires_grad=True)
        self.adapt1_w = he((d, 1, 1, c2), c2)
        self.adapt1_b = Tensor(np.zeros(d), requires_grad=True)
        self.adapt2_w = he((d, 1, 1, d), d)
        self.adapt2_b = Tensor(np.zeros(d), requires_grad=True)
        self.prototypes = Tensor(rng.uniform(0.0, 1.0, size=(config.k, d)), requires_grad=True)
        self.aggregation = Tensor(stage1_weights(config.v, config.protos_per_class),
                                  requires_grad=True)

        def out_dim(n):
            n = (n - _KERNEL) // _STRIDE + 1
            return (n - _KERNEL) // _STRIDE + 1

        self.latent_h = out_dim(config.height)
        self.latent_w = out_dim(config.width)
        self.n_patches = self.latent_h * self.latent_w

    # -- parameter bookkeeping ------------------------------------------

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def embedding_params(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.PARAM_NAMES[:8]]

    def class_of_prototype(self, j: int) -> int:
        return j // self.config.protos_per_class

    def prototype_range(self, y: int) -> range:
        per = self.config.protos_per_class
        return range(y * per, (y + 1) * per)

    # -- embedding --------------------------------------------------------

    def _check_input(self, xs: np.ndarray) -> np.ndarray:
        cfg = self.config
        want = (cfg.height, cfg.width, cfg.depth)
        if xs.shape[-3:] != want or xs.ndim not in (3, 4):
            raise ShapeError(f"input shape {xs.shape} does not end in {want}")
        return xs if xs.ndim == 4 else xs[None]

    def embed_batch_t(self, xs: np.ndarray | Tensor) -> Tensor:
        """(n, h, w, d) -> (n, w', h', d'), differentiable through params."""
        x = xs if isinstance(xs, Tensor) else Tensor(self._check_input(np.asarray(xs, dtype=np.float64)))
        h = ad.relu(ad.add_bias(ad.conv2d(x, self.conv1_w, stride=_STRIDE), self.conv1_b))
        h = ad.relu(ad.add_bias(ad.conv2d(h, self.conv2_w, stride=_STRIDE), self.conv2_b))
        h = ad.relu(ad.add_bias(ad.conv2d(h, self.adapt1_w, stride=1), self.adapt1_b))
        return ad.sigmoid(ad.add_bias(ad.conv2d(h, self.adapt2_w, stride=1), self.adapt2_b))

    def embed(self, x: ImageExample | np.ndarray) -> Tensor:
        """Single image -> (w', h', d') latent tensor."""
        pixels = x.pixels if isinstance(x, ImageExample) else np.asarray(x, dtype=np.float64)
        if pixels.ndim != 3:
            raise ShapeError(f"embed expects one image, got shape {pixels.shape}")
        return self.embed_batch_t(self._check_input(pixels))[0]

    def embed_np(self, xs: np.ndarray) -> np.ndarray:
        return self.embed_batch_t(xs).data

    # -- activation functions ---------------------------------------------

    def act_from_sqdist(self, d2):
        """Numpy activation as a function of squared distance."""
        cfg = self.config
        d2 = np.asarray(d2, dtype=np.float64)
        if cfg.activation == "log":
            return np.log(d2 + 1.0) - np.log(d2 + cfg.eps)
        return np.exp(-cfg.gamma * d2)

    def act_from_sqdist_t(self, d2: Tensor) -> Tensor:
        cfg = self.config
        if cfg.activation == "log":
            return ad.sub(ad.log(ad.add(d2, 1.0)), ad.log(ad.add(d2, cfg.eps)))
        return ad.exp(ad.scale(d2, -cfg.gamma))

    def act(self, p: np.ndarray, q: np.ndarray) -> float:
        p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
        if p.shape != q.shape:
            raise ShapeError(f"act: shapes differ, {p.shape} vs {q.shape}")
        return float(self.act_from_sqdist(((p - q) ** 2).sum()))

    # -- patch geometry -----------------------------------------------------

    @staticmethod
    def receptive_field(row: int, col: int) -> tuple[int, int, int, int]:
        top, left = RF_STRIDE * row, RF_STRIDE * col
        return (top, left, top + RF_SIZE, left + RF_SIZE)

    def patches(self, z: np.ndarray | Tensor) -> list[Patch]:
        zd = z.data if isinstance(z, Tensor) else np.asarray(z)
        if zd.shape != (self.latent_h, self.latent_w, self.config.d_latent):
            raise ShapeError(f"patches: latent shape {zd.shape} unexpected")
        out = []
        for i in range(self.latent_h):
            for j in range(self.latent_w):
                out.append(Patch(i, j, zd[i, j].copy(), self.receptive_field(i, j)))
        return out

    def mask_to_latent(self, mask: np.ndarray) -> np.ndarray:
        """Downscale an input-resolution mask to the latent grid: each cell
        gets the mean mask value over its receptive field."""
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (self.config.height, self.config.width):
            raise ShapeError(f"mask shape {m.shape} does not match input")
        win = np.lib.stride_tricks.sliding_window_view(m, (RF_SIZE, RF_SIZE))
        return win[::RF_STRIDE, ::RF_STRIDE].mean(axis=(2, 3))

    # -- forward -------------------------------------------------------------

    def act_image(self, p: np.ndarray, z: np.ndarray | Tensor) -> tuple[float, tuple[int, int]]:
        """Image-level activation: max over patches, with its location.
        First patch in row-major order wins ties."""
        zd = z.data if isinstance(z, Tensor) else np.asarray(z)
        d2 = ((zd - np.asarray(p)[None, None, :]) ** 2).sum(axis=2)
        acts = self.act_from_sqdist(d2)
        rc = divmod(int(np.argmax(acts)), zd.shape[1])
        return float(acts[rc]), rc

    def forward_batch_t(self, xs: np.ndarray | Tensor) -> BatchForward:
        z = self.embed_batch_t(xs)
        n = z.shape[0]
        d = self.config.d_latent
        flat = ad.reshape(z, (n * self.n_patches, d))
        dists = ad.pairwise_sqdist(self.prototypes, flat)            # (k, n*L)
        dists = ad.transpose(ad.reshape(dists, (self.config.k, n, self.n_patches)), (1, 0, 2))
        acts = self.act_from_sqdist_t(dists)
        a_img = ad.amax(acts, axis=2)                                 # (n, k)
        logits = ad.matmul(a_img, ad.transpose(self.aggregation))    # (n, v)
        return BatchForward(z=z, dists=dists, acts=acts, a_img=a_img, logits=logits)

    def forward(self, x: ImageExample | np.ndarray) -> tuple[np.ndarray, np.ndarray, ActivationRecord]:
        """Single-image inference with a full activation record."""
        image_id = x.id if isinstance(x, ImageExample) else ""
        label = x.label if isinstance(x, ImageExample) else None
        z = self.embed(x).data
        flat = z.reshape(self.n_patches, self.config.d_latent)
        d2 = ((self.prototypes.data[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
        acts = self.act_from_sqdist(d2)                               # (k, L)
        a = acts.max(axis=1)
        argmax = [divmod(int(i), self.latent_w) for i in acts.argmax(axis=1)]
        logits = self.aggregation.data @ a
        record = ActivationRecord(
            image_id=image_id, label=label,
            patch_acts=acts.reshape(self.config.k, self.latent_h, self.latent_w),
            image_acts=a, argmax=argmax, logits=logits)
        return a, logits, record

    def predict(self, examples: list[ImageExample], batch_size: int = 64) -> np.ndarray:
        """Label predictions; ties in logits resolve to the lowest class id."""
        out = np.empty(len(examples), dtype=np.int64)
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo:lo + batch_size]
            xs = np.stack([e.pixels for e in chunk])
            logits = self._logits_np(xs)
            out[lo:lo + len(chunk)] = logits.argmax(axis=1)
        return out

    def _logits_np(self, xs: np.ndarray) -> np.ndarray:
        z = self.embed_np(xs)
        n = z.shape[0]
        flat = z.reshape(n * self.n_patches, self.config.d_latent)
        pp = (self.prototypes.data ** 2).sum(axis=1)[:, None]
        qq = (flat ** 2).sum(axis=1)[None, :]
        d2 = np.maximum(pp + qq - 2.0 * self.prototypes.data @ flat.T, 0.0)
        acts = self.act_from_sqdist(d2).reshape(self.config.k, n, self.n_patches)
        a = acts.max(axis=2).T                                        # (n, k)
        return a @ self.aggregation.data.T

    # -- projection -------------------------------------------------------------

    def project(self, examples: list[ImageExample]) -> None:
        """Replace every prototype with the closest latent patch among its
        class's examples (bitwise copy; first minimum wins ties)."""
        by_class: dict[int, list[ImageExample]] = {}
        for ex in examples:
            by_class.setdefault(ex.label, []).append(ex)
        for y in range(self.config.v):
            if y not in by_class:
                raise DataError(f"projection: class {y} has no examples")
        for y in range(self.config.v):
            xs = np.stack([e.pixels for e in by_class[y]])
            z = self.embed_np(xs).reshape(-1, self.config.d_latent)
            for j in self.prototype_range(y):
                d2 = ((z - self.prototypes.data[j][None, :]) ** 2).sum(axis=1)
                self.prototypes.data[j] = z[int(np.argmin(d2))]

    def clone(self) -> "PartProtoNet":
        other = PartProtoNet(self.config)
        for name, t in self.params().items():
            getattr(other, name).data = t.data.copy()
        return other


# -- checkpoints -----------------------------------------------------------------
#
# One file: a JSON header line (config, block names and shapes, version),
# then the parameter blocks concatenated as little-endian float64.

CHECKPOINT_VERSION = 1


def save_checkpoint(model: PartProtoNet, path: str | Path) -> Path:
    path = Path(path)
    blocks = [{"name": n, "shape": list(getattr(model, n).data.shape)}
              for n in model.PARAM_NAMES]
    header = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "blocks": blocks}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in model.PARAM_NAMES:
            f.write(np.ascontiguousarray(getattr(model, n).data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> PartProtoNet:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing file: {path}")
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode())
            config = ModelConfig.from_dict(header["config"])
            blocks = header["blocks"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad checkpoint header: {e}") from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}")
        model = PartProtoNet(config)
        if [b["name"] for b in blocks] != list(model.PARAM_NAMES):
            raise FormatError("checkpoint blocks do not match model parameters")
        for b in blocks:
            want = getattr(model, b["name"]).data.shape
            if tuple(b["shape"]) != want:
                raise FormatError(f"block {b['name']}: shape {b['shape']} != expected {list(want)}")
            n_bytes = int(np.prod(want)) * 8
            raw = f.read(n_bytes)
            if len(raw) != n_bytes:
                raise FormatError(f"block {b['name']}: file truncated")
            getattr(model, b["name"]).data = np.frombuffer(raw, dtype="<f8").reshape(want).copy()
        if f.read(1):
            raise FormatError("trailing bytes after parameter blocks")
    return model
