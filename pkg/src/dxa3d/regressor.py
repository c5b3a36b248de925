"""Image-to-curves regressor: stride-2 conv stages -> 7x7 tokens -> one
self-attention layer with 2D relative position bias -> mean pool -> linear
head emitting the 209x6 curve samples.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .curves import CurveSet, sort_triples
from .phantom import GRID_XY, IMAGE_SIZE, N_LEVELS

OUT_SHAPE = (N_LEVELS, 6)


@dataclass
class ModelConfig:
    image_size: int = IMAGE_SIZE
    conv_channels: tuple = (8, 16, 32, 64, 128)  # one stride-2 stage each
    attn_heads: int = 4
    attention: bool = True       # False: no-attention ablation
    pos_encoding: bool = True    # learned relative 2D bias on attention logits
    dropout_p: float = 0.3
    input_transform: str = "log1p"  # or "linear"
    input_scale: float = 0.25
    coord_channels: bool = True   # append row/column coordinate planes to the input

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.image_size % (2 ** len(self.conv_channels)):
            raise ValueError("image size must be divisible by 2**stages")
        if self.feature_dim % self.attn_heads:
            raise ValueError("feature_dim must be divisible by attn_heads")
        if self.input_transform not in ("log1p", "linear"):
            raise ValueError(f"unknown input_transform {self.input_transform!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def feature_grid(self) -> int:
        return self.image_size // 2 ** len(self.conv_channels)

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def out_shape(self) -> tuple[int, int]:
        return OUT_SHAPE

    def to_text(self) -> str:
        d = asdict(self)
        d["conv_channels"] = " ".join(str(c) for c in self.conv_channels)
        return "\n".join(f"{k}={v}" for k, v in d.items())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "conv_channels":
                v = tuple(int(c) for c in str(v).split())
            elif f.type in ("str", str):
                v = str(v)
            elif f.type in ("bool", bool):
                v = str(v).lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                v = int(v)
            else:
                v = float(v)
            kw[f.name] = v
        return cls(**kw)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay_every: int = 200
    lr_decay_factor: float = 0.1
    weight_penalty: float = 1e-5
    crop_jitter_px: int = 8
    contrast_range: tuple = (0.8, 1.2)
    noise_frac: float = 0.02  # noise sigma as a fraction of the image max
    augment: bool = True
    normalize_targets: bool = True
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def _fan_in_uniform(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class RelPosSelfAttention(nn.Module):
    """Multi-head self-attention over a g x g token grid.

    Logits get a learned bias ``rel_row[h, dr] + rel_col[h, dc]`` indexed by
    the row and column offsets between query and key.
    """

    def __init__(self, dim: int, heads: int, grid: int, pos_encoding: bool = True):
        super().__init__()
        self.heads = heads
        self.grid = grid
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.pos_encoding = pos_encoding
        self.rel_row = nn.Parameter(torch.zeros(heads, 2 * grid - 1))
        self.rel_col = nn.Parameter(torch.zeros(heads, 2 * grid - 1))
        r = torch.arange(grid).repeat_interleave(grid)
        c = torch.arange(grid).repeat(grid)
        self.register_buffer("_dr", (r[:, None] - r[None, :] + grid - 1), persistent=False)
        self.register_buffer("_dc", (c[:, None] - c[None, :] + grid - 1), persistent=False)

    def position_bias(self) -> torch.Tensor:
        return self.rel_row[:, self._dr] + self.rel_col[:, self._dc]  # (heads, n, n)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if self.pos_encoding:
            logits = logits + self.position_bias()
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class RegressorModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        layers, c_in = [], 3 if cfg.coord_channels else 1
        for c in cfg.conv_channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.GELU()]
            c_in = c
        self.encoder = nn.Sequential(*layers)
        d = cfg.feature_dim
        self.norm = nn.LayerNorm(d)
        self.attn = RelPosSelfAttention(d, cfg.attn_heads, cfg.feature_grid, cfg.pos_encoding)
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.head = nn.Linear(d, OUT_SHAPE[0] * OUT_SHAPE[1])
        # output = offset + scale * head(...); identity unless training sets them
        self.register_buffer("out_offset", torch.zeros(OUT_SHAPE[0] * OUT_SHAPE[1]))
        self.register_buffer("out_scale", torch.ones(OUT_SHAPE[0] * OUT_SHAPE[1]))
        _fan_in_uniform(self)

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) images -> (B, 49, D) feature tokens in row-major grid order."""
        if not torch.isfinite(images).all():
            raise ValueError("non-finite input image")
        x = images[:, None]
        if self.config.input_transform == "log1p":
            # compresses the bright spine so faint rib arcs stay visible
            x = torch.log1p(x.clamp(min=0.0))
        x = x * self.config.input_scale
        if self.config.coord_channels:
            # absolute position: conv + attention with relative bias + mean pool
            # are otherwise (nearly) translation invariant
            b, _, h, w = x.shape
            rows = torch.linspace(-1.0, 1.0, h, dtype=x.dtype).view(1, 1, h, 1).expand(b, 1, h, w)
            cols = torch.linspace(-1.0, 1.0, w, dtype=x.dtype).view(1, 1, 1, w).expand(b, 1, h, w)
            x = torch.cat([x, rows, cols], dim=1)
        f = self.encoder(x)
        return f.flatten(2).transpose(1, 2)

    def pooled(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.config.attention:
            tokens = tokens + self.attn(self.norm(tokens))
        return tokens.mean(dim=1)

    def head_output(self, pooled: torch.Tensor) -> torch.Tensor:
        out = self.out_offset + self.out_scale * self.head(self.dropout(pooled))
        return out.reshape(-1, *OUT_SHAPE)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head_output(self.pooled(self.tokens(images)))

    # flat parameter view --------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().cpu().numpy().astype(np.float64)

    def set_flat_parameters(self, vec) -> None:
        v = torch.as_tensor(np.array(vec, dtype=np.float64), dtype=next(self.parameters()).dtype)
        nn.utils.vector_to_parameters(v, self.parameters())

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1).cpu().numpy()
            for p in self.parameters()
        ]).astype(np.float64)

    def set_output_normalization(self, offset, scale) -> None:
        self.out_offset.copy_(torch.as_tensor(np.array(offset, dtype=np.float64).reshape(-1)))
        self.out_scale.copy_(torch.as_tensor(np.array(scale, dtype=np.float64).reshape(-1)))


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> RegressorModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = RegressorModel(config)
    return model.to(dtype)


def l1_loss(pred: torch.Tensor, target: torch.Tensor, model: nn.Module | None = None, penalty: float = 0.0):
    """Mean absolute deviation plus ``penalty * sum(theta^2)`` over parameters."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = (pred - target).abs().mean()
    if penalty and model is not None:
        loss = loss + penalty * sum((p * p).sum() for p in model.parameters())
    return loss


def backward(model: RegressorModel, loss: torch.Tensor) -> np.ndarray:
    """Gradient of ``loss`` w.r.t. every parameter, flattened in declaration order."""
    model.zero_grad(set_to_none=True)
    loss.backward()
    return model.flat_grad()


# --- data handling ---------------------------------------------------------------

def _as_arrays(images, targets):
    x = np.stack([getattr(im, "grid", im) for im in images]).astype(np.float64)
    y = np.stack([getattr(t, "values", t) for t in targets]).astype(np.float64)
    if x.ndim != 3 or y.shape[1:] != OUT_SHAPE or len(x) != len(y):
        raise ValueError("dataset must be (N, H, W) images with (N, 209, 6) targets")
    if len(x) == 0:
        raise ValueError("empty dataset")
    return x, y


def augment_batch(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Horizontal crop jitter (zero pad, coronal targets shifted along),
    multiplicative contrast, additive Gaussian noise."""
    x = x.copy()
    y = y.copy()
    for i in range(len(x)):
        j = cfg.crop_jitter_px
        dx = int(rng.integers(-j, j + 1)) if j > 0 else 0
        if dx:
            shifted = np.zeros_like(x[i])
            if dx > 0:
                shifted[:, dx:] = x[i][:, :-dx]
            else:
                shifted[:, :dx] = x[i][:, -dx:]
            x[i] = shifted
            y[i, :, :3] += dx
        x[i] *= rng.uniform(*cfg.contrast_range)
        x[i] += rng.normal(0.0, cfg.noise_frac * max(float(x[i].max()), 1e-12), size=x[i].shape)
    return x, y


def target_normalization(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry training mean and a per-column pooled sd (floored at 1 px)."""
    mean = y.mean(axis=0)
    sd = np.sqrt(((y - mean) ** 2).mean(axis=(0, 1)))
    scale = np.broadcast_to(np.maximum(sd, 1.0), OUT_SHAPE)
    return mean, np.ascontiguousarray(scale)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def history_to_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss,lr"]
    lines += [f"{h.epoch},{h.train_loss:.8f},{h.val_loss:.8f},{h.lr:.8g}" for h in history]
    return "\n".join(lines) + "\n"


def _evaluate_loss(model, x, y, batch=32) -> float:
    total = 0.0
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for s in range(0, len(x), batch):
            p = model(torch.as_tensor(x[s : s + batch], dtype=dtype))
            total += float((p - torch.as_tensor(y[s : s + batch], dtype=dtype)).abs().mean()) * len(p)
    return total / len(x)


def train(model: RegressorModel, images, targets, cfg: TrainConfig = TrainConfig(), val=None, log=None):
    """Minibatch Adam training; returns the per-epoch history.

    ``val`` is an optional (images, targets) pair scored each epoch without
    augmentation or penalty (NaN when absent).
    """
    x, y = _as_arrays(images, targets)
    xv = yv = None
    if val is not None:
        xv, yv = _as_arrays(*val)
    if cfg.normalize_targets:
        model.set_output_normalization(*target_normalization(y))
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = rng.permutation(len(x))
        total = 0.0
        for b, s in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if cfg.augment:
                xb, yb = augment_batch(xb, yb, cfg, rng)
            pred = model(torch.as_tensor(xb, dtype=dtype))
            loss = l1_loss(pred, torch.as_tensor(yb, dtype=dtype), model, cfg.weight_penalty)
            if not torch.isfinite(loss):
                big = max(float(p.detach().abs().max()) for p in model.parameters())
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {b}: loss={float(loss.detach())} max|param|={big:.3g} lr={lr}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        val_loss = _evaluate_loss(model, xv, yv) if xv is not None else float("nan")
        history.append(HistoryRow(epoch, total / len(x), val_loss, lr))
        if log is not None:
            log(history[-1])
    model.eval()
    return history


def predict(model: RegressorModel, images, batch: int = 32) -> np.ndarray:
    """Raw (N, 209, 6) eval-mode outputs."""
    x = np.stack([getattr(im, "grid", im) for im in images]).astype(np.float64)
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch):
            out.append(model(torch.as_tensor(x[s : s + batch], dtype=dtype)).double().numpy())
    return np.concatenate(out)


def to_curveset(raw: np.ndarray, width: int = GRID_XY) -> CurveSet:
    """Sort each (bound, center, bound) triple and clip into the image."""
    return CurveSet(np.clip(sort_triples(raw), 1.0, float(width)))


def predict_curveset(model: RegressorModel, image) -> CurveSet:
    return to_curveset(predict(model, [image])[0])


# --- checkpoints -----------------------------------------------------------------

_MAGIC = "dxa3d-checkpoint v1"


def save_checkpoint(model: RegressorModel, path) -> None:
    params = model.flat_parameters()
    bufs = np.concatenate([model.out_offset.double().numpy(), model.out_scale.double().numpy()])
    header = "\n".join([
        _MAGIC,
        model.config.to_text(),
        f"parameter_count={params.size}",
        f"buffer_count={bufs.size}",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.astype("<f8").tobytes())
        fh.write(bufs.astype("<f8").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> RegressorModel:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    kv = dict(line.split("=", 1) for line in lines[1:-1])
    model = build_model(ModelConfig.from_dict(kv), dtype=dtype)
    n, m = int(kv["parameter_count"]), int(kv["buffer_count"])
    if n != model.parameter_count():
        raise ValueError(f"{path}: parameter count {n} does not match config ({model.parameter_count()})")
    data = np.frombuffer(raw[end:], dtype="<f8")
    if data.size != n + m:
        raise ValueError(f"{path}: truncated payload")
    model.set_flat_parameters(data[:n])
    half = m // 2
    model.set_output_normalization(data[n : n + half], data[n + half :])
    model.eval()
    return model
