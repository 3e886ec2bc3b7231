"""CNN encoder with OSA / desaturation heads, training and transfer.

The encoder maps a normalised (T, 64) log-Mel segment to a d-dimensional
embedding; the heads map that embedding to an OSA probability and, in
multi-task mode, a desaturation fraction. Fine-tuning either trains the heads
on a frozen encoder or updates every parameter.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ModelError

log = logging.getLogger(__name__)

CLAMP = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TASK_MODES = ("single", "multi")


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64)
    embedding_dim: int = 128
    task_mode: str = "multi"
    n_mels: int = 64
    # average-pool applied to the input before the first conv; (1, 1) = off
    stem_pool: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.stem_pool = tuple(int(p) for p in self.stem_pool)
        if self.embedding_dim <= 0:
            raise ModelError("embedding_dim must be positive")
        if self.task_mode not in TASK_MODES:
            raise ModelError(f"task_mode must be one of {TASK_MODES}")
        if not self.channels:
            raise ModelError("need at least one conv block")

    @property
    def conv_blocks(self) -> int:
        return len(self.channels)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    early_stop_patience: int | None = None
    freeze_encoder: bool = False
    seed: int = 0
    delay_mode: str = "none"

    @classmethod
    def adult(cls, seed: int = 0) -> "TrainConfig":
        return cls(50, 1024, 1e-3, None, False, seed, "none")

    @classmethod
    def paediatric(cls, freeze_encoder: bool, seed: int = 0, delay_mode: str = "none") -> "TrainConfig":
        return cls(20, 8, 1e-5, 5, freeze_encoder, seed, delay_mode)


@dataclass
class Prediction:
    y_hat: float
    s_hat: float | None = None


@dataclass
class LossValue:
    bce: float
    mse: float
    total: float


class OsaNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        if config.stem_pool != (1, 1):
            layers.append(nn.AvgPool2d(config.stem_pool))
        c_in = 1
        for c in config.channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                   nn.Linear(c_in, config.embedding_dim), nn.ReLU()]
        self.encoder = nn.Sequential(*layers)
        heads = {"osa": nn.Linear(config.embedding_dim, 1)}
        if config.task_mode == "multi":
            heads["spo2"] = nn.Linear(config.embedding_dim, 1)
        self.heads = nn.ModuleDict(heads)

    @property
    def task_mode(self) -> str:
        return self.config.task_mode

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """x: (B, T, F) -> (y_hat, s_hat) each of shape (B,)."""
        if x.ndim != 3 or x.shape[-1] != self.config.n_mels:
            raise ModelError(f"expected input (B, T, {self.config.n_mels}), got {tuple(x.shape)}")
        z = self.encoder(x.unsqueeze(1))
        y_hat = torch.sigmoid(self.heads["osa"](z)).squeeze(-1)
        s_hat = torch.sigmoid(self.heads["spo2"](z)).squeeze(-1) if "spo2" in self.heads else None
        return y_hat, s_hat

    def encoder_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith("encoder.")}

    def head_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith("heads.")}


def build_model(config: ModelConfig, seed: int = 0) -> OsaNet:
    torch.manual_seed(seed)
    return OsaNet(config)


def fingerprint(net: OsaNet) -> str:
    """SHA-256 over the encoder parameters (names, shapes and raw bytes)."""
    h = hashlib.sha256()
    for name, p in sorted(net.encoder_parameters().items()):
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def forward(net: OsaNet, x) -> Prediction:
    """Prediction for a single (T, F) segment."""
    xt = torch.as_tensor(np.asarray(x), dtype=next(net.parameters()).dtype)
    with torch.no_grad():
        y_hat, s_hat = net(xt.unsqueeze(0))
    return Prediction(float(y_hat[0]), None if s_hat is None else float(s_hat[0]))


def compute_loss(y_hat: torch.Tensor, s_hat: torch.Tensor | None, y: torch.Tensor,
                 s: torch.Tensor | None, task_mode: str):
    """Batch-mean BCE plus (multi-task) MSE over samples whose s is labelled (not NaN)."""
    p = y_hat.clamp(CLAMP, 1 - CLAMP)
    bce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    mse = torch.zeros((), dtype=y_hat.dtype)
    if task_mode == "multi" and s_hat is not None and s is not None:
        labelled = ~torch.isnan(s)
        if labelled.any():
            mse = ((s[labelled] - s_hat[labelled]) ** 2).mean()
    total = bce + mse if task_mode == "multi" else bce
    return bce, mse, total


def loss(pred, y, s=None, task_mode: str = "multi") -> LossValue:
    """Loss for one Prediction or for arrays of predictions."""
    if isinstance(pred, Prediction):
        y_hat, s_hat = [pred.y_hat], None if pred.s_hat is None else [pred.s_hat]
        y, s = [y], None if s is None else [s]
    else:
        y_hat, s_hat = pred
    t = lambda a: None if a is None else torch.as_tensor(np.asarray(a, dtype=np.float64))
    s_t = t(s)
    if s_t is not None and s_t.ndim == 0:
        s_t = s_t.reshape(1)
    bce, mse, total = compute_loss(t(y_hat), t(s_hat), t(y), s_t, task_mode)
    return LossValue(float(bce), float(mse), float(total))


def backward(net: OsaNet, x: torch.Tensor, y: torch.Tensor, s: torch.Tensor | None,
             freeze_encoder: bool = False) -> tuple[dict[str, torch.Tensor], tuple]:
    """Gradients of the batch loss for every named parameter, plus (bce, mse, total)."""
    net.zero_grad(set_to_none=True)
    y_hat, s_hat = net(x)
    bce, mse, total = compute_loss(y_hat, s_hat, y, s, net.task_mode)
    if not torch.isfinite(total):
        raise ModelError(f"non-finite loss (bce={bce.item()}, mse={mse.item()})")
    total.backward()
    grads = {}
    for name, p in net.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if freeze_encoder and name.startswith("encoder."):
            g.zero_()
        grads[name] = g
    return grads, (bce.item(), mse.item(), total.item())


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(net: OsaNet, grads: dict[str, torch.Tensor], lr: float, state: AdamState,
              frozen: Sequence[str] = ()) -> AdamState:
    """One in-place Adam update. Names in ``frozen`` are left untouched."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    frozen = set(frozen)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name in frozen:
                continue
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
    return state


class SegmentTable:
    """Segments from several nights, addressable by a flat index."""

    def __init__(self, features: Sequence[np.ndarray], y: Sequence[np.ndarray],
                 s: Sequence[np.ndarray]):
        self.features = list(features)
        self.y = np.concatenate(y).astype(np.float32) if len(y) else np.zeros(0, np.float32)
        self.s = np.concatenate(s).astype(np.float32) if len(s) else np.zeros(0, np.float32)
        self.index = np.array([(i, j) for i, f in enumerate(self.features) for j in range(len(f))],
                              dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_nights(cls, nights: Sequence, delays: Sequence[float | None] | None = None):
        """Build from NightData; ``delays`` gives each night's SpO2 label delay (None = no s)."""
        delays = [0.0] * len(nights) if delays is None else delays
        s = [n.s_labels(d) if d is not None else np.full(len(n.samples), np.nan, np.float32)
             for n, d in zip(nights, delays)]
        return cls([n.features.values for n in nights], [n.y for n in nights], s)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows: np.ndarray, dtype=torch.float32):
        x = np.stack([self.features[i][j] for i, j in self.index[rows]])
        return (torch.as_tensor(x, dtype=dtype), torch.as_tensor(self.y[rows], dtype=dtype),
                torch.as_tensor(self.s[rows], dtype=dtype))


@dataclass
class Checkpoint:
    net: OsaNet
    curve: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.net.config

    @property
    def task_mode(self) -> str:
        return self.net.task_mode

    def copy(self) -> "Checkpoint":
        return Checkpoint(copy.deepcopy(self.net), copy.deepcopy(self.curve), copy.deepcopy(self.meta))

    def as_task(self, task_mode: str) -> "Checkpoint":
        """A copy in the requested task mode; multi -> single drops the regression head."""
        if task_mode == self.task_mode:
            return self.copy()
        if task_mode == "multi":
            raise ModelError("a single-task checkpoint cannot serve a multi-task configuration")
        net = OsaNet(replace(self.config, task_mode="single"))
        state = {k: v for k, v in self.net.state_dict().items() if not k.startswith("heads.spo2")}
        net.load_state_dict(state)
        meta = dict(copy.deepcopy(self.meta), derived_from="multi")
        return Checkpoint(net, copy.deepcopy(self.curve), meta)

    def to_bytes(self) -> bytes:
        state = self.net.state_dict()
        header = {
            "version": CKPT_VERSION,
            "model_config": {k: list(v) if isinstance(v, tuple) else v
                             for k, v in asdict(self.config).items()},
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
            "curve": self.curve,
            "meta": self.meta,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        blob = b"".join(v.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                        for v in state.values())
        return CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ModelError("not a checkpoint file")
        pos = len(CKPT_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        if header.get("version") != CKPT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header.get('version')}")
        net = OsaNet(ModelConfig(**header["model_config"]))
        state = {}
        for t in header["tensors"]:
            n = math.prod(t["shape"])
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * n
        if pos != len(data):
            raise ModelError("checkpoint size does not match its tensor manifest")
        net.load_state_dict(state)
        return cls(net, header["curve"], header["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ModelError(f"missing checkpoint: {path}")
        return cls.from_bytes(path.read_bytes())

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,split,bce,mse,total\n")
            for r in self.curve:
                fh.write(f"{r['epoch']},{r['split']},{r['bce']:.6f},{r['mse']:.6f},{r['total']:.6f}\n")


# Checkpoint file: magic, uint32 LE header length, UTF-8 JSON header
# (version, model_config, tensor manifest, curve, meta), then every tensor as
# little-endian float32 in manifest order.
CKPT_MAGIC = b"OSACKPT\x00"
CKPT_VERSION = 1


def evaluate_loss(net: OsaNet, table: SegmentTable, batch_size: int = 64) -> tuple[float, float, float]:
    """Sample-weighted mean (bce, mse, total) over a table, without gradients."""
    if len(table) == 0:
        return math.nan, math.nan, math.nan
    net.eval()
    bce_sum, mse_sum, mse_n = 0.0, 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(table), batch_size):
            rows = np.arange(lo, min(lo + batch_size, len(table)))
            x, y, s = table.batch(rows)
            y_hat, s_hat = net(x)
            bce, _, _ = compute_loss(y_hat, s_hat, y, s, net.task_mode)
            bce_sum += float(bce) * len(rows)
            if s_hat is not None:
                lab = ~torch.isnan(s)
                mse_sum += float(((s[lab] - s_hat[lab]) ** 2).sum())
                mse_n += int(lab.sum())
    bce = bce_sum / len(table)
    mse = mse_sum / mse_n if mse_n else 0.0
    return bce, mse, bce + mse if net.task_mode == "multi" else bce


def _fit(ckpt: Checkpoint, train: SegmentTable, cfg: TrainConfig,
         val: SegmentTable | None = None, stage: str = "train") -> Checkpoint:
    if len(train) == 0:
        raise ModelError("empty training set")
    net = ckpt.net
    frozen = list(net.encoder_parameters()) if cfg.freeze_encoder else []
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    state = AdamState()
    start_epoch = 1 + max((r["epoch"] for r in ckpt.curve if r.get("stage") == stage), default=0)
    best, best_state, since_best = math.inf, None, 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        net.train()
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            x, y, s = train.batch(rows)
            grads, (bce, mse, total) = backward(net, x, y, s, cfg.freeze_encoder)
            adam_step(net, grads, cfg.learning_rate, state, frozen)
            sums += np.array([bce, mse, total]) * len(rows)
        bce, mse, total = sums / len(train)
        ckpt.curve.append({"epoch": epoch, "split": "train", "stage": stage,
                           "bce": bce, "mse": mse, "total": total})
        log.info("%s epoch %d train bce=%.4f mse=%.4f", stage, epoch, bce, mse)
        if val is not None and len(val):
            vb, vm, vt = evaluate_loss(net, val)
            ckpt.curve.append({"epoch": epoch, "split": "val", "stage": stage,
                               "bce": vb, "mse": vm, "total": vt})
            if vt < best:
                best, since_best = vt, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                since_best += 1
                if cfg.early_stop_patience is not None and since_best >= cfg.early_stop_patience:
                    log.info("%s early stop at epoch %d", stage, epoch)
                    break
    if best_state is not None:
        net.load_state_dict(best_state)
        ckpt.meta[f"{stage}_best_val_total"] = best
    net.eval()
    return ckpt


def train_adult(nights: Sequence, model_config: ModelConfig, train_config: TrainConfig,
                resume: Checkpoint | None = None) -> Checkpoint:
    """Pretrain on an adult cohort.

    Multi-task SpO2 labels follow ``train_config.delay_mode`` (default: no delay).
    """
    if not nights:
        raise ModelError("empty adult dataset")
    if resume is not None:
        ckpt = resume.copy()
    else:
        ckpt = Checkpoint(build_model(model_config, train_config.seed),
                          meta={"stage": "adult", "task_mode": model_config.task_mode})
    if ckpt.task_mode == "multi":
        delays, _ = resolve_delays(nights, train_config.delay_mode)
    else:
        delays = [None] * len(nights)
    table = SegmentTable.from_nights(nights, delays)
    if resume is None or train_config.epochs:
        ckpt.meta["adult_train"] = asdict(train_config)
    return _fit(ckpt, table, train_config, stage="adult")


STRATEGIES = ("frozen", "full")


def resolve_delays(nights: Sequence, delay_mode, global_delay_s: float | None = None
                   ) -> tuple[list[float], float | None]:
    """Per-night SpO2 label delays for a delay mode.

    The global median is computed from ``nights`` unless given explicitly.
    Nights without an estimable delay fall back to the global median under SD.
    """
    from .dataset import DelayMode
    from .physio import global_median_delay

    mode = DelayMode.parse(delay_mode)
    if mode is DelayMode.NONE:
        return [0.0] * len(nights), None
    if global_delay_s is None:
        estimates = [n.delays for n in nights if n.delays is not None]
        global_delay_s = global_median_delay(estimates)
    if mode is DelayMode.FIXED_GLOBAL:
        return [global_delay_s] * len(nights), global_delay_s
    return [n.delays.night_median_s if n.delays is not None and n.delays.night_median_s is not None
            else global_delay_s for n in nights], global_delay_s


def fine_tune(checkpoint: Checkpoint, nights: Sequence, strategy: str, delay_mode="none",
              train_config: TrainConfig | None = None, task_mode: str | None = None,
              global_delay_s: float | None = None, val_fraction: float = 0.2) -> Checkpoint:
    """Adapt a pretrained checkpoint to a new cohort.

    ``frozen`` trains only the heads; ``full`` updates encoder and heads. A
    random ``val_fraction`` of the nights drives early stopping, and the
    best-epoch weights are restored.
    """
    if strategy not in STRATEGIES:
        raise ModelError(f"strategy must be one of {STRATEGIES}")
    task_mode = task_mode or checkpoint.task_mode
    from .dataset import DelayMode
    if task_mode == "single" and DelayMode.parse(delay_mode) is not DelayMode.NONE:
        raise ModelError("delayed SpO2 labels need a multi-task configuration")
    ckpt = checkpoint.as_task(task_mode)
    cfg = train_config or TrainConfig.paediatric(strategy == "frozen")
    cfg = replace(cfg, freeze_encoder=(strategy == "frozen"), delay_mode=DelayMode.parse(delay_mode).value)
    if not nights:
        raise ModelError("empty fine-tuning dataset")

    delays, gdelay = resolve_delays(nights, delay_mode, global_delay_s)
    if task_mode == "single":
        delays = [None] * len(nights)
    n_val = int(round(val_fraction * len(nights))) if len(nights) > 1 else 0
    perm = np.random.default_rng(cfg.seed).permutation(len(nights))
    val_idx, train_idx = sorted(perm[:n_val]), sorted(perm[n_val:])
    train = SegmentTable.from_nights([nights[i] for i in train_idx], [delays[i] for i in train_idx])
    val = SegmentTable.from_nights([nights[i] for i in val_idx], [delays[i] for i in val_idx]) if n_val else None

    before = fingerprint(ckpt.net)
    ckpt.meta.update({"stage": "finetune", "strategy": strategy, "task_mode": task_mode,
                      "delay_mode": cfg.delay_mode, "global_delay_s": gdelay,
                      "finetune_train": asdict(cfg),
                      "val_nights": [nights[i].night_id for i in val_idx]})
    _fit(ckpt, train, cfg, val, stage="finetune")
    if strategy == "frozen" and fingerprint(ckpt.net) != before:
        raise ModelError("encoder changed under the frozen strategy")
    return ckpt


def predict_segments(net: OsaNet, values: np.ndarray, batch_size: int = 64):
    """(y_hat, s_hat) arrays for an (n, T, F) stack of segments."""
    net.eval()
    ys, ss = [], []
    with torch.no_grad():
        for lo in range(0, len(values), batch_size):
            x = torch.as_tensor(np.ascontiguousarray(values[lo:lo + batch_size]),
                                dtype=next(net.parameters()).dtype)
            y_hat, s_hat = net(x)
            ys.append(y_hat.numpy())
            if s_hat is not None:
                ss.append(s_hat.numpy())
    y = np.concatenate(ys) if ys else np.zeros(0)
    s = np.concatenate(ss) if ss else None
    return y, s


def predict_night(checkpoint: Checkpoint, night) -> list[tuple]:
    """One (window, Prediction) pair per segment. ``night`` is NightData or NightFeatures."""
    features = getattr(night, "features", night)
    y, s = predict_segments(checkpoint.net, features.values)
    return [(w, Prediction(float(y[i]), None if s is None else float(s[i])))
            for i, w in enumerate(features.windows)]
