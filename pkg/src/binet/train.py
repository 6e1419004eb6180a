"""Training loop, evaluation, per-epoch diagnostics and checkpoints.

Each epoch:

1. every binary layer recomputes its estimator state (t, k) from the
   current standardized weights,
2. minibatches are drawn from a seeded permutation; forward, loss,
   backward, SGD step,
3. a :class:`MetricsRecord` is appended.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .dte import ClampBounds, EstimatorState
from .imb import binary_entropy, entropy_from_p, quantization_error, sign
from .model import LayerSnapshot, ModelSpec, Network, build_model, sign_flip_rate
from .optim import SGD, cosine_lr
from .tensor import Tensor, backward, no_grad

LAYER_FIELDS = (
    "entropy",
    "p_plus",
    "act_entropy",
    "t",
    "k",
    "t_eps",
    "t_100",
    "updatable_fraction",
    "sign_flip_rate",
    "error_l1",
    "error_l2",
    "grad_nonzero",
)
RECORD_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")


@dataclass
class DatasetSplit:
    images: np.ndarray  # float32 N x C x H x W, normalized
    labels: np.ndarray  # int64 N
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"split: images {self.images.shape} vs labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"split: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: Optional[int]) -> "DatasetSplit":
        if n is None or n >= len(self):
            return self
        return DatasetSplit(self.images[:n], self.labels[:n], self.num_classes)


@dataclass
class TrainSettings:
    epochs: int = 30
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    eval_batch: int = 1000

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer hyperparameters")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    layers: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=False)

    def csv_header(self) -> list[str]:
        cols = list(RECORD_FIELDS)
        for name in self.layers:
            cols += [f"{name}.{f}" for f in LAYER_FIELDS]
        return cols

    def csv_row(self) -> list[str]:
        vals = [getattr(self, f) for f in RECORD_FIELDS]
        for name in self.layers:
            vals += [self.layers[name].get(f, float("nan")) for f in LAYER_FIELDS]
        return [_fmt(v) for v in vals]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, np.generic):
        return _jsonable(o.item())
    return o


# -- evaluation ------------------------------------------------------------
def evaluate(net: Network, split: DatasetSplit, batch_size: int = 1000) -> tuple[float, float]:
    """(top-1 accuracy, mean cross-entropy) in eval mode."""
    if len(split) == 0:
        return float("nan"), float("nan")
    logits = net.predict_logits(split.images, batch_size)
    logp = F.log_softmax_array(logits)
    loss = float(-logp[np.arange(len(split)), split.labels].mean())
    return F.accuracy(logits, split.labels), loss


def layer_diagnostics(net: Network) -> dict[str, dict[str, float]]:
    """Static per-layer stats of the binary weights (entropy, estimator state, error)."""
    out = {}
    for layer in net.binary_layers():
        w_hat = layer.weights_std()
        signs = sign(w_hat)
        mult, _ = layer.weight_scale(w_hat)
        l1, l2 = quantization_error(w_hat, signs.astype(np.float64) * mult)
        d = layer.estimator.describe()
        p_act = layer.last_act_p_plus
        out[layer.name] = {
            "entropy": binary_entropy(signs),
            "p_plus": float(np.mean(signs > 0)),
            "act_entropy": entropy_from_p(p_act) if math.isfinite(p_act) else float("nan"),
            "t": d["t"],
            "k": d["k"],
            "t_eps": d["t_eps"],
            "t_100": d["t_100"],
            "updatable_fraction": layer.estimator.updatable_fraction(w_hat),
            "error_l1": l1,
            "error_l2": l2,
        }
    return out


def activation_entropies(net: Network, images: np.ndarray) -> dict[str, float]:
    """Entropy of the binarized input activations of each binary layer over ``images`` (eval mode)."""
    layers = net.binary_layers()
    for l in layers:
        l.record_acts = True
    try:
        net.predict_logits(images, batch_size=len(images) or 1)
    finally:
        for l in layers:
            l.record_acts = False
    return {l.name: entropy_from_p(l.last_act_p_plus) for l in layers}


def update_estimators(net: Network, epoch: int, total: int) -> None:
    for layer in net.binary_layers():
        layer.estimator.update(epoch, total, layer.weights_std())


def check_compatible(net: Network, split: DatasetSplit) -> None:
    if tuple(split.images.shape[1:]) != net.spec.input_shape:
        raise ValueError(f"dataset images {split.images.shape[1:]} do not match model input {net.spec.input_shape}")
    if split.num_classes != net.spec.num_classes:
        raise ValueError(f"dataset has {split.num_classes} classes, model {net.spec.num_classes}")


# -- training --------------------------------------------------------------
class Trainer:
    """Owns a network, its optimizer and the epoch counter."""

    def __init__(self, net: Network, settings: TrainSettings):
        self.net = net
        self.settings = settings
        self.opt = SGD(net.parameters(), settings.momentum, settings.weight_decay)
        self.epoch = 0
        self.history: list[MetricsRecord] = []
        self._prev_signs = LayerSnapshot.take(net)

    def run_epoch(
        self, train: DatasetSplit, test: Optional[DatasetSplit] = None, augment_fn: Optional[Callable] = None
    ) -> MetricsRecord:
        s, net = self.settings, self.net
        i, n_ep = self.epoch, s.epochs
        if i >= n_ep:
            raise ValueError(f"training already finished ({n_ep} epochs)")
        update_estimators(net, i, n_ep)
        # updatable fraction is taken on the weights this epoch's state was computed from
        upd = {l.name: l.estimator.updatable_fraction(l.weights_std()) for l in net.binary_layers()}
        lr = cosine_lr(i, n_ep, s.lr0)
        rng = np.random.default_rng([s.seed, i])
        order = rng.permutation(len(train))
        bin_layers = net.binary_layers()
        nz = {l.name: 0.0 for l in bin_layers}
        tot_loss, tot_correct, n_batches, seen = 0.0, 0, 0, 0
        for start in range(0, len(order), s.batch_size):
            idx = order[start : start + s.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            xb, yb = train.images[idx], train.labels[idx]
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            self.opt.zero_grad()
            logits = net.forward(Tensor(xb), training=True)
            loss = F.cross_entropy(logits, yb)
            backward(loss)
            for l in bin_layers:
                g = l.weight.grad
                nz[l.name] += float(np.count_nonzero(g)) / g.size if g is not None else 0.0
            self.opt.step(lr)
            tot_loss += float(loss.data) * len(idx)
            tot_correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            n_batches += 1
            seen += len(idx)
        diag = layer_diagnostics(net)
        now = LayerSnapshot.take(net)
        for name, d in diag.items():
            d["updatable_fraction"] = upd[name]
            d["sign_flip_rate"] = sign_flip_rate(self._prev_signs.signs[name], now.signs[name])
            d["grad_nonzero"] = nz[name] / max(n_batches, 1)
        self._prev_signs = now
        if test is not None and len(test):
            test_acc, test_loss = evaluate(net, test, s.eval_batch)
        else:
            test_acc, test_loss = float("nan"), float("nan")
        rec = MetricsRecord(
            epoch=i,
            lr=lr,
            train_loss=tot_loss / max(seen, 1),
            train_acc=tot_correct / max(seen, 1),
            test_loss=test_loss,
            test_acc=test_acc,
            layers=diag,
        )
        self.history.append(rec)
        self.epoch += 1
        return rec

    def fit(
        self,
        train: DatasetSplit,
        test: Optional[DatasetSplit] = None,
        on_epoch: Optional[Callable[[MetricsRecord, "Trainer"], None]] = None,
        augment_fn: Optional[Callable] = None,
    ) -> list[MetricsRecord]:
        check_compatible(self.net, train)
        if test is not None:
            check_compatible(self.net, test)
        while self.epoch < self.settings.epochs:
            rec = self.run_epoch(train, test, augment_fn)
            if on_epoch is not None:
                on_epoch(rec, self)
        return self.history


def train(
    spec: ModelSpec,
    train_split: DatasetSplit,
    test_split: Optional[DatasetSplit],
    settings: TrainSettings,
    estimator: Optional[dict] = None,
    on_epoch=None,
    augment_fn=None,
) -> tuple[Network, list[MetricsRecord]]:
    """Build ``spec`` with ``settings.seed`` and train it; returns the model and its metrics."""
    net = build_model(spec, settings.seed, estimator)
    trainer = Trainer(net, settings)
    hist = trainer.fit(train_split, test_split, on_epoch, augment_fn)
    return net, hist


# -- checkpoints -------------------------------------------------------------
CKPT_MAGIC = b"BNCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_to_dict(est) -> dict:
    st, b = est.state, est.bounds
    return {
        "config": est.config(),
        "state": asdict(st),
        "t_raw": est.t_raw,
        "bounds": None if b is None else _jsonable(asdict(b)),
    }


def save_checkpoint(trainer: Trainer, extra: Optional[dict] = None) -> bytes:
    """Serialize model spec, latent weights, BN buffers, momentum buffers, estimator states and epoch.

    Layout: magic, u16 version, u32 header length, JSON header, raw
    little-endian float32 arrays in header order, u32 CRC32 of everything before it.
    """
    net = trainer.net
    arrays: list[tuple[str, np.ndarray]] = list(net.state_arrays().items())
    arrays += [(f"momentum:{i}", b) for i, b in enumerate(trainer.opt.buffers)]
    index, blobs, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "spec": net.spec.to_dict(),
        "settings": asdict(trainer.settings),
        "epoch": trainer.epoch,
        "estimators": {k: _state_to_dict(e) for k, e in net.estimators().items()},
        "arrays": index,
        "extra": _jsonable(extra or {}),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for raw in blobs:
        buf.write(raw)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def load_checkpoint(data: bytes) -> tuple[Trainer, dict]:
    """Inverse of :func:`save_checkpoint`; returns a ready-to-resume trainer and the header."""
    if len(data) < 14 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 14 + hlen:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    try:
        header = json.loads(body[10 : 10 + hlen])
        need = max((e["offset"] + e["nbytes"] for e in header["arrays"]), default=0)
    except (ValueError, KeyError, TypeError):
        header, need = None, 0
    if header is not None and len(body) < 10 + hlen + need:
        raise CheckpointError("checkpoint truncated")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    if header is None:
        raise CheckpointError("checkpoint header unreadable")
    payload = body[10 + hlen :]
    arrays = {}
    for ent in header["arrays"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(ent["shape"])
    spec = ModelSpec.from_dict(header["spec"])
    est_cfgs = header["estimators"]
    first_cfg = next(iter(est_cfgs.values()))["config"] if est_cfgs else {}
    net = build_model(spec, 0, first_cfg)
    net.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("momentum:")})
    for name, est in net.estimators().items():
        ent = est_cfgs[name]
        est.__init__(**ent["config"])
        est.set_state(EstimatorState(**ent["state"]), None if ent["bounds"] is None else ClampBounds(
            *(math.inf if v is None else v for v in (ent["bounds"]["t_eps"], ent["bounds"]["t_100"])),
            ent["bounds"]["mode"],
        ))  # fmt: skip
        est.t_raw = ent["t_raw"]
    trainer = Trainer(net, TrainSettings(**header["settings"]))
    for i, b in enumerate(trainer.opt.buffers):
        b[...] = arrays[f"momentum:{i}"]
    trainer.epoch = int(header["epoch"])
    return trainer, header


def weights_only_bytes(net: Network) -> int:
    """Bytes of the latent weights and BN parameters at 32 bits each."""
    return 4 * sum(a.size for a in net.state_arrays().values())


def model_entropies(net: Network) -> dict[str, float]:
    return {l.name: binary_entropy(sign(l.weights_std())) for l in net.binary_layers()}


__all__ = [
    "DatasetSplit",
    "TrainSettings",
    "MetricsRecord",
    "Trainer",
    "train",
    "evaluate",
    "layer_diagnostics",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "LAYER_FIELDS",
    "RECORD_FIELDS",
    "no_grad",
]
