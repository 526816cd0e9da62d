"""Three small tappable CNNs (plain / residual / dense), training and checkpoints.

Each network is an ordered list of segments; a subset of segment outputs are
"taps" — named activations that can be read, truncated at, and differentiated
through. The deepest tap is always the logit layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset
from .rng import derive_seed

ARCH_IDS = ("mini_plain", "mini_residual", "mini_dense")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TapId:
    index: int  # relative depth: 0 = shallowest probed, max = logit layer
    name: str

    def __str__(self) -> str:
        return f"{self.index}:{self.name}"


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    epochs: int
    loss_curve: list[float]


class _Residual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _DenseBlock(nn.Module):
    """Concatenative block: each layer sees everything before it."""

    def __init__(self, cin: int, growth: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList()
        c = cin
        for _ in range(n_layers):
            self.layers.append(
                nn.Sequential(nn.BatchNorm2d(c), nn.ReLU(), nn.Conv2d(c, growth, 3, padding=1, bias=False))
            )
            c += growth
        self.out_channels = c

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class TappedNetwork(nn.Module):
    """Sequential segments with named taps; supports truncated forward passes."""

    def __init__(self, arch_id: str, segments: list[nn.Module], tap_names: list[str | None],
                 num_classes: int, side: int):
        super().__init__()
        if len(segments) != len(tap_names):
            raise ValueError("segments and tap_names must align")
        if tap_names[-1] != "logits":
            raise ValueError("last segment must emit the logits tap")
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.side = side
        self.segments = nn.ModuleList(segments)
        self._tap_names = list(tap_names)
        names = [n for n in tap_names if n is not None]
        self.taps = [TapId(i, n) for i, n in enumerate(names)]
        self._by_name = {t.name: t for t in self.taps}

    @property
    def logit_tap(self) -> TapId:
        return self.taps[-1]

    def tap(self, key: int | str | TapId) -> TapId:
        if isinstance(key, TapId):
            key = key.name
        if isinstance(key, str):
            if key not in self._by_name:
                raise ValueError(f"unknown tap {key!r} for {self.arch_id}")
            return self._by_name[key]
        if not 0 <= key < len(self.taps):
            raise ValueError(f"tap index {key} out of range for {self.arch_id} ({len(self.taps)} taps)")
        return self.taps[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for seg in self.segments:
            x = seg(x)
        return x

    def forward_features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """One full pass; returns every tap's raw (unflattened) activation."""
        out = {}
        for seg, name in zip(self.segments, self._tap_names):
            x = seg(x)
            if name is not None:
                out[name] = x
        return out

    def forward_to_tap(self, x: torch.Tensor, tap: int | str | TapId) -> torch.Tensor:
        """Truncated pass; activation at `tap` flattened to (N, D)."""
        tap = self.tap(tap)
        for seg, name in zip(self.segments, self._tap_names):
            x = seg(x)
            if name == tap.name:
                return x.flatten(1)
        raise AssertionError("tap table out of sync")  # pragma: no cover

    def tap_dims(self) -> dict[str, int]:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            x = torch.zeros(1, 3, self.side, self.side)
            dims = {name: act[0].numel() for name, act in self.forward_features(x).items()}
        self.train(was_training)
        return dims

    def freeze(self) -> "TappedNetwork":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def _seeded_init(module: nn.Module, seed: int) -> None:
    """Re-initialize conv/linear/bn weights from a private generator."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            m.weight.data.uniform_(-bound, bound, generator=g)
            if m.bias is not None:
                m.bias.data.uniform_(-bound, bound, generator=g)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def _conv_bn_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]


def build_architecture(arch_id: str, num_classes: int = 10, side: int = 32, seed: int = 0) -> TappedNetwork:
    """Randomly initialized (seeded) network with the fixed tap table for arch_id."""
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown arch_id {arch_id!r}; expected one of {ARCH_IDS}")
    if side % 8 != 0:
        raise ValueError(f"side must be a multiple of 8, got {side}")
    segments: list[nn.Module]
    if arch_id == "mini_plain":
        s = side // 8
        segments = [
            nn.Sequential(*_conv_bn_relu(3, 32), *_conv_bn_relu(32, 32), nn.MaxPool2d(2)),
            nn.Sequential(*_conv_bn_relu(32, 64)),
            nn.Sequential(*_conv_bn_relu(64, 64), nn.MaxPool2d(2)),
            nn.Sequential(*_conv_bn_relu(64, 128)),
            nn.Sequential(*_conv_bn_relu(128, 128), nn.MaxPool2d(2)),
            nn.Sequential(nn.Flatten(), nn.Linear(128 * s * s, 256), nn.ReLU()),
            nn.Sequential(nn.Linear(256, 128), nn.ReLU()),
            nn.Linear(128, num_classes),
        ]
        tap_names = ["block1", "block2_mid", "block2", "block3_mid", "block3", "fc1", "fc2", "logits"]
    elif arch_id == "mini_residual":
        segments = [
            nn.Sequential(*_conv_bn_relu(3, 16)),  # stem, untapped
            _Residual(16, 16),
            _Residual(16, 16),
            _Residual(16, 32, stride=2),
            _Residual(32, 32),
            _Residual(32, 64, stride=2),
            _Residual(64, 64),
            nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, num_classes)),
        ]
        tap_names = [None, "res1", "res2", "res3", "res4", "res5", "res6", "logits"]
    else:  # mini_dense
        growth, per_block = 12, 4
        b1 = _DenseBlock(24, growth, per_block)
        t1_out = b1.out_channels // 2
        b2 = _DenseBlock(t1_out, growth, per_block)
        t2_out = b2.out_channels // 2
        b3 = _DenseBlock(t2_out, growth, per_block)
        segments = [
            nn.Sequential(*_conv_bn_relu(3, 24), nn.MaxPool2d(2)),  # stem, untapped
            b1,
            nn.Sequential(nn.BatchNorm2d(b1.out_channels), nn.ReLU(),
                          nn.Conv2d(b1.out_channels, t1_out, 1, bias=False), nn.AvgPool2d(2)),
            b2,
            nn.Sequential(nn.BatchNorm2d(b2.out_channels), nn.ReLU(),
                          nn.Conv2d(b2.out_channels, t2_out, 1, bias=False), nn.AvgPool2d(2)),
            b3,
            nn.Sequential(nn.BatchNorm2d(b3.out_channels), nn.ReLU(),
                          nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                          nn.Linear(b3.out_channels, num_classes)),
        ]
        tap_names = [None, "dense1", "trans1", "dense2", "trans2", "dense3", "logits"]
    net = TappedNetwork(arch_id, segments, tap_names, num_classes, side)
    _seeded_init(net, derive_seed("init", arch_id, seed))
    return net


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_milestones: tuple[float, ...] = (0.6, 0.8)  # fractions of total epochs
    lr_decay_factor: float = 0.1
    seed: int = 0


def _as_tensors(ds: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(ds.pixels), torch.from_numpy(ds.labels)


def accuracy(net: TappedNetwork, ds: Dataset, batch_size: int = 256) -> float:
    preds = predict(net, ds.pixels, batch_size=batch_size)
    return float((preds == ds.labels).mean()) if len(ds) else 0.0


def train_classifier(net: TappedNetwork, train: Dataset, test: Dataset, cfg: TrainConfig | None = None) -> TrainReport:
    """Mini-batch SGD on cross-entropy; freezes the network when done."""
    cfg = cfg or TrainConfig()
    if train.side != net.side:
        raise ValueError(f"dataset side {train.side} != network side {net.side}")
    if train.num_classes != net.num_classes:
        raise ValueError(f"dataset classes {train.num_classes} != network classes {net.num_classes}")
    x, y = _as_tensors(train)
    g = torch.Generator().manual_seed(derive_seed("train", net.arch_id, cfg.seed))
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    milestones = {max(1, int(f * cfg.epochs)) for f in cfg.lr_decay_milestones}
    loss_curve: list[float] = []
    net.train()
    for p in net.parameters():
        p.requires_grad_(True)
    for epoch in range(cfg.epochs):
        if epoch in milestones:
            for group in opt.param_groups:
                group["lr"] *= cfg.lr_decay_factor
        perm = torch.randperm(len(x), generator=g)
        total, seen = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        loss_curve.append(total / seen)
    net.freeze()
    return TrainReport(
        train_accuracy=accuracy(net, train),
        test_accuracy=accuracy(net, test) if len(test) else 0.0,
        epochs=cfg.epochs,
        loss_curve=loss_curve,
    )


def predict(net: TappedNetwork, batch: np.ndarray | torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Argmax of logits; ties break toward the lowest class index."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    was_training = net.training
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            outs.append(net(batch[start:start + batch_size]).numpy())
    net.train(was_training)
    return np.argmax(np.concatenate(outs), axis=1)


def save_checkpoint(net: TappedNetwork, path: str | Path, train_seed: int | None = None,
                    dataset_hash: str | None = None, extra: dict | None = None) -> Path:
    """Weight archive plus a JSON manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "arch_id": net.arch_id,
            "num_classes": net.num_classes,
            "side": net.side,
            "state_dict": net.state_dict(),
        },
        path,
    )
    manifest = {
        "arch_id": net.arch_id,
        "num_classes": net.num_classes,
        "side": net.side,
        "taps": [t.name for t in net.taps],
        "train_seed": train_seed,
        "dataset_hash": dataset_hash,
        "weights_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: str | Path) -> TappedNetwork:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    net = build_architecture(blob["arch_id"], num_classes=blob["num_classes"], side=blob["side"])
    net.load_state_dict(blob["state_dict"])
    return net.freeze()
