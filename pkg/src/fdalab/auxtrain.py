"""One-versus-all auxiliary heads g(tap features) -> p(class), and the bank of them.

Features are extracted through the frozen classifier in inference mode and the
raw activation map is flattened with no pooling (an optional dimension cap can
insert spatial average pooling; any use of it is recorded in the bank manifest
as a deviation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset
from .rng import derive_seed
from .zoo import TapId, TappedNetwork, build_architecture

PROB_CLAMP = 1e-7
HIDDEN_UNITS = 200


class BankLookupError(KeyError):
    pass


class AuxTrainError(RuntimeError):
    def __init__(self, tap: TapId, class_id: int, cause: Exception):
        super().__init__(f"auxiliary training failed at tap {tap} class {class_id}: {cause}")
        self.tap = tap
        self.class_id = class_id


def clamp_probability(p: torch.Tensor) -> torch.Tensor:
    return torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


class AuxiliaryModel(nn.Module):
    """2-hidden-layer head (200 units each) with one pre-squash output unit."""

    def __init__(self, input_dim: int, tap_name: str = "", class_id: int = -1):
        super().__init__()
        self.input_dim = input_dim
        self.tap_name = tap_name
        self.class_id = class_id
        self.val_accuracy: float | None = None
        self.fc1 = nn.Linear(input_dim, HIDDEN_UNITS)
        self.fc2 = nn.Linear(HIDDEN_UNITS, HIDDEN_UNITS)
        self.out = nn.Linear(HIDDEN_UNITS, 1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """Pre-squash scalar per sample, shape (N,)."""
        z = F.relu(self.fc1(feats))
        z = F.relu(self.fc2(z))
        return self.out(z).squeeze(-1)

    def probability(self, feats: torch.Tensor) -> torch.Tensor:
        """Squashed output, clamped strictly inside (0, 1)."""
        return clamp_probability(torch.sigmoid(self(feats)))


@dataclass
class AuxTrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    max_feature_dim: int | None = None  # None: flatten raw maps, no pooling


def _pool_side(shape: tuple[int, ...], max_dim: int | None) -> int | None:
    """Target spatial side if the flattened map would exceed max_dim, else None."""
    if max_dim is None or len(shape) != 4:
        return None
    c, h, w = shape[1], shape[2], shape[3]
    if c * h * w <= max_dim:
        return None
    side = h
    while side > 1 and c * side * side > max_dim:
        side //= 2
    return side


def tap_feature_vector(net: TappedNetwork, tap: TapId, x: torch.Tensor,
                       pool_to: int | None = None) -> torch.Tensor:
    """Differentiable (N, D) feature vector at `tap`, honoring a pooling cap."""
    raw = None
    for seg, name in zip(net.segments, net._tap_names):
        x = seg(x)
        if name == tap.name:
            raw = x
            break
    if raw is None:
        raise ValueError(f"tap {tap} not found")
    if pool_to is not None and raw.ndim == 4 and raw.shape[-1] > pool_to:
        raw = F.adaptive_avg_pool2d(raw, pool_to)
    return raw.flatten(1)


def extract_features(net: TappedNetwork, pixels: np.ndarray | torch.Tensor, tap: TapId,
                     pool_to: int | None = None, batch_size: int = 256) -> torch.Tensor:
    """Push a corpus through the frozen truncated model; no gradients retained."""
    if isinstance(pixels, np.ndarray):
        pixels = torch.from_numpy(pixels)
    was_training = net.training
    net.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            chunks.append(tap_feature_vector(net, tap, pixels[start:start + batch_size], pool_to))
    net.train(was_training)
    return torch.cat(chunks) if chunks else torch.empty(0)


def _init_aux(model: AuxiliaryModel, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in (model.fc1, model.fc2, model.out):
        bound = 1.0 / (m.in_features ** 0.5)
        m.weight.data.uniform_(-bound, bound, generator=g)
        m.bias.data.uniform_(-bound, bound, generator=g)


def _train_on_features(feats: torch.Tensor, is_positive: torch.Tensor, tap: TapId,
                       class_id: int, cfg: AuxTrainConfig) -> AuxiliaryModel:
    seed = derive_seed("aux", cfg.seed, tap.index, class_id)
    model = AuxiliaryModel(feats.shape[1], tap.name, class_id)
    _init_aux(model, seed)

    # held-out split shared across the classes of one tap
    gsplit = torch.Generator().manual_seed(derive_seed("auxval", cfg.seed, tap.index))
    perm = torch.randperm(len(feats), generator=gsplit)
    n_val = max(1, int(round(cfg.val_fraction * len(feats))))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) == 0:
        raise ValueError("not enough samples to train an auxiliary model")

    y = is_positive.float()
    n_pos = float(y[tr_idx].sum())
    n_neg = float(len(tr_idx) - n_pos)
    # one-vs-all batches are ~10% positive; reweight to keep the head calibrated
    pos_weight = torch.tensor(n_neg / max(n_pos, 1.0))
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=pos_weight)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(derive_seed("auxshuffle", seed))
    model.train()
    for epoch in range(cfg.epochs):
        order = tr_idx[torch.randperm(len(tr_idx), generator=g)]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(feats[idx]), y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite auxiliary loss at epoch {epoch}")
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        pred = torch.sigmoid(model(feats[val_idx])) >= 0.5
        model.val_accuracy = float((pred == is_positive[val_idx]).float().mean())
    return model


def train_auxiliary(net: TappedNetwork, tap: int | str | TapId, class_id: int, train: Dataset,
                    cfg: AuxTrainConfig | None = None) -> AuxiliaryModel:
    """Train one g(tap, class) head by weighted BCE on frozen-model features."""
    cfg = cfg or AuxTrainConfig()
    tap = net.tap(tap)
    if not 0 <= class_id < train.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {train.num_classes})")
    with torch.no_grad():
        probe = net.forward_features(torch.from_numpy(train.pixels[:1]))[tap.name]
    pool_to = _pool_side(tuple(probe.shape), cfg.max_feature_dim)
    feats = extract_features(net, train.pixels, tap, pool_to)
    is_pos = torch.from_numpy(train.labels == class_id)
    try:
        return _train_on_features(feats, is_pos, tap, class_id, cfg)
    except (RuntimeError, ValueError) as e:
        raise AuxTrainError(tap, class_id, e) from e


@dataclass
class AuxiliaryBank:
    """Grid of trained auxiliary heads over (tap, class), bound to one network."""

    net: TappedNetwork
    arch_id: str
    classes: list[int]
    taps: list[TapId]
    models: dict[tuple[int, int], AuxiliaryModel] = field(default_factory=dict)
    pool_to: dict[int, int | None] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def model(self, tap: int | str | TapId, class_id: int) -> AuxiliaryModel:
        tap = self.net.tap(tap)
        key = (tap.index, int(class_id))
        if key not in self.models:
            raise BankLookupError(f"no auxiliary model for tap {tap} class {class_id}")
        return self.models[key]

    def features(self, tap: int | str | TapId, x: torch.Tensor) -> torch.Tensor:
        tap = self.net.tap(tap)
        return tap_feature_vector(self.net, tap, x, self.pool_to.get(tap.index))

    def val_accuracy(self, tap: int | str | TapId, class_id: int) -> float | None:
        return self.model(tap, class_id).val_accuracy

    def mean_val_accuracy(self, tap: int | str | TapId) -> float:
        tap = self.net.tap(tap)
        accs = [m.val_accuracy for (ti, _), m in self.models.items() if ti == tap.index]
        return float(np.mean([a for a in accs if a is not None]))


def train_bank(net: TappedNetwork, taps, classes, train: Dataset,
               cfg: AuxTrainConfig | None = None, jobs: int = 1) -> AuxiliaryBank:
    """Train |taps| x |classes| independent heads; per-job seeds make any
    execution order (including concurrent) reproduce sequential results."""
    cfg = cfg or AuxTrainConfig()
    taps = [net.tap(t) for t in taps]
    classes = [int(c) for c in classes]
    for c in classes:
        if not 0 <= c < train.num_classes:
            raise ValueError(f"class_id {c} outside [0, {train.num_classes})")
    bank = AuxiliaryBank(net, net.arch_id, classes, taps)
    labels = torch.from_numpy(train.labels)
    for tap in sorted(taps, key=lambda t: t.index):
        with torch.no_grad():
            probe = net.forward_features(torch.from_numpy(train.pixels[:1]))[tap.name]
        pool_to = _pool_side(tuple(probe.shape), cfg.max_feature_dim)
        bank.pool_to[tap.index] = pool_to
        feats = extract_features(net, train.pixels, tap, pool_to)

        def job(c: int) -> AuxiliaryModel:
            try:
                return _train_on_features(feats, labels == c, tap, c, cfg)
            except (RuntimeError, ValueError) as e:
                raise AuxTrainError(tap, c, e) from e

        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as ex:
                futures = [(c, ex.submit(job, c)) for c in classes]
                for c, fut in futures:
                    bank.models[(tap.index, c)] = fut.result()
        else:
            for c in classes:
                bank.models[(tap.index, c)] = job(c)
    if any(bank.pool_to.values()):
        bank.meta["pooling_deviation"] = {
            str(k): v for k, v in bank.pool_to.items() if v is not None
        }
    return bank


def aux_probability(bank: AuxiliaryBank, tap: int | str | TapId, class_id: int,
                    x: np.ndarray | torch.Tensor) -> torch.Tensor:
    """p(y == class_id | tap features of x), differentiable w.r.t. x."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    tap = bank.net.tap(tap)
    model = bank.model(tap, class_id)
    return clamp_probability(torch.sigmoid(model(bank.features(tap, x))))


def aux_logit(bank: AuxiliaryBank, tap: int | str | TapId, class_id: int,
              x: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Pre-squash auxiliary output, differentiable w.r.t. x."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    tap = bank.net.tap(tap)
    return bank.model(tap, class_id)(bank.features(tap, x))


def save_bank(bank: AuxiliaryBank, root: str | Path, whitebox_hash: str | None = None,
              seeds: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for (ti, c), model in sorted(bank.models.items()):
        fname = f"tap{ti:02d}_class{c:03d}.pt"
        torch.save(
            {"input_dim": model.input_dim, "tap_name": model.tap_name, "class_id": c,
             "val_accuracy": model.val_accuracy, "state_dict": model.state_dict()},
            root / fname,
        )
        entries.append({"tap_index": ti, "class_id": c, "file": fname,
                        "val_accuracy": model.val_accuracy, "input_dim": model.input_dim})
    manifest = {
        "arch_id": bank.arch_id,
        "whitebox_checkpoint_sha256": whitebox_hash,
        "classes": bank.classes,
        "taps": [{"index": t.index, "name": t.name} for t in bank.taps],
        "pool_to": {str(k): v for k, v in bank.pool_to.items()},
        "seeds": seeds or {},
        "models": entries,
        "meta": bank.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_bank(root: str | Path, net: TappedNetwork) -> AuxiliaryBank:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["arch_id"] != net.arch_id:
        raise ValueError(f"bank was trained for {manifest['arch_id']}, got {net.arch_id}")
    taps = [net.tap(t["index"]) for t in manifest["taps"]]
    bank = AuxiliaryBank(net, net.arch_id, list(manifest["classes"]), taps,
                         pool_to={int(k): v for k, v in manifest["pool_to"].items()},
                         meta=manifest.get("meta", {}))
    for entry in manifest["models"]:
        blob = torch.load(root / entry["file"], map_location="cpu", weights_only=True)
        model = AuxiliaryModel(blob["input_dim"], blob["tap_name"], blob["class_id"])
        model.load_state_dict(blob["state_dict"])
        model.val_accuracy = blob["val_accuracy"]
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        bank.models[(entry["tap_index"], entry["class_id"])] = model
    return bank
