"""Layer-wise diagnostics: disruption, discrepancy/correlation, saliency, separability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import MomentumState, momentum_update
from .auxtrain import AuxiliaryBank, aux_probability
from .rng import derive_seed
from .zoo import TapId, TappedNetwork

DISTANCE_STEP = 5e-5
DISTANCE_THRESHOLD = 0.999
DISTANCE_CAP = 20_000


def _to_tensor(x: np.ndarray | torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(x) if isinstance(x, np.ndarray) else x


def disruption(bank: AuxiliaryBank, tap, y_tgt: int, x, x_adv) -> np.ndarray:
    """p(y_tgt | tap of x_adv) - p(y_tgt | tap of x), per sample, in [-1, 1]."""
    x, x_adv = _to_tensor(x), _to_tensor(x_adv)
    with torch.no_grad():
        before = aux_probability(bank, tap, y_tgt, x)
        after = aux_probability(bank, tap, y_tgt, x_adv)
    return (after - before).numpy()


@dataclass
class DisruptionCurve:
    model_id: str
    attack_id: str
    tap_indices: list[int]
    values: list[float]  # mean disruption per tap

    def __post_init__(self):
        for v in self.values:
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"disruption {v} outside [-1, 1]")


def disruption_curve(bank: AuxiliaryBank, attack_id: str, x: np.ndarray, x_adv: np.ndarray,
                     y_tgt: np.ndarray, taps: list[TapId] | None = None) -> DisruptionCurve:
    """Average per-tap disruption of a perturbation set against one bank.

    y_tgt holds each sample's probed class (the attack's target class).
    """
    taps = taps if taps is not None else bank.taps
    x_t, xa_t = _to_tensor(x), _to_tensor(x_adv)
    values = []
    for tap in taps:
        per_class = np.zeros(len(y_tgt))
        with torch.no_grad():
            for c in np.unique(y_tgt):
                rows = np.nonzero(y_tgt == c)[0]
                before = aux_probability(bank, tap, int(c), x_t[rows])
                after = aux_probability(bank, tap, int(c), xa_t[rows])
                per_class[rows] = (after - before).numpy()
        values.append(float(per_class.mean()))
    return DisruptionCurve(bank.arch_id, attack_id, [t.index for t in taps], values)


@dataclass
class DiscrepancyRecord:
    tap_index: int
    mean_discrepancy: float  # KL in nats, >= 0
    correlation: float  # 1 / (1 + KL), in (0, 1]

    def __post_init__(self):
        if self.mean_discrepancy < 0:
            raise ValueError("KL divergence cannot be negative")
        if not 0.0 < self.correlation <= 1.0:
            raise ValueError("correlation outside (0, 1]")


def kl_divergence(p_logits: np.ndarray | torch.Tensor, q_logits: np.ndarray | torch.Tensor) -> np.ndarray:
    """KL(smax(p_logits) || smax(q_logits)) per row, in nats."""
    p_logits = _to_tensor(np.asarray(p_logits, dtype=np.float64) if isinstance(p_logits, np.ndarray) else p_logits)
    q_logits = _to_tensor(np.asarray(q_logits, dtype=np.float64) if isinstance(q_logits, np.ndarray) else q_logits)
    lp = F.log_softmax(p_logits, dim=-1)
    lq = F.log_softmax(q_logits, dim=-1)
    kl = (lp.exp() * (lp - lq)).sum(dim=-1)
    return torch.clamp(kl, min=0.0).numpy()  # clamp shaves negative rounding dust


def discrepancy(bank: AuxiliaryBank, net: TappedNetwork, tap, x) -> np.ndarray:
    """Per-sample KL between class-restricted auxiliary and whitebox distributions.

    Both vectors are pre-squash logits over the bank's class set, softmaxed.
    """
    x = _to_tensor(x)
    tap = net.tap(tap)
    classes = bank.classes
    with torch.no_grad():
        feats = bank.features(tap, x)
        aux_logits = torch.stack([bank.model(tap, c)(feats) for c in classes], dim=1)
        white_logits = net(x)[:, classes]
    return kl_divergence(aux_logits, white_logits)


def discrepancy_curve(bank: AuxiliaryBank, net: TappedNetwork, x: np.ndarray,
                      taps: list[TapId] | None = None, max_samples: int = 500) -> list[DiscrepancyRecord]:
    taps = taps if taps is not None else bank.taps
    x = x[:max_samples]
    records = []
    for tap in taps:
        kl = float(discrepancy(bank, net, tap, x).mean())
        records.append(DiscrepancyRecord(tap.index, kl, 1.0 / (1.0 + kl)))
    return records


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), non-negative
    tap_index: int
    class_id: int

    def __post_init__(self):
        if (self.values < 0).any():
            raise ValueError("saliency must be non-negative")

    def normalized(self) -> np.ndarray:
        """Max-normalized to 1 for rendering."""
        peak = float(self.values.max())
        return self.values / peak if peak > 0 else self.values


def smoothgrad_saliency(bank: AuxiliaryBank, tap, class_id: int, x: np.ndarray | torch.Tensor,
                        sigma: float = 0.15, n_samples: int = 50, seed: int = 0) -> SaliencyMap:
    """Mean |input-gradient of the pre-squash auxiliary output| over noisy copies."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = _to_tensor(x)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    tap = bank.net.tap(tap)
    model = bank.model(tap, class_id)
    g = torch.Generator().manual_seed(derive_seed("smoothgrad", seed))
    acc = torch.zeros_like(x[0])
    for _ in range(n_samples):
        noise = torch.randn(x.shape, generator=g, dtype=x.dtype) * sigma
        xn = (x + noise).requires_grad_(True)
        z = model(bank.features(tap, xn)).sum()
        grad = torch.autograd.grad(z, xn)[0]
        acc += grad[0].abs()
    sal = (acc / n_samples).sum(dim=0)  # channel sum -> (H, W)
    return SaliencyMap(sal.detach().numpy(), tap.index, int(class_id))


@dataclass
class DistanceResult:
    steps: int
    censored: bool


def _distance_batch(bank: AuxiliaryBank, net: TappedNetwork, tap: TapId, images: torch.Tensor,
                    class_ids: torch.Tensor, step_size: float, threshold: float,
                    cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Steps until each (image, class) pair reaches the confidence threshold.

    Same update as the targeted feature-distribution attack: BCE descent,
    momentum recurrence, sign step, clip to [0, 1]; no epsilon ball. Momentum
    is private to the batch and starts at zero.
    """
    n = len(images)
    steps = np.zeros(n, dtype=np.int64)
    censored = np.zeros(n, dtype=bool)
    active = np.arange(n)
    x = images.clone()
    m = torch.zeros_like(x)
    taken = 0
    while len(active):
        with torch.no_grad():
            probs = torch.zeros(len(active), dtype=x.dtype)
            for c in torch.unique(class_ids[active]).tolist():
                rows = torch.nonzero(class_ids[active] == c, as_tuple=True)[0]
                probs[rows] = aux_probability(bank, tap, int(c), x[active][rows])
        reached = probs.numpy() >= threshold
        steps[active[reached]] = taken
        live = active[~reached]
        if taken >= cap:
            censored[live] = True
            steps[live] = taken
            break
        active = live
        if not len(active):
            break
        xa = x[active].detach().requires_grad_(True)
        probs = torch.zeros(len(active), dtype=x.dtype)
        for c in torch.unique(class_ids[active]).tolist():
            rows = torch.nonzero(class_ids[active] == c, as_tuple=True)[0]
            probs = probs.index_put((rows,), aux_probability(bank, tap, int(c), xa[rows]))
        loss = -torch.log(probs).sum()
        grad = torch.autograd.grad(loss, xa)[0]
        state = momentum_update(MomentumState(m[active]), grad)
        m[active] = state.m
        x[active] = torch.clamp(xa.detach() - step_size * torch.sign(state.m), 0.0, 1.0)
        taken += 1
    return steps, censored


def class_distance(bank: AuxiliaryBank, net: TappedNetwork, tap, x, class_id: int,
                   step_size: float = DISTANCE_STEP, threshold: float = DISTANCE_THRESHOLD,
                   cap: int = DISTANCE_CAP) -> DistanceResult:
    """Perturbation steps for one sample to enter a class's high-confidence region."""
    x = _to_tensor(x)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    tap = net.tap(tap)
    steps, censored = _distance_batch(
        bank, net, tap, x, torch.tensor([class_id]), step_size, threshold, cap)
    return DistanceResult(int(steps[0]), bool(censored[0]))


@dataclass
class SeparabilityReport:
    tap_index: int
    mean_intra: float | None  # steps; None if every intra run was censored
    mean_inter: float | None
    separability: float | None  # inter - intra
    censored: int
    n_runs: int

    @property
    def all_censored(self) -> bool:
        return self.censored == self.n_runs


def separability(bank: AuxiliaryBank, net: TappedNetwork, tap, images: np.ndarray,
                 labels: np.ndarray, step_size: float = DISTANCE_STEP,
                 threshold: float = DISTANCE_THRESHOLD, cap: int = DISTANCE_CAP,
                 batch_size: int = 64) -> SeparabilityReport:
    """Mean inter-class minus intra-class distance, censored runs excluded."""
    tap = net.tap(tap)
    pairs = []  # (sample index, probe class, is_intra)
    for i, y in enumerate(labels):
        pairs.append((i, int(y), True))
        for c in bank.classes:
            if c != int(y):
                pairs.append((i, c, False))
    steps_all = np.zeros(len(pairs), dtype=np.int64)
    cens_all = np.zeros(len(pairs), dtype=bool)
    imgs = _to_tensor(images)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        xb = imgs[[p[0] for p in chunk]]
        cb = torch.tensor([p[1] for p in chunk])
        s, c = _distance_batch(bank, net, tap, xb, cb, step_size, threshold, cap)
        steps_all[start:start + len(chunk)] = s
        cens_all[start:start + len(chunk)] = c
    intra_mask = np.array([p[2] for p in pairs])
    intra_ok = intra_mask & ~cens_all
    inter_ok = ~intra_mask & ~cens_all
    mean_intra = float(steps_all[intra_ok].mean()) if intra_ok.any() else None
    mean_inter = float(steps_all[inter_ok].mean()) if inter_ok.any() else None
    sep = (mean_inter - mean_intra) if (mean_intra is not None and mean_inter is not None) else None
    return SeparabilityReport(tap.index, mean_intra, mean_inter, sep,
                              int(cens_all.sum()), len(pairs))
