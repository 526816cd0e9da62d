"""Feature-distribution attack losses and the momentum-sign iterative optimizer.

Ten variants share one loop: compute a per-sample minimization loss, fold the
input gradient into an L1-normalized momentum accumulator, take a sign step,
project onto the L-inf ball around the clean image and clip to [0, 1].
"""

from __future__ import annotations

import base64
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .auxtrain import AuxiliaryBank, clamp_probability
from .rng import derive_seed
from .zoo import TapId, TappedNetwork

TARGETED_EPSILON = 16.0 / 255.0
UNTARGETED_EPSILON = 8.0 / 255.0
DEFAULT_ITERATIONS = 10
DEFAULT_LAMBDA = 0.8
DEFAULT_ETA = 1e-6
FEATURE_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Variant:
    name: str
    targeted: bool
    uses_target_model: bool = False
    uses_source_model: bool = False
    uses_feature_distance: bool = False
    logit_baseline: bool = False
    random_start: bool = False
    uses_momentum: bool = True


VARIANTS: dict[str, Variant] = {v.name: v for v in [
    Variant("fda", True, uses_target_model=True),
    Variant("fda_ms", True, uses_target_model=True, uses_source_model=True),
    Variant("fda_fd", True, uses_target_model=True, uses_feature_distance=True),
    Variant("ufda", False, uses_source_model=True),
    Variant("ufda_fd", False, uses_source_model=True, uses_feature_distance=True),
    Variant("fd_only", False, uses_feature_distance=True),
    Variant("tpgd", True, logit_baseline=True, random_start=True, uses_momentum=False),
    Variant("tmim", True, logit_baseline=True),
    Variant("upgd", False, logit_baseline=True, random_start=True, uses_momentum=False),
    Variant("umim", False, logit_baseline=True),
]}


@dataclass
class AttackSpec:
    """Full configuration of one attack run; serializable."""

    variant: str
    y_src: int
    y_tgt: int | None = None
    tap: int | str | None = None  # ignored by logit-layer baselines
    epsilon: float | None = None
    K: int = DEFAULT_ITERATIONS
    alpha: float | None = None  # None -> epsilon / K
    lambda_weight: float = DEFAULT_LAMBDA
    eta: float = DEFAULT_ETA
    objective_space: str = "bce"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")
        v = VARIANTS[self.variant]
        if v.targeted:
            if self.y_tgt is None:
                raise ValueError(f"{self.variant} is targeted and requires y_tgt")
            if self.y_tgt == self.y_src:
                raise ValueError("targeted attacks require y_tgt != y_src")
        elif self.y_tgt is not None:
            raise ValueError(f"{self.variant} is untargeted; y_tgt must be absent")
        if self.epsilon is None:
            self.epsilon = TARGETED_EPSILON if v.targeted else UNTARGETED_EPSILON
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if not 0.0 < self.lambda_weight < 1.0:
            raise ValueError("lambda_weight must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.objective_space not in ("bce", "probability"):
            raise ValueError(f"unknown objective_space {self.objective_space!r}")
        if not v.logit_baseline and self.tap is None:
            raise ValueError(f"{self.variant} requires a tap")

    @property
    def effective_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / max(self.K, 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.tap, TapId):
            d["tap"] = self.tap.index
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class MomentumState:
    """L1-normalized gradient accumulator; exactly zero before the first update."""

    m: torch.Tensor

    @classmethod
    def zeros_like(cls, x: torch.Tensor) -> "MomentumState":
        return cls(torch.zeros_like(x))


def momentum_update(state: MomentumState, g: torch.Tensor) -> MomentumState:
    """m' = m + g / ||g||_1 per sample; a zero gradient leaves m unchanged.

    Tensors with >1 dimension are treated as batches over dim 0; a 0/1-d tensor
    is a single sample.
    """
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {tuple(g.shape)} != momentum shape {tuple(state.m.shape)}")
    if g.ndim <= 1:
        norm = g.abs().sum()
        return MomentumState(state.m + (g / norm if norm > 0 else torch.zeros_like(g)))
    norms = g.abs().flatten(1).sum(dim=1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    contrib = g / safe.view(-1, *([1] * (g.ndim - 1)))
    contrib = torch.where(
        (norms > 0).view(-1, *([1] * (g.ndim - 1))), contrib, torch.zeros_like(contrib)
    )
    return MomentumState(state.m + contrib)


def perturb_step(i_k: torch.Tensor, state: MomentumState, spec: AttackSpec,
                 x0: torch.Tensor) -> torch.Tensor:
    """Sign step, L-inf ball projection around x0, then clip to [0, 1]."""
    if i_k.shape != x0.shape or state.m.shape != i_k.shape:
        raise ValueError("image / momentum shape mismatch")
    stepped = i_k - spec.effective_alpha * torch.sign(state.m)
    projected = torch.clamp(stepped, min=x0 - spec.epsilon, max=x0 + spec.epsilon)
    return torch.clamp(projected, 0.0, 1.0)


class BankRequiredError(LookupError):
    def __init__(self, variant: str):
        super().__init__(f"variant {variant!r} needs an auxiliary bank")


def _mixed_head(bank: AuxiliaryBank, tap: TapId, feats: torch.Tensor,
                class_vec: torch.Tensor) -> torch.Tensor:
    """Pre-squash auxiliary outputs with a (possibly) different class per row."""
    out = torch.zeros(len(feats), dtype=feats.dtype)
    for c in torch.unique(class_vec).tolist():
        rows = torch.nonzero(class_vec == c, as_tuple=True)[0]
        out = out.index_put((rows,), bank.model(tap, int(c))(feats[rows]))
    return out


def _loss_components(spec: AttackSpec, net: TappedNetwork, bank: AuxiliaryBank | None,
                     x_cur: torch.Tensor, feats_orig: torch.Tensor | None,
                     y_src: torch.Tensor, y_tgt: torch.Tensor | None) -> torch.Tensor:
    """Per-sample minimization loss for any variant."""
    v = VARIANTS[spec.variant]
    if v.logit_baseline:
        logits = net(x_cur)
        if v.targeted:
            return F.cross_entropy(logits, y_tgt, reduction="none")
        return -F.cross_entropy(logits, y_src, reduction="none")

    tap = net.tap(spec.tap)
    if (v.uses_target_model or v.uses_source_model) and bank is None:
        raise BankRequiredError(spec.variant)
    feats = (bank.features(tap, x_cur) if bank is not None
             else tap_features_no_bank(net, tap, x_cur))

    p_t = p_s = None
    if v.uses_target_model:
        p_t = clamp_probability(torch.sigmoid(_mixed_head(bank, tap, feats, y_tgt)))
    if v.uses_source_model:
        p_s = clamp_probability(torch.sigmoid(_mixed_head(bank, tap, feats, y_src)))
    dist = None
    if v.uses_feature_distance:
        diff = (feats - feats_orig).flatten(1).norm(dim=1)
        dist = diff / (feats_orig.flatten(1).norm(dim=1) + FEATURE_NORM_FLOOR)

    lam, eta = spec.lambda_weight, spec.eta
    if spec.objective_space == "bce":
        bce_t = -torch.log(p_t) if p_t is not None else None  # BCE(p_t, 1)
        bce_s = -torch.log(1.0 - p_s) if p_s is not None else None  # BCE(p_s, 0)
        if spec.variant == "fda":
            return bce_t
        if spec.variant == "fda_ms":
            return lam * bce_t + (1.0 - lam) * bce_s
        if spec.variant == "fda_fd":
            return bce_t - eta * dist
        if spec.variant == "ufda":
            return bce_s
        if spec.variant == "ufda_fd":
            return bce_s - eta * dist
        return -dist  # fd_only
    # probability space: the maximization objectives, negated verbatim
    if spec.variant == "fda":
        return -p_t
    if spec.variant == "fda_ms":
        return -(lam * p_t - (1.0 - lam) * p_s)
    if spec.variant == "fda_fd":
        return -(p_t + eta * dist)
    if spec.variant == "ufda":
        return p_s
    if spec.variant == "ufda_fd":
        return p_s - eta * dist
    return -dist  # fd_only


def tap_features_no_bank(net: TappedNetwork, tap: TapId, x: torch.Tensor) -> torch.Tensor:
    return net.forward_to_tap(x, tap)


def _orig_features(spec: AttackSpec, net: TappedNetwork, bank: AuxiliaryBank | None,
                   x0: torch.Tensor) -> torch.Tensor | None:
    if not VARIANTS[spec.variant].uses_feature_distance:
        return None
    tap = net.tap(spec.tap)
    with torch.no_grad():
        if bank is not None:
            return bank.features(tap, x0)
        return tap_features_no_bank(net, tap, x0)


def attack_loss(spec: AttackSpec, net: TappedNetwork, bank: AuxiliaryBank | None,
                x_current: torch.Tensor, x_orig: torch.Tensor) -> torch.Tensor:
    """Per-sample loss whose descent optimizes the variant's objective."""
    y_src = torch.full((len(x_current),), spec.y_src, dtype=torch.long)
    y_tgt = (torch.full((len(x_current),), spec.y_tgt, dtype=torch.long)
             if spec.y_tgt is not None else None)
    feats_orig = _orig_features(spec, net, bank, x_orig)
    loss = _loss_components(spec, net, bank, x_current, feats_orig, y_src, y_tgt)
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite {spec.variant} loss")
    return loss


@dataclass
class AttackResult:
    """One adversarial example plus its optimization trace."""

    x: np.ndarray
    x_adv: np.ndarray
    delta: np.ndarray
    loss_trace: list[float]
    spec: AttackSpec

    def __post_init__(self):
        eps = self.spec.epsilon
        if float(np.abs(self.delta).max(initial=0.0)) > eps + 1e-6:
            raise ValueError("delta exceeds the epsilon budget")
        if self.x_adv.min(initial=0.0) < 0.0 or self.x_adv.max(initial=1.0) > 1.0:
            raise ValueError("adversarial image escapes [0, 1]")


def _as_batch_tensor(batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch.copy())
    else:
        batch = batch.detach().clone()
    if batch.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) batch, got shape {tuple(batch.shape)}")
    return batch


def run_attack_instances(spec: AttackSpec, net: TappedNetwork, bank: AuxiliaryBank | None,
                         batch: np.ndarray | torch.Tensor, y_src: np.ndarray,
                         y_tgt: np.ndarray | None) -> list[AttackResult]:
    """Run one attack over a batch with per-sample source/target classes.

    spec.y_src / spec.y_tgt act as placeholders here; each returned result
    carries a spec rewritten with its own classes.
    """
    v = VARIANTS[spec.variant]
    x0 = _as_batch_tensor(batch)
    y_src_t = torch.as_tensor(np.asarray(y_src), dtype=torch.long)
    y_tgt_t = torch.as_tensor(np.asarray(y_tgt), dtype=torch.long) if y_tgt is not None else None
    if v.targeted and y_tgt_t is None:
        raise ValueError(f"{spec.variant} requires target classes")

    was_training = net.training
    net.eval()
    feats_orig = _orig_features(spec, net, bank, x0)

    cur = x0.clone()
    if v.random_start:
        g = torch.Generator().manual_seed(derive_seed("start", spec.seed))
        noise = (torch.rand(x0.shape, generator=g, dtype=x0.dtype) * 2.0 - 1.0) * spec.epsilon
        cur = torch.clamp(x0 + noise, 0.0, 1.0)

    state = MomentumState.zeros_like(x0)
    traces: list[list[float]] = [[] for _ in range(len(x0))]
    for k in range(spec.K):
        cur = cur.detach().requires_grad_(True)
        loss = _loss_components(spec, net, bank, cur, feats_orig, y_src_t, y_tgt_t)
        if not torch.isfinite(loss).all():
            bad = int(torch.nonzero(~torch.isfinite(loss))[0])
            net.train(was_training)
            raise FloatingPointError(f"non-finite {spec.variant} loss at sample {bad}")
        grad = torch.autograd.grad(loss.sum(), cur)[0]
        if spec.variant == "fd_only" and k == 0:
            # the feature distance has a zero gradient exactly at its origin;
            # break the tie with a seeded direction or the attack never starts
            stuck = grad.flatten(1).abs().sum(dim=1) == 0
            if bool(stuck.any()):
                g0 = torch.Generator().manual_seed(derive_seed("fd_boot", spec.seed))
                rnd = torch.rand(grad.shape, generator=g0, dtype=grad.dtype) * 2.0 - 1.0
                grad = torch.where(stuck.view(-1, *([1] * (grad.ndim - 1))), rnd, grad)
        for i, val in enumerate(loss.detach().tolist()):
            traces[i].append(val)
        if not v.uses_momentum:
            state = MomentumState.zeros_like(x0)
        state = momentum_update(state, grad)
        cur = perturb_step(cur.detach(), state, spec, x0)
    net.train(was_training)

    cur = cur.detach()
    results = []
    for i in range(len(x0)):
        spec_i = dataclasses.replace(
            spec, y_src=int(y_src_t[i]),
            y_tgt=int(y_tgt_t[i]) if y_tgt_t is not None else None,
        )
        xi = x0[i].numpy()
        xa = cur[i].numpy()
        results.append(AttackResult(xi, xa, xa - xi, traces[i], spec_i))
    return results


def run_attack(spec: AttackSpec, net: TappedNetwork, bank: AuxiliaryBank | None,
               batch: np.ndarray | torch.Tensor) -> list[AttackResult]:
    """Attack a batch of samples of class spec.y_src toward spec.y_tgt."""
    n = len(batch)
    y_src = np.full(n, spec.y_src, dtype=np.int64)
    y_tgt = np.full(n, spec.y_tgt, dtype=np.int64) if spec.y_tgt is not None else None
    return run_attack_instances(spec, net, bank, batch, y_src, y_tgt)


def save_attack_results(results: list[AttackResult], path: str | Path,
                        include_delta: bool = False,
                        indices: list[int] | None = None) -> Path:
    """One JSON record per sample; delta optionally embedded as base64 float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, r in enumerate(results):
            rec = {
                "spec": r.spec.to_dict(),
                "index": int(indices[i]) if indices is not None else i,
                "delta_linf": float(np.abs(r.delta).max(initial=0.0)),
                "delta_l2": float(np.linalg.norm(r.delta)),
                "loss_trace": r.loss_trace,
            }
            if include_delta:
                rec["delta_shape"] = list(r.delta.shape)
                rec["delta_b64"] = base64.b64encode(
                    np.ascontiguousarray(r.delta, dtype=np.float32).tobytes()
                ).decode("ascii")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def load_attack_records(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if "delta_b64" in rec:
                flat = np.frombuffer(base64.b64decode(rec["delta_b64"]), dtype=np.float32)
                rec["delta"] = flat.reshape(rec["delta_shape"]).copy()
            records.append(rec)
    return records
