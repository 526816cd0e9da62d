"""Whitebox -> blackbox transfer evaluation: subsets, the four metrics, sweeps.

Metrics over an attacked instance set of size n:
  error = #{black(x_adv) != y_src} / n
  tSuc  = #{black(x_adv) == y_tgt} / n
  uTR   = #{black fooled and white fooled} / #{white fooled}
  tTR   = #{black targeted-hit and white targeted-hit} / #{white targeted-hit}
Zero denominators give 0 and flag the report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks
from .attacks import AttackResult, AttackSpec, VARIANTS
from .auxtrain import AuxiliaryBank
from .data import Dataset
from .rng import derive_seed
from .zoo import TapId, TappedNetwork, predict

DEFAULT_MAX_SOURCES = 50


class EvaluationError(RuntimeError):
    pass


@dataclass
class EvalSubset:
    """Samples initially correctly classified by both models, plus their targets."""

    images: np.ndarray  # (M, 3, H, W)
    y_src: np.ndarray  # (M,)
    targets: list[list[int]]  # per-sample target classes (empty lists => untargeted use)
    indices: np.ndarray  # positions in the originating test set
    whitebox_id: str
    blackbox_id: str


def build_eval_subset(white: TappedNetwork, black: TappedNetwork, test: Dataset,
                      target_mode: str = "all_others", seed: int = 0,
                      max_sources: int | None = DEFAULT_MAX_SOURCES) -> EvalSubset:
    """Filter to doubly-correct samples and assign target classes."""
    if target_mode not in ("all_others", "random_one"):
        raise ValueError(f"unknown target_mode {target_mode!r}")
    pw = predict(white, test.pixels)
    pb = predict(black, test.pixels)
    keep = np.nonzero((pw == test.labels) & (pb == test.labels))[0]
    if len(keep) == 0:
        raise EvaluationError("no test samples are correctly classified by both models")
    rng = np.random.default_rng(derive_seed("subset", seed))
    if max_sources is not None and len(keep) > max_sources:
        keep = keep[np.sort(rng.choice(len(keep), size=max_sources, replace=False))]
    y_src = test.labels[keep]
    targets: list[list[int]] = []
    for ys in y_src:
        others = [c for c in range(test.num_classes) if c != int(ys)]
        if target_mode == "all_others":
            targets.append(others)
        else:
            targets.append([int(rng.choice(others))])
    return EvalSubset(test.pixels[keep], y_src, targets, keep, white.arch_id, black.arch_id)


@dataclass
class TransferReport:
    """One (whitebox, blackbox, variant, tap) cell of a sweep."""

    whitebox_id: str
    blackbox_id: str
    variant: str
    tap_index: int | None
    tap_name: str | None
    error: float
    tsuc: float
    utr: float
    ttr: float
    n: int
    n_white_fooled: int
    n_white_targeted: int
    utr_denom_zero: bool = False
    ttr_denom_zero: bool = False
    eval_seed: int = 0
    epsilon: float | None = None
    status: str = "ok"
    message: str = ""

    def __post_init__(self):
        for name in ("error", "tsuc", "utr", "ttr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.tsuc > self.error + 1e-12:
            raise ValueError("tSuc cannot exceed error")

    @property
    def whitebox_error(self) -> float:
        return self.n_white_fooled / self.n if self.n else 0.0

    @property
    def whitebox_tsuc(self) -> float:
        return self.n_white_targeted / self.n if self.n else 0.0


def score_transfer(results: list[AttackResult], white: TappedNetwork, black: TappedNetwork,
                   eval_seed: int = 0, batch_size: int = 256) -> TransferReport:
    """Compute the four metrics for a finished list of attack results."""
    if not results:
        raise ValueError("no attack results to score")
    x_adv = np.stack([r.x_adv for r in results])
    pw = predict(white, x_adv, batch_size=batch_size)
    pb = predict(black, x_adv, batch_size=batch_size)
    return _score_with_predictions(results, pw, pb, white, black, eval_seed)


def _score_with_predictions(results: list[AttackResult], pw: np.ndarray, pb: np.ndarray,
                            white: TappedNetwork, black: TappedNetwork,
                            eval_seed: int) -> TransferReport:
    for r in results:
        if r.spec.y_src is None:
            raise ValueError("attack result lacks y_src")
    y_src = np.array([r.spec.y_src for r in results])
    y_tgt = np.array([-1 if r.spec.y_tgt is None else r.spec.y_tgt for r in results])

    white_fooled = pw != y_src
    black_fooled = pb != y_src
    white_hit = pw == y_tgt  # never true when y_tgt == -1
    black_hit = pb == y_tgt

    n = len(results)
    n_wf = int(white_fooled.sum())
    n_wt = int(white_hit.sum())
    utr = float((black_fooled & white_fooled).sum() / n_wf) if n_wf else 0.0
    ttr = float((black_hit & white_hit).sum() / n_wt) if n_wt else 0.0
    spec0 = results[0].spec
    tap_index = tap_name = None
    if spec0.tap is not None:
        tap = white.tap(spec0.tap)
        tap_index, tap_name = tap.index, tap.name
    return TransferReport(
        whitebox_id=white.arch_id,
        blackbox_id=black.arch_id,
        variant=spec0.variant,
        tap_index=tap_index,
        tap_name=tap_name,
        error=float(black_fooled.mean()),
        tsuc=float(black_hit.mean()),
        utr=utr,
        ttr=ttr,
        n=n,
        n_white_fooled=n_wf,
        n_white_targeted=n_wt,
        utr_denom_zero=n_wf == 0,
        ttr_denom_zero=n_wt == 0,
        eval_seed=eval_seed,
        epsilon=spec0.epsilon,
    )


REPORT_COLUMNS = [
    "whitebox_id", "blackbox_id", "variant", "tap_index", "tap_name", "eval_seed", "epsilon",
    "error", "tsuc", "utr", "ttr", "n", "n_white_fooled", "n_white_targeted",
    "utr_denom_zero", "ttr_denom_zero", "status", "message",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class SweepStore:
    """Append-only CSV of cell reports plus JSONL of per-instance outcomes.

    Rows are keyed by (whitebox, blackbox, variant, tap, seed, epsilon) so an
    interrupted sweep resumes without recomputing finished cells.
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.dir / "reports.csv"
        self.jsonl_path = self.dir / "outcomes.jsonl"
        self._keys: set[tuple] = set()
        self._rows: list[dict] = []
        if self.csv_path.exists():
            with self.csv_path.open() as fh:
                for row in csv.DictReader(fh):
                    self._rows.append(row)
                    self._keys.add(self._key_of_row(row))
        else:
            with self.csv_path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(REPORT_COLUMNS)

    @staticmethod
    def cell_key(whitebox_id, blackbox_id, variant, tap_index, eval_seed, epsilon) -> tuple:
        return (whitebox_id, blackbox_id, variant,
                "" if tap_index is None else str(tap_index), str(eval_seed), _fmt(epsilon))

    @classmethod
    def _key_of_row(cls, row: dict) -> tuple:
        return (row["whitebox_id"], row["blackbox_id"], row["variant"],
                row["tap_index"], row["eval_seed"], row["epsilon"])

    def has(self, key: tuple) -> bool:
        return key in self._keys

    def append(self, report: TransferReport, outcomes: list[dict] | None = None) -> None:
        row = {c: _fmt(getattr(report, c)) for c in REPORT_COLUMNS}
        with self.csv_path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([row[c] for c in REPORT_COLUMNS])
        self._rows.append(row)
        self._keys.add(self._key_of_row(row))
        if outcomes:
            with self.jsonl_path.open("a") as fh:
                for rec in outcomes:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def reports(self) -> list[dict]:
        return list(self._rows)


def _instance_table(subset: EvalSubset, targeted: bool) -> list[tuple[int, int, int | None]]:
    rows = []
    for i in range(len(subset.y_src)):
        if targeted:
            for t in subset.targets[i]:
                rows.append((i, int(subset.y_src[i]), int(t)))
        else:
            rows.append((i, int(subset.y_src[i]), None))
    return rows


def run_cell(white: TappedNetwork, black: TappedNetwork, bank: AuxiliaryBank | None,
             variant: str, tap: TapId | None, subset: EvalSubset, *, epsilon: float | None = None,
             K: int = attacks.DEFAULT_ITERATIONS, objective_space: str = "bce",
             lambda_weight: float = attacks.DEFAULT_LAMBDA, eta: float = attacks.DEFAULT_ETA,
             eval_seed: int = 0, batch_size: int = 128,
             ) -> tuple[TransferReport, list[dict], list[AttackResult]]:
    """Attack every instance of one (variant, tap) cell and score it."""
    v = VARIANTS[variant]
    table = _instance_table(subset, v.targeted)
    if not table:
        raise EvaluationError("eval subset produced no attack instances")
    spec = AttackSpec(
        variant=variant,
        y_src=0, y_tgt=1 if v.targeted else None,  # placeholders; vectors rule
        tap=None if tap is None else tap.index,
        epsilon=epsilon, K=K, objective_space=objective_space,
        lambda_weight=lambda_weight, eta=eta,
        seed=derive_seed("cell", eval_seed, variant, -1 if tap is None else tap.index),
    )
    results: list[AttackResult] = []
    for start in range(0, len(table), batch_size):
        chunk = table[start:start + batch_size]
        imgs = subset.images[[c[0] for c in chunk]]
        ysrc = np.array([c[1] for c in chunk])
        ytgt = np.array([c[2] for c in chunk]) if v.targeted else None
        results.extend(attacks.run_attack_instances(spec, white, bank, imgs, ysrc, ytgt))
    x_adv = np.stack([r.x_adv for r in results])
    pw = predict(white, x_adv)
    pb = predict(black, x_adv)
    report = _score_with_predictions(results, pw, pb, white, black, eval_seed)
    outcomes = []
    for j, r in enumerate(results):
        outcomes.append({
            "whitebox_id": white.arch_id, "blackbox_id": black.arch_id,
            "variant": variant, "tap_index": None if tap is None else tap.index,
            "eval_seed": eval_seed, "epsilon": r.spec.epsilon,
            "sample_index": int(subset.indices[table[j][0]]),
            "y_src": r.spec.y_src, "y_tgt": r.spec.y_tgt,
            "white_pred": int(pw[j]), "black_pred": int(pb[j]),
        })
    return report, outcomes, results


def sweep(white: TappedNetwork, black: TappedNetwork, bank: AuxiliaryBank | None,
          variants: list[str], taps: list[TapId], subset: EvalSubset, *,
          store: SweepStore | None = None, eval_seed: int = 0, epsilon: float | None = None,
          K: int = attacks.DEFAULT_ITERATIONS, batch_size: int = 128,
          objective_space: str = "bce") -> list[TransferReport]:
    """One report per (variant, tap) cell; baselines get a single logit cell."""
    reports = []
    for variant in variants:
        v = VARIANTS[variant]
        cell_taps: list[TapId | None] = [white.logit_tap] if v.logit_baseline else list(taps)
        for tap in cell_taps:
            key = SweepStore.cell_key(white.arch_id, black.arch_id, variant,
                                      None if tap is None else tap.index, eval_seed,
                                      epsilon if epsilon is not None
                                      else (attacks.TARGETED_EPSILON if v.targeted
                                            else attacks.UNTARGETED_EPSILON))
            if store is not None and store.has(key):
                continue
            try:
                report, outcomes, _ = run_cell(
                    white, black, bank, variant, tap, subset, epsilon=epsilon, K=K,
                    eval_seed=eval_seed, batch_size=batch_size,
                    objective_space=objective_space)
            except (EvaluationError, FloatingPointError, LookupError) as e:
                report = TransferReport(
                    whitebox_id=white.arch_id, blackbox_id=black.arch_id, variant=variant,
                    tap_index=None if tap is None else tap.index,
                    tap_name=None if tap is None else tap.name,
                    error=0.0, tsuc=0.0, utr=0.0, ttr=0.0, n=0,
                    n_white_fooled=0, n_white_targeted=0,
                    utr_denom_zero=True, ttr_denom_zero=True,
                    eval_seed=eval_seed, epsilon=epsilon, status="failed", message=str(e))
                outcomes = []
            reports.append(report)
            if store is not None:
                store.append(report, outcomes)
    return reports
