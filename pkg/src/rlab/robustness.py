"""Robustness over instance ensembles and budgeted model selection.

A model spec is never judged by one training run.  It gets k instances, each
retrained under controlled randomness (weight init, training sample, or both),
and a summary statistic of the instance losses stands in for the model's
quality.  Selection repeatedly grows every survivor's ensemble by one instance
and lets a removal policy cut the field, so weak specs never receive the full
training budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calo import Dataset, bootstrap_sample, subsample
from .errors import ContractError
from .nn import ModelSpec
from .seeding import substream_seed
from .training import EarlyStopConfig, TrainedInstance, train_instance

STATISTIC_KINDS = ("mean", "median", "min", "max", "std", "quantile")

RANDOMIZATION_MODES = ("fixed_data_random_init", "random_data_fixed_init", "both_random")


@dataclass(frozen=True)
class SelectionCriterion:
    """Which statistic of the instance losses ranks a model; lower is better."""

    kind: str = "mean"
    quantile: float | None = None

    def validate(self) -> None:
        if self.kind not in STATISTIC_KINDS:
            raise ContractError(f"unknown statistic {self.kind!r}")
        if self.kind == "quantile":
            if self.quantile is None or not 0.0 < self.quantile < 1.0:
                raise ContractError("quantile criterion needs p strictly inside (0, 1)")
        elif self.quantile is not None:
            raise ContractError(f"{self.kind} takes no quantile parameter")

    def label(self) -> str:
        return f"quantile({self.quantile})" if self.kind == "quantile" else self.kind

    def evaluate(self, losses: Sequence[float]) -> float:
        return robustness_statistic(losses, self)


def robustness_statistic(losses: Sequence[float], criterion: SelectionCriterion) -> float:
    """One summary number for a loss multiset; +inf entries propagate."""
    criterion.validate()
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot summarize an empty loss set")
    if np.any(np.isnan(arr)):
        raise ContractError("losses must be real or +inf, got NaN")
    kind = criterion.kind
    if kind == "mean":
        return float(arr.mean())
    if kind == "median":
        return float(np.median(arr))
    if kind == "min":
        return float(arr.min())
    if kind == "max":
        return float(arr.max())
    if kind == "std":
        return _exact_std(arr)
    return float(np.quantile(arr, criterion.quantile))


def _exact_std(arr: np.ndarray) -> float:
    """Population std; identical entries give 0.0 exactly, not rounding dust,
    and any diverged member makes the spread infinite."""
    if np.all(arr == arr[0]):
        return 0.0
    if np.any(np.isinf(arr)):
        return math.inf
    return float(arr.std())


def summary_statistics(losses: Sequence[float]) -> dict:
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot summarize an empty loss set")
    with np.errstate(invalid="ignore"):     # all-inf sets hit inf - inf
        q1, med, q3 = (float(v) for v in np.quantile(arr, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    if math.isnan(iqr):
        iqr = 0.0     # q1 == q3 == inf: zero spread among equal entries
    return {
        "mean": float(arr.mean()),
        "median": med,
        "min": float(arr.min()),
        "max": float(arr.max()),
        "std": _exact_std(arr),
        "q1": q1,
        "q3": q3,
        "iqr": iqr,
    }


def boxplot_stats(losses: Sequence[float]) -> dict:
    """Quartiles plus whiskers at the most extreme points within 1.5 IQR."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot summarize an empty loss set")
    with np.errstate(invalid="ignore"):     # all-inf sets hit inf - inf
        q1, med, q3 = (float(v) for v in np.quantile(arr, [0.25, 0.5, 0.75]))
        reach = 1.5 * (q3 - q1)
        inside = arr[(arr >= q1 - reach) & (arr <= q3 + reach)]
    whisker_lo = float(inside.min()) if inside.size else q1
    whisker_hi = float(inside.max()) if inside.size else q3
    outliers = arr[(arr < whisker_lo) | (arr > whisker_hi)]
    return {
        "n": int(arr.size),
        "min": float(arr.min()),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(arr.max()),
        "whisker_lo": whisker_lo,
        "whisker_hi": whisker_hi,
        "outliers": [float(v) for v in outliers],
    }


@dataclass
class RobustnessRecord:
    """Append-only loss ensemble for one spec, with per-instance provenance."""

    spec_id: str
    spec_name: str
    mode: str
    sample_size: int
    base_seed: int
    _losses: list[float] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)
    instances: list[TrainedInstance] | None = None

    @property
    def losses(self) -> tuple[float, ...]:
        return tuple(self._losses)

    def add(self, instance: TrainedInstance, keep_instance: bool = False) -> None:
        self._losses.append(instance.final_test_loss)
        self.provenance.append(
            {
                "index": len(self._losses) - 1,
                "init_seed": instance.init_seed,
                "data_seed": instance.data_seed,
                "stop_epoch": instance.stop_epoch,
                "diverged": instance.diverged,
            }
        )
        if keep_instance:
            if self.instances is None:
                self.instances = []
            self.instances.append(instance)

    def statistics(self) -> dict:
        return summary_statistics(self._losses)

    def statistic(self, criterion: SelectionCriterion) -> float:
        return robustness_statistic(self._losses, criterion)

    def to_record(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "spec_name": self.spec_name,
            "mode": self.mode,
            "sample_size": self.sample_size,
            "base_seed": self.base_seed,
            "losses": list(self._losses),
            "statistics": self.statistics(),
            "provenance": list(self.provenance),
        }


def _train_task(args: tuple) -> TrainedInstance:
    spec, pool, test_set, size, data_seed, init_seed, stop, keep = args
    train_set = bootstrap_sample(pool, size, seed=data_seed)
    return train_instance(spec, train_set, test_set, init_seed,
                          stop=stop, data_seed=data_seed, keep_weights=keep)


def run_instances(spec: ModelSpec, k: int, pool: Dataset, test_set: Dataset,
                  mode: str = "both_random", base_seed: int = 0,
                  sample_size: int | None = None,
                  stop: EarlyStopConfig | None = None,
                  keep_instances: bool = False, workers: int = 1) -> RobustnessRecord:
    """Train k instances of one spec under the chosen randomization mode.

    Seeds come from per-instance substreams of base_seed; the fixed side of a
    mode reuses instance 0's substream, so a fixed-data run shares one
    bootstrap draw and a fixed-init run shares one starting point.  Instances
    are independent; worker count changes wall time only, never the record.
    """
    if k < 1:
        raise ContractError(f"need at least one instance, got k={k}")
    if mode not in RANDOMIZATION_MODES:
        raise ContractError(f"unknown randomization mode {mode!r}")
    size = len(pool) if sample_size is None else int(sample_size)
    record = RobustnessRecord(
        spec_id=spec.spec_id(), spec_name=spec.name, mode=mode,
        sample_size=size, base_seed=int(base_seed),
    )
    tasks = []
    for i in range(k):
        data_index = i if mode != "fixed_data_random_init" else 0
        init_index = i if mode != "random_data_fixed_init" else 0
        tasks.append((
            spec, pool, test_set, size,
            substream_seed(base_seed, "data", data_index),
            substream_seed(base_seed, "init", init_index),
            stop, keep_instances,
        ))
    if workers > 1 and k > 1:
        import multiprocessing

        with multiprocessing.Pool(min(workers, k)) as mp:
            instances = mp.map(_train_task, tasks)
    else:
        instances = [_train_task(t) for t in tasks]
    for inst in instances:
        record.add(inst, keep_instance=keep_instances)
    return record


# -- selection -----------------------------------------------------------------------


TrainerFn = Callable[[ModelSpec, int, int], float]
"""(spec, round_index, seed) -> final test loss.  Real training or a mock."""


class HalvingPolicy:
    """Each round from start_round on, remove the worst half (rounded up).

    Ties go to the earlier-enumerated spec: among equal scores the later one
    is removed first.
    """

    def __init__(self, start_round: int = 1):
        if start_round < 1:
            raise ContractError("start_round must be >= 1")
        self.start_round = start_round

    def removals(self, round_index: int, scores: Sequence[float]) -> list[int]:
        n = len(scores)
        if n <= 1 or round_index < self.start_round:
            return []
        return _worst(scores, math.ceil(n / 2))


class BaselineGatePolicy:
    """Round one removes every spec scoring above the reference loss plus a
    margin; afterwards the worst half goes each round."""

    def __init__(self, reference_loss: float, margin: float = 0.2):
        if not math.isfinite(reference_loss) or reference_loss <= 0:
            raise ContractError("reference loss must be finite and positive")
        if margin < 0:
            raise ContractError("margin must be non-negative")
        self.reference_loss = reference_loss
        self.margin = margin
        self._halving = HalvingPolicy(start_round=2)

    def removals(self, round_index: int, scores: Sequence[float]) -> list[int]:
        if round_index == 1:
            gate = (1.0 + self.margin) * self.reference_loss
            return [i for i, s in enumerate(scores) if s > gate]
        return self._halving.removals(round_index, scores)


def _worst(scores: Sequence[float], count: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], -i))
    return sorted(order[:count])


@dataclass
class RoundEntry:
    index: int
    survivors_before: int
    trained: int
    removed: tuple[str, ...]
    rolled_back: bool = False


@dataclass
class SelectionLedger:
    """Everything the selection run did: rounds, counts, removals, budget."""

    rounds: list[RoundEntry] = field(default_factory=list)
    instance_counts: dict[str, int] = field(default_factory=dict)
    cumulative_trainings: int = 0
    survivor_ids: list[str] = field(default_factory=list)
    tie: bool = False

    def to_record(self) -> dict:
        return {
            "rounds": [
                {
                    "index": r.index,
                    "survivors_before": r.survivors_before,
                    "trained": r.trained,
                    "removed": list(r.removed),
                    "rolled_back": r.rolled_back,
                }
                for r in self.rounds
            ],
            "instance_counts": dict(self.instance_counts),
            "cumulative_trainings": self.cumulative_trainings,
            "survivor_ids": list(self.survivor_ids),
            "tie": self.tie,
        }


def select_models(specs: Sequence[ModelSpec], criterion: SelectionCriterion,
                  k: int, policy, trainer: TrainerFn,
                  max_rounds: int = 50, base_seed: int = 0,
                  ) -> tuple[list[ModelSpec], SelectionLedger]:
    """Tournament over specs: one new instance per survivor per round, then the
    policy removes by criterion value.

    Stops at a single survivor or after max_rounds.  If the policy tries to
    remove every survivor at once, nobody is removed, the tie flag is set, and
    the run ends with the full tied set.
    """
    specs = list(specs)
    if not specs:
        raise ContractError("nothing to select from")
    criterion.validate()
    if k < 1:
        raise ContractError("k must be >= 1")
    ids = [s.spec_id() for s in specs]
    if len(set(ids)) != len(ids):
        raise ContractError("spec ids must be unique")

    ledger = SelectionLedger(instance_counts={sid: 0 for sid in ids})
    losses: list[list[float]] = [[] for _ in specs]
    survivors = list(range(len(specs)))

    for round_index in range(1, max_rounds + 1):
        if len(survivors) <= 1:
            break
        for pos in survivors:
            seed = substream_seed(base_seed, ids[pos], "round", round_index)
            losses[pos].append(float(trainer(specs[pos], round_index, seed)))
            ledger.instance_counts[ids[pos]] += 1
            ledger.cumulative_trainings += 1
        scores = [criterion.evaluate(losses[pos]) for pos in survivors]
        removal_positions = set(policy.removals(round_index, scores))
        rolled_back = len(removal_positions) >= len(survivors)
        if rolled_back:
            ledger.tie = True
            removal_positions = set()
        removed_ids = tuple(ids[survivors[p]] for p in sorted(removal_positions))
        ledger.rounds.append(RoundEntry(
            index=round_index,
            survivors_before=len(survivors),
            trained=len(survivors),
            removed=removed_ids,
            rolled_back=rolled_back,
        ))
        survivors = [s for p, s in enumerate(survivors) if p not in removal_positions]
        if rolled_back:
            break

    if len(survivors) > 1:
        ledger.tie = True
    ledger.survivor_ids = [ids[s] for s in survivors]
    return [specs[s] for s in survivors], ledger


# -- experiment drivers ----------------------------------------------------------------


def ecdf(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """(sorted values, cumulative fraction at or below each)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractError("cannot build an ECDF from nothing")
    return v, np.arange(1, v.size + 1) / v.size


def criterion_study(records: Sequence[RobustnessRecord],
                    criteria: Sequence[SelectionCriterion]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per criterion, the ECDF of per-model statistic values: how stringent
    each ranking statistic is over the same model population."""
    if not records:
        raise ContractError("no records to study")
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for crit in criteria:
        values = [rec.statistic(crit) for rec in records]
        out[crit.label()] = ecdf(values)
    return out


def sample_size_sweep(spec: ModelSpec, indices: Sequence[int], k: int,
                      train_pool: Dataset, test_pool: Dataset,
                      base_seed: int = 0, stop: EarlyStopConfig | None = None,
                      sizes: Sequence[int] | None = None, workers: int = 1) -> list[dict]:
    """Loss spread versus training-set size, test sets matched in size.

    Rows carry the raw losses and boxplot statistics, ready for tabulation.
    `sizes` overrides the schedule lookup when given (desk-scale runs).
    """
    from .calo import sample_size_schedule

    if sizes is None:
        sizes = [sample_size_schedule(i) for i in indices]
    rows = []
    for n in sizes:
        seed = substream_seed(base_seed, "sweep", int(n))
        test_set = subsample(test_pool, int(n), seed=substream_seed(seed, "test"))
        record = run_instances(
            spec, k, train_pool, test_set, mode="both_random",
            base_seed=seed, sample_size=int(n), stop=stop, workers=workers,
        )
        rows.append({
            "n": int(n),
            "losses": list(record.losses),
            "box": boxplot_stats(record.losses),
        })
    return rows
