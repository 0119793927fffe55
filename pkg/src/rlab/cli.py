"""Config-driven command line for datasets, trainings, robustness campaigns,
selection runs, sample-size sweeps, and report emission.

One YAML file drives one command, and the file plus its seeds pins every
output byte: reports carry no wall-clock times, floats are written with repr,
JSON keys are sorted.  Worker count changes elapsed time, nothing else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import subprocess
import sys
from dataclasses import dataclass

import yaml

from .calo import GeneratorConfig, bootstrap_sample, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DatasetFormatError
from .nn import (ModelSpec, SearchSpace, TARGETS, enumerate_search_space,
                 preset_spec, reference_search_space)
from .robustness import (
    BaselineGatePolicy,
    HalvingPolicy,
    SelectionCriterion,
    boxplot_stats,
    ecdf,
    robustness_statistic,
    run_instances,
    sample_size_sweep,
    select_models,
    summary_statistics,
)
from .seeding import substream_seed
from .training import EarlyStopConfig, train_instance

EXIT_OK = 0
EXIT_CONFIG = 2          # malformed or contradictory configuration
EXIT_DATA = 3            # missing or corrupt input files
EXIT_DIVERGED = 4        # the run finished but produced only diverged losses

COMMANDS = ("gen-data", "train", "robustness", "select", "sweep", "report")


@dataclass(frozen=True)
class ExperimentConfig:
    """One command's full description; self-contained including seeds."""

    command: str
    body: dict

    @staticmethod
    def parse(text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"not valid YAML: {e}") from None
        if not isinstance(raw, dict) or "command" not in raw:
            raise ConfigError("config must be a mapping with a 'command' key")
        command = raw.pop("command")
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        return ExperimentConfig(command=command, body=raw)

    def serialize(self) -> str:
        return yaml.safe_dump({"command": self.command, **self.body}, sort_keys=True)


# -- small shared pieces ---------------------------------------------------------------


def _require(body: dict, key: str):
    if key not in body:
        raise ConfigError(f"missing config key {key!r}")
    return body[key]


def _spec_from(body: dict) -> ModelSpec:
    if "preset" in body:
        return preset_spec(body["preset"])
    if "spec" in body:
        return ModelSpec.from_dict(body["spec"])
    raise ConfigError("need a 'spec' block or a 'preset' name")


def _stop_from(body: dict) -> EarlyStopConfig:
    return EarlyStopConfig.from_dict(body["stop"]) if "stop" in body else EarlyStopConfig()


def _criterion_from(body: dict) -> SelectionCriterion:
    d = body.get("criterion", {})
    crit = SelectionCriterion(kind=d.get("kind", "mean"), quantile=d.get("quantile"))
    crit.validate()
    return crit


def _policy_from(body: dict):
    d = body.get("policy", {})
    kind = d.get("kind", "halving")
    if kind == "halving":
        return HalvingPolicy(start_round=int(d.get("start_round", 1)))
    if kind == "baseline_gate":
        return BaselineGatePolicy(
            reference_loss=float(_require(d, "reference_loss")),
            margin=float(d.get("margin", 0.2)),
        )
    raise ConfigError(f"unknown policy {kind!r}")


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


BOX_COLUMNS = ["min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi", "outliers"]


def _box_row(box: dict) -> list:
    return [box[c] for c in BOX_COLUMNS[:-1]] + [";".join(repr(v) for v in box["outliers"])]


# -- command handlers --------------------------------------------------------------------


def cmd_gen_data(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    gen = GeneratorConfig.from_dict(body.get("generator", {}))
    n = int(_require(body, "n"))
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    seed = seed_override if seed_override is not None else int(_require(body, "seed"))
    dataset = generate_dataset(gen, n, seed)
    path = os.path.join(out_dir, body.get("filename", "events.rlab"))
    save_dataset(dataset, path)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"wrote {path}: {n} kind-{gen.dataset_kind} events, sha256 {digest}")
    return EXIT_OK


def cmd_train(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    spec = _spec_from(body)
    train_set = load_dataset(_require(body, "train_data"))
    test_set = load_dataset(_require(body, "test_data"))
    init_seed = seed_override if seed_override is not None else int(_require(body, "init_seed"))
    inst = train_instance(spec, train_set, test_set, init_seed, stop=_stop_from(body))
    _write_json(os.path.join(out_dir, "instance.json"), inst.to_record())
    _write_csv(
        os.path.join(out_dir, "trace.csv"),
        ["epoch", "loss"],
        [[i + 1, v] for i, v in enumerate(inst.loss_trace)],
    )
    print(f"{spec.name}: stopped after {inst.stop_epoch} epochs, "
          f"test loss {inst.final_test_loss!r}, diverged={inst.diverged}")
    return EXIT_DIVERGED if inst.diverged else EXIT_OK


def cmd_robustness(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    spec = _spec_from(body)
    pool = load_dataset(_require(body, "train_data"))
    test_set = load_dataset(_require(body, "test_data"))
    base_seed = seed_override if seed_override is not None else int(body.get("base_seed", 0))
    record = run_instances(
        spec,
        k=int(_require(body, "k")),
        pool=pool,
        test_set=test_set,
        mode=body.get("mode", "both_random"),
        base_seed=base_seed,
        sample_size=body.get("sample_size"),
        stop=_stop_from(body),
        workers=workers,
    )
    _write_jsonl(os.path.join(out_dir, "records.jsonl"), [record.to_record()])
    _write_csv(
        os.path.join(out_dir, "losses.csv"),
        ["instance", "init_seed", "data_seed", "stop_epoch", "diverged", "loss"],
        [
            [p["index"], p["init_seed"], p["data_seed"], p["stop_epoch"], p["diverged"], loss]
            for p, loss in zip(record.provenance, record.losses)
        ],
    )
    _write_csv(
        os.path.join(out_dir, "box.csv"),
        ["count"] + BOX_COLUMNS,
        [[len(record.losses)] + _box_row(boxplot_stats(record.losses))],
    )
    stats = record.statistics()
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(f"spec {record.spec_name} ({record.spec_id}), mode {record.mode}, "
                 f"k={len(record.losses)}, sample_size={record.sample_size}\n")
        for key in ("mean", "median", "min", "max", "std", "q1", "q3", "iqr"):
            fh.write(f"{key}: {stats[key]!r}\n")
    print(f"{record.spec_name}: {len(record.losses)} instances, "
          f"median loss {stats['median']!r}")
    return EXIT_DIVERGED if all(math.isinf(v) for v in record.losses) else EXIT_OK


def _specs_from(body: dict) -> list[ModelSpec]:
    if "specs" in body:
        return [ModelSpec.from_dict(d) for d in body["specs"]]
    if "search_space" in body:
        s = body["search_space"]
        if "reference" in s:    # the bundled 6,912-spec grid, keyed by target
            target = str(s["reference"])
            if target not in TARGETS:
                raise ConfigError(f"unknown reference target {target!r}")
            return enumerate_search_space(reference_search_space(target))
        space = SearchSpace(
            architectures=tuple(ModelSpec.from_dict(d) for d in _require(s, "architectures")),
            learning_rates=tuple(float(v) for v in _require(s, "learning_rates")),
            batch_sizes=tuple(int(v) for v in _require(s, "batch_sizes")),
            regularizations=tuple(float(v) for v in _require(s, "regularizations")),
        )
        return enumerate_search_space(space)
    raise ConfigError("need a 'specs' list or a 'search_space' block")


def _trainer_from(body: dict, workers: int):
    d = _require(body, "trainer")
    kind = d.get("kind")
    if kind == "mock":
        table = {str(k): float(v) for k, v in _require(d, "losses").items()}
        noise = float(d.get("noise", 0.0))

        def mock_trainer(spec, round_index, seed):
            if spec.name not in table:
                raise ConfigError(f"mock trainer has no loss for spec {spec.name!r}")
            base = table[spec.name]
            if noise == 0.0:
                return base
            import numpy as np

            return base + float(np.random.default_rng(seed).normal(0.0, noise))

        return mock_trainer
    if kind == "command":
        argv = [str(a) for a in _require(d, "argv")]

        def command_trainer(spec, round_index, seed):
            env = dict(os.environ,
                       RLAB_SPEC_ID=spec.spec_id(),
                       RLAB_SPEC_NAME=spec.name,
                       RLAB_ROUND=str(round_index),
                       RLAB_SEED=str(seed))
            proc = subprocess.run(argv, input=json.dumps(spec.to_dict()),
                                  capture_output=True, text=True, env=env)
            if proc.returncode != 0:
                raise ContractError(f"external trainer failed ({proc.returncode}): "
                                    f"{proc.stderr.strip()}")
            try:
                return float(proc.stdout.strip().splitlines()[-1])
            except (ValueError, IndexError):
                raise ContractError(
                    f"external trainer printed no loss: {proc.stdout!r}") from None

        return command_trainer
    if kind == "instances":
        pool = load_dataset(_require(d, "train_data"))
        test_set = load_dataset(_require(d, "test_data"))
        stop = _stop_from(d)
        sample_size = d.get("sample_size")

        def instance_trainer(spec, round_index, seed):
            size = len(pool) if sample_size is None else int(sample_size)
            data_seed = substream_seed(seed, "data")
            train_set = bootstrap_sample(pool, size, seed=data_seed)
            inst = train_instance(spec, train_set, test_set,
                                  substream_seed(seed, "init"),
                                  stop=stop, data_seed=data_seed)
            return inst.final_test_loss

        return instance_trainer
    raise ConfigError(f"unknown trainer kind {kind!r}")


def cmd_select(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    specs = _specs_from(body)
    k = int(_require(body, "k"))
    base_seed = seed_override if seed_override is not None else int(body.get("base_seed", 0))
    winners, ledger = select_models(
        specs,
        criterion=_criterion_from(body),
        k=k,
        policy=_policy_from(body),
        trainer=_trainer_from(body, workers),
        max_rounds=int(body.get("max_rounds", 50)),
        base_seed=base_seed,
    )
    _write_json(os.path.join(out_dir, "ledger.json"), ledger.to_record())
    _write_json(
        os.path.join(out_dir, "winners.json"),
        [{"spec_id": w.spec_id(), "spec": w.to_dict()} for w in winners],
    )
    exhaustive = len(specs) * k
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(f"winners: {', '.join(w.name for w in winners)}"
                 f"{' (tie)' if ledger.tie else ''}\n")
        fh.write(f"rounds: {len(ledger.rounds)}\n")
        fh.write(f"trainings: {ledger.cumulative_trainings} "
                 f"vs exhaustive {len(specs)} x {k} = {exhaustive}\n")
    print(f"winner{'s' if len(winners) > 1 else ''}: "
          f"{', '.join(w.name for w in winners)} after {len(ledger.rounds)} rounds, "
          f"{ledger.cumulative_trainings}/{exhaustive} trainings")
    return EXIT_OK


def cmd_sweep(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    spec = _spec_from(body)
    train_pool = load_dataset(_require(body, "train_data"))
    test_pool = load_dataset(_require(body, "test_data"))
    base_seed = seed_override if seed_override is not None else int(body.get("base_seed", 0))
    rows = sample_size_sweep(
        spec,
        indices=[int(i) for i in body.get("indices", [])],
        k=int(_require(body, "k")),
        train_pool=train_pool,
        test_pool=test_pool,
        base_seed=base_seed,
        stop=_stop_from(body),
        sizes=[int(n) for n in body["sizes"]] if "sizes" in body else None,
        workers=workers,
    )
    _write_csv(
        os.path.join(out_dir, "sweep.csv"),
        ["n"] + BOX_COLUMNS,
        [[row["n"]] + _box_row(row["box"]) for row in rows],
    )
    _write_jsonl(
        os.path.join(out_dir, "sweep_records.jsonl"),
        [{"n": row["n"], "losses": row["losses"]} for row in rows],
    )
    print(f"{spec.name}: swept {len(rows)} sample sizes")
    all_losses = [v for row in rows for v in row["losses"]]
    return EXIT_DIVERGED if all_losses and all(math.isinf(v) for v in all_losses) else EXIT_OK


def cmd_report(body: dict, out_dir: str, seed_override: int | None, workers: int) -> int:
    path = _require(body, "records")
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise DatasetFormatError(f"{path}: no records")
    criteria = []
    for d in body.get("criteria", [{"kind": k} for k in ("mean", "median", "min", "max", "std")]):
        crit = SelectionCriterion(kind=d.get("kind", "mean"), quantile=d.get("quantile"))
        crit.validate()
        criteria.append(crit)

    stat_rows = []
    for rec in records:
        s = summary_statistics(rec["losses"])
        stat_rows.append([rec["spec_id"], len(rec["losses"]), s["mean"], s["median"],
                          s["min"], s["max"], s["std"], s["q1"], s["q3"], s["iqr"]])
    _write_csv(
        os.path.join(out_dir, "stats.csv"),
        ["spec_id", "n", "mean", "median", "min", "max", "std", "q1", "q3", "iqr"],
        stat_rows,
    )
    lines = []
    for crit in criteria:
        values = [robustness_statistic(rec["losses"], crit) for rec in records]
        xs, fs = ecdf(values)
        label = crit.label().replace("(", "_").replace(")", "").replace(".", "p")
        _write_csv(
            os.path.join(out_dir, f"ecdf_{label}.csv"),
            ["value", "fraction"],
            [[float(x), float(f)] for x, f in zip(xs, fs)],
        )
        best = min(zip(values, (rec["spec_id"] for rec in records)))
        lines.append(f"{crit.label()}: best spec {best[1]} at {best[0]!r}")
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"reported {len(records)} records across {len(criteria)} criteria")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "robustness": cmd_robustness,
    "select": cmd_select,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlab",
        description="Robustness-first model training, selection, and reporting.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: RLAB_WORKERS or 1)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed")
    parser.add_argument("--out", default=None,
                        help="output directory (default: config out_dir or '.')")
    return parser


def _resolve_workers(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("RLAB_WORKERS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"RLAB_WORKERS must be an integer, got {env!r}") from None
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        config = ExperimentConfig.parse(text)
        if config.command != args.command:
            raise ConfigError(
                f"config is for {config.command!r}, invoked as {args.command!r}")
        workers = _resolve_workers(args.workers)
        out_dir = args.out or config.body.get("out_dir", ".")
        os.makedirs(out_dir, exist_ok=True)
        return HANDLERS[config.command](dict(config.body), out_dir, args.seed, workers)
    except DatasetFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError, ValueError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
