"""Command-line interface: configured runs, run comparison, cost calculator.

Configuration is an INI file with a strict schema; unknown sections or keys
are rejected so a typo cannot silently fall back to a default. Every run
directory is self-describing: its manifest echoes the full configuration and
can be replayed with `run --from-manifest` to reproduce the metrics file
byte for byte.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import subprocess
import sys
from dataclasses import dataclass

from . import __version__
from .datagen import (
    PartitionSpec,
    class_means,
    load_idx,
    make_probe_dataset,
    partition_label_skew,
    sample_classes,
    shift_means,
    split_train_test,
)
from .distill import KipConfig
from .errors import ConfigError, HflddError, ManifestError, StageError
from .fltrain import (
    ALGORITHMS,
    ClientState,
    RunConfig,
    run_fedavg,
    run_fedprox,
    run_fedseq_lite,
    run_hfldd,
)
from .metrics import CostModel, bits_to_megabytes, cost_fedavg, cost_fedseq, cost_hfldd, ledger_audit
from .numkernel import SeededRng

MANIFEST_SCHEMA = "hfldd-run-manifest-v1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Stream blocks for dataset construction (training streams live in fltrain).
_S_MEANS = 10 << 48
_S_POOL = 11 << 48
_S_SPLIT = 12 << 48
_S_SHIFT = 13 << 48
_S_PROBE_POOL = 14 << 48
_S_PROBE = 15 << 48


def _parse_int(v: str) -> int:
    return int(v)


def _parse_float(v: str) -> float:
    return float(v)


def _parse_str(v: str) -> str:
    return v


def _parse_intlist(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _parse_choice(*allowed):
    def parse(v: str):
        if v not in allowed:
            raise ValueError(f"must be one of {allowed}, got {v!r}")
        return v

    return parse


# Section -> key -> (parser, default). A None default marks a required key.
_SCHEMA = {
    "experiment": {
        "seed": (_parse_int, "0"),
        "algorithm": (_parse_choice(*ALGORITHMS), "hfldd"),
        "output_dir": (_parse_str, None),
    },
    "data": {
        "kind": (_parse_choice("synthetic", "idx"), "synthetic"),
        "classes": (_parse_int, "10"),
        "per_class": (_parse_int, "200"),
        "dim": (_parse_int, "16"),
        "separation": (_parse_float, "6.0"),
        "test_fraction": (_parse_float, "0.2"),
        "probe_size": (_parse_int, "100"),
        "probe_shift": (_parse_float, "1.0"),
        "images": (_parse_str, ""),
        "labels": (_parse_str, ""),
    },
    "partition": {
        "clients": (_parse_int, "20"),
        "classes_per_client": (_parse_int, "1"),
        "samples_per_client": (_parse_int, "40"),
    },
    "train": {
        "rounds": (_parse_int, "300"),
        "local_steps": (_parse_int, "2"),
        "pretrain_steps": (_parse_int, "10"),
        "learning_rate": (_parse_float, "0.01"),
        "batch_size": (_parse_int, "32"),
        "pretrain_batch": (_parse_int, "64"),
        "hidden": (_parse_intlist, "64,64"),
        "prox_mu": (_parse_float, "0.0"),
        "bits_per_param": (_parse_int, "32"),
        "bits_per_sample": (_parse_int, "0"),
        "seq_clusters": (_parse_int, "0"),
        "seq_cluster_size": (_parse_int, "0"),
    },
    "distill": {
        "support_size": (_parse_int, "20"),
        "ridge_lambda": (_parse_float, "1e-6"),
        "learning_rate": (_parse_float, "0.004"),
        "iterations": (_parse_int, "3000"),
        "target_batch": (_parse_int, "10"),
    },
    "cluster": {
        "k": (_parse_int, "10"),
    },
}


@dataclass
class ExperimentConfig:
    """Fully validated experiment description plus its normalized text echo."""

    seed: int
    algorithm: str
    output_dir: str
    data: dict
    partition: PartitionSpec
    run: RunConfig
    kip: KipConfig
    k: int
    bits_per_param: int
    bits_per_sample: int
    seq_clusters: int
    seq_cluster_size: int
    echo: dict


def _read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    raw: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        raw[section] = {}
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            raw[section][key] = value
    return raw


def _normalize(raw: dict) -> dict:
    """Overlay the given values on the schema defaults; reject missing
    required keys. The result echoes every key as a string."""
    echo: dict[str, dict[str, str]] = {}
    for section, keys in _SCHEMA.items():
        echo[section] = {}
        for key, (parse, default) in keys.items():
            value = raw.get(section, {}).get(key, default)
            if value is None:
                raise ConfigError(f"missing required key '{key}' in section [{section}]")
            try:
                parse(value)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from e
            echo[section][key] = value
    return echo


def _typed(echo: dict, section: str, key: str):
    parse, _ = _SCHEMA[section][key]
    return parse(echo[section][key])


def _experiment_from_echo(echo: dict) -> ExperimentConfig:
    get = lambda s, k: _typed(echo, s, k)
    algorithm = get("experiment", "algorithm")
    seed = get("experiment", "seed")
    data = {k: get("data", k) for k in _SCHEMA["data"]}
    try:
        partition = PartitionSpec(
            n_clients=get("partition", "clients"),
            classes_per_client=get("partition", "classes_per_client"),
            total_classes=get("data", "classes"),
            samples_per_client=get("partition", "samples_per_client"),
            seed=seed,
        )
        run = RunConfig(
            rounds=get("train", "rounds"),
            local_steps=get("train", "local_steps"),
            pretrain_steps=get("train", "pretrain_steps"),
            learning_rate=get("train", "learning_rate"),
            batch_size=get("train", "batch_size"),
            algorithm=algorithm,
            prox_mu=get("train", "prox_mu"),
            seed=seed,
            pretrain_batch=get("train", "pretrain_batch"),
            hidden_sizes=get("train", "hidden"),
        )
        kip = KipConfig(
            support_size=get("distill", "support_size"),
            ridge_lambda=get("distill", "ridge_lambda"),
            learning_rate=get("distill", "learning_rate"),
            iterations=get("distill", "iterations"),
            target_batch=get("distill", "target_batch"),
            seed=seed,
        )
    except HflddError as e:
        raise ConfigError(str(e)) from e
    k = get("cluster", "k")
    seq_clusters = get("train", "seq_clusters")
    seq_cluster_size = get("train", "seq_cluster_size")
    if data["kind"] == "idx" and (not data["images"] or not data["labels"]):
        raise ConfigError("idx data needs both 'images' and 'labels' paths")
    if algorithm == "fedseq" and seq_clusters * seq_cluster_size != partition.n_clients:
        raise ConfigError(
            "seq_clusters * seq_cluster_size must equal the client count "
            f"({seq_clusters} * {seq_cluster_size} != {partition.n_clients})"
        )
    if algorithm == "hfldd" and not 2 <= k <= partition.n_clients:
        raise ConfigError(f"cluster k must be in [2, {partition.n_clients}], got {k}")
    return ExperimentConfig(
        seed=seed,
        algorithm=algorithm,
        output_dir=get("experiment", "output_dir"),
        data=data,
        partition=partition,
        run=run,
        kip=kip,
        k=k,
        bits_per_param=get("train", "bits_per_param"),
        bits_per_sample=get("train", "bits_per_sample"),
        seq_clusters=seq_clusters,
        seq_cluster_size=seq_cluster_size,
        echo=echo,
    )


def load_config(path: str) -> ExperimentConfig:
    return _experiment_from_echo(_normalize(_read_config_file(path)))


def load_manifest(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"manifest {path} has schema {doc.get('schema')!r}")
    config = doc.get("config")
    if not isinstance(config, dict):
        raise ManifestError(f"manifest {path} is missing its config echo")
    return _experiment_from_echo(_normalize(config))


def _build_problem(xc: ExperimentConfig):
    """Materialize (clients, probe, test) from the data section."""
    d = xc.data
    seed = xc.seed
    if d["kind"] == "synthetic":
        means = class_means(d["classes"], d["dim"], d["separation"], SeededRng(seed, _S_MEANS))
        pool = sample_classes(means, d["per_class"], SeededRng(seed, _S_POOL))
        train_pool, test = split_train_test(pool, d["test_fraction"], SeededRng(seed, _S_SPLIT))
        if d["probe_shift"] > 0:
            probe_means = shift_means(means, d["probe_shift"], SeededRng(seed, _S_SHIFT))
        else:
            probe_means = means
        per_class_probe = max(1, math.ceil(d["probe_size"] / d["classes"]))
        probe_pool = sample_classes(probe_means, per_class_probe, SeededRng(seed, _S_PROBE_POOL))
        probe = make_probe_dataset(probe_pool, d["probe_size"], SeededRng(seed, _S_PROBE))
    else:
        full = load_idx(d["images"], d["labels"])
        train_pool, test = split_train_test(full, d["test_fraction"], SeededRng(seed, _S_SPLIT))
        probe = make_probe_dataset(train_pool, d["probe_size"], SeededRng(seed, _S_PROBE))
    parts = partition_label_skew(train_pool, xc.partition)
    clients = [ClientState(i, part) for i, part in enumerate(parts)]
    return clients, probe, test


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _metrics_csv(metrics) -> str:
    lines = ["round,accuracy,loss,cumulative_bits"]
    for m in metrics:
        lines.append(f"{m.round_index},{m.accuracy!r},{m.loss!r},{m.cumulative_bits}")
    return "\n".join(lines) + "\n"


def _cost_model_for(xc: ExperimentConfig, result, model_params: int) -> CostModel:
    bits_per_sample = xc.bits_per_sample or xc.data["dim"] * 64
    n_heads = result.topology.n_heads() if result.topology else 0
    n_homog = len(result.topology.homogeneous) if result.topology else 0
    return CostModel(
        n_clients=xc.partition.n_clients,
        n_heads=n_heads,
        n_homogeneous=n_homog,
        rounds=xc.run.rounds,
        seq_clusters=xc.seq_clusters,
        seq_cluster_size=xc.seq_cluster_size,
        model_params=model_params,
        probe_size=xc.data["probe_size"],
        class_count=xc.data["classes"],
        bits_per_param=xc.bits_per_param,
        bits_per_sample=bits_per_sample,
        distilled_sizes=result.distilled_sizes,
    )


def cmd_run(args) -> int:
    try:
        if args.from_manifest:
            xc = load_manifest(args.from_manifest)
        else:
            xc = load_config(args.config)
        if args.out:
            xc.output_dir = args.out
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = xc.output_dir
    written: list[str] = []
    try:
        clients, probe, test = _build_problem(xc)
        bits_per_sample = xc.bits_per_sample or xc.data["dim"] * 64
        if xc.algorithm == "fedavg":
            result = run_fedavg(clients, test, xc.run, xc.bits_per_param)
        elif xc.algorithm == "fedprox":
            result = run_fedprox(clients, test, xc.run, xc.bits_per_param)
        elif xc.algorithm == "fedseq":
            result = run_fedseq_lite(
                clients, test, xc.run, xc.seq_clusters, xc.seq_cluster_size, xc.bits_per_param
            )
        else:
            result = run_hfldd(
                clients, probe, test, xc.run, xc.kip, xc.k, xc.bits_per_param, bits_per_sample
            )
        model_params = result.final_model.parameter_count()
        report = ledger_audit(result.ledger, _cost_model_for(xc, result, model_params), xc.algorithm)

        os.makedirs(out_dir, exist_ok=True)
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "seed": xc.seed,
            "algorithm": xc.algorithm,
            "config": xc.echo,
            "git_describe": _git_describe(),
            "package_version": __version__,
            "model_params": model_params,
        }
        for name, text in (
            ("metrics.csv", _metrics_csv(result.metrics)),
            ("cost.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"),
            ("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n"),
        ):
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
            written.append(path)
        if result.topology is not None:
            path = os.path.join(out_dir, "topology.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write(result.topology.to_json(seed=xc.seed))
            written.append(path)
    except (HflddError, OSError) as e:
        for path in written:
            try:
                os.unlink(path)
            except OSError:
                pass
        stage = f" [{e.stage}]" if isinstance(e, StageError) else ""
        print(f"error{stage}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {xc.algorithm}, {len(result.metrics)} rounds, outputs in {out_dir}")
    return EXIT_OK


def _load_run_dir(run_dir: str):
    manifest_path = os.path.join(run_dir, "manifest.json")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    for path in (manifest_path, metrics_path):
        if not os.path.isfile(path):
            raise ManifestError(f"run directory {run_dir} is missing {os.path.basename(path)}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"run directory {run_dir} has a bad manifest: {e}") from e
    rows = []
    with open(metrics_path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "round,accuracy,loss,cumulative_bits":
            raise ManifestError(f"run directory {run_dir} has an unrecognized metrics header")
        for line in f:
            r, acc, loss, bits = line.strip().split(",")
            rows.append((int(r), float(acc), float(loss), int(bits)))
    if not rows:
        raise ManifestError(f"run directory {run_dir} has no metric rows")
    return manifest, rows


def cmd_compare(args) -> int:
    try:
        runs = [(d, *_load_run_dir(d)) for d in args.run_dirs]
    except ManifestError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.target is None:
        target = min(max(r[1] for r in rows) for _, _, rows in runs)
    else:
        target = args.target

    reached: list[tuple[int, int] | None] = []
    for _, _, rows in runs:
        hit = next(((r, bits) for r, acc, _, bits in rows if acc >= target), None)
        reached.append(hit)
    base_bits = reached[0][1] if reached[0] else None

    print(f"target_accuracy={target!r}")
    print("run,algorithm,rounds_to_target,bits_to_target,megabytes,ratio")
    for (run_dir, manifest, _), hit in zip(runs, reached):
        algo = manifest.get("algorithm", "?")
        if hit is None:
            print(f"{run_dir},{algo},not reached,n/a,n/a,n/a")
            continue
        rounds, bits = hit
        if base_bits:
            ratio = f"{bits / base_bits:.2f}X"
        else:
            ratio = "n/a"
        print(f"{run_dir},{algo},{rounds},{bits},{bits_to_megabytes(bits):.4f},{ratio}")

    curves_path = args.curves_out or os.path.join(args.run_dirs[0], "compare_curves.csv")
    with open(curves_path, "w", encoding="utf-8") as f:
        f.write("run,algorithm,round,accuracy,loss,cumulative_bits\n")
        for run_dir, manifest, rows in runs:
            algo = manifest.get("algorithm", "?")
            for r, acc, loss, bits in rows:
                f.write(f"{run_dir},{algo},{r},{acc!r},{loss!r},{bits}\n")
    print(f"curves written to {curves_path}")
    return EXIT_OK


_COST_FLAGS = (
    "clients",
    "heads",
    "homogeneous",
    "rounds",
    "model_params",
    "probe_size",
    "classes",
    "bits_per_param",
    "bits_per_sample",
    "seq_clusters",
    "seq_cluster_size",
)


def _cost_output(inputs: dict) -> tuple[str, dict]:
    c = CostModel(
        n_clients=inputs["clients"],
        n_heads=inputs["heads"],
        n_homogeneous=inputs["homogeneous"],
        rounds=inputs["rounds"],
        seq_clusters=inputs["seq_clusters"],
        seq_cluster_size=inputs["seq_cluster_size"],
        model_params=inputs["model_params"],
        probe_size=inputs["probe_size"],
        class_count=inputs["classes"],
        bits_per_param=inputs["bits_per_param"],
        bits_per_sample=inputs["bits_per_sample"],
        distilled_sizes=tuple(inputs["distilled_sizes"]),
    )
    fa, hf, fs = cost_fedavg(c), cost_hfldd(c), cost_fedseq(c)
    ratio = hf / fa if fa else float("nan")
    lines = [
        "algorithm,bits,megabytes",
        f"fedavg,{fa},{bits_to_megabytes(fa):.4f}",
        f"hfldd,{hf},{bits_to_megabytes(hf):.4f}",
        f"fedseq,{fs},{bits_to_megabytes(fs):.4f}",
        f"hfldd_over_fedavg={ratio:.4f}",
    ]
    results = {
        "fedavg_bits": fa,
        "hfldd_bits": hf,
        "fedseq_bits": fs,
        "hfldd_over_fedavg": ratio,
    }
    return "\n".join(lines), results


def cmd_cost(args) -> int:
    if args.from_json:
        try:
            with open(args.from_json, "r", encoding="utf-8") as f:
                doc = json.load(f)
            inputs = doc["inputs"]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            print(f"error: cannot load cost parameters: {e}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        missing = [f for f in ("clients", "rounds", "model_params") if getattr(args, f) is None]
        if missing:
            flags = ", ".join("--" + f.replace("_", "-") for f in missing)
            print(f"error: missing required flags: {flags}", file=sys.stderr)
            return EXIT_CONFIG
        inputs = {f: getattr(args, f) or 0 for f in _COST_FLAGS}
        inputs["distilled_sizes"] = list(args.distilled_sizes or ())
    try:
        table, results = _cost_output(inputs)
    except (HflddError, KeyError, TypeError) as e:
        print(f"error: bad cost parameters: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(table)
    if args.json:
        doc = {"inputs": inputs, "results": results}
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfldd",
        description="Deterministic simulator for clustered federated learning "
        "with dataset distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured experiment")
    p_run.add_argument("config", nargs="?", help="INI experiment configuration")
    p_run.add_argument("--from-manifest", help="replay a run from its manifest.json")
    p_run.add_argument("--out", help="override the configured output directory")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate completed runs against each other")
    p_cmp.add_argument("run_dirs", nargs="+", help="two or more run directories")
    p_cmp.add_argument("--target", type=float, help="target accuracy (default: best shared)")
    p_cmp.add_argument("--curves-out", help="path for the merged learning-curve CSV")
    p_cmp.set_defaults(func=cmd_compare)

    p_cost = sub.add_parser("cost", help="closed-form communication costs")
    p_cost.add_argument("--clients", type=int)
    p_cost.add_argument("--heads", type=int, default=0)
    p_cost.add_argument("--homogeneous", type=int, default=0)
    p_cost.add_argument("--rounds", type=int)
    p_cost.add_argument("--model-params", dest="model_params", type=int)
    p_cost.add_argument("--probe-size", dest="probe_size", type=int, default=0)
    p_cost.add_argument("--classes", type=int, default=0)
    p_cost.add_argument("--bits-per-param", dest="bits_per_param", type=int, default=32)
    p_cost.add_argument("--bits-per-sample", dest="bits_per_sample", type=int, default=0)
    p_cost.add_argument("--seq-clusters", dest="seq_clusters", type=int, default=0)
    p_cost.add_argument("--seq-cluster-size", dest="seq_cluster_size", type=int, default=0)
    p_cost.add_argument(
        "--distilled-sizes",
        dest="distilled_sizes",
        type=lambda v: tuple(int(p) for p in v.split(",") if p.strip()),
        default=(),
        help="comma-separated distilled set sizes, one per member",
    )
    p_cost.add_argument("--json", help="also write inputs and results as JSON")
    p_cost.add_argument("--from-json", dest="from_json", help="load inputs from a cost JSON")
    p_cost.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run" and not args.config and not args.from_manifest:
        print("error: need a config path or --from-manifest", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "compare" and len(args.run_dirs) < 2:
        print("error: compare needs at least two run directories", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
