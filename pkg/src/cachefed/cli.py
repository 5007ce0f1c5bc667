"""Command-line entry point exposing the full pipeline.

Subcommands: ``gen-synth`` (write a synthetic world as CFF1 files),
``train`` (federated cache fine-tuning), ``partition`` (split a dataset
and report heterogeneity), ``convergence`` (rate certification).

Every value can also come from an INI-style config file
(``--config run.cfg`` with one section per subcommand); explicit flags
take precedence. The fully resolved configuration, defaults and seed
included, is printed before anything executes, so every run can be
reproduced from its own output. Exit codes: 0 success, 2 validation
error, 3 I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

from . import __version__
from .errors import CacheFedError, DivergenceError
from .features import (
    SynthSpec,
    default_catalog,
    generate_world,
    read_features,
    read_text_head,
    write_features,
    write_text_head,
    World,
)
from .fsio import atomic_path, atomic_write_text, sha256_of
from .cache_model import save_checkpoint
from .convergence import (
    certify_rate,
    make_problem,
    theorem_rate_config,
)
from .federation import (
    THREADS_ENV_VAR,
    FederationConfig,
    history_to_csv,
    history_to_jsonl,
    run_training,
    thread_cap,
)
from .partition import (
    SCHEME_ALIASES,
    SCHEME_TAGS,
    Partition,
    PartitionSpec,
    heterogeneity_report,
    partition as make_partition,
    write_partition,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4


def _resolve(args: argparse.Namespace, section: configparser.SectionProxy | None, table):
    """Merge flag values, config-file values, and defaults (flags win)."""
    resolved = {}
    for name, caster, default in table:
        value = getattr(args, name.replace("-", "_"))
        if value is None and section is not None and name in section:
            value = caster(section[name])
        if value is None:
            value = default
        resolved[name] = value
    return resolved


def _print_config(subcommand: str, resolved: dict) -> None:
    print(f"[{subcommand}] resolved configuration:")
    for key in sorted(resolved):
        print(f"  {key} = {resolved[key]}")
    print(f"  {THREADS_ENV_VAR.lower()} = {os.environ.get(THREADS_ENV_VAR, '0')}")


def _load_section(config_path: str | None, name: str):
    if config_path is None:
        return None
    parser = configparser.ConfigParser()
    with open(config_path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    return parser[name] if parser.has_section(name) else None


def _batch_size(text: str):
    if text == "full":
        return "full"
    return int(text)


GEN_SYNTH_TABLE = [
    ("classes", int, 10),
    ("shots", int, 16),
    ("dim", int, 64),
    ("class-separation", float, 0.2),
    ("noise-scale", float, 0.05),
    ("domain-gap", float, 0.2),
    ("train-per-class", int, 128),
    ("test-per-class", int, 100),
    ("seed", int, 0),
    ("out", str, "world"),
]

TRAIN_TABLE = [
    ("data", str, "world"),
    ("train", str, None),
    ("test", str, None),
    ("synthetic", str, None),
    ("text-head", str, None),
    ("partition", str, "iid"),
    ("clients", int, 10),
    ("clients-per-round", int, None),
    ("dirichlet-alpha", float, 0.1),
    ("rounds", int, 20),
    ("local-epochs", int, 1),
    ("lr", float, 0.001),
    ("alpha", float, 0.5),
    ("beta", float, 1.0),
    ("prox-mu", float, 0.0),
    ("steps-per-epoch", int, 64),
    ("batch-size", _batch_size, None),
    ("seed", int, 0),
    ("out-dir", str, "."),
]

PARTITION_TABLE = [
    ("data", str, None),
    ("scheme", str, "iid"),
    ("clients", int, 10),
    ("dirichlet-alpha", float, 0.1),
    ("seed", int, 0),
    ("out", str, "partition.txt"),
]

CONVERGENCE_TABLE = [
    ("clients", int, 10),
    ("dim", int, 20),
    ("mu", float, 1.0),
    ("smoothness", float, 4.0),
    ("heterogeneity", float, 1.0),
    ("sigma", float, 0.1),
    ("local-steps", int, 5),
    ("participation", str, "5/10"),
    ("steps", int, 10000),
    ("runs", int, 50),
    ("seed", int, 7),
    ("out-dir", str, "."),
]


def _add_options(sub: argparse.ArgumentParser, table) -> None:
    for name, caster, default in table:
        sub.add_argument(f"--{name}", type=caster, default=None, help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cachefed",
        description="Federated cache-adapter fine-tuning and convergence certification.",
    )
    parser.add_argument("--version", action="version", version=f"cachefed {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    cff_layout = (
        "CFF1 layout (little-endian): magic 'CFF1' | u32 version=1 | "
        "u32 num_classes | u32 feature_dim | u64 num_samples | per class: "
        "u32 name_len + UTF-8 name | per sample: u32 label + feature_dim x f32. "
        "A text-head file has num_samples == num_classes with sample i labeled i."
    )

    gen = subparsers.add_parser(
        "gen-synth",
        help="generate a synthetic feature-space world as CFF1 files",
        description="Writes OUT.train.cff, OUT.test.cff, OUT.synthetic.cff and "
        "OUT.text.cff, then prints their paths and SHA-256 checksums.",
        epilog=cff_layout,
    )
    gen.add_argument("--config", default=None, help="INI config file ([gen-synth] section)")
    _add_options(gen, GEN_SYNTH_TABLE)

    train = subparsers.add_parser(
        "train",
        help="run federated cache fine-tuning on feature files",
        description="Reads the four CFF1 files written by gen-synth (or explicit "
        "--train/--test/--synthetic/--text-head overrides), partitions the train "
        "split, runs T federated rounds, and writes rounds.csv, rounds.jsonl and "
        "checkpoint.cfm into --out-dir. --partition takes iid, dir or pat. "
        "Local epochs are split into --steps-per-epoch equal batches by default; "
        "--batch-size (an integer, or 'full' for one full-shard batch) switches "
        "to fixed-size batches instead.",
        epilog="rounds.csv columns: round,accuracy,mean_loss,params_uploaded,flops "
        "(round 0 is the untrained cache). checkpoint.cfm layout (little-endian): "
        "magic 'CFM1' | u32 version=1 | u32 C | u32 M | u32 num_classes | "
        "f64 alpha | f64 beta | C*M f64 keys row-major | M x u32 value labels. "
        + cff_layout,
    )
    train.add_argument("--config", default=None, help="INI config file ([train] section)")
    _add_options(train, TRAIN_TABLE)

    part = subparsers.add_parser(
        "partition",
        help="split a feature file across clients and report heterogeneity",
        description="Writes the shard file (client_id: idx,idx,...), an n_k JSON "
        "sidecar, and a heterogeneity report with per-client class histograms and "
        "earth-mover distances.",
        epilog="Shard file: one 'client_id: idx,idx,...' line per client. "
        "Sidecar OUT.nk.json: {n_k: [...], n: total}. Report OUT.report.json: "
        "{histograms, emd, max_emd}.",
    )
    part.add_argument("--config", default=None, help="INI config file ([partition] section)")
    _add_options(part, PARTITION_TABLE)

    conv = subparsers.add_parser(
        "convergence",
        help="certify the local-SGD rate bound on a synthetic convex problem",
        description="Runs seeded local-SGD-with-averaging trajectories, evaluates "
        "the rate bound with empirical gradient norms, and writes "
        "certification.csv (t, mean_gap, bound, violation_flag) plus summary.json. "
        "--participation takes K/N, e.g. 5/10.",
        epilog="summary.json fields: runs, violations, slope, high_variance, "
        "gamma, g_emp, B (with its variance/heterogeneity/drift terms), C, "
        "initial_sq_dist.",
    )
    conv.add_argument("--config", default=None, help="INI config file ([convergence] section)")
    _add_options(conv, CONVERGENCE_TABLE)

    return parser


def cmd_gen_synth(args) -> int:
    resolved = _resolve(args, _load_section(args.config, "gen-synth"), GEN_SYNTH_TABLE)
    _print_config("gen-synth", resolved)
    spec = SynthSpec(
        num_classes=resolved["classes"],
        shots_per_class=resolved["shots"],
        feature_dim=resolved["dim"],
        class_separation=resolved["class-separation"],
        noise_scale=resolved["noise-scale"],
        domain_gap=resolved["domain-gap"],
        seed=resolved["seed"],
        train_per_class=resolved["train-per-class"],
        test_per_class=resolved["test-per-class"],
    )
    world = generate_world(spec)
    catalog = default_catalog(spec.num_classes)
    prefix = resolved["out"]
    outputs = [
        (f"{prefix}.train.cff", lambda p: write_features(p, world.real_train, catalog)),
        (f"{prefix}.test.cff", lambda p: write_features(p, world.real_test, catalog)),
        (f"{prefix}.synthetic.cff", lambda p: write_features(p, world.synthetic_balanced, catalog)),
        (f"{prefix}.text.cff", lambda p: write_text_head(p, world.text_head, catalog)),
    ]
    for path, writer in outputs:
        with atomic_path(path) as tmp:
            writer(tmp)
        print(f"wrote {path} sha256={sha256_of(path)}")
    return EXIT_OK


def _load_world(resolved) -> World:
    prefix = resolved["data"]
    train_path = resolved["train"] or f"{prefix}.train.cff"
    test_path = resolved["test"] or f"{prefix}.test.cff"
    synth_path = resolved["synthetic"] or f"{prefix}.synthetic.cff"
    text_path = resolved["text-head"] or f"{prefix}.text.cff"
    train, cat_train = read_features(train_path)
    test, cat_test = read_features(test_path)
    synthetic, cat_synth = read_features(synth_path, source_tag="synthetic")
    text_head, cat_text = read_text_head(text_path)
    names = cat_train.class_names
    for other, path in ((cat_test, test_path), (cat_synth, synth_path), (cat_text, text_path)):
        if other.class_names != names:
            raise ValueError(f"class catalog in {path} does not match {train_path}")
    return World(train, test, synthetic, text_head)


def cmd_train(args) -> int:
    resolved = _resolve(args, _load_section(args.config, "train"), TRAIN_TABLE)
    _print_config("train", resolved)
    world = _load_world(resolved)
    spec = PartitionSpec(
        scheme=resolved["partition"],
        num_clients=resolved["clients"],
        dirichlet_alpha=resolved["dirichlet-alpha"],
        seed=resolved["seed"],
    )
    p = make_partition(world.real_train, spec)
    batch = resolved["batch-size"]
    steps = resolved["steps-per-epoch"]
    if batch is not None:
        # An explicit batch size (or "full") switches off equal-step epochs.
        steps = None
        batch = None if batch == "full" else batch
    cfg = FederationConfig(
        num_clients=resolved["clients"],
        clients_per_round=resolved["clients-per-round"],
        rounds=resolved["rounds"],
        local_epochs=resolved["local-epochs"],
        lr=resolved["lr"],
        alpha=resolved["alpha"],
        beta=resolved["beta"],
        prox_mu=resolved["prox-mu"],
        seed=resolved["seed"],
        steps_per_epoch=steps,
        batch_size=batch,
    )
    print(f"[train] partition scheme={spec.scheme} shards={[int(n) for n in p.n_k]}")
    print(f"[train] clients_per_round={cfg.resolved_clients_per_round} threads={thread_cap()}")
    state, _ = run_training(world, p, cfg)

    out_dir = resolved["out-dir"]
    os.makedirs(out_dir, exist_ok=True)
    rounds_csv = os.path.join(out_dir, "rounds.csv")
    atomic_write_text(rounds_csv, history_to_csv(state))
    rounds_jsonl = os.path.join(out_dir, "rounds.jsonl")
    atomic_write_text(rounds_jsonl, history_to_jsonl(state))
    checkpoint = os.path.join(out_dir, "checkpoint.cfm")
    with atomic_path(checkpoint) as tmp:
        save_checkpoint(tmp, state.global_model)

    final = state.history[-1].accuracy if state.history else state.initial_accuracy
    print(f"[train] round-0 accuracy {state.initial_accuracy:.4f}")
    print(f"[train] final accuracy {final:.4f} after {state.round_index} rounds")
    for path in (rounds_csv, rounds_jsonl, checkpoint):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_partition(args) -> int:
    resolved = _resolve(args, _load_section(args.config, "partition"), PARTITION_TABLE)
    _print_config("partition", resolved)
    if resolved["data"] is None:
        raise ValueError("--data is required (a CFF1 feature file)")
    dataset, _ = read_features(resolved["data"])
    spec = PartitionSpec(
        scheme=resolved["scheme"],
        num_clients=resolved["clients"],
        dirichlet_alpha=resolved["dirichlet-alpha"],
        seed=resolved["seed"],
    )
    p = make_partition(dataset, spec)
    write_partition(resolved["out"], p)
    report = heterogeneity_report(p, dataset)
    report_path = f"{resolved['out']}.report.json"
    atomic_write_text(report_path, json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"[partition] scheme={spec.scheme} tag={SCHEME_TAGS[spec.scheme]}")
    print(f"[partition] shard sizes: {[int(n) for n in p.n_k]}")
    print(f"[partition] max earth-mover distance: {report.max_emd:.6f}")
    print(f"wrote {resolved['out']}")
    print(f"wrote {resolved['out']}.nk.json")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    resolved = _resolve(args, _load_section(args.config, "convergence"), CONVERGENCE_TABLE)
    _print_config("convergence", resolved)
    raw = resolved["participation"]
    try:
        k_text, n_text = raw.split("/")
        k, n = int(k_text), int(n_text)
    except ValueError as exc:
        raise ValueError(f"--participation must look like K/N, got {raw!r}") from exc
    if n != resolved["clients"]:
        raise ValueError(
            f"--participation denominator {n} must equal --clients {resolved['clients']}"
        )
    problem = make_problem(
        num_clients=resolved["clients"],
        dim=resolved["dim"],
        heterogeneity=resolved["heterogeneity"],
        noise=resolved["sigma"],
        seed=resolved["seed"],
        mu=resolved["mu"],
        smoothness=resolved["smoothness"],
    )
    cfg = theorem_rate_config(
        problem,
        local_steps=resolved["local-steps"],
        clients_per_round=k,
        total_steps=resolved["steps"],
    )
    report = certify_rate(problem, cfg, runs=resolved["runs"], base_seed=resolved["seed"])

    out_dir = resolved["out-dir"]
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "certification.csv")
    atomic_write_text(csv_path, report.to_csv())
    json_path = os.path.join(out_dir, "summary.json")
    atomic_write_text(json_path, report.to_json())

    summary = report.summary()
    print(f"[convergence] gamma = {summary['gamma']}")
    print(f"[convergence] G_emp = {summary['g_emp']:.6f}")
    print(f"[convergence] B = {summary['B']:.6f} (variance {summary['B_variance_term']:.6f}, "
          f"heterogeneity {summary['B_hetero_term']:.6f}, drift {summary['B_drift_term']:.6f})")
    print(f"[convergence] C = {summary['C']:.6f}")
    print(f"[convergence] violations = {summary['violations']} of {resolved['steps']} steps")
    if summary["slope"] is None:
        print("[convergence] fitted log-log slope = n/a (gap identically zero in tail)")
    else:
        print(f"[convergence] fitted log-log slope = {summary['slope']:.4f}")
    if report.high_variance:
        print("[convergence] WARNING: high Monte Carlo variance; rerun with more --runs "
              "before reading bound crossings as violations")
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "partition": cmd_partition,
    "convergence": cmd_convergence,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()  # validate CACHEFED_THREADS early
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CacheFedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
