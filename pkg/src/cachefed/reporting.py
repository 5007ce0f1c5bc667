"""Experiment bookkeeping: sweep grids, records, and report files.

Records are plain data (dicts, lists, floats) so the JSON files written
here re-parse to equal in-memory values. CSV files start with a comment
line documenting the columns. No plotting lives here; CSV is the
interchange format.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .features import World
from .federation import FederationConfig, ServerState, run_training
from .fsio import atomic_write_text
from .partition import Partition
from .rng import derive_seed

SWEEP_CSV_HEADER = "# columns: alpha,beta,final_accuracy,seed"
RECORDS_CSV_HEADER = "# columns: scheme,seed,alpha,beta,final_accuracy,rounds"


@dataclass(frozen=True)
class SweepGrid:
    """Cartesian grid over the fusion hyperparameters."""

    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    base_config: FederationConfig

    def __post_init__(self):
        if not self.alphas or not self.betas:
            raise ValueError("sweep axes must be non-empty")

    def cells(self):
        index = 0
        for alpha in self.alphas:
            for beta in self.betas:
                yield index, alpha, beta
                index += 1


@dataclass
class ExperimentRecord:
    """One run: enough provenance to reproduce it bit-identically."""

    config: dict
    scheme_tag: str
    final_accuracy: float
    history: list[dict]
    seed: int


def history_rows(state: ServerState) -> list[dict]:
    rows = [{"round": 0, "accuracy": state.initial_accuracy}]
    for log in state.history:
        rows.append(
            {
                "round": log.round_index,
                "accuracy": log.accuracy,
                "mean_loss": log.mean_loss,
                "params_uploaded": log.params_uploaded,
                "flops": log.flops_estimate,
            }
        )
    return rows


def make_record(
    state: ServerState, cfg: FederationConfig, scheme_tag: str, extra_config: dict | None = None
) -> ExperimentRecord:
    config = {"federation": asdict(cfg)}
    if extra_config:
        config.update(extra_config)
    final = state.history[-1].accuracy if state.history else state.initial_accuracy
    return ExperimentRecord(
        config=config,
        scheme_tag=scheme_tag,
        final_accuracy=final,
        history=history_rows(state),
        seed=cfg.seed,
    )


@dataclass(frozen=True, eq=False)
class SweepResult:
    grid: SweepGrid
    accuracies: np.ndarray  # (len(alphas), len(betas))
    seeds: np.ndarray  # per-cell derived seeds, same shape
    records: list[ExperimentRecord] = field(default_factory=list)

    def argmax_cell(self) -> tuple[float, float]:
        i, j = np.unravel_index(int(self.accuracies.argmax()), self.accuracies.shape)
        return self.grid.alphas[i], self.grid.betas[j]


def run_sweep(
    grid: SweepGrid,
    world: World,
    p: Partition,
    scheme_tag: str = "iid",
    csv_path=None,
) -> SweepResult:
    """One training run per (alpha, beta) cell, seeds derived per cell.

    When ``csv_path`` is given the sweep table is also written there.
    """
    shape = (len(grid.alphas), len(grid.betas))
    accuracies = np.zeros(shape)
    seeds = np.zeros(shape, dtype=np.int64)
    records = []
    base = grid.base_config
    for index, alpha, beta in grid.cells():
        cell_seed = derive_seed(base.seed, "sweep", index)
        cfg = replace(base, alpha=alpha, beta=beta, seed=cell_seed)
        state, _ = run_training(world, p, cfg)
        i, j = divmod(index, len(grid.betas))
        accuracies[i, j] = state.history[-1].accuracy if state.history else state.initial_accuracy
        seeds[i, j] = cell_seed
        records.append(make_record(state, cfg, scheme_tag))
    result = SweepResult(grid=grid, accuracies=accuracies, seeds=seeds, records=records)
    if csv_path is not None:
        atomic_write_text(csv_path, sweep_to_csv(result))
    return result


def sweep_to_csv(result: SweepResult) -> str:
    lines = [SWEEP_CSV_HEADER]
    for index, alpha, beta in result.grid.cells():
        i, j = divmod(index, len(result.grid.betas))
        lines.append(f"{alpha!r},{beta!r},{result.accuracies[i, j]!r},{result.seeds[i, j]}")
    return "\n".join(lines) + "\n"


def sweep_to_json(result: SweepResult) -> str:
    """JSON mirror of sweep.csv with identical field names."""
    rows = []
    for index, alpha, beta in result.grid.cells():
        i, j = divmod(index, len(result.grid.betas))
        rows.append(
            {
                "alpha": alpha,
                "beta": beta,
                "final_accuracy": float(result.accuracies[i, j]),
                "seed": int(result.seeds[i, j]),
            }
        )
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def records_to_json(records: list[ExperimentRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=2, sort_keys=True) + "\n"


def records_from_json(text: str) -> list[ExperimentRecord]:
    return [ExperimentRecord(**raw) for raw in json.loads(text)]


def records_to_csv(records: list[ExperimentRecord]) -> str:
    lines = [RECORDS_CSV_HEADER]
    for r in records:
        fed = r.config.get("federation", {})
        lines.append(
            f"{r.scheme_tag},{r.seed},{fed.get('alpha')!r},{fed.get('beta')!r},"
            f"{r.final_accuracy!r},{len(r.history) - 1}"
        )
    return "\n".join(lines) + "\n"


def summary_table(records: list[ExperimentRecord]) -> str:
    """Plain-text summary of final accuracy grouped by partition scheme."""
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.scheme_tag, []).append(r.final_accuracy)
    width = max(len(tag) for tag in groups)
    lines = [f"{'scheme':<{width}}  runs  mean_acc  min_acc  max_acc"]
    for tag in sorted(groups):
        accs = groups[tag]
        lines.append(
            f"{tag:<{width}}  {len(accs):>4}  {np.mean(accs):8.4f}  "
            f"{np.min(accs):7.4f}  {np.max(accs):7.4f}"
        )
    return "\n".join(lines) + "\n"


def emit_report(records: list[ExperimentRecord], out_dir) -> dict[str, str]:
    """Write records.json / records.csv / summary.txt under out_dir."""
    if not records:
        raise ValueError("emit_report needs at least one record")
    paths = {}
    for name, text in (
        ("records.json", records_to_json(records)),
        ("records.csv", records_to_csv(records)),
        ("summary.txt", summary_table(records)),
    ):
        target = f"{out_dir}/{name}"
        atomic_write_text(target, text)
        paths[name] = target
    return paths
