"""Command-line entry points: simulate, estimate, effects.

Configuration is a flat key = value text file with dotted section prefixes
(``sim.n = 1000``, ``hac.c = 2.0``); command-line flags override file values.
Exit codes: 0 ok, 2 validation, 3 convergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .effects import DEFAULT_P_GRID, mer_table, write_mer_csv
from .equilibrium import FirstStageParams
from .errors import NetmeeError, ValidationError
from .exposure import LABELS, ExposureLabel, cell_counts, exposure_map
from .gmm import (
    load_estimates_artifact,
    two_step,
    write_covariance_csv,
    write_estimates_csv,
)
from .graph import Graph, read_edge_csv
from .hac import HacConfig
from .harness import SimConfig, default_true_params, run_mc, write_mc_summary_csv
from .moments import CellParams, ParamVector

__all__ = ["RunConfig", "ingest", "run", "main"]

logger = logging.getLogger(__name__)

DEFAULTS = {
    "sim.topology": "ring",
    "sim.n": "1000",
    "sim.reps": "300",
    "sim.kappa": "5.63",
    "sim.seed": "20240",
    "hac.c": "2.0",
    "hac.epsilon": "0.05",
    "ci.level": "0.95",
    "eq.tol": "1e-10",
    "eq.max_iter": "10000",
    "effects.x": "1.0",
    "effects.p_grid": "0.2,0.5,0.8",
}


@dataclass
class RunConfig:
    """Resolved invocation: command, input/output paths, and settings."""

    command: str
    out: Path
    nodes: Path | None = None
    edges: Path | None = None
    settings: dict[str, str] = field(default_factory=dict)

    def get(self, key: str) -> str:
        return self.settings.get(key, DEFAULTS.get(key, ""))

    def get_float(self, key: str) -> float:
        raw = self.get(key)
        try:
            return float(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key} must be a number, got {raw!r}") from exc

    def get_int(self, key: str) -> int:
        raw = self.get(key)
        try:
            return int(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key} must be an integer, got {raw!r}") from exc

    def get_floats(self, key: str) -> tuple[float, ...]:
        raw = self.get(key)
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ValidationError(
                f"config key {key} must be a comma list of numbers, got {raw!r}"
            ) from exc


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    settings: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValidationError(f"{path}: line {lineno}: expected key = value")
            key, value = text.split("=", 1)
            settings[key.strip()] = value.strip()
    return settings


def _parse_nodes_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["id", "y", "d"]:
            raise ValidationError(
                f"{path}: header must start with id,y,d, got {header[:3]}"
            )
        rest = header[3:]
        dim_x = 0
        while dim_x < len(rest) and rest[dim_x] == f"x{dim_x + 1}":
            dim_x += 1
        dim_z = 0
        while dim_x + dim_z < len(rest) and rest[dim_x + dim_z] == f"z{dim_z + 1}":
            dim_z += 1
        if dim_x + dim_z != len(rest):
            raise ValidationError(
                f"{path}: columns after d must be x1..xk,z1..zm, got {rest}"
            )
        if dim_z == 0:
            raise ValidationError(f"{path}: at least one instrument column z1 is required")

        ids: list[str] = []
        id_to_index: dict[str, int] = {}
        ys, ds, xs, zs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: line {lineno}: expected {len(header)} columns, got {len(row)}"
                )
            node_id = row[0].strip()
            if node_id in id_to_index:
                raise ValidationError(f"{path}: line {lineno}: duplicate id {node_id!r}")
            id_to_index[node_id] = len(ids)
            ids.append(node_id)
            try:
                ys.append(float(row[1]))
            except ValueError as exc:
                raise ValidationError(
                    f"{path}: line {lineno}: non-numeric outcome {row[1]!r}"
                ) from exc
            if row[2].strip() not in ("0", "1"):
                raise ValidationError(
                    f"{path}: line {lineno}: treatment must be 0 or 1, got {row[2]!r}"
                )
            ds.append(int(row[2]))
            try:
                xs.append([float(v) for v in row[3:3 + dim_x]])
                zs.append([float(v) for v in row[3 + dim_x:]])
            except ValueError as exc:
                raise ValidationError(
                    f"{path}: line {lineno}: non-numeric covariate/instrument"
                ) from exc
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    return ids, id_to_index, np.array(ys), np.array(ds), \
        np.array(xs, dtype=float).reshape(len(ids), dim_x), \
        np.array(zs, dtype=float).reshape(len(ids), dim_z)


def ingest(nodes_path, edges_path) -> tuple[Graph, Dataset, list[str]]:
    """Read node and edge CSVs into a validated, id-remapped sample.

    The node file order defines node indices 0..n-1; exposure labels are
    computed and the per-cell counts logged.
    """
    ids, id_to_index, y, d, x, z = _parse_nodes_csv(nodes_path)
    graph = read_edge_csv(edges_path, id_to_index=id_to_index)
    labels = exposure_map(graph, d)
    data = Dataset(y=y, d=d, x=x, z=z, labels=labels)
    counts = cell_counts(labels)
    logger.info(
        "ingested %d nodes, %d edges; cell counts %s",
        data.n, graph.edge_count,
        {f"({t.own},{t.neigh})": c for t, c in counts.items()},
    )
    return graph, data, ids


def _true_params_from(cfg: RunConfig) -> ParamVector:
    base = default_true_params()
    beta_d = base.first.beta_d
    if "true.beta_d" in cfg.settings:
        beta_d = np.asarray(cfg.get_floats("true.beta_d"), dtype=float)
    lam = base.first.lam
    if "true.lambda" in cfg.settings:
        lam = cfg.get_float("true.lambda")
    cells = {}
    for t in LABELS:
        tag = f"{t.own}{t.neigh}"
        beta_x = base.cells[t].beta_x
        if f"true.beta_x_{tag}" in cfg.settings:
            beta_x = np.asarray(cfg.get_floats(f"true.beta_x_{tag}"), dtype=float)
        beta_p = base.cells[t].beta_p
        if f"true.beta_p_{tag}" in cfg.settings:
            beta_p = cfg.get_float(f"true.beta_p_{tag}")
        cells[ExposureLabel(*t)] = CellParams(beta_x=beta_x, beta_p=beta_p)
    return ParamVector(first=FirstStageParams(beta_d=beta_d, lam=lam), cells=cells)


def _sim_config(cfg: RunConfig) -> SimConfig:
    x_eval = cfg.get_floats("effects.x")
    return SimConfig(
        topology=cfg.get("sim.topology"),
        n=cfg.get_int("sim.n"),
        reps=cfg.get_int("sim.reps"),
        true_params=_true_params_from(cfg),
        hac=HacConfig(c=cfg.get_float("hac.c"), epsilon=cfg.get_float("hac.epsilon")),
        master_seed=cfg.get_int("sim.seed"),
        kappa=cfg.get_float("sim.kappa"),
        p_grid=cfg.get_floats("effects.p_grid") or DEFAULT_P_GRID,
        x_eval=x_eval or (1.0,),
        level=cfg.get_float("ci.level"),
        eq_tol=cfg.get_float("eq.tol"),
        eq_max_iter=cfg.get_int("eq.max_iter"),
    )


def _echo_sim_config(sim: SimConfig) -> None:
    lines = [
        f"sim.topology = {sim.topology}",
        f"sim.n = {sim.n}",
        f"sim.reps = {sim.reps}",
        f"sim.seed = {sim.master_seed}",
        f"sim.kappa = {sim.kappa}",
        f"hac.c = {sim.hac.c}",
        f"hac.epsilon = {sim.hac.epsilon}",
        f"ci.level = {sim.level}",
        f"effects.x = {','.join(repr(v) for v in sim.x_eval)}",
        f"effects.p_grid = {','.join(repr(v) for v in sim.p_grid)}",
        f"eq.tol = {sim.eq_tol}",
        f"eq.max_iter = {sim.eq_max_iter}",
    ]
    print("\n".join(lines))


def _write_diagnostics(path, res, graph) -> None:
    with open(path, "w") as fh:
        fh.write(f"n = {res.n}\n")
        fh.write(f"edges = {graph.edge_count}\n")
        fh.write(f"average_degree = {graph.average_degree!r}\n")
        fh.write(f"converged = {res.converged}\n")
        fh.write(f"objective = {res.objective!r}\n")
        fh.write(f"psd_repaired = {res.psd_repaired}\n")
        for key in ("bandwidth", "max_lag", "equilibrium_iterations",
                    "equilibrium_residual", "moment_sup_norm"):
            fh.write(f"{key} = {res.diagnostics.get(key)!r}\n")
        for t, count in res.diagnostics.get("cell_counts", {}).items():
            fh.write(f"cell_count_{t[0]}{t[1]} = {count}\n")


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    level = cfg.get_float("ci.level")

    if cfg.command == "simulate":
        sim = _sim_config(cfg)
        _echo_sim_config(sim)
        summary = run_mc(sim)
        write_mc_summary_csv(cfg.out / "mc_summary.csv", summary)
        logger.info("wrote %s (%d failures)", cfg.out / "mc_summary.csv",
                    summary.failures)
        return 0

    if cfg.command == "estimate":
        if cfg.nodes is None or cfg.edges is None:
            raise ValidationError("estimate requires --nodes and --edges")
        graph, data, _ = ingest(cfg.nodes, cfg.edges)
        hac_cfg = HacConfig(c=cfg.get_float("hac.c"),
                            epsilon=cfg.get_float("hac.epsilon"))
        res = two_step(
            graph, data, hac_cfg=hac_cfg,
            # estimation tightens the fixed point beyond the configured
            # tolerance so finite-difference Jacobians stay clean
            eq_tol=min(cfg.get_float("eq.tol"), 1e-13),
            eq_max_iter=cfg.get_int("eq.max_iter"),
        )
        write_estimates_csv(cfg.out / "estimates.csv", res, level=level)
        write_covariance_csv(cfg.out / "covariance.csv", res)
        _write_diagnostics(cfg.out / "diagnostics.txt", res, graph)
        return 0

    if cfg.command == "effects":
        estimates_path = cfg.out / "estimates.csv"
        covariance_path = cfg.out / "covariance.csv"
        res = load_estimates_artifact(estimates_path, covariance_path)
        x_point = np.concatenate([[1.0], np.asarray(cfg.get_floats("effects.x"))])
        rows = mer_table(res, x_point, p_grid=cfg.get_floats("effects.p_grid"),
                         level=level)
        write_mer_csv(cfg.out / "mer.csv", rows)
        return 0

    raise ValidationError(f"unknown command {cfg.command!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netmee",
        description="Equilibrium propensity scores, network-HAC GMM, and "
                    "marginal exposure effects on a single network.",
    )
    parser.add_argument("command", choices=["simulate", "estimate", "effects"])
    parser.add_argument("--nodes", type=Path, help="node CSV (id,y,d,x1..,z1..)")
    parser.add_argument("--edges", type=Path, help="edge CSV (src,dst)")
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--seed", type=int, help="master seed (simulate)")
    parser.add_argument("--reps", type=int, help="replication count (simulate)")
    parser.add_argument("--n", type=int, help="sample size (simulate)")
    parser.add_argument("--topology", choices=["ring", "rgg"])
    parser.add_argument("--kappa", type=float, help="expected degree (rgg)")
    parser.add_argument("--hac-c", type=float, help="HAC bandwidth constant")
    parser.add_argument("--hac-eps", type=float, help="HAC degree floor")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


_FLAG_KEYS = {
    "seed": "sim.seed",
    "reps": "sim.reps",
    "n": "sim.n",
    "topology": "sim.topology",
    "kappa": "sim.kappa",
    "hac_c": "hac.c",
    "hac_eps": "hac.epsilon",
}


def build_run_config(argv=None) -> RunConfig:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    settings: dict[str, str] = {}
    if args.config is not None:
        settings.update(parse_config_file(args.config))
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            settings[key] = str(value)
    return RunConfig(
        command=args.command,
        out=args.out,
        nodes=args.nodes,
        edges=args.edges,
        settings=settings,
    )


def main(argv=None) -> int:
    try:
        return run(build_run_config(argv))
    except NetmeeError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
