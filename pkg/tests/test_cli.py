import csv

import numpy as np
import pytest

from netmee import (
    Dataset,
    MomentProblem,
    default_true_params,
    generate_dataset,
    load_estimates_artifact,
    mer_table,
    ring,
    solve_equilibrium,
    write_edge_csv,
    write_nodes_csv,
)
from netmee.cli import ingest, main, parse_config_file
from netmee.errors import ValidationError
from netmee.gmm import sequential_estimate
from netmee.moments import conditional_mean_v


def write_fixture_files(tmp_path, g, data):
    nodes = tmp_path / "nodes.csv"
    edges = tmp_path / "edges.csv"
    write_nodes_csv(nodes, data)
    write_edge_csv(edges, g)
    return nodes, edges


@pytest.fixture
def four_node_fixture(tmp_path):
    nodes = tmp_path / "nodes.csv"
    nodes.write_text(
        "id,y,d,x1,z1\n"
        "a,1.0,1,0.1,0.2\n"
        "b,2.0,0,0.3,0.4\n"
        "c,3.0,0,0.5,0.6\n"
        "d,4.0,0,0.7,0.8\n"
    )
    edges = tmp_path / "edges.csv"
    edges.write_text("src,dst\na,b\nb,c\nc,d\nd,a\n")
    return nodes, edges


class TestIngest:
    def test_four_node_ring_cell_counts(self, four_node_fixture):
        from netmee import cell_counts

        graph, data, ids = ingest(*four_node_fixture)
        assert ids == ["a", "b", "c", "d"]
        assert graph.edge_count == 4
        counts = {tuple(k): v for k, v in cell_counts(data.labels).items()}
        assert counts == {(1, 0): 1, (0, 1): 2, (0, 0): 1, (1, 1): 0}

    def test_unknown_edge_endpoint(self, four_node_fixture, tmp_path):
        nodes, _ = four_node_fixture
        bad_edges = tmp_path / "bad_edges.csv"
        bad_edges.write_text("src,dst\na,b\na,zzz\n")
        with pytest.raises(ValidationError, match="line 3"):
            ingest(nodes, bad_edges)

    def test_duplicate_edge_rows_merged(self, four_node_fixture, tmp_path):
        nodes, _ = four_node_fixture
        edges = tmp_path / "dup_edges.csv"
        edges.write_text("src,dst\na,b\nb,a\na,b\n")
        graph, _, _ = ingest(nodes, edges)
        assert graph.edge_count == 1

    def test_duplicate_node_id(self, tmp_path, four_node_fixture):
        _, edges = four_node_fixture
        nodes = tmp_path / "dup_nodes.csv"
        nodes.write_text("id,y,d,x1,z1\na,1,0,0,0\na,2,1,0,0\n")
        with pytest.raises(ValidationError, match="duplicate id"):
            ingest(nodes, edges)

    def test_non_binary_treatment(self, tmp_path, four_node_fixture):
        _, edges = four_node_fixture
        nodes = tmp_path / "bad_d.csv"
        nodes.write_text("id,y,d,x1,z1\na,1,2,0,0\n")
        with pytest.raises(ValidationError, match="line 2"):
            ingest(nodes, edges)

    def test_missing_columns(self, tmp_path, four_node_fixture):
        _, edges = four_node_fixture
        nodes = tmp_path / "bad_header.csv"
        nodes.write_text("id,y,d,w1\na,1,0,0\n")
        with pytest.raises(ValidationError, match="x1..xk"):
            ingest(nodes, edges)

    def test_round_trip_bit_equal(self, tmp_path):
        g = ring(60)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(2))
        nodes, edges = write_fixture_files(tmp_path, g, data)
        graph, back, _ = ingest(nodes, edges)
        assert graph.edge_count == g.edge_count
        assert np.array_equal(back.y, data.y)
        assert np.array_equal(back.x, data.x)
        assert np.array_equal(back.z, data.z)
        assert np.array_equal(back.d, data.d)
        assert np.array_equal(back.labels, data.labels)


class TestConfigFile:
    def test_parse(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nsim.n = 250\nhac.c = 1.5  # trailing\n\n")
        assert parse_config_file(cfg) == {"sim.n": "250", "hac.c": "1.5"}

    def test_bad_line(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("sim.n 250\n")
        with pytest.raises(ValidationError, match="line 1"):
            parse_config_file(cfg)


class TestCommands:
    def test_estimate_zero_noise_fixture_recovers(self, tmp_path):
        # Zero-noise fixture: outcome heterogeneity is set to its conditional
        # mean under the first-stage MLE of the realized treatments, so the
        # whole moment system is exactly solvable at the recorded generating
        # values and the pipeline must reproduce them through the CSV round
        # trip to well below 1e-4.
        n = 300
        g = ring(n)
        truth = default_true_params()
        rng = np.random.default_rng(31)
        base = generate_dataset(g, truth, rng)

        problem = MomentProblem(g, base)
        warm = sequential_estimate(problem)
        first_star = warm.first
        p_star = solve_equilibrium(g, base.z_design, first_star,
                                   derivatives=False).p
        m = np.where(base.d == 1, conditional_mean_v(p_star, 1),
                     conditional_mean_v(p_star, 0))
        y = np.zeros(n)
        for t, cell in truth.cells.items():
            mask = (base.labels[:, 0] == t.own) & (base.labels[:, 1] == t.neigh)
            y[mask] = base.x_design[mask] @ cell.beta_x + cell.beta_p * m[mask]
        fixture = Dataset(y=y, d=base.d, x=base.x, z=base.z, labels=base.labels)
        nodes, edges = write_fixture_files(tmp_path, g, fixture)

        out = tmp_path / "out"
        code = main(["estimate", "--nodes", str(nodes), "--edges", str(edges),
                     "--out", str(out)])
        assert code == 0

        layout = problem.layout
        generating = layout.pack(
            type(truth)(first=first_star, cells=truth.cells)
        )
        with open(out / "estimates.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        estimates = np.array([float(r["estimate"]) for r in rows])
        assert [r["param"] for r in rows] == layout.names
        assert np.max(np.abs(estimates - generating)) < 1e-4
        assert (out / "covariance.csv").exists()
        assert (out / "diagnostics.txt").exists()

    def test_effects_from_artifact(self, tmp_path):
        g = ring(300)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(8))
        nodes, edges = write_fixture_files(tmp_path, g, data)
        out = tmp_path / "out"
        assert main(["estimate", "--nodes", str(nodes), "--edges", str(edges),
                     "--out", str(out)]) == 0
        assert main(["effects", "--out", str(out)]) == 0

        with open(out / "mer.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12
        loaded = load_estimates_artifact(out / "estimates.csv",
                                         out / "covariance.csv")
        expected = mer_table(loaded, np.array([1.0, 1.0]))
        for got, want in zip(rows, expected):
            assert float(got["estimate"]) == pytest.approx(want["estimate"],
                                                           abs=1e-12)
            assert float(got["std_error"]) == pytest.approx(want["std_error"],
                                                            abs=1e-12)

    def test_simulate_smoke(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("sim.n = 120\nsim.reps = 3\nsim.seed = 5\n")
        out = tmp_path / "sim_out"
        code = main(["simulate", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        echoed = capsys.readouterr().out
        assert "sim.n = 120" in echoed
        assert "hac.c = 2.0" in echoed
        with open(out / "mc_summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert sum(r["kind"] == "param" for r in rows) == 15
        assert sum(r["kind"] == "mer" for r in rows) == 12

    def test_simulate_flag_overrides(self, tmp_path):
        out = tmp_path / "sim_out"
        code = main(["simulate", "--out", str(out), "--n", "120", "--reps", "2",
                     "--seed", "9", "--topology", "ring", "--hac-c", "1.5"])
        assert code == 0
        assert (out / "mc_summary.csv").exists()


class TestExitCodes:
    def test_malformed_csv_is_validation(self, tmp_path, four_node_fixture):
        _, edges = four_node_fixture
        nodes = tmp_path / "broken.csv"
        nodes.write_text("id,y,d,x1,z1\na,notanumber,0,0,0\n")
        code = main(["estimate", "--nodes", str(nodes), "--edges", str(edges),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_convergence_failure_is_distinct(self, tmp_path):
        g = ring(120)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(1))
        nodes, edges = write_fixture_files(tmp_path, g, data)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("eq.max_iter = 1\n")
        code = main(["estimate", "--nodes", str(nodes), "--edges", str(edges),
                     "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_missing_input_is_io(self, tmp_path):
        code = main(["estimate", "--nodes", str(tmp_path / "none.csv"),
                     "--edges", str(tmp_path / "none2.csv"),
                     "--out", str(tmp_path / "o")])
        assert code == 4

    def test_missing_flags_is_validation(self, tmp_path):
        assert main(["estimate", "--out", str(tmp_path / "o")]) == 2
