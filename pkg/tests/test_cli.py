import csv
import io

import pytest

from mvp2p.cli import EXIT_CONFIG, EXIT_OK, main
from mvp2p.flow import PeerSubsetStats, allocate
from mvp2p.layers import LayerId, ballroom


def call(*argv):
    out = io.StringIO()
    return main(list(argv), out=out), out.getvalue()


@pytest.fixture
def population(tmp_path):
    p = tmp_path / "pop.yaml"
    p.write_text("layer_spec: ballroom\nsubsets:\n"
                 "  - {observing: L0.0, peers: 2, outbound_bps: 800000}\n"
                 "  - {observing: L2.1, peers: 3, outbound_bps: 1200000}\n")
    return p


def test_list():
    rc, out = call("list")
    assert rc == EXIT_OK and "ballroom_ratio04" in out.split()


def test_run_prints_summary(tmp_path):
    rc, out = call("run", "--config", "small_swarm", "--seed", "1", "--set", "horizon_s=150",
                   "--csv", str(tmp_path / "s.csv"), "--check")
    assert rc == EXIT_OK
    fields = dict(line.split(None, 1) for line in out.strip().splitlines())
    assert fields["seed"] == "1"
    assert 0.0 < float(fields["P_s"]) <= 1.0
    assert fields["missed_deadlines"] == "0"
    assert (tmp_path / "s.csv").read_text().startswith("time,")


def test_optimal_matches_library(population):
    rc, out = call("optimal", "--population", str(population))
    assert rc == EXIT_OK
    from mvp2p.flow import theoretical_optimal_share

    pop = [PeerSubsetStats(LayerId(0, 0), 2, 8e5), PeerSubsetStats(LayerId(2, 1), 3, 1.2e6)]
    assert float(out) == pytest.approx(theoretical_optimal_share(ballroom(), pop), abs=1e-6)


def test_allocate_matches_flow_oracle(population):
    from test_flow import lp_max_flow

    rc, out = call("allocate", "--population", str(population))
    assert rc == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    g = ballroom()
    pop = [PeerSubsetStats(LayerId(0, 0), 2, 8e5), PeerSubsetStats(LayerId(2, 1), 3, 1.2e6)]
    alloc = allocate(g, pop)
    flow_total = sum(float(r["bps"]) for r in rows if r["kind"] == "flow")
    assert flow_total == pytest.approx(lp_max_flow(dict(alloc.network.capacity)), rel=1e-6)
    quotas = {r["layer"]: (float(r["bps"]), int(r["copies"])) for r in rows if r["kind"] == "quota"}
    assert set(quotas) == {"L0.0", "L2.0", "L2.1"}
    demand = 5 * g.bitrate[LayerId(0, 0)] + 3 * (g.bitrate[LayerId(2, 0)] + g.bitrate[LayerId(2, 1)])
    assert sum(q for q, _ in quotas.values()) + flow_total == pytest.approx(demand)


def test_sweep_to_stdout(tmp_path):
    spec = tmp_path / "s.yaml"
    spec.write_text("base: small_swarm\nparameter: outbound_ratio\nvalues: [0.4]\nseeds: 1\n"
                    "overrides: {horizon_s: 130, peer_count: 6}\n")
    rc, out = call("sweep", "--spec", str(spec))
    assert rc == EXIT_OK
    lines = out.strip().splitlines()
    assert lines[0].startswith("value,strategy,seeds,mean_ps")
    assert len(lines) == 3
    rc, out = call("sweep", "--spec", str(spec), "--out", str(tmp_path / "o" / "t.csv"))
    assert rc == EXIT_OK and (tmp_path / "o" / "t.csv").is_file()


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["run"],
    ["run", "--config", "no_such_scenario"],
    ["run", "--config", "small_swarm", "--set", "peer_count"],
    ["run", "--config", "small_swarm", "--set", "bogus=1"],
    ["run", "--config", "small_swarm", "--strategy", "gossip"],
    ["optimal", "--population", "/nonexistent/pop.yaml"],
    ["sweep", "--spec", "no_such_sweep"],
])
def test_bad_input_exit_code(argv, capsys):
    rc, _ = call(*argv)
    assert rc == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_bad_layer_in_population(tmp_path):
    p = tmp_path / "pop.yaml"
    p.write_text("subsets:\n  - {observing: L9.9, peers: 1, outbound_bps: 0}\n")
    assert call("optimal", "--population", str(p))[0] == EXIT_CONFIG
