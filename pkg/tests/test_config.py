import pytest

from lidarsr.config import RunConfig
from lidarsr.errors import ConfigError, FormatError
from lidarsr.priors import DenoiserPrior
from lidarsr.segment import SegmenterConfig
from lidarsr.solver import SolverConfig


def test_defaults_match_module_defaults():
    cfg = RunConfig()
    assert cfg.solver_config() == SolverConfig()
    assert cfg.solver_config().effective_prior == DenoiserPrior().with_weight(SolverConfig().prior_strength)
    assert cfg.segmenter_config() == SegmenterConfig()
    assert cfg.selection().rows == tuple(range(0, 64, 4))
    g = cfg.graph_config()
    assert (g.queue_capacity, g.drop_policy) == (2, "block")


def test_load_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("solver:\n  b: 2\n  prior: median\nprojection:\n  width: 512\ngraph:\n  drop_policy: drop-oldest\n")
    cfg = RunConfig.load(p)
    assert cfg.solver.b == 2.0 and isinstance(cfg.solver.b, float)
    assert cfg.low_cfg().width == 512
    assert cfg.graph_config().drop_policy == "drop-oldest"


@pytest.mark.parametrize("text", [
    "unknown: {}\n",
    "solver:\n  bee: 1\n",
    "solver:\n  iterations: 2.5\n",
    "solver:\n  b: -1\n",
    "projection:\n  low_height: 15\n",
    "solver: [1, 2]\n",
    "- 1\n",
    "graph:\n  drop_policy: newest\n",
    "solver:\n  prior: fancy\n",
])
def test_bad_configs_rejected(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_unreadable_config(tmp_path):
    with pytest.raises(FormatError):
        RunConfig.load(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("solver: [unclosed\n")
    with pytest.raises(FormatError):
        RunConfig.load(p)


def test_round_trip_dict():
    cfg = RunConfig()
    cfg.update("solver", {"iterations": 9})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
