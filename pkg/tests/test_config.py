import pytest

from pflowis.config import default_methods, load_config, parse_config
from pflowis.errors import ConfigError


def test_empty_document_gives_published_defaults():
    cfg = parse_config("")
    sc = cfg.scenario
    assert (sc.sigma_v, sc.c_prop, sc.mu_c, sc.p_d, sc.roi_half_width) == (0.5e-3, 1500.0, 1.0, 0.95, 1000.0)
    assert (sc.n_g, sc.n_p) == (100, 5000)
    assert [m.method for m in cfg.methods] == ["BS", "PFL-D", "PFL-S", "PFL-OS"]
    assert cfg.methods == tuple(default_methods())
    assert cfg.run.seed == 0 and cfg.run.runs >= 1


def test_full_document():
    cfg = parse_config("""
scenario: {n_sources: 2, p_d: 0.9, mu_c: 0.5, n_g: 20, n_p: 50}
methods:
  - BS
  - {method: PFL-OS, delta1: 1e-5, beta: 1.5, alpha: 0.1}
  - {method: PFL-OS, delta1: 1e-5, beta: 1.5, alpha: 0.5, n_p: 80, label: os-05, curvature: false}
run: {seed: 4, runs: 3}
sweep: {schedules: [[2, 1e-4]], alphas: [0.1]}
""")
    assert cfg.scenario.n_sources == 2 and cfg.scenario.p_d == 0.9
    bs, os1, os2 = cfg.methods
    assert bs.n_g == 20 and os1.n_p == 50 and os1.diffusion.alpha == 0.1
    assert os2.name == "os-05" and os2.n_p == 80
    assert os1.curvature and not os2.curvature
    assert cfg.run.seed == 4 and cfg.run.runs == 3
    assert [m.method for m in cfg.sweep.methods(10, 10)] == ["PFL-D", "PFL-S", "PFL-OS"]


@pytest.mark.parametrize("text, key", [
    ("scenario: {p_d: 1.5}", "scenario.p_d"),
    ("scenario: {mu_c: -1}", "scenario.mu_c"),
    ("scenario: {n_sources: 1.5}", "scenario.n_sources"),
    ("scenario: {bogus: 1}", "scenario.bogus"),
    ("nonsense: 1", "nonsense"),
    ("methods: [{method: PFL-OS, delta1: 1e-5, beta: 1.5}]", "methods[0].alpha"),
    ("methods: [{method: PFL-D, delta1: 1e-5, beta: 1.5, alpha: 0.1}]", "methods[0].alpha"),
    ("methods: [{method: PFL-S, beta: 1.5}]", "methods[0].delta1"),
    ("methods: [{method: EKF}]", "methods[0].method"),
    ("methods: [BS, {method: BS, beta: 2}]", "methods[1].beta"),
    ("methods: [BS, BS]", "methods"),
    ("run: {runs: 0}", "run.runs"),
    ("sweep: {alphas: [-1]}", "sweep.alphas[0]"),
    ("scenario: [1, 2]", "scenario"),
    ("scenario: {p_d: yes}", "scenario.p_d"),
    ("methods: [{method: PFL-S, delta1: 1e-5, beta: 1.5, curvature: 1}]", "methods[0].curvature"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key
    assert str(exc.value).startswith(key + ":")


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="--config"):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "c.yaml"
    p.write_text("scenario: {n_sources: 2}\n")
    assert load_config(p).scenario.n_sources == 2
