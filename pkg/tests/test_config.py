import pytest

from bsee_control.config import ConfigError, build_problem, load, loads, shipped_configs

BASE = """\
name: t
problem: lq-abstract
mode: tree
time: {horizon: 1.0, steps: 3}
coefficients: {A: 0, B: 0, D: 1, xi: "1 + W"}
"""


@pytest.mark.parametrize("name", shipped_configs())
def test_shipped_configs_load(name):
    cfg = load(name)
    assert cfg.name == name
    assert "source" not in cfg.as_dict()


def test_shipped_set():
    names = set(shipped_configs())
    assert {"lq_closed_form", "heat_decay", "parabolic_2d", "lq_broken_N"} <= names


def test_minimal_config_builds():
    cfg = loads(BASE)
    p = build_problem(cfg)
    assert p.lattice.steps == 3 and p.dim == 1


def test_unknown_top_level_key_has_line():
    with pytest.raises(ConfigError, match=r"line 6 field 'colour': unknown field"):
        loads(BASE + "colour: red\n")


def test_wrong_type_has_line():
    text = BASE.replace("steps: 3", "steps: three")
    with pytest.raises(ConfigError, match=r"line 4 field 'time.steps'"):
        loads(text)


def test_bad_expression_names_field():
    text = BASE.replace('"1 + W"', '"1 + __import__(1)"')
    with pytest.raises(ConfigError, match=r"coefficients.xi"):
        loads(text)
    with pytest.raises(ConfigError, match="unknown name"):
        loads(BASE.replace('"1 + W"', '"1 + y"'))


def test_yaml_syntax_error_reports_position():
    with pytest.raises(ConfigError, match=r"line \d+, column \d+"):
        loads(BASE + "time: {horizon: [\n")


@pytest.mark.parametrize("patch, field", [
    (("problem: lq-abstract", "problem: wave"), "problem"),
    (("mode: tree", "mode: bush"), "mode"),
    (("horizon: 1.0", "horizon: -1.0"), "time.horizon"),
    (("steps: 3", "steps: 0"), "time.steps"),
])
def test_invalid_values(patch, field):
    with pytest.raises(ConfigError, match=f"field '{field}'"):
        loads(BASE.replace(*patch))


def test_unknown_coefficient_and_suite():
    with pytest.raises(ConfigError, match="unknown coefficient"):
        loads(BASE.replace("D: 1", "D: 1, Z: 2"))
    with pytest.raises(ConfigError, match="unknown suite"):
        loads(BASE + "checks: [assumptions, magic]\n")


def test_parabolic_needs_mesh():
    text = "problem: parabolic-1d\ntime: {horizon: 0.1, steps: 4}\ncoefficients: {a: 0.5}\n"
    with pytest.raises(ConfigError, match="mesh.n"):
        loads(text)
    with pytest.raises(ConfigError, match="must be >= 2"):
        loads(text + "mesh: {n: 1}\n")


def test_lq_cannot_depend_on_space():
    cfg = loads(BASE.replace('"1 + W"', '"x"'))
    with pytest.raises(ConfigError, match="cannot depend on x"):
        build_problem(cfg)


def test_missing_file():
    with pytest.raises(ConfigError, match="shipped"):
        load("no_such_config")


def test_overrides():
    cfg = loads(BASE)
    assert cfg.with_overrides(seed=5, mode=None).seed == 5
    assert cfg.seed == 0
