import textwrap

import pytest

from lpcontract.config import ConfigError, OPERATIONS, parse_config, serialize

BASE = textwrap.dedent("""\
    [operation]
    name = fk-sweep

    [model]
    kind = overdamped1d
    potential = "x^2 + a*exp(-x^2)"

    [params]
    a = 2

    [numeric]
    seed = 7
    dx = 1e-2
    """)


def test_defaults_are_materialized():
    cfg = parse_config(BASE)
    assert cfg.operation == "fk-sweep" and cfg.seed == 7
    assert cfg.model["theta"] == 1.0
    assert cfg.numeric["p_range"] == (1.0, 3.0, 25.0)
    assert cfg.numeric["color_range"] == (-4.0, 4.0)
    assert cfg.output == {"dir": "out", "svg": True, "png": True}


EXAMPLES = {
    "fk-eig": "[model]\nkind = overdamped1d\npotential = \"x^2\"\n[numeric]\nseed = 1\np = 1, 2\n",
    "kappa": "[model]\nkind = ornstein_uhlenbeck\nd = 2\n[numeric]\nseed = 3\nt = 0.5, 1\n",
    "gp": "[model]\nkind = linear\nA = [[-1, 0.5], [0, -2]]\n[numeric]\nseed = 3\nx = 0.5, 0\n",
    "lyapunov": "[model]\nkind = kinetic_langevin\npotential = \"x^2/2\"\ngamma = 2\n[numeric]\nseed = 0\n",
    "couple": "[model]\nkind = colored_noise\npotential = \"x^2/2\"\n[numeric]\nseed = 18446744073709551615\n",
    "constants": ("[model]\nkind = coupling_params\nrho1 = 1\nL1 = 1\nL2 = 1\nL3 = 1\ntheta = 1\n"
                  "Q = [[1, 0], [0, 1]]\nrho2 = 1\nS_star = 1\n[numeric]\nseed = 1\np = 2.5\n"),
    "certify": "[model]\nkind = overdamped1d\npotential = \"x^2\"\n[numeric]\nseed = 1\nC1 = 1\n",
    "kinetic-rate": "[numeric]\nseed = 1\ngamma = 2\nxi0 = -3\n",
    "mass-bound": "[numeric]\nseed = 1\nK = 1\nR = 1\nR2 = 2\ntheta = 1\nd = 2\n",
}


@pytest.mark.parametrize("op", sorted(EXAMPLES))
def test_round_trip(op):
    cfg = parse_config(EXAMPLES[op], op)
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text


def test_round_trip_sweep():
    cfg = parse_config(BASE)
    assert parse_config(serialize(cfg)) == cfg


def test_every_operation_has_an_example():
    assert set(EXAMPLES) | {"fk-sweep"} == set(OPERATIONS)


def test_seed_is_mandatory():
    text = BASE.replace("seed = 7\n", "")
    with pytest.raises(ConfigError, match="seed is required"):
        parse_config(text)
    assert parse_config(text, seed=5).seed == 5


def test_command_line_overrides():
    assert parse_config(BASE, "fk-sweep", seed=9).seed == 9
    with pytest.raises(ConfigError, match="requested"):
        parse_config(BASE, "kappa")


@pytest.mark.parametrize("edit, line, key", [
    (("dx = 1e-2", "dx = -1"), 13, "dx"),
    (("dx = 1e-2", "dx = abc"), 13, "dx"),
    (("dx = 1e-2", "dxx = 1"), 13, "dxx"),
    (("a = 2", "a = two"), 9, "a"),
    (('potential = "x^2 + a*exp(-x^2)"', 'potential = "x^2 + b"'), 6, "potential"),
    (("kind = overdamped1d", "kind = colored_noise"), 5, "kind"),
    (("name = fk-sweep", "name = fk-sweeep"), 2, "name"),
    (("seed = 7", "seed = -1"), 12, "seed"),
])
def test_errors_carry_line_and_field(edit, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(BASE.replace(*edit))
    err = info.value
    assert err.line == line and err.key == key
    assert f"line {line}" in str(err) and key in str(err)


def test_unknown_section_and_missing_operation():
    with pytest.raises(ConfigError, match="unknown section") as info:
        parse_config(BASE + "\n[extras]\nx = 1\n")
    assert info.value.line == 15
    with pytest.raises(ConfigError, match="no operation"):
        parse_config(BASE.replace("[operation]\nname = fk-sweep\n", ""))


def test_malformed_file():
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("no section header\n")


def test_range_validation():
    with pytest.raises(ConfigError, match="lo"):
        parse_config(BASE + "color_range = 4, -4\n")
