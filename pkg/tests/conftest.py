import copy

import pytest

# PASS/FAIL lines from the acceptance module, echoed in the terminal summary
VERDICTS: list[str] = []

SMALL = {
    "seed": 3,
    "data": {"d": 8, "n_history": 600, "n_experiment": 600, "validation_size": 100, "train_size": 200},
    "original_model": {"n_trees": 20},
    "explainers": {"lime": {"n_samples": 300}},
    "grid": {"n_trees": 10, "min_samples_leaf": [5, 20]},
    "metrics": {"B": 200},
    "experiment": {"exclude_x": True},
    "analyst": {"error_rates": [0.2, 0.1]},
}


def small_config(**sections):
    raw = copy.deepcopy(SMALL)
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return raw


def toml_text(raw):
    """Minimal TOML writer for the nested dicts used in tests."""
    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {scalar(v)}" for k, v in raw.items() if not isinstance(v, dict)]

    def table(prefix, d):
        plain = {k: v for k, v in d.items() if not isinstance(v, dict)}
        lines.append(f"[{prefix}]")
        lines.extend(f"{k} = {scalar(v)}" for k, v in plain.items())
        for k, v in d.items():
            if isinstance(v, dict):
                table(f"{prefix}.{k}", v)

    for k, v in raw.items():
        if isinstance(v, dict):
            table(k, v)
    return "\n".join(lines) + "\n"


@pytest.fixture
def write_config(tmp_path):
    def write(raw=None, name="config.toml"):
        path = tmp_path / name
        path.write_text(toml_text(raw if raw is not None else small_config()))
        return path

    return write


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda v: int(v.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
