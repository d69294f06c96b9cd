import json
import subprocess
import sys

import pytest

TINY_SPEC = {
    "name": "plots-tiny",
    "distribution": {"kind": "sparse", "c": 1.0, "d": 3},
    "T_tr": 8,
    "T_te": 8,
    "n_train": 60,
    "n_test": 40,
    "init": {"kind": "diagonal", "a0": 0.1, "b0": 0.1},
    "step_size": 0.02,
    "epochs": 200,
    "mask_nondiagonal": False,
    "seed": 3,
    "log_every": 50,
    "stop_tol": None,
    "sweep_inits": [[0.1, 0.1], [0.5, 1.5]],
}


def run_mesalab(*args: str) -> subprocess.CompletedProcess:
    """Drive the experiment CLI through its public entry point."""
    return subprocess.run(
        [sys.executable, "-m", "mesalab.cli", *args],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="session")
def experiment_dir(tmp_path_factory):
    """A completed experiment directory: sweep over two inits plus a flow run."""
    root = tmp_path_factory.mktemp("experiment")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_SPEC))
    sweep = run_mesalab("sweep", "--config", str(config), "--out", str(root / "run"))
    assert sweep.returncode == 0, sweep.stderr
    flow = run_mesalab("flow", "--config", str(config), "--out", str(root / "run" / "flow"))
    assert flow.returncode == 0, flow.stderr
    return root / "run"
