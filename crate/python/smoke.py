"""Build the extension with cargo, import it and exercise the bindings.

    python3 python/smoke.py

Exits non-zero on the first failed check.
"""

import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

CONFIG = """
seed = 3

[env]
kind = "two_colors"
period = 500
lifetime = 1500

[agent]
kind = "actor_critic"
hidden = 8
lr = 0.1

[meta]
objective = "bmg"
k = 1
l = 8
meta_lr = 1e-3

[context]
families = ["reward"]
history = 4
hidden = 8
"""


def build(tmp):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "metalab-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    lib = target / "release" / "libmetalab_py.so"
    shutil.copy(lib, tmp / "metalab_py.so")
    sys.path.insert(0, str(tmp))


def close(a, b, tol=1e-10):
    return abs(a - b) <= tol


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        build(tmp)
        import metalab_py as ml

        cfg = ml.ExperimentConfig.from_toml(CONFIG)
        cfg.validate()
        assert cfg.seed == 3 and cfg.lifetime == 1500
        assert "probe_low" in cfg.header()
        summary, csv_a = ml.run(cfg)
        _, csv_b = ml.run(cfg)
        assert csv_a == csv_b, "same seed must give identical CSV"
        assert summary.env_steps == 1500
        cfg.seed = 4
        assert ml.run(cfg)[1] != csv_a

        out = tmp / "run.csv"
        s = ml.run_to_file(cfg, str(out))
        assert out.read_text().count("\n") == s.rows + 1

        try:
            ml.ExperimentConfig.from_toml(CONFIG.replace("meta_lr", "meta_rate"))
        except ValueError as e:
            assert "meta_rate" in str(e)
        else:
            raise AssertionError("unknown key accepted")

        agree, g = ml.bmg_outer_loss_q([[0.1, 0.9, 0.0, -0.5]], [[0.1, 0.9, 0.0, -0.5]], 0.2)
        assert close(agree, -math.log(0.85)) and close(g, 0.75 / 0.85)
        differ, _ = ml.bmg_outer_loss_q([[0.1, 0.9, 0.0, -0.5]], [[0.9, 0.1, 0.0, -0.5]], 0.2)
        assert close(differ, -math.log(0.05))

        assert ml.kl_categorical([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert ml.n_step_returns([1.0, 1.0], [1.0, 1.0], 0.0, 1.0) == [2.0, 1.0]
        assert ml.context_input_dim(["reward", "value", "td_error", "action_probs", "states", "grad_cosine", "prev_meta"], 10, True) == 660

        env = ml.TwoColors(10, 0)
        assert env.obs_dim == 30 and sum(env.observe()) == 6
        for _ in range(25):
            env.step(0)
        assert env.task_index == 2

        norm = ml.RunningNormalizer(2)
        for x in ([1.0, 2.0], [3.0, 6.0]):
            norm.update(x)
        assert norm.mean == [2.0, 4.0] and norm.variance == [1.0, 4.0] and norm.count == 2

    print("python smoke test passed")


if __name__ == "__main__":
    main()
