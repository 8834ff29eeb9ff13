"""Smoke test for the dail_py extension.

Build and run from the repository root:

    cargo build --release -p dail-py
    cp target/release/libdail_py.so python/dail_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dail_py  # noqa: E402


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    atoms = dail_py.support()
    check(len(atoms) == 51 and atoms[25] == 0.0, "default support has 51 atoms centred on 0")

    point = [0.0] * 51
    point[25] = 1.0
    proj = dail_py.project_target(0.7, 0.99, point, done=True)
    check(abs(proj[25] - 0.125) < 1e-12 and abs(proj[26] - 0.875) < 1e-12, "terminal projection splits 0.7")

    s = [0.0, 0.5, 0.0, 0.5, 0.0]
    p = [0.0, 0.0, 1.0, 0.0, 0.0]
    check(dail_py.wasserstein1(s, p, v_min=-2.0, v_max=2.0) == 1.0, "bimodal vs point W1 is 1")
    check(abs(dail_py.kl_loss([1.0, 0.0], [0.0, 0.0], v_min=0.0, v_max=1.0) - math.log(2)) < 1e-12, "KL against uniform logits")

    w1_rate, mean_rate = dail_py.mc_theorem_check([-1.0, 1.0], [0.5, 0.5], [0.0], [1.0], n=100, trials=200)
    check(w1_rate >= 0.95 and mean_rate <= 0.05, f"detector rates w1={w1_rate} mean={mean_rate}")

    emb = [[1.0, 0.0], [0.99, 0.05], [0.0, 1.0], [0.05, 0.98]]
    check(dail_py.silhouette(emb, [0, 0, 1, 1]) > 0.9, "separated clusters score high")

    env = dail_py.Gridworld(num_instructions=3, mapping_seed=1)
    obs = env.reset(0)
    check(obs == (4, 4, 0), "episode starts at the centre facing north")
    done, reward = False, 0.0
    while not done:
        obs, reward, done = env.step(env.expert_action())
    check(reward > 0.0, "expert reaches the goal")

    ds = dail_py.Dataset.collect(4, n_traj=64, success_ratio=0.5, seed=3)
    check(len(ds) == 64 and ds.success_count() == 32, "mixed dataset has the requested success count")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "d.jsonl")
        ds.save(path)
        check(dail_py.Dataset.load(path) == ds, "dataset roundtrips through JSONL")

        expert = dail_py.Dataset.collect(1, n_traj=64, expert=True)
        agent = dail_py.Agent.train(expert, '{"epochs": 20, "batch": 8, "lr": 0.003, "k_update": 50, "eval_episodes": 0}')
        rate = agent.evaluate(20)
        check(rate >= 0.95, f"single-task agent succeeds ({rate})")
        run = os.path.join(tmp, "run")
        agent.save(run)
        check(dail_py.Agent.load(run).evaluate(20) == rate, "saved agent evaluates identically")
        check(agent.metrics_csv.count("\n") == 21, "metrics have one row per epoch")

    try:
        dail_py.mapping(0)
    except ValueError:
        print("ok: invalid arguments raise ValueError")
    else:
        raise SystemExit("FAIL: mapping(0) accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
