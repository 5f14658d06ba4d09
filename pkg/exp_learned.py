"""Scratch sweep for the learned-mode recipe (not part of the package)."""
import sys
import time
import numpy as np
from polarground.benchmark import TaskConfig, generate_episode, episode_rng, to_training_sample, run_benchmark
from polarground.estimator import EstimatorConfig, estimate_sequence
import polarground.estimator as E
from polarground.parsing import to_relation_tuples

orig_init = E.init_parameters
def tied_init(config):
    params = orig_init(config)
    params["proj_ref"] = params["proj_viz"].copy()
    return params
E.init_parameters = tied_init

train_config = TaskConfig(seed=1000, n_relations=(1, 3), duplicate_rate=0.0)
episodes = [generate_episode(train_config, episode_rng(train_config.seed, i)) for i in range(200)]
samples = [to_training_sample(ep) for ep in episodes]
eval_config = TaskConfig(seed=2000, n_relations=(1, 1), duplicate_rate=0.0)
eval_eps = [generate_episode(eval_config, episode_rng(eval_config.seed, i)) for i in range(100)]

def weight_acc(model):
    hits = 0
    for ep in eval_eps:
        tuples = to_relation_tuples(ep.truth)
        mix, _ = estimate_sequence(ep.scene, tuples, model)[0]
        weights = np.array([c.weight for c in mix.components])
        ordered = sorted(ep.scene.nodes)
        hits += ordered[int(np.argmax(weights))] == ep.referenced_ids[0]
    return hits / len(eval_eps)

bench_config = TaskConfig(seed=3000, n_relations=(1, 3), duplicate_rate=0.0)

candidates = [
    dict(lam=0.3, layers=2, epochs=80, wd=2.0),
    dict(lam=0.3, layers=2, epochs=80, wd=10.0),
    dict(lam=0.3, layers=1, epochs=100, wd=2.0),
    dict(lam=0.2, layers=2, epochs=80, wd=5.0),
    dict(lam=0.3, layers=2, epochs=120, wd=5.0),
    dict(lam=0.4, layers=2, epochs=80, wd=5.0),
]
for cand in candidates:
    config = EstimatorConfig(freqs=4, width=32, layers=cand["layers"], heads=2, loss_mix=cand["lam"], seed=0)
    hist = []
    t0 = time.perf_counter()
    model = E.train(samples, config, epochs=cand["epochs"], weight_decay=cand["wd"], history=hist)
    dt = time.perf_counter() - t0
    ratio = float(np.mean(hist[-200:]) / np.mean(hist[:200]))
    acc = weight_acc(model)
    report = run_benchmark(150, mode="learned", config=bench_config, model=model)
    per = {c: round(report.per_count[c]["success_rate"], 2) for c in sorted(report.per_count)}
    print(f"{cand}: {dt:.0f}s ratio={ratio:.3f} weight-acc={acc:.2f} success={report.success_rate:.3f} {per}", flush=True)
print("DONE")
