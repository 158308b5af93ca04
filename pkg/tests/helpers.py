"""Shared test utilities: finite-difference gradient checks and tiny datasets."""
import math

import numpy as np

from tabbench import autodiff as ad
from tabbench import hpo


def max_rel_error(fn, tensors, eps=1e-5):
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``fn`` builds a scalar loss from ``tensors`` (which must require grad) and
    must be deterministic across calls.
    """
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().data)
            flat[i] = old - eps
            down = float(fn().data)
            flat[i] = old
            num[i] = (up - down) / (2 * eps)
        err = np.abs(analytic.reshape(-1) - num) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def leaf(rng, *shape, scale=1.0):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


TINY_OVERRIDES = {
    "resnext": {"n_layers": [1, 2], "layer_size": [8, 16], "d_embedding": [2, 4], "d_hidden_factor": [1.0, 2.0],
                "cardinality": [2, 4]},
    "resnet": {"n_layers": [1, 2], "layer_size": [8, 16], "d_embedding": [2, 4], "d_hidden_factor": [1.0, 2.0]},
    "ft": {"n_layers": [1, 1], "d_token": [8, 16]},
}


def write_dataset(directory, name, n=60, seed=0):
    from tabbench.data import two_gaussians, write_csv
    ds = two_gaussians(n=n, n_num=3, n_cat=1, seed=seed, name=name)
    write_csv(ds, directory / f"{name}.csv")
    return ds


def tiny_manifest(directory, datasets=("alpha", "beta"), methods=("resnext", "resnet", "ft"), mode="tuned",
                  trials=2, n=60, **extra):
    for i, name in enumerate(datasets):
        if not (directory / f"{name}.csv").exists():
            write_dataset(directory, name, n=n, seed=i)
    raw = {
        "datasets": [{"name": d, "csv": f"{d}.csv", "schema": f"{d}.csv.schema.json"} for d in datasets],
        "methods": list(methods),
        "mode": mode,
        "budget": {"max_trials": trials, "max_hours": 1},
        "master_seed": 0,
        "parallelism": 1,
        "out_dir": "results",
        "train": {"batch_size": 32, "max_epochs": 2, "patience": 1},
        "space_overrides": TINY_OVERRIDES,
        "n_startup": 1,
    }
    raw.update(extra)
    return raw


def _log_quadratic(cfg):
    return -(math.log10(cfg["learning_rate"]) + 3) ** 2 - (math.log10(cfg["weight_decay"]) + 4.5) ** 2


def tpe_vs_random(n_seeds=20, n_trials=50):
    """Median best objective of TPE and of random search on a 2-parameter log-quadratic."""
    full = hpo.space_for("resnext")
    space = hpo.SearchSpace("toy", (full["learning_rate"], full["weight_decay"]))
    tpe, rnd = [], []
    for seed in range(n_seeds):
        state = hpo.StudyState(space, seed=seed)
        for _ in range(n_trials):
            cfg = hpo.suggest(state)
            hpo.record(state, hpo.Trial(cfg, _log_quadratic(cfg)))
        tpe.append(max(t.objective for t in state.history))
        r = np.random.default_rng(seed)
        rnd.append(max(_log_quadratic(hpo.random_suggest(space, r)) for _ in range(n_trials)))
    return float(np.median(tpe)), float(np.median(rnd))
