"""Experiment orchestration: strict JSON configs, a subcommand per
experiment, CSV metrics, JSON summaries and verification reports.

Every run writes into its output directory: metrics.csv (training runs),
summary.json (final numbers + config echo + seed), reports/*.json
(verification details), netlists/*.json (circuit runs). Runs are
deterministic given the seed with --threads 1.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import data as data_mod
from . import dynamics_verify as dv
from .energy_models import (FcPrimitiveNet, LayeredHopfield, ScalarQuadratic,
                            SquaredError)
from .eqprop_core import (RelaxConfig, TrainConfig, relax_free, train)
from .lagrangian import (OscillatorLagrangian, StaticEnergyLagrangian,
                         lagrangian_eqprop_grad, solve_trajectory,
                         trajectory_cost)
from .meta import (QuadraticBilevel, contrastive_meta_grad, implicit_meta_grad,
                   inner_solve)
from .numerics import make_rng
from .resistive_net import (DiodePair, build_analog_mlp, circuit_eqprop_grad,
                            doubled_input, save_netlist, sign_sgd_update)
from .stochastic import (SamplerConfig, exact_small_oracle, langevin_sample,
                         sample_param_grad_moments, stochastic_grad_estimate)
from .energy_models import GaussianPrecision

EXPERIMENTS = ("train-hopfield", "train-discrete", "train-circuit",
               "verify-gdd", "verify-estimators", "verify-rbp",
               "verify-lagrangian", "verify-stochastic", "verify-meta")


class ConfigError(ValueError):
    pass


def _strict_fill(cls, doc: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"allowed: {sorted(names)}")
    return cls(**doc)


@dataclass
class MetricsRecord:
    epoch: int
    train_error: float
    test_error: float
    mean_loss: float
    wall_s: float
    config_hash: str

    def __post_init__(self):
        for v in (self.train_error, self.test_error):
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"error percentage {v} outside [0, 100]")


@dataclass
class TrainModelConfig:
    """Shared settings for the Hopfield and discrete-time training runs."""
    sizes: List[int] = field(default_factory=lambda: [64, 64, 10])
    dataset: str = "digits"            # "digits" | "mnist"
    n_train: int = 0                   # 0 = all available
    n_test: int = 0
    T: int = 100
    K: int = 12
    epsilon: float = 0.5
    beta: float = 0.5
    epochs: int = 2
    batch_size: int = 20
    estimator: str = "one_sided"
    beta_sign_randomization: bool = False
    lr: float = 0.1
    lrs: dict = field(default_factory=dict)
    cache_states: bool = False
    data_dir: Optional[str] = None

    def __post_init__(self):
        if self.dataset not in ("digits", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if len(self.sizes) < 2:
            raise ConfigError("sizes needs at least input and output layers")


@dataclass
class TrainCircuitConfig:
    task: str = "xor"                  # "xor" | "digits"
    hidden: int = 8
    steps: int = 500                   # sign-SGD steps (xor) / epochs (digits)
    eta: float = 0.01
    eta_decay: float = 0.01
    beta: float = 1e-3
    target_scale: float = 0.15
    amplifier_gain: float = 2.0
    diode_i_s: float = 1e-3
    diode_shift: float = 0.05
    n_train: int = 200
    data_dir: Optional[str] = None

    def __post_init__(self):
        if self.task not in ("xor", "digits"):
            raise ConfigError(f"unknown task {self.task!r}")


@dataclass
class VerifyConfig:
    """Knobs for the verification experiments; unused fields are ignored by
    experiments that do not need them."""
    n_models: int = 10
    betas: List[float] = field(default_factory=lambda: [0.2, 0.1, 0.05,
                                                        0.02, 0.01])
    beta: float = 1e-3
    T: int = 80
    K: int = 10
    steps: int = 100
    dt: float = 0.01
    n_samples: int = 20000


_CONFIG_CLASSES = {
    "train-hopfield": TrainModelConfig,
    "train-discrete": TrainModelConfig,
    "train-circuit": TrainCircuitConfig,
    "verify-gdd": VerifyConfig,
    "verify-estimators": VerifyConfig,
    "verify-rbp": VerifyConfig,
    "verify-lagrangian": VerifyConfig,
    "verify-stochastic": VerifyConfig,
    "verify-meta": VerifyConfig,
}


@dataclass
class RunConfig:
    experiment: str
    options: object                    # per-experiment config dataclass
    output_dir: str = "runs"
    seed: int = 0
    threads: int = 1
    force: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def load_config(path, experiment: str) -> RunConfig:
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    top = {k: v for k, v in doc.items() if k != "options"}
    top.setdefault("experiment", experiment)
    if top["experiment"] != experiment:
        raise ConfigError(f"config is for {top['experiment']!r}, "
                          f"not {experiment!r}")
    opts = _strict_fill(_CONFIG_CLASSES[experiment], doc.get("options", {}),
                        f"{experiment} options")
    top["options"] = opts
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(top) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    return RunConfig(**top)


def save_config(cfg: RunConfig, path) -> None:
    doc = dataclasses.asdict(cfg)
    doc["options"] = dataclasses.asdict(cfg.options)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """Hash of the settings that determine the run's numbers; output
    location and overwrite policy are excluded."""
    doc = dataclasses.asdict(cfg)
    doc["options"] = dataclasses.asdict(cfg.options)
    doc.pop("output_dir")
    doc.pop("force")
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def emit_metrics(records: List[MetricsRecord], path, force: bool = False):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    lines = ["epoch,train_error,test_error,mean_loss,wall_s,config_hash"]
    for r in records:
        lines.append(f"{int(r.epoch)},{float(r.train_error)!r},"
                     f"{float(r.test_error)!r},{float(r.mean_loss)!r},"
                     f"{float(r.wall_s)!r},{r.config_hash}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# experiment implementations

def _load_training_data(opts: TrainModelConfig):
    if opts.dataset == "mnist":
        paths = data_mod.find_mnist(data_mod.data_dir(opts.data_dir))
        if paths is None:
            raise FileNotFoundError(
                "MNIST IDX files not found; set EQPROP_DATA_DIR (see "
                "scripts/fetch_mnist.py) or use dataset='digits'")
        train_x, train_l = data_mod.load_mnist_idx(paths["train_images"],
                                                   paths["train_labels"])
        test_x, test_l = data_mod.load_mnist_idx(paths["test_images"],
                                                 paths["test_labels"])
    else:
        train_x, train_l, test_x, test_l = data_mod.load_digits_split()
    if opts.n_train:
        train_x, train_l = train_x[:opts.n_train], train_l[:opts.n_train]
    if opts.n_test:
        test_x, test_l = test_x[:opts.n_test], test_l[:opts.n_test]
    n_classes = opts.sizes[-1]
    return (train_x, data_mod.one_hot(train_l, n_classes),
            test_x, data_mod.one_hot(test_l, n_classes))


def _run_training(cfg: RunConfig, model_kind: str, out_dir: str) -> dict:
    opts: TrainModelConfig = cfg.options
    train_x, train_y, test_x, test_y = _load_training_data(opts)
    if train_x.shape[1] != opts.sizes[0]:
        raise ConfigError(f"sizes[0]={opts.sizes[0]} but data rows have "
                          f"{train_x.shape[1]} features")
    rng = make_rng(cfg.seed)
    if model_kind == "hopfield":
        model = LayeredHopfield(opts.sizes)
    else:
        model = FcPrimitiveNet(opts.sizes)
    params = model.init_params(rng)
    cost = SquaredError()
    tc = TrainConfig(T=opts.T, K=opts.K, epsilon=opts.epsilon, beta=opts.beta,
                     epochs=opts.epochs, batch_size=opts.batch_size,
                     seed=cfg.seed, estimator_kind=opts.estimator,
                     beta_sign_randomization=opts.beta_sign_randomization,
                     lr=opts.lr, lrs=dict(opts.lrs),
                     cache_states=opts.cache_states)
    chash = config_hash(cfg)
    records = []
    for row in train(model, cost, params, train_x, train_y, test_x, test_y,
                     tc, rng):
        records.append(MetricsRecord(
            epoch=row["epoch"], train_error=row["train_error"],
            test_error=row["test_error"], mean_loss=row["mean_loss"],
            wall_s=row["wall_s"], config_hash=chash))
        print(f"epoch {row['epoch']}: train {row['train_error']:.2f}% "
              f"test {row['test_error']:.2f}% loss {row['mean_loss']:.4f}")
    emit_metrics(records, os.path.join(out_dir, "metrics.csv"), cfg.force)
    last = records[-1]
    return {"final_train_error": last.train_error,
            "final_test_error": last.test_error,
            "final_mean_loss": last.mean_loss,
            "epochs": len(records)}


def _xor_task():
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float64)
    labels = np.array([0, 1, 1, 0])
    return x, labels


def _run_circuit(cfg: RunConfig, out_dir: str) -> dict:
    opts: TrainCircuitConfig = cfg.options
    rng = make_rng(cfg.seed)
    diode = DiodePair(i_s=opts.diode_i_s, shift_a=opts.diode_shift,
                      shift_b=-opts.diode_shift)
    chash = config_hash(cfg)
    records = []
    if opts.task == "xor":
        xs, labels = _xor_task()
        n_classes = 2
        net = build_analog_mlp([2, opts.hidden, n_classes], rng,
                               amplifier_gain=opts.amplifier_gain, diode=diode)
    else:
        tx, tl, _, _ = data_mod.load_digits_split()
        xs = data_mod.digits_row_profile(tx[:opts.n_train])
        labels = tl[:opts.n_train]
        n_classes = 10
        net = build_analog_mlp([8, opts.hidden, n_classes], rng,
                               amplifier_gain=opts.amplifier_gain, diode=diode)
    targets = opts.target_scale * (2 * data_mod.one_hot(labels, n_classes) - 1)
    solved_at = None
    pool = (concurrent.futures.ThreadPoolExecutor(cfg.threads)
            if cfg.threads > 1 else None)
    try:
        for step in range(opts.steps):
            t0 = time.perf_counter()
            def one(args):
                x, y = args
                return circuit_eqprop_grad(net, doubled_input(x), y, opts.beta)

            def one_copy(args):
                # each worker solves its own circuit copy; set_input mutates
                x, y = args
                return circuit_eqprop_grad(copy.deepcopy(net),
                                           doubled_input(x), y, opts.beta)
            if pool is not None:
                results = list(pool.map(one_copy, zip(xs, targets)))
            else:
                results = [one(a) for a in zip(xs, targets)]
            grad = sum(r.grad for r in results)
            losses = [r.cost for r in results]
            correct = sum(int(np.argmax(r.y_hat) == l)
                          for r, l in zip(results, labels))
            err = 100.0 * (1 - correct / len(xs))
            records.append(MetricsRecord(
                epoch=step + 1, train_error=err, test_error=err,
                mean_loss=float(np.mean(losses)),
                wall_s=time.perf_counter() - t0, config_hash=chash))
            if opts.task == "xor" and correct == len(xs):
                solved_at = step
                break
            eta = opts.eta / (1 + opts.eta_decay * step)
            net.set_conductances(
                sign_sgd_update(net.conductances(), grad, eta))
    finally:
        if pool is not None:
            pool.shutdown()
    emit_metrics(records, os.path.join(out_dir, "metrics.csv"), cfg.force)
    os.makedirs(os.path.join(out_dir, "netlists"), exist_ok=True)
    save_netlist(net, os.path.join(out_dir, "netlists", "final.json"))
    out = {"steps_run": len(records),
           "final_train_error": records[-1].train_error,
           "first_loss": records[0].mean_loss,
           "final_loss": records[-1].mean_loss}
    if opts.task == "xor":
        out["solved_at_step"] = solved_at
    return out


def _verify_estimators(cfg: RunConfig) -> dict:
    opts: VerifyConfig = cfg.options
    cost = SquaredError()
    quad = ScalarQuadratic()
    qp = quad.init_params(1.0)
    x0 = np.zeros((1, 1))
    y0 = np.array([[0.0]])
    relax = RelaxConfig(max_iters=20000, tol=1e-14, epsilon=0.3)
    fit = dv.estimator_order_fit(quad, qp, x0, y0, cost, opts.betas, relax,
                                 fd_step=1e-6)
    report = {"quadratic": {"slope_one_sided": fit.slope_one_sided,
                            "slope_symmetric": fit.slope_symmetric}}
    slopes1, slopes2 = [], []
    rng = make_rng(cfg.seed)
    made = 0
    while made < opts.n_models:
        sizes = [int(rng.integers(2, 5)) for _ in range(3)]
        m = LayeredHopfield(sizes)
        p = m.init_params(rng).map(lambda t: 0.25 * np.abs(t) + 0.12)
        x = rng.uniform(0.2, 0.8, (1, sizes[0]))
        y = rng.uniform(0.3, 0.7, (1, sizes[-1]))
        free = relax_free(m, p, x, relax)
        interior = all(np.all((l > 1e-3) & (l < 1 - 1e-3))
                       for l in free.state)
        if not (free.converged and interior):
            continue
        f = dv.estimator_order_fit(m, p, x, y, cost, opts.betas, relax,
                                   fd_step=1e-6)
        slopes1.append(f.slope_one_sided)
        slopes2.append(f.slope_symmetric)
        made += 1
    report["hopfield"] = {"n": made,
                          "slopes_one_sided": slopes1,
                          "slopes_symmetric": slopes2}
    return report


def _verify_gdd(cfg: RunConfig) -> dict:
    opts: VerifyConfig = cfg.options
    cost = SquaredError()
    rng = make_rng(cfg.seed)
    max_errors = []
    made = 0
    while made < opts.n_models:
        sizes = [int(rng.integers(3, 7)) for _ in range(4)]
        net = FcPrimitiveNet(sizes)
        p = net.init_params(make_rng(int(rng.integers(1 << 30))), bias0=0.5)
        for name in list(p):
            if name.startswith("W"):
                p[name] = 0.2 * p[name]
        x = rng.uniform(0.2, 0.8, (1, sizes[0]))
        y = rng.uniform(0.3, 0.7, (1, sizes[-1]))
        # a unit pinned at the activation's clip boundary makes the per-step
        # state comparison ill-defined (kink in the update map): resample
        free = relax_free(net, p, x,
                          RelaxConfig(max_iters=opts.T, tol=0.0))
        if not all(np.all((l > 1e-6) & (l < 1 - 1e-6)) for l in free.state):
            continue
        rep = dv.gdd_check(net, p, x, y, cost, T=opts.T, K=opts.K, beta=1e-6)
        max_errors.append(rep.max_error())
        made += 1
    return {"n_models": opts.n_models, "beta": 1e-6, "K": opts.K,
            "max_relative_errors": max_errors,
            "worst": max(max_errors)}


def _verify_rbp(cfg: RunConfig) -> dict:
    cost = SquaredError()
    quad = ScalarQuadratic()
    qp = quad.init_params(1.7)
    res = dv.rbp_solve(quad, qp, np.zeros((1, 1)), np.array([[0.4]]), cost,
                       t_max=5.0, dt=0.05)
    closed = (1 - np.exp(-res.times)) * (1.7 - 0.4)
    quad_dev = float(np.max(np.abs(res.theta_traj["theta"][:, 0] - closed)))
    rng = make_rng(cfg.seed)
    rels = []
    relax = RelaxConfig(max_iters=50000, tol=1e-13, epsilon=0.2)
    made = 0
    while made < 5:
        sizes = [int(rng.integers(2, 5)) for _ in range(3)]
        m = LayeredHopfield(sizes)
        p = m.init_params(rng).map(lambda t: 0.25 * np.abs(t) + 0.12)
        x = rng.uniform(0.2, 0.8, (1, sizes[0]))
        y = rng.uniform(0.3, 0.7, (1, sizes[-1]))
        free = relax_free(m, p, x, relax)
        interior = all(np.all((l > 1e-3) & (l < 1 - 1e-3))
                       for l in free.state)
        if not (free.converged and interior):
            continue
        fd = dv.finite_diff_loss_grad(m, p, x, y, cost, relax, h=1e-5)
        rb = dv.rbp_solve(m, p, x, y, cost, t_max=60.0, dt=0.05,
                          relax_cfg=relax)
        rels.append(float(np.linalg.norm(rb.theta_inf.ravel() - fd.ravel())
                          / max(np.linalg.norm(fd.ravel()), 1e-12)))
        made += 1
    return {"quadratic_closed_form_dev": quad_dev,
            "hopfield_fd_rel_errors": rels}


def _verify_lagrangian(cfg: RunConfig) -> dict:
    opts: VerifyConfig = cfg.options
    m = OscillatorLagrangian()
    p = m.init_params(1.0)
    steps, dt = opts.steps, opts.dt
    y_traj = np.zeros((steps + 1, 1))

    def loss(k):
        tr = solve_trajectory(m, m.init_params(k), None, [1.0], [0.0],
                              steps, dt)
        return trajectory_cost(m, tr, y_traj)

    h = 1e-5
    fd = (loss(1.0 + h) - loss(1.0 - h)) / (2 * h)
    g = lagrangian_eqprop_grad(m, p, None, y_traj, [1.0], [0.0], steps, dt,
                               beta=opts.beta, symmetric=True)
    return {"oscillator_fd": fd,
            "oscillator_symmetric": float(g["k"][0]),
            "rel_error": abs(float(g["k"][0]) - fd) / abs(fd)}


def _verify_stochastic(cfg: RunConfig) -> dict:
    opts: VerifyConfig = cfg.options
    m = GaussianPrecision()
    p = m.init_params(1.0)
    cost = SquaredError()
    y = np.array([0.0])
    grid = np.linspace(-8, 8, 1601)

    def oracle(b):
        return exact_small_oracle(m, p, None, b, cost, y, grid)

    est = stochastic_grad_estimate(m, p, None, y, cost, 0.1, oracle)
    scfg = SamplerConfig(dt=5e-3, burn_in=2000, thin=800,
                         n_chains=500)

    def sampler(b):
        return langevin_sample(m, p, None, b, cost, y, opts.n_samples, scfg,
                               seed=cfg.seed)

    mc = stochastic_grad_estimate(m, p, None, y, cost, 0.1, sampler)
    return {"oracle_one_sided": float(est.grads["theta"][0]),
            "expected": -1 / 0.1 * (0.5 - 1 / 2.2),
            "langevin_one_sided": float(mc.grads["theta"][0]),
            "langevin_se": float(mc.std_errors["theta"][0])}


def _verify_meta(cfg: RunConfig) -> dict:
    p = QuadraticBilevel.ridge([2.0], [0.0])
    th = p.init_theta([1.0])
    sym = contrastive_meta_grad(p, th, 1e-3, symmetric=True)
    imp = implicit_meta_grad(p, th)
    return {"ridge_symmetric": float(sym.grads["theta"][0]),
            "ridge_implicit": float(imp["theta"][0]),
            "ridge_phi_star": float(inner_solve(p, th, 0.0)[0])}


def run(cfg: RunConfig) -> dict:
    """Execute one experiment; returns the summary dict it also writes."""
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    t0 = time.perf_counter()
    if cfg.experiment == "train-hopfield":
        result = _run_training(cfg, "hopfield", out_dir)
    elif cfg.experiment == "train-discrete":
        result = _run_training(cfg, "discrete", out_dir)
    elif cfg.experiment == "train-circuit":
        result = _run_circuit(cfg, out_dir)
    elif cfg.experiment == "verify-estimators":
        result = _verify_estimators(cfg)
    elif cfg.experiment == "verify-gdd":
        result = _verify_gdd(cfg)
    elif cfg.experiment == "verify-rbp":
        result = _verify_rbp(cfg)
    elif cfg.experiment == "verify-lagrangian":
        result = _verify_lagrangian(cfg)
    elif cfg.experiment == "verify-stochastic":
        result = _verify_stochastic(cfg)
    elif cfg.experiment == "verify-meta":
        result = _verify_meta(cfg)
    else:  # unreachable: RunConfig validates
        raise ConfigError(cfg.experiment)
    if cfg.experiment.startswith("verify-"):
        rpath = os.path.join(out_dir, "reports", f"{cfg.experiment}.json")
        with open(rpath, "w") as f:
            json.dump(result, f, indent=1, sort_keys=True)
    summary = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": {**dataclasses.asdict(cfg),
                   "options": dataclasses.asdict(cfg.options)},
        "config_hash": config_hash(cfg),
        "wall_s": time.perf_counter() - t0,
        "result": result,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eqprop-lab",
        description="Two-phase (free/nudged) learning experiments: training "
                    "runs and verification suites.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="JSON config path (defaults apply "
                                         "if omitted)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing metrics files")
        sp.add_argument("--output", default=None, help="output directory")
    args = parser.parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config, args.experiment)
        else:
            cfg = RunConfig(experiment=args.experiment,
                            options=_CONFIG_CLASSES[args.experiment]())
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.output_dir = args.output
        elif cfg.output_dir == "runs":
            cfg.output_dir = os.path.join("runs", args.experiment)
        cfg.threads = args.threads
        cfg.force = cfg.force or args.force
        summary = run(cfg)
    except (ConfigError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # solver/runtime failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary["result"], indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
