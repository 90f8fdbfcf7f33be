"""Batch front end: ``generate``, ``train``, ``evaluate`` and ``certify``.

All settings come from one JSON config; see :data:`DEFAULT_CONFIG`. Outputs
are written to the configured directory and are byte-identical across runs
with the same config.

Exit codes: 0 success, 2 solver failure, 3 non-finite training loss,
4 missing artifact, 5 infeasible certificate.
"""

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ndae_ident.certificate import (
    certify,
    decay_rate,
    estimate_c0_c1,
    riccati_newton_kleinman,
    simulate_error,
    write_report,
)
from ndae_ident.dae_solver import SampleSet, SolverConfig, Trajectory, get_tableau, sample_dataset, simulate
from ndae_ident.errors import NoConvergence, NonFiniteLoss, SolverError
from ndae_ident.nn import dnn_simulate, init_dnn, init_mlp, load_checkpoint, save_checkpoint
from ndae_ident.power_model import build_synthetic_model, index1_margin, load_model, save_model
from ndae_ident.training import TrainConfig, relative_error_series, train_algebraic, train_dynamic

EXIT_OK, EXIT_SOLVER, EXIT_TRAINING, EXIT_MISSING, EXIT_INFEASIBLE = 0, 2, 3, 4, 5

DEFAULT_CONFIG = {
    "out": "run",
    "model": {"n_gen": 3, "seed": 0},
    "solver": {"tableau": "radau2", "delta": 1e-3, "rel_tol": 1e-5, "abs_tol": 1e-6,
               "newton_tol": 1e-6, "newton_max_iter": 20},
    "data": {"seed": 0, "n_traj": 96, "t_end": 0.5, "eta": 4000, "x0_scale": 1.0,
             "input_amp": 0.5},
    "algebraic": {"hidden": [64, 64], "epochs": 5000, "lr": 3e-3, "lr_final": 1e-4},
    # L_d carries a factor delta^2, so its gradients sit far below the usual Adam eps
    "dynamic": {"hidden": 32, "epochs": 1000, "lr": 1e-2, "lr_final": 1e-4, "eps": 1e-14,
                "stage_lr_scale": 3.0},
    "evaluate": {"t_end": 1.0, "white_box": False},
    "certify": {"a_scale": 1.0, "p_scale": 1.0, "w_scale": 0.5, "l_scale": 1.0, "k_scale": 1.0,
                "riccati": False, "t_end": 5.0, "cloud_stride": 10},
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def merge_config(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, out=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            cfg = merge_config(cfg, json.load(fh))
    if out is not None:
        cfg["out"] = str(out)
    return cfg


def solver_config(cfg):
    s = cfg["solver"]
    return SolverConfig(delta=s["delta"], rel_tol=s["rel_tol"], abs_tol=s["abs_tol"],
                        max_step=s["delta"], newton_tol=s["newton_tol"],
                        newton_max_iter=s["newton_max_iter"])


def train_config(section, tableau, seed):
    opts = {k: v for k, v in section.items() if k != "hidden"}
    opts.setdefault("tableau", tableau)
    opts.setdefault("seed", seed)
    return TrainConfig.from_dict(opts)


class SineInput:
    """``u_i(t) = a_i sin(w_i t + p_i)`` with seeded amplitudes, frequencies and phases."""

    def __init__(self, rng, m, amp):
        self.amp = rng.uniform(0.0, amp, m)
        self.freq = rng.uniform(0.5, 3.0, m)
        self.phase = rng.uniform(0.0, 2 * np.pi, m)

    def __call__(self, t):
        return self.amp * np.sin(self.freq * t + self.phase)


def scenario(model, data, seed):
    """Seeded initial state and input signal."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-data["x0_scale"], data["x0_scale"], model.n_d)
    return x0, SineInput(rng, model.m, data["input_amp"])


def training_scenarios(model, data):
    rng = np.random.default_rng(data["seed"])
    seeds = rng.integers(0, 2**31, data["n_traj"])
    return [scenario(model, data, int(s)) for s in seeds]


def heldout_scenario(model, data):
    return scenario(model, data, data["seed"] + 1)


def out_dir(cfg):
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path, what):
    if not path.exists():
        raise CliError(f"missing {what}: {path} (run the earlier step first)", EXIT_MISSING)


def _simulate(model, x0, u, t_end, cfg):
    return simulate(model, x0, u, t_end, get_tableau(cfg["solver"]["tableau"]), solver_config(cfg))


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def cmd_generate(cfg):
    out = out_dir(cfg)
    model = build_synthetic_model(cfg["model"]["n_gen"], cfg["model"]["seed"])
    save_model(model, out / "model.json")
    trajs = []
    for k, (x0, u) in enumerate(training_scenarios(model, cfg["data"])):
        traj = _simulate(model, x0, u, cfg["data"]["t_end"], cfg)
        traj.to_csv(out / f"traj_{k:03d}.csv")
        trajs.append(traj)
    eta = min(cfg["data"]["eta"], sum(len(t) - 1 for t in trajs))
    samples = sample_dataset(trajs, eta, cfg["data"]["seed"])
    samples.to_csv(out / "samples.csv")
    points = [(xd, xa) for t in trajs for xd, xa in zip(t.states_d[::50], t.states_a[::50])]
    margin = index1_margin(model, points)
    print(f"index-1 margin: {margin:.6g}")
    print(f"wrote {len(trajs)} trajectories and {samples.eta} samples to {out}")
    return EXIT_OK


def cmd_train(cfg, phase):
    out = out_dir(cfg)
    _require(out / "model.json", "model")
    _require(out / "samples.csv", "dataset")
    model = load_model(out / "model.json")
    samples = SampleSet.from_csv(out / "samples.csv")
    tableau = cfg["solver"]["tableau"]
    if phase == "algebraic":
        section = cfg["algebraic"]
        conf = train_config(section, tableau, cfg["data"]["seed"])
        net = init_mlp([model.n_d, *section["hidden"], model.n_a], conf.seed)
        net, history = train_algebraic(samples, net, conf)
        save_checkpoint(net, out / "algebraic.json")
        history.to_csv(out / "algebraic_log.csv")
        final = history.l_a[-1] if len(history) else float("nan")
        print(f"algebraic phase: {len(history)} epochs, final MSE {final:.6g}")
        return EXIT_OK
    _require(out / "algebraic.json", "algebraic checkpoint")
    ell_hat = load_checkpoint(out / "algebraic.json")
    section = cfg["dynamic"]
    conf = train_config(section, tableau, cfg["data"]["seed"])
    dnn = init_dnn(model, hidden=section["hidden"], seed=conf.seed)
    result = train_dynamic(samples, dnn, ell_hat, conf)
    save_checkpoint(result.dnn, out / "dynamic.json")
    result.history.to_csv(out / "dynamic_log.csv")
    if len(result.history):
        print(f"dynamic phase: {len(result.history)} epochs, total loss "
              f"{result.history.total[0]:.6g} -> {result.history.total[-1]:.6g}")
    return EXIT_OK


def _write_series(path, header, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([f"{v:.17g}" for v in row])


def component_table(truth, pred):
    """Per-component mean absolute error, normalised by the component's RMS value."""
    abs_err = np.mean(np.abs(truth - pred), axis=0)
    scale = np.sqrt(np.mean(truth**2, axis=0))
    norm_err = np.where(scale > 1e-12, abs_err / np.where(scale > 1e-12, scale, 1.0), np.nan)
    return abs_err, norm_err


def cmd_evaluate(cfg):
    out = out_dir(cfg)
    for name, what in (("model.json", "model"), ("algebraic.json", "algebraic checkpoint"),
                       ("dynamic.json", "dynamic checkpoint")):
        _require(out / name, what)
    model = load_model(out / "model.json")
    ell_hat = load_checkpoint(out / "algebraic.json")
    dnn = load_checkpoint(out / "dynamic.json")
    x0, u = heldout_scenario(model, cfg["data"])
    t_end = cfg["evaluate"]["t_end"]
    truth = _simulate(model, x0, u, t_end, cfg)
    if cfg["evaluate"].get("white_box"):
        pred = _simulate(model, x0, u, t_end, cfg)
        a_map = pred.states_a
    else:
        pred = dnn_simulate(dnn, ell_hat, x0, u, t_end, get_tableau(cfg["solver"]["tableau"]),
                            solver_config(cfg))
        a_map = ell_hat.forward(truth.states_d)
    mapped = Trajectory(truth.times, truth.states_d, a_map, truth.inputs)
    e_d = relative_error_series(truth, pred, "dynamic")
    e_a = relative_error_series(truth, pred, "algebraic")
    e_map = relative_error_series(truth, mapped, "algebraic")
    _write_series(out / "error_dynamic.csv", ["t", "e_d_r"], [truth.times, e_d])
    _write_series(out / "error_algebraic.csv", ["t", "e_a_r", "e_a_r_map"], [truth.times, e_a, e_map])
    abs_err, norm_err = component_table(truth.states_d, pred.states_d)
    i_min, i_max = int(np.nanargmin(norm_err)), int(np.nanargmax(norm_err))
    with open(out / "components.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "mean_abs_error", "normalized_error"])
        for i, (ae, ne) in enumerate(zip(abs_err, norm_err)):
            writer.writerow([f"xd_{i}", f"{ae:.17g}", f"{ne:.17g}"])
    _write_series(out / "paired.csv", ["t", f"xd_{i_min}_true", f"xd_{i_min}_pred",
                                       f"xd_{i_max}_true", f"xd_{i_max}_pred"],
                  [truth.times, truth.states_d[:, i_min], pred.states_d[:, i_min],
                   truth.states_d[:, i_max], pred.states_d[:, i_max]])
    metrics = {
        "mean_e_d_r": float(np.nanmean(e_d)), "max_e_d_r": float(np.nanmax(e_d)),
        "mean_e_a_r": float(np.nanmean(e_a)), "max_e_a_r": float(np.nanmax(e_a)),
        "mean_e_a_r_map": float(np.nanmean(e_map)), "max_e_a_r_map": float(np.nanmax(e_map)),
        "argmin_component": i_min, "argmax_component": i_max,
    }
    write_json(out / "metrics.json", metrics)
    print(f"held-out mean e_d^r {metrics['mean_e_d_r']:.4g}%, mean e_a^r {metrics['mean_e_a_r']:.4g}% "
          f"(map only {metrics['mean_e_a_r_map']:.4g}%); best component xd_{i_min}, worst xd_{i_max}")
    return EXIT_OK


def cmd_certify(cfg):
    out = out_dir(cfg)
    _require(out / "model.json", "model")
    _require(out / "dynamic.json", "dynamic checkpoint")
    model = load_model(out / "model.json")
    dnn = load_checkpoint(out / "dynamic.json")
    c = cfg["certify"]
    n = model.n_d
    eye = np.eye(n)
    a = -c["a_scale"] * eye
    l, k, w = c["l_scale"] * eye, c["k_scale"] * eye, c["w_scale"] * eye
    x0, u = heldout_scenario(model, cfg["data"])
    trace = simulate_error(model, dnn, a, x0, np.zeros(n), u, c["t_end"], solver_config(cfg),
                           cfg["solver"]["tableau"])
    cloud = trace.cloud(stride=c["cloud_stride"])
    # e = 0 samples from the training trajectories widen the c0 estimate
    for path in sorted(out.glob("traj_*.csv")):
        tr = Trajectory.from_csv(path)
        cloud += [(np.zeros(n), xd, uu, xa) for xd, xa, uu in
                  zip(tr.states_d[::c["cloud_stride"]], tr.states_a[::c["cloud_stride"]],
                      tr.inputs[::c["cloud_stride"]])]
    if c["riccati"]:
        _, c1 = estimate_c0_c1(model, dnn, a, l, k, cloud)
        try:
            p = riccati_newton_kleinman(a, l, c1 * k + w)
        except NoConvergence as exc:
            print(f"Riccati construction failed: {exc}; falling back to p_scale")
            p = c["p_scale"] * eye
    else:
        p = c["p_scale"] * eye
    cert = certify(model, dnn, a, l, k, p, w, cloud)
    cert.tail_max = trace.tail_max()
    write_report(cert, out / "certificate.json")
    print(f"c0 {cert.c0:.6g}, c1 {cert.c1:.6g}, margin {cert.margin:.6g}, bound {cert.bound:.6g}, "
          f"tail max {cert.tail_max:.6g}, rate {decay_rate(p, w):.6g}")
    if not cert.feasible:
        print("matrix inequality infeasible: the bound is not binding")
        return EXIT_INFEASIBLE
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ndae-ident", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "certify"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config (defaults are used for missing keys)")
        p.add_argument("--out", type=Path, help="output directory, overrides the config")
        if name == "train":
            p.add_argument("--phase", choices=("algebraic", "dynamic"), required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.phase)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_certify(cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SolverError as exc:
        print(f"solver failure at t = {exc.time:.17g}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except NonFiniteLoss as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
