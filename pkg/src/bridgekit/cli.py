"""Command-line entry point: ``bridgekit <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod, encoder as enc, io
from .domains import EncoderHandle, sample_pair, translate_pipeline
from .model import VelocityNet, load_checkpoint, save_checkpoint, train
from .sampler import SamplerConfig, invert, reverse_ode, reverse_sde
from .schedule import Schedule

log = logging.getLogger("bridgekit")


class StrictViolation(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------


def _prepare(cfg, out_dir=None) -> Path:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(cfg.dumps())
    return out


def _field(cfg):
    if cfg.model.get("oracle", True):
        return cfg.world.oracle_field(cfg.schedule)
    ckpt = cfg.model.get("checkpoint")
    if not ckpt:
        raise config_mod.ConfigError("model.oracle is false but model.checkpoint is empty")
    return load_checkpoint(ckpt)


def _handle(cfg):
    a = cfg.analysis
    return EncoderHandle(a["encoder"], float(a["delta_scale"]) if a["encoder"] == "perturbed" else 0.0)


def _columns(prefix, dim):
    return [f"{prefix}{i}" for i in range(dim)]


def _check(cfg, ok: bool, message: str):
    if ok:
        return
    if cfg.strict:
        raise StrictViolation(message)
    log.warning("%s", message)


# -- subcommands -------------------------------------------------------------------


def cmd_schedule_dump(args):
    if args.kind == "linear":
        sched = Schedule.linear(args.gamma_max)
    elif args.kind == "snr":
        sched = Schedule.snr(args.beta_min, args.beta_max)
    else:
        sched = Schedule.rectified()
    rows = sched.table(args.n)
    header = ["t", "alpha", "beta", "gamma", "alpha_dot", "beta_dot", "gamma_dot"]
    if args.out:
        io.write_csv(args.out, header, rows)
    else:
        import csv
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([io.fmt(x) for x in r])
    return 0


def cmd_train(cfg, args):
    out = _prepare(cfg, args.out)
    world = cfg.world

    def domain_sampler(rng, n):
        y = world.sample_latent(rng, n)
        x2 = world.map2.forward(y) + world.noise2 * rng.standard_normal(y.shape)
        return x2, y

    net = VelocityNet(world.dim, cfg.schedule, width=int(cfg.model["width"]),
                      parameterization=cfg.model["parameterization"], seed=cfg.seed)
    net, trace = train(net, domain_sampler, cfg.schedule, cfg.train)
    save_checkpoint(net, out / "model.bkt")
    val = dict(zip(trace.val_steps, trace.val))
    io.write_csv(out / "loss.csv", ["step", "train_loss", "val_loss"],
                 [[i + 1, l, val.get(i + 1, "")] for i, l in enumerate(trace.train)])
    io.write_json(out / "summary.json", {"final_train_loss": trace.train[-1] if trace.train else None,
                                         "final_val_loss": trace.val[-1] if trace.val else None,
                                         "steps": cfg.train.steps})
    return 0


def cmd_sample(cfg, args):
    out = _prepare(cfg, args.out)
    field = _field(cfg)
    pairs = sample_pair(cfg.world, int(cfg.analysis["samples"]), cfg.seed)
    if cfg.sampler.g > 0:
        traj = reverse_sde(field, pairs.y, cfg.sampler, record_every=args.record_every)
    else:
        traj = reverse_ode(field, pairs.y, cfg.sampler, record_every=args.record_every)
    d = cfg.world.dim
    io.write_csv(out / "samples.csv", _columns("y", d) + _columns("z", d),
                 np.hstack([pairs.y, traj.final]))
    if args.trajectory:
        rows = [[k, t, *traj.states[k, 0]] for k, t in enumerate(traj.times)]
        io.write_csv(out / "trajectory.csv", ["step", "t"] + _columns("z", d), rows)
    return 0


def cmd_translate(cfg, args):
    out = _prepare(cfg, args.out)
    pairs = sample_pair(cfg.world, int(cfg.analysis["samples"]), cfg.seed)
    rng = np.random.default_rng([cfg.seed, 30])
    res = translate_pipeline(cfg.world, _field(cfg), _handle(cfg), pairs, cfg.sampler,
                             decoder=cfg.decoder, rng=rng)
    d = cfg.world.dim
    io.write_csv(out / "translations.csv",
                 _columns("y_hat", d) + _columns("x_hat", d) + _columns("x_true", d) + ["error"],
                 np.hstack([res.y_hat, res.x_hat, res.x_true, res.errors[:, None]]))
    io.write_json(out / "summary.json", {
        "mean_error": float(res.errors.mean()), "max_error": float(res.errors.max()),
        "energy_distance": analysis.energy_distance(res.x_hat, res.x_true),
    })
    return 0


def cmd_invert(cfg, args):
    out = _prepare(cfg, args.out)
    pairs = sample_pair(cfg.world, int(cfg.analysis["samples"]), cfg.seed)
    z_inv = invert(_field(cfg), pairs.x2, cfg.sampler, zT=pairs.y)
    d = cfg.world.dim
    io.write_csv(out / "inversions.csv", _columns("x", d) + _columns("y", d) + _columns("z_inv", d),
                 np.hstack([pairs.x2, pairs.y, z_inv]))
    return 0


def cmd_domains_dump(cfg, args):
    out = _prepare(cfg, args.out)
    n = args.n or int(cfg.analysis["samples"])
    pairs = sample_pair(cfg.world, n, cfg.seed)
    d = cfg.world.dim
    io.write_csv(out / "pairs.csv", _columns("y", d) + _columns("x1_", d) + _columns("x2_", d),
                 np.hstack([pairs.y, pairs.x1, pairs.x2]))
    return 0


def cmd_verify_bound(cfg, args):
    out = _prepare(cfg, args.out)
    a = cfg.analysis
    rep = analysis.verify_bound(cfg.world, _field(cfg), _handle(cfg), cfg.sampler,
                                delta=float(a["delta"]), trials=int(a["trials"]), decoder=cfg.decoder,
                                field_error=analysis.FieldError(float(a["field_error"])),
                                n_ref=int(a["n_ref"]), seed=cfg.seed)
    io.write_csv(out / "budgets.csv", ["trial"] + analysis.BUDGET_COLUMNS,
                 [[i] + b.as_row() for i, b in enumerate(rep.budgets)])
    summary = rep.summary()
    stochastic = float(a["field_error"]) > 0
    if stochastic:
        delta = float(a["delta"])
        allowed = delta + 3.0 * np.sqrt(delta * (1 - delta) / rep.trials)
        summary["allowed_violation_rate"] = allowed
        ok = rep.violation_rate <= allowed
    else:
        ok = rep.violations == 0
    summary["passed"] = bool(ok)
    io.write_json(out / "summary.json", summary)
    print(f"violations={rep.violations} trials={rep.trials} passed={ok}")
    _check(cfg, ok, f"bound violated in {rep.violations} of {rep.trials} trials")
    return 0


def cmd_convergence(cfg, args):
    out = _prepare(cfg, args.out)
    field = _field(cfg)
    pairs = sample_pair(cfg.world, 1, cfg.seed)
    zT = pairs.y[0]
    t0 = float(cfg.analysis["convergence_t_start"])
    base = SamplerConfig.from_dict({**cfg.sampler.to_dict(), "t_start": t0, "finalize": "none"})
    z_start = None
    if t0 < 1.0 and cfg.model.get("oracle", True):
        mean, var = cfg.world.target_domain().marginal(base.t_hi, zT, cfg.schedule)
        z_start = mean + np.sqrt(var)
    res = analysis.convergence_study(field, zT, cfg.analysis["n_list"], base, z_start=z_start,
                                     n_ref=int(cfg.analysis["n_ref"]))
    io.write_csv(out / "convergence.csv", ["n_steps", "tau", "error"],
                 np.column_stack([res.n_steps, res.step_sizes, res.errors]))
    ok = abs(res.slope - 1.0) <= 0.15
    io.write_json(out / "summary.json", {"slope": res.slope, "intercept": res.intercept, "passed": ok})
    print(f"slope={res.slope:.4f} passed={ok}")
    _check(cfg, ok, f"convergence slope {res.slope:.4f} is outside 1.0 +/- 0.15")
    return 0


def cmd_metrics(args):
    a = np.loadtxt(args.a, delimiter=",", skiprows=1, ndmin=2)
    b = np.loadtxt(args.b, delimiter=",", skiprows=1, ndmin=2)
    rep = analysis.alignment_metrics(a, b, k=args.k)
    result = {"cosine": rep.cosine, "cknna": rep.cknna, "excluded_zero_rows": rep.excluded, "k": args.k}
    if args.source:
        src = np.loadtxt(args.source, delimiter=",", skiprows=1, ndmin=2)
        result["delta_cosim"] = analysis.delta_cosim(a, b, src)
    if args.out:
        io.write_json(args.out, result)
    else:
        import json
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_encoder_fit(args):
    images = enc.demo_images(args.images, seed=args.seed)
    filt = enc.RetinaFilter(args.sigma_c, args.w_s, args.iterations)
    feats = np.concatenate([enc.patch_features(filt.apply(im), args.patch) for im in images])
    proj = enc.pca_fit(feats, args.components)
    Path(args.out).write_bytes(proj.to_bytes())
    print(f"fitted {proj.n_components} components on {feats.shape[0]} patch features")
    return 0


def cmd_encoder_apply(args):
    proj = enc.PcaProjector.from_bytes(Path(args.projector).read_bytes())
    images = enc.demo_images(args.images, seed=args.seed)
    filt = enc.RetinaFilter(args.sigma_c, args.w_s, args.iterations)
    spec = enc.EndpointSpec(args.b, "channel_average" if args.groups > 1 else "none", max(args.groups, 1))
    rng = np.random.default_rng([args.seed, 40])
    rows = []
    for i, im in enumerate(images):
        zT = enc.build_endpoint(enc.patch_features(filt.apply(im), args.patch), proj, spec, rng)
        for p, row in enumerate(zT):
            rows.append([i, p, *row])
    width = len(rows[0]) - 2
    io.write_csv(args.out, ["image", "patch"] + _columns("z", width), rows)
    return 0


TASKS = {"verify-bound": cmd_verify_bound, "convergence": cmd_convergence, "translate": cmd_translate,
         "sample": cmd_sample, "invert": cmd_invert, "train": cmd_train, "domains-dump": cmd_domains_dump}


def cmd_run(cfg, args):
    base = Path(args.out or cfg.output_dir)
    _prepare(cfg, base)
    status = 0
    for task in cfg.analysis["tasks"]:
        if task not in TASKS:
            raise config_mod.ConfigError(f"invalid field 'analysis.tasks': unknown task {task!r}")
        sub = argparse.Namespace(out=str(base / task), record_every=1, trajectory=False, n=None)
        status |= TASKS[task](cfg, sub)
        if task == "train":
            # later tasks in the same run use the model just trained
            cfg.model["checkpoint"] = str(base / task / "model.bkt")
    return status


# -- parser ------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bridgekit", description="Endpoint-conditioned bridge translation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sch = sub.add_parser("schedule", help="schedule utilities")
    sch_sub = sch.add_subparsers(dest="action", required=True)
    dump = sch_sub.add_parser("dump", help="CSV of schedule weights and derivatives")
    dump.add_argument("--kind", choices=["linear", "snr", "rectified"], default="linear")
    dump.add_argument("--gamma-max", type=float, default=0.1)
    dump.add_argument("--beta-min", type=float, default=0.1)
    dump.add_argument("--beta-max", type=float, default=20.0)
    dump.add_argument("--n", type=int, default=101)
    dump.add_argument("--out")
    dump.set_defaults(func=lambda a: cmd_schedule_dump(a))

    def with_config(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", help="output directory (defaults to output_dir in the config)")
        sp.add_argument("--no-strict", action="store_true", help="report violations without failing")
        sp.set_defaults(func=fn, needs_config=True)
        return sp

    with_config("train", cmd_train, "train a velocity net on the configured world")
    s = with_config("sample", cmd_sample, "reverse-ODE (SDE when sampler.g > 0) samples from world endpoints")
    s.add_argument("--record-every", type=int, default=1)
    s.add_argument("--trajectory", action="store_true", help="also dump the first trajectory")
    with_config("translate", cmd_translate, "encode, translate and decode paired samples")
    with_config("invert", cmd_invert, "PF-ODE inversion of target samples")
    with_config("verify-bound", cmd_verify_bound, "measure the four-term translation error budget")
    with_config("convergence", cmd_convergence, "Euler convergence-order study")
    with_config("run", cmd_run, "run the tasks listed in analysis.tasks")

    dom = sub.add_parser("domains", help="toy world utilities")
    dom_sub = dom.add_subparsers(dest="action", required=True)
    dd = dom_sub.add_parser("dump", help="CSV of paired samples")
    dd.add_argument("--config", required=True)
    dd.add_argument("--out")
    dd.add_argument("--n", type=int)
    dd.add_argument("--no-strict", action="store_true")
    dd.set_defaults(func=cmd_domains_dump, needs_config=True)

    met = sub.add_parser("metrics", help="cosine / CKNNA between two feature CSVs")
    met.add_argument("--a", required=True)
    met.add_argument("--b", required=True)
    met.add_argument("--source", help="source features for the alignment gain")
    met.add_argument("--k", type=int, default=10)
    met.add_argument("--out")
    met.set_defaults(func=lambda a: cmd_metrics(a))

    en = sub.add_parser("encoder", help="retina filter + PCA endpoint encoder on demo images")
    en_sub = en.add_subparsers(dest="action", required=True)
    for name in ("fit", "apply"):
        sp = en_sub.add_parser(name)
        sp.add_argument("--images", type=int, default=32)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--sigma-c", type=float, default=1.0)
        sp.add_argument("--w-s", type=float, default=1.0)
        sp.add_argument("--iterations", type=int, default=2)
        sp.add_argument("--patch", type=int, default=8)
        sp.add_argument("--out", required=True)
        if name == "fit":
            sp.add_argument("--components", type=int, default=4)
            sp.set_defaults(func=lambda a: cmd_encoder_fit(a))
        else:
            sp.add_argument("--projector", required=True)
            sp.add_argument("--b", type=float, default=0.0)
            sp.add_argument("--groups", type=int, default=1)
            sp.set_defaults(func=lambda a: cmd_encoder_apply(a))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "needs_config", False):
            cfg = config_mod.load(args.config)
            if args.no_strict:
                cfg.strict = False
            return args.func(cfg, args)
        return args.func(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StrictViolation as exc:
        print(f"strict check failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
