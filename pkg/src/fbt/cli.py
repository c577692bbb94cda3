"""Command line entry point: every pipeline stage is reachable offline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bayes import load_state, save_state
from .bootstrap import config_from_dict, bootstrap
from .estimator import Estimator
from .gateset import dump_gateset, ideal_two_qubit_gateset, load_gateset
from .linearize import gateset_from_residual
from .postproc import decompose_generator, error_generator, gauge_optimize, infidelity_report
from .records import read_records, write_records
from .simulator import load_config_file, simulate, simulate_batch


def _gateset(args):
    return load_gateset(args.gateset) if getattr(args, "gateset", None) else ideal_two_qubit_gateset()


def _load_estimator(path, gs, seed=0) -> Estimator:
    """Estimator checkpoints carry runtime state; bare state files start a fresh runtime."""
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as npz:
            if "runtime" in npz.files:
                return Estimator.from_arrays({k: npz[k] for k in npz.files})
    return Estimator(gs, load_state(path), seed=seed)


def cmd_bootstrap(args) -> int:
    gs = _gateset(args)
    doc = json.loads(Path(args.config).read_text()) if args.config else {"strategy": "blind_cold"}
    prior = load_state(doc["checkpoint"]) if doc.get("strategy") == "full_warm" else None
    state = bootstrap(config_from_dict(doc, prior_estimate=prior), gs)
    save_state(state, args.out)
    print(f"wrote {args.out} ({state.provenance}, {state.mean.size} parameters)")
    return 0


def cmd_update(args) -> int:
    gs = _gateset(args)
    est = _load_estimator(args.state, gs, args.seed)
    recs = read_records(args.records)
    summaries = est.process_many(recs)
    est.save(args.out)
    lines = [json.dumps(s.to_dict()) for s in summaries]
    if args.summaries:
        Path(args.summaries).write_text("\n".join(lines) + ("\n" if lines else ""))
    else:
        print("\n".join(lines))
    return 0


def cmd_simulate(args) -> int:
    gs = _gateset(args)
    plan, inj = load_config_file(args.config)
    recs = simulate(plan, inj, gs)
    write_records(recs, args.out)
    print(f"wrote {len(recs)} records to {args.out}")
    return 0


def cmd_length_sweep(args) -> int:
    from .experiments import SweepConfig, run_length_sweep, simulate_length_corpora

    gs = _gateset(args)
    plan, inj = load_config_file(args.config)
    data = simulate_length_corpora(gs, inj, plan)
    cfg = SweepConfig(n_draws=args.draws, coefficients=tuple(args.coefficients), seed=plan.seed)
    res = run_length_sweep(gs, data, plan.lengths, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "length_sweep.csv")
    res.to_json(out / "length_sweep.json")
    for row in res.rows():
        if row["gate"] == args.gate:
            print(f"L={row['L']:4d} {row['gate']} {row['coefficient']}: {row['value']:+.3e} [{row['ci_low']:+.3e}, {row['ci_high']:+.3e}]")
    return 0


def cmd_drift_track(args) -> int:
    from .bootstrap import BootstrapConfig
    from .experiments import DriftConfig, run_drift_tracking

    gs = _gateset(args)
    plan, inj = load_config_file(args.config)
    batches = [simulate_batch(plan, inj, gs, b) for b in range(plan.n_batches)]
    boot = BootstrapConfig("full_warm", prior_estimate=load_state(args.warm_start)) if args.warm_start else BootstrapConfig()
    cfg = DriftConfig(boot=boot, forgetting=args.forgetting, process_noise=args.process_noise, checkpoint_dir=args.checkpoint_dir)
    res = run_drift_tracking(gs, batches, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "drift_track.csv")
    res.to_json(out / "drift_track.json")
    for b in res.batches:
        print(f"batch {b.batch:4d} t={b.lab_time:9.1f} " + " ".join(f"{g}:{v:.2e}" for g, v in b.eps_ent.items()))
    return 0


def cmd_gauge_opt(args) -> int:
    gs = _gateset(args)
    state = load_state(args.state)
    fit = gauge_optimize(gateset_from_residual(gs, state.mean, state.registry), gs, args.w_g, args.w_s)
    dump_gateset(fit.gateset, args.out)
    print(f"gauge objective {fit.history[0]:.3e} -> {fit.objective:.3e}; wrote {args.out}")
    return 0


def cmd_taxonomy(args) -> int:
    gs = _gateset(args)
    state = load_state(args.state)
    est_gs = gateset_from_residual(gs, state.mean, state.registry)
    if not args.no_gauge:
        est_gs = gauge_optimize(est_gs, gs).gateset
    gates = [args.gate] if args.gate else [g for g in gs.labels if g not in gs.frozen]
    print("gate,label,class,coefficient,contribution")
    for g in gates:
        rows = decompose_generator(error_generator(est_gs.noise[g])).rows()
        rows.sort(key=lambda r: abs(r["contribution"]), reverse=True)
        for r in rows[: args.top]:
            print(f"{g},{r['label']},{r['class']},{r['coefficient']:.6e},{r['contribution']:.6e}")
        rep = infidelity_report(est_gs.noise[g])
        print(f"# {g}: eps_ent={rep.eps_ent:.4e} eps_J={rep.eps_J:.4e} theta_J^2={rep.theta_J_sq:.4e}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.bind, args.checkpoint_dir)
    return 0


def cmd_checkpoint(args) -> int:
    """Convert between binary (.npz) and text (.json) checkpoints."""
    state = load_state(args.state)
    save_state(state, args.out)
    print(f"wrote {args.out} (update_count={state.update_count})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbt", description="Streaming Bayesian gate-set tomography")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--gateset", help="gate-set document (default: ideal five-gate CZ set)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("bootstrap", cmd_bootstrap, "build a prior")
    sp.add_argument("--config", help="bootstrap config JSON")
    sp.add_argument("--out", required=True)

    sp = add("update", cmd_update, "apply a record file to a state")
    sp.add_argument("--state", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--summaries")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("simulate", cmd_simulate, "simulate records from a plan/injection document")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    exp = sub.add_parser("experiment", help="end-to-end experiments")
    esub = exp.add_subparsers(dest="experiment", required=True)
    sp = esub.add_parser("length-sweep")
    sp.add_argument("--gateset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--draws", type=int, default=1000)
    sp.add_argument("--gate", default="x2")
    sp.add_argument("--coefficients", nargs="+", default=["H_IZ", "H_ZI", "H_ZZ"])
    sp.set_defaults(func=cmd_length_sweep)
    sp = esub.add_parser("drift-track")
    sp.add_argument("--gateset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--warm-start", help="state used as the first batch's prior")
    sp.add_argument("--forgetting", type=float, default=0.0)
    sp.add_argument("--process-noise", type=json.loads, help='per-batch generator random walk, e.g. \'{"S": 1e-6}\'')
    sp.add_argument("--checkpoint-dir")
    sp.set_defaults(func=cmd_drift_track)

    sp = add("gauge-opt", cmd_gauge_opt, "gauge-optimize a posterior mean")
    sp.add_argument("--state", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--w-g", type=float, default=1.0)
    sp.add_argument("--w-s", type=float, default=1e-3)

    sp = add("taxonomy", cmd_taxonomy, "error-generator table of a posterior mean")
    sp.add_argument("--state", required=True)
    sp.add_argument("--gate")
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--no-gauge", action="store_true")

    sp = sub.add_parser("serve", help="run the HTTP session service")
    sp.add_argument("--bind", help="host:port (default from FBT_BIND or 127.0.0.1:8750)")
    sp.add_argument("--checkpoint-dir")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("checkpoint", help="convert a state checkpoint between .npz and .json")
    sp.add_argument("--state", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_checkpoint)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
