"""Compare parity readout modes A, B and C on one simulated projected dataset."""

import argparse
import logging

import numpy as np

from fbt.bootstrap import BootstrapConfig, bootstrap, free_mask
from fbt.estimator import Estimator
from fbt.gateset import ideal_two_qubit_gateset
from fbt.parity import unpack_to_native
from fbt.simulator import NoiseInjection, generate_random_sequences, simulate_projected

MODES = {"A": dict(mode="A", keep="odd"), "B": dict(mode="B", keep="even"), "C": dict(mode="C")}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sequences", type=int, default=1000)
    p.add_argument("--lengths", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--shots", type=int, default=100)
    p.add_argument("--seed", type=int, default=21)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    gs = ideal_two_qubit_gateset()
    inj = NoiseInjection(static={"x1": {"H_IX": 0.01, "S_ZI": 2e-3}, "x2": {"H_IZ": 5e-3}, "cz": {"S_ZZ": 2e-3}})
    per = args.sequences // len(args.lengths)
    seqs = [s for k, L in enumerate(args.lengths) for s in generate_random_sequences(gs.labels, L, per, [args.seed, k])]
    data = simulate_projected(gs, inj, seqs, args.shots, args.seed)
    prior = bootstrap(BootstrapConfig(guessed_cov_scale=1e-4), gs)
    states = {}
    for name, kw in MODES.items():
        est = Estimator(gs, prior.copy(), seed=4)
        est.process_many(unpack_to_native(data, **kw))
        states[name] = est.state
    mask = free_mask(prior.registry, gs)
    for g in gs.labels:
        if g in gs.frozen:
            continue
        sl = prior.registry.slice(g)
        m = mask[sl]
        for a, b in (("A", "B"), ("A", "C"), ("B", "C")):
            sa, sb = states[a], states[b]
            z = np.abs(sa.mean[sl] - sb.mean[sl])[m] / np.sqrt(np.diag(sa.cov)[sl] + np.diag(sb.cov)[sl])[m]
            print(f"{g:3s} {a} vs {b}: max |diff|/pooled SD = {z.max():.2f}")
    for name, st in states.items():
        print(f"mode {name}: mean posterior SD over free gate entries {np.sqrt(np.diag(st.cov))[mask].mean():.2e}")


if __name__ == "__main__":
    main()
