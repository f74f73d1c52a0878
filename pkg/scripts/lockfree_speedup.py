#!/usr/bin/env python3
"""Compare the lock-free update protocol against the synchronous baseline.

Runs the toy trainer under both modes over several seeds and prints
throughput, speedup, final validation losses, and staleness.
"""
import argparse

from hiermem.lockfree import AdamHyper, DelayModel, ToyTrainConfig, run_lockfree, run_sync


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--iters", type=int, default=300)
    parser.add_argument("--layers", type=int, default=4)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--delays", default="ssd", choices=["ssd", "cpu", "zero"])
    args = parser.parse_args()

    delays = DelayModel.preset(args.delays)
    print(f"{'seed':>5} {'sync smp/s':>12} {'lockfree smp/s':>15} {'speedup':>8} "
          f"{'sync val':>9} {'lf val':>9} {'gap%':>6} {'max stale':>9}")
    for seed in args.seeds:
        cfg = ToyTrainConfig(num_layers=args.layers, dim=args.dim,
                             batch_size=args.batch, seed=seed, noise_std=1.0,
                             hyper=AdamHyper(lr=args.lr))
        sync = run_sync(cfg, delays, args.iters)
        lockfree = run_lockfree(cfg, delays, args.iters)
        speedup = lockfree.samples_per_s / sync.samples_per_s
        gap = 100 * abs(lockfree.val_loss - sync.val_loss) / sync.val_loss
        print(f"{seed:>5} {sync.samples_per_s:>12.0f} {lockfree.samples_per_s:>15.0f} "
              f"{speedup:>8.2f} {sync.val_loss:>9.4f} {lockfree.val_loss:>9.4f} "
              f"{gap:>6.2f} {lockfree.max_staleness:>9}")
        print(f"      sync idle {sync.gpu_idle_fraction:.3f}, "
              f"staleness histogram {dict(sorted(lockfree.staleness_histogram.items()))}")


if __name__ == "__main__":
    main()
