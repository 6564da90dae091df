"""Per-activation FLOPs for width-matched Switch SAEs against a dense TopK SAE."""

import argparse

from switch_sae.model import ArchSpec, flops_per_activation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=768)
    ap.add_argument("--M", type=int, default=24576)
    ap.add_argument("--k", type=int, default=32)
    ap.add_argument("--experts", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128])
    args = ap.parse_args()

    dense = flops_per_activation(ArchSpec("topk", args.d, args.M, 1, args.k))
    print(f"dense encoder FLOPs {dense.encoder_flops}")
    print(f"{'N':>5} {'encoder':>12} {'router':>10} {'ratio':>9} {'1/N':>9} {'1.1/N':>9}  within")
    for N in args.experts:
        sw = flops_per_activation(ArchSpec("switch", args.d, args.M, N, args.k))
        ratio = (sw.encoder_flops + sw.router_flops) / dense.encoder_flops
        ok = 1 / N <= ratio <= 1.1 / N
        print(f"{N:>5} {sw.encoder_flops:>12} {sw.router_flops:>10} {ratio:>9.5f} {1 / N:>9.5f} "
              f"{1.1 / N:>9.5f}  {'yes' if ok else 'no'}")
    # the router term N*d grows while the encoder term M*d/N shrinks; the band
    # [1/N, 1.1/N] holds only while N*N <= 0.1*M
    print(f"largest N inside the band: N*N <= {0.1 * args.M:.0f}")


if __name__ == "__main__":
    main()
