"""Minority-group under-sampling over several seeds.

    python scripts/sparsity.py --config configs/planted.cfg --seeds 5 sample_ratios=0.5,0.7,0.9
"""

from _common import parser, print_results, setup

from diffairec.experiments import compare_variants


def main():
    args = parser(__doc__).parse_args()
    cfg = setup(args)
    arms = {"base": {}} | {f"ratio={r}": {"ratio": r} for r in cfg.sample_ratios}
    res = compare_variants(cfg, range(args.seeds), arms)
    print_results(res, f"minority under-sampling on {cfg.dataset}, k={cfg.top_k}")


if __name__ == "__main__":
    main()
