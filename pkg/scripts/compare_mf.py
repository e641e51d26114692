"""DifFaiRec against the matrix-factorization baseline over several seeds.

    python scripts/compare_mf.py --config configs/ml_subsample.cfg --seeds 5
"""

from _common import parser, print_results, setup

from diffairec.experiments import compare_variants


def main():
    args = parser(__doc__).parse_args()
    cfg = setup(args)
    res = compare_variants(cfg, range(args.seeds), {"diffairec": {"model": "diffairec"}, "mf": {"model": "mf"}})
    print_results(res, f"DifFaiRec vs MF on {cfg.dataset}, attribute {cfg.attribute}, k={cfg.top_k}")


if __name__ == "__main__":
    main()
