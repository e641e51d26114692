"""Full model against its two ablations over several seeds.

    python scripts/ablation.py --config configs/planted.cfg --seeds 5
"""

from _common import parser, print_results, setup

from diffairec.experiments import compare_variants
from diffairec.model import VARIANTS


def main():
    args = parser(__doc__).parse_args()
    cfg = setup(args)
    res = compare_variants(cfg, range(args.seeds), {v: {"model": "diffairec", "variant": v} for v in VARIANTS})
    print_results(res, f"ablation on {cfg.dataset}, k={cfg.top_k}")
    base, nocf = res["base"], res["no_counterfactual"]
    wins = sum(b.E_at_k < n.E_at_k and b.A_at_k < n.A_at_k for b, n in zip(base, nocf))
    print(f"base fairer than no_counterfactual on both A@k and E@k in {wins}/{len(base)} seeds")


if __name__ == "__main__":
    main()
