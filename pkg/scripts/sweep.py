"""Diffusion-step count or noise scale sweep over several seeds.

    python scripts/sweep.py --config configs/planted.cfg --seeds 3 sweep_param=T sweep_values=10,50,100
"""

from _common import parser, print_results, setup

from diffairec.diffusion import PredictionError, TrainingDiverged
from diffairec.experiments import prepare, run_once, seeded


def main():
    args = parser(__doc__).parse_args()
    cfg = setup(args)
    res = {}
    for v in cfg.sweep_values:
        change = {"T": int(v), "t_start": min(cfg.t_start, int(v))} if cfg.sweep_param == "T" else {"L": v}
        c = cfg.replace(**change)
        label = f"{cfg.sweep_param}={change[cfg.sweep_param]}"
        res[label] = []
        for seed in range(args.seeds):
            s = seeded(c, seed)
            try:
                res[label].append(run_once(s, prepare(s))[0])
            except (TrainingDiverged, PredictionError) as exc:
                print(f"{label} seed {seed}: diverged ({exc})")
        if not res[label]:
            del res[label]
    print_results(res, f"sweep over {cfg.sweep_param} on {cfg.dataset}")


if __name__ == "__main__":
    main()
