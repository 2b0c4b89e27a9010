"""How well do random-weight networks keep the rotation law?

Prints, per layer, the worst quarter-turn residual and the relative
magnitude residual at 45 degrees for the four ablation switches.  Quarter
turns are exact for every variant; only up-scaling plus the circular mask
keeps the 45-degree residual small.
"""
import numpy as np

from hnext.config import desk_config, hnet_baseline_config
from hnext.model import init_params
from hnext.verify import phase_law_residual

VARIANTS = {
    "hnet": hnet_baseline_config(),
    "up": desk_config(True, False),
    "mask": desk_config(False, True),
    "up+mask": desk_config(True, True),
}


def main() -> None:
    rng = np.random.default_rng(0)
    images = rng.random((4, 28, 28))
    print(f"{'variant':8s} {'layer':>5s} {'90/180/270 abs':>15s} {'45 deg rel':>11s}")
    for name, config in VARIANTS.items():
        params = init_params(config, seed=0)
        quarter = [phase_law_residual(config, params, images, q * np.pi / 2) for q in (1, 2, 3)]
        oblique = phase_law_residual(config, params, images, np.pi / 4)
        for layer, per_order in enumerate(oblique):
            exact = max(max(a for a, _ in turn[layer].values()) for turn in quarter)
            rel = max(g for _, g in per_order.values())
            print(f"{name:8s} {layer:5d} {exact:15.1e} {rel:11.3f}")


if __name__ == "__main__":
    main()
