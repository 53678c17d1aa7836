"""Run the desk-scale ablations and print one line per result.

Usage::

    python scripts/ablations.py rotlight --work runs/ablations
    python scripts/ablations.py residual --work runs/ablations
    python scripts/ablations.py ao
    python scripts/ablations.py consistency --work runs/ablations
"""

import argparse
import logging
import sys
from pathlib import Path

from rotinv.pipeline import experiments as ex


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=["rotlight", "residual", "ao", "consistency"])
    p.add_argument("--work", default="runs/ablations", help="scratch directory for datasets and runs")
    p.add_argument("--verbose", action="store_true")
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    log = logging.getLogger("ablations").info
    work = Path(a.work)
    if a.experiment == "rotlight":
        r = ex.rotlight_ablation(work, log)
        print(f"rotlight: K3 {r.psnr_k3:.3f} dB  K1 {r.psnr_k1:.3f} dB  gain {r.gain:.3f} dB  runtime {r.runtime:.0f} s")
    elif a.experiment == "residual":
        r = ex.residual_ablation(work, log)
        print(f"residual: cavity albedo MSE with {r.mse_with:.6f}  without {r.mse_without:.6f}")
    elif a.experiment == "ao":
        r = ex.ao_comparison()
        print(f"ao: mean abs error mesh {r.err_mesh:.5f}  gaussian {r.err_gaussian:.5f}  ({r.n_points} points)")
    else:
        d = ex.self_consistency(work / "rotlight_k3", log=log)
        print(f"consistency: relight vs stage-2 render mean abs {d:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
